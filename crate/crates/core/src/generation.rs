//! Inference: caption and image prompt in, sampled image out.

use maskctl_tensor::Tensor;

use crate::conditioning::{assemble_condition_batch, controlnet_forward, text_encode, ControlParams};
use crate::diffusion_core::{denoise_predict, Sampler};
use crate::error::{CoreError, Result};
use crate::latent_codec::vae_decode;
use crate::raster::{Image, Mask};
use crate::training::Backbone;

#[derive(Clone, Copy, Debug)]
pub struct Request<'a> {
    pub reference: &'a Image,
    pub mask: &'a Mask,
    pub caption: &'a str,
    pub seed: u64,
}

const CHUNK: usize = 32;

/// Samples latents for `requests`. Without `control` the backbone runs
/// alone (reference and mask are ignored). Each output depends only on its
/// own request.
pub fn generate_latents(
    backbone: &Backbone,
    control: Option<&ControlParams>,
    requests: &[Request<'_>],
    sampler: Sampler,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for chunk in requests.chunks(CHUNK) {
        parts.push(generate_chunk(backbone, control, chunk, sampler)?);
    }
    let items: Vec<Tensor<f32>> = parts
        .iter()
        .flat_map(|t| (0..t.dim(0)).map(move |i| t.batch_item(i)))
        .collect();
    Ok(Tensor::stack(&items)?)
}

fn generate_chunk(
    backbone: &Backbone,
    control: Option<&ControlParams>,
    requests: &[Request<'_>],
    sampler: Sampler,
) -> Result<Tensor<f32>> {
    let first = requests
        .first()
        .ok_or_else(|| CoreError::Argument("no generation requests".into()))?;
    let (w, h) = first.reference.size();
    if w != h {
        return Err(CoreError::Shape(format!("reference must be square, got {w}x{h}")));
    }
    let latent_shape = backbone.latent_shape(w);
    let texts: Vec<Tensor<f32>> = requests
        .iter()
        .map(|r| text_encode(r.caption, &backbone.text))
        .collect::<Result<_>>()?;
    let text = Tensor::stack(&texts)?.reshape(&[requests.len(), texts[0].len()])?;
    let cond = match control {
        Some(c) => {
            let pairs: Vec<(&Image, &crate::raster::Mask)> =
                requests.iter().map(|r| (r.reference, r.mask)).collect();
            Some(assemble_condition_batch(&pairs, c, &backbone.vae)?)
        }
        None => None,
    };
    let seeds: Vec<u64> = requests.iter().map(|r| r.seed).collect();
    let cfg = &backbone.unet.config;
    let eps_fn = |z: &Tensor<f32>, t: usize| -> Result<Tensor<f32>> {
        let ts = vec![t; z.dim(0)];
        match (control, &cond) {
            (Some(c), Some(cond)) => {
                let residuals = controlnet_forward(z, &ts, &text, cond, c, cfg)?;
                denoise_predict(z, &ts, &text, Some(&residuals), &backbone.unet)
            }
            _ => denoise_predict(z, &ts, &text, None, &backbone.unet),
        }
    };
    let z = sampler.run(eps_fn, &latent_shape, &backbone.schedule, &seeds)?;
    if !z.all_finite() {
        return Err(CoreError::Numerical {
            step: 0,
            msg: "sampler produced non-finite latents".into(),
        });
    }
    Ok(z)
}

pub fn generate(
    backbone: &Backbone,
    control: Option<&ControlParams>,
    requests: &[Request<'_>],
    sampler: Sampler,
) -> Result<Vec<Image>> {
    let z = generate_latents(backbone, control, requests, sampler)?;
    let images = vae_decode(&z, &backbone.vae)?;
    (0..requests.len()).map(|i| Image::from_tensor(&images, i)).collect()
}
