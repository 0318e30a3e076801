//! Tiny fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use maskctl_core::conditioning::{init_controlnet_from_backbone, ControlParams, MaskMode, ADAPTER_PREFIX};
use maskctl_core::diffusion_core::{NoiseSchedule, UNetConfig};
use maskctl_core::latent_codec::{VaeConfig, VaeParams};
use maskctl_core::seeding::{rng_for, stream};
use maskctl_core::synthetic_data::{generate_records, SceneRecord, SceneSpec};
use maskctl_core::training::{
    control_loss_graph, draw_noise, Backbone, ControlBatch, LossBindings, TrainingData,
};
use maskctl_tensor::{Graph, ParamStore, Tensor};
use rand::Rng;

pub const TINY_SIZE: usize = 16;

pub fn tiny_spec() -> SceneSpec {
    SceneSpec {
        image_size: TINY_SIZE,
        ..SceneSpec::default()
    }
}

pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        latent_channels: 2,
        base_width: 8,
        multipliers: vec![1, 2],
        res_blocks: 1,
        time_dim: 16,
        text_dim: 8,
        groups: 4,
    }
}

pub fn tiny_vae(seed: u64) -> VaeParams {
    VaeParams::init(
        VaeConfig {
            widths: [4, 4, 8, 8],
            latent_channels: 2,
        },
        seed,
    )
}

pub fn tiny_backbone(seed: u64) -> Backbone {
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    Backbone::init(tiny_vae(seed), tiny_unet(), schedule, seed).unwrap()
}

pub fn tiny_records(n: usize, seed: u64) -> Vec<SceneRecord> {
    generate_records(&tiny_spec(), n, seed).unwrap()
}

/// Fills every zero convolution with small random weights so gradients reach
/// the control encoder.
pub fn perturb_zero_convs(control: &mut ControlParams, seed: u64) {
    let mut rng = rng_for(seed, stream::INIT, 99);
    for (name, t) in control.store.iter_mut() {
        if name.contains("zero.") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

/// Everything the double-precision loss needs.
pub struct F64Problem {
    pub backbone: Backbone,
    pub vae: ParamStore<f64>,
    pub unet: ParamStore<f64>,
    pub text: ParamStore<f64>,
    pub control: ParamStore<f64>,
    pub batch: ControlBatch<f64>,
}

impl F64Problem {
    pub fn new(seed: u64, mode: MaskMode, batch_size: usize) -> Self {
        let backbone = tiny_backbone(seed);
        let mut control = init_controlnet_from_backbone(&backbone.unet, mode, seed);
        perturb_zero_convs(&mut control, seed);
        let records = tiny_records(batch_size, seed);
        let data = TrainingData::prepare(&records, &backbone).unwrap();
        let mut rng = rng_for(seed, stream::BATCH, 0);
        let shape = backbone.latent_shape(TINY_SIZE);
        let (ts, eps) = draw_noise(&mut rng, batch_size, &shape, backbone.schedule.steps());
        let picks: Vec<usize> = (0..batch_size).collect();
        let b32 = data.batch(&picks, mode, ts, eps).unwrap();
        let batch = ControlBatch {
            stack: b32.stack.cast(),
            z0: b32.z0.cast(),
            tokens: b32.tokens,
            ts: b32.ts,
            eps: b32.eps.cast(),
        };
        Self {
            vae: backbone.vae.store.cast(),
            unet: backbone.unet.store.cast(),
            text: backbone.text.store.cast(),
            control: control.store.cast(),
            backbone,
            batch,
        }
    }

    pub fn loss(&self, control: &ParamStore<f64>) -> f64 {
        let g = Graph::<f64>::new();
        let b = LossBindings::new(&g, control, &self.vae, &self.unet, &self.text, false);
        let loss = control_loss_graph(&b, &self.backbone.unet.config, &self.backbone.schedule, &self.batch).unwrap();
        g.value(loss).item()
    }

    pub fn loss_and_grads(&self) -> (f64, std::collections::BTreeMap<String, Tensor<f64>>) {
        let g = Graph::<f64>::new();
        let b = LossBindings::new(&g, &self.control, &self.vae, &self.unet, &self.text, true);
        let loss = control_loss_graph(&b, &self.backbone.unet.config, &self.backbone.schedule, &self.batch).unwrap();
        let value = g.value(loss).item();
        let mut grads = g.backward(loss).unwrap();
        (value, b.control_gradients(&mut grads))
    }
}

#[derive(Debug)]
pub struct GradProbe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Which part of the conditioning branch a tensor belongs to.
pub fn component(name: &str) -> &'static str {
    if name.starts_with(ADAPTER_PREFIX) {
        "adapter"
    } else if name.contains("zero.") {
        "zero_conv"
    } else if name.contains("hint.") {
        "hint"
    } else {
        "encoder"
    }
}

/// Five-point central differences on `per_component` random elements of each of the
/// adapter, zero-conv and control-encoder groups.
pub fn gradient_probes(problem: &F64Problem, per_component: usize, seed: u64) -> Vec<GradProbe> {
    let (_, grads) = problem.loss_and_grads();
    let mut rng = rng_for(seed, stream::INIT, 7);
    // Fourth-order stencil: truncation O(h^4) lets h be large enough that
    // roundoff stays negligible even for gradients near 1e-8.
    let h = 1e-3;
    let mut probes = Vec::new();
    for group in ["adapter", "zero_conv", "encoder"] {
        let names: Vec<&String> = grads.keys().filter(|n| component(n) == group).collect();
        assert!(!names.is_empty(), "no tensors in group {group}");
        for _ in 0..per_component {
            let name = names[rng.random_range(0..names.len())].clone();
            let len = grads[&name].len();
            let index = rng.random_range(0..len);
            let at = |delta: f64| {
                let mut shifted = problem.control.clone();
                shifted.get_mut(&name).unwrap().data_mut()[index] += delta;
                problem.loss(&shifted)
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            probes.push(GradProbe {
                analytic: grads[&name].data()[index],
                tensor: name,
                index,
                numeric,
            });
        }
    }
    probes
}

pub fn tensor_of(data: &[f32], shape: &[usize]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}
