//! Small convolutional VAE: RGB images in `[0, 1]` to a 4-channel latent at
//! one eighth of the resolution and back.

use std::collections::BTreeMap;
use std::path::Path;

use maskctl_tensor::{Adam, Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::optimize::{optimize, Checkpoint, TrainLog};
use crate::raster::Image;
use crate::seeding::{rng_for, stream};
use crate::synthetic_data::SceneRecord;

pub const DOWNSAMPLE_FACTOR: usize = 8;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// Widths at full, 1/2, 1/4 and 1/8 resolution.
    pub widths: [usize; 4],
    pub latent_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64],
            latent_channels: 4,
        }
    }
}

impl VaeConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let w = self.widths.map(|v| v.to_string()).join(",");
        [
            ("kind".to_string(), "vae".to_string()),
            ("widths".to_string(), w),
            ("latent_channels".to_string(), self.latent_channels.to_string()),
        ]
        .into()
    }

    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let bad = |k: &str| CoreError::InvalidData(format!("vae config: bad or missing `{k}`"));
        if kv.get("kind").map(String::as_str) != Some("vae") {
            return Err(bad("kind"));
        }
        let widths: Vec<usize> = kv
            .get("widths")
            .ok_or_else(|| bad("widths"))?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("widths")))
            .collect::<Result<_>>()?;
        Ok(Self {
            widths: widths.try_into().map_err(|_| bad("widths"))?,
            latent_channels: kv
                .get("latent_channels")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("latent_channels"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub store: ParamStore<f32>,
}

impl VaeParams {
    pub fn init(config: VaeConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::INIT, 0);
        let [w0, w1, w2, w3] = config.widths;
        let c = config.latent_channels;
        let mut s = ParamStore::new();
        s.init_conv("enc.conv_in", w0, 3, 3, &mut rng);
        s.init_conv("enc.down0", w1, w0, 3, &mut rng);
        s.init_conv("enc.down1", w2, w1, 3, &mut rng);
        s.init_conv("enc.down2", w3, w2, 3, &mut rng);
        s.init_conv("enc.mid", w3, w3, 3, &mut rng);
        s.init_conv("enc.out", 2 * c, w3, 1, &mut rng);
        s.init_conv("dec.conv_in", w3, c, 3, &mut rng);
        s.init_conv("dec.mid", w3, w3, 3, &mut rng);
        s.init_conv("dec.up2", w2, w3, 3, &mut rng);
        s.init_conv("dec.up1", w1, w2, 3, &mut rng);
        s.init_conv("dec.up0", w0, w1, 3, &mut rng);
        s.init_conv("dec.out", 3, w0, 3, &mut rng);
        Self { config, store: s }
    }

    pub fn downsample_factor(&self) -> usize {
        DOWNSAMPLE_FACTOR
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.store.clone(),
            config: self.config.to_map(),
            optimizer: None,
            log: TrainLog::default(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let p = Self {
            config: VaeConfig::from_map(&ck.config)?,
            store: ck.params.clone(),
        };
        if !p.store.all_finite() {
            return Err(CoreError::InvalidData("vae checkpoint holds non-finite weights".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Diagonal Gaussian over latents, `[N, c, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mean: Tensor<f32>,
    pub log_variance: Tensor<f32>,
}

fn check_divisible(shape: &[usize]) -> Result<()> {
    let (h, w) = (shape[2], shape[3]);
    if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 || h == 0 || w == 0 {
        return Err(CoreError::Shape(format!(
            "image of {h}x{w} pixels: height and width must be non-zero multiples of {DOWNSAMPLE_FACTOR}"
        )));
    }
    Ok(())
}

/// Encoder on a graph: `x [N, 3, H, W]` to `(mean, clamped log-variance)`.
pub fn encode_graph<T: Float>(p: &Bound<T>, x: Var) -> Result<(Var, Var)> {
    let g = p.graph();
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoreError::Shape(format!("encoder expects [N, 3, H, W], got {shape:?}")));
    }
    check_divisible(&shape)?;
    let mut h = g.silu(p.conv(x, "enc.conv_in", 1, 1)?);
    for name in ["enc.down0", "enc.down1", "enc.down2"] {
        h = g.silu(p.conv(h, name, 2, 1)?);
    }
    h = g.silu(p.conv(h, "enc.mid", 1, 1)?);
    let moments = p.conv(h, "enc.out", 1, 0)?;
    let c = g.shape(moments)[1] / 2;
    let mean = g.narrow_channels(moments, 0, c)?;
    let logvar = g.clamp(g.narrow_channels(moments, c, c)?, LOGVAR_MIN, LOGVAR_MAX);
    Ok((mean, logvar))
}

/// Decoder on a graph: `z [N, c, h, w]` to an image in `[0, 1]`, `[N, 3, 8h, 8w]`.
pub fn decode_graph<T: Float>(p: &Bound<T>, z: Var) -> Result<Var> {
    let g = p.graph();
    let shape = g.shape(z);
    let want = p.get("dec.conv_in.weight").map(|w| g.shape(w)[1])?;
    if shape.len() != 4 || shape[1] != want {
        return Err(CoreError::Shape(format!(
            "decoder expects [N, {want}, h, w] latents, got {shape:?}"
        )));
    }
    let mut h = g.silu(p.conv(z, "dec.conv_in", 1, 1)?);
    h = g.silu(p.conv(h, "dec.mid", 1, 1)?);
    for name in ["dec.up2", "dec.up1", "dec.up0"] {
        h = g.upsample_nearest2x(h)?;
        h = g.silu(p.conv(h, name, 1, 1)?);
    }
    Ok(g.sigmoid(p.conv(h, "dec.out", 1, 1)?))
}

/// `mse(image, recon) + kl_weight * KL(q || N(0, I))`, KL averaged over latent
/// elements.
pub fn vae_loss_graph<T: Float>(
    g: &Graph<T>,
    image: Var,
    recon: Var,
    mean: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<Var> {
    let rec = g.mse(recon, image)?;
    let kl_terms = g.sub(g.add(g.square(mean), g.exp(logvar))?, g.add_scalar(logvar, 1.0))?;
    let kl = g.scale(g.mean(kl_terms), 0.5);
    Ok(g.add(rec, g.scale(kl, kl_weight))?)
}

pub fn vae_encode(images: &Tensor<f32>, vae: &VaeParams) -> Result<LatentDistribution> {
    let g = Graph::new();
    let p = Bound::new(&g, &vae.store, false);
    let (mean, logvar) = encode_graph(&p, g.constant(images.clone()))?;
    Ok(LatentDistribution {
        mean: (*g.value(mean)).clone(),
        log_variance: (*g.value(logvar)).clone(),
    })
}

pub fn encode_image(image: &Image, vae: &VaeParams) -> Result<LatentDistribution> {
    vae_encode(&image.to_tensor(), vae)
}

/// Reparameterised draw `mean + exp(log_variance / 2) * eps`.
pub fn sample_latent(dist: &LatentDistribution, seed: u64) -> Result<Tensor<f32>> {
    if dist.mean.shape() != dist.log_variance.shape() {
        return Err(CoreError::Shape("mean and log-variance shapes differ".into()));
    }
    let mut rng = rng_for(seed, stream::LATENT, 0);
    let eps = Tensor::<f32>::randn(dist.mean.shape(), &mut rng);
    let std = dist.log_variance.map(|lv| (0.5 * lv).exp());
    Ok(dist.mean.add(&std.zip_map(&eps, |s, e| s * e)?)?)
}

pub fn vae_decode(z: &Tensor<f32>, vae: &VaeParams) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let p = Bound::new(&g, &vae.store, false);
    let out = decode_graph(&p, g.constant(z.clone()))?;
    Ok((*g.value(out)).clone())
}

/// Plain-value form of [`vae_loss_graph`].
pub fn vae_loss(image: &Tensor<f32>, recon: &Tensor<f32>, dist: &LatentDistribution, kl_weight: f64) -> Result<f64> {
    if image.shape() != recon.shape() {
        return Err(CoreError::Shape(format!(
            "image {:?} vs reconstruction {:?}",
            image.shape(),
            recon.shape()
        )));
    }
    if kl_weight < 0.0 {
        return Err(CoreError::Argument("kl_weight must be >= 0".into()));
    }
    let g = Graph::new();
    let c = |t: &Tensor<f32>| g.constant(t.cast::<f64>());
    let loss = vae_loss_graph(&g, c(image), c(recon), c(&dist.mean), c(&dist.log_variance), kl_weight)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 2e-3,
            kl_weight: 1e-4,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

pub const MIN_VAE_SCENES: usize = 200;

/// Mean PSNR of `decode(mean(encode(x)))` against `x`.
pub fn reconstruction_psnr(vae: &VaeParams, images: &[&Image]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in images.chunks(32) {
        let batch = Image::batch(chunk)?;
        let recon = vae_decode(&vae_encode(&batch, vae)?.mean, vae)?;
        for (i, original) in chunk.iter().enumerate() {
            let r = Image::from_tensor(&recon, i)?;
            total += crate::evaluation::psnr(original, &r)?.min(100.0);
        }
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains the codec on `train`; the mean held-out reconstruction PSNR is
/// written to the log summary. With `checkpoint_path`, a resumable checkpoint
/// is written every `checkpoint_every` steps and at the end, and an existing
/// one is resumed from.
pub fn train_vae(
    train: &[SceneRecord],
    held_out: &[SceneRecord],
    model: VaeConfig,
    config: &VaeTrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<(VaeParams, TrainLog)> {
    if train.len() < MIN_VAE_SCENES {
        return Err(CoreError::Config(format!(
            "vae training needs at least {MIN_VAE_SCENES} scenes, got {}",
            train.len()
        )));
    }
    if config.batch_size == 0 || config.batch_size > train.len() {
        return Err(CoreError::Config("batch_size must be in 1..=dataset size".into()));
    }
    let (mut vae, mut adam, mut log) = match checkpoint_path.filter(|p| p.exists()) {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let adam = ck.optimizer.clone().unwrap_or_else(|| Adam::new(config.learning_rate));
            (VaeParams::from_checkpoint(&ck)?, adam, ck.log)
        }
        None => (
            VaeParams::init(model, config.seed),
            Adam::new(config.learning_rate),
            TrainLog::default(),
        ),
    };
    let vae_config = vae.config.clone();
    let save = |params: &ParamStore<f32>, adam: &Adam<f32>, log: &TrainLog| -> Result<()> {
        if let Some(path) = checkpoint_path {
            Checkpoint {
                params: params.clone(),
                config: vae_config.to_map(),
                optimizer: Some(adam.clone()),
                log: log.clone(),
            }
            .save(path)?;
        }
        Ok(())
    };
    optimize(
        &mut vae.store,
        &mut adam,
        &mut log,
        config.steps,
        config.seed,
        |_, rng, params| {
            let picks = sample(rng, train.len(), config.batch_size);
            let images: Vec<&Image> = picks.iter().map(|i| &train[i].image).collect();
            let x = Image::batch(&images)?;
            let g = Graph::new();
            let p = Bound::new(&g, params, true);
            let xv = g.constant(x);
            let (mean, logvar) = encode_graph(&p, xv)?;
            let noise: Vec<f32> = (0..g.value(mean).len()).map(|_| StandardNormal.sample(rng)).collect();
            let eps = g.constant(Tensor::new(&g.shape(mean), noise)?);
            let std = g.exp(g.scale(logvar, 0.5));
            let z = g.add(mean, g.mul(std, eps)?)?;
            let recon = decode_graph(&p, z)?;
            let loss = vae_loss_graph(&g, xv, recon, mean, logvar, config.kl_weight)?;
            let value = g.value(loss).item() as f64;
            let mut grads = g.backward(loss)?;
            Ok((value, p.gradients(&mut grads)))
        },
        |step, params, adam, log| {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                save(params, adam, log)?;
            }
            Ok(())
        },
    )?;
    let held: Vec<&Image> = held_out.iter().map(|r| &r.image).collect();
    if !held.is_empty() {
        let psnr = reconstruction_psnr(&vae, &held)?;
        log.summary.insert("held_out_psnr".into(), format!("{psnr:.4}"));
    }
    save(&vae.store, &adam, &log)?;
    Ok((vae, log))
}
