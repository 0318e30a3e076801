//! Noise schedule, forward noising, the ε-prediction U-Net and the DDPM and
//! DDIM samplers.
//!
//! The U-Net keeps one skip activation per encoder residual block plus the
//! middle-block output; these seven tensors are the injection points where
//! control residuals are added before the decoder consumes them.

use std::collections::BTreeMap;
use std::path::Path;

use maskctl_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::optimize::{Checkpoint, TrainLog};
use crate::seeding::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 400;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(CoreError::Argument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(CoreError::Argument(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(CoreError::Argument(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// Posterior variance of `q(z_{t-1} | z_t, z_0)`; 0 at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps` with a timestep per batch item.
pub fn forward_diffuse<T: Float>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(CoreError::Shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let n = z0.dim(0);
    if ts.len() != n {
        return Err(CoreError::Argument(format!("{} timesteps for batch of {n}", ts.len())));
    }
    let per = z0.len() / n;
    let mut out = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let (a, b) = (schedule.alpha_bars[t].sqrt(), (1.0 - schedule.alpha_bars[t]).sqrt());
        let zs = &z0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(zs.iter().zip(es).map(|(&z, &e)| T::of(a * z.as_f64() + b * e.as_f64())));
    }
    Ok(Tensor::new(z0.shape(), out)?)
}

// ----- U-Net ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    pub res_blocks: usize,
    /// Width of the sinusoidal timestep features and of the embedding MLP.
    pub time_dim: usize,
    pub text_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 32,
            multipliers: vec![1, 2, 4],
            res_blocks: 2,
            time_dim: 128,
            text_dim: 64,
            groups: 8,
        }
    }
}

impl UNetConfig {
    fn width(&self, scale: usize) -> usize {
        self.base_width * self.multipliers[scale]
    }

    /// Number of tensors control residuals can be added to.
    pub fn injection_points(&self) -> usize {
        self.multipliers.len() * self.res_blocks + 1
    }

    /// Channel count and downsampling level of each injection point.
    pub fn injection_geometry(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.multipliers.len() {
            for _ in 0..self.res_blocks {
                out.push((self.width(s), s));
            }
        }
        out.push((self.width(self.multipliers.len() - 1), self.multipliers.len() - 1));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.res_blocks == 0 || self.base_width == 0 {
            return Err(CoreError::Config("u-net needs at least one scale and block".into()));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(CoreError::Config("time_dim must be even".into()));
        }
        for s in 0..self.multipliers.len() {
            if !self.width(s).is_multiple_of(self.groups) {
                return Err(CoreError::Config(format!(
                    "width {} at scale {s} is not divisible into {} groups",
                    self.width(s),
                    self.groups
                )));
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mults = self.multipliers.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
        [
            ("latent_channels", self.latent_channels.to_string()),
            ("base_width", self.base_width.to_string()),
            ("multipliers", mults),
            ("res_blocks", self.res_blocks.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("groups", self.groups.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("unet.{k}"), v))
        .collect()
    }

    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(&format!("unet.{k}"))
                .ok_or_else(|| CoreError::InvalidData(format!("u-net config lacks `{k}`")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::InvalidData(format!("u-net config `{k}` is not an integer")))
        };
        let multipliers = get("multipliers")?
            .split(',')
            .map(|m| m.parse().map_err(|_| CoreError::InvalidData("bad multipliers".into())))
            .collect::<Result<_>>()?;
        let cfg = Self {
            latent_channels: int("latent_channels")?,
            base_width: int("base_width")?,
            multipliers,
            res_blocks: int("res_blocks")?,
            time_dim: int("time_dim")?,
            text_dim: int("text_dim")?,
            groups: int("groups")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_res_block<R: Rng + ?Sized>(s: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, emb: usize, rng: &mut R) {
    s.init_norm(&format!("{name}.norm1"), cin);
    s.init_conv(&format!("{name}.conv1"), cout, cin, 3, rng);
    s.init_linear(&format!("{name}.temb"), cout, emb, rng);
    s.init_norm(&format!("{name}.norm2"), cout);
    s.init_conv(&format!("{name}.conv2"), cout, cout, 3, rng);
    if cin != cout {
        s.init_conv(&format!("{name}.skip"), cout, cin, 1, rng);
    }
}

/// Builds the backbone tensors. The encoder half (`time.*`, `text_proj`,
/// `conv_in`, `down*`, `mid.*`) is what the control branch copies.
pub fn init_unet(cfg: &UNetConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, stream::INIT, 2);
    let mut s = ParamStore::new();
    let emb = cfg.time_dim;
    s.init_linear("time.lin1", emb, cfg.time_dim, &mut rng);
    s.init_linear("time.lin2", emb, emb, &mut rng);
    s.init_linear("text_proj", emb, cfg.text_dim, &mut rng);
    s.init_conv("conv_in", cfg.base_width, cfg.latent_channels, 3, &mut rng);
    let scales = cfg.multipliers.len();
    let mut ch = cfg.base_width;
    let mut skip_channels = Vec::new();
    for sc in 0..scales {
        let w = cfg.width(sc);
        for i in 0..cfg.res_blocks {
            init_res_block(&mut s, &format!("down{sc}.res{i}"), ch, w, emb, &mut rng);
            ch = w;
            skip_channels.push(ch);
        }
        if sc + 1 < scales {
            s.init_conv(&format!("down{sc}.downsample"), ch, ch, 3, &mut rng);
        }
    }
    init_res_block(&mut s, "mid.res0", ch, ch, emb, &mut rng);
    init_res_block(&mut s, "mid.res1", ch, ch, emb, &mut rng);
    for sc in (0..scales).rev() {
        let w = cfg.width(sc);
        for i in 0..cfg.res_blocks {
            let skip = skip_channels.pop().expect("one skip per encoder block");
            init_res_block(&mut s, &format!("up{sc}.res{i}"), ch + skip, w, emb, &mut rng);
            ch = w;
        }
        if sc > 0 {
            s.init_conv(&format!("up{sc}.upsample"), ch, ch, 3, &mut rng);
        }
    }
    s.init_norm("out.norm", ch);
    s.init_conv("out.conv", cfg.latent_channels, ch, 3, &mut rng);
    Ok(s)
}

/// True for tensor names belonging to the encoder half of the U-Net.
pub fn is_encoder_tensor(name: &str) -> bool {
    ["time.", "text_proj.", "conv_in.", "down", "mid."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Sinusoidal features `[sin(t f_k), cos(t f_k)]`, `f_k = 10000^(-k / half)`.
pub fn timestep_features<T: Float>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| T::of(a.sin())));
        data.extend(args.iter().map(|a| T::of(a.cos())));
    }
    Tensor::new(&[ts.len(), dim], data).expect("sized")
}

fn res_block<T: Float>(p: &Bound<T>, name: &str, x: Var, emb_act: Var, groups: usize) -> Result<Var> {
    let g = p.graph();
    let h = g.silu(p.group_norm(x, &format!("{name}.norm1"), groups)?);
    let h = p.conv(h, &format!("{name}.conv1"), 1, 1)?;
    let h = g.add_channel_bias(h, p.linear(emb_act, &format!("{name}.temb"))?)?;
    let h = g.silu(p.group_norm(h, &format!("{name}.norm2"), groups)?);
    let h = p.conv(h, &format!("{name}.conv2"), 1, 1)?;
    let shortcut = if p.has(&format!("{name}.skip.weight")) {
        p.conv(x, &format!("{name}.skip"), 1, 0)?
    } else {
        x
    };
    Ok(g.add(h, shortcut)?)
}

/// Conditioning embedding: timestep MLP plus projected text, after SiLU (the
/// form every residual block consumes).
pub fn embedding_graph<T: Float>(p: &Bound<T>, cfg: &UNetConfig, ts: &[usize], text: Var) -> Result<Var> {
    let g = p.graph();
    let tf = g.constant(timestep_features::<T>(ts, cfg.time_dim));
    let h = g.silu(p.linear(tf, "time.lin1")?);
    let temb = p.linear(h, "time.lin2")?;
    let text_shape = g.shape(text);
    if text_shape != [ts.len(), cfg.text_dim] {
        return Err(CoreError::Shape(format!(
            "text embedding {text_shape:?}, expected [{}, {}]",
            ts.len(),
            cfg.text_dim
        )));
    }
    let emb = g.add(temb, p.linear(text, "text_proj")?)?;
    Ok(g.silu(emb))
}

/// Encoder half. `hint` (already projected to `base_width` channels) is added
/// right after `conv_in`. Returns the injection-point tensors in order.
pub fn encode_features<T: Float>(
    p: &Bound<T>,
    cfg: &UNetConfig,
    z: Var,
    emb: Var,
    hint: Option<Var>,
) -> Result<Vec<Var>> {
    let g = p.graph();
    let zs = g.shape(z);
    let down = 1usize << (cfg.multipliers.len() - 1);
    if zs.len() != 4 || zs[1] != cfg.latent_channels || zs[2] % down != 0 || zs[3] % down != 0 {
        return Err(CoreError::Shape(format!(
            "latent {zs:?}: need [N, {}, h, w] with h, w divisible by {down}",
            cfg.latent_channels
        )));
    }
    let mut h = p.conv(z, "conv_in", 1, 1)?;
    if let Some(hint) = hint {
        h = g.add(h, hint)?;
    }
    let scales = cfg.multipliers.len();
    let mut feats = Vec::with_capacity(cfg.injection_points());
    for sc in 0..scales {
        for i in 0..cfg.res_blocks {
            h = res_block(p, &format!("down{sc}.res{i}"), h, emb, cfg.groups)?;
            feats.push(h);
        }
        if sc + 1 < scales {
            h = p.conv(h, &format!("down{sc}.downsample"), 2, 1)?;
        }
    }
    h = res_block(p, "mid.res0", h, emb, cfg.groups)?;
    h = res_block(p, "mid.res1", h, emb, cfg.groups)?;
    feats.push(h);
    Ok(feats)
}

/// Decoder half: consumes the (possibly residual-augmented) injection-point
/// tensors and predicts ε.
pub fn decode_features<T: Float>(p: &Bound<T>, cfg: &UNetConfig, mut feats: Vec<Var>, emb: Var) -> Result<Var> {
    let g = p.graph();
    let mut h = feats.pop().expect("mid output");
    for sc in (0..cfg.multipliers.len()).rev() {
        for i in 0..cfg.res_blocks {
            let skip = feats.pop().expect("one skip per block");
            h = g.concat_channels(&[h, skip])?;
            h = res_block(p, &format!("up{sc}.res{i}"), h, emb, cfg.groups)?;
        }
        if sc > 0 {
            h = g.upsample_nearest2x(h)?;
            h = p.conv(h, &format!("up{sc}.upsample"), 1, 1)?;
        }
    }
    let h = g.silu(p.group_norm(h, "out.norm", cfg.groups)?);
    Ok(p.conv(h, "out.conv", 1, 1)?)
}

/// Adds `residuals[i]` to injection point `i`.
pub fn inject<T: Float>(g: &Graph<T>, feats: Vec<Var>, residuals: &[Var]) -> Result<Vec<Var>> {
    if residuals.len() != feats.len() {
        return Err(CoreError::Shape(format!(
            "{} control residuals for {} injection points",
            residuals.len(),
            feats.len()
        )));
    }
    feats
        .into_iter()
        .zip(residuals)
        .enumerate()
        .map(|(i, (f, &r))| {
            if g.shape(f) != g.shape(r) {
                return Err(CoreError::Shape(format!(
                    "injection point {i}: residual {:?} vs feature {:?}",
                    g.shape(r),
                    g.shape(f)
                )));
            }
            Ok(g.add(f, r)?)
        })
        .collect()
}

/// Full backbone pass on a graph.
pub fn denoise_graph<T: Float>(
    p: &Bound<T>,
    cfg: &UNetConfig,
    z_t: Var,
    ts: &[usize],
    text: Var,
    residuals: Option<&[Var]>,
) -> Result<Var> {
    let emb = embedding_graph(p, cfg, ts, text)?;
    let mut feats = encode_features(p, cfg, z_t, emb, None)?;
    if let Some(r) = residuals {
        feats = inject(p.graph(), feats, r)?;
    }
    decode_features(p, cfg, feats, emb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub store: ParamStore<f32>,
}

impl UNetParams {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        let store = init_unet(&config, seed)?;
        Ok(Self { config, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint {
            params: self.store.clone(),
            config: self.config.to_map(),
            optimizer: None,
            log: TrainLog::default(),
        }
        .save(path)
    }
}

/// ε prediction for a batch. `residuals`, when given, holds one tensor per
/// injection point.
pub fn denoise_predict(
    z_t: &Tensor<f32>,
    ts: &[usize],
    text: &Tensor<f32>,
    residuals: Option<&[Tensor<f32>]>,
    unet: &UNetParams,
) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let p = Bound::new(&g, &unet.store, false);
    let rs: Option<Vec<Var>> = residuals.map(|r| r.iter().map(|t| g.constant(t.clone())).collect());
    let out = denoise_graph(&p, &unet.config, g.constant(z_t.clone()), ts, g.constant(text.clone()), rs.as_deref())?;
    Ok((*g.value(out)).clone())
}

// ----- samplers --------------------------------------------------------------

fn per_sample_noise(shape: &[usize], seeds: &[u64], index: u64) -> Tensor<f32> {
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(per * seeds.len());
    for &s in seeds {
        let mut rng = rng_for(s, stream::SAMPLER, index);
        data.extend(Tensor::<f32>::randn(&[per], &mut rng).into_data());
    }
    Tensor::new(shape, data).expect("sized")
}

/// The seeded starting latent: item `i` depends only on `seeds[i]`.
pub fn initial_latent(latent_shape: &[usize], seeds: &[u64]) -> Tensor<f32> {
    let mut shape = vec![seeds.len()];
    shape.extend_from_slice(latent_shape);
    per_sample_noise(&shape, seeds, 0)
}

/// One reverse step: posterior mean from `eps_hat` plus `sqrt(var_t) * noise`.
pub fn ddpm_step(
    z_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    schedule.check_t(t)?;
    let beta = schedule.betas[t];
    let coef = beta / (1.0 - schedule.alpha_bars[t]).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alphas[t].sqrt();
    let sigma = schedule.posterior_variance(t).sqrt();
    let mean = z_t.zip_map(eps_hat, |z, e| (inv_sqrt_alpha * (z as f64 - coef * e as f64)) as f32)?;
    Ok(mean.zip_map(noise, |m, n| (m as f64 + sigma * n as f64) as f32)?)
}

/// Ancestral sampling over all `T` steps. `eps_fn(z_t, t)` predicts noise for
/// the whole batch; item `i` of the result depends only on `seeds[i]`.
pub fn ddpm_sample(
    mut eps_fn: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
    latent_shape: &[usize],
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor<f32>> {
    let mut z = initial_latent(latent_shape, seeds);
    for t in (0..schedule.steps()).rev() {
        let eps = eps_fn(&z, t)?;
        let noise = if t > 0 {
            per_sample_noise(z.shape(), seeds, t as u64)
        } else {
            Tensor::zeros(z.shape())
        };
        z = ddpm_step(&z, &eps, t, schedule, &noise)?;
    }
    Ok(z)
}

/// Timesteps visited by DDIM with `steps` steps, ascending:
/// `floor((i + 1) T / steps) - 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(CoreError::Argument(format!("ddim steps must be in 1..={total}, got {steps}")));
    }
    Ok((0..steps).map(|i| (i + 1) * total / steps - 1).collect())
}

pub fn ddim_sample(
    mut eps_fn: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
    latent_shape: &[usize],
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seeds: &[u64],
) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(CoreError::Argument(format!("eta must be in [0, 1], got {eta}")));
    }
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    let mut z = initial_latent(latent_shape, seeds);
    for (k, &t) in ts.iter().enumerate().rev() {
        let eps = eps_fn(&z, t)?;
        let ab = schedule.alpha_bars[t];
        let ab_prev = if k > 0 { schedule.alpha_bars[ts[k - 1]] } else { 1.0 };
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut next = z.zip_map(&eps, |zv, ev| {
            let x0 = (zv as f64 - sb * ev as f64) / sa;
            (ab_prev.sqrt() * x0 + dir * ev as f64) as f32
        })?;
        if sigma > 0.0 {
            let noise = per_sample_noise(z.shape(), seeds, t as u64);
            next = next.zip_map(&noise, |v, n| (v as f64 + sigma * n as f64) as f32)?;
        }
        z = next;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Ddpm,
    Ddim { steps: usize, eta: f64 },
}

impl Sampler {
    pub fn run(
        &self,
        eps_fn: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
        latent_shape: &[usize],
        schedule: &NoiseSchedule,
        seeds: &[u64],
    ) -> Result<Tensor<f32>> {
        match *self {
            Sampler::Ddpm => ddpm_sample(eps_fn, latent_shape, schedule, seeds),
            Sampler::Ddim { steps, eta } => ddim_sample(eps_fn, latent_shape, schedule, steps, eta, seeds),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn timestep_rejects_out_of_range() {
        let s = NoiseSchedule::default();
        let z = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(matches!(forward_diffuse(&z, &[400], &z, &s), Err(CoreError::Argument(_))));
    }

    #[test]
    fn ddim_timesteps_formula() {
        assert_eq!(ddim_timesteps(400, 4).unwrap(), vec![99, 199, 299, 399]);
        assert_eq!(ddim_timesteps(400, 1).unwrap(), vec![399]);
        assert_eq!(ddim_timesteps(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(ddim_timesteps(400, 0).is_err());
        assert!(ddim_timesteps(400, 401).is_err());
    }

    #[test]
    fn injection_geometry_matches_encoder() {
        let cfg = UNetConfig::default();
        let unet = UNetParams::init(cfg.clone(), 0).unwrap();
        let g = Graph::<f32>::new();
        let p = Bound::new(&g, &unet.store, false);
        let text = g.constant(Tensor::zeros(&[2, cfg.text_dim]));
        let emb = embedding_graph(&p, &cfg, &[0, 5], text).unwrap();
        let z = g.constant(Tensor::zeros(&[2, 4, 8, 8]));
        let feats = encode_features(&p, &cfg, z, emb, None).unwrap();
        assert_eq!(feats.len(), cfg.injection_points());
        for (f, (ch, level)) in feats.iter().zip(cfg.injection_geometry()) {
            assert_eq!(g.shape(*f), vec![2, ch, 8 >> level, 8 >> level]);
        }
    }

    #[test]
    fn config_map_roundtrip() {
        let cfg = UNetConfig::default();
        assert_eq!(UNetConfig::from_map(&cfg.to_map()).unwrap(), cfg);
    }
}
