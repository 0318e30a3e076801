//! Model state, backbone pretraining and the conditioning-branch training
//! loop. The conditioning loop differentiates only adapter and control
//! tensors; the VAE, U-Net and text encoder enter every graph as constants.

use std::collections::BTreeMap;
use std::path::Path;

use maskctl_tensor::{Adam, Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::conditioning::{
    condition_graph, controlnet_graph, init_controlnet_from_backbone, text_encode_graph, ConditionStack,
    ControlParams, MaskMode, TextEncoderParams, ADAPTER_PREFIX, CONTROL_PREFIX,
};
use crate::diffusion_core::{
    decode_features, denoise_graph, embedding_graph, encode_features, forward_diffuse, inject, NoiseSchedule,
    UNetConfig, UNetParams,
};
use crate::error::{CoreError, Result};
use crate::latent_codec::{vae_encode, VaeParams};
use crate::optimize::{optimize, Checkpoint, TrainLog};
use crate::raster::{Image, Mask};
use crate::synthetic_data::{caption_from_metadata, SceneRecord};

/// The frozen half of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub vae: VaeParams,
    pub unet: UNetParams,
    pub text: TextEncoderParams,
    pub schedule: NoiseSchedule,
}

const UNET_PREFIX: &str = "unet/";
const TEXT_PREFIX: &str = "text/";

impl Backbone {
    pub fn init(vae: VaeParams, config: UNetConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let text = TextEncoderParams::init(config.text_dim, seed);
        let unet = UNetParams::init(config, seed)?;
        Ok(Self {
            vae,
            unet,
            text,
            schedule,
        })
    }

    /// Latent shape `[c, h, w]` for images of `size x size`.
    pub fn latent_shape(&self, size: usize) -> [usize; 3] {
        let f = self.vae.downsample_factor();
        [self.vae.config.latent_channels, size / f, size / f]
    }

    /// U-Net and text encoder in one checkpoint; the VAE is stored separately.
    pub fn denoiser_checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::new();
        params.extend_prefixed(UNET_PREFIX, &self.unet.store);
        params.extend_prefixed(TEXT_PREFIX, &self.text.store);
        let mut config = self.unet.config.to_map();
        config.insert("kind".into(), "denoiser".into());
        config.insert("schedule.steps".into(), self.schedule.steps().to_string());
        config.insert("schedule.beta_start".into(), self.schedule.betas[0].to_string());
        config.insert(
            "schedule.beta_end".into(),
            self.schedule.betas[self.schedule.steps() - 1].to_string(),
        );
        config.insert("text.vocabulary".into(), self.text.vocabulary.join(","));
        Checkpoint {
            params,
            config,
            optimizer: None,
            log: TrainLog::default(),
        }
    }

    pub fn from_checkpoints(vae: VaeParams, denoiser: &Checkpoint) -> Result<Self> {
        let kv = &denoiser.config;
        if kv.get("kind").map(String::as_str) != Some("denoiser") {
            return Err(CoreError::InvalidData("not a denoiser checkpoint".into()));
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CoreError::InvalidData(format!("denoiser config lacks `{k}`")))
        };
        let schedule = NoiseSchedule::linear(
            num("schedule.steps")? as usize,
            num("schedule.beta_start")?,
            num("schedule.beta_end")?,
        )?;
        let vocabulary = kv
            .get("text.vocabulary")
            .ok_or_else(|| CoreError::InvalidData("denoiser config lacks the vocabulary".into()))?
            .split(',')
            .map(String::from)
            .collect();
        let unet = UNetParams {
            config: UNetConfig::from_map(kv)?,
            store: denoiser.params.subset(UNET_PREFIX),
        };
        let text = TextEncoderParams {
            vocabulary,
            store: denoiser.params.subset(TEXT_PREFIX),
        };
        if !unet.store.all_finite() || !text.store.all_finite() {
            return Err(CoreError::InvalidData("denoiser checkpoint holds non-finite weights".into()));
        }
        Ok(Self {
            vae,
            unet,
            text,
            schedule,
        })
    }

    /// Every frozen tensor, namespaced by component.
    pub fn frozen_store(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.extend_prefixed("vae/", &self.vae.store);
        s.extend_prefixed(UNET_PREFIX, &self.unet.store);
        s.extend_prefixed(TEXT_PREFIX, &self.text.store);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Frozen,
    Trainable,
}

/// Frozen backbone plus the trainable conditioning branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub control: ControlParams,
}

impl ModelState {
    pub fn new(backbone: Backbone, mask_mode: MaskMode, seed: u64) -> Self {
        let control = init_controlnet_from_backbone(&backbone.unet, mask_mode, seed);
        Self { backbone, control }
    }

    /// Set membership of every tensor, by namespaced name.
    pub fn partition_manifest(&self) -> BTreeMap<String, Partition> {
        let mut m: BTreeMap<String, Partition> = self
            .backbone
            .frozen_store()
            .names()
            .map(|n| (n.clone(), Partition::Frozen))
            .collect();
        for n in self.control.store.names() {
            m.insert(n.clone(), Partition::Trainable);
        }
        m
    }

    pub fn partition_text(&self) -> String {
        self.partition_manifest()
            .iter()
            .map(|(n, p)| format!("{n}\t{}\n", if *p == Partition::Frozen { "frozen" } else { "trainable" }))
            .collect()
    }
}

// ----- losses ------------------------------------------------------------------

/// Inputs of one conditioning-branch loss evaluation.
#[derive(Clone, Debug)]
pub struct ControlBatch<T> {
    /// `[N, 6, H, W]`
    pub stack: Tensor<T>,
    /// Clean latents `[N, c, h, w]` (VAE means).
    pub z0: Tensor<T>,
    pub tokens: Vec<Vec<usize>>,
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
}

/// Parameter views for one loss graph.
pub struct LossBindings<'a, T: Float> {
    pub adapter: Bound<'a, T>,
    pub control: Bound<'a, T>,
    pub vae: Bound<'a, T>,
    pub unet: Bound<'a, T>,
    pub text: Bound<'a, T>,
}

impl<'a, T: Float> LossBindings<'a, T> {
    /// Conditioning tensors are differentiable iff `trainable`; backbone
    /// tensors never are.
    pub fn new(
        g: &'a Graph<T>,
        control: &'a ParamStore<T>,
        vae: &'a ParamStore<T>,
        unet: &'a ParamStore<T>,
        text: &'a ParamStore<T>,
        trainable: bool,
    ) -> Self {
        Self {
            adapter: Bound::prefixed(g, control, trainable, ADAPTER_PREFIX),
            control: Bound::prefixed(g, control, trainable, CONTROL_PREFIX),
            vae: Bound::new(g, vae, false),
            unet: Bound::new(g, unet, false),
            text: Bound::new(g, text, false),
        }
    }

    pub fn control_gradients(&self, grads: &mut maskctl_tensor::Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = self.adapter.gradients(grads);
        out.extend(self.control.gradients(grads));
        out
    }
}

/// `mean((eps - eps_hat)^2)` with the control branch attached.
pub fn control_loss_graph<T: Float>(
    b: &LossBindings<'_, T>,
    cfg: &UNetConfig,
    schedule: &NoiseSchedule,
    batch: &ControlBatch<T>,
) -> Result<Var> {
    let g = b.unet.graph();
    let z_t = g.constant(forward_diffuse(&batch.z0, &batch.ts, &batch.eps, schedule)?);
    let text = text_encode_graph(&b.text, &batch.tokens)?;
    let cond = condition_graph(&b.adapter, &b.vae, g.constant(batch.stack.clone()))?;
    let residuals = controlnet_graph(&b.control, cfg, z_t, &batch.ts, text, cond)?;
    let emb = embedding_graph(&b.unet, cfg, &batch.ts, text)?;
    let feats = encode_features(&b.unet, cfg, z_t, emb, None)?;
    let eps_hat = decode_features(&b.unet, cfg, inject(g, feats, &residuals)?, emb)?;
    Ok(g.mse(eps_hat, g.constant(batch.eps.clone()))?)
}

/// Uniform timesteps and standard-normal noise for a batch.
pub fn draw_noise<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    latent_shape: &[usize],
    steps: usize,
) -> (Vec<usize>, Tensor<f32>) {
    let ts = (0..batch).map(|_| rng.random_range(0..steps)).collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(latent_shape);
    (ts, Tensor::randn(&shape, rng))
}

// ----- backbone pretraining ------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Clean latents (VAE means) for every record.
pub fn encode_records(records: &[SceneRecord], vae: &VaeParams) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|r| &r.image).collect();
        let mean = vae_encode(&Image::batch(&images)?, vae)?.mean;
        out.extend((0..chunk.len()).map(|i| mean.batch_item(i)));
    }
    Ok(out)
}

fn gather(latents: &[Tensor<f32>], picks: &[usize]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = picks.iter().map(|&i| latents[i].clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

/// Trains the U-Net and the caption encoder jointly on text-conditioned
/// ε-prediction over VAE latents. These become the frozen backbone.
pub fn train_backbone(
    records: &[SceneRecord],
    vae: &VaeParams,
    unet_config: UNetConfig,
    schedule: NoiseSchedule,
    config: &BackboneTrainConfig,
) -> Result<(Backbone, TrainLog)> {
    if records.is_empty() || config.batch_size == 0 {
        return Err(CoreError::Config("backbone training needs scenes and a positive batch size".into()));
    }
    let mut backbone = Backbone::init(vae.clone(), unet_config, schedule, config.seed)?;
    let latents = encode_records(records, vae)?;
    let tokens: Vec<Vec<usize>> = records
        .iter()
        .map(|r| backbone.text.tokenize(&caption_from_metadata(&r.metadata)))
        .collect::<Result<_>>()?;
    let mut params = ParamStore::new();
    params.extend_prefixed(UNET_PREFIX, &backbone.unet.store);
    params.extend_prefixed(TEXT_PREFIX, &backbone.text.store);
    let mut adam = Adam::new(config.learning_rate);
    let mut log = TrainLog::default();
    let latent_shape = latents[0].shape()[1..].to_vec();
    let batch = config.batch_size.min(records.len());
    let cfg = backbone.unet.config.clone();
    let schedule = backbone.schedule.clone();
    optimize(
        &mut params,
        &mut adam,
        &mut log,
        config.steps,
        config.seed,
        |_, rng, params| {
            let picks = sample(rng, records.len(), batch).into_vec();
            let z0 = gather(&latents, &picks)?;
            let (ts, eps) = draw_noise(rng, batch, &latent_shape, schedule.steps());
            let z_t = forward_diffuse(&z0, &ts, &eps, &schedule)?;
            let g = Graph::new();
            let unet = Bound::prefixed(&g, params, true, UNET_PREFIX);
            let text = Bound::prefixed(&g, params, true, TEXT_PREFIX);
            let caps: Vec<Vec<usize>> = picks.iter().map(|&i| tokens[i].clone()).collect();
            let c = text_encode_graph(&text, &caps)?;
            let eps_hat = denoise_graph(&unet, &cfg, g.constant(z_t), &ts, c, None)?;
            let loss = g.mse(eps_hat, g.constant(eps))?;
            let value = g.value(loss).item() as f64;
            let mut grads = g.backward(loss)?;
            let mut out = unet.gradients(&mut grads);
            out.extend(text.gradients(&mut grads));
            Ok((value, out))
        },
        |_, _, _, _| Ok(()),
    )?;
    backbone.unet.store = params.subset(UNET_PREFIX);
    backbone.text.store = params.subset(TEXT_PREFIX);
    Ok((backbone, log))
}

// ----- conditioning-branch training -----------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 2000,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.steps == 0 {
            return Err(CoreError::Config(
                "learning_rate, batch_size and steps must all be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.t_law", "uniform".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Frozen per-record inputs that do not change during training.
pub struct TrainingData<'a> {
    pub records: &'a [SceneRecord],
    pub latents: Vec<Tensor<f32>>,
    pub tokens: Vec<Vec<usize>>,
}

impl<'a> TrainingData<'a> {
    pub fn prepare(records: &'a [SceneRecord], backbone: &Backbone) -> Result<Self> {
        let latents = encode_records(records, &backbone.vae)?;
        let tokens = records
            .iter()
            .map(|r| backbone.text.tokenize(&caption_from_metadata(&r.metadata)))
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            latents,
            tokens,
        })
    }

    pub fn batch(&self, picks: &[usize], mode: MaskMode, ts: Vec<usize>, eps: Tensor<f32>) -> Result<ControlBatch<f32>> {
        let pairs: Vec<(&Image, &Mask)> = picks
            .iter()
            .map(|&i| (&self.records[i].image, &self.records[i].mask))
            .collect();
        Ok(ControlBatch {
            stack: ConditionStack::build(&pairs, mode)?.0,
            z0: gather(&self.latents, picks)?,
            tokens: picks.iter().map(|&i| self.tokens[i].clone()).collect(),
            ts,
            eps,
        })
    }
}

/// Loss and conditioning-branch gradients for one batch.
pub fn control_loss_and_grads(
    backbone: &Backbone,
    control: &ParamStore<f32>,
    batch: &ControlBatch<f32>,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let g = Graph::new();
    let b = LossBindings::new(
        &g,
        control,
        &backbone.vae.store,
        &backbone.unet.store,
        &backbone.text.store,
        true,
    );
    let loss = control_loss_graph(&b, &backbone.unet.config, &backbone.schedule, batch)?;
    let value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss)?;
    Ok((value, b.control_gradients(&mut grads)))
}

/// Conditioning-branch trainer; owns the optimizer state.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam<f32>,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(config.learning_rate),
            config,
            log: TrainLog::default(),
        })
    }

    /// One optimizer update of the trainable set from `batch`. Returns the
    /// pre-update loss.
    pub fn train_step(&mut self, batch: &ControlBatch<f32>, state: &mut ModelState) -> Result<f64> {
        let step = self.adam.steps() as usize + 1;
        let (loss, grads) = control_loss_and_grads(&state.backbone, &state.control.store, batch)?;
        if !loss.is_finite() {
            return Err(CoreError::Numerical {
                step,
                msg: format!("loss is {loss}"),
            });
        }
        self.adam.step(&mut state.control.store, &grads)?;
        Ok(loss)
    }

    /// Runs up to `config.steps` total updates. With `checkpoint_path`, state
    /// is saved every `checkpoint_every` steps and at the end; an existing
    /// checkpoint there is resumed from.
    pub fn run(
        &mut self,
        data: &TrainingData<'_>,
        state: &mut ModelState,
        checkpoint_path: Option<&Path>,
    ) -> Result<()> {
        let n = data.records.len();
        let batch = self.config.batch_size.min(n);
        let latent_shape = data.latents[0].shape()[1..].to_vec();
        let steps_t = state.backbone.schedule.steps();
        let mode = state.control.mask_mode;
        let backbone = &state.backbone;
        let config = self.config.clone();
        let save = |params: &ParamStore<f32>, adam: &Adam<f32>, log: &TrainLog| -> Result<()> {
            if let Some(path) = checkpoint_path {
                control_checkpoint(params, mode, &config, Some(adam), log).save(path)?;
            }
            Ok(())
        };
        optimize(
            &mut state.control.store,
            &mut self.adam,
            &mut self.log,
            self.config.steps,
            self.config.seed,
            |_, rng, params| {
                let picks = sample(rng, n, batch).into_vec();
                let (ts, eps) = draw_noise(rng, batch, &latent_shape, steps_t);
                let cb = data.batch(&picks, mode, ts, eps)?;
                control_loss_and_grads(backbone, params, &cb)
            },
            |step, params, adam, log| {
                if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                    save(params, adam, log)?;
                }
                Ok(())
            },
        )?;
        save(&state.control.store, &self.adam, &self.log)
    }
}

pub fn control_checkpoint(
    store: &ParamStore<f32>,
    mode: MaskMode,
    config: &TrainConfig,
    adam: Option<&Adam<f32>>,
    log: &TrainLog,
) -> Checkpoint {
    let mut kv = config.to_map();
    kv.insert("kind".into(), "control".into());
    kv.insert("mask_mode".into(), mode.name().into());
    Checkpoint {
        params: store.clone(),
        config: kv,
        optimizer: adam.cloned(),
        log: log.clone(),
    }
}

pub fn load_control(ck: &Checkpoint) -> Result<ControlParams> {
    if ck.config.get("kind").map(String::as_str) != Some("control") {
        return Err(CoreError::InvalidData("not a control checkpoint".into()));
    }
    let mode = MaskMode::parse(
        ck.config
            .get("mask_mode")
            .ok_or_else(|| CoreError::InvalidData("control checkpoint lacks mask_mode".into()))?,
    )?;
    Ok(ControlParams {
        mask_mode: mode,
        store: ck.params.clone(),
    })
}

pub const MIN_TRAINING_SCENES: usize = 500;

/// Trains the conditioning branch of `state` on `records`, resuming from
/// `checkpoint_path` when a checkpoint exists there.
pub fn run_training(
    records: &[SceneRecord],
    state: &mut ModelState,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainLog> {
    run_training_with_minimum(records, state, config, checkpoint_path, MIN_TRAINING_SCENES)
}

/// [`run_training`] with an explicit dataset-size floor (small probes).
pub fn run_training_with_minimum(
    records: &[SceneRecord],
    state: &mut ModelState,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    min_scenes: usize,
) -> Result<TrainLog> {
    if records.len() < min_scenes {
        return Err(CoreError::Config(format!(
            "training needs at least {min_scenes} scenes, got {}",
            records.len()
        )));
    }
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(path) = checkpoint_path.filter(|p| p.exists()) {
        let ck = Checkpoint::load(path)?;
        let control = load_control(&ck)?;
        if control.mask_mode != state.control.mask_mode {
            return Err(CoreError::Config("checkpoint mask mode differs from the model state".into()));
        }
        state.control = control;
        trainer.adam = ck
            .optimizer
            .ok_or_else(|| CoreError::InvalidData("checkpoint has no optimizer state".into()))?;
        trainer.log = ck.log;
    }
    let data = TrainingData::prepare(records, &state.backbone)?;
    trainer.run(&data, state, checkpoint_path)?;
    Ok(trainer.log)
}
