//! Controlled experiments over trained components: the mask ablation, the
//! background-overfitting probe, multi-mask flexibility and zero-init
//! transparency. Callers own stage orchestration and persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;

use crate::conditioning::{init_controlnet_from_backbone, ControlParams, MaskMode};
use crate::diffusion_core::Sampler;
use crate::error::{CoreError, Result};
use crate::evaluation::{
    background_leakage, evaluate_pairs, mask_region_fidelity, BackgroundHistograms, FeatureEncoder,
    MetricsReport, ENCODER_CAVEAT,
};
use crate::generation::{generate, Request};
use crate::optimize::TrainLog;
use crate::raster::Image;
use crate::seeding::{mix, rng_for, stream};
use crate::synthetic_data::{
    caption_for, caption_from_metadata, generate_composite_scene, generate_scene, BackgroundClass, ColorName,
    SceneRecord, SceneSpec, ShapeClass, TextureClass,
};
use crate::training::{run_training, Backbone, ModelState, TrainConfig};

/// Generation seed for the `i`-th evaluation item; shared across variants so
/// comparisons are paired.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    mix(mix(seed, stream::SAMPLER), i as u64) >> 1
}

/// Trains one conditioning branch from the deterministic initial state
/// `(backbone, mode, init_seed)`.
pub fn train_variant(
    records: &[SceneRecord],
    backbone: &Backbone,
    mode: MaskMode,
    config: &TrainConfig,
    init_seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(ControlParams, TrainLog)> {
    let mut state = ModelState::new(backbone.clone(), mode, init_seed);
    let log = run_training(records, &mut state, config, checkpoint)?;
    Ok((state.control, log))
}

/// Self-reconstruction: every held-out scene conditions on its own mask and
/// caption and is scored against itself.
pub fn evaluate_variant(
    backbone: &Backbone,
    control: &ControlParams,
    held_out: &[SceneRecord],
    enc: &FeatureEncoder,
    sampler: Sampler,
    seed: u64,
) -> Result<(Vec<Image>, MetricsReport)> {
    let captions: Vec<String> = held_out.iter().map(|r| caption_from_metadata(&r.metadata)).collect();
    let requests: Vec<Request<'_>> = held_out
        .iter()
        .zip(&captions)
        .enumerate()
        .map(|(i, (r, c))| Request {
            reference: &r.image,
            mask: &r.mask,
            caption: c,
            seed: eval_seed(seed, i),
        })
        .collect();
    let images = generate(backbone, Some(control), &requests, sampler)?;
    let report = evaluate_pairs(&images, held_out, enc)?;
    Ok((images, report))
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub mask_mode: MaskMode,
    pub train_config: BTreeMap<String, String>,
    pub log: TrainLog,
    pub report: MetricsReport,
    pub control: ControlParams,
    pub samples: Vec<Image>,
}

impl VariantOutcome {
    pub fn metric(&self, key: &str) -> f64 {
        self.report.metrics.get(key).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub with_mask: VariantOutcome,
    pub without_mask: VariantOutcome,
}

impl AblationReport {
    /// `(embed_sim, mask_fidelity)`: whether the with-mask variant is strictly
    /// better on each.
    pub fn direction(&self) -> (bool, bool) {
        let better = |k: &str| self.with_mask.metric(k) > self.without_mask.metric(k);
        (better("embed_sim"), better("mask_fidelity"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {ENCODER_CAVEAT}");
        let _ = writeln!(out, "setting={}", self.with_mask.report.setting);
        let keys: Vec<&String> = self.with_mask.report.metrics.keys().collect();
        for v in [&self.with_mask, &self.without_mask] {
            let name = v.mask_mode.name();
            for (k, val) in &v.train_config {
                let _ = writeln!(out, "{name}.train.{k}={val}");
            }
            let n = v.log.records.len();
            let _ = writeln!(out, "{name}.final_loss_mean={}", v.log.mean_loss(n.saturating_sub(100)..n));
            for k in &keys {
                let _ = writeln!(out, "{name}.{k}={}", v.metric(k));
            }
        }
        let (embed, fid) = self.direction();
        let _ = writeln!(out, "direction.embed_sim={embed}");
        let _ = writeln!(out, "direction.mask_fidelity={fid}");
        out
    }
}

/// Trains both mask modes with one config and one initial state, then
/// evaluates them on the same held-out scenes and sampler seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    train: &[SceneRecord],
    held_out: &[SceneRecord],
    backbone: &Backbone,
    enc: &FeatureEncoder,
    config: &TrainConfig,
    sampler: Sampler,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<AblationReport> {
    let run = |mode: MaskMode| -> Result<VariantOutcome> {
        let ckpt = checkpoint_dir.map(|d| d.join(format!("control-{}.ckpt", mode.name())));
        let (control, log) = train_variant(train, backbone, mode, config, seed, ckpt.as_deref())?;
        let (samples, report) = evaluate_variant(backbone, &control, held_out, enc, sampler, seed)?;
        Ok(VariantOutcome {
            mask_mode: mode,
            train_config: config.to_map(),
            log,
            report,
            control,
            samples,
        })
    };
    Ok(AblationReport {
        with_mask: run(MaskMode::WithMask)?,
        without_mask: run(MaskMode::DuplicateReference)?,
    })
}

// ----- background overfitting -----------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageProbe {
    pub shape: ShapeClass,
    pub trained_background: BackgroundClass,
    pub requested_background: BackgroundClass,
    pub with_mask: f64,
    pub without_mask: f64,
}

#[derive(Clone, Debug)]
pub struct BackgroundReport {
    pub train_config: BTreeMap<String, String>,
    pub probes: Vec<LeakageProbe>,
    pub with_mask_samples: Vec<Image>,
    pub without_mask_samples: Vec<Image>,
}

impl BackgroundReport {
    pub fn mean(&self) -> (f64, f64) {
        let n = self.probes.len().max(1) as f64;
        (
            self.probes.iter().map(|p| p.with_mask).sum::<f64>() / n,
            self.probes.iter().map(|p| p.without_mask).sum::<f64>() / n,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "setting=trained on shape-correlated backgrounds; captions request a different background class"
        );
        for (k, v) in &self.train_config {
            let _ = writeln!(out, "train.{k}={v}");
        }
        let (w, wo) = self.mean();
        let _ = writeln!(out, "with_mask.mean_leakage={w}");
        let _ = writeln!(out, "no_mask.mean_leakage={wo}");
        let _ = writeln!(out, "direction.leakage={}", w < wo);
        for (i, p) in self.probes.iter().enumerate() {
            let _ = writeln!(
                out,
                "probe={i}\tshape={}\ttrained_background={}\trequested_background={}\twith_mask={}\tno_mask={}",
                p.shape, p.trained_background, p.requested_background, p.with_mask, p.without_mask
            );
        }
        out
    }
}

/// A background class other than `trained`, cycling with `i`.
pub fn other_background(trained: BackgroundClass, i: usize) -> BackgroundClass {
    let others: Vec<BackgroundClass> = BackgroundClass::ALL.iter().copied().filter(|b| *b != trained).collect();
    others[i % others.len()]
}

/// Trains both mask modes on correlated scenes, then prompts each probe scene
/// with its own object and a different background class. Leakage is measured
/// outside the reference mask against the background the probe's shape was
/// trained with.
#[allow(clippy::too_many_arguments)]
pub fn run_background_experiment(
    correlated_train: &[SceneRecord],
    probes: &[SceneRecord],
    backbone: &Backbone,
    config: &TrainConfig,
    sampler: Sampler,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<BackgroundReport> {
    let hists = BackgroundHistograms::from_records(correlated_train);
    let requested: Vec<BackgroundClass> = probes
        .iter()
        .enumerate()
        .map(|(i, r)| other_background(r.metadata.background_class, i))
        .collect();
    let captions: Vec<String> = probes
        .iter()
        .zip(&requested)
        .map(|(r, &bg)| {
            let m = &r.metadata;
            caption_for(m.color_name, m.texture_class, m.shape_class, bg)
        })
        .collect();
    let requests: Vec<Request<'_>> = probes
        .iter()
        .zip(&captions)
        .enumerate()
        .map(|(i, (r, c))| Request {
            reference: &r.image,
            mask: &r.mask,
            caption: c,
            seed: eval_seed(seed, i),
        })
        .collect();
    let mut samples = Vec::new();
    for mode in [MaskMode::WithMask, MaskMode::DuplicateReference] {
        let ckpt = checkpoint_dir.map(|d| d.join(format!("control-correlated-{}.ckpt", mode.name())));
        let (control, _) = train_variant(correlated_train, backbone, mode, config, seed, ckpt.as_deref())?;
        samples.push(generate(backbone, Some(&control), &requests, sampler)?);
    }
    let without = samples.pop().expect("two variants");
    let with = samples.pop().expect("two variants");
    let probes_out = probes
        .iter()
        .zip(&requested)
        .zip(with.iter().zip(&without))
        .map(|((r, &req), (gw, gwo))| {
            let shape = r.metadata.shape_class;
            Ok(LeakageProbe {
                shape,
                trained_background: r.metadata.background_class,
                requested_background: req,
                with_mask: background_leakage(gw, &r.mask, &hists, shape)?,
                without_mask: background_leakage(gwo, &r.mask, &hists, shape)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BackgroundReport {
        train_config: config.to_map(),
        probes: probes_out,
        with_mask_samples: with,
        without_mask_samples: without,
    })
}

// ----- mask flexibility -------------------------------------------------------

/// One two-object reference generated twice, once per object mask, with the
/// same sampler seed. Index `k` of each array refers to the generation that
/// selected object `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexibilityProbe {
    pub scene_seed: u64,
    pub captions: [String; 2],
    pub fidelity_selected: [f64; 2],
    pub fidelity_unselected: [f64; 2],
    pub identical: bool,
}

impl FlexibilityProbe {
    pub fn passes(&self) -> bool {
        !self.identical && (0..2).all(|k| self.fidelity_selected[k] > self.fidelity_unselected[k])
    }
}

pub fn mask_flexibility(
    backbone: &Backbone,
    control: &ControlParams,
    spec: &SceneSpec,
    probes: usize,
    seed: u64,
    sampler: Sampler,
) -> Result<Vec<FlexibilityProbe>> {
    (0..probes)
        .map(|i| {
            let scene_seed = mix(seed, i as u64) >> 1;
            let scene = generate_composite_scene(spec, scene_seed, 2)?;
            let captions = [0, 1].map(|k| caption_from_metadata(&scene.metadata[k]));
            let gen_seed = eval_seed(seed, i);
            let requests: Vec<Request<'_>> = (0..2)
                .map(|k| Request {
                    reference: &scene.image,
                    mask: &scene.masks[k],
                    caption: &captions[k],
                    seed: gen_seed,
                })
                .collect();
            let out = generate(backbone, Some(control), &requests, sampler)?;
            let mut selected = [0.0; 2];
            let mut unselected = [0.0; 2];
            for k in 0..2 {
                selected[k] = mask_region_fidelity(&out[k], &scene.image, &scene.masks[k])?;
                unselected[k] = mask_region_fidelity(&out[k], &scene.image, &scene.masks[1 - k])?;
            }
            Ok(FlexibilityProbe {
                scene_seed,
                identical: out[0] == out[1],
                captions,
                fidelity_selected: selected,
                fidelity_unselected: unselected,
            })
        })
        .collect()
}

// ----- zero-init transparency -------------------------------------------------

/// Generates each random probe with the backbone alone and with a freshly
/// initialised conditioning branch attached. Returns per-probe bit equality.
pub fn zero_init_transparency(
    backbone: &Backbone,
    spec: &SceneSpec,
    probes: usize,
    seed: u64,
    sampler: Sampler,
) -> Result<Vec<bool>> {
    if probes == 0 {
        return Err(CoreError::Argument("need at least one probe".into()));
    }
    let mut rng = rng_for(seed, stream::SCENES, u64::MAX);
    let mut scenes = Vec::new();
    let mut captions = Vec::new();
    for i in 0..probes {
        scenes.push(generate_scene(spec, mix(seed, i as u64) >> 1)?);
        captions.push(caption_for(
            *ColorName::ALL.choose(&mut rng).expect("non-empty"),
            *TextureClass::ALL.choose(&mut rng).expect("non-empty"),
            *ShapeClass::ALL.choose(&mut rng).expect("non-empty"),
            *BackgroundClass::ALL.choose(&mut rng).expect("non-empty"),
        ));
    }
    let requests: Vec<Request<'_>> = scenes
        .iter()
        .zip(&captions)
        .enumerate()
        .map(|(i, (s, c))| Request {
            reference: &s.image,
            mask: &s.mask,
            caption: c,
            seed: eval_seed(seed, i),
        })
        .collect();
    let fresh = init_controlnet_from_backbone(&backbone.unet, MaskMode::WithMask, seed);
    let detached = generate(backbone, None, &requests, sampler)?;
    let attached = generate(backbone, Some(&fresh), &requests, sampler)?;
    Ok(detached.iter().zip(&attached).map(|(a, b)| a == b).collect())
}
