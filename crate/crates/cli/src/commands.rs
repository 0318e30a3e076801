//! One function per subcommand. Each resolves its inputs from [`Settings`],
//! runs the pipeline stage and writes its outputs plus a provenance record
//! into `--out`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use maskctl_core::conditioning::{init_controlnet_from_backbone, ControlParams, MaskMode};
use maskctl_core::diffusion_core::{NoiseSchedule, UNetConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use maskctl_core::evaluation::{self, FeatureEncoder, FeatureTrainConfig};
use maskctl_core::experiments;
use maskctl_core::generation::{self, Request};
use maskctl_core::latent_codec::{self, VaeConfig, VaeParams, VaeTrainConfig};
use maskctl_core::optimize::{Checkpoint, TrainLog};
use maskctl_core::raster::{tile, Image, Mask};
use maskctl_core::synthetic_data::{
    build_dataset, caption_from_metadata, CorrelationMode, DatasetManifest, SceneRecord, SceneSpec, MANIFEST_FILE,
};
use maskctl_core::training::{self, Backbone, BackboneTrainConfig, ModelState, TrainConfig};

use crate::failure::Failure;
use crate::provenance::Provenance;
use crate::settings::Settings;

pub type CommandFn = fn(&str, Settings) -> Result<()>;

const GRID_FILE: &str = "grid.png";
const GRID_COLUMNS: usize = 8;

// ----- loading ------------------------------------------------------------------

struct Dataset {
    manifest: DatasetManifest,
    records: Vec<SceneRecord>,
}

impl Dataset {
    fn load(s: &Settings) -> Result<Self> {
        let dir = s.path("dataset", true)?;
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Failure::Missing(dir.join(MANIFEST_FILE)).into());
        }
        let manifest = DatasetManifest::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        let records = manifest.load_records().context("reading dataset records")?;
        if records.is_empty() {
            return Err(Failure::InvalidData(format!("dataset {} is empty", dir.display())).into());
        }
        Ok(Self { manifest, records })
    }

    /// `(train, held_out)`: the last `holdout` records are held out.
    fn split(&self, s: &Settings) -> Result<(&[SceneRecord], &[SceneRecord])> {
        let n = self.records.len();
        let holdout: usize = s.parse_or("holdout", (n / 5).min(100))?;
        if holdout >= n {
            return Err(Failure::Usage(format!("holdout {holdout} leaves no training scenes out of {n}")).into());
        }
        Ok(self.records.split_at(n - holdout))
    }
}

fn load_checkpoint(s: &Settings, key: &str) -> Result<(Checkpoint, PathBuf)> {
    let path = s.path(key, true)?;
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {key} checkpoint {}", path.display()))?;
    Ok((ck, path))
}

fn load_vae(s: &Settings, prov: &mut Provenance) -> Result<VaeParams> {
    let (ck, path) = load_checkpoint(s, "vae")?;
    prov.add("checkpoint.vae", format!("{} sha256:{}", path.display(), ck.digest()));
    Ok(VaeParams::from_checkpoint(&ck)?)
}

fn load_backbone(s: &Settings, prov: &mut Provenance) -> Result<Backbone> {
    let vae = load_vae(s, prov)?;
    let (ck, path) = load_checkpoint(s, "denoiser")?;
    prov.add("checkpoint.denoiser", format!("{} sha256:{}", path.display(), ck.digest()));
    Ok(Backbone::from_checkpoints(vae, &ck)?)
}

fn load_feature(s: &Settings, prov: &mut Provenance) -> Result<FeatureEncoder> {
    let path = s.path("feature", true)?;
    let enc = FeatureEncoder::load(&path).with_context(|| format!("loading feature encoder {}", path.display()))?;
    prov.add("checkpoint.feature", format!("{} sha256:{}", path.display(), enc.store.digest()));
    Ok(enc)
}

fn load_control(s: &Settings, prov: &mut Provenance) -> Result<Option<ControlParams>> {
    let Some(path) = s.optional_path("control")? else {
        return Ok(None);
    };
    let ck = Checkpoint::load(&path).with_context(|| format!("loading control checkpoint {}", path.display()))?;
    prov.add("checkpoint.control", format!("{} sha256:{}", path.display(), ck.digest()));
    Ok(Some(training::load_control(&ck)?))
}

fn mask_mode(s: &Settings) -> Result<MaskMode> {
    Ok(MaskMode::parse(s.get("mask_mode").unwrap_or("with_mask"))?)
}

fn seed(s: &Settings) -> Result<u64> {
    s.parse_or("seed", 0)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: s.parse_or("learning_rate", d.learning_rate)?,
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        steps: s.parse_or("steps", d.steps)?,
        checkpoint_every: s.parse_or("checkpoint_every", d.checkpoint_every)?,
        seed: seed(s)?,
    })
}

fn write_log(dir: &Path, name: &str, log: &TrainLog, prov: &mut Provenance) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, log.to_text())?;
    prov.output(&path);
    Ok(())
}

fn write_grid(dir: &Path, name: &str, images: &[Image], prov: &mut Provenance) -> Result<()> {
    if images.is_empty() {
        return Ok(());
    }
    let refs: Vec<&Image> = images.iter().collect();
    let path = dir.join(name);
    tile(&refs, GRID_COLUMNS)?.save_png(&path)?;
    prov.output(&path);
    Ok(())
}

fn finish(out: &Path, prov: &Provenance, s: &Settings) -> Result<()> {
    let path = prov.write(out, s)?;
    println!("provenance: {}", path.display());
    Ok(())
}

// ----- commands -----------------------------------------------------------------

pub fn make_dataset(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let mut spec = if s.flag("correlated")? {
        SceneSpec::correlated()
    } else {
        SceneSpec::default()
    };
    spec.image_size = s.parse_or("size", spec.image_size)?;
    let count: usize = s.parse_or("count", 1000)?;
    let seed = seed(&s)?;
    let manifest = build_dataset(&spec, count, seed, &out)?;
    let mut prov = Provenance::new(name, &s);
    prov.add("seed", seed);
    prov.add("dataset.checksum", manifest.checksum());
    prov.add("dataset.count", count);
    let preview: Vec<Image> = manifest
        .entries
        .iter()
        .take(32)
        .map(|e| manifest.load_record(e).map(|r| r.image))
        .collect::<maskctl_core::Result<_>>()?;
    write_grid(&out, GRID_FILE, &preview, &mut prov)?;
    println!("wrote {count} scenes to {} (manifest sha256 {})", out.display(), manifest.checksum());
    finish(&out, &prov, &s)
}

fn vae_config(s: &Settings) -> Result<VaeConfig> {
    let mut kv = VaeConfig::default().to_map();
    for (k, v) in s.with_prefix("vae.") {
        kv.insert(k["vae.".len()..].to_string(), v);
    }
    VaeConfig::from_map(&kv).map_err(|e| Failure::Usage(e.to_string()).into())
}

pub fn train_vae(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    let (train, held_out) = data.split(&s)?;
    let d = VaeTrainConfig::default();
    let config = VaeTrainConfig {
        steps: s.parse_or("steps", d.steps)?,
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        learning_rate: s.parse_or("learning_rate", d.learning_rate)?,
        kl_weight: s.parse_or("kl_weight", d.kl_weight)?,
        seed: seed(&s)?,
        checkpoint_every: s.parse_or("checkpoint_every", d.checkpoint_every)?,
    };
    let ckpt = out.join("vae.ckpt");
    let (vae, log) = latent_codec::train_vae(train, held_out, vae_config(&s)?, &config, Some(&ckpt))?;
    let mut prov = Provenance::new(name, &s);
    prov.add("seed", config.seed);
    prov.add("dataset.checksum", data.manifest.checksum());
    prov.add("output.vae", format!("{} sha256:{}", ckpt.display(), vae.store.digest()));
    if let Some(p) = log.summary.get("held_out_psnr") {
        prov.add("held_out_psnr", p);
        println!("held-out reconstruction psnr: {p} dB");
    }
    write_log(&out, "vae_log.txt", &log, &mut prov)?;
    finish(&out, &prov, &s)
}

fn unet_config(s: &Settings) -> Result<UNetConfig> {
    let mut kv = UNetConfig::default().to_map();
    kv.extend(s.with_prefix("unet."));
    UNetConfig::from_map(&kv).map_err(|e| Failure::Usage(e.to_string()).into())
}

fn schedule(s: &Settings) -> Result<NoiseSchedule> {
    let sched = NoiseSchedule::linear(
        s.parse_or("schedule.steps", DEFAULT_STEPS)?,
        s.parse_or("schedule.beta_start", DEFAULT_BETA_START)?,
        s.parse_or("schedule.beta_end", DEFAULT_BETA_END)?,
    );
    sched.map_err(|e| Failure::Usage(e.to_string()).into())
}

pub fn train_backbone(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    let (train, _) = data.split(&s)?;
    let mut prov = Provenance::new(name, &s);
    let vae = load_vae(&s, &mut prov)?;
    let d = BackboneTrainConfig::default();
    let config = BackboneTrainConfig {
        steps: s.parse_or("steps", d.steps)?,
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        learning_rate: s.parse_or("learning_rate", d.learning_rate)?,
        seed: seed(&s)?,
    };
    let (backbone, log) = training::train_backbone(train, &vae, unet_config(&s)?, schedule(&s)?, &config)?;
    let mut ck = backbone.denoiser_checkpoint();
    ck.log = log.clone();
    let path = out.join("denoiser.ckpt");
    ck.save(&path)?;
    prov.add("seed", config.seed);
    prov.add("dataset.checksum", data.manifest.checksum());
    prov.add("output.denoiser", format!("{} sha256:{}", path.display(), ck.digest()));
    write_log(&out, "backbone_log.txt", &log, &mut prov)?;
    println!("backbone trained for {} steps", log.records.len());
    finish(&out, &prov, &s)
}

pub fn train_feature(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    let (train, held_out) = data.split(&s)?;
    let d = FeatureTrainConfig::default();
    let config = FeatureTrainConfig {
        steps: s.parse_or("steps", d.steps)?,
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        learning_rate: s.parse_or("learning_rate", d.learning_rate)?,
        seed: seed(&s)?,
    };
    let (enc, log) = evaluation::train_feature_encoder(train, held_out, &config)?;
    let path = out.join("feature.ckpt");
    enc.save(&path)?;
    let mut prov = Provenance::new(name, &s);
    prov.add("seed", config.seed);
    prov.add("dataset.checksum", data.manifest.checksum());
    prov.add("output.feature", format!("{} sha256:{}", path.display(), enc.store.digest()));
    if let Some(acc) = log.summary.get("held_out_accuracy") {
        prov.add("held_out_accuracy", acc);
        println!("held-out shape+color accuracy: {acc}");
    }
    write_log(&out, "feature_log.txt", &log, &mut prov)?;
    finish(&out, &prov, &s)
}

pub fn train(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    let (records, _) = data.split(&s)?;
    let mut prov = Provenance::new(name, &s);
    let backbone = load_backbone(&s, &mut prov)?;
    let mode = mask_mode(&s)?;
    let config = train_config(&s)?;
    let mut state = ModelState::new(backbone, mode, config.seed);
    let path = out.join(format!("control-{}.ckpt", mode.name()));
    std::fs::write(out.join("partition.txt"), state.partition_text())?;
    let log = training::run_training(records, &mut state, &config, Some(&path))?;
    prov.add("seed", config.seed);
    prov.add("mask_mode", mode.name());
    prov.add("dataset.checksum", data.manifest.checksum());
    prov.add("output.control", format!("{} sha256:{}", path.display(), state.control.store.digest()));
    write_log(&out, "train_log.txt", &log, &mut prov)?;
    let n = log.records.len();
    println!(
        "trained {} for {n} steps; mean loss first/last 100: {:.5} / {:.5}",
        mode.name(),
        log.mean_loss(0..100),
        log.mean_loss(n.saturating_sub(100)..n)
    );
    finish(&out, &prov, &s)
}

fn load_mask(path: &Path) -> Result<Mask> {
    Mask::load_png(path).map_err(|e| Failure::InvalidData(format!("mask {}: {e}", path.display())).into())
}

pub fn generate(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let mut prov = Provenance::new(name, &s);
    let backbone = load_backbone(&s, &mut prov)?;
    let mut control = load_control(&s, &mut prov)?;
    let seed = seed(&s)?;
    if control.is_none() && s.flag("with_conditioning")? {
        control = Some(init_controlnet_from_backbone(&backbone.unet, mask_mode(&s)?, seed));
        prov.add("conditioning", format!("fresh initialisation, seed {seed}"));
    }

    let (reference, mut mask, mut caption, mut mask_source) = match s.optional_path("reference")? {
        Some(path) => {
            let image = Image::load_png(&path)
                .map_err(|e| Failure::InvalidData(format!("reference {}: {e}", path.display())))?;
            (image, None, None, String::new())
        }
        None => {
            let index: usize = s
                .get("index")
                .ok_or_else(|| Failure::Usage("give --reference and --mask, or --dataset and --index".into()))?
                .parse()
                .map_err(|_| Failure::Usage("--index must be an integer".into()))?;
            let data = Dataset::load(&s)?;
            let record = data
                .records
                .get(index)
                .ok_or_else(|| Failure::Usage(format!("index {index} out of range ({})", data.records.len())))?
                .clone();
            prov.add("dataset.checksum", data.manifest.checksum());
            (
                record.image,
                Some(record.mask),
                Some(caption_from_metadata(&record.metadata)),
                format!("oracle:{}#{index}", s.get("dataset").unwrap_or_default()),
            )
        }
    };
    if let Some(path) = s.optional_path("mask")? {
        mask = Some(load_mask(&path)?);
        mask_source = format!("file:{}", path.display());
    }
    let mask = mask.ok_or_else(|| Failure::Usage("--mask is required with --reference".into()))?;
    if mask.size() != reference.size() {
        return Err(Failure::InvalidData(format!(
            "mask is {:?} but reference is {:?}",
            mask.size(),
            reference.size()
        ))
        .into());
    }
    if let Some(c) = s.get("caption") {
        caption = Some(c.to_string());
    }
    let caption = caption.ok_or_else(|| Failure::Usage("--caption is required".into()))?;
    backbone.text.tokenize(&caption)?;

    let count: usize = s.parse_or("count", 1)?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
    let requests: Vec<Request<'_>> = seeds
        .iter()
        .map(|&seed| Request {
            reference: &reference,
            mask: &mask,
            caption: &caption,
            seed,
        })
        .collect();
    let sampler = s.sampler()?;
    let images = generation::generate(&backbone, control.as_ref(), &requests, sampler)?;
    for (img, sd) in images.iter().zip(&seeds) {
        let path = out.join(format!("sample-{sd}.png"));
        img.save_png(&path)?;
        prov.output(&path);
    }
    write_grid(&out, GRID_FILE, &images, &mut prov)?;
    prov.add("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    prov.add("caption", &caption);
    prov.add("mask_source", &mask_source);
    prov.add("sampler", format!("{sampler:?}"));
    prov.add("conditioning_attached", control.is_some());
    println!("wrote {} sample(s) to {}", images.len(), out.display());
    finish(&out, &prov, &s)
}

pub fn evaluate(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    let (_, held_out) = data.split(&s)?;
    let limit: usize = s.parse_or("limit", held_out.len())?;
    let held_out = &held_out[..limit.min(held_out.len())];
    let mut prov = Provenance::new(name, &s);
    let backbone = load_backbone(&s, &mut prov)?;
    let control = load_control(&s, &mut prov)?.ok_or_else(|| Failure::Usage("--control is required".into()))?;
    let enc = load_feature(&s, &mut prov)?;
    let seed = seed(&s)?;
    let (images, report) = experiments::evaluate_variant(&backbone, &control, held_out, &enc, s.sampler()?, seed)?;
    let path = out.join("report.txt");
    std::fs::write(&path, report.to_text())?;
    prov.output(&path);
    write_grid(&out, GRID_FILE, &images[..images.len().min(32)], &mut prov)?;
    prov.add("seed", seed);
    prov.add("dataset.checksum", data.manifest.checksum());
    for (k, v) in &report.metrics {
        println!("{k}={v}");
    }
    finish(&out, &prov, &s)
}

pub fn experiment_ablation(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    let (train, held_out) = data.split(&s)?;
    let mut prov = Provenance::new(name, &s);
    let backbone = load_backbone(&s, &mut prov)?;
    let enc = load_feature(&s, &mut prov)?;
    let config = train_config(&s)?;
    let report = experiments::run_ablation(
        train,
        held_out,
        &backbone,
        &enc,
        &config,
        s.sampler()?,
        config.seed,
        Some(&out),
    )?;
    let path = out.join("ablation_report.txt");
    std::fs::write(&path, report.to_text())?;
    prov.output(&path);
    for v in [&report.with_mask, &report.without_mask] {
        let n = v.mask_mode.name();
        prov.add(&format!("control.{n}"), format!("sha256:{}", v.control.store.digest()));
        let shown = &v.samples[..v.samples.len().min(32)];
        write_grid(&out, &format!("grid-{n}.png"), shown, &mut prov)?;
        println!(
            "{n}: embed_sim={:.4} mask_fidelity={:.3}",
            v.metric("embed_sim"),
            v.metric("mask_fidelity")
        );
    }
    prov.add("seed", config.seed);
    prov.add("dataset.checksum", data.manifest.checksum());
    finish(&out, &prov, &s)
}

pub fn experiment_background(name: &str, s: Settings) -> Result<()> {
    let out = s.out_dir()?;
    let data = Dataset::load(&s)?;
    if data.manifest.spec.correlation_mode != CorrelationMode::Correlated {
        return Err(Failure::InvalidData("dataset was not built with --correlated".into()).into());
    }
    let (train, probes) = data.split(&s)?;
    let mut prov = Provenance::new(name, &s);
    let backbone = load_backbone(&s, &mut prov)?;
    let config = train_config(&s)?;
    let report = experiments::run_background_experiment(
        train,
        probes,
        &backbone,
        &config,
        s.sampler()?,
        config.seed,
        Some(&out),
    )?;
    let path = out.join("background_report.txt");
    std::fs::write(&path, report.to_text())?;
    prov.output(&path);
    write_grid(&out, "grid-with_mask.png", &report.with_mask_samples[..report.probes.len().min(32)], &mut prov)?;
    write_grid(&out, "grid-no_mask.png", &report.without_mask_samples[..report.probes.len().min(32)], &mut prov)?;
    let (w, wo) = report.mean();
    println!("mean background leakage: with_mask={w:.4} no_mask={wo:.4}");
    prov.add("seed", config.seed);
    prov.add("dataset.checksum", data.manifest.checksum());
    finish(&out, &prov, &s)
}
