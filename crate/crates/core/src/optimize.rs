//! Shared optimisation loop and training log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use maskctl_tensor::archive::{format_key_values, parse_key_values};
use maskctl_tensor::{Adam, Archive, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::seeding::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the optimizer step that produced `loss`.
    pub step: usize,
    pub loss: f64,
    pub wall_time: f64,
}

/// Line-delimited log: `step=..<TAB>loss=..<TAB>wall_time=..`, then optional
/// `# key=value` summary lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub summary: BTreeMap<String, String>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over records `range` (clipped to the log).
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.records.len());
        let start = range.start.min(end);
        let slice = &self.records[start..end];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            // `{}` on f64 round-trips exactly.
            let _ = writeln!(out, "step={}\tloss={}\twall_time={:.3}", r.step, r.loss, r.wall_time);
        }
        for (k, v) in &self.summary {
            let _ = writeln!(out, "# {k}={v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(kv) = line.strip_prefix("# ") {
                if let Some((k, v)) = kv.split_once('=') {
                    log.summary.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            let fields: BTreeMap<&str, &str> = line.split('\t').filter_map(|f| f.split_once('=')).collect();
            let num = |k: &str| -> Result<f64> {
                fields
                    .get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CoreError::InvalidData(format!("bad log line `{line}`")))
            };
            log.records.push(StepRecord {
                step: num("step")? as usize,
                loss: num("loss")?,
                wall_time: num("wall_time")?,
            });
        }
        Ok(log)
    }
}

/// Result of one forward/backward pass: the loss and a gradient for every
/// trainable tensor.
pub type StepOutput = (f64, BTreeMap<String, Tensor<f32>>);

/// Runs Adam from `adam.steps()` up to `total_steps`. Step `k` draws its
/// randomness from `rng_for(seed, BATCH, k)`, so stopping after any step and
/// resuming from the saved `(params, adam, log)` reproduces the same trace.
///
/// `after_step` sees the state after every update (used for checkpoints).
pub fn optimize(
    params: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    log: &mut TrainLog,
    total_steps: usize,
    seed: u64,
    mut step_fn: impl FnMut(usize, &mut ChaCha8Rng, &ParamStore<f32>) -> Result<StepOutput>,
    mut after_step: impl FnMut(usize, &ParamStore<f32>, &Adam<f32>, &TrainLog) -> Result<()>,
) -> Result<()> {
    let started = Instant::now();
    let time_offset = log.records.last().map_or(0.0, |r| r.wall_time);
    for step in adam.steps() as usize..total_steps {
        let mut rng = rng_for(seed, stream::BATCH, step as u64);
        let (loss, grads) = step_fn(step, &mut rng, params)?;
        if !loss.is_finite() {
            return Err(CoreError::Numerical {
                step: step + 1,
                msg: format!("loss is {loss}"),
            });
        }
        if grads.values().any(|g| !g.all_finite()) {
            return Err(CoreError::Numerical {
                step: step + 1,
                msg: "non-finite gradient".into(),
            });
        }
        adam.step(params, &grads)?;
        log.records.push(StepRecord {
            step: step + 1,
            loss,
            wall_time: time_offset + started.elapsed().as_secs_f64(),
        });
        after_step(step + 1, params, adam, log)?;
    }
    Ok(())
}


pub const PARAM_PREFIX: &str = "param/";
pub const OPTIM_PREFIX: &str = "adam/";
pub const CONFIG_RECORD: &str = "config.txt";
pub const LOG_RECORD: &str = "log.txt";
const OPTIM_RECORD: &str = "optim.txt";

/// Model weights plus, for a resumable checkpoint, optimizer state and log.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub config: BTreeMap<String, String>,
    pub optimizer: Option<Adam<f32>>,
    pub log: TrainLog,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        ar.tensors.extend_prefixed(PARAM_PREFIX, &self.params);
        ar.records.insert(CONFIG_RECORD.into(), format_key_values(&self.config));
        ar.records.insert(LOG_RECORD.into(), self.log.to_text());
        if let Some(adam) = &self.optimizer {
            let (steps, state) = adam.state();
            ar.tensors.extend_prefixed(OPTIM_PREFIX, &state);
            let kv: BTreeMap<String, String> = [
                ("steps".to_string(), steps.to_string()),
                ("lr".to_string(), adam.lr.to_string()),
            ]
            .into();
            ar.records.insert(OPTIM_RECORD.into(), format_key_values(&kv));
        }
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let config = parse_key_values(ar.record(CONFIG_RECORD)?);
        let log = match ar.records.get(LOG_RECORD) {
            Some(text) => TrainLog::parse(text)?,
            None => TrainLog::default(),
        };
        let optimizer = match ar.records.get(OPTIM_RECORD) {
            Some(text) => {
                let kv = parse_key_values(text);
                let num = |k: &str| {
                    kv.get(k)
                        .ok_or_else(|| CoreError::InvalidData(format!("optimizer record lacks `{k}`")))
                };
                let steps: u64 = num("steps")?
                    .parse()
                    .map_err(|_| CoreError::InvalidData("bad optimizer step count".into()))?;
                let lr: f64 = num("lr")?
                    .parse()
                    .map_err(|_| CoreError::InvalidData("bad optimizer lr".into()))?;
                Some(Adam::restore(lr, steps, &ar.tensors.subset(OPTIM_PREFIX)))
            }
            None => None,
        };
        Ok(Self {
            params: ar.tensors.subset(PARAM_PREFIX),
            config,
            optimizer,
            log,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Digest of the weights only.
    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_text_roundtrip() {
        let mut log = TrainLog::default();
        log.records.push(StepRecord {
            step: 1,
            loss: 0.1 + 0.2,
            wall_time: 0.5,
        });
        log.summary.insert("psnr".into(), "21.5".into());
        let back = TrainLog::parse(&log.to_text()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn nan_loss_reports_step() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::<f32>::zeros(&[1]));
        let mut adam = Adam::new(0.1);
        let mut log = TrainLog::default();
        let err = optimize(
            &mut params,
            &mut adam,
            &mut log,
            5,
            0,
            |step, _, _| Ok((if step == 2 { f64::NAN } else { 1.0 }, BTreeMap::new())),
            |_, _, _, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Numerical { step: 3, .. }), "{err}");
    }
}
