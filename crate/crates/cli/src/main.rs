//! `maskctl`: dataset creation, training, generation, evaluation and the two
//! headline experiments. Exit codes: 0 success, 1 usage error, 2 missing
//! artifact, 3 invalid input data, 4 numerical failure.

mod commands;
mod failure;
mod provenance;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "maskctl", version, about = "Mask-conditioned ControlNet diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene dataset with oracle masks.
    MakeDataset(MakeDataset),
    /// Train the latent autoencoder.
    TrainVae(TrainStage),
    /// Train the frozen backbone (U-Net and caption encoder).
    TrainBackbone(TrainStage),
    /// Train the evaluation feature encoder.
    TrainFeature(TrainStage),
    /// Train the adapter and ControlNet against a frozen backbone.
    Train(TrainControl),
    /// Sample images for one reference, mask and caption.
    Generate(Generate),
    /// Self-reconstruction metrics on the held-out split.
    Evaluate(Evaluate),
    /// Train with and without the mask prompt and compare.
    ExperimentAblation(Experiment),
    /// Background leakage after training on shape-correlated backgrounds.
    ExperimentBackground(Experiment),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key=value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Inputs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    denoiser: Option<PathBuf>,
    #[arg(long)]
    control: Option<PathBuf>,
    #[arg(long)]
    feature: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Optim {
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Args, Debug, Default)]
struct Sampling {
    #[arg(long, value_enum)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct MaskChoice {
    /// Condition on the masked object plus the reference (default).
    #[arg(long, conflicts_with = "no_mask")]
    with_mask: bool,
    /// Ablation: feed the raw reference in both channel groups.
    #[arg(long)]
    no_mask: bool,
}

#[derive(Args, Debug)]
struct MakeDataset {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    count: Option<usize>,
    /// Image side in pixels (multiple of 8).
    #[arg(long)]
    size: Option<usize>,
    /// Pin each shape class to one background class.
    #[arg(long)]
    correlated: bool,
}

#[derive(Args, Debug)]
struct TrainStage {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    optim: Optim,
}

#[derive(Args, Debug)]
struct TrainControl {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    optim: Optim,
    #[command(flatten)]
    mask: MaskChoice,
}

#[derive(Args, Debug)]
struct Generate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    sampling: Sampling,
    /// Sampler steps (DDIM).
    #[arg(long)]
    steps: Option<usize>,
    /// Reference image PNG; alternatively `--dataset` with `--index`.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Binary mask PNG selecting the object in the reference.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Dataset record supplying reference, oracle mask and default caption.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    caption: Option<String>,
    /// Number of consecutive seeds to sample, starting at `--seed`.
    #[arg(long)]
    count: Option<usize>,
    /// Attach the conditioning branch; freshly initialised unless
    /// `--control` is given.
    #[arg(long)]
    with_conditioning: bool,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    sampling: Sampling,
    /// Sampler steps (DDIM).
    #[arg(long)]
    steps: Option<usize>,
    /// Evaluate at most this many held-out scenes.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct Experiment {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    optim: Optim,
    #[command(flatten)]
    sampling: Sampling,
    /// Sampler steps (DDIM); `--steps` sets the training budget.
    #[arg(long)]
    sampler_steps: Option<usize>,
    /// Accepted for symmetry with `make-dataset`; the dataset's own spec
    /// decides whether backgrounds are correlated.
    #[arg(long)]
    correlated: bool,
}

/// Flag values as setting overrides.
#[derive(Default)]
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn put(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) {
        self.put(key, value.as_ref().map(|p| p.display().to_string()));
    }

    fn common(&mut self, c: &Common) {
        self.put("seed", c.seed);
        self.path("out", &c.out);
    }

    fn inputs(&mut self, i: &Inputs) {
        self.path("dataset", &i.dataset);
        self.path("vae", &i.vae);
        self.path("denoiser", &i.denoiser);
        self.path("control", &i.control);
        self.path("feature", &i.feature);
    }

    fn optim(&mut self, o: &Optim) {
        self.put("steps", o.steps);
        self.put("batch_size", o.batch_size);
        self.put("learning_rate", o.learning_rate);
    }

    fn sampling(&mut self, s: &Sampling) {
        self.put(
            "sampler",
            s.sampler.map(|k| match k {
                SamplerKind::Ddpm => "ddpm",
                SamplerKind::Ddim => "ddim",
            }),
        );
        self.put("eta", s.eta);
    }

    fn mask(&mut self, m: &MaskChoice) {
        if m.no_mask {
            self.put("mask_mode", Some("no_mask"));
        } else if m.with_mask {
            self.put("mask_mode", Some("with_mask"));
        }
    }

    fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.put(key, Some("true"));
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    let mut o = Overrides::default();
    let (name, config, run): (&str, Option<PathBuf>, CommandFn) = match cli.command {
        Command::MakeDataset(a) => {
            o.common(&a.common);
            o.put("count", a.count);
            o.put("size", a.size);
            o.flag("correlated", a.correlated);
            ("make-dataset", a.common.config, make_dataset)
        }
        Command::TrainVae(a) => {
            stage(&mut o, &a);
            ("train-vae", a.common.config, train_vae)
        }
        Command::TrainBackbone(a) => {
            stage(&mut o, &a);
            ("train-backbone", a.common.config, train_backbone)
        }
        Command::TrainFeature(a) => {
            stage(&mut o, &a);
            ("train-feature", a.common.config, train_feature)
        }
        Command::Train(a) => {
            o.common(&a.common);
            o.inputs(&a.inputs);
            o.optim(&a.optim);
            o.mask(&a.mask);
            ("train", a.common.config, train)
        }
        Command::Generate(a) => {
            o.common(&a.common);
            o.inputs(&a.inputs);
            o.sampling(&a.sampling);
            o.put("sampler_steps", a.steps);
            o.path("reference", &a.reference);
            o.path("mask", &a.mask);
            o.put("index", a.index);
            o.put("caption", a.caption.clone());
            o.put("count", a.count);
            o.flag("with_conditioning", a.with_conditioning);
            ("generate", a.common.config, generate)
        }
        Command::Evaluate(a) => {
            o.common(&a.common);
            o.inputs(&a.inputs);
            o.sampling(&a.sampling);
            o.put("sampler_steps", a.steps);
            o.put("limit", a.limit);
            ("evaluate", a.common.config, evaluate)
        }
        Command::ExperimentAblation(a) => {
            experiment(&mut o, &a);
            ("experiment-ablation", a.common.config, experiment_ablation)
        }
        Command::ExperimentBackground(a) => {
            experiment(&mut o, &a);
            ("experiment-background", a.common.config, experiment_background)
        }
    };
    let settings = settings::Settings::resolve(config.as_deref(), o.0)?;
    run(name, settings)
}

fn stage(o: &mut Overrides, a: &TrainStage) {
    o.common(&a.common);
    o.inputs(&a.inputs);
    o.optim(&a.optim);
}

fn experiment(o: &mut Overrides, a: &Experiment) {
    o.common(&a.common);
    o.inputs(&a.inputs);
    o.optim(&a.optim);
    o.sampling(&a.sampling);
    o.put("sampler_steps", a.sampler_steps);
    o.flag("correlated", a.correlated);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { failure::EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure::exit_code(&e))
        }
    }
}
