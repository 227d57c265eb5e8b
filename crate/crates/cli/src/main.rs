mod commands;
mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use nrp_core::io::Config;

#[derive(Parser)]
#[command(
    name = "nrp",
    version,
    about = "Self-supervised perturbations and purifier training on toy image tasks"
)]
struct Cli {
    /// key=value settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as an IMGB container.
    Synth(SynthArgs),
    /// Train the feature extractor used by self-supervised attacks.
    TrainExtractor(SupervisedArgs),
    /// Train the toy classifier that attacks are evaluated against.
    TrainClassifier(SupervisedArgs),
    /// Craft adversarial images.
    Attack(AttackArgs),
    /// Train a purifier and its critic.
    TrainNrp(TrainNrpArgs),
    /// Run images through a purifier.
    Purify(PurifyArgs),
    /// Accuracy table over attacks and defenses, written as CSV.
    Eval(EvalArgs),
    /// Feature distortion and fooling rate against attack iterations.
    DistortionCurve(CurveArgs),
    /// Transfer fooling rate of self-supervised attacks at each tap.
    LayerSweep(SweepArgs),
}

/// Collects the flags that were given into a [`Config`].
trait FlagConfig {
    fn flags(&self, cfg: &mut Config);
}

fn put<V: ToString>(cfg: &mut Config, key: &str, v: &Option<V>) {
    if let Some(v) = v {
        cfg.set(key, v.to_string());
    }
}

fn put_path(cfg: &mut Config, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        cfg.set(key, v.display().to_string());
    }
}

#[derive(Args, Default)]
struct DataArgs {
    /// IMGB file, or a CIFAR-10 binary file or directory (see --format).
    #[arg(long)]
    data: Option<PathBuf>,
    /// synthetic | imgb | cifar10
    #[arg(long)]
    format: Option<String>,
    /// Synthetic sample count.
    #[arg(long)]
    count: Option<usize>,
    /// Synthetic image side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    /// Use the CIFAR-10 test split.
    #[arg(long)]
    test_split: bool,
}

impl FlagConfig for DataArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "data", &self.data);
        put(c, "format", &self.format);
        put(c, "count", &self.count);
        put(c, "size", &self.size);
        put(c, "data-seed", &self.data_seed);
        put(c, "classes", &self.classes);
        if self.test_split {
            c.set("test-split", "true");
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

impl FlagConfig for SynthArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "out", &self.out);
        self.data.flags(c);
    }
}

#[derive(Args)]
struct SupervisedArgs {
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated channel widths per block.
    #[arg(long)]
    widths: Option<String>,
    /// Comma-separated conv counts per block (extractor only).
    #[arg(long)]
    depths: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

impl FlagConfig for SupervisedArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "out", &self.out);
        put(c, "epochs", &self.epochs);
        put(c, "batch", &self.batch);
        put(c, "lr", &self.lr);
        put(c, "seed", &self.seed);
        put(c, "widths", &self.widths);
        put(c, "depths", &self.depths);
        self.data.flags(c);
    }
}

#[derive(Args)]
struct AttackArgs {
    /// fgsm | rfgsm | ifgsm | mifgsm | dim | ssp | bpda
    #[arg(long)]
    method: Option<String>,
    /// Budget on the 0-255 scale.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Step size on the 0-255 scale.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Feature tap (ssp and bpda only).
    #[arg(long)]
    tap: Option<String>,
    /// mae | l2 | cosine (ssp and bpda only).
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input IMGB file.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output IMGB file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Purifier attacked through by bpda.
    #[arg(long)]
    purifier: Option<PathBuf>,
}

impl FlagConfig for AttackArgs {
    fn flags(&self, c: &mut Config) {
        put(c, "method", &self.method);
        put(c, "epsilon", &self.epsilon);
        put(c, "step", &self.step);
        put(c, "iters", &self.iters);
        put(c, "tap", &self.tap);
        put(c, "metric", &self.metric);
        put(c, "seed", &self.seed);
        put_path(c, "in", &self.input);
        put_path(c, "out", &self.out);
        put_path(c, "extractor", &self.extractor);
        put_path(c, "classifier", &self.classifier);
        put_path(c, "purifier", &self.purifier);
    }
}

#[derive(Args)]
struct TrainNrpArgs {
    /// full | no-feat | no-pixel | vanilla-gan | gaussian | fgsm
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Learning rate of purifier and critic.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    /// Iterations of the training-time attack.
    #[arg(long)]
    attack_iters: Option<usize>,
    #[arg(long)]
    tap: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Classifier for FGSM training adversaries; defaults to the extractor.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Purifier checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    critic_out: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    growth: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

impl FlagConfig for TrainNrpArgs {
    fn flags(&self, c: &mut Config) {
        put(c, "ablation", &self.ablation);
        put(c, "alpha", &self.alpha);
        put(c, "gamma", &self.gamma);
        put(c, "lambda", &self.lambda);
        put(c, "lr", &self.lr);
        put(c, "batch", &self.batch);
        put(c, "steps", &self.steps);
        put(c, "seed", &self.seed);
        put(c, "crop", &self.crop);
        put(c, "attack-iters", &self.attack_iters);
        put(c, "tap", &self.tap);
        put(c, "checkpoint-every", &self.checkpoint_every);
        put_path(c, "extractor", &self.extractor);
        put_path(c, "classifier", &self.classifier);
        put_path(c, "out", &self.out);
        put_path(c, "critic-out", &self.critic_out);
        put_path(c, "log", &self.log);
        put(c, "width", &self.width);
        put(c, "growth", &self.growth);
        put(c, "blocks", &self.blocks);
        self.data.flags(c);
    }
}

#[derive(Args)]
struct PurifyArgs {
    #[arg(long)]
    purifier: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Uniform input noise on the 0-255 scale before purifying.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl FlagConfig for PurifyArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "purifier", &self.purifier);
        put_path(c, "in", &self.input);
        put_path(c, "out", &self.out);
        put(c, "noise", &self.noise);
        put(c, "seed", &self.seed);
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Defense column as name=checkpoint; repeatable.
    #[arg(long)]
    defense: Vec<String>,
    /// Comma-separated attack methods.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated budgets on the 0-255 scale.
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation images as IMGB; otherwise the data flags apply.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

impl FlagConfig for EvalArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "classifier", &self.classifier);
        put_path(c, "extractor", &self.extractor);
        if !self.defense.is_empty() {
            c.set("defenses", self.defense.join(","));
        }
        put(c, "methods", &self.methods);
        put(c, "epsilon", &self.epsilon);
        put(c, "iters", &self.iters);
        put(c, "seed", &self.seed);
        put_path(c, "in", &self.input);
        put_path(c, "out", &self.out);
        put(c, "model-id", &self.model_id);
        self.data.flags(c);
    }
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Held-out classifier for fooling rates.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// ssp | ifgsm | mifgsm | dim
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Comma-separated iteration counts.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    tap: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

impl FlagConfig for CurveArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "extractor", &self.extractor);
        put_path(c, "classifier", &self.classifier);
        put(c, "method", &self.method);
        put(c, "epsilon", &self.epsilon);
        put(c, "step", &self.step);
        put(c, "grid", &self.grid);
        put(c, "tap", &self.tap);
        put(c, "seed", &self.seed);
        put_path(c, "in", &self.input);
        put_path(c, "out", &self.out);
        self.data.flags(c);
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Comma-separated taps; all extractor taps by default.
    #[arg(long)]
    taps: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

impl FlagConfig for SweepArgs {
    fn flags(&self, c: &mut Config) {
        put_path(c, "extractor", &self.extractor);
        put_path(c, "classifier", &self.classifier);
        put(c, "taps", &self.taps);
        put(c, "epsilon", &self.epsilon);
        put(c, "step", &self.step);
        put(c, "iters", &self.iters);
        put(c, "seed", &self.seed);
        put_path(c, "in", &self.input);
        put_path(c, "out", &self.out);
        self.data.flags(c);
    }
}

fn flags_of(a: &dyn FlagConfig) -> Config {
    let mut c = Config::new();
    a.flags(&mut c);
    c
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Synth(a) => commands::synth(file, flags_of(a)),
        Command::TrainExtractor(a) => commands::train_supervised_cmd("extractor", file, flags_of(a)),
        Command::TrainClassifier(a) => commands::train_supervised_cmd("classifier", file, flags_of(a)),
        Command::Attack(a) => commands::attack(file, flags_of(a)),
        Command::TrainNrp(a) => commands::train_nrp_cmd(file, flags_of(a)),
        Command::Purify(a) => commands::purify_cmd(file, flags_of(a)),
        Command::Eval(a) => commands::eval_cmd(file, flags_of(a)),
        Command::DistortionCurve(a) => commands::curve_cmd(file, flags_of(a)),
        Command::LayerSweep(a) => commands::sweep_cmd(file, flags_of(a)),
    }
}
