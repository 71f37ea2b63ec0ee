//! Command-line front end. Exit codes: 0 success, 1 usage or config error,
//! 2 data or I/O error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::dump_pairs;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_phantoms, preprocess_dataset, Difficulty, Manifest, MaskMode, PhantomParams, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate, write_report, EvalOptions, DEFAULT_BASELINE_TRIALS};
use crate::trainer::{batch_seed, load_labeled_images, run_training, InferenceModel, TrainState};
use crate::verify::{run_suite, Module, REFERENCE_SEEDS};

fn after_help() -> String {
    format!(
        "{}\nAll randomness derives from the master seed by hashing it with a per-purpose label.",
        RunConfig::key_help()
    )
}

#[derive(Parser, Debug)]
#[command(name = "clamseg", version, about = "Dual-model contrastive lesion segmentation on phantom images")]
#[command(after_help = after_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset with manifest and hidden masks.
    GenData(GenDataArgs),
    /// Organ-mask, crop and resize a dataset.
    Preprocess(PreprocessArgs),
    /// Train the model pair.
    #[command(after_help = after_help())]
    Train(TrainArgs),
    /// Score a checkpoint against the hidden masks of one split.
    Eval(EvalArgs),
    /// Segment one preprocessed image.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write an inference checkpoint cut down to one supervision depth.
    Prune(PruneArgs),
    /// Write the pair batch of one training step as images.
    DumpPairs(DumpPairsArgs),
    /// Print the canonical config text (defaults, or the given file resolved).
    ShowConfig(ShowConfigArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "easy")]
    pub difficulty: Difficulty,
    /// Side of the generated images.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "threshold")]
    pub mask_mode: MaskMode,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Also write a per-tile lesion fraction table at this tile size.
    #[arg(long)]
    pub eta_tile: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Config file; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint with its recorded config; --steps counts extra steps (default 0).
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Defaults to the checkpoint's infer.threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BASELINE_TRIALS)]
    pub baseline_trials: usize,
    #[arg(long, default_value_t = 0)]
    pub baseline_seed: u64,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write the marker probability map.
    #[arg(long)]
    pub probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    pub module: Module,
    #[arg(long, default_value_t = REFERENCE_SEEDS)]
    pub seeds: usize,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub depth: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DumpPairsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// 1-based training step whose batch is drawn.
    #[arg(long, default_value_t = 1)]
    pub step: u64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ShowConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.positive_frac) {
        return Err(Error::InvalidArgument(format!(
            "--positive-frac must lie in [0, 1], got {}",
            a.positive_frac
        )));
    }
    let params = PhantomParams::new(a.size, a.difficulty);
    let manifest = generate_phantoms(&a.out, a.count, a.positive_frac, a.seed, &params)?;
    let pos = manifest.records.iter().filter(|r| r.label == crate::data::Label::Positive).count();
    println!("wrote {} images ({pos} positive) to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let summary = preprocess_dataset(&a.input, &a.out, a.mask_mode, a.size, a.eta_tile)?;
    for (id, why) in &summary.skipped {
        eprintln!("warning: skipped {id}: {why}");
    }
    println!(
        "preprocessed {} images to {}×{} in {} ({} skipped)",
        summary.written,
        a.size,
        a.size,
        a.out.display(),
        summary.skipped.len()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let state = match &a.resume {
        Some(ck) => TrainState::from_checkpoint(&Checkpoint::read(ck)?)?,
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.train.steps = n;
            }
            cfg.validate()?;
            TrainState::new(cfg)?
        }
    };
    // a resumed run keeps its recorded config; --steps only counts extra steps
    let steps = a.steps.unwrap_or(if a.resume.is_some() { 0 } else { state.config.train.steps });
    let summary = run_training(&a.data, state, &a.out, steps)?;
    if let Some(last) = summary.metrics.last() {
        println!("step {}  total loss {:.6}  grad norm {:.4e}", last.step, last.total_loss, last.grad_norm);
    }
    println!("checkpoint {}", summary.checkpoint.display());
    println!("metrics    {}", summary.log.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        split: a.split,
        threshold: a.threshold,
        depth: a.depth,
        baseline_trials: a.baseline_trials,
        baseline_seed: a.baseline_seed,
    };
    let report = evaluate(&a.ckpt, &a.data, &opts)?;
    let (table, kv) = write_report(&report, &a.ckpt)?;
    print!("{}", report.to_table());
    println!("report {} , {}", table.display(), kv.display());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = InferenceModel::load(&a.ckpt)?;
    let image = Image::read_pgm(&a.image)?;
    let threshold = a.threshold.unwrap_or(model.config.infer.threshold);
    let probs = model.marker_probability(&image, a.depth)?;
    let mask = crate::image::Mask::threshold(&probs, threshold as f32);
    mask.write_pgm(&a.out)?;
    if let Some(p) = &a.probs {
        probs.write_pgm(p)?;
    }
    println!("{} foreground pixels -> {}", mask.count(), a.out.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be positive".into()));
    }
    let report = run_suite(a.module, a.seeds)?;
    for line in report.case_lines() {
        println!("{line}");
    }
    println!(
        "{} checks, max rel err {:.3e}, {:.2}s",
        report.results.len(),
        report.max_rel_err(),
        report.elapsed.as_secs_f64()
    );
    if let Some(f) = report.failures().next() {
        return Err(Error::GradcheckFailed(format!(
            "{} seed {}: rel err {:.3e} at {:?}",
            f.name, f.seed, f.report.max_rel_err, f.report.worst
        )));
    }
    Ok(())
}

fn prune(a: &PruneArgs) -> Result<()> {
    let model = InferenceModel::load(&a.ckpt)?;
    model.pruned_checkpoint(a.depth)?.write(&a.out)?;
    println!("pruned to depth {} -> {}", a.depth, a.out.display());
    Ok(())
}

fn dump(a: &DumpPairsArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.step == 0 {
        return Err(Error::InvalidArgument("--step is 1-based".into()));
    }
    let manifest = Manifest::load(&a.data)?;
    let images = load_labeled_images(&manifest, Split::Train)?;
    let pairs = crate::augment::make_pairs(&images, &cfg.pairs, batch_seed(cfg.train.seed, a.step))?;
    dump_pairs(&pairs, &a.out)?;
    println!("{} pairs -> {}", pairs.len(), a.out.display());
    Ok(())
}

fn show_config(a: &ShowConfigArgs) -> Result<()> {
    print!("{}", load_config(a.config.as_deref())?.to_text());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Prune(a) => prune(a),
        Command::DumpPairs(a) => dump(a),
        Command::ShowConfig(a) => show_config(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Render of the top-level help, used by the docs test.
pub fn help_text() -> String {
    use clap::CommandFactory;
    Cli::command().render_long_help().to_string()
}
