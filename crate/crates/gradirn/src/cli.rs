//! The `gradirn` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime and data errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradirn_core::registration::{normalize_min_max, DEFAULT_TAU_INIT};
use gradirn_core::{
    register_pair, RegistrationConfig, RegistrationParams, SimilarityKind, Tensor, TrainConfig, Variant,
};
use serde::Serialize;

use crate::checkpoint;
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, timing_path, write_json};
use crate::gradcheck::{require_all, run_all};
use crate::synth::SynthParams;
use crate::train::train_dataset;
use crate::{gtf, pgm};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gradirn",
    version,
    about = "Unrolled multi-resolution deformable registration of 2D images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of deformed image pairs.
    Synth(SynthArgs),
    /// Train a registration network on a dataset.
    Train(TrainArgs),
    /// Register one image pair.
    Register(RegisterArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Check every gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub num_pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthParams::default().deform_scale)]
    pub deform_scale: f64,
    #[arg(long, default_value_t = SynthParams::default().smoothness)]
    pub smoothness: f64,
    #[arg(long, default_value_t = SynthParams::default().texture)]
    pub texture: f64,
    /// Fraction of the pairs placed in the validation split.
    #[arg(long, default_value_t = 0.0)]
    pub val_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Vn,
    VnNograd,
    RcCnn,
    PlainGd,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vn => Variant::Vn,
            VariantArg::VnNograd => Variant::VnNoGrad,
            VariantArg::RcCnn => Variant::RcCnn,
            VariantArg::PlainGd => Variant::PlainGd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimArg {
    Ssd,
    NccGlobal,
    NccLocal,
}

fn similarity(sim: SimArg, window: usize) -> SimilarityKind {
    match sim {
        SimArg::Ssd => SimilarityKind::Ssd,
        SimArg::NccGlobal => SimilarityKind::NccGlobal,
        SimArg::NccLocal => SimilarityKind::NccLocal { window },
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Vn)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = SimArg::Ssd)]
    pub sim: SimArg,
    /// Local NCC window side.
    #[arg(long, default_value_t = SimilarityKind::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Unrolled steps per level.
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TAU_INIT)]
    pub tau_init: f64,
    /// Also keep a checkpoint every this many epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Checkpoint directory; optional with `--variant plain-gd`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Moving image (`.gtf` or `.pgm`).
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out_disp: Option<PathBuf>,
    #[arg(long)]
    pub out_warped: Option<PathBuf>,
    /// Write the field after every step into this directory.
    #[arg(long)]
    pub dump_steps: Option<PathBuf>,
    /// Only `plain-gd` may override the checkpoint's variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, default_value_t = RegistrationConfig::default().alpha)]
    pub alpha: f64,
    #[arg(long, default_value_t = RegistrationConfig::default().plain_gd_step)]
    pub step: f64,
    /// Similarity for `plain-gd` without a checkpoint.
    #[arg(long, value_enum, default_value_t = SimArg::Ssd)]
    pub sim: SimArg,
    #[arg(long, default_value_t = SimilarityKind::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Only evaluate this split (default: every sample).
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Errors go to standard error as a single line.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.val_frac) {
        return Err(Error::Usage(format!(
            "--val-frac must lie in [0, 1], got {}",
            a.val_frac
        )));
    }
    let params = SynthParams {
        size: a.size,
        deform_scale: a.deform_scale,
        smoothness: a.smoothness,
        texture: a.texture,
    };
    let val = (a.num_pairs as f64 * a.val_frac).round() as usize;
    let m = dataset::generate(&a.out, a.seed, &params, a.num_pairs - val, val)?;
    println!("wrote {} pairs to {}", m.samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let variant: Variant = a.variant.into();
    if !variant.is_learnable() {
        return Err(Error::Usage("plain-gd has nothing to train".into()));
    }
    let reg = RegistrationConfig {
        variant,
        levels: a.levels,
        steps_per_level: a.steps,
        similarity: similarity(a.sim, a.window),
        lambda: a.lambda,
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr: a.lr,
        lambda: a.lambda,
        epochs: a.epochs,
        seed: a.seed,
        clip_norm: a.clip_norm,
        checkpoint_every: a.checkpoint_every,
        ..Default::default()
    };
    let ds = Dataset::open(&a.data)?;
    let quiet = a.quiet;
    let log = train_dataset(&ds, &cfg, &reg, a.tau_init, &a.out, |e| {
        if !quiet {
            match e.val_loss {
                Some(v) => eprintln!("epoch {:>3}  train {:.6}  val {:.6}", e.epoch, e.train_loss, v),
                None => eprintln!("epoch {:>3}  train {:.6}", e.epoch, e.train_loss),
            }
        }
    })?;
    println!(
        "trained {} parameters on {} pairs; checkpoint in {}",
        log.parameter_count,
        log.train_pairs,
        a.out.display()
    );
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let t = if is_pgm {
        pgm::read(path)?
    } else {
        gtf::read_tensor(path)?
    };
    Ok(normalize_min_max(&t))
}

#[derive(Debug, Serialize)]
struct StepRecord {
    step: usize,
    level: usize,
    dissimilarity: f64,
    file: Option<String>,
}

#[derive(Debug, Serialize)]
struct RegisterReport {
    variant: checkpoint::VariantName,
    dissimilarity_before: f64,
    dissimilarity_after: f64,
    folding_percent: f64,
    std_log_jac: f64,
    min_det: f64,
    steps: Vec<StepRecord>,
}

pub const DUMP_INDEX: &str = "index.json";

fn register(a: RegisterArgs) -> Result<()> {
    let plain = a.variant == Some(VariantArg::PlainGd);
    if a.variant.is_some() && !plain {
        return Err(Error::Usage(
            "--variant only accepts plain-gd; learned variants come from the checkpoint".into(),
        ));
    }
    let (params, mut reg) = match (&a.ckpt, plain) {
        (Some(dir), _) => {
            let c = checkpoint::load::<f32>(dir)?;
            (c.params, c.registration)
        }
        (None, true) => (
            RegistrationParams::empty(),
            RegistrationConfig {
                levels: a.levels,
                steps_per_level: a.steps,
                similarity: similarity(a.sim, a.window),
                ..Default::default()
            },
        ),
        (None, false) => return Err(Error::Usage("--ckpt is required unless --variant plain-gd".into())),
    };
    if plain {
        reg.variant = Variant::PlainGd;
        reg.alpha = a.alpha;
        reg.plain_gd_step = a.step;
    }
    reg.dump_intermediate = true;
    let moving = read_image(&a.moving)?;
    let fixed = read_image(&a.fixed)?;
    let params = if plain { RegistrationParams::empty() } else { params };
    let outcome = register_pair(&moving, &fixed, &params, &reg)?;

    if let Some(p) = &a.out_disp {
        gtf::write_tensor(p, outcome.field.grid())?;
    }
    if let Some(p) = &a.out_warped {
        gtf::write_tensor(p, &outcome.warped)?;
    }
    let mut steps = Vec::new();
    if let Some(dir) = &a.dump_steps {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    for e in outcome.trajectory.iter().flat_map(|t| &t.entries) {
        let file = match &a.dump_steps {
            Some(dir) => {
                let name = format!("step-{:02}.gtf", e.step);
                gtf::write_tensor(&dir.join(&name), e.field.grid())?;
                Some(name)
            }
            None => None,
        };
        steps.push(StepRecord {
            step: e.step,
            level: e.level,
            dissimilarity: e.dissimilarity as f64,
            file,
        });
    }
    let report = RegisterReport {
        variant: reg.variant.into(),
        dissimilarity_before: outcome.dissimilarity_before as f64,
        dissimilarity_after: outcome.dissimilarity_after as f64,
        folding_percent: outcome.stats.folding_percent(),
        std_log_jac: outcome.stats.std_log_jac,
        min_det: outcome.stats.min_det,
        steps,
    };
    if let Some(dir) = &a.dump_steps {
        write_json(&dir.join(DUMP_INDEX), &report.steps)?;
    }
    let text = serde_json::to_string_pretty(&report).map_err(Error::json("<stdout>"))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(Error::io("<stdout>"))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let c = checkpoint::load::<f32>(&a.ckpt)?;
    let (report, timing) = evaluate_dataset(&ds, a.split.as_deref(), &c.params, &c.registration)?;
    write_json(&a.report, &report)?;
    write_json(&timing_path(&a.report), &timing)?;
    let g = &report.aggregate;
    let fmt = |s: &Option<crate::eval::Stat>| {
        s.as_ref()
            .map_or("n/a".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
    };
    println!("pairs            {}", g.pairs);
    println!("initial dice     {}", fmt(&g.initial_dice));
    println!("dice             {}", fmt(&g.dice));
    println!("hausdorff        {}", fmt(&g.hausdorff));
    println!("folding %        {}", fmt(&g.folding_percent));
    println!("std log jac      {}", fmt(&g.std_log_jac));
    println!("endpoint error   {}", fmt(&g.endpoint_error));
    println!("gt magnitude     {}", fmt(&g.gt_magnitude));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = run_all(a.seed)?;
    for r in &results {
        let mark = if r.passed() { "ok  " } else { "FAIL" };
        println!("{mark} {:<44} {:.2e} < {:.0e}", r.name, r.max_rel_err, r.tolerance);
    }
    require_all(&results)
}
