use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use momentum_lab::config::ExperimentConfig;
use momentum_lab::filters::verify_filters;
use momentum_lab::forensics::{
    attention_spectrum, bode_model, power_law_fit, spectrum_ratio, stability_model, BodeResult,
};
use momentum_lab::model::ModelState;
use momentum_lab::reports::report;
use momentum_lab::sweeps::{atomic_write, run_sweep, SweepGrid};
use momentum_lab::tasks::{generate, write_jsonl, TaskSample};
use momentum_lab::training::train_model;
use momentum_lab::{LabError, Result};
use serde::Serialize;

/// Momentum attention experiments: training, sweeps and spectral forensics.
#[derive(Parser)]
#[command(name = "momlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its result, curves and checkpoint.
    Train(RunArgs),
    /// Run every cell of a sweep grid.
    Sweep(SweepArgs),
    /// Measured vs theoretical attention gain of a trained model.
    Bode(BodeArgs),
    /// Energy ratio and subspace Jacobian of a trained model.
    Stability(StabilityArgs),
    /// Fit y = y0·N^(−α) to a two-column CSV.
    FitScaling(FitArgs),
    /// Run the filter invariant suite.
    VerifyFilters,
    /// Write task samples as JSONL.
    GenData(GenArgs),
    /// Derive plot-ready CSV tables from saved results.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML with [model], [task] and [train] tables.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the model and data seeds of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep grid TOML.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the grid's base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads; falls back to THREADS_OVERRIDE, then 1.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Probe,
    SpectrumRatio,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint directory to analyse instead of training from the config.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Evaluation sequences used as operating points.
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

#[derive(Args)]
struct BodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "probe")]
    mode: Mode,
    /// Random probe directions per operating point.
    #[arg(long, default_value_t = 4)]
    directions: usize,
    /// γ=0 checkpoint for spectrum-ratio mode; trained from the config when absent.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Leading coordinates in the Jacobian subspace.
    #[arg(long, default_value_t = 16)]
    dims: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with a header and numeric columns N, y.
    #[arg(long)]
    input: PathBuf,
    /// Directory for fit.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Experiment TOML; only its [task] table is used.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding saved results.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to `<input>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Timing {
    wall_clock_s: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Malformed input is a usage error; everything else is a run failure.
fn exit_code(e: &LabError) -> u8 {
    match e {
        LabError::Config(_) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => train_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Bode(a) => bode_cmd(&a),
        Command::Stability(a) => stability_cmd(&a),
        Command::FitScaling(a) => fit_cmd(&a),
        Command::VerifyFilters => filters_cmd(),
        Command::GenData(a) => gen_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e {
        Failed::Checks => Ok(ExitCode::from(1)),
        Failed::Lab(e) => Err(e),
    })
}

enum Failed {
    Lab(LabError),
    /// Already reported on stdout.
    Checks,
}

impl From<LabError> for Failed {
    fn from(e: LabError) -> Self {
        Failed::Lab(e)
    }
}

type CmdResult = std::result::Result<(), Failed>;

fn load_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&a.config)?;
    Ok(match a.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn train_cmd(a: &RunArgs) -> CmdResult {
    let cfg = load_config(a)?;
    create_dir(&a.out)?;
    let (model, result) = train_model(&cfg.model, &cfg.task, &cfg.train)?;
    result.write_json(&a.out.join("result.json"))?;
    result.write_curves_csv(&a.out.join("curves.csv"))?;
    model.save(&a.out.join("model"))?;
    write_json(&a.out.join("timing.json"), &Timing { wall_clock_s: result.wall_clock_s })?;
    let m = &result.final_metrics;
    println!("params {}  accuracy {:.4}  loss {:.4}", result.param_count, m.accuracy, m.mean_loss);
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> CmdResult {
    let mut grid = SweepGrid::load(&a.config)?;
    if let Some(s) = a.seed {
        grid.base_seed = s;
    }
    let parallelism = match a.parallelism {
        Some(p) => p,
        None => threads_override()?.unwrap_or(1),
    };
    let start = std::time::Instant::now();
    let result = run_sweep(&grid, parallelism, Some(&a.out))?;
    write_json(&a.out.join("timing.json"), &Timing { wall_clock_s: start.elapsed().as_secs_f64() })?;
    println!("{}: {} cells, {} failed", result.name, result.cells.len(), result.n_failed);
    for g in &result.groups {
        if let Some(s) = &g.accuracy {
            let coords = serde_json::to_string(&g.coords).map_err(LabError::from)?;
            println!("{coords}  acc {:.4}  sem {}", s.mean, s.sem.map_or("-".into(), |x| format!("{x:.4}")));
        }
    }
    Ok(())
}

fn threads_override() -> Result<Option<usize>> {
    match std::env::var("THREADS_OVERRIDE") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LabError::Config(format!("THREADS_OVERRIDE must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Loads a checkpoint or trains one from the config; returns it with the
/// config used for sampling.
fn obtain_model(a: &ModelArgs) -> Result<(ModelState, ExperimentConfig)> {
    let cfg = load_config(&a.run)?;
    create_dir(&a.run.out)?;
    let model = match &a.model {
        Some(dir) => ModelState::load(dir)?,
        None => train_model(&cfg.model, &cfg.task, &cfg.train)?.0,
    };
    Ok((model, cfg))
}

fn probe_samples(cfg: &ExperimentConfig, n: usize) -> Result<Vec<TaskSample>> {
    generate(&cfg.task, momentum_lab::seeds::derive_seed(cfg.train.seed, "forensics"), n)
}

fn bode_cmd(a: &BodeArgs) -> CmdResult {
    let (model, cfg) = obtain_model(&a.model)?;
    let samples = probe_samples(&cfg, a.model.samples)?;
    let result: BodeResult = match a.mode {
        Mode::Probe => bode_model(&model, &samples, a.model.layer, a.directions, cfg.train.seed)?,
        Mode::SpectrumRatio => {
            let baseline = match &a.baseline {
                Some(dir) => ModelState::load(dir)?,
                None => {
                    let mut m = cfg.model.clone();
                    m.momentum.gamma = 0.0;
                    train_model(&m, &cfg.task, &cfg.train)?.0
                }
            };
            let t = samples[0].tokens.len();
            let base = attention_spectrum(&baseline, &samples, a.model.layer)?;
            let mom = attention_spectrum(&model, &samples, a.model.layer)?;
            spectrum_ratio(&base, &mom, t, model.config().momentum.gamma)?
        }
    };
    let out = &a.model.run.out;
    write_json(&out.join("bode.json"), &result)?;
    result.write_csv(&out.join("bode.csv"))?;
    println!("gamma {}  pearson r {}", result.gamma, result.pearson_r.map_or("undefined".into(), |r| format!("{r:.4}")));
    Ok(())
}

fn stability_cmd(a: &StabilityArgs) -> CmdResult {
    let (model, cfg) = obtain_model(&a.model)?;
    let samples = probe_samples(&cfg, a.model.samples)?;
    let r = stability_model(&model, &samples, a.model.layer, a.dims, a.eps, a.probes, cfg.train.seed)?;
    let out = &a.model.run.out;
    write_json(&out.join("stability.json"), &r)?;
    r.write_csv(&out.join("stability.csv"))?;
    println!(
        "energy ratio {:.4}  det residual {:.4e}  condition {:.4e}  ({}/{} dims{})",
        r.energy_ratio,
        r.det_residual,
        r.condition_number,
        r.subspace_dim,
        r.full_dim,
        if r.reliable { "" } else { ", subspace estimate" }
    );
    Ok(())
}

fn fit_cmd(a: &FitArgs) -> CmdResult {
    let points = read_points(&a.input)?;
    let fit = power_law_fit(&points)?;
    println!("alpha = {:.3}  gamma0 = {:.3}  R^2 = {:.5}", fit.alpha, fit.y0, fit.r_squared);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("fit.json"), &fit)?;
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let bad = |msg: String| LabError::Config(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => LabError::io(path, std::io::Error::other(e.to_string())),
        _ => bad(e.to_string()),
    })?;
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |j: usize| -> Result<f64> {
            let s = rec.get(j).ok_or_else(|| bad(format!("row {} has fewer than two columns", i + 1)))?;
            s.trim().parse().map_err(|_| bad(format!("row {}: {s:?} is not a number", i + 1)))
        };
        points.push((field(0)?, field(1)?));
    }
    Ok(points)
}

fn filters_cmd() -> CmdResult {
    let checks = verify_filters();
    println!("{:<28} {:>12} {:>10}  result", "check", "worst", "tolerance");
    for c in &checks {
        println!("{:<28} {:>12.3e} {:>10.1e}  {}", c.name, c.worst, c.tolerance, if c.passed { "pass" } else { "FAIL" });
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failed::Checks)
    }
}

fn gen_cmd(a: &GenArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let samples = generate(&cfg.task, seed, a.n)?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("{}.jsonl", cfg.task.tag()));
    write_jsonl(&samples, &path)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> CmdResult {
    let out = a.out.clone().unwrap_or_else(|| a.input.join("report"));
    for p in report(&a.input, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}
