use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tarot_core::pipeline::{self, RunConfig, SelectionMode, Stage, StageContext, StageResult};
use tarot_core::{Error, ErrorKind, SinkhornOptions, Solver, SplitMode};

const DEFAULT_OUT: &str = "tarot-out";

#[derive(Parser, Debug)]
#[command(name = "tarot", version, about = "Targeted data selection with optimal transport")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for fold shuffling and random projection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select (and optionally weight) candidates for the target set.
    Select(SelectArgs),
    /// OT distance between two datasets.
    OtDist(OtDistArgs),
    /// Fit the whitening transform and write it to transform.json.
    Whiten(InputArgs),
    /// Linear datamodeling score of stored attribution scores.
    Lds(LdsArgs),
    /// Integer repetition weights for an existing selection.
    Weights(WeightsArgs),
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Candidate dataset manifest.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Target dataset manifest.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Reuse a transform written by `tarot whiten`.
    #[arg(long)]
    transform: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Fixed,
    Otm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Algorithm,
    Prose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Sinkhorn,
    Exact,
}

#[derive(Args, Debug, Default)]
struct SolverArgs {
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Sinkhorn entropic regularization.
    #[arg(long)]
    reg: Option<f64>,
}

#[derive(Args, Debug, Default)]
#[group(multiple = false)]
struct BudgetArgs {
    /// Total repetition budget R.
    #[arg(long = "R", visible_alias = "repetition")]
    repetition: Option<u64>,
    /// R = number of candidates + number of targets.
    #[arg(long)]
    match_full: bool,
    /// R = ceil(p * number of candidates).
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Selection size for fixed mode.
    #[arg(long)]
    size: Option<usize>,
    /// Target folds for OTM (default 10).
    #[arg(long)]
    k_folds: Option<usize>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitArg>,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args, Debug)]
struct OtDistArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct LdsArgs {
    /// Directory holding scores.json and its matrix.
    #[arg(long)]
    scores: PathBuf,
    /// Directory holding archive.json, masks and outputs.
    #[arg(long)]
    archive: PathBuf,
    /// Also report one correlation pooled over all (mask, target) pairs.
    #[arg(long)]
    pooled: bool,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    #[command(flatten)]
    input: InputArgs,
    /// selection.json to weight (default: <out>/selection.json).
    #[arg(long)]
    selection: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    budget: BudgetArgs,
}

fn base_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.selection.seed = seed;
        cfg.projection.seed = seed;
    }
    Ok(cfg)
}

fn apply_input(cfg: &mut RunConfig, input: &InputArgs) {
    if let Some(p) = &input.candidates {
        cfg.candidates = Some(p.clone());
    }
    if let Some(p) = &input.targets {
        cfg.targets = Some(p.clone());
    }
    if let Some(p) = &input.transform {
        cfg.whitening.transform = Some(p.clone());
    }
}

fn apply_solver(cfg: &mut RunConfig, args: &SolverArgs) -> Result<(), Error> {
    match (args.solver, args.reg) {
        (Some(SolverArg::Exact), Some(_)) => {
            return Err(Error::Config("--reg applies only to the sinkhorn solver".into()));
        }
        (Some(SolverArg::Exact), None) => cfg.solver = Solver::Exact,
        (Some(SolverArg::Sinkhorn), reg) | (None, reg @ Some(_)) => {
            let mut opts = match cfg.solver {
                Solver::Sinkhorn(o) => o,
                Solver::Exact => SinkhornOptions::default(),
            };
            if let Some(r) = reg {
                opts.reg = r;
            }
            cfg.solver = Solver::Sinkhorn(opts);
        }
        (None, None) => {}
    }
    Ok(())
}

fn apply_budget(cfg: &mut RunConfig, args: &BudgetArgs) {
    if args.repetition.is_some() || args.match_full || args.fraction.is_some() {
        cfg.weighting = pipeline::WeightingConfig {
            repetition: args.repetition,
            match_full: args.match_full,
            fraction: args.fraction,
        };
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load(cfg: &RunConfig) -> StageResult<(tarot_core::FeatureMatrix, tarot_core::FeatureMatrix)> {
    cfg.validate().stage(Stage::Config)?;
    if cfg.candidates.is_none() || cfg.targets.is_none() {
        return Err(Error::Config("both --candidates and --targets are required".into())).stage(Stage::Config);
    }
    let start = Instant::now();
    let inputs = cfg.load_inputs().stage(Stage::Load)?;
    eprintln!(
        "[load] {} candidates, {} targets, d = {} ({:.3}s)",
        inputs.0.nrows(),
        inputs.1.nrows(),
        inputs.0.ncols(),
        start.elapsed().as_secs_f64()
    );
    Ok(inputs)
}

fn cmd_select(cli: &Cli, args: &SelectArgs) -> StageResult<()> {
    let mut cfg = base_config(cli).stage(Stage::Config)?;
    apply_input(&mut cfg, &args.input);
    apply_solver(&mut cfg, &args.solver).stage(Stage::Config)?;
    apply_budget(&mut cfg, &args.budget);
    if let Some(mode) = args.mode {
        cfg.selection.mode = match mode {
            ModeArg::Fixed => SelectionMode::Fixed,
            ModeArg::Otm => SelectionMode::Otm,
        };
    }
    if let Some(size) = args.size {
        cfg.selection.size = Some(size);
    }
    if let Some(k) = args.k_folds {
        cfg.selection.k_folds = k;
    }
    if let Some(split) = args.split_mode {
        cfg.selection.split_mode = match split {
            SplitArg::Algorithm => SplitMode::Algorithm,
            SplitArg::Prose => SplitMode::Prose,
        };
    }
    let (c, t) = load(&cfg)?;
    let out = pipeline::run_select(&cfg, &c, &t)?;
    for (stage, d) in &out.timings.0 {
        eprintln!("[{stage}] {:.3}s", d.as_secs_f64());
    }
    let dir = out_dir(&cfg);
    out.write(&dir).stage(Stage::Write)?;
    eprintln!(
        "selected {} of {} (ratio {:.4}) -> {}",
        out.result.selected.len(),
        c.nrows(),
        out.ratio(),
        dir.display()
    );
    if let Some(o) = &out.objective {
        eprintln!(
            "d_OT(selected) = {:.6}, d_OT(all) = {:.6}",
            o.selected_distance, o.pool_distance
        );
    }
    Ok(())
}

fn cmd_ot_dist(cli: &Cli, args: &OtDistArgs) -> StageResult<()> {
    let mut cfg = base_config(cli).stage(Stage::Config)?;
    apply_input(&mut cfg, &args.input);
    apply_solver(&mut cfg, &args.solver).stage(Stage::Config)?;
    let (c, t) = load(&cfg)?;
    let start = Instant::now();
    let report = pipeline::run_ot_distance(&cfg, &c, &t)?;
    eprintln!("[ot] {:.3}s", start.elapsed().as_secs_f64());
    let path = out_dir(&cfg).join("ot_distance.json");
    write_json(&report, &path).stage(Stage::Write)?;
    eprintln!("ot distance {:.9} -> {}", report.distance, path.display());
    Ok(())
}

fn cmd_whiten(cli: &Cli, args: &InputArgs) -> StageResult<()> {
    let mut cfg = base_config(cli).stage(Stage::Config)?;
    apply_input(&mut cfg, args);
    let (c, t) = load(&cfg)?;
    let start = Instant::now();
    let (space, json) = pipeline::run_whiten(&cfg, &c, &t)?;
    eprintln!("[metric] {:.3}s", start.elapsed().as_secs_f64());
    let dir = out_dir(&cfg);
    let path = dir.join("transform.json");
    std::fs::create_dir_all(&dir)
        .and_then(|_| std::fs::write(&path, json))
        .map_err(|e| io_error(&path, e))
        .stage(Stage::Write)?;
    eprintln!(
        "{} whitening, dim {} -> {}",
        format!("{:?}", space.transform.method()).to_lowercase(),
        space.transform.dim(),
        path.display()
    );
    Ok(())
}

fn cmd_lds(cli: &Cli, args: &LdsArgs) -> StageResult<()> {
    let cfg = base_config(cli).stage(Stage::Config)?;
    let start = Instant::now();
    let report = pipeline::run_lds(&args.scores, &args.archive, args.pooled)?;
    eprintln!("[lds] {:.3}s", start.elapsed().as_secs_f64());
    let path = out_dir(&cfg).join("lds.json");
    write_json(&report, &path).stage(Stage::Write)?;
    eprintln!("mean LDS {:.6} -> {}", report.mean, path.display());
    Ok(())
}

fn cmd_weights(cli: &Cli, args: &WeightsArgs) -> StageResult<()> {
    let mut cfg = base_config(cli).stage(Stage::Config)?;
    apply_input(&mut cfg, &args.input);
    apply_solver(&mut cfg, &args.solver).stage(Stage::Config)?;
    // `cfg` must describe the run that wrote the selection; the budget flags
    // only choose the repetition factor
    let mut budget_cfg = cfg.clone();
    apply_budget(&mut budget_cfg, &args.budget);
    let dir = out_dir(&cfg);
    let selection_path = args.selection.clone().unwrap_or_else(|| dir.join("selection.json"));
    let (ids, fingerprint) = pipeline::read_selection_file(&selection_path).stage(Stage::Load)?;
    let (c, t) = load(&cfg)?;
    let start = Instant::now();
    let report = pipeline::run_weights(&cfg, &c, &t, &ids, &fingerprint, &budget_cfg.weighting)?;
    eprintln!("[weights] {:.3}s", start.elapsed().as_secs_f64());
    let path = dir.join("weights.json");
    write_json(&report, &path).stage(Stage::Write)?;
    let mut csv = String::from("id,weight\n");
    for (id, w) in report.ids.iter().zip(&report.weights) {
        csv.push_str(&format!("{id},{w}\n"));
    }
    let csv_path = dir.join("weights.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| io_error(&csv_path, e))
        .stage(Stage::Write)?;
    eprintln!("weights for {} samples, R = {} -> {}", report.ids.len(), report.repetition, path.display());
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: [config] --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: [config] thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Select(a) => cmd_select(&cli, a),
        Command::OtDist(a) => cmd_ot_dist(&cli, a),
        Command::Whiten(a) => cmd_whiten(&cli, a),
        Command::Lds(a) => cmd_lds(&cli, a),
        Command::Weights(a) => cmd_weights(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
