use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpre_lab::bpre::{
    conditioned_survival_sampler, default_r, SampleManifest, SamplerOptions, Strategy,
};
use bpre_lab::experiments::{
    parse_experiment_list, run_e1_e2, run_experiment, ExperimentId, ExperimentResult, RunConfig,
    StabilizationParams, Thresholds, Verdict,
};
use bpre_lab::oracle::{conditional_generation_law, enumerate_walk, WalkStatistic};
use bpre_lab::spine::simulate_spine;
use bpre_lab::walk::{estimate_renewal, uniform_grid, RenewalOptions, Side};
use bpre_lab::{Classification, EnvironmentSpec, Measure, MonteCarlo, Tag};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

const OUT_ENV: &str = "BPRE_LAB_OUT";
const DEFAULT_OUT_ROOT: &str = "bpre-lab-runs";
const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] bpre_lab::Error),
    #[error("a seed is required: pass --seed or set `seed` in the config file")]
    MissingSeed,
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "bpre-lab",
    version,
    about = "Branching processes in random environment: simulation and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a spec with its classification and tilt constant.
    Calibrate {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Write raw weighted samples or spine traces to CSV.
    Simulate {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = TraceKind::Weighted)]
        kind: TraceKind,
    },
    /// Estimate and export the renewal tables u and v.
    Renewal {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 12.0)]
        extent: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
    /// Run experiments by id (e1..e8) or `all`.
    Experiment {
        /// Comma-separated ids or `all`; defaults to the config file list.
        ids: Option<String>,
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Exact laws by enumeration on a discrete spec.
    Oracle {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        n: usize,
        /// Generation whose law given survival to `n` is printed.
        #[arg(long, default_value_t = 1)]
        generation: usize,
        /// Enumerate a walk statistic instead of the branching process.
        #[arg(long, value_enum)]
        walk: Option<WalkArg>,
    },
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Environment spec JSON file.
    #[arg(long, conflicts_with = "sigma2")]
    spec: Option<PathBuf>,
    /// Calibrated lognormal-geometric family with this variance.
    #[arg(long)]
    sigma2: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run directory; must not exist. Defaults to a directory under $BPRE_LAB_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    threshold_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    TiltedRejection,
    TiltedRaoBlackwell,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::TiltedRejection => Strategy::TiltedRejection,
            StrategyArg::TiltedRaoBlackwell => Strategy::TiltedRaoBlackwell,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TraceKind {
    Weighted,
    Spine,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WalkArg {
    Tau,
    MaxNegative,
    MinNonneg,
}

impl From<WalkArg> for WalkStatistic {
    fn from(w: WalkArg) -> Self {
        match w {
            WalkArg::Tau => WalkStatistic::Tau,
            WalkArg::MaxNegative => WalkStatistic::MaxNegative,
            WalkArg::MinNonneg => WalkStatistic::MinNonneg,
        }
    }
}

impl SpecArgs {
    fn resolve(&self) -> Result<Option<EnvironmentSpec>> {
        if let Some(path) = &self.spec {
            let text = fs::read_to_string(path)?;
            let spec = serde_json::from_str(&text).map_err(|e| bpre_lab::Error::Config {
                origin: path.display().to_string(),
                message: format!("line {}, column {}: {e}", e.line(), e.column()),
            })?;
            return Ok(Some(spec));
        }
        match self.sigma2 {
            Some(s) => Ok(Some(EnvironmentSpec::calibrate_lognormal(s)?)),
            None => Ok(None),
        }
    }
}

/// Config file values, then flags.
fn build_config(spec: &SpecArgs, run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(seed) = run.seed {
                cfg.seed = seed;
            }
            cfg
        }
        None => {
            let seed = run.seed.ok_or(CliError::MissingSeed)?;
            RunConfig::new(EnvironmentSpec::calibrate_lognormal(1.0)?, seed)
        }
    };
    if let Some(s) = spec.resolve()? {
        cfg.spec = s;
    }
    if let Some(n) = &run.n {
        cfg.n = Some(n.clone());
    }
    cfg.r = run.r.or(cfg.r);
    cfg.samples = run.samples.or(cfg.samples);
    if let Some(w) = run.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        cfg.workers = w;
    }
    if let Some(s) = run.strategy {
        cfg.strategy = s.into();
    }
    if let Some(path) = &run.threshold_file {
        cfg.thresholds = Thresholds::load(path)?;
    }
    if let Some(out) = &run.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(format!("{name}-seed{}", cfg.seed))
    })
}

/// An output directory that carries a `partial` marker until `complete`.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path`, which must not exist, and writes the manifest before
    /// anything else.
    fn create(path: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        match fs::create_dir(path) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(bpre_lab::Error::OutputExists(path.to_path_buf()).into())
            }
            Err(e) => return Err(e.into()),
        }
        fs::write(path.join("partial"), "run did not finish\n")?;
        let manifest = serde_json::json!({
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "command": command,
            "config": cfg,
        });
        let tmp = path.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::rename(&tmp, path.join("manifest.json"))?;
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    fn complete(self) -> Result<()> {
        fs::remove_file(self.path.join("partial"))?;
        Ok(())
    }
}

fn monte_carlo(cfg: &RunConfig) -> MonteCarlo {
    MonteCarlo::new(cfg.seed).with_workers(cfg.workers)
}

fn enforce_for(spec: &EnvironmentSpec) -> Result<bool> {
    Ok(spec.classify()? == Classification::IntermediatelySubcritical)
}

fn calibrate(spec: &SpecArgs) -> Result<ExitCode> {
    let spec = match spec.resolve()? {
        Some(s) => s,
        None => return Err(CliError::Usage("calibrate needs --sigma2 or --spec".into())),
    };
    let class = spec.classify()?;
    println!(
        "classification: {}",
        serde_json::to_value(class)?.as_str().unwrap_or_default()
    );
    println!("gamma: {:.6}", spec.gamma());
    let m = spec.moments();
    println!("e_x: {:.6}", m.e_x);
    println!("e_x_exp_x: {:.6}", m.e_xex);
    println!("spec: {}", serde_json::to_string(&spec)?);
    Ok(ExitCode::SUCCESS)
}

fn simulate(spec: &SpecArgs, run: &RunArgs, kind: TraceKind) -> Result<ExitCode> {
    let cfg = build_config(spec, run)?;
    let n = cfg
        .n
        .as_ref()
        .and_then(|v| v.first().copied())
        .unwrap_or(64);
    let samples = cfg.samples.unwrap_or(10_000);
    let dir = RunDir::create(&run_dir(&cfg, "simulate"), "simulate", &cfg)?;
    let mc = monte_carlo(&cfg);
    match kind {
        TraceKind::Weighted => {
            let r = cfg.r.unwrap_or_else(|| default_r(n));
            let opts = SamplerOptions {
                r,
                prefix_len: r,
                enforce_assumptions: enforce_for(&cfg.spec)?,
                ..SamplerOptions::new(n, samples, cfg.strategy)
            };
            let set = conditioned_survival_sampler(&cfg.spec, &opts, &mc)?;
            set.write_csv(&dir.path.join("samples.csv"))?;
            SampleManifest {
                spec: cfg.spec.clone(),
                n,
                r,
                samples,
                strategy: cfg.strategy,
                seed: cfg.seed,
            }
            .write_json(&dir.path.join("samples.json"))?;
            println!(
                "wrote {} weighted samples (ESS {:.1}) to {}",
                set.len(),
                set.effective_sample_size(),
                dir.path.display()
            );
        }
        TraceKind::Spine => {
            let spec = &cfg.spec;
            let traces = mc.collect(Tag::new("cli-spine").with(n as u64), samples, |rng| {
                let env = spec.sample_environment(Measure::Tilted, n, rng)?;
                simulate_spine(&env, n, rng, Some(1 << 62))
            })?;
            let mut w = csv_writer(&dir.path.join("spine.csv"))?;
            writeln!(w, "sample,k,total,s_k,capped")?;
            for (i, t) in traces.iter().enumerate() {
                for (k, (z, s)) in t.totals.iter().zip(&t.walk.sums).enumerate() {
                    writeln!(w, "{i},{k},{z},{s},{}", t.capped)?;
                }
            }
            w.flush()?;
            println!(
                "wrote {} spine traces to {}",
                traces.len(),
                dir.path.display()
            );
        }
    }
    dir.complete()?;
    Ok(ExitCode::SUCCESS)
}

fn csv_writer(path: &Path) -> Result<io::BufWriter<fs::File>> {
    Ok(io::BufWriter::new(fs::File::create(path)?))
}

fn renewal(spec: &SpecArgs, run: &RunArgs, extent: f64, step: f64) -> Result<ExitCode> {
    let cfg = build_config(spec, run)?;
    let dir = RunDir::create(&run_dir(&cfg, "renewal"), "renewal", &cfg)?;
    let mc = monte_carlo(&cfg);
    for side in [Side::U, Side::V] {
        let opts = RenewalOptions {
            samples: cfg.samples.unwrap_or(RenewalOptions::default().samples),
            fixed_k: cfg.r,
            enforce_assumptions: enforce_for(&cfg.spec)?,
            ..Default::default()
        };
        let table = estimate_renewal(
            &cfg.spec,
            side,
            &uniform_grid(side, extent, step),
            &opts,
            &mc,
        )?;
        let path = dir.path.join(format!("{}_table.csv", side.label()));
        table.write_csv(&path)?;
        println!(
            "{}: truncation k = {}, last term {:.3e}, written to {}",
            side.label(),
            table.truncation_k,
            table.last_term.value,
            path.display()
        );
    }
    dir.complete()?;
    Ok(ExitCode::SUCCESS)
}

fn experiment(ids: Option<&str>, spec: &SpecArgs, run: &RunArgs) -> Result<ExitCode> {
    let mut cfg = build_config(spec, run)?;
    if let Some(ids) = ids {
        cfg.experiments = parse_experiment_list(ids)?;
    }
    if cfg.experiments.is_empty() {
        return Err(CliError::Usage("no experiments selected".into()));
    }
    let name = match cfg.experiments.as_slice() {
        [one] => format!("experiment-{one}"),
        _ if cfg.experiments == ExperimentId::ALL => "experiment-all".to_string(),
        _ => "experiment".to_string(),
    };
    let dir = RunDir::create(&run_dir(&cfg, &name), "experiment", &cfg)?;
    let mut verdicts = Vec::new();
    // e1 and e2 share their samples
    let mut cached: Vec<ExperimentResult> = Vec::new();
    let both =
        cfg.experiments.contains(&ExperimentId::E1) && cfg.experiments.contains(&ExperimentId::E2);
    for &id in &cfg.experiments {
        let result = if let Some(pos) = cached.iter().position(|r| r.id == id) {
            cached.swap_remove(pos)
        } else if both && matches!(id, ExperimentId::E1 | ExperimentId::E2) {
            let mc = MonteCarlo::new(cfg.seed).with_workers(cfg.workers);
            let (e1, e2) = run_e1_e2(
                &cfg.spec,
                &StabilizationParams::resolve(&cfg),
                &cfg.thresholds,
                &mc,
                Some(&dir.path),
            )?;
            let (now, later) = if id == ExperimentId::E1 {
                (e1, e2)
            } else {
                (e2, e1)
            };
            cached.push(later);
            now
        } else {
            run_experiment(id, &cfg, Some(&dir.path))?
        };
        result.write_json(&dir.path.join(id.label()).join("result.json"))?;
        println!(
            "{id} {}: {}",
            result.title,
            result.verdict.to_string().to_uppercase()
        );
        for c in &result.checks {
            println!("  {:<13} {}: {}", c.verdict.to_string(), c.name, c.detail);
        }
        verdicts.push(result.verdict);
    }
    dir.complete()?;
    Ok(ExitCode::from(Verdict::combine(verdicts).exit_code() as u8))
}

fn oracle(spec: &SpecArgs, n: usize, generation: usize, walk: Option<WalkArg>) -> Result<ExitCode> {
    let spec = match spec.resolve()? {
        Some(s) => s,
        None => return Err(CliError::Usage("oracle needs --spec".into())),
    };
    let law = match walk {
        Some(stat) => enumerate_walk(&spec, n, stat.into())?,
        None => conditional_generation_law(&spec, n, generation)?,
    };
    println!("{}", serde_json::to_string_pretty(&law)?);
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Calibrate { spec } => calibrate(spec),
        Command::Simulate { spec, run, kind } => simulate(spec, run, *kind),
        Command::Renewal {
            spec,
            run,
            extent,
            step,
        } => renewal(spec, run, *extent, *step),
        Command::Experiment { ids, spec, run } => experiment(ids.as_deref(), spec, run),
        Command::Oracle {
            spec,
            n,
            generation,
            walk,
        } => oracle(spec, *n, *generation, *walk),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
