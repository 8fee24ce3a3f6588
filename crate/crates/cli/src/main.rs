use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moesim_core::experiment::{self, ExperimentSpec, SummaryRow};
use moesim_core::metrics::{trace_report, DEFAULT_DRIFT_WINDOW};
use moesim_core::placement::{init_for_shape, SwapThreshold};
use moesim_core::trace::{load_trace, ramp_profile, save_trace, GeneratorConfig, TraceGenerator};
use moesim_core::{CostModel, Engine, ModelShape, PolicyConfig, RoutingTrace};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] moesim_core::Error),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Hybrid fast/slow-device MoE offload simulator.
#[derive(Debug, Parser)]
#[command(name = "moesim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic routing traces.
    GenTrace(GenTraceArgs),
    /// Simulate one engine on one trace at one expert cache ratio.
    Simulate(SimulateArgs),
    /// Run an experiment described by a TOML file.
    Sweep(SweepArgs),
    /// Compare two engines from experiment summaries.
    Compare(CompareArgs),
    /// Print routing statistics of traces.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct GenTraceArgs {
    /// mixtral, phi or LxExK.
    #[arg(long, default_value = "mixtral")]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, or directory when --count is above 1.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    prefill_tokens: Option<usize>,
    #[arg(long)]
    decode_tokens: Option<usize>,
    /// Dirichlet concentration of per-sequence preferences; "inf" for uniform.
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    similarity: Option<f64>,
    /// Mean prediction accuracy over layers 1..L.
    #[arg(long)]
    accuracy: Option<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Checked against the trace when given.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    ecr: f64,
    #[arg(long)]
    engine: Engine,
    #[arg(long)]
    cost_model: Option<PathBuf>,
    /// Traces used to initialize the cache; defaults to the simulated trace.
    #[arg(long = "calibration")]
    calibration: Vec<PathBuf>,
    #[arg(long)]
    prediction_start_layer: Option<usize>,
    #[arg(long)]
    no_degradation: bool,
    /// Directory for summary.json and events.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Experiment file (TOML).
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cost_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// summary.csv holding engine A.
    a: PathBuf,
    /// summary.csv holding engine B; defaults to A.
    b: Option<PathBuf>,
    #[arg(long)]
    engine_a: Engine,
    #[arg(long)]
    engine_b: Engine,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DRIFT_WINDOW)]
    window: usize,
}

fn read_to_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_cost_model(path: &Path) -> CliResult<CostModel> {
    let text = read_to_string(path)?;
    let config_err = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let cost: CostModel = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| config_err(e.to_string()))?
    };
    cost.validate()?;
    Ok(cost)
}

fn write_out(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> CliResult<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(CliError::io(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(moesim_core::Error::from)?;
    emit(&(text + "\n"))
}

fn gen_trace(args: GenTraceArgs) -> CliResult<()> {
    let shape = ModelShape::parse(&args.shape)?;
    let mut cfg = GeneratorConfig::for_shape(shape);
    if let Some(n) = args.prefill_tokens {
        cfg.num_prefill_tokens = n;
    }
    if let Some(n) = args.decode_tokens {
        cfg.num_decode_tokens = n;
    }
    if let Some(c) = args.concentration {
        cfg.preference_concentration = c;
    }
    if let Some(s) = args.similarity {
        cfg.prefill_decode_similarity_target = s;
    }
    if let Some(a) = args.accuracy {
        cfg.prediction_accuracy_profile = ramp_profile(shape.num_layers(), a)?;
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let generator = TraceGenerator::new(&cfg)?;
    if args.count == 1 {
        let trace = generator.generate(args.seed, format!("seq-{}", args.seed));
        save_trace(&trace, &args.out)?;
        emit(&format!("{}\n", args.out.display()))?;
        return Ok(());
    }
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    for (i, seed) in experiment::sequence_seeds(args.seed, args.count)
        .into_iter()
        .enumerate()
    {
        let trace = generator.generate(seed, format!("seq-{i:04}"));
        let path = args.out.join(format!("{}.jsonl", trace.sequence_id()));
        save_trace(&trace, &path)?;
        emit(&format!("{}\n", path.display()))?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    let trace = load_trace(&args.trace)?;
    if let Some(s) = &args.shape {
        let shape = ModelShape::parse(s)?;
        if shape != trace.shape() {
            return Err(moesim_core::Error::ShapeMismatch(format!(
                "trace is {}, --shape is {shape}",
                trace.shape()
            ))
            .into());
        }
    }
    let cost = match &args.cost_model {
        Some(p) => load_cost_model(p)?,
        None => CostModel::default(),
    };
    let calib_traces: Vec<RoutingTrace> = args
        .calibration
        .iter()
        .map(|p| load_trace(p))
        .collect::<Result<_, _>>()?;
    let calib_refs: Vec<&RoutingTrace> = if calib_traces.is_empty() {
        vec![&trace]
    } else {
        calib_traces.iter().collect()
    };
    let calib = experiment::calibration_matrix(&calib_refs)?;
    let initial = init_for_shape(trace.shape(), &calib, args.ecr)?;
    let mut policy = PolicyConfig::for_shape(args.engine, trace.shape());
    if let Some(start) = args.prediction_start_layer {
        policy.prediction_start_layer = start;
    }
    policy.graceful_degradation = !args.no_degradation;
    let report = experiment::run_single(
        &trace,
        &args.trace,
        &initial,
        args.ecr,
        policy,
        &cost,
        SwapThreshold::default(),
    )?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let placement = if args.engine == Engine::Daop {
            moesim_core::placement::allocate_for_sequence(
                &initial,
                &moesim_core::placement::prefill_counts(&trace),
                SwapThreshold::default(),
            )?
            .0
        } else {
            initial.clone()
        };
        let timeline = moesim_core::simulator::simulate_decode(&trace, &placement, &policy, &cost)?;
        timeline.save_events_csv(&dir.join("events.csv"))?;
        let text = serde_json::to_string_pretty(&report).map_err(moesim_core::Error::from)?;
        write_out(&dir.join("summary.json"), &(text + "\n"))?;
    }
    print_json(&report)
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let text = read_to_string(&args.config)?;
    let mut spec: ExperimentSpec = toml::from_str(&text).map_err(|e| CliError::Config {
        path: args.config.clone(),
        message: e.to_string(),
    })?;
    if let Some(out) = args.out {
        spec.output_dir = out;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(p) = &args.cost_model {
        spec.cost_model = load_cost_model(p)?;
    }
    let out = experiment::run(&spec)?;
    emit(&read_to_string(&out.aggregate_csv)?)?;
    eprintln!("wrote {}", out.summary_csv.display());
    Ok(())
}

fn compare(args: CompareArgs) -> CliResult<()> {
    let rows_a: Vec<SummaryRow> = experiment::read_summary(&args.a)?;
    let rows_b = match &args.b {
        Some(b) => experiment::read_summary(b)?,
        None => rows_a.clone(),
    };
    let table = experiment::compare(&rows_a, args.engine_a, &rows_b, args.engine_b)?;
    let mut buf = Vec::new();
    experiment::write_comparison(&table, &mut buf)?;
    let text = String::from_utf8(buf).expect("csv output is utf-8");
    match &args.out {
        Some(path) => write_out(path, &text),
        None => emit(&text),
    }
}

fn stats(args: StatsArgs) -> CliResult<()> {
    for path in &args.traces {
        let trace = load_trace(path)?;
        let report = trace_report(&trace, args.window);
        let line = serde_json::to_string(&report).map_err(moesim_core::Error::from)?;
        emit(&(line + "\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

fn fail(kind: &str, message: String) -> ExitCode {
    let report = ErrorReport {
        error: ErrorBody { kind, message },
    };
    eprintln!(
        "{}",
        serde_json::to_string(&report).expect("error report serializes")
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
