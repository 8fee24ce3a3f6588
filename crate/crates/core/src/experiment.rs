//! Batch experiments: engines across expert cache ratios over a set of
//! traces, with per-run JSON reports and an aggregate CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    activation_matrix, mean_accuracy, phase_similarity, prediction_accuracy, routing_fidelity,
    ActivationMatrix,
};
use crate::placement::{
    allocate_for_sequence, init_for_shape, prefill_counts, ExpertPlacement, SwapThreshold,
};
use crate::policies::{Engine, PolicyConfig};
use crate::simulator::{simulate_decode, simulate_prefill, CostModel, PrefillSummary, TimelineSummary};
use crate::trace::{
    load_trace, ramp_profile, save_trace, GeneratorConfig, ModelShape, Phase, RoutingTrace,
    TraceGenerator,
};

/// Version of the `summary.csv` and `aggregate.csv` column layouts.
pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_CALIBRATION_FRACTION: f64 = 0.2;

mod shape_name {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use crate::trace::ModelShape;

    pub fn serialize<S: Serializer>(v: &Option<ModelShape>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(shape) => s.serialize_str(&shape.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ModelShape>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| ModelShape::parse(&s).map_err(de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceSource {
    Files {
        paths: Vec<PathBuf>,
    },
    Generate {
        num_sequences: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_prefill_tokens: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_decode_tokens: Option<usize>,
        #[serde(
            default,
            skip_serializing_if = "Option::is_none",
            with = "opt_f64_or_inf"
        )]
        preference_concentration: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        similarity_target: Option<f64>,
        /// Mean of the default ramp-shaped accuracy profile.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        accuracy_target: Option<f64>,
    },
}

mod opt_f64_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => crate::serde_util::f64_or_inf::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "crate::serde_util::f64_or_inf")] f64);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

fn default_engines() -> Vec<Engine> {
    Engine::ALL.to_vec()
}

fn default_calibration_fraction() -> f64 {
    DEFAULT_CALIBRATION_FRACTION
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub traces: TraceSource,
    /// Required for generated traces; checked against loaded ones.
    #[serde(default, with = "shape_name", skip_serializing_if = "Option::is_none")]
    pub shape: Option<ModelShape>,
    pub ecr_list: Vec<f64>,
    #[serde(default = "default_engines")]
    pub engines: Vec<Engine>,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
    /// Defaults to 4, clamped to the layer count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_start_layer: Option<usize>,
    #[serde(default = "default_true")]
    pub graceful_degradation: bool,
    #[serde(default)]
    pub swap_threshold: SwapThreshold,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ecr_list.is_empty() {
            return Err(Error::InvalidConfig("ecr_list is empty".into()));
        }
        if let Some(bad) = self.ecr_list.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::InvalidConfig(format!("ecr {bad} outside (0, 1]")));
        }
        if self.engines.is_empty() {
            return Err(Error::InvalidConfig("at least one engine is required".into()));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "calibration_fraction {} outside (0, 1]",
                self.calibration_fraction
            )));
        }
        self.cost_model.validate()?;
        match &self.traces {
            TraceSource::Files { paths } if paths.is_empty() => {
                Err(Error::InvalidConfig("no trace files given".into()))
            }
            TraceSource::Generate { num_sequences: 0, .. } => {
                Err(Error::InvalidConfig("num_sequences must be at least 1".into()))
            }
            TraceSource::Generate { .. } if self.shape.is_none() => Err(Error::InvalidConfig(
                "generated traces need a model shape".into(),
            )),
            _ => Ok(()),
        }
    }

    fn policy(&self, engine: Engine, shape: ModelShape) -> PolicyConfig {
        let mut p = PolicyConfig::for_shape(engine, shape);
        if let Some(start) = self.prediction_start_layer {
            p.prediction_start_layer = start;
        }
        p.graceful_degradation = self.graceful_degradation;
        p
    }
}

/// Generator configuration used for a generated trace source.
pub fn generator_config(source: &TraceSource, shape: ModelShape) -> Result<Option<GeneratorConfig>> {
    let TraceSource::Generate {
        num_prefill_tokens,
        num_decode_tokens,
        preference_concentration,
        similarity_target,
        accuracy_target,
        ..
    } = source
    else {
        return Ok(None);
    };
    let mut cfg = GeneratorConfig::for_shape(shape);
    if let Some(n) = num_prefill_tokens {
        cfg.num_prefill_tokens = *n;
    }
    if let Some(n) = num_decode_tokens {
        cfg.num_decode_tokens = *n;
    }
    if let Some(c) = preference_concentration {
        cfg.preference_concentration = *c;
    }
    if let Some(t) = similarity_target {
        cfg.prefill_decode_similarity_target = *t;
    }
    if let Some(a) = accuracy_target {
        cfg.prediction_accuracy_profile = ramp_profile(shape.num_layers(), *a)?;
    }
    Ok(Some(cfg))
}

/// Per-sequence seeds drawn from the master seed.
pub fn sequence_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Traces of an experiment with the files they live in.
fn materialize(spec: &ExperimentSpec) -> Result<Vec<(PathBuf, RoutingTrace)>> {
    match &spec.traces {
        TraceSource::Files { paths } => paths
            .iter()
            .map(|p| {
                let trace = load_trace(p)?;
                if let Some(shape) = spec.shape {
                    if shape != trace.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "{} has shape {}, experiment expects {shape}",
                            p.display(),
                            trace.shape()
                        )));
                    }
                }
                Ok((p.clone(), trace))
            })
            .collect(),
        TraceSource::Generate { num_sequences, .. } => {
            let shape = spec.shape.expect("validated");
            let cfg = generator_config(&spec.traces, shape)?.expect("generated source");
            let generator = TraceGenerator::new(&cfg)?;
            let dir = spec.output_dir.join("traces");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            sequence_seeds(spec.seed, *num_sequences)
                .into_iter()
                .enumerate()
                .map(|(i, seed)| {
                    let trace = generator.generate(seed, format!("seq-{i:04}"));
                    let path = dir.join(format!("{}.jsonl", trace.sequence_id()));
                    save_trace(&trace, &path)?;
                    Ok((path, trace))
                })
                .collect()
        }
    }
}

/// Number of leading sequences used for calibration.
pub fn calibration_count(num_sequences: usize, fraction: f64) -> usize {
    ((num_sequences as f64 * fraction).floor() as usize).clamp(1, num_sequences.max(1))
}

/// Token-weighted activation probabilities over both phases of `traces`.
pub fn calibration_matrix(traces: &[&RoutingTrace]) -> Result<ActivationMatrix> {
    let mut parts = Vec::new();
    for t in traces {
        parts.push(activation_matrix(t, Phase::Prefill)?);
        if !t.decode().is_empty() {
            parts.push(activation_matrix(t, Phase::Decode)?);
        }
    }
    ActivationMatrix::pooled(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub sequence_id: String,
    pub trace_path: PathBuf,
    pub engine: Engine,
    pub ecr: f64,
    pub slot_budget: usize,
    pub policy: PolicyConfig,
    pub cost_model: CostModel,
    pub initial_placement: Vec<Vec<usize>>,
    pub swaps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill: Option<PrefillSummary>,
    pub decode: TimelineSummary,
    pub set_fidelity: f64,
    pub score_mass: f64,
    pub similarity: Option<f64>,
    pub prediction_accuracy: Option<f64>,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub sequence_id: String,
    pub engine: Engine,
    pub ecr: f64,
    pub slot_budget: usize,
    pub num_decode_tokens: usize,
    pub total_latency_ms: f64,
    pub tokens_per_second: f64,
    pub migrations: usize,
    pub prefetches: usize,
    pub wasted_prefetches: usize,
    pub slow_executions: usize,
    pub degradations: usize,
    pub stale_inputs: usize,
    pub swaps: usize,
    pub hidden_migration_ms: f64,
    pub set_fidelity: f64,
    pub score_mass: f64,
    pub run_file: String,
}

impl SummaryRow {
    fn from_report(r: &RunReport, run_file: String) -> Self {
        let c = r.decode.counts;
        SummaryRow {
            schema_version: SCHEMA_VERSION,
            sequence_id: r.sequence_id.clone(),
            engine: r.engine,
            ecr: r.ecr,
            slot_budget: r.slot_budget,
            num_decode_tokens: r.decode.num_tokens,
            total_latency_ms: r.decode.total_latency_ms,
            tokens_per_second: r.decode.tokens_per_second,
            migrations: c.migrations,
            prefetches: c.prefetches,
            wasted_prefetches: c.wasted_prefetches,
            slow_executions: c.slow_executions,
            degradations: c.degradations,
            stale_inputs: c.stale_inputs,
            swaps: r.swaps,
            hidden_migration_ms: r.prefill.map_or(0.0, |p| p.hidden_migration_ms),
            set_fidelity: r.set_fidelity,
            score_mass: r.score_mass,
            run_file,
        }
    }
}

/// One row of `aggregate.csv`: totals over every evaluated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub engine: Engine,
    pub ecr: f64,
    pub sequences: usize,
    pub decode_tokens: usize,
    pub total_latency_ms: f64,
    pub tokens_per_second: f64,
    pub migrations: usize,
    pub slow_executions: usize,
    pub set_fidelity: f64,
}

/// Tokens per second over several runs: total tokens over total time.
pub fn aggregate_tokens_per_second(rows: &[&SummaryRow]) -> f64 {
    let tokens: usize = rows.iter().map(|r| r.num_decode_tokens).sum();
    let ms: f64 = rows.iter().map(|r| r.total_latency_ms).sum();
    if ms > 0.0 {
        1000.0 * tokens as f64 / ms
    } else {
        f64::INFINITY
    }
}

pub fn aggregate(rows: &[SummaryRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(u64, Engine), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.ecr.to_bits(), r.engine)).or_default().push(r);
    }
    let mut out: Vec<AggregateRow> = groups
        .into_values()
        .map(|g| {
            let tokens: usize = g.iter().map(|r| r.num_decode_tokens).sum();
            AggregateRow {
                schema_version: SCHEMA_VERSION,
                engine: g[0].engine,
                ecr: g[0].ecr,
                sequences: g.len(),
                decode_tokens: tokens,
                total_latency_ms: g.iter().map(|r| r.total_latency_ms).sum(),
                tokens_per_second: aggregate_tokens_per_second(&g),
                migrations: g.iter().map(|r| r.migrations).sum(),
                slow_executions: g.iter().map(|r| r.slow_executions).sum(),
                set_fidelity: g
                    .iter()
                    .map(|r| r.set_fidelity * r.num_decode_tokens as f64)
                    .sum::<f64>()
                    / tokens.max(1) as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| a.ecr.total_cmp(&b.ecr).then(a.engine.cmp(&b.engine)));
    out
}

/// Runs one engine on one trace from a calibrated placement.
pub fn run_single(
    trace: &RoutingTrace,
    trace_path: &Path,
    initial: &ExpertPlacement,
    ecr: f64,
    policy: PolicyConfig,
    cost: &CostModel,
    threshold: SwapThreshold,
) -> Result<RunReport> {
    let (placement, swaps, prefill) = if policy.engine == Engine::Daop {
        let (after, swaps) = allocate_for_sequence(initial, &prefill_counts(trace), threshold)?;
        let prefill = simulate_prefill(trace, initial, &swaps, cost)?;
        (after, swaps.len(), prefill.prefill)
    } else {
        (initial.clone(), 0, None)
    };
    let decode = simulate_decode(trace, &placement, &policy, cost)?;
    let fidelity = routing_fidelity(trace, &decode.executed)?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        sequence_id: trace.sequence_id().to_string(),
        trace_path: trace_path.to_path_buf(),
        engine: policy.engine,
        ecr,
        slot_budget: initial.slot_budget(),
        policy,
        cost_model: *cost,
        initial_placement: initial.snapshot(),
        swaps,
        prefill,
        decode: decode.summary(),
        set_fidelity: fidelity.set_fidelity,
        score_mass: fidelity.score_mass,
        similarity: phase_similarity(trace).ok().map(|s| s.value),
        prediction_accuracy: prediction_accuracy(trace)
            .ok()
            .and_then(|a| mean_accuracy(&a)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub summary_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub aggregate: Vec<AggregateRow>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ecr_tag(ecr: f64) -> String {
    format!("{:.4}", ecr).replace('.', "p")
}

/// Runs every (trace, ecr, engine) combination and writes `spec.json`,
/// `runs/*.json`, `summary.csv` and `aggregate.csv` under the output
/// directory.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let out = &spec.output_dir;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    write_json(&out.join("spec.json"), spec)?;

    let traces = materialize(spec)?;
    let shape = traces[0].1.shape();
    if let Some((p, t)) = traces.iter().find(|(_, t)| t.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "{} has shape {}, first trace has {shape}",
            p.display(),
            t.shape()
        )));
    }
    let n_calib = calibration_count(traces.len(), spec.calibration_fraction);
    let calib_traces: Vec<&RoutingTrace> = traces[..n_calib].iter().map(|(_, t)| t).collect();
    let calib = calibration_matrix(&calib_traces)?;
    // With a single trace it both calibrates and evaluates.
    let eval = if n_calib < traces.len() {
        &traces[n_calib..]
    } else {
        &traces[..]
    };

    let mut rows = Vec::new();
    for &ecr in &spec.ecr_list {
        let initial = init_for_shape(shape, &calib, ecr)
            .map_err(|e| e.context(format!("ecr {ecr}")))?;
        for &engine in &spec.engines {
            let policy = spec.policy(engine, shape);
            for (path, trace) in eval {
                let report = run_single(
                    trace,
                    path,
                    &initial,
                    ecr,
                    policy,
                    &spec.cost_model,
                    spec.swap_threshold,
                )
                .map_err(|e| {
                    e.context(format!("{} / ecr {ecr} / {engine}", trace.sequence_id()))
                })?;
                let name = format!(
                    "{}_{}_{}.json",
                    ecr_tag(ecr),
                    engine,
                    trace.sequence_id()
                );
                write_json(&runs_dir.join(&name), &report)?;
                rows.push(SummaryRow::from_report(&report, format!("runs/{name}")));
            }
        }
    }
    let aggregate = aggregate(&rows);
    let summary_csv = out.join("summary.csv");
    let aggregate_csv = out.join("aggregate.csv");
    write_csv(&summary_csv, &rows)?;
    write_csv(&aggregate_csv, &aggregate)?;
    Ok(ExperimentOutput {
        summary_csv,
        aggregate_csv,
        rows,
        aggregate,
    })
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(Error::ReportMismatch(format!(
            "{} uses schema version {}, expected {SCHEMA_VERSION}",
            path.display(),
            bad.schema_version
        )));
    }
    Ok(rows)
}

/// One row of a comparison table; ratios are engine A over engine B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub ecr: f64,
    pub engine_a: Engine,
    pub engine_b: Engine,
    pub sequences: usize,
    pub tokens_per_second_a: f64,
    pub tokens_per_second_b: f64,
    pub speedup: f64,
    pub migrations_a: usize,
    pub migrations_b: usize,
    pub set_fidelity_a: f64,
    pub set_fidelity_b: f64,
}

/// Compares engine `a` rows of `rows_a` with engine `b` rows of `rows_b`,
/// per ECR. Both sides must cover the same sequences at every ECR.
pub fn compare(
    rows_a: &[SummaryRow],
    engine_a: Engine,
    rows_b: &[SummaryRow],
    engine_b: Engine,
) -> Result<Vec<ComparisonRow>> {
    let (a, b) = (group_rows(rows_a, engine_a), group_rows(rows_b, engine_b));
    if a.is_empty() || b.is_empty() {
        return Err(Error::ReportMismatch(format!(
            "no rows for {}",
            if a.is_empty() { engine_a } else { engine_b }
        )));
    }
    let ecrs_a: BTreeSet<u64> = a.keys().copied().collect();
    let ecrs_b: BTreeSet<u64> = b.keys().copied().collect();
    if ecrs_a != ecrs_b {
        return Err(Error::ReportMismatch(format!(
            "{engine_a} and {engine_b} cover different ECR sets"
        )));
    }
    let mut out = Vec::new();
    for (bits, ra) in &a {
        let rb = &b[bits];
        let ecr = f64::from_bits(*bits);
        let ids_a: BTreeSet<&str> = ra.keys().copied().collect();
        let ids_b: BTreeSet<&str> = rb.keys().copied().collect();
        if ids_a != ids_b {
            let missing: Vec<&&str> = ids_a.symmetric_difference(&ids_b).collect();
            return Err(Error::ReportMismatch(format!(
                "at ecr {ecr} the trace sets differ: {missing:?}"
            )));
        }
        for id in &ids_a {
            if ra[id].num_decode_tokens != rb[id].num_decode_tokens {
                return Err(Error::ReportMismatch(format!(
                    "sequence {id} has different decode lengths"
                )));
            }
        }
        let va: Vec<&SummaryRow> = ra.values().copied().collect();
        let vb: Vec<&SummaryRow> = rb.values().copied().collect();
        let (tps_a, tps_b) = (aggregate_tokens_per_second(&va), aggregate_tokens_per_second(&vb));
        let fidelity = |v: &[&SummaryRow]| {
            let tokens: usize = v.iter().map(|r| r.num_decode_tokens).sum();
            v.iter()
                .map(|r| r.set_fidelity * r.num_decode_tokens as f64)
                .sum::<f64>()
                / tokens.max(1) as f64
        };
        out.push(ComparisonRow {
            ecr,
            engine_a,
            engine_b,
            sequences: va.len(),
            tokens_per_second_a: tps_a,
            tokens_per_second_b: tps_b,
            speedup: tps_a / tps_b,
            migrations_a: va.iter().map(|r| r.migrations).sum(),
            migrations_b: vb.iter().map(|r| r.migrations).sum(),
            set_fidelity_a: fidelity(&va),
            set_fidelity_b: fidelity(&vb),
        });
    }
    out.sort_by(|x, y| x.ecr.total_cmp(&y.ecr));
    Ok(out)
}

type Groups<'a> = BTreeMap<u64, BTreeMap<&'a str, &'a SummaryRow>>;

/// Rows of one engine keyed by ECR bits, then sequence id.
fn group_rows(rows: &[SummaryRow], engine: Engine) -> Groups<'_> {
    let mut g: Groups<'_> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.engine == engine) {
        g.entry(r.ecr.to_bits())
            .or_default()
            .insert(r.sequence_id.as_str(), r);
    }
    g
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
