//! Discrete-event pricing of execution plans on a fast device, a slow device
//! and the interconnect between them.

mod cost;
mod schedule;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cost::{default_cost_model, CostModel, SimTime, SLOW_NONMOE_MS};
pub use schedule::{Resource, TaskKind};

use schedule::{schedule, DagBuilder, Slot};

use crate::error::{Error, Result};
use crate::metrics::routing_counts;
use crate::placement::{Device, ExpertPlacement, SwapEvent};
use crate::policies::{Engine, InputSource, LayerPlan, Planner, PolicyConfig};
use crate::serde_util::finite_or_null;
use crate::trace::{Phase, RoutingTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub token: usize,
    pub resource: Resource,
    pub lane: usize,
    pub layer: usize,
    pub expert: Option<usize>,
    pub start: SimTime,
    pub end: SimTime,
    pub kind: TaskKind,
}

impl Event {
    pub fn duration(&self) -> SimTime {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub migrations: usize,
    pub prefetches: usize,
    pub wasted_prefetches: usize,
    pub slow_executions: usize,
    pub degradations: usize,
    pub stale_inputs: usize,
}

impl Counts {
    fn add_plans(&mut self, plans: &[LayerPlan]) {
        for p in plans {
            self.migrations += p.migrations.len();
            self.prefetches += p.prefetched.len();
            self.wasted_prefetches += p.wasted_prefetches();
            self.slow_executions += p.slow_count();
            self.degradations += usize::from(p.degraded.is_some());
            self.stale_inputs += p
                .executed
                .iter()
                .filter(|x| x.input == InputSource::Stale)
                .count();
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BusyFractions {
    pub fast: f64,
    pub interconnect: f64,
    pub slow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillSummary {
    pub swaps: usize,
    pub latency_ms: f64,
    /// Latency of the same prefill with no swaps.
    pub compute_only_ms: f64,
    pub migration_ms: f64,
    /// Latency added by the swaps.
    pub exposed_migration_ms: f64,
    /// Migration time overlapped with compute.
    pub hidden_migration_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineResult {
    pub phase: Phase,
    pub engine: Option<Engine>,
    pub token_latencies_ms: Vec<f64>,
    pub events: Vec<Event>,
    pub counts: Counts,
    pub busy: BusyFractions,
    /// Infinite when every latency is zero.
    pub tokens_per_second: f64,
    /// Experts executed per token and layer.
    pub executed: Vec<Vec<Vec<usize>>>,
    pub prefill: Option<PrefillSummary>,
    total: SimTime,
}

/// The JSON-facing part of a [`TimelineResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSummary {
    pub phase: Phase,
    pub engine: Option<Engine>,
    pub num_tokens: usize,
    pub total_latency_ms: f64,
    pub token_latencies_ms: Vec<f64>,
    pub counts: Counts,
    pub busy: BusyFractions,
    #[serde(with = "finite_or_null")]
    pub tokens_per_second: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prefill: Option<PrefillSummary>,
}

#[derive(Serialize)]
struct EventRow<'a> {
    token: usize,
    resource: &'a str,
    lane: usize,
    layer: usize,
    expert: Option<usize>,
    start_ms: String,
    end_ms: String,
    label: &'a str,
}

impl TimelineResult {
    fn assemble(
        phase: Phase,
        engine: Option<Engine>,
        spans: Vec<SimTime>,
        events: Vec<Event>,
        counts: Counts,
        executed: Vec<Vec<Vec<usize>>>,
        slow_lanes: usize,
    ) -> Self {
        let total = spans.iter().fold(SimTime::ZERO, |a, &b| a + b);
        let busy_of = |r: Resource, lanes: usize| {
            let busy: u64 = events
                .iter()
                .filter(|e| e.resource == r)
                .map(|e| e.duration().0)
                .sum();
            if total.0 == 0 {
                0.0
            } else {
                busy as f64 / (total.0 as f64 * lanes as f64)
            }
        };
        let busy = BusyFractions {
            fast: busy_of(Resource::Fast, 1),
            interconnect: busy_of(Resource::Interconnect, 1),
            slow: busy_of(Resource::Slow, slow_lanes),
        };
        let tokens_per_second = if total.0 == 0 {
            f64::INFINITY
        } else {
            1000.0 * spans.len() as f64 / total.as_ms()
        };
        TimelineResult {
            phase,
            engine,
            token_latencies_ms: spans.iter().map(|s| s.as_ms()).collect(),
            events,
            counts,
            busy,
            tokens_per_second,
            executed,
            prefill: None,
            total,
        }
    }

    pub fn total_latency_ms(&self) -> f64 {
        self.total.as_ms()
    }

    pub fn busy_ms(&self, resource: Resource) -> f64 {
        SimTime(
            self.events
                .iter()
                .filter(|e| e.resource == resource)
                .map(|e| e.duration().0)
                .sum(),
        )
        .as_ms()
    }

    pub fn summary(&self) -> TimelineSummary {
        TimelineSummary {
            phase: self.phase,
            engine: self.engine,
            num_tokens: self.token_latencies_ms.len(),
            total_latency_ms: self.total_latency_ms(),
            token_latencies_ms: self.token_latencies_ms.clone(),
            counts: self.counts,
            busy: self.busy,
            tokens_per_second: self.tokens_per_second,
            prefill: self.prefill,
        }
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }

    /// Columns: token, resource, lane, layer, expert, start_ms, end_ms, label.
    /// Times carry exactly six decimals; `expert` is empty for non-expert work.
    pub fn write_events_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.events {
            w.serialize(EventRow {
                token: e.token,
                resource: e.resource.name(),
                lane: e.lane,
                layer: e.layer,
                expert: e.expert,
                start_ms: e.start.to_string(),
                end_ms: e.end.to_string(),
                label: e.kind.label(),
            })?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_events_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_events_csv(std::io::BufWriter::new(file))
    }

    /// Fails if two events overlap on one resource lane.
    pub fn check_exclusive(&self) -> Result<()> {
        let mut sorted: Vec<&Event> = self.events.iter().collect();
        sorted.sort_by_key(|e| (e.resource, e.lane, e.start, e.end));
        for pair in sorted.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.resource == b.resource && a.lane == b.lane && b.start < a.end {
                return Err(Error::PlanMismatch(format!(
                    "{} lane {} overlaps: [{}, {}) and [{}, {})",
                    a.resource.name(),
                    a.lane,
                    a.start,
                    a.end,
                    b.start,
                    b.end
                )));
            }
        }
        Ok(())
    }
}

fn check_placement(trace: &RoutingTrace, placement: &ExpertPlacement) -> Result<()> {
    let (t, p) = (trace.shape(), placement.shape());
    if t.num_layers() != p.num_layers() || t.num_experts() != p.num_experts() {
        return Err(Error::PlanMismatch(format!(
            "trace shape {t} does not match placement shape {p}"
        )));
    }
    Ok(())
}

fn slow_triplet(
    b: &mut DagBuilder,
    cost_xfer: SimTime,
    cost_slow: SimTime,
    kind: TaskKind,
    layer: usize,
    expert: usize,
    after: usize,
) -> usize {
    let out = b.push(TaskKind::XferOut, cost_xfer, layer, Some(expert), &[after]);
    let run = b.push(kind, cost_slow, layer, Some(expert), &[out]);
    b.push(TaskKind::XferBack, cost_xfer, layer, Some(expert), &[run])
}

/// Task graph of one decode token.
fn token_dag(plans: &[LayerPlan], cost: &CostModel) -> Result<DagBuilder> {
    let ms = SimTime::from_ms;
    let (t_nonmoe, t_gate, t_fast) = (ms(cost.t_nonmoe_fast), ms(cost.t_gate), ms(cost.t_expert_fast));
    let (t_slow, t_xfer, t_mig) = (
        ms(cost.t_expert_slow),
        ms(cost.t_activation_xfer),
        ms(cost.t_migrate_expert),
    );
    let layers = plans.len();
    let mut b = DagBuilder::default();
    let mut prev_done: Vec<usize> = Vec::new();
    let mut precalc_done: Vec<usize> = Vec::new();
    let mut prefetch_ids: Vec<(usize, usize)> = Vec::new();
    for (l, plan) in plans.iter().enumerate() {
        if plan.layer != l {
            return Err(Error::PlanMismatch(format!("plan {l} is labelled layer {}", plan.layer)));
        }
        let issued_early = !plan.prefetched.is_empty() || plan.executed.iter().any(|x| x.precalc);
        if issued_early && (l == 0 || !plans[l - 1].predict_next) {
            return Err(Error::PlanMismatch(format!(
                "layer {l} has early work but layer {} predicts nothing",
                l.saturating_sub(1)
            )));
        }
        if plan.predict_next && l + 1 == layers {
            return Err(Error::PlanMismatch("last layer cannot predict a next layer".into()));
        }

        let mut head = b.push(TaskKind::NonMoe, t_nonmoe, l, None, &prev_done);
        if plan.own_gate {
            head = b.push(TaskKind::Gate, t_gate, l, None, &[]);
        }
        let gate = head;
        let migrations: Vec<usize> = plan
            .migrations
            .iter()
            .map(|&e| b.push(TaskKind::Migrate, t_mig, l, Some(e), &[gate]))
            .collect();
        let mut done: Vec<usize> = Vec::new();
        for x in plan.executed.iter().filter(|x| x.device == Device::Slow && !x.precalc) {
            done.push(slow_triplet(&mut b, t_xfer, t_slow, TaskKind::SlowExpert, l, x.expert, gate));
        }

        let mut next_precalc = Vec::new();
        let mut next_prefetch = Vec::new();
        if plan.predict_next {
            let pg = b.push(TaskKind::PredictGate, t_gate, l, None, &[]);
            let next = &plans[l + 1];
            for &e in &next.prefetched {
                next_prefetch.push((e, b.push(TaskKind::Prefetch, t_mig, l + 1, Some(e), &[pg])));
            }
            for x in next.executed.iter().filter(|x| x.precalc) {
                next_precalc.push(slow_triplet(&mut b, t_xfer, t_slow, TaskKind::Precalc, l + 1, x.expert, pg));
            }
        }

        let mut blocking = migrations;
        blocking.extend(
            prefetch_ids
                .iter()
                .filter(|(e, _)| plan.executed.iter().any(|x| x.expert == *e))
                .map(|&(_, id)| id),
        );
        for x in plan.executed.iter().filter(|x| x.device == Device::Fast) {
            b.push(TaskKind::Expert, t_fast, l, Some(x.expert), &blocking);
        }
        done.extend(b.last_fast());
        done.extend(blocking);
        done.append(&mut precalc_done);
        prev_done = done;
        precalc_done = next_precalc;
        prefetch_ids = next_prefetch;
    }
    Ok(b)
}

fn run_dag(
    b: &DagBuilder,
    token: usize,
    slow_lanes: usize,
    origin: SimTime,
    events: &mut Vec<Event>,
) -> SimTime {
    let slots = schedule(&b.tasks, slow_lanes, origin);
    let end = slots.iter().map(|s| s.end).max().unwrap_or(origin);
    let start = slots.iter().map(|s| s.start).min().unwrap_or(origin);
    debug_assert_eq!(start, origin);
    events.extend(b.tasks.iter().zip(&slots).map(|(t, &Slot { start, end, lane })| Event {
        token,
        resource: t.kind.resource(),
        lane,
        layer: t.layer,
        expert: t.expert,
        start,
        end,
        kind: t.kind,
    }));
    end - start
}

/// Prices precomputed per-token plans; tokens run back to back.
pub fn simulate_plans(
    engine: Option<Engine>,
    token_plans: &[Vec<LayerPlan>],
    cost: &CostModel,
) -> Result<TimelineResult> {
    cost.validate()?;
    if token_plans.is_empty() {
        return Err(Error::EmptyPhase(Phase::Decode));
    }
    let mut events = Vec::new();
    let mut spans = Vec::with_capacity(token_plans.len());
    let mut counts = Counts::default();
    let mut origin = SimTime::ZERO;
    for (t, plans) in token_plans.iter().enumerate() {
        let dag = token_dag(plans, cost).map_err(|e| e.context(format!("decode token {t}")))?;
        let span = run_dag(&dag, t, cost.slow_parallelism, origin, &mut events);
        origin = origin + span;
        spans.push(span);
        counts.add_plans(plans);
    }
    let executed = token_plans
        .iter()
        .map(|plans| plans.iter().map(LayerPlan::executed_experts).collect())
        .collect();
    Ok(TimelineResult::assemble(
        Phase::Decode,
        engine,
        spans,
        events,
        counts,
        executed,
        cost.slow_parallelism,
    ))
}

pub fn plan_decode(
    trace: &RoutingTrace,
    placement: &ExpertPlacement,
    policy: &PolicyConfig,
) -> Result<Vec<Vec<LayerPlan>>> {
    check_placement(trace, placement)?;
    let mut planner = Planner::new(placement, *policy, trace.shape().top_k())?;
    trace
        .decode()
        .iter()
        .enumerate()
        .map(|(t, token)| planner.plan(t, token))
        .collect()
}

pub fn simulate_decode(
    trace: &RoutingTrace,
    placement: &ExpertPlacement,
    policy: &PolicyConfig,
    cost: &CostModel,
) -> Result<TimelineResult> {
    cost.validate()?;
    if trace.decode().is_empty() {
        return Err(Error::EmptyPhase(Phase::Decode));
    }
    let plans = plan_decode(trace, placement, policy)?;
    simulate_plans(Some(policy.engine), &plans, cost)
}

fn prefill_dag(
    counts: &[Vec<u64>],
    tokens: u64,
    placement: &ExpertPlacement,
    swaps: &[SwapEvent],
    cost: &CostModel,
) -> DagBuilder {
    let t_mig = SimTime::from_ms(cost.t_migrate_expert);
    let mut b = DagBuilder::default();
    let mut prev_done: Vec<usize> = Vec::new();
    for (l, row) in counts.iter().enumerate() {
        b.push(TaskKind::NonMoe, cost.batched(cost.t_nonmoe_fast, tokens), l, None, &prev_done);
        let gate = b.push(TaskKind::Gate, cost.batched(cost.t_gate, tokens), l, None, &[]);
        let mut done: Vec<usize> = swaps
            .iter()
            .filter(|s| s.layer == l)
            .map(|s| b.push(TaskKind::Migrate, t_mig, l, Some(s.swapped_in), &[gate]))
            .collect();
        for (e, &c) in row.iter().enumerate().filter(|(_, &c)| c > 0) {
            if placement.is_fast(l, e) {
                b.push(TaskKind::Expert, cost.batched(cost.t_expert_fast, c), l, Some(e), &[]);
            } else {
                let xfer = cost.batched(cost.t_activation_xfer, c);
                let slow = cost.batched(cost.t_expert_slow, c);
                done.push(slow_triplet(&mut b, xfer, slow, TaskKind::SlowExpert, l, e, gate));
            }
        }
        done.extend(b.last_fast());
        prev_done = done;
    }
    b
}

/// Prices the whole prompt as one batch per layer. Experts run where
/// `placement_before` puts them; each swap's migration starts after its
/// layer's gate and the layer waits for it.
pub fn simulate_prefill(
    trace: &RoutingTrace,
    placement_before: &ExpertPlacement,
    swap_events: &[SwapEvent],
    cost: &CostModel,
) -> Result<TimelineResult> {
    cost.validate()?;
    check_placement(trace, placement_before)?;
    let shape = trace.shape();
    for s in swap_events {
        let valid = s.layer < shape.num_layers()
            && s.swapped_in < shape.num_experts()
            && s.swapped_out < shape.num_experts()
            && !placement_before.is_fast(s.layer, s.swapped_in)
            && placement_before.is_fast(s.layer, s.swapped_out);
        if !valid {
            return Err(Error::PlanMismatch(format!(
                "swap {} <-> {} at layer {} does not fit the placement",
                s.swapped_in, s.swapped_out, s.layer
            )));
        }
    }
    let counts = routing_counts(shape, trace.prefill());
    let tokens = trace.prefill().len() as u64;

    let baseline = prefill_dag(&counts, tokens, placement_before, &[], cost);
    let compute_only = run_dag(&baseline, 0, cost.slow_parallelism, SimTime::ZERO, &mut Vec::new());
    let dag = prefill_dag(&counts, tokens, placement_before, swap_events, cost);
    let mut events = Vec::new();
    let span = run_dag(&dag, 0, cost.slow_parallelism, SimTime::ZERO, &mut events);

    let migration = SimTime::from_ms(cost.t_migrate_expert).0 * swap_events.len() as u64;
    let exposed_ms = span.as_ms() - compute_only.as_ms();
    let result_counts = Counts {
        migrations: swap_events.len(),
        slow_executions: counts
            .iter()
            .enumerate()
            .map(|(l, row)| {
                row.iter()
                    .enumerate()
                    .filter(|&(e, &c)| c > 0 && !placement_before.is_fast(l, e))
                    .count()
            })
            .sum(),
        ..Counts::default()
    };
    let executed = trace
        .prefill()
        .iter()
        .map(|token| token.iter().map(|r| r.true_top_k(shape.top_k())).collect())
        .collect();
    let mut result = TimelineResult::assemble(
        Phase::Prefill,
        None,
        vec![span],
        events,
        result_counts,
        executed,
        cost.slow_parallelism,
    );
    // Throughput over the prompt, not a single token.
    if span.0 > 0 {
        result.tokens_per_second = 1000.0 * tokens as f64 / span.as_ms();
    }
    result.prefill = Some(PrefillSummary {
        swaps: swap_events.len(),
        latency_ms: span.as_ms(),
        compute_only_ms: compute_only.as_ms(),
        migration_ms: SimTime(migration).as_ms(),
        exposed_migration_ms: exposed_ms,
        hidden_migration_ms: SimTime(migration).as_ms() - exposed_ms,
    });
    Ok(result)
}
