//! Per-token execution plans for the four engines.
//!
//! * `ondemand`: true top-k always runs on the fast device; absent experts are
//!   migrated first and evict the least recently used expert of their layer.
//! * `prefetch`: on-demand plus migrations of the predicted next-layer experts
//!   issued one layer early.
//! * `fiddler`: true top-k runs wherever each expert lives; nothing moves.
//! * `daop`: from `prediction_start_layer` on, the predicted top-k runs where
//!   it lives; slow-resident picks start one layer early on stale inputs and a
//!   layer with two slow picks trades the weaker one for the best fast one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{Device, ExpertPlacement};
use crate::trace::{top_k, ModelShape, TokenRouting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    OnDemand,
    Prefetch,
    Fiddler,
    Daop,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::OnDemand, Engine::Prefetch, Engine::Fiddler, Engine::Daop];

    pub fn name(self) -> &'static str {
        match self {
            Engine::OnDemand => "ondemand",
            Engine::Prefetch => "prefetch",
            Engine::Fiddler => "fiddler",
            Engine::Daop => "daop",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown engine {s:?}; expected ondemand, prefetch, fiddler or daop"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    Current,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub engine: Engine,
    /// First layer whose experts are chosen by the previous layer's
    /// prediction (0-based).
    pub prediction_start_layer: usize,
    pub graceful_degradation: bool,
}

impl PolicyConfig {
    pub const DEFAULT_PREDICTION_START: usize = 4;

    pub fn new(engine: Engine) -> Self {
        PolicyConfig {
            engine,
            prediction_start_layer: Self::DEFAULT_PREDICTION_START,
            graceful_degradation: true,
        }
    }

    /// Clamps the default start layer for shallow models; an explicit value
    /// outside `[1, L]` is still rejected by [`PolicyConfig::validate`].
    pub fn for_shape(engine: Engine, shape: ModelShape) -> Self {
        PolicyConfig {
            prediction_start_layer: Self::DEFAULT_PREDICTION_START.min(shape.num_layers()),
            ..Self::new(engine)
        }
    }

    pub fn validate(&self, shape: ModelShape) -> Result<()> {
        let start = self.prediction_start_layer;
        if start < 1 || start > shape.num_layers() {
            return Err(Error::InvalidConfig(format!(
                "prediction_start_layer {start} outside [1, {}]",
                shape.num_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedExpert {
    pub expert: usize,
    pub device: Device,
    pub input: InputSource,
    /// Started on the slow device right after the previous layer's
    /// prediction gate.
    pub precalc: bool,
}

impl ExecutedExpert {
    fn current(expert: usize, device: Device) -> Self {
        ExecutedExpert {
            expert,
            device,
            input: InputSource::Current,
            precalc: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub dropped_expert: usize,
    pub dropped_score: f64,
    pub substitute_expert: usize,
    pub substitute_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub executed: Vec<ExecutedExpert>,
    /// Demand migrations (slow to fast) that must finish before this layer's
    /// experts run.
    pub migrations: Vec<usize>,
    /// Migrations issued during the previous layer on behalf of this one.
    pub prefetched: Vec<usize>,
    /// The layer evaluates its own gate.
    pub own_gate: bool,
    /// The layer evaluates the next layer's gate on its hidden states.
    pub predict_next: bool,
    pub degraded: Option<Degradation>,
}

impl LayerPlan {
    fn new(layer: usize) -> Self {
        LayerPlan {
            layer,
            executed: Vec::new(),
            migrations: Vec::new(),
            prefetched: Vec::new(),
            own_gate: true,
            predict_next: false,
            degraded: None,
        }
    }

    pub fn executed_experts(&self) -> Vec<usize> {
        self.executed.iter().map(|x| x.expert).collect()
    }

    pub fn slow_count(&self) -> usize {
        self.executed
            .iter()
            .filter(|x| x.device == Device::Slow)
            .count()
    }

    pub fn wasted_prefetches(&self) -> usize {
        self.prefetched
            .iter()
            .filter(|e| !self.executed.iter().any(|x| x.expert == **e))
            .count()
    }
}

/// Fast-device expert cache with per-layer LRU eviction.
///
/// Eviction is free; a migrated expert that finds no evictable slot (every
/// resident is needed by the same step) runs once and is not retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LruCache {
    capacity: Vec<usize>,
    /// `(expert, last use)` per layer.
    resident: Vec<Vec<(usize, u64)>>,
    num_experts: usize,
    clock: u64,
}

impl LruCache {
    pub fn from_placement(placement: &ExpertPlacement) -> Self {
        let resident: Vec<Vec<(usize, u64)>> = placement
            .layers()
            .iter()
            .map(|set| set.iter().map(|&e| (e, 0)).collect())
            .collect();
        LruCache {
            capacity: resident.iter().map(Vec::len).collect(),
            resident,
            num_experts: placement.shape().num_experts(),
            clock: 0,
        }
    }

    pub fn capacity(&self, layer: usize) -> usize {
        self.capacity[layer]
    }

    pub fn contains(&self, layer: usize, expert: usize) -> bool {
        self.resident[layer].iter().any(|&(e, _)| e == expert)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn touch(&mut self, layer: usize, expert: usize) {
        let now = self.tick();
        if let Some(slot) = self.resident[layer].iter_mut().find(|(e, _)| *e == expert) {
            slot.1 = now;
        }
    }

    /// Inserts `expert`, evicting the least recently used resident outside
    /// `protected` when full. Returns whether the expert is retained.
    fn insert(&mut self, layer: usize, expert: usize, protected: &[usize]) -> bool {
        let now = self.tick();
        let slots = &mut self.resident[layer];
        if slots.len() < self.capacity[layer] {
            slots.push((expert, now));
            return true;
        }
        let victim = slots
            .iter()
            .enumerate()
            .filter(|(_, (e, _))| !protected.contains(e))
            .min_by_key(|(_, &(e, stamp))| (stamp, e))
            .map(|(i, _)| i);
        match victim {
            Some(i) => {
                slots[i] = (expert, now);
                true
            }
            None => false,
        }
    }

    pub fn snapshot(&self) -> Vec<Vec<usize>> {
        self.resident
            .iter()
            .map(|slots| {
                let mut v: Vec<usize> = slots.iter().map(|&(e, _)| e).collect();
                v.sort_unstable();
                v
            })
            .collect()
    }
}

fn check_token(shape: ModelShape, token: &[TokenRouting]) -> Result<()> {
    if token.len() != shape.num_layers() {
        return Err(Error::PlanMismatch(format!(
            "token has {} layers, placement has {}",
            token.len(),
            shape.num_layers()
        )));
    }
    if let Some(l) = token
        .iter()
        .position(|r| r.true_scores.len() != shape.num_experts())
    {
        return Err(Error::PlanMismatch(format!(
            "layer {l} has {} scores, placement has {} experts",
            token[l].true_scores.len(),
            shape.num_experts()
        )));
    }
    Ok(())
}

fn prediction_for(token: &[TokenRouting], layer: usize) -> Result<&[f64]> {
    token[layer - 1]
        .predicted_scores
        .as_deref()
        .ok_or(Error::MissingPrediction { token: 0, layer })
}

fn demand_step(cache: &mut LruCache, layer: usize, truth: &[usize], plan: &mut LayerPlan) {
    for &e in truth {
        if cache.contains(layer, e) {
            cache.touch(layer, e);
        }
    }
    for &e in truth {
        if !cache.contains(layer, e) {
            plan.migrations.push(e);
            cache.insert(layer, e, truth);
        }
    }
    plan.executed = truth
        .iter()
        .map(|&e| ExecutedExpert::current(e, Device::Fast))
        .collect();
}

pub fn plan_token_ondemand(
    token: &[TokenRouting],
    cache: &mut LruCache,
    k: usize,
) -> Result<Vec<LayerPlan>> {
    let shape = ModelShape::new(cache.resident.len(), cache.num_experts, k)?;
    check_token(shape, token)?;
    Ok(token
        .iter()
        .enumerate()
        .map(|(l, routing)| {
            let mut plan = LayerPlan::new(l);
            demand_step(cache, l, &routing.true_top_k(k), &mut plan);
            plan
        })
        .collect())
}

pub fn plan_token_prefetch(
    token: &[TokenRouting],
    cache: &mut LruCache,
    k: usize,
    config: &PolicyConfig,
) -> Result<Vec<LayerPlan>> {
    let shape = ModelShape::new(cache.resident.len(), cache.num_experts, k)?;
    check_token(shape, token)?;
    config.validate(shape)?;
    let layers = shape.num_layers();
    let mut plans: Vec<LayerPlan> = (0..layers).map(LayerPlan::new).collect();
    for l in 0..layers {
        let truth = token[l].true_top_k(k);
        demand_step(cache, l, &truth, &mut plans[l]);
        let next = l + 1;
        if next < layers
            && next >= config.prediction_start_layer
            && cache.capacity(next) < shape.num_experts()
        {
            let predicted = top_k(prediction_for(token, next)?, k);
            plans[l].predict_next = true;
            for &e in &predicted {
                if !cache.contains(next, e) && cache.insert(next, e, &predicted) {
                    plans[next].prefetched.push(e);
                }
            }
        }
    }
    Ok(plans)
}

fn check_placement(placement: &ExpertPlacement, token: &[TokenRouting], k: usize) -> Result<ModelShape> {
    let p = placement.shape();
    let shape = ModelShape::new(p.num_layers(), p.num_experts(), k)?;
    check_token(shape, token)?;
    Ok(shape)
}

pub fn plan_token_fiddler(
    token: &[TokenRouting],
    placement: &ExpertPlacement,
    k: usize,
) -> Result<Vec<LayerPlan>> {
    check_placement(placement, token, k)?;
    Ok(token
        .iter()
        .enumerate()
        .map(|(l, routing)| fiddler_layer(placement, l, routing, k))
        .collect())
}

fn fiddler_layer(
    placement: &ExpertPlacement,
    layer: usize,
    routing: &TokenRouting,
    k: usize,
) -> LayerPlan {
    let mut plan = LayerPlan::new(layer);
    plan.executed = routing
        .true_top_k(k)
        .into_iter()
        .map(|e| {
            let device = if placement.is_fast(layer, e) {
                Device::Fast
            } else {
                Device::Slow
            };
            ExecutedExpert::current(e, device)
        })
        .collect();
    plan
}

pub fn plan_token_daop(
    token: &[TokenRouting],
    placement: &ExpertPlacement,
    k: usize,
    config: &PolicyConfig,
) -> Result<Vec<LayerPlan>> {
    let shape = check_placement(placement, token, k)?;
    config.validate(shape)?;
    let layers = shape.num_layers();
    let start = config.prediction_start_layer;
    let mut plans = Vec::with_capacity(layers);
    for (l, routing) in token.iter().enumerate() {
        if l < start {
            let mut plan = fiddler_layer(placement, l, routing, k);
            plan.predict_next = l + 1 >= start && l + 1 < layers;
            plans.push(plan);
            continue;
        }
        let scores = prediction_for(token, l)?;
        let (selection, degraded) =
            select_with_degradation(scores, k, |e| placement.is_fast(l, e), config.graceful_degradation);
        let mut plan = LayerPlan::new(l);
        plan.own_gate = false;
        plan.predict_next = l + 1 < layers;
        plan.degraded = degraded;
        plan.executed = selection
            .into_iter()
            .map(|e| {
                if placement.is_fast(l, e) {
                    ExecutedExpert::current(e, Device::Fast)
                } else {
                    ExecutedExpert {
                        expert: e,
                        device: Device::Slow,
                        input: InputSource::Stale,
                        precalc: true,
                    }
                }
            })
            .collect();
        plans.push(plan);
    }
    Ok(plans)
}

/// Predicted top-k, with the weakest slow-resident pick replaced by the best
/// fast-resident expert outside the selection when two or more picks are
/// slow-resident.
pub fn select_with_degradation(
    scores: &[f64],
    k: usize,
    is_fast: impl Fn(usize) -> bool,
    enabled: bool,
) -> (Vec<usize>, Option<Degradation>) {
    let mut selection = top_k(scores, k);
    let slow: Vec<usize> = selection.iter().copied().filter(|&e| !is_fast(e)).collect();
    if !enabled || slow.len() < 2 {
        return (selection, None);
    }
    // top_k order is score-descending with lower index first on ties.
    let dropped = *slow.last().expect("at least two slow picks");
    let substitute = (0..scores.len())
        .filter(|&e| is_fast(e) && !selection.contains(&e))
        .min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let Some(substitute) = substitute else {
        return (selection, None);
    };
    let pos = selection
        .iter()
        .position(|&e| e == dropped)
        .expect("dropped expert is selected");
    selection[pos] = substitute;
    (
        selection,
        Some(Degradation {
            dropped_expert: dropped,
            dropped_score: scores[dropped],
            substitute_expert: substitute,
            substitute_score: scores[substitute],
        }),
    )
}

/// Stateful per-sequence planner; on-demand and prefetch caches evolve
/// across tokens.
#[derive(Debug, Clone)]
pub struct Planner {
    state: PlannerState,
    config: PolicyConfig,
    k: usize,
}

#[derive(Debug, Clone)]
enum PlannerState {
    Cache(LruCache),
    Static(ExpertPlacement),
}

impl Planner {
    pub fn new(placement: &ExpertPlacement, config: PolicyConfig, k: usize) -> Result<Self> {
        let p = placement.shape();
        config.validate(ModelShape::new(p.num_layers(), p.num_experts(), k)?)?;
        let state = match config.engine {
            Engine::OnDemand | Engine::Prefetch => {
                PlannerState::Cache(LruCache::from_placement(placement))
            }
            Engine::Fiddler | Engine::Daop => PlannerState::Static(placement.clone()),
        };
        Ok(Planner { state, config, k })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn plan(&mut self, token_index: usize, token: &[TokenRouting]) -> Result<Vec<LayerPlan>> {
        let result = match (&mut self.state, self.config.engine) {
            (PlannerState::Cache(cache), Engine::OnDemand) => {
                plan_token_ondemand(token, cache, self.k)
            }
            (PlannerState::Cache(cache), Engine::Prefetch) => {
                plan_token_prefetch(token, cache, self.k, &self.config)
            }
            (PlannerState::Static(p), Engine::Fiddler) => plan_token_fiddler(token, p, self.k),
            (PlannerState::Static(p), Engine::Daop) => {
                plan_token_daop(token, p, self.k, &self.config)
            }
            _ => unreachable!("planner state matches engine"),
        };
        result.map_err(|e| match e {
            Error::MissingPrediction { layer, .. } => Error::MissingPrediction {
                token: token_index,
                layer,
            },
            other => other,
        })
    }
}
