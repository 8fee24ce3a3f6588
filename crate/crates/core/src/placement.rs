//! Expert cache: which experts of each layer live in fast-device slots.
//!
//! Initialization fills a uniform per-layer capacity from calibration
//! activation probabilities and hands the leftover slots (fewer than the
//! layer count) to the most active uncached experts, one per layer at most.
//! Per-sequence allocation then swaps hot slow-resident experts with cold
//! fast-resident ones based on the sequence's prefill routing counts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{routing_counts, ActivationMatrix};
use crate::trace::{ModelShape, RoutingTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Fast,
    Slow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPlacement {
    shape: ModelShape,
    /// Sorted fast-resident experts per layer.
    on_fast: Vec<BTreeSet<usize>>,
    slot_budget: usize,
}

/// Slot budget for an expert cache ratio: `floor(ecr * L * E)`.
///
/// A relative guard of 1e-9 keeps products such as `0.57 * 100` from rounding
/// down a whole slot.
pub fn slot_budget(shape: ModelShape, ecr: f64) -> Result<usize> {
    if !(ecr > 0.0 && ecr <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "expert cache ratio {ecr} outside (0, 1]"
        )));
    }
    let total = shape.total_experts() as f64;
    Ok(((ecr * total) * (1.0 + 1e-9)).floor().min(total) as usize)
}

impl ExpertPlacement {
    /// Builds a placement from explicit per-layer sets; the budget is the
    /// number of cached experts.
    pub fn from_sets(shape: ModelShape, sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.len() != shape.num_layers() {
            return Err(Error::DimensionMismatch(format!(
                "{} layer sets for {} layers",
                sets.len(),
                shape.num_layers()
            )));
        }
        let mut on_fast = Vec::with_capacity(sets.len());
        for (l, set) in sets.into_iter().enumerate() {
            let unique: BTreeSet<usize> = set.iter().copied().collect();
            if unique.len() != set.len() {
                return Err(Error::InvalidConfig(format!("duplicate expert in layer {l}")));
            }
            if let Some(e) = unique.iter().find(|&&e| e >= shape.num_experts()) {
                return Err(Error::IndexOutOfRange(format!("expert {e} in layer {l}")));
            }
            on_fast.push(unique);
        }
        let slot_budget = on_fast.iter().map(BTreeSet::len).sum();
        Ok(ExpertPlacement {
            shape,
            on_fast,
            slot_budget,
        })
    }

    /// Every expert fast-resident.
    pub fn all_fast(shape: ModelShape) -> Self {
        let all: Vec<Vec<usize>> = (0..shape.num_layers())
            .map(|_| (0..shape.num_experts()).collect())
            .collect();
        Self::from_sets(shape, all).expect("full placement is valid")
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn slot_budget(&self) -> usize {
        self.slot_budget
    }

    pub fn layer(&self, layer: usize) -> &BTreeSet<usize> {
        &self.on_fast[layer]
    }

    pub fn layers(&self) -> &[BTreeSet<usize>] {
        &self.on_fast
    }

    pub fn cached_total(&self) -> usize {
        self.on_fast.iter().map(BTreeSet::len).sum()
    }

    pub fn is_fast(&self, layer: usize, expert: usize) -> bool {
        self.on_fast[layer].contains(&expert)
    }

    pub fn residence(&self, layer: usize, expert: usize) -> Result<Device> {
        if layer >= self.shape.num_layers() || expert >= self.shape.num_experts() {
            return Err(Error::IndexOutOfRange(format!(
                "layer {layer}, expert {expert} for shape {}",
                self.shape
            )));
        }
        Ok(if self.is_fast(layer, expert) {
            Device::Fast
        } else {
            Device::Slow
        })
    }

    /// Per-layer sorted expert lists, the JSON snapshot form.
    pub fn snapshot(&self) -> Vec<Vec<usize>> {
        self.on_fast.iter().map(|s| s.iter().copied().collect()).collect()
    }
}

/// Fills the cache from a decode-phase calibration matrix.
pub fn init_from_calibration(calib: &ActivationMatrix, ecr: f64) -> Result<ExpertPlacement> {
    let l_count = calib.num_layers();
    let e_count = calib.num_experts();
    if l_count == 0 || calib.values.iter().any(|row| row.len() != e_count) {
        return Err(Error::DimensionMismatch("calibration matrix is ragged or empty".into()));
    }
    // The shape's k is irrelevant to placement; any valid k works.
    let shape = ModelShape::new(l_count, e_count, 1)?;
    init_for_shape(shape, calib, ecr)
}

/// Like [`init_from_calibration`] but keeps the caller's model shape.
pub fn init_for_shape(
    shape: ModelShape,
    calib: &ActivationMatrix,
    ecr: f64,
) -> Result<ExpertPlacement> {
    let (l_count, e_count) = (shape.num_layers(), shape.num_experts());
    if calib.num_layers() != l_count || calib.values.iter().any(|row| row.len() != e_count) {
        return Err(Error::DimensionMismatch(format!(
            "calibration matrix is {}x{}, shape is {shape}",
            calib.num_layers(),
            calib.num_experts()
        )));
    }
    let budget = slot_budget(shape, ecr)?;
    if budget < l_count {
        return Err(Error::BudgetTooSmall {
            budget,
            layers: l_count,
        });
    }
    let per_layer = budget / l_count;
    let remainder = budget - per_layer * l_count;

    let ranked: Vec<Vec<usize>> = calib
        .values
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..e_count).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut on_fast: Vec<BTreeSet<usize>> = ranked
        .iter()
        .map(|idx| idx[..per_layer].iter().copied().collect())
        .collect();

    // Best uncached expert of each layer competes for the remainder.
    let mut extras: Vec<(f64, usize, usize)> = ranked
        .iter()
        .enumerate()
        .filter(|_| per_layer < e_count)
        .map(|(l, idx)| (calib.values[l][idx[per_layer]], l, idx[per_layer]))
        .collect();
    extras.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, l, e) in extras.iter().take(remainder) {
        on_fast[l].insert(e);
    }
    Ok(ExpertPlacement {
        shape,
        on_fast,
        slot_budget: budget,
    })
}

/// Minimum hot/cold activity ratio for a swap, stored as parts per million so
/// the comparison is exact integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SwapThreshold(u64);

impl SwapThreshold {
    const SCALE: u64 = 1_000_000;

    pub fn new(ratio: f64) -> Result<Self> {
        if !ratio.is_finite() || ratio < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "swap threshold {ratio} must be finite and non-negative"
            )));
        }
        Ok(SwapThreshold((ratio * Self::SCALE as f64).round() as u64))
    }

    pub fn ratio(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    /// `hot >= ratio * cold`.
    pub fn admits(self, hot: u64, cold: u64) -> bool {
        hot as u128 * Self::SCALE as u128 >= self.0 as u128 * cold as u128
    }
}

impl Default for SwapThreshold {
    fn default() -> Self {
        SwapThreshold(1_050_000)
    }
}

impl TryFrom<f64> for SwapThreshold {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        SwapThreshold::new(v)
    }
}

impl From<SwapThreshold> for f64 {
    fn from(t: SwapThreshold) -> f64 {
        t.ratio()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub layer: usize,
    pub swapped_in: usize,
    pub swapped_out: usize,
    pub hot_tokens: u64,
    pub cold_tokens: u64,
}

/// Prefill routing counts of a trace, the activity input of
/// [`allocate_for_sequence`].
pub fn prefill_counts(trace: &RoutingTrace) -> Vec<Vec<u64>> {
    routing_counts(trace.shape(), trace.prefill())
}

/// Sequence-specific reallocation: per layer, pairs the most active
/// slow-resident experts with the least active fast-resident ones and swaps
/// each pair whose hot count reaches `threshold` times the cold count.
pub fn allocate_for_sequence(
    placement: &ExpertPlacement,
    counts: &[Vec<u64>],
    threshold: SwapThreshold,
) -> Result<(ExpertPlacement, Vec<SwapEvent>)> {
    let shape = placement.shape;
    if counts.len() != shape.num_layers()
        || counts.iter().any(|row| row.len() != shape.num_experts())
    {
        return Err(Error::ShapeMismatch(format!(
            "count matrix is not {}x{}",
            shape.num_layers(),
            shape.num_experts()
        )));
    }
    let swap_num = shape.num_experts() / 2;
    let mut next = placement.clone();
    let mut events = Vec::new();
    for (l, row) in counts.iter().enumerate() {
        let cached = &placement.on_fast[l];
        let mut hot: Vec<usize> = (0..shape.num_experts())
            .filter(|e| !cached.contains(e))
            .collect();
        hot.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
        hot.truncate(swap_num);
        let mut cold: Vec<usize> = cached.iter().copied().collect();
        cold.sort_by(|&a, &b| row[a].cmp(&row[b]).then(a.cmp(&b)));
        cold.truncate(swap_num);
        for (&h, &c) in hot.iter().zip(&cold) {
            if threshold.admits(row[h], row[c]) {
                next.on_fast[l].remove(&c);
                next.on_fast[l].insert(h);
                events.push(SwapEvent {
                    layer: l,
                    swapped_in: h,
                    swapped_out: c,
                    hot_tokens: row[h],
                    cold_tokens: row[c],
                });
            }
        }
    }
    Ok((next, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Phase;

    fn calib(values: Vec<Vec<f64>>) -> ActivationMatrix {
        ActivationMatrix {
            values,
            phase: Phase::Decode,
            token_count: 1,
        }
    }

    #[test]
    fn full_ratio_caches_everything() {
        let m = calib(vec![vec![0.5, 0.5, 0.5, 0.5]; 3]);
        let p = init_from_calibration(&m, 1.0).unwrap();
        assert_eq!(p.cached_total(), 12);
        for l in 0..3 {
            assert_eq!(p.snapshot()[l], vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn remainder_goes_to_best_uncached() {
        // budget 5, c = 2, r = 1
        let m = calib(vec![vec![0.9, 0.6, 0.3, 0.2], vec![0.1, 0.8, 0.7, 0.4]]);
        let p = init_from_calibration(&m, 0.625).unwrap();
        assert_eq!(p.slot_budget(), 5);
        assert_eq!(p.snapshot(), vec![vec![0, 1], vec![1, 2, 3]]);
    }

    #[test]
    fn mixtral_budget_at_46_9_percent() {
        let shape = ModelShape::MIXTRAL;
        assert_eq!(slot_budget(shape, 0.469).unwrap(), 120);
        let m = calib(vec![vec![0.25; 8]; 32]);
        let p = init_for_shape(shape, &m, 0.469).unwrap();
        assert_eq!(p.cached_total(), 120);
        let sizes: Vec<usize> = p.layers().iter().map(BTreeSet::len).collect();
        assert_eq!(sizes.iter().filter(|&&s| s == 4).count(), 24);
        assert_eq!(sizes.iter().filter(|&&s| s == 3).count(), 8);
    }

    #[test]
    fn budget_edge_cases() {
        let shape = ModelShape::new(4, 4, 2).unwrap();
        assert_eq!(slot_budget(shape, 0.25).unwrap(), 4);
        assert!(slot_budget(shape, 0.0).is_err());
        assert!(slot_budget(shape, 1.5).is_err());
        let m = calib(vec![vec![0.5; 4]; 4]);
        assert!(matches!(
            init_from_calibration(&m, 0.2).unwrap_err(),
            Error::BudgetTooSmall { budget: 3, layers: 4 }
        ));
        let shape = ModelShape::new(1, 100, 2).unwrap();
        assert_eq!(slot_budget(shape, 0.57).unwrap(), 57);
    }

    #[test]
    fn swap_threshold_boundary_is_inclusive() {
        let t = SwapThreshold::default();
        assert!(t.admits(21, 20));
        assert!(!t.admits(20, 20));
        assert!(t.admits(0, 0));
        assert_eq!(t.ratio(), 1.05);
    }

    #[test]
    fn allocation_example() {
        let shape = ModelShape::new(1, 4, 2).unwrap();
        let p = ExpertPlacement::from_sets(shape, vec![vec![0, 1]]).unwrap();
        let (next, events) =
            allocate_for_sequence(&p, &[vec![5, 9, 30, 0]], SwapThreshold::default()).unwrap();
        assert_eq!(next.snapshot(), vec![vec![1, 2]]);
        assert_eq!(
            events,
            vec![SwapEvent {
                layer: 0,
                swapped_in: 2,
                swapped_out: 0,
                hot_tokens: 30,
                cold_tokens: 5
            }]
        );
        assert_eq!(next.residence(0, 2).unwrap(), Device::Fast);
        assert_eq!(next.residence(0, 0).unwrap(), Device::Slow);
        assert!(next.residence(0, 4).is_err());

        let (again, events) =
            allocate_for_sequence(&next, &[vec![5, 9, 30, 0]], SwapThreshold::default()).unwrap();
        assert!(events.is_empty());
        assert_eq!(again, next);
    }

    #[test]
    fn allocation_rejects_bad_counts() {
        let shape = ModelShape::new(2, 4, 2).unwrap();
        let p = ExpertPlacement::from_sets(shape, vec![vec![0], vec![1]]).unwrap();
        let err = allocate_for_sequence(&p, &[vec![1, 2, 3, 4]], SwapThreshold::default())
            .unwrap_err();
        assert_eq!(err.kind(), "shape_mismatch");
    }

    #[test]
    fn snapshot_serializes_sorted_lists() {
        let shape = ModelShape::new(2, 4, 2).unwrap();
        let p = ExpertPlacement::from_sets(shape, vec![vec![3, 1], vec![2]]).unwrap();
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["on_fast"], serde_json::json!([[1, 3], [2]]));
        let back: ExpertPlacement = serde_json::from_value(json).unwrap();
        assert_eq!(back, p);
    }
}
