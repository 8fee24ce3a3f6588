//! Routing traces: per-token, per-layer gate probabilities for one sequence.
//!
//! A trace holds the true gate distribution of every (token, layer) pair and,
//! for decode tokens, the one-layer-ahead prediction: the record of layer `l`
//! carries the gate of layer `l + 1` evaluated on layer `l`'s hidden states.
//! The last layer never carries a prediction.

mod generator;
mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generator::{generate_trace, ramp_profile, GeneratorConfig, TraceGenerator};
pub use io::{load_trace, read_trace, save_trace, write_trace, FORMAT_VERSION};

/// Tolerance on the score sum accepted when ingesting traces.
pub const LOAD_SUM_TOLERANCE: f64 = 1e-4;

/// Tolerance on the score sum guaranteed by the generator.
pub const GENERATED_SUM_TOLERANCE: f64 = 1e-6;

/// Layers, experts per layer and experts activated per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawShape", into = "RawShape")]
pub struct ModelShape {
    num_layers: usize,
    num_experts: usize,
    top_k: usize,
}

#[derive(Serialize, Deserialize)]
struct RawShape {
    #[serde(rename = "L")]
    num_layers: usize,
    #[serde(rename = "E")]
    num_experts: usize,
    #[serde(rename = "k")]
    top_k: usize,
}

impl TryFrom<RawShape> for ModelShape {
    type Error = Error;

    fn try_from(raw: RawShape) -> Result<Self> {
        ModelShape::new(raw.num_layers, raw.num_experts, raw.top_k)
    }
}

impl From<ModelShape> for RawShape {
    fn from(shape: ModelShape) -> Self {
        RawShape {
            num_layers: shape.num_layers,
            num_experts: shape.num_experts,
            top_k: shape.top_k,
        }
    }
}

impl ModelShape {
    /// 32 blocks, 8 experts, top-2.
    pub const MIXTRAL: ModelShape = ModelShape {
        num_layers: 32,
        num_experts: 8,
        top_k: 2,
    };

    /// 32 blocks, 16 experts, top-2.
    pub const PHI: ModelShape = ModelShape {
        num_layers: 32,
        num_experts: 16,
        top_k: 2,
    };

    pub fn new(num_layers: usize, num_experts: usize, top_k: usize) -> Result<Self> {
        if num_layers < 1 {
            return Err(Error::InvalidShape("need at least one layer".into()));
        }
        if num_experts < 2 {
            return Err(Error::InvalidShape(format!(
                "need at least two experts per layer, got {num_experts}"
            )));
        }
        if top_k < 1 || top_k > num_experts {
            return Err(Error::InvalidShape(format!(
                "top-k {top_k} outside [1, {num_experts}]"
            )));
        }
        Ok(ModelShape {
            num_layers,
            num_experts,
            top_k,
        })
    }

    /// Parses `mixtral`, `phi` or `LxExK` (e.g. `4x8x2`).
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mixtral" => Ok(Self::MIXTRAL),
            "phi" => Ok(Self::PHI),
            other => {
                let parts: Vec<&str> = other.split('x').collect();
                if parts.len() != 3 {
                    return Err(Error::InvalidShape(format!(
                        "expected mixtral, phi or LxExK, got {s:?}"
                    )));
                }
                let mut nums = [0usize; 3];
                for (slot, part) in nums.iter_mut().zip(&parts) {
                    *slot = part.parse().map_err(|_| {
                        Error::InvalidShape(format!("{part:?} is not a count in {s:?}"))
                    })?;
                }
                ModelShape::new(nums[0], nums[1], nums[2])
            }
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn total_experts(&self) -> usize {
        self.num_layers * self.num_experts
    }
}

impl fmt::Display for ModelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.num_layers, self.num_experts, self.top_k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

/// Gate output of one layer for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRouting {
    pub true_scores: Vec<f64>,
    /// Next layer's gate applied to this layer's hidden states.
    pub predicted_scores: Option<Vec<f64>>,
}

impl TokenRouting {
    pub fn new(true_scores: Vec<f64>, predicted_scores: Option<Vec<f64>>) -> Self {
        TokenRouting {
            true_scores,
            predicted_scores,
        }
    }

    pub fn true_top_k(&self, k: usize) -> Vec<usize> {
        top_k(&self.true_scores, k)
    }
}

/// Per-layer routing of one token.
pub type TokenLayers = Vec<TokenRouting>;

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routing data of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    shape: ModelShape,
    sequence_id: String,
    prefill: Vec<TokenLayers>,
    decode: Vec<TokenLayers>,
}

impl RoutingTrace {
    /// Builds a trace, checking every invariant with the ingestion tolerance.
    pub fn new(
        shape: ModelShape,
        sequence_id: impl Into<String>,
        prefill: Vec<TokenLayers>,
        decode: Vec<TokenLayers>,
    ) -> Result<Self> {
        let trace = RoutingTrace {
            shape,
            sequence_id: sequence_id.into(),
            prefill,
            decode,
        };
        trace.validate(LOAD_SUM_TOLERANCE)?;
        Ok(trace)
    }

    pub(crate) fn new_unchecked(
        shape: ModelShape,
        sequence_id: String,
        prefill: Vec<TokenLayers>,
        decode: Vec<TokenLayers>,
    ) -> Self {
        RoutingTrace {
            shape,
            sequence_id,
            prefill,
            decode,
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    pub fn prefill(&self) -> &[TokenLayers] {
        &self.prefill
    }

    pub fn decode(&self) -> &[TokenLayers] {
        &self.decode
    }

    pub fn tokens(&self, phase: Phase) -> &[TokenLayers] {
        match phase {
            Phase::Prefill => &self.prefill,
            Phase::Decode => &self.decode,
        }
    }

    /// Checks all trace invariants; `tolerance` bounds the deviation of each
    /// score vector's sum from 1.
    pub fn validate(&self, tolerance: f64) -> Result<()> {
        if self.prefill.is_empty() {
            return Err(Error::EmptyPhase(Phase::Prefill));
        }
        for phase in [Phase::Prefill, Phase::Decode] {
            for (t, token) in self.tokens(phase).iter().enumerate() {
                validate_token(self.shape, phase, t, token, tolerance)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_token(
    shape: ModelShape,
    phase: Phase,
    token: usize,
    layers: &[TokenRouting],
    tolerance: f64,
) -> Result<()> {
    if layers.len() != shape.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "{phase} token {token} has {} layers, expected {}",
            layers.len(),
            shape.num_layers()
        )));
    }
    let last = shape.num_layers() - 1;
    for (l, routing) in layers.iter().enumerate() {
        check_scores(shape, phase, token, l, "true_scores", &routing.true_scores, tolerance)?;
        match &routing.predicted_scores {
            Some(_) if l == last => {
                return Err(Error::ShapeMismatch(format!(
                    "{phase} token {token} carries a prediction on the last layer {l}"
                )));
            }
            Some(p) => check_scores(shape, phase, token, l, "predicted_scores", p, tolerance)?,
            None => {}
        }
    }
    Ok(())
}

fn check_scores(
    shape: ModelShape,
    phase: Phase,
    token: usize,
    layer: usize,
    what: &str,
    scores: &[f64],
    tolerance: f64,
) -> Result<()> {
    if scores.len() != shape.num_experts() {
        return Err(Error::ShapeMismatch(format!(
            "{phase} token {token}, layer {layer}: {what} has {} entries, expected {}",
            scores.len(),
            shape.num_experts()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::Normalization(format!(
            "{phase} token {token}, layer {layer}: {what} contains invalid entry {bad}"
        )));
    }
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(Error::Normalization(format!(
            "{phase} token {token}, layer {layer}: {what} sums to {sum}"
        )));
    }
    Ok(())
}
