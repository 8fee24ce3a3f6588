//! Measurement quantities over routing traces and executed plans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{top_k, ModelShape, Phase, RoutingTrace, TokenLayers};

/// Per-layer expert activation probabilities for one phase.
///
/// Entry `(l, e)` is the fraction of the phase's tokens whose true top-k at
/// layer `l` contains expert `e`; every row sums to `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub values: Vec<Vec<f64>>,
    pub phase: Phase,
    pub token_count: usize,
}

impl ActivationMatrix {
    pub fn num_layers(&self) -> usize {
        self.values.len()
    }

    pub fn num_experts(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Token-weighted pooling of matrices from several sequences.
    pub fn pooled(matrices: &[ActivationMatrix]) -> Result<ActivationMatrix> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::InvalidConfig("nothing to pool".into()))?;
        let (l, e) = (first.num_layers(), first.num_experts());
        let mut values = vec![vec![0.0; e]; l];
        let mut tokens = 0usize;
        for m in matrices {
            if m.num_layers() != l || m.num_experts() != e {
                return Err(Error::DimensionMismatch(format!(
                    "cannot pool {}x{} with {l}x{e}",
                    m.num_layers(),
                    m.num_experts()
                )));
            }
            for (row, src) in values.iter_mut().zip(&m.values) {
                for (v, s) in row.iter_mut().zip(src) {
                    *v += s * m.token_count as f64;
                }
            }
            tokens += m.token_count;
        }
        for row in &mut values {
            row.iter_mut().for_each(|v| *v /= tokens as f64);
        }
        Ok(ActivationMatrix {
            values,
            phase: first.phase,
            token_count: tokens,
        })
    }
}

/// Count of tokens routed to each expert, per layer, from the true top-k.
pub fn routing_counts(shape: ModelShape, tokens: &[TokenLayers]) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; shape.num_experts()]; shape.num_layers()];
    for token in tokens {
        for (row, routing) in counts.iter_mut().zip(token) {
            for e in routing.true_top_k(shape.top_k()) {
                row[e] += 1;
            }
        }
    }
    counts
}

pub fn activation_matrix(trace: &RoutingTrace, phase: Phase) -> Result<ActivationMatrix> {
    let tokens = trace.tokens(phase);
    if tokens.is_empty() {
        return Err(Error::EmptyPhase(phase));
    }
    activation_matrix_of(trace.shape(), phase, tokens)
}

fn activation_matrix_of(
    shape: ModelShape,
    phase: Phase,
    tokens: &[TokenLayers],
) -> Result<ActivationMatrix> {
    if tokens.is_empty() {
        return Err(Error::EmptyPhase(phase));
    }
    let n = tokens.len() as f64;
    let values = routing_counts(shape, tokens)
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
        .collect();
    Ok(ActivationMatrix {
        values,
        phase,
        token_count: tokens.len(),
    })
}

/// Mean row-wise cosine similarity of two activation matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    /// Layers where either row is all zeros; they contribute 0 to the mean.
    pub degenerate_layers: Vec<usize>,
}

pub fn similarity(p: &ActivationMatrix, d: &ActivationMatrix) -> Result<Similarity> {
    if p.num_layers() != d.num_layers() || p.num_experts() != d.num_experts() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            p.num_layers(),
            p.num_experts(),
            d.num_layers(),
            d.num_experts()
        )));
    }
    if p.num_layers() == 0 {
        return Err(Error::DimensionMismatch("matrices have no layers".into()));
    }
    if let Some(l) = (0..p.num_layers()).find(|&l| p.values[l].len() != d.values[l].len()) {
        return Err(Error::DimensionMismatch(format!("ragged row at layer {l}")));
    }
    let mut degenerate_layers = Vec::new();
    let mut total = 0.0;
    for (l, (a, b)) in p.values.iter().zip(&d.values).enumerate() {
        match cosine(a, b) {
            Some(c) => total += c,
            None => degenerate_layers.push(l),
        }
    }
    Ok(Similarity {
        value: total / p.num_layers() as f64,
        degenerate_layers,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Eq.-style prefill/decode similarity of one trace.
pub fn phase_similarity(trace: &RoutingTrace) -> Result<Similarity> {
    let p = activation_matrix(trace, Phase::Prefill)?;
    let d = activation_matrix(trace, Phase::Decode)?;
    similarity(&p, &d)
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

/// One-layer-ahead prediction accuracy per layer over decode tokens.
///
/// Entry `l` compares the prediction carried on layer `l - 1` with the true
/// top-k of layer `l`; entry 0 is always `None`.
pub fn prediction_accuracy(trace: &RoutingTrace) -> Result<Vec<Option<f64>>> {
    let shape = trace.shape();
    let decode = trace.decode();
    if decode.is_empty() {
        return Err(Error::EmptyPhase(Phase::Decode));
    }
    let k = shape.top_k();
    let mut hits = vec![0usize; shape.num_layers()];
    for (t, token) in decode.iter().enumerate() {
        for l in 1..shape.num_layers() {
            let predicted = token[l - 1]
                .predicted_scores
                .as_ref()
                .ok_or(Error::MissingPrediction { token: t, layer: l })?;
            hits[l] += overlap(&top_k(predicted, k), &token[l].true_top_k(k));
        }
    }
    let denom = (decode.len() * k) as f64;
    Ok(hits
        .iter()
        .enumerate()
        .map(|(l, &h)| (l > 0).then(|| h as f64 / denom))
        .collect())
}

/// Mean of the defined entries of [`prediction_accuracy`].
pub fn mean_accuracy(per_layer: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_layer.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub const DEFAULT_DRIFT_WINDOW: usize = 15;

/// Similarity between decode activation matrices of adjacent non-overlapping
/// windows of `window` tokens.
pub fn window_drift(trace: &RoutingTrace, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidConfig("drift window must be positive".into()));
    }
    let decode = trace.decode();
    if decode.len() < 2 * window {
        return Err(Error::TooShort {
            needed: 2 * window,
            got: decode.len(),
        });
    }
    let matrices = decode
        .chunks_exact(window)
        .map(|chunk| activation_matrix_of(trace.shape(), Phase::Decode, chunk))
        .collect::<Result<Vec<_>>>()?;
    matrices
        .windows(2)
        .map(|pair| similarity(&pair[0], &pair[1]).map(|s| s.value))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub set_fidelity: f64,
    pub score_mass: f64,
}

/// Agreement between executed expert sets and the true top-k of each decode
/// (token, layer). `executed[t][l]` lists the experts run for token `t` at
/// layer `l`.
pub fn routing_fidelity(trace: &RoutingTrace, executed: &[Vec<Vec<usize>>]) -> Result<Fidelity> {
    let shape = trace.shape();
    let k = shape.top_k();
    let decode = trace.decode();
    if executed.len() != decode.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} executed tokens for {} decode tokens",
            executed.len(),
            decode.len()
        )));
    }
    if decode.is_empty() {
        return Err(Error::EmptyPhase(Phase::Decode));
    }
    let mut set_total = 0.0;
    let mut mass_total = 0.0;
    for (t, (token, sets)) in decode.iter().zip(executed).enumerate() {
        if sets.len() != shape.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "token {t} has {} executed layers, expected {}",
                sets.len(),
                shape.num_layers()
            )));
        }
        for (l, (routing, set)) in token.iter().zip(sets).enumerate() {
            if set.len() != k || set.iter().any(|&e| e >= shape.num_experts()) {
                return Err(Error::ShapeMismatch(format!(
                    "token {t}, layer {l}: executed set {set:?} is not {k} valid experts"
                )));
            }
            let truth = routing.true_top_k(k);
            set_total += overlap(set, &truth) as f64 / k as f64;
            let got: f64 = set.iter().map(|&e| routing.true_scores[e]).sum();
            let best: f64 = truth.iter().map(|&e| routing.true_scores[e]).sum();
            mass_total += if best > 0.0 { (got / best).min(1.0) } else { 1.0 };
        }
    }
    let n = (decode.len() * shape.num_layers()) as f64;
    Ok(Fidelity {
        set_fidelity: set_total / n,
        score_mass: mass_total / n,
    })
}

/// Flat metrics record consumed by the reporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sequence_id: String,
    pub similarity: Option<f64>,
    pub accuracy: Vec<Option<f64>>,
    pub mean_accuracy: Option<f64>,
    pub drift: Vec<f64>,
    pub fidelity: Option<Fidelity>,
}

/// Computes every metric that the trace supports; unsupported ones are left
/// empty instead of failing.
pub fn trace_report(trace: &RoutingTrace, window: usize) -> MetricsReport {
    let accuracy = prediction_accuracy(trace).unwrap_or_default();
    MetricsReport {
        sequence_id: trace.sequence_id().to_string(),
        similarity: phase_similarity(trace).ok().map(|s| s.value),
        mean_accuracy: mean_accuracy(&accuracy),
        accuracy,
        drift: window_drift(trace, window).unwrap_or_default(),
        fidelity: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TokenRouting;

    fn matrix(values: Vec<Vec<f64>>) -> ActivationMatrix {
        ActivationMatrix {
            values,
            phase: Phase::Decode,
            token_count: 1,
        }
    }

    /// Scores whose top-k (k = 2) is exactly `set`.
    fn scores_for(set: &[usize], e: usize) -> Vec<f64> {
        let rest = (1.0 - 0.4 * set.len() as f64) / (e - set.len()) as f64;
        (0..e)
            .map(|i| if set.contains(&i) { 0.4 } else { rest })
            .collect()
    }

    fn one_layer_trace(sets: &[&[usize]], e: usize) -> RoutingTrace {
        let shape = ModelShape::new(1, e, 2).unwrap();
        let tokens: Vec<TokenLayers> = sets
            .iter()
            .map(|s| vec![TokenRouting::new(scores_for(s, e), None)])
            .collect();
        RoutingTrace::new(shape, "t", tokens.clone(), tokens).unwrap()
    }

    #[test]
    fn activation_matrix_counts_top_k() {
        let t = one_layer_trace(&[&[0, 2]], 4);
        let m = activation_matrix(&t, Phase::Prefill).unwrap();
        assert_eq!(m.values, vec![vec![1.0, 0.0, 1.0, 0.0]]);

        let t = one_layer_trace(&[&[0, 1], &[0, 2]], 4);
        let m = activation_matrix(&t, Phase::Decode).unwrap();
        assert_eq!(m.values, vec![vec![1.0, 0.5, 0.5, 0.0]]);
        assert_eq!(m.token_count, 2);
    }

    #[test]
    fn empty_decode_is_an_error() {
        let shape = ModelShape::new(1, 4, 2).unwrap();
        let t = RoutingTrace::new(
            shape,
            "t",
            vec![vec![TokenRouting::new(scores_for(&[0, 1], 4), None)]],
            vec![],
        )
        .unwrap();
        assert_eq!(
            activation_matrix(&t, Phase::Decode).unwrap_err().kind(),
            "empty_phase"
        );
    }

    #[test]
    fn similarity_examples() {
        let p = matrix(vec![vec![0.5, 1.5], vec![1.0, 1.0]]);
        assert!((similarity(&p, &p).unwrap().value - 1.0).abs() < 1e-15);

        let a = matrix(vec![vec![1.0, 0.0]]);
        let b = matrix(vec![vec![0.0, 1.0]]);
        assert_eq!(similarity(&a, &b).unwrap().value, 0.0);

        // cos((0.75,1.25),(1.25,0.75)) = 1.875 / 2.125 = 15/17
        let p = matrix(vec![vec![0.75, 1.25], vec![1.0, 1.0]]);
        let d = matrix(vec![vec![1.25, 0.75], vec![1.0, 1.0]]);
        let expected = (15.0 / 17.0 + 1.0) / 2.0;
        let got = similarity(&p, &d).unwrap().value;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.94118).abs() < 1e-5);
    }

    #[test]
    fn zero_rows_are_flagged_not_fatal() {
        let p = matrix(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let d = matrix(vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        let s = similarity(&p, &d).unwrap();
        assert_eq!(s.degenerate_layers, vec![0]);
        assert!((s.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_mismatched_dimensions() {
        let p = matrix(vec![vec![1.0, 0.0]]);
        let d = matrix(vec![vec![1.0, 0.0, 0.0]]);
        assert_eq!(similarity(&p, &d).unwrap_err().kind(), "dimension_mismatch");
    }

    fn predicted_trace(pred: &[usize], truth: &[usize], tokens: usize) -> RoutingTrace {
        let shape = ModelShape::new(2, 4, 2).unwrap();
        let token = vec![
            TokenRouting::new(scores_for(&[0, 1], 4), Some(scores_for(pred, 4))),
            TokenRouting::new(scores_for(truth, 4), None),
        ];
        let prefill = vec![vec![
            TokenRouting::new(scores_for(&[0, 1], 4), None),
            TokenRouting::new(scores_for(&[0, 1], 4), None),
        ]];
        RoutingTrace::new(shape, "p", prefill, vec![token; tokens]).unwrap()
    }

    #[test]
    fn prediction_accuracy_examples() {
        let exact = predicted_trace(&[1, 2], &[1, 2], 3);
        assert_eq!(prediction_accuracy(&exact).unwrap(), vec![None, Some(1.0)]);
        let half = predicted_trace(&[0, 1], &[1, 2], 3);
        assert_eq!(prediction_accuracy(&half).unwrap(), vec![None, Some(0.5)]);
        assert_eq!(mean_accuracy(&[None, Some(0.5), Some(1.0)]), Some(0.75));
    }

    #[test]
    fn missing_prediction_is_reported() {
        let shape = ModelShape::new(2, 4, 2).unwrap();
        let token = vec![
            TokenRouting::new(scores_for(&[0, 1], 4), None),
            TokenRouting::new(scores_for(&[0, 1], 4), None),
        ];
        let t = RoutingTrace::new(shape, "m", vec![token.clone()], vec![token]).unwrap();
        assert!(matches!(
            prediction_accuracy(&t).unwrap_err(),
            Error::MissingPrediction { token: 0, layer: 1 }
        ));
    }

    #[test]
    fn window_drift_examples() {
        let stationary: Vec<&[usize]> = vec![&[0, 1]; 45];
        let t = one_layer_trace(&stationary, 4);
        let drift = window_drift(&t, 15).unwrap();
        assert_eq!(drift.len(), 2);
        assert!(drift.iter().all(|d| (d - 1.0).abs() < 1e-12), "{drift:?}");

        let mut regimes: Vec<&[usize]> = vec![&[0, 1]; 15];
        regimes.extend(vec![&[2usize, 3][..]; 15]);
        let t = one_layer_trace(&regimes, 4);
        assert_eq!(window_drift(&t, 15).unwrap(), vec![0.0]);

        let short: Vec<&[usize]> = vec![&[0, 1]; 29];
        let t = one_layer_trace(&short, 4);
        assert!(matches!(
            window_drift(&t, 15).unwrap_err(),
            Error::TooShort { needed: 30, got: 29 }
        ));
    }

    #[test]
    fn routing_fidelity_examples() {
        let t = one_layer_trace(&[&[0, 1], &[2, 3]], 4);
        let perfect = vec![vec![vec![0, 1]], vec![vec![2, 3]]];
        let f = routing_fidelity(&t, &perfect).unwrap();
        assert_eq!((f.set_fidelity, f.score_mass), (1.0, 1.0));

        let shape = ModelShape::new(1, 4, 2).unwrap();
        let token = vec![TokenRouting::new(vec![0.6, 0.4, 0.0, 0.0], None)];
        let t = RoutingTrace::new(shape, "f", vec![token.clone()], vec![token]).unwrap();
        let f = routing_fidelity(&t, &[vec![vec![0, 3]]]).unwrap();
        assert_eq!(f.set_fidelity, 0.5);
        assert!(f.score_mass < 1.0);
        assert!((f.score_mass - 0.6).abs() < 1e-12);

        assert_eq!(
            routing_fidelity(&t, &[vec![vec![0]]]).unwrap_err().kind(),
            "shape_mismatch"
        );
    }
}
