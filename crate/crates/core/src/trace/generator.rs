//! Synthetic routing-trace generator.
//!
//! Every sequence draws a Dirichlet preference vector per layer. Token gate
//! scores are `softmax(ln(pref) + Gumbel noise)`, so a token's top-k is a
//! draw without replacement from the preference. Decode tokens use a
//! preference that drifts away from the prefill one by a mixing weight that
//! is calibrated so the expected prefill/decode similarity hits the target.
//!
//! Predictions for layer `l + 1` start from the true scores of `l + 1`; each
//! true top-k expert survives with the profile's probability for that layer
//! and the others are swapped with distractors drawn from the decode
//! preference, so the expected top-k overlap equals the profile entry.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Gumbel};
use serde::{Deserialize, Serialize};

use super::{top_k, ModelShape, RoutingTrace, TokenLayers, TokenRouting};
use crate::error::{Error, Result};

const CALIBRATION_SEQUENCES: usize = 64;
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
const BISECTION_STEPS: usize = 40;

/// Default expected prefill/decode activation similarity.
pub const DEFAULT_SIMILARITY_TARGET: f64 = 0.907;
/// Default mean one-layer-ahead prediction accuracy.
pub const DEFAULT_ACCURACY_TARGET: f64 = 0.8411;
/// Default per-expert Dirichlet concentration.
pub const DEFAULT_CONCENTRATION: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub shape: ModelShape,
    pub seed: u64,
    /// Symmetric Dirichlet parameter of the per-sequence, per-layer expert
    /// preference; `inf` gives uniform preferences.
    #[serde(with = "crate::serde_util::f64_or_inf")]
    pub preference_concentration: f64,
    pub prefill_decode_similarity_target: f64,
    /// Entry `l` is the expected top-k overlap fraction when predicting layer
    /// `l`; entry 0 is never used because layer 0 has no predecessor.
    pub prediction_accuracy_profile: Vec<f64>,
    pub num_prefill_tokens: usize,
    pub num_decode_tokens: usize,
}

impl GeneratorConfig {
    pub fn for_shape(shape: ModelShape) -> Self {
        GeneratorConfig {
            shape,
            seed: 0,
            preference_concentration: DEFAULT_CONCENTRATION,
            prefill_decode_similarity_target: DEFAULT_SIMILARITY_TARGET,
            // Shallow models cannot fit the ramp under the default mean.
            prediction_accuracy_profile: ramp_profile(shape.num_layers(), DEFAULT_ACCURACY_TARGET)
                .unwrap_or_else(|_| vec![DEFAULT_ACCURACY_TARGET; shape.num_layers()]),
            num_prefill_tokens: 64,
            num_decode_tokens: 128,
        }
    }

    /// Mean of the profile over the layers that can be predicted (1..L).
    pub fn expected_accuracy(&self) -> Option<f64> {
        let usable = self.prediction_accuracy_profile.get(1..)?;
        if usable.is_empty() {
            return None;
        }
        Some(usable.iter().sum::<f64>() / usable.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.shape.num_layers();
        let c = self.preference_concentration;
        if c.is_nan() || c <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "preference_concentration must be positive, got {c}"
            )));
        }
        let target = self.prefill_decode_similarity_target;
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidConfig(format!(
                "similarity target {target} outside [0, 1]"
            )));
        }
        if self.prediction_accuracy_profile.len() != l {
            return Err(Error::InvalidConfig(format!(
                "accuracy profile has {} entries, expected {l}",
                self.prediction_accuracy_profile.len()
            )));
        }
        if let Some(p) = self
            .prediction_accuracy_profile
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidConfig(format!(
                "accuracy profile entry {p} outside [0, 1]"
            )));
        }
        if self.num_prefill_tokens == 0 {
            return Err(Error::InvalidConfig("num_prefill_tokens must be at least 1".into()));
        }
        let imperfect = self.prediction_accuracy_profile[1.min(l)..]
            .iter()
            .any(|&p| p < 1.0);
        if imperfect && self.shape.num_experts() == self.shape.top_k() {
            return Err(Error::UnreachableTarget(
                "with k = E every prediction covers the full top-k; accuracy below 1 is impossible"
                    .into(),
            ));
        }
        if target >= 1.0 && imperfect {
            return Err(Error::UnreachableTarget(
                "similarity 1.0 needs token-invariant routing, which conflicts with a \
                 prediction accuracy profile below 1.0"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Profile ramping linearly from 0.60 at the first predictable layer to a
/// plateau reached four layers later, with the plateau chosen so the mean over
/// predictable layers equals `mean`.
pub fn ramp_profile(num_layers: usize, mean: f64) -> Result<Vec<f64>> {
    const START: f64 = 0.60;
    const RAMP: usize = 4;
    if !(0.0..=1.0).contains(&mean) {
        return Err(Error::InvalidConfig(format!("accuracy mean {mean} outside [0, 1]")));
    }
    let predictable = num_layers.saturating_sub(1);
    let weights: Vec<f64> = (0..predictable)
        .map(|q| q.min(RAMP) as f64 / RAMP as f64)
        .collect();
    let weight_sum: f64 = weights.iter().sum();
    let mut profile = Vec::with_capacity(num_layers);
    if weight_sum == 0.0 {
        profile.resize(num_layers, mean);
        return Ok(profile);
    }
    let plateau = START + predictable as f64 * (mean - START) / weight_sum;
    if !(0.0..=1.0).contains(&plateau) {
        return Err(Error::UnreachableTarget(format!(
            "a ramp from {START} averaging {mean} over {predictable} layers needs plateau {plateau:.4}"
        )));
    }
    profile.push(START);
    profile.extend(weights.iter().map(|w| START + (plateau - START) * w));
    Ok(profile)
}

/// Calibrated generator; cheap to call repeatedly with different seeds.
#[derive(Debug, Clone)]
pub struct TraceGenerator {
    config: GeneratorConfig,
    drift: f64,
    frozen: bool,
}

impl TraceGenerator {
    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let frozen = config.prefill_decode_similarity_target >= 1.0;
        let drift = if frozen || config.num_decode_tokens == 0 {
            0.0
        } else {
            cached_drift(config)?
        };
        Ok(TraceGenerator {
            config: config.clone(),
            drift,
            frozen,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Weight of the fresh preference in the decode mixture.
    pub fn drift(&self) -> f64 {
        self.drift
    }

    pub fn generate(&self, seed: u64, sequence_id: impl Into<String>) -> RoutingTrace {
        let shape = self.config.shape;
        let (l_count, e_count, k) = (shape.num_layers(), shape.num_experts(), shape.top_k());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = self.config.preference_concentration;

        let prefill_pref: Vec<Vec<f64>> =
            (0..l_count).map(|_| sample_preference(&mut rng, e_count, alpha)).collect();
        let fresh_pref: Vec<Vec<f64>> =
            (0..l_count).map(|_| sample_preference(&mut rng, e_count, alpha)).collect();
        let decode_pref: Vec<Vec<f64>> = prefill_pref
            .iter()
            .zip(&fresh_pref)
            .map(|(p, r)| mix(p, r, self.drift))
            .collect();
        let ln_prefill = ln_all(&prefill_pref);
        let ln_decode = ln_all(&decode_pref);
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");

        let prefill: Vec<TokenLayers> = (0..self.config.num_prefill_tokens)
            .map(|_| {
                (0..l_count)
                    .map(|l| {
                        let scores = if self.frozen {
                            prefill_pref[l].clone()
                        } else {
                            gumbel_softmax(&mut rng, &gumbel, &ln_prefill[l])
                        };
                        TokenRouting::new(scores, None)
                    })
                    .collect()
            })
            .collect();

        let profile = &self.config.prediction_accuracy_profile;
        let decode: Vec<TokenLayers> = (0..self.config.num_decode_tokens)
            .map(|_| {
                let truths: Vec<Vec<f64>> = (0..l_count)
                    .map(|l| {
                        if self.frozen {
                            decode_pref[l].clone()
                        } else {
                            gumbel_softmax(&mut rng, &gumbel, &ln_decode[l])
                        }
                    })
                    .collect();
                (0..l_count)
                    .map(|l| {
                        let predicted = (l + 1 < l_count).then(|| {
                            predict(
                                &mut rng,
                                &gumbel,
                                &truths[l + 1],
                                profile[l + 1],
                                &ln_decode[l + 1],
                                k,
                            )
                        });
                        TokenRouting::new(truths[l].clone(), predicted)
                    })
                    .collect()
            })
            .collect();

        RoutingTrace::new_unchecked(shape, sequence_id.into(), prefill, decode)
    }
}

/// Generates one trace with `config.seed`; the calibration is cached per
/// configuration so repeated calls with different seeds stay cheap.
pub fn generate_trace(config: &GeneratorConfig) -> Result<RoutingTrace> {
    let generator = TraceGenerator::new(config)?;
    Ok(generator.generate(config.seed, format!("seq-{}", config.seed)))
}

fn cached_drift(config: &GeneratorConfig) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let mut key_config = config.clone();
    key_config.seed = 0;
    let key = serde_json::to_string(&key_config)?;
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&drift) = cache.lock().expect("calibration cache poisoned").get(&key) {
        return Ok(drift);
    }
    let drift = calibrate_drift(config)?;
    cache
        .lock()
        .expect("calibration cache poisoned")
        .insert(key, drift);
    Ok(drift)
}

/// Finds the decode drift weight whose expected prefill/decode similarity
/// equals the target, using common random numbers across the bisection.
fn calibrate_drift(config: &GeneratorConfig) -> Result<f64> {
    let shape = config.shape;
    let (l_count, e_count, k) = (shape.num_layers(), shape.num_experts(), shape.top_k());
    let alpha = config.preference_concentration;
    let n_dec = config.num_decode_tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");

    struct Sample {
        prefill_counts: Vec<Vec<f64>>,
        pref: Vec<Vec<f64>>,
        fresh: Vec<Vec<f64>>,
        noise: Vec<f64>,
    }

    let samples: Vec<Sample> = (0..CALIBRATION_SEQUENCES)
        .map(|_| {
            let pref: Vec<Vec<f64>> =
                (0..l_count).map(|_| sample_preference(&mut rng, e_count, alpha)).collect();
            let fresh: Vec<Vec<f64>> =
                (0..l_count).map(|_| sample_preference(&mut rng, e_count, alpha)).collect();
            let ln_pref = ln_all(&pref);
            let mut prefill_counts = vec![vec![0.0; e_count]; l_count];
            let mut keys = vec![0.0; e_count];
            for _ in 0..config.num_prefill_tokens {
                for (l, counts) in prefill_counts.iter_mut().enumerate() {
                    for (key, ln) in keys.iter_mut().zip(&ln_pref[l]) {
                        *key = ln + gumbel.sample(&mut rng);
                    }
                    for e in top_k(&keys, k) {
                        counts[e] += 1.0;
                    }
                }
            }
            let noise = (0..n_dec * l_count * e_count)
                .map(|_| gumbel.sample(&mut rng))
                .collect();
            Sample {
                prefill_counts,
                pref,
                fresh,
                noise,
            }
        })
        .collect();

    let similarity_at = |drift: f64| -> f64 {
        let mut total = 0.0;
        let mut keys = vec![0.0; e_count];
        for s in &samples {
            let ln_dec: Vec<Vec<f64>> = s
                .pref
                .iter()
                .zip(&s.fresh)
                .map(|(p, r)| mix(p, r, drift).iter().map(|v| v.ln()).collect())
                .collect();
            let mut decode_counts = vec![vec![0.0; e_count]; l_count];
            for t in 0..n_dec {
                for (l, counts) in decode_counts.iter_mut().enumerate() {
                    let base = (t * l_count + l) * e_count;
                    for (e, key) in keys.iter_mut().enumerate() {
                        *key = ln_dec[l][e] + s.noise[base + e];
                    }
                    for e in top_k(&keys, k) {
                        counts[e] += 1.0;
                    }
                }
            }
            total += mean_row_cosine(&s.prefill_counts, &decode_counts);
        }
        total / samples.len() as f64
    };

    let target = config.prefill_decode_similarity_target;
    let best = similarity_at(0.0);
    if target > best {
        return Err(Error::UnreachableTarget(format!(
            "similarity target {target} exceeds the {best:.4} reachable with {} prefill and {} \
             decode tokens at concentration {alpha}",
            config.num_prefill_tokens, n_dec
        )));
    }
    let worst = similarity_at(1.0);
    if target < worst {
        return Err(Error::UnreachableTarget(format!(
            "similarity target {target} is below the {worst:.4} floor of independent \
             preferences at concentration {alpha}"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if similarity_at(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn mean_row_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                dot / (nx * ny)
            }
        })
        .sum();
    total / a.len() as f64
}

fn sample_preference<R: Rng>(rng: &mut R, experts: usize, alpha: f64) -> Vec<f64> {
    if alpha.is_infinite() {
        return vec![1.0 / experts as f64; experts];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut draws: Vec<f64> = (0..experts)
        .map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE))
        .collect();
    let sum: f64 = draws.iter().sum();
    draws.iter_mut().for_each(|v| *v /= sum);
    draws
}

fn mix(base: &[f64], fresh: &[f64], weight: f64) -> Vec<f64> {
    base.iter()
        .zip(fresh)
        .map(|(b, f)| (1.0 - weight) * b + weight * f)
        .collect()
}

fn ln_all(prefs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    prefs
        .iter()
        .map(|p| p.iter().map(|v| v.ln()).collect())
        .collect()
}

fn gumbel_softmax<R: Rng>(rng: &mut R, gumbel: &Gumbel<f64>, ln_pref: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = ln_pref.iter().map(|ln| ln + gumbel.sample(rng)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut scores: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= sum);
    scores
}

fn predict<R: Rng>(
    rng: &mut R,
    gumbel: &Gumbel<f64>,
    truth: &[f64],
    keep_probability: f64,
    ln_pref: &[f64],
    k: usize,
) -> Vec<f64> {
    let top = top_k(truth, k);
    let dropped: Vec<usize> = top
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= keep_probability)
        .collect();
    let mut predicted = truth.to_vec();
    if dropped.is_empty() {
        return predicted;
    }
    let mut candidates: Vec<(f64, usize)> = (0..truth.len())
        .filter(|e| !top.contains(e))
        .map(|e| (ln_pref[e] + gumbel.sample(rng), e))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (&out, &(_, replacement)) in dropped.iter().zip(&candidates) {
        predicted.swap(out, replacement);
    }
    predicted
}
