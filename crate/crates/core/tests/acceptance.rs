//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p moesim-core --test acceptance`.

use std::time::{Duration, Instant};

use moesim_core::experiment::{self, ExperimentSpec, TraceSource};
use moesim_core::metrics::{
    activation_matrix, mean_accuracy, phase_similarity, prediction_accuracy, similarity,
    ActivationMatrix,
};
use moesim_core::placement::{
    allocate_for_sequence, init_for_shape, slot_budget, ExpertPlacement,
    SwapThreshold,
};
use moesim_core::policies::{select_with_degradation, Engine, PolicyConfig};
use moesim_core::simulator::{default_cost_model, plan_decode, simulate_decode, simulate_plans};
use moesim_core::trace::{
    read_trace, write_trace, GeneratorConfig, ModelShape, Phase, RoutingTrace, TokenRouting,
    TraceGenerator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn check(id: u32, name: &str, budget: Option<Duration>, f: fn() -> Outcome) -> bool {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = result.pass && in_time;
    let limit = budget.map_or(String::new(), |b| format!(" limit {:.0?}", b));
    println!(
        "{} [{id}] {name}: {} ({:.2?}{limit})",
        if pass { "PASS" } else { "FAIL" },
        result.detail,
        elapsed
    );
    pass
}

fn random_matrix(rng: &mut ChaCha8Rng, l: usize, e: usize) -> ActivationMatrix {
    let values = (0..l)
        .map(|_| {
            (0..e)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
                .collect()
        })
        .collect();
    ActivationMatrix {
        values,
        phase: Phase::Decode,
        token_count: 1,
    }
}

/// Mean over rows of the cosine between matching rows; a zero row scores 0.
fn cosine_oracle(p: &[Vec<f64>], d: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.iter().zip(d) {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            total += dot / (na * nb);
        }
    }
    total / p.len() as f64
}

fn similarity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let l = rng.random_range(1..=8);
        let e = rng.random_range(1..=16);
        let p = random_matrix(&mut rng, l, e);
        let d = random_matrix(&mut rng, l, e);
        let got = similarity(&p, &d).unwrap().value;
        worst = worst.max((got - cosine_oracle(&p.values, &d.values)).abs());
    }
    outcome(worst <= 1e-9, format!("1000 pairs, max |diff| = {worst:.2e}"))
}

/// Direct transcription of the per-block swap loop with exact rational
/// comparison `hot / T >= 1.05 * cold / T`.
fn allocation_interpreter(
    cache: &[Vec<bool>],
    counts: &[Vec<u64>],
) -> (Vec<Vec<bool>>, Vec<(usize, usize, usize)>) {
    let mut out = cache.to_vec();
    let mut swaps = Vec::new();
    for (layer, block) in counts.iter().enumerate() {
        let swap_num = block.len() / 2;
        let exps_gpu: Vec<usize> = (0..block.len()).filter(|&e| cache[layer][e]).collect();
        let exps_cpu: Vec<usize> = (0..block.len()).filter(|&e| !cache[layer][e]).collect();
        let mut hot = exps_cpu.clone();
        hot.sort_by_key(|&e| std::cmp::Reverse(block[e]));
        let hot: Vec<usize> = hot.into_iter().take(swap_num).collect();
        let mut cold = exps_gpu.clone();
        cold.sort_by_key(|&e| block[e]);
        let cold: Vec<usize> = cold.into_iter().take(swap_num).collect();
        for (h, c) in hot.into_iter().zip(cold) {
            if 100 * block[h] >= 105 * block[c] {
                out[layer][c] = false;
                out[layer][h] = true;
                swaps.push((layer, h, c));
            }
        }
    }
    (out, swaps)
}

fn allocation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut total_swaps = 0;
    for _ in 0..10_000 {
        let l = rng.random_range(1..=4);
        let e = rng.random_range(2..=8);
        let shape = ModelShape::new(l, e, 1).unwrap();
        let cache: Vec<Vec<bool>> = (0..l)
            .map(|_| (0..e).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        let counts: Vec<Vec<u64>> = (0..l)
            .map(|_| {
                (0..e)
                    .map(|_| {
                        // Bias toward small values so ties and the 1.05 edge occur.
                        if rng.random_bool(0.5) {
                            rng.random_range(0..=8)
                        } else {
                            rng.random_range(0..=64)
                        }
                    })
                    .collect()
            })
            .collect();
        let sets = cache
            .iter()
            .map(|row| (0..e).filter(|&x| row[x]).collect())
            .collect();
        let placement = ExpertPlacement::from_sets(shape, sets).unwrap();
        let (after, events) =
            allocate_for_sequence(&placement, &counts, SwapThreshold::default()).unwrap();
        let (want_cache, want_swaps) = allocation_interpreter(&cache, &counts);
        let got_cache: Vec<Vec<bool>> = (0..l)
            .map(|layer| (0..e).map(|x| after.is_fast(layer, x)).collect())
            .collect();
        let got_swaps: Vec<(usize, usize, usize)> = events
            .iter()
            .map(|s| (s.layer, s.swapped_in, s.swapped_out))
            .collect();
        total_swaps += got_swaps.len();
        if got_cache != want_cache || got_swaps != want_swaps {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("10000 instances, {total_swaps} swaps, {mismatches} mismatches"),
    )
}

fn generator_targets() -> Outcome {
    let cfg = GeneratorConfig::for_shape(ModelShape::MIXTRAL);
    let generator = TraceGenerator::new(&cfg).unwrap();
    let traces: Vec<RoutingTrace> = (0..512u64)
        .map(|s| generator.generate(1000 + s, format!("g{s}")))
        .collect();
    let sim = traces
        .iter()
        .map(|t| phase_similarity(t).unwrap().value)
        .sum::<f64>()
        / 512.0;
    let acc = traces
        .iter()
        .map(|t| mean_accuracy(&prediction_accuracy(t).unwrap()).unwrap())
        .sum::<f64>()
        / 512.0;
    let cross = (0..256)
        .map(|i| {
            let a = activation_matrix(&traces[2 * i], Phase::Decode).unwrap();
            let b = activation_matrix(&traces[2 * i + 1], Phase::Decode).unwrap();
            similarity(&a, &b).unwrap().value
        })
        .sum::<f64>()
        / 256.0;
    let target_acc = cfg.expected_accuracy().unwrap();
    let pass = (sim - 0.907).abs() <= 0.02 && (acc - target_acc).abs() <= 0.02 && cross < sim;
    outcome(
        pass,
        format!(
            "similarity {sim:.4} (target 0.907), accuracy {acc:.4} (target {target_acc:.4}), \
             cross-sequence {cross:.4} < {sim:.4}"
        ),
    )
}

fn scores(e: usize, top: [usize; 2]) -> Vec<f64> {
    let mut v = vec![0.2 / (e - 2) as f64; e];
    v[top[0]] = 0.5;
    v[top[1]] = 0.3;
    v
}

fn golden_trace(truth: &[[usize; 2]]) -> RoutingTrace {
    let s: Vec<Vec<f64>> = truth.iter().map(|t| scores(8, *t)).collect();
    let token: Vec<TokenRouting> = (0..s.len())
        .map(|l| TokenRouting::new(s[l].clone(), s.get(l + 1).cloned()))
        .collect();
    let shape = ModelShape::new(truth.len(), 8, 2).unwrap();
    RoutingTrace::new(shape, "golden", vec![token.clone()], vec![token]).unwrap()
}

fn golden_latency(truth: &[[usize; 2]], cached: Vec<Vec<usize>>, engine: Engine) -> f64 {
    let trace = golden_trace(truth);
    let placement = ExpertPlacement::from_sets(trace.shape(), cached).unwrap();
    let policy = PolicyConfig {
        prediction_start_layer: 1,
        ..PolicyConfig::new(engine)
    };
    simulate_decode(&trace, &placement, &policy, &default_cost_model()).unwrap().token_latencies_ms[0]
}

fn timeline_goldens() -> Outcome {
    let cases = [
        ("all fast", golden_latency(&[[0, 1]], vec![(0..8).collect()], Engine::Fiddler), 1.25),
        ("ondemand miss", golden_latency(&[[0, 1]], vec![vec![0]], Engine::OnDemand), 41.12),
        ("fiddler slow", golden_latency(&[[0, 1]], vec![vec![0]], Engine::Fiddler), 3.49),
        (
            "daop 2-layer",
            golden_latency(&[[0, 1], [0, 3]], vec![vec![0, 1], vec![0]], Engine::Daop),
            3.50,
        ),
        (
            "fiddler 2-layer",
            golden_latency(&[[0, 1], [0, 3]], vec![vec![0, 1], vec![0]], Engine::Fiddler),
            4.74,
        ),
    ];
    let pass = cases.iter().all(|(_, got, want)| (got - want).abs() <= 1e-9);
    let detail = cases
        .iter()
        .map(|(n, got, want)| format!("{n} {got} (want {want})"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn near_uniform_throughput() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        traces: TraceSource::Generate {
            num_sequences: 5,
            num_prefill_tokens: None,
            num_decode_tokens: Some(64),
            preference_concentration: Some(10.0),
            similarity_target: None,
            accuracy_target: None,
        },
        shape: Some(ModelShape::MIXTRAL),
        ecr_list: vec![0.469],
        engines: vec![Engine::OnDemand, Engine::Daop],
        cost_model: default_cost_model(),
        seed: 5,
        output_dir: dir.path().to_path_buf(),
        calibration_fraction: 0.2,
        prediction_start_layer: None,
        graceful_degradation: true,
        swap_threshold: SwapThreshold::default(),
    };
    let out = experiment::run(&spec).unwrap();
    let tps = |e: Engine| {
        out.aggregate
            .iter()
            .find(|a| a.engine == e)
            .unwrap()
            .tokens_per_second
    };
    let (ondemand, daop) = (tps(Engine::OnDemand), tps(Engine::Daop));
    outcome(
        ondemand < 1.0 && daop > 1.0,
        format!("ondemand {ondemand:.3} tok/s (< 1), daop {daop:.3} tok/s (> 1)"),
    )
}

fn dominance_suite() -> Outcome {
    let shape = ModelShape::MIXTRAL;
    let mut cfg = GeneratorConfig::for_shape(shape);
    cfg.num_decode_tokens = 16;
    let generator = TraceGenerator::new(&cfg).unwrap();
    let calib_traces: Vec<RoutingTrace> = (0..20u64)
        .map(|s| generator.generate(50_000 + s, format!("c{s}")))
        .collect();
    let calib = experiment::calibration_matrix(&calib_traces.iter().collect::<Vec<_>>()).unwrap();
    let cost = default_cost_model();
    let start = PolicyConfig::DEFAULT_PREDICTION_START;
    let (mut tokens, mut daop_worse, mut not_strict, mut miss_tokens, mut fiddler_worse) =
        (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut worst_daop = 0.0f64;
    for ecr in [0.1875, 0.3125, 0.469] {
        let placement = init_for_shape(shape, &calib, ecr).unwrap();
        for s in 0..100u64 {
            let trace = generator.generate(60_000 + s, format!("d{s}"));
            let run = |engine: Engine| {
                let policy = PolicyConfig::new(engine);
                let plans = plan_decode(&trace, &placement, &policy).unwrap();
                let result = simulate_plans(Some(engine), &plans, &cost).unwrap();
                (plans, result.token_latencies_ms)
            };
            let (_, daop) = run(Engine::Daop);
            let (fiddler_plans, fiddler) = run(Engine::Fiddler);
            let (ondemand_plans, ondemand) = run(Engine::OnDemand);
            for t in 0..daop.len() {
                tokens += 1;
                if daop[t] > fiddler[t] {
                    daop_worse += 1;
                    worst_daop = worst_daop.max(daop[t] - fiddler[t]);
                }
                let slow_late = fiddler_plans[t][start..].iter().any(|p| p.slow_count() > 0);
                if slow_late && daop[t] >= fiddler[t] {
                    not_strict += 1;
                }
                if ondemand_plans[t].iter().any(|p| !p.migrations.is_empty()) {
                    miss_tokens += 1;
                    if fiddler[t] > ondemand[t] {
                        fiddler_worse += 1;
                    }
                }
            }
        }
    }
    outcome(
        daop_worse == 0 && not_strict == 0 && fiddler_worse == 0,
        format!(
            "{tokens} tokens: daop > fiddler on {daop_worse} (worst +{worst_daop:.2} ms), \
             no strict gain on {not_strict}, fiddler > ondemand on {fiddler_worse} of {miss_tokens} miss tokens"
        ),
    )
}

fn policy_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut violations, mut degraded) = (0, 0);
    for _ in 0..10_000 {
        let e = rng.random_range(3..=16);
        let k = 2;
        let raw: Vec<f64> = (0..e).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let scores: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        let fast: Vec<bool> = (0..e).map(|_| rng.random_bool(0.4)).collect();
        let is_fast = |x: usize| fast[x];
        let (sel, d) = select_with_degradation(&scores, k, is_fast, true);
        let original = moesim_core::trace::top_k(&scores, k);
        let alternative = (0..e).any(|x| fast[x] && !original.contains(&x));
        let slow = sel.iter().filter(|&&x| !fast[x]).count();
        if alternative && slow > 1 {
            violations += 1;
        }
        degraded += usize::from(d.is_some());
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let (sel2, d2) = select_with_degradation(&scaled, k, is_fast, true);
        if sel2 != sel || d2.map(|x| x.substitute_expert) != d.map(|x| x.substitute_expert) {
            violations += 1;
        }
    }
    // Static engines never migrate.
    let mut cfg = GeneratorConfig::for_shape(ModelShape::PHI);
    cfg.num_decode_tokens = 32;
    let generator = TraceGenerator::new(&cfg).unwrap();
    let trace = generator.generate(9, "phi");
    let calib = activation_matrix(&trace, Phase::Prefill).unwrap();
    let placement = init_for_shape(trace.shape(), &calib, 0.25).unwrap();
    let mut migrations = 0;
    let mut layers = 0;
    for engine in [Engine::Fiddler, Engine::Daop] {
        let plans = plan_decode(&trace, &placement, &PolicyConfig::new(engine)).unwrap();
        for p in plans.iter().flatten() {
            layers += 1;
            migrations += p.migrations.len() + p.prefetched.len();
        }
    }
    outcome(
        violations == 0 && migrations == 0,
        format!(
            "10000 random layers ({degraded} degraded), {violations} violations; \
             {layers} static-engine layers, {migrations} migrations"
        ),
    )
}

fn cache_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    let mixtral = slot_budget(ModelShape::MIXTRAL, 0.469).unwrap();
    if mixtral != 120 {
        failures.push(format!("mixtral 0.469 budget {mixtral}"));
    }
    for case in 0..2000 {
        let l = rng.random_range(1..=32);
        let e = rng.random_range(2..=16);
        let shape = ModelShape::new(l, e, 2).unwrap();
        let min_ecr = l as f64 / (l * e) as f64;
        let ecr = rng.random_range(min_ecr..=1.0);
        let calib = ActivationMatrix {
            values: (0..l)
                .map(|_| (0..e).map(|_| rng.random::<f64>()).collect())
                .collect(),
            phase: Phase::Prefill,
            token_count: 1,
        };
        let placement = match init_for_shape(shape, &calib, ecr) {
            Ok(p) => p,
            Err(err) => {
                failures.push(format!("case {case}: {err}"));
                continue;
            }
        };
        let budget = ((ecr * (l * e) as f64) * (1.0 + 1e-9)).floor() as usize;
        if placement.cached_total() != budget {
            failures.push(format!("case {case}: {} cached, budget {budget}", placement.cached_total()));
        }
        let sizes: Vec<usize> = placement.layers().iter().map(|s| s.len()).collect();
        let mut current = placement;
        for _ in 0..4 {
            let counts: Vec<Vec<u64>> = (0..l)
                .map(|_| (0..e).map(|_| rng.random_range(0..=64)).collect())
                .collect();
            current = allocate_for_sequence(&current, &counts, SwapThreshold::default())
                .unwrap()
                .0;
            let now: Vec<usize> = current.layers().iter().map(|s| s.len()).collect();
            if now != sizes {
                failures.push(format!("case {case}: sizes {sizes:?} became {now:?}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "mixtral 0.469 -> {mixtral} slots; 2000 random shapes x 4 swap rounds; {} failures {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn random_trace(rng: &mut ChaCha8Rng) -> RoutingTrace {
    let l = rng.random_range(1..=6);
    let e = rng.random_range(2..=10);
    let k = rng.random_range(1..=e);
    let shape = ModelShape::new(l, e, k).unwrap();
    let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..e).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|x| x / sum).collect()
    };
    let token = |rng: &mut ChaCha8Rng, predict: bool| -> Vec<TokenRouting> {
        (0..l)
            .map(|layer| {
                let pred = (predict && layer + 1 < l).then(|| row(rng));
                TokenRouting::new(row(rng), pred)
            })
            .collect()
    };
    let prefill = (0..rng.random_range(1..=4)).map(|_| token(rng, false)).collect();
    let decode = (0..rng.random_range(0..=4)).map(|_| token(rng, true)).collect();
    RoutingTrace::new(shape, format!("r{}", rng.random::<u32>()), prefill, decode).unwrap()
}

fn determinism_and_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut round_trip_failures = 0;
    for _ in 0..1000 {
        let trace = random_trace(&mut rng);
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        if back != trace {
            round_trip_failures += 1;
        }
    }
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outputs: Vec<Vec<Vec<u8>>> = dirs
        .iter()
        .map(|d| {
            let spec = ExperimentSpec {
                traces: TraceSource::Generate {
                    num_sequences: 3,
                    num_prefill_tokens: None,
                    num_decode_tokens: Some(16),
                    preference_concentration: None,
                    similarity_target: Some(0.8),
                    accuracy_target: None,
                },
                shape: Some(ModelShape::PHI),
                ecr_list: vec![0.25, 0.469],
                engines: Engine::ALL.to_vec(),
                cost_model: default_cost_model(),
                seed: 42,
                output_dir: d.path().to_path_buf(),
                calibration_fraction: 0.2,
                prediction_start_layer: None,
                graceful_degradation: true,
                swap_threshold: SwapThreshold::default(),
            };
            let out = experiment::run(&spec).unwrap();
            let mut files = vec![
                std::fs::read(&out.summary_csv).unwrap(),
                std::fs::read(&out.aggregate_csv).unwrap(),
            ];
            for i in 0..3 {
                files.push(std::fs::read(d.path().join(format!("traces/seq-{i:04}.jsonl"))).unwrap());
            }
            files
        })
        .collect();
    let identical = outputs[0] == outputs[1];
    outcome(
        round_trip_failures == 0 && identical,
        format!(
            "1000 random traces, {round_trip_failures} round-trip failures; \
             repeated seeded experiment byte-identical: {identical}"
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        check(1, "similarity matches independent row-cosine oracle", Some(secs(1)), similarity_oracle),
        check(2, "allocation matches literal swap-loop interpreter", Some(secs(5)), allocation_oracle),
        check(3, "generator hits similarity and accuracy targets", Some(secs(30)), generator_targets),
        check(4, "timeline golden fixtures", None, timeline_goldens),
        check(5, "ondemand < 1 tok/s and daop > 1 tok/s at ECR 0.469", Some(secs(10)), near_uniform_throughput),
        check(6, "dominance: daop <= fiddler, fiddler <= ondemand on miss", None, dominance_suite),
        check(7, "degradation and static-engine invariants", None, policy_invariants),
        check(8, "cache size invariants", None, cache_invariants),
        check(9, "determinism and trace round-trip", None, determinism_and_round_trip),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
