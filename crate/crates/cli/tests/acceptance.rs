//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chainmask::classifier::{grad_check, Ablation, ClassifierParams, GradCheckScope, TrainConfig};
use chainmask::metrics::{evaluate, k_sweep};
use chainmask::relax::{perturb_and_map_sample, tune_lambda, SampleOptions};
use chainmask::{
    adjacent_pairs, brute_force_map, chain_marginals, dp_map, dp_map_unbudgeted, lagrangian_score,
    segment_count, synth, Budget, ChainModel, Embeddings, Instance, RelaxConfig, Span, SynthConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_model(rng: &mut ChaCha8Rng, max_len: usize) -> ChainModel {
    let len = rng.random_range(1..=max_len);
    let unary = (0..len).map(|_| rng.random_range(-3.0..=3.0)).collect();
    let edge = (0..len - 1).map(|_| rng.random_range(0.0..=2.0)).collect();
    let k = rng.random_range(0..=len);
    ChainModel::new(unary, edge, Budget::Count(k)).unwrap()
}

fn bits_of(code: u32, len: usize) -> Vec<bool> {
    (0..len).map(|i| code >> i & 1 == 1).collect()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1500;
    let mut mismatches = 0;
    for _ in 0..n {
        let model = random_model(&mut rng, 14);
        let brute = brute_force_map(&model).unwrap();
        let dp = dp_map(&model);
        if brute.score != dp.score || brute.bits() != dp.bits() {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{n} instances, {mismatches} mismatches, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Exhaustive Gibbs marginals and log-partition.
fn enumerate_gibbs(model: &ChainModel, cfg: &RelaxConfig) -> (Vec<f64>, f64) {
    let len = model.len();
    let weights: Vec<(Vec<bool>, f64)> = (0..1u32 << len)
        .map(|c| {
            let b = bits_of(c, len);
            let w = lagrangian_score(model, &b, cfg).unwrap() / cfg.temperature;
            (b, w)
        })
        .collect();
    let max = weights
        .iter()
        .map(|w| w.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = weights.iter().map(|w| (w.1 - max).exp()).sum();
    let mut probs = vec![0.0; len];
    for (b, w) in &weights {
        let p = (w - max).exp() / z;
        for (acc, &on) in probs.iter_mut().zip(b) {
            if on {
                *acc += p;
            }
        }
    }
    (probs, max + z.ln())
}

fn marginal_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 300;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let model = random_model(&mut rng, 12);
        let cfg =
            RelaxConfig::new(rng.random_range(0.0..3.0), rng.random_range(0.5..2.0), 0).unwrap();
        let m = chain_marginals(&model, &cfg).unwrap();
        let (probs, log_z) = enumerate_gibbs(&model, &cfg);
        worst = worst.max((m.log_z - log_z).abs());
        for (a, b) in m.probs.iter().zip(&probs) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(30),
        format!(
            "{n} instances, max abs error {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn sampler_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut zero_noise_ok = true;
    for k in 0..20 {
        let model = random_model(&mut rng, 8);
        let cfg = RelaxConfig::new(rng.random_range(0.0..2.0), 1.0, k).unwrap();
        let exact = chain_marginals(&model, &cfg).unwrap();
        let batch =
            perturb_and_map_sample(&model, &cfg, 100_000, SampleOptions::default()).unwrap();
        for (a, b) in exact.probs.iter().zip(&batch.empirical_freq) {
            worst = worst.max((a - b).abs());
        }
        let map = dp_map_unbudgeted(&model, cfg.lambda);
        let quiet = SampleOptions {
            noise_scale: 0.0,
            ..Default::default()
        };
        let batch = perturb_and_map_sample(&model, &cfg, 50, quiet).unwrap();
        zero_noise_ok &= batch.masks.iter().all(|m| m.as_slice() == map.bits());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 0.05 && zero_noise_ok && elapsed < Duration::from_secs(120),
        format!(
            "20 instances x 1e5 samples, max abs deviation {worst:.4}, zero-noise samples equal MAP: {zero_noise_ok}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn lagrangian_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1500;
    let (mut violations, mut zero_gap) = (0, 0);
    for _ in 0..n {
        let model = random_model(&mut rng, 14);
        let fit = tune_lambda(&model);
        let optimum = brute_force_map(&model).unwrap().score;
        let count = fit.solution.bits().iter().filter(|&&b| b).count();
        let score = fit.solution.score;
        if count > model.budget()
            || score > optimum + 1e-9
            || score < optimum - fit.duality_gap - 1e-9
        {
            violations += 1;
        }
        if fit.duality_gap == 0.0 {
            zero_gap += 1;
        }
    }
    let rate = zero_gap as f64 / n as f64;
    outcome(
        violations == 0 && rate >= 0.5,
        format!("{n} instances, {violations} violations, zero-gap rate {rate:.3} (floor 0.5)"),
    )
}

fn continuity_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    let n = 200;
    let (mut pair_violations, mut segment_monotone) = (0, 0);
    for _ in 0..n {
        let len = rng.random_range(2..=30);
        let unary: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let k = rng.random_range(0..=len);
        let mut prev: Option<(usize, usize)> = None;
        let mut seg_ok = true;
        for &r in &grid {
            let model = ChainModel::uniform(unary.clone(), r, Budget::Count(k)).unwrap();
            let sol = dp_map(&model);
            let (pairs, segs) = (adjacent_pairs(sol.bits()), segment_count(sol.bits()));
            if let Some((p, s)) = prev {
                if pairs < p {
                    pair_violations += 1;
                }
                seg_ok &= segs <= s;
            }
            prev = Some((pairs, segs));
        }
        if seg_ok {
            segment_monotone += 1;
        }
    }
    let seg_rate = segment_monotone as f64 / n as f64;
    outcome(
        pair_violations == 0,
        format!(
            "{n} instances x {} bonuses, {pair_violations} pair-count decreases, segment count nonincreasing on {:.1}% of instances",
            grid.len(),
            100.0 * seg_rate
        ),
    )
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    let n = 100;
    for _ in 0..n {
        let len = rng.random_range(3..=10);
        let dim = rng.random_range(2..=5);
        let c = rng.random_range(2..=4);
        let columns = (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let e1_end = rng.random_range(0..len - 1);
        let e1 = Span::new(rng.random_range(0..=e1_end), e1_end).unwrap();
        let e2_start = rng.random_range(e1_end + 1..len);
        let e2 = Span::new(e2_start, rng.random_range(e2_start..len)).unwrap();
        let labels: Vec<String> = (0..c).map(|i| format!("r{i}")).collect();
        let label = labels[rng.random_range(0..c)].clone();
        let inst = Instance::new(
            (0..len).map(|i| format!("t{i}")).collect(),
            Embeddings::from_columns(columns).unwrap(),
            e1,
            e2,
            Some(label),
        )
        .unwrap();
        let mut params = ClassifierParams::zeros(labels, dim, rng.random_range(0.0..2.0));
        params
            .weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-1.0..1.0));
        params
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
        let cfg = TrainConfig {
            temperature: rng.random_range(0.5..5.0),
            budget_fraction: rng.random_range(0.2..=1.0),
            ablation: Ablation {
                no_continuity: rng.random_bool(0.2),
                no_sparsity: rng.random_bool(0.2),
                no_entities: rng.random_bool(0.2),
            },
            ..TrainConfig::default()
        };
        let err = grad_check(&inst, &params, &cfg, 1e-5, GradCheckScope::All).unwrap();
        worst = worst.max(err);
    }
    outcome(
        worst <= 1e-4,
        format!("{n} configurations, max relative error {worst:.2e}"),
    )
}

fn corpus() -> SynthConfig {
    SynthConfig {
        n_instances: 2000,
        min_len: 12,
        max_len: 30,
        num_labels: 4,
        noise_scale: 0.1,
        distractor_rate: 0.2,
        seed: 0,
        ..SynthConfig::default()
    }
}

fn learning_and_sweep() -> (Outcome, Outcome) {
    let start = Instant::now();
    let data = synth::generate(&corpus()).unwrap();
    let (train_set, test_set) = data.split_at(1600);
    let cfg = TrainConfig::default();
    let fractions = [0.2, 0.4, 0.6, 0.8, 1.0];
    let rows = k_sweep(train_set, test_set, &fractions, &cfg).unwrap();
    let main = rows.iter().find(|r| r.fraction == 0.6).unwrap();
    let ablated_cfg = TrainConfig {
        ablation: Ablation {
            no_continuity: true,
            ..Default::default()
        },
        ..cfg.clone()
    };
    let (params, _) = chainmask::classifier::train(train_set, &ablated_cfg).unwrap();
    let ablated = evaluate(test_set, &params, &ablated_cfg).unwrap();
    let elapsed = start.elapsed();

    let recall = main.rationale_recall.unwrap();
    let ablated_recall = ablated.rationale_recall.unwrap();
    let learning = outcome(
        main.micro_f1 >= 0.90
            && recall >= 0.85
            && ablated.mean_segment_count > main.mean_segment_count
            && ablated_recall <= recall
            && elapsed < Duration::from_secs(300),
        format!(
            "micro-F1 {:.4}, rationale recall {:.3}; without continuity: segments {:.3} -> {:.3}, recall {:.3} -> {:.3}; {:.1}s",
            main.micro_f1,
            recall,
            main.mean_segment_count,
            ablated.mean_segment_count,
            recall,
            ablated_recall,
            elapsed.as_secs_f64()
        ),
    );

    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.micro_f1 > b.micro_f1 { r } else { b });
    let table = rows
        .iter()
        .map(|r| format!("{:.1}:{:.4}", r.fraction, r.micro_f1))
        .collect::<Vec<_>>()
        .join(" ");
    let top = rows
        .iter()
        .map(|r| r.micro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    let ends_below = rows[0].micro_f1 < top && rows[rows.len() - 1].micro_f1 < top;
    let sweep = outcome(
        ends_below,
        format!("F1 by fraction {table}; best {:.1}", best.fraction),
    );
    (learning, sweep)
}

fn run_cli(args: &[&str], dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_chainmask"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run chainmask");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let file = std::fs::read(dir.join("out")).unwrap_or_default();
    let _ = std::fs::remove_file(dir.join("out"));
    (out.stdout, file)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let invocations: &[&[&str]] = &[
        &["gen", "--n-instances", "150", "--seed", "3", "-o", "out"],
        &["solve", "data.jsonl", "-o", "out"],
        &[
            "solve",
            "data.jsonl",
            "--relaxed",
            "--budget-fraction",
            "0.4",
            "-o",
            "out",
        ],
        &[
            "tune-lambda",
            "data.jsonl",
            "--edge-bonus",
            "1.5",
            "-o",
            "out",
        ],
        &[
            "marginals",
            "data.jsonl",
            "--lambda",
            "0.7",
            "--temperature",
            "2",
            "-o",
            "out",
        ],
        &[
            "sample",
            "data.jsonl",
            "--seed",
            "7",
            "--samples",
            "200",
            "--keep-samples",
            "-o",
            "out",
        ],
        &[
            "train",
            "data.jsonl",
            "--epochs",
            "3",
            "--seed",
            "5",
            "-o",
            "out",
        ],
        &["eval", "data.jsonl", "--model", "model.json", "-o", "out"],
        &[
            "sweep-k",
            "data.jsonl",
            "--epochs",
            "2",
            "--fractions",
            "0.4,0.8",
            "-o",
            "out",
        ],
    ];
    let mut failures = Vec::new();
    for (i, args) in invocations.iter().enumerate() {
        let first = run_cli(args, d);
        let second = run_cli(args, d);
        if first != second || first.1.is_empty() {
            failures.push(args[0]);
        }
        if i == 0 {
            std::fs::write(d.join("data.jsonl"), &first.1).unwrap();
        }
        if args[0] == "train" {
            std::fs::write(d.join("model.json"), &first.1).unwrap();
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} invocations run twice, differing: {:?}",
            invocations.len(),
            failures
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("oracle equivalence", oracle_equivalence()),
        ("marginal exactness", marginal_exactness()),
        ("sampler fidelity", sampler_fidelity()),
        ("lagrangian soundness", lagrangian_soundness()),
        ("continuity monotonicity", continuity_monotonicity()),
        ("gradient fidelity", gradient_fidelity()),
    ];
    let (learning, sweep) = learning_and_sweep();
    results.push(("end-to-end learning", learning));
    results.push(("budget sweep shape", sweep));
    results.push(("cli determinism", cli_determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "[{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
