//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with
//! `cargo test -p mipprune-core --test acceptance`.

mod common;

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mipprune::bounds::{check_soundness, propagate_batch};
use mipprune::data::{DatasetKind, DatasetSpec};
use mipprune::linalg::{conv_to_matrix, matvec};
use mipprune::mip::{encode_network, reference_assignment, Rescale};
use mipprune::network::{forward, Architecture};
use mipprune::pruner::*;
use mipprune::solver::lp::{self, LpStatus};
use mipprune::solver::{solve_mip, SolverConfig};
use mipprune::train::{evaluate, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const THRESHOLD: f64 = 0.2;
const LAMBDAS: [f64; 4] = [0.5, 1.0, 5.0, 25.0];
const RESCALE_THRESHOLD: f64 = 0.05;
const CLASSWISE_SMALL: f64 = 0.01;
const CLASSWISE_LARGE: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
    /// Serialized outputs, compared byte for byte by the determinism check.
    artifacts: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        artifacts: String::new(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect();
    parts.join("/")
}

fn experiment_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        arch: Architecture::mlp(2, &[16, 8], 4),
        data: DatasetSpec::new(DatasetKind::Blobs, 50, seed),
        test_per_class: 100,
        train: TrainConfig::default(),
        score: ScoreConfig::default(),
        batch_per_class: 1,
        threshold: THRESHOLD,
        seed,
    }
}

fn encoding_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut infeasible = 0;
    for _ in 0..20 {
        let net = common::random_conv_net(&mut rng);
        let batch = common::random_batch(&mut rng, &net);
        let bounds = propagate_batch(&net, &batch.inputs, 0.0).unwrap();
        let model = encode_network(&net, &batch, &bounds, 5.0, Rescale::Minus2).unwrap();
        let reference = reference_assignment(&model, &net, &batch).unwrap();
        if model.check_assignment(&reference, 1e-9).is_err() {
            infeasible += 1;
            continue;
        }
        let logits = common::pinned_logits(&model, &reference);
        for (k, x) in batch.inputs.iter().enumerate() {
            let expected = forward(&net, x, None).unwrap();
            for (a, b) in logits[k].iter().zip(expected.logits()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        infeasible == 0 && worst <= 1e-9,
        format!("20 conv nets, {infeasible} infeasible, max logit error {worst:.1e} (tol 1e-9)"),
    )
}

fn solver_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut milp_err: f64 = 0.0;
    for _ in 0..50 {
        let mut m = common::random_milp(&mut rng);
        let oracle = common::enumerate_milp(&m).unwrap();
        let s = solve_mip(&mut m, &SolverConfig::default(), None).unwrap();
        milp_err = milp_err.max((s.objective - oracle).abs());
    }
    let mut lp_err: f64 = 0.0;
    let mut status_mismatch = 0;
    for _ in 0..200 {
        let p = common::random_lp(&mut rng);
        let s = lp::solve(&p);
        match common::vertex_enumeration(&p) {
            Some(best) if s.status == LpStatus::Optimal => {
                lp_err = lp_err.max((s.objective - best).abs())
            }
            None if s.status == LpStatus::Infeasible => {}
            _ => status_mismatch += 1,
        }
    }
    outcome(
        milp_err <= 1e-6 && lp_err <= 1e-7 && status_mismatch == 0,
        format!(
            "50 MILPs max error {milp_err:.1e} (tol 1e-6), 200 LPs max error {lp_err:.1e} (tol 1e-7), {status_mismatch} status mismatches"
        ),
    )
}

fn bound_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for case in 0..20u64 {
        let net = if case % 2 == 0 {
            common::random_conv_net(&mut rng)
        } else {
            common::random_mlp(&mut rng, 3)
        };
        let x = common::uniform_vec(&mut rng, net.input_len(), 1.0);
        for eps in [0.0, 0.05] {
            violations += check_soundness(&net, &x, eps, 1000, case).unwrap();
        }
    }
    outcome(
        violations == 0,
        format!("20 nets x 2 radii x 1000 samples, {violations} violations"),
    )
}

fn toeplitz_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (kernels, spec, input) = common::random_conv_case(&mut rng);
        let m = conv_to_matrix(&kernels, &spec).unwrap();
        let lowered = matvec(&m, &input).unwrap();
        let direct = common::direct_conv(&kernels, &spec, &input);
        for (a, b) in lowered.iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-12, format!("200 configurations, max error {worst:.1e} (tol 1e-12)"))
}

fn maxpool_encoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let worst = (0..200)
        .map(|_| common::maxpool_fixing_error(&mut rng))
        .fold(0.0, f64::max);
    outcome(worst <= 1e-9, format!("200 fixings, max error {worst:.1e} (tol 1e-9)"))
}

fn pruning_order() -> Outcome {
    let (mut ours, mut random, mut critical, mut reference) = (vec![], vec![], vec![], vec![]);
    let mut artifacts = String::new();
    let mut ok_train = true;
    let mut ok_range = true;
    let mut slowest = Duration::ZERO;
    let mut prune = vec![];
    for seed in SEEDS {
        let cfg = experiment_config(seed);
        let p = prepare(&cfg).unwrap();
        ok_train &= evaluate(&p.net, &p.train, None).unwrap() >= 0.95;
        let (mut report, solution) = score(&p.net, &p.batch, &cfg.score).unwrap();
        slowest = slowest.max(solution.wall_time);
        report.threshold = Some(THRESHOLD);
        let tc = TrainConfig {
            seed: p.seeds.train,
            ..cfg.train
        };
        let r = compare(&p.net, &p.train, &p.test, &report, THRESHOLD, &tc, p.seeds).unwrap();
        ok_range &= (10.0..=40.0).contains(&r.prune_pct);
        ours.push(r.ours);
        random.push(r.random);
        critical.push(r.critical);
        reference.push(r.reference);
        prune.push(r.prune_pct / 100.0);
        artifacts.push_str(&report.to_text());
        artifacts.push_str(&serde_json::to_string(&r).unwrap());
    }
    let (o, ra, c, re) = (mean(&ours), mean(&random), mean(&critical), mean(&reference));
    let pass = ok_train
        && ok_range
        && o >= ra + 0.02
        && ra >= c
        && o >= re - 0.05
        && slowest < Duration::from_secs(60);
    Outcome {
        pass,
        detail: format!(
            "mean acc ours {:.1} random {:.1} critical {:.1} reference {:.1}; prune% {}; train>=95% {ok_train}; slowest solve {:.2}s (limit 60s)",
            100.0 * o,
            100.0 * ra,
            100.0 * c,
            100.0 * re,
            pct(&prune),
            slowest.as_secs_f64()
        ),
        artifacts,
    }
}

/// Prune percentage per setting, averaged over the seeds, on the trained
/// experiment networks.
fn sweep_means(settings: &[Setting], threshold: f64, artifacts: &mut String) -> Vec<f64> {
    let mut sums = vec![0.0; settings.len()];
    for seed in SEEDS {
        let cfg = experiment_config(seed);
        let p = prepare(&cfg).unwrap();
        let rows = sweep(&p.net, &p.batch, &p.test, &cfg.score, threshold, settings).unwrap();
        artifacts.push_str(&sweep_csv(&rows));
        for (s, r) in sums.iter_mut().zip(&rows) {
            *s += r.prune_pct;
        }
    }
    sums.iter().map(|s| s / SEEDS.len() as f64).collect()
}

fn lambda_direction() -> Outcome {
    let settings: Vec<Setting> = LAMBDAS.iter().map(|&l| Setting::Lambda(l)).collect();
    let mut artifacts = String::new();
    let means = sweep_means(&settings, THRESHOLD, &mut artifacts);
    let rho = spearman(&LAMBDAS, &means);
    Outcome {
        pass: rho <= 0.0,
        detail: format!("lambda {LAMBDAS:?} -> mean prune% {means:.2?}; spearman {rho:.3} (need <= 0)"),
        artifacts,
    }
}

fn rescale_direction() -> Outcome {
    let settings = [Setting::Rescale(Rescale::Minus2), Setting::Rescale(Rescale::None)];
    let mut artifacts = String::new();
    let means = sweep_means(&settings, RESCALE_THRESHOLD, &mut artifacts);
    Outcome {
        pass: means[0] >= means[1],
        detail: format!(
            "threshold {RESCALE_THRESHOLD}: mean prune% offset -2 {:.2}, offset 0 {:.2} (need -2 >= 0)",
            means[0], means[1]
        ),
        artifacts,
    }
}

fn classwise() -> Outcome {
    let (mut acc_idp, mut acc_sim, mut pr_idp, mut pr_sim) = (vec![], vec![], vec![], vec![]);
    let mut artifacts = String::new();
    for seed in SEEDS {
        let cfg = experiment_config(seed);
        let p = prepare(&cfg).unwrap();
        let mut run = |mode| {
            let r = score_classwise(&p.net, &p.train, cfg.batch_per_class, &cfg.score, mode, p.seeds.batch, 4)
                .unwrap();
            artifacts.push_str(&r.to_text());
            r
        };
        let idp = run(ClasswiseMode::Independent);
        let sim = run(ClasswiseMode::Simultaneous);
        for (report, acc, pr) in [(&idp, &mut acc_idp, &mut pr_idp), (&sim, &mut acc_sim, &mut pr_sim)] {
            let (small, _) = mask_from_scores(&p.net, report, CLASSWISE_SMALL).unwrap();
            acc.push(evaluate(&p.net, &p.test, Some(&small)).unwrap());
            let (large, _) = mask_from_scores(&p.net, report, CLASSWISE_LARGE).unwrap();
            pr.push(large.pruned_fraction());
        }
    }
    let diff = (mean(&acc_idp) - mean(&acc_sim)).abs();
    let (pi, ps) = (mean(&pr_idp), mean(&pr_sim));
    Outcome {
        pass: diff <= 0.03 && pi >= ps,
        detail: format!(
            "threshold {CLASSWISE_SMALL}: acc idp {:.1} sim {:.1} (|diff| <= 3); threshold {CLASSWISE_LARGE}: prune% idp {:.1} sim {:.1} (need idp >= sim)",
            100.0 * mean(&acc_idp),
            100.0 * mean(&acc_sim),
            100.0 * pi,
            100.0 * ps
        ),
        artifacts,
    }
}

fn transfer_check() -> Outcome {
    let (mut masked, mut reference, mut prune) = (vec![], vec![], vec![]);
    let mut artifacts = String::new();
    for seed in SEEDS {
        let cfg = TransferConfig {
            arch: Architecture::mlp(2, &[16, 8], 4),
            source: DatasetSpec::new(DatasetKind::Blobs, 50, seed),
            target: DatasetSpec::new(DatasetKind::Moons, 100, seed),
            test_per_class: 100,
            source_train: TrainConfig::default(),
            target_train: TrainConfig::default(),
            score: ScoreConfig::default(),
            batch_per_class: 1,
            threshold: THRESHOLD,
            seed,
        };
        let (r, report) = transfer(&cfg).unwrap();
        masked.push(r.masked);
        reference.push(r.reference);
        prune.push(r.prune_pct / 100.0);
        artifacts.push_str(&report.to_text());
        artifacts.push_str(&serde_json::to_string(&r).unwrap());
    }
    let gap = mean(&reference) - mean(&masked);
    let min_prune = prune.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome {
        pass: gap <= 0.05 && min_prune >= 0.10,
        detail: format!(
            "blobs -> moons: mean acc masked {:.1} reference {:.1}; prune% {}",
            100.0 * mean(&masked),
            100.0 * mean(&reference),
            pct(&prune)
        ),
        artifacts,
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let net = if case % 2 == 0 {
            common::random_conv_net(&mut rng)
        } else {
            common::random_mlp(&mut rng, 3)
        };
        let batch = common::random_batch(&mut rng, &net);
        worst = worst.max(common::gradient_check(&net, &batch.inputs, &batch.labels, 1e-6, 1e-6));
    }
    outcome(
        worst <= 1e-4,
        format!("dense, conv and avg-pool nets, max relative error {worst:.1e} (tol 1e-4)"),
    )
}

type Check = fn() -> Outcome;

const EXPERIMENTS: [(usize, Check); 5] = [
    (6, pruning_order),
    (7, lambda_direction),
    (8, rescale_direction),
    (9, classwise),
    (10, transfer_check),
];

fn determinism(first: &[String]) -> Outcome {
    let mut mismatched = Vec::new();
    for ((id, f), before) in EXPERIMENTS.iter().zip(first) {
        if f().artifacts != *before {
            mismatched.push(*id);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("reran criteria 6-10, byte mismatches in {mismatched:?}"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, limit: Option<u64>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs < l as f64);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let mut line = format!("criterion {id:>2}: {} {}", if pass { "PASS" } else { "FAIL" }, o.detail);
        match limit {
            Some(l) => write!(line, " [{secs:.2}s, limit {l}s]").unwrap(),
            None => write!(line, " [{secs:.2}s]").unwrap(),
        }
        println!("{line}");
        o.artifacts
    };

    report(1, Some(10), &mut encoding_fidelity);
    report(2, Some(60), &mut solver_exactness);
    report(3, Some(10), &mut bound_soundness);
    report(4, Some(5), &mut toeplitz_correctness);
    report(5, Some(30), &mut maxpool_encoding);
    let limits = [None, Some(300), Some(300), Some(300), Some(300)];
    let mut first = Vec::new();
    for ((id, f), limit) in EXPERIMENTS.iter().zip(limits) {
        first.push(report(*id, limit, &mut || f()));
    }
    report(11, Some(10), &mut gradient_check);
    report(12, None, &mut || determinism(&first));

    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}
