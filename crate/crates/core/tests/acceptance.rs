//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::TestRunner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use spo_core::baseline::{ate_error, mte_error, JointTensor};
use spo_core::experiment::{sweep, ExperimentConfig, ModelConfig, SweepTable};
use spo_core::moment_problem::{matrix_pencil, prony};
use spo_core::moments::estimate_bundle;
use spo_core::spo::{ate, ate_via_pseudoinverse, recover_mte};
use spo_core::synthetic::{exact_bundle, exact_ground_truth, paper_model, sample};
use spo_core::MixtureOfEffects;

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn sweep_config(model: ModelConfig, n: usize, runs: usize, levels: Vec<u8>) -> ExperimentConfig {
    ExperimentConfig {
        model,
        n,
        runs,
        seed: 20240601,
        levels,
        k: 2,
        output: PathBuf::from("unused"),
        restarts: 10,
        threads: None,
    }
}

fn mean_at(table: &SweepTable, mu_zt: f64, mu_xy: f64, level: u8) -> (f64, usize) {
    let row = table.row(Some(mu_zt), Some(mu_xy), level).expect("row present");
    (row.mean.unwrap_or(f64::NAN), row.failures)
}

fn c1_exact_mte() -> Verdict {
    let (m, _) = recover_mte(&exact_bundle(&paper_model(1.0, 0.0).unwrap()).unwrap(), 2).unwrap();
    let want = MixtureOfEffects::new(vec![0.5, 0.5], vec![-0.75, 0.75]).unwrap();
    let dev = max_abs_diff(&m, &want);
    verdict(dev <= 1e-9, format!("weights {:?}, effects {:?}, max deviation {dev:.2e} (tol 1e-9)", m.weights, m.effects))
}

fn c2_exact_ate() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, mu_xy) in [("B", 0.0), ("C", 1.0)] {
        let b = exact_bundle(&paper_model(1.0, mu_xy).unwrap()).unwrap();
        let (sq, pi) = (ate(&b).unwrap(), ate_via_pseudoinverse(&b).unwrap());
        worst = worst.max(sq.abs()).max(pi.abs());
        parts.push(format!("model {name}: inverse {sq:.1e}, pseudoinverse {pi:.1e}"));
    }
    verdict(worst < 1e-10, format!("{} (tol 1e-10)", parts.join("; ")))
}

fn c3_identifiability_failure() -> Verdict {
    let err_at = |mu_xy: f64| {
        let spec = paper_model(1.0, mu_xy).unwrap();
        let truth = exact_ground_truth(&spec).unwrap();
        let b = exact_bundle(&spec).unwrap();
        let (m, _) = recover_mte(&b, 2).unwrap();
        (
            mte_error(&truth.mte, &m).unwrap(),
            ate_error(truth.ate, ate(&b).unwrap()),
            truth.mte,
        )
    };
    let (mte_b, ate_b, _) = err_at(0.0);
    let (mte_c, ate_c, truth_c) = err_at(1.0);
    let truth_ok = max_abs_diff(&truth_c, &MixtureOfEffects::new(vec![0.5, 0.5], vec![-0.375, 0.375]).unwrap()) < 1e-15;
    let pass = truth_ok && mte_c > 10.0 * mte_b && ate_b < 1e-10 && ate_c < 1e-10;
    verdict(
        pass,
        format!("mte error (1,1) {mte_c:.4e} vs (1,0) {mte_b:.2e}; ate error {ate_b:.1e}, {ate_c:.1e}; truth at (1,1) {:?}", truth_c.effects),
    )
}

fn c4_mu_zt_sweep() -> Verdict {
    let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let cfg = sweep_config(
        ModelConfig::Paper { mu_zt: grid, mu_xy: vec![0.0] },
        1000,
        100,
        vec![2, 3],
    );
    let t = sweep(&cfg).unwrap();
    let (mte0, f0) = mean_at(&t, 0.0, 0.0, 3);
    let (mte1, f1) = mean_at(&t, 1.0, 0.0, 3);
    let (tv0, g0) = mean_at(&t, 0.0, 0.0, 2);
    let (tv1, g1) = mean_at(&t, 1.0, 0.0, 2);
    let pass = mte1 <= 3.0 * mte0 && tv1 >= 2.0 * tv0;
    verdict(
        pass,
        format!(
            "mean mte error {mte0:.4} -> {mte1:.4} (ratio {:.2}, need <= 3); mean tv {tv0:.4} -> {tv1:.4} (ratio {:.2}, need >= 2); failures mte {f0}/{f1}, tv {g0}/{g1}",
            mte1 / mte0,
            tv1 / tv0
        ),
    )
}

fn c5_mu_xy_sweep() -> Verdict {
    let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let cfg = sweep_config(
        ModelConfig::Paper { mu_zt: vec![1.0], mu_xy: grid },
        1000,
        100,
        vec![3, 4],
    );
    let t = sweep(&cfg).unwrap();
    let (ate0, f0) = mean_at(&t, 1.0, 0.0, 4);
    let (ate1, f1) = mean_at(&t, 1.0, 1.0, 4);
    let (mte0, g0) = mean_at(&t, 1.0, 0.0, 3);
    let (mte1, g1) = mean_at(&t, 1.0, 1.0, 3);
    let pass = ate1 <= 3.0 * ate0 && mte1 >= 2.0 * mte0;
    verdict(
        pass,
        format!(
            "mean ate error {ate0:.2e} -> {ate1:.2e} (ratio {:.2}, need <= 3); mean mte error {mte0:.4} -> {mte1:.4} (ratio {:.2}, need >= 2); failures ate {f0}/{f1}, mte {g0}/{g1}",
            ate1 / ate0,
            mte1 / mte0
        ),
    )
}

fn c6_appendix_ate() -> Verdict {
    let cfg = sweep_config(ModelConfig::Appendix1, 100_000, 100, vec![4]);
    let t = sweep(&cfg).unwrap();
    let est: Vec<f64> = t.records.iter().filter_map(|r| r.ate_estimate).collect();
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let inside = est.iter().filter(|a| (*a - 0.25).abs() <= 0.05).count();
    let pass = est.len() == 100 && (mean - 0.25).abs() <= 0.01 && inside >= 95;
    verdict(pass, format!("{} estimates, mean {mean:.4} (truth 0.25, tol 0.01), {inside}/100 within 0.05 (need 95)", est.len()))
}

fn c7_appendix_mte() -> Verdict {
    let cfg = sweep_config(ModelConfig::Appendix2, 500_000, 20, vec![3]);
    let t = sweep(&cfg).unwrap();
    let good = t
        .records
        .iter()
        .filter_map(|r| r.mte_estimate.as_ref())
        .filter(|m| (m.effects[0] - 0.0).abs() <= 0.1 && (m.effects[1] - 0.5).abs() <= 0.1)
        .count();
    let effects: Vec<String> = t
        .records
        .iter()
        .take(3)
        .map(|r| match &r.mte_estimate {
            Some(m) => format!("({:.3}, {:.3})", m.effects[0], m.effects[1]),
            None => "failed".into(),
        })
        .collect();
    verdict(good >= 16, format!("{good}/20 runs with both effects within 0.1 of (0, 0.5) (need 16); first runs {}", effects.join(" ")))
}

fn c8_moment_round_trip() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let (mut worst_pencil, mut worst_prony, mut worst_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut errors = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=4usize);
        let e: Vec<f64> = loop {
            let e: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut s = e.clone();
            s.sort_by(f64::total_cmp);
            if s.windows(2).all(|p| p[1] - p[0] >= 0.05) {
                break e;
            }
        };
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| 0.05 + (1.0 - 0.05 * k as f64) * r / total).collect();
        let seq = forward(&w, &e);
        match (matrix_pencil(&seq), prony(&seq)) {
            (Ok((a, _)), Ok(b)) => {
                worst_pencil = worst_pencil.max(max_param_error(&w, &e, &a));
                worst_prony = worst_prony.max(max_param_error(&w, &e, &b));
                worst_gap = worst_gap.max(max_abs_diff(&a, &b));
            }
            _ => errors += 1,
        }
    }
    let pass = errors == 0 && worst_pencil <= 1e-8 && worst_prony <= 1e-8 && worst_gap <= 1e-6;
    verdict(
        pass,
        format!("worst error pencil {worst_pencil:.2e}, prony {worst_prony:.2e} (tol 1e-8); worst disagreement {worst_gap:.2e} (tol 1e-6); {errors} solver errors"),
    )
}

fn c9_convergence_rate() -> Verdict {
    let spec = paper_model(1.0, 0.0).unwrap();
    let sizes = [1_000usize, 10_000, 100_000];
    let mut medians = Vec::new();
    let mut failures = 0;
    for &n in &sizes {
        let mut errs: Vec<f64> = (0..50u64)
            .filter_map(|s| {
                let r = estimate_bundle(&sample(&spec, n, 9_000 + s)).and_then(|b| ate(&b));
                if r.is_err() {
                    failures += 1;
                }
                r.ok().map(f64::abs)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let m = errs.len();
        medians.push(if m % 2 == 1 { errs[m / 2] } else { 0.5 * (errs[m / 2 - 1] + errs[m / 2]) });
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    verdict(
        (-0.7..=-0.3).contains(&slope),
        format!("median |ATE error| {:.2e}, {:.2e}, {:.2e}; log-log slope {slope:.3} (need [-0.7, -0.3]); {failures} failed runs", medians[0], medians[1], medians[2]),
    )
}

fn run_property<S: Strategy>(
    name: &str,
    cases: u32,
    seed: u64,
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), String>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(config(cases, seed));
    runner
        .run(&strategy, |v| check(v).map_err(TestCaseError::fail))
        .map_err(|e| format!("{name}: {e}"))
}

fn c10_invariants() -> Verdict {
    let model_a = JointTensor::from_joint(&exact_ground_truth(&paper_model(0.0, 0.0).unwrap()).unwrap().joint);
    let results = [
        run_property("z-reparameterization", 64, 101, (arb_spec(), arb_transform(2)), |(s, a)| {
            check_z_reparameterization(&s, &a)
        }),
        run_property("rct consistency", 64, 102, (arb_spec(), 0.1f64..0.9), |(s, p)| check_rct_consistency(&s, p)),
        run_property("als monotonicity", 32, 103, (arb_spec(), 1usize..=3, any::<u64>()), |(s, k, seed)| {
            check_als_monotone(&JointTensor::from_joint(&exact_ground_truth(&s).unwrap().joint), k, seed)
        }),
        run_property(
            "simplex constraints",
            32,
            104,
            (prop::collection::vec(-2.0f64..2.0, 1..6), any::<u64>()),
            |(raw, seed)| check_simplex_constraints(&raw, &model_a, seed),
        ),
        run_property(
            "permutation canonicalization",
            64,
            105,
            arb_mixture().prop_flat_map(|(w, e)| {
                let k = w.len();
                (Just(w), Just(e), Just((0..k).collect::<Vec<_>>()).prop_shuffle())
            }),
            |(w, e, perm)| check_permutation_canonicalization(&w, &e, &perm),
        ),
        run_property("determinism", 16, 106, (arb_spec(), any::<u64>()), |(s, seed)| check_determinism(&s, seed)),
    ];
    let failed: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    if failed.is_empty() {
        verdict(true, "z-reparameterization, rct consistency, als monotonicity, simplex constraints, permutation canonicalization, determinism".into())
    } else {
        verdict(false, failed.join(" | "))
    }
}

type Criterion = (u8, &'static str, Duration, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "exact MTE recovery, model B", Duration::from_secs(1), c1_exact_mte),
        (2, "exact ATE, models B and C, both paths", Duration::from_secs(1), c2_exact_ate),
        (3, "identifiability failure separation", Duration::from_secs(1), c3_identifiability_failure),
        (4, "mu_zt sweep trend", Duration::from_secs(300), c4_mu_zt_sweep),
        (5, "mu_xy sweep trend", Duration::from_secs(300), c5_mu_xy_sweep),
        (6, "four-covariate model ATE histogram", Duration::from_secs(180), c6_appendix_ate),
        (7, "four-covariate model MTE separation", Duration::from_secs(300), c7_appendix_mte),
        (8, "moment problem round trip", Duration::from_secs(30), c8_moment_round_trip),
        (9, "ATE convergence rate", Duration::from_secs(120), c9_convergence_rate),
        (10, "invariant suite", Duration::from_secs(120), c10_invariants),
    ];
    let mut all = true;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = v.pass && in_time;
        all &= pass;
        println!(
            "criterion {id:>2} {}: {name}; {}; {:.2}s (budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
