#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use spo_core::baseline::{cp_als, mte_error, tv_distance, JointTensor};
use spo_core::moment_problem::{matrix_pencil, project_to_simplex};
use spo_core::spo::{ate, SpoOptions, SpoSolver};
use spo_core::synthetic::{exact_bundle, exact_ground_truth, FeatureCoding, JointTable, ModelSpec};
use spo_core::{MixtureOfEffects, MomentBundle, MomentSequence};

pub fn config(cases: u32, seed: u64) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(seed),
        failure_persistence: None,
        ..Config::default()
    }
}

/// `nu_l = sum_j w_j e_j^l`, `l = 1..2k-1`, summed in the given order.
pub fn forward(w: &[f64], e: &[f64]) -> MomentSequence {
    let k = w.len();
    let values = (1..2 * k as i32)
        .map(|l| w.iter().zip(e).map(|(wj, ej)| wj * ej.powi(l)).sum())
        .collect();
    MomentSequence::new(k, values).unwrap()
}

/// Largest deviation between a recovered mixture and `(w, e)` after sorting
/// the truth by effect.
pub fn max_param_error(w: &[f64], e: &[f64], got: &MixtureOfEffects) -> f64 {
    let mut truth: Vec<(f64, f64)> = e.iter().copied().zip(w.iter().copied()).collect();
    truth.sort_by(|a, b| a.0.total_cmp(&b.0));
    truth
        .iter()
        .enumerate()
        .map(|(j, (ej, wj))| (ej - got.effects[j]).abs().max((wj - got.weights[j]).abs()))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &MixtureOfEffects, b: &MixtureOfEffects) -> f64 {
    a.weights
        .iter()
        .zip(&b.weights)
        .chain(a.effects.iter().zip(&b.effects))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Mixtures with `k` in 1..=4, effects in [-1, 1] at least 0.05 apart,
/// weights at least 0.05.
pub fn arb_mixture() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|k| {
        (
            prop::collection::vec(0.0f64..1.0, k),
            prop::collection::vec(-1.0f64..1.0, k),
        )
            .prop_filter("atoms closer than 0.05", |(_, e)| {
                let mut s = e.clone();
                s.sort_by(f64::total_cmp);
                s.windows(2).all(|p| p[1] - p[0] >= 0.05)
            })
            .prop_map(|(raw, e)| {
                let k = raw.len() as f64;
                let total: f64 = raw.iter().sum::<f64>().max(1e-12);
                let w = raw.iter().map(|r| 0.05 + (1.0 - 0.05 * k) * r / total).collect();
                (w, e)
            })
    })
}

fn table(rows: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, 2, vals)
}

/// Two-class model with one binary Z and one binary X (one-hot), arbitrary
/// tables bounded away from 0 and 1.
pub fn arb_spec() -> impl Strategy<Value = ModelSpec> {
    (
        0.2f64..0.8,
        prop::array::uniform2(0.1f64..0.9),
        prop::array::uniform2(0.1f64..0.9),
        prop::array::uniform4(0.1f64..0.9),
        prop::array::uniform4(0.05f64..0.95),
        prop::array::uniform4(0.05f64..0.95),
    )
        .prop_filter("proxies must separate the classes", |(_, pz, px, ..)| {
            (pz[0] - pz[1]).abs() > 0.1 && (px[0] - px[1]).abs() > 0.1
        })
        .prop_map(|(pu, pz, px, pt, y0, y1)| ModelSpec {
            k: 2,
            p_u: vec![pu, 1.0 - pu],
            p_z_given_u: table(1, &pz),
            p_x_given_u: table(1, &px),
            p_t_given_zu: table(2, &pt),
            p_y0_given_xu: table(2, &y0),
            p_y1_given_xu: table(2, &y1),
            z_coding: FeatureCoding::OneHot,
            x_coding: FeatureCoding::OneHot,
        })
}

/// Invertible `d x d` matrices with condition number below 50.
pub fn arb_transform(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, d * d)
        .prop_map(move |v| DMatrix::from_row_slice(d, d, &v) + DMatrix::identity(d, d) * 1.5)
        .prop_filter("ill-conditioned transform", |a| {
            let sv = a.singular_values();
            sv.min() > 0.0 && sv.max() / sv.min() < 50.0
        })
}

fn gammas(bundle: &MomentBundle, orders: usize) -> Vec<DVector<f64>> {
    let solver = SpoSolver::new(bundle, SpoOptions::default()).unwrap();
    let mut c = solver.first().unwrap();
    let mut out = vec![c.gamma.clone()];
    for _ in 1..orders {
        c = solver.next(&c).unwrap();
        out.push(c.gamma.clone());
    }
    out
}

// Each check returns `Err(description)` on violation so both the proptest
// suites and the acceptance runner can drive it.

pub fn check_z_reparameterization(spec: &ModelSpec, a: &DMatrix<f64>) -> Result<(), String> {
    let b = exact_bundle(spec).map_err(|e| e.to_string())?;
    let base = gammas(&b, 3);
    let moved = gammas(&b.transform_z(a), 3);
    for (l, (g, h)) in base.iter().zip(&moved).enumerate() {
        let diff = (g - h).amax();
        if diff > 1e-9 {
            return Err(format!("gamma^({}) moved by {diff:e}", l + 1));
        }
    }
    Ok(())
}

/// `E[Y|T=1] - E[Y|T=0]` straight from the joint table.
pub fn naive_contrast(joint: &JointTable) -> f64 {
    let mut p = [[0.0; 2]; 2];
    for u in 0..joint.k {
        for z in 0..joint.z_levels {
            for x in 0..joint.x_levels {
                for t in 0..2 {
                    for y in 0..2 {
                        p[t][y] += joint.get(u, z, x, t, y);
                    }
                }
            }
        }
    }
    p[1][1] / (p[1][0] + p[1][1]) - p[0][1] / (p[0][0] + p[0][1])
}

pub fn check_rct_consistency(spec: &ModelSpec, pt: f64) -> Result<(), String> {
    let mut spec = spec.clone();
    spec.p_t_given_zu = DMatrix::from_element(spec.p_t_given_zu.nrows(), spec.k, pt);
    let truth = exact_ground_truth(&spec).map_err(|e| e.to_string())?;
    let est = ate(&exact_bundle(&spec).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let naive = naive_contrast(&truth.joint);
    if (est - naive).abs() > 1e-10 {
        return Err(format!("ATE {est} vs contrast {naive}"));
    }
    Ok(())
}

pub fn check_als_monotone(t: &JointTensor, k: usize, seed: u64) -> Result<(), String> {
    let fit = cp_als(t, k, 1, seed).map_err(|e| e.to_string())?;
    for (i, w) in fit.history.windows(2).enumerate() {
        if w[1] > w[0] + 1e-12 {
            return Err(format!("residual rose at sweep {}: {} -> {}", i + 1, w[0], w[1]));
        }
    }
    Ok(())
}

fn on_simplex(w: &[f64], tol: f64) -> bool {
    w.iter().all(|&v| v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Simplex projection, CP factor normalization, and pencil output weights.
pub fn check_simplex_constraints(raw: &[f64], t: &JointTensor, seed: u64) -> Result<(), String> {
    let p = project_to_simplex(raw);
    if !on_simplex(&p, 1e-12) {
        return Err(format!("projection {p:?} not on the simplex"));
    }
    let fit = cp_als(t, 2, 2, seed).map_err(|e| e.to_string())?;
    let f = &fit.factors;
    if !on_simplex(&f.weights, 1e-12) {
        return Err(format!("CP weights {:?}", f.weights));
    }
    for m in [&f.f_z, &f.f_x, &f.f_s] {
        for c in m.column_iter() {
            if !on_simplex(c.as_slice(), 1e-9) {
                return Err(format!("factor column {:?} is not a distribution", c.as_slice()));
            }
        }
    }
    Ok(())
}

pub fn check_permutation_canonicalization(w: &[f64], e: &[f64], perm: &[usize]) -> Result<(), String> {
    let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
    let pe: Vec<f64> = perm.iter().map(|&i| e[i]).collect();
    let a = MixtureOfEffects::new(w.to_vec(), e.to_vec()).unwrap();
    let b = MixtureOfEffects::new(pw.clone(), pe.clone()).unwrap();
    if a != b {
        return Err("canonical form depends on input order".into());
    }
    let (ra, _) = matrix_pencil(&forward(w, e)).map_err(|e| e.to_string())?;
    let (rb, _) = matrix_pencil(&forward(&pw, &pe)).map_err(|e| e.to_string())?;
    if ra.effects.windows(2).any(|p| p[0] > p[1]) {
        return Err(format!("effects not ascending: {:?}", ra.effects));
    }
    let d = max_abs_diff(&ra, &rb);
    if d > 1e-8 {
        return Err(format!("permuted input moved the recovery by {d:e}"));
    }
    if mte_error(&a, &rb).map_err(|e| e.to_string())? > 1e-12 {
        return Err("recovered mixture does not match the permuted truth".into());
    }
    Ok(())
}

pub fn check_determinism(spec: &ModelSpec, seed: u64) -> Result<(), String> {
    use spo_core::moments::estimate_bundle;
    use spo_core::synthetic::sample;
    let d1 = sample(spec, 300, seed);
    let d2 = sample(spec, 300, seed);
    if d1 != d2 {
        return Err("sampler is not deterministic".into());
    }
    if exact_bundle(spec).unwrap() != exact_bundle(spec).unwrap() {
        return Err("oracle bundle is not deterministic".into());
    }
    let b1 = estimate_bundle(&d1).map_err(|e| e.to_string())?;
    let b2 = estimate_bundle(&d2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("moment estimates are not deterministic".into());
    }
    let truth = exact_ground_truth(spec).unwrap();
    let t = JointTensor::from_joint(&truth.joint);
    let f1 = cp_als(&t, 2, 2, seed).unwrap();
    let f2 = cp_als(&t, 2, 2, seed).unwrap();
    if f1 != f2 {
        return Err("CP fit is not deterministic".into());
    }
    if tv_distance(&truth.joint, &f1.factors).unwrap() != tv_distance(&truth.joint, &f2.factors).unwrap() {
        return Err("TV distance is not deterministic".into());
    }
    Ok(())
}
