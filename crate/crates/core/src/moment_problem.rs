//! Sparse Hausdorff moment problem: recover a `k`-atom distribution (weights
//! and atom locations) from its power moments `nu_0 = 1, nu_1, .., nu_{2k-1}`.
//!
//! Two independent routes are provided. [`matrix_pencil`] takes the atoms as
//! generalized eigenvalues of the shifted Hankel pencil `(H1, H0)`. [`prony`]
//! solves for the annihilating polynomial and finds its roots with an
//! Aberth–Ehrlich iteration, so it shares no eigen-solver with the pencil.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::domain::{MixtureOfEffects, MomentSequence};
use crate::error::{Error, Result};
use crate::moments::CompensatedSum;

/// Stability report attached to a pencil solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PencilDiagnostics {
    pub hankel_sigma_min: f64,
    /// Smallest pairwise distance between recovered atoms (0 when `k = 1`).
    pub atom_separation: f64,
    /// Most negative weight before simplex projection, or 0.
    pub weight_negativity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PencilOptions {
    /// `H0` counts as degenerate when `sigma_min <= hankel_rel_tol * sigma_max`.
    pub hankel_rel_tol: f64,
    /// Imaginary parts below this are truncated; larger ones raise `ComplexAtoms`.
    pub imag_tol: f64,
}

impl Default for PencilOptions {
    fn default() -> Self {
        Self {
            hankel_rel_tol: 1e-13,
            imag_tol: 1e-6,
        }
    }
}

/// `k x k` Hankel matrix with entry `(i, j) = nu_{i+j+shift}`.
pub fn hankel(seq: &MomentSequence, shift: usize) -> Result<DMatrix<f64>> {
    let k = seq.k;
    if seq.values.len() != 2 * k - 1 {
        return Err(Error::LengthMismatch {
            expected: 2 * k - 1,
            found: seq.values.len(),
        });
    }
    if shift > 1 {
        return Err(Error::Config(format!("Hankel shift must be 0 or 1, got {shift}")));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| seq.nu(i + j + shift)))
}

fn checked_h0(seq: &MomentSequence, opts: &PencilOptions) -> Result<(DMatrix<f64>, f64)> {
    let h0 = hankel(seq, 0)?;
    let sv = h0.singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    if !(sigma_min > opts.hankel_rel_tol * sigma_max) {
        return Err(Error::DegenerateHankel { sigma_min });
    }
    Ok((h0, sigma_min))
}

fn real_atoms(roots: &[Complex64], imag_tol: f64) -> Result<Vec<f64>> {
    let max_imag = roots.iter().map(|r| r.im.abs()).fold(0.0, f64::max);
    if max_imag >= imag_tol {
        return Err(Error::ComplexAtoms { max_imag });
    }
    Ok(roots.iter().map(|r| r.re).collect())
}

fn separation(atoms: &[f64]) -> f64 {
    if atoms.len() < 2 {
        return 0.0;
    }
    let mut sorted = atoms.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

/// Solve `V w = (nu_0, .., nu_{k-1})` with `V_ij = atom_j^i`.
pub fn vandermonde_weights(atoms: &[f64], seq: &MomentSequence) -> Result<Vec<f64>> {
    let k = atoms.len();
    let v = DMatrix::from_fn(k, k, |i, j| atoms[j].powi(i as i32));
    let rhs = DVector::from_fn(k, |i, _| seq.nu(i));
    v.lu()
        .solve(&rhs)
        .filter(|w| w.iter().all(|x| x.is_finite()))
        .map(|w| w.iter().copied().collect())
        .ok_or(Error::DegenerateHankel { sigma_min: 0.0 })
}

/// Residuals `sum_j w_j e_j^l - nu_l` for `l = 0..2k-1`.
fn moment_residual(w: &[f64], e: &[f64], seq: &MomentSequence) -> DVector<f64> {
    DVector::from_fn(2 * w.len(), |l, _| {
        let mut acc = CompensatedSum::default();
        for (wj, ej) in w.iter().zip(e) {
            acc.add(wj * ej.powi(l as i32));
        }
        acc.add(-seq.nu(l));
        acc.value()
    })
}

/// Newton iterations on the full square system of `2k` moment equations,
/// keeping the iterate with the smallest residual.
fn polish(w: &mut Vec<f64>, e: &mut Vec<f64>, seq: &MomentSequence) {
    let k = w.len();
    let (mut cw, mut ce) = (w.clone(), e.clone());
    let mut best = moment_residual(w, e, seq).norm();
    for _ in 0..6 {
        let r = moment_residual(&cw, &ce, seq);
        let jac = DMatrix::from_fn(2 * k, 2 * k, |l, c| {
            if c < k {
                ce[c].powi(l as i32)
            } else if l == 0 {
                0.0
            } else {
                let j = c - k;
                l as f64 * cw[j] * ce[j].powi(l as i32 - 1)
            }
        });
        let Some(step) = jac.lu().solve(&r) else { return };
        if !step.iter().all(|v| v.is_finite()) {
            return;
        }
        for j in 0..k {
            cw[j] -= step[j];
            ce[j] -= step[k + j];
        }
        let norm = moment_residual(&cw, &ce, seq).norm();
        if norm < best {
            best = norm;
            w.clone_from(&cw);
            e.clone_from(&ce);
        }
    }
}

fn finish(
    mut atoms: Vec<f64>,
    seq: &MomentSequence,
    hankel_sigma_min: f64,
) -> Result<(MixtureOfEffects, PencilDiagnostics)> {
    let mut raw = vandermonde_weights(&atoms, seq)?;
    polish(&mut raw, &mut atoms, seq);
    let diagnostics = PencilDiagnostics {
        hankel_sigma_min,
        atom_separation: separation(&atoms),
        weight_negativity: raw.iter().copied().fold(0.0, f64::min),
    };
    let mixture = MixtureOfEffects::new(project_to_simplex(&raw), atoms)?;
    Ok((mixture, diagnostics))
}

/// Matrix pencil solve with default tolerances.
pub fn matrix_pencil(seq: &MomentSequence) -> Result<(MixtureOfEffects, PencilDiagnostics)> {
    matrix_pencil_with(seq, &PencilOptions::default())
}

pub fn matrix_pencil_with(
    seq: &MomentSequence,
    opts: &PencilOptions,
) -> Result<(MixtureOfEffects, PencilDiagnostics)> {
    let (h0, sigma_min) = checked_h0(seq, opts)?;
    let h1 = hankel(seq, 1)?;
    let atoms = match h0.clone().cholesky() {
        // Symmetric-definite pencil: reduce to L^-1 H1 L^-T, whose spectrum is real.
        Some(chol) => {
            let l = chol.l();
            let left = l
                .solve_lower_triangular(&h1)
                .ok_or(Error::DegenerateHankel { sigma_min })?;
            let c = l
                .solve_lower_triangular(&left.transpose())
                .ok_or(Error::DegenerateHankel { sigma_min })?;
            let c = (&c + c.transpose()) * 0.5;
            c.symmetric_eigenvalues().iter().copied().collect()
        }
        None => {
            let a = h0
                .lu()
                .solve(&h1)
                .ok_or(Error::DegenerateHankel { sigma_min })?;
            let roots: Vec<Complex64> = a
                .complex_eigenvalues()
                .iter()
                .map(|c| Complex64::new(c.re, c.im))
                .collect();
            real_atoms(&roots, opts.imag_tol)?
        }
    };
    finish(atoms, seq, sigma_min)
}

/// Prony's method with default tolerances.
pub fn prony(seq: &MomentSequence) -> Result<MixtureOfEffects> {
    prony_with(seq, &PencilOptions::default())
}

pub fn prony_with(seq: &MomentSequence, opts: &PencilOptions) -> Result<MixtureOfEffects> {
    let k = seq.k;
    let (h0, sigma_min) = checked_h0(seq, opts)?;
    // sum_j c_j nu_{i+j} = -nu_{i+k} for i = 0..k-1
    let rhs = DVector::from_fn(k, |i, _| -seq.nu(i + k));
    let c = h0
        .lu()
        .solve(&rhs)
        .ok_or(Error::DegenerateHankel { sigma_min })?;
    let mut monic: Vec<f64> = c.iter().copied().collect();
    monic.push(1.0);
    let roots = polynomial_roots(&monic);
    let atoms = real_atoms(&roots, opts.imag_tol)?;
    finish(atoms, seq, sigma_min).map(|(m, _)| m)
}

fn horner(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// All roots of `sum_i coeffs[i] x^i` (leading coefficient last, non-zero),
/// by simultaneous Aberth–Ehrlich iteration.
pub fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let degree = coeffs.len() - 1;
    let lead = coeffs[degree];
    let monic: Vec<f64> = coeffs.iter().map(|c| c / lead).collect();
    if degree == 0 {
        return Vec::new();
    }
    // Cauchy bound on root magnitude.
    let radius = 1.0 + monic[..degree].iter().map(|c| c.abs()).fold(0.0, f64::max);
    let mut z: Vec<Complex64> = (0..degree)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / degree as f64 + 0.4;
            Complex64::from_polar(0.5 * radius, angle)
        })
        .collect();
    for _ in 0..1000 {
        let mut max_step: f64 = 0.0;
        for i in 0..degree {
            let (p, dp) = horner(&monic, z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repulsion: Complex64 = (0..degree)
                .filter(|&j| j != i)
                .map(|j| (z[i] - z[j]).inv())
                .sum();
            let step = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            if step.is_finite() {
                z[i] -= step;
                max_step = max_step.max(step.norm() / (1.0 + z[i].norm()));
            }
        }
        if max_step < 1e-16 {
            break;
        }
    }
    z
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(w: &[f64]) -> Vec<f64> {
    if w.is_empty() {
        return Vec::new();
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    w.iter().map(|&v| (v - theta).max(0.0)).collect()
}
