//! Full-mixture baseline: rank-`k` CP decomposition of the joint probability
//! tensor `P(Z, X, (T, Y))` by alternating least squares, read as
//! `P(U) P(Z|U) P(X|U) P(T,Y|U)`. Also the evaluation metrics used by the
//! experiment harness.
//!
//! The `(T, Y)` axis is indexed by `s = 2t + y`.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{row_major, Dataset, MixtureOfEffects};
use crate::error::{Error, Result};
use crate::moment_problem::project_to_simplex;
use crate::moments::CompensatedSum;
use crate::synthetic::{FeatureCoding, JointTable};

pub const ALS_MAX_ITER: usize = 500;
pub const ALS_REL_TOL: f64 = 1e-9;
pub const ALS_RESTARTS: usize = 10;

/// Empirical or population distribution over `(z, x, s)` configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTensor {
    pub dims: (usize, usize, usize),
    pub values: Vec<f64>,
}

impl JointTensor {
    pub fn zeros(z_levels: usize, x_levels: usize) -> Self {
        Self {
            dims: (z_levels, x_levels, 4),
            values: vec![0.0; z_levels * x_levels * 4],
        }
    }

    pub fn index(&self, z: usize, x: usize, s: usize) -> usize {
        (z * self.dims.1 + x) * self.dims.2 + s
    }

    pub fn get(&self, z: usize, x: usize, s: usize) -> f64 {
        self.values[self.index(z, x, s)]
    }

    pub fn total(&self) -> f64 {
        let mut acc = CompensatedSum::default();
        self.values.iter().for_each(|&v| acc.add(v));
        acc.value()
    }

    /// Marginalize `U` out of a population table.
    pub fn from_joint(joint: &JointTable) -> Self {
        let mut out = Self::zeros(joint.z_levels, joint.x_levels);
        for u in 0..joint.k {
            for z in 0..joint.z_levels {
                for x in 0..joint.x_levels {
                    for t in 0..2 {
                        for y in 0..2 {
                            let i = out.index(z, x, 2 * t + y);
                            out.values[i] += joint.get(u, z, x, t, y);
                        }
                    }
                }
            }
        }
        out
    }

    fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Per-class factors of a CP fit, normalized to distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFactors {
    pub weights: Vec<f64>,
    #[serde(with = "row_major::matrix")]
    pub f_z: DMatrix<f64>,
    #[serde(with = "row_major::matrix")]
    pub f_x: DMatrix<f64>,
    #[serde(with = "row_major::matrix")]
    pub f_s: DMatrix<f64>,
}

impl MixtureFactors {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `sum_u w_u f_z[z,u] f_x[x,u] f_s[s,u]`.
    pub fn tensor(&self) -> JointTensor {
        let mut out = JointTensor::zeros(self.f_z.nrows(), self.f_x.nrows());
        for z in 0..self.f_z.nrows() {
            for x in 0..self.f_x.nrows() {
                for s in 0..4 {
                    let i = out.index(z, x, s);
                    out.values[i] = (0..self.k())
                        .map(|u| self.weights[u] * self.f_z[(z, u)] * self.f_x[(x, u)] * self.f_s[(s, u)])
                        .sum();
                }
            }
        }
        out
    }

    /// `E[Y|T=1,U] - E[Y|T=0,U]` read off the `(T, Y)` factor.
    pub fn implied_effects(&self) -> Vec<f64> {
        (0..self.k())
            .map(|u| {
                let c = self.f_s.column(u);
                let cond = |t: usize| {
                    let m = c[2 * t] + c[2 * t + 1];
                    if m > 0.0 {
                        c[2 * t + 1] / m
                    } else {
                        0.0
                    }
                };
                cond(1) - cond(0)
            })
            .collect()
    }
}

/// Result of [`cp_als`]: the best restart plus its convergence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpFit {
    pub factors: MixtureFactors,
    /// Frobenius residual of the raw (unclipped) fit.
    pub residual: f64,
    /// False when the best restart hit the iteration cap before stabilizing.
    pub converged: bool,
    pub iterations: usize,
    /// Residual after initialization and after every sweep of the best restart.
    pub history: Vec<f64>,
}

fn block_configs(
    m: &DMatrix<f64>,
    prefix: &str,
    coding: Option<FeatureCoding>,
) -> Result<(Vec<usize>, usize)> {
    let (n, d) = m.shape();
    for i in 0..n {
        for j in 0..d {
            let v = m[(i, j)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryData {
                    column: format!("{prefix}{}", j + 1),
                    row: i,
                });
            }
        }
    }
    let one_hot_rows = (0..n).all(|i| m.row(i).sum() == 1.0);
    let coding = coding.unwrap_or(if d >= 2 && one_hot_rows {
        FeatureCoding::OneHot
    } else {
        FeatureCoding::Direct
    });
    match coding {
        FeatureCoding::OneHot => {
            if let Some(row) = (0..n).find(|&i| m.row(i).sum() != 1.0) {
                return Err(Error::NonBinaryData {
                    column: format!("{prefix}*"),
                    row,
                });
            }
            let configs = (0..n)
                .map(|i| (0..d).position(|j| m[(i, j)] == 1.0).unwrap_or(0))
                .collect();
            Ok((configs, d))
        }
        FeatureCoding::Direct => {
            if d >= usize::BITS as usize - 1 {
                return Err(Error::DimensionMismatch(format!("{d} binary covariates is too many")));
            }
            let configs = (0..n)
                .map(|i| (0..d).map(|c| (m[(i, c)] as usize) << c).sum())
                .collect();
            Ok((configs, 1 << d))
        }
    }
}

/// Frequency tensor of a dataset. Each feature block is read as one-hot when
/// every row has exactly one indicator set (and the block has at least two
/// columns), otherwise as independent binary covariates.
pub fn joint_tensor(d: &Dataset) -> Result<JointTensor> {
    joint_tensor_coded(d, None, None)
}

/// As [`joint_tensor`] with the block codings fixed by the caller.
pub fn joint_tensor_coded(
    d: &Dataset,
    z_coding: Option<FeatureCoding>,
    x_coding: Option<FeatureCoding>,
) -> Result<JointTensor> {
    let n = d.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (zc, zl) = block_configs(&d.z, "z", z_coding)?;
    let (xc, xl) = block_configs(&d.x, "x", x_coding)?;
    let mut counts = vec![0usize; zl * xl * 4];
    let mut out = JointTensor::zeros(zl, xl);
    for i in 0..n {
        let bit = |v: f64, column: &str| match v {
            v if v == 0.0 => Ok(0),
            v if v == 1.0 => Ok(1),
            _ => Err(Error::NonBinaryData {
                column: column.to_string(),
                row: i,
            }),
        };
        let s = 2 * bit(d.t[i], "t")? + bit(d.y[i], "y")?;
        counts[out.index(zc[i], xc[i], s)] += 1;
    }
    for (v, c) in out.values.iter_mut().zip(counts) {
        *v = c as f64 / n as f64;
    }
    Ok(out)
}

struct Factors {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl Factors {
    fn model(&self, z: usize, x: usize, s: usize) -> f64 {
        (0..self.a.ncols())
            .map(|r| self.a[(z, r)] * self.b[(x, r)] * self.c[(s, r)])
            .sum()
    }

    fn residual(&self, t: &JointTensor) -> f64 {
        let mut acc = CompensatedSum::default();
        for z in 0..t.dims.0 {
            for x in 0..t.dims.1 {
                for s in 0..t.dims.2 {
                    let e = t.get(z, x, s) - self.model(z, x, s);
                    acc.add(e * e);
                }
            }
        }
        acc.value().max(0.0).sqrt()
    }
}

/// Least-squares update of one mode given the other two.
/// `mode` 0 updates `a`, 1 updates `b`, 2 updates `c`.
fn update(t: &JointTensor, f: &mut Factors, mode: usize) {
    let k = f.a.ncols();
    let (p, q, rows) = match mode {
        0 => (&f.b, &f.c, t.dims.0),
        1 => (&f.a, &f.c, t.dims.1),
        _ => (&f.a, &f.b, t.dims.2),
    };
    let gram = (p.transpose() * p).component_mul(&(q.transpose() * q));
    let mut mttkrp = DMatrix::<f64>::zeros(rows, k);
    for z in 0..t.dims.0 {
        for x in 0..t.dims.1 {
            for s in 0..t.dims.2 {
                let v = t.get(z, x, s);
                if v == 0.0 {
                    continue;
                }
                let (row, i, j) = match mode {
                    0 => (z, x, s),
                    1 => (x, z, s),
                    _ => (s, z, x),
                };
                for r in 0..k {
                    mttkrp[(row, r)] += v * p[(i, r)] * q[(j, r)];
                }
            }
        }
    }
    let svd = gram.svd(true, true);
    let eps = svd.singular_values.max() * 1e-15 * k as f64;
    let pinv = svd.pseudo_inverse(eps).unwrap_or_else(|_| DMatrix::zeros(k, k));
    let new = mttkrp * pinv;
    match mode {
        0 => f.a = new,
        1 => f.b = new,
        _ => f.c = new,
    }
}

/// Move column norms of `a` and `b` into `c`; the model is unchanged.
fn rebalance(f: &mut Factors) {
    for r in 0..f.a.ncols() {
        for m in [&mut f.a, &mut f.b] {
            let norm = m.column(r).norm();
            if norm > 0.0 {
                m.column_mut(r).unscale_mut(norm);
                f.c.column_mut(r).scale_mut(norm);
            }
        }
    }
}

fn als_restart(t: &JointTensor, k: usize, rng: &mut ChaCha20Rng) -> (Factors, bool, Vec<f64>) {
    let mut draw = |rows: usize| DMatrix::from_fn(rows, k, |_, _| rng.gen::<f64>());
    let mut f = Factors {
        a: draw(t.dims.0),
        b: draw(t.dims.1),
        c: draw(t.dims.2),
    };
    let mut history = vec![f.residual(t)];
    let scale = t.frobenius_sq().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..ALS_MAX_ITER {
        update(t, &mut f, 0);
        update(t, &mut f, 1);
        update(t, &mut f, 2);
        rebalance(&mut f);
        let prev = *history.last().unwrap();
        let cur = f.residual(t);
        history.push(cur);
        if cur <= 1e-15 * scale || (prev - cur).abs() <= ALS_REL_TOL * prev {
            return (f, true, history);
        }
    }
    (f, false, history)
}

/// Clip, renormalize and order the raw factors.
fn normalize(f: &Factors) -> MixtureFactors {
    let k = f.a.ncols();
    let mut cols: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..k)
        .map(|r| {
            let mut a: Vec<f64> = f.a.column(r).iter().copied().collect();
            let mut b: Vec<f64> = f.b.column(r).iter().copied().collect();
            let mut c: Vec<f64> = f.c.column(r).iter().copied().collect();
            // Sign flips in pairs leave the rank-one term unchanged.
            if a.iter().sum::<f64>() < 0.0 {
                a.iter_mut().chain(c.iter_mut()).for_each(|v| *v = -*v);
            }
            if b.iter().sum::<f64>() < 0.0 {
                b.iter_mut().chain(c.iter_mut()).for_each(|v| *v = -*v);
            }
            let mut lambda = 1.0;
            for col in [&mut a, &mut b, &mut c] {
                col.iter_mut().for_each(|v| *v = v.max(0.0));
                let sum: f64 = col.iter().sum();
                if sum > 0.0 {
                    col.iter_mut().for_each(|v| *v /= sum);
                } else {
                    let uniform = 1.0 / col.len() as f64;
                    col.iter_mut().for_each(|v| *v = uniform);
                }
                lambda *= sum;
            }
            (lambda, a, b, c)
        })
        .collect();
    let weights = project_to_simplex(&cols.iter().map(|c| c.0).collect::<Vec<_>>());
    for (col, w) in cols.iter_mut().zip(&weights) {
        col.0 = *w;
    }
    cols.sort_by(|p, q| {
        q.0.total_cmp(&p.0).then_with(|| {
            p.3.iter()
                .zip(&q.3)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    MixtureFactors {
        weights: cols.iter().map(|c| c.0).collect(),
        f_z: DMatrix::from_fn(f.a.nrows(), k, |i, r| cols[r].1[i]),
        f_x: DMatrix::from_fn(f.b.nrows(), k, |i, r| cols[r].2[i]),
        f_s: DMatrix::from_fn(f.c.nrows(), k, |i, r| cols[r].3[i]),
    }
}

/// Best-of-`restarts` rank-`k` CP fit by ALS. Restarts draw their uniform
/// initializations in sequence from one ChaCha20 stream seeded with `seed`.
pub fn cp_als(t: &JointTensor, k: usize, restarts: usize, seed: u64) -> Result<CpFit> {
    if k == 0 {
        return Err(Error::Config("component count k must be at least 1".into()));
    }
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    if t.values.len() != t.dims.0 * t.dims.1 * t.dims.2 || t.dims.2 != 4 {
        return Err(Error::DimensionMismatch(format!(
            "tensor dims {:?} hold {} values",
            t.dims,
            t.values.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut best: Option<(Factors, bool, Vec<f64>)> = None;
    for _ in 0..restarts {
        let run = als_restart(t, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => run.2.last() < b.2.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (f, converged, history) = best.expect("restarts >= 1");
    Ok(CpFit {
        factors: normalize(&f),
        residual: *history.last().unwrap(),
        converged,
        iterations: history.len() - 1,
        history,
    })
}

/// Half the L1 distance between the truth over `(U, Z, X, T, Y)` and the
/// product-form estimate, minimized over relabelings of `U`.
pub fn tv_distance(truth: &JointTable, est: &MixtureFactors) -> Result<f64> {
    let k = truth.k;
    if est.k() != k
        || est.f_z.shape() != (truth.z_levels, k)
        || est.f_x.shape() != (truth.x_levels, k)
        || est.f_s.shape() != (4, k)
    {
        return Err(Error::DimensionMismatch(format!(
            "truth has k={k}, |Z|={}, |X|={}; estimate has factors {:?}, {:?}, {:?}",
            truth.z_levels,
            truth.x_levels,
            est.f_z.shape(),
            est.f_x.shape(),
            est.f_s.shape()
        )));
    }
    let mut best = f64::INFINITY;
    for perm in (0..k).permutations(k) {
        let mut acc = CompensatedSum::default();
        for (u, &v) in perm.iter().enumerate() {
            for z in 0..truth.z_levels {
                for x in 0..truth.x_levels {
                    for t in 0..2 {
                        for y in 0..2 {
                            let p = est.weights[v]
                                * est.f_z[(z, v)]
                                * est.f_x[(x, v)]
                                * est.f_s[(2 * t + y, v)];
                            acc.add((truth.get(u, z, x, t, y) - p).abs());
                        }
                    }
                }
            }
        }
        best = best.min(0.5 * acc.value());
    }
    Ok(best.clamp(0.0, 1.0))
}

/// `min_pi ||w - w_pi||^2 + ||e - e_pi||^2`.
pub fn mte_error(truth: &MixtureOfEffects, est: &MixtureOfEffects) -> Result<f64> {
    let k = truth.k();
    if est.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "truth has {k} components, estimate {}",
            est.k()
        )));
    }
    Ok((0..k)
        .permutations(k)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| {
                    (truth.weights[i] - est.weights[j]).powi(2)
                        + (truth.effects[i] - est.effects[j]).powi(2)
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min))
}

/// `(truth - est)^2`.
pub fn ate_error(truth: f64, est: f64) -> f64 {
    (truth - est).powi(2)
}
