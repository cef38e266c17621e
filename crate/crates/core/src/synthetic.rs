//! Discrete structural models over `(U, Z, X, T, Y)`, an ancestral sampler,
//! and an exhaustive-enumeration oracle for population moments and ground truth.
//!
//! Covariates are binary. A covariate block (all Z covariates, or all X
//! covariates) is summarized by its configuration index
//! `sum_c bit_c * 2^c`; treatment and outcome tables are indexed by that
//! configuration (rows) and the latent class (columns).
//!
//! Sampling uses ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64`), a
//! counter-based generator whose stream is identical on every platform. Each
//! row consumes exactly `1 + n_z + n_x + 3` uniforms in the order
//! `U, Z_1.., X_1.., T, Y^(0), Y^(1)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, MixtureOfEffects, MomentBundle};
use crate::error::{Error, Result};

/// How a block of binary covariates is turned into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureCoding {
    /// One indicator per configuration of the block (`2^c` features).
    OneHot,
    /// Each covariate used directly as a 0/1 feature (`c` features).
    Direct,
}

impl FeatureCoding {
    pub fn width(self, covariates: usize) -> usize {
        match self {
            FeatureCoding::OneHot => 1 << covariates,
            FeatureCoding::Direct => covariates,
        }
    }

    /// Feature vector of configuration `config`.
    pub fn features(self, covariates: usize, config: usize) -> Vec<f64> {
        match self {
            FeatureCoding::OneHot => (0..1usize << covariates)
                .map(|c| if c == config { 1.0 } else { 0.0 })
                .collect(),
            FeatureCoding::Direct => (0..covariates)
                .map(|c| ((config >> c) & 1) as f64)
                .collect(),
        }
    }
}

/// Full discrete structural model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub k: usize,
    pub p_u: Vec<f64>,
    /// `P(Z_c = 1 | U = u)`, one row per Z covariate.
    pub p_z_given_u: DMatrix<f64>,
    /// `P(X_c = 1 | U = u)`, one row per X covariate.
    pub p_x_given_u: DMatrix<f64>,
    /// `P(T = 1 | Z = z, U = u)`, rows indexed by Z configuration.
    pub p_t_given_zu: DMatrix<f64>,
    /// `P(Y^(0) = 1 | X = x, U = u)`, rows indexed by X configuration.
    pub p_y0_given_xu: DMatrix<f64>,
    pub p_y1_given_xu: DMatrix<f64>,
    pub z_coding: FeatureCoding,
    pub x_coding: FeatureCoding,
}

impl ModelSpec {
    pub fn n_z_covariates(&self) -> usize {
        self.p_z_given_u.nrows()
    }

    pub fn n_x_covariates(&self) -> usize {
        self.p_x_given_u.nrows()
    }

    pub fn z_levels(&self) -> usize {
        1 << self.n_z_covariates()
    }

    pub fn x_levels(&self) -> usize {
        1 << self.n_x_covariates()
    }

    pub fn d_z(&self) -> usize {
        self.z_coding.width(self.n_z_covariates())
    }

    pub fn d_x(&self) -> usize {
        self.x_coding.width(self.n_x_covariates())
    }

    /// `P(Z = config | U = u)` under conditional independence of the covariates.
    pub fn p_z_config(&self, config: usize, u: usize) -> f64 {
        config_probability(&self.p_z_given_u, config, u)
    }

    pub fn p_x_config(&self, config: usize, u: usize) -> f64 {
        config_probability(&self.p_x_given_u, config, u)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if k == 0 || self.p_u.len() != k {
            return bad(format!("p_u has {} entries for k = {k}", self.p_u.len()));
        }
        let shapes = [
            ("p_z_given_u", &self.p_z_given_u, self.n_z_covariates()),
            ("p_x_given_u", &self.p_x_given_u, self.n_x_covariates()),
            ("p_t_given_zu", &self.p_t_given_zu, self.z_levels()),
            ("p_y0_given_xu", &self.p_y0_given_xu, self.x_levels()),
            ("p_y1_given_xu", &self.p_y1_given_xu, self.x_levels()),
        ];
        for (name, m, rows) in shapes {
            if m.shape() != (rows, k) {
                return bad(format!("{name} has shape {:?}, expected ({rows}, {k})", m.shape()));
            }
            if m.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("{name} has entries outside [0, 1]"));
            }
        }
        if self.p_u.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("p_u has entries outside [0, 1]".into());
        }
        let total: f64 = self.p_u.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("p_u sums to {total}"));
        }
        if self.p_t_given_zu.iter().any(|&p| p <= 0.0 || p >= 1.0) {
            return bad("positivity violated: P(T=1|z,u) must lie strictly inside (0, 1)".into());
        }
        Ok(())
    }
}

fn config_probability(table: &DMatrix<f64>, config: usize, u: usize) -> f64 {
    (0..table.nrows())
        .map(|c| {
            let p = table[(c, u)];
            if (config >> c) & 1 == 1 {
                p
            } else {
                1.0 - p
            }
        })
        .product()
}

/// The two-class binary family indexed by `mu_zt` (how strongly treatment
/// assignment runs through Z instead of U) and `mu_xy` (how strongly the
/// treatment effect runs through X instead of U).
///
/// Model A is `(0, 0)`, Model B `(1, 0)`, Model C `(1, 1)`.
pub fn paper_model(mu_zt: f64, mu_xy: f64) -> Result<ModelSpec> {
    for (name, value) in [("mu_zt", mu_zt), ("mu_xy", mu_xy)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange { name, value });
        }
    }
    let table = |base: [f64; 4], shift: [f64; 4], mu: f64, scale: f64| {
        DMatrix::from_fn(2, 2, |i, j| (base[2 * i + j] + mu * shift[2 * i + j]) / scale)
    };
    let spec = ModelSpec {
        k: 2,
        p_u: vec![0.5, 0.5],
        p_z_given_u: DMatrix::from_row_slice(1, 2, &[0.25, 0.75]),
        p_x_given_u: DMatrix::from_row_slice(1, 2, &[0.25, 0.75]),
        p_t_given_zu: table([3., 1., 3., 1.], [0., 2., -2., 0.], mu_zt, 4.0),
        p_y0_given_xu: table([7., 1., 7., 1.], [0., 6., -6., 0.], mu_xy, 8.0),
        p_y1_given_xu: table([1., 7., 1., 7.], [0., -6., 6., 0.], mu_xy, 8.0),
        z_coding: FeatureCoding::OneHot,
        x_coding: FeatureCoding::OneHot,
    };
    spec.validate()?;
    Ok(spec)
}

/// Four Bernoulli covariates driven by `U`, `P(T=1|U) = 3/4 - U/2`, and
/// `P(Y=1) = 1/4 + T/4 + 1(U=T)/4`. Covariates are used directly as features.
pub fn appendix_model() -> ModelSpec {
    let y_table = |t: f64| {
        DMatrix::from_fn(4, 2, |_, u| {
            let same = if u as f64 == t { 1.0 } else { 0.0 };
            0.25 + t / 4.0 + same / 4.0
        })
    };
    ModelSpec {
        k: 2,
        p_u: vec![0.5, 0.5],
        p_z_given_u: DMatrix::from_fn(2, 2, |c, u| {
            let u = u as f64;
            if c == 0 {
                0.2 + 0.3 * u
            } else {
                0.28 + 0.3 * (1.0 - u)
            }
        }),
        p_x_given_u: DMatrix::from_fn(2, 2, |c, u| {
            let u = u as f64;
            if c == 0 {
                0.36 + 0.3 * u
            } else {
                0.44 + 0.3 * (1.0 - u)
            }
        }),
        p_t_given_zu: DMatrix::from_fn(4, 2, |_, u| 0.75 - u as f64 / 2.0),
        p_y0_given_xu: y_table(0.0),
        p_y1_given_xu: y_table(1.0),
        z_coding: FeatureCoding::Direct,
        x_coding: FeatureCoding::Direct,
    }
}

/// A sampled dataset together with both potential outcomes of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledData {
    pub dataset: Dataset,
    pub y0: Vec<u8>,
    pub y1: Vec<u8>,
}

/// Ancestral sample `U -> (Z, X) -> T -> (Y^(0), Y^(1)) -> Y = Y^(T)`.
pub fn sample(spec: &ModelSpec, n: usize, seed: u64) -> Dataset {
    sample_with_potentials(spec, n, seed).dataset
}

pub fn sample_with_potentials(spec: &ModelSpec, n: usize, seed: u64) -> SampledData {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (nz, nx) = (spec.n_z_covariates(), spec.n_x_covariates());
    let (dz, dx) = (spec.d_z(), spec.d_x());
    let z_features: Vec<Vec<f64>> = (0..spec.z_levels())
        .map(|c| spec.z_coding.features(nz, c))
        .collect();
    let x_features: Vec<Vec<f64>> = (0..spec.x_levels())
        .map(|c| spec.x_coding.features(nx, c))
        .collect();

    let mut z = Vec::with_capacity(n * dz);
    let mut x = Vec::with_capacity(n * dx);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut u_col = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);
    let bernoulli = |rng: &mut ChaCha20Rng, p: f64| rng.gen::<f64>() < p;

    for _ in 0..n {
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        let mut u = spec.k - 1;
        for (class, p) in spec.p_u.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                u = class;
                break;
            }
        }
        let mut zc = 0;
        for c in 0..nz {
            if bernoulli(&mut rng, spec.p_z_given_u[(c, u)]) {
                zc |= 1 << c;
            }
        }
        let mut xc = 0;
        for c in 0..nx {
            if bernoulli(&mut rng, spec.p_x_given_u[(c, u)]) {
                xc |= 1 << c;
            }
        }
        let treated = bernoulli(&mut rng, spec.p_t_given_zu[(zc, u)]);
        let y0 = bernoulli(&mut rng, spec.p_y0_given_xu[(xc, u)]) as u8;
        let y1 = bernoulli(&mut rng, spec.p_y1_given_xu[(xc, u)]) as u8;

        z.extend_from_slice(&z_features[zc]);
        x.extend_from_slice(&x_features[xc]);
        t.push(if treated { 1.0 } else { 0.0 });
        y.push(f64::from(if treated { y1 } else { y0 }));
        u_col.push(u as i64);
        y0s.push(y0);
        y1s.push(y1);
    }
    SampledData {
        dataset: Dataset::new(
            DMatrix::from_row_slice(n, dz, &z),
            DMatrix::from_row_slice(n, dx, &x),
            t,
            y,
            Some(u_col),
        ),
        y0: y0s,
        y1: y1s,
    }
}

/// Probability table over `(U, Z-config, X-config, T, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub k: usize,
    pub z_levels: usize,
    pub x_levels: usize,
    pub values: Vec<f64>,
}

impl JointTable {
    pub fn zeros(k: usize, z_levels: usize, x_levels: usize) -> Self {
        Self {
            k,
            z_levels,
            x_levels,
            values: vec![0.0; k * z_levels * x_levels * 4],
        }
    }

    pub fn index(&self, u: usize, z: usize, x: usize, t: usize, y: usize) -> usize {
        (((u * self.z_levels + z) * self.x_levels + x) * 2 + t) * 2 + y
    }

    pub fn get(&self, u: usize, z: usize, x: usize, t: usize, y: usize) -> f64 {
        self.values[self.index(u, z, x, t, y)]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Probability table over `(U, Z-config, X-config, T, Y^(0), Y^(1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTable {
    pub k: usize,
    pub z_levels: usize,
    pub x_levels: usize,
    pub values: Vec<f64>,
}

impl PotentialTable {
    pub fn index(&self, u: usize, z: usize, x: usize, t: usize, y0: usize, y1: usize) -> usize {
        ((((u * self.z_levels + z) * self.x_levels + x) * 2 + t) * 2 + y0) * 2 + y1
    }

    pub fn get(&self, u: usize, z: usize, x: usize, t: usize, y0: usize, y1: usize) -> f64 {
        self.values[self.index(u, z, x, t, y0, y1)]
    }

    /// Reveal `Y = Y^(T)` and drop the counterfactual.
    pub fn observed(&self) -> JointTable {
        let mut joint = JointTable::zeros(self.k, self.z_levels, self.x_levels);
        for u in 0..self.k {
            for z in 0..self.z_levels {
                for x in 0..self.x_levels {
                    for t in 0..2 {
                        for y0 in 0..2 {
                            for y1 in 0..2 {
                                let y = if t == 1 { y1 } else { y0 };
                                let i = joint.index(u, z, x, t, y);
                                joint.values[i] += self.get(u, z, x, t, y0, y1);
                            }
                        }
                    }
                }
            }
        }
        joint
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ate: f64,
    pub mte: MixtureOfEffects,
    pub joint: JointTable,
    pub joint_potential: PotentialTable,
}

/// Enumerate every configuration of `(U, Z, X, T, Y^(0), Y^(1))`.
pub fn potential_table(spec: &ModelSpec) -> PotentialTable {
    let (zl, xl) = (spec.z_levels(), spec.x_levels());
    let mut table = PotentialTable {
        k: spec.k,
        z_levels: zl,
        x_levels: xl,
        values: vec![0.0; spec.k * zl * xl * 8],
    };
    let bern = |p: f64, v: usize| if v == 1 { p } else { 1.0 - p };
    for u in 0..spec.k {
        for z in 0..zl {
            let pz = spec.p_u[u] * spec.p_z_config(z, u);
            for x in 0..xl {
                let pzx = pz * spec.p_x_config(x, u);
                for t in 0..2 {
                    let pt = pzx * bern(spec.p_t_given_zu[(z, u)], t);
                    for y0 in 0..2 {
                        for y1 in 0..2 {
                            let i = table.index(u, z, x, t, y0, y1);
                            table.values[i] = pt
                                * bern(spec.p_y0_given_xu[(x, u)], y0)
                                * bern(spec.p_y1_given_xu[(x, u)], y1);
                        }
                    }
                }
            }
        }
    }
    table
}

pub fn exact_ground_truth(spec: &ModelSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let joint_potential = potential_table(spec);
    let joint = joint_potential.observed();
    let effects: Vec<f64> = (0..spec.k)
        .map(|u| {
            (0..spec.x_levels())
                .map(|x| {
                    spec.p_x_config(x, u)
                        * (spec.p_y1_given_xu[(x, u)] - spec.p_y0_given_xu[(x, u)])
                })
                .sum()
        })
        .collect();
    let ate = spec.p_u.iter().zip(&effects).map(|(p, e)| p * e).sum();
    Ok(GroundTruth {
        ate,
        mte: MixtureOfEffects::new(spec.p_u.clone(), effects)?,
        joint,
        joint_potential,
    })
}

/// Population value of every [`MomentBundle`] field.
pub fn exact_bundle(spec: &ModelSpec) -> Result<MomentBundle> {
    spec.validate()?;
    let joint = potential_table(spec).observed();
    let (nz, nx) = (spec.n_z_covariates(), spec.n_x_covariates());
    let (dz, dx) = (spec.d_z(), spec.d_x());

    let mut m_x = DVector::zeros(dx);
    let mut p_t = [0.0; 2];
    let mut zx = [DMatrix::zeros(dz, dx), DMatrix::zeros(dz, dx)];
    let mut zy = [DVector::zeros(dz), DVector::zeros(dz)];
    let mut zxy = [DMatrix::zeros(dz, dx), DMatrix::zeros(dz, dx)];
    for z in 0..spec.z_levels() {
        let fz = DVector::from_vec(spec.z_coding.features(nz, z));
        for x in 0..spec.x_levels() {
            let fx = DVector::from_vec(spec.x_coding.features(nx, x));
            let outer = &fz * fx.transpose();
            for t in 0..2 {
                for y in 0..2 {
                    let p: f64 = (0..spec.k).map(|u| joint.get(u, z, x, t, y)).sum();
                    m_x += &fx * p;
                    p_t[t] += p;
                    zx[t] += &outer * p;
                    if y == 1 {
                        zy[t] += &fz * p;
                        zxy[t] += &outer * p;
                    }
                }
            }
        }
    }
    for t in 0..2 {
        zx[t] /= p_t[t];
        zy[t] /= p_t[t];
        zxy[t] /= p_t[t];
    }
    Ok(MomentBundle {
        m_x,
        m_zx_t: zx,
        m_zy_t: zy,
        m_zxy_t: zxy,
        n_t: [0, 0],
        exact: true,
    })
}
