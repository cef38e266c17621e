//! Empirical observable moments and conditioning diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{split_by_treatment, Dataset, MomentBundle};
use crate::error::{Error, Result};

/// Default relative singular-value tolerance for `M[Z,X|t]`.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, v: f64) {
        let s = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - s) + v;
        } else {
            self.carry += (v - s) + self.sum;
        }
        self.sum = s;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Weighting applied to each row of a cross moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossWeight {
    /// `E[Z_i X_j]`
    Unit,
    /// `E[Z_i X_j Y]`
    Outcome,
}

/// `M[X]`: column means of the X features.
pub fn mean_vector(d: &Dataset) -> Result<DVector<f64>> {
    let n = d.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let means = (0..d.d_x()).map(|j| {
        let mut acc = CompensatedSum::default();
        for i in 0..n {
            acc.add(d.x[(i, j)]);
        }
        acc.value() / n as f64
    });
    Ok(DVector::from_iterator(d.d_x(), means))
}

/// `M[Z,X]` (or `M[Z,XY]` with [`CrossWeight::Outcome`]), a `d_Z x d_X` matrix.
pub fn cross_moment(d: &Dataset, weight: CrossWeight) -> Result<DMatrix<f64>> {
    let n = d.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (dz, dx) = (d.d_z(), d.d_x());
    let mut acc = vec![CompensatedSum::default(); dz * dx];
    for s in 0..n {
        let w = match weight {
            CrossWeight::Unit => 1.0,
            CrossWeight::Outcome => d.y[s],
        };
        if w == 0.0 {
            continue;
        }
        for i in 0..dz {
            let zi = d.z[(s, i)] * w;
            if zi == 0.0 {
                continue;
            }
            for j in 0..dx {
                acc[i * dx + j].add(zi * d.x[(s, j)]);
            }
        }
    }
    Ok(DMatrix::from_fn(dz, dx, |i, j| acc[i * dx + j].value() / n as f64))
}

/// `M[Z,Y]`: a length `d_Z` vector of `E[Z_i Y]`.
pub fn outcome_moment(d: &Dataset) -> Result<DVector<f64>> {
    let n = d.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dz = d.d_z();
    let sums = (0..dz).map(|i| {
        let mut acc = CompensatedSum::default();
        for s in 0..n {
            acc.add(d.z[(s, i)] * d.y[s]);
        }
        acc.value() / n as f64
    });
    Ok(DVector::from_iterator(dz, sums))
}

/// Fill a [`MomentBundle`] from data, conditioning on each treatment arm.
pub fn estimate_bundle(d: &Dataset) -> Result<MomentBundle> {
    let (d0, d1) = split_by_treatment(d)?;
    let m_x = mean_vector(d)?;
    let arm = |a: &Dataset| -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        Ok((
            cross_moment(a, CrossWeight::Unit)?,
            outcome_moment(a)?,
            cross_moment(a, CrossWeight::Outcome)?,
        ))
    };
    let (zx0, zy0, zxy0) = arm(&d0)?;
    let (zx1, zy1, zxy1) = arm(&d1)?;
    Ok(MomentBundle {
        m_x,
        m_zx_t: [zx0, zx1],
        m_zy_t: [zy0, zy1],
        m_zxy_t: [zxy0, zxy1],
        n_t: [d0.n(), d1.n()],
        exact: false,
    })
}

/// Singular-value summary of one arm's `M[Z,X|t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmCondition {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `sigma_max / sigma_min`; infinite when `sigma_min = 0`.
    pub condition: f64,
    pub rank_deficient: bool,
}

impl ArmCondition {
    pub fn of(m: &DMatrix<f64>, rel_tol: f64) -> Self {
        let sv = m.singular_values();
        let sigma_max = sv.iter().copied().fold(0.0, f64::max);
        // A wide matrix can never have full column rank.
        let sigma_min = if m.nrows() < m.ncols() {
            0.0
        } else {
            sv.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let condition = if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        };
        Self {
            sigma_min,
            sigma_max,
            condition,
            rank_deficient: !(sigma_min > rel_tol * sigma_max) || sigma_max == 0.0,
        }
    }

    pub fn relative_sigma_min(&self) -> f64 {
        if self.sigma_max > 0.0 {
            self.sigma_min / self.sigma_max
        } else {
            0.0
        }
    }
}

/// Per-arm `sigma_min` and condition number of `M[Z,X|t]` with the default tolerance.
pub fn condition_diagnostic(bundle: &MomentBundle) -> [ArmCondition; 2] {
    condition_diagnostic_with_tol(bundle, DEFAULT_REL_TOL)
}

pub fn condition_diagnostic_with_tol(bundle: &MomentBundle, rel_tol: f64) -> [ArmCondition; 2] {
    [
        ArmCondition::of(&bundle.m_zx_t[0], rel_tol),
        ArmCondition::of(&bundle.m_zx_t[1], rel_tol),
    ]
}
