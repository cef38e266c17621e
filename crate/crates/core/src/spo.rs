//! Synthetic potential outcomes.
//!
//! Per treatment arm, coefficients `alpha` over the X features are chosen so
//! that `E[X|U,t]^T alpha` reproduces `E[Y|U,t]`, by matching second-order
//! moments against the Z features. Applying the same coefficients to the
//! unconditioned `M[X]` yields `E[Y^(t)]`. Higher orders bootstrap from the
//! previous `gamma` through `M[Z,XY|t]` and give the element-wise response
//! moments `nu_l = sum_u P(u) E[R|u]^l`.

use nalgebra::{ColPivQR, DMatrix, DVector, Dyn};

use crate::domain::{MixtureOfEffects, MomentBundle, MomentSequence, SpoCoefficients};
use crate::error::{Error, Result};
use crate::moment_problem::{matrix_pencil, PencilDiagnostics};
use crate::moments::{ArmCondition, DEFAULT_REL_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpoOptions {
    /// Relative `sigma_min` below which an arm matrix counts as singular.
    pub rel_tol: f64,
    /// Exploratory only, not part of the estimator: ridge added to the diagonal of
    /// `M[Z,X|t]` before solving. `None` keeps the estimator unregularized.
    pub ridge: Option<f64>,
}

impl Default for SpoOptions {
    fn default() -> Self {
        Self {
            rel_tol: DEFAULT_REL_TOL,
            ridge: None,
        }
    }
}

/// Both arms of `M[Z,X|t]` factored once, reused for every order.
pub struct SpoSolver<'a> {
    bundle: &'a MomentBundle,
    arms: [ColPivQR<f64, Dyn, Dyn>; 2],
}

impl<'a> SpoSolver<'a> {
    pub fn new(bundle: &'a MomentBundle, opts: SpoOptions) -> Result<Self> {
        bundle.check()?;
        if bundle.d_z() != bundle.d_x() {
            return Err(Error::DimensionMismatch(format!(
                "square SPO path needs d_Z = d_X, got {} and {}",
                bundle.d_z(),
                bundle.d_x()
            )));
        }
        let factor = |arm: usize| -> Result<ColPivQR<f64, Dyn, Dyn>> {
            let mut m = bundle.m_zx_t[arm].clone();
            if let Some(ridge) = opts.ridge {
                for i in 0..m.nrows() {
                    m[(i, i)] += ridge;
                }
            }
            let cond = ArmCondition::of(&m, opts.rel_tol);
            if cond.rank_deficient {
                return Err(Error::SingularMomentMatrix {
                    arm,
                    rel_sigma_min: cond.relative_sigma_min(),
                });
            }
            Ok(m.col_piv_qr())
        };
        Ok(Self {
            bundle,
            arms: [factor(0)?, factor(1)?],
        })
    }

    fn solve(&self, arm: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.arms[arm]
            .solve(rhs)
            .ok_or(Error::SingularMomentMatrix {
                arm,
                rel_sigma_min: 0.0,
            })
    }

    /// Order-1 coefficients from `M[Z,Y|t]`.
    pub fn first(&self) -> Result<SpoCoefficients> {
        let alpha = self.solve(1, &self.bundle.m_zy_t[1])?;
        let beta = self.solve(0, &self.bundle.m_zy_t[0])?;
        Ok(SpoCoefficients::new(1, alpha, beta))
    }

    /// Order `prev.order + 1` coefficients from `M[Z,XY|t] gamma^(l-1)`.
    pub fn next(&self, prev: &SpoCoefficients) -> Result<SpoCoefficients> {
        if prev.gamma.len() != self.bundle.d_x() {
            return Err(Error::DimensionMismatch(format!(
                "previous gamma has length {}, expected {}",
                prev.gamma.len(),
                self.bundle.d_x()
            )));
        }
        if prev.gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("previous gamma is not finite".into()));
        }
        let alpha = self.solve(1, &(&self.bundle.m_zxy_t[1] * &prev.gamma))?;
        let beta = self.solve(0, &(&self.bundle.m_zxy_t[0] * &prev.gamma))?;
        Ok(SpoCoefficients::new(prev.order + 1, alpha, beta))
    }

    /// `M[X]^T gamma`.
    pub fn project(&self, coeffs: &SpoCoefficients) -> f64 {
        self.bundle.m_x.dot(&coeffs.gamma)
    }

    pub fn ate(&self) -> Result<f64> {
        Ok(self.project(&self.first()?))
    }

    /// `(nu_1, .., nu_{2k-1})`.
    pub fn moment_sequence(&self, k: usize) -> Result<MomentSequence> {
        if k == 0 {
            return Err(Error::Config("component count k must be at least 1".into()));
        }
        let mut coeffs = self.first()?;
        let mut values = vec![self.project(&coeffs)];
        for _ in 2..2 * k {
            coeffs = self.next(&coeffs)?;
            values.push(self.project(&coeffs));
        }
        MomentSequence::new(k, values)
    }
}

pub fn first_moment_coeffs(bundle: &MomentBundle) -> Result<SpoCoefficients> {
    SpoSolver::new(bundle, SpoOptions::default())?.first()
}

pub fn next_moment_coeffs(
    bundle: &MomentBundle,
    prev: &SpoCoefficients,
) -> Result<SpoCoefficients> {
    SpoSolver::new(bundle, SpoOptions::default())?.next(prev)
}

/// `E(R) = M[X]^T gamma^(1)`.
pub fn ate(bundle: &MomentBundle) -> Result<f64> {
    SpoSolver::new(bundle, SpoOptions::default())?.ate()
}

pub fn response_moment_sequence(bundle: &MomentBundle, k: usize) -> Result<MomentSequence> {
    SpoSolver::new(bundle, SpoOptions::default())?.moment_sequence(k)
}

/// Full pipeline: response moments followed by the matrix pencil.
pub fn recover_mte(
    bundle: &MomentBundle,
    k: usize,
) -> Result<(MixtureOfEffects, PencilDiagnostics)> {
    matrix_pencil(&response_moment_sequence(bundle, k)?)
}

/// ATE through `E[Y^(t)] = M[Y,Z|t] M[X,Z|t]^+ M[X]`, which admits more Z
/// features than X features (`d_Z >= d_X`).
pub fn ate_via_pseudoinverse(bundle: &MomentBundle) -> Result<f64> {
    ate_via_pseudoinverse_with_tol(bundle, DEFAULT_REL_TOL)
}

pub fn ate_via_pseudoinverse_with_tol(bundle: &MomentBundle, rel_tol: f64) -> Result<f64> {
    bundle.check()?;
    if bundle.d_z() < bundle.d_x() {
        return Err(Error::DimensionMismatch(format!(
            "pseudoinverse path needs d_Z >= d_X, got {} < {}",
            bundle.d_z(),
            bundle.d_x()
        )));
    }
    let potential = |arm: usize| -> Result<f64> {
        let m_zx = &bundle.m_zx_t[arm];
        let cond = ArmCondition::of(m_zx, rel_tol);
        if cond.rank_deficient {
            return Err(Error::RankDeficient {
                arm,
                rel_sigma_min: cond.relative_sigma_min(),
            });
        }
        // M[X,Z|t] is d_X x d_Z; its pseudoinverse is d_Z x d_X.
        let m_xz: DMatrix<f64> = m_zx.transpose();
        let pinv = m_xz
            .svd(true, true)
            .pseudo_inverse(rel_tol * cond.sigma_max)
            .map_err(|_| Error::RankDeficient {
                arm,
                rel_sigma_min: cond.relative_sigma_min(),
            })?;
        let row = bundle.m_zy_t[arm].transpose() * pinv;
        Ok((row * &bundle.m_x)[(0, 0)])
    };
    Ok(potential(1)? - potential(0)?)
}
