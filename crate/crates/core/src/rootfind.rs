//! Inverting the forward skinning field.
//!
//! A deformed query `x'` has as canonical correspondences every root of
//! `d(x) - x' = 0`. Each bone contributes one starting point (the query moved
//! rigidly back by that bone) and the spatial Jacobian there as the initial
//! Jacobian estimate; Broyden iterations then refine each start without ever
//! re-evaluating the true Jacobian. Converged roots are deduplicated.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::nn::Mlp;
use crate::skeleton::{BoneTransformSet, LbsField};
use crate::{Error, Matrix, Result, Vector};

/// Rank-one update applied to the inverse-Jacobian estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroydenUpdate {
    /// Minimizes the change of the Jacobian estimate (Broyden's first method).
    #[default]
    Good,
    /// Minimizes the change of the inverse estimate directly.
    Bad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Convergence threshold on `‖d(x) - x'‖`.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Iterates farther than this from `divergence_center` are abandoned.
    pub divergence_radius: f64,
    /// Canonical bounding-box center; empty means the origin.
    #[serde(default)]
    pub divergence_center: Vec<f64>,
    pub dedup_radius: f64,
    /// `λ` added to the diagonal before inverting an initial Jacobian.
    pub jacobian_damping: f64,
    #[serde(default)]
    pub update: BroydenUpdate,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_iters: 50,
            divergence_radius: 12.0,
            divergence_center: Vec::new(),
            dedup_radius: 1e-3,
            jacobian_damping: 1e-6,
            update: BroydenUpdate::Good,
        }
    }
}

impl SolverSettings {
    /// Defaults with the divergence radius set to ten canonical half-diagonals.
    pub fn for_bounds(min: &[f64], max: &[f64]) -> Self {
        let center = min.iter().zip(max).map(|(a, b)| 0.5 * (a + b)).collect();
        let half_diag = min
            .iter()
            .zip(max)
            .map(|(a, b)| (0.5 * (b - a)).powi(2))
            .sum::<f64>()
            .sqrt();
        Self {
            divergence_radius: 10.0 * half_diag,
            divergence_center: center,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("solver.epsilon must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("solver.max_iters must be >= 1".into()));
        }
        if !(self.dedup_radius > self.epsilon) {
            return Err(Error::Config("solver.dedup_radius must exceed solver.epsilon".into()));
        }
        if !(self.divergence_radius > 0.0) {
            return Err(Error::Config("solver.divergence_radius must be > 0".into()));
        }
        if !(self.jacobian_damping >= 0.0) {
            return Err(Error::Config("solver.jacobian_damping must be >= 0".into()));
        }
        Ok(())
    }

    fn center<const D: usize>(&self) -> Vector<D> {
        Vector::<D>::from_fn(|i, _| self.divergence_center.get(i).copied().unwrap_or(0.0))
    }
}

/// Outcome of one Broyden run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootCandidate<const D: usize> {
    pub x_star: Vector<D>,
    /// `‖d(x_star) - x'‖`, evaluated at `x_star`.
    pub residual: f64,
    pub converged: bool,
    /// Jacobian estimate carried by the solver when it stopped.
    pub jacobian: Matrix<D>,
    pub source_bone: usize,
    pub iterations: usize,
}

/// Deduplicated converged roots, plus the best failed start when none converged.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet<const D: usize> {
    pub roots: Vec<RootCandidate<D>>,
    pub fallback: Option<RootCandidate<D>>,
}

impl<const D: usize> CorrespondenceSet<D> {
    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }
}

impl<const D: usize> LbsField<'_, D> {
    /// Broyden iterations from `x0` with initial Jacobian `j0`.
    pub fn broyden(
        &mut self,
        x_query: &Vector<D>,
        x0: &Vector<D>,
        j0: &Matrix<D>,
        settings: &SolverSettings,
        source_bone: usize,
    ) -> Result<RootCandidate<D>> {
        let damped = j0 + Matrix::<D>::identity() * settings.jacobian_damping;
        let mut h = linalg::inverse(&damped).unwrap_or_else(Matrix::<D>::identity);
        let center = settings.center::<D>();

        let mut x = *x0;
        let mut g = self.deform(&x)? - x_query;
        let mut r = g.norm();
        let mut best = (x, r);
        let mut iterations = 0;
        let mut increases = 0;
        let mut step_scale = 1.0;

        while r >= settings.epsilon && iterations < settings.max_iters {
            let step = -(h * g) * step_scale;
            let x_new = x + step;
            if !linalg::is_finite(&x_new) || (x_new - center).norm() > settings.divergence_radius {
                break;
            }
            let g_new = self.deform(&x_new)? - x_query;
            let r_new = g_new.norm();
            let y = g_new - g;
            let hy = h * y;
            match settings.update {
                BroydenUpdate::Good => {
                    let st_h = step.transpose() * h;
                    let denom = st_h.dot(&y.transpose());
                    if denom.abs() > f64::MIN_POSITIVE {
                        h += (step - hy) * st_h / denom;
                    }
                }
                BroydenUpdate::Bad => {
                    let denom = y.norm_squared();
                    if denom > f64::MIN_POSITIVE {
                        h += (step - hy) * y.transpose() / denom;
                    }
                }
            }
            if r_new > r {
                increases += 1;
                if increases >= 5 {
                    step_scale *= 0.5;
                }
            } else {
                increases = 0;
                step_scale = 1.0;
            }
            x = x_new;
            g = g_new;
            r = r_new;
            iterations += 1;
            if r < best.1 {
                best = (x, r);
            }
        }

        let jacobian = linalg::inverse(&h).unwrap_or(*j0);
        let converged = r < settings.epsilon;
        let (x_star, residual) = if converged { (x, r) } else { best };
        Ok(RootCandidate {
            x_star,
            residual,
            converged,
            jacobian,
            source_bone,
            iterations,
        })
    }

    /// All canonical correspondences of `x_query`.
    pub fn correspondences(&mut self, x_query: &Vector<D>, settings: &SolverSettings) -> Result<CorrespondenceSet<D>> {
        let mut candidates = Vec::with_capacity(self.n_bones());
        for i in 0..self.n_bones() {
            let x0 = self.bones().transforms[i].apply_inverse(x_query);
            let j0 = self.jacobian(&x0)?;
            candidates.push(self.broyden(x_query, &x0, &j0, settings, i)?);
        }
        Ok(deduplicate(candidates, settings.dedup_radius))
    }
}

/// Keeps converged candidates pairwise at least `radius` apart, preferring
/// smaller residuals; falls back to the best non-converged candidate.
fn deduplicate<const D: usize>(candidates: Vec<RootCandidate<D>>, radius: f64) -> CorrespondenceSet<D> {
    let (mut converged, failed): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.converged);
    converged.sort_by(|a, b| a.residual.total_cmp(&b.residual).then(a.source_bone.cmp(&b.source_bone)));
    let mut roots: Vec<RootCandidate<D>> = Vec::with_capacity(converged.len());
    for c in converged {
        if roots.iter().all(|r| (r.x_star - c.x_star).norm() >= radius) {
            roots.push(c);
        }
    }
    roots.sort_by_key(|r| r.source_bone);
    let fallback = if roots.is_empty() {
        failed
            .into_iter()
            .min_by(|a, b| a.residual.total_cmp(&b.residual).then(a.source_bone.cmp(&b.source_bone)))
    } else {
        None
    };
    CorrespondenceSet { roots, fallback }
}

pub fn broyden_solve<const D: usize>(
    sigma_w: &Mlp,
    bones: &BoneTransformSet<D>,
    x_query: &Vector<D>,
    x0: &Vector<D>,
    j0: &Matrix<D>,
    settings: &SolverSettings,
) -> Result<RootCandidate<D>> {
    LbsField::new(sigma_w, bones)?.broyden(x_query, x0, j0, settings, 0)
}

pub fn find_correspondences<const D: usize>(
    sigma_w: &Mlp,
    bones: &BoneTransformSet<D>,
    x_query: &Vector<D>,
    settings: &SolverSettings,
) -> Result<CorrespondenceSet<D>> {
    LbsField::new(sigma_w, bones)?.correspondences(x_query, settings)
}
