//! Occupancy of deformed points and its gradients.
//!
//! A deformed query is occupied when any of its canonical correspondences is.
//! The per-root canonical occupancies are combined with a smooth union (a
//! softmax-weighted average) or a hard maximum. Gradients reach the skinning
//! network through the root locations by implicit differentiation of
//! `d(x*) = x'`: for a cotangent `v` on `x*`, solve `(∂d/∂x*)ᵀ y = -v` and pull
//! `y` back through `∂d/∂σ_w`.

pub mod levelset;
mod tables;

pub use levelset::{
    extract_contour, extract_levelset_2d, extract_levelset_3d, extract_mesh, model_grid_values, sample_grid, Contour, Grid,
    LevelSetMode, Mesh, Polyline,
};

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::nn::{Mlp, MlpGrad, Tape};
use crate::rootfind::{CorrespondenceSet, RootCandidate, SolverSettings};
use crate::skeleton::{BoneTransformSet, LbsField};
use crate::train::ModelParams;
use crate::{Error, Matrix, Result, Vector};

/// Condition number above which a root's implicit gradient is dropped.
pub const MAX_CONDITION: f64 = 1e12;

/// Occupancy probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct OccupancyValue(pub f64);

impl OccupancyValue {
    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    HardMax,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSettings {
    pub aggregation: Aggregation,
    /// `κ` in `Σ_i softmax(κ o)_i o_i`.
    pub softmax_scale: f64,
    /// Include `∂softmax(κ o)/∂o` in the backward pass.
    #[serde(default = "default_true")]
    pub differentiate_weights: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CompositionSettings {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Softmax,
            softmax_scale: 20.0,
            differentiate_weights: true,
        }
    }
}

impl CompositionSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.softmax_scale.is_finite() && self.softmax_scale > 0.0) {
            return Err(Error::Config("composition.softmax_scale must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Combined occupancy and `∂o/∂o_i` for each root value.
///
/// An empty set composes to zero (free space).
pub fn aggregate(values: &[f64], settings: &CompositionSettings) -> (f64, Vec<f64>) {
    if values.is_empty() {
        return (0.0, Vec::new());
    }
    match settings.aggregation {
        Aggregation::HardMax => {
            let mut arg = 0;
            for (i, v) in values.iter().enumerate() {
                if *v > values[arg] {
                    arg = i;
                }
            }
            let mut partials = vec![0.0; values.len()];
            partials[arg] = 1.0;
            (values[arg], partials)
        }
        Aggregation::Softmax => {
            let k = settings.softmax_scale;
            let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = values.iter().map(|v| (k * (v - m)).exp()).collect();
            let z: f64 = e.iter().sum();
            let s: Vec<f64> = e.iter().map(|v| v / z).collect();
            let o: f64 = s.iter().zip(values).map(|(s, v)| s * v).sum();
            let partials = if settings.differentiate_weights {
                s.iter().zip(values).map(|(s, v)| s * (1.0 + k * (v - o))).collect()
            } else {
                s
            };
            (o, partials)
        }
    }
}

fn network_input<const D: usize>(sigma_f: &Mlp, x: &Vector<D>, pose: &[f64]) -> Result<Vec<f64>> {
    if sigma_f.input_dim() != D + pose.len() {
        return Err(Error::Dimension {
            what: "occupancy network input (point + pose)",
            expected: sigma_f.input_dim(),
            got: D + pose.len(),
        });
    }
    let mut input = Vec::with_capacity(D + pose.len());
    input.extend_from_slice(x.as_slice());
    input.extend_from_slice(pose);
    Ok(input)
}

/// Canonical occupancy `f(x, p)`; pass an empty pose when pose conditioning is off.
pub fn occupancy_canonical<const D: usize>(sigma_f: &Mlp, x: &Vector<D>, pose: &[f64]) -> Result<OccupancyValue> {
    let (y, _) = sigma_f.forward(&network_input(sigma_f, x, pose)?)?;
    Ok(OccupancyValue(y[0]))
}

/// Forward state of one deformed query, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DeformedQuery<const D: usize> {
    pub occupancy: f64,
    pub correspondences: CorrespondenceSet<D>,
    /// Roots that entered the composition (the fallback when no root converged
    /// but its residual is within ten thresholds).
    used: Vec<RootCandidate<D>>,
    values: Vec<f64>,
    partials: Vec<f64>,
    tapes: Vec<Tape>,
}

impl<const D: usize> DeformedQuery<D> {
    pub fn root_values(&self) -> &[f64] {
        &self.values
    }

    pub fn used_roots(&self) -> &[RootCandidate<D>] {
        &self.used
    }
}

/// Gradients of one query plus counters for dropped implicit terms.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGradient {
    pub sigma_f: MlpGrad,
    pub sigma_w: MlpGrad,
    pub dropped_roots: usize,
}

/// Evaluates deformed occupancy for a fixed model and frame.
pub struct DeformedEvaluator<'a, const D: usize> {
    model: &'a ModelParams,
    field: LbsField<'a, D>,
    pose_input: &'a [f64],
}

impl<'a, const D: usize> DeformedEvaluator<'a, D> {
    pub fn new(model: &'a ModelParams, bones: &'a BoneTransformSet<D>) -> Result<Self> {
        let pose_input = model.pose_input(&bones.pose)?;
        Ok(Self {
            model,
            field: LbsField::new(&model.skinning, bones)?,
            pose_input,
        })
    }

    pub fn solver(&self) -> &SolverSettings {
        &self.model.solver
    }

    pub fn forward(&mut self, x_query: &Vector<D>) -> Result<DeformedQuery<D>> {
        let set = self.field.correspondences(x_query, &self.model.solver)?;
        self.compose(set)
    }

    /// Composition over an externally supplied correspondence set.
    pub fn compose(&mut self, set: CorrespondenceSet<D>) -> Result<DeformedQuery<D>> {
        let eps = self.model.solver.epsilon;
        let used: Vec<RootCandidate<D>> = if !set.roots.is_empty() {
            set.roots.clone()
        } else {
            set.fallback.iter().filter(|c| c.residual <= 10.0 * eps).copied().collect()
        };
        let sigma_f = &self.model.occupancy;
        let mut values = Vec::with_capacity(used.len());
        let mut tapes = Vec::with_capacity(used.len());
        for root in &used {
            let mut tape = Tape::new();
            sigma_f.forward_into(&network_input(sigma_f, &root.x_star, self.pose_input)?, &mut tape)?;
            values.push(tape.output()[0]);
            tapes.push(tape);
        }
        let (occupancy, partials) = aggregate(&values, &self.model.composition);
        Ok(DeformedQuery {
            occupancy,
            correspondences: set,
            used,
            values,
            partials,
            tapes,
        })
    }

    /// Accumulates `upstream · ∂o/∂σ` into the two gradients; returns the
    /// number of roots whose skinning term was dropped as ill-conditioned.
    pub fn backward(
        &mut self,
        query: &DeformedQuery<D>,
        upstream: f64,
        grad_f: &mut MlpGrad,
        grad_w: &mut MlpGrad,
    ) -> Result<usize> {
        let mut dropped = 0;
        let damping = self.model.solver.jacobian_damping;
        for ((root, tape), partial) in query.used.iter().zip(&query.tapes).zip(&query.partials) {
            let g = upstream * partial;
            if g == 0.0 {
                continue;
            }
            let dx = self.model.occupancy.backward(tape, &[g], grad_f)?;
            let v = Vector::<D>::from_fn(|i, _| dx[i]);
            let jac = self.field.jacobian(&root.x_star)? + Matrix::<D>::identity() * damping;
            let jt = jac.transpose();
            if linalg::condition_number(&jt) > MAX_CONDITION {
                dropped += 1;
                continue;
            }
            match linalg::solve(&jt, &(-v)) {
                Some(y) => self.field.param_gradient(&root.x_star, &y, grad_w)?,
                None => dropped += 1,
            }
        }
        Ok(dropped)
    }
}

/// Deformed occupancy of `x_query` under `bones` (whose pose is `bones.pose`).
pub fn occupancy_deformed<const D: usize>(
    model: &ModelParams,
    x_query: &Vector<D>,
    bones: &BoneTransformSet<D>,
) -> Result<(OccupancyValue, CorrespondenceSet<D>)> {
    let q = DeformedEvaluator::new(model, bones)?.forward(x_query)?;
    Ok((OccupancyValue(q.occupancy), q.correspondences))
}

/// Gradient of `upstream · o(x_query)` with respect to both networks.
pub fn occupancy_backward<const D: usize>(
    model: &ModelParams,
    x_query: &Vector<D>,
    bones: &BoneTransformSet<D>,
    upstream: f64,
) -> Result<QueryGradient> {
    let mut eval = DeformedEvaluator::new(model, bones)?;
    let q = eval.forward(x_query)?;
    let mut sigma_f = MlpGrad::zeros_like(&model.occupancy);
    let mut sigma_w = MlpGrad::zeros_like(&model.skinning);
    let dropped_roots = eval.backward(&q, upstream, &mut sigma_f, &mut sigma_w)?;
    Ok(QueryGradient {
        sigma_f,
        sigma_w,
        dropped_roots,
    })
}
