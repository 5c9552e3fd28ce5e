//! Backward linear blend skinning ("Back-LBS"): weights predicted in deformed
//! space from the deformed point and the pose, then
//! `x_c = Σ_i w_i(x', p) B_i⁻¹ x'` is fed to the canonical occupancy network.
//! No root finding is involved.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::CheckpointMeta;
use super::{loss_bce, loss_bce_grad, ArticulatedModel, ModelMeta};
use crate::nn::{write_checkpoint, Checkpoint, Mlp, MlpGrad, Tape};
use crate::simdata::ExperimentConfig;
use crate::skeleton::BoneTransformSet;
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct BackLbsParams {
    pub occupancy: Mlp,
    /// `(x', p) -> n_b` softmax weights.
    pub weights: Mlp,
    pub meta: ModelMeta,
}

impl BackLbsParams {
    /// Same occupancy initialization as the forward model for equal seeds.
    pub fn init(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occupancy = Mlp::init(config.occupancy_spec(), &mut rng)?;
        let weights = Mlp::init(config.baseline_weight_spec(), &mut rng)?;
        let model = Self {
            occupancy,
            weights,
            meta: ModelMeta::from_config(config),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let occ_in = m.dim + if m.pose_conditioning { m.pose_dim } else { 0 };
        if self.occupancy.input_dim() != occ_in || self.occupancy.output_dim() != 1 {
            return Err(Error::Config("baseline occupancy network shape does not match".into()));
        }
        if self.weights.input_dim() != m.dim + m.pose_dim || self.weights.output_dim() != m.n_bones {
            return Err(Error::Config("baseline weight network shape does not match".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &ArticulatedModel::<2>::to_checkpoint(self)?)
    }
}

struct BaselinePass<const D: usize> {
    o: f64,
    back: Vec<Vector<D>>,
    tape_w: Tape,
    tape_f: Tape,
}

fn forward_pass<const D: usize>(
    params: &BackLbsParams,
    x: &Vector<D>,
    bones: &BoneTransformSet<D>,
) -> Result<BaselinePass<D>> {
    if bones.pose.len() != params.meta.pose_dim || bones.n_bones() != params.meta.n_bones {
        return Err(Error::Dimension {
            what: "baseline pose vector",
            expected: params.meta.pose_dim,
            got: bones.pose.len(),
        });
    }
    let mut input = Vec::with_capacity(D + bones.pose.len());
    input.extend_from_slice(x.as_slice());
    input.extend_from_slice(&bones.pose);
    let (w, tape_w) = params.weights.forward(&input)?;
    let back: Vec<Vector<D>> = bones.transforms.iter().map(|t| t.apply_inverse(x)).collect();
    let xc: Vector<D> = w.iter().zip(&back).map(|(w, b)| b * *w).sum();
    let pose_in = params.meta.pose_input(&bones.pose)?;
    input.clear();
    input.extend_from_slice(xc.as_slice());
    input.extend_from_slice(pose_in);
    let (y, tape_f) = params.occupancy.forward(&input)?;
    Ok(BaselinePass {
        o: y[0],
        back,
        tape_w,
        tape_f,
    })
}

/// Occupancy of a deformed point under the baseline.
pub fn baseline_backlbs_forward<const D: usize>(
    params: &BackLbsParams,
    x_query: &Vector<D>,
    bones: &BoneTransformSet<D>,
) -> Result<f64> {
    Ok(forward_pass(params, x_query, bones)?.o)
}

/// Accumulates `upstream · ∂o/∂σ` for both baseline networks; returns `o`.
pub fn baseline_backlbs_backward<const D: usize>(
    params: &BackLbsParams,
    x_query: &Vector<D>,
    bones: &BoneTransformSet<D>,
    upstream: impl FnOnce(f64) -> f64,
    grad_f: &mut MlpGrad,
    grad_w: &mut MlpGrad,
) -> Result<f64> {
    let pass = forward_pass(params, x_query, bones)?;
    let g = upstream(pass.o);
    if g != 0.0 {
        let dx = params.occupancy.backward(&pass.tape_f, &[g], grad_f)?;
        let dxc = Vector::<D>::from_column_slice(&dx[..D]);
        let dw: Vec<f64> = pass.back.iter().map(|b| dxc.dot(b)).collect();
        params.weights.backward(&pass.tape_w, &dw, grad_w)?;
    }
    Ok(pass.o)
}

impl<const D: usize> ArticulatedModel<D> for BackLbsParams {
    fn nets(&self) -> (&Mlp, &Mlp) {
        (&self.occupancy, &self.weights)
    }

    fn nets_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.occupancy, &mut self.weights)
    }

    fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    fn predict(&self, bones: &BoneTransformSet<D>, x: &Vector<D>) -> Result<f64> {
        baseline_backlbs_forward(self, x, bones)
    }

    fn bce_backward(
        &self,
        bones: &BoneTransformSet<D>,
        x: &Vector<D>,
        label: bool,
        weight: f64,
        grad_f: &mut MlpGrad,
        grad_w: &mut MlpGrad,
    ) -> Result<(f64, usize)> {
        let o = baseline_backlbs_backward(self, x, bones, |o| weight * loss_bce_grad(o, label), grad_f, grad_w)?;
        Ok((loss_bce(o, label), 0))
    }

    /// Weights at the canonical pose, where deformed and canonical coincide.
    fn joint_weights(&self, x: &Vector<D>) -> Result<(Vec<f64>, Tape)> {
        let mut input = x.as_slice().to_vec();
        input.resize(D + self.meta.pose_dim, 0.0);
        self.weights.forward(&input)
    }

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            baseline: true,
            occupancy: self.occupancy.clone(),
            skinning: self.weights.clone(),
            metadata: serde_json::to_string(&CheckpointMeta::BackLbs { meta: self.meta.clone() })?,
        })
    }
}
