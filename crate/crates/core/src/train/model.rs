use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_bce, loss_bce_grad, BackLbsParams};
use crate::nn::{read_checkpoint, write_checkpoint, Checkpoint, Mlp, MlpGrad, Tape};
use crate::occupancy::{CompositionSettings, DeformedEvaluator};
use crate::rootfind::SolverSettings;
use crate::simdata::{skeleton_info, ExperimentConfig};
use crate::skeleton::{rotation_2d, rotation_3d, BoneTransformSet, RigidTransform};
use crate::{Error, Result, Vector};

/// Shape facts shared by the forward model and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dim: usize,
    pub n_bones: usize,
    pub pose_dim: usize,
    /// Whether the occupancy network receives the pose vector.
    pub pose_conditioning: bool,
    pub canonical_min: Vec<f64>,
    pub canonical_max: Vec<f64>,
    /// Canonical joint pivots of the bone chain; lets a checkpoint pose itself.
    #[serde(default)]
    pub joints: Vec<Vec<f64>>,
}

impl ModelMeta {
    pub fn new(
        dim: usize,
        n_bones: usize,
        pose_dim: usize,
        pose_conditioning: bool,
        canonical_min: Vec<f64>,
        canonical_max: Vec<f64>,
    ) -> Self {
        Self {
            dim,
            n_bones,
            pose_dim,
            pose_conditioning,
            canonical_min,
            canonical_max,
            joints: Vec::new(),
        }
    }

    pub fn from_config(config: &ExperimentConfig) -> Self {
        let (lo, hi) = config.canonical_bounds();
        Self {
            joints: skeleton_info(config).joints.into_iter().map(|j| j.position).collect(),
            ..Self::new(
                config.dimension(),
                config.n_bones(),
                config.pose_dim(),
                config.pose_conditioning,
                lo,
                hi,
            )
        }
    }

    /// Bone transforms of the chain for joint angles in radians.
    ///
    /// Each joint rotates everything after it about its pivot: one angle per
    /// joint in 2D, `(bend about z, swing about y)` in 3D.
    pub fn forward_kinematics<const D: usize>(&self, angles: &[f64]) -> Result<BoneTransformSet<D>> {
        if D != self.dim || self.joints.len() + 1 != self.n_bones || angles.len() != self.pose_dim {
            return Err(Error::Config(format!(
                "cannot pose this model: {} joints, {} bones, pose of {} angles (expected {})",
                self.joints.len(),
                self.n_bones,
                angles.len(),
                self.pose_dim
            )));
        }
        let dof = self.pose_dim / self.joints.len().max(1);
        let mut current = RigidTransform::<D>::identity();
        let mut transforms = vec![current];
        for (pivot, a) in self.joints.iter().zip(angles.chunks(dof.max(1))) {
            let r = match D {
                2 => rotation_2d(a[0]).fixed_view::<D, D>(0, 0).into_owned(),
                3 => (rotation_3d(&Vector::<3>::z(), a[0]) * rotation_3d(&Vector::<3>::y(), a.get(1).copied().unwrap_or(0.0)))
                    .fixed_view::<D, D>(0, 0)
                    .into_owned(),
                _ => return Err(Error::Config(format!("unsupported dimension {D}"))),
            };
            let p = Vector::<D>::from_column_slice(pivot);
            current = current.compose(&RigidTransform::rotation_about(&p, r));
            transforms.push(current);
        }
        BoneTransformSet::new(transforms, angles.to_vec())
    }

    /// The part of `pose` the occupancy network sees.
    pub fn pose_input<'p>(&self, pose: &'p [f64]) -> Result<&'p [f64]> {
        if !self.pose_conditioning {
            return Ok(&[]);
        }
        if pose.len() != self.pose_dim {
            return Err(Error::Dimension {
                what: "pose vector",
                expected: self.pose_dim,
                got: pose.len(),
            });
        }
        Ok(pose)
    }

    /// Occupancy-network pose input at the canonical (all-zero) pose.
    pub fn canonical_pose_input(&self) -> Vec<f64> {
        if self.pose_conditioning {
            vec![0.0; self.pose_dim]
        } else {
            Vec::new()
        }
    }
}

/// The forward-skinning model: canonical occupancy `σ_f` and skinning weights `σ_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub occupancy: Mlp,
    pub skinning: Mlp,
    pub composition: CompositionSettings,
    pub solver: SolverSettings,
    pub meta: ModelMeta,
}

impl ModelParams {
    pub fn init(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occupancy = Mlp::init(config.occupancy_spec(), &mut rng)?;
        let skinning = Mlp::init(config.skinning_spec(), &mut rng)?;
        let model = Self {
            occupancy,
            skinning,
            composition: config.composition.clone(),
            solver: config.solver_settings(),
            meta: ModelMeta::from_config(config),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let occ_in = m.dim + if m.pose_conditioning { m.pose_dim } else { 0 };
        if self.occupancy.input_dim() != occ_in || self.occupancy.output_dim() != 1 {
            return Err(Error::Config("occupancy network shape does not match the model".into()));
        }
        if self.skinning.input_dim() != m.dim || self.skinning.output_dim() != m.n_bones {
            return Err(Error::Config("skinning network shape does not match the model".into()));
        }
        self.solver.validate()?;
        self.composition.validate()
    }

    pub fn pose_input<'p>(&self, pose: &'p [f64]) -> Result<&'p [f64]> {
        self.meta.pose_input(pose)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &ArticulatedModel::<2>::to_checkpoint(self)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub(super) enum CheckpointMeta {
    Forward {
        meta: ModelMeta,
        composition: CompositionSettings,
        solver: SolverSettings,
    },
    BackLbs {
        meta: ModelMeta,
    },
}

/// A model read from a checkpoint, either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Forward(ModelParams),
    Baseline(BackLbsParams),
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        let model = match (meta, ckpt.baseline) {
            (
                CheckpointMeta::Forward {
                    meta,
                    composition,
                    solver,
                },
                false,
            ) => {
                let m = ModelParams {
                    occupancy: ckpt.occupancy,
                    skinning: ckpt.skinning,
                    composition,
                    solver,
                    meta,
                };
                m.validate()?;
                LoadedModel::Forward(m)
            }
            (CheckpointMeta::BackLbs { meta }, true) => {
                let m = BackLbsParams {
                    occupancy: ckpt.occupancy,
                    weights: ckpt.skinning,
                    meta,
                };
                m.validate()?;
                LoadedModel::Baseline(m)
            }
            _ => return Err(Error::Config("checkpoint baseline flag disagrees with its metadata".into())),
        };
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(BufReader::new(File::open(path)?))?)
    }

    pub fn meta(&self) -> &ModelMeta {
        match self {
            LoadedModel::Forward(m) => &m.meta,
            LoadedModel::Baseline(m) => &m.meta,
        }
    }
}

/// What training and evaluation need from a model of deformed occupancy.
pub trait ArticulatedModel<const D: usize>: Sync {
    /// `(occupancy network, weight network)`.
    fn nets(&self) -> (&Mlp, &Mlp);
    fn nets_mut(&mut self) -> (&mut Mlp, &mut Mlp);
    fn meta(&self) -> &ModelMeta;

    /// Occupancy probability of a deformed point.
    fn predict(&self, bones: &BoneTransformSet<D>, x: &Vector<D>) -> Result<f64>;

    /// BCE of one labeled point; `weight · ∂BCE/∂σ` is accumulated into the
    /// gradients. Returns the loss and the number of dropped implicit terms.
    fn bce_backward(
        &self,
        bones: &BoneTransformSet<D>,
        x: &Vector<D>,
        label: bool,
        weight: f64,
        grad_f: &mut MlpGrad,
        grad_w: &mut MlpGrad,
    ) -> Result<(f64, usize)>;

    /// Weight-network output at a canonical point under the canonical pose.
    fn joint_weights(&self, x: &Vector<D>) -> Result<(Vec<f64>, Tape)>;

    fn to_checkpoint(&self) -> Result<Checkpoint>;
}

impl<const D: usize> ArticulatedModel<D> for ModelParams {
    fn nets(&self) -> (&Mlp, &Mlp) {
        (&self.occupancy, &self.skinning)
    }

    fn nets_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.occupancy, &mut self.skinning)
    }

    fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    fn predict(&self, bones: &BoneTransformSet<D>, x: &Vector<D>) -> Result<f64> {
        Ok(DeformedEvaluator::new(self, bones)?.forward(x)?.occupancy)
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
        let mut eval = DeformedEvaluator::new(self, bones)?;
        let q = eval.forward(x)?;
        let upstream = weight * loss_bce_grad(q.occupancy, label);
        let dropped = if upstream != 0.0 {
            eval.backward(&q, upstream, grad_f, grad_w)?
        } else {
            0
        };
        Ok((loss_bce(q.occupancy, label), dropped))
    }

    fn joint_weights(&self, x: &Vector<D>) -> Result<(Vec<f64>, Tape)> {
        self.skinning.forward(x.as_slice())
    }

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            baseline: false,
            occupancy: self.occupancy.clone(),
            skinning: self.skinning.clone(),
            metadata: serde_json::to_string(&CheckpointMeta::Forward {
                meta: self.meta.clone(),
                composition: self.composition.clone(),
                solver: self.solver.clone(),
            })?,
        })
    }
}
