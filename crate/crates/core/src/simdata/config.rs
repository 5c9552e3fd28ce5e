use rand::Rng;
use serde::{Deserialize, Serialize};

use super::capsule::{CapsuleGeometry, CAPSULE_JOINT_DOF};
use super::stick::{RigidObject, StickGeometry};
use crate::nn::{HiddenActivation, MlpSpec, OutputActivation};
use crate::occupancy::CompositionSettings;
use crate::rootfind::SolverSettings;
use crate::train::TrainSettings;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Train on random poses in one range, test on another.
    Extrapolation,
    /// Train on a regular angle lattice, test on random poses in between.
    Interpolation,
    /// Extrapolation with the rigid object present.
    Topology,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scene {
    #[default]
    Stick2d,
    Capsule3d,
}

/// One interval `[lo, hi]` or a union of intervals, in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AngleRange {
    Interval([f64; 2]),
    Union(Vec<[f64; 2]>),
}

impl AngleRange {
    pub fn intervals(&self) -> Vec<[f64; 2]> {
        match self {
            AngleRange::Interval(r) => vec![*r],
            AngleRange::Union(rs) => rs.clone(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let rs = self.intervals();
        if rs.is_empty() {
            return Err(Error::Config(format!("{name} must contain at least one interval")));
        }
        for r in rs {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name}: interval [{}, {}] is not ordered", r[0], r[1])));
            }
        }
        Ok(())
    }

    /// Uniform draw over the union (intervals weighted by length), in degrees.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let rs = self.intervals();
        let total: f64 = rs.iter().map(|r| r[1] - r[0]).sum();
        if total <= 0.0 {
            return rs[0][0];
        }
        let mut u = rng.random_range(0.0..total);
        for r in &rs {
            let len = r[1] - r[0];
            if u < len {
                return r[0] + u;
            }
            u -= len;
        }
        rs[rs.len() - 1][1]
    }

    /// Angles `lo, lo + step, ...` up to `hi` for every interval.
    pub fn lattice(&self, step: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for r in self.intervals() {
            let n = ((r[1] - r[0]) / step + 1e-9).floor() as usize;
            out.extend((0..=n).map(|k| r[0] + k as f64 * step));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub hidden_activation: HiddenActivation,
}

fn default_activation() -> HiddenActivation {
    HiddenActivation::Softplus
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![128; 4],
            hidden_activation: HiddenActivation::Softplus,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, input_dim: usize, output_dim: usize, output: OutputActivation) -> MlpSpec {
        MlpSpec::new(input_dim, output_dim, self.hidden_widths.clone(), self.hidden_activation, output)
    }
}

fn default_sweep_steps() -> Vec<f64> {
    vec![10.0, 20.0, 40.0]
}

fn default_sweep_seeds() -> usize {
    3
}

fn default_gallery() -> Vec<f64> {
    vec![-90.0, -45.0, 0.0, 45.0, 90.0]
}

fn default_validation_frames() -> usize {
    2
}

fn default_render_resolution() -> usize {
    128
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    #[serde(default)]
    pub scene: Scene,
    /// Degrees.
    pub train_angle_range: AngleRange,
    /// Degrees.
    pub test_angle_range: AngleRange,
    /// Lattice spacing of training angles in the interpolation regime, degrees.
    pub train_step: f64,
    pub frames: usize,
    pub test_frames: usize,
    pub samples_per_frame: usize,
    #[serde(default)]
    pub geometry: StickGeometry,
    #[serde(default)]
    pub capsule: CapsuleGeometry,
    #[serde(default)]
    pub occupancy_net: NetConfig,
    #[serde(default)]
    pub skinning_net: NetConfig,
    /// Feed the pose vector to the occupancy network.
    #[serde(default)]
    pub pose_conditioning: bool,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub solver: Option<SolverSettings>,
    #[serde(default)]
    pub composition: CompositionSettings,
    pub seed: u64,
    /// `train_step` values of the interpolation curve.
    #[serde(default = "default_sweep_steps")]
    pub sweep_steps: Vec<f64>,
    #[serde(default = "default_sweep_seeds")]
    pub sweep_seeds: usize,
    /// Joint angles (degrees, applied to every joint) of the image gallery.
    #[serde(default = "default_gallery")]
    pub gallery_degrees: Vec<f64>,
    /// Test frames scored after every epoch for the metrics log.
    #[serde(default = "default_validation_frames")]
    pub validation_frames: usize,
    #[serde(default = "default_render_resolution")]
    pub render_resolution: usize,
}

impl ExperimentConfig {
    /// Configuration of the given regime with the default stick, sizes and optimizer.
    pub fn stick(regime: Regime) -> Self {
        let (train, test) = match regime {
            Regime::Interpolation => (AngleRange::Interval([-60.0, 60.0]), AngleRange::Interval([-60.0, 60.0])),
            _ => (
                AngleRange::Interval([-60.0, 60.0]),
                AngleRange::Union(vec![[-120.0, -60.0], [60.0, 120.0]]),
            ),
        };
        Self {
            regime,
            scene: Scene::Stick2d,
            train_angle_range: train,
            test_angle_range: test,
            train_step: 10.0,
            frames: 100,
            test_frames: 20,
            samples_per_frame: 2000,
            geometry: StickGeometry {
                rigid_object: (regime == Regime::Topology).then(RigidObject::default),
                ..StickGeometry::default()
            },
            capsule: CapsuleGeometry::default(),
            occupancy_net: NetConfig::default(),
            skinning_net: NetConfig::default(),
            pose_conditioning: false,
            train: TrainSettings::default(),
            solver: None,
            composition: CompositionSettings::default(),
            seed: 0,
            sweep_steps: default_sweep_steps(),
            sweep_seeds: default_sweep_seeds(),
            gallery_degrees: default_gallery(),
            validation_frames: default_validation_frames(),
            render_resolution: default_render_resolution(),
        }
    }

    /// The 3D capsule smoke test: bends within one range for training and testing.
    pub fn capsule() -> Self {
        Self {
            scene: Scene::Capsule3d,
            test_angle_range: AngleRange::Interval([-60.0, 60.0]),
            geometry: StickGeometry::default(),
            ..Self::stick(Regime::Extrapolation)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_angle_range.validate("train_angle_range")?;
        self.test_angle_range.validate("test_angle_range")?;
        if !(self.train_step > 0.0 && self.train_step.is_finite()) {
            return Err(Error::Config("train_step must be > 0".into()));
        }
        if self.sweep_steps.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("sweep_steps must all be > 0".into()));
        }
        if self.samples_per_frame < 2 {
            return Err(Error::Config("samples_per_frame must be >= 2".into()));
        }
        if self.render_resolution < 2 {
            return Err(Error::Config("render_resolution must be >= 2".into()));
        }
        match self.scene {
            Scene::Stick2d => self.geometry.validate()?,
            Scene::Capsule3d => self.capsule.validate()?,
        }
        if self.regime == Regime::Topology && self.scene == Scene::Capsule3d {
            return Err(Error::Config("the topology regime needs the 2D stick scene".into()));
        }
        self.occupancy_spec().validate()?;
        self.skinning_spec().validate()?;
        self.train.validate()?;
        self.solver_settings().validate()?;
        self.composition.validate()
    }

    pub fn dimension(&self) -> usize {
        match self.scene {
            Scene::Stick2d => 2,
            Scene::Capsule3d => 3,
        }
    }

    pub fn n_bones(&self) -> usize {
        match self.scene {
            Scene::Stick2d => self.geometry.n_bones(),
            Scene::Capsule3d => self.capsule.n_bones(),
        }
    }

    pub fn pose_dim(&self) -> usize {
        match self.scene {
            Scene::Stick2d => self.geometry.joint_count(),
            Scene::Capsule3d => self.capsule.pose_dim(),
        }
    }

    /// Stick geometry as simulated under this regime (object only for topology).
    pub fn effective_geometry(&self) -> StickGeometry {
        let mut g = self.geometry.clone();
        g.rigid_object = match self.regime {
            Regime::Topology => Some(g.rigid_object.unwrap_or_default()),
            _ => None,
        };
        g
    }

    pub fn canonical_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self.scene {
            Scene::Stick2d => {
                let (lo, hi) = self.effective_geometry().canonical_bounds();
                (lo.to_vec(), hi.to_vec())
            }
            Scene::Capsule3d => {
                let (lo, hi) = self.capsule.canonical_bounds();
                (lo.to_vec(), hi.to_vec())
            }
        }
    }

    /// Explicit solver settings, or defaults scaled to the canonical bounds.
    pub fn solver_settings(&self) -> SolverSettings {
        self.solver.clone().unwrap_or_else(|| {
            let (lo, hi) = self.canonical_bounds();
            SolverSettings::for_bounds(&lo, &hi)
        })
    }

    pub fn occupancy_spec(&self) -> MlpSpec {
        let input = self.dimension() + if self.pose_conditioning { self.pose_dim() } else { 0 };
        self.occupancy_net.spec(input, 1, OutputActivation::Sigmoid)
    }

    pub fn skinning_spec(&self) -> MlpSpec {
        self.skinning_net.spec(self.dimension(), self.n_bones(), OutputActivation::Softmax)
    }

    /// Weight network of the backward-skinning baseline: (deformed point, pose) in.
    pub fn baseline_weight_spec(&self) -> MlpSpec {
        self.skinning_net
            .spec(self.dimension() + self.pose_dim(), self.n_bones(), OutputActivation::Softmax)
    }

    /// Degrees of freedom per joint.
    pub fn joint_dof(&self) -> usize {
        match self.scene {
            Scene::Stick2d => 1,
            Scene::Capsule3d => CAPSULE_JOINT_DOF,
        }
    }
}
