//! Synthetic articulated shapes, their ground-truth oracles and datasets.

mod capsule;
mod config;
mod dataset;
mod stick;

pub use capsule::{CapsuleGeometry, CapsuleOracle, CAPSULE_JOINT_DOF};
pub use config::{AngleRange, ExperimentConfig, NetConfig, Regime, Scene};
pub use dataset::{
    peek_manifest, Dataset, FrameSample, JointInfo, Manifest, SampleKind, SkeletonInfo, Split, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use stick::{
    oracle_deform, oracle_skinning, RigidObject, StickGeometry, StickOracle, ORACLE_LATTICE_CELLS, ORACLE_WEIGHT_EPS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::skeleton::BoneTransformSet;
use crate::{Result, Vector};

/// Standard deviation of the noise added to near-surface samples.
pub const NEAR_SURFACE_SIGMA: f64 = 0.01;

/// Relative growth of the deformed bounding box for uniform samples.
pub const BOX_INFLATION: f64 = 0.1;

fn split_code(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Test => 2,
    }
}

/// Generator for everything random in one frame.
pub fn frame_rng(seed: u64, split: Split, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_code(split) << 40) | frame as u64);
    rng
}

/// Joint angles (degrees) of every frame in a split.
pub fn frame_angles(config: &ExperimentConfig, split: Split) -> Vec<Vec<f64>> {
    let n_p = config.pose_dim();
    let (frames, range) = match split {
        Split::Train => (config.frames, &config.train_angle_range),
        Split::Test => (config.test_frames, &config.test_angle_range),
    };
    if split == Split::Train && config.regime == Regime::Interpolation {
        // Frames cycle through the angle lattice so the dataset size does not
        // depend on the step.
        let lattice = range.lattice(config.train_step);
        let m = lattice.len();
        return (0..frames)
            .map(|k| (0..n_p).map(|j| lattice[(k / m.pow(j as u32)) % m]).collect())
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(split_code(split) << 50);
    (0..frames).map(|_| (0..n_p).map(|_| range.sample(&mut rng)).collect()).collect()
}

fn inflate<const D: usize>(lo: [f64; D], hi: [f64; D]) -> ([f64; D], [f64; D]) {
    let mut a = lo;
    let mut b = hi;
    for k in 0..D {
        let pad = 0.5 * BOX_INFLATION * (hi[k] - lo[k]);
        a[k] -= pad;
        b[k] += pad;
    }
    (a, b)
}

/// Half uniform samples in the inflated deformed box, half noisy boundary samples.
fn sample_frame<const D: usize, R: Rng>(
    rng: &mut R,
    n: usize,
    bounds: ([f64; D], [f64; D]),
    transforms: BoneTransformSet<D>,
    mut boundary: impl FnMut(&mut R) -> Vector<D>,
    label: impl Fn(&Vector<D>) -> bool,
) -> FrameSample<D> {
    let (lo, hi) = inflate(bounds.0, bounds.1);
    let n_uniform = n / 2;
    let noise = Normal::new(0.0, NEAR_SURFACE_SIGMA).expect("valid sigma");
    let mut points = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    for _ in 0..n_uniform {
        points.push(Vector::<D>::from_fn(|k, _| rng.random_range(lo[k]..=hi[k])));
        kinds.push(SampleKind::Uniform);
    }
    for _ in n_uniform..n {
        let p = boundary(rng);
        points.push(p + Vector::<D>::from_fn(|_, _| noise.sample(rng)));
        kinds.push(SampleKind::NearSurface);
    }
    let labels = points.iter().map(label).collect();
    FrameSample {
        transforms,
        points,
        labels,
        kinds,
    }
}

fn to_vec<const D: usize>(v: &Vector<D>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Canonical skeleton description of the configured scene.
pub fn skeleton_info(config: &ExperimentConfig) -> SkeletonInfo {
    let (canonical_min, canonical_max) = config.canonical_bounds();
    match config.scene {
        Scene::Stick2d => {
            let g = config.effective_geometry();
            SkeletonInfo {
                bones: g.bone_segments().iter().map(|(a, b)| [to_vec(a), to_vec(b)]).collect(),
                joints: g
                    .joint_positions()
                    .iter()
                    .enumerate()
                    .map(|(k, p)| JointInfo {
                        position: to_vec(p),
                        bones: [k, k + 1],
                    })
                    .collect(),
                canonical_min,
                canonical_max,
            }
        }
        Scene::Capsule3d => {
            let g = &config.capsule;
            SkeletonInfo {
                bones: g.bone_segments().iter().map(|(a, b)| [to_vec(a), to_vec(b)]).collect(),
                joints: g
                    .joint_positions()
                    .iter()
                    .enumerate()
                    .map(|(k, p)| JointInfo {
                        position: to_vec(p),
                        bones: [k, k + 1],
                    })
                    .collect(),
                canonical_min,
                canonical_max,
            }
        }
    }
}

fn manifest(config: &ExperimentConfig, split: Split, frame_count: usize) -> Manifest {
    Manifest {
        split,
        frame_count,
        d: config.dimension(),
        n_b: config.n_bones(),
        n_p: config.pose_dim(),
        rigid_object: config.scene == Scene::Stick2d && config.effective_geometry().rigid_object.is_some(),
        skeleton: skeleton_info(config),
        config: config.clone(),
    }
}

/// Frames of the 2D stick scene for one split.
pub fn generate_stick_dataset(config: &ExperimentConfig, split: Split) -> Result<Dataset<2>> {
    config.validate()?;
    let geometry = config.effective_geometry();
    let angles = frame_angles(config, split);
    let frames = angles
        .par_iter()
        .enumerate()
        .map(|(k, deg)| {
            let rad: Vec<f64> = deg.iter().map(|a| a.to_radians()).collect();
            let oracle = StickOracle::new(&geometry, &rad)?;
            let mut rng = frame_rng(config.seed, split, k);
            Ok(sample_frame(
                &mut rng,
                config.samples_per_frame,
                oracle.deformed_bounds(),
                oracle.bones().clone(),
                |r| oracle.sample_boundary(r),
                |x| oracle.label(x),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: manifest(config, split, frames.len()),
        frames,
    })
}

/// Frames of the 3D two-bone capsule scene for one split.
pub fn capsule3d_suite(config: &ExperimentConfig, split: Split) -> Result<Dataset<3>> {
    config.validate()?;
    let angles = frame_angles(config, split);
    let frames = angles
        .par_iter()
        .enumerate()
        .map(|(k, deg)| {
            let rad: Vec<f64> = deg.iter().map(|a| a.to_radians()).collect();
            let oracle = CapsuleOracle::new(&config.capsule, &rad)?;
            let mut rng = frame_rng(config.seed, split, k);
            Ok(sample_frame(
                &mut rng,
                config.samples_per_frame,
                oracle.deformed_bounds(),
                oracle.bones().clone(),
                |r| oracle.sample_boundary(r),
                |x| oracle.label(x),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: manifest(config, split, frames.len()),
        frames,
    })
}

/// A dataset of either dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDataset {
    Stick(Dataset<2>),
    Capsule(Dataset<3>),
}

impl AnyDataset {
    pub fn manifest(&self) -> &Manifest {
        match self {
            AnyDataset::Stick(d) => &d.manifest,
            AnyDataset::Capsule(d) => &d.manifest,
        }
    }

    pub fn save(&self, dir: &std::path::Path, name: &str) -> Result<std::path::PathBuf> {
        match self {
            AnyDataset::Stick(d) => d.save(dir, name),
            AnyDataset::Capsule(d) => d.save(dir, name),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(match peek_manifest(path)?.d {
            3 => AnyDataset::Capsule(Dataset::load(path)?),
            _ => AnyDataset::Stick(Dataset::load(path)?),
        })
    }
}

pub fn generate_dataset(config: &ExperimentConfig, split: Split) -> Result<AnyDataset> {
    Ok(match config.scene {
        Scene::Stick2d => AnyDataset::Stick(generate_stick_dataset(config, split)?),
        Scene::Capsule3d => AnyDataset::Capsule(capsule3d_suite(config, split)?),
    })
}
