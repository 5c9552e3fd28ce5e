//! Two-bone 3D capsule: the smoke-test scene for the `D = 3` code paths.
//!
//! Each bone carries a capsule around its segment, moved rigidly by its bone
//! transform; the posed shape is the union of those capsules, which gives an
//! exact analytic oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stick::segment_distance;
use crate::skeleton::{rotation_3d, BoneTransformSet, RigidTransform};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleGeometry {
    pub bone_lengths: Vec<f64>,
    pub radius: f64,
}

impl Default for CapsuleGeometry {
    fn default() -> Self {
        Self {
            bone_lengths: vec![1.0, 1.0],
            radius: 0.2,
        }
    }
}

/// Degrees of freedom per joint: bend about z, then swing about y.
pub const CAPSULE_JOINT_DOF: usize = 2;

impl CapsuleGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.bone_lengths.is_empty() || self.bone_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config("capsule.bone_lengths must be non-empty and positive".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("capsule.radius must be > 0".into()));
        }
        Ok(())
    }

    pub fn n_bones(&self) -> usize {
        self.bone_lengths.len()
    }

    pub fn joint_count(&self) -> usize {
        self.bone_lengths.len().saturating_sub(1)
    }

    pub fn pose_dim(&self) -> usize {
        CAPSULE_JOINT_DOF * self.joint_count()
    }

    fn stations(&self) -> Vec<f64> {
        let mut x = -0.5 * self.bone_lengths.iter().sum::<f64>();
        let mut out = vec![x];
        for l in &self.bone_lengths {
            x += l;
            out.push(x);
        }
        out
    }

    pub fn bone_segment(&self, i: usize) -> (Vector<3>, Vector<3>) {
        let s = self.stations();
        (Vector::<3>::new(s[i], 0.0, 0.0), Vector::<3>::new(s[i + 1], 0.0, 0.0))
    }

    pub fn bone_segments(&self) -> Vec<(Vector<3>, Vector<3>)> {
        (0..self.n_bones()).map(|i| self.bone_segment(i)).collect()
    }

    pub fn joint_positions(&self) -> Vec<Vector<3>> {
        let s = self.stations();
        s[1..s.len() - 1].iter().map(|x| Vector::<3>::new(*x, 0.0, 0.0)).collect()
    }

    pub fn canonical_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let h = 0.5 * self.bone_lengths.iter().sum::<f64>() + self.radius;
        let r = self.radius;
        ([-h, -r, -r], [h, r, r])
    }

    /// `angles` holds (bend, swing) per joint, in radians.
    pub fn forward_kinematics(&self, angles: &[f64]) -> Result<BoneTransformSet<3>> {
        if angles.len() != self.pose_dim() {
            return Err(Error::Dimension {
                what: "capsule joint angles",
                expected: self.pose_dim(),
                got: angles.len(),
            });
        }
        let mut current = RigidTransform::<3>::identity();
        let mut transforms = vec![current];
        for (pivot, dof) in self.joint_positions().iter().zip(angles.chunks(CAPSULE_JOINT_DOF)) {
            let r = rotation_3d(&Vector::<3>::z(), dof[0]) * rotation_3d(&Vector::<3>::y(), dof[1]);
            current = current.compose(&RigidTransform::rotation_about(pivot, r));
            transforms.push(current);
        }
        BoneTransformSet::new(transforms, angles.to_vec())
    }
}

/// Analytic occupancy of the posed capsule union.
pub struct CapsuleOracle {
    geometry: CapsuleGeometry,
    bones: BoneTransformSet<3>,
}

impl CapsuleOracle {
    pub fn new(geometry: &CapsuleGeometry, angles: &[f64]) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            geometry: geometry.clone(),
            bones: geometry.forward_kinematics(angles)?,
        })
    }

    pub fn bones(&self) -> &BoneTransformSet<3> {
        &self.bones
    }

    /// Signed clearance from the nearest capsule (negative inside).
    pub fn clearance(&self, x: &Vector<3>) -> f64 {
        (0..self.geometry.n_bones())
            .map(|i| {
                let (a, b) = self.geometry.bone_segment(i);
                segment_distance(&self.bones.transforms[i].apply_inverse(x), &a, &b) - self.geometry.radius
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn label(&self, x: &Vector<3>) -> bool {
        self.clearance(x) <= 0.0
    }

    pub fn deformed_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.geometry.n_bones() {
            let (a, b) = self.geometry.bone_segment(i);
            for p in [a, b] {
                let q = self.bones.transforms[i].apply(&p);
                for k in 0..3 {
                    lo[k] = lo[k].min(q[k] - self.geometry.radius);
                    hi[k] = hi[k].max(q[k] + self.geometry.radius);
                }
            }
        }
        (lo, hi)
    }

    /// Uniform point on the posed surface, excluding parts buried in another capsule.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector<3> {
        let g = &self.geometry;
        let r = g.radius;
        let pi = std::f64::consts::PI;
        let areas: Vec<f64> = g.bone_lengths.iter().map(|l| 2.0 * pi * r * l + 4.0 * pi * r * r).collect();
        let total: f64 = areas.iter().sum();
        loop {
            let mut u = rng.random_range(0.0..total);
            let mut bone = 0;
            while bone + 1 < areas.len() && u >= areas[bone] {
                u -= areas[bone];
                bone += 1;
            }
            let (a, b) = g.bone_segment(bone);
            let len = g.bone_lengths[bone];
            let phi = rng.random_range(0.0..2.0 * pi);
            let local = if u < 2.0 * pi * r * len {
                Vector::<3>::new(a[0] + rng.random_range(0.0..len), r * phi.cos(), r * phi.sin())
            } else {
                // Uniform on a sphere, split into the two end caps.
                let z: f64 = rng.random_range(-1.0..1.0);
                let s = (1.0 - z * z).sqrt();
                let dir = Vector::<3>::new(z, s * phi.cos(), s * phi.sin());
                if z < 0.0 {
                    a + dir * r
                } else {
                    b + dir * r
                }
            };
            let p = self.bones.transforms[bone].apply(&local);
            if self.clearance(&p) > -1e-9 {
                return p;
            }
        }
    }
}
