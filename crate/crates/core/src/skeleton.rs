//! Bone transforms and the linear-blend-skinning deformation field.
//!
//! The skinning weights are a function of the canonical point only; the pose
//! enters the deformation solely through the bone transforms, so nothing in
//! this module lets a pose reach the weight network.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::nn::{Mlp, MlpGrad, Tape};
use crate::simdata::StickGeometry;
use crate::{Error, Matrix, Result, Vector};

const RIGIDITY_TOL: f64 = 1e-10;

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<const D: usize> {
    pub rotation: Matrix<D>,
    pub translation: Vector<D>,
}

impl<const D: usize> RigidTransform<D> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix::<D>::identity(),
            translation: Vector::<D>::zeros(),
        }
    }

    /// Checked constructor: `rotation` must be orthonormal with determinant +1.
    pub fn new(rotation: Matrix<D>, translation: Vector<D>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_rigid() {
            return Err(Error::Config("rotation is not orthonormal with det +1".into()));
        }
        Ok(t)
    }

    pub fn translation(t: Vector<D>) -> Self {
        Self {
            rotation: Matrix::<D>::identity(),
            translation: t,
        }
    }

    /// Rotation by `rotation` about `pivot`.
    pub fn rotation_about(pivot: &Vector<D>, rotation: Matrix<D>) -> Self {
        Self {
            rotation,
            translation: pivot - rotation * pivot,
        }
    }

    pub fn is_rigid(&self) -> bool {
        let orth = (self.rotation.transpose() * self.rotation - Matrix::<D>::identity()).amax();
        orth <= RIGIDITY_TOL
            && (crate::linalg::determinant(&self.rotation) - 1.0).abs() <= RIGIDITY_TOL
            && self.translation.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, x: &Vector<D>) -> Vector<D> {
        self.rotation * x + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, y: &Vector<D>) -> Vector<D> {
        self.rotation.transpose() * (y - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major `(D+1) x (D+1)` homogeneous matrix.
    pub fn to_homogeneous(&self) -> Vec<f64> {
        let n = D + 1;
        let mut m = vec![0.0; n * n];
        for r in 0..D {
            for c in 0..D {
                m[r * n + c] = self.rotation[(r, c)];
            }
            m[r * n + D] = self.translation[r];
        }
        m[n * n - 1] = 1.0;
        m
    }

    pub fn from_homogeneous(m: &[f64]) -> Result<Self> {
        let n = D + 1;
        if m.len() != n * n {
            return Err(Error::Dimension {
                what: "homogeneous matrix",
                expected: n * n,
                got: m.len(),
            });
        }
        let last_row_ok = (0..D).all(|c| m[D * n + c] == 0.0) && m[n * n - 1] == 1.0;
        if !last_row_ok {
            return Err(Error::Config("homogeneous matrix has an invalid last row".into()));
        }
        let rotation = Matrix::<D>::from_fn(|r, c| m[r * n + c]);
        let translation = Vector::<D>::from_fn(|r, _| m[r * n + D]);
        Self::new(rotation, translation)
    }
}

pub fn rotation_2d(angle: f64) -> Matrix<2> {
    let (s, c) = angle.sin_cos();
    Matrix::<2>::new(c, -s, s, c)
}

/// Rotation about a unit `axis` (Rodrigues).
pub fn rotation_3d(axis: &Vector<3>, angle: f64) -> Matrix<3> {
    let k = axis.normalize();
    let kx = Matrix::<3>::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let (s, c) = angle.sin_cos();
    Matrix::<3>::identity() + kx * s + kx * kx * (1.0 - c)
}

/// Bone transforms of one frame together with its pose vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneTransformSet<const D: usize> {
    pub transforms: Vec<RigidTransform<D>>,
    pub pose: Vec<f64>,
}

impl<const D: usize> BoneTransformSet<D> {
    pub fn new(transforms: Vec<RigidTransform<D>>, pose: Vec<f64>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::Config("a skeleton needs at least one bone".into()));
        }
        if pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose vector".into()));
        }
        Ok(Self { transforms, pose })
    }

    pub fn identity(n_bones: usize, pose_dim: usize) -> Self {
        Self {
            transforms: vec![RigidTransform::identity(); n_bones],
            pose: vec![0.0; pose_dim],
        }
    }

    pub fn n_bones(&self) -> usize {
        self.transforms.len()
    }
}

/// Convex per-bone weights of one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinningWeights(pub Vec<f64>);

impl SkinningWeights {
    /// Nonnegative and summing to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.0.iter().all(|&w| w >= 0.0 && w.is_finite())
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

fn check_point<const D: usize>(x: &Vector<D>) -> Result<()> {
    if !linalg::is_finite(x) {
        return Err(Error::NonFinite(format!("point {:?}", x.as_slice())));
    }
    Ok(())
}

fn check_field<const D: usize>(sigma_w: &Mlp, n_bones: usize) -> Result<()> {
    if sigma_w.input_dim() != D {
        return Err(Error::Dimension {
            what: "skinning network input",
            expected: D,
            got: sigma_w.input_dim(),
        });
    }
    if sigma_w.output_dim() != n_bones {
        return Err(Error::Dimension {
            what: "skinning network output (bones)",
            expected: n_bones,
            got: sigma_w.output_dim(),
        });
    }
    Ok(())
}

/// Skinning weights of a canonical point.
pub fn skin_weights<const D: usize>(sigma_w: &Mlp, x: &Vector<D>) -> Result<SkinningWeights> {
    check_point(x)?;
    let (w, _) = sigma_w.forward(x.as_slice())?;
    Ok(SkinningWeights(w))
}

/// Reusable evaluator of the LBS field for one weight network and one frame.
///
/// Holds a scratch tape so repeated evaluations (as in root finding) do not
/// allocate.
pub struct LbsField<'a, const D: usize> {
    sigma_w: &'a Mlp,
    bones: &'a BoneTransformSet<D>,
    tape: Tape,
}

impl<'a, const D: usize> LbsField<'a, D> {
    pub fn new(sigma_w: &'a Mlp, bones: &'a BoneTransformSet<D>) -> Result<Self> {
        check_field::<D>(sigma_w, bones.n_bones())?;
        Ok(Self {
            sigma_w,
            bones,
            tape: Tape::new(),
        })
    }

    pub fn bones(&self) -> &BoneTransformSet<D> {
        self.bones
    }

    pub fn n_bones(&self) -> usize {
        self.bones.n_bones()
    }

    /// `Σ_i w_i(x) (R_i x + t_i)`
    pub fn deform(&mut self, x: &Vector<D>) -> Result<Vector<D>> {
        check_point(x)?;
        self.sigma_w.forward_into(x.as_slice(), &mut self.tape)?;
        let w = self.tape.output();
        let mut y = Vector::<D>::zeros();
        for (wi, b) in w.iter().zip(&self.bones.transforms) {
            y += b.apply(x) * *wi;
        }
        Ok(y)
    }

    /// `∂d/∂x = Σ_i w_i R_i + Σ_i (R_i x + t_i) ∇w_i(x)ᵀ`
    pub fn jacobian(&mut self, x: &Vector<D>) -> Result<Matrix<D>> {
        check_point(x)?;
        self.sigma_w.forward_into(x.as_slice(), &mut self.tape)?;
        let w = self.tape.output().to_vec();
        let posed: Vec<Vector<D>> = self.bones.transforms.iter().map(|b| b.apply(x)).collect();
        let mut jac = Matrix::<D>::zeros();
        for (wi, b) in w.iter().zip(&self.bones.transforms) {
            jac += b.rotation * *wi;
        }
        // Row j of the weight term is the VJP with cotangent (T_1[j], .., T_nb[j]).
        let mut dy = vec![0.0; posed.len()];
        for j in 0..D {
            for (d, p) in dy.iter_mut().zip(&posed) {
                *d = p[j];
            }
            let row = self.sigma_w.backward_input(&self.tape, &dy)?;
            for (c, v) in row.into_iter().enumerate() {
                jac[(j, c)] += v;
            }
        }
        Ok(jac)
    }

    /// Adds `upstreamᵀ ∂d(x)/∂σ_w` into `grad`.
    pub fn param_gradient(&mut self, x: &Vector<D>, upstream: &Vector<D>, grad: &mut MlpGrad) -> Result<()> {
        check_point(x)?;
        self.sigma_w.forward_into(x.as_slice(), &mut self.tape)?;
        let dy: Vec<f64> = self
            .bones
            .transforms
            .iter()
            .map(|b| upstream.dot(&b.apply(x)))
            .collect();
        self.sigma_w.backward(&self.tape, &dy, grad)?;
        Ok(())
    }
}

pub fn lbs_deform<const D: usize>(sigma_w: &Mlp, x: &Vector<D>, bones: &BoneTransformSet<D>) -> Result<Vector<D>> {
    LbsField::new(sigma_w, bones)?.deform(x)
}

pub fn lbs_spatial_jacobian<const D: usize>(
    sigma_w: &Mlp,
    x: &Vector<D>,
    bones: &BoneTransformSet<D>,
) -> Result<Matrix<D>> {
    LbsField::new(sigma_w, bones)?.jacobian(x)
}

pub fn lbs_param_gradient<const D: usize>(
    sigma_w: &Mlp,
    x: &Vector<D>,
    bones: &BoneTransformSet<D>,
    upstream: &Vector<D>,
) -> Result<MlpGrad> {
    let mut grad = MlpGrad::zeros_like(sigma_w);
    LbsField::new(sigma_w, bones)?.param_gradient(x, upstream, &mut grad)?;
    Ok(grad)
}

/// Bone transforms of a planar kinematic chain.
///
/// Bone 0 is the fixed root. Joint `k` sits between bones `k` and `k + 1`,
/// and its angle rotates everything after it about the joint's canonical
/// position, so transforms compose down the chain. All-zero angles give the
/// canonical (straight) pose.
pub fn forward_kinematics_stick(angles: &[f64], geometry: &StickGeometry) -> Result<BoneTransformSet<2>> {
    let joints = geometry.joint_positions();
    if angles.len() != joints.len() {
        return Err(Error::Dimension {
            what: "joint angles",
            expected: joints.len(),
            got: angles.len(),
        });
    }
    let mut transforms = Vec::with_capacity(joints.len() + 1);
    let mut current = RigidTransform::<2>::identity();
    transforms.push(current);
    for (pivot, &angle) in joints.iter().zip(angles) {
        current = current.compose(&RigidTransform::rotation_about(pivot, rotation_2d(angle)));
        transforms.push(current);
    }
    BoneTransformSet::new(transforms, angles.to_vec())
}
