//! The planar articulated stick, its ground-truth skinning and the lattice
//! occupancy oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::skeleton::{forward_kinematics_stick, rotation_2d, BoneTransformSet, RigidTransform, SkinningWeights};
use crate::{Error, Result, Vector};

/// Regularizer in the inverse-distance ground-truth weights.
pub const ORACLE_WEIGHT_EPS: f64 = 1e-3;

/// Cells of the oracle lattice along the stick's long axis.
pub const ORACLE_LATTICE_CELLS: usize = 1000;

/// Rigid rectangle that follows one bone without blending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidObject {
    /// Side lengths (x, y) before rotation.
    pub size: [f64; 2],
    /// Canonical center.
    pub center: [f64; 2],
    /// Canonical rotation in degrees.
    #[serde(default)]
    pub angle_deg: f64,
    /// Bone whose transform moves the object.
    #[serde(default)]
    pub bone: usize,
}

impl Default for RigidObject {
    /// 0.3 x 0.3 square whose lower edge sits 0.25 above the joint.
    fn default() -> Self {
        Self {
            size: [0.3, 0.3],
            center: [0.0, 0.4],
            angle_deg: 0.0,
            bone: 0,
        }
    }
}

impl RigidObject {
    pub fn placement(&self) -> RigidTransform<2> {
        RigidTransform {
            rotation: rotation_2d(self.angle_deg.to_radians()),
            translation: Vector::<2>::new(self.center[0], self.center[1]),
        }
    }

    /// Inside test in canonical space.
    pub fn contains_canonical(&self, x: &Vector<2>) -> bool {
        let local = self.placement().apply_inverse(x);
        local[0].abs() <= 0.5 * self.size[0] && local[1].abs() <= 0.5 * self.size[1]
    }

    pub fn corners(&self) -> [Vector<2>; 4] {
        let (hx, hy) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let p = self.placement();
        [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)].map(|(a, b)| p.apply(&Vector::<2>::new(a, b)))
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.size[0] + self.size[1])
    }
}

/// Straight chain of bones along the x axis, centered at the origin, with a
/// capsule-shaped cross-section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StickGeometry {
    pub bone_lengths: Vec<f64>,
    pub half_width: f64,
    #[serde(default)]
    pub rigid_object: Option<RigidObject>,
}

impl Default for StickGeometry {
    fn default() -> Self {
        Self {
            bone_lengths: vec![1.0, 1.0],
            half_width: 0.1,
            rigid_object: None,
        }
    }
}

pub(crate) fn segment_distance<const D: usize>(x: &Vector<D>, a: &Vector<D>, b: &Vector<D>) -> f64 {
    let ab = b - a;
    let t = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (x - (a + ab * t)).norm()
}

impl StickGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.bone_lengths.is_empty() || self.bone_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config("geometry.bone_lengths must be non-empty and positive".into()));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::Config("geometry.half_width must be > 0".into()));
        }
        if let Some(obj) = &self.rigid_object {
            if obj.size.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config("geometry.rigid_object.size must be positive".into()));
            }
            if obj.bone >= self.n_bones() {
                return Err(Error::Config(format!(
                    "geometry.rigid_object.bone {} out of range for {} bones",
                    obj.bone,
                    self.n_bones()
                )));
            }
        }
        Ok(())
    }

    pub fn n_bones(&self) -> usize {
        self.bone_lengths.len()
    }

    pub fn joint_count(&self) -> usize {
        self.bone_lengths.len().saturating_sub(1)
    }

    pub fn total_length(&self) -> f64 {
        self.bone_lengths.iter().sum()
    }

    /// Bone end points along the x axis.
    fn stations(&self) -> Vec<f64> {
        let mut x = -0.5 * self.total_length();
        let mut out = vec![x];
        for l in &self.bone_lengths {
            x += l;
            out.push(x);
        }
        out
    }

    pub fn bone_segment(&self, i: usize) -> (Vector<2>, Vector<2>) {
        let s = self.stations();
        (Vector::<2>::new(s[i], 0.0), Vector::<2>::new(s[i + 1], 0.0))
    }

    pub fn bone_segments(&self) -> Vec<(Vector<2>, Vector<2>)> {
        (0..self.n_bones()).map(|i| self.bone_segment(i)).collect()
    }

    pub fn joint_positions(&self) -> Vec<Vector<2>> {
        let s = self.stations();
        s[1..s.len() - 1].iter().map(|x| Vector::<2>::new(*x, 0.0)).collect()
    }

    /// Canonical inside test for the stick alone.
    pub fn stick_contains(&self, x: &Vector<2>) -> bool {
        let (a, _) = self.bone_segment(0);
        let (_, b) = self.bone_segment(self.n_bones() - 1);
        segment_distance(x, &a, &b) <= self.half_width
    }

    /// Canonical inside test for stick and object.
    pub fn canonical_contains(&self, x: &Vector<2>) -> bool {
        self.stick_contains(x) || self.rigid_object.as_ref().is_some_and(|o| o.contains_canonical(x))
    }

    pub fn stick_bounds(&self) -> ([f64; 2], [f64; 2]) {
        let h = 0.5 * self.total_length() + self.half_width;
        ([-h, -self.half_width], [h, self.half_width])
    }

    /// Canonical bounding box of everything, object included.
    pub fn canonical_bounds(&self) -> ([f64; 2], [f64; 2]) {
        let (mut lo, mut hi) = self.stick_bounds();
        if let Some(obj) = &self.rigid_object {
            for c in obj.corners() {
                for k in 0..2 {
                    lo[k] = lo[k].min(c[k]);
                    hi[k] = hi[k].max(c[k]);
                }
            }
        }
        (lo, hi)
    }

    pub fn forward_kinematics(&self, angles: &[f64]) -> Result<BoneTransformSet<2>> {
        forward_kinematics_stick(angles, self)
    }

    /// Uniform sample on the canonical stick outline (a stadium), by arc length.
    pub fn sample_stick_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector<2> {
        let l = self.total_length();
        let hw = self.half_width;
        let cap = std::f64::consts::PI * hw;
        let u = rng.random_range(0.0..2.0 * l + 2.0 * cap);
        let x0 = -0.5 * l;
        if u < l {
            Vector::<2>::new(x0 + u, hw)
        } else if u < 2.0 * l {
            Vector::<2>::new(x0 + (u - l), -hw)
        } else if u < 2.0 * l + cap {
            let t = (u - 2.0 * l) / hw + 0.5 * std::f64::consts::PI;
            Vector::<2>::new(x0 + hw * t.cos(), hw * t.sin())
        } else {
            let t = (u - 2.0 * l - cap) / hw - 0.5 * std::f64::consts::PI;
            Vector::<2>::new(-x0 + hw * t.cos(), hw * t.sin())
        }
    }

    pub fn stick_perimeter(&self) -> f64 {
        2.0 * self.total_length() + 2.0 * std::f64::consts::PI * self.half_width
    }

    /// Analytic area of the canonical stick.
    pub fn stick_area(&self) -> f64 {
        2.0 * self.half_width * self.total_length() + std::f64::consts::PI * self.half_width * self.half_width
    }
}

/// Ground-truth skinning weights: inverse distance to each bone segment.
pub fn oracle_skinning(geometry: &StickGeometry, x: &Vector<2>) -> SkinningWeights {
    let mut w: Vec<f64> = geometry
        .bone_segments()
        .iter()
        .map(|(a, b)| 1.0 / (segment_distance(x, a, b) + ORACLE_WEIGHT_EPS))
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    SkinningWeights(w)
}

/// Ground-truth forward skinning of a canonical stick point.
pub fn oracle_deform(geometry: &StickGeometry, bones: &BoneTransformSet<2>, x: &Vector<2>) -> Vector<2> {
    let w = oracle_skinning(geometry, x);
    w.0.iter().zip(&bones.transforms).map(|(w, t)| t.apply(x) * *w).sum()
}

/// Occupancy oracle for one pose.
///
/// The canonical stick is covered by a lattice whose vertices are pushed
/// forward with the ground-truth skinning. A deformed point is occupied when
/// some lattice triangle contains it and the piecewise-linear preimage,
/// polished by a few Newton steps on the exact map, lies in the canonical
/// stick. The object is tested analytically through its rigid transform.
pub struct StickOracle {
    geometry: StickGeometry,
    bones: BoneTransformSet<2>,
    canonical: Vec<Vector<2>>,
    deformed: Vec<Vector<2>>,
    triangles: Vec<[u32; 3]>,
    hash: SpatialHash,
    object_transform: Option<RigidTransform<2>>,
}

struct SpatialHash {
    min: Vector<2>,
    cell: f64,
    dims: [usize; 2],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl SpatialHash {
    fn cell_of(&self, p: &Vector<2>) -> Option<[usize; 2]> {
        let mut out = [0; 2];
        for k in 0..2 {
            let c = ((p[k] - self.min[k]) / self.cell).floor();
            if !(c >= 0.0 && c < self.dims[k] as f64) {
                return None;
            }
            out[k] = c as usize;
        }
        Some(out)
    }

    fn build(points: &[Vector<2>], triangles: &[[u32; 3]], cell: f64) -> Self {
        let mut min = Vector::<2>::repeat(f64::INFINITY);
        let mut max = Vector::<2>::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let dims = [0, 1].map(|k| (((max[k] - min[k]) / cell).floor() as usize + 1).max(1));
        let ranges: Vec<[usize; 4]> = triangles
            .iter()
            .map(|t| {
                let (mut lo, mut hi) = (points[t[0] as usize], points[t[0] as usize]);
                for &v in &t[1..] {
                    lo = lo.inf(&points[v as usize]);
                    hi = hi.sup(&points[v as usize]);
                }
                let c = |v: f64, k: usize| (((v - min[k]) / cell).floor().max(0.0) as usize).min(dims[k] - 1);
                [c(lo[0], 0), c(hi[0], 0), c(lo[1], 1), c(hi[1], 1)]
            })
            .collect();
        let mut counts = vec![0u32; dims[0] * dims[1] + 1];
        for r in &ranges {
            for j in r[2]..=r[3] {
                for i in r[0]..=r[1] {
                    counts[j * dims[0] + i + 1] += 1;
                }
            }
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; *counts.last().unwrap() as usize];
        for (t, r) in ranges.iter().enumerate() {
            for j in r[2]..=r[3] {
                for i in r[0]..=r[1] {
                    let slot = &mut fill[j * dims[0] + i];
                    items[*slot as usize] = t as u32;
                    *slot += 1;
                }
            }
        }
        Self {
            min,
            cell,
            dims,
            starts: counts,
            items,
        }
    }

    fn candidates(&self, p: &Vector<2>) -> &[u32] {
        match self.cell_of(p) {
            Some([i, j]) => {
                let c = j * self.dims[0] + i;
                &self.items[self.starts[c] as usize..self.starts[c + 1] as usize]
            }
            None => &[],
        }
    }
}

impl StickOracle {
    pub fn new(geometry: &StickGeometry, angles: &[f64]) -> Result<Self> {
        Self::with_resolution(geometry, angles, ORACLE_LATTICE_CELLS)
    }

    pub fn with_resolution(geometry: &StickGeometry, angles: &[f64], cells: usize) -> Result<Self> {
        geometry.validate()?;
        let bones = geometry.forward_kinematics(angles)?;
        let (lo, hi) = geometry.stick_bounds();
        let h = (hi[0] - lo[0]) / cells as f64;
        let margin = 2.0 * h;
        let nx = cells + 4;
        let ny = (((hi[1] - lo[1]) + 2.0 * margin) / h).ceil() as usize;
        let x0 = Vector::<2>::new(lo[0] - margin, lo[1] - margin);
        let (vx, vy) = (nx + 1, ny + 1);
        let mut canonical = Vec::with_capacity(vx * vy);
        for j in 0..vy {
            for i in 0..vx {
                canonical.push(x0 + Vector::<2>::new(i as f64 * h, j as f64 * h));
            }
        }
        let deformed: Vec<Vector<2>> = canonical.iter().map(|x| oracle_deform(geometry, &bones, x)).collect();
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        let reach = geometry.half_width + 2.0 * h;
        let (a, _) = geometry.bone_segment(0);
        let (_, b) = geometry.bone_segment(geometry.n_bones() - 1);
        for j in 0..ny {
            for i in 0..nx {
                let v00 = (j * vx + i) as u32;
                let (v10, v01, v11) = (v00 + 1, v00 + vx as u32, v00 + vx as u32 + 1);
                let center = x0 + Vector::<2>::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                if segment_distance(&center, &a, &b) > reach {
                    continue;
                }
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let hash = SpatialHash::build(&deformed, &triangles, 2.0 * h);
        let object_transform = geometry
            .rigid_object
            .as_ref()
            .map(|o| bones.transforms[o.bone].compose(&o.placement()));
        Ok(Self {
            geometry: geometry.clone(),
            bones,
            canonical,
            deformed,
            triangles,
            hash,
            object_transform,
        })
    }

    pub fn bones(&self) -> &BoneTransformSet<2> {
        &self.bones
    }

    pub fn geometry(&self) -> &StickGeometry {
        &self.geometry
    }

    pub fn object_contains(&self, x: &Vector<2>) -> bool {
        match (&self.object_transform, &self.geometry.rigid_object) {
            (Some(t), Some(o)) => {
                let local = t.apply_inverse(x);
                local[0].abs() <= 0.5 * o.size[0] && local[1].abs() <= 0.5 * o.size[1]
            }
            _ => false,
        }
    }

    /// Canonical preimages of `x` found through the lattice.
    pub fn preimages(&self, x: &Vector<2>) -> Vec<Vector<2>> {
        let mut out = Vec::new();
        for &t in self.hash.candidates(x) {
            let [i, j, k] = self.triangles[t as usize].map(|v| v as usize);
            let (a, b, c) = (self.deformed[i], self.deformed[j], self.deformed[k]);
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            if det.abs() < 1e-300 {
                continue;
            }
            let l1 = ((x[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (x[1] - a[1])) / det;
            let l2 = ((b[0] - a[0]) * (x[1] - a[1]) - (x[0] - a[0]) * (b[1] - a[1])) / det;
            let l0 = 1.0 - l1 - l2;
            let tol = -1e-9;
            if l0 >= tol && l1 >= tol && l2 >= tol {
                let p = self.canonical[i] * l0 + self.canonical[j] * l1 + self.canonical[k] * l2;
                out.push(self.polish(x, p));
            }
        }
        out
    }

    /// Newton steps on the exact ground-truth map, kept only if they reduce the residual.
    fn polish(&self, target: &Vector<2>, mut p: Vector<2>) -> Vector<2> {
        let f = |p: &Vector<2>| oracle_deform(&self.geometry, &self.bones, p);
        let mut r = f(&p) - target;
        for _ in 0..3 {
            let h = 1e-7;
            let jx = (f(&(p + Vector::<2>::new(h, 0.0))) - f(&(p - Vector::<2>::new(h, 0.0)))) / (2.0 * h);
            let jy = (f(&(p + Vector::<2>::new(0.0, h))) - f(&(p - Vector::<2>::new(0.0, h)))) / (2.0 * h);
            let j = crate::Matrix::<2>::from_columns(&[jx, jy]);
            let Some(step) = crate::linalg::solve(&j, &r) else { break };
            let q = p - step;
            let rq = f(&q) - target;
            if rq.norm() >= r.norm() || (q - p).norm() > 0.01 {
                break;
            }
            p = q;
            r = rq;
        }
        p
    }

    pub fn stick_contains(&self, x: &Vector<2>) -> bool {
        self.preimages(x).iter().any(|p| self.geometry.stick_contains(p))
    }

    pub fn label(&self, x: &Vector<2>) -> bool {
        self.object_contains(x) || self.stick_contains(x)
    }

    /// Bounding box of the deformed stick and object.
    pub fn deformed_bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut take = |p: &Vector<2>| {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        };
        for (c, d) in self.canonical.iter().zip(&self.deformed) {
            if self.geometry.stick_contains(c) {
                take(d);
            }
        }
        if let (Some(t), Some(o)) = (&self.object_transform, &self.geometry.rigid_object) {
            for c in o.corners() {
                take(&t.apply(&o.placement().apply_inverse(&c)));
            }
        }
        (lo, hi)
    }

    /// Deformed position of a canonical boundary point and whether it still
    /// lies on the deformed boundary (not swallowed by another part).
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector<2> {
        let stick_len = self.geometry.stick_perimeter();
        let obj_len = self.geometry.rigid_object.as_ref().map_or(0.0, |o| o.perimeter());
        loop {
            let p = if rng.random_range(0.0..stick_len + obj_len) < stick_len {
                let c = self.geometry.sample_stick_boundary(rng);
                oracle_deform(&self.geometry, &self.bones, &c)
            } else {
                let o = self.geometry.rigid_object.as_ref().unwrap();
                let t = self.object_transform.unwrap();
                let (w, hgt) = (o.size[0], o.size[1]);
                let u = rng.random_range(0.0..o.perimeter());
                let local = if u < w {
                    Vector::<2>::new(u - 0.5 * w, -0.5 * hgt)
                } else if u < w + hgt {
                    Vector::<2>::new(0.5 * w, u - w - 0.5 * hgt)
                } else if u < 2.0 * w + hgt {
                    Vector::<2>::new(u - w - hgt - 0.5 * w, 0.5 * hgt)
                } else {
                    Vector::<2>::new(-0.5 * w, u - 2.0 * w - hgt - 0.5 * hgt)
                };
                t.apply(&local)
            };
            if self.on_boundary(&p, 3e-3) {
                return p;
            }
        }
    }

    fn on_boundary(&self, p: &Vector<2>, delta: f64) -> bool {
        let labels = [(delta, 0.0), (-delta, 0.0), (0.0, delta), (0.0, -delta)]
            .map(|(a, b)| self.label(&(p + Vector::<2>::new(a, b))));
        labels.iter().any(|l| *l) && labels.iter().any(|l| !*l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry_layout() {
        let g = StickGeometry::default();
        assert_eq!(g.joint_positions(), vec![Vector::<2>::zeros()]);
        assert_eq!(g.bone_segment(1), (Vector::<2>::zeros(), Vector::<2>::new(1.0, 0.0)));
        assert!(g.canonical_contains(&Vector::<2>::new(0.0, 0.0)));
        assert!(!g.canonical_contains(&Vector::<2>::new(0.0, 0.4)));
        let with_obj = StickGeometry {
            rigid_object: Some(RigidObject::default()),
            ..g.clone()
        };
        assert!(with_obj.canonical_contains(&Vector::<2>::new(0.0, 0.4)));
        assert!(!with_obj.canonical_contains(&Vector::<2>::new(0.0, 0.2)));
        let (lo, hi) = with_obj.canonical_bounds();
        assert_eq!(lo, [-1.1, -0.1]);
        assert_eq!(hi[0], 1.1);
        assert!((hi[1] - 0.55).abs() < 1e-15);
        assert!(StickGeometry { half_width: 0.0, ..g }.validate().is_err());
    }

    #[test]
    fn oracle_weights() {
        let g = StickGeometry::default();
        let w = oracle_skinning(&g, &Vector::<2>::new(0.0, 0.3));
        assert!((w.0[0] - 0.5).abs() < 1e-15);
        // On bone 0 at distance 0.5 from bone 1.
        let w = oracle_skinning(&g, &Vector::<2>::new(-0.5, 0.0));
        let expected = (1.0 / ORACLE_WEIGHT_EPS) / (1.0 / ORACLE_WEIGHT_EPS + 1.0 / (0.5 + ORACLE_WEIGHT_EPS));
        assert!((w.0[0] - expected).abs() < 1e-12 && w.0[0] > 0.99);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1_000_000 {
            let x = Vector::<2>::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            assert!(oracle_skinning(&g, &x).is_valid(1e-9));
        }
    }

    #[test]
    fn boundary_samples_lie_on_outline() {
        let g = StickGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = g.sample_stick_boundary(&mut rng);
            assert!((segment_distance(&p, &Vector::<2>::new(-1.0, 0.0), &Vector::<2>::new(1.0, 0.0)) - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_basic_labels() {
        let g = StickGeometry {
            rigid_object: Some(RigidObject::default()),
            ..StickGeometry::default()
        };
        let o = StickOracle::with_resolution(&g, &[0.0], 300).unwrap();
        assert!(o.label(&Vector::<2>::new(0.0, 0.0)));
        assert!(o.label(&Vector::<2>::new(0.05, 0.4)));
        assert!(!o.label(&Vector::<2>::new(0.0, 0.2)));
        let bent = StickOracle::with_resolution(&g, &[1.0], 300).unwrap();
        assert!(!bent.label(&Vector::<2>::new(25.0, 0.0)));
        assert!(bent.label(&Vector::<2>::new(0.8 * 1f64.cos(), 0.8 * 1f64.sin())));
        assert!(bent.label(&Vector::<2>::new(-0.5, 0.0)));
        assert!(!bent.label(&Vector::<2>::new(0.8, 0.0)));
    }

    #[test]
    fn canonical_pose_matches_analytic_test() {
        let g = StickGeometry {
            rigid_object: Some(RigidObject::default()),
            ..StickGeometry::default()
        };
        let o = StickOracle::new(&g, &[0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20_000 {
            let x = Vector::<2>::new(rng.random_range(-1.3..1.3), rng.random_range(-0.3..0.7));
            assert_eq!(o.label(&x), g.canonical_contains(&x), "{x:?}");
        }
    }
}
