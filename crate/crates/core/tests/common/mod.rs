//! Oracles shared by the integration tests. They rely on the network forward
//! pass and plain arithmetic only, never on the solver or the LBS field code.

#![allow(dead_code)]

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use snarf::nn::Mlp;
use snarf::skeleton::BoneTransformSet;

/// `Σ w_i(x) (R_i x + t_i)` with weights from the raw network output.
pub fn blend(net: &Mlp, bones: &BoneTransformSet<2>, x: &Vector2<f64>) -> Vector2<f64> {
    let (w, _) = net.forward(x.as_slice()).expect("finite input");
    w.iter()
        .zip(&bones.transforms)
        .map(|(w, t)| (t.rotation * x + t.translation) * *w)
        .sum()
}

fn fd_jacobian<F: Fn(&Vector2<f64>) -> Vector2<f64>>(map: &F, x: &Vector2<f64>) -> Matrix2<f64> {
    let h = 1e-6;
    let mut j = Matrix2::zeros();
    for k in 0..2 {
        let mut e = Vector2::zeros();
        e[k] = h;
        j.set_column(k, &((map(&(x + e)) - map(&(x - e))) / (2.0 * h)));
    }
    j
}

/// A root found by the grid scan.
#[derive(Debug, Clone, Copy)]
pub struct GridRoot {
    pub x: Vector2<f64>,
    pub residual: f64,
    /// Sign of `det ∂d/∂x` there; negative roots sit in folds of the map.
    pub orientation: f64,
}

/// Exhaustive scan of a forward map on a regular canonical grid.
///
/// The map is tabulated once per pose. For a query, every cell whose corner
/// images (padded by half a cell) bracket the query is a candidate; connected
/// candidate cells form clusters, and each cluster is polished by Newton
/// steps with a finite-difference Jacobian.
pub struct GridRootOracle<F> {
    map: F,
    lo: [f64; 2],
    hi: [f64; 2],
    h: f64,
    n: [usize; 2],
    images: Vec<Vector2<f64>>,
}

/// Grid oracle for the LBS map of a weight network.
pub fn lbs_oracle<'a>(
    net: &'a Mlp,
    bones: &'a BoneTransformSet<2>,
    lo: [f64; 2],
    hi: [f64; 2],
    h: f64,
) -> GridRootOracle<impl Fn(&Vector2<f64>) -> Vector2<f64> + Sync + 'a> {
    GridRootOracle::new(move |x: &Vector2<f64>| blend(net, bones, x), lo, hi, h)
}

impl<F: Fn(&Vector2<f64>) -> Vector2<f64> + Sync> GridRootOracle<F> {
    pub fn new(map: F, lo: [f64; 2], hi: [f64; 2], h: f64) -> Self {
        let n = [((hi[0] - lo[0]) / h).ceil() as usize + 1, ((hi[1] - lo[1]) / h).ceil() as usize + 1];
        let images = (0..n[0] * n[1])
            .into_par_iter()
            .with_min_len(1024)
            .map(|k| map(&Vector2::new(lo[0] + (k % n[0]) as f64 * h, lo[1] + (k / n[0]) as f64 * h)))
            .collect();
        Self {
            map,
            lo,
            hi,
            h,
            n,
            images,
        }
    }

    fn node(&self, i: usize, j: usize) -> Vector2<f64> {
        Vector2::new(self.lo[0] + i as f64 * self.h, self.lo[1] + j as f64 * self.h)
    }

    pub fn roots(&self, xq: &Vector2<f64>) -> Vec<GridRoot> {
        let [nx, ny] = self.n;
        let pad = 0.5 * self.h;
        let img = |i: usize, j: usize| &self.images[j * nx + i];
        let mut candidate = vec![false; (nx - 1) * (ny - 1)];
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let c = [img(i, j), img(i + 1, j), img(i, j + 1), img(i + 1, j + 1)];
                let inside = (0..2).all(|k| {
                    let lo = c.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                    let hi = c.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                    xq[k] >= lo - pad && xq[k] <= hi + pad
                });
                candidate[j * (nx - 1) + i] = inside;
            }
        }
        // Clusters of 8-connected candidate cells.
        let (cx, cy) = (nx - 1, ny - 1);
        let mut seen = vec![false; candidate.len()];
        let mut roots: Vec<GridRoot> = Vec::new();
        for start in 0..candidate.len() {
            if !candidate[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut best = (f64::INFINITY, Vector2::zeros());
            while let Some(c) = stack.pop() {
                let (i, j) = (c % cx, c / cx);
                for (a, b) in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                    let r = (img(a, b) - xq).norm();
                    if r < best.0 {
                        best = (r, self.node(a, b));
                    }
                }
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a < 0 || b < 0 || a >= cx as i64 || b >= cy as i64 {
                            continue;
                        }
                        let k = b as usize * cx + a as usize;
                        if candidate[k] && !seen[k] {
                            seen[k] = true;
                            stack.push(k);
                        }
                    }
                }
            }
            if let Some(root) = self.polish(xq, best.1) {
                if roots.iter().all(|r| (r.x - root.x).norm() > 1e-4) {
                    roots.push(root);
                }
            }
        }
        roots
    }

    /// Newton with step halving, so creases in the map (piecewise-smooth
    /// weights) cannot make it cycle.
    fn polish(&self, xq: &Vector2<f64>, mut x: Vector2<f64>) -> Option<GridRoot> {
        let mut r = (self.map)(&x) - xq;
        for _ in 0..100 {
            if r.norm() < 1e-11 {
                break;
            }
            let step = fd_jacobian(&self.map, &x).lu().solve(&r)?;
            let mut t = 1.0;
            loop {
                let y = x - step * t;
                let ry = (self.map)(&y) - xq;
                if ry.norm() < r.norm() {
                    x = y;
                    r = ry;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return None;
                }
            }
        }
        let residual = r.norm();
        let inside = (0..2).all(|k| x[k] >= self.lo[k] - self.h && x[k] <= self.hi[k] + self.h);
        (residual < 1e-9 && inside).then(|| GridRoot {
            x,
            residual,
            orientation: fd_jacobian(&self.map, &x).determinant().signum(),
        })
    }
}
