//! Iso-level extraction on regular grids: marching squares (2D polylines)
//! and marching cubes (3D triangle meshes), plus SVG / CSV / OBJ writers.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};
use super::occupancy_canonical;
use crate::skeleton::BoneTransformSet;
use crate::train::ArticulatedModel;
use crate::{Error, Result, Vector};

/// Axis-aligned grid given by its corners and the cell count per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub cells: Vec<usize>,
}

impl Grid {
    pub fn new(min: Vec<f64>, max: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let g = Self { min, max, cells };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() || self.min.len() != self.cells.len() || self.min.is_empty() {
            return Err(Error::Config("grid min/max/cells must have equal, non-zero length".into()));
        }
        for k in 0..self.min.len() {
            if !(self.min[k] < self.max[k]) || self.cells[k] < 2 {
                return Err(Error::Config(format!(
                    "grid axis {k}: need min < max and at least 2 cells (got {}..{}, {})",
                    self.min[k], self.max[k], self.cells[k]
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn nodes(&self, k: usize) -> usize {
        self.cells[k] + 1
    }

    pub fn num_nodes(&self) -> usize {
        (0..self.dim()).map(|k| self.nodes(k)).product()
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.max[k] - self.min[k]) / self.cells[k] as f64
    }

    /// Node position; the first axis varies fastest in the flat node order.
    pub fn node<const D: usize>(&self, flat: usize) -> Vector<D> {
        let mut rest = flat;
        Vector::<D>::from_fn(|k, _| {
            let i = rest % self.nodes(k);
            rest /= self.nodes(k);
            self.min[k] + i as f64 * self.spacing(k)
        })
    }
}

/// Field values at every grid node (first axis fastest).
pub fn sample_grid<const D: usize, F>(grid: &Grid, field: F) -> Result<Vec<f64>>
where
    F: Fn(&Vector<D>) -> Result<f64> + Sync,
{
    grid.validate()?;
    if grid.dim() != D {
        return Err(Error::Dimension {
            what: "grid dimension",
            expected: D,
            got: grid.dim(),
        });
    }
    (0..grid.num_nodes())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| field(&grid.node::<D>(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub indices: Vec<usize>,
    pub closed: bool,
}

/// Iso-contour as shared vertices and chained polylines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Contour {
    pub vertices: Vec<[f64; 2]>,
    pub polylines: Vec<Polyline>,
}

impl Contour {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// `x,y,polyline` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,polyline\n");
        for (k, p) in self.polylines.iter().enumerate() {
            for &i in &p.indices {
                let v = self.vertices[i];
                let _ = writeln!(s, "{},{},{}", v[0], v[1], k);
            }
        }
        s
    }

    /// SVG with one `<polyline>` per chain; y grows upward in the grid.
    pub fn to_svg(&self, grid: &Grid, width_px: usize) -> String {
        let sx = width_px as f64 / (grid.max[0] - grid.min[0]);
        let height_px = ((grid.max[1] - grid.min[1]) * sx).round().max(1.0) as usize;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width_px}\" height=\"{height_px}\" viewBox=\"0 0 {width_px} {height_px}\">\n"
        );
        for p in &self.polylines {
            let tag = if p.closed { "polygon" } else { "polyline" };
            let pts: Vec<String> = p
                .indices
                .iter()
                .map(|&i| {
                    let v = self.vertices[i];
                    format!("{:.3},{:.3}", (v[0] - grid.min[0]) * sx, (grid.max[1] - v[1]) * sx)
                })
                .collect();
            let _ = writeln!(s, "  <{tag} fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"{}\"/>", pts.join(" "));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

fn crossing(p0: &[f64], p1: &[f64], v0: f64, v1: f64, iso: f64) -> Vec<f64> {
    let t = if v1 != v0 { ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0) } else { 0.5 };
    p0.iter().zip(p1).map(|(a, b)| a + t * (b - a)).collect()
}

/// Segments per marching-squares case as pairs of cell edges
/// (0 bottom, 1 right, 2 top, 3 left). Saddles (5, 10) are resolved below.
const SQUARE_SEGMENTS: [&[[usize; 2]]; 16] = [
    &[],
    &[[3, 0]],
    &[[0, 1]],
    &[[3, 1]],
    &[[1, 2]],
    &[],
    &[[0, 2]],
    &[[3, 2]],
    &[[2, 3]],
    &[[0, 2]],
    &[],
    &[[1, 2]],
    &[[3, 1]],
    &[[0, 1]],
    &[[3, 0]],
    &[],
];

/// Marching squares; a node is inside when its value exceeds `iso`.
pub fn extract_contour(grid: &Grid, values: &[f64], iso: f64) -> Contour {
    let (cx, cy) = (grid.cells[0], grid.cells[1]);
    let nx = cx + 1;
    let at = |i: usize, j: usize| values[j * nx + i];
    let pos = |i: usize, j: usize| [grid.min[0] + i as f64 * grid.spacing(0), grid.min[1] + j as f64 * grid.spacing(1)];
    let horizontal = cx * (cy + 1);

    let mut contour = Contour::default();
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut segments: Vec<[usize; 2]> = Vec::new();
    for j in 0..cy {
        for i in 0..cx {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v = corners.map(|(a, b)| at(a, b));
            let case = (0..4).fold(0usize, |c, k| c | (((v[k] > iso) as usize) << k));
            let saddle_center = || v.iter().sum::<f64>() / 4.0 > iso;
            let segs: Vec<[usize; 2]> = match case {
                5 if saddle_center() => vec![[0, 1], [2, 3]],
                5 => vec![[3, 0], [1, 2]],
                10 if saddle_center() => vec![[3, 0], [1, 2]],
                10 => vec![[0, 1], [2, 3]],
                c => SQUARE_SEGMENTS[c].to_vec(),
            };
            for seg in segs {
                let ends = seg.map(|e| {
                    let (key, a, b) = match e {
                        0 => (j * cx + i, (i, j), (i + 1, j)),
                        1 => (horizontal + j * nx + i + 1, (i + 1, j), (i + 1, j + 1)),
                        2 => ((j + 1) * cx + i, (i, j + 1), (i + 1, j + 1)),
                        _ => (horizontal + j * nx + i, (i, j), (i, j + 1)),
                    };
                    *ids.entry(key).or_insert_with(|| {
                        let p = crossing(&pos(a.0, a.1), &pos(b.0, b.1), at(a.0, a.1), at(b.0, b.1), iso);
                        contour.vertices.push([p[0], p[1]]);
                        contour.vertices.len() - 1
                    })
                });
                segments.push(ends);
            }
        }
    }
    contour.polylines = chain(contour.vertices.len(), &segments);
    contour
}

/// Joins segments sharing vertices into polylines; open chains first.
fn chain(n: usize, segments: &[[usize; 2]]) -> Vec<Polyline> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (s, seg) in segments.iter().enumerate() {
        adj[seg[0]].push(s);
        adj[seg[1]].push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    let starts: Vec<usize> = (0..n).filter(|&v| adj[v].len() == 1).chain(0..n).collect();
    for start in starts {
        let Some(&first) = adj[start].iter().find(|&&s| !used[s]) else { continue };
        let mut indices = vec![start];
        let mut v = start;
        let mut s = first;
        loop {
            used[s] = true;
            let seg = segments[s];
            v = if seg[0] == v { seg[1] } else { seg[0] };
            indices.push(v);
            match adj[v].iter().find(|&&t| !used[t]) {
                Some(&t) => s = t,
                None => break,
            }
        }
        let closed = indices.len() > 2 && indices.first() == indices.last();
        if closed {
            indices.pop();
        }
        out.push(Polyline { indices, closed });
    }
    out
}

/// Marching cubes; a node is inside when its value exceeds `iso`.
pub fn extract_mesh(grid: &Grid, values: &[f64], iso: f64) -> Mesh {
    let (cx, cy, cz) = (grid.cells[0], grid.cells[1], grid.cells[2]);
    let (nx, ny) = (cx + 1, cy + 1);
    let flat = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let pos = |n: usize| {
        let v = grid.node::<3>(n);
        [v[0], v[1], v[2]]
    };
    let mut mesh = Mesh::default();
    let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                let nodes = CORNER_OFFSETS.map(|o| flat(i + o[0], j + o[1], k + o[2]));
                let case = (0..8).fold(0usize, |c, b| c | (((values[nodes[b]] > iso) as usize) << b));
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [0, 1, 2].map(|q| {
                        let [c0, c1] = EDGE_CORNERS[tri[q] as usize];
                        let (a, b) = (nodes[c0].min(nodes[c1]), nodes[c0].max(nodes[c1]));
                        *ids.entry((a, b)).or_insert_with(|| {
                            let p = crossing(&pos(a), &pos(b), values[a], values[b], iso);
                            mesh.vertices.push([p[0], p[1], p[2]]);
                            mesh.vertices.len() - 1
                        })
                    });
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    mesh
}

/// Where the level set is taken.
#[derive(Debug, Clone, Copy)]
pub enum LevelSetMode<'a, const D: usize> {
    /// Canonical occupancy at the canonical pose.
    Canonical,
    /// Deformed occupancy under the given bones.
    Posed(&'a BoneTransformSet<D>),
}

/// Occupancy field of a model over a grid.
pub fn model_grid_values<const D: usize, M: ArticulatedModel<D>>(
    model: &M,
    mode: LevelSetMode<'_, D>,
    grid: &Grid,
) -> Result<Vec<f64>> {
    match mode {
        LevelSetMode::Canonical => {
            let pose = model.meta().canonical_pose_input();
            sample_grid(grid, |x: &Vector<D>| Ok(occupancy_canonical(model.nets().0, x, &pose)?.get()))
        }
        LevelSetMode::Posed(bones) => sample_grid(grid, |x: &Vector<D>| model.predict(bones, x)),
    }
}

/// 0.5 contour of a 2D model.
pub fn extract_levelset_2d<M: ArticulatedModel<2>>(model: &M, mode: LevelSetMode<'_, 2>, grid: &Grid) -> Result<Contour> {
    let values = model_grid_values(model, mode, grid)?;
    Ok(extract_contour(grid, &values, 0.5))
}

/// 0.5 iso-surface of a 3D model.
pub fn extract_levelset_3d<M: ArticulatedModel<3>>(model: &M, mode: LevelSetMode<'_, 3>, grid: &Grid) -> Result<Mesh> {
    let values = model_grid_values(model, mode, grid)?;
    Ok(extract_mesh(grid, &values, 0.5))
}
