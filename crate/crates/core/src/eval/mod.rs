//! IoU metrics, experiment orchestration and occupancy images.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageEncoder, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::occupancy::{extract_contour, sample_grid, Contour, Grid};
use crate::simdata::{generate_dataset, AnyDataset, Dataset, ExperimentConfig, Regime, SampleKind, Split};
use crate::skeleton::BoneTransformSet;
use crate::train::{train, ArticulatedModel, BackLbsParams, EpochMetrics, LoadedModel, ModelMeta, ModelParams};
use crate::{Error, Result, Vector};

/// Binarization threshold of predicted occupancy.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Set sizes behind one IoU value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub queries: usize,
    pub intersection: usize,
    pub union: usize,
}

impl IouCounts {
    pub fn from_sets(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Self {
            queries: pred.len().min(gt.len()),
            ..Self::default()
        };
        for (&p, &g) in pred.iter().zip(gt) {
            c.intersection += (p && g) as usize;
            c.union += (p || g) as usize;
        }
        c
    }

    /// IoU; an empty union counts as a perfect match and reports `degenerate`.
    pub fn iou(&self) -> (f64, bool) {
        if self.union == 0 {
            (1.0, true)
        } else {
            (self.intersection as f64 / self.union as f64, false)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameIou {
    pub frame: usize,
    pub iou_bbox: f64,
    pub iou_surface: f64,
    pub bbox: IouCounts,
    pub surface: IouCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// Mean over frames of the IoU on uniformly sampled points.
    pub iou_bbox: f64,
    /// Mean over frames of the IoU on near-surface points.
    pub iou_surface: f64,
    pub per_frame: Vec<FrameIou>,
    pub queries_bbox: usize,
    pub queries_surface: usize,
    /// Some frame had an empty union (IoU taken as 1 there).
    pub degenerate: bool,
}

impl IouReport {
    /// Aggregates per-frame results with equal frame weights.
    pub fn from_frames(per_frame: Vec<FrameIou>, degenerate: bool) -> Self {
        let n = per_frame.len().max(1) as f64;
        Self {
            iou_bbox: per_frame.iter().map(|f| f.iou_bbox).sum::<f64>() / n,
            iou_surface: per_frame.iter().map(|f| f.iou_surface).sum::<f64>() / n,
            queries_bbox: per_frame.iter().map(|f| f.bbox.queries).sum(),
            queries_surface: per_frame.iter().map(|f| f.surface.queries).sum(),
            degenerate: degenerate || per_frame.is_empty(),
            per_frame,
        }
    }

    /// `model,frame,iou_bbox,iou_surface` rows plus a `mean` row.
    pub fn csv_rows(&self, model: &str) -> String {
        let mut s = String::new();
        for f in &self.per_frame {
            s.push_str(&format!("{model},{},{},{}\n", f.frame, f.iou_bbox, f.iou_surface));
        }
        s.push_str(&format!("{model},mean,{},{}\n", self.iou_bbox, self.iou_surface));
        s
    }
}

pub const REPORT_CSV_HEADER: &str = "model,frame,iou_bbox,iou_surface";

/// IoU report from per-frame binarized predictions, labels and kinds.
pub fn iou_report_from_predictions(frames: &[(Vec<bool>, Vec<bool>, Vec<SampleKind>)]) -> IouReport {
    let mut degenerate = false;
    let per_frame = frames
        .iter()
        .enumerate()
        .map(|(frame, (pred, gt, kinds))| {
            let pick = |kind: SampleKind| {
                let (p, g): (Vec<bool>, Vec<bool>) = pred
                    .iter()
                    .zip(gt)
                    .zip(kinds)
                    .filter(|(_, k)| **k == kind)
                    .map(|((p, g), _)| (*p, *g))
                    .unzip();
                IouCounts::from_sets(&p, &g)
            };
            let bbox = pick(SampleKind::Uniform);
            let surface = pick(SampleKind::NearSurface);
            let (iou_bbox, d1) = bbox.iou();
            let (iou_surface, d2) = surface.iou();
            degenerate |= d1 || d2;
            FrameIou {
                frame,
                iou_bbox,
                iou_surface,
                bbox,
                surface,
            }
        })
        .collect();
    IouReport::from_frames(per_frame, degenerate)
}

/// IoU of a model's binarized predictions against the dataset labels.
pub fn compute_iou<const D: usize, M: ArticulatedModel<D>>(model: &M, data: &Dataset<D>) -> Result<IouReport> {
    let queries: Vec<(usize, usize)> = data
        .frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.points.len()).map(move |pi| (fi, pi)))
        .collect();
    let preds: Vec<bool> = queries
        .par_iter()
        .with_min_len(32)
        .map(|&(fi, pi)| {
            let f = &data.frames[fi];
            Ok(model.predict(&f.transforms, &f.points[pi])? > IOU_THRESHOLD)
        })
        .collect::<Result<_>>()?;
    let mut offset = 0;
    let frames: Vec<_> = data
        .frames
        .iter()
        .map(|f| {
            let n = f.points.len();
            let p = preds[offset..offset + n].to_vec();
            offset += n;
            (p, f.labels.clone(), f.kinds.clone())
        })
        .collect();
    if frames.iter().any(|(_, _, k)| !k.contains(&SampleKind::Uniform) || !k.contains(&SampleKind::NearSurface)) {
        log::warn!("a frame lacks uniform or near-surface samples; its IoU is degenerate");
    }
    Ok(iou_report_from_predictions(&frames))
}

/// `compute_iou` for a checkpoint and dataset of either dimension.
pub fn evaluate(model: &LoadedModel, data: &AnyDataset) -> Result<IouReport> {
    match (model, data) {
        (_, d) if model.meta().dim != d.manifest().d || model.meta().n_bones != d.manifest().n_b => Err(Error::Config(
            format!(
                "model (d = {}, {} bones) does not match dataset (d = {}, {} bones)",
                model.meta().dim,
                model.meta().n_bones,
                d.manifest().d,
                d.manifest().n_b
            ),
        )),
        (LoadedModel::Forward(m), AnyDataset::Stick(d)) => compute_iou::<2, _>(m, d),
        (LoadedModel::Forward(m), AnyDataset::Capsule(d)) => compute_iou::<3, _>(m, d),
        (LoadedModel::Baseline(m), AnyDataset::Stick(d)) => compute_iou::<2, _>(m, d),
        (LoadedModel::Baseline(m), AnyDataset::Capsule(d)) => compute_iou::<3, _>(m, d),
    }
}

/// Trains the forward model (or the baseline) from `config` on `data`.
pub fn train_model(
    config: &ExperimentConfig,
    data: &AnyDataset,
    validation: Option<&AnyDataset>,
    baseline: bool,
    out_dir: Option<&Path>,
) -> Result<(LoadedModel, Vec<EpochMetrics>)> {
    fn run<const D: usize, M: ArticulatedModel<D> + Clone>(
        model: M,
        data: &Dataset<D>,
        validation: Option<&Dataset<D>>,
        config: &ExperimentConfig,
        out_dir: Option<&Path>,
    ) -> Result<(M, Vec<EpochMetrics>)> {
        let out = train(model, data, validation, &config.train, out_dir)?;
        Ok((out.model, out.metrics))
    }
    let seed = config.seed;
    match (data, validation) {
        (AnyDataset::Stick(d), v) => {
            let v = match v {
                Some(AnyDataset::Stick(v)) => Some(v),
                _ => None,
            };
            if baseline {
                let (m, r) = run::<2, _>(BackLbsParams::init(config, seed)?, d, v, config, out_dir)?;
                Ok((LoadedModel::Baseline(m), r))
            } else {
                let (m, r) = run::<2, _>(ModelParams::init(config, seed)?, d, v, config, out_dir)?;
                Ok((LoadedModel::Forward(m), r))
            }
        }
        (AnyDataset::Capsule(d), v) => {
            let v = match v {
                Some(AnyDataset::Capsule(v)) => Some(v),
                _ => None,
            };
            if baseline {
                let (m, r) = run::<3, _>(BackLbsParams::init(config, seed)?, d, v, config, out_dir)?;
                Ok((LoadedModel::Baseline(m), r))
            } else {
                let (m, r) = run::<3, _>(ModelParams::init(config, seed)?, d, v, config, out_dir)?;
                Ok((LoadedModel::Forward(m), r))
            }
        }
    }
}

fn head(data: &AnyDataset, n: usize) -> AnyDataset {
    match data {
        AnyDataset::Stick(d) => AnyDataset::Stick(d.head(n)),
        AnyDataset::Capsule(d) => AnyDataset::Capsule(d.head(n)),
    }
}

/// Square grid centred on the origin that holds the model under any pose.
///
/// The bone chain rotates about pivots inside the canonical box, so a disc of
/// the box's largest corner radius (plus a margin) covers every pose.
pub fn gallery_grid(meta: &ModelMeta, resolution: usize) -> Result<Grid> {
    let r = meta
        .canonical_min
        .iter()
        .zip(&meta.canonical_max)
        .map(|(a, b)| a.abs().max(b.abs()).powi(2))
        .sum::<f64>()
        .sqrt()
        * 1.1;
    Grid::new(vec![-r, -r], vec![r, r], vec![resolution.max(2); 2])
}

/// Pose vector (radians) with `degrees` on the first degree of freedom of every joint.
pub fn gallery_pose(meta: &ModelMeta, degrees: f64) -> Vec<f64> {
    let dof = meta.pose_dim / meta.joints.len().max(1);
    (0..meta.pose_dim)
        .map(|k| if k % dof.max(1) == 0 { degrees.to_radians() } else { 0.0 })
        .collect()
}

fn embed<const D: usize>(p: &Vector<2>) -> Vector<D> {
    Vector::<D>::from_fn(|k, _| if k < 2 { p[k] } else { 0.0 })
}

/// Occupancy of a posed model on a 2D grid (the `z = 0` slice in 3D).
pub fn posed_slice<const D: usize, M: ArticulatedModel<D>>(
    model: &M,
    bones: &BoneTransformSet<D>,
    grid: &Grid,
) -> Result<Vec<f64>> {
    sample_grid::<2, _>(grid, |p| model.predict(bones, &embed::<D>(p)))
}

const CONTOUR_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Pixel position of a grid point; row 0 is the top (largest y).
fn to_pixel(grid: &Grid, p: [f64; 2]) -> (f64, f64) {
    let ny = grid.nodes(1) as f64;
    (
        (p[0] - grid.min[0]) / grid.spacing(0),
        ny - 1.0 - (p[1] - grid.min[1]) / grid.spacing(1),
    )
}

/// RGB raster: one pixel per grid node, gray level = occupancy, 0.5-contour in red.
pub fn occupancy_raster(grid: &Grid, values: &[f64]) -> Result<(RgbImage, Contour)> {
    grid.validate()?;
    if grid.dim() != 2 || values.len() != grid.num_nodes() {
        return Err(Error::Dimension {
            what: "raster values",
            expected: grid.num_nodes(),
            got: values.len(),
        });
    }
    let (w, h) = (grid.nodes(0) as u32, grid.nodes(1) as u32);
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let j = (h - 1 - y) as usize;
        let v = values[j * w as usize + x as usize];
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    let contour = extract_contour(grid, values, 0.5);
    for line in &contour.polylines {
        let mut idx = line.indices.clone();
        if line.closed {
            idx.push(idx[0]);
        }
        for pair in idx.windows(2) {
            let a = to_pixel(grid, contour.vertices[pair[0]]);
            let b = to_pixel(grid, contour.vertices[pair[1]]);
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0).ceil() as usize + 1;
            for s in 0..=n {
                let t = s as f64 / n as f64;
                let (x, y) = ((a.0 + t * (b.0 - a.0)).round(), (a.1 + t * (b.1 - a.1)).round());
                if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
                    img.put_pixel(x as u32, y as u32, CONTOUR_COLOR);
                }
            }
        }
    }
    Ok((img, contour))
}

/// PNG bytes of [`occupancy_raster`].
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(bytes)
}

/// Renders the posed occupancy of a model (z = 0 slice in 3D) to a PNG file.
pub fn render_occupancy_image<const D: usize, M: ArticulatedModel<D>>(
    model: &M,
    bones: &BoneTransformSet<D>,
    grid: &Grid,
    out: &Path,
) -> Result<()> {
    let values = posed_slice(model, bones, grid)?;
    let (img, _) = occupancy_raster(grid, &values)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, encode_png(&img)?)?;
    Ok(())
}

/// [`render_occupancy_image`] for a checkpoint; `degrees` is the joint-angle vector.
pub fn render_loaded(model: &LoadedModel, degrees: &[f64], resolution: usize, out: &Path) -> Result<()> {
    let meta = model.meta();
    let rad: Vec<f64> = degrees.iter().map(|a| a.to_radians()).collect();
    let grid = gallery_grid(meta, resolution)?;
    match (model, meta.dim) {
        (LoadedModel::Forward(m), 2) => render_occupancy_image(m, &meta.forward_kinematics::<2>(&rad)?, &grid, out),
        (LoadedModel::Forward(m), 3) => render_occupancy_image(m, &meta.forward_kinematics::<3>(&rad)?, &grid, out),
        (LoadedModel::Baseline(m), 2) => render_occupancy_image(m, &meta.forward_kinematics::<2>(&rad)?, &grid, out),
        (LoadedModel::Baseline(m), 3) => render_occupancy_image(m, &meta.forward_kinematics::<3>(&rad)?, &grid, out),
        (_, d) => Err(Error::Config(format!("unsupported model dimension {d}"))),
    }
}

/// One point of the interpolation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub train_step: f64,
    pub seed: u64,
    pub forward_iou_bbox: f64,
    pub baseline_iou_bbox: f64,
}

impl SweepPoint {
    pub fn gap(&self) -> f64 {
        self.forward_iou_bbox - self.baseline_iou_bbox
    }
}

/// Seed-averaged `(train_step, forward, baseline, gap)` per step, in input order.
pub fn sweep_means(points: &[SweepPoint]) -> Vec<(f64, f64, f64, f64)> {
    let mut steps: Vec<f64> = Vec::new();
    for p in points {
        if !steps.contains(&p.train_step) {
            steps.push(p.train_step);
        }
    }
    steps
        .into_iter()
        .map(|s| {
            let sel: Vec<_> = points.iter().filter(|p| p.train_step == s).collect();
            let n = sel.len() as f64;
            let f = sel.iter().map(|p| p.forward_iou_bbox).sum::<f64>() / n;
            let b = sel.iter().map(|p| p.baseline_iou_bbox).sum::<f64>() / n;
            (s, f, b, f - b)
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("train_step,seed,forward_iou_bbox,baseline_iou_bbox,gap\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.train_step,
            p.seed,
            p.forward_iou_bbox,
            p.baseline_iou_bbox,
            p.gap()
        ));
    }
    s.push_str("\ntrain_step,mean_forward_iou_bbox,mean_baseline_iou_bbox,mean_gap\n");
    for (step, f, b, g) in sweep_means(points) {
        s.push_str(&format!("{step},{f},{b},{g}\n"));
    }
    s
}

/// Trains both models for every `(train_step, seed)` pair and scores them on `test`.
///
/// Seeds are `config.seed + k` for `k < sweep_seeds`; they drive training
/// data, initialization and shuffling alike.
pub fn interpolation_sweep(config: &ExperimentConfig, test: &AnyDataset) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for &step in &config.sweep_steps {
        for k in 0..config.sweep_seeds as u64 {
            let mut c = config.clone();
            c.train_step = step;
            c.seed = config.seed + k;
            c.train.seed = config.train.seed + k;
            let data = generate_dataset(&c, Split::Train)?;
            let (fwd, _) = train_model(&c, &data, None, false, None)?;
            let (base, _) = train_model(&c, &data, None, true, None)?;
            let p = SweepPoint {
                train_step: step,
                seed: c.seed,
                forward_iou_bbox: evaluate(&fwd, test)?.iou_bbox,
                baseline_iou_bbox: evaluate(&base, test)?.iou_bbox,
            };
            log::info!("sweep step {step} seed {}: gap {:.4}", c.seed, p.gap());
            points.push(p);
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub regime: Regime,
    pub rigid_object: bool,
    pub forward: IouReport,
    pub baseline: IouReport,
    pub sweep: Vec<SweepPoint>,
}

/// Loads `<dir>/<name>.snrd` if it was generated from `config`, else generates and saves it.
pub fn load_or_generate(config: &ExperimentConfig, split: Split, dir: &Path) -> Result<AnyDataset> {
    let path = dir.join(format!("{}.snrd", split.name()));
    if path.exists() {
        if let Ok(d) = AnyDataset::load(&path) {
            if &d.manifest().config == config && d.manifest().split == split {
                return Ok(d);
            }
        }
    }
    let d = generate_dataset(config, split)?;
    d.save(dir, split.name())?;
    Ok(d)
}

/// Full experiment under `out`:
///
/// - `data/{train,test}.snrd` (+ manifests)
/// - `forward/`, `baseline/`: checkpoints and per-epoch metrics
/// - `report.json`, `report.csv`: test-split IoU of both models
/// - `gallery/<model>_<deg>.png`: posed occupancy with its 0.5 contour
/// - `sweep.csv` (interpolation regime): IoU against `train_step`
///
/// A training failure propagates; files written before it stay in place.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;
    let data_dir = out.join("data");
    let train_data = load_or_generate(config, Split::Train, &data_dir)?;
    let test_data = load_or_generate(config, Split::Test, &data_dir)?;
    let validation = head(&test_data, config.validation_frames);

    let (forward, _) = train_model(config, &train_data, Some(&validation), false, Some(&out.join("forward")))?;
    let (baseline, _) = train_model(config, &train_data, Some(&validation), true, Some(&out.join("baseline")))?;
    let forward_report = evaluate(&forward, &test_data)?;
    let baseline_report = evaluate(&baseline, &test_data)?;
    log::info!(
        "test IoU bbox: forward {:.4}, baseline {:.4}",
        forward_report.iou_bbox,
        baseline_report.iou_bbox
    );

    let gallery = out.join("gallery");
    for (name, model) in [("forward", &forward), ("baseline", &baseline)] {
        for &deg in &config.gallery_degrees {
            let pose: Vec<f64> = gallery_pose(model.meta(), deg).iter().map(|a| a.to_degrees()).collect();
            render_loaded(model, &pose, config.render_resolution, &gallery_path(&gallery, name, deg))?;
        }
    }

    let sweep = if config.regime == Regime::Interpolation {
        let points = interpolation_sweep(config, &test_data)?;
        fs::write(out.join("sweep.csv"), sweep_csv(&points))?;
        points
    } else {
        Vec::new()
    };

    let summary = ExperimentSummary {
        regime: config.regime,
        rigid_object: train_data.manifest().rigid_object,
        forward: forward_report,
        baseline: baseline_report,
        sweep,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    csv.push_str(&summary.forward.csv_rows("forward"));
    csv.push_str(&summary.baseline.csv_rows("baseline"));
    fs::write(out.join("report.csv"), csv)?;
    Ok(summary)
}

fn gallery_path(dir: &Path, model: &str, deg: f64) -> PathBuf {
    dir.join(format!("{model}_{}.png", deg.round() as i64))
}
