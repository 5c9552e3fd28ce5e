//! Losses, the optimizer, the training loop and the backward-skinning baseline.

mod baseline;
mod model;

pub use baseline::{baseline_backlbs_backward, baseline_backlbs_forward, BackLbsParams};
pub use model::{ArticulatedModel, LoadedModel, ModelMeta, ModelParams};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::compute_iou;
use crate::nn::{write_checkpoint, Mlp, MlpGrad};
use crate::simdata::{Dataset, SkeletonInfo};
use crate::{Error, Result, Vector};

/// Clamp applied to predictions before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Samples per gradient work unit; partial sums are added in a fixed order so
/// results do not depend on the thread count.
pub const GRAD_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (counted from 1) during which the bootstrap losses apply.
    pub bootstrap_epochs: usize,
    pub bootstrap_bone_samples: usize,
    #[serde(default = "one")]
    pub bootstrap_bone_weight: f64,
    pub bootstrap_joint_weight: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 512,
            epochs: 200,
            bootstrap_epochs: 1,
            bootstrap_bone_samples: 128,
            bootstrap_bone_weight: 1.0,
            bootstrap_joint_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.learning_rate", self.learning_rate),
            ("train.adam_beta1", self.adam_beta1),
            ("train.adam_beta2", self.adam_beta2),
            ("train.adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(Error::Config("train.adam_beta1/adam_beta2 must be < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.bootstrap_epochs > self.epochs {
            return Err(Error::Config("train.bootstrap_epochs must not exceed train.epochs".into()));
        }
        if !(self.bootstrap_bone_weight >= 0.0 && self.bootstrap_joint_weight >= 0.0) {
            return Err(Error::Config("train bootstrap weights must be >= 0".into()));
        }
        Ok(())
    }

    /// `(λ_bone, λ_joint)` in effect during `epoch` (counted from 1).
    pub fn bootstrap_coefficients(&self, epoch: usize) -> (f64, f64) {
        if epoch <= self.bootstrap_epochs {
            (self.bootstrap_bone_weight, self.bootstrap_joint_weight)
        } else {
            (0.0, 0.0)
        }
    }
}

fn clamp_pred(o: f64) -> f64 {
    o.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Binary cross entropy of one prediction.
pub fn loss_bce(o: f64, label: bool) -> f64 {
    let c = clamp_pred(o);
    if label {
        -c.ln()
    } else {
        -(1.0 - c).ln()
    }
}

/// `∂ loss_bce / ∂o`; zero where the clamp is active.
pub fn loss_bce_grad(o: f64, label: bool) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&o) {
        return 0.0;
    }
    if label {
        -1.0 / o
    } else {
        1.0 / (1.0 - o)
    }
}

/// Mean BCE over a batch of predictions.
pub fn loss_bce_mean(preds: &[(f64, bool)]) -> f64 {
    preds.iter().map(|(o, l)| loss_bce(*o, *l)).sum::<f64>() / preds.len().max(1) as f64
}

/// Points drawn uniformly along the canonical bones (bone chosen by length).
pub fn sample_bone_points<const D: usize, R: Rng + ?Sized>(skeleton: &SkeletonInfo, n: usize, rng: &mut R) -> Vec<Vector<D>> {
    let segs: Vec<(Vector<D>, Vector<D>)> = skeleton
        .bones
        .iter()
        .map(|[a, b]| (Vector::<D>::from_column_slice(a), Vector::<D>::from_column_slice(b)))
        .collect();
    let lens: Vec<f64> = segs.iter().map(|(a, b)| (b - a).norm()).collect();
    let total: f64 = lens.iter().sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            let mut i = 0;
            while i + 1 < segs.len() && u >= lens[i] {
                u -= lens[i];
                i += 1;
            }
            let (a, b) = segs[i];
            a + (b - a) * (u / lens[i]).clamp(0.0, 1.0)
        })
        .collect()
}

/// Bone bootstrap loss: mean BCE of canonical occupancy against 1 on `points`,
/// with `weight · ∂loss/∂σ_f` accumulated into `grad_f` when given.
pub fn loss_bootstrap_bone<const D: usize>(
    sigma_f: &Mlp,
    pose_input: &[f64],
    points: &[Vector<D>],
    weight: f64,
    mut grad_f: Option<&mut MlpGrad>,
) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let n = points.len() as f64;
    let mut total = 0.0;
    let mut input = Vec::with_capacity(D + pose_input.len());
    for x in points {
        input.clear();
        input.extend_from_slice(x.as_slice());
        input.extend_from_slice(pose_input);
        let (y, tape) = sigma_f.forward(&input)?;
        total += loss_bce(y[0], true);
        if let Some(g) = grad_f.as_deref_mut() {
            let dy = weight * loss_bce_grad(y[0], true) / n;
            if dy != 0.0 {
                sigma_f.backward(&tape, &[dy], g)?;
            }
        }
    }
    Ok(total / n)
}

/// Joint bootstrap target: 0.5 on the two adjacent bones, 0 elsewhere.
pub fn joint_target(n_bones: usize, bones: [usize; 2]) -> Vec<f64> {
    let mut t = vec![0.0; n_bones];
    t[bones[0]] = 0.5;
    t[bones[1]] = 0.5;
    t
}

/// Joint bootstrap loss from already evaluated weights: mean over joints of
/// the mean squared error to the 0.5/0.5 target. Returns the loss and
/// `∂loss/∂w` per joint.
pub fn loss_bootstrap_joint(weights: &[Vec<f64>], adjacent: &[[usize; 2]]) -> (f64, Vec<Vec<f64>>) {
    if weights.is_empty() {
        return (0.0, Vec::new());
    }
    let nj = weights.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(weights.len());
    for (w, adj) in weights.iter().zip(adjacent) {
        let t = joint_target(w.len(), *adj);
        let nb = w.len() as f64;
        total += w.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nb;
        grads.push(w.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / (nb * nj)).collect());
    }
    (total / nj, grads)
}

/// Adam state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], s: &TrainSettings) {
        self.t += 1;
        let c1 = 1.0 - s.adam_beta1.powi(self.t);
        let c2 = 1.0 - s.adam_beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = s.adam_beta1 * self.m[i] + (1.0 - s.adam_beta1) * g;
            self.v[i] = s.adam_beta2 * self.v[i] + (1.0 - s.adam_beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= s.learning_rate * mh / (vh.sqrt() + s.adam_eps);
        }
    }
}

/// Loss components of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub bce: f64,
    pub bone: f64,
    pub joint: f64,
    /// Roots whose implicit skinning gradient was dropped as ill-conditioned.
    pub dropped_roots: usize,
}

impl LossParts {
    pub fn total(&self, coefficients: (f64, f64)) -> f64 {
        self.bce + coefficients.0 * self.bone + coefficients.1 * self.joint
    }
}

/// Total loss `BCE + λ_b·bone + λ_j·joint` over a batch of `(frame, point)`
/// indices and fixed bone samples, with gradients for both networks.
pub fn batch_objective<const D: usize, M: ArticulatedModel<D>>(
    model: &M,
    data: &Dataset<D>,
    batch: &[(usize, usize)],
    bone_points: &[Vector<D>],
    coefficients: (f64, f64),
    with_grad: bool,
) -> Result<(LossParts, MlpGrad, MlpGrad)> {
    let (net_f, net_w) = model.nets();
    let weight = 1.0 / batch.len().max(1) as f64;
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut gf = MlpGrad::zeros_like(net_f);
            let mut gw = MlpGrad::zeros_like(net_w);
            let mut loss = 0.0;
            let mut dropped = 0;
            for &(fi, pi) in chunk {
                let frame = &data.frames[fi];
                let (l, d) = if with_grad {
                    model.bce_backward(&frame.transforms, &frame.points[pi], frame.labels[pi], weight, &mut gf, &mut gw)?
                } else {
                    (loss_bce(model.predict(&frame.transforms, &frame.points[pi])?, frame.labels[pi]), 0)
                };
                loss += l;
                dropped += d;
            }
            Ok((loss, dropped, gf, gw))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gf = MlpGrad::zeros_like(net_f);
    let mut gw = MlpGrad::zeros_like(net_w);
    let mut parts = LossParts::default();
    for (l, d, pf, pw) in partials {
        parts.bce += l;
        parts.dropped_roots += d;
        gf.add_assign(&pf);
        gw.add_assign(&pw);
    }
    parts.bce *= weight;

    let skeleton = &data.manifest.skeleton;
    if coefficients.0 > 0.0 {
        let pose = model.meta().canonical_pose_input();
        parts.bone = loss_bootstrap_bone(net_f, &pose, bone_points, coefficients.0, with_grad.then_some(&mut gf))?;
    }
    if coefficients.1 > 0.0 && !skeleton.joints.is_empty() {
        let mut weights = Vec::new();
        let mut tapes = Vec::new();
        for j in &skeleton.joints {
            let (w, tape) = model.joint_weights(&Vector::<D>::from_column_slice(&j.position))?;
            weights.push(w);
            tapes.push(tape);
        }
        let adjacent: Vec<[usize; 2]> = skeleton.joints.iter().map(|j| j.bones).collect();
        let (loss, grads) = loss_bootstrap_joint(&weights, &adjacent);
        parts.joint = loss;
        if with_grad {
            for (tape, g) in tapes.iter().zip(grads) {
                let dy: Vec<f64> = g.iter().map(|v| v * coefficients.1).collect();
                net_w.backward(tape, &dy, &mut gw)?;
            }
        }
    }
    Ok((parts, gf, gw))
}

/// Per-epoch record written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_bce: f64,
    pub loss_bone: f64,
    pub loss_joint: f64,
    pub val_iou_bbox: f64,
    pub val_iou_surface: f64,
    pub dropped_roots: usize,
}

pub const METRICS_HEADER: &str = "epoch,loss_bce,loss_bone,loss_joint,val_iou_bbox,val_iou_surface";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.loss_bce, r.loss_bone, r.loss_joint, r.val_iou_bbox, r.val_iou_surface
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub metrics: Vec<EpochMetrics>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Checkpoint file kept up to date after every epoch.
pub const LAST_CHECKPOINT: &str = "last.snrf";

/// Adam on the BCE loss (plus the bootstrap losses in the first epochs).
///
/// With `out_dir`, the checkpoint `last.snrf` and `metrics.csv` are rewritten
/// after every epoch; a non-finite loss aborts with [`Error::Diverged`] and
/// leaves the last good checkpoint in place.
pub fn train<const D: usize, M: ArticulatedModel<D> + Clone>(
    mut model: M,
    data: &Dataset<D>,
    validation: Option<&Dataset<D>>,
    settings: &TrainSettings,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<M>> {
    settings.validate()?;
    if data.manifest.n_b != model.meta().n_bones || data.manifest.d != D {
        return Err(Error::Config("dataset does not match the model's bones or dimension".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let (nf, nw) = {
        let (f, w) = model.nets();
        (f.num_params(), w.num_params())
    };
    let mut adam_f = Adam::new(nf);
    let mut adam_w = Adam::new(nw);
    let mut order: Vec<(usize, usize)> = data
        .frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.points.len()).map(move |pi| (fi, pi)))
        .collect();
    let mut metrics = Vec::with_capacity(settings.epochs);

    for epoch in 1..=settings.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let coefficients = settings.bootstrap_coefficients(epoch);
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        let mut boot_batches = 0usize;
        for batch in order.chunks(settings.batch_size) {
            let bone_points = if coefficients.0 > 0.0 {
                sample_bone_points::<D, _>(&data.manifest.skeleton, settings.bootstrap_bone_samples, &mut rng)
            } else {
                Vec::new()
            };
            let (parts, gf, gw) = batch_objective(&model, data, batch, &bone_points, coefficients, true)?;
            let total = parts.total(coefficients);
            if !total.is_finite() || gf.max_abs().is_nan() || gw.max_abs().is_nan() {
                return Err(Error::Diverged { epoch, loss: total });
            }
            let (net_f, net_w) = model.nets_mut();
            adam_f.step(net_f.params_mut(), gf.as_slice(), settings);
            adam_w.step(net_w.params_mut(), gw.as_slice(), settings);
            sums.bce += parts.bce;
            sums.bone += parts.bone;
            sums.joint += parts.joint;
            sums.dropped_roots += parts.dropped_roots;
            batches += 1;
            boot_batches += (coefficients != (0.0, 0.0)) as usize;
        }
        let (val_iou_bbox, val_iou_surface) = match validation {
            Some(v) if !v.frames.is_empty() => {
                let r = compute_iou(&model, v)?;
                (r.iou_bbox, r.iou_surface)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let row = EpochMetrics {
            epoch,
            loss_bce: sums.bce / batches.max(1) as f64,
            loss_bone: sums.bone / boot_batches.max(1) as f64,
            loss_joint: sums.joint / boot_batches.max(1) as f64,
            val_iou_bbox,
            val_iou_surface,
            dropped_roots: sums.dropped_roots,
        };
        log::info!(
            "epoch {epoch}: bce {:.5} bone {:.5} joint {:.5} val iou {:.4}/{:.4} dropped {}",
            row.loss_bce,
            row.loss_bone,
            row.loss_joint,
            row.val_iou_bbox,
            row.val_iou_surface,
            row.dropped_roots
        );
        metrics.push(row);
        if let Some(dir) = out_dir {
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &model.to_checkpoint()?)?;
            write_atomic(&dir.join(LAST_CHECKPOINT), &bytes)?;
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&metrics).as_bytes())?;
        }
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests;
