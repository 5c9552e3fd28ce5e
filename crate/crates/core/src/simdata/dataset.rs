//! In-memory datasets and the "SNRD" file format.
//!
//! Layout (little endian): magic `SNRD`, version u32, manifest as a u64 byte
//! length plus UTF-8 JSON, then per frame: the `n_b` transforms (rotation
//! row-major, then translation), the pose vector, a u64 point count, the
//! points, one label byte per point and one kind byte per point.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::binio::{Reader, Writer};
use crate::skeleton::{BoneTransformSet, RigidTransform};
use crate::{Error, Matrix, Result, Vector};

pub const DATASET_MAGIC: &[u8; 4] = b"SNRD";
pub const DATASET_VERSION: u32 = 1;

const MAX_MANIFEST_BYTES: u64 = 1 << 26;
const MAX_POINTS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SampleKind {
    Uniform = 0,
    NearSurface = 1,
}

/// A joint of the canonical skeleton and the two bones it connects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointInfo {
    pub position: Vec<f64>,
    pub bones: [usize; 2],
}

/// Canonical skeleton facts the bootstrap losses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonInfo {
    /// Canonical bone segments `[start, end]`.
    pub bones: Vec<[Vec<f64>; 2]>,
    pub joints: Vec<JointInfo>,
    pub canonical_min: Vec<f64>,
    pub canonical_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub frame_count: usize,
    pub d: usize,
    pub n_b: usize,
    pub n_p: usize,
    pub rigid_object: bool,
    pub skeleton: SkeletonInfo,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample<const D: usize> {
    pub transforms: BoneTransformSet<D>,
    pub points: Vec<Vector<D>>,
    pub labels: Vec<bool>,
    pub kinds: Vec<SampleKind>,
}

impl<const D: usize> FrameSample<D> {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.labels.len() || self.points.len() != self.kinds.len() {
            return Err(Error::Config(format!(
                "frame has {} points, {} labels and {} kinds",
                self.points.len(),
                self.labels.len(),
                self.kinds.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<const D: usize> {
    pub manifest: Manifest,
    pub frames: Vec<FrameSample<D>>,
}

impl<const D: usize> Dataset<D> {
    pub fn n_points(&self) -> usize {
        self.frames.iter().map(|f| f.points.len()).sum()
    }

    /// First `n` frames, manifest adjusted.
    pub fn head(&self, n: usize) -> Self {
        let frames: Vec<_> = self.frames.iter().take(n).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.frame_count = frames.len();
        Self { manifest, frames }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        if self.manifest.frame_count != self.frames.len() {
            return Err(Error::Config("manifest frame_count disagrees with frames".into()));
        }
        let mut w = Writer::new(out);
        w.bytes(DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        let json = serde_json::to_vec(&self.manifest)?;
        w.u64(json.len() as u64)?;
        w.bytes(&json)?;
        for f in &self.frames {
            f.validate()?;
            for t in &f.transforms.transforms {
                for r in 0..D {
                    for c in 0..D {
                        w.f64(t.rotation[(r, c)])?;
                    }
                }
                w.f64s(t.translation.as_slice())?;
            }
            w.f64s(&f.transforms.pose)?;
            w.u64(f.points.len() as u64)?;
            for p in &f.points {
                w.f64s(p.as_slice())?;
            }
            let labels: Vec<u8> = f.labels.iter().map(|l| *l as u8).collect();
            w.bytes(&labels)?;
            let kinds: Vec<u8> = f.kinds.iter().map(|k| *k as u8).collect();
            w.bytes(&kinds)?;
        }
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        let manifest = read_header(&mut r)?;
        if manifest.d != D {
            return Err(Error::Dimension {
                what: "dataset dimension",
                expected: D,
                got: manifest.d,
            });
        }
        let mut frames = Vec::with_capacity(manifest.frame_count.min(1 << 16));
        for _ in 0..manifest.frame_count {
            let mut transforms = Vec::with_capacity(manifest.n_b);
            for _ in 0..manifest.n_b {
                let at = r.offset();
                let rot = r.f64s(D * D, "rotation")?;
                let tr = r.f64s(D, "translation")?;
                let t = RigidTransform::new(
                    Matrix::<D>::from_row_slice(&rot),
                    Vector::<D>::from_column_slice(&tr),
                )
                .map_err(|_| Error::format(at, "bone transform is not rigid"))?;
                transforms.push(t);
            }
            let pose = r.f64s(manifest.n_p, "pose")?;
            let at = r.offset();
            let n = r.u64("point count")?;
            if n > MAX_POINTS {
                return Err(Error::format(at, format!("implausible point count {n}")));
            }
            let n = n as usize;
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                points.push(Vector::<D>::from_column_slice(&r.f64s(D, "point")?));
            }
            let mut bytes = vec![0u8; n];
            let at = r.offset();
            r.bytes(&mut bytes, "labels")?;
            let labels = bytes
                .iter()
                .enumerate()
                .map(|(i, b)| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    v => Err(Error::format(at + i as u64, format!("label byte {v}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let at = r.offset();
            r.bytes(&mut bytes, "kinds")?;
            let kinds = bytes
                .iter()
                .enumerate()
                .map(|(i, b)| match b {
                    0 => Ok(SampleKind::Uniform),
                    1 => Ok(SampleKind::NearSurface),
                    v => Err(Error::format(at + i as u64, format!("sample kind byte {v}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let transforms = BoneTransformSet::new(transforms, pose)?;
            frames.push(FrameSample {
                transforms,
                points,
                labels,
                kinds,
            });
        }
        r.expect_eof()
            .map_err(|_| Error::format(r.offset(), "payload holds more data than the manifest frame_count"))?;
        Ok(Self { manifest, frames })
    }

    /// Writes `<dir>/<name>.snrd` and `<dir>/<name>.manifest.json`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.snrd"));
        self.write_to(BufWriter::new(File::create(&path)?))?;
        std::fs::write(
            dir.join(format!("{name}.manifest.json")),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<Manifest> {
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SNRD\"")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported dataset version {version}")));
    }
    let at = r.offset();
    let block = r.block(MAX_MANIFEST_BYTES, "manifest")?;
    let manifest: Manifest =
        serde_json::from_slice(&block).map_err(|e| Error::format(at, format!("manifest JSON: {e}")))?;
    Ok(manifest)
}

/// Reads only the manifest of a dataset file (to dispatch on its dimension).
pub fn peek_manifest(path: &Path) -> Result<Manifest> {
    read_header(&mut Reader::new(BufReader::new(File::open(path)?)))
}
