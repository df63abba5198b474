//! Motion clip files, dataset manifests and preprocessing.
//!
//! A motion file stores a skeleton plus per-frame joint rotations in
//! exponential coordinates (and optionally a root translation track, which
//! training discards). A dataset manifest is a text file with one
//! `train<TAB>path` or `test<TAB>path` line per clip.

mod normalize;
mod sampling;
mod synthetic;

pub use normalize::{NormStats, STD_FLOOR};
pub use sampling::{corrupt_zero_joints, sample_clip};
pub use synthetic::{generate_synthetic, MotionClass, SynthesisConfig};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::kinematics::Skeleton;
use crate::model::Motion;
use crate::{Error, Result};

/// On-disk clip: skeleton, frame rate, per-frame exponential coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionFile {
    pub skeleton: Skeleton,
    pub fps: f64,
    /// frames[t][j] is joint j's rotation at frame t.
    pub frames: Vec<Vec<[f64; 3]>>,
    /// Optional per-frame root position track; dropped by preprocessing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_translation: Option<Vec<[f64; 3]>>,
}

impl MotionFile {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::InvalidData(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidData("motion file has no frames".into()));
        }
        let nj = self.skeleton.n_joints();
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != nj {
                return Err(Error::InvalidData(format!(
                    "frame {t} has {} joints, skeleton has {nj}",
                    frame.len()
                )));
            }
        }
        if let Some(rt) = &self.root_translation {
            if rt.len() != self.frames.len() {
                return Err(Error::InvalidData(format!(
                    "root translation has {} entries for {} frames",
                    rt.len(),
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }

    /// Flatten to a clip of rows, discarding any root translation.
    pub fn to_motion(&self) -> Motion {
        let dim = 3 * self.skeleton.n_joints();
        let mut data = Vec::with_capacity(self.frames.len() * dim);
        for frame in &self.frames {
            for joint in frame {
                data.extend_from_slice(joint);
            }
        }
        Motion::new(self.frames.len(), dim, data)
    }
}

pub fn load_motion(path: &Path) -> Result<MotionFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let file: MotionFile = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    file.validate()?;
    Ok(file)
}

pub fn save_motion(path: &Path, file: &MotionFile) -> Result<()> {
    file.validate()?;
    let text = serde_json::to_string(file)?;
    fs::write(path, text)?;
    Ok(())
}

/// Decimate to the target frame rate (the source rate must be an integer
/// multiple) and drop the root translation.
pub fn preprocess(file: &MotionFile, target_fps: f64) -> Result<Motion> {
    file.validate()?;
    if !(target_fps > 0.0) || !target_fps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target fps must be positive, got {target_fps}"
        )));
    }
    let ratio = file.fps / target_fps;
    let step = ratio.round();
    if step < 1.0 || (ratio - step).abs() > 1e-9 {
        return Err(Error::InvalidData(format!(
            "cannot decimate {} fps to {target_fps} fps: the ratio {ratio} is not a positive integer",
            file.fps
        )));
    }
    let step = step as usize;
    let full = file.to_motion();
    let frames: Vec<Vec<f64>> = (0..full.n_frames())
        .step_by(step)
        .map(|t| full.frame(t).to_vec())
        .collect();
    Ok(Motion::from_frames(&frames))
}

/// A preprocessed dataset: train/test clips sharing one skeleton, all at
/// the target frame rate.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub skeleton: Skeleton,
    pub fps: f64,
    pub train: Vec<Motion>,
    pub test: Vec<Motion>,
}

/// Reads a manifest of `train<TAB>path` / `test<TAB>path` lines (paths are
/// relative to the manifest's directory), loading and preprocessing every
/// referenced clip.
pub fn load_manifest(path: &Path, target_fps: f64) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut skeleton: Option<Skeleton> = None;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, rel) = line.split_once('\t').ok_or_else(|| {
            Error::InvalidData(format!(
                "{}:{}: expected `train<TAB>path` or `test<TAB>path`",
                path.display(),
                lineno + 1
            ))
        })?;
        let file = load_motion(&base.join(rel))?;
        match &skeleton {
            None => skeleton = Some(file.skeleton.clone()),
            Some(s) if *s != file.skeleton => {
                return Err(Error::InvalidData(format!(
                    "{rel}: skeleton differs from the manifest's first clip"
                )))
            }
            _ => {}
        }
        let motion = preprocess(&file, target_fps)?;
        match split {
            "train" => train.push(motion),
            "test" => test.push(motion),
            other => {
                return Err(Error::InvalidData(format!(
                    "{}:{}: unknown split {other:?}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    let skeleton = skeleton
        .ok_or_else(|| Error::InvalidData(format!("{}: manifest lists no clips", path.display())))?;
    Ok(DatasetSplit {
        skeleton,
        fps: target_fps,
        train,
        test,
    })
}

/// Writes clips plus a manifest into `dir`; every clip whose index falls in
/// the trailing `test_fraction` goes to the test split (at least one clip
/// stays in train). Returns the manifest path.
pub fn write_dataset(dir: &Path, clips: &[MotionFile], test_fraction: f64) -> Result<PathBuf> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no clips to write".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    fs::create_dir_all(dir)?;
    let n_test = (clips.len() as f64 * test_fraction).floor() as usize;
    let n_train = clips.len() - n_test;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = fs::File::create(&manifest_path)?;
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:04}.json");
        save_motion(&dir.join(&name), clip)?;
        let split = if i < n_train { "train" } else { "test" };
        writeln!(manifest, "{split}\t{name}")?;
    }
    Ok(manifest_path)
}
