//! Clip windowing and corruption used by training and evaluation.

use rand::Rng;

use crate::model::Motion;
use crate::{Error, Result};

/// Uniformly random contiguous window of `len` frames.
pub fn sample_clip(motion: &Motion, len: usize, rng: &mut impl Rng) -> Result<Motion> {
    if len == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    if motion.n_frames() < len {
        return Err(Error::InvalidData(format!(
            "clip has {} frames, need at least {len}",
            motion.n_frames()
        )));
    }
    let start = rng.random_range(0..=motion.n_frames() - len);
    Ok(motion.window(start, len))
}

/// Zeroes each (frame, joint) rotation independently with probability `p`,
/// simulating dropped joint measurements.
pub fn corrupt_zero_joints(motion: &Motion, p: f64, rng: &mut impl Rng) -> Motion {
    assert!((0.0..=1.0).contains(&p), "corruption probability out of range");
    assert_eq!(motion.dim() % 3, 0, "motion dim must be a multiple of 3");
    let n_joints = motion.dim() / 3;
    let mut out = motion.clone();
    for t in 0..out.n_frames() {
        let frame = out.frame_mut(t);
        for j in 0..n_joints {
            if rng.random::<f64>() < p {
                frame[3 * j..3 * j + 3].fill(0.0);
            }
        }
    }
    out
}
