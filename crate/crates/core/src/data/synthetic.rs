//! Synthetic motion generator: sinusoidal joint-angle clips in three
//! frequency classes, used for self-contained training and testing.

use std::f64::consts::TAU;

use rand::Rng;

use crate::data::MotionFile;
use crate::kinematics::Skeleton;
use crate::seeding::{self, tags};

/// Clip classes, assigned round-robin by clip index. Each has a distinct
/// tempo band and a dominant rotation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionClass {
    /// Slow lateral lean, 0.3-0.5 Hz around z.
    Sway,
    /// Walking-tempo sagittal swing, 0.8-1.2 Hz around x.
    Swing,
    /// Fast vertical twist, 1.8-2.4 Hz around y.
    Twist,
}

impl MotionClass {
    pub fn of_index(i: usize) -> MotionClass {
        match i % 3 {
            0 => MotionClass::Sway,
            1 => MotionClass::Swing,
            _ => MotionClass::Twist,
        }
    }

    pub fn frequency_band(self) -> (f64, f64) {
        match self {
            MotionClass::Sway => (0.3, 0.5),
            MotionClass::Swing => (0.8, 1.2),
            MotionClass::Twist => (1.8, 2.4),
        }
    }

    fn dominant_axis(self) -> usize {
        match self {
            MotionClass::Sway => 2,
            MotionClass::Swing => 0,
            MotionClass::Twist => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Sway => "sway",
            MotionClass::Swing => "swing",
            MotionClass::Twist => "twist",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisConfig {
    pub n_clips: usize,
    pub n_frames: usize,
    pub fps: f64,
    pub skeleton: Skeleton,
    /// Per-joint rotation amplitude cap in radians.
    pub max_amplitude: f64,
}

impl SynthesisConfig {
    pub fn new(skeleton: Skeleton, n_clips: usize, n_frames: usize, fps: f64) -> SynthesisConfig {
        SynthesisConfig {
            n_clips,
            n_frames,
            fps,
            skeleton,
            max_amplitude: 1.2,
        }
    }
}

/// Generates `n_clips` deterministic clips. Each clip draws one frequency
/// from its class band and, per joint, an amplitude, a phase, and a unit
/// axis mixture dominated by the class axis; joint j's rotation at frame t
/// is `amp_j * axis_j * sin(2 pi f t / fps + phase_j)`. The root joint
/// moves at 30% amplitude so clips stay roughly upright.
pub fn generate_synthetic(cfg: &SynthesisConfig, seed: u64) -> Vec<MotionFile> {
    assert!(cfg.n_frames > 0 && cfg.fps > 0.0, "need frames and a frame rate");
    let nj = cfg.skeleton.n_joints();
    (0..cfg.n_clips)
        .map(|i| {
            let mut rng = seeding::derive_rng(&[seed, tags::SYNTH, i as u64]);
            let class = MotionClass::of_index(i);
            let (lo, hi) = class.frequency_band();
            let freq = rng.random_range(lo..hi);
            let dominant = class.dominant_axis();
            let joints: Vec<(f64, f64, [f64; 3])> = (0..nj)
                .map(|j| {
                    let mut amp = cfg.max_amplitude * rng.random_range(0.3..1.0);
                    if j == 0 {
                        amp *= 0.3;
                    }
                    let phase = rng.random_range(0.0..TAU);
                    let mut axis = [0.0; 3];
                    for (k, a) in axis.iter_mut().enumerate() {
                        *a = if k == dominant {
                            1.0
                        } else {
                            rng.random_range(-0.2..0.2)
                        };
                    }
                    let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
                    for a in &mut axis {
                        *a /= norm;
                    }
                    (amp, phase, axis)
                })
                .collect();
            let frames = (0..cfg.n_frames)
                .map(|t| {
                    let time = t as f64 / cfg.fps;
                    joints
                        .iter()
                        .map(|&(amp, phase, axis)| {
                            let s = amp * (TAU * freq * time + phase).sin();
                            [axis[0] * s, axis[1] * s, axis[2] * s]
                        })
                        .collect()
                })
                .collect();
            MotionFile {
                skeleton: cfg.skeleton.clone(),
                fps: cfg.fps,
                frames,
                root_translation: None,
            }
        })
        .collect()
}
