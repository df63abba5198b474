//! Operations on the learned manifold — random sampling, latent
//! interpolation, denoising, motion analogy — and an evaluation harness
//! that scores reconstruction quality over the course of a clip.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::sample_clip;
use crate::kinematics::{fk_forward, Pose, Skeleton};
use crate::model::{LatentVector, Model, Motion};
use crate::seeding::{self, tags};
use crate::{Error, Result};

/// Number of equal frame intervals a clip is split into for reporting.
pub const METRIC_INTERVALS: usize = 5;
/// Default number of random evaluation windows.
pub const DEFAULT_EVAL_WINDOWS: usize = 30;

/// Draws `n` latent vectors from the Gaussian prior and decodes each into
/// a clip. Deterministic in `seed`.
pub fn sample_random(model: &Model, n: usize, seed: u64) -> Result<Vec<Motion>> {
    let sd = model.hyper.prior_var.sqrt();
    let mut rng = seeding::derive_rng(&[seed, tags::SAMPLE]);
    (0..n)
        .map(|_| {
            let z = LatentVector(
                (0..model.hyper.latent_dim)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            Ok(model.decode_rotation(&z)?.motion)
        })
        .collect()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

/// Walks the latent segment between two clips in `steps` equal steps,
/// decoding `steps + 1` clips. The first and last returned clips are
/// exactly the decoded endpoints: at t = 0 and t = 1 the blended latent
/// equals the endpoint latent bit for bit.
pub fn interpolate(model: &Model, a: &Motion, b: &Motion, steps: usize) -> Result<Vec<Motion>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("interpolation needs at least 1 step".into()));
    }
    let za = model.encode(a)?;
    let zb = model.encode(b)?;
    (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            let z = LatentVector(lerp(&za.0, &zb.0, t));
            Ok(model.decode_rotation(&z)?.motion)
        })
        .collect()
}

/// Projects a (possibly corrupted) clip onto the manifold: encode, then
/// decode with the pose decoder.
pub fn denoise(model: &Model, motion: &Motion) -> Result<Motion> {
    let z = model.encode(motion)?;
    Ok(model.decode_rotation(&z)?.motion)
}

/// Completes the analogy "`a` is to `b` as the result is to `c`" by
/// decoding `z(a) - z(b) + z(c)`.
pub fn analogy(model: &Model, a: &Motion, b: &Motion, c: &Motion) -> Result<Motion> {
    let za = model.encode(a)?;
    let zb = model.encode(b)?;
    let zc = model.encode(c)?;
    let z = LatentVector(
        za.0.iter()
            .zip(&zb.0)
            .zip(&zc.0)
            .map(|((x, y), w)| x - y + w)
            .collect(),
    );
    Ok(model.decode_rotation(&z)?.motion)
}

/// One evaluation window with everything needed to score it.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub target: Motion,
    pub pred_rotation: Motion,
    pub pred_velocity: Option<Motion>,
    pub latent: Vec<f64>,
    /// Latent of the re-encoded pose reconstruction.
    pub latent_reencoded: Vec<f64>,
}

/// Reconstructs one window with every active decoder and re-encodes the
/// pose reconstruction.
pub fn eval_sample(model: &Model, window: &Motion) -> Result<EvalSample> {
    let rec = model.reconstruct(window)?;
    let reencoded = model.encode(&rec.rotation.motion)?;
    Ok(EvalSample {
        target: window.clone(),
        pred_rotation: rec.rotation.motion,
        pred_velocity: rec.velocity.map(|d| d.motion),
        latent: rec.latent.0,
        latent_reencoded: reencoded.0,
    })
}

/// Per-decoder reconstruction errors, one value per frame interval.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderMetrics {
    pub decoder: String,
    /// Mean per-frame sum over joints of the rotation-vector error norm.
    pub angle: Vec<f64>,
    /// Same, for forward-kinematics joint positions.
    pub position: Vec<f64>,
}

/// Reconstruction quality over the course of a clip, plus the latent
/// round-trip error.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fps: f64,
    pub seq_len: usize,
    pub n_windows: usize,
    /// Exclusive end frame of each interval.
    pub interval_ends: Vec<usize>,
    pub decoders: Vec<DecoderMetrics>,
    /// Mean L1 distance between a window's latent and the latent of its
    /// decoded reconstruction.
    pub latent_error: f64,
}

impl MetricReport {
    /// Interval end times in seconds.
    pub fn interval_seconds(&self) -> Vec<f64> {
        self.interval_ends.iter().map(|&e| e as f64 / self.fps).collect()
    }

    /// Long-form CSV: `metric,decoder,interval_end_s,value` with one row
    /// per (metric, decoder, interval) and a final latent row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,decoder,interval_end_s,value\n");
        let seconds = self.interval_seconds();
        for dec in &self.decoders {
            for (metric, values) in [("E_r", &dec.angle), ("E_p", &dec.position)] {
                for (s, v) in seconds.iter().zip(values) {
                    out.push_str(&format!("{metric},{},{s},{v}\n", dec.decoder));
                }
            }
        }
        out.push_str(&format!("E_z,,,{}\n", self.latent_error));
        out
    }
}

fn frame_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.chunks_exact(3)
        .zip(target.chunks_exact(3))
        .map(|(p, t)| {
            ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt()
        })
        .sum()
}

fn positions(skeleton: &Skeleton, frame: &[f64]) -> Vec<f64> {
    fk_forward(skeleton, &Pose::from_flat(frame)).to_flat()
}

fn interval_means(
    samples: &[EvalSample],
    pred_of: impl Fn(&EvalSample) -> &Motion,
    map_frame: impl Fn(&[f64]) -> Vec<f64>,
    ends: &[usize],
) -> Vec<f64> {
    let mut sums = vec![0.0; ends.len()];
    let mut counts = vec![0usize; ends.len()];
    for s in samples {
        let pred = pred_of(s);
        let mut k = 0;
        for t in 0..pred.n_frames() {
            while t >= ends[k] {
                k += 1;
            }
            sums[k] += frame_error(&map_frame(pred.frame(t)), &map_frame(s.target.frame(t)));
            counts[k] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
}

/// Aggregates evaluation samples into per-interval means. All samples must
/// have the same length, which `n_intervals` must divide into non-empty
/// intervals.
pub fn aggregate_metrics(
    samples: &[EvalSample],
    skeleton: &Skeleton,
    fps: f64,
    n_intervals: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let t_len = samples[0].target.n_frames();
    if n_intervals == 0 || t_len < n_intervals {
        return Err(Error::InvalidArgument(format!(
            "cannot split {t_len} frames into {n_intervals} intervals"
        )));
    }
    let with_velocity = samples[0].pred_velocity.is_some();
    for s in samples {
        if s.target.n_frames() != t_len || s.pred_rotation.n_frames() != t_len {
            return Err(Error::InvalidArgument("evaluation samples have mixed lengths".into()));
        }
        if s.pred_velocity.is_some() != with_velocity {
            return Err(Error::InvalidArgument(
                "evaluation samples disagree on the velocity decoder".into(),
            ));
        }
    }

    let ends: Vec<usize> = (1..=n_intervals).map(|k| k * t_len / n_intervals).collect();
    let mut decoders = Vec::new();
    let mut push = |name: &str, pred_of: fn(&EvalSample) -> &Motion| {
        decoders.push(DecoderMetrics {
            decoder: name.to_string(),
            angle: interval_means(samples, pred_of, |f| f.to_vec(), &ends),
            position: interval_means(samples, pred_of, |f| positions(skeleton, f), &ends),
        });
    };
    push("rotation", |s| &s.pred_rotation);
    if with_velocity {
        push("velocity", |s| s.pred_velocity.as_ref().unwrap());
    }

    let latent_error = samples
        .iter()
        .map(|s| {
            s.latent
                .iter()
                .zip(&s.latent_reencoded)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / samples.len() as f64;

    Ok(MetricReport {
        fps,
        seq_len: t_len,
        n_windows: samples.len(),
        interval_ends: ends,
        decoders,
        latent_error,
    })
}

/// Scores the model on `n_windows` random windows from `clips`.
/// Deterministic in `seed`; windows are reconstructed in parallel.
pub fn evaluate(
    model: &Model,
    clips: &[Motion],
    skeleton: &Skeleton,
    fps: f64,
    n_windows: usize,
    seed: u64,
) -> Result<MetricReport> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no clips to evaluate on".into()));
    }
    if n_windows == 0 {
        return Err(Error::InvalidArgument("need at least 1 evaluation window".into()));
    }
    if skeleton.n_joints() != model.hyper.n_joints {
        return Err(Error::InvalidArgument(format!(
            "model expects {} joints but the skeleton has {}",
            model.hyper.n_joints,
            skeleton.n_joints()
        )));
    }
    let windows: Vec<Motion> = (0..n_windows)
        .map(|i| {
            let mut rng = seeding::derive_rng(&[seed, tags::EVAL, i as u64]);
            let clip = &clips[rng.random_range(0..clips.len())];
            sample_clip(clip, model.hyper.seq_len, &mut rng)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<EvalSample> = windows
        .par_iter()
        .map(|w| eval_sample(model, w))
        .collect::<Result<_>>()?;
    aggregate_metrics(&samples, skeleton, fps, METRIC_INTERVALS)
}
