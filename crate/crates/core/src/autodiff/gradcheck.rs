//! Finite-difference validation of analytic gradients, organized by named
//! parameter blocks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub step: f64,
    /// A block fails when its worst relative error reaches this.
    pub tolerance: f64,
    /// Elements checked per block; 0 checks every element.
    pub samples_per_block: usize,
    /// Seeds the per-block element sampler.
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-5,
            tolerance: 1e-3,
            samples_per_block: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub elements: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn failed_blocks(&self) -> Vec<&BlockReport> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_err >= self.tolerance)
            .collect()
    }
}

/// Checks analytic gradients against central differences.
///
/// `blocks` names each parameter block and gives its element count;
/// `analytic` holds the precomputed gradient of each block; `perturb`
/// adds a delta to one element (block index, element index, delta) of the
/// live parameters held in `state`; `loss` re-evaluates the scalar
/// objective on them.
///
/// The objective must be deterministic: it is evaluated twice up front and
/// the call fails if the two values differ at all.
pub fn gradient_check<S>(
    settings: &GradCheckSettings,
    blocks: &[(String, usize)],
    analytic: &[Vec<f64>],
    state: &mut S,
    perturb: impl Fn(&mut S, usize, usize, f64),
    loss: impl Fn(&mut S) -> f64,
) -> Result<GradCheckReport> {
    assert_eq!(blocks.len(), analytic.len());
    for ((name, len), grad) in blocks.iter().zip(analytic) {
        assert_eq!(*len, grad.len(), "gradient size mismatch for block {name}");
    }

    let first = loss(state);
    let second = loss(state);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Numeric(format!(
            "objective is not deterministic: {first} vs {second}"
        )));
    }
    if !first.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {first}")));
    }

    let h = settings.step;
    let mut reports = Vec::with_capacity(blocks.len());
    for (bi, (name, len)) in blocks.iter().enumerate() {
        // Deterministic element sample, independent of other blocks.
        let mut indices: Vec<usize> = (0..*len).collect();
        if settings.samples_per_block > 0 && settings.samples_per_block < *len {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ (bi as u64).wrapping_mul(0x9e3779b97f4a7c15));
            indices.shuffle(&mut rng);
            indices.truncate(settings.samples_per_block);
            indices.sort_unstable();
        }

        let mut max_rel_err: f64 = 0.0;
        let mut worst = None;
        for &i in &indices {
            perturb(state, bi, i, h);
            let up = loss(state);
            perturb(state, bi, i, -2.0 * h);
            let down = loss(state);
            perturb(state, bi, i, h);
            let numeric = (up - down) / (2.0 * h);
            let an = analytic[bi][i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((i, an, numeric));
            }
        }
        reports.push(BlockReport {
            name: name.clone(),
            elements: *len,
            checked: indices.len(),
            max_rel_err,
            worst,
        });
    }
    Ok(GradCheckReport {
        blocks: reports,
        tolerance: settings.tolerance,
    })
}
