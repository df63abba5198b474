//! Training objectives, built as differentiable graph nodes plus pure
//! helpers for the closed-form pieces.
//!
//! The combined objective is
//!   L = L_rec + lambda_m * L_cycle + lambda_w * L_prior + lambda_g * L_adv
//! where L_rec sums, over active decoders, a mean per-frame joint-angle
//! error plus a weighted forward-kinematics position error; L_cycle is the
//! mean L1 distance between each clip's latent and the latent of its own
//! reconstruction; L_prior is a kernel two-sample statistic against draws
//! from the Gaussian prior; and L_adv is the least-squares adversarial
//! term. The critic itself minimizes lambda_g * L_disc.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::NormStats;
use crate::kinematics::Skeleton;

/// Term weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Position-error weight inside the reconstruction term.
    pub position: f64,
    /// Latent cycle-consistency weight (lambda_m).
    pub manifold: f64,
    /// Prior-matching weight (lambda_w).
    pub prior: f64,
    /// Adversarial weight (lambda_g), also scaling the critic's own loss.
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            position: 5.0,
            manifold: 0.001,
            prior: 0.1,
            adversarial: 0.001,
        }
    }
}

/// Kernel bandwidth constant for the prior-matching statistic:
/// c = 2 * latent_dim * prior_var, the expected squared distance between
/// two independent prior draws.
pub fn mmd_kernel_scale(latent_dim: usize, prior_var: f64) -> f64 {
    2.0 * latent_dim as f64 * prior_var
}

/// Reconstruction-loss nodes for one decoder's output sequence.
#[derive(Clone, Copy, Debug)]
pub struct ReconLossNodes {
    /// angle + position_weight * position
    pub total: Tensor,
    /// Mean over frames and batch of the summed per-joint rotation
    /// distance, in radians.
    pub angle: Tensor,
    /// Same statistic on forward-kinematics joint positions, when enabled.
    pub position: Option<Tensor>,
}

/// Raw-space targets for a decoded sequence, in the same frame order as
/// the predictions (each entry is one step's batch rows, flattened).
#[derive(Clone, Copy, Debug)]
pub struct ReconTargets<'a> {
    pub frames: &'a [Vec<f64>],
    /// Precomputed joint positions of the target frames; required when a
    /// skeleton is supplied.
    pub positions: Option<&'a [Vec<f64>]>,
}

/// Builds the reconstruction loss for one decoder. `pred_frames` are
/// normalized-space graph nodes; they are denormalized in-graph before
/// comparison, so the error is measured in raw rotation space. When
/// `skeleton` is given, each denormalized pose also runs through forward
/// kinematics and contributes a position error against `targets.positions`.
pub fn motion_reconstruction_loss(
    tape: &mut Tape,
    pred_frames: &[Tensor],
    targets: &ReconTargets,
    norm: &NormStats,
    skeleton: Option<&Rc<Skeleton>>,
    position_weight: f64,
) -> ReconLossNodes {
    let t_len = pred_frames.len();
    assert!(t_len > 0, "no frames to compare");
    assert_eq!(targets.frames.len(), t_len, "target frame count mismatch");
    let batch = tape.shape(pred_frames[0])[0];
    let (scale_, shift) = norm.denorm_scale_shift();
    let (scale_, shift) = (scale_.to_vec(), shift.to_vec());
    let per_frame = 1.0 / (batch * t_len) as f64;

    let mut angle_acc: Option<Tensor> = None;
    let mut pos_acc: Option<Tensor> = None;
    for (step, &pred) in pred_frames.iter().enumerate() {
        let denorm = tape.row_affine(pred, &scale_, &shift);
        let row_shape = tape.shape(denorm).to_vec();
        let target = tape.leaf(&row_shape, targets.frames[step].clone());
        let diff = tape.sub(denorm, target);
        let ang = tape.sum_joint_norms(diff);
        angle_acc = Some(match angle_acc {
            None => ang,
            Some(acc) => tape.add(acc, ang),
        });
        if let Some(sk) = skeleton {
            let positions = targets
                .positions
                .expect("position targets required when a skeleton is supplied");
            let pos = tape.fk(denorm, sk);
            let target_pos = tape.leaf(&row_shape, positions[step].clone());
            let pdiff = tape.sub(pos, target_pos);
            let p = tape.sum_joint_norms(pdiff);
            pos_acc = Some(match pos_acc {
                None => p,
                Some(acc) => tape.add(acc, p),
            });
        }
    }
    let angle = tape.scale(angle_acc.unwrap(), per_frame);
    match pos_acc {
        None => ReconLossNodes {
            total: angle,
            angle,
            position: None,
        },
        Some(acc) => {
            let position = tape.scale(acc, per_frame);
            let weighted = tape.scale(position, position_weight);
            let total = tape.add(angle, weighted);
            ReconLossNodes {
                total,
                angle,
                position: Some(position),
            }
        }
    }
}

/// Mean L1 distance between each clip's latent and the latent of its own
/// decoded reconstruction, summed over the supplied re-encodings.
pub fn latent_cycle_loss(
    tape: &mut Tape,
    z: Tensor,
    z_rot: Tensor,
    z_vel: Option<Tensor>,
) -> Tensor {
    let batch = tape.shape(z)[0] as f64;
    let d = tape.sub(z_rot, z);
    let a = tape.sum_abs(d);
    let mut total = tape.scale(a, 1.0 / batch);
    if let Some(zv) = z_vel {
        let d = tape.sub(zv, z);
        let a = tape.sum_abs(d);
        let s = tape.scale(a, 1.0 / batch);
        total = tape.add(total, s);
    }
    total
}

/// Kernel two-sample statistic between the latent batch and prior draws.
pub fn prior_match_loss(
    tape: &mut Tape,
    z: Tensor,
    prior_rows: &[f64],
    latent_dim: usize,
    prior_var: f64,
) -> Tensor {
    tape.mmd_imq(z, prior_rows, mmd_kernel_scale(latent_dim, prior_var))
}

fn numel(tape: &Tape, t: Tensor) -> usize {
    tape.shape(t).iter().product()
}

/// Least-squares critic loss: 0.5 * mean((real - 1)^2) plus 0.5 * the mean
/// over fake sets of mean(fake^2).
pub fn lsgan_discriminator_loss(tape: &mut Tape, real: Tensor, fakes: &[Tensor]) -> Tensor {
    assert!(!fakes.is_empty());
    let shifted = tape.add_scalar(real, -1.0);
    let rsq = tape.sum_sq(shifted);
    let mut total = tape.scale(rsq, 0.5 / numel(tape, real) as f64);
    let per_set = 0.5 / fakes.len() as f64;
    for &f in fakes {
        let fsq = tape.sum_sq(f);
        let s = tape.scale(fsq, per_set / numel(tape, f) as f64);
        total = tape.add(total, s);
    }
    total
}

/// Least-squares generator loss: 0.5 * the mean over fake sets of
/// mean((fake - 1)^2).
pub fn lsgan_generator_loss(tape: &mut Tape, fakes: &[Tensor]) -> Tensor {
    assert!(!fakes.is_empty());
    let per_set = 0.5 / fakes.len() as f64;
    let mut total: Option<Tensor> = None;
    for &f in fakes {
        let shifted = tape.add_scalar(f, -1.0);
        let sq = tape.sum_sq(shifted);
        let s = tape.scale(sq, per_set / numel(tape, f) as f64);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s),
        });
    }
    total.unwrap()
}

/// Closed-form least-squares GAN losses on plain score slices; returns
/// (critic loss, generator loss).
pub fn lsgan_losses(d_real: &[f64], d_fakes: &[&[f64]]) -> (f64, f64) {
    assert!(!d_real.is_empty() && !d_fakes.is_empty());
    let mean_sq = |xs: &[f64], target: f64| {
        xs.iter().map(|&x| (x - target) * (x - target)).sum::<f64>() / xs.len() as f64
    };
    let real_term = 0.5 * mean_sq(d_real, 1.0);
    let mut fake_zero = 0.0;
    let mut fake_one = 0.0;
    for set in d_fakes {
        assert!(!set.is_empty());
        fake_zero += mean_sq(set, 0.0);
        fake_one += mean_sq(set, 1.0);
    }
    let n = d_fakes.len() as f64;
    (real_term + 0.5 * fake_zero / n, 0.5 * fake_one / n)
}

/// Combines the loss terms with their weights.
pub fn total_loss(
    tape: &mut Tape,
    reconstruction: Tensor,
    cycle: Option<Tensor>,
    prior: Option<Tensor>,
    adversarial: Option<Tensor>,
    w: &LossWeights,
) -> Tensor {
    let mut total = reconstruction;
    for (term, weight) in [
        (cycle, w.manifold),
        (prior, w.prior),
        (adversarial, w.adversarial),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, weight);
            total = tape.add(total, scaled);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{fk_forward, Pose};
    use crate::model::Motion;
    use crate::seeding;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn default_weights_and_kernel_scale() {
        let w = LossWeights::default();
        assert_eq!((w.position, w.manifold, w.prior, w.adversarial), (5.0, 0.001, 0.1, 0.001));
        assert_eq!(mmd_kernel_scale(64, 1.0), 128.0);
        assert_eq!(mmd_kernel_scale(4, 2.0), 16.0);
    }

    /// Loop-based oracle: per frame and batch row, sum the Euclidean norms
    /// of per-joint differences in raw space; average over batch * frames.
    #[test]
    fn reconstruction_loss_matches_loop_oracle() {
        let skeleton = Rc::new(Skeleton::chain(3, 0.8));
        let (batch, t_len, dim) = (3usize, 4usize, 9usize);
        let mut rng = seeding::derive_rng(&[50]);
        let norm = NormStats {
            mean: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            std: (0..dim).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let pred_norm: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..batch * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let target: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..batch * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let target_pos: Vec<Vec<f64>> = target
            .iter()
            .map(|step| {
                step.chunks_exact(dim)
                    .flat_map(|row| fk_forward(&skeleton, &Pose::from_flat(row)).to_flat())
                    .collect()
            })
            .collect();

        let mut tape = Tape::new();
        let preds: Vec<Tensor> = pred_norm
            .iter()
            .map(|v| tape.leaf(&[batch, dim], v.clone()))
            .collect();
        let nodes = motion_reconstruction_loss(
            &mut tape,
            &preds,
            &ReconTargets { frames: &target, positions: Some(&target_pos) },
            &norm,
            Some(&skeleton),
            5.0,
        );

        // oracle
        let mut ang = 0.0;
        let mut pos = 0.0;
        for step in 0..t_len {
            for b in 0..batch {
                let mut denorm = vec![0.0; dim];
                for d in 0..dim {
                    denorm[d] = pred_norm[step][b * dim + d] * norm.std[d] + norm.mean[d];
                }
                for j in 0..dim / 3 {
                    let mut sq = 0.0;
                    for k in 0..3 {
                        let d = denorm[3 * j + k] - target[step][b * dim + 3 * j + k];
                        sq += d * d;
                    }
                    ang += sq.sqrt();
                }
                let p = fk_forward(&skeleton, &Pose::from_flat(&denorm)).to_flat();
                for j in 0..dim / 3 {
                    let mut sq = 0.0;
                    for k in 0..3 {
                        let d = p[3 * j + k] - target_pos[step][b * dim + 3 * j + k];
                        sq += d * d;
                    }
                    pos += sq.sqrt();
                }
            }
        }
        let denom = (batch * t_len) as f64;
        assert_abs_diff_eq!(tape.scalar_value(nodes.angle), ang / denom, epsilon = 1e-12);
        assert_abs_diff_eq!(
            tape.scalar_value(nodes.position.unwrap()),
            pos / denom,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            tape.scalar_value(nodes.total),
            ang / denom + 5.0 * pos / denom,
            epsilon = 1e-12
        );

        // Gradient of the composition (denormalize, FK, norms) agrees with
        // central differences through the loop oracle.
        tape.backward(nodes.total);
        let g = tape.grad(preds[1]).unwrap().to_vec();
        let eval = |pn: &Vec<Vec<f64>>| {
            let mut ang = 0.0;
            let mut pos = 0.0;
            for step in 0..t_len {
                for b in 0..batch {
                    let mut denorm = vec![0.0; dim];
                    for d in 0..dim {
                        denorm[d] = pn[step][b * dim + d] * norm.std[d] + norm.mean[d];
                    }
                    for j in 0..dim / 3 {
                        let mut sq = 0.0;
                        for k in 0..3 {
                            let d = denorm[3 * j + k] - target[step][b * dim + 3 * j + k];
                            sq += d * d;
                        }
                        ang += sq.sqrt();
                    }
                    let p = fk_forward(&skeleton, &Pose::from_flat(&denorm)).to_flat();
                    for j in 0..dim / 3 {
                        let mut sq = 0.0;
                        for k in 0..3 {
                            let d = p[3 * j + k] - target_pos[step][b * dim + 3 * j + k];
                            sq += d * d;
                        }
                        pos += sq.sqrt();
                    }
                }
            }
            (ang + 5.0 * pos) / denom
        };
        let h = 1e-6;
        for idx in [0, 7, 13, 26] {
            let mut plus = pred_norm.clone();
            plus[1][idx] += h;
            let mut minus = pred_norm.clone();
            minus[1][idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(g[idx], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn latent_cycle_loss_matches_oracle() {
        let mut tape = Tape::new();
        let z = tape.leaf(&[2, 3], vec![0.0, 1.0, -1.0, 2.0, 0.5, 0.0]);
        let zr = tape.leaf(&[2, 3], vec![0.5, 1.0, -2.0, 2.0, 0.0, 1.0]);
        let zv = tape.leaf(&[2, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // |zr - z| sums to 0.5 + 1.0 + 0.5 + 1.0 = 3.0; / batch 2 = 1.5
        let rot_only = latent_cycle_loss(&mut tape, z, zr, None);
        assert_abs_diff_eq!(tape.scalar_value(rot_only), 1.5, epsilon = 1e-15);
        // |zv - z| sums to 1 + 1 + 2 + 0.5 = 4.5; / 2 = 2.25
        let both = latent_cycle_loss(&mut tape, z, zr, Some(zv));
        assert_abs_diff_eq!(tape.scalar_value(both), 1.5 + 2.25, epsilon = 1e-15);
    }

    #[test]
    fn lsgan_closed_form_fixtures() {
        // Everything at 0.5: critic loss 1/4, generator loss 1/8.
        let half = [0.5, 0.5, 0.5];
        let (ld, lg) = lsgan_losses(&half, &[&half, &half]);
        assert_abs_diff_eq!(ld, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(lg, 0.125, epsilon = 1e-15);
        // Perfect critic: real at 1, fakes at 0.
        let (ld, lg) = lsgan_losses(&[1.0, 1.0], &[&[0.0, 0.0][..]]);
        assert_abs_diff_eq!(ld, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lg, 0.5, epsilon = 1e-15);
        // Fooled critic: fakes at 1.
        let (ld, lg) = lsgan_losses(&[1.0], &[&[1.0][..]]);
        assert_abs_diff_eq!(ld, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(lg, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lsgan_graph_matches_closed_form() {
        let mut rng = seeding::derive_rng(&[51]);
        let real: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..1.5)).collect();
        let fake_a: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..1.5)).collect();
        let fake_b: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..1.5)).collect();
        let (ld_ref, lg_ref) = lsgan_losses(&real, &[&fake_a, &fake_b]);

        let mut tape = Tape::new();
        let r = tape.leaf(&[2, 1, 4], real.clone());
        let fa = tape.leaf(&[2, 1, 4], fake_a.clone());
        let fb = tape.leaf(&[2, 1, 4], fake_b.clone());
        let ld = lsgan_discriminator_loss(&mut tape, r, &[fa, fb]);
        let lg = lsgan_generator_loss(&mut tape, &[fa, fb]);
        assert_abs_diff_eq!(tape.scalar_value(ld), ld_ref, epsilon = 1e-14);
        assert_abs_diff_eq!(tape.scalar_value(lg), lg_ref, epsilon = 1e-14);
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let one = tape.leaf_scalar(1.0);
        let total = total_loss(&mut tape, one, Some(one), Some(one), Some(one), &LossWeights::default());
        assert_abs_diff_eq!(tape.scalar_value(total), 1.102, epsilon = 1e-12);
        let bare = total_loss(&mut tape, one, None, None, None, &LossWeights::default());
        assert_eq!(tape.scalar_value(bare), 1.0);
    }

    #[test]
    fn reconstruction_loss_without_skeleton_has_no_position_term() {
        let mut tape = Tape::new();
        let pred = tape.leaf(&[1, 3], vec![1.0, 0.0, 0.0]);
        let targets = [vec![0.0, 0.0, 0.0]];
        let nodes = motion_reconstruction_loss(
            &mut tape,
            &[pred],
            &ReconTargets { frames: &targets, positions: None },
            &NormStats::identity(3),
            None,
            5.0,
        );
        assert!(nodes.position.is_none());
        assert_eq!(tape.scalar_value(nodes.total), 1.0);
        assert_eq!(tape.scalar_value(nodes.angle), 1.0);
    }

    #[test]
    fn motion_type_round_trips_frames() {
        // sanity on the Motion helper used throughout the loss plumbing
        let m = Motion::from_frames(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m.reversed().frame(0), &[3.0, 4.0]);
    }
}
