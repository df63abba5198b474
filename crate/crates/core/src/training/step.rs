//! One optimization step. With an adversary: first the critic updates on
//! the current reconstructions (detached from the generator graph), then
//! the generator updates through the combined objective, scoring its
//! reconstructions with the freshly updated critic.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::autodiff::{GruCellWeights, Tape, Tensor};
use crate::data::NormStats;
use crate::kinematics::{fk_forward, Pose, Skeleton};
use crate::losses::{
    latent_cycle_loss, lsgan_discriminator_loss, lsgan_generator_loss, motion_reconstruction_loss,
    prior_match_loss, total_loss, LossWeights, ReconTargets,
};
use crate::model::{
    bind_decoder, bind_discriminator, bind_encoder, run_decoder, run_discriminator, run_encoder,
    BoundDecoder, BoundDiscriminator, BoundEncoder, DecoderKind, DropoutCfg, Model, Motion,
    BN_MOMENTUM,
};

/// Optimizer state for both parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub gen: AdamState,
    pub disc: AdamState,
}

impl OptState {
    pub fn new(model: &Model) -> OptState {
        let mut gen_sizes = Vec::new();
        model
            .params
            .visit_generator(model.variant, &mut |_, t| gen_sizes.push(t.data.len()));
        let mut disc_sizes = Vec::new();
        model
            .params
            .visit_discriminator(model.variant, &mut |_, t| disc_sizes.push(t.data.len()));
        OptState {
            gen: AdamState::new(&gen_sizes),
            disc: AdamState::new(&disc_sizes),
        }
    }
}

/// Per-term loss values of one step (zeros for terms the variant disables).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    /// Reconstruction total: angle + position_weight * position, summed
    /// over active decoders.
    pub recon: f64,
    pub angle: f64,
    pub position: f64,
    /// Latent cycle-consistency term.
    pub cycle: f64,
    /// Prior-matching kernel statistic.
    pub prior: f64,
    /// Generator's adversarial term.
    pub adversarial: f64,
    /// Critic's own loss (before its update).
    pub critic: f64,
    /// Weighted generator objective.
    pub total: f64,
}

impl LossValues {
    pub fn add(&mut self, other: &LossValues) {
        self.recon += other.recon;
        self.angle += other.angle;
        self.position += other.position;
        self.cycle += other.cycle;
        self.prior += other.prior;
        self.adversarial += other.adversarial;
        self.critic += other.critic;
        self.total += other.total;
    }

    pub fn scale(&mut self, c: f64) {
        self.recon *= c;
        self.angle *= c;
        self.position *= c;
        self.cycle *= c;
        self.prior *= c;
        self.adversarial *= c;
        self.critic *= c;
        self.total *= c;
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            (self.recon, "L_R"),
            (self.angle, "L_ang"),
            (self.position, "L_pos"),
            (self.cycle, "L_M"),
            (self.prior, "L_W"),
            (self.adversarial, "L_G"),
            (self.critic, "L_D"),
            (self.total, "total"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, n)| n)
    }
}

/// A batch laid out for graph building: per-time-step rows of
/// batch * frame_dim values.
#[derive(Clone, Debug)]
pub struct BatchData {
    pub batch: usize,
    /// Chronological normalized frames (encoder input / critic real input).
    pub frames_norm: Vec<Vec<f64>>,
    /// Raw target frames in reverse order, matching decoder emission.
    pub targets_rev: Vec<Vec<f64>>,
    /// Joint positions of the reversed raw targets, when position loss is on.
    pub positions_rev: Option<Vec<Vec<f64>>>,
}

/// Stacks equally sized raw windows into per-step rows. Positions are
/// computed by forward kinematics when a skeleton is supplied.
pub fn assemble_batch(
    windows: &[Motion],
    norm: &NormStats,
    skeleton: Option<&Skeleton>,
) -> BatchData {
    let b = windows.len();
    assert!(b > 0, "empty batch");
    let t_len = windows[0].n_frames();
    let dim = windows[0].dim();
    for w in windows {
        assert!(w.n_frames() == t_len && w.dim() == dim, "ragged batch");
    }
    let normed: Vec<Motion> = windows.iter().map(|w| norm.apply(w)).collect();
    let mut frames_norm = Vec::with_capacity(t_len);
    let mut targets_rev = Vec::with_capacity(t_len);
    let mut positions_rev = skeleton.map(|_| Vec::with_capacity(t_len));
    for t in 0..t_len {
        let mut row = Vec::with_capacity(b * dim);
        for w in &normed {
            row.extend_from_slice(w.frame(t));
        }
        frames_norm.push(row);
        let rev_t = t_len - 1 - t;
        let mut raw = Vec::with_capacity(b * dim);
        for w in windows {
            raw.extend_from_slice(w.frame(rev_t));
        }
        if let (Some(acc), Some(sk)) = (positions_rev.as_mut(), skeleton) {
            let mut pos = Vec::with_capacity(b * dim);
            for chunk in raw.chunks_exact(dim) {
                pos.extend(fk_forward(sk, &Pose::from_flat(chunk)).to_flat());
            }
            acc.push(pos);
        }
        targets_rev.push(raw);
    }
    BatchData {
        batch: b,
        frames_norm,
        targets_rev,
        positions_rev,
    }
}

fn gru_tensor_list(g: &GruCellWeights) -> [Tensor; 10] {
    [g.w_r, g.w_u, g.w_n, g.u_r, g.u_u, g.u_n, g.b_r, g.b_u, g.b_in, g.b_hn]
}

/// Bound generator leaves in the canonical visitation order.
fn generator_tensor_list(
    enc: &BoundEncoder,
    rot: &BoundDecoder,
    vel: Option<&BoundDecoder>,
) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(40);
    out.extend(gru_tensor_list(&enc.gru));
    out.push(enc.compress_w);
    out.push(enc.compress_b);
    for dec in [Some(rot), vel].into_iter().flatten() {
        out.push(dec.expand_w);
        out.push(dec.expand_b);
        out.extend(gru_tensor_list(&dec.gru));
        out.push(dec.out_w);
        out.push(dec.out_b);
    }
    out
}

/// Bound critic leaves in the canonical visitation order.
fn discriminator_tensor_list(d: &BoundDiscriminator) -> Vec<Tensor> {
    vec![
        d.conv1_w, d.conv1_b, d.conv2_w, d.conv2_b, d.bn2_gamma, d.bn2_beta, d.conv3_w, d.conv3_b,
        d.bn3_gamma, d.bn3_beta, d.conv4_w, d.conv4_b,
    ]
}

fn collect_grads(tape: &Tape, tensors: &[Tensor]) -> Vec<Vec<f64>> {
    tensors
        .iter()
        .map(|&t| match tape.grad(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.shape(t).iter().product()],
        })
        .collect()
}

/// Runs one batch through the model. With `update`, performs the critic
/// step (when the variant has one) and the generator step; otherwise only
/// evaluates the losses, with dropout off and no state mutated.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    skeleton: &Rc<Skeleton>,
    batch: &BatchData,
    weights: &LossWeights,
    adam: &AdamConfig,
    clip_norm: f64,
    opt: &mut OptState,
    dropout_rng: &mut ChaCha8Rng,
    prior_rows: &[f64],
    update: bool,
) -> LossValues {
    let variant = model.variant;
    let frame_dim = model.hyper.frame_dim();
    let t_len = model.hyper.seq_len;
    let b = batch.batch;
    assert_eq!(batch.frames_norm.len(), t_len, "batch length mismatch");
    let dropout = if update {
        DropoutCfg::train(model.hyper.dropout)
    } else {
        DropoutCfg::eval()
    };

    // ---- generator graph: encode, decode, reconstruction terms ----
    let mut tape = Tape::new();
    let enc = bind_encoder(&mut tape, &model.params.encoder);
    let rot = bind_decoder(&mut tape, &model.params.decoder_rotation);
    let vel = variant
        .uses_velocity_decoder()
        .then(|| bind_decoder(&mut tape, &model.params.decoder_velocity));
    let gen_tensors = generator_tensor_list(&enc, &rot, vel.as_ref());

    let frames: Vec<Tensor> = batch
        .frames_norm
        .iter()
        .map(|row| tape.leaf(&[b, frame_dim], row.clone()))
        .collect();
    let z = run_encoder(&mut tape, &enc, &frames, dropout, dropout_rng);

    let rot_frames = run_decoder(
        &mut tape,
        &rot,
        z,
        t_len,
        frame_dim,
        DecoderKind::Rotation,
        variant.concats_latent(),
        dropout,
        dropout_rng,
    );
    let vel_frames = vel.as_ref().map(|dec| {
        run_decoder(
            &mut tape,
            dec,
            z,
            t_len,
            frame_dim,
            DecoderKind::Velocity,
            variant.concats_latent(),
            dropout,
            dropout_rng,
        )
    });

    let sk_for_loss = variant.uses_position_loss().then_some(skeleton);
    let targets = ReconTargets {
        frames: &batch.targets_rev,
        positions: batch.positions_rev.as_deref(),
    };
    let rot_loss = motion_reconstruction_loss(
        &mut tape,
        &rot_frames,
        &targets,
        &model.norm,
        sk_for_loss,
        weights.position,
    );
    let vel_loss = vel_frames.as_ref().map(|f| {
        motion_reconstruction_loss(&mut tape, f, &targets, &model.norm, sk_for_loss, weights.position)
    });
    let recon = match &vel_loss {
        None => rot_loss.total,
        Some(vl) => tape.add(rot_loss.total, vl.total),
    };

    // ---- latent cycle: re-encode the decoded clips (chronological) ----
    let cycle = variant.uses_manifold_loss().then(|| {
        let chrono: Vec<Tensor> = rot_frames.iter().rev().copied().collect();
        let z_rot = run_encoder(&mut tape, &enc, &chrono, dropout, dropout_rng);
        let z_vel = vel_frames.as_ref().map(|f| {
            let chrono: Vec<Tensor> = f.iter().rev().copied().collect();
            run_encoder(&mut tape, &enc, &chrono, dropout, dropout_rng)
        });
        latent_cycle_loss(&mut tape, z, z_rot, z_vel)
    });

    let prior = prior_match_loss(&mut tape, z, prior_rows, model.hyper.latent_dim, model.hyper.prior_var);

    // ---- adversary: critic step first, then the generator's term ----
    let mut critic_value = 0.0;
    let adv = if variant.uses_adversary() {
        let chrono: Vec<Tensor> = rot_frames.iter().rev().copied().collect();
        let mut fake_stacks = vec![tape.stack_time(&chrono)];
        if let Some(f) = &vel_frames {
            let chrono: Vec<Tensor> = f.iter().rev().copied().collect();
            fake_stacks.push(tape.stack_time(&chrono));
        }

        // Critic pass on a separate tape; reconstructions enter as values.
        let mut d_tape = Tape::new();
        let d_bound = bind_discriminator(&mut d_tape, &model.params.discriminator);
        let d_tensors = discriminator_tensor_list(&d_bound);
        let real_rows: Vec<Tensor> = batch
            .frames_norm
            .iter()
            .map(|row| d_tape.leaf(&[b, frame_dim], row.clone()))
            .collect();
        let real_stack = d_tape.stack_time(&real_rows);
        let mut stat_nodes = Vec::new();
        let (d_real, st) = run_discriminator(&mut d_tape, &d_bound, real_stack, true, &model.params.discriminator);
        stat_nodes.push(st.unwrap());
        let mut d_fakes = Vec::new();
        for &fs in &fake_stacks {
            let shape = tape.shape(fs).to_vec();
            let vals = tape.value(fs).to_vec();
            let detached = d_tape.leaf(&shape, vals);
            let (d_f, st) = run_discriminator(&mut d_tape, &d_bound, detached, true, &model.params.discriminator);
            stat_nodes.push(st.unwrap());
            d_fakes.push(d_f);
        }
        let l_d = lsgan_discriminator_loss(&mut d_tape, d_real, &d_fakes);
        critic_value = d_tape.scalar_value(l_d);
        if update {
            let objective = d_tape.scale(l_d, weights.adversarial);
            d_tape.backward(objective);
            let grads = collect_grads(&d_tape, &d_tensors);
            // fold the batch statistics of every training-mode pass into
            // the running buffers, in forward order (real, then fakes)
            for st in &stat_nodes {
                let (m2, v2) = {
                    let (m, v) = d_tape.batch_norm_stats(st.bn2);
                    (m.to_vec(), v.to_vec())
                };
                model.params.discriminator.bn2.update_running(&m2, &v2, BN_MOMENTUM);
                let (m3, v3) = {
                    let (m, v) = d_tape.batch_norm_stats(st.bn3);
                    (m.to_vec(), v.to_vec())
                };
                model.params.discriminator.bn3.update_running(&m3, &v3, BN_MOMENTUM);
            }
            let mut entries = Vec::new();
            model
                .params
                .visit_discriminator_mut(variant, &mut |n, t| entries.push((n, t)));
            adam_step(adam, &mut opt.disc, &mut entries, &grads);
        }

        // Generator's adversarial term, scored by the (updated) critic
        // bound as constants on the generator tape.
        let d_for_gen = bind_discriminator(&mut tape, &model.params.discriminator);
        let mut d_fake_nodes = Vec::new();
        for &fs in &fake_stacks {
            let (d_f, _) = run_discriminator(&mut tape, &d_for_gen, fs, true, &model.params.discriminator);
            d_fake_nodes.push(d_f);
        }
        Some(lsgan_generator_loss(&mut tape, &d_fake_nodes))
    } else {
        None
    };

    let total = total_loss(&mut tape, recon, cycle, Some(prior), adv, weights);

    let mut values = LossValues {
        recon: tape.scalar_value(recon),
        angle: tape.scalar_value(rot_loss.angle),
        position: rot_loss.position.map_or(0.0, |p| tape.scalar_value(p)),
        cycle: cycle.map_or(0.0, |c| tape.scalar_value(c)),
        prior: tape.scalar_value(prior),
        adversarial: adv.map_or(0.0, |a| tape.scalar_value(a)),
        critic: critic_value,
        total: tape.scalar_value(total),
    };
    if let Some(vl) = &vel_loss {
        values.angle += tape.scalar_value(vl.angle);
        values.position += vl.position.map_or(0.0, |p| tape.scalar_value(p));
    }

    if update {
        tape.backward(total);
        let mut grads = collect_grads(&tape, &gen_tensors);
        let mut names = Vec::new();
        model.params.visit_generator(variant, &mut |n, _| names.push(n));
        assert_eq!(names.len(), grads.len(), "generator grads misaligned");
        clip_global_norm(&mut grads, |i| names[i].contains(".gru."), clip_norm);
        let mut entries = Vec::new();
        model
            .params
            .visit_generator_mut(variant, &mut |n, t| entries.push((n, t)));
        adam_step(adam, &mut opt.gen, &mut entries, &grads);
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, Variant};
    use crate::seeding;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_hyper(seq_len: usize) -> HyperParams {
        HyperParams {
            n_joints: 3,
            hidden_dim: 10,
            latent_dim: 4,
            seq_len,
            dropout: 0.0,
            prior_var: 1.0,
        }
    }

    fn synthetic_windows(n: usize, t_len: usize, dim: usize, seed: u64) -> Vec<Motion> {
        let mut rng = seeding::derive_rng(&[seed]);
        (0..n)
            .map(|_| {
                let data = (0..t_len * dim).map(|_| rng.random_range(-0.8..0.8)).collect();
                Motion::new(t_len, dim, data)
            })
            .collect()
    }

    fn draw_prior(b: usize, dm: usize, var: f64, seed: u64) -> Vec<f64> {
        let mut rng = seeding::derive_rng(&[seed]);
        (0..b * dm)
            .map(|_| var.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn assemble_batch_layout() {
        let a = Motion::from_frames(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Motion::from_frames(&[vec![7.0, 8.0, 9.0], vec![10.0, 11.0, 12.0]]);
        let skeleton = Skeleton::chain(1, 1.0);
        let norm = NormStats { mean: vec![1.0; 3], std: vec![2.0; 3] };
        let data = assemble_batch(&[a, b], &norm, Some(&skeleton));
        assert_eq!(data.batch, 2);
        // chronological normalized rows
        assert_eq!(data.frames_norm[0], vec![0.0, 0.5, 1.0, 3.0, 3.5, 4.0]);
        // reversed raw targets: step 0 holds frame 1
        assert_eq!(data.targets_rev[0], vec![4.0, 5.0, 6.0, 10.0, 11.0, 12.0]);
        assert_eq!(data.targets_rev[1], vec![1.0, 2.0, 3.0, 7.0, 8.0, 9.0]);
        // single-joint skeleton: root position is always the origin
        assert_eq!(data.positions_rev.as_ref().unwrap()[0], vec![0.0; 6]);
    }

    /// A full-variant update step must strictly decrease nothing in
    /// particular, but it must change every trainable tensor, leave the
    /// velocity decoder untouched for variant S, and keep losses finite.
    #[test]
    fn update_touches_exactly_the_trainable_parameters() {
        for variant in [Variant::S, Variant::Dkgmz] {
            let hyper = tiny_hyper(8);
            let mut model = Model::new(hyper.clone(), variant, 5).unwrap();
            let skeleton = Rc::new(Skeleton::chain(3, 0.5));
            let windows = synthetic_windows(3, 8, 9, 77);
            let batch = assemble_batch(
                &windows,
                &model.norm,
                variant.uses_position_loss().then_some(&*skeleton),
            );
            let before = model.params.clone();
            let mut opt = OptState::new(&model);
            let mut drng = seeding::derive_rng(&[1, 2]);
            let prior = draw_prior(3, 4, 1.0, 3);
            let values = train_step(
                &mut model,
                &skeleton,
                &batch,
                &LossWeights::default(),
                &AdamConfig::default(),
                1.0,
                &mut opt,
                &mut drng,
                &prior,
                true,
            );
            assert!(values.first_non_finite().is_none(), "{values:?}");
            assert!(values.recon > 0.0);
            assert_eq!(opt.gen.step, 1);

            let mut changed = Vec::new();
            let mut unchanged = Vec::new();
            let mut after = Vec::new();
            model.params.visit_all(&mut |n, t| after.push((n, t.data.clone())));
            let mut before_all = Vec::new();
            before.visit_all(&mut |n, t| before_all.push((n, t.data.clone())));
            for ((name, a), (_, b)) in after.iter().zip(&before_all) {
                if a == b {
                    unchanged.push(name.clone());
                } else {
                    changed.push(name.clone());
                }
            }
            match variant {
                Variant::S => {
                    assert!(changed.iter().all(|n| n.starts_with("encoder") || n.starts_with("decoder_rotation")), "{changed:?}");
                    assert!(unchanged.iter().any(|n| n.starts_with("decoder_velocity")));
                    assert!(unchanged.iter().any(|n| n.starts_with("discriminator")));
                    assert_eq!(opt.disc.step, 0);
                    assert_eq!(values.critic, 0.0);
                    assert_eq!(values.cycle, 0.0);
                    assert_eq!(values.position, 0.0);
                }
                Variant::Dkgmz => {
                    // biases can receive zero gradient in corner cases, but
                    // weight tensors must all move
                    let stuck: Vec<_> = unchanged.iter().filter(|n| n.ends_with(".w") || n.contains(".w_") || n.contains(".u_")).collect();
                    assert!(stuck.is_empty(), "unmoved weights: {stuck:?}");
                    assert_eq!(opt.disc.step, 1);
                    assert!(values.critic > 0.0);
                    assert!(values.cycle > 0.0);
                    assert!(values.position > 0.0);
                    assert!(values.adversarial > 0.0);
                }
                _ => unreachable!(),
            }
        }
    }

    /// Without `update`, a step is a pure evaluation: parameters, optimizer
    /// state and batch-norm buffers all stay bitwise identical, and the
    /// same inputs give the same losses.
    #[test]
    fn evaluation_steps_are_pure_and_deterministic() {
        let hyper = tiny_hyper(8);
        let mut model = Model::new(hyper, Variant::Dkgm, 6).unwrap();
        let skeleton = Rc::new(Skeleton::chain(3, 0.5));
        let windows = synthetic_windows(4, 8, 9, 78);
        let batch = assemble_batch(&windows, &model.norm, Some(&*skeleton));
        let before = model.params.clone();
        let mut opt = OptState::new(&model);
        let opt_before = opt.clone();
        let prior = draw_prior(4, 4, 1.0, 9);
        let run = |model: &mut Model, opt: &mut OptState| {
            let mut drng = seeding::derive_rng(&[0]);
            train_step(
                model,
                &skeleton,
                &batch,
                &LossWeights::default(),
                &AdamConfig::default(),
                1.0,
                opt,
                &mut drng,
                &prior,
                false,
            )
        };
        let v1 = run(&mut model, &mut opt);
        let v2 = run(&mut model, &mut opt);
        assert_eq!(v1, v2);
        assert_eq!(model.params, before);
        assert_eq!(opt, opt_before);
        assert!(v1.critic > 0.0, "critic loss is still evaluated: {v1:?}");
        assert!(v1.adversarial > 0.0);
    }

    /// Driving the same tiny batch for many steps must overfit: the
    /// reconstruction loss should fall well below its starting value.
    #[test]
    fn repeated_steps_shrink_the_loss() {
        let hyper = tiny_hyper(6);
        let mut model = Model::new(hyper, Variant::D, 8).unwrap();
        let skeleton = Rc::new(Skeleton::chain(3, 0.5));
        let windows = synthetic_windows(2, 6, 9, 90);
        let mut motions = windows.clone();
        model.norm = NormStats::fit(&motions).unwrap();
        motions.truncate(2);
        let batch = assemble_batch(&motions, &model.norm, None);
        let mut opt = OptState::new(&model);
        let prior = draw_prior(2, 4, 1.0, 10);
        let mut first = None;
        let mut last = 0.0;
        for i in 0..250 {
            let mut drng = seeding::derive_rng(&[100, i]);
            let v = train_step(
                &mut model,
                &skeleton,
                &batch,
                &LossWeights::default(),
                &AdamConfig { lr: 0.01, ..AdamConfig::default() },
                1.0,
                &mut opt,
                &mut drng,
                &prior,
                true,
            );
            assert!(v.first_non_finite().is_none());
            first.get_or_insert(v.recon);
            last = v.recon;
        }
        let first = first.unwrap();
        assert!(
            last < first * 0.5,
            "loss should halve when overfitting two clips: {first} -> {last}"
        );
    }
}
