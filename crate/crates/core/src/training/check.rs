//! End-to-end gradient verification: every analytic parameter gradient of
//! the full training objective, on a small but complete model (both
//! decoders, forward-kinematics supervision, latent feedback, cycle, prior
//! and adversarial terms), is compared against central finite differences.

use std::rc::Rc;

use crate::autodiff::{
    gradient_check, BackwardFault, GradCheckReport, GradCheckSettings, Tape, Tensor,
};
use crate::data::{generate_synthetic, NormStats, SynthesisConfig};
use crate::kinematics::Skeleton;
use crate::losses::{
    latent_cycle_loss, lsgan_discriminator_loss, lsgan_generator_loss, motion_reconstruction_loss,
    prior_match_loss, total_loss, LossWeights, ReconTargets,
};
use crate::model::{
    bind_decoder, bind_discriminator, bind_encoder, run_decoder, run_discriminator, run_encoder,
    DecoderKind, DropoutCfg, HyperParams, Model, Variant,
};
use crate::seeding;
use crate::training::{assemble_batch, BatchData};
use crate::Result;

struct CheckState {
    model: Model,
    skeleton: Rc<Skeleton>,
    batch: BatchData,
    prior: Vec<f64>,
    weights: LossWeights,
}

struct Objectives {
    generator: Tensor,
    critic: Tensor,
    gen_tensors: Vec<Tensor>,
    disc_tensors: Vec<Tensor>,
}

/// Builds the complete deterministic objective graph (dropout off, critic
/// batch statistics from the batch itself, no state updates). The critic
/// objective sees the reconstructions as detached values, exactly as in a
/// training step.
fn build_objectives(tape: &mut Tape, s: &CheckState) -> Objectives {
    let model = &s.model;
    let hyper = &model.hyper;
    let frame_dim = hyper.frame_dim();
    let b = s.batch.batch;
    let dropout = DropoutCfg::eval();
    let mut rng = seeding::derive_rng(&[0]);

    let enc = bind_encoder(tape, &model.params.encoder);
    let rot = bind_decoder(tape, &model.params.decoder_rotation);
    let vel = bind_decoder(tape, &model.params.decoder_velocity);
    let mut gen_tensors = vec![
        enc.gru.w_r, enc.gru.w_u, enc.gru.w_n, enc.gru.u_r, enc.gru.u_u, enc.gru.u_n,
        enc.gru.b_r, enc.gru.b_u, enc.gru.b_in, enc.gru.b_hn, enc.compress_w, enc.compress_b,
    ];
    for dec in [&rot, &vel] {
        gen_tensors.extend([
            dec.expand_w, dec.expand_b, dec.gru.w_r, dec.gru.w_u, dec.gru.w_n, dec.gru.u_r,
            dec.gru.u_u, dec.gru.u_n, dec.gru.b_r, dec.gru.b_u, dec.gru.b_in, dec.gru.b_hn,
            dec.out_w, dec.out_b,
        ]);
    }

    let frames: Vec<Tensor> = s
        .batch
        .frames_norm
        .iter()
        .map(|row| tape.leaf(&[b, frame_dim], row.clone()))
        .collect();
    let z = run_encoder(tape, &enc, &frames, dropout, &mut rng);
    let concat_z = model.variant.concats_latent();
    let rot_frames = run_decoder(
        tape, &rot, z, hyper.seq_len, frame_dim, DecoderKind::Rotation, concat_z, dropout, &mut rng,
    );
    let vel_frames = run_decoder(
        tape, &vel, z, hyper.seq_len, frame_dim, DecoderKind::Velocity, concat_z, dropout, &mut rng,
    );

    let targets = ReconTargets {
        frames: &s.batch.targets_rev,
        positions: s.batch.positions_rev.as_deref(),
    };
    let rot_loss = motion_reconstruction_loss(
        tape, &rot_frames, &targets, &model.norm, Some(&s.skeleton), s.weights.position,
    );
    let vel_loss = motion_reconstruction_loss(
        tape, &vel_frames, &targets, &model.norm, Some(&s.skeleton), s.weights.position,
    );
    let recon = tape.add(rot_loss.total, vel_loss.total);

    let chrono_rot: Vec<Tensor> = rot_frames.iter().rev().copied().collect();
    let chrono_vel: Vec<Tensor> = vel_frames.iter().rev().copied().collect();
    let z_rot = run_encoder(tape, &enc, &chrono_rot, dropout, &mut rng);
    let z_vel = run_encoder(tape, &enc, &chrono_vel, dropout, &mut rng);
    let cycle = latent_cycle_loss(tape, z, z_rot, Some(z_vel));
    let prior = prior_match_loss(tape, z, &s.prior, hyper.latent_dim, hyper.prior_var);

    let disc = bind_discriminator(tape, &model.params.discriminator);
    let disc_tensors = vec![
        disc.conv1_w, disc.conv1_b, disc.conv2_w, disc.conv2_b, disc.bn2_gamma, disc.bn2_beta,
        disc.conv3_w, disc.conv3_b, disc.bn3_gamma, disc.bn3_beta, disc.conv4_w, disc.conv4_b,
    ];
    let fake_rot = tape.stack_time(&chrono_rot);
    let fake_vel = tape.stack_time(&chrono_vel);

    // critic objective: real + detached reconstructions
    let real_rows: Vec<Tensor> = s
        .batch
        .frames_norm
        .iter()
        .map(|row| tape.leaf(&[b, frame_dim], row.clone()))
        .collect();
    let real_stack = tape.stack_time(&real_rows);
    let (d_real, _) = run_discriminator(tape, &disc, real_stack, true, &model.params.discriminator);
    let mut d_fakes_detached = Vec::new();
    for &fs in &[fake_rot, fake_vel] {
        let shape = tape.shape(fs).to_vec();
        let vals = tape.value(fs).to_vec();
        let detached = tape.leaf(&shape, vals);
        let (d_f, _) = run_discriminator(tape, &disc, detached, true, &model.params.discriminator);
        d_fakes_detached.push(d_f);
    }
    let l_d = lsgan_discriminator_loss(tape, d_real, &d_fakes_detached);
    let critic = tape.scale(l_d, s.weights.adversarial);

    // generator's adversarial term: attached reconstructions
    let mut d_fakes_attached = Vec::new();
    for &fs in &[fake_rot, fake_vel] {
        let (d_f, _) = run_discriminator(tape, &disc, fs, true, &model.params.discriminator);
        d_fakes_attached.push(d_f);
    }
    let l_g = lsgan_generator_loss(tape, &d_fakes_attached);

    let generator = total_loss(tape, recon, Some(cycle), Some(prior), Some(l_g), &s.weights);
    Objectives {
        generator,
        critic,
        gen_tensors,
        disc_tensors,
    }
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

fn perturb_group(model: &mut Model, generator: bool, block: usize, elem: usize, delta: f64) {
    let variant = model.variant;
    let mut i = 0usize;
    let mut apply = |_: String, t: &mut crate::model::TensorData| {
        if i == block {
            t.data[elem] += delta;
        }
        i += 1;
    };
    if generator {
        model.params.visit_generator_mut(variant, &mut apply);
    } else {
        model.params.visit_discriminator_mut(variant, &mut apply);
    }
}

/// Checks every parameter gradient of the full objective against central
/// finite differences on a small fully featured model. `fault`, when set,
/// corrupts the backward pass of matching ops so the check must fail;
/// this proves the harness actually detects wrong gradients.
pub fn model_gradient_check(
    settings: &GradCheckSettings,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let hyper = HyperParams {
        n_joints: 5,
        hidden_dim: 16,
        latent_dim: 4,
        seq_len: 8,
        dropout: 0.0,
        prior_var: 1.0,
    };
    let variant = Variant::Dkgmz;
    let skeleton = Rc::new(Skeleton::chain(5, 0.4));
    let mut model = Model::new(hyper.clone(), variant, 1234)?;

    let synth = SynthesisConfig::new((*skeleton).clone(), 4, hyper.seq_len, 25.0);
    let windows: Vec<_> = generate_synthetic(&synth, 77).iter().map(|c| c.to_motion()).collect();
    model.norm = NormStats::fit(&windows)?;
    let batch = assemble_batch(&windows, &model.norm, Some(&*skeleton));

    let mut prng = seeding::derive_rng(&[55, seeding::tags::PRIOR]);
    let prior: Vec<f64> = (0..batch.batch * hyper.latent_dim)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut prng))
        .collect();

    let mut state = CheckState {
        model,
        skeleton,
        batch,
        prior,
        weights: LossWeights::default(),
    };

    // analytic gradients (with the optional backward fault injected)
    let mut gen_tape = Tape::new();
    gen_tape.fault = fault.clone();
    let objs = build_objectives(&mut gen_tape, &state);
    gen_tape.backward(objs.generator);
    let gen_analytic = collect_grads(&gen_tape, &objs.gen_tensors);
    drop(gen_tape);

    let mut disc_tape = Tape::new();
    disc_tape.fault = fault;
    let objs_d = build_objectives(&mut disc_tape, &state);
    disc_tape.backward(objs_d.critic);
    let disc_analytic = collect_grads(&disc_tape, &objs_d.disc_tensors);
    drop(disc_tape);

    let mut gen_blocks = Vec::new();
    state.model.params.visit_generator(variant, &mut |n, t| gen_blocks.push((n, t.data.len())));
    let mut disc_blocks = Vec::new();
    state.model.params.visit_discriminator(variant, &mut |n, t| disc_blocks.push((n, t.data.len())));

    let gen_report = gradient_check(
        settings,
        &gen_blocks,
        &gen_analytic,
        &mut state,
        |s, b, e, d| perturb_group(&mut s.model, true, b, e, d),
        |s| {
            let mut tape = Tape::new();
            let objs = build_objectives(&mut tape, s);
            tape.scalar_value(objs.generator)
        },
    )?;
    let disc_report = gradient_check(
        settings,
        &disc_blocks,
        &disc_analytic,
        &mut state,
        |s, b, e, d| perturb_group(&mut s.model, false, b, e, d),
        |s| {
            let mut tape = Tape::new();
            let objs = build_objectives(&mut tape, s);
            tape.scalar_value(objs.critic)
        },
    )?;

    let mut blocks = gen_report.blocks;
    blocks.extend(disc_report.blocks);
    Ok(GradCheckReport {
        blocks,
        tolerance: settings.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let settings = GradCheckSettings {
            samples_per_block: 6,
            ..GradCheckSettings::default()
        };
        let report = model_gradient_check(&settings, None).unwrap();
        assert_eq!(report.blocks.len(), 40 + 12);
        assert!(
            report.passed(),
            "failed blocks: {:?}",
            report
                .failed_blocks()
                .iter()
                .map(|b| (&b.name, b.max_rel_err))
                .collect::<Vec<_>>()
        );
        // every block actually checked something
        assert!(report.blocks.iter().all(|b| b.checked > 0));
    }

    #[test]
    fn injected_backward_faults_are_caught() {
        let settings = GradCheckSettings {
            samples_per_block: 6,
            ..GradCheckSettings::default()
        };
        // corrupt the GRU cell backward: recurrent gradients go wrong
        let report = model_gradient_check(
            &settings,
            Some(BackwardFault { op_kind: "gru_cell".into(), scale: 1.5 }),
        )
        .unwrap();
        assert!(!report.passed(), "fault in gru_cell backward must be detected");
        // corrupt the conv backward: only the critic side must fail
        let report = model_gradient_check(
            &settings,
            Some(BackwardFault { op_kind: "conv1d".into(), scale: 1.02 }),
        )
        .unwrap();
        assert!(!report.passed(), "fault in conv1d backward must be detected");
    }
}
