//! Differentiable computation graphs for the encoder, the two decoders and
//! the critic. Binding copies host parameters onto a tape as leaves; the
//! run_* functions then build the forward graph on that tape.

use rand_chacha::ChaCha8Rng;

use super::params::{
    DecoderParams, DiscriminatorParams, EncoderParams, GruParams, LinearParams, BN_EPS,
    DISC_LEAKY_SLOPE, DISC_PAD, DISC_STRIDE,
};
use crate::autodiff::{GruCellWeights, Tape, Tensor};

/// Dropout behaviour for one graph build.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCfg {
    pub rate: f64,
    pub train: bool,
}

impl DropoutCfg {
    pub fn eval() -> DropoutCfg {
        DropoutCfg { rate: 0.0, train: false }
    }

    pub fn train(rate: f64) -> DropoutCfg {
        DropoutCfg { rate, train: true }
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub gru: GruCellWeights,
    pub compress_w: Tensor,
    pub compress_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundDecoder {
    pub expand_w: Tensor,
    pub expand_b: Tensor,
    pub gru: GruCellWeights,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub bn3_gamma: Tensor,
    pub bn3_beta: Tensor,
    pub conv4_w: Tensor,
    pub conv4_b: Tensor,
}

/// Training-mode batch-norm nodes, kept so the caller can read the batch
/// statistics and fold them into the running buffers.
#[derive(Clone, Copy, Debug)]
pub struct DiscStatsNodes {
    pub bn2: Tensor,
    pub bn3: Tensor,
}

fn bind_gru(tape: &mut Tape, p: &GruParams) -> GruCellWeights {
    let mut leaf = |t: &super::TensorData| tape.leaf(&t.shape, t.data.clone());
    GruCellWeights {
        w_r: leaf(&p.w_r),
        w_u: leaf(&p.w_u),
        w_n: leaf(&p.w_n),
        u_r: leaf(&p.u_r),
        u_u: leaf(&p.u_u),
        u_n: leaf(&p.u_n),
        b_r: leaf(&p.b_r),
        b_u: leaf(&p.b_u),
        b_in: leaf(&p.b_in),
        b_hn: leaf(&p.b_hn),
    }
}

fn bind_linear(tape: &mut Tape, p: &LinearParams) -> (Tensor, Tensor) {
    (
        tape.leaf(&p.w.shape, p.w.data.clone()),
        tape.leaf(&p.b.shape, p.b.data.clone()),
    )
}

fn bind_conv(tape: &mut Tape, p: &super::ConvParams) -> (Tensor, Tensor) {
    (
        tape.leaf(&p.w.shape, p.w.data.clone()),
        tape.leaf(&p.b.shape, p.b.data.clone()),
    )
}

/// Binds encoder parameters as tape leaves, in the same order as the
/// parameter visitors so gradients line up with optimizer state.
pub fn bind_encoder(tape: &mut Tape, p: &EncoderParams) -> BoundEncoder {
    let gru = bind_gru(tape, &p.gru);
    let (compress_w, compress_b) = bind_linear(tape, &p.compress);
    BoundEncoder { gru, compress_w, compress_b }
}

pub fn bind_decoder(tape: &mut Tape, p: &DecoderParams) -> BoundDecoder {
    let (expand_w, expand_b) = bind_linear(tape, &p.expand);
    let gru = bind_gru(tape, &p.gru);
    let (out_w, out_b) = bind_linear(tape, &p.out);
    BoundDecoder { expand_w, expand_b, gru, out_w, out_b }
}

pub fn bind_discriminator(tape: &mut Tape, p: &DiscriminatorParams) -> BoundDiscriminator {
    let (conv1_w, conv1_b) = bind_conv(tape, &p.conv1);
    let (conv2_w, conv2_b) = bind_conv(tape, &p.conv2);
    let bn2_gamma = tape.leaf(&p.bn2.gamma.shape, p.bn2.gamma.data.clone());
    let bn2_beta = tape.leaf(&p.bn2.beta.shape, p.bn2.beta.data.clone());
    let (conv3_w, conv3_b) = bind_conv(tape, &p.conv3);
    let bn3_gamma = tape.leaf(&p.bn3.gamma.shape, p.bn3.gamma.data.clone());
    let bn3_beta = tape.leaf(&p.bn3.beta.shape, p.bn3.beta.data.clone());
    let (conv4_w, conv4_b) = bind_conv(tape, &p.conv4);
    BoundDiscriminator {
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        bn2_gamma,
        bn2_beta,
        conv3_w,
        conv3_b,
        bn3_gamma,
        bn3_beta,
        conv4_w,
        conv4_b,
    }
}

/// Runs the encoder over `frames` (each a (batch, frame_dim) tensor in
/// chronological order) and projects the final hidden state to a latent.
pub fn run_encoder(
    tape: &mut Tape,
    enc: &BoundEncoder,
    frames: &[Tensor],
    dropout: DropoutCfg,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    assert!(!frames.is_empty(), "encoder needs at least one frame");
    let batch = tape.shape(frames[0])[0];
    let hidden = tape.shape(enc.gru.u_r)[0];
    let mut h = tape.leaf(&[batch, hidden], vec![0.0; batch * hidden]);
    for &x in frames {
        h = tape.gru_cell(x, h, &enc.gru);
    }
    let h = tape.dropout(h, dropout.rate, dropout.train, rng);
    let zw = tape.matmul(h, enc.compress_w);
    tape.add_bias(zw, enc.compress_b)
}

/// Which quantity a decoder's projection predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// The pose itself; the emitted frame is fed back as the next input.
    Rotation,
    /// A per-frame pose delta, accumulated into a running pose that is
    /// both emitted and fed back.
    Velocity,
}

/// Unrolls a decoder for `seq_len` steps from latent `z` (batch, latent).
/// Returns the emitted frames in emission order, which is reverse time:
/// the first emitted frame corresponds to the clip's last frame. The
/// initial hidden state is a projection of `z`; the initial fed-back pose
/// is zero. With `concat_latent`, `z` is appended to every step's input.
#[allow(clippy::too_many_arguments)]
pub fn run_decoder(
    tape: &mut Tape,
    dec: &BoundDecoder,
    z: Tensor,
    seq_len: usize,
    frame_dim: usize,
    kind: DecoderKind,
    concat_latent: bool,
    dropout: DropoutCfg,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    let batch = tape.shape(z)[0];
    let hw = tape.matmul(z, dec.expand_w);
    let mut h = tape.add_bias(hw, dec.expand_b);
    let mut feedback = tape.leaf(&[batch, frame_dim], vec![0.0; batch * frame_dim]);
    let mut frames = Vec::with_capacity(seq_len);
    for _ in 0..seq_len {
        let input = if concat_latent {
            tape.concat(feedback, z)
        } else {
            feedback
        };
        h = tape.gru_cell(input, h, &dec.gru);
        let dropped = tape.dropout(h, dropout.rate, dropout.train, rng);
        let proj = tape.matmul(dropped, dec.out_w);
        let proj = tape.add_bias(proj, dec.out_b);
        let frame = match kind {
            DecoderKind::Rotation => proj,
            DecoderKind::Velocity => tape.add(proj, feedback),
        };
        frames.push(frame);
        feedback = frame;
    }
    frames
}

/// Scores a (batch, channels, length) clip stack. With `train_stats`, batch
/// norm uses the batch's own statistics and the returned nodes expose them;
/// otherwise the running buffers in `params` are used. Output is
/// (batch, 1, score_len).
pub fn run_discriminator(
    tape: &mut Tape,
    disc: &BoundDiscriminator,
    x: Tensor,
    train_stats: bool,
    params: &DiscriminatorParams,
) -> (Tensor, Option<DiscStatsNodes>) {
    let c1 = tape.conv1d(x, disc.conv1_w, disc.conv1_b, DISC_STRIDE, DISC_PAD);
    let a1 = tape.leaky_relu(c1, DISC_LEAKY_SLOPE);

    let c2 = tape.conv1d(a1, disc.conv2_w, disc.conv2_b, DISC_STRIDE, DISC_PAD);
    let bn2 = if train_stats {
        tape.batch_norm_train(c2, disc.bn2_gamma, disc.bn2_beta, BN_EPS)
    } else {
        tape.batch_norm_eval(
            c2,
            disc.bn2_gamma,
            disc.bn2_beta,
            BN_EPS,
            &params.bn2.running_mean,
            &params.bn2.running_var,
        )
    };
    let a2 = tape.leaky_relu(bn2, DISC_LEAKY_SLOPE);

    let c3 = tape.conv1d(a2, disc.conv3_w, disc.conv3_b, DISC_STRIDE, DISC_PAD);
    let bn3 = if train_stats {
        tape.batch_norm_train(c3, disc.bn3_gamma, disc.bn3_beta, BN_EPS)
    } else {
        tape.batch_norm_eval(
            c3,
            disc.bn3_gamma,
            disc.bn3_beta,
            BN_EPS,
            &params.bn3.running_mean,
            &params.bn3.running_var,
        )
    };
    let a3 = tape.leaky_relu(bn3, DISC_LEAKY_SLOPE);

    let c4 = tape.conv1d(a3, disc.conv4_w, disc.conv4_b, 1, 0);
    let out = tape.relu(c4);
    let stats = train_stats.then_some(DiscStatsNodes { bn2, bn3 });
    (out, stats)
}
