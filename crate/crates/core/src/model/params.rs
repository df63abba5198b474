//! Parameter storage: host-side tensors with named, deterministic
//! visitation order for initialization, optimization and checkpointing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HyperParams, Variant};
use crate::seeding;

/// A dense f64 tensor living outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn zeros(shape: &[usize]) -> TensorData {
        TensorData {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> TensorData {
        TensorData {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> TensorData {
        let bound = 1.0 / (fan_in as f64).sqrt();
        TensorData {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_r: TensorData,
    pub w_u: TensorData,
    pub w_n: TensorData,
    pub u_r: TensorData,
    pub u_u: TensorData,
    pub u_n: TensorData,
    pub b_r: TensorData,
    pub b_u: TensorData,
    pub b_in: TensorData,
    pub b_hn: TensorData,
}

impl GruParams {
    fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> GruParams {
        let w_shape = [input_dim, hidden_dim];
        let u_shape = [hidden_dim, hidden_dim];
        GruParams {
            w_r: TensorData::uniform_fan_in(&w_shape, input_dim, rng),
            w_u: TensorData::uniform_fan_in(&w_shape, input_dim, rng),
            w_n: TensorData::uniform_fan_in(&w_shape, input_dim, rng),
            u_r: TensorData::uniform_fan_in(&u_shape, hidden_dim, rng),
            u_u: TensorData::uniform_fan_in(&u_shape, hidden_dim, rng),
            u_n: TensorData::uniform_fan_in(&u_shape, hidden_dim, rng),
            b_r: TensorData::zeros(&[hidden_dim]),
            b_u: TensorData::zeros(&[hidden_dim]),
            b_in: TensorData::zeros(&[hidden_dim]),
            b_hn: TensorData::zeros(&[hidden_dim]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData)) {
        f(format!("{prefix}.w_r"), &self.w_r);
        f(format!("{prefix}.w_u"), &self.w_u);
        f(format!("{prefix}.w_n"), &self.w_n);
        f(format!("{prefix}.u_r"), &self.u_r);
        f(format!("{prefix}.u_u"), &self.u_u);
        f(format!("{prefix}.u_n"), &self.u_n);
        f(format!("{prefix}.b_r"), &self.b_r);
        f(format!("{prefix}.b_u"), &self.b_u);
        f(format!("{prefix}.b_in"), &self.b_in);
        f(format!("{prefix}.b_hn"), &self.b_hn);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData)) {
        f(format!("{prefix}.w_r"), &mut self.w_r);
        f(format!("{prefix}.w_u"), &mut self.w_u);
        f(format!("{prefix}.w_n"), &mut self.w_n);
        f(format!("{prefix}.u_r"), &mut self.u_r);
        f(format!("{prefix}.u_u"), &mut self.u_u);
        f(format!("{prefix}.u_n"), &mut self.u_n);
        f(format!("{prefix}.b_r"), &mut self.b_r);
        f(format!("{prefix}.b_u"), &mut self.b_u);
        f(format!("{prefix}.b_in"), &mut self.b_in);
        f(format!("{prefix}.b_hn"), &mut self.b_hn);
    }
}

/// Fully connected y = x W + b, W stored (input x output).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub w: TensorData,
    pub b: TensorData,
}

impl LinearParams {
    fn init(input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> LinearParams {
        LinearParams {
            w: TensorData::uniform_fan_in(&[input_dim, output_dim], input_dim, rng),
            b: TensorData::zeros(&[output_dim]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// 1-d convolution filters (out_channels x in_channels x kernel) plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub w: TensorData,
    pub b: TensorData,
}

impl ConvParams {
    fn init(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> ConvParams {
        ConvParams {
            w: TensorData::uniform_fan_in(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
            b: TensorData::zeros(&[out_ch]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Batch normalization: learned scale/shift plus running statistics kept
/// outside the trainable set.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: TensorData,
    pub beta: TensorData,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    fn init(channels: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: TensorData::full(&[channels], 1.0),
            beta: TensorData::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a TensorData)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut TensorData)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub gru: GruParams,
    pub compress: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub expand: LinearParams,
    pub gru: GruParams,
    pub out: LinearParams,
}

/// Strided 1-d conv stack: 32, 64, 128 channels (kernel 4, stride 2,
/// reflection pad 1, leaky slope 0.2; batch norm on the middle two), then
/// a width-1 projection to a single score channel through a relu.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    pub conv3: ConvParams,
    pub bn3: BatchNormParams,
    pub conv4: ConvParams,
}

pub const DISC_CHANNELS: [usize; 3] = [32, 64, 128];
pub const DISC_KERNEL: usize = 4;
pub const DISC_STRIDE: usize = 2;
pub const DISC_PAD: usize = 1;
pub const DISC_LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder_rotation: DecoderParams,
    pub decoder_velocity: DecoderParams,
    pub discriminator: DiscriminatorParams,
}

impl ModelParams {
    /// Decoder GRU input width: the fed-back pose, plus the latent when the
    /// variant concatenates it to every step's input.
    pub fn decoder_input_dim(hyper: &HyperParams, variant: Variant) -> usize {
        hyper.frame_dim() + if variant.concats_latent() { hyper.latent_dim } else { 0 }
    }

    /// Fresh parameters: weights uniform in +-1/sqrt(fan_in), biases zero,
    /// batch-norm scale 1 / shift 0. Every component is always allocated
    /// and drawn in a fixed order, so a seed names one parameter set no
    /// matter which components the variant trains.
    pub fn init(hyper: &HyperParams, variant: Variant, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive_seed(&[seed, seeding::tags::INIT]));
        let frame_dim = hyper.frame_dim();
        let dec_in = Self::decoder_input_dim(hyper, variant);
        let dh = hyper.hidden_dim;
        let dm = hyper.latent_dim;
        let encoder = EncoderParams {
            gru: GruParams::init(frame_dim, dh, &mut rng),
            compress: LinearParams::init(dh, dm, &mut rng),
        };
        let decoder = |rng: &mut ChaCha8Rng| DecoderParams {
            expand: LinearParams::init(dm, dh, rng),
            gru: GruParams::init(dec_in, dh, rng),
            out: LinearParams::init(dh, frame_dim, rng),
        };
        let decoder_rotation = decoder(&mut rng);
        let decoder_velocity = decoder(&mut rng);
        let [c1, c2, c3] = DISC_CHANNELS;
        let discriminator = DiscriminatorParams {
            conv1: ConvParams::init(frame_dim, c1, DISC_KERNEL, &mut rng),
            conv2: ConvParams::init(c1, c2, DISC_KERNEL, &mut rng),
            bn2: BatchNormParams::init(c2),
            conv3: ConvParams::init(c2, c3, DISC_KERNEL, &mut rng),
            bn3: BatchNormParams::init(c3),
            conv4: ConvParams::init(c3, 1, 1, &mut rng),
        };
        ModelParams {
            encoder,
            decoder_rotation,
            decoder_velocity,
            discriminator,
        }
    }

    /// Trainable tensors of the autoencoder side, in canonical order. The
    /// velocity decoder is listed only when the variant trains it.
    pub fn visit_generator<'a>(
        &'a self,
        variant: Variant,
        f: &mut impl FnMut(String, &'a TensorData),
    ) {
        self.encoder.gru.visit("encoder.gru", f);
        self.encoder.compress.visit("encoder.compress", f);
        self.decoder_rotation.expand.visit("decoder_rotation.expand", f);
        self.decoder_rotation.gru.visit("decoder_rotation.gru", f);
        self.decoder_rotation.out.visit("decoder_rotation.out", f);
        if variant.uses_velocity_decoder() {
            self.decoder_velocity.expand.visit("decoder_velocity.expand", f);
            self.decoder_velocity.gru.visit("decoder_velocity.gru", f);
            self.decoder_velocity.out.visit("decoder_velocity.out", f);
        }
    }

    pub fn visit_generator_mut<'a>(
        &'a mut self,
        variant: Variant,
        f: &mut impl FnMut(String, &'a mut TensorData),
    ) {
        self.encoder.gru.visit_mut("encoder.gru", f);
        self.encoder.compress.visit_mut("encoder.compress", f);
        self.decoder_rotation.expand.visit_mut("decoder_rotation.expand", f);
        self.decoder_rotation.gru.visit_mut("decoder_rotation.gru", f);
        self.decoder_rotation.out.visit_mut("decoder_rotation.out", f);
        if variant.uses_velocity_decoder() {
            self.decoder_velocity.expand.visit_mut("decoder_velocity.expand", f);
            self.decoder_velocity.gru.visit_mut("decoder_velocity.gru", f);
            self.decoder_velocity.out.visit_mut("decoder_velocity.out", f);
        }
    }

    /// Trainable tensors of the critic, when the variant trains one.
    pub fn visit_discriminator<'a>(
        &'a self,
        variant: Variant,
        f: &mut impl FnMut(String, &'a TensorData),
    ) {
        if !variant.uses_adversary() {
            return;
        }
        self.discriminator.conv1.visit("discriminator.conv1", f);
        self.discriminator.conv2.visit("discriminator.conv2", f);
        self.discriminator.bn2.visit("discriminator.bn2", f);
        self.discriminator.conv3.visit("discriminator.conv3", f);
        self.discriminator.bn3.visit("discriminator.bn3", f);
        self.discriminator.conv4.visit("discriminator.conv4", f);
    }

    pub fn visit_discriminator_mut<'a>(
        &'a mut self,
        variant: Variant,
        f: &mut impl FnMut(String, &'a mut TensorData),
    ) {
        if !variant.uses_adversary() {
            return;
        }
        self.discriminator.conv1.visit_mut("discriminator.conv1", f);
        self.discriminator.conv2.visit_mut("discriminator.conv2", f);
        self.discriminator.bn2.visit_mut("discriminator.bn2", f);
        self.discriminator.conv3.visit_mut("discriminator.conv3", f);
        self.discriminator.bn3.visit_mut("discriminator.bn3", f);
        self.discriminator.conv4.visit_mut("discriminator.conv4", f);
    }

    /// Every tensor, trainable or not, for serialization: all components
    /// regardless of variant, plus batch-norm running buffers.
    pub fn visit_all<'a>(&'a self, f: &mut impl FnMut(String, &'a TensorData)) {
        self.encoder.gru.visit("encoder.gru", f);
        self.encoder.compress.visit("encoder.compress", f);
        for (name, dec) in [
            ("decoder_rotation", &self.decoder_rotation),
            ("decoder_velocity", &self.decoder_velocity),
        ] {
            dec.expand.visit(&format!("{name}.expand"), f);
            dec.gru.visit(&format!("{name}.gru"), f);
            dec.out.visit(&format!("{name}.out"), f);
        }
        self.discriminator.conv1.visit("discriminator.conv1", f);
        self.discriminator.conv2.visit("discriminator.conv2", f);
        self.discriminator.bn2.visit("discriminator.bn2", f);
        self.discriminator.conv3.visit("discriminator.conv3", f);
        self.discriminator.bn3.visit("discriminator.bn3", f);
        self.discriminator.conv4.visit("discriminator.conv4", f);
    }

    pub fn visit_all_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut TensorData)) {
        self.encoder.gru.visit_mut("encoder.gru", f);
        self.encoder.compress.visit_mut("encoder.compress", f);
        for (name, dec) in [
            ("decoder_rotation", &mut self.decoder_rotation),
            ("decoder_velocity", &mut self.decoder_velocity),
        ] {
            dec.expand.visit_mut(&format!("{name}.expand"), f);
            dec.gru.visit_mut(&format!("{name}.gru"), f);
            dec.out.visit_mut(&format!("{name}.out"), f);
        }
        self.discriminator.conv1.visit_mut("discriminator.conv1", f);
        self.discriminator.conv2.visit_mut("discriminator.conv2", f);
        self.discriminator.bn2.visit_mut("discriminator.bn2", f);
        self.discriminator.conv3.visit_mut("discriminator.conv3", f);
        self.discriminator.bn3.visit_mut("discriminator.bn3", f);
        self.discriminator.conv4.visit_mut("discriminator.conv4", f);
    }

    /// Batch-norm running buffers, named for serialization.
    pub fn visit_buffers<'a>(&'a self, f: &mut impl FnMut(String, &'a [f64])) {
        f("discriminator.bn2.running_mean".into(), &self.discriminator.bn2.running_mean);
        f("discriminator.bn2.running_var".into(), &self.discriminator.bn2.running_var);
        f("discriminator.bn3.running_mean".into(), &self.discriminator.bn3.running_mean);
        f("discriminator.bn3.running_var".into(), &self.discriminator.bn3.running_var);
    }

    pub fn visit_buffers_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Vec<f64>)) {
        f("discriminator.bn2.running_mean".into(), &mut self.discriminator.bn2.running_mean);
        f("discriminator.bn2.running_var".into(), &mut self.discriminator.bn2.running_var);
        f("discriminator.bn3.running_mean".into(), &mut self.discriminator.bn3.running_mean);
        f("discriminator.bn3.running_var".into(), &mut self.discriminator.bn3.running_var);
    }
}
