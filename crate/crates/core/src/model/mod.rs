//! Sequence autoencoder over skeletal motion: a GRU encoder compresses a
//! fixed-length clip of joint rotations into a latent vector; GRU decoders
//! expand a latent back into a clip, emitting frames in reverse temporal
//! order. One decoder predicts poses directly, the other predicts per-frame
//! pose deltas that are integrated as it runs. A small strided-convolution
//! critic scores clips for adversarial training.

mod checkpoint;
mod network;
mod params;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_VERSION};
pub use network::{
    bind_decoder, bind_discriminator, bind_encoder, run_decoder, run_discriminator, run_encoder,
    BoundDecoder, BoundDiscriminator, BoundEncoder, DecoderKind, DiscStatsNodes, DropoutCfg,
};
pub use params::{
    BatchNormParams, ConvParams, DecoderParams, DiscriminatorParams, EncoderParams, GruParams,
    LinearParams, ModelParams, TensorData, BN_EPS, BN_MOMENTUM, DISC_CHANNELS, DISC_KERNEL,
    DISC_LEAKY_SLOPE, DISC_PAD, DISC_STRIDE,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::NormStats;
use crate::seeding;
use crate::{Error, Result};

/// Network and clip dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Joints per pose; each contributes a 3-d exponential-coordinate block.
    pub n_joints: usize,
    /// GRU hidden width, shared by encoder and decoders.
    pub hidden_dim: usize,
    /// Latent dimension.
    pub latent_dim: usize,
    /// Frames per clip; decoders always emit exactly this many.
    pub seq_len: usize,
    /// Dropout rate on GRU outputs feeding the projection layers.
    pub dropout: f64,
    /// Variance of the isotropic Gaussian latent prior.
    pub prior_var: f64,
}

impl Default for HyperParams {
    fn default() -> HyperParams {
        HyperParams {
            n_joints: 17,
            hidden_dim: 1024,
            latent_dim: 64,
            seq_len: 150,
            dropout: 0.2,
            prior_var: 1.0,
        }
    }
}

impl HyperParams {
    /// Flattened pose width: 3 values per joint.
    pub fn frame_dim(&self) -> usize {
        3 * self.n_joints
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        if self.n_joints == 0 || self.hidden_dim == 0 || self.latent_dim == 0 || self.seq_len == 0
        {
            return Err(Error::InvalidArgument(
                "n_joints, hidden_dim, latent_dim and seq_len must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.prior_var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prior_var must be positive, got {}",
                self.prior_var
            )));
        }
        if variant.uses_adversary() && self.seq_len < 8 {
            return Err(Error::InvalidArgument(format!(
                "adversarial variants need seq_len >= 8 for the strided conv stack, got {}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Training configuration ladder. Each step enables one more term on top of
/// the previous: S trains a single rotation decoder with reconstruction and
/// latent-prior losses only; D adds the velocity decoder; DK adds the
/// forward-kinematics position loss; DKG adds the adversarial critic; DKGM
/// adds the latent re-encoding loss; DKGMZ also feeds the latent to the
/// decoders at every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    S,
    D,
    Dk,
    Dkg,
    Dkgm,
    Dkgmz,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::S,
        Variant::D,
        Variant::Dk,
        Variant::Dkg,
        Variant::Dkgm,
        Variant::Dkgmz,
    ];

    pub fn uses_velocity_decoder(self) -> bool {
        self != Variant::S
    }

    pub fn uses_position_loss(self) -> bool {
        matches!(self, Variant::Dk | Variant::Dkg | Variant::Dkgm | Variant::Dkgmz)
    }

    pub fn uses_adversary(self) -> bool {
        matches!(self, Variant::Dkg | Variant::Dkgm | Variant::Dkgmz)
    }

    pub fn uses_manifold_loss(self) -> bool {
        matches!(self, Variant::Dkgm | Variant::Dkgmz)
    }

    /// Whether the latent vector is concatenated to every decoder input.
    pub fn concats_latent(self) -> bool {
        self == Variant::Dkgmz
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::S => "S",
            Variant::D => "D",
            Variant::Dk => "DK",
            Variant::Dkg => "DKG",
            Variant::Dkgm => "DKGM",
            Variant::Dkgmz => "DKGMZ",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Variant::S),
            "D" => Ok(Variant::D),
            "DK" => Ok(Variant::Dk),
            "DKG" => Ok(Variant::Dkg),
            "DKGM" => Ok(Variant::Dkgm),
            "DKGMZ" => Ok(Variant::Dkgmz),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?}; expected one of S, D, DK, DKG, DKGM, DKGMZ"
            ))),
        }
    }
}

/// A clip: `n_frames` rows of `dim` flattened joint rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Motion {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f64>) -> Motion {
        assert_eq!(data.len(), n_frames * dim, "motion data length mismatch");
        Motion { n_frames, dim, data }
    }

    pub fn zeros(n_frames: usize, dim: usize) -> Motion {
        Motion {
            n_frames,
            dim,
            data: vec![0.0; n_frames * dim],
        }
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Motion {
        assert!(!frames.is_empty(), "motion needs at least one frame");
        let dim = frames[0].len();
        let mut data = Vec::with_capacity(frames.len() * dim);
        for f in frames {
            assert_eq!(f.len(), dim, "ragged frames");
            data.extend_from_slice(f);
        }
        Motion {
            n_frames: frames.len(),
            dim,
            data,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The same frames in reverse temporal order.
    pub fn reversed(&self) -> Motion {
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.n_frames).rev() {
            data.extend_from_slice(self.frame(t));
        }
        Motion {
            n_frames: self.n_frames,
            dim: self.dim,
            data,
        }
    }

    /// Contiguous sub-clip `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Motion {
        assert!(start + len <= self.n_frames, "window out of range");
        Motion {
            n_frames: len,
            dim: self.dim,
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        }
    }
}

/// Point on the learned manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A decoded clip, in raw (denormalized) rotation space. `motion` holds the
/// frames rearranged into chronological order; `emitted` preserves the
/// decoder's native reverse-time emission order (`emitted.frame(0)` is the
/// reconstruction of the clip's last frame).
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub motion: Motion,
    pub emitted: Motion,
}

/// Result of a full encode/decode round trip.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub latent: LatentVector,
    pub rotation: DecodeOutput,
    /// Present when the variant has a velocity decoder.
    pub velocity: Option<DecodeOutput>,
}

/// A trained (or freshly initialized) model: parameters plus the feature
/// normalization fitted on its training data. All public operations take
/// and return raw rotation values; normalization happens inside.
#[derive(Clone, Debug)]
pub struct Model {
    pub hyper: HyperParams,
    pub variant: Variant,
    pub params: ModelParams,
    pub norm: NormStats,
}

impl Model {
    /// Fresh model with seed-determined weights and identity normalization.
    pub fn new(hyper: HyperParams, variant: Variant, seed: u64) -> Result<Model> {
        hyper.validate(variant)?;
        let params = ModelParams::init(&hyper, variant, seed);
        let norm = NormStats::identity(hyper.frame_dim());
        Ok(Model {
            hyper,
            variant,
            params,
            norm,
        })
    }

    fn check_motion(&self, motion: &Motion, exact_len: bool) -> Result<()> {
        if motion.dim() != self.hyper.frame_dim() {
            return Err(Error::InvalidArgument(format!(
                "motion has dim {}, model expects {}",
                motion.dim(),
                self.hyper.frame_dim()
            )));
        }
        if motion.n_frames() == 0 {
            return Err(Error::InvalidArgument("motion has no frames".into()));
        }
        if exact_len && motion.n_frames() != self.hyper.seq_len {
            return Err(Error::InvalidArgument(format!(
                "motion has {} frames, model expects exactly {}",
                motion.n_frames(),
                self.hyper.seq_len
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &LatentVector) -> Result<()> {
        if z.dim() != self.hyper.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "latent has dim {}, model expects {}",
                z.dim(),
                self.hyper.latent_dim
            )));
        }
        Ok(())
    }

    /// Compress a raw clip to its latent vector (deterministic: no dropout).
    pub fn encode(&self, motion: &Motion) -> Result<LatentVector> {
        self.check_motion(motion, false)?;
        let normalized = self.norm.apply(motion);
        let mut tape = Tape::new();
        let bound = bind_encoder(&mut tape, &self.params.encoder);
        let frames: Vec<_> = (0..normalized.n_frames())
            .map(|t| tape.leaf(&[1, normalized.dim()], normalized.frame(t).to_vec()))
            .collect();
        let mut rng = seeding::derive_rng(&[0]);
        let z = run_encoder(&mut tape, &bound, &frames, DropoutCfg::eval(), &mut rng);
        Ok(LatentVector(tape.value(z).to_vec()))
    }

    fn decode_with(&self, z: &LatentVector, kind: DecoderKind) -> Result<DecodeOutput> {
        self.check_latent(z)?;
        let params = match kind {
            DecoderKind::Rotation => &self.params.decoder_rotation,
            DecoderKind::Velocity => &self.params.decoder_velocity,
        };
        let mut tape = Tape::new();
        let bound = bind_decoder(&mut tape, params);
        let z_t = tape.leaf(&[1, z.dim()], z.0.clone());
        let mut rng = seeding::derive_rng(&[0]);
        let frames = run_decoder(
            &mut tape,
            &bound,
            z_t,
            self.hyper.seq_len,
            self.hyper.frame_dim(),
            kind,
            self.variant.concats_latent(),
            DropoutCfg::eval(),
            &mut rng,
        );
        let emitted_norm =
            Motion::from_frames(&frames.iter().map(|&f| tape.value(f).to_vec()).collect::<Vec<_>>());
        let emitted = self.norm.invert(&emitted_norm);
        let motion = emitted.reversed();
        Ok(DecodeOutput { motion, emitted })
    }

    /// Expand a latent into a clip with the pose decoder.
    pub fn decode_rotation(&self, z: &LatentVector) -> Result<DecodeOutput> {
        self.decode_with(z, DecoderKind::Rotation)
    }

    /// Expand a latent into a clip with the integrating velocity decoder.
    pub fn decode_velocity(&self, z: &LatentVector) -> Result<DecodeOutput> {
        if !self.variant.uses_velocity_decoder() {
            return Err(Error::InvalidArgument(format!(
                "variant {} has no velocity decoder",
                self.variant
            )));
        }
        self.decode_with(z, DecoderKind::Velocity)
    }

    /// Encode then decode a full-length clip with every active decoder.
    pub fn reconstruct(&self, motion: &Motion) -> Result<Reconstruction> {
        self.check_motion(motion, true)?;
        let latent = self.encode(motion)?;
        let rotation = self.decode_rotation(&latent)?;
        let velocity = if self.variant.uses_velocity_decoder() {
            Some(self.decode_with(&latent, DecoderKind::Velocity)?)
        } else {
            None
        };
        Ok(Reconstruction {
            latent,
            rotation,
            velocity,
        })
    }

    /// Critic score sequence for a raw clip (eval-mode batch norm).
    pub fn discriminate(&self, motion: &Motion) -> Result<Vec<f64>> {
        self.check_motion(motion, true)?;
        let normalized = self.norm.apply(motion);
        let mut tape = Tape::new();
        let bound = bind_discriminator(&mut tape, &self.params.discriminator);
        let frames: Vec<_> = (0..normalized.n_frames())
            .map(|t| tape.leaf(&[1, normalized.dim()], normalized.frame(t).to_vec()))
            .collect();
        let stacked = tape.stack_time(&frames);
        let (out, _) =
            run_discriminator(&mut tape, &bound, stacked, false, &self.params.discriminator);
        Ok(tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_ladder_flags() {
        use Variant::*;
        let table: [(Variant, [bool; 5]); 6] = [
            (S, [false, false, false, false, false]),
            (D, [true, false, false, false, false]),
            (Dk, [true, true, false, false, false]),
            (Dkg, [true, true, true, false, false]),
            (Dkgm, [true, true, true, true, false]),
            (Dkgmz, [true, true, true, true, true]),
        ];
        for (v, [vel, pos, adv, man, zc]) in table {
            assert_eq!(v.uses_velocity_decoder(), vel, "{v}");
            assert_eq!(v.uses_position_loss(), pos, "{v}");
            assert_eq!(v.uses_adversary(), adv, "{v}");
            assert_eq!(v.uses_manifold_loss(), man, "{v}");
            assert_eq!(v.concats_latent(), zc, "{v}");
        }
    }

    #[test]
    fn variant_round_trips_through_strings() {
        for v in Variant::ALL {
            let s = v.to_string();
            assert_eq!(s.parse::<Variant>().unwrap(), v);
            assert_eq!(s.to_lowercase().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{s}\""));
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert!("DKX".parse::<Variant>().is_err());
    }

    #[test]
    fn hyper_validation() {
        let h = HyperParams::default();
        assert_eq!(h.frame_dim(), 51);
        assert!(h.validate(Variant::Dkgm).is_ok());
        let mut short = h.clone();
        short.seq_len = 7;
        assert!(short.validate(Variant::S).is_ok());
        assert!(matches!(
            short.validate(Variant::Dkg),
            Err(Error::InvalidArgument(_))
        ));
        let mut bad = h.clone();
        bad.dropout = 1.0;
        assert!(bad.validate(Variant::S).is_err());
    }

    #[test]
    fn motion_windows_and_reversal() {
        let m = Motion::from_frames(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        assert_eq!(m.n_frames(), 3);
        assert_eq!(m.dim(), 2);
        assert_eq!(m.frame(1), &[2.0, 3.0]);
        let r = m.reversed();
        assert_eq!(r.frame(0), &[4.0, 5.0]);
        assert_eq!(r.frame(2), &[0.0, 1.0]);
        assert_eq!(r.reversed(), m);
        let w = m.window(1, 2);
        assert_eq!(w.frame(0), &[2.0, 3.0]);
        assert_eq!(w.n_frames(), 2);
    }

    fn tiny_model(variant: Variant) -> Model {
        let hyper = HyperParams {
            n_joints: 4,
            hidden_dim: 12,
            latent_dim: 3,
            seq_len: 9,
            dropout: 0.0,
            prior_var: 1.0,
        };
        Model::new(hyper, variant, 11).unwrap()
    }

    #[test]
    fn round_trip_shapes_and_determinism() {
        let model = tiny_model(Variant::Dkgm);
        let mut motion = Motion::zeros(9, 12);
        for t in 0..9 {
            for d in 0..12 {
                motion.frame_mut(t)[d] = ((t * 12 + d) as f64 * 0.37).sin() * 0.5;
            }
        }
        let rec = model.reconstruct(&motion).unwrap();
        assert_eq!(rec.latent.dim(), 3);
        assert_eq!(rec.rotation.motion.n_frames(), 9);
        assert_eq!(rec.rotation.motion.dim(), 12);
        let vel = rec.velocity.as_ref().unwrap();
        assert_eq!(vel.motion.n_frames(), 9);
        // Emission order is the reverse of chronological order.
        assert_eq!(rec.rotation.emitted.frame(0), rec.rotation.motion.frame(8));
        assert_eq!(rec.rotation.emitted.frame(8), rec.rotation.motion.frame(0));
        // Deterministic: encoding twice gives the identical latent.
        let z2 = model.encode(&motion).unwrap();
        assert_eq!(rec.latent, z2);
        // Critic emits one score per downsampled step: 9 -> 5 -> 3 -> 2 -> 2.
        let scores = model.discriminate(&motion).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        let model = tiny_model(Variant::S);
        let short = Motion::zeros(5, 12);
        assert!(model.reconstruct(&short).is_err());
        assert!(model.encode(&short).is_ok()); // encode takes any length
        let bad_dim = Motion::zeros(9, 10);
        assert!(model.encode(&bad_dim).is_err());
        let z = LatentVector(vec![0.0; 2]);
        assert!(model.decode_rotation(&z).is_err());
        let ok_z = LatentVector(vec![0.1, -0.2, 0.3]);
        assert!(model.decode_velocity(&ok_z).is_err()); // S has no velocity decoder
        assert!(model.decode_rotation(&ok_z).is_ok());
    }

    #[test]
    fn velocity_decoder_integrates_deltas() {
        // With zero weights everywhere, the velocity decoder emits the zero
        // pose at every step; with a nonzero output bias b, emitted frame i
        // is (i + 1) * b because deltas accumulate.
        let hyper = HyperParams {
            n_joints: 1,
            hidden_dim: 4,
            latent_dim: 2,
            seq_len: 5,
            dropout: 0.0,
            prior_var: 1.0,
        };
        let mut model = Model::new(hyper, Variant::D, 3).unwrap();
        model.params.visit_all_mut(&mut |_, t| t.data.fill(0.0));
        model.params.decoder_velocity.out.b.data = vec![0.5, 0.0, -1.0];
        let z = LatentVector(vec![0.2, -0.4]);
        let out = model.decode_velocity(&z).unwrap();
        for i in 0..5 {
            let k = (i + 1) as f64;
            let frame = out.emitted.frame(i);
            assert!((frame[0] - 0.5 * k).abs() < 1e-12);
            assert_eq!(frame[1], 0.0);
            assert!((frame[2] + 1.0 * k).abs() < 1e-12);
        }
        // The rotation decoder does not integrate: constant bias output.
        model.params.decoder_rotation.out.b.data = vec![0.5, 0.0, -1.0];
        let rot = model.decode_rotation(&z).unwrap();
        for i in 0..5 {
            let frame = rot.emitted.frame(i);
            assert!((frame[0] - 0.5).abs() < 1e-12);
            assert!((frame[2] + 1.0).abs() < 1e-12);
        }
    }
}
