//! Model checkpoints: a single versioned JSON document holding hyper
//! parameters, variant, normalization, every tensor (base64 of little-endian
//! f64 bytes, so round trips are bit-exact) and optional optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{HyperParams, Model, ModelParams, Variant};
use crate::data::NormStats;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(text: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::InvalidData(format!("{what}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidData(format!(
            "{what}: byte length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize, Clone, Debug)]
struct TensorJson {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
struct MomentJson {
    m: String,
    v: String,
}

/// Adam state captured alongside the parameters, keyed by parameter name.
#[derive(Serialize, Deserialize, Clone, Debug, Default)]
pub struct OptimizerSnapshot {
    pub gen_step: u64,
    pub disc_step: u64,
    moments: BTreeMap<String, MomentJson>,
}

impl OptimizerSnapshot {
    pub fn new(gen_step: u64, disc_step: u64) -> OptimizerSnapshot {
        OptimizerSnapshot {
            gen_step,
            disc_step,
            moments: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, m: &[f64], v: &[f64]) {
        self.moments.insert(
            name.to_string(),
            MomentJson {
                m: encode_f64s(m),
                v: encode_f64s(v),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let entry = self
            .moments
            .get(name)
            .ok_or_else(|| Error::InvalidData(format!("optimizer state missing {name}")))?;
        Ok((
            decode_f64s(&entry.m, name)?,
            decode_f64s(&entry.v, name)?,
        ))
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub hyper: HyperParams,
    pub variant: Variant,
    pub norm: NormStats,
    /// Epochs already trained when this checkpoint was written.
    pub epochs_completed: usize,
    /// Seed of the training run; resuming reuses it to replay RNG streams.
    pub train_seed: u64,
    params: BTreeMap<String, TensorJson>,
    buffers: BTreeMap<String, String>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        epochs_completed: usize,
        train_seed: u64,
        optimizer: Option<OptimizerSnapshot>,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        model.params.visit_all(&mut |name, t| {
            params.insert(
                name,
                TensorJson {
                    shape: t.shape.clone(),
                    data: encode_f64s(&t.data),
                },
            );
        });
        let mut buffers = BTreeMap::new();
        model.params.visit_buffers(&mut |name, v| {
            buffers.insert(name, encode_f64s(v));
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            hyper: model.hyper.clone(),
            variant: model.variant,
            norm: model.norm.clone(),
            epochs_completed,
            train_seed,
            params,
            buffers,
            optimizer,
        }
    }

    /// Rebuilds the model, verifying that the stored tensors exactly cover
    /// the architecture implied by the hyper parameters and variant.
    pub fn restore_model(&self) -> Result<Model> {
        self.hyper.validate(self.variant)?;
        if self.norm.dim() != self.hyper.frame_dim() {
            return Err(Error::InvalidData(format!(
                "normalization dim {} does not match frame dim {}",
                self.norm.dim(),
                self.hyper.frame_dim()
            )));
        }
        let mut params = ModelParams::init(&self.hyper, self.variant, 0);
        let mut used = 0usize;
        let mut err: Option<Error> = None;
        params.visit_all_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.params.get(&name) {
                None => err = Some(Error::InvalidData(format!("checkpoint missing tensor {name}"))),
                Some(stored) => {
                    if stored.shape != t.shape {
                        err = Some(Error::InvalidData(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            stored.shape, t.shape
                        )));
                        return;
                    }
                    match decode_f64s(&stored.data, &name) {
                        Err(e) => err = Some(e),
                        Ok(data) if data.len() != t.data.len() => {
                            err = Some(Error::InvalidData(format!(
                                "tensor {name} has {} values, expected {}",
                                data.len(),
                                t.data.len()
                            )))
                        }
                        Ok(data) => {
                            t.data = data;
                            used += 1;
                        }
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != self.params.len() {
            return Err(Error::InvalidData(format!(
                "checkpoint has {} tensors, architecture uses {used}",
                self.params.len()
            )));
        }
        let mut buf_err: Option<Error> = None;
        params.visit_buffers_mut(&mut |name, v| {
            if buf_err.is_some() {
                return;
            }
            match self.buffers.get(&name) {
                None => buf_err = Some(Error::InvalidData(format!("checkpoint missing buffer {name}"))),
                Some(text) => match decode_f64s(text, &name) {
                    Err(e) => buf_err = Some(e),
                    Ok(data) if data.len() != v.len() => {
                        buf_err = Some(Error::InvalidData(format!(
                            "buffer {name} has {} values, expected {}",
                            data.len(),
                            v.len()
                        )))
                    }
                    Ok(data) => *v = data,
                },
            }
        });
        if let Some(e) = buf_err {
            return Err(e);
        }
        Ok(Model {
            hyper: self.hyper.clone(),
            variant: self.variant,
            params,
            norm: self.norm.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!(
                "{}: checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> Model {
        let hyper = HyperParams {
            n_joints: 3,
            hidden_dim: 8,
            latent_dim: 4,
            seq_len: 10,
            dropout: 0.1,
            prior_var: 2.0,
        };
        let mut model = Model::new(hyper, Variant::Dkgm, 21).unwrap();
        // full-mantissa values so the test catches any lossy float path
        model.norm.mean.iter_mut().enumerate().for_each(|(i, m)| *m = (i as f64 + 0.5).sin());
        model.norm.std.iter_mut().enumerate().for_each(|(i, s)| *s = (i as f64 + 1.5).ln());
        model.params.discriminator.bn2.running_mean[3] = 0.25;
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let mut opt = OptimizerSnapshot::new(17, 5);
        opt.insert("encoder.gru.w_r", &[0.1, -0.2, f64::MIN_POSITIVE], &[1e-300, 2.0, 3.0]);
        let ckpt = Checkpoint::capture(&model, 42, 99, Some(opt));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epochs_completed, 42);
        assert_eq!(loaded.train_seed, 99);
        assert_eq!(loaded.variant, Variant::Dkgm);

        let restored = loaded.restore_model().unwrap();
        assert_eq!(restored.params, model.params); // bitwise f64 equality
        assert_eq!(restored.norm, model.norm);
        assert_eq!(restored.hyper, model.hyper);

        let opt = loaded.optimizer.as_ref().unwrap();
        assert_eq!((opt.gen_step, opt.disc_step), (17, 5));
        let (m, v) = opt.get("encoder.gru.w_r").unwrap();
        assert_eq!(m, vec![0.1, -0.2, f64::MIN_POSITIVE]);
        assert_eq!(v, vec![1e-300, 2.0, 3.0]);
        assert!(opt.get("nonexistent").is_err());
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let model = sample_model();
        let ckpt = Checkpoint::capture(&model, 0, 0, None);

        let mut missing = ckpt.clone();
        missing.params.remove("decoder_velocity.out.w");
        assert!(missing.restore_model().is_err());

        let mut extra = ckpt.clone();
        extra.params.insert(
            "mystery.w".into(),
            TensorJson { shape: vec![1], data: encode_f64s(&[1.0]) },
        );
        assert!(extra.restore_model().is_err());

        let mut wrong_shape = ckpt.clone();
        let entry = wrong_shape.params.get_mut("encoder.compress.b").unwrap();
        entry.shape = vec![5];
        assert!(wrong_shape.restore_model().is_err());

        let mut bad_version = ckpt.clone();
        bad_version.version = 2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        bad_version.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn base64_round_trip_preserves_every_bit() {
        let values = [0.0, -0.0, 1.0 / 3.0, f64::MAX, f64::MIN_POSITIVE, -1e-308, 7e300];
        let decoded = decode_f64s(&encode_f64s(&values), "test").unwrap();
        for (a, b) in values.iter().zip(&decoded) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode_f64s("not base64!!!", "test").is_err());
    }
}
