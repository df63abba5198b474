//! The training loop: shuffled mini-batches of random windows, a loss CSV,
//! and resumable checkpoints. Every random draw is keyed by
//! (seed, purpose, epoch, batch), so resuming from a checkpoint replays
//! the exact run: the loss log of an interrupted-and-resumed run is
//! line-identical to an uninterrupted one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::step::{assemble_batch, train_step, LossValues, OptState};
use crate::data::{sample_clip, DatasetSplit, NormStats};
use crate::losses::LossWeights;
use crate::model::{Checkpoint, HyperParams, Model, Motion, OptimizerSnapshot, Variant};
use crate::seeding::{self, tags};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub hyper: HyperParams,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Clips per batch; trailing batches of fewer than 2 clips are dropped
    /// (the prior-matching statistic needs at least 2 rows).
    pub batch_size: usize,
    pub epochs: usize,
    /// Joint gradient-norm cap over the recurrent weights.
    pub clip_norm: f64,
    pub seed: u64,
    /// Also write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            variant: Variant::Dkgm,
            hyper: HyperParams::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 30,
            epochs: 500,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,L_R,L_ang,L_pos,L_M,L_W,L_G,L_D";

fn csv_row(epoch: usize, v: &LossValues) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        epoch, v.recon, v.angle, v.position, v.cycle, v.prior, v.adversarial, v.critic
    )
}

fn draw_prior(rng: &mut impl Rng, rows: usize, dim: usize, var: f64) -> Vec<f64> {
    let sd = var.sqrt();
    (0..rows * dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn snapshot_optimizer(model: &Model, opt: &OptState) -> OptimizerSnapshot {
    let mut snap = OptimizerSnapshot::new(opt.gen.step, opt.disc.step);
    let mut gi = 0;
    model.params.visit_generator(model.variant, &mut |name, _| {
        snap.insert(&name, &opt.gen.m[gi], &opt.gen.v[gi]);
        gi += 1;
    });
    let mut di = 0;
    model.params.visit_discriminator(model.variant, &mut |name, _| {
        snap.insert(&name, &opt.disc.m[di], &opt.disc.v[di]);
        di += 1;
    });
    snap
}

fn restore_optimizer(model: &Model, snap: &OptimizerSnapshot) -> Result<OptState> {
    let mut opt = OptState::new(model);
    opt.gen.step = snap.gen_step;
    opt.disc.step = snap.disc_step;
    let mut err: Option<Error> = None;
    let mut gi = 0;
    model.params.visit_generator(model.variant, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match snap.get(&name) {
            Err(e) => err = Some(e),
            Ok((m, v)) => {
                if m.len() != t.data.len() || v.len() != t.data.len() {
                    err = Some(Error::InvalidData(format!("optimizer state size mismatch for {name}")));
                    return;
                }
                opt.gen.m[gi] = m;
                opt.gen.v[gi] = v;
                gi += 1;
            }
        }
    });
    let mut di = 0;
    model.params.visit_discriminator(model.variant, &mut |name, t| {
        if err.is_some() {
            return;
        }
        match snap.get(&name) {
            Err(e) => err = Some(e),
            Ok((m, v)) => {
                if m.len() != t.data.len() || v.len() != t.data.len() {
                    err = Some(Error::InvalidData(format!("optimizer state size mismatch for {name}")));
                    return;
                }
                opt.disc.m[di] = m;
                opt.disc.v[di] = v;
                di += 1;
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(opt),
    }
}

/// Artifacts of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    /// Losses of the final epoch (or of the initial evaluation when
    /// `epochs` is 0).
    pub final_losses: LossValues,
}

/// Trains a model on `data.train`, writing `loss.csv` and
/// `checkpoint.json` into `out_dir`. With `resume`, training continues
/// from the given checkpoint (its seed, normalization and optimizer state
/// replace the config's), appending to an existing loss log.
pub fn train(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.hyper.validate(cfg.variant)?;
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2 (the prior statistic needs 2 rows), got {}",
            cfg.batch_size
        )));
    }
    if !(cfg.clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip_norm must be positive, got {}",
            cfg.clip_norm
        )));
    }
    if data.skeleton.n_joints() != cfg.hyper.n_joints {
        return Err(Error::InvalidArgument(format!(
            "config expects {} joints but the dataset skeleton has {}",
            cfg.hyper.n_joints,
            data.skeleton.n_joints()
        )));
    }
    if data.train.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 training clips, got {}",
            data.train.len()
        )));
    }
    for (i, clip) in data.train.iter().enumerate() {
        if clip.n_frames() < cfg.hyper.seq_len {
            return Err(Error::InvalidData(format!(
                "training clip {i} has {} frames, need at least seq_len = {}",
                clip.n_frames(),
                cfg.hyper.seq_len
            )));
        }
    }

    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("loss.csv");
    let ckpt_path = out_dir.join("checkpoint.json");
    let skeleton = Rc::new(data.skeleton.clone());

    let (mut model, mut opt, seed, start_epoch, mut csv) = match resume {
        None => {
            let mut model = Model::new(cfg.hyper.clone(), cfg.variant, cfg.seed)?;
            model.norm = NormStats::fit(&data.train)?;
            let opt = OptState::new(&model);
            let mut csv = fs::File::create(&csv_path)?;
            writeln!(csv, "{LOSS_CSV_HEADER}")?;
            (model, opt, cfg.seed, 0usize, csv)
        }
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.hyper != cfg.hyper || ckpt.variant != cfg.variant {
                return Err(Error::InvalidArgument(
                    "checkpoint was trained with different hyper parameters or variant".into(),
                ));
            }
            if ckpt.epochs_completed > cfg.epochs {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint already has {} epochs, config asks for {}",
                    ckpt.epochs_completed, cfg.epochs
                )));
            }
            let model = ckpt.restore_model()?;
            let opt = match &ckpt.optimizer {
                Some(snap) => restore_optimizer(&model, snap)?,
                None => OptState::new(&model),
            };
            let csv = fs::OpenOptions::new().create(true).append(true).open(&csv_path)?;
            (model, opt, ckpt.train_seed, ckpt.epochs_completed + 1, csv)
        }
    };

    let n_train = data.train.len();
    let mut final_losses = LossValues::default();
    for epoch in start_epoch..=cfg.epochs {
        // Epoch 0 is a pure evaluation pass: no updates, no dropout.
        let update = epoch > 0;
        let mut indices: Vec<usize> = (0..n_train).collect();
        indices.shuffle(&mut seeding::derive_rng(&[seed, tags::SHUFFLE, epoch as u64]));

        let mut epoch_losses = LossValues::default();
        let mut n_batches = 0usize;
        for (bi, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut wrng = seeding::derive_rng(&[seed, tags::WINDOW, epoch as u64, bi as u64]);
            let windows: Vec<Motion> = chunk
                .iter()
                .map(|&ci| sample_clip(&data.train[ci], cfg.hyper.seq_len, &mut wrng))
                .collect::<Result<_>>()?;
            let batch = assemble_batch(
                &windows,
                &model.norm,
                cfg.variant.uses_position_loss().then_some(&*skeleton),
            );
            let prior = draw_prior(
                &mut seeding::derive_rng(&[seed, tags::PRIOR, epoch as u64, bi as u64]),
                chunk.len(),
                cfg.hyper.latent_dim,
                cfg.hyper.prior_var,
            );
            let mut drng = seeding::derive_rng(&[seed, tags::DROPOUT, epoch as u64, bi as u64]);
            let values = train_step(
                &mut model,
                &skeleton,
                &batch,
                &cfg.weights,
                &cfg.adam,
                cfg.clip_norm,
                &mut opt,
                &mut drng,
                &prior,
                update,
            );
            if let Some(term) = values.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "{term} became non-finite at epoch {epoch}, batch {bi}"
                )));
            }
            epoch_losses.add(&values);
            n_batches += 1;
        }
        if n_batches == 0 {
            return Err(Error::InvalidData(
                "no usable batches: need at least 2 clips per batch".into(),
            ));
        }
        epoch_losses.scale(1.0 / n_batches as f64);
        writeln!(csv, "{}", csv_row(epoch, &epoch_losses))?;
        csv.flush()?;
        final_losses = epoch_losses;

        let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if update && (periodic || epoch == cfg.epochs) {
            let snap = snapshot_optimizer(&model, &opt);
            Checkpoint::capture(&model, epoch, seed, Some(snap)).save(&ckpt_path)?;
        }
    }
    if cfg.epochs == 0 {
        // Nothing was trained, but still leave a usable checkpoint behind.
        let snap = snapshot_optimizer(&model, &opt);
        Checkpoint::capture(&model, 0, seed, Some(snap)).save(&ckpt_path)?;
    }

    Ok(TrainOutcome {
        model,
        checkpoint_path: ckpt_path,
        loss_csv_path: csv_path,
        final_losses,
    })
}
