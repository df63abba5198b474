//! Command-line front end: dataset generation, training, evaluation,
//! manifold operations, and gradient verification.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::applications::{
    analogy, denoise, evaluate, interpolate, sample_random, DEFAULT_EVAL_WINDOWS,
};
use crate::autodiff::{BackwardFault, GradCheckSettings};
use crate::data::{
    corrupt_zero_joints, generate_synthetic, load_manifest, load_motion, preprocess, save_motion,
    write_dataset, MotionFile, SynthesisConfig,
};
use crate::kinematics::Skeleton;
use crate::model::{Checkpoint, Model, Motion, Variant};
use crate::seeding::{self, tags};
use crate::training::{model_gradient_check, train, TrainConfig};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "motion-manifold",
    version,
    about = "Learn a latent manifold of skeletal motion and operate on it"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of sway/swing/twist clips
    GenData(GenDataArgs),
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Score reconstruction quality on a dataset split (CSV)
    Eval(EvalArgs),
    /// Reconstruct a clip window through the autoencoder
    Reconstruct(ReconstructArgs),
    /// Decode random draws from the latent prior
    Sample(SampleArgs),
    /// Decode the latent segment between two clips
    Interpolate(InterpolateArgs),
    /// Project a (optionally corrupted) clip back onto the manifold
    Denoise(DenoiseArgs),
    /// Complete "a is to b as the result is to c" in latent space
    Analogy(AnalogyArgs),
    /// Verify every model gradient against finite differences
    Gradcheck(GradcheckArgs),
}

pub fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Reconstruct(a) => run_reconstruct(&a),
        Command::Sample(a) => run_sample(&a),
        Command::Interpolate(a) => run_interpolate(&a),
        Command::Denoise(a) => run_denoise(&a),
        Command::Analogy(a) => run_analogy(&a),
        Command::Gradcheck(a) => run_gradcheck(&a),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.restore_model()
}

fn window_at(motion: &Motion, start: usize, len: usize, what: &str) -> Result<Motion> {
    if start + len > motion.n_frames() {
        return Err(Error::InvalidArgument(format!(
            "{what}: window [{start}, {}) exceeds the clip's {} frames",
            start + len,
            motion.n_frames()
        )));
    }
    Ok(motion.window(start, len))
}

fn check_skeleton(model: &Model, skeleton: &Skeleton, what: &str) -> Result<()> {
    if skeleton.n_joints() != model.hyper.n_joints {
        return Err(Error::InvalidArgument(format!(
            "{what} has {} joints but the model expects {}",
            skeleton.n_joints(),
            model.hyper.n_joints
        )));
    }
    Ok(())
}

fn motion_to_file(motion: &Motion, skeleton: &Skeleton, fps: f64) -> MotionFile {
    let frames = (0..motion.n_frames())
        .map(|t| {
            motion
                .frame(t)
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect()
        })
        .collect();
    MotionFile {
        skeleton: skeleton.clone(),
        fps,
        frames,
        root_translation: None,
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the clips and manifest.tsv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    clips: usize,
    /// Frames per clip
    #[arg(long, default_value_t = 240)]
    frames: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Joints in the generated chain skeleton
    #[arg(long, default_value_t = 17)]
    joints: usize,
    #[arg(long, default_value_t = 0.5)]
    bone_length: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of clips put in the test split
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let skeleton = Skeleton::chain(a.joints, a.bone_length);
    let cfg = SynthesisConfig::new(skeleton, a.clips, a.frames, a.fps);
    let clips = generate_synthetic(&cfg, a.seed);
    let manifest = write_dataset(&a.out, &clips, a.test_fraction)?;
    println!("wrote {} clips, manifest {}", clips.len(), manifest.display());
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (tab-separated train/test lines)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for loss.csv and checkpoint.json
    #[arg(long)]
    out: PathBuf,
    /// TOML training configuration; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Frame rate clips are decimated to on load
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Architecture: S, D, DK, DKG, DKGM or DKGMZ
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Also checkpoint every N epochs (0: only at the end)
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Joint count (default: from the config file, else the dataset)
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Window length in frames
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    prior_var: Option<f64>,
    /// Position-loss weight
    #[arg(long)]
    w_position: Option<f64>,
    /// Cycle-consistency weight
    #[arg(long)]
    w_manifold: Option<f64>,
    /// Prior-matching weight
    #[arg(long)]
    w_prior: Option<f64>,
    /// Adversarial weight
    #[arg(long)]
    w_adversarial: Option<f64>,
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    let data = load_manifest(&a.data, a.fps)?;
    if let Some(j) = a.joints {
        cfg.hyper.n_joints = j;
    } else if a.config.is_none() {
        cfg.hyper.n_joints = data.skeleton.n_joints();
    }
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => {
            $(if let Some(v) = $flag { $field = v; })*
        };
    }
    set! {
        a.variant => cfg.variant,
        a.epochs => cfg.epochs,
        a.batch_size => cfg.batch_size,
        a.seed => cfg.seed,
        a.clip_norm => cfg.clip_norm,
        a.checkpoint_every => cfg.checkpoint_every,
        a.lr => cfg.adam.lr,
        a.hidden_dim => cfg.hyper.hidden_dim,
        a.latent_dim => cfg.hyper.latent_dim,
        a.seq_len => cfg.hyper.seq_len,
        a.dropout => cfg.hyper.dropout,
        a.prior_var => cfg.hyper.prior_var,
        a.w_position => cfg.weights.position,
        a.w_manifold => cfg.weights.manifold,
        a.w_prior => cfg.weights.prior,
        a.w_adversarial => cfg.weights.adversarial,
    }
    let out = train(&cfg, &data, &a.out, a.resume.as_deref())?;
    println!(
        "trained {} epochs: total loss {}, checkpoint {}",
        cfg.epochs,
        out.final_losses.total,
        out.checkpoint_path.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Split to score
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Random windows to reconstruct
    #[arg(long, default_value_t = DEFAULT_EVAL_WINDOWS)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_manifest(&a.data, a.fps)?;
    check_skeleton(&model, &data.skeleton, "dataset")?;
    let (clips, name) = match a.split {
        Split::Train => (&data.train, "train"),
        Split::Test => (&data.test, "test"),
    };
    if clips.is_empty() {
        return Err(Error::InvalidData(format!("the {name} split is empty")));
    }
    let report = evaluate(&model, clips, &data.skeleton, data.fps, a.windows, a.seed)?;
    let csv = report.to_csv();
    match &a.out {
        None => print!("{csv}"),
        Some(p) => {
            fs::write(p, csv)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

// ------------------------------------------------------------- reconstruct

#[derive(Clone, Copy, ValueEnum)]
enum DecoderChoice {
    Rotation,
    Velocity,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input clip (JSON)
    #[arg(long)]
    input: PathBuf,
    /// Output clip (JSON)
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = DecoderChoice::Rotation)]
    decoder: DecoderChoice,
    /// First frame of the reconstructed window
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
}

fn run_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let file = load_motion(&a.input)?;
    check_skeleton(&model, &file.skeleton, "input clip")?;
    let motion = preprocess(&file, a.fps)?;
    let window = window_at(&motion, a.start, model.hyper.seq_len, "input clip")?;
    let rec = model.reconstruct(&window)?;
    let out = match a.decoder {
        DecoderChoice::Rotation => rec.rotation.motion,
        DecoderChoice::Velocity => {
            rec.velocity
                .ok_or_else(|| {
                    Error::InvalidArgument("this model has no velocity decoder".into())
                })?
                .motion
        }
    };
    save_motion(&a.output, &motion_to_file(&out, &file.skeleton, a.fps))?;
    println!("wrote {}", a.output.display());
    Ok(())
}

// ------------------------------------------------------------------ sample

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip whose skeleton and frame rate the outputs copy
    #[arg(long)]
    like: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for sample_NN.json
    #[arg(long)]
    out: PathBuf,
}

fn run_sample(a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let like = load_motion(&a.like)?;
    check_skeleton(&model, &like.skeleton, "template clip")?;
    let motions = sample_random(&model, a.count, a.seed)?;
    fs::create_dir_all(&a.out)?;
    for (i, m) in motions.iter().enumerate() {
        let path = a.out.join(format!("sample_{i:02}.json"));
        save_motion(&path, &motion_to_file(m, &like.skeleton, like.fps))?;
    }
    println!("wrote {} clips to {}", motions.len(), a.out.display());
    Ok(())
}

// ------------------------------------------------------------- interpolate

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Start clip (JSON)
    #[arg(long)]
    from: PathBuf,
    /// End clip (JSON)
    #[arg(long)]
    to: PathBuf,
    /// Interpolation steps (writes steps + 1 clips)
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// First frame of the window taken from both clips
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Output directory for step_NN.json
    #[arg(long)]
    out: PathBuf,
}

fn run_interpolate(a: &InterpolateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let from = load_motion(&a.from)?;
    let to = load_motion(&a.to)?;
    check_skeleton(&model, &from.skeleton, "start clip")?;
    if from.skeleton != to.skeleton {
        return Err(Error::InvalidArgument(
            "the two clips have different skeletons".into(),
        ));
    }
    let wa = window_at(&preprocess(&from, a.fps)?, a.start, model.hyper.seq_len, "start clip")?;
    let wb = window_at(&preprocess(&to, a.fps)?, a.start, model.hyper.seq_len, "end clip")?;
    let path = interpolate(&model, &wa, &wb, a.steps)?;
    fs::create_dir_all(&a.out)?;
    for (i, m) in path.iter().enumerate() {
        let file = a.out.join(format!("step_{i:02}.json"));
        save_motion(&file, &motion_to_file(m, &from.skeleton, a.fps))?;
    }
    println!("wrote {} clips to {}", path.len(), a.out.display());
    Ok(())
}

// ----------------------------------------------------------------- denoise

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Zero out each joint independently with this probability first
    #[arg(long)]
    corrupt: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the corrupted input here
    #[arg(long)]
    save_corrupted: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
}

fn run_denoise(a: &DenoiseArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let file = load_motion(&a.input)?;
    check_skeleton(&model, &file.skeleton, "input clip")?;
    let motion = preprocess(&file, a.fps)?;
    let mut window = window_at(&motion, a.start, model.hyper.seq_len, "input clip")?;
    if let Some(p) = a.corrupt {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "corruption probability must lie in [0, 1], got {p}"
            )));
        }
        let mut rng = seeding::derive_rng(&[a.seed, tags::CORRUPT]);
        window = corrupt_zero_joints(&window, p, &mut rng);
    }
    if let Some(path) = &a.save_corrupted {
        save_motion(path, &motion_to_file(&window, &file.skeleton, a.fps))?;
    }
    let clean = denoise(&model, &window)?;
    save_motion(&a.output, &motion_to_file(&clean, &file.skeleton, a.fps))?;
    println!("wrote {}", a.output.display());
    Ok(())
}

// ----------------------------------------------------------------- analogy

#[derive(Args)]
struct AnalogyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    c: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
}

fn run_analogy(args: &AnalogyArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let fa = load_motion(&args.a)?;
    let fb = load_motion(&args.b)?;
    let fc = load_motion(&args.c)?;
    check_skeleton(&model, &fa.skeleton, "clip a")?;
    if fa.skeleton != fb.skeleton || fa.skeleton != fc.skeleton {
        return Err(Error::InvalidArgument("the clips have different skeletons".into()));
    }
    let len = model.hyper.seq_len;
    let wa = window_at(&preprocess(&fa, args.fps)?, args.start, len, "clip a")?;
    let wb = window_at(&preprocess(&fb, args.fps)?, args.start, len, "clip b")?;
    let wc = window_at(&preprocess(&fc, args.fps)?, args.start, len, "clip c")?;
    let out = analogy(&model, &wa, &wb, &wc)?;
    save_motion(&args.output, &motion_to_file(&out, &fa.skeleton, args.fps))?;
    println!("wrote {}", args.output.display());
    Ok(())
}

// --------------------------------------------------------------- gradcheck

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Double,
    Single,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random elements checked per tensor (0: every element)
    #[arg(long, default_value_t = 64)]
    samples_per_block: usize,
    /// Maximum allowed relative error
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Arithmetic for the numeric differences
    #[arg(long, value_enum, default_value_t = Precision::Double)]
    precision: Precision,
    /// (testing) corrupt the backward pass of ops of this kind
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    /// (testing) scale factor of the injected corruption
    #[arg(long, hide = true, default_value_t = 1.5)]
    fault_scale: f64,
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if matches!(a.precision, Precision::Single) {
        return Err(Error::InvalidArgument(
            "single-precision differences are not supported: the engine computes in f64, \
             and f32 steps cannot resolve its gradients"
                .into(),
        ));
    }
    let settings = GradCheckSettings {
        step: a.step,
        tolerance: a.tolerance,
        samples_per_block: a.samples_per_block,
        seed: a.seed,
    };
    let fault = a.inject_fault.as_ref().map(|op| BackwardFault {
        op_kind: op.clone(),
        scale: a.fault_scale,
    });
    let report = model_gradient_check(&settings, fault)?;
    println!("{:<28} {:>9} {:>8} {:>13}  status", "block", "elements", "checked", "max rel err");
    for b in &report.blocks {
        println!(
            "{:<28} {:>9} {:>8} {:>13.3e}  {}",
            b.name,
            b.elements,
            b.checked,
            b.max_rel_err,
            if b.max_rel_err < report.tolerance { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradient check passed ({} blocks)", report.blocks.len());
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "{} of {} blocks exceed the tolerance {}",
            report.failed_blocks().len(),
            report.blocks.len(),
            report.tolerance
        )))
    }
}
