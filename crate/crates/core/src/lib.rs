//! Latent motion-manifold learner for skeletal human motion.
//!
//! A sequence autoencoder maps fixed-length clips of per-joint rotations
//! (exponential coordinates) to a low-dimensional latent space and back.
//! Rotation and velocity decoders reconstruct the clip in reverse temporal
//! order; a differentiable forward-kinematics layer supervises joint
//! positions; a kernel two-sample (MMD) penalty shapes the latent
//! distribution towards a Gaussian prior; an optional 1-D convolutional
//! critic adds a least-squares adversarial term. On top of the trained
//! manifold the crate provides sampling, interpolation, denoising, analogy
//! and evaluation tools, plus a command-line front end.

mod error;

pub mod applications;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod kinematics;
pub mod model;
pub mod losses;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
