//! Masked spectrogram autoencoder built from macaron transformer++ blocks.

pub mod binfmt;
pub mod dsp;
pub mod error;
pub mod evalkit;
pub mod masking;
pub mod model;
pub mod params;
pub mod patching;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod transformerpp;
pub mod verify;

pub use error::{Error, Result};
