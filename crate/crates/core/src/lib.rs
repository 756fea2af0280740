//! Video person re-identification across aerial and ground cameras.
//!
//! The pipeline encodes each frame of a tracklet with a patch-attention
//! encoder, aggregates frames with a multi-stride gated sequence mixer, and
//! adds a body-shape dynamics descriptor regressed from patch tokens. Training
//! combines triplet and label-smoothed identity losses with a momentum proxy
//! memory and a shape prior. Everything numeric is generic over [`Scalar`]
//! (`f32` for training, `f64` for gradient verification).

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod frame;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod synth;
pub mod temporal;
pub mod trainer;

pub use autograd::{Graph, Mat, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ProxyBank32 = memory::ProxyBank<f32>;
pub type ProxyBank64 = memory::ProxyBank<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
