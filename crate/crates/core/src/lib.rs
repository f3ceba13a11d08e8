//! Multimodal latent diffusion with per-modality diffusion timesteps.
//!
//! Every modality of a tile (optical band groups, radar, elevation, land cover,
//! location, time) is encoded to a latent, tokenized into one shared sequence
//! and denoised by a single transformer. Because each modality carries its own
//! timestep token, any subset can be pinned clean at `t = 0` while the rest is
//! generated, which gives unconditional, conditional and band-infilling
//! generation from one model.

pub mod autodiff;
pub mod backbone;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geo;
pub mod io;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schema;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ConvVae32 = codec::ConvVae<f32>;
pub type ConvVae64 = codec::ConvVae<f64>;
pub type CodecSet32 = codec::CodecSet<f32>;
pub type CodecSet64 = codec::CodecSet<f64>;
pub type TrainState32 = backbone::TrainState<f32>;
pub type TrainState64 = backbone::TrainState<f64>;
pub type Checkpoint32 = backbone::Checkpoint<f32>;
pub type Checkpoint64 = backbone::Checkpoint<f64>;
pub type ConditioningSpec32 = sampler::ConditioningSpec<f32>;
pub type ConditioningSpec64 = sampler::ConditioningSpec<f64>;
pub type GenerationEnsemble32 = sampler::GenerationEnsemble<f32>;
pub type GenerationEnsemble64 = sampler::GenerationEnsemble<f64>;
