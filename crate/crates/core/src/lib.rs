//! Joint image-text generative modeling at desk scale.
//!
//! The model couples three pieces through a shared nonnegative latent code:
//! a deep Poisson-gamma topic model that decodes text, a Weibull
//! ladder-structured variational encoder that infers the code from images,
//! and a hierarchy of adversarial image generators driven by the same code.
//! Everything runs on a small self-contained tensor engine with
//! reverse-mode gradients so that every inferential component can be
//! verified against an independent oracle.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod parallel;
pub mod pgbn;
pub mod rastergan;
pub mod rng;
pub mod special;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod vhet;

pub use config::TrainConfig;
pub use corpus::{CountVector, ImagePyramid, ImageRecord, PairedDataset, Vocabulary};
pub use encoder::{EncoderState, WeibullParams};
pub use error::Error;
pub use pgbn::{LatentState, PgbnHyper, TopicStack};
pub use rastergan::{DiscriminatorState, GanVariant, GeneratorState};
pub use rng::RandomStream;
pub use tensor::{Element, ParamStore, Tensor};
pub use trainer::TrainState;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
