//! Visual generative models: training corpora, network layouts, training,
//! and inference-time prediction with its derivatives.

mod arch;
mod dataset;
mod model;
mod train;

pub use arch::{init_params, Architecture, LATENT_DIM};
pub use dataset::{Dataset, Normalizer, Sample};
pub use model::{DecoderSession, JacobianImages, ModelKind, TrainingMeta, VisualModel, VisualPrediction};
pub use train::{train, EpochReport, Optimizer, TrainConfig};
