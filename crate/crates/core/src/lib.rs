//! Small recurrent language models trained by trust-regularized knowledge
//! distillation, with perplexity evaluation and N-best rescoring.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod regularization;
pub mod rescore;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use data::{TokenStream, Vocabulary};
pub use error::{Error, Result};
pub use loss::{DistillLossSpec, LossVariant};
pub use model::{Bottleneck, LmModel, LmState, ModelConfig};
pub use regularization::{DropoutSpec, RegContext};
pub use rescore::{NbestEntry, OovMode, RescoreConfig, WerReport};
pub use tensor::Tensor;
pub use train::{TeacherEnsemble, TrainConfig};
