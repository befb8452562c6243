//! Cross-inductive-bias knowledge distillation at desk scale.
//!
//! A vision transformer student carrying class, convolution and involution
//! tokens learns from the true label, a convolutional teacher and an
//! involutional teacher respectively. This crate holds the numeric substrate
//! (tensors, a reverse-mode tape, a finite-difference oracle), the layers and
//! models, the distillation losses, the optimizer, data ingestion and the
//! checkpoint format.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod optim;
pub mod param;
pub mod suite;
pub mod tensor;

pub use autograd::{Gradients, Padding, Tape, Var};
pub use data::{Batch, ChannelStats, Dataset, SynthSpec};
pub use distill::{DistillConfig, Mode, Target};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, gradcheck_many, GradcheckOptions, GradcheckReport};
pub use models::{Family, Model, ModelSpec, TokenLogits, TokenVars};
pub use optim::{AdamW, Schedule};
pub use param::{Bound, Init, Param, ParamId, ParamStore};
pub use tensor::{Float, Tensor};
