//! Consistent exit training for multi-exit 1-D convolutional networks.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command-line driver live in the `cetx` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod early_exit;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod perturb;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use kernels::{argmax, log_softmax, softmax};
pub use model::{BlockSpec, ExitHeadSpec, ModelConfig, MultiExitNet, NoRng, Parameter};
pub use tape::{Grads, NormMode, OpKind, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use data::{DatasetMeta, SplitSpec, SyntheticSpec, WindowedDataset};
pub use early_exit::{CurvePoint, ExitPolicy, ExitProfile, ExitStats, InferenceTrace};
pub use metrics::{ConfusionMatrix, Metrics};
pub use objectives::{LabelSource, LossConfig, LossMode};
pub use perturb::{PerturbKind, PerturbationConfig};
pub use trainer::{train, AdamState, TrainConfig, TrainReport, Trainer};
