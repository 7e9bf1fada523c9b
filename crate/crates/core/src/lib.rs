pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use backbone::{Backbone, BackboneConfig, TokenIds, Upsampler};
pub use error::{Error, Result};
pub use prompts::{InitMode, PromptConfig, PromptState, StrategyKind, TrainableState};
pub use tensor::{Param, Parameterized, Tensor};
