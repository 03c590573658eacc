//! Lottery-ticket experiments on a small tape-based autodiff engine:
//! models, magnitude pruning, ticket search, transfer and sweeps.

pub mod autodiff;
pub mod container;
pub mod data;
pub mod init;
pub mod lottery;
pub mod model;
pub mod optim;
pub mod param;
pub mod pruning;
pub mod seed;
pub mod sweep;
pub mod tensor;
pub mod transfer;

pub use autodiff::{AutodiffError, Gradients, Tape, Var};
pub use data::{DataError, DatasetSplit, SplitKind};
pub use init::{InitScheme, InitSpec};
pub use model::{build_model, replace_head, Architecture, ModelError, ModelSpec, ModelState, TrainConfig};
pub use param::{ParamSnapshot, Parameter};
pub use pruning::{magnitude_prune, Mask, PruneConfig, PruneError, Scope};
pub use tensor::{DType, Element, Tensor};
