pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod plot;
pub mod seed;
pub mod synthesis;
pub mod taxonomy;
pub mod training;
pub mod tensor;

pub use data::{CyclicSampler, DomainRole, LabeledDataset, Sample};
pub use autodiff::{Graph, ParamKey, Var};
pub use error::{Error, Result};
pub use model::{BackboneKind, Mode, ModelBundle, ModelConfig};
pub use tensor::Tensor;
