pub mod augment;
pub mod error;
pub mod importance;
pub mod keep;
pub mod metrics;
pub mod netpbm;
pub mod oracle;
pub mod pipeline;
pub mod planted;
pub mod sage;
pub mod segmentation;
pub mod tensor;

pub use error::{Error, Result};
pub use augment::AugmentSpec;
pub use importance::ImportanceMap;
pub use keep::KeepConfig;
pub use oracle::{Architecture, OracleNet};
pub use sage::SageConfig;
pub use segmentation::LabelMap;
pub use tensor::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
