//! Model data types and the differentiable forward pass.

pub mod attention;
pub mod conv;
pub mod encoder;
pub mod model;
pub mod similarity;
pub mod types;

pub use attention::{attention_pool, AttentionGrads};
pub use encoder::{encode_forward, EncoderParams};
pub use model::{classify, forward_bag, positive_probability, BagCache, Model, ModelConfig, ModelGrads};
pub use similarity::prototype_similarities;
pub use types::*;
