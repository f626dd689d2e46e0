//! ProtoMIL: prototype-based, self-explainable multiple-instance learning
//! with gated attention pooling, attention-weighted prototype losses,
//! prototype projection and pruning, plus dataset generation, evaluation
//! and explanation export.

pub mod error;
pub mod losses;
pub mod mil;
pub mod params;
pub mod tensorio;

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod explain;
pub mod proto_ops;
pub mod train;

pub use error::{Error, Result};
