//! Coupled recurrent network for personalized next-best-action
//! recommendation: a two-memory recurrent cell over action/response
//! sequences, a demographic-initialized client encoder, a residual
//! reward head, imbalance-aware training, a constrained top-k
//! recommender, and a synthetic interaction world for validation.

pub mod cli;
pub mod cru;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod head;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod recommend;
pub mod synthworld;
pub mod training;

pub use error::{CrnError, Result};
