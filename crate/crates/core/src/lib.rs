//! Self-supervised image fusion through common/unique decomposition and
//! masked feature modeling.

pub mod backbone;
pub mod checkpoint;
pub mod decomposition;
pub mod degradation;
pub mod error;
pub mod fusion;
pub mod imaging;
pub mod metrics;
pub mod mfm;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
