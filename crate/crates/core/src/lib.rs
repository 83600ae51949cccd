//! Strip-scanning state-space style transfer.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod reference;
pub mod scan;
pub mod ssm;
pub mod training;
pub mod verify;

pub use error::{CheckpointError, Error, Result};
pub use numerics::{Graph, Tensor, Var};
