//! Recurrent sequence classifiers whose source-modality representation is
//! compensated by a frozen auxiliary-modality encoder through a residual
//! adaptation block and linear-kernel MMD alignment losses.

pub mod adaptation;
pub mod error;
pub mod linalg;
pub mod model;
pub mod params;
pub mod rnn;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
