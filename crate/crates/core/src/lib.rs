//! Fisher auto-encoders: encoder/decoder models trained by minimising a
//! Fisher divergence between the model joint and the data joint.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod par;
pub mod svgd;

pub use error::{Error, Result};
