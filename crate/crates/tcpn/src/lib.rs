//! Key information extraction from OCR output with a tag / copy-predict model
//! over a compact text lattice.

pub mod autodiff;
pub mod ckpt;
pub mod config;
pub mod decoder;
pub mod doc;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod lattice;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Result, TcpnError};
