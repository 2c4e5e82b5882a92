pub mod autodiff;
pub mod chart;
pub mod config;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod manifest;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod pnm;
pub mod resize;
pub mod robust;
pub mod training;

pub use error::{Error, Result};
