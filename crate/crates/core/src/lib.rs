//! Multispectral (RGB + thermal) pedestrian detection with masked
//! cross-modal attention fusion, built for full-pipeline testing on a single
//! machine: synthetic scene generation, blackout simulation, masking
//! augmentation, SSD-style detection, training, and log-average miss-rate
//! evaluation.

pub mod augment;
pub mod blackout;
pub mod boxes;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod error;
pub mod evalmr;
pub mod ha;
pub mod head;
pub mod loss;
pub mod mask;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
