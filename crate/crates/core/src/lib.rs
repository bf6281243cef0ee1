//! Multi-focus image fusion with unity fusion attention.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: rank-4 tensors with reverse-mode differentiation and Adam.
//! - [`network`]: the fusion network (feature extraction, attention-based
//!   fusion, reconstruction) and its checkpoint format.
//! - [`loss`] and [`train`]: the L1 + SSIM objective and the training loop.
//! - [`dataset`]: synthetic multi-focus triplets from image + mask corpora.
//! - [`metrics`]: AVG, STD, SEN, Q^AB/F and SSIM evaluation.
//! - [`image`] and [`pnm`]: 8-bit image buffers and the PPM/PGM codec.

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pnm;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
