//! Low-dose CT denoising toolkit: a conveying-path convolutional
//! encoder-decoder generator trained in a WGAN-GP framework with
//! perceptual loss, plus exact 2D-to-3D model inflation so a trained 2D
//! denoiser seeds a 3D denoiser with identical initial behavior.

// Large short-lived tensor buffers dominate the workload; jemalloc avoids
// repeated page faults from returning them to the kernel.
#[global_allocator]
static ALLOC: tikv_jemallocator::Jemalloc = tikv_jemallocator::Jemalloc;

pub mod config;
pub mod error;
pub mod exec;
pub mod io_data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod trainer;
pub mod transfer;

pub use error::{CpceError, Result};
pub use scalar::Scalar;
