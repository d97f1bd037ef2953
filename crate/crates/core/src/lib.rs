//! Skeleton-conditioned latent diffusion for single-view novel view synthesis.
//!
//! The pipeline: [`scenegen`] renders articulated objects and their skeletons,
//! [`codec`] learns a latent space, [`unet`] and [`diffusion`] train a
//! denoiser whose normalization layers are modulated by encoded skeletons,
//! and [`evalkit`] scores and compares the results.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod scenegen;
pub mod seed;
pub mod unet;

pub use error::{Error, Result};
pub use image::Image;

/// Keeps large freed buffers inside the process. Tensor code allocates and
/// drops multi-megabyte buffers every operation; with glibc's default
/// thresholds each one is a fresh mmap and a round of page faults.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
