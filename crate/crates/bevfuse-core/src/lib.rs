//! Camera-radar fusion in bird's-eye view, at desk scale.
//!
//! This crate converts multi-camera image features and radar frustum features
//! into a unified BEV feature map through depth-weighted deformable
//! cross-attention. Radar occupancy supplies the depth evidence that backward
//! projection alone cannot provide: all BEV queries along one camera ray
//! project to the same pixel, and only a depth weight can tell them apart.
//!
//! Everything here is pure computation over `alloc` (`no_std` compatible):
//! a dense f64 [`tensor::Tensor`], a reverse-mode [`tape::Tape`] with a fixed
//! op vocabulary, pinhole/frustum [`geometry`], the factored and materialized
//! 3D deformable attention kernels in [`attention`], the camera and radar
//! feature streams, the BEV encoder in [`view_transform`], a deterministic
//! synthetic [`scene_sim`], and the losses/optimizer/metrics in [`loss`] and
//! [`train`]. File formats, CLI, and timing live in the companion CLI crate.
//!
//! All float math goes through `libm` so std and no_std builds are
//! bit-identical, and every kernel uses a fixed accumulation order: identical
//! inputs and seeds produce bit-identical outputs.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod camera_stream;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod mathf;
pub mod mlp;
pub mod ops;
pub mod params;
pub mod presets;
pub mod radar_stream;
pub mod rng;
pub mod scene_sim;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod view_transform;

pub use error::{CoreError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
