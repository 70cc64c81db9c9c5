//! Spatio-temporal association of apple fruitlets across capture days.
//!
//! A fruitlet is observed on two different days as a small 3D point cloud.
//! This crate matches the fruitlets of one cluster between the two days:
//!
//! 1. **geometry** – point-cloud containers, the depth/outlier filtration
//!    chain, PCA, normalization, and voxelization.
//! 2. **autodiff** – a minimal dense-tensor reverse-mode engine with an
//!    Adam optimizer, enough to train everything below on a CPU.
//! 3. **shape_codec** – voxel occupancy encoder-decoder producing the
//!    shape descriptor; the decoder is used only for pre-training.
//! 4. **descriptors** – PCA bounding-box keypoints, the positional MLP,
//!    and the initial feature fusion.
//! 5. **matcher** – transformer encoder with alternating self/cross
//!    attention, dual-softmax partial assignment, and the matching loss.
//! 6. **pipeline** – glues 1–5 into an end-to-end model over cluster pairs.
//! 7. **baselines** – ICP-Assoc and Desc-Assoc with a shared Hungarian solver.
//! 8. **synth** – synthetic cross-day cluster generator and augmentations.
//! 9. **dataset / eval / checkpoint / config / train** – the harness:
//!    JSONL datasets, precision/recall/F1 reports, binary checkpoints,
//!    run configuration, and the two training loops.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matcher;
pub mod pipeline;
pub mod shape_codec;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
