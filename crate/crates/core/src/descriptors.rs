//! Positional descriptor from PCA bounding-box keypoints, and the initial
//! feature fusion.
//!
//! The keypoints are the four xy-corners of the PCA-aligned bounding box
//! taken at the median z (stereo reconstructions flatten along depth, so the
//! z extrema are unreliable), mapped back to the original frame. The
//! full-bbox variant uses all eight corners instead.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::{init_uniform, Bind, ParamStore};
use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::geometry::{compute_pca, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    MedianZ,
    FullBbox,
}

impl PositionalMode {
    pub fn keypoint_count(self) -> usize {
        match self {
            PositionalMode::MedianZ => 4,
            PositionalMode::FullBbox => 8,
        }
    }

    /// MLP input width: 3 coordinates per keypoint.
    pub fn input_width(self) -> usize {
        3 * self.keypoint_count()
    }
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median_z" => Ok(PositionalMode::MedianZ),
            "full_bbox" => Ok(PositionalMode::FullBbox),
            other => Err(Error::Config(format!("unknown positional_mode: {other}"))),
        }
    }
}

/// Ordered bounding-box keypoints in the original (centered) frame.
///
/// Row order is fixed: (x-,y-), (x-,y+), (x+,y-), (x+,y+); the full-bbox
/// variant repeats that order at z- then z+.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalKeypoints {
    pub keypoints: Vec<[f64; 3]>,
    pub mode: PositionalMode,
}

pub fn positional_keypoints(
    cloud: &PointCloud,
    mode: PositionalMode,
) -> Result<PositionalKeypoints> {
    let frame = compute_pca(cloud)?;
    let mut local: Vec<[f64; 3]> = cloud.points.iter().map(|&p| frame.to_local(p)).collect();

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut z_min = f64::INFINITY;
    let mut z_max = f64::NEG_INFINITY;
    for q in &local {
        x_min = x_min.min(q[0]);
        x_max = x_max.max(q[0]);
        y_min = y_min.min(q[1]);
        y_max = y_max.max(q[1]);
        z_min = z_min.min(q[2]);
        z_max = z_max.max(q[2]);
    }
    // Lower-middle median: deterministic, no averaging.
    local.sort_by(|a, b| a[2].partial_cmp(&b[2]).unwrap());
    let z_med = local[(local.len() - 1) / 2][2];

    let xy = [(x_min, y_min), (x_min, y_max), (x_max, y_min), (x_max, y_max)];
    let corners: Vec<[f64; 3]> = match mode {
        PositionalMode::MedianZ => xy.iter().map(|&(x, y)| [x, y, z_med]).collect(),
        PositionalMode::FullBbox => xy
            .iter()
            .map(|&(x, y)| [x, y, z_min])
            .chain(xy.iter().map(|&(x, y)| [x, y, z_max]))
            .collect(),
    };
    Ok(PositionalKeypoints {
        keypoints: corners.iter().map(|&q| frame.to_world(q)).collect(),
        mode,
    })
}

/// Fresh two-layer MLP parameters (hidden width = feature_dim).
pub fn init_pos_mlp_params(mode: PositionalMode, feature_dim: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let w_in = mode.input_width();
    store.insert(
        "w1",
        vec![w_in, feature_dim],
        init_uniform(seed, "pos_w1", w_in, w_in * feature_dim),
    );
    store.insert("b1", vec![feature_dim], init_uniform(seed, "pos_b1", w_in, feature_dim));
    store.insert(
        "w2",
        vec![feature_dim, feature_dim],
        init_uniform(seed, "pos_w2", feature_dim, feature_dim * feature_dim),
    );
    store.insert("b2", vec![feature_dim], init_uniform(seed, "pos_b2", feature_dim, feature_dim));
    store
}

/// Fresh fusion parameters mapping the shape descriptor into feature space.
pub fn init_fusion_params(shape_dim: usize, feature_dim: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert(
        "w",
        vec![shape_dim, feature_dim],
        init_uniform(seed, "fusion_w", shape_dim, shape_dim * feature_dim),
    );
    store.insert("b", vec![feature_dim], init_uniform(seed, "fusion_b", shape_dim, feature_dim));
    store
}

/// Flatten keypoints into a `[1, 3n]` tape constant in the fixed row order.
/// `scale` converts meters into the unit the MLP was trained on.
pub fn keypoints_input(tape: &mut Tape, kps: &PositionalKeypoints, scale: f64) -> TensorId {
    let data: Vec<f32> = kps
        .keypoints
        .iter()
        .flat_map(|p| p.iter().map(|&c| (c * scale) as f32))
        .collect();
    tape.constant(vec![1, data.len()], data)
}

/// Two-layer MLP (linear, ReLU, linear) producing the positional descriptor.
pub fn positional_descriptor(
    tape: &mut Tape,
    bind: &mut Bind,
    input: TensorId,
) -> Result<TensorId> {
    let w1 = bind.get(tape, "w1")?;
    let expected = tape.shape(w1)[0];
    let got = tape.shape(input)[1];
    if got != expected {
        return Err(Error::Shape(format!(
            "positional MLP expects input width {expected} (trained mode), got {got}"
        )));
    }
    let b1 = bind.get(tape, "b1")?;
    let w2 = bind.get(tape, "w2")?;
    let b2 = bind.get(tape, "b2")?;
    let h = tape.linear(input, w1, b1)?;
    let h = tape.relu(h);
    tape.linear(h, w2, b2)
}

/// Initial feature: Linear(shape descriptor) + positional descriptor.
pub fn fuse_initial_feature(
    tape: &mut Tape,
    bind: &mut Bind,
    shape_descriptor: TensorId,
    positional: TensorId,
) -> Result<TensorId> {
    let w = bind.get(tape, "w")?;
    let b = bind.get(tape, "b")?;
    let mapped = tape.linear(shape_descriptor, w, b)?;
    tape.add(mapped, positional)
}
