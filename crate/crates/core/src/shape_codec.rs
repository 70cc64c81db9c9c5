//! Voxel occupancy encoder-decoder.
//!
//! The encoder turns an occupancy grid into a fixed-length shape descriptor
//! through four stride-2 convolution blocks (conv, channel layer norm,
//! ReLU), a global average pool, and a linear head. The decoder mirrors it
//! with four transposed-convolution stages; a classifier head after each
//! stage predicts per-voxel occupancy, and voxels predicted (or known)
//! unoccupied are zero-masked before the next stage. The decoder exists only
//! to pre-train the encoder and is dropped afterwards.

use crate::autodiff::params::{init_uniform, Bind, ParamStore};
use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCodecConfig {
    pub resolution: usize,
    pub channels: [usize; STAGES],
    pub descriptor_dim: usize,
}

impl Default for ShapeCodecConfig {
    fn default() -> Self {
        Self { resolution: 64, channels: [8, 16, 32, 64], descriptor_dim: 256 }
    }
}

impl ShapeCodecConfig {
    /// Tiny configuration used by gradient checks and the overfit test.
    pub fn tiny() -> Self {
        Self { resolution: 16, channels: [2, 4, 8, 16], descriptor_dim: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1 << STAGES;
        if self.resolution % div != 0 || self.resolution < div {
            return Err(Error::Config(format!(
                "codec resolution {} must be a positive multiple of {div}",
                self.resolution
            )));
        }
        if self.descriptor_dim == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("codec channels and descriptor_dim must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the bottleneck volume.
    pub fn bottleneck(&self) -> usize {
        self.resolution >> STAGES
    }

    /// Side length of decoder stage `s` (0-based): resolution / 2^(STAGES-1-s).
    pub fn stage_side(&self, s: usize) -> usize {
        self.resolution >> (STAGES - 1 - s)
    }
}

/// Ground-truth occupancy at every decoder resolution, built by repeated 2x
/// max-pooling of the full-resolution grid. `levels[s]` matches decoder
/// stage `s`; the last level is the original grid.
#[derive(Debug, Clone)]
pub struct OccupancyPyramid {
    pub levels: Vec<Vec<bool>>,
    pub sides: Vec<usize>,
}

impl OccupancyPyramid {
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        let mut levels = vec![grid.occupancy.clone()];
        let mut sides = vec![grid.resolution];
        for _ in 1..STAGES {
            let side = sides.last().unwrap() / 2;
            let prev = levels.last().unwrap();
            let pside = side * 2;
            let mut level = vec![false; side * side * side];
            for z in 0..side {
                for y in 0..side {
                    for x in 0..side {
                        let mut occ = false;
                        'child: for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    if prev[((2 * z + dz) * pside + 2 * y + dy) * pside
                                        + 2 * x
                                        + dx]
                                    {
                                        occ = true;
                                        break 'child;
                                    }
                                }
                            }
                        }
                        level[(z * side + y) * side + x] = occ;
                    }
                }
            }
            levels.push(level);
            sides.push(side);
        }
        levels.reverse();
        sides.reverse();
        Self { levels, sides }
    }
}

/// How the decoder decides which voxels to zero before the next stage.
pub enum PruneMode<'a> {
    /// Ground-truth occupancy drives pruning (training).
    TeacherForced(&'a OccupancyPyramid),
    /// Predicted probability < 0.5 prunes (inference).
    Predicted,
}

#[derive(Debug, Clone)]
pub struct ShapeCodec {
    pub cfg: ShapeCodecConfig,
}

impl ShapeCodec {
    pub fn new(cfg: ShapeCodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn decoder_channels(&self) -> [usize; STAGES] {
        let c = self.cfg.channels;
        [c[3], c[2].max(8), c[1].max(8), c[0].max(8)]
    }

    /// Fresh parameters, deterministic in `seed`. Names are unprefixed; the
    /// full model nests them under "shape_codec/".
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let c = self.cfg.channels;
        let conv = |store: &mut ParamStore, name: String, co: usize, ci: usize| {
            let fan = ci * 27;
            store.insert(
                &format!("{name}_w"),
                vec![co, ci, 3, 3, 3],
                init_uniform(seed, &format!("{name}_w"), fan, co * fan),
            );
            store.insert(
                &format!("{name}_b"),
                vec![co],
                init_uniform(seed, &format!("{name}_b"), fan, co),
            );
        };
        let norm = |store: &mut ParamStore, name: String, ch: usize| {
            store.insert(&format!("{name}_gamma"), vec![ch], vec![1.0; ch]);
            store.insert(&format!("{name}_beta"), vec![ch], vec![0.0; ch]);
        };

        let mut ci = 1;
        for (i, &co) in c.iter().enumerate() {
            conv(&mut store, format!("enc{i}"), co, ci);
            norm(&mut store, format!("enc{i}"), co);
            ci = co;
        }
        let d = self.cfg.descriptor_dim;
        store.insert("head_w", vec![c[3], d], init_uniform(seed, "head_w", c[3], c[3] * d));
        store.insert("head_b", vec![d], init_uniform(seed, "head_b", c[3], d));

        let b3 = self.cfg.bottleneck().pow(3);
        store.insert(
            "dec_in_w",
            vec![d, c[3] * b3],
            init_uniform(seed, "dec_in_w", d, d * c[3] * b3),
        );
        store.insert("dec_in_b", vec![c[3] * b3], init_uniform(seed, "dec_in_b", d, c[3] * b3));
        // Decoder channel path mirrors the encoder (floored at 4 so the late
        // stages keep enough width to express child occupancy patterns).
        // No normalization here: the classifier heads read raw transposed-conv
        // features (a per-position norm would crush the low-channel stages).
        let dec_ch = self.decoder_channels();
        let mut ci = c[3];
        for (i, &co) in dec_ch.iter().enumerate() {
            // Transposed conv weights are [ci, co, 2, 2, 2].
            let fan = ci * 8;
            store.insert(
                &format!("dec{i}_w"),
                vec![ci, co, 2, 2, 2],
                init_uniform(seed, &format!("dec{i}_w"), fan, ci * co * 8),
            );
            store.insert(
                &format!("dec{i}_b"),
                vec![co],
                init_uniform(seed, &format!("dec{i}_b"), fan, co),
            );
            store.insert(
                &format!("cls{i}_w"),
                vec![co, 1],
                init_uniform(seed, &format!("cls{i}_w"), co, co),
            );
            store.insert(&format!("cls{i}_b"), vec![1], vec![0.0]);
            ci = co;
        }
        store
    }

    /// Layer norm over channels at every spatial position of `[c,d,h,w]`.
    fn channel_norm(
        &self,
        tape: &mut Tape,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        let (c, vol) = (s[0], s[1] * s[2] * s[3]);
        let flat = tape.reshape(x, vec![c, vol])?;
        let t = tape.transpose(flat)?;
        let n = tape.layer_norm(t, gamma, beta)?;
        let back = tape.transpose(n)?;
        tape.reshape(back, s)
    }

    /// Per-voxel occupancy probability from a `[c,d,h,w]` feature map:
    /// a 1x1x1 conv (linear over channels) plus sigmoid, flattened to
    /// `[vol, 1]` in row-major voxel order.
    fn classify(&self, tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        let (c, vol) = (s[0], s[1] * s[2] * s[3]);
        let flat = tape.reshape(x, vec![c, vol])?;
        let t = tape.transpose(flat)?;
        let logits = tape.linear(t, w, b)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn grid_input(&self, tape: &mut Tape, grid: &VoxelGrid) -> Result<TensorId> {
        if grid.resolution != self.cfg.resolution {
            return Err(Error::Shape(format!(
                "grid resolution {} does not match codec resolution {}",
                grid.resolution, self.cfg.resolution
            )));
        }
        let r = grid.resolution;
        let data: Vec<f32> = grid.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        Ok(tape.constant(vec![1, r, r, r], data))
    }

    /// Encode an occupancy grid into a `[1, descriptor_dim]` descriptor.
    pub fn encode(&self, tape: &mut Tape, bind: &mut Bind, grid: &VoxelGrid) -> Result<TensorId> {
        let input = self.grid_input(tape, grid)?;
        self.encode_input(tape, bind, input)
    }

    pub fn encode_input(
        &self,
        tape: &mut Tape,
        bind: &mut Bind,
        input: TensorId,
    ) -> Result<TensorId> {
        let mut x = input;
        for i in 0..STAGES {
            let w = bind.get(tape, &format!("enc{i}_w"))?;
            let b = bind.get(tape, &format!("enc{i}_b"))?;
            let gamma = bind.get(tape, &format!("enc{i}_gamma"))?;
            let beta = bind.get(tape, &format!("enc{i}_beta"))?;
            x = tape.conv3(x, w, b)?;
            x = self.channel_norm(tape, x, gamma, beta)?;
            x = tape.relu(x);
        }
        let pooled = tape.spatial_mean(x)?;
        let hw = bind.get(tape, "head_w")?;
        let hb = bind.get(tape, "head_b")?;
        tape.linear(pooled, hw, hb)
    }

    /// Decode a descriptor into per-stage occupancy probability tensors
    /// (each `[side^3, 1]`). Pruned voxels are zero-masked in the feature
    /// map before the next stage.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &mut Bind,
        descriptor: TensorId,
        prune: PruneMode,
    ) -> Result<Vec<TensorId>> {
        let c = self.cfg.channels;
        let bside = self.cfg.bottleneck();
        let w = bind.get(tape, "dec_in_w")?;
        let b = bind.get(tape, "dec_in_b")?;
        let seed = tape.linear(descriptor, w, b)?;
        let mut x = tape.reshape(seed, vec![c[3], bside, bside, bside])?;

        let mut probs = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let w = bind.get(tape, &format!("dec{i}_w"))?;
            let b = bind.get(tape, &format!("dec{i}_b"))?;
            x = tape.conv3_transpose(x, w, b)?;

            // Classify from the raw transposed-conv features.
            let cw = bind.get(tape, &format!("cls{i}_w"))?;
            let cb = bind.get(tape, &format!("cls{i}_b"))?;
            let p = self.classify(tape, x, cw, cb)?;
            probs.push(p);
            x = tape.relu(x);

            if i + 1 < STAGES {
                let side = self.cfg.stage_side(i);
                let keep: Vec<f32> = match &prune {
                    PruneMode::TeacherForced(pyr) => {
                        if pyr.sides[i] != side {
                            return Err(Error::Shape(format!(
                                "pyramid level {i} side {} does not match stage side {side}",
                                pyr.sides[i]
                            )));
                        }
                        pyr.levels[i].iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
                    }
                    PruneMode::Predicted => {
                        tape.data(p).iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
                    }
                };
                let ch = tape.shape(x)[0];
                let vol = side * side * side;
                let mut mask = vec![0.0f32; ch * vol];
                for cc in 0..ch {
                    mask[cc * vol..(cc + 1) * vol].copy_from_slice(&keep);
                }
                let m = tape.constant(vec![ch, side, side, side], mask);
                x = tape.mul(x, m)?;
            }
        }
        Ok(probs)
    }
}

/// Mean binary cross-entropy per stage, averaged over stages. Probabilities
/// are clamped to `[1e-7, 1-1e-7]` before the logs.
pub fn decoder_loss(
    tape: &mut Tape,
    predictions: &[TensorId],
    pyramid: &OccupancyPyramid,
) -> Result<TensorId> {
    if predictions.len() != pyramid.levels.len() {
        return Err(Error::Shape(format!(
            "{} prediction stages vs {} pyramid levels",
            predictions.len(),
            pyramid.levels.len()
        )));
    }
    let mut stage_losses = Vec::with_capacity(predictions.len());
    for (s, (&p, level)) in predictions.iter().zip(&pyramid.levels).enumerate() {
        let n = tape.data(p).len();
        if n != level.len() {
            return Err(Error::Shape(format!(
                "stage {s}: {n} predictions vs {} ground-truth voxels",
                level.len()
            )));
        }
        let y: Vec<f32> = level.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let y_not: Vec<f32> = y.iter().map(|v| 1.0 - v).collect();
        let yc = tape.constant(vec![n, 1], y);
        let ync = tape.constant(vec![n, 1], y_not);

        let pc = tape.clamp(p, 1e-7, 1.0 - 1e-7);
        let logp = tape.log(pc);
        let one_minus = tape.affine(pc, -1.0, 1.0);
        let log1mp = tape.log(one_minus);

        let pos = tape.mul(yc, logp)?;
        let neg = tape.mul(ync, log1mp)?;
        let both = tape.add(pos, neg)?;
        let total = tape.sum(both);
        stage_losses.push(tape.scale(total, -1.0 / n as f32));
    }
    let mut acc = stage_losses[0];
    for &sl in &stage_losses[1..] {
        acc = tape.add(acc, sl)?;
    }
    Ok(tape.scale(acc, 1.0 / predictions.len() as f32))
}

/// Intersection-over-union of a binarized prediction against a grid.
pub fn reconstruction_iou(probabilities: &[f32], grid: &VoxelGrid) -> f64 {
    debug_assert_eq!(probabilities.len(), grid.occupancy.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &o) in probabilities.iter().zip(&grid.occupancy) {
        let pred = p >= 0.5;
        if pred && o {
            inter += 1;
        }
        if pred || o {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
