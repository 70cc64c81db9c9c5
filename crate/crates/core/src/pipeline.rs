//! End-to-end model over cluster pairs: filtration, centering, voxel shape
//! encoding, positional keypoints, feature fusion, transformer matching.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::{Bind, ParamBinding, ParamStore};
use crate::autodiff::{Tape, TensorId};
use crate::dataset::LabeledClusterPair;
use crate::descriptors::{
    self, keypoints_input, positional_keypoints, PositionalKeypoints, PositionalMode,
};
use crate::error::{Error, Result};
use crate::geometry::{
    center_clouds, median_distance_filter, normalize_cloud, radial_outlier_removal, voxelize,
    PointCloud, VoxelGrid,
};
use crate::matcher::{
    self, extract_matches, CorrespondenceSet, ForwardCtx, LayerMatch, MatcherConfig,
};
use crate::shape_codec::{ShapeCodec, ShapeCodecConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Drop the shape descriptor; the initial feature is the positional
    /// descriptor alone.
    NoShape,
    /// Drop the positional descriptor; the initial feature is the mapped
    /// shape descriptor alone.
    NoPos,
    /// Keep the full model but skip shape pre-training.
    NoPretrain,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_shape" => Ok(Ablation::NoShape),
            "no_pos" => Ok(Ablation::NoPos),
            "no_pretrain" => Ok(Ablation::NoPretrain),
            other => Err(Error::Config(format!("unknown ablation: {other}"))),
        }
    }
}

impl Ablation {
    pub fn uses_shape(self) -> bool {
        !matches!(self, Ablation::NoShape)
    }

    pub fn uses_positional(self) -> bool {
        !matches!(self, Ablation::NoPos)
    }
}

/// Preprocessing knobs for the point-cloud filtration chain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub outlier_radius: f64,
    pub outlier_min_neighbors: usize,
    pub median_k_sigma: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { outlier_radius: 3e-3, outlier_min_neighbors: 4, median_k_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub codec: ShapeCodecConfig,
    pub matcher: MatcherConfig,
    pub positional_mode: PositionalMode,
    pub ablation: Ablation,
    /// Fixed meters-to-MLP-unit factor for keypoint coordinates.
    pub keypoint_scale: f64,
    pub filters: FilterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: ShapeCodecConfig::default(),
            matcher: MatcherConfig::default(),
            positional_mode: PositionalMode::MedianZ,
            ablation: Ablation::None,
            keypoint_scale: 100.0,
            filters: FilterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.matcher.validate()?;
        if self.keypoint_scale <= 0.0 {
            return Err(Error::Config("keypoint_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One observation after filtration and centering, reduced to what the
/// forward pass needs.
#[derive(Debug, Clone)]
pub struct PreparedSide {
    pub grids: Vec<VoxelGrid>,
    pub keypoints: Vec<PositionalKeypoints>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub cluster_id: String,
    pub day_gap: i64,
    pub side_t: PreparedSide,
    pub side_t1: PreparedSide,
    pub gt: Option<CorrespondenceSet>,
}

fn filter_cloud(cloud: &PointCloud, filters: &FilterConfig) -> PointCloud {
    let mut out = cloud.clone();
    if let Ok(c) = radial_outlier_removal(&out, filters.outlier_radius, filters.outlier_min_neighbors)
    {
        if c.len() >= 4 {
            out = c;
        }
    }
    if !out.is_empty() {
        if let Ok(c) = median_distance_filter(&out, filters.median_k_sigma) {
            if c.len() >= 4 {
                out = c;
            }
        }
    }
    // Degenerate filter output falls back to the raw cloud.
    if out.len() >= 4 {
        out
    } else {
        cloud.clone()
    }
}

fn prepare_side(
    clouds: &[PointCloud],
    cfg: &ModelConfig,
) -> Result<PreparedSide> {
    if clouds.is_empty() {
        return Ok(PreparedSide { grids: Vec::new(), keypoints: Vec::new(), count: 0 });
    }
    let filtered: Vec<PointCloud> =
        clouds.iter().map(|c| filter_cloud(c, &cfg.filters)).collect();
    let centered = center_clouds(&filtered)?;

    let mut grids = Vec::new();
    let mut keypoints = Vec::new();
    for cloud in &centered {
        if cfg.ablation.uses_positional() {
            keypoints.push(positional_keypoints(cloud, cfg.positional_mode)?);
        }
        if cfg.ablation.uses_shape() {
            let (normalized, _scale) = normalize_cloud(cloud)?;
            grids.push(voxelize(&normalized, cfg.codec.resolution)?);
        }
    }
    Ok(PreparedSide { grids, keypoints, count: centered.len() })
}

pub fn prepare_pair(pair: &LabeledClusterPair, cfg: &ModelConfig) -> Result<PreparedPair> {
    Ok(PreparedPair {
        cluster_id: pair.cluster_id.clone(),
        day_gap: pair.day_gap,
        side_t: prepare_side(&pair.obs_t.clouds, cfg)?,
        side_t1: prepare_side(&pair.obs_t1.clouds, cfg)?,
        gt: pair.gt.clone(),
    })
}

/// Full model: parameters for the shape codec (prefix `shape_codec/`),
/// positional MLP (`pos_mlp/`), fusion (`fusion/`), and transformer matcher
/// with its per-layer heads (`matcher/`).
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

pub struct ForwardOutput {
    pub per_layer: Vec<LayerMatch>,
    pub m: usize,
    pub n: usize,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        if cfg.ablation.uses_shape() {
            let codec = ShapeCodec::new(cfg.codec.clone())?;
            params.absorb("shape_codec/", &codec.init_params(seed ^ 0x51));
            params.absorb(
                "fusion/",
                &descriptors::init_fusion_params(
                    cfg.codec.descriptor_dim,
                    cfg.matcher.feature_dim,
                    seed ^ 0x52,
                ),
            );
        }
        if cfg.ablation.uses_positional() {
            params.absorb(
                "pos_mlp/",
                &descriptors::init_pos_mlp_params(
                    cfg.positional_mode,
                    cfg.matcher.feature_dim,
                    seed ^ 0x53,
                ),
            );
        }
        params.absorb("matcher/", &matcher::init_matcher_params(&cfg.matcher, seed ^ 0x54));
        Ok(Self { cfg, params })
    }

    /// Replace the shape-codec parameters with pre-trained ones.
    pub fn load_pretrained_codec(&mut self, codec_params: &ParamStore) {
        self.params.absorb("shape_codec/", codec_params);
    }

    /// Consistency check between the config and the stored tensors; errors
    /// name both dimensions.
    pub fn validate_params(&self) -> Result<()> {
        let d = self.cfg.matcher.feature_dim;
        let q = self.params.get("matcher/l0_self_q_w")?;
        if q.shape != [d, d] {
            return Err(Error::Config(format!(
                "checkpoint feature_dim {} does not match configured feature_dim {d}",
                q.shape[0]
            )));
        }
        if self.cfg.ablation.uses_shape() {
            let head = self.params.get("shape_codec/head_w")?;
            if head.shape[1] != self.cfg.codec.descriptor_dim {
                return Err(Error::Config(format!(
                    "checkpoint descriptor_dim {} does not match configured descriptor_dim {}",
                    head.shape[1], self.cfg.codec.descriptor_dim
                )));
            }
        }
        if self.cfg.ablation.uses_positional() {
            let w1 = self.params.get("pos_mlp/w1")?;
            let expect = self.cfg.positional_mode.input_width();
            if w1.shape[0] != expect {
                return Err(Error::Config(format!(
                    "checkpoint positional input width {} does not match mode width {expect}",
                    w1.shape[0]
                )));
            }
        }
        Ok(())
    }

    fn initial_features(
        &self,
        tape: &mut Tape,
        binding: &mut ParamBinding,
        side: &PreparedSide,
        trainable: bool,
    ) -> Result<TensorId> {
        let d = self.cfg.matcher.feature_dim;
        if side.count == 0 {
            return Ok(tape.constant(vec![0, d], vec![]));
        }
        let codec = ShapeCodec::new(self.cfg.codec.clone())?;
        let mut rows = Vec::with_capacity(side.count);
        for i in 0..side.count {
            let shape_descr = if self.cfg.ablation.uses_shape() {
                let mut bind = Bind::new(&self.params, binding, trainable, "shape_codec/");
                Some(codec.encode(tape, &mut bind, &side.grids[i])?)
            } else {
                None
            };
            let pos_descr = if self.cfg.ablation.uses_positional() {
                let input = keypoints_input(tape, &side.keypoints[i], self.cfg.keypoint_scale);
                let mut bind = Bind::new(&self.params, binding, trainable, "pos_mlp/");
                Some(descriptors::positional_descriptor(tape, &mut bind, input)?)
            } else {
                None
            };
            let fused = match (shape_descr, pos_descr) {
                (Some(sd), Some(pd)) => {
                    let mut bind = Bind::new(&self.params, binding, trainable, "fusion/");
                    descriptors::fuse_initial_feature(tape, &mut bind, sd, pd)?
                }
                (None, Some(pd)) => pd,
                (Some(sd), None) => {
                    let mut bind = Bind::new(&self.params, binding, trainable, "fusion/");
                    let w = bind.get(tape, "w")?;
                    let b = bind.get(tape, "b")?;
                    tape.linear(sd, w, b)?
                }
                (None, None) => {
                    return Err(Error::Config(
                        "ablation removes both descriptors; nothing to match on".into(),
                    ))
                }
            };
            rows.push(fused);
        }
        tape.concat(&rows, 0)
    }

    /// Forward pass producing per-layer score/matchability/assignment.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &mut ParamBinding,
        pair: &PreparedPair,
        ctx: &ForwardCtx,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        let x_t = self.initial_features(tape, binding, &pair.side_t, trainable)?;
        let x_t1 = self.initial_features(tape, binding, &pair.side_t1, trainable)?;
        let mut bind = Bind::new(&self.params, binding, trainable, "matcher/");
        let layer_feats =
            matcher::encoder_forward(tape, &mut bind, &self.cfg.matcher, x_t, x_t1, ctx)?;
        let mut per_layer = Vec::with_capacity(layer_feats.len());
        for (l, &(ft, ft1)) in layer_feats.iter().enumerate() {
            per_layer.push(matcher::match_heads(tape, &mut bind, &self.cfg.matcher, l, ft, ft1)?);
        }
        Ok(ForwardOutput { per_layer, m: pair.side_t.count, n: pair.side_t1.count })
    }

    /// Final-layer soft assignment for one raw pair (inference).
    pub fn assignment_matrix(&self, pair: &LabeledClusterPair) -> Result<(Vec<f32>, usize, usize)> {
        let prepared = prepare_pair(pair, &self.cfg)?;
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let out =
            self.forward(&mut tape, &mut binding, &prepared, &ForwardCtx::eval(), false)?;
        let last = out.per_layer.last().expect("at least one layer");
        Ok((tape.data(last.assignment).to_vec(), out.m, out.n))
    }

    /// Hard correspondences at the configured threshold.
    pub fn predict(&self, pair: &LabeledClusterPair) -> Result<CorrespondenceSet> {
        let (p, m, n) = self.assignment_matrix(pair)?;
        Ok(extract_matches(&p, m, n, self.cfg.matcher.match_threshold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{cluster_rng, generate_cluster_pair, SynthConfig};

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            codec: ShapeCodecConfig::tiny(),
            matcher: MatcherConfig {
                layers: 2,
                heads: 2,
                feature_dim: 16,
                ffn_dim: 32,
                dropout: 0.0,
                match_threshold: 0.1,
            },
            positional_mode: PositionalMode::MedianZ,
            ablation: Ablation::None,
            keypoint_scale: 100.0,
            filters: FilterConfig::default(),
        }
    }

    fn sample_pair() -> LabeledClusterPair {
        let mut rng = cluster_rng(31, 0);
        generate_cluster_pair(&SynthConfig::default(), "c0", &mut rng).unwrap()
    }

    #[test]
    fn forward_produces_assignment_per_layer() {
        let model = Model::init(tiny_model_cfg(), 7).unwrap();
        let pair = sample_pair();
        let prepared = prepare_pair(&pair, &model.cfg).unwrap();
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let out = model
            .forward(&mut tape, &mut binding, &prepared, &ForwardCtx::eval(), false)
            .unwrap();
        assert_eq!(out.per_layer.len(), 2);
        for lm in &out.per_layer {
            let p = tape.data(lm.assignment);
            assert_eq!(p.len(), out.m * out.n);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let model = Model::init(tiny_model_cfg(), 7).unwrap();
        let pair = sample_pair();
        let a = model.predict(&pair).unwrap();
        let b = model.predict(&pair).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablations_change_parameter_sets() {
        let mut cfg = tiny_model_cfg();
        cfg.ablation = Ablation::NoShape;
        let m = Model::init(cfg, 1).unwrap();
        assert!(!m.params.contains("shape_codec/head_w"));
        assert!(m.params.contains("pos_mlp/w1"));

        let mut cfg = tiny_model_cfg();
        cfg.ablation = Ablation::NoPos;
        let m = Model::init(cfg, 1).unwrap();
        assert!(m.params.contains("shape_codec/head_w"));
        assert!(!m.params.contains("pos_mlp/w1"));
        let pair = sample_pair();
        assert!(m.predict(&pair).is_ok());
    }

    #[test]
    fn empty_side_predicts_all_unmatched() {
        let model = Model::init(tiny_model_cfg(), 7).unwrap();
        let mut pair = sample_pair();
        pair.obs_t1.clouds.clear();
        pair.obs_t1.fruitlet_ids.clear();
        let m = pair.obs_t.clouds.len();
        pair.gt = Some(CorrespondenceSet::new(vec![], m, 0).unwrap());
        let set = model.predict(&pair).unwrap();
        assert!(set.matches.is_empty());
        assert_eq!(set.unmatched_t.len(), m);
    }

    #[test]
    fn cross_config_validation_names_both_dims() {
        let model = Model::init(tiny_model_cfg(), 7).unwrap();
        let mut other = model.clone();
        other.cfg.matcher.feature_dim = 32;
        other.cfg.matcher.heads = 2;
        let err = other.validate_params().unwrap_err().to_string();
        assert!(err.contains("16") && err.contains("32"), "{err}");
    }
}
