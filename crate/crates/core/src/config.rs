//! Declarative run configuration.
//!
//! One TOML file controls everything; every knob has a default and the CLI
//! can override individual keys. `FRUITLET_ASSOC_SEED` overrides the seed
//! from the environment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{DescAssocWeights, HistogramConfig};
use crate::descriptors::PositionalMode;
use crate::error::{Error, Result};
use crate::matcher::MatcherConfig;
use crate::pipeline::{Ablation, FilterConfig, ModelConfig};
use crate::shape_codec::ShapeCodecConfig;
use crate::synth::{AugmentClusterConfig, AugmentShapeConfig, SynthConfig};

pub const SEED_ENV_VAR: &str = "FRUITLET_ASSOC_SEED";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // Image-grid filters (organized depth).
    pub sigma_space: f64,
    pub sigma_range: f64,
    pub max_jump: f64,

    // Point-cloud filtration.
    pub outlier_radius: f64,
    pub outlier_min_neighbors: usize,
    pub median_k_sigma: f64,

    // Shape codec.
    pub voxel_resolution: usize,
    pub codec_channels: [usize; 4],
    pub descriptor_dim: usize,

    // Matcher.
    pub layers: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    pub match_threshold: f32,
    pub positional_mode: PositionalMode,
    pub ablation: Ablation,
    pub keypoint_scale: f64,

    // Shape pre-training schedule.
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,
    pub pretrain_decay_every: u64,
    pub pretrain_decay_factor: f32,

    // Matcher training schedule.
    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f32,
    pub warmup_epochs: usize,

    // Threshold sweep bounds.
    pub sweep_lo: f32,
    pub sweep_hi: f32,
    pub sweep_step: f32,

    // Baselines.
    pub dist_threshold: f64,
    pub desc_weight_histogram: f64,
    pub desc_weight_centroid: f64,
    pub hist_dist_bins: usize,
    pub hist_dist_max: f64,
    pub hist_azim_bins: usize,
    pub hist_elev_bins: usize,

    pub synth: SynthConfig,
    pub augment_shape: AugmentShapeConfig,
    pub augment_cluster: AugmentClusterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sigma_space: 2.0,
            sigma_range: 3e-3,
            max_jump: 5e-3,
            outlier_radius: 3e-3,
            outlier_min_neighbors: 4,
            median_k_sigma: 3.0,
            voxel_resolution: 64,
            codec_channels: [8, 16, 32, 64],
            descriptor_dim: 256,
            layers: 4,
            heads: 8,
            feature_dim: 256,
            ffn_dim: 1024,
            dropout: 0.1,
            match_threshold: 0.1,
            positional_mode: PositionalMode::MedianZ,
            ablation: Ablation::None,
            keypoint_scale: 100.0,
            pretrain_epochs: 200,
            pretrain_batch: 64,
            pretrain_lr: 1e-3,
            pretrain_decay_every: 50,
            pretrain_decay_factor: 0.1,
            train_epochs: 200,
            train_batch: 16,
            train_lr: 1e-4,
            warmup_epochs: 10,
            sweep_lo: 0.01,
            sweep_hi: 0.5,
            sweep_step: 0.01,
            dist_threshold: 6e-3,
            desc_weight_histogram: 1.0,
            desc_weight_centroid: 50.0,
            hist_dist_bins: 8,
            hist_dist_max: 60e-3,
            hist_azim_bins: 6,
            hist_elev_bins: 4,
            synth: SynthConfig::default(),
            augment_shape: AugmentShapeConfig::default(),
            augment_cluster: AugmentClusterConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form, stable field order; stored inside checkpoints.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    /// Apply `key=value` overrides using TOML dotted paths.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_canonical_toml()?)
            .map_err(|e| Error::Config(format!("config reparse: {e}")))?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_path(&mut doc, key.trim(), value.trim())?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(format!("config: {e}")))?;
        Self::from_toml(&text)
    }

    /// Environment seed override, when present.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var(SEED_ENV_VAR) {
            self.seed = value
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={value} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.synth.validate()?;
        if self.sweep_lo <= 0.0 || self.sweep_hi <= self.sweep_lo || self.sweep_step <= 0.0 {
            return Err(Error::Config("threshold sweep bounds invalid".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            codec: ShapeCodecConfig {
                resolution: self.voxel_resolution,
                channels: self.codec_channels,
                descriptor_dim: self.descriptor_dim,
            },
            matcher: MatcherConfig {
                layers: self.layers,
                heads: self.heads,
                feature_dim: self.feature_dim,
                ffn_dim: self.ffn_dim,
                dropout: self.dropout,
                match_threshold: self.match_threshold,
            },
            positional_mode: self.positional_mode,
            ablation: self.ablation,
            keypoint_scale: self.keypoint_scale,
            filters: FilterConfig {
                outlier_radius: self.outlier_radius,
                outlier_min_neighbors: self.outlier_min_neighbors,
                median_k_sigma: self.median_k_sigma,
            },
        })
    }

    pub fn histogram(&self) -> HistogramConfig {
        HistogramConfig {
            dist_bins: self.hist_dist_bins,
            dist_max: self.hist_dist_max,
            azim_bins: self.hist_azim_bins,
            elev_bins: self.hist_elev_bins,
        }
    }

    pub fn desc_weights(&self) -> DescAssocWeights {
        DescAssocWeights {
            histogram: self.desc_weight_histogram,
            centroid: self.desc_weight_centroid,
        }
    }
}

/// Parse a raw override value as a TOML value; bare words fall back to
/// strings so `ablation=no_pos` works without quoting.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(doc: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut table = doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            if !table.contains_key(part) {
                return Err(Error::Config(format!("unknown config key: {path}")));
            }
            table.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        table = table
            .get_mut(part)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown config table: {part} in {path}")))?;
    }
    Err(Error::Config(format!("empty config key: {path}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_canonical_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn paper_defaults_present() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pretrain_epochs, 200);
        assert_eq!(cfg.pretrain_batch, 64);
        assert_eq!(cfg.pretrain_lr, 1e-3);
        assert_eq!(cfg.pretrain_decay_every, 50);
        assert_eq!(cfg.train_epochs, 200);
        assert_eq!(cfg.warmup_epochs, 10);
        assert_eq!(cfg.train_lr, 1e-4);
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.voxel_resolution, 64);
    }

    #[test]
    fn overrides_change_nested_keys() {
        let cfg = RunConfig::default();
        let out = cfg
            .apply_overrides(&[
                "feature_dim=64".to_string(),
                "heads=4".to_string(),
                "synth.drop_probability=0.1".to_string(),
                "ablation=\"no_pos\"".to_string(),
            ])
            .unwrap();
        assert_eq!(out.feature_dim, 64);
        assert_eq!(out.heads, 4);
        assert_eq!(out.synth.drop_probability, 0.1);
        assert_eq!(out.ablation, Ablation::NoPos);
    }

    #[test]
    fn unknown_key_rejected() {
        let cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["no_such_key=1".into()]).is_err());
        assert!(RunConfig::from_toml("bogus_key = 3\n").is_err());
    }

    #[test]
    fn env_seed_override() {
        let mut cfg = RunConfig::default();
        std::env::set_var(SEED_ENV_VAR, "123");
        cfg.apply_env_seed().unwrap();
        std::env::remove_var(SEED_ENV_VAR);
        assert_eq!(cfg.seed, 123);
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["feature_dim=250".into()]).is_err()); // not divisible by heads
        assert!(cfg.apply_overrides(&["dropout=1.5".into()]).is_err());
    }
}
