//! Training loops: shape-codec pre-training (Adam + step decay) and full
//! matcher training (Adam + linear warmup/decay, per-layer supervision,
//! best-validation selection, and the post-training threshold sweep).

use rand::Rng;

use crate::autodiff::params::{GradStore, Optimizer, ParamBinding, ParamStore};
use crate::autodiff::{lr_schedule, AdamConfig, ScheduleConfig, ScheduleKind, Tape};
use crate::config::RunConfig;
use crate::dataset::LabeledClusterPair;
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, EvalReport};
use crate::geometry::{normalize_cloud, voxelize, PointCloud};
use crate::matcher::{extract_matches, match_loss, ForwardCtx};
use crate::pipeline::{prepare_pair, Ablation, Model};
use crate::shape_codec::{decoder_loss, OccupancyPyramid, PruneMode, ShapeCodec};
use crate::synth::{augment_cluster, augment_shape, cluster_rng};

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = cluster_rng(seed ^ 0xA5A5, epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub train_losses: Vec<f32>,
    pub val_losses: Vec<f32>,
    pub best_epoch: usize,
}

/// Pre-train the shape codec on fruitlet clouds with shape augmentations.
/// Every tenth cloud is held out for validation; the best-validation
/// parameters are returned. The decoder parameters ride along in the store
/// but are dropped by the matcher, which binds only encoder tensors.
pub fn pretrain_shape_codec(
    cfg: &RunConfig,
    clouds: &[PointCloud],
) -> Result<(ParamStore, PretrainReport)> {
    if clouds.is_empty() {
        return Err(Error::Config("pretraining requires a non-empty dataset".into()));
    }
    let model_cfg = cfg.model()?;
    let codec = ShapeCodec::new(model_cfg.codec.clone())?;
    let mut params = codec.init_params(cfg.seed ^ 0x51);
    let mut opt = Optimizer::new(AdamConfig::default());

    let val_idx: Vec<usize> = (0..clouds.len()).filter(|i| i % 10 == 9).collect();
    let train_idx: Vec<usize> = (0..clouds.len()).filter(|i| i % 10 != 9).collect();
    let train_idx = if train_idx.is_empty() { vec![0] } else { train_idx };

    let schedule = ScheduleConfig {
        base_lr: cfg.pretrain_lr,
        decay_every: cfg.pretrain_decay_every,
        decay_factor: cfg.pretrain_decay_factor,
        warmup: 0,
        total: 0,
    };

    let grid_of = |cloud: &PointCloud| -> Result<_> {
        let (normalized, _) = normalize_cloud(cloud)?;
        voxelize(&normalized, codec.cfg.resolution)
    };

    let sample_loss = |params: &ParamStore,
                       cloud: &PointCloud,
                       trainable: bool,
                       grads: Option<(&mut GradStore, f32)>|
     -> Result<Option<f32>> {
        let grid = match grid_of(cloud) {
            Ok(g) => g,
            Err(_) => return Ok(None), // degenerate augmentation draw
        };
        let pyramid = OccupancyPyramid::from_grid(&grid);
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind =
            crate::autodiff::params::Bind::new(params, &mut binding, trainable, "");
        let descriptor = codec.encode(&mut tape, &mut bind, &grid)?;
        let probs =
            codec.decode(&mut tape, &mut bind, descriptor, PruneMode::TeacherForced(&pyramid))?;
        let loss = decoder_loss(&mut tape, &probs, &pyramid)?;
        let value = tape.value(loss);
        if !value.is_finite() {
            return Err(Error::Numeric("pretraining loss is not finite".into()));
        }
        if let Some((grads, scale)) = grads {
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled)?;
            binding.harvest(&tape, grads);
        }
        Ok(Some(value))
    };

    let mut best_params = params.clone();
    let mut best_val = f32::INFINITY;
    let mut best_epoch = 0usize;
    let mut report = PretrainReport {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
    };

    for epoch in 0..cfg.pretrain_epochs {
        let lr = lr_schedule(ScheduleKind::StepDecay, epoch as u64, &schedule);
        let order = shuffled_indices(train_idx.len(), cfg.seed ^ 0x77, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.pretrain_batch.max(1)) {
            let mut grads = GradStore::new();
            let mut contributed = 0usize;
            for &oi in chunk {
                let idx = train_idx[oi];
                let mut rng =
                    cluster_rng(cfg.seed ^ 0x88, (epoch as u64) << 32 | idx as u64);
                let augmented = augment_shape(&clouds[idx], &cfg.augment_shape, &mut rng);
                let scale = 1.0 / chunk.len() as f32;
                if let Some(v) =
                    sample_loss(&params, &augmented, true, Some((&mut grads, scale)))?
                {
                    epoch_loss += v as f64;
                    seen += 1;
                    contributed += 1;
                }
            }
            if contributed > 0 {
                opt.step(&mut params, &grads, lr);
            }
        }
        report.train_losses.push(if seen > 0 { (epoch_loss / seen as f64) as f32 } else { 0.0 });

        let mut val_loss = 0.0f64;
        let mut val_seen = 0usize;
        for &idx in &val_idx {
            if let Some(v) = sample_loss(&params, &clouds[idx], false, None)? {
                val_loss += v as f64;
                val_seen += 1;
            }
        }
        let val = if val_seen > 0 {
            (val_loss / val_seen as f64) as f32
        } else {
            *report.train_losses.last().unwrap()
        };
        report.val_losses.push(val);
        if val < best_val {
            best_val = val;
            best_params = params.clone();
            best_epoch = epoch;
        }
    }
    report.best_epoch = best_epoch;
    Ok((best_params, report))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f32>,
    pub val_f1: Vec<f64>,
    pub best_epoch: usize,
    pub threshold: f32,
    pub threshold_curve: Vec<(f32, f64)>,
}

/// Evaluate a frozen model over labeled pairs.
pub fn evaluate_model(model: &Model, pairs: &[LabeledClusterPair]) -> Result<EvalReport> {
    evaluate_with(pairs, |pair| model.predict(pair))
}

/// Sweep the match threshold on cached assignment matrices; returns the
/// best threshold (highest macro F1, lowest tie) and the full curve.
pub fn sweep_threshold(
    model: &Model,
    pairs: &[LabeledClusterPair],
    lo: f32,
    hi: f32,
    step: f32,
) -> Result<(f32, Vec<(f32, f64)>)> {
    let mut cached = Vec::new();
    for pair in pairs {
        if pair.gt.is_none() {
            continue;
        }
        let (p, m, n) = model.assignment_matrix(pair)?;
        cached.push((p, m, n, pair.gt.clone().unwrap()));
    }
    if cached.is_empty() {
        return Err(Error::Config("threshold sweep needs labeled pairs".into()));
    }
    let mut curve = Vec::new();
    let mut best = (lo, -1.0f64);
    let steps = ((hi - lo) / step).round() as usize;
    for k in 0..=steps {
        let tau = lo + step * k as f32;
        if tau > hi + 1e-9 {
            break;
        }
        let mut f1_sum = 0.0f64;
        for (p, m, n, gt) in &cached {
            let set = extract_matches(p, *m, *n, tau);
            let (_, _, _, _, _, f1) = crate::eval::score_pair(&set.matches, gt);
            f1_sum += f1;
        }
        let macro_f1 = f1_sum / cached.len() as f64;
        curve.push((tau, macro_f1));
        if macro_f1 > best.1 {
            best = (tau, macro_f1);
        }
    }
    Ok((best.0, curve))
}

/// Full matcher training: joint fine-tuning of the shape encoder (from
/// pre-trained weights unless ablated), positional MLP, fusion, transformer
/// layers, and per-layer heads. Returns the best-validation-F1 model with
/// its validation-tuned threshold.
pub fn train_matcher(
    cfg: &RunConfig,
    train_pairs: &[LabeledClusterPair],
    val_pairs: &[LabeledClusterPair],
    pretrained_codec: Option<&ParamStore>,
) -> Result<(Model, TrainReport)> {
    if train_pairs.is_empty() {
        return Err(Error::Config("matcher training requires a non-empty dataset".into()));
    }
    if train_pairs.iter().any(|p| p.gt.is_none()) {
        return Err(Error::Config("matcher training requires ground-truth matches".into()));
    }
    let model_cfg = cfg.model()?;
    let mut model = Model::init(model_cfg, cfg.seed)?;
    if model.cfg.ablation.uses_shape() && model.cfg.ablation != Ablation::NoPretrain {
        if let Some(codec_params) = pretrained_codec {
            model.load_pretrained_codec(codec_params);
        }
    }
    let mut opt = Optimizer::new(AdamConfig::default());

    let batch = cfg.train_batch.max(1);
    let steps_per_epoch = train_pairs.len().div_ceil(batch) as u64;
    let schedule = ScheduleConfig {
        base_lr: cfg.train_lr,
        decay_every: 0,
        decay_factor: 0.0,
        warmup: cfg.warmup_epochs as u64 * steps_per_epoch,
        total: cfg.train_epochs as u64 * steps_per_epoch,
    };

    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        val_f1: Vec::new(),
        best_epoch: 0,
        threshold: cfg.match_threshold,
        threshold_curve: Vec::new(),
    };
    let mut best_params = model.params.clone();
    let mut best_f1 = -1.0f64;
    let mut best_epoch = 0usize;
    let mut step = 0u64;

    for epoch in 0..cfg.train_epochs {
        let order = shuffled_indices(train_pairs.len(), cfg.seed ^ 0x99, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            step += 1;
            let lr = lr_schedule(ScheduleKind::WarmupLinear, step, &schedule);
            let mut grads = GradStore::new();
            for &idx in chunk {
                let pair = &train_pairs[idx];
                let mut rng =
                    cluster_rng(cfg.seed ^ 0xAA, (epoch as u64) << 32 | idx as u64);
                let augmented = augment_cluster(pair, &cfg.augment_cluster, &mut rng);
                let prepared = prepare_pair(&augmented, &model.cfg)?;
                let gt = prepared.gt.clone().expect("training pairs carry ground truth");

                let mut tape = Tape::new();
                let mut binding = ParamBinding::new();
                let ctx = ForwardCtx::train(cfg.seed, step, idx as u64);
                let out = model.forward(&mut tape, &mut binding, &prepared, &ctx, true)?;
                let loss = match_loss(&mut tape, &out.per_layer, &gt)?;
                let value = tape.value(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "match loss diverged at epoch {epoch} (pair {idx})"
                    )));
                }
                epoch_loss += value as f64;
                seen += 1;
                let scaled = tape.scale(loss, 1.0 / chunk.len() as f32);
                tape.backward(scaled)?;
                binding.harvest(&tape, &mut grads);
            }
            if lr > 0.0 {
                opt.step(&mut model.params, &grads, lr);
            }
        }
        report
            .epoch_losses
            .push(if seen > 0 { (epoch_loss / seen as f64) as f32 } else { 0.0 });

        let val_report = evaluate_model(&model, val_pairs)?;
        report.val_f1.push(val_report.macro_all.f1);
        if val_report.macro_all.f1 > best_f1 {
            best_f1 = val_report.macro_all.f1;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
    }

    model.params = best_params;
    report.best_epoch = best_epoch;

    if !val_pairs.is_empty() {
        let (tau, curve) =
            sweep_threshold(&model, val_pairs, cfg.sweep_lo, cfg.sweep_hi, cfg.sweep_step)?;
        model.cfg.matcher.match_threshold = tau;
        report.threshold = tau;
        report.threshold_curve = curve;
    }
    Ok((model, report))
}

/// Collect every fruitlet cloud of the training pairs for pre-training.
pub fn pretraining_clouds(pairs: &[LabeledClusterPair]) -> Vec<PointCloud> {
    pairs
        .iter()
        .flat_map(|p| p.obs_t.clouds.iter().chain(p.obs_t1.clouds.iter()).cloned())
        .collect()
}
