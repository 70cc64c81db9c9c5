//! Synthetic cross-day cluster generator and training augmentations.
//!
//! Fruitlets are superellipsoid surface samples placed around a cluster
//! center. The second day grows each fruitlet by a per-day factor, drifts
//! its eccentricity, displaces it by a bounded random walk, optionally drops
//! it (fruit drop at t+1, missed detection at t), crops points behind a
//! random half-space, and rigidly transforms the whole cluster to mimic a
//! camera-pose change. Exact correspondences are recorded as ground truth.

use nalgebra::{Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClusterObservation, LabeledClusterPair};
use crate::error::{Error, Result};
use crate::geometry::{compute_pca, PointCloud};
use crate::matcher::CorrespondenceSet;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub fruitlets_min: usize,
    pub fruitlets_max: usize,
    /// Initial fruit diameter range, millimeters.
    pub diameter_min_mm: f64,
    pub diameter_max_mm: f64,
    /// Per-day growth factor range.
    pub growth_min: f64,
    pub growth_max: f64,
    /// Per-day probability of fruit drop (also drives missed detections).
    pub drop_probability: f64,
    /// Occlusion crop fraction range at t+1.
    pub crop_min: f64,
    pub crop_max: f64,
    pub day_gaps: Vec<i64>,
    pub day_gap_weights: Vec<f64>,
    pub points_per_fruitlet: usize,
    /// Cluster radius as a multiple of the mean fruit diameter.
    pub cluster_radius_factor: f64,
    /// Per-day center displacement cap as a multiple of the fruit radius.
    pub displacement_per_day: f64,
    /// Whole-cluster pose change cap, degrees.
    pub cluster_rotation_deg: f64,
    pub eccentricity_min: f64,
    pub eccentricity_max: f64,
    /// Additive point noise (stereo reconstruction), meters.
    pub surface_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fruitlets_min: 5,
            fruitlets_max: 6,
            diameter_min_mm: 5.0,
            diameter_max_mm: 7.0,
            growth_min: 1.10,
            growth_max: 1.19,
            drop_probability: 0.05,
            crop_min: 0.0,
            crop_max: 0.4,
            day_gaps: vec![1, 2, 3, 4, 5, 7],
            day_gap_weights: vec![0.19, 0.38, 0.18, 0.11, 0.08, 0.06],
            points_per_fruitlet: 400,
            cluster_radius_factor: 2.2,
            displacement_per_day: 1.0,
            cluster_rotation_deg: 30.0,
            eccentricity_min: 1.1,
            eccentricity_max: 1.4,
            surface_noise: 0.15e-3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fruitlets_min == 0 || self.fruitlets_min > self.fruitlets_max {
            return Err(Error::Config("fruitlets_min..fruitlets_max range invalid".into()));
        }
        if self.day_gaps.len() != self.day_gap_weights.len() || self.day_gaps.is_empty() {
            return Err(Error::Config("day_gaps and day_gap_weights must align".into()));
        }
        let sum: f64 = self.day_gap_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("day_gap_weights sum to {sum}, expected 1")));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Config("drop_probability outside [0, 1]".into()));
        }
        if self.crop_min < 0.0 || self.crop_max > 0.95 || self.crop_min > self.crop_max {
            return Err(Error::Config("crop fraction range invalid".into()));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-cluster RNG, independent of generation order.
pub fn cluster_rng(seed: u64, cluster_index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix(seed ^ cluster_index.wrapping_mul(0x9e3779b97f4a7c15)))
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Rotation3<f64> {
    if max_angle <= 0.0 {
        return Rotation3::identity();
    }
    let axis = Unit::new_normalize(unit_vector(rng));
    let angle = rng.gen::<f64>() * max_angle;
    Rotation3::from_axis_angle(&axis, angle)
}

/// Uniformly distributed rotation (random unit quaternion).
fn uniform_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
    ));
    q.to_rotation_matrix()
}

/// One fruitlet's generative state.
#[derive(Debug, Clone)]
struct FruitletGen {
    center: Vector3<f64>,
    radius: f64,
    eccentricity: f64,
    exponent: f64,
    aspect_z: f64,
    orientation: Rotation3<f64>,
}

impl FruitletGen {
    /// Superellipsoid surface samples: directions scaled onto the implicit
    /// surface |x/a|^r + |y/b|^r + |z/c|^r = 1.
    fn sample_surface(&self, n: usize, noise: f64, rng: &mut impl Rng) -> PointCloud {
        let (a, b, c) =
            (self.radius * self.eccentricity, self.radius, self.radius * self.aspect_z);
        let r = self.exponent;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let dir = unit_vector(rng);
            let denom = (dir.x / a).abs().powf(r)
                + (dir.y / b).abs().powf(r)
                + (dir.z / c).abs().powf(r);
            let t = denom.powf(-1.0 / r);
            let local = dir * t;
            let mut world = self.orientation * local + self.center;
            if noise > 0.0 {
                world += Vector3::new(
                    normal.sample(rng) * noise,
                    normal.sample(rng) * noise,
                    normal.sample(rng) * noise,
                );
            }
            pts.push([world.x, world.y, world.z]);
        }
        PointCloud::new(pts)
    }
}

/// Remove the fraction of points furthest behind a random half-space
/// (smallest projections onto a random direction are dropped).
fn crop_half_space(cloud: &PointCloud, fraction: f64, rng: &mut impl Rng) -> PointCloud {
    if fraction <= 0.0 || cloud.len() < 8 {
        return cloud.clone();
    }
    let dir = unit_vector(rng);
    let centroid = cloud.centroid().unwrap();
    let mut proj: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (dir.dot(&(Vector3::new(p[0], p[1], p[2]) - centroid)), i))
        .collect();
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let drop = ((cloud.len() as f64) * fraction).floor() as usize;
    let mut keep: Vec<usize> = proj[drop..].iter().map(|&(_, i)| i).collect();
    keep.sort_unstable();
    PointCloud::new(keep.into_iter().map(|i| cloud.points[i]).collect())
}

fn cloud_is_usable(cloud: &PointCloud) -> bool {
    cloud.len() >= 4 && compute_pca(cloud).is_ok()
}

/// Generate one labeled cross-day pair. Either side may end up empty when
/// every fruitlet is dropped; dataset emission regenerates such clusters.
pub fn generate_cluster_pair(
    cfg: &SynthConfig,
    cluster_id: &str,
    rng: &mut ChaCha12Rng,
) -> Result<LabeledClusterPair> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.fruitlets_min..=cfg.fruitlets_max);
    let mean_diameter = (cfg.diameter_min_mm + cfg.diameter_max_mm) * 0.5e-3;
    let cluster_radius = cfg.cluster_radius_factor * mean_diameter;

    // Fruitlet centers: random directions at moderated distances, with a
    // minimum-separation retry so fruit do not coincide.
    let mut centers: Vec<Vector3<f64>> = Vec::new();
    let min_sep = 1.1 * mean_diameter;
    for _ in 0..n {
        let mut best: Option<Vector3<f64>> = None;
        for _attempt in 0..64 {
            let c = unit_vector(rng) * cluster_radius * (0.6 + 0.7 * rng.gen::<f64>());
            if centers.iter().all(|o| (o - c).norm() >= min_sep) {
                best = Some(c);
                break;
            }
            if best.is_none() {
                best = Some(c);
            }
        }
        centers.push(best.unwrap());
    }

    let mut fruitlets: Vec<FruitletGen> = Vec::with_capacity(n);
    for center in centers {
        let radius = rng.gen_range(cfg.diameter_min_mm..=cfg.diameter_max_mm) * 0.5e-3;
        fruitlets.push(FruitletGen {
            center,
            radius,
            eccentricity: rng.gen_range(cfg.eccentricity_min..=cfg.eccentricity_max),
            exponent: rng.gen_range(2.0..2.6),
            aspect_z: rng.gen_range(0.9..1.1),
            orientation: uniform_rotation(rng),
        });
    }

    let gap = {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = *cfg.day_gaps.last().unwrap();
        for (g, w) in cfg.day_gaps.iter().zip(&cfg.day_gap_weights) {
            acc += w;
            if u < acc {
                chosen = *g;
                break;
            }
        }
        chosen
    };

    // Day t clouds: full surfaces.
    let mut clouds_t: Vec<Option<PointCloud>> = Vec::with_capacity(n);
    for f in &fruitlets {
        let mut cloud = f.sample_surface(cfg.points_per_fruitlet, cfg.surface_noise, rng);
        for _ in 0..4 {
            if cloud_is_usable(&cloud) {
                break;
            }
            cloud = f.sample_surface(cfg.points_per_fruitlet, cfg.surface_noise, rng);
        }
        clouds_t.push(Some(cloud));
    }

    // Day t+1: grow, drift, displace, maybe drop, crop, then a whole-cluster
    // pose change.
    let survive_t1 = (1.0 - cfg.drop_probability).powi(gap as i32);
    let cluster_pose = random_rotation(rng, cfg.cluster_rotation_deg.to_radians());
    let mut clouds_t1: Vec<Option<PointCloud>> = Vec::with_capacity(n);
    for (k, f) in fruitlets.iter().enumerate() {
        // Draw the full evolution before any drop decision so the stream of
        // random values per fruitlet does not depend on other fruitlets.
        let mut grown = f.clone();
        let mut displacement = Vector3::zeros();
        for _ in 0..gap {
            grown.radius *= rng.gen_range(cfg.growth_min..=cfg.growth_max);
            displacement +=
                unit_vector(rng) * (rng.gen::<f64>() * cfg.displacement_per_day * grown.radius);
        }
        grown.center += displacement;
        grown.eccentricity = (grown.eccentricity
            + rng.gen_range(-0.02..0.02) * gap as f64)
            .clamp(1.05, 1.5);
        grown.exponent = (grown.exponent + rng.gen_range(-0.05..0.05) * gap as f64).clamp(1.8, 2.8);
        grown.orientation = random_rotation(rng, 10f64.to_radians()) * grown.orientation;

        let dropped_t1 = rng.gen::<f64>() >= survive_t1;
        let missed_t = !dropped_t1 && rng.gen::<f64>() < cfg.drop_probability;
        if missed_t {
            clouds_t[k] = None;
        }
        if dropped_t1 {
            clouds_t1.push(None);
            continue;
        }
        let crop = rng.gen_range(cfg.crop_min..=cfg.crop_max);
        let mut cloud = grown.sample_surface(cfg.points_per_fruitlet, cfg.surface_noise, rng);
        cloud = crop_half_space(&cloud, crop, rng);
        for _ in 0..4 {
            if cloud_is_usable(&cloud) {
                break;
            }
            cloud = crop_half_space(
                &grown.sample_surface(cfg.points_per_fruitlet, cfg.surface_noise, rng),
                crop,
                rng,
            );
        }
        let posed = PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| {
                    let q = cluster_pose * Vector3::new(p[0], p[1], p[2]);
                    [q.x, q.y, q.z]
                })
                .collect(),
        );
        clouds_t1.push(Some(posed));
    }

    // Compact each day and record index correspondences.
    let mut ids_t = Vec::new();
    let mut out_t = Vec::new();
    let mut idx_t = vec![None; n];
    for (k, c) in clouds_t.iter().enumerate() {
        if let Some(c) = c {
            idx_t[k] = Some(out_t.len());
            ids_t.push(format!("f{k}"));
            out_t.push(c.clone());
        }
    }
    let mut ids_t1 = Vec::new();
    let mut out_t1 = Vec::new();
    let mut idx_t1 = vec![None; n];
    for (k, c) in clouds_t1.iter().enumerate() {
        if let Some(c) = c {
            idx_t1[k] = Some(out_t1.len());
            ids_t1.push(format!("f{k}"));
            out_t1.push(c.clone());
        }
    }
    let matches: Vec<(usize, usize)> = (0..n)
        .filter_map(|k| match (idx_t[k], idx_t1[k]) {
            (Some(i), Some(j)) => Some((i, j)),
            _ => None,
        })
        .collect();
    let gt = CorrespondenceSet::new(matches, out_t.len(), out_t1.len())?;

    Ok(LabeledClusterPair {
        cluster_id: cluster_id.to_string(),
        obs_t: ClusterObservation {
            cluster_id: cluster_id.to_string(),
            day: 0,
            fruitlet_ids: ids_t,
            clouds: out_t,
        },
        obs_t1: ClusterObservation {
            cluster_id: cluster_id.to_string(),
            day: gap,
            fruitlet_ids: ids_t1,
            clouds: out_t1,
        },
        day_gap: gap,
        gt: Some(gt),
    })
}

/// Generate a dataset of labeled pairs, regenerating clusters whose
/// observations come out empty on either day.
pub fn generate_dataset(
    cfg: &SynthConfig,
    seed: u64,
    count: usize,
    id_prefix: &str,
) -> Result<Vec<LabeledClusterPair>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut pair = None;
        for retry in 0..16u64 {
            let mut rng = cluster_rng(seed, (i as u64) | (retry << 48));
            let cand = generate_cluster_pair(cfg, &format!("{id_prefix}{i}"), &mut rng)?;
            if !cand.obs_t.clouds.is_empty() && !cand.obs_t1.clouds.is_empty() {
                pair = Some(cand);
                break;
            }
        }
        out.push(pair.ok_or_else(|| {
            Error::Numeric("synthetic cluster kept generating empty observations".into())
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

/// Shape pre-training augmentation: random SO(3) rotation, axis flips, a
/// smooth elastic displacement field, and Gaussian jitter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentShapeConfig {
    pub rotate: bool,
    pub flip: bool,
    /// Elastic displacement amplitude, meters.
    pub elastic_sigma: f64,
    /// Coarse grid side for the displacement field.
    pub elastic_grid: usize,
    /// Gaussian jitter sigma, meters.
    pub jitter_sigma: f64,
}

impl Default for AugmentShapeConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            flip: true,
            elastic_sigma: 0.3e-3,
            elastic_grid: 4,
            jitter_sigma: 0.3e-3,
        }
    }
}

/// Trilinearly interpolated random displacement field over the cloud bounds.
fn elastic_deform(cloud: &PointCloud, sigma: f64, grid: usize, rng: &mut impl Rng) -> PointCloud {
    if sigma <= 0.0 || cloud.is_empty() {
        return cloud.clone();
    }
    let g = grid.max(2);
    let normal = Normal::new(0.0, sigma).unwrap();
    let field: Vec<Vector3<f64>> = (0..g * g * g)
        .map(|_| Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let span: Vec<f64> = (0..3).map(|c| (hi[c] - lo[c]).max(1e-12)).collect();

    let points = cloud
        .points
        .iter()
        .map(|p| {
            let u: Vec<f64> = (0..3)
                .map(|c| ((p[c] - lo[c]) / span[c]).clamp(0.0, 1.0) * (g - 1) as f64)
                .collect();
            let base: Vec<usize> = u.iter().map(|&v| (v.floor() as usize).min(g - 2)).collect();
            let frac: Vec<f64> = (0..3).map(|c| u[c] - base[c] as f64).collect();
            let mut disp = Vector3::zeros();
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                            * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                            * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                        let idx =
                            ((base[2] + dz) * g + base[1] + dy) * g + base[0] + dx;
                        disp += field[idx] * w;
                    }
                }
            }
            [p[0] + disp.x, p[1] + disp.y, p[2] + disp.z]
        })
        .collect();
    PointCloud::new(points)
}

fn jitter(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> PointCloud {
    if sigma <= 0.0 {
        return cloud.clone();
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                [
                    p[0] + normal.sample(rng),
                    p[1] + normal.sample(rng),
                    p[2] + normal.sample(rng),
                ]
            })
            .collect(),
    )
}

pub fn augment_shape(
    cloud: &PointCloud,
    cfg: &AugmentShapeConfig,
    rng: &mut ChaCha12Rng,
) -> PointCloud {
    let mut out = cloud.clone();
    let centroid = match out.centroid() {
        Some(c) => c,
        None => return out,
    };
    if cfg.rotate {
        let rot = uniform_rotation(rng);
        out = PointCloud::new(
            out.points
                .iter()
                .map(|p| {
                    let q = rot * (Vector3::new(p[0], p[1], p[2]) - centroid) + centroid;
                    [q.x, q.y, q.z]
                })
                .collect(),
        );
    }
    if cfg.flip {
        let flips = [rng.gen::<bool>(), rng.gen::<bool>(), rng.gen::<bool>()];
        out = PointCloud::new(
            out.points
                .iter()
                .map(|p| {
                    let mut q = *p;
                    for c in 0..3 {
                        if flips[c] {
                            q[c] = 2.0 * centroid[c] - q[c];
                        }
                    }
                    q
                })
                .collect(),
        );
    }
    out = elastic_deform(&out, cfg.elastic_sigma, cfg.elastic_grid, rng);
    jitter(&out, cfg.jitter_sigma, rng)
}

/// Matcher-training augmentation applied to both observations of a pair:
/// cluster-level scale/rotation, per-fruitlet scale/rotation/shift, jitter,
/// and random point dropout. Ground-truth labels are untouched.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentClusterConfig {
    pub cluster_scale: f64,
    pub cluster_rotation_deg: f64,
    pub fruitlet_scale: f64,
    pub fruitlet_rotation_deg: f64,
    /// Per-fruitlet positional shift cap, meters.
    pub shift_max: f64,
    pub jitter_sigma: f64,
    /// Upper bound of the per-fruitlet point dropout fraction.
    pub max_dropout: f64,
}

impl Default for AugmentClusterConfig {
    fn default() -> Self {
        Self {
            cluster_scale: 0.10,
            cluster_rotation_deg: 10.0,
            fruitlet_scale: 0.10,
            fruitlet_rotation_deg: 10.0,
            shift_max: 2e-3,
            jitter_sigma: 0.3e-3,
            max_dropout: 0.3,
        }
    }
}

fn augment_observation(
    obs: &ClusterObservation,
    cfg: &AugmentClusterConfig,
    rng: &mut ChaCha12Rng,
) -> ClusterObservation {
    let union: Vec<[f64; 3]> =
        obs.clouds.iter().flat_map(|c| c.points.iter().copied()).collect();
    if union.is_empty() {
        return obs.clone();
    }
    let union_centroid = PointCloud::new(union).centroid().unwrap();
    let cluster_rot = random_rotation(rng, cfg.cluster_rotation_deg.to_radians());
    let cluster_scale = 1.0 + cfg.cluster_scale * (2.0 * rng.gen::<f64>() - 1.0);

    let clouds = obs
        .clouds
        .iter()
        .map(|cloud| {
            let centroid = cloud.centroid().unwrap();
            let fruit_rot = random_rotation(rng, cfg.fruitlet_rotation_deg.to_radians());
            let fruit_scale = 1.0 + cfg.fruitlet_scale * (2.0 * rng.gen::<f64>() - 1.0);
            let shift = if cfg.shift_max > 0.0 {
                unit_vector(rng) * (rng.gen::<f64>() * cfg.shift_max)
            } else {
                Vector3::zeros()
            };
            let dropout = if cfg.max_dropout > 0.0 {
                rng.gen::<f64>() * cfg.max_dropout
            } else {
                0.0
            };

            let mut pts = Vec::with_capacity(cloud.len());
            for p in &cloud.points {
                let v = Vector3::new(p[0], p[1], p[2]);
                // Per-fruitlet transform about its own centroid.
                let local = fruit_rot * ((v - centroid) * fruit_scale) + centroid + shift;
                // Cluster transform about the union centroid.
                let global =
                    cluster_rot * ((local - union_centroid) * cluster_scale) + union_centroid;
                pts.push([global.x, global.y, global.z]);
            }
            let transformed = jitter(&PointCloud::new(pts), cfg.jitter_sigma, rng);

            if dropout > 0.0 && transformed.len() > 8 {
                let kept: Vec<[f64; 3]> = transformed
                    .points
                    .iter()
                    .filter(|_| rng.gen::<f64>() >= dropout)
                    .copied()
                    .collect();
                if kept.len() >= 4 {
                    PointCloud::new(kept)
                } else {
                    transformed
                }
            } else {
                transformed
            }
        })
        .collect();
    ClusterObservation {
        cluster_id: obs.cluster_id.clone(),
        day: obs.day,
        fruitlet_ids: obs.fruitlet_ids.clone(),
        clouds,
    }
}

pub fn augment_cluster(
    pair: &LabeledClusterPair,
    cfg: &AugmentClusterConfig,
    rng: &mut ChaCha12Rng,
) -> LabeledClusterPair {
    LabeledClusterPair {
        cluster_id: pair.cluster_id.clone(),
        obs_t: augment_observation(&pair.obs_t, cfg, rng),
        obs_t1: augment_observation(&pair.obs_t1, cfg, rng),
        day_gap: pair.day_gap,
        gt: pair.gt.clone(),
    }
}
