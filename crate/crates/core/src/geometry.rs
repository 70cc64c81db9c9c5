//! Point-cloud containers, the multi-stage filtration chain, PCA,
//! normalization, and voxelization.
//!
//! All geometry runs in f64; the learned stack downstream is f32. Every
//! operation here is a pure function of its inputs.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

/// Unordered 3D points in meters. Coordinates must stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let mut sum = Vector3::zeros();
        for p in &self.points {
            sum += Vector3::new(p[0], p[1], p[2]);
        }
        Some(sum / self.points.len() as f64)
    }
}

/// Depth image restricted to a segmentation mask. Depth is defined exactly
/// where the mask is true; the grid supplies the pixel neighborhoods the
/// bilateral and discontinuity filters need.
#[derive(Debug, Clone)]
pub struct OrganizedDepth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl OrganizedDepth {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry("organized depth must have width, height > 0".into()));
        }
        if depth.len() != width * height || mask.len() != width * height {
            return Err(Error::Geometry(format!(
                "depth/mask length {}/{} does not match {}x{}",
                depth.len(),
                mask.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, depth, mask })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// PCA frame of a cloud: mean, orthonormal axes as matrix columns ordered by
/// descending eigenvalue, and the eigenvalues themselves.
///
/// Sign canon: each column is flipped so its largest-magnitude entry is
/// positive (ties resolved by the first such entry). Eigenvalue ties keep the
/// pre-sort column order.
#[derive(Debug, Clone)]
pub struct PcaFrame {
    pub mean: Vector3<f64>,
    pub axes: Matrix3<f64>,
    pub eigenvalues: [f64; 3],
}

impl PcaFrame {
    /// Project a point into PCA coordinates.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let v = Vector3::new(p[0], p[1], p[2]) - self.mean;
        let q = self.axes.transpose() * v;
        [q.x, q.y, q.z]
    }

    /// Map PCA coordinates back to the original frame.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let v = self.mean + self.axes * Vector3::new(q[0], q[1], q[2]);
        [v.x, v.y, v.z]
    }
}

/// Dense occupancy grid over normalized space `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub occupancy: Vec<bool>,
    pub voxel_size: f64,
}

impl VoxelGrid {
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

/// Smooths masked depth values with a spatial/range-weighted average over the
/// masked neighborhood. The mask itself is unchanged.
pub fn bilateral_filter(
    depth: &OrganizedDepth,
    sigma_space: f64,
    sigma_range: f64,
) -> Result<OrganizedDepth> {
    if sigma_space <= 0.0 || sigma_range <= 0.0 {
        return Err(Error::Geometry("bilateral filter sigmas must be positive".into()));
    }
    let mut out = depth.clone();
    if !depth.mask.iter().any(|&m| m) {
        return Ok(out);
    }
    // Truncate the spatial kernel at 3 sigma.
    let radius = (3.0 * sigma_space).ceil() as isize;
    let inv_2ss = 1.0 / (2.0 * sigma_space * sigma_space);
    let inv_2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    for y in 0..depth.height as isize {
        for x in 0..depth.width as isize {
            let i = depth.idx(x as usize, y as usize);
            if !depth.mask[i] {
                continue;
            }
            let center = depth.depth[i];
            let mut wsum = 0.0;
            let mut vsum = 0.0;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= depth.width as isize || ny >= depth.height as isize
                    {
                        continue;
                    }
                    let j = depth.idx(nx as usize, ny as usize);
                    if !depth.mask[j] {
                        continue;
                    }
                    let d = depth.depth[j];
                    let w = (-((dx * dx + dy * dy) as f64) * inv_2ss).exp()
                        * (-(d - center) * (d - center) * inv_2sr).exp();
                    wsum += w;
                    vsum += w * d;
                }
            }
            out.depth[i] = vsum / wsum;
        }
    }
    Ok(out)
}

/// Removes masked pixels whose depth differs from any masked 8-neighbor by
/// more than `max_jump`. May empty the mask. Idempotent: survivors only lose
/// neighbors, so their largest jump can only shrink.
pub fn depth_discontinuity_filter(depth: &OrganizedDepth, max_jump: f64) -> Result<OrganizedDepth> {
    if max_jump <= 0.0 {
        return Err(Error::Geometry("max_jump must be positive".into()));
    }
    let mut out = depth.clone();
    for y in 0..depth.height as isize {
        for x in 0..depth.width as isize {
            let i = depth.idx(x as usize, y as usize);
            if !depth.mask[i] {
                continue;
            }
            let mut discontinuous = false;
            'scan: for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= depth.width as isize || ny >= depth.height as isize
                    {
                        continue;
                    }
                    let j = depth.idx(nx as usize, ny as usize);
                    if depth.mask[j] && (depth.depth[j] - depth.depth[i]).abs() > max_jump {
                        discontinuous = true;
                        break 'scan;
                    }
                }
            }
            if discontinuous {
                out.mask[i] = false;
            }
        }
    }
    Ok(out)
}

/// Uniform spatial hash over cubic cells, used for radius queries once clouds
/// grow past the brute-force cutoff.
struct SpatialHash {
    cell: f64,
    map: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
}

impl SpatialHash {
    fn build(points: &[[f64; 3]], cell: f64) -> Self {
        let mut map: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, map }
    }

    #[inline]
    fn key(p: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Indices of points within `radius` of `p`, excluding `exclude`.
    fn count_within(&self, points: &[[f64; 3]], p: &[f64; 3], radius: f64, exclude: usize) -> usize {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        let r2 = radius * radius;
        let mut count = 0;
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &j in bucket {
                            if j == exclude {
                                continue;
                            }
                            let q = points[j];
                            let d2 = (q[0] - p[0]).powi(2)
                                + (q[1] - p[1]).powi(2)
                                + (q[2] - p[2]).powi(2);
                            if d2 <= r2 {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }
}

const BRUTE_FORCE_CUTOFF: usize = 256;

fn neighbor_counts(points: &[[f64; 3]], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    if points.len() < BRUTE_FORCE_CUTOFF {
        let mut counts = vec![0usize; points.len()];
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let (p, q) = (points[i], points[j]);
                let d2 =
                    (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
                if d2 <= r2 {
                    counts[i] += 1;
                    counts[j] += 1;
                }
            }
        }
        counts
    } else {
        let hash = SpatialHash::build(points, radius.max(1e-12));
        points
            .iter()
            .enumerate()
            .map(|(i, p)| hash.count_within(points, p, radius, i))
            .collect()
    }
}

/// Keeps points having at least `min_neighbors` other points within `radius`.
/// Iterates to a fixed point so the kept set is stable under re-application.
pub fn radial_outlier_removal(
    cloud: &PointCloud,
    radius: f64,
    min_neighbors: usize,
) -> Result<PointCloud> {
    if radius <= 0.0 {
        return Err(Error::Geometry("radius must be positive".into()));
    }
    if min_neighbors == 0 {
        return Err(Error::Geometry("min_neighbors must be >= 1".into()));
    }
    let mut points = cloud.points.clone();
    loop {
        let counts = neighbor_counts(&points, radius);
        let kept: Vec<[f64; 3]> = points
            .iter()
            .zip(&counts)
            .filter(|(_, &c)| c >= min_neighbors)
            .map(|(p, _)| *p)
            .collect();
        let stable = kept.len() == points.len();
        points = kept;
        if stable || points.is_empty() {
            break;
        }
    }
    Ok(PointCloud::new(points))
}

fn median(sorted: &[f64]) -> f64 {
    // Lower-middle element for even counts; deterministic, no averaging.
    sorted[(sorted.len() - 1) / 2]
}

/// Removes points whose distance to the cloud centroid exceeds
/// `median + k_sigma * MAD`. Iterates to a fixed point.
pub fn median_distance_filter(cloud: &PointCloud, k_sigma: f64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Geometry("median distance filter requires a non-empty cloud".into()));
    }
    if k_sigma <= 0.0 {
        return Err(Error::Geometry("k_sigma must be positive".into()));
    }
    let mut points = cloud.points.clone();
    loop {
        let c = PointCloud { points: points.clone() }.centroid().unwrap();
        let dists: Vec<f64> = points
            .iter()
            .map(|p| (Vector3::new(p[0], p[1], p[2]) - c).norm())
            .collect();
        let mut sorted = dists.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = median(&sorted);
        let mut devs: Vec<f64> = dists.iter().map(|d| (d - med).abs()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mad = median(&devs);
        let threshold = med + k_sigma * mad;
        let kept: Vec<[f64; 3]> = points
            .iter()
            .zip(&dists)
            .filter(|(_, &d)| d <= threshold)
            .map(|(p, _)| *p)
            .collect();
        let stable = kept.len() == points.len();
        points = kept;
        if stable || points.is_empty() {
            break;
        }
    }
    Ok(PointCloud::new(points))
}

/// Subtracts the centroid of the union of all points from every cloud.
/// Relative geometry is preserved exactly.
pub fn center_clouds(clouds: &[PointCloud]) -> Result<Vec<PointCloud>> {
    let total: usize = clouds.iter().map(|c| c.len()).sum();
    if total == 0 {
        return Err(Error::Geometry("center_clouds: all clouds are empty".into()));
    }
    let mut sum = Vector3::zeros();
    for cloud in clouds {
        for p in &cloud.points {
            sum += Vector3::new(p[0], p[1], p[2]);
        }
    }
    let c = sum / total as f64;
    Ok(clouds
        .iter()
        .map(|cloud| {
            PointCloud::new(
                cloud
                    .points
                    .iter()
                    .map(|p| [p[0] - c.x, p[1] - c.y, p[2] - c.z])
                    .collect(),
            )
        })
        .collect())
}

/// Covariance eigendecomposition with the sign canon and descending
/// eigenvalue order. Errors when the covariance rank is below 2.
pub fn compute_pca(cloud: &PointCloud) -> Result<PcaFrame> {
    if cloud.len() < 4 {
        return Err(Error::Geometry(format!(
            "PCA requires at least 4 points, got {}",
            cloud.len()
        )));
    }
    let mean = cloud.centroid().unwrap();
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let v = Vector3::new(p[0], p[1], p[2]) - mean;
        cov += v * v.transpose();
    }
    cov /= cloud.len() as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    // Stable descending sort; equal eigenvalues keep their pre-sort order.
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut axes = Matrix3::zeros();
    let mut eigenvalues = [0.0f64; 3];
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = eig.eigenvalues[src].max(0.0);
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Sign canon: largest-magnitude entry positive, first on ties.
        let mut best = 0;
        for k in 1..3 {
            if col[k].abs() > col[best].abs() {
                best = k;
            }
        }
        if col[best] < 0.0 {
            col = -col;
        }
        axes.set_column(dst, &col);
    }

    let rank = eigenvalues
        .iter()
        .filter(|&&l| l > 1e-12 * eigenvalues[0].max(1e-300))
        .count();
    if eigenvalues[0] <= 0.0 || rank < 2 {
        return Err(Error::Geometry(format!(
            "degenerate covariance: rank {rank} < 2"
        )));
    }
    Ok(PcaFrame { mean, axes, eigenvalues })
}

/// Centers the cloud at its own centroid and uniformly scales it so the
/// extent (max - min projection) along the first principal axis is 1.
/// Returns the applied scale.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, f64)> {
    let frame = compute_pca(cloud)?;
    let axis = frame.axes.column(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &cloud.points {
        let t = axis.dot(&(Vector3::new(p[0], p[1], p[2]) - frame.mean));
        lo = lo.min(t);
        hi = hi.max(t);
    }
    let extent = hi - lo;
    if extent <= 0.0 {
        return Err(Error::Geometry("normalize_cloud: zero extent along first axis".into()));
    }
    let scale = 1.0 / extent;
    let centered = PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                [
                    (p[0] - frame.mean.x) * scale,
                    (p[1] - frame.mean.y) * scale,
                    (p[2] - frame.mean.z) * scale,
                ]
            })
            .collect(),
    );
    Ok((centered, scale))
}

/// Bins a normalized cloud into an occupancy grid spanning `[-1, 1]^3`.
/// Points outside the span are clamped to the boundary voxels.
pub fn voxelize(cloud: &PointCloud, resolution: usize) -> Result<VoxelGrid> {
    if cloud.is_empty() {
        return Err(Error::Geometry("voxelize: empty cloud".into()));
    }
    if resolution < 8 {
        return Err(Error::Geometry(format!("voxel resolution {resolution} < 8")));
    }
    let voxel_size = 2.0 / resolution as f64;
    let mut occupancy = vec![false; resolution * resolution * resolution];
    let bin = |c: f64| -> usize {
        let i = ((c + 1.0) / voxel_size).floor() as isize;
        i.clamp(0, resolution as isize - 1) as usize
    };
    for p in &cloud.points {
        let (x, y, z) = (bin(p[0]), bin(p[1]), bin(p[2]));
        occupancy[(z * resolution + y) * resolution + x] = true;
    }
    Ok(VoxelGrid { resolution, occupancy, voxel_size })
}
