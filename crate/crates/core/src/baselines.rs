//! Classical association baselines: ICP alignment with Hungarian assignment
//! on centroid distances, and a neighbor-histogram descriptor variant.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::matcher::CorrespondenceSet;

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

/// Minimum-cost one-to-one assignment of an `m x n` cost matrix (row-major).
/// Rectangular inputs are padded internally; the result covers `min(m, n)`
/// pairs. Among optimal assignments the lexicographically smallest one (by
/// row, then column) is returned.
pub fn hungarian(cost: &[f64], m: usize, n: usize) -> Vec<(usize, usize)> {
    debug_assert_eq!(cost.len(), m * n);
    debug_assert!(cost.iter().all(|c| c.is_finite()));
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let base = solve_padded(cost, m, n);
    let optimal: f64 = base.iter().map(|&(i, j)| cost[i * n + j]).sum();
    let tol = 1e-9 * (1.0 + optimal.abs());

    // Lexicographic canonicalization: fix rows in order, choosing the
    // smallest column that still completes to an optimal assignment.
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut used_cols = vec![false; n];
    let k = m.min(n);
    for i in 0..m {
        if fixed.len() == k {
            break;
        }
        let remaining_rows: Vec<usize> = (i + 1..m).collect();
        let mut chosen: Option<usize> = None;
        // A row may also stay unassigned when m > n; that branch is only
        // legal if the remaining rows can still fill all columns optimally.
        let mut candidates: Vec<Option<usize>> =
            (0..n).filter(|&j| !used_cols[j]).map(Some).collect();
        if m > n {
            candidates.push(None);
        }
        for cand in candidates {
            let mut cols = used_cols.clone();
            let mut partial: f64 = fixed.iter().map(|&(r, c)| cost[r * n + c]).sum();
            if let Some(j) = cand {
                cols[j] = true;
                partial += cost[i * n + j];
            }
            let free_cols: Vec<usize> = (0..n).filter(|&j| !cols[j]).collect();
            let need = k - fixed.len() - usize::from(cand.is_some());
            let sub = best_cost_subproblem(cost, &remaining_rows, &free_cols, n, need);
            if let Some(sub) = sub {
                if partial + sub <= optimal + tol {
                    chosen = cand;
                    break;
                }
            }
        }
        if let Some(j) = chosen {
            used_cols[j] = true;
            fixed.push((i, j));
        }
    }
    fixed
}

/// Optimal cost of assigning `need` of the given rows to distinct free
/// columns; `None` if infeasible.
fn best_cost_subproblem(
    cost: &[f64],
    rows: &[usize],
    cols: &[usize],
    n: usize,
    need: usize,
) -> Option<f64> {
    if need == 0 {
        return Some(0.0);
    }
    if rows.len() < need || cols.len() < need {
        return None;
    }
    let mut sub = vec![0.0f64; rows.len() * cols.len()];
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            sub[ri * cols.len() + ci] = cost[r * n + c];
        }
    }
    let picks = solve_padded(&sub, rows.len(), cols.len());
    debug_assert_eq!(picks.len(), rows.len().min(cols.len()));
    // All assignable pairs are used when min(rows, cols) == need.
    Some(picks.iter().map(|&(ri, ci)| sub[ri * cols.len() + ci]).sum())
}

/// Shortest-augmenting-path assignment on a square-padded copy.
fn solve_padded(cost: &[f64], m: usize, n: usize) -> Vec<(usize, usize)> {
    let dim = m.max(n);
    let big = dim * dim;
    let mut a = vec![0.0f64; big];
    for i in 0..m {
        for j in 0..n {
            a[i * dim + j] = cost[i * n + j];
        }
    }

    // Potentials and matching, 1-indexed internally.
    let mut u = vec![0.0f64; dim + 1];
    let mut v = vec![0.0f64; dim + 1];
    let mut p = vec![0usize; dim + 1]; // column -> row
    let mut way = vec![0usize; dim + 1];
    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * dim + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = Vec::new();
    for j in 1..=dim {
        let i = p[j];
        if i >= 1 && i <= m && j <= n {
            out.push((i - 1, j - 1));
        }
    }
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// ICP
// ---------------------------------------------------------------------------

/// Proper rigid motion: `p -> R p + t`.
#[derive(Debug, Clone)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [q.x, q.y, q.z]
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let gram = self.rotation.transpose() * self.rotation;
        let mut err: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                err = err.max((gram[(r, c)] - expect).abs());
            }
        }
        err <= tol && self.rotation.determinant() > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMS residual over the kept correspondences after each iteration.
    pub rms_history: Vec<f64>,
    pub converged: bool,
}

fn covariance_rank(points: &[[f64; 3]]) -> usize {
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::new(p[0], p[1], p[2]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let v = Vector3::new(p[0], p[1], p[2]) - mean;
        cov += v * v.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > 1e-12 * max).count()
}

/// Kabsch rigid estimation from paired points.
fn estimate_rigid(pairs: &[([f64; 3], [f64; 3])]) -> Result<RigidTransform> {
    let n = pairs.len() as f64;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for (s, t) in pairs {
        cs += Vector3::new(s[0], s[1], s[2]);
        ct += Vector3::new(t[0], t[1], t[2]);
    }
    cs /= n;
    ct /= n;
    let mut h = Matrix3::zeros();
    for (s, t) in pairs {
        let ds = Vector3::new(s[0], s[1], s[2]) - cs;
        let dt = Vector3::new(t[0], t[1], t[2]) - ct;
        h += ds * dt.transpose();
    }
    let svd = SVD::new(h, true, true);
    let sv = &svd.singular_values;
    let scale = sv[0].max(1e-300);
    if sv[1] / scale < 1e-9 {
        return Err(Error::Numeric(format!(
            "degenerate correspondence covariance (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = vt.transpose() * flip * u.transpose();
    }
    let t = ct - r * cs;
    Ok(RigidTransform { rotation: r, translation: t })
}

/// Grid-hashed nearest neighbor over a fixed target cloud.
struct NearestTarget {
    points: Vec<[f64; 3]>,
    cell: f64,
    map: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
}

impl NearestTarget {
    fn build(points: &[[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let span = (0..3).map(|c| hi[c] - lo[c]).fold(0.0f64, f64::max);
        let cell = (span / (points.len() as f64).cbrt()).max(1e-9);
        let mut map: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points: points.to_vec(), cell, map }
    }

    fn key(p: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Nearest target point: expanding ring search, exact.
    fn nearest(&self, p: &[f64; 3]) -> ([f64; 3], f64) {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let mut best = f64::INFINITY;
        let mut best_pt = self.points[0];
        let mut ring = 0i64;
        loop {
            let mut visited_any = false;
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue; // shell only
                        }
                        if let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                            visited_any = true;
                            for &i in bucket {
                                let q = self.points[i];
                                let d2 = (q[0] - p[0]).powi(2)
                                    + (q[1] - p[1]).powi(2)
                                    + (q[2] - p[2]).powi(2);
                                if d2 < best {
                                    best = d2;
                                    best_pt = q;
                                }
                            }
                        }
                    }
                }
            }
            // A shell at distance `ring` can still beat the current best if
            // best > ((ring-1) * cell)^2; stop once that is impossible.
            let safe = (ring - 1).max(0) as f64 * self.cell;
            if best.is_finite() && best <= safe * safe {
                break;
            }
            let _ = visited_any;
            ring += 1;
            if ring as f64 * self.cell
                > 4.0 * (best.sqrt().min(1e12) + self.cell) + 1e3 * self.cell
            {
                break; // target exhausted
            }
        }
        (best_pt, best.sqrt())
    }
}

const ICP_MAX_SOURCE_POINTS: usize = 800;

/// Point-to-point ICP with SVD rigid estimation and 3x-median
/// correspondence rejection per iteration.
pub fn icp(source: &PointCloud, target: &PointCloud, max_iter: usize, tol: f64) -> Result<IcpResult> {
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::Geometry(format!(
            "icp needs >= 3 points per cloud, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if covariance_rank(&source.points) < 2 || covariance_rank(&target.points) < 2 {
        return Err(Error::Geometry("icp: collinear input cloud".into()));
    }

    // Deterministic stride subsample for correspondence search.
    let stride = (source.len() / ICP_MAX_SOURCE_POINTS).max(1);
    let sub: Vec<[f64; 3]> = source.points.iter().step_by(stride).copied().collect();
    let nn = NearestTarget::build(&target.points);

    let mut transform = RigidTransform::identity();
    let mut rms_history = Vec::new();
    let mut prev_rms = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iter {
        let moved: Vec<[f64; 3]> = sub.iter().map(|&p| transform.apply(p)).collect();
        let pairs_all: Vec<(([f64; 3], [f64; 3]), f64)> = moved
            .iter()
            .zip(&sub)
            .map(|(mp, sp)| {
                let (tp, dist) = nn.nearest(mp);
                ((*sp, tp), dist)
            })
            .collect();
        let mut dists: Vec<f64> = pairs_all.iter().map(|&(_, d)| d).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = dists[(dists.len() - 1) / 2];
        let cutoff = if median > 0.0 { 3.0 * median } else { f64::INFINITY };
        let kept: Vec<([f64; 3], [f64; 3])> = pairs_all
            .iter()
            .filter(|&&(_, d)| d <= cutoff)
            .map(|&(pair, _)| pair)
            .collect();
        if kept.len() < 3 {
            return Err(Error::Numeric("icp: fewer than 3 correspondences survive rejection".into()));
        }
        transform = estimate_rigid(&kept)?;
        let rms = (kept
            .iter()
            .map(|(s, t)| {
                let m = transform.apply(*s);
                (m[0] - t[0]).powi(2) + (m[1] - t[1]).powi(2) + (m[2] - t[2]).powi(2)
            })
            .sum::<f64>()
            / kept.len() as f64)
            .sqrt();
        rms_history.push(rms);
        if (prev_rms - rms).abs() < tol {
            converged = true;
            break;
        }
        prev_rms = rms;
    }
    Ok(IcpResult { transform, rms_history, converged })
}

pub const ICP_DEFAULT_MAX_ITER: usize = 50;
pub const ICP_DEFAULT_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Cluster-level baselines
// ---------------------------------------------------------------------------

/// Association result plus a flag for the ICP fallback path.
#[derive(Debug, Clone)]
pub struct AssocOutcome {
    pub correspondences: CorrespondenceSet,
    pub icp_fallback: bool,
}

fn union_cloud(cluster: &[PointCloud]) -> PointCloud {
    PointCloud::new(cluster.iter().flat_map(|c| c.points.iter().copied()).collect())
}

fn centroids(cluster: &[PointCloud]) -> Vec<[f64; 3]> {
    cluster
        .iter()
        .map(|c| {
            let v = c.centroid().expect("cluster clouds are non-empty");
            [v.x, v.y, v.z]
        })
        .collect()
}

/// Align the two days with ICP on the cluster union clouds, falling back to
/// identity when ICP fails. Returns the t+1 -> t transform.
fn align_clusters(
    cluster_t: &[PointCloud],
    cluster_t1: &[PointCloud],
) -> (RigidTransform, bool) {
    let source = union_cloud(cluster_t1);
    let target = union_cloud(cluster_t);
    match icp(&source, &target, ICP_DEFAULT_MAX_ITER, ICP_DEFAULT_TOL) {
        Ok(res) => (res.transform, false),
        Err(_) => (RigidTransform::identity(), true),
    }
}

pub const DEFAULT_DIST_THRESHOLD: f64 = 6e-3;

/// ICP-Assoc: ICP on the union clouds, Hungarian on transformed-centroid
/// distances, then a distance cutoff.
pub fn icp_assoc(
    cluster_t: &[PointCloud],
    cluster_t1: &[PointCloud],
    dist_threshold: f64,
) -> Result<AssocOutcome> {
    if cluster_t.is_empty() || cluster_t1.is_empty() {
        return Ok(AssocOutcome {
            correspondences: CorrespondenceSet::new(vec![], cluster_t.len(), cluster_t1.len())?,
            icp_fallback: false,
        });
    }
    let (transform, fallback) = align_clusters(cluster_t, cluster_t1);
    let cent_t = centroids(cluster_t);
    let cent_t1: Vec<[f64; 3]> =
        centroids(cluster_t1).iter().map(|&c| transform.apply(c)).collect();

    let (m, n) = (cent_t.len(), cent_t1.len());
    let mut cost = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let d = (0..3)
                .map(|c| (cent_t[i][c] - cent_t1[j][c]).powi(2))
                .sum::<f64>()
                .sqrt();
            cost[i * n + j] = d;
        }
    }
    let assignment = hungarian(&cost, m, n);
    let matches: Vec<(usize, usize)> = assignment
        .into_iter()
        .filter(|&(i, j)| cost[i * n + j] <= dist_threshold)
        .collect();
    Ok(AssocOutcome {
        correspondences: CorrespondenceSet::new(matches, m, n)?,
        icp_fallback: fallback,
    })
}

/// Binning for the neighbor histogram over (distance, azimuth, elevation)
/// of centroid offsets.
#[derive(Debug, Clone)]
pub struct HistogramConfig {
    pub dist_bins: usize,
    pub dist_max: f64,
    pub azim_bins: usize,
    pub elev_bins: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { dist_bins: 8, dist_max: 60e-3, azim_bins: 6, elev_bins: 4 }
    }
}

/// Normalized neighbor histogram for one fruitlet.
#[derive(Debug, Clone)]
pub struct NeighborHistogram {
    pub weights: Vec<f64>,
}

impl NeighborHistogram {
    pub fn build(center: [f64; 3], others: &[[f64; 3]], cfg: &HistogramConfig) -> Self {
        let mut weights = vec![0.0f64; cfg.dist_bins * cfg.azim_bins * cfg.elev_bins];
        if others.is_empty() {
            return Self { weights };
        }
        for o in others {
            let d = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let azim = d[1].atan2(d[0]); // [-pi, pi]
            let elev = if r > 0.0 { (d[2] / r).asin() } else { 0.0 };
            let db = (((r / cfg.dist_max) * cfg.dist_bins as f64).floor() as usize)
                .min(cfg.dist_bins - 1);
            let ab = ((((azim + std::f64::consts::PI) / std::f64::consts::TAU)
                * cfg.azim_bins as f64)
                .floor() as usize)
                .min(cfg.azim_bins - 1);
            let eb = ((((elev + std::f64::consts::FRAC_PI_2) / std::f64::consts::PI)
                * cfg.elev_bins as f64)
                .floor() as usize)
                .min(cfg.elev_bins - 1);
            weights[(db * cfg.azim_bins + ab) * cfg.elev_bins + eb] += 1.0;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self { weights }
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DescAssocWeights {
    pub histogram: f64,
    pub centroid: f64,
}

impl Default for DescAssocWeights {
    fn default() -> Self {
        Self { histogram: 1.0, centroid: 50.0 }
    }
}

/// Desc-Assoc: neighbor histograms over all other cluster members after
/// local-volume ICP alignment, combined with centroid distance, assigned by
/// the Hungarian solver with the same distance cutoff.
pub fn desc_assoc(
    cluster_t: &[PointCloud],
    cluster_t1: &[PointCloud],
    weights: DescAssocWeights,
    hist_cfg: &HistogramConfig,
    dist_threshold: f64,
) -> Result<AssocOutcome> {
    if cluster_t.is_empty() || cluster_t1.is_empty() {
        return Ok(AssocOutcome {
            correspondences: CorrespondenceSet::new(vec![], cluster_t.len(), cluster_t1.len())?,
            icp_fallback: false,
        });
    }
    let (transform, fallback) = align_clusters(cluster_t, cluster_t1);
    let cent_t = centroids(cluster_t);
    let cent_t1: Vec<[f64; 3]> =
        centroids(cluster_t1).iter().map(|&c| transform.apply(c)).collect();
    let (m, n) = (cent_t.len(), cent_t1.len());

    let hist = |cents: &[[f64; 3]], k: usize| {
        let others: Vec<[f64; 3]> = cents
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(_, &c)| c)
            .collect();
        NeighborHistogram::build(cents[k], &others, hist_cfg)
    };
    let hists_t: Vec<NeighborHistogram> = (0..m).map(|i| hist(&cent_t, i)).collect();
    let hists_t1: Vec<NeighborHistogram> = (0..n).map(|j| hist(&cent_t1, j)).collect();
    // Single-fruitlet clusters have empty histograms; fall back to centroid
    // distance alone.
    let use_hist = m > 1 && n > 1;

    let mut cost = vec![0.0f64; m * n];
    let mut cent_dist = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let d = (0..3)
                .map(|c| (cent_t[i][c] - cent_t1[j][c]).powi(2))
                .sum::<f64>()
                .sqrt();
            cent_dist[i * n + j] = d;
            let h = if use_hist { hists_t[i].l1_distance(&hists_t1[j]) } else { 0.0 };
            cost[i * n + j] = weights.histogram * h + weights.centroid * d;
        }
    }
    let assignment = hungarian(&cost, m, n);
    let matches: Vec<(usize, usize)> = assignment
        .into_iter()
        .filter(|&(i, j)| cent_dist[i * n + j] <= dist_threshold)
        .collect();
    Ok(AssocOutcome {
        correspondences: CorrespondenceSet::new(matches, m, n)?,
        icp_fallback: fallback,
    })
}
