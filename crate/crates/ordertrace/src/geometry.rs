//! Centroid geometry of stage activations: training-order axes, orthonormal
//! 2D projections, ordering and collinearity metrics, PCA, and cosine
//! similarity analyses.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::capture::ActivationTensor;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("empty group: stage {0} has no samples")]
    EmptyGroup(u16),
    #[error("zero vector: mean difference is numerically zero")]
    ZeroVector,
    #[error("degenerate spread: all residuals are zero")]
    DegenerateSpread,
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
}

/// Per-stage mean activation vectors at a fixed (layer, token) cell.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    /// Stage label -> centroid, ordered by stage.
    pub centroids: BTreeMap<u16, Array1<f64>>,
    pub layer: usize,
    pub token: usize,
    pub prompt_id: u32,
    pub run_label: String,
}

/// Orthonormal 2D projection basis; `x` is the training-order axis.
#[derive(Debug, Clone)]
pub struct Axis2D {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
}

impl Axis2D {
    pub fn new(x: Array1<f64>, y: Array1<f64>) -> Axis2D {
        let basis = Axis2D { x, y };
        debug_assert!(basis.is_orthonormal(1e-6));
        basis
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let nx = norm(&self.x);
        let ny = norm(&self.y);
        let dot = self.x.dot(&self.y);
        (nx - 1.0).abs() <= tol && (ny - 1.0).abs() <= tol && dot.abs() <= tol
    }
}

pub fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

pub fn normalize(v: &Array1<f64>) -> Result<Array1<f64>, GeometryError> {
    let n = norm(v);
    if n <= 1e-12 {
        return Err(GeometryError::ZeroVector);
    }
    Ok(v / n)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (norm(a) * norm(b))
}

/// Exact per-stage group means of the given (layer, token) cell.
pub fn centroids(
    acts: &ActivationTensor,
    layer: usize,
    token: usize,
    run_label: &str,
) -> Result<CentroidSet, GeometryError> {
    let cell = acts.cell(layer, token);
    let d = acts.d_model();
    let mut sums: BTreeMap<u16, (Array1<f64>, usize)> = BTreeMap::new();
    for (i, entry) in acts.index.iter().enumerate() {
        let e = sums
            .entry(entry.stage)
            .or_insert_with(|| (Array1::zeros(d), 0));
        for j in 0..d {
            e.0[j] += cell[[i, j]] as f64;
        }
        e.1 += 1;
    }
    let mut out = BTreeMap::new();
    for (stage, (sum, count)) in sums {
        if count == 0 {
            return Err(GeometryError::EmptyGroup(stage));
        }
        out.insert(stage, sum / count as f64);
    }
    let prompt_id = acts.index.first().map(|e| e.prompt_id).unwrap_or(0);
    Ok(CentroidSet {
        centroids: out,
        layer,
        token,
        prompt_id,
        run_label: run_label.to_string(),
    })
}

/// Normalized average of centroid differences `c_i - c_j` over the supplied
/// pairs (difference-of-means axis).
pub fn diffmean_axis(pairs: &[(Array1<f64>, Array1<f64>)]) -> Result<Array1<f64>, GeometryError> {
    if pairs.is_empty() {
        return Err(GeometryError::TooFew { need: 1, got: 0 });
    }
    let d = pairs[0].0.len();
    let mut mean = Array1::<f64>::zeros(d);
    for (a, b) in pairs {
        assert_eq!(a.len(), d);
        assert_eq!(b.len(), d);
        mean = mean + (a - b);
    }
    mean /= pairs.len() as f64;
    normalize(&mean)
}

/// First principal component of the centroids after removing their component
/// along `x`; the returned `y` is orthogonal to `x`.
pub fn residual_pc_axis(
    centroids: &[Array1<f64>],
    x: &Array1<f64>,
) -> Result<Array1<f64>, GeometryError> {
    if centroids.len() < 2 {
        return Err(GeometryError::TooFew {
            need: 2,
            got: centroids.len(),
        });
    }
    let d = x.len();
    let mut rows = Array2::<f64>::zeros((centroids.len(), d));
    for (i, c) in centroids.iter().enumerate() {
        let resid = c - &(x * c.dot(x));
        rows.row_mut(i).assign(&resid);
    }
    let mean = rows.mean_axis(Axis(0)).unwrap();
    for mut row in rows.axis_iter_mut(Axis(0)) {
        row -= &mean;
    }
    let total: f64 = rows.iter().map(|v| v * v).sum();
    if total <= 1e-18 {
        return Err(GeometryError::DegenerateSpread);
    }
    let (components, _ratios) = pca(&rows, 1)?;
    let mut y = components.row(0).to_owned();
    // Exactly re-orthogonalize against x (guards the 1e-6 contract).
    y = &y - &(x * y.dot(x));
    normalize(&y)
}

/// Project vectors onto a 2D basis: `(v . x, v . y)` per vector.
pub fn project(vectors: &[Array1<f64>], axis: &Axis2D) -> Vec<(f64, f64)> {
    vectors
        .iter()
        .map(|v| (v.dot(&axis.x), v.dot(&axis.y)))
        .collect()
}

/// Tie-adjusted Kendall rank correlation (tau-b) between projected x
/// positions and the true stage order.
pub fn ordering_score(px_per_stage: &[f64], true_order: &[usize]) -> Result<f64, GeometryError> {
    let n = px_per_stage.len();
    if n < 2 || true_order.len() != n {
        return Err(GeometryError::TooFew { need: 2, got: n });
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = px_per_stage[i] - px_per_stage[j];
            let dy = true_order[i] as f64 - true_order[j] as f64;
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n_pairs = (n * (n - 1) / 2) as i64;
    let denom = (((n_pairs - ties_x) as f64) * ((n_pairs - ties_y) as f64)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// RMS distance of centroids to their total-least-squares best-fit line,
/// normalized by the total RMS spread about the mean.
pub fn collinearity_residual(centroids: &[Array1<f64>]) -> Result<f64, GeometryError> {
    if centroids.len() < 3 {
        return Err(GeometryError::TooFew {
            need: 3,
            got: centroids.len(),
        });
    }
    let d = centroids[0].len();
    let n = centroids.len();
    let mut rows = Array2::<f64>::zeros((n, d));
    for (i, c) in centroids.iter().enumerate() {
        rows.row_mut(i).assign(c);
    }
    let mean = rows.mean_axis(Axis(0)).unwrap();
    for mut row in rows.axis_iter_mut(Axis(0)) {
        row -= &mean;
    }
    let total: f64 = rows.iter().map(|v| v * v).sum();
    if total <= 1e-18 {
        return Ok(0.0); // all points coincide: trivially collinear
    }
    let (components, _) = pca(&rows, 1)?;
    let dir = components.row(0).to_owned();
    let mut resid = 0.0;
    for row in rows.axis_iter(Axis(0)) {
        let along = row.dot(&dir);
        let r2: f64 = row.iter().map(|v| v * v).sum::<f64>() - along * along;
        resid += r2.max(0.0);
    }
    Ok((resid / total).sqrt())
}

/// Difference-of-means axis between never-seen and seen centroid pairs
/// collected across checkpoints; `pairs` are (unseen, seen).
pub fn seen_unseen_axis(
    pairs: &[(Array1<f64>, Array1<f64>)],
) -> Result<Array1<f64>, GeometryError> {
    diffmean_axis(pairs)
}

/// Centered PCA via exact eigendecomposition of the covariance matrix.
/// Returns (components `[k, d]`, explained-variance ratios `[k]`).
pub fn pca(rows: &Array2<f64>, k: usize) -> Result<(Array2<f64>, Vec<f64>), GeometryError> {
    let n = rows.nrows();
    let d = rows.ncols();
    if k > n.min(d) || n == 0 {
        return Err(GeometryError::TooFew { need: k, got: n.min(d) });
    }
    let mean = rows.mean_axis(Axis(0)).unwrap();
    let mut centered = rows.clone();
    for mut row in centered.axis_iter_mut(Axis(0)) {
        row -= &mean;
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let cov_na = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = cov_na.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
    });
    let total: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    let mut components = Array2::<f64>::zeros((k, d));
    let mut ratios = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        for j in 0..d {
            components[[row, j]] = eig.eigenvectors[(j, idx)];
        }
        let ev = eig.eigenvalues[idx].max(0.0);
        ratios.push(if total > 0.0 { ev / total } else { 0.0 });
    }
    Ok((components, ratios))
}

/// Within-group and between-group mean cosine similarities (within-group
/// excludes self-pairs).
#[derive(Debug, Clone)]
pub struct CosineStats {
    /// Per-group mean within-group cosine, in group order.
    pub within: Vec<f64>,
    /// Upper-triangular between-group means keyed by (i, j), i < j.
    pub between: Vec<((usize, usize), f64)>,
}

pub fn cosine_stats(groups: &[Vec<Array1<f64>>]) -> CosineStats {
    let within = groups
        .iter()
        .map(|g| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    sum += cosine(&g[i], &g[j]);
                    count += 1;
                }
            }
            if count > 0 {
                sum / count as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    let mut between = Vec::new();
    for gi in 0..groups.len() {
        for gj in gi + 1..groups.len() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for a in &groups[gi] {
                for b in &groups[gj] {
                    sum += cosine(a, b);
                    count += 1;
                }
            }
            between.push(((gi, gj), if count > 0 { sum / count as f64 } else { f64::NAN }));
        }
    }
    CosineStats { within, between }
}

/// Pairwise cosine grid between unit-normalized probe directions.
pub fn probe_cosine_matrix(directions: &[Array1<f64>]) -> Array2<f64> {
    let n = directions.len();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = cosine(&directions[i], &directions[j]);
        }
    }
    out
}
