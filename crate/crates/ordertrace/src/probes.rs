//! Regularized logistic-regression probes over activation cells, with
//! entity-split evaluation, repeated random splits, and pairwise-stage grids.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::capture::ActivationTensor;
use crate::derive_seed;

/// The regularization convention mirrored from the common `C` parameter:
/// loss = mean logistic + (1/(2·C·n))·‖w‖², bias unregularized.
pub const PROBE_C: f64 = 0.1;

pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITERS: usize = 1000;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("single class: both labels must be present in the training set")]
    SingleClass,
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("empty evaluation set")]
    EmptyEval,
    #[error("label/feature length mismatch: {labels} labels for {rows} rows")]
    LengthMismatch { labels: usize, rows: usize },
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub l2_strength: f64,
}

impl ProbeModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^{-z}) computed stably.
fn log1p_exp_neg(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn check_features(x: &ArrayView2<f64>) -> Result<(), ProbeError> {
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(ProbeError::NonFiniteFeature { row, col });
        }
    }
    Ok(())
}

/// Regularized objective: mean logistic loss + (l2/2)‖w‖².
pub fn probe_loss(model: &ProbeModel, x: &ArrayView2<f64>, y: &[bool]) -> f64 {
    let n = x.nrows();
    let mut loss = 0.0;
    for i in 0..n {
        let z = model.decision(x.row(i).as_slice().unwrap());
        let s = if y[i] { 1.0 } else { -1.0 };
        loss += log1p_exp_neg(s * z);
    }
    loss / n as f64 + 0.5 * model.l2_strength * model.weights.dot(&model.weights)
}

/// Full-batch Newton solver for the convex regularized logistic objective.
/// Deterministic for fixed inputs and seed; the seed only sets the (tiny)
/// random initialization, and convexity makes the minimizer unique.
pub fn train_probe(
    x: ArrayView2<f64>,
    y: &[bool],
    l2: f64,
    seed: u64,
) -> Result<ProbeModel, ProbeError> {
    let n = x.nrows();
    let d = x.ncols();
    if y.len() != n {
        return Err(ProbeError::LengthMismatch { labels: y.len(), rows: n });
    }
    let pos = y.iter().filter(|&&v| v).count();
    if n == 0 || pos == 0 || pos == n {
        return Err(ProbeError::SingleClass);
    }
    check_features(&x)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = DVector::<f64>::from_fn(d + 1, |_, _| {
        0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    theta[d] = 0.0;

    // Augmented design matrix [X | 1] so the bias is the last coordinate;
    // gradient and Hessian then reduce to dense matrix products.
    let mut aug = Array2::<f64>::zeros((n, d + 1));
    aug.slice_mut(ndarray::s![.., ..d]).assign(&x);
    aug.column_mut(d).fill(1.0);

    for _ in 0..MAX_ITERS {
        let theta_arr = Array1::from_iter(theta.iter().cloned());
        let z = aug.dot(&theta_arr);
        // g_i = (p_i - t_i)/n, s_i = p_i (1 - p_i)/n.
        let mut g = Array1::<f64>::zeros(n);
        let mut s_sqrt = Array1::<f64>::zeros(n);
        for i in 0..n {
            let p = sigmoid(z[i]);
            let t = if y[i] { 1.0 } else { 0.0 };
            g[i] = (p - t) / n as f64;
            s_sqrt[i] = ((p * (1.0 - p)).max(1e-12) / n as f64).sqrt();
        }
        let mut grad_arr = aug.t().dot(&g);
        for j in 0..d {
            grad_arr[j] += l2 * theta[j];
        }
        // Hessian = augᵀ diag(s) aug + l2 I (bias unregularized).
        let scaled = &aug * &s_sqrt.view().insert_axis(ndarray::Axis(1));
        let hess_nd = scaled.t().dot(&scaled);
        let mut hess = DMatrix::<f64>::zeros(d + 1, d + 1);
        for j in 0..d + 1 {
            for k in 0..d + 1 {
                hess[(j, k)] = hess_nd[[j, k]];
            }
        }
        for j in 0..d {
            hess[(j, j)] += l2;
        }
        let grad = DVector::<f64>::from_iterator(d + 1, grad_arr.iter().cloned());
        if grad.norm() <= GRAD_TOL {
            break;
        }
        // Cholesky with escalating ridge damping for numerical safety.
        let mut damping = 0.0;
        let step = loop {
            let mut h = hess.clone();
            if damping > 0.0 {
                for j in 0..d + 1 {
                    h[(j, j)] += damping;
                }
            }
            match h.cholesky() {
                Some(chol) => break chol.solve(&grad),
                None => damping = if damping == 0.0 { 1e-10 } else { damping * 10.0 },
            }
        };
        theta -= step;
    }

    Ok(ProbeModel {
        weights: Array1::from_iter((0..d).map(|j| theta[j])),
        bias: theta[d],
        l2_strength: l2,
    })
}

/// Fraction of sign-correct predictions, thresholding at probability 0.5.
pub fn eval_probe(model: &ProbeModel, x: ArrayView2<f64>, y: &[bool]) -> Result<f64, ProbeError> {
    let n = x.nrows();
    if n == 0 {
        return Err(ProbeError::EmptyEval);
    }
    if y.len() != n {
        return Err(ProbeError::LengthMismatch { labels: y.len(), rows: n });
    }
    let correct = (0..n)
        .filter(|&i| model.predict(x.row(i).as_slice().unwrap()) == y[i])
        .count();
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GridCell {
    pub layer: usize,
    pub token: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    pub grid: Vec<GridCell>,
    pub n_splits: usize,
    pub split_ratio: f64,
    pub label_def: String,
}

impl ProbeReport {
    pub fn cell(&self, layer: usize, token: usize) -> Option<&GridCell> {
        self.grid.iter().find(|c| c.layer == layer && c.token == token)
    }

    pub fn max_cell(&self) -> Option<&GridCell> {
        self.grid
            .iter()
            .max_by(|a, b| a.acc_mean.partial_cmp(&b.acc_mean).unwrap())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::from("layer,token,acc_mean,acc_std,n_train,n_test,label_def\n");
        for c in &self.grid {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{}\n",
                c.layer, c.token, c.acc_mean, c.acc_std, c.n_train, c.n_test, self.label_def
            ));
        }
        std::fs::write(path, out)
    }
}

/// Probes over every (layer, token) cell, repeated over `n_splits` random
/// entity-level 80:20 splits so probe-test entities never appear in
/// probe-train. `labels[i]` is the binary label for sample row `i`, `None`
/// for rows excluded from this comparison.
pub fn probe_grid(
    acts: &ActivationTensor,
    labels: &[Option<bool>],
    n_splits: usize,
    split_ratio: f64,
    seed: u64,
    label_def: &str,
) -> Result<ProbeReport, ProbeError> {
    let n = acts.n_samples();
    if labels.len() != n {
        return Err(ProbeError::LengthMismatch { labels: labels.len(), rows: n });
    }
    // Entity universe restricted to labeled rows.
    let mut entities: Vec<u32> = acts
        .index
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_some())
        .map(|(e, _)| e.entity_id)
        .collect();
    entities.sort_unstable();
    entities.dedup();

    let rows_of_entity = |set: &BTreeSet<u32>| -> Vec<usize> {
        (0..n)
            .filter(|&i| labels[i].is_some() && set.contains(&acts.index[i].entity_id))
            .collect()
    };

    // Precompute per-split row partitions.
    let mut split_rows = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let mut pool = entities.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x53504c54, s as u64]));
        pool.shuffle(&mut rng);
        let n_train = ((pool.len() as f64) * split_ratio).round() as usize;
        let train_set: BTreeSet<u32> = pool[..n_train].iter().copied().collect();
        let test_set: BTreeSet<u32> = pool[n_train..].iter().copied().collect();
        assert!(
            train_set.intersection(&test_set).next().is_none(),
            "entity-split hygiene violated"
        );
        split_rows.push((rows_of_entity(&train_set), rows_of_entity(&test_set)));
    }

    let mut grid = Vec::new();
    for layer in 0..acts.n_layers() {
        for token in 0..acts.n_tokens() {
            let cell = acts.cell(layer, token);
            let d = acts.d_model();
            let features = |rows: &[usize]| -> Array2<f64> {
                let mut x = Array2::<f64>::zeros((rows.len(), d));
                for (r, &i) in rows.iter().enumerate() {
                    for j in 0..d {
                        x[[r, j]] = cell[[i, j]] as f64;
                    }
                }
                x
            };
            let mut accs = Vec::with_capacity(n_splits);
            let mut n_train = 0;
            let mut n_test = 0;
            for (s, (train_rows, test_rows)) in split_rows.iter().enumerate() {
                let x_train = features(train_rows);
                let y_train: Vec<bool> =
                    train_rows.iter().map(|&i| labels[i].unwrap()).collect();
                let x_test = features(test_rows);
                let y_test: Vec<bool> = test_rows.iter().map(|&i| labels[i].unwrap()).collect();
                let l2 = 1.0 / (PROBE_C * x_train.nrows() as f64);
                let cell_seed =
                    derive_seed(seed, &[0x43454c4c, layer as u64, token as u64, s as u64]);
                let model = train_probe(x_train.view(), &y_train, l2, cell_seed)?;
                accs.push(eval_probe(&model, x_test.view(), &y_test)?);
                n_train = x_train.nrows();
                n_test = x_test.nrows();
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var =
                accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
            grid.push(GridCell {
                layer,
                token,
                acc_mean: mean,
                acc_std: var.sqrt(),
                n_train,
                n_test,
            });
        }
    }
    Ok(ProbeReport {
        grid,
        n_splits,
        split_ratio,
        label_def: label_def.to_string(),
    })
}

/// Upper-triangular m×m matrix of stage-i-vs-stage-j probe accuracies at a
/// fixed (layer, token) cell; entries below the diagonal and on it are NaN.
pub fn pairwise_stage_grid(
    acts: &ActivationTensor,
    m: usize,
    layer: usize,
    token: usize,
    n_splits: usize,
    seed: u64,
) -> Result<Array2<f64>, ProbeError> {
    assert!(m >= 2, "pairwise grid needs at least two stages");
    let mut out = Array2::<f64>::from_elem((m, m), f64::NAN);
    // Restrict the tensor to one cell to avoid re-probing the full grid.
    let cell_acts = restrict_to_cell(acts, layer, token);
    for i in 1..=m as u16 {
        for j in (i + 1)..=m as u16 {
            let labels: Vec<Option<bool>> = cell_acts
                .index
                .iter()
                .map(|e| {
                    if e.stage == i {
                        Some(false)
                    } else if e.stage == j {
                        Some(true)
                    } else {
                        None
                    }
                })
                .collect();
            let label_def = format!("D{i}-vs-D{j}");
            let report = probe_grid(
                &cell_acts,
                &labels,
                n_splits,
                0.8,
                derive_seed(seed, &[0x50414952, i as u64, j as u64]),
                &label_def,
            )?;
            out[[(i - 1) as usize, (j - 1) as usize]] = report.grid[0].acc_mean;
        }
    }
    Ok(out)
}

/// A view-like copy of one (layer, token) cell as a 1×1 grid tensor.
fn restrict_to_cell(acts: &ActivationTensor, layer: usize, token: usize) -> ActivationTensor {
    let cell = acts.cell(layer, token);
    let n = acts.n_samples();
    let d = acts.d_model();
    let mut data = ndarray::Array4::<f32>::zeros((n, 1, 1, d));
    for i in 0..n {
        for j in 0..d {
            data[[i, 0, 0, j]] = cell[[i, j]];
        }
    }
    ActivationTensor {
        data,
        index: acts.index.clone(),
        fingerprint: acts.fingerprint.clone(),
    }
}
