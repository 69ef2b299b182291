//! Per-sample statistics (activation, logit, backward, forward-generation),
//! joint-binning covariate balancing, and the three-condition balanced-probe
//! comparison.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::ActivationTensor;
use crate::derive_seed;
use crate::model::{generate_full, Model, ModelError, Scalar};
use crate::probes::{eval_probe, train_probe, ProbeError, PROBE_C};

#[derive(Debug, Error)]
pub enum ControlsError {
    #[error("empty result: no joint bin contains both classes")]
    EmptyResult,
    #[error("target {target} exceeds class count {available}")]
    TargetTooLarge { target: usize, available: usize },
    #[error("stats/labels shape mismatch")]
    ShapeMismatch,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Six activation statistics: L2 norm, max, and the first four population
/// moments (mean, std, skewness = m3/σ³, kurtosis = m4/σ⁴, non-excess).
/// Degenerate σ = 0 maps skewness and kurtosis to 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActivationStats {
    pub l2_norm: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl ActivationStats {
    pub const NAMES: [&'static str; 6] = ["l2_norm", "max", "mean", "std", "skewness", "kurtosis"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.l2_norm, self.max, self.mean, self.std, self.skewness, self.kurtosis]
    }
}

fn moments(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = m2.sqrt();
    if std <= 0.0 {
        return (mean, 0.0, 0.0, 0.0);
    }
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (mean, std, m3 / std.powi(3), m4 / std.powi(4))
}

pub fn activation_stats(v: &[f64]) -> ActivationStats {
    assert!(v.len() >= 2, "activation stats need at least two dimensions");
    let l2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mean, std, skewness, kurtosis) = moments(v);
    ActivationStats { l2_norm: l2, max, mean, std, skewness, kurtosis }
}

/// Seven logit statistics: softmax entropy, max logit, stable logsumexp,
/// and the four moments of the raw logit values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogitStats {
    pub entropy: f64,
    pub max_logit: f64,
    pub logsumexp: f64,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl LogitStats {
    pub const NAMES: [&'static str; 7] =
        ["entropy", "max_logit", "logsumexp", "mean", "std", "skewness", "kurtosis"];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.entropy,
            self.max_logit,
            self.logsumexp,
            self.mean,
            self.std,
            self.skewness,
            self.kurtosis,
        ]
    }
}

pub fn logit_stats(z: &[f64]) -> LogitStats {
    let max_logit = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.iter().map(|v| (v - max_logit).exp()).sum();
    let logsumexp = max_logit + sum_exp.ln();
    let entropy: f64 = z
        .iter()
        .map(|v| {
            let p = (v - logsumexp).exp();
            if p > 0.0 { -p * p.ln() } else { 0.0 }
        })
        .sum();
    let (mean, std, skewness, kurtosis) = moments(z);
    LogitStats { entropy, max_logit, logsumexp, mean, std, skewness, kurtosis }
}

/// Backward-looking statistics of the realized prefix at `position`:
/// mean log-likelihood of the observed previous tokens and the cumulative /
/// min / max of the per-position prediction entropies.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BackwardStats {
    pub mean_log_likelihood: f64,
    pub cumulative_entropy: f64,
    pub min_entropy: f64,
    pub max_entropy: f64,
}

impl BackwardStats {
    pub const NAMES: [&'static str; 4] =
        ["mean_log_likelihood", "cumulative_entropy", "min_entropy", "max_entropy"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.mean_log_likelihood, self.cumulative_entropy, self.min_entropy, self.max_entropy]
    }
}

pub fn backward_stats<F: Scalar>(
    model: &Model<F>,
    prompt: &[usize],
    position: usize,
) -> Result<BackwardStats, ControlsError> {
    assert!(position >= 1 && position < prompt.len());
    let input = Array2::from_shape_vec((1, position + 1), prompt[..=position].to_vec()).unwrap();
    let res = model.forward(input.view())?;
    let mut log_liks = Vec::new();
    let mut entropies = Vec::new();
    for t in 0..position {
        let z: Vec<f64> = (0..model.config.vocab_size)
            .map(|v| res.logits[[0, t, v]].as_f64())
            .collect();
        let st = logit_stats(&z);
        entropies.push(st.entropy);
        let realized = prompt[t + 1];
        log_liks.push(z[realized] - st.logsumexp);
    }
    let n = log_liks.len().max(1) as f64;
    Ok(BackwardStats {
        mean_log_likelihood: log_liks.iter().sum::<f64>() / n,
        cumulative_entropy: entropies.iter().sum(),
        min_entropy: entropies.iter().cloned().fold(f64::INFINITY, f64::min),
        max_entropy: entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Forward-generation statistics from sampled continuations: per-horizon
/// mean sampling-distribution entropy and perplexity, n-gram diversity,
/// pairwise Jaccard similarity over token sets, unigram token entropy,
/// vocabulary fraction used, and continuation length mean/std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardGenStats {
    /// Horizons (token counts) at which entropy/perplexity are reported.
    pub horizons: Vec<usize>,
    /// Mean sampling-distribution entropy over steps up to each horizon.
    pub entropy_at: Vec<f64>,
    /// exp(mean entropy) at each horizon.
    pub perplexity_at: Vec<f64>,
    pub distinct_bigram_ratio: f64,
    pub distinct_trigram_ratio: f64,
    pub pairwise_jaccard: f64,
    /// True when n < 2 made pairwise Jaccard undefined (policy value 1.0).
    pub jaccard_degenerate: bool,
    /// Empirical unigram entropy over all generated tokens.
    pub token_entropy: f64,
    /// Distinct generated tokens / vocabulary size.
    pub vocab_fraction: f64,
    pub length_mean: f64,
    pub length_std: f64,
}

pub fn forward_gen_stats<F: Scalar>(
    model: &Model<F>,
    prompt: &[usize],
    n: usize,
    temperature: f64,
    max_tokens: usize,
    end_token: Option<usize>,
    seed: u64,
) -> Result<ForwardGenStats, ControlsError> {
    let gens = generate_full(model, prompt, temperature, max_tokens, n, end_token, seed)?;
    let horizons: Vec<usize> = [3usize, 5, 10].iter().cloned().filter(|&h| h <= max_tokens).collect();

    // Per-step sampling-distribution entropies, averaged across samples.
    let mut entropy_at = Vec::new();
    let mut perplexity_at = Vec::new();
    for &h in &horizons {
        let mut sum = 0.0;
        let mut count = 0usize;
        for g in &gens {
            for probs in g.step_probs.iter().take(h) {
                let ent: f64 = probs
                    .iter()
                    .map(|p| {
                        let p = p.as_f64();
                        if p > 0.0 { -p * p.ln() } else { 0.0 }
                    })
                    .sum();
                sum += ent;
                count += 1;
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        entropy_at.push(mean);
        perplexity_at.push(mean.exp());
    }

    // N-gram diversity over the pooled continuations.
    let continuations: Vec<&[usize]> = gens.iter().map(|g| g.tokens.as_slice()).collect();
    let ngram_ratio = |k: usize| -> f64 {
        let mut total = 0usize;
        let mut distinct = HashSet::new();
        for c in &continuations {
            if c.len() >= k {
                for w in c.windows(k) {
                    distinct.insert(w.to_vec());
                    total += 1;
                }
            }
        }
        if total > 0 { distinct.len() as f64 / total as f64 } else { 0.0 }
    };

    let sets: Vec<BTreeSet<usize>> =
        continuations.iter().map(|c| c.iter().cloned().collect()).collect();
    let (pairwise_jaccard, jaccard_degenerate) = if sets.len() < 2 {
        (1.0, true)
    } else {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                let inter = sets[i].intersection(&sets[j]).count();
                let union = sets[i].union(&sets[j]).count();
                sum += if union > 0 { inter as f64 / union as f64 } else { 1.0 };
                count += 1;
            }
        }
        (sum / count as f64, false)
    };

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total_tokens = 0usize;
    for c in &continuations {
        for &t in *c {
            *counts.entry(t).or_insert(0) += 1;
            total_tokens += 1;
        }
    }
    let token_entropy = if total_tokens > 0 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / total_tokens as f64;
                -p * p.ln()
            })
            .sum()
    } else {
        0.0
    };
    let vocab_fraction = counts.len() as f64 / model.config.vocab_size as f64;

    let lengths: Vec<f64> = continuations.iter().map(|c| c.len() as f64).collect();
    let (length_mean, length_std, _, _) = if lengths.len() >= 2 {
        moments(&lengths)
    } else {
        (lengths.first().cloned().unwrap_or(0.0), 0.0, 0.0, 0.0)
    };

    Ok(ForwardGenStats {
        horizons,
        entropy_at,
        perplexity_at,
        distinct_bigram_ratio: ngram_ratio(2),
        distinct_trigram_ratio: ngram_ratio(3),
        pairwise_jaccard,
        jaccard_degenerate,
        token_entropy,
        vocab_fraction,
        length_mean,
        length_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinStrategy {
    EqualWidth,
    Quantile,
}

/// Joint-binning specification: per-dimension interior bin edges computed
/// from the pooled (both-class) data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinSpec {
    pub names: Vec<String>,
    pub n_bins: usize,
    pub strategy: BinStrategy,
    /// Interior edges per dimension, strictly increasing; a value lands in
    /// bin = number of edges strictly below it.
    pub edges: Vec<Vec<f64>>,
}

impl BinSpec {
    /// Fit edges on pooled data `stats` (rows × k).
    pub fn fit(
        stats: ArrayView2<f64>,
        names: &[&str],
        n_bins: usize,
        strategy: BinStrategy,
    ) -> BinSpec {
        assert!(n_bins >= 2, "BinSpec requires at least two bins");
        assert_eq!(names.len(), stats.ncols());
        let mut edges = Vec::with_capacity(stats.ncols());
        for dim in 0..stats.ncols() {
            let col: Vec<f64> = stats.column(dim).to_vec();
            let mut e = match strategy {
                BinStrategy::EqualWidth => {
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if hi <= lo {
                        Vec::new()
                    } else {
                        (1..n_bins)
                            .map(|i| lo + (hi - lo) * i as f64 / n_bins as f64)
                            .collect()
                    }
                }
                BinStrategy::Quantile => {
                    let mut sorted = col.clone();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    (1..n_bins)
                        .map(|i| {
                            let q = i as f64 / n_bins as f64;
                            let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
                            sorted[idx]
                        })
                        .collect()
                }
            };
            e.dedup_by(|a, b| *a <= *b);
            edges.push(e);
        }
        BinSpec {
            names: names.iter().map(|s| s.to_string()).collect(),
            n_bins,
            strategy,
            edges,
        }
    }

    /// Joint bin key for one stats row.
    pub fn key(&self, row: ArrayView1<f64>) -> Vec<u32> {
        row.iter()
            .zip(&self.edges)
            .map(|(&v, e)| e.partition_point(|&edge| edge < v) as u32)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinReport {
    pub key: Vec<u32>,
    pub count_class0: usize,
    pub count_class1: usize,
    pub retained_per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancedSubset {
    /// Retained sample row indices, sorted.
    pub indices: Vec<usize>,
    pub bins: Vec<BinReport>,
    pub n_occupied_bins: usize,
    pub n_dropped_single_class_bins: usize,
}

/// Within each occupied joint bin with class counts (a, b), retain
/// min(a, b) samples of each class, chosen uniformly at random by `seed`;
/// bins containing one class only are dropped entirely.
pub fn balance_subsample(
    stats: ArrayView2<f64>,
    labels: &[bool],
    spec: &BinSpec,
    seed: u64,
) -> Result<BalancedSubset, ControlsError> {
    if labels.len() != stats.nrows() {
        return Err(ControlsError::ShapeMismatch);
    }
    let mut bins: BTreeMap<Vec<u32>, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..stats.nrows() {
        let key = spec.key(stats.row(i));
        let e = bins.entry(key).or_default();
        if labels[i] { e.1.push(i) } else { e.0.push(i) };
    }
    let n_occupied = bins.len();
    let mut indices = Vec::new();
    let mut reports = Vec::new();
    let mut dropped = 0usize;
    for (bin_no, (key, (c0, c1))) in bins.into_iter().enumerate() {
        let keep = c0.len().min(c1.len());
        if keep == 0 {
            dropped += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x42494e, bin_no as u64]));
        for class in [&c0, &c1] {
            let mut pool = class.clone();
            pool.shuffle(&mut rng);
            indices.extend_from_slice(&pool[..keep]);
        }
        reports.push(BinReport {
            key,
            count_class0: c0.len(),
            count_class1: c1.len(),
            retained_per_class: keep,
        });
    }
    if indices.is_empty() {
        return Err(ControlsError::EmptyResult);
    }
    indices.sort_unstable();
    // Post-balance invariant: class counts per occupied bin are equal.
    debug_assert!(reports.iter().all(|r| r.retained_per_class > 0));
    Ok(BalancedSubset {
        indices,
        bins: reports,
        n_occupied_bins: n_occupied,
        n_dropped_single_class_bins: dropped,
    })
}

/// Uniform per-class sample of `target_per_class` indices without
/// replacement.
pub fn random_downsample(
    labels: &[bool],
    target_per_class: usize,
    seed: u64,
) -> Result<Vec<usize>, ControlsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in [false, true] {
        let mut pool: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if target_per_class > pool.len() {
            return Err(ControlsError::TargetTooLarge {
                target: target_per_class,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..target_per_class]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancedCompare {
    pub balanced: f64,
    pub random: f64,
    pub full: f64,
    pub balanced_per_class: usize,
    pub n_train_full: usize,
    pub n_test: usize,
}

/// Train probes on (a) bin-balanced, (b) size-matched random, and (c) full
/// probe-train data, all evaluated on the same held-out entity-level test
/// set fixed before any subsampling.
pub fn balanced_probe_compare(
    acts: &ActivationTensor,
    labels: &[Option<bool>],
    stats: ArrayView2<f64>,
    stat_names: &[&str],
    n_bins: usize,
    strategy: BinStrategy,
    layer: usize,
    token: usize,
    seed: u64,
) -> Result<BalancedCompare, ControlsError> {
    let n = acts.n_samples();
    if labels.len() != n || stats.nrows() != n {
        return Err(ControlsError::ShapeMismatch);
    }
    // Entity-level 80:20 split, fixed before subsampling.
    let mut entities: Vec<u32> = acts
        .index
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_some())
        .map(|(e, _)| e.entity_id)
        .collect();
    entities.sort_unstable();
    entities.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x48454c44]));
    entities.shuffle(&mut rng);
    let n_train_e = (entities.len() as f64 * 0.8).round() as usize;
    let train_set: BTreeSet<u32> = entities[..n_train_e].iter().copied().collect();

    let labeled = |pred: &dyn Fn(usize) -> bool| -> Vec<usize> {
        (0..n)
            .filter(|&i| labels[i].is_some() && pred(i))
            .collect()
    };
    let train_rows = labeled(&|i| train_set.contains(&acts.index[i].entity_id));
    let test_rows = labeled(&|i| !train_set.contains(&acts.index[i].entity_id));

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
    let label_vec = |rows: &[usize]| -> Vec<bool> {
        rows.iter().map(|&i| labels[i].unwrap()).collect()
    };

    let x_test = features(&test_rows);
    let y_test = label_vec(&test_rows);

    // Balance the probe-train rows only; bin edges from pooled train stats.
    let mut train_stats = Array2::<f64>::zeros((train_rows.len(), stats.ncols()));
    for (r, &i) in train_rows.iter().enumerate() {
        train_stats.row_mut(r).assign(&stats.row(i));
    }
    let spec = BinSpec::fit(train_stats.view(), stat_names, n_bins, strategy);
    let y_train_all = label_vec(&train_rows);
    let balanced =
        balance_subsample(train_stats.view(), &y_train_all, &spec, derive_seed(seed, &[1]))?;
    let balanced_rows: Vec<usize> = balanced.indices.iter().map(|&r| train_rows[r]).collect();
    let per_class = balanced_rows
        .iter()
        .filter(|&&i| labels[i] == Some(true))
        .count();

    let random_local =
        random_downsample(&y_train_all, per_class, derive_seed(seed, &[2]))?;
    let random_rows: Vec<usize> = random_local.iter().map(|&r| train_rows[r]).collect();

    let run = |rows: &[usize], tag: u64| -> Result<f64, ControlsError> {
        let x = features(rows);
        let y = label_vec(rows);
        let l2 = 1.0 / (PROBE_C * x.nrows() as f64);
        let model = train_probe(x.view(), &y, l2, derive_seed(seed, &[3, tag]))?;
        Ok(eval_probe(&model, x_test.view(), &y_test)?)
    };

    Ok(BalancedCompare {
        balanced: run(&balanced_rows, 0)?,
        random: run(&random_rows, 1)?,
        full: run(&train_rows, 2)?,
        balanced_per_class: per_class,
        n_train_full: train_rows.len(),
        n_test: test_rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::SampleIndex;
    use crate::datagen::ProbeSplit;
    use crate::model::{Model, ModelConfig, Params};
    use ndarray::{array, Array4};
    use rand::Rng;

    fn uniform_model(vocab: usize) -> Model<f64> {
        let config = ModelConfig { n_layers: 1, d_model: 4, n_heads: 1, d_ff: 8, vocab_size: vocab, max_context: 16 };
        Model { params: Params::zeros(&config), config, history: Vec::new() }
    }

    #[test]
    fn activation_stats_trivials() {
        let s = activation_stats(&[2.0; 5]);
        assert!((s.l2_norm - 2.0 * 5.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.max, 2.0);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.kurtosis, 0.0);

        // Symmetric vector: zero skewness.
        let sym = activation_stats(&[-3.0, -1.0, 1.0, 3.0]);
        assert!(sym.skewness.abs() < 1e-12);
    }

    #[test]
    fn activation_stats_direct_definition_oracle() {
        // v = [1, 2, 3, 4] evaluated longhand, plus random vectors compared
        // against a from-the-definition evaluation at 1e-10.
        let s = activation_stats(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.l2_norm - 30.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.max, 4.0);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
        assert!(s.skewness.abs() < 1e-12);
        // m4 = (1.5^4 + 0.5^4 + 0.5^4 + 1.5^4)/4 = 2.5625; kurt = m4/σ⁴ = 1.64
        assert!((s.kurtosis - 2.5625 / (1.25 * 1.25)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let v: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let s = activation_stats(&v);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
            let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            assert!((s.mean - mean).abs() < 1e-10);
            assert!((s.std - m2.sqrt()).abs() < 1e-10);
            assert!((s.skewness - m3 / m2.powf(1.5)).abs() < 1e-10);
            assert!((s.kurtosis - m4 / (m2 * m2)).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_stats_closed_forms() {
        let v = 50usize;
        let s = logit_stats(&vec![0.0; v]);
        assert!((s.entropy - (v as f64).ln()).abs() < 1e-12);

        // Dominant logit: entropy tends to zero.
        let mut z = vec![0.0; 10];
        z[0] = 50.0;
        assert!(logit_stats(&z).entropy < 1e-12);

        // z = [0, ln 3]: entropy = ln 4 − (3/4) ln 3; logsumexp = ln 4.
        let s2 = logit_stats(&[0.0, 3.0f64.ln()]);
        assert!((s2.logsumexp - 4.0f64.ln()).abs() < 1e-12);
        assert!((s2.entropy - (4.0f64.ln() - 0.75 * 3.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn backward_stats_uniform_model() {
        let v = 12;
        let model = uniform_model(v);
        let prompt = [1usize, 2, 3, 4, 5];
        let s = backward_stats(&model, &prompt, 4).unwrap();
        let ln_v = (v as f64).ln();
        assert!((s.mean_log_likelihood + ln_v).abs() < 1e-9);
        assert!((s.min_entropy - ln_v).abs() < 1e-9);
        assert!((s.max_entropy - ln_v).abs() < 1e-9);
        assert!((s.cumulative_entropy - 4.0 * ln_v).abs() < 1e-9);

        // Cumulative entropy non-decreasing in position.
        let s1 = backward_stats(&model, &prompt, 1).unwrap();
        let s2 = backward_stats(&model, &prompt, 2).unwrap();
        assert!(s1.cumulative_entropy <= s2.cumulative_entropy);
        assert!(s2.cumulative_entropy <= s.cumulative_entropy);
    }

    #[test]
    fn forward_gen_stats_uniform_model() {
        let v = 12;
        let model = uniform_model(v);
        let s = forward_gen_stats(&model, &[1, 2], 5, 1.0, 10, None, 0).unwrap();
        assert_eq!(s.horizons, vec![3, 5, 10]);
        for (&e, &p) in s.entropy_at.iter().zip(&s.perplexity_at) {
            assert!((e - (v as f64).ln()).abs() < 1e-9);
            assert!((p - v as f64).abs() < 1e-6);
        }
        assert!((s.length_mean - 10.0).abs() < 1e-12);
        assert_eq!(s.length_std, 0.0);
        assert!(!s.jaccard_degenerate);
        assert!(s.vocab_fraction <= 1.0 && s.vocab_fraction > 0.0);

        // n = 1: pairwise Jaccard degenerates to the policy value.
        let s1 = forward_gen_stats(&model, &[1, 2], 1, 1.0, 5, None, 0).unwrap();
        assert!(s1.jaccard_degenerate);
        assert_eq!(s1.pairwise_jaccard, 1.0);
    }

    #[test]
    fn forward_gen_stats_identical_continuations() {
        // Temperature 0 makes all continuations identical argmax paths.
        let v = 12;
        let model = uniform_model(v);
        let s = forward_gen_stats(&model, &[1, 2], 4, 0.0, 6, None, 0).unwrap();
        assert!((s.pairwise_jaccard - 1.0).abs() < 1e-12);
        // One unique continuation: bigram ratio equals unique/total on it.
        let expected = 1.0 / ((6 - 1) * 4) as f64 * 1.0; // all 4 share one repeated bigram
        // The argmax path repeats one token, so there is exactly 1 distinct
        // bigram over 5 bigrams per sequence × 4 sequences.
        assert!((s.distinct_bigram_ratio - expected).abs() < 1e-12);
    }

    #[test]
    fn balance_hand_enumerated_example() {
        // k=1, N=2: class A bin counts [3, 1], class B [1, 3].
        let stats = array![[0.1], [0.2], [0.3], [0.9], [0.15], [0.8], [0.85], [0.95]];
        let labels = [false, false, false, false, true, true, true, true];
        let spec = BinSpec {
            names: vec!["s".into()],
            n_bins: 2,
            strategy: BinStrategy::EqualWidth,
            edges: vec![vec![0.5]],
        };
        let out = balance_subsample(stats.view(), &labels, &spec, 0).unwrap();
        assert_eq!(out.indices.len(), 4);
        for r in &out.bins {
            assert_eq!(r.retained_per_class, 1);
        }
        let kept_a = out.indices.iter().filter(|&&i| !labels[i]).count();
        assert_eq!(kept_a, 2);
    }

    #[test]
    fn balance_identical_distributions_keeps_most() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1000;
        let mut stats = Array2::<f64>::zeros((n, 1));
        let mut labels = Vec::new();
        for i in 0..n {
            stats[[i, 0]] = rng.gen::<f64>();
            labels.push(i % 2 == 0);
        }
        let spec = BinSpec::fit(stats.view(), &["s"], 5, BinStrategy::Quantile);
        let out = balance_subsample(stats.view(), &labels, &spec, 2).unwrap();
        assert!(out.indices.len() >= (n as f64 * 0.85) as usize);
        // Exact per-bin class equality.
        for r in &out.bins {
            assert!(r.retained_per_class <= r.count_class0.min(r.count_class1));
        }
    }

    #[test]
    fn balance_empty_result() {
        let stats = array![[0.0], [0.0], [1.0], [1.0]];
        let labels = [false, false, true, true];
        let spec = BinSpec {
            names: vec!["s".into()],
            n_bins: 2,
            strategy: BinStrategy::EqualWidth,
            edges: vec![vec![0.5]],
        };
        assert!(matches!(
            balance_subsample(stats.view(), &labels, &spec, 0),
            Err(ControlsError::EmptyResult)
        ));
    }

    #[test]
    fn random_downsample_contracts() {
        let labels = [false; 10].iter().chain([true; 10].iter()).cloned().collect::<Vec<_>>();
        let full = random_downsample(&labels, 10, 0).unwrap();
        assert_eq!(full, (0..20).collect::<Vec<_>>());
        let sub = random_downsample(&labels, 4, 7).unwrap();
        assert_eq!(sub.len(), 8);
        assert_eq!(sub.iter().filter(|&&i| labels[i]).count(), 4);
        assert_eq!(sub, random_downsample(&labels, 4, 7).unwrap());
        assert!(matches!(
            random_downsample(&labels, 11, 0),
            Err(ControlsError::TargetTooLarge { .. })
        ));
    }

    fn compare_fixture(
        signal_in_stat: bool,
        seed: u64,
    ) -> (ActivationTensor, Vec<Option<bool>>, Array2<f64>) {
        // Feature x in R^4. Class signal lives in x0 (shift +2).
        // The balancing statistic is either x0 itself (signal_in_stat) or
        // the independent coordinate x1.
        let n_per = 400;
        let n = 2 * n_per;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Array4::<f32>::zeros((n, 1, 1, 4));
        let mut index = Vec::new();
        let mut labels = Vec::new();
        let mut stats = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let class = i < n_per;
            let mut x = [0.0f64; 4];
            for v in x.iter_mut() {
                *v = rng.sample(rand_distr::StandardNormal);
            }
            if class {
                x[0] += 3.0;
            }
            for j in 0..4 {
                data[[i, 0, 0, j]] = x[j] as f32;
            }
            stats[[i, 0]] = if signal_in_stat { x[0] } else { x[1] };
            index.push(SampleIndex {
                entity_id: i as u32,
                stage: if class { 1 } else { 2 },
                probe_split: ProbeSplit::ProbeTrain,
                prompt_id: 1,
            });
            labels.push(Some(class));
        }
        (ActivationTensor { data, index, fingerprint: "test".into() }, labels, stats)
    }

    #[test]
    fn balanced_compare_signal_orthogonal_to_stats() {
        let (acts, labels, stats) = compare_fixture(false, 3);
        let out = balanced_probe_compare(
            &acts, &labels, stats.view(), &["x1"], 10, BinStrategy::Quantile, 0, 0, 5,
        )
        .unwrap();
        assert!(out.full > 0.85);
        assert!((out.balanced - out.random).abs() <= 0.08, "{out:?}");
        assert!(out.balanced > 0.8);
    }

    #[test]
    fn balanced_compare_signal_is_the_statistic() {
        let (acts, labels, stats) = compare_fixture(true, 4);
        let out = balanced_probe_compare(
            &acts, &labels, stats.view(), &["x0"], 20, BinStrategy::Quantile, 0, 0, 6,
        )
        .unwrap();
        assert!(out.random > 0.75, "{out:?}");
        assert!((out.balanced - 0.5).abs() <= 0.12, "{out:?}");
    }
}
