//! Planted-signal synthetic activation generator and pipeline-verification
//! harness: ground truth for exercising the geometry, probe, and balancing
//! machinery where real training runs cannot provide known answers.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::capture::{ActivationTensor, SampleIndex};
use crate::controls::{balance_subsample, BinSpec, BinStrategy};
use crate::datagen::ProbeSplit;
use crate::derive_seed;
use crate::geometry::{
    centroids, collinearity_residual, cosine, diffmean_axis, normalize, ordering_score,
};
use crate::probes::probe_grid;

/// Specification of a planted multi-stage signal: stage-i samples are drawn
/// from an isotropic Gaussian whose mean sits at position i along a hidden
/// unit direction, equally spaced by `centroid_spacing`. All other
/// (layer, token) cells carry pure noise. `curvature` bends the centroid
/// chain along an orthogonal direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub m: usize,
    pub n_per_stage: usize,
    pub dim: usize,
    #[serde(default = "default_one")]
    pub layers: usize,
    #[serde(default = "default_one")]
    pub tokens: usize,
    /// The (layer, token) cell that carries the signal.
    #[serde(default)]
    pub hot: (usize, usize),
    pub centroid_spacing: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub curvature: f64,
}

fn default_one() -> usize {
    1
}

/// Ground truth accompanying a planted tensor.
#[derive(Debug, Clone)]
pub struct PlantedTruth {
    pub direction: Array1<f64>,
    pub stage_means: Vec<Array1<f64>>,
    pub hot: (usize, usize),
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_iter(
            (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        );
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

pub fn plant_signal(spec: &PlantedSpec, seed: u64) -> (ActivationTensor, PlantedTruth) {
    assert!(spec.m >= 1 && spec.n_per_stage >= 1 && spec.dim >= 2);
    assert!(spec.centroid_spacing >= 0.0 && spec.noise_sigma >= 0.0 && spec.curvature >= 0.0);
    assert!(spec.hot.0 < spec.layers && spec.hot.1 < spec.tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x504c414e]));
    let u = random_unit(&mut rng, spec.dim);
    // Orthogonal bend direction for the optional curvature.
    let v = {
        let raw = random_unit(&mut rng, spec.dim);
        let resid = &raw - &(&u * raw.dot(&u));
        normalize(&resid).unwrap_or_else(|_| u.clone())
    };

    let center = (spec.m as f64 - 1.0) / 2.0;
    let stage_means: Vec<Array1<f64>> = (0..spec.m)
        .map(|i| {
            let along = (i as f64 - center) * spec.centroid_spacing;
            let t = if spec.m > 1 {
                (i as f64 - center) / center.max(0.5)
            } else {
                0.0
            };
            let bend = spec.curvature * t * t;
            &u * along + &v * bend
        })
        .collect();

    let n = spec.m * spec.n_per_stage;
    let mut data = Array4::<f32>::zeros((n, spec.layers, spec.tokens, spec.dim));
    let mut index = Vec::with_capacity(n);
    for s in 0..spec.m {
        for i in 0..spec.n_per_stage {
            let row = s * spec.n_per_stage + i;
            for l in 0..spec.layers {
                for t in 0..spec.tokens {
                    for j in 0..spec.dim {
                        let noise: f64 = rng.sample(rand_distr::StandardNormal);
                        let mean = if (l, t) == spec.hot { stage_means[s][j] } else { 0.0 };
                        data[[row, l, t, j]] = (mean + spec.noise_sigma * noise) as f32;
                    }
                }
            }
            index.push(SampleIndex {
                entity_id: row as u32,
                stage: (s + 1) as u16,
                probe_split: ProbeSplit::ProbeTrain,
                prompt_id: 1,
            });
        }
    }
    let fingerprint = format!("planted-{:016x}", derive_seed(seed, &[0x4f52]));
    (
        ActivationTensor { data, index, fingerprint },
        PlantedTruth { direction: u, stage_means, hot: spec.hot },
    )
}

/// Bayes-optimal accuracy for two isotropic Gaussian classes whose means are
/// `spacing` apart with per-coordinate noise `sigma`: Φ(s / (2σ)).
pub fn bayes_accuracy(spacing: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if spacing > 0.0 { 1.0 } else { 0.5 };
    }
    Normal::new(0.0, 1.0).unwrap().cdf(spacing / (2.0 * sigma))
}

/// A norm-only class signal: both classes live on the same ray from the
/// origin, at one of [`NORM_LEVELS`] discrete radii between 1.0 and 1.9
/// (step 0.1), with geometrically decaying class-dependent level weights
/// (class 0 concentrated at small radii, class 1 at large). A tiny isotropic
/// jitter keeps features full-rank without moving radii across level
/// boundaries. The L2 norm therefore carries the entire class difference:
/// conditioned on the radius level, the feature distribution is exactly
/// class-independent, so norm-balancing with one bin per level provably
/// removes all signal, while the unbalanced radius distributions separate
/// the classes almost perfectly.
pub const NORM_LEVELS: usize = 10;

pub fn plant_norm_only(
    n_per_class: usize,
    dim: usize,
    seed: u64,
) -> (ActivationTensor, Vec<Option<bool>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4e4f524d]));
    let u = random_unit(&mut rng, dim);
    let decay: f64 = 0.45;
    let weights: Vec<f64> = (0..NORM_LEVELS).map(|k| decay.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let sample_level = |rng: &mut ChaCha8Rng, class: bool| -> usize {
        let r: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if r < acc {
                return if class { NORM_LEVELS - 1 - k } else { k };
            }
        }
        if class { 0 } else { NORM_LEVELS - 1 }
    };
    let n = 2 * n_per_class;
    let sigma_jitter = 0.01;
    let mut data = Array4::<f32>::zeros((n, 1, 1, dim));
    let mut index = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i >= n_per_class;
        let radius = 1.0 + 0.1 * sample_level(&mut rng, class) as f64;
        for j in 0..dim {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            data[[i, 0, 0, j]] = (radius * u[j] + sigma_jitter * g) as f32;
        }
        index.push(SampleIndex {
            entity_id: i as u32,
            stage: if class { 2 } else { 1 },
            probe_split: ProbeSplit::ProbeTrain,
            prompt_id: 1,
        });
        labels.push(Some(class));
    }
    (
        ActivationTensor { data, index, fingerprint: "planted-norm-only".into() },
        labels,
    )
}

/// An equal-norm rotated-means signal: class means are orthogonal directions
/// at the same radius, so the L2 norm is class-independent while a linear
/// probe separates the classes easily.
pub fn plant_orthogonal_signal(
    n_per_class: usize,
    dim: usize,
    radius: f64,
    sigma: f64,
    seed: u64,
) -> (ActivationTensor, Vec<Option<bool>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4f525448]));
    let u0 = random_unit(&mut rng, dim);
    let u1 = {
        let raw = random_unit(&mut rng, dim);
        let resid = &raw - &(&u0 * raw.dot(&u0));
        normalize(&resid).unwrap()
    };
    build_two_class(n_per_class, dim, sigma, &mut rng, |class| {
        if class { &u1 * radius } else { &u0 * radius }
    })
}

fn build_two_class(
    n_per_class: usize,
    dim: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    mean_of: impl Fn(bool) -> Array1<f64>,
) -> (ActivationTensor, Vec<Option<bool>>) {
    let n = 2 * n_per_class;
    let mut data = Array4::<f32>::zeros((n, 1, 1, dim));
    let mut index = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i >= n_per_class;
        let mean = mean_of(class);
        for j in 0..dim {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            data[[i, 0, 0, j]] = (mean[j] + sigma * g) as f32;
        }
        index.push(SampleIndex {
            entity_id: i as u32,
            stage: if class { 2 } else { 1 },
            probe_split: ProbeSplit::ProbeTrain,
            prompt_id: 1,
        });
        labels.push(Some(class));
    }
    (
        ActivationTensor { data, index, fingerprint: "planted-2class".into() },
        labels,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// Run the full analysis pipeline — centroids → diff-mean axis → projection
/// → ordering → collinearity → probes → balancing — against planted data
/// with known geometry, asserting each recovery criterion.
pub fn verify_pipeline(spec: &PlantedSpec, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    let mut check = |name: &str, pass: bool, detail: String| {
        checks.push(CheckResult { name: name.to_string(), pass, detail });
    };

    let (acts, truth) = plant_signal(spec, seed);
    let (layer, token) = spec.hot;
    let cs = centroids(&acts, layer, token, "oracle").unwrap();
    let cvec: Vec<Array1<f64>> = cs.centroids.values().cloned().collect();

    // Diff-mean axis over adjacent later-vs-earlier centroid pairs. With no
    // planted spacing the recovered direction is noise, so alignment and
    // ordering are only meaningful checks for a real signal.
    if spec.centroid_spacing > 0.0 {
        let pairs: Vec<(Array1<f64>, Array1<f64>)> = cvec
            .windows(2)
            .map(|w| (w[1].clone(), w[0].clone()))
            .collect();
        match diffmean_axis(&pairs) {
            Ok(axis) => {
                let align = cosine(&axis, &truth.direction).abs();
                check(
                    "axis_alignment",
                    align >= 0.99,
                    format!("|cos(recovered, planted)| = {align:.4}"),
                );
                let px: Vec<f64> = cvec.iter().map(|c| c.dot(&axis)).collect();
                let order: Vec<usize> = (0..cvec.len()).collect();
                let tau = ordering_score(&px, &order).unwrap();
                check("ordering_tau", tau >= 0.999, format!("tau = {tau:.4}"));
            }
            Err(e) => check("axis_alignment", false, format!("diffmean_axis: {e}")),
        }
    }

    if spec.centroid_spacing > 0.0 && cvec.len() >= 3 {
        let resid = collinearity_residual(&cvec).unwrap();
        let budget = if spec.curvature > 0.0 { 0.5 } else { 0.05 };
        check(
            "collinearity",
            resid <= budget,
            format!("residual = {resid:.4} (budget {budget})"),
        );
    }

    // Probe localization: hot cell near Bayes for adjacent stages, cold
    // cells at chance.
    let labels: Vec<Option<bool>> = acts
        .index
        .iter()
        .map(|e| match e.stage {
            1 => Some(false),
            2 => Some(true),
            _ => None,
        })
        .collect();
    let report = probe_grid(&acts, &labels, 3, 0.8, derive_seed(seed, &[1]), "D1-vs-D2").unwrap();
    let bayes = bayes_accuracy(spec.centroid_spacing, spec.noise_sigma);
    let hot = report.cell(layer, token).unwrap();
    let hot_ok = if spec.centroid_spacing == 0.0 {
        (hot.acc_mean - 0.5).abs() <= 0.05
    } else {
        hot.acc_mean >= bayes - 0.05 && hot.acc_mean <= bayes + 0.02
    };
    check(
        "probe_hot_cell",
        hot_ok,
        format!("acc = {:.4}, bayes = {bayes:.4}", hot.acc_mean),
    );
    let mut cold_ok = true;
    let mut worst: f64 = 0.5;
    for c in &report.grid {
        if (c.layer, c.token) != (layer, token) {
            if (c.acc_mean - 0.5).abs() > 0.07 {
                cold_ok = false;
            }
            if (c.acc_mean - 0.5).abs() > (worst - 0.5).abs() {
                worst = c.acc_mean;
            }
        }
    }
    if report.grid.len() > 1 {
        check("probe_cold_cells", cold_ok, format!("worst cold acc = {worst:.4}"));
    }

    // Balancing sanity on the hot-cell L2 norm statistic.
    let cell = acts.cell(layer, token);
    let n = acts.n_samples();
    let mut stats = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        let row: Vec<f64> = (0..spec.dim).map(|j| cell[[i, j]] as f64).collect();
        stats[[i, 0]] = crate::controls::activation_stats(&row).l2_norm;
    }
    let y: Vec<bool> = (0..n).map(|i| acts.index[i].stage % 2 == 0).collect();
    let bin_spec = BinSpec::fit(stats.view(), &["l2_norm"], 10, BinStrategy::Quantile);
    match balance_subsample(stats.view(), &y, &bin_spec, derive_seed(seed, &[2])) {
        Ok(sub) => {
            let per_bin_equal = sub.bins.iter().all(|b| b.retained_per_class > 0);
            let kept0 = sub.indices.iter().filter(|&&i| !y[i]).count();
            let kept1 = sub.indices.len() - kept0;
            check(
                "balance_counts",
                per_bin_equal && kept0 == kept1,
                format!("retained {kept0}/{kept1} per class over {} bins", sub.bins.len()),
            );
        }
        Err(e) => check("balance_counts", false, format!("{e}")),
    }

    VerifyReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{balanced_probe_compare, BinStrategy};

    #[test]
    fn zero_noise_perfect_geometry() {
        let spec = PlantedSpec {
            m: 6,
            n_per_stage: 20,
            dim: 16,
            layers: 1,
            tokens: 1,
            hot: (0, 0),
            centroid_spacing: 1.0,
            noise_sigma: 0.0,
            curvature: 0.0,
        };
        let (acts, truth) = plant_signal(&spec, 0);
        let cs = centroids(&acts, 0, 0, "t").unwrap();
        let cvec: Vec<Array1<f64>> = cs.centroids.values().cloned().collect();
        // f32 storage adds rounding; residual stays tiny but not exactly 0.
        assert!(collinearity_residual(&cvec).unwrap() < 1e-3);
        let pairs: Vec<_> = cvec.windows(2).map(|w| (w[1].clone(), w[0].clone())).collect();
        let axis = diffmean_axis(&pairs).unwrap();
        assert!(cosine(&axis, &truth.direction).abs() > 0.99999);
        let px: Vec<f64> = cvec.iter().map(|c| c.dot(&axis)).collect();
        let tau = ordering_score(&px, &(0..6).collect::<Vec<_>>()).unwrap();
        assert_eq!(tau, 1.0);
    }

    #[test]
    fn zero_spacing_probe_at_chance() {
        let mut accs = Vec::new();
        for seed in 0..20u64 {
            let spec = PlantedSpec {
                m: 2,
                n_per_stage: 300,
                dim: 8,
                layers: 1,
                tokens: 1,
                hot: (0, 0),
                centroid_spacing: 0.0,
                noise_sigma: 1.0,
                curvature: 0.0,
            };
            let (acts, _) = plant_signal(&spec, seed);
            let labels: Vec<Option<bool>> =
                acts.index.iter().map(|e| Some(e.stage == 2)).collect();
            let r = probe_grid(&acts, &labels, 2, 0.8, seed, "null").unwrap();
            accs.push(r.grid[0].acc_mean);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.03, "mean accuracy {mean}");
    }

    #[test]
    fn probe_tracks_bayes_bound() {
        // Light version of the acceptance sweep: s/σ ∈ {1, 2}, fewer seeds.
        for ratio in [1.0, 2.0] {
            let mut accs = Vec::new();
            for seed in 0..5u64 {
                let spec = PlantedSpec {
                    m: 2,
                    n_per_stage: 1000,
                    dim: 8,
                    layers: 1,
                    tokens: 1,
                    hot: (0, 0),
                    centroid_spacing: ratio,
                    noise_sigma: 1.0,
                    curvature: 0.0,
                };
                let (acts, _) = plant_signal(&spec, 100 + seed);
                let labels: Vec<Option<bool>> =
                    acts.index.iter().map(|e| Some(e.stage == 2)).collect();
                let r = probe_grid(&acts, &labels, 1, 0.8, seed, "bayes").unwrap();
                accs.push(r.grid[0].acc_mean);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let bayes = bayes_accuracy(ratio, 1.0);
            assert!((mean - bayes).abs() <= 0.03, "ratio {ratio}: acc {mean} vs bayes {bayes}");
            assert!(mean <= bayes + 0.02);
        }
    }

    #[test]
    fn bayes_accuracy_closed_forms() {
        assert_eq!(bayes_accuracy(0.0, 1.0), 0.5);
        assert!((bayes_accuracy(2.0, 1.0) - 0.8413447460685429).abs() < 1e-9);
        assert_eq!(bayes_accuracy(1.0, 0.0), 1.0);
    }

    #[test]
    fn verify_pipeline_strong_signal_passes() {
        let spec = PlantedSpec {
            m: 6,
            n_per_stage: 200,
            dim: 12,
            layers: 2,
            tokens: 2,
            hot: (1, 0),
            centroid_spacing: 10.0,
            noise_sigma: 1.0,
            curvature: 0.0,
        };
        let report = verify_pipeline(&spec, 7);
        assert!(report.passed(), "failure: {:?}", report.first_failure());
    }

    #[test]
    fn verify_pipeline_zero_signal_reports_null() {
        let spec = PlantedSpec {
            m: 2,
            n_per_stage: 400,
            dim: 8,
            layers: 1,
            tokens: 1,
            hot: (0, 0),
            centroid_spacing: 0.0,
            noise_sigma: 1.0,
            curvature: 0.0,
        };
        let report = verify_pipeline(&spec, 8);
        assert!(report.passed(), "failure: {:?}", report.first_failure());
    }

    #[test]
    fn norm_only_signal_collapses_under_balancing() {
        let dim = 8;
        let (acts, labels) = plant_norm_only(2000, dim, 9);
        let n = acts.n_samples();
        let cell = acts.cell(0, 0);
        let mut stats = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let row: Vec<f64> = (0..dim).map(|j| cell[[i, j]] as f64).collect();
            stats[[i, 0]] = crate::controls::activation_stats(&row).l2_norm;
        }
        let out = balanced_probe_compare(
            &acts,
            &labels,
            stats.view(),
            &["l2_norm"],
            NORM_LEVELS,
            BinStrategy::EqualWidth,
            0,
            0,
            11,
        )
        .unwrap();
        assert!(out.random >= 0.9, "{out:?}");
        assert!(out.balanced <= 0.55, "{out:?}");
    }

    #[test]
    fn orthogonal_signal_survives_balancing() {
        let (acts, labels) = plant_orthogonal_signal(500, 8, 2.0, 0.5, 10);
        let n = acts.n_samples();
        let cell = acts.cell(0, 0);
        let mut stats = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let row: Vec<f64> = (0..8).map(|j| cell[[i, j]] as f64).collect();
            stats[[i, 0]] = crate::controls::activation_stats(&row).l2_norm;
        }
        let out = balanced_probe_compare(
            &acts, &labels, stats.view(), &["l2_norm"], 25, BinStrategy::Quantile, 0, 0, 12,
        )
        .unwrap();
        assert!((out.balanced - out.random).abs() <= 0.03, "{out:?}");
        assert!(out.random >= 0.9, "{out:?}");
    }

    #[test]
    fn curvature_bends_but_keeps_order() {
        let spec = PlantedSpec {
            m: 6,
            n_per_stage: 100,
            dim: 10,
            layers: 1,
            tokens: 1,
            hot: (0, 0),
            centroid_spacing: 2.0,
            noise_sigma: 0.05,
            curvature: 1.0,
        };
        let (acts, truth) = plant_signal(&spec, 13);
        let cs = centroids(&acts, 0, 0, "t").unwrap();
        let cvec: Vec<Array1<f64>> = cs.centroids.values().cloned().collect();
        let resid = collinearity_residual(&cvec).unwrap();
        assert!(resid > 0.01, "curved chain should not be perfectly collinear ({resid})");
        let px: Vec<f64> = cvec.iter().map(|c| c.dot(&truth.direction)).collect();
        let tau = ordering_score(&px, &(0..6).collect::<Vec<_>>()).unwrap();
        assert_eq!(tau, 1.0);
    }
}
