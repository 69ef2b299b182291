//! End-to-end experiment orchestration: every variant runs data generation,
//! a training schedule, activation capture, and the variant's analyses from
//! one declarative config, leaving a self-contained run directory behind.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{capture_activations, write_actv, ActivationTensor, CaptureError};
use crate::controls::ControlsError;
use crate::datagen::{
    self, alias_positions, gen_aliases, gen_entities, partition_stages, render_pattern,
    render_test_prompts,
    render_training_set, split_probe, stage_report_pattern, Alias, DatagenError, EntityRecord,
    ProbeSplit, QASample, StagePlan, Variant, Vocabulary, ALIAS_ALPHABET_SIZE, ATTR_KINDS,
    STAGE_LETTERS,
};
use crate::derive_seed;
use crate::geometry::{
    centroids, collinearity_residual, diffmean_axis, ordering_score, project, residual_pc_axis,
    Axis2D, GeometryError,
};
use crate::model::{
    init_model, sequential_finetune, train_stage, LossMask, Model, ModelConfig, ModelError,
    StageLosses, TrainConfig, TrainSample,
};
use crate::probes::{eval_probe, probe_grid, train_probe, ProbeError, ProbeReport, PROBE_C};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("in {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Controls(#[from] ControlsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn in_stage<T>(
    stage: &str,
    r: Result<T, impl Into<ExperimentError>>,
) -> Result<T, ExperimentError> {
    r.map_err(|e| ExperimentError::Stage {
        stage: stage.to_string(),
        source: Box::new(e.into()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanityMode {
    MixedFromStart,
    Untrained,
    ShuffledLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VariantSpec {
    SixStage,
    TwoStage,
    CheckpointTrajectory,
    Reexposure { stage: u16 },
    ExtraEpochs { stage: u16, epochs: u32 },
    Washout {
        #[serde(default = "default_washout_epochs")]
        extra_epochs: u32,
    },
    SingleEpochDense,
    DatapointLevel,
    StageReport,
    Sanity { mode: SanityMode },
}

fn default_washout_epochs() -> u32 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub n_entities: usize,
    pub m: usize,
    pub samples_per_entity: usize,
    pub epochs_per_stage: u32,
    pub probe_ratio: f64,
    pub text_variant: Variant,
    /// Mixed-data epochs appended to six_stage runs for the washout curve
    /// (the standalone washout variant carries its own count).
    pub washout_epochs: u32,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            n_entities: 2400,
            m: 6,
            samples_per_entity: 4,
            epochs_per_stage: 5,
            probe_ratio: 0.8,
            text_variant: Variant::Synthetic,
            washout_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss_mask: LossMask,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_context: 48,
            learning_rate: 1e-3,
            batch_size: 32,
            // Standard causal LM loss over the whole sample: alias subtokens
            // are targets too, which is what makes trained aliases
            // behaviorally recognizable.
            loss_mask: LossMask::AllTokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeParams {
    pub n_splits: usize,
    /// Test-prompt template used for capture (1..=4).
    pub prompt_id: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams { n_splits: 5, prompt_id: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: VariantSpec,
    #[serde(default)]
    pub data: DataParams,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub probe: ProbeParams,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub run: String,
    pub stage: u16,
    pub layer: usize,
    pub token: usize,
    pub px: f64,
    pub py: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub vocab_size: usize,
    pub checkpoint_fingerprints: Vec<String>,
    pub stage_losses: Vec<StageLosses>,
    pub probe_grid: Option<ProbeReport>,
    pub grid_max: Option<f64>,
    /// Best (layer, token) cell of the main probe grid.
    pub reference_cell: Option<(usize, usize)>,
    /// Upper-triangular stage-i-vs-stage-j accuracies; `None` entries are
    /// the unused diagonal/lower triangle.
    pub pairwise: Option<Vec<Vec<Option<f64>>>>,
    pub ordering_tau: Option<f64>,
    pub collinearity_residual: Option<f64>,
    pub projection_rows: usize,
    pub washout_curve: Vec<f64>,
    pub stage_report_accuracy: Option<f64>,
    pub seen_unseen_accuracy: Option<f64>,
    pub datapoint_grid: Option<ProbeReport>,
    /// Per-stage projected x position at the reference cell, stage order.
    pub stage_px: Vec<f64>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Content hash excluding the wall clock (which legitimately varies
    /// between otherwise identical runs).
    pub fn determinism_hash(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_seconds = 0.0;
        sha256_hex(&serde_json::to_vec(&clone).unwrap())
    }
}

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

/// Stage-report QA datasets: one "which stage is this alias from?" sample per
/// alias, answered with the stage letter. Returns (fine-tune set from
/// probe-train aliases, evaluation set from probe-test aliases).
pub fn make_stage_report_dataset(
    vocab: &Vocabulary,
    aliases: &[Alias],
    plan: &StagePlan,
) -> (Vec<QASample>, Vec<QASample>) {
    // The shared pattern is answerless; append the ANSWER slot so training
    // samples carry the stage letter as the target token.
    let mut pattern: Vec<String> =
        stage_report_pattern().iter().map(|s| s.to_string()).collect();
    pattern.push("ANSWER".to_string());
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, alias) in aliases.iter().enumerate() {
        let stage = plan.stage_of[i];
        let letter = STAGE_LETTERS[(stage - 1) as usize];
        let (prompt_tokens, answer_tokens, text) =
            render_pattern(vocab, &pattern, alias, Some(letter));
        let sample = QASample {
            entity_id: alias.entity_id,
            stage,
            probe_split: plan.probe_split[i],
            template_id: 0,
            prompt_tokens,
            answer_tokens,
            variant: Variant::Synthetic,
            text,
        };
        match plan.probe_split[i] {
            ProbeSplit::ProbeTrain => train.push(sample),
            ProbeSplit::ProbeTest => eval.push(sample),
        }
    }
    (train, eval)
}

/// Datapoint-level datasets: every entity appears in both stages, but each
/// question kind belongs globally to exactly one stage, so the only temporal
/// signal lives at the question-type level. `kind_stage[k]` assigns attribute
/// kind `k` to stage 1 or 2; within each stage the highest-index kind is held
/// out as probe-test (question-type holdout, not entity holdout).
pub fn make_datapoint_level_dataset(
    vocab: &Vocabulary,
    entities: &[EntityRecord],
    aliases: &[Alias],
    kind_stage: &[u16; 6],
) -> Result<Vec<QASample>, ExperimentError> {
    for s in [1u16, 2] {
        if !kind_stage.contains(&s) {
            return Err(ExperimentError::Config(format!(
                "kind_stage must use both stages, got {kind_stage:?}"
            )));
        }
    }
    if kind_stage.iter().any(|&s| s != 1 && s != 2) {
        return Err(ExperimentError::Config(format!(
            "kind_stage entries must be 1 or 2, got {kind_stage:?}"
        )));
    }
    // Held-out kind per stage: the highest kind index assigned to it.
    let heldout: Vec<usize> = [1u16, 2]
        .iter()
        .map(|&s| {
            (0..6).rev().find(|&k| kind_stage[k] == s).unwrap()
        })
        .collect();
    let mut out = Vec::new();
    for (entity, alias) in entities.iter().zip(aliases) {
        for (k, &kind) in ATTR_KINDS.iter().enumerate() {
            let stage = kind_stage[k];
            let answer = entity.attr_value(kind);
            let pat: Vec<String> = datagen::synthetic_pattern(kind)
                .iter()
                .map(|s| s.to_string())
                .collect();
            let (prompt_tokens, answer_tokens, text) =
                render_pattern(vocab, &pat, alias, Some(&answer));
            out.push(QASample {
                entity_id: entity.entity_id,
                stage,
                probe_split: if heldout.contains(&k) {
                    ProbeSplit::ProbeTest
                } else {
                    ProbeSplit::ProbeTrain
                },
                template_id: k as u32,
                prompt_tokens,
                answer_tokens,
                variant: Variant::Synthetic,
                text,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct Pipeline {
    cfg: ExperimentConfig,
    run_dir: PathBuf,
    vocab: Vocabulary,
    entities: Vec<EntityRecord>,
    aliases: Vec<Alias>,
    plan: StagePlan,
    artifacts: Vec<String>,
}

impl Pipeline {
    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    fn write_text(&mut self, rel: &str, content: &str) -> Result<(), ExperimentError> {
        fs::write(self.path(rel), content)?;
        self.record(rel);
        Ok(())
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.cfg.model.n_layers,
            d_model: self.cfg.model.d_model,
            n_heads: self.cfg.model.n_heads,
            d_ff: self.cfg.model.d_ff,
            vocab_size: self.vocab.len(),
            max_context: self.cfg.model.max_context,
        }
    }

    fn train_config(&self, tag: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.cfg.model.learning_rate,
            batch_size: self.cfg.model.batch_size,
            epochs: 0,
            weight_decay: 0.0,
            loss_mask: self.cfg.model.loss_mask,
            seed: derive_seed(self.cfg.seed, &[0x545247, tag]),
        }
    }

    /// Stage datasets (index s-1 = stage s), as training samples.
    fn stage_datasets(&self, corpus: &[QASample]) -> Vec<Vec<TrainSample>> {
        let m = self.plan.m;
        let mut out = vec![Vec::new(); m];
        for s in corpus {
            if s.stage >= 1 && (s.stage as usize) <= m {
                out[(s.stage - 1) as usize].push(TrainSample::from_qa(s));
            }
        }
        out
    }

    fn capture(
        &mut self,
        model: &Model<f32>,
        prompts: &[QASample],
        rel: &str,
    ) -> Result<ActivationTensor, ExperimentError> {
        let acts = capture_activations(model, prompts, &model.fingerprint(), 64)?;
        write_actv(&acts, &self.path(rel))?;
        self.record(rel);
        self.record(&format!("{rel}.idx.jsonl"));
        Ok(acts)
    }
}

fn stage_labels(acts: &ActivationTensor, a: u16, b: u16) -> Vec<Option<bool>> {
    acts.index
        .iter()
        .map(|e| {
            if e.stage == a {
                Some(false)
            } else if e.stage == b {
                Some(true)
            } else {
                None
            }
        })
        .collect()
}

/// Copy of one (layer, token) cell as a standalone 1x1-grid tensor.
fn cell_tensor(acts: &ActivationTensor, layer: usize, token: usize) -> ActivationTensor {
    let cell = acts.cell(layer, token);
    let n = acts.n_samples();
    let d = acts.d_model();
    let mut data = Array4::<f32>::zeros((n, 1, 1, d));
    for i in 0..n {
        for j in 0..d {
            data[[i, 0, 0, j]] = cell[[i, j]];
        }
    }
    ActivationTensor { data, index: acts.index.clone(), fingerprint: acts.fingerprint.clone() }
}

/// Per-stage centroid projections at every (layer, token) cell of one
/// captured tensor, using a diff-mean x-axis and residual-PC y-axis fit per
/// cell. Cells with degenerate geometry are skipped. Also returns the
/// (ordering tau, collinearity residual) of the last cell with ≥3 stages.
pub fn projection_rows(
    acts: &ActivationTensor,
    run: &str,
) -> Result<(Vec<ProjectionRow>, Option<(f64, f64)>), ExperimentError> {
    let mut rows = Vec::new();
    let mut last_tau_resid = None;
    for layer in 0..acts.n_layers() {
        for token in 0..acts.n_tokens() {
            let cs = centroids(acts, layer, token, run)?;
            let stages: Vec<u16> = cs.centroids.keys().cloned().collect();
            let cvec: Vec<_> = cs.centroids.values().cloned().collect();
            if cvec.len() < 2 {
                continue;
            }
            let pairs: Vec<_> =
                cvec.windows(2).map(|w| (w[1].clone(), w[0].clone())).collect();
            let x = match diffmean_axis(&pairs) {
                Ok(x) => x,
                Err(_) => continue,
            };
            // With two stages (or exactly collinear centroids) the residual
            // PC is degenerate; fall back to an arbitrary unit vector
            // orthogonal to x so the projection stays well-defined.
            let y = match residual_pc_axis(&cvec, &x) {
                Ok(y) => y,
                Err(_) => match fallback_orthogonal(&x) {
                    Some(y) => y,
                    None => continue,
                },
            };
            let axis = Axis2D::new(x, y);
            let proj = project(&cvec, &axis);
            for (&stage, &(px, py)) in stages.iter().zip(&proj) {
                rows.push(ProjectionRow { run: run.to_string(), stage, layer, token, px, py });
            }
            if cvec.len() >= 3 {
                let px: Vec<f64> = proj.iter().map(|p| p.0).collect();
                let order: Vec<usize> = (0..px.len()).collect();
                let tau = ordering_score(&px, &order)?;
                let resid = collinearity_residual(&cvec)?;
                last_tau_resid = Some((tau, resid));
            }
        }
    }
    Ok((rows, last_tau_resid))
}

/// Unit vector orthogonal to `x`: Gram-Schmidt on the basis vector least
/// aligned with it.
fn fallback_orthogonal(x: &ndarray::Array1<f64>) -> Option<ndarray::Array1<f64>> {
    let k = x
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())?
        .0;
    let mut e = ndarray::Array1::<f64>::zeros(x.len());
    e[k] = 1.0;
    let y = &e - &(x * x[k]);
    let n = y.dot(&y).sqrt();
    if n < 1e-12 {
        None
    } else {
        Some(y / n)
    }
}

pub fn write_projection_csv(rows: &[ProjectionRow], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("run,stage,layer,token,px,py\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.run, r.stage, r.layer, r.token, r.px, r.py
        ));
    }
    fs::write(path, out)
}

fn write_pairwise_csv(matrix: &[Vec<Option<f64>>], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("i,j,accuracy\n");
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if let Some(v) = v {
                out.push_str(&format!("{},{},{:.6}\n", i + 1, j + 1, v));
            }
        }
    }
    fs::write(path, out)
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    run_dir: &Path,
) -> Result<RunReport, ExperimentError> {
    let started = Instant::now();
    validate(cfg)?;
    for sub in ["corpus", "ckpt", "acts", "reports"] {
        fs::create_dir_all(run_dir.join(sub))?;
    }

    let m = match cfg.variant {
        VariantSpec::TwoStage | VariantSpec::DatapointLevel => 2,
        _ => cfg.data.m,
    };

    let vocab = Vocabulary::build();
    let seed = cfg.seed;
    let entities = gen_entities(cfg.data.n_entities, derive_seed(seed, &[1]));
    let aliases = gen_aliases(
        cfg.data.n_entities,
        cfg.data.text_variant.alias_len(),
        ALIAS_ALPHABET_SIZE,
        derive_seed(seed, &[2]),
    )?;
    let mut plan = partition_stages(&entities, m, derive_seed(seed, &[3]))?;
    plan.samples_per_entity = cfg.data.samples_per_entity;
    plan.epochs = vec![cfg.data.epochs_per_stage; m];
    split_probe(&mut plan, cfg.data.probe_ratio, derive_seed(seed, &[4]))?;

    let mut p = Pipeline {
        cfg: cfg.clone(),
        run_dir: run_dir.to_path_buf(),
        vocab,
        entities,
        aliases,
        plan,
        artifacts: Vec::new(),
    };
    p.write_text("config.json", &serde_json::to_string_pretty(cfg).unwrap())?;
    p.vocab.write_json(&p.path("corpus/vocab.json"))?;
    p.record("corpus/vocab.json");

    // Corpus.
    let corpus = match cfg.variant {
        VariantSpec::DatapointLevel => {
            let kind_stage = [1u16, 1, 1, 2, 2, 2];
            make_datapoint_level_dataset(&p.vocab, &p.entities, &p.aliases, &kind_stage)?
        }
        _ => render_training_set(
            &p.vocab,
            &p.entities,
            &p.aliases,
            &p.plan,
            cfg.data.text_variant,
            derive_seed(seed, &[5]),
        )?,
    };
    datagen::write_corpus_jsonl(&corpus, &p.path("corpus/train.jsonl"))?;
    p.record("corpus/train.jsonl");

    // Training schedule.
    let mcfg = p.model_config();
    let mut model: Model<f32> = init_model(&mcfg, derive_seed(seed, &[6]));
    let pad = p.vocab.pad_id as usize;
    let mut stage_losses: Vec<StageLosses> = Vec::new();
    let mut checkpoints: Vec<Model<f32>> = Vec::new();

    let mut epochs: Vec<usize> = vec![cfg.data.epochs_per_stage as usize; m];
    if let VariantSpec::ExtraEpochs { stage, epochs: e } = cfg.variant {
        epochs[(stage - 1) as usize] = e as usize;
    }
    if matches!(cfg.variant, VariantSpec::SingleEpochDense) {
        epochs = vec![1; m];
    }

    let untrained = matches!(cfg.variant, VariantSpec::Sanity { mode: SanityMode::Untrained });
    let mixed = matches!(cfg.variant, VariantSpec::Sanity { mode: SanityMode::MixedFromStart });
    let datasets = p.stage_datasets(&corpus);

    if untrained {
        checkpoints.push(model.clone());
    } else if mixed {
        // One stage over the shuffled union, same total epoch budget.
        let union: Vec<TrainSample> = corpus.iter().map(TrainSample::from_qa).collect();
        let mut tc = p.train_config(0);
        tc.epochs = epochs.iter().sum();
        let losses = in_stage("mixed training", train_stage(&mut model, &union, &tc, pad, "mixed"))?;
        stage_losses.push(losses);
        checkpoints.push(model.clone());
    } else {
        let base = p.train_config(0);
        let (ckpts, losses) = in_stage(
            "sequential fine-tuning",
            sequential_finetune(&mut model, &datasets, &epochs, &base, pad),
        )?;
        checkpoints = ckpts;
        stage_losses = losses;
    }

    // Re-exposure: train stage k's data again as a fresh final stage.
    if let VariantSpec::Reexposure { stage } = cfg.variant {
        let mut tc = p.train_config(1);
        tc.epochs = cfg.data.epochs_per_stage as usize;
        let label = format!("D{stage}-reexposed");
        let losses = in_stage(
            "re-exposure stage",
            train_stage(&mut model, &datasets[(stage - 1) as usize], &tc, pad, &label),
        )?;
        stage_losses.push(losses);
        checkpoints.push(model.clone());
    }

    for (i, ck) in checkpoints.iter().enumerate() {
        let rel = format!("ckpt/stage_{:02}.ckpt", i + 1);
        ck.save(&p.path(&rel))?;
        p.record(&rel);
    }

    // Capture at the final checkpoint (and all checkpoints for trajectory
    // variants).
    let prompts = match cfg.variant {
        VariantSpec::DatapointLevel => left_pad_prompts(&corpus, pad as u32),
        _ => render_test_prompts(
            &p.vocab,
            &p.entities,
            &p.aliases,
            &p.plan,
            cfg.probe.prompt_id,
            cfg.data.text_variant,
        ),
    };
    let final_acts = p.capture(&model, &prompts, "acts/final.actv")?;

    // Main probe grid: first vs last stage.
    let grid_labels = match cfg.variant {
        VariantSpec::Sanity { mode: SanityMode::ShuffledLabels } => {
            let mut l = stage_labels(&final_acts, 1, m as u16);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7]));
            l.shuffle(&mut rng);
            l
        }
        _ => stage_labels(&final_acts, 1, m as u16),
    };
    let label_def = format!("D1-vs-D{m}");
    let grid = in_stage(
        "probe grid",
        probe_grid(
            &final_acts,
            &grid_labels,
            cfg.probe.n_splits,
            0.8,
            derive_seed(seed, &[8]),
            &label_def,
        ),
    )?;
    grid.write_csv(&p.path("reports/probe_grid.csv"))?;
    p.record("reports/probe_grid.csv");
    let best = grid.max_cell().unwrap();
    let (best_layer, best_token, grid_max) = (best.layer, best.token, best.acc_mean);

    // Geometry: projections across all cells; tau and collinearity at the
    // reference cell.
    let (mut proj_rows, _) = projection_rows(&final_acts, "final")?;
    let mut ordering_tau = None;
    let mut collin = None;
    let mut stage_px = Vec::new();
    {
        let cs = centroids(&final_acts, best_layer, best_token, "final")?;
        let cvec: Vec<_> = cs.centroids.values().cloned().collect();
        if cvec.len() >= 2 {
            let pairs: Vec<_> =
                cvec.windows(2).map(|w| (w[1].clone(), w[0].clone())).collect();
            if let Ok(x) = diffmean_axis(&pairs) {
                stage_px = cvec.iter().map(|c| c.dot(&x)).collect();
                if cvec.len() >= 3 {
                    let order: Vec<usize> = (0..stage_px.len()).collect();
                    ordering_tau = Some(ordering_score(&stage_px, &order)?);
                    collin = Some(collinearity_residual(&cvec)?);
                }
            }
        }
    }

    // Checkpoint-trajectory: project centroids at every stage checkpoint.
    if matches!(cfg.variant, VariantSpec::CheckpointTrajectory) {
        for (i, ck) in checkpoints.iter().enumerate() {
            let rel = format!("acts/ckpt_{:02}.actv", i + 1);
            let acts = p.capture(ck, &prompts, &rel)?;
            let (rows, _) = projection_rows(&acts, &format!("ckpt{:02}", i + 1))?;
            proj_rows.extend(rows);
        }
    }
    write_projection_csv(&proj_rows, &p.path("reports/projections.csv"))?;
    p.record("reports/projections.csv");

    // Pairwise stage grid at the reference cell.
    let mut pairwise = None;
    if m >= 2 && !matches!(cfg.variant, VariantSpec::DatapointLevel) {
        let cell = cell_tensor(&final_acts, best_layer, best_token);
        let grid = in_stage(
            "pairwise grid",
            crate::probes::pairwise_stage_grid(
                &cell,
                m,
                0,
                0,
                cfg.probe.n_splits.min(3),
                derive_seed(seed, &[9]),
            ),
        )?;
        let rows: Vec<Vec<Option<f64>>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let v = grid[[i, j]];
                        if v.is_nan() { None } else { Some(v) }
                    })
                    .collect()
            })
            .collect();
        write_pairwise_csv(&rows, &p.path("reports/pairwise.csv"))?;
        p.record("reports/pairwise.csv");
        pairwise = Some(rows);
    }

    // Washout: mixed-data epochs with a probe retrained after every epoch.
    let washout_epochs = match cfg.variant {
        VariantSpec::Washout { extra_epochs } => extra_epochs,
        VariantSpec::SixStage => cfg.data.washout_epochs,
        _ => 0,
    };
    let mut washout_curve = Vec::new();
    let mut washed_model = None;
    if washout_epochs > 0 && !untrained {
        let union: Vec<TrainSample> = corpus.iter().map(TrainSample::from_qa).collect();
        let mut washed = model.clone();
        for e in 0..washout_epochs {
            let mut tc = p.train_config(2 + e as u64);
            tc.epochs = 1;
            in_stage(
                "washout epoch",
                train_stage(&mut washed, &union, &tc, pad, &format!("washout-{}", e + 1)),
            )?;
            let acts = capture_activations(&washed, &prompts, &washed.fingerprint(), 64)?;
            let cell = cell_tensor(&acts, best_layer, best_token);
            let labels = stage_labels(&cell, 1, m as u16);
            let r = probe_grid(
                &cell,
                &labels,
                cfg.probe.n_splits.min(3),
                0.8,
                derive_seed(seed, &[10, e as u64]),
                &label_def,
            )?;
            washout_curve.push(r.grid[0].acc_mean);
        }
        let mut out = String::from("epoch,accuracy\n");
        for (e, a) in washout_curve.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", e + 1, a));
        }
        p.write_text("reports/washout.csv", &out)?;
        washed_model = Some(washed);
    }

    // Stage-report task: fine-tune on probe-train aliases, evaluate letter
    // accuracy on probe-test aliases.
    let mut stage_report_accuracy = None;
    if matches!(cfg.variant, VariantSpec::SixStage | VariantSpec::StageReport) {
        let (sr_train, sr_eval) = make_stage_report_dataset(&p.vocab, &p.aliases, &p.plan);
        let mut sr_model = model.clone();
        let mut tc = p.train_config(100);
        tc.epochs = 3;
        tc.loss_mask = LossMask::AnswerTokensOnly;
        let samples: Vec<TrainSample> = sr_train.iter().map(TrainSample::from_qa).collect();
        in_stage(
            "stage-report fine-tune",
            train_stage(&mut sr_model, &samples, &tc, pad, "stage-report"),
        )?;
        let acc = answer_token_accuracy(&sr_model, &sr_eval)?;
        stage_report_accuracy = Some(acc);
        p.write_text(
            "reports/stage_report.json",
            &serde_json::to_string_pretty(&serde_json::json!({
                "accuracy": acc,
                "n_eval": sr_eval.len(),
                "epochs": 3,
                "loss_mask": "answer-tokens-only",
            }))
            .unwrap(),
        )?;
    }

    // Seen-vs-never-seen probe: trained-entity aliases vs fresh aliases.
    // Familiarity is a content effect, not an order effect, so it is probed
    // on the washed model when a washout phase ran (every seen alias then has
    // uniform recent exposure); sequential training alone leaves early-stage
    // aliases partially forgotten.
    let mut seen_unseen_accuracy = None;
    if matches!(cfg.variant, VariantSpec::SixStage | VariantSpec::TwoStage) {
        let su_model = washed_model.as_ref().unwrap_or(&model);
        let acc = seen_unseen_probe(&mut p, su_model, &final_acts, &prompts)?;
        seen_unseen_accuracy = Some(acc);
    }

    // Datapoint-level probing with question-type holdout.
    let mut datapoint_grid = None;
    if matches!(cfg.variant, VariantSpec::DatapointLevel) {
        let grid = datapoint_probe_grid(&final_acts, derive_seed(seed, &[12]))?;
        grid.write_csv(&p.path("reports/datapoint_grid.csv"))?;
        p.record("reports/datapoint_grid.csv");
        datapoint_grid = Some(grid);
    }

    let report = RunReport {
        config: cfg.clone(),
        vocab_size: p.vocab.len(),
        checkpoint_fingerprints: checkpoints.iter().map(|c| c.fingerprint()).collect(),
        stage_losses,
        probe_grid: Some(grid),
        grid_max: Some(grid_max),
        reference_cell: Some((best_layer, best_token)),
        pairwise,
        ordering_tau,
        collinearity_residual: collin,
        projection_rows: proj_rows.len(),
        washout_curve,
        stage_report_accuracy,
        seen_unseen_accuracy,
        datapoint_grid,
        stage_px,
        artifacts: p.artifacts.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(
        run_dir.join("report.json"),
        serde_json::to_vec_pretty(&report).unwrap(),
    )?;
    Ok(report)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let m = cfg.data.m;
    if m < 2 || m > STAGE_LETTERS.len() {
        return Err(ExperimentError::Config(format!(
            "m must be in 2..={}, got {m}",
            STAGE_LETTERS.len()
        )));
    }
    match cfg.variant {
        VariantSpec::Reexposure { stage } | VariantSpec::ExtraEpochs { stage, .. } => {
            if stage < 1 || stage as usize > m {
                return Err(ExperimentError::Config(format!(
                    "variant stage {stage} outside 1..={m}"
                )));
            }
        }
        _ => {}
    }
    if !(1..=4).contains(&cfg.probe.prompt_id) {
        return Err(ExperimentError::Config(format!(
            "prompt_id must be in 1..=4, got {}",
            cfg.probe.prompt_id
        )));
    }
    Ok(())
}

/// Left-pad prompts to a common length so positions align from the sequence
/// end (training samples differ in length across templates).
fn left_pad_prompts(samples: &[QASample], pad: u32) -> Vec<QASample> {
    let max_len = samples.iter().map(|s| s.prompt_tokens.len()).max().unwrap_or(0);
    samples
        .iter()
        .map(|s| {
            let mut padded = vec![pad; max_len - s.prompt_tokens.len()];
            padded.extend_from_slice(&s.prompt_tokens);
            let mut out = s.clone();
            out.prompt_tokens = padded;
            out
        })
        .collect()
}

/// Answer-token accuracy by greedy decoding of the single answer token.
fn answer_token_accuracy(
    model: &Model<f32>,
    samples: &[QASample],
) -> Result<f64, ExperimentError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let tlen = chunk.iter().map(|s| s.prompt_tokens.len()).max().unwrap();
        // All stage-report prompts share a pattern, so lengths agree.
        let mut tokens = Array2::from_elem((chunk.len(), tlen), 0usize);
        for (b, s) in chunk.iter().enumerate() {
            assert_eq!(s.prompt_tokens.len(), tlen, "misaligned answer prompts");
            for (t, &tok) in s.prompt_tokens.iter().enumerate() {
                tokens[[b, t]] = tok as usize;
            }
        }
        let res = model.forward(tokens.view())?;
        for (b, s) in chunk.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for v in 0..model.config.vocab_size {
                let z = res.logits[[b, tlen - 1, v]];
                if z > best_v {
                    best_v = z;
                    best = v;
                }
            }
            if s.answer_tokens.first() == Some(&(best as u32)) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Behavioral seen-vs-never-seen probe: trained-entity aliases vs fresh
/// random aliases, separated by a logistic probe over per-prompt logit
/// statistics (entropy, logsumexp, moments, realized continuation NLL) at
/// the alias continuation positions. Familiarity is a behavioral effect —
/// known alias sequences are predictable, fresh ones are not — so the probe
/// reads the model's predictive behavior rather than raw activations.
/// Returns the mean held-out accuracy over entity-level splits.
fn seen_unseen_probe(
    p: &mut Pipeline,
    model: &Model<f32>,
    _seen_acts: &ActivationTensor,
    seen_prompts: &[QASample],
) -> Result<f64, ExperimentError> {
    let n = p.entities.len();
    let seen_keys: BTreeSet<Vec<u16>> =
        p.aliases.iter().map(|a| a.subtokens.clone()).collect();
    // Fresh aliases from the same alphabet, excluding collisions with seen.
    let pool = gen_aliases(
        n + n / 4 + 16,
        p.cfg.data.text_variant.alias_len(),
        ALIAS_ALPHABET_SIZE,
        derive_seed(p.cfg.seed, &[11]),
    )?;
    let fresh: Vec<Alias> = pool
        .into_iter()
        .filter(|a| !seen_keys.contains(&a.subtokens))
        .take(n)
        .enumerate()
        .map(|(i, mut a)| {
            a.entity_id = (n + i) as u32;
            a
        })
        .collect();
    if fresh.len() < n {
        return Err(ExperimentError::Config(
            "alias alphabet too small for an unseen set of equal size".into(),
        ));
    }
    let dummy_entities: Vec<EntityRecord> = fresh
        .iter()
        .map(|a| EntityRecord { entity_id: a.entity_id, attrs: [0; 6] })
        .collect();
    let dummy_plan = StagePlan {
        m: p.plan.m,
        stage_of: vec![0; fresh.len()],
        epochs: p.plan.epochs.clone(),
        samples_per_entity: p.plan.samples_per_entity,
        probe_split: vec![ProbeSplit::ProbeTrain; fresh.len()],
    };
    // Concatenate behavioral features across all four prompt patterns so the
    // probe can pool familiarity evidence from several alias contexts.
    let mut seen_blocks = Vec::new();
    let mut fresh_blocks = Vec::new();
    for pid in 1..=4 {
        let sp = if pid == p.cfg.probe.prompt_id {
            seen_prompts.to_vec()
        } else {
            render_test_prompts(
                &p.vocab,
                &p.entities,
                &p.aliases,
                &p.plan,
                pid,
                p.cfg.data.text_variant,
            )
        };
        let fp = render_test_prompts(
            &p.vocab,
            &dummy_entities,
            &fresh,
            &dummy_plan,
            pid,
            p.cfg.data.text_variant,
        );
        assert_eq!(
            sp[0].prompt_tokens.len(),
            fp[0].prompt_tokens.len(),
            "seen and unseen prompts must be position-aligned"
        );
        seen_blocks.push(behavioral_features(model, &p.vocab, &sp)?);
        fresh_blocks.push(behavioral_features(model, &p.vocab, &fp)?);
    }
    let feats_seen = ndarray::concatenate(
        ndarray::Axis(1),
        &seen_blocks.iter().map(|b| b.view()).collect::<Vec<_>>(),
    )
    .expect("feature blocks share row count");
    let feats_fresh = ndarray::concatenate(
        ndarray::Axis(1),
        &fresh_blocks.iter().map(|b| b.view()).collect::<Vec<_>>(),
    )
    .expect("feature blocks share row count");
    let n_feat = feats_seen.ncols();
    let total = 2 * n;
    let mut x = Array2::<f64>::zeros((total, n_feat));
    x.slice_mut(ndarray::s![..n, ..]).assign(&feats_seen);
    x.slice_mut(ndarray::s![n.., ..]).assign(&feats_fresh);
    let y: Vec<bool> = (0..total).map(|i| i < n).collect();

    // Entity-level 80:20 splits: each row is one distinct alias/entity.
    let n_splits = p.cfg.probe.n_splits.min(3).max(1);
    let mut accs = Vec::new();
    for s in 0..n_splits {
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(p.cfg.seed, &[13, s as u64]));
        order.shuffle(&mut rng);
        let n_train = (total as f64 * 0.8).round() as usize;
        let take = |rows: &[usize]| {
            let mut xr = Array2::<f64>::zeros((rows.len(), n_feat));
            let mut yr = Vec::with_capacity(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                xr.row_mut(r).assign(&x.row(i));
                yr.push(y[i]);
            }
            (xr, yr)
        };
        let (x_tr, y_tr) = take(&order[..n_train]);
        let (x_te, y_te) = take(&order[n_train..]);
        let l2 = 1.0 / (PROBE_C * x_tr.nrows() as f64);
        let probe = train_probe(
            x_tr.view(),
            &y_tr,
            l2,
            derive_seed(p.cfg.seed, &[14, s as u64]),
        )?;
        accs.push(eval_probe(&probe, x_te.view(), &y_te)?);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let mut csv = String::from("split,accuracy\n");
    for (s, a) in accs.iter().enumerate() {
        csv.push_str(&format!("{},{:.6}\n", s, a));
    }
    csv.push_str(&format!("mean,{mean:.6}\n"));
    p.write_text("reports/seen_unseen.csv", &csv)?;
    Ok(mean)
}

/// Per-prompt behavioral feature vector: for each alias continuation
/// position (the 2nd and later alias subtokens), the seven logit statistics
/// of the model's next-token distribution at the preceding position plus the
/// negative log-likelihood of the realized subtoken.
fn behavioral_features(
    model: &Model<f32>,
    vocab: &Vocabulary,
    prompts: &[QASample],
) -> Result<Array2<f64>, ExperimentError> {
    let alias_len = alias_positions(vocab, &prompts[0].prompt_tokens).len();
    assert!(alias_len >= 2, "behavioral features need multi-subtoken aliases");
    let n_feat = (alias_len - 1) * 8;
    let mut out = Array2::<f64>::zeros((prompts.len(), n_feat));
    let v = model.config.vocab_size;
    for (chunk_no, chunk) in prompts.chunks(64).enumerate() {
        let tlen = chunk[0].prompt_tokens.len();
        let mut tokens = Array2::from_elem((chunk.len(), tlen), 0usize);
        for (b, s) in chunk.iter().enumerate() {
            assert_eq!(s.prompt_tokens.len(), tlen, "misaligned prompts");
            for (t, &tok) in s.prompt_tokens.iter().enumerate() {
                tokens[[b, t]] = tok as usize;
            }
        }
        let res = model.forward(tokens.view())?;
        for (b, s) in chunk.iter().enumerate() {
            let pos = alias_positions(vocab, &s.prompt_tokens);
            assert_eq!(pos.len(), alias_len);
            let row_idx = chunk_no * 64 + b;
            for (k, &pp) in pos[1..].iter().enumerate() {
                let z: Vec<f64> =
                    (0..v).map(|j| res.logits[[b, pp - 1, j]] as f64).collect();
                let st = crate::controls::logit_stats(&z);
                let base = k * 8;
                for (j, val) in st.as_array().iter().enumerate() {
                    out[[row_idx, base + j]] = *val;
                }
                // Realized-continuation NLL = logsumexp - logit(actual).
                out[[row_idx, base + 7]] =
                    st.logsumexp - z[s.prompt_tokens[pp] as usize];
            }
        }
    }
    Ok(out)
}

/// Datapoint-level probe grid: train on probe-train question kinds, test on
/// the held-out kinds (single deterministic split; the holdout is by
/// question type, not entity).
fn datapoint_probe_grid(
    acts: &ActivationTensor,
    seed: u64,
) -> Result<ProbeReport, ExperimentError> {
    let n = acts.n_samples();
    let train_rows: Vec<usize> = (0..n)
        .filter(|&i| acts.index[i].probe_split == ProbeSplit::ProbeTrain)
        .collect();
    let test_rows: Vec<usize> = (0..n)
        .filter(|&i| acts.index[i].probe_split == ProbeSplit::ProbeTest)
        .collect();
    let y_of = |rows: &[usize]| -> Vec<bool> {
        rows.iter().map(|&i| acts.index[i].stage == 2).collect()
    };
    let d = acts.d_model();
    let mut grid = Vec::new();
    for layer in 0..acts.n_layers() {
        for token in 0..acts.n_tokens() {
            let cell = acts.cell(layer, token);
            let features = |rows: &[usize]| {
                let mut x = Array2::<f64>::zeros((rows.len(), d));
                for (r, &i) in rows.iter().enumerate() {
                    for j in 0..d {
                        x[[r, j]] = cell[[i, j]] as f64;
                    }
                }
                x
            };
            let x_train = features(&train_rows);
            let y_train = y_of(&train_rows);
            let x_test = features(&test_rows);
            let y_test = y_of(&test_rows);
            let l2 = 1.0 / (PROBE_C * x_train.nrows() as f64);
            let model = train_probe(
                x_train.view(),
                &y_train,
                l2,
                derive_seed(seed, &[layer as u64, token as u64]),
            )?;
            let acc = eval_probe(&model, x_test.view(), &y_test)?;
            grid.push(crate::probes::GridCell {
                layer,
                token,
                acc_mean: acc,
                acc_std: 0.0,
                n_train: x_train.nrows(),
                n_test: x_test.nrows(),
            });
        }
    }
    Ok(ProbeReport {
        grid,
        n_splits: 1,
        split_ratio: 0.0,
        label_def: "datapoint-stage (question-type holdout)".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cosine;
    use crate::oracle::{plant_signal, PlantedSpec};
    use ndarray::Array1;

    fn tiny_config(variant: VariantSpec) -> ExperimentConfig {
        ExperimentConfig {
            variant,
            data: DataParams {
                n_entities: 24,
                m: 2,
                samples_per_entity: 2,
                epochs_per_stage: 1,
                probe_ratio: 0.8,
                text_variant: Variant::Synthetic,
                washout_epochs: 0,
            },
            model: ModelParams {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                max_context: 32,
                learning_rate: 1e-3,
                batch_size: 16,
                loss_mask: LossMask::AnswerTokensOnly,
            },
            probe: ProbeParams { n_splits: 2, prompt_id: 1 },
            seed: 1,
        }
    }

    #[test]
    fn stage_report_dataset_contracts() {
        let vocab = Vocabulary::build();
        let entities = gen_entities(30, 0);
        let aliases = gen_aliases(30, 3, ALIAS_ALPHABET_SIZE, 1).unwrap();
        let mut plan = partition_stages(&entities, 6, 2).unwrap();
        split_probe(&mut plan, 0.8, 3).unwrap();
        let (train, eval) = make_stage_report_dataset(&vocab, &aliases, &plan);
        assert_eq!(train.len() + eval.len(), 30);
        let letters: BTreeSet<String> = train
            .iter()
            .chain(&eval)
            .map(|s| vocab.tokens[s.answer_tokens[0] as usize].clone())
            .collect();
        assert_eq!(
            letters,
            ["A", "B", "C", "D", "E", "F"].iter().map(|s| s.to_string()).collect()
        );
        // Probe-test aliases absent from the fine-tune set.
        let train_ids: BTreeSet<u32> = train.iter().map(|s| s.entity_id).collect();
        assert!(eval.iter().all(|s| !train_ids.contains(&s.entity_id)));
    }

    #[test]
    fn datapoint_dataset_contracts() {
        let vocab = Vocabulary::build();
        let entities = gen_entities(10, 0);
        let aliases = gen_aliases(10, 3, ALIAS_ALPHABET_SIZE, 1).unwrap();
        let kind_stage = [1u16, 1, 1, 2, 2, 2];
        let samples =
            make_datapoint_level_dataset(&vocab, &entities, &aliases, &kind_stage).unwrap();
        assert_eq!(samples.len(), 60);
        // Each entity has 3 samples per stage; entity sets identical.
        for e in &entities {
            for s in [1u16, 2] {
                let count = samples
                    .iter()
                    .filter(|q| q.entity_id == e.entity_id && q.stage == s)
                    .count();
                assert_eq!(count, 3);
            }
        }
        // Exactly one held-out kind per stage.
        for s in [1u16, 2] {
            let held: BTreeSet<u32> = samples
                .iter()
                .filter(|q| q.stage == s && q.probe_split == ProbeSplit::ProbeTest)
                .map(|q| q.template_id)
                .collect();
            assert_eq!(held.len(), 1);
        }
        // Bad assignments rejected.
        assert!(make_datapoint_level_dataset(&vocab, &entities, &aliases, &[1; 6]).is_err());
        assert!(
            make_datapoint_level_dataset(&vocab, &entities, &aliases, &[1, 2, 3, 1, 2, 1])
                .is_err()
        );
    }

    #[test]
    fn tiny_two_stage_run_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(VariantSpec::TwoStage);
        let report = run_experiment(&cfg, dir.path()).unwrap();
        for rel in [
            "config.json",
            "corpus/vocab.json",
            "corpus/train.jsonl",
            "ckpt/stage_01.ckpt",
            "ckpt/stage_02.ckpt",
            "acts/final.actv",
            "reports/probe_grid.csv",
            "reports/projections.csv",
            "reports/pairwise.csv",
            "reports/seen_unseen.csv",
            "report.json",
        ] {
            assert!(dir.path().join(rel).exists(), "missing {rel}");
        }
        assert!(report.grid_max.unwrap() >= 0.0 && report.grid_max.unwrap() <= 1.0);
        assert_eq!(report.checkpoint_fingerprints.len(), 2);
        assert!(report.seen_unseen_accuracy.is_some());
        // Every artifact in the report exists on disk (traceability).
        for rel in &report.artifacts {
            assert!(dir.path().join(rel).exists(), "artifact {rel} missing");
        }
    }

    #[test]
    fn tiny_runs_are_deterministic() {
        let cfg = tiny_config(VariantSpec::TwoStage);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run_experiment(&cfg, d1.path()).unwrap();
        let r2 = run_experiment(&cfg, d2.path()).unwrap();
        assert_eq!(r1.determinism_hash(), r2.determinism_hash());
        // Wall clock differences must not affect the hash.
        assert_ne!(
            serde_json::to_string(&r1.wall_clock_seconds).unwrap(),
            String::new()
        );
    }

    #[test]
    fn untrained_sanity_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(VariantSpec::Sanity { mode: SanityMode::Untrained });
        let report = run_experiment(&cfg, dir.path()).unwrap();
        assert!(report.stage_losses.is_empty());
        assert_eq!(report.checkpoint_fingerprints.len(), 1);
        let g = report.grid_max.unwrap();
        assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn datapoint_variant_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(VariantSpec::DatapointLevel);
        cfg.data.samples_per_entity = 3;
        let report = run_experiment(&cfg, dir.path()).unwrap();
        let grid = report.datapoint_grid.unwrap();
        assert!(!grid.grid.is_empty());
        assert!(dir.path().join("reports/datapoint_grid.csv").exists());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let raw = r#"{"variant":{"kind":"two_stage"},"bogus":1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(raw).is_err());
        let raw2 = r#"{"variant":{"kind":"two_stage"},"data":{"n_entities":10,"mystery":2}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(raw2).is_err());
    }

    /// Re-exposure geometry on planted data: moving one stage's centroid to
    /// the recent extreme makes it project rightmost on the recency axis.
    #[test]
    fn reexposure_moves_stage_rightmost_on_oracle() {
        let spec = PlantedSpec {
            m: 6,
            n_per_stage: 100,
            dim: 12,
            layers: 1,
            tokens: 1,
            hot: (0, 0),
            centroid_spacing: 2.0,
            noise_sigma: 0.1,
            curvature: 0.0,
        };
        let (mut acts, truth) = plant_signal(&spec, 42);
        // Simulate re-exposure of stage 2: translate its samples past the
        // most recent extreme along the planted direction.
        let shift = 5.0 * 2.0;
        for i in 0..acts.n_samples() {
            if acts.index[i].stage == 2 {
                for j in 0..spec.dim {
                    acts.data[[i, 0, 0, j]] += (shift * truth.direction[j]) as f32;
                }
            }
        }
        let cs = centroids(&acts, 0, 0, "reexp").unwrap();
        let cvec: Vec<Array1<f64>> = cs.centroids.values().cloned().collect();
        let px: Vec<f64> = cvec.iter().map(|c| c.dot(&truth.direction)).collect();
        let max_stage = px
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(max_stage, 1, "re-exposed stage (index 1) projects rightmost");
        // Sanity: the recovered axis still aligns with the planted one.
        let pairs: Vec<_> = cvec.windows(2).map(|w| (w[1].clone(), w[0].clone())).collect();
        let axis = diffmean_axis(&pairs).unwrap();
        assert!(cosine(&axis, &truth.direction).abs() > 0.9);
    }
}
