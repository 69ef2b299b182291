//! Command-line entry point. Every subcommand is a thin wrapper over one
//! library operation, driven by a strict JSON config file; flags only select
//! the config and the run directory. Artifacts (including the config itself)
//! are archived in the run directory for provenance.
//!
//! Exit codes: 0 success, 2 missing prerequisite artifact, 1 anything else.
//! Failures emit one machine-readable JSON object on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use ordertrace::capture::{capture_activations, read_actv, write_actv};
use ordertrace::controls::{activation_stats, balanced_probe_compare, ActivationStats, BinStrategy};
use ordertrace::datagen::{
    gen_aliases, gen_entities, partition_stages, read_corpus_jsonl, render_test_prompts,
    render_training_set, split_probe, write_corpus_jsonl, Variant, Vocabulary,
    ALIAS_ALPHABET_SIZE,
};
use ordertrace::derive_seed;
use ordertrace::experiments::{
    projection_rows, run_experiment, write_projection_csv, ExperimentConfig, ExperimentError,
};
use ordertrace::model::{
    init_model, sequential_finetune, LossMask, Model, ModelConfig, TrainConfig, TrainSample,
};
use ordertrace::oracle::{verify_pipeline, PlantedSpec};
use ordertrace::probes::probe_grid;

#[derive(Parser)]
#[command(
    name = "ordertrace",
    about = "Lab for detecting training-order information in transformer activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run directory (artifacts are written here). Defaults to
    /// `$ORDERTRACE_RUN_ROOT/<subcommand>` or `./runs/<subcommand>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap (this build is single-threaded; values > 1 are
    /// accepted and capped).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Verbose progress on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate entities, aliases, the stage plan, and tokenized corpora.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sequentially fine-tune a model over per-stage corpora.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Capture residual-stream activations for test prompts at a checkpoint.
    Capture {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the probe grid over an activation tensor.
    Probe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Project per-stage centroids in every cell of an activation tensor.
    Geometry {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare balanced vs random-downsampled vs full probes at one cell.
    Balance {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a full experiment variant end to end.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify the analysis pipeline against a planted-signal oracle.
    OracleVerify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a finished run directory's report.json.
    Report {
        /// Run directory containing report.json (defaults to --run-dir).
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct CliError {
    kind: &'static str,
    error: String,
}

enum Failure {
    MissingArtifact(String),
    ConfigInvalid(String),
    Other(String),
}

impl Failure {
    fn emit(&self) -> ExitCode {
        let (kind, error, code) = match self {
            Failure::MissingArtifact(e) => ("missing_artifact", e.clone(), 2),
            Failure::ConfigInvalid(e) => ("config_invalid", e.clone(), 1),
            Failure::Other(e) => ("error", e.clone(), 1),
        };
        eprintln!(
            "{}",
            serde_json::to_string(&CliError { kind, error }).unwrap()
        );
        ExitCode::from(code)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Failure {
        match e {
            ExperimentError::Config(msg) => Failure::ConfigInvalid(msg),
            ExperimentError::MissingArtifact(p) => Failure::MissingArtifact(p.display().to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

/// Read and strictly parse a JSON config file.
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let raw = fs::read_to_string(path).map_err(|_| {
        Failure::MissingArtifact(format!("config file {} not readable", path.display()))
    })?;
    serde_json::from_str(&raw)
        .map_err(|e| Failure::ConfigInvalid(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::MissingArtifact(path.display().to_string()))
    }
}

fn archive_config(run_dir: &Path, config_path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(run_dir).map_err(other)?;
    fs::copy(config_path, run_dir.join("config.json")).map_err(other)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommand configs (strict)
// ---------------------------------------------------------------------------

fn default_m() -> usize {
    6
}
fn default_spe() -> usize {
    4
}
fn default_epochs() -> u32 {
    5
}
fn default_ratio() -> f64 {
    0.8
}
fn default_variant() -> Variant {
    Variant::Synthetic
}
fn default_prompt_id() -> usize {
    1
}
fn default_splits() -> usize {
    5
}
fn default_batch() -> usize {
    64
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    n_entities: usize,
    #[serde(default = "default_m")]
    m: usize,
    #[serde(default = "default_spe")]
    samples_per_entity: usize,
    #[serde(default = "default_epochs")]
    epochs_per_stage: u32,
    #[serde(default = "default_ratio")]
    probe_ratio: f64,
    #[serde(default = "default_variant")]
    variant: Variant,
    #[serde(default = "default_prompt_id")]
    prompt_id: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    /// Tokenized training corpus (jsonl) from gen-data.
    corpus: PathBuf,
    #[serde(default)]
    model: ModelDims,
    #[serde(default = "default_epochs")]
    epochs_per_stage: u32,
    #[serde(default = "default_lr")]
    learning_rate: f64,
    #[serde(default = "default_train_batch")]
    batch_size: usize,
    #[serde(default = "default_loss_mask")]
    loss_mask: LossMask,
    #[serde(default)]
    seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_train_batch() -> usize {
    32
}
fn default_loss_mask() -> LossMask {
    LossMask::AnswerTokensOnly
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelDims {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    max_context: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { n_layers: 4, d_model: 128, n_heads: 4, d_ff: 512, max_context: 48 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptureCliConfig {
    checkpoint: PathBuf,
    /// Position-aligned prompt corpus (jsonl) from gen-data.
    prompts: PathBuf,
    /// Output ACTV file (written under the run directory).
    #[serde(default = "default_actv_out")]
    out: String,
    #[serde(default = "default_batch")]
    batch_size: usize,
}

fn default_actv_out() -> String {
    "acts.actv".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeCliConfig {
    acts: PathBuf,
    /// Stage labeled false (class 0).
    #[serde(default = "default_first")]
    first_stage: u16,
    /// Stage labeled true (class 1); defaults to the max stage present.
    last_stage: Option<u16>,
    #[serde(default = "default_splits")]
    n_splits: usize,
    #[serde(default = "default_ratio")]
    split_ratio: f64,
    #[serde(default)]
    seed: u64,
}

fn default_first() -> u16 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryCliConfig {
    acts: PathBuf,
    #[serde(default = "default_run_label")]
    run_label: String,
}

fn default_run_label() -> String {
    "run".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BalanceCliConfig {
    acts: PathBuf,
    layer: usize,
    token: usize,
    #[serde(default = "default_first")]
    first_stage: u16,
    last_stage: Option<u16>,
    #[serde(default = "default_bins")]
    n_bins: usize,
    strategy: BinStrategy,
    #[serde(default)]
    seed: u64,
}

fn default_bins() -> usize {
    10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleCliConfig {
    spec: PlantedSpec,
    #[serde(default)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: GenDataConfig, run_dir: &Path) -> Result<(), Failure> {
    let corpus_dir = run_dir.join("corpus");
    fs::create_dir_all(&corpus_dir).map_err(other)?;
    let vocab = Vocabulary::build();
    let entities = gen_entities(cfg.n_entities, derive_seed(cfg.seed, &[1]));
    let aliases = gen_aliases(
        cfg.n_entities,
        cfg.variant.alias_len(),
        ALIAS_ALPHABET_SIZE,
        derive_seed(cfg.seed, &[2]),
    )
    .map_err(other)?;
    let mut plan =
        partition_stages(&entities, cfg.m, derive_seed(cfg.seed, &[3])).map_err(other)?;
    plan.samples_per_entity = cfg.samples_per_entity;
    plan.epochs = vec![cfg.epochs_per_stage; cfg.m];
    split_probe(&mut plan, cfg.probe_ratio, derive_seed(cfg.seed, &[4])).map_err(other)?;
    let corpus = render_training_set(
        &vocab,
        &entities,
        &aliases,
        &plan,
        cfg.variant,
        derive_seed(cfg.seed, &[5]),
    )
    .map_err(other)?;
    let prompts =
        render_test_prompts(&vocab, &entities, &aliases, &plan, cfg.prompt_id, cfg.variant);

    vocab.write_json(&corpus_dir.join("vocab.json")).map_err(other)?;
    fs::write(
        corpus_dir.join("entities.json"),
        serde_json::to_vec_pretty(&entities).unwrap(),
    )
    .map_err(other)?;
    fs::write(
        corpus_dir.join("aliases.json"),
        serde_json::to_vec_pretty(&aliases).unwrap(),
    )
    .map_err(other)?;
    fs::write(
        corpus_dir.join("plan.json"),
        serde_json::to_vec_pretty(&plan).unwrap(),
    )
    .map_err(other)?;
    write_corpus_jsonl(&corpus, &corpus_dir.join("train.jsonl")).map_err(other)?;
    write_corpus_jsonl(&prompts, &corpus_dir.join("test_prompts.jsonl")).map_err(other)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "n_train": corpus.len(),
            "n_prompts": prompts.len(),
            "vocab_size": vocab.len(),
            "out": corpus_dir,
        })
    );
    Ok(())
}

fn cmd_train(cfg: TrainCliConfig, run_dir: &Path) -> Result<(), Failure> {
    require_file(&cfg.corpus)?;
    let corpus = read_corpus_jsonl(&cfg.corpus).map_err(other)?;
    if corpus.is_empty() {
        return Err(Failure::ConfigInvalid("empty training corpus".into()));
    }
    let m = corpus.iter().map(|s| s.stage).max().unwrap() as usize;
    let mut datasets = vec![Vec::new(); m];
    for s in &corpus {
        if s.stage >= 1 {
            datasets[(s.stage - 1) as usize].push(TrainSample::from_qa(s));
        }
    }
    let vocab = Vocabulary::build();
    let mcfg = ModelConfig {
        n_layers: cfg.model.n_layers,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        d_ff: cfg.model.d_ff,
        vocab_size: vocab.len(),
        max_context: cfg.model.max_context,
    };
    let mut model: Model<f32> = init_model(&mcfg, derive_seed(cfg.seed, &[6]));
    let base = TrainConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: 0,
        weight_decay: 0.0,
        loss_mask: cfg.loss_mask,
        seed: cfg.seed,
    };
    let epochs = vec![cfg.epochs_per_stage as usize; m];
    let (ckpts, losses) =
        sequential_finetune(&mut model, &datasets, &epochs, &base, vocab.pad_id as usize)
            .map_err(other)?;
    let ckpt_dir = run_dir.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(other)?;
    for (i, ck) in ckpts.iter().enumerate() {
        ck.save(&ckpt_dir.join(format!("stage_{:02}.ckpt", i + 1))).map_err(other)?;
    }
    fs::write(
        run_dir.join("losses.json"),
        serde_json::to_vec_pretty(&losses).unwrap(),
    )
    .map_err(other)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "stages": m,
            "final_fingerprint": model.fingerprint(),
            "ckpt_dir": ckpt_dir,
        })
    );
    Ok(())
}

fn cmd_capture(cfg: CaptureCliConfig, run_dir: &Path) -> Result<(), Failure> {
    require_file(&cfg.checkpoint)?;
    require_file(&cfg.prompts)?;
    let model = Model::<f32>::load(&cfg.checkpoint).map_err(other)?;
    let prompts = read_corpus_jsonl(&cfg.prompts).map_err(other)?;
    let acts = capture_activations(&model, &prompts, &model.fingerprint(), cfg.batch_size)
        .map_err(other)?;
    fs::create_dir_all(run_dir).map_err(other)?;
    let out = run_dir.join(&cfg.out);
    write_actv(&acts, &out).map_err(other)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "n_samples": acts.n_samples(),
            "n_layers": acts.n_layers(),
            "n_tokens": acts.n_tokens(),
            "d_model": acts.d_model(),
            "out": out,
        })
    );
    Ok(())
}

fn stage_labels_or_err(
    acts: &ordertrace::capture::ActivationTensor,
    first: u16,
    last: Option<u16>,
) -> Result<(Vec<Option<bool>>, u16), Failure> {
    let max_stage = acts.index.iter().map(|e| e.stage).max().unwrap_or(0);
    let last = last.unwrap_or(max_stage);
    if first == last {
        return Err(Failure::ConfigInvalid(format!(
            "first_stage and last_stage are both {first}"
        )));
    }
    let labels = acts
        .index
        .iter()
        .map(|e| {
            if e.stage == first {
                Some(false)
            } else if e.stage == last {
                Some(true)
            } else {
                None
            }
        })
        .collect();
    Ok((labels, last))
}

fn cmd_probe(cfg: ProbeCliConfig, run_dir: &Path) -> Result<(), Failure> {
    require_file(&cfg.acts)?;
    let acts = read_actv(&cfg.acts, None).map_err(other)?.tensor;
    let (labels, last) = stage_labels_or_err(&acts, cfg.first_stage, cfg.last_stage)?;
    let label_def = format!("D{}-vs-D{}", cfg.first_stage, last);
    let report = probe_grid(
        &acts,
        &labels,
        cfg.n_splits,
        cfg.split_ratio,
        cfg.seed,
        &label_def,
    )
    .map_err(other)?;
    fs::create_dir_all(run_dir).map_err(other)?;
    report.write_csv(&run_dir.join("probe_grid.csv")).map_err(other)?;
    fs::write(
        run_dir.join("probe_grid.json"),
        serde_json::to_vec_pretty(&report).unwrap(),
    )
    .map_err(other)?;
    let best = report.max_cell().unwrap();
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "label_def": label_def,
            "grid_max": best.acc_mean,
            "best_cell": {"layer": best.layer, "token": best.token},
            "out": run_dir.join("probe_grid.csv"),
        })
    );
    Ok(())
}

fn cmd_geometry(cfg: GeometryCliConfig, run_dir: &Path) -> Result<(), Failure> {
    require_file(&cfg.acts)?;
    let acts = read_actv(&cfg.acts, None).map_err(other)?.tensor;
    let (rows, tau_resid) = projection_rows(&acts, &cfg.run_label).map_err(other)?;
    fs::create_dir_all(run_dir).map_err(other)?;
    write_projection_csv(&rows, &run_dir.join("projections.csv")).map_err(other)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "rows": rows.len(),
            "ordering_tau": tau_resid.map(|t| t.0),
            "collinearity_residual": tau_resid.map(|t| t.1),
            "out": run_dir.join("projections.csv"),
        })
    );
    Ok(())
}

fn cmd_balance(cfg: BalanceCliConfig, run_dir: &Path) -> Result<(), Failure> {
    require_file(&cfg.acts)?;
    let acts = read_actv(&cfg.acts, None).map_err(other)?.tensor;
    if cfg.layer >= acts.n_layers() || cfg.token >= acts.n_tokens() {
        return Err(Failure::ConfigInvalid(format!(
            "cell ({}, {}) outside grid {}x{}",
            cfg.layer,
            cfg.token,
            acts.n_layers(),
            acts.n_tokens()
        )));
    }
    let (labels, _) = stage_labels_or_err(&acts, cfg.first_stage, cfg.last_stage)?;
    let cell = acts.cell(cfg.layer, cfg.token);
    let mut stats = Array2::<f64>::zeros((acts.n_samples(), ActivationStats::NAMES.len()));
    for i in 0..acts.n_samples() {
        let v: Vec<f64> = cell.row(i).iter().map(|&x| x as f64).collect();
        let s = activation_stats(&v);
        for (j, x) in s.as_array().iter().enumerate() {
            stats[[i, j]] = *x;
        }
    }
    let compare = balanced_probe_compare(
        &acts,
        &labels,
        stats.view(),
        &ActivationStats::NAMES,
        cfg.n_bins,
        cfg.strategy,
        cfg.layer,
        cfg.token,
        cfg.seed,
    )
    .map_err(other)?;
    fs::create_dir_all(run_dir).map_err(other)?;
    fs::write(
        run_dir.join("balance.json"),
        serde_json::to_vec_pretty(&compare).unwrap(),
    )
    .map_err(other)?;
    println!("{}", serde_json::to_string(&compare).unwrap());
    Ok(())
}

fn cmd_experiment(cfg: ExperimentConfig, run_dir: &Path) -> Result<(), Failure> {
    let report = run_experiment(&cfg, run_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "grid_max": report.grid_max,
            "ordering_tau": report.ordering_tau,
            "determinism_hash": report.determinism_hash(),
            "report": run_dir.join("report.json"),
        })
    );
    Ok(())
}

fn cmd_oracle_verify(cfg: OracleCliConfig, run_dir: &Path) -> Result<(), Failure> {
    let report = verify_pipeline(&cfg.spec, cfg.seed);
    fs::create_dir_all(run_dir).map_err(other)?;
    fs::write(
        run_dir.join("oracle_verify.json"),
        serde_json::to_vec_pretty(&report).unwrap(),
    )
    .map_err(other)?;
    println!("{}", serde_json::to_string(&report).unwrap());
    if report.passed() {
        Ok(())
    } else {
        let f = report.first_failure().unwrap();
        Err(Failure::Other(format!(
            "oracle check '{}' failed: {}",
            f.name, f.detail
        )))
    }
}

fn cmd_report(run: &Path) -> Result<(), Failure> {
    let path = run.join("report.json");
    require_file(&path)?;
    let raw = fs::read_to_string(&path).map_err(other)?;
    let report: ordertrace::experiments::RunReport =
        serde_json::from_str(&raw).map_err(other)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "variant": report.config.variant,
            "grid_max": report.grid_max,
            "reference_cell": report.reference_cell,
            "ordering_tau": report.ordering_tau,
            "collinearity_residual": report.collinearity_residual,
            "stage_report_accuracy": report.stage_report_accuracy,
            "seen_unseen_accuracy": report.seen_unseen_accuracy,
            "washout_curve": report.washout_curve,
            "artifacts": report.artifacts.len(),
            "determinism_hash": report.determinism_hash(),
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let sub_name = match &cli.command {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Capture { .. } => "capture",
        Command::Probe { .. } => "probe",
        Command::Geometry { .. } => "geometry",
        Command::Balance { .. } => "balance",
        Command::Experiment { .. } => "experiment",
        Command::OracleVerify { .. } => "oracle-verify",
        Command::Report { .. } => "report",
    };
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| {
        let root = std::env::var("ORDERTRACE_RUN_ROOT").unwrap_or_else(|_| "runs".into());
        PathBuf::from(root).join(sub_name)
    });
    if cli.verbose {
        eprintln!("run dir: {}", run_dir.display());
    }

    match cli.command {
        Command::GenData { config } => {
            let mut c: GenDataConfig = load_config(&config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            archive_config(&run_dir, &config)?;
            cmd_gen_data(c, &run_dir)
        }
        Command::Train { config } => {
            let mut c: TrainCliConfig = load_config(&config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            archive_config(&run_dir, &config)?;
            cmd_train(c, &run_dir)
        }
        Command::Capture { config } => {
            let c: CaptureCliConfig = load_config(&config)?;
            archive_config(&run_dir, &config)?;
            cmd_capture(c, &run_dir)
        }
        Command::Probe { config } => {
            let mut c: ProbeCliConfig = load_config(&config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            archive_config(&run_dir, &config)?;
            cmd_probe(c, &run_dir)
        }
        Command::Geometry { config } => {
            let c: GeometryCliConfig = load_config(&config)?;
            archive_config(&run_dir, &config)?;
            cmd_geometry(c, &run_dir)
        }
        Command::Balance { config } => {
            let mut c: BalanceCliConfig = load_config(&config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            archive_config(&run_dir, &config)?;
            cmd_balance(c, &run_dir)
        }
        Command::Experiment { config } => {
            let mut c: ExperimentConfig = load_config(&config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            cmd_experiment(c, &run_dir)
        }
        Command::OracleVerify { config } => {
            let mut c: OracleCliConfig = load_config(&config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            archive_config(&run_dir, &config)?;
            cmd_oracle_verify(c, &run_dir)
        }
        Command::Report { run } => {
            let dir = run.unwrap_or(run_dir);
            cmd_report(&dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.emit(),
    }
}
