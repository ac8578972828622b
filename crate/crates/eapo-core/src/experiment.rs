//! Configuration-driven orchestration of the full pipeline: synthesize or
//! load data, pretrain, retrieve and adapt, evaluate, and write a run
//! manifest.
//!
//! Every stage output is content-addressed by a hash of the configuration
//! slice that produced it, so stale artifacts from a different configuration
//! can never be mixed into a run. Reports land on disk only; diagnostics go
//! to standard error, gated by the `EAPO_LOG` environment variable
//! (`quiet`, `info`, `debug`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_table, Dataset, Standardizer, SyntheticConfig, TableSchema,
};
use crate::error::{EapoError, Result};
use crate::evaluation::{
    intensity_breakdown, metrics_at_threshold, select_threshold_pr, EvalReport,
    IntensityBreakdown,
};
use crate::model::{Classifier, ModelKind};
use crate::objectives::sigmoid;
use crate::retrieval::{build_local_manifold, extract_extreme};
use crate::training::{finetune, pretrain, FinetuneConfig, PretrainConfig};

/// Where the run's data comes from: either the seeded synthetic generator or
/// a pair of delimited tables plus their schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticConfig),
    Files {
        train: PathBuf,
        test: PathBuf,
        schema: TableSchema,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden: vec![64, 64],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub bin_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bin_width: 0.5 }
    }
}

/// One document configuring the whole run. Every hyperparameter has a named
/// key; the defaults reproduce the standard protocol (focal pretraining,
/// preference fine-tuning with beta 0.1, lambda1 1.0, lambda2 0.1).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Files { train, test, schema } => {
                schema.validate()?;
                for path in [train, test] {
                    if !path.exists() {
                        return Err(EapoError::InvalidConfig(format!(
                            "data table {} does not exist",
                            path.display()
                        )));
                    }
                }
            }
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.eval.bin_width.is_finite() && self.eval.bin_width > 0.0) {
            return Err(EapoError::InvalidConfig(
                "eval.bin_width must be positive".into(),
            ));
        }
        if self.model.kind == ModelKind::Logistic && !self.model.hidden.is_empty() {
            return Err(EapoError::InvalidConfig(
                "logistic model takes no hidden layers".into(),
            ));
        }
        Ok(())
    }

    /// Parse a config document, or a run manifest (its embedded config is
    /// used), from JSON text.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| EapoError::InvalidConfig(e.to_string()))?;
        let config_value = match value.get("config") {
            Some(inner) => inner.clone(),
            None => value,
        };
        let cfg: ExperimentConfig = serde_json::from_value(config_value)
            .map_err(|e| EapoError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json_str(&text)
    }
}

/// Seeds in effect for a run, surfaced in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub data: Option<u64>,
    pub model: u64,
    pub pretrain: u64,
    pub finetune: u64,
}

/// Record of one completed run: the resolved configuration, seeds, hashes of
/// every artifact written, per-stage durations, and the crate version.
/// Re-running from the same manifest reproduces identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: SeedSummary,
    pub artifacts: BTreeMap<String, String>,
    pub stage_durations_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| EapoError::InvalidConfig(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| EapoError::InvalidConfig(e.to_string()))
    }
}

/// Check that every artifact recorded in the manifest is still on disk with
/// the recorded content hash.
pub fn verify_manifest(manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    for (name, want) in &manifest.artifacts {
        let path = out_dir.join(name);
        let bytes = fs::read(&path).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let got = fnv1a_hex(&bytes);
        if got != *want {
            return Err(EapoError::InvalidConfig(format!(
                "artifact {name} hash mismatch: manifest {want}, disk {got}"
            )));
        }
    }
    Ok(())
}

fn verbosity() -> u8 {
    match std::env::var("EAPO_LOG").as_deref() {
        Ok("quiet") | Ok("error") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

pub(crate) fn log_info(msg: &str) {
    if verbosity() >= 1 {
        eprintln!("[eapo] {msg}");
    }
}

pub(crate) fn log_debug(msg: &str) {
    if verbosity() >= 2 {
        eprintln!("[eapo] {msg}");
    }
}

/// 64-bit FNV-1a, hex encoded. Content addressing only, not cryptographic.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

fn hash_of<T: Serialize>(sections: &[&T]) -> String {
    let mut buf = Vec::new();
    for s in sections {
        buf.extend_from_slice(
            serde_json::to_string(s)
                .expect("config serializes")
                .as_bytes(),
        );
        buf.push(b'\n');
    }
    fnv1a_hex(&buf)
}

struct StagePaths {
    data_hash: String,
    pretrain_hash: String,
    adapt_hash: String,
    eval_pretrained_hash: String,
    eval_adapted_hash: String,
}

fn stage_paths(cfg: &ExperimentConfig) -> StagePaths {
    let data = serde_json::to_value(&cfg.data).expect("serializable");
    let model = serde_json::to_value(&cfg.model).expect("serializable");
    let pre = serde_json::to_value(&cfg.pretrain).expect("serializable");
    let fine = serde_json::to_value(&cfg.finetune).expect("serializable");
    let eval = serde_json::to_value(&cfg.eval).expect("serializable");
    StagePaths {
        data_hash: hash_of(&[&data]),
        pretrain_hash: hash_of(&[&data, &model, &pre]),
        adapt_hash: hash_of(&[&data, &model, &pre, &fine]),
        eval_pretrained_hash: hash_of(&[&data, &model, &pre, &eval]),
        eval_adapted_hash: hash_of(&[&data, &model, &pre, &fine, &eval]),
    }
}

/// Train/test pair standardized on the training statistics, ready for
/// modeling and retrieval.
struct PreparedData {
    train: Dataset,
    test: Dataset,
}

fn materialize(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Synthetic(s) => generate_synthetic(s),
        DataConfig::Files { train, test, schema } => {
            Ok((load_table(train, schema)?, load_table(test, schema)?))
        }
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = materialize(cfg)?;
    let standardizer = Standardizer::fit(&train)?;
    Ok(PreparedData {
        train: standardizer.apply(&train)?,
        test: standardizer.apply(&test)?,
    })
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| EapoError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })
}

/// Emit the synthetic train/test tables. Errors when the run is configured
/// with file-based data.
pub fn cmd_synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let DataConfig::Synthetic(_) = &cfg.data else {
        return Err(EapoError::InvalidConfig(
            "synth stage requires a synthetic data source".into(),
        ));
    };
    ensure_out_dir(out_dir)?;
    let (train, test) = materialize(cfg)?;
    let paths = stage_paths(cfg);
    let train_path = out_dir.join(format!("train_{}.csv", paths.data_hash));
    let test_path = out_dir.join(format!("test_{}.csv", paths.data_hash));
    train.export_table(&train_path, ',')?;
    test.export_table(&test_path, ',')?;
    log_info(&format!(
        "synth: wrote {} train rows, {} test rows",
        train.len(),
        test.len()
    ));
    Ok(vec![train_path, test_path])
}

/// Pretrain on the (standardized) training set and write the checkpoint and
/// epoch history.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let prepared = prepare(cfg)?;
    let model = Classifier::init(
        cfg.model.kind,
        prepared.train.dim(),
        &cfg.model.hidden,
        cfg.model.seed,
    )?;
    log_info(&format!(
        "pretrain: {} records, {} epochs",
        prepared.train.len(),
        cfg.pretrain.epochs
    ));
    let (trained, history) = pretrain(model, &prepared.train, &cfg.pretrain)?;
    let paths = stage_paths(cfg);
    let ckpt = out_dir.join(format!("pretrained_{}.json", paths.pretrain_hash));
    let hist = out_dir.join(format!("pretrain_history_{}.csv", paths.pretrain_hash));
    trained.save_checkpoint(&ckpt)?;
    history.export_table(&hist, ',')?;
    log_debug(&format!("pretrain: checkpoint at {}", ckpt.display()));
    Ok(vec![ckpt, hist])
}

/// Retrieve the local manifold from the unlabeled test inputs, write the
/// retrieval audit tables, fine-tune against the frozen pretrained
/// reference, and write the adapted checkpoint.
pub fn cmd_adapt(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let paths = stage_paths(cfg);
    let pretrained_path = out_dir.join(format!("pretrained_{}.json", paths.pretrain_hash));
    if !pretrained_path.exists() {
        return Err(EapoError::Checkpoint(format!(
            "pretrained checkpoint {} not found; run the pretrain stage first",
            pretrained_path.display()
        )));
    }
    let pretrained = Classifier::load_checkpoint(&pretrained_path)?;
    let reference = pretrained.freeze_reference();

    let prepared = prepare(cfg)?;
    // Transductive by default: the full unlabeled test feature set drives
    // retrieval; query_subsample caps it with a seeded draw.
    let mut queries: Vec<Vec<f64>> = prepared
        .test
        .records()
        .iter()
        .map(|r| r.features.clone())
        .collect();
    if let Some(budget) = cfg.finetune.query_subsample {
        if budget < queries.len() {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.finetune.seed);
            rng.set_stream(2);
            let mut picks: Vec<usize> = (0..queries.len()).collect();
            picks.shuffle(&mut rng);
            picks.truncate(budget);
            picks.sort_unstable();
            queries = picks.into_iter().map(|i| std::mem::take(&mut queries[i])).collect();
        }
    }
    let manifold = build_local_manifold(&queries, &prepared.train, cfg.finetune.k)?;
    let extreme = extract_extreme(&manifold);
    log_info(&format!(
        "adapt: manifold {} records ({} extreme) from {} queries, k={}",
        manifold.len(),
        extreme.len(),
        manifold.query_count(),
        cfg.finetune.k
    ));
    if extreme.is_empty() {
        eprintln!("[eapo] warning: extreme subset is empty; lambda2 term contributes zero");
    }

    let manifold_path = out_dir.join(format!("manifold_{}.csv", paths.adapt_hash));
    let extreme_path = out_dir.join(format!("extreme_{}.csv", paths.adapt_hash));
    manifold.export_table(&manifold_path, ',')?;
    extreme.export_table(&extreme_path, ',')?;

    let (adapted, history) = finetune(pretrained, &reference, &manifold, &extreme, &cfg.finetune)?;
    for w in &history.warnings {
        eprintln!("[eapo] warning: {w}");
    }
    let ckpt = out_dir.join(format!("adapted_{}.json", paths.adapt_hash));
    let hist = out_dir.join(format!("finetune_history_{}.csv", paths.adapt_hash));
    adapted.save_checkpoint(&ckpt)?;
    history.export_table(&hist, ',')?;
    Ok(vec![manifold_path, extreme_path, ckpt, hist])
}

/// Structured evaluation artifact: which checkpoint was scored, where its
/// decision threshold came from, and the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub model_role: String,
    pub threshold_source: String,
    pub report: EvalReport,
    pub breakdown: Option<IntensityBreakdown>,
}

fn scores_of(model: &Classifier, ds: &Dataset) -> Result<Vec<f64>> {
    ds.records()
        .iter()
        .map(|r| Ok(sigmoid(model.forward(&r.features)?)))
        .collect()
}

fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    model: &Classifier,
    role: &str,
    out_dir: &Path,
    hash: &str,
) -> Result<Vec<PathBuf>> {
    let train_scores = scores_of(model, &prepared.train)?;
    let train_labels: Vec<u8> = prepared.train.records().iter().map(|r| r.label).collect();
    // The threshold comes from the training split, never from test.
    let threshold = select_threshold_pr(&train_scores, &train_labels)?;

    let test_scores = scores_of(model, &prepared.test)?;
    let test_labels: Vec<u8> = prepared.test.records().iter().map(|r| r.label).collect();
    let report = metrics_at_threshold(&test_scores, &test_labels, threshold)?;
    if report.roc_auc.is_none() {
        eprintln!("[eapo] warning: test set contains one class; roc_auc disabled");
    }

    let intensities: Vec<Option<f64>> = prepared
        .test
        .records()
        .iter()
        .map(|r| r.intensity)
        .collect();
    let has_full_intensity = prepared
        .test
        .records()
        .iter()
        .all(|r| r.label == 0 || r.intensity.is_some());
    let breakdown = if has_full_intensity && prepared.test.positive_count() > 0 {
        Some(intensity_breakdown(
            &test_scores,
            &test_labels,
            &intensities,
            threshold,
            cfg.eval.bin_width,
        )?)
    } else {
        if !has_full_intensity {
            eprintln!(
                "[eapo] warning: test positives lack intensities; skipping intensity breakdown"
            );
        }
        None
    };

    let artifact = EvalArtifact {
        model_role: role.to_string(),
        threshold_source: "train".to_string(),
        report,
        breakdown: breakdown.clone(),
    };
    let eval_path = out_dir.join(format!("eval_{role}_{hash}.json"));
    let body = serde_json::to_string_pretty(&artifact)
        .map_err(|e| EapoError::InvalidConfig(e.to_string()))?;
    fs::write(&eval_path, body).map_err(|e| EapoError::Io {
        path: eval_path.display().to_string(),
        source: e,
    })?;
    let mut written = vec![eval_path];
    if let Some(b) = breakdown {
        let bins_path = out_dir.join(format!("bins_{role}_{hash}.csv"));
        b.export_table(&bins_path, ',')?;
        written.push(bins_path);
    }
    log_info(&format!(
        "eval[{role}]: threshold {} (train split), f1 {}, auc {:?}",
        artifact.report.threshold, artifact.report.f1, artifact.report.roc_auc
    ));
    Ok(written)
}

/// Evaluate the pretrained checkpoint (required) and the adapted checkpoint
/// (when present): threshold selected on the training split, metrics on the
/// test split, plus the intensity breakdown when intensities exist.
pub fn cmd_eval(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let paths = stage_paths(cfg);
    let prepared = prepare(cfg)?;

    let pretrained_path = out_dir.join(format!("pretrained_{}.json", paths.pretrain_hash));
    if !pretrained_path.exists() {
        return Err(EapoError::Checkpoint(format!(
            "pretrained checkpoint {} not found; run the pretrain stage first",
            pretrained_path.display()
        )));
    }
    let pretrained = Classifier::load_checkpoint(&pretrained_path)?;
    let mut written = evaluate_checkpoint(
        cfg,
        &prepared,
        &pretrained,
        "pretrained",
        out_dir,
        &paths.eval_pretrained_hash,
    )?;

    let adapted_path = out_dir.join(format!("adapted_{}.json", paths.adapt_hash));
    if adapted_path.exists() {
        let adapted = Classifier::load_checkpoint(&adapted_path)?;
        written.extend(evaluate_checkpoint(
            cfg,
            &prepared,
            &adapted,
            "adapted",
            out_dir,
            &paths.eval_adapted_hash,
        )?);
    } else {
        log_info("eval: no adapted checkpoint present; evaluated pretrained only");
    }
    Ok(written)
}

/// Run every stage in order and write `manifest.json` last. Accepts the
/// same config as the individual stages; partial failure leaves the outputs
/// of completed stages intact.
pub fn cmd_run_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    ensure_out_dir(out_dir)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut durations: BTreeMap<String, u64> = BTreeMap::new();

    let run_stage = |name: &str,
                         stage: &dyn Fn() -> Result<Vec<PathBuf>>,
                         artifacts: &mut Vec<PathBuf>,
                         durations: &mut BTreeMap<String, u64>|
     -> Result<()> {
        let start = Instant::now();
        let written = stage()?;
        durations.insert(name.to_string(), start.elapsed().as_millis() as u64);
        artifacts.extend(written);
        Ok(())
    };

    if matches!(cfg.data, DataConfig::Synthetic(_)) {
        run_stage("synth", &|| cmd_synth(cfg, out_dir), &mut artifacts, &mut durations)?;
    }
    run_stage("pretrain", &|| cmd_pretrain(cfg, out_dir), &mut artifacts, &mut durations)?;
    run_stage("adapt", &|| cmd_adapt(cfg, out_dir), &mut artifacts, &mut durations)?;
    run_stage("eval", &|| cmd_eval(cfg, out_dir), &mut artifacts, &mut durations)?;

    let mut hashed = BTreeMap::new();
    for path in &artifacts {
        let bytes = fs::read(path).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        hashed.insert(name, fnv1a_hex(&bytes));
    }

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seeds: SeedSummary {
            data: match &cfg.data {
                DataConfig::Synthetic(s) => Some(s.seed),
                DataConfig::Files { .. } => None,
            },
            model: cfg.model.seed,
            pretrain: cfg.pretrain.seed,
            finetune: cfg.finetune.seed,
        },
        artifacts: hashed,
        stage_durations_ms: durations,
    };
    let manifest_path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EapoError::InvalidConfig(e.to_string()))?;
    fs::write(&manifest_path, body).map_err(|e| EapoError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    log_info(&format!("run complete; manifest at {}", manifest_path.display()));
    Ok(manifest)
}
