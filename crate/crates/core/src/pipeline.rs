//! End-to-end commands over an [`ExperimentConfig`], each recording its
//! outputs in `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint, FORMAT_VERSION};
use crate::datamodel::{DomainTag, EvalReport, Segment, Stage};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, metrics, read_report, run_grid, split_dataset, subsample_labels, Metrics, Split};
use crate::experiment::ExperimentConfig;
use crate::rng::derive_seed;
use crate::synthgen::{separability_probe, write_synth};
use crate::training::{
    finetune_linear, finetune_supervised_baseline, predict_segments, pretrain as run_pretrain, train_supervised,
    write_history_csv, RunOptions, TrainOutcome,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const SUPERVISED_CHECKPOINT: &str = "supervised.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the experiment directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Files written by each command, keyed by command name.
    pub commands: BTreeMap<String, Vec<FileRecord>>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn file_record(dir: &Path, path: &Path) -> Result<FileRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rel = path.strip_prefix(dir).unwrap_or(path);
    Ok(FileRecord {
        path: rel.to_string_lossy().replace('\\', "/"),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

/// Adds `command`'s files to the manifest in `dir`. A manifest written under
/// a different configuration is replaced.
pub fn record_manifest(dir: &Path, config: &ExperimentConfig, command: &str, files: &[PathBuf]) -> Result<Manifest> {
    let hash = config.hash()?;
    let mut manifest = match Manifest::read(dir) {
        Ok(m) if m.config_hash == hash => m,
        _ => Manifest {
            tool: "vibefm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: FORMAT_VERSION,
            config_hash: hash,
            seed: config.seed,
            config: config.clone(),
            commands: BTreeMap::new(),
        },
    };
    let mut records = files
        .iter()
        .map(|p| file_record(dir, p))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.path.cmp(&b.path));
    manifest.commands.insert(command.to_string(), records);
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn options(config: &ExperimentConfig) -> RunOptions {
    RunOptions {
        augment: config.augment.clone(),
        ..RunOptions::default()
    }
}

fn save_outcome(dir: &Path, name: &str, outcome: &TrainOutcome, seed: u64, cfg: &crate::datamodel::TrainConfig) -> Result<Vec<PathBuf>> {
    let ckpt = dir.join(format!("{name}.ckpt"));
    outcome.checkpoint(seed, cfg)?.save(&ckpt)?;
    let history = dir.join(format!("{name}_history.csv"));
    write_history_csv(&history, &outcome.history)?;
    Ok(vec![ckpt, history])
}

/// Directory names of the datasets written by [`synth`].
pub fn synth_dir(domain: Option<DomainTag>) -> &'static str {
    match domain {
        Some(DomainTag::SynthA) => "data/synth_a",
        Some(DomainTag::SynthB) => "data/synth_b",
        _ => "data/pretrain",
    }
}

/// Writes SYNTH_A, SYNTH_B and the pretraining corpus with their specs and
/// the separability probe of each labeled domain.
pub fn synth(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let specs = &config.data.synth.modalities;
    let mut files = Vec::new();
    let mut probes = BTreeMap::new();
    for domain in [DomainTag::SynthA, DomainTag::SynthB] {
        let segments = crate::synthgen::generate_dataset(&config.synth_spec(), domain)?;
        probes.insert(domain.as_str().to_string(), separability_probe(&segments, specs)?);
        let root = dir.join(synth_dir(Some(domain)));
        write_synth(&root, &config.synth_spec(), &segments)?;
        files.extend(dataset_files(&root)?);
    }
    let spec = config.pretrain_synth_spec();
    let corpus = crate::synthgen::generate_dataset(&spec, DomainTag::SynthA)?;
    let root = dir.join(synth_dir(None));
    write_synth(&root, &spec, &corpus)?;
    files.extend(dataset_files(&root)?);
    files.push(write_file(&dir.join("data/probe.json"), serde_json::to_string_pretty(&probes)?.as_bytes())?);
    Ok(files)
}

fn dataset_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn pretrain(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let corpus = config.load_pretrain()?;
    let cfg = config.stage(Stage::Pretrain);
    let outcome = run_pretrain(&corpus, &config.data.synth.modalities, &cfg, &config.encoder_config(), &options(config))?;
    save_outcome(dir, "pretrain", &outcome, config.seed, &cfg)
}

/// Train/val/test split of the train domain and the number of classes.
fn train_domain_split(config: &ExperimentConfig) -> Result<(Split, usize)> {
    let domain = config.grid.train_domain;
    let segments = config.load_domain(domain)?;
    let num_classes = config.num_classes(&BTreeMap::from([(domain, segments.clone())]));
    Ok((split_dataset(&segments, &config.split_spec())?, num_classes))
}

fn labeled_subset(config: &ExperimentConfig, train: &[Segment], ratio: f64) -> Result<Vec<Segment>> {
    subsample_labels(train, ratio, derive_seed(config.split_spec().seed, "subsample", &[]))
}

/// Supervised training from scratch on `ratio` of the train split.
pub fn train(config: &ExperimentConfig, dir: &Path, ratio: f64) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let (split, k) = train_domain_split(config)?;
    let subset = labeled_subset(config, &split.train, ratio)?;
    let cfg = config.stage(Stage::Supervised);
    let outcome = train_supervised(
        &subset,
        &split.val,
        &config.data.synth.modalities,
        k,
        &cfg,
        &config.encoder_config(),
        &options(config),
    )?;
    save_outcome(dir, "supervised", &outcome, config.seed, &cfg)
}

/// Linear probe on a pretrained checkpoint, or output-layer fine-tuning of a
/// supervised one, on `ratio` of the train split.
pub fn finetune(config: &ExperimentConfig, dir: &Path, checkpoint: &Path, ratio: f64) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (split, k) = train_domain_split(config)?;
    let subset = labeled_subset(config, &split.train, ratio)?;
    let (outcome, cfg) = match ckpt.meta.stage {
        Stage::Supervised => {
            let cfg = config.stage(Stage::SupervisedFinetune);
            (finetune_supervised_baseline(&ckpt, &subset, &split.val, k, &cfg, &options(config))?, cfg)
        }
        _ => {
            let cfg = config.stage(Stage::Finetune);
            (finetune_linear(&ckpt, &subset, &split.val, k, &cfg, &options(config))?, cfg)
        }
    };
    save_outcome(dir, "finetune", &outcome, config.seed, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: DomainTag,
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Scores a classifier checkpoint on the test split of every test domain.
pub fn evaluate(config: &ExperimentConfig, dir: &Path, checkpoint: &Path) -> Result<(Vec<DomainScore>, Vec<PathBuf>)> {
    create_dir(dir)?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let k = model
        .num_classes()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no classifier head".into()))?;
    let mut scores = Vec::new();
    for &domain in &config.grid.test_domains {
        let test = split_dataset(&config.load_domain(domain)?, &config.split_spec())?.test;
        let truth: Vec<usize> = test
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::Dataset(format!("unlabeled segment in {domain}"))))
            .collect::<Result<_>>()?;
        let Metrics { accuracy, macro_f1 } = metrics(&predict_segments(&model, &test, &model.specs)?, &truth, k)?;
        scores.push(DomainScore {
            domain,
            samples: test.len(),
            accuracy,
            macro_f1,
        });
    }
    let csv_path = dir.join("evaluation.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Dataset(e.to_string()))?;
    for s in &scores {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let json_path = write_file(&dir.join("evaluation.json"), serde_json::to_string_pretty(&scores)?.as_bytes())?;
    Ok((scores, vec![csv_path, json_path]))
}

pub fn grid(config: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<(EvalReport, Vec<PathBuf>)> {
    create_dir(dir)?;
    let report = run_grid(&config.grid_settings(jobs), &config.grid_data()?)?;
    let files = emit_report(&report, dir)?;
    Ok((report, files))
}

/// Re-renders the Markdown table and plots from the CSV files in `dir`.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    emit_report(&read_report(dir)?, dir)
}
