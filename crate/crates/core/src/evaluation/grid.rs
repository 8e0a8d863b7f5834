use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint::Checkpoint;
use crate::datamodel::{
    DomainTag, EncoderKind, EvalReport, EvalRow, Framework, ModalitySpec, Segment, Stage, TrainConfig,
    DEFAULT_LABEL_RATIOS,
};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::training::{
    finetune_linear, finetune_supervised_baseline, predict, pretrain, train_supervised, RunOptions, SpectralSet,
    TrainOutcome,
};

use super::metrics::{metrics, record_convergence};
use super::split::{split_dataset, subsample_labels, Split, SplitSpec};

/// Which cells to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub frameworks: Vec<Framework>,
    pub encoders: Vec<EncoderKind>,
    pub ratios: Vec<f64>,
    pub train_domain: DomainTag,
    pub test_domains: Vec<DomainTag>,
    pub seeds: Vec<u64>,
    /// Length of the recorded convergence curves.
    pub convergence_epochs: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            frameworks: Framework::ALL.to_vec(),
            encoders: vec![EncoderKind::Deepsense, EncoderKind::Swin],
            ratios: DEFAULT_LABEL_RATIOS.to_vec(),
            train_domain: DomainTag::SynthA,
            test_domains: vec![DomainTag::SynthA, DomainTag::SynthB],
            seeds: vec![0, 1, 2],
            convergence_epochs: 100,
        }
    }
}

impl GridSpec {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.frameworks.is_empty() || self.encoders.is_empty() || self.seeds.is_empty() {
            return bad("grid needs at least one framework, encoder and seed");
        }
        if self.ratios.is_empty() || self.test_domains.is_empty() {
            return bad("grid needs at least one label ratio and test domain");
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::RatioOutOfRange(*r));
        }
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.frameworks.len() * self.encoders.len() * self.ratios.len() * self.test_domains.len() * self.seeds.len()
    }
}

/// Stage settings used by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfigs {
    pub pretrain: TrainConfig,
    pub supervised: TrainConfig,
    pub finetune: TrainConfig,
    pub supervised_finetune: TrainConfig,
}

impl StageConfigs {
    pub fn desk_scaled(epoch_scale: f64) -> Self {
        let mut supervised_finetune = TrainConfig::desk_scaled(Stage::Finetune, epoch_scale);
        supervised_finetune.stage = Stage::SupervisedFinetune;
        Self {
            pretrain: TrainConfig::desk_scaled(Stage::Pretrain, epoch_scale),
            supervised: TrainConfig::desk_scaled(Stage::Supervised, epoch_scale),
            finetune: TrainConfig::desk_scaled(Stage::Finetune, epoch_scale),
            supervised_finetune,
        }
    }

    pub fn check(&self) -> Result<()> {
        for (cfg, stage) in [
            (&self.pretrain, Stage::Pretrain),
            (&self.supervised, Stage::Supervised),
            (&self.finetune, Stage::Finetune),
            (&self.supervised_finetune, Stage::SupervisedFinetune),
        ] {
            if cfg.stage != stage {
                return Err(Error::Config(format!("{stage} settings carry stage {}", cfg.stage)));
            }
            cfg.check()?;
        }
        Ok(())
    }
}

/// Datasets a grid draws from.
#[derive(Debug, Clone, Default)]
pub struct GridData {
    pub specs: Vec<ModalitySpec>,
    pub num_classes: usize,
    /// Labeled data per deployment domain.
    pub domains: BTreeMap<DomainTag, Vec<Segment>>,
    /// Pre-training corpus; labels are ignored.
    pub pretrain: Vec<Segment>,
    /// Labeled source data for the supervised model that the
    /// supervised-fine-tune baseline starts from.
    pub source: Vec<Segment>,
}

#[derive(Debug, Clone)]
pub struct GridSettings {
    pub grid: GridSpec,
    pub split: SplitSpec,
    pub stages: StageConfigs,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    /// Parallel cells.
    pub jobs: usize,
}

/// `100`, `50`, `10`, `1`, or the exact percentage for other ratios.
pub fn ratio_label(ratio: f64) -> String {
    let pct = ratio * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

pub fn cell_id(encoder: EncoderKind, framework: Framework, ratio: f64, seed: u64) -> String {
    format!(
        "{}-{}-r{}-s{seed}",
        encoder.as_str().to_lowercase(),
        framework.as_str().to_lowercase(),
        ratio_label(ratio)
    )
}

fn encoder_config(settings: &GridSettings, kind: EncoderKind, seed: u64, stream: &str) -> EncoderConfig {
    EncoderConfig {
        kind,
        seed: derive_seed(settings.encoder.seed, stream, &[seed, kind as u64]),
        ..settings.encoder.clone()
    }
}

fn seeded(config: &TrainConfig, seed: u64, stream: &str, path: &[u64]) -> TrainConfig {
    let full: Vec<u64> = std::iter::once(seed).chain(path.iter().copied()).collect();
    TrainConfig {
        seed: derive_seed(config.seed, stream, &full),
        ..config.clone()
    }
}

/// Models shared by the cells of one encoder and seed.
#[derive(Default)]
struct Bases {
    pretrained: Option<Checkpoint>,
    source: Option<Checkpoint>,
}

fn build_bases(settings: &GridSettings, data: &GridData, kind: EncoderKind, seed: u64) -> Result<Bases> {
    let options = RunOptions {
        augment: settings.augment.clone(),
        ..RunOptions::default()
    };
    let mut bases = Bases::default();
    if settings.grid.frameworks.contains(&Framework::Focal) {
        if data.pretrain.is_empty() {
            return Err(Error::MissingDomain("pre-training corpus".into()));
        }
        let cfg = seeded(&settings.stages.pretrain, seed, "grid-pretrain", &[kind as u64]);
        log::info!("pretraining {} (seed {seed})", kind.display_name());
        let outcome = pretrain(&data.pretrain, &data.specs, &cfg, &encoder_config(settings, kind, seed, "grid-encoder"), &options)?;
        bases.pretrained = Some(outcome.checkpoint(cfg.seed, &cfg)?);
    }
    if settings.grid.frameworks.contains(&Framework::SupervisedFinetune) {
        if data.source.is_empty() {
            return Err(Error::MissingDomain("labeled source corpus".into()));
        }
        let source_split = split_dataset(&data.source, &settings.split)?;
        let cfg = seeded(&settings.stages.supervised, seed, "grid-source", &[kind as u64]);
        log::info!("training source model {} (seed {seed})", kind.display_name());
        let outcome = train_supervised(
            &source_split.train,
            &source_split.val,
            &data.specs,
            data.num_classes,
            &cfg,
            &encoder_config(settings, kind, seed, "grid-source-encoder"),
            &options,
        )?;
        bases.source = Some(outcome.checkpoint(cfg.seed, &cfg)?);
    }
    Ok(bases)
}

struct Cell {
    encoder: EncoderKind,
    framework: Framework,
    ratio_index: usize,
    seed_index: usize,
}

fn run_cell(
    settings: &GridSettings,
    data: &GridData,
    splits: &BTreeMap<DomainTag, Split>,
    bases: &Bases,
    cell: &Cell,
) -> Result<(Vec<EvalRow>, crate::datamodel::ConvergenceCurve)> {
    let grid = &settings.grid;
    let seed = grid.seeds[cell.seed_index];
    let ratio = grid.ratios[cell.ratio_index];
    let train_split = &splits[&grid.train_domain];
    let subset = subsample_labels(&train_split.train, ratio, derive_seed(settings.split.seed, "grid-subsample", &[seed]))?;
    let options = RunOptions {
        augment: settings.augment.clone(),
        ..RunOptions::default()
    };
    let path = [cell.encoder as u64, cell.ratio_index as u64];
    let id = cell_id(cell.encoder, cell.framework, ratio, seed);
    log::info!("cell {id}: {} labeled samples", subset.len());
    let missing = |what: &str| Error::MissingDomain(format!("{what} for {id}"));
    let outcome: TrainOutcome = match cell.framework {
        Framework::Supervised => train_supervised(
            &subset,
            &train_split.val,
            &data.specs,
            data.num_classes,
            &seeded(&settings.stages.supervised, seed, "grid-supervised", &path),
            &encoder_config(settings, cell.encoder, seed, "grid-supervised-encoder"),
            &options,
        )?,
        Framework::SupervisedFinetune => finetune_supervised_baseline(
            bases.source.as_ref().ok_or_else(|| missing("source model"))?,
            &subset,
            &train_split.val,
            data.num_classes,
            &seeded(&settings.stages.supervised_finetune, seed, "grid-supervised-finetune", &path),
            &options,
        )?,
        Framework::Focal => finetune_linear(
            bases.pretrained.as_ref().ok_or_else(|| missing("pre-trained encoder"))?,
            &subset,
            &train_split.val,
            data.num_classes,
            &seeded(&settings.stages.finetune, seed, "grid-finetune", &path),
            &options,
        )?,
    };
    let mut rows = Vec::with_capacity(grid.test_domains.len());
    for domain in &grid.test_domains {
        let test = &splits[domain].test;
        let set = SpectralSet::from_segments(test, &data.specs)?;
        let pred = predict(&outcome.model, &set, 64)?;
        let m = metrics(&pred, &set.labels(data.num_classes)?, data.num_classes)?;
        rows.push(EvalRow {
            encoder: cell.encoder,
            framework: cell.framework,
            label_ratio: ratio,
            train_domain: grid.train_domain,
            test_domain: *domain,
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            seed,
        });
    }
    Ok((rows, record_convergence(&id, &outcome.history, grid.convergence_epochs)))
}

/// Trains every (framework, encoder, ratio, seed) cell on the train domain
/// and evaluates the same model on the test split of each test domain.
/// Results do not depend on `jobs`.
pub fn run_grid(settings: &GridSettings, data: &GridData) -> Result<EvalReport> {
    let grid = &settings.grid;
    grid.check()?;
    settings.split.check()?;
    settings.stages.check()?;
    settings.augment.check()?;
    for d in std::iter::once(&grid.train_domain).chain(&grid.test_domains) {
        if data.domains.get(d).is_none_or(|v| v.is_empty()) {
            return Err(Error::MissingDomain(d.to_string()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        let mut per_seed = Vec::with_capacity(grid.seeds.len());
        for &seed in &grid.seeds {
            let mut split_spec = settings.split.clone();
            split_spec.seed = derive_seed(settings.split.seed, "grid-split", &[seed]);
            let mut splits = BTreeMap::new();
            for d in std::iter::once(&grid.train_domain).chain(&grid.test_domains) {
                if !splits.contains_key(d) {
                    splits.insert(*d, split_dataset(&data.domains[d], &split_spec)?);
                }
            }
            per_seed.push(splits);
        }
        let base_keys: Vec<(EncoderKind, usize)> = grid
            .encoders
            .iter()
            .flat_map(|&e| (0..grid.seeds.len()).map(move |s| (e, s)))
            .collect();
        let bases: Vec<Bases> = base_keys
            .par_iter()
            .map(|&(e, s)| build_bases(settings, data, e, grid.seeds[s]))
            .collect::<Result<_>>()?;
        let bases: BTreeMap<(EncoderKind, usize), Bases> = base_keys.into_iter().zip(bases).collect();

        let mut cells = Vec::new();
        for &encoder in &grid.encoders {
            for &framework in &grid.frameworks {
                for ratio_index in 0..grid.ratios.len() {
                    for seed_index in 0..grid.seeds.len() {
                        cells.push(Cell {
                            encoder,
                            framework,
                            ratio_index,
                            seed_index,
                        });
                    }
                }
            }
        }
        let results: Vec<_> = cells
            .par_iter()
            .map(|c| run_cell(settings, data, &per_seed[c.seed_index], &bases[&(c.encoder, c.seed_index)], c))
            .collect::<Result<_>>()?;
        let mut report = EvalReport::default();
        for (rows, curve) in results {
            report.rows.extend(rows);
            report.curves.push(curve);
        }
        report.curves.sort_by(|a, b| a.cell.cmp(&b.cell));
        Ok(report)
    })
}

/// Median of the values, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_ids() {
        assert_eq!(ratio_label(1.0), "100");
        assert_eq!(ratio_label(0.01), "1");
        assert_eq!(ratio_label(0.125), "12.5");
        assert_eq!(
            cell_id(EncoderKind::Deepsense, Framework::SupervisedFinetune, 0.1, 2),
            "deepsense-supervised_finetune-r10-s2"
        );
        assert_eq!(GridSpec::default().num_rows(), 3 * 2 * 4 * 2 * 3);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
    }

    #[test]
    fn missing_domains_are_reported() {
        let settings = GridSettings {
            grid: GridSpec::default(),
            split: SplitSpec::default(),
            stages: StageConfigs::desk_scaled(0.01),
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            jobs: 1,
        };
        let err = run_grid(&settings, &GridData::default()).unwrap_err();
        assert_eq!(err.code(), "MISSING_DOMAIN");
    }
}
