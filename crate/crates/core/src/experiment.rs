//! Experiment configuration files and the data they describe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::checkpoint::config_hash;
use crate::datamodel::{DomainTag, Framework, Segment, Stage, TrainConfig, DEFAULT_EPOCH_SCALE};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{GridData, GridSettings, GridSpec, SplitSpec, StageConfigs};
use crate::rng::derive_seed;
use crate::store::read_dataset;
use crate::synthgen::{generate_dataset, SynthSpec};

/// Environment variable that replaces `out_dir`.
pub const OUT_ENV: &str = "VIBEFM_OUT";

/// Dataset locations. Domains without a path are generated from `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthSpec,
    /// Dataset directories keyed by domain tag, e.g. `SYNTH_A`.
    pub paths: BTreeMap<String, PathBuf>,
    /// Unlabeled pretraining corpus.
    pub pretrain: Option<PathBuf>,
    /// Labeled corpus for the source supervised model. Defaults to the
    /// pretraining corpus.
    pub source: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            paths: BTreeMap::new(),
            pretrain: None,
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub pretrain: TrainConfig,
    pub supervised: TrainConfig,
    pub finetune: TrainConfig,
    pub supervised_finetune: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let stages = StageConfigs::desk_scaled(DEFAULT_EPOCH_SCALE);
        Self {
            seed: 0,
            pretrain: stages.pretrain,
            supervised: stages.supervised,
            finetune: stages.finetune,
            supervised_finetune: stages.supervised_finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root of every random stream in the experiment.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
    pub split: SplitSpec,
    pub grid: GridSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            out_dir: PathBuf::from("reports"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainSection::default(),
            split: SplitSpec::default(),
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Tables merge key by key; everything else is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `a.b.c=value`. Returns `InvalidArgument` on malformed input.
pub fn parse_override(assignment: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("override key `{key}` is malformed")));
    }
    Ok((path, parse_override_value(raw.trim())))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = root;
    for p in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{}` is not a table", path.join("."))))?;
        node = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| config_err(format!("`{}` is not a table", path.join("."))))?
        .insert(last.clone(), value);
    Ok(())
}

fn parse_document(text: &str, format: Format) -> Result<toml::Value> {
    match format {
        Format::Toml => toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| config_err(format!("TOML: {e}"))),
        Format::Json => {
            let mut json: serde_json::Value = serde_json::from_str(text).map_err(|e| config_err(format!("JSON: {e}")))?;
            drop_nulls(&mut json);
            toml::Value::try_from(json).map_err(|e| config_err(format!("JSON: {e}")))
        }
    }
}

/// TOML has no null, so an explicit null leaves the key at its default.
fn drop_nulls(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|_, v| !v.is_null());
            map.values_mut().for_each(drop_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(drop_nulls),
        _ => {}
    }
}

impl ExperimentConfig {
    /// Parses a document, layering it and then `overrides` over the defaults.
    pub fn parse(text: &str, format: Format, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default()).map_err(config_err)?;
        merge(&mut value, parse_document(text, format)?);
        for o in overrides {
            let (path, v) = parse_override(o)?;
            set_path(&mut value, &path, v)?;
        }
        let config: Self = value.try_into().map_err(config_err)?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Format::for_path(path), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn check(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err(format!("name `{}` must be a plain directory name", self.name)));
        }
        self.data.synth.check()?;
        for key in self.data.paths.keys() {
            parse_domain(key)?;
        }
        self.encoder.check()?;
        self.augment.check()?;
        self.split.check()?;
        self.grid.check()?;
        self.stages().check()
    }

    /// Output directory of this experiment, honouring [`OUT_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone());
        root.join(&self.name)
    }

    /// Stage settings with seeds derived from the root and train seeds.
    pub fn stages(&self) -> StageConfigs {
        let t = &self.train;
        let seeded = |cfg: &TrainConfig| TrainConfig {
            seed: derive_seed(self.seed, &format!("train-{}", cfg.stage.as_str()), &[t.seed, cfg.seed]),
            ..cfg.clone()
        };
        StageConfigs {
            pretrain: seeded(&t.pretrain),
            supervised: seeded(&t.supervised),
            finetune: seeded(&t.finetune),
            supervised_finetune: seeded(&t.supervised_finetune),
        }
    }

    pub fn stage(&self, stage: Stage) -> TrainConfig {
        let s = self.stages();
        match stage {
            Stage::Pretrain => s.pretrain,
            Stage::Supervised => s.supervised,
            Stage::Finetune => s.finetune,
            Stage::SupervisedFinetune => s.supervised_finetune,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: derive_seed(self.seed, "encoder", &[self.encoder.seed]),
            ..self.encoder.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: derive_seed(self.seed, "split", &[self.split.seed]),
            ..self.split.clone()
        }
    }

    /// Generator settings for the labeled domains. SYNTH_A and SYNTH_B share
    /// runs and differ only in noise.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: derive_seed(self.seed, "synth", &[self.data.synth.seed]),
            ..self.data.synth.clone()
        }
    }

    /// Generator settings for the unlabeled pretraining corpus.
    pub fn pretrain_synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: derive_seed(self.seed, "synth-pretrain", &[self.data.synth.seed]),
            ..self.data.synth.clone()
        }
    }

    pub fn grid_settings(&self, jobs: usize) -> GridSettings {
        GridSettings {
            grid: self.grid.clone(),
            split: self.split_spec(),
            stages: self.stages(),
            encoder: self.encoder_config(),
            augment: self.augment.clone(),
            jobs,
        }
    }

    fn domain_path(&self, domain: DomainTag) -> Option<&PathBuf> {
        self.data.paths.get(domain.as_str())
    }

    /// Segments of a labeled domain, from disk or the generator.
    pub fn load_domain(&self, domain: DomainTag) -> Result<Vec<Segment>> {
        match self.domain_path(domain) {
            Some(path) => read_dataset(path),
            None if domain.is_synthetic() => generate_dataset(&self.synth_spec(), domain),
            None => Err(Error::MissingDomain(domain.as_str().into())),
        }
    }

    pub fn load_pretrain(&self) -> Result<Vec<Segment>> {
        match &self.data.pretrain {
            Some(path) => read_dataset(path),
            None => generate_dataset(&self.pretrain_synth_spec(), DomainTag::SynthA),
        }
    }

    pub fn load_source(&self, pretrain: &[Segment]) -> Result<Vec<Segment>> {
        match &self.data.source {
            Some(path) => read_dataset(path),
            None => Ok(pretrain.to_vec()),
        }
    }

    /// Number of classes: the generator's class count, or one more than the
    /// largest label on disk when every domain is read from files.
    pub fn num_classes(&self, domains: &BTreeMap<DomainTag, Vec<Segment>>) -> usize {
        let on_disk = domains.keys().all(|d| self.domain_path(*d).is_some());
        if on_disk && !domains.is_empty() {
            domains
                .values()
                .flatten()
                .filter_map(|s| s.label)
                .max()
                .map_or(0, |m| m + 1)
        } else {
            self.data.synth.num_classes
        }
    }

    /// Everything `run_grid` needs: the train and test domains, the
    /// pretraining corpus and the source corpus.
    pub fn grid_data(&self) -> Result<GridData> {
        let mut domains = BTreeMap::new();
        for d in std::iter::once(self.grid.train_domain).chain(self.grid.test_domains.iter().copied()) {
            if !domains.contains_key(&d) {
                domains.insert(d, self.load_domain(d)?);
            }
        }
        let needs_pretrain = self.grid.frameworks.contains(&Framework::Focal);
        let needs_source = self.grid.frameworks.contains(&Framework::SupervisedFinetune);
        let pretrain = if needs_pretrain || (needs_source && self.data.source.is_none()) {
            self.load_pretrain()?
        } else {
            Vec::new()
        };
        let source = if needs_source { self.load_source(&pretrain)? } else { Vec::new() };
        Ok(GridData {
            specs: self.data.synth.modalities.clone(),
            num_classes: self.num_classes(&domains),
            domains,
            pretrain,
            source,
        })
    }
}

pub fn parse_domain(name: &str) -> Result<DomainTag> {
    DomainTag::ALL
        .into_iter()
        .find(|d| d.as_str().eq_ignore_ascii_case(name))
        .ok_or_else(|| config_err(format!("unknown domain `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::EncoderKind;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::parse("", Format::Toml, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let text = r#"
            name = "small"
            [train.pretrain]
            epochs = 3
            [grid]
            encoders = ["DEEPSENSE"]
            frameworks = ["FOCAL"]
        "#;
        let cfg = ExperimentConfig::parse(text, Format::Toml, &[]).unwrap();
        assert_eq!(cfg.train.pretrain.epochs, 3);
        assert_eq!(cfg.train.pretrain.batch_size, TrainSection::default().pretrain.batch_size);
        assert_eq!(cfg.grid.encoders, vec![EncoderKind::Deepsense]);
        assert_eq!(cfg.grid.frameworks, vec![Framework::Focal]);
        assert_eq!(cfg.grid.seeds, GridSpec::default().seeds);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[train.pretrain]\nepoch = 3", "[data.synth]\nnum_class = 3"] {
            let err = ExperimentConfig::parse(text, Format::Toml, &[]).unwrap_err();
            assert_eq!(err.code(), "CONFIG_INVALID", "{text}");
        }
        let err = ExperimentConfig::parse("", Format::Toml, &["trian.seed=1".into()]).unwrap_err();
        assert_eq!(err.code(), "CONFIG_INVALID");
    }

    #[test]
    fn overrides_win_over_the_document() {
        let cfg = ExperimentConfig::parse(
            "[train]\nseed = 3",
            Format::Toml,
            &["train.seed=7".into(), "name=other".into(), "grid.ratios=[1.0, 0.1]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.name, "other");
        assert_eq!(cfg.grid.ratios, vec![1.0, 0.1]);
        assert_eq!(parse_override("noequals").unwrap_err().code(), "INVALID_ARGUMENT");
    }

    #[test]
    fn json_matches_toml() {
        let toml_cfg = ExperimentConfig::parse("seed = 5\n[split]\nstratified = false", Format::Toml, &[]).unwrap();
        let json_cfg =
            ExperimentConfig::parse(r#"{"seed": 5, "split": {"stratified": false}}"#, Format::Json, &[]).unwrap();
        assert_eq!(toml_cfg, json_cfg);
        assert_eq!(toml_cfg.hash().unwrap(), json_cfg.hash().unwrap());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::parse("seed = 9", Format::Toml, &[]).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("null"));
        assert_eq!(ExperimentConfig::parse(&text, Format::Json, &[]).unwrap(), cfg);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.paths.insert("SYNTH_A".into(), PathBuf::from("data/a"));
        cfg.data.pretrain = Some(PathBuf::from("data/p"));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text, Format::Toml, &[]).unwrap(), cfg);
    }

    #[test]
    fn seeds_flow_from_the_root() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.stages().pretrain.seed, b.stages().pretrain.seed);
        assert_ne!(a.encoder_config().seed, b.encoder_config().seed);
        assert_ne!(a.split_spec().seed, b.split_spec().seed);
        assert_ne!(a.synth_spec().seed, a.pretrain_synth_spec().seed);
        let mut c = a.clone();
        c.train.seed = 7;
        assert_ne!(a.stages().finetune.seed, c.stages().finetune.seed);
        assert_eq!(a.encoder_config().seed, c.encoder_config().seed);
    }

    #[test]
    fn bad_values_fail_validation() {
        for o in ["name=\"a/b\"", "grid.ratios=[2.0]", "data.paths.NOWHERE=\"x\""] {
            assert!(ExperimentConfig::parse("", Format::Toml, &[o.into()]).is_err(), "{o}");
        }
    }
}
