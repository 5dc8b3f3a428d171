//! TOML experiment configuration with exhaustive validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::finetune::FinetuneConfig;
use crate::nn::EncoderConfig;
use crate::phantom::PhantomConfig;
use crate::pretrain::PretrainConfig;
use crate::propagate::{SeedPosition, SliceSource};
use crate::refine::RefineConfig;
use crate::segmenter::{BackendKind, BackendSpec, NoiseModel};
use crate::triplet::Strategy;
use crate::volume::{DEFAULT_WINDOW_CENTER, DEFAULT_WINDOW_WIDTH};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Pretrain,
    Finetune,
    Evaluate,
    Refine,
    Propagate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Phantom,
    Nifti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root with `images/` and `labels/`, for `source = "nifti"`.
    /// Relative paths resolve against `POLYCL_CACHE` when it is set.
    pub root: Option<PathBuf>,
    pub phantoms: usize,
    pub phantom_seed: u64,
    pub phantom: PhantomConfig,
    /// Scan counts for train / val / test.
    pub split: [usize; 3],
    pub split_seed: u64,
    pub window_center: f32,
    pub window_width: f32,
    pub slice_fraction: f64,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            root: None,
            phantoms: 20,
            phantom_seed: 1000,
            phantom: PhantomConfig::default(),
            split: [14, 2, 4],
            split_seed: 7,
            window_center: DEFAULT_WINDOW_CENTER,
            window_width: DEFAULT_WINDOW_WIDTH,
            slice_fraction: 0.3,
            resolution: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineStage {
    pub backend: BackendKind,
    pub noise: NoiseModel,
    pub weights: Option<PathBuf>,
    pub min_area: usize,
    pub margin: usize,
}

impl Default for RefineStage {
    fn default() -> Self {
        let r = RefineConfig::default();
        let b = BackendSpec::default();
        Self {
            backend: b.backend,
            noise: b.noise,
            weights: b.weights,
            min_area: r.min_area,
            margin: r.margin,
        }
    }
}

impl RefineStage {
    pub fn backend_spec(&self) -> BackendSpec {
        BackendSpec {
            backend: self.backend,
            noise: self.noise,
            weights: self.weights.clone(),
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            min_area: self.min_area,
            margin: self.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagateStage {
    pub backend: BackendKind,
    pub noise: NoiseModel,
    pub weights: Option<PathBuf>,
    pub source: SliceSource,
    pub counts: Vec<usize>,
    pub positions: Vec<SeedPosition>,
    /// Write each test volume's pseudo-video as PNG frames.
    pub write_frames: bool,
}

impl Default for PropagateStage {
    fn default() -> Self {
        let b = BackendSpec::default();
        Self {
            backend: b.backend,
            noise: b.noise,
            weights: b.weights,
            source: SliceSource::GroundTruth,
            counts: vec![1, 2, 3],
            positions: vec![SeedPosition::Beginning, SeedPosition::Middle, SeedPosition::End],
            write_frames: false,
        }
    }
}

impl PropagateStage {
    pub fn backend_spec(&self) -> BackendSpec {
        BackendSpec {
            backend: self.backend,
            noise: self.noise,
            weights: self.weights.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted config key to the list of values it takes.
    pub axes: toml::Table,
    /// Rows of jointly varied keys; crossed with the axes they do not name.
    pub pairs: Vec<toml::Table>,
    /// TOML file with a `pairs` array, merged with `pairs`.
    pub pairing_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub stages: Vec<StageName>,
    /// Master seed; repeat `r` runs with `seed + r`.
    pub seed: u64,
    pub repeat: usize,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Pre-trained checkpoint to fine-tune from when no pretrain stage runs.
    pub checkpoint: Option<PathBuf>,
    pub refine: RefineStage,
    pub propagate: PropagateStage,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            name: "experiment".into(),
            stages: vec![StageName::Pretrain, StageName::Finetune, StageName::Evaluate],
            seed: 0,
            repeat: 1,
            output: None,
            data: DataConfig::default(),
            model: EncoderConfig {
                stage_widths: vec![8, 16, 32, 64],
                downsamples: 3,
                ..EncoderConfig::default()
            },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            checkpoint: None,
            refine: RefineStage::default(),
            propagate: PropagateStage::default(),
            sweep: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid experiment config:\n  {}", .0.join("\n  "))]
pub struct SchemaErrors(pub Vec<String>);

const TOP_KEYS: &[&str] = &[
    "version", "name", "stages", "seed", "repeat", "output", "data", "model", "pretrain",
    "finetune", "checkpoint", "refine", "propagate", "sweep",
];

fn section<T: serde::de::DeserializeOwned>(root: &toml::Table, key: &str, errors: &mut Vec<String>) {
    if let Some(v) = root.get(key) {
        if let Err(e) = v.clone().try_into::<T>() {
            errors.push(format!("{key}: {}", e.message().trim()));
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates, reporting every problem found rather than the
    /// first.
    pub fn from_toml_str(text: &str) -> Result<Self, SchemaErrors> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SchemaErrors(vec![e.message().trim().to_string()]))?;
        let mut errors = Vec::new();
        for k in root.keys() {
            if !TOP_KEYS.contains(&k.as_str()) {
                errors.push(format!("{k}: unknown key"));
            }
        }
        if let Some(Value::String(s)) = root.get("pretrain").and_then(|p| p.get("strategy")) {
            if s.parse::<Strategy>().is_err() {
                errors.push(format!("pretrain.strategy: unknown strategy {s:?}, expected S, O or M"));
            }
        }
        section::<DataConfig>(&root, "data", &mut errors);
        section::<EncoderConfig>(&root, "model", &mut errors);
        if !errors.iter().any(|e| e.starts_with("pretrain.strategy")) {
            section::<PretrainConfig>(&root, "pretrain", &mut errors);
        }
        section::<FinetuneConfig>(&root, "finetune", &mut errors);
        section::<RefineStage>(&root, "refine", &mut errors);
        section::<PropagateStage>(&root, "propagate", &mut errors);
        section::<SweepConfig>(&root, "sweep", &mut errors);
        if !errors.is_empty() {
            return Err(SchemaErrors(errors));
        }
        let cfg: Self = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| SchemaErrors(vec![e.message().trim().to_string()]))?;
        let semantic = cfg.semantic_errors();
        if semantic.is_empty() {
            Ok(cfg)
        } else {
            Err(SchemaErrors(semantic))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SchemaErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SchemaErrors(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml_str(&text)
    }

    fn semantic_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.version != SCHEMA_VERSION {
            e.push(format!("version: unsupported schema version {}, expected {SCHEMA_VERSION}", self.version));
        }
        if self.repeat == 0 {
            e.push("repeat: must be >= 1".into());
        }
        let mut sorted = self.stages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.stages {
            e.push("stages: must be distinct and in pipeline order (pretrain, finetune, evaluate, refine, propagate)".into());
        }
        let needs_model = self
            .stages
            .iter()
            .any(|s| matches!(s, StageName::Evaluate | StageName::Refine));
        if needs_model && !self.stages.contains(&StageName::Finetune) {
            e.push("stages: evaluate and refine need a finetune stage".into());
        }
        if let Err(err) = self.model.validate() {
            e.push(format!("model: {err}"));
        }
        if let Err(err) = self.pretrain.validate() {
            e.push(format!("pretrain: {err}"));
        }
        if let Err(err) = self.finetune.validate() {
            e.push(format!("finetune: {err}"));
        }
        let d = &self.data;
        if d.source == DataSource::Nifti && d.root.is_none() {
            e.push("data.root: required for nifti data".into());
        }
        if d.source == DataSource::Phantom && d.split.iter().sum::<usize>() > d.phantoms {
            e.push(format!("data.split: {:?} needs more than {} phantoms", d.split, d.phantoms));
        }
        if !(d.slice_fraction > 0.0 && d.slice_fraction <= 1.0) {
            e.push("data.slice_fraction: must lie in (0, 1]".into());
        }
        if !(d.window_width > 0.0) {
            e.push("data.window_width: must be > 0".into());
        }
        let m = 1usize << self.model.downsamples;
        if !d.resolution.is_multiple_of(m) {
            e.push(format!("data.resolution: {} is not divisible by 2^{}", d.resolution, self.model.downsamples));
        }
        if self.propagate.counts.contains(&0) {
            e.push("propagate.counts: seed counts must be >= 1".into());
        }
        e
    }

    /// Canonical TOML of the fully resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with stage seeds derived from the master seed of repeat `r`.
    pub fn for_repeat(&self, r: usize) -> Self {
        let mut c = self.clone();
        c.seed = self.seed + r as u64;
        c.repeat = 1;
        c.pretrain.seed = crate::rng::derive_seed(c.seed, "pretrain");
        c.finetune.seed = crate::rng::derive_seed(c.seed, "finetune");
        c.refine.noise.seed = crate::rng::derive_seed(c.seed, "refine-noise");
        c.propagate.noise.seed = crate::rng::derive_seed(c.seed, "propagate-noise");
        c
    }
}

/// Sets a dotted key such as `pretrain.batch_size` inside a TOML table,
/// creating intermediate tables.
pub fn set_dotted(root: &mut toml::Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut t = root;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("intermediate key is a table");
    }
    t.insert(last.to_string(), value);
}

pub fn get_dotted<'a>(root: &'a toml::Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut v = root.get(parts.next()?)?;
    for p in parts {
        v = v.get(p)?;
    }
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_strategy_names_the_field() {
        let err = ExperimentConfig::from_toml_str("[pretrain]\nstrategy = \"Q\"\n").unwrap_err();
        assert!(err.0.iter().any(|e| e.starts_with("pretrain.strategy")), "{err}");
    }

    #[test]
    fn all_errors_are_listed() {
        let text = "bogus = 1\n[pretrain]\nstrategy = \"Q\"\n[finetune]\nlabel_fraction = \"x\"\n[model]\nwidth = 3\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert_eq!(err.0.len(), 4, "{err}");
    }

    #[test]
    fn semantic_checks() {
        let err = ExperimentConfig::from_toml_str("repeat = 0\nstages = [\"finetune\", \"pretrain\"]\n[data]\nresolution = 60\n").unwrap_err();
        assert_eq!(err.0.len(), 3, "{err}");
    }

    #[test]
    fn tau_follows_batch_size_unless_set() {
        let cfg = ExperimentConfig::from_toml_str("[pretrain]\nbatch_size = 10\n").unwrap();
        assert_eq!(cfg.pretrain.temperature(), 0.1);
        let cfg = ExperimentConfig::from_toml_str("[pretrain]\nbatch_size = 10\ntau = 0.5\n").unwrap();
        assert_eq!(cfg.pretrain.temperature(), 0.5);
    }

    #[test]
    fn dotted_keys() {
        let mut t = toml::Table::new();
        set_dotted(&mut t, "pretrain.batch_size", Value::Integer(30));
        assert_eq!(get_dotted(&t, "pretrain.batch_size"), Some(&Value::Integer(30)));
    }

    #[test]
    fn repeats_vary_master_seed() {
        let cfg = ExperimentConfig::default();
        let (a, b) = (cfg.for_repeat(0), cfg.for_repeat(1));
        assert_ne!(a.pretrain.seed, b.pretrain.seed);
        assert_eq!(a.finetune.label_seed, b.finetune.label_seed);
        assert_eq!(a.repeat, 1);
        assert_eq!(a.for_repeat(0).pretrain.seed, cfg.for_repeat(0).pretrain.seed);
    }
}
