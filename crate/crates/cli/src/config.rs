//! Run configuration: one TOML file, every section optional.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. `--seed` replaces the top-level seed and every
//! per-section seed. Section seeds left unset inherit the top-level seed; the
//! resolved values are written next to each command's outputs.

use std::path::{Path, PathBuf};

use csshap::dataset::Split;
use csshap::domains::DomainKind;
use csshap::model::{ModelConfig, ModelKind, TrainConfig};
use csshap::shapley::AttributionConfig;
use csshap::sim::{ClassSpec, DatasetSpec};
use csshap::WindowSpec;
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; `--out` overrides it.
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub ingest: IngestSection,
    pub window: WindowSpec,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub explain: ExplainSection,
    pub attribution: AttributionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            dataset: DatasetSection::default(),
            ingest: IngestSection::default(),
            window: WindowSpec::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            explain: ExplainSection::default(),
            attribution: AttributionConfig::default(),
        }
    }
}

/// The simulated three-class benchmark, with optional replacement classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub samples_per_class: usize,
    pub sample_length: usize,
    pub sample_rate_hz: f64,
    pub train_fraction: f64,
    pub random_onset: bool,
    pub seed: Option<u64>,
    pub classes: Option<Vec<ClassSpec>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let spec = DatasetSpec::simulation(300, 0);
        Self {
            samples_per_class: spec.samples_per_class,
            sample_length: spec.sample_length,
            sample_rate_hz: spec.sample_rate_hz,
            train_fraction: spec.train_fraction,
            random_onset: spec.random_onset,
            seed: None,
            classes: None,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::simulation(self.samples_per_class, self.seed.unwrap_or(0));
        spec.sample_length = self.sample_length;
        spec.sample_rate_hz = self.sample_rate_hz;
        spec.train_fraction = self.train_fraction;
        spec.random_onset = self.random_onset;
        if let Some(c) = &self.classes {
            spec.classes = c.clone();
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    Csv,
    #[value(name = "raw_f32")]
    RawF32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledFile {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub format: IngestFormat,
    pub segment_length: usize,
    pub sample_rate_hz: f64,
    /// CSV column holding the signal, 0-based.
    pub column: usize,
    /// Skip a non-numeric first CSV row.
    pub header: bool,
    /// Zero-mean, unit-variance scaling per segment.
    pub normalize: bool,
    pub train_fraction: f64,
    pub seed: Option<u64>,
    pub files: Vec<LabeledFile>,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            format: IngestFormat::Csv,
            segment_length: 2000,
            sample_rate_hz: 12_000.0,
            column: 0,
            header: true,
            normalize: true,
            train_fraction: 0.7,
            seed: None,
            files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// Four wide-kernel conv blocks.
    Cnn,
    /// The eight-block full-size network.
    ReferenceCnn,
    Mlp,
}

/// A preset plus optional layer overrides. Input length and class count come
/// from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    pub channels: Option<Vec<usize>>,
    pub kernels: Option<Vec<usize>>,
    pub pools: Option<Vec<usize>>,
    pub hidden: Option<Vec<usize>>,
    pub batch_norm: Option<bool>,
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Cnn,
            channels: None,
            kernels: None,
            pools: None,
            hidden: None,
            batch_norm: None,
            seed: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, input_length: usize, class_count: usize) -> CliResult<ModelConfig> {
        let seed = self.seed.unwrap_or(0);
        let mut cfg = match self.preset {
            ModelPreset::Cnn => ModelConfig::cnn(input_length, class_count, seed),
            ModelPreset::ReferenceCnn => ModelConfig::reference_cnn(input_length, class_count, seed),
            ModelPreset::Mlp => ModelConfig::mlp(input_length, class_count, seed),
        };
        if cfg.kind == ModelKind::Mlp && (self.channels.is_some() || self.kernels.is_some() || self.pools.is_some()) {
            return validation("model.channels, kernels and pools apply to CNN presets only");
        }
        if let Some(v) = &self.channels {
            cfg.channels = v.clone();
        }
        if let Some(v) = &self.kernels {
            cfg.kernels = v.clone();
        }
        if let Some(v) = &self.pools {
            cfg.pools = v.clone();
        }
        if let Some(v) = &self.hidden {
            cfg.hidden = v.clone();
        }
        if let Some(v) = self.batch_norm {
            cfg.batch_norm = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which samples to explain and in which domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub domains: Vec<DomainKind>,
    pub split: Split,
    /// Positions within the split.
    pub samples: Vec<usize>,
    /// Split the background is drawn from.
    pub background_split: Split,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            domains: vec![DomainKind::CyclicSpectral],
            split: Split::Test,
            samples: vec![0],
            background_split: Split::Train,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Validation(e.message().to_string()))?;
        let has_seed = |section: &str| table.get(section).and_then(|s| s.get("seed")).is_some();
        let (train_seed, attr_seed) = (has_seed("training"), has_seed("attribution"));
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(e.message().to_string()))?;
        if !train_seed {
            cfg.training.seed = cfg.seed;
        }
        if !attr_seed {
            cfg.attribution.seed = cfg.seed;
        }
        if !cfg.window.is_cola() {
            return validation(format!(
                "window {:?} {}/{} is not constant overlap-add and cannot be inverted",
                cfg.window.kind(),
                cfg.window.length(),
                cfg.window.hop()
            ));
        }
        Ok(cfg)
    }

    /// Fill unset section seeds from the top-level seed.
    pub fn resolve_seeds(&mut self, override_seed: Option<u64>) {
        if let Some(s) = override_seed {
            self.seed = s;
            self.dataset.seed = Some(s);
            self.ingest.seed = Some(s);
            self.model.seed = Some(s);
            self.training.seed = s;
            self.attribution.seed = s;
            return;
        }
        let s = self.seed;
        self.dataset.seed.get_or_insert(s);
        self.ingest.seed.get_or_insert(s);
        self.model.seed.get_or_insert(s);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }
}
