//! The single TOML file that drives every stage.
//!
//! ```toml
//! [model]
//! inspected = "model.json"
//! # feature_source = "robust.json"   # defaults to `inspected`
//!
//! [dataset]
//! root = "data"
//! split = "train"
//!
//! [study]
//! n_extreme = 50
//! # classes = [0, 3]                 # skips the accuracy-based selection
//!
//! [selection]
//! top_features = 5
//! k = 65
//!
//! [annotation]
//! endpoint = "127.0.0.1:8080"
//! quorum = 5
//! # token = "..."
//! # ledger = "published-ledger.json" # use a finished ledger instead of the journal
//!
//! [attack]
//! step_size = 40.0
//! iterations = 25
//! rho = 500.0
//!
//! [evaluation]
//! sigmas = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
//! base_sigma = 0.25
//! match_grid = [0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60]
//! seed = 0
//! clip = false
//!
//! [output]
//! root = "out"
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use probe_core::annotation::DEFAULT_QUORUM;
use probe_core::dataset::DEFAULT_SUBSET_SIZE;
use probe_core::evaluation::{DEFAULT_MATCH_GRID, DEFAULT_SEED, DEFAULT_SIGMA, DEFAULT_SWEEP};
use probe_core::saliency::AttackConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model whose reliance on spurious features is measured.
    pub inspected: PathBuf,
    /// Model whose features are ranked, visualized and annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_source: Option<PathBuf>,
}

impl ModelConfig {
    pub fn feature_source(&self) -> &Path {
        self.feature_source.as_deref().unwrap_or(&self.inspected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub n_extreme: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_extreme: 50,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub top_features: usize,
    pub k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            top_features: 5,
            k: DEFAULT_SUBSET_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    /// Address `probe serve` binds to.
    pub endpoint: String,
    pub quorum: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<PathBuf>,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            endpoint: "127.0.0.1:8080".into(),
            quorum: DEFAULT_QUORUM,
            token: None,
            ledger: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub sigmas: Vec<f64>,
    pub base_sigma: f64,
    pub match_grid: Vec<f64>,
    pub seed: u64,
    pub clip: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            sigmas: DEFAULT_SWEEP.to_vec(),
            base_sigma: DEFAULT_SIGMA,
            match_grid: DEFAULT_MATCH_GRID.to_vec(),
            seed: DEFAULT_SEED,
            clip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub root: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { root: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub annotation: AnnotationConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn anchor(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl PipelineConfig {
    /// Config with every default, for a model file and dataset root.
    pub fn new(inspected: impl Into<PathBuf>, dataset_root: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            model: ModelConfig {
                inspected: inspected.into(),
                feature_source: None,
            },
            dataset: DatasetConfig {
                root: dataset_root.into(),
                split: default_split(),
            },
            study: StudyConfig::default(),
            selection: SelectionConfig::default(),
            annotation: AnnotationConfig::default(),
            attack: AttackConfig::default(),
            evaluation: EvaluationConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parses `text`, resolving relative paths against `base`, and validates.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        anchor(base, &mut config.model.inspected);
        if let Some(p) = config.model.feature_source.as_mut() {
            anchor(base, p);
        }
        anchor(base, &mut config.dataset.root);
        if let Some(p) = config.annotation.ledger.as_mut() {
            anchor(base, p);
        }
        anchor(base, &mut config.output.root);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let mut paths = vec![("model.inspected", self.model.inspected.as_path())];
        paths.push(("model.feature_source", self.model.feature_source()));
        paths.push(("dataset.root", self.dataset.root.as_path()));
        if let Some(p) = &self.annotation.ledger {
            paths.push(("annotation.ledger", p));
        }
        for (key, path) in paths {
            if !path.exists() {
                return bad(format!("{key}: {} does not exist", path.display()));
            }
        }
        if self.selection.top_features == 0 || self.selection.k == 0 {
            return bad("selection.top_features and selection.k must be positive".into());
        }
        if self.annotation.quorum == 0 {
            return bad("annotation.quorum must be positive".into());
        }
        if self.evaluation.sigmas.is_empty() {
            return bad("evaluation.sigmas is empty".into());
        }
        for &s in self.evaluation.sigmas.iter().chain(&self.evaluation.match_grid).chain([&self.evaluation.base_sigma]) {
            if !(s.is_finite() && s >= 0.0) {
                return bad(format!("sigma {s} must be finite and >= 0"));
            }
        }
        if !(self.attack.step_size > 0.0 && self.attack.rho >= 0.0) {
            return bad("attack.step_size must be positive and attack.rho non-negative".into());
        }
        Ok(())
    }
}
