//! The seven stages, their on-disk artifacts and the fingerprints that make
//! reruns skip when nothing changed.
//!
//! ```text
//! <stage root>/
//!   extract/      cache/<model id>/, accuracy.json
//!   select/       study_classes.json, importance.tsv, selection.json
//!   hits/         hits.json, unannotatable.json, assets/
//!   annotations/  responses.jsonl   (written by `probe serve`, not a stage)
//!   subsets/      subsets.json, ledger.json, validation_hits.json, masks/, assets/
//!   dataset/      manifest.json, images/, masks/, stats.json
//!   evaluate/     report.json, l2_match.json
//!   report/       summary.md, drops.svg, class_accuracy.svg
//! ```
//!
//! Every stage directory holds a `stage.json` with a hash of the stage's
//! inputs (its config section, the external files it reads and the
//! `stage.json` of each upstream stage) and a hash of the files it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::{info, warn};
use probe_core::annotation::{
    build_discovery_hit, build_validation_hit, AnnotationLedger, AssetWriter, ClassMetadata, Hit, HitStore,
    LedgerExport, Verdict, WorkerResponse,
};
use probe_core::cache::{ActivationCache, CacheRecord};
use probe_core::dataset::{
    build_feature_subset, class_unions, dataset_stats, export_dataset, import_dataset, mask_ref, masked_samples,
    Dataset, ExportOptions, FeatureSubset, MaskStore, MemoryMasks, SubsetMember, MANIFEST_FILE,
};
use probe_core::evaluation::{
    class_accuracy_plot_svg, corrupted_accuracy, drop_plot_svg, match_l2_sigma, mean_l2_perturbation, sigma_sweep,
    subset_masks, union_masks, ClassInput, CorruptionSpec, EvaluationReport, FeatureInput, SweepConfig,
};
use probe_core::imageio::sha256_hex;
use probe_core::model::ModelBundle;
use probe_core::selection::{
    grouping_accuracies, importance_tables, importance_to_tsv, select_study_classes, top_features, AccuracyTable,
    Grouping, StudyClassSet,
};
use probe_core::synthetic::load_tiny_model;
use probe_core::{Error, ImageSource};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::config::PipelineConfig;
use crate::error::{InStage, PipelineError, Result};

pub const STAGE_FILE: &str = "stage.json";
const EXTRACT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Extract,
    Select,
    Hits,
    Subsets,
    Dataset,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Extract,
        Stage::Select,
        Stage::Hits,
        Stage::Subsets,
        Stage::Dataset,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Select => "select",
            Stage::Hits => "hits",
            Stage::Subsets => "subsets",
            Stage::Dataset => "dataset",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Extract => &[],
            Stage::Select => &[Stage::Extract],
            Stage::Hits => &[Stage::Extract, Stage::Select],
            Stage::Subsets => &[Stage::Extract, Stage::Select, Stage::Hits],
            Stage::Dataset => &[Stage::Hits, Stage::Subsets],
            Stage::Evaluate => &[Stage::Dataset],
            Stage::Report => &[Stage::Evaluate],
        }
    }
}

/// Contents of `<stage>/stage.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: String,
    pub outputs: String,
    /// Relative path -> sha256 of every file the stage wrote.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub status: StageStatus,
    pub dir: PathBuf,
    pub files: usize,
}

/// Per-class accuracy of one model on the configured split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub model: String,
    pub by_label: BTreeMap<usize, f64>,
    pub by_prediction: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyFile {
    pub split: String,
    pub images: usize,
    pub feature_source: String,
    pub models: Vec<ModelAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class_index: usize,
    pub features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub classes: Vec<ClassSelection>,
    /// Study classes the feature-source model never predicts.
    pub skipped: Vec<usize>,
}

/// The `(class, feature)` pairs that get a discovery HIT, in queue order.
pub fn discovery_plan(selection: &Selection) -> Vec<(usize, usize)> {
    selection
        .classes
        .iter()
        .flat_map(|c| c.features.iter().map(move |&f| (c.class_index, f)))
        .collect()
}

/// A `(class, feature)` pair that could not be turned into a HIT or subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub class_index: usize,
    pub feature_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetsFile {
    pub k: usize,
    pub subsets: Vec<FeatureSubset>,
    pub skipped: Vec<SkippedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Outcome {
    Matched {
        sigma: f64,
        low_mean: f64,
        high_mean: f64,
        /// Accuracy on the low-norm union at the matched σ.
        low_accuracy: f64,
        /// Accuracy on the high-norm union at the base σ.
        high_accuracy: f64,
    },
    Unmatched {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassL2Match {
    pub class_index: usize,
    pub base_sigma: f64,
    /// Union whose masks give the smaller perturbation at the base σ.
    pub low_norm_union: String,
    pub outcome: L2Outcome,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("artifact types serialize");
    text.push('\n');
    text
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| PipelineError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value).as_bytes())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PipelineError::io(path, e))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Relative path -> sha256 of every file under `dir` except `stage.json`.
fn tree_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::io(dir, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under its root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if key == STAGE_FILE {
            continue;
        }
        files.insert(key, file_hash(entry.path())?);
    }
    Ok(files)
}

fn digest_of_files(files: &BTreeMap<String, String>) -> String {
    sha256_hex(to_json(files).as_bytes())
}

pub struct Pipeline {
    config: PipelineConfig,
    root: PathBuf,
}

impl Pipeline {
    /// Stages live under `stage_root`, or under the config's output root.
    pub fn new(config: PipelineConfig, stage_root: Option<PathBuf>) -> Self {
        let root = stage_root.unwrap_or_else(|| config.output.root.clone());
        Pipeline { config, root }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    /// JSON-lines journal of every accepted worker response.
    pub fn journal_path(&self) -> PathBuf {
        self.root.join("annotations").join("responses.jsonl")
    }

    pub fn stage_record(&self, stage: Stage) -> Option<StageRecord> {
        let text = std::fs::read_to_string(self.stage_dir(stage).join(STAGE_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Reads an artifact of `owner` on behalf of `reader`.
    pub fn artifact<T: DeserializeOwned>(&self, reader: Stage, owner: Stage, name: &str) -> Result<T> {
        let path = self.stage_dir(owner).join(name);
        let missing = || PipelineError::MissingUpstream {
            stage: reader.name(),
            run_first: owner.name().into(),
            path: path.clone(),
        };
        if self.stage_record(owner).is_none() {
            return Err(missing());
        }
        let text = std::fs::read_to_string(&path).map_err(|_| missing())?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Core {
            stage: reader.name(),
            source: e.into(),
        })
    }

    fn model(&self, stage: Stage, path: &Path) -> Result<ModelBundle> {
        load_tiny_model(path).in_stage(stage.name())
    }

    fn feature_model(&self, stage: Stage) -> Result<ModelBundle> {
        self.model(stage, self.config.model.feature_source())
    }

    fn dataset(&self, stage: Stage) -> Result<Dataset> {
        Dataset::open(&self.config.dataset.root).in_stage(stage.name())
    }

    fn records(&self, stage: Stage, model: &ModelBundle) -> Result<Vec<CacheRecord>> {
        let dir = self.stage_dir(Stage::Extract).join("cache");
        if self.stage_record(Stage::Extract).is_none() || !dir.join(&model.identifier).exists() {
            return Err(PipelineError::MissingUpstream {
                stage: stage.name(),
                run_first: Stage::Extract.name().into(),
                path: dir,
            });
        }
        ActivationCache::open(&dir, &model.identifier, model.feature_count())
            .and_then(|cache| cache.records())
            .in_stage(stage.name())
    }

    fn discovery_hits(&self, stage: Stage) -> Result<Vec<Hit>> {
        self.artifact(stage, Stage::Hits, "hits.json")
    }

    /// Validation HITs written by the subsets stage, if it has run.
    fn validation_hits(&self) -> Vec<Hit> {
        let path = self.stage_dir(Stage::Subsets).join("validation_hits.json");
        std::fs::read_to_string(path)
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default()
    }

    /// The verdicts so far: the configured ledger file, or a replay of the
    /// response journal against the queued HITs. Discovery-only ledgers drop
    /// the validation outcomes.
    pub fn ledger(&self, stage: Stage, with_validation: bool) -> Result<AnnotationLedger> {
        let ledger = match &self.config.annotation.ledger {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
                AnnotationLedger::from_json(&text).in_stage(stage.name())?
            }
            None => {
                let mut hits = self.discovery_hits(stage)?;
                if with_validation {
                    hits.extend(self.validation_hits());
                }
                self.replay(stage, hits)?
            }
        };
        if ledger.is_empty() {
            return Err(PipelineError::MissingUpstream {
                stage: stage.name(),
                run_first: "serve".into(),
                path: self.journal_path(),
            });
        }
        if with_validation {
            return Ok(ledger);
        }
        let mut discovery = AnnotationLedger::new();
        for r in ledger.records() {
            discovery.record_verdict(r.class, r.feature, r.verdict, r.votes.clone());
        }
        Ok(discovery)
    }

    fn replay(&self, stage: Stage, hits: Vec<Hit>) -> Result<AnnotationLedger> {
        let store = HitStore::new(self.config.annotation.quorum).in_stage(stage.name())?;
        for hit in hits {
            store.add_hit(hit).in_stage(stage.name())?;
        }
        let path = self.journal_path();
        if !path.exists() {
            return Ok(store.ledger());
        }
        let file = File::open(&path).map_err(|e| PipelineError::io(&path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| PipelineError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let response: WorkerResponse = serde_json::from_str(&line)
                .map_err(|e| PipelineError::Core { stage: stage.name(), source: e.into() })?;
            let id = response.hit_id.clone();
            match store.submit(&id, response) {
                Ok(_) => {}
                // responses to HITs of another queue (validation HITs when only
                // discovery verdicts are wanted)
                Err(Error::UnknownHit(_)) => {}
                Err(e) => return Err(PipelineError::Core { stage: stage.name(), source: e }),
            }
        }
        Ok(store.ledger())
    }

    /// Hash of everything the stage reads.
    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let mut text = format!("{}\n", stage.name());
        for &up in stage.upstream() {
            let path = self.stage_dir(up).join(STAGE_FILE);
            if !path.exists() {
                return Err(PipelineError::MissingUpstream {
                    stage: stage.name(),
                    run_first: up.name().into(),
                    path,
                });
            }
            let _ = writeln!(text, "{} {}", up.name(), file_hash(&path)?);
        }
        let c = &self.config;
        let section = match stage {
            Stage::Extract => serde_json::json!({
                "inspected": file_hash(&c.model.inspected)?,
                "feature_source": file_hash(c.model.feature_source())?,
                "dataset": file_hash(&c.dataset.root.join(MANIFEST_FILE))?,
                "split": c.dataset.split,
            }),
            Stage::Select => serde_json::json!({
                "study": c.study,
                "top_features": c.selection.top_features,
            }),
            Stage::Hits => serde_json::json!({ "attack": c.attack }),
            Stage::Subsets => serde_json::json!({
                "k": c.selection.k,
                "ledger": self.ledger(stage, false)?.export(),
            }),
            Stage::Dataset => serde_json::json!({ "ledger": self.ledger(stage, true)?.export() }),
            Stage::Evaluate => serde_json::json!({ "evaluation": c.evaluation }),
            Stage::Report => serde_json::json!({ "base_sigma": c.evaluation.base_sigma }),
        };
        text.push_str(&to_json(&section));
        Ok(sha256_hex(text.as_bytes()))
    }

    /// True when the stage's recorded inputs and outputs match what is on disk.
    pub fn is_up_to_date(&self, stage: Stage) -> Result<bool> {
        let Some(record) = self.stage_record(stage) else {
            return Ok(false);
        };
        Ok(record.inputs == self.fingerprint(stage)?
            && record.outputs == digest_of_files(&tree_hashes(&self.stage_dir(stage))?))
    }

    /// Runs one stage unless it is up to date (or `force` is set). Upstream
    /// stages must have run and be up to date themselves.
    pub fn run(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        for &up in stage.upstream() {
            if self.stage_record(up).is_none() {
                return Err(PipelineError::MissingUpstream {
                    stage: stage.name(),
                    run_first: up.name().into(),
                    path: self.stage_dir(up).join(STAGE_FILE),
                });
            }
            let fresh = match self.is_up_to_date(up) {
                Ok(fresh) => fresh,
                Err(PipelineError::MissingUpstream { .. }) => false,
                Err(e) => return Err(e),
            };
            if !fresh {
                return Err(PipelineError::StaleUpstream {
                    stage: stage.name(),
                    run_first: up.name().into(),
                });
            }
        }
        let inputs = self.fingerprint(stage)?;
        let dir = self.stage_dir(stage);
        if !force && self.is_up_to_date(stage)? {
            info!("{}: up to date", stage.name());
            let files = self.stage_record(stage).map_or(0, |r| r.files.len());
            return Ok(StageOutcome {
                stage: stage.name().into(),
                status: StageStatus::UpToDate,
                dir,
                files,
            });
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        info!("{}: running", stage.name());
        match stage {
            Stage::Extract => self.extract(&dir)?,
            Stage::Select => self.select(&dir)?,
            Stage::Hits => self.hits(&dir)?,
            Stage::Subsets => self.subsets(&dir)?,
            Stage::Dataset => self.build_dataset(&dir)?,
            Stage::Evaluate => self.evaluate(&dir)?,
            Stage::Report => self.report(&dir)?,
        }
        let files = tree_hashes(&dir)?;
        let record = StageRecord {
            stage: stage.name().into(),
            inputs,
            outputs: digest_of_files(&files),
            files,
        };
        write_json(&dir.join(STAGE_FILE), &record)?;
        Ok(StageOutcome {
            stage: stage.name().into(),
            status: StageStatus::Ran,
            dir,
            files: record.files.len(),
        })
    }

    fn extract(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Extract;
        let dataset = self.dataset(stage)?;
        let split = &self.config.dataset.split;
        let labels = dataset.labels(Some(split));
        if labels.is_empty() {
            return Err(PipelineError::Config(format!("dataset split `{split}` has no images")));
        }
        let source = self.feature_model(stage)?;
        let inspected = if self.config.model.inspected.as_path() == self.config.model.feature_source() {
            None
        } else {
            let model = self.model(stage, &self.config.model.inspected)?;
            if model.identifier == source.identifier {
                return Err(PipelineError::Config(format!(
                    "inspected and feature-source models are different files with the same identifier `{}`",
                    model.identifier
                )));
            }
            Some(model)
        };
        let cache = ActivationCache::open(&dir.join("cache"), &source.identifier, source.feature_count())
            .in_stage(stage.name())?;
        let ids: Vec<&String> = labels.keys().collect();
        let mut source_predictions = Vec::with_capacity(ids.len());
        let mut inspected_predictions = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(EXTRACT_BATCH) {
            let images = chunk
                .iter()
                .map(|id| Ok(((*id).clone(), dataset.load(id)?)))
                .collect::<probe_core::Result<Vec<_>>>()
                .in_stage(stage.name())?;
            let batch = source.extract_activations(&images).in_stage(stage.name())?;
            for (n, id) in batch.image_ids.iter().enumerate() {
                let predicted = batch.predicted[n];
                cache
                    .insert(&CacheRecord {
                        image_id: id.clone(),
                        predicted,
                        predicted_logit: batch.logits[[n, predicted]] as f32,
                        vector: batch.feature_vectors.row(n).iter().map(|&v| v as f32).collect(),
                    })
                    .in_stage(stage.name())?;
            }
            source_predictions.extend(batch.predicted);
            if let Some(model) = &inspected {
                inspected_predictions.extend(model.extract_activations(&images).in_stage(stage.name())?.predicted);
            }
        }
        let truth: Vec<usize> = labels.values().copied().collect();
        let mut models = Vec::new();
        for (model, predictions) in std::iter::once((&source, &source_predictions))
            .chain(inspected.as_ref().map(|m| (m, &inspected_predictions)))
        {
            let (by_label, by_prediction) =
                grouping_accuracies(&truth, predictions, model.num_classes()).in_stage(stage.name())?;
            models.push(ModelAccuracy {
                model: model.identifier.clone(),
                by_label,
                by_prediction,
            });
        }
        write_json(
            &dir.join("accuracy.json"),
            &AccuracyFile {
                split: split.clone(),
                images: truth.len(),
                feature_source: source.identifier.clone(),
                models,
            },
        )
    }

    fn select(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Select;
        let model = self.feature_model(stage)?;
        let records = self.records(stage, &model)?;
        let accuracy: AccuracyFile = self.artifact(stage, Stage::Extract, "accuracy.json")?;
        let study = match &self.config.study.classes {
            Some(classes) => {
                if let Some(&bad) = classes.iter().find(|&&c| c >= model.num_classes()) {
                    return Err(PipelineError::Config(format!(
                        "study.classes: class {bad} out of range for {} classes",
                        model.num_classes()
                    )));
                }
                StudyClassSet {
                    classes: classes.iter().copied().collect(),
                    provenance: BTreeMap::new(),
                    truncated: Vec::new(),
                }
            }
            None => {
                let mut table = AccuracyTable::new();
                for m in &accuracy.models {
                    table.insert((m.model.clone(), Grouping::Label), m.by_label.clone());
                    table.insert((m.model.clone(), Grouping::Prediction), m.by_prediction.clone());
                }
                select_study_classes(&table, self.config.study.n_extreme).in_stage(stage.name())?
            }
        };
        let (tables, skipped) =
            importance_tables(&model, &records, study.classes.iter().copied()).in_stage(stage.name())?;
        let selection = Selection {
            classes: tables
                .iter()
                .map(|t| ClassSelection {
                    class_index: t.class_index,
                    features: top_features(t, self.config.selection.top_features),
                })
                .collect(),
            skipped,
        };
        write_json(&dir.join("study_classes.json"), &study)?;
        write_file(&dir.join("importance.tsv"), importance_to_tsv(&tables).as_bytes())?;
        write_json(&dir.join("selection.json"), &selection)
    }

    fn hits(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Hits;
        let model = self.feature_model(stage)?;
        let records = self.records(stage, &model)?;
        let selection: Selection = self.artifact(stage, Stage::Select, "selection.json")?;
        let dataset = self.dataset(stage)?;
        self.config.attack.validate().in_stage(stage.name())?;
        let assets = AssetWriter::new(dir.join("assets"));
        let mut hits = Vec::new();
        let mut skipped = Vec::new();
        for (class, feature) in discovery_plan(&selection) {
            let metadata = class_panel(&dataset, class);
            match build_discovery_hit(class, feature, &records, &model, &dataset, &metadata, &self.config.attack, &assets)
            {
                Ok(hit) => hits.push(Hit::Discovery(hit)),
                Err(e @ Error::NotEnoughImages { .. }) => {
                    warn!("no discovery HIT for class {class}, feature {feature}: {e}");
                    skipped.push(SkippedPair {
                        class_index: class,
                        feature_index: feature,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(PipelineError::Core { stage: stage.name(), source: e }),
            }
        }
        info!("{} discovery HITs queued", hits.len());
        write_json(&dir.join("hits.json"), &hits)?;
        write_json(&dir.join("unannotatable.json"), &skipped)
    }

    fn subsets(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Subsets;
        let ledger = self.ledger(stage, false)?;
        let model = self.feature_model(stage)?;
        let records = self.records(stage, &model)?;
        let selection: Selection = self.artifact(stage, Stage::Select, "selection.json")?;
        let dataset = self.dataset(stage)?;
        let labels = dataset.labels(Some(&self.config.dataset.split));
        let masks = MaskStore::new(dir);
        let k = self.config.selection.k;
        let mut subsets = Vec::new();
        let mut skipped = Vec::new();
        for (class, feature) in discovery_plan(&selection) {
            let verdict = ledger.get(class, feature).map(|r| r.verdict);
            if !matches!(verdict, Some(Verdict::Causal | Verdict::Spurious)) {
                skipped.push(SkippedPair {
                    class_index: class,
                    feature_index: feature,
                    reason: match verdict {
                        Some(_) => "undecided".into(),
                        None => "not annotated".into(),
                    },
                });
                continue;
            }
            match build_feature_subset(class, feature, k, &labels, &records, &model, &dataset, &masks) {
                Ok(subset) => subsets.push(subset),
                Err(e @ Error::EmptySubset(_)) => skipped.push(SkippedPair {
                    class_index: class,
                    feature_index: feature,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(PipelineError::Core { stage: stage.name(), source: e }),
            }
        }
        let assets = AssetWriter::new(dir.join("assets"));
        let mut validation = Vec::new();
        for subset in &subsets {
            if ledger.get(subset.class_index, subset.feature_index).map(|r| r.verdict) != Some(Verdict::Spurious) {
                continue;
            }
            match build_validation_hit(subset, &dataset, &masks, &assets) {
                Ok(hit) => validation.push(Hit::Validation(hit)),
                Err(e @ Error::NotEnoughImages { .. }) => {
                    warn!("no validation HIT for class {}, feature {}: {e}", subset.class_index, subset.feature_index)
                }
                Err(e) => return Err(PipelineError::Core { stage: stage.name(), source: e }),
            }
        }
        info!("{} subsets built, {} validation HITs queued", subsets.len(), validation.len());
        write_json(&dir.join("subsets.json"), &SubsetsFile { k, subsets, skipped })?;
        write_json(&dir.join("validation_hits.json"), &validation)?;
        write_json(&dir.join("ledger.json"), &ledger.export())
    }

    fn build_dataset(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Dataset;
        let ledger = self.ledger(stage, true)?;
        let file: SubsetsFile = self.artifact(stage, Stage::Subsets, "subsets.json")?;
        let masks = MaskStore::new(self.stage_dir(Stage::Subsets));
        let source = self.dataset(stage)?;
        let samples = masked_samples(&ledger, &file.subsets, &masks, &|id| Ok(source.sample(id)?.image.clone()))
            .in_stage(stage.name())?;
        let options = ExportOptions {
            copy_images: true,
            image_base: Some(source.root().to_path_buf()),
        };
        export_dataset(&samples, dir, Some(&ledger), &source.manifest().classes, &options).in_stage(stage.name())?;
        write_json(&dir.join("stats.json"), &dataset_stats(&samples, &ledger))
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Evaluate;
        let root = self.stage_dir(Stage::Dataset);
        let imported = import_dataset(&root).in_stage(stage.name())?;
        for e in &imported.errors {
            warn!("skipping sample {}: {}", e.image_id, e.message);
        }
        let ledger = AnnotationLedger::import(imported.manifest.ledger.clone().unwrap_or(LedgerExport {
            records: Vec::new(),
        }))
        .in_stage(stage.name())?;
        let (subsets, masks) = subsets_from_samples(&imported.samples);
        let mut inputs = Vec::new();
        for class in ledger.classes() {
            let (spurious, causal) = class_unions(class, &ledger, &subsets, &masks).in_stage(stage.name())?;
            let features = subsets
                .iter()
                .filter(|s| s.class_index == class)
                .filter_map(|s| {
                    let verdict = ledger.get(class, s.feature_index)?.verdict;
                    Some(subset_masks(s, &masks).map(|items| FeatureInput {
                        feature_index: s.feature_index,
                        verdict,
                        items,
                    }))
                })
                .collect::<probe_core::Result<Vec<_>>>()
                .in_stage(stage.name())?;
            inputs.push(ClassInput {
                class_index: class,
                spurious,
                causal,
                features,
            });
        }
        let model = self.model(stage, &self.config.model.inspected)?;
        let images = Dataset::open(&root).in_stage(stage.name())?;
        let ev = &self.config.evaluation;
        let sweep = SweepConfig {
            sigmas: ev.sigmas.clone(),
            seed: ev.seed,
            clip: ev.clip,
        };
        let report = sigma_sweep(&model, &images, &inputs, &sweep).in_stage(stage.name())?;
        write_file(&dir.join("report.json"), report.to_json().in_stage(stage.name())?.as_bytes())?;
        let matches = inputs
            .iter()
            .filter(|c| !c.spurious.is_empty() && !c.causal.is_empty())
            .map(|c| self.l2_match(&model, &images, c))
            .collect::<probe_core::Result<Vec<_>>>()
            .in_stage(stage.name())?;
        write_json(&dir.join("l2_match.json"), &matches)
    }

    fn l2_match(&self, model: &ModelBundle, images: &dyn ImageSource, class: &ClassInput) -> probe_core::Result<ClassL2Match> {
        let ev = &self.config.evaluation;
        let channels = model.channels;
        let spurious = union_masks(&class.spurious);
        let causal = union_masks(&class.causal);
        let s = mean_l2_perturbation(&spurious, ev.base_sigma, ev.seed, channels)?;
        let c = mean_l2_perturbation(&causal, ev.base_sigma, ev.seed, channels)?;
        let (low_name, low, high) = if c <= s {
            ("causal", &causal, &spurious)
        } else {
            ("spurious", &spurious, &causal)
        };
        let spec = |sigma| CorruptionSpec {
            sigma,
            seed: ev.seed,
            clip: ev.clip,
        };
        let outcome = match match_l2_sigma(low, high, ev.base_sigma, &ev.match_grid, ev.seed, channels) {
            Ok(m) => L2Outcome::Matched {
                sigma: m.sigma,
                low_mean: m.low_mean,
                high_mean: m.high_mean,
                low_accuracy: corrupted_accuracy(model, images, low, class.class_index, &spec(m.sigma))?,
                high_accuracy: corrupted_accuracy(model, images, high, class.class_index, &spec(ev.base_sigma))?,
            },
            Err(e @ Error::Unmatched { .. }) => L2Outcome::Unmatched { message: e.to_string() },
            Err(e) => return Err(e),
        };
        Ok(ClassL2Match {
            class_index: class.class_index,
            base_sigma: ev.base_sigma,
            low_norm_union: low_name.into(),
            outcome,
        })
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let stage = Stage::Report;
        let report: EvaluationReport = self.artifact(stage, Stage::Evaluate, "report.json")?;
        let matches: Vec<ClassL2Match> = self.artifact(stage, Stage::Evaluate, "l2_match.json")?;
        write_file(
            &dir.join("summary.md"),
            summary_markdown(&report, &matches, self.config.evaluation.base_sigma).as_bytes(),
        )?;
        write_file(&dir.join("drops.svg"), drop_plot_svg(&report).as_bytes())?;
        write_file(&dir.join("class_accuracy.svg"), class_accuracy_plot_svg(&report).as_bytes())
    }
}

fn class_panel(dataset: &Dataset, class: usize) -> ClassMetadata {
    dataset
        .manifest()
        .classes
        .iter()
        .find(|c| c.class_index == class)
        .cloned()
        .unwrap_or_else(|| ClassMetadata {
            class_index: class,
            object_names: vec![format!("class {class}")],
            supercategory: String::new(),
            definition: String::new(),
            wiki_links: Vec::new(),
            validation_image_ids: Vec::new(),
        })
}

/// Rebuilds the feature subsets of an exported dataset: D(i, j) is every
/// sample labelled `i` carrying a mask for feature `j`.
pub fn subsets_from_samples(samples: &[probe_core::dataset::MaskedSample]) -> (Vec<FeatureSubset>, MemoryMasks) {
    let masks = MemoryMasks::new();
    let mut members: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for s in samples {
        for (feature, mask) in s.causal_masks.iter().chain(&s.spurious_masks) {
            masks.insert(*feature, &s.image_id, mask.clone());
            members.entry((s.label, *feature)).or_default().push(s.image_id.clone());
        }
    }
    let subsets = members
        .into_iter()
        .map(|((class, feature), mut ids)| {
            ids.sort();
            FeatureSubset {
                class_index: class,
                feature_index: feature,
                k: ids.len(),
                members: ids
                    .into_iter()
                    .map(|id| SubsetMember {
                        mask_ref: mask_ref(feature, &id),
                        image_id: id,
                        activation: 0.0,
                    })
                    .collect(),
                truncated: false,
            }
        })
        .collect();
    (subsets, masks)
}

fn percent(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn opt_percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), percent)
}

/// Human-readable summary of an evaluation, in percentage points.
pub fn summary_markdown(report: &EvaluationReport, matches: &[ClassL2Match], base_sigma: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation of `{}`\n", report.model_id);
    let sigmas: Vec<String> = report.sigmas.iter().map(|s| format!("{s}")).collect();
    let _ = writeln!(out, "Noise seed {}, clipping {}, σ grid {}.\n", report.seed, report.clip, sigmas.join(", "));
    let _ = writeln!(out, "## Mean accuracy drop over classes (points)\n");
    let _ = writeln!(out, "| σ | spurious regions corrupted | causal regions corrupted |");
    let _ = writeln!(out, "|---|---|---|");
    for p in &report.aggregate {
        let _ = writeln!(
            out,
            "| {} | {} | {} |",
            p.sigma,
            opt_percent(p.spurious_region_drop),
            opt_percent(p.causal_region_drop)
        );
    }
    let at = report.sigmas.iter().position(|&s| s == base_sigma);
    for class in &report.classes {
        let _ = writeln!(out, "\n## Class {}\n", class.class_index);
        let _ = writeln!(
            out,
            "DS: {} images (accuracy {}), DC: {} images (accuracy {}).\n",
            class.spurious_union_size,
            opt_percent(class.standard_accuracy_spurious),
            class.causal_union_size,
            opt_percent(class.standard_accuracy_causal)
        );
        match at {
            Some(i) => {
                let _ = writeln!(out, "| feature | verdict | subset size | accuracy | drop at σ = {base_sigma} |");
                let _ = writeln!(out, "|---|---|---|---|---|");
                for f in &class.features {
                    let _ = writeln!(
                        out,
                        "| {} | {:?} | {} | {} | {} |",
                        f.feature_index,
                        f.verdict,
                        f.subset_size,
                        percent(f.standard_accuracy),
                        percent(f.points[i].drop)
                    );
                }
            }
            None => {
                let _ = writeln!(out, "σ = {base_sigma} is not on the grid; see report.json for per-feature drops.");
            }
        }
    }
    if !report.skipped.is_empty() {
        let _ = writeln!(out, "\n## Skipped classes\n");
        for s in &report.skipped {
            let _ = writeln!(out, "- class {}: {}", s.class_index, s.reason);
        }
    }
    if !matches.is_empty() {
        let _ = writeln!(out, "\n## ℓ2-matched noise\n");
        for m in matches {
            match &m.outcome {
                L2Outcome::Matched {
                    sigma,
                    low_accuracy,
                    high_accuracy,
                    ..
                } => {
                    let _ = writeln!(
                        out,
                        "- class {}: {} union at σ = {sigma} matches the other at σ = {}; accuracies {} and {}",
                        m.class_index,
                        m.low_norm_union,
                        m.base_sigma,
                        percent(*low_accuracy),
                        percent(*high_accuracy)
                    );
                }
                L2Outcome::Unmatched { message } => {
                    let _ = writeln!(out, "- class {}: {message}", m.class_index);
                }
            }
        }
    }
    out
}
