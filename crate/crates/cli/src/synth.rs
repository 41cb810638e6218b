//! `probe synth`: a planted benchmark with a trained tiny model, and a
//! scripted crowd that answers HITs from the ground-truth regions.

use std::path::{Path, PathBuf};

use log::info;
use probe_core::annotation::{Choice, Hit, HitStatus, HitStore, PanelImage, WorkerResponse};
use probe_core::dataset::{Dataset, MaskSource, MaskStore};
use probe_core::model::ModelBundle;
use probe_core::saliency::{neural_activation_map, SoftMask};
use probe_core::synthetic::{
    generate_planted_dataset, load_tiny_model, save_tiny_model, scripted_choice, tiny_network, train_tiny,
    write_planted_dataset, EpochStats, PlantConfig, Region, TrainConfig,
};
use probe_core::{Error, Image, ImageSource};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{InStage, PipelineError, Result};
use crate::pipeline::{Pipeline, Stage};

const GENERATE: &str = "synth generate";
const ANNOTATE: &str = "synth annotate";

/// What `probe synth generate` wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFiles {
    pub config: PathBuf,
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub training: Vec<EpochStats>,
}

/// Writes `data/`, a trained `model.json` and a `probe.toml` using both under `out`.
pub fn generate_bench(out: &Path, plant: &PlantConfig, train: &TrainConfig) -> Result<BenchFiles> {
    let dataset = generate_planted_dataset(plant).in_stage(GENERATE)?;
    let data = out.join("data");
    write_planted_dataset(&dataset, &data).in_stage(GENERATE)?;
    let examples: Vec<(&Image, usize)> = dataset.split("train").map(|s| (&s.image, s.label)).collect();
    let mut network = tiny_network(plant.seed, plant.image_size, plant.num_classes);
    let training = train_tiny(&mut network, &examples, train).in_stage(GENERATE)?;
    if let Some(last) = training.last() {
        info!("trained {} epochs: loss {:.4}, accuracy {:.3}", training.len(), last.mean_loss, last.accuracy);
    }
    let model = out.join("model.json");
    save_tiny_model(&model, &format!("tiny-bench-{}", plant.seed), &network).in_stage(GENERATE)?;
    let config = out.join("probe.toml");
    let text = PipelineConfig::new("model.json", "data").to_toml()?;
    std::fs::write(&config, text).map_err(|e| PipelineError::io(&config, e))?;
    Ok(BenchFiles {
        config,
        dataset: data,
        model,
        training,
    })
}

/// Smallest box holding every nonzero pixel of a mask.
pub fn bounding_region(mask: &SoftMask) -> Option<Region> {
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for ((y, x), &v) in mask.values().indexed_iter() {
        if v > 0.0 {
            top = top.min(y);
            left = left.min(x);
            bottom = bottom.max(y);
            right = right.max(x);
        }
    }
    (top != usize::MAX).then(|| Region {
        top,
        left,
        height: bottom - top + 1,
        width: right - left + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedRun {
    pub discovery_hits: usize,
    pub validation_hits: usize,
    pub responses: usize,
}

struct Annotator<'a> {
    dataset: &'a Dataset,
    model: &'a ModelBundle,
}

impl Annotator<'_> {
    fn regions(&self, image_id: &str) -> probe_core::Result<(Region, Region)> {
        let (causal, spurious) = self.dataset.ground_truth(image_id)?.ok_or_else(|| {
            Error::InvalidConfig(format!("image `{image_id}` has no ground-truth regions"))
        })?;
        let missing = || Error::InvalidConfig(format!("image `{image_id}` has an empty ground-truth region"));
        Ok((bounding_region(&causal).ok_or_else(missing)?, bounding_region(&spurious).ok_or_else(missing)?))
    }

    /// The answer for the images of a discovery HIT, looking at their activation maps.
    fn discovery(&self, feature: usize, panel: &[PanelImage]) -> probe_core::Result<Choice> {
        let maps = panel
            .iter()
            .map(|p| {
                let image = self.dataset.load(&p.image_id)?;
                let forward = self.model.forward(&p.image_id, image.view())?;
                let nam = neural_activation_map(forward.feature_maps.view(), feature, self.model.input_size, &p.image_id)?;
                let (glyph, patch) = self.regions(&p.image_id)?;
                Ok((nam, glyph, patch))
            })
            .collect::<probe_core::Result<Vec<_>>>()?;
        Ok(scripted_choice(&maps))
    }

    /// "same" when both sections' stored masks point at the same region kind.
    fn validation(&self, feature: usize, a: &[PanelImage], b: &[PanelImage], masks: &dyn MaskSource) -> probe_core::Result<Choice> {
        let section = |panel: &[PanelImage]| {
            panel
                .iter()
                .map(|p| {
                    let (glyph, patch) = self.regions(&p.image_id)?;
                    Ok((masks.mask(feature, &p.image_id)?, glyph, patch))
                })
                .collect::<probe_core::Result<Vec<_>>>()
                .map(|maps| scripted_choice(&maps))
        };
        Ok(if section(a)? == section(b)? { Choice::Same } else { Choice::Different })
    }
}

/// Answers every open HIT with `quorum` identical scripted responses, appending
/// them to the pipeline's response journal.
pub fn annotate_scripted(pipeline: &Pipeline) -> Result<ScriptedRun> {
    let mut hits: Vec<Hit> = pipeline.artifact(Stage::Subsets, Stage::Hits, "hits.json").map_err(|e| match e {
        PipelineError::MissingUpstream { run_first, path, .. } => PipelineError::MissingUpstream {
            stage: ANNOTATE,
            run_first,
            path,
        },
        other => other,
    })?;
    let validation_path = pipeline.stage_dir(Stage::Subsets).join("validation_hits.json");
    if pipeline.stage_record(Stage::Subsets).is_some() && validation_path.exists() {
        let text = std::fs::read_to_string(&validation_path).map_err(|e| PipelineError::io(&validation_path, e))?;
        let more: Vec<Hit> = serde_json::from_str(&text).map_err(|e| PipelineError::Core {
            stage: ANNOTATE,
            source: e.into(),
        })?;
        hits.extend(more);
    }
    let config = pipeline.config();
    let quorum = config.annotation.quorum;
    let store = HitStore::with_journal(quorum, hits.clone(), &pipeline.journal_path()).in_stage(ANNOTATE)?;
    let dataset = Dataset::open(&config.dataset.root).in_stage(ANNOTATE)?;
    let model = load_tiny_model(config.model.feature_source()).in_stage(ANNOTATE)?;
    let annotator = Annotator {
        dataset: &dataset,
        model: &model,
    };
    let masks = MaskStore::new(pipeline.stage_dir(Stage::Subsets));
    let mut run = ScriptedRun::default();
    for hit in &hits {
        let (_, summary) = store.hit(hit.id()).in_stage(ANNOTATE)?;
        if summary.status == HitStatus::Closed {
            continue;
        }
        let choice = match hit {
            Hit::Discovery(h) => {
                run.discovery_hits += 1;
                annotator.discovery(h.feature_index, &h.visual_panel)
            }
            Hit::Validation(h) => {
                run.validation_hits += 1;
                annotator.validation(h.feature_index, &h.section_a, &h.section_b, &masks)
            }
        }
        .in_stage(ANNOTATE)?;
        for worker in summary.responses..quorum {
            let response = WorkerResponse {
                hit_id: hit.id().to_string(),
                worker_id: format!("scripted-{worker}"),
                choice,
                reason: "scripted from the ground-truth regions".into(),
                confidence: 5,
            };
            store.submit(hit.id(), response).in_stage(ANNOTATE)?;
            run.responses += 1;
        }
    }
    Ok(run)
}
