use std::path::{Path, PathBuf};

use ndarray::ArrayView3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::CacheRecord;
use crate::dataset::{FeatureSubset, MaskSource};
use crate::imageio::{check_file_stem, save_rgb_png, ImageSource};
use crate::model::ModelBundle;
use crate::saliency::{feature_attack, heatmap_overlay, neural_activation_map, AttackConfig};
use crate::{Error, Result};

/// Images per discovery HIT visual panel.
pub const DISCOVERY_PANEL_SIZE: usize = 5;
/// Images per validation HIT section.
pub const VALIDATION_SECTION_SIZE: usize = 5;

/// Class description shown next to the feature visualization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetadata {
    pub class_index: usize,
    pub object_names: Vec<String>,
    pub supercategory: String,
    pub definition: String,
    pub wiki_links: Vec<String>,
    /// Held-out images of the class (three in the discovery layout).
    pub validation_image_ids: Vec<String>,
}

/// One image of a panel with its rendered assets (paths relative to the asset root).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelImage {
    pub image_id: String,
    pub activation: f64,
    pub image: String,
    pub heatmap: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryHit {
    pub hit_id: String,
    pub class_index: usize,
    pub feature_index: usize,
    /// Top activating images among those predicted as the class, descending.
    pub visual_panel: Vec<PanelImage>,
    pub class_panel: ClassMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationHit {
    pub hit_id: String,
    pub class_index: usize,
    pub feature_index: usize,
    /// Highest activations of the subset, descending.
    pub section_a: Vec<PanelImage>,
    /// Lowest activations of the subset, ascending.
    pub section_b: Vec<PanelImage>,
}

impl DiscoveryHit {
    pub fn id_for(class: usize, feature: usize) -> String {
        format!("d-{class}-{feature}")
    }
}

impl ValidationHit {
    pub fn id_for(class: usize, feature: usize) -> String {
        format!("v-{class}-{feature}")
    }
}

/// Writes rendered images under a root directory and hands back relative paths.
#[derive(Debug, Clone)]
pub struct AssetWriter {
    root: PathBuf,
}

impl AssetWriter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AssetWriter { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put(&self, relative: String, image: ArrayView3<f64>) -> Result<String> {
        save_rgb_png(image, &self.root.join(&relative))?;
        Ok(relative)
    }

    pub fn image_path(image_id: &str) -> String {
        format!("images/{image_id}.png")
    }
}

/// The `n` images predicted as `class` with the largest activation of `feature`,
/// descending; equal activations go to the smaller image id.
pub fn top_activating(records: &[CacheRecord], class: usize, feature: usize, n: usize) -> Vec<(String, f64)> {
    let mut candidates: Vec<(String, f64)> = records
        .iter()
        .filter(|r| r.predicted == class)
        .filter_map(|r| r.vector.get(feature).map(|&v| (r.image_id.clone(), f64::from(v))))
        .collect();
    candidates.sort_by(|a, b| crate::selection::descending(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
    candidates.truncate(n);
    candidates
}

#[allow(clippy::too_many_arguments)]
pub fn build_discovery_hit(
    class: usize,
    feature: usize,
    records: &[CacheRecord],
    model: &ModelBundle,
    images: &dyn ImageSource,
    metadata: &ClassMetadata,
    attack: &AttackConfig,
    assets: &AssetWriter,
) -> Result<DiscoveryHit> {
    let top = top_activating(records, class, feature, DISCOVERY_PANEL_SIZE);
    if top.len() < DISCOVERY_PANEL_SIZE {
        return Err(Error::NotEnoughImages {
            class,
            available: top.len(),
            required: DISCOVERY_PANEL_SIZE,
        });
    }
    let visual_panel = top
        .par_iter()
        .map(|(image_id, activation)| {
            check_file_stem(image_id)?;
            let image = images.load(image_id)?;
            let forward = model.forward(image_id, image.view())?;
            let nam = neural_activation_map(forward.feature_maps.view(), feature, model.input_size, image_id)?;
            let heatmap = heatmap_overlay(image.view(), &nam)?;
            let attacked = feature_attack(model, image.view(), feature, attack)?;
            Ok(PanelImage {
                image_id: image_id.clone(),
                activation: *activation,
                image: assets.put(AssetWriter::image_path(image_id), image.view())?,
                heatmap: assets.put(format!("heatmaps/{feature}/{image_id}.png"), heatmap.view())?,
                attack: Some(assets.put(format!("attacks/{feature}/{image_id}.png"), attacked.view())?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for id in &metadata.validation_image_ids {
        check_file_stem(id)?;
        assets.put(AssetWriter::image_path(id), images.load(id)?.view())?;
    }
    Ok(DiscoveryHit {
        hit_id: DiscoveryHit::id_for(class, feature),
        class_index: class,
        feature_index: feature,
        visual_panel,
        class_panel: metadata.clone(),
    })
}

/// Two sections from a feature subset: its five highest and five lowest
/// activations, each image shown with the heatmap of its stored mask.
pub fn build_validation_hit(
    subset: &FeatureSubset,
    images: &dyn ImageSource,
    masks: &dyn MaskSource,
    assets: &AssetWriter,
) -> Result<ValidationHit> {
    let needed = 2 * VALIDATION_SECTION_SIZE;
    if subset.members.len() < needed {
        return Err(Error::NotEnoughImages {
            class: subset.class_index,
            available: subset.members.len(),
            required: needed,
        });
    }
    let feature = subset.feature_index;
    let render = |member: &crate::dataset::SubsetMember| -> Result<PanelImage> {
        let image = images.load(&member.image_id)?;
        let mask = masks.mask(feature, &member.image_id)?;
        let heatmap = heatmap_overlay(image.view(), &mask)?;
        Ok(PanelImage {
            image_id: member.image_id.clone(),
            activation: member.activation,
            image: assets.put(AssetWriter::image_path(&member.image_id), image.view())?,
            heatmap: assets.put(
                format!("validation/heatmaps/{feature}/{}.png", member.image_id),
                heatmap.view(),
            )?,
            attack: None,
        })
    };
    let section_a = subset.members[..VALIDATION_SECTION_SIZE]
        .iter()
        .map(render)
        .collect::<Result<Vec<_>>>()?;
    let section_b = subset.members[subset.members.len() - VALIDATION_SECTION_SIZE..]
        .iter()
        .rev()
        .map(render)
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationHit {
        hit_id: ValidationHit::id_for(subset.class_index, feature),
        class_index: subset.class_index,
        feature_index: feature,
        section_a,
        section_b,
    })
}
