//! Feature subsets D(i, j), class-level mask unions, and the on-disk dataset of
//! `(image, label, causal masks, spurious masks)` samples.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/manifest.json                 samples, mask refs, ledger snapshot, format version
//! root/masks/{feature}/{image}.png   8-bit grayscale soft masks
//! root/images/{image}.png            only when images are copied in
//! ```
//!
//! Feature subsets are built from images *labelled* with the class, whereas
//! discovery HITs use images *predicted* as the class.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use log::warn;
use ndarray::Zip;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationLedger, ClassMetadata, LedgerExport, Verdict};
use crate::cache::CacheRecord;
use crate::imageio::{check_file_stem, load_rgb_png, read_bytes, sha256_hex, write_bytes, Image, ImageSource};
use crate::model::ModelBundle;
use crate::saliency::{neural_activation_map, SoftMask};
use crate::{Error, Result};

pub const DEFAULT_SUBSET_SIZE: usize = 65;
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Relative location of the mask of `feature` on `image_id`.
pub fn mask_ref(feature: usize, image_id: &str) -> String {
    format!("masks/{feature}/{image_id}.png")
}

pub trait MaskSource: Sync {
    fn mask(&self, feature: usize, image_id: &str) -> Result<SoftMask>;
}

pub trait MaskSink: Sync {
    /// Stores the mask and returns its reference.
    fn store(&self, feature: usize, image_id: &str, mask: &SoftMask) -> Result<String>;
}

/// Masks as PNG files under a dataset root.
#[derive(Debug, Clone)]
pub struct MaskStore {
    root: PathBuf,
}

impl MaskStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MaskStore { root: root.into() }
    }
}

impl MaskSource for MaskStore {
    fn mask(&self, feature: usize, image_id: &str) -> Result<SoftMask> {
        let path = self.root.join(mask_ref(feature, image_id));
        if !path.exists() {
            return Err(Error::UnknownMask {
                feature,
                image_id: image_id.to_string(),
            });
        }
        SoftMask::from_png(&read_bytes(&path)?, Some(feature), image_id)
    }
}

impl MaskSink for MaskStore {
    fn store(&self, feature: usize, image_id: &str, mask: &SoftMask) -> Result<String> {
        check_file_stem(image_id)?;
        let rel = mask_ref(feature, image_id);
        write_bytes(&self.root.join(&rel), &mask.to_png()?)?;
        Ok(rel)
    }
}

/// In-memory masks, kept at full precision.
#[derive(Debug, Default)]
pub struct MemoryMasks {
    masks: RwLock<BTreeMap<(usize, String), SoftMask>>,
}

impl MemoryMasks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, feature: usize, image_id: &str, mask: SoftMask) {
        self.masks.write().unwrap().insert((feature, image_id.to_string()), mask);
    }

    pub fn len(&self) -> usize {
        self.masks.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MaskSource for MemoryMasks {
    fn mask(&self, feature: usize, image_id: &str) -> Result<SoftMask> {
        self.masks
            .read()
            .unwrap()
            .get(&(feature, image_id.to_string()))
            .cloned()
            .ok_or_else(|| Error::UnknownMask {
                feature,
                image_id: image_id.to_string(),
            })
    }
}

impl MaskSink for MemoryMasks {
    fn store(&self, feature: usize, image_id: &str, mask: &SoftMask) -> Result<String> {
        self.insert(feature, image_id, mask.clone());
        Ok(mask_ref(feature, image_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMember {
    pub image_id: String,
    pub activation: f64,
    pub mask_ref: String,
}

/// D(i, j): the top-k images labelled `i` by activation of feature `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSubset {
    pub class_index: usize,
    pub feature_index: usize,
    pub k: usize,
    /// Non-increasing activation; ties by ascending image id.
    pub members: Vec<SubsetMember>,
    /// True when the class had fewer than `k` images.
    pub truncated: bool,
}

impl FeatureSubset {
    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.image_id.as_str())
    }
}

/// Ranks `(image_id, activation)` pairs descending and keeps the first `k`.
pub fn top_k(mut candidates: Vec<(String, f64)>, k: usize) -> (Vec<(String, f64)>, bool) {
    candidates.sort_by(|a, b| crate::selection::descending(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
    let truncated = candidates.len() < k;
    candidates.truncate(k);
    (candidates, truncated)
}

/// Builds D(class, feature) from cached activations, rendering each member's
/// neural activation map into `sink`.
#[allow(clippy::too_many_arguments)]
pub fn build_feature_subset(
    class: usize,
    feature: usize,
    k: usize,
    labels: &BTreeMap<String, usize>,
    records: &[CacheRecord],
    model: &ModelBundle,
    images: &dyn ImageSource,
    sink: &dyn MaskSink,
) -> Result<FeatureSubset> {
    if k == 0 {
        return Err(Error::InvalidConfig("subset size k must be positive".into()));
    }
    let candidates: Vec<(String, f64)> = records
        .iter()
        .filter(|r| labels.get(&r.image_id) == Some(&class))
        .map(|r| {
            r.vector
                .get(feature)
                .map(|&v| (r.image_id.clone(), f64::from(v)))
                .ok_or(Error::FeatureOutOfRange {
                    index: feature,
                    feature_count: r.vector.len(),
                })
        })
        .collect::<Result<_>>()?;
    if candidates.is_empty() {
        return Err(Error::EmptySubset(format!("no cached images labelled {class}")));
    }
    let (chosen, truncated) = top_k(candidates, k);
    if truncated {
        warn!("class {class} has only {} images, fewer than k = {k}", chosen.len());
    }
    let members = chosen
        .par_iter()
        .map(|(image_id, activation)| {
            let image = images.load(image_id)?;
            let forward = model.forward(image_id, image.view())?;
            let (_, h, w) = image.dim();
            let mask = neural_activation_map(forward.feature_maps.view(), feature, (h, w), image_id)?;
            Ok(SubsetMember {
                image_id: image_id.clone(),
                activation: *activation,
                mask_ref: sink.store(feature, image_id, &mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSubset {
        class_index: class,
        feature_index: feature,
        k,
        members,
        truncated,
    })
}

/// Pointwise maximum of the given masks.
pub fn combined_mask(image_id: &str, relevant: &[(usize, SoftMask)]) -> Result<SoftMask> {
    let Some(((_, first), rest)) = relevant.split_first() else {
        return Err(Error::EmptySubset(format!("no masks to combine for `{image_id}`")));
    };
    let mut values = first.values().to_owned();
    for (_, mask) in rest {
        if mask.dim() != values.dim() {
            return Err(Error::DimensionMismatch(format!(
                "masks of `{image_id}`: {:?} vs {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        Zip::from(&mut values)
            .and(mask.values())
            .for_each(|a, &b| *a = a.max(b));
    }
    let source = if relevant.len() == 1 { first.source_feature } else { None };
    SoftMask::new(values, source, image_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionKind {
    /// DS(i) with combined masks s; corrupting it measures causal accuracy.
    Spurious,
    /// DC(i) with combined masks c; corrupting it measures spurious accuracy.
    Causal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnionMember {
    pub image_id: String,
    pub features: Vec<usize>,
    pub mask: SoftMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassUnion {
    pub class_index: usize,
    pub kind: UnionKind,
    /// Sorted by image id.
    pub members: Vec<UnionMember>,
}

impl ClassUnion {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Union of the given subsets of one class, with per-image combined masks.
pub fn build_class_union(
    class: usize,
    kind: UnionKind,
    subsets: &[&FeatureSubset],
    masks: &dyn MaskSource,
) -> Result<ClassUnion> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for subset in subsets {
        if subset.class_index != class {
            return Err(Error::InvalidConfig(format!(
                "subset of class {} in union of class {class}",
                subset.class_index
            )));
        }
        for id in subset.image_ids() {
            by_image.entry(id).or_default().push(subset.feature_index);
        }
    }
    let members = by_image
        .into_par_iter()
        .map(|(image_id, features)| {
            let relevant = features
                .iter()
                .map(|&f| Ok((f, masks.mask(f, image_id)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(UnionMember {
                image_id: image_id.to_string(),
                mask: combined_mask(image_id, &relevant)?,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassUnion {
        class_index: class,
        kind,
        members,
    })
}

/// DS(i) and DC(i) for a class from its annotated subsets.
pub fn class_unions(
    class: usize,
    ledger: &AnnotationLedger,
    subsets: &[FeatureSubset],
    masks: &dyn MaskSource,
) -> Result<(ClassUnion, ClassUnion)> {
    let pick = |features: BTreeSet<usize>| -> Vec<&FeatureSubset> {
        subsets
            .iter()
            .filter(|s| s.class_index == class && features.contains(&s.feature_index))
            .collect()
    };
    let spurious = build_class_union(class, UnionKind::Spurious, &pick(ledger.spurious(class)), masks)?;
    let causal = build_class_union(class, UnionKind::Causal, &pick(ledger.causal(class)), masks)?;
    Ok((spurious, causal))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Relative to the dataset root, or absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub image_id: String,
    pub label: usize,
    pub image: ImageRef,
    pub causal_masks: Vec<(usize, SoftMask)>,
    pub spurious_masks: Vec<(usize, SoftMask)>,
}

/// One sample per image appearing in a causal or spurious subset of its class.
pub fn masked_samples(
    ledger: &AnnotationLedger,
    subsets: &[FeatureSubset],
    masks: &dyn MaskSource,
    image_ref: &dyn Fn(&str) -> Result<ImageRef>,
) -> Result<Vec<MaskedSample>> {
    // (label, image) -> (causal features, spurious features)
    let mut plan: BTreeMap<(usize, &str), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for subset in subsets {
        let verdict = ledger
            .get(subset.class_index, subset.feature_index)
            .map(|r| r.verdict);
        for id in subset.image_ids() {
            let entry = plan.entry((subset.class_index, id)).or_default();
            match verdict {
                Some(Verdict::Causal) => entry.0.push(subset.feature_index),
                Some(Verdict::Spurious) => entry.1.push(subset.feature_index),
                _ => {}
            }
        }
    }
    plan.into_iter()
        .filter(|(_, (c, s))| !c.is_empty() || !s.is_empty())
        .map(|((label, id), (mut causal, mut spurious))| {
            causal.sort_unstable();
            spurious.sort_unstable();
            let load = |features: Vec<usize>| {
                features
                    .into_iter()
                    .map(|f| Ok((f, masks.mask(f, id)?)))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(MaskedSample {
                image_id: id.to_string(),
                label,
                image: image_ref(id)?,
                causal_masks: load(causal)?,
                spurious_masks: load(spurious)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub feature: usize,
    pub path: String,
    pub sha256: String,
}

/// Binary ground-truth region masks of a synthetic sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub causal: String,
    pub spurious: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image_id: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub image: ImageRef,
    #[serde(default)]
    pub causal_masks: Vec<MaskEntry>,
    #[serde(default)]
    pub spurious_masks: Vec<MaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<LedgerExport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassMetadata>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_bytes(&root.join(MANIFEST_FILE), self.to_json()?.as_bytes())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "dataset manifest",
                format!("format version {} (supported: {FORMAT_VERSION})", manifest.format_version),
            ));
        }
        Ok(manifest)
    }
}

fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    /// Copy referenced images into `root/images/`; otherwise only reference them.
    pub copy_images: bool,
    /// Directory that relative image paths of the samples resolve against.
    pub image_base: Option<PathBuf>,
}

pub fn export_dataset(
    samples: &[MaskedSample],
    root: &Path,
    ledger: Option<&AnnotationLedger>,
    classes: &[ClassMetadata],
    options: &ExportOptions,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries = samples
        .par_iter()
        .map(|sample| {
            check_file_stem(&sample.image_id)?;
            let write_masks = |masks: &[(usize, SoftMask)]| {
                masks
                    .iter()
                    .map(|(feature, mask)| {
                        let bytes = mask.to_png()?;
                        let path = mask_ref(*feature, &sample.image_id);
                        write_bytes(&root.join(&path), &bytes)?;
                        Ok(MaskEntry {
                            feature: *feature,
                            path,
                            sha256: sha256_hex(&bytes),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let mut image = sample.image.clone();
            if options.copy_images {
                let source = image
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::UnknownImage(sample.image_id.clone()))?;
                let base = options.image_base.as_deref().unwrap_or(root);
                let bytes = read_bytes(&resolve(base, source))?;
                if sha256_hex(&bytes) != image.sha256 {
                    return Err(Error::ChecksumMismatch {
                        path: resolve(base, source),
                    });
                }
                let rel = format!("images/{}.png", sample.image_id);
                write_bytes(&root.join(&rel), &bytes)?;
                image.path = Some(rel);
            }
            Ok(SampleEntry {
                image_id: sample.image_id.clone(),
                label: sample.label,
                split: None,
                image,
                causal_masks: write_masks(&sample.causal_masks)?,
                spurious_masks: write_masks(&sample.spurious_masks)?,
                ground_truth: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        samples: entries,
        ledger: ledger.map(|l| l.export()),
        classes: classes.to_vec(),
    };
    manifest.write(root)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleError {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ImportReport {
    pub manifest: DatasetManifest,
    pub samples: Vec<MaskedSample>,
    pub errors: Vec<SampleError>,
}

/// Reads a dataset back; samples with missing or corrupted masks are reported
/// individually instead of failing the whole import.
pub fn import_dataset(root: &Path) -> Result<ImportReport> {
    let manifest = DatasetManifest::read(root)?;
    let results: Vec<std::result::Result<MaskedSample, SampleError>> = manifest
        .samples
        .par_iter()
        .map(|entry| {
            let load = |masks: &[MaskEntry]| -> Result<Vec<(usize, SoftMask)>> {
                masks
                    .iter()
                    .map(|m| {
                        let path = resolve(root, &m.path);
                        let bytes = read_bytes(&path)?;
                        if sha256_hex(&bytes) != m.sha256 {
                            return Err(Error::ChecksumMismatch { path });
                        }
                        Ok((m.feature, SoftMask::from_png(&bytes, Some(m.feature), &entry.image_id)?))
                    })
                    .collect()
            };
            let build = || -> Result<MaskedSample> {
                Ok(MaskedSample {
                    image_id: entry.image_id.clone(),
                    label: entry.label,
                    image: entry.image.clone(),
                    causal_masks: load(&entry.causal_masks)?,
                    spurious_masks: load(&entry.spurious_masks)?,
                })
            };
            build().map_err(|e| SampleError {
                image_id: entry.image_id.clone(),
                message: e.to_string(),
            })
        })
        .collect();
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(e),
        }
    }
    Ok(ImportReport {
        manifest,
        samples,
        errors,
    })
}

/// Read access to a dataset root: images, labels, splits and ground truth.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        let mut by_id = HashMap::with_capacity(manifest.samples.len());
        for (k, s) in manifest.samples.iter().enumerate() {
            if by_id.insert(s.image_id.clone(), k).is_some() {
                return Err(Error::format("dataset manifest", format!("duplicate image id `{}`", s.image_id)));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            by_id,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[SampleEntry] {
        &self.manifest.samples
    }

    pub fn sample(&self, image_id: &str) -> Result<&SampleEntry> {
        self.by_id
            .get(image_id)
            .map(|&k| &self.manifest.samples[k])
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    /// Samples whose split matches (all samples when `split` is `None`).
    pub fn split<'a>(&'a self, split: Option<&'a str>) -> impl Iterator<Item = &'a SampleEntry> + 'a {
        self.manifest
            .samples
            .iter()
            .filter(move |s| split.is_none() || s.split.as_deref() == split)
    }

    pub fn labels(&self, split: Option<&str>) -> BTreeMap<String, usize> {
        self.split(split).map(|s| (s.image_id.clone(), s.label)).collect()
    }

    pub fn image_path(&self, image_id: &str) -> Result<PathBuf> {
        let sample = self.sample(image_id)?;
        let path = sample
            .image
            .path
            .as_deref()
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        Ok(resolve(&self.root, path))
    }

    /// Reference usable from another dataset root (absolute path, same hash).
    pub fn absolute_ref(&self, image_id: &str) -> Result<ImageRef> {
        let sample = self.sample(image_id)?;
        let path = self.image_path(image_id)?;
        let path = path.canonicalize().map_err(|e| Error::io(&path, e))?;
        Ok(ImageRef {
            path: Some(path.to_string_lossy().into_owned()),
            sha256: sample.image.sha256.clone(),
        })
    }

    pub fn ground_truth(&self, image_id: &str) -> Result<Option<(SoftMask, SoftMask)>> {
        let Some(gt) = &self.sample(image_id)?.ground_truth else {
            return Ok(None);
        };
        let load = |p: &str| SoftMask::from_png(&read_bytes(&resolve(&self.root, p))?, None, image_id);
        Ok(Some((load(&gt.causal)?, load(&gt.spurious)?)))
    }
}

impl ImageSource for Dataset {
    fn load(&self, image_id: &str) -> Result<Image> {
        load_rgb_png(&self.image_path(image_id)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples_per_class: BTreeMap<usize, usize>,
    pub classes_with_spurious: usize,
    /// `histogram[n]` = number of annotated classes with exactly `n` spurious features.
    pub spurious_histogram: Vec<usize>,
    /// Row/column order of `shared_spurious`.
    pub classes: Vec<usize>,
    /// Spurious features shared by two classes; the diagonal is zero.
    pub shared_spurious: Vec<Vec<usize>>,
}

pub fn dataset_stats(samples: &[MaskedSample], ledger: &AnnotationLedger) -> DatasetStats {
    let mut samples_per_class = BTreeMap::new();
    for s in samples {
        *samples_per_class.entry(s.label).or_insert(0) += 1;
    }
    let classes: Vec<usize> = ledger.classes().into_iter().collect();
    let spurious: Vec<BTreeSet<usize>> = classes.iter().map(|&c| ledger.spurious(c)).collect();
    let max = spurious.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut spurious_histogram = vec![0; max + 1];
    for s in &spurious {
        spurious_histogram[s.len()] += 1;
    }
    let shared_spurious = (0..classes.len())
        .map(|a| {
            (0..classes.len())
                .map(|b| if a == b { 0 } else { spurious[a].intersection(&spurious[b]).count() })
                .collect()
        })
        .collect();
    DatasetStats {
        samples_per_class,
        classes_with_spurious: spurious.iter().filter(|s| !s.is_empty()).count(),
        spurious_histogram,
        classes,
        shared_spurious,
    }
}
