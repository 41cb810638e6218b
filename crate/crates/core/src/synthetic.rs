//! Planted-spurious synthetic data and a tiny reference model with known
//! ground truth.
//!
//! Every image shows a class glyph (the causal object) and, elsewhere, a bright
//! square patch. With probability `co_occurrence` the patch is the one paired
//! with the image's class; otherwise it is drawn uniformly from all classes.
//!
//! Classes `2k` and `2k + 1` share a coarse glyph pattern and differ only in one
//! faint pixel, so the patch is the easy way to tell them apart: the even class
//! is paired with a flat patch and the odd class with a striped one. Additive
//! noise on a flat patch makes it look striped, which is what lets the noise
//! probe expose a model that leans on it.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{Choice, ClassMetadata};
use crate::dataset::{DatasetManifest, GroundTruth, ImageRef, SampleEntry, FORMAT_VERSION};
use crate::imageio::{encode_mask_png, encode_rgb_png, quantize, sha256_hex, write_bytes, Image};
use crate::model::{ModelBundle, Normalization, TinyCnn, TinyCnnGradients};
use crate::saliency::SoftMask;
use crate::{Error, Result};

pub const GLYPH_SIZE: usize = 9;
const PLACEMENT_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    /// Held-out images per class, listed in the class metadata.
    pub validation_per_class: usize,
    pub image_size: usize,
    /// Side of the square texture patch in pixels.
    pub patch_size: usize,
    pub co_occurrence: f64,
    /// How much darker than the background the glyph is drawn.
    pub glyph_contrast: f64,
    /// Fraction of the contrast removed from the pixel that tells the two
    /// classes sharing a glyph pattern apart.
    pub glyph_detail: f64,
    /// How much brighter than the background the patch is on average.
    pub patch_brightness: f64,
    /// Half the peak-to-peak amplitude of the stripes on odd-class patches.
    pub patch_amplitude: f64,
    /// Std of the per-pixel background noise.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            num_classes: 8,
            images_per_class: 200,
            validation_per_class: 3,
            image_size: 32,
            patch_size: 8,
            co_occurrence: 0.95,
            glyph_contrast: 0.25,
            glyph_detail: 0.3,
            patch_brightness: 0.1,
            patch_amplitude: 0.075,
            background_noise: 0.01,
            seed: 0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return Err(Error::InvalidConfig(format!("co_occurrence {} outside [0, 1]", self.co_occurrence)));
        }
        if self.num_classes == 0 || self.images_per_class == 0 {
            return Err(Error::InvalidConfig("need at least one class and one image per class".into()));
        }
        if self.patch_size == 0 || self.image_size < GLYPH_SIZE + self.patch_size + 1 {
            return Err(Error::InvalidConfig(format!(
                "image size {} cannot hold a glyph and a patch side by side",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Axis-aligned pixel box `[top, top + height) x [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn overlaps(&self, other: &Region) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    pub fn mask(&self, size: usize) -> Array2<f64> {
        Array2::from_shape_fn((size, size), |(y, x)| f64::from(u8::from(self.contains(y, x))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSample {
    pub image_id: String,
    pub label: usize,
    pub split: String,
    /// Already quantized to 8-bit levels, so it survives a PNG round trip exactly.
    pub image: Image,
    pub glyph: Region,
    pub patch: Region,
    /// Class whose texture the patch shows.
    pub patch_class: usize,
}

impl PlantedSample {
    pub fn causal_mask(&self) -> SoftMask {
        SoftMask::new(self.glyph.mask(self.image.dim().1), None, &self.image_id).unwrap()
    }

    pub fn spurious_mask(&self) -> SoftMask {
        SoftMask::new(self.patch.mask(self.image.dim().1), None, &self.image_id).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub config: PlantConfig,
    pub samples: Vec<PlantedSample>,
}

impl PlantedDataset {
    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a PlantedSample> + 'a {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, image_id: &str) -> Option<&PlantedSample> {
        self.samples.iter().find(|s| s.image_id == image_id)
    }
}

const GLYPH_CELL: usize = 3;
const GLYPH_CELLS: usize = 3;

/// Coarse `3 x 3` cell patterns, one per pair of classes; fixed across seeds.
fn coarse_patterns(count: usize) -> Vec<[[bool; GLYPH_CELLS]; GLYPH_CELLS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E37_79B9_7F4A_7C15);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let bits: u16 = rng.random_range(0..512);
        if (4..=6).contains(&bits.count_ones()) && seen.insert(bits) {
            let mut p = [[false; GLYPH_CELLS]; GLYPH_CELLS];
            for (k, cell) in p.iter_mut().flatten().enumerate() {
                *cell = bits >> k & 1 == 1;
            }
            out.push(p);
        }
    }
    out
}

/// Darkness weights of a class's `GLYPH_SIZE x GLYPH_SIZE` glyph. Classes
/// `2k` and `2k + 1` share a coarse cell pattern; even classes lighten the
/// centre pixel of their first cell by `detail`, odd classes that of their last.
pub fn glyph(class: usize, detail: f64) -> Array2<f64> {
    let pattern = coarse_patterns(class / 2 + 1)[class / 2];
    let mut g = Array2::from_shape_fn((GLYPH_SIZE, GLYPH_SIZE), |(y, x)| {
        f64::from(u8::from(pattern[y / GLYPH_CELL][x / GLYPH_CELL]))
    });
    let mut on = pattern.iter().flatten().enumerate().filter(|(_, &v)| v).map(|(k, _)| k);
    let k = if class % 2 == 0 { on.next() } else { on.last() }.unwrap();
    g[[(k / GLYPH_CELLS) * GLYPH_CELL + 1, (k % GLYPH_CELLS) * GLYPH_CELL + 1]] = 1.0 - detail;
    g
}

/// Stripe value in `[-1, 1]` of a class's patch at patch-local `(y, x)`; zero
/// everywhere for even classes, whose patches are flat.
pub fn patch_pattern(class: usize, num_classes: usize, y: usize, x: usize) -> f64 {
    if class % 2 == 0 {
        return 0.0;
    }
    let angle = std::f64::consts::PI * class as f64 / num_classes as f64;
    let t = (y as f64 * angle.sin() + x as f64 * angle.cos()) * std::f64::consts::TAU / 3.0;
    if t.sin() >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn place(rng: &mut ChaCha8Rng, size: usize, patch_size: usize, index: usize) -> Result<(Region, Region)> {
    for _ in 0..PLACEMENT_RETRIES {
        let glyph = Region {
            top: rng.random_range(0..=size - GLYPH_SIZE),
            left: rng.random_range(0..=size - GLYPH_SIZE),
            height: GLYPH_SIZE,
            width: GLYPH_SIZE,
        };
        let patch = Region {
            top: rng.random_range(0..=size - patch_size),
            left: rng.random_range(0..=size - patch_size),
            height: patch_size,
            width: patch_size,
        };
        if !glyph.overlaps(&patch) {
            return Ok((glyph, patch));
        }
    }
    Err(Error::PlacementFailed(index))
}

fn render(config: &PlantConfig, rng: &mut ChaCha8Rng, label: usize, patch_class: usize, glyph_at: Region, patch_at: Region) -> Image {
    let n = config.image_size;
    let noise = Normal::new(0.0, config.background_noise.max(0.0)).unwrap();
    let mut image = Array3::from_shape_simple_fn((3, n, n), || 0.5 + noise.sample(rng));
    let shape = glyph(label, config.glyph_detail);
    for ((gy, gx), &weight) in shape.indexed_iter() {
        for c in 0..3 {
            image[[c, glyph_at.top + gy, glyph_at.left + gx]] -= config.glyph_contrast * weight;
        }
    }
    for y in 0..patch_at.height {
        for x in 0..patch_at.width {
            let v = 0.5
                + config.patch_brightness
                + config.patch_amplitude * patch_pattern(patch_class, config.num_classes, y, x);
            for c in 0..3 {
                image[[c, patch_at.top + y, patch_at.left + x]] = v;
            }
        }
    }
    image.mapv_inplace(|v| f64::from(quantize(v)) / 255.0);
    image
}

/// Deterministic per seed; images are generated in parallel from per-image streams.
pub fn generate_planted_dataset(config: &PlantConfig) -> Result<PlantedDataset> {
    config.validate()?;
    let per_class = config.images_per_class + config.validation_per_class;
    let jobs: Vec<(usize, usize)> = (0..config.num_classes)
        .flat_map(|c| (0..per_class).map(move |k| (c, k)))
        .collect();
    let samples = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(label, k))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(index as u64);
            let patch_class = if rng.random_bool(config.co_occurrence) {
                label
            } else {
                rng.random_range(0..config.num_classes)
            };
            let (glyph_at, patch_at) = place(&mut rng, config.image_size, config.patch_size, index)?;
            let image = render(config, &mut rng, label, patch_class, glyph_at, patch_at);
            let (prefix, split, n) = if k < config.images_per_class {
                ("c", "train", k)
            } else {
                ("v", "val", k - config.images_per_class)
            };
            Ok(PlantedSample {
                image_id: format!("{prefix}{label:02}_{n:04}"),
                label,
                split: split.to_string(),
                image,
                glyph: glyph_at,
                patch: patch_at,
                patch_class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlantedDataset {
        config: config.clone(),
        samples,
    })
}

pub fn class_metadata(dataset: &PlantedDataset) -> Vec<ClassMetadata> {
    (0..dataset.config.num_classes)
        .map(|c| ClassMetadata {
            class_index: c,
            object_names: vec![format!("glyph {c}")],
            supercategory: "glyph".into(),
            definition: format!("a faint {GLYPH_SIZE}x{GLYPH_SIZE} pixel glyph of pattern {c}"),
            wiki_links: Vec::new(),
            validation_image_ids: dataset
                .split("val")
                .filter(|s| s.label == c)
                .map(|s| s.image_id.clone())
                .collect(),
        })
        .collect()
}

/// Writes images, ground-truth masks and a manifest in the dataset layout.
pub fn write_planted_dataset(dataset: &PlantedDataset, root: &Path) -> Result<DatasetManifest> {
    let entries = dataset
        .samples
        .par_iter()
        .map(|s| {
            let image = encode_rgb_png(s.image.view())?;
            let path = format!("images/{}.png", s.image_id);
            write_bytes(&root.join(&path), &image)?;
            let n = dataset.config.image_size;
            let causal = format!("ground_truth/causal/{}.png", s.image_id);
            let spurious = format!("ground_truth/spurious/{}.png", s.image_id);
            write_bytes(&root.join(&causal), &encode_mask_png(s.glyph.mask(n).view())?)?;
            write_bytes(&root.join(&spurious), &encode_mask_png(s.patch.mask(n).view())?)?;
            Ok(SampleEntry {
                image_id: s.image_id.clone(),
                label: s.label,
                split: Some(s.split.clone()),
                image: ImageRef {
                    path: Some(path),
                    sha256: sha256_hex(&image),
                },
                causal_masks: Vec::new(),
                spurious_masks: Vec::new(),
                ground_truth: Some(GroundTruth { causal, spurious }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        samples: entries,
        ledger: None,
        classes: class_metadata(dataset),
    };
    manifest.write(root)?;
    Ok(manifest)
}

pub const TINY_WIDTHS: [usize; 3] = [8, 16, 32];
pub const TINY_STRIDES: [usize; 3] = [1, 2, 2];

pub fn tiny_preprocessing() -> Normalization {
    Normalization {
        mean: vec![0.5; 3],
        std: vec![0.125; 3],
    }
}

/// Untrained reference network for 3-channel square images.
pub fn tiny_network(seed: u64, image_size: usize, num_classes: usize) -> TinyCnn {
    TinyCnn::new(seed, 3, (image_size, image_size), &TINY_WIDTHS, &TINY_STRIDES, num_classes)
}

pub fn tiny_bundle(identifier: impl Into<String>, network: TinyCnn) -> Result<ModelBundle> {
    let size = network.input_size;
    let channels = network.input_channels;
    ModelBundle::new(identifier, size, channels, tiny_preprocessing(), Arc::new(network))
}

/// The untrained reference model: 32x32 RGB input, 32 features, 8 classes.
pub fn tiny_reference_model(seed: u64) -> ModelBundle {
    tiny_bundle(format!("tiny-{seed}"), tiny_network(seed, 32, 8)).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 14,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[&mut [f64]]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&mut [f64]>, lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for i in 0..p.len() {
                let g = g[i] * scale;
                self.m[k][i] = Self::BETA1 * self.m[k][i] + (1.0 - Self::BETA1) * g;
                self.v[k][i] = Self::BETA2 * self.v[k][i] + (1.0 - Self::BETA2) * g * g;
                p[i] -= lr * (self.m[k][i] / c1) / ((self.v[k][i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Minibatch Adam on softmax cross-entropy. Runs on one thread so the result
/// is bit-reproducible.
pub fn train_tiny(network: &mut TinyCnn, data: &[(&Image, usize)], config: &TrainConfig) -> Result<Vec<EpochStats>> {
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let preprocessing = tiny_preprocessing();
    let inputs: Vec<Array3<f64>> = data.iter().map(|(img, _)| preprocessing.apply(img.view())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(&network.parameter_slices_mut());
    let mut stats = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = TinyCnnGradients::zeros_like(network);
            for &i in batch {
                let (loss, predicted) = network.accumulate_gradients(inputs[i].view(), data[i].1, &mut grads);
                total_loss += loss;
                correct += usize::from(predicted == data[i].1);
            }
            let scale = 1.0 / batch.len() as f64;
            adam.step(network.parameter_slices_mut(), grads.slices_mut(), config.learning_rate, scale);
        }
        stats.push(EpochStats {
            mean_loss: total_loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModelFile {
    pub identifier: String,
    pub preprocessing: Normalization,
    pub network: TinyCnn,
}

pub fn save_tiny_model(path: &Path, identifier: &str, network: &TinyCnn) -> Result<()> {
    let file = TinyModelFile {
        identifier: identifier.to_string(),
        preprocessing: tiny_preprocessing(),
        network: network.clone(),
    };
    write_bytes(path, serde_json::to_string(&file)?.as_bytes())
}

pub fn load_tiny_model(path: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TinyModelFile = serde_json::from_str(&text)?;
    let size = file.network.input_size;
    let channels = file.network.input_channels;
    ModelBundle::new(file.identifier, size, channels, file.preprocessing, Arc::new(file.network))
}

/// Share of a mask's total mass that falls inside `region`.
pub fn mass_fraction(mask: &SoftMask, region: &Region) -> f64 {
    let total = mask.values().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = mask
        .values()
        .indexed_iter()
        .filter(|((y, x), _)| region.contains(*y, *x))
        .map(|(_, &v)| v)
        .sum();
    inside / total
}

/// What an annotator who can see the ground truth answers for a feature
/// shown through the given activation maps: background if, on average, more of
/// the map's mass lies on the patch than on the glyph.
pub fn scripted_choice(maps: &[(SoftMask, Region, Region)]) -> Choice {
    let (mut on_glyph, mut on_patch) = (0.0, 0.0);
    for (mask, glyph_at, patch_at) in maps {
        on_glyph += mass_fraction(mask, glyph_at);
        on_patch += mass_fraction(mask, patch_at);
    }
    if on_patch > on_glyph {
        Choice::Background
    } else {
        Choice::MainObject
    }
}

/// The image with its patch box painted over with flat background gray.
pub fn without_patch(sample: &PlantedSample) -> Image {
    let mut image = sample.image.clone();
    let gray = f64::from(quantize(0.5)) / 255.0;
    let r = sample.patch;
    image
        .slice_mut(ndarray::s![.., r.top..r.top + r.height, r.left..r.left + r.width])
        .fill(gray);
    image
}

/// Per feature, how much of the class logit the patch accounts for: the mean
/// drop in the feature's activation when the patch is removed from the
/// training images of `class` that carry the class's own patch, times the
/// feature's weight for the class.
pub fn patch_contribution(model: &ModelBundle, dataset: &PlantedDataset, class: usize) -> Result<Vec<f64>> {
    let weights = model.head_row(class)?;
    let samples: Vec<&PlantedSample> = dataset
        .split("train")
        .filter(|s| s.label == class && s.patch_class == class)
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptySubset(format!("no training image of class {class} carries its patch")));
    }
    let per_image = samples
        .par_iter()
        .map(|s| {
            let with = model.forward(&s.image_id, s.image.view())?.feature_vector;
            let without = model.forward(&s.image_id, without_patch(s).view())?.feature_vector;
            Ok(with - without)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = per_image[0].clone();
    for d in &per_image[1..] {
        mean += d;
    }
    mean /= per_image.len() as f64;
    Ok((mean * weights).to_vec())
}

/// The feature through which the planted patch reaches the class logit: the
/// largest [`patch_contribution`].
pub fn planted_feature(effect: &[f64]) -> usize {
    let mut best = 0;
    for (j, &e) in effect.iter().enumerate() {
        if e > effect[best] {
            best = j;
        }
    }
    best
}

/// How often each label co-occurs with each patch texture, `[label][patch]`.
pub fn co_occurrence_table(dataset: &PlantedDataset) -> Vec<Vec<usize>> {
    let k = dataset.config.num_classes;
    let mut table = vec![vec![0; k]; k];
    for s in &dataset.samples {
        table[s.label][s.patch_class] += 1;
    }
    table
}

/// Labels of the training split keyed by image id.
pub fn training_labels(dataset: &PlantedDataset) -> BTreeMap<String, usize> {
    dataset.split("train").map(|s| (s.image_id.clone(), s.label)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, co: f64) -> PlantConfig {
        PlantConfig {
            num_classes: 4,
            images_per_class: 20,
            validation_per_class: 2,
            co_occurrence: co,
            seed,
            ..PlantConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_planted_dataset(&small(3, 0.9)).unwrap();
        let b = generate_planted_dataset(&small(3, 0.9)).unwrap();
        let c = generate_planted_dataset(&small(4, 0.9)).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn ground_truth_is_binary_and_disjoint() {
        let d = generate_planted_dataset(&small(1, 0.95)).unwrap();
        assert_eq!(d.samples.len(), 4 * 22);
        for s in &d.samples {
            let c = s.causal_mask();
            let p = s.spurious_mask();
            assert!(c.values().iter().chain(p.values().iter()).all(|&v| v == 0.0 || v == 1.0));
            assert!(c.values().iter().zip(p.values().iter()).all(|(&a, &b)| a * b == 0.0));
            assert_eq!(c.values().sum(), (GLYPH_SIZE * GLYPH_SIZE) as f64);
            assert_eq!(p.values().sum(), (d.config.patch_size * d.config.patch_size) as f64);
        }
    }

    #[test]
    fn full_co_occurrence_pairs_every_patch() {
        let d = generate_planted_dataset(&small(2, 1.0)).unwrap();
        assert!(d.samples.iter().all(|s| s.patch_class == s.label));
        let d = generate_planted_dataset(&PlantConfig { images_per_class: 200, ..small(2, 0.0) }).unwrap();
        let table = co_occurrence_table(&d);
        for row in &table {
            let total: usize = row.iter().sum();
            // independent of the label: no texture dominates a class
            assert!(row.iter().all(|&n| (n as f64) < 0.4 * total as f64), "{row:?}");
        }
    }

    #[test]
    fn images_are_on_the_png_grid() {
        let d = generate_planted_dataset(&small(5, 0.5)).unwrap();
        for s in d.samples.iter().take(5) {
            let bytes = encode_rgb_png(s.image.view()).unwrap();
            assert_eq!(crate::imageio::decode_rgb_png(&bytes).unwrap(), s.image);
        }
    }

    #[test]
    fn glyphs_differ_between_classes_and_patches_within_pairs() {
        let pattern = |c: usize| -> Vec<f64> { (0..64).map(|k| patch_pattern(c, 8, k / 8, k % 8)).collect() };
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(glyph(a, 1.0), glyph(b, 1.0));
                if a % 2 == 1 || a / 2 == b / 2 {
                    assert_ne!(pattern(a), pattern(b), "{a} {b}");
                }
            }
        }
        assert!(pattern(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(generate_planted_dataset(&PlantConfig { co_occurrence: 1.5, ..small(0, 0.5) }).is_err());
        assert!(generate_planted_dataset(&PlantConfig { image_size: 10, ..small(0, 0.5) }).is_err());
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let d = generate_planted_dataset(&small(7, 0.95)).unwrap();
        let data: Vec<(&Image, usize)> = d.split("train").map(|s| (&s.image, s.label)).collect();
        let config = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let mut a = tiny_network(1, 32, 4);
        let mut b = tiny_network(1, 32, 4);
        let sa = train_tiny(&mut a, &data, &config).unwrap();
        let sb = train_tiny(&mut b, &data, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.last().unwrap().mean_loss < sa[0].mean_loss);
    }

    #[test]
    fn mass_fraction_of_box_mask() {
        let r = Region { top: 1, left: 1, height: 2, width: 2 };
        let m = SoftMask::new(r.mask(4), None, "m").unwrap();
        assert_eq!(mass_fraction(&m, &r), 1.0);
        let other = Region { top: 0, left: 0, height: 1, width: 4 };
        assert_eq!(mass_fraction(&m, &other), 0.0);
        assert_eq!(mass_fraction(&SoftMask::zeros((4, 4), None, "z"), &r), 0.0);
    }
}
