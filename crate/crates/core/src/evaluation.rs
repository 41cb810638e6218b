//! Mask-targeted Gaussian corruption `x + σ(z ⊙ m)` and the accuracy
//! measurements built on it.
//!
//! The noise tensor `z` is a function of `(seed, image_id)` only, so results do
//! not depend on evaluation order or thread scheduling. Corrupted images are
//! not clipped to `[0, 1]` unless [`CorruptionSpec::clip`] is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array3, ArrayView3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::Verdict;
use crate::dataset::{ClassUnion, FeatureSubset, MaskSource};
use crate::imageio::{Image, ImageSource};
use crate::model::ModelBundle;
use crate::saliency::SoftMask;
use crate::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.25;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_SWEEP: [f64; 9] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
pub const DEFAULT_MATCH_GRID: [f64; 7] = [0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub clip: bool,
}

impl CorruptionSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec { sigma, seed, clip: false };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sigma(self, sigma: f64) -> Result<Self> {
        let spec = CorruptionSpec { sigma, ..self };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Generator for the noise of one image.
pub fn noise_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Standard normal tensor of shape `(c, h, w)`, drawn in row-major order.
pub fn noise(seed: u64, image_id: &str, (c, h, w): (usize, usize, usize)) -> Array3<f64> {
    let mut rng = noise_rng(seed, image_id);
    Array3::from_shape_simple_fn((c, h, w), || StandardNormal.sample(&mut rng))
}

/// `σ(z ⊙ m)` with the mask broadcast over channels.
pub fn perturbation(mask: &SoftMask, spec: &CorruptionSpec, image_id: &str, channels: usize) -> Array3<f64> {
    let (h, w) = mask.dim();
    let mut z = noise(spec.seed, image_id, (channels, h, w));
    let m = mask.values();
    for mut plane in z.outer_iter_mut() {
        Zip::from(&mut plane).and(m).for_each(|z, &m| *z = spec.sigma * (*z * m));
    }
    z
}

pub fn corrupt(image_id: &str, image: ArrayView3<f64>, mask: &SoftMask, spec: &CorruptionSpec) -> Result<Image> {
    spec.validate()?;
    let (c, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            image_id: image_id.to_string(),
            expected: (c, h, w),
            actual: (c, mask.dim().0, mask.dim().1),
        });
    }
    let mut out = image.to_owned();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let delta = perturbation(mask, spec, image_id, c);
    Zip::from(&mut out).and(&delta).for_each(|x, &d| {
        // zero perturbations leave the pixel bit-identical, signed zeros included
        if d != 0.0 {
            *x += d;
        }
        if spec.clip {
            *x = x.clamp(0.0, 1.0);
        }
    });
    Ok(out)
}

/// Images paired with the masks they are corrupted with.
pub type MaskedImages = Vec<(String, SoftMask)>;

pub fn subset_masks(subset: &FeatureSubset, masks: &dyn MaskSource) -> Result<MaskedImages> {
    subset
        .members
        .iter()
        .map(|m| Ok((m.image_id.clone(), masks.mask(subset.feature_index, &m.image_id)?)))
        .collect()
}

pub fn union_masks(union: &ClassUnion) -> MaskedImages {
    union
        .members
        .iter()
        .map(|m| (m.image_id.clone(), m.mask.clone()))
        .collect()
}

/// Mean over the images of `‖σ(z ⊙ m)‖₂`, from the same draws [`corrupt`] applies.
pub fn mean_l2_perturbation(items: &[(String, SoftMask)], sigma: f64, seed: u64, channels: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let spec = CorruptionSpec { sigma, seed, clip: false };
    spec.validate()?;
    let norms: Vec<f64> = items
        .par_iter()
        .map(|(id, mask)| perturbation(mask, &spec, id, channels).iter().map(|d| d * d).sum::<f64>().sqrt())
        .collect();
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Match {
    pub sigma: f64,
    /// Mean ℓ₂ of the low-norm subset at the matched σ.
    pub low_mean: f64,
    /// Mean ℓ₂ of the high-norm subset at the base σ.
    pub high_mean: f64,
}

/// The smallest grid σ at which the low-norm subset's mean perturbation
/// reaches the high-norm subset's mean at `base_sigma`.
pub fn match_l2_sigma(
    low: &[(String, SoftMask)],
    high: &[(String, SoftMask)],
    base_sigma: f64,
    grid: &[f64],
    seed: u64,
    channels: usize,
) -> Result<L2Match> {
    let low_base = mean_l2_perturbation(low, base_sigma, seed, channels)?;
    let high_mean = mean_l2_perturbation(high, base_sigma, seed, channels)?;
    if low_base > high_mean {
        return Err(Error::InvalidConfig(format!(
            "low subset already has the larger perturbation ({low_base} > {high_mean})"
        )));
    }
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &sigma in grid {
        let low_mean = mean_l2_perturbation(low, sigma, seed, channels)?;
        if low_mean >= high_mean {
            return Ok(L2Match { sigma, low_mean, high_mean });
        }
        if low_mean > best.0 {
            best = (low_mean, sigma);
        }
    }
    Err(Error::Unmatched {
        target: high_mean,
        best: best.0,
        best_sigma: best.1,
    })
}

fn accuracy_of(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Fraction of the images still classified as `label` after corruption.
pub fn corrupted_accuracy(
    model: &ModelBundle,
    images: &dyn ImageSource,
    items: &[(String, SoftMask)],
    label: usize,
    spec: &CorruptionSpec,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = items
        .par_iter()
        .map(|(id, mask)| {
            let image = images.load(id)?;
            let x = corrupt(id, image.view(), mask, spec)?;
            Ok(model.predict(id, x.view())? == label)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(accuracy_of(&hits))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDrop {
    pub standard_accuracy: f64,
    pub corrupted_accuracy: f64,
    /// `corrupted − standard`
    pub drop: f64,
}

/// Accuracy on D(i, j) before and after corrupting each image with its own mask.
pub fn feature_drop(
    model: &ModelBundle,
    images: &dyn ImageSource,
    subset: &FeatureSubset,
    masks: &dyn MaskSource,
    spec: &CorruptionSpec,
) -> Result<FeatureDrop> {
    let items = subset_masks(subset, masks)?;
    let label = subset.class_index;
    let standard = corrupted_accuracy(model, images, &items, label, &CorruptionSpec { sigma: 0.0, ..*spec })?;
    let corrupted = corrupted_accuracy(model, images, &items, label, spec)?;
    Ok(FeatureDrop {
        standard_accuracy: standard,
        corrupted_accuracy: corrupted,
        drop: corrupted - standard,
    })
}

/// acc^(C)(i) when given DS(i), acc^(S)(i) when given DC(i).
pub fn class_accuracy_under_corruption(
    model: &ModelBundle,
    images: &dyn ImageSource,
    union: &ClassUnion,
    spec: &CorruptionSpec,
) -> Result<f64> {
    if union.is_empty() {
        return Err(Error::EmptySubset(format!("{:?} union of class {}", union.kind, union.class_index)));
    }
    corrupted_accuracy(model, images, &union_masks(union), union.class_index, spec)
}

/// Everything the sweep needs about one feature subset.
#[derive(Debug, Clone)]
pub struct FeatureInput {
    pub feature_index: usize,
    pub verdict: Verdict,
    pub items: MaskedImages,
}

#[derive(Debug, Clone)]
pub struct ClassInput {
    pub class_index: usize,
    pub spurious: ClassUnion,
    pub causal: ClassUnion,
    pub features: Vec<FeatureInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub clip: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sigmas: DEFAULT_SWEEP.to_vec(),
            seed: DEFAULT_SEED,
            clip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub sigma: f64,
    pub corrupted_accuracy: f64,
    pub drop: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature_index: usize,
    pub verdict: Verdict,
    pub subset_size: usize,
    pub standard_accuracy: f64,
    pub points: Vec<FeaturePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_index: usize,
    pub spurious_union_size: usize,
    pub causal_union_size: usize,
    /// Standard accuracy on DS(i); absent when DS(i) is empty.
    pub standard_accuracy_spurious: Option<f64>,
    /// Standard accuracy on DC(i); absent when DC(i) is empty.
    pub standard_accuracy_causal: Option<f64>,
    /// acc^(C)(i) per σ of the grid.
    pub causal_accuracy: Option<Vec<f64>>,
    /// acc^(S)(i) per σ of the grid.
    pub spurious_accuracy: Option<Vec<f64>>,
    pub features: Vec<FeatureReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub sigma: f64,
    /// Mean acc^(C)(i) over classes with nonempty DS(i).
    pub causal_accuracy: Option<f64>,
    /// Mean acc^(S)(i) over classes with nonempty DC(i).
    pub spurious_accuracy: Option<f64>,
    /// Mean of acc^(C)(i) minus standard accuracy on DS(i): corrupting spurious regions.
    pub spurious_region_drop: Option<f64>,
    /// Mean of acc^(S)(i) minus standard accuracy on DC(i): corrupting causal regions.
    pub causal_region_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub seed: u64,
    pub clip: bool,
    pub sigmas: Vec<f64>,
    pub classes: Vec<ClassReport>,
    pub aggregate: Vec<AggregatePoint>,
    pub skipped: Vec<SkippedClass>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn class(&self, class_index: usize) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class_index == class_index)
    }
}

fn union_curve(
    model: &ModelBundle,
    images: &dyn ImageSource,
    union: &ClassUnion,
    config: &SweepConfig,
) -> Result<Option<(f64, Vec<f64>)>> {
    if union.is_empty() {
        return Ok(None);
    }
    let items = union_masks(union);
    let spec = |sigma| CorruptionSpec { sigma, seed: config.seed, clip: config.clip };
    let standard = corrupted_accuracy(model, images, &items, union.class_index, &spec(0.0))?;
    let curve = config
        .sigmas
        .iter()
        .map(|&s| corrupted_accuracy(model, images, &items, union.class_index, &spec(s)))
        .collect::<Result<_>>()?;
    Ok(Some((standard, curve)))
}

fn evaluate_class(
    model: &ModelBundle,
    images: &dyn ImageSource,
    input: &ClassInput,
    config: &SweepConfig,
) -> Result<ClassReport> {
    let (c, _, _) = model.image_shape();
    let causal = union_curve(model, images, &input.spurious, config)?;
    let spurious = union_curve(model, images, &input.causal, config)?;
    let features = input
        .features
        .iter()
        .map(|f| {
            let spec = |sigma| CorruptionSpec { sigma, seed: config.seed, clip: config.clip };
            let standard = corrupted_accuracy(model, images, &f.items, input.class_index, &spec(0.0))?;
            let points = config
                .sigmas
                .iter()
                .map(|&sigma| {
                    let acc = corrupted_accuracy(model, images, &f.items, input.class_index, &spec(sigma))?;
                    Ok(FeaturePoint {
                        sigma,
                        corrupted_accuracy: acc,
                        drop: acc - standard,
                        mean_l2: mean_l2_perturbation(&f.items, sigma, config.seed, c)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(FeatureReport {
                feature_index: f.feature_index,
                verdict: f.verdict,
                subset_size: f.items.len(),
                standard_accuracy: standard,
                points,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClassReport {
        class_index: input.class_index,
        spurious_union_size: input.spurious.members.len(),
        causal_union_size: input.causal.members.len(),
        standard_accuracy_spurious: causal.as_ref().map(|c| c.0),
        standard_accuracy_causal: spurious.as_ref().map(|s| s.0),
        causal_accuracy: causal.map(|c| c.1),
        spurious_accuracy: spurious.map(|s| s.1),
        features,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates every class over the σ grid. Classes that fail or have nothing to
/// evaluate are listed in [`EvaluationReport::skipped`].
pub fn sigma_sweep(
    model: &ModelBundle,
    images: &dyn ImageSource,
    classes: &[ClassInput],
    config: &SweepConfig,
) -> Result<EvaluationReport> {
    for &sigma in &config.sigmas {
        CorruptionSpec { sigma, seed: config.seed, clip: config.clip }.validate()?;
    }
    let results: Vec<(usize, Result<ClassReport>)> = classes
        .par_iter()
        .map(|input| (input.class_index, evaluate_class(model, images, input, config)))
        .collect();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (class_index, result) in results {
        match result {
            Ok(report) => {
                if report.causal_accuracy.is_none() {
                    skipped.push(SkippedClass {
                        class_index,
                        reason: "no spurious features: DS(i) is empty, causal accuracy undefined".into(),
                    });
                }
                if report.spurious_accuracy.is_none() {
                    skipped.push(SkippedClass {
                        class_index,
                        reason: "no causal features: DC(i) is empty, spurious accuracy undefined".into(),
                    });
                }
                reports.push(report);
            }
            Err(e) => skipped.push(SkippedClass {
                class_index,
                reason: e.to_string(),
            }),
        }
    }
    reports.sort_by_key(|r| r.class_index);
    skipped.sort_by(|a, b| a.class_index.cmp(&b.class_index).then_with(|| a.reason.cmp(&b.reason)));
    let aggregate = config
        .sigmas
        .iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let with_causal = || reports.iter().filter_map(|r| Some((r.causal_accuracy.as_ref()?[k], r.standard_accuracy_spurious?)));
            let with_spurious = || reports.iter().filter_map(|r| Some((r.spurious_accuracy.as_ref()?[k], r.standard_accuracy_causal?)));
            AggregatePoint {
                sigma,
                causal_accuracy: mean(with_causal().map(|(a, _)| a)),
                spurious_accuracy: mean(with_spurious().map(|(a, _)| a)),
                spurious_region_drop: mean(with_causal().map(|(a, s)| a - s)),
                causal_region_drop: mean(with_spurious().map(|(a, s)| a - s)),
            }
        })
        .collect();
    Ok(EvaluationReport {
        model_id: model.identifier.clone(),
        seed: config.seed,
        clip: config.clip,
        sigmas: config.sigmas.clone(),
        classes: reports,
        aggregate,
        skipped,
    })
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::EPSILON);
        MARGIN + (x - self.x.0) / span * (PLOT_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::EPSILON);
        PLOT_H - MARGIN - (y - self.y.0) / span * (PLOT_H - 2.0 * MARGIN)
    }
}

fn svg_plot(title: &str, y_label: &str, axes: &Axes, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, PLOT_W / 2.0);
    let (x0, x1) = (axes.px(axes.x.0), axes.px(axes.x.1));
    let (y0, y1) = (axes.py(axes.y.0), axes.py(axes.y.1));
    let _ = writeln!(s, r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = axes.x.0 + t * (axes.x.1 - axes.x.0);
        let yv = axes.y.0 + t * (axes.y.1 - axes.y.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
            axes.px(xv),
            y0 + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            x0 - 6.0,
            axes.py(yv) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">σ</text>"#, PLOT_W / 2.0, PLOT_H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        PLOT_H / 2.0,
        PLOT_H / 2.0
    );
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", axes.px(x), axes.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#,
            PLOT_W - MARGIN + 4.0 - 120.0,
            MARGIN + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn sigma_range(sigmas: &[f64]) -> (f64, f64) {
    let lo = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Mean accuracy drop against σ, one curve per corrupted region kind.
pub fn drop_plot_svg(report: &EvaluationReport) -> String {
    let curve = |f: fn(&AggregatePoint) -> Option<f64>| -> Vec<(f64, f64)> {
        report.aggregate.iter().filter_map(|p| Some((p.sigma, f(p)?))).collect()
    };
    let series = vec![
        ("spurious regions".to_string(), curve(|p| p.spurious_region_drop)),
        ("causal regions".to_string(), curve(|p| p.causal_region_drop)),
    ];
    let low = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(0.0_f64, f64::min)
        .min(-0.05);
    let axes = Axes {
        x: sigma_range(&report.sigmas),
        y: (low, 0.0),
    };
    svg_plot(&format!("{}: accuracy drop", report.model_id), "drop", &axes, &series)
}

/// Causal accuracy acc^(C)(i) against σ, one curve per class.
pub fn class_accuracy_plot_svg(report: &EvaluationReport) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = report
        .classes
        .iter()
        .filter_map(|c| {
            let acc = c.causal_accuracy.as_ref()?;
            Some((format!("class {}", c.class_index), report.sigmas.iter().copied().zip(acc.iter().copied()).collect()))
        })
        .collect();
    let axes = Axes {
        x: sigma_range(&report.sigmas),
        y: (0.0, 1.0),
    };
    svg_plot(&format!("{}: causal accuracy", report.model_id), "accuracy", &axes, &series)
}

/// Per-class drops keyed by feature, at one σ of the report grid.
pub fn feature_drops_at(report: &EvaluationReport, class_index: usize, sigma: f64) -> BTreeMap<usize, f64> {
    report
        .class(class_index)
        .map(|c| {
            c.features
                .iter()
                .filter_map(|f| f.points.iter().find(|p| p.sigma == sigma).map(|p| (f.feature_index, p.drop)))
                .collect()
        })
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn spec(sigma: f64) -> CorruptionSpec {
        CorruptionSpec::new(sigma, 7).unwrap()
    }

    #[test]
    fn sigma_zero_and_zero_mask_are_identity() {
        let image = array![[[0.1, -0.0], [0.5, 1.0]], [[0.0, 0.3], [0.2, 0.9]]];
        let m = SoftMask::new(Array2::from_elem((2, 2), 0.7), None, "a").unwrap();
        let out = corrupt("a", image.view(), &m, &spec(0.0)).unwrap();
        assert!(out.iter().zip(image.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let zero = SoftMask::zeros((2, 2), None, "a");
        let out = corrupt("a", image.view(), &zero, &spec(3.0)).unwrap();
        assert!(out.iter().zip(image.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn single_pixel_matches_first_draw() {
        let image = array![[[0.5]]];
        let m = SoftMask::new(array![[1.0]], None, "px").unwrap();
        let out = corrupt("px", image.view(), &m, &spec(0.25)).unwrap();
        let mut rng = noise_rng(7, "px");
        let z: f64 = StandardNormal.sample(&mut rng);
        assert_eq!(out[[0, 0, 0]] - 0.5, 0.25 * z);
    }

    #[test]
    fn noise_depends_on_seed_and_id_only() {
        let a = noise(1, "x", (3, 4, 4));
        assert_eq!(a, noise(1, "x", (3, 4, 4)));
        assert_ne!(a, noise(2, "x", (3, 4, 4)));
        assert_ne!(a, noise(1, "y", (3, 4, 4)));
    }

    #[test]
    fn mask_broadcasts_across_channels() {
        let m = SoftMask::new(array![[1.0, 0.0]], None, "b").unwrap();
        let d = perturbation(&m, &spec(1.0), "b", 3);
        for c in 0..3 {
            assert_ne!(d[[c, 0, 0]], 0.0);
            assert_eq!(d[[c, 0, 1]], 0.0);
        }
    }

    #[test]
    fn clipping_is_optional() {
        let image = Array3::from_elem((1, 8, 8), 0.5);
        let m = SoftMask::new(Array2::ones((8, 8)), None, "c").unwrap();
        let free = corrupt("c", image.view(), &m, &spec(5.0)).unwrap();
        assert!(free.iter().any(|&v| !(0.0..=1.0).contains(&v)));
        let clipped = corrupt("c", image.view(), &m, &CorruptionSpec { clip: true, ..spec(5.0) }).unwrap();
        assert!(clipped.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CorruptionSpec::new(-0.1, 0).is_err());
        assert!(CorruptionSpec::new(f64::NAN, 0).is_err());
        let image = Array3::zeros((3, 2, 2));
        let m = SoftMask::zeros((3, 2), None, "d");
        assert!(corrupt("d", image.view(), &m, &spec(1.0)).is_err());
    }

    #[test]
    fn l2_is_linear_in_sigma() {
        let items = vec![
            ("p".to_string(), SoftMask::new(array![[0.2, 1.0], [0.5, 0.0]], None, "p").unwrap()),
            ("q".to_string(), SoftMask::new(array![[0.9, 0.1], [0.3, 0.6]], None, "q").unwrap()),
        ];
        let a = mean_l2_perturbation(&items, 0.25, 3, 3).unwrap();
        let b = mean_l2_perturbation(&items, 0.5, 3, 3).unwrap();
        assert_eq!(b, 2.0 * a);
        let c = mean_l2_perturbation(&items, 0.3, 3, 3).unwrap();
        assert!(a < c && c < b);
    }

    #[test]
    fn identical_subsets_match_at_first_grid_value() {
        let items = vec![("p".to_string(), SoftMask::new(array![[0.2, 1.0]], None, "p").unwrap())];
        let m = match_l2_sigma(&items, &items, 0.25, &DEFAULT_MATCH_GRID, 0, 3).unwrap();
        assert_eq!(m.sigma, 0.30);
    }

    #[test]
    fn unmatched_reports_both_means() {
        let low = vec![("p".to_string(), SoftMask::new(Array2::from_elem((4, 4), 0.01), None, "p").unwrap())];
        let high = vec![("q".to_string(), SoftMask::new(Array2::ones((4, 4)), None, "q").unwrap())];
        match match_l2_sigma(&low, &high, 0.25, &DEFAULT_MATCH_GRID, 0, 3) {
            Err(Error::Unmatched { target, best, best_sigma }) => {
                assert!(best < target);
                assert_eq!(best_sigma, 0.60);
            }
            other => panic!("expected unmatched, got {other:?}"),
        }
        assert!(match_l2_sigma(&high, &low, 0.25, &DEFAULT_MATCH_GRID, 0, 3).is_err());
    }
}
