//! Neural activation maps, heatmap overlays and the feature attack.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::imageio::{decode_mask_png, encode_mask_png, Image};
use crate::model::ModelBundle;
use crate::{Error, Result};

/// Per-pixel weights in `[0, 1]` locating a visual attribute in one image.
///
/// Masks produced by [`neural_activation_map`] span exactly `[0, 1]` unless the
/// source channel was constant, in which case they are all zero and flagged
/// degenerate. Combined masks carry no single source feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    values: Array2<f64>,
    pub source_feature: Option<usize>,
    pub source_image: String,
    degenerate: bool,
}

impl SoftMask {
    pub fn new(
        values: Array2<f64>,
        source_feature: Option<usize>,
        source_image: impl Into<String>,
    ) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::DimensionMismatch(format!(
                "mask value {bad} outside [0, 1]"
            )));
        }
        let degenerate = values.iter().all(|&v| v == 0.0);
        Ok(SoftMask {
            values,
            source_feature,
            source_image: source_image.into(),
            degenerate,
        })
    }

    pub fn zeros(dim: (usize, usize), source_feature: Option<usize>, source_image: impl Into<String>) -> Self {
        SoftMask {
            values: Array2::zeros(dim),
            source_feature,
            source_image: source_image.into(),
            degenerate: true,
        }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// `(height, width)`
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// True for the all-zero mask of a featureless channel.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_mask_png(self.values.view())
    }

    pub fn from_png(bytes: &[u8], source_feature: Option<usize>, source_image: impl Into<String>) -> Result<Self> {
        SoftMask::new(decode_mask_png(bytes)?, source_feature, source_image)
    }
}

/// Min-max normalizes to `[0, 1]`; `None` for a constant input.
pub fn min_max_normalize(values: ArrayView2<f64>) -> Option<Array2<f64>> {
    let min = values.fold(f64::INFINITY, |a, &b| a.min(b));
    let max = values.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return None;
    }
    Some(values.mapv(|v| ((v - min) / range).clamp(0.0, 1.0)))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(values: ArrayView2<f64>, (out_h, out_w): (usize, usize)) -> Array2<f64> {
    let (in_h, in_w) = values.dim();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = values[[y0, x0]] * (1.0 - fx) + values[[y0, x1]] * fx;
        let bottom = values[[y1, x0]] * (1.0 - fx) + values[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Neural activation map of `feature` for one image's `(F, h', w')` feature maps.
///
/// The channel is min-max normalized, bilinearly resized to `target`, and
/// normalized once more so interpolation cannot shave the extremes off (unless
/// the resize flattened it, as for a `1 x 1` target). A constant channel yields
/// the degenerate all-zero mask.
pub fn neural_activation_map(
    feature_maps: ArrayView3<f64>,
    feature: usize,
    target: (usize, usize),
    image_id: &str,
) -> Result<SoftMask> {
    let count = feature_maps.len_of(Axis(0));
    if feature >= count {
        return Err(Error::FeatureOutOfRange {
            index: feature,
            feature_count: count,
        });
    }
    let channel = feature_maps.index_axis(Axis(0), feature);
    let Some(normalized) = min_max_normalize(channel) else {
        return Ok(SoftMask::zeros(target, Some(feature), image_id));
    };
    let resized = resize_bilinear(normalized.view(), target);
    let values = min_max_normalize(resized.view()).unwrap_or(resized);
    SoftMask::new(values, Some(feature), image_id)
}

/// The jet colormap as a piecewise-linear function of `v` in `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let ramp = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Colors the mask with [`jet`], adds the image, and divides by the global maximum.
pub fn heatmap_overlay(image: ArrayView3<f64>, mask: &SoftMask) -> Result<Image> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::DimensionMismatch(format!(
            "heatmap needs a 3-channel image, got {c}"
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mut out = Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        jet(mask.values[[y, x]])[ch] + image[[ch, y, x]]
    });
    let max = out.fold(0.0f64, |a, &b| a.max(b));
    if max > 0.0 {
        out.mapv_inplace(|v| v / max);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub step_size: f64,
    pub iterations: usize,
    /// Radius of the pixel-space l2 ball the cumulative perturbation is kept in.
    pub rho: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            step_size: 40.0,
            iterations: 25,
            rho: 500.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.rho > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attack needs step_size > 0 and rho > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn l2(values: &Array3<f64>) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradient ascent on one pooled feature.
///
/// Each step moves along the l2-normalized input gradient, projects the
/// cumulative perturbation onto the `rho` ball and clips pixels to `[0, 1]`.
/// The best iterate is returned, so the feature never ends below its start.
pub fn feature_attack(
    model: &ModelBundle,
    image: ArrayView3<f64>,
    feature: usize,
    config: &AttackConfig,
) -> Result<Image> {
    config.validate()?;
    if !model.gradients_available() {
        return Err(Error::GradientsUnavailable(model.identifier.clone()));
    }
    let original = image.to_owned();
    let mut best = original.clone();
    let mut best_value = model.feature_value(image, feature)?;
    let mut delta = Array3::<f64>::zeros(original.dim());
    for _ in 0..config.iterations {
        let current = &original + &delta;
        let grad = model.input_gradient(current.view(), feature)?;
        let norm = l2(&grad);
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        delta.scaled_add(config.step_size / norm, &grad);
        let size = l2(&delta);
        if size > config.rho {
            delta.mapv_inplace(|d| d * config.rho / size);
        }
        // clipping toward the original only shrinks |delta|, so the ball still holds
        ndarray::Zip::from(&mut delta)
            .and(&original)
            .for_each(|d, &x| *d = (x + *d).clamp(0.0, 1.0) - x);
        let candidate = &original + &delta;
        let value = model.feature_value(candidate.view(), feature)?;
        if value > best_value {
            best_value = value;
            best = candidate;
        }
    }
    Ok(best)
}
