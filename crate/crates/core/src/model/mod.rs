//! Uniform access to a convolutional classifier's penultimate layer.
//!
//! A [`FeatureNetwork`] only has to produce the pre-pooling feature maps for a
//! normalized input and expose its linear head. Pooling, logits, argmax and
//! input normalization live in [`ModelBundle`] so every backend agrees on them.

mod linear;
mod tiny;

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use linear::LinearNetwork;
pub use tiny::{ConvLayer, TinyCnn, TinyCnnGradients};

use crate::imageio::Image;
use crate::{Error, Result};

/// Per-channel normalization applied to canonical `[0, 1]` images before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn imagenet() -> Self {
        Normalization {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn apply(&self, image: ArrayView3<f64>) -> Array3<f64> {
        let mut out = image.to_owned();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// A network that maps a normalized `(C, H, W)` input to pre-pooling feature maps
/// `(F, h', w')`, followed by global average pooling and a linear head.
pub trait FeatureNetwork: Send + Sync {
    fn feature_count(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Head weights shaped `(num_classes, feature_count)`.
    fn head_weights(&self) -> ArrayView2<'_, f64>;

    fn head_bias(&self) -> ArrayView1<'_, f64>;

    /// Spatial size `(h', w')` of the feature maps for an input of size `(h, w)`.
    fn map_size(&self, input_size: (usize, usize)) -> (usize, usize);

    fn feature_maps(&self, input: ArrayView3<f64>) -> Array3<f64>;

    /// Vector-Jacobian product: pulls `seed` (shaped like the feature maps) back to
    /// the normalized input. `None` when the backend has no gradients.
    fn backprop_feature_maps(
        &self,
        input: ArrayView3<f64>,
        seed: ArrayView3<f64>,
    ) -> Option<Array3<f64>>;

    fn gradients_available(&self) -> bool {
        true
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feature_maps: Array3<f64>,
    pub feature_vector: Array1<f64>,
    pub logits: Array1<f64>,
    pub predicted: usize,
}

#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub image_ids: Vec<String>,
    /// `(batch, F, h', w')`
    pub feature_maps: Array4<f64>,
    /// `(batch, F)`, spatial mean of `feature_maps`.
    pub feature_vectors: Array2<f64>,
    /// `(batch, num_classes)`
    pub logits: Array2<f64>,
    pub predicted: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Spatial mean of each channel of `(F, h, w)` maps.
pub fn global_average_pool(maps: ArrayView3<f64>) -> Array1<f64> {
    let (f, h, w) = maps.dim();
    let area = (h * w) as f64;
    Array1::from_shape_fn(f, |j| maps.index_axis(Axis(0), j).sum() / area)
}

/// A classifier plus the metadata needed to feed it canonical images.
#[derive(Clone)]
pub struct ModelBundle {
    pub identifier: String,
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub channels: usize,
    pub preprocessing: Normalization,
    network: Arc<dyn FeatureNetwork>,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("identifier", &self.identifier)
            .field("input_size", &self.input_size)
            .field("channels", &self.channels)
            .field("feature_count", &self.feature_count())
            .field("num_classes", &self.num_classes())
            .finish()
    }
}

impl ModelBundle {
    pub fn new(
        identifier: impl Into<String>,
        input_size: (usize, usize),
        channels: usize,
        preprocessing: Normalization,
        network: Arc<dyn FeatureNetwork>,
    ) -> Result<Self> {
        let identifier = identifier.into();
        if input_size.0 == 0 || input_size.1 == 0 || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "model `{identifier}`: input size {input_size:?} x {channels} channels"
            )));
        }
        if network.feature_count() == 0 {
            return Err(Error::InvalidConfig(format!(
                "model `{identifier}` has no features"
            )));
        }
        let head = network.head_weights();
        if head.dim() != (network.num_classes(), network.feature_count())
            || network.head_bias().len() != network.num_classes()
        {
            return Err(Error::InvalidConfig(format!(
                "model `{identifier}`: head shape {:?} does not match ({}, {})",
                head.dim(),
                network.num_classes(),
                network.feature_count()
            )));
        }
        if preprocessing.mean.len() != channels || preprocessing.std.len() != channels {
            return Err(Error::InvalidConfig(format!(
                "model `{identifier}`: normalization does not cover {channels} channels"
            )));
        }
        if preprocessing.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "model `{identifier}`: normalization std must be positive"
            )));
        }
        Ok(ModelBundle {
            identifier,
            input_size,
            channels,
            preprocessing,
            network,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.network.feature_count()
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    pub fn gradients_available(&self) -> bool {
        self.network.gradients_available()
    }

    pub fn network(&self) -> &dyn FeatureNetwork {
        self.network.as_ref()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.input_size.0, self.input_size.1)
    }

    pub fn check_image(&self, image_id: &str, image: ArrayView3<f64>) -> Result<()> {
        if image.dim() != self.image_shape() {
            return Err(Error::ShapeMismatch {
                image_id: image_id.to_string(),
                expected: self.image_shape(),
                actual: image.dim(),
            });
        }
        Ok(())
    }

    fn check_feature(&self, feature: usize) -> Result<()> {
        if feature >= self.feature_count() {
            return Err(Error::FeatureOutOfRange {
                index: feature,
                feature_count: self.feature_count(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, image_id: &str, image: ArrayView3<f64>) -> Result<Forward> {
        self.check_image(image_id, image)?;
        let input = self.preprocessing.apply(image);
        let feature_maps = self.network.feature_maps(input.view());
        let feature_vector = global_average_pool(feature_maps.view());
        let logits = self.network.head_weights().dot(&feature_vector) + self.network.head_bias();
        let predicted = argmax(logits.view());
        Ok(Forward {
            feature_maps,
            feature_vector,
            logits,
            predicted,
        })
    }

    pub fn predict(&self, image_id: &str, image: ArrayView3<f64>) -> Result<usize> {
        Ok(self.forward(image_id, image)?.predicted)
    }

    pub fn feature_value(&self, image: ArrayView3<f64>, feature: usize) -> Result<f64> {
        self.check_feature(feature)?;
        Ok(self.forward("<probe>", image)?.feature_vector[feature])
    }

    /// Runs the batch (in parallel) and stacks the results.
    pub fn extract_activations(&self, images: &[(String, Image)]) -> Result<ActivationBatch> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let forwards = images
            .par_iter()
            .map(|(id, img)| self.forward(id, img.view()))
            .collect::<Result<Vec<_>>>()?;
        let (f, mh, mw) = forwards[0].feature_maps.dim();
        let n = forwards.len();
        let mut feature_maps = Array4::zeros((n, f, mh, mw));
        let mut feature_vectors = Array2::zeros((n, f));
        let mut logits = Array2::zeros((n, self.num_classes()));
        let mut predicted = Vec::with_capacity(n);
        for (b, fw) in forwards.into_iter().enumerate() {
            feature_maps.index_axis_mut(Axis(0), b).assign(&fw.feature_maps);
            feature_vectors.row_mut(b).assign(&fw.feature_vector);
            logits.row_mut(b).assign(&fw.logits);
            predicted.push(fw.predicted);
        }
        Ok(ActivationBatch {
            image_ids: images.iter().map(|(id, _)| id.clone()).collect(),
            feature_maps,
            feature_vectors,
            logits,
            predicted,
        })
    }

    pub fn head_row(&self, class_index: usize) -> Result<Array1<f64>> {
        if class_index >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                index: class_index,
                num_classes: self.num_classes(),
            });
        }
        Ok(self.network.head_weights().row(class_index).to_owned())
    }

    /// Gradient of an arbitrary linear functional of the feature maps with respect
    /// to the canonical (un-normalized) image.
    pub fn feature_map_gradient(
        &self,
        image: ArrayView3<f64>,
        seed: ArrayView3<f64>,
    ) -> Result<Image> {
        if !self.gradients_available() {
            return Err(Error::GradientsUnavailable(self.identifier.clone()));
        }
        self.check_image("<gradient>", image)?;
        let input = self.preprocessing.apply(image);
        let mut grad = self
            .network
            .backprop_feature_maps(input.view(), seed)
            .ok_or_else(|| Error::GradientsUnavailable(self.identifier.clone()))?;
        for (c, mut plane) in grad.axis_iter_mut(Axis(0)).enumerate() {
            let s = self.preprocessing.std[c];
            plane.mapv_inplace(|g| g / s);
        }
        Ok(grad)
    }

    /// `d feature_vector[feature] / d image`.
    pub fn input_gradient(&self, image: ArrayView3<f64>, feature: usize) -> Result<Image> {
        self.check_feature(feature)?;
        if !self.gradients_available() {
            return Err(Error::GradientsUnavailable(self.identifier.clone()));
        }
        self.check_image("<gradient>", image)?;
        let (mh, mw) = self.network.map_size(self.input_size);
        let mut seed = Array3::zeros((self.feature_count(), mh, mw));
        seed.index_axis_mut(Axis(0), feature)
            .fill(1.0 / (mh * mw) as f64);
        self.feature_map_gradient(image, seed.view())
    }
}
