use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use super::FeatureNetwork;

/// Features that are affine functions of the input, each with a 1x1 "map".
///
/// Used as an analytically tractable reference: the input gradient of feature
/// `j` is the constant row `weights[j]`.
#[derive(Debug, Clone)]
pub struct LinearNetwork {
    input_shape: (usize, usize, usize),
    /// `(F, C*H*W)`
    weights: Array2<f64>,
    bias: Array1<f64>,
    head_weights: Array2<f64>,
    head_bias: Array1<f64>,
}

impl LinearNetwork {
    pub fn new(
        input_shape: (usize, usize, usize),
        weights: Array2<f64>,
        bias: Array1<f64>,
        head_weights: Array2<f64>,
        head_bias: Array1<f64>,
    ) -> Self {
        let (c, h, w) = input_shape;
        assert_eq!(weights.ncols(), c * h * w, "weights must cover the flattened input");
        assert_eq!(weights.nrows(), bias.len());
        LinearNetwork {
            input_shape,
            weights,
            bias,
            head_weights,
            head_bias,
        }
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }
}

impl FeatureNetwork for LinearNetwork {
    fn feature_count(&self) -> usize {
        self.weights.nrows()
    }

    fn num_classes(&self) -> usize {
        self.head_weights.nrows()
    }

    fn head_weights(&self) -> ArrayView2<'_, f64> {
        self.head_weights.view()
    }

    fn head_bias(&self) -> ArrayView1<'_, f64> {
        self.head_bias.view()
    }

    fn map_size(&self, _input_size: (usize, usize)) -> (usize, usize) {
        (1, 1)
    }

    fn feature_maps(&self, input: ArrayView3<f64>) -> Array3<f64> {
        let flat = input.iter().copied().collect::<Array1<f64>>();
        let values = self.weights.dot(&flat) + &self.bias;
        values.into_shape_with_order((self.feature_count(), 1, 1)).unwrap()
    }

    fn backprop_feature_maps(
        &self,
        _input: ArrayView3<f64>,
        seed: ArrayView3<f64>,
    ) -> Option<Array3<f64>> {
        let seed = seed.iter().copied().collect::<Array1<f64>>();
        let grad = self.weights.t().dot(&seed);
        Some(grad.into_shape_with_order(self.input_shape).unwrap())
    }
}
