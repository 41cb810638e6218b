//! A small softplus CNN: a stack of 3x3 convolutions, global average pooling
//! and a linear head. Forward and backward passes are written out by hand so
//! the model needs nothing beyond `ndarray`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out, in, kernel, kernel)`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Valid output columns `[lo, hi)` for kernel offset `k` along an axis of length `n`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - padding <= n - 1
    let hi = if n + padding > k {
        ((n + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl ConvLayer {
    pub fn output_size(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    fn forward(&self, input: &[f64], (h, w): (usize, usize)) -> Vec<f64> {
        let (oh, ow) = self.output_size((h, w));
        let (s, p) = (self.stride, self.padding);
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    let (ylo, yhi) = valid_range(h, oh, ky, s, p);
                    for kx in 0..self.kernel {
                        let wt = self.weights[self.weight_index(o, i, ky, kx)];
                        let (xlo, xhi) = valid_range(w, ow, kx, s, p);
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in xlo..xhi {
                                dst[ox] += wt * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient (empty unless `input_grad`); accumulates
    /// parameter gradients when given.
    fn backward(
        &self,
        input: &[f64],
        (h, w): (usize, usize),
        dout: &[f64],
        mut params: Option<(&mut [f64], &mut [f64])>,
        input_grad: bool,
    ) -> Vec<f64> {
        let (oh, ow) = self.output_size((h, w));
        let (s, p) = (self.stride, self.padding);
        let mut din = vec![0.0; if input_grad { self.in_channels * h * w } else { 0 }];
        for o in 0..self.out_channels {
            let dplane = &dout[o * oh * ow..(o + 1) * oh * ow];
            if let Some((_, db)) = params.as_mut() {
                db[o] += dplane.iter().sum::<f64>();
            }
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    let (ylo, yhi) = valid_range(h, oh, ky, s, p);
                    for kx in 0..self.kernel {
                        let widx = self.weight_index(o, i, ky, kx);
                        let wt = self.weights[widx];
                        let (xlo, xhi) = valid_range(w, ow, kx, s, p);
                        let mut dw = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                            let row = &src[iy * w..(iy + 1) * w];
                            if input_grad {
                                let dst = &mut din[(i * h + iy) * w..(i * h + iy + 1) * w];
                                for ox in xlo..xhi {
                                    dst[ox * s + kx - p] += wt * drow[ox];
                                }
                            }
                            if params.is_some() {
                                for ox in xlo..xhi {
                                    dw += drow[ox] * row[ox * s + kx - p];
                                }
                            }
                        }
                        if let Some((dweights, _)) = params.as_mut() {
                            dweights[widx] += dw;
                        }
                    }
                }
            }
        }
        din
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyCnn {
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub convs: Vec<ConvLayer>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

/// Parameter gradients with the same layout as [`TinyCnn`].
#[derive(Debug, Clone)]
pub struct TinyCnnGradients {
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl TinyCnnGradients {
    pub fn zeros_like(model: &TinyCnn) -> Self {
        TinyCnnGradients {
            convs: model
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weights.len()], vec![0.0; c.bias.len()]))
                .collect(),
            head_weights: Array2::zeros(model.head_weights.dim()),
            head_bias: Array1::zeros(model.head_bias.len()),
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in &mut self.convs {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out.push(self.head_weights.as_slice_mut().unwrap());
        out.push(self.head_bias.as_slice_mut().unwrap());
        out
    }
}

struct Trace {
    /// Input of every conv layer, with its spatial size.
    inputs: Vec<(Vec<f64>, (usize, usize))>,
    /// Pre-activation output of every conv layer.
    pre: Vec<Vec<f64>>,
    map_size: (usize, usize),
}

impl TinyCnn {
    /// Deterministic He-normal initialisation. The head starts identity-like:
    /// `head[i, j] = 1` iff `j == i % F`, with zero bias.
    pub fn new(
        seed: u64,
        input_channels: usize,
        input_size: (usize, usize),
        widths: &[usize],
        strides: &[usize],
        num_classes: usize,
    ) -> Self {
        assert_eq!(widths.len(), strides.len());
        assert!(!widths.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_c = input_channels;
        for (&out_c, &stride) in widths.iter().zip(strides) {
            let kernel = 3;
            let fan_in = (in_c * kernel * kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            let weights = (0..out_c * in_c * kernel * kernel)
                .map(|_| normal.sample(&mut rng))
                .collect();
            convs.push(ConvLayer {
                in_channels: in_c,
                out_channels: out_c,
                kernel,
                stride,
                padding: 1,
                weights,
                bias: vec![0.0; out_c],
            });
            in_c = out_c;
        }
        let features = in_c;
        let head_weights =
            Array2::from_shape_fn((num_classes, features), |(i, j)| f64::from(u8::from(j == i % features)));
        TinyCnn {
            input_channels,
            input_size,
            convs,
            head_weights,
            head_bias: Array1::zeros(num_classes),
        }
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.weights.as_mut_slice());
            out.push(c.bias.as_mut_slice());
        }
        out.push(self.head_weights.as_slice_mut().unwrap());
        out.push(self.head_bias.as_slice_mut().unwrap());
        out
    }

    fn trace(&self, input: ArrayView3<f64>) -> Trace {
        let (_, h, w) = input.dim();
        let mut x: Vec<f64> = input.iter().copied().collect();
        let mut size = (h, w);
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let z = conv.forward(&x, size);
            let next_size = conv.output_size(size);
            let act = z.iter().map(|&v| softplus(v)).collect();
            inputs.push((std::mem::replace(&mut x, act), size));
            pre.push(z);
            size = next_size;
        }
        Trace {
            inputs,
            pre,
            map_size: size,
        }
    }

    /// Pulls a gradient on the final activations back through the conv stack.
    fn backprop(
        &self,
        trace: &Trace,
        mut grad: Vec<f64>,
        mut params: Option<&mut TinyCnnGradients>,
    ) -> Vec<f64> {
        for l in (0..self.convs.len()).rev() {
            for (g, &z) in grad.iter_mut().zip(&trace.pre[l]) {
                *g *= sigmoid(z);
            }
            let (input, size) = &trace.inputs[l];
            let pg = params
                .as_mut()
                .map(|p| {
                    let (w, b) = &mut p.convs[l];
                    (w.as_mut_slice(), b.as_mut_slice())
                });
            // the input gradient of the first layer is only wanted without parameters
            let input_grad = l > 0 || pg.is_none();
            grad = self.convs[l].backward(input, *size, &grad, pg, input_grad);
        }
        grad
    }

    /// Softmax cross-entropy on one normalized input; adds parameter gradients
    /// into `grads` and returns `(loss, predicted)`.
    pub fn accumulate_gradients(
        &self,
        input: ArrayView3<f64>,
        label: usize,
        grads: &mut TinyCnnGradients,
    ) -> (f64, usize) {
        let trace = self.trace(input);
        let (mh, mw) = trace.map_size;
        let area = (mh * mw) as f64;
        let f = self.head_weights.ncols();
        let last = trace.pre.last().unwrap();
        let pooled = Array1::from_shape_fn(f, |j| {
            last[j * mh * mw..(j + 1) * mh * mw]
                .iter()
                .map(|&z| softplus(z))
                .sum::<f64>()
                / area
        });
        let logits = self.head_weights.dot(&pooled) + &self.head_bias;
        let predicted = super::argmax(logits.view());
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exp = logits.mapv(|v| (v - max).exp());
        let total = exp.sum();
        let loss = -(exp[label] / total).ln();
        let mut dlogits = exp / total;
        dlogits[label] -= 1.0;

        for (k, &d) in dlogits.iter().enumerate() {
            grads.head_bias[k] += d;
            let mut row = grads.head_weights.row_mut(k);
            row.scaled_add(d, &pooled);
        }
        let dpooled = self.head_weights.t().dot(&dlogits);
        let mut dmaps = vec![0.0; f * mh * mw];
        for j in 0..f {
            dmaps[j * mh * mw..(j + 1) * mh * mw].fill(dpooled[j] / area);
        }
        self.backprop(&trace, dmaps, Some(grads));
        (loss, predicted)
    }
}

impl FeatureNetwork for TinyCnn {
    fn feature_count(&self) -> usize {
        self.head_weights.ncols()
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

    fn map_size(&self, input_size: (usize, usize)) -> (usize, usize) {
        self.convs
            .iter()
            .fold(input_size, |size, conv| conv.output_size(size))
    }

    fn feature_maps(&self, input: ArrayView3<f64>) -> Array3<f64> {
        let trace = self.trace(input);
        let (mh, mw) = trace.map_size;
        let maps = trace.pre.last().unwrap().iter().map(|&z| softplus(z)).collect();
        Array3::from_shape_vec((self.feature_count(), mh, mw), maps).unwrap()
    }

    fn backprop_feature_maps(
        &self,
        input: ArrayView3<f64>,
        seed: ArrayView3<f64>,
    ) -> Option<Array3<f64>> {
        let trace = self.trace(input);
        let grad = self.backprop(&trace, seed.iter().copied().collect(), None);
        Some(Array3::from_shape_vec(input.dim(), grad).unwrap())
    }
}
