//! Layer definitions: forward evaluation and exact analytic gradients.
//!
//! Inputs and activations are NCHW. Convolution is cross-correlation (no
//! kernel flip) with zero padding; output spatial dims follow
//! `floor((in + 2*pad - k)/stride) + 1`. Max-pool ties resolve to the first
//! maximum in row-major window scan order, and the backward pass routes the
//! gradient to exactly that element.

use super::tensor::Tensor;
use super::NnError;

/// A network layer with its parameters inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        /// [out_channels, in_channels, kernel_h, kernel_w]
        kernel: Tensor,
        /// [out_channels]
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Dense {
        /// [out_features, in_features]
        weight: Tensor,
        /// [out_features]
        bias: Tensor,
    },
    /// Adds the output of an earlier layer (by index) to this layer's input.
    ResidualAdd {
        source: usize,
    },
    Sigmoid,
}

/// Forward side-information consumed by the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    None,
    /// Flat input index of each pooled maximum, one per output element.
    PoolArgmax(Vec<usize>),
}

/// Parameter gradients for layers that have parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients flowing out of one layer's backward pass.
#[derive(Debug)]
pub struct BackwardResult {
    pub input_grad: Tensor,
    /// Present only for ResidualAdd: gradient for the skip source output.
    pub skip_grad: Option<Tensor>,
    pub params: Option<LayerGrads>,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::ResidualAdd { .. } => "residual_add",
            Layer::Sigmoid => "sigmoid",
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d { kernel, bias, .. } => Some((kernel, bias)),
            Layer::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d { kernel, bias, .. } => Some((kernel, bias)),
            Layer::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Output shape for a given input shape (and, for ResidualAdd, the skip
    /// source shape). Errors name both shapes.
    pub fn output_shape(
        &self,
        input: &[usize],
        skip: Option<&[usize]>,
    ) -> Result<Vec<usize>, NnError> {
        let mismatch = |context: &str, rhs: Vec<usize>| NnError::Shape {
            context: format!("{} {context}", self.kind_name()),
            lhs: input.to_vec(),
            rhs,
        };
        match self {
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let ks = kernel.shape();
                if input.len() != 4 || input[1] != ks[1] {
                    return Err(mismatch("input vs kernel", ks.to_vec()));
                }
                let (h, w) = (input[2], input[3]);
                let (kh, kw) = (ks[2], ks[3]);
                if h + 2 * padding < kh || w + 2 * padding < kw {
                    return Err(mismatch("kernel larger than padded input", ks.to_vec()));
                }
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                Ok(vec![input[0], ks[0], oh, ow])
            }
            Layer::MaxPool2d { size, stride } => {
                if input.len() != 4 || input[2] < *size || input[3] < *size {
                    return Err(mismatch("pool window", vec![*size, *size]));
                }
                let oh = (input[2] - size) / stride + 1;
                let ow = (input[3] - size) / stride + 1;
                Ok(vec![input[0], input[1], oh, ow])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => {
                if input.len() < 2 {
                    return Err(mismatch("needs a batch dimension", input.to_vec()));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Dense { weight, .. } => {
                let ws = weight.shape();
                if input.len() != 2 || input[1] != ws[1] {
                    return Err(mismatch("input vs weight", ws.to_vec()));
                }
                Ok(vec![input[0], ws[0]])
            }
            Layer::ResidualAdd { .. } => {
                let skip = skip.expect("model supplies the skip activation shape");
                if input != skip {
                    return Err(mismatch("skip source", skip.to_vec()));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub fn forward(
        &self,
        input: &Tensor,
        skip: Option<&Tensor>,
    ) -> Result<(Tensor, LayerCache), NnError> {
        match self {
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => conv2d_forward(input, kernel, bias, *stride, *padding),
            Layer::MaxPool2d { size, stride } => maxpool_forward(input, *size, *stride),
            Layer::Relu => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok((out, LayerCache::None))
            }
            Layer::Flatten => {
                let shape = self.output_shape(input.shape(), None)?;
                Ok((input.reshaped(shape)?, LayerCache::None))
            }
            Layer::Dense { weight, bias } => dense_forward(input, weight, bias),
            Layer::ResidualAdd { .. } => {
                let skip = skip.expect("model supplies the skip activation");
                self.output_shape(input.shape(), Some(skip.shape()))?;
                Ok((input.add(skip)?, LayerCache::None))
            }
            Layer::Sigmoid => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    *v = sigmoid(*v);
                }
                Ok((out, LayerCache::None))
            }
        }
    }

    pub fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        cache: &LayerCache,
        upstream: &Tensor,
    ) -> Result<BackwardResult, NnError> {
        match self {
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => conv2d_backward(input, kernel, *stride, *padding, upstream),
            Layer::MaxPool2d { .. } => {
                let LayerCache::PoolArgmax(argmax) = cache else {
                    return Err(NnError::MissingCache("maxpool2d"));
                };
                let mut input_grad = Tensor::zeros_like(input);
                for (i, &src) in argmax.iter().enumerate() {
                    input_grad.data_mut()[src] += upstream.data()[i];
                }
                Ok(BackwardResult {
                    input_grad,
                    skip_grad: None,
                    params: None,
                })
            }
            Layer::Relu => {
                let mut input_grad = upstream.clone();
                for (g, x) in input_grad.data_mut().iter_mut().zip(input.data()) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok(BackwardResult {
                    input_grad,
                    skip_grad: None,
                    params: None,
                })
            }
            Layer::Flatten => Ok(BackwardResult {
                input_grad: upstream.reshaped(input.shape().to_vec())?,
                skip_grad: None,
                params: None,
            }),
            Layer::Dense { weight, .. } => dense_backward(input, weight, upstream),
            Layer::ResidualAdd { .. } => Ok(BackwardResult {
                input_grad: upstream.clone(),
                skip_grad: Some(upstream.clone()),
                params: None,
            }),
            Layer::Sigmoid => {
                let mut input_grad = upstream.clone();
                for (g, y) in input_grad.data_mut().iter_mut().zip(output.data()) {
                    *g *= y * (1.0 - y);
                }
                Ok(BackwardResult {
                    input_grad,
                    skip_grad: None,
                    params: None,
                })
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, LayerCache), NnError> {
    let layer_shape = Layer::Conv2d {
        kernel: kernel.clone(),
        bias: bias.clone(),
        stride,
        padding,
    }
    .output_shape(input.shape(), None)?;
    let (b, c_in, h, w) = dims4(input.shape());
    let ks = kernel.shape();
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = (layer_shape[2], layer_shape[3]);

    let x = input.data();
    let k = kernel.data();
    let mut out = Tensor::zeros(&layer_shape);
    let o = out.data_mut();
    for n in 0..b {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((n * c_in + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    o[((n * c_out + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok((out, LayerCache::None))
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    upstream: &Tensor,
) -> Result<BackwardResult, NnError> {
    let (b, c_in, h, w) = dims4(input.shape());
    let ks = kernel.shape();
    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
    let us = upstream.shape();
    let (oh, ow) = (us[2], us[3]);

    let x = input.data();
    let k = kernel.data();
    let g = upstream.data();
    let mut dk = Tensor::zeros(ks);
    let mut db = Tensor::zeros(&[c_out]);
    let mut dx = Tensor::zeros_like(input);
    for n in 0..b {
        for oc in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((n * c_out + oc) * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    db.data_mut()[oc] += gv;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((n * c_in + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                dk.data_mut()[ki] += gv * x[xi];
                                dx.data_mut()[xi] += gv * k[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(BackwardResult {
        input_grad: dx,
        skip_grad: None,
        params: Some(LayerGrads {
            weight: dk,
            bias: db,
        }),
    })
}

fn maxpool_forward(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, LayerCache), NnError> {
    let layer_shape = Layer::MaxPool2d { size, stride }.output_shape(input.shape(), None)?;
    let (b, c, h, w) = dims4(input.shape());
    let (oh, ow) = (layer_shape[2], layer_shape[3]);
    let x = input.data();
    let mut out = Tensor::zeros(&layer_shape);
    let mut argmax = vec![0usize; out.len()];
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..size {
                        for kx in 0..size {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let xi = ((n * c + ch) * h + iy) * w + ix;
                            // Strict comparison keeps the first maximum on ties.
                            if x[xi] > best {
                                best = x[xi];
                                best_idx = xi;
                            }
                        }
                    }
                    let oi = ((n * c + ch) * oh + oy) * ow + ox;
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    Ok((out, LayerCache::PoolArgmax(argmax)))
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerCache), NnError> {
    let layer_shape = Layer::Dense {
        weight: weight.clone(),
        bias: bias.clone(),
    }
    .output_shape(input.shape(), None)?;
    let (b, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    let x = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(&layer_shape);
    for n in 0..b {
        for o in 0..out_f {
            let mut acc = bias.data()[o];
            for i in 0..in_f {
                acc += x[n * in_f + i] * wt[o * in_f + i];
            }
            out.data_mut()[n * out_f + o] = acc;
        }
    }
    Ok((out, LayerCache::None))
}

fn dense_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<BackwardResult, NnError> {
    let (b, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    let x = input.data();
    let wt = weight.data();
    let g = upstream.data();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[out_f]);
    let mut dx = Tensor::zeros_like(input);
    for n in 0..b {
        for o in 0..out_f {
            let gv = g[n * out_f + o];
            db.data_mut()[o] += gv;
            for i in 0..in_f {
                dw.data_mut()[o * in_f + i] += gv * x[n * in_f + i];
                dx.data_mut()[n * in_f + i] += gv * wt[o * in_f + i];
            }
        }
    }
    Ok(BackwardResult {
        input_grad: dx,
        skip_grad: None,
        params: Some(LayerGrads {
            weight: dw,
            bias: db,
        }),
    })
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn conv(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Layer {
        Layer::Conv2d {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let input = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let layer = conv(t(&[1, 1, 1, 1], vec![1.0]), t(&[1], vec![0.0]), 1, 0);
        let (out, _) = layer.forward(&input, None).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_window_sum_example() {
        // 3x3 ramp with an all-ones 2x2 kernel: each output is a window sum.
        let input = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let layer = conv(t(&[1, 1, 2, 2], vec![1.0; 4]), t(&[1], vec![0.0]), 1, 0);
        let (out, _) = layer.forward(&input, None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_zero_kernel_yields_bias() {
        let input = t(&[1, 2, 3, 3], vec![5.0; 18]);
        let layer = conv(t(&[1, 2, 2, 2], vec![0.0; 8]), t(&[1], vec![7.5]), 1, 0);
        let (out, _) = layer.forward(&input, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn conv_padding_reaches_borders() {
        // 1x1 input with a 3x3 kernel and pad 1: only the center tap lands.
        let input = t(&[1, 1, 1, 1], vec![2.0]);
        let mut kdata = vec![0.0; 9];
        kdata[4] = 3.0;
        let layer = conv(t(&[1, 1, 3, 3], kdata), t(&[1], vec![1.0]), 1, 1);
        let (out, _) = layer.forward(&input, None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn conv_stride_shrinks_output_by_floor_rule() {
        // 5x5 input, 2x2 kernel, stride 2: floor((5-2)/2)+1 = 2.
        let input = Tensor::zeros(&[1, 1, 5, 5]);
        let layer = conv(t(&[1, 1, 2, 2], vec![1.0; 4]), t(&[1], vec![0.0]), 2, 0);
        assert_eq!(layer.output_shape(input.shape(), None).unwrap(), vec![1, 1, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(&[1, 3, 4, 4]);
        let layer = conv(Tensor::zeros(&[2, 2, 3, 3]), Tensor::zeros(&[2]), 1, 0);
        match layer.forward(&input, None).unwrap_err() {
            NnError::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![1, 3, 4, 4]);
                assert_eq!(rhs, vec![2, 2, 3, 3]);
            }
            other => panic!("expected shape error, got {other}"),
        }
    }

    #[test]
    fn maxpool_takes_window_maxima() {
        let input = t(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 3.0,
                4.0, 0.0, 1.0, 2.0,
                9.0, 8.0, 1.0, 1.0,
                7.0, 6.0, 0.0, 4.0,
            ],
        );
        let layer = Layer::MaxPool2d { size: 2, stride: 2 };
        let (out, _) = layer.forward(&input, None).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 9.0, 4.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_maximum() {
        let input = t(&[1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]);
        let layer = Layer::MaxPool2d { size: 2, stride: 2 };
        let (out, cache) = layer.forward(&input, None).unwrap();
        assert_eq!(out.data(), &[5.0]);
        let upstream = t(&[1, 1, 1, 1], vec![1.0]);
        let back = layer.backward(&input, &out, &cache, &upstream).unwrap();
        assert_eq!(back.input_grad.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_accumulates_overlapping_windows() {
        // Stride 1 windows overlap; the shared max receives both gradients.
        let input = t(&[1, 1, 2, 3], vec![1.0, 9.0, 2.0, 0.0, 3.0, 1.0]);
        let layer = Layer::MaxPool2d { size: 2, stride: 1 };
        let (out, cache) = layer.forward(&input, None).unwrap();
        assert_eq!(out.data(), &[9.0, 9.0]);
        let upstream = t(&[1, 1, 1, 2], vec![1.0, 1.0]);
        let back = layer.backward(&input, &out, &cache, &upstream).unwrap();
        assert_eq!(back.input_grad.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let input = t(&[4], vec![-1.0, 0.0, 0.5, 2.0]);
        let layer = Layer::Relu;
        let (out, cache) = layer.forward(&input, None).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.5, 2.0]);
        let upstream = t(&[4], vec![1.0; 4]);
        let back = layer.backward(&input, &out, &cache, &upstream).unwrap();
        assert_eq!(back.input_grad.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn dense_known_product() {
        // x = [1, 2], W = [[1, 2], [3, 4], [0, -1]], b = [0.5, 0, 1].
        let input = t(&[1, 2], vec![1.0, 2.0]);
        let layer = Layer::Dense {
            weight: t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0]),
            bias: t(&[3], vec![0.5, 0.0, 1.0]),
        };
        let (out, _) = layer.forward(&input, None).unwrap();
        assert_eq!(out.data(), &[5.5, 11.0, -1.0]);
    }

    #[test]
    fn residual_add_sums_and_copies_gradient_to_both_paths() {
        let input = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let skip = t(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]);
        let layer = Layer::ResidualAdd { source: 0 };
        let (out, cache) = layer.forward(&input, Some(&skip)).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 33.0, 44.0]);
        let upstream = t(&[2, 2], vec![1.0, 0.5, -1.0, 2.0]);
        let back = layer.backward(&input, &out, &cache, &upstream).unwrap();
        assert_eq!(back.input_grad.data(), upstream.data());
        assert_eq!(back.skip_grad.unwrap().data(), upstream.data());
    }

    #[test]
    fn residual_add_rejects_mismatched_skip() {
        let input = t(&[2, 2], vec![0.0; 4]);
        let skip = t(&[4], vec![0.0; 4]);
        let layer = Layer::ResidualAdd { source: 0 };
        assert!(layer.forward(&input, Some(&skip)).is_err());
    }

    #[test]
    fn sigmoid_values_and_stability() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
        // Extreme inputs stay finite and saturate.
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 0.001);
    }

    #[test]
    fn flatten_round_trips_through_backward() {
        let input = t(&[2, 2, 2, 2], (0..16).map(|v| v as f64).collect());
        let layer = Layer::Flatten;
        let (out, cache) = layer.forward(&input, None).unwrap();
        assert_eq!(out.shape(), &[2, 8]);
        let back = layer.backward(&input, &out, &cache, &out).unwrap();
        assert_eq!(back.input_grad.shape(), input.shape());
        assert_eq!(back.input_grad.data(), input.data());
    }

    #[test]
    fn zero_upstream_produces_zero_gradients() {
        let input = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let layer = conv(t(&[1, 1, 2, 2], vec![1.0; 4]), t(&[1], vec![0.0]), 1, 0);
        let (out, cache) = layer.forward(&input, None).unwrap();
        let upstream = Tensor::zeros(out.shape());
        let back = layer.backward(&input, &out, &cache, &upstream).unwrap();
        assert!(back.input_grad.data().iter().all(|&v| v == 0.0));
        let params = back.params.unwrap();
        assert!(params.weight.data().iter().all(|&v| v == 0.0));
        assert!(params.bias.data().iter().all(|&v| v == 0.0));
    }
}
