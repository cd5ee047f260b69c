//! Model assembly, initialization, forward/backward orchestration, and the
//! checkpoint file format.
//!
//! # Checkpoint format (version 1)
//!
//! A single binary file:
//!
//! ```text
//! bytes 0..4    magic "FMCK"
//! bytes 4..8    format version, u32 little-endian (currently 1)
//! bytes 8..12   header length H, u32 little-endian
//! bytes 12..12+H  header: UTF-8 JSON {input_shape, layers, arrays}
//! bytes 12+H..  parameter payload: f64 little-endian values, arrays
//!               concatenated in header order
//! ```
//!
//! `layers` holds the [`LayerSpec`] list (hyperparameters only); `arrays`
//! lists `{name, shape}` for every parameter tensor, named
//! `layer<i>.weight` / `layer<i>.bias`. The encoding is stable: readers
//! reject unknown magic or versions rather than guessing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerCache, LayerGrads};
use super::tensor::Tensor;
use super::NnError;

/// Architecture description: hyperparameters without weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { size: usize, stride: usize },
    Relu,
    Flatten,
    Dense { units: usize },
    /// Adds the output of the layer at `source` (0-based index into the
    /// layer list, strictly before this layer) to this layer's input.
    ResidualAdd { source: usize },
    Sigmoid,
}

/// A feed-forward stack over NCHW tensors. The input shape is per-sample
/// `[channels, height, width]`; the batch dimension is free.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

/// Cached activations from one forward pass. `activations[0]` is the input;
/// `activations[i + 1]` is the output of layer `i`.
#[derive(Debug)]
pub struct ForwardPass {
    activations: Vec<Tensor>,
    caches: Vec<LayerCache>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("forward always has activations")
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }
}

/// Per-layer parameter gradients (None for parameterless layers) plus the
/// gradient with respect to the network input.
#[derive(Debug)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrads>>,
    pub input: Tensor,
}

impl Model {
    /// He-normal initialization: weights ~ N(0, sqrt(2 / fan_in)), biases
    /// zero, drawn from a ChaCha stream seeded by `seed` in layer order.
    pub fn init(input_shape: [usize; 3], specs: &[LayerSpec], seed: u64) -> Result<Model, NnError> {
        let mut model = Model::with_zero_params(input_shape, specs)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let fan_in = match layer {
                Layer::Conv2d { kernel, .. } => {
                    let s = kernel.shape();
                    s[1] * s[2] * s[3]
                }
                Layer::Dense { weight, .. } => weight.shape()[1],
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std is finite and positive");
            if let Some((weight, _bias)) = layer.params_mut() {
                for v in weight.data_mut() {
                    *v = dist.sample(&mut rng);
                }
            }
        }
        Ok(model)
    }

    /// Build the layer stack with zeroed parameters, validating that all
    /// shapes compose for a batch-of-one input.
    pub fn with_zero_params(input_shape: [usize; 3], specs: &[LayerSpec]) -> Result<Model, NnError> {
        let mut layers = Vec::with_capacity(specs.len());
        // shapes[i] is the input shape of layer i (batch 1).
        let mut shapes: Vec<Vec<usize>> = vec![vec![1, input_shape[0], input_shape[1], input_shape[2]]];
        for (index, spec) in specs.iter().enumerate() {
            let current = shapes[index].clone();
            let layer = match spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if current.len() != 4 {
                        return Err(layer_err(index, "conv2d", "input is not NCHW"));
                    }
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(layer_err(index, "conv2d", "kernel, stride, and channels must be positive"));
                    }
                    Layer::Conv2d {
                        kernel: Tensor::zeros(&[*out_channels, current[1], *kernel, *kernel]),
                        bias: Tensor::zeros(&[*out_channels]),
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::MaxPool2d { size, stride } => {
                    if *size == 0 || *stride == 0 {
                        return Err(layer_err(index, "maxpool2d", "size and stride must be positive"));
                    }
                    Layer::MaxPool2d {
                        size: *size,
                        stride: *stride,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { units } => {
                    if current.len() != 2 {
                        return Err(layer_err(index, "dense", "input must be flattened first"));
                    }
                    if *units == 0 {
                        return Err(layer_err(index, "dense", "units must be positive"));
                    }
                    Layer::Dense {
                        weight: Tensor::zeros(&[*units, current[1]]),
                        bias: Tensor::zeros(&[*units]),
                    }
                }
                LayerSpec::ResidualAdd { source } => {
                    if *source >= index {
                        return Err(layer_err(
                            index,
                            "residual_add",
                            &format!("source {source} must name an earlier layer"),
                        ));
                    }
                    Layer::ResidualAdd { source: *source }
                }
                LayerSpec::Sigmoid => Layer::Sigmoid,
            };
            let skip_shape = match &layer {
                Layer::ResidualAdd { source } => Some(shapes[source + 1].clone()),
                _ => None,
            };
            let out = layer.output_shape(&current, skip_shape.as_deref())?;
            shapes.push(out);
            layers.push(layer);
        }
        Ok(Model {
            input_shape,
            layers,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Recover the hyperparameter description of the current stack.
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => LayerSpec::Conv2d {
                    out_channels: kernel.shape()[0],
                    kernel: kernel.shape()[2],
                    stride: *stride,
                    padding: *padding,
                },
                Layer::MaxPool2d { size, stride } => LayerSpec::MaxPool2d {
                    size: *size,
                    stride: *stride,
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::Flatten => LayerSpec::Flatten,
                Layer::Dense { weight, .. } => LayerSpec::Dense {
                    units: weight.shape()[0],
                },
                Layer::ResidualAdd { source } => LayerSpec::ResidualAdd { source: *source },
                Layer::Sigmoid => LayerSpec::Sigmoid,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        let s = input.shape();
        let expected = &self.input_shape;
        if s.len() != 4 || s[1] != expected[0] || s[2] != expected[1] || s[3] != expected[2] {
            return Err(NnError::Shape {
                context: "model input (expected [batch, c, h, w])".to_string(),
                lhs: s.to_vec(),
                rhs: vec![0, expected[0], expected[1], expected[2]],
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass, NnError> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let skip = match layer {
                Layer::ResidualAdd { source } => Some(&activations[source + 1]),
                _ => None,
            };
            // Non-finite values are allowed to flow through; the training
            // loop detects them as divergence rather than panicking here.
            let (out, cache) = layer.forward(&activations[i], skip)?;
            activations.push(out);
            caches.push(cache);
        }
        Ok(ForwardPass {
            activations,
            caches,
        })
    }

    /// Reverse-mode sweep. `upstream` is dL/d(output); activation gradients
    /// accumulate, so residual fan-in sums correctly.
    pub fn backward(&self, fwd: &ForwardPass, upstream: &Tensor) -> Result<Gradients, NnError> {
        if upstream.shape() != fwd.output().shape() {
            return Err(NnError::Shape {
                context: "upstream gradient vs model output".to_string(),
                lhs: upstream.shape().to_vec(),
                rhs: fwd.output().shape().to_vec(),
            });
        }
        let n = self.layers.len();
        let mut act_grads: Vec<Tensor> = fwd.activations.iter().map(Tensor::zeros_like).collect();
        act_grads[n].add_assign(upstream)?;
        let mut layer_grads: Vec<Option<LayerGrads>> = Vec::with_capacity(n);
        layer_grads.resize_with(n, || None);
        for i in (0..n).rev() {
            let up = act_grads[i + 1].clone();
            let result = self.layers[i].backward(&fwd.activations[i], &fwd.activations[i + 1], &fwd.caches[i], &up)?;
            act_grads[i].add_assign(&result.input_grad)?;
            if let Some(skip_grad) = result.skip_grad {
                let Layer::ResidualAdd { source } = self.layers[i] else {
                    unreachable!("only residual layers return skip gradients");
                };
                act_grads[source + 1].add_assign(&skip_grad)?;
            }
            layer_grads[i] = result.params;
        }
        Ok(Gradients {
            layers: layer_grads,
            input: act_grads.swap_remove(0),
        })
    }

    /// Forward a batch and return per-sample probabilities. The stack must
    /// end in a single unit (output shape `[batch, 1]`).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<f64>, NnError> {
        let fwd = self.forward(batch)?;
        let out = fwd.output();
        if out.shape().len() != 2 || out.shape()[1] != 1 {
            return Err(NnError::Shape {
                context: "classifier output (expected [batch, 1])".to_string(),
                lhs: out.shape().to_vec(),
                rhs: vec![batch.shape()[0], 1],
            });
        }
        Ok(out.data().to_vec())
    }
}

fn layer_err(index: usize, kind: &'static str, message: &str) -> NnError {
    NnError::Layer {
        index,
        kind,
        message: message.to_string(),
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    arrays: Vec<ArrayDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct ArrayDescriptor {
    name: String,
    shape: Vec<usize>,
}

/// Serialize the model to the versioned checkpoint format.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), NnError> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Some((weight, bias)) = layer.params() {
            for (suffix, tensor) in [("weight", weight), ("bias", bias)] {
                arrays.push(ArrayDescriptor {
                    name: format!("layer{i}.{suffix}"),
                    shape: tensor.shape().to_vec(),
                });
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let header = CheckpointHeader {
        input_shape: model.input_shape(),
        layers: model.specs(),
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;

    let mut file = Vec::with_capacity(12 + header_bytes.len() + payload.len());
    file.extend_from_slice(CHECKPOINT_MAGIC);
    file.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    file.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    file.extend_from_slice(&header_bytes);
    file.extend_from_slice(&payload);
    std::fs::write(path, file).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a checkpoint written by [`save_checkpoint`]. Round-trips are
/// bit-exact: every weight is restored to its original f64 pattern.
pub fn load_checkpoint(path: &Path) -> Result<Model, NnError> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: &str| NnError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(bad("file too short for header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic (not a model checkpoint)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| bad(&format!("header parse failure: {e}")))?;

    let mut model = Model::with_zero_params(header.input_shape, &header.layers)?;
    let mut offset = 12 + header_len;
    let mut descriptors = header.arrays.iter();
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        if let Some((weight, bias)) = layer.params_mut() {
            for (suffix, tensor) in [("weight", &mut *weight), ("bias", bias)] {
                let descriptor = descriptors
                    .next()
                    .ok_or_else(|| bad("array list shorter than parameter list"))?;
                let expected_name = format!("layer{i}.{suffix}");
                if descriptor.name != expected_name || descriptor.shape != tensor.shape() {
                    return Err(bad(&format!(
                        "array {} {:?} does not match layer parameter {expected_name} {:?}",
                        descriptor.name,
                        descriptor.shape,
                        tensor.shape()
                    )));
                }
                let n_bytes = tensor.len() * 8;
                if bytes.len() < offset + n_bytes {
                    return Err(bad("truncated parameter payload"));
                }
                for (j, v) in tensor.data_mut().iter_mut().enumerate() {
                    let at = offset + j * 8;
                    *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                }
                offset += n_bytes;
            }
        }
    }
    if descriptors.next().is_some() {
        return Err(bad("array list longer than parameter list"));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameter payload"));
    }
    Ok(model)
}
