//! Sequential network container, the `.lrp.json` model format and the
//! forward pass.
//!
//! The format is a single JSON object:
//!
//! ```json
//! {"format_version": 1, "input_shape": [1, 28, 28], "input_low": -1.0,
//!  "input_high": 1.0, "class_count": 10, "metadata": {"name": "conv2"},
//!  "layers": [{"type": "dense", "weights": {"shape": [..], "data": [..]},
//!              "bias": {"shape": [..], "data": [..]}}, ...]}
//! ```
//!
//! Layer `type`s are `dense`, `conv2d`, `batchnorm`, `relu`, `maxpool`,
//! `avgpool` and `flatten`. There is no softmax: the last layer emits logits.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{check_finite, check_shape, BnParams, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Fully connected layer, `weights` shaped `[out, in]`.
///
/// The input may have any shape with `in` elements (it is read in flatten
/// order). The output is `[out]` unless `output_shape` restores a spatial
/// layout, which is how lowered convolutions keep feeding image layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weights: Tensor,
    bias: Tensor,
    output_shape: Option<Vec<usize>>,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Dimension(format!(
                "dense weights must be rank 2 [out, in], got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::Dimension(format!(
                "dense bias {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        Ok(Dense {
            weights,
            bias,
            output_shape: None,
        })
    }

    pub fn with_output_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.out_features() {
            return Err(Error::Dimension(format!(
                "output shape {shape:?} does not hold {} features",
                self.out_features()
            )));
        }
        self.output_shape = if shape.len() == 1 { None } else { Some(shape) };
        Ok(self)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn output_shape(&self) -> Option<&[usize]> {
        self.output_shape.as_deref()
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    fn out_shape(&self) -> Vec<usize> {
        self.output_shape
            .clone()
            .unwrap_or_else(|| vec![self.out_features()])
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let x = if input.rank() == 1 {
            input.clone()
        } else {
            kernels::flatten(input)?
        };
        let y = kernels::dense_forward(&self.weights, &self.bias, &x)?;
        match &self.output_shape {
            Some(s) => y.reshape(s.clone()),
            None => Ok(y),
        }
    }
}

/// 2-D convolution (cross-correlation), kernel `[oc, ic, kh, kw]`, one bias
/// per output channel, symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::Dimension(format!(
                "conv kernel must be rank 4 [oc, ic, kh, kw], got {:?}",
                kernel.shape()
            )));
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(Error::Dimension(format!(
                "conv bias {:?} does not match kernel {:?}",
                bias.shape(),
                kernel.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv stride must be >= 1".into()));
        }
        Ok(Conv2d {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<[usize; 3]> {
        kernels::conv2d_output_shape(self.kernel.shape(), input_shape, self.stride, self.padding)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        kernels::conv2d_forward(&self.kernel, &self.bias, input, self.stride, self.padding)
    }
}

/// Where a batch-norm sits relative to the activation; decides which linear
/// neighbour it folds into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Linear -> BN -> ReLU: folds into the preceding layer.
    BeforeActivation,
    /// ReLU -> BN -> Linear: folds into the following layer.
    AfterActivation,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::BeforeActivation => "before_activation",
            Placement::AfterActivation => "after_activation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm {
        params: BnParams,
        placement: Option<Placement>,
        /// Treated as relevance-identity by the explainer.
        bypass: bool,
    },
    Relu,
    MaxPool {
        window: [usize; 2],
        stride: usize,
    },
    AvgPool {
        window: [usize; 2],
        stride: usize,
    },
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    /// Symbolic shape propagation.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let mismatch =
            |expected: String| Error::Dimension(format!("expected {expected}, got {input:?}"));
        match self {
            Layer::Dense(d) => {
                if numel != d.in_features() {
                    return Err(mismatch(format!("{} input features", d.in_features())));
                }
                Ok(d.out_shape())
            }
            Layer::Conv2d(c) => Ok(c.output_shape(input)?.to_vec()),
            Layer::BatchNorm { params, .. } => {
                if params.len() != input[0] && params.len() != numel {
                    return Err(mismatch(format!("{} channels or elements", params.len())));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
                Ok(kernels::pool_output_shape(input, *window, *stride)?.to_vec())
            }
            Layer::Flatten => Ok(vec![numel]),
        }
    }

    /// Returns the output and, for max pooling, the winning input indices.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
        Ok(match self {
            Layer::Dense(d) => (d.forward(input)?, None),
            Layer::Conv2d(c) => (c.forward(input)?, None),
            Layer::BatchNorm { params, .. } => (kernels::batchnorm_forward(params, input)?, None),
            Layer::Relu => (kernels::relu(input)?, None),
            Layer::MaxPool { window, stride } => {
                let (y, arg) = kernels::maxpool(input, *window, *stride)?;
                (y, Some(arg))
            }
            Layer::AvgPool { window, stride } => (kernels::avgpool(input, *window, *stride)?, None),
            Layer::Flatten => (kernels::flatten(input)?, None),
        })
    }
}

/// Ordered layer list plus input bounds; always shape-consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    input_low: f64,
    input_high: f64,
    class_count: usize,
    metadata: Map<String, Value>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        input_low: f64,
        input_high: f64,
        class_count: usize,
    ) -> Result<Self> {
        Network::with_metadata(
            layers,
            input_shape,
            input_low,
            input_high,
            class_count,
            Map::new(),
        )
    }

    pub fn with_metadata(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        input_low: f64,
        input_high: f64,
        class_count: usize,
        metadata: Map<String, Value>,
    ) -> Result<Self> {
        check_shape(&input_shape).map_err(|e| Error::Schema(format!("input_shape: {e}")))?;
        if !(input_low.is_finite() && input_high.is_finite() && input_low < input_high) {
            return Err(Error::Value(format!(
                "input bounds must be finite with low < high, got [{input_low}, {input_high}]"
            )));
        }
        if class_count == 0 {
            return Err(Error::Value("class_count must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (i, layer) in layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = layer.output_shape(cur).map_err(|e| match e {
                Error::Dimension(msg) => Error::Shape {
                    layer: i,
                    expected: format!("input compatible with {} layer", layer.kind()),
                    actual: msg,
                },
                other => other.at_layer(i),
            })?;
            shapes.push(next);
        }
        let last = shapes.last().unwrap();
        if last != &[class_count] {
            return Err(Error::Shape {
                layer: layers.len().saturating_sub(1),
                expected: format!("[{class_count}] logits"),
                actual: format!("{last:?}"),
            });
        }
        Ok(Network {
            layers,
            input_shape,
            input_low,
            input_high,
            class_count,
            metadata,
            shapes,
        })
    }

    /// Same bounds, class count and metadata around a new layer list.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        Network::with_metadata(
            layers,
            self.input_shape.clone(),
            self.input_low,
            self.input_high,
            self.class_count,
            self.metadata.clone(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_low(&self) -> f64 {
        self.input_low
    }

    pub fn input_high(&self) -> f64 {
        self.input_high
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.metadata
    }

    pub fn name(&self) -> Option<&str> {
        self.metadata.get("name").and_then(Value::as_str)
    }

    /// Activation shape at every position: entry 0 is the input, entry `i+1`
    /// the output of layer `i`.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut argmaxes = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, arg) = layer
                .forward(activations.last().unwrap())
                .map_err(|e| e.at_layer(i))?;
            activations.push(y);
            argmaxes.push(arg);
        }
        Ok(ForwardPass {
            activations,
            argmaxes,
        })
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.activations.pop().unwrap())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawNetwork = serde_json::from_str(s).map_err(json_error)?;
        raw.into_network()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&RawNetwork::from_network(self))
            .expect("network serialization cannot fail");
        s.push('\n');
        s
    }
}

/// Activations retained for relevance propagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor>,
    /// Winning input indices for max-pool layers, `None` elsewhere.
    pub argmaxes: Vec<Option<Vec<usize>>>,
}

impl ForwardPass {
    /// Pre-softmax class scores.
    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

/// Maps raw pixel values in `[0, 255]` to `[-1, 1]` via `((x / 255) - 0.5) / 0.5`.
pub fn normalize_pixels(raw: &Tensor) -> Result<Tensor> {
    if let Some(v) = raw.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Value(format!("pixel value {v} outside [0, 255]")));
    }
    raw.map(|x| ((x / 255.0) - 0.5) / 0.5)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_json_str(&text)
}

pub fn save_model(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, network.to_json_string()).map_err(|e| Error::io(path, e))
}

fn json_error(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => Error::Schema(e.to_string()),
        Category::Io => Error::Schema(e.to_string()),
        Category::Syntax | Category::Eof => Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    }
}

// Wire representation. Kept free of validation so that errors can be reported
// with layer indices and proper categories after parsing.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    format_version: u32,
    input_shape: Vec<usize>,
    input_low: f64,
    input_high: f64,
    class_count: usize,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    metadata: Map<String, Value>,
    layers: Vec<RawLayer>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBn {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mu_run: Vec<f64>,
    sigma_run: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawLayer {
    Dense {
        weights: RawTensor,
        bias: RawTensor,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_shape: Option<Vec<usize>>,
    },
    Conv2d {
        kernel: RawTensor,
        bias: RawTensor,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        params: RawBn,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        placement: Option<Placement>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        bypass: bool,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        window: [usize; 2],
        stride: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        window: [usize; 2],
        stride: usize,
    },
    Flatten,
}

impl RawTensor {
    fn into_tensor(self, what: &str) -> Result<Tensor> {
        check_finite(&self.data, what)?;
        Tensor::new(self.shape, self.data).map_err(|e| match e {
            Error::Dimension(m) => Error::Schema(format!("{what}: {m}")),
            other => other,
        })
    }

    fn from_tensor(t: &Tensor) -> Self {
        RawTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

fn check_window(window: [usize; 2], stride: usize) -> Result<()> {
    if window.contains(&0) || stride == 0 {
        return Err(Error::Geometry(format!(
            "pool window {window:?} and stride {stride} must be >= 1"
        )));
    }
    Ok(())
}

impl RawLayer {
    fn into_layer(self) -> Result<Layer> {
        Ok(match self {
            RawLayer::Dense {
                weights,
                bias,
                output_shape,
            } => {
                let d = Dense::new(weights.into_tensor("weights")?, bias.into_tensor("bias")?)?;
                match output_shape {
                    Some(s) => Layer::Dense(d.with_output_shape(s)?),
                    None => Layer::Dense(d),
                }
            }
            RawLayer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(
                kernel.into_tensor("kernel")?,
                bias.into_tensor("bias")?,
                stride,
                padding,
            )?),
            RawLayer::BatchNorm {
                params,
                placement,
                bypass,
            } => Layer::BatchNorm {
                params: BnParams::new(params.gamma, params.beta, params.mu_run, params.sigma_run)?,
                placement,
                bypass,
            },
            RawLayer::Relu => Layer::Relu,
            RawLayer::MaxPool { window, stride } => {
                check_window(window, stride)?;
                Layer::MaxPool { window, stride }
            }
            RawLayer::AvgPool { window, stride } => {
                check_window(window, stride)?;
                Layer::AvgPool { window, stride }
            }
            RawLayer::Flatten => Layer::Flatten,
        })
    }

    fn from_layer(layer: &Layer) -> Self {
        match layer {
            Layer::Dense(d) => RawLayer::Dense {
                weights: RawTensor::from_tensor(d.weights()),
                bias: RawTensor::from_tensor(d.bias()),
                output_shape: d.output_shape().map(<[usize]>::to_vec),
            },
            Layer::Conv2d(c) => RawLayer::Conv2d {
                kernel: RawTensor::from_tensor(c.kernel()),
                bias: RawTensor::from_tensor(c.bias()),
                stride: c.stride(),
                padding: c.padding(),
            },
            Layer::BatchNorm {
                params,
                placement,
                bypass,
            } => RawLayer::BatchNorm {
                params: RawBn {
                    gamma: params.gamma().to_vec(),
                    beta: params.beta().to_vec(),
                    mu_run: params.mu_run().to_vec(),
                    sigma_run: params.sigma_run().to_vec(),
                },
                placement: *placement,
                bypass: *bypass,
            },
            Layer::Relu => RawLayer::Relu,
            Layer::MaxPool { window, stride } => RawLayer::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::AvgPool { window, stride } => RawLayer::AvgPool {
                window: *window,
                stride: *stride,
            },
            Layer::Flatten => RawLayer::Flatten,
        }
    }
}

impl RawNetwork {
    fn into_network(self) -> Result<Network> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.into_layer().map_err(|e| e.at_layer(i)))
            .collect::<Result<Vec<_>>>()?;
        Network::with_metadata(
            layers,
            self.input_shape,
            self.input_low,
            self.input_high,
            self.class_count,
            self.metadata,
        )
    }

    fn from_network(n: &Network) -> Self {
        RawNetwork {
            format_version: FORMAT_VERSION,
            input_shape: n.input_shape.clone(),
            input_low: n.input_low,
            input_high: n.input_high,
            class_count: n.class_count,
            metadata: n.metadata.clone(),
            layers: n.layers.iter().map(RawLayer::from_layer).collect(),
        }
    }
}
