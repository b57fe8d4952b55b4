//! Layer-structured classifiers and their parameter vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::seed::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Image(usize, usize, usize),
    Flat(usize),
}

/// A feed-forward classifier over `(C, H, W)` inputs ending in a linear
/// layer with `classes` outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureSpec", into = "ArchitectureSpec")]
pub struct Architecture {
    input: [usize; 3],
    classes: usize,
    layers: Vec<Layer>,
    param_shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureSpec {
    input: [usize; 3],
    classes: usize,
    layers: Vec<Layer>,
}

impl TryFrom<ArchitectureSpec> for Architecture {
    type Error = Error;

    fn try_from(s: ArchitectureSpec) -> Result<Self> {
        Architecture::new(s.input, s.classes, s.layers)
    }
}

impl From<Architecture> for ArchitectureSpec {
    fn from(a: Architecture) -> Self {
        ArchitectureSpec {
            input: a.input,
            classes: a.classes,
            layers: a.layers,
        }
    }
}

fn arch_err(msg: String) -> Error {
    Error::Architecture(msg)
}

/// Propagates the activation shape through `layers`, collecting parameter
/// shapes on the way.
fn walk(input: [usize; 3], layers: &[Layer]) -> Result<(Activation, Vec<Vec<usize>>)> {
    let mut act = Activation::Image(input[0], input[1], input[2]);
    let mut param_shapes = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        act = match (*layer, act) {
            (
                Layer::Conv2d { in_channels, out_channels, kernel, stride, padding },
                Activation::Image(c, h, w),
            ) => {
                if c != in_channels || kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(arch_err(format!("layer {i}: conv expects {in_channels} channels, got {c}")));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(arch_err(format!("layer {i}: kernel {kernel} larger than padded {h}x{w}")));
                }
                param_shapes.push(vec![out_channels, in_channels, kernel, kernel]);
                param_shapes.push(vec![out_channels]);
                Activation::Image(
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                )
            }
            (Layer::AvgPool2d { kernel, stride }, Activation::Image(c, h, w)) => {
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(arch_err(format!("layer {i}: pool {kernel}/{stride} on {h}x{w}")));
                }
                Activation::Image(c, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
            }
            (Layer::Flatten, Activation::Image(c, h, w)) => Activation::Flat(c * h * w),
            (Layer::Flatten, flat) => flat,
            (Layer::Relu, a) => a,
            (Layer::Linear { in_features, out_features }, Activation::Flat(n)) => {
                if n != in_features || out_features == 0 {
                    return Err(arch_err(format!("layer {i}: linear expects {in_features} features, got {n}")));
                }
                param_shapes.push(vec![out_features, in_features]);
                param_shapes.push(vec![out_features]);
                Activation::Flat(out_features)
            }
            (layer, a) => {
                return Err(arch_err(format!("layer {i}: {layer:?} cannot follow activation {a:?}")));
            }
        };
    }
    Ok((act, param_shapes))
}

impl Architecture {
    pub fn new(input: [usize; 3], classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if input.iter().any(|&d| d == 0) || classes == 0 {
            return Err(arch_err(format!("input {input:?} with {classes} classes")));
        }
        let (_, param_shapes) = walk(input, &layers)?;
        match layers.last() {
            Some(Layer::Linear { out_features, .. }) if *out_features == classes => {}
            _ => return Err(arch_err(format!("final layer must be linear with {classes} outputs"))),
        }
        Ok(Architecture { input, classes, layers, param_shapes })
    }

    /// Conv/ReLU/pool feature extractor followed by a two-layer head, with the
    /// flatten width derived from `input`.
    fn two_conv(input: [usize; 3], widths: [usize; 3], classes: usize) -> Result<Self> {
        let features = vec![
            Layer::Conv2d { in_channels: input[0], out_channels: widths[0], kernel: 3, stride: 1, padding: 1 },
            Layer::Relu,
            Layer::AvgPool2d { kernel: 2, stride: 2 },
            Layer::Conv2d { in_channels: widths[0], out_channels: widths[1], kernel: 1, stride: 1, padding: 1 },
            Layer::Relu,
            Layer::AvgPool2d { kernel: 2, stride: 2 },
            Layer::Flatten,
        ];
        let flat = match walk(input, &features)?.0 {
            Activation::Flat(n) => n,
            Activation::Image(c, h, w) => c * h * w,
        };
        let mut layers = features;
        layers.extend([
            Layer::Linear { in_features: flat, out_features: widths[2] },
            Layer::Relu,
            Layer::Linear { in_features: widths[2], out_features: classes },
        ]);
        Architecture::new(input, classes, layers)
    }

    /// The FEMNIST network: 32x32x3 input, 62 classes.
    pub fn femnist() -> Self {
        Self::two_conv([3, 32, 32], [32, 64, 100], 62).expect("valid FEMNIST architecture")
    }

    /// The CIFAR100 network: 32x32x3 input, 100 classes.
    pub fn cifar100() -> Self {
        Self::two_conv([3, 32, 32], [64, 128, 200], 100).expect("valid CIFAR100 architecture")
    }

    /// Flatten, one hidden ReLU layer, linear head.
    pub fn mlp(input: [usize; 3], hidden: usize, classes: usize) -> Result<Self> {
        let d = input.iter().product();
        Architecture::new(
            input,
            classes,
            vec![
                Layer::Flatten,
                Layer::Linear { in_features: d, out_features: hidden },
                Layer::Relu,
                Layer::Linear { in_features: hidden, out_features: classes },
            ],
        )
    }

    /// Resolves `femnist`, `cifar100` or `mlp:<C>x<H>x<W>:<hidden>:<classes>`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "femnist" => Ok(Self::femnist()),
            "cifar100" => Ok(Self::cifar100()),
            _ => {
                let parts: Vec<&str> = name.split(':').collect();
                let bad = || Error::Config(format!("unknown architecture `{name}`"));
                if parts.len() != 4 || parts[0] != "mlp" {
                    return Err(bad());
                }
                let dims: Vec<usize> = parts[1].split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(bad());
                }
                let hidden = parts[2].parse().map_err(|_| bad())?;
                let classes = parts[3].parse().map_err(|_| bad())?;
                Self::mlp([dims[0], dims[1], dims[2]], hidden, classes)
            }
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shapes of all weight and bias tensors, in flattening order.
    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Offset of the final linear weight `[K, n_{L-1}]` in the flat vector,
    /// and its shape.
    pub fn last_weight_slot(&self) -> (usize, usize, usize) {
        let n = self.param_shapes.len();
        let offset = self.param_shapes[..n - 2].iter().map(|s| s.iter().product::<usize>()).sum();
        let w = &self.param_shapes[n - 2];
        (offset, w[0], w[1])
    }
}

/// Weight and bias tensors of an [`Architecture`], flattened layer by layer
/// (weight before bias) into a single vector view.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let ok = tensors.len() == arch.param_shapes.len()
            && tensors.iter().zip(&arch.param_shapes).all(|(t, s)| t.shape() == &s[..]);
        if !ok {
            return Err(arch_err("parameter tensors do not match the architecture".into()));
        }
        Ok(Parameters { tensors })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(arch_err(format!("expected {} parameters, got {}", arch.param_count(), flat.len())));
        }
        let mut offset = 0;
        let tensors = arch
            .param_shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Parameters { tensors })
    }

    /// Registers every tensor as a graph leaf.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Parameters {
    let mut rng = SeedStream::new(seed).derive("init").rng();
    let tensors = arch
        .param_shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            Tensor::new(shape.clone(), data).expect("shape matches data")
        })
        .collect();
    Parameters { tensors }
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub probs: Var,
    /// Input to the final linear layer, `f_{L-1}(x)`.
    pub penultimate: Var,
    /// Batch-mean cross-entropy.
    pub loss: Var,
}

/// Runs `batch` (`[N, C, H, W]`) through the network.
pub fn forward(g: &mut Graph, arch: &Architecture, params: &[Var], batch: Var, labels: &[usize]) -> Result<ForwardTrace> {
    let (logits, penultimate) = logits(g, arch, params, batch)?;
    let probs = g.softmax(logits)?;
    let loss = g.cross_entropy(logits, labels)?;
    Ok(ForwardTrace { logits, probs, penultimate, loss })
}

/// Logits and penultimate activations without the loss.
pub fn logits(g: &mut Graph, arch: &Architecture, params: &[Var], batch: Var) -> Result<(Var, Var)> {
    let shape = g.shape(batch)?.to_vec();
    if shape.len() != 4 || shape[1..] != arch.input[..] {
        return Err(arch_err(format!("batch shape {shape:?} does not match input {:?}", arch.input)));
    }
    if params.len() != arch.param_shapes.len() {
        return Err(arch_err("wrong number of parameter tensors".into()));
    }
    let mut h = batch;
    let mut p = 0;
    let mut penultimate = batch;
    let last = arch.layers.len() - 1;
    for (i, layer) in arch.layers.iter().enumerate() {
        h = match *layer {
            Layer::Conv2d { stride, padding, .. } => {
                let y = g.conv2d(h, params[p], None, stride, padding)?;
                let c = g.shape(params[p + 1])?[0];
                let b = g.reshape(params[p + 1], &[c, 1, 1])?;
                p += 2;
                g.add(y, b)?
            }
            Layer::Relu => g.relu(h)?,
            Layer::AvgPool2d { kernel, stride } => g.avg_pool2d(h, kernel, stride)?,
            Layer::Flatten => g.flatten_rows(h)?,
            Layer::Linear { .. } => {
                if i == last {
                    penultimate = h;
                }
                let y = g.linear(h, params[p], Some(params[p + 1]))?;
                p += 2;
                y
            }
        };
    }
    Ok((h, penultimate))
}

/// Per-class sums `Δ_k W_FC` of the loss gradient on the final weight rows.
pub fn last_layer_grad_sums(g: &mut Graph, trace: &ForwardTrace, params: &[Var]) -> Result<Vec<f64>> {
    let w = params[params.len() - 2];
    let gw = g.grad(trace.loss, &[w])?[0];
    let t = g.value(gw)?;
    let cols = t.shape()[1];
    Ok(t.data().chunks(cols).map(|row| row.iter().sum()).collect())
}

/// Row sums of the final-weight block of a flat update vector.
pub fn last_layer_sums_from_flat(arch: &Architecture, flat: &[f64]) -> Vec<f64> {
    let (offset, k, n) = arch.last_weight_slot();
    flat[offset..offset + k * n].chunks(n).map(|row| row.iter().sum()).collect()
}
