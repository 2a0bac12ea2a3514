//! Network definition, deterministic initialization, forward inference,
//! neuron masks, structural pruning and the model file format.
//!
//! Convolutions are lowered to dense matrices when a layer is constructed,
//! so inference, interval bounds and the MIP encoding all operate on the
//! same matrices. Maskable units are dense neurons and whole conv feature
//! maps of hidden ReLU layers; the logit layer is never maskable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::linalg::{conv_to_matrix, dot, ConvSpec, Matrix};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Activation shape: a flat vector or a `(channels, height, width)` map stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(n) => vec![n],
            Shape::Spatial {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Shape> {
        match *dims {
            [n] if n > 0 => Ok(Shape::Flat(n)),
            [channels, height, width] if channels * height * width > 0 => Ok(Shape::Spatial {
                channels,
                height,
                width,
            }),
            _ => invalid(format!("bad shape {dims:?}")),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims().iter().map(ToString::to_string).collect();
        f.write_str(&dims.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// `kernels[o * in_channels + c]`, each `kernel_h x kernel_w`.
    pub kernels: Vec<Matrix>,
    /// One bias per output feature map, added after the padded window is
    /// selected.
    pub bias: Vec<f64>,
    pub activation: Activation,
    lowered: Matrix,
    row_bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        spec: ConvSpec,
        kernels: Vec<Matrix>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if bias.len() != spec.out_channels {
            return invalid(format!(
                "conv bias has {} entries for {} maps",
                bias.len(),
                spec.out_channels
            ));
        }
        let lowered = conv_to_matrix(&kernels, &spec)?;
        let map = spec.map_len();
        let row_bias = (0..spec.output_len()).map(|r| bias[r / map]).collect();
        Ok(Self {
            spec,
            kernels,
            bias,
            activation,
            lowered,
            row_bias,
        })
    }

    /// The doubly blocked Toeplitz matrix of this layer.
    pub fn lowered(&self) -> &Matrix {
        &self.lowered
    }

    /// Bias broadcast to every output pixel.
    pub fn row_bias(&self) -> &[f64] {
        &self.row_bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    AvgPool { window: usize },
    MaxPool { window: usize },
    Flatten,
}

/// Borrowed view of an affine (dense or lowered conv) layer.
#[derive(Debug, Clone, Copy)]
pub struct Affine<'a> {
    pub weight: &'a Matrix,
    pub bias: &'a [f64],
    pub activation: Activation,
    /// Output rows per maskable unit (1 for dense, pixels per map for conv).
    pub rows_per_unit: usize,
}

impl Affine<'_> {
    pub fn unit_of_row(&self, row: usize) -> usize {
        row / self.rows_per_unit
    }

    pub fn units(&self) -> usize {
        self.weight.rows() / self.rows_per_unit
    }
}

impl Layer {
    pub fn affine(&self) -> Option<Affine<'_>> {
        match self {
            Layer::Dense(d) => Some(Affine {
                weight: &d.weight,
                bias: &d.bias,
                activation: d.activation,
                rows_per_unit: 1,
            }),
            Layer::Conv(c) => Some(Affine {
                weight: &c.lowered,
                bias: &c.row_bias,
                activation: c.activation,
                rows_per_unit: c.spec.map_len(),
            }),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::AvgPool { .. } => "avgpool",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    fn output_shape(&self, index: usize, input: Shape) -> Result<Shape> {
        let fail = |message: String| Error::Validation {
            layer: index,
            message,
        };
        match (self, input) {
            (Layer::Dense(d), Shape::Flat(n)) => {
                if d.weight.cols() != n {
                    return Err(fail(format!(
                        "dense weight has {} columns but input has {n} entries",
                        d.weight.cols()
                    )));
                }
                if d.bias.len() != d.weight.rows() {
                    return Err(fail(format!(
                        "bias has {} entries for {} neurons",
                        d.bias.len(),
                        d.weight.rows()
                    )));
                }
                Ok(Shape::Flat(d.weight.rows()))
            }
            (
                Layer::Conv(c),
                Shape::Spatial {
                    channels,
                    height,
                    width,
                },
            ) => {
                let s = &c.spec;
                if (s.in_channels, s.input_h, s.input_w) != (channels, height, width) {
                    return Err(fail(format!(
                        "conv expects {}x{}x{} input, got {channels}x{height}x{width}",
                        s.in_channels, s.input_h, s.input_w
                    )));
                }
                Ok(Shape::Spatial {
                    channels: s.out_channels,
                    height: s.output_h(),
                    width: s.output_w(),
                })
            }
            (
                Layer::AvgPool { window } | Layer::MaxPool { window },
                Shape::Spatial {
                    channels,
                    height,
                    width,
                },
            ) => {
                let k = *window;
                if k == 0 || height % k != 0 || width % k != 0 {
                    return Err(fail(format!(
                        "pool window {k} does not tile a {height}x{width} map"
                    )));
                }
                Ok(Shape::Spatial {
                    channels,
                    height: height / k,
                    width: width / k,
                })
            }
            (Layer::Flatten, s @ Shape::Spatial { .. }) => Ok(Shape::Flat(s.len())),
            (layer, shape) => Err(fail(format!(
                "{} layer cannot take input of shape {shape}",
                layer.kind()
            ))),
        }
    }
}

/// Layers of a network together with its input shape and init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Shape,
    layers: Vec<Layer>,
    seed: u64,
    shapes: Vec<Shape>,
}

impl Network {
    pub fn new(input_shape: Shape, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network has no layers");
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape;
        let last = layers.len() - 1;
        let mut hidden_relu = false;
        for (i, layer) in layers.iter().enumerate() {
            cur = layer.output_shape(i, cur)?;
            shapes.push(cur);
            if let Some(a) = layer.affine() {
                match (i == last, a.activation) {
                    (true, Activation::None) => {}
                    (true, Activation::Relu) => {
                        return Err(Error::Validation {
                            layer: i,
                            message: "the logit layer must not have an activation".into(),
                        })
                    }
                    (false, Activation::Relu) => hidden_relu = true,
                    (false, Activation::None) => {
                        return Err(Error::Validation {
                            layer: i,
                            message: "hidden affine layers must use relu".into(),
                        })
                    }
                }
            } else if i == last {
                return Err(Error::Validation {
                    layer: i,
                    message: "the last layer must be a dense logit layer".into(),
                });
            }
        }
        if !matches!(layers[last], Layer::Dense(_)) {
            return Err(Error::Validation {
                layer: last,
                message: "the last layer must be a dense logit layer".into(),
            });
        }
        if !hidden_relu {
            return invalid("network needs at least one hidden relu layer");
        }
        Ok(Self {
            input_shape,
            layers,
            seed,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn n_outputs(&self) -> usize {
        self.shapes.last().map_or(0, Shape::len)
    }

    /// Whether layer `l` has maskable units (a hidden ReLU affine layer).
    pub fn is_prunable(&self, l: usize) -> bool {
        l + 1 < self.layers.len()
            && self.layers[l]
                .affine()
                .is_some_and(|a| a.activation == Activation::Relu)
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.is_prunable(l))
            .collect()
    }

    /// Number of maskable units in layer `l` (0 if not prunable).
    pub fn units(&self, l: usize) -> usize {
        if self.is_prunable(l) {
            self.layers[l].affine().map_or(0, |a| a.units())
        } else {
            0
        }
    }

    pub fn prunable_units(&self) -> usize {
        (0..self.layers.len()).map(|l| self.units(l)).sum()
    }

    /// Total number of trainable parameters.
    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.rows() * d.weight.cols() + d.bias.len(),
                Layer::Conv(c) => {
                    c.kernels.len() * c.spec.kernel_h * c.spec.kernel_w + c.bias.len()
                }
                _ => 0,
            })
            .sum()
    }

    /// Recomputes cached lowered matrices after in-place parameter edits.
    pub(crate) fn relower(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Layer::Conv(c) = layer {
                *c = ConvLayer::new(c.spec, c.kernels.clone(), c.bias.clone(), c.activation)?;
            }
        }
        Ok(())
    }
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Pre-activation values of affine layers; the output itself for
    /// pooling and flatten layers.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation values (after masking).
    pub post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.post.last().map_or(&[], Vec::as_slice)
    }
}

/// Average of each `window x window` tile, per channel.
pub(crate) fn avg_pool(x: &[f64], shape: Shape, window: usize) -> Vec<f64> {
    pool_with(x, shape, window, |vals| {
        vals.iter().sum::<f64>() / vals.len() as f64
    })
}

pub(crate) fn max_pool(x: &[f64], shape: Shape, window: usize) -> Vec<f64> {
    pool_with(x, shape, window, |vals| {
        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    })
}

/// Flat input indices feeding each pooled output, in output order.
pub(crate) fn pool_windows(shape: Shape, window: usize) -> Vec<Vec<usize>> {
    let Shape::Spatial {
        channels,
        height,
        width,
    } = shape
    else {
        return Vec::new();
    };
    let (oh, ow) = (height / window, width / window);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut idx = Vec::with_capacity(window * window);
                for a in 0..window {
                    for b in 0..window {
                        idx.push(c * height * width + (i * window + a) * width + j * window + b);
                    }
                }
                out.push(idx);
            }
        }
    }
    out
}

fn pool_with(x: &[f64], shape: Shape, window: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = Vec::with_capacity(window * window);
    pool_windows(shape, window)
        .iter()
        .map(|idx| {
            buf.clear();
            buf.extend(idx.iter().map(|&i| x[i]));
            f(&buf)
        })
        .collect()
}

/// Runs the network on `x`. Masked units output exactly zero after their
/// activation.
pub fn forward(net: &Network, x: &[f64], mask: Option<&Mask>) -> Result<Trace> {
    if x.len() != net.input_len() {
        return invalid(format!(
            "input has {} entries, network expects {}",
            x.len(),
            net.input_len()
        ));
    }
    if let Some(m) = mask {
        m.check(net)?;
    }
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    let mut in_shape = net.input_shape;
    for (l, layer) in net.layers.iter().enumerate() {
        let input: &[f64] = post.last().map_or(x, Vec::as_slice);
        let (z, mut h) = match layer {
            Layer::Dense(_) | Layer::Conv(_) => {
                let a = layer.affine().expect("affine layer");
                let z: Vec<f64> = (0..a.weight.rows())
                    .map(|r| dot(a.weight.row(r), input) + a.bias[r])
                    .collect();
                let h = match a.activation {
                    Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                    Activation::None => z.clone(),
                };
                (z, h)
            }
            Layer::AvgPool { window } => {
                let h = avg_pool(input, in_shape, *window);
                (h.clone(), h)
            }
            Layer::MaxPool { window } => {
                let h = max_pool(input, in_shape, *window);
                (h.clone(), h)
            }
            Layer::Flatten => (input.to_vec(), input.to_vec()),
        };
        if let Some(units) = mask.and_then(|m| m.layer(l)) {
            let per = layer.affine().map_or(1, |a| a.rows_per_unit);
            for (r, v) in h.iter_mut().enumerate() {
                if units[r / per] {
                    *v = 0.0;
                }
            }
        }
        pre.push(z);
        post.push(h);
        in_shape = net.shapes[l];
    }
    Ok(Trace { pre, post })
}

/// Convenience wrapper returning only the logits.
pub fn predict(net: &Network, x: &[f64], mask: Option<&Mask>) -> Result<Vec<f64>> {
    Ok(forward(net, x, mask)?.post.pop().unwrap_or_default())
}

/// Per-layer pruning flags (`true` = pruned) over maskable units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    layers: Vec<Option<Vec<bool>>>,
}

impl Mask {
    /// Mask with nothing pruned.
    pub fn empty(net: &Network) -> Self {
        Self {
            layers: (0..net.layers.len())
                .map(|l| net.is_prunable(l).then(|| vec![false; net.units(l)]))
                .collect(),
        }
    }

    pub fn layer(&self, l: usize) -> Option<&[bool]> {
        self.layers.get(l).and_then(|o| o.as_deref())
    }

    pub fn layers(&self) -> &[Option<Vec<bool>>] {
        &self.layers
    }

    pub fn is_masked(&self, l: usize, unit: usize) -> bool {
        self.layer(l).is_some_and(|u| u[unit])
    }

    /// Sets the flag of a maskable unit; fails for non-maskable positions.
    pub fn set(&mut self, l: usize, unit: usize, pruned: bool) -> Result<()> {
        match self.layers.get_mut(l).and_then(|o| o.as_mut()) {
            Some(units) if unit < units.len() => {
                units[unit] = pruned;
                Ok(())
            }
            _ => invalid(format!("layer {l} unit {unit} is not maskable")),
        }
    }

    pub fn masked_in_layer(&self, l: usize) -> usize {
        self.layer(l).map_or(0, |u| u.iter().filter(|&&b| b).count())
    }

    pub fn masked_count(&self) -> usize {
        (0..self.layers.len()).map(|l| self.masked_in_layer(l)).sum()
    }

    pub fn maskable_count(&self) -> usize {
        self.layers.iter().flatten().map(Vec::len).sum()
    }

    /// Fraction of maskable units that are pruned.
    pub fn pruned_fraction(&self) -> f64 {
        let total = self.maskable_count();
        if total == 0 {
            0.0
        } else {
            self.masked_count() as f64 / total as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked_count() == 0
    }

    pub fn check(&self, net: &Network) -> Result<()> {
        let expected = Mask::empty(net);
        let same_shape = self.layers.len() == expected.layers.len()
            && self
                .layers
                .iter()
                .zip(&expected.layers)
                .all(|(a, b)| a.as_ref().map(Vec::len) == b.as_ref().map(Vec::len));
        if same_shape {
            Ok(())
        } else {
            invalid("mask shape does not match the network")
        }
    }
}

#[derive(Debug, Clone)]
enum Keep {
    All,
    Units(Vec<usize>),
    Channels(Vec<usize>),
}

/// Structurally removes masked units: their rows disappear from the layer
/// and the matching inputs disappear from the next affine layer. The result
/// computes the same logits as the masked forward pass.
pub fn apply_mask(net: &Network, mask: &Mask) -> Result<Network> {
    mask.check(net)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut keep = Keep::All;
    let mut in_shape = net.input_shape;
    for (l, layer) in net.layers.iter().enumerate() {
        let units = mask.layer(l);
        if let Some(u) = units {
            if u.iter().all(|&b| b) {
                return invalid(format!("mask removes every unit of layer {l}"));
            }
        }
        let kept_units = |n: usize| -> Vec<usize> {
            (0..n).filter(|&i| !units.is_some_and(|u| u[i])).collect()
        };
        let new_layer = match layer {
            Layer::Dense(d) => {
                let cols: Vec<usize> = match &keep {
                    Keep::All => (0..d.weight.cols()).collect(),
                    Keep::Units(u) => u.clone(),
                    Keep::Channels(_) => unreachable!("dense after spatial layer"),
                };
                let rows = kept_units(d.weight.rows());
                let bias = rows.iter().map(|&r| d.bias[r]).collect();
                let weight = d.weight.select(&rows, &cols);
                keep = if rows.len() == d.weight.rows() {
                    Keep::All
                } else {
                    Keep::Units(rows)
                };
                Layer::Dense(DenseLayer {
                    weight,
                    bias,
                    activation: d.activation,
                })
            }
            Layer::Conv(c) => {
                let in_ch: Vec<usize> = match &keep {
                    Keep::All => (0..c.spec.in_channels).collect(),
                    Keep::Channels(ch) => ch.clone(),
                    Keep::Units(_) => unreachable!("conv after flat layer"),
                };
                let out_ch = kept_units(c.spec.out_channels);
                let mut kernels = Vec::with_capacity(in_ch.len() * out_ch.len());
                for &o in &out_ch {
                    for &ci in &in_ch {
                        kernels.push(c.kernels[o * c.spec.in_channels + ci].clone());
                    }
                }
                let spec = ConvSpec {
                    in_channels: in_ch.len(),
                    out_channels: out_ch.len(),
                    ..c.spec
                };
                let bias = out_ch.iter().map(|&o| c.bias[o]).collect();
                keep = if out_ch.len() == c.spec.out_channels {
                    Keep::All
                } else {
                    Keep::Channels(out_ch)
                };
                Layer::Conv(ConvLayer::new(spec, kernels, bias, c.activation)?)
            }
            Layer::Flatten => {
                if let (Keep::Channels(ch), Shape::Spatial { height, width, .. }) =
                    (&keep, in_shape)
                {
                    let hw = height * width;
                    keep = Keep::Units(
                        ch.iter()
                            .flat_map(|&c| (c * hw..(c + 1) * hw).collect::<Vec<_>>())
                            .collect(),
                    );
                }
                Layer::Flatten
            }
            other => other.clone(),
        };
        layers.push(new_layer);
        in_shape = net.shapes[l];
    }
    let input_shape = net.input_shape;
    Network::new(input_shape, layers, net.seed)
}

/// Description of one layer in an architecture string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Dense { units: usize },
    Conv { maps: usize, kernel: usize, padding: usize },
    AvgPool { window: usize },
    MaxPool { window: usize },
    Flatten,
    Output { units: usize },
}

/// Layer recipe used by [`init`].
///
/// Text form: comma separated tokens, e.g. `in:2,dense:16,dense:8,out:4` or
/// `in:1x8x8,conv:4:3:1,avgpool:2,flatten,dense:16,out:10`
/// (`conv:<maps>:<kernel>:<padding>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<LayerDesc>,
}

impl Architecture {
    pub fn mlp(input: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut layers: Vec<LayerDesc> = hidden
            .iter()
            .map(|&units| LayerDesc::Dense { units })
            .collect();
        layers.push(LayerDesc::Output { units: outputs });
        Self {
            input: Shape::Flat(input),
            layers,
        }
    }

    pub fn outputs(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerDesc::Output { units }) => Some(*units),
            _ => None,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = s.split(',').map(str::trim);
        let input = match tokens.next().and_then(|t| t.strip_prefix("in:")) {
            Some(dims) => {
                let dims = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::InvalidArgument(format!("bad input shape: {e}")))?;
                Shape::from_dims(&dims)?
            }
            None => return invalid("architecture must start with in:<dims>"),
        };
        let num = |v: Option<&str>, what: &str| -> Result<usize> {
            v.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad {what} in architecture")))
        };
        let mut layers = Vec::new();
        for tok in tokens {
            let mut parts = tok.split(':');
            let desc = match parts.next() {
                Some("dense") => LayerDesc::Dense {
                    units: num(parts.next(), "dense width")?,
                },
                Some("out") => LayerDesc::Output {
                    units: num(parts.next(), "output width")?,
                },
                Some("conv") => LayerDesc::Conv {
                    maps: num(parts.next(), "conv maps")?,
                    kernel: num(parts.next(), "conv kernel")?,
                    padding: num(parts.next().or(Some("0")), "conv padding")?,
                },
                Some("avgpool") => LayerDesc::AvgPool {
                    window: num(parts.next(), "pool window")?,
                },
                Some("maxpool") => LayerDesc::MaxPool {
                    window: num(parts.next(), "pool window")?,
                },
                Some("flatten") => LayerDesc::Flatten,
                _ => return invalid(format!("unknown architecture token '{tok}'")),
            };
            layers.push(desc);
        }
        Ok(Self { input, layers })
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "in:{}", self.input)?;
        for l in &self.layers {
            match l {
                LayerDesc::Dense { units } => write!(f, ",dense:{units}")?,
                LayerDesc::Output { units } => write!(f, ",out:{units}")?,
                LayerDesc::Conv {
                    maps,
                    kernel,
                    padding,
                } => write!(f, ",conv:{maps}:{kernel}:{padding}")?,
                LayerDesc::AvgPool { window } => write!(f, ",avgpool:{window}")?,
                LayerDesc::MaxPool { window } => write!(f, ",maxpool:{window}")?,
                LayerDesc::Flatten => write!(f, ",flatten")?,
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: weights and biases drawn uniformly from
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, layer by layer, weights before bias.
pub fn init(arch: &Architecture, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
        let b = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-b..=b)).collect()
    };
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut shape = arch.input;
    for (i, desc) in arch.layers.iter().enumerate() {
        let layer = match (*desc, shape) {
            (LayerDesc::Dense { units } | LayerDesc::Output { units }, Shape::Flat(n)) => {
                let activation = if matches!(desc, LayerDesc::Output { .. }) {
                    Activation::None
                } else {
                    Activation::Relu
                };
                let weight = Matrix::new(units, n, draw(units * n, n))?;
                let bias = draw(units, n);
                Layer::Dense(DenseLayer {
                    weight,
                    bias,
                    activation,
                })
            }
            (
                LayerDesc::Conv {
                    maps,
                    kernel,
                    padding,
                },
                Shape::Spatial {
                    channels,
                    height,
                    width,
                },
            ) => {
                let spec = ConvSpec {
                    in_channels: channels,
                    out_channels: maps,
                    kernel_h: kernel,
                    kernel_w: kernel,
                    input_h: height,
                    input_w: width,
                    padding,
                    stride: 1,
                };
                spec.validate()?;
                let fan_in = channels * kernel * kernel;
                let kernels = (0..maps * channels)
                    .map(|_| Matrix::new(kernel, kernel, draw(kernel * kernel, fan_in)))
                    .collect::<Result<Vec<_>>>()?;
                let bias = draw(maps, fan_in);
                Layer::Conv(ConvLayer::new(spec, kernels, bias, Activation::Relu)?)
            }
            (LayerDesc::AvgPool { window }, _) => Layer::AvgPool { window },
            (LayerDesc::MaxPool { window }, _) => Layer::MaxPool { window },
            (LayerDesc::Flatten, _) => Layer::Flatten,
            (d, s) => {
                return Err(Error::Validation {
                    layer: i,
                    message: format!("{d:?} cannot follow shape {s}"),
                })
            }
        };
        shape = layer.output_shape(i, shape)?;
        layers.push(layer);
    }
    Network::new(arch.input, layers, seed)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    input_shape: Vec<usize>,
    seed: u64,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<ConvSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool_window: Option<usize>,
}

impl LayerRecord {
    fn bare(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            dims: Vec::new(),
            activation: None,
            weights: None,
            bias: None,
            conv: None,
            pool_window: None,
        }
    }
}

impl Network {
    /// Serializes to the model text format. Reals are stored as hex bit
    /// patterns, so `from_text(to_text(n)) == n` exactly.
    pub fn to_text(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut rec = LayerRecord::bare(layer.kind());
                match layer {
                    Layer::Dense(d) => {
                        rec.dims = vec![d.weight.rows(), d.weight.cols()];
                        rec.activation = Some(d.activation);
                        rec.weights = Some(codec::encode_all(d.weight.data()));
                        rec.bias = Some(codec::encode_all(&d.bias));
                    }
                    Layer::Conv(c) => {
                        let s = &c.spec;
                        rec.dims = vec![s.out_channels, s.in_channels, s.kernel_h, s.kernel_w];
                        rec.activation = Some(c.activation);
                        let flat: Vec<f64> =
                            c.kernels.iter().flat_map(|k| k.data().to_vec()).collect();
                        rec.weights = Some(codec::encode_all(&flat));
                        rec.bias = Some(codec::encode_all(&c.bias));
                        rec.conv = Some(c.spec);
                    }
                    Layer::AvgPool { window } | Layer::MaxPool { window } => {
                        rec.pool_window = Some(*window);
                    }
                    Layer::Flatten => {}
                }
                rec
            })
            .collect();
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            input_shape: self.input_shape.dims(),
            seed: self.seed,
            layers,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serialization");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Network> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return invalid(format!(
                "unsupported model format version {}",
                file.format_version
            ));
        }
        let input_shape = Shape::from_dims(&file.input_shape)?;
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, rec) in file.layers.into_iter().enumerate() {
            layers.push(layer_from_record(i, rec)?);
        }
        Network::new(input_shape, layers, file.seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        Network::from_text(&std::fs::read_to_string(path)?)
    }
}

fn layer_from_record(i: usize, rec: LayerRecord) -> Result<Layer> {
    let fail = |message: String| Error::Validation { layer: i, message };
    let reals = |field: &str, v: &Option<Vec<String>>, n: usize| -> Result<Vec<f64>> {
        let v = v
            .as_ref()
            .ok_or_else(|| fail(format!("missing field '{field}'")))?;
        if v.len() != n {
            return Err(fail(format!(
                "field '{field}' has {} entries, dims require {n}",
                v.len()
            )));
        }
        codec::decode_all(v).map_err(|k| fail(format!("field '{field}' entry {k} is not a hex real")))
    };
    let activation = || {
        rec.activation
            .ok_or_else(|| fail("missing field 'activation'".into()))
    };
    match rec.kind.as_str() {
        "dense" => {
            let [rows, cols] = rec.dims[..] else {
                return Err(fail("dense dims must be [rows, cols]".into()));
            };
            let weight = Matrix::new(rows, cols, reals("weights", &rec.weights, rows * cols)?)
                .map_err(|e| fail(e.to_string()))?;
            let bias = reals("bias", &rec.bias, rows)?;
            Ok(Layer::Dense(DenseLayer {
                weight,
                bias,
                activation: activation()?,
            }))
        }
        "conv" => {
            let spec = rec.conv.ok_or_else(|| fail("missing field 'conv'".into()))?;
            let [o, c, kh, kw] = rec.dims[..] else {
                return Err(fail("conv dims must be [out, in, kh, kw]".into()));
            };
            if (o, c, kh, kw) != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
            {
                return Err(fail("conv dims disagree with conv spec".into()));
            }
            let flat = reals("weights", &rec.weights, o * c * kh * kw)?;
            let kernels = flat
                .chunks(kh * kw)
                .map(|k| Matrix::new(kh, kw, k.to_vec()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| fail(e.to_string()))?;
            let bias = reals("bias", &rec.bias, o)?;
            ConvLayer::new(spec, kernels, bias, activation()?)
                .map(Layer::Conv)
                .map_err(|e| fail(e.to_string()))
        }
        "avgpool" | "maxpool" => {
            let window = rec
                .pool_window
                .ok_or_else(|| fail("missing field 'pool_window'".into()))?;
            Ok(if rec.kind == "avgpool" {
                Layer::AvgPool { window }
            } else {
                Layer::MaxPool { window }
            })
        }
        "flatten" => Ok(Layer::Flatten),
        other => Err(fail(format!("unknown layer kind '{other}'"))),
    }
}
