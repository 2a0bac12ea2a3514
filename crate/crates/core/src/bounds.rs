//! Interval propagation of per-point pre-activation bounds.
//!
//! Starting from the box `[x - eps, x + eps]`, each affine layer maps an
//! interval `[lo, hi]` to `W- hi + W+ lo + b` and `W+ hi + W- lo + b`,
//! where `W+`/`W-` are the positive and negative parts of the weights.
//! The interval is clipped at zero through every ReLU before it enters the
//! next layer. Average pooling averages both ends; max pooling takes the
//! maximum of the lowers and of the uppers.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::network::{forward, pool_windows, Activation, Layer, Network};

/// Bounds of one layer for one input point.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Pre-activation bounds of every layer around one input point. For pooling
/// and flatten layers the bounds are on the layer output itself.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    pub epsilon: f64,
    pub layers: Vec<LayerBounds>,
}

impl IntervalBounds {
    pub fn lower(&self, layer: usize, neuron: usize) -> f64 {
        self.layers[layer].lower[neuron]
    }

    pub fn upper(&self, layer: usize, neuron: usize) -> f64 {
        self.layers[layer].upper[neuron]
    }

    /// Whether these bounds have an entry for every neuron of `net`.
    pub fn covers(&self, net: &Network) -> bool {
        self.layers.len() == net.layers().len()
            && self
                .layers
                .iter()
                .zip(net.shapes())
                .all(|(b, s)| b.lower.len() == s.len() && b.upper.len() == s.len())
    }
}

/// Interval sum of one row, accumulated in the same order as the forward
/// dot product so that zero-width inputs give exactly the forward value.
fn row_interval(row: &[f64], lo: &[f64], hi: &[f64], bias: f64) -> (f64, f64) {
    let mut l = 0.0;
    let mut u = 0.0;
    for ((&w, &a), &b) in row.iter().zip(lo).zip(hi) {
        if w >= 0.0 {
            l += w * a;
            u += w * b;
        } else {
            l += w * b;
            u += w * a;
        }
    }
    (l + bias, u + bias)
}

pub fn propagate(net: &Network, x: &[f64], epsilon: f64) -> Result<IntervalBounds> {
    if x.len() != net.input_len() {
        return invalid(format!(
            "input has {} entries, network expects {}",
            x.len(),
            net.input_len()
        ));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return invalid("epsilon must be finite and non-negative");
    }
    let mut lo: Vec<f64> = x.iter().map(|v| v - epsilon).collect();
    let mut hi: Vec<f64> = x.iter().map(|v| v + epsilon).collect();
    let mut in_shape = net.input_shape();
    let mut layers = Vec::with_capacity(net.layers().len());
    for (l, layer) in net.layers().iter().enumerate() {
        let (pre_lo, pre_hi, post_lo, post_hi) = match layer {
            Layer::Dense(_) | Layer::Conv(_) => {
                let a = layer.affine().expect("affine");
                let (pl, ph): (Vec<f64>, Vec<f64>) = (0..a.weight.rows())
                    .map(|r| row_interval(a.weight.row(r), &lo, &hi, a.bias[r]))
                    .unzip();
                let (ql, qh) = match a.activation {
                    Activation::Relu => (
                        pl.iter().map(|v| v.max(0.0)).collect(),
                        ph.iter().map(|v| v.max(0.0)).collect(),
                    ),
                    Activation::None => (pl.clone(), ph.clone()),
                };
                (pl, ph, ql, qh)
            }
            Layer::AvgPool { window } => {
                let windows = pool_windows(in_shape, *window);
                let mean = |v: &[f64]| -> Vec<f64> {
                    windows
                        .iter()
                        .map(|idx| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64)
                        .collect()
                };
                let (ml, mh) = (mean(&lo), mean(&hi));
                (ml.clone(), mh.clone(), ml, mh)
            }
            Layer::MaxPool { window } => {
                let windows = pool_windows(in_shape, *window);
                let max = |v: &[f64]| -> Vec<f64> {
                    windows
                        .iter()
                        .map(|idx| idx.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                };
                let (ml, mh) = (max(&lo), max(&hi));
                (ml.clone(), mh.clone(), ml, mh)
            }
            Layer::Flatten => (lo.clone(), hi.clone(), lo.clone(), hi.clone()),
        };
        layers.push(LayerBounds {
            lower: pre_lo,
            upper: pre_hi,
        });
        lo = post_lo;
        hi = post_hi;
        in_shape = net.shapes()[l];
    }
    Ok(IntervalBounds { epsilon, layers })
}

/// Bounds for each point of a batch.
pub fn propagate_batch(net: &Network, xs: &[Vec<f64>], epsilon: f64) -> Result<Vec<IntervalBounds>> {
    xs.iter().map(|x| propagate(net, x, epsilon)).collect()
}

/// Samples `n_samples` points uniformly from the infinity-norm ball of
/// radius `epsilon` around `x` and counts pre-activations that fall outside
/// the propagated bounds. Sound bounds give zero.
pub fn check_soundness(
    net: &Network,
    x: &[f64],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<usize> {
    let b = propagate(net, x, epsilon)?;
    count_violations(net, x, epsilon, &b, n_samples, seed)
}

/// Like [`check_soundness`] but against caller-supplied bounds.
pub fn count_violations(
    net: &Network,
    x: &[f64],
    epsilon: f64,
    bounds: &IntervalBounds,
    n_samples: usize,
    seed: u64,
) -> Result<usize> {
    if n_samples == 0 {
        return invalid("n_samples must be >= 1");
    }
    if !bounds.covers(net) {
        return invalid("bounds do not match the network");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..n_samples {
        let p: Vec<f64> = x
            .iter()
            .map(|&v| {
                if epsilon > 0.0 {
                    v + rng.random_range(-epsilon..=epsilon)
                } else {
                    v
                }
            })
            .collect();
        let t = forward(net, &p, None)?;
        for (pre, lb) in t.pre.iter().zip(&bounds.layers) {
            for ((&z, &l), &u) in pre.iter().zip(&lb.lower).zip(&lb.upper) {
                if z < l || z > u {
                    violations += 1;
                }
            }
        }
    }
    Ok(violations)
}

/// CSV dump with header `layer,neuron,point,lower,upper`.
pub fn bounds_csv(batch: &[IntervalBounds]) -> String {
    let mut s = String::from("layer,neuron,point,lower,upper\n");
    for (k, b) in batch.iter().enumerate() {
        for (l, lb) in b.layers.iter().enumerate() {
            for (i, (lo, hi)) in lb.lower.iter().zip(&lb.upper).enumerate() {
                let _ = writeln!(s, "{l},{i},{k},{lo},{hi}");
            }
        }
    }
    s
}
