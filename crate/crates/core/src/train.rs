//! Minimal deterministic trainer: softmax cross-entropy, mini-batch SGD or
//! RMSprop, backpropagation through dense, lowered-conv and average-pool
//! layers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::conv_source_map;
use crate::network::{forward, pool_windows, Activation, Layer, Mask, Network};

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    RmsProp,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "rmsprop" => Ok(Optimizer::RmsProp),
            other => invalid(format!("unknown optimizer '{other}'")),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::RmsProp => "rmsprop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 16,
            optimizer: Optimizer::RmsProp,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be >= 1");
        }
        // Zero is allowed: it leaves the weights untouched.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return invalid("learning rate must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return invalid("batch size must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub trace: Vec<EpochStats>,
}

/// Loss trace as CSV with header `epoch,loss,train_acc`.
pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,train_acc\n");
    for e in trace {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.train_acc));
    }
    s
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of points whose arg-max prediction matches the label.
pub fn evaluate(net: &Network, ds: &Dataset, mask: Option<&Mask>) -> Result<f64> {
    if ds.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let mut correct = 0usize;
    for (x, &y) in ds.inputs.iter().zip(&ds.labels) {
        let t = forward(net, x, mask)?;
        if argmax(t.logits()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Flattened parameters: for each layer, weights (row-major, or kernels in
/// order) followed by biases.
pub fn params(net: &Network) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.n_params());
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                out.extend_from_slice(d.weight.data());
                out.extend_from_slice(&d.bias);
            }
            Layer::Conv(c) => {
                for k in &c.kernels {
                    out.extend_from_slice(k.data());
                }
                out.extend_from_slice(&c.bias);
            }
            _ => {}
        }
    }
    out
}

/// Returns a copy of `net` with parameters replaced, in [`params`] order.
pub fn with_params(net: &Network, p: &[f64]) -> Result<Network> {
    if p.len() != net.n_params() {
        return invalid("parameter vector has the wrong length");
    }
    if p.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite parameter");
    }
    let mut out = net.clone();
    let mut off = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&p[off..off + dst.len()]);
        off += dst.len();
    };
    for layer in out.layers_mut() {
        match layer {
            Layer::Dense(d) => {
                take(d.weight.data_mut());
                take(&mut d.bias);
            }
            Layer::Conv(c) => {
                for k in &mut c.kernels {
                    take(k.data_mut());
                }
                take(&mut c.bias);
            }
            _ => {}
        }
    }
    out.relower()?;
    Ok(out)
}

fn log_softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// Precomputed kernel-index maps of the conv layers.
struct Sources(Vec<Option<Vec<Option<u32>>>>);

impl Sources {
    fn new(net: &Network) -> Result<Self> {
        net.layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => conv_source_map(&c.spec).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()
            .map(Sources)
    }
}

/// Mean cross-entropy over the given points and its gradient in
/// [`params`] order.
pub fn loss_and_gradient(net: &Network, xs: &[&[f64]], ys: &[usize]) -> Result<(f64, Vec<f64>)> {
    let sources = Sources::new(net)?;
    loss_and_gradient_with(net, xs, ys, &sources)
}

fn loss_and_gradient_with(
    net: &Network,
    xs: &[&[f64]],
    ys: &[usize],
    sources: &Sources,
) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return invalid("need a non-empty batch with one label per input");
    }
    if net.layers().iter().any(|l| matches!(l, Layer::MaxPool { .. })) {
        return Err(Error::Unsupported(
            "training through max pooling".into(),
        ));
    }
    let n_out = net.n_outputs();
    if ys.iter().any(|&y| y >= n_out) {
        return invalid("label exceeds the number of network outputs");
    }
    let layers = net.layers();
    let offsets = {
        let mut off = Vec::with_capacity(layers.len());
        let mut acc = 0;
        for l in layers {
            off.push(acc);
            acc += match l {
                Layer::Dense(d) => d.weight.rows() * d.weight.cols() + d.bias.len(),
                Layer::Conv(c) => {
                    c.kernels.len() * c.spec.kernel_h * c.spec.kernel_w + c.bias.len()
                }
                _ => 0,
            };
        }
        off
    };
    let mut grad = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    let scale = 1.0 / xs.len() as f64;

    for (&x, &y) in xs.iter().zip(ys) {
        let t = forward(net, x, None)?;
        let (l, dlogits) = log_softmax_ce(t.logits(), y);
        loss += l * scale;
        let mut delta: Vec<f64> = dlogits.iter().map(|g| g * scale).collect();
        for li in (0..layers.len()).rev() {
            let input: &[f64] = if li == 0 { x } else { &t.post[li - 1] };
            let in_shape = if li == 0 {
                net.input_shape()
            } else {
                net.shapes()[li - 1]
            };
            match &layers[li] {
                layer @ (Layer::Dense(_) | Layer::Conv(_)) => {
                    let a = layer.affine().expect("affine");
                    if a.activation == Activation::Relu {
                        for (d, &z) in delta.iter_mut().zip(&t.pre[li]) {
                            if z <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    let base = offsets[li];
                    match layer {
                        Layer::Dense(dl) => {
                            let cols = dl.weight.cols();
                            for (r, &d) in delta.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                let row = &mut grad[base + r * cols..base + (r + 1) * cols];
                                for (g, &xv) in row.iter_mut().zip(input) {
                                    *g += d * xv;
                                }
                                grad[base + dl.weight.rows() * cols + r] += d;
                            }
                        }
                        Layer::Conv(cl) => {
                            let src = sources.0[li].as_ref().expect("conv source map");
                            let cols = a.weight.cols();
                            let n_kernel = cl.kernels.len() * cl.spec.kernel_h * cl.spec.kernel_w;
                            for (r, &d) in delta.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                for c in 0..cols {
                                    if let Some(k) = src[r * cols + c] {
                                        grad[base + k as usize] += d * input[c];
                                    }
                                }
                                grad[base + n_kernel + a.unit_of_row(r)] += d;
                            }
                        }
                        _ => unreachable!(),
                    }
                    if li > 0 {
                        delta = a.weight.matvec_transposed(&delta)?;
                    }
                }
                Layer::AvgPool { window } => {
                    let mut prev = vec![0.0; in_shape.len()];
                    let inv = 1.0 / (window * window) as f64;
                    for (o, idx) in pool_windows(in_shape, *window).iter().enumerate() {
                        for &i in idx {
                            prev[i] += delta[o] * inv;
                        }
                    }
                    delta = prev;
                }
                Layer::Flatten => {}
                Layer::MaxPool { .. } => unreachable!(),
            }
        }
    }
    Ok((loss, grad))
}

/// Trains a copy of `net`. Deterministic given the network, the dataset and
/// `cfg.seed`.
pub fn train(net: &Network, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if ds.input_shape.len() != net.input_len() {
        return invalid("dataset inputs do not match the network input shape");
    }
    let sources = Sources::new(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = params(net);
    let mut cache = vec![0.0; p.len()];
    let mut cur = net.clone();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| ds.inputs[i].as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let (loss, g) = loss_and_gradient_with(&cur, &xs, &ys, &sources)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (w, gi) in p.iter_mut().zip(&g) {
                        *w -= cfg.learning_rate * gi;
                    }
                }
                Optimizer::RmsProp => {
                    for ((w, gi), v) in p.iter_mut().zip(&g).zip(cache.iter_mut()) {
                        *v = RMSPROP_DECAY * *v + (1.0 - RMSPROP_DECAY) * gi * gi;
                        *w -= cfg.learning_rate * gi / (v.sqrt() + RMSPROP_EPS);
                    }
                }
            }
            if p.iter().any(|w| !w.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            cur = with_params(&cur, &p)?;
        }
        let loss = epoch_loss / ds.len() as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.push(EpochStats {
            epoch,
            loss,
            train_acc: evaluate(&cur, ds, None)?,
        });
    }
    Ok(TrainOutcome { net: cur, trace })
}
