//! Random instance generators and brute-force oracles shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use mipprune::linalg::{ConvSpec, Matrix};
use mipprune::mip::{encode_maxpool, Batch, MipModel, Sense, Tag, Term, VarKind};
use mipprune::network::{ConvLayer, DenseLayer, Layer, Network, Shape, Activation};
use mipprune::solver::lp::{LpProblem, LpRow, LpStatus};
use mipprune::solver::{solve_lp, solve_mip, SolverConfig};
use mipprune::train::{loss_and_gradient, params, with_params};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn sense(rng: &mut impl Rng, eq_prob: f64) -> Sense {
    if rng.random_bool(eq_prob) {
        Sense::Eq
    } else if rng.random_bool(0.5) {
        Sense::Le
    } else {
        Sense::Ge
    }
}

/// Box-bounded LP with small integer data, `n <= 6` and `m <= 8`.
pub fn random_lp(rng: &mut impl Rng) -> LpProblem {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=8);
    let lb: Vec<f64> = (0..n).map(|_| rng.random_range(-5..=0) as f64).collect();
    let ub: Vec<f64> = lb.iter().map(|l| l + rng.random_range(1..=6) as f64).collect();
    let cost = (0..n).map(|_| rng.random_range(-5..=5) as f64).collect();
    let rows = (0..m)
        .map(|_| {
            let coeffs: Vec<(usize, f64)> = (0..n)
                .filter_map(|j| {
                    let a = rng.random_range(-4..=4);
                    (a != 0).then_some((j, a as f64))
                })
                .collect();
            LpRow {
                coeffs,
                sense: sense(rng, 0.1),
                rhs: rng.random_range(-6..=6) as f64,
            }
        })
        .collect();
    LpProblem { cost, lb, ub, rows }
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), f);
}

/// Optimum of a bounded LP by enumerating every basic solution; `None` if
/// infeasible.
pub fn vertex_enumeration(p: &LpProblem) -> Option<f64> {
    let n = p.cost.len();
    // Candidate hyperplanes: rows, then lower and upper bounds.
    let mut planes: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for r in &p.rows {
        let mut a = vec![0.0; n];
        for &(j, v) in &r.coeffs {
            a[j] += v;
        }
        planes.push((a, r.rhs, r.sense == Sense::Eq));
    }
    for j in 0..n {
        for b in [p.lb[j], p.ub[j]] {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            planes.push((a, b, false));
        }
    }
    let forced: Vec<usize> = (0..planes.len()).filter(|&i| planes[i].2).collect();
    let free: Vec<usize> = (0..planes.len()).filter(|&i| !planes[i].2).collect();
    let mut best: Option<f64> = None;
    let mut try_set = |set: Vec<usize>| {
        let a = DMatrix::from_fn(set.len(), n, |r, c| planes[set[r]].0[c]);
        let b = DVector::from_iterator(set.len(), set.iter().map(|&i| planes[i].1));
        let (x, ok) = if set.len() == n {
            match a.clone().lu().solve(&b) {
                Some(x) => (x, true),
                None => (DVector::zeros(n), false),
            }
        } else {
            // More forced equalities than variables: least squares check.
            match a.clone().svd(true, true).solve(&b, 1e-12) {
                Ok(x) => (x, true),
                Err(_) => (DVector::zeros(n), false),
            }
        };
        if !ok || (&a * &x - &b).amax() > 1e-9 {
            return;
        }
        let x: Vec<f64> = x.iter().copied().collect();
        if p.max_violation(&x) > 1e-9 {
            return;
        }
        let obj: f64 = x.iter().zip(&p.cost).map(|(a, c)| a * c).sum();
        if best.is_none_or(|b| obj < b) {
            best = Some(obj);
        }
    };
    if forced.len() >= n {
        try_set(forced);
    } else {
        combinations(free.len(), n - forced.len(), &mut |pick| {
            let mut set = forced.clone();
            set.extend(pick.iter().map(|&i| free[i]));
            try_set(set);
        });
    }
    best
}

/// MILP with `nb` binaries and `nc` box-bounded continuous variables, each
/// continuous variable gated by a binary so that the binaries matter.
pub fn random_milp(rng: &mut impl Rng) -> MipModel {
    let nb = rng.random_range(1..=12);
    let nc = rng.random_range(1..=25);
    let mut m = MipModel::new();
    let bins: Vec<usize> = (0..nb).map(|_| m.add_var(0.0, 1.0, true)).collect();
    let conts: Vec<usize> = (0..nc)
        .map(|_| m.add_var(0.0, rng.random_range(1..=8) as f64, false))
        .collect();
    // A point that every generated row admits.
    let x0: Vec<f64> = bins
        .iter()
        .map(|_| rng.random_range(0..=1) as f64)
        .chain(conts.iter().map(|_| 0.0))
        .collect();
    for (i, &c) in conts.iter().enumerate() {
        let z = bins[i % nb];
        m.add_constraint(vec![(c, 1.0), (z, -8.0)], Sense::Le, 0.0, Tag::User)
            .unwrap();
    }
    for _ in 0..rng.random_range(1..=6) {
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for &v in bins.iter().chain(&conts) {
            let a = rng.random_range(-4..=4);
            if a != 0 && rng.random_bool(0.5) {
                coeffs.push((v, a as f64));
            }
        }
        if coeffs.is_empty() {
            continue;
        }
        let act: f64 = coeffs.iter().map(|&(v, a)| a * x0[v]).sum();
        let slack = rng.random_range(0..=3) as f64;
        let (sense, rhs) = if rng.random_bool(0.5) {
            (Sense::Le, act + slack)
        } else {
            (Sense::Ge, act - slack)
        };
        m.add_constraint(coeffs, sense, rhs, Tag::User).unwrap();
    }
    let obj = bins
        .iter()
        .chain(&conts)
        .map(|&v| (v, rng.random_range(-6..=6) as f64))
        .collect();
    m.set_objective(obj, 0.0).unwrap();
    m
}

/// Optimum over every binary assignment, each completed by an LP.
pub fn enumerate_milp(model: &MipModel) -> Option<f64> {
    let bins: Vec<usize> = (0..model.n_vars()).filter(|&j| model.vars[j].integer).collect();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << bins.len()) {
        let fix: Vec<(usize, f64)> = bins
            .iter()
            .enumerate()
            .map(|(b, &v)| (v, ((mask >> b) & 1) as f64))
            .collect();
        let s = solve_lp(model, &fix);
        if s.status == LpStatus::Optimal && best.is_none_or(|b| s.objective < b) {
            best = Some(s.objective);
        }
    }
    best
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random conv -> avg pool -> flatten -> dense* -> head network on a small
/// single-channel image.
pub fn random_conv_net(rng: &mut impl Rng) -> Network {
    let side = rng.random_range(4..=6) & !1;
    let maps = rng.random_range(1..=2);
    let k = rng.random_range(1..=3);
    let padding = rng.random_range(0..k);
    let spec = ConvSpec {
        in_channels: 1,
        out_channels: maps,
        kernel_h: k,
        kernel_w: k,
        input_h: side,
        input_w: side,
        padding,
        stride: 1,
    };
    let kernels = (0..maps).map(|_| uniform_matrix(rng, k, k, 1.0)).collect();
    let bias = uniform_vec(rng, maps, 0.5);
    let conv = ConvLayer::new(spec, kernels, bias, Activation::Relu).unwrap();
    let (oh, ow) = (spec.output_h(), spec.output_w());
    let window = if oh % 2 == 0 && ow % 2 == 0 { 2 } else { 1 };
    let flat = maps * (oh / window) * (ow / window);
    let mut layers = vec![Layer::Conv(conv), Layer::AvgPool { window }, Layer::Flatten];
    let mut width = flat;
    for _ in 0..rng.random_range(0..=1) {
        let units = rng.random_range(2..=8);
        layers.push(Layer::Dense(DenseLayer {
            weight: uniform_matrix(rng, units, width, 1.0),
            bias: uniform_vec(rng, units, 0.5),
            activation: Activation::Relu,
        }));
        width = units;
    }
    let outs = rng.random_range(2..=4);
    layers.push(Layer::Dense(DenseLayer {
        weight: uniform_matrix(rng, outs, width, 1.0),
        bias: uniform_vec(rng, outs, 0.5),
        activation: Activation::None,
    }));
    let seed = rng.random();
    Network::new(
        Shape::Spatial {
            channels: 1,
            height: side,
            width: side,
        },
        layers,
        seed,
    )
    .unwrap()
}

/// Random dense ReLU network with 1..=3 hidden layers of at most 8 units.
pub fn random_mlp(rng: &mut impl Rng, inputs: usize) -> Network {
    let mut layers = Vec::new();
    let mut width = inputs;
    for _ in 0..rng.random_range(1..=3) {
        let units = rng.random_range(1..=8);
        layers.push(Layer::Dense(DenseLayer {
            weight: uniform_matrix(rng, units, width, 1.0),
            bias: uniform_vec(rng, units, 0.5),
            activation: Activation::Relu,
        }));
        width = units;
    }
    let outs = rng.random_range(2..=4);
    layers.push(Layer::Dense(DenseLayer {
        weight: uniform_matrix(rng, outs, width, 1.0),
        bias: uniform_vec(rng, outs, 0.5),
        activation: Activation::None,
    }));
    Network::new(Shape::Flat(inputs), layers, rng.random()).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, net: &Network) -> Batch {
    let n = rng.random_range(1..=4);
    Batch {
        inputs: (0..n).map(|_| uniform_vec(rng, net.input_len(), 1.0)).collect(),
        labels: (0..n).map(|_| rng.random_range(0..net.n_outputs())).collect(),
    }
}

/// Pins every binary and every score to the reference values and solves
/// the remaining LP; returns the logits per point.
pub fn pinned_logits(model: &MipModel, reference: &[f64]) -> Vec<Vec<f64>> {
    let fix: Vec<(usize, f64)> = model
        .vars
        .iter()
        .filter(|v| v.integer || v.var.kind == VarKind::S)
        .map(|v| (v.var.id, reference[v.var.id]))
        .collect();
    let s = solve_lp(model, &fix);
    assert_eq!(s.status, LpStatus::Optimal);
    model
        .lse_groups
        .iter()
        .map(|g| g.logits.iter().map(|&v| s.x[v]).collect())
        .collect()
}

/// Encodes a max over four fixed values with random valid bounds, then
/// minimizes and maximizes the pooled variable. Returns the largest
/// deviation from the arithmetic max.
pub fn maxpool_fixing_error(rng: &mut impl Rng) -> f64 {
    let vals: Vec<f64> = uniform_vec(rng, 4, 3.0).iter().map(|v| v.max(0.0)).collect();
    let ups: Vec<f64> = vals.iter().map(|v| v + rng.random_range(0.0..1.0)).collect();
    let lows: Vec<f64> = vals.iter().map(|v| (v - rng.random_range(0.0..1.0)).max(0.0)).collect();
    let mut m = MipModel::new();
    let inputs: Vec<Term> = lows
        .iter()
        .zip(&ups)
        .map(|(&l, &u)| Term::Var(m.add_var(l, u, false)))
        .collect();
    let mp = encode_maxpool(&mut m, &inputs, &lows, &ups, (0, 0, 0)).unwrap();
    for (t, &v) in inputs.iter().zip(&vals) {
        if let Term::Var(id) = *t {
            m.vars[id].lb = v;
            m.vars[id].ub = v;
        }
    }
    let expected = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut worst: f64 = 0.0;
    for sign in [1.0, -1.0] {
        let mut mm = m.clone();
        mm.set_objective(vec![(mp.output, sign)], 0.0).unwrap();
        let s = solve_mip(&mut mm, &SolverConfig::default(), None).unwrap();
        worst = worst.max((s.values[mp.output] - expected).abs());
    }
    worst
}

/// Random multi-channel convolution problem with padding below the kernel
/// size.
pub fn random_conv_case(rng: &mut impl Rng) -> (Vec<Matrix>, ConvSpec, Vec<f64>) {
    let kernel_h = rng.random_range(1..=4);
    let kernel_w = rng.random_range(1..=4);
    let padding = rng.random_range(0..kernel_h.min(kernel_w));
    let spec = ConvSpec {
        in_channels: rng.random_range(1..=3),
        out_channels: rng.random_range(1..=3),
        kernel_h,
        kernel_w,
        input_h: rng.random_range(kernel_h..=7),
        input_w: rng.random_range(kernel_w..=7),
        padding,
        stride: 1,
    };
    let kernels = (0..spec.in_channels * spec.out_channels)
        .map(|_| uniform_matrix(rng, kernel_h, kernel_w, 2.0))
        .collect();
    let input = uniform_vec(rng, spec.input_len(), 2.0);
    (kernels, spec, input)
}

/// Textbook zero-padded convolution: cross-correlation with the kernel
/// rotated by 180 degrees.
pub fn direct_conv(kernels: &[Matrix], spec: &ConvSpec, input: &[f64]) -> Vec<f64> {
    let (h, w, p) = (spec.input_h as isize, spec.input_w as isize, spec.padding as isize);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (oh, ow) = (spec.output_h(), spec.output_w());
    let mut out = vec![0.0; spec.output_len()];
    for o in 0..spec.out_channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..spec.in_channels {
                    let k = &kernels[o * spec.in_channels + c];
                    for a in 0..kh {
                        for b in 0..kw {
                            let r = (i + a) as isize - p;
                            let q = (j + b) as isize - p;
                            if r < 0 || q < 0 || r >= h || q >= w {
                                continue;
                            }
                            let x = input[c * spec.input_h * spec.input_w + (r * w + q) as usize];
                            acc += k.get(kh - 1 - a, kw - 1 - b) * x;
                        }
                    }
                }
                out[o * oh * ow + i * ow + j] = acc;
            }
        }
    }
    out
}

/// Largest relative error between backprop and central differences,
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(net: &Network, xs: &[Vec<f64>], ys: &[usize], step: f64, floor: f64) -> f64 {
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (_, grad) = loss_and_gradient(net, &refs, ys).unwrap();
    let p = params(net);
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus[i] += step;
        let mut minus = p.clone();
        minus[i] -= step;
        let lp = loss_and_gradient(&with_params(net, &plus).unwrap(), &refs, ys).unwrap().0;
        let lm = loss_and_gradient(&with_params(net, &minus).unwrap(), &refs, ys).unwrap().0;
        let numeric = (lp - lm) / (2.0 * step);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
