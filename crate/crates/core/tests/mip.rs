mod common;

use std::collections::HashSet;

use mipprune::bounds::propagate_batch;
use mipprune::linalg::Matrix;
use mipprune::mip::*;
use mipprune::network::{forward, Activation, DenseLayer, Layer, Network, Shape};
use mipprune::solver::{solve_mip, warm_start, SolverConfig};
use rand::{Rng, SeedableRng};
use regex::Regex;
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_assignment_is_feasible_and_reproduces_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..40 {
        let net = if case % 2 == 0 {
            common::random_conv_net(&mut rng)
        } else {
            common::random_mlp(&mut rng, 3)
        };
        let batch = common::random_batch(&mut rng, &net);
        for eps in [0.0, 0.1] {
            let bounds = propagate_batch(&net, &batch.inputs, eps).unwrap();
            let model = encode_network(&net, &batch, &bounds, 5.0, Rescale::Minus2).unwrap();
            let reference = reference_assignment(&model, &net, &batch).unwrap();
            model.check_assignment(&reference, 1e-9).unwrap();
            let logits = common::pinned_logits(&model, &reference);
            for (k, x) in batch.inputs.iter().enumerate() {
                let expected = forward(&net, x, None).unwrap().logits().to_vec();
                for (a, b) in logits[k].iter().zip(&expected) {
                    assert!((a - b).abs() <= 1e-9, "case {case} eps {eps}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn unit_scores_reduce_to_the_plain_relu_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let net = common::random_mlp(&mut rng, 3);
    let batch = common::random_batch(&mut rng, &net);
    let bounds = propagate_batch(&net, &batch.inputs, 0.2).unwrap();
    let model = encode_network(&net, &batch, &bounds, 5.0, Rescale::None).unwrap();
    let is_s = |v: usize| model.vars[v].var.kind == VarKind::S;
    for c in &model.constraints {
        if !matches!(c.tag, Tag::ReluInactive | Tag::ReluActive) {
            continue;
        }
        // Substitute s = 1: the s term moves to the right-hand side.
        let s_coef: f64 = c.coeffs.iter().filter(|(v, _)| is_s(*v)).map(|(_, a)| a).sum();
        let rhs = c.rhs - s_coef;
        let h = c.coeffs[0].0;
        let var = model.vars[h].var;
        let (l, i, k) = (var.layer, var.neuron, var.point);
        let (lo, up) = (bounds[k].lower(l, i), bounds[k].upper(l, i));
        // Plain encoding: h - z L - w.h' <= b + w.x - L and h - w.h' >= b + w.x,
        // i.e. the right-hand sides differ by exactly -L.
        let a = net.layers()[l].affine().unwrap();
        let prev_const: f64 = if l == 0 {
            a.weight.row(i).iter().zip(&batch.inputs[k]).map(|(w, x)| w * x).sum()
        } else {
            0.0
        };
        let plain = a.bias[i] + prev_const;
        match c.tag {
            Tag::ReluActive => assert!((rhs - plain).abs() <= 1e-12),
            Tag::ReluInactive => assert!((rhs - (plain - lo)).abs() <= 1e-12),
            _ => unreachable!(),
        }
        assert!(up.is_finite());
    }
}

#[test]
fn dead_neuron_admits_zero_score() {
    // Neuron 1 of the hidden layer has a large negative bias: dead everywhere.
    let hidden = DenseLayer {
        weight: Matrix::from_rows(&[vec![1.0, 1.0], vec![0.5, -0.5]]).unwrap(),
        bias: vec![0.1, -10.0],
        activation: Activation::Relu,
    };
    let head = DenseLayer {
        weight: Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 3.0]]).unwrap(),
        bias: vec![0.0, 0.0],
        activation: Activation::None,
    };
    let net = Network::new(Shape::Flat(2), vec![Layer::Dense(hidden), Layer::Dense(head)], 0).unwrap();
    let batch = Batch {
        inputs: vec![vec![0.3, 0.2], vec![-0.1, 0.4]],
        labels: vec![0, 1],
    };
    let bounds = propagate_batch(&net, &batch.inputs, 0.05).unwrap();
    let model = encode_network(&net, &batch, &bounds, 5.0, Rescale::Minus2).unwrap();
    let mut values = reference_assignment(&model, &net, &batch).unwrap();
    let dead = model.index.scores[0].1[1];
    values[dead] = 0.0;
    // The layer-sum epigraph follows the lowered score.
    values[model.index.t_min.unwrap()] -= 1.0;
    model.check_assignment(&values, 1e-12).unwrap();
    assert!(model
        .constraints
        .iter()
        .filter(|c| c.tag != Tag::MinLayer)
        .all(|c| c.coeffs.iter().all(|&(v, _)| v != dead)));
}

#[test]
fn cuts_are_tangent_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let n = rng.random_range(2..=5);
        let g = LseGroup {
            t: 0,
            logits: (1..=n).collect(),
        };
        let anchor = common::uniform_vec(&mut rng, n, 5.0);
        let cut = lse_cut(&g, &anchor).unwrap();
        let value_at = |h: &[f64]| {
            // Smallest t the cut allows.
            let mut v = vec![0.0; n + 1];
            v[1..].copy_from_slice(h);
            cut.rhs - cut.activity(&v)
        };
        assert!((value_at(&anchor) - lse(&anchor)).abs() <= 1e-12);
        for _ in 0..100 {
            let h = common::uniform_vec(&mut rng, n, 10.0);
            assert!(value_at(&h) <= lse(&h) + 1e-9);
        }
    }
}

#[test]
fn maxpool_optimum_is_the_arithmetic_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        assert!(common::maxpool_fixing_error(&mut rng) <= 1e-9);
    }
}

#[test]
fn maxpool_of_zeros_is_zero_for_every_selector() {
    let mut m = MipModel::new();
    let mp = encode_maxpool(&mut m, &[Term::Const(0.0); 3], &[0.0; 3], &[0.0; 3], (0, 0, 0)).unwrap();
    for pick in 0..3 {
        let mut v = vec![0.0; m.n_vars()];
        v[mp.selectors[pick]] = 1.0;
        m.check_assignment(&v, 0.0).unwrap();
        v[mp.output] = 0.5;
        assert!(m.check_assignment(&v, 1e-9).is_err());
    }
}

/// Strict checker for the subset of the LP format we emit. Returns the
/// declared binaries and the number of rows.
fn check_lp_grammar(text: &str) -> Result<(HashSet<String>, usize), String> {
    let name = r"[A-Za-z_][A-Za-z0-9_]*";
    let num = r"[0-9]+(?:\.[0-9]+)?(?:e-?[0-9]+)?";
    let term = format!(r"(?:[-+] )?{num} {name}");
    let re = |p: String| Regex::new(&p).unwrap();
    let objective = re(format!(r"^ obj:(?: {term})+$"));
    let row = re(format!(r"^ (?:c|cut)[0-9]+:(?: {term})+ (?:<=|>=|=) -?{num}$"));
    let bound = re(format!(r"^ (?:(?:-inf|-?{num}) <= {name} <= (?:\+inf|-?{num})|{name} free)$"));
    let binary = re(format!(r"^ ({name})$"));
    let order = ["", "Minimize", "Subject To", "Bounds", "Binaries", "End"];
    let mut section = 0;
    let mut binaries = HashSet::new();
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        if let Some(pos) = order.iter().position(|o| *o == line) {
            if pos <= section {
                return Err(format!("line {}: section out of order", n + 1));
            }
            section = pos;
            continue;
        }
        if line.starts_with('\\') && section == 0 {
            continue;
        }
        let ok = match order[section] {
            "Minimize" => objective.is_match(line),
            "Subject To" => {
                rows += 1;
                row.is_match(line)
            }
            "Bounds" => bound.is_match(line),
            "Binaries" => binary
                .captures(line)
                .is_some_and(|c| binaries.insert(c[1].to_string())),
            _ => false,
        };
        if !ok {
            return Err(format!("line {}: does not parse: {line:?}", n + 1));
        }
    }
    if order[section] != "End" {
        return Err("missing End".into());
    }
    Ok((binaries, rows))
}

#[test]
fn lp_export_parses_and_lists_binaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..10 {
        let net = common::random_conv_net(&mut rng);
        let batch = common::random_batch(&mut rng, &net);
        let bounds = propagate_batch(&net, &batch.inputs, 0.05).unwrap();
        let model = encode_network(&net, &batch, &bounds, 5.0, Rescale::Minus2).unwrap();
        let text = export_lp(&model);
        let (binaries, rows) = check_lp_grammar(&text).unwrap();
        let expected: HashSet<String> = model
            .vars
            .iter()
            .filter(|v| matches!(v.var.kind, VarKind::Z | VarKind::M))
            .map(|v| v.var.name())
            .collect();
        assert_eq!(binaries, expected);
        assert_eq!(rows, model.constraints.len() + model.cuts.len());
    }
}

fn small_scoring_problem(seed: u64) -> (Network, Batch, MipModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = common::random_mlp(&mut rng, 2);
    let batch = common::random_batch(&mut rng, &net);
    let bounds = propagate_batch(&net, &batch.inputs, 0.0).unwrap();
    let model = encode_network(&net, &batch, &bounds, 5.0, Rescale::Minus2).unwrap();
    (net, batch, model)
}

#[test]
fn solved_objective_decomposes_and_beats_warm_start() {
    for seed in 0..10 {
        let (net, batch, mut model) = small_scoring_problem(100 + seed);
        let reference = reference_assignment(&model, &net, &batch).unwrap();
        let inc = warm_start(&model, &reference).unwrap();
        let start = inc.objective;
        let s = solve_mip(&mut model, &SolverConfig::default(), Some(inc)).unwrap();
        assert!(s.objective <= start + 1e-12);
        let (sparsity, softmax) = model.objective_parts(&s.values);
        assert!(
            (s.objective - (sparsity + model.lambda * softmax)).abs() <= 1e-9,
            "seed {seed}: {} vs {}",
            s.objective,
            sparsity + model.lambda * softmax
        );
        model.check_assignment(&s.values, 1e-6).unwrap();
    }
}

#[test]
fn exported_incumbent_round_trips() {
    let (net, batch, mut model) = small_scoring_problem(7);
    let reference = reference_assignment(&model, &net, &batch).unwrap();
    let inc = warm_start(&model, &reference).unwrap();
    let s = solve_mip(&mut model, &SolverConfig::default(), Some(inc)).unwrap();
    let text = write_solution(&model, &s.values, s.objective);
    let (values, header) = read_solution(&model, &text).unwrap();
    assert_eq!(header, Some(s.objective));
    assert!((model.true_objective(&values) - s.objective).abs() <= 1e-9);
    assert_eq!(model.scores(&values), model.scores(&s.values));
}
