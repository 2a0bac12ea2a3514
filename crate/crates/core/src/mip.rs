//! Mixed-integer model of a ReLU network with one importance variable per
//! prunable unit.
//!
//! For every point `k` and hidden neuron `(l, i)` with pre-activation bounds
//! `[L, U]` and `U+ = max(U, 0)` the encoding is
//!
//! ```text
//! h >= 0
//! h + (1 - z) L <= w.h' + b - (1 - s) U+
//! h <= z U
//! h >= w.h' + b - (1 - s) U+
//! ```
//!
//! where `h'` is the previous layer (the input is substituted as constants),
//! `z` is binary and `s` in `[0, 1]` is shared by all points. The objective
//! is
//!
//! ```text
//! (sum_l I_l - min_l I_l) / N + lambda * sum_k (lse(h_k) - h_k[y_k])
//! ```
//!
//! with `I_l = sum_i (s_li + r)` over prunable layers, `N` the number of
//! prunable units, the minimum carried by `t_min <= I_l`, and each `lse`
//! term by an epigraph variable bounded from below by tangent cuts.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bounds::IntervalBounds;
use crate::error::{invalid, Error, Result};
use crate::network::{forward, pool_windows, Activation, Layer, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    /// Activation (hidden, pooled or logit).
    H,
    /// ReLU phase indicator.
    Z,
    /// Importance score.
    S,
    /// Max-pool selector.
    M,
    /// Epigraph of log-sum-exp for one point.
    TLse,
    /// Epigraph of the smallest layer sum.
    TMin,
    /// Free-form variable for hand-built models.
    X,
}

/// Identity of a model variable. Index fields that do not apply to a kind
/// are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VarRef {
    pub id: usize,
    pub kind: VarKind,
    pub layer: usize,
    pub neuron: usize,
    pub point: usize,
    /// Window position for max-pool selectors.
    pub slot: usize,
}

impl VarRef {
    pub fn name(&self) -> String {
        let (l, i, k) = (self.layer, self.neuron, self.point);
        match self.kind {
            VarKind::H => format!("h_{l}_{i}_{k}"),
            VarKind::Z => format!("z_{l}_{i}_{k}"),
            VarKind::S => format!("s_{l}_{i}"),
            VarKind::M => format!("m_{l}_{i}_{}_{k}", self.slot),
            VarKind::TLse => format!("t_lse_{k}"),
            VarKind::TMin => "t_min".to_string(),
            VarKind::X => format!("x_{}", self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub var: VarRef,
    pub lb: f64,
    pub ub: f64,
    pub integer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sense::Le => "<=",
            Sense::Eq => "=",
            Sense::Ge => ">=",
        })
    }
}

/// Which part of the encoding produced a constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    /// `h + (1 - z) L <= w.h' + b - (1 - s) U+`
    ReluInactive,
    /// `h <= z U`
    ReluGate,
    /// `h >= w.h' + b - (1 - s) U+`
    ReluActive,
    /// Logit layer equality.
    Output,
    AvgPool,
    MaxPoolChoice,
    MaxPoolLower,
    MaxPoolUpper,
    /// `t_min <= I_l`
    MinLayer,
    LseCut,
    User,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::ReluInactive => "relu-inactive",
            Tag::ReluGate => "relu-gate",
            Tag::ReluActive => "relu-active",
            Tag::Output => "output",
            Tag::AvgPool => "avg-pool",
            Tag::MaxPoolChoice => "max-pool-choice",
            Tag::MaxPoolLower => "max-pool-lower",
            Tag::MaxPoolUpper => "max-pool-upper",
            Tag::MinLayer => "min-layer",
            Tag::LseCut => "lse-cut",
            Tag::User => "user",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinConstraint {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub tag: Tag,
}

impl LinConstraint {
    /// Builds a constraint, merging repeated variables and dropping zero
    /// coefficients.
    pub fn new(coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64, tag: Tag) -> Result<Self> {
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
        for (v, a) in coeffs {
            if !a.is_finite() {
                return invalid(format!("non-finite coefficient on variable {v}"));
            }
            match merged.iter_mut().find(|(w, _)| *w == v) {
                Some(e) => e.1 += a,
                None => merged.push((v, a)),
            }
        }
        merged.retain(|&(_, a)| a != 0.0);
        if merged.is_empty() {
            return invalid(format!("{tag} constraint has no variables"));
        }
        if !rhs.is_finite() {
            return invalid(format!("{tag} constraint has a non-finite right-hand side"));
        }
        Ok(Self {
            coeffs: merged,
            sense,
            rhs,
            tag,
        })
    }

    pub fn activity(&self, values: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(v, a)| a * values[v]).sum()
    }

    /// Amount by which `values` violate the constraint (0 when satisfied).
    pub fn violation(&self, values: &[f64]) -> f64 {
        let lhs = self.activity(values);
        match self.sense {
            Sense::Le => (lhs - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - lhs).max(0.0),
            Sense::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// A log-sum-exp epigraph: `t >= log sum_c exp(h_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LseGroup {
    pub t: usize,
    pub logits: Vec<usize>,
}

/// Offset `r` added to every score in the layer sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rescale {
    Minus2,
    Minus1,
    None,
}

impl Rescale {
    pub fn offset(self) -> f64 {
        match self {
            Rescale::Minus2 => -2.0,
            Rescale::Minus1 => -1.0,
            Rescale::None => 0.0,
        }
    }

    pub const ALL: [Rescale; 3] = [Rescale::Minus2, Rescale::Minus1, Rescale::None];
}

impl Default for Rescale {
    fn default() -> Self {
        Rescale::Minus2
    }
}

impl fmt::Display for Rescale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rescale::Minus2 => "minus2",
            Rescale::Minus1 => "minus1",
            Rescale::None => "none",
        })
    }
}

impl FromStr for Rescale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus2" | "-2" => Ok(Rescale::Minus2),
            "minus1" | "-1" => Ok(Rescale::Minus1),
            "none" | "0" => Ok(Rescale::None),
            _ => invalid(format!("unknown rescale mode {s:?} (expected minus2, minus1 or none)")),
        }
    }
}

/// Input points with their reference labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A layer output entry: either a model variable or a constant (the input).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Const(f64),
    Var(usize),
}

/// Where the network lives inside a model built by [`encode_network`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkIndex {
    /// `(layer, s ids per unit)` for every prunable layer.
    pub scores: Vec<(usize, Vec<usize>)>,
    pub t_min: Option<usize>,
    /// `outputs[k][l][row]` for every point and layer.
    pub outputs: Vec<Vec<Vec<Term>>>,
    /// `gates[k][l][row]` for ReLU layers.
    pub gates: Vec<Vec<Vec<usize>>>,
    /// `selectors[k][l][out]` for max-pool layers.
    pub selectors: Vec<Vec<Vec<Vec<usize>>>>,
    pub rescale: Option<Rescale>,
    pub prunable_units: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MipModel {
    pub vars: Vec<Variable>,
    pub constraints: Vec<LinConstraint>,
    pub objective: Vec<(usize, f64)>,
    pub objective_constant: f64,
    /// Outer-approximation cuts on the log-sum-exp groups.
    pub cuts: Vec<LinConstraint>,
    pub lse_groups: Vec<LseGroup>,
    /// Softmax weight (0 for hand-built models without a softmax term).
    pub lambda: f64,
    /// Reference label of each point.
    pub labels: Vec<usize>,
    pub index: NetworkIndex,
}

impl MipModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a free-form variable and returns its id.
    pub fn add_var(&mut self, lb: f64, ub: f64, integer: bool) -> usize {
        self.push_var(VarKind::X, 0, 0, 0, 0, lb, ub, integer)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_var(
        &mut self,
        kind: VarKind,
        layer: usize,
        neuron: usize,
        point: usize,
        slot: usize,
        lb: f64,
        ub: f64,
        integer: bool,
    ) -> usize {
        let id = self.vars.len();
        self.vars.push(Variable {
            var: VarRef {
                id,
                kind,
                layer,
                neuron,
                point,
                slot,
            },
            lb,
            ub,
            integer,
        });
        id
    }

    pub fn add_constraint(
        &mut self,
        coeffs: Vec<(usize, f64)>,
        sense: Sense,
        rhs: f64,
        tag: Tag,
    ) -> Result<usize> {
        if let Some(&(v, _)) = coeffs.iter().find(|(v, _)| *v >= self.vars.len()) {
            return invalid(format!("constraint references unknown variable {v}"));
        }
        self.constraints.push(LinConstraint::new(coeffs, sense, rhs, tag)?);
        Ok(self.constraints.len() - 1)
    }

    pub fn set_objective(&mut self, terms: Vec<(usize, f64)>, constant: f64) -> Result<()> {
        if let Some(&(v, _)) = terms.iter().find(|(v, _)| *v >= self.vars.len()) {
            return invalid(format!("objective references unknown variable {v}"));
        }
        self.objective = terms;
        self.objective_constant = constant;
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn count(&self, kind: VarKind) -> usize {
        self.vars.iter().filter(|v| v.var.kind == kind).count()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.iter().map(|v| v.var.name()).collect()
    }

    /// Linear objective value, `t_lse` taken as given.
    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.objective_constant + self.objective.iter().map(|&(v, c)| c * values[v]).sum::<f64>()
    }

    /// Objective with every `t_lse` replaced by the exact log-sum-exp of its
    /// logits.
    pub fn true_objective(&self, values: &[f64]) -> f64 {
        let mut exact = values.to_vec();
        self.set_exact_lse(&mut exact);
        self.objective_value(&exact)
    }

    /// Overwrites each `t_lse` with the exact log-sum-exp of its logits.
    pub fn set_exact_lse(&self, values: &mut [f64]) {
        for g in &self.lse_groups {
            let h: Vec<f64> = g.logits.iter().map(|&v| values[v]).collect();
            values[g.t] = lse(&h);
        }
    }

    /// Largest `lse(h) - t` over the groups.
    pub fn lse_violation(&self, values: &[f64]) -> f64 {
        self.lse_groups
            .iter()
            .map(|g| {
                let h: Vec<f64> = g.logits.iter().map(|&v| values[v]).collect();
                lse(&h) - values[g.t]
            })
            .fold(0.0, f64::max)
    }

    /// Checks bounds, integrality, constraints and cuts, reporting the first
    /// violation beyond `tol`.
    pub fn check_assignment(&self, values: &[f64], tol: f64) -> Result<()> {
        if values.len() != self.vars.len() {
            return invalid(format!(
                "assignment has {} values, model has {} variables",
                values.len(),
                self.vars.len()
            ));
        }
        for (j, v) in self.vars.iter().enumerate() {
            let x = values[j];
            let off = (v.lb - x).max(x - v.ub).max(0.0);
            let frac = if v.integer { (x - x.round()).abs() } else { 0.0 };
            if !x.is_finite() || off > tol || frac > tol {
                return Err(Error::InfeasibleAssignment {
                    index: j,
                    tag: format!("bounds of {}", v.var.name()),
                    violation: if x.is_finite() { off.max(frac) } else { f64::INFINITY },
                });
            }
        }
        for (i, c) in self.constraints.iter().chain(&self.cuts).enumerate() {
            let viol = c.violation(values);
            if viol > tol {
                return Err(Error::InfeasibleAssignment {
                    index: i,
                    tag: c.tag.to_string(),
                    violation: viol,
                });
            }
        }
        Ok(())
    }

    /// Importance scores as `(layer, per-unit values)`.
    pub fn scores(&self, values: &[f64]) -> Vec<(usize, Vec<f64>)> {
        self.index
            .scores
            .iter()
            .map(|(l, ids)| (*l, ids.iter().map(|&v| values[v]).collect()))
            .collect()
    }

    /// Sparsity and softmax parts of the objective, recomputed from the
    /// scores and logits alone.
    pub fn objective_parts(&self, values: &[f64]) -> (f64, f64) {
        let r = self.index.rescale.map_or(0.0, Rescale::offset);
        let sums: Vec<f64> = self
            .index
            .scores
            .iter()
            .map(|(_, ids)| ids.iter().map(|&v| values[v] + r).sum())
            .collect();
        let sparsity = if sums.is_empty() {
            0.0
        } else {
            let total: f64 = sums.iter().sum();
            let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
            (total - min) / self.index.prunable_units as f64
        };
        let softmax = self
            .lse_groups
            .iter()
            .zip(&self.labels)
            .map(|(g, &y)| {
                let h: Vec<f64> = g.logits.iter().map(|&v| values[v]).collect();
                lse(&h) - h[y]
            })
            .sum();
        (sparsity, softmax)
    }
}

/// Numerically stable `log sum exp`.
pub fn lse(h: &[f64]) -> f64 {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(h: &[f64]) -> Vec<f64> {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Tangent cut `t >= lse(a) + softmax(a).(h - a)` of one group at anchor `a`.
pub fn lse_cut(group: &LseGroup, anchor: &[f64]) -> Result<LinConstraint> {
    if anchor.len() != group.logits.len() || anchor.iter().any(|v| !v.is_finite()) {
        return invalid("cut anchor must be finite and match the group size");
    }
    let p = softmax(anchor);
    let rhs = lse(anchor) - p.iter().zip(anchor).map(|(a, b)| a * b).sum::<f64>();
    let mut coeffs = vec![(group.t, 1.0)];
    coeffs.extend(group.logits.iter().zip(&p).map(|(&v, &pc)| (v, -pc)));
    LinConstraint::new(coeffs, Sense::Ge, rhs, Tag::LseCut)
}

/// Adds a tangent cut for point `k` at `anchor` to the cut pool.
pub fn add_lse_cut(model: &mut MipModel, k: usize, anchor: &[f64]) -> Result<LinConstraint> {
    let group = model
        .lse_groups
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("no log-sum-exp group for point {k}")))?;
    let cut = lse_cut(group, anchor)?;
    model.cuts.push(cut.clone());
    Ok(cut)
}

/// Result of [`encode_maxpool`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolVars {
    pub output: usize,
    pub selectors: Vec<usize>,
}

/// Encodes `x = max_i h_i` given bounds `lowers[i] <= h_i <= uppers[i]`:
///
/// ```text
/// sum_i m_i = 1
/// x >= h_i
/// x <= h_i + (max_j U_j - L_i)(1 - m_i)
/// ```
///
/// The last family is the product envelope of `x <= h_i m_i + U (1 - m_i)`
/// with `U` the largest upper bound in the window, which keeps the selected
/// input tight and the others slack.
pub fn encode_maxpool(
    model: &mut MipModel,
    inputs: &[Term],
    lowers: &[f64],
    uppers: &[f64],
    (layer, neuron, point): (usize, usize, usize),
) -> Result<MaxPoolVars> {
    if inputs.is_empty() || lowers.len() != inputs.len() || uppers.len() != inputs.len() {
        return invalid("max-pool needs one lower and upper bound per input");
    }
    if lowers.iter().chain(uppers).any(|v| !v.is_finite()) {
        return invalid("max-pool bounds must be finite");
    }
    let top = uppers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = lowers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let output = model.push_var(VarKind::H, layer, neuron, point, 0, floor, top, false);
    let selectors: Vec<usize> = (0..inputs.len())
        .map(|slot| model.push_var(VarKind::M, layer, neuron, point, slot, 0.0, 1.0, true))
        .collect();
    model.add_constraint(
        selectors.iter().map(|&m| (m, 1.0)).collect(),
        Sense::Eq,
        1.0,
        Tag::MaxPoolChoice,
    )?;
    for (i, term) in inputs.iter().enumerate() {
        let (mut lower, mut upper) = (vec![(output, 1.0)], vec![(output, 1.0)]);
        let big = top - lowers[i];
        upper.push((selectors[i], big));
        let (mut lo_rhs, mut up_rhs) = (0.0, big);
        match *term {
            Term::Var(v) => {
                lower.push((v, -1.0));
                upper.push((v, -1.0));
            }
            Term::Const(c) => {
                lo_rhs += c;
                up_rhs += c;
            }
        }
        model.add_constraint(lower, Sense::Ge, lo_rhs, Tag::MaxPoolLower)?;
        model.add_constraint(upper, Sense::Le, up_rhs, Tag::MaxPoolUpper)?;
    }
    Ok(MaxPoolVars { output, selectors })
}

/// Bounds on the output of layer `l - 1` (the input box for `l = 0`) as
/// seen by layer `l`, for the encoded point `x`.
fn input_bounds(net: &Network, b: &IntervalBounds, l: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if l == 0 {
        return (x.to_vec(), x.to_vec());
    }
    let prev = &b.layers[l - 1];
    let relu = net.layers()[l - 1]
        .affine()
        .is_some_and(|a| a.activation == Activation::Relu);
    if relu {
        (
            prev.lower.iter().map(|v| v.max(0.0)).collect(),
            prev.upper.iter().map(|v| v.max(0.0)).collect(),
        )
    } else {
        (prev.lower.clone(), prev.upper.clone())
    }
}

/// Builds the scoring model for `batch` around `net`.
pub fn encode_network(
    net: &Network,
    batch: &Batch,
    bounds: &[IntervalBounds],
    lambda: f64,
    rescale: Rescale,
) -> Result<MipModel> {
    if batch.is_empty() {
        return invalid("batch is empty");
    }
    if batch.labels.len() != batch.len() {
        return invalid("batch needs one label per input");
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return invalid(format!("lambda must be positive, got {lambda}"));
    }
    if bounds.len() != batch.len() || bounds.iter().any(|b| !b.covers(net)) {
        return invalid("bounds must cover every layer and neuron of every point");
    }
    for (k, (x, &y)) in batch.inputs.iter().zip(&batch.labels).enumerate() {
        if x.len() != net.input_len() {
            return invalid(format!("point {k} has {} inputs, expected {}", x.len(), net.input_len()));
        }
        if y >= net.n_outputs() {
            return invalid(format!("label {y} of point {k} exceeds the {} outputs", net.n_outputs()));
        }
    }

    let mut model = MipModel::new();
    model.lambda = lambda;
    model.labels = batch.labels.clone();
    let r = rescale.offset();

    for l in net.prunable_layers() {
        let ids = (0..net.units(l))
            .map(|i| model.push_var(VarKind::S, l, i, 0, 0, 0.0, 1.0, false))
            .collect();
        model.index.scores.push((l, ids));
    }
    let n_prunable = net.prunable_units();
    model.index.prunable_units = n_prunable;
    model.index.rescale = Some(rescale);
    let t_min = model.push_var(VarKind::TMin, 0, 0, 0, 0, f64::NEG_INFINITY, f64::INFINITY, false);
    model.index.t_min = Some(t_min);
    let score_of: HashMap<usize, Vec<usize>> = model.index.scores.iter().cloned().collect();

    let n_layers = net.layers().len();
    for (k, x) in batch.inputs.iter().enumerate() {
        let b = &bounds[k];
        let mut outputs: Vec<Vec<Term>> = Vec::with_capacity(n_layers);
        let mut gates = vec![Vec::new(); n_layers];
        let mut selectors = vec![Vec::new(); n_layers];
        let mut in_shape = net.input_shape();
        for (l, layer) in net.layers().iter().enumerate() {
            let prev: Vec<Term> = match outputs.last() {
                Some(p) => p.clone(),
                None => x.iter().map(|&v| Term::Const(v)).collect(),
            };
            let out = match layer {
                Layer::Dense(_) | Layer::Conv(_) => {
                    let a = layer.affine().expect("affine layer");
                    let mut out = Vec::with_capacity(a.weight.rows());
                    for row in 0..a.weight.rows() {
                        // w.h' split into variable terms and a constant part.
                        let mut lin = Vec::new();
                        let mut constant = 0.0;
                        for (&w, t) in a.weight.row(row).iter().zip(&prev) {
                            match *t {
                                Term::Var(v) => lin.push((v, -w)),
                                Term::Const(c) => constant += w * c,
                            }
                        }
                        let base = constant + a.bias[row];
                        match a.activation {
                            Activation::None => {
                                let h = model.push_var(
                                    VarKind::H,
                                    l,
                                    row,
                                    k,
                                    0,
                                    f64::NEG_INFINITY,
                                    f64::INFINITY,
                                    false,
                                );
                                let mut c = vec![(h, 1.0)];
                                c.extend(&lin);
                                model.add_constraint(c, Sense::Eq, base, Tag::Output)?;
                                out.push(Term::Var(h));
                            }
                            Activation::Relu => {
                                let (lo, up) = (b.lower(l, row), b.upper(l, row));
                                let up_plus = up.max(0.0);
                                let h = model.push_var(VarKind::H, l, row, k, 0, 0.0, up_plus, false);
                                let (zl, zu) = if up <= 0.0 {
                                    (0.0, 0.0)
                                } else if lo >= 0.0 {
                                    (1.0, 1.0)
                                } else {
                                    (0.0, 1.0)
                                };
                                let z = model.push_var(VarKind::Z, l, row, k, 0, zl, zu, true);
                                gates[l].push(z);
                                let s = score_of[&l][a.unit_of_row(row)];
                                let mut inactive = vec![(h, 1.0), (z, -lo)];
                                inactive.extend(&lin);
                                inactive.push((s, -up_plus));
                                model.add_constraint(
                                    inactive,
                                    Sense::Le,
                                    base - up_plus - lo,
                                    Tag::ReluInactive,
                                )?;
                                model.add_constraint(
                                    vec![(h, 1.0), (z, -up)],
                                    Sense::Le,
                                    0.0,
                                    Tag::ReluGate,
                                )?;
                                let mut active = vec![(h, 1.0)];
                                active.extend(&lin);
                                active.push((s, -up_plus));
                                model.add_constraint(
                                    active,
                                    Sense::Ge,
                                    base - up_plus,
                                    Tag::ReluActive,
                                )?;
                                out.push(Term::Var(h));
                            }
                        }
                    }
                    out
                }
                Layer::AvgPool { window } => {
                    let windows = pool_windows(in_shape, *window);
                    let mut out = Vec::with_capacity(windows.len());
                    for (o, idx) in windows.iter().enumerate() {
                        let scale = 1.0 / idx.len() as f64;
                        let (lo, up) = (b.lower(l, o), b.upper(l, o));
                        let h = model.push_var(VarKind::H, l, o, k, 0, lo, up, false);
                        let mut c = vec![(h, 1.0)];
                        let mut rhs = 0.0;
                        for &i in idx {
                            match prev[i] {
                                Term::Var(v) => c.push((v, -scale)),
                                Term::Const(v) => rhs += scale * v,
                            }
                        }
                        model.add_constraint(c, Sense::Eq, rhs, Tag::AvgPool)?;
                        out.push(Term::Var(h));
                    }
                    out
                }
                Layer::MaxPool { window } => {
                    let windows = pool_windows(in_shape, *window);
                    let (lo, up) = input_bounds(net, b, l, x);
                    let mut out = Vec::with_capacity(windows.len());
                    for (o, idx) in windows.iter().enumerate() {
                        let inputs: Vec<Term> = idx.iter().map(|&i| prev[i]).collect();
                        let lows: Vec<f64> = idx.iter().map(|&i| lo[i]).collect();
                        let ups: Vec<f64> = idx.iter().map(|&i| up[i]).collect();
                        let mp = encode_maxpool(&mut model, &inputs, &lows, &ups, (l, o, k))?;
                        selectors[l].push(mp.selectors);
                        out.push(Term::Var(mp.output));
                    }
                    out
                }
                Layer::Flatten => prev,
            };
            outputs.push(out);
            in_shape = net.shapes()[l];
        }
        let logits: Vec<usize> = outputs[n_layers - 1]
            .iter()
            .map(|t| match *t {
                Term::Var(v) => v,
                Term::Const(_) => unreachable!("logits are always variables"),
            })
            .collect();
        let t = model.push_var(VarKind::TLse, 0, 0, k, 0, f64::NEG_INFINITY, f64::INFINITY, false);
        model.lse_groups.push(LseGroup { t, logits });
        model.index.outputs.push(outputs);
        model.index.gates.push(gates);
        model.index.selectors.push(selectors);
    }

    // t_min <= I_l for every prunable layer.
    for (l, ids) in model.index.scores.clone() {
        let mut c = vec![(t_min, 1.0)];
        c.extend(ids.iter().map(|&v| (v, -1.0)));
        let n_l = net.units(l) as f64;
        model.add_constraint(c, Sense::Le, r * n_l, Tag::MinLayer)?;
    }

    let n = n_prunable as f64;
    let mut objective: Vec<(usize, f64)> = Vec::new();
    for (_, ids) in &model.index.scores {
        objective.extend(ids.iter().map(|&v| (v, 1.0 / n)));
    }
    objective.push((t_min, -1.0 / n));
    for (g, &y) in model.lse_groups.iter().zip(&batch.labels) {
        objective.push((g.t, lambda));
        objective.push((g.logits[y], -lambda));
    }
    // Sum over layers of r * N_l, divided by N.
    model.set_objective(objective, r)?;

    // Initial cuts at the reference logits.
    for (k, x) in batch.inputs.iter().enumerate() {
        let logits = forward(net, x, None)?.logits().to_vec();
        add_lse_cut(&mut model, k, &logits)?;
    }
    Ok(model)
}

/// The "no pruning" assignment: every score 1, gates and selectors from the
/// observed forward pass, activations and `t_lse` exact.
pub fn reference_assignment(model: &MipModel, net: &Network, batch: &Batch) -> Result<Vec<f64>> {
    if model.index.outputs.len() != batch.len() {
        return invalid("model was not built for this batch");
    }
    let mut values = vec![0.0; model.n_vars()];
    for (_, ids) in &model.index.scores {
        for &v in ids {
            values[v] = 1.0;
        }
    }
    for (k, x) in batch.inputs.iter().enumerate() {
        let trace = forward(net, x, None)?;
        for (l, layer) in net.layers().iter().enumerate() {
            for (row, t) in model.index.outputs[k][l].iter().enumerate() {
                if let Term::Var(v) = *t {
                    values[v] = trace.post[l][row];
                }
            }
            for (row, &z) in model.index.gates[k][l].iter().enumerate() {
                let var = &model.vars[z];
                values[z] = if var.lb == var.ub {
                    var.lb
                } else if trace.pre[l][row] > 0.0 {
                    1.0
                } else {
                    0.0
                };
            }
            if let Layer::MaxPool { window } = layer {
                let in_shape = if l == 0 { net.input_shape() } else { net.shapes()[l - 1] };
                let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
                for (o, idx) in pool_windows(in_shape, *window).iter().enumerate() {
                    let mut best = 0;
                    for (slot, &i) in idx.iter().enumerate() {
                        if input[i] > input[idx[best]] {
                            best = slot;
                        }
                    }
                    values[model.index.selectors[k][l][o][best]] = 1.0;
                }
            }
        }
    }
    model.set_exact_lse(&mut values);
    if let Some(t) = model.index.t_min {
        let r = model.index.rescale.map_or(0.0, Rescale::offset);
        values[t] = model
            .index
            .scores
            .iter()
            .map(|(_, ids)| ids.iter().map(|&v| values[v] + r).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if !values[t].is_finite() {
            values[t] = 0.0;
        }
    }
    Ok(values)
}

fn write_term(out: &mut String, first: bool, coef: f64, name: &str) {
    let sign = if coef < 0.0 { '-' } else { '+' };
    if first && coef >= 0.0 {
        let _ = write!(out, " {} {name}", coef);
    } else {
        let _ = write!(out, " {sign} {} {name}", coef.abs());
    }
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Writes the model (with its current cut pool) in LP text format.
pub fn export_lp(model: &MipModel) -> String {
    let names = model.names();
    let mut out = String::new();
    let _ = writeln!(out, "\\ objective constant {}", model.objective_constant);
    out.push_str("Minimize\n obj:");
    if model.objective.is_empty() {
        let _ = write!(out, " 0 {}", names.first().map_or("x_0", String::as_str));
    }
    for (i, &(v, c)) in model.objective.iter().enumerate() {
        write_term(&mut out, i == 0, c, &names[v]);
    }
    out.push_str("\nSubject To\n");
    let rows = model
        .constraints
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("c{i}"), c))
        .chain(model.cuts.iter().enumerate().map(|(i, c)| (format!("cut{i}"), c)));
    for (name, c) in rows {
        let _ = write!(out, " {name}:");
        for (i, &(v, a)) in c.coeffs.iter().enumerate() {
            write_term(&mut out, i == 0, a, &names[v]);
        }
        let _ = writeln!(out, " {} {}", c.sense, c.rhs);
    }
    out.push_str("Bounds\n");
    for (v, name) in model.vars.iter().zip(&names) {
        if v.lb == f64::NEG_INFINITY && v.ub == f64::INFINITY {
            let _ = writeln!(out, " {name} free");
        } else {
            let _ = writeln!(out, " {} <= {name} <= {}", fmt_bound(v.lb), fmt_bound(v.ub));
        }
    }
    let binaries: Vec<&String> = model
        .vars
        .iter()
        .zip(&names)
        .filter(|(v, _)| v.integer)
        .map(|(_, n)| n)
        .collect();
    if !binaries.is_empty() {
        out.push_str("Binaries\n");
        for n in binaries {
            let _ = writeln!(out, " {n}");
        }
    }
    out.push_str("End\n");
    out
}

pub fn save_lp(model: &MipModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, export_lp(model))?;
    Ok(())
}

/// Solution file: a `# objective <v>` header and one `name value` per line.
pub fn write_solution(model: &MipModel, values: &[f64], objective: f64) -> String {
    let mut out = format!("# objective {objective}\n");
    for (v, x) in model.vars.iter().zip(values) {
        let _ = writeln!(out, "{} {x}", v.var.name());
    }
    out
}

/// Parses a solution file against `model`. Variables missing from the file
/// are taken as zero; unknown names are an error.
pub fn read_solution(model: &MipModel, text: &str) -> Result<(Vec<f64>, Option<f64>)> {
    let index: HashMap<String, usize> = model.names().into_iter().zip(0..).collect();
    let mut values = vec![0.0; model.n_vars()];
    let mut objective = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let parse_err = |column: usize, message: String| Error::Parse {
            line: n + 1,
            column,
            message,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("objective") {
                objective = Some(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(1, format!("bad objective value: {e}")))?,
                );
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(val), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(1, "expected `name value`".into()));
        };
        let &id = index
            .get(name)
            .ok_or_else(|| parse_err(1, format!("unknown variable {name}")))?;
        values[id] = val
            .parse::<f64>()
            .map_err(|e| parse_err(name.len() + 2, format!("bad value for {name}: {e}")))?;
    }
    Ok((values, objective))
}
