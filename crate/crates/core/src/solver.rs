//! Exact branch-and-bound for small [`MipModel`]s.
//!
//! Nodes are explored best-first on their parent's LP bound (ties by node
//! id), branching on the most fractional integer variable (ties by lowest
//! id). Node LPs are warm-started from a master tableau by tightening
//! bounds and re-optimizing with the dual simplex; a node whose warm solve
//! fails the residual check is re-solved from scratch. At integer-feasible
//! nodes the log-sum-exp groups are checked and tangent cuts are added
//! until the largest violation is within `oa_tol` or the cut budget is
//! spent.

pub mod lp;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mip::{add_lse_cut, LinConstraint, MipModel};
use lp::{LpProblem, LpRow, LpSolution, LpStatus, Tableau};

/// Tolerances and limits for [`solve_mip`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative optimality gap at which the search stops.
    pub gap_tol: f64,
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
    /// Largest accepted `lse(h) - t` at an incumbent.
    pub oa_tol: f64,
    pub max_cut_rounds: usize,
    /// Distance from an integer below which a value counts as integral.
    pub int_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gap_tol: 1e-6,
            node_limit: 100_000,
            time_limit: None,
            oa_tol: 1e-6,
            max_cut_rounds: 50,
            int_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    NodeLimit,
    TimeLimit,
    /// The cut budget ran out before the log-sum-exp terms converged.
    CutLimit,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLogEntry {
    pub node: usize,
    pub depth: usize,
    /// LP bound of the node (`inf` when infeasible).
    pub bound: f64,
    pub incumbent: Option<f64>,
    /// Global lower bound after the node was processed.
    pub best_bound: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Incumbent objective with exact log-sum-exp terms.
    pub objective: f64,
    /// Best proven lower bound.
    pub bound: f64,
    pub gap: f64,
    pub nodes: usize,
    pub cut_rounds: usize,
    pub status: SolveStatus,
    pub node_log: Vec<NodeLogEntry>,
    pub wall_time: Duration,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Renders the node log, one line per node.
pub fn node_log_text(log: &[NodeLogEntry]) -> String {
    let mut out = String::from("node depth bound best_bound incumbent gap\n");
    for e in log {
        let inc = e.incumbent.map_or("-".to_string(), |v| format!("{v:.9}"));
        let _ = writeln!(
            out,
            "{} {} {:.9} {:.9} {inc} {:.3e}",
            e.node, e.depth, e.bound, e.best_bound, e.gap
        );
    }
    out
}

/// A feasible starting point for the search.
#[derive(Debug, Clone, PartialEq)]
pub struct Incumbent {
    pub values: Vec<f64>,
    pub objective: f64,
}

/// Validates `assignment` (with exact log-sum-exp terms) and returns it as
/// an incumbent.
pub fn warm_start(model: &MipModel, assignment: &[f64]) -> Result<Incumbent> {
    let mut values = assignment.to_vec();
    if values.len() == model.n_vars() {
        model.set_exact_lse(&mut values);
    }
    model.check_assignment(&values, 1e-7)?;
    let objective = model.objective_value(&values);
    Ok(Incumbent { values, objective })
}

fn lp_row(c: &LinConstraint) -> LpRow {
    LpRow {
        coeffs: c.coeffs.clone(),
        sense: c.sense,
        rhs: c.rhs,
    }
}

/// LP relaxation of `model` (constraints and cuts) with extra bound
/// fixings.
pub fn relaxation(model: &MipModel, fixings: &[(usize, f64, f64)]) -> LpProblem {
    let n = model.n_vars();
    let mut cost = vec![0.0; n];
    for &(v, c) in &model.objective {
        cost[v] += c;
    }
    let mut lb: Vec<f64> = model.vars.iter().map(|v| v.lb).collect();
    let mut ub: Vec<f64> = model.vars.iter().map(|v| v.ub).collect();
    for &(v, l, u) in fixings {
        lb[v] = lb[v].max(l);
        ub[v] = ub[v].min(u);
    }
    let rows = model.constraints.iter().chain(&model.cuts).map(lp_row).collect();
    LpProblem { cost, lb, ub, rows }
}

/// Solves the LP relaxation with variables pinned to the given values.
pub fn solve_lp(model: &MipModel, fixings: &[(usize, f64)]) -> LpSolution {
    let fix: Vec<(usize, f64, f64)> = fixings.iter().map(|&(v, x)| (v, x, x)).collect();
    let mut sol = lp::solve(&relaxation(model, &fix));
    if sol.status == LpStatus::Optimal {
        sol.objective += model.objective_constant;
    }
    sol
}

#[derive(Debug, Clone)]
struct Node {
    id: usize,
    depth: usize,
    bound: f64,
    fixings: Vec<(usize, f64, f64)>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap order reversed: smallest bound first, then smallest id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

fn feasibility_scale(problem: &LpProblem) -> f64 {
    let rhs = problem.rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
    1e-6 * (1.0 + rhs)
}

/// Solves a node LP from the master tableau, falling back to a cold solve
/// when the warm result does not check out.
fn solve_node(
    model: &MipModel,
    master: Option<&Tableau>,
    fixings: &[(usize, f64, f64)],
) -> (LpSolution, Option<Tableau>) {
    let problem = relaxation(model, fixings);
    if let Some(master) = master {
        let mut tab = master.clone();
        for &(v, _, _) in fixings {
            tab.set_bounds(v, problem.lb[v], problem.ub[v]);
        }
        let sol = tab.reoptimize();
        let ok = match sol.status {
            LpStatus::Optimal => problem.max_violation(&sol.x) <= feasibility_scale(&problem),
            LpStatus::Infeasible => {
                // Confirm infeasibility cold; warm dual rays can be fooled by drift.
                false
            }
            _ => false,
        };
        if ok {
            return (sol, Some(tab));
        }
    }
    Tableau::solve(&problem)
}

fn most_fractional(model: &MipModel, x: &[f64], tol: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in model.vars.iter().enumerate() {
        if !v.integer {
            continue;
        }
        let frac = (x[j] - x[j].floor()).min(x[j].ceil() - x[j]);
        if frac > tol && best.is_none_or(|(_, f)| frac > f + 1e-12) {
            best = Some((j, frac));
        }
    }
    best.map(|(j, _)| j)
}

fn relative_gap(incumbent: f64, bound: f64) -> f64 {
    ((incumbent - bound) / incumbent.abs().max(1.0)).max(0.0)
}

/// Branch-and-bound with the log-sum-exp cut loop. Cuts found during the
/// search are appended to `model.cuts`.
pub fn solve_mip(
    model: &mut MipModel,
    config: &SolverConfig,
    start: Option<Incumbent>,
) -> Result<Solution> {
    let clock = Instant::now();
    if model.vars.iter().any(|v| v.lb > v.ub) {
        return Err(Error::NoIncumbent("a variable has empty bounds".into()));
    }
    let mut incumbent = start;
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        id: 0,
        depth: 0,
        bound: f64::NEG_INFINITY,
        fixings: Vec::new(),
    });
    let mut next_id = 1;
    let mut nodes = 0;
    let mut cut_rounds = 0;
    let mut log = Vec::new();
    let mut master: Option<Tableau> = None;
    // Bounds of integer-feasible nodes whose cut loop was cut short.
    let mut open_bound = f64::INFINITY;
    let mut status = SolveStatus::Optimal;

    while let Some(node) = heap.pop() {
        if let Some(inc) = &incumbent {
            let tol = config.gap_tol * inc.objective.abs().max(1.0);
            if node.bound >= inc.objective - tol {
                heap.clear();
                break;
            }
        }
        if nodes >= config.node_limit {
            status = SolveStatus::NodeLimit;
            heap.push(node);
            break;
        }
        if config.time_limit.is_some_and(|t| clock.elapsed() >= t) {
            status = SolveStatus::TimeLimit;
            heap.push(node);
            break;
        }
        nodes += 1;

        let (mut sol, mut tab) = solve_node(model, master.as_ref(), &node.fixings);
        let mut node_bound;
        loop {
            match sol.status {
                LpStatus::Optimal => {}
                LpStatus::Infeasible => {
                    node_bound = f64::INFINITY;
                    break;
                }
                LpStatus::Unbounded => {
                    return invalid("LP relaxation is unbounded; every variable needs finite bounds or a bounded objective");
                }
                LpStatus::IterationLimit => {
                    return Err(Error::NoIncumbent("simplex iteration limit reached".into()));
                }
            }
            if master.is_none() && node.id == 0 {
                master = tab.clone();
            }
            node_bound = sol.objective + model.objective_constant;
            let pruned = incumbent.as_ref().is_some_and(|inc| {
                node_bound >= inc.objective - config.gap_tol * inc.objective.abs().max(1.0)
            });
            if pruned {
                break;
            }
            if let Some(j) = most_fractional(model, &sol.x, config.int_tol) {
                let v = sol.x[j];
                for (lo, hi) in [(f64::NEG_INFINITY, v.floor()), (v.ceil(), f64::INFINITY)] {
                    let mut fixings = node.fixings.clone();
                    fixings.push((j, lo, hi));
                    heap.push(Node {
                        id: next_id,
                        depth: node.depth + 1,
                        bound: node_bound,
                        fixings,
                    });
                    next_id += 1;
                }
                break;
            }
            // Integer feasible: check the log-sum-exp groups.
            let mut x = sol.x.clone();
            for (j, v) in model.vars.iter().enumerate() {
                if v.integer {
                    x[j] = x[j].round();
                }
            }
            let violated: Vec<(usize, Vec<f64>)> = model
                .lse_groups
                .iter()
                .enumerate()
                .filter_map(|(k, g)| {
                    let h: Vec<f64> = g.logits.iter().map(|&v| x[v]).collect();
                    (crate::mip::lse(&h) - x[g.t] > config.oa_tol).then_some((k, h))
                })
                .collect();
            let mut exact = x.clone();
            model.set_exact_lse(&mut exact);
            let candidate = model.objective_value(&exact);
            if incumbent.as_ref().is_none_or(|inc| candidate < inc.objective) {
                incumbent = Some(Incumbent {
                    values: exact,
                    objective: candidate,
                });
            }
            if violated.is_empty() {
                break;
            }
            if cut_rounds >= config.max_cut_rounds {
                open_bound = open_bound.min(node_bound);
                status = SolveStatus::CutLimit;
                break;
            }
            cut_rounds += 1;
            for (k, h) in violated {
                let cut = add_lse_cut(model, k, &h)?;
                if let Some(m) = master.as_mut() {
                    m.add_row(&cut.coeffs, cut.sense, cut.rhs);
                }
                if let Some(t) = tab.as_mut() {
                    t.add_row(&cut.coeffs, cut.sense, cut.rhs);
                }
            }
            let warm = tab.as_mut().map(Tableau::reoptimize);
            let problem = relaxation(model, &node.fixings);
            match warm {
                Some(s)
                    if s.status == LpStatus::Optimal
                        && problem.max_violation(&s.x) <= feasibility_scale(&problem) =>
                {
                    sol = s;
                }
                _ => {
                    let (s, t) = Tableau::solve(&problem);
                    sol = s;
                    tab = t;
                }
            }
        }

        let inc_obj = incumbent.as_ref().map(|i| i.objective);
        let frontier = heap
            .peek()
            .map_or(f64::INFINITY, |n: &Node| n.bound)
            .min(open_bound);
        log.push(NodeLogEntry {
            node: node.id,
            depth: node.depth,
            bound: node_bound,
            incumbent: inc_obj,
            best_bound: inc_obj.map_or(frontier, |v| frontier.min(v)),
            gap: inc_obj.map_or(f64::INFINITY, |v| relative_gap(v, frontier.min(v))),
        });
    }

    let Some(inc) = incumbent else {
        return Err(Error::NoIncumbent(format!(
            "no integer-feasible point found after {nodes} nodes"
        )));
    };
    let frontier = heap.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
    let bound = frontier.min(open_bound).min(inc.objective);
    let gap = relative_gap(inc.objective, bound);
    if status == SolveStatus::CutLimit && gap <= config.gap_tol {
        status = SolveStatus::Optimal;
    }
    Ok(Solution {
        values: inc.values,
        objective: inc.objective,
        bound,
        gap,
        nodes,
        cut_rounds,
        status,
        node_log: log,
        wall_time: clock.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mip::{Sense, Tag};

    #[test]
    fn knapsack_toy() {
        let mut m = MipModel::new();
        let x = m.add_var(0.0, 1.0, true);
        let y = m.add_var(0.0, 1.0, true);
        m.add_constraint(vec![(x, 1.0), (y, 1.0)], Sense::Le, 1.0, Tag::User)
            .unwrap();
        m.set_objective(vec![(x, -3.0), (y, -2.0)], 0.0).unwrap();
        let s = solve_mip(&mut m, &SolverConfig::default(), None).unwrap();
        assert!((s.objective + 3.0).abs() < 1e-9);
        assert_eq!(s.values[x], 1.0);
        assert!(s.is_optimal());
    }

    #[test]
    fn fixed_binaries_solve_at_root() {
        let mut m = MipModel::new();
        let z = m.add_var(1.0, 1.0, true);
        let h = m.add_var(0.0, 5.0, false);
        m.add_constraint(vec![(h, 1.0), (z, -2.0)], Sense::Le, 0.0, Tag::User)
            .unwrap();
        m.set_objective(vec![(h, -1.0)], 0.0).unwrap();
        let s = solve_mip(&mut m, &SolverConfig::default(), None).unwrap();
        assert_eq!(s.nodes, 1);
        assert!((s.objective + 2.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_model_has_no_incumbent() {
        let mut m = MipModel::new();
        let z = m.add_var(0.0, 1.0, true);
        m.add_constraint(vec![(z, 2.0)], Sense::Eq, 1.0, Tag::User).unwrap();
        assert!(matches!(
            solve_mip(&mut m, &SolverConfig::default(), None),
            Err(Error::NoIncumbent(_))
        ));
    }

    #[test]
    fn warm_start_rejects_violations() {
        let mut m = MipModel::new();
        let x = m.add_var(0.0, 1.0, false);
        m.add_constraint(vec![(x, 1.0)], Sense::Ge, 0.5, Tag::User).unwrap();
        let err = warm_start(&m, &[0.25]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAssignment { index: 0, .. }));
        let inc = warm_start(&m, &[0.75]).unwrap();
        assert_eq!(inc.objective, 0.0);
    }
}
