//! Dense bounded-variable simplex on a full tableau.
//!
//! Rows are kept as `B^-1 A`; nonbasic columns sit at one of their bounds
//! (or at zero when free). A cold start runs a two-phase primal simplex
//! from a slack/artificial crash basis. Warm starts after adding a row or
//! tightening a bound use the dual simplex, which keeps the reduced costs
//! feasible while repairing primal infeasibility.
//!
//! Pricing is Dantzig's rule until `2 (m + n)` consecutive degenerate
//! pivots have been made, after which Bland's lowest-index rule is used
//! until the next non-degenerate pivot.

use crate::mip::Sense;

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const DEGENERATE_STEP: f64 = 1e-12;

/// `sum coeffs . x  (sense)  rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// `min cost . x` subject to rows and `lb <= x <= ub` (bounds may be
/// infinite).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpProblem {
    pub cost: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub rows: Vec<LpRow>,
}

impl LpProblem {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    /// Largest absolute row or bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lb[j] - v).max(v - self.ub[j]);
        }
        for row in &self.rows {
            let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            let v = match row.sense {
                Sense::Le => lhs - row.rhs,
                Sense::Ge => row.rhs - lhs,
                Sense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Structural variable values (meaningful when optimal).
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic(usize),
    AtLower,
    AtUpper,
    /// Free nonbasic column resting at zero.
    Zero,
}

/// Simplex tableau with enough state to be re-optimized after edits.
#[derive(Debug, Clone)]
pub struct Tableau {
    t: Vec<Vec<f64>>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
    /// Current values of nonbasic columns.
    value: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    cost: Vec<f64>,
    d: Vec<f64>,
    n_struct: usize,
    iterations: usize,
    max_iterations: usize,
}

enum Step {
    Done,
    Continue,
    Unbounded,
    Infeasible,
}

impl Tableau {
    /// Runs the two-phase primal simplex from scratch.
    pub fn solve(problem: &LpProblem) -> (LpSolution, Option<Tableau>) {
        let n = problem.n_vars();
        if (0..n).any(|j| problem.lb[j] > problem.ub[j]) {
            return (infeasible(n, 0), None);
        }
        let mut tab = Self::crash(problem);
        let has_artificial = tab.cost.iter().any(|&c| c != 0.0);
        if has_artificial {
            tab.reset_reduced_costs();
            match tab.run_primal() {
                Step::Done => {}
                Step::Continue => return (tab.limit(), None),
                Step::Unbounded | Step::Infeasible => return (infeasible(n, tab.iterations), None),
            }
            let infeas: f64 = (tab.n_struct..tab.cost.len())
                .filter(|&j| tab.cost[j] != 0.0)
                .map(|j| tab.col_value(j))
                .sum();
            let scale = 1.0 + problem.rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
            if infeas > 1e-7 * scale {
                return (infeasible(n, tab.iterations), None);
            }
            tab.drop_artificials();
        }
        tab.cost = vec![0.0; tab.t.first().map_or(n, Vec::len).max(n)];
        tab.cost.resize(tab.n_cols(), 0.0);
        tab.cost[..n].copy_from_slice(&problem.cost);
        tab.reset_reduced_costs();
        let sol = match tab.run_primal() {
            Step::Done => tab.solution(LpStatus::Optimal),
            Step::Continue => tab.limit(),
            Step::Unbounded => tab.solution(LpStatus::Unbounded),
            Step::Infeasible => infeasible(n, tab.iterations),
        };
        let ok = sol.status == LpStatus::Optimal;
        (sol, ok.then_some(tab))
    }

    fn n_cols(&self) -> usize {
        self.lb.len()
    }

    fn crash(problem: &LpProblem) -> Tableau {
        let n = problem.n_vars();
        let m = problem.rows.len();
        let mut lb = problem.lb.clone();
        let mut ub = problem.ub.clone();
        let mut value: Vec<f64> = (0..n)
            .map(|j| {
                if lb[j].is_finite() {
                    lb[j]
                } else if ub[j].is_finite() {
                    ub[j]
                } else {
                    0.0
                }
            })
            .collect();
        let mut status: Vec<Status> = (0..n)
            .map(|j| {
                if lb[j].is_finite() {
                    Status::AtLower
                } else if ub[j].is_finite() {
                    Status::AtUpper
                } else {
                    Status::Zero
                }
            })
            .collect();

        // Column layout: structurals, then one slack per inequality row,
        // then one artificial per row that needs it.
        let mut slack_of = vec![None; m];
        for (i, row) in problem.rows.iter().enumerate() {
            match row.sense {
                Sense::Le => {
                    slack_of[i] = Some(lb.len());
                    lb.push(0.0);
                    ub.push(f64::INFINITY);
                }
                Sense::Ge => {
                    slack_of[i] = Some(lb.len());
                    lb.push(f64::NEG_INFINITY);
                    ub.push(0.0);
                }
                Sense::Eq => continue,
            }
            value.push(0.0);
            status.push(Status::AtLower);
        }
        let residual: Vec<f64> = problem
            .rows
            .iter()
            .map(|row| row.rhs - row.coeffs.iter().map(|&(j, a)| a * value[j]).sum::<f64>())
            .collect();
        let mut basis = vec![0; m];
        let mut beta = vec![0.0; m];
        let mut art_sign = vec![None; m];
        for i in 0..m {
            let r = residual[i];
            match (problem.rows[i].sense, slack_of[i]) {
                (Sense::Le, Some(s)) if r >= 0.0 => {
                    basis[i] = s;
                    beta[i] = r;
                }
                (Sense::Ge, Some(s)) if r <= 0.0 => {
                    basis[i] = s;
                    beta[i] = r;
                }
                (sense, s) => {
                    if let Some(s) = s {
                        status[s] = if sense == Sense::Le {
                            Status::AtLower
                        } else {
                            Status::AtUpper
                        };
                    }
                    let sign = if r >= 0.0 { 1.0 } else { -1.0 };
                    art_sign[i] = Some(sign);
                    basis[i] = lb.len();
                    beta[i] = r.abs();
                    lb.push(0.0);
                    ub.push(f64::INFINITY);
                    value.push(0.0);
                    status.push(Status::AtLower);
                }
            }
        }
        let n_cols = lb.len();
        let mut cost = vec![0.0; n_cols];
        let mut t = vec![vec![0.0; n_cols]; m];
        for (i, row) in problem.rows.iter().enumerate() {
            let scale = art_sign[i].unwrap_or(1.0);
            for &(j, a) in &row.coeffs {
                t[i][j] += a * scale;
            }
            if let Some(s) = slack_of[i] {
                t[i][s] = scale;
            }
            if art_sign[i].is_some() {
                t[i][basis[i]] = 1.0;
                cost[basis[i]] = 1.0;
            }
        }
        for (i, &b) in basis.iter().enumerate() {
            status[b] = Status::Basic(i);
        }
        let max_iterations = 50 * (m + n_cols) + 10_000;
        Tableau {
            t,
            beta,
            basis,
            status,
            value,
            lb,
            ub,
            cost,
            d: vec![0.0; n_cols],
            n_struct: n,
            iterations: 0,
            max_iterations,
        }
    }

    fn col_value(&self, j: usize) -> f64 {
        match self.status[j] {
            Status::Basic(i) => self.beta[i],
            _ => self.value[j],
        }
    }

    fn reset_reduced_costs(&mut self) {
        let mut d = self.cost.clone();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = self.cost[b];
            if cb != 0.0 {
                for (dk, &tk) in d.iter_mut().zip(&self.t[i]) {
                    *dk -= cb * tk;
                }
            }
        }
        for &b in &self.basis {
            d[b] = 0.0;
        }
        self.d = d;
    }

    /// Removes nonbasic artificial columns and pins basic ones at zero.
    fn drop_artificials(&mut self) {
        let n_cols = self.n_cols();
        let artificial: Vec<bool> = (0..n_cols)
            .map(|j| j >= self.n_struct && self.cost[j] != 0.0)
            .collect();
        let keep: Vec<usize> = (0..n_cols)
            .filter(|&j| !artificial[j] || matches!(self.status[j], Status::Basic(_)))
            .collect();
        let mut new_index = vec![usize::MAX; n_cols];
        for (k, &j) in keep.iter().enumerate() {
            new_index[j] = k;
        }
        for row in &mut self.t {
            *row = keep.iter().map(|&j| row[j]).collect();
        }
        let pick = |v: &[f64]| keep.iter().map(|&j| v[j]).collect::<Vec<_>>();
        self.value = pick(&self.value);
        self.lb = keep.iter().map(|&j| if artificial[j] { 0.0 } else { self.lb[j] }).collect();
        self.ub = keep.iter().map(|&j| if artificial[j] { 0.0 } else { self.ub[j] }).collect();
        self.cost = vec![0.0; keep.len()];
        self.d = vec![0.0; keep.len()];
        self.status = keep.iter().map(|&j| self.status[j]).collect();
        for b in &mut self.basis {
            *b = new_index[*b];
        }
    }

    fn solution(&self, status: LpStatus) -> LpSolution {
        let x: Vec<f64> = (0..self.n_struct).map(|j| self.col_value(j)).collect();
        let objective = x.iter().zip(&self.cost).map(|(a, c)| a * c).sum();
        LpSolution {
            status,
            x,
            objective,
            iterations: self.iterations,
        }
    }

    fn limit(&self) -> LpSolution {
        self.solution(LpStatus::IterationLimit)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let p = self.t[r][j];
        let inv = 1.0 / p;
        let row_r = &mut self.t[r];
        let mut nz = Vec::with_capacity(row_r.len());
        for (k, v) in row_r.iter_mut().enumerate() {
            if *v != 0.0 {
                *v *= inv;
                nz.push(k);
            }
        }
        row_r[j] = 1.0;
        let pivot_row = std::mem::take(&mut self.t[r]);
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[j];
            if f == 0.0 {
                continue;
            }
            for &k in &nz {
                row[k] -= f * pivot_row[k];
            }
            row[j] = 0.0;
        }
        let f = self.d[j];
        if f != 0.0 {
            for &k in &nz {
                self.d[k] -= f * pivot_row[k];
            }
        }
        self.d[j] = 0.0;
        self.t[r] = pivot_row;
        let leaving = self.basis[r];
        self.basis[r] = j;
        self.status[j] = Status::Basic(r);
        // Caller sets the leaving column's nonbasic status and value.
        self.status[leaving] = Status::AtLower;
        self.iterations += 1;
    }

    fn set_nonbasic(&mut self, col: usize, value: f64) {
        let at_ub = self.ub[col].is_finite() && (value - self.ub[col]).abs() <= (value - self.lb[col]).abs();
        self.status[col] = if self.lb[col].is_finite() && !at_ub {
            Status::AtLower
        } else if self.ub[col].is_finite() {
            Status::AtUpper
        } else {
            Status::Zero
        };
        self.value[col] = match self.status[col] {
            Status::AtLower => self.lb[col],
            Status::AtUpper => self.ub[col],
            _ => value,
        };
    }

    fn run_primal(&mut self) -> Step {
        let m = self.t.len();
        let threshold = 2 * (m + self.n_cols());
        let mut degenerate = 0usize;
        let mut bland = false;
        loop {
            if self.iterations >= self.max_iterations {
                return Step::Continue;
            }
            // Pricing.
            let mut entering: Option<(usize, f64)> = None;
            let mut best = 0.0;
            for j in 0..self.n_cols() {
                let dir = match self.status[j] {
                    Status::Basic(_) => continue,
                    _ if self.lb[j] == self.ub[j] => continue,
                    Status::AtLower if self.d[j] < -OPT_TOL => 1.0,
                    Status::AtUpper if self.d[j] > OPT_TOL => -1.0,
                    Status::Zero if self.d[j].abs() > OPT_TOL => -self.d[j].signum(),
                    _ => continue,
                };
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if self.d[j].abs() > best {
                    best = self.d[j].abs();
                    entering = Some((j, dir));
                }
            }
            let Some((j, dir)) = entering else {
                return Step::Done;
            };

            // Ratio test.
            let mut theta = f64::INFINITY;
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let alpha = self.t[i][j] * dir;
                let b = self.basis[i];
                let limit = if alpha > PIVOT_TOL && self.lb[b].is_finite() {
                    ((self.beta[i] - self.lb[b]) / alpha).max(0.0)
                } else if alpha < -PIVOT_TOL && self.ub[b].is_finite() {
                    ((self.ub[b] - self.beta[i]) / -alpha).max(0.0)
                } else {
                    continue;
                };
                let better = match leave {
                    None => true,
                    Some((li, la)) => {
                        if limit < theta - 1e-12 {
                            true
                        } else if limit <= theta + 1e-12 {
                            if bland {
                                b < self.basis[li]
                            } else {
                                alpha.abs() > la.abs()
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    theta = theta.min(limit);
                    if limit < theta + 1e-12 {
                        theta = limit;
                    }
                    leave = Some((i, alpha));
                }
            }
            let span = self.ub[j] - self.lb[j];
            if span.is_finite() && span <= theta {
                // Bound flip without a basis change.
                for i in 0..m {
                    self.beta[i] -= self.t[i][j] * dir * span;
                }
                self.value[j] += dir * span;
                self.status[j] = if dir > 0.0 {
                    Status::AtUpper
                } else {
                    Status::AtLower
                };
                self.iterations += 1;
                degenerate = 0;
                bland = false;
                continue;
            }
            let Some((r, alpha)) = leave else {
                return Step::Unbounded;
            };
            if theta <= DEGENERATE_STEP {
                degenerate += 1;
                if degenerate > threshold {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = false;
            }
            for i in 0..m {
                self.beta[i] -= self.t[i][j] * dir * theta;
            }
            let leaving = self.basis[r];
            let leaving_value = if alpha > 0.0 {
                self.lb[leaving]
            } else {
                self.ub[leaving]
            };
            let entering_value = self.value[j] + dir * theta;
            self.pivot(r, j);
            self.beta[r] = entering_value;
            self.set_nonbasic(leaving, leaving_value);
        }
    }

    fn run_dual(&mut self) -> Step {
        let m = self.t.len();
        let threshold = 2 * (m + self.n_cols());
        let mut degenerate = 0usize;
        let mut bland = false;
        loop {
            if self.iterations >= self.max_iterations {
                return Step::Continue;
            }
            let mut leave: Option<(usize, f64)> = None;
            let mut worst = 0.0;
            for i in 0..m {
                let b = self.basis[i];
                let target = if self.beta[i] < self.lb[b] - FEAS_TOL {
                    self.lb[b]
                } else if self.beta[i] > self.ub[b] + FEAS_TOL {
                    self.ub[b]
                } else {
                    continue;
                };
                let gap = (target - self.beta[i]).abs();
                let pick = if bland {
                    leave.is_none_or(|(li, _)| b < self.basis[li])
                } else {
                    gap > worst
                };
                if pick {
                    worst = gap;
                    leave = Some((i, target));
                }
            }
            let Some((r, target)) = leave else {
                return Step::Done;
            };
            let increase = target > self.beta[r];
            let mut entering: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for j in 0..self.n_cols() {
                if matches!(self.status[j], Status::Basic(_)) || self.lb[j] == self.ub[j] {
                    continue;
                }
                let a = self.t[r][j];
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                // Moving x_j by +1 changes x_r by -a.
                let dir = if increase { -a.signum() } else { a.signum() };
                let allowed = match self.status[j] {
                    Status::AtLower => dir > 0.0,
                    Status::AtUpper => dir < 0.0,
                    Status::Zero => true,
                    Status::Basic(_) => false,
                };
                if !allowed {
                    continue;
                }
                let ratio = self.d[j].abs() / a.abs();
                let better = match entering {
                    None => true,
                    Some(e) => {
                        if ratio < best_ratio - 1e-12 {
                            true
                        } else if ratio <= best_ratio + 1e-12 {
                            if bland {
                                false
                            } else {
                                a.abs() > self.t[r][e].abs()
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    best_ratio = best_ratio.min(ratio);
                    entering = Some(j);
                }
            }
            let Some(j) = entering else {
                return Step::Infeasible;
            };
            if best_ratio <= DEGENERATE_STEP {
                degenerate += 1;
                if degenerate > threshold {
                    bland = true;
                }
            } else {
                degenerate = 0;
                bland = false;
            }
            let a = self.t[r][j];
            let delta = (target - self.beta[r]) / -a;
            for i in 0..m {
                self.beta[i] -= self.t[i][j] * delta;
            }
            let leaving = self.basis[r];
            let entering_value = self.value[j] + delta;
            self.pivot(r, j);
            self.beta[r] = entering_value;
            self.set_nonbasic(leaving, target);
        }
    }

    /// Re-optimizes after edits: dual simplex to restore feasibility, then a
    /// primal pass to clean up any remaining reduced-cost violations.
    pub fn reoptimize(&mut self) -> LpSolution {
        match self.run_dual() {
            Step::Done => {}
            Step::Infeasible => return infeasible(self.n_struct, self.iterations),
            _ => return self.limit(),
        }
        match self.run_primal() {
            Step::Done => self.solution(LpStatus::Optimal),
            Step::Unbounded => self.solution(LpStatus::Unbounded),
            Step::Infeasible => infeasible(self.n_struct, self.iterations),
            Step::Continue => self.limit(),
        }
    }

    /// Appends the row `coeffs . x (sense) rhs` over structural columns,
    /// with a new basic slack.
    pub fn add_row(&mut self, coeffs: &[(usize, f64)], sense: Sense, rhs: f64) {
        let n_cols = self.n_cols();
        let mut row = vec![0.0; n_cols + 1];
        let mut activity = 0.0;
        for &(j, a) in coeffs {
            row[j] += a;
            activity += a * self.col_value(j);
        }
        for (i, &b) in self.basis.iter().enumerate() {
            let f = row[b];
            if f != 0.0 {
                for (rk, &tk) in row.iter_mut().zip(&self.t[i]) {
                    *rk -= f * tk;
                }
                row[b] = 0.0;
            }
        }
        let (slb, sub) = match sense {
            Sense::Le => (0.0, f64::INFINITY),
            Sense::Ge => (f64::NEG_INFINITY, 0.0),
            Sense::Eq => (0.0, 0.0),
        };
        for r in &mut self.t {
            r.push(0.0);
        }
        row[n_cols] = 1.0;
        self.t.push(row);
        self.beta.push(rhs - activity);
        self.basis.push(n_cols);
        self.status.push(Status::Basic(self.t.len() - 1));
        self.value.push(0.0);
        self.lb.push(slb);
        self.ub.push(sub);
        self.cost.push(0.0);
        self.d.push(0.0);
        self.max_iterations += 50 * (self.t.len() + n_cols);
    }

    /// Changes the bounds of a structural column.
    pub fn set_bounds(&mut self, j: usize, lb: f64, ub: f64) {
        self.lb[j] = lb;
        self.ub[j] = ub;
        if let Status::Basic(_) = self.status[j] {
            return;
        }
        let old = self.value[j];
        let new = match self.status[j] {
            Status::AtLower if lb.is_finite() => lb,
            Status::AtUpper if ub.is_finite() => ub,
            _ if lb.is_finite() && (self.d[j] >= 0.0 || !ub.is_finite()) => lb,
            _ if ub.is_finite() => ub,
            _ => 0.0,
        };
        self.set_nonbasic(j, new);
        let delta = self.value[j] - old;
        if delta != 0.0 {
            for i in 0..self.t.len() {
                self.beta[i] -= self.t[i][j] * delta;
            }
        }
    }
}

fn infeasible(n: usize, iterations: usize) -> LpSolution {
    LpSolution {
        status: LpStatus::Infeasible,
        x: vec![f64::NAN; n],
        objective: f64::INFINITY,
        iterations,
    }
}

/// Cold-start solve.
pub fn solve(problem: &LpProblem) -> LpSolution {
    Tableau::solve(problem).0
}
