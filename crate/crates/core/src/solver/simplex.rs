//! Dense two-phase tableau simplex.
//!
//! Problems arrive as [`LinearProgram`]s with box-bounded variables. The
//! transform below shifts every variable to a nonnegative standard variable
//! (finite uppers become rows), then a classic full-tableau simplex runs
//! phase 1 (artificial minimization) and phase 2 (the real objective).
//! Dantzig pricing with a Bland's-rule fallback guards against cycling; all
//! tie-breaks are by lowest index, so solves are deterministic.
#![allow(clippy::needless_range_loop)] // lockstep indexing across tableau rows

use super::{LinearProgram, Rel, Sense, SolverConfig};
use crate::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const RCOST_TOL: f64 = 1e-9;

/// Row over standard columns: sparse coefficients, relation, right-hand side.
type SparseRow = (Vec<(usize, f64)>, Rel, f64);

#[derive(Debug)]
pub(crate) enum LpOutcome {
    Optimal { x: Vec<f64>, obj: f64 },
    Infeasible,
    Unbounded,
}

#[derive(Clone, Copy)]
enum Shift {
    /// x = l + s
    Lower { l: f64, col: usize },
    /// x = u - s
    Mirror { u: f64, col: usize },
    /// x = s_pos - s_neg
    Free { pos: usize, neg: usize },
}

/// Solves `lp`, optionally replacing every variable bound (used by
/// branch-and-bound to fix binaries without rebuilding the problem).
pub(crate) fn solve_with_bounds(
    lp: &LinearProgram,
    bound_override: Option<&[(f64, f64)]>,
    config: &SolverConfig,
) -> Result<LpOutcome> {
    let n = lp.num_vars();
    let bounds: Vec<(f64, f64)> = match bound_override {
        Some(b) => b.to_vec(),
        None => (0..n).map(|i| lp.var_bounds(super::VarId(i))).collect(),
    };
    for &(l, u) in &bounds {
        if l > u + 1e-12 {
            return Ok(LpOutcome::Infeasible);
        }
    }

    // Shift variables to nonnegative standard columns.
    let mut shifts = Vec::with_capacity(n);
    let mut n_std = 0usize;
    // Sparse rows over standard columns, prior to slack/artificial augmentation.
    let mut rows: Vec<SparseRow> = Vec::new();
    for &(l, u) in &bounds {
        if l.is_finite() {
            let col = n_std;
            n_std += 1;
            shifts.push(Shift::Lower { l, col });
            if u.is_finite() {
                rows.push((vec![(col, 1.0)], Rel::Le, u - l));
            }
        } else if u.is_finite() {
            let col = n_std;
            n_std += 1;
            shifts.push(Shift::Mirror { u, col });
        } else {
            let pos = n_std;
            let neg = n_std + 1;
            n_std += 2;
            shifts.push(Shift::Free { pos, neg });
        }
    }

    for c in lp.constraints() {
        let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(c.terms.len() + 1);
        let mut rhs = c.rhs;
        for &(v, k) in &c.terms {
            if k == 0.0 {
                continue;
            }
            match shifts[v.0] {
                Shift::Lower { l, col } => {
                    rhs -= k * l;
                    push_coef(&mut coeffs, col, k);
                }
                Shift::Mirror { u, col } => {
                    rhs -= k * u;
                    push_coef(&mut coeffs, col, -k);
                }
                Shift::Free { pos, neg } => {
                    push_coef(&mut coeffs, pos, k);
                    push_coef(&mut coeffs, neg, -k);
                }
            }
        }
        rows.push((coeffs, c.rel, rhs));
    }

    // Objective in min form over standard columns.
    let (sense, terms) = lp.objective();
    let sign = match sense {
        Sense::Minimize | Sense::Feasibility => 1.0,
        Sense::Maximize => -1.0,
    };
    let mut obj_std = vec![0.0; n_std];
    if sense != Sense::Feasibility {
        for &(v, k) in terms {
            let k = sign * k;
            match shifts[v.0] {
                Shift::Lower { col, .. } => obj_std[col] += k,
                Shift::Mirror { col, .. } => obj_std[col] -= k,
                Shift::Free { pos, neg } => {
                    obj_std[pos] += k;
                    obj_std[neg] -= k;
                }
            }
        }
    }

    // Normalize rows: Ge becomes Le by negation, then negative rhs flips again.
    // Final kinds: Le (slack), Ge with rhs > 0 (surplus + artificial),
    // Eq with rhs >= 0 (artificial).
    let mut n_slack = 0usize;
    let mut n_art = 0usize;
    for row in rows.iter_mut() {
        if row.1 == Rel::Ge {
            negate_row(row);
        }
        if row.2 < 0.0 {
            negate_row(row);
        }
        match row.1 {
            Rel::Le => n_slack += 1,
            Rel::Ge => {
                n_slack += 1; // surplus column
                n_art += 1;
            }
            Rel::Eq => n_art += 1,
        }
    }

    let m = rows.len();
    let art_start = n_std + n_slack;
    let ncols = art_start + n_art;
    let width = ncols + 1; // last column is the rhs
    let mut t = vec![0.0f64; m * width];
    let mut basis = vec![0usize; m];
    let mut slack_cursor = n_std;
    let mut art_cursor = art_start;
    for (i, (coeffs, rel, rhs)) in rows.iter().enumerate() {
        let base = i * width;
        for &(c, k) in coeffs {
            t[base + c] += k;
        }
        t[base + ncols] = *rhs;
        match rel {
            Rel::Le => {
                t[base + slack_cursor] = 1.0;
                basis[i] = slack_cursor;
                slack_cursor += 1;
            }
            Rel::Ge => {
                t[base + slack_cursor] = -1.0;
                slack_cursor += 1;
                t[base + art_cursor] = 1.0;
                basis[i] = art_cursor;
                art_cursor += 1;
            }
            Rel::Eq => {
                t[base + art_cursor] = 1.0;
                basis[i] = art_cursor;
                art_cursor += 1;
            }
        }
    }

    let mut tab = Tableau {
        t,
        basis,
        m,
        width,
        ncols,
        enter_limit: art_start,
    };

    // Phase 1: minimize the artificial sum.
    if n_art > 0 {
        let mut cost = vec![0.0f64; width];
        for j in art_start..ncols {
            cost[j] = 1.0;
        }
        for i in 0..m {
            if tab.basis[i] >= art_start {
                let base = i * width;
                for j in 0..width {
                    cost[j] -= tab.t[base + j];
                }
            }
        }
        match tab.run(&mut cost)? {
            SimplexEnd::Optimal => {}
            SimplexEnd::Unbounded => {
                return Err(Error::Solver("phase-1 objective unbounded".into()))
            }
        }
        let infeasibility = -cost[ncols];
        if infeasibility > config.feas_tol * 0.5 {
            return Ok(LpOutcome::Infeasible);
        }
        // Drive leftover artificials out of the basis where possible; rows
        // where every real coefficient vanished are redundant and inert.
        for i in 0..m {
            if tab.basis[i] >= art_start {
                let base = i * width;
                if let Some(j) = (0..art_start).find(|&j| tab.t[base + j].abs() > PIVOT_TOL) {
                    tab.pivot(i, j);
                }
            }
        }
    }

    // Phase 2: the real objective.
    let mut cost = vec![0.0f64; width];
    cost[..n_std].copy_from_slice(&obj_std);
    for i in 0..m {
        let bj = tab.basis[i];
        let cb = cost[bj];
        if cb != 0.0 {
            let base = i * width;
            for j in 0..width {
                cost[j] -= cb * tab.t[base + j];
            }
        }
    }
    match tab.run(&mut cost)? {
        SimplexEnd::Optimal => {}
        SimplexEnd::Unbounded => return Ok(LpOutcome::Unbounded),
    }

    // Recover the original variable values.
    let mut x_std = vec![0.0f64; ncols];
    for i in 0..m {
        x_std[tab.basis[i]] = tab.t[i * tab.width + tab.ncols];
    }
    let mut x = vec![0.0f64; n];
    for (v, shift) in shifts.iter().enumerate() {
        x[v] = match *shift {
            Shift::Lower { l, col } => l + x_std[col],
            Shift::Mirror { u, col } => u - x_std[col],
            Shift::Free { pos, neg } => x_std[pos] - x_std[neg],
        };
        let (l, u) = bounds[v];
        x[v] = x[v].clamp(l, u);
    }

    let residual = max_violation_with_bounds(lp, &x, &bounds);
    if residual > config.feas_tol {
        return Err(Error::Solver(format!(
            "simplex produced an assignment violating constraints by {:.3e}",
            residual
        )));
    }
    let obj = match sense {
        Sense::Feasibility => 0.0,
        _ => lp.objective_value(&x),
    };
    Ok(LpOutcome::Optimal { x, obj })
}

fn push_coef(coeffs: &mut Vec<(usize, f64)>, col: usize, k: f64) {
    if let Some(entry) = coeffs.iter_mut().find(|(c, _)| *c == col) {
        entry.1 += k;
    } else {
        coeffs.push((col, k));
    }
}

fn negate_row(row: &mut SparseRow) {
    for (_, k) in row.0.iter_mut() {
        *k = -*k;
    }
    row.2 = -row.2;
    row.1 = match row.1 {
        Rel::Le => Rel::Ge,
        Rel::Ge => Rel::Le,
        Rel::Eq => Rel::Eq,
    };
}

fn max_violation_with_bounds(lp: &LinearProgram, x: &[f64], bounds: &[(f64, f64)]) -> f64 {
    let mut worst = 0.0f64;
    for c in lp.constraints() {
        let lhs: f64 = c.terms.iter().map(|&(v, k)| k * x[v.0]).sum();
        let viol = match c.rel {
            Rel::Le => lhs - c.rhs,
            Rel::Ge => c.rhs - lhs,
            Rel::Eq => (lhs - c.rhs).abs(),
        };
        worst = worst.max(viol);
    }
    for (i, &(l, u)) in bounds.iter().enumerate() {
        worst = worst.max(l - x[i]).max(x[i] - u);
    }
    worst
}

enum SimplexEnd {
    Optimal,
    Unbounded,
}

struct Tableau {
    t: Vec<f64>,
    basis: Vec<usize>,
    m: usize,
    width: usize,
    ncols: usize,
    /// Columns at or beyond this index (the artificials) never enter.
    enter_limit: usize,
}

impl Tableau {
    fn run(&mut self, cost: &mut [f64]) -> Result<SimplexEnd> {
        let bland_after = 200 + 20 * (self.m + self.ncols) as u64;
        let iter_cap = 10_000 + 400 * (self.m + self.ncols) as u64;
        let mut iter = 0u64;
        loop {
            iter += 1;
            if iter > iter_cap {
                return Err(Error::Solver("simplex iteration limit reached".into()));
            }
            let bland = iter > bland_after;
            let entering = if bland {
                (0..self.enter_limit).find(|&j| cost[j] < -RCOST_TOL)
            } else {
                let mut best: Option<(usize, f64)> = None;
                for j in 0..self.enter_limit {
                    let c = cost[j];
                    if c < -RCOST_TOL && best.is_none_or(|(_, bc)| c < bc) {
                        best = Some((j, c));
                    }
                }
                best.map(|(j, _)| j)
            };
            let Some(e) = entering else {
                return Ok(SimplexEnd::Optimal);
            };

            // Ratio test; ties by lowest basis variable keep pivoting finite
            // once Bland kicks in.
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.t[i * self.width + e];
                if a > PIVOT_TOL {
                    let ratio = self.t[i * self.width + self.ncols] / a;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-12
                                || (ratio < lr + 1e-12 && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Ok(SimplexEnd::Unbounded);
            };
            self.pivot(r, e);
            // Update the cost row with the (already normalized) pivot row.
            let factor = cost[e];
            if factor != 0.0 {
                let base = r * self.width;
                for j in 0..self.width {
                    cost[j] -= factor * self.t[base + j];
                }
                cost[e] = 0.0;
            }
        }
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let width = self.width;
        let pbase = r * width;
        let pval = self.t[pbase + e];
        let inv = 1.0 / pval;
        for j in 0..width {
            self.t[pbase + j] *= inv;
        }
        self.t[pbase + e] = 1.0;
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let base = i * width;
            let factor = self.t[base + e];
            if factor.abs() > 1e-12 {
                for j in 0..width {
                    self.t[base + j] -= factor * self.t[pbase + j];
                }
                self.t[base + e] = 0.0;
            }
        }
        self.basis[r] = e;
    }
}
