//! Exact-at-tolerance LP and MILP solving.
//!
//! The LP backend is a dense two-phase tableau simplex; MILPs are solved by
//! depth-first branch-and-bound over binary variables with LP relaxations.
//! Every feasible result satisfies all constraints within `feas_tol` and
//! every binary is within `int_tol` of 0 or 1. Solves are deterministic:
//! the same problem and configuration always produce the same status.

mod milp;
mod simplex;

pub use milp::{solve_milp, MilpMode, MilpSession};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::{Error, Result};

/// Handle to a declared variable. Indexes the declaring problem's variable list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

/// Constraint relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rel {
    Le,
    Eq,
    Ge,
}

/// Objective sense. `Feasibility` ignores coefficients entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
    Feasibility,
}

/// A single linear constraint `sum(coef * var) rel rhs`.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub terms: Vec<(VarId, f64)>,
    pub rel: Rel,
    pub rhs: f64,
}

/// A linear program over real variables with box bounds.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    bounds: Vec<(f64, f64)>,
    constraints: Vec<Constraint>,
    objective_sense: Sense,
    objective_terms: Vec<(VarId, f64)>,
}

impl Default for LinearProgram {
    fn default() -> Self {
        Self::new()
    }
}

impl LinearProgram {
    pub fn new() -> Self {
        Self {
            bounds: Vec::new(),
            constraints: Vec::new(),
            objective_sense: Sense::Feasibility,
            objective_terms: Vec::new(),
        }
    }

    /// Declares a variable with bounds `lower <= x <= upper`; either bound may
    /// be infinite.
    pub fn add_var(&mut self, lower: f64, upper: f64) -> VarId {
        let id = VarId(self.bounds.len());
        self.bounds.push((lower, upper));
        id
    }

    pub fn num_vars(&self) -> usize {
        self.bounds.len()
    }

    pub fn var_bounds(&self, v: VarId) -> (f64, f64) {
        self.bounds[v.0]
    }

    pub fn set_var_bounds(&mut self, v: VarId, lower: f64, upper: f64) {
        self.bounds[v.0] = (lower, upper);
    }

    pub fn add_constraint(&mut self, terms: Vec<(VarId, f64)>, rel: Rel, rhs: f64) {
        self.constraints.push(Constraint { terms, rel, rhs });
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn set_objective(&mut self, sense: Sense, terms: Vec<(VarId, f64)>) {
        self.objective_sense = sense;
        self.objective_terms = terms;
    }

    pub fn objective(&self) -> (Sense, &[(VarId, f64)]) {
        (self.objective_sense, &self.objective_terms)
    }

    /// Checks the structural invariants: every referenced variable is
    /// declared and every coefficient is finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.bounds.len();
        for (i, c) in self.constraints.iter().enumerate() {
            for &(v, coef) in &c.terms {
                if v.0 >= n {
                    return Err(Error::InvalidInput(format!(
                        "constraint {} references undeclared variable {}",
                        i, v.0
                    )));
                }
                if !coef.is_finite() {
                    return Err(Error::NonFinite(format!("constraint {} coefficient", i)));
                }
            }
            if !c.rhs.is_finite() {
                return Err(Error::NonFinite(format!("constraint {} rhs", i)));
            }
        }
        for &(v, coef) in &self.objective_terms {
            if v.0 >= n {
                return Err(Error::InvalidInput(format!(
                    "objective references undeclared variable {}",
                    v.0
                )));
            }
            if !coef.is_finite() {
                return Err(Error::NonFinite("objective coefficient".into()));
            }
        }
        for (i, &(l, u)) in self.bounds.iter().enumerate() {
            if l.is_nan() || u.is_nan() {
                return Err(Error::NonFinite(format!("variable {} bound", i)));
            }
        }
        Ok(())
    }

    /// Objective value of an assignment (linear part only).
    pub fn objective_value(&self, assignment: &[f64]) -> f64 {
        self.objective_terms
            .iter()
            .map(|&(v, c)| c * assignment[v.0])
            .sum()
    }

    /// Largest constraint or bound violation of an assignment.
    pub fn max_violation(&self, assignment: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for c in &self.constraints {
            let lhs: f64 = c.terms.iter().map(|&(v, k)| k * assignment[v.0]).sum();
            let viol = match c.rel {
                Rel::Le => lhs - c.rhs,
                Rel::Ge => c.rhs - lhs,
                Rel::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        for (i, &(l, u)) in self.bounds.iter().enumerate() {
            worst = worst.max(l - assignment[i]).max(assignment[i] - u);
        }
        worst
    }
}

/// A linear program plus a set of variables constrained to {0, 1}.
#[derive(Debug, Clone)]
pub struct MilpProblem {
    pub lp: LinearProgram,
    binaries: BTreeSet<VarId>,
}

impl Default for MilpProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl MilpProblem {
    pub fn new() -> Self {
        Self {
            lp: LinearProgram::new(),
            binaries: BTreeSet::new(),
        }
    }

    pub fn from_lp(lp: LinearProgram) -> Self {
        Self {
            lp,
            binaries: BTreeSet::new(),
        }
    }

    /// Declares a fresh binary variable.
    pub fn add_binary(&mut self) -> VarId {
        let v = self.lp.add_var(0.0, 1.0);
        self.binaries.insert(v);
        v
    }

    /// Marks an existing variable as binary, forcing its bounds to [0, 1].
    pub fn mark_binary(&mut self, v: VarId) {
        self.lp.set_var_bounds(v, 0.0, 1.0);
        self.binaries.insert(v);
    }

    pub fn binaries(&self) -> impl Iterator<Item = VarId> + '_ {
        self.binaries.iter().copied()
    }

    pub fn num_binaries(&self) -> usize {
        self.binaries.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.lp.validate()?;
        for &b in &self.binaries {
            if b.0 >= self.lp.num_vars() {
                return Err(Error::InvalidInput(format!(
                    "binary variable {} is not declared",
                    b.0
                )));
            }
            let (l, u) = self.lp.var_bounds(b);
            if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&u) {
                return Err(Error::InvalidInput(format!(
                    "binary variable {} must have bounds within [0, 1]",
                    b.0
                )));
            }
        }
        Ok(())
    }
}

/// Outcome status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Feasible,
    Infeasible,
    Unbounded,
}

/// Result of an LP or MILP solve.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: Status,
    /// Variable assignment, present iff status is Optimal or Feasible.
    pub assignment: Option<Vec<f64>>,
    /// Objective value, absent in feasibility mode.
    pub objective: Option<f64>,
}

impl SolveResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self.status, Status::Optimal | Status::Feasible)
    }

    pub fn value(&self, v: VarId) -> Option<f64> {
        self.assignment.as_ref().map(|a| a[v.0])
    }
}

/// Solver tolerances and limits. All fields are plain data so configurations
/// can be shared freely.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Maximum allowed constraint violation of reported assignments.
    pub feas_tol: f64,
    /// Distance from {0, 1} at which a binary counts as integral.
    pub int_tol: f64,
    /// Accepted objective slack when comparing against a true optimum.
    pub obj_tol: f64,
    /// Branch-and-bound node budget; exceeding it is a hard error.
    pub node_limit: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            int_tol: 1e-6,
            obj_tol: 1e-6,
            node_limit: 4_000_000,
        }
    }
}

/// Solves a pure LP.
pub fn solve_lp(lp: &LinearProgram, config: &SolverConfig) -> Result<SolveResult> {
    lp.validate()?;
    let outcome = simplex::solve_with_bounds(lp, None, config)?;
    Ok(match outcome {
        simplex::LpOutcome::Optimal { x, obj } => SolveResult {
            status: Status::Optimal,
            assignment: Some(x),
            objective: match lp.objective().0 {
                Sense::Feasibility => None,
                _ => Some(obj),
            },
        },
        simplex::LpOutcome::Infeasible => SolveResult {
            status: Status::Infeasible,
            assignment: None,
            objective: None,
        },
        simplex::LpOutcome::Unbounded => SolveResult {
            status: Status::Unbounded,
            assignment: None,
            objective: None,
        },
    })
}

/// Renders a problem in LP text format for cross-checking against external
/// solvers.
pub fn to_lp_text(p: &MilpProblem) -> String {
    let mut out = String::new();
    let (sense, terms) = p.lp.objective();
    match sense {
        Sense::Maximize => out.push_str("Maximize\n obj:"),
        _ => out.push_str("Minimize\n obj:"),
    }
    if terms.is_empty() || sense == Sense::Feasibility {
        out.push_str(" 0 x0");
    } else {
        for &(v, c) in terms {
            let _ = write!(out, " {} {} x{}", if c < 0.0 { "-" } else { "+" }, c.abs(), v.0);
        }
    }
    out.push_str("\nSubject To\n");
    for (i, c) in p.lp.constraints().iter().enumerate() {
        let _ = write!(out, " c{}:", i);
        for &(v, k) in &c.terms {
            let _ = write!(out, " {} {} x{}", if k < 0.0 { "-" } else { "+" }, k.abs(), v.0);
        }
        let rel = match c.rel {
            Rel::Le => "<=",
            Rel::Eq => "=",
            Rel::Ge => ">=",
        };
        let _ = writeln!(out, " {} {}", rel, c.rhs);
    }
    out.push_str("Bounds\n");
    for i in 0..p.lp.num_vars() {
        let (l, u) = p.lp.var_bounds(VarId(i));
        let _ = writeln!(
            out,
            " {} <= x{} <= {}",
            if l == f64::NEG_INFINITY { "-inf".to_string() } else { l.to_string() },
            i,
            if u == f64::INFINITY { "+inf".to_string() } else { u.to_string() }
        );
    }
    if p.num_binaries() > 0 {
        out.push_str("Binary\n");
        for b in p.binaries() {
            let _ = writeln!(out, " x{}", b.0);
        }
    }
    out.push_str("End\n");
    out
}
