//! Branch-and-bound over binary variables.
//!
//! Nodes are explored depth-first (feasible points surface quickly, matching
//! the first-feasible stopping mode), branching on the most fractional binary
//! with ties broken by lowest variable id. A solve session keeps the problem
//! and the last feasible assignment; re-solving after adding a constraint
//! reuses that assignment as a branching hint.

use super::simplex::{self, LpOutcome};
use super::{MilpProblem, Rel, Sense, SolveResult, SolverConfig, Status, VarId};
use crate::{Error, Result};

/// Stopping mode for MILP solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MilpMode {
    /// Return the first integral-feasible assignment found, or Infeasible.
    FirstFeasible,
    /// Exhaust the tree: prove infeasibility or return the exact optimum
    /// (for feasibility objectives this behaves like `FirstFeasible`).
    Complete,
}

/// Solves a MILP from scratch.
pub fn solve_milp(p: &MilpProblem, mode: MilpMode, config: &SolverConfig) -> Result<SolveResult> {
    branch_and_bound(p, mode, config, None)
}

/// An incremental solve session: constraints can be appended and the problem
/// re-solved without rebuilding it.
#[derive(Debug, Clone)]
pub struct MilpSession {
    problem: MilpProblem,
    mode: MilpMode,
    config: SolverConfig,
    hint: Option<Vec<f64>>,
}

impl MilpSession {
    pub fn new(problem: MilpProblem, mode: MilpMode, config: SolverConfig) -> Self {
        Self {
            problem,
            mode,
            config,
            hint: None,
        }
    }

    pub fn problem(&self) -> &MilpProblem {
        &self.problem
    }

    /// Solves the current problem, remembering any feasible assignment as a
    /// branching hint for later re-solves.
    pub fn solve(&mut self) -> Result<SolveResult> {
        let result = branch_and_bound(&self.problem, self.mode, &self.config, self.hint.as_deref())?;
        if let Some(a) = &result.assignment {
            self.hint = Some(a.clone());
        }
        Ok(result)
    }

    /// Appends a constraint and re-solves. The status is identical to solving
    /// the augmented problem from scratch; the previous solution only steers
    /// the branching order.
    pub fn add_constraint_and_resolve(
        &mut self,
        terms: Vec<(VarId, f64)>,
        rel: Rel,
        rhs: f64,
    ) -> Result<SolveResult> {
        self.problem.lp.add_constraint(terms, rel, rhs);
        self.solve()
    }
}

fn branch_and_bound(
    p: &MilpProblem,
    mode: MilpMode,
    config: &SolverConfig,
    hint: Option<&[f64]>,
) -> Result<SolveResult> {
    p.validate()?;
    let binaries: Vec<VarId> = p.binaries().collect();
    let sense = p.lp.objective().0;
    // Sign that maps objective values into "smaller is better".
    let min_sign = match sense {
        Sense::Maximize => -1.0,
        _ => 1.0,
    };

    let root: Vec<(f64, f64)> = (0..p.lp.num_vars())
        .map(|i| p.lp.var_bounds(VarId(i)))
        .collect();
    let mut stack = vec![root];
    let mut best: Option<(f64, Vec<f64>)> = None; // (min-form objective, assignment)
    let mut nodes = 0u64;

    while let Some(bounds) = stack.pop() {
        nodes += 1;
        if nodes > config.node_limit {
            return Err(Error::NodeLimit(nodes));
        }
        let (x, obj) = match simplex::solve_with_bounds(&p.lp, Some(&bounds), config)? {
            LpOutcome::Infeasible => continue,
            LpOutcome::Unbounded => {
                return Ok(SolveResult {
                    status: Status::Unbounded,
                    assignment: None,
                    objective: None,
                })
            }
            LpOutcome::Optimal { x, obj } => (x, obj),
        };

        if sense != Sense::Feasibility {
            if let Some((best_obj, _)) = &best {
                // The relaxation only tightens down the subtree.
                if min_sign * obj >= *best_obj - 1e-12 {
                    continue;
                }
            }
        }

        // Most fractional binary, ties by lowest variable id.
        let mut branch_var: Option<(VarId, f64)> = None;
        let mut worst_dist = config.int_tol;
        for &b in &binaries {
            let v = x[b.0];
            let dist = v.min(1.0 - v);
            if dist > worst_dist {
                worst_dist = dist;
                branch_var = Some((b, v));
            }
        }

        let Some((bv, bval)) = branch_var else {
            // Integral leaf.
            if sense == Sense::Feasibility {
                return Ok(SolveResult {
                    status: Status::Feasible,
                    assignment: Some(x),
                    objective: None,
                });
            }
            if mode == MilpMode::FirstFeasible {
                return Ok(SolveResult {
                    status: Status::Feasible,
                    assignment: Some(x),
                    objective: Some(obj),
                });
            }
            let key = min_sign * obj;
            if best.as_ref().is_none_or(|(b, _)| key < *b) {
                best = Some((key, x));
            }
            continue;
        };

        // Children: the preferred value is explored first (pushed last).
        let prefer_one = match hint.and_then(|h| h.get(bv.0)) {
            Some(&hv) if hv > 0.5 => true,
            Some(_) => false,
            None => bval >= 0.5,
        };
        let mut zero = bounds.clone();
        zero[bv.0] = (0.0, 0.0);
        let mut one = bounds;
        one[bv.0] = (1.0, 1.0);
        if prefer_one {
            stack.push(zero);
            stack.push(one);
        } else {
            stack.push(one);
            stack.push(zero);
        }
    }

    Ok(match best {
        Some((_, x)) => {
            let obj = p.lp.objective_value(&x);
            SolveResult {
                status: Status::Optimal,
                assignment: Some(x),
                objective: Some(obj),
            }
        }
        None => SolveResult {
            status: Status::Infeasible,
            assignment: None,
            objective: None,
        },
    })
}
