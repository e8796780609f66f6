//! MILP encodings for local robustness queries.
//!
//! The pieces compose in three ways:
//!
//! * [`milp_bounds`] analyzes one epsilon-ball through a network prefix,
//!   computing exact pre-activation bounds per neuron by optimization and
//!   growing the constraint set layer by layer.
//! * [`milp_batch`] encodes a joint query for a whole batch: the inputs to
//!   the suffix are restricted to the union of the members' boxes at the
//!   split layer via indicator binaries, so a feasible point names the member
//!   whose ball may contain it.
//! * [`verify_single_ball`] is the complete single-ball decision procedure:
//!   full-network constraints plus the misclassification condition, solved in
//!   first-feasible mode, with witnesses validated by a forward pass.
//!
//! All lower bounds fed to the union encoding are post-ReLU values, which
//! keeps them nonnegative as the disjunction requires.

use crate::network::Network;
use crate::solver::{
    solve_milp, MilpMode, MilpProblem, Rel, Sense, SolverConfig, Status, VarId,
};
use crate::{Error, Result};

/// One epsilon-ball around a center input, with its expected class.
#[derive(Debug, Clone)]
pub struct BallQuery {
    pub center: Vec<f64>,
    pub epsilon: f64,
    pub class: usize,
}

impl BallQuery {
    pub fn new(center: Vec<f64>, epsilon: f64, class: usize) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidInput(format!(
                "epsilon must be finite and non-negative, got {}",
                epsilon
            )));
        }
        for (i, &v) in center.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "input coordinate {} = {} lies outside [0, 1]",
                    i, v
                )));
            }
        }
        Ok(Self {
            center,
            epsilon,
            class,
        })
    }
}

/// Pre-activation bounds for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInterval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Per-neuron pre-activation bounds for a contiguous run of layers starting
/// at the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub layers: Vec<LayerInterval>,
}

impl LayerBounds {
    /// Number of layers covered.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Post-ReLU intervals of the covered layer `layer` (1-based): lower and
    /// upper bounds clamped at zero, as the union encoding requires.
    pub fn post_relu_intervals(&self, layer: usize) -> Vec<(f64, f64)> {
        let li = &self.layers[layer - 1];
        li.lower
            .iter()
            .zip(&li.upper)
            .map(|(&l, &u)| (l.max(0.0), u.max(0.0)))
            .collect()
    }
}

/// Input-box bounds for each input neuron:
/// `max(0, x - eps) <= z <= min(1, x + eps)`.
pub fn input_box(q: &BallQuery) -> Vec<(f64, f64)> {
    q.center
        .iter()
        .map(|&x| ((x - q.epsilon).max(0.0), (x + q.epsilon).min(1.0)))
        .collect()
}

// ---------------------------------------------------------------------------
// Constraint builders
// ---------------------------------------------------------------------------

/// Encodes `z = max(z', 0)` given pre-activation bounds `l <= z' <= u`,
/// returning the post-activation variable.
///
/// Stable-active neurons (`l >= 0`) need a single equality, stable-inactive
/// ones (`u <= 0`) pin the output to zero, and only unstable neurons pay for
/// a binary with the four big-M constraints.
pub fn relu_encoding(p: &mut MilpProblem, z_pre: VarId, l: f64, u: f64) -> Result<VarId> {
    if !l.is_finite() || !u.is_finite() || l > u {
        return Err(Error::InvalidInput(format!(
            "relu bounds must be finite and ordered, got [{}, {}]",
            l, u
        )));
    }
    if l >= 0.0 {
        let z = p.lp.add_var(l, u);
        p.lp
            .add_constraint(vec![(z, 1.0), (z_pre, -1.0)], Rel::Eq, 0.0);
        return Ok(z);
    }
    if u <= 0.0 {
        return Ok(p.lp.add_var(0.0, 0.0));
    }
    let z = p.lp.add_var(0.0, u);
    let a = p.add_binary();
    // z >= z'
    p.lp
        .add_constraint(vec![(z, 1.0), (z_pre, -1.0)], Rel::Ge, 0.0);
    // z <= u * a
    p.lp.add_constraint(vec![(z, 1.0), (a, -u)], Rel::Le, 0.0);
    // z <= z' - l * (1 - a)
    p.lp
        .add_constraint(vec![(z, 1.0), (z_pre, -1.0), (a, -l)], Rel::Le, -l);
    Ok(z)
}

/// Indicator variables and per-neuron big-M values produced by
/// [`union_encoding`].
#[derive(Debug, Clone)]
pub struct UnionEncoding {
    pub indicators: Vec<VarId>,
    pub big_m: Vec<f64>,
}

/// Restricts the vector `z_vars` to the union of per-member boxes.
///
/// Each member `j` contributes intervals `[l_j,m, u_j,m]` per neuron `m`;
/// one binary indicator per member selects which box holds, with
/// `sum I_j = 1` and, per neuron, `z_m >= l_j,m * I_j` and
/// `z_m <= u_j,m * I_j + u_M,m * (1 - I_j)` where `u_M,m = max_j u_j,m`.
/// All lower bounds must be nonnegative; the disjunction is exact only then.
pub fn union_encoding(
    p: &mut MilpProblem,
    z_vars: &[VarId],
    members: &[Vec<(f64, f64)>],
) -> Result<UnionEncoding> {
    if members.is_empty() {
        return Err(Error::InvalidInput("union over zero members".into()));
    }
    for (j, ivs) in members.iter().enumerate() {
        if ivs.len() != z_vars.len() {
            return Err(Error::Dimension(format!(
                "member {} has {} intervals for {} variables",
                j,
                ivs.len(),
                z_vars.len()
            )));
        }
        for (m, &(l, u)) in ivs.iter().enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::InvalidInput(format!(
                    "member {} neuron {} has malformed interval [{}, {}]",
                    j, m, l, u
                )));
            }
            if l < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "member {} neuron {} has negative lower bound {}; the \
                     disjunction requires nonnegative lower bounds",
                    j, m, l
                )));
            }
        }
    }

    let indicators: Vec<VarId> = members.iter().map(|_| p.add_binary()).collect();
    p.lp.add_constraint(
        indicators.iter().map(|&i| (i, 1.0)).collect(),
        Rel::Eq,
        1.0,
    );
    let mut big_m = Vec::with_capacity(z_vars.len());
    for (m, &z) in z_vars.iter().enumerate() {
        let u_max = members
            .iter()
            .map(|ivs| ivs[m].1)
            .fold(f64::NEG_INFINITY, f64::max);
        let l_min = members
            .iter()
            .map(|ivs| ivs[m].0)
            .fold(f64::INFINITY, f64::min);
        p.lp.set_var_bounds(z, l_min, u_max);
        for (j, &ind) in indicators.iter().enumerate() {
            let (l, u) = members[j][m];
            p.lp
                .add_constraint(vec![(z, 1.0), (ind, -l)], Rel::Ge, 0.0);
            p.lp
                .add_constraint(vec![(z, 1.0), (ind, u_max - u)], Rel::Le, u_max);
        }
        big_m.push(u_max);
    }
    Ok(UnionEncoding {
        indicators,
        big_m,
    })
}

/// Adds the misclassification condition `score_c <= max_{c' != c} score_c'`.
///
/// With two classes this is a single comparison; otherwise a maximum variable
/// over the competitors is built from selector binaries and the class score
/// is required not to exceed it. Returns the variable holding the best
/// competing score.
pub fn max_encoding(
    p: &mut MilpProblem,
    scores: &[VarId],
    class: usize,
    score_bounds: &[(f64, f64)],
) -> Result<VarId> {
    if class >= scores.len() {
        return Err(Error::InvalidInput(format!(
            "class {} out of range for {} outputs",
            class,
            scores.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidInput("need at least two classes".into()));
    }
    let competitors: Vec<usize> = (0..scores.len()).filter(|&i| i != class).collect();
    if competitors.len() == 1 {
        let other = scores[competitors[0]];
        p.lp
            .add_constraint(vec![(scores[class], 1.0), (other, -1.0)], Rel::Le, 0.0);
        return Ok(other);
    }
    let hi = competitors
        .iter()
        .map(|&j| score_bounds[j].1)
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = competitors
        .iter()
        .map(|&j| score_bounds[j].0)
        .fold(f64::NEG_INFINITY, f64::max);
    let t = p.lp.add_var(lo, hi);
    let selectors: Vec<VarId> = competitors.iter().map(|_| p.add_binary()).collect();
    p.lp.add_constraint(
        selectors.iter().map(|&d| (d, 1.0)).collect(),
        Rel::Eq,
        1.0,
    );
    for (&j, &d) in competitors.iter().zip(&selectors) {
        // t >= score_j
        p.lp
            .add_constraint(vec![(t, 1.0), (scores[j], -1.0)], Rel::Ge, 0.0);
        // t <= score_j + slack * (1 - d_j)
        let slack = hi - score_bounds[j].0;
        p.lp.add_constraint(
            vec![(t, 1.0), (scores[j], -1.0), (d, slack)],
            Rel::Le,
            slack,
        );
    }
    p.lp
        .add_constraint(vec![(scores[class], 1.0), (t, -1.0)], Rel::Le, 0.0);
    Ok(t)
}

// ---------------------------------------------------------------------------
// Layer-by-layer construction
// ---------------------------------------------------------------------------

struct LayerVars {
    post: Vec<VarId>,
}

struct EncodedLayers {
    vars: Vec<LayerVars>,
    bounds: Vec<LayerInterval>,
}

/// Encodes layers `from..to` (0-based, end-exclusive) on top of `input_vars`.
///
/// For each layer the pre-activation bounds are taken from `known` when
/// available and otherwise computed by minimizing and maximizing the affine
/// expression subject to all constraints added so far (an exact MILP per
/// neuron and direction). The layer's affine equalities and activation
/// encodings are then appended.
fn encode_layers(
    p: &mut MilpProblem,
    net: &Network,
    from: usize,
    to: usize,
    input_vars: &[VarId],
    known: &[LayerInterval],
    config: &SolverConfig,
) -> Result<EncodedLayers> {
    let mut vars: Vec<LayerVars> = Vec::new();
    let mut bounds: Vec<LayerInterval> = Vec::new();
    let mut prev: Vec<VarId> = input_vars.to_vec();
    for (offset, layer) in net.layers()[..to].iter().enumerate().skip(from) {
        let idx = offset - from;
        let interval = match known.get(idx) {
            Some(iv) => {
                if iv.lower.len() != layer.out_dim() {
                    return Err(Error::Dimension(format!(
                        "supplied bounds for layer {} cover {} neurons, expected {}",
                        offset + 1,
                        iv.lower.len(),
                        layer.out_dim()
                    )));
                }
                iv.clone()
            }
            None => {
                let mut lower = Vec::with_capacity(layer.out_dim());
                let mut upper = Vec::with_capacity(layer.out_dim());
                for m in 0..layer.out_dim() {
                    let terms: Vec<(VarId, f64)> = prev
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| layer.weights[(m, *j)] != 0.0)
                        .map(|(j, &v)| (v, layer.weights[(m, j)]))
                        .collect();
                    let b = layer.bias[m];
                    let lo = affine_bound(p, &terms, Sense::Minimize, config)? + b;
                    let hi = affine_bound(p, &terms, Sense::Maximize, config)? + b;
                    lower.push(lo.min(hi));
                    upper.push(hi.max(lo));
                }
                LayerInterval { lower, upper }
            }
        };

        let mut pre = Vec::with_capacity(layer.out_dim());
        for m in 0..layer.out_dim() {
            let zp = p.lp.add_var(interval.lower[m], interval.upper[m]);
            let mut terms = vec![(zp, 1.0)];
            for (j, &v) in prev.iter().enumerate() {
                let w = layer.weights[(m, j)];
                if w != 0.0 {
                    terms.push((v, -w));
                }
            }
            p.lp.add_constraint(terms, Rel::Eq, layer.bias[m]);
            pre.push(zp);
        }
        let post = if layer.has_relu {
            let mut post = Vec::with_capacity(layer.out_dim());
            for (m, &zp) in pre.iter().enumerate() {
                post.push(relu_encoding(p, zp, interval.lower[m], interval.upper[m])?);
            }
            post
        } else {
            pre.clone()
        };
        prev = post.clone();
        vars.push(LayerVars { post });
        bounds.push(interval);
    }
    Ok(EncodedLayers { vars, bounds })
}

/// Exact optimum of a linear expression over the current constraint set.
fn affine_bound(
    p: &mut MilpProblem,
    terms: &[(VarId, f64)],
    sense: Sense,
    config: &SolverConfig,
) -> Result<f64> {
    if terms.is_empty() {
        return Ok(0.0);
    }
    p.lp.set_objective(sense, terms.to_vec());
    let r = solve_milp(p, MilpMode::Complete, config);
    p.lp.set_objective(Sense::Feasibility, Vec::new());
    let r = r?;
    match r.status {
        Status::Optimal | Status::Feasible => Ok(r.objective.expect("objective present")),
        Status::Infeasible => Err(Error::Solver(
            "bound computation hit an infeasible region".into(),
        )),
        Status::Unbounded => Err(Error::Solver("bound computation unbounded".into())),
    }
}

// ---------------------------------------------------------------------------
// Top-level encodings
// ---------------------------------------------------------------------------

/// Per-neuron pre-activation bounds through the first `ell` layers (1-based)
/// of the network for one epsilon-ball. The returned ranges are exact up to
/// solver tolerance, hence sound: every reachable pre-activation lies inside.
pub fn milp_bounds(
    net: &Network,
    q: &BallQuery,
    ell: usize,
    config: &SolverConfig,
) -> Result<LayerBounds> {
    if ell < 1 || ell > net.depth() {
        return Err(Error::InvalidInput(format!(
            "split layer {} outside [1, {}]",
            ell,
            net.depth()
        )));
    }
    if q.center.len() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "query has {} coordinates, network expects {}",
            q.center.len(),
            net.input_dim()
        )));
    }
    let mut p = MilpProblem::new();
    let inputs: Vec<VarId> = input_box(q)
        .into_iter()
        .map(|(l, u)| p.lp.add_var(l, u))
        .collect();
    let encoded = encode_layers(&mut p, net, 0, ell, &inputs, &[], config)?;
    Ok(LayerBounds {
        layers: encoded.bounds,
    })
}

/// A batch verification problem over the network suffix.
#[derive(Debug)]
pub struct BatchEncoding {
    pub milp: MilpProblem,
    /// One indicator per batch member, in member order.
    pub indicators: Vec<VarId>,
    /// Per-neuron big-M values of the union at the split layer.
    pub big_m: Vec<f64>,
}

impl BatchEncoding {
    /// Member whose indicator is set in a feasible assignment. Errors unless
    /// exactly one indicator is within tolerance of 1.
    pub fn selected_member(&self, assignment: &[f64], config: &SolverConfig) -> Result<usize> {
        let ones: Vec<usize> = self
            .indicators
            .iter()
            .enumerate()
            .filter(|(_, &v)| (assignment[v.0] - 1.0).abs() <= config.int_tol)
            .map(|(j, _)| j)
            .collect();
        match ones.as_slice() {
            [j] => Ok(*j),
            _ => Err(Error::Solver(format!(
                "expected exactly one active indicator, found {}",
                ones.len()
            ))),
        }
    }
}

/// Encodes the joint verification of a batch from the split layer onward.
///
/// `members` holds, per batch member, the post-ReLU intervals of the split
/// layer `ell` (1-based); all lower bounds must be nonnegative. The encoding
/// restricts the suffix input to the union of those boxes, rebuilds the
/// remaining layers with batch-wide bounds, and asserts the
/// misclassification condition for `class`. Infeasibility of the result
/// proves every member ball robust.
pub fn milp_batch(
    net: &Network,
    ell: usize,
    members: &[Vec<(f64, f64)>],
    class: usize,
    config: &SolverConfig,
) -> Result<BatchEncoding> {
    if ell < 1 || ell >= net.depth() {
        return Err(Error::InvalidInput(format!(
            "split layer {} leaves no suffix in a {}-layer network",
            ell,
            net.depth()
        )));
    }
    if class >= net.output_dim() {
        return Err(Error::InvalidInput(format!(
            "class {} out of range for {} outputs",
            class,
            net.output_dim()
        )));
    }
    let m_ell = net.layers()[ell - 1].out_dim();
    let mut p = MilpProblem::new();
    let z_ell: Vec<VarId> = (0..m_ell)
        .map(|_| p.lp.add_var(f64::NEG_INFINITY, f64::INFINITY))
        .collect();
    let union = union_encoding(&mut p, &z_ell, members)?;
    let encoded = encode_layers(&mut p, net, ell, net.depth(), &z_ell, &[], config)?;
    let out_vars = &encoded.vars.last().expect("suffix nonempty").post;
    let out_bounds = encoded.bounds.last().expect("suffix nonempty");
    let score_bounds: Vec<(f64, f64)> = out_bounds
        .lower
        .iter()
        .zip(&out_bounds.upper)
        .map(|(&l, &u)| (l, u))
        .collect();
    max_encoding(&mut p, out_vars, class, &score_bounds)?;
    Ok(BatchEncoding {
        milp: p,
        indicators: union.indicators,
        big_m: union.big_m,
    })
}

/// Verdict of a complete single-ball verification.
#[derive(Debug, Clone, PartialEq)]
pub enum SingleVerdict {
    Robust,
    NonRobust { witness: Vec<f64> },
}

/// Complete verification of one epsilon-ball.
///
/// Builds the full-network constraints (reusing `prefix_bounds` for the
/// leading layers when given), asserts the misclassification condition, and
/// solves in first-feasible mode. A feasible point yields a candidate
/// adversarial input which is validated by an exact forward pass; if the
/// point sits on the decision boundary, the maximal score gap over the ball
/// is optimized to find a strictly misclassified input. When no input in the
/// ball strictly changes the classification, the ball is robust.
pub fn verify_single_ball(
    net: &Network,
    q: &BallQuery,
    prefix_bounds: Option<&LayerBounds>,
    config: &SolverConfig,
) -> Result<SingleVerdict> {
    if q.center.len() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "query has {} coordinates, network expects {}",
            q.center.len(),
            net.input_dim()
        )));
    }
    if q.class >= net.output_dim() {
        return Err(Error::InvalidInput(format!(
            "class {} out of range for {} outputs",
            q.class,
            net.output_dim()
        )));
    }
    let box_bounds = input_box(q);
    let mut p = MilpProblem::new();
    let inputs: Vec<VarId> = box_bounds
        .iter()
        .map(|&(l, u)| p.lp.add_var(l, u))
        .collect();
    let known: &[LayerInterval] = prefix_bounds.map_or(&[], |b| &b.layers);
    let encoded = encode_layers(&mut p, net, 0, net.depth(), &inputs, known, config)?;
    let out_vars = &encoded.vars.last().expect("network nonempty").post;
    let out_bounds = encoded.bounds.last().expect("network nonempty");
    let score_bounds: Vec<(f64, f64)> = out_bounds
        .lower
        .iter()
        .zip(&out_bounds.upper)
        .map(|(&l, &u)| (l, u))
        .collect();
    let best_other = max_encoding(&mut p, out_vars, q.class, &score_bounds)?;
    let class_var = out_vars[q.class];

    let first = solve_milp(&p, MilpMode::FirstFeasible, config)?;
    if first.status == Status::Infeasible {
        return Ok(SingleVerdict::Robust);
    }
    if !first.is_feasible() {
        return Err(Error::Solver(format!(
            "unexpected status {:?} for feasibility query",
            first.status
        )));
    }
    let assignment = first.assignment.expect("feasible has assignment");
    if let Some(w) = validated_witness(net, q, &inputs, &assignment, &box_bounds)? {
        return Ok(SingleVerdict::NonRobust { witness: w });
    }

    // The first-feasible point grazed the decision boundary. Maximize the
    // score gap; a strictly positive optimum yields a real witness, an
    // optimum of zero means no input in the ball strictly flips the argmax.
    let mut gap = p.clone();
    gap.lp.set_objective(
        Sense::Maximize,
        vec![(best_other, 1.0), (class_var, -1.0)],
    );
    let polished = solve_milp(&gap, MilpMode::Complete, config)?;
    if polished.is_feasible() {
        let assignment = polished.assignment.expect("feasible has assignment");
        if let Some(w) = validated_witness(net, q, &inputs, &assignment, &box_bounds)? {
            return Ok(SingleVerdict::NonRobust { witness: w });
        }
    }
    Ok(SingleVerdict::Robust)
}

/// Extracts the input assignment, clamps it into the ball, and accepts it
/// only if the exact forward pass misclassifies.
fn validated_witness(
    net: &Network,
    q: &BallQuery,
    inputs: &[VarId],
    assignment: &[f64],
    box_bounds: &[(f64, f64)],
) -> Result<Option<Vec<f64>>> {
    let mut w: Vec<f64> = inputs.iter().map(|&v| assignment[v.0]).collect();
    for (x, &(l, u)) in w.iter_mut().zip(box_bounds) {
        *x = x.clamp(l, u);
    }
    if net.classify(&w)? != q.class {
        Ok(Some(w))
    } else {
        Ok(None)
    }
}
