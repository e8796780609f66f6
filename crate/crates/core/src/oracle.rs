//! Ground-truth verification for tiny networks.
//!
//! [`enumerate_verify`] decides robustness by exhausting all activation
//! pattern assignments: each assignment fixes every ReLU's phase, which makes
//! the region and the misclassification question plain linear programs. No
//! big-M constraints, no computed bounds, and no branch-and-bound are
//! involved, so the result is an independent check of the MILP pipeline.
//! Infeasible sign prefixes are pruned, which leaves the verdict unchanged.
//!
//! [`grid_falsify`] scans a dense grid over the ball; a returned witness
//! proves non-robustness, while an empty scan proves nothing.

use crate::encoder::{input_box, BallQuery};
use crate::network::Network;
use crate::solver::{solve_lp, LinearProgram, Rel, Sense, SolverConfig, Status, VarId};
use crate::{Error, Result};

/// Verdict of the enumeration oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleVerdict {
    Robust,
    NonRobust { witness: Vec<f64> },
}

/// Decides robustness of one ball by exhaustive activation-pattern
/// enumeration. Requires the total ReLU count to stay at or below `cap`
/// (the work grows exponentially with it).
pub fn enumerate_verify(
    net: &Network,
    q: &BallQuery,
    cap: usize,
    config: &SolverConfig,
) -> Result<OracleVerdict> {
    if net.relu_count() > cap {
        return Err(Error::InvalidInput(format!(
            "network has {} ReLUs, enumeration capped at {}",
            net.relu_count(),
            cap
        )));
    }
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

    let mut lp = LinearProgram::new();
    let inputs: Vec<VarId> = input_box(q).into_iter().map(|(l, u)| lp.add_var(l, u)).collect();
    let mut state = Search {
        net,
        q,
        config,
        inputs: inputs.clone(),
        boundary_grazed: false,
    };
    state.descend(lp, inputs, 0)
}

struct Search<'a> {
    net: &'a Network,
    q: &'a BallQuery,
    config: &'a SolverConfig,
    inputs: Vec<VarId>,
    boundary_grazed: bool,
}

impl Search<'_> {
    /// Recursively fixes the phase of every ReLU layer by layer. `prev` holds
    /// the post-activation variables feeding layer `layer`.
    fn descend(
        &mut self,
        lp: LinearProgram,
        prev: Vec<VarId>,
        layer: usize,
    ) -> Result<OracleVerdict> {
        if layer == self.net.depth() - 1 {
            return self.check_output_region(lp, &prev);
        }
        let l = &self.net.layers()[layer];
        // Pre-activation variables and affine equalities for this layer.
        let mut base = lp;
        let mut pres = Vec::with_capacity(l.out_dim());
        for m in 0..l.out_dim() {
            let zp = base.add_var(f64::NEG_INFINITY, f64::INFINITY);
            let mut terms = vec![(zp, 1.0)];
            for (j, &v) in prev.iter().enumerate() {
                let w = l.weights[(m, j)];
                if w != 0.0 {
                    terms.push((v, -w));
                }
            }
            base.add_constraint(terms, Rel::Eq, l.bias[m]);
            pres.push(zp);
        }
        self.fix_neurons(base, &pres, Vec::new(), 0, layer)
    }

    /// Branches each neuron of the current layer into active / inactive,
    /// pruning sign prefixes whose region is already empty.
    fn fix_neurons(
        &mut self,
        lp: LinearProgram,
        pres: &[VarId],
        posts: Vec<VarId>,
        m: usize,
        layer: usize,
    ) -> Result<OracleVerdict> {
        if m == pres.len() {
            return self.descend(lp, posts, layer + 1);
        }
        for active in [true, false] {
            let mut branch = lp.clone();
            let post = if active {
                branch.add_constraint(vec![(pres[m], 1.0)], Rel::Ge, 0.0);
                pres[m]
            } else {
                branch.add_constraint(vec![(pres[m], 1.0)], Rel::Le, 0.0);
                branch.add_var(0.0, 0.0)
            };
            let probe = solve_lp(&branch, self.config)?;
            if probe.status == Status::Infeasible {
                continue;
            }
            let mut next_posts = posts.clone();
            next_posts.push(post);
            match self.fix_neurons(branch, pres, next_posts, m + 1, layer)? {
                OracleVerdict::Robust => {}
                non_robust => return Ok(non_robust),
            }
        }
        Ok(OracleVerdict::Robust)
    }

    /// Inside a fully fixed region the outputs are affine; the ball is
    /// non-robust here iff some competing class can reach the target class's
    /// score. Witnesses must strictly flip the argmax under an exact forward
    /// pass; boundary-grazing ties do not count.
    fn check_output_region(
        &mut self,
        lp: LinearProgram,
        prev: &[VarId],
    ) -> Result<OracleVerdict> {
        let out = self.net.layers().last().expect("nonempty network");
        let mut base = lp;
        let mut scores = Vec::with_capacity(out.out_dim());
        for c in 0..out.out_dim() {
            let zc = base.add_var(f64::NEG_INFINITY, f64::INFINITY);
            let mut terms = vec![(zc, 1.0)];
            for (j, &v) in prev.iter().enumerate() {
                let w = out.weights[(c, j)];
                if w != 0.0 {
                    terms.push((v, -w));
                }
            }
            base.add_constraint(terms, Rel::Eq, out.bias[c]);
            scores.push(zc);
        }
        let target = scores[self.q.class];
        let bx = input_box(self.q);
        for (c, &other) in scores.iter().enumerate() {
            if c == self.q.class {
                continue;
            }
            // Maximize the competitor's advantage over the target class.
            let mut gap_lp = base.clone();
            gap_lp.add_constraint(vec![(other, 1.0), (target, -1.0)], Rel::Ge, 0.0);
            gap_lp.set_objective(Sense::Maximize, vec![(other, 1.0), (target, -1.0)]);
            let r = solve_lp(&gap_lp, self.config)?;
            if !r.is_feasible() {
                continue;
            }
            let a = r.assignment.expect("feasible LP has assignment");
            let mut w: Vec<f64> = self.inputs.iter().map(|&v| a[v.0]).collect();
            for (x, &(l, u)) in w.iter_mut().zip(&bx) {
                *x = x.clamp(l, u);
            }
            if self.net.classify(&w)? != self.q.class {
                return Ok(OracleVerdict::NonRobust { witness: w });
            }
            self.boundary_grazed = true;
        }
        Ok(OracleVerdict::Robust)
    }
}

/// Scans a uniform grid over the ball and returns the first misclassified
/// point. Only usable for small input dimensions; `resolution` is the number
/// of grid points per axis.
pub fn grid_falsify(net: &Network, q: &BallQuery, resolution: usize) -> Result<Option<Vec<f64>>> {
    if net.input_dim() > 4 {
        return Err(Error::InvalidInput(format!(
            "grid search limited to 4 input dimensions, network has {}",
            net.input_dim()
        )));
    }
    if resolution < 1 {
        return Err(Error::InvalidInput("resolution must be at least 1".into()));
    }
    let bx = input_box(q);
    let d = bx.len();
    let mut idx = vec![0usize; d];
    let coord = |axis: usize, step: usize| -> f64 {
        let (l, u) = bx[axis];
        if resolution == 1 {
            (l + u) / 2.0
        } else {
            l + (u - l) * step as f64 / (resolution - 1) as f64
        }
    };
    loop {
        let point: Vec<f64> = (0..d).map(|a| coord(a, idx[a])).collect();
        if net.classify(&point)? != q.class {
            return Ok(Some(point));
        }
        // Odometer increment over the grid indices.
        let mut axis = 0;
        loop {
            if axis == d {
                return Ok(None);
            }
            idx[axis] += 1;
            if idx[axis] < resolution {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use ndarray::{Array1, Array2};

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    /// One input, one hidden ReLU, two outputs; the decision flips at x = 0.5.
    fn straddle_net() -> Network {
        let layers = vec![
            Layer {
                weights: Array2::from_shape_vec((1, 1), vec![2.0]).unwrap(),
                bias: Array1::from(vec![-1.0]),
                has_relu: true,
                from_conv: false,
            },
            Layer {
                weights: Array2::from_shape_vec((2, 1), vec![-3.0, 3.0]).unwrap(),
                bias: Array1::from(vec![0.5, -0.5]),
                has_relu: false,
                from_conv: false,
            },
        ];
        Network::new(layers, 1).unwrap()
    }

    #[test]
    fn point_ball_on_correct_class_is_robust() {
        let net = straddle_net();
        let x = vec![0.2];
        let class = net.classify(&x).unwrap();
        let q = BallQuery::new(x, 0.0, class).unwrap();
        assert_eq!(
            enumerate_verify(&net, &q, 20, &cfg()).unwrap(),
            OracleVerdict::Robust
        );
    }

    #[test]
    fn ball_straddling_the_decision_flip_is_non_robust() {
        let net = straddle_net();
        let x = vec![0.45];
        let class = net.classify(&x).unwrap();
        assert_eq!(class, 0);
        let q = BallQuery::new(x, 0.2, class).unwrap();
        match enumerate_verify(&net, &q, 20, &cfg()).unwrap() {
            OracleVerdict::NonRobust { witness } => {
                assert_ne!(net.classify(&witness).unwrap(), class);
                assert!((witness[0] - 0.45).abs() <= 0.2 + 1e-9);
            }
            OracleVerdict::Robust => panic!("straddling ball reported robust"),
        }
    }

    #[test]
    fn cap_is_enforced() {
        let net = straddle_net();
        let q = BallQuery::new(vec![0.5], 0.1, 0).unwrap();
        assert!(matches!(
            enumerate_verify(&net, &q, 0, &cfg()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn grid_finds_nothing_in_a_constant_region() {
        let net = straddle_net();
        let x = vec![0.1];
        let class = net.classify(&x).unwrap();
        let q = BallQuery::new(x, 0.05, class).unwrap();
        assert_eq!(grid_falsify(&net, &q, 25).unwrap(), None);
    }

    #[test]
    fn grid_containing_oracle_witness_finds_one() {
        let net = straddle_net();
        let x = vec![0.45];
        let class = net.classify(&x).unwrap();
        let q = BallQuery::new(x.clone(), 0.2, class).unwrap();
        let witness = match enumerate_verify(&net, &q, 20, &cfg()).unwrap() {
            OracleVerdict::NonRobust { witness } => witness,
            OracleVerdict::Robust => panic!("expected non-robust"),
        };
        let found = grid_falsify(&net, &q, 101).unwrap();
        assert!(found.is_some(), "grid missed witness near {:?}", witness);
    }

    #[test]
    fn grid_witness_implies_oracle_non_robust() {
        for seed in 0..15u64 {
            let net = crate::encoder::tests::random_net(seed.wrapping_add(200), &[2, 3, 2], 1.5);
            let x = crate::encoder::tests::random_point(seed.wrapping_add(200), 2);
            let class = net.classify(&x).unwrap();
            let q = BallQuery::new(x, 0.15, class).unwrap();
            if let Some(w) = grid_falsify(&net, &q, 21).unwrap() {
                assert_ne!(net.classify(&w).unwrap(), class);
                assert!(matches!(
                    enumerate_verify(&net, &q, 20, &cfg()).unwrap(),
                    OracleVerdict::NonRobust { .. }
                ));
            }
        }
    }

    #[test]
    fn agrees_with_milp_verifier_on_seeded_instances() {
        use crate::encoder::{verify_single_ball, SingleVerdict};
        for seed in 0..25u64 {
            let net = crate::encoder::tests::random_net(seed.wrapping_add(900), &[3, 4, 3, 2], 1.4);
            let x = crate::encoder::tests::random_point(seed.wrapping_add(900), 3);
            let class = net.classify(&x).unwrap();
            let q = BallQuery::new(x, 0.05 + 0.01 * (seed % 5) as f64, class).unwrap();
            let milp = verify_single_ball(&net, &q, None, &cfg()).unwrap();
            let oracle = enumerate_verify(&net, &q, 20, &cfg()).unwrap();
            assert_eq!(
                matches!(milp, SingleVerdict::Robust),
                matches!(oracle, OracleVerdict::Robust),
                "seed {}: verifier {:?} oracle {:?}",
                seed,
                milp,
                oracle
            );
        }
    }

    #[test]
    fn verdict_invariant_under_neuron_permutation() {
        for seed in 0..10u64 {
            let net = crate::encoder::tests::random_net(seed.wrapping_add(300), &[2, 4, 2], 1.3);
            let x = crate::encoder::tests::random_point(seed.wrapping_add(300), 2);
            let class = net.classify(&x).unwrap();
            let q = BallQuery::new(x, 0.08, class).unwrap();
            let base = enumerate_verify(&net, &q, 20, &cfg()).unwrap();

            // Swap hidden neurons 0 and 1 (rows of layer 1, columns of layer 2).
            let mut layers = net.layers().to_vec();
            let w0 = layers[0].weights.clone();
            let b0 = layers[0].bias.clone();
            for j in 0..w0.ncols() {
                layers[0].weights[(0, j)] = w0[(1, j)];
                layers[0].weights[(1, j)] = w0[(0, j)];
            }
            layers[0].bias[0] = b0[1];
            layers[0].bias[1] = b0[0];
            let w1 = layers[1].weights.clone();
            for c in 0..w1.nrows() {
                layers[1].weights[(c, 0)] = w1[(c, 1)];
                layers[1].weights[(c, 1)] = w1[(c, 0)];
            }
            let permuted = Network::new(layers, net.input_dim()).unwrap();
            let perm_verdict = enumerate_verify(&permuted, &q, 20, &cfg()).unwrap();
            assert_eq!(
                matches!(base, OracleVerdict::Robust),
                matches!(perm_verdict, OracleVerdict::Robust),
                "seed {}",
                seed
            );
        }
    }
}
