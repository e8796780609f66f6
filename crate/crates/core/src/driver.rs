//! Orchestration of group verification.
//!
//! [`verify_group`] runs the full pipeline for one class: filter out
//! misclassified inputs, learn the split layer, cluster the survivors by
//! activation pattern, then repeatedly draw a batch size from the policy,
//! extract the most similar unhandled inputs, verify them jointly, and refine
//! suspects individually. Batch velocities feed back into the policy.
//!
//! The expensive verification steps run behind the [`VerifyEngine`] trait and
//! time is read through [`Clock`], so tests can script solver outcomes and
//! durations deterministically. [`verify_one_by_one`] is the baseline that
//! verifies every ball individually.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{BatchSizeBandit, RoundTrace, Velocity};
use crate::clustering::{build_batch_tree, hcluster};
use crate::encoder::{milp_batch, milp_bounds, verify_single_ball, BallQuery, LayerBounds, SingleVerdict};
use crate::network::Network;
use crate::solver::{MilpMode, MilpSession, Rel, SolverConfig, Status, VarId};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Injectable time source
// ---------------------------------------------------------------------------

/// Monotonic time source in seconds.
pub trait Clock: Sync {
    fn now_s(&self) -> f64;
}

/// Wall-clock time since construction.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_s(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Manually advanced clock for deterministic tests.
pub struct MockClock(std::sync::atomic::AtomicU64);

impl MockClock {
    pub fn new() -> Self {
        Self(std::sync::atomic::AtomicU64::new(0f64.to_bits()))
    }

    pub fn advance(&self, dt: f64) {
        use std::sync::atomic::Ordering;
        let mut cur = self.0.load(Ordering::SeqCst);
        loop {
            let next = (f64::from_bits(cur) + dt).to_bits();
            match self
                .0
                .compare_exchange(cur, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }
}

impl Default for MockClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MockClock {
    fn now_s(&self) -> f64 {
        f64::from_bits(self.0.load(std::sync::atomic::Ordering::SeqCst))
    }
}

// ---------------------------------------------------------------------------
// Verification engine
// ---------------------------------------------------------------------------

/// Handle to an open batch MILP; re-solving after exclusions continues the
/// same session instead of starting from scratch.
pub trait BatchHandle {
    /// Solves the batch query. Returns the input whose indicator is active in
    /// a counterexample, or `None` when the batch is proven robust.
    fn solve(&mut self) -> Result<Option<usize>>;

    /// Pins the input's indicator to zero and re-solves.
    fn exclude_and_resolve(&mut self, input: usize) -> Result<Option<usize>>;
}

/// The expensive verification primitives, behind a trait so the driver logic
/// can be exercised with scripted outcomes.
pub trait VerifyEngine: Sync {
    /// Per-ball pre-activation bounds through the first `ell` layers.
    fn prefix_bounds(&self, ell: usize, input: usize, x: &[f64]) -> Result<LayerBounds>;

    /// Opens the joint suffix query over the batch members' post-ReLU boxes
    /// at layer `ell`.
    fn open_batch(
        &self,
        ell: usize,
        members: &[(usize, Vec<(f64, f64)>)],
    ) -> Result<Box<dyn BatchHandle>>;

    /// Complete single-ball verification over the whole network, reusing
    /// prefix bounds when available.
    fn verify_full(
        &self,
        input: usize,
        x: &[f64],
        bounds: Option<&LayerBounds>,
    ) -> Result<SingleVerdict>;
}

/// Production engine: MILP encodings over the real network.
pub struct MilpEngine<'a> {
    pub net: &'a Network,
    pub epsilon: f64,
    pub class: usize,
    pub solver: SolverConfig,
}

impl VerifyEngine for MilpEngine<'_> {
    fn prefix_bounds(&self, ell: usize, _input: usize, x: &[f64]) -> Result<LayerBounds> {
        let q = BallQuery::new(x.to_vec(), self.epsilon, self.class)?;
        milp_bounds(self.net, &q, ell, &self.solver)
    }

    fn open_batch(
        &self,
        ell: usize,
        members: &[(usize, Vec<(f64, f64)>)],
    ) -> Result<Box<dyn BatchHandle>> {
        let intervals: Vec<Vec<(f64, f64)>> = members.iter().map(|(_, iv)| iv.clone()).collect();
        let enc = milp_batch(self.net, ell, &intervals, self.class, &self.solver)?;
        Ok(Box::new(MilpBatchHandle {
            session: MilpSession::new(enc.milp, MilpMode::FirstFeasible, self.solver),
            indicators: members
                .iter()
                .map(|(id, _)| *id)
                .zip(enc.indicators)
                .collect(),
            int_tol: self.solver.int_tol,
        }))
    }

    fn verify_full(
        &self,
        _input: usize,
        x: &[f64],
        bounds: Option<&LayerBounds>,
    ) -> Result<SingleVerdict> {
        let q = BallQuery::new(x.to_vec(), self.epsilon, self.class)?;
        verify_single_ball(self.net, &q, bounds, &self.solver)
    }
}

struct MilpBatchHandle {
    session: MilpSession,
    indicators: Vec<(usize, VarId)>,
    int_tol: f64,
}

impl MilpBatchHandle {
    fn interpret(&self, r: crate::solver::SolveResult) -> Result<Option<usize>> {
        match r.status {
            Status::Infeasible => Ok(None),
            Status::Feasible | Status::Optimal => {
                let a = r.assignment.expect("feasible result has assignment");
                let active: Vec<usize> = self
                    .indicators
                    .iter()
                    .filter(|(_, v)| (a[v.0] - 1.0).abs() <= self.int_tol)
                    .map(|(id, _)| *id)
                    .collect();
                match active.as_slice() {
                    [id] => Ok(Some(*id)),
                    _ => Err(Error::Solver(format!(
                        "batch counterexample selects {} indicators instead of one",
                        active.len()
                    ))),
                }
            }
            Status::Unbounded => Err(Error::Solver("batch query unbounded".into())),
        }
    }
}

impl BatchHandle for MilpBatchHandle {
    fn solve(&mut self) -> Result<Option<usize>> {
        let r = self.session.solve()?;
        self.interpret(r)
    }

    fn exclude_and_resolve(&mut self, input: usize) -> Result<Option<usize>> {
        let var = self
            .indicators
            .iter()
            .find(|(id, _)| *id == input)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidInput(format!("input {} not in batch", input)))?;
        let r = self
            .session
            .add_constraint_and_resolve(vec![(var, 1.0)], Rel::Eq, 0.0)?;
        self.interpret(r)
    }
}

// ---------------------------------------------------------------------------
// Batch-size policy
// ---------------------------------------------------------------------------

/// Source of batch-size recommendations; the production implementation is
/// the Thompson-sampling bandit.
pub trait BatchSizePolicy {
    fn recommend(&mut self, rng: &mut dyn RngCore) -> usize;
    fn update(&mut self, actual_size: usize, velocity: Velocity) -> Result<()>;
    fn trace(&self) -> Vec<RoundTrace> {
        Vec::new()
    }
}

impl BatchSizePolicy for BatchSizeBandit {
    fn recommend(&mut self, rng: &mut dyn RngCore) -> usize {
        BatchSizeBandit::recommend(self, rng)
    }

    fn update(&mut self, actual_size: usize, velocity: Velocity) -> Result<()> {
        BatchSizeBandit::update(self, actual_size, velocity)
    }

    fn trace(&self) -> Vec<RoundTrace> {
        self.trace().to_vec()
    }
}

// ---------------------------------------------------------------------------
// Configuration and report types
// ---------------------------------------------------------------------------

/// How the split layer is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Learn by timing one single-ball trial per candidate layer.
    Auto,
    /// Use the given layer (1-based, at most depth - 1).
    Fixed(usize),
    /// Use the last layer lowered from a convolution.
    LastConv,
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub epsilon: f64,
    pub class: usize,
    pub max_batch_size: usize,
    pub bucket_size: usize,
    pub rho: f64,
    pub seed: u64,
    pub split: SplitStrategy,
    pub solver: SolverConfig,
    /// Compute per-member prefix bounds on the rayon pool. Timing always sums
    /// per-task durations, so parallelism does not distort velocities.
    pub parallel_bounds: bool,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            class: 0,
            max_batch_size: 8,
            bucket_size: 2,
            rho: 100.0,
            seed: 0,
            split: SplitStrategy::Auto,
            solver: SolverConfig::default(),
            parallel_bounds: false,
        }
    }
}

/// Final status of one input's ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RobustnessStatus {
    Robust,
    NonRobust,
    /// The center itself is not classified as the target class.
    NonRobustMisclassified,
}

/// Which stage produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Filter,
    SplitLearning,
    Batch,
    Refinement,
    /// One-by-one baseline verification.
    Single,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputVerdict {
    pub input: usize,
    pub status: RobustnessStatus,
    pub provenance: Provenance,
    /// Adversarial example, present only for refinement or baseline verdicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub members: Vec<usize>,
    pub recommended_k: usize,
    pub actual_k: usize,
    pub bounds_s: f64,
    pub suffix_s: f64,
    pub refine_s: f64,
    pub refinements: usize,
    pub proven: usize,
    pub velocity: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Totals {
    pub bounds_s: f64,
    pub batch_s: f64,
    pub refine_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub verdicts: Vec<InputVerdict>,
    pub split_layer: usize,
    /// Set when auto split learning lacked inputs and fell back to layer 1.
    pub split_fallback: bool,
    pub batches: Vec<BatchRecord>,
    /// Sums over the per-batch records.
    pub totals: Totals,
    /// Time spent learning the split layer.
    pub split_s: f64,
    /// Wall time of the whole run.
    pub wall_s: f64,
    pub bandit_trace: Vec<RoundTrace>,
    /// Error that aborted the run, leaving some inputs unverified.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incomplete: Option<String>,
}

// ---------------------------------------------------------------------------
// Split-layer learning
// ---------------------------------------------------------------------------

/// Chooses the split layer by verifying one sampled ball per candidate layer
/// and keeping the fastest. Sampled inputs get their verdicts recorded and
/// leave the working set. Returns `(layer, fallback, elapsed)`.
pub fn learn_split_layer<E: VerifyEngine>(
    net: &Network,
    remaining: &mut Vec<(usize, Vec<f64>)>,
    engine: &E,
    clock: &dyn Clock,
    rng: &mut ChaCha8Rng,
    verdicts: &mut Vec<InputVerdict>,
) -> Result<(usize, bool, f64)> {
    let candidates = net.depth() - 1;
    if remaining.len() < candidates {
        return Ok((1, !remaining.is_empty(), 0.0));
    }
    let started = clock.now_s();
    let mut best: Option<(usize, f64)> = None;
    for l in 1..=candidates {
        let pick = rng.gen_range(0..remaining.len());
        let (input, x) = remaining.swap_remove(pick);
        let t0 = clock.now_s();
        let bounds = engine.prefix_bounds(l, input, &x)?;
        let members = vec![(input, bounds.post_relu_intervals(l))];
        let mut handle = engine.open_batch(l, &members)?;
        let suspect = handle.solve()?;
        let status = match suspect {
            None => RobustnessStatus::Robust,
            Some(_) => match engine.verify_full(input, &x, Some(&bounds))? {
                SingleVerdict::Robust => RobustnessStatus::Robust,
                SingleVerdict::NonRobust { .. } => RobustnessStatus::NonRobust,
            },
        };
        let elapsed = clock.now_s() - t0;
        verdicts.push(InputVerdict {
            input,
            status,
            provenance: Provenance::SplitLearning,
            witness: None,
        });
        if best.is_none_or(|(_, t)| elapsed < t) {
            best = Some((l, elapsed));
        }
    }
    let (ell, _) = best.expect("at least one candidate layer");
    Ok((ell, false, clock.now_s() - started))
}

// ---------------------------------------------------------------------------
// Group verification
// ---------------------------------------------------------------------------

/// Verifies every input's epsilon-ball against `config.class`, batching balls
/// with similar activation patterns. Inputs arrive as (original index,
/// vector) pairs. Solver failures abort the run and flag the report as
/// incomplete rather than discarding finished verdicts.
pub fn verify_group<E: VerifyEngine>(
    net: &Network,
    inputs: &[(usize, Vec<f64>)],
    config: &DriverConfig,
    engine: &E,
    policy: &mut dyn BatchSizePolicy,
    clock: &dyn Clock,
) -> Result<RunReport> {
    if net.depth() < 2 {
        return Err(Error::InvalidInput(
            "group verification needs at least one hidden layer".into(),
        ));
    }
    let run_start = clock.now_s();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut verdicts: Vec<InputVerdict> = Vec::with_capacity(inputs.len());
    let mut remaining: Vec<(usize, Vec<f64>)> = Vec::with_capacity(inputs.len());

    for (input, x) in inputs {
        if net.classify(x)? != config.class {
            verdicts.push(InputVerdict {
                input: *input,
                status: RobustnessStatus::NonRobustMisclassified,
                provenance: Provenance::Filter,
                witness: None,
            });
        } else {
            remaining.push((*input, x.clone()));
        }
    }

    let mut report = RunReport {
        verdicts: Vec::new(),
        split_layer: 1,
        split_fallback: false,
        batches: Vec::new(),
        totals: Totals::default(),
        split_s: 0.0,
        wall_s: 0.0,
        bandit_trace: Vec::new(),
        incomplete: None,
    };

    let outcome = run_phases(
        net, config, engine, policy, clock, &mut rng, &mut remaining, &mut verdicts, &mut report,
    );
    if let Err(e) = outcome {
        match e {
            Error::Solver(_) | Error::NodeLimit(_) => {
                report.incomplete = Some(e.to_string());
            }
            other => return Err(other),
        }
    }

    verdicts.sort_by_key(|v| v.input);
    report.verdicts = verdicts;
    report.bandit_trace = policy.trace();
    report.wall_s = clock.now_s() - run_start;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_phases<E: VerifyEngine>(
    net: &Network,
    config: &DriverConfig,
    engine: &E,
    policy: &mut dyn BatchSizePolicy,
    clock: &dyn Clock,
    rng: &mut ChaCha8Rng,
    remaining: &mut Vec<(usize, Vec<f64>)>,
    verdicts: &mut Vec<InputVerdict>,
    report: &mut RunReport,
) -> Result<()> {
    // Split layer.
    let ell = match config.split {
        SplitStrategy::Fixed(l) => {
            if l < 1 || l >= net.depth() {
                return Err(Error::InvalidInput(format!(
                    "split layer {} outside [1, {}]",
                    l,
                    net.depth() - 1
                )));
            }
            l
        }
        SplitStrategy::LastConv => {
            let l = net.last_conv_layer().ok_or_else(|| {
                Error::InvalidInput("network has no convolution-derived layer".into())
            })?;
            l.min(net.depth() - 1)
        }
        SplitStrategy::Auto => {
            if remaining.is_empty() {
                1
            } else {
                let (l, fallback, split_s) =
                    learn_split_layer(net, remaining, engine, clock, rng, verdicts)?;
                report.split_fallback = fallback;
                report.split_s = split_s;
                l
            }
        }
    };
    report.split_layer = ell;
    if remaining.is_empty() {
        return Ok(());
    }

    // Cluster by activation pattern. Sorting by original index makes the
    // clustering tie-breaks refer to input identity.
    remaining.sort_by_key(|(input, _)| *input);
    let patterns = remaining
        .iter()
        .map(|(_, x)| net.activation_pattern(x))
        .collect::<Result<Vec<_>>>()?;
    let dendrogram = hcluster(&patterns)?;
    let mut tree = build_batch_tree(&dendrogram);

    while !tree.is_empty() {
        let recommended_k = policy.recommend(rng);
        let positions = tree.extract_batch(recommended_k)?;
        let mut batch: Vec<(usize, Vec<f64>)> = positions
            .iter()
            .map(|&p| remaining[p].clone())
            .collect();
        let actual_k = batch.len();

        // Per-member prefix bounds; velocity sums per-task durations.
        let results: Vec<Result<(usize, LayerBounds, f64)>> = if config.parallel_bounds {
            use rayon::prelude::*;
            batch
                .par_iter()
                .map(|(input, x)| {
                    let t0 = clock.now_s();
                    let b = engine.prefix_bounds(ell, *input, x)?;
                    Ok((*input, b, clock.now_s() - t0))
                })
                .collect()
        } else {
            batch
                .iter()
                .map(|(input, x)| {
                    let t0 = clock.now_s();
                    let b = engine.prefix_bounds(ell, *input, x)?;
                    Ok((*input, b, clock.now_s() - t0))
                })
                .collect()
        };
        let mut bounds_s = 0.0;
        let mut bounds_by_input: std::collections::HashMap<usize, LayerBounds> =
            std::collections::HashMap::new();
        for r in results {
            let (input, b, dt) = r?;
            bounds_s += dt;
            bounds_by_input.insert(input, b);
        }

        let members: Vec<(usize, Vec<(f64, f64)>)> = batch
            .iter()
            .map(|(input, _)| {
                (
                    *input,
                    bounds_by_input[input].post_relu_intervals(ell),
                )
            })
            .collect();
        let t1 = clock.now_s();
        let mut handle = engine.open_batch(ell, &members)?;
        let mut suspect = handle.solve()?;
        let mut suffix_s = clock.now_s() - t1;

        let mut refine_s = 0.0;
        let mut refinements = 0usize;
        while let Some(input) = suspect {
            let x = batch
                .iter()
                .find(|(id, _)| *id == input)
                .map(|(_, x)| x.clone())
                .ok_or_else(|| {
                    Error::Solver(format!("counterexample names input {} outside batch", input))
                })?;
            let t2 = clock.now_s();
            let verdict = engine.verify_full(input, &x, bounds_by_input.get(&input))?;
            refine_s += clock.now_s() - t2;
            refinements += 1;
            let (status, witness) = match verdict {
                SingleVerdict::Robust => (RobustnessStatus::Robust, None),
                SingleVerdict::NonRobust { witness } => {
                    (RobustnessStatus::NonRobust, Some(witness))
                }
            };
            verdicts.push(InputVerdict {
                input,
                status,
                provenance: Provenance::Refinement,
                witness,
            });
            batch.retain(|(id, _)| *id != input);
            if batch.is_empty() {
                break;
            }
            let t3 = clock.now_s();
            suspect = handle.exclude_and_resolve(input)?;
            suffix_s += clock.now_s() - t3;
        }

        for (input, _) in &batch {
            verdicts.push(InputVerdict {
                input: *input,
                status: RobustnessStatus::Robust,
                provenance: Provenance::Batch,
                witness: None,
            });
        }
        let proven = batch.len();
        let total = bounds_s + suffix_s;
        let velocity = Velocity::new(proven, total.max(1e-9))?;
        policy.update(actual_k, velocity)?;
        report.batches.push(BatchRecord {
            members: members.iter().map(|(id, _)| *id).collect(),
            recommended_k,
            actual_k,
            bounds_s,
            suffix_s,
            refine_s,
            refinements,
            proven,
            velocity: velocity.value(),
        });
        report.totals.bounds_s += bounds_s;
        report.totals.batch_s += suffix_s;
        report.totals.refine_s += refine_s;
    }
    Ok(())
}

/// Baseline: verifies each ball individually with the complete single-ball
/// procedure, after the same misclassification filter.
pub fn verify_one_by_one<E: VerifyEngine>(
    net: &Network,
    inputs: &[(usize, Vec<f64>)],
    class: usize,
    engine: &E,
    clock: &dyn Clock,
) -> Result<RunReport> {
    let run_start = clock.now_s();
    let mut verdicts = Vec::with_capacity(inputs.len());
    let mut incomplete = None;
    for (input, x) in inputs {
        if net.classify(x)? != class {
            verdicts.push(InputVerdict {
                input: *input,
                status: RobustnessStatus::NonRobustMisclassified,
                provenance: Provenance::Filter,
                witness: None,
            });
            continue;
        }
        match engine.verify_full(*input, x, None) {
            Ok(SingleVerdict::Robust) => verdicts.push(InputVerdict {
                input: *input,
                status: RobustnessStatus::Robust,
                provenance: Provenance::Single,
                witness: None,
            }),
            Ok(SingleVerdict::NonRobust { witness }) => verdicts.push(InputVerdict {
                input: *input,
                status: RobustnessStatus::NonRobust,
                provenance: Provenance::Single,
                witness: Some(witness),
            }),
            Err(e @ (Error::Solver(_) | Error::NodeLimit(_))) => {
                incomplete = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    verdicts.sort_by_key(|v| v.input);
    Ok(RunReport {
        verdicts,
        split_layer: 0,
        split_fallback: false,
        batches: Vec::new(),
        totals: Totals::default(),
        split_s: 0.0,
        wall_s: clock.now_s() - run_start,
        bandit_trace: Vec::new(),
        incomplete,
    })
}
