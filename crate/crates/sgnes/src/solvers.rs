//! Iteration engines: preconditioned forward-backward (deterministic,
//! sample-average, and an experimental diminishing-step variant),
//! forward-backward-forward, extragradient, and the projected
//! pseudogradient scheme for games without shared constraints.
//!
//! Every engine is a synchronous two-phase round over the dual graph,
//! simulated as loop bodies reading a shared immutable snapshot per phase:
//! phase 1 writes the primal and auxiliary blocks, phase 2 writes the dual
//! blocks from phase-1 outputs of the same round and phase-2 values of the
//! previous round. A run is single-threaded and deterministic given its
//! seed; concurrency belongs to the harness, which runs whole cells in
//! parallel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cournot::{CournotError, CournotInstance};
use crate::game::{GameDefinition, GameError, SamplePoint};
use crate::graph::DualGraph;
use crate::operators;
use crate::operators::{
    constraint_adjoint, constraint_apply, dual_disagreement, kkt_residual, max_step_sizes,
    project_box, project_nonneg, stacked_offsets, stationarity_given_gradient, OperatorError,
    StackedState, StepSizes,
};
use crate::sampling::{BatchSchedule, SampleStream, SamplingError, StepSchedule};

/// Fixed CSV header for persisted run records.
pub const RUN_CSV_HEADER: &str =
    "k,rel_dist,dual_disagreement,kkt_stat,kkt_feas,kkt_comp,oracle_calls,samples,elapsed_ns";

/// Iteration budget for reference solves.
pub const REFERENCE_MAX_ITERS: u64 = 10_000_000;

/// Default stationarity tolerance for reference solves.
pub const REFERENCE_TOL: f64 = 1e-10;

const REFERENCE_SCHEMA: &str = "sgnes-reference/1";

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidCombination(String),
    #[error("algorithm {0} draws samples and needs a sample stream")]
    StreamRequired(AlgorithmKind),
    #[error("config seed {config} does not match stream seed {stream}")]
    SeedMismatch { config: u64, stream: u64 },
    #[error(
        "run diverged at iteration {iteration} (metric above {threshold}); partial record kept"
    )]
    Diverged {
        iteration: u64,
        threshold: f64,
        record: Box<RunRecord>,
    },
    #[error("non-finite value in {block} block at iteration {iteration}; partial record kept")]
    NonFinite {
        iteration: u64,
        block: &'static str,
        record: Box<RunRecord>,
    },
    #[error(
        "reference solve still at stationarity {stationarity:.3e} after {iterations} iterations; \
         gamma may be below the certified averagedness threshold, try certified_gamma"
    )]
    ReferenceNotConverged { iterations: u64, stationarity: f64 },
    #[error("cached reference at {path} was built from instance {found}, expected {expected}")]
    ReferenceHashMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Instance(#[from] CournotError),
    #[error("reference cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("reference cache encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    /// Forward-backward with the exact pseudogradient and constant steps.
    DetFb,
    /// Forward-backward with growing sample-average batches and constant
    /// steps.
    StochFbSaa,
    /// Forward-backward with one sample per iteration and constant steps
    /// scaled by a decaying factor. No convergence guarantee is known for
    /// this combination (the variable-metric compatibility condition is
    /// unresolved); opt in knowingly.
    StochFbSaExperimental,
    /// Projected pseudogradient for games without shared constraints, one
    /// sample per iteration, vanishing steps.
    SneFbSa,
    /// Projected pseudogradient for games without shared constraints,
    /// growing batches, vanishing steps.
    SneFbSaa,
    /// Forward-backward-forward (two forward evaluations, no second
    /// projection).
    Fbf,
    /// Extragradient (two forward evaluations, two projection rounds).
    Eg,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 7] = [
        AlgorithmKind::DetFb,
        AlgorithmKind::StochFbSaa,
        AlgorithmKind::StochFbSaExperimental,
        AlgorithmKind::SneFbSa,
        AlgorithmKind::SneFbSaa,
        AlgorithmKind::Fbf,
        AlgorithmKind::Eg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::DetFb => "det_fb",
            AlgorithmKind::StochFbSaa => "stoch_fb_saa",
            AlgorithmKind::StochFbSaExperimental => "stoch_fb_sa_experimental",
            AlgorithmKind::SneFbSa => "sne_fb_sa",
            AlgorithmKind::SneFbSaa => "sne_fb_saa",
            AlgorithmKind::Fbf => "fbf",
            AlgorithmKind::Eg => "eg",
        }
    }

    /// True for the projected-pseudogradient modes that carry no dual or
    /// auxiliary state.
    pub fn is_decoupled(&self) -> bool {
        matches!(self, AlgorithmKind::SneFbSa | AlgorithmKind::SneFbSaa)
    }

    /// Forward evaluations per iteration.
    pub fn evals_per_iteration(&self) -> u64 {
        match self {
            AlgorithmKind::Fbf | AlgorithmKind::Eg => 2,
            _ => 1,
        }
    }

    fn default_estimator(&self) -> Estimator {
        match self {
            AlgorithmKind::DetFb => Estimator::Exact,
            AlgorithmKind::StochFbSaExperimental | AlgorithmKind::SneFbSa => Estimator::Sa,
            AlgorithmKind::StochFbSaa
            | AlgorithmKind::SneFbSaa
            | AlgorithmKind::Fbf
            | AlgorithmKind::Eg => Estimator::Saa,
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .find(|a| a.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                format!("unknown algorithm '{s}'; valid: {}", names.join(", "))
            })
    }
}

/// How the pseudogradient is estimated each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    /// One draw per agent per evaluation.
    Sa,
    /// Batch average with the size taken from the batch schedule.
    Saa,
}

/// Metrics a stopping rule can watch (CSV column names).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    RelDist,
    DualDisagreement,
    KktStat,
    KktFeas,
    KktComp,
}

impl StopMetric {
    pub fn name(&self) -> &'static str {
        match self {
            StopMetric::RelDist => "rel_dist",
            StopMetric::DualDisagreement => "dual_disagreement",
            StopMetric::KktStat => "kkt_stat",
            StopMetric::KktFeas => "kkt_feas",
            StopMetric::KktComp => "kkt_comp",
        }
    }
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stop once the watched metric falls below `tol`. With several rules the
/// run stops when every one holds at the same iteration. A NaN metric
/// (for example rel_dist without a reference) never satisfies its rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub metric: StopMetric,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: AlgorithmKind,
    /// Design parameter for the constant step-size bound. `None` derives
    /// the certified value for the algorithm, which needs a game with an
    /// exact affine oracle; pass an explicit gamma otherwise.
    pub gamma: Option<f64>,
    /// Explicit constant steps; defaults to the bound at `gamma`.
    pub steps: Option<StepSizes>,
    /// Vanishing steps for the SA and projected-pseudogradient modes.
    pub step_schedule: Option<StepSchedule>,
    /// Batch growth for the SAA modes.
    pub batch: Option<BatchSchedule>,
    /// Overrides the algorithm's natural estimator (for example exact
    /// oracles inside fbf/eg for cross-checks).
    pub estimator: Option<Estimator>,
    pub max_iters: u64,
    pub stop_rules: Vec<StopRule>,
    pub seed: u64,
    /// Uniform override for the forward-backward-forward correction step;
    /// defaults to each agent's alpha.
    pub rho: Option<f64>,
    /// Abort once any recorded metric exceeds this.
    pub divergence_threshold: f64,
    /// Wall-clock budget. A run that exceeds it stops cleanly after the
    /// current iteration with `deadline_exceeded` set on its record.
    pub deadline: Option<std::time::Duration>,
}

impl SolverConfig {
    pub fn new(algorithm: AlgorithmKind) -> Self {
        Self {
            algorithm,
            gamma: None,
            steps: None,
            step_schedule: None,
            batch: None,
            estimator: None,
            max_iters: 1000,
            stop_rules: Vec::new(),
            seed: 0,
            rho: None,
            divergence_threshold: 1e6,
            deadline: None,
        }
    }

    pub fn effective_estimator(&self) -> Estimator {
        self.estimator
            .unwrap_or_else(|| self.algorithm.default_estimator())
    }

    /// Rejects combinations outside the guaranteed regimes (plus the
    /// explicitly experimental one).
    pub fn validate(&self, game: &GameDefinition) -> Result<(), SolverError> {
        let est = self.effective_estimator();
        let bad = |msg: String| Err(SolverError::InvalidCombination(msg));
        if self.algorithm.is_decoupled() && game.constraint_rows() != 0 {
            return bad(format!(
                "{} needs a game without shared constraints (got {} coupling rows)",
                self.algorithm,
                game.constraint_rows()
            ));
        }
        if self.algorithm == AlgorithmKind::DetFb && est != Estimator::Exact {
            return bad("det_fb is the deterministic engine; use a stoch_fb_* mode".into());
        }
        if est == Estimator::Exact && !game.has_exact_oracle() {
            return bad(format!(
                "{} with an exact estimator needs an exact oracle",
                self.algorithm
            ));
        }
        if est == Estimator::Saa && self.batch.is_none() {
            return bad(format!(
                "{} with batch averaging needs a batch schedule",
                self.algorithm
            ));
        }
        let needs_schedule =
            self.algorithm.is_decoupled() || self.algorithm == AlgorithmKind::StochFbSaExperimental;
        if needs_schedule && self.step_schedule.is_none() {
            return bad(format!("{} needs a step schedule", self.algorithm));
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence threshold must be positive".into());
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0) || !rho.is_finite() {
                return bad(format!("correction step rho must be positive (got {rho})"));
            }
        }
        Ok(())
    }
}

/// Metrics observed after one iteration. NaN marks a value that was not
/// computable (no reference, or no exact oracle for the KKT columns).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub k: u64,
    pub rel_dist: f64,
    pub dual_disagreement: f64,
    pub kkt_stat: f64,
    pub kkt_feas: f64,
    pub kkt_comp: f64,
    pub oracle_calls: u64,
    pub samples: u64,
    pub elapsed_ns: u128,
}

impl IterationRow {
    pub fn metric(&self, m: StopMetric) -> f64 {
        match m {
            StopMetric::RelDist => self.rel_dist,
            StopMetric::DualDisagreement => self.dual_disagreement,
            StopMetric::KktStat => self.kkt_stat,
            StopMetric::KktFeas => self.kkt_feas,
            StopMetric::KktComp => self.kkt_comp,
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.k,
            self.rel_dist,
            self.dual_disagreement,
            self.kkt_stat,
            self.kkt_feas,
            self.kkt_comp,
            self.oracle_calls,
            self.samples,
            self.elapsed_ns
        )
    }
}

/// Complete trace of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub rows: Vec<IterationRow>,
    pub stopped_early: bool,
    /// The wall-clock budget ran out before the stop rules or the
    /// iteration cap were reached.
    #[serde(default)]
    pub deadline_exceeded: bool,
    pub final_state: StackedState,
}

impl RunRecord {
    pub fn final_row(&self) -> Option<&IterationRow> {
        self.rows.last()
    }

    /// Serializes the trace with the fixed header; bit-identical across
    /// reruns except for the elapsed_ns column.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(RUN_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }

    /// First iteration whose relative distance drops below `accuracy`,
    /// with the forward-evaluation count spent by then.
    pub fn evals_to_accuracy(&self, accuracy: f64) -> Option<(u64, u64)> {
        self.rows
            .iter()
            .find(|r| r.rel_dist < accuracy)
            .map(|r| (r.k, r.oracle_calls))
    }
}

/// High-precision solution used for relative-distance metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub schema: String,
    /// Hash of the generating instance; absent for ad-hoc games.
    pub instance_hash: Option<String>,
    pub gamma: f64,
    pub tol: f64,
    pub iterations: u64,
    pub stationarity: f64,
    pub x: Vec<f64>,
    /// Consensual dual (mean of the per-agent copies at termination).
    pub lambda: Vec<f64>,
    pub terminal: StackedState,
}

/// Both phases of a two-evaluation iteration, for inspection in tests.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPhaseStep {
    pub tilde: StackedState,
    pub next: StackedState,
}

/// One preconditioned forward-backward round. Phase 1 updates the primal
/// and auxiliary blocks from the previous round's snapshot; phase 2
/// updates the duals from phase-1 outputs and the old snapshot:
///
/// ```text
/// x+ = proj_box(x - alpha (f_hat + A' lambda))
/// z+ = z - nu L lambda
/// lam+ = proj_+(lam + sigma (A (2x+ - x) - b + L (2z+ - z) - L lam))
/// ```
pub fn fb_iteration(
    prev: &StackedState,
    game: &GameDefinition,
    graph: &DualGraph,
    steps: &StepSizes,
    f_hat: &[f64],
) -> StackedState {
    let m = game.constraint_rows();
    let mut next = prev.clone();

    // Phase 1.
    let mut at_lambda = vec![0.0; game.total_dim()];
    constraint_adjoint(game, &prev.lambda, &mut at_lambda);
    for i in 0..game.agent_count() {
        let a = steps.alpha[i];
        for j in game.offset(i)..game.offset(i) + game.dim(i) {
            next.x[j] = prev.x[j] - a * (f_hat[j] + at_lambda[j]);
        }
    }
    project_box(game.lower(), game.upper(), &mut next.x);
    let mut lap_lambda = vec![0.0; prev.lambda.len()];
    graph.laplacian_apply(m, &prev.lambda, &mut lap_lambda);
    for i in 0..game.agent_count() {
        for j in i * m..(i + 1) * m {
            next.z[j] = prev.z[j] - steps.nu[i] * lap_lambda[j];
        }
    }

    // Phase 2: reads x+, z+ from this round and x, z, lambda from the
    // previous one.
    let refl_x: Vec<f64> = next
        .x
        .iter()
        .zip(&prev.x)
        .map(|(n, p)| 2.0 * n - p)
        .collect();
    let mut a_refl = vec![0.0; prev.lambda.len()];
    constraint_apply(game, &refl_x, &mut a_refl);
    let refl_z: Vec<f64> = next
        .z
        .iter()
        .zip(&prev.z)
        .map(|(n, p)| 2.0 * n - p)
        .collect();
    let mut lap_refl_z = vec![0.0; prev.z.len()];
    graph.laplacian_apply(m, &refl_z, &mut lap_refl_z);
    let b = stacked_offsets(game);
    for i in 0..game.agent_count() {
        let s = steps.sigma[i];
        for j in i * m..(i + 1) * m {
            next.lambda[j] =
                prev.lambda[j] + s * (a_refl[j] - b[j] + lap_refl_z[j] - lap_lambda[j]);
        }
    }
    project_nonneg(&mut next.lambda);
    next
}

/// One forward-backward-forward round. Phase 1 is a full backward step at
/// the current point; phase 2 applies the forward correction (no second
/// projection), using a second estimate evaluated at the phase-1 point:
///
/// ```text
/// x~   = proj_box(x - alpha (f1 + A' lam)),  z~ = z - nu L lam,
/// lam~ = proj_+(lam + sigma (A x - b + L z - L lam))
/// x+   = x~ + alpha (f1 - f2) + rho A' (lam - lam~)
/// z+   = z~ + nu L (lam - lam~)
/// lam+ = lam~ + sigma (A (x~ - x) + L (lam - lam~) - L (z - z~))
/// ```
pub fn fbf_iteration<E>(
    prev: &StackedState,
    game: &GameDefinition,
    graph: &DualGraph,
    steps: &StepSizes,
    rho: &[f64],
    f_at_x: &[f64],
    eval_at_tilde: E,
) -> Result<TwoPhaseStep, SolverError>
where
    E: FnOnce(&[f64], &mut [f64]) -> Result<(), SolverError>,
{
    let m = game.constraint_rows();
    let n = game.total_dim();
    let mut tilde = prev.clone();

    let mut at_lambda = vec![0.0; n];
    constraint_adjoint(game, &prev.lambda, &mut at_lambda);
    for i in 0..game.agent_count() {
        let a = steps.alpha[i];
        for j in game.offset(i)..game.offset(i) + game.dim(i) {
            tilde.x[j] = prev.x[j] - a * (f_at_x[j] + at_lambda[j]);
        }
    }
    project_box(game.lower(), game.upper(), &mut tilde.x);
    let mut lap_lambda = vec![0.0; prev.lambda.len()];
    graph.laplacian_apply(m, &prev.lambda, &mut lap_lambda);
    for i in 0..game.agent_count() {
        for j in i * m..(i + 1) * m {
            tilde.z[j] = prev.z[j] - steps.nu[i] * lap_lambda[j];
        }
    }
    let mut ax = vec![0.0; prev.lambda.len()];
    constraint_apply(game, &prev.x, &mut ax);
    let mut lap_z = vec![0.0; prev.z.len()];
    graph.laplacian_apply(m, &prev.z, &mut lap_z);
    let b = stacked_offsets(game);
    for i in 0..game.agent_count() {
        let s = steps.sigma[i];
        for j in i * m..(i + 1) * m {
            tilde.lambda[j] = prev.lambda[j] + s * (ax[j] - b[j] + lap_z[j] - lap_lambda[j]);
        }
    }
    project_nonneg(&mut tilde.lambda);

    // Second forward evaluation, at the phase-1 point.
    let mut f_at_tilde = vec![0.0; n];
    eval_at_tilde(&tilde.x, &mut f_at_tilde)?;

    let mut next = tilde.clone();
    let dl: Vec<f64> = prev
        .lambda
        .iter()
        .zip(&tilde.lambda)
        .map(|(p, t)| p - t)
        .collect();
    let mut at_dl = vec![0.0; n];
    constraint_adjoint(game, &dl, &mut at_dl);
    for i in 0..game.agent_count() {
        let a = steps.alpha[i];
        let r = rho[i];
        for j in game.offset(i)..game.offset(i) + game.dim(i) {
            next.x[j] = tilde.x[j] + a * (f_at_x[j] - f_at_tilde[j]) + r * at_dl[j];
        }
    }
    let mut lap_dl = vec![0.0; dl.len()];
    graph.laplacian_apply(m, &dl, &mut lap_dl);
    for i in 0..game.agent_count() {
        for j in i * m..(i + 1) * m {
            next.z[j] = tilde.z[j] + steps.nu[i] * lap_dl[j];
        }
    }
    let dz: Vec<f64> = prev.z.iter().zip(&tilde.z).map(|(p, t)| p - t).collect();
    let mut lap_dz = vec![0.0; dz.len()];
    graph.laplacian_apply(m, &dz, &mut lap_dz);
    for i in 0..game.agent_count() {
        let s = steps.sigma[i];
        for j in i * m..(i + 1) * m {
            next.lambda[j] = tilde.lambda[j]
                + s * (ax_diff(&tilde.x, &prev.x, game, i, j % m) + lap_dl[j] - lap_dz[j]);
        }
    }
    Ok(TwoPhaseStep { tilde, next })
}

/// Row `row` of `A_i (x_tilde_i - x_i)` for agent `i`, computed on the fly.
fn ax_diff(tilde_x: &[f64], x: &[f64], game: &GameDefinition, i: usize, row: usize) -> f64 {
    let a = game.a_block(i);
    let (lo, hi) = (game.offset(i), game.offset(i) + game.dim(i));
    a.row(row)
        .iter()
        .zip(tilde_x[lo..hi].iter().zip(&x[lo..hi]))
        .map(|(c, (t, p))| c * (t - p))
        .sum()
}

/// One extragradient round: the same extrapolation phase as
/// forward-backward-forward, then a second full projection step with the
/// forward part evaluated at the extrapolated point:
///
/// ```text
/// x+   = proj_box(x - alpha (f2 + A' lam~))
/// z+   = z - nu L lam~
/// lam+ = proj_+(lam + sigma (A x~ - b + L z~ - L lam~))
/// ```
pub fn eg_iteration<E>(
    prev: &StackedState,
    game: &GameDefinition,
    graph: &DualGraph,
    steps: &StepSizes,
    f_at_x: &[f64],
    eval_at_tilde: E,
) -> Result<TwoPhaseStep, SolverError>
where
    E: FnOnce(&[f64], &mut [f64]) -> Result<(), SolverError>,
{
    let m = game.constraint_rows();
    let n = game.total_dim();

    // Extrapolation phase (identical in form to the fbf phase 1).
    let probe = fbf_iteration(prev, game, graph, steps, &steps.alpha, f_at_x, |_, out| {
        out.fill(0.0);
        Ok(())
    })?;
    let tilde = probe.tilde;

    let mut f_at_tilde = vec![0.0; n];
    eval_at_tilde(&tilde.x, &mut f_at_tilde)?;

    let mut next = prev.clone();
    let mut at_lt = vec![0.0; n];
    constraint_adjoint(game, &tilde.lambda, &mut at_lt);
    for i in 0..game.agent_count() {
        let a = steps.alpha[i];
        for j in game.offset(i)..game.offset(i) + game.dim(i) {
            next.x[j] = prev.x[j] - a * (f_at_tilde[j] + at_lt[j]);
        }
    }
    project_box(game.lower(), game.upper(), &mut next.x);
    let mut lap_lt = vec![0.0; tilde.lambda.len()];
    graph.laplacian_apply(m, &tilde.lambda, &mut lap_lt);
    for i in 0..game.agent_count() {
        for j in i * m..(i + 1) * m {
            next.z[j] = prev.z[j] - steps.nu[i] * lap_lt[j];
        }
    }
    let mut a_xt = vec![0.0; tilde.lambda.len()];
    constraint_apply(game, &tilde.x, &mut a_xt);
    let mut lap_zt = vec![0.0; tilde.z.len()];
    graph.laplacian_apply(m, &tilde.z, &mut lap_zt);
    let b = stacked_offsets(game);
    for i in 0..game.agent_count() {
        let s = steps.sigma[i];
        for j in i * m..(i + 1) * m {
            next.lambda[j] = prev.lambda[j] + s * (a_xt[j] - b[j] + lap_zt[j] - lap_lt[j]);
        }
    }
    project_nonneg(&mut next.lambda);
    Ok(TwoPhaseStep { tilde, next })
}

/// One projected pseudogradient step for a game without shared
/// constraints: `x+ = proj_box(x - gamma_k f_hat)`.
pub fn sne_fb_iteration(x: &[f64], game: &GameDefinition, gamma_k: f64, f_hat: &[f64]) -> Vec<f64> {
    let mut next: Vec<f64> = x
        .iter()
        .zip(f_hat)
        .map(|(xv, fv)| xv - gamma_k * fv)
        .collect();
    project_box(game.lower(), game.upper(), &mut next);
    next
}

/// Per-run gradient estimation state (scratch buffers reused across
/// iterations).
struct EstimatorCtx<'a> {
    game: &'a GameDefinition,
    stream: Option<&'a SampleStream>,
    scratch_points: Vec<SamplePoint>,
    scratch_grad: Vec<f64>,
}

impl<'a> EstimatorCtx<'a> {
    fn new(game: &'a GameDefinition, stream: Option<&'a SampleStream>) -> Self {
        Self {
            game,
            stream,
            scratch_points: Vec::new(),
            scratch_grad: Vec::new(),
        }
    }

    /// Evaluates the estimate at `x` into `out`, keyed by `key` in the
    /// sample stream; returns the number of sample points drawn.
    fn eval(
        &mut self,
        est: Estimator,
        x: &[f64],
        key: u64,
        batch_size: u64,
        out: &mut [f64],
    ) -> Result<u64, SolverError> {
        let game = self.game;
        let agents = game.agent_count();
        match est {
            Estimator::Exact => {
                game.pseudogradient_exact(x, out)?;
                Ok(0)
            }
            Estimator::Sa => {
                let stream = self.stream.expect("validated");
                self.scratch_points.clear();
                for i in 0..agents {
                    self.scratch_points.extend(stream.draw_batch(i, key, 1));
                }
                game.pseudogradient_sa(x, &self.scratch_points, out)?;
                Ok(agents as u64)
            }
            Estimator::Saa => {
                let stream = self.stream.expect("validated");
                let s = batch_size.max(1);
                if game.oracle().linear_in_sample() {
                    // The estimate is the gradient at the streamed batch
                    // mean; matches the literal batch average bit for bit.
                    self.scratch_points.clear();
                    for i in 0..agents {
                        self.scratch_points
                            .push(stream.mean_sample(i, key, s as usize));
                    }
                    game.pseudogradient_sa(x, &self.scratch_points, out)?;
                } else {
                    for i in 0..agents {
                        let (lo, hi) = (game.offset(i), game.offset(i) + game.dim(i));
                        let block = &mut out[lo..hi];
                        block.fill(0.0);
                        self.scratch_grad.resize(hi - lo, 0.0);
                        let scratch = &mut self.scratch_grad;
                        stream.fold_batch(i, key, s as usize, |p| {
                            game.oracle().sampled(i, x, p, scratch);
                            for (acc, g) in block.iter_mut().zip(scratch.iter()) {
                                *acc += g;
                            }
                        });
                        for v in block.iter_mut() {
                            *v /= s as f64;
                        }
                    }
                }
                Ok(agents as u64 * s)
            }
        }
    }
}

fn finite_block(state: &StackedState) -> Result<(), &'static str> {
    if !state.x.iter().all(|v| v.is_finite()) {
        return Err("x");
    }
    if !state.z.iter().all(|v| v.is_finite()) {
        return Err("z");
    }
    if !state.lambda.iter().all(|v| v.is_finite()) {
        return Err("lambda");
    }
    Ok(())
}

/// Executes a full run: per-iteration sampling, metric rows, stopping
/// rules, and divergence guards. Metric evaluations (exact KKT residuals)
/// are diagnostics and are not counted as oracle calls.
pub fn run(
    game: &GameDefinition,
    graph: &DualGraph,
    stream: Option<&SampleStream>,
    reference: Option<&Reference>,
    config: &SolverConfig,
) -> Result<RunRecord, SolverError> {
    config.validate(game)?;
    let est = config.effective_estimator();
    if est != Estimator::Exact {
        let s = stream.ok_or(SolverError::StreamRequired(config.algorithm))?;
        if s.seed() != config.seed {
            return Err(SolverError::SeedMismatch {
                config: config.seed,
                stream: s.seed(),
            });
        }
        if s.dim() != game.sample_dim() {
            return Err(SolverError::InvalidCombination(format!(
                "stream draws dimension {} but the oracle consumes {}",
                s.dim(),
                game.sample_dim()
            )));
        }
    }

    let decoupled = config.algorithm.is_decoupled();
    let base_steps = if decoupled {
        None
    } else {
        Some(match &config.steps {
            Some(s) => s.clone(),
            None => {
                let gamma = match config.gamma {
                    Some(g) => g,
                    None => certified_gamma(game, graph, config.algorithm)?,
                };
                max_step_sizes(game, graph, gamma)?
            }
        })
    };
    let rho: Vec<f64> = match (config.rho, &base_steps) {
        (Some(r), _) => vec![r; game.agent_count()],
        (None, Some(s)) => s.alpha.clone(),
        (None, None) => Vec::new(),
    };

    let ref_norm = reference.map(|r| crate::linalg::norm2(&r.x));
    let has_exact = game.has_exact_oracle();
    let m = game.constraint_rows();
    let two_evals = config.algorithm.evals_per_iteration() == 2;

    let mut ctx = EstimatorCtx::new(game, stream);
    let mut state = StackedState::initial(game);
    let mut f_hat = vec![0.0; game.total_dim()];
    let mut rows: Vec<IterationRow> = Vec::with_capacity(config.max_iters.min(65_536) as usize);
    let mut oracle_calls = 0u64;
    let mut samples = 0u64;
    let mut stopped_early = false;
    let mut deadline_exceeded = false;
    let mut scaled = base_steps.clone();
    let started = Instant::now();

    for k in 0..config.max_iters {
        let batch_size = config.batch.as_ref().map_or(1, |b| b.size_at(k));
        let key = if two_evals { 2 * k } else { k };
        samples += ctx.eval(est, &state.x, key, batch_size, &mut f_hat)?;
        oracle_calls += 1;

        let next = if decoupled {
            let gamma_k = config.step_schedule.as_ref().expect("validated").step_at(k);
            StackedState {
                x: sne_fb_iteration(&state.x, game, gamma_k, &f_hat),
                z: Vec::new(),
                lambda: Vec::new(),
            }
        } else {
            let steps = match config.algorithm {
                AlgorithmKind::StochFbSaExperimental => {
                    let factor = config
                        .step_schedule
                        .as_ref()
                        .expect("validated")
                        .step_at(k)
                        .min(1.0);
                    let s = scaled.as_mut().expect("sgnep mode");
                    let b = base_steps.as_ref().expect("sgnep mode");
                    for i in 0..b.alpha.len() {
                        s.alpha[i] = b.alpha[i] * factor;
                        s.nu[i] = b.nu[i] * factor;
                        s.sigma[i] = b.sigma[i] * factor;
                    }
                    &*s
                }
                _ => base_steps.as_ref().expect("sgnep mode"),
            };
            match config.algorithm {
                AlgorithmKind::Fbf => {
                    let step =
                        fbf_iteration(&state, game, graph, steps, &rho, &f_hat, |xt, out| {
                            samples += ctx.eval(est, xt, 2 * k + 1, batch_size, out)?;
                            oracle_calls += 1;
                            Ok(())
                        })?;
                    step.next
                }
                AlgorithmKind::Eg => {
                    let step = eg_iteration(&state, game, graph, steps, &f_hat, |xt, out| {
                        samples += ctx.eval(est, xt, 2 * k + 1, batch_size, out)?;
                        oracle_calls += 1;
                        Ok(())
                    })?;
                    step.next
                }
                _ => fb_iteration(&state, game, graph, steps, &f_hat),
            }
        };

        if let Err(block) = finite_block(&next) {
            return Err(SolverError::NonFinite {
                iteration: k,
                block,
                record: Box::new(RunRecord {
                    algorithm: config.algorithm,
                    seed: config.seed,
                    rows,
                    stopped_early: false,
                    deadline_exceeded: false,
                    final_state: state,
                }),
            });
        }

        let dd = dual_disagreement(graph, m, &next.lambda);
        let (kkt_stat, kkt_feas, kkt_comp) = if has_exact {
            let mut mean = vec![0.0; m];
            for i in 0..game.agent_count() {
                for j in 0..m {
                    mean[j] += next.lambda[i * m + j];
                }
            }
            for v in &mut mean {
                *v /= game.agent_count() as f64;
            }
            let rep = kkt_residual(game, &next.x, &mean)?;
            (rep.stationarity, rep.feasibility, rep.complementarity)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        let rel_dist = match (reference, ref_norm) {
            (Some(r), Some(norm)) if norm > 0.0 => crate::linalg::dist2(&next.x, &r.x) / norm,
            _ => f64::NAN,
        };
        rows.push(IterationRow {
            k,
            rel_dist,
            dual_disagreement: dd,
            kkt_stat,
            kkt_feas,
            kkt_comp,
            oracle_calls,
            samples,
            elapsed_ns: started.elapsed().as_nanos(),
        });

        let t = config.divergence_threshold;
        let blew_up = (rel_dist.is_finite() && rel_dist > t)
            || (dd.is_finite() && dd > t)
            || (kkt_comp.is_finite() && kkt_comp > t);
        if blew_up {
            return Err(SolverError::Diverged {
                iteration: k,
                threshold: t,
                record: Box::new(RunRecord {
                    algorithm: config.algorithm,
                    seed: config.seed,
                    rows,
                    stopped_early: false,
                    deadline_exceeded: false,
                    final_state: next,
                }),
            });
        }

        state = next;
        if !config.stop_rules.is_empty() {
            let row = rows.last().expect("just pushed");
            if config
                .stop_rules
                .iter()
                .all(|r| row.metric(r.metric) < r.tol)
            {
                stopped_early = true;
                break;
            }
        }
        if let Some(budget) = config.deadline {
            if started.elapsed() >= budget {
                deadline_exceeded = true;
                break;
            }
        }
    }

    Ok(RunRecord {
        algorithm: config.algorithm,
        seed: config.seed,
        rows,
        stopped_early,
        deadline_exceeded,
        final_state: state,
    })
}

/// Solves the game to high precision with the deterministic
/// forward-backward engine; the result anchors relative-distance metrics.
pub fn compute_reference(
    game: &GameDefinition,
    graph: &DualGraph,
    gamma: f64,
    tol: f64,
    max_iters: u64,
) -> Result<Reference, SolverError> {
    if !game.has_exact_oracle() {
        return Err(SolverError::InvalidCombination(
            "reference solves need an exact oracle".into(),
        ));
    }
    let steps = max_step_sizes(game, graph, gamma)?;
    let m = game.constraint_rows();
    let agents = game.agent_count();
    let mut state = StackedState::initial(game);
    let mut f = vec![0.0; game.total_dim()];
    game.pseudogradient_exact(&state.x, &mut f)?;
    let mut stationarity = f64::INFINITY;
    let mut mean = vec![0.0; m];
    for k in 0..max_iters {
        let next = fb_iteration(&state, game, graph, &steps, &f);
        if finite_block(&next).is_err() {
            return Err(SolverError::ReferenceNotConverged {
                iterations: k,
                stationarity,
            });
        }
        // The gradient at the new point both feeds the next step and the
        // stationarity check, so the loop costs one evaluation per round.
        game.pseudogradient_exact(&next.x, &mut f)?;
        mean.fill(0.0);
        for i in 0..agents {
            for j in 0..m {
                mean[j] += next.lambda[i * m + j];
            }
        }
        for v in &mut mean {
            *v /= agents as f64;
        }
        stationarity = stationarity_given_gradient(game, &next.x, &mean, &f);
        state = next;
        if stationarity < tol {
            return Ok(Reference {
                schema: REFERENCE_SCHEMA.to_string(),
                instance_hash: None,
                gamma,
                tol,
                iterations: k + 1,
                stationarity,
                x: state.x.clone(),
                lambda: mean,
                terminal: state,
            });
        }
    }
    Err(SolverError::ReferenceNotConverged {
        iterations: max_iters,
        stationarity,
    })
}

/// Reference solve for a generated instance, cached on disk keyed by the
/// instance hash. A cache hit leaves the file untouched and returns its
/// contents; gamma or tolerance changes force a recompute.
pub fn cached_reference(
    instance: &CournotInstance,
    cache_dir: &Path,
    gamma: f64,
    tol: f64,
) -> Result<Reference, SolverError> {
    let hash = instance.instance_hash();
    let path = cache_dir.join(format!("reference-{hash}.json"));
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let cached: Reference = serde_json::from_str(&text)?;
        match &cached.instance_hash {
            Some(h) if *h != hash => {
                return Err(SolverError::ReferenceHashMismatch {
                    path: path.display().to_string(),
                    found: h.clone(),
                    expected: hash,
                });
            }
            _ => {}
        }
        if cached.schema == REFERENCE_SCHEMA && cached.gamma == gamma && cached.tol == tol {
            return Ok(cached);
        }
    }
    let game = instance.game()?;
    let graph = instance.communication_graph()?;
    let mut reference = compute_reference(&game, &graph, gamma, tol, REFERENCE_MAX_ITERS)?;
    reference.instance_hash = Some(hash);
    std::fs::create_dir_all(cache_dir)?;
    std::fs::write(&path, serde_json::to_string_pretty(&reference)?)?;
    Ok(reference)
}

/// Convenience: an `Arc`-backed game plus graph pair for a generated
/// instance (several call sites need both).
pub fn game_pair(
    instance: &CournotInstance,
) -> Result<(Arc<GameDefinition>, Arc<DualGraph>), SolverError> {
    Ok((
        Arc::new(instance.game()?),
        Arc::new(instance.communication_graph()?),
    ))
}

/// Smallest design parameter for which the constant steps derived from it
/// are certified to converge, for a game with an affine exact oracle.
///
/// The bound depends on the engine. Forward-backward needs averagedness,
/// `gamma > 1/(2 theta)` (see [`operators::certified_gamma`]). The
/// two-evaluation engines trade the cocoercivity requirement for a plain
/// Lipschitz condition on the whole forward map: steps below `1/L` for
/// Tseng's scheme and `1/(sqrt(2) L)` for the extragradient, so their
/// gammas scale with [`operators::forward_lipschitz`] instead. The
/// projected-pseudogradient modes take their steps from a schedule, not
/// from gamma; they get the forward-backward value for completeness.
pub fn certified_gamma(
    game: &GameDefinition,
    graph: &DualGraph,
    algorithm: AlgorithmKind,
) -> Result<f64, SolverError> {
    match algorithm {
        AlgorithmKind::Fbf => Ok(1.05 * operators::forward_lipschitz(game, graph)?),
        AlgorithmKind::Eg => {
            Ok(1.05 * std::f64::consts::SQRT_2 * operators::forward_lipschitz(game, graph)?)
        }
        _ => {
            let matrix = game.affine_pseudogradient_matrix()?;
            Ok(operators::certified_gamma(
                &matrix,
                graph.max_weighted_degree(),
            )?)
        }
    }
}
