//! Game description: per-agent decision blocks, local box sets, shared
//! affine constraints, and pseudogradient oracles.
//!
//! A game couples `N` agents twice over: through the expected cost
//! gradients (the pseudogradient map) and through a shared affine resource
//! constraint `Σ_i A_i x_i <= b`. The constraint offset is split equally so
//! each agent owns `b_i = b / N`; only the sum is meaningful. Cost oracles
//! are callbacks so that instances can supply closed forms; the sampled
//! oracle is mandatory, the exact (expected) oracle optional.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("game must have at least one agent")]
    NoAgents,
    #[error("agent {0} has an empty decision block")]
    EmptyBlock(usize),
    #[error("box bounds invalid at stacked coordinate {0}")]
    BadBounds(usize),
    #[error(
        "agent {agent} constraint block is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}"
    )]
    BadConstraintBlock {
        agent: usize,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("constraint offset has length {0}, expected {1}")]
    BadOffsetLength(usize, usize),
    #[error("exact pseudogradient oracle is not available")]
    ExactUnavailable,
    #[error("sample batch is empty")]
    EmptyBatch,
    #[error("sample batches must have one equal-sized batch per agent")]
    RaggedBatch,
    #[error("sample point has dimension {0}, oracle expects {1}")]
    BadSampleDim(usize, usize),
    #[error("pseudogradient map is not declared affine")]
    NotAffine,
    #[error("input contains non-finite values")]
    NonFinite,
}

/// One agent's random draw. The benchmark uses one demand-slope component
/// per market, but the game model treats it as an opaque vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint(pub Vec<f64>);

impl SamplePoint {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Componentwise batch mean, computed as (sum over draws) / S. Keeping
    /// that exact order makes a size-1 batch bit-identical to its draw and
    /// lets streaming evaluators reproduce the same value.
    pub fn mean_of(batch: &[SamplePoint]) -> Result<SamplePoint, GameError> {
        let first = batch.first().ok_or(GameError::EmptyBatch)?;
        let mut sum = vec![0.0; first.dim()];
        for p in batch {
            if p.dim() != first.dim() {
                return Err(GameError::BadSampleDim(p.dim(), first.dim()));
            }
            for (s, v) in sum.iter_mut().zip(&p.0) {
                *s += v;
            }
        }
        let s = batch.len() as f64;
        for v in &mut sum {
            *v /= s;
        }
        Ok(SamplePoint(sum))
    }
}

/// Sampled pseudogradient callback bundle for one game.
///
/// `sampled` must be defined on all of R^n (iterates stay in the boxes, but
/// verification code probes arbitrary points).
pub trait GradientOracle: Send + Sync {
    /// Components per sample draw.
    fn sample_dim(&self) -> usize;

    /// Writes the sampled partial gradient of agent `agent`'s cost with
    /// respect to its own block, at the stacked decision `x` and draw `xi`,
    /// into `out` (length `n_i`).
    fn sampled(&self, agent: usize, x: &[f64], xi: &SamplePoint, out: &mut [f64]);

    /// True when `sampled` is affine in the sample components for fixed x.
    /// A batch mean then equals a single evaluation at the componentwise
    /// mean sample, which the sample-average path exploits.
    fn linear_in_sample(&self) -> bool {
        false
    }

    /// True when the expected pseudogradient map x -> F(x) is affine.
    fn affine_in_decisions(&self) -> bool {
        false
    }

    fn has_exact(&self) -> bool {
        false
    }

    /// Writes the expected partial gradient into `out`. Only called when
    /// `has_exact()` returns true.
    fn exact(&self, _agent: usize, _x: &[f64], _out: &mut [f64]) {
        unimplemented!("exact pseudogradient oracle not provided")
    }
}

/// Immutable game data shared by solvers, operators, and diagnostics.
#[derive(Clone)]
pub struct GameDefinition {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    a_blocks: Vec<DenseMatrix>,
    b_local: Vec<Vec<f64>>,
    constraint_rows: usize,
    oracle: Arc<dyn GradientOracle>,
}

impl std::fmt::Debug for GameDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GameDefinition")
            .field("dims", &self.dims)
            .field("constraint_rows", &self.constraint_rows)
            .finish_non_exhaustive()
    }
}

impl GameDefinition {
    /// Builds a game and validates its shape.
    ///
    /// `lower`/`upper` are stacked box bounds (finite, lower <= upper),
    /// `a_blocks[i]` is agent i's `m x n_i` constraint block, and `b` is the
    /// global m-vector offset, split equally across agents.
    pub fn new(
        dims: Vec<usize>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        a_blocks: Vec<DenseMatrix>,
        b: Vec<f64>,
        oracle: Arc<dyn GradientOracle>,
    ) -> Result<Self, GameError> {
        if dims.is_empty() {
            return Err(GameError::NoAgents);
        }
        let n_agents = dims.len();
        let mut offsets = vec![0usize; n_agents + 1];
        for (i, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(GameError::EmptyBlock(i));
            }
            offsets[i + 1] = offsets[i] + d;
        }
        let total = offsets[n_agents];
        if lower.len() != total || upper.len() != total {
            return Err(GameError::BadBounds(lower.len().min(upper.len())));
        }
        for k in 0..total {
            if !lower[k].is_finite() || !upper[k].is_finite() || lower[k] > upper[k] {
                return Err(GameError::BadBounds(k));
            }
        }
        let m = b.len();
        if a_blocks.len() != n_agents {
            return Err(GameError::BadConstraintBlock {
                agent: a_blocks.len(),
                got_rows: 0,
                got_cols: 0,
                want_rows: m,
                want_cols: 0,
            });
        }
        for (i, a) in a_blocks.iter().enumerate() {
            if a.rows() != m || a.cols() != dims[i] || !a.is_consistent() {
                return Err(GameError::BadConstraintBlock {
                    agent: i,
                    got_rows: a.rows(),
                    got_cols: a.cols(),
                    want_rows: m,
                    want_cols: dims[i],
                });
            }
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(GameError::NonFinite);
        }
        let share: Vec<f64> = b.iter().map(|v| v / n_agents as f64).collect();
        let b_local = vec![share; n_agents];
        Ok(Self {
            dims,
            offsets,
            lower,
            upper,
            a_blocks,
            b_local,
            constraint_rows: m,
            oracle,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, agent: usize) -> usize {
        self.dims[agent]
    }

    pub fn total_dim(&self) -> usize {
        self.offsets[self.dims.len()]
    }

    /// Rows of the shared constraint (0 means no shared constraint).
    pub fn constraint_rows(&self) -> usize {
        self.constraint_rows
    }

    pub fn offset(&self, agent: usize) -> usize {
        self.offsets[agent]
    }

    pub fn block<'a>(&self, v: &'a [f64], agent: usize) -> &'a [f64] {
        &v[self.offsets[agent]..self.offsets[agent + 1]]
    }

    pub fn block_mut<'a>(&self, v: &'a mut [f64], agent: usize) -> &'a mut [f64] {
        &mut v[self.offsets[agent]..self.offsets[agent + 1]]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn a_block(&self, agent: usize) -> &DenseMatrix {
        &self.a_blocks[agent]
    }

    /// Agent share of the constraint offset (b / N).
    pub fn b_local(&self, agent: usize) -> &[f64] {
        &self.b_local[agent]
    }

    pub fn b_global(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.constraint_rows];
        for share in &self.b_local {
            for (acc, v) in b.iter_mut().zip(share) {
                *acc += v;
            }
        }
        b
    }

    pub fn oracle(&self) -> &dyn GradientOracle {
        self.oracle.as_ref()
    }

    pub fn sample_dim(&self) -> usize {
        self.oracle.sample_dim()
    }

    pub fn has_exact_oracle(&self) -> bool {
        self.oracle.has_exact()
    }

    /// Clamps `x` into the stacked box.
    pub fn project_boxes(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn box_midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    fn check_finite(x: &[f64]) -> Result<(), GameError> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GameError::NonFinite)
        }
    }

    fn check_sample(&self, p: &SamplePoint) -> Result<(), GameError> {
        if p.dim() != self.oracle.sample_dim() {
            return Err(GameError::BadSampleDim(p.dim(), self.oracle.sample_dim()));
        }
        Ok(())
    }

    /// One-sample pseudogradient: stacks the sampled partial gradients at
    /// `x`, one draw per agent.
    pub fn pseudogradient_sa(
        &self,
        x: &[f64],
        draws: &[SamplePoint],
        out: &mut [f64],
    ) -> Result<(), GameError> {
        Self::check_finite(x)?;
        if draws.len() != self.agent_count() {
            return Err(GameError::RaggedBatch);
        }
        assert_eq!(out.len(), self.total_dim());
        for (i, xi) in draws.iter().enumerate() {
            self.check_sample(xi)?;
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            self.oracle.sampled(i, x, xi, &mut out[lo..hi]);
        }
        Ok(())
    }

    /// Sample-average pseudogradient: per agent, the arithmetic mean of the
    /// sampled gradient over that agent's batch. All batches must share one
    /// nonzero size. A size-1 batch is bit-identical to
    /// [`Self::pseudogradient_sa`] on the same draw.
    pub fn pseudogradient_saa(
        &self,
        x: &[f64],
        batches: &[Vec<SamplePoint>],
        out: &mut [f64],
    ) -> Result<(), GameError> {
        Self::check_finite(x)?;
        if batches.len() != self.agent_count() {
            return Err(GameError::RaggedBatch);
        }
        let s = batches.first().map(Vec::len).unwrap_or(0);
        if s == 0 {
            return Err(GameError::EmptyBatch);
        }
        if batches.iter().any(|b| b.len() != s) {
            return Err(GameError::RaggedBatch);
        }
        assert_eq!(out.len(), self.total_dim());
        for (i, batch) in batches.iter().enumerate() {
            for p in batch {
                self.check_sample(p)?;
            }
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            let out_i = &mut out[lo..hi];
            if self.oracle.linear_in_sample() {
                let mean = SamplePoint::mean_of(batch)?;
                self.oracle.sampled(i, x, &mean, out_i);
            } else {
                let mut acc = vec![0.0; out_i.len()];
                let mut tmp = vec![0.0; out_i.len()];
                for xi in batch {
                    self.oracle.sampled(i, x, xi, &mut tmp);
                    for (a, t) in acc.iter_mut().zip(&tmp) {
                        *a += t;
                    }
                }
                for (o, a) in out_i.iter_mut().zip(&acc) {
                    *o = a / s as f64;
                }
            }
        }
        Ok(())
    }

    /// Expected pseudogradient, when the instance supplies a closed form.
    pub fn pseudogradient_exact(&self, x: &[f64], out: &mut [f64]) -> Result<(), GameError> {
        Self::check_finite(x)?;
        if !self.oracle.has_exact() {
            return Err(GameError::ExactUnavailable);
        }
        assert_eq!(out.len(), self.total_dim());
        for i in 0..self.agent_count() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            self.oracle.exact(i, x, &mut out[lo..hi]);
        }
        Ok(())
    }

    /// Shared-constraint residual `A x - b` (global m-vector). Positive
    /// components mean violation.
    pub fn constraint_violation(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.constraint_rows];
        for i in 0..self.agent_count() {
            self.a_blocks[i].mul_vec_acc(self.block(x, i), 1.0, &mut out);
        }
        for (slot, b) in out.iter_mut().zip(self.b_global()) {
            *slot -= b;
        }
        out
    }

    /// Recovers the affine pseudogradient matrix by probing the exact
    /// oracle at the origin and the coordinate directions. Requires the
    /// oracle to declare itself affine in the decisions.
    pub fn affine_pseudogradient_matrix(&self) -> Result<nalgebra::DMatrix<f64>, GameError> {
        if !self.oracle.affine_in_decisions() {
            return Err(GameError::NotAffine);
        }
        if !self.oracle.has_exact() {
            return Err(GameError::ExactUnavailable);
        }
        let n = self.total_dim();
        let mut base = vec![0.0; n];
        let mut f0 = vec![0.0; n];
        self.pseudogradient_exact(&base, &mut f0)?;
        let mut theta = nalgebra::DMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            base[j] = 1.0;
            self.pseudogradient_exact(&base, &mut col)?;
            base[j] = 0.0;
            for i in 0..n {
                theta[(i, j)] = col[i] - f0[i];
            }
        }
        Ok(theta)
    }
}
