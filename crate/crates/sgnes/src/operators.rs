//! Operator-theoretic core: the stacked state, step-size bounds, the
//! preconditioner, forward evaluations, the resolvent-inclusion checker,
//! and equilibrium diagnostics.
//!
//! The stacked iterate is `omega = (x, z, lambda)` with `x` the primal
//! decisions, `z` consensus auxiliaries, and `lambda` per-agent dual
//! copies, both of length `N*m`. The iteration map splits the problem into
//! a single-valued forward part
//!
//! ```text
//! A(omega) = (F(x), 0, b + L lambda)
//! ```
//!
//! and a set-valued backward part
//!
//! ```text
//! B(omega) = (N_box(x) + A' lambda, L lambda, N_+(lambda) - A x - L z)
//! ```
//!
//! where `A = blkdiag(A_i)`, `b = col(b_i)`, and `L` is the graph
//! Laplacian acting on m-blocks. The preconditioner
//!
//! ```text
//! Phi = [[diag(1/alpha), 0, -A'], [0, diag(1/nu), -L], [-A, -L, diag(1/sigma)]]
//! ```
//!
//! makes the resolvent of B sequential per agent. Everything here is pure;
//! solvers own the update loops.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{GameDefinition, GameError};
use crate::graph::DualGraph;
use crate::linalg::{self, sym_extreme_eigs};

#[derive(Debug, Error, PartialEq)]
pub enum OperatorError {
    #[error("design parameter gamma must be positive and finite (got {0})")]
    BadGamma(f64),
    #[error("graph has {graph} nodes but the game has {game} agents")]
    AgentMismatch { graph: usize, game: usize },
    #[error("map is not strongly monotone (min symmetric eigenvalue {0})")]
    NotStronglyMonotone(f64),
    #[error(transparent)]
    Game(#[from] GameError),
}

/// One stacked iterate. `z` and `lambda` hold one m-block per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl StackedState {
    pub fn zeros(n: usize, agents: usize, m: usize) -> Self {
        Self {
            x: vec![0.0; n],
            z: vec![0.0; agents * m],
            lambda: vec![0.0; agents * m],
        }
    }

    /// Standard initial point: box midpoints, zero auxiliaries and duals.
    pub fn initial(game: &GameDefinition) -> Self {
        Self {
            x: game.box_midpoint(),
            z: vec![0.0; game.agent_count() * game.constraint_rows()],
            lambda: vec![0.0; game.agent_count() * game.constraint_rows()],
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len() + self.z.len() + self.lambda.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x
            .iter()
            .chain(&self.z)
            .chain(&self.lambda)
            .all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&self.lambda);
        out
    }

    /// Euclidean distance to another state of the same shape.
    pub fn dist(&self, other: &Self) -> f64 {
        let sq =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        (sq(&self.x, &other.x) + sq(&self.z, &other.z) + sq(&self.lambda, &other.lambda)).sqrt()
    }
}

/// Constant per-agent step sizes plus the design parameter they were
/// derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub alpha: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: f64,
}

/// Largest step sizes meeting the diagonal-dominance bound (equality at
/// the bound): `alpha_i = 1/(gamma + ||A_i||_1)`, `nu_i = 1/(gamma +
/// 2 d_i)`, `sigma_i = 1/(gamma + 2 d_i + ||A_i||_inf)`. Gershgorin rows of
/// the resulting preconditioner then all clear `gamma`.
pub fn max_step_sizes(
    game: &GameDefinition,
    graph: &DualGraph,
    gamma: f64,
) -> Result<StepSizes, OperatorError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(OperatorError::BadGamma(gamma));
    }
    if graph.node_count() != game.agent_count() {
        return Err(OperatorError::AgentMismatch {
            graph: graph.node_count(),
            game: game.agent_count(),
        });
    }
    let n = game.agent_count();
    let mut alpha = Vec::with_capacity(n);
    let mut nu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let a = game.a_block(i);
        let d = graph.degree(i);
        alpha.push(1.0 / (gamma + a.max_abs_col_sum()));
        nu.push(1.0 / (gamma + 2.0 * d));
        sigma.push(1.0 / (gamma + 2.0 * d + a.max_abs_row_sum()));
    }
    Ok(StepSizes {
        alpha,
        nu,
        sigma,
        gamma,
    })
}

/// Componentwise clamp of `v` into `[lower, upper]`.
pub fn project_box(lower: &[f64], upper: &[f64], v: &mut [f64]) {
    for ((slot, lo), hi) in v.iter_mut().zip(lower).zip(upper) {
        *slot = slot.clamp(*lo, *hi);
    }
}

/// Componentwise positive part.
pub fn project_nonneg(v: &mut [f64]) {
    for slot in v.iter_mut() {
        if *slot < 0.0 {
            *slot = 0.0;
        }
    }
}

/// Block-diagonal constraint map: `out_i = A_i x_i` (length N*m).
pub fn constraint_apply(game: &GameDefinition, x: &[f64], out: &mut [f64]) {
    let m = game.constraint_rows();
    for i in 0..game.agent_count() {
        let dst = &mut out[i * m..(i + 1) * m];
        game.a_block(i).mul_vec(game.block(x, i), dst);
    }
}

/// Adjoint of the block-diagonal constraint map: `out_i = A_i' lambda_i`
/// (length n).
pub fn constraint_adjoint(game: &GameDefinition, lambda: &[f64], out: &mut [f64]) {
    let m = game.constraint_rows();
    for i in 0..game.agent_count() {
        let (lo, hi) = (game.offset(i), game.offset(i) + game.dim(i));
        game.a_block(i)
            .tr_mul_vec(&lambda[i * m..(i + 1) * m], &mut out[lo..hi]);
    }
}

/// Stacked per-agent constraint offsets `col(b_i)` (length N*m).
pub fn stacked_offsets(game: &GameDefinition) -> Vec<f64> {
    let m = game.constraint_rows();
    let mut out = vec![0.0; game.agent_count() * m];
    for i in 0..game.agent_count() {
        out[i * m..(i + 1) * m].copy_from_slice(game.b_local(i));
    }
    out
}

/// Forward operator value `A(omega) = (f_hat, 0, b + L lambda)`, with the
/// pseudogradient estimate supplied by the caller.
pub fn forward_eval(
    game: &GameDefinition,
    graph: &DualGraph,
    state: &StackedState,
    f_hat: &[f64],
) -> StackedState {
    let m = game.constraint_rows();
    let mut lam_row = stacked_offsets(game);
    let mut lap = vec![0.0; state.lambda.len()];
    graph.laplacian_apply(m, &state.lambda, &mut lap);
    for (slot, l) in lam_row.iter_mut().zip(&lap) {
        *slot += l;
    }
    StackedState {
        x: f_hat.to_vec(),
        z: vec![0.0; state.z.len()],
        lambda: lam_row,
    }
}

/// Skew coupling matrix applied to a state:
/// `M omega = (A' lambda, L lambda, -A x - L z)`. Its quadratic form is
/// identically zero.
pub fn skew_apply(game: &GameDefinition, graph: &DualGraph, state: &StackedState) -> StackedState {
    let m = game.constraint_rows();
    let mut x_row = vec![0.0; state.x.len()];
    constraint_adjoint(game, &state.lambda, &mut x_row);
    let mut z_row = vec![0.0; state.z.len()];
    graph.laplacian_apply(m, &state.lambda, &mut z_row);
    let mut lam_row = vec![0.0; state.lambda.len()];
    constraint_apply(game, &state.x, &mut lam_row);
    let mut lap_z = vec![0.0; state.z.len()];
    graph.laplacian_apply(m, &state.z, &mut lap_z);
    for (slot, v) in lam_row.iter_mut().zip(&lap_z) {
        *slot = -*slot - v;
    }
    StackedState {
        x: x_row,
        z: z_row,
        lambda: lam_row,
    }
}

/// Dense preconditioner, for verification and metric computations only
/// (solvers never invert it).
pub fn assemble_phi(game: &GameDefinition, graph: &DualGraph, steps: &StepSizes) -> DMatrix<f64> {
    let n = game.total_dim();
    let m = game.constraint_rows();
    let agents = game.agent_count();
    let nm = agents * m;
    let total = n + 2 * nm;
    let mut phi = DMatrix::zeros(total, total);
    for i in 0..agents {
        for j in 0..game.dim(i) {
            let r = game.offset(i) + j;
            phi[(r, r)] = 1.0 / steps.alpha[i];
        }
        for j in 0..m {
            phi[(n + i * m + j, n + i * m + j)] = 1.0 / steps.nu[i];
            phi[(n + nm + i * m + j, n + nm + i * m + j)] = 1.0 / steps.sigma[i];
        }
        // -A' in the (x, lambda) block, mirrored below the diagonal.
        let a = game.a_block(i);
        for row in 0..m {
            for col in 0..game.dim(i) {
                let v = a.get(row, col);
                if v != 0.0 {
                    phi[(game.offset(i) + col, n + nm + i * m + row)] = -v;
                    phi[(n + nm + i * m + row, game.offset(i) + col)] = -v;
                }
            }
        }
    }
    // -L (Kronecker with I_m) in the (z, lambda) block.
    for i in 0..agents {
        for &(j, w) in graph.neighbors(i) {
            for r in 0..m {
                phi[(n + i * m + r, n + nm + j * m + r)] += w;
                phi[(n + nm + i * m + r, n + j * m + r)] += w;
            }
        }
        let d = graph.degree(i);
        for r in 0..m {
            phi[(n + i * m + r, n + nm + i * m + r)] -= d;
            phi[(n + nm + i * m + r, n + i * m + r)] -= d;
        }
    }
    phi
}

/// `sqrt(v' Phi v)` for a flattened state.
pub fn phi_quadratic_norm(phi: &DMatrix<f64>, flat: &[f64]) -> f64 {
    let v = nalgebra::DVector::from_column_slice(flat);
    let pv = phi * &v;
    v.dot(&pv).max(0.0).sqrt()
}

/// Forward-part cocoercivity bound `theta = min(beta, 1/(2 d*))`.
pub fn theta_bound(beta: f64, d_star: f64) -> f64 {
    if d_star > 0.0 {
        beta.min(1.0 / (2.0 * d_star))
    } else {
        beta
    }
}

/// Cocoercivity constant of an affine monotone map from its matrix: the
/// tight `1/l_max` when the matrix is (numerically) symmetric, otherwise
/// the conservative `mu / l^2`.
pub fn cocoercivity_constant(theta: &DMatrix<f64>) -> Result<f64, OperatorError> {
    let sym = (theta + theta.transpose()) * 0.5;
    let (mu, hi) = sym_extreme_eigs(&sym);
    if mu <= 0.0 {
        return Err(OperatorError::NotStronglyMonotone(mu));
    }
    let asym = (theta - theta.transpose()).abs().max();
    if asym <= 1e-9 * hi.abs().max(1.0) {
        Ok(1.0 / hi)
    } else {
        let l = linalg::spectral_norm(theta);
        Ok(mu / (l * l))
    }
}

/// Smallest design parameter, padded by 5%, for which the constant steps
/// from [`max_step_sizes`] make the fixed-point iteration averaged. The
/// averagedness condition is `lambda_min(Phi) > 1/(2 theta)`, and
/// `max_step_sizes` guarantees `lambda_min(Phi) >= gamma`, so any gamma at
/// or above this value is certified. Below it the iteration can settle
/// into a limit cycle instead of converging.
pub fn certified_gamma(
    pseudogradient_matrix: &DMatrix<f64>,
    d_star: f64,
) -> Result<f64, OperatorError> {
    let beta = cocoercivity_constant(pseudogradient_matrix)?;
    Ok(1.05 / (2.0 * theta_bound(beta, d_star)))
}

/// Spectral norm of the affine forward map probed by the two-evaluation
/// engines: gradient plus constraint adjoint on the x rows, `L lambda` on
/// the z rows, and `L lambda - A x - L z` on the dual rows. The Tseng and
/// extragradient step conditions are stated against this constant rather
/// than the cocoercivity bound, so those engines need a larger design
/// parameter than plain forward-backward.
pub fn forward_lipschitz(game: &GameDefinition, graph: &DualGraph) -> Result<f64, GameError> {
    let n = game.total_dim();
    let m = game.constraint_rows();
    let agents = game.agent_count();
    let nm = agents * m;
    let total = n + 2 * nm;
    let mut grad = vec![0.0; n];
    let mut column = |state: &StackedState| -> Result<Vec<f64>, GameError> {
        game.pseudogradient_exact(&state.x, &mut grad)?;
        let fwd = forward_eval(game, graph, state, &grad);
        let skew = skew_apply(game, graph, state);
        let mut col = fwd.to_flat();
        for (c, s) in col.iter_mut().zip(skew.to_flat()) {
            *c += s;
        }
        Ok(col)
    };
    let origin = column(&StackedState::zeros(n, agents, m))?;
    let mut k = DMatrix::zeros(total, total);
    let mut basis = StackedState::zeros(n, agents, m);
    for j in 0..total {
        set_flat(&mut basis, j, 1.0);
        let col = column(&basis)?;
        for (i, (v, o)) in col.iter().zip(&origin).enumerate() {
            k[(i, j)] = v - o;
        }
        set_flat(&mut basis, j, 0.0);
    }
    Ok(linalg::spectral_norm(&k))
}

fn set_flat(state: &mut StackedState, idx: usize, value: f64) {
    let n = state.x.len();
    let nm = state.z.len();
    if idx < n {
        state.x[idx] = value;
    } else if idx < n + nm {
        state.z[idx - n] = value;
    } else {
        state.lambda[idx - n - nm] = value;
    }
}

/// One coordinate's failure in the resolvent inclusion.
#[derive(Clone, Debug, PartialEq)]
pub struct InclusionViolation {
    pub block: &'static str,
    pub coord: usize,
    pub excess: f64,
}

/// Outcome of [`verify_fb_inclusion`]: empty means the inclusion holds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InclusionReport {
    pub violations: Vec<InclusionViolation>,
}

impl InclusionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, block: &'static str, coord: usize, excess: f64) {
        if excess > 0.0 {
            self.violations.push(InclusionViolation {
                block,
                coord,
                excess,
            });
        }
    }
}

/// Checks that `next` is the backward image of `prev`:
/// `Phi (prev - next) - A(prev) in B(next)`, blockwise.
///
/// The x and lambda rows are normal-cone memberships (sign tests keyed on
/// active bounds, exact bitwise bound comparison after clamping); the z
/// row is a plain linear identity. `f_hat` must be the same pseudogradient
/// estimate the step used.
pub fn verify_fb_inclusion(
    game: &GameDefinition,
    graph: &DualGraph,
    steps: &StepSizes,
    prev: &StackedState,
    next: &StackedState,
    f_hat: &[f64],
    tol: f64,
) -> InclusionReport {
    let m = game.constraint_rows();
    let mut report = InclusionReport::default();

    // x rows: s = (x - x+)/alpha - A' lambda - f_hat must lie in the
    // normal cone of the box at x+.
    let mut at_lambda = vec![0.0; game.total_dim()];
    constraint_adjoint(game, &prev.lambda, &mut at_lambda);
    for i in 0..game.agent_count() {
        for j in 0..game.dim(i) {
            let c = game.offset(i) + j;
            let s = (prev.x[c] - next.x[c]) / steps.alpha[i] - at_lambda[c] - f_hat[c];
            let (lo, hi) = (game.lower()[c], game.upper()[c]);
            if lo == hi {
                continue;
            }
            let excess = if next.x[c] == lo {
                s - tol
            } else if next.x[c] == hi {
                -s - tol
            } else {
                s.abs() - tol
            };
            report.push("x", c, excess);
        }
    }

    // z rows: (z - z+)/nu = L lambda exactly.
    let mut lap_lambda = vec![0.0; prev.lambda.len()];
    graph.laplacian_apply(m, &prev.lambda, &mut lap_lambda);
    for i in 0..game.agent_count() {
        for j in 0..m {
            let c = i * m + j;
            let r = (prev.z[c] - next.z[c]) / steps.nu[i] - lap_lambda[c];
            report.push("z", c, r.abs() - tol);
        }
    }

    // lambda rows: s = (lam - lam+)/sigma + A(2x+ - x) + L(2z+ - z)
    // - L lam - b must lie in the nonnegative-orthant normal cone at lam+.
    let refl_x: Vec<f64> = next
        .x
        .iter()
        .zip(&prev.x)
        .map(|(np, p)| 2.0 * np - p)
        .collect();
    let mut a_refl = vec![0.0; prev.lambda.len()];
    constraint_apply(game, &refl_x, &mut a_refl);
    let refl_z: Vec<f64> = next
        .z
        .iter()
        .zip(&prev.z)
        .map(|(np, p)| 2.0 * np - p)
        .collect();
    let mut lap_refl_z = vec![0.0; prev.z.len()];
    graph.laplacian_apply(m, &refl_z, &mut lap_refl_z);
    let b = stacked_offsets(game);
    for i in 0..game.agent_count() {
        for j in 0..m {
            let c = i * m + j;
            let s = (prev.lambda[c] - next.lambda[c]) / steps.sigma[i] + a_refl[c] + lap_refl_z[c]
                - lap_lambda[c]
                - b[c];
            let excess = if next.lambda[c] == 0.0 {
                s - tol
            } else {
                s.abs() - tol
            };
            report.push("lambda", c, excess);
        }
    }
    report
}

/// Equilibrium diagnostics. All entries are nonnegative and vanish at a
/// variational equilibrium with consensual duals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `||x - proj(x - (F(x) + A' lambda))||`.
    pub stationarity: f64,
    /// `||max(Ax - b, 0)||`.
    pub feasibility: f64,
    /// `|lambda' (Ax - b)|`.
    pub complementarity: f64,
    /// `||L lambda||` over the stacked dual copies.
    pub dual_disagreement: f64,
}

/// Stationarity, feasibility, and complementarity at `(x, lambda_bar)`
/// with a single consensual dual. With no shared constraint the
/// stationarity term reduces to the natural residual and the other two
/// vanish. Dual disagreement is zero here; use
/// [`kkt_residual_with_graph`] when the stacked duals are available.
pub fn kkt_residual(
    game: &GameDefinition,
    x: &[f64],
    lambda_bar: &[f64],
) -> Result<KktReport, GameError> {
    let n = game.total_dim();
    let mut f = vec![0.0; n];
    game.pseudogradient_exact(x, &mut f)?;
    let stationarity = stationarity_given_gradient(game, x, lambda_bar, &f);
    let viol = game.constraint_violation(x);
    let feasibility = viol.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    let complementarity = viol
        .iter()
        .zip(lambda_bar)
        .map(|(v, l)| v * l)
        .sum::<f64>()
        .abs();
    Ok(KktReport {
        stationarity,
        feasibility,
        complementarity,
        dual_disagreement: 0.0,
    })
}

/// Stationarity distance with a caller-supplied pseudogradient value,
/// `||x - proj(x - (f + A' lambda_bar))||`. Lets tight loops reuse a
/// gradient they already evaluated.
pub fn stationarity_given_gradient(
    game: &GameDefinition,
    x: &[f64],
    lambda_bar: &[f64],
    f: &[f64],
) -> f64 {
    let mut probe = vec![0.0; game.total_dim()];
    for i in 0..game.agent_count() {
        let (lo, hi) = (game.offset(i), game.offset(i) + game.dim(i));
        game.a_block(i).tr_mul_vec(lambda_bar, &mut probe[lo..hi]);
    }
    for (slot, (xv, fv)) in probe.iter_mut().zip(x.iter().zip(f)) {
        *slot = xv - (fv + *slot);
    }
    project_box(game.lower(), game.upper(), &mut probe);
    x.iter()
        .zip(&probe)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Full report from stacked duals: averages the dual copies for the KKT
/// terms and measures their disagreement as `||L lambda||`.
pub fn kkt_residual_with_graph(
    game: &GameDefinition,
    graph: &DualGraph,
    x: &[f64],
    lambda: &[f64],
) -> Result<KktReport, GameError> {
    let m = game.constraint_rows();
    let agents = game.agent_count();
    let mut mean = vec![0.0; m];
    for i in 0..agents {
        for j in 0..m {
            mean[j] += lambda[i * m + j];
        }
    }
    for v in &mut mean {
        *v /= agents as f64;
    }
    let mut report = kkt_residual(game, x, &mean)?;
    report.dual_disagreement = dual_disagreement(graph, m, lambda);
    Ok(report)
}

/// `||(L (x) I_m) lambda||_2`: zero exactly at dual consensus.
pub fn dual_disagreement(graph: &DualGraph, m: usize, lambda: &[f64]) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let mut out = vec![0.0; lambda.len()];
    graph.laplacian_apply(m, lambda, &mut out);
    out.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||x - proj(x - F(x))||`: zero exactly at a Nash equilibrium of a game
/// without shared constraints.
pub fn natural_residual(game: &GameDefinition, x: &[f64]) -> Result<f64, GameError> {
    assert_eq!(
        game.constraint_rows(),
        0,
        "natural residual is defined for games without shared constraints"
    );
    let n = game.total_dim();
    let mut f = vec![0.0; n];
    game.pseudogradient_exact(x, &mut f)?;
    let mut probe: Vec<f64> = x.iter().zip(&f).map(|(xv, fv)| xv - fv).collect();
    project_box(game.lower(), game.upper(), &mut probe);
    Ok(x.iter()
        .zip(&probe)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cournot::{generate_instance, CournotParams};
    use crate::game::{GradientOracle, SamplePoint};
    use crate::linalg::DenseMatrix;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Identity-coupled two-agent game with A_i = I_2, for step-size hand
    /// values.
    fn identity_game() -> GameDefinition {
        struct Zero;
        impl GradientOracle for Zero {
            fn sample_dim(&self) -> usize {
                1
            }
            fn sampled(&self, _: usize, _: &[f64], _: &SamplePoint, out: &mut [f64]) {
                out.fill(0.0);
            }
        }
        GameDefinition::new(
            vec![2, 2],
            vec![0.0; 4],
            vec![1.0; 4],
            vec![DenseMatrix::identity(2), DenseMatrix::identity(2)],
            vec![1.0, 1.0],
            Arc::new(Zero),
        )
        .unwrap()
    }

    fn small_instance() -> crate::cournot::CournotInstance {
        generate_instance(
            &CournotParams {
                companies: 5,
                markets: 3,
                ..CournotParams::default()
            },
            3,
        )
        .unwrap()
    }

    fn random_state(game: &GameDefinition, rng: &mut ChaCha8Rng, spread: f64) -> StackedState {
        let m = game.constraint_rows();
        let nm = game.agent_count() * m;
        StackedState {
            x: (0..game.total_dim())
                .map(|_| rng.random_range(-spread..spread))
                .collect(),
            z: (0..nm).map(|_| rng.random_range(-spread..spread)).collect(),
            lambda: (0..nm).map(|_| rng.random_range(-spread..spread)).collect(),
        }
    }

    #[test]
    fn step_sizes_match_hand_values() {
        // A_i = I_2 gives unit column and row sums; degree-2 nodes with
        // gamma = 1 give (1/2, 1/5, 1/6).
        let game = identity_game();
        let graph = crate::graph::DualGraph::from_edges(2, &[(0, 1, 2.0)]).unwrap();
        let steps = max_step_sizes(&game, &graph, 1.0).unwrap();
        assert_abs_diff_eq!(steps.alpha[0], 0.5);
        assert_abs_diff_eq!(steps.nu[0], 0.2);
        assert_abs_diff_eq!(steps.sigma[0], 1.0 / 6.0);
    }

    #[test]
    fn zero_constraint_block_gives_alpha_one_over_gamma() {
        struct Zero;
        impl GradientOracle for Zero {
            fn sample_dim(&self) -> usize {
                1
            }
            fn sampled(&self, _: usize, _: &[f64], _: &SamplePoint, out: &mut [f64]) {
                out.fill(0.0);
            }
        }
        let game = GameDefinition::new(
            vec![2, 2],
            vec![0.0; 4],
            vec![1.0; 4],
            vec![DenseMatrix::zeros(0, 2), DenseMatrix::zeros(0, 2)],
            vec![],
            Arc::new(Zero),
        )
        .unwrap();
        let graph = crate::graph::DualGraph::cycle_with_chords(2, &[]).unwrap();
        let steps = max_step_sizes(&game, &graph, 2.5).unwrap();
        assert_abs_diff_eq!(steps.alpha[0], 0.4);
        assert_abs_diff_eq!(steps.alpha[1], 0.4);
    }

    #[test]
    fn bad_gamma_rejected() {
        let game = identity_game();
        let graph = crate::graph::DualGraph::cycle_with_chords(2, &[]).unwrap();
        assert_eq!(
            max_step_sizes(&game, &graph, 0.0).unwrap_err(),
            OperatorError::BadGamma(0.0)
        );
        assert!(matches!(
            max_step_sizes(&game, &graph, -1.0).unwrap_err(),
            OperatorError::BadGamma(_)
        ));
    }

    #[test]
    fn phi_is_symmetric_and_clears_gamma() {
        let inst = small_instance();
        let game = inst.game().unwrap();
        let graph = inst.communication_graph().unwrap();
        for gamma in [1.0, 5.0, 13.0] {
            let steps = max_step_sizes(&game, &graph, gamma).unwrap();
            let phi = assemble_phi(&game, &graph, &steps);
            let asym = (&phi - phi.transpose()).abs().max();
            assert_eq!(asym, 0.0, "preconditioner must be exactly symmetric");
            let (lo, _) = sym_extreme_eigs(&phi);
            assert!(
                lo >= gamma * (1.0 - 1e-6),
                "min eigenvalue {lo} below gamma {gamma}"
            );
        }
    }

    #[test]
    fn skew_quadratic_form_vanishes() {
        let inst = small_instance();
        let game = inst.game().unwrap();
        let graph = inst.communication_graph().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let s = random_state(&game, &mut rng, 2.0);
            let ms = skew_apply(&game, &graph, &s);
            let inner: f64 = s
                .to_flat()
                .iter()
                .zip(ms.to_flat())
                .map(|(a, b)| a * b)
                .sum();
            let scale: f64 = s.to_flat().iter().map(|v| v * v).sum();
            assert!(
                inner.abs() <= 1e-12 * scale.max(1.0),
                "skew form nonzero: {inner}"
            );
        }
    }

    #[test]
    fn forward_eval_matches_dense_operator() {
        // Dense oracle: stack F(x), zeros, and b + (L kron I_m) lambda
        // assembled with an explicit Kronecker product.
        let inst = generate_instance(
            &CournotParams {
                companies: 3,
                markets: 2,
                participation: crate::cournot::Participation::Random {
                    min_markets: 1,
                    max_markets: 2,
                },
                ..CournotParams::default()
            },
            5,
        )
        .unwrap();
        let game = inst.game().unwrap();
        let graph = inst.communication_graph().unwrap();
        let m = game.constraint_rows();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = random_state(&game, &mut rng, 1.0);
        let mut f = vec![0.0; game.total_dim()];
        game.pseudogradient_exact(&state.x, &mut f).unwrap();
        let got = forward_eval(&game, &graph, &state, &f);

        let lap = graph.laplacian_dense();
        let eye = DMatrix::<f64>::identity(m, m);
        let big_l = lap.kronecker(&eye);
        let lam = nalgebra::DVector::from_column_slice(&state.lambda);
        let lam_row = big_l * lam;
        for i in 0..game.agent_count() {
            for j in 0..m {
                let want = game.b_local(i)[j] + lam_row[i * m + j];
                assert_abs_diff_eq!(got.lambda[i * m + j], want, epsilon = 1e-12);
            }
        }
        assert_eq!(got.x, f);
        assert!(got.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_theta_cocoercive() {
        // The forward part (exact pseudogradient plus the Laplacian dual
        // row) is theta-cocoercive with theta = min(beta, 1/(2 d*)).
        let inst = small_instance();
        let game = inst.game().unwrap();
        let graph = inst.communication_graph().unwrap();
        let theta_mat = game.affine_pseudogradient_matrix().unwrap();
        let beta = cocoercivity_constant(&theta_mat).unwrap();
        let theta = theta_bound(beta, graph.max_weighted_degree());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut f1 = vec![0.0; game.total_dim()];
        let mut f2 = vec![0.0; game.total_dim()];
        for _ in 0..1000 {
            let s1 = random_state(&game, &mut rng, 3.0);
            let s2 = random_state(&game, &mut rng, 3.0);
            game.pseudogradient_exact(&s1.x, &mut f1).unwrap();
            game.pseudogradient_exact(&s2.x, &mut f2).unwrap();
            let a1 = forward_eval(&game, &graph, &s1, &f1).to_flat();
            let a2 = forward_eval(&game, &graph, &s2, &f2).to_flat();
            let w1 = s1.to_flat();
            let w2 = s2.to_flat();
            let mut inner = 0.0;
            let mut normsq = 0.0;
            for k in 0..w1.len() {
                let da = a1[k] - a2[k];
                inner += da * (w1[k] - w2[k]);
                normsq += da * da;
            }
            assert!(
                inner >= theta * normsq - 1e-9 * normsq.max(1.0),
                "cocoercivity violated: {inner} < {theta} * {normsq}"
            );
        }
    }

    #[test]
    fn box_projection_is_firmly_nonexpansive() {
        let lower = vec![-1.0, 0.0, 0.5];
        let upper = vec![1.0, 2.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut pu = u.clone();
            let mut pv = v.clone();
            project_box(&lower, &upper, &mut pu);
            project_box(&lower, &upper, &mut pv);
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for k in 0..3 {
                let dp = pu[k] - pv[k];
                let dr = (u[k] - pu[k]) - (v[k] - pv[k]);
                lhs += dp * dp + dr * dr;
                rhs += (u[k] - v[k]) * (u[k] - v[k]);
            }
            assert!(lhs <= rhs + 1e-12, "firm nonexpansiveness violated");
        }
    }

    #[test]
    fn projection_hand_values() {
        let mut v = vec![-2.0, 0.5, 7.0];
        project_box(&[0.0; 3], &[1.0; 3], &mut v);
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        let mut w = vec![-1.0, 2.0, 0.0];
        project_nonneg(&mut w);
        assert_eq!(w, vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn kkt_zero_at_interior_minimizer() {
        // F(x) = x - 0.5 on [0, 1] with lambda = 0: x = 0.5 is stationary.
        struct Pull;
        impl GradientOracle for Pull {
            fn sample_dim(&self) -> usize {
                1
            }
            fn sampled(&self, _: usize, x: &[f64], _: &SamplePoint, out: &mut [f64]) {
                out[0] = x[0] - 0.5;
            }
            fn has_exact(&self) -> bool {
                true
            }
            fn exact(&self, _: usize, x: &[f64], out: &mut [f64]) {
                out[0] = x[0] - 0.5;
            }
        }
        let game = GameDefinition::new(
            vec![1],
            vec![0.0],
            vec![1.0],
            vec![DenseMatrix::from_row_major(1, 1, vec![1.0])],
            vec![2.0],
            Arc::new(Pull),
        )
        .unwrap();
        let report = kkt_residual(&game, &[0.5], &[0.0]).unwrap();
        assert_abs_diff_eq!(report.stationarity, 0.0);
        assert_abs_diff_eq!(report.feasibility, 0.0);
        assert_abs_diff_eq!(report.complementarity, 0.0);
        let infeasible = kkt_residual(&game, &[1.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(infeasible.feasibility, 0.0);
        let report = kkt_residual(&game, &[0.9], &[0.3]).unwrap();
        assert!(report.stationarity > 0.0);
    }

    #[test]
    fn feasibility_positive_when_violated() {
        let inst = small_instance();
        let game = inst.game().unwrap();
        let x = game.upper().to_vec();
        let report = kkt_residual(&game, &x, &vec![0.0; game.constraint_rows()]).unwrap();
        assert!(
            report.feasibility > 0.0,
            "caps sum above market capacity must violate"
        );
    }

    #[test]
    fn dual_disagreement_zero_iff_consensus() {
        let graph = crate::graph::DualGraph::cycle_with_chords(4, &[]).unwrap();
        let consensus = vec![0.7, -0.2, 0.7, -0.2, 0.7, -0.2, 0.7, -0.2];
        assert_abs_diff_eq!(dual_disagreement(&graph, 2, &consensus), 0.0);
        let mut off = consensus.clone();
        off[0] += 1e-3;
        assert!(dual_disagreement(&graph, 2, &off) > 1e-4);
    }

    #[test]
    fn natural_residual_zero_at_fixed_point() {
        let inst = small_instance();
        let game = inst.game_without_coupling().unwrap();
        // Fixed point of the projected-gradient map found by iterating it.
        let mut x = game.box_midpoint();
        let mut f = vec![0.0; game.total_dim()];
        for _ in 0..20_000 {
            game.pseudogradient_exact(&x, &mut f).unwrap();
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv -= 0.05 * fv;
            }
            game.project_boxes(&mut x);
        }
        assert!(natural_residual(&game, &x).unwrap() < 1e-10);
        let y = game.box_midpoint();
        assert!(natural_residual(&game, &y).unwrap() > 1e-3);
    }

    /// Hand-rolled single iteration on a 2-agent, 1-market game, used to
    /// probe the inclusion checker from an independent direction.
    fn hand_step(
        game: &GameDefinition,
        graph: &DualGraph,
        steps: &StepSizes,
        prev: &StackedState,
        f_hat: &[f64],
    ) -> StackedState {
        let m = game.constraint_rows();
        let mut next = prev.clone();
        let mut at_lambda = vec![0.0; game.total_dim()];
        constraint_adjoint(game, &prev.lambda, &mut at_lambda);
        for i in 0..game.agent_count() {
            for j in 0..game.dim(i) {
                let c = game.offset(i) + j;
                next.x[c] = prev.x[c] - steps.alpha[i] * (f_hat[c] + at_lambda[c]);
            }
        }
        project_box(game.lower(), game.upper(), &mut next.x);
        let mut lap_lambda = vec![0.0; prev.lambda.len()];
        graph.laplacian_apply(m, &prev.lambda, &mut lap_lambda);
        for i in 0..game.agent_count() {
            for j in 0..m {
                let c = i * m + j;
                next.z[c] = prev.z[c] - steps.nu[i] * lap_lambda[c];
            }
        }
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
            for j in 0..m {
                let c = i * m + j;
                next.lambda[c] = prev.lambda[c]
                    + steps.sigma[i] * (a_refl[c] - b[c] + lap_refl_z[c] - lap_lambda[c]);
            }
        }
        project_nonneg(&mut next.lambda);
        next
    }

    #[test]
    fn inclusion_holds_for_hand_rolled_step_and_fails_when_perturbed() {
        let inst = generate_instance(
            &CournotParams {
                companies: 2,
                markets: 1,
                participation: crate::cournot::Participation::Explicit {
                    sets: vec![vec![0], vec![0]],
                },
                ..CournotParams::default()
            },
            4,
        )
        .unwrap();
        let game = inst.game().unwrap();
        let graph = inst.communication_graph().unwrap();
        let steps = max_step_sizes(&game, &graph, 1.0).unwrap();
        let mut prev = StackedState::initial(&game);
        prev.lambda = vec![0.4, 0.1];
        prev.z = vec![0.2, -0.3];
        let mut f_hat = vec![0.0; game.total_dim()];
        game.pseudogradient_exact(&prev.x, &mut f_hat).unwrap();
        let next = hand_step(&game, &graph, &steps, &prev, &f_hat);
        let report = verify_fb_inclusion(&game, &graph, &steps, &prev, &next, &f_hat, 1e-9);
        assert!(report.passed(), "violations: {:?}", report.violations);

        // Interior perturbations in each block must be flagged.
        let mut bad = next.clone();
        bad.x[0] += 1e-3;
        assert!(!verify_fb_inclusion(&game, &graph, &steps, &prev, &bad, &f_hat, 1e-9).passed());
        let mut bad = next.clone();
        bad.z[1] += 1e-3;
        assert!(!verify_fb_inclusion(&game, &graph, &steps, &prev, &bad, &f_hat, 1e-9).passed());
        let mut bad = next;
        bad.lambda[0] += 1e-3;
        assert!(!verify_fb_inclusion(&game, &graph, &steps, &prev, &bad, &f_hat, 1e-9).passed());
    }

    #[test]
    fn inclusion_holds_at_fixed_point() {
        // Decoupled single agent without shared constraints: the minimizer
        // of (x - 0.3)^2 / 2 over [0, 1] is a zero of the whole operator.
        struct Pull;
        impl GradientOracle for Pull {
            fn sample_dim(&self) -> usize {
                1
            }
            fn sampled(&self, _: usize, x: &[f64], _: &SamplePoint, out: &mut [f64]) {
                out[0] = x[0] - 0.3;
            }
            fn has_exact(&self) -> bool {
                true
            }
            fn exact(&self, _: usize, x: &[f64], out: &mut [f64]) {
                out[0] = x[0] - 0.3;
            }
        }
        let game = GameDefinition::new(
            vec![1],
            vec![0.0],
            vec![1.0],
            vec![DenseMatrix::zeros(0, 1)],
            vec![],
            Arc::new(Pull),
        )
        .unwrap();
        let graph = crate::graph::DualGraph::from_edges(1, &[]).unwrap();
        let steps = max_step_sizes(&game, &graph, 1.0).unwrap();
        let star = StackedState {
            x: vec![0.3],
            z: vec![],
            lambda: vec![],
        };
        let f_hat = vec![0.0];
        let report = verify_fb_inclusion(&game, &graph, &steps, &star, &star, &f_hat, 1e-12);
        assert!(report.passed());
    }

    #[test]
    fn cocoercivity_constant_tight_for_symmetric() {
        let theta = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let eigs = theta.clone().symmetric_eigen().eigenvalues;
        let want = 1.0 / eigs.max();
        assert_abs_diff_eq!(
            cocoercivity_constant(&theta).unwrap(),
            want,
            epsilon = 1e-10
        );
        // Nonsymmetric monotone map falls back to mu / l^2.
        let skewed = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 1.0, 2.0]);
        let got = cocoercivity_constant(&skewed).unwrap();
        let l = crate::linalg::spectral_norm(&skewed);
        assert_abs_diff_eq!(got, 2.0 / (l * l), epsilon = 1e-10);
        let bad = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(matches!(
            cocoercivity_constant(&bad),
            Err(OperatorError::NotStronglyMonotone(_))
        ));
    }

    #[test]
    fn theta_bound_picks_the_smaller_constant() {
        assert_abs_diff_eq!(theta_bound(0.04, 3.0), 0.04);
        assert_abs_diff_eq!(theta_bound(0.5, 3.0), 1.0 / 6.0);
        assert_abs_diff_eq!(theta_bound(0.5, 0.0), 0.5);
    }

    #[test]
    fn phi_norm_matches_dense_quadratic_form() {
        let inst = small_instance();
        let game = inst.game().unwrap();
        let graph = inst.communication_graph().unwrap();
        let steps = max_step_sizes(&game, &graph, 2.0).unwrap();
        let phi = assemble_phi(&game, &graph, &steps);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&game, &mut rng, 1.0).to_flat();
        let v = nalgebra::DVector::from_column_slice(&s);
        let want = (v.transpose() * &phi * &v)[(0, 0)].sqrt();
        assert_abs_diff_eq!(phi_quadratic_norm(&phi, &s), want, epsilon = 1e-12);
    }
}
