//! Counter-keyed sample streams and batch/step schedules.
//!
//! Every random draw is a pure function of (root seed, agent, iteration,
//! position within the batch): each (agent, iteration) pair owns a distinct
//! ChaCha stream, and draws are read sequentially from position zero. Runs
//! are therefore bit-reproducible regardless of scheduling, and agents'
//! draws are mutually independent.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF};
use thiserror::Error;

use crate::game::{GameDefinition, GameError, SamplePoint};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("batch schedule requires c > 0, k0 >= 0, a > 0 (got c={0}, k0={1}, a={2})")]
    BadBatchSchedule(f64, f64, f64),
    #[error("step schedule requires gamma0 > 0, eta in (0.5, 1], cap > 0 (got gamma0={0}, eta={1}, cap={2})")]
    BadStepSchedule(f64, f64, f64),
    #[error("distribution variance must be finite and nonnegative (got {0})")]
    BadVariance(f64),
    #[error("second-moment probe needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Growing batch-size rule `S_k = ceil(c (k + k0)^(a+1))`.
///
/// `a > 0` makes `Σ 1/S_k` finite, which is what the sample-average runs
/// rely on for almost-sure convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub c: f64,
    pub k0: f64,
    pub a: f64,
}

impl BatchSchedule {
    pub fn new(c: f64, k0: f64, a: f64) -> Result<Self, SamplingError> {
        let ok =
            c > 0.0 && c.is_finite() && k0 >= 0.0 && k0.is_finite() && a > 0.0 && a.is_finite();
        if !ok {
            return Err(SamplingError::BadBatchSchedule(c, k0, a));
        }
        Ok(Self { c, k0, a })
    }

    /// Batch size at iteration `k` (always at least 1).
    pub fn size_at(&self, k: u64) -> u64 {
        let exp = self.a + 1.0;
        let base = k as f64 + self.k0;
        // Integer exponents go through powi so small integer cases stay
        // exact (e.g. (k+1)^2 for c=1, k0=1, a=1).
        let raw = if exp.fract() == 0.0 && exp <= 32.0 {
            self.c * base.powi(exp as i32)
        } else {
            self.c * base.powf(exp)
        };
        (raw.ceil() as u64).max(1)
    }
}

/// Vanishing step rule `gamma_k = min(gamma0 / (k+1)^eta, cap)` with
/// `eta in (0.5, 1]`. The square-summable-but-not-summable range keeps the
/// one-sample runs convergent; the cap enforces the cocoercivity bound
/// `gamma_k <= 2 beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub gamma0: f64,
    pub eta: f64,
    pub cap: f64,
}

impl StepSchedule {
    pub fn new(gamma0: f64, eta: f64, cap: f64) -> Result<Self, SamplingError> {
        let ok = gamma0 > 0.0
            && gamma0.is_finite()
            && eta > 0.5
            && eta <= 1.0
            && cap > 0.0
            && cap.is_finite();
        if !ok {
            return Err(SamplingError::BadStepSchedule(gamma0, eta, cap));
        }
        Ok(Self { gamma0, eta, cap })
    }

    pub fn step_at(&self, k: u64) -> f64 {
        (self.gamma0 / ((k + 1) as f64).powf(self.eta)).min(self.cap)
    }
}

/// Componentwise sample distribution: normal with optional clamping at
/// zero (negative demand slopes are economically meaningless and would
/// break monotonicity of the benchmark map).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDistribution {
    pub mean: f64,
    pub variance: f64,
    pub clamp_at_zero: bool,
}

impl SampleDistribution {
    pub fn normal(mean: f64, variance: f64, clamp_at_zero: bool) -> Result<Self, SamplingError> {
        if !(variance >= 0.0) || !variance.is_finite() || !mean.is_finite() {
            return Err(SamplingError::BadVariance(variance));
        }
        Ok(Self {
            mean,
            variance,
            clamp_at_zero,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = if self.variance == 0.0 {
            self.mean
        } else {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            self.mean + self.variance.sqrt() * z
        };
        if self.clamp_at_zero {
            v.max(0.0)
        } else {
            v
        }
    }

    /// Exact mean of one draw, accounting for the clamp. For a clamped
    /// normal this is `mu Phi(mu/sigma) + sigma phi(mu/sigma)`; exact
    /// oracles built on this distribution must use this value so the
    /// sampling error stays zero-mean by construction.
    pub fn exact_mean(&self) -> f64 {
        if !self.clamp_at_zero {
            return self.mean;
        }
        if self.variance == 0.0 {
            return self.mean.max(0.0);
        }
        let sigma = self.variance.sqrt();
        let a = self.mean / sigma;
        let std = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
        self.mean * std.cdf(a) + sigma * std.pdf(a)
    }
}

/// Counter-keyed source of per-agent sample vectors.
#[derive(Clone, Debug)]
pub struct SampleStream {
    seed: u64,
    key: [u8; 32],
    dim: usize,
    dist: SampleDistribution,
}

/// SplitMix64 step, used only to expand the root seed into a cipher key.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SampleStream {
    const MAX_AGENTS: u64 = 1 << 24;
    const MAX_ITERATIONS: u64 = 1 << 40;

    pub fn new(seed: u64, dim: usize, dist: SampleDistribution) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            seed,
            key,
            dim,
            dist,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn distribution(&self) -> &SampleDistribution {
        &self.dist
    }

    /// Fresh generator for the (agent, iteration) stream, positioned at
    /// draw zero.
    fn rng_for(&self, agent: usize, iteration: u64) -> ChaCha8Rng {
        assert!(
            (agent as u64) < Self::MAX_AGENTS,
            "agent id too large for stream keying"
        );
        assert!(
            iteration < Self::MAX_ITERATIONS,
            "iteration too large for stream keying"
        );
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(((agent as u64) << 40) | iteration);
        rng
    }

    fn draw_into(&self, rng: &mut ChaCha8Rng, out: &mut SamplePoint) {
        out.0.resize(self.dim, 0.0);
        for slot in &mut out.0 {
            *slot = self.dist.draw(rng);
        }
    }

    /// Materializes agent `agent`'s batch for iteration `iteration`.
    /// Identical keys yield identical batches, and a shorter batch is a
    /// prefix of a longer one.
    pub fn draw_batch(&self, agent: usize, iteration: u64, size: usize) -> Vec<SamplePoint> {
        let mut rng = self.rng_for(agent, iteration);
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            let mut p = SamplePoint::zeros(self.dim);
            self.draw_into(&mut rng, &mut p);
            out.push(p);
        }
        out
    }

    /// Streams the batch through `f` without materializing it.
    pub fn fold_batch<F: FnMut(&SamplePoint)>(
        &self,
        agent: usize,
        iteration: u64,
        size: usize,
        mut f: F,
    ) {
        let mut rng = self.rng_for(agent, iteration);
        let mut p = SamplePoint::zeros(self.dim);
        for _ in 0..size {
            self.draw_into(&mut rng, &mut p);
            f(&p);
        }
    }

    /// Componentwise mean of the batch, computed as (sum of draws) / S in
    /// draw order, matching [`SamplePoint::mean_of`] on the materialized
    /// batch bit for bit.
    pub fn mean_sample(&self, agent: usize, iteration: u64, size: usize) -> SamplePoint {
        let mut sum = vec![0.0; self.dim];
        self.fold_batch(agent, iteration, size, |p| {
            for (s, v) in sum.iter_mut().zip(&p.0) {
                *s += v;
            }
        });
        for v in &mut sum {
            *v /= size as f64;
        }
        SamplePoint(sum)
    }

    /// One draw per agent (the one-sample estimator's input for an
    /// iteration).
    pub fn draws_for_agents(&self, agents: usize, iteration: u64) -> Vec<SamplePoint> {
        (0..agents)
            .map(|i| {
                let mut rng = self.rng_for(i, iteration);
                let mut p = SamplePoint::zeros(self.dim);
                self.draw_into(&mut rng, &mut p);
                p
            })
            .collect()
    }
}

/// Empirical second moment of the sample-average error: mean over `trials`
/// fresh batches of `||F_SAA(x; S) - F(x)||^2`. Needs the exact oracle.
pub fn error_second_moment(
    game: &GameDefinition,
    stream: &SampleStream,
    x: &[f64],
    batch_size: usize,
    trials: usize,
) -> Result<f64, SamplingError> {
    if trials == 0 {
        return Err(SamplingError::NoTrials);
    }
    let n = game.total_dim();
    let mut exact = vec![0.0; n];
    game.pseudogradient_exact(x, &mut exact)?;
    let mut saa = vec![0.0; n];
    let mut acc = 0.0;
    for t in 0..trials {
        let batches: Vec<Vec<SamplePoint>> = (0..game.agent_count())
            .map(|i| stream.draw_batch(i, t as u64, batch_size))
            .collect();
        game.pseudogradient_saa(x, &batches, &mut saa)?;
        acc += saa
            .iter()
            .zip(&exact)
            .map(|(s, e)| (s - e) * (s - e))
            .sum::<f64>();
    }
    Ok(acc / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn batch_schedule_matches_hand_values() {
        let b = BatchSchedule::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(b.size_at(0), 1);
        assert_eq!(b.size_at(3), 16);
        assert_eq!(b.size_at(9), 100);
    }

    #[test]
    fn batch_schedule_is_monotone() {
        let b = BatchSchedule::new(0.7, 2.0, 0.3).unwrap();
        let mut prev = 0;
        for k in 0..10_000 {
            let s = b.size_at(k);
            assert!(s >= prev, "batch size decreased at k={k}");
            assert!(s >= 1);
            prev = s;
        }
    }

    #[test]
    fn batch_schedule_rejects_zero_growth() {
        assert!(BatchSchedule::new(1.0, 1.0, 0.0).is_err());
        assert!(BatchSchedule::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn step_schedule_matches_hand_values() {
        let s = StepSchedule::new(0.5, 1.0, 10.0).unwrap();
        assert_abs_diff_eq!(s.step_at(0), 0.5);
        assert_abs_diff_eq!(s.step_at(9), 0.05);
        let capped = StepSchedule::new(1.0, 0.6, 0.02).unwrap();
        assert_abs_diff_eq!(capped.step_at(0), 0.02);
    }

    #[test]
    fn step_schedule_eta_range_enforced() {
        assert!(StepSchedule::new(1.0, 0.5, 1.0).is_err());
        assert!(StepSchedule::new(1.0, 1.01, 1.0).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 1.0).is_ok());
    }

    /// Tail of the zeta series, `sum_{j > k} j^-s`, by Euler-Maclaurin:
    /// with a = k+1, this is a^(1-s)/(s-1) + a^-s/2 + s a^-(s+1)/12 - ...
    fn zeta_tail(k: u64, s: f64) -> f64 {
        let a = (k + 1) as f64;
        a.powf(1.0 - s) / (s - 1.0) + 0.5 * a.powf(-s) + s / 12.0 * a.powf(-s - 1.0)
    }

    /// Riemann zeta via a partial sum plus the tail estimate; plenty of
    /// accuracy for bracketing the step-square series.
    fn zeta(s: f64) -> f64 {
        let k = 20_000u64;
        let sum: f64 = (1..=k).map(|j| (j as f64).powf(-s)).sum();
        sum + zeta_tail(k, s)
    }

    #[test]
    fn step_partial_sums_follow_the_dichotomy() {
        // Sum of gamma_k grows like (k+1)^(1-eta); sum of squares stays
        // below gamma0^2 * zeta(2 eta) and approaches it minus the known
        // tail.
        let gamma0 = 0.8;
        let eta = 0.6;
        let s = StepSchedule::new(gamma0, eta, 1e300).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let kmax = 1_000_000u64;
        for k in 0..kmax {
            let g = s.step_at(k);
            sum += g;
            sum_sq += g * g;
        }
        let growth = gamma0 * ((kmax as f64).powf(1.0 - eta) - 1.0) / (1.0 - eta);
        assert!(
            sum > 0.9 * growth,
            "divergent part grew too slowly: {sum} vs {growth}"
        );
        let bound = gamma0 * gamma0 * zeta(2.0 * eta);
        assert!(
            sum_sq < bound,
            "square series exceeded zeta bound: {sum_sq} vs {bound}"
        );
        let expected = gamma0 * gamma0 * (zeta(2.0 * eta) - zeta_tail(kmax, 2.0 * eta));
        let rel = (sum_sq - expected).abs() / expected;
        assert!(
            rel < 1e-9,
            "partial sum {sum_sq} vs zeta prediction {expected}"
        );
    }

    #[test]
    fn clamped_mean_closed_form_matches_monte_carlo() {
        let dist = SampleDistribution::normal(0.8, 0.1, true).unwrap();
        let stream = SampleStream::new(77, 1, dist);
        let n = 200_000usize;
        let mut sum = 0.0;
        stream.fold_batch(0, 0, n, |p| sum += p.0[0]);
        let mc = sum / n as f64;
        let band = 3.0 * dist.variance.sqrt() / (n as f64).sqrt();
        assert!(
            (mc - dist.exact_mean()).abs() < band,
            "closed-form mean {} vs MC {mc} (band {band})",
            dist.exact_mean()
        );
        // The clamp shifts the mean only slightly at this variance.
        assert!((dist.exact_mean() - 0.8).abs() < 1e-3);
    }

    #[test]
    fn degenerate_distribution_is_constant() {
        let dist = SampleDistribution::normal(0.8, 0.0, true).unwrap();
        let stream = SampleStream::new(1, 3, dist);
        for p in stream.draw_batch(0, 0, 10) {
            assert_eq!(p.0, vec![0.8; 3]);
        }
        assert_eq!(dist.exact_mean(), 0.8);
    }

    #[test]
    fn identical_keys_reproduce_draws() {
        let dist = SampleDistribution::normal(0.8, 0.1, true).unwrap();
        let s1 = SampleStream::new(42, 7, dist);
        let s2 = SampleStream::new(42, 7, dist);
        assert_eq!(s1.draw_batch(3, 100, 16), s2.draw_batch(3, 100, 16));
        assert_ne!(s1.draw_batch(3, 100, 4), s1.draw_batch(3, 101, 4));
        assert_ne!(s1.draw_batch(3, 100, 4), s1.draw_batch(4, 100, 4));
        assert_ne!(
            SampleStream::new(43, 7, dist).draw_batch(3, 100, 4),
            s1.draw_batch(3, 100, 4)
        );
    }

    #[test]
    fn shorter_batch_is_prefix_of_longer() {
        // Draws are keyed by position, so batch size never reshuffles them.
        let dist = SampleDistribution::normal(0.0, 1.0, false).unwrap();
        let s = SampleStream::new(5, 2, dist);
        let short = s.draw_batch(1, 9, 5);
        let long = s.draw_batch(1, 9, 12);
        assert_eq!(short.as_slice(), &long[..5]);
    }

    #[test]
    fn cross_agent_draws_are_uncorrelated() {
        let dist = SampleDistribution::normal(0.0, 1.0, false).unwrap();
        let s = SampleStream::new(9, 1, dist);
        let n = 10_000usize;
        let a = s.draw_batch(0, 0, n);
        let b = s.draw_batch(1, 0, n);
        let mean = |v: &[SamplePoint]| v.iter().map(|p| p.0[0]).sum::<f64>() / n as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (pa, pb) in a.iter().zip(&b) {
            cov += (pa.0[0] - ma) * (pb.0[0] - mb);
            va += (pa.0[0] - ma) * (pa.0[0] - ma);
            vb += (pb.0[0] - mb) * (pb.0[0] - mb);
        }
        let rho = cov / (va.sqrt() * vb.sqrt());
        assert!(rho.abs() < 0.05, "cross-agent correlation too high: {rho}");
    }

    #[test]
    fn mean_sample_matches_materialized_mean() {
        let dist = SampleDistribution::normal(0.8, 0.1, true).unwrap();
        let s = SampleStream::new(21, 7, dist);
        let batch = s.draw_batch(2, 5, 9);
        let mean = crate::game::SamplePoint::mean_of(&batch).unwrap();
        assert_eq!(s.mean_sample(2, 5, 9), mean);
    }

    #[test]
    fn sample_mean_hits_nominal_value() {
        let dist = SampleDistribution::normal(0.8, 0.1, true).unwrap();
        let s = SampleStream::new(123, 1, dist);
        let n = 100_000usize;
        let mut sum = 0.0;
        s.fold_batch(0, 0, n, |p| sum += p.0[0]);
        let mc = sum / n as f64;
        let band = 3.0 * dist.variance.sqrt() / (n as f64).sqrt();
        assert!((mc - 0.8).abs() < band + 1e-3, "mean {mc} far from 0.8");
    }
}
