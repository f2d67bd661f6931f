//! Kernelized Stein discrepancy with an RBF kernel: the Stein kernel `u_q`,
//! the V-statistic, bandwidth heuristics and the wild-bootstrap test.

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::distributions::{Sampler, ScoreField};
use crate::gof::{mean_std, threshold, NullModel, TestOutcome};
use crate::rng::{child, derive_seed, fill_rademacher, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum KsdError {
    #[error("median pairwise distance is zero; bandwidth undefined")]
    ZeroBandwidth,
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error("invalid KSD configuration: {0}")]
    Config(String),
}

/// `k(x, x') = exp(−γ‖x − x'‖²)` with `γ = 1/(2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RbfKernel {
    pub gamma: f64,
}

impl RbfKernel {
    pub fn new(gamma: f64) -> Self {
        assert!(gamma > 0.0 && gamma.is_finite(), "gamma must be positive");
        RbfKernel { gamma }
    }

    pub fn from_sigma(sigma: f64) -> Self {
        Self::new(1.0 / (2.0 * sigma * sigma))
    }

    /// Median-heuristic kernel rescaled by `δ`: `γ' = 1/(2δσ²)`.
    pub fn scaled(sigma: f64, delta: f64) -> Self {
        Self::new(1.0 / (2.0 * delta * sigma * sigma))
    }

    pub fn sigma(&self) -> f64 {
        (1.0 / (2.0 * self.gamma)).sqrt()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (-self.gamma * sq_dist(x, y)).exp()
    }

    /// `∇_x k(x, y)`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let k = self.eval(x, y);
        x.iter()
            .zip(y)
            .map(|(a, b)| -2.0 * self.gamma * (a - b) * k)
            .collect()
    }

    /// `∇_y k(x, y)`.
    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let k = self.eval(x, y);
        x.iter()
            .zip(y)
            .map(|(a, b)| 2.0 * self.gamma * (a - b) * k)
            .collect()
    }

    /// `tr ∇_x ∇_y k(x, y) = (2γd − 4γ²‖x − y‖²) k`.
    pub fn trace_mixed(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2 = sq_dist(x, y);
        let d = x.len() as f64;
        (2.0 * self.gamma * d - 4.0 * self.gamma * self.gamma * r2) * (-self.gamma * r2).exp()
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Stein kernel from precomputed scores at `x` and `y`.
pub fn u_q_with_scores(x: &[f64], y: &[f64], sx: &[f64], sy: &[f64], kernel: &RbfKernel) -> f64 {
    let g = kernel.gamma;
    let r2 = sq_dist(x, y);
    let k = (-g * r2).exp();
    let cross: f64 = x
        .iter()
        .zip(y)
        .zip(sx.iter().zip(sy))
        .map(|((a, b), (s, t))| (a - b) * (s - t))
        .sum();
    k * (dot(sx, sy) + 2.0 * g * cross + 2.0 * g * x.len() as f64 - 4.0 * g * g * r2)
}

pub fn u_q(x: &[f64], y: &[f64], score_q: &dyn ScoreField, kernel: &RbfKernel) -> f64 {
    u_q_with_scores(x, y, &score_q.score(x), &score_q.score(y), kernel)
}

/// The symmetric matrix `U_ij = u_q(x_i, x_j)`.
pub fn u_matrix(
    samples: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    kernel: &RbfKernel,
) -> Array2<f64> {
    let g = kernel.gamma;
    let d = samples.ncols() as f64;
    let sq: Array1<f64> = samples.map_axis(Axis(1), |r| r.dot(&r));
    let xs_diag: Array1<f64> = samples
        .rows()
        .into_iter()
        .zip(scores.rows())
        .map(|(x, s)| x.dot(&s))
        .collect();
    let xx = samples.dot(&samples.t());
    let ss = scores.dot(&scores.t());
    let xs = samples.dot(&scores.t());
    let n = samples.nrows();
    let mut u = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let r2 = (sq[i] + sq[j] - 2.0 * xx[[i, j]]).max(0.0);
            // (x_i − x_j)·(s_i − s_j)
            let cross = xs_diag[i] + xs_diag[j] - xs[[i, j]] - xs[[j, i]];
            let k = (-g * r2).exp();
            let v = k * (ss[[i, j]] + 2.0 * g * cross + 2.0 * g * d - 4.0 * g * g * r2);
            u[[i, j]] = v;
            u[[j, i]] = v;
        }
    }
    u
}

/// `(1/n²) Σ_ij u_q(x_i, x_j)`, diagonal included.
pub fn v_statistic_from_u(u: &Array2<f64>) -> f64 {
    let n = u.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let row = u.row(i);
        let mut r = 0.0;
        for j in 0..n {
            r += row[j];
        }
        acc += r;
    }
    acc / (n * n) as f64
}

pub fn v_statistic(
    samples: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    kernel: &RbfKernel,
) -> f64 {
    let scores = score_q.score_batch(samples);
    v_statistic_from_u(&u_matrix(samples, scores.view(), kernel))
}

/// Median of the pairwise distances over `i < j`. Zero distances between
/// distinct indices count; self-pairs do not. Even counts average the two
/// middle values.
pub fn median_distance(samples: ArrayView2<'_, f64>) -> Result<f64, KsdError> {
    let n = samples.nrows();
    if n < 2 {
        return Err(KsdError::TooFewSamples(2));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let xi = samples.row(i);
        for j in (i + 1)..n {
            let xj = samples.row(j);
            dists.push(
                xi.iter()
                    .zip(xj.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    let m = dists.len();
    let med = if m % 2 == 1 {
        *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1
    } else {
        let hi = *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1;
        let lo = dists[..m / 2]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if med <= 0.0 {
        return Err(KsdError::ZeroBandwidth);
    }
    Ok(med)
}

pub fn median_bandwidth(samples: ArrayView2<'_, f64>) -> Result<RbfKernel, KsdError> {
    Ok(RbfKernel::from_sigma(median_distance(samples)?))
}

/// `(1/n²) wᵀ U w` for each row `w` of `multipliers` (`B × n`). The
/// summation order matches [`v_statistic_from_u`], so `w ≡ 1` reproduces the
/// statistic bit for bit.
pub fn wild_bootstrap_with(u: &Array2<f64>, multipliers: &Array2<f64>) -> Vec<f64> {
    let n = u.nrows();
    multipliers
        .rows()
        .into_iter()
        .map(|w| {
            let mut acc = 0.0;
            for i in 0..n {
                let row = u.row(i);
                let mut r = 0.0;
                for j in 0..n {
                    r += row[j] * w[j];
                }
                acc += w[i] * r;
            }
            acc / (n * n) as f64
        })
        .collect()
}

/// `n_boot` wild-bootstrap statistics with i.i.d. Rademacher multipliers.
pub fn wild_bootstrap_stats(u: &Array2<f64>, n_boot: usize, rng: &mut Rng) -> Vec<f64> {
    let mut w = Array2::<f64>::zeros((n_boot, u.nrows()));
    fill_rademacher(rng, w.as_slice_mut().expect("standard layout"));
    wild_bootstrap_with(u, &w)
}

/// V-statistic test with a wild-bootstrap threshold at level `α`.
pub fn ksd_test_with_scores(
    samples: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    kernel: &RbfKernel,
    alpha: f64,
    n_boot: usize,
    rng: &mut Rng,
) -> TestOutcome {
    let u = u_matrix(samples, scores, kernel);
    let stat = v_statistic_from_u(&u);
    let boot = wild_bootstrap_stats(&u, n_boot, rng);
    TestOutcome::new(stat, threshold(&boot, alpha), None)
}

pub fn ksd_test(
    samples: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    kernel: &RbfKernel,
    alpha: f64,
    n_boot: usize,
    rng: &mut Rng,
) -> TestOutcome {
    let scores = score_q.score_batch(samples);
    ksd_test_with_scores(samples, scores.view(), kernel, alpha, n_boot, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub power_mean: f64,
    pub power_std: f64,
    /// Mean median-heuristic σ over the tests.
    pub sigma: f64,
    /// `1/(2δσ²)` at the mean σ.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Wall-clock seconds spent on U matrices and statistics.
    pub statistic_time: Duration,
    pub bootstrap_time: Duration,
}

impl SweepResult {
    pub fn best_delta(&self) -> Option<f64> {
        self.rows
            .iter()
            .max_by(|a, b| {
                a.power_mean
                    .total_cmp(&b.power_mean)
                    .then(b.delta.total_cmp(&a.delta))
            })
            .map(|r| r.delta)
    }

    /// `delta,power_mean,power_std,sigma,gamma`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "delta,power_mean,power_std,sigma,gamma")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.delta, r.power_mean, r.power_std, r.sigma, r.gamma
            )?;
        }
        Ok(())
    }
}

/// The default bandwidth grid `2^-6, …, 2^2`.
pub fn default_delta_grid() -> Vec<f64> {
    (-6..=2).map(|e| 2f64.powi(e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsdPowerConfig {
    pub n_samples: usize,
    pub alpha: f64,
    pub n_boot: usize,
    pub n_run: usize,
    pub n_replica: usize,
}

/// Rejection rates of the KSD test for each bandwidth scale `δ`.
///
/// Every test draws `n_samples` from `p`, takes the median heuristic σ of that
/// sample and evaluates all `δ` on the same data. Replica `k` groups runs
/// `k·n_run .. (k+1)·n_run`; means and standard deviations are over replicas.
pub fn bandwidth_sweep(
    p: &(dyn Sampler + Sync),
    q: &dyn NullModel,
    deltas: &[f64],
    cfg: &KsdPowerConfig,
    seed: u64,
) -> Result<SweepResult, KsdError> {
    if deltas.is_empty() || deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(KsdError::Config(
            "delta grid must be nonempty and positive".into(),
        ));
    }
    if cfg.n_samples < 2 {
        return Err(KsdError::TooFewSamples(2));
    }
    if cfg.n_run == 0
        || cfg.n_replica == 0
        || cfg.n_boot == 0
        || !(cfg.alpha > 0.0 && cfg.alpha < 1.0)
    {
        return Err(KsdError::Config(
            "n_run, n_replica, n_boot must be positive and alpha in (0,1)".into(),
        ));
    }
    let total = cfg.n_run * cfg.n_replica;
    let runs: Vec<Result<(f64, Vec<bool>, Duration, Duration), KsdError>> = (0..total)
        .into_par_iter()
        .map(|r| {
            let mut rng = child(seed, r as u64);
            let xs = p.sample(cfg.n_samples, &mut rng);
            let t0 = Instant::now();
            let sigma = median_distance(xs.view())?;
            let scores = q.score_batch(xs.view());
            let mut t_stat = t0.elapsed();
            let mut t_boot = Duration::ZERO;
            let mut rejects = Vec::with_capacity(deltas.len());
            for &delta in deltas {
                let kernel = RbfKernel::scaled(sigma, delta);
                let t1 = Instant::now();
                let u = u_matrix(xs.view(), scores.view(), &kernel);
                let stat = v_statistic_from_u(&u);
                t_stat += t1.elapsed();
                let t2 = Instant::now();
                // keyed by δ itself so a row does not depend on the rest of the grid
                let mut brng = child(derive_seed(seed, r as u64), delta.to_bits());
                let boot = wild_bootstrap_stats(&u, cfg.n_boot, &mut brng);
                rejects.push(stat > threshold(&boot, cfg.alpha));
                t_boot += t2.elapsed();
            }
            Ok((sigma, rejects, t_stat, t_boot))
        })
        .collect();
    let runs: Vec<_> = runs.into_iter().collect::<Result<_, _>>()?;
    let sigma_mean = runs.iter().map(|r| r.0).sum::<f64>() / total as f64;
    let rows = deltas
        .iter()
        .enumerate()
        .map(|(k, &delta)| {
            let powers: Vec<f64> = runs
                .chunks(cfg.n_run)
                .map(|c| c.iter().filter(|r| r.1[k]).count() as f64 / cfg.n_run as f64)
                .collect();
            let (power_mean, power_std) = mean_std(&powers);
            SweepRow {
                delta,
                power_mean,
                power_std,
                sigma: sigma_mean,
                gamma: 1.0 / (2.0 * delta * sigma_mean * sigma_mean),
            }
        })
        .collect();
    Ok(SweepResult {
        rows,
        statistic_time: runs.iter().map(|r| r.2).sum(),
        bootstrap_time: runs.iter().map(|r| r.3).sum(),
    })
}

/// One median-heuristic test, as used for calibration studies.
pub fn median_heuristic_test(
    samples: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    alpha: f64,
    n_boot: usize,
    rng: &mut Rng,
) -> Result<TestOutcome, KsdError> {
    let kernel = median_bandwidth(samples)?;
    Ok(ksd_test(samples, score_q, &kernel, alpha, n_boot, rng))
}
