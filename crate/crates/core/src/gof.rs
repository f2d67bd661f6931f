//! Goodness-of-fit testing with a trained critic: the test statistic, fresh
//! and pool-based bootstrap null distributions, thresholds and power.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{DivMode, MlpCritic};
use crate::distributions::{Sampler, ScoreField};
use crate::rng::{child, derive_seed, Rng};
use crate::stein::{witness_batch, WitnessBatch};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error, PartialEq)]
pub enum GofError {
    #[error("invalid test configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GofConfig {
    pub n_gof: usize,
    pub alpha: f64,
    pub n_boot: usize,
    pub r_pool: usize,
    /// Build one pool per replica and share it across that replica's runs.
    #[serde(default = "default_true")]
    pub reuse_pool: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GofConfig {
    fn default() -> Self {
        GofConfig {
            n_gof: 100,
            alpha: 0.05,
            n_boot: 500,
            r_pool: 50,
            reuse_pool: true,
        }
    }
}

impl GofConfig {
    pub fn validate(&self) -> Result<(), GofError> {
        let bad = |m: &str| Err(GofError::Config(m.to_string()));
        if self.n_gof == 0 {
            return bad("n_gof must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.n_boot == 0 {
            return bad("n_boot must be positive");
        }
        if self.r_pool == 0 {
            return bad("r_pool must be positive");
        }
        Ok(())
    }

    pub fn n_pool(&self) -> usize {
        self.r_pool * self.n_gof
    }
}

/// Sampleable model with a score: what the null side of a test needs.
pub trait NullModel: ScoreField + Sampler + Sync {}
impl<T: ScoreField + Sampler + Sync> NullModel for T {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_stats: Option<Vec<f64>>,
}

impl TestOutcome {
    pub fn new(statistic: f64, threshold: f64, null_stats: Option<Vec<f64>>) -> Self {
        TestOutcome {
            statistic,
            threshold,
            reject: statistic > threshold,
            null_stats,
        }
    }
}

/// `T̂ = (1/n) Σ T_q f(x_i)` on the test samples.
pub fn test_statistic(
    critic: &MlpCritic,
    score_q: &dyn ScoreField,
    test_samples: ndarray::ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    witness_batch(critic, score_q, test_samples, mode, probe_seed).mean()
}

/// Witness values on `n_pool` fresh samples from `q`.
pub fn null_pool(
    critic: &MlpCritic,
    q: &dyn NullModel,
    n_pool: usize,
    mode: DivMode,
    rng: &mut Rng,
) -> WitnessBatch {
    let ys = q.sample(n_pool, rng);
    let probe_seed: u64 = rng.random();
    let mut wb = witness_batch(critic, q, ys.view(), mode, probe_seed);
    wb.source = "null_pool".to_string();
    wb
}

/// Means of `n_gof` draws with replacement from the pool, `n_boot` times.
pub fn efficient_null_stats(pool: &[f64], n_gof: usize, n_boot: usize, rng: &mut Rng) -> Vec<f64> {
    assert!(!pool.is_empty(), "empty witness pool");
    let n = pool.len();
    (0..n_boot)
        .map(|_| {
            (0..n_gof)
                .map(|_| pool[rng.random_range(0..n)])
                .sum::<f64>()
                / n_gof as f64
        })
        .collect()
}

/// `n_boot` statistics, each on `n_gof` new samples from `q`.
pub fn fresh_null_stats(
    critic: &MlpCritic,
    q: &dyn NullModel,
    n_gof: usize,
    n_boot: usize,
    mode: DivMode,
    rng: &mut Rng,
) -> Vec<f64> {
    let ys = q.sample(n_gof * n_boot, rng);
    let probe_seed: u64 = rng.random();
    let w = witness_batch(critic, q, ys.view(), mode, probe_seed);
    w.values
        .chunks(n_gof)
        .map(|c| c.iter().sum::<f64>() / n_gof as f64)
        .collect()
}

/// Rank of the `(1 − α)` order statistic among `n`, 1-based: `⌈(1 − α) n⌉`
/// clamped to `1..=n`.
pub fn threshold_rank(n: usize, alpha: f64) -> usize {
    // the nudge keeps products such as 0.95·100 from rounding up a rank
    let r = ((1.0 - alpha) * n as f64 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n)
}

/// The `⌈(1 − α) n⌉`-th smallest null statistic.
pub fn threshold(null_stats: &[f64], alpha: f64) -> f64 {
    assert!(!null_stats.is_empty(), "no null statistics");
    let mut s = null_stats.to_vec();
    s.sort_by(f64::total_cmp);
    s[threshold_rank(s.len(), alpha) - 1]
}

/// One test against a precomputed pool.
pub fn test_with_pool(
    statistic: f64,
    pool: &[f64],
    cfg: &GofConfig,
    keep_null: bool,
    rng: &mut Rng,
) -> TestOutcome {
    let stats = efficient_null_stats(pool, cfg.n_gof, cfg.n_boot, rng);
    let t = threshold(&stats, cfg.alpha);
    TestOutcome::new(statistic, t, keep_null.then_some(stats))
}

/// Full test: statistic on the `p` samples, a fresh pool from `q`, and the
/// pool-bootstrap threshold.
pub fn run_test(
    critic: &MlpCritic,
    q: &dyn NullModel,
    p_test: ndarray::ArrayView2<'_, f64>,
    cfg: &GofConfig,
    mode: DivMode,
    rng: &mut Rng,
) -> TestOutcome {
    assert_eq!(p_test.nrows(), cfg.n_gof, "test set size must equal n_gof");
    let probe_seed: u64 = rng.random();
    let stat = test_statistic(critic, q, p_test, mode, probe_seed);
    let pool = null_pool(critic, q, cfg.n_pool(), mode, rng);
    test_with_pool(stat, &pool.values, cfg, true, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaPower {
    pub replica: usize,
    pub seed: u64,
    /// `None` when training diverged before any checkpoint was selected.
    pub power: Option<f64>,
    pub rejections: usize,
    pub n_run: usize,
    pub best_monitor: Option<f64>,
    pub best_lambda: Option<f64>,
    pub best_interval: Option<usize>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSummary {
    pub replicas: Vec<ReplicaPower>,
    pub mean: f64,
    /// Sample standard deviation over successful replicas.
    pub std: f64,
    pub n_gof: usize,
    pub alpha: f64,
    pub schedule_id: String,
}

impl PowerSummary {
    /// `replica,power,n_run,n_GoF,alpha,schedule_id`; failed replicas have an
    /// empty power field.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "replica,power,n_run,n_GoF,alpha,schedule_id")?;
        for r in &self.replicas {
            let p = r.power.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.replica, p, r.n_run, self.n_gof, self.alpha, self.schedule_id
            )?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// Rejection frequency of `n_run` tests of a fixed critic, each on a fresh
/// `p` test set. With `reuse_pool` the `shared_pool` provides every null
/// distribution; otherwise each run draws its own pool.
#[allow(clippy::too_many_arguments)]
pub fn rejection_rate(
    critic: &MlpCritic,
    p: &(dyn Sampler + Sync),
    q: &dyn NullModel,
    cfg: &GofConfig,
    mode: DivMode,
    n_run: usize,
    shared_pool: Option<&[f64]>,
    seed: u64,
) -> usize {
    (0..n_run)
        .into_par_iter()
        .map(|j| {
            let mut rng = child(seed, j as u64);
            let xs = p.sample(cfg.n_gof, &mut rng);
            let probe_seed: u64 = rng.random();
            let stat = test_statistic(critic, q, xs.view(), mode, probe_seed);
            let out = match shared_pool {
                Some(pool) if cfg.reuse_pool => test_with_pool(stat, pool, cfg, false, &mut rng),
                _ => {
                    let pool = null_pool(critic, q, cfg.n_pool(), mode, &mut rng);
                    test_with_pool(stat, &pool.values, cfg, false, &mut rng)
                }
            };
            out.reject as usize
        })
        .sum()
}

/// Monte-Carlo power over `n_replica` independently trained critics.
///
/// Replica `k` uses `seed_k = derive_seed(seed, k)`: it draws its own training
/// split from `p`, trains with that seed, keeps the monitor-selected critic,
/// and runs `n_run` tests on fresh `p` test sets.
pub fn estimate_power(
    train_cfg: &TrainConfig,
    p: &(dyn Sampler + Sync),
    q: &dyn NullModel,
    gof: &GofConfig,
    n_run: usize,
    n_replica: usize,
    seed: u64,
) -> Result<PowerSummary, GofError> {
    gof.validate()?;
    train_cfg.validate()?;
    if n_run == 0 || n_replica == 0 {
        return Err(GofError::Config(
            "n_run and n_replica must be positive".into(),
        ));
    }
    let replicas: Vec<ReplicaPower> = (0..n_replica)
        .map(|k| -> Result<ReplicaPower, GofError> {
            let seed_k = derive_seed(seed, k as u64);
            let mut cfg = train_cfg.clone();
            cfg.seed = derive_seed(seed_k, 1);
            let xs = p.sample(cfg.n_tr + cfg.n_val, &mut child(seed_k, 0));
            let report = train(xs.view(), q, &cfg, None)?;
            let mut rp = ReplicaPower {
                replica: k,
                seed: seed_k,
                power: None,
                rejections: 0,
                n_run,
                best_monitor: report.best.as_ref().map(|b| b.monitor),
                best_lambda: report.best.as_ref().map(|b| b.lambda),
                best_interval: report.best.as_ref().map(|b| b.interval),
                diverged: report.diverged,
            };
            if report.diverged {
                return Ok(rp);
            }
            let Some(best) = report.best else {
                return Ok(rp);
            };
            let pool = if gof.reuse_pool {
                Some(
                    null_pool(
                        &best.critic,
                        q,
                        gof.n_pool(),
                        report.div_mode,
                        &mut child(seed_k, 2),
                    )
                    .values,
                )
            } else {
                None
            };
            let rej = rejection_rate(
                &best.critic,
                p,
                q,
                gof,
                report.div_mode,
                n_run,
                pool.as_deref(),
                derive_seed(seed_k, 3),
            );
            rp.rejections = rej;
            rp.power = Some(rej as f64 / n_run as f64);
            Ok(rp)
        })
        .collect::<Result<_, _>>()?;
    let ok: Vec<f64> = replicas.iter().filter_map(|r| r.power).collect();
    let (mean, std) = mean_std(&ok);
    Ok(PowerSummary {
        replicas,
        mean,
        std,
        n_gof: gof.n_gof,
        alpha: gof.alpha,
        schedule_id: train_cfg.schedule.id(),
    })
}

/// Two-sample Kolmogorov-Smirnov distance `sup |F_a − F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}
