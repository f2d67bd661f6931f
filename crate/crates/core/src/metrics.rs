//! Evaluation metrics: oracle MSEs against `f*`, the oracle-free monitor, and
//! the witness-based power proxy.

use ndarray::ArrayView2;
use serde::Serialize;
use thiserror::Error;

use crate::critic::{row_sq_norms, DivMode, MlpCritic};
use crate::distributions::{OptimalCritic, ScoreField};
use crate::stein::{empirical_loss_with_scores, mean, witness_batch};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("witness spread {0:e} is below the degeneracy guard")]
    DegenerateWitness(f64),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// A named scalar, serialized as `{name, value, n, lambda}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub lambda: f64,
}

/// `(1/n) Σ ‖λ f(x_i) − f*(x_i)‖²` against precomputed `f*` values.
pub fn mse_against(
    critic: &MlpCritic,
    lambda: f64,
    f_star_values: ArrayView2<'_, f64>,
    samples: ArrayView2<'_, f64>,
) -> f64 {
    let mut diff = critic.forward_batch(samples) * lambda;
    diff -= &f_star_values;
    row_sq_norms(&diff).mean().expect("nonempty sample set")
}

/// MSE against `f*` on samples from `q`.
pub fn mse_q_hat(
    critic: &MlpCritic,
    lambda: f64,
    f_star: &OptimalCritic<'_>,
    q_samples: ArrayView2<'_, f64>,
) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let fs = f_star.eval_batch(q_samples);
    mse_against(critic, lambda, fs.view(), q_samples)
}

/// MSE against `f*` on samples from `p`.
pub fn mse_p_hat(
    critic: &MlpCritic,
    lambda: f64,
    f_star: &OptimalCritic<'_>,
    p_samples: ArrayView2<'_, f64>,
) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let fs = f_star.eval_batch(p_samples);
    mse_against(critic, lambda, fs.view(), p_samples)
}

/// `2λ · L̂_λ` on `p` samples: equals `MSE_p − ‖f*‖²` in expectation without
/// needing `f*`.
pub fn monitor_mse(
    critic: &MlpCritic,
    lambda: f64,
    score_q: &dyn ScoreField,
    p_samples: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let scores = score_q.score_batch(p_samples);
    monitor_mse_with_scores(critic, lambda, p_samples, scores.view(), mode, probe_seed)
}

pub fn monitor_mse_with_scores(
    critic: &MlpCritic,
    lambda: f64,
    p_samples: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    2.0 * lambda * empirical_loss_with_scores(critic, p_samples, scores, lambda, mode, probe_seed)
}

/// The f*-weighted form of the objective on a sample set,
/// `(1/n) Σ (−⟨f*(x_i), f(x_i)⟩ + (λ/2)‖f(x_i)‖²)`.
///
/// On any sample set `2λ` times this equals `MSE_p̂ − (1/n)Σ‖f*(x_i)‖²`
/// exactly. The Stein-operator monitor agrees with it only in expectation; the
/// per-sample gap is `2λ·(1/n)Σ T_p f(x_i)`, see [`stein_gap`].
pub fn oracle_objective(
    critic: &MlpCritic,
    lambda: f64,
    f_star_values: ArrayView2<'_, f64>,
    samples: ArrayView2<'_, f64>,
) -> f64 {
    let f = critic.forward_batch(samples);
    let n = samples.nrows() as f64;
    f.rows()
        .into_iter()
        .zip(f_star_values.rows())
        .map(|(fi, gi)| {
            let fg: f64 = fi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
            let ff: f64 = fi.iter().map(|a| a * a).sum();
            -fg + 0.5 * lambda * ff
        })
        .sum::<f64>()
        / n
}

/// `2λ·(1/n) Σ T_p f(x_i)`: the sample-level difference
/// `MSE_p̂ − monitor − (1/n)Σ‖f*‖²`, which vanishes in expectation under `p`.
pub fn stein_gap(
    critic: &MlpCritic,
    lambda: f64,
    score_p: &dyn ScoreField,
    p_samples: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    2.0 * lambda * witness_batch(critic, score_p, p_samples, mode, probe_seed).mean()
}

/// Denominator floor for [`power_proxy_from_witness`].
pub const POWER_PROXY_EPS: f64 = 1e-12;

/// `σ(w) = (1/n) √Σ (w_i − w̄)²`.
pub fn witness_spread(w: &[f64]) -> f64 {
    let m = mean(w);
    w.iter().map(|v| (v - m).powi(2)).sum::<f64>().sqrt() / w.len() as f64
}

/// `w̄_p / (σ(w_p) + σ(w_q))`.
pub fn power_proxy_from_witness(w_p: &[f64], w_q: &[f64]) -> Result<f64, MetricError> {
    for w in [w_p, w_q] {
        if w.len() < 2 {
            return Err(MetricError::TooFewSamples {
                need: 2,
                got: w.len(),
            });
        }
    }
    let denom = witness_spread(w_p) + witness_spread(w_q);
    if denom < POWER_PROXY_EPS {
        return Err(MetricError::DegenerateWitness(denom));
    }
    Ok(mean(w_p) / denom)
}

pub fn power_proxy(
    critic: &MlpCritic,
    score_q: &dyn ScoreField,
    p_samples: ArrayView2<'_, f64>,
    q_samples: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> Result<f64, MetricError> {
    let wp = witness_batch(critic, score_q, p_samples, mode, probe_seed);
    let wq = witness_batch(critic, score_q, q_samples, mode, probe_seed.wrapping_add(1));
    power_proxy_from_witness(&wp.values, &wq.values)
}
