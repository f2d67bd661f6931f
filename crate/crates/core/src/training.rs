//! Mini-batch training of the critic under fixed, staged or adaptive λ
//! schedules, with monitor-based model selection.
//!
//! A run consumes `n_tr + n_val` rows of `p`-samples: the first `n_tr` rows are
//! the training split and the following `n_val` rows the fixed validation
//! split on which the monitor is evaluated every `B_w` batches.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{row_sq_norms, DivMode, MlpCritic};
use crate::distributions::{OptimalCritic, ScoreField};
use crate::metrics::mse_against;
use crate::rng::{child, derive_seed};
use crate::stein::critic_terms;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("need {need} p-samples, got {got}")]
    NotEnoughSamples { need: usize, got: usize },
    #[error("sample dimension {got} does not match the model dimension {want}")]
    Dimension { want: usize, got: usize },
}

/// Policy for the regularization weight over batch intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    Fixed {
        lambda: f64,
    },
    /// `Λ(i) = max(λ_init β^i, λ_term)` on the `i`-th interval.
    Staged {
        lambda_init: f64,
        lambda_term: f64,
        beta: f64,
    },
    /// Stage down by `β` when the monitor increases, but only after it has
    /// improved at least once within the current stage.
    Adaptive {
        lambda_init: f64,
        lambda_term: f64,
        beta: f64,
    },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        match *self {
            LambdaSchedule::Fixed { lambda } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return bad("fixed lambda must be positive");
                }
            }
            LambdaSchedule::Staged {
                lambda_init,
                lambda_term,
                beta,
            }
            | LambdaSchedule::Adaptive {
                lambda_init,
                lambda_term,
                beta,
            } => {
                if !(lambda_term > 0.0 && lambda_init.is_finite()) {
                    return bad("lambda_term must be positive");
                }
                if lambda_term > lambda_init {
                    return bad("lambda_term must not exceed lambda_init");
                }
                if !(beta > 0.0 && beta < 1.0) {
                    return bad("beta must lie in (0, 1)");
                }
            }
        }
        Ok(())
    }

    pub fn initial_lambda(&self) -> f64 {
        match *self {
            LambdaSchedule::Fixed { lambda } => lambda,
            LambdaSchedule::Staged { lambda_init, .. }
            | LambdaSchedule::Adaptive { lambda_init, .. } => lambda_init,
        }
    }

    /// λ on interval `i` for the non-adaptive variants. The adaptive variant
    /// depends on the monitor history; here it returns its starting value.
    pub fn lambda_at(&self, i: usize) -> f64 {
        match *self {
            LambdaSchedule::Fixed { lambda } => lambda,
            LambdaSchedule::Staged {
                lambda_init,
                lambda_term,
                beta,
            } => {
                if i == 0 {
                    lambda_init
                } else {
                    (lambda_init * beta.powi(i.min(i32::MAX as usize) as i32)).max(lambda_term)
                }
            }
            LambdaSchedule::Adaptive { lambda_init, .. } => lambda_init,
        }
    }

    /// Short identifier used in result tables.
    pub fn id(&self) -> String {
        match *self {
            LambdaSchedule::Fixed { lambda } => format!("fixed({lambda:e})"),
            LambdaSchedule::Staged {
                lambda_init,
                lambda_term,
                beta,
            } => {
                format!("staged({lambda_init:e},{lambda_term:e},{beta})")
            }
            LambdaSchedule::Adaptive {
                lambda_init,
                lambda_term,
                beta,
            } => {
                format!("adaptive({lambda_init:e},{lambda_term:e},{beta})")
            }
        }
    }
}

/// Running state of an adaptive schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub lambda: f64,
    pub lambda_term: f64,
    pub beta: f64,
    previous: Option<f64>,
    improved: bool,
}

impl AdaptiveState {
    pub fn new(lambda_init: f64, lambda_term: f64, beta: f64) -> Self {
        AdaptiveState {
            lambda: lambda_init,
            lambda_term,
            beta,
            previous: None,
            improved: false,
        }
    }

    /// Feed the monitor observed at the end of an interval; returns λ for the
    /// next interval.
    pub fn step(&mut self, monitor: f64) -> f64 {
        if let Some(prev) = self.previous {
            if monitor > prev && self.improved {
                self.lambda = (self.beta * self.lambda).max(self.lambda_term);
                self.improved = false;
            } else if monitor < prev {
                self.improved = true;
            }
        }
        self.previous = Some(monitor);
        self.lambda
    }
}

/// Bias-corrected Adam with the usual default moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter length mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_tr: usize,
    /// Validation rows following the training split. Zero evaluates the
    /// monitor on the training split.
    pub n_val: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub schedule: LambdaSchedule,
    /// Batches per λ interval (`B_w`); `None` means one epoch.
    #[serde(default)]
    pub batches_per_interval: Option<usize>,
    /// `None` picks the default for the dimension.
    #[serde(default)]
    pub div_mode: Option<DivMode>,
    pub width: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n_tr == 0 {
            return bad("n_tr must be positive");
        }
        if self.batch_size == 0 || self.batch_size > self.n_tr {
            return bad("batch_size must lie in 1..=n_tr");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        if self.batches_per_interval == Some(0) {
            return bad("batches_per_interval must be positive");
        }
        if let Some(DivMode::Hutchinson { probes: 0 }) = self.div_mode {
            return bad("hutchinson probes must be positive");
        }
        self.schedule.validate()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_tr.div_ceil(self.batch_size)
    }

    pub fn interval_len(&self) -> usize {
        self.batches_per_interval
            .unwrap_or_else(|| self.batches_per_epoch())
    }

    pub fn total_batches(&self) -> usize {
        self.batches_per_epoch() * self.epochs
    }

    pub fn div_mode_for(&self, dim: usize) -> DivMode {
        self.div_mode.unwrap_or_else(|| DivMode::default_for(dim))
    }
}

/// Samples from `q` paired with `f*` on them, for logging `MSE_q`.
#[derive(Debug, Clone)]
pub struct CurveOracle {
    pub q_samples: Array2<f64>,
    pub f_star: Array2<f64>,
}

impl CurveOracle {
    pub fn new(f_star: &OptimalCritic<'_>, q_samples: Array2<f64>) -> Self {
        let fs = f_star.eval_batch(q_samples.view());
        CurveOracle {
            q_samples,
            f_star: fs,
        }
    }
}

/// One row of the training curves, taken at the end of an interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRecord {
    pub interval: usize,
    /// Fractional epochs completed.
    pub epoch: f64,
    pub batches: usize,
    /// λ in force during the interval; the monitor uses the same value.
    pub lambda: f64,
    pub monitor: f64,
    pub mse_q: Option<f64>,
    /// Mean witness on the validation split.
    pub sd: f64,
}

/// A critic snapshot with its position in the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub critic: MlpCritic,
    pub lambda: f64,
    pub interval: usize,
    pub monitor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IntervalRecord>,
    /// Minimizer of the logged monitor.
    pub best: Option<Snapshot>,
    pub last: Option<Snapshot>,
    pub diverged: bool,
    pub diagnostic: Option<String>,
    pub div_mode: DivMode,
    pub batches_run: usize,
}

impl TrainReport {
    pub fn best_monitor(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.monitor)
    }

    /// `interval,epoch,lambda,monitor,mse_q,sd` with `mse_q` empty when no
    /// oracle was supplied.
    pub fn write_curves_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "interval,epoch,lambda,monitor,mse_q,sd")?;
        for r in &self.records {
            let mse = r.mse_q.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{:e},{:e},{},{:e}",
                r.interval, r.epoch, r.lambda, r.monitor, mse, r.sd
            )?;
        }
        Ok(())
    }
}

/// Monitor `2λ·L̂` and mean witness on a sample set with precomputed scores.
pub fn monitor_and_sd(
    critic: &MlpCritic,
    samples: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    lambda: f64,
    mode: DivMode,
    probe_seed: u64,
) -> (f64, f64) {
    let (f, div) = critic_terms(critic, samples, mode, probe_seed);
    let sq = row_sq_norms(&f);
    let n = samples.nrows() as f64;
    let mut loss = 0.0;
    let mut sd = 0.0;
    for (((fi, si), d), s2) in f
        .rows()
        .into_iter()
        .zip(scores.rows())
        .zip(div.iter())
        .zip(sq.iter())
    {
        let w = fi.iter().zip(si.iter()).map(|(a, b)| a * b).sum::<f64>() + d;
        loss += -w + 0.5 * lambda * s2;
        sd += w;
    }
    (2.0 * lambda * (loss / n), sd / n)
}

/// Train a freshly initialized critic.
///
/// Everything random derives from `config.seed`: the initialization, the
/// per-epoch shuffles, the training probes and the fixed validation probes.
pub fn train(
    p_samples: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    config: &TrainConfig,
    oracle: Option<&CurveOracle>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let d = score_q.dim();
    let critic = MlpCritic::init(d, config.width, &mut child(config.seed, 0));
    train_from(critic, p_samples, score_q, config, oracle)
}

/// Train starting from the given critic (which may be output-centered).
pub fn train_from(
    mut critic: MlpCritic,
    p_samples: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    config: &TrainConfig,
    oracle: Option<&CurveOracle>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let d = score_q.dim();
    if p_samples.ncols() != d || critic.dim() != d {
        return Err(TrainError::Dimension {
            want: d,
            got: p_samples.ncols(),
        });
    }
    let need = config.n_tr + config.n_val;
    if p_samples.nrows() < need {
        return Err(TrainError::NotEnoughSamples {
            need,
            got: p_samples.nrows(),
        });
    }
    let mode = config.div_mode_for(d);
    let train_x = p_samples.slice(s![..config.n_tr, ..]);
    let train_s = score_q.score_batch(train_x);
    let (val_x, val_s) = if config.n_val == 0 {
        (train_x, train_s.clone())
    } else {
        let v = p_samples.slice(s![config.n_tr..need, ..]);
        (v, score_q.score_batch(v))
    };

    let mut shuffle_rng = child(config.seed, 1);
    let mut probe_rng = child(config.seed, 2);
    let val_probe_seed = derive_seed(config.seed, 3);

    let mut params = critic.params();
    let mut adam = AdamState::new(params.len());
    let mut adaptive = match config.schedule {
        LambdaSchedule::Adaptive {
            lambda_init,
            lambda_term,
            beta,
        } => Some(AdaptiveState::new(lambda_init, lambda_term, beta)),
        _ => None,
    };

    let per_epoch = config.batches_per_epoch();
    let interval_len = config.interval_len();
    let total = config.total_batches();
    let mut lambda = config.schedule.initial_lambda();
    let mut interval = 0usize;
    let mut done = 0usize;
    let mut report = TrainReport {
        records: Vec::with_capacity(total.div_ceil(interval_len)),
        best: None,
        last: None,
        diverged: false,
        diagnostic: None,
        div_mode: mode,
        batches_run: 0,
    };
    let mut order: Vec<usize> = (0..config.n_tr).collect();
    let mut bx = Array2::<f64>::zeros((config.batch_size, d));
    let mut bs = Array2::<f64>::zeros((config.batch_size, d));

    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let m = chunk.len();
            if bx.nrows() != m {
                bx = Array2::zeros((m, d));
                bs = Array2::zeros((m, d));
            }
            for (r, &i) in chunk.iter().enumerate() {
                bx.row_mut(r).assign(&train_x.row(i));
                bs.row_mut(r).assign(&train_s.row(i));
            }
            let grad = match critic.loss_and_grad_with_scores(
                bx.view(),
                bs.view(),
                lambda,
                mode,
                &mut probe_rng,
            ) {
                Ok((_, g)) => g,
                Err(e) => {
                    report.diverged = true;
                    report.diagnostic = Some(format!("batch {done} at lambda {lambda:e}: {e}"));
                    break 'epochs;
                }
            };
            match config.optimizer {
                OptimizerKind::Adam => adam.update(&mut params.0, &grad.0, config.lr),
                OptimizerKind::Sgd => {
                    for (p, g) in params.0.iter_mut().zip(&grad.0) {
                        *p -= config.lr * g;
                    }
                }
            }
            critic
                .set_params(&params)
                .expect("parameter length is fixed");
            done += 1;

            if done % interval_len == 0 || done == total {
                let (monitor, sd) =
                    monitor_and_sd(&critic, val_x, val_s.view(), lambda, mode, val_probe_seed);
                if !monitor.is_finite() {
                    report.diverged = true;
                    report.diagnostic = Some(format!(
                        "non-finite monitor after batch {done} at lambda {lambda:e}"
                    ));
                    break 'epochs;
                }
                let mse_q = oracle
                    .map(|o| mse_against(&critic, lambda, o.f_star.view(), o.q_samples.view()));
                report.records.push(IntervalRecord {
                    interval,
                    epoch: done as f64 / per_epoch as f64,
                    batches: done,
                    lambda,
                    monitor,
                    mse_q,
                    sd,
                });
                let snap = || Snapshot {
                    critic: critic.clone(),
                    lambda,
                    interval,
                    monitor,
                };
                if report.best.as_ref().is_none_or(|b| monitor < b.monitor) {
                    report.best = Some(snap());
                }
                interval += 1;
                lambda = match adaptive.as_mut() {
                    Some(a) => a.step(monitor),
                    None => config.schedule.lambda_at(interval),
                };
            }
        }
    }
    report.batches_run = done;
    if report.records.last().is_some_and(|r| r.batches == done) {
        let r = report.records.last().expect("checked above");
        report.last = Some(Snapshot {
            critic,
            lambda: r.lambda,
            interval: r.interval,
            monitor: r.monitor,
        });
    }
    Ok(report)
}
