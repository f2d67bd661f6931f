//! Config-driven experiment commands. Each command is a pure function of the
//! resolved config to the files it writes; wall-clock timings go to separate
//! files so the main artifacts stay byte-identical across re-runs.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::critic::{DivMode, MlpCritic};
use crate::distributions::{Model, OptimalCritic, Sampler, ScoreField};
use crate::gof::{
    self, estimate_power, fresh_null_stats, null_pool, test_with_pool, PowerSummary, TestOutcome,
};
use crate::ksd::{bandwidth_sweep, KsdPowerConfig};
use crate::ntk::{lazy_deviation, median_final_dev, write_lazy_csv};
use crate::rng::{child, derive_seed};
use crate::stein::witness_batch;
use crate::training::{train, CurveOracle, TrainReport};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Compute(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Diverged(_) => "diverged",
            CliError::Compute(_) => "compute",
            CliError::Io(_) => "io",
            CliError::Checkpoint(_) => "checkpoint",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Compute(_) => 4,
            CliError::Io(_) | CliError::Checkpoint(_) => 5,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "message": self.to_string()}).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Gof,
    Power,
    Ksd,
    Ntk,
    SweepSplit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Gof => "gof",
            Command::Power => "power",
            Command::Ksd => "ksd",
            Command::Ntk => "ntk",
            Command::SweepSplit => "sweep-split",
        }
    }
}

/// Validates the config, creates the output directory and runs `cmd`.
/// Returns the `result.json` value.
pub fn run(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let (p, q) = cfg.validate()?;
    fs::create_dir_all(out)?;
    match cmd {
        Command::Train => cmd_train(cfg, &p, &q, out),
        Command::Gof => cmd_gof(cfg, &p, &q, out),
        Command::Power => cmd_power(cfg, &p, &q, out),
        Command::Ksd => cmd_ksd(cfg, &p, &q, out),
        Command::Ntk => cmd_ntk(cfg, out),
        Command::SweepSplit => cmd_sweep_split(cfg, &p, &q, out),
    }
}

/// Output directory: the `--out` override, else the config's `out_dir`.
pub fn resolve_out(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
}

fn write_with<F>(path: PathBuf, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn write_result(
    out: &Path,
    cmd: Command,
    cfg: &ExperimentConfig,
    mut body: Value,
) -> Result<Value, CliError> {
    let obj = body.as_object_mut().expect("result body is an object");
    obj.insert("command".into(), json!(cmd.name()));
    obj.insert(
        "config".into(),
        serde_json::to_value(cfg).expect("config serializes"),
    );
    let mut text = serde_json::to_string_pretty(&body).expect("result serializes");
    text.push('\n');
    fs::write(out.join("result.json"), text)?;
    Ok(body)
}

fn compute<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Compute(e.to_string())
}

/// Training data from `child(seed, 0)`, oracle `q` samples from
/// `child(seed, 1)`, training seed `derive_seed(seed, 2)`.
fn train_critic(cfg: &ExperimentConfig, p: &Model, q: &Model) -> Result<TrainReport, CliError> {
    let tcfg = cfg.train_config(derive_seed(cfg.seed, 2));
    let xs = p.sample(tcfg.n_tr + tcfg.n_val, &mut child(cfg.seed, 0));
    let oracle = if cfg.train.n_te > 0 {
        let fs = OptimalCritic::new(p, q).map_err(compute)?;
        Some(CurveOracle::new(
            &fs,
            q.sample(cfg.train.n_te, &mut child(cfg.seed, 1)),
        ))
    } else {
        None
    };
    train(xs.view(), q, &tcfg, oracle.as_ref()).map_err(compute)
}

fn cmd_train(cfg: &ExperimentConfig, p: &Model, q: &Model, out: &Path) -> Result<Value, CliError> {
    let report = train_critic(cfg, p, q)?;
    write_with(out.join("curves.csv"), |b| report.write_curves_csv(b))?;
    let lineage = vec![cfg.seed, 2];
    for (name, snap) in [("model_best", &report.best), ("model_final", &report.last)] {
        if let Some(s) = snap {
            Checkpoint {
                critic: s.critic.clone(),
                lambda: s.lambda,
                interval: s.interval,
                monitor: s.monitor,
                seed_lineage: lineage.clone(),
            }
            .save(&out.join(format!("{name}.ckpt")))?;
        }
    }
    let bpe = cfg.train_config(0).batches_per_epoch();
    let best_record = report
        .best
        .as_ref()
        .and_then(|b| report.records.iter().find(|r| r.interval == b.interval));
    let body = json!({
        "best_monitor": report.best.as_ref().map(|b| b.monitor),
        "best_interval": report.best.as_ref().map(|b| b.interval),
        "best_lambda": report.best.as_ref().map(|b| b.lambda),
        "best_mse_q": best_record.and_then(|r| r.mse_q),
        "epochs_run": report.batches_run as f64 / bpe as f64,
        "batches_run": report.batches_run,
        "intervals": report.records.len(),
        "div_mode": report.div_mode,
        "diverged": report.diverged,
        "diagnostic": report.diagnostic,
    });
    let body = write_result(out, Command::Train, cfg, body)?;
    if report.diverged {
        return Err(CliError::Diverged(
            report
                .diagnostic
                .unwrap_or_else(|| "non-finite loss".into()),
        ));
    }
    Ok(body)
}

/// Test samples from `child(seed, 3)`, probes from `derive_seed(seed, 4)`,
/// null statistics from `child(seed, 5)` and `child(seed, 6)`.
fn cmd_gof(cfg: &ExperimentConfig, p: &Model, q: &Model, out: &Path) -> Result<Value, CliError> {
    let d = q.dim();
    let (critic, mode, source): (MlpCritic, DivMode, String) = match &cfg.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(Path::new(path))?;
            if ck.critic.dim() != d {
                return Err(CliError::Config(format!(
                    "checkpoint has dimension {}, distribution has {d}",
                    ck.critic.dim()
                )));
            }
            (
                ck.critic,
                cfg.train.div_mode.unwrap_or(DivMode::default_for(d)),
                path.clone(),
            )
        }
        None => {
            let report = train_critic(cfg, p, q)?;
            if report.diverged {
                return Err(CliError::Diverged(report.diagnostic.unwrap_or_default()));
            }
            let best = report
                .best
                .ok_or_else(|| CliError::Compute("no checkpoint selected".into()))?;
            (
                best.critic,
                report.div_mode,
                format!("interval {}", best.interval),
            )
        }
    };
    let g = &cfg.gof;
    let xs = p.sample(g.n_gof, &mut child(cfg.seed, 3));
    let mut wb = witness_batch(&critic, q, xs.view(), mode, derive_seed(cfg.seed, 4));
    wb.source = "p_test".into();
    wb.checkpoint = source;
    let stat = wb.mean();
    let outcome = if g.reuse_pool {
        let pool = null_pool(&critic, q, g.n_pool(), mode, &mut child(cfg.seed, 5));
        test_with_pool(stat, &pool.values, g, true, &mut child(cfg.seed, 6))
    } else {
        let stats = fresh_null_stats(&critic, q, g.n_gof, g.n_boot, mode, &mut child(cfg.seed, 5));
        TestOutcome::new(stat, gof::threshold(&stats, g.alpha), Some(stats))
    };
    write_with(out.join("witness.csv"), |b| wb.write_csv(b))?;
    write_with(out.join("null_stats.csv"), |b| {
        writeln!(b, "index,statistic")?;
        for (i, s) in outcome.null_stats.iter().flatten().enumerate() {
            writeln!(b, "{i},{s}")?;
        }
        Ok(())
    })?;
    let body = json!({
        "statistic": outcome.statistic,
        "threshold": outcome.threshold,
        "reject": outcome.reject,
        "n_gof": g.n_gof,
        "alpha": g.alpha,
        "critic": wb.checkpoint,
        "div_mode": mode,
    });
    write_result(out, Command::Gof, cfg, body)
}

fn power_body(s: &PowerSummary) -> Value {
    json!({
        "power_mean": s.mean,
        "power_std": s.std,
        "schedule_id": s.schedule_id,
        "replicas": s.replicas,
    })
}

fn cmd_power(cfg: &ExperimentConfig, p: &Model, q: &Model, out: &Path) -> Result<Value, CliError> {
    let summary = estimate_power(
        &cfg.train_config(0),
        p,
        q,
        &cfg.gof,
        cfg.power.n_run,
        cfg.power.n_replica,
        cfg.seed,
    )
    .map_err(compute)?;
    write_with(out.join("power.csv"), |b| summary.write_csv(b))?;
    write_result(out, Command::Power, cfg, power_body(&summary))
}

fn cmd_ksd(cfg: &ExperimentConfig, p: &Model, q: &Model, out: &Path) -> Result<Value, CliError> {
    let k = &cfg.ksd;
    let pc = KsdPowerConfig {
        n_samples: k.n_samples,
        alpha: cfg.gof.alpha,
        n_boot: k.n_boot,
        n_run: k.n_run,
        n_replica: k.n_replica,
    };
    let sweep = bandwidth_sweep(p, q, &k.deltas, &pc, cfg.seed).map_err(compute)?;
    write_with(out.join("ksd.csv"), |b| sweep.write_csv(b))?;
    write_with(out.join("ksd_timing.csv"), |b| {
        writeln!(b, "statistic_seconds,bootstrap_seconds,tests")?;
        writeln!(
            b,
            "{},{},{}",
            sweep.statistic_time.as_secs_f64(),
            sweep.bootstrap_time.as_secs_f64(),
            k.n_run * k.n_replica
        )
    })?;
    let body = json!({
        "best_delta": sweep.best_delta(),
        "rows": sweep.rows.iter().map(|r| json!({
            "delta": r.delta,
            "power_mean": r.power_mean,
            "power_std": r.power_std,
            "sigma": r.sigma,
            "gamma": r.gamma,
        })).collect::<Vec<_>>(),
    });
    write_result(out, Command::Ksd, cfg, body)
}

fn cmd_ntk(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let reports = lazy_deviation(&cfg.ntk, cfg.seed).map_err(compute)?;
    write_with(out.join("lazy.csv"), |b| write_lazy_csv(&reports, b))?;
    let medians = median_final_dev(&reports, &cfg.ntk.lambdas);
    let body = json!({
        "lambdas": cfg.ntk.lambdas,
        "median_final_dev": medians,
        "mu_max": reports.iter().map(|r| r.mu_max).collect::<Vec<_>>(),
    });
    write_result(out, Command::Ntk, cfg, body)
}

/// Every fraction uses the same master seed, so the splits differ only in
/// where the sample is cut.
fn cmd_sweep_split(
    cfg: &ExperimentConfig,
    p: &Model,
    q: &Model,
    out: &Path,
) -> Result<Value, CliError> {
    let mut rows = Vec::new();
    for &f in &cfg.split.fractions {
        let sizes = cfg.split.sizes(f);
        let mut tcfg = cfg.train_config(0);
        tcfg.n_tr = sizes.n_tr;
        tcfg.n_val = sizes.n_val;
        tcfg.batch_size = tcfg.batch_size.min(sizes.n_tr);
        let mut g = cfg.gof;
        g.n_gof = sizes.n_gof;
        let s = estimate_power(
            &tcfg,
            p,
            q,
            &g,
            cfg.power.n_run,
            cfg.power.n_replica,
            cfg.seed,
        )
        .map_err(compute)?;
        rows.push((f, sizes, s));
    }
    write_with(out.join("split_power.csv"), |b| {
        writeln!(b, "fraction,n_tr,n_val,n_gof,power_mean,power_std")?;
        for (f, z, s) in &rows {
            writeln!(
                b,
                "{f},{},{},{},{},{}",
                z.n_tr, z.n_val, z.n_gof, s.mean, s.std
            )?;
        }
        Ok(())
    })?;
    let body = json!({
        "rows": rows.iter().map(|(f, z, s)| json!({
            "fraction": f,
            "n_tr": z.n_tr,
            "n_val": z.n_val,
            "n_gof": z.n_gof,
            "power_mean": s.mean,
            "power_std": s.std,
        })).collect::<Vec<_>>(),
    });
    write_result(out, Command::SweepSplit, cfg, body)
}
