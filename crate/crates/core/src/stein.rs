//! Stein operator evaluation: witness values `T_q f(x) = s_q(x)·f(x) + ∇·f(x)`,
//! discrepancy estimates and the empirical L²-regularized objective.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};

use crate::critic::{draw_probes, row_sq_norms, DivMode, MlpCritic};
use crate::distributions::ScoreField;
use crate::rng::{child, Rng};

/// Witness values of one critic on one sample set.
///
/// Bootstrap procedures reuse these many times, so they are computed once and
/// carried around together with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessBatch {
    pub values: Vec<f64>,
    /// Free-form label for the sample set (e.g. `"null_pool"`).
    pub source: String,
    /// Free-form label for the critic (e.g. checkpoint path or interval).
    pub checkpoint: String,
    pub div_mode: DivMode,
}

impl WitnessBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// `index,witness` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,witness")?;
        for (i, w) in self.values.iter().enumerate() {
            writeln!(out, "{i},{w}")?;
        }
        Ok(())
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-row probe matrices for Hutchinson mode. Row `i` of the batch always
/// receives the probes drawn from stream `(probe_seed, i)`.
fn fixed_probes(n: usize, d: usize, probes: usize, probe_seed: u64) -> Vec<Array2<f64>> {
    let mut mats = vec![Array2::zeros((n, d)); probes];
    for i in 0..n {
        let mut rng = child(probe_seed, i as u64);
        let row = draw_probes(1, d, probes, &mut rng);
        for (m, r) in mats.iter_mut().zip(row) {
            m.row_mut(i).assign(&r.row(0));
        }
    }
    mats
}

/// Outputs `f(x_i)` and divergences for a sample set.
pub fn critic_terms(
    critic: &MlpCritic,
    samples: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> (Array2<f64>, Array1<f64>) {
    match mode {
        DivMode::Exact => critic.outputs_and_divergence(samples, None),
        DivMode::Hutchinson { probes } => {
            let p = fixed_probes(samples.nrows(), samples.ncols(), probes.max(1), probe_seed);
            critic.outputs_and_divergence(samples, Some(&p))
        }
    }
}

fn witness_from_terms(f: &Array2<f64>, div: &Array1<f64>, scores: ArrayView2<'_, f64>) -> Vec<f64> {
    f.rows()
        .into_iter()
        .zip(scores.rows())
        .zip(div.iter())
        .map(|((fi, si), d)| fi.iter().zip(si.iter()).map(|(a, b)| a * b).sum::<f64>() + d)
        .collect()
}

/// `T_q f(x)` at a single point. Hutchinson mode draws probes from `rng`.
pub fn witness(
    critic: &MlpCritic,
    score_q: &dyn ScoreField,
    x: &[f64],
    mode: DivMode,
    rng: &mut Rng,
) -> f64 {
    let s = score_q.score(x);
    let f = critic.forward(x);
    let div = match mode {
        DivMode::Exact => critic.divergence_exact(x),
        DivMode::Hutchinson { probes } => critic.divergence_hutchinson(x, probes.max(1), rng),
    };
    s.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + div
}

/// Witness values with precomputed scores.
pub fn witness_values_with_scores(
    critic: &MlpCritic,
    samples: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> Vec<f64> {
    let (f, div) = critic_terms(critic, samples, mode, probe_seed);
    witness_from_terms(&f, &div, scores)
}

/// Witness values on a sample set, evaluated in chunks so very large pools do
/// not materialize `n × h` activations at once.
pub fn witness_batch(
    critic: &MlpCritic,
    score_q: &dyn ScoreField,
    samples: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> WitnessBatch {
    const CHUNK: usize = 4096;
    let n = samples.nrows();
    let mut values = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let part = samples.slice(ndarray::s![start..end, ..]);
        let scores = score_q.score_batch(part);
        let (f, div) = match mode {
            DivMode::Exact => critic.outputs_and_divergence(part, None),
            DivMode::Hutchinson { probes } => {
                // keep the per-row probe streams aligned with global row indices
                let mut mats = vec![Array2::zeros(part.raw_dim()); probes.max(1)];
                for i in 0..part.nrows() {
                    let mut rng = child(probe_seed, (start + i) as u64);
                    let row = draw_probes(1, part.ncols(), probes.max(1), &mut rng);
                    for (m, r) in mats.iter_mut().zip(row) {
                        m.row_mut(i).assign(&r.row(0));
                    }
                }
                critic.outputs_and_divergence(part, Some(&mats))
            }
        };
        values.extend(witness_from_terms(&f, &div, scores.view()));
        start = end;
    }
    WitnessBatch {
        values,
        source: String::new(),
        checkpoint: String::new(),
        div_mode: mode,
    }
}

/// Sample-average estimate of `SD[f] = E_p[T_q f]`.
pub fn sd_estimate(
    critic: &MlpCritic,
    score_q: &dyn ScoreField,
    samples: ArrayView2<'_, f64>,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    assert!(samples.nrows() >= 1, "need at least one sample");
    witness_batch(critic, score_q, samples, mode, probe_seed).mean()
}

/// `(1/n) Σ (−T_q f(x_i) + (λ/2)‖f(x_i)‖²)` with precomputed scores.
pub fn empirical_loss_with_scores(
    critic: &MlpCritic,
    samples: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    lambda: f64,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    let (f, div) = critic_terms(critic, samples, mode, probe_seed);
    let w = witness_from_terms(&f, &div, scores);
    let sq = row_sq_norms(&f);
    let n = samples.nrows() as f64;
    w.iter()
        .zip(sq.iter())
        .map(|(wi, s)| -wi + 0.5 * lambda * s)
        .sum::<f64>()
        / n
}

pub fn empirical_loss(
    critic: &MlpCritic,
    samples: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    lambda: f64,
    mode: DivMode,
    probe_seed: u64,
) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let scores = score_q.score_batch(samples);
    empirical_loss_with_scores(critic, samples, scores.view(), lambda, mode, probe_seed)
}
