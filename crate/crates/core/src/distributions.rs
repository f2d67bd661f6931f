//! Sampleable models with exact score functions.
//!
//! Scores are `∇ log density`. Mixture responsibilities are computed in log
//! space so the score stays finite far in the tails.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("component {component}: {reason}")]
    BadComponent { component: usize, reason: String },
    #[error("covariance of component {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// A map `x ↦ ∇ log q(x)` on `R^d`.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn score_into(&self, x: &[f64], out: &mut [f64]);

    fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, &mut out);
        out
    }

    /// Row-wise scores of an `n × d` sample matrix.
    fn score_batch(&self, xs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(xs.raw_dim());
        for (x, mut o) in xs.rows().into_iter().zip(out.rows_mut()) {
            let x = x.to_vec();
            self.score_into(&x, o.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Log-density, possibly up to an additive constant. `None` when unavailable.
    fn log_density(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn has_log_density(&self) -> bool {
        false
    }

    fn can_sample(&self) -> bool {
        false
    }
}

pub trait Sampler: Send + Sync {
    fn sample_dim(&self) -> usize;

    /// `n × d` matrix of draws; deterministic given the stream state.
    fn sample(&self, n: usize, rng: &mut Rng) -> Array2<f64>;
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    /// Lower Cholesky factor, row-major `d × d`.
    chol: Vec<f64>,
    /// Σ⁻¹, row-major `d × d`.
    precision: Vec<f64>,
    /// `-d/2 log 2π - log det L`.
    log_norm: f64,
}

/// Finite mixture of multivariate normals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    covariances: Vec<Vec<f64>>,
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Covariances are full row-major `d × d` matrices.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<Self, DistributionError> {
        if weights.is_empty() {
            return Err(DistributionError::Empty);
        }
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(DistributionError::Dimension(format!(
                "{} weights, {} means, {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || (total - 1.0).abs() > 1e-12 {
            return Err(DistributionError::BadWeights(total));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(DistributionError::Dimension("zero-dimensional mean".into()));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (k, ((w, mean), cov)) in weights.iter().zip(&means).zip(&covariances).enumerate() {
            if mean.len() != dim || cov.len() != dim * dim {
                return Err(DistributionError::BadComponent {
                    component: k,
                    reason: format!("expected mean of length {dim} and {dim}x{dim} covariance"),
                });
            }
            for i in 0..dim {
                for j in 0..i {
                    if (cov[i * dim + j] - cov[j * dim + i]).abs() > 1e-12 {
                        return Err(DistributionError::BadComponent {
                            component: k,
                            reason: "covariance is not symmetric".into(),
                        });
                    }
                }
            }
            let sigma = DMatrix::from_row_slice(dim, dim, cov);
            let chol = sigma
                .clone()
                .cholesky()
                .ok_or(DistributionError::NotPositiveDefinite(k))?;
            let l = chol.l();
            let precision = chol.inverse();
            let log_det_l: f64 = (0..dim).map(|i| l[(i, i)].ln()).sum();
            components.push(Component {
                log_weight: w.ln(),
                mean: mean.clone(),
                chol: row_major(&l),
                precision: row_major(&precision),
                log_norm: -0.5 * dim as f64 * LN_2PI - log_det_l,
            });
        }
        Ok(Self {
            dim,
            weights,
            covariances,
            components,
        })
    }

    /// Single normal `N(mean, cov)`.
    pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self, DistributionError> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.components[k].mean
    }

    pub fn covariance(&self, k: usize) -> &[f64] {
        &self.covariances[k]
    }

    pub fn precision(&self, k: usize) -> &[f64] {
        &self.components[k].precision
    }

    /// Per-component log joint `log w_k + log N(x; μ_k, Σ_k)`, written to `out`.
    fn component_log_joint(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim;
        for (c, o) in self.components.iter().zip(out.iter_mut()) {
            if c.log_weight == f64::NEG_INFINITY {
                *o = f64::NEG_INFINITY;
                continue;
            }
            // forward substitution L y = x - μ
            for i in 0..d {
                let mut acc = x[i] - c.mean[i];
                for j in 0..i {
                    acc -= c.chol[i * d + j] * scratch[j];
                }
                scratch[i] = acc / c.chol[i * d + i];
            }
            let quad: f64 = scratch[..d].iter().map(|v| v * v).sum();
            *o = c.log_weight + c.log_norm - 0.5 * quad;
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut lj = vec![0.0; self.components.len()];
        let mut scratch = vec![0.0; self.dim];
        self.component_log_joint(x, &mut lj, &mut scratch);
        log_sum_exp(&lj)
    }

    /// `Σ_k r_k(x) Σ_k⁻¹ (μ_k − x)` with log-space responsibilities.
    pub fn score_at(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut lj = vec![0.0; self.components.len()];
        let mut scratch = vec![0.0; d];
        self.component_log_joint(x, &mut lj, &mut scratch);
        let lse = log_sum_exp(&lj);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, l) in self.components.iter().zip(&lj) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += c.precision[i * d + j] * (c.mean[j] - x[j]);
                }
                out[i] += r * acc;
            }
        }
    }
}

impl ScoreField for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.score_at(x, out)
    }

    fn log_density(&self, x: &[f64]) -> Option<f64> {
        Some(GaussianMixture::log_density(self, x))
    }

    fn has_log_density(&self) -> bool {
        true
    }

    fn can_sample(&self) -> bool {
        true
    }
}

impl Sampler for GaussianMixture {
    fn sample_dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.dim;
        let mut out = Array2::zeros((n, d));
        let mut z = vec![0.0; d];
        for mut row in out.rows_mut() {
            let u: f64 = rng.random();
            let mut k = self.weights.len() - 1;
            let mut acc = 0.0;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc && *w > 0.0 {
                    k = i;
                    break;
                }
            }
            // trailing zero-weight components are never chosen by the fallback
            while self.weights[k] == 0.0 && k > 0 {
                k -= 1;
            }
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let c = &self.components[k];
            for i in 0..d {
                let mut acc = c.mean[i];
                for j in 0..=i {
                    acc += c.chol[i * d + j] * z[j];
                }
                row[i] = acc;
            }
        }
        out
    }
}

/// The two-component mixtures used throughout the experiments.
///
/// `q`: equal weights, means `0` and `0.5·1`, identity covariances.
/// `p`: same means; the first component has correlation `ρ₁` in the first two
/// coordinates, the second has variance `ω²` on the first axis and covariance
/// `ω·ρ₂` with `ρ₂ = −ρ₁`.
pub fn make_paper_mixture(
    dim: usize,
    rho1: f64,
    omega: f64,
) -> Result<(GaussianMixture, GaussianMixture), DistributionError> {
    if dim < 2 {
        return Err(DistributionError::Parameter(format!(
            "dimension must be at least 2, got {dim}"
        )));
    }
    if !(rho1.abs() < 1.0) || !(omega > 0.0) {
        return Err(DistributionError::Parameter(format!(
            "need |rho1| < 1 and omega > 0 (rho1 = {rho1}, omega = {omega})"
        )));
    }
    let identity = |d: usize| {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    };
    let mu1 = vec![0.0; dim];
    let mu2 = vec![0.5; dim];
    let rho2 = -rho1;

    let mut c1 = identity(dim);
    // `+ 0.0` normalizes -0.0 so ρ₁ = 0, ω = 1 reproduces q bit-for-bit
    c1[1] = rho1 + 0.0;
    c1[dim] = rho1 + 0.0;
    let mut c2 = identity(dim);
    c2[0] = omega * omega;
    c2[1] = omega * rho2 + 0.0;
    c2[dim] = omega * rho2 + 0.0;

    let p = GaussianMixture::new(vec![0.5, 0.5], vec![mu1.clone(), mu2.clone()], vec![c1, c2])?;
    let q = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![mu1, mu2],
        vec![identity(dim), identity(dim)],
    )?;
    Ok((p, q))
}

/// The 1D bimodal pair with an analytic optimal critic.
///
/// `q`: equal mixture of `N(−1, 1)` and `N(1, 1)`.
/// `p`: equal mixture of `N(−0.8, 1)` and `N(1, 0.25)`.
pub fn bimodal_1d_pair() -> (GaussianMixture, GaussianMixture) {
    let p = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-0.8], vec![1.0]],
        vec![vec![1.0], vec![0.25]],
    )
    .expect("valid mixture");
    let q = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-1.0], vec![1.0]],
        vec![vec![1.0], vec![1.0]],
    )
    .expect("valid mixture");
    (p, q)
}

/// Gauss-Bernoulli RBM with hidden units in `{−1, +1}`.
///
/// Energy `E(x, h) = −xᵀBh − bᵀx − cᵀh + ½‖x‖²`, so that
/// `s(x) = b − x + B tanh(Bᵀx + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussBernoulliRbm {
    /// `d × H`, row-major.
    coupling: Vec<f64>,
    visible_bias: Vec<f64>,
    hidden_bias: Vec<f64>,
}

impl GaussBernoulliRbm {
    pub fn new(
        coupling: Vec<f64>,
        visible_bias: Vec<f64>,
        hidden_bias: Vec<f64>,
    ) -> Result<Self, DistributionError> {
        let d = visible_bias.len();
        let h = hidden_bias.len();
        if d == 0 || h == 0 || coupling.len() != d * h {
            return Err(DistributionError::Dimension(format!(
                "coupling has {} entries, expected {d} x {h}",
                coupling.len()
            )));
        }
        if coupling
            .iter()
            .chain(&visible_bias)
            .chain(&hidden_bias)
            .any(|v| !v.is_finite())
        {
            return Err(DistributionError::Parameter(
                "non-finite RBM parameter".into(),
            ));
        }
        Ok(Self {
            coupling,
            visible_bias,
            hidden_bias,
        })
    }

    /// Coupling entries i.i.d. `N(0, scale²)`, biases `N(0, 1)`.
    pub fn random(dim: usize, hidden: usize, scale: f64, rng: &mut Rng) -> Self {
        let coupling = (0..dim * hidden)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let visible_bias = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let hidden_bias = (0..hidden).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(coupling, visible_bias, hidden_bias).expect("consistent dims")
    }

    pub fn visible_dim(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn visible_bias(&self) -> &[f64] {
        &self.visible_bias
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.hidden_bias
    }

    /// `Bᵀx + c`.
    fn hidden_field(&self, x: &[f64]) -> Vec<f64> {
        let h = self.hidden_dim();
        let mut a = self.hidden_bias.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.coupling[i * h..(i + 1) * h];
            for (aj, bij) in a.iter_mut().zip(row) {
                *aj += bij * xi;
            }
        }
        a
    }

    /// `bᵀx − ½‖x‖² + Σ_j log 2cosh((Bᵀx + c)_j)`: the log of the unnormalized marginal.
    pub fn log_density_unnormalized(&self, x: &[f64]) -> f64 {
        let lin: f64 = self
            .visible_bias
            .iter()
            .zip(x)
            .map(|(b, xi)| b * xi - 0.5 * xi * xi)
            .sum();
        let hidden: f64 = self.hidden_field(x).iter().map(|a| log_2cosh(*a)).sum();
        lin + hidden
    }

    pub fn score_at(&self, x: &[f64], out: &mut [f64]) {
        let h = self.hidden_dim();
        let t: Vec<f64> = self.hidden_field(x).iter().map(|a| a.tanh()).collect();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.coupling[i * h..(i + 1) * h];
            let bt: f64 = row.iter().zip(&t).map(|(b, t)| b * t).sum();
            *o = self.visible_bias[i] - x[i] + bt;
        }
    }

    /// `n` independent block-Gibbs chains started from `N(b, I)`, each run for
    /// `sweeps` sweeps; the final state of each chain is returned.
    pub fn gibbs_sample(&self, n: usize, sweeps: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.visible_dim();
        let hd = self.hidden_dim();
        let mut out = Array2::zeros((n, d));
        let mut x = vec![0.0; d];
        let mut hs = vec![0.0; hd];
        for mut row in out.rows_mut() {
            for (xi, b) in x.iter_mut().zip(&self.visible_bias) {
                *xi = b + rng.sample::<f64, _>(StandardNormal);
            }
            for _ in 0..sweeps.max(1) {
                let a = self.hidden_field(&x);
                for (hj, aj) in hs.iter_mut().zip(&a) {
                    let p_up = sigmoid(2.0 * aj);
                    *hj = if rng.random::<f64>() < p_up {
                        1.0
                    } else {
                        -1.0
                    };
                }
                for i in 0..d {
                    let row_b = &self.coupling[i * hd..(i + 1) * hd];
                    let mean: f64 = self.visible_bias[i]
                        + row_b.iter().zip(&hs).map(|(b, h)| b * h).sum::<f64>();
                    x[i] = mean + rng.sample::<f64, _>(StandardNormal);
                }
            }
            for (o, xi) in row.iter_mut().zip(&x) {
                *o = *xi;
            }
        }
        out
    }
}

impl ScoreField for GaussBernoulliRbm {
    fn dim(&self) -> usize {
        self.visible_dim()
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.score_at(x, out)
    }

    fn log_density(&self, x: &[f64]) -> Option<f64> {
        Some(self.log_density_unnormalized(x))
    }

    fn has_log_density(&self) -> bool {
        true
    }

    fn can_sample(&self) -> bool {
        true
    }
}

/// Any distribution the experiment runner can use as `p` or `q`.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mixture(GaussianMixture),
    Rbm {
        rbm: GaussBernoulliRbm,
        gibbs_sweeps: usize,
    },
}

impl ScoreField for Model {
    fn dim(&self) -> usize {
        match self {
            Model::Mixture(m) => m.dim,
            Model::Rbm { rbm, .. } => rbm.visible_dim(),
        }
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Model::Mixture(m) => m.score_at(x, out),
            Model::Rbm { rbm, .. } => rbm.score_at(x, out),
        }
    }

    fn log_density(&self, x: &[f64]) -> Option<f64> {
        match self {
            Model::Mixture(m) => Some(m.log_density(x)),
            Model::Rbm { rbm, .. } => Some(rbm.log_density_unnormalized(x)),
        }
    }

    fn has_log_density(&self) -> bool {
        true
    }

    fn can_sample(&self) -> bool {
        true
    }
}

impl Sampler for Model {
    fn sample_dim(&self) -> usize {
        ScoreField::dim(self)
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        match self {
            Model::Mixture(m) => m.sample(n, rng),
            Model::Rbm { rbm, gibbs_sweeps } => rbm.gibbs_sample(n, *gibbs_sweeps, rng),
        }
    }
}

/// The scaleless optimal critic `f* = s_q − s_p`.
#[derive(Clone, Copy)]
pub struct OptimalCritic<'a> {
    pub p: &'a dyn ScoreField,
    pub q: &'a dyn ScoreField,
}

impl<'a> OptimalCritic<'a> {
    pub fn new(p: &'a dyn ScoreField, q: &'a dyn ScoreField) -> Result<Self, DistributionError> {
        if p.dim() != q.dim() {
            return Err(DistributionError::Dimension(format!(
                "p has dimension {}, q has {}",
                p.dim(),
                q.dim()
            )));
        }
        Ok(Self { p, q })
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let sq = self.q.score(x);
        let sp = self.p.score(x);
        sq.iter().zip(&sp).map(|(a, b)| a - b).collect()
    }

    pub fn eval_batch(&self, xs: ArrayView2<'_, f64>) -> Array2<f64> {
        self.q.score_batch(xs) - self.p.score_batch(xs)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_2cosh(a: f64) -> f64 {
    let a = a.abs();
    a + (-2.0 * a).exp().ln_1p()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}
