//! Lazy-training diagnostics: the zero-time matrix NTK on a set of reference
//! points, its eigen-system, the kernel dynamics of `ū` and their comparison
//! with full-batch gradient descent on the network.
//!
//! Point-valued quantities are stacked row-major: entry `i·d + j` is
//! coordinate `j` at point `i`. Expectations over `p` are replaced by averages
//! over the `n` reference points, so the kernel operator is `(1/n)·G`.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::MlpCritic;
use crate::distributions::{make_paper_mixture, OptimalCritic, Sampler};
use crate::rng::{child, derive_seed};

#[derive(Debug, Error, PartialEq)]
pub enum NtkError {
    #[error(
        "dense eigensolve limited to n·d ≤ {max}, got {got}; reduce the number of reference points"
    )]
    TooLarge { got: usize, max: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("kernel ODE integration is unstable (norm {0:e}); reduce the step size")]
    Unstable(f64),
    #[error("gradient descent diverged at step {0}")]
    Diverged(usize),
    #[error("critic must be output-centered so that u(·, 0) = 0")]
    NotCentered,
    #[error("invalid NTK configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Distribution(String),
}

/// Largest `n·d` accepted by [`eig_sym_psd`].
pub const MAX_DENSE: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct NtkGram {
    pub points: Array2<f64>,
    /// `(n·d) × (n·d)`, block `(i, j)` equal to `∂_θf(x_i) ∂_θf(x_j)ᵀ`.
    pub gram: Array2<f64>,
    pub width: usize,
    pub param_count: usize,
}

impl NtkGram {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn block(&self, i: usize, j: usize) -> ArrayView2<'_, f64> {
        let d = self.dim();
        self.gram.slice(s![i * d..(i + 1) * d, j * d..(j + 1) * d])
    }
}

/// Stacked parameter Jacobian, `(n·d) × M_Θ`.
pub fn stacked_jacobian(critic: &MlpCritic, points: ArrayView2<'_, f64>) -> Array2<f64> {
    let d = critic.dim();
    let n = points.nrows();
    let mut jac = Array2::zeros((n * d, critic.param_count()));
    for (i, x) in points.rows().into_iter().enumerate() {
        let ji = critic.param_jacobian(&x.to_vec());
        jac.slice_mut(s![i * d..(i + 1) * d, ..]).assign(&ji);
    }
    jac
}

pub fn ntk_gram(critic: &MlpCritic, points: ArrayView2<'_, f64>) -> NtkGram {
    let jac = stacked_jacobian(critic, points);
    let mut gram = jac.dot(&jac.t());
    symmetrize(&mut gram);
    NtkGram {
        points: points.to_owned(),
        gram,
        width: critic.width(),
        param_count: critic.param_count(),
    }
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Eigen-decomposition of `(1/n)·G`, eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigSystem {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub vectors: Array2<f64>,
}

impl EigSystem {
    pub fn max_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// Number of eigenvalues above `rel · μ_max`.
    pub fn rank(&self, rel: f64) -> usize {
        let cut = rel * self.max_value();
        self.values.iter().filter(|&&v| v > cut).count()
    }

    /// Coefficients `c_k = ⟨v_k, g⟩` of a stacked vector.
    pub fn coefficients(&self, g: &[f64]) -> Vec<f64> {
        self.vectors.t().dot(&ArrayView1::from(g)).to_vec()
    }

    /// Share of `‖g‖²` outside the leading `m` eigenvectors.
    pub fn tail_mass(&self, g: &[f64], m: usize) -> f64 {
        let c = self.coefficients(g);
        let total: f64 = c.iter().map(|v| v * v).sum();
        if total == 0.0 {
            return 0.0;
        }
        c.iter().skip(m).map(|v| v * v).sum::<f64>() / total
    }
}

/// Full symmetric eigensolve of `(1/n)·G`. Eigenvalues within `−1e-10·μ_max`
/// of zero are clamped to zero.
pub fn eig_sym_psd(gram: &Array2<f64>, n: usize) -> Result<EigSystem, NtkError> {
    let m = gram.nrows();
    if m > MAX_DENSE {
        return Err(NtkError::TooLarge {
            got: m,
            max: MAX_DENSE,
        });
    }
    assert!(
        n >= 1 && gram.ncols() == m,
        "square Gram and n ≥ 1 required"
    );
    let scale = gram.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..m {
        for j in 0..i {
            asym = asym.max((gram[[i, j]] - gram[[j, i]]).abs());
        }
    }
    if asym > 1e-10 * scale.max(1.0) {
        return Err(NtkError::NotSymmetric(asym));
    }
    let inv_n = 1.0 / n as f64;
    let mat = DMatrix::from_fn(m, m, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]) * inv_n);
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = order
        .first()
        .map(|&k| eig.eigenvalues[k])
        .unwrap_or(0.0)
        .max(0.0);
    let mut values = Vec::with_capacity(m);
    let mut vectors = Array2::zeros((m, m));
    for (c, &k) in order.iter().enumerate() {
        let v = eig.eigenvalues[k];
        values.push(if v < 0.0 && v >= -1e-10 * top { 0.0 } else { v });
        for r in 0..m {
            vectors[[r, c]] = eig.eigenvectors[(r, k)];
        }
    }
    Ok(EigSystem { values, vectors })
}

/// Forward-Euler integration of `dv/dt = −(1/n)·G·(λv − f*)` from `v = 0`.
///
/// Returns the stacked `ū` after each requested number of steps (sorted
/// ascending); time is `steps · η`.
pub fn kernel_ode_euler(
    gram: &Array2<f64>,
    n: usize,
    f_star: &[f64],
    lambda: f64,
    eta: f64,
    steps_at: &[usize],
) -> Result<Vec<Vec<f64>>, NtkError> {
    assert!(
        steps_at.windows(2).all(|w| w[0] <= w[1]),
        "steps must be sorted"
    );
    let m = gram.nrows();
    assert_eq!(f_star.len(), m, "f* length must equal n·d");
    let fs = ArrayView1::from(f_star);
    let bound = 1e8 * (1.0 + fs.dot(&fs).sqrt() / lambda);
    let k = eta / n as f64;
    let mut v = Array1::<f64>::zeros(m);
    let mut out = Vec::with_capacity(steps_at.len());
    let mut step = 0usize;
    for &target in steps_at {
        while step < target {
            let r = &v * lambda - &fs;
            v.scaled_add(-k, &gram.dot(&r));
            step += 1;
        }
        let norm = v.dot(&v).sqrt();
        if !(norm <= bound) {
            return Err(NtkError::Unstable(norm));
        }
        out.push(v.to_vec());
    }
    Ok(out)
}

/// Closed form of the kernel dynamics: `λū(t) − f*` has coefficient
/// `−c_k e^{−tλμ_k}` on `v_k`, so `λū(t) = Σ_k c_k (1 − e^{−tλμ_k}) v_k`.
pub fn spectral_solution(eig: &EigSystem, f_star: &[f64], lambda: f64, t: f64) -> Vec<f64> {
    let c = eig.coefficients(f_star);
    let w: Array1<f64> = c
        .iter()
        .zip(&eig.values)
        .map(|(ck, mu)| ck * (1.0 - (-t * lambda * mu).exp()) / lambda)
        .collect();
    eig.vectors.dot(&w).to_vec()
}

/// Full-batch gradient descent on `(1/n) Σ (−⟨f*(x_i), u(x_i)⟩ + (λ/2)‖u(x_i)‖²)`
/// for an output-centered critic, whose gradient flow is the network
/// counterpart of the kernel dynamics.
///
/// Returns `u` at the reference points after each requested number of steps.
pub fn gd_trajectory(
    critic: &MlpCritic,
    points: ArrayView2<'_, f64>,
    f_star: ArrayView2<'_, f64>,
    lambda: f64,
    eta: f64,
    steps_at: &[usize],
) -> Result<Vec<Array2<f64>>, NtkError> {
    if !critic.is_centered() {
        return Err(NtkError::NotCentered);
    }
    assert!(
        steps_at.windows(2).all(|w| w[0] <= w[1]),
        "steps must be sorted"
    );
    let mut net = critic.clone();
    let inv_n = 1.0 / points.nrows() as f64;
    let mut out = Vec::with_capacity(steps_at.len());
    let mut step = 0usize;
    let mut u = net.forward_batch(points);
    for &target in steps_at {
        while step < target {
            let mut cot = &u * lambda - &f_star;
            cot *= inv_n;
            let g = net.vjp(points, &cot);
            net.add_scaled(&g, -eta);
            step += 1;
            u = net.forward_batch(points);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(NtkError::Diverged(step));
            }
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// `‖g‖_p̂ = √((1/n) Σ_i ‖g(x_i)‖²)` for a stacked vector.
pub fn empirical_norm(g: &[f64], n: usize) -> f64 {
    (g.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LazyConfig {
    pub n: usize,
    pub dim: usize,
    pub width: usize,
    pub lambdas: Vec<f64>,
    /// Final time is `c / λ`.
    pub c: f64,
    /// Step size is `eta_factor / (λ · μ_max)`, shared by GD and Euler.
    pub eta_factor: f64,
    pub seeds: Vec<u64>,
    /// Evenly spaced report times in `(0, c/λ]`.
    pub snapshots: usize,
    pub rho1: f64,
    pub omega: f64,
}

impl Default for LazyConfig {
    fn default() -> Self {
        LazyConfig {
            n: 200,
            dim: 2,
            width: 64,
            lambdas: vec![0.5, 2.0, 8.0],
            c: 1.0,
            eta_factor: 1e-3,
            seeds: (0..5).collect(),
            snapshots: 4,
            rho1: 0.5,
            omega: 0.8,
        }
    }
}

impl LazyConfig {
    pub fn validate(&self) -> Result<(), NtkError> {
        let bad = |m: &str| Err(NtkError::Config(m.to_string()));
        if self.n == 0 || self.dim < 2 || self.width == 0 {
            return bad("n and width must be positive and dim at least 2");
        }
        if self.n * self.dim > MAX_DENSE {
            return Err(NtkError::TooLarge {
                got: self.n * self.dim,
                max: MAX_DENSE,
            });
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("lambdas must be nonempty and positive");
        }
        if !(self.c > 0.0) || !(self.eta_factor > 0.0 && self.eta_factor < 2.0) {
            return bad("c must be positive and eta_factor in (0, 2)");
        }
        if self.seeds.is_empty() || self.snapshots == 0 {
            return bad("need at least one seed and one snapshot");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LazyRunReport {
    pub lambda: f64,
    pub seed: u64,
    pub width: usize,
    pub n: usize,
    pub eta: f64,
    pub mu_max: f64,
    pub times: Vec<f64>,
    /// `‖λu − λū‖_p̂ / ‖f*‖_p̂` at each time.
    pub dev_rel: Vec<f64>,
    /// `‖λū − f*‖_p̂` at each time.
    pub ubar_err: Vec<f64>,
    pub f_star_norm: f64,
}

impl LazyRunReport {
    pub fn final_dev(&self) -> f64 {
        *self.dev_rel.last().expect("at least one snapshot")
    }
}

/// One `(λ, seed)` cell: reference points from the mixture `p`, a centered
/// critic, GD and Euler with identical step size and step counts.
pub fn lazy_run(cfg: &LazyConfig, lambda: f64, seed: u64) -> Result<LazyRunReport, NtkError> {
    let (p, q) = make_paper_mixture(cfg.dim, cfg.rho1, cfg.omega)
        .map_err(|e| NtkError::Distribution(e.to_string()))?;
    let points = p.sample(cfg.n, &mut child(seed, 0));
    let fs = OptimalCritic::new(&p, &q).map_err(|e| NtkError::Distribution(e.to_string()))?;
    let f_star = fs.eval_batch(points.view());
    let f_flat: Vec<f64> = f_star.iter().copied().collect();
    let mut critic = MlpCritic::init(cfg.dim, cfg.width, &mut child(seed, 1));
    critic.center_at_current();

    let gram = ntk_gram(&critic, points.view());
    let eig = eig_sym_psd(&gram.gram, cfg.n)?;
    let mu_max = eig.max_value();
    let eta = cfg.eta_factor / (lambda * mu_max);
    let t_end = cfg.c / lambda;
    let total = (t_end / eta).round().max(1.0) as usize;
    let steps: Vec<usize> = (1..=cfg.snapshots)
        .map(|k| ((k * total) as f64 / cfg.snapshots as f64).round() as usize)
        .collect();

    let ubar = kernel_ode_euler(&gram.gram, cfg.n, &f_flat, lambda, eta, &steps)?;
    let u = gd_trajectory(&critic, points.view(), f_star.view(), lambda, eta, &steps)?;
    let f_norm = empirical_norm(&f_flat, cfg.n);
    let mut dev_rel = Vec::with_capacity(steps.len());
    let mut ubar_err = Vec::with_capacity(steps.len());
    for (ub, un) in ubar.iter().zip(&u) {
        let diff: Vec<f64> = un.iter().zip(ub).map(|(a, b)| lambda * (a - b)).collect();
        dev_rel.push(empirical_norm(&diff, cfg.n) / f_norm);
        let err: Vec<f64> = ub
            .iter()
            .zip(&f_flat)
            .map(|(a, f)| lambda * a - f)
            .collect();
        ubar_err.push(empirical_norm(&err, cfg.n));
    }
    Ok(LazyRunReport {
        lambda,
        seed,
        width: cfg.width,
        n: cfg.n,
        eta,
        mu_max,
        times: steps.iter().map(|&k| k as f64 * eta).collect(),
        dev_rel,
        ubar_err,
        f_star_norm: f_norm,
    })
}

/// All `(λ, seed)` cells, ordered by λ then seed. Seeds are mixed with
/// `master_seed` so different studies use different streams.
pub fn lazy_deviation(cfg: &LazyConfig, master_seed: u64) -> Result<Vec<LazyRunReport>, NtkError> {
    cfg.validate()?;
    let cells: Vec<(f64, u64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(l, s)| {
            lazy_run(cfg, l, derive_seed(master_seed, s)).map(|mut r| {
                r.seed = s;
                r
            })
        })
        .collect()
}

/// Median final deviation per λ, in grid order.
pub fn median_final_dev(reports: &[LazyRunReport], lambdas: &[f64]) -> Vec<f64> {
    lambdas
        .iter()
        .map(|&l| {
            let mut v: Vec<f64> = reports
                .iter()
                .filter(|r| r.lambda == l)
                .map(|r| r.final_dev())
                .collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m == 0 {
                f64::NAN
            } else if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            }
        })
        .collect()
}

/// `lambda,t,dev_rel,ubar_err,seed,width,n`, one row per report time.
pub fn write_lazy_csv<W: Write>(reports: &[LazyRunReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "lambda,t,dev_rel,ubar_err,seed,width,n")?;
    for r in reports {
        for k in 0..r.times.len() {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{},{},{}",
                r.lambda, r.times[k], r.dev_rel[k], r.ubar_err[k], r.seed, r.width, r.n
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::ParamVector;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let c = MlpCritic::init(2, 64, &mut seeded(1));
        let pts = random_points(50, 2, 2);
        let g = ntk_gram(&c, pts.view());
        assert_eq!(g.gram.dim(), (100, 100));
        let eig = eig_sym_psd(&g.gram, 50).unwrap();
        assert!(*eig.values.last().unwrap() >= -1e-8 * eig.max_value());
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn gram_blocks_match_finite_difference_jacobians() {
        let c = MlpCritic::init(2, 6, &mut seeded(3));
        let pts = random_points(3, 2, 4);
        let g = ntk_gram(&c, pts.view());
        let m = c.param_count();
        let eps = 1e-6;
        let fd_jac = |x: &[f64]| {
            let mut j = Array2::zeros((2, m));
            for k in 0..m {
                let mut e = ParamVector::zeros(m);
                e.0[k] = 1.0;
                let mut cp = c.clone();
                cp.add_scaled(&e, eps);
                let mut cm = c.clone();
                cm.add_scaled(&e, -eps);
                let (fp, fm) = (cp.forward(x), cm.forward(x));
                for r in 0..2 {
                    j[[r, k]] = (fp[r] - fm[r]) / (2.0 * eps);
                }
            }
            j
        };
        let jacs: Vec<Array2<f64>> = pts
            .rows()
            .into_iter()
            .map(|x| fd_jac(&x.to_vec()))
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let fd = jacs[i].dot(&jacs[j].t());
                let blk = g.block(i, j);
                for (a, b) in blk.iter().zip(fd.iter()) {
                    assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn linear_feature_model_gram() {
        // with all hidden weights zero except the output layer the network is
        // θ-linear in (W3, b3) with features a2 = s(b2) = 0 → only b3 contributes,
        // giving block (i, j) = I
        let c = MlpCritic::zeros(2, 3);
        let pts = random_points(4, 2, 5);
        let g = ntk_gram(&c, pts.view());
        for i in 0..4 {
            for j in 0..4 {
                let b = g.block(i, j);
                assert_eq!(b, Array2::<f64>::eye(2).view());
            }
        }
    }

    #[test]
    fn eig_of_identity_and_reconstruction() {
        let eye = Array2::<f64>::eye(5);
        let e = eig_sym_psd(&eye, 1).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));

        let c = MlpCritic::init(2, 16, &mut seeded(6));
        let pts = random_points(30, 2, 7);
        let g = ntk_gram(&c, pts.view());
        let eig = eig_sym_psd(&g.gram, 30).unwrap();
        let mu = Array2::from_diag(&Array1::from(eig.values.clone()));
        let rec = eig.vectors.dot(&mu).dot(&eig.vectors.t());
        let target = &g.gram / 30.0;
        let gnorm = g.gram.iter().map(|v| v * v).sum::<f64>().sqrt();
        let res = (&rec - &target).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res <= 1e-8 * gnorm);
        let vtv = eig.vectors.t().dot(&eig.vectors);
        for ((i, j), v) in vtv.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-10);
        }
        assert!(eig.rank(1e-8) <= (60).min(c.param_count()));
    }

    #[test]
    fn rank_is_bounded_by_parameter_count() {
        let c = MlpCritic::init(2, 2, &mut seeded(8));
        assert_eq!(c.param_count(), 18);
        let pts = random_points(40, 2, 9);
        let g = ntk_gram(&c, pts.view());
        let eig = eig_sym_psd(&g.gram, 40).unwrap();
        assert!(eig.rank(1e-8) <= 18);
    }

    #[test]
    fn rejects_asymmetric_and_oversized() {
        let mut a = Array2::<f64>::eye(3);
        a[[0, 1]] = 0.5;
        assert!(matches!(eig_sym_psd(&a, 1), Err(NtkError::NotSymmetric(_))));
        let big = Array2::<f64>::zeros((MAX_DENSE + 1, MAX_DENSE + 1));
        assert!(matches!(
            eig_sym_psd(&big, 1),
            Err(NtkError::TooLarge { .. })
        ));
    }

    #[test]
    fn scalar_kernel_ode() {
        let g = Array2::<f64>::eye(1);
        let zero = kernel_ode_euler(&g, 1, &[0.0], 1.0, 1e-3, &[100, 1000]).unwrap();
        assert!(zero.iter().all(|v| v[0] == 0.0));
        let eta = 1e-4;
        let out = kernel_ode_euler(&g, 1, &[1.0], 1.0, eta, &[10_000, 30_000]).unwrap();
        for (v, t) in out.iter().zip([1.0f64, 3.0]) {
            let exact = 1.0 - (-t).exp();
            assert!((v[0] - exact).abs() < 2.0 * eta);
        }
        let eig = eig_sym_psd(&g, 1).unwrap();
        assert!(
            (spectral_solution(&eig, &[1.0], 1.0, 1.0)[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15
        );
        assert!(matches!(
            kernel_ode_euler(&g, 1, &[1.0], 1.0, 3.0, &[200]),
            Err(NtkError::Unstable(_))
        ));
    }

    #[test]
    fn spectral_coefficients_decay_exactly() {
        let c = MlpCritic::init(2, 8, &mut seeded(10));
        let pts = random_points(20, 2, 11);
        let g = ntk_gram(&c, pts.view());
        let eig = eig_sym_psd(&g.gram, 20).unwrap();
        let mut rng = seeded(12);
        let fs: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = 2.0;
        assert!(spectral_solution(&eig, &fs, lambda, 0.0)
            .iter()
            .all(|&v| v == 0.0));
        let ck = eig.coefficients(&fs);
        let mut prev = f64::INFINITY;
        for t in [0.0, 0.1, 0.5, 1.0, 5.0] {
            let u = spectral_solution(&eig, &fs, lambda, t);
            let r: Vec<f64> = u.iter().zip(&fs).map(|(a, f)| lambda * a - f).collect();
            let rk = eig.coefficients(&r);
            for k in 0..40 {
                if eig.values[k] > 1e-6 {
                    let want = -ck[k] * (-t * lambda * eig.values[k]).exp();
                    assert!((rk[k] - want).abs() <= 1e-10 * (1.0 + want.abs()));
                }
            }
            let err = empirical_norm(&r, 20);
            assert!(err <= prev + 1e-12);
            prev = err;
        }
        // long-time limit: projection onto the span of the decayed modes
        let t = 1e8;
        let u = spectral_solution(&eig, &fs, lambda, t);
        let lu: Vec<f64> = u.iter().map(|v| lambda * v).collect();
        let proj = eig.coefficients(&lu);
        for k in 0..40 {
            if t * lambda * eig.values[k] > 50.0 {
                assert!((proj[k] - ck[k]).abs() < 1e-8);
            } else if eig.values[k] == 0.0 {
                assert!(proj[k].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gd_requires_centering_and_is_still_at_zero_target() {
        let c = MlpCritic::init(2, 8, &mut seeded(13));
        let pts = random_points(10, 2, 14);
        let zero = Array2::zeros((10, 2));
        assert_eq!(
            gd_trajectory(&c, pts.view(), zero.view(), 1.0, 1e-3, &[1]),
            Err(NtkError::NotCentered)
        );
        let mut cc = c.clone();
        cc.center_at_current();
        let out = gd_trajectory(&cc, pts.view(), zero.view(), 1.0, 1e-2, &[0, 50]).unwrap();
        assert!(out.iter().all(|u| u.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gd_first_step_follows_negative_gradient() {
        let mut c = MlpCritic::init(2, 8, &mut seeded(15));
        c.center_at_current();
        let pts = random_points(10, 2, 16);
        let mut rng = seeded(17);
        let fs = Array2::from_shape_simple_fn((10, 2), || rng.random_range(-1.0..1.0));
        let lambda = 50.0;
        let eta = 1e-7;
        let objective = |net: &MlpCritic| {
            let u = net.forward_batch(pts.view());
            (&u * &u * (0.5 * lambda) - &u * &fs).sum() / 10.0
        };
        let u1 = gd_trajectory(&c, pts.view(), fs.view(), lambda, eta, &[1]).unwrap();
        // predicted first-order change of u along −∇L
        let m = c.param_count();
        let mut grad = ParamVector::zeros(m);
        let h = 1e-6;
        for k in 0..m {
            let mut e = ParamVector::zeros(m);
            e.0[k] = 1.0;
            let mut cp = c.clone();
            cp.add_scaled(&e, h);
            let mut cm = c.clone();
            cm.add_scaled(&e, -h);
            grad.0[k] = (objective(&cp) - objective(&cm)) / (2.0 * h);
        }
        let mut stepped = c.clone();
        stepped.add_scaled(&grad, -eta);
        let expect = stepped.forward_batch(pts.view());
        for (a, b) in u1[0].iter().zip(expect.iter()) {
            assert!(
                (a - b).abs() <= 1e-6 * (1e-12 + b.abs()) + 1e-15,
                "{a} vs {b}"
            );
        }
    }

    #[test]
    fn small_lazy_run_is_deterministic() {
        let cfg = LazyConfig {
            n: 20,
            width: 16,
            lambdas: vec![4.0],
            seeds: vec![0, 1],
            eta_factor: 1e-2,
            snapshots: 2,
            ..LazyConfig::default()
        };
        let a = lazy_deviation(&cfg, 9).unwrap();
        let b = lazy_deviation(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| r.dev_rel.iter().all(|v| v.is_finite())));
        assert!((a[0].times[1] - 0.25).abs() < 2.0 * a[0].eta);
        let mut buf = Vec::new();
        write_lazy_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("lambda,t,dev_rel,ubar_err,seed,width,n\n4,"));
        assert_eq!(text.lines().count(), 5);
        assert_eq!(median_final_dev(&a, &[4.0]).len(), 1);
    }
}
