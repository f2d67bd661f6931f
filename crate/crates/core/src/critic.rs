//! The parametric critic `f(x, θ)`: a `d → h → h → d` MLP with Swish activations.
//!
//! Gradients of the empirical Stein loss are derived by hand. The exact
//! divergence uses the trace identity
//!
//! ```text
//! tr(W₃ D₂ W₂ D₁ W₁) = s'(z₂)ᵀ (W₂ ∘ (W₁W₃)ᵀ) s'(z₁)
//! ```
//!
//! which costs one `h × h` product per sample regardless of `d`. Hutchinson
//! estimates use `vᵀJv` with Rademacher probes.
//!
//! Parameter packing order (layer-major, row-major within a matrix):
//! `W₁ (h×d), b₁ (h), W₂ (h×h), b₂ (h), W₃ (d×h), b₃ (d)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;
use thiserror::Error;

use crate::distributions::{sigmoid, ScoreField};
use crate::rng::{fill_rademacher, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum CriticError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// How `∇·f` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DivMode {
    Exact,
    Hutchinson { probes: usize },
}

impl DivMode {
    pub const EXACT_MAX_DIM: usize = 32;

    /// Exact up to 32 dimensions, one Rademacher probe per sample beyond.
    pub fn default_for(dim: usize) -> Self {
        if dim <= Self::EXACT_MAX_DIM {
            DivMode::Exact
        } else {
            DivMode::Hutchinson { probes: 1 }
        }
    }
}

/// Flat view of all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

#[inline]
fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn swish_d1(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

#[inline]
fn swish_d2(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
}

/// Two-hidden-layer Swish MLP `R^d → R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCritic {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
    /// Frozen copy subtracted from every output when centering is on.
    reference: Option<Box<MlpCritic>>,
}

/// Forward activations for a batch, kept for the backward pass.
pub(crate) struct Cache {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    out: Array2<f64>,
}

/// Which divergence term contributes to the backward pass, with its per-sample weight.
enum DivTerm<'a> {
    None,
    Exact(f64),
    Probes(&'a [Array2<f64>], f64),
}

impl MlpCritic {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((dim, hidden)),
            b3: Array1::zeros(dim),
            reference: None,
        }
    }

    /// Weights `U(−1/√fan_in, 1/√fan_in)` drawn in packing order, biases zero.
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        assert!(dim >= 1 && hidden >= 1, "critic needs d, h >= 1");
        let mut c = Self::zeros(dim, hidden);
        let mut fill = |m: &mut Array2<f64>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in m.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut c.w1, dim);
        fill(&mut c.w2, hidden);
        fill(&mut c.w3, hidden);
        c
    }

    /// Builds a critic from explicit layer arrays.
    pub fn from_layers(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        w3: Array2<f64>,
        b3: Array1<f64>,
    ) -> Result<Self, CriticError> {
        let (h, d) = w1.dim();
        if b1.len() != h
            || w2.dim() != (h, h)
            || b2.len() != h
            || w3.dim() != (d, h)
            || b3.len() != d
        {
            return Err(CriticError::Dimension("inconsistent layer shapes".into()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            reference: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    /// `h(d+1) + h(h+1) + d(h+1)`.
    pub fn param_count(&self) -> usize {
        Self::count_for(self.dim(), self.width())
    }

    pub fn count_for(dim: usize, hidden: usize) -> usize {
        hidden * (dim + 1) + hidden * (hidden + 1) + dim * (hidden + 1)
    }

    pub fn is_centered(&self) -> bool {
        self.reference.is_some()
    }

    pub fn reference(&self) -> Option<&MlpCritic> {
        self.reference.as_deref()
    }

    /// Freezes the current parameters as a reference so that the output
    /// becomes `f(x, θ) − f(x, θ₀)`, identically zero right now.
    pub fn center_at_current(&mut self) {
        let mut snapshot = self.clone();
        snapshot.reference = None;
        self.reference = Some(Box::new(snapshot));
    }

    pub fn set_reference(&mut self, reference: Option<MlpCritic>) {
        self.reference = reference.map(|mut r| {
            r.reference = None;
            Box::new(r)
        });
    }

    /// Multiplies the output layer (and the reference's) by `factor`, giving `factor · f`.
    pub fn scale_output(&mut self, factor: f64) {
        self.w3 *= factor;
        self.b3 *= factor;
        if let Some(r) = self.reference.as_mut() {
            r.scale_output(factor);
        }
    }

    pub fn layers(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    fn layers_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn params(&self) -> ParamVector {
        let mut v = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            v.extend_from_slice(l);
        }
        ParamVector(v)
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<(), CriticError> {
        if p.len() != self.param_count() {
            return Err(CriticError::ParamLength {
                got: p.len(),
                expected: self.param_count(),
            });
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            l.copy_from_slice(&p.0[offset..offset + l.len()]);
            offset += l.len();
        }
        Ok(())
    }

    /// `θ ← θ + step · direction`.
    pub fn add_scaled(&mut self, direction: &ParamVector, step: f64) {
        let mut offset = 0;
        for l in self.layers_mut() {
            for (v, g) in l.iter_mut().zip(&direction.0[offset..]) {
                *v += step * g;
            }
            offset += l.len();
        }
    }

    fn raw_forward(&self, x: ArrayView2<'_, f64>) -> Cache {
        let mut z1 = x.dot(&self.w1.t());
        z1 += &self.b1;
        let a1 = z1.mapv(swish);
        let mut z2 = a1.dot(&self.w2.t());
        z2 += &self.b2;
        let a2 = z2.mapv(swish);
        let mut out = a2.dot(&self.w3.t());
        out += &self.b3;
        Cache {
            z1,
            a1,
            z2,
            a2,
            out,
        }
    }

    /// Raw (uncentered) trace of the input Jacobian per row.
    fn raw_divergence(&self, cache: &Cache) -> Array1<f64> {
        let g1 = cache.z1.mapv(swish_d1);
        let g2 = cache.z2.mapv(swish_d1);
        let m = self.trace_matrix();
        (g2.dot(&m) * g1).sum_axis(Axis(1))
    }

    /// `M = W₂ ∘ (W₁W₃)ᵀ`.
    fn trace_matrix(&self) -> Array2<f64> {
        let c = self.w1.dot(&self.w3);
        &self.w2 * &c.t()
    }

    /// Raw `vᵀJv` per row for the probe matrix `v` (same shape as the batch).
    fn raw_quadratic_form(&self, cache: &Cache, probes: &Array2<f64>) -> Array1<f64> {
        let a = probes.dot(&self.w1.t()) * cache.z1.mapv(swish_d1);
        let b = probes.dot(&self.w3) * cache.z2.mapv(swish_d1);
        (a.dot(&self.w2.t()) * b).sum_axis(Axis(1))
    }

    /// Outputs for every row of `x` (centered when a reference is set).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = self.raw_forward(x).out;
        if let Some(r) = &self.reference {
            out -= &r.raw_forward(x).out;
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward_batch(xv).into_raw_vec_and_offset().0
    }

    /// Exact `∇·f` for every row.
    pub fn divergence_exact_batch(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut div = self.raw_divergence(&self.raw_forward(x));
        if let Some(r) = &self.reference {
            div -= &r.raw_divergence(&r.raw_forward(x));
        }
        div
    }

    pub fn divergence_exact(&self, x: &[f64]) -> f64 {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.divergence_exact_batch(xv)[0]
    }

    /// Forward-mode pass: returns `(f(x), J_f(x) v)`.
    pub fn jvp(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut f, mut jv) = self.raw_jvp(x, v);
        if let Some(r) = &self.reference {
            let (fr, jr) = r.raw_jvp(x, v);
            f.iter_mut().zip(&fr).for_each(|(a, b)| *a -= b);
            jv.iter_mut().zip(&jr).for_each(|(a, b)| *a -= b);
        }
        (f, jv)
    }

    fn raw_jvp(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x = ArrayView1::from(x);
        let v = ArrayView1::from(v);
        let z1 = self.w1.dot(&x) + &self.b1;
        let dz1 = self.w1.dot(&v);
        let a1 = z1.mapv(swish);
        let da1 = z1.mapv(swish_d1) * dz1;
        let z2 = self.w2.dot(&a1) + &self.b2;
        let dz2 = self.w2.dot(&da1);
        let a2 = z2.mapv(swish);
        let da2 = z2.mapv(swish_d1) * dz2;
        let f = self.w3.dot(&a2) + &self.b3;
        let df = self.w3.dot(&da2);
        (f.to_vec(), df.to_vec())
    }

    /// Exact divergence through `d` forward-mode passes, `Σ_i e_iᵀ J e_i`.
    pub fn divergence_forward_mode(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut e = vec![0.0; d];
        (0..d)
            .map(|i| {
                e.iter_mut().for_each(|v| *v = 0.0);
                e[i] = 1.0;
                self.jvp(x, &e).1[i]
            })
            .sum()
    }

    /// `(1/K) Σ_k v_kᵀ J v_k` with fresh Rademacher probes.
    pub fn divergence_hutchinson(&self, x: &[f64], probes: usize, rng: &mut Rng) -> f64 {
        assert!(probes >= 1, "need at least one probe");
        let mut v = vec![0.0; self.dim()];
        let mut acc = 0.0;
        for _ in 0..probes {
            fill_rademacher(rng, &mut v);
            let (_, jv) = self.jvp(x, &v);
            acc += v.iter().zip(&jv).map(|(a, b)| a * b).sum::<f64>();
        }
        acc / probes as f64
    }

    /// Outputs and divergences (exact, or Hutchinson with the given probe
    /// matrices, one `m × d` matrix per probe).
    pub fn outputs_and_divergence(
        &self,
        x: ArrayView2<'_, f64>,
        probes: Option<&[Array2<f64>]>,
    ) -> (Array2<f64>, Array1<f64>) {
        let cache = self.raw_forward(x);
        let mut div = self.divergence_from_cache(&cache, probes);
        let mut out = cache.out;
        if let Some(r) = &self.reference {
            let rc = r.raw_forward(x);
            div -= &r.divergence_from_cache(&rc, probes);
            out -= &rc.out;
        }
        (out, div)
    }

    fn divergence_from_cache(&self, cache: &Cache, probes: Option<&[Array2<f64>]>) -> Array1<f64> {
        match probes {
            None => self.raw_divergence(cache),
            Some(ps) => {
                let mut acc = Array1::zeros(cache.out.nrows());
                for p in ps {
                    acc += &self.raw_quadratic_form(cache, p);
                }
                acc / ps.len() as f64
            }
        }
    }

    /// Gradient of `Σ_i ⟨cot_i, f(x_i)⟩ + div_term` with respect to the raw
    /// parameters, given cotangents on the outputs.
    fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        cache: &Cache,
        cot: &Array2<f64>,
        div: DivTerm<'_>,
    ) -> ParamVector {
        let mut dw3 = cot.t().dot(&cache.a2);
        let db3 = cot.sum_axis(Axis(0));
        let da2 = cot.dot(&self.w3);
        let mut dz2 = da2 * cache.z2.mapv(swish_d1);
        let mut dw2 = Array2::<f64>::zeros(self.w2.raw_dim());
        let mut dw1 = Array2::<f64>::zeros(self.w1.raw_dim());
        let mut dz1_extra: Option<Array2<f64>> = None;

        match div {
            DivTerm::None => {}
            DivTerm::Exact(coef) => {
                let g1 = cache.z1.mapv(swish_d1);
                let g2 = cache.z2.mapv(swish_d1);
                let c = self.w1.dot(&self.w3);
                let m = &self.w2 * &c.t();
                let dg2 = g1.dot(&m.t()) * coef;
                let dg1 = g2.dot(&m) * coef;
                let dm = g2.t().dot(&g1) * coef;
                dw2 += &(&dm * &c.t());
                let dc = (&dm * &self.w2).reversed_axes();
                dw1 += &dc.dot(&self.w3.t());
                dw3 += &self.w1.t().dot(&dc);
                dz2 += &(dg2 * cache.z2.mapv(swish_d2));
                dz1_extra = Some(dg1 * cache.z1.mapv(swish_d2));
            }
            DivTerm::Probes(probes, coef) => {
                let g1 = cache.z1.mapv(swish_d1);
                let g2 = cache.z2.mapv(swish_d1);
                let s1 = cache.z1.mapv(swish_d2);
                let s2 = cache.z2.mapv(swish_d2);
                let coef = coef / probes.len() as f64;
                let mut extra = Array2::<f64>::zeros(cache.z1.raw_dim());
                for v in probes {
                    let a = v.dot(&self.w1.t());
                    let b = v.dot(&self.w3);
                    let p = &g1 * &a;
                    let q = &g2 * &b;
                    let dq = p.dot(&self.w2.t()) * coef;
                    let dp = q.dot(&self.w2) * coef;
                    dw2 += &(q.t().dot(&p) * coef);
                    dz2 += &(&dq * &b * &s2);
                    dw3 += &v.t().dot(&(&dq * &g2));
                    extra += &(&dp * &a * &s1);
                    dw1 += &(&dp * &g1).t().dot(v);
                }
                dz1_extra = Some(extra);
            }
        }

        dw2 += &dz2.t().dot(&cache.a1);
        let db2 = dz2.sum_axis(Axis(0));
        let da1 = dz2.dot(&self.w2);
        let mut dz1 = da1 * cache.z1.mapv(swish_d1);
        if let Some(e) = dz1_extra {
            dz1 += &e;
        }
        dw1 += &dz1.t().dot(&x);
        let db1 = dz1.sum_axis(Axis(0));

        let mut g = Vec::with_capacity(self.param_count());
        for part in [
            dw1.as_slice().expect("standard layout"),
            db1.as_slice().expect("standard layout"),
            dw2.as_slice().expect("standard layout"),
            db2.as_slice().expect("standard layout"),
            dw3.as_slice().expect("standard layout"),
            db3.as_slice().expect("standard layout"),
        ] {
            g.extend_from_slice(part);
        }
        ParamVector(g)
    }

    /// Empirical Stein loss `(1/m) Σ (−T_q f(x_i) + (λ/2)‖f(x_i)‖²)` and its exact
    /// parameter gradient, given precomputed model scores `s_q(x_i)`.
    ///
    /// In Hutchinson mode `probes` supplies the Rademacher matrices; they are
    /// drawn fresh from `rng` when `None`.
    pub fn loss_and_grad_with_scores(
        &self,
        batch: ArrayView2<'_, f64>,
        scores: ArrayView2<'_, f64>,
        lambda: f64,
        mode: DivMode,
        rng: &mut Rng,
    ) -> Result<(f64, ParamVector), CriticError> {
        let m = batch.nrows();
        if m == 0 || batch.ncols() != self.dim() || scores.dim() != batch.dim() {
            return Err(CriticError::Dimension(format!(
                "batch {:?}, scores {:?}, critic dim {}",
                batch.dim(),
                scores.dim(),
                self.dim()
            )));
        }
        let probes = match mode {
            DivMode::Exact => None,
            DivMode::Hutchinson { probes } => Some(draw_probes(m, self.dim(), probes.max(1), rng)),
        };
        let cache = self.raw_forward(batch);
        let mut f = cache.out.clone();
        let mut div = self.divergence_from_cache(&cache, probes.as_deref());
        if let Some(r) = &self.reference {
            let rc = r.raw_forward(batch);
            f -= &rc.out;
            div -= &r.divergence_from_cache(&rc, probes.as_deref());
        }
        let inv_m = 1.0 / m as f64;
        let mut total = 0.0;
        for ((fi, si), di) in f.rows().into_iter().zip(scores.rows()).zip(div.iter()) {
            let sf: f64 = fi.iter().zip(si.iter()).map(|(a, b)| a * b).sum();
            let ff: f64 = fi.iter().map(|a| a * a).sum();
            total += -(sf + di) + 0.5 * lambda * ff;
        }
        let loss = total * inv_m;
        if !loss.is_finite() {
            return Err(CriticError::NonFinite("loss"));
        }
        let mut cot = f * lambda;
        cot -= &scores;
        cot *= inv_m;
        let term = match &probes {
            None => DivTerm::Exact(-inv_m),
            Some(ps) => DivTerm::Probes(ps, -inv_m),
        };
        let grad = self.backward(batch, &cache, &cot, term);
        if grad.0.iter().any(|g| !g.is_finite()) {
            return Err(CriticError::NonFinite("gradient"));
        }
        Ok((loss, grad))
    }

    /// Gradient of `Σ_i ⟨cot_i, f(x_i)⟩`, no divergence term.
    pub fn vjp(&self, x: ArrayView2<'_, f64>, cot: &Array2<f64>) -> ParamVector {
        let cache = self.raw_forward(x);
        self.backward(x, &cache, cot, DivTerm::None)
    }

    /// Parameter Jacobian `∂_θ f(x)`, `d × M_Θ`.
    pub fn param_jacobian(&self, x: &[f64]) -> Array2<f64> {
        let d = self.dim();
        let xv = ArrayView2::from_shape((1, d), x).expect("row vector");
        let cache = self.raw_forward(xv);
        let mut jac = Array2::zeros((d, self.param_count()));
        let mut cot = Array2::zeros((1, d));
        for j in 0..d {
            cot.fill(0.0);
            cot[[0, j]] = 1.0;
            let g = self.backward(xv, &cache, &cot, DivTerm::None);
            jac.slice_mut(s![j, ..]).assign(&ArrayView1::from(&g.0[..]));
        }
        jac
    }
}

/// `probes` Rademacher matrices of shape `m × d`.
pub fn draw_probes(m: usize, d: usize, probes: usize, rng: &mut Rng) -> Vec<Array2<f64>> {
    (0..probes)
        .map(|_| {
            let mut v = Array2::zeros((m, d));
            fill_rademacher(rng, v.as_slice_mut().expect("standard layout"));
            v
        })
        .collect()
}

/// Loss and gradient with scores evaluated from `score_q`.
pub fn loss_and_grad(
    critic: &MlpCritic,
    batch: ArrayView2<'_, f64>,
    score_q: &dyn ScoreField,
    lambda: f64,
    mode: DivMode,
    rng: &mut Rng,
) -> Result<(f64, ParamVector), CriticError> {
    let scores = score_q.score_batch(batch);
    critic.loss_and_grad_with_scores(batch, scores.view(), lambda, mode, rng)
}

/// Squared row norms.
pub(crate) fn row_sq_norms(a: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.nrows());
    Zip::from(&mut out)
        .and(a.rows())
        .for_each(|o, r| *o = r.iter().map(|v| v * v).sum());
    out
}
