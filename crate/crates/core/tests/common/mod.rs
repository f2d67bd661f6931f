use neural_stein::distributions::GaussBernoulliRbm;

/// `log Σ_h exp(xᵀBh + bᵀx + cᵀh − ½‖x‖²)` over `h ∈ {−1, 1}^H`.
pub fn log_marginal_by_enumeration(rbm: &GaussBernoulliRbm, x: &[f64]) -> f64 {
    let (d, hd) = (rbm.visible_dim(), rbm.hidden_dim());
    let (bm, b, c) = (rbm.coupling(), rbm.visible_bias(), rbm.hidden_bias());
    let base: f64 = (0..d).map(|i| b[i] * x[i] - 0.5 * x[i] * x[i]).sum();
    let terms: Vec<f64> = (0..1usize << hd)
        .map(|mask| {
            let h: Vec<f64> = (0..hd)
                .map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let mut e = base;
            for j in 0..hd {
                let a: f64 = (0..d).map(|i| x[i] * bm[i * hd + j]).sum::<f64>() + c[j];
                e += a * h[j];
            }
            e
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}
