//! Interpolation kernels that spread a contribution landing at a fractional
//! output position onto the surrounding integer positions.
//!
//! Two families are provided: the separable bilinear/trilinear tent and a
//! mixture of `s` isotropic Gaussians with fixed variances and per-location
//! mixture scores. Each Gaussian component is normalized over the (clipped)
//! window it is evaluated on, so with simplex scores the mixture transmits
//! exactly the contribution's mass to the in-bounds window.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::grid::{FPoint, IPoint, MAX_DIM};

/// Fixed Gaussian variances (squared output pixels) and the window width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBank {
    variances: Vec<f64>,
    k_sigma: usize,
}

/// Variances for a layer placed inside a network.
pub const INTERMEDIATE_VARIANCES: [f64; 4] = [0.25, 1.0, 4.0, 16.0];
/// Sharper variances for a layer producing the network output.
pub const FINAL_LAYER_VARIANCES: [f64; 4] = [1.0 / 30.0, 0.5, 1.0, 2.0];
pub const DEFAULT_K_SIGMA: usize = 5;

impl GaussianBank {
    pub fn new(variances: Vec<f64>, k_sigma: usize) -> Result<Self> {
        validate_variances(&variances)?;
        if k_sigma == 0 {
            return config_err("K_sigma must be >= 1");
        }
        Ok(GaussianBank { variances, k_sigma })
    }

    pub fn intermediate() -> Self {
        GaussianBank {
            variances: INTERMEDIATE_VARIANCES.to_vec(),
            k_sigma: DEFAULT_K_SIGMA,
        }
    }

    pub fn final_layer() -> Self {
        GaussianBank {
            variances: FINAL_LAYER_VARIANCES.to_vec(),
            k_sigma: DEFAULT_K_SIGMA,
        }
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Number of mixture components.
    pub fn s(&self) -> usize {
        self.variances.len()
    }

    pub fn k_sigma(&self) -> usize {
        self.k_sigma
    }
}

pub(crate) fn validate_variances(variances: &[f64]) -> Result<()> {
    if variances.is_empty() {
        return config_err("at least one Gaussian variance is required");
    }
    if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return config_err(format!("variances must be positive and finite: {variances:?}"));
    }
    if variances.windows(2).any(|w| w[0] >= w[1]) {
        return config_err(format!("variances must be strictly increasing: {variances:?}"));
    }
    Ok(())
}

#[inline]
fn tent(a: f64) -> f64 {
    (1.0 - a.abs()).max(0.0)
}

/// Separable tent weight `prod_d max(0, 1 - |q_d - p_d|)`.
pub fn bilinear_weight(q: &FPoint, p: &IPoint, dim: usize) -> f64 {
    (0..dim).map(|d| tent(q[d] - p[d] as f64)).product()
}

/// Gradient of [`bilinear_weight`] with respect to `q`; zero at the kinks.
pub fn bilinear_weight_grad(q: &FPoint, p: &IPoint, dim: usize) -> FPoint {
    let mut factors = [1.0; MAX_DIM];
    let mut slopes = [0.0; MAX_DIM];
    for d in 0..dim {
        let a = q[d] - p[d] as f64;
        factors[d] = tent(a);
        slopes[d] = if a.abs() < 1.0 && a != 0.0 { -a.signum() } else { 0.0 };
    }
    let mut g = [0.0; MAX_DIM];
    for d in 0..dim {
        g[d] = (0..dim).map(|e| if e == d { slopes[e] } else { factors[e] }).product();
    }
    g
}

#[inline]
fn sq_dist(q: &FPoint, p: &IPoint, dim: usize) -> f64 {
    (0..dim).map(|d| (p[d] as f64 - q[d]).powi(2)).sum()
}

/// The Gaussian mixture evaluated on one window.
#[derive(Clone, Debug)]
pub struct MixtureEval {
    /// Mixture weight per window point.
    pub weights: Vec<f64>,
    /// Component `j` normalized over the window, row-major `[j][point]`.
    pub components: Vec<f64>,
}

/// Evaluates `G(p) = sum_j S_j * N(j) * exp(-|p - q|^2 / (2 Sigma_j))` for
/// every `p` in `window`, where `N(j)` normalizes component `j` to unit sum
/// over the window.
pub fn gaussian_mixture_eval(
    q: &FPoint,
    window: &[IPoint],
    scores: &[f64],
    bank: &GaussianBank,
    dim: usize,
) -> MixtureEval {
    let s = bank.s();
    debug_assert_eq!(scores.len(), s);
    let m = window.len();
    let mut weights = vec![0.0; m];
    let mut components = vec![0.0; s * m];
    if m == 0 {
        return MixtureEval { weights, components };
    }
    let dist: Vec<f64> = window.iter().map(|p| sq_dist(q, p, dim)).collect();
    // shifting by the smallest distance keeps tiny variances from underflowing
    let dmin = dist.iter().copied().fold(f64::INFINITY, f64::min);
    for (j, &var) in bank.variances().iter().enumerate() {
        let row = &mut components[j * m..(j + 1) * m];
        let mut z = 0.0;
        for (c, &dd) in row.iter_mut().zip(&dist) {
            *c = (-(dd - dmin) / (2.0 * var)).exp();
            z += *c;
        }
        let norm = 1.0 / z;
        for (c, w) in row.iter_mut().zip(weights.iter_mut()) {
            *c *= norm;
            *w += scores[j] * *c;
        }
    }
    MixtureEval { weights, components }
}

/// Mixture weight at a single window point `p`. Returns 0 for an empty
/// window or a `p` outside it.
pub fn gaussian_mixture_weight(
    q: &FPoint,
    p: &IPoint,
    scores: &[f64],
    bank: &GaussianBank,
    window: &[IPoint],
    dim: usize,
) -> f64 {
    match window.iter().position(|w| w[..dim] == p[..dim]) {
        Some(i) => gaussian_mixture_eval(q, window, scores, bank, dim).weights[i],
        None => 0.0,
    }
}

/// Vector-Jacobian product of the mixture weights: given the normalized
/// `components` of an evaluation and `dw[i] = dL/dG(p_i)`,
/// returns `(dL/dS_j, dL/dq)`. Window membership is held fixed; the
/// dependence of each normalizer on `q` is included.
pub fn gaussian_mixture_vjp(
    q: &FPoint,
    window: &[IPoint],
    scores: &[f64],
    bank: &GaussianBank,
    dim: usize,
    components: &[f64],
    dw: &[f64],
) -> (Vec<f64>, FPoint) {
    let s = bank.s();
    let m = window.len();
    let mut d_scores = vec![0.0; s];
    let mut d_q = [0.0; MAX_DIM];
    if m == 0 {
        return (d_scores, d_q);
    }
    for (j, &var) in bank.variances().iter().enumerate() {
        let comp = &components[j * m..(j + 1) * m];
        // k_j(p) (p - q) averaged under k_j
        let mut mean = [0.0; MAX_DIM];
        for (k, p) in comp.iter().zip(window) {
            for d in 0..dim {
                mean[d] += k * (p[d] as f64 - q[d]);
            }
        }
        let mut ds = 0.0;
        let mut dq = [0.0; MAX_DIM];
        for ((k, p), &u) in comp.iter().zip(window).zip(dw) {
            ds += u * k;
            for d in 0..dim {
                dq[d] += u * k * ((p[d] as f64 - q[d]) - mean[d]);
            }
        }
        d_scores[j] = ds;
        for d in 0..dim {
            d_q[d] += scores[j] * dq[d] / var;
        }
    }
    (d_scores, d_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{interp_window, Extents};

    fn bank(v: &[f64], k: usize) -> GaussianBank {
        GaussianBank::new(v.to_vec(), k).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        assert_eq!(bilinear_weight(&[0.5, 0.5, 0.0], &[0, 0, 0], 2), 0.25);
        assert_eq!(bilinear_weight(&[2.0, 3.0, 0.0], &[2, 3, 0], 2), 1.0);
        assert_eq!(bilinear_weight(&[2.0, 3.0, 0.0], &[3, 3, 0], 2), 0.0);
        assert_eq!(bilinear_weight(&[2.0, 3.0, 0.0], &[2, 2, 0], 2), 0.0);
        assert!((bilinear_weight(&[0.3, 0.0, 0.0], &[1, 0, 0], 3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bilinear_bracket_sums_to_one() {
        let bounds = Extents::new(&[9, 9, 9]).unwrap();
        for i in 0..40 {
            let q = [1.0 + 0.173 * i as f64, 6.9 - 0.131 * i as f64, 2.0 + 0.05 * i as f64];
            for dim in [2, 3] {
                let b = Extents::new(&bounds.as_slice()[..dim]).unwrap();
                let w = interp_window(&q, 2, &b);
                let total: f64 = w.iter().map(|p| bilinear_weight(&q, p, dim)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bank_presets_and_validation() {
        assert_eq!(GaussianBank::intermediate().variances(), &[0.25, 1.0, 4.0, 16.0]);
        assert_eq!(GaussianBank::final_layer().variances()[0], 1.0 / 30.0);
        assert_eq!(GaussianBank::intermediate().k_sigma(), 5);
        assert!(GaussianBank::new(vec![], 5).is_err());
        assert!(GaussianBank::new(vec![1.0, 1.0], 5).is_err());
        assert!(GaussianBank::new(vec![2.0, 1.0], 5).is_err());
        assert!(GaussianBank::new(vec![-1.0], 5).is_err());
        assert!(GaussianBank::new(vec![1.0], 0).is_err());
    }

    #[test]
    fn single_gaussian_is_symmetric_and_normalized() {
        let b = bank(&[2.0], 5);
        let bounds = Extents::new(&[16, 16]).unwrap();
        let q = [7.0, 8.0, 0.0];
        let w = interp_window(&q, 5, &bounds);
        let e = gaussian_mixture_eval(&q, &w, &[1.0], &b, 2);
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (i, p) in w.iter().enumerate() {
            let mirror = [14 - p[0], 16 - p[1], 0];
            let j = w.iter().position(|r| *r == mirror).unwrap();
            assert!((e.weights[i] - e.weights[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_sums_to_one_under_softmax_scores() {
        let b = bank(&[0.25, 1.0, 4.0, 16.0], 5);
        let bounds = Extents::new(&[12, 12]).unwrap();
        let scores = [0.1, 0.2, 0.3, 0.4];
        for i in 0..20 {
            let q = [4.0 + 0.21 * i as f64, 6.5 - 0.07 * i as f64, 0.0];
            let w = interp_window(&q, 5, &bounds);
            let total: f64 = w
                .iter()
                .map(|p| gaussian_mixture_weight(&q, p, &scores, &b, &w, 2))
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_variance_tends_to_a_delta() {
        let b = bank(&[1e-6], 5);
        let bounds = Extents::new(&[10, 10]).unwrap();
        let q = [4.0, 5.0, 0.0];
        let w = interp_window(&q, 5, &bounds);
        for p in &w {
            let g = gaussian_mixture_weight(&q, p, &[1.0], &b, &w, 2);
            let expect = if p[..2] == [4, 5] { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_window_and_foreign_point_give_zero() {
        let b = bank(&[1.0], 3);
        assert_eq!(gaussian_mixture_weight(&[0.0; 3], &[0; 3], &[1.0], &b, &[], 2), 0.0);
        let w = vec![[0, 0, 0]];
        assert_eq!(gaussian_mixture_weight(&[0.0; 3], &[5, 5, 0], &[1.0], &b, &w, 2), 0.0);
    }

    #[test]
    fn spread_entropy_grows_with_variance() {
        let bounds = Extents::new(&[20, 20]).unwrap();
        let q = [9.3, 10.6, 0.0];
        let w = interp_window(&q, 7, &bounds);
        let mut last = -1.0;
        for k in 0..40 {
            let var = 0.02 * 1.25f64.powi(k);
            let e = gaussian_mixture_eval(&q, &w, &[1.0], &bank(&[var], 7), 2);
            let h: f64 = e.weights.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum();
            assert!(h >= last - 1e-12, "entropy fell at variance {var}");
            last = h;
        }
    }

    /// Central differences of `sum_i dw_i G(p_i)` in `q` and in the scores.
    #[test]
    fn vjp_matches_finite_differences() {
        let b = bank(&[0.25, 1.0, 4.0], 5);
        let bounds = Extents::new(&[14, 14, 14]).unwrap();
        for (dim, q) in [(2, [6.3, 7.2, 0.0]), (3, [5.62, 6.21, 7.88])] {
            let bd = Extents::new(&bounds.as_slice()[..dim]).unwrap();
            let w = interp_window(&q, 5, &bd);
            let scores = [0.2, 0.5, 0.3];
            let dw: Vec<f64> = (0..w.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let f = |q: &FPoint, s: &[f64]| -> f64 {
                let e = gaussian_mixture_eval(q, &w, s, &b, dim);
                e.weights.iter().zip(&dw).map(|(a, c)| a * c).sum()
            };
            let e = gaussian_mixture_eval(&q, &w, &scores, &b, dim);
            let (ds, dq) = gaussian_mixture_vjp(&q, &w, &scores, &b, dim, &e.components, &dw);
            let h = 1e-6;
            for d in 0..dim {
                let mut qp = q;
                let mut qm = q;
                qp[d] += h;
                qm[d] -= h;
                let fd = (f(&qp, &scores) - f(&qm, &scores)) / (2.0 * h);
                assert!((fd - dq[d]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", dq[d]);
            }
            for j in 0..3 {
                let mut sp = scores;
                let mut sm = scores;
                sp[j] += h;
                sm[j] -= h;
                let fd = (f(&q, &sp) - f(&q, &sm)) / (2.0 * h);
                assert!((fd - ds[j]).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn bilinear_grad_matches_finite_differences() {
        let q = [1.3, 2.6, 0.45];
        for dim in [2, 3] {
            for p in [[1, 2, 0], [2, 3, 1], [1, 3, 0]] {
                let g = bilinear_weight_grad(&q, &p, dim);
                for d in 0..dim {
                    let mut qp = q;
                    let mut qm = q;
                    qp[d] += 1e-6;
                    qm[d] -= 1e-6;
                    let fd = (bilinear_weight(&qp, &p, dim) - bilinear_weight(&qm, &p, dim)) / 2e-6;
                    assert!((fd - g[d]).abs() < 1e-8);
                }
            }
        }
        assert_eq!(bilinear_weight_grad(&[2.0, 3.0, 0.0], &[2, 3, 0], 2), [0.0; 3]);
    }
}
