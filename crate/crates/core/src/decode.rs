//! Truncated-Gaussian decoding of continuous predictions into classes, and
//! the structured KL between sender and receiver.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::graph::{ClassGrid, NULL_CLASS};
use crate::solver::text_enum;
use crate::structure::PrecisionOperator;

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const EPS_PROB: f64 = 1e-12;

/// Per-entry Gaussian parameters `(μ, σ)` with `σ > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        check_len(mu.len(), sigma.len())?;
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("sigma must be positive, got {s}")));
        }
        Ok(GaussianParams { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Per-entry categorical distributions, `k` probabilities per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    pub k: usize,
    pub probs: Vec<f64>,
}

impl CategoricalField {
    pub fn len(&self) -> usize {
        self.probs.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }
}

fn std_normal_cdf(u: f64) -> f64 {
    0.5 * (1.0 + libm::erf(u * FRAC_1_SQRT_2))
}

fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Gaussian CDF truncated to `[−1, 1]`: 0 below, 1 above.
pub fn truncated_cdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(trunc_cdf(x, mu, sigma))
}

fn trunc_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    if x <= -1.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        std_normal_cdf((x - mu) / sigma)
    }
}

/// `(F, ∂F/∂μ, ∂F/∂σ)` of the truncated CDF at `x`.
fn trunc_cdf_grad(x: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    if x <= -1.0 {
        (0.0, 0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let u = (x - mu) / sigma;
        let d = std_normal_pdf(u);
        (std_normal_cdf(u), -d / sigma, -d * u / sigma)
    }
}

/// Class masses of one entry, floored at `eps_prob` and renormalized.
pub fn entry_probabilities(mu: f64, sigma: f64, grid: &ClassGrid, eps_prob: f64, out: &mut [f64]) {
    let mut total = 0.0;
    for k in 0..grid.k() {
        let mass = trunc_cdf(grid.uppers[k], mu, sigma) - trunc_cdf(grid.lowers[k], mu, sigma);
        out[k] = mass.max(eps_prob);
        total += out[k];
    }
    out.iter_mut().for_each(|p| *p /= total);
}

/// Expected class center of one entry and its derivatives in `μ` and `σ`.
pub fn expected_center_grad(mu: f64, sigma: f64, grid: &ClassGrid, eps_prob: f64) -> (f64, f64, f64) {
    // center = W / S with W = Σ m_c c_c and S = Σ m_c; floored masses are
    // constant in (μ, σ).
    let (mut s, mut w) = (0.0, 0.0);
    let (mut ds_mu, mut dw_mu, mut ds_sig, mut dw_sig) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..grid.k() {
        let (fu, fu_m, fu_s) = trunc_cdf_grad(grid.uppers[c], mu, sigma);
        let (fl, fl_m, fl_s) = trunc_cdf_grad(grid.lowers[c], mu, sigma);
        let raw = fu - fl;
        let center = grid.centers[c];
        if raw > eps_prob {
            s += raw;
            w += raw * center;
            ds_mu += fu_m - fl_m;
            dw_mu += (fu_m - fl_m) * center;
            ds_sig += fu_s - fl_s;
            dw_sig += (fu_s - fl_s) * center;
        } else {
            s += eps_prob;
            w += eps_prob * center;
        }
    }
    let center = w / s;
    (center, (dw_mu - center * ds_mu) / s, (dw_sig - center * ds_sig) / s)
}

/// Masked entries receive the null distribution (all mass on class 1).
pub fn class_probabilities(params: &GaussianParams, grid: &ClassGrid, mask: &[bool], eps_prob: f64) -> Result<CategoricalField> {
    check_len(params.len(), mask.len())?;
    let k = grid.k();
    let mut probs = vec![0.0; params.len() * k];
    for (i, chunk) in probs.chunks_mut(k).enumerate() {
        if mask[i] {
            entry_probabilities(params.mu[i], params.sigma[i], grid, eps_prob, chunk);
        } else {
            chunk[(NULL_CLASS - 1) as usize] = 1.0;
        }
    }
    Ok(CategoricalField { k, probs })
}

pub fn expected_center(field: &CategoricalField, grid: &ClassGrid) -> Result<Vec<f64>> {
    check_len(grid.k(), field.k)?;
    Ok(field
        .probs
        .chunks(field.k)
        .map(|p| p.iter().zip(&grid.centers).map(|(a, b)| a * b).sum())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Argmax,
    Sample,
}

text_enum!(DecodeMode, "decode mode", Argmax => "argmax", Sample => "sample");

/// 1-based class of the largest probability, lowest index on ties.
pub fn argmax_class(p: &[f64]) -> u32 {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best as u32 + 1
}

fn sample_class<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > 0.0 {
            last = k;
            acc += v;
            if u < acc {
                return k as u32 + 1;
            }
        }
    }
    last as u32 + 1
}

pub fn decode_discrete<R: Rng + ?Sized>(field: &CategoricalField, mode: DecodeMode, rng: Option<&mut R>) -> Result<Vec<u32>> {
    let entries = field.probs.chunks(field.k.max(1));
    match mode {
        DecodeMode::Argmax => Ok(entries.map(argmax_class).collect()),
        DecodeMode::Sample => {
            let rng = rng.ok_or_else(|| Error::invalid("sample decoding needs an rng"))?;
            Ok(entries.map(|p| sample_class(p, rng)).collect())
        }
    }
}

/// `(β/2) (z − ẑ)ᵀ Ω_obs (z − ẑ)`.
pub fn structured_kl(z: &[f64], z_hat: &[f64], obs: &PrecisionOperator, beta: f64) -> Result<f64> {
    check_len(z.len(), z_hat.len())?;
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be nonnegative, got {beta}")));
    }
    let d: Vec<f64> = z.iter().zip(z_hat).map(|(a, b)| a - b).collect();
    Ok(0.5 * beta * obs.quad_form(&d)?)
}

/// `KL(N(m1, s1) ‖ N(m2, s2))` from dense covariances.
pub fn gaussian_kl(m1: &[f64], s1: &DMatrix<f64>, m2: &[f64], s2: &DMatrix<f64>) -> Result<f64> {
    let n = m1.len();
    check_len(n, m2.len())?;
    check_len(n, s1.nrows())?;
    check_len(n, s2.nrows())?;
    let not_spd = |which: &str| Error::invalid(format!("{which} covariance is not positive definite"));
    let c1 = s1.clone().cholesky().ok_or_else(|| not_spd("first"))?;
    let c2 = s2.clone().cholesky().ok_or_else(|| not_spd("second"))?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| -> f64 {
        c.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    };
    let trace = c2.solve(s1).trace();
    let dm = DVector::from_iterator(n, m2.iter().zip(m1).map(|(a, b)| a - b));
    let quad = dm.dot(&c2.solve(&dm));
    Ok(0.5 * (trace - n as f64 + quad + logdet(&c2) - logdet(&c1)))
}

/// KL between two Gaussians sharing the covariance `sigma`.
pub fn general_gaussian_kl(m1: &[f64], m2: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    gaussian_kl(m1, sigma, m2, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_class_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(mu: f64, sigma: f64, k: usize) -> Vec<f64> {
        let grid = build_class_grid(k).unwrap();
        let mut p = vec![0.0; k];
        entry_probabilities(mu, sigma, &grid, EPS_PROB, &mut p);
        p
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(truncated_cdf(0.0, 0.0, 0.3).unwrap(), 0.5);
        assert_eq!(truncated_cdf(-1.0, 0.2, 0.3).unwrap(), 0.0);
        assert_eq!(truncated_cdf(1.0, 0.2, 0.3).unwrap(), 1.0);
        assert!((truncated_cdf(0.4, 0.1, 0.3).unwrap() - 0.841_344_746).abs() < 1e-8);
        assert!(truncated_cdf(0.0, 0.0, 0.0).is_err());
        let mut prev = 0.0;
        for i in -30..=30 {
            let f = truncated_cdf(i as f64 / 20.0, 0.1, 0.4).unwrap();
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn probability_examples() {
        let p = probs(0.0, 0.37, 2);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!(probs(0.5, 1e-4, 2)[1] >= 1.0 - 1e-9);
        // Φ(2.5)
        assert!((probs(-0.75, 0.1, 4)[0] - 0.993_790_334_6).abs() < 1e-5);
    }

    #[test]
    fn masked_entries_are_null() {
        let grid = build_class_grid(3).unwrap();
        let params = GaussianParams::new(vec![0.9, 0.9], vec![0.1, 0.1]).unwrap();
        let field = class_probabilities(&params, &grid, &[false, true], EPS_PROB).unwrap();
        assert_eq!(field.entry(0), &[1.0, 0.0, 0.0]);
        assert_eq!(decode_discrete::<ChaCha8Rng>(&field, DecodeMode::Argmax, None).unwrap(), vec![1, 3]);
    }

    #[test]
    fn expected_center_examples() {
        let grid = build_class_grid(2).unwrap();
        let field = |p: Vec<f64>| CategoricalField { k: 2, probs: p };
        assert_eq!(expected_center(&field(vec![0.5, 0.5]), &grid).unwrap(), vec![0.0]);
        assert_eq!(expected_center(&field(vec![0.0, 1.0]), &grid).unwrap(), vec![0.5]);
        assert_eq!(expected_center(&field(vec![0.25, 0.75]), &grid).unwrap(), vec![0.25]);
    }

    #[test]
    fn expected_center_is_monotone_in_mu() {
        for k in [2, 3, 5, 8] {
            let grid = build_class_grid(k).unwrap();
            for sigma in [0.05, 0.3, 2.0] {
                let mut prev = f64::NEG_INFINITY;
                for i in -40..=40 {
                    let (c, _, _) = expected_center_grad(i as f64 / 20.0, sigma, &grid, EPS_PROB);
                    assert!(c >= prev - 1e-15, "k={k} sigma={sigma}");
                    assert!(c >= grid.centers[0] - 1e-12 && c <= grid.centers[k - 1] + 1e-12);
                    prev = c;
                }
            }
        }
    }

    #[test]
    fn expected_center_grad_matches_differences() {
        let h = 1e-6;
        for k in [2, 4, 7] {
            let grid = build_class_grid(k).unwrap();
            for &(mu, sigma) in &[(0.1, 0.3), (-0.6, 0.05), (1.4, 0.8), (0.0, 2.0)] {
                let (c, gm, gs) = expected_center_grad(mu, sigma, &grid, EPS_PROB);
                let fd_m = (expected_center_grad(mu + h, sigma, &grid, EPS_PROB).0
                    - expected_center_grad(mu - h, sigma, &grid, EPS_PROB).0)
                    / (2.0 * h);
                let fd_s = (expected_center_grad(mu, sigma + h, &grid, EPS_PROB).0
                    - expected_center_grad(mu, sigma - h, &grid, EPS_PROB).0)
                    / (2.0 * h);
                assert!((gm - fd_m).abs() < 1e-6, "k={k} mu={mu}: {gm} vs {fd_m}");
                assert!((gs - fd_s).abs() < 1e-6, "k={k} sigma={sigma}: {gs} vs {fd_s}");
                let mut p = vec![0.0; k];
                entry_probabilities(mu, sigma, &grid, EPS_PROB, &mut p);
                let direct: f64 = p.iter().zip(&grid.centers).map(|(a, b)| a * b).sum();
                assert!((direct - c).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn normalization_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let k = rng.random_range(1..=16);
            let p = probs(rng.random_range(-2.0..2.0), rng.random_range(1e-4..3.0), k);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn decode_examples() {
        let f = |p: Vec<f64>| CategoricalField { k: 2, probs: p };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(decode_discrete::<ChaCha8Rng>(&f(vec![0.9, 0.1]), DecodeMode::Argmax, None).unwrap(), vec![1]);
        assert_eq!(decode_discrete::<ChaCha8Rng>(&f(vec![0.5, 0.5]), DecodeMode::Argmax, None).unwrap(), vec![1]);
        for _ in 0..100 {
            assert_eq!(decode_discrete(&f(vec![0.0, 1.0]), DecodeMode::Sample, Some(&mut rng)).unwrap(), vec![2]);
        }
        assert!(decode_discrete::<ChaCha8Rng>(&f(vec![0.5, 0.5]), DecodeMode::Sample, None).is_err());
    }

    #[test]
    fn kl_examples() {
        let two = PrecisionOperator::from_diagonal(vec![2.0]);
        assert_eq!(structured_kl(&[0.3], &[0.3], &two, 4.0).unwrap(), 0.0);
        assert_eq!(structured_kl(&[1.0], &[0.0], &two, 1.0).unwrap(), 1.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(general_gaussian_kl(&[0.5], &[0.5], &one).unwrap(), 0.0);
        assert!((general_gaussian_kl(&[0.0], &[2.0], &one).unwrap() - 2.0).abs() < 1e-15);
        let a = general_gaussian_kl(&[0.0, 1.0], &[2.0, -1.0], &DMatrix::identity(2, 2)).unwrap();
        let b = general_gaussian_kl(&[5.0, 6.0], &[7.0, 4.0], &DMatrix::identity(2, 2)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(general_gaussian_kl(&[0.0], &[1.0], &DMatrix::from_element(1, 1, -1.0)).is_err());
    }
}
