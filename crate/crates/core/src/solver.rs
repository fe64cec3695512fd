//! SPD solves `P x = b` and colored Gaussian noise.
//!
//! The default path is preconditioned conjugate gradient on a
//! [`LinearOperator`]; the dense path assembles the operator and runs a
//! Cholesky factorization. Neither path touches an RNG.


use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::structure::{LinearOperator, PrecisionOperator};

const RESIDUAL_GUARD: f64 = 1e-30;
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Cg,
    Cholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    Jacobi,
}

macro_rules! text_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+) => {
        impl ::std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err($crate::Error::invalid(format!(
                        concat!("unknown ", $what, " {:?} (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $name,)+
                })
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(SolverMethod, "solver method", Cg => "cg", Cholesky => "cholesky");
text_enum!(Preconditioner, "preconditioner", None => "none", Jacobi => "jacobi");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Target for `‖P x − b‖ / ‖b‖`.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub preconditioner: Preconditioner,
    /// Largest dimension the dense paths will assemble.
    pub dense_cap: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Cg,
            cg_tol: 1e-6,
            cg_max_iter: 50,
            preconditioner: Preconditioner::Jacobi,
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tol > 0.0) {
            return Err(Error::invalid(format!("cg_tol must be positive, got {}", self.cg_tol)));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::invalid("cg_max_iter must be at least 1"));
        }
        Ok(())
    }

    pub fn cg(tol: f64, max_iter: usize) -> Self {
        SolverConfig {
            cg_tol: tol,
            cg_max_iter: max_iter,
            ..Default::default()
        }
    }

    pub fn cholesky() -> Self {
        SolverConfig {
            method: SolverMethod::Cholesky,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual(op: &impl LinearOperator, x: &[f64], b: &[f64], out: &mut [f64]) {
    op.apply(x, out);
    for (r, bi) in out.iter_mut().zip(b) {
        *r = bi - *r;
    }
}

pub fn solve_spd(op: &impl LinearOperator, b: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolveReport)> {
    solve_spd_from(op, b, None, cfg)
}

/// As [`solve_spd`], with an optional CG starting point.
pub fn solve_spd_from(
    op: &impl LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let n = op.dim();
    check_len(n, b.len())?;
    if let Some(x0) = x0 {
        check_len(n, x0.len())?;
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("right-hand side is not finite"));
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], SolveReport { converged: true, ..Default::default() }));
    }
    match cfg.method {
        SolverMethod::Cholesky => {
            let factor = CholeskyFactor::from_operator(op, cfg.dense_cap)?;
            let x = factor.solve(b)?;
            let mut r = vec![0.0; n];
            residual(op, &x, b, &mut r);
            Ok((
                x,
                SolveReport {
                    iterations: 1,
                    final_relative_residual: norm(&r) / b_norm.max(RESIDUAL_GUARD),
                    converged: true,
                },
            ))
        }
        SolverMethod::Cg => Ok(pcg(op, b, x0, cfg, b_norm)),
    }
}

fn pcg(
    op: &impl LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &SolverConfig,
    b_norm: f64,
) -> (Vec<f64>, SolveReport) {
    let n = op.dim();
    let scale = b_norm.max(RESIDUAL_GUARD);
    let inv_diag: Vec<f64> = match cfg.preconditioner {
        Preconditioner::Jacobi => op
            .diagonal()
            .into_iter()
            .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect(),
        Preconditioner::None => vec![1.0; n],
    };
    let precondition = |r: &[f64], z: &mut [f64]| {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&inv_diag) {
            *zi = ri * di;
        }
    };

    let mut x = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let mut r = vec![0.0; n];
    residual(op, &x, b, &mut r);
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut rel = norm(&r) / scale;
    let mut best = (rel, x.clone());
    let mut iterations = 0;
    // A recursive residual can drift below tolerance while the true one has
    // not; one restart from the true residual is allowed.
    let mut restarts = 0;

    'outer: loop {
        precondition(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        while rel > cfg.cg_tol {
            if iterations == cfg.cg_max_iter {
                break 'outer;
            }
            iterations += 1;
            op.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break 'outer;
            }
            let step = rz / pap;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            rel = norm(&r) / scale;
            if rel < best.0 {
                best = (rel, x.clone());
            }
            precondition(&r, &mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        residual(op, &x, b, &mut r);
        rel = norm(&r) / scale;
        if rel <= cfg.cg_tol || restarts == 1 {
            best = (rel, x.clone());
            break;
        }
        restarts += 1;
    }

    let (rel, x) = if best.0 <= rel { best } else { (rel, x) };
    let mut r_true = vec![0.0; n];
    residual(op, &x, b, &mut r_true);
    let final_relative_residual = norm(&r_true) / scale;
    (
        x,
        SolveReport {
            iterations,
            final_relative_residual,
            converged: final_relative_residual <= cfg.cg_tol && rel.is_finite(),
        },
    )
}

/// Dense lower Cholesky factor `L` with `L Lᵀ = A`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    l: Vec<f64>,
}

impl CholeskyFactor {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_len(n, a.ncols())?;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(CholeskyFactor { dim: n, l })
    }

    /// Assembles `op` densely (subject to `cap`) and factors it.
    pub fn from_operator(op: &impl LinearOperator, cap: usize) -> Result<Self> {
        if op.dim() > cap {
            return Err(Error::DenseCapExceeded { dim: op.dim(), cap });
        }
        Self::factor(&op.to_dense())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.l)
    }

    /// `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        check_len(n, b.len())?;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        Ok(y)
    }

    /// `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        check_len(n, y.len())?;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        Ok(x)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_upper(&self.solve_lower(b)?)
    }

    /// `L v`.
    pub fn mul_lower(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        check_len(n, v.len())?;
        Ok((0..n)
            .map(|i| (0..=i).map(|k| self.l[i * n + k] * v[k]).sum())
            .collect())
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| 2.0 * self.l[i * self.dim + i].ln()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDirection {
    /// Covariance `s Ω`.
    Precision,
    /// Covariance `(s Ω)⁻¹`.
    Covariance,
}

/// A factor `B` with `B Bᵀ = Ω`, reusable across draws.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseFactor {
    Diagonal(Vec<f64>),
    Dense(CholeskyFactor),
}

impl NoiseFactor {
    /// Diagonal operators factor elementwise; anything else needs a dense
    /// Cholesky within `cap`.
    pub fn new(op: &PrecisionOperator, cap: usize) -> Result<Self> {
        if op.is_diagonal() {
            let mut roots = Vec::with_capacity(op.dim());
            for (i, &d) in op.diag().iter().enumerate() {
                if !(d > 0.0) {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: d });
                }
                roots.push(d.sqrt());
            }
            Ok(NoiseFactor::Diagonal(roots))
        } else {
            Ok(NoiseFactor::Dense(CholeskyFactor::from_operator(op, cap)?))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseFactor::Diagonal(d) => d.len(),
            NoiseFactor::Dense(f) => f.dim(),
        }
    }

    /// Maps a standard normal vector to a draw with the requested covariance.
    pub fn color(&self, eps: &[f64], scale: f64, direction: NoiseDirection) -> Result<Vec<f64>> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("noise scale must be positive, got {scale}")));
        }
        check_len(self.dim(), eps.len())?;
        let root = scale.sqrt();
        Ok(match (self, direction) {
            (NoiseFactor::Diagonal(d), NoiseDirection::Precision) => {
                eps.iter().zip(d).map(|(e, r)| root * r * e).collect()
            }
            (NoiseFactor::Diagonal(d), NoiseDirection::Covariance) => {
                eps.iter().zip(d).map(|(e, r)| e / (root * r)).collect()
            }
            (NoiseFactor::Dense(f), NoiseDirection::Precision) => {
                f.mul_lower(eps)?.into_iter().map(|v| root * v).collect()
            }
            (NoiseFactor::Dense(f), NoiseDirection::Covariance) => {
                let scaled: Vec<f64> = eps.iter().map(|e| e / root).collect();
                f.solve_upper(&scaled)?
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, scale: f64, direction: NoiseDirection, rng: &mut R) -> Result<Vec<f64>> {
        let eps = standard_normal(self.dim(), rng);
        self.color(&eps, scale, direction)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// One colored draw; see [`NoiseFactor`] to amortise the factorization.
pub fn sample_noise_with_covariance<R: Rng + ?Sized>(
    op: &PrecisionOperator,
    scale: f64,
    direction: NoiseDirection,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("noise scale must be positive, got {scale}")));
    }
    NoiseFactor::new(op, DEFAULT_DENSE_CAP)?.sample(scale, direction, rng)
}
