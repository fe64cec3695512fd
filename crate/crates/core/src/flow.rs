//! Accuracy schedules, flow-state sampling and the natural-parameter belief.
//!
//! The belief over a channel is `N(θ, P⁻¹)` with `P = Ω_prior + β Ω_obs`.
//! Fusing a message `y` with accuracy `α` adds `α Ω_obs y` to the natural
//! parameter `h = P θ` and `α` to `β`; the mean is recovered by an SPD solve.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::solver::{solve_spd_from, standard_normal, text_enum, NoiseDirection, NoiseFactor, SolveReport, SolverConfig};
use crate::structure::{FusedOperator, PrecisionOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Node,
    Edge,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Node => "node",
            Channel::Edge => "edge",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossConvention {
    /// `−ln σ₁ · σ₁^{−2t}`, the weight of the discretized training loop.
    Algorithmic,
    /// `α(t) β(t) / 2` with `α = dβ/dt`.
    Continuous,
}

text_enum!(LossConvention, "loss-weight convention", Algorithmic => "algorithmic", Continuous => "continuous");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub sigma1_node: f64,
    pub sigma1_edge: f64,
    pub steps: usize,
    pub t_min: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            sigma1_node: 0.2,
            sigma1_edge: 0.2,
            steps: 1000,
            t_min: 1e-4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma1_node", self.sigma1_node), ("sigma1_edge", self.sigma1_edge)] {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {s}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::invalid(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        Ok(())
    }

    pub fn sigma1(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Node => self.sigma1_node,
            Channel::Edge => self.sigma1_edge,
        }
    }

    /// `max(t, t_min)`.
    pub fn clamp(&self, t: f64) -> f64 {
        t.max(self.t_min)
    }

    /// `β(t) = σ₁^{−2t} − 1`. No clamping is applied here.
    pub fn beta_at(&self, channel: Channel, t: f64) -> f64 {
        self.sigma1(channel).powf(-2.0 * t) - 1.0
    }

    /// `max(β(t) − β(t_prev), 0)`.
    pub fn alpha_increment(&self, channel: Channel, t_prev: f64, t: f64) -> f64 {
        (self.beta_at(channel, t) - self.beta_at(channel, t_prev)).max(0.0)
    }

    pub fn loss_weight(&self, channel: Channel, t: f64, convention: LossConvention) -> f64 {
        let s = self.sigma1(channel);
        let growth = s.powf(-2.0 * t);
        match convention {
            LossConvention::Algorithmic => -s.ln() * growth,
            LossConvention::Continuous => {
                let alpha = -2.0 * s.ln() * growth;
                alpha * self.beta_at(channel, t) / 2.0
            }
        }
    }
}

fn fused_mean(
    prior: &PrecisionOperator,
    obs: &PrecisionOperator,
    beta: f64,
    rhs: &[f64],
    warm: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    let op = FusedOperator::new(prior, obs, beta)?;
    solve_spd_from(&op, rhs, warm, cfg)
}

/// Flow state for a given standard normal vector `eps`:
/// `θ = P⁻¹(β Ω_obs z + √β B eps)` with `B Bᵀ = Ω_obs`, then masked.
#[allow(clippy::too_many_arguments)]
pub fn flow_state_from_noise(
    z: &[f64],
    prior: &PrecisionOperator,
    obs: &PrecisionOperator,
    obs_factor: &NoiseFactor,
    beta: f64,
    eps: &[f64],
    mask: Option<&[bool]>,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    let dim = prior.dim();
    check_len(dim, z.len())?;
    check_len(dim, eps.len())?;
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be nonnegative, got {beta}")));
    }
    if beta == 0.0 {
        return Ok((vec![0.0; dim], SolveReport { converged: true, ..Default::default() }));
    }
    let mut rhs = obs.matvec(z)?;
    let noise = obs_factor.color(eps, beta, NoiseDirection::Precision)?;
    for (r, e) in rhs.iter_mut().zip(noise) {
        *r = beta * *r + e;
    }
    let (mut theta, report) = fused_mean(prior, obs, beta, &rhs, None, cfg)?;
    if let Some(mask) = mask {
        check_len(dim, mask.len())?;
        for (v, &m) in theta.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    Ok((theta, report))
}

/// Draws `θ ~ p_F(· | z; β)` with prior mean zero.
#[allow(clippy::too_many_arguments)]
pub fn sample_flow_state<R: Rng + ?Sized>(
    z: &[f64],
    prior: &PrecisionOperator,
    obs: &PrecisionOperator,
    obs_factor: &NoiseFactor,
    beta: f64,
    mask: Option<&[bool]>,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    let eps = standard_normal(prior.dim(), rng);
    flow_state_from_noise(z, prior, obs, obs_factor, beta, &eps, mask, cfg)
}

/// Gaussian belief in natural parameters.
#[derive(Debug, Clone)]
pub struct BeliefState<'a> {
    pub h: Vec<f64>,
    pub beta_acc: f64,
    prior: &'a PrecisionOperator,
    obs: &'a PrecisionOperator,
    cached_mean: Option<Vec<f64>>,
    /// Last solved mean, kept as a CG starting point after invalidation.
    warm: Option<Vec<f64>>,
}

impl<'a> BeliefState<'a> {
    /// `h = Ω_prior θ₀`, `β = 0`.
    pub fn init(prior: &'a PrecisionOperator, obs: &'a PrecisionOperator, theta0: &[f64]) -> Result<Self> {
        check_len(prior.dim(), obs.dim())?;
        let h = prior.matvec(theta0)?;
        Ok(BeliefState {
            h,
            beta_acc: 0.0,
            prior,
            obs,
            cached_mean: Some(theta0.to_vec()),
            warm: None,
        })
    }

    pub fn zero(prior: &'a PrecisionOperator, obs: &'a PrecisionOperator) -> Result<Self> {
        Self::init(prior, obs, &vec![0.0; prior.dim()])
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// `h += α Ω_obs y`, `β += α`.
    pub fn fuse(&mut self, y: &[f64], alpha: f64) -> Result<()> {
        check_len(self.dim(), y.len())?;
        if !(alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be nonnegative, got {alpha}")));
        }
        if alpha == 0.0 {
            return Ok(());
        }
        let oy = self.obs.matvec(y)?;
        for (h, v) in self.h.iter_mut().zip(oy) {
            *h += alpha * v;
        }
        self.beta_acc += alpha;
        if let Some(m) = self.cached_mean.take() {
            self.warm = Some(m);
        }
        Ok(())
    }

    /// Solves `(Ω_prior + β Ω_obs) θ = h`, caching the result.
    pub fn posterior_mean(&mut self, cfg: &SolverConfig) -> Result<(Vec<f64>, SolveReport)> {
        if let Some(m) = &self.cached_mean {
            return Ok((m.clone(), SolveReport { converged: true, ..Default::default() }));
        }
        let (mean, report) = fused_mean(self.prior, self.obs, self.beta_acc, &self.h, self.warm.as_deref(), cfg)?;
        self.cached_mean = Some(mean.clone());
        Ok((mean, report))
    }

    pub fn mean_is_cached(&self) -> bool {
        self.cached_mean.is_some()
    }
}

/// `(ωp θ₀ + β ωo y) / (ωp + β ωo)`.
pub fn diagonal_fusion_reference(omega_prior: f64, omega_obs: f64, beta: f64, theta0: f64, y: f64) -> f64 {
    (omega_prior * theta0 + beta * omega_obs * y) / (omega_prior + beta * omega_obs)
}

/// Factorized Gaussian belief with a scalar precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalBelief {
    pub mu: Vec<f64>,
    pub rho: f64,
}

impl ClassicalBelief {
    /// `ρ' = ρ + α`, `μ' = (ρ μ + α y) / ρ'`.
    pub fn update(&self, y: &[f64], alpha: f64) -> Result<ClassicalBelief> {
        check_len(self.mu.len(), y.len())?;
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        let rho = self.rho + alpha;
        Ok(ClassicalBelief {
            mu: self.mu.iter().zip(y).map(|(m, v)| (self.rho * m + alpha * v) / rho).collect(),
            rho,
        })
    }
}

/// `½‖u − θ₀‖²_{Ωp} + (β/2)‖y − u‖²_{Ωo}`.
pub fn posterior_energy(
    theta0: &[f64],
    prior: &PrecisionOperator,
    y: &[f64],
    obs: &PrecisionOperator,
    beta: f64,
    u: &[f64],
) -> Result<f64> {
    check_len(prior.dim(), theta0.len())?;
    check_len(prior.dim(), u.len())?;
    let du: Vec<f64> = u.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let dy: Vec<f64> = y.iter().zip(u).map(|(a, b)| a - b).collect();
    Ok(0.5 * prior.quad_form(&du)? + 0.5 * beta * obs.quad_form(&dy)?)
}

/// Gradient of [`posterior_energy`] in `u`: `Ωp(u − θ₀) − β Ωo(y − u)`.
pub fn posterior_energy_grad(
    theta0: &[f64],
    prior: &PrecisionOperator,
    y: &[f64],
    obs: &PrecisionOperator,
    beta: f64,
    u: &[f64],
) -> Result<Vec<f64>> {
    let du: Vec<f64> = u.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let dy: Vec<f64> = y.iter().zip(u).map(|(a, b)| a - b).collect();
    let gp = prior.matvec(&du)?;
    let go = obs.matvec(&dy)?;
    Ok(gp.iter().zip(go).map(|(a, b)| a - beta * b).collect())
}
