//! Representation-induced dependency graphs and the sparse precision
//! operators built from them.
//!
//! A [`DependencyGraph`] couples entries of the graph signal without ever
//! reading sample adjacency values. Its weighted Laplacian `L = Δ − W`,
//! masked and floored as `M L M + εI`, gives the prior precision; the
//! observation precision is derived from the same graph.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::graph::EdgeVectorization;

/// Symmetric linear operator `x ↦ A x` on `R^dim`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// `y ← A x`. Both slices have length `dim`.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    fn diagonal(&self) -> Vec<f64>;

    /// Upper bounds on the off-diagonal absolute row sums.
    fn offdiag_abs_row_sums(&self) -> Vec<f64>;

    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }

    /// Gershgorin enclosure `(lower, upper)` of the spectrum.
    fn gershgorin(&self) -> (f64, f64) {
        let d = self.diagonal();
        let r = self.offdiag_abs_row_sums();
        let lo = d.iter().zip(&r).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
        let hi = d.iter().zip(&r).map(|(a, b)| a + b).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Undirected weighted graph over `dim` signal entries; each pair stored
/// once with `u < v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub dim: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl DependencyGraph {
    /// Normalises orientation and rejects duplicates, self-pairs,
    /// out-of-range indices and negative weights.
    pub fn new(dim: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (u, v, w) in edges {
            if u >= dim || v >= dim {
                return Err(Error::invalid(format!("edge ({u}, {v}) outside dim {dim}")));
            }
            if u == v {
                return Err(Error::invalid(format!("self-pair ({u}, {u})")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("weight {w} on ({u}, {v}) is not a finite nonnegative number")));
            }
            let key = (u.min(v), u.max(v));
            if seen.insert(key, w).is_some() {
                return Err(Error::invalid(format!("duplicate pair {key:?}")));
            }
        }
        Ok(DependencyGraph {
            dim,
            edges: seen.into_iter().map(|((u, v), w)| (u, v, w)).collect(),
        })
    }

    pub fn empty(dim: usize) -> Self {
        DependencyGraph { dim, edges: Vec::new() }
    }

    /// Weighted degree of every vertex.
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for &(u, v, w) in &self.edges {
            d[u] += w;
            d[v] += w;
        }
        d
    }
}

/// Index of node entry `(i, c)` in the joint signal.
pub fn joint_x_index(d_x: usize, i: usize, c: usize) -> usize {
    i * d_x + c
}

/// Index of edge entry `(i, j, c)` in the joint signal.
pub fn joint_a_index(n: usize, d_x: usize, d_a: usize, i: usize, j: usize, c: usize) -> usize {
    n * d_x + (i * n + j) * d_a + c
}

fn check_coupling(name: &str, lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and nonnegative, got {lambda}")))
    }
}

/// Joint dependency graph over all entries of `X` followed by all entries of
/// `A`: incidence couplings between node entries and every edge entry they
/// touch (weight `lambda_x`), plus `(i,j,c)`–`(j,i,c)` symmetry couplings
/// (weight `lambda_a`) when `include_symmetry` is set.
///
/// The incidence relation is a set: for a diagonal entry `(i, i, c')` the two
/// incidence pairs coincide and are stored once.
pub fn build_joint_dependency(
    n: usize,
    d_x: usize,
    d_a: usize,
    lambda_x: f64,
    lambda_a: f64,
    include_symmetry: bool,
) -> Result<DependencyGraph> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    check_coupling("lambda_x", lambda_x)?;
    check_coupling("lambda_a", lambda_a)?;
    let dim = n * d_x + n * n * d_a;
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        for j in 0..n {
            for ca in 0..d_a {
                let a = joint_a_index(n, d_x, d_a, i, j, ca);
                for cx in 0..d_x {
                    for node in [i, j] {
                        let x = joint_x_index(d_x, node, cx);
                        pairs.insert((x.min(a), x.max(a)), lambda_x);
                    }
                }
            }
        }
    }
    if include_symmetry {
        for i in 0..n {
            for j in i + 1..n {
                for c in 0..d_a {
                    let u = joint_a_index(n, d_x, d_a, i, j, c);
                    let v = joint_a_index(n, d_x, d_a, j, i, c);
                    pairs.insert((u, v), lambda_a);
                }
            }
        }
    }
    DependencyGraph::new(dim, pairs.into_iter().map(|((u, v), w)| (u, v, w)))
}

/// Per feature channel, a complete graph over the `n` node slots.
pub fn build_node_dependency_complete(n: usize, d_x: usize, lambda_x: f64) -> Result<DependencyGraph> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    check_coupling("lambda_x", lambda_x)?;
    let mut edges = Vec::new();
    for c in 0..d_x {
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i * d_x + c, j * d_x + c, lambda_x));
            }
        }
    }
    DependencyGraph::new(n * d_x, edges)
}

/// Line graph of `K_n` over the upper-triangle edge slots (row-major, the
/// order of [`EdgeVectorization::full`]), per edge channel.
pub fn build_edge_dependency_line_complete(n: usize, d_a: usize, lambda_a: f64) -> Result<DependencyGraph> {
    check_coupling("lambda_a", lambda_a)?;
    let slots = EdgeVectorization::full(n, false).pairs;
    let mut edges = Vec::new();
    for (e, &(i, j)) in slots.iter().enumerate() {
        for (f, &(k, l)) in slots.iter().enumerate().skip(e + 1) {
            if i == k || i == l || j == k || j == l {
                for c in 0..d_a {
                    edges.push((e * d_a + c, f * d_a + c, lambda_a));
                }
            }
        }
    }
    DependencyGraph::new(slots.len() * d_a, edges)
}

/// Sparse symmetric operator: a diagonal plus off-diagonal entries in CSR
/// form (both triangles stored).
///
/// `floor` records a multiple of the identity that was added on top of a
/// masked Laplacian by the builders below; it is zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionOperator {
    dim: usize,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    floor: f64,
}

impl PrecisionOperator {
    /// Assembles `diag + Σ off (u,v,w)` symmetrically; repeated pairs add.
    pub fn from_parts(dim: usize, diag: Vec<f64>, off: &[(usize, usize, f64)]) -> Result<Self> {
        check_len(dim, diag.len())?;
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); dim];
        for &(u, v, w) in off {
            if u >= dim || v >= dim || u == v {
                return Err(Error::invalid(format!("bad off-diagonal entry ({u}, {v})")));
            }
            if w == 0.0 {
                continue;
            }
            *rows[u].entry(v).or_insert(0.0) += w;
            *rows[v].entry(u).or_insert(0.0) += w;
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(PrecisionOperator {
            dim,
            diag,
            row_ptr,
            cols,
            vals,
            floor: 0.0,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(vec![1.0; dim])
    }

    pub fn from_diagonal(diag: Vec<f64>) -> Self {
        let dim = diag.len();
        PrecisionOperator {
            dim,
            diag,
            row_ptr: vec![0; dim + 1],
            cols: Vec::new(),
            vals: Vec::new(),
            floor: 0.0,
        }
    }

    /// Builds from a dense symmetric matrix (entries below `1e-300` in
    /// magnitude are dropped).
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        check_len(n, m.ncols())?;
        let diag = (0..n).map(|i| m[(i, i)]).collect();
        let mut off = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                    return Err(Error::invalid(format!("matrix not symmetric at ({i}, {j})")));
                }
                if m[(i, j)].abs() > 1e-300 {
                    off.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_parts(n, diag, &off)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn is_diagonal(&self) -> bool {
        self.cols.is_empty()
    }

    /// Stored nonzeros, counting both triangles and the diagonal.
    pub fn nnz(&self) -> usize {
        self.diag.iter().filter(|&&d| d != 0.0).count() + self.cols.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal entries with `u < v`.
    pub fn upper_entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for u in 0..self.dim {
            for k in self.row_ptr[u]..self.row_ptr[u + 1] {
                if self.cols[k] > u {
                    out.push((u, self.cols[k], self.vals[k]));
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, v.len())?;
        let mut out = vec![0.0; self.dim];
        self.apply(v, &mut out);
        Ok(out)
    }

    /// `x ↦ xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        let ax = self.matvec(x)?;
        Ok(x.iter().zip(&ax).map(|(a, b)| a * b).sum())
    }

    /// `self + shift·I`, remembering the shift as the operator floor.
    pub fn with_floor(mut self, shift: f64) -> Self {
        for d in &mut self.diag {
            *d += shift;
        }
        self.floor += shift;
        self
    }

    /// The operator with its recorded floor removed.
    pub fn without_floor(&self) -> Self {
        let mut out = self.clone();
        for d in &mut out.diag {
            *d -= self.floor;
        }
        out.floor = 0.0;
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.diag.iter_mut().for_each(|d| *d *= s);
        out.vals.iter_mut().for_each(|v| *v *= s);
        out.floor *= s;
        out
    }

    /// Diagonal part only.
    pub fn diagonal_part(&self) -> Self {
        let mut out = Self::from_diagonal(self.diag.clone());
        out.floor = self.floor;
        out
    }
}

impl LinearOperator for PrecisionOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for u in 0..self.dim {
            let mut acc = self.diag[u] * x[u];
            for k in self.row_ptr[u]..self.row_ptr[u + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[u] = acc;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.diag.clone()
    }

    fn offdiag_abs_row_sums(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|u| self.vals[self.row_ptr[u]..self.row_ptr[u + 1]].iter().map(|v| v.abs()).sum())
            .collect()
    }
}

/// The fused update operator `P = Ω_prior + β Ω_obs`, applied without
/// materialising the sum.
#[derive(Debug, Clone, Copy)]
pub struct FusedOperator<'a> {
    pub prior: &'a PrecisionOperator,
    pub obs: &'a PrecisionOperator,
    pub beta: f64,
}

impl<'a> FusedOperator<'a> {
    pub fn new(prior: &'a PrecisionOperator, obs: &'a PrecisionOperator, beta: f64) -> Result<Self> {
        check_len(prior.dim(), obs.dim())?;
        if !(beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be nonnegative, got {beta}")));
        }
        Ok(FusedOperator { prior, obs, beta })
    }
}

impl LinearOperator for FusedOperator<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.prior.apply(x, y);
        if self.beta != 0.0 {
            let mut tmp = vec![0.0; x.len()];
            self.obs.apply(x, &mut tmp);
            for (a, b) in y.iter_mut().zip(tmp) {
                *a += self.beta * b;
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.prior
            .diag()
            .iter()
            .zip(self.obs.diag())
            .map(|(p, o)| p + self.beta * o)
            .collect()
    }

    fn offdiag_abs_row_sums(&self) -> Vec<f64> {
        let p = self.prior.offdiag_abs_row_sums();
        let o = self.obs.offdiag_abs_row_sums();
        p.iter().zip(o).map(|(a, b)| a + self.beta * b).collect()
    }
}

/// Dense symmetric matrix viewed as an operator.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            y[i] = (0..n).map(|j| self.0[(i, j)] * x[j]).sum();
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    fn offdiag_abs_row_sums(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i).map(|j| self.0[(i, j)].abs()).sum())
            .collect()
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// Binary diagonal mask `M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskOperator {
    pub mask: Vec<bool>,
}

impl MaskOperator {
    pub fn new(mask: Vec<bool>) -> Self {
        MaskOperator { mask }
    }

    pub fn full(dim: usize) -> Self {
        MaskOperator { mask: vec![true; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn apply(&self, v: &mut [f64]) {
        for (x, &m) in v.iter_mut().zip(&self.mask) {
            if !m {
                *x = 0.0;
            }
        }
    }

    /// `M A M`.
    pub fn sandwich(&self, op: &PrecisionOperator) -> Result<PrecisionOperator> {
        check_len(op.dim(), self.dim())?;
        let diag = op
            .diag()
            .iter()
            .zip(&self.mask)
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect();
        let off: Vec<_> = op
            .upper_entries()
            .into_iter()
            .filter(|&(u, v, _)| self.mask[u] && self.mask[v])
            .collect();
        PrecisionOperator::from_parts(op.dim(), diag, &off)
    }
}

/// Weighted combinatorial Laplacian `Δ − W`.
pub fn laplacian(dep: &DependencyGraph) -> PrecisionOperator {
    let off: Vec<_> = dep.edges.iter().map(|&(u, v, w)| (u, v, -w)).collect();
    PrecisionOperator::from_parts(dep.dim, dep.degrees(), &off)
        .expect("dependency graph invariants guarantee valid entries")
}

/// `sᵀ L s = Σ_{stored edges} w (s_u − s_v)²`.
pub fn dirichlet_energy(dep: &DependencyGraph, s: &[f64]) -> Result<f64> {
    check_len(dep.dim, s.len())?;
    Ok(dep
        .edges
        .iter()
        .map(|&(u, v, w)| w * (s[u] - s[v]).powi(2))
        .sum())
}

/// `Ω_prior = M L M + εI`.
pub fn build_prior_precision(dep: &DependencyGraph, mask: &MaskOperator, eps: f64) -> Result<PrecisionOperator> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    check_len(dep.dim, mask.dim())?;
    Ok(mask.sandwich(&laplacian(dep))?.with_floor(eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// `M L M + ε_obs I`, the same Laplacian as the prior.
    Prior,
    /// Diagonal of the `Prior` variant.
    DiagPrior,
    Identity,
}

impl FromStr for ObsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(ObsMode::Prior),
            "diag_prior" => Ok(ObsMode::DiagPrior),
            "identity" => Ok(ObsMode::Identity),
            other => Err(Error::invalid(format!(
                "unknown observation mode {other:?} (expected prior, diag_prior or identity)"
            ))),
        }
    }
}

impl fmt::Display for ObsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObsMode::Prior => "prior",
            ObsMode::DiagPrior => "diag_prior",
            ObsMode::Identity => "identity",
        })
    }
}

/// Observation precision derived from a prior built by
/// [`build_prior_precision`]: the prior's floor is replaced by `eps_obs`.
pub fn build_obs_precision(prior: &PrecisionOperator, mode: ObsMode, eps_obs: f64) -> Result<PrecisionOperator> {
    match mode {
        ObsMode::Identity => Ok(PrecisionOperator::identity(prior.dim())),
        ObsMode::Prior | ObsMode::DiagPrior => {
            if !(eps_obs > 0.0) {
                return Err(Error::invalid(format!("eps_obs must be positive, got {eps_obs}")));
            }
            let lap = prior.without_floor().with_floor(eps_obs);
            Ok(if mode == ObsMode::Prior {
                lap
            } else {
                lap.diagonal_part()
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral estimates

pub const POWER_ITERS: usize = 200;
pub const POWER_TOL: f64 = 1e-8;
const POWER_START_SEED: u64 = 0x005e_ed0f_5bec;

/// Extreme-eigenvalue estimates from power iteration.
///
/// `lambda_min`/`lambda_max` are Rayleigh quotients. `lower`/`upper` widen
/// them by the final eigen-residual norms and intersect with the Gershgorin
/// enclosure, giving an interval that contains the spectrum whenever the
/// iterations locked onto the extreme eigenpairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lower: f64,
    pub upper: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct PowerResult {
    rayleigh: f64,
    residual: f64,
    converged: bool,
    iterations: usize,
}

fn power_iteration(dim: usize, apply: impl Fn(&[f64], &mut [f64]), iters: usize, tol: f64) -> PowerResult {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(POWER_START_SEED);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; dim];
    let mut rho = f64::NAN;
    let mut converged = false;
    let mut it = 0;
    while it < iters {
        it += 1;
        apply(&v, &mut w);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let done = rho.is_finite() && (next - rho).abs() <= tol * next.abs().max(f64::MIN_POSITIVE);
        rho = next;
        if norm == 0.0 {
            converged = true;
            break;
        }
        if done {
            converged = true;
            break;
        }
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / norm);
    }
    apply(&v, &mut w);
    let rho_final: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    let residual = v
        .iter()
        .zip(&w)
        .map(|(a, b)| (b - rho_final * a).powi(2))
        .sum::<f64>()
        .sqrt();
    PowerResult {
        rayleigh: rho_final,
        residual,
        converged,
        iterations: it,
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn spectral_bounds(op: &impl LinearOperator, iters: usize, tol: f64) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    let dim = op.dim();
    if dim == 0 {
        return Err(Error::invalid("empty operator"));
    }
    let (g_lo, g_hi) = op.gershgorin();
    if op.offdiag_abs_row_sums().iter().all(|&r| r == 0.0) {
        return Ok(SpectralEstimate {
            lambda_min: g_lo,
            lambda_max: g_hi,
            lower: g_lo,
            upper: g_hi,
            converged: true,
            iterations: 0,
        });
    }
    let top = power_iteration(dim, |x, y| op.apply(x, y), iters, tol);
    let upper = (top.rayleigh + top.residual).min(g_hi);
    let shift = upper;
    let bottom = power_iteration(
        dim,
        |x, y| {
            op.apply(x, y);
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = shift * xi - *yi;
            }
        },
        iters,
        tol,
    );
    let lambda_min = shift - bottom.rayleigh;
    let lower = (lambda_min - bottom.residual).max(g_lo);
    Ok(SpectralEstimate {
        lambda_min,
        lambda_max: top.rayleigh,
        lower,
        upper,
        converged: top.converged && bottom.converged,
        iterations: top.iterations + bottom.iterations,
    })
}

/// `(λmax(Ωp) + β λmax(Ωo)) / (λmin(Ωp) + β λmin(Ωo))`, evaluated on the
/// widened spectral intervals so that it bounds `κ(Ωp + βΩo)` from above.
pub fn condition_bound(prior: &PrecisionOperator, obs: &PrecisionOperator, beta: f64) -> Result<f64> {
    let p = spectral_bounds(prior, POWER_ITERS, POWER_TOL)?;
    let o = spectral_bounds(obs, POWER_ITERS, POWER_TOL)?;
    condition_bound_from(&p, &o, beta)
}

pub fn condition_bound_from(prior: &SpectralEstimate, obs: &SpectralEstimate, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be nonnegative, got {beta}")));
    }
    let den = prior.lower + beta * obs.lower;
    if !(den > 0.0) {
        return Err(Error::invalid("operators are not positive definite"));
    }
    Ok((prior.upper + beta * obs.upper) / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn dense_eq(a: &DMatrix<f64>, b: &[&[f64]]) {
        for (i, row) in b.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((a[(i, j)] - v).abs() < 1e-12, "({i},{j}): {} vs {v}", a[(i, j)]);
            }
        }
    }

    #[test]
    fn joint_dependency_small() {
        let dep = build_joint_dependency(2, 1, 1, 1.0, 1.0, true).unwrap();
        assert_eq!(dep.dim, 6);
        let sym: Vec<_> = dep
            .edges
            .iter()
            .filter(|&&(u, v, _)| u >= 2 && v >= 2)
            .collect();
        assert_eq!(sym.len(), 1);
        // 2·n²·d_x·d_a = 8 incidence pairs, of which the two diagonal entries
        // contribute the same pair twice.
        assert_eq!(dep.edges.len() - sym.len(), 6);

        let dep = build_joint_dependency(1, 2, 1, 1.0, 1.0, true).unwrap();
        assert!(dep.edges.iter().all(|&(u, v, _)| u < 2 && v >= 2));

        let dep = build_joint_dependency(3, 1, 1, 0.0, 0.0, true).unwrap();
        assert!(dep.edges.iter().all(|e| e.2 == 0.0));
    }

    /// Brute-force enumeration of the incidence and symmetry sets.
    fn enumerate_joint(n: usize, d_x: usize, d_a: usize, sym: bool) -> BTreeSet<(usize, usize)> {
        let mut set = BTreeSet::new();
        let xs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..d_x).map(move |c| (i, c))).collect();
        for &(i, c) in &xs {
            for a_i in 0..n {
                for a_j in 0..n {
                    for cp in 0..d_a {
                        let a = n * d_x + (a_i * n + a_j) * d_a + cp;
                        let x = i * d_x + c;
                        if a_i == i || a_j == i {
                            set.insert((x.min(a), x.max(a)));
                        }
                    }
                }
            }
        }
        if sym {
            for i in 0..n {
                for j in i + 1..n {
                    for c in 0..d_a {
                        set.insert((n * d_x + (i * n + j) * d_a + c, n * d_x + (j * n + i) * d_a + c));
                    }
                }
            }
        }
        set
    }

    #[test]
    fn joint_matches_enumeration() {
        for n in 1..=4 {
            for d_x in 1..=2 {
                for d_a in 1..=2 {
                    for sym in [false, true] {
                        let dep = build_joint_dependency(n, d_x, d_a, 0.5, 2.0, sym).unwrap();
                        let got: BTreeSet<_> = dep.edges.iter().map(|&(u, v, _)| (u, v)).collect();
                        assert_eq!(got, enumerate_joint(n, d_x, d_a, sym), "n={n} dx={d_x} da={d_a}");
                        for &(u, v, w) in &dep.edges {
                            let expect = if u >= n * d_x { 2.0 } else { 0.5 };
                            assert_eq!(w, expect, "({u},{v})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn node_complete_counts() {
        assert_eq!(build_node_dependency_complete(3, 1, 1.0).unwrap().edges.len(), 3);
        let dep = build_node_dependency_complete(2, 2, 1.0).unwrap();
        assert_eq!(dep.edges, vec![(0, 2, 1.0), (1, 3, 1.0)]);
        let dep = build_node_dependency_complete(4, 1, 0.0).unwrap();
        let lap = laplacian(&dep).to_dense();
        assert!(lap.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn line_complete_counts() {
        let dep = build_edge_dependency_line_complete(3, 1, 1.0).unwrap();
        assert_eq!((dep.dim, dep.edges.len()), (3, 3));
        let dep = build_edge_dependency_line_complete(4, 1, 1.0).unwrap();
        assert_eq!((dep.dim, dep.edges.len()), (6, 12));
        assert!(dep.degrees().iter().all(|&d| d == 4.0));
        let dep = build_edge_dependency_line_complete(2, 1, 1.0).unwrap();
        assert_eq!((dep.dim, dep.edges.len()), (1, 0));
        let dep = build_edge_dependency_line_complete(1, 1, 1.0).unwrap();
        assert_eq!(dep.dim, 0);
    }

    #[test]
    fn laplacian_examples() {
        let dep = DependencyGraph::new(2, [(0, 1, 1.0)]).unwrap();
        dense_eq(&laplacian(&dep).to_dense(), &[&[1.0, -1.0], &[-1.0, 1.0]]);
        let dep = DependencyGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let lap = laplacian(&dep);
        assert_eq!(lap.diag(), &[1.0, 2.0, 1.0]);
        assert_eq!(lap.matvec(&[1.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dependency_validation() {
        assert!(DependencyGraph::new(2, [(0, 1, 1.0), (1, 0, 1.0)]).is_err());
        assert!(DependencyGraph::new(2, [(0, 0, 1.0)]).is_err());
        assert!(DependencyGraph::new(2, [(0, 2, 1.0)]).is_err());
        assert!(DependencyGraph::new(2, [(0, 1, -1.0)]).is_err());
    }

    #[test]
    fn dirichlet_examples() {
        let dep = DependencyGraph::new(2, [(0, 1, 1.0)]).unwrap();
        assert_eq!(dirichlet_energy(&dep, &[3.0, 3.0]).unwrap(), 0.0);
        assert_eq!(dirichlet_energy(&dep, &[0.0, 1.0]).unwrap(), 1.0);
        assert!(dirichlet_energy(&dep, &[0.0]).is_err());
    }

    #[test]
    fn prior_precision_examples() {
        let dep = DependencyGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let p = build_prior_precision(&dep, &MaskOperator::new(vec![false; 2]), 0.1).unwrap();
        dense_eq(&p.to_dense(), &[&[0.1, 0.0], &[0.0, 0.1]]);
        let p = build_prior_precision(&dep, &MaskOperator::full(2), 0.1).unwrap();
        dense_eq(&p.to_dense(), &[&[1.1, -1.0], &[-1.0, 1.1]]);
        assert!(build_prior_precision(&dep, &MaskOperator::full(2), 0.0).is_err());
        assert!(build_prior_precision(&dep, &MaskOperator::full(2), -1.0).is_err());
    }

    #[test]
    fn obs_precision_modes() {
        let dep = DependencyGraph::new(2, [(0, 1, 1.0)]).unwrap();
        let prior = build_prior_precision(&dep, &MaskOperator::full(2), 0.1).unwrap();
        let id = build_obs_precision(&build_prior_precision(&DependencyGraph::empty(3), &MaskOperator::full(3), 0.1).unwrap(), ObsMode::Identity, 0.1).unwrap();
        dense_eq(&id.to_dense(), &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let d = build_obs_precision(&prior, ObsMode::DiagPrior, 0.1).unwrap();
        assert!(d.is_diagonal());
        dense_eq(&d.to_dense(), &[&[1.1, 0.0], &[0.0, 1.1]]);
        let full = build_obs_precision(&prior, ObsMode::Prior, 0.5).unwrap();
        dense_eq(&full.to_dense(), &[&[1.5, -1.0], &[-1.0, 1.5]]);
        assert!("bogus".parse::<ObsMode>().is_err());
        assert_eq!("diag_prior".parse::<ObsMode>().unwrap(), ObsMode::DiagPrior);
    }

    #[test]
    fn matvec_examples() {
        let id = PrecisionOperator::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let dep = DependencyGraph::new(2, [(0, 1, 1.0)]).unwrap();
        assert_eq!(laplacian(&dep).matvec(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert!(id.matvec(&[1.0]).is_err());
        assert_eq!(laplacian(&dep).diagonal(), vec![1.0, 1.0]);
    }

    #[test]
    fn spectral_examples() {
        let d = PrecisionOperator::from_diagonal(vec![1.0, 4.0]);
        let s = spectral_bounds(&d, 200, 1e-8).unwrap();
        assert_eq!((s.lambda_min, s.lambda_max), (1.0, 4.0));
        let k = condition_bound(&d, &PrecisionOperator::identity(2), 0.0).unwrap();
        assert_eq!(k, 4.0);

        let eps = PrecisionOperator::identity(5).scaled(0.01);
        for beta in [0.0, 1.0, 37.5] {
            let k = condition_bound(&eps, &PrecisionOperator::identity(5), beta).unwrap();
            assert!((k - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_on_laplacian_prior() {
        // All-ones is an eigenvector of an unmasked Laplacian; the start
        // vector must not be.
        let dep = build_edge_dependency_line_complete(5, 1, 1.0).unwrap();
        let prior = build_prior_precision(&dep, &MaskOperator::full(dep.dim), 0.01).unwrap();
        let s = spectral_bounds(&prior, 500, 1e-12).unwrap();
        // Line graph of K_5 has Laplacian spectrum {0, 5, 8}.
        assert!((s.lambda_max - 8.01).abs() < 1e-6, "{s:?}");
        assert!((s.lambda_min - 0.01).abs() < 1e-6, "{s:?}");
        assert!(s.lower <= 0.01 + 1e-12 && s.upper >= 8.01 - 1e-12);
    }

    fn random_dep(rng: &mut ChaCha8Rng, dim: usize) -> DependencyGraph {
        let mut edges = Vec::new();
        for u in 0..dim {
            for v in u + 1..dim {
                if rng.random_bool(0.3) {
                    edges.push((u, v, rng.random_range(0.0..2.0)));
                }
            }
        }
        DependencyGraph::new(dim, edges).unwrap()
    }

    proptest! {
        #[test]
        fn laplacian_is_psd_and_matches_energy(seed in any::<u64>(), dim in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dep = random_dep(&mut rng, dim);
            let lap = laplacian(&dep);
            let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let quad = lap.quad_form(&s).unwrap();
            let energy = dirichlet_energy(&dep, &s).unwrap();
            prop_assert!(quad >= -1e-10);
            prop_assert!((quad - energy).abs() <= 1e-12 * (1.0 + energy.abs()));
            let row_sums = lap.matvec(&vec![1.0; dim]).unwrap();
            prop_assert!(row_sums.iter().all(|x| x.abs() < 1e-12));
        }

        #[test]
        fn matvec_matches_dense(seed in any::<u64>(), dim in 1usize..=64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let diag: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut off = Vec::new();
            for u in 0..dim {
                for v in u + 1..dim {
                    if rng.random_bool(0.1) {
                        off.push((u, v, rng.random_range(-1.0..1.0)));
                    }
                }
            }
            let op = PrecisionOperator::from_parts(dim, diag, &off).unwrap();
            let dense = op.to_dense();
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = op.matvec(&x).unwrap();
            let yd = &dense * nalgebra::DVector::from_vec(x);
            for i in 0..dim {
                prop_assert!((y[i] - yd[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn mask_sandwich_zeroes_masked(seed in any::<u64>(), dim in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dep = random_dep(&mut rng, dim);
            let mask: Vec<bool> = (0..dim).map(|_| rng.random_bool(0.6)).collect();
            let eps = 1e-2;
            let prior = build_prior_precision(&dep, &MaskOperator::new(mask.clone()), eps).unwrap();
            let dense = prior.to_dense();
            for u in 0..dim {
                for v in 0..dim {
                    let val = dense[(u, v)] - if u == v { eps } else { 0.0 };
                    if !mask[u] || !mask[v] {
                        prop_assert_eq!(val, 0.0);
                    }
                }
            }
            let obs = build_obs_precision(&prior, ObsMode::Prior, 0.3).unwrap();
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nv: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!(obs.quad_form(&v).unwrap() >= 0.3 * nv - 1e-12);
        }
    }

    #[test]
    fn mask_is_idempotent() {
        let m = MaskOperator::new(vec![true, false, true]);
        let mut v = vec![1.0, 2.0, 3.0];
        m.apply(&mut v);
        let once = v.clone();
        m.apply(&mut v);
        assert_eq!(v, once);
    }
}
