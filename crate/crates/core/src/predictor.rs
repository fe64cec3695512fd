//! The denoiser `ẑ(θ, t)`: two small residual MLPs (one per channel) over
//! per-entry features, trained by masked MSE on expected class centers.
//!
//! Beliefs enter only as features. Gradients run through the heads, the
//! truncated-CDF decoding and the expected center, never into the solver
//! that produced the beliefs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{expected_center_grad, GaussianParams, SIGMA_FLOOR};
use crate::error::{check_len, Error, Result};
use crate::flow::{Channel, LossConvention, Schedule};
use crate::graph::{ClassGrid, NodeChannel};
use crate::par::{map_slice, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub node_channel: NodeChannel,
    /// Values per node slot.
    pub d_x: usize,
    pub sigma_floor: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden_width: 64,
            depth: 2,
            time_embed_dim: 16,
            node_channel: NodeChannel::Discrete,
            d_x: 1,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.d_x == 0 {
            return Err(Error::invalid("hidden_width and d_x must be positive"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("time_embed_dim must be even, got {}", self.time_embed_dim)));
        }
        if self.node_channel == NodeChannel::Discrete && self.d_x != 1 {
            return Err(Error::invalid("a discrete node channel carries one value per node"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::invalid("sigma_floor must be positive"));
        }
        Ok(())
    }

    fn node_inputs(&self) -> usize {
        2 * self.d_x + self.time_embed_dim + 3
    }

    fn edge_inputs(&self) -> usize {
        4 + self.time_embed_dim + 3 * self.d_x
    }

    fn node_outputs(&self) -> usize {
        match self.node_channel {
            NodeChannel::Discrete => 2,
            NodeChannel::Continuous => self.d_x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameters with named per-layer segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn apply(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &p[self.w..self.w + self.n_in * self.n_out];
        for (o, y) in out.iter_mut().enumerate().take(self.n_out) {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            *y = p[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients; writes `Wᵀ d_out` into `d_in`.
    fn backward(&self, p: &[f64], x: &[f64], d_out: &[f64], grad: &mut [f64], d_in: Option<&mut [f64]>) {
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.b + o] += g;
            let gw = &mut grad[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
        }
        if let Some(d_in) = d_in {
            d_in.fill(0.0);
            let w = &p[self.w..self.w + self.n_in * self.n_out];
            for (o, &g) in d_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (di, wi) in d_in.iter_mut().zip(&w[o * self.n_in..(o + 1) * self.n_in]) {
                    *di += g * wi;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    input: Dense,
    blocks: Vec<Dense>,
    output: Dense,
}

struct Scratch {
    h: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    out: Vec<f64>,
    dh: Vec<f64>,
    dpre: Vec<f64>,
    dtmp: Vec<f64>,
}

impl Mlp {
    fn layout(prefix: &str, n_in: usize, width: usize, depth: usize, n_out: usize, segs: &mut Vec<Segment>) -> Mlp {
        let mut push = |name: String, n_in: usize, n_out: usize| {
            let w = segs.last().map_or(0, |s| s.offset + s.len);
            segs.push(Segment {
                name: format!("{name}.weight"),
                offset: w,
                len: n_in * n_out,
            });
            let b = w + n_in * n_out;
            segs.push(Segment {
                name: format!("{name}.bias"),
                offset: b,
                len: n_out,
            });
            Dense { w, b, n_in, n_out }
        };
        let input = push(format!("{prefix}.input"), n_in, width);
        let blocks = (0..depth).map(|d| push(format!("{prefix}.block{d}"), width, width)).collect();
        let output = push(format!("{prefix}.output"), width, n_out);
        Mlp { input, blocks, output }
    }

    fn scratch(&self) -> Scratch {
        let w = self.input.n_out;
        Scratch {
            h: vec![vec![0.0; w]; self.blocks.len() + 1],
            a: vec![vec![0.0; w]; self.blocks.len()],
            out: vec![0.0; self.output.n_out],
            dh: vec![0.0; w],
            dpre: vec![0.0; w],
            dtmp: vec![0.0; w],
        }
    }

    fn forward(&self, p: &[f64], x: &[f64], s: &mut Scratch) {
        self.input.apply(p, x, &mut s.h[0]);
        s.h[0].iter_mut().for_each(|v| *v = v.tanh());
        for (d, block) in self.blocks.iter().enumerate() {
            block.apply(p, &s.h[d], &mut s.a[d]);
            let (lo, hi) = s.h.split_at_mut(d + 1);
            for ((next, prev), a) in hi[0].iter_mut().zip(&lo[d]).zip(s.a[d].iter_mut()) {
                *a = a.tanh();
                *next = prev + *a;
            }
        }
        self.output.apply(p, &s.h[self.blocks.len()], &mut s.out);
    }

    fn backward(&self, p: &[f64], x: &[f64], s: &mut Scratch, d_out: &[f64], grad: &mut [f64]) {
        let depth = self.blocks.len();
        self.output.backward(p, &s.h[depth], d_out, grad, Some(&mut s.dh));
        for d in (0..depth).rev() {
            for ((dp, dh), a) in s.dpre.iter_mut().zip(&s.dh).zip(&s.a[d]) {
                *dp = dh * (1.0 - a * a);
            }
            self.blocks[d].backward(p, &s.h[d], &s.dpre, grad, Some(&mut s.dtmp));
            for (dh, t) in s.dh.iter_mut().zip(&s.dtmp) {
                *dh += t;
            }
        }
        for ((dp, dh), h) in s.dpre.iter_mut().zip(&s.dh).zip(&s.h[0]) {
            *dp = dh * (1.0 - h * h);
        }
        self.input.backward(p, x, &s.dpre, grad, None);
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal features `[sin(ω_k t), cos(ω_k t)]` with `ω_k = (k+1) π / 2`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = (k + 1) as f64 * std::f64::consts::FRAC_PI_2;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// One padded graph's beliefs and masks.
#[derive(Debug, Clone, Copy)]
pub struct PredictorInput<'a> {
    pub max_n: usize,
    /// `max_n · d_x` node beliefs.
    pub theta_x: &'a [f64],
    /// `max_n × max_n` edge beliefs, row-major.
    pub theta_a: &'a [f64],
    pub t: f64,
    pub node_mask: &'a [bool],
    pub edge_mask: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeHead {
    Gaussian { mu: Vec<f64>, sigma: Vec<f64> },
    Regression(Vec<f64>),
}

/// Head outputs; every masked entry (σ included) is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    pub max_n: usize,
    pub node: NodeHead,
    /// `max_n × max_n`, symmetric.
    pub edge_mu: Vec<f64>,
    pub edge_sigma: Vec<f64>,
}

fn params_with_unit_fill(mu: &[f64], sigma: &[f64]) -> GaussianParams {
    GaussianParams {
        mu: mu.to_vec(),
        sigma: sigma.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect(),
    }
}

impl PredictorOutput {
    /// Edge Gaussians with masked σ replaced by 1 (pair with the edge mask).
    pub fn edge_params(&self) -> GaussianParams {
        params_with_unit_fill(&self.edge_mu, &self.edge_sigma)
    }

    /// Node Gaussians for a discrete node channel.
    pub fn node_params(&self) -> Option<GaussianParams> {
        match &self.node {
            NodeHead::Gaussian { mu, sigma } => Some(params_with_unit_fill(mu, sigma)),
            NodeHead::Regression(_) => None,
        }
    }

    /// Expected node centers (discrete) or the regressed values.
    pub fn node_centers(&self, grid: &ClassGrid, node_mask: &[bool], eps_prob: f64) -> Vec<f64> {
        match &self.node {
            NodeHead::Gaussian { mu, sigma } => mu
                .iter()
                .zip(sigma)
                .zip(node_mask)
                .map(|((&m, &s), &v)| if v { expected_center_grad(m, s, grid, eps_prob).0 } else { 0.0 })
                .collect(),
            NodeHead::Regression(x) => x.clone(),
        }
    }

    pub fn edge_centers(&self, grid: &ClassGrid, edge_mask: &[bool], eps_prob: f64) -> Vec<f64> {
        let m = self.max_n;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                if edge_mask[i * m + j] {
                    let c = expected_center_grad(self.edge_mu[i * m + j], self.edge_sigma[i * m + j], grid, eps_prob).0;
                    out[i * m + j] = c;
                    out[j * m + i] = c;
                }
            }
        }
        out
    }
}

struct Context {
    emb: Vec<f64>,
    gx: Vec<f64>,
    ga: f64,
    row: Vec<f64>,
    size: f64,
    a_sym: Vec<f64>,
}

/// One training graph: beliefs, masks, time and encoded targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub max_n: usize,
    pub theta_x: Vec<f64>,
    pub theta_a: Vec<f64>,
    pub t: f64,
    pub node_mask: Vec<bool>,
    pub edge_mask: Vec<bool>,
    /// `max_n · d_x` node targets (class centers or coordinates).
    pub target_x: Vec<f64>,
    /// `max_n × max_n` edge targets.
    pub target_a: Vec<f64>,
}

impl TrainExample {
    pub fn input(&self) -> PredictorInput<'_> {
        PredictorInput {
            max_n: self.max_n,
            theta_x: &self.theta_x,
            theta_a: &self.theta_a,
            t: self.t,
            node_mask: &self.node_mask,
            edge_mask: &self.edge_mask,
        }
    }

    fn edge_count(&self) -> usize {
        let m = self.max_n;
        (0..m).map(|i| (i..m).filter(|&j| self.edge_mask[i * m + j]).count()).sum()
    }
}

/// Everything the loss needs besides parameters and data.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub schedule: Schedule,
    pub convention: LossConvention,
    pub grid_x: ClassGrid,
    pub grid_a: ClassGrid,
    pub eps_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub node_mse: f64,
    pub edge_mse: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    node: Mlp,
    edge: Mlp,
    segments: Vec<Segment>,
    n_params: usize,
}

impl Predictor {
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut segments = Vec::new();
        let (w, d) = (config.hidden_width, config.depth);
        let node = Mlp::layout("node", config.node_inputs(), w, d, config.node_outputs(), &mut segments);
        let edge = Mlp::layout("edge", config.edge_inputs(), w, d, 2, &mut segments);
        let n_params = segments.last().map_or(0, |s| s.offset + s.len);
        Ok(Predictor {
            config,
            node,
            edge,
            segments,
            n_params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.n_params],
            segments: self.segments.clone(),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.zero_params();
        for mlp in [&self.node, &self.edge] {
            for layer in std::iter::once(&mlp.input).chain(&mlp.blocks).chain(std::iter::once(&mlp.output)) {
                let bound = 1.0 / (layer.n_in as f64).sqrt();
                for v in &mut p.values[layer.w..layer.w + layer.n_in * layer.n_out] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        p
    }

    /// Checks that `params` matches this predictor's layout.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        check_len(self.n_params, params.values.len())?;
        if params.segments != self.segments {
            return Err(Error::invalid("parameter segments do not match the predictor layout"));
        }
        Ok(())
    }

    fn context(&self, input: &PredictorInput) -> Result<Context> {
        let m = input.max_n;
        let d_x = self.config.d_x;
        check_len(m * d_x, input.theta_x.len())?;
        check_len(m * m, input.theta_a.len())?;
        check_len(m, input.node_mask.len())?;
        check_len(m * m, input.edge_mask.len())?;
        if input.theta_x.iter().chain(input.theta_a).any(|v| !v.is_finite()) || !input.t.is_finite() {
            return Err(Error::invalid("predictor inputs must be finite"));
        }
        let mut a_sym = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                a_sym[i * m + j] = 0.5 * (input.theta_a[i * m + j] + input.theta_a[j * m + i]);
            }
        }
        let n_valid = input.node_mask.iter().filter(|&&v| v).count();
        let mut gx = vec![0.0; d_x];
        for i in (0..m).filter(|&i| input.node_mask[i]) {
            for c in 0..d_x {
                gx[c] += input.theta_x[i * d_x + c];
            }
        }
        if n_valid > 0 {
            gx.iter_mut().for_each(|v| *v /= n_valid as f64);
        }
        let mut row = vec![0.0; m];
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..m {
            let mut k = 0usize;
            for j in 0..m {
                if input.edge_mask[i * m + j] {
                    row[i] += a_sym[i * m + j];
                    k += 1;
                }
            }
            total += row[i];
            count += k;
            if k > 0 {
                row[i] /= k as f64;
            }
        }
        Ok(Context {
            emb: time_features(input.t, self.config.time_embed_dim),
            gx,
            ga: if count > 0 { total / count as f64 } else { 0.0 },
            row,
            size: if m > 0 { n_valid as f64 / m as f64 } else { 0.0 },
            a_sym,
        })
    }

    fn node_features(&self, ctx: &Context, input: &PredictorInput, i: usize, out: &mut Vec<f64>) {
        let d_x = self.config.d_x;
        out.clear();
        out.extend_from_slice(&input.theta_x[i * d_x..(i + 1) * d_x]);
        out.extend_from_slice(&ctx.emb);
        out.extend_from_slice(&ctx.gx);
        out.extend_from_slice(&[ctx.ga, ctx.row[i], ctx.size]);
    }

    fn edge_features(&self, ctx: &Context, input: &PredictorInput, i: usize, j: usize, out: &mut Vec<f64>) {
        let (m, d_x) = (input.max_n, self.config.d_x);
        out.clear();
        out.push(ctx.a_sym[i * m + j]);
        out.extend_from_slice(&ctx.emb);
        out.extend_from_slice(&ctx.gx);
        out.extend_from_slice(&[ctx.ga, ctx.row[i] + ctx.row[j], ctx.size]);
        for c in 0..d_x {
            out.push(input.theta_x[i * d_x + c] + input.theta_x[j * d_x + c]);
        }
        for c in 0..d_x {
            out.push((input.theta_x[i * d_x + c] - input.theta_x[j * d_x + c]).powi(2));
        }
    }

    fn sigma_of(&self, raw: f64) -> f64 {
        softplus(raw) + self.config.sigma_floor
    }

    pub fn forward(&self, params: &ParamVector, input: &PredictorInput) -> Result<PredictorOutput> {
        self.check_params(params)?;
        let p = &params.values;
        let ctx = self.context(input)?;
        let (m, d_x) = (input.max_n, self.config.d_x);
        let mut feat = Vec::new();

        let mut s = self.node.scratch();
        let node = match self.config.node_channel {
            NodeChannel::Discrete => {
                let (mut mu, mut sigma) = (vec![0.0; m], vec![0.0; m]);
                for i in (0..m).filter(|&i| input.node_mask[i]) {
                    self.node_features(&ctx, input, i, &mut feat);
                    self.node.forward(p, &feat, &mut s);
                    mu[i] = s.out[0];
                    sigma[i] = self.sigma_of(s.out[1]);
                }
                NodeHead::Gaussian { mu, sigma }
            }
            NodeChannel::Continuous => {
                let mut x = vec![0.0; m * d_x];
                for i in (0..m).filter(|&i| input.node_mask[i]) {
                    self.node_features(&ctx, input, i, &mut feat);
                    self.node.forward(p, &feat, &mut s);
                    x[i * d_x..(i + 1) * d_x].copy_from_slice(&s.out);
                }
                NodeHead::Regression(x)
            }
        };

        let mut s = self.edge.scratch();
        let (mut edge_mu, mut edge_sigma) = (vec![0.0; m * m], vec![0.0; m * m]);
        for i in 0..m {
            for j in i..m {
                if !input.edge_mask[i * m + j] {
                    continue;
                }
                self.edge_features(&ctx, input, i, j, &mut feat);
                self.edge.forward(p, &feat, &mut s);
                let sigma = self.sigma_of(s.out[1]);
                for idx in [i * m + j, j * m + i] {
                    edge_mu[idx] = s.out[0];
                    edge_sigma[idx] = sigma;
                }
            }
        }
        Ok(PredictorOutput {
            max_n: m,
            node,
            edge_mu,
            edge_sigma,
        })
    }

    /// Adds `scale_x · sse_x + scale_a · sse_a` gradients for one graph into
    /// `grad` and returns `(sse_x, sse_a)`.
    fn graph_loss_grad(
        &self,
        p: &[f64],
        ex: &TrainExample,
        spec: &LossSpec,
        scale_x: f64,
        scale_a: f64,
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        let input = ex.input();
        let ctx = self.context(&input)?;
        let (m, d_x) = (ex.max_n, self.config.d_x);
        check_len(m * d_x, ex.target_x.len())?;
        check_len(m * m, ex.target_a.len())?;
        let mut feat = Vec::new();
        let mut d_out = [0.0; 2];

        let mut sse_x = 0.0;
        let mut s = self.node.scratch();
        let mut d_reg = vec![0.0; d_x];
        for i in (0..m).filter(|&i| ex.node_mask[i]) {
            self.node_features(&ctx, &input, i, &mut feat);
            self.node.forward(p, &feat, &mut s);
            match self.config.node_channel {
                NodeChannel::Discrete => {
                    let sigma = self.sigma_of(s.out[1]);
                    let (c, dc_mu, dc_sig) = expected_center_grad(s.out[0], sigma, &spec.grid_x, spec.eps_prob);
                    let diff = c - ex.target_x[i];
                    sse_x += diff * diff;
                    let g = 2.0 * scale_x * diff;
                    d_out = [g * dc_mu, g * dc_sig * sigmoid(s.out[1])];
                    self.node.backward(p, &feat, &mut s, &d_out, grad);
                }
                NodeChannel::Continuous => {
                    for c in 0..d_x {
                        let diff = s.out[c] - ex.target_x[i * d_x + c];
                        sse_x += diff * diff;
                        d_reg[c] = 2.0 * scale_x * diff;
                    }
                    self.node.backward(p, &feat, &mut s, &d_reg, grad);
                }
            }
        }

        let mut sse_a = 0.0;
        let mut s = self.edge.scratch();
        for i in 0..m {
            for j in i..m {
                if !ex.edge_mask[i * m + j] {
                    continue;
                }
                self.edge_features(&ctx, &input, i, j, &mut feat);
                self.edge.forward(p, &feat, &mut s);
                let sigma = self.sigma_of(s.out[1]);
                let (c, dc_mu, dc_sig) = expected_center_grad(s.out[0], sigma, &spec.grid_a, spec.eps_prob);
                let diff = c - ex.target_a[i * m + j];
                sse_a += diff * diff;
                let g = 2.0 * scale_a * diff;
                d_out[0] = g * dc_mu;
                d_out[1] = g * dc_sig * sigmoid(s.out[1]);
                self.edge.backward(p, &feat, &mut s, &d_out, grad);
            }
        }
        Ok((sse_x, sse_a))
    }

    /// Batch loss `Σ_g w_x(t_g) sse_x,g / N_x + w_a(t_g) sse_a,g / N_a`, where
    /// `N_c` counts valid entries of channel `c` over the whole batch, and its
    /// gradient. Per-graph work may run in parallel; the reduction is ordered.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[TrainExample],
        spec: &LossSpec,
        exec: Execution,
    ) -> Result<LossOutput> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n_x: usize = batch
            .iter()
            .map(|ex| ex.node_mask.iter().filter(|&&v| v).count() * self.config.d_x)
            .sum();
        let n_a: usize = batch.iter().map(TrainExample::edge_count).sum();
        let inv = |n: usize| if n > 0 { 1.0 / n as f64 } else { 0.0 };
        let (inv_x, inv_a) = (inv(n_x), inv(n_a));

        let shards = map_slice(exec, batch, |_, ex| {
            let w_x = spec.schedule.loss_weight(Channel::Node, ex.t, spec.convention);
            let w_a = spec.schedule.loss_weight(Channel::Edge, ex.t, spec.convention);
            let mut grad = vec![0.0; self.n_params];
            let sse = self.graph_loss_grad(&params.values, ex, spec, w_x * inv_x, w_a * inv_a, &mut grad);
            sse.map(|(sx, sa)| (w_x * sx * inv_x + w_a * sa * inv_a, sx, sa, grad))
        });

        let mut out = LossOutput {
            loss: 0.0,
            node_mse: 0.0,
            edge_mse: 0.0,
            grad: vec![0.0; self.n_params],
        };
        for (index, shard) in shards.into_iter().enumerate() {
            let (loss, sx, sa, grad) = shard?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { index });
            }
            out.loss += loss;
            out.node_mse += sx * inv_x;
            out.edge_mse += sa * inv_a;
            for (a, b) in out.grad.iter_mut().zip(grad) {
                *a += b;
            }
        }
        Ok(out)
    }
}

/// Mean squared difference over valid entries; zero for an empty mask.
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    check_len(pred.len(), mask.len())?;
    let (mut s, mut n) = (0.0, 0usize);
    for ((p, t), &v) in pred.iter().zip(target).zip(mask) {
        if v {
            s += (p - t).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-12,
            clip_norm: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Global-norm clipping, then an AdamW update. Returns the pre-clip norm.
pub fn optimizer_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, opt: &AdamW) -> Result<f64> {
    check_len(params.len(), grad.len())?;
    check_len(params.len(), state.m.len())?;
    check_len(params.len(), state.v.len())?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let clip = if norm > opt.clip_norm { opt.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i] * clip;
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let update = (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + opt.eps);
        params[i] -= opt.lr * (update + opt.weight_decay * params[i]);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::EPS_PROB;
    use crate::graph::{build_class_grid, edge_mask_for, node_mask_for};

    fn spec(k_x: usize, k_a: usize) -> LossSpec {
        LossSpec {
            schedule: Schedule::default(),
            convention: LossConvention::Algorithmic,
            grid_x: build_class_grid(k_x).unwrap(),
            grid_a: build_class_grid(k_a).unwrap(),
            eps_prob: EPS_PROB,
        }
    }

    fn example(rng: &mut ChaCha8Rng, n: usize, max_n: usize, d_x: usize) -> TrainExample {
        let node_mask = node_mask_for(n, max_n);
        let edge_mask = edge_mask_for(&node_mask, true);
        let mut theta_a = vec![0.0; max_n * max_n];
        let mut target_a = vec![0.0; max_n * max_n];
        for i in 0..max_n {
            for j in i..max_n {
                if edge_mask[i * max_n + j] {
                    let v = rng.random_range(-1.0..1.0);
                    let t = if rng.random_bool(0.4) { 0.5 } else { -0.5 };
                    for idx in [i * max_n + j, j * max_n + i] {
                        theta_a[idx] = v;
                        target_a[idx] = t;
                    }
                }
            }
        }
        let theta_x = (0..max_n * d_x)
            .map(|k| if node_mask[k / d_x] { rng.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let target_x = (0..max_n * d_x)
            .map(|k| if node_mask[k / d_x] { rng.random_range(-0.6..0.6) } else { 0.0 })
            .collect();
        TrainExample {
            max_n,
            theta_x,
            theta_a,
            t: rng.random_range(0.01..1.0),
            node_mask,
            edge_mask,
            target_x,
            target_a,
        }
    }

    fn small(node_channel: NodeChannel, d_x: usize) -> Predictor {
        Predictor::new(PredictorConfig {
            hidden_width: 3,
            depth: 1,
            time_embed_dim: 2,
            node_channel,
            d_x,
            sigma_floor: SIGMA_FLOOR,
        })
        .unwrap()
    }

    #[test]
    fn zero_params_give_bias_outputs() {
        let pred = Predictor::new(PredictorConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = example(&mut rng, 3, 4, 1);
        let out = pred.forward(&pred.zero_params(), &ex.input()).unwrap();
        let s0 = 2f64.ln() + SIGMA_FLOOR;
        match &out.node {
            NodeHead::Gaussian { mu, sigma } => {
                for i in 0..4 {
                    assert_eq!(mu[i], 0.0);
                    assert_eq!(sigma[i], if i < 3 { s0 } else { 0.0 });
                }
            }
            NodeHead::Regression(_) => unreachable!(),
        }
        for idx in 0..16 {
            let expect = if ex.edge_mask[idx] { s0 } else { 0.0 };
            assert!((out.edge_sigma[idx] - expect).abs() < 1e-15);
            assert_eq!(out.edge_mu[idx], 0.0);
        }
    }

    #[test]
    fn masked_outputs_ignore_inputs() {
        let pred = small(NodeChannel::Discrete, 1);
        let params = pred.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ex = example(&mut rng, 2, 4, 1);
        let a = pred.forward(&params, &ex.input()).unwrap();
        ex.theta_x[3] = 5.0;
        ex.theta_a[3 * 4 + 2] = -7.0;
        ex.theta_a[2 * 4 + 3] = -7.0;
        let b = pred.forward(&params, &ex.input()).unwrap();
        assert_eq!(a, b);
    }

    fn permute(ex: &TrainExample, perm: &[usize]) -> TrainExample {
        let m = ex.max_n;
        let mut out = ex.clone();
        for i in 0..m {
            out.theta_x[perm[i]] = ex.theta_x[i];
            out.node_mask[perm[i]] = ex.node_mask[i];
            for j in 0..m {
                out.theta_a[perm[i] * m + perm[j]] = ex.theta_a[i * m + j];
                out.edge_mask[perm[i] * m + perm[j]] = ex.edge_mask[i * m + j];
            }
        }
        out
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let pred = Predictor::new(PredictorConfig {
            hidden_width: 8,
            ..Default::default()
        })
        .unwrap();
        let params = pred.init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ex = example(&mut rng, 4, 5, 1);
        let perm = [1, 0, 2, 3, 4];
        let a = pred.forward(&params, &ex.input()).unwrap();
        let pex = permute(&ex, &perm);
        let b = pred.forward(&params, &pex.input()).unwrap();
        let (NodeHead::Gaussian { mu: ma, .. }, NodeHead::Gaussian { mu: mb, .. }) = (&a.node, &b.node) else {
            unreachable!()
        };
        for i in 0..5 {
            assert!((ma[i] - mb[perm[i]]).abs() < 1e-12);
            for j in 0..5 {
                assert!((a.edge_mu[i * 5 + j] - b.edge_mu[perm[i] * 5 + perm[j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_mse_examples() {
        assert_eq!(masked_mse(&[0.3, 0.2], &[0.3, 0.2], &[true, true]).unwrap(), 0.0);
        assert_eq!(masked_mse(&[1.0, 0.5], &[9.0, 0.0], &[false, true]).unwrap(), 0.25);
        assert_eq!(masked_mse(&[1.0], &[2.0], &[false]).unwrap(), 0.0);
    }

    #[test]
    fn zero_params_loss_is_weighted_target_energy() {
        let pred = small(NodeChannel::Discrete, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ex = example(&mut rng, 3, 3, 1);
        ex.target_x = vec![0.0; 3];
        let sp = spec(2, 2);
        let out = pred.loss_and_grad(&pred.zero_params(), &[ex.clone()], &sp, Execution::Sequential).unwrap();
        let w = sp.schedule.loss_weight(Channel::Edge, ex.t, sp.convention);
        // Every edge target is ±0.5 and the zero predictor decodes to 0.
        assert!((out.loss - w * 0.25).abs() < 1e-12, "{}", out.loss);
    }

    fn finite_difference_check(pred: &Predictor, seed: u64, k_x: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_x = pred.config.d_x;
        let batch: Vec<_> = (0..3)
            .map(|_| {
                let n = rng.random_range(2..=3);
                example(&mut rng, n, 3, d_x)
            })
            .collect();
        let sp = spec(k_x, 3);
        let mut params = pred.init_params(seed);
        let out = pred.loss_and_grad(&params, &batch, &sp, Execution::Sequential).unwrap();
        let h = 1e-5;
        let mut fd = vec![0.0; params.len()];
        for i in 0..params.len() {
            let keep = params.values[i];
            params.values[i] = keep + h;
            let up = pred.loss_and_grad(&params, &batch, &sp, Execution::Sequential).unwrap().loss;
            params.values[i] = keep - h;
            let down = pred.loss_and_grad(&params, &batch, &sp, Execution::Sequential).unwrap().loss;
            params.values[i] = keep;
            fd[i] = (up - down) / (2.0 * h);
        }
        let num: f64 = out.grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let rel = finite_difference_check(&small(NodeChannel::Discrete, 1), seed, 3);
            assert!(rel < 1e-4, "seed {seed}: {rel}");
        }
        let rel = finite_difference_check(&small(NodeChannel::Continuous, 2), 9, 1);
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn parallel_and_sequential_losses_agree() {
        let pred = small(NodeChannel::Discrete, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<_> = (0..6).map(|_| example(&mut rng, 3, 4, 1)).collect();
        let p = pred.init_params(1);
        let sp = spec(2, 2);
        let a = pred.loss_and_grad(&p, &batch, &sp, Execution::Sequential).unwrap();
        let b = pred.loss_and_grad(&p, &batch, &sp, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn optimizer_examples() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut st = OptimizerState::new(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut st, &opt).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.5];
        let mut st = OptimizerState::new(1);
        for _ in 0..5 {
            optimizer_step(&mut p, &[3.0], &mut st, &AdamW::default()).unwrap();
        }
        assert!(p[0] < 0.5);

        let opt = AdamW {
            clip_norm: 1.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(2);
        let norm = optimizer_step(&mut [0.0, 0.0], &[2.0, 0.0], &mut st, &opt).unwrap();
        assert_eq!(norm, 2.0);
        assert!((st.m[0] - 0.1 * 1.0).abs() < 1e-15);
    }
}
