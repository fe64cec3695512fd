//! Generation: iterated message fusion from an empty belief.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decode::{class_probabilities, decode_discrete, DecodeMode};
use crate::error::{Error, Result};
use crate::flow::{BeliefState, Schedule};
use crate::graph::{build_class_grid, ClassGrid, DatasetMeta, GraphSample, NodeAttrs, NodeChannel, NULL_CLASS};
use crate::par::{map_indexed, stream_rng, Execution};
use crate::predictor::{ParamVector, Predictor, PredictorInput, PredictorOutput};
use crate::solver::{standard_normal, NoiseDirection, SolverConfig};

use super::ops::{build_bundles, OperatorBundle};
use super::train::{effective_schedule, Checkpoint, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub graph: GraphSample,
    /// Set when a solve failed or stopped short of tolerance.
    pub flagged: bool,
    pub cg_warnings: usize,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    pub predictor: Predictor,
    pub params: ParamVector,
    pub schedule: Schedule,
    pub solver: SolverConfig,
    pub decode_mode: DecodeMode,
    pub meta: DatasetMeta,
    pub exec: Execution,
    eps_prob: f64,
    grid_x: ClassGrid,
    grid_a: ClassGrid,
    mask_diag: bool,
    sizes: Vec<(usize, usize)>,
    bundles: BTreeMap<usize, OperatorBundle>,
}

impl Sampler {
    pub fn new(
        cfg: &RunConfig,
        predictor: Predictor,
        params: ParamVector,
        meta: DatasetMeta,
        size_histogram: &BTreeMap<usize, usize>,
    ) -> Result<Self> {
        predictor.check_params(&params)?;
        if size_histogram.values().all(|&c| c == 0) {
            return Err(Error::invalid("size histogram is empty"));
        }
        let mask_diag = cfg.data.mask_diag_edges;
        let bundles = build_bundles(
            size_histogram.keys().copied(),
            meta.max_n,
            predictor.config.d_x,
            mask_diag,
            &cfg.precision,
            cfg.solver.dense_cap,
        )?;
        Ok(Sampler {
            schedule: effective_schedule(cfg),
            solver: cfg.solver,
            decode_mode: cfg.decode_mode,
            exec: Execution::default(),
            eps_prob: cfg.eps_prob,
            grid_x: build_class_grid(meta.k_x.max(1))?,
            grid_a: build_class_grid(meta.k_a)?,
            mask_diag,
            sizes: size_histogram.iter().map(|(&n, &c)| (n, c)).collect(),
            bundles,
            predictor,
            params,
            meta,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.run_config()?;
        let predictor = Predictor::new(ck.predictor)?;
        let params = ck.param_vector(&predictor)?;
        Sampler::new(&cfg, predictor, params, ck.meta.clone(), &ck.size_histogram)
    }

    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        Sampler::new(
            &t.config,
            t.predictor.clone(),
            t.params.clone(),
            t.dataset.meta.clone(),
            &t.dataset.size_histogram(),
        )
    }

    /// Overrides the number of fusion steps.
    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        self.schedule.steps = steps;
        self.schedule.validate()?;
        Ok(self)
    }

    /// Node count drawn from the training histogram.
    pub fn draw_size<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: usize = self.sizes.iter().map(|s| s.1).sum();
        let mut u = rng.random_range(0..total);
        for &(n, c) in &self.sizes {
            if u < c {
                return n;
            }
            u -= c;
        }
        self.sizes[self.sizes.len() - 1].0
    }

    /// `count` graphs; graph `i` uses its own stream of `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<SampleOutcome>> {
        map_indexed(self.exec, count, |i| {
            let mut rng = stream_rng(seed, i as u64);
            let n = self.draw_size(&mut rng);
            self.sample_size(n, &mut rng)
        })
        .into_iter()
        .collect()
    }

    fn forward(&self, bundle: &OperatorBundle, means: &[Vec<f64>], t: f64) -> Result<PredictorOutput> {
        let (theta_x, theta_a) = bundle.scatter(means)?;
        let node_mask = crate::graph::node_mask_for(bundle.n, bundle.max_n);
        let edge_mask = crate::graph::edge_mask_for(&node_mask, self.mask_diag);
        self.predictor.forward(
            &self.params,
            &PredictorInput {
                max_n: bundle.max_n,
                theta_x: &theta_x,
                theta_a: &theta_a,
                t,
                node_mask: &node_mask,
                edge_mask: &edge_mask,
            },
        )
    }

    /// One chain for a graph with `n` nodes.
    pub fn sample_size(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<SampleOutcome> {
        let bundle = self
            .bundles
            .get(&n)
            .ok_or_else(|| Error::invalid(format!("no operators for n = {n}")))?;
        let node_mask = crate::graph::node_mask_for(n, bundle.max_n);
        let edge_mask = crate::graph::edge_mask_for(&node_mask, self.mask_diag);
        let mut beliefs = bundle
            .blocks
            .iter()
            .map(|b| BeliefState::zero(&b.prior, &b.obs))
            .collect::<Result<Vec<_>>>()?;
        let mut means: Vec<Vec<f64>> = bundle.blocks.iter().map(|b| vec![0.0; b.dim()]).collect();
        let mut warnings = 0;
        let mut failed = false;
        let steps = self.schedule.steps;

        'outer: for i in 1..=steps {
            let t_prev = (i - 1) as f64 / steps as f64;
            let t = i as f64 / steps as f64;
            for (k, belief) in beliefs.iter_mut().enumerate() {
                match belief.posterior_mean(&self.solver) {
                    Ok((m, report)) => {
                        warnings += !report.converged as usize;
                        means[k] = m;
                    }
                    Err(e) => {
                        warn!("solve failed at step {i} for n = {n}: {e}");
                        failed = true;
                        break 'outer;
                    }
                }
            }
            let out = self.forward(bundle, &means, self.schedule.clamp(t_prev))?;
            let cx = out.node_centers(&self.grid_x, &node_mask, self.eps_prob);
            let ca = out.edge_centers(&self.grid_a, &edge_mask, self.eps_prob);
            let z_hat = bundle.gather(&cx, &ca)?;
            for ((belief, block), center) in beliefs.iter_mut().zip(&bundle.blocks).zip(z_hat) {
                let alpha = self.schedule.alpha_increment(block.channel, t_prev, t);
                if alpha <= 0.0 {
                    continue;
                }
                let eps = standard_normal(block.dim(), rng);
                let noise = block.obs_factor.color(&eps, alpha, NoiseDirection::Covariance)?;
                let mut y: Vec<f64> = center.iter().zip(noise).map(|(c, e)| c + e).collect();
                block.apply_mask(&mut y);
                belief.fuse(&y, alpha)?;
            }
        }
        if !failed {
            for (k, belief) in beliefs.iter_mut().enumerate() {
                match belief.posterior_mean(&self.solver) {
                    Ok((m, report)) => {
                        warnings += !report.converged as usize;
                        means[k] = m;
                    }
                    Err(e) => {
                        warn!("final solve failed for n = {n}: {e}");
                        failed = true;
                    }
                }
            }
        }
        if warnings > 0 {
            warn!("{warnings} solves stopped short of tolerance for a graph with n = {n}");
        }
        let out = self.forward(bundle, &means, 1.0)?;
        let graph = self.decode(&out, n, &node_mask, &edge_mask, rng)?;
        Ok(SampleOutcome {
            graph,
            flagged: failed || warnings > 0,
            cg_warnings: warnings,
        })
    }

    /// Final discretization; masks and symmetry are enforced by reading only
    /// valid upper-triangle entries.
    fn decode(
        &self,
        out: &PredictorOutput,
        n: usize,
        node_mask: &[bool],
        edge_mask: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<GraphSample> {
        let m = out.max_n;
        let nodes = match self.meta.node_channel {
            NodeChannel::Discrete => {
                let params = out.node_params().ok_or_else(|| Error::invalid("expected a Gaussian node head"))?;
                let field = class_probabilities(&params, &self.grid_x, node_mask, self.eps_prob)?;
                NodeAttrs::Classes(decode_discrete(&field, self.decode_mode, Some(&mut *rng))?)
            }
            NodeChannel::Continuous => {
                let d_x = self.predictor.config.d_x;
                let x = out.node_centers(&self.grid_x, node_mask, self.eps_prob);
                NodeAttrs::Coords { dim: d_x, values: x }
            }
        };
        let field = class_probabilities(&out.edge_params(), &self.grid_a, edge_mask, self.eps_prob)?;
        let classes = decode_discrete(&field, self.decode_mode, Some(&mut *rng))?;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i..n {
                let c = classes[i * m + j];
                if edge_mask[i * m + j] && c != NULL_CLASS {
                    edges.push((i, j, c));
                }
            }
        }
        GraphSample::new(n, m, nodes, &edges, self.mask_diag)
    }
}
