//! Training loop and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Layout, RunConfig};
use crate::error::{Error, Result};
use crate::flow::{sample_flow_state, Schedule};
use crate::graph::{
    build_class_grid, encode_continuous, read_dataset, ContinuousGraph, Dataset, DatasetMeta,
};
use crate::par::{map_slice, mix_seed, stream_rng, Execution};
use crate::predictor::{
    optimizer_step, LossOutput, LossSpec, OptimizerState, ParamVector, Predictor, PredictorConfig, TrainExample,
};

use super::ops::{build_bundles, OperatorBundle};
use super::trees::gen_tree_dataset;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Generated trees when `data.path` is empty, otherwise the file.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    if d.path.is_empty() {
        gen_tree_dataset(d.synthetic_count, d.min_n, d.max_n, cfg.seed, d.mask_diag_edges)
    } else {
        read_dataset(&d.path, d.mask_diag_edges)
    }
}

/// The joint layout runs one belief on the edge schedule.
pub fn effective_schedule(cfg: &RunConfig) -> Schedule {
    match cfg.precision.layout {
        Layout::Separate => cfg.schedule,
        Layout::Joint => Schedule {
            sigma1_node: cfg.schedule.sigma1_edge,
            ..cfg.schedule
        },
    }
}

pub fn predictor_config(cfg: &RunConfig, meta: &DatasetMeta, d_x: usize) -> PredictorConfig {
    PredictorConfig {
        hidden_width: cfg.model.hidden_width,
        depth: cfg.model.depth,
        time_embed_dim: cfg.model.time_embed_dim,
        node_channel: meta.node_channel,
        d_x,
        sigma_floor: cfg.model.sigma_floor,
    }
}

fn node_dim(dataset: &Dataset) -> usize {
    dataset.graphs.first().map_or(1, |g| g.nodes.dim())
}

pub fn loss_spec(cfg: &RunConfig, meta: &DatasetMeta) -> Result<LossSpec> {
    Ok(LossSpec {
        schedule: effective_schedule(cfg),
        convention: cfg.train.loss_weight,
        grid_x: build_class_grid(meta.k_x.max(1))?,
        grid_a: build_class_grid(meta.k_a)?,
        eps_prob: cfg.eps_prob,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Resolved config as `key -> value`.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub step: u64,
    pub meta: DatasetMeta,
    pub size_histogram: BTreeMap<usize, usize>,
    pub predictor: PredictorConfig,
    /// Parameter segments by name.
    pub params: BTreeMap<String, Vec<f64>>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_pairs(self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn param_vector(&self, predictor: &Predictor) -> Result<ParamVector> {
        let mut p = predictor.zero_params();
        for seg in &p.segments {
            let values = self
                .params
                .get(&seg.name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter segment {:?}", seg.name)))?;
            crate::error::check_len(seg.len, values.len())?;
            p.values[seg.offset..seg.offset + seg.len].copy_from_slice(values);
        }
        predictor.check_params(&p)?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    /// Number of updates applied after this step.
    pub step: u64,
    pub loss: f64,
    pub node_mse: f64,
    pub edge_mse: f64,
    pub grad_norm: f64,
    /// Flow-state solves that stopped before reaching tolerance.
    pub cg_warnings: usize,
}

/// Owns the parameters and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub predictor: Predictor,
    pub params: ParamVector,
    pub opt_state: OptimizerState,
    pub step: u64,
    pub exec: Execution,
    spec: LossSpec,
    encoded: Vec<ContinuousGraph>,
    bundles: BTreeMap<usize, OperatorBundle>,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.graphs.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let d_x = node_dim(&dataset);
        let predictor = Predictor::new(predictor_config(&config, &dataset.meta, d_x))?;
        let params = predictor.init_params(config.seed);
        let opt_state = OptimizerState::new(params.len());
        let spec = loss_spec(&config, &dataset.meta)?;
        let encoded = dataset
            .graphs
            .iter()
            .map(|g| encode_continuous(g, &spec.grid_x, &spec.grid_a))
            .collect::<Result<Vec<_>>>()?;
        let mask_diag = dataset.graphs[0].mask_diag();
        let bundles = build_bundles(
            dataset.size_histogram().into_keys(),
            dataset.meta.max_n,
            d_x,
            mask_diag,
            &config.precision,
            config.solver.dense_cap,
        )?;
        Ok(Trainer {
            config,
            dataset,
            predictor,
            params,
            opt_state,
            step: 0,
            exec: Execution::default(),
            spec,
            encoded,
            bundles,
        })
    }

    /// Continues from `ck` on the same dataset.
    pub fn resume(ck: &Checkpoint, dataset: Dataset) -> Result<Self> {
        let config = ck.run_config()?;
        if dataset.size_histogram() != ck.size_histogram {
            return Err(Error::invalid("dataset does not match the checkpoint's size histogram"));
        }
        let mut t = Trainer::new(config, dataset)?;
        t.params = ck.param_vector(&t.predictor)?;
        crate::error::check_len(t.params.len(), ck.optimizer.m.len())?;
        t.opt_state = ck.optimizer.clone();
        t.step = ck.step;
        Ok(t)
    }

    pub fn loss_spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn bundles(&self) -> &BTreeMap<usize, OperatorBundle> {
        &self.bundles
    }

    fn step_seed(&self, step: u64) -> u64 {
        mix_seed(self.config.seed, step)
    }

    /// Draws the batch and flow states for update `step`. `t_override`
    /// replaces the sampled time (before clamping).
    pub fn build_batch(&self, step: u64, t_override: Option<f64>) -> Result<(Vec<TrainExample>, usize)> {
        let seed = self.step_seed(step);
        let mut rng = stream_rng(seed, 0);
        let len = self.encoded.len();
        let bs = self.config.train.batch_size;
        let picks: Vec<usize> = if bs <= len {
            index::sample(&mut rng, len, bs).into_vec()
        } else {
            (0..bs).map(|_| rng.random_range(0..len)).collect()
        };
        let schedule = self.spec.schedule;
        let draw_t = |rng: &mut rand_chacha::ChaCha8Rng| schedule.clamp(t_override.unwrap_or_else(|| rng.random::<f64>()));
        let shared_t = draw_t(&mut rng);
        let times: Vec<f64> = if self.config.train.per_graph_t {
            (0..bs).map(|_| draw_t(&mut rng)).collect()
        } else {
            vec![shared_t; bs]
        };
        let jobs: Vec<(usize, f64)> = picks.into_iter().zip(times).collect();
        let built = map_slice(self.exec, &jobs, |slot, &(g, t)| self.flow_example(g, t, seed, slot as u64));
        let mut warnings = 0;
        let mut batch = Vec::with_capacity(built.len());
        for r in built {
            let (ex, w) = r?;
            warnings += w;
            batch.push(ex);
        }
        Ok((batch, warnings))
    }

    fn flow_example(&self, g: usize, t: f64, seed: u64, slot: u64) -> Result<(TrainExample, usize)> {
        let enc = &self.encoded[g];
        let graph = &self.dataset.graphs[g];
        let bundle = &self.bundles[&graph.n];
        let mut rng = stream_rng(seed, 1 + slot);
        let targets = bundle.gather(&enc.x_c, &enc.a_c)?;
        let mut states = Vec::with_capacity(targets.len());
        let mut warnings = 0;
        for (block, z) in bundle.blocks.iter().zip(&targets) {
            let beta = self.spec.schedule.beta_at(block.channel, t);
            let (theta, report) = sample_flow_state(
                z,
                &block.prior,
                &block.obs,
                &block.obs_factor,
                beta,
                Some(&block.mask),
                &mut rng,
                &self.config.solver,
            )?;
            warnings += !report.converged as usize;
            states.push(theta);
        }
        let (theta_x, theta_a) = bundle.scatter(&states)?;
        Ok((
            TrainExample {
                max_n: enc.max_n,
                theta_x,
                theta_a,
                t,
                node_mask: enc.node_mask.clone(),
                edge_mask: enc.edge_mask.clone(),
                target_x: enc.x_c.clone(),
                target_a: enc.a_c.clone(),
            },
            warnings,
        ))
    }

    /// Loss of update `step`'s batch at the current parameters.
    pub fn batch_loss(&self, step: u64, t_override: Option<f64>) -> Result<LossOutput> {
        let (batch, _) = self.build_batch(step, t_override)?;
        self.predictor.loss_and_grad(&self.params, &batch, &self.spec, self.exec)
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let (batch, cg_warnings) = self.build_batch(self.step, None)?;
        let out = self.predictor.loss_and_grad(&self.params, &batch, &self.spec, self.exec)?;
        let grad_norm = optimizer_step(&mut self.params.values, &out.grad, &mut self.opt_state, &self.config.optim)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: out.loss,
            node_mse: out.node_mse,
            edge_mse: out.edge_mse,
            grad_norm,
            cg_warnings,
        })
    }

    /// Runs `steps` updates, calling `observe` after each.
    pub fn run(&mut self, steps: u64, mut observe: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.train_step()?;
            observe(self, &r)?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .segments
            .iter()
            .map(|s| (s.name.clone(), self.params.values[s.offset..s.offset + s.len].to_vec()))
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.entries().into_iter().collect(),
            seed: self.config.seed,
            step: self.step,
            meta: self.dataset.meta.clone(),
            size_histogram: self.dataset.size_histogram(),
            predictor: self.predictor.config,
            params,
            optimizer: self.opt_state.clone(),
        }
    }
}
