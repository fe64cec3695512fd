//! Run configuration as flat `key = value` text.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Missing keys take
//! their defaults and unknown keys are rejected. `precision.profile` is
//! applied before every other key so explicit coupling and floor values
//! always win over the profile.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decode::{DecodeMode, EPS_PROB, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::flow::{LossConvention, Schedule};
use crate::predictor::AdamW;
use crate::solver::{text_enum, SolverConfig};
use crate::structure::ObsMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Synth,
    Zinc,
    Qm9,
}

text_enum!(Profile, "precision profile", Synth => "synth", Zinc => "zinc", Qm9 => "qm9");

impl Profile {
    /// `(λ, ε)` defaults of the profile.
    pub fn coupling_and_floor(self) -> (f64, f64) {
        match self {
            Profile::Qm9 => (1.0, 1e-4),
            Profile::Synth | Profile::Zinc => (0.2, 1e-2),
        }
    }
}

/// Channel-separated node and edge beliefs, or one belief over `X ∪ A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Separate,
    Joint,
}

text_enum!(Layout, "precision layout", Separate => "separate", Joint => "joint");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodePriorMode {
    Complete,
}

text_enum!(NodePriorMode, "node prior mode", Complete => "complete");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePriorMode {
    LineComplete,
}

text_enum!(EdgePriorMode, "edge prior mode", LineComplete => "line_complete");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// JSON-lines dataset; empty means generated random trees.
    pub path: String,
    pub synthetic_count: usize,
    pub min_n: usize,
    pub max_n: usize,
    pub mask_diag_edges: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    pub profile: Profile,
    pub layout: Layout,
    pub node_mode: NodePriorMode,
    pub edge_mode: EdgePriorMode,
    pub obs_mode: ObsMode,
    /// Symmetry couplings in the joint layout.
    pub symmetry: bool,
    pub lambda_x: f64,
    pub lambda_a: f64,
    pub eps: f64,
    pub eps_obs: f64,
}

impl PrecisionConfig {
    fn apply_profile(&mut self, profile: Profile) {
        let (lambda, eps) = profile.coupling_and_floor();
        self.profile = profile;
        self.lambda_x = lambda;
        self.lambda_a = lambda;
        self.eps = eps;
        self.eps_obs = eps;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub loss_weight: LossConvention,
    /// Draw one `t` per graph instead of one per batch.
    pub per_graph_t: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: Schedule,
    pub precision: PrecisionConfig,
    pub solver: SolverConfig,
    pub model: ModelConfig,
    pub eps_prob: f64,
    pub decode_mode: DecodeMode,
    pub optim: AdamW,
    pub train: TrainConfig,
    pub sample_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut precision = PrecisionConfig {
            profile: Profile::Synth,
            layout: Layout::Separate,
            node_mode: NodePriorMode::Complete,
            edge_mode: EdgePriorMode::LineComplete,
            obs_mode: ObsMode::DiagPrior,
            symmetry: true,
            lambda_x: 0.0,
            lambda_a: 0.0,
            eps: 0.0,
            eps_obs: 0.0,
        };
        precision.apply_profile(Profile::Synth);
        RunConfig {
            seed: 0,
            data: DataConfig {
                path: String::new(),
                synthetic_count: 200,
                min_n: 6,
                max_n: 10,
                mask_diag_edges: true,
            },
            schedule: Schedule::default(),
            precision,
            solver: SolverConfig::default(),
            model: ModelConfig {
                hidden_width: 64,
                depth: 2,
                time_embed_dim: 16,
                sigma_floor: SIGMA_FLOOR,
            },
            eps_prob: EPS_PROB,
            decode_mode: DecodeMode::Argmax,
            optim: AdamW::default(),
            train: TrainConfig {
                batch_size: 64,
                steps: 2000,
                log_every: 100,
                checkpoint_every: 0,
                loss_weight: LossConvention::Algorithmic,
                per_graph_t: false,
            },
            sample_count: 100,
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.path",
    "data.synthetic_count",
    "data.min_n",
    "data.max_n",
    "data.mask_diag_edges",
    "schedule.sigma1_x",
    "schedule.sigma1_a",
    "schedule.T",
    "schedule.t_min",
    "precision.profile",
    "precision.layout",
    "precision.node_mode",
    "precision.edge_mode",
    "precision.obs_mode",
    "precision.symmetry",
    "precision.lambda_x",
    "precision.lambda_a",
    "precision.eps",
    "precision.eps_obs",
    "solver.method",
    "solver.cg_tol",
    "solver.cg_max_iter",
    "solver.preconditioner",
    "solver.dense_cap",
    "model.hidden_width",
    "model.depth",
    "model.time_embed_dim",
    "model.sigma_floor",
    "decode.eps_prob",
    "decode.mode",
    "optim.lr",
    "optim.weight_decay",
    "optim.clip_norm",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "train.batch_size",
    "train.steps",
    "train.log_every",
    "train.checkpoint_every",
    "train.loss_weight",
    "train.per_graph_t",
    "sample.count",
];

fn parse_value<T: FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected {kind}, got {value:?}")))
}

fn parse_named<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

/// Closest valid key: a key in the same section sharing a word prefix with
/// the unknown leaf, otherwise the smallest edit distance.
pub fn suggest_key(unknown: &str) -> &'static str {
    let (section, leaf) = unknown.rsplit_once('.').unwrap_or(("", unknown));
    let leaf = leaf.to_ascii_lowercase();
    let prefix_hit = KEYS.iter().find(|k| {
        let (ks, kl) = k.rsplit_once('.').unwrap_or(("", k));
        ks == section
            && kl
                .split('_')
                .any(|word| word.len() >= 3 && (leaf.starts_with(word) || word.starts_with(leaf.as_str())))
    });
    if let Some(k) = prefix_hit {
        return k;
    }
    KEYS.iter()
        .min_by_key(|k| strsim::levenshtein(k, unknown))
        .expect("key list is not empty")
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!(
        "unknown key {key:?}; did you mean {:?}? valid keys: {}",
        suggest_key(key),
        KEYS.join(", ")
    ))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let float = |k| parse_value::<f64>(k, v, "a float");
        let int = |k| parse_value::<usize>(k, v, "a nonnegative integer");
        let long = |k| parse_value::<u64>(k, v, "a nonnegative integer");
        let boolean = |k| parse_value::<bool>(k, v, "true or false");
        match key {
            "seed" => self.seed = long(key)?,
            "data.path" => self.data.path = v.to_string(),
            "data.synthetic_count" => self.data.synthetic_count = int(key)?,
            "data.min_n" => self.data.min_n = int(key)?,
            "data.max_n" => self.data.max_n = int(key)?,
            "data.mask_diag_edges" => self.data.mask_diag_edges = boolean(key)?,
            "schedule.sigma1_x" => self.schedule.sigma1_node = float(key)?,
            "schedule.sigma1_a" => self.schedule.sigma1_edge = float(key)?,
            "schedule.T" => self.schedule.steps = int(key)?,
            "schedule.t_min" => self.schedule.t_min = float(key)?,
            "precision.profile" => self.precision.apply_profile(parse_named(key, v)?),
            "precision.layout" => self.precision.layout = parse_named(key, v)?,
            "precision.node_mode" => self.precision.node_mode = parse_named(key, v)?,
            "precision.edge_mode" => self.precision.edge_mode = parse_named(key, v)?,
            "precision.obs_mode" => self.precision.obs_mode = parse_named(key, v)?,
            "precision.symmetry" => self.precision.symmetry = boolean(key)?,
            "precision.lambda_x" => self.precision.lambda_x = float(key)?,
            "precision.lambda_a" => self.precision.lambda_a = float(key)?,
            "precision.eps" => self.precision.eps = float(key)?,
            "precision.eps_obs" => self.precision.eps_obs = float(key)?,
            "solver.method" => self.solver.method = parse_named(key, v)?,
            "solver.cg_tol" => self.solver.cg_tol = float(key)?,
            "solver.cg_max_iter" => self.solver.cg_max_iter = int(key)?,
            "solver.preconditioner" => self.solver.preconditioner = parse_named(key, v)?,
            "solver.dense_cap" => self.solver.dense_cap = int(key)?,
            "model.hidden_width" => self.model.hidden_width = int(key)?,
            "model.depth" => self.model.depth = int(key)?,
            "model.time_embed_dim" => self.model.time_embed_dim = int(key)?,
            "model.sigma_floor" => self.model.sigma_floor = float(key)?,
            "decode.eps_prob" => self.eps_prob = float(key)?,
            "decode.mode" => self.decode_mode = parse_named(key, v)?,
            "optim.lr" => self.optim.lr = float(key)?,
            "optim.weight_decay" => self.optim.weight_decay = float(key)?,
            "optim.clip_norm" => self.optim.clip_norm = float(key)?,
            "optim.beta1" => self.optim.beta1 = float(key)?,
            "optim.beta2" => self.optim.beta2 = float(key)?,
            "optim.eps" => self.optim.eps = float(key)?,
            "train.batch_size" => self.train.batch_size = int(key)?,
            "train.steps" => self.train.steps = long(key)?,
            "train.log_every" => self.train.log_every = long(key)?,
            "train.checkpoint_every" => self.train.checkpoint_every = long(key)?,
            "train.loss_weight" => self.train.loss_weight = parse_named(key, v)?,
            "train.per_graph_t" => self.train.per_graph_t = boolean(key)?,
            "sample.count" => self.sample_count = int(key)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.path" => self.data.path.clone(),
            "data.synthetic_count" => self.data.synthetic_count.to_string(),
            "data.min_n" => self.data.min_n.to_string(),
            "data.max_n" => self.data.max_n.to_string(),
            "data.mask_diag_edges" => self.data.mask_diag_edges.to_string(),
            "schedule.sigma1_x" => self.schedule.sigma1_node.to_string(),
            "schedule.sigma1_a" => self.schedule.sigma1_edge.to_string(),
            "schedule.T" => self.schedule.steps.to_string(),
            "schedule.t_min" => self.schedule.t_min.to_string(),
            "precision.profile" => self.precision.profile.to_string(),
            "precision.layout" => self.precision.layout.to_string(),
            "precision.node_mode" => self.precision.node_mode.to_string(),
            "precision.edge_mode" => self.precision.edge_mode.to_string(),
            "precision.obs_mode" => self.precision.obs_mode.to_string(),
            "precision.symmetry" => self.precision.symmetry.to_string(),
            "precision.lambda_x" => self.precision.lambda_x.to_string(),
            "precision.lambda_a" => self.precision.lambda_a.to_string(),
            "precision.eps" => self.precision.eps.to_string(),
            "precision.eps_obs" => self.precision.eps_obs.to_string(),
            "solver.method" => self.solver.method.to_string(),
            "solver.cg_tol" => self.solver.cg_tol.to_string(),
            "solver.cg_max_iter" => self.solver.cg_max_iter.to_string(),
            "solver.preconditioner" => self.solver.preconditioner.to_string(),
            "solver.dense_cap" => self.solver.dense_cap.to_string(),
            "model.hidden_width" => self.model.hidden_width.to_string(),
            "model.depth" => self.model.depth.to_string(),
            "model.time_embed_dim" => self.model.time_embed_dim.to_string(),
            "model.sigma_floor" => self.model.sigma_floor.to_string(),
            "decode.eps_prob" => self.eps_prob.to_string(),
            "decode.mode" => self.decode_mode.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.clip_norm" => self.optim.clip_norm.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.log_every" => self.train.log_every.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "train.loss_weight" => self.train.loss_weight.to_string(),
            "train.per_graph_t" => self.train.per_graph_t.to_string(),
            "sample.count" => self.sample_count.to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("every listed key has a value")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Builds from `(key, value)` pairs; the profile key goes first.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let mut cfg = RunConfig::default();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "precision.profile") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "precision.profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.schedule.validate().map_err(wrap)?;
        self.solver.validate().map_err(wrap)?;
        let p = &self.precision;
        for (name, v) in [("precision.lambda_x", p.lambda_x), ("precision.lambda_a", p.lambda_a)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("precision.eps", p.eps),
            ("precision.eps_obs", p.eps_obs),
            ("decode.eps_prob", self.eps_prob),
            ("model.sigma_floor", self.model.sigma_floor),
            ("optim.lr", self.optim.lr),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.model.time_embed_dim.is_multiple_of(2) || self.model.hidden_width == 0 {
            return Err(Error::Config("model.time_embed_dim must be even and model.hidden_width positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.data.min_n < 2 || self.data.min_n > self.data.max_n {
            return Err(Error::Config(format!(
                "need 2 <= data.min_n <= data.max_n, got {} and {}",
                self.data.min_n, self.data.max_n
            )));
        }
        Ok(())
    }
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn parse_config_text(text: &str, path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let pairs = parse_pairs(text, path)?;
    RunConfig::from_pairs(
        pairs
            .iter()
            .chain(overrides)
            .map(|(k, v)| (k.as_str(), v.as_str())),
    )
}

/// Reads a config file and applies `overrides` after it.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, path, overrides)
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
