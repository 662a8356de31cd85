//! Run configuration files: `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Every key is optional; unknown sections
//! or keys are rejected.
//!
//! ```text
//! [data]
//! seed = 0
//! users = 128
//! eval_users = 32
//!
//! [train]
//! epochs = 30
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{ModelConfig, Prediction, Task, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvidencePolicy;
use crate::synth::GeneratorConfig;
use crate::tensor::Dims;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub users: usize,
    /// Users held out of training and used for evaluation.
    pub eval_users: usize,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub tasks: Vec<Task>,
    pub ours: EvidencePolicy,
    pub baseline: EvidencePolicy,
    pub cutoffs: Vec<usize>,
    pub relevant_k: usize,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                seed: 0,
                users: 128,
                eval_users: 32,
                generator: GeneratorConfig::desk(),
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig {
                seeds: vec![0, 1, 2],
                tasks: Task::ALL.to_vec(),
                ours: EvidencePolicy::Adaptive,
                baseline: EvidencePolicy::RandomFixed,
                cutoffs: vec![1, 3, 5],
                relevant_k: 3,
                parallel: false,
            },
            output: OutputConfig {
                dir: PathBuf::from("runs/default"),
                plots: true,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_tasks(key: &str, v: &str) -> Result<Vec<Task>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<Task>()
                .map_err(|_| Error::Config(format!("`{key}`: unknown task `{}`", p.trim())))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = HashSet::new();
        let mut dims = cfg.model.dims;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", no + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header `{line}`")))?;
                if !["data", "model", "train", "eval", "output"].contains(&name.trim()) {
                    return Err(at(format!("unknown section `{name}`")));
                }
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, v) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(at(format!("`{key}` appears before any section")));
            }
            let full = format!("{section}.{key}");
            if !seen.insert(full.clone()) {
                return Err(at(format!("duplicate key `{full}`")));
            }
            let k = full.as_str();
            let (d, m, t, e) = (&mut cfg.data, &mut cfg.model, &mut cfg.train, &mut cfg.eval);
            match k {
                "data.seed" => d.seed = parse(k, v)?,
                "data.users" => d.users = parse(k, v)?,
                "data.eval_users" => d.eval_users = parse(k, v)?,
                "data.channels" => dims.channels = parse(k, v)?,
                "data.time" => dims.time = parse(k, v)?,
                "data.height" => dims.height = parse(k, v)?,
                "data.width" => dims.width = parse(k, v)?,
                "data.apps" => d.generator.n_apps = parse(k, v)?,
                "data.slots_per_day" => d.generator.slots_per_day = parse(k, v)?,
                "data.history_days" => d.generator.history_days = parse(k, v)?,
                "data.noise" => d.generator.noise = parse(k, v)?,
                "model.latent" => {
                    m.latent = parse(k, v)?;
                    m.task_latent = m.latent;
                }
                "model.encoder_hidden" => m.encoder_hidden = parse(k, v)?,
                "model.profile_dim" => m.profile_dim = parse(k, v)?,
                "model.hier_tokens" => m.hier_tokens = parse(k, v)?,
                "model.refine_steps" => m.refine_steps = parse(k, v)?,
                "model.refine_rate" => m.refine_rate = parse(k, v)?,
                "model.fisher_eps" => m.fisher_eps = parse(k, v)?,
                "model.groups" => m.groups = parse(k, v)?,
                "model.cold_epsilon" => m.cold_epsilon = parse(k, v)?,
                "model.p_floor" => m.p_floor = parse(k, v)?,
                "model.base_ratio" => m.base_ratio = parse(k, v)?,
                "model.patch" => {
                    let p: Vec<usize> = parse_list(k, v)?;
                    let [a, b, c] = p[..] else {
                        return Err(at(format!("`{k}` needs three sizes")));
                    };
                    m.patch = (a, b, c);
                }
                "model.model_dim" => m.model_dim = parse(k, v)?,
                "model.blocks" => m.blocks = parse(k, v)?,
                "model.heads" => m.heads = parse(k, v)?,
                "model.mlp_ratio" => m.mlp_ratio = parse(k, v)?,
                "model.diffusion_steps" => m.horizon = parse(k, v)?,
                "model.beta_start" => m.beta_start = parse(k, v)?,
                "model.beta_end" => m.beta_end = parse(k, v)?,
                "model.prediction" => m.prediction = v.parse::<Prediction>()?,
                "model.short_horizon" => m.short_horizon = parse(k, v)?,
                "model.long_horizon" => m.long_horizon = parse(k, v)?,
                "train.epochs" => t.epochs = parse(k, v)?,
                "train.batch_size" => t.batch_size = parse(k, v)?,
                "train.learning_rate" => t.learning_rate = parse(k, v)?,
                "train.lambda_con" => t.lambda_con = parse(k, v)?,
                "train.seed" => t.seed = parse(k, v)?,
                "train.precision" => t.precision = parse(k, v)?,
                "train.optimizer" => {
                    t.plain_sgd = match v {
                        "adam" => false,
                        "sgd" => true,
                        _ => return Err(at(format!("`{k}`: expected adam or sgd, got `{v}`"))),
                    }
                }
                "train.reconstruction_only" => t.reconstruction_only = parse_bool(k, v)?,
                "train.parallel" => t.parallel = parse_bool(k, v)?,
                "eval.seeds" => e.seeds = parse_list(k, v)?,
                "eval.tasks" => e.tasks = parse_tasks(k, v)?,
                "eval.policy" => e.ours = v.parse()?,
                "eval.baseline" => e.baseline = v.parse()?,
                "eval.cutoffs" => e.cutoffs = parse_list(k, v)?,
                "eval.relevant_k" => e.relevant_k = parse(k, v)?,
                "eval.parallel" => e.parallel = parse_bool(k, v)?,
                "output.dir" => cfg.output.dir = PathBuf::from(v),
                "output.plots" => cfg.output.plots = parse_bool(k, v)?,
                _ => return Err(at(format!("unknown key `{full}`"))),
            }
        }
        cfg.model.dims = dims;
        cfg.data.generator.dims = dims;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        Dims::new(
            self.model.dims.channels,
            self.model.dims.time,
            self.model.dims.height,
            self.model.dims.width,
        )?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.data.eval_users < 2 || self.data.eval_users >= self.data.users {
            return Err(Error::Config(format!(
                "eval_users {} must lie in [2, users = {})",
                self.data.eval_users, self.data.users
            )));
        }
        if self.data.users - self.data.eval_users < 2 {
            return Err(Error::Config("training needs at least two users".into()));
        }
        if self.eval.seeds.is_empty() || self.eval.tasks.is_empty() || self.eval.cutoffs.is_empty() {
            return Err(Error::Config("eval seeds, tasks and cutoffs must be nonempty".into()));
        }
        if self.eval.cutoffs.contains(&0) || self.eval.relevant_k == 0 {
            return Err(Error::Config("cutoffs and relevant_k must be >= 1".into()));
        }
        Ok(())
    }
}
