//! Model, training and regime settings.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Dims;

/// Inference regime and the task-specific parameter set it selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Short,
    Long,
    Cold,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Short, Task::Long, Task::Cold];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Short => "short",
            Task::Long => "long",
            Task::Cold => "cold",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "short" => Ok(Task::Short),
            "long" => Ok(Task::Long),
            "cold" => Ok(Task::Cold),
            other => Err(Error::Config(format!("unknown task `{other}` (short, long, cold)"))),
        }
    }
}

/// What the denoiser output is trained to match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    CleanSignal,
    Noise,
}

impl FromStr for Prediction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "x0" => Ok(Prediction::CleanSignal),
            "eps" => Ok(Prediction::Noise),
            other => Err(Error::Config(format!("unknown prediction `{other}` (x0, eps)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: Dims,
    /// Latent width `d`; the task width `d_τ` must match it because the
    /// spatial affinity multiplies `z ⊙ λ`.
    pub latent: usize,
    pub task_latent: usize,
    pub encoder_hidden: usize,
    pub profile_dim: usize,
    /// Tokens in the re-expansion of `h` seen by the hierarchical encoder.
    pub hier_tokens: usize,
    pub refine_steps: usize,
    pub refine_rate: f64,
    pub fisher_eps: f64,
    pub groups: usize,
    pub cold_epsilon: f64,
    pub p_floor: f64,
    /// Initial base observation ratio per task, before the user factor.
    pub base_ratio: f64,
    pub patch: (usize, usize, usize),
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub prediction: Prediction,
    pub short_horizon: usize,
    pub long_horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: Dims::desk(),
            latent: 32,
            task_latent: 32,
            encoder_hidden: 64,
            profile_dim: 32,
            hier_tokens: 4,
            refine_steps: 3,
            refine_rate: 0.1,
            fisher_eps: 1e-6,
            groups: 4,
            cold_epsilon: 0.3,
            p_floor: 1e-8,
            base_ratio: 0.25,
            patch: (4, 2, 2),
            model_dim: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            horizon: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            prediction: Prediction::CleanSignal,
            short_horizon: 4,
            long_horizon: 16,
        }
    }
}

impl ModelConfig {
    /// A tiny configuration for gradient checks and fast tests.
    pub fn tiny(dims: Dims) -> Self {
        Self {
            dims,
            latent: 4,
            task_latent: 4,
            encoder_hidden: 6,
            profile_dim: 3,
            hier_tokens: 2,
            groups: 3,
            patch: (2, 2, 2),
            model_dim: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            horizon: 10,
            short_horizon: 2,
            long_horizon: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.latent != self.task_latent {
            return bad(format!(
                "latent ({}) and task_latent ({}) must match",
                self.latent, self.task_latent
            ));
        }
        let positive = [
            ("latent", self.latent),
            ("encoder_hidden", self.encoder_hidden),
            ("profile_dim", self.profile_dim),
            ("hier_tokens", self.hier_tokens),
            ("groups", self.groups),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        let (t0, h0, w0) = self.patch;
        let d = self.dims;
        if t0 == 0 || h0 == 0 || w0 == 0 || d.time % t0 != 0 || d.height % h0 != 0 || d.width % w0 != 0 {
            return bad(format!("patch {:?} does not tile {:?}", self.patch, d));
        }
        if !(self.refine_rate > 0.0) || !(self.fisher_eps > 0.0) {
            return bad("refine_rate and fisher_eps must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.cold_epsilon) {
            return bad(format!("cold_epsilon {} outside [0, 1]", self.cold_epsilon));
        }
        if !(self.base_ratio > 0.0 && self.base_ratio < 1.0) {
            return bad(format!("base_ratio {} outside (0, 1)", self.base_ratio));
        }
        if !(self.p_floor > 0.0) {
            return bad("p_floor must be > 0".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!("beta range [{}, {}] invalid", self.beta_start, self.beta_end));
        }
        if self.short_horizon == 0 || self.long_horizon == 0 || self.short_horizon >= d.time || self.long_horizon >= d.time {
            return bad(format!(
                "held-out horizons ({}, {}) must lie in [1, T)",
                self.short_horizon, self.long_horizon
            ));
        }
        Ok(())
    }

    /// Slots hidden from the user's own tensor; `None` hides everything.
    pub fn held_out(&self, task: Task) -> Option<usize> {
        match task {
            Task::Short => Some(self.short_horizon),
            Task::Long => Some(self.long_horizon),
            Task::Cold => None,
        }
    }

    pub fn tokens(&self) -> usize {
        let (t0, h0, w0) = self.patch;
        (self.dims.time / t0) * (self.dims.height / h0) * (self.dims.width / w0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_con: f64,
    pub seed: u64,
    /// 32 rounds parameters through `f32` after every update.
    pub precision: u8,
    /// Plain gradient descent instead of Adam.
    pub plain_sgd: bool,
    /// Drops the contrastive term.
    pub reconstruction_only: bool,
    /// Runs the members of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            lambda_con: 0.1,
            seed: 0,
            precision: 64,
            plain_sgd: false,
            reconstruction_only: false,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.lambda_con >= 0.0) {
            return Err(Error::Config("lambda_con must be >= 0".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config(format!("precision {} (32 or 64)", self.precision)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny(Dims::new(2, 8, 4, 4).unwrap()).validate().unwrap();
        TrainConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().tokens(), 128);
    }

    #[test]
    fn tasks_parse() {
        assert_eq!("Short".parse::<Task>().unwrap(), Task::Short);
        assert!("medium".parse::<Task>().is_err());
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut m = ModelConfig::default();
        m.patch = (3, 2, 2);
        assert!(m.validate().is_err());
        let t = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }
}
