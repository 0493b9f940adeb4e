//! Flat `key = value` run configuration.
//!
//! Every key has a default; files and overrides may only set known keys.
//! The resolved form is rendered sorted by key, one per line, and is what
//! gets hashed into checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffcore::{AdamConfig, DenoiserConfig};
use crate::diffusion::Vocab;
use crate::error::{Error, Result};
use crate::policy_opt::{Method, TrainConfig};
use crate::sampler::{Remasking, SampleConfig};
use crate::tasks::TaskKind;

const DEFAULTS: &[(&str, &str)] = &[
    ("task", "countdown"),
    ("method", "wd1"),
    ("seed", "0"),
    ("data_seed", "1"),
    ("eval_seed", "2"),
    ("train_size", "256"),
    ("eval_size", "256"),
    ("train_data", ""),
    ("eval_data", ""),
    // model
    ("d_model", "64"),
    ("n_layers", "2"),
    ("n_heads", "4"),
    ("d_ff", "256"),
    ("init_std", "0.02"),
    ("max_prompt_length", "24"),
    // sampling
    ("max_completion_length", "32"),
    ("block_length", "16"),
    ("diffusion_steps", "16"),
    ("remasking", "low_confidence"),
    ("temperature", "1.0"),
    ("unnormalized_mixture", "false"),
    // pretraining
    ("pretrain_size", "256"),
    ("pretrain_steps", "2000"),
    ("pretrain_batch_size", "8"),
    ("pretrain_learning_rate", "1e-3"),
    ("pretrain_target", "gold"),
    // optimizer
    ("learning_rate", "3e-4"),
    ("adam_beta1", "0.9"),
    ("adam_beta2", "0.99"),
    ("adam_epsilon", "1e-8"),
    ("weight_decay", "0.1"),
    ("max_grad_norm", "0.2"),
    // policy optimization
    ("num_generations", "6"),
    ("num_iterations", "8"),
    ("prompts_per_step", "2"),
    ("max_steps", "2000"),
    ("lambda", "1.0"),
    ("beta", "0.0"),
    ("epsilon", "0.5"),
    ("p_mask_prompt", "0.15"),
    ("length_normalize", "false"),
    ("advantage_shift", "false"),
    ("max_retries", "3"),
];

/// What pretraining teaches: the task's gold completions, or format-only
/// completions whose content is randomized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainTarget {
    Gold,
    Format,
}

impl FromStr for PretrainTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(PretrainTarget::Gold),
            "format" => Ok(PretrainTarget::Format),
            other => Err(Error::Config(format!("unknown pretrain_target {other:?}"))),
        }
    }
}

/// Raw key/value table with defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn known_keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    /// Parses config text on top of the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value",
                    n + 1
                )));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override. Values are checked at [`resolve`].
    ///
    /// [`resolve`]: RunConfig::resolve
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.get(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Type-checks every key and cross-validates the pieces.
    pub fn resolve(&self) -> Result<Resolved> {
        let task: TaskKind = self.get("task").parse()?;
        let method: Method = self.get("method").parse()?;
        let vocab = Vocab::char_level();
        let sampling = SampleConfig {
            gen_length: self.typed("max_completion_length")?,
            diffusion_steps: self.typed("diffusion_steps")?,
            block_length: self.typed("block_length")?,
            remasking: self.get("remasking").parse::<Remasking>()?,
            temperature: self.typed("temperature")?,
            lambda: self.typed("lambda")?,
            beta: 0.0,
            unnormalized_mixture: self.typed("unnormalized_mixture")?,
        };
        let max_prompt: usize = self.typed("max_prompt_length")?;
        let model = DenoiserConfig {
            vocab_size: vocab.size(),
            max_len: max_prompt + sampling.gen_length,
            d_model: self.typed("d_model")?,
            n_layers: self.typed("n_layers")?,
            n_heads: self.typed("n_heads")?,
            d_ff: self.typed("d_ff")?,
            init_std: self.typed("init_std")?,
        };
        let optimizer = AdamConfig {
            learning_rate: self.typed("learning_rate")?,
            beta1: self.typed("adam_beta1")?,
            beta2: self.typed("adam_beta2")?,
            eps: self.typed("adam_epsilon")?,
            weight_decay: self.typed("weight_decay")?,
            max_grad_norm: self.typed("max_grad_norm")?,
        };
        let seed = self.typed("seed")?;
        let train = TrainConfig {
            method,
            num_generations: self.typed("num_generations")?,
            lambda: self.typed("lambda")?,
            beta: self.typed("beta")?,
            num_iterations: self.typed("num_iterations")?,
            epsilon: self.typed("epsilon")?,
            p_mask_prompt: self.typed("p_mask_prompt")?,
            length_normalize: self.typed("length_normalize")?,
            advantage_shift: self.typed("advantage_shift")?,
            prompts_per_step: self.typed("prompts_per_step")?,
            optimizer,
            sampling,
            seed,
        };
        let r = Resolved {
            task,
            seed,
            data_seed: self.typed("data_seed")?,
            eval_seed: self.typed("eval_seed")?,
            train_size: self.typed("train_size")?,
            eval_size: self.typed("eval_size")?,
            train_data: self.path("train_data"),
            eval_data: self.path("eval_data"),
            model,
            max_prompt_length: max_prompt,
            pretrain_size: self.typed("pretrain_size")?,
            pretrain_steps: self.typed("pretrain_steps")?,
            pretrain_batch_size: self.typed("pretrain_batch_size")?,
            pretrain_learning_rate: self.typed("pretrain_learning_rate")?,
            pretrain_target: self.get("pretrain_target").parse()?,
            max_steps: self.typed("max_steps")?,
            max_retries: self.typed("max_retries")?,
            train,
        };
        r.validate()?;
        Ok(r)
    }
}

/// Typed view of a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub task: TaskKind,
    pub seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub max_prompt_length: usize,
    /// Instances generated for pretraining when no `train_data` file is set.
    pub pretrain_size: usize,
    pub pretrain_steps: u64,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_target: PretrainTarget,
    /// Budget in gradient steps.
    pub max_steps: u64,
    pub max_retries: usize,
    /// RL settings. `train.sampling.beta` is a placeholder; see
    /// [`Resolved::rollout_sampling`].
    pub train: TrainConfig,
}

impl Resolved {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if [
            self.pretrain_batch_size,
            self.pretrain_size,
            self.train_size,
            self.eval_size,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "pretrain_batch_size, pretrain_size, train_size and eval_size must be >= 1".into(),
            ));
        }
        if !(self.train.optimizer.learning_rate > 0.0) || !(self.pretrain_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }

    /// Sampler settings for RL rollouts: the wd1 variants sample from the
    /// geometric mixture (unless the advantage shift replaces it), the
    /// baseline samples from π_old alone.
    pub fn rollout_sampling(&self) -> SampleConfig {
        let t = &self.train;
        let mut s = t.sampling.clone();
        s.lambda = t.lambda;
        s.beta = match t.method {
            Method::Wd1 | Method::Wd1P if !t.advantage_shift => t.beta,
            _ => 0.0,
        };
        if s.beta == 0.0 {
            s.lambda = 1.0;
        }
        s
    }

    /// Likelihood NFEs per global step implied by the method and μ.
    pub fn likelihood_nfe_per_step(&self) -> u64 {
        let t = &self.train;
        let mu = t.num_iterations as u64;
        match t.method {
            Method::Wd1 | Method::Wd1P => mu + u64::from(t.advantage_shift && t.beta > 0.0),
            Method::DiffuGrpo => mu + 1 + u64::from(t.beta > 0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let r = RunConfig::default().resolve().unwrap().train;
        assert_eq!(r.num_generations, 6);
        assert_eq!(r.num_iterations, 8);
        assert_eq!(r.sampling.gen_length, 32);
        assert_eq!(r.optimizer.max_grad_norm, 0.2);
        assert_eq!(r.p_mask_prompt, 0.15);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("num_generation = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::default().apply_override("bogus=1").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c =
            RunConfig::parse("# desk\nnum_iterations = 2  # mu\nmethod = diffu-grpo\n").unwrap();
        assert_eq!(c.get("num_iterations"), "2");
        c.apply_override("beta=0.04").unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.train.method, Method::DiffuGrpo);
        assert_eq!(r.likelihood_nfe_per_step(), 4);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("num_generations = 1").is_err());
        assert!(RunConfig::parse("lambda = x").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("block_length = 5").is_err());
    }

    #[test]
    fn render_round_trips() {
        let c = RunConfig::parse("seed = 7\ntask = sudoku\n").unwrap();
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn nfe_formula() {
        let mut c = RunConfig::default();
        assert_eq!(c.resolve().unwrap().likelihood_nfe_per_step(), 8);
        c.apply_override("method=diffu-grpo").unwrap();
        assert_eq!(c.resolve().unwrap().likelihood_nfe_per_step(), 9);
        c.apply_override("beta=0.04").unwrap();
        assert_eq!(c.resolve().unwrap().likelihood_nfe_per_step(), 10);
    }
}
