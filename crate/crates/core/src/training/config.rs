use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;

use super::optim::AdamConfig;

/// Everything a training run needs, readable from a flat `key = value`
/// file. Lines starting with `#` are comments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    /// The `d_model` argument of the learning-rate schedule.
    pub lr_d_model: usize,
    /// Multiplier on the schedule.
    pub lr_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Fixed `(t, level, noise)` draws per record for the evaluation loss.
    pub eval_draws: usize,
    pub d_model: usize,
    pub levels: usize,
    pub attn_levels: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub kernel: usize,
    pub style_channels: Vec<usize>,
    pub style_height: usize,
    pub style_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut c = Self {
            schedule: ScheduleConfig::default(),
            batch_size: 16,
            total_steps: 3000,
            adam: AdamConfig::default(),
            warmup_steps: 500,
            lr_d_model: 128,
            lr_scale: 1.0,
            grad_clip: 100.0,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            eval_draws: 8,
            d_model: 0,
            levels: 0,
            attn_levels: 0,
            heads: 0,
            ff_mult: 0,
            kernel: 0,
            style_channels: Vec::new(),
            style_height: 0,
            style_width: 0,
        };
        c.apply_model(&ModelConfig::desk(0));
        c
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Paper-scale settings: batch 96, 60k steps, 10k warmup, d_model 256.
    pub fn paper() -> Self {
        let mut c = Self {
            batch_size: 96,
            total_steps: 60_000,
            warmup_steps: 10_000,
            lr_d_model: 256,
            ..Self::default()
        };
        c.apply_model(&ModelConfig::paper(0));
        c
    }

    pub fn apply_model(&mut self, m: &ModelConfig) {
        self.d_model = m.d_model;
        self.levels = m.levels;
        self.attn_levels = m.attn_levels;
        self.heads = m.heads;
        self.ff_mult = m.ff_mult;
        self.kernel = m.kernel;
        self.style_channels = m.style_channels.clone();
        self.style_height = m.style_height;
        self.style_width = m.style_width;
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            levels: self.levels,
            attn_levels: self.attn_levels,
            heads: self.heads,
            ff_mult: self.ff_mult,
            kernel: self.kernel,
            style_channels: self.style_channels.clone(),
            vocab_size,
            style_height: self.style_height,
            style_width: self.style_width,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => match v {
                "desk" => self.apply_model(&ModelConfig::desk(0)),
                "paper" => *self = Self::paper(),
                "tiny" => self.apply_model(&ModelConfig::tiny(0)),
                _ => return Err(Error::Config(format!("unknown preset {v:?}"))),
            },
            "steps" => self.schedule.steps = parse(key, v)?,
            "beta_base" => self.schedule.base = parse(key, v)?,
            "beta_lo" => self.schedule.lo = parse(key, v)?,
            "beta_hi" => self.schedule.hi = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "lr_d_model" => self.lr_d_model = parse(key, v)?,
            "lr_scale" => self.lr_scale = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval_draws" => self.eval_draws = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "attn_levels" => self.attn_levels = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ff_mult" => self.ff_mult = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "style_channels" => {
                self.style_channels = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "style_height" => self.style_height = parse(key, v)?,
            "style_width" => self.style_width = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file. A `preset` line is applied before every other
    /// key regardless of where it appears.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let s = &self.schedule;
        let chans: Vec<String> = self.style_channels.iter().map(|c| c.to_string()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("steps", s.steps.to_string());
        kv("beta_base", format!("{:?}", s.base));
        kv("beta_lo", format!("{:?}", s.lo));
        kv("beta_hi", format!("{:?}", s.hi));
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("adam_beta1", format!("{:?}", self.adam.beta1));
        kv("adam_beta2", format!("{:?}", self.adam.beta2));
        kv("adam_eps", format!("{:?}", self.adam.eps));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("lr_d_model", self.lr_d_model.to_string());
        kv("lr_scale", format!("{:?}", self.lr_scale));
        kv("grad_clip", format!("{:?}", self.grad_clip));
        kv("seed", self.seed.to_string());
        kv("log_every", self.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("eval_draws", self.eval_draws.to_string());
        kv("d_model", self.d_model.to_string());
        kv("levels", self.levels.to_string());
        kv("attn_levels", self.attn_levels.to_string());
        kv("heads", self.heads.to_string());
        kv("ff_mult", self.ff_mult.to_string());
        kv("kernel", self.kernel.to_string());
        kv("style_channels", chans.join(","));
        kv("style_height", self.style_height.to_string());
        kv("style_width", self.style_width.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.total_steps == 0 || self.lr_d_model == 0 {
            return bad("batch_size, total_steps and lr_d_model must be positive");
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.adam.beta1) || !in_unit(self.adam.beta2) || !(self.adam.eps > 0.0) {
            return bad("adam betas must lie in (0, 1) and eps must be positive");
        }
        if !(self.grad_clip > 0.0) || !(self.lr_scale >= 0.0) {
            return bad("grad_clip must be positive and lr_scale non-negative");
        }
        self.schedule.build()?;
        self.model_config(3).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overrides() {
        let mut c = TrainConfig::default();
        c.lr_scale = 0.3;
        c.style_channels = vec![4, 8, 16];
        c.schedule.hi = 0.123456789;
        let back = TrainConfig::parse_str(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
        let p = TrainConfig::parse_str("d_model = 64\n# comment\npreset = paper\n").unwrap();
        assert_eq!(p.d_model, 64);
        assert_eq!(p.batch_size, 96);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::parse_str("nope = 1").is_err());
        assert!(TrainConfig::parse_str("adam_beta1 = 1.0").is_err());
        assert!(TrainConfig::parse_str("batch_size").is_err());
        assert!(TrainConfig::parse_str("batch_size = x").is_err());
    }
}
