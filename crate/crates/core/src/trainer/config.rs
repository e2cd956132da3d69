use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::ComboCfg;
use crate::ensemble::EnsembleCfg;
use crate::kv::{self, format_list, parse_list, parse_value, real};
use crate::pnf::PnfCfg;
use crate::{Error, Result};

/// Rollout horizons with first-class presets.
pub const HORIZON_PRESETS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    CurrentPi,
    Uniform,
}

impl fmt::Display for RolloutPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RolloutPolicy::CurrentPi => "current_pi",
            RolloutPolicy::Uniform => "uniform",
        })
    }
}

impl FromStr for RolloutPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current_pi" => Ok(RolloutPolicy::CurrentPi),
            "uniform" => Ok(RolloutPolicy::Uniform),
            _ => Err(Error::Config(format!("unknown rollout policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TrainCfg {
    /// Rollout horizon.
    pub H: usize,
    pub n_start: usize,
    /// Fraction of each start batch replaced by augmented states.
    pub f_aug: f64,
    pub n_epochs: usize,
    pub steps_per_epoch: usize,
    pub rollout_policy: RolloutPolicy,
    pub seed: u64,
    pub combo: ComboCfg,
    pub pnf: PnfCfg,
    pub model: EnsembleCfg,
    pub val_fraction: f64,
    /// Evaluation episodes per epoch for the reported score.
    pub eval_episodes: usize,
    /// Dataset pairs sampled for the per-epoch average dataset Q.
    pub adq_samples: usize,
    /// Write a JSON-lines trace of every augmentation chain.
    pub trace: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            H: 5,
            n_start: 256,
            f_aug: 0.0,
            n_epochs: 50,
            steps_per_epoch: 200,
            rollout_policy: RolloutPolicy::CurrentPi,
            seed: 0,
            combo: ComboCfg::default(),
            pnf: PnfCfg::default(),
            model: EnsembleCfg::default(),
            val_fraction: 0.1,
            eval_episodes: 5,
            adq_samples: 1000,
            trace: false,
        }
    }
}

impl TrainCfg {
    /// Number of start states replaced per epoch.
    pub fn n_aug(&self) -> usize {
        (self.f_aug * self.n_start as f64 + 1e-9).floor() as usize
    }

    pub fn buffer_capacity(&self) -> usize {
        20 * self.n_start * self.H
    }

    pub fn validate(&self) -> Result<()> {
        if self.H == 0 || self.n_start == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("H, n_start and steps_per_epoch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.f_aug) {
            return Err(Error::Config("f_aug must lie in [0, 1]".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.eval_episodes == 0 || self.adq_samples == 0 {
            return Err(Error::Config("eval_episodes and adq_samples must be >= 1".into()));
        }
        self.combo.validate()?;
        if self.f_aug > 0.0 {
            self.pnf.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("H".into(), self.H.to_string()),
            ("n_start".into(), self.n_start.to_string()),
            ("f_aug".into(), real(self.f_aug)),
            ("n_epochs".into(), self.n_epochs.to_string()),
            ("steps_per_epoch".into(), self.steps_per_epoch.to_string()),
            ("rollout_policy".into(), self.rollout_policy.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("val_fraction".into(), real(self.val_fraction)),
            ("eval_episodes".into(), self.eval_episodes.to_string()),
            ("adq_samples".into(), self.adq_samples.to_string()),
            ("trace".into(), self.trace.to_string()),
        ];
        out.extend(self.combo.to_kv());
        out.extend(self.pnf.to_kv());
        out.extend([
            ("n_members".into(), self.model.n_members.to_string()),
            ("model_hidden".into(), format_list(&self.model.hidden)),
            ("model_lr".into(), real(self.model.lr)),
            ("model_batch_size".into(), self.model.batch_size.to_string()),
            ("model_max_epochs".into(), self.model.max_epochs.to_string()),
            ("model_patience".into(), self.model.patience.to_string()),
        ]);
        out
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "H" => self.H = parse_value(key, v)?,
            "n_start" => self.n_start = parse_value(key, v)?,
            "f_aug" => self.f_aug = parse_value(key, v)?,
            "n_epochs" => self.n_epochs = parse_value(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(key, v)?,
            "rollout_policy" => self.rollout_policy = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, v)?,
            "adq_samples" => self.adq_samples = parse_value(key, v)?,
            "trace" => self.trace = parse_value(key, v)?,
            "n_members" => self.model.n_members = parse_value(key, v)?,
            "model_hidden" => self.model.hidden = parse_list(key, v)?,
            "model_lr" => self.model.lr = parse_value(key, v)?,
            "model_batch_size" => self.model.batch_size = parse_value(key, v)?,
            "model_max_epochs" => self.model.max_epochs = parse_value(key, v)?,
            "model_patience" => self.model.patience = parse_value(key, v)?,
            _ => {
                if !self.combo.set(key, v)? && !self.pnf.set(key, v)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Parse a `key = value` file on top of the defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TrainCfg::default();
        for (line, k, v) in kv::parse_kv(text, path)? {
            cfg.set(&k, &v).map_err(|e| Error::parse(path, line, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        kv::format_kv(&self.to_kv())
    }
}
