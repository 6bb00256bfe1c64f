use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::APConfig;
use crate::model::{LossWeights, ModelConfig};
use crate::scenesim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train.{what} is out of range")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip");
        }
        let l = &self.loss;
        if [l.sim, l.diff, l.reg, l.aux].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss");
        }
        if l.reg_sign != 1.0 && l.reg_sign != -1.0 {
            return bad("loss.reg_sign");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_dets: usize,
    pub score_floor: f64,
    pub ap: APConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_dets: 64,
            score_floor: 0.05,
            ap: APConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_dets == 0 {
            return Err(Error::Config("eval.max_dets must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config("eval.score_floor must lie in [0, 1)".into()));
        }
        self.ap.validate()
    }
}

/// Everything a run needs, as read from one TOML file with `[sim]`,
/// `[model]`, `[train]` and `[eval]` tables. Missing keys take defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            model: ModelConfig::for_sim(&sim),
            sim,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.model.check_sim(&self.sim)?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
