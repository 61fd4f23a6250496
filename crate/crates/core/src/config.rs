//! Training hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

/// Independent switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_mlm: bool,
    pub disable_token_type: bool,
    pub disable_token_position: bool,
    pub disable_contrastive: bool,
    /// Finetune with BPR and one sampled negative instead of the full softmax.
    pub use_bpr: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Weight of the masked-token loss.
    pub lambda_mlm: f64,
    /// Weight of the mapping loss.
    pub lambda_map: f64,
    pub history_mask_rate: f64,
    pub next_mask_rate: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Share of each item's tokens dropped before encoding.
    pub token_drop_rate: f64,
    /// Pretraining stops after this many epochs without holdout improvement.
    pub patience: usize,
    /// Share of pretraining sequences held out for early stopping.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            batch_size: 32,
            learning_rate: 5e-5,
            temperature: 0.05,
            lambda_mlm: 0.1,
            lambda_map: 0.1,
            history_mask_rate: 0.15,
            next_mask_rate: 0.5,
            ema_decay: 0.999,
            epochs: 10,
            seed: 0,
            ablation: Ablation::default(),
            token_drop_rate: 0.0,
            patience: 5,
            holdout_fraction: 0.05,
        }
    }

    pub fn finetune() -> Self {
        Self { stage: Stage::Finetune, batch_size: 16, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie strictly between 0 and 1")))
            }
        };
        open("history_mask_rate", self.history_mask_rate)?;
        open("next_mask_rate", self.next_mask_rate)?;
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature = {} must be positive", self.temperature));
        }
        if !(self.lambda_mlm >= 0.0 && self.lambda_map >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay = {} outside [0, 1]", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.token_drop_rate) {
            return fail(format!("token_drop_rate = {} outside [0, 1)", self.token_drop_rate));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail(format!("holdout_fraction = {} outside [0, 1)", self.holdout_fraction));
        }
        Ok(())
    }

    /// Model switches implied by the ablation flags.
    pub fn apply_ablation(&self, model: &mut ModelConfig) {
        model.use_token_type = !self.ablation.disable_token_type;
        model.use_token_position = !self.ablation.disable_token_position;
    }
}
