use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::losses::Objective;
use crate::model::EncoderConfig;
use crate::numerics::AdamWConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    #[default]
    None,
    Image,
    Text,
}

/// How a step's consumption is charged against the pairs budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerPolicy {
    /// Only image-caption pairs count; extra negative captions are free.
    #[default]
    PairsOnly,
    /// Negative captions without images also count, one each.
    CountExtraCaptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub pairs_budget: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub seed: u64,
    pub freeze: Freeze,
    /// Keep the temperature fixed regardless of tower freezing.
    pub freeze_tau: bool,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Steps between periodic checkpoints; 0 uses `eval_every`.
    pub checkpoint_every: u64,
    pub ledger_policy: LedgerPolicy,
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub reference_checkpoint: Option<PathBuf>,
    pub encoder: EncoderConfig,
    /// Pins intra-op parallelism to one thread.
    pub strict_deterministic: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            objective: Objective::Tripletclip,
            batch_size: 64,
            pairs_budget: 256_000,
            base_lr: 3e-4,
            weight_decay: 0.1,
            betas: [0.9, 0.999],
            eps: 1e-8,
            warmup_steps: 200,
            min_lr: 0.0,
            seed: 0,
            freeze: Freeze::None,
            freeze_tau: false,
            eval_every: 500,
            checkpoint_every: 0,
            ledger_policy: LedgerPolicy::PairsOnly,
            dataset: None,
            eval_dataset: None,
            reference_checkpoint: None,
            encoder: EncoderConfig::default(),
            strict_deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Large-batch pre-training hyperparameters (batch 1024, lr 5e-4, weight decay 0.5).
    pub fn large_batch() -> Self {
        let opt = AdamWConfig::default();
        Self {
            batch_size: 1024,
            base_lr: opt.base_lr,
            weight_decay: opt.weight_decay,
            betas: [opt.beta1, opt.beta2],
            eps: opt.eps,
            ..Self::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
            base_lr: self.base_lr,
        }
    }

    /// Pairs charged per full optimizer step.
    pub fn pairs_per_step(&self) -> u64 {
        let n = self.batch_size as u64;
        match (self.objective, self.ledger_policy) {
            (Objective::Clip, _) => n,
            (Objective::Negclip, LedgerPolicy::PairsOnly) => n,
            (Objective::Negclip, LedgerPolicy::CountExtraCaptions) => 2 * n,
            (Objective::Negimage | Objective::Tripletclip, _) => 2 * n,
        }
    }

    /// Steps until the ledger reaches the budget.
    pub fn total_steps(&self) -> u64 {
        self.pairs_budget.div_ceil(self.pairs_per_step())
    }

    pub fn checkpoint_interval(&self) -> u64 {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            self.eval_every
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} gives no contrastive signal (need at least 2)", self.batch_size));
        }
        if self.pairs_budget < self.batch_size as u64 {
            return fail(format!("pairs_budget {} is below batch_size {}", self.pairs_budget, self.batch_size));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return fail("learning rates must satisfy 0 <= min_lr <= base_lr".into());
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return fail("weight_decay must be non-negative and eps positive".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return fail(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.batch_size < 8 {
            log::warn!("batch_size {} is small; the contrastive signal will be weak", self.batch_size);
        }
        self.encoder.validate()?;
        Ok(())
    }
}
