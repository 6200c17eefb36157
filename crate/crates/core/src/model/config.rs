use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::toyworld::{MAX_CAPTION_TOKENS, VOCAB};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerKind {
    /// Pre-norm blocks of self-attention followed by an MLP.
    Transformer,
    /// Pre-norm residual MLP blocks applied per token, no attention.
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over non-pad positions.
    #[default]
    Mean,
    /// The first position only.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_hw: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub tower_kind: TowerKind,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
    /// Initial temperature; the stored parameter is `ln(1 / init_tau)`.
    pub init_tau: f64,
    /// Upper bound on `1 / tau`. The lower bound is 1.
    pub max_logit_scale: f64,
    pub train_tau: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_hw: 32,
            channels: 3,
            patch_size: 8,
            vocab_size: VOCAB.len(),
            max_seq_len: 16,
            d_model: 64,
            d_embed: 32,
            n_blocks: 2,
            n_heads: 4,
            tower_kind: TowerKind::Transformer,
            mlp_ratio: 4,
            pooling: Pooling::Mean,
            init_tau: 0.07,
            max_logit_scale: 100.0,
            train_tau: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.patch_size == 0 || self.image_hw == 0 || !self.image_hw.is_multiple_of(self.patch_size) {
            return fail(format!("image_hw {} is not divisible by patch_size {}", self.image_hw, self.patch_size));
        }
        if self.channels != 3 {
            return fail(format!("channels must be 3, got {}", self.channels));
        }
        if self.vocab_size < VOCAB.len() {
            return fail(format!("vocab_size {} is below the toy vocabulary size {}", self.vocab_size, VOCAB.len()));
        }
        if self.max_seq_len < MAX_CAPTION_TOKENS {
            return fail(format!("max_seq_len {} cannot hold a {MAX_CAPTION_TOKENS}-token caption", self.max_seq_len));
        }
        if self.d_model == 0 || self.d_embed == 0 || self.mlp_ratio == 0 {
            return fail("d_model, d_embed and mlp_ratio must be positive".into());
        }
        if self.tower_kind == TowerKind::Transformer && (self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads)) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.init_tau > 0.0 && self.max_logit_scale >= 1.0) {
            return fail("init_tau must be positive and max_logit_scale at least 1".into());
        }
        let init_scale = 1.0 / self.init_tau;
        if !(1.0..=self.max_logit_scale).contains(&init_scale) {
            return fail(format!("1/init_tau = {init_scale} lies outside [1, {}]", self.max_logit_scale));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_hw / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Bounds on `log_tau_inv`.
    pub fn log_scale_range(&self) -> (f32, f32) {
        (0.0, self.max_logit_scale.ln() as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_rejects_bad_patch() {
        EncoderConfig::default().validate().unwrap();
        let bad = EncoderConfig { patch_size: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config(m)) if m.contains("divisible")));
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(EncoderConfig::default()).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<EncoderConfig>(v).is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: EncoderConfig = serde_json::from_str(r#"{"d_model": 32, "n_blocks": 1}"#).unwrap();
        assert_eq!(c, EncoderConfig { d_model: 32, n_blocks: 1, ..Default::default() });
    }
}
