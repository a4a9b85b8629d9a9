//! Key=value configuration files with `desk` and `fullscale` presets.
//!
//! The `fullscale` preset records the published training hyperparameters
//! (100K steps, batch 512, lr 3e-4, 50K vocabulary, RoBERTa-base shape);
//! it exists as documentation and is not runnable on a laptop. The `desk`
//! preset is the scaled-down default every CLI command starts from.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{FinetuneConfig, TaskKind};
use crate::model::ModelConfig;
use crate::tensor::Dtype;
use crate::train::MaskingPolicy;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model_dim: usize,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_ffn_dim: usize,
    pub model_max_len: usize,
    pub model_dropout: f64,
    pub model_tie_embeddings: bool,

    pub tokenizer_vocab_size: usize,

    pub train_steps: usize,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_phase1_steps: usize,
    pub train_phase2_steps: usize,
    pub train_mask_rate: f64,
    pub train_mask_prob: f64,
    pub train_random_prob: f64,
    pub train_keep_prob: f64,

    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: f64,
    pub finetune_warmup_ratio: f64,

    pub corpus_small_sentences: usize,
    pub corpus_large_sentences: usize,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// Desk-scale defaults: small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        Config {
            model_dim: 64,
            model_layers: 4,
            model_heads: 4,
            model_ffn_dim: 256,
            model_max_len: 64,
            model_dropout: 0.1,
            model_tie_embeddings: true,
            tokenizer_vocab_size: 512,
            train_steps: 3000,
            train_batch_size: 32,
            train_lr: 3e-4,
            train_phase1_steps: 1000,
            train_phase2_steps: 1000,
            train_mask_rate: 0.15,
            train_mask_prob: 0.8,
            train_random_prob: 0.1,
            train_keep_prob: 0.1,
            finetune_epochs: 3,
            finetune_batch_size: 32,
            finetune_lr: 5e-5,
            finetune_warmup_ratio: 0.1,
            corpus_small_sentences: 5_000,
            corpus_large_sentences: 50_000,
            seed: 0,
        }
    }

    /// Published full-scale values (documentation preset).
    pub fn fullscale() -> Self {
        Config {
            model_dim: 768,
            model_layers: 12,
            model_heads: 12,
            model_ffn_dim: 3072,
            model_max_len: 512,
            model_dropout: 0.1,
            model_tie_embeddings: true,
            tokenizer_vocab_size: 50_000,
            train_steps: 100_000,
            train_batch_size: 512,
            train_lr: 3e-4,
            train_phase1_steps: 50_000,
            train_phase2_steps: 50_000,
            train_mask_rate: 0.15,
            train_mask_prob: 0.8,
            train_random_prob: 0.1,
            train_keep_prob: 0.1,
            finetune_epochs: 4,
            finetune_batch_size: 32,
            finetune_lr: 5e-5,
            finetune_warmup_ratio: 0.1,
            corpus_small_sentences: 400_000,
            corpus_large_sentences: 4_000_000,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Config::desk()),
            "fullscale" => Ok(Config::fullscale()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or fullscale)"
            ))),
        }
    }

    /// Apply key=value overrides. Empty lines and `#` comments are
    /// ignored; unknown keys and malformed values are errors naming the
    /// key and 1-based line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found `{line}`"),
            })?;
            self.apply_one(key.trim(), value.trim(), i + 1)?;
        }
        Ok(())
    }

    fn apply_one(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad value `{value}` for key `{key}`"),
            })
        }
        match key {
            "model.dim" => self.model_dim = parse(key, value, line)?,
            "model.layers" => self.model_layers = parse(key, value, line)?,
            "model.heads" => self.model_heads = parse(key, value, line)?,
            "model.ffn_dim" => self.model_ffn_dim = parse(key, value, line)?,
            "model.max_len" => self.model_max_len = parse(key, value, line)?,
            "model.dropout" => self.model_dropout = parse(key, value, line)?,
            "model.tie_embeddings" => self.model_tie_embeddings = parse(key, value, line)?,
            "tokenizer.vocab_size" => self.tokenizer_vocab_size = parse(key, value, line)?,
            "train.steps" => self.train_steps = parse(key, value, line)?,
            "train.batch_size" => self.train_batch_size = parse(key, value, line)?,
            "train.lr" => self.train_lr = parse(key, value, line)?,
            "train.phase1_steps" => self.train_phase1_steps = parse(key, value, line)?,
            "train.phase2_steps" => self.train_phase2_steps = parse(key, value, line)?,
            "train.mask_rate" => self.train_mask_rate = parse(key, value, line)?,
            "train.mask_prob" => self.train_mask_prob = parse(key, value, line)?,
            "train.random_prob" => self.train_random_prob = parse(key, value, line)?,
            "train.keep_prob" => self.train_keep_prob = parse(key, value, line)?,
            "finetune.epochs" => self.finetune_epochs = parse(key, value, line)?,
            "finetune.batch_size" => self.finetune_batch_size = parse(key, value, line)?,
            "finetune.lr" => self.finetune_lr = parse(key, value, line)?,
            "finetune.warmup_ratio" => self.finetune_warmup_ratio = parse(key, value, line)?,
            "corpus.small_sentences" => self.corpus_small_sentences = parse(key, value, line)?,
            "corpus.large_sentences" => self.corpus_large_sentences = parse(key, value, line)?,
            "seed" => self.seed = parse(key, value, line)?,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, preset: &str) -> Result<Self> {
        let mut cfg = Config::preset(preset)?;
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_model_config(Dtype::F32, false).validate()?;
        self.masking_policy().validate()?;
        if !(0.0..1.0).contains(&self.finetune_warmup_ratio) {
            return Err(Error::Config(format!(
                "finetune.warmup_ratio {} out of [0,1)",
                self.finetune_warmup_ratio
            )));
        }
        if self.train_batch_size == 0 || self.finetune_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_model_config(&self, dtype: Dtype, use_itl: bool) -> ModelConfig {
        ModelConfig {
            dim: self.model_dim,
            layers: self.model_layers,
            heads: self.model_heads,
            ffn_dim: self.model_ffn_dim,
            max_len: self.model_max_len,
            vocab_size: self.tokenizer_vocab_size,
            dropout: self.model_dropout,
            use_itl,
            tie_embeddings: self.model_tie_embeddings,
            dtype,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn masking_policy(&self) -> MaskingPolicy {
        MaskingPolicy {
            rate: self.train_mask_rate,
            mask_prob: self.train_mask_prob,
            random_prob: self.train_random_prob,
            keep_prob: self.train_keep_prob,
        }
    }

    pub fn finetune_config(&self, task: TaskKind, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            batch_size: self.finetune_batch_size,
            lr: self.finetune_lr,
            warmup_ratio: self.finetune_warmup_ratio,
            seed,
            task,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fullscale_preset_pins_published_training_values() {
        let c = Config::fullscale();
        assert_eq!(c.train_steps, 100_000);
        assert_eq!(c.train_batch_size, 512);
        assert_eq!(c.train_lr, 3e-4);
        assert_eq!(c.tokenizer_vocab_size, 50_000);
        assert_eq!(c.finetune_lr, 5e-5);
        assert_eq!(c.finetune_warmup_ratio, 0.1);
    }

    #[test]
    fn desk_preset_matches_documented_defaults() {
        let c = Config::desk();
        assert_eq!((c.model_dim, c.model_layers, c.model_heads, c.model_ffn_dim), (64, 4, 4, 256));
        assert_eq!(c.tokenizer_vocab_size, 512);
        assert_eq!(c.train_steps, 3000);
        assert_eq!(c.train_phase1_steps + c.train_phase2_steps, 2000);
        assert_eq!(c.finetune_epochs, 3);
        assert_eq!(c.corpus_small_sentences, 5_000);
        assert_eq!(c.corpus_large_sentences, 50_000);
    }

    #[test]
    fn empty_text_keeps_all_defaults() {
        let mut c = Config::desk();
        c.apply_text("").unwrap();
        assert_eq!(c, Config::desk());
        c.apply_text("# just a comment\n\n").unwrap();
        assert_eq!(c, Config::desk());
    }

    #[test]
    fn heads_divisibility_is_a_validation_error() {
        let mut c = Config::desk();
        c.apply_text("model.heads=3\nmodel.dim=64\n").unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("multiple of heads"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let mut c = Config::desk();
        let err = c.apply_text("train.steps=10\nbogus.key=1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("bogus.key"), "{err}");
    }

    #[test]
    fn type_error_names_key_and_line() {
        let mut c = Config::desk();
        let err = c.apply_text("train.lr=fast\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("train.lr") && msg.contains("fast"), "{msg}");
    }
}
