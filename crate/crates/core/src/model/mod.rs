//! The encoder language model: embeddings, encoder stack, optional
//! implicit translation layers (ITLs), MLM head, and task heads.
//!
//! Parameter names are hierarchical and stable; they are the unit of
//! freezing, checkpoint diffing, and vocabulary swaps:
//!
//! ```text
//! embed.token            V×d     language-dependent (swapped)
//! embed.ln.{gamma,beta}  d       embedding layer norm
//! pos.table              max_len×d
//! encoder.{i}.<block>            encoder stack, i in 0..C
//! itl.in.<block>                 ITL before the stack (optional)
//! itl.out.<block>                ITL after the stack (optional)
//! mlm.dense.{w,b}        d×d, d  MLM head dense
//! mlm.ln.{gamma,beta}    d
//! mlm.bias               V       language-dependent (swapped)
//! mlm.proj               V×d     only when embeddings are untied
//! head.{w,b}                     task head (fine-tuning only)
//! ```
//!
//! `<block>` is `attn.{wq,bq,wk,bk,wv,bv,wo,bo} attn_ln.{gamma,beta}
//! ffn.{w1,b1,w2,b2} ffn_ln.{gamma,beta}` — an ITL is parameter-for-
//! parameter the same shape as one encoder block.

mod forward;

pub use forward::DropoutCtx;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, ParamFilter, ParamRegistry, Scalar, Tensor};
use crate::tokenizer::Vocabulary;
use crate::util::rng_for;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Encoder initialization for the target model: reuse the source encoder
/// or re-draw it (the parameter-reuse ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderInitKind {
    Pretrained,
    Random,
}

impl EncoderInitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderInitKind::Pretrained => "pretrained",
            EncoderInitKind::Random => "random",
        }
    }
}

/// Where a model is in the pretrain → transfer → fine-tune pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Pretrain,
    TargetInit,
    Phase1,
    Phase2,
    Scratch,
    Finetuned,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Pretrain => "pretrain",
            Provenance::TargetInit => "target-init",
            Provenance::Phase1 => "phase1",
            Provenance::Phase2 => "phase2",
            Provenance::Scratch => "scratch",
            Provenance::Finetuned => "finetuned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Provenance::Pretrain),
            "target-init" => Ok(Provenance::TargetInit),
            "phase1" => Ok(Provenance::Phase1),
            "phase2" => Ok(Provenance::Phase2),
            "scratch" => Ok(Provenance::Scratch),
            "finetuned" => Ok(Provenance::Finetuned),
            _ => Err(Error::Config(format!("unknown provenance tag `{s}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hidden width d.
    pub dim: usize,
    /// Encoder layer count C.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Bound vocabulary size V.
    pub vocab_size: usize,
    pub dropout: f64,
    pub use_itl: bool,
    /// Share one tensor between the embedding table and the MLM output
    /// projection.
    pub tie_embeddings: bool,
    pub dtype: Dtype,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            max_len: 64,
            vocab_size: 512,
            dropout: 0.1,
            use_itl: false,
            tie_embeddings: true,
            dtype: Dtype::F32,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// (name suffix, shape builder) for every parameter of one encoder block.
fn block_params(d: usize, ffn: usize) -> Vec<(&'static str, Vec<usize>, BlockInit)> {
    vec![
        ("attn.wq", vec![d, d], BlockInit::Weight),
        ("attn.bq", vec![d], BlockInit::Zero),
        ("attn.wk", vec![d, d], BlockInit::Weight),
        ("attn.bk", vec![d], BlockInit::Zero),
        ("attn.wv", vec![d, d], BlockInit::Weight),
        ("attn.bv", vec![d], BlockInit::Zero),
        ("attn.wo", vec![d, d], BlockInit::Weight),
        ("attn.bo", vec![d], BlockInit::Zero),
        ("attn_ln.gamma", vec![d], BlockInit::One),
        ("attn_ln.beta", vec![d], BlockInit::Zero),
        ("ffn.w1", vec![d, ffn], BlockInit::Weight),
        ("ffn.b1", vec![ffn], BlockInit::Zero),
        ("ffn.w2", vec![ffn, d], BlockInit::Weight),
        ("ffn.b2", vec![d], BlockInit::Zero),
        ("ffn_ln.gamma", vec![d], BlockInit::One),
        ("ffn_ln.beta", vec![d], BlockInit::Zero),
    ]
}

#[derive(Clone, Copy)]
enum BlockInit {
    Weight,
    Zero,
    One,
}

/// Scalar parameter count of one encoder block (ITLs share this count).
pub fn block_value_count(d: usize, ffn: usize) -> usize {
    block_params(d, ffn).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Scalar parameter count of the MLM head (excluding a tied projection).
pub fn mlm_head_value_count(d: usize, v: usize, tied: bool) -> usize {
    let dense = d * d + d;
    let ln = 2 * d;
    let proj = if tied { 0 } else { v * d };
    dense + ln + v + proj
}

/// Draw from N(0, INIT_STD) truncated to ±2 sigma by redraw.
fn trunc_normal<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let bound = 2.0 * INIT_STD;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let x: f64 = dist.sample(rng);
        if x.abs() <= bound {
            data.push(T::from_f64(x));
        }
    }
    Tensor::new(shape, data).expect("shape matches")
}

fn init_tensor<T: Scalar>(kind: BlockInit, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match kind {
        BlockInit::Weight => trunc_normal(shape, rng),
        BlockInit::Zero => Tensor::zeros(shape),
        BlockInit::One => Tensor::full(shape, T::ONE),
    }
}

/// The language model: config plus named-parameter registry.
#[derive(Clone, Debug)]
pub struct LanguageModel<T> {
    pub config: ModelConfig,
    pub params: ParamRegistry<T>,
    pub provenance: Provenance,
    /// Content hash of the bound vocabulary (see `Vocabulary::hash`).
    pub vocab_hash: String,
    /// Phase 2 was run directly on a target-init model (ablation path).
    pub skipped_phase1: bool,
}

impl<T: Scalar> LanguageModel<T> {
    /// Fresh random model. `vocab_hash` binds it to its tokenizer.
    pub fn new(config: ModelConfig, seed: u64, vocab_hash: &str) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config dtype {} does not match element type {}",
                config.dtype,
                T::DTYPE
            )));
        }
        let mut rng = rng_for(seed, "model-init", 0);
        let mut params = ParamRegistry::new();
        let (d, v, ffn) = (config.dim, config.vocab_size, config.ffn_dim);

        params.insert("embed.token", trunc_normal(vec![v, d], &mut rng), true)?;
        params.insert("embed.ln.gamma", Tensor::full(vec![d], T::ONE), true)?;
        params.insert("embed.ln.beta", Tensor::zeros(vec![d]), true)?;
        params.insert("pos.table", trunc_normal(vec![config.max_len, d], &mut rng), true)?;
        for i in 0..config.layers {
            for (suffix, shape, kind) in block_params(d, ffn) {
                params.insert(
                    &format!("encoder.{i}.{suffix}"),
                    init_tensor(kind, shape, &mut rng),
                    true,
                )?;
            }
        }
        params.insert("mlm.dense.w", trunc_normal(vec![d, d], &mut rng), true)?;
        params.insert("mlm.dense.b", Tensor::zeros(vec![d]), true)?;
        params.insert("mlm.ln.gamma", Tensor::full(vec![d], T::ONE), true)?;
        params.insert("mlm.ln.beta", Tensor::zeros(vec![d]), true)?;
        params.insert("mlm.bias", Tensor::zeros(vec![v]), true)?;
        if !config.tie_embeddings {
            params.insert("mlm.proj", trunc_normal(vec![v, d], &mut rng), true)?;
        }

        let mut model = LanguageModel {
            config,
            params,
            provenance: Provenance::Pretrain,
            vocab_hash: vocab_hash.to_string(),
            skipped_phase1: false,
        };
        if model.config.use_itl {
            model.config.use_itl = false; // attach validates absence
            model.attach_itls(seed)?;
        }
        Ok(model)
    }

    pub fn has_itls(&self) -> bool {
        self.params.contains("itl.in.attn.wq") && self.params.contains("itl.out.attn.wq")
    }

    /// Add freshly initialized ITL blocks before and after the encoder
    /// stack. Every pre-existing parameter is untouched.
    pub fn attach_itls(&mut self, seed: u64) -> Result<()> {
        if self.has_itls() || self.config.use_itl {
            return Err(Error::State("ITLs already attached".into()));
        }
        let mut rng = rng_for(seed, "itl-init", 0);
        let (d, ffn) = (self.config.dim, self.config.ffn_dim);
        for prefix in ["itl.in", "itl.out"] {
            for (suffix, shape, kind) in block_params(d, ffn) {
                self.params.insert(
                    &format!("{prefix}.{suffix}"),
                    init_tensor(kind, shape, &mut rng),
                    true,
                )?;
            }
        }
        self.config.use_itl = true;
        Ok(())
    }

    /// Attach a fresh linear task head for `num_labels` classes.
    pub fn attach_task_head(&mut self, num_labels: usize, seed: u64) -> Result<()> {
        if num_labels < 2 {
            return Err(Error::Config("task head needs at least 2 labels".into()));
        }
        if self.params.contains("head.w") {
            return Err(Error::State("task head already attached".into()));
        }
        let mut rng = rng_for(seed, "head-init", 0);
        let d = self.config.dim;
        self.params.insert("head.w", trunc_normal(vec![d, num_labels], &mut rng), true)?;
        self.params.insert("head.b", Tensor::zeros(vec![num_labels]), true)?;
        Ok(())
    }

    pub fn num_labels(&self) -> Option<usize> {
        self.params.get("head.b").map(|p| p.value.numel())
    }

    /// Replace the language-dependent parameters (`embed.token`,
    /// `mlm.bias`, and `mlm.proj` when untied) for a new vocabulary.
    /// Everything else is bit-untouched.
    pub fn swap_vocabulary(&mut self, vocab: &Vocabulary, init: SwapInit<T>) -> Result<()> {
        let (d, v_new) = (self.config.dim, vocab.len());
        match init {
            SwapInit::Random { seed } => {
                let mut rng = rng_for(seed, "vocab-swap", 0);
                self.params
                    .replace_value("embed.token", trunc_normal(vec![v_new, d], &mut rng))?;
                self.params.replace_value("mlm.bias", Tensor::zeros(vec![v_new]))?;
                if !self.config.tie_embeddings {
                    self.params
                        .replace_value("mlm.proj", trunc_normal(vec![v_new, d], &mut rng))?;
                }
            }
            SwapInit::FromTensors { token, bias, proj } => {
                if token.shape() != [v_new, d] {
                    return Err(Error::Config(format!(
                        "swap embedding shape {:?} does not match vocab {v_new} × dim {d}",
                        token.shape()
                    )));
                }
                if bias.shape() != [v_new] {
                    return Err(Error::Config(format!(
                        "swap bias shape {:?} does not match vocab {v_new}",
                        bias.shape()
                    )));
                }
                self.params.replace_value("embed.token", token)?;
                self.params.replace_value("mlm.bias", bias)?;
                if !self.config.tie_embeddings {
                    let proj = proj.ok_or_else(|| {
                        Error::Config("untied model needs a projection tensor in the swap".into())
                    })?;
                    if proj.shape() != [v_new, d] {
                        return Err(Error::Config(format!(
                            "swap projection shape {:?} does not match vocab {v_new} × dim {d}",
                            proj.shape()
                        )));
                    }
                    self.params.replace_value("mlm.proj", proj)?;
                }
            }
        }
        self.config.vocab_size = v_new;
        self.vocab_hash = vocab.hash();
        Ok(())
    }

    pub fn count_parameters(&self, filter: ParamFilter) -> usize {
        self.params.count_values(filter)
    }
}

/// How a vocabulary swap fills the language-dependent parameters.
pub enum SwapInit<T> {
    Random {
        seed: u64,
    },
    /// Restore saved rows, typically extracted from a source checkpoint.
    FromTensors {
        token: Tensor<T>,
        bias: Tensor<T>,
        proj: Option<Tensor<T>>,
    },
}

/// Per-head scaling constant 1/sqrt(d_head).
pub(crate) fn attn_scale<T: Scalar>(head_dim: usize) -> T {
    T::from_f64(1.0 / (head_dim as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
            max_len: 16,
            vocab_size: 24,
            dropout: 0.0,
            dtype: Dtype::F64,
            ..Default::default()
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig {
            dim: 64,
            heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_count_closed_form_c0() {
        let cfg = ModelConfig {
            layers: 0,
            tie_embeddings: false,
            ..tiny_config()
        };
        let (d, v, max_len) = (cfg.dim, cfg.vocab_size, cfg.max_len);
        let model: LanguageModel<f64> = LanguageModel::new(cfg, 0, "h").unwrap();
        let expect = v * d + max_len * d + 2 * d + mlm_head_value_count(d, v, false);
        assert_eq!(model.count_parameters(ParamFilter::All), expect);
    }

    #[test]
    fn all_equals_trainable_plus_frozen() {
        let model: LanguageModel<f64> = LanguageModel::new(tiny_config(), 0, "h").unwrap();
        let mut m = model;
        m.params.set_trainable_by_prefixes(&["embed.".to_string()]);
        assert_eq!(
            m.count_parameters(ParamFilter::All),
            m.count_parameters(ParamFilter::Trainable) + m.count_parameters(ParamFilter::Frozen)
        );
    }

    #[test]
    fn frozen_encoder_count_is_c_blocks() {
        let cfg = tiny_config();
        let (d, ffn, c) = (cfg.dim, cfg.ffn_dim, cfg.layers);
        let mut model: LanguageModel<f64> = LanguageModel::new(cfg, 0, "h").unwrap();
        model.params.set_trainable_by_prefixes(&[
            "embed.".into(),
            "pos.".into(),
            "mlm.".into(),
        ]);
        assert_eq!(
            model.count_parameters(ParamFilter::Frozen),
            c * block_value_count(d, ffn)
        );
    }

    #[test]
    fn attach_itls_preserves_existing_parameters() {
        let mut model: LanguageModel<f64> = LanguageModel::new(tiny_config(), 3, "h").unwrap();
        let before = model.params.bytes_of_prefix("encoder.");
        let embed_before = model.params.bytes_of_prefix("embed.");
        let names_before: std::collections::BTreeSet<String> =
            model.params.sorted_names().into_iter().collect();
        model.attach_itls(4).unwrap();
        assert_eq!(model.params.bytes_of_prefix("encoder."), before);
        assert_eq!(model.params.bytes_of_prefix("embed."), embed_before);

        // gained exactly the block name set twice, prefixed
        let names_after: std::collections::BTreeSet<String> =
            model.params.sorted_names().into_iter().collect();
        let gained: Vec<String> = names_after.difference(&names_before).cloned().collect();
        let block_names: std::collections::BTreeSet<String> = block_params(16, 32)
            .iter()
            .flat_map(|(s, _, _)| {
                ["itl.in.", "itl.out."].iter().map(move |p| format!("{p}{s}"))
            })
            .collect();
        assert_eq!(gained.len(), 32);
        assert_eq!(
            gained.into_iter().collect::<std::collections::BTreeSet<_>>(),
            block_names
        );
        assert!(model.attach_itls(5).is_err(), "double attach must fail");
    }

    #[test]
    fn itl_shapes_match_encoder_block_shapes() {
        let cfg = ModelConfig {
            use_itl: true,
            ..tiny_config()
        };
        let model: LanguageModel<f64> = LanguageModel::new(cfg, 1, "h").unwrap();
        let shapes = |prefix: &str| {
            let mut v: Vec<Vec<usize>> = model
                .params
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .map(|p| p.value.shape().to_vec())
                .collect();
            v.sort();
            v
        };
        assert_eq!(shapes("itl.in."), shapes("encoder.0."));
        assert_eq!(shapes("itl.out."), shapes("encoder.1."));
    }

    #[test]
    fn fresh_itl_statistics_match_init_distribution() {
        let cfg = ModelConfig {
            dim: 64,
            layers: 1,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 64,
            dropout: 0.0,
            dtype: Dtype::F64,
            ..Default::default()
        };
        let mut model: LanguageModel<f64> = LanguageModel::new(cfg, 7, "h").unwrap();
        model.attach_itls(8).unwrap();
        let w = &model.params.get("itl.in.ffn.w1").unwrap().value;
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - INIT_STD).abs() / INIT_STD < 0.2, "std {std}");
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD + 1e-12));
    }

    #[test]
    fn swap_vocabulary_touches_only_language_dependent_params() {
        use crate::tokenizer::{train_bpe, LangTag};
        let corpus: Vec<String> = vec!["fyqy gyhy wyxy".into(), "gyhy fyqy".into()];
        let vocab = train_bpe(&corpus, 24, LangTag::Target).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            ..tiny_config()
        };
        let mut model: LanguageModel<f64> = LanguageModel::new(cfg, 2, &vocab.hash()).unwrap();
        let before = model.clone();
        let corpus2: Vec<String> = vec!["banu keri tolo".into(), "keri banu".into()];
        let vocab2 = train_bpe(&corpus2, 32, LangTag::Source).unwrap();
        model.swap_vocabulary(&vocab2, SwapInit::Random { seed: 11 }).unwrap();
        let diff = before.params.diff_names(&model.params);
        assert_eq!(diff, vec!["embed.token".to_string(), "mlm.bias".to_string()]);
        assert_eq!(model.config.vocab_size, vocab2.len());
        assert_eq!(model.vocab_hash, vocab2.hash());
    }

    #[test]
    fn swap_vocabulary_from_tensors_is_an_involution() {
        use crate::tokenizer::{train_bpe, LangTag};
        let tcorpus: Vec<String> = vec!["fyqy gyhy wyxy".into(), "gyhy fyqy".into()];
        let tvocab = train_bpe(&tcorpus, 24, LangTag::Target).unwrap();
        let scorpus: Vec<String> = vec!["banu keri tolo".into(), "keri banu".into()];
        let svocab = train_bpe(&scorpus, 32, LangTag::Source).unwrap();
        let cfg = ModelConfig {
            vocab_size: tvocab.len(),
            ..tiny_config()
        };
        let model: LanguageModel<f64> = LanguageModel::new(cfg, 2, &tvocab.hash()).unwrap();
        let original = model.clone();

        let saved_token = model.params.get("embed.token").unwrap().value.clone();
        let saved_bias = model.params.get("mlm.bias").unwrap().value.clone();

        let mut model = model;
        model.swap_vocabulary(&svocab, SwapInit::Random { seed: 3 }).unwrap();
        model
            .swap_vocabulary(
                &tvocab,
                SwapInit::FromTensors {
                    token: saved_token,
                    bias: saved_bias,
                    proj: None,
                },
            )
            .unwrap();
        assert!(original.params.diff_names(&model.params).is_empty());
        assert_eq!(model.vocab_hash, original.vocab_hash);
    }

    #[test]
    fn swap_count_delta_is_closed_form_when_tied() {
        use crate::tokenizer::{train_bpe, LangTag};
        let tcorpus: Vec<String> = vec!["fyqy gyhy wyxy".into(), "gyhy fyqy vyzy".into()];
        let tvocab = train_bpe(&tcorpus, 30, LangTag::Target).unwrap();
        let cfg = tiny_config();
        let d = cfg.dim;
        let v_old = cfg.vocab_size;
        let mut model: LanguageModel<f64> = LanguageModel::new(cfg, 2, "h").unwrap();
        let before = model.count_parameters(ParamFilter::All);
        model.swap_vocabulary(&tvocab, SwapInit::Random { seed: 5 }).unwrap();
        let after = model.count_parameters(ParamFilter::All);
        let v_new = tvocab.len();
        assert_eq!(
            after as i64 - before as i64,
            (v_new as i64 - v_old as i64) * (d as i64 + 1)
        );
    }

    #[test]
    fn swap_from_tensors_rejects_mismatched_dim() {
        use crate::tokenizer::{train_bpe, LangTag};
        let corpus: Vec<String> = vec!["banu keri".into()];
        let vocab = train_bpe(&corpus, 20, LangTag::Source).unwrap();
        let mut model: LanguageModel<f64> = LanguageModel::new(tiny_config(), 2, "h").unwrap();
        let err = model
            .swap_vocabulary(
                &vocab,
                SwapInit::FromTensors {
                    token: Tensor::zeros(vec![vocab.len(), 99]),
                    bias: Tensor::zeros(vec![vocab.len()]),
                    proj: None,
                },
            )
            .unwrap_err();
        assert!(err.to_string().contains("dim"), "{err}");
    }
}
