//! MLM training loops: source pretraining, the two post-training phases,
//! and the from-scratch baseline. Freezing is a per-parameter flag set from
//! the schedule's prefix predicate; dynamic masking draws a fresh seeded
//! mask stream every step from (run seed, step index).

use std::time::Instant;

use serde::Serialize;

use crate::corpus::{batch_epoch, Batch};
use crate::error::{Error, Result};
use crate::model::{DropoutCtx, EncoderInitKind, LanguageModel, Provenance, SwapInit};
use crate::tensor::graph::Reduction;
use crate::tensor::{AdamConfig, AdamState, Graph, Scalar};
use crate::tokenizer::{TokenSequence, Vocabulary, FIRST_REGULAR_ID, MASK_ID};
use crate::util::rng_for;

/// Label used at non-masked positions so the loss skips them.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Canonical phase-1 trainable group: everything except the encoder stack.
/// The tied output projection is covered via `embed.` (one parameter).
pub const PHASE1_PREFIXES: [&str; 4] = ["embed.", "pos.", "itl.", "mlm."];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseId {
    Pretrain,
    Phase1,
    Phase2,
    Scratch,
    Finetune,
}

impl PhaseId {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseId::Pretrain => "pretrain",
            PhaseId::Phase1 => "phase1",
            PhaseId::Phase2 => "phase2",
            PhaseId::Scratch => "scratch",
            PhaseId::Finetune => "finetune",
        }
    }
}

/// Which parameter groups train, for how long, at what rate.
#[derive(Clone, Debug)]
pub struct PhaseSchedule {
    pub phase: PhaseId,
    pub trainable_prefixes: Vec<String>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Explicit opt-in for non-canonical trainable sets or skipped phases.
    pub allow_nonstandard: bool,
}

impl PhaseSchedule {
    fn all_params(phase: PhaseId, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        PhaseSchedule {
            phase,
            trainable_prefixes: vec![String::new()],
            steps,
            batch_size,
            lr,
            seed,
            allow_nonstandard: false,
        }
    }

    pub fn pretrain(steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self::all_params(PhaseId::Pretrain, steps, batch_size, lr, seed)
    }

    pub fn phase1(steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        PhaseSchedule {
            phase: PhaseId::Phase1,
            trainable_prefixes: PHASE1_PREFIXES.iter().map(|s| s.to_string()).collect(),
            steps,
            batch_size,
            lr,
            seed,
            allow_nonstandard: false,
        }
    }

    pub fn phase2(steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self::all_params(PhaseId::Phase2, steps, batch_size, lr, seed)
    }

    pub fn scratch(steps: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self::all_params(PhaseId::Scratch, steps, batch_size, lr, seed)
    }

    fn canonical_prefixes(phase: PhaseId) -> Vec<String> {
        match phase {
            PhaseId::Phase1 => PHASE1_PREFIXES.iter().map(|s| s.to_string()).collect(),
            _ => vec![String::new()],
        }
    }

    fn validate_predicate(&self) -> Result<()> {
        let mut mine = self.trainable_prefixes.clone();
        mine.sort();
        let mut canon = Self::canonical_prefixes(self.phase);
        canon.sort();
        if mine != canon && !self.allow_nonstandard {
            return Err(Error::Config(format!(
                "{} trainable set {:?} differs from the canonical {:?}; set allow_nonstandard to override",
                self.phase.as_str(),
                mine,
                canon
            )));
        }
        Ok(())
    }
}

/// Dynamic masking policy (rate and the mask/random/keep split).
#[derive(Clone, Copy, Debug)]
pub struct MaskingPolicy {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("mask rate {} out of (0,1]", self.rate)));
        }
        let sum = self.mask_prob + self.random_prob + self.keep_prob;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("action split sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// One row prepared for the MLM objective.
#[derive(Clone, Debug)]
pub struct MaskedRow {
    pub input: Vec<u32>,
    /// Positions selected for prediction, in ascending order.
    pub positions: Vec<usize>,
    /// Original ids at those positions.
    pub targets: Vec<u32>,
}

/// Draw this step's masks. Maskable positions are the non-special tokens
/// (id ≥ 5). Pure function of (policy, rows, vocab_size, seed, step).
pub fn apply_masking(
    policy: &MaskingPolicy,
    rows: &[Vec<u32>],
    vocab_size: usize,
    seed: u64,
    step: u64,
) -> Vec<MaskedRow> {
    use rand::Rng;
    let mut rng = rng_for(seed, "mask", step);
    rows.iter()
        .map(|row| {
            let mut input = row.clone();
            let mut positions = Vec::new();
            let mut targets = Vec::new();
            for (i, &id) in row.iter().enumerate() {
                if id < FIRST_REGULAR_ID {
                    continue;
                }
                if rng.random::<f64>() >= policy.rate {
                    continue;
                }
                positions.push(i);
                targets.push(id);
                let action: f64 = rng.random();
                if action < policy.mask_prob {
                    input[i] = MASK_ID;
                } else if action < policy.mask_prob + policy.random_prob {
                    input[i] = rng.random_range(FIRST_REGULAR_ID..vocab_size as u32);
                } // else keep
            }
            MaskedRow { input, positions, targets }
        })
        .collect()
}

/// Per-step training record. Field order is the JSON-lines schema.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub lr: f64,
    pub masked: usize,
}

/// Loss curve of one run plus bookkeeping for aborts and skipped batches.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub skipped_batches: usize,
    /// Set when training stopped early on a non-finite loss; the model
    /// holds the last-good parameters.
    pub aborted: Option<String>,
    pub wall_secs: f64,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// One MLM optimizer step over a batch. Returns `None` (skip) when no row
/// has a maskable token. The loss is the mean NLL over all masked
/// positions in the batch.
pub fn mlm_step<T: Scalar>(
    model: &mut LanguageModel<T>,
    batch: &Batch,
    policy: &MaskingPolicy,
    adam: &mut AdamState<T>,
    seed: u64,
    step: u64,
) -> Result<Option<(f64, usize)>> {
    let rows: Vec<Vec<u32>> = (0..batch.ids.len())
        .map(|r| batch.ids[r][..batch.true_len(r)].to_vec())
        .collect();
    let masked = apply_masking(policy, &rows, model.config.vocab_size, seed, step);
    let total_masked: usize = masked.iter().map(|m| m.positions.len()).sum();
    if total_masked == 0 {
        return Ok(None);
    }

    let mut g: Graph<T> = Graph::new();
    let mut drop = DropoutCtx::train(model.config.dropout, seed, step);
    let mut seq_losses = Vec::new();
    for row in &masked {
        if row.positions.is_empty() {
            continue;
        }
        let hidden = model.forward_xpt(&mut g, &row.input, &mut drop)?;
        let logits = model.mlm_logits(&mut g, hidden, &row.positions)?;
        seq_losses.push(g.cross_entropy(logits, &row.targets, IGNORE_INDEX, Reduction::Sum)?);
    }
    let mut total = seq_losses[0];
    for &l in &seq_losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, T::ONE / T::from_f64(total_masked as f64));
    let loss_value = g.value(loss).item().to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    g.backward(loss)?;
    g.accumulate_param_grads(&mut model.params);
    adam.step(&mut model.params)?;
    Ok(Some((loss_value, total_masked)))
}

/// Shared MLM loop: freeze mask from the schedule, fresh optimizer state,
/// seeded epoch shuffling, JSON-lines-ready log.
fn training_loop<T: Scalar>(
    model: &mut LanguageModel<T>,
    seqs: &[TokenSequence],
    schedule: &PhaseSchedule,
    policy: &MaskingPolicy,
) -> Result<TrainLog> {
    policy.validate()?;
    if seqs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    model.params.set_trainable_by_prefixes(&schedule.trainable_prefixes);
    model.params.zero_grads();
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(schedule.lr));

    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while (step as usize) < schedule.steps {
        let batches = batch_epoch(seqs, schedule.batch_size, model.config.max_len, schedule.seed, epoch);
        for batch in batches {
            if step as usize >= schedule.steps {
                break 'outer;
            }
            match mlm_step(model, &batch, policy, &mut adam, schedule.seed, step) {
                Ok(Some((loss, masked))) => {
                    log.records.push(StepRecord {
                        step,
                        phase: schedule.phase.as_str().to_string(),
                        loss,
                        lr: schedule.lr,
                        masked,
                    });
                    step += 1;
                }
                Ok(None) => {
                    log.skipped_batches += 1;
                }
                Err(e @ Error::NonFinite(_)) => {
                    log.aborted = Some(e.to_string());
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        epoch += 1;
    }
    log.wall_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// MLM-pretrain a fresh model on the source corpus.
pub fn pretrain_source<T: Scalar>(
    config: crate::model::ModelConfig,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    schedule: &PhaseSchedule,
    policy: &MaskingPolicy,
) -> Result<(LanguageModel<T>, TrainLog)> {
    if schedule.phase != PhaseId::Pretrain {
        return Err(Error::Config("pretrain_source needs a pretrain schedule".into()));
    }
    schedule.validate_predicate()?;
    if config.use_itl {
        return Err(Error::Config("the source model carries no ITLs".into()));
    }
    let mut cfg = config;
    cfg.vocab_size = vocab.len();
    let mut model = LanguageModel::new(cfg, schedule.seed, &vocab.hash())?;
    model.provenance = Provenance::Pretrain;
    let log = training_loop(&mut model, seqs, schedule, policy)?;
    Ok((model, log))
}

/// Build the target-language model from a source model: copy the
/// language-independent parameters (or re-draw them for the random-encoder
/// ablation), re-initialize the lexical ones, optionally attach ITLs.
pub fn init_target_model<T: Scalar>(
    source: &LanguageModel<T>,
    target_vocab: &Vocabulary,
    use_itl: bool,
    encoder_init: EncoderInitKind,
    seed: u64,
) -> Result<LanguageModel<T>> {
    if source.config.use_itl {
        return Err(Error::State("source model already carries ITLs".into()));
    }
    let mut model = source.clone();
    model.swap_vocabulary(target_vocab, SwapInit::Random { seed })?;
    if encoder_init == EncoderInitKind::Random {
        // re-draw the reused set: encoder stack, positional table, MLM
        // dense + LN; shapes stay identical
        let redraw = LanguageModel::<T>::new(
            crate::model::ModelConfig {
                vocab_size: model.config.vocab_size,
                use_itl: false,
                ..model.config.clone()
            },
            crate::util::derive_seed(seed, "encoder-redraw", 0),
            &model.vocab_hash,
        )?;
        for name in redraw.params.sorted_names() {
            if name.starts_with("encoder.")
                || name.starts_with("pos.")
                || name.starts_with("mlm.dense")
                || name.starts_with("mlm.ln")
            {
                let fresh = redraw.params.get(&name).unwrap().value.clone();
                model.params.replace_value(&name, fresh)?;
            }
        }
    }
    if use_itl {
        model.attach_itls(seed)?;
    }
    model.provenance = Provenance::TargetInit;
    model.skipped_phase1 = false;
    Ok(model)
}

/// Phase 1: encoder frozen; embeddings, positions, ITLs, and the LM head
/// train on the target corpus.
pub fn run_phase1<T: Scalar>(
    model: &mut LanguageModel<T>,
    seqs: &[TokenSequence],
    schedule: &PhaseSchedule,
    policy: &MaskingPolicy,
) -> Result<TrainLog> {
    if schedule.phase != PhaseId::Phase1 {
        return Err(Error::Config("run_phase1 needs a phase1 schedule".into()));
    }
    schedule.validate_predicate()?;
    if model.provenance != Provenance::TargetInit && !schedule.allow_nonstandard {
        return Err(Error::State(format!(
            "phase 1 expects a freshly initialized target model, found `{}`",
            model.provenance.as_str()
        )));
    }
    let log = training_loop(model, seqs, schedule, policy)?;
    model.provenance = Provenance::Phase1;
    Ok(log)
}

/// Phase 2: everything unfreezes; optimizer state starts fresh.
pub fn run_phase2<T: Scalar>(
    model: &mut LanguageModel<T>,
    seqs: &[TokenSequence],
    schedule: &PhaseSchedule,
    policy: &MaskingPolicy,
) -> Result<TrainLog> {
    if schedule.phase != PhaseId::Phase2 {
        return Err(Error::Config("run_phase2 needs a phase2 schedule".into()));
    }
    schedule.validate_predicate()?;
    match model.provenance {
        Provenance::Phase1 => {}
        Provenance::TargetInit if schedule.allow_nonstandard => {
            model.skipped_phase1 = true;
        }
        other => {
            return Err(Error::State(format!(
                "phase 2 expects a phase-1 model (or allow_nonstandard to skip), found `{}`",
                other.as_str()
            )));
        }
    }
    let log = training_loop(model, seqs, schedule, policy)?;
    model.provenance = Provenance::Phase2;
    Ok(log)
}

/// Equal-budget baseline: a randomly initialized model (no ITLs) trained
/// by MLM on the target corpus.
pub fn train_from_scratch<T: Scalar>(
    config: crate::model::ModelConfig,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    schedule: &PhaseSchedule,
    policy: &MaskingPolicy,
) -> Result<(LanguageModel<T>, TrainLog)> {
    if schedule.phase != PhaseId::Scratch {
        return Err(Error::Config("train_from_scratch needs a scratch schedule".into()));
    }
    schedule.validate_predicate()?;
    if config.use_itl {
        return Err(Error::Config("the scratch baseline carries no ITLs".into()));
    }
    let mut cfg = config;
    cfg.vocab_size = vocab.len();
    let mut model = LanguageModel::new(cfg, schedule.seed, &vocab.hash())?;
    let log = training_loop(&mut model, seqs, schedule, policy)?;
    model.provenance = Provenance::Scratch;
    Ok((model, log))
}

/// Masked-position cross-entropy of a model over held-out rows, with a
/// deterministic evaluation mask stream shared across models. Returns
/// (mean NLL, perplexity).
pub fn mlm_eval_loss<T: Scalar>(
    model: &LanguageModel<T>,
    seqs: &[TokenSequence],
    policy: &MaskingPolicy,
    eval_seed: u64,
) -> Result<(f64, f64)> {
    let mut total_nll = 0.0f64;
    let mut total_count = 0usize;
    for (i, seq) in seqs.iter().enumerate() {
        let rows = vec![seq.ids.clone()];
        let masked = apply_masking(policy, &rows, model.config.vocab_size, eval_seed, i as u64);
        let row = &masked[0];
        if row.positions.is_empty() {
            continue;
        }
        let mut g: Graph<T> = Graph::new();
        let mut drop = DropoutCtx::eval();
        let hidden = model.forward_xpt(&mut g, &row.input, &mut drop)?;
        let logits = model.mlm_logits(&mut g, hidden, &row.positions)?;
        let loss = g.cross_entropy(logits, &row.targets, IGNORE_INDEX, Reduction::Sum)?;
        total_nll += g.value(loss).item().to_f64();
        total_count += row.positions.len();
    }
    if total_count == 0 {
        return Err(Error::EmptyLoss);
    }
    let mean = total_nll / total_count as f64;
    Ok((mean, mean.exp()))
}
