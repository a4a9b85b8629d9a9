//! Fine-tuning on the toy downstream tasks, metric computation, degeneracy
//! diagnostics, the source-language-loss probe, and comparison tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::corpus::{DataSplits, ExampleLabel, LabeledExample, Tag, NUM_TOPICS};
use crate::error::{Error, Result};
use crate::model::{DropoutCtx, LanguageModel, Provenance, SwapInit};
use crate::tensor::graph::Reduction;
use crate::tensor::{AdamConfig, AdamState, Graph, Scalar};
use crate::tokenizer::{encode_with_word_starts, Vocabulary, SEP_ID};
use crate::util::{fmt_metric, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Tagging,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Tagging => "tagging",
        }
    }
}

/// Fine-tuning hyperparameters. Defaults are the desk-scale values; the
/// full-scale numbers live in the `fullscale` config preset.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub task: TaskKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            batch_size: 32,
            lr: 5e-5,
            warmup_ratio: 0.1,
            seed: 0,
            task: TaskKind::Classification,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup ratio {} out of [0,1)",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Evaluation outcome on one dataset.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub task: String,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Masked-LM perplexity, filled by callers that evaluate one.
    pub perplexity: Option<f64>,
    /// Prediction counts per label.
    pub histogram: BTreeMap<String, usize>,
    pub collapse: bool,
    pub dominant_label: Option<String>,
    pub n_predictions: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-oriented structured text document.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("task: {}\n", self.task));
        s.push_str(&format!("predictions: {}\n", self.n_predictions));
        s.push_str(&format!("accuracy: {}\n", fmt_metric(self.accuracy)));
        s.push_str(&format!("macro_f1: {}\n", fmt_metric(self.macro_f1)));
        if let Some(p) = self.perplexity {
            s.push_str(&format!("perplexity: {}\n", fmt_metric(p)));
        }
        s.push_str(&format!(
            "collapse: {}{}\n",
            self.collapse,
            self.dominant_label
                .as_ref()
                .map(|l| format!(" (dominant: {l})"))
                .unwrap_or_default()
        ));
        s.push_str("per-class precision/recall/f1/support:\n");
        for c in &self.per_class {
            s.push_str(&format!(
                "  {}: {} {} {} {}\n",
                c.label,
                fmt_metric(c.precision),
                fmt_metric(c.recall),
                fmt_metric(c.f1),
                c.support
            ));
        }
        s.push_str("prediction histogram:\n");
        for (label, count) in &self.histogram {
            s.push_str(&format!("  {label}: {count}\n"));
        }
        s
    }
}

/// Collapse detector: fires iff one label holds strictly more than 99% of
/// the predictions.
pub fn detect_label_collapse(histogram: &BTreeMap<String, usize>) -> (bool, Option<String>) {
    let total: usize = histogram.values().sum();
    if total == 0 {
        return (false, None);
    }
    let (label, &count) = histogram
        .iter()
        .max_by_key(|(l, c)| (**c, std::cmp::Reverse(l.as_str())))
        .unwrap();
    let flag = (count as f64) > 0.99 * total as f64;
    (flag, flag.then(|| label.clone()))
}

/// Metrics from aligned gold/prediction label indices over a fixed label
/// set. Macro-F1 averages over the full label set.
pub fn classification_metrics(
    task: &str,
    golds: &[usize],
    preds: &[usize],
    labels: &[String],
) -> MetricsReport {
    assert_eq!(golds.len(), preds.len(), "gold/pred length mismatch");
    let k = labels.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    let mut correct = 0usize;
    for (&g, &p) in golds.iter().zip(preds) {
        if g == p {
            correct += 1;
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut f1_sum = 0.0;
    for c in 0..k {
        let precision = if tp[c] + fp[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        };
        let recall = if tp[c] + fneg[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fneg[c]) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push(ClassMetrics {
            label: labels[c].clone(),
            precision,
            recall,
            f1,
            support: tp[c] + fneg[c],
        });
    }
    let mut histogram = BTreeMap::new();
    for &p in preds {
        *histogram.entry(labels[p].clone()).or_insert(0) += 1;
    }
    let (collapse, dominant_label) = detect_label_collapse(&histogram);
    MetricsReport {
        task: task.to_string(),
        macro_f1: if k == 0 { 0.0 } else { f1_sum / k as f64 },
        accuracy: if golds.is_empty() {
            0.0
        } else {
            correct as f64 / golds.len() as f64
        },
        per_class,
        perplexity: None,
        histogram,
        collapse,
        dominant_label,
        n_predictions: preds.len(),
    }
}

fn label_names(task: TaskKind, num_labels: usize) -> Vec<String> {
    match task {
        TaskKind::Classification => (0..num_labels).map(|i| format!("topic-{i}")).collect(),
        TaskKind::Tagging => Tag::ALL.iter().map(|t| t.as_str().to_string()).collect(),
    }
}

/// Token positions to read predictions from, plus gold label indices.
/// Classification predicts at CLS; tagging at each word's first token.
fn prediction_points(
    example: &LabeledExample,
    vocab: &Vocabulary,
    max_len: usize,
) -> (Vec<u32>, Vec<usize>, Vec<usize>) {
    let (mut seq, word_starts) = encode_with_word_starts(&example.text, vocab, true);
    if seq.ids.len() > max_len {
        seq.ids.truncate(max_len);
        *seq.ids.last_mut().unwrap() = SEP_ID;
    }
    match &example.label {
        ExampleLabel::Topic(t) => (seq.ids, vec![0], vec![*t as usize]),
        ExampleLabel::Tags(tags) => {
            // drop words truncated away (a word start on the final SEP slot
            // has lost its token too)
            let mut positions = Vec::new();
            let mut golds = Vec::new();
            for (w, &start) in word_starts.iter().enumerate() {
                if start + 1 < seq.ids.len() {
                    positions.push(start);
                    golds.push(tags[w].index());
                }
            }
            (seq.ids, positions, golds)
        }
    }
}

/// Greedy predictions of a fine-tuned model over a dataset.
fn predict_dataset<T: Scalar>(
    model: &LanguageModel<T>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for ex in examples {
        let (ids, positions, gold) = prediction_points(ex, vocab, model.config.max_len);
        if positions.is_empty() {
            continue;
        }
        let mut g: Graph<T> = Graph::new();
        let hidden = model.forward_xpt(&mut g, &ids, &mut DropoutCtx::eval())?;
        let logits = model.head_logits(&mut g, hidden, &positions)?;
        let t = g.value(logits);
        let (n, k) = (t.rows(), t.cols());
        for r in 0..n {
            let row = t.row(r);
            let mut best = 0usize;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            golds.push(gold[r]);
            preds.push(best);
        }
    }
    Ok((golds, preds))
}

/// Evaluate a fine-tuned model: metrics, histogram, collapse flag.
pub fn evaluate<T: Scalar>(
    model: &LanguageModel<T>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
    task: TaskKind,
) -> Result<MetricsReport> {
    let num_labels = model
        .num_labels()
        .ok_or_else(|| Error::State("no task head attached".into()))?;
    let (golds, preds) = predict_dataset(model, vocab, examples)?;
    Ok(classification_metrics(
        task.as_str(),
        &golds,
        &preds,
        &label_names(task, num_labels),
    ))
}

fn dataset_num_labels(splits: &DataSplits, task: TaskKind) -> usize {
    match task {
        TaskKind::Tagging => Tag::ALL.len(),
        TaskKind::Classification => {
            let max = splits
                .train
                .iter()
                .chain(&splits.dev)
                .chain(&splits.test)
                .filter_map(|e| match e.label {
                    ExampleLabel::Topic(t) => Some(t as usize),
                    _ => None,
                })
                .max()
                .unwrap_or(NUM_TOPICS - 1);
            (max + 1).max(2)
        }
    }
}

/// Fine-tune a checkpointed model on a downstream task: fresh head, all
/// parameters trainable (ITLs included), linear warmup then constant lr.
/// Returns the tuned model and its dev-split report.
pub fn finetune<T: Scalar>(
    mut model: LanguageModel<T>,
    vocab: &Vocabulary,
    splits: &DataSplits,
    cfg: &FinetuneConfig,
) -> Result<(LanguageModel<T>, MetricsReport)> {
    cfg.validate()?;
    if model.vocab_hash != vocab.hash() {
        return Err(Error::VocabMismatch {
            model_hash: model.vocab_hash.clone(),
            supplied_hash: vocab.hash(),
        });
    }
    let num_labels = dataset_num_labels(splits, cfg.task);
    model.attach_task_head(num_labels, cfg.seed)?;
    model.params.set_all_trainable(true);
    model.params.zero_grads();

    let steps_per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = ((total_steps as f64) * cfg.warmup_ratio).ceil() as usize;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(cfg.lr));

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "finetune-shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let lr = if warmup_steps > 0 && step < warmup_steps {
                cfg.lr * (step + 1) as f64 / warmup_steps as f64
            } else {
                cfg.lr
            };
            adam.set_lr(lr);

            let mut g: Graph<T> = Graph::new();
            let mut drop = DropoutCtx::train(model.config.dropout, cfg.seed, step as u64);
            let mut losses = Vec::new();
            let mut total_positions = 0usize;
            for &i in chunk {
                let (ids, positions, golds) =
                    prediction_points(&splits.train[i], vocab, model.config.max_len);
                if positions.is_empty() {
                    continue;
                }
                let hidden = model.forward_xpt(&mut g, &ids, &mut drop)?;
                let logits = model.head_logits(&mut g, hidden, &positions)?;
                let targets: Vec<u32> = golds.iter().map(|&t| t as u32).collect();
                losses.push(g.cross_entropy(logits, &targets, u32::MAX, Reduction::Sum)?);
                total_positions += positions.len();
            }
            if losses.is_empty() {
                continue;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let loss = g.scale(total, T::ONE / T::from_f64(total_positions as f64));
            if !g.value(loss).item().to_f64().is_finite() {
                return Err(Error::NonFinite(format!("fine-tune loss at step {step}")));
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.params);
            adam.step(&mut model.params)?;
            step += 1;
        }
    }
    model.provenance = Provenance::Finetuned;
    let report = evaluate(&model, vocab, &splits.dev, cfg.task)?;
    Ok((model, report))
}

/// One cell of the language-loss probe matrix.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeCell {
    pub phase: u8,
    pub vocab: String,
    pub itl: bool,
    /// None = skipped (its checkpoint was unavailable).
    pub report: Option<MetricsReport>,
}

/// The 8-cell (phase × vocab × ±ITL) probe plus the source-model anchor.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeMatrix {
    pub cells: Vec<ProbeCell>,
    pub source_baseline: Option<MetricsReport>,
}

impl ProbeMatrix {
    pub fn cell(&self, phase: u8, vocab: &str, itl: bool) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.phase == phase && c.vocab == vocab && c.itl == itl)
    }

    pub fn accuracy(&self, phase: u8, vocab: &str, itl: bool) -> Option<f64> {
        self.cell(phase, vocab, itl)?.report.as_ref().map(|r| r.accuracy)
    }
}

/// Phase-1/phase-2 checkpoints of one ±ITL pipeline.
#[derive(Clone, Debug, Default)]
pub struct ProbePhasePair {
    pub phase1: Option<std::path::PathBuf>,
    pub phase2: Option<std::path::PathBuf>,
}

/// Rebind each post-trained model to the source vocabulary (restoring the
/// saved source embedding rows) or keep its target vocabulary, fine-tune
/// on the source-language task, and tabulate all eight cells.
pub fn probe_language_loss<T: Scalar>(
    source_ckpt: &Path,
    with_itl: &ProbePhasePair,
    without_itl: &ProbePhasePair,
    source_task: &DataSplits,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    cfg: &FinetuneConfig,
) -> Result<ProbeMatrix> {
    let source_raw = Checkpoint::read(source_ckpt)?;
    if source_raw.vocab_hash()? != source_vocab.hash() {
        return Err(Error::VocabMismatch {
            model_hash: source_raw.vocab_hash()?.to_string(),
            supplied_hash: source_vocab.hash(),
        });
    }
    let src_token = source_raw
        .tensor("embed.token")
        .ok_or_else(|| Error::Integrity("source checkpoint lacks embed.token".into()))?
        .to_tensor::<T>()?;
    let src_bias = source_raw
        .tensor("mlm.bias")
        .ok_or_else(|| Error::Integrity("source checkpoint lacks mlm.bias".into()))?
        .to_tensor::<T>()?;
    let src_proj = source_raw
        .tensor("mlm.proj")
        .map(|t| t.to_tensor::<T>())
        .transpose()?;

    let mut cells = Vec::new();
    for (itl, pair) in [(true, with_itl), (false, without_itl)] {
        for (phase, path) in [(1u8, &pair.phase1), (2u8, &pair.phase2)] {
            for vocab_side in ["source", "target"] {
                let report = match path {
                    None => None,
                    Some(p) => {
                        let mut model: LanguageModel<T> = load_checkpoint(p)?;
                        let vocab = if vocab_side == "source" {
                            model.swap_vocabulary(
                                source_vocab,
                                SwapInit::FromTensors {
                                    token: src_token.clone(),
                                    bias: src_bias.clone(),
                                    proj: src_proj.clone(),
                                },
                            )?;
                            source_vocab
                        } else {
                            target_vocab
                        };
                        let (_, report) = finetune(model, vocab, source_task, cfg)?;
                        Some(report)
                    }
                };
                cells.push(ProbeCell {
                    phase,
                    vocab: vocab_side.to_string(),
                    itl,
                    report,
                });
            }
        }
    }

    let source_model: LanguageModel<T> = crate::checkpoint::model_from_checkpoint(&source_raw)?;
    let source_baseline = finetune(source_model, source_vocab, source_task, cfg)
        .map(|(_, r)| r)
        .ok();
    Ok(ProbeMatrix { cells, source_baseline })
}

// ── comparison tables ──────────────────────────────────────────────────

/// Whether larger is better for a metric column.
fn higher_is_better(column: &str) -> bool {
    column != "perplexity"
}

/// Aligned comparison of named reports: best marked `*`, second-best `+`,
/// ties marked on every tied row.
#[derive(Clone, Debug)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub fn compare_runs(reports: &[(String, MetricsReport)]) -> ComparisonTable {
    let mut columns = vec!["macro_f1".to_string(), "accuracy".to_string()];
    if reports.iter().any(|(_, r)| r.perplexity.is_some()) {
        columns.push("perplexity".to_string());
    }
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let vals = columns
                .iter()
                .map(|c| match c.as_str() {
                    "macro_f1" => Some(r.macro_f1),
                    "accuracy" => Some(r.accuracy),
                    "perplexity" => r.perplexity,
                    _ => None,
                })
                .collect();
            (name.clone(), vals)
        })
        .collect();
    ComparisonTable { columns, rows }
}

impl ComparisonTable {
    /// Per column: (best value, second value) honoring direction.
    fn rank_marks(&self, col: usize) -> (Option<f64>, Option<f64>) {
        let mut vals: Vec<f64> = self.rows.iter().filter_map(|(_, v)| v[col]).collect();
        if vals.is_empty() {
            return (None, None);
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if higher_is_better(&self.columns[col]) {
            vals.reverse();
        }
        let best = vals[0];
        let second = vals.iter().copied().find(|&v| v != best);
        (Some(best), second)
    }

    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap();
        let mut s = format!("{:<name_w$}", "run");
        for c in &self.columns {
            s.push_str(&format!("  {:>12}", c));
        }
        s.push('\n');
        let marks: Vec<(Option<f64>, Option<f64>)> =
            (0..self.columns.len()).map(|c| self.rank_marks(c)).collect();
        for (name, vals) in &self.rows {
            s.push_str(&format!("{name:<name_w$}"));
            for (c, v) in vals.iter().enumerate() {
                let cell = match v {
                    None => String::new(),
                    Some(x) => {
                        let mark = if Some(*x) == marks[c].0 {
                            "*"
                        } else if Some(*x) == marks[c].1 {
                            "+"
                        } else {
                            ""
                        };
                        format!("{}{}", fmt_metric(*x), mark)
                    }
                };
                s.push_str(&format!("  {cell:>12}"));
            }
            s.push('\n');
        }
        s.push_str("(* best, + second-best per column; lower is better for perplexity)\n");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, vals) in &self.rows {
            s.push_str(name);
            for v in vals {
                s.push(',');
                if let Some(x) = v {
                    s.push_str(&fmt_metric(*x));
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_predictor_scores_perfect_f1() {
        let golds = vec![0, 1, 2, 3, 4, 5, 6, 0, 1];
        let labels: Vec<String> = (0..7).map(|i| format!("topic-{i}")).collect();
        let r = classification_metrics("classification", &golds, &golds, &labels);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert!(!r.collapse);
    }

    #[test]
    fn constant_predictor_on_balanced_binary_set() {
        let golds = vec![0, 0, 0, 1, 1, 1];
        let preds = vec![0; 6];
        let labels = vec!["a".to_string(), "b".to_string()];
        let r = classification_metrics("classification", &golds, &preds, &labels);
        assert!((r.accuracy - 0.5).abs() < 1e-12);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        // collapse implies zero F1 contribution from non-dominant classes
        assert!(r.collapse);
        assert_eq!(r.dominant_label.as_deref(), Some("a"));
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn metrics_match_brute_force_reference_on_random_sets() {
        use rand::Rng;
        for trial in 0..10u64 {
            let mut rng = rng_for(trial, "metric-oracle", 0);
            let k = rng.random_range(2..6);
            let n = rng.random_range(5..40);
            let golds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
            let r = classification_metrics("classification", &golds, &preds, &labels);

            // independent reference computation
            let acc_ref =
                golds.iter().zip(&preds).filter(|(g, p)| g == p).count() as f64 / n as f64;
            let mut f1_ref = 0.0;
            for c in 0..k {
                let tp = golds
                    .iter()
                    .zip(&preds)
                    .filter(|(g, p)| **g == c && **p == c)
                    .count() as f64;
                let pred_c = preds.iter().filter(|&&p| p == c).count() as f64;
                let gold_c = golds.iter().filter(|&&g| g == c).count() as f64;
                let prec = if pred_c == 0.0 { 0.0 } else { tp / pred_c };
                let rec = if gold_c == 0.0 { 0.0 } else { tp / gold_c };
                f1_ref += if prec + rec == 0.0 {
                    0.0
                } else {
                    2.0 * prec * rec / (prec + rec)
                };
            }
            f1_ref /= k as f64;
            assert_eq!(r.accuracy, acc_ref, "trial {trial}");
            assert!((r.macro_f1 - f1_ref).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn collapse_detector_thresholds() {
        let hist = |pairs: &[(&str, usize)]| -> BTreeMap<String, usize> {
            pairs.iter().map(|(l, c)| (l.to_string(), *c)).collect()
        };
        assert!(detect_label_collapse(&hist(&[("a", 500)])).0);
        assert!(!detect_label_collapse(&hist(&[("a", 50), ("b", 50)])).0);
        // 98% dominant: below the strict >99% threshold
        assert!(!detect_label_collapse(&hist(&[("a", 98), ("b", 2)])).0);
        // exactly 99% is not strictly greater
        assert!(!detect_label_collapse(&hist(&[("a", 99), ("b", 1)])).0);
        assert!(detect_label_collapse(&hist(&[("a", 996), ("b", 4)])).0);
    }

    #[test]
    fn comparison_table_single_row_and_ties() {
        let mk = |f1: f64| MetricsReport {
            task: "classification".into(),
            macro_f1: f1,
            accuracy: 0.5,
            per_class: vec![],
            perplexity: None,
            histogram: BTreeMap::new(),
            collapse: false,
            dominant_label: None,
            n_predictions: 10,
        };
        let single = compare_runs(&[("only".into(), mk(0.7))]);
        assert_eq!(single.rows.len(), 1);
        let text = single.to_text();
        assert!(text.contains("only"));

        // tie on accuracy: both rows marked best
        let t = compare_runs(&[("a".into(), mk(0.7)), ("b".into(), mk(0.6))]);
        let text = t.to_text();
        let acc_marked = text.matches("0.5000*").count();
        assert_eq!(acc_marked, 2, "ties marked on both rows:\n{text}");
        assert!(text.contains("0.7000*"));
        assert!(text.contains("0.6000+"));
    }

    #[test]
    fn column_union_includes_perplexity_only_when_present() {
        let mut a = MetricsReport {
            task: "classification".into(),
            macro_f1: 0.5,
            accuracy: 0.5,
            per_class: vec![],
            perplexity: None,
            histogram: BTreeMap::new(),
            collapse: false,
            dominant_label: None,
            n_predictions: 4,
        };
        let t = compare_runs(&[("a".into(), a.clone())]);
        assert_eq!(t.columns.len(), 2);
        a.perplexity = Some(12.0);
        let t = compare_runs(&[("a".into(), a)]);
        assert_eq!(t.columns, ["macro_f1", "accuracy", "perplexity"]);
        // blank cell for a row missing the metric
        let b = MetricsReport {
            task: "classification".into(),
            macro_f1: 0.4,
            accuracy: 0.4,
            per_class: vec![],
            perplexity: None,
            histogram: BTreeMap::new(),
            collapse: false,
            dominant_label: None,
            n_predictions: 4,
        };
        let mut a2 = b.clone();
        a2.perplexity = Some(9.0);
        let t = compare_runs(&[("a".into(), a2), ("b".into(), b)]);
        let csv = t.to_csv();
        assert!(csv.lines().any(|l| l.starts_with("b,") && l.ends_with(',')));
    }
}
