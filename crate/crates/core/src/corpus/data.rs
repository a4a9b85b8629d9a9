//! Downstream task datasets and batching.

use rand::seq::SliceRandom;

use crate::corpus::Tag;
use crate::error::{Error, Result};
use crate::tokenizer::{encode, LangTag, TokenSequence, Vocabulary, SEP_ID};
use crate::util::rng_for;

/// Task label carried by one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExampleLabel {
    Topic(u8),
    Tags(Vec<Tag>),
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub text: String,
    pub label: ExampleLabel,
    pub lang: LangTag,
}

/// Train/dev/test partition.
#[derive(Clone, Debug, Default)]
pub struct DataSplits {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl DataSplits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 <= 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    Ok(())
}

/// Largest-remainder apportionment: how many of each group go to a split
/// so that the split total is exactly `target`.
fn apportion(group_sizes: &[usize], ratio: f64, target: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = group_sizes.iter().map(|&g| (g as f64 * ratio) as usize).collect();
    let mut fracs: Vec<(usize, f64)> = group_sizes
        .iter()
        .enumerate()
        .map(|(i, &g)| (i, g as f64 * ratio - alloc[i] as f64))
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = alloc.iter().sum();
    let mut remaining = target.saturating_sub(assigned);
    for (i, _) in fracs {
        if remaining == 0 {
            break;
        }
        if alloc[i] < group_sizes[i] {
            alloc[i] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Stratified split of a single-sentence classification dataset. Every
/// split receives each class in proportion to its global frequency.
pub fn make_cls_dataset(
    lines: &[String],
    topics: &[u8],
    lang: LangTag,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DataSplits> {
    check_ratios(ratios)?;
    if lines.len() != topics.len() {
        return Err(Error::Config(format!(
            "{} lines but {} labels",
            lines.len(),
            topics.len()
        )));
    }
    let classes: std::collections::BTreeSet<u8> = topics.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Config("stratification impossible: fewer than 2 classes".into()));
    }

    // group indices per class, shuffled within class
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &c in &classes {
        let mut idx: Vec<usize> = (0..lines.len()).filter(|&i| topics[i] == c).collect();
        idx.shuffle(&mut rng_for(seed, "cls-split", c as u64));
        groups.push(idx);
    }
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let n = lines.len();
    let t_test = (n as f64 * ratios.2).round() as usize;
    let t_dev = (n as f64 * ratios.1).round() as usize;
    let test_alloc = apportion(&sizes, ratios.2, t_test);
    let leftover: Vec<usize> = sizes.iter().zip(&test_alloc).map(|(s, t)| s - t).collect();
    let dev_alloc = apportion(&leftover, ratios.1 / (1.0 - ratios.2).max(1e-12), t_dev);

    let mut out = DataSplits::default();
    for (gi, group) in groups.iter().enumerate() {
        for (j, &i) in group.iter().enumerate() {
            let ex = LabeledExample {
                text: lines[i].clone(),
                label: ExampleLabel::Topic(topics[i]),
                lang,
            };
            if j < test_alloc[gi] {
                out.test.push(ex);
            } else if j < test_alloc[gi] + dev_alloc[gi] {
                out.dev.push(ex);
            } else {
                out.train.push(ex);
            }
        }
    }
    out.train.shuffle(&mut rng_for(seed, "cls-train-order", 0));
    out.dev.shuffle(&mut rng_for(seed, "cls-dev-order", 0));
    out.test.shuffle(&mut rng_for(seed, "cls-test-order", 0));
    Ok(out)
}

/// Split a sequence-tagging dataset. Tags must align 1:1 with whitespace
/// words. No class stratification; a seeded shuffle with exact totals.
pub fn make_tag_dataset(
    lines: &[String],
    tags: &[Vec<Tag>],
    lang: LangTag,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DataSplits> {
    check_ratios(ratios)?;
    if lines.len() != tags.len() {
        return Err(Error::Config(format!("{} lines but {} tag rows", lines.len(), tags.len())));
    }
    for (i, (line, t)) in lines.iter().zip(tags).enumerate() {
        let words = line.split_whitespace().count();
        if words != t.len() {
            return Err(Error::Config(format!(
                "line {}: {} words but {} tags",
                i + 1,
                words,
                t.len()
            )));
        }
    }
    let mut idx: Vec<usize> = (0..lines.len()).collect();
    idx.shuffle(&mut rng_for(seed, "tag-split", 0));
    let n = lines.len();
    let t_test = (n as f64 * ratios.2).round() as usize;
    let t_dev = (n as f64 * ratios.1).round() as usize;
    let mut out = DataSplits::default();
    for (j, &i) in idx.iter().enumerate() {
        let ex = LabeledExample {
            text: lines[i].clone(),
            label: ExampleLabel::Tags(tags[i].clone()),
            lang,
        };
        if j < t_test {
            out.test.push(ex);
        } else if j < t_test + t_dev {
            out.dev.push(ex);
        } else {
            out.train.push(ex);
        }
    }
    Ok(out)
}

/// Encode lines with specials, truncating to `max_len` (the final token
/// stays a separator so the sentence shape survives truncation). Word
/// encodings are memoized; the synthetic languages have closed lexicons,
/// so this touches each distinct word once.
pub fn tokenize_lines(lines: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    let mut cache: std::collections::HashMap<String, Vec<u32>> = std::collections::HashMap::new();
    lines
        .iter()
        .map(|line| {
            let mut ids = vec![crate::tokenizer::CLS_ID];
            for word in line.split_whitespace() {
                let word_ids = cache
                    .entry(word.to_string())
                    .or_insert_with(|| encode(word, vocab, false).ids);
                ids.extend_from_slice(word_ids);
            }
            ids.push(SEP_ID);
            if ids.len() > max_len {
                ids.truncate(max_len);
                *ids.last_mut().unwrap() = SEP_ID;
            }
            TokenSequence { ids }
        })
        .collect()
}

/// One padded batch: rows share a length; the mask is true at real tokens.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub attn_mask: Vec<Vec<bool>>,
    pub indices: Vec<usize>,
}

impl Batch {
    /// True (unpadded) length of row `r`.
    pub fn true_len(&self, r: usize) -> usize {
        self.attn_mask[r].iter().filter(|&&m| m).count()
    }
}

/// Batches of one epoch: seeded shuffle, each example exactly once,
/// padding with id 0 up to the longest row in the batch.
pub fn batch_epoch(
    seqs: &[TokenSequence],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng_for(seed, "batch-shuffle", epoch));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk
                .iter()
                .map(|&i| seqs[i].ids.len().min(max_len))
                .max()
                .unwrap_or(0);
            let mut ids = Vec::with_capacity(chunk.len());
            let mut mask = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut row: Vec<u32> = seqs[i].ids.iter().copied().take(max_len).collect();
                let true_len = row.len();
                row.resize(width, 0);
                let mut m = vec![true; true_len];
                m.resize(width, false);
                ids.push(row);
                mask.push(m);
            }
            Batch {
                ids,
                attn_mask: mask,
                indices: chunk.to_vec(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_bilingual_corpus, ConceptGrammar, LanguageSpec};
    use crate::tokenizer::train_bpe;

    fn corpus_1000() -> (Vec<String>, Vec<u8>) {
        let g = ConceptGrammar {
            sentence_len: (4, 10),
            ..Default::default()
        };
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let c = gen_bilingual_corpus(17, 1000, &g, &src, &tgt).unwrap();
        (c.source_lines, c.topics)
    }

    #[test]
    fn split_sizes_are_exact() {
        let (lines, topics) = corpus_1000();
        let splits = make_cls_dataset(&lines, &topics, LangTag::Source, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(splits.sizes(), (800, 100, 100));
    }

    #[test]
    fn all_seven_labels_present_in_every_split() {
        let (lines, topics) = corpus_1000();
        let splits = make_cls_dataset(&lines, &topics, LangTag::Source, (0.8, 0.1, 0.1), 2).unwrap();
        for split in [&splits.train, &splits.dev, &splits.test] {
            let classes: std::collections::BTreeSet<u8> = split
                .iter()
                .map(|e| match e.label {
                    ExampleLabel::Topic(t) => t,
                    _ => unreachable!(),
                })
                .collect();
            assert_eq!(classes.len(), 7);
        }
    }

    #[test]
    fn split_histograms_track_global_distribution() {
        let (lines, topics) = corpus_1000();
        let splits = make_cls_dataset(&lines, &topics, LangTag::Source, (0.8, 0.1, 0.1), 3).unwrap();
        let hist = |split: &[LabeledExample]| {
            let mut h = vec![0usize; 7];
            for e in split {
                if let ExampleLabel::Topic(t) = e.label {
                    h[t as usize] += 1;
                }
            }
            h
        };
        let global = {
            let mut h = vec![0usize; 7];
            for &t in &topics {
                h[t as usize] += 1;
            }
            h
        };
        for (split, frac) in [(&splits.train, 0.8), (&splits.dev, 0.1), (&splits.test, 0.1)] {
            let h = hist(split);
            for c in 0..7 {
                let expect = global[c] as f64 * frac;
                assert!(
                    (h[c] as f64 - expect).abs() <= (0.1 * expect).max(1.5),
                    "class {c}: {} vs expected {expect:.1}",
                    h[c]
                );
            }
        }
    }

    #[test]
    fn single_class_input_is_rejected() {
        let lines: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let topics = vec![3u8; 10];
        let err = make_cls_dataset(&lines, &topics, LangTag::Source, (0.8, 0.1, 0.1), 0).unwrap_err();
        assert!(err.to_string().contains("stratification impossible"));
    }

    #[test]
    fn tag_dataset_rejects_misaligned_tags() {
        let lines = vec!["a b c".to_string()];
        let tags = vec![vec![Tag::O, Tag::EntA]];
        assert!(make_tag_dataset(&lines, &tags, LangTag::Source, (0.8, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn batches_cover_every_example_once_and_reshuffle() {
        let (lines, _) = corpus_1000();
        let g = ConceptGrammar::default();
        let _ = g;
        let vocab = train_bpe(&lines, 256, LangTag::Source).unwrap();
        let seqs = tokenize_lines(&lines[..100], &vocab, 32);
        assert!(seqs.iter().all(|s| s.ids.len() <= 32));

        let e1 = batch_epoch(&seqs, 16, 32, 5, 0);
        let e2 = batch_epoch(&seqs, 16, 32, 5, 1);
        let order = |batches: &[Batch]| -> Vec<usize> {
            batches.iter().flat_map(|b| b.indices.clone()).collect()
        };
        let (o1, o2) = (order(&e1), order(&e2));
        assert_ne!(o1, o2, "epochs should reshuffle");
        let mut s1 = o1.clone();
        s1.sort_unstable();
        assert_eq!(s1, (0..100).collect::<Vec<_>>());
        for b in &e1 {
            for (row, mask) in b.ids.iter().zip(&b.attn_mask) {
                assert!(row.len() <= 32);
                assert_eq!(row.len(), mask.len());
                for (v, m) in row.iter().zip(mask) {
                    if !m {
                        assert_eq!(*v, 0, "padding must be id 0");
                    }
                }
            }
        }
    }
}
