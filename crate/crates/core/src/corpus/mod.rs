//! Synthetic "language isolate" bilingual corpus.
//!
//! A shared latent process (topic, concept sequence) is rendered into two
//! surface languages with disjoint alphabets, zero lexical overlap, a
//! different word order, and a suffix marker on the target side. The two
//! renderings of one latent sample carry identical latent statistics,
//! which is the transfer signal the post-training experiments rely on.

pub mod data;

pub use data::{
    batch_epoch, make_cls_dataset, make_tag_dataset, tokenize_lines, Batch, DataSplits,
    ExampleLabel, LabeledExample,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::LangTag;
use crate::util::{fnv1a, rng_for};

/// Number of topic classes in the classification task.
pub const NUM_TOPICS: usize = 7;

/// Word-level tag scheme for the tagging task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O,
    EntA,
    EntB,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::O => "O",
            Tag::EntA => "ENT-A",
            Tag::EntB => "ENT-B",
        }
    }

    pub fn parse(s: &str) -> Result<Tag> {
        match s {
            "O" => Ok(Tag::O),
            "ENT-A" => Ok(Tag::EntA),
            "ENT-B" => Ok(Tag::EntB),
            _ => Err(Error::Config(format!("unknown tag `{s}`"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::EntA => 1,
            Tag::EntB => 2,
        }
    }

    pub const ALL: [Tag; 3] = [Tag::O, Tag::EntA, Tag::EntB];
}

/// One latent word: a closed-class function word or a content concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentWord {
    Function(u32),
    Concept(u32),
}

/// Latent sample for one sentence.
#[derive(Clone, Debug)]
pub struct LatentSentence {
    pub topic: u8,
    pub words: Vec<LatentWord>,
}

/// Shared latent process: Zipf-ranked content concepts with topic
/// categories, a small closed class of function words, and first-order
/// structure between adjacent concepts.
#[derive(Clone, Debug)]
pub struct ConceptGrammar {
    /// Content-concept inventory size; concept id == Zipf rank − 1.
    pub num_concepts: usize,
    /// Closed-class function words (always tagged O).
    pub num_function_words: usize,
    /// Zipf exponent of the content-concept rank-frequency law.
    pub zipf_exponent: f64,
    /// Probability that a concept is drawn from the same category as its
    /// predecessor instead of the topic distribution.
    pub related_next_prob: f64,
    /// Multiplier on same-topic concepts in the topic-conditional draw.
    pub topic_boost: f64,
    /// Inclusive word-count range per sentence (incl. one function word).
    pub sentence_len: (usize, usize),
}

impl Default for ConceptGrammar {
    fn default() -> Self {
        ConceptGrammar {
            num_concepts: 64,
            num_function_words: 8,
            zipf_exponent: 1.0,
            related_next_prob: 0.2,
            topic_boost: 3.0,
            sentence_len: (4, 16),
        }
    }
}

impl ConceptGrammar {
    /// Topic category of a content concept; ranks cycle through the seven
    /// topics so every topic covers the full frequency range.
    pub fn category(&self, concept: u32) -> u8 {
        (concept as usize % NUM_TOPICS) as u8
    }

    /// Tag of a latent word. Two designated categories are entity types.
    pub fn tag(&self, word: LatentWord) -> Tag {
        match word {
            LatentWord::Function(_) => Tag::O,
            LatentWord::Concept(c) => match self.category(c) {
                5 => Tag::EntA,
                6 => Tag::EntB,
                _ => Tag::O,
            },
        }
    }

    fn zipf_weights(&self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (1..=n)
            .map(|r| 1.0 / (r as f64).powf(self.zipf_exponent))
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }

    /// Stable hash of the grammar parameters, recorded in corpus manifests.
    pub fn hash(&self) -> String {
        let repr = format!(
            "K={} F={} s={} lambda={} boost={} len={:?}",
            self.num_concepts,
            self.num_function_words,
            self.zipf_exponent,
            self.related_next_prob,
            self.topic_boost,
            self.sentence_len
        );
        format!("{:016x}", fnv1a(repr.as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        if self.num_concepts < NUM_TOPICS {
            return Err(Error::Config("need at least one concept per topic".into()));
        }
        if self.num_function_words == 0 {
            return Err(Error::Config("need at least one function word".into()));
        }
        if self.sentence_len.0 < 2 || self.sentence_len.0 > self.sentence_len.1 {
            return Err(Error::Config(format!(
                "bad sentence length range {:?}",
                self.sentence_len
            )));
        }
        if !(0.0..1.0).contains(&self.related_next_prob) {
            return Err(Error::Config("related_next_prob must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Sample one latent sentence. Pure function of (grammar, seed, index).
    pub fn sample_sentence(&self, seed: u64, index: u64) -> LatentSentence {
        let mut rng = rng_for(seed, "sentence", index);
        let topic = rng.random_range(0..NUM_TOPICS) as u8;
        let total_len = rng.random_range(self.sentence_len.0..=self.sentence_len.1);
        let content_len = total_len.saturating_sub(1).max(1);

        let zipf = self.zipf_weights(self.num_concepts);
        // topic-conditional cumulative distribution
        let mut weights: Vec<f64> = zipf
            .iter()
            .enumerate()
            .map(|(c, &w)| {
                if self.category(c as u32) == topic {
                    w * self.topic_boost
                } else {
                    w
                }
            })
            .collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        let mut cum = 0.0;
        let cdf: Vec<f64> = weights
            .iter()
            .map(|w| {
                cum += w;
                cum
            })
            .collect();
        let draw_topic_conditional = |rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
            let x: f64 = rng.random();
            cdf.partition_point(|&c| c < x).min(self.num_concepts - 1) as u32
        };

        let mut concepts = Vec::with_capacity(content_len);
        let mut prev: Option<u32> = None;
        for _ in 0..content_len {
            let c = match prev {
                Some(p) if rng.random::<f64>() < self.related_next_prob => {
                    // uniform draw within the predecessor's category
                    let cat = self.category(p);
                    let members: Vec<u32> = (0..self.num_concepts as u32)
                        .filter(|&c| self.category(c) == cat)
                        .collect();
                    members[rng.random_range(0..members.len())]
                }
                _ => draw_topic_conditional(&mut rng),
            };
            concepts.push(c);
            prev = Some(c);
        }

        // one Zipf-drawn function word at a uniform position
        let fzipf = self.zipf_weights(self.num_function_words);
        let x: f64 = rng.random();
        let mut cum = 0.0;
        let mut fid = self.num_function_words - 1;
        for (i, w) in fzipf.iter().enumerate() {
            cum += w;
            if x < cum {
                fid = i;
                break;
            }
        }
        let fpos = rng.random_range(0..=concepts.len());

        let mut words: Vec<LatentWord> =
            concepts.into_iter().map(LatentWord::Concept).collect();
        words.insert(fpos, LatentWord::Function(fid as u32));
        LatentSentence { topic, words }
    }
}

/// Surface realization rules for one language.
#[derive(Clone, Debug)]
pub struct LanguageSpec {
    pub lang: LangTag,
    /// Content concept id → surface word.
    pub lexicon: Vec<String>,
    /// Function word id → surface word.
    pub function_words: Vec<String>,
    /// Move the last word to the front (target-side order divergence).
    pub rotate_last_to_front: bool,
    /// Marker appended to the head (first content) word's surface form.
    pub head_suffix: Option<char>,
}

fn pseudo_words(consonants: &[char], vowels: &[char], count: usize) -> Vec<String> {
    let syllables: Vec<String> = consonants
        .iter()
        .flat_map(|&c| vowels.iter().map(move |&v| format!("{c}{v}")))
        .collect();
    let base = syllables.len();
    (0..count)
        .map(|i| {
            if i < base {
                format!("{}{}", syllables[i], syllables[(i * 7 + 3) % base])
            } else {
                let a = i % base;
                let b = (i / base) % base;
                format!("{}{}{}", syllables[a], syllables[b], syllables[(a + b) % base])
            }
        })
        .collect()
}

impl LanguageSpec {
    /// Built-in source language: identity word order, latin-ish alphabet.
    pub fn synthetic_source(grammar: &ConceptGrammar) -> Self {
        let consonants: Vec<char> = "bdklmnprst".chars().collect();
        let vowels: Vec<char> = "aeiou".chars().collect();
        let lexicon = pseudo_words(&consonants, &vowels, grammar.num_concepts);
        let function_words: Vec<String> =
            pseudo_words(&consonants, &vowels, grammar.num_concepts + grammar.num_function_words)
                [grammar.num_concepts..]
                .to_vec();
        LanguageSpec {
            lang: LangTag::Source,
            lexicon,
            function_words,
            rotate_last_to_front: false,
            head_suffix: None,
        }
    }

    /// Built-in target language: disjoint alphabet, rotated word order,
    /// suffix marker on head words.
    pub fn synthetic_target(grammar: &ConceptGrammar) -> Self {
        let consonants: Vec<char> = "fghjvwxz".chars().collect();
        let vowels: Vec<char> = "qy".chars().collect();
        let lexicon = pseudo_words(&consonants, &vowels, grammar.num_concepts);
        let function_words: Vec<String> =
            pseudo_words(&consonants, &vowels, grammar.num_concepts + grammar.num_function_words)
                [grammar.num_concepts..]
                .to_vec();
        LanguageSpec {
            lang: LangTag::Target,
            lexicon,
            function_words,
            rotate_last_to_front: true,
            head_suffix: Some('z'),
        }
    }

    fn all_words(&self) -> std::collections::BTreeSet<&str> {
        self.lexicon
            .iter()
            .chain(self.function_words.iter())
            .map(|s| s.as_str())
            .collect()
    }

    /// Render a latent sentence: surface words plus aligned word tags.
    pub fn render(&self, grammar: &ConceptGrammar, latent: &LatentSentence) -> (String, Vec<Tag>) {
        let mut words: Vec<String> = Vec::with_capacity(latent.words.len());
        let mut tags: Vec<Tag> = Vec::with_capacity(latent.words.len());
        let mut head_marked = false;
        for w in &latent.words {
            let mut surface = match *w {
                LatentWord::Function(f) => self.function_words[f as usize].clone(),
                LatentWord::Concept(c) => self.lexicon[c as usize].clone(),
            };
            if let (LatentWord::Concept(_), Some(suffix), false) = (*w, self.head_suffix, head_marked) {
                surface.push(suffix);
                head_marked = true;
            }
            tags.push(grammar.tag(*w));
            words.push(surface);
        }
        if self.rotate_last_to_front && words.len() > 1 {
            let lw = words.pop().unwrap();
            let lt = tags.pop().unwrap();
            words.insert(0, lw);
            tags.insert(0, lt);
        }
        (words.join(" "), tags)
    }
}

/// Ensure two specs can form an isolate pair: no shared surface word.
pub fn validate_disjoint(a: &LanguageSpec, b: &LanguageSpec) -> Result<()> {
    let overlap: Vec<&str> = a.all_words().intersection(&b.all_words()).copied().collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "language lexicons overlap on {} word(s), e.g. `{}`",
            overlap.len(),
            overlap[0]
        )))
    }
}

/// Paired renderings of one latent corpus.
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub source_lines: Vec<String>,
    pub target_lines: Vec<String>,
    pub topics: Vec<u8>,
    pub source_tags: Vec<Vec<Tag>>,
    pub target_tags: Vec<Vec<Tag>>,
    pub latents: Vec<LatentSentence>,
    pub grammar_hash: String,
}

/// Sample `n_sentences` latent sentences and render both languages.
/// Byte-identical for identical arguments.
pub fn gen_bilingual_corpus(
    seed: u64,
    n_sentences: usize,
    grammar: &ConceptGrammar,
    source: &LanguageSpec,
    target: &LanguageSpec,
) -> Result<GeneratedCorpus> {
    grammar.validate()?;
    if source.lexicon.len() != grammar.num_concepts || target.lexicon.len() != grammar.num_concepts {
        return Err(Error::Config("lexicon size differs from concept inventory".into()));
    }
    validate_disjoint(source, target)?;

    let mut out = GeneratedCorpus {
        source_lines: Vec::with_capacity(n_sentences),
        target_lines: Vec::with_capacity(n_sentences),
        topics: Vec::with_capacity(n_sentences),
        source_tags: Vec::with_capacity(n_sentences),
        target_tags: Vec::with_capacity(n_sentences),
        latents: Vec::with_capacity(n_sentences),
        grammar_hash: grammar.hash(),
    };
    for i in 0..n_sentences {
        let latent = grammar.sample_sentence(seed, i as u64);
        let (sline, stags) = source.render(grammar, &latent);
        let (tline, ttags) = target.render(grammar, &latent);
        out.source_lines.push(sline);
        out.target_lines.push(tline);
        out.topics.push(latent.topic);
        out.source_tags.push(stags);
        out.target_tags.push(ttags);
        out.latents.push(latent);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grammar() -> ConceptGrammar {
        ConceptGrammar {
            sentence_len: (4, 10),
            ..Default::default()
        }
    }

    #[test]
    fn surface_vocabularies_are_disjoint() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let corpus = gen_bilingual_corpus(1, 500, &g, &src, &tgt).unwrap();
        let src_words: std::collections::BTreeSet<&str> = corpus
            .source_lines
            .iter()
            .flat_map(|l| l.split(' '))
            .collect();
        let tgt_words: std::collections::BTreeSet<&str> = corpus
            .target_lines
            .iter()
            .flat_map(|l| l.split(' '))
            .collect();
        assert!(src_words.intersection(&tgt_words).next().is_none());
        // character sets are disjoint too
        let src_chars: std::collections::BTreeSet<char> =
            corpus.source_lines.iter().flat_map(|l| l.chars()).filter(|c| *c != ' ').collect();
        let tgt_chars: std::collections::BTreeSet<char> =
            corpus.target_lines.iter().flat_map(|l| l.chars()).filter(|c| *c != ' ').collect();
        assert!(src_chars.intersection(&tgt_chars).next().is_none());
    }

    #[test]
    fn generation_is_deterministic() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let a = gen_bilingual_corpus(9, 200, &g, &src, &tgt).unwrap();
        let b = gen_bilingual_corpus(9, 200, &g, &src, &tgt).unwrap();
        assert_eq!(a.source_lines, b.source_lines);
        assert_eq!(a.target_lines, b.target_lines);
        assert_eq!(a.topics, b.topics);
    }

    #[test]
    fn overlapping_lexicons_rejected_before_generation() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let mut tgt = LanguageSpec::synthetic_target(&g);
        tgt.lexicon[0] = src.lexicon[0].clone();
        assert!(gen_bilingual_corpus(1, 10, &g, &src, &tgt).is_err());
    }

    #[test]
    fn concept_frequencies_follow_zipf() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let corpus = gen_bilingual_corpus(3, 50_000, &g, &src, &tgt).unwrap();
        let mut counts = vec![0u64; g.num_concepts];
        for latent in &corpus.latents {
            for w in &latent.words {
                if let LatentWord::Concept(c) = w {
                    counts[*c as usize] += 1;
                }
            }
        }
        let ratio = counts[0] as f64 / counts[9] as f64;
        let nominal = 10f64.powf(g.zipf_exponent);
        assert!(
            (ratio - nominal).abs() / nominal < 0.3,
            "rank1/rank10 ratio {ratio:.2} vs nominal {nominal:.2}"
        );
    }

    #[test]
    fn latent_bigram_statistics_match_across_renderings() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let corpus = gen_bilingual_corpus(5, 2000, &g, &src, &tgt).unwrap();

        // invert each rendering back to latent ids and compare bigram maps
        let invert = |spec: &LanguageSpec, lines: &[String]| {
            let lex: std::collections::HashMap<&str, u32> = spec
                .lexicon
                .iter()
                .enumerate()
                .map(|(i, w)| (w.as_str(), i as u32))
                .collect();
            let mut bigrams: std::collections::BTreeMap<(u32, u32), u64> =
                std::collections::BTreeMap::new();
            for line in lines {
                let mut words: Vec<&str> = line.split(' ').collect();
                if spec.rotate_last_to_front && words.len() > 1 {
                    let first = words.remove(0);
                    words.push(first);
                }
                let concepts: Vec<u32> = words
                    .iter()
                    .filter_map(|w| {
                        let stripped = match spec.head_suffix {
                            Some(sfx) => w.strip_suffix(sfx).unwrap_or(w),
                            None => w,
                        };
                        lex.get(stripped).copied().or_else(|| lex.get(*w).copied())
                    })
                    .collect();
                for p in concepts.windows(2) {
                    *bigrams.entry((p[0], p[1])).or_insert(0) += 1;
                }
            }
            bigrams
        };
        let sb = invert(&src, &corpus.source_lines);
        let tb = invert(&tgt, &corpus.target_lines);
        assert_eq!(sb, tb);
        assert!(!sb.is_empty());
    }

    #[test]
    fn every_sentence_has_an_o_tag_and_aligned_tags() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let corpus = gen_bilingual_corpus(2, 500, &g, &src, &tgt).unwrap();
        for (line, tags) in corpus.target_lines.iter().zip(&corpus.target_tags) {
            assert_eq!(line.split(' ').count(), tags.len());
            assert!(tags.contains(&Tag::O));
        }
    }

    #[test]
    fn entity_density_in_expected_band() {
        let g = small_grammar();
        let src = LanguageSpec::synthetic_source(&g);
        let tgt = LanguageSpec::synthetic_target(&g);
        let corpus = gen_bilingual_corpus(4, 5000, &g, &src, &tgt).unwrap();
        let mut ent = 0usize;
        let mut total = 0usize;
        for tags in &corpus.source_tags {
            total += tags.len();
            ent += tags.iter().filter(|t| **t != Tag::O).count();
        }
        let density = ent as f64 / total as f64;
        assert!((0.10..=0.30).contains(&density), "entity density {density:.3}");
    }
}
