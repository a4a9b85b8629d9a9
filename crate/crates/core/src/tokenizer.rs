//! Trainable byte-pair-encoding tokenizer with per-language vocabularies.
//!
//! Words are whitespace-split; the final character of each word carries an
//! end-of-word marker so merges never cross word boundaries. Merges apply
//! at encode time in training order. Vocabulary and merge files are plain
//! UTF-8, one entry per line, with the line number as the token id.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::fnv1a;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// First id after the five specials.
pub const FIRST_REGULAR_ID: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

const END_OF_WORD: &str = "</w>";

/// Which side of the language pair a vocabulary belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LangTag {
    Source,
    Target,
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LangTag::Source => write!(f, "source"),
            LangTag::Target => write!(f, "target"),
        }
    }
}

/// Encoded token ids for one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A trained BPE vocabulary: token list (index = id) plus ordered merges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub lang: LangTag,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    ids: std::collections::HashMap<String, u32>,
    /// Set when training stopped short of the requested size because no
    /// pair occurred at least twice.
    pub warn_truncated: bool,
}

impl Vocabulary {
    fn build(
        lang: LangTag,
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        warn_truncated: bool,
    ) -> Result<Self> {
        let mut ids = std::collections::HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token `{t}`"),
                });
            }
        }
        for (i, (l, r)) in merges.iter().enumerate() {
            let joined = format!("{l}{r}");
            if !ids.contains_key(&joined) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("merge output `{joined}` missing from token list"),
                });
            }
        }
        Ok(Vocabulary {
            lang,
            tokens,
            merges,
            ids,
            warn_truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Stable content hash over tokens and merges, used to detect
    /// model/tokenizer mismatches.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(b'\n');
        }
        for (l, r) in &self.merges {
            bytes.extend_from_slice(l.as_bytes());
            bytes.push(b' ');
            bytes.extend_from_slice(r.as_bytes());
            bytes.push(b'\n');
        }
        format!("{:016x}", fnv1a(&bytes))
    }

    /// Non-special tokens, the set compared across languages.
    pub fn surface_tokens(&self) -> std::collections::BTreeSet<&str> {
        self.tokens[FIRST_REGULAR_ID as usize..]
            .iter()
            .map(|s| s.as_str())
            .collect()
    }
}

/// Collapse whitespace runs to single spaces and trim the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_word(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Train a BPE vocabulary by greedy highest-frequency pair merging.
/// Ties break toward the lexicographically smallest pair; merging stops
/// when the budget is reached or no pair occurs at least twice.
pub fn train_bpe(lines: &[String], vocab_size: usize, lang: LangTag) -> Result<Vocabulary> {
    // word -> corpus frequency, in first-seen order for determinism
    let mut word_order: Vec<String> = Vec::new();
    let mut word_count: std::collections::HashMap<String, u64> = std::collections::HashMap::new();
    for line in lines {
        for word in normalize_whitespace(line).split(' ') {
            if word.is_empty() {
                continue;
            }
            if !word_count.contains_key(word) {
                word_order.push(word.to_string());
            }
            *word_count.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_order.is_empty() {
        return Err(Error::Config("tokenizer corpus is empty".into()));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_order
        .iter()
        .map(|w| (word_symbols(w), word_count[w]))
        .collect();

    let mut base: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for (syms, _) in &words {
        base.extend(syms.iter().cloned());
    }
    let min_size = SPECIAL_TOKENS.len() + base.len();
    if vocab_size < min_size {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} below character floor {min_size}"
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.iter().cloned());
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut warn_truncated = false;

    while tokens.len() < vocab_size {
        let mut counts: std::collections::BTreeMap<(String, String), u64> =
            std::collections::BTreeMap::new();
        for (syms, freq) in &words {
            for pair in syms.windows(2) {
                *counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // strict > keeps the lexicographically smallest pair on ties
        let best = counts
            .iter()
            .fold(None::<(&(String, String), u64)>, |acc, (p, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            });
        let (pair, count) = match best {
            Some((p, c)) => (p.clone(), c),
            None => {
                warn_truncated = true;
                break;
            }
        };
        if count < 2 {
            warn_truncated = true;
            break;
        }
        for (syms, _) in &mut words {
            *syms = merge_word(syms, &pair.0, &pair.1);
        }
        tokens.push(format!("{}{}", pair.0, pair.1));
        merges.push(pair);
    }

    Vocabulary::build(lang, tokens, merges, warn_truncated)
}

/// Encode text with a trained vocabulary. Unknown symbols (characters the
/// training corpus never produced in that word position) become `<unk>`.
pub fn encode(text: &str, vocab: &Vocabulary, add_specials: bool) -> TokenSequence {
    let (ids, _) = encode_with_word_starts(text, vocab, add_specials);
    ids
}

/// Encode and also report the index of each word's first token within the
/// output sequence (used to align word-level tags with subword tokens).
pub fn encode_with_word_starts(
    text: &str,
    vocab: &Vocabulary,
    add_specials: bool,
) -> (TokenSequence, Vec<usize>) {
    let mut ids: Vec<u32> = Vec::new();
    let mut word_starts = Vec::new();
    if add_specials {
        ids.push(CLS_ID);
    }
    for word in normalize_whitespace(text).split(' ') {
        if word.is_empty() {
            continue;
        }
        word_starts.push(ids.len());
        let mut syms = word_symbols(word);
        for (l, r) in vocab.merges() {
            syms = merge_word(&syms, l, r);
        }
        for s in syms {
            ids.push(vocab.id_of(&s).unwrap_or(UNK_ID));
        }
    }
    if add_specials {
        ids.push(SEP_ID);
    }
    (TokenSequence { ids }, word_starts)
}

/// Inverse of `encode` on in-alphabet text, up to whitespace normalization.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in &seq.ids {
        if id < FIRST_REGULAR_ID && id != UNK_ID {
            continue;
        }
        match vocab.token(id) {
            Some(tok) => out.push_str(tok),
            None => out.push_str("<bad>"),
        }
    }
    normalize_whitespace(&out.replace(END_OF_WORD, " "))
}

/// Write the token list and merge rules as the two-file text format.
pub fn save_vocab(vocab: &Vocabulary, vocab_path: &Path, merges_path: &Path) -> Result<()> {
    let mut body = String::new();
    for t in vocab.tokens() {
        body.push_str(t);
        body.push('\n');
    }
    std::fs::write(vocab_path, body)?;
    let mut merges = String::new();
    for (l, r) in vocab.merges() {
        merges.push_str(&format!("{l} {r}\n"));
    }
    std::fs::write(merges_path, merges)?;
    Ok(())
}

/// Load a vocabulary saved by [`save_vocab`]. The language tag is not part
/// of the file format, so the caller supplies it.
pub fn load_vocab(vocab_path: &Path, merges_path: &Path, lang: LangTag) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(vocab_path)?;
    let mut tokens = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if i < SPECIAL_TOKENS.len() && line != SPECIAL_TOKENS[i] {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected special token `{}`, found `{line}`", SPECIAL_TOKENS[i]),
            });
        }
        if !seen.insert(line.to_string()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate token `{line}`"),
            });
        }
        tokens.push(line.to_string());
    }
    if tokens.len() < SPECIAL_TOKENS.len() {
        return Err(Error::Parse {
            line: tokens.len(),
            msg: "vocab file shorter than the five special tokens".into(),
        });
    }
    let mtext = std::fs::read_to_string(merges_path)?;
    let mut merges = Vec::new();
    for (i, line) in mtext.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) => merges.push((l.to_string(), r.to_string())),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("merge line must be `left right`, found `{line}`"),
                })
            }
        }
    }
    Vocabulary::build(lang, tokens, merges, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Brute-force pair counting over the freshly decomposed corpus.
    fn most_frequent_pair(corpus: &[String]) -> ((String, String), u64) {
        let mut counts: std::collections::BTreeMap<(String, String), u64> =
            std::collections::BTreeMap::new();
        for line in corpus {
            for word in normalize_whitespace(line).split(' ') {
                let syms = word_symbols(word);
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
                }
            }
        }
        counts
            .into_iter()
            .fold(None::<((String, String), u64)>, |acc, (p, c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            })
            .unwrap()
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair() {
        let corpus = lines(&["aaab aaab ab"]);
        let (expect_pair, count) = most_frequent_pair(&corpus);
        assert_eq!(expect_pair, ("a".to_string(), "a".to_string()));
        assert_eq!(count, 4);
        let vocab = train_bpe(&corpus, 64, LangTag::Source).unwrap();
        assert_eq!(vocab.merges()[0], expect_pair);
    }

    #[test]
    fn character_floor_budget_yields_zero_merges() {
        let corpus = lines(&["abc cba"]);
        // base symbols: a b c a</w> c</w> (last chars carry the marker)
        let probe = train_bpe(&corpus, 1024, LangTag::Source).unwrap();
        let base_count = probe.len() - 5 - probe.merges().len();
        assert_eq!(base_count, 5);
        let vocab = train_bpe(&corpus, 5 + base_count, LangTag::Source).unwrap();
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.len(), 5 + base_count);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = lines(&["the cat sat", "the bat sat", "a cat"]);
        let a = train_bpe(&corpus, 40, LangTag::Source).unwrap();
        let b = train_bpe(&corpus, 40, LangTag::Source).unwrap();
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn unreachable_budget_sets_warning() {
        let corpus = lines(&["xy"]);
        let vocab = train_bpe(&corpus, 100, LangTag::Source).unwrap();
        assert!(vocab.warn_truncated);
        assert!(vocab.len() < 100);
    }

    #[test]
    fn empty_text_with_specials_is_cls_sep() {
        let corpus = lines(&["ab ab"]);
        let vocab = train_bpe(&corpus, 16, LangTag::Source).unwrap();
        let seq = encode("", &vocab, true);
        assert_eq!(seq.ids, vec![CLS_ID, SEP_ID]);
    }

    #[test]
    fn decode_inverts_encode_on_in_alphabet_text() {
        let corpus = lines(&["banu keri tolo", "banu tolo", "keri banu keri"]);
        let vocab = train_bpe(&corpus, 64, LangTag::Source).unwrap();
        for text in ["banu keri", "tolo   banu\tkeri", " keri "] {
            let seq = encode(text, &vocab, true);
            assert_eq!(decode(&seq, &vocab), normalize_whitespace(text));
        }
    }

    #[test]
    fn unseen_character_maps_to_unk() {
        let corpus = lines(&["ab ab"]);
        let vocab = train_bpe(&corpus, 16, LangTag::Source).unwrap();
        let seq = encode("aZ", &vocab, false);
        assert!(seq.ids.contains(&UNK_ID));
    }

    #[test]
    fn encode_is_prefix_stable_over_words() {
        let corpus = lines(&["one two three four", "two four one"]);
        let vocab = train_bpe(&corpus, 64, LangTag::Source).unwrap();
        let full = encode("one two three", &vocab, false);
        let prefix = encode("one two", &vocab, false);
        assert_eq!(&full.ids[..prefix.ids.len()], &prefix.ids[..]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = lines(&["the cat sat on the mat", "a cat sat"]);
        let vocab = train_bpe(&corpus, 48, LangTag::Target).unwrap();
        let vp = dir.path().join("vocab.txt");
        let mp = dir.path().join("merges.txt");
        save_vocab(&vocab, &vp, &mp).unwrap();
        let loaded = load_vocab(&vp, &mp, LangTag::Target).unwrap();
        assert_eq!(vocab.tokens(), loaded.tokens());
        assert_eq!(vocab.merges(), loaded.merges());
        assert_eq!(vocab.hash(), loaded.hash());
    }

    #[test]
    fn duplicate_token_line_is_an_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("vocab.txt");
        let mp = dir.path().join("merges.txt");
        std::fs::write(&vp, "<pad>\n<unk>\n<cls>\n<sep>\n<mask>\nab\nab\n").unwrap();
        std::fs::write(&mp, "").unwrap();
        let err = load_vocab(&vp, &mp, LangTag::Source).unwrap_err();
        assert!(err.to_string().contains("line 7"), "{err}");
    }

    #[test]
    fn handwritten_six_line_vocab_loads() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("vocab.txt");
        let mp = dir.path().join("merges.txt");
        std::fs::write(&vp, "<pad>\n<unk>\n<cls>\n<sep>\n<mask>\nab\n").unwrap();
        std::fs::write(&mp, "").unwrap();
        let vocab = load_vocab(&vp, &mp, LangTag::Source).unwrap();
        assert_eq!(vocab.len(), 6);
    }

    #[test]
    fn wrong_special_order_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("vocab.txt");
        let mp = dir.path().join("merges.txt");
        std::fs::write(&vp, "<unk>\n<pad>\n<cls>\n<sep>\n<mask>\n").unwrap();
        std::fs::write(&mp, "").unwrap();
        assert!(load_vocab(&vp, &mp, LangTag::Source).is_err());
    }
}
