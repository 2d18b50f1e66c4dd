//! Text ingestion, sentence and phrase splitting, tokenization and vocabularies.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// One line of `products.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub sku_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub reviews: Vec<String>,
    #[serde(default)]
    pub ocr_texts: Vec<String>,
    #[serde(default)]
    pub category: String,
}

/// One line of `human_selling_points.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSellingPoint {
    pub text: String,
    #[serde(default)]
    pub theme: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Description,
    Review,
    Ocr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSentence {
    pub text: String,
    pub source: SourceKind,
    pub sku_id: String,
}

/// Which product text fields feed candidate collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceToggles {
    pub use_reviews: bool,
    pub use_ocr: bool,
    pub split_commas: bool,
}

impl Default for SourceToggles {
    fn default() -> Self {
        SourceToggles {
            use_reviews: true,
            use_ocr: true,
            split_commas: true,
        }
    }
}

fn is_sentence_break(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ';' | '。' | '！' | '？' | '；')
}

fn is_phrase_break(c: char) -> bool {
    matches!(c, ',' | '，' | '、')
}

/// Splits text into sentence (and optionally comma-delimited phrase) pieces.
///
/// A `.` or `,` between two ASCII digits is part of a number and never splits.
pub fn split_sentences(text: &str, split_commas: bool) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let numeric_sep = (c == '.' || c == ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        let breaks = !numeric_sep && (is_sentence_break(c) || (split_commas && is_phrase_break(c)));
        if breaks {
            push_piece(&mut pieces, &current);
            current.clear();
        } else {
            current.push(c);
        }
    }
    push_piece(&mut pieces, &current);
    pieces
}

fn push_piece(pieces: &mut Vec<String>, piece: &str) {
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        pieces.push(trimmed.to_string());
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2A6DF) // extension B
}

/// Lowercases, splits on whitespace, strips punctuation at token edges and
/// emits CJK characters as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lowered.split_whitespace() {
        let mut run = String::new();
        for c in chunk.chars() {
            if is_cjk(c) {
                push_stripped(&mut tokens, &run);
                run.clear();
                tokens.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        push_stripped(&mut tokens, &run);
    }
    tokens
}

fn push_stripped(tokens: &mut Vec<String>, run: &str) {
    let stripped = run.trim_matches(|c: char| !c.is_alphanumeric());
    if !stripped.is_empty() {
        tokens.push(stripped.to_string());
    }
}

/// Lowercased, punctuation-stripped token join; used as a deduplication key.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Collects candidate sentences from the enabled sources of one product,
/// dropping pieces that tokenize to nothing.
pub fn collect_candidates(product: &ProductRecord, toggles: SourceToggles) -> Vec<CandidateSentence> {
    let mut out = Vec::new();
    let mut push_all = |text: &str, source: SourceKind| {
        for piece in split_sentences(text, toggles.split_commas) {
            if !tokenize(&piece).is_empty() {
                out.push(CandidateSentence {
                    text: piece,
                    source,
                    sku_id: product.sku_id.clone(),
                });
            }
        }
    };
    push_all(&product.description, SourceKind::Description);
    if toggles.use_reviews {
        for review in &product.reviews {
            push_all(review, SourceKind::Review);
        }
    }
    if toggles.use_ocr {
        for ocr in &product.ocr_texts {
            push_all(ocr, SourceKind::Ocr);
        }
    }
    out
}

/// Dense token ↔ id mapping with the four specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens, prepending the specials.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    /// Rebuilds a vocabulary from a full id-ordered list, specials included.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <pad> <unk> <bos> <eos>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("specials are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Counts tokens over `corpora`, keeps those seen at least `min_freq` times,
/// most frequent first with lexicographic tie-breaks, capped at `max_size`
/// entries including the specials.
pub fn build_vocab<I, S>(corpora: I, min_freq: usize, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_freq < 1 {
        return Err(Error::InvalidArgument("min_freq must be >= 1".into()));
    }
    if max_size < NUM_SPECIALS {
        return Err(Error::InvalidArgument(format!("max_size must be >= {NUM_SPECIALS}")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpora {
        for tok in tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(tok, n)| *n >= min_freq && !SPECIAL_TOKENS.contains(&tok.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Vocabulary::from_tokens(ranked.into_iter().map(|(tok, _)| tok))
}

/// A token sequence encoded against both the fixed and the per-source
/// extended vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub extended_ids: Vec<usize>,
    pub oov_list: Vec<String>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Size of the extended vocabulary for this source.
    pub fn extended_size(&self, vocab: &Vocabulary) -> usize {
        vocab.len() + self.oov_list.len()
    }

    /// Maps a target token onto this source's extended vocabulary: in-vocab
    /// tokens keep their id, source OOVs get their temporary id, anything
    /// else is UNK.
    pub fn target_id(&self, vocab: &Vocabulary, token: &str) -> usize {
        if let Some(id) = vocab.id(token) {
            return id;
        }
        match self.oov_list.iter().position(|o| o == token) {
            Some(j) => vocab.len() + j,
            None => UNK,
        }
    }

    /// Renders an extended id back to its surface string.
    pub fn render(&self, vocab: &Vocabulary, id: usize) -> Option<String> {
        if id < vocab.len() {
            vocab.token(id).map(str::to_string)
        } else {
            self.oov_list.get(id - vocab.len()).cloned()
        }
    }
}

pub fn encode_extended<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> EncodedSequence {
    let mut seq = EncodedSequence::default();
    for tok in tokens {
        let tok = tok.as_ref();
        match vocab.id(tok) {
            Some(id) => {
                seq.ids.push(id);
                seq.extended_ids.push(id);
            }
            None => {
                let j = match seq.oov_list.iter().position(|o| o == tok) {
                    Some(j) => j,
                    None => {
                        seq.oov_list.push(tok.to_string());
                        seq.oov_list.len() - 1
                    }
                };
                seq.ids.push(UNK);
                seq.extended_ids.push(vocab.len() + j);
            }
        }
    }
    seq
}

/// Inverse of [`encode_extended`] over the extended channel.
pub fn decode_extended(vocab: &Vocabulary, seq: &EncodedSequence) -> Vec<String> {
    seq.extended_ids
        .iter()
        .map(|&id| seq.render(vocab, id).unwrap_or_else(|| SPECIAL_TOKENS[UNK].to_string()))
        .collect()
}

/// Checks sku ids are non-empty and unique.
pub fn validate_products(products: &[ProductRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in products {
        if p.sku_id.trim().is_empty() {
            return Err(Error::InvalidArgument("empty sku_id".into()));
        }
        if !seen.insert(p.sku_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate sku_id {:?}", p.sku_id)));
        }
    }
    Ok(())
}

/// Reads a JSONL file; blank lines are skipped, a malformed line fails with
/// its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert!(split_sentences("", true).is_empty());
        assert_eq!(
            split_sentences("Easy to install. Great battery!", true),
            ["Easy to install", "Great battery"]
        );
        assert_eq!(split_sentences("a, b. c", true), ["a", "b", "c"]);
        assert_eq!(split_sentences("a, b. c", false), ["a, b", "c"]);
        assert_eq!(split_sentences("好用。很快！", true), ["好用", "很快"]);
        assert_eq!(split_sentences("3.5 inch screen, 1,000 nits", true), ["3.5 inch screen", "1,000 nits"]);
        assert!(split_sentences(" .. !! ", true).is_empty());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Easy to Install"), ["easy", "to", "install"]);
        assert_eq!(tokenize("好用"), ["好", "用"]);
        assert_eq!(tokenize("4K-display!"), ["4k-display"]);
        assert_eq!(tokenize("usb接口，很好"), ["usb", "接", "口", "很", "好"]);
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(["a a b"], 1, 8000).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"]);
        let v = build_vocab(["a a b"], 2, 8000).unwrap();
        assert!(!v.contains("b") && v.contains("a"));
        let v = build_vocab(["a a b c c c"], 1, 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(4), Some("c"));
        let v = build_vocab(Vec::<String>::new(), 1, 10).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS);
        assert!(build_vocab(["a"], 0, 10).is_err());
        assert!(build_vocab(["a"], 1, 3).is_err());
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = build_vocab(["zeta alpha mid", "mid"], 1, 100).unwrap();
        assert_eq!(&v.tokens()[4..], ["mid", "alpha", "zeta"]);
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(["a b c"], 1, 100).unwrap();
        let s = encode_extended(&v, &["a", "b"]);
        assert_eq!(s.ids, s.extended_ids);
        assert!(s.oov_list.is_empty());

        let s = encode_extended(&v, &["zyxo", "a", "zyxo"]);
        let dv = v.len();
        assert_eq!(s.extended_ids, [dv, v.id("a").unwrap(), dv]);
        assert_eq!(s.ids, [UNK, v.id("a").unwrap(), UNK]);
        assert_eq!(s.oov_list, ["zyxo"]);

        let s = encode_extended::<&str>(&v, &[]);
        assert!(s.ids.is_empty() && s.extended_ids.is_empty() && s.oov_list.is_empty());
    }

    #[test]
    fn target_ids_use_source_oovs() {
        let v = build_vocab(["a b"], 1, 100).unwrap();
        let s = encode_extended(&v, &["q", "a", "r"]);
        assert_eq!(s.target_id(&v, "r"), v.len() + 1);
        assert_eq!(s.target_id(&v, "b"), v.id("b").unwrap());
        assert_eq!(s.target_id(&v, "never"), UNK);
    }

    #[test]
    fn products_defaults_and_validation() {
        let p: ProductRecord = serde_json::from_str(r#"{"sku_id":"1","extra":5}"#).unwrap();
        assert!(p.reviews.is_empty() && p.description.is_empty());
        assert!(validate_products(&[p.clone(), p.clone()]).is_err());
        let mut empty = p.clone();
        empty.sku_id = " ".into();
        assert!(validate_products(&[empty]).is_err());
        assert!(validate_products(&[p]).is_ok());
    }

    #[test]
    fn candidate_toggles() {
        let p = ProductRecord {
            sku_id: "s".into(),
            title: String::new(),
            description: "Solid build. Quiet motor".into(),
            reviews: vec!["Love it".into()],
            ocr_texts: vec!["Waterproof".into()],
            category: String::new(),
        };
        let all = collect_candidates(&p, SourceToggles::default());
        assert_eq!(all.len(), 4);
        let toggles = SourceToggles {
            use_reviews: false,
            use_ocr: false,
            split_commas: true,
        };
        let desc = collect_candidates(&p, toggles);
        assert!(desc.iter().all(|c| c.source == SourceKind::Description));
        assert_eq!(desc.len(), 2);
    }

    #[test]
    fn malformed_jsonl_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"text\":\"a\"}\n\n{oops\n").unwrap();
        let err = read_jsonl::<HumanSellingPoint>(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    fn token_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "zyxo", "qq", "r2", "好"]), 0..20)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn encoded_sequence_invariants(tokens in token_strategy()) {
            let vocab = build_vocab(["a b c 好"], 1, 100).unwrap();
            let seq = encode_extended(&vocab, &tokens);
            prop_assert_eq!(seq.ids.len(), seq.extended_ids.len());
            for (&id, &ext) in seq.ids.iter().zip(&seq.extended_ids) {
                if id != UNK {
                    prop_assert_eq!(id, ext);
                } else {
                    prop_assert!(ext >= vocab.len());
                }
            }
            // extended ids appear contiguously in first-occurrence order
            let mut next = vocab.len();
            for &ext in &seq.extended_ids {
                if ext >= vocab.len() {
                    prop_assert!(ext <= next);
                    if ext == next {
                        next += 1;
                    }
                }
            }
            prop_assert_eq!(next - vocab.len(), seq.oov_list.len());
            prop_assert_eq!(decode_extended(&vocab, &seq), tokens);
        }

        #[test]
        fn build_vocab_is_deterministic(words in prop::collection::vec("[a-e]{1,3}", 0..30)) {
            let text = words.join(" ");
            let a = build_vocab([text.as_str()], 1, 12).unwrap();
            let b = build_vocab([text.as_str()], 1, 12).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
