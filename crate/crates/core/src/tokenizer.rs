//! Word-level vocabulary and BERT-style input packing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub const DEFAULT_MAX_LEN: usize = 64;

/// Lowercases and splits on whitespace; every punctuation or symbol
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse { line: i + 1, message: format!("duplicate token {t:?}") });
            }
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse { line: i + 1, message: format!("expected special token {s}") });
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Only the five special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()).expect("specials are valid")
    }

    /// Keeps the `max_size − 5` most frequent tokens seen at least `min_freq`
    /// times, ordered by descending count then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: usize) -> Result<Self> {
        if max_size < NUM_SPECIAL + 1 {
            return Err(Error::Config(format!("vocab max_size must be at least 6, got {max_size}")));
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be positive".into()));
        }
        if corpus.is_empty() {
            return Err(Error::EmptyDataset("vocabulary corpus has no documents".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            for tok in tokenize(doc.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIAL);

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Index(format!("token id {id} out of range for vocab of {}", self.len())))
            })
            .collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl EncodedSequence {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Number of leading non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().rposition(|&m| m == 1).map_or(0, |i| i + 1)
    }

    /// Copy with trailing padding removed.
    pub fn trimmed(&self) -> Self {
        let n = self.real_len().max(1);
        Self {
            token_ids: self.token_ids[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
            positions: self.positions[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
        }
    }
}

/// Packs `[CLS] A [SEP] (B [SEP])` and pads to `max_len`. When the pair is
/// too long, tokens are dropped from the end of the longer segment, B on
/// ties, until it fits.
pub fn encode_pair(text_a: &str, text_b: Option<&str>, vocab: &Vocab, max_len: usize) -> Result<EncodedSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut a: Vec<usize> = tokenize(text_a).iter().map(|t| vocab.id(t)).collect();
    let mut b: Option<Vec<usize>> = text_b.map(|t| tokenize(t).iter().map(|t| vocab.id(t)).collect());
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len - specials;
    loop {
        let b_len = b.as_ref().map_or(0, Vec::len);
        if a.len() + b_len <= budget {
            break;
        }
        match &mut b {
            Some(b) if b.len() >= a.len() => {
                b.pop();
            }
            _ => {
                a.pop();
            }
        }
    }

    let mut token_ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    token_ids.extend(&a);
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 0);
    if let Some(b) = &b {
        token_ids.extend(b);
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), 1);
    }
    let real = token_ids.len();
    token_ids.resize(max_len, PAD);
    segment_ids.resize(max_len, 0);
    let attention_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(EncodedSequence { token_ids, segment_ids, positions: (0..max_len).collect(), attention_mask })
}
