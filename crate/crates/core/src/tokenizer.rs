//! Whitespace/punctuation tokenizer, vocabulary and model-input assembly.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_item, Corpus, ItemRecord, Segment};
use crate::error::{Error, Result};

pub const CLS_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_RESERVED: u32 = 4;
pub const RESERVED: [&str; 4] = ["[CLS]", "[MASK]", "[PAD]", "[UNK]"];

/// Token budget per attribute (key and value together).
pub const MAX_ATTRIBUTE_TOKENS: usize = 32;
/// Token budget per input, including `[CLS]`.
pub const MAX_SEQUENCE_TOKENS: usize = 1024;
/// Most recent items kept from a history.
pub const MAX_ITEMS: usize = 50;

/// Lowercases, splits on whitespace and peels leading/trailing ASCII
/// punctuation off each word as separate one-character tokens. Inner
/// punctuation (`usb-c`) stays.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    min_count: usize,
    corpus_hash: String,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: BTreeMap<String, u32>,
    min_count: usize,
    corpus_hash: String,
    hash: String,
}

impl Vocabulary {
    /// Counts tokens over every catalog item sentence; ids follow descending
    /// count, ties broken lexicographically.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Self> {
        if corpus.items.is_empty() {
            return Err(Error::Empty("corpus has no items"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for item in &corpus.items {
            for piece in flatten_item(item)? {
                for tok in tokenize_text(&piece.text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        Ok(Self::from_counts(counts, min_count, corpus.content_hash()))
    }

    pub fn from_counts(counts: HashMap<String, usize>, min_count: usize, corpus_hash: String) -> Self {
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, min_count, corpus_hash)
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize, corpus_hash: String) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, ids, min_count, corpus_hash }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// SHA-256 over the id-ordered token list. Checkpoints record it.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        crate::corpus::hex_digest(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            reserved: RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i as u32)).collect(),
            min_count: self.min_count,
            corpus_hash: self.corpus_hash.clone(),
            hash: self.hash(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let ok_reserved = file.tokens.len() >= NUM_RESERVED as usize
            && RESERVED.iter().enumerate().all(|(i, r)| file.tokens[i] == *r);
        if !ok_reserved {
            return Err(Error::Config(format!("{}: reserved tokens missing or misplaced", path.display())));
        }
        let vocab = Self::from_tokens(file.tokens, file.min_count, file.corpus_hash);
        if vocab.hash() != file.hash {
            return Err(Error::VocabMismatch { expected: file.hash, found: vocab.hash() });
        }
        Ok(vocab)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenType {
    Cls = 0,
    Attribute = 1,
    Value = 2,
}

impl From<Segment> for TokenType {
    fn from(s: Segment) -> Self {
        match s {
            Segment::Attribute => TokenType::Attribute,
            Segment::Value => TokenType::Value,
        }
    }
}

/// Token ids and types of one item sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedItem {
    pub ids: Vec<u32>,
    pub types: Vec<TokenType>,
}

impl EncodedItem {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A fully indexed model input: `[CLS]` followed by item sentences, most
/// recent first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub token_positions: Vec<u32>,
    pub token_types: Vec<TokenType>,
    /// 0 for `[CLS]`, `k` for the k-th most recent item.
    pub item_positions: Vec<u32>,
    pub global_attention: Vec<bool>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_items(&self) -> usize {
        self.item_positions.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Encodes one item. Each attribute keeps at most [`MAX_ATTRIBUTE_TOKENS`]
/// tokens, cutting value tokens from the right first.
pub fn encode_item(item: &ItemRecord, vocab: &Vocabulary) -> Result<EncodedItem> {
    let mut ids = Vec::new();
    let mut types = Vec::new();
    for (key, value) in &item.attributes {
        if key.trim().is_empty() || value.trim().is_empty() {
            item.validate()?;
        }
        let mut k: Vec<u32> = tokenize_text(key).iter().map(|t| vocab.id(t)).collect();
        let mut v: Vec<u32> = tokenize_text(value).iter().map(|t| vocab.id(t)).collect();
        k.truncate(MAX_ATTRIBUTE_TOKENS);
        v.truncate(MAX_ATTRIBUTE_TOKENS - k.len());
        types.extend(std::iter::repeat_n(TokenType::Attribute, k.len()));
        types.extend(std::iter::repeat_n(TokenType::Value, v.len()));
        ids.extend(k);
        ids.extend(v);
    }
    if item.attributes.is_empty() {
        item.validate()?;
    }
    if ids.is_empty() {
        return Err(Error::InvalidItem { item_id: item.item_id.clone(), reason: "no tokens survive encoding".into() });
    }
    Ok(EncodedItem { ids, types })
}

/// Builds `[CLS], S_n, …, S_1` from items given oldest first. Keeps the
/// [`MAX_ITEMS`] most recent items, then fits [`MAX_SEQUENCE_TOKENS`] by
/// dropping older items and cutting the tail of the oldest survivor.
pub fn assemble_sequence(history: &[&EncodedItem]) -> Result<EncodedInput> {
    if history.is_empty() {
        return Err(Error::Empty("history"));
    }
    let mut input = EncodedInput {
        token_ids: vec![CLS_ID],
        token_positions: vec![0],
        token_types: vec![TokenType::Cls],
        item_positions: vec![0],
        global_attention: vec![true],
    };
    for (k, item) in history.iter().rev().take(MAX_ITEMS).enumerate() {
        let room = MAX_SEQUENCE_TOKENS - input.len();
        if room == 0 {
            break;
        }
        let take = item.len().min(room);
        for t in 0..take {
            input.token_positions.push(input.token_ids.len() as u32);
            input.token_ids.push(item.ids[t]);
            input.token_types.push(item.types[t]);
            input.item_positions.push(k as u32 + 1);
            input.global_attention.push(false);
        }
    }
    Ok(input)
}

pub fn encode_sequence(history: &[ItemRecord], vocab: &Vocabulary) -> Result<EncodedInput> {
    let start = history.len().saturating_sub(MAX_ITEMS);
    let encoded = history[start..].iter().map(|i| encode_item(i, vocab)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EncodedItem> = encoded.iter().collect();
    assemble_sequence(&refs)
}

/// `[CLS], S_i` for a single item.
pub fn single_item_input(item: &EncodedItem) -> EncodedInput {
    assemble_sequence(&[item]).expect("one item is a non-empty history")
}
