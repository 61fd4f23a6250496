//! Masked views for pretraining: BERT-style token corruption of the history
//! and of the next item, and the choice of one masked history item.

use std::collections::BTreeSet;

use rand::Rng;

use crate::tokenizer::{EncodedInput, TokenType, MASK_ID, NUM_RESERVED};

/// Share of selected tokens replaced by `[MASK]`.
pub const MASK_SHARE: f64 = 0.8;
/// Share of selected tokens replaced by a random non-reserved token.
pub const RANDOM_SHARE: f64 = 0.1;

/// Which history item the mapping objective reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskedItem {
    /// Item position (1 = most recent) with at least one masked token.
    Item(u32),
    /// No history token was masked.
    Placeholder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    pub input: EncodedInput,
    /// Original token id at every selected position.
    pub labels: Vec<Option<u32>>,
}

impl MaskedView {
    pub fn num_selected(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Everything one pretraining example needs from masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub history: MaskedView,
    pub masked_item: MaskedItem,
    pub next_masked: MaskedView,
    pub next_full: EncodedInput,
}

/// Selects each non-`[CLS]` token independently with probability `rate`;
/// selected tokens become `[MASK]` (80%), a random non-reserved token (10%)
/// or stay unchanged (10%). Only `token_ids` change.
pub fn mask_tokens<R: Rng>(input: &EncodedInput, rate: f64, vocab_size: usize, rng: &mut R) -> MaskedView {
    let mut masked = input.clone();
    let mut labels = vec![None; input.len()];
    for i in 0..input.len() {
        if input.token_types[i] == TokenType::Cls {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        labels[i] = Some(input.token_ids[i]);
        let r: f64 = rng.random();
        if r < MASK_SHARE {
            masked.token_ids[i] = MASK_ID;
        } else if r < MASK_SHARE + RANDOM_SHARE {
            masked.token_ids[i] = rng.random_range(NUM_RESERVED..vocab_size as u32);
        }
    }
    MaskedView { input: masked, labels }
}

/// History masking, default rate 0.15.
pub fn mask_history<R: Rng>(input: &EncodedInput, rate: f64, vocab_size: usize, rng: &mut R) -> MaskedView {
    mask_tokens(input, rate, vocab_size, rng)
}

/// Masking of the single-item view `[CLS], S_{n+1}`, default rate 0.5.
pub fn mask_next_item<R: Rng>(next: &EncodedInput, rate: f64, vocab_size: usize, rng: &mut R) -> MaskedView {
    debug_assert!(next.num_items() <= 1);
    mask_tokens(next, rate, vocab_size, rng)
}

/// Uniform choice among history items that contain a selected token.
pub fn sample_masked_item<R: Rng>(view: &MaskedView, rng: &mut R) -> MaskedItem {
    let candidates: Vec<u32> = view
        .labels
        .iter()
        .zip(&view.input.item_positions)
        .filter(|(l, &p)| l.is_some() && p > 0)
        .map(|(_, &p)| p)
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .collect();
    if candidates.is_empty() {
        return MaskedItem::Placeholder;
    }
    MaskedItem::Item(candidates[rng.random_range(0..candidates.len())])
}
