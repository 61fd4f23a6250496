//! Input representation: `LayerNorm(A[token] + B[position] + C[type] + D[item])`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::EncodedInput;

fn check_bounds(table: &'static str, idx: &[usize], len: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= len) {
        Some(&index) => Err(Error::IndexOutOfBounds { table, index, len }),
        None => Ok(()),
    }
}

/// Records the embedding of `input` in `g` using parameters from `store`.
pub fn embed_in(g: &mut Graph, store: usize, model: &Model, input: &EncodedInput) -> Result<Var> {
    let cfg = &model.config;
    let t = &model.embedding;
    let ids: Vec<usize> = input.token_ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = input.token_positions.iter().map(|&i| i as usize).collect();
    let types: Vec<usize> = input.token_types.iter().map(|&t| t as usize).collect();
    let items: Vec<usize> = input.item_positions.iter().map(|&i| i as usize).collect();
    check_bounds("token", &ids, cfg.vocab_size)?;
    check_bounds("token_position", &positions, cfg.max_tokens)?;
    check_bounds("item_position", &items, cfg.max_items + 1)?;

    let token_table = g.param(store, t.token);
    let mut sum = g.gather(token_table, ids);
    if cfg.use_token_position {
        let table = g.param(store, t.token_position);
        let rows = g.gather(table, positions);
        sum = g.add(sum, rows);
    }
    if cfg.use_token_type {
        let table = g.param(store, t.token_type);
        let rows = g.gather(table, types);
        sum = g.add(sum, rows);
    }
    let item_table = g.param(store, t.item_position);
    let item_rows = g.gather(item_table, items);
    sum = g.add(sum, item_rows);
    let gain = g.param(store, t.norm_gain);
    let bias = g.param(store, t.norm_bias);
    Ok(g.layer_norm(sum, gain, bias, cfg.layer_norm_eps))
}

/// `E_X` for `input`, one row per token.
pub fn embed(input: &EncodedInput, model: &Model, params: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new(&[(params, false)]);
    let e = embed_in(&mut g, 0, model, input)?;
    Ok(g.value(e).clone())
}
