//! Bidirectional pre-norm transformer with sliding-window attention and
//! global attention for flagged tokens (`[CLS]`).

use crate::embedding::embed_in;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::{single_item_input, EncodedInput, EncodedItem};

/// Permitted attention pairs, row-major `n × n`: `allowed[i*n + j]` when
/// token `i` may attend to token `j`. Global tokens see and are seen by
/// everyone; other pairs need `|i − j| ≤ window`.
pub fn attention_mask(global: &[bool], window: usize) -> Vec<bool> {
    let n = global.len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = global[i] || global[j] || i.abs_diff(j) <= window;
        }
    }
    allowed
}

/// Graph nodes produced by one encoder pass.
pub struct EncoderRun {
    /// `len × d` hidden states, row 0 is `h_CLS`.
    pub hidden: Var,
    /// Attention probabilities per layer, then per head.
    pub attention: Vec<Vec<Var>>,
}

/// Records the full encoder (embedding included) in `g`.
pub fn encode_in(g: &mut Graph, store: usize, model: &Model, input: &EncodedInput) -> Result<EncoderRun> {
    let cfg = &model.config;
    let mut x = embed_in(g, store, model, input)?;
    if !g.value(x).is_finite() {
        return Err(Error::NumericFailure { layer: 0 });
    }
    let n = input.len();
    let additive: Vec<f64> = attention_mask(&input.global_attention, cfg.window)
        .into_iter()
        .map(|ok| if ok { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let mask = g.constant(Tensor::from_vec(n, n, additive));
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let eps = cfg.layer_norm_eps;
    let mut attention = Vec::with_capacity(model.layers.len());

    for (l, layer) in model.layers.iter().enumerate() {
        let p = |g: &mut Graph, id| g.param(store, id);
        let (ng, nb) = (p(g, layer.attn_norm_gain), p(g, layer.attn_norm_bias));
        let h = g.layer_norm(x, ng, nb, eps);
        let (wq, bq, wk, bk) = (p(g, layer.wq), p(g, layer.bq), p(g, layer.wk), p(g, layer.bk));
        let (wv, bv, wo, bo) = (p(g, layer.wv), p(g, layer.bv), p(g, layer.wo), p(g, layer.bo));
        let q = g.linear(h, wq, bq);
        let k = g.linear(h, wk, bk);
        let v = g.linear(h, wv, bv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask);
            let pr = g.masked_softmax(scores);
            probs.push(pr);
            heads.push(g.matmul(pr, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn_out = g.linear(merged, wo, bo);
        x = g.add(x, attn_out);

        let (fg, fb) = (p(g, layer.ff_norm_gain), p(g, layer.ff_norm_bias));
        let (w_in, b_in, w_out, b_out) = (p(g, layer.w_in), p(g, layer.b_in), p(g, layer.w_out), p(g, layer.b_out));
        let h = g.layer_norm(x, fg, fb, eps);
        let inner = g.linear(h, w_in, b_in);
        let inner = g.gelu(inner);
        let ff_out = g.linear(inner, w_out, b_out);
        x = g.add(x, ff_out);
        if !g.value(x).is_finite() {
            return Err(Error::NumericFailure { layer: l + 1 });
        }
        attention.push(probs);
    }
    Ok(EncoderRun { hidden: x, attention })
}

/// Hidden states for `input`.
pub fn encode(input: &EncodedInput, model: &Model, params: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new(&[(params, false)]);
    let run = encode_in(&mut g, 0, model, input)?;
    Ok(g.value(run.hidden).clone())
}

/// Attention probabilities of every layer and head.
pub fn attention_weights(input: &EncodedInput, model: &Model, params: &ParamStore) -> Result<Vec<Vec<Tensor>>> {
    let mut g = Graph::new(&[(params, false)]);
    let run = encode_in(&mut g, 0, model, input)?;
    Ok(run.attention.iter().map(|heads| heads.iter().map(|v| g.value(*v).clone()).collect()).collect())
}

/// `h_CLS` of the single-item input `[CLS], S_i`.
pub fn encode_item(item: &EncodedItem, model: &Model, params: &ParamStore) -> Result<Vec<f64>> {
    let hidden = encode(&single_item_input(item), model, params)?;
    Ok(hidden.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::TokenType;
    use rand::Rng;

    fn cfg(layers: usize, window: usize) -> ModelConfig {
        ModelConfig { vocab_size: 20, d_model: 8, n_layers: layers, n_heads: 2, d_ff: 16, window, max_tokens: 64, init_std: 0.5, token_init_std: 0.5, ..Default::default() }
    }

    fn random_item(rng: &mut crate::rng::Rng, n: usize) -> EncodedItem {
        EncodedItem {
            ids: (0..n).map(|_| rng.random_range(4..20)).collect(),
            types: (0..n).map(|i| if i % 3 == 0 { TokenType::Attribute } else { TokenType::Value }).collect(),
        }
    }

    #[test]
    fn mask_enumeration_len5_window1() {
        let m = attention_mask(&[true, false, false, false, false], 1);
        let keys3: Vec<usize> = (0..5).filter(|&j| m[3 * 5 + j]).collect();
        assert_eq!(keys3, vec![0, 2, 3, 4]);
        assert!((0..5).all(|j| m[j]), "CLS sees every token");
        assert!((0..5).all(|i| m[i * 5]), "every token sees CLS");
        assert!(!m[5 + 3]);
    }

    #[test]
    fn zero_layers_is_identity_over_embedding() {
        let (m, p) = Model::init(cfg(0, 2), 4).unwrap();
        let x = single_item_input(&random_item(&mut crate::rng::seeded(1), 5));
        let e = crate::embedding::embed(&x, &m, &p).unwrap();
        assert_eq!(encode(&x, &m, &p).unwrap(), e);
    }

    #[test]
    fn attention_rows_are_distributions_with_exact_zeros() {
        let (m, p) = Model::init(cfg(2, 2), 5).unwrap();
        let mut rng = crate::rng::seeded(2);
        let items: Vec<EncodedItem> = (0..4).map(|_| random_item(&mut rng, 3)).collect();
        let refs: Vec<&EncodedItem> = items.iter().collect();
        let x = crate::tokenizer::assemble_sequence(&refs).unwrap();
        let allowed = attention_mask(&x.global_attention, 2);
        let n = x.len();
        for layer in attention_weights(&x, &m, &p).unwrap() {
            for head in layer {
                for i in 0..n {
                    let row = head.row(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in 0..n {
                        if !allowed[i * n + j] {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_layer_is_local_outside_cls() {
        let (m, p) = Model::init(cfg(1, 1), 6).unwrap();
        let item = random_item(&mut crate::rng::seeded(3), 8);
        let x = single_item_input(&item);
        let mut y = x.clone();
        y.token_ids[8] = if x.token_ids[8] == 4 { 5 } else { 4 };
        let hx = encode(&x, &m, &p).unwrap();
        let hy = encode(&y, &m, &p).unwrap();
        // token 3 sees {0, 2, 3, 4}; token 8 is outside its field at one layer
        assert_eq!(hx.row(3), hy.row(3));
        assert_ne!(hx.row(0), hy.row(0));
        assert_ne!(hx.row(7), hy.row(7));

        // with two layers the change reaches token 3 through [CLS]
        let (m2, p2) = Model::init(cfg(2, 1), 6).unwrap();
        let hx = encode(&x, &m2, &p2).unwrap();
        let hy = encode(&y, &m2, &p2).unwrap();
        assert_ne!(hx.row(3), hy.row(3));
    }

    #[test]
    fn item_encoding_is_deterministic_and_discriminative() {
        let (m, p) = Model::init(cfg(2, 4), 7).unwrap();
        let mut rng = crate::rng::seeded(4);
        for _ in 0..10 {
            let a = random_item(&mut rng, 6);
            let mut b = a.clone();
            let k = rng.random_range(0..6);
            b.ids[k] = if a.ids[k] == 19 { 18 } else { a.ids[k] + 1 };
            let ha = encode_item(&a, &m, &p).unwrap();
            assert_eq!(ha, encode_item(&a, &m, &p).unwrap());
            assert_ne!(ha, encode_item(&b, &m, &p).unwrap());
            let manual = encode(&single_item_input(&a), &m, &p).unwrap();
            assert_eq!(ha, manual.row(0));
        }
    }

    #[test]
    fn non_finite_parameters_report_layer() {
        let (m, mut p) = Model::init(cfg(2, 2), 8).unwrap();
        p.get_mut(m.layers[1].bo).data_mut()[0] = f64::NAN;
        let x = single_item_input(&random_item(&mut crate::rng::seeded(5), 4));
        assert!(matches!(encode(&x, &m, &p), Err(Error::NumericFailure { layer: 2 })));
    }
}
