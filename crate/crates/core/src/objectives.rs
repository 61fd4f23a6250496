//! Predictor heads and training losses.
//!
//! Each loss is recorded on a [`Graph`] for training; the plain functions at
//! the bottom evaluate the same graph code on constant inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskedItem;
use crate::model::{Model, PredictorParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `W2 · GELU(W1 · (left ⊕ right) + b1) + b2`
pub fn predictor_in(g: &mut Graph, store: usize, p: &PredictorParams, left: Var, right: Var) -> Var {
    let x = g.concat_cols(&[left, right]);
    let (w1, b1, w2, b2) = (g.param(store, p.w1), g.param(store, p.b1), g.param(store, p.w2), g.param(store, p.b2));
    let h = g.linear(x, w1, b1);
    let h = g.gelu(h);
    g.linear(h, w2, b2)
}

/// `ĥ_n = FFN1(h_CLS ⊕ D_n)`, with the placeholder vector standing in for
/// `D_n` when no history item was masked.
pub fn predict_history_in(g: &mut Graph, store: usize, model: &Model, h_cls: Var, item: MaskedItem) -> Var {
    let slot = match item {
        MaskedItem::Item(pos) => {
            let table = g.param(store, model.embedding.item_position);
            g.gather(table, vec![pos as usize])
        }
        MaskedItem::Placeholder => g.param(store, model.placeholder),
    };
    predictor_in(g, store, &model.history_predictor, h_cls, slot)
}

/// `ĥ_{n+1} = FFN2(h_CLS ⊕ h_{n+1,M})`
pub fn predict_next_in(g: &mut Graph, store: usize, model: &Model, h_cls: Var, h_next_masked: Var) -> Var {
    predictor_in(g, store, &model.next_predictor, h_cls, h_next_masked)
}

/// `‖h_n − ĥ_n‖² + ‖h_{n+1} − ĥ_{n+1}‖²`; the history pair is absent when
/// the placeholder was used.
pub fn mapping_loss_in(g: &mut Graph, history: Option<(Var, Var)>, predicted_next: Var, next: Var) -> Var {
    let diff = g.sub(next, predicted_next);
    let next_term = g.sum_squares(diff);
    match history {
        Some((predicted, target)) => {
            let diff = g.sub(target, predicted);
            let hist_term = g.sum_squares(diff);
            g.sum(&[hist_term, next_term])
        }
        None => next_term,
    }
}

/// Masked-token logits `H[positions] · Aᵀ + bias` with the head tied to the
/// token table.
pub fn mlm_logits_in(g: &mut Graph, store: usize, model: &Model, hidden: Var, positions: Vec<usize>) -> Var {
    let rows = g.gather(hidden, positions);
    let table = g.param(store, model.embedding.token);
    let bias = g.param(store, model.mlm_bias);
    let logits = g.matmul_nt(rows, table);
    g.add_row(logits, bias)
}

/// `cos(qᵢ, kⱼ) / τ` for every query row and key row.
pub fn cosine_logits_in(g: &mut Graph, queries: Var, keys: Var, temperature: f64) -> Result<Var> {
    let q = g.l2_normalize_rows(queries).ok_or(Error::ZeroNorm("query"))?;
    let k = g.l2_normalize_rows(keys).ok_or(Error::ZeroNorm("key"))?;
    let s = g.matmul_nt(q, k);
    Ok(g.scale(s, 1.0 / temperature))
}

/// In-batch sequence-item contrastive loss: row `r`'s positive is target
/// `r`, all other targets in the batch are negatives.
pub fn seq_item_contrastive_in(g: &mut Graph, h_cls: Var, targets: Var, temperature: f64) -> Result<Var> {
    let logits = cosine_logits_in(g, h_cls, targets, temperature)?;
    let b = g.value(h_cls).rows();
    Ok(g.cross_entropy(logits, (0..b).map(Some).collect()))
}

/// `L_S-I + λ1·L_MLM + λ2·L_map`, skipping absent terms.
pub fn pretrain_loss_in(
    g: &mut Graph,
    contrastive: Option<Var>,
    mlm: Option<Var>,
    mapping: Option<Var>,
    lambda_mlm: f64,
    lambda_map: f64,
) -> Var {
    let mut parts = Vec::new();
    if let Some(c) = contrastive {
        parts.push(c);
    }
    if let Some(m) = mlm {
        parts.push(g.scale(m, lambda_mlm));
    }
    if let Some(m) = mapping {
        parts.push(g.scale(m, lambda_map));
    }
    if parts.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    g.sum(&parts)
}

/// Mean `−ln σ(pos − neg)` over paired score rows.
pub fn bpr_loss_in(g: &mut Graph, pos: Var, neg: Var) -> Var {
    let diff = g.sub(pos, neg);
    let l = g.neg_log_sigmoid(diff);
    g.mean(l)
}

/// Component values of one pretraining loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub map: f64,
    pub mlm: f64,
    pub seq_item: f64,
    pub total: f64,
    pub lambda_mlm: f64,
    pub lambda_map: f64,
    pub temperature: f64,
}

fn row(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Tensor::row_vector(v.to_vec()))
}

/// Plain-value form of [`predict_history_in`].
pub fn predict_history_repr(model: &Model, params: &ParamStore, h_cls: &[f64], item: MaskedItem) -> Vec<f64> {
    let mut g = Graph::new(&[(params, false)]);
    let h = row(&mut g, h_cls);
    let out = predict_history_in(&mut g, 0, model, h, item);
    g.value(out).data().to_vec()
}

/// Plain-value form of [`predict_next_in`].
pub fn predict_next_repr(model: &Model, params: &ParamStore, h_cls: &[f64], h_next_masked: &[f64]) -> Vec<f64> {
    let mut g = Graph::new(&[(params, false)]);
    let h = row(&mut g, h_cls);
    let m = row(&mut g, h_next_masked);
    let out = predict_next_in(&mut g, 0, model, h, m);
    g.value(out).data().to_vec()
}

/// `history` is `(ĥ_n, h_n)`, `None` for the placeholder case.
pub fn mapping_loss(history: Option<(&[f64], &[f64])>, predicted_next: &[f64], next: &[f64]) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&[(&store, false)]);
    let hist = history.map(|(p, t)| (row(&mut g, p), row(&mut g, t)));
    let pn = row(&mut g, predicted_next);
    let n = row(&mut g, next);
    let l = mapping_loss_in(&mut g, hist, pn, n);
    g.value(l).item()
}

/// Mean cross-entropy over labeled rows of `logits`; 0 with no labels.
pub fn mlm_loss(logits: &Tensor, labels: &[Option<u32>]) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&[(&store, false)]);
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, labels.iter().map(|l| l.map(|t| t as usize)).collect());
    g.value(l).item()
}

pub fn seq_item_contrastive_loss(h_cls: &Tensor, targets: &Tensor, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&[(&store, false)]);
    let h = g.constant(h_cls.clone());
    let t = g.constant(targets.clone());
    let l = seq_item_contrastive_in(&mut g, h, t, temperature)?;
    Ok(g.value(l).item())
}

pub fn pretrain_loss(seq_item: f64, mlm: f64, map: f64, lambda_mlm: f64, lambda_map: f64) -> f64 {
    seq_item + lambda_mlm * mlm + lambda_map * map
}

/// `−log softmax_i(cos(h_CLS, I_i)/τ)` at `gt`.
pub fn finetune_loss(h_cls: &[f64], items: &Tensor, gt: usize, temperature: f64) -> Result<f64> {
    if gt >= items.rows() {
        return Err(Error::Config(format!("ground truth {gt} outside catalog of {}", items.rows())));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&[(&store, false)]);
    let h = row(&mut g, h_cls);
    let keys = g.constant(items.clone());
    let logits = cosine_logits_in(&mut g, h, keys, temperature)?;
    let l = g.cross_entropy(logits, vec![Some(gt)]);
    Ok(g.value(l).item())
}

/// Mean `−ln σ(pos − neg)`.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len());
    let store = ParamStore::new();
    let mut g = Graph::new(&[(&store, false)]);
    let p = row(&mut g, pos);
    let n = row(&mut g, neg);
    let l = bpr_loss_in(&mut g, p, n);
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(d: usize) -> (Model, ParamStore) {
        let cfg = ModelConfig { vocab_size: 10, d_model: d, n_layers: 0, n_heads: 1, d_ff: 4, window: 1, max_tokens: 8, ..Default::default() };
        Model::init(cfg, 0).unwrap()
    }

    /// Sets a predictor to `x ↦ M·x` for a `2d×d` selection matrix by making
    /// the hidden layer a large-shift GELU (≈ identity) and the output layer
    /// its inverse shift.
    fn set_linear_predictor(params: &mut ParamStore, p: &PredictorParams, select: &Tensor, shift: f64) {
        *params.get_mut(p.w1) = select.clone();
        params.get_mut(p.b1).data_mut().fill(shift);
        let d = select.cols();
        let mut eye = Tensor::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        *params.get_mut(p.w2) = eye;
        params.get_mut(p.b2).data_mut().fill(-shift);
    }

    fn first_half(d: usize) -> Tensor {
        let mut t = Tensor::zeros(2 * d, d);
        for i in 0..d {
            t.set(i, i, 1.0);
        }
        t
    }

    fn second_half(d: usize) -> Tensor {
        let mut t = Tensor::zeros(2 * d, d);
        for i in 0..d {
            t.set(d + i, i, 1.0);
        }
        t
    }

    #[test]
    fn history_predictor_can_pass_h_cls_through() {
        let (m, mut p) = tiny(4);
        set_linear_predictor(&mut p, &m.history_predictor, &first_half(4), 50.0);
        let h = [0.3, -0.2, 0.9, 0.1];
        let out = predict_history_repr(&m, &p, &h, MaskedItem::Item(2));
        for (a, b) in out.iter().zip(h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn placeholder_matches_zero_item_row() {
        let (m, mut p) = tiny(4);
        p.get_mut(m.embedding.item_position).row_mut(3).fill(0.0);
        let h = [0.5, 0.1, -0.4, 0.2];
        let a = predict_history_repr(&m, &p, &h, MaskedItem::Placeholder);
        let b = predict_history_repr(&m, &p, &h, MaskedItem::Item(3));
        assert_eq!(a, b);
    }

    #[test]
    fn history_predictor_hand_matrix_product() {
        // One effective linear layer with W (4 → 2) set by hand.
        let (m, mut p) = tiny(2);
        p.get_mut(m.embedding.item_position).row_mut(1).copy_from_slice(&[0.0, 1.0]);
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        set_linear_predictor(&mut p, &m.history_predictor, &w, 60.0);
        let out = predict_history_repr(&m, &p, &[1.0, 0.0], MaskedItem::Item(1));
        // [1, 0, 0, 1] · W = [1 + 7, 2 + 8]
        assert!((out[0] - 8.0).abs() < 1e-9 && (out[1] - 10.0).abs() < 1e-9, "{out:?}");
    }

    #[test]
    fn next_predictor_cases() {
        let (m, mut p) = tiny(4);
        let hm = [0.7, -0.1, 0.0, 0.4];
        let saved = p.clone();
        set_linear_predictor(&mut p, &m.next_predictor, &second_half(4), 50.0);
        let out = predict_next_repr(&m, &p, &[1.0, 2.0, 3.0, 4.0], &hm);
        for (a, b) in out.iter().zip(hm) {
            assert!((a - b).abs() < 1e-9);
        }
        // zero inputs and zero biases give zero output
        let out = predict_next_repr(&m, &saved, &[0.0; 4], &[0.0; 4]);
        assert!(out.iter().all(|&v| v == 0.0));
        // brute-force two-layer forward pass
        let h_cls = [0.2, -0.5, 0.1, 0.3];
        let out = predict_next_repr(&m, &saved, &h_cls, &hm);
        let x: Vec<f64> = h_cls.iter().chain(&hm).copied().collect();
        let (w1, b1) = (saved.get(m.next_predictor.w1), saved.get(m.next_predictor.b1));
        let (w2, b2) = (saved.get(m.next_predictor.w2), saved.get(m.next_predictor.b2));
        let mut hidden = vec![0.0; 4];
        for j in 0..4 {
            let mut s = b1.data()[j];
            for i in 0..8 {
                s += x[i] * w1.get(i, j);
            }
            hidden[j] = 0.5 * s * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (s + 0.044715 * s.powi(3))).tanh());
        }
        for k in 0..4 {
            let mut s = b2.data()[k];
            for j in 0..4 {
                s += hidden[j] * w2.get(j, k);
            }
            assert!((out[k] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn mapping_loss_examples() {
        assert_eq!(mapping_loss(Some((&[1.0, 2.0], &[1.0, 2.0])), &[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert_eq!(mapping_loss(Some((&[0.0, 0.0], &[1.0, 1.0])), &[5.0, 5.0], &[5.0, 5.0]), 2.0);
        assert_eq!(mapping_loss(None, &[0.0, 0.0], &[3.0, 4.0]), 25.0);
    }

    #[test]
    fn mlm_loss_examples() {
        let perfect = Tensor::from_rows(&[vec![0.0, 1e4, 0.0, 0.0]]);
        assert!(mlm_loss(&perfect, &[Some(1)]).abs() < 1e-12);
        let uniform = Tensor::zeros(3, 4);
        let l = mlm_loss(&uniform, &[Some(0), None, Some(3)]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(mlm_loss(&uniform, &[None, None, None]), 0.0);
    }

    #[test]
    fn contrastive_examples() {
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(seq_item_contrastive_loss(&one, &Tensor::from_rows(&[vec![-3.0, 1.0]]), 0.05).unwrap(), 0.0);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = seq_item_contrastive_loss(&eye, &eye, 0.05).unwrap();
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-15);
        assert!((l - 2.06e-9).abs() < 1e-11);
        let same = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!((seq_item_contrastive_loss(&same, &same, 0.05).unwrap() - 2f64.ln()).abs() < 1e-12);
        let zero = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(matches!(seq_item_contrastive_loss(&zero, &same, 0.05), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let h = Tensor::from_rows(&[vec![0.3, -1.0, 0.2], vec![0.5, 0.5, -0.1], vec![-0.7, 0.1, 0.9]]);
        let t = Tensor::from_rows(&[vec![0.1, -0.8, 0.4], vec![0.9, 0.2, 0.0], vec![-0.3, 0.3, 0.6]]);
        let base = seq_item_contrastive_loss(&h, &t, 0.1).unwrap();
        let mut scaled = t.clone();
        for v in scaled.row_mut(1) {
            *v *= 17.5;
        }
        assert!((seq_item_contrastive_loss(&h, &scaled, 0.1).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn pretrain_combination() {
        assert!((pretrain_loss(1.0, 2.0, 3.0, 0.1, 0.1) - 1.5).abs() < 1e-15);
        assert_eq!(pretrain_loss(0.7, 2.0, 3.0, 0.0, 0.0), 0.7);
        assert_eq!(pretrain_loss(0.0, 0.0, 0.0, 0.1, 0.1), 0.0);
    }

    #[test]
    fn finetune_examples() {
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]);
        assert_eq!(finetune_loss(&[0.2, 0.4], &one, 0, 0.05).unwrap(), 0.0);
        let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((finetune_loss(&[1.0, 1.0], &two, 1, 0.05).unwrap() - 2f64.ln()).abs() < 1e-12);
        let three = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let l = finetune_loss(&[1.0, 0.0], &three, 0, 0.05).unwrap();
        let expected = -(20f64 - (20f64.exp() + 2.0).ln());
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 4.1e-9).abs() < 1e-10);
        assert!(finetune_loss(&[1.0, 0.0], &three, 3, 0.05).is_err());
    }

    #[test]
    fn bpr_examples() {
        assert!((bpr_loss(&[0.3], &[0.3]) - 2f64.ln()).abs() < 1e-15);
        assert!((bpr_loss(&[20.0], &[0.0]) - 2.06e-9).abs() < 1e-11);
        assert!((bpr_loss(&[0.0], &[20.0]) - 20.0).abs() < 1e-8);
    }
}
