//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

#![allow(clippy::needless_range_loop)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use jepa4rec::checkpoint::Checkpoint;
use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, Corpus, SynthSpec};
use jepa4rec::encoder::{attention_weights, encode};
use jepa4rec::evaluator::{compute_metrics, evaluate, reveal_study, robustness_study, Mode, PipelineConfig, Split};
use jepa4rec::masking::{mask_history, mask_next_item};
use jepa4rec::model::{Model, ModelConfig};
use jepa4rec::objectives::{bpr_loss, finetune_loss, mapping_loss, mlm_loss, pretrain_loss, seq_item_contrastive_loss};
use jepa4rec::params::{ema_update, ParamStore};
use jepa4rec::rng;
use jepa4rec::tensor::Tensor;
use jepa4rec::tokenizer::{assemble_sequence, single_item_input, EncodedInput, EncodedItem, TokenType, Vocabulary, MASK_ID, NUM_RESERVED};
use jepa4rec::trainer::{encode_items, finetune, pretrain, pretrain_batch, PretrainExample};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn random_item(rng: &mut impl Rng, vocab: u32, len: usize) -> EncodedItem {
    EncodedItem {
        ids: (0..len).map(|_| rng.random_range(NUM_RESERVED..vocab)).collect(),
        types: (0..len).map(|i| if i % 3 == 0 { TokenType::Attribute } else { TokenType::Value }).collect(),
    }
}

// --- 1 -------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        window: 3,
        max_tokens: 40,
        max_items: 6,
        init_std: 0.3,
        token_init_std: 0.3,
        ..ModelConfig::default()
    };
    let (model, mut context) = Model::init(cfg, 11).map_err(|e| e.to_string())?;
    // heads start at zero or near zero; randomize so every path carries signal
    let mut r = rng::seeded(12);
    for id in model.head_params() {
        for x in context.get_mut(id).data_mut() {
            *x = r.random_range(-0.5..0.5);
        }
    }
    let mut target = context.clone();
    for id in target.ids().collect::<Vec<_>>() {
        for x in target.get_mut(id).data_mut() {
            *x += r.random_range(-0.05..0.05);
        }
    }
    let items: Vec<EncodedItem> = (0..8)
        .map(|_| {
            let len = r.random_range(2..5);
            random_item(&mut r, 20, len)
        })
        .collect();
    let train = TrainConfig { history_mask_rate: 0.3, ..TrainConfig::pretrain() };

    // keep only examples where every component is active
    let mut examples = Vec::new();
    let mut tries = 0u64;
    while examples.len() < 3 {
        tries += 1;
        let start_item = (tries as usize) % 5;
        let history: Vec<usize> = (start_item..start_item + 3).collect();
        let ex = PretrainExample::new(&items, &history, 7, &train, 20, &mut rng::derive(13, &[tries])).map_err(|e| e.to_string())?;
        if ex.masked_item_index.is_some() && ex.next_masked.num_selected() > 0 {
            examples.push(ex);
        }
    }

    let out = pretrain_batch(&model, &context, &target, &items, &examples, &train, true).map_err(|e| e.to_string())?;
    ensure!(out.losses.mlm > 0.0 && out.losses.map > 0.0 && out.losses.seq_item > 0.0, "inactive component {:?}", out.losses);
    ensure!(
        out.target_grads.iter().all(|g| g.as_ref().is_none_or(|t| t.data().iter().all(|&x| x == 0.0))),
        "target network received a gradient"
    );

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    let ids: Vec<_> = context.ids().collect();
    for id in ids {
        for k in 0..context.get(id).len() {
            let orig = context.get(id).data()[k];
            context.get_mut(id).data_mut()[k] = orig + h;
            let plus = pretrain_batch(&model, &context, &target, &items, &examples, &train, false).map_err(|e| e.to_string())?.losses.total;
            context.get_mut(id).data_mut()[k] = orig - h;
            let minus = pretrain_batch(&model, &context, &target, &items, &examples, &train, false).map_err(|e| e.to_string())?.losses.total;
            context.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = out.context_grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{k}] analytic {analytic:e} numeric {numeric:e}", context.name(id));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-4, "max relative error {worst:e} at {worst_name}");
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{checked} scalars, max rel err {worst:.2e}, {secs:.1}s"))
}

// --- 2 -------------------------------------------------------------------

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn neg_log_softmax(logits: &[f64], gt: usize) -> f64 {
    let mut z = 0.0;
    for &l in logits {
        z += l.exp();
    }
    z.ln() - logits[gt]
}

fn oracle_seq_item(h: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..h.len() {
        let logits: Vec<f64> = t.iter().map(|tj| cos(&h[i], tj) / tau).collect();
        total += neg_log_softmax(&logits, i);
    }
    total / h.len() as f64
}

fn oracle_finetune(h: &[f64], items: &[Vec<f64>], gt: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = items.iter().map(|it| cos(h, it) / tau).collect();
    neg_log_softmax(&logits, gt)
}

fn oracle_mlm(logits: &[Vec<f64>], labels: &[Option<u32>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, l) in logits.iter().zip(labels) {
        if let Some(l) = l {
            total += neg_log_softmax(row, *l as usize);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn oracle_map(hist: Option<(&[f64], &[f64])>, pn: &[f64], n: &[f64]) -> f64 {
    let mut s = 0.0;
    if let Some((p, t)) = hist {
        for i in 0..p.len() {
            s += (p[i] - t[i]) * (p[i] - t[i]);
        }
    }
    for i in 0..pn.len() {
        s += (pn[i] - n[i]) * (pn[i] - n[i]);
    }
    s
}

fn oracle_bpr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pos.len() {
        s += (1.0 + (-(pos[i] - neg[i])).exp()).ln();
    }
    s / pos.len() as f64
}

fn rows(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn loss_oracles() -> Outcome {
    let mut r = rng::seeded(21);
    let tol = 1e-8;
    let mut worst: f64 = 0.0;
    let mut track = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure!(err < tol, "{name}: {got} vs oracle {want}");
        Ok(())
    };
    for _ in 0..100 {
        let b = r.random_range(1..=8);
        let d = r.random_range(2..=6);
        let tau = r.random_range(0.05..1.0);
        let h = rows(&mut r, b, d);
        let t = rows(&mut r, b, d);
        let got = seq_item_contrastive_loss(&Tensor::from_rows(&h), &Tensor::from_rows(&t), tau).map_err(|e| e.to_string())?;
        track("seq-item", got, oracle_seq_item(&h, &t, tau))?;

        let n_items = r.random_range(1..=100);
        let catalog = rows(&mut r, n_items, d);
        let q = rows(&mut r, 1, d).remove(0);
        let gt = r.random_range(0..n_items);
        let got = finetune_loss(&q, &Tensor::from_rows(&catalog), gt, tau).map_err(|e| e.to_string())?;
        track("finetune", got, oracle_finetune(&q, &catalog, gt, tau))?;

        let v = r.random_range(2..=12);
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..v).map(|_| r.random_range(-4.0..4.0)).collect()).collect();
        let labels: Vec<Option<u32>> = (0..b).map(|_| r.random_bool(0.6).then(|| r.random_range(0..v as u32))).collect();
        track("mlm", mlm_loss(&Tensor::from_rows(&logits), &labels), oracle_mlm(&logits, &labels))?;

        let p = rows(&mut r, 4, d);
        let hist = r.random_bool(0.5).then(|| (p[0].as_slice(), p[1].as_slice()));
        track("map", mapping_loss(hist, &p[2], &p[3]), oracle_map(hist, &p[2], &p[3]))?;

        let pos: Vec<f64> = (0..b).map(|_| r.random_range(-10.0..10.0)).collect();
        let neg: Vec<f64> = (0..b).map(|_| r.random_range(-10.0..10.0)).collect();
        track("bpr", bpr_loss(&pos, &neg), oracle_bpr(&pos, &neg))?;
    }

    // boundary values
    let ln2 = 2f64.ln();
    let one = Tensor::from_rows(&[vec![0.3, -0.2]]);
    ensure!(seq_item_contrastive_loss(&one, &one, 0.05).map_err(|e| e.to_string())? == 0.0, "B=1 is not 0");
    let ortho = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let v = seq_item_contrastive_loss(&ortho, &ortho, 0.05).map_err(|e| e.to_string())?;
    ensure!((v - (-20f64).exp().ln_1p()).abs() < 1e-12 && (v - 2.06e-9).abs() < 5e-12, "orthonormal pairs give {v}");
    let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
    let v = seq_item_contrastive_loss(&same, &same, 0.05).map_err(|e| e.to_string())?;
    ensure!((v - ln2).abs() < 1e-12, "identical rows give {v}");

    ensure!(finetune_loss(&[1.0, 0.0], &one, 0, 0.05).map_err(|e| e.to_string())? == 0.0, "|I|=1 is not 0");
    let v = finetune_loss(&[1.0, 0.0], &Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]), 1, 0.05).map_err(|e| e.to_string())?;
    ensure!((v - ln2).abs() < 1e-12, "equal similarities give {v}");
    let three = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let v = finetune_loss(&[1.0, 0.0, 0.0], &three, 0, 0.05).map_err(|e| e.to_string())?;
    let want = (2.0 * (-20f64).exp()).ln_1p();
    ensure!((v - want).abs() < 1e-12 && (v - 4.1e-9).abs() < 5e-11, "cosines (1,0,0) give {v}");

    ensure!(mlm_loss(&Tensor::from_rows(&[vec![1000.0, 0.0, 0.0]]), &[Some(0)]) == 0.0, "certain MLM is not 0");
    let v = mlm_loss(&Tensor::from_rows(&[vec![0.0; 4]]), &[Some(2)]);
    ensure!((v - 4f64.ln()).abs() < 1e-12, "uniform MLM gives {v}");
    ensure!(mlm_loss(&Tensor::from_rows(&[vec![0.5, 0.1]]), &[None]) == 0.0, "no labels is not 0");

    ensure!(mapping_loss(Some((&[1.0, 2.0], &[1.0, 2.0])), &[3.0], &[3.0]) == 0.0, "perfect map is not 0");
    ensure!(mapping_loss(Some((&[0.0, 0.0], &[1.0, 1.0])), &[5.0], &[5.0]) == 2.0, "map [1,1] is not 2");
    ensure!(mapping_loss(None, &[0.0, 0.0], &[3.0, 4.0]) == 25.0, "placeholder map is not 25");

    ensure!((pretrain_loss(1.0, 2.0, 3.0, 0.1, 0.1) - 1.5).abs() < 1e-12, "L_PT arithmetic");
    ensure!(pretrain_loss(0.7, 2.0, 3.0, 0.0, 0.0) == 0.7, "zero lambdas");
    ensure!(pretrain_loss(0.0, 0.0, 0.0, 0.1, 0.1) == 0.0, "zero components");

    ensure!((bpr_loss(&[0.4], &[0.4]) - ln2).abs() < 1e-15, "pos = neg");
    let v = bpr_loss(&[20.0], &[0.0]);
    ensure!((v - 2.06e-9).abs() < 1e-11, "margin 20 gives {v}");
    let v = bpr_loss(&[0.0], &[20.0]);
    ensure!((v - 20.0).abs() < 1e-8, "margin -20 gives {v}");
    Ok(format!("500 random cases, max abs err {worst:.1e}, boundary values exact"))
}

// --- 3 -------------------------------------------------------------------

fn ema_law() -> Outcome {
    let m: f64 = 0.9;
    let mut context = ParamStore::new();
    let id = context.register("probe", Tensor::scalar(0.0));
    let mut target = ParamStore::new();
    target.register("probe", Tensor::scalar(1.0));
    let thetas = [0.0, 0.0, 0.0];
    for &t in &thetas {
        context.get_mut(id).data_mut()[0] = t;
        ema_update(&context, &mut target, m).map_err(|e| e.to_string())?;
    }
    let got = target.get(id).item();
    ensure!((got - 0.729).abs() < 1e-10, "k=3 m=0.9 gives {got}");

    let mut r = rng::seeded(31);
    for _ in 0..50 {
        let k = r.random_range(1..12);
        let m: f64 = r.random_range(0.0..1.0);
        let bar0: f64 = r.random_range(-2.0..2.0);
        let thetas: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        target.get_mut(id).data_mut()[0] = bar0;
        for &t in &thetas {
            context.get_mut(id).data_mut()[0] = t;
            ema_update(&context, &mut target, m).map_err(|e| e.to_string())?;
        }
        let closed = m.powi(k as i32) * bar0 + (1.0 - m) * (0..k).map(|j| m.powi(j as i32) * thetas[k - 1 - j]).sum::<f64>();
        let got = target.get(id).item();
        ensure!((got - closed).abs() < 1e-10, "k={k} m={m}: {got} vs {closed}");
    }
    Ok("closed form holds on 50 random probes; k=3 m=0.9 gives 0.729".into())
}

// --- 4 -------------------------------------------------------------------

fn big_history(n_items: usize, len: usize, vocab: u32) -> EncodedInput {
    let mut r = rng::seeded(41);
    let items: Vec<EncodedItem> = (0..n_items).map(|_| random_item(&mut r, vocab, len)).collect();
    let refs: Vec<&EncodedItem> = items.iter().collect();
    let mut ids = vec![jepa4rec::tokenizer::CLS_ID];
    let mut types = vec![TokenType::Cls];
    let mut item_positions = vec![0];
    for (k, it) in refs.iter().enumerate() {
        ids.extend(&it.ids);
        types.extend(&it.types);
        item_positions.extend(std::iter::repeat_n((n_items - k) as u32, it.len()));
    }
    let n = ids.len();
    EncodedInput {
        token_ids: ids,
        token_positions: (0..n as u32).collect(),
        token_types: types,
        item_positions,
        global_attention: (0..n).map(|i| i == 0).collect(),
    }
}

fn masking_statistics() -> Outcome {
    let vocab = 5000usize;
    let input = big_history(1000, 10, vocab as u32);
    let n = input.len() - 1;
    let view = mask_history(&input, 0.15, vocab, &mut rng::seeded(42));
    ensure!(view.labels[0].is_none(), "[CLS] selected");
    let selected: Vec<usize> = (0..input.len()).filter(|&i| view.labels[i].is_some()).collect();
    let rate = selected.len() as f64 / n as f64;
    ensure!((rate - 0.15).abs() <= 0.01, "history selection rate {rate}");
    let s = selected.len() as f64;
    let masked = selected.iter().filter(|&&i| view.input.token_ids[i] == MASK_ID).count() as f64 / s;
    let kept = selected.iter().filter(|&&i| view.input.token_ids[i] == input.token_ids[i]).count() as f64 / s;
    let random = 1.0 - masked - kept;
    ensure!((masked - 0.8).abs() <= 0.02 && (random - 0.1).abs() <= 0.02 && (kept - 0.1).abs() <= 0.02, "split {masked}/{random}/{kept}");
    for i in 0..input.len() {
        if view.labels[i].is_none() {
            ensure!(view.input.token_ids[i] == input.token_ids[i], "unselected token {i} changed");
        }
    }
    ensure!(view == mask_history(&input, 0.15, vocab, &mut rng::seeded(42)), "same seed differs");

    let mut r = rng::seeded(43);
    let mut next_rng = rng::seeded(44);
    let (mut sel, mut total) = (0usize, 0usize);
    while total < 10_000 {
        let item = single_item_input(&random_item(&mut r, vocab as u32, 10));
        let v = mask_next_item(&item, 0.5, vocab, &mut next_rng);
        ensure!(v.labels[0].is_none(), "[CLS] selected in next item");
        sel += v.num_selected();
        total += item.len() - 1;
    }
    let next_rate = sel as f64 / total as f64;
    ensure!((next_rate - 0.5).abs() <= 0.02, "next-item rate {next_rate}");
    Ok(format!("history {rate:.4} ({masked:.3}/{random:.3}/{kept:.3}), next {next_rate:.4}"))
}

// --- 5 -------------------------------------------------------------------

fn attention_structure() -> Outcome {
    let mut r = rng::seeded(51);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let window = r.random_range(1..5);
        let cfg = ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_layers: r.random_range(1..3),
            n_heads: 2,
            d_ff: 16,
            window,
            max_tokens: 128,
            init_std: 0.5,
            token_init_std: 0.5,
            ..ModelConfig::default()
        };
        let (model, params) = Model::init(cfg, case).map_err(|e| e.to_string())?;
        let n_items = r.random_range(1..5);
        let items: Vec<EncodedItem> = (0..n_items)
            .map(|_| {
                let len = r.random_range(1..6);
                random_item(&mut r, 30, len)
            })
            .collect();
        let input = assemble_sequence(&items.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let n = input.len();
        let g = &input.global_attention;
        for layer in attention_weights(&input, &model, &params).map_err(|e| e.to_string())? {
            for head in layer {
                for i in 0..n {
                    let row = head.row(i);
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    for (j, &w) in row.iter().enumerate() {
                        let allowed = i.abs_diff(j) <= window || g[i] || g[j];
                        ensure!(allowed || w == 0.0, "case {case}: weight {w} at ({i},{j}) outside the pattern");
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "row sum off by {worst}");

    let cfg = ModelConfig { vocab_size: 30, d_model: 8, n_layers: 0, n_heads: 2, d_ff: 16, window: 2, max_tokens: 64, ..ModelConfig::default() };
    let (model, params) = Model::init(cfg, 3).map_err(|e| e.to_string())?;
    let input = single_item_input(&random_item(&mut r, 30, 6));
    let embedded = jepa4rec::embedding::embed(&input, &model, &params).map_err(|e| e.to_string())?;
    ensure!(encode(&input, &model, &params).map_err(|e| e.to_string())? == embedded, "0 layers is not the identity");
    Ok(format!("20 random inputs, exact zeros outside the pattern, max row-sum error {worst:.1e}"))
}

// --- 6 -------------------------------------------------------------------

fn metric_oracle() -> Outcome {
    let mut r = rng::seeded(61);
    for case in 0..1000 {
        let n = r.random_range(1..50);
        let ranks: Vec<usize> = (0..n).map(|_| r.random_range(1..40)).collect();
        let m = compute_metrics(&ranks, 10).map_err(|e| e.to_string())?;
        let (mut hits, mut gain, mut rr) = (0.0, 0.0, 0.0);
        for &rank in &ranks {
            let mut ndcg_term = 0.0;
            for pos in 1..=10 {
                if pos == rank {
                    hits += 1.0;
                    ndcg_term = 1.0 / ((pos as f64) + 1.0).log2();
                }
            }
            gain += ndcg_term;
            rr += 1.0 / rank as f64;
        }
        let k = n as f64;
        ensure!(m.recall == hits / k && m.ndcg == gain / k && m.mrr == rr / k, "case {case}: {m:?}");
    }
    let m = compute_metrics(&[3], 10).map_err(|e| e.to_string())?;
    ensure!(m.ndcg == 0.5 && m.mrr == 1.0 / 3.0 && m.recall == 1.0, "rank 3 gives {m:?}");
    Ok("1000 rank lists match exactly; rank 3 gives NDCG 0.5, MRR 1/3".into())
}

// --- shared toy setups ---------------------------------------------------

fn toy_model(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64, window: 16, token_init_std: 0.2, ..ModelConfig::default() }
}

fn overfit_corpus() -> Corpus {
    generate_synthetic_corpus(&SynthSpec { n_items: 50, n_users: 20, ..SynthSpec::default() }).expect("overfit corpus")
}

fn overfit_finetune() -> TrainConfig {
    TrainConfig { epochs: 200, learning_rate: 3e-4, batch_size: 20, ..TrainConfig::finetune() }
}

// --- 7 -------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let corpus = overfit_corpus();
    let vocab = Vocabulary::build(&corpus, 1).map_err(|e| e.to_string())?;
    let items = encode_items(&corpus, &vocab, 0.0, 0).map_err(|e| e.to_string())?;
    let cfg = overfit_finetune();
    let mut ckpt = Checkpoint::new(toy_model(&vocab), cfg.clone(), vocab.hash()).map_err(|e| e.to_string())?;
    finetune(&mut ckpt, &corpus, &items, "domain0", &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let report = evaluate(&ckpt.model, &ckpt.context, &corpus, &items, "domain0", Split::Train, Mode::Standard).map_err(|e| e.to_string())?;
    let windows: Vec<f64> = ckpt.history.chunks(10).map(|w| w.iter().map(|e| e.loss).sum::<f64>() / w.len() as f64).collect();
    let rises: Vec<usize> = (1..windows.len()).filter(|&i| windows[i] >= windows[i - 1]).collect();
    ensure!(ckpt.history.len() == 200, "{} epochs ran", ckpt.history.len());
    ensure!(report.recall_at_10 >= 0.9, "training Recall@10 {}", report.recall_at_10);
    ensure!(rises.is_empty(), "window loss rose at windows {rises:?}: {windows:?}");
    ensure!(secs < 600.0, "took {secs:.0}s");
    Ok(format!(
        "Recall@10 {:.3}, window loss {:.3} -> {:.3} strictly decreasing, {secs:.1}s",
        report.recall_at_10,
        windows[0],
        windows[windows.len() - 1]
    ))
}

// --- 8, 9, 10 --------------------------------------------------------------

struct TransferRun {
    pretrained_ndcg: f64,
    scratch_ndcg: f64,
    zero_shot_recall: f64,
    random_baseline: f64,
    reveal: Vec<f64>,
}

const TRANSFER_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const REVEAL_RATIOS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

/// Two domains sharing brand and category words. The model is pretrained on
/// domain1 only; domain0 is the target.
fn transfer_run(seed: u64) -> Result<TransferRun, String> {
    let e = |e: jepa4rec::Error| e.to_string();
    let spec = SynthSpec { n_domains: 2, n_items: 100, n_users: 100, n_brands: 10, seed, ..SynthSpec::default() };
    let corpus = generate_synthetic_corpus(&spec).map_err(e)?;
    let vocab = Vocabulary::build(&corpus, 1).map_err(e)?;
    let items = encode_items(&corpus, &vocab, 0.0, seed).map_err(e)?;
    let pre_cfg = TrainConfig { epochs: 30, learning_rate: 1e-3, seed, ..TrainConfig::pretrain() };
    let fine_cfg = TrainConfig { epochs: 10, learning_rate: 3e-4, seed, ..TrainConfig::finetune() };

    let mut pretrained = Checkpoint::new(toy_model(&vocab), pre_cfg.clone(), vocab.hash()).map_err(e)?;
    pretrain(&mut pretrained, &corpus, &items, &["domain1".to_string()], &pre_cfg, &mut |_| {}).map_err(e)?;
    let zero = evaluate(&pretrained.model, &pretrained.context, &corpus, &items, "domain0", Split::Test, Mode::ZeroShot).map_err(e)?;
    let reveal = reveal_study(&pretrained, &corpus, &items, "domain1", Split::Test, &REVEAL_RATIOS, seed).map_err(e)?;

    let mut from_pretrained = pretrained.clone();
    finetune(&mut from_pretrained, &corpus, &items, "domain0", &fine_cfg, &mut |_| {}).map_err(e)?;
    let mut scratch = Checkpoint::new(toy_model(&vocab), pre_cfg, vocab.hash()).map_err(e)?;
    finetune(&mut scratch, &corpus, &items, "domain0", &fine_cfg, &mut |_| {}).map_err(e)?;
    let with = evaluate(&from_pretrained.model, &from_pretrained.context, &corpus, &items, "domain0", Split::Test, Mode::Standard).map_err(e)?;
    let without = evaluate(&scratch.model, &scratch.context, &corpus, &items, "domain0", Split::Test, Mode::Standard).map_err(e)?;
    Ok(TransferRun {
        pretrained_ndcg: with.ndcg_at_10,
        scratch_ndcg: without.ndcg_at_10,
        zero_shot_recall: zero.recall_at_10,
        random_baseline: 10.0 / zero.catalog_size as f64,
        reveal: reveal.iter().map(|r| r.recall_at_10).collect(),
    })
}

fn pretraining_benefit(runs: &[TransferRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.pretrained_ndcg > r.scratch_ndcg).count();
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.3}>{:.3}", r.pretrained_ndcg, r.scratch_ndcg)).collect();
    ensure!(wins >= 4, "pretrained wins {wins}/5: {}", detail.join(" "));
    Ok(format!("pretrained wins {wins}/5 on NDCG@10: {}", detail.join(" ")))
}

fn zero_shot(runs: &[TransferRun]) -> Outcome {
    let ok = runs.iter().filter(|r| r.zero_shot_recall >= 3.0 * r.random_baseline).count();
    let detail: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.zero_shot_recall)).collect();
    let base = runs[0].random_baseline;
    ensure!(ok >= 4, "{ok}/5 seeds reach 3x the random baseline {base:.3}: {}", detail.join(" "));
    Ok(format!("{ok}/5 seeds reach 3x random ({:.3}); Recall@10 {}", 3.0 * base, detail.join(" ")))
}

fn reveal_monotone(runs: &[TransferRun]) -> Outcome {
    let k = REVEAL_RATIOS.len();
    let n = runs.len() as f64;
    let means: Vec<f64> = (0..k).map(|j| runs.iter().map(|r| r.reveal[j]).sum::<f64>() / n).collect();
    let vars: Vec<f64> = (0..k).map(|j| runs.iter().map(|r| (r.reveal[j] - means[j]).powi(2)).sum::<f64>() / (n - 1.0)).collect();
    let pooled = (vars.iter().sum::<f64>() / k as f64).sqrt();
    for j in 1..k {
        ensure!(means[j] >= means[j - 1] - pooled, "mean Recall@10 drops from {:.3} to {:.3} (pooled std {pooled:.3})", means[j - 1], means[j]);
    }
    let m: Vec<String> = means.iter().map(|x| format!("{x:.3}")).collect();
    Ok(format!("mean Recall@10 over ratios {REVEAL_RATIOS:?}: {} (pooled std {pooled:.3})", m.join(" ")))
}

// --- 11 ------------------------------------------------------------------

fn robustness() -> Outcome {
    let corpus = overfit_corpus();
    let vocab = Vocabulary::build(&corpus, 1).map_err(|e| e.to_string())?;
    let base = PipelineConfig {
        model: toy_model(&vocab),
        pretrain: TrainConfig { epochs: 0, ..TrainConfig::pretrain() },
        finetune: overfit_finetune(),
        split: Split::Train,
        ..PipelineConfig::default()
    };
    let rows = robustness_study(&corpus, &vocab, &base, &[0.0, 0.2, 0.4, 0.6]).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 4, "{} rows", rows.len());
    let recall: Vec<f64> = rows.iter().map(|r| r.recall_at_10).collect();
    ensure!(recall[0] >= recall[3], "drop 0 {} < drop 0.6 {}", recall[0], recall[3]);
    Ok(format!("4 rows, Recall@10 by drop rate {recall:.3?}"))
}

// --- 12 ------------------------------------------------------------------

fn cli(args: &[&str], out: &Path) -> Result<(), String> {
    let mut argv = vec!["jepa4rec"];
    argv.extend_from_slice(args);
    let out = out.to_str().expect("utf-8 path");
    argv.extend_from_slice(&["--out", out, "--threads", "1"]);
    match jepa4rec::cli::run(argv.iter().copied()) {
        0 => Ok(()),
        code => Err(format!("{argv:?} exited {code}")),
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--window", "8", "--batch-size", "8"];
    let mut artifacts: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let corpus = root.join("corpus");
        let corpus_s = corpus.to_str().unwrap().to_string();
        cli(&["synth", "--seed", "7", "--n-domains", "2", "--n-users", "24"], &corpus)?;
        cli(&["build-vocab", "--corpus", &corpus_s], &root.join("vocab"))?;
        let vocab = root.join("vocab/vocab.json");
        let vocab_s = vocab.to_str().unwrap().to_string();
        let data = ["--corpus", corpus_s.as_str(), "--vocab", vocab_s.as_str(), "--seed", "3"];
        let with = |extra: &[&str]| -> Vec<String> { data.iter().chain(&small).chain(extra).map(|s| s.to_string()).collect() };
        let call = |cmd: &str, extra: &[&str], out: &Path| -> Result<(), String> {
            let mut a = vec![cmd.to_string()];
            a.extend(with(extra));
            cli(&a.iter().map(String::as_str).collect::<Vec<_>>(), out)
        };
        call("pretrain", &["--epochs", "2", "--pretrain-domains", "domain1"], &root.join("pre"))?;
        let pre = root.join("pre/model.ckpt");
        let pre_s = pre.to_str().unwrap().to_string();
        call("finetune", &["--checkpoint", &pre_s, "--epochs", "3", "--domain", "domain0"], &root.join("fine"))?;
        let fine_s = root.join("fine/model.ckpt").to_str().unwrap().to_string();
        call("eval", &["--checkpoint", &fine_s, "--domain", "domain0"], &root.join("eval"))?;
        call("study-reveal", &["--checkpoint", &pre_s, "--domain", "domain1", "--ratios", "0,0.5,1"], &root.join("reveal"))?;
        call("study-ablation", &["--variant", "no-mlm", "--domain", "domain0", "--pretrain-epochs", "1", "--finetune-epochs", "1"], &root.join("abl"))?;
        let files = [
            "corpus/items.jsonl",
            "corpus/interactions.jsonl",
            "vocab/vocab.json",
            "pre/model.ckpt",
            "pre/model.ckpt.json",
            "fine/model.ckpt",
            "eval/report.csv",
            "eval/report.json",
            "reveal/report.csv",
            "reveal/report.json",
            "abl/report.csv",
            "abl/report.json",
        ];
        artifacts.push(files.iter().map(|f| read(&root.join(f))).collect::<Result<_, _>>()?);

        // resumed pretraining and finetuning match uninterrupted runs
        if run == "a" {
            call("pretrain", &["--epochs", "4", "--pretrain-domains", "domain1"], &root.join("pre4"))?;
            call("pretrain", &["--checkpoint", &pre_s, "--epochs", "4", "--pretrain-domains", "domain1"], &root.join("pre2+2"))?;
            ensure!(read(&root.join("pre4/model.ckpt"))? == read(&root.join("pre2+2/model.ckpt"))?, "resumed pretraining differs");
            call("finetune", &["--checkpoint", &pre_s, "--epochs", "1", "--domain", "domain0"], &root.join("fine1"))?;
            let f1 = root.join("fine1/model.ckpt").to_str().unwrap().to_string();
            call("finetune", &["--checkpoint", &f1, "--epochs", "3", "--domain", "domain0"], &root.join("fine1+2"))?;
            ensure!(read(&root.join("fine/model.ckpt"))? == read(&root.join("fine1+2/model.ckpt"))?, "resumed finetuning differs");

            let bytes = read(&pre)?;
            let again = root.join("resaved.ckpt");
            Checkpoint::read(&pre).map_err(|e| e.to_string())?.save(&again).map_err(|e| e.to_string())?;
            ensure!(read(&again)? == bytes, "save/load/save changed bytes");
        }
    }
    let differing: Vec<usize> = (0..artifacts[0].len()).filter(|&i| artifacts[0][i] != artifacts[1][i]).collect();
    ensure!(differing.is_empty(), "artifacts {differing:?} differ between identical runs");
    Ok(format!("{} artifacts byte-identical across reruns; resume and save/load exact", artifacts[0].len()))
}

// --- driver --------------------------------------------------------------

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {id:>2} {name:<24} PASS  ({secs:.1}s) {detail}"),
        Err(detail) => println!("criterion {id:>2} {name:<24} FAIL  ({secs:.1}s) {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "gradient correctness", gradient_check);
    ok &= run(2, "loss oracles", loss_oracles);
    ok &= run(3, "ema law", ema_law);
    ok &= run(4, "masking statistics", masking_statistics);
    ok &= run(5, "attention structure", attention_structure);
    ok &= run(6, "metric oracle", metric_oracle);
    ok &= run(7, "overfit", overfit);
    let runs: Result<Vec<TransferRun>, String> = TRANSFER_SEEDS.iter().map(|&s| transfer_run(s)).collect();
    match runs {
        Ok(runs) => {
            ok &= run(8, "pretraining benefit", || pretraining_benefit(&runs));
            ok &= run(9, "zero-shot transfer", || zero_shot(&runs));
            ok &= run(10, "reveal monotonicity", || reveal_monotone(&runs));
        }
        Err(e) => {
            for (id, name) in [(8, "pretraining benefit"), (9, "zero-shot transfer"), (10, "reveal monotonicity")] {
                ok &= run(id, name, || Err(e.clone()));
            }
        }
    }
    ok &= run(11, "robustness study", robustness);
    ok &= run(12, "reproducibility", reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
