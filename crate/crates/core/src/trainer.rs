//! Pretraining and finetuning loops.
//!
//! A batch is processed in two levels. Every sequence gets its own graph,
//! built in parallel, holding its encoder passes and its share of the
//! per-sequence losses. The in-batch contrastive loss couples the sequences
//! only through their `h_CLS` and next-item rows, so it lives on a small
//! batch graph whose input gradients are then pushed back into each
//! sequence graph. Per-sequence gradients are summed in sequence order,
//! which keeps results independent of the thread count.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, EarlyStop, EpochRecord};
use crate::config::{Stage, TrainConfig};
use crate::corpus::Corpus;
use crate::encoder::{encode_in, encode_item};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{mask_history, mask_next_item, sample_masked_item, MaskedItem, MaskedView};
use crate::model::Model;
use crate::objectives::{
    bpr_loss_in, cosine_logits_in, mapping_loss_in, mlm_logits_in, predict_history_in, predict_next_in, pretrain_loss,
    seq_item_contrastive_in, LossBundle,
};
use crate::optim::Adam;
use crate::params::{ema_update, ParamStore};
use crate::rng::{self, purpose};
use crate::tensor::Tensor;
use crate::tokenizer::{assemble_sequence, encode_item as tokenize_item, single_item_input, EncodedInput, EncodedItem, Vocabulary};

/// Removes `round(rate·len)` tokens chosen uniformly, always keeping one.
pub fn drop_tokens<R: Rng>(item: &EncodedItem, rate: f64, rng: &mut R) -> EncodedItem {
    let n = item.len();
    let k = ((rate * n as f64).round() as usize).min(n.saturating_sub(1));
    if k == 0 {
        return item.clone();
    }
    let mut dropped = vec![false; n];
    for i in index::sample(rng, n, k) {
        dropped[i] = true;
    }
    fn keep<T: Copy>(v: &[T], dropped: &[bool]) -> Vec<T> {
        v.iter().zip(dropped).filter(|(_, d)| !**d).map(|(x, _)| *x).collect()
    }
    EncodedItem { ids: keep(&item.ids, &dropped), types: keep(&item.types, &dropped) }
}

/// Tokenizes every catalog item, optionally dropping tokens with a
/// per-item stream of `seed`.
pub fn encode_items(corpus: &Corpus, vocab: &Vocabulary, token_drop_rate: f64, seed: u64) -> Result<Vec<EncodedItem>> {
    corpus
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let enc = tokenize_item(item, vocab)?;
            if token_drop_rate > 0.0 {
                let mut rng = rng::derive(seed, &[purpose::TOKEN_DROP, i as u64]);
                Ok(drop_tokens(&enc, token_drop_rate, &mut rng))
            } else {
                Ok(enc)
            }
        })
        .collect()
}

/// `[CLS], S_n, …, S_1` for a history of item indices, oldest first.
pub fn history_input(items: &[EncodedItem], history: &[usize]) -> Result<EncodedInput> {
    let refs: Vec<&EncodedItem> = history.iter().map(|&i| &items[i]).collect();
    assemble_sequence(&refs)
}

/// Items of one domain in catalog order.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub items: Vec<usize>,
    rows: HashMap<usize, usize>,
}

impl Catalog {
    pub fn new(items: Vec<usize>) -> Self {
        let rows = items.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        Self { items, rows }
    }

    pub fn of_domain(corpus: &Corpus, domain: &str) -> Result<Self> {
        let items = corpus.domain_catalog(domain);
        if items.is_empty() {
            return Err(Error::Config(format!("domain {domain:?} has no items")));
        }
        Ok(Self::new(items))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Row of corpus item `item`.
    pub fn row(&self, item: usize) -> Option<usize> {
        self.rows.get(&item).copied()
    }
}

/// Item representations `I`, one row per catalog item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemMatrix {
    pub rows: Tensor,
    /// Epoch during which these rows were computed.
    pub epoch: usize,
}

/// Encodes every catalog item with `params`.
pub fn refresh_item_matrix(model: &Model, params: &ParamStore, items: &[EncodedItem], catalog: &Catalog, epoch: usize) -> Result<ItemMatrix> {
    if catalog.is_empty() {
        return Err(Error::Empty("catalog"));
    }
    let rows: Vec<Vec<f64>> = catalog.items.par_iter().map(|&i| encode_item(&items[i], model, params)).collect::<Result<_>>()?;
    Ok(ItemMatrix { rows: Tensor::from_rows(&rows), epoch })
}

/// One pretraining example: masked history, masked next item and the full
/// views the target encoder sees.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    pub history: MaskedView,
    pub masked_item: MaskedItem,
    /// Corpus index of the masked history item.
    pub masked_item_index: Option<usize>,
    pub next_masked: MaskedView,
    pub next_full: EncodedInput,
    pub next_index: usize,
}

impl PretrainExample {
    pub fn new<R: Rng>(items: &[EncodedItem], history: &[usize], next: usize, cfg: &TrainConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let input = history_input(items, history)?;
        let masked = mask_history(&input, cfg.history_mask_rate, vocab_size, rng);
        let masked_item = sample_masked_item(&masked, rng);
        let masked_item_index = match masked_item {
            MaskedItem::Item(p) => Some(history[history.len() - p as usize]),
            MaskedItem::Placeholder => None,
        };
        let next_full = single_item_input(&items[next]);
        let next_masked = mask_next_item(&next_full, cfg.next_mask_rate, vocab_size, rng);
        Ok(Self { history: masked, masked_item, masked_item_index, next_masked, next_full, next_index: next })
    }
}

/// Loss values and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub losses: LossBundle,
    pub context_grads: Vec<Option<Tensor>>,
    /// Gradients reaching the target network; always empty.
    pub target_grads: Vec<Option<Tensor>>,
}

struct SeqPass<'a> {
    g: Graph<'a>,
    local: Option<Var>,
    h_cls: Var,
    h_next: Option<Var>,
    map: f64,
    mlm: f64,
}

#[allow(clippy::too_many_arguments)]
fn pretrain_seq<'a>(
    model: &Model,
    context: &'a ParamStore,
    target: &'a ParamStore,
    items: &[EncodedItem],
    ex: &PretrainExample,
    cfg: &TrainConfig,
    mlm_share: f64,
    batch: usize,
) -> Result<SeqPass<'a>> {
    // store 0 is trained, store 1 is the target network; every target output
    // is detached so its gradient stays empty
    let mut g = Graph::new(&[(context, true), (target, true)]);
    let run = encode_in(&mut g, 0, model, &ex.history.input)?;
    let h_cls = g.row(run.hidden, 0);
    let mut parts = Vec::new();

    let mut mlm = 0.0;
    let labeled: Vec<(usize, usize)> =
        ex.history.labels.iter().enumerate().filter_map(|(i, l)| l.map(|t| (i, t as usize))).collect();
    if !cfg.ablation.disable_mlm && !labeled.is_empty() {
        let positions = labeled.iter().map(|p| p.0).collect();
        let logits = mlm_logits_in(&mut g, 0, model, run.hidden, positions);
        let ce = g.cross_entropy(logits, labeled.iter().map(|p| Some(p.1)).collect());
        let w = labeled.len() as f64 * mlm_share;
        mlm = g.value(ce).item() * w;
        parts.push(g.scale(ce, cfg.lambda_mlm * w));
    }

    let masked_next = encode_in(&mut g, 0, model, &ex.next_masked.input)?;
    let h_masked = g.row(masked_next.hidden, 0);
    let predicted_next = predict_next_in(&mut g, 0, model, h_cls, h_masked);
    let full_next = encode_in(&mut g, 1, model, &ex.next_full)?;
    let next_row = g.row(full_next.hidden, 0);
    let target_next = g.detach(next_row);
    let history_pair = match (ex.masked_item, ex.masked_item_index) {
        (MaskedItem::Item(_), Some(idx)) => {
            let predicted = predict_history_in(&mut g, 0, model, h_cls, ex.masked_item);
            let run = encode_in(&mut g, 1, model, &single_item_input(&items[idx]))?;
            let row = g.row(run.hidden, 0);
            Some((predicted, g.detach(row)))
        }
        _ => None,
    };
    let map_var = mapping_loss_in(&mut g, history_pair, predicted_next, target_next);
    let map = g.value(map_var).item();
    parts.push(g.scale(map_var, cfg.lambda_map / batch as f64));

    let h_next = if cfg.ablation.disable_contrastive {
        None
    } else {
        let run = encode_in(&mut g, 0, model, &ex.next_full)?;
        Some(g.row(run.hidden, 0))
    };
    let local = if parts.is_empty() { None } else { Some(g.sum(&parts)) };
    Ok(SeqPass { g, local, h_cls, h_next, map, mlm })
}

fn accumulate(total: &mut [Option<Tensor>], part: Vec<Option<Tensor>>) {
    for (t, p) in total.iter_mut().zip(part) {
        let Some(p) = p else { continue };
        match t {
            Some(t) => t.add_assign(&p),
            None => *t = Some(p),
        }
    }
}

/// `L_PT` over one batch and, when `with_grads`, its gradients.
pub fn pretrain_batch(
    model: &Model,
    context: &ParamStore,
    target: &ParamStore,
    items: &[EncodedItem],
    examples: &[PretrainExample],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<BatchOutcome> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let b = examples.len();
    let total_labels: usize = examples.iter().map(|e| e.history.num_selected()).sum();
    let mlm_share = if total_labels == 0 { 0.0 } else { 1.0 / total_labels as f64 };
    let passes: Vec<SeqPass> = examples
        .par_iter()
        .map(|ex| pretrain_seq(model, context, target, items, ex, cfg, mlm_share, b))
        .collect::<Result<_>>()?;

    let map = passes.iter().map(|p| p.map).sum::<f64>() / b as f64;
    let mlm = passes.iter().map(|p| p.mlm).sum::<f64>();

    let mut seeds: Vec<Vec<(Var, Tensor)>> = passes
        .iter()
        .map(|p| p.local.map(|l| vec![(l, Tensor::scalar(1.0))]).unwrap_or_default())
        .collect();
    let mut seq_item = 0.0;
    if !cfg.ablation.disable_contrastive {
        let mut leaves = ParamStore::new();
        let cls_ids: Vec<_> = passes.iter().enumerate().map(|(i, p)| leaves.register(format!("cls{i}"), p.g.value(p.h_cls).clone())).collect();
        let next_ids: Vec<_> = passes
            .iter()
            .enumerate()
            .map(|(i, p)| leaves.register(format!("next{i}"), p.g.value(p.h_next.expect("contrastive pass")).clone()))
            .collect();
        let mut bg = Graph::new(&[(&leaves, true)]);
        let cls: Vec<Var> = cls_ids.iter().map(|&id| bg.param(0, id)).collect();
        let next: Vec<Var> = next_ids.iter().map(|&id| bg.param(0, id)).collect();
        let cls = bg.concat_rows(&cls);
        let next = bg.concat_rows(&next);
        let loss = seq_item_contrastive_in(&mut bg, cls, next, cfg.temperature)?;
        seq_item = bg.value(loss).item();
        if with_grads {
            let grads = bg.backward(loss);
            for (i, p) in passes.iter().enumerate() {
                if let Some(gc) = grads.get(0, cls_ids[i]) {
                    seeds[i].push((p.h_cls, gc.clone()));
                }
                if let Some(gn) = grads.get(0, next_ids[i]) {
                    seeds[i].push((p.h_next.expect("contrastive pass"), gn.clone()));
                }
            }
        }
    }

    let total = pretrain_loss(seq_item, mlm, map, cfg.lambda_mlm, cfg.lambda_map);
    let losses = LossBundle {
        map,
        mlm,
        seq_item,
        total,
        lambda_mlm: cfg.lambda_mlm,
        lambda_map: cfg.lambda_map,
        temperature: cfg.temperature,
    };
    let mut context_grads = vec![None; context.len()];
    let mut target_grads = vec![None; target.len()];
    if with_grads {
        let per_seq: Vec<_> = passes
            .par_iter()
            .zip(seeds)
            .map(|(p, s)| {
                let grads = p.g.backward_seeded(s);
                (grads.store(0).to_vec(), grads.store(1).to_vec())
            })
            .collect();
        for (c, t) in per_seq {
            accumulate(&mut context_grads, c);
            accumulate(&mut target_grads, t);
        }
    }
    Ok(BatchOutcome { losses, context_grads, target_grads })
}

/// One finetuning example: history, ground-truth next item, and the
/// sampled negative for the BPR variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneExample {
    pub history: EncodedInput,
    pub target: usize,
    pub negative: Option<usize>,
}

/// Mean `L_FT` (or BPR) over a batch with its gradients.
///
/// The softmax denominator reads the epoch's fixed item matrix; the
/// ground-truth row is replaced by a live encoding so the positive term
/// keeps its gradient path.
#[allow(clippy::too_many_arguments)]
pub fn finetune_batch(
    model: &Model,
    context: &ParamStore,
    items: &[EncodedItem],
    catalog: &Catalog,
    matrix: &ItemMatrix,
    examples: &[FinetuneExample],
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / examples.len() as f64;
    let per_seq: Vec<(f64, Vec<Option<Tensor>>)> = examples
        .par_iter()
        .map(|ex| -> Result<_> {
            let mut g = Graph::new(&[(context, true)]);
            let run = encode_in(&mut g, 0, model, &ex.history)?;
            let h_cls = g.row(run.hidden, 0);
            let live = |g: &mut Graph, item: usize| -> Result<Var> {
                let run = encode_in(g, 0, model, &single_item_input(&items[item]))?;
                Ok(g.row(run.hidden, 0))
            };
            let h_pos = live(&mut g, ex.target)?;
            let loss = if cfg.ablation.use_bpr {
                let neg = ex.negative.ok_or(Error::Empty("negative sample"))?;
                let h_neg = live(&mut g, neg)?;
                let pos = cosine_logits_in(&mut g, h_cls, h_pos, cfg.temperature)?;
                let neg = cosine_logits_in(&mut g, h_cls, h_neg, cfg.temperature)?;
                bpr_loss_in(&mut g, pos, neg)
            } else {
                let row = catalog.row(ex.target).ok_or(Error::Config(format!("item {} is outside the catalog", ex.target)))?;
                let base = g.constant(matrix.rows.clone());
                let keys = g.replace_rows(base, vec![row], h_pos);
                let logits = cosine_logits_in(&mut g, h_cls, keys, cfg.temperature)?;
                g.cross_entropy(logits, vec![Some(row)])
            };
            let value = g.value(loss).item();
            let grads = if with_grads {
                let scaled = g.scale(loss, scale);
                g.backward(scaled).into_store(0)
            } else {
                Vec::new()
            };
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let mut grads = vec![None; context.len()];
    let mut total = 0.0;
    for (v, gr) in per_seq {
        total += v;
        accumulate(&mut grads, gr);
    }
    Ok((total * scale, grads))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchLog {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    pub map: f64,
    pub mlm: f64,
    pub seq_item: f64,
    pub finetune: f64,
    pub total: f64,
    pub wall_ms: f64,
}

fn at(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| Error::TrainingFailure { epoch, batch, source: Box::new(e) }
}

fn check_finite(loss: f64, params: &ParamStore) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(())
}

fn domain_filter<'a>(corpus: &'a Corpus, domains: &'a [String]) -> impl Fn(&str) -> bool + 'a {
    let _ = corpus;
    move |d: &str| domains.is_empty() || domains.iter().any(|x| x == d)
}

/// Sequences usable for pretraining: their training part has at least two
/// items.
fn pretrain_sequences(corpus: &Corpus, domains: &[String]) -> Vec<usize> {
    let keep = domain_filter(corpus, domains);
    corpus.sequences.iter().enumerate().filter(|(_, s)| keep(&s.domain) && s.items.len() >= 4).map(|(i, _)| i).collect()
}

/// Splits off the early-stopping holdout.
pub fn holdout_split(sequences: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = sequences.to_vec();
    order.shuffle(&mut rng::derive(seed, &[purpose::HOLDOUT]));
    let n = (sequences.len() as f64 * fraction).floor() as usize;
    let mut holdout = order[..n].to_vec();
    let mut train = order[n..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (holdout, train)
}

fn holdout_loss(ckpt: &Checkpoint, corpus: &Corpus, items: &[EncodedItem], holdout: &[usize], cfg: &TrainConfig) -> Result<Option<f64>> {
    if holdout.is_empty() {
        return Ok(None);
    }
    let v = ckpt.model.config.vocab_size;
    let examples: Vec<PretrainExample> = holdout
        .iter()
        .map(|&s| {
            let seq = &corpus.sequences[s].items;
            let train = &seq[..seq.len() - 2];
            let mut rng = rng::derive(cfg.seed, &[purpose::HOLDOUT, 1, s as u64]);
            PretrainExample::new(items, &train[..train.len() - 1], train[train.len() - 1], cfg, v, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    for chunk in examples.chunks(cfg.batch_size) {
        let out = pretrain_batch(&ckpt.model, &ckpt.context, &ckpt.target, items, chunk, cfg, false)?;
        sum += out.losses.total * chunk.len() as f64;
    }
    Ok(Some(sum / examples.len() as f64))
}

fn check_stage(cfg: &TrainConfig, want: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != want {
        return Err(Error::Config(format!("expected a {want:?} configuration, got {:?}", cfg.stage)));
    }
    Ok(())
}

/// Runs pretraining epochs `ckpt.epoch..cfg.epochs` over the sequences of
/// `domains` (all domains when empty). Each step updates the context network
/// with Adam and then moves the target network by EMA. Stops early once the
/// holdout loss fails to improve for `cfg.patience` epochs.
pub fn pretrain(
    ckpt: &mut Checkpoint,
    corpus: &Corpus,
    items: &[EncodedItem],
    domains: &[String],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&BatchLog),
) -> Result<()> {
    check_stage(cfg, Stage::Pretrain)?;
    if ckpt.stage != Stage::Pretrain {
        return Err(Error::Config("checkpoint has already been finetuned".into()));
    }
    if items.len() != corpus.items.len() {
        return Err(Error::Structure(format!("{} encoded items for a catalog of {}", items.len(), corpus.items.len())));
    }
    ckpt.train_config = cfg.clone();
    ckpt.optimizer.learning_rate = cfg.learning_rate;
    let sequences = pretrain_sequences(corpus, domains);
    if sequences.is_empty() {
        return Err(Error::Empty("pretraining sequences"));
    }
    let (holdout, train) = holdout_split(&sequences, cfg.holdout_fraction, cfg.seed);
    let v = ckpt.model.config.vocab_size;

    for epoch in ckpt.epoch..cfg.epochs {
        if ckpt.early_stop.stopped {
            break;
        }
        let mut order = train.clone();
        order.shuffle(&mut rng::derive(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let start = Instant::now();
            let examples: Vec<PretrainExample> = chunk
                .par_iter()
                .map(|&s| {
                    let seq = &corpus.sequences[s].items;
                    let train = &seq[..seq.len() - 2];
                    let cut = rng::derive(cfg.seed, &[purpose::CUT, epoch as u64, s as u64]).random_range(1..train.len());
                    let mut rng = rng::derive(cfg.seed, &[purpose::MASK, epoch as u64, s as u64]);
                    PretrainExample::new(items, &train[..cut], train[cut], cfg, v, &mut rng)
                })
                .collect::<Result<_>>()
                .map_err(at(epoch, b))?;
            let out = pretrain_batch(&ckpt.model, &ckpt.context, &ckpt.target, items, &examples, cfg, true).map_err(at(epoch, b))?;
            ckpt.optimizer.step(&mut ckpt.context, &out.context_grads)?;
            ema_update(&ckpt.context, &mut ckpt.target, cfg.ema_decay)?;
            check_finite(out.losses.total, &ckpt.context).map_err(at(epoch, b))?;
            epoch_loss += out.losses.total * chunk.len() as f64;
            let l = &out.losses;
            log(&BatchLog {
                stage: Stage::Pretrain,
                epoch,
                batch: b,
                map: l.map,
                mlm: l.mlm,
                seq_item: l.seq_item,
                finetune: 0.0,
                total: l.total,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let held = holdout_loss(ckpt, corpus, items, &holdout, cfg).map_err(at(epoch, 0))?;
        if let Some(h) = held {
            let es = &mut ckpt.early_stop;
            if es.best.is_none_or(|b| h < b) {
                es.best = Some(h);
                es.bad_epochs = 0;
            } else {
                es.bad_epochs += 1;
                es.stopped = es.bad_epochs >= cfg.patience;
            }
        }
        ckpt.history.push(EpochRecord { stage: Stage::Pretrain, epoch, loss: epoch_loss / train.len().max(1) as f64, holdout_loss: held });
        ckpt.epoch = epoch + 1;
    }
    Ok(())
}

/// Finetuning examples of `domain`: history `train[..len-1]` and target
/// `train[len-1]` for every sequence long enough.
pub fn finetune_examples(corpus: &Corpus, items: &[EncodedItem], domain: &str) -> Result<Vec<(usize, FinetuneExample)>> {
    corpus
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.domain == domain && s.items.len() >= 4)
        .map(|(i, s)| {
            let train = &s.items[..s.items.len() - 2];
            let history = history_input(items, &train[..train.len() - 1])?;
            Ok((i, FinetuneExample { history, target: train[train.len() - 1], negative: None }))
        })
        .collect()
}

fn sample_negative<R: Rng>(catalog: &Catalog, positives: &BTreeSet<usize>, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = catalog.items.iter().copied().filter(|i| !positives.contains(i)).collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())])
}

/// Finetunes the context network on `domain`. A checkpoint coming out of
/// pretraining switches to the finetuning stage with a fresh optimizer; a
/// finetuning checkpoint resumes at its epoch. The item matrix is rebuilt
/// once at the start of every epoch.
pub fn finetune(
    ckpt: &mut Checkpoint,
    corpus: &Corpus,
    items: &[EncodedItem],
    domain: &str,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&BatchLog),
) -> Result<()> {
    check_stage(cfg, Stage::Finetune)?;
    if items.len() != corpus.items.len() {
        return Err(Error::Structure(format!("{} encoded items for a catalog of {}", items.len(), corpus.items.len())));
    }
    if ckpt.stage == Stage::Pretrain {
        ckpt.stage = Stage::Finetune;
        ckpt.epoch = 0;
        ckpt.optimizer = Adam::new(&ckpt.context, cfg.learning_rate);
        ckpt.early_stop = EarlyStop::default();
    }
    ckpt.train_config = cfg.clone();
    ckpt.optimizer.learning_rate = cfg.learning_rate;
    let catalog = Catalog::of_domain(corpus, domain)?;
    let examples = finetune_examples(corpus, items, domain)?;
    if examples.is_empty() {
        return Err(Error::Empty("finetuning sequences"));
    }

    for epoch in ckpt.epoch..cfg.epochs {
        let matrix = refresh_item_matrix(&ckpt.model, &ckpt.context, items, &catalog, epoch).map_err(at(epoch, 0))?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::derive(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let start = Instant::now();
            let batch: Vec<FinetuneExample> = chunk
                .iter()
                .map(|&k| {
                    let (s, ex) = &examples[k];
                    let mut ex = ex.clone();
                    if cfg.ablation.use_bpr {
                        let positives: BTreeSet<usize> = corpus.sequences[*s].items.iter().copied().collect();
                        let mut rng = rng::derive(cfg.seed, &[purpose::NEGATIVE, epoch as u64, *s as u64]);
                        ex.negative = sample_negative(&catalog, &positives, &mut rng);
                    }
                    ex
                })
                .filter(|ex| !cfg.ablation.use_bpr || ex.negative.is_some())
                .collect();
            if batch.is_empty() {
                continue;
            }
            let (loss, grads) =
                finetune_batch(&ckpt.model, &ckpt.context, items, &catalog, &matrix, &batch, cfg, true).map_err(at(epoch, b))?;
            ckpt.optimizer.step(&mut ckpt.context, &grads)?;
            check_finite(loss, &ckpt.context).map_err(at(epoch, b))?;
            epoch_loss += loss * batch.len() as f64;
            log(&BatchLog {
                stage: Stage::Finetune,
                epoch,
                batch: b,
                map: 0.0,
                mlm: 0.0,
                seq_item: 0.0,
                finetune: loss,
                total: loss,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        ckpt.history.push(EpochRecord { stage: Stage::Finetune, epoch, loss: epoch_loss / examples.len() as f64, holdout_loss: None });
        ckpt.epoch = epoch + 1;
    }
    Ok(())
}
