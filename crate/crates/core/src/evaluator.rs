//! Leave-one-out ranking evaluation and the studies built on it.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Stage, TrainConfig};
use crate::corpus::{leave_one_out_split, Corpus};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::predict_next_repr;
use crate::params::ParamStore;
use crate::rng::{self, purpose};
use crate::tensor::{dot, l2_norm, Tensor};
use crate::tokenizer::{single_item_input, EncodedItem, Vocabulary, MASK_ID};
use crate::trainer::{encode_items, finetune, history_input, pretrain, refresh_item_matrix, Catalog};

pub const CUTOFF: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Last item of the training part, predicted from the rest of it.
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Standard,
    ZeroShot,
}

/// Cosine of `query` with every row of `matrix`.
pub fn cosine_scores(query: &[f64], matrix: &Tensor) -> Result<Vec<f64>> {
    let qn = l2_norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNorm("query"));
    }
    (0..matrix.rows())
        .map(|r| {
            let row = matrix.row(r);
            let n = l2_norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm("item matrix row"));
            }
            Ok(dot(query, row) / (qn * n))
        })
        .collect()
}

/// 1-based rank of row `gt`: one plus the number of rows scoring strictly
/// higher plus the number of tied rows with a lower index.
pub fn rank_of(scores: &[f64], gt: usize) -> usize {
    let s = scores[gt];
    1 + scores.iter().enumerate().filter(|&(i, &x)| x > s || (x == s && i < gt)).count()
}

/// Rank of `gt` among all rows of `matrix` by cosine with `h_cls`.
pub fn rank_items(h_cls: &[f64], matrix: &Tensor, gt: usize) -> Result<usize> {
    if gt >= matrix.rows() {
        return Err(Error::Config(format!("ground truth {gt} outside a catalog of {}", matrix.rows())));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("item matrix"));
    }
    Ok(rank_of(&cosine_scores(h_cls, matrix)?, gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub n_users: usize,
}

/// Recall@k, NDCG@k and MRR averaged over `ranks`.
pub fn compute_metrics(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    let n = ranks.len() as f64;
    let (mut recall, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for &r in ranks {
        if r <= k {
            recall += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
        mrr += 1.0 / r as f64;
    }
    Ok(Metrics { recall: recall / n, ndcg: ndcg / n, mrr: mrr / n, n_users: ranks.len() })
}

/// One row of `report.{csv,json}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub study: String,
    pub variant: Option<String>,
    pub domain: String,
    pub split: Split,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub reveal_ratio: Option<f64>,
    pub drop_rate: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub n_seeds: Option<usize>,
    pub n_users: usize,
    pub catalog_size: usize,
    pub recall_at_10: f64,
    pub ndcg_at_10: f64,
    pub mrr: f64,
    pub recall_at_10_std: Option<f64>,
    pub ndcg_at_10_std: Option<f64>,
}

impl MetricsReport {
    pub fn new(study: &str, domain: &str, split: Split, mode: Mode, catalog_size: usize, m: Metrics) -> Self {
        Self {
            study: study.into(),
            variant: None,
            domain: domain.into(),
            split,
            mode,
            seed: None,
            reveal_ratio: None,
            drop_rate: None,
            mask_ratio: None,
            n_seeds: None,
            n_users: m.n_users,
            catalog_size,
            recall_at_10: m.recall,
            ndcg_at_10: m.ndcg,
            mrr: m.mrr,
            recall_at_10_std: None,
            ndcg_at_10_std: None,
        }
    }
}

/// `(sequence index, history, target)` for every user of `domain`.
pub fn split_cases<'a>(corpus: &'a Corpus, domain: &str, split: Split) -> Result<Vec<(usize, &'a [usize], usize)>> {
    let mut cases = Vec::new();
    for (i, seq) in corpus.sequences.iter().enumerate().filter(|(_, s)| s.domain == domain) {
        let loo = leave_one_out_split(seq)?;
        match split {
            Split::Train if loo.train.len() >= 2 => {
                let n = loo.train.len();
                cases.push((i, &loo.train[..n - 1], loo.train[n - 1]));
            }
            Split::Train => {}
            Split::Val => cases.push((i, loo.val_history(), loo.val_target)),
            Split::Test => cases.push((i, loo.test_history(), loo.test_target)),
        }
    }
    if cases.is_empty() {
        return Err(Error::Empty("evaluation users"));
    }
    Ok(cases)
}

/// Ground-truth ranks for every user of `domain`, in sequence order.
pub fn user_ranks(model: &Model, params: &ParamStore, corpus: &Corpus, items: &[EncodedItem], domain: &str, split: Split) -> Result<Vec<usize>> {
    let catalog = Catalog::of_domain(corpus, domain)?;
    let matrix = refresh_item_matrix(model, params, items, &catalog, 0)?;
    let cases = split_cases(corpus, domain, split)?;
    cases
        .par_iter()
        .map(|&(_, history, target)| {
            let h = encode(&history_input(items, history)?, model, params)?;
            let gt = catalog.row(target).ok_or(Error::Config(format!("item {target} outside catalog of {domain}")))?;
            rank_items(h.row(0), &matrix.rows, gt)
        })
        .collect()
}

/// Full-catalog ranking metrics of `params` on one domain. Zero-shot differs
/// only in the tag: the caller passes parameters that never saw the domain.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    corpus: &Corpus,
    items: &[EncodedItem],
    domain: &str,
    split: Split,
    mode: Mode,
) -> Result<MetricsReport> {
    let ranks = user_ranks(model, params, corpus, items, domain, split)?;
    let m = compute_metrics(&ranks, CUTOFF)?;
    let study = match mode {
        Mode::Standard => "eval",
        Mode::ZeroShot => "zeroshot",
    };
    Ok(MetricsReport::new(study, domain, split, mode, corpus.domain_catalog(domain).len(), m))
}

/// For each ratio, reveals that share of the true next item's tokens (the
/// rest become `[MASK]`), predicts `ĥ = FFN2(h_CLS ⊕ h_M)` with the context
/// network and ranks the catalog as encoded by the target network. The
/// revealed tokens for a user are a prefix of one seeded permutation, so a
/// higher ratio always reveals a superset.
pub fn reveal_study(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    items: &[EncodedItem],
    domain: &str,
    split: Split,
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("reveal ratio {r} outside [0, 1]")));
        }
    }
    let model = &ckpt.model;
    let catalog = Catalog::of_domain(corpus, domain)?;
    let matrix = refresh_item_matrix(model, &ckpt.target, items, &catalog, 0)?;
    let cases = split_cases(corpus, domain, split)?;
    let per_user: Vec<Vec<usize>> = cases
        .par_iter()
        .map(|&(s, history, target)| -> Result<Vec<usize>> {
            let h_cls = encode(&history_input(items, history)?, model, &ckpt.context)?.row(0).to_vec();
            let full = single_item_input(&items[target]);
            let mut order: Vec<usize> = (1..full.len()).collect();
            order.shuffle(&mut rng::derive(seed, &[purpose::REVEAL, s as u64]));
            let gt = catalog.row(target).ok_or(Error::Config(format!("item {target} outside catalog of {domain}")))?;
            ratios
                .iter()
                .map(|&r| {
                    let k = (r * order.len() as f64).round() as usize;
                    let mut view = full.clone();
                    for &pos in &order[k..] {
                        view.token_ids[pos] = MASK_ID;
                    }
                    let h_m = encode(&view, model, &ckpt.context)?.row(0).to_vec();
                    let pred = predict_next_repr(model, &ckpt.context, &h_cls, &h_m);
                    rank_items(&pred, &matrix.rows, gt)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    ratios
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let ranks: Vec<usize> = per_user.iter().map(|u| u[j]).collect();
            let mut rep = MetricsReport::new("reveal", domain, split, Mode::Standard, catalog.len(), compute_metrics(&ranks, CUTOFF)?);
            rep.reveal_ratio = Some(r);
            rep.seed = Some(seed);
            Ok(rep)
        })
        .collect()
}

/// Pretrain (optional), finetune (optional) and evaluate on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Pretraining domains; empty means every domain.
    pub pretrain_domains: Vec<String>,
    pub target_domain: String,
    pub split: Split,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            pretrain_domains: Vec::new(),
            target_domain: "domain0".into(),
            split: Split::Test,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Copies the pipeline seed into both stages and fixes the vocabulary
    /// size and ablation switches of the model.
    pub fn resolved(&self, vocab: &Vocabulary) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = self.seed;
        c.finetune.seed = self.seed;
        c.pretrain.stage = Stage::Pretrain;
        c.finetune.stage = Stage::Finetune;
        c.model.vocab_size = vocab.len();
        c.pretrain.apply_ablation(&mut c.model);
        c
    }
}

/// Runs one pipeline and returns the trained checkpoint with its report.
pub fn run_pipeline(corpus: &Corpus, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<(Checkpoint, MetricsReport)> {
    let cfg = cfg.resolved(vocab);
    let mut ckpt = Checkpoint::new(cfg.model.clone(), cfg.pretrain.clone(), vocab.hash())?;
    let mut quiet = |_: &crate::trainer::BatchLog| {};
    if cfg.pretrain.epochs > 0 {
        let items = encode_items(corpus, vocab, cfg.pretrain.token_drop_rate, cfg.seed)?;
        pretrain(&mut ckpt, corpus, &items, &cfg.pretrain_domains, &cfg.pretrain, &mut quiet)?;
    }
    let items = encode_items(corpus, vocab, cfg.finetune.token_drop_rate, cfg.seed)?;
    let mode = if cfg.finetune.epochs > 0 {
        finetune(&mut ckpt, corpus, &items, &cfg.target_domain, &cfg.finetune, &mut quiet)?;
        Mode::Standard
    } else {
        Mode::ZeroShot
    };
    let mut report = evaluate(&ckpt.model, &ckpt.context, corpus, &items, &cfg.target_domain, cfg.split, mode)?;
    report.study = "pipeline".into();
    report.seed = Some(cfg.seed);
    Ok((ckpt, report))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Averages per-seed reports into one row with standard deviations.
pub fn aggregate(study: &str, runs: &[MetricsReport]) -> Result<MetricsReport> {
    let first = runs.first().ok_or(Error::Empty("runs"))?;
    let (recall, recall_std) = mean_std(&runs.iter().map(|r| r.recall_at_10).collect::<Vec<_>>());
    let (ndcg, ndcg_std) = mean_std(&runs.iter().map(|r| r.ndcg_at_10).collect::<Vec<_>>());
    let (mrr, _) = mean_std(&runs.iter().map(|r| r.mrr).collect::<Vec<_>>());
    Ok(MetricsReport {
        study: study.into(),
        seed: None,
        n_seeds: Some(runs.len()),
        recall_at_10: recall,
        ndcg_at_10: ndcg,
        mrr,
        recall_at_10_std: Some(recall_std),
        ndcg_at_10_std: Some(ndcg_std),
        ..first.clone()
    })
}

/// One pretrain+finetune run per ratio and seed with the next-item mask
/// rate set to the ratio; one aggregated row per ratio.
pub fn mask_ratio_study(corpus: &Corpus, vocab: &Vocabulary, base: &PipelineConfig, ratios: &[f64], seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    for &r in ratios {
        TrainConfig { next_mask_rate: r, ..base.pretrain.clone() }.validate()?;
    }
    ratios
        .iter()
        .map(|&r| {
            let mut cfg = base.clone();
            cfg.pretrain.next_mask_rate = r;
            let runs = seeds
                .iter()
                .map(|&s| {
                    let cfg = PipelineConfig { seed: s, ..cfg.clone() };
                    run_pipeline(corpus, vocab, &cfg).map(|(_, rep)| rep)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut row = aggregate("mask-ratio", &runs)?;
            row.mask_ratio = Some(r);
            Ok(row)
        })
        .collect()
}

/// One pipeline per token-drop rate; item sentences lose that share of their
/// tokens in every stage.
pub fn robustness_study(corpus: &Corpus, vocab: &Vocabulary, base: &PipelineConfig, drop_rates: &[f64]) -> Result<Vec<MetricsReport>> {
    drop_rates
        .iter()
        .map(|&d| {
            let mut cfg = base.clone();
            cfg.pretrain.token_drop_rate = d;
            cfg.finetune.token_drop_rate = d;
            let (_, mut rep) = run_pipeline(corpus, vocab, &cfg)?;
            rep.study = "robustness".into();
            rep.drop_rate = Some(d);
            Ok(rep)
        })
        .collect()
}

/// Named ablation presets.
pub const ABLATION_VARIANTS: &[&str] = &[
    "full",
    "no-mlm",
    "no-pretrain",
    "no-token-type",
    "no-mlm-no-token-pos",
    "no-mlm-no-token-pos-no-token-type",
    "drop-contrastive-pretrain",
    "bpr-finetune",
];

/// Applies preset `variant` to `cfg`.
pub fn apply_variant(cfg: &mut PipelineConfig, variant: &str) -> Result<()> {
    let both = |cfg: &mut PipelineConfig, f: &dyn Fn(&mut TrainConfig)| {
        f(&mut cfg.pretrain);
        f(&mut cfg.finetune);
    };
    match variant {
        "full" => {}
        "no-mlm" => cfg.pretrain.ablation.disable_mlm = true,
        "no-pretrain" => cfg.pretrain.epochs = 0,
        "no-token-type" => both(cfg, &|t| t.ablation.disable_token_type = true),
        "no-mlm-no-token-pos" => {
            cfg.pretrain.ablation.disable_mlm = true;
            both(cfg, &|t| t.ablation.disable_token_position = true);
        }
        "no-mlm-no-token-pos-no-token-type" => {
            cfg.pretrain.ablation.disable_mlm = true;
            both(cfg, &|t| {
                t.ablation.disable_token_position = true;
                t.ablation.disable_token_type = true;
            });
        }
        "drop-contrastive-pretrain" => cfg.pretrain.ablation.disable_contrastive = true,
        "bpr-finetune" => cfg.finetune.ablation.use_bpr = true,
        other => {
            return Err(Error::Config(format!("unknown ablation variant {other:?}; expected one of {}", ABLATION_VARIANTS.join(", "))))
        }
    }
    Ok(())
}

pub fn ablation_study(corpus: &Corpus, vocab: &Vocabulary, base: &PipelineConfig, variant: &str, seeds: &[u64]) -> Result<MetricsReport> {
    let mut cfg = base.clone();
    apply_variant(&mut cfg, variant)?;
    let runs = seeds
        .iter()
        .map(|&s| run_pipeline(corpus, vocab, &PipelineConfig { seed: s, ..cfg.clone() }).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let mut row = aggregate("ablation", &runs)?;
    row.variant = Some(variant.into());
    Ok(row)
}

/// Writes `report.csv` and `report.json` under `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}
