//! Pretrain on a source domain, finetune on a second one and compare against
//! finetuning the same architecture from scratch.

use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::evaluator::{run_pipeline, PipelineConfig, Split};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_domains: 2, n_items: 100, n_users: 100, n_brands: 10, seed: 1, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;

    let model = ModelConfig { d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64, window: 16, token_init_std: 0.2, ..ModelConfig::default() };
    let base = PipelineConfig {
        model,
        pretrain: TrainConfig { epochs: 30, learning_rate: 1e-3, ..TrainConfig::pretrain() },
        finetune: TrainConfig { epochs: 10, learning_rate: 3e-4, ..TrainConfig::finetune() },
        pretrain_domains: vec!["domain1".into()],
        target_domain: "domain0".into(),
        split: Split::Test,
        seed: 3,
    };

    let (pretrained, with) = run_pipeline(&corpus, &vocab, &base)?;
    let scratch = PipelineConfig { pretrain: TrainConfig { epochs: 0, ..base.pretrain.clone() }, ..base };
    let (_, without) = run_pipeline(&corpus, &vocab, &scratch)?;

    for r in pretrained.history.iter().filter(|r| r.holdout_loss.is_some()).step_by(5) {
        println!("pretrain epoch {} loss {:.4} holdout {:.4}", r.epoch, r.loss, r.holdout_loss.unwrap_or(f64::NAN));
    }
    println!("pretrained  recall@10 {:.3} ndcg@10 {:.3}", with.recall_at_10, with.ndcg_at_10);
    println!("scratch     recall@10 {:.3} ndcg@10 {:.3}", without.recall_at_10, without.ndcg_at_10);
    Ok(())
}
