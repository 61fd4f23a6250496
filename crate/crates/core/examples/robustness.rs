//! Drop a share of every item's tokens and measure how ranking degrades.

use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::evaluator::{robustness_study, PipelineConfig, Split};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_users: 20, seed: 6, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let base = PipelineConfig {
        model: ModelConfig { d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64, window: 16, token_init_std: 0.2, ..ModelConfig::default() },
        pretrain: TrainConfig { epochs: 0, ..TrainConfig::pretrain() },
        finetune: TrainConfig { epochs: 40, learning_rate: 1e-3, batch_size: 20, ..TrainConfig::finetune() },
        split: Split::Train,
        ..PipelineConfig::default()
    };
    for r in robustness_study(&corpus, &vocab, &base, &[0.0, 0.2, 0.4, 0.6])? {
        println!("drop {:.1}  recall@10 {:.3}  ndcg@10 {:.3}", r.drop_rate.unwrap_or(0.0), r.recall_at_10, r.ndcg_at_10);
    }
    Ok(())
}
