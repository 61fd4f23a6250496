//! Run every ablation preset once on a small two-domain setup.

use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::evaluator::{ablation_study, PipelineConfig, ABLATION_VARIANTS};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_domains: 2, n_users: 30, seed: 8, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let base = PipelineConfig {
        model: ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, window: 16, token_init_std: 0.2, ..ModelConfig::default() },
        pretrain: TrainConfig { epochs: 2, learning_rate: 1e-3, batch_size: 16, ..TrainConfig::pretrain() },
        finetune: TrainConfig { epochs: 5, learning_rate: 1e-3, batch_size: 16, ..TrainConfig::finetune() },
        pretrain_domains: vec!["domain1".into()],
        ..PipelineConfig::default()
    };
    for variant in ABLATION_VARIANTS {
        let r = ablation_study(&corpus, &vocab, &base, variant, &[0])?;
        println!("{variant:<36} recall@10 {:.3}  ndcg@10 {:.3}", r.recall_at_10, r.ndcg_at_10);
    }
    Ok(())
}
