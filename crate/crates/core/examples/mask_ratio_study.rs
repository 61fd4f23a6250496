//! Sweep the next-item mask rate used in pretraining over two seeds and write
//! the aggregated report.

use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::evaluator::{mask_ratio_study, write_reports, PipelineConfig};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_domains: 2, n_users: 30, seed: 5, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let base = PipelineConfig {
        model: ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, window: 16, token_init_std: 0.2, ..ModelConfig::default() },
        pretrain: TrainConfig { epochs: 2, learning_rate: 1e-3, batch_size: 16, ..TrainConfig::pretrain() },
        finetune: TrainConfig { epochs: 5, learning_rate: 1e-3, batch_size: 16, ..TrainConfig::finetune() },
        pretrain_domains: vec!["domain1".into()],
        ..PipelineConfig::default()
    };

    let rows = mask_ratio_study(&corpus, &vocab, &base, &[0.25, 0.5, 0.75], &[0, 1])?;
    for r in &rows {
        println!(
            "mask {:.2}  recall@10 {:.3} ± {:.3}",
            r.mask_ratio.unwrap_or(0.0),
            r.recall_at_10,
            r.recall_at_10_std.unwrap_or(0.0)
        );
    }
    let out = std::env::temp_dir().join("jepa4rec-mask-ratio");
    write_reports(&out, &rows)?;
    println!("report in {}", out.display());
    Ok(())
}
