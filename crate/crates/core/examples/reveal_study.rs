//! Reveal growing shares of the next item's text to the predictor and watch
//! ranking quality respond.

use jepa4rec::checkpoint::Checkpoint;
use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::evaluator::{reveal_study, Split};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;
use jepa4rec::trainer::{encode_items, pretrain};

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_items: 100, n_users: 100, n_brands: 10, seed: 2, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let items = encode_items(&corpus, &vocab, 0.0, 0)?;

    let model = ModelConfig { vocab_size: vocab.len(), d_model: 32, n_layers: 1, n_heads: 4, d_ff: 64, window: 16, token_init_std: 0.2, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs: 30, learning_rate: 1e-3, ..TrainConfig::pretrain() };
    let mut ckpt = Checkpoint::new(model, cfg.clone(), vocab.hash())?;
    pretrain(&mut ckpt, &corpus, &items, &[], &cfg, &mut |_| {})?;

    for row in reveal_study(&ckpt, &corpus, &items, "domain0", Split::Test, &[0.0, 0.25, 0.5, 1.0], 11)? {
        println!("reveal {:.2}  recall@10 {:.3}  ndcg@10 {:.3}", row.reveal_ratio.unwrap_or(0.0), row.recall_at_10, row.ndcg_at_10);
    }
    Ok(())
}
