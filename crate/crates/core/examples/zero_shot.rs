//! Pretrain on one domain and rank items of a domain never seen in training.

use jepa4rec::checkpoint::Checkpoint;
use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::evaluator::{evaluate, Mode, Split};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;
use jepa4rec::trainer::{encode_items, pretrain};

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_domains: 2, n_items: 60, n_users: 60, n_brands: 6, seed: 4, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let items = encode_items(&corpus, &vocab, 0.0, 0)?;

    let model = ModelConfig { vocab_size: vocab.len(), d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, window: 16, token_init_std: 0.2, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs: 8, learning_rate: 1e-3, batch_size: 16, ..TrainConfig::pretrain() };
    let mut ckpt = Checkpoint::new(model, cfg.clone(), vocab.hash())?;

    let before = evaluate(&ckpt.model, &ckpt.context, &corpus, &items, "domain1", Split::Test, Mode::ZeroShot)?;
    pretrain(&mut ckpt, &corpus, &items, &["domain0".to_string()], &cfg, &mut |_| {})?;
    let after = evaluate(&ckpt.model, &ckpt.context, &corpus, &items, "domain1", Split::Test, Mode::ZeroShot)?;

    println!("random baseline recall@10 {:.3}", 10.0 / after.catalog_size as f64);
    println!("untrained       recall@10 {:.3}", before.recall_at_10);
    println!("pretrained      recall@10 {:.3} ndcg@10 {:.3}", after.recall_at_10, after.ndcg_at_10);
    Ok(())
}
