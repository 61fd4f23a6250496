//! Save a checkpoint halfway through training, resume it, and confirm the
//! result is bit-identical to an uninterrupted run.

use jepa4rec::checkpoint::Checkpoint;
use jepa4rec::config::TrainConfig;
use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::model::ModelConfig;
use jepa4rec::tokenizer::Vocabulary;
use jepa4rec::trainer::{encode_items, pretrain};

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_users: 24, seed: 9, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    let items = encode_items(&corpus, &vocab, 0.0, 0)?;
    let model = ModelConfig { vocab_size: vocab.len(), d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, window: 8, ..ModelConfig::default() };
    let full = TrainConfig { epochs: 4, learning_rate: 1e-3, batch_size: 8, ..TrainConfig::pretrain() };
    let half = TrainConfig { epochs: 2, ..full.clone() };

    let mut straight = Checkpoint::new(model.clone(), full.clone(), vocab.hash())?;
    pretrain(&mut straight, &corpus, &items, &[], &full, &mut |_| {})?;

    let path = std::env::temp_dir().join("jepa4rec-resume.ckpt");
    let mut first = Checkpoint::new(model, half.clone(), vocab.hash())?;
    pretrain(&mut first, &corpus, &items, &[], &half, &mut |_| {})?;
    first.save(&path)?;
    let mut resumed = Checkpoint::load(&path, &vocab.hash())?;
    pretrain(&mut resumed, &corpus, &items, &[], &full, &mut |_| {})?;

    let same = resumed.to_bytes()? == straight.to_bytes()?;
    println!("resumed at epoch 2, finished at epoch {}: identical = {same}", resumed.epoch);
    println!("sidecar: {}", jepa4rec::checkpoint::sidecar_path(&path).display());
    Ok(())
}
