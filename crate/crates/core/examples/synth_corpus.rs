//! Generate a synthetic two-domain corpus, write it to disk, read it back and
//! build its vocabulary.

use jepa4rec::corpus::{generate_synthetic_corpus, Corpus, SynthSpec};
use jepa4rec::tokenizer::Vocabulary;

fn main() -> jepa4rec::Result<()> {
    let spec = SynthSpec { n_domains: 2, n_items: 40, n_users: 30, seed: 7, ..SynthSpec::default() };
    let corpus = generate_synthetic_corpus(&spec)?;

    let dir = std::env::temp_dir().join("jepa4rec-synth-example");
    corpus.write_dir(&dir)?;
    let back = Corpus::read_dir(&dir)?;
    assert_eq!(back, corpus);

    let vocab = Vocabulary::build(&corpus, 1)?;
    println!("{}", serde_json::to_string_pretty(&corpus.manifest())?);
    println!("vocabulary: {} tokens, hash {}", vocab.len(), vocab.hash());
    println!("first item: {}", jepa4rec::corpus::item_sentence(&corpus.items[0])?);
    println!("written to {}", dir.display());
    Ok(())
}
