//! Tokenize items into attribute-tagged token sequences and assemble a user
//! history with its `[CLS]` token and item positions.

use jepa4rec::corpus::{generate_synthetic_corpus, SynthSpec};
use jepa4rec::tokenizer::{assemble_sequence, encode_item, Vocabulary};

fn main() -> jepa4rec::Result<()> {
    let corpus = generate_synthetic_corpus(&SynthSpec { n_users: 20, ..SynthSpec::default() })?;
    let vocab = Vocabulary::build(&corpus, 1)?;

    let seq = &corpus.sequences[0];
    let encoded = seq.items[..3].iter().map(|&i| encode_item(&corpus.items[i], &vocab)).collect::<jepa4rec::Result<Vec<_>>>()?;
    for e in &encoded {
        let words: Vec<&str> = e.ids.iter().map(|&t| vocab.token(t).unwrap_or("?")).collect();
        println!("{:?}", words.iter().zip(&e.types).map(|(w, t)| format!("{w}/{t:?}")).collect::<Vec<_>>());
    }

    let input = assemble_sequence(&encoded.iter().collect::<Vec<_>>())?;
    println!("history of {} items -> {} tokens", input.num_items(), input.len());
    println!("item positions: {:?}", input.item_positions);
    Ok(())
}
