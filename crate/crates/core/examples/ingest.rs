//! Turn raw item metadata and interaction logs into a five-core corpus.

use jepa4rec::corpus::{five_core_filter, ItemRecord, RawInteraction};

fn main() -> jepa4rec::Result<()> {
    let items: Vec<ItemRecord> = (0..8)
        .map(|i| {
            ItemRecord::new(
                format!("sku{i}"),
                [("Title", format!("widget model {i}")), ("Brand", if i % 2 == 0 { "acme".into() } else { "nova".to_string() })],
            )
        })
        .collect();

    // Seven regular users buy items 0..6; one stray user touches item 7 once.
    let mut interactions = Vec::new();
    for u in 0..7 {
        for (t, i) in (0..6).map(|k| (k + u) % 6).enumerate() {
            interactions.push(RawInteraction { user_id: format!("u{u}"), item_id: format!("sku{i}"), timestamp: t as i64, domain: "shop".into() });
        }
    }
    interactions.push(RawInteraction { user_id: "stray".into(), item_id: "sku7".into(), timestamp: 0, domain: "shop".into() });

    let corpus = five_core_filter(items, interactions)?;
    println!("items kept: {}", corpus.items.len());
    println!("users kept: {}", corpus.sequences.len());
    for seq in corpus.sequences.iter().take(2) {
        let ids: Vec<&str> = seq.items.iter().map(|&i| corpus.items[i].item_id.as_str()).collect();
        println!("{}: {}", seq.user_id, ids.join(" -> "));
    }
    Ok(())
}
