//! Generates a synthetic catalog and writes it to disk.
//!
//! The generator builds a five-level taxonomy, samples products with a
//! power-law sub-category imbalance, and keeps two views of each product's
//! attributes: the full hidden truth and the annotations, which drop each
//! true attribute with the configured missingness. Rerunning with the same
//! seed reproduces every file byte for byte.

use hiercat::data::{generate, GeneratorConfig, InputMode};

fn main() -> hiercat::Result<()> {
    let config = GeneratorConfig {
        products: 2000,
        categories: 6,
        sub_categories: 15,
        attributes: 10,
        imbalance: 1.2,
        missingness: 0.3,
        mode: InputMode::Feature { dim: 32 },
        seed: 42,
        ..GeneratorConfig::default()
    };
    let generated = generate(&config)?;

    let dir = std::path::Path::new("target/example-data");
    generated.dataset.save(dir)?;
    generated.tree.save(&dir.join("tree.tsv"))?;

    println!("{}", generated.dataset.stats(&generated.tree).render());

    // The power law shows up directly in the per-sub-category counts.
    let mut counts = std::collections::BTreeMap::new();
    for record in &generated.dataset.records {
        *counts.entry(record.sub_category).or_insert(0usize) += 1;
    }
    let head = counts.values().max().unwrap();
    let tail = counts.values().min().unwrap();
    println!("most populated sub-category {head} products, least {tail}");

    // Annotations are a lossy subset of the hidden truth.
    let hidden = generated.dataset.hidden_truth.as_ref().unwrap();
    let annotated: usize = generated
        .dataset
        .records
        .iter()
        .map(|r| r.attributes.len())
        .sum();
    let truth: usize = hidden.values().map(|v| v.len()).sum();
    println!("annotations kept {annotated} of {truth} true attribute entries");
    println!("files under {}", dir.display());
    Ok(())
}
