//! The first-approach pipeline: a generic category model routing into
//! per-category specialists.
//!
//! Contrast with the unified model: the pipeline needs one sub-category
//! and one attribute model per category, covers a product only when its
//! routed category has trained specialists, and can emit (category, sub)
//! pairs that never co-occur in the taxonomy. Oracle mode replaces the
//! routing decision with the annotated category, which is how the sub and
//! attribute specialists look when routing mistakes are taken out.

use hiercat::data::{generate, GeneratorConfig, InputMode};
use hiercat::train::{evaluate_pipeline, train_pipeline, TrainConfig};

fn main() -> hiercat::Result<()> {
    let generated = generate(&GeneratorConfig {
        products: 1500,
        categories: 4,
        sub_categories: 10,
        attributes: 8,
        mode: InputMode::Feature { dim: 24 },
        ..GeneratorConfig::default()
    })?;
    let split = generated.dataset.split(0.75, 7)?;

    let config = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let pipeline = train_pipeline(
        &generated.tree,
        &split.train,
        32,
        1,
        &config,
        &mut std::io::stdout(),
    )?;
    println!(
        "sub-category specialists cover {:.0}% of categories",
        pipeline.sub_coverage() * 100.0
    );

    let routed = evaluate_pipeline(&pipeline, &generated.tree, &split.test, 0.75, false)?;
    println!("\nrouted by the category model:\n{}", routed.render());

    let oracle = evaluate_pipeline(&pipeline, &generated.tree, &split.test, 0.75, true)?;
    println!("routed by the annotated category:\n{}", oracle.render());
    Ok(())
}
