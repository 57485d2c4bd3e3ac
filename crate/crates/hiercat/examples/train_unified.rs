//! Trains the unified model end to end and evaluates it.
//!
//! One network predicts all three levels at once; the losses are
//! inverse-frequency weighted cross entropies for category and
//! sub-category plus a weighted binary cross entropy for attributes,
//! optimized jointly with Adam. The run is deterministic given the seed.

use hiercat::data::{generate, GeneratorConfig, InputMode, LabelSpace};
use hiercat::model::{InputKind, UnifiedModel, UnifiedModelConfig, Variant};
use hiercat::train::{evaluate_unified, train_unified, TrainConfig};

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
    let labels = LabelSpace::from_tree(&generated.tree);

    let mut model = UnifiedModel::build(
        UnifiedModelConfig {
            input: InputKind::Feature { dim: 24 },
            hidden_dim: 32,
            n_categories: labels.n_categories(),
            n_sub_categories: labels.n_sub_categories(),
            n_attributes: labels.n_attributes(),
            variant: Variant::Final,
            dropout: 0.3,
            l2_factor: 0.0005,
        },
        7,
    )?;

    let config = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    train_unified(
        &mut model,
        &generated.tree,
        &split.train,
        &config,
        &mut std::io::stdout(),
    )?;

    let report = evaluate_unified(&model, &generated.tree, &split.test, 0.75)?;
    println!("\nheld-out evaluation:\n{}", report.render());

    model.save(std::path::Path::new("target/unified.ckpt"))?;
    println!("checkpoint saved to target/unified.ckpt");
    Ok(())
}
