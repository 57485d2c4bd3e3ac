//! Structured predictions: category, sub-category, thresholded attributes,
//! and the gender/family ancestors inferred by walking the taxonomy up
//! from the predicted category.

use hiercat::data::{generate, GeneratorConfig, InputMode, LabelSpace};
use hiercat::model::{InputKind, UnifiedModel, UnifiedModelConfig, Variant};
use hiercat::train::{predict_unified, train_unified, Prediction, TrainConfig};

fn main() -> hiercat::Result<()> {
    let generated = generate(&GeneratorConfig {
        products: 800,
        categories: 4,
        sub_categories: 8,
        attributes: 6,
        attribute_rate: 0.5,
        mode: InputMode::Feature { dim: 16 },
        ..GeneratorConfig::default()
    })?;
    let labels = LabelSpace::from_tree(&generated.tree);
    let mut model = UnifiedModel::build(
        UnifiedModelConfig {
            input: InputKind::Feature { dim: 16 },
            hidden_dim: 24,
            n_categories: labels.n_categories(),
            n_sub_categories: labels.n_sub_categories(),
            n_attributes: labels.n_attributes(),
            variant: Variant::Final,
            dropout: 0.3,
            l2_factor: 0.0005,
        },
        3,
    )?;
    let split = generated.dataset.split(0.8, 3)?;
    train_unified(
        &mut model,
        &generated.tree,
        &split.train,
        &TrainConfig { epochs: 5, ..TrainConfig::default() },
        &mut std::io::sink(),
    )?;

    let predictions = predict_unified(&model, &generated.tree, &split.test, 0.75)?;
    println!("{}", Prediction::RENDER_HEADER);
    for p in predictions.iter().take(10) {
        println!("{}", p.render());
    }

    // Every inferred ancestor pair is the tree's own, by construction.
    let valid = predictions.iter().all(|p| {
        matches!(
            generated.tree.category_ancestors(p.category),
            Ok((family, gender)) if (p.family, p.gender) == (family, gender)
        )
    });
    println!("\nall {} ancestor chains tree-valid: {valid}", predictions.len());
    Ok(())
}
