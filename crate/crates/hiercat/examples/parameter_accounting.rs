//! Closed-form parameter accounting for every variant.
//!
//! The counts come from the layer dimensions alone, and the library
//! asserts elsewhere that they match the registered tensors exactly. At
//! the reference configuration (backbone 2048, hidden 1024, classes
//! 64/95/75) the classification head holds 23,327,978 parameters and the
//! documented backbone constant brings the model to 46,915,690.

use hiercat::model::{count_parameters, UnifiedModelConfig, Variant};

fn main() {
    let paper = UnifiedModelConfig::paper_defaults();
    println!("reference configuration, final variant:");
    print!("{}", count_parameters(&paper).render(true));

    // The ablation without message passing is built to the same head
    // total: each level gets a plain chain of dense layers whose count
    // matches the message block it replaces.
    let no_mp = UnifiedModelConfig { variant: Variant::NoMp, ..paper };
    println!("\nno_mp head total: {}", count_parameters(&no_mp).head_total);

    // Accounting scales down with the dimensions; a desk-scale model is a
    // few hundred thousand parameters.
    let desk = UnifiedModelConfig {
        input: hiercat::model::InputKind::Feature { dim: 64 },
        hidden_dim: 64,
        n_categories: 8,
        n_sub_categories: 20,
        n_attributes: 15,
        ..paper
    };
    println!("\ndesk-scale configuration:");
    print!("{}", count_parameters(&desk).render(false));
}
