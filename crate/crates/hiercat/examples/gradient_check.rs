//! Checks the tape's gradients against central finite differences.
//!
//! The analytic gradients drive every training step, so they are held to a
//! numeric oracle: nudge one parameter at a time, difference the loss, and
//! compare. The same machinery guards the full model in the test suite;
//! this is the small, readable version.

use hiercat::gradcheck::{finite_difference, max_relative_error};
use hiercat::loss::{total_loss, weighted_bce, weighted_ce};
use hiercat::model::{InputKind, UnifiedModel, UnifiedModelConfig, Variant};
use hiercat::nn::{l2_penalty, Mode};
use hiercat::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hiercat::Result<()> {
    let mut model = UnifiedModel::build(
        UnifiedModelConfig {
            input: InputKind::Feature { dim: 8 },
            hidden_dim: 10,
            n_categories: 3,
            n_sub_categories: 4,
            n_attributes: 3,
            variant: Variant::Final,
            dropout: 0.3,
            l2_factor: 0.0005,
        },
        5,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = Tensor::new(vec![2, 8], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let cat_t = vec![0usize, 2];
    let sub_t = vec![1usize, 3];
    let attr_t = vec![vec![0usize, 2], vec![]];
    let w_cat = vec![1.0, 1.2, 0.8];
    let w_sub = vec![0.9, 1.1, 1.0, 1.0];
    let w_attr = vec![2.0, 3.0, 4.0];

    let loss_of = |m: &UnifiedModel| -> f64 {
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
        let mut inert = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&tape, &bound, x, Mode::Eval, &mut inert);
        total_loss(
            weighted_ce(&tape, out.cat_probs, &cat_t, &w_cat),
            weighted_ce(&tape, out.sub_probs, &sub_t, &w_sub),
            weighted_bce(&tape, out.attr_scores, &attr_t, &w_attr),
            l2_penalty(&bound, &m.dense_layers()),
        )
        .item()
    };

    // Analytic gradients for every parameter in one backward pass.
    let ids: Vec<_> = model.params.ids().collect();
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
        let mut inert = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&tape, &bound, x, Mode::Eval, &mut inert);
        let loss = total_loss(
            weighted_ce(&tape, out.cat_probs, &cat_t, &w_cat),
            weighted_ce(&tape, out.sub_probs, &sub_t, &w_sub),
            weighted_bce(&tape, out.attr_scores, &attr_t, &w_attr),
            l2_penalty(&bound, &model.dense_layers()),
        );
        let grads = tape.backward(loss);
        ids.iter().map(|&id| grads.wrt(bound.value(id)).to_vec()).collect()
    };

    let mut worst = 0.0f64;
    let mut total = 0usize;
    for (pi, &id) in ids.iter().enumerate() {
        let name = model.params.name(id).to_string();
        let base = model.params.get(id).data().to_vec();
        let numeric = finite_difference(
            |x| {
                model.params.get_mut(id).data_mut().copy_from_slice(x);
                loss_of(&model)
            },
            &base,
            1e-5,
        );
        model.params.get_mut(id).data_mut().copy_from_slice(&base);
        let err = max_relative_error(&analytic[pi], &numeric);
        worst = worst.max(err);
        total += base.len();
        println!("{name:<28} {:>5} values  worst rel err {err:.3e}", base.len());
    }
    println!("\nchecked {total} parameters, worst relative error {worst:.3e}");
    Ok(())
}
