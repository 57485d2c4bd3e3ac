//! Image mode: synthetic product images and the training-time transforms.
//!
//! Image payloads are tiny rendered scenes: the background encodes the
//! category, the centered shape the sub-category, and border markers the
//! attributes. Augmentation draws one transform per gated product: a
//! horizontal flip, a shifted crop against a reflective pad, or a small
//! rotation.

use hiercat::data::augment::{augment_traced, Transform};
use hiercat::data::{generate, GeneratorConfig, InputMode, Payload};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hiercat::Result<()> {
    let generated = generate(&GeneratorConfig {
        products: 200,
        categories: 4,
        sub_categories: 8,
        attributes: 6,
        mode: InputMode::Image {
            height: 32,
            width: 32,
        },
        noise: 0.1,
        seed: 5,
        ..GeneratorConfig::default()
    })?;

    let image = match &generated.dataset.records[0].payload {
        Payload::Image(image) => image.clone(),
        Payload::Features(_) => unreachable!("image mode was requested"),
    };
    println!(
        "first product renders {}x{} RGB, top-left pixel ({}, {}, {})",
        image.height,
        image.width,
        image.get(0, 0, 0),
        image.get(0, 0, 1),
        image.get(0, 0, 2)
    );

    // Run the augmentation gate over one image many times and tally which
    // transforms come out.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut flips = 0;
    let mut crops = 0;
    let mut rotations = 0;
    let mut untouched = 0;
    for _ in 0..1000 {
        match augment_traced(&image, 0.5, &mut rng).1 {
            None => untouched += 1,
            Some(Transform::Flip) => flips += 1,
            Some(Transform::Crop { .. }) => crops += 1,
            Some(Transform::Rotate { .. }) => rotations += 1,
        }
    }
    println!(
        "gate at 0.5 over 1000 draws: {untouched} untouched, {flips} flips, \
         {crops} crops, {rotations} rotations"
    );

    // A flip is an involution; the pixels say so.
    let (flipped, _) = augment_traced(&image, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let _ = flipped;
    let once = hiercat::data::augment::hflip(&image);
    let twice = hiercat::data::augment::hflip(&once);
    println!("flip twice restores the image: {}", twice == image);
    Ok(())
}
