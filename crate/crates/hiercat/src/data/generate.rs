//! Synthetic dataset generator: a deterministic taxonomy plus products
//! sampled under a power-law sub-category imbalance, with per-attribute
//! annotation missingness and a retained hidden truth.
//!
//! Feature payloads are built from two orthogonal subspaces: the first half
//! of the vector carries the sub-category prototype, the second half the
//! summed offsets of the product's true attributes, and Gaussian noise is
//! added on top. At zero noise a nearest-prototype rule on the first half
//! is exact, which gives tests a Bayes oracle; attributes stay linearly
//! readable from the second half whether or not they were annotated.
//!
//! RNG layout: one ChaCha stream per product (stream i+1), stream 0 for the
//! global prototype draws. Products can therefore be generated in any order
//! or in parallel without changing a single byte of the output. Within a
//! product the draw order is fixed: sub-category, attribute coin flips,
//! missingness coin flips, payload noise.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::taxonomy::CategoryTree;
use crate::{Error, Result};

use super::{Dataset, Image, InputMode, Payload, ProductRecord};

pub const ATTR_OFFSET_SIGMA: f64 = 0.5;

const GENDER_BASE: u32 = 1;
const FAMILY_BASE: u32 = 10;
const CATEGORY_BASE: u32 = 100;
const SUB_BASE: u32 = 1000;
const ATTR_BASE: u32 = 5000;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub products: usize,
    pub categories: usize,
    pub sub_categories: usize,
    pub attributes: usize,
    /// Power-law exponent over sub-categories; 0 is uniform.
    pub imbalance: f64,
    /// Probability that each attribute attached to the product's category
    /// is true for the product.
    pub attribute_rate: f64,
    /// Upper bound on true attributes per product.
    pub max_attributes: usize,
    /// Probability that a true attribute is missing from the annotations.
    pub missingness: f64,
    /// Gaussian noise scale on payloads.
    pub noise: f64,
    pub mode: InputMode,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            products: 10_000,
            categories: 8,
            sub_categories: 20,
            attributes: 15,
            imbalance: 1.0,
            attribute_rate: 0.25,
            max_attributes: 5,
            missingness: 0.0,
            noise: 0.25,
            mode: InputMode::Feature { dim: 64 },
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.products == 0
            || self.categories == 0
            || self.sub_categories == 0
            || self.attributes == 0
        {
            return err("product and tree-shape counts must be at least 1".into());
        }
        if self.sub_categories > self.products {
            return err(format!(
                "{} sub-categories across {} products is infeasible; every sub-category receives at least one product",
                self.sub_categories, self.products
            ));
        }
        if self.categories > 360 || self.sub_categories > 4000 {
            return err("tree shape exceeds the fixed id layout (360 categories, 4000 sub-categories)".into());
        }
        for (rate, name) in [
            (self.attribute_rate, "attribute rate"),
            (self.missingness, "missingness"),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return err(format!("{name} {rate} outside [0, 1]"));
            }
        }
        if self.imbalance < 0.0 || self.noise < 0.0 {
            return err("imbalance exponent and noise scale must be non-negative".into());
        }
        match self.mode {
            InputMode::Feature { dim } if dim < 2 => {
                err("feature mode needs dim >= 2 for the prototype and attribute halves".into())
            }
            InputMode::Image { height, width } if height < 8 || width < 8 => {
                err(format!("image mode needs at least 8x8, got {height}x{width}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug)]
pub struct Generated {
    pub tree: CategoryTree,
    pub dataset: Dataset,
    /// Per sub-category index: the first-half prototype (feature mode only).
    pub sub_prototypes: Vec<Vec<f64>>,
    /// Per attribute index: the second-half offset (feature mode only).
    pub attr_offsets: Vec<Vec<f64>>,
}

/// Which categories attribute `k` attaches to: one to three, spread
/// deterministically so the attachment map depends only on the tree shape.
fn attachment_categories(attr_index: usize, categories: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for t in 0..(1 + attr_index % 3) {
        let c = (attr_index + 7 * t) % categories;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort_unstable();
    out
}

fn build_tree(config: &GeneratorConfig) -> Result<CategoryTree> {
    let mut tree = CategoryTree::new();
    let families = (config.categories + 3) / 4;
    tree.gender(GENDER_BASE, "women")?;
    if families >= 2 {
        tree.gender(GENDER_BASE + 1, "men")?;
    }
    for f in 0..families {
        let gender = GENDER_BASE + (f % 2).min(families - 1) as u32;
        tree.family(FAMILY_BASE + f as u32, &format!("family-{f:02}"), gender)?;
    }
    for c in 0..config.categories {
        tree.category(
            CATEGORY_BASE + c as u32,
            &format!("category-{c:02}"),
            FAMILY_BASE + (c % families) as u32,
        )?;
    }
    for s in 0..config.sub_categories {
        tree.sub_category(
            SUB_BASE + s as u32,
            &format!("sub-{s:02}"),
            CATEGORY_BASE + (s % config.categories) as u32,
        )?;
    }
    for a in 0..config.attributes {
        let attached: Vec<u32> = attachment_categories(a, config.categories)
            .into_iter()
            .map(|c| CATEGORY_BASE + c as u32)
            .collect();
        tree.attribute(ATTR_BASE + a as u32, &format!("attr-{a:02}"), &attached)?;
    }
    Ok(tree)
}

const CATEGORY_PALETTE: [[u8; 3]; 8] = [
    [40, 40, 48],
    [96, 48, 32],
    [32, 80, 48],
    [48, 48, 104],
    [104, 96, 32],
    [88, 32, 88],
    [32, 96, 96],
    [72, 72, 72],
];

const SUB_PALETTE: [[u8; 3]; 12] = [
    [220, 60, 60],
    [60, 200, 80],
    [70, 90, 230],
    [230, 210, 60],
    [220, 70, 200],
    [60, 210, 210],
    [240, 140, 40],
    [150, 240, 150],
    [150, 150, 250],
    [250, 250, 180],
    [250, 170, 220],
    [180, 250, 250],
];

const ATTR_PALETTE: [[u8; 3]; 12] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 255, 0],
    [0, 128, 255],
    [255, 255, 255],
    [128, 0, 255],
    [0, 255, 128],
];

fn draw_rect(img: &mut Image, y0: usize, y1: usize, x0: usize, x1: usize, rgb: [u8; 3]) {
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            for c in 0..3 {
                img.set(y, x, c, rgb[c]);
            }
        }
    }
}

/// Background keyed to the category, one centered shape keyed to the
/// sub-category, a small border marker per true attribute.
fn draw_image(
    height: usize,
    width: usize,
    cat_idx: usize,
    sub_idx: usize,
    attrs: &[usize],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Image {
    let mut img = Image::new(height, width);
    img.fill(CATEGORY_PALETTE[cat_idx % CATEGORY_PALETTE.len()]);

    let color = SUB_PALETTE[sub_idx % SUB_PALETTE.len()];
    let (cy, cx) = (height / 2, width / 2);
    let size = height.min(width) / 4 + sub_idx % 3;
    match (sub_idx / 3) % 3 {
        0 => draw_rect(&mut img, cy - size / 2, cy + size / 2 + 1, cx - size / 2, cx + size / 2 + 1, color),
        1 => {
            for y in 0..height {
                for x in 0..width {
                    let dy = y as i64 - cy as i64;
                    let dx = x as i64 - cx as i64;
                    if dy * dy + dx * dx <= (size as i64 / 2 + 1).pow(2) {
                        for c in 0..3 {
                            img.set(y, x, c, color[c]);
                        }
                    }
                }
            }
        }
        _ => draw_rect(&mut img, cy - 1 - sub_idx % 3, cy + 2, 0, width, color),
    }

    for &k in attrs {
        let row = if k % 2 == 0 { 1 } else { height - 4 };
        let col = 1 + (5 * (k / 2)) % (width - 4);
        draw_rect(&mut img, row, row + 3, col, col + 3, ATTR_PALETTE[k % ATTR_PALETTE.len()]);
    }

    if noise > 0.0 {
        for i in 0..img.pixels.len() {
            let z: f64 = rng.sample(StandardNormal);
            let v = img.pixels[i] as f64 + noise * 64.0 * z;
            img.pixels[i] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

pub fn generate(config: &GeneratorConfig) -> Result<Generated> {
    config.validate()?;
    let tree = build_tree(config)?;

    let (proto_dim, attr_dim) = match config.mode {
        InputMode::Feature { dim } => (dim / 2, dim - dim / 2),
        InputMode::Image { .. } => (0, 0),
    };

    let mut setup = ChaCha8Rng::seed_from_u64(config.seed);
    setup.set_stream(0);
    let sub_prototypes: Vec<Vec<f64>> = (0..config.sub_categories)
        .map(|_| (0..proto_dim).map(|_| setup.sample(StandardNormal)).collect())
        .collect();
    let attr_offsets: Vec<Vec<f64>> = (0..config.attributes)
        .map(|_| {
            (0..attr_dim)
                .map(|_| {
                    let z: f64 = setup.sample(StandardNormal);
                    ATTR_OFFSET_SIGMA * z
                })
                .collect()
        })
        .collect();

    // Sub-category sampling weights, w_j proportional to 1/(j+1)^imbalance.
    let weights: Vec<f64> = (0..config.sub_categories)
        .map(|j| 1.0 / ((j + 1) as f64).powf(config.imbalance))
        .collect();
    let total_weight: f64 = weights.iter().sum();

    let attached_by_category: Vec<Vec<usize>> = {
        let mut per_cat = vec![Vec::new(); config.categories];
        for a in 0..config.attributes {
            for c in attachment_categories(a, config.categories) {
                per_cat[c].push(a);
            }
        }
        per_cat
    };

    let mut records = Vec::with_capacity(config.products);
    let mut hidden_truth = std::collections::BTreeMap::new();
    for i in 0..config.products {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);

        // The first S products take sub-categories 0..S directly, so every
        // class exists no matter how hard the power law starves the tail.
        let sub_idx = if i < config.sub_categories {
            i
        } else {
            let mut u = rng.gen::<f64>() * total_weight;
            let mut pick = config.sub_categories - 1;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            pick
        };
        let cat_idx = sub_idx % config.categories;

        let mut true_attrs: Vec<usize> = attached_by_category[cat_idx]
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() < config.attribute_rate)
            .collect();
        true_attrs.truncate(config.max_attributes);

        let annotated: Vec<usize> = true_attrs
            .iter()
            .copied()
            .filter(|_| !(rng.gen::<f64>() < config.missingness))
            .collect();

        let payload = match config.mode {
            InputMode::Feature { dim } => {
                let mut x = vec![0.0; dim];
                x[..proto_dim].copy_from_slice(&sub_prototypes[sub_idx]);
                for &a in &true_attrs {
                    for (slot, offset) in x[proto_dim..].iter_mut().zip(&attr_offsets[a]) {
                        *slot += offset;
                    }
                }
                if config.noise > 0.0 {
                    for slot in &mut x {
                        let z: f64 = rng.sample(StandardNormal);
                        *slot += config.noise * z;
                    }
                }
                Payload::Features(x)
            }
            InputMode::Image { height, width } => Payload::Image(draw_image(
                height,
                width,
                cat_idx,
                sub_idx,
                &true_attrs,
                config.noise,
                &mut rng,
            )),
        };

        let id = i as u32;
        records.push(ProductRecord {
            id,
            payload,
            category: CATEGORY_BASE + cat_idx as u32,
            sub_category: SUB_BASE + sub_idx as u32,
            attributes: annotated.iter().map(|&a| ATTR_BASE + a as u32).collect(),
        });
        hidden_truth.insert(id, true_attrs.iter().map(|&a| ATTR_BASE + a as u32).collect());
    }

    Ok(Generated {
        tree,
        dataset: Dataset {
            mode: config.mode,
            records,
            hidden_truth: Some(hidden_truth),
        },
        sub_prototypes,
        attr_offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSpace;
    use std::collections::BTreeMap;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            products: 400,
            categories: 4,
            sub_categories: 10,
            attributes: 6,
            attribute_rate: 0.5,
            noise: 0.1,
            mode: InputMode::Feature { dim: 16 },
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let config = small_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.dataset.records, b.dataset.records);
        assert_eq!(a.dataset.hidden_truth, b.dataset.hidden_truth);

        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        a.dataset.save(&pa).unwrap();
        b.dataset.save(&pb).unwrap();
        for file in ["manifest.tsv", "features.bin", "hidden.tsv"] {
            assert_eq!(
                std::fs::read(pa.join(file)).unwrap(),
                std::fs::read(pb.join(file)).unwrap(),
                "{file}"
            );
        }
        let c = generate(&GeneratorConfig { seed: 8, ..config }).unwrap();
        assert_ne!(a.dataset.records, c.dataset.records);
    }

    #[test]
    fn power_law_ratio_tracks_the_analytic_law() {
        let g = generate(&GeneratorConfig::default()).unwrap();
        let mut counts = BTreeMap::new();
        for r in &g.dataset.records {
            *counts.entry(r.sub_category).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 20);
        let max = *counts.values().max().unwrap() as f64;
        let min = *counts.values().min().unwrap() as f64;
        let analytic = 20.0; // (1/1) / (1/20) at exponent 1
        let ratio = max / min;
        assert!(
            (ratio - analytic).abs() <= 0.3 * analytic,
            "ratio {ratio} vs analytic {analytic}"
        );
    }

    #[test]
    fn noiseless_records_are_nearest_prototype_separable() {
        let g = generate(&GeneratorConfig {
            noise: 0.0,
            ..small_config()
        })
        .unwrap();
        let labels = LabelSpace::from_tree(&g.tree);
        let proto_dim = 8;
        for record in &g.dataset.records {
            let Payload::Features(x) = &record.payload else {
                unreachable!()
            };
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, proto) in g.sub_prototypes.iter().enumerate() {
                let d: f64 = x[..proto_dim]
                    .iter()
                    .zip(proto)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(labels.sub_categories()[best], record.sub_category);
            let (category, _, _) = g.tree.infer_ancestors(record.sub_category).unwrap();
            assert_eq!(category, record.category);
        }
    }

    #[test]
    fn hidden_truth_is_consistent_and_annotations_are_subsets() {
        let g = generate(&GeneratorConfig {
            missingness: 0.5,
            products: 2000,
            ..small_config()
        })
        .unwrap();
        let hidden = g.dataset.hidden_truth.as_ref().unwrap();
        let mut pairs = 0usize;
        let mut dropped = 0usize;
        for record in &g.dataset.records {
            let truth = &hidden[&record.id];
            let (ok, bad) = g
                .tree
                .is_consistent(record.category, record.sub_category, truth)
                .unwrap();
            assert!(ok, "hidden labels of product {}: {bad:?}", record.id);
            assert!(record.attributes.iter().all(|a| truth.contains(a)));
            pairs += truth.len();
            dropped += truth.len() - record.attributes.len();
        }
        assert!(pairs > 500, "probe needs enough attribute pairs, got {pairs}");
        let rate = dropped as f64 / pairs as f64;
        assert!((0.45..=0.55).contains(&rate), "drop rate {rate}");
    }

    #[test]
    fn every_sub_category_is_populated_under_extreme_imbalance() {
        let g = generate(&GeneratorConfig {
            products: 100,
            imbalance: 3.0,
            ..small_config()
        })
        .unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for r in &g.dataset.records {
            seen.insert(r.sub_category);
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn attribute_cap_keeps_the_lowest_ids() {
        let g = generate(&GeneratorConfig {
            attribute_rate: 1.0,
            max_attributes: 2,
            products: 50,
            ..small_config()
        })
        .unwrap();
        let hidden = g.dataset.hidden_truth.as_ref().unwrap();
        for record in &g.dataset.records {
            let truth = &hidden[&record.id];
            assert!(truth.len() <= 2);
            assert!(truth.windows(2).all(|w| w[0] < w[1]), "sorted ascending");
        }
        // Rate 1 on a category with two or more attachments fills the cap.
        assert!(hidden.values().any(|t| t.len() == 2));
    }

    #[test]
    fn infeasible_shapes_are_config_errors() {
        let err = generate(&GeneratorConfig {
            products: 5,
            ..small_config()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("infeasible")));
        assert!(generate(&GeneratorConfig {
            mode: InputMode::Feature { dim: 1 },
            ..small_config()
        })
        .is_err());
        assert!(generate(&GeneratorConfig {
            missingness: 1.5,
            ..small_config()
        })
        .is_err());
    }

    #[test]
    fn generated_tree_is_well_formed() {
        let g = generate(&small_config()).unwrap();
        assert!(g.tree.validate().is_empty());
        let labels = LabelSpace::from_tree(&g.tree);
        assert_eq!(labels.n_categories(), 4);
        assert_eq!(labels.n_sub_categories(), 10);
        assert_eq!(labels.n_attributes(), 6);
    }

    #[test]
    fn stats_agree_with_a_direct_recount() {
        let g = generate(&small_config()).unwrap();
        let stats = g.dataset.stats(&g.tree);
        let labels = LabelSpace::from_tree(&g.tree);
        let mut cat = vec![0usize; labels.n_categories()];
        let mut attr = vec![0usize; labels.n_attributes()];
        let mut per_product = Vec::new();
        for r in &g.dataset.records {
            cat[labels.category_index(r.category).unwrap()] += 1;
            for a in &r.attributes {
                attr[labels.attribute_index(*a).unwrap()] += 1;
            }
            per_product.push(r.attributes.len());
        }
        assert_eq!(stats.per_category.max, *cat.iter().max().unwrap());
        assert_eq!(stats.per_category.min, *cat.iter().min().unwrap());
        assert_eq!(stats.per_attribute.max, *attr.iter().max().unwrap());
        assert_eq!(
            stats.attributes_per_product.mean,
            per_product.iter().sum::<usize>() as f64 / per_product.len() as f64
        );
        assert_eq!(stats.attributes_per_product.max, *per_product.iter().max().unwrap());
    }

    #[test]
    fn image_mode_draws_distinct_deterministic_rasters() {
        let config = GeneratorConfig {
            products: 12,
            categories: 3,
            sub_categories: 6,
            attributes: 4,
            noise: 0.0,
            mode: InputMode::Image {
                height: 16,
                width: 16,
            },
            ..GeneratorConfig::default()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.dataset.records, b.dataset.records);
        let img = |r: usize| match &a.dataset.records[r].payload {
            Payload::Image(img) => img.clone(),
            _ => unreachable!(),
        };
        // Records 0 and 1 hold sub-categories 0 and 1 and thus different
        // categories: the background corner pixel separates them.
        assert_ne!(a.dataset.records[0].category, a.dataset.records[1].category);
        assert_ne!(
            (img(0).get(0, 0, 0), img(0).get(0, 0, 1), img(0).get(0, 0, 2)),
            (img(1).get(0, 0, 0), img(1).get(0, 0, 1), img(1).get(0, 0, 2)),
        );
        assert_eq!(img(0).height, 16);
    }
}
