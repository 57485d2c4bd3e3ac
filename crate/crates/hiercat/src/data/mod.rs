//! Datasets on disk and in memory: the manifest format, payload sidecars,
//! hidden-truth bookkeeping, stratified splits, and summary statistics.
//!
//! A dataset directory holds `manifest.tsv` (one product per line),
//! `features.bin` or `images.bin` (the payload sidecar the manifest lines
//! point into), and optionally `hidden.tsv`, the generator's record of the
//! attribute sets before missingness was applied. Annotations are what a
//! model may train on; the hidden truth exists so that "the model found
//! attributes nobody annotated" can be measured instead of eyeballed.

pub mod augment;
pub mod generate;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::InputKind;
use crate::taxonomy::{CategoryTree, Level};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use generate::{generate, Generated, GeneratorConfig};

/// An 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, channel: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + channel]
    }

    pub fn set(&mut self, y: usize, x: usize, channel: usize, value: u8) {
        self.pixels[(y * self.width + x) * 3 + channel] = value;
    }

    pub fn fill(&mut self, rgb: [u8; 3]) {
        for (i, p) in self.pixels.iter_mut().enumerate() {
            *p = rgb[i % 3];
        }
    }

    /// Channel-planar floats in [0, 1], the layout the convolution expects.
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.push(self.get(y, x, c) as f64 / 255.0);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Features(Vec<f64>),
    Image(Image),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Feature { dim: usize },
    Image { height: usize, width: usize },
}

impl InputMode {
    /// The model-side input description; `stages` picks the desk encoder
    /// depth for image datasets and is ignored for features.
    pub fn input_kind(self, stages: usize) -> InputKind {
        match self {
            InputMode::Feature { dim } => InputKind::Feature { dim },
            InputMode::Image { height, width } => InputKind::Image {
                height,
                width,
                stages,
            },
        }
    }

    fn payload_len(self) -> usize {
        match self {
            InputMode::Feature { dim } => dim,
            InputMode::Image { height, width } => height * width * 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductRecord {
    pub id: u32,
    pub payload: Payload,
    pub category: u32,
    pub sub_category: u32,
    /// Annotated attributes; a subset of the hidden truth when the
    /// generator applied missingness.
    pub attributes: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub mode: InputMode,
    pub records: Vec<ProductRecord>,
    /// Full attribute sets per product id, before missingness. `None` for
    /// datasets that never had one (or whose sidecar was not written).
    pub hidden_truth: Option<BTreeMap<u32, Vec<u32>>>,
}

/// Class-index mapping for the three classified levels, in tree insertion
/// order. The order is part of every checkpoint's contract with its data.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    categories: Vec<u32>,
    sub_categories: Vec<u32>,
    attributes: Vec<u32>,
    category_index: BTreeMap<u32, usize>,
    sub_index: BTreeMap<u32, usize>,
    attribute_index: BTreeMap<u32, usize>,
}

impl LabelSpace {
    pub fn from_tree(tree: &CategoryTree) -> Self {
        let categories = tree.level_ids(Level::Category);
        let sub_categories = tree.level_ids(Level::SubCategory);
        let attributes = tree.level_ids(Level::Attribute);
        let index = |ids: &[u32]| {
            ids.iter()
                .enumerate()
                .map(|(i, &id)| (id, i))
                .collect::<BTreeMap<_, _>>()
        };
        LabelSpace {
            category_index: index(&categories),
            sub_index: index(&sub_categories),
            attribute_index: index(&attributes),
            categories,
            sub_categories,
            attributes,
        }
    }

    pub fn categories(&self) -> &[u32] {
        &self.categories
    }
    pub fn sub_categories(&self) -> &[u32] {
        &self.sub_categories
    }
    pub fn attributes(&self) -> &[u32] {
        &self.attributes
    }
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }
    pub fn n_sub_categories(&self) -> usize {
        self.sub_categories.len()
    }
    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn category_index(&self, id: u32) -> Result<usize> {
        self.category_index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("category id {id} is not in the tree")))
    }

    pub fn sub_index(&self, id: u32) -> Result<usize> {
        self.sub_index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("sub-category id {id} is not in the tree")))
    }

    pub fn attribute_index(&self, id: u32) -> Result<usize> {
        self.attribute_index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("attribute id {id} is not in the tree")))
    }
}

/// Stacks payloads into the model's input tensor: `[n, dim]` for features,
/// `[n, 3, h, w]` in [0, 1] for images.
pub fn payload_tensor(mode: InputMode, payloads: &[&Payload]) -> Tensor {
    match mode {
        InputMode::Feature { dim } => {
            let mut data = Vec::with_capacity(payloads.len() * dim);
            for p in payloads {
                match p {
                    Payload::Features(v) => {
                        assert_eq!(v.len(), dim, "feature payload length");
                        data.extend_from_slice(v);
                    }
                    Payload::Image(_) => panic!("image payload in a feature-mode batch"),
                }
            }
            Tensor::new(vec![payloads.len(), dim], data)
        }
        InputMode::Image { height, width } => {
            let mut data = Vec::with_capacity(payloads.len() * 3 * height * width);
            for p in payloads {
                match p {
                    Payload::Image(img) => {
                        assert_eq!(
                            (img.height, img.width),
                            (height, width),
                            "image payload shape"
                        );
                        data.extend(img.to_planar());
                    }
                    Payload::Features(_) => panic!("feature payload in an image-mode batch"),
                }
            }
            Tensor::new(vec![payloads.len(), 3, height, width], data)
        }
    }
}

pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelStats {
    pub mean: f64,
    pub max: usize,
    pub min: usize,
}

fn level_stats(counts: &[usize]) -> LevelStats {
    if counts.is_empty() {
        return LevelStats {
            mean: 0.0,
            max: 0,
            min: 0,
        };
    }
    LevelStats {
        mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        max: *counts.iter().max().unwrap(),
        min: *counts.iter().min().unwrap(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub products: usize,
    pub per_category: LevelStats,
    pub per_sub_category: LevelStats,
    pub per_attribute: LevelStats,
    pub attributes_per_product: LevelStats,
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let mut out = format!("products {:>8}\n", self.products);
        out.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>8}\n",
            "", "mean", "max", "min"
        ));
        let mut row = |name: &str, s: &LevelStats| {
            out.push_str(&format!(
                "{name:<24} {:>10.2} {:>8} {:>8}\n",
                s.mean, s.max, s.min
            ));
        };
        row("products/category", &self.per_category);
        row("products/sub-category", &self.per_sub_category);
        row("products/attribute", &self.per_attribute);
        row("attributes/product", &self.attributes_per_product);
        out
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input_tensor(&self, indices: &[usize]) -> Tensor {
        let payloads: Vec<&Payload> = indices.iter().map(|&i| &self.records[i].payload).collect();
        payload_tensor(self.mode, &payloads)
    }

    /// First inconsistency between records and the tree, as an error. Checks
    /// the annotated labels; hidden truth is a superset sharing the same
    /// category attachments by construction.
    pub fn check_against_tree(&self, tree: &CategoryTree) -> Result<()> {
        for record in &self.records {
            let (consistent, pairs) =
                tree.is_consistent(record.category, record.sub_category, &record.attributes)?;
            if !consistent {
                return Err(Error::Data(format!(
                    "product {} labels disagree with the tree: {pairs:?}",
                    record.id
                )));
            }
        }
        Ok(())
    }

    /// Stratified split by sub-category. Strata with a single product go
    /// wholly to train, with a warning rather than an error.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<Split> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} outside (0, 1)"
            )));
        }
        let mut strata: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, record) in self.records.iter().enumerate() {
            strata.entry(record.sub_category).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut warnings = Vec::new();
        let mut in_train = vec![false; self.records.len()];
        for (sub, mut indices) in strata {
            if indices.len() < 2 {
                warnings.push(format!(
                    "sub-category {sub} has {} product(s); all placed in train",
                    indices.len()
                ));
                for i in indices {
                    in_train[i] = true;
                }
                continue;
            }
            indices.shuffle(&mut rng);
            let n_train = ((indices.len() as f64 * train_fraction).floor() as usize).max(1);
            for &i in &indices[..n_train] {
                in_train[i] = true;
            }
        }
        let pick = |keep: bool| -> Dataset {
            let records: Vec<ProductRecord> = self
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| in_train[*i] == keep)
                .map(|(_, r)| r.clone())
                .collect();
            let hidden_truth = self.hidden_truth.as_ref().map(|map| {
                records
                    .iter()
                    .filter_map(|r| map.get(&r.id).map(|v| (r.id, v.clone())))
                    .collect()
            });
            Dataset {
                mode: self.mode,
                records,
                hidden_truth,
            }
        };
        Ok(Split {
            train: pick(true),
            test: pick(false),
            warnings,
        })
    }

    /// Annotation counts against every class the tree defines, zeros
    /// included.
    pub fn stats(&self, tree: &CategoryTree) -> DatasetStats {
        let labels = LabelSpace::from_tree(tree);
        let mut cat = vec![0usize; labels.n_categories()];
        let mut sub = vec![0usize; labels.n_sub_categories()];
        let mut attr = vec![0usize; labels.n_attributes()];
        let mut per_product = Vec::with_capacity(self.records.len());
        for record in &self.records {
            if let Ok(i) = labels.category_index(record.category) {
                cat[i] += 1;
            }
            if let Ok(i) = labels.sub_index(record.sub_category) {
                sub[i] += 1;
            }
            for &a in &record.attributes {
                if let Ok(i) = labels.attribute_index(a) {
                    attr[i] += 1;
                }
            }
            per_product.push(record.attributes.len());
        }
        DatasetStats {
            products: self.records.len(),
            per_category: level_stats(&cat),
            per_sub_category: level_stats(&sub),
            per_attribute: level_stats(&attr),
            attributes_per_product: level_stats(&per_product),
        }
    }

    /// Writes `manifest.tsv`, the payload sidecar, and `hidden.tsv` when a
    /// hidden truth exists. Byte-stable: saving a loaded dataset reproduces
    /// the files exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        match self.mode {
            InputMode::Feature { dim } => {
                manifest.push_str(&format!("# hiercat manifest v1 mode=feature dim={dim}\n"));
            }
            InputMode::Image { height, width } => {
                manifest.push_str(&format!(
                    "# hiercat manifest v1 mode=image height={height} width={width}\n"
                ));
            }
        }
        let join = |ids: &[u32]| {
            if ids.is_empty() {
                "-".to_string()
            } else {
                ids.iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            }
        };
        let payload_len = self.mode.payload_len();
        let mut payload_bytes: Vec<u8> = Vec::new();
        for (i, record) in self.records.iter().enumerate() {
            manifest.push_str(&format!(
                "{}\t{i}\t{}\t{}\t{}\n",
                record.id,
                record.category,
                record.sub_category,
                join(&record.attributes)
            ));
            match (&record.payload, self.mode) {
                (Payload::Features(v), InputMode::Feature { .. }) => {
                    assert_eq!(v.len(), payload_len, "feature payload length");
                    for x in v {
                        payload_bytes.extend_from_slice(&x.to_le_bytes());
                    }
                }
                (Payload::Image(img), InputMode::Image { height, width }) => {
                    assert_eq!(
                        (img.height, img.width),
                        (height, width),
                        "image payload shape"
                    );
                    payload_bytes.extend_from_slice(&img.pixels);
                }
                _ => panic!("payload kind disagrees with dataset mode"),
            }
        }
        std::fs::write(dir.join("manifest.tsv"), manifest)?;
        match self.mode {
            InputMode::Feature { dim } => {
                let mut file = format!("F64 {} {dim}\n", self.records.len()).into_bytes();
                file.extend_from_slice(&payload_bytes);
                std::fs::write(dir.join("features.bin"), file)?;
            }
            InputMode::Image { height, width } => {
                let mut file =
                    format!("RGB8 {} {height} {width}\n", self.records.len()).into_bytes();
                file.extend_from_slice(&payload_bytes);
                std::fs::write(dir.join("images.bin"), file)?;
            }
        }
        if let Some(hidden) = &self.hidden_truth {
            let mut out = String::from("# hiercat hidden truth v1\n");
            for record in &self.records {
                let truth = hidden
                    .get(&record.id)
                    .unwrap_or_else(|| panic!("product {} has no hidden-truth entry", record.id));
                out.push_str(&format!("{}\t{}\n", record.id, join(truth)));
            }
            std::fs::write(dir.join("hidden.tsv"), out)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
        let mut lines = manifest.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("manifest is empty".into()))?;
        let mode = parse_manifest_header(header)?;

        let (payloads, payload_count) = load_payloads(dir, mode)?;
        let parse_ids = |field: &str, what: &str| -> Result<Vec<u32>> {
            if field == "-" {
                return Ok(Vec::new());
            }
            field
                .split(',')
                .map(|tok| {
                    tok.parse()
                        .map_err(|_| Error::Format(format!("{what} id {tok:?} is not a number")))
                })
                .collect()
        };

        let mut records = Vec::new();
        for (number, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 5 tab-separated fields, got {}",
                    number + 2,
                    fields.len()
                )));
            }
            let parse_u32 = |field: &str, what: &str| -> Result<u32> {
                field.parse().map_err(|_| {
                    Error::Format(format!(
                        "manifest line {}: {what} {field:?} is not a number",
                        number + 2
                    ))
                })
            };
            let id = parse_u32(fields[0], "product id")?;
            let reference = parse_u32(fields[1], "payload reference")? as usize;
            if reference >= payload_count {
                return Err(Error::Format(format!(
                    "manifest line {}: payload reference {reference} outside sidecar of {payload_count}",
                    number + 2
                )));
            }
            records.push(ProductRecord {
                id,
                payload: payloads[reference].clone(),
                category: parse_u32(fields[2], "category")?,
                sub_category: parse_u32(fields[3], "sub-category")?,
                attributes: parse_ids(fields[4], "attribute")?,
            });
        }

        let hidden_path = dir.join("hidden.tsv");
        let hidden_truth = if hidden_path.exists() {
            let text = std::fs::read_to_string(hidden_path)?;
            let mut map = BTreeMap::new();
            for (number, line) in text.lines().enumerate() {
                let line = line.trim_end();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (id, rest) = line.split_once('\t').ok_or_else(|| {
                    Error::Format(format!("hidden.tsv line {}: expected id\tattributes", number + 1))
                })?;
                let id: u32 = id.parse().map_err(|_| {
                    Error::Format(format!(
                        "hidden.tsv line {}: product id {id:?} is not a number",
                        number + 1
                    ))
                })?;
                map.insert(id, parse_ids(rest, "attribute")?);
            }
            Some(map)
        } else {
            None
        };

        Ok(Dataset {
            mode,
            records,
            hidden_truth,
        })
    }
}

fn parse_manifest_header(header: &str) -> Result<InputMode> {
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() < 5 || tokens[..4] != ["#", "hiercat", "manifest", "v1"] {
        return Err(Error::Format(format!(
            "manifest header {header:?} is not a hiercat manifest"
        )));
    }
    let mut pairs = BTreeMap::new();
    for token in &tokens[4..] {
        let (k, v) = token.split_once('=').ok_or_else(|| {
            Error::Format(format!("manifest header token {token:?} is not key=value"))
        })?;
        pairs.insert(k, v);
    }
    let get = |k: &str| -> Result<usize> {
        pairs
            .get(k)
            .ok_or_else(|| Error::Format(format!("manifest header missing {k}")))?
            .parse()
            .map_err(|_| Error::Format(format!("manifest header {k} is not a count")))
    };
    match pairs.get("mode") {
        Some(&"feature") => Ok(InputMode::Feature { dim: get("dim")? }),
        Some(&"image") => Ok(InputMode::Image {
            height: get("height")?,
            width: get("width")?,
        }),
        _ => Err(Error::Format("manifest header names no known mode".into())),
    }
}

fn load_payloads(dir: &Path, mode: InputMode) -> Result<(Vec<Payload>, usize)> {
    match mode {
        InputMode::Feature { dim } => {
            let bytes = std::fs::read(dir.join("features.bin"))?;
            let (header, rest) = split_header(&bytes)?;
            let tokens: Vec<&str> = header.split_whitespace().collect();
            if tokens.len() != 3 || tokens[0] != "F64" {
                return Err(Error::Format(format!(
                    "features.bin header {header:?} is not F64 count dim"
                )));
            }
            let count: usize = parse_count(tokens[1], "features.bin count")?;
            let file_dim: usize = parse_count(tokens[2], "features.bin dim")?;
            if file_dim != dim {
                return Err(Error::Format(format!(
                    "features.bin dim {file_dim} disagrees with manifest dim {dim}"
                )));
            }
            if rest.len() != count * dim * 8 {
                return Err(Error::Format(format!(
                    "features.bin payload holds {} bytes, header promises {}",
                    rest.len(),
                    count * dim * 8
                )));
            }
            let mut payloads = Vec::with_capacity(count);
            for r in 0..count {
                let mut v = Vec::with_capacity(dim);
                for c in 0..dim {
                    let off = (r * dim + c) * 8;
                    v.push(f64::from_le_bytes(rest[off..off + 8].try_into().unwrap()));
                }
                payloads.push(Payload::Features(v));
            }
            Ok((payloads, count))
        }
        InputMode::Image { height, width } => {
            let bytes = std::fs::read(dir.join("images.bin"))?;
            let (header, rest) = split_header(&bytes)?;
            let tokens: Vec<&str> = header.split_whitespace().collect();
            if tokens.len() != 4 || tokens[0] != "RGB8" {
                return Err(Error::Format(format!(
                    "images.bin header {header:?} is not RGB8 count height width"
                )));
            }
            let count = parse_count(tokens[1], "images.bin count")?;
            let file_h = parse_count(tokens[2], "images.bin height")?;
            let file_w = parse_count(tokens[3], "images.bin width")?;
            if (file_h, file_w) != (height, width) {
                return Err(Error::Format(format!(
                    "images.bin size {file_h}x{file_w} disagrees with manifest {height}x{width}"
                )));
            }
            let per = height * width * 3;
            if rest.len() != count * per {
                return Err(Error::Format(format!(
                    "images.bin payload holds {} bytes, header promises {}",
                    rest.len(),
                    count * per
                )));
            }
            let payloads = (0..count)
                .map(|r| {
                    Payload::Image(Image {
                        height,
                        width,
                        pixels: rest[r * per..(r + 1) * per].to_vec(),
                    })
                })
                .collect();
            Ok((payloads, count))
        }
    }
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("payload sidecar has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::Format("payload sidecar header is not text".into()))?;
    Ok((header, &bytes[newline + 1..]))
}

fn parse_count(token: &str, what: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Format(format!("{what} {token:?} is not a count")))
}
