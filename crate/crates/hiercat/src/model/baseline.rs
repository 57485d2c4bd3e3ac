//! The first-approach baseline: a generic category model routing each
//! product to specialist sub-category and attribute models.
//!
//! Every model in the pipeline instantiates one template: encoder, a dense
//! hidden layer with ReLU, and a classifier sized to its own label space.
//! Specialists only know the sub-categories (or attributes) of their own
//! category, so a routing mistake upstream makes their answers wrong by
//! construction, and a category that never received a specialist leaves its
//! products uncovered. Both behaviours are the point: the unified model
//! exists to remove them.
//!
//! Finer per-attribute-type specialists (dress length, dress silhouette,
//! ...) collapse here into one multilabel specialist per category; the
//! attachment sets stay per category either way.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{load_checkpoint, save_checkpoint, BoundParams, Dense, ParamSet};
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

use super::encoder::{Encoder, CONV_CHANNELS};
use super::unified::InputKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax output; exactly one class per product.
    Multiclass,
    /// Independent sigmoids; any subset of labels per product.
    Multilabel,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Multiclass => "multiclass",
            HeadKind::Multilabel => "multilabel",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(HeadKind::Multiclass),
            "multilabel" => Ok(HeadKind::Multilabel),
            other => Err(Error::Format(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateModelConfig {
    pub input: InputKind,
    pub hidden_dim: usize,
    pub n_outputs: usize,
    pub kind: HeadKind,
    pub l2_factor: f64,
}

impl TemplateModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_outputs == 0 {
            return Err(Error::Config(
                "template hidden dimension and output count must be positive".into(),
            ));
        }
        if self.l2_factor < 0.0 {
            return Err(Error::Config(format!(
                "l2 factor {} is negative",
                self.l2_factor
            )));
        }
        match self.input {
            InputKind::Feature { dim } if dim == 0 => {
                Err(Error::Config("feature dimension must be positive".into()))
            }
            InputKind::Image { stages, .. } if !(1..=3).contains(&stages) => Err(Error::Config(
                format!("convolution stages {stages} outside 1..=3"),
            )),
            _ => Ok(()),
        }
    }

    fn to_meta(self) -> Vec<(String, String)> {
        let mut meta = vec![("model".to_string(), "template".to_string())];
        let mut push = |k: &str, v: String| meta.push((k.to_string(), v));
        match self.input {
            InputKind::Feature { dim } => {
                push("input", "feature".into());
                push("feature_dim", dim.to_string());
            }
            InputKind::Image {
                height,
                width,
                stages,
            } => {
                push("input", "image".into());
                push("image_height", height.to_string());
                push("image_width", width.to_string());
                push("conv_stages", stages.to_string());
            }
        }
        push("hidden_dim", self.hidden_dim.to_string());
        push("n_outputs", self.n_outputs.to_string());
        push("kind", self.kind.as_str().to_string());
        push("l2_factor", format!("{:?}", self.l2_factor));
        meta
    }

    fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint meta missing {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint meta {k} is not a count")))
        };
        let input = match get("input")? {
            "feature" => InputKind::Feature {
                dim: parse_usize("feature_dim")?,
            },
            "image" => InputKind::Image {
                height: parse_usize("image_height")?,
                width: parse_usize("image_width")?,
                stages: parse_usize("conv_stages")?,
            },
            other => {
                return Err(Error::Format(format!(
                    "checkpoint meta input kind {other:?} unknown"
                )))
            }
        };
        Ok(TemplateModelConfig {
            input,
            hidden_dim: parse_usize("hidden_dim")?,
            n_outputs: parse_usize("n_outputs")?,
            kind: HeadKind::parse(get("kind")?)?,
            l2_factor: get("l2_factor")?
                .parse()
                .map_err(|_| Error::Format("checkpoint meta l2_factor is not a number".into()))?,
        })
    }
}

/// Closed-form trainable-parameter count for one template model.
pub fn count_template_parameters(config: &TemplateModelConfig) -> usize {
    let encoder = match config.input {
        InputKind::Feature { .. } => 0,
        InputKind::Image { stages, .. } => {
            let mut total = 0;
            let mut in_ch = 3;
            for s in 0..stages {
                total += CONV_CHANNELS[s] * in_ch * 9 + CONV_CHANNELS[s];
                in_ch = CONV_CHANNELS[s];
            }
            total
        }
    };
    let backbone = config.input.backbone_dim();
    let d = config.hidden_dim;
    encoder + (backbone * d + d) + (d * config.n_outputs + config.n_outputs)
}

/// One encoder, one hidden dense with ReLU, one classifier. The building
/// block every pipeline member is stamped from.
pub struct TemplateModel {
    pub config: TemplateModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    hidden: Dense,
    out: Dense,
}

impl TemplateModel {
    pub fn build(config: TemplateModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::build(&mut params, &mut rng, &config.input, false);
        let backbone = encoder.out_dim();
        let hidden = Dense::new(
            &mut params,
            &mut rng,
            "hidden",
            backbone,
            config.hidden_dim,
            config.l2_factor,
        );
        let out = Dense::new(
            &mut params,
            &mut rng,
            "out",
            config.hidden_dim,
            config.n_outputs,
            config.l2_factor,
        );
        Ok(TemplateModel {
            config,
            params,
            encoder,
            hidden,
            out,
        })
    }

    pub fn dense_layers(&self) -> Vec<Dense> {
        vec![self.hidden, self.out]
    }

    pub fn logits<'t>(&self, bound: &BoundParams<'t>, input: Value<'t>) -> Value<'t> {
        let features = self.encoder.forward(bound, input);
        let h = self.hidden.forward(bound, features.for_level(0)).relu();
        self.out.forward(bound, h)
    }

    /// Softmax rows or independent sigmoids, per the head kind.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, input: Value<'t>) -> Value<'t> {
        let logits = self.logits(bound, input);
        match self.config.kind {
            HeadKind::Multiclass => logits.softmax_rows(),
            HeadKind::Multilabel => logits.sigmoid(),
        }
    }

    /// Deterministic batch inference on raw data, for routing and tests.
    pub fn run(&self, input: &Tensor) -> Tensor {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
        self.forward(&bound, x).to_tensor()
    }

    fn save_with(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut meta = self.config.to_meta();
        meta.extend_from_slice(extra);
        save_checkpoint(path, &meta, &self.params)
    }

    fn load_with(path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        let ckpt = load_checkpoint(path)?;
        let config = TemplateModelConfig::from_meta(&ckpt.meta)?;
        let mut model = TemplateModel::build(config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, template expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let loaded = ckpt
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            let src = ckpt.params.get(loaded);
            if src.shape() != model.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, template expects {:?}",
                    src.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        Ok((model, ckpt.meta))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_with(path)?.0)
    }
}

/// A template model plus the node ids its output columns stand for.
pub struct Specialist {
    pub category: u32,
    pub labels: Vec<u32>,
    pub model: TemplateModel,
}

impl Specialist {
    fn check(&self, expected: HeadKind) -> Result<()> {
        if self.model.config.kind != expected {
            return Err(Error::Config(format!(
                "specialist for category {} must be {}",
                self.category,
                expected.as_str()
            )));
        }
        if self.labels.len() != self.model.config.n_outputs {
            return Err(Error::Config(format!(
                "specialist for category {} names {} labels but outputs {}",
                self.category,
                self.labels.len(),
                self.model.config.n_outputs
            )));
        }
        Ok(())
    }
}

/// Prediction for one product. `None` marks an uncovered route: the
/// predicted category has no specialist for that level. Uncovered is a
/// reportable outcome, not a fault.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePrediction {
    pub category: u32,
    pub category_confidence: f64,
    pub sub_category: Option<(u32, f64)>,
    pub attributes: Option<Vec<(u32, f64)>>,
}

/// The generic category model and whatever specialists were trained. The
/// route maps may be partial; coverage is reported, not enforced.
pub struct Pipeline {
    pub category_labels: Vec<u32>,
    pub category_model: TemplateModel,
    pub sub: BTreeMap<u32, Specialist>,
    pub attr: BTreeMap<u32, Specialist>,
}

impl Pipeline {
    pub fn new(category_labels: Vec<u32>, category_model: TemplateModel) -> Result<Self> {
        if category_model.config.kind != HeadKind::Multiclass {
            return Err(Error::Config("the category model must be multiclass".into()));
        }
        if category_labels.len() != category_model.config.n_outputs {
            return Err(Error::Config(format!(
                "category model outputs {} classes but {} labels were named",
                category_model.config.n_outputs,
                category_labels.len()
            )));
        }
        Ok(Pipeline {
            category_labels,
            category_model,
            sub: BTreeMap::new(),
            attr: BTreeMap::new(),
        })
    }

    pub fn add_sub_specialist(&mut self, specialist: Specialist) -> Result<()> {
        specialist.check(HeadKind::Multiclass)?;
        self.sub.insert(specialist.category, specialist);
        Ok(())
    }

    pub fn add_attr_specialist(&mut self, specialist: Specialist) -> Result<()> {
        specialist.check(HeadKind::Multilabel)?;
        self.attr.insert(specialist.category, specialist);
        Ok(())
    }

    /// Fraction of the named categories holding a sub-category specialist.
    pub fn sub_coverage(&self) -> f64 {
        if self.category_labels.is_empty() {
            return 0.0;
        }
        let covered = self
            .category_labels
            .iter()
            .filter(|c| self.sub.contains_key(c))
            .count();
        covered as f64 / self.category_labels.len() as f64
    }

    /// Routes each product through the category model (or the injected
    /// oracle categories) and on to that category's specialists. Attribute
    /// scores above `threshold` are kept.
    pub fn predict(
        &self,
        input: &Tensor,
        oracle_categories: Option<&[u32]>,
        threshold: f64,
    ) -> Result<Vec<PipelinePrediction>> {
        let batch = input.shape()[0];
        let row_len = input.numel() / batch.max(1);
        if let Some(oracle) = oracle_categories {
            if oracle.len() != batch {
                return Err(Error::Data(format!(
                    "{} oracle categories for a batch of {batch}",
                    oracle.len()
                )));
            }
        }

        let routed: Vec<(u32, f64)> = match oracle_categories {
            Some(oracle) => oracle.iter().map(|&c| (c, 1.0)).collect(),
            None => {
                let probs = self.category_model.run(input);
                let n = self.category_labels.len();
                (0..batch)
                    .map(|r| {
                        let row = &probs.data()[r * n..(r + 1) * n];
                        let mut best = 0;
                        for (j, p) in row.iter().enumerate() {
                            if *p > row[best] {
                                best = j;
                            }
                        }
                        (self.category_labels[best], row[best])
                    })
                    .collect()
            }
        };

        let mut by_category: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (r, (category, _)) in routed.iter().enumerate() {
            by_category.entry(*category).or_default().push(r);
        }

        let mut predictions: Vec<PipelinePrediction> = routed
            .iter()
            .map(|&(category, confidence)| PipelinePrediction {
                category,
                category_confidence: confidence,
                sub_category: None,
                attributes: None,
            })
            .collect();

        for (category, rows) in &by_category {
            let gather = || {
                let mut shape = input.shape().to_vec();
                shape[0] = rows.len();
                let mut data = Vec::with_capacity(rows.len() * row_len);
                for &r in rows {
                    data.extend_from_slice(&input.data()[r * row_len..(r + 1) * row_len]);
                }
                Tensor::new(shape, data)
            };
            if let Some(specialist) = self.sub.get(category) {
                let probs = specialist.model.run(&gather());
                let n = specialist.labels.len();
                for (i, &r) in rows.iter().enumerate() {
                    let row = &probs.data()[i * n..(i + 1) * n];
                    let mut best = 0;
                    for (j, p) in row.iter().enumerate() {
                        if *p > row[best] {
                            best = j;
                        }
                    }
                    predictions[r].sub_category = Some((specialist.labels[best], row[best]));
                }
            }
            if let Some(specialist) = self.attr.get(category) {
                let scores = specialist.model.run(&gather());
                let n = specialist.labels.len();
                for (i, &r) in rows.iter().enumerate() {
                    let row = &scores.data()[i * n..(i + 1) * n];
                    let kept = row
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| **s > threshold)
                        .map(|(j, s)| (specialist.labels[j], *s))
                        .collect();
                    predictions[r].attributes = Some(kept);
                }
            }
        }
        Ok(predictions)
    }

    /// Writes one checkpoint per member plus `pipeline.tsv`, a text map of
    /// role and category id to checkpoint file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::from("# hiercat pipeline v1\n");
        let labels = |ids: &[u32]| {
            ids.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        self.category_model.save_with(
            &dir.join("category.ckpt"),
            &[("labels".into(), labels(&self.category_labels))],
        )?;
        index.push_str("category\t-\tcategory.ckpt\n");
        for (role, map) in [("sub", &self.sub), ("attr", &self.attr)] {
            for (category, specialist) in map.iter() {
                let file = format!("{role}_{category}.ckpt");
                specialist.model.save_with(
                    &dir.join(&file),
                    &[
                        ("category".into(), category.to_string()),
                        ("labels".into(), labels(&specialist.labels)),
                    ],
                )?;
                index.push_str(&format!("{role}\t{category}\t{file}\n"));
            }
        }
        std::fs::write(dir.join("pipeline.tsv"), index)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = std::fs::read_to_string(dir.join("pipeline.tsv"))?;
        let parse_labels = |meta: &[(String, String)]| -> Result<Vec<u32>> {
            let raw = meta
                .iter()
                .find(|(k, _)| k == "labels")
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format("checkpoint meta missing labels".into()))?;
            raw.split_whitespace()
                .map(|tok| {
                    tok.parse()
                        .map_err(|_| Error::Format(format!("label id {tok:?} is not a number")))
                })
                .collect()
        };

        let mut pipeline: Option<Pipeline> = None;
        let mut specialists: Vec<(String, u32, String)> = Vec::new();
        for (number, line) in index.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "pipeline.tsv line {}: expected 3 tab-separated fields, got {}",
                    number + 1,
                    fields.len()
                )));
            }
            match fields[0] {
                "category" => {
                    let (model, meta) = TemplateModel::load_with(&dir.join(fields[2]))?;
                    pipeline = Some(Pipeline::new(parse_labels(&meta)?, model)?);
                }
                "sub" | "attr" => {
                    let category = fields[1].parse().map_err(|_| {
                        Error::Format(format!(
                            "pipeline.tsv line {}: category id {:?} is not a number",
                            number + 1,
                            fields[1]
                        ))
                    })?;
                    specialists.push((fields[0].to_string(), category, fields[2].to_string()));
                }
                other => {
                    return Err(Error::Format(format!(
                        "pipeline.tsv line {}: unknown role {other:?}",
                        number + 1
                    )))
                }
            }
        }
        let mut pipeline = pipeline
            .ok_or_else(|| Error::Format("pipeline.tsv names no category model".into()))?;
        for (role, category, file) in specialists {
            let (model, meta) = TemplateModel::load_with(&dir.join(&file))?;
            let specialist = Specialist {
                category,
                labels: parse_labels(&meta)?,
                model,
            };
            if role == "sub" {
                pipeline.add_sub_specialist(specialist)?;
            } else {
                pipeline.add_attr_specialist(specialist)?;
            }
        }
        Ok(pipeline)
    }
}
