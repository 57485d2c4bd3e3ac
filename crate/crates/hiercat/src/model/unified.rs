//! The unified structured-output model: encoder, per-level projections, the
//! bidirectional message-propagation block, and three classification heads.
//!
//! Information flows between hierarchy levels in two directions before any
//! classification happens. Downward, the category latent is pushed into the
//! sub-category and attribute levels; upward, both lower levels are pushed
//! into the category level. Every level also transforms its own latent in
//! each direction (the intra-level denses), the two directions are summed
//! and merged per level, and there is deliberately no sub-category to
//! attribute edge in either direction.
//!
//! The asymmetry matters: in a single pass, attribute logits never depend
//! on the sub-category latent, while category logits can hear from both
//! lower levels through the upward direction.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::nn::{dropout, BoundParams, Dense, Mode, ParamSet};
use crate::tensor::{Tape, Value};
use crate::{Error, Result};

use super::encoder::{Encoder, Features, CONV_CHANNELS};

/// Trainable-parameter count of the accounting tables' full-scale backbone.
pub const RESNET50_PARAMS: usize = 23_587_712;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The full architecture with the message-propagation block.
    Final,
    /// Message propagation replaced by per-level dense chains of depth
    /// 5/4/4, which reproduces the block's dense count and parameter total
    /// exactly.
    NoMp,
    /// The final encoder stage duplicated per level, everything else as in
    /// `Final`.
    BackboneIndep,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Final => "final",
            Variant::NoMp => "no_mp",
            Variant::BackboneIndep => "backbone_indep",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Variant::Final),
            "no_mp" => Ok(Variant::NoMp),
            "backbone_indep" => Ok(Variant::BackboneIndep),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected final, no_mp or backbone_indep"
            ))),
        }
    }
}

/// What the model consumes: precomputed feature vectors, or tiny raster
/// images routed through the small convolution encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Feature { dim: usize },
    Image { height: usize, width: usize, stages: usize },
}

impl InputKind {
    /// Dimension of the encoder output feeding the projections.
    pub fn backbone_dim(&self) -> usize {
        match *self {
            InputKind::Feature { dim } => dim,
            InputKind::Image {
                height,
                width,
                stages,
            } => CONV_CHANNELS[stages - 1] * (height >> stages) * (width >> stages),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedModelConfig {
    pub input: InputKind,
    pub hidden_dim: usize,
    pub n_categories: usize,
    pub n_sub_categories: usize,
    pub n_attributes: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub l2_factor: f64,
}

impl UnifiedModelConfig {
    /// The full-scale configuration of the accounting tables: 2048-dim
    /// backbone features, hidden dimension 1024, classes 64/95/75.
    pub fn paper_defaults() -> Self {
        UnifiedModelConfig {
            input: InputKind::Feature { dim: 2048 },
            hidden_dim: 1024,
            n_categories: 64,
            n_sub_categories: 95,
            n_attributes: 75,
            variant: Variant::Final,
            dropout: 0.3,
            l2_factor: 0.0005,
        }
    }

    pub fn backbone_dim(&self) -> usize {
        self.input.backbone_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.hidden_dim == 0
            || self.n_categories == 0
            || self.n_sub_categories == 0
            || self.n_attributes == 0
        {
            return err("hidden dimension and class counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.l2_factor < 0.0 {
            return err(format!("l2 factor {} is negative", self.l2_factor));
        }
        match self.input {
            InputKind::Feature { dim } => {
                if dim == 0 {
                    return err("feature dimension must be positive".into());
                }
            }
            InputKind::Image {
                height,
                width,
                stages,
            } => {
                if !(1..=3).contains(&stages) {
                    return err(format!("convolution stages {stages} outside 1..=3"));
                }
                if height % (1 << stages) != 0 || width % (1 << stages) != 0 {
                    return err(format!(
                        "image {height}x{width} not divisible by 2^{stages} for pooling"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Meta entries for the checkpoint header.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let mut meta = vec![("model".into(), "unified".into())];
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
        push("n_categories", self.n_categories.to_string());
        push("n_sub_categories", self.n_sub_categories.to_string());
        push("n_attributes", self.n_attributes.to_string());
        push("variant", self.variant.as_str().to_string());
        push("dropout", format!("{:?}", self.dropout));
        push("l2_factor", format!("{:?}", self.l2_factor));
        meta
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
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
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint meta {k} is not a number")))
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
        Ok(UnifiedModelConfig {
            input,
            hidden_dim: parse_usize("hidden_dim")?,
            n_categories: parse_usize("n_categories")?,
            n_sub_categories: parse_usize("n_sub_categories")?,
            n_attributes: parse_usize("n_attributes")?,
            variant: get("variant")?.parse()?,
            dropout: parse_f64("dropout")?,
            l2_factor: parse_f64("l2_factor")?,
        })
    }
}

/// Closed-form parameter counts per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterAccounting {
    pub encoder: usize,
    pub projections: usize,
    pub message_block: usize,
    pub output_hidden: usize,
    pub classifiers: usize,
    /// Projections + block + hidden + classifiers; the desk encoder is
    /// counted separately and the full-scale backbone only as a constant.
    pub head_total: usize,
    pub model_total: usize,
}

impl ParameterAccounting {
    /// Head total plus the full-scale backbone constant.
    pub fn with_paper_backbone(&self) -> usize {
        self.head_total + RESNET50_PARAMS
    }

    pub fn render(&self, include_backbone: bool) -> String {
        let mut out = String::new();
        let mut row = |name: &str, count: usize| {
            out.push_str(&format!("{name:<22} {count:>12}\n"));
        };
        row("encoder", self.encoder);
        row("projections", self.projections);
        row("message block", self.message_block);
        row("output hidden", self.output_hidden);
        row("classifiers", self.classifiers);
        row("head total", self.head_total);
        row("model total", self.model_total);
        if include_backbone {
            row("backbone constant", RESNET50_PARAMS);
            row("total with backbone", self.with_paper_backbone());
        }
        out
    }
}

fn dense_params(input: usize, output: usize) -> usize {
    input * output + output
}

/// Per-stage and total parameter counts for a configuration, in closed
/// form. The message block holds 13 denses (6 intra + 4 inter + 3 merge);
/// the no_mp chains are built to the same count.
pub fn count_parameters(config: &UnifiedModelConfig) -> ParameterAccounting {
    let d = config.hidden_dim;
    let backbone = config.backbone_dim();
    let encoder = match config.input {
        InputKind::Feature { .. } => 0,
        InputKind::Image { stages, .. } => {
            let mut total = 0;
            let mut in_ch = 3;
            for s in 0..stages {
                let count = CONV_CHANNELS[s] * in_ch * 9 + CONV_CHANNELS[s];
                let dup = if config.variant == Variant::BackboneIndep && s == stages - 1 {
                    3
                } else {
                    1
                };
                total += count * dup;
                in_ch = CONV_CHANNELS[s];
            }
            total
        }
    };
    let projections = 3 * dense_params(backbone, d);
    let message_block = 13 * dense_params(d, d);
    let output_hidden = 3 * dense_params(d, d);
    let classifiers = dense_params(d, config.n_categories)
        + dense_params(d, config.n_sub_categories)
        + dense_params(d, config.n_attributes);
    let head_total = projections + message_block + output_hidden + classifiers;
    ParameterAccounting {
        encoder,
        projections,
        message_block,
        output_hidden,
        classifiers,
        head_total,
        model_total: head_total + encoder,
    }
}

/// One latent vector per level, per batch row.
#[derive(Clone, Copy)]
pub struct LevelLatents<'t> {
    pub cat: Value<'t>,
    pub sub: Value<'t>,
    pub attr: Value<'t>,
}

/// Pre-activation classifier outputs per level.
#[derive(Clone, Copy)]
pub struct LevelLogits<'t> {
    pub cat: Value<'t>,
    pub sub: Value<'t>,
    pub attr: Value<'t>,
}

/// Logits plus the activations consumed downstream: softmax rows for the
/// two exclusive levels, independent sigmoids for attributes.
#[derive(Clone, Copy)]
pub struct Outputs<'t> {
    pub logits: LevelLogits<'t>,
    pub cat_probs: Value<'t>,
    pub sub_probs: Value<'t>,
    pub attr_scores: Value<'t>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Replaces the upward direction's outputs with zeros, severing the
    /// sub-category and attribute paths into the category level.
    pub ablate_upward: bool,
}

struct MessageBlock {
    down_intra: [Dense; 3],
    /// cat -> sub, cat -> attr.
    down_inter: [Dense; 2],
    up_intra: [Dense; 3],
    /// sub -> cat, attr -> cat.
    up_inter: [Dense; 2],
    merge: [Dense; 3],
}

enum Block {
    MessagePass(MessageBlock),
    /// Per-level chains of depth 5/4/4.
    Stacked([Vec<Dense>; 3]),
}

struct LevelHead {
    hidden: Dense,
    out: Dense,
}

pub struct UnifiedModel {
    pub config: UnifiedModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    proj: [Dense; 3],
    block: Block,
    heads: [LevelHead; 3],
}

const LEVELS: [&str; 3] = ["cat", "sub", "attr"];

impl UnifiedModel {
    /// Builds a model with Glorot-initialized weights drawn from the seed.
    pub fn build(config: UnifiedModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let l2 = config.l2_factor;
        let d = config.hidden_dim;

        let encoder = Encoder::build(
            &mut params,
            &mut rng,
            &config.input,
            config.variant == Variant::BackboneIndep,
        );
        let backbone = encoder.out_dim();

        let proj = LEVELS.map(|level| {
            Dense::new(&mut params, &mut rng, &format!("proj.{level}"), backbone, d, l2)
        });

        let block = match config.variant {
            Variant::Final | Variant::BackboneIndep => {
                let down_intra = LEVELS.map(|level| {
                    Dense::new(&mut params, &mut rng, &format!("block.down.{level}"), d, d, l2)
                });
                let down_inter = ["cat_to_sub", "cat_to_attr"].map(|edge| {
                    Dense::new(&mut params, &mut rng, &format!("block.down.{edge}"), d, d, l2)
                });
                let up_intra = LEVELS.map(|level| {
                    Dense::new(&mut params, &mut rng, &format!("block.up.{level}"), d, d, l2)
                });
                let up_inter = ["sub_to_cat", "attr_to_cat"].map(|edge| {
                    Dense::new(&mut params, &mut rng, &format!("block.up.{edge}"), d, d, l2)
                });
                let merge = LEVELS.map(|level| {
                    Dense::new(&mut params, &mut rng, &format!("block.merge.{level}"), d, d, l2)
                });
                Block::MessagePass(MessageBlock {
                    down_intra,
                    down_inter,
                    up_intra,
                    up_inter,
                    merge,
                })
            }
            Variant::NoMp => {
                // Depth 5/4/4 reproduces the block's 13 denses exactly.
                let depths = [5usize, 4, 4];
                let chains = [0, 1, 2].map(|l| {
                    (0..depths[l])
                        .map(|i| {
                            Dense::new(
                                &mut params,
                                &mut rng,
                                &format!("block.{}.{i}", LEVELS[l]),
                                d,
                                d,
                                l2,
                            )
                        })
                        .collect::<Vec<_>>()
                });
                Block::Stacked(chains)
            }
        };

        let n_out = [
            config.n_categories,
            config.n_sub_categories,
            config.n_attributes,
        ];
        let heads = [0, 1, 2].map(|l| LevelHead {
            hidden: Dense::new(
                &mut params,
                &mut rng,
                &format!("head.{}.hidden", LEVELS[l]),
                d,
                d,
                l2,
            ),
            out: Dense::new(
                &mut params,
                &mut rng,
                &format!("head.{}.out", LEVELS[l]),
                d,
                n_out[l],
                l2,
            ),
        });

        Ok(UnifiedModel {
            config,
            params,
            encoder,
            proj,
            block,
            heads,
        })
    }

    /// Every dense layer, for the L2 penalty. Convolution kernels are not
    /// regularized.
    pub fn dense_layers(&self) -> Vec<Dense> {
        let mut layers: Vec<Dense> = self.proj.to_vec();
        match &self.block {
            Block::MessagePass(b) => {
                layers.extend_from_slice(&b.down_intra);
                layers.extend_from_slice(&b.down_inter);
                layers.extend_from_slice(&b.up_intra);
                layers.extend_from_slice(&b.up_inter);
                layers.extend_from_slice(&b.merge);
            }
            Block::Stacked(chains) => {
                for chain in chains {
                    layers.extend_from_slice(chain);
                }
            }
        }
        for head in &self.heads {
            layers.push(head.hidden);
            layers.push(head.out);
        }
        layers
    }

    /// Three independent dense + ReLU projections of the encoder output.
    pub fn project<'t>(
        &self,
        bound: &BoundParams<'t>,
        features: Features<'t>,
    ) -> LevelLatents<'t> {
        let [cat, sub, attr] =
            [0, 1, 2].map(|l| self.proj[l].forward(bound, features.for_level(l)).relu());
        LevelLatents { cat, sub, attr }
    }

    /// Runs the inter-level block (or its no_mp replacement) on projected
    /// latents, including the per-level merge dropout.
    pub fn propagate<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        z: LevelLatents<'t>,
        mode: Mode,
        rng: &mut R,
        opts: ForwardOpts,
    ) -> LevelLatents<'t> {
        let rate = self.config.dropout;
        match &self.block {
            Block::MessagePass(b) => {
                // Downward: category pushes into sub-category and attributes.
                let cat_d = b.down_intra[0].forward(bound, z.cat).relu();
                let sub_d = b.down_intra[1]
                    .forward(bound, z.sub)
                    .add(b.down_inter[0].forward(bound, z.cat))
                    .relu();
                let attr_d = b.down_intra[2]
                    .forward(bound, z.attr)
                    .add(b.down_inter[1].forward(bound, z.cat))
                    .relu();

                // Upward: both lower levels push into category.
                let (cat_u, sub_u, attr_u) = if opts.ablate_upward {
                    let batch = z.cat.shape()[0];
                    let zeros =
                        || tape.constant(vec![batch, self.config.hidden_dim],
                                         vec![0.0; batch * self.config.hidden_dim]);
                    (zeros(), zeros(), zeros())
                } else {
                    (
                        b.up_intra[0]
                            .forward(bound, z.cat)
                            .add(b.up_inter[0].forward(bound, z.sub))
                            .add(b.up_inter[1].forward(bound, z.attr))
                            .relu(),
                        b.up_intra[1].forward(bound, z.sub).relu(),
                        b.up_intra[2].forward(bound, z.attr).relu(),
                    )
                };

                let mut merged = [cat_d.add(cat_u), sub_d.add(sub_u), attr_d.add(attr_u)]
                    .into_iter()
                    .enumerate()
                    .map(|(l, pair)| {
                        let y = b.merge[l].forward(bound, pair).relu();
                        dropout(tape, y, rate, mode, rng)
                    });
                LevelLatents {
                    cat: merged.next().unwrap(),
                    sub: merged.next().unwrap(),
                    attr: merged.next().unwrap(),
                }
            }
            Block::Stacked(chains) => {
                let mut run = |l: usize, mut x: Value<'t>| {
                    for dense in &chains[l] {
                        x = dense.forward(bound, x).relu();
                    }
                    dropout(tape, x, rate, mode, rng)
                };
                LevelLatents {
                    cat: run(0, z.cat),
                    sub: run(1, z.sub),
                    attr: run(2, z.attr),
                }
            }
        }
    }

    /// Dense + ReLU hidden stage, then the per-level classifier.
    pub fn head_logits<'t>(&self, bound: &BoundParams<'t>, y: LevelLatents<'t>) -> LevelLogits<'t> {
        let [cat, sub, attr] = [0, 1, 2].map(|l| {
            let inputs = [y.cat, y.sub, y.attr];
            let h = self.heads[l].hidden.forward(bound, inputs[l]).relu();
            self.heads[l].out.forward(bound, h)
        });
        LevelLogits { cat, sub, attr }
    }

    pub fn forward<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        input: Value<'t>,
        mode: Mode,
        rng: &mut R,
    ) -> Outputs<'t> {
        self.forward_opts(tape, bound, input, mode, rng, ForwardOpts::default())
    }

    pub fn forward_opts<'t, R: Rng>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        input: Value<'t>,
        mode: Mode,
        rng: &mut R,
        opts: ForwardOpts,
    ) -> Outputs<'t> {
        let features = self.encoder.forward(bound, input);
        let latents = self.project(bound, features);
        let merged = self.propagate(tape, bound, latents, mode, rng, opts);
        let logits = self.head_logits(bound, merged);
        Outputs {
            logits,
            cat_probs: logits.cat.softmax_rows(),
            sub_probs: logits.sub.softmax_rows(),
            attr_scores: logits.attr.sigmoid(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::nn::save_checkpoint(path, &self.config.to_meta(), &self.params)
    }

    /// Rebuilds the architecture from checkpoint meta and restores every
    /// tensor by name, bit-exactly.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = crate::nn::load_checkpoint(path)?;
        let config = UnifiedModelConfig::from_meta(&ckpt.meta)?;
        let mut model = UnifiedModel::build(config, 0)?;
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let loaded = ckpt.params.find(&name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing tensor {name}"))
            })?;
            let src = ckpt.params.get(loaded);
            if src.shape() != model.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    src.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;

    fn desk_config(variant: Variant) -> UnifiedModelConfig {
        UnifiedModelConfig {
            input: InputKind::Feature { dim: 10 },
            hidden_dim: 16,
            n_categories: 5,
            n_sub_categories: 7,
            n_attributes: 6,
            variant,
            dropout: 0.3,
            l2_factor: 0.0005,
        }
    }

    #[test]
    fn paper_scale_accounting_is_exact() {
        let acc = count_parameters(&UnifiedModelConfig::paper_defaults());
        assert_eq!(acc.projections, 3 * 2_098_176);
        assert_eq!(acc.message_block, 13_644_800);
        assert_eq!(acc.output_hidden, 3_148_800);
        assert_eq!(acc.classifiers, 65_600 + 97_375 + 76_875);
        assert_eq!(acc.head_total, 23_327_978);
        assert_eq!(acc.with_paper_backbone(), 46_915_690);
    }

    #[test]
    fn unit_dims_count_44() {
        let config = UnifiedModelConfig {
            input: InputKind::Feature { dim: 1 },
            hidden_dim: 1,
            n_categories: 1,
            n_sub_categories: 1,
            n_attributes: 1,
            variant: Variant::Final,
            dropout: 0.0,
            l2_factor: 0.0,
        };
        assert_eq!(count_parameters(&config).head_total, 44);
    }

    #[test]
    fn accounting_matches_registered_tensors_for_every_variant() {
        for variant in [Variant::Final, Variant::NoMp, Variant::BackboneIndep] {
            let config = desk_config(variant);
            let acc = count_parameters(&config);
            let model = UnifiedModel::build(config, 1).unwrap();
            assert_eq!(
                acc.model_total,
                model.params.scalar_count(),
                "variant {variant:?}"
            );
        }
        // Image input exercises the encoder term, including duplication.
        for variant in [Variant::Final, Variant::BackboneIndep] {
            let config = UnifiedModelConfig {
                input: InputKind::Image { height: 16, width: 16, stages: 2 },
                ..desk_config(variant)
            };
            let acc = count_parameters(&config);
            let model = UnifiedModel::build(config, 1).unwrap();
            assert_eq!(acc.model_total, model.params.scalar_count(), "{variant:?}");
        }
    }

    #[test]
    fn no_mp_and_final_heads_count_identically() {
        let final_acc = count_parameters(&desk_config(Variant::Final));
        let no_mp_acc = count_parameters(&desk_config(Variant::NoMp));
        assert_eq!(final_acc.head_total, no_mp_acc.head_total);
        // And the built models agree tensor-for-tensor in total.
        let a = UnifiedModel::build(desk_config(Variant::Final), 3).unwrap();
        let b = UnifiedModel::build(desk_config(Variant::NoMp), 3).unwrap();
        assert_eq!(a.params.scalar_count(), b.params.scalar_count());
    }

    fn forward_eval(model: &UnifiedModel, input: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
        let mut rng = StdRng::seed_from_u64(0);
        let out = model.forward(&tape, &bound, x, Mode::Eval, &mut rng);
        (
            out.cat_probs.to_tensor().data().to_vec(),
            out.sub_probs.to_tensor().data().to_vec(),
            out.attr_scores.to_tensor().data().to_vec(),
        )
    }

    #[test]
    fn probabilities_normalize_and_rows_are_independent() {
        let model = UnifiedModel::build(desk_config(Variant::Final), 5).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        use rand::Rng as _;
        let row: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend(row.iter().map(|v| v * 0.5));
        data.extend(&row);
        let batch = Tensor::new(vec![3, 10], data);
        let (cat, _, attr) = forward_eval(&model, &batch);

        for chunk in cat.chunks(5) {
            let total: f64 = chunk.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        // Rows 0 and 2 hold the same product: identical outputs.
        assert_eq!(cat[0..5], cat[10..15]);
        assert_eq!(attr[0..6], attr[12..18]);
    }

    #[test]
    fn eval_forward_matches_row_by_row_oracle() {
        let model = UnifiedModel::build(desk_config(Variant::Final), 9).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        use rand::Rng as _;
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![4, 10], data.clone());
        let (cat_b, sub_b, attr_b) = forward_eval(&model, &batch);
        for r in 0..4 {
            let row = Tensor::new(vec![1, 10], data[r * 10..(r + 1) * 10].to_vec());
            let (cat_r, sub_r, attr_r) = forward_eval(&model, &row);
            for (a, b) in cat_r.iter().zip(&cat_b[r * 5..(r + 1) * 5]) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in sub_r.iter().zip(&sub_b[r * 7..(r + 1) * 7]) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in attr_r.iter().zip(&attr_b[r * 6..(r + 1) * 6]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_classifier_weights_give_uniform_and_half_scores() {
        let mut model = UnifiedModel::build(desk_config(Variant::Final), 2).unwrap();
        for level in LEVELS {
            let w = model.params.find(&format!("head.{level}.out.weight")).unwrap();
            model.params.get_mut(w).data_mut().fill(0.0);
        }
        let batch = Tensor::new(vec![1, 10], vec![0.3; 10]);
        let (cat, _, attr) = forward_eval(&model, &batch);
        for p in &cat {
            assert!((p - 0.2).abs() < 1e-12);
        }
        for s in &attr {
            assert_eq!(*s, 0.5);
            assert!(*s <= 0.75);
        }
    }

    #[test]
    fn distinct_projections_produce_distinct_latents() {
        let model = UnifiedModel::build(desk_config(Variant::Final), 11).unwrap();
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let x = tape.constant(vec![1, 10], (0..10).map(|i| i as f64 * 0.1).collect());
        let z = model.project(&bound, Features::Shared(x));
        assert_ne!(z.cat.to_tensor().data(), z.sub.to_tensor().data());
        assert_ne!(z.sub.to_tensor().data(), z.attr.to_tensor().data());
    }

    #[test]
    fn attribute_logits_never_hear_the_sub_latent() {
        // Holds with the upward direction both on and off: the only paths
        // out of x_sub lead to sub logits and (upward) to cat logits.
        let model = UnifiedModel::build(desk_config(Variant::Final), 6).unwrap();
        for ablate in [false, true] {
            let run = |sub_latent: f64| {
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let mk = |v: f64| tape.constant(vec![2, 16], vec![v; 32]);
                let z = LevelLatents { cat: mk(0.4), sub: mk(sub_latent), attr: mk(0.2) };
                let mut rng = StdRng::seed_from_u64(0);
                let y = model.propagate(
                    &tape, &bound, z, Mode::Eval, &mut rng,
                    ForwardOpts { ablate_upward: ablate },
                );
                let logits = model.head_logits(&bound, y);
                (
                    logits.attr.to_tensor().data().to_vec(),
                    logits.cat.to_tensor().data().to_vec(),
                )
            };
            let (attr_a, cat_a) = run(0.1);
            let (attr_b, cat_b) = run(-2.5);
            assert_eq!(attr_a, attr_b, "ablate={ablate}");
            if ablate {
                assert_eq!(cat_a, cat_b, "ablated cat must ignore sub too");
            } else {
                assert_ne!(cat_a, cat_b, "upward path should carry sub into cat");
            }
        }
    }

    #[test]
    fn gradients_flow_from_cat_loss_into_attr_projection() {
        let model = UnifiedModel::build(desk_config(Variant::Final), 13).unwrap();
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let x = tape.constant(vec![2, 10], (0..20).map(|i| (i as f64 * 0.37).sin()).collect());
        let mut rng = StdRng::seed_from_u64(0);
        let out = model.forward(&tape, &bound, x, Mode::Eval, &mut rng);
        let loss = crate::loss::weighted_ce(&tape, out.cat_probs, &[1, 3], &[1.0; 5]);
        let grads = tape.backward(loss);
        let attr_proj = model.params.find("proj.attr.weight").unwrap();
        let g = grads.wrt(bound.value(attr_proj));
        assert!(g.iter().any(|v| v.abs() > 1e-12));
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs_bitwise() {
        let model = UnifiedModel::build(desk_config(Variant::Final), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unified.ckpt");
        model.save(&path).unwrap();
        let loaded = UnifiedModel::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        let batch = Tensor::new(vec![2, 10], (0..20).map(|i| i as f64 * 0.05).collect());
        assert_eq!(forward_eval(&model, &batch), forward_eval(&loaded, &batch));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut config = desk_config(Variant::Final);
        config.hidden_dim = 0;
        assert!(matches!(UnifiedModel::build(config, 0), Err(Error::Config(_))));
        let bad_image = UnifiedModelConfig {
            input: InputKind::Image { height: 30, width: 30, stages: 3 },
            ..desk_config(Variant::Final)
        };
        assert!(bad_image.validate().is_err());
        assert!("resnet".parse::<Variant>().is_err());
    }
}
