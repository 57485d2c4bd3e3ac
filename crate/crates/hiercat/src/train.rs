//! Training loops, evaluation, prediction, and the consistency audit for
//! the unified model and the specialist pipeline.
//!
//! Everything here is deterministic given (config, seed): one ChaCha stream
//! drives shuffling, augmentation, and dropout in a fixed draw order, and
//! evaluation never consumes randomness at all.
//!
//! Ground truth during evaluation means the annotations. The hidden-truth
//! sidecar, when a dataset carries one, is used only by the audit, which is
//! exactly the place where "the model predicts attributes the annotators
//! missed" stops being an anecdote and becomes a recall number.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::augment_payload;
use crate::data::{payload_tensor, Dataset, InputMode, LabelSpace, Payload};
use crate::loss::{total_loss, weighted_bce, weighted_ce, ClassWeights};
use crate::metrics::{
    audit_cooccurrence, at_k, average_precision, mean_predicted_attributes, overall_prf,
    overall_prf_sets, threshold_predict, AttributeReport, ConsistencyReport, EvalReport, LevelPrf,
};
use crate::model::baseline::{
    HeadKind, Pipeline, Specialist, TemplateModel, TemplateModelConfig,
};
use crate::model::{InputKind, UnifiedModel};
use crate::nn::{l2_penalty, Adam, Mode};
use crate::taxonomy::{CategoryTree, Level};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

pub const AUGMENT_PROBABILITY: f64 = 0.5;
const EVAL_BATCH: usize = 64;

/// How attribute BCE positive weights are scaled.
///
/// `Normalized` keeps the mean-1 convention the multiclass levels use. With
/// scarce positives that convention caps the optimal sigmoid scores near
/// w/(w+1), which a strict 0.75 threshold never passes once w falls below 3;
/// `Raw` keeps the plain inverse frequencies instead, so rare-label
/// positives stay expensive enough to push scores past the threshold. Raw
/// is the default for exactly that reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrWeightMode {
    Raw,
    Normalized,
}

impl FromStr for AttrWeightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(AttrWeightMode::Raw),
            "normalized" => Ok(AttrWeightMode::Normalized),
            other => Err(Error::Config(format!(
                "unknown attribute weight mode {other:?}; expected raw or normalized"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Attribute decision threshold used wherever training reports metrics.
    pub threshold: f64,
    pub attr_weight_mode: AttrWeightMode,
    /// Random transforms on image payloads; ignored in feature mode.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 7,
            threshold: 0.75,
            attr_weight_mode: AttrWeightMode::Raw,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss (levels plus L2) over the epoch's batches.
    pub loss: f64,
    /// Running train-mode accuracies, cheap but dropout-noisy.
    pub category_accuracy: f64,
    pub sub_category_accuracy: f64,
}

/// Laplace-smoothed multiclass frequencies, (count + 1) / (n + C). Sums to
/// one exactly and never yields a zero, so inverse weighting stays defined
/// for classes absent from a training split.
pub fn smoothed_multiclass_frequencies(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let denom = (n + counts.len()) as f64;
    counts.iter().map(|&k| (k + 1) as f64 / denom).collect()
}

/// Smoothed per-label positive rates, (count + 1/2) / (n + 1), each in
/// (0, 1).
pub fn smoothed_label_frequencies(counts: &[usize], products: usize) -> Vec<f64> {
    counts
        .iter()
        .map(|&k| (k as f64 + 0.5) / (products as f64 + 1.0))
        .collect()
}

struct Targets {
    cat: Vec<usize>,
    sub: Vec<usize>,
    attrs: Vec<Vec<usize>>,
}

fn dataset_targets(dataset: &Dataset, labels: &LabelSpace) -> Result<Targets> {
    let mut cat = Vec::with_capacity(dataset.len());
    let mut sub = Vec::with_capacity(dataset.len());
    let mut attrs = Vec::with_capacity(dataset.len());
    for record in &dataset.records {
        cat.push(labels.category_index(record.category)?);
        sub.push(labels.sub_index(record.sub_category)?);
        attrs.push(
            record
                .attributes
                .iter()
                .map(|&a| labels.attribute_index(a))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(Targets { cat, sub, attrs })
}

fn check_unified_compatible(
    model: &UnifiedModel,
    labels: &LabelSpace,
    dataset: &Dataset,
) -> Result<()> {
    let c = &model.config;
    if (c.n_categories, c.n_sub_categories, c.n_attributes)
        != (
            labels.n_categories(),
            labels.n_sub_categories(),
            labels.n_attributes(),
        )
    {
        return Err(Error::Config(format!(
            "model classifies {}/{}/{} classes but the tree defines {}/{}/{}",
            c.n_categories,
            c.n_sub_categories,
            c.n_attributes,
            labels.n_categories(),
            labels.n_sub_categories(),
            labels.n_attributes()
        )));
    }
    match (c.input, dataset.mode) {
        (InputKind::Feature { dim }, InputMode::Feature { dim: have }) if dim == have => Ok(()),
        (
            InputKind::Image { height, width, .. },
            InputMode::Image {
                height: have_h,
                width: have_w,
            },
        ) if (height, width) == (have_h, have_w) => Ok(()),
        (expected, have) => Err(Error::Config(format!(
            "model expects input {expected:?} but the dataset holds {have:?}"
        ))),
    }
}

fn batch_input<R: Rng>(
    dataset: &Dataset,
    indices: &[usize],
    do_augment: bool,
    rng: &mut R,
) -> Tensor {
    match dataset.mode {
        InputMode::Image { .. } if do_augment => {
            let payloads: Vec<Payload> = indices
                .iter()
                .map(|&i| {
                    augment_payload(&dataset.records[i].payload, AUGMENT_PROBABILITY, rng)
                })
                .collect();
            let refs: Vec<&Payload> = payloads.iter().collect();
            payload_tensor(dataset.mode, &refs)
        }
        _ => dataset.input_tensor(indices),
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let classes = t.shape()[1];
    t.data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct LevelWeights {
    cat: Vec<f64>,
    sub: Vec<f64>,
    attr: Vec<f64>,
}

fn level_weights(
    targets: &Targets,
    labels: &LabelSpace,
    mode: AttrWeightMode,
) -> Result<LevelWeights> {
    let products = targets.cat.len();
    let mut cat_counts = vec![0usize; labels.n_categories()];
    for &c in &targets.cat {
        cat_counts[c] += 1;
    }
    let mut sub_counts = vec![0usize; labels.n_sub_categories()];
    for &s in &targets.sub {
        sub_counts[s] += 1;
    }
    let mut attr_counts = vec![0usize; labels.n_attributes()];
    for set in &targets.attrs {
        for &a in set {
            attr_counts[a] += 1;
        }
    }
    let cat = ClassWeights::from_multiclass(&smoothed_multiclass_frequencies(&cat_counts))?;
    let sub = ClassWeights::from_multiclass(&smoothed_multiclass_frequencies(&sub_counts))?;
    let attr =
        ClassWeights::from_label_frequencies(&smoothed_label_frequencies(&attr_counts, products))?;
    Ok(LevelWeights {
        cat: cat.weights().to_vec(),
        sub: sub.weights().to_vec(),
        attr: match mode {
            AttrWeightMode::Raw => attr.raw(),
            AttrWeightMode::Normalized => attr.weights().to_vec(),
        },
    })
}

/// Single-shot end-to-end training: shuffled batches, inverse-frequency
/// weighted losses on all three levels at once, L2, Adam. Writes one log
/// line per epoch.
pub fn train_unified(
    model: &mut UnifiedModel,
    tree: &CategoryTree,
    train: &Dataset,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    let labels = LabelSpace::from_tree(tree);
    check_unified_compatible(model, &labels, train)?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    train.check_against_tree(tree)?;
    let targets = dataset_targets(train, &labels)?;
    let weights = level_weights(&targets, &labels, config.attr_weight_mode)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let layers = model.dense_layers();
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut cat_hits = 0usize;
        let mut sub_hits = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let input = batch_input(train, chunk, config.augment, &mut rng);
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
            let out = model.forward(&tape, &bound, x, Mode::Train, &mut rng);

            let cat_t: Vec<usize> = chunk.iter().map(|&i| targets.cat[i]).collect();
            let sub_t: Vec<usize> = chunk.iter().map(|&i| targets.sub[i]).collect();
            let attr_t: Vec<Vec<usize>> =
                chunk.iter().map(|&i| targets.attrs[i].clone()).collect();

            let loss = total_loss(
                weighted_ce(&tape, out.cat_probs, &cat_t, &weights.cat),
                weighted_ce(&tape, out.sub_probs, &sub_t, &weights.sub),
                weighted_bce(&tape, out.attr_scores, &attr_t, &weights.attr),
                l2_penalty(&bound, &layers),
            );
            loss_sum += loss.item();
            batches += 1;
            for (p, t) in argmax_rows(&out.cat_probs.to_tensor()).iter().zip(&cat_t) {
                cat_hits += usize::from(p == t);
            }
            for (p, t) in argmax_rows(&out.sub_probs.to_tensor()).iter().zip(&sub_t) {
                sub_hits += usize::from(p == t);
            }

            let grads = tape.backward(loss);
            adam.step(&mut model.params, &bound, &grads)?;
        }
        let stat = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            category_accuracy: cat_hits as f64 / train.len() as f64,
            sub_category_accuracy: sub_hits as f64 / train.len() as f64,
        };
        writeln!(
            log,
            "epoch {:>3}  loss {:.4}  category acc {:.4}  sub-category acc {:.4}",
            stat.epoch, stat.loss, stat.category_accuracy, stat.sub_category_accuracy
        )?;
        stats.push(stat);
    }
    Ok(stats)
}

/// Deterministic eval-mode inference over the whole dataset: category and
/// sub-category argmax indices plus raw attribute scores, in record order.
fn run_unified(
    model: &UnifiedModel,
    dataset: &Dataset,
) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>) {
    let mut cat = Vec::with_capacity(dataset.len());
    let mut sub = Vec::with_capacity(dataset.len());
    let mut attrs = Vec::with_capacity(dataset.len());
    // Eval mode consumes no randomness; the rng argument is inert.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let input = dataset.input_tensor(chunk);
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
        let out = model.forward(&tape, &bound, x, Mode::Eval, &mut rng);
        cat.extend(argmax_rows(&out.cat_probs.to_tensor()));
        sub.extend(argmax_rows(&out.sub_probs.to_tensor()));
        let scores = out.attr_scores.to_tensor();
        let n = scores.shape()[1];
        for row in scores.data().chunks(n) {
            attrs.push(row.to_vec());
        }
    }
    (cat, sub, attrs)
}

/// Evaluation against the annotations: per-level OP/OR/OF1, rank metrics
/// for attributes, and the co-occurrence consistency of the predictions.
pub fn evaluate_unified(
    model: &UnifiedModel,
    tree: &CategoryTree,
    test: &Dataset,
    threshold: f64,
) -> Result<EvalReport> {
    let labels = LabelSpace::from_tree(tree);
    check_unified_compatible(model, &labels, test)?;
    if test.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    test.check_against_tree(tree)?;
    let targets = dataset_targets(test, &labels)?;
    let (cat_pred, sub_pred, attr_scores) = run_unified(model, test);

    let predicted_sets = threshold_predict(&attr_scores, threshold);
    let mean_annotated = targets.attrs.iter().map(|s| s.len()).sum::<usize>() as f64
        / targets.attrs.len() as f64;

    let triples: Vec<(u32, u32, Vec<u32>)> = (0..test.len())
        .map(|i| {
            (
                labels.categories()[cat_pred[i]],
                labels.sub_categories()[sub_pred[i]],
                predicted_sets[i]
                    .iter()
                    .map(|&a| labels.attributes()[a])
                    .collect(),
            )
        })
        .collect();

    Ok(EvalReport {
        category: overall_prf(&targets.cat, &cat_pred, labels.n_categories()),
        sub_category: overall_prf(&targets.sub, &sub_pred, labels.n_sub_categories()),
        attributes: AttributeReport {
            overall: overall_prf_sets(&targets.attrs, &predicted_sets, labels.n_attributes()),
            at_k: at_k(&attr_scores, &targets.attrs),
            average_precision: average_precision(&attr_scores, &targets.attrs),
            mean_predicted: mean_predicted_attributes(&predicted_sets),
            mean_annotated,
        },
        consistency: audit_cooccurrence(&triples, tree)?,
        coverage: None,
    })
}

/// One product's structured prediction. Gender and family are inferred by
/// walking the tree up from the predicted category.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: u32,
    pub gender: u32,
    pub family: u32,
    pub category: u32,
    pub category_confidence: f64,
    pub sub_category: u32,
    pub sub_confidence: f64,
    /// Attributes scoring strictly above the threshold, with their scores.
    pub attributes: Vec<(u32, f64)>,
}

impl Prediction {
    pub const RENDER_HEADER: &'static str =
        "# id\tgender\tfamily\tcategory\tcategory_conf\tsub_category\tsub_conf\tattributes";

    pub fn render(&self) -> String {
        let attrs = if self.attributes.is_empty() {
            "-".to_string()
        } else {
            self.attributes
                .iter()
                .map(|(id, score)| format!("{id}:{score:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{}\t{:.4}\t{}",
            self.id,
            self.gender,
            self.family,
            self.category,
            self.category_confidence,
            self.sub_category,
            self.sub_confidence,
            attrs
        )
    }
}

pub fn predict_unified(
    model: &UnifiedModel,
    tree: &CategoryTree,
    dataset: &Dataset,
    threshold: f64,
) -> Result<Vec<Prediction>> {
    let labels = LabelSpace::from_tree(tree);
    check_unified_compatible(model, &labels, dataset)?;
    let (cat_pred, sub_pred, attr_scores) = run_unified(model, dataset);
    let mut out = Vec::with_capacity(dataset.len());
    for (i, record) in dataset.records.iter().enumerate() {
        let category = labels.categories()[cat_pred[i]];
        let (family, gender) = tree.category_ancestors(category)?;
        let cat_row = &attr_scores[i];
        debug_assert_eq!(cat_row.len(), labels.n_attributes());
        out.push(Prediction {
            id: record.id,
            gender,
            family,
            category,
            category_confidence: confidence_of(model, dataset, i, cat_pred[i], Level::Category),
            sub_category: labels.sub_categories()[sub_pred[i]],
            sub_confidence: confidence_of(model, dataset, i, sub_pred[i], Level::SubCategory),
            attributes: attr_scores[i]
                .iter()
                .enumerate()
                .filter(|(_, s)| **s > threshold)
                .map(|(a, s)| (labels.attributes()[a], *s))
                .collect(),
        });
    }
    Ok(out)
}

/// Re-runs one product to read out the probability behind an argmax. The
/// redundant forward keeps `run_unified` lean for the common metric path.
fn confidence_of(
    model: &UnifiedModel,
    dataset: &Dataset,
    index: usize,
    class: usize,
    level: Level,
) -> f64 {
    let input = dataset.input_tensor(&[index]);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&tape, &bound, x, Mode::Eval, &mut rng);
    let probs = match level {
        Level::Category => out.cat_probs.to_tensor(),
        Level::SubCategory => out.sub_probs.to_tensor(),
        other => panic!("no confidence defined for level {other}"),
    };
    probs.data()[class]
}

/// Pooled recall: summed intersection sizes over summed truth sizes.
fn pooled_recall(predicted: &[Vec<u32>], truth: &[Vec<u32>]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        total += t.len();
        hit += t.iter().filter(|a| p.contains(a)).count();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenTruthAudit {
    pub mean_hidden: f64,
    /// Model's thresholded predictions scored against the full truth.
    pub model_recall_vs_hidden: f64,
    /// The same predictions scored against the (lossy) annotations.
    pub model_recall_vs_annotations: f64,
    /// How much of the truth the annotations themselves retained.
    pub annotation_recall_vs_hidden: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOutcome {
    pub consistency: ConsistencyReport,
    pub mean_predicted: f64,
    pub mean_annotated: f64,
    /// Present when the dataset carries a hidden-truth sidecar.
    pub hidden: Option<HiddenTruthAudit>,
}

impl AuditOutcome {
    pub fn render(&self) -> String {
        let mut out = format!(
            "consistency violation rate {:.4} ({} violating pair kinds)\n",
            self.consistency.rate,
            self.consistency.violations.len()
        );
        out.push_str(&format!("mean predicted attributes  {:.4}\n", self.mean_predicted));
        out.push_str(&format!("mean annotated attributes  {:.4}\n", self.mean_annotated));
        if let Some(h) = &self.hidden {
            out.push_str(&format!("mean hidden attributes     {:.4}\n", h.mean_hidden));
            out.push_str(&format!(
                "model recall vs hidden      {:.4}\n",
                h.model_recall_vs_hidden
            ));
            out.push_str(&format!(
                "model recall vs annotations {:.4}\n",
                h.model_recall_vs_annotations
            ));
            out.push_str(&format!(
                "annotation recall vs hidden {:.4}\n",
                h.annotation_recall_vs_hidden
            ));
        }
        out
    }
}

/// Consistency and attribute-coverage audit. With a hidden-truth sidecar it
/// also answers whether the model recovered attributes the annotations
/// dropped.
pub fn audit_unified(
    model: &UnifiedModel,
    tree: &CategoryTree,
    dataset: &Dataset,
    threshold: f64,
) -> Result<AuditOutcome> {
    let labels = LabelSpace::from_tree(tree);
    check_unified_compatible(model, &labels, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Data("audit set is empty".into()));
    }
    let (cat_pred, sub_pred, attr_scores) = run_unified(model, dataset);
    let predicted_sets = threshold_predict(&attr_scores, threshold);
    let predicted_ids: Vec<Vec<u32>> = predicted_sets
        .iter()
        .map(|set| set.iter().map(|&a| labels.attributes()[a]).collect())
        .collect();
    let annotated_ids: Vec<Vec<u32>> = dataset
        .records
        .iter()
        .map(|r| r.attributes.clone())
        .collect();

    let triples: Vec<(u32, u32, Vec<u32>)> = (0..dataset.len())
        .map(|i| {
            (
                labels.categories()[cat_pred[i]],
                labels.sub_categories()[sub_pred[i]],
                predicted_ids[i].clone(),
            )
        })
        .collect();

    let hidden = dataset.hidden_truth.as_ref().map(|map| {
        let hidden_ids: Vec<Vec<u32>> = dataset
            .records
            .iter()
            .map(|r| map.get(&r.id).cloned().unwrap_or_default())
            .collect();
        HiddenTruthAudit {
            mean_hidden: hidden_ids.iter().map(|s| s.len()).sum::<usize>() as f64
                / hidden_ids.len() as f64,
            model_recall_vs_hidden: pooled_recall(&predicted_ids, &hidden_ids),
            model_recall_vs_annotations: pooled_recall(&predicted_ids, &annotated_ids),
            annotation_recall_vs_hidden: pooled_recall(&annotated_ids, &hidden_ids),
        }
    });

    Ok(AuditOutcome {
        consistency: audit_cooccurrence(&triples, tree)?,
        mean_predicted: mean_predicted_attributes(&predicted_sets),
        mean_annotated: annotated_ids.iter().map(|s| s.len()).sum::<usize>() as f64
            / annotated_ids.len() as f64,
        hidden,
    })
}

/// Targets for one template model, aligned with the index slice it trains
/// on.
pub enum TemplateTargets {
    Multiclass(Vec<usize>),
    Multilabel(Vec<Vec<usize>>),
}

/// Trains one pipeline member on a slice of the dataset.
pub fn train_template(
    model: &mut TemplateModel,
    dataset: &Dataset,
    indices: &[usize],
    targets: &TemplateTargets,
    weights: &[f64],
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    let target_len = match targets {
        TemplateTargets::Multiclass(t) => t.len(),
        TemplateTargets::Multilabel(t) => t.len(),
    };
    if target_len != indices.len() {
        return Err(Error::Config(format!(
            "{} targets for {} training rows",
            target_len,
            indices.len()
        )));
    }
    if weights.len() != model.config.n_outputs {
        return Err(Error::Config(format!(
            "{} weights for {} outputs",
            weights.len(),
            model.config.n_outputs
        )));
    }
    match (targets, model.config.kind) {
        (TemplateTargets::Multiclass(_), HeadKind::Multiclass) => {}
        (TemplateTargets::Multilabel(_), HeadKind::Multilabel) => {}
        _ => {
            return Err(Error::Config(
                "target kind disagrees with the model head".into(),
            ))
        }
    }
    if indices.is_empty() {
        return Err(Error::Data("training slice is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let layers = model.dense_layers();
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<usize> = chunk.iter().map(|&k| indices[k]).collect();
            let input = batch_input(dataset, &rows, config.augment, &mut rng);
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let x = tape.constant(input.shape().to_vec(), input.data().to_vec());
            let out = model.forward(&bound, x);
            let data_loss = match targets {
                TemplateTargets::Multiclass(t) => {
                    let batch_t: Vec<usize> = chunk.iter().map(|&k| t[k]).collect();
                    weighted_ce(&tape, out, &batch_t, weights)
                }
                TemplateTargets::Multilabel(t) => {
                    let batch_t: Vec<Vec<usize>> =
                        chunk.iter().map(|&k| t[k].clone()).collect();
                    weighted_bce(&tape, out, &batch_t, weights)
                }
            };
            let loss = data_loss.add(l2_penalty(&bound, &layers));
            let grads = tape.backward(loss);
            adam.step(&mut model.params, &bound, &grads)?;
        }
    }
    Ok(())
}

fn sub_children(tree: &CategoryTree, category: u32) -> Vec<u32> {
    tree.nodes()
        .iter()
        .filter(|n| n.level == Level::SubCategory && n.links.first() == Some(&category))
        .map(|n| n.id)
        .collect()
}

fn attached_attributes(tree: &CategoryTree, category: u32) -> Vec<u32> {
    tree.nodes()
        .iter()
        .filter(|n| n.level == Level::Attribute && n.links.contains(&category))
        .map(|n| n.id)
        .collect()
}

/// Trains the whole first-approach pipeline: the generic category model on
/// everything, then one sub-category and one attribute specialist per
/// category slice that has any products.
pub fn train_pipeline(
    tree: &CategoryTree,
    train: &Dataset,
    hidden_dim: usize,
    conv_stages: usize,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Pipeline> {
    config.validate()?;
    let labels = LabelSpace::from_tree(tree);
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    train.check_against_tree(tree)?;
    let targets = dataset_targets(train, &labels)?;
    let input = train.mode.input_kind(conv_stages);
    let all: Vec<usize> = (0..train.len()).collect();

    let mut cat_counts = vec![0usize; labels.n_categories()];
    for &c in &targets.cat {
        cat_counts[c] += 1;
    }
    let cat_weights =
        ClassWeights::from_multiclass(&smoothed_multiclass_frequencies(&cat_counts))?;
    let mut category_model = TemplateModel::build(
        TemplateModelConfig {
            input,
            hidden_dim,
            n_outputs: labels.n_categories(),
            kind: HeadKind::Multiclass,
            l2_factor: crate::nn::L2_FACTOR,
        },
        config.seed,
    )?;
    writeln!(log, "category model: {} products", train.len())?;
    train_template(
        &mut category_model,
        train,
        &all,
        &TemplateTargets::Multiclass(targets.cat.clone()),
        cat_weights.weights(),
        config,
    )?;
    let mut pipeline = Pipeline::new(labels.categories().to_vec(), category_model)?;

    for (c, &category) in labels.categories().iter().enumerate() {
        let slice: Vec<usize> = (0..train.len()).filter(|&i| targets.cat[i] == c).collect();
        let children = sub_children(tree, category);
        if slice.is_empty() || children.is_empty() {
            writeln!(
                log,
                "category {category}: no products or no sub-categories, left uncovered"
            )?;
            continue;
        }

        let child_pos: BTreeMap<u32, usize> =
            children.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let sub_targets: Vec<usize> = slice
            .iter()
            .map(|&i| child_pos[&train.records[i].sub_category])
            .collect();
        let mut sub_counts = vec![0usize; children.len()];
        for &t in &sub_targets {
            sub_counts[t] += 1;
        }
        let sub_weights =
            ClassWeights::from_multiclass(&smoothed_multiclass_frequencies(&sub_counts))?;
        let mut sub_model = TemplateModel::build(
            TemplateModelConfig {
                input,
                hidden_dim,
                n_outputs: children.len(),
                kind: HeadKind::Multiclass,
                l2_factor: crate::nn::L2_FACTOR,
            },
            config.seed + 1 + c as u64,
        )?;
        writeln!(
            log,
            "category {category}: sub-category specialist on {} products, {} classes",
            slice.len(),
            children.len()
        )?;
        train_template(
            &mut sub_model,
            train,
            &slice,
            &TemplateTargets::Multiclass(sub_targets),
            sub_weights.weights(),
            config,
        )?;
        pipeline.add_sub_specialist(Specialist {
            category,
            labels: children,
            model: sub_model,
        })?;

        let attached = attached_attributes(tree, category);
        if attached.is_empty() {
            writeln!(log, "category {category}: no attached attributes")?;
            continue;
        }
        let attr_pos: BTreeMap<u32, usize> =
            attached.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let attr_targets: Vec<Vec<usize>> = slice
            .iter()
            .map(|&i| {
                train.records[i]
                    .attributes
                    .iter()
                    .map(|a| attr_pos[a])
                    .collect()
            })
            .collect();
        let mut attr_counts = vec![0usize; attached.len()];
        for set in &attr_targets {
            for &a in set {
                attr_counts[a] += 1;
            }
        }
        let attr_weights = ClassWeights::from_label_frequencies(&smoothed_label_frequencies(
            &attr_counts,
            slice.len(),
        ))?;
        let weight_slice = match config.attr_weight_mode {
            AttrWeightMode::Raw => attr_weights.raw(),
            AttrWeightMode::Normalized => attr_weights.weights().to_vec(),
        };
        let mut attr_model = TemplateModel::build(
            TemplateModelConfig {
                input,
                hidden_dim,
                n_outputs: attached.len(),
                kind: HeadKind::Multilabel,
                l2_factor: crate::nn::L2_FACTOR,
            },
            config.seed + 10_007 + c as u64,
        )?;
        writeln!(
            log,
            "category {category}: attribute specialist on {} products, {} labels",
            slice.len(),
            attached.len()
        )?;
        train_template(
            &mut attr_model,
            train,
            &slice,
            &TemplateTargets::Multilabel(attr_targets),
            &weight_slice,
            config,
        )?;
        pipeline.add_attr_specialist(Specialist {
            category,
            labels: attached,
            model: attr_model,
        })?;
    }
    Ok(pipeline)
}

/// Pipeline evaluation. Uncovered products are skipped per level and
/// reported through `coverage`; rank metrics are not defined for the
/// pipeline because specialists only score their own category's labels.
pub fn evaluate_pipeline(
    pipeline: &Pipeline,
    tree: &CategoryTree,
    test: &Dataset,
    threshold: f64,
    oracle_category: bool,
) -> Result<EvalReport> {
    let labels = LabelSpace::from_tree(tree);
    if test.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    test.check_against_tree(tree)?;
    let targets = dataset_targets(test, &labels)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let input = test.input_tensor(&all);
    let oracle: Option<Vec<u32>> =
        oracle_category.then(|| test.records.iter().map(|r| r.category).collect());
    let predictions = pipeline.predict(&input, oracle.as_deref(), threshold)?;

    let cat_pred: Vec<usize> = predictions
        .iter()
        .map(|p| labels.category_index(p.category))
        .collect::<Result<_>>()?;
    let category = overall_prf(&targets.cat, &cat_pred, labels.n_categories());

    let zero = LevelPrf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    let mut sub_truth = Vec::new();
    let mut sub_pred = Vec::new();
    let mut triples = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        if let Some((sub_id, _)) = p.sub_category {
            sub_truth.push(targets.sub[i]);
            sub_pred.push(labels.sub_index(sub_id)?);
            let attrs: Vec<u32> = p
                .attributes
                .as_ref()
                .map(|kept| kept.iter().map(|(id, _)| *id).collect())
                .unwrap_or_default();
            triples.push((p.category, sub_id, attrs));
        }
    }
    let coverage = sub_truth.len() as f64 / test.len() as f64;
    let sub_category = if sub_truth.is_empty() {
        zero
    } else {
        overall_prf(&sub_truth, &sub_pred, labels.n_sub_categories())
    };

    let mut attr_truth = Vec::new();
    let mut attr_pred = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        if let Some(kept) = &p.attributes {
            attr_truth.push(targets.attrs[i].clone());
            attr_pred.push(
                kept.iter()
                    .map(|(id, _)| labels.attribute_index(*id))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    let attributes = AttributeReport {
        overall: if attr_truth.is_empty() {
            zero
        } else {
            overall_prf_sets(&attr_truth, &attr_pred, labels.n_attributes())
        },
        at_k: None,
        average_precision: None,
        mean_predicted: if attr_pred.is_empty() {
            0.0
        } else {
            mean_predicted_attributes(&attr_pred)
        },
        mean_annotated: if attr_truth.is_empty() {
            0.0
        } else {
            attr_truth.iter().map(|s| s.len()).sum::<usize>() as f64 / attr_truth.len() as f64
        },
    };

    Ok(EvalReport {
        category,
        sub_category,
        attributes,
        consistency: audit_cooccurrence(&triples, tree)?,
        coverage: Some(coverage),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::model::{UnifiedModelConfig, Variant};

    fn tiny_generated(products: usize, missingness: f64) -> crate::data::Generated {
        generate(&GeneratorConfig {
            products,
            categories: 3,
            sub_categories: 6,
            attributes: 5,
            attribute_rate: 0.5,
            missingness,
            noise: 0.1,
            mode: InputMode::Feature { dim: 12 },
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn tiny_model(g: &crate::data::Generated, seed: u64) -> UnifiedModel {
        let labels = LabelSpace::from_tree(&g.tree);
        UnifiedModel::build(
            UnifiedModelConfig {
                input: InputKind::Feature { dim: 12 },
                hidden_dim: 16,
                n_categories: labels.n_categories(),
                n_sub_categories: labels.n_sub_categories(),
                n_attributes: labels.n_attributes(),
                variant: Variant::Final,
                dropout: 0.1,
                l2_factor: 0.0005,
            },
            seed,
        )
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoothed_frequencies_by_hand() {
        assert_eq!(smoothed_multiclass_frequencies(&[3, 1]), vec![4.0 / 6.0, 2.0 / 6.0]);
        let sum: f64 = smoothed_multiclass_frequencies(&[0, 0, 5]).iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert_eq!(smoothed_label_frequencies(&[2], 3), vec![2.5 / 4.0]);
        assert_eq!(smoothed_label_frequencies(&[0], 3), vec![0.5 / 4.0]);
    }

    #[test]
    fn unified_training_reduces_loss_and_learns() {
        let g = tiny_generated(240, 0.0);
        let mut model = tiny_model(&g, 1);
        let mut log = Vec::new();
        let stats =
            train_unified(&mut model, &g.tree, &g.dataset, &quick_config(6), &mut log).unwrap();
        assert_eq!(stats.len(), 6);
        assert!(
            stats.last().unwrap().loss < stats.first().unwrap().loss,
            "loss {} -> {}",
            stats.first().unwrap().loss,
            stats.last().unwrap().loss
        );
        assert!(stats.last().unwrap().category_accuracy > 0.6);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("epoch"));

        let report = evaluate_unified(&model, &g.tree, &g.dataset, 0.75).unwrap();
        assert!(report.category.recall > 0.6, "{:?}", report.category);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let g = tiny_generated(96, 0.2);
        let run = || {
            let mut model = tiny_model(&g, 5);
            train_unified(
                &mut model,
                &g.tree,
                &g.dataset,
                &quick_config(2),
                &mut std::io::sink(),
            )
            .unwrap();
            let mut bits = Vec::new();
            for id in model.params.ids() {
                bits.extend(model.params.get(id).data().iter().map(|v| v.to_bits()));
            }
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_is_deterministic_and_round_trips() {
        let g = tiny_generated(80, 0.0);
        let model = tiny_model(&g, 3);
        let a = evaluate_unified(&model, &g.tree, &g.dataset, 0.75).unwrap();
        let b = evaluate_unified(&model, &g.tree, &g.dataset, 0.75).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(EvalReport::from_json(&a.to_json()).unwrap(), a);
        assert!(a.consistency.rate >= 0.0 && a.consistency.rate <= 1.0);
        assert!(a.coverage.is_none());
    }

    #[test]
    fn predictions_infer_valid_ancestors_and_respect_the_threshold() {
        let g = tiny_generated(40, 0.0);
        let model = tiny_model(&g, 9);
        let predictions = predict_unified(&model, &g.tree, &g.dataset, 0.75).unwrap();
        assert_eq!(predictions.len(), 40);
        for p in &predictions {
            let (family, gender) = g.tree.category_ancestors(p.category).unwrap();
            assert_eq!((p.family, p.gender), (family, gender));
            for (_, score) in &p.attributes {
                assert!(*score > 0.75);
            }
            assert!(p.category_confidence > 0.0 && p.category_confidence <= 1.0);
            let line = p.render();
            assert_eq!(line.split('\t').count(), 8);
        }
    }

    #[test]
    fn single_record_prediction_matches_the_batch() {
        let g = tiny_generated(70, 0.0);
        let model = tiny_model(&g, 11);
        let batch = predict_unified(&model, &g.tree, &g.dataset, 0.5).unwrap();
        for i in [0usize, 33, 69] {
            let single = Dataset {
                mode: g.dataset.mode,
                records: vec![g.dataset.records[i].clone()],
                hidden_truth: None,
            };
            let one = predict_unified(&model, &g.tree, &single, 0.5).unwrap();
            assert_eq!(one[0], batch[i]);
        }
    }

    #[test]
    fn audit_reports_the_annotation_gap() {
        let g = tiny_generated(600, 0.5);
        let model = tiny_model(&g, 2);
        let audit = audit_unified(&model, &g.tree, &g.dataset, 0.75).unwrap();
        let hidden = audit.hidden.expect("generated data carries hidden truth");
        // Annotations drop half the truth, so their recall sits near 0.5
        // and the annotated mean is well under the hidden mean.
        assert!((hidden.annotation_recall_vs_hidden - 0.5).abs() < 0.08);
        assert!(audit.mean_annotated < hidden.mean_hidden);
        let text = audit.render();
        assert!(text.contains("annotation recall vs hidden"));

        let mut no_hidden = g.dataset.clone();
        no_hidden.hidden_truth = None;
        let bare = audit_unified(&model, &g.tree, &no_hidden, 0.75).unwrap();
        assert!(bare.hidden.is_none());
    }

    #[test]
    fn pipeline_trains_and_oracle_mode_is_category_perfect() {
        let g = tiny_generated(150, 0.0);
        let split = g.dataset.split(0.75, 1).unwrap();
        let mut log = Vec::new();
        let pipeline = train_pipeline(
            &g.tree,
            &split.train,
            16,
            1,
            &quick_config(4),
            &mut log,
        )
        .unwrap();
        assert_eq!(pipeline.sub_coverage(), 1.0);
        assert!(String::from_utf8(log).unwrap().contains("specialist"));

        let oracle = evaluate_pipeline(&pipeline, &g.tree, &split.test, 0.75, true).unwrap();
        assert_eq!(oracle.category.recall, 1.0);
        assert_eq!(oracle.category.precision, 1.0);
        assert_eq!(oracle.coverage, Some(1.0));
        // Oracle routing can never produce an inconsistent (category, sub) pair.
        assert_eq!(oracle.consistency.rate, 0.0);

        let routed = evaluate_pipeline(&pipeline, &g.tree, &split.test, 0.75, false).unwrap();
        assert!(routed.category.recall <= 1.0);
        assert!(routed.attributes.at_k.is_none());
        assert_eq!(
            EvalReport::from_json(&routed.to_json()).unwrap(),
            routed
        );
    }

    #[test]
    fn mismatched_shapes_are_config_errors() {
        let g = tiny_generated(30, 0.0);
        let other = generate(&GeneratorConfig {
            products: 30,
            categories: 2,
            sub_categories: 4,
            attributes: 3,
            mode: InputMode::Feature { dim: 12 },
            ..GeneratorConfig::default()
        })
        .unwrap();
        let mut model = tiny_model(&other, 1);
        let err = train_unified(
            &mut model,
            &g.tree,
            &g.dataset,
            &quick_config(1),
            &mut std::io::sink(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("midway".parse::<AttrWeightMode>().is_err());
    }
}
