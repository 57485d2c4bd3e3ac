//! Command dispatch behind the `hiercat` binary.
//!
//! Configuration is a flat key=value file; every key maps 1:1 onto a
//! [`RunConfig`] field and any key can be overridden on the command line.
//! Each verb is deterministic given (config, seed): rerunning writes
//! byte-identical artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate, Dataset, GeneratorConfig, InputMode, LabelSpace};
use crate::model::baseline::Pipeline;
use crate::model::{count_parameters, UnifiedModel, UnifiedModelConfig, Variant};
use crate::taxonomy::CategoryTree;
use crate::train::{
    audit_unified, evaluate_pipeline, evaluate_unified, predict_unified, train_pipeline,
    train_unified, AttrWeightMode, Prediction, TrainConfig,
};
use crate::{Error, Result};

/// What `--variant` selects: one of the unified wirings, or the specialist
/// pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Unified(Variant),
    Baseline,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Unified(v) => v.as_str(),
            Arch::Baseline => "baseline",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "baseline" {
            Ok(Arch::Baseline)
        } else {
            Ok(Arch::Unified(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Evaluate,
    Predict,
    Audit,
    Params,
    Stats,
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "generate" => Command::Generate,
            "train" => Command::Train,
            "evaluate" => Command::Evaluate,
            "predict" => Command::Predict,
            "audit" => Command::Audit,
            "params" => Command::Params,
            "stats" => Command::Stats,
            other => {
                return Err(Error::Config(format!(
                    "unknown command {other:?}; expected generate, train, evaluate, predict, \
                     audit, params, or stats"
                )))
            }
        })
    }
}

/// Every run option. Defaults reproduce the stock experiment: the default
/// synthetic dataset and the stock training recipe (batch 32, learning
/// rate 0.001, dropout 0.3, L2 5e-4, threshold 0.75).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tree: PathBuf,
    pub data_dir: PathBuf,
    /// Checkpoint file for unified variants; checkpoint directory for the
    /// baseline pipeline.
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub variant: Arch,
    pub hidden_dim: usize,
    pub conv_stages: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub dropout: f64,
    pub l2_factor: f64,
    pub attr_weight_mode: AttrWeightMode,
    pub augment: bool,
    pub oracle_category: bool,
    pub paper_defaults: bool,
    pub train_fraction: f64,
    // Generator knobs.
    pub products: usize,
    pub categories: usize,
    pub sub_categories: usize,
    pub attributes: usize,
    pub imbalance: f64,
    pub attribute_rate: f64,
    pub max_attributes: usize,
    pub missingness: f64,
    pub noise: f64,
    pub mode: String,
    pub feature_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        RunConfig {
            tree: "data/tree.tsv".into(),
            data_dir: "data".into(),
            checkpoint: "model.ckpt".into(),
            report: "report.json".into(),
            variant: Arch::Unified(Variant::Final),
            hidden_dim: 64,
            conv_stages: 2,
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 10,
            seed: 7,
            threshold: 0.75,
            dropout: 0.3,
            l2_factor: 0.0005,
            attr_weight_mode: AttrWeightMode::Raw,
            augment: true,
            oracle_category: false,
            paper_defaults: false,
            train_fraction: 0.75,
            products: g.products,
            categories: g.categories,
            sub_categories: g.sub_categories,
            attributes: g.attributes,
            imbalance: g.imbalance,
            attribute_rate: g.attribute_rate,
            max_attributes: g.max_attributes,
            missingness: g.missingness,
            noise: g.noise,
            mode: "feature".into(),
            feature_dim: 64,
            image_height: 32,
            image_width: 32,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key} expects true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment. Keys are exactly the field
    /// names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("cannot parse {value:?} for key {key}"))
            })
        }
        match key {
            "tree" => self.tree = value.into(),
            "data_dir" => self.data_dir = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "report" => self.report = value.into(),
            "variant" => self.variant = value.parse()?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "conv_stages" => self.conv_stages = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "l2_factor" => self.l2_factor = num(key, value)?,
            "attr_weight_mode" => self.attr_weight_mode = value.parse()?,
            "augment" => self.augment = parse_bool(key, value)?,
            "oracle_category" => self.oracle_category = parse_bool(key, value)?,
            "paper_defaults" => self.paper_defaults = parse_bool(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "products" => self.products = num(key, value)?,
            "categories" => self.categories = num(key, value)?,
            "sub_categories" => self.sub_categories = num(key, value)?,
            "attributes" => self.attributes = num(key, value)?,
            "imbalance" => self.imbalance = num(key, value)?,
            "attribute_rate" => self.attribute_rate = num(key, value)?,
            "max_attributes" => self.max_attributes = num(key, value)?,
            "missingness" => self.missingness = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "mode" => match value {
                "feature" | "image" => self.mode = value.into(),
                other => {
                    return Err(Error::Config(format!(
                        "mode expects feature or image, got {other:?}"
                    )))
                }
            },
            "feature_dim" => self.feature_dim = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat config file: `key = value` per line, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn input_mode(&self) -> InputMode {
        match self.mode.as_str() {
            "image" => InputMode::Image {
                height: self.image_height,
                width: self.image_width,
            },
            _ => InputMode::Feature {
                dim: self.feature_dim,
            },
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            products: self.products,
            categories: self.categories,
            sub_categories: self.sub_categories,
            attributes: self.attributes,
            imbalance: self.imbalance,
            attribute_rate: self.attribute_rate,
            max_attributes: self.max_attributes,
            missingness: self.missingness,
            noise: self.noise,
            mode: self.input_mode(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            threshold: self.threshold,
            attr_weight_mode: self.attr_weight_mode,
            augment: self.augment,
        }
    }

    /// Model configuration for a dataset already on disk; the dataset's
    /// mode is authoritative, not the generator keys.
    fn unified_config(&self, labels: &LabelSpace, mode: InputMode) -> Result<UnifiedModelConfig> {
        let variant = match self.variant {
            Arch::Unified(v) => v,
            Arch::Baseline => {
                return Err(Error::Config(
                    "the baseline pipeline is not a unified variant".into(),
                ))
            }
        };
        Ok(UnifiedModelConfig {
            input: mode.input_kind(self.conv_stages),
            hidden_dim: self.hidden_dim,
            n_categories: labels.n_categories(),
            n_sub_categories: labels.n_sub_categories(),
            n_attributes: labels.n_attributes(),
            variant,
            dropout: self.dropout,
            l2_factor: self.l2_factor,
        })
    }
}

/// Runs one command, writing human-readable output to `out`. Artifacts go
/// to the paths named in the config.
pub fn run(config: &RunConfig, command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Generate => cmd_generate(config, out),
        Command::Train => cmd_train(config, out),
        Command::Evaluate => cmd_evaluate(config, out),
        Command::Predict => cmd_predict(config, out),
        Command::Audit => cmd_audit(config, out),
        Command::Params => cmd_params(config, out),
        Command::Stats => cmd_stats(config, out),
    }
}

fn load_world(config: &RunConfig) -> Result<(CategoryTree, Dataset)> {
    let tree = CategoryTree::load(&config.tree)?;
    let dataset = Dataset::load(&config.data_dir)?;
    Ok((tree, dataset))
}

fn cmd_generate(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let generated = generate(&config.generator_config())?;
    generated.dataset.save(&config.data_dir)?;
    if let Some(parent) = config.tree.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    generated.tree.save(&config.tree)?;
    let labels = LabelSpace::from_tree(&generated.tree);
    writeln!(
        out,
        "generated {} products over {} categories, {} sub-categories, {} attributes",
        generated.dataset.len(),
        labels.n_categories(),
        labels.n_sub_categories(),
        labels.n_attributes()
    )?;
    writeln!(out, "tree     -> {}", config.tree.display())?;
    writeln!(out, "manifest -> {}", config.data_dir.join("manifest.tsv").display())?;
    Ok(())
}

fn cmd_train(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (tree, dataset) = load_world(config)?;
    let split = dataset.split(config.train_fraction, config.seed)?;
    for warning in &split.warnings {
        writeln!(out, "warning: {warning}")?;
    }
    writeln!(
        out,
        "training {} on {} products ({} held out)",
        config.variant.as_str(),
        split.train.len(),
        split.test.len()
    )?;
    match config.variant {
        Arch::Unified(_) => {
            let labels = LabelSpace::from_tree(&tree);
            let mut model = UnifiedModel::build(
                config.unified_config(&labels, dataset.mode)?,
                config.seed,
            )?;
            train_unified(&mut model, &tree, &split.train, &config.train_config(), out)?;
            model.save(&config.checkpoint)?;
        }
        Arch::Baseline => {
            let pipeline = train_pipeline(
                &tree,
                &split.train,
                config.hidden_dim,
                config.conv_stages,
                &config.train_config(),
                out,
            )?;
            pipeline.save(&config.checkpoint)?;
        }
    }
    writeln!(out, "checkpoint -> {}", config.checkpoint.display())?;
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (tree, dataset) = load_world(config)?;
    let split = dataset.split(config.train_fraction, config.seed)?;
    let report = match config.variant {
        Arch::Unified(_) => {
            let model = UnifiedModel::load(&config.checkpoint)?;
            evaluate_unified(&model, &tree, &split.test, config.threshold)?
        }
        Arch::Baseline => {
            let pipeline = Pipeline::load(&config.checkpoint)?;
            evaluate_pipeline(
                &pipeline,
                &tree,
                &split.test,
                config.threshold,
                config.oracle_category,
            )?
        }
    };
    std::fs::write(&config.report, report.to_json())?;
    writeln!(out, "{}", report.render())?;
    writeln!(out, "report -> {}", config.report.display())?;
    Ok(())
}

fn cmd_predict(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (tree, dataset) = load_world(config)?;
    match config.variant {
        Arch::Unified(_) => {
            let model = UnifiedModel::load(&config.checkpoint)?;
            let predictions = predict_unified(&model, &tree, &dataset, config.threshold)?;
            writeln!(out, "{}", Prediction::RENDER_HEADER)?;
            for p in &predictions {
                writeln!(out, "{}", p.render())?;
            }
        }
        Arch::Baseline => {
            let pipeline = Pipeline::load(&config.checkpoint)?;
            let all: Vec<usize> = (0..dataset.len()).collect();
            let input = dataset.input_tensor(&all);
            let oracle: Option<Vec<u32>> = config
                .oracle_category
                .then(|| dataset.records.iter().map(|r| r.category).collect());
            let predictions = pipeline.predict(&input, oracle.as_deref(), config.threshold)?;
            writeln!(out, "# id\tcategory\tcategory_conf\tsub_category\tsub_conf\tattributes")?;
            for (record, p) in dataset.records.iter().zip(&predictions) {
                let (sub, sub_conf) = match p.sub_category {
                    Some((id, conf)) => (id.to_string(), format!("{conf:.4}")),
                    None => ("-".into(), "-".into()),
                };
                let attrs = match &p.attributes {
                    None => "-".into(),
                    Some(kept) if kept.is_empty() => "-".to_string(),
                    Some(kept) => kept
                        .iter()
                        .map(|(id, s)| format!("{id}:{s:.4}"))
                        .collect::<Vec<_>>()
                        .join(","),
                };
                writeln!(
                    out,
                    "{}\t{}\t{:.4}\t{}\t{}\t{}",
                    record.id, p.category, p.category_confidence, sub, sub_conf, attrs
                )?;
            }
        }
    }
    Ok(())
}

fn cmd_audit(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    if config.variant == Arch::Baseline {
        return Err(Error::Config(
            "audit probes the unified model; pick a unified variant".into(),
        ));
    }
    let (tree, dataset) = load_world(config)?;
    let model = UnifiedModel::load(&config.checkpoint)?;
    let audit = audit_unified(&model, &tree, &dataset, config.threshold)?;
    write!(out, "{}", audit.render())?;
    Ok(())
}

fn cmd_params(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let accounting = if config.paper_defaults {
        let mut model_config = UnifiedModelConfig::paper_defaults();
        if let Arch::Unified(v) = config.variant {
            model_config.variant = v;
        }
        count_parameters(&model_config)
    } else {
        let model_config = UnifiedModelConfig {
            input: config.input_mode().input_kind(config.conv_stages),
            hidden_dim: config.hidden_dim,
            n_categories: config.categories,
            n_sub_categories: config.sub_categories,
            n_attributes: config.attributes,
            variant: match config.variant {
                Arch::Unified(v) => v,
                Arch::Baseline => {
                    return Err(Error::Config(
                        "parameter accounting covers the unified variants".into(),
                    ))
                }
            },
            dropout: config.dropout,
            l2_factor: config.l2_factor,
        };
        count_parameters(&model_config)
    };
    write!(out, "{}", accounting.render(config.paper_defaults))?;
    Ok(())
}

fn cmd_stats(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (tree, dataset) = load_world(config)?;
    write!(out, "{}", dataset.stats(&tree).render())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hiercat-cli-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_config(dir: &Path) -> RunConfig {
        let mut config = RunConfig::default();
        config.tree = dir.join("tree.tsv");
        config.data_dir = dir.join("data");
        config.checkpoint = dir.join("model.ckpt");
        config.report = dir.join("report.json");
        config.products = 120;
        config.categories = 3;
        config.sub_categories = 6;
        config.attributes = 5;
        config.feature_dim = 12;
        config.hidden_dim = 16;
        config.epochs = 2;
        config
    }

    #[test]
    fn config_keys_map_one_to_one() {
        let mut config = RunConfig::default();
        config.set("variant", "no_mp").unwrap();
        assert_eq!(config.variant, Arch::Unified(Variant::NoMp));
        config.set("variant", "baseline").unwrap();
        assert_eq!(config.variant, Arch::Baseline);
        config.set("learning_rate", "0.01").unwrap();
        assert_eq!(config.learning_rate, 0.01);
        config.set("augment", "false").unwrap();
        assert!(!config.augment);
        config.set("mode", "image").unwrap();
        assert_eq!(
            config.input_mode(),
            InputMode::Image {
                height: 32,
                width: 32
            }
        );
        assert!(config.set("mode", "audio").is_err());
        assert!(config.set("nonsense", "1").is_err());
        assert!(config.set("epochs", "three").is_err());
    }

    #[test]
    fn config_file_round_trips_defaults_plus_overrides() {
        let dir = scratch("config");
        let path = dir.join("run.conf");
        std::fs::write(
            &path,
            "# a comment\nproducts = 64\nvariant=backbone_indep\nseed = 11 # trailing\n",
        )
        .unwrap();
        let config = RunConfig::from_file(&path).unwrap();
        assert_eq!(config.products, 64);
        assert_eq!(config.variant, Arch::Unified(Variant::BackboneIndep));
        assert_eq!(config.seed, 11);
        assert_eq!(config.batch_size, RunConfig::default().batch_size);

        std::fs::write(&path, "products\n").unwrap();
        assert!(matches!(
            RunConfig::from_file(&path).unwrap_err(),
            Error::Format(_)
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generate_train_evaluate_predict_audit_stats_all_run() {
        let dir = scratch("verbs");
        let config = small_config(&dir);

        let mut out = Vec::new();
        run(&config, Command::Generate, &mut out).unwrap();
        assert!(config.tree.exists());
        assert!(config.data_dir.join("manifest.tsv").exists());

        let mut out = Vec::new();
        run(&config, Command::Train, &mut out).unwrap();
        let log = String::from_utf8(out).unwrap();
        assert!(log.contains("epoch   1"));
        assert!(config.checkpoint.exists());

        let mut out = Vec::new();
        run(&config, Command::Evaluate, &mut out).unwrap();
        let report_bytes = std::fs::read(&config.report).unwrap();
        let mut out = Vec::new();
        run(&config, Command::Evaluate, &mut out).unwrap();
        assert_eq!(
            report_bytes,
            std::fs::read(&config.report).unwrap(),
            "evaluate must be byte-deterministic"
        );

        let mut out = Vec::new();
        run(&config, Command::Predict, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + config.products);

        let mut out = Vec::new();
        run(&config, Command::Audit, &mut out).unwrap();
        assert!(String::from_utf8(out)
            .unwrap()
            .contains("mean predicted attributes"));

        let mut out = Vec::new();
        run(&config, Command::Stats, &mut out).unwrap();
        let stats = String::from_utf8(out).unwrap();
        assert!(stats.contains("products/category"), "{stats}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn baseline_verbs_run_and_audit_rejects_baseline() {
        let dir = scratch("baseline");
        let mut config = small_config(&dir);
        run(&config, Command::Generate, &mut std::io::sink()).unwrap();
        config.variant = Arch::Baseline;
        config.checkpoint = dir.join("pipeline");

        run(&config, Command::Train, &mut std::io::sink()).unwrap();
        assert!(config.checkpoint.join("pipeline.tsv").exists());

        let mut out = Vec::new();
        run(&config, Command::Evaluate, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().contains("coverage"));

        let mut out = Vec::new();
        run(&config, Command::Predict, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().lines().count() > 1);

        assert!(matches!(
            run(&config, Command::Audit, &mut std::io::sink()),
            Err(Error::Config(_))
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn params_prints_the_paper_totals_under_paper_defaults() {
        let mut config = RunConfig::default();
        config.paper_defaults = true;
        let mut out = Vec::new();
        run(&config, Command::Params, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("23327978") || text.contains("23,327,978"), "{text}");
        assert!(text.contains("46915690") || text.contains("46,915,690"), "{text}");

        config.paper_defaults = false;
        let mut out = Vec::new();
        run(&config, Command::Params, &mut out).unwrap();
        assert!(!String::from_utf8(out).unwrap().is_empty());
    }

    #[test]
    fn unknown_variant_and_command_are_rejected() {
        assert!("finalish".parse::<Arch>().is_err());
        assert!("explode".parse::<Command>().is_err());
        assert_eq!("baseline".parse::<Arch>().unwrap(), Arch::Baseline);
        assert_eq!(Arch::Baseline.as_str(), "baseline");
        assert_eq!(Arch::Unified(Variant::NoMp).as_str(), "no_mp");
    }
}
