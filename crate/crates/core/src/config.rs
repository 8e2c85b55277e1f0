//! Run configuration: one JSON document with `model`, `train`, `data` and
//! `eval` sections, shipped presets, dotted-path overrides and the seed
//! precedence rule.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{MixtureSpec, PartialLabelCounts, SplitCounts};
use crate::eval::ZPolicy;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "UVAE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("unknown preset `{0}` (expected crism, libs or mnist)")]
    Preset(String),
}

fn field_err(field: impl Into<String>, reason: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        reason: reason.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Grid mixtures split by distance from the simplex corners.
    Simplex,
    /// Mixtures clustered around group centres, for leave-p-out runs.
    Grouped,
    /// Handwritten-style digits with labels for a subset of classes.
    Digits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    pub centres: Vec<Vec<f64>>,
    pub concentration: f64,
    pub train_groups: Vec<usize>,
    pub eval_groups: Vec<usize>,
    pub labeled_fraction: f64,
    pub unfeatured: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        let (hi, lo) = (0.5, 0.25);
        let (far, near) = (0.8, 0.1);
        Self {
            centres: vec![
                vec![hi, lo, lo],
                vec![lo, hi, lo],
                vec![lo, lo, hi],
                vec![far, near, near],
                vec![near, far, near],
                vec![near, near, far],
            ],
            concentration: 30.0,
            train_groups: vec![0, 1, 2],
            eval_groups: vec![3, 4, 5],
            labeled_fraction: 0.5,
            unfeatured: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DigitConfig {
    /// Training images.
    pub images: usize,
    /// Held-out images scored by `eval`.
    pub validation: usize,
    pub labeled_digits: Vec<u8>,
    pub counts: PartialLabelCounts,
}

impl Default for DigitConfig {
    fn default() -> Self {
        Self {
            images: 5000,
            validation: 1000,
            labeled_digits: vec![0, 1, 2, 3, 4],
            counts: PartialLabelCounts {
                labeled: 1000,
                unfeatured_per_class: 100,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub seed: u64,
    pub mixture: MixtureSpec,
    pub counts: SplitCounts,
    /// Rows within this corner distance feed the unfeatured set.
    pub corner_radius: f64,
    /// Fraction of rows darkened and marked as outliers.
    pub outlier_fraction: f64,
    /// Attach a prior draw of `z` to every unfeatured composition.
    pub unfeatured_z: bool,
    /// Standardize channels with labeled and unlabeled statistics.
    pub standardize: bool,
    pub groups: GroupConfig,
    pub digits: DigitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Simplex,
            seed: 0,
            mixture: MixtureSpec::default(),
            counts: SplitCounts::default(),
            corner_radius: 0.15,
            outlier_fraction: 0.0,
            unfeatured_z: true,
            standardize: true,
            groups: GroupConfig::default(),
            digits: DigitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub z_policy: ZPolicy,
    /// Columns of generated digit grids.
    pub grid_columns: usize,
    pub pls_components: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            z_policy: ZPolicy::DatasetMean,
            grid_columns: 8,
            pls_components: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Crism,
    Libs,
    Mnist,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        match name {
            "crism" => Ok(Self::Crism),
            "libs" => Ok(Self::Libs),
            "mnist" => Ok(Self::Mnist),
            other => Err(ConfigError::Preset(other.to_owned())),
        }
    }

    pub fn json(self) -> &'static str {
        match self {
            Self::Crism => include_str!("../presets/crism.json"),
            Self::Libs => include_str!("../presets/libs.json"),
            Self::Mnist => include_str!("../presets/mnist.json"),
        }
    }

    pub fn config(self) -> RunConfig {
        RunConfig::from_json(self.json()).expect("shipped presets parse")
    }
}

/// The forward-only ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    M2,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| field_err("<root>", e))?;
        Self::from_value(v)
    }

    /// Deserializes section by section so errors name the offending field.
    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        let Value::Object(mut map) = v else {
            return Err(field_err("<root>", "expected a JSON object"));
        };
        if let Some(k) = map.keys().find(|k| !matches!(k.as_str(), "model" | "train" | "data" | "eval")) {
            return Err(field_err(k.clone(), "unknown section"));
        }
        fn section<T: for<'de> Deserialize<'de> + Default>(map: &mut serde_json::Map<String, Value>, name: &str) -> Result<T, ConfigError> {
            match map.remove(name) {
                None => Ok(T::default()),
                Some(v) => parse_section(name, v),
            }
        }
        let model = parse_section("model", map.remove("model").ok_or_else(|| field_err("model", "section is required"))?)?;
        let cfg = Self {
            model,
            train: section(&mut map, "train")?,
            data: section(&mut map, "data")?,
            eval: section(&mut map, "eval")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| field_err("model", e))?;
        self.train.validate(&self.model).map_err(|e| field_err("train", e))?;
        self.data.mixture.validate().map_err(|e| field_err("data.mixture", e))?;
        if self.data.kind != DataKind::Digits && self.data.mixture.channels != self.model.x_dim {
            return Err(field_err("model.x_dim", format!("must equal data.mixture.channels ({})", self.data.mixture.channels)));
        }
        if self.data.kind != DataKind::Digits && self.data.mixture.endmembers != self.model.y_dim {
            return Err(field_err("model.y_dim", format!("must equal data.mixture.endmembers ({})", self.data.mixture.endmembers)));
        }
        if self.data.kind == DataKind::Digits && (self.model.x_dim != 784 || self.model.y_dim != 10) {
            return Err(field_err("model.x_dim", "digit data needs x_dim 784 and y_dim 10"));
        }
        if !(0.0..1.0).contains(&self.data.outlier_fraction) {
            return Err(field_err("data.outlier_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.data.groups.labeled_fraction) {
            return Err(field_err("data.groups.labeled_fraction", "must lie in [0, 1]"));
        }
        if self.eval.pls_components == 0 {
            return Err(field_err("eval.pls_components", "must be positive"));
        }
        if self.eval.grid_columns == 0 {
            return Err(field_err("eval.grid_columns", "must be positive"));
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::M2 => self.train.objective.coefficients = self.train.objective.coefficients.m2(),
        }
    }

    /// Sets every seed (data, training, evaluation).
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// `(ys, zs)` dimensions a dataset needs for the unfeatured set.
    pub fn unfeatured_z(&self) -> Option<(usize, f64, f64)> {
        self.data.unfeatured_z.then_some((self.model.z_dim, self.model.z_lo, self.model.z_hi))
    }
}

fn parse_section<T: for<'de> Deserialize<'de>>(name: &str, v: Value) -> Result<T, ConfigError> {
    serde_json::from_value(v).map_err(|e| {
        let msg = e.to_string();
        // serde names the field in backticks for unknown and missing fields.
        let field = msg.split('`').nth(1).map(|f| format!("{name}.{f}")).unwrap_or_else(|| name.to_owned());
        field_err(field, msg)
    })
}

/// Applies `path = value` overrides to a config document. Every path must
/// name a field that exists in the fully resolved config.
pub fn apply_overrides(base: &RunConfig, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut doc = base.to_value();
    for (path, raw) in overrides {
        let mut node = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let here = parts[..=i].join(".");
            node = match node {
                Value::Object(map) => map.get_mut(*p).ok_or_else(|| field_err(here.clone(), "unknown config field"))?,
                Value::Array(items) => {
                    let idx: usize = p.parse().map_err(|_| field_err(here.clone(), "expected an array index"))?;
                    items.get_mut(idx).ok_or_else(|| field_err(here.clone(), "index out of range"))?
                }
                _ => return Err(field_err(here, "is not a section")),
            };
        }
        let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        *node = match (&*node, parsed) {
            (Value::Null, v) => v,
            (Value::String(_), _) => Value::String(raw.clone()),
            (Value::Number(_), v @ Value::Number(_)) | (Value::Bool(_), v @ Value::Bool(_)) | (Value::Array(_), v @ Value::Array(_)) | (Value::Object(_), v @ Value::Object(_)) => v,
            (old, _) => return Err(field_err(path.clone(), format!("expected {}, got `{raw}`", kind(old)))),
        };
    }
    RunConfig::from_value(doc)
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Seed after applying the precedence flag > environment > config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>) -> Result<Option<u64>, ConfigError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match env {
        None => Ok(None),
        Some(s) => s.trim().parse().map(Some).map_err(|_| field_err(SEED_ENV, format!("`{s}` is not an unsigned integer"))),
    }
}

/// Every leaf field of the config, as dotted paths, with its description.
pub const FIELD_HELP: &[(&str, &str)] = &[
    ("model.x_dim", "observation channels"),
    ("model.y_dim", "composition classes"),
    ("model.z_dim", "nuisance dimensions"),
    ("model.encoder_y.hidden", "hidden widths of q(y|x)"),
    ("model.encoder_y.activation", "hidden nonlinearity: tanh, softplus, sigmoid or identity"),
    ("model.encoder_y.output", "head nonlinearity of q(y|x)"),
    ("model.encoder_z.hidden", "hidden widths of q(z|x,y)"),
    ("model.encoder_z.activation", "hidden nonlinearity of q(z|x,y)"),
    ("model.encoder_z.output", "head nonlinearity of q(z|x,y)"),
    ("model.decoder_x.hidden", "hidden widths of p(x|y,z)"),
    ("model.decoder_x.activation", "hidden nonlinearity of p(x|y,z)"),
    ("model.decoder_x.output", "head nonlinearity of p(x|y,z)"),
    ("model.aux_z", "optional q(z|y) network (hidden, activation, output) or null"),
    ("model.y_family", "logistic_normal or concrete"),
    ("model.x_family", "diag_gaussian or bernoulli"),
    ("model.temperature", "Concrete relaxation temperature"),
    ("model.z_lo", "lower end of the uniform nuisance prior"),
    ("model.z_hi", "upper end of the uniform nuisance prior"),
    ("model.decoder_log_var", "fixed decoder log-variance, or null to learn it"),
    ("train.batch_size", "items per collection per step"),
    ("train.epochs", "passes over the labeled set"),
    ("train.learning_rate", "Adam step size"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.epsilon", "Adam denominator offset"),
    ("train.clip_lo", "lower gradient clip"),
    ("train.clip_hi", "upper gradient clip"),
    ("train.objective.coefficients.alpha_f", "weight of the forward bounds"),
    ("train.objective.coefficients.alpha_f_d", "weight of the composition loss"),
    ("train.objective.coefficients.alpha_r", "weight of the reverse bounds (0 for the forward-only ablation)"),
    ("train.objective.coefficients.alpha_r_d", "weight of the observation loss"),
    ("train.objective.variant", "unfeatured nuisance source: latent_z, observed_z or aux_z"),
    ("train.objective.gamma", "half-width of the uniform reference density over x"),
    ("train.objective.samples", "Monte Carlo samples per item"),
    ("train.objective.aux_kl_weight", "weight of the auxiliary consistency KL"),
    ("train.objective.aux_kl_samples", "samples for the auxiliary consistency KL"),
    ("train.seed", "training noise and batching seed"),
    ("train.log_every", "steps between metric rows"),
    ("train.checkpoint_every", "epochs between checkpoints, 0 for none"),
    ("train.divergence_ceiling", "abort when |J| stays above this"),
    ("data.kind", "simplex, grouped or digits"),
    ("data.seed", "data generation seed"),
    ("data.mixture.endmembers", "pure components"),
    ("data.mixture.channels", "spectral channels"),
    ("data.mixture.resolution", "simplex grid steps per edge"),
    ("data.mixture.levels", "brightness per acquisition configuration"),
    ("data.mixture.replicates", "draws per composition and configuration"),
    ("data.mixture.noise", "additive noise standard deviation"),
    ("data.mixture.jitter", "abundance jitter towards a Dirichlet(1) draw"),
    ("data.mixture.grain", "log-normal multiplicative grain noise"),
    ("data.mixture.mixing", "linear or nonlinear"),
    ("data.counts.labeled", "labeled pairs"),
    ("data.counts.unlabeled", "unlabeled observations"),
    ("data.counts.unfeatured", "unfeatured compositions"),
    ("data.corner_radius", "corner distance feeding the unfeatured set"),
    ("data.outlier_fraction", "fraction of darkened outlier rows"),
    ("data.unfeatured_z", "attach prior nuisance draws to unfeatured compositions"),
    ("data.standardize", "standardize channels"),
    ("data.groups.centres", "composition centre per group"),
    ("data.groups.concentration", "Dirichlet concentration around each centre"),
    ("data.groups.train_groups", "groups used for training"),
    ("data.groups.eval_groups", "held-out groups"),
    ("data.groups.labeled_fraction", "labeled share of training rows"),
    ("data.groups.unfeatured", "Dirichlet(1) unfeatured compositions"),
    ("data.digits.images", "training images"),
    ("data.digits.validation", "validation images"),
    ("data.digits.labeled_digits", "classes with labels"),
    ("data.digits.counts.labeled", "labeled images"),
    ("data.digits.counts.unfeatured_per_class", "one-hot copies per class"),
    ("eval.seed", "sampling seed for generated grids"),
    ("eval.z_policy", "dataset_mean or prior_mean"),
    ("eval.grid_columns", "columns of generated digit grids"),
    ("eval.pls_components", "PLS latent components"),
];

/// Formatted field reference for `--help`.
pub fn field_reference() -> String {
    let width = FIELD_HELP.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config fields (override any with --<path> <value>):\n");
    for (k, d) in FIELD_HELP {
        out.push_str(&format!("  {k:width$}  {d}\n"));
    }
    out.push_str(&format!("\nSeed precedence: --seed, then {SEED_ENV}, then the config.\n"));
    out
}
