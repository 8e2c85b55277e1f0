//! Command-line driver: dataset generation, training, evaluation, unmixing,
//! the PLS baseline, digit archive preparation and grouped leave-p-out runs.
//!
//! Every command writes into an output directory and finishes with a
//! `manifest.json` listing each produced file with its SHA-256 digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::baseline::{pls_fit, pls_predict, project_to_simplex};
use crate::config::{apply_overrides, field_reference, resolve_seed, Ablation, ConfigError, DataKind, Preset, RunConfig, SEED_ENV};
use crate::data::{
    generate_grouped_mixtures, generate_synthetic_mixtures, inject_outliers, make_group_split, make_partial_label_split, make_simplex_split, read_idx, render_digits, standardize, Dataset, DatasetMeta,
    SampleTable,
};
use crate::diffcore::{ParamSet, Tensor};
use crate::eval::{composition_kl, digit_grid, endmember_error, grouped_leave_p_out, nuisance_analysis, per_item_kl, policy_z, LpoConfig, MetricReport, Predictor};
use crate::model::{GenerateMode, Model, ModelConfig, XFamily};
use crate::trainer::{run_training, write_metrics_csv};

const SECTIONS: [&str; 4] = ["model", "train", "data", "eval"];

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config: exit 2.
    Usage(String),
    /// Failure while running: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "uvae", version, about = "Semi-supervised VAE trained in forward and reverse directions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON run config with model, train, data and eval sections.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped config: crism, libs or mnist.
    #[arg(long)]
    preset: Option<String>,
    /// Seed for data, training and evaluation; beats the environment and the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    /// Forward-only model: reverse bounds switched off.
    M2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Vae,
    Pls,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Score a trained run on the held-out rows: metrics, nuisance report, digit grids.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Endmember extraction error of a trained run.
    Unmix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and score partial least squares.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a partial-label dataset from IDX image and label archives.
    MnistPrep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grouped leave-p-out: train on some groups, score the held-out ones.
    Lpo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vae")]
        method: Method,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
}

/// Splits `--section.path value` (or `--section.path=value`) overrides off
/// the argument list.
fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let dotted = a.strip_prefix("--").filter(|n| n.split_once('.').is_some_and(|(s, _)| SECTIONS.contains(&s)));
        match dotted {
            Some(name) => {
                if let Some((k, v)) = name.split_once('=') {
                    overrides.push((k.to_owned(), v.to_owned()));
                } else {
                    let v = args.get(i + 1).ok_or_else(|| CliError::Usage(format!("missing value for --{name}")))?;
                    overrides.push((name.to_owned(), v.clone()));
                    i += 1;
                }
            }
            None => rest.push(a.clone()),
        }
        i += 1;
    }
    Ok((rest, overrides))
}

fn command() -> clap::Command {
    let refs = field_reference();
    Cli::command().after_long_help(refs.clone()).mut_subcommands(|s| s.after_long_help(refs.clone()))
}

/// Runs one invocation and returns the process exit code.
pub fn run_cli<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let argv: Vec<String> = argv.into_iter().collect();
    let env_seed = std::env::var(SEED_ENV).ok();
    match run(&argv, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn run(argv: &[String], env_seed: Option<&str>) -> Result<(), CliError> {
    let (args, overrides) = split_overrides(argv)?;
    let matches = match command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(CliError::Usage("invalid arguments".into())) };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let started = unix_now();
    let (name, cfg_args) = match &cli.cmd {
        Cmd::Synth { cfg, .. } => ("synth", cfg),
        Cmd::Train { cfg, .. } => ("train", cfg),
        Cmd::Eval { cfg, .. } => ("eval", cfg),
        Cmd::Unmix { cfg, .. } => ("unmix", cfg),
        Cmd::Baseline { cfg, .. } => ("baseline", cfg),
        Cmd::MnistPrep { cfg, .. } => ("mnist-prep", cfg),
        Cmd::Lpo { cfg, .. } => ("lpo", cfg),
    };
    let mut config = load_config(cfg_args, &overrides, env_seed)?;
    let ablation = match &cli.cmd {
        Cmd::Train { ablation, .. } | Cmd::Lpo { ablation, .. } => *ablation,
        _ => None,
    };
    if let Some(AblationArg::M2) = ablation {
        config.apply_ablation(Ablation::M2);
    }
    let mut inputs = BTreeMap::new();
    let out = match &cli.cmd {
        Cmd::Synth { out, .. } => {
            synth(&config, out)?;
            out
        }
        Cmd::Train { data, out, .. } => {
            inputs.insert("data".into(), data.display().to_string());
            train(&config, data, out)?;
            out
        }
        Cmd::Eval { data, run, out, .. } => {
            inputs.insert("data".into(), data.display().to_string());
            inputs.insert("run".into(), run.display().to_string());
            evaluate(&config, data, run, out)?;
            out
        }
        Cmd::Unmix { data, run, out, .. } => {
            inputs.insert("data".into(), data.display().to_string());
            inputs.insert("run".into(), run.display().to_string());
            unmix(&config, data, run, out)?;
            out
        }
        Cmd::Baseline { data, out, .. } => {
            inputs.insert("data".into(), data.display().to_string());
            baseline(&config, data, out)?;
            out
        }
        Cmd::MnistPrep { images, labels, out, .. } => {
            inputs.insert("images".into(), images.display().to_string());
            inputs.insert("labels".into(), labels.display().to_string());
            mnist_prep(&config, images, labels, out)?;
            out
        }
        Cmd::Lpo { out, method, .. } => {
            lpo(&config, *method, out)?;
            out
        }
    };
    write_json(&out.join("config.json"), &config.to_value())?;
    let manifest = RunManifest {
        command: name.to_owned(),
        args: argv.to_vec(),
        config_path: cfg_args.config.as_ref().map(|p| p.display().to_string()),
        preset: cfg_args.preset.clone(),
        config: config.to_value(),
        seed: config.train.seed,
        inputs,
        outputs: digest_dir(out).map_err(runtime)?,
        started_unix: started,
        finished_unix: unix_now(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn load_config(a: &ConfigArgs, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let base = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            RunConfig::from_json(&text)?
        }
        (None, Some(name)) => Preset::parse(name)?.config(),
        (None, None) => return Err(CliError::Usage("one of --config or --preset is required".into())),
    };
    let mut cfg = apply_overrides(&base, overrides)?;
    if let Some(seed) = resolve_seed(a.seed, env_seed)? {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// What a command did and what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub preset: Option<String>,
    /// Fully resolved config; rerunning with it reproduces the outputs.
    pub config: Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digests of every file under `dir` except the manifest, in path order.
pub fn digest_dir(dir: &Path) -> std::io::Result<Vec<Artifact>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<Artifact>) -> std::io::Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let bytes = fs::read(&p)?;
                out.push(Artifact {
                    path: p.strip_prefix(root).unwrap_or(&p).display().to_string(),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(runtime)? + "\n";
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Held-out rows with their truth, stored next to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    /// Raw (unstandardized) observations.
    pub x: Tensor,
    pub y: Tensor,
    pub config: Vec<usize>,
    pub group: Vec<usize>,
    pub outlier: Vec<bool>,
    pub row: Vec<usize>,
}

impl Holdout {
    fn from_table(table: &SampleTable, rows: Vec<usize>) -> Self {
        Self {
            x: table.x.select_rows(&rows),
            y: table.abundances.select_rows(&rows),
            config: rows.iter().map(|r| table.config[*r]).collect(),
            group: rows.iter().map(|r| table.group[*r]).collect(),
            outlier: rows.iter().map(|r| table.outlier[*r]).collect(),
            row: rows,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(runtime)?;
        let mut header: Vec<String> = (0..self.x.cols()).map(|j| format!("x{j}")).collect();
        header.extend((0..self.y.cols()).map(|j| format!("y{j}")));
        header.extend(["config", "group", "outlier", "row"].map(String::from));
        w.write_record(&header).map_err(runtime)?;
        for i in 0..self.row.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().chain(self.y.row(i)).map(|v| format!("{v}")).collect();
            rec.extend([self.config[i].to_string(), self.group[i].to_string(), u8::from(self.outlier[i]).to_string(), self.row[i].to_string()]);
            w.write_record(&rec).map_err(runtime)?;
        }
        w.flush().map_err(runtime)
    }

    pub fn load(path: &Path, x_dim: usize, y_dim: usize) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let (mut xs, mut ys, mut config, mut group, mut outlier, mut row) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(runtime)?;
            if rec.len() != x_dim + y_dim + 4 {
                return Err(runtime(format!("{}: expected {} columns, found {}", path.display(), x_dim + y_dim + 4, rec.len())));
            }
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| runtime(format!("{}: {e}", path.display())));
            for j in 0..x_dim {
                xs.push(num(j)?);
            }
            for j in 0..y_dim {
                ys.push(num(x_dim + j)?);
            }
            let int = |i: usize| rec[i].parse::<usize>().map_err(|e| runtime(format!("{}: {e}", path.display())));
            config.push(int(x_dim + y_dim)?);
            group.push(int(x_dim + y_dim + 1)?);
            outlier.push(int(x_dim + y_dim + 2)? == 1);
            row.push(int(x_dim + y_dim + 3)?);
        }
        let n = row.len();
        Ok(Self {
            x: Tensor::matrix(n, x_dim, xs),
            y: Tensor::matrix(n, y_dim, ys),
            config,
            group,
            outlier,
            row,
        })
    }
}

fn write_matrix_csv(path: &Path, prefix: &str, m: &Tensor) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    w.write_record((0..m.cols()).map(|j| format!("{prefix}{j}"))).map_err(runtime)?;
    for r in m.row_iter() {
        w.write_record(r.iter().map(|v| format!("{v}"))).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn read_matrix_csv(path: &Path) -> Result<Tensor, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let cols = r.headers().map_err(runtime)?.len();
    let mut data = Vec::new();
    for rec in r.records() {
        for v in rec.map_err(runtime)?.iter() {
            data.push(v.parse::<f64>().map_err(|e| runtime(format!("{}: {e}", path.display())))?);
        }
    }
    Ok(Tensor::matrix(data.len() / cols.max(1), cols, data))
}

fn one_hots(labels: &[u8], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, l) in labels.iter().enumerate() {
        data[i * classes + *l as usize] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

fn finish_dataset(cfg: &RunConfig, ds: Dataset) -> Result<Dataset, CliError> {
    if cfg.data.standardize {
        standardize(&ds).map_err(runtime)
    } else {
        Ok(ds)
    }
}

fn save_dataset(cfg: &RunConfig, ds: &Dataset, holdout: &Holdout, out: &Path) -> Result<(), CliError> {
    ds.save(out, cfg.data.seed, serde_json::to_value(&cfg.data).map_err(runtime)?).map_err(runtime)?;
    holdout.save(&out.join("holdout.csv"))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(runtime)?;
    let d = &cfg.data;
    match d.kind {
        DataKind::Simplex | DataKind::Grouped => {
            let mut table = if d.kind == DataKind::Simplex {
                generate_synthetic_mixtures(&d.mixture, d.seed)
            } else {
                generate_grouped_mixtures(&d.mixture, &d.groups.centres, d.groups.concentration, d.seed)
            }
            .map_err(|e| CliError::Usage(e.to_string()))?;
            if d.outlier_fraction > 0.0 {
                inject_outliers(&mut table, d.outlier_fraction, d.seed);
            }
            let (ds, rows) = if d.kind == DataKind::Simplex {
                let ds = make_simplex_split(&table, d.corner_radius, d.counts, cfg.unfeatured_z(), d.seed).map_err(|e| CliError::Usage(e.to_string()))?;
                let rows = (0..table.len()).filter(|r| !ds.labeled_rows.contains(r)).collect();
                (ds, rows)
            } else {
                let g = &d.groups;
                let ds = make_group_split(&table, &g.train_groups, g.labeled_fraction, g.unfeatured, cfg.unfeatured_z(), d.seed).map_err(|e| CliError::Usage(e.to_string()))?;
                let rows = (0..table.len()).filter(|r| g.eval_groups.contains(&table.group[*r])).collect();
                (ds, rows)
            };
            let ds = finish_dataset(cfg, ds)?;
            save_dataset(cfg, &ds, &Holdout::from_table(&table, rows), out)?;
            let level = d.mixture.levels.iter().sum::<f64>() / d.mixture.levels.len() as f64;
            write_matrix_csv(&out.join("endmembers.csv"), "x", &table.signatures.map(|v| v * level))?;
        }
        DataKind::Digits => {
            let g = &d.digits;
            let train = render_digits(g.images, d.seed);
            let val = render_digits(g.validation, d.seed ^ 0x7661_6c69);
            digits_dataset(cfg, &train.to_tensor(), &train.labels, &val.to_tensor(), &val.labels, out)?;
        }
    }
    info!("dataset written to {}", out.display());
    Ok(())
}

fn digits_dataset(cfg: &RunConfig, x: &Tensor, labels: &[u8], vx: &Tensor, vlabels: &[u8], out: &Path) -> Result<(), CliError> {
    let g = &cfg.data.digits;
    let ds = make_partial_label_split(x, labels, &g.labeled_digits, g.counts, cfg.unfeatured_z(), cfg.data.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = finish_dataset(cfg, ds)?;
    let holdout = Holdout {
        x: vx.clone(),
        y: one_hots(vlabels, 10),
        config: vec![0; vlabels.len()],
        group: vlabels.iter().map(|l| *l as usize).collect(),
        outlier: vec![false; vlabels.len()],
        row: (0..vlabels.len()).collect(),
    };
    save_dataset(cfg, &ds, &holdout, out)
}

fn mnist_prep(cfg: &RunConfig, images: &Path, labels: &Path, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(runtime)?;
    let img = read_idx(images).map_err(runtime)?;
    let lab = read_idx(labels).map_err(runtime)?;
    if img.dims.len() != 3 || img.dims[1] * img.dims[2] != 784 {
        return Err(runtime(format!("{}: expected n × 28 × 28 images, found {:?}", images.display(), img.dims)));
    }
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(runtime(format!("{}: expected {} labels, found {:?}", labels.display(), img.dims[0], lab.dims)));
    }
    if let Some(bad) = lab.data.iter().find(|l| **l > 9) {
        return Err(runtime(format!("{}: label {bad} is not a digit", labels.display())));
    }
    let g = &cfg.data.digits;
    let n = img.dims[0];
    if g.images + g.validation > n {
        return Err(CliError::Usage(format!(
            "invalid config field `data.digits.images`: {} training plus {} validation images exceed the {n} in the archive",
            g.images, g.validation
        )));
    }
    let pix = |a: usize, b: usize| Tensor::matrix(b - a, 784, img.data[a * 784..b * 784].iter().map(|p| *p as f64 / 255.0).collect());
    let (tr, va) = (g.images, g.images + g.validation);
    digits_dataset(cfg, &pix(0, tr), &lab.data[..tr], &pix(tr, va), &lab.data[tr..va], out)
}

fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<(Dataset, DatasetMeta), CliError> {
    let (ds, meta) = Dataset::load(dir).map_err(runtime)?;
    let m = &cfg.model;
    for (field, want, got) in [("model.x_dim", m.x_dim, meta.x_dim), ("model.y_dim", m.y_dim, meta.y_dim)] {
        if want != got {
            return Err(CliError::Usage(format!("invalid config field `{field}`: config says {want}, dataset has {got}")));
        }
    }
    if meta.z_dim > 0 && meta.z_dim != m.z_dim {
        return Err(CliError::Usage(format!("invalid config field `model.z_dim`: config says {}, dataset has {}", m.z_dim, meta.z_dim)));
    }
    Ok((ds, meta))
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let (ds, _) = load_dataset(cfg, data)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let model = Model::init(cfg.model.clone(), cfg.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = run_training(&model, &ds, &cfg.train, Some(out)).map_err(runtime)?;
    outcome.model.save(out).map_err(runtime)?;
    let mut csv = Vec::new();
    write_metrics_csv(&outcome.log, &mut csv).map_err(runtime)?;
    fs::write(out.join("metrics.csv"), csv).map_err(runtime)?;
    info!("trained {} steps; outputs in {}", outcome.optimizer.step, out.display());
    Ok(())
}

/// Loads `model.json` and `checkpoint.bin` from a run directory.
pub fn load_run(run: &Path) -> Result<Model, CliError> {
    let path = run.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let params = ParamSet::load(run.join("checkpoint.bin")).map_err(runtime)?;
    Model::from_parts(config, params).map_err(runtime)
}

/// The nuisance used for generation, from the labeled pairs.
fn generation_z(cfg: &RunConfig, model: &Model, ds: &Dataset) -> Result<Tensor, CliError> {
    policy_z(model, &cfg.eval.z_policy, &ds.labeled_x, Some(&ds.labeled_y)).map_err(runtime)
}

fn evaluate(cfg: &RunConfig, data: &Path, run: &Path, out: &Path) -> Result<(), CliError> {
    let (ds, meta) = load_dataset(cfg, data)?;
    let model = load_run(run)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let hold = Holdout::load(&data.join("holdout.csv"), meta.x_dim, meta.y_dim)?;
    let x = meta.standardization.apply(&hold.x);
    let pred = model.predict_y(&x).map_err(runtime)?;
    let kls = per_item_kl(&pred, &hold.y).map_err(runtime)?;
    let mut report = MetricReport::new(cfg.to_value(), cfg.eval.seed);
    report.metrics.insert("composition_kl".into(), composition_kl(&pred, &hold.y).map_err(runtime)?);
    report.metrics.insert("items".into(), kls.len() as f64);
    for i in 0..kls.len() {
        let mut item = BTreeMap::new();
        item.insert("row".into(), hold.row[i] as f64);
        item.insert("group".into(), hold.group[i] as f64);
        item.insert("kl".into(), kls[i]);
        report.per_item.push(item);
    }
    let configs = hold.config.iter().collect::<std::collections::BTreeSet<_>>().len();
    if configs > 1 || hold.outlier.iter().any(|o| *o) {
        let r = nuisance_analysis(&model, &x, &hold.config).map_err(runtime)?;
        for (c, (m, d)) in r.medians.iter().zip(&r.mads).enumerate() {
            report.metrics.insert(format!("nuisance_median_{c}"), *m);
            report.metrics.insert(format!("nuisance_mad_{c}"), *d);
        }
        let planted = hold.outlier.iter().filter(|o| **o).count();
        let hits = r.outlier.iter().zip(&hold.outlier).filter(|(f, p)| **f && **p).count();
        let false_pos = r.outlier.iter().zip(&hold.outlier).filter(|(f, p)| **f && !**p).count();
        report.metrics.insert("outliers_flagged".into(), r.outlier.iter().filter(|o| **o).count() as f64);
        if planted > 0 {
            report.metrics.insert("outlier_recall".into(), hits as f64 / planted as f64);
        }
        if planted < hold.row.len() {
            report.metrics.insert("outlier_false_positive_rate".into(), false_pos as f64 / (hold.row.len() - planted) as f64);
        }
        let mut w = csv::Writer::from_path(out.join("nuisance.csv")).map_err(runtime)?;
        w.write_record(["row", "config", "z", "flagged", "planted", "pc1", "pc2", "pc3"]).map_err(runtime)?;
        for i in 0..r.z.len() {
            let p = r.pca[i];
            w.write_record([
                hold.row[i].to_string(),
                hold.config[i].to_string(),
                format!("{}", r.z[i]),
                u8::from(r.outlier[i]).to_string(),
                u8::from(hold.outlier[i]).to_string(),
                format!("{}", p[0]),
                format!("{}", p[1]),
                format!("{}", p[2]),
            ])
            .map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    let side = (model.config.x_dim as f64).sqrt().round() as usize;
    if model.config.x_family == XFamily::Bernoulli && side * side == model.config.x_dim {
        let z = generation_z(cfg, &model, &ds)?;
        for (mode, name) in [(GenerateMode::Mean, "grid_mean.pgm"), (GenerateMode::Sample, "grid_sample.pgm")] {
            digit_grid(&model, &z, mode, cfg.eval.grid_columns, side, cfg.eval.seed)
                .map_err(runtime)?
                .write_pgm(&out.join(name))
                .map_err(runtime)?;
        }
    }
    fs::write(out.join("metrics.json"), report.to_json().map_err(runtime)?).map_err(runtime)?;
    Ok(())
}

fn unmix(cfg: &RunConfig, data: &Path, run: &Path, out: &Path) -> Result<(), CliError> {
    let (ds, meta) = load_dataset(cfg, data)?;
    let model = load_run(run)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let truth = read_matrix_csv(&data.join("endmembers.csv"))?;
    let z = generation_z(cfg, &model, &ds)?;
    let r = endmember_error(&model, &truth, &meta.standardization, &z).map_err(runtime)?;
    write_matrix_csv(&out.join("generated_endmembers.csv"), "x", &Tensor::from_rows(&r.generated).map_err(runtime)?)?;
    let mut report = MetricReport::new(cfg.to_value(), cfg.eval.seed);
    report.metrics.insert("endmember_error".into(), r.mean);
    for (k, e) in r.per_endmember.iter().enumerate() {
        report.metrics.insert(format!("endmember_error_{k}"), *e);
    }
    for (j, v) in z.data().iter().enumerate() {
        report.metrics.insert(format!("z{j}"), *v);
    }
    fs::write(out.join("unmix.json"), report.to_json().map_err(runtime)?).map_err(runtime)
}

fn baseline(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let (ds, meta) = load_dataset(cfg, data)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let k = cfg.eval.pls_components;
    let pls = pls_fit(&ds.labeled_x, &ds.labeled_y, k).map_err(|e| CliError::Usage(format!("invalid config field `eval.pls_components`: {e}")))?;
    let hold = Holdout::load(&data.join("holdout.csv"), meta.x_dim, meta.y_dim)?;
    let pred = project_to_simplex(&pls_predict(&pls, &meta.standardization.apply(&hold.x)).map_err(runtime)?);
    let fitted = pls_predict(&pls, &ds.labeled_x).map_err(runtime)?;
    let train_err = fitted.data().iter().zip(ds.labeled_y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tt = pls.scores.tr_mul(&pls.scores);
    let ortho = (0..k).flat_map(|a| (0..k).filter(move |b| *b != a).map(move |b| (a, b))).map(|(a, b)| tt[(a, b)].abs()).fold(0.0, f64::max);
    let mut report = MetricReport::new(cfg.to_value(), cfg.eval.seed);
    report.metrics.insert("composition_kl".into(), composition_kl(&pred, &hold.y).map_err(runtime)?);
    report.metrics.insert("train_max_abs_error".into(), train_err);
    report.metrics.insert("score_orthogonality".into(), ortho);
    report.metrics.insert("components".into(), k as f64);
    fs::write(out.join("metrics.json"), report.to_json().map_err(runtime)?).map_err(runtime)?;
    let coef = Tensor::matrix(pls.coefficients.nrows(), pls.coefficients.ncols(), (0..pls.coefficients.nrows()).flat_map(|r| pls.coefficients.row(r).iter().cloned().collect::<Vec<_>>()).collect());
    write_matrix_csv(&out.join("pls_coefficients.csv"), "y", &coef)
}

fn lpo(cfg: &RunConfig, method: Method, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(runtime)?;
    let d = &cfg.data;
    let g = &d.groups;
    let table = generate_grouped_mixtures(&d.mixture, &g.centres, g.concentration, d.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let lpo = LpoConfig {
        train_groups: g.train_groups.clone(),
        eval_groups: g.eval_groups.clone(),
        labeled_fraction: g.labeled_fraction,
        unfeatured: g.unfeatured,
        seed: d.seed,
    };
    let report = grouped_leave_p_out(&table, &lpo, cfg.unfeatured_z(), &mut |ds: &Dataset| match method {
        Method::Pls => {
            let pls = pls_fit(&ds.labeled_x, &ds.labeled_y, cfg.eval.pls_components)?;
            Ok(Box::new(move |x: &Tensor| Ok(project_to_simplex(&pls_predict(&pls, x)?))) as Predictor)
        }
        Method::Vae => {
            let ds = if d.standardize { standardize(ds)? } else { ds.clone() };
            let m0 = Model::init(cfg.model.clone(), cfg.train.seed)?;
            let m = run_training(&m0, &ds, &cfg.train, None).map_err(|e| crate::eval::EvalError::Runner(e.to_string()))?.model;
            let st = ds.standardization.clone();
            Ok(Box::new(move |x: &Tensor| Ok(m.predict_y(&st.apply(x))?)) as Predictor)
        }
    })
    .map_err(runtime)?;
    let mut report = report;
    report.config = json!({ "run": cfg.to_value(), "lpo": serde_json::to_value(&lpo).map_err(runtime)?, "method": format!("{method:?}").to_lowercase() });
    fs::write(out.join("report.json"), report.to_json().map_err(runtime)?).map_err(runtime)
}
