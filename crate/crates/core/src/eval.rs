//! Post-training evaluation: composition KL, endmember extraction error,
//! digit grids, nuisance analysis and the grouped leave-p-out protocol.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::PlsError;
use crate::data::{make_group_split, DataError, Dataset, SampleTable, Standardization};
use crate::diffcore::Tensor;
use crate::distributions::{kl_categorical, DistError, NoiseDraw, NoiseKind, NoiseStream};
use crate::model::{GenerateMode, Model, ModelError};

/// Outlier threshold in median absolute deviations.
pub const OUTLIER_MADS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("train and eval groups overlap: {0:?}")]
    Overlap(Vec<usize>),
    #[error("audit failed: eval row {0} was used for training")]
    Leak(usize),
    #[error("metric `{0}` is not finite")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runner(String),
}

/// Mean over items of `KL(truth ‖ pred)`.
pub fn composition_kl(pred: &Tensor, truth: &Tensor) -> Result<f64, EvalError> {
    Ok(per_item_kl(pred, truth)?.iter().sum::<f64>() / pred.rows().max(1) as f64)
}

pub fn per_item_kl(pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>, EvalError> {
    let (p, t) = (pred.as_matrix(), truth.as_matrix());
    if p.shape() != t.shape() {
        return Err(EvalError::Shape(format!("predictions {:?} vs truth {:?}", p.shape(), t.shape())));
    }
    if p.is_empty() {
        return Ok(Vec::new());
    }
    p.row_iter().zip(t.row_iter()).map(|(q, p)| Ok(kl_categorical(p, q)?)).collect()
}

/// Where the nuisance is held when generating from the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPolicy {
    /// Midpoint of the prior support.
    PriorMean,
    /// Mean of the inferred nuisance over a set of observations.
    DatasetMean,
}

/// Deterministic nuisance per row: `z` at the mean of `q(z|x,y)`, clamped
/// into the support, with `y` given or else at the mean of `q(y|x)`.
pub fn nuisance_means(model: &Model, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor, EvalError> {
    let ybar = match y {
        Some(y) => y.clone(),
        None => model.predict_y(x)?,
    };
    let zero = NoiseDraw::fixed(NoiseKind::StandardNormal, Tensor::zeros(&[x.rows(), model.config.z_dim]));
    Ok(model.infer_nuisance(x, Some(&ybar), None, &zero)?)
}

/// The `1 × z_dim` nuisance value a policy selects. [`ZPolicy::DatasetMean`]
/// averages over the rows of `x`, paired with `y` when labels are known.
pub fn policy_z(model: &Model, policy: &ZPolicy, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor, EvalError> {
    let d = model.config.z_dim;
    match policy {
        ZPolicy::PriorMean => Ok(Tensor::full(&[1, d], model.config.z_prior_mean())),
        ZPolicy::DatasetMean => {
            let z = nuisance_means(model, x, y)?;
            let n = z.rows() as f64;
            let mean = (0..d).map(|j| z.row_iter().map(|r| r[j]).sum::<f64>() / n).collect();
            Ok(Tensor::matrix(1, d, mean))
        }
    }
}

fn one_hot(k: usize, n: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    Tensor::matrix(1, n, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndmemberReport {
    pub per_endmember: Vec<f64>,
    pub mean: f64,
    /// Generated endmembers in original units, one row per class.
    pub generated: Vec<Vec<f64>>,
}

/// `‖x̄_k − s_k‖₂` for each corner `e_k`, where `x̄_k` is the decoder mean at
/// `(e_k, z)` mapped back to original units.
pub fn endmember_error(model: &Model, truth: &Tensor, standardization: &Standardization, z: &Tensor) -> Result<EndmemberReport, EvalError> {
    let k = model.config.y_dim;
    if truth.rows() != k || truth.cols() != model.config.x_dim {
        return Err(EvalError::Shape(format!("truth {:?} vs {k} endmembers of {} channels", truth.shape(), model.config.x_dim)));
    }
    let mut per = Vec::with_capacity(k);
    let mut generated = Vec::with_capacity(k);
    for e in 0..k {
        let xbar = model.generate_conditional(&one_hot(e, k), z, GenerateMode::Mean, None)?;
        let raw = standardization.invert(&xbar);
        let err = raw.data().iter().zip(truth.row(e)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        per.push(err);
        generated.push(raw.data().to_vec());
    }
    let mean = per.iter().sum::<f64>() / k as f64;
    Ok(EndmemberReport { per_endmember: per, mean, generated })
}

/// An 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), EvalError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Ten rows (one per class one-hot) of `columns` generated `side × side`
/// images at nuisance `z`. Mean mode repeats the decoder mean across a row;
/// sample mode draws each cell independently from a stream seeded by `seed`.
pub fn digit_grid(model: &Model, z: &Tensor, mode: GenerateMode, columns: usize, side: usize, seed: u64) -> Result<GrayImage, EvalError> {
    let classes = model.config.y_dim;
    if side * side != model.config.x_dim {
        return Err(EvalError::Shape(format!("{} pixels do not form a {side}×{side} image", model.config.x_dim)));
    }
    let (w, h) = (columns * side, classes * side);
    let mut pixels = vec![0u8; w * h];
    let mut stream = NoiseStream::new(seed, 0);
    let noise_kind = match model.config.x_family {
        crate::model::XFamily::Bernoulli => NoiseKind::Uniform,
        crate::model::XFamily::DiagGaussian => NoiseKind::StandardNormal,
    };
    for k in 0..classes {
        let y = one_hot(k, classes);
        for c in 0..columns {
            let img = match mode {
                GenerateMode::Mean => model.generate_conditional(&y, z, mode, None)?,
                GenerateMode::Sample => {
                    let noise = stream.draw(noise_kind, 1, model.config.x_dim);
                    model.generate_conditional(&y, z, mode, Some(&noise))?
                }
            };
            for r in 0..side {
                for col in 0..side {
                    let v = img.data()[r * side + col].clamp(0.0, 1.0);
                    pixels[(k * side + r) * w + c * side + col] = (255.0 * v).round() as u8;
                }
            }
        }
    }
    Ok(GrayImage { width: w, height: h, pixels })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceReport {
    /// First nuisance coordinate per item.
    pub z: Vec<f64>,
    pub config: Vec<usize>,
    /// Per configuration, in id order.
    pub medians: Vec<f64>,
    pub mads: Vec<f64>,
    /// More than five MADs from the item's configuration median.
    pub outlier: Vec<bool>,
    /// Projection of `x` on its first three principal components.
    pub pca: Vec<[f64; 3]>,
    pub explained_variance: [f64; 3],
}

/// Infers the nuisance of every row, summarizes it per configuration and
/// flags outliers.
pub fn nuisance_analysis(model: &Model, x: &Tensor, config: &[usize]) -> Result<NuisanceReport, EvalError> {
    if x.rows() != config.len() {
        return Err(EvalError::Shape(format!("{} rows vs {} configuration ids", x.rows(), config.len())));
    }
    let zt = nuisance_means(model, x, None)?;
    let z: Vec<f64> = zt.row_iter().map(|r| r[0]).collect();
    let groups = config.iter().max().map_or(0, |m| m + 1);
    let mut medians = vec![f64::NAN; groups];
    let mut mads = vec![f64::NAN; groups];
    for c in 0..groups {
        let mut vals: Vec<f64> = z.iter().zip(config).filter(|(_, g)| **g == c).map(|(v, _)| *v).collect();
        if vals.is_empty() {
            continue;
        }
        let m = median(&mut vals);
        let mut dev: Vec<f64> = vals.iter().map(|v| (v - m).abs()).collect();
        medians[c] = m;
        mads[c] = median(&mut dev);
    }
    let outlier = z.iter().zip(config).map(|(v, c)| (v - medians[*c]).abs() > OUTLIER_MADS * mads[*c]).collect();
    let (pca, explained_variance) = principal_components(x);
    Ok(NuisanceReport {
        z,
        config: config.to_vec(),
        medians,
        mads,
        outlier,
        pca,
        explained_variance,
    })
}

/// Projections on the top three eigenvectors of the sample covariance,
/// each oriented so its largest-magnitude loading is positive.
pub fn principal_components(x: &Tensor) -> (Vec<[f64; 3]>, [f64; 3]) {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = c.tr_mul(&c) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut proj = vec![[0.0; 3]; n];
    let mut var = [0.0; 3];
    for (slot, &k) in order.iter().take(3).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v = -v;
        }
        let p = &c * v;
        for i in 0..n {
            proj[i][slot] = p[i];
        }
        var[slot] = eig.eigenvalues[k];
    }
    (proj, var)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_item: Vec<BTreeMap<String, f64>>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(config: serde_json::Value, seed: u64) -> Self {
        Self {
            metrics: BTreeMap::new(),
            per_item: Vec::new(),
            config,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for (k, v) in &self.metrics {
            if !v.is_finite() {
                return Err(EvalError::NonFinite(k.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self).expect("report serializes") + "\n")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpoConfig {
    pub train_groups: Vec<usize>,
    pub eval_groups: Vec<usize>,
    pub labeled_fraction: f64,
    pub unfeatured: usize,
    pub seed: u64,
}

/// Predicts compositions for raw observations.
pub type Predictor = Box<dyn Fn(&Tensor) -> Result<Tensor, EvalError>>;

/// Trains through `runner` on the training groups only, then scores the
/// returned predictor on every row of the evaluation groups.
pub fn grouped_leave_p_out(
    table: &SampleTable,
    cfg: &LpoConfig,
    z: Option<(usize, f64, f64)>,
    runner: &mut dyn FnMut(&Dataset) -> Result<Predictor, EvalError>,
) -> Result<MetricReport, EvalError> {
    let overlap: Vec<usize> = cfg.train_groups.iter().filter(|g| cfg.eval_groups.contains(g)).cloned().collect();
    if !overlap.is_empty() {
        return Err(EvalError::Overlap(overlap));
    }
    let train = make_group_split(table, &cfg.train_groups, cfg.labeled_fraction, cfg.unfeatured, z, cfg.seed)?;
    let eval_rows: Vec<usize> = (0..table.len()).filter(|i| cfg.eval_groups.contains(&table.group[*i])).collect();
    if let Some(r) = train.labeled_rows.iter().chain(&train.unlabeled_rows).find(|r| eval_rows.contains(r)) {
        return Err(EvalError::Leak(*r));
    }
    let predictor = runner(&train)?;
    let x = table.x.select_rows(&eval_rows);
    let truth = table.abundances.select_rows(&eval_rows);
    let pred = predictor(&x)?;
    let kls = per_item_kl(&pred, &truth)?;
    let mut report = MetricReport::new(serde_json::to_value(cfg).expect("config serializes"), cfg.seed);
    report.metrics.insert("composition_kl".into(), kls.iter().sum::<f64>() / kls.len().max(1) as f64);
    report.metrics.insert("train_items".into(), (train.labeled_rows.len() + train.unlabeled_rows.len()) as f64);
    report.metrics.insert("eval_items".into(), eval_rows.len() as f64);
    for (i, (row, kl)) in eval_rows.iter().zip(&kls).enumerate() {
        let mut item = BTreeMap::new();
        item.insert("row".into(), *row as f64);
        item.insert("group".into(), table.group[*row] as f64);
        item.insert("kl".into(), *kl);
        for (k, v) in pred.row(i).iter().enumerate() {
            item.insert(format!("pred{k}"), *v);
        }
        report.per_item.push(item);
    }
    report.validate()?;
    Ok(report)
}
