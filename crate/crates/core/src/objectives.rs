//! Evidence lower bounds for the forward (`x → y, z`) and reverse (`y → x`)
//! directions, the discriminative losses, and the weighted training objective.
//!
//! Each bound is built as a set of named per-row terms on a [`Graph`], so the
//! same construction yields values, breakdowns and gradients. Monte Carlo
//! samples are rows: a batch of `n` items with `S` samples is evaluated on
//! `n·S` rows (item-major) and each item's estimate is the mean of its rows.
//!
//! Samples of `z` are clamped into the prior support before `log p(z)` is
//! evaluated, so the prior terms are constants.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{BoundParams, DiffError, Graph, NodeId, ParamSet, Tensor};
use crate::distributions::{gaussian_log_density, simplex_uniform_log_density, NodeDist, NoiseDraw, NoiseKind, NoiseProvenance, NoiseStream, PROB_FLOOR};
use crate::model::{Model, ModelConfig, Nets, YFamily};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite ELBO term `{0}`")]
    NonFiniteTerm(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Weights of the four objective families. Zero reverse weights give the
/// forward-only (M2) model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub alpha_f: f64,
    pub alpha_f_d: f64,
    pub alpha_r: f64,
    pub alpha_r_d: f64,
}

impl Coefficients {
    pub const CRISM: Self = Self { alpha_f: 1.0, alpha_f_d: 1.0, alpha_r: 0.01, alpha_r_d: 1.0 };
    pub const LIBS: Self = Self { alpha_f: 0.01, alpha_f_d: 10.0, alpha_r: 0.0001, alpha_r_d: 0.0001 };
    pub const ZERO: Self = Self { alpha_f: 0.0, alpha_f_d: 0.0, alpha_r: 0.0, alpha_r_d: 0.0 };

    /// The forward-only ablation: reverse bounds switched off, discriminative losses kept.
    pub fn m2(self) -> Self {
        Self { alpha_r: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, v) in [
            ("alpha_f", self.alpha_f),
            ("alpha_f_d", self.alpha_f_d),
            ("alpha_r", self.alpha_r),
            ("alpha_r_d", self.alpha_r_d),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ObjectiveError::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// How unfeatured compositions enter the reverse bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnfeaturedVariant {
    /// `z ~ p(z)`, with the `-log p(z)` term.
    LatentZ,
    /// `z` supplied with each composition; no prior term.
    ObservedZ,
    /// `z ~ q(z|y)` from the auxiliary network, with `-log q(z|y)`.
    AuxZ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub coefficients: Coefficients,
    #[serde(default = "default_variant")]
    pub variant: UnfeaturedVariant,
    /// Half-width of the uniform reference density `q(x)`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Monte Carlo samples per item.
    #[serde(default = "one")]
    pub samples: usize,
    /// Weight of the auxiliary consistency KL (aux_z variant only).
    #[serde(default = "unit")]
    pub aux_kl_weight: f64,
    #[serde(default = "two")]
    pub aux_kl_samples: usize,
}

fn default_variant() -> UnfeaturedVariant {
    UnfeaturedVariant::ObservedZ
}
fn default_gamma() -> f64 {
    10.0
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn unit() -> f64 {
    1.0
}

impl ObjectiveConfig {
    pub fn new(coefficients: Coefficients) -> Self {
        Self {
            coefficients,
            variant: default_variant(),
            gamma: default_gamma(),
            samples: 1,
            aux_kl_weight: 1.0,
            aux_kl_samples: 2,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), ObjectiveError> {
        self.coefficients.validate()?;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(ObjectiveError::Config("gamma must be positive".into()));
        }
        if self.samples == 0 {
            return Err(ObjectiveError::Config("samples must be at least 1".into()));
        }
        if self.variant == UnfeaturedVariant::AuxZ {
            if model.aux_z.is_none() {
                return Err(ObjectiveError::Config("variant aux_z requires model.aux_z".into()));
            }
            if self.aux_kl_samples == 0 {
                return Err(ObjectiveError::Config("aux_kl_samples must be at least 1".into()));
            }
            if !(self.aux_kl_weight >= 0.0) {
                return Err(ObjectiveError::Config("aux_kl_weight must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// `log q(x)` for the box `[-γ, γ]^x_dim`.
pub fn log_q_x(x_dim: usize, gamma: f64) -> f64 {
    -(x_dim as f64) * (2.0 * gamma).ln()
}

/// Named `rows × 1` terms whose row-wise sum is a bound.
#[derive(Clone, Debug, Default)]
pub struct Terms {
    pub terms: Vec<(&'static str, NodeId)>,
}

impl Terms {
    fn push(&mut self, name: &'static str, node: NodeId) {
        self.terms.push((name, node));
    }

    /// Row-wise total, `rows × 1`.
    pub fn total(&self, g: &mut Graph) -> NodeId {
        let mut it = self.terms.iter().map(|(_, n)| *n);
        let first = it.next().expect("at least one term");
        it.fold(first, |acc, n| g.add(acc, n))
    }

    /// Scalar sum over rows, divided by the samples per item.
    pub fn sum(&self, g: &mut Graph, samples: usize) -> NodeId {
        let t = self.total(g);
        let s = g.sum(t);
        g.scale(s, 1.0 / samples as f64)
    }

    pub fn breakdown(&self, g: &Graph, samples: usize) -> BTreeMap<String, f64> {
        self.terms
            .iter()
            .map(|(name, n)| ((*name).to_owned(), g.value(*n).sum() / samples as f64))
            .collect()
    }

    fn check_finite(&self, g: &Graph) -> Result<(), ObjectiveError> {
        for (name, n) in &self.terms {
            if !g.value(*n).is_finite() {
                return Err(ObjectiveError::NonFiniteTerm((*name).to_owned()));
            }
        }
        Ok(())
    }
}

fn const_col(g: &mut Graph, rows: usize, v: f64) -> NodeId {
    g.constant(Tensor::full(&[rows, 1], v))
}

fn rows(g: &Graph, n: NodeId) -> usize {
    g.value(n).rows()
}

fn neg_log_density(g: &mut Graph, d: &NodeDist, v: NodeId) -> NodeId {
    let lp = d.log_density(g, v);
    g.neg(lp)
}

/// `z = lo + (hi - lo)·u` for uniform noise `u`.
pub fn prior_z_from_uniform(config: &ModelConfig, u: &Tensor) -> Tensor {
    u.as_matrix().map(|u| config.z_lo + (config.z_hi - config.z_lo) * u)
}

/// Forward bound for a labeled pair: `z ~ q(z|x,y)`,
/// `log p(x|y,z) - log q(z|x,y) + log p(y) + log p(z)`.
pub fn fxy_terms(g: &mut Graph, nets: &Nets, x: NodeId, y: NodeId, eps_z: &Tensor) -> Terms {
    let c = nets.config;
    let n = rows(g, x);
    let qz = nets.encode_z(g, x, y);
    let z = qz.rsample(g, eps_z);
    let px = nets.decode_x(g, y, z);
    let mut t = Terms::default();
    let rec = px.log_density(g, x);
    t.push("reconstruction", rec);
    let ent = neg_log_density(g, &qz, z);
    t.push("entropy_z", ent);
    let py = const_col(g, n, simplex_uniform_log_density(c.y_dim));
    t.push("prior_y", py);
    let pz = const_col(g, n, c.z_prior_log_density());
    t.push("prior_z", pz);
    t
}

/// Forward bound for an unlabeled observation: `y ~ q(y|x)`, `z ~ q(z|x,y)`,
/// `log p(x|y,z) - log q(y|x) - log q(z|x,y) + log p(y) + log p(z)`.
pub fn fx_terms(g: &mut Graph, nets: &Nets, x: NodeId, eps_y: &Tensor, eps_z: &Tensor) -> Terms {
    let c = nets.config;
    let n = rows(g, x);
    let qy = nets.encode_y(g, x);
    let y = qy.rsample(g, eps_y);
    let qz = nets.encode_z(g, x, y);
    let z = qz.rsample(g, eps_z);
    let px = nets.decode_x(g, y, z);
    let mut t = Terms::default();
    let rec = px.log_density(g, x);
    t.push("reconstruction", rec);
    let ent_y = neg_log_density(g, &qy, y);
    t.push("entropy_y", ent_y);
    let ent_z = neg_log_density(g, &qz, z);
    t.push("entropy_z", ent_z);
    let py = const_col(g, n, simplex_uniform_log_density(c.y_dim));
    t.push("prior_y", py);
    let pz = const_col(g, n, c.z_prior_log_density());
    t.push("prior_z", pz);
    t
}

/// Reverse bound for a labeled pair: `z ~ p(z)`,
/// `log q(y|x) + log q(z|x,y) - log p(z) + log q(x)`.
pub fn rxy_terms(g: &mut Graph, nets: &Nets, x: NodeId, y: NodeId, z_prior: &Tensor, gamma: f64) -> Terms {
    let c = nets.config;
    let n = rows(g, x);
    let z = g.constant(z_prior.as_matrix());
    let qy = nets.encode_y(g, x);
    let qz = nets.encode_z(g, x, y);
    let mut t = Terms::default();
    let ly = qy.log_density(g, y);
    t.push("log_q_y", ly);
    let lz = qz.log_density(g, z);
    t.push("log_q_z", lz);
    let pz = const_col(g, n, -c.z_prior_log_density());
    t.push("neg_prior_z", pz);
    let qx = const_col(g, n, log_q_x(c.x_dim, gamma));
    t.push("log_q_x", qx);
    t
}

/// Where the reverse bound for unfeatured compositions gets `z`.
pub enum ZSource<'a> {
    /// Prior draw (already mapped into the support).
    Prior(&'a Tensor),
    /// Supplied with the composition.
    Observed(&'a Tensor),
    /// Standard-normal noise for the auxiliary network.
    Aux(&'a Tensor),
}

impl ZSource<'_> {
    pub fn variant(&self) -> UnfeaturedVariant {
        match self {
            ZSource::Prior(_) => UnfeaturedVariant::LatentZ,
            ZSource::Observed(_) => UnfeaturedVariant::ObservedZ,
            ZSource::Aux(_) => UnfeaturedVariant::AuxZ,
        }
    }
}

/// Reverse bound for unfeatured compositions: `x ~ p(x|y,z)` with `z` from
/// `source`, `log q(y|x) + log q(z|x,y) - log p(x|y,z) + log q(x)`, plus
/// `-log p(z)` (prior z) or `-log q(z|y)` (auxiliary z).
///
/// A Bernoulli decoder contributes its mean pixel probabilities as `x`.
pub fn ry_terms(g: &mut Graph, nets: &Nets, y: NodeId, source: ZSource, eps_x: &Tensor, gamma: f64) -> Terms {
    let c = nets.config;
    let n = rows(g, y);
    let mut t = Terms::default();
    let (z, aux) = match source {
        ZSource::Prior(z) | ZSource::Observed(z) => (g.constant(z.as_matrix()), None),
        ZSource::Aux(eps) => {
            let qa = nets.aux_z(g, y);
            (qa.rsample(g, eps), Some(qa))
        }
    };
    let px = nets.decode_x(g, y, z);
    let x = px.rsample(g, eps_x);
    let qy = nets.encode_y(g, x);
    let qz = nets.encode_z(g, x, y);
    let ly = qy.log_density(g, y);
    t.push("log_q_y", ly);
    let lz = qz.log_density(g, z);
    t.push("log_q_z", lz);
    match (&source, aux) {
        (ZSource::Prior(_), _) => {
            let pz = const_col(g, n, -c.z_prior_log_density());
            t.push("neg_prior_z", pz);
        }
        (ZSource::Aux(_), Some(qa)) => {
            let la = neg_log_density(g, &qa, z);
            t.push("neg_log_q_aux", la);
        }
        _ => {}
    }
    let lx = neg_log_density(g, &px, x);
    t.push("neg_log_p_x", lx);
    let qx = const_col(g, n, log_q_x(c.x_dim, gamma));
    t.push("log_q_x", qx);
    t
}

/// Constant selection matrix gathering rows `idx` of a `src_rows`-row node.
fn gather_rows(g: &mut Graph, a: NodeId, idx: &[usize]) -> NodeId {
    let src = rows(g, a);
    let mut sel = vec![0.0; idx.len() * src];
    for (r, &i) in idx.iter().enumerate() {
        sel[r * src + i] = 1.0;
    }
    let p = g.constant(Tensor::matrix(idx.len(), src, sel));
    g.matmul(p, a)
}

/// Monte Carlo `KL(q(z|y) ‖ (1/S) Σ_t q(z|x_t, y))` per composition, as an
/// `n × 1` node. `z_s ~ q(z|y)` and `x_t ~ p(x|y, z_t)` use `S` rows of
/// noise per composition (`eps_z`: `n·S × z_dim`, `eps_x`: `n·S × x_dim`).
pub fn aux_kl_node(g: &mut Graph, nets: &Nets, y: NodeId, samples: usize, eps_z: &Tensor, eps_x: &Tensor) -> NodeId {
    let n = rows(g, y);
    let s = samples;
    let y_rep = g.repeat_rows(y, s);
    let qa = nets.aux_z(g, y_rep);
    let z = qa.rsample(g, eps_z);
    let log_qa = qa.log_density(g, z);
    let px = nets.decode_x(g, y_rep, z);
    let x = px.rsample(g, eps_x);
    let (mean, log_var) = match nets.encode_z(g, x, y_rep) {
        NodeDist::DiagGaussian { mean, log_var } => (mean, log_var),
        _ => unreachable!("z encoder is Gaussian"),
    };
    let mut z_idx = Vec::with_capacity(n * s * s);
    let mut m_idx = Vec::with_capacity(n * s * s);
    for i in 0..n {
        for a in 0..s {
            for b in 0..s {
                z_idx.push(i * s + a);
                m_idx.push(i * s + b);
            }
        }
    }
    let zp = gather_rows(g, z, &z_idx);
    let mp = gather_rows(g, mean, &m_idx);
    let lp = gather_rows(g, log_var, &m_idx);
    let pair = gaussian_log_density(g, zp, mp, lp);
    let pair = g.reshape(pair, &[n * s, s]);
    let mix = g.logsumexp_rows(pair);
    let mix = g.add_scalar(mix, -(s as f64).ln());
    let kl = g.sub(log_qa, mix);
    let kl = g.reshape(kl, &[n, s]);
    let kl = g.row_sum(kl);
    g.scale(kl, 1.0 / s as f64)
}

/// Per-row `KL(y ‖ ȳ)` with `ȳ` the mean of `q(y|x)`, floored at η inside the log.
pub fn loss_y_node(g: &mut Graph, nets: &Nets, x: NodeId, y: &Tensor) -> NodeId {
    let qy = nets.encode_y(g, x);
    let ybar = qy.mean(g);
    let floored = g.clamp_min(ybar, PROB_FLOOR);
    let log_ybar = g.log(floored);
    let yn = g.constant(y.as_matrix());
    let cross = g.mul(yn, log_ybar);
    let cross = g.row_sum(cross);
    let neg_entropy: Vec<f64> = y
        .row_iter()
        .map(|r| r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum())
        .collect();
    let h = g.constant(Tensor::matrix(neg_entropy.len(), 1, neg_entropy));
    g.sub(h, cross)
}

/// Per-row `‖x̄ - x‖²` with `x̄` the decoder mean at the given prior draw of `z`.
pub fn loss_x_node(g: &mut Graph, nets: &Nets, x: NodeId, y: NodeId, z_prior: &Tensor) -> NodeId {
    let z = g.constant(z_prior.as_matrix());
    let px = nets.decode_x(g, y, z);
    let xbar = px.mean(g);
    let d = g.sub(xbar, x);
    let sq = g.square(d);
    g.row_sum(sq)
}

/// One Monte Carlo estimate of a bound.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    /// Term name → summed contribution; the terms add up to `value`.
    pub breakdown: BTreeMap<String, f64>,
    pub provenance: Vec<NoiseProvenance>,
}

fn provenance(draws: &[&NoiseDraw]) -> Vec<NoiseProvenance> {
    draws.iter().filter_map(|d| d.provenance).collect()
}

/// Rows of noise per item; checks the noise covers `items · S` rows.
fn samples_for(items: usize, noise: &NoiseDraw, cols: usize, what: &str) -> Result<usize, ObjectiveError> {
    let r = noise.values.rows();
    if items == 0 || r % items != 0 || r == 0 || noise.values.cols() != cols {
        return Err(ObjectiveError::Shape(format!(
            "{what} noise has shape {:?}; need a multiple of {items} rows and {cols} columns",
            noise.values.shape()
        )));
    }
    Ok(r / items)
}

fn expect_kind(noise: &NoiseDraw, kind: NoiseKind, what: &str) -> Result<(), ObjectiveError> {
    if noise.kind != kind {
        return Err(ObjectiveError::Shape(format!("{what} needs {kind:?} noise, got {:?}", noise.kind)));
    }
    Ok(())
}

fn check_input(t: &Tensor, cols: usize, what: &str) -> Result<Tensor, ObjectiveError> {
    if t.cols() != cols || t.is_empty() {
        return Err(ObjectiveError::Shape(format!("{what} needs {cols} columns, got {:?}", t.shape())));
    }
    Ok(t.as_matrix())
}

fn y_noise_kind(c: &ModelConfig) -> NoiseKind {
    match c.y_family {
        YFamily::LogisticNormal => NoiseKind::StandardNormal,
        YFamily::Concrete => NoiseKind::Gumbel,
    }
}

fn estimate(
    model: &Model,
    samples: usize,
    draws: &[&NoiseDraw],
    build: impl FnOnce(&mut Graph, &Nets) -> Terms,
) -> Result<ElboEstimate, ObjectiveError> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let nets = Nets::new(&model.config, &bound);
    let terms = build(&mut g, &nets);
    terms.check_finite(&g)?;
    let total = terms.sum(&mut g, samples);
    Ok(ElboEstimate {
        value: g.value(total).item(),
        breakdown: terms.breakdown(&g, samples),
        provenance: provenance(draws),
    })
}

/// Labeled forward bound summed over the rows of `x`/`y`; `eps_z` holds
/// `S` standard-normal rows per item.
pub fn elbo_forward_labeled(model: &Model, x: &Tensor, y: &Tensor, eps_z: &NoiseDraw) -> Result<ElboEstimate, ObjectiveError> {
    let c = &model.config;
    let (x, y) = (check_input(x, c.x_dim, "x")?, check_input(y, c.y_dim, "y")?);
    expect_kind(eps_z, NoiseKind::StandardNormal, "z")?;
    let s = samples_for(x.rows(), eps_z, c.z_dim, "z")?;
    estimate(model, s, &[eps_z], |g, nets| {
        let xn = g.constant(x);
        let yn = g.constant(y);
        let xn = g.repeat_rows(xn, s);
        let yn = g.repeat_rows(yn, s);
        fxy_terms(g, nets, xn, yn, &eps_z.values)
    })
}

pub fn elbo_forward_unlabeled(model: &Model, x: &Tensor, eps_y: &NoiseDraw, eps_z: &NoiseDraw) -> Result<ElboEstimate, ObjectiveError> {
    let c = &model.config;
    let x = check_input(x, c.x_dim, "x")?;
    expect_kind(eps_y, y_noise_kind(c), "y")?;
    expect_kind(eps_z, NoiseKind::StandardNormal, "z")?;
    let s = samples_for(x.rows(), eps_y, c.y_dim, "y")?;
    if samples_for(x.rows(), eps_z, c.z_dim, "z")? != s {
        return Err(ObjectiveError::Shape("y and z noise disagree on sample count".into()));
    }
    estimate(model, s, &[eps_y, eps_z], |g, nets| {
        let xn = g.constant(x);
        let xn = g.repeat_rows(xn, s);
        fx_terms(g, nets, xn, &eps_y.values, &eps_z.values)
    })
}

/// `u_z` is uniform noise mapped onto the z support.
pub fn elbo_reverse_labeled(model: &Model, x: &Tensor, y: &Tensor, u_z: &NoiseDraw, gamma: f64) -> Result<ElboEstimate, ObjectiveError> {
    let c = &model.config;
    let (x, y) = (check_input(x, c.x_dim, "x")?, check_input(y, c.y_dim, "y")?);
    expect_kind(u_z, NoiseKind::Uniform, "z")?;
    let s = samples_for(x.rows(), u_z, c.z_dim, "z")?;
    let z = prior_z_from_uniform(c, &u_z.values);
    estimate(model, s, &[u_z], |g, nets| {
        let xn = g.constant(x);
        let yn = g.constant(y);
        let xn = g.repeat_rows(xn, s);
        let yn = g.repeat_rows(yn, s);
        rxy_terms(g, nets, xn, yn, &z, gamma)
    })
}

/// Input for `z` in [`elbo_reverse_unfeatured`]: uniform noise (latent),
/// the observed values, or standard-normal noise (auxiliary network).
pub enum ZInput<'a> {
    Latent(&'a NoiseDraw),
    Observed(&'a Tensor),
    Aux(&'a NoiseDraw),
}

pub fn elbo_reverse_unfeatured(
    model: &Model,
    y: &Tensor,
    z: ZInput,
    eps_x: &NoiseDraw,
    gamma: f64,
) -> Result<ElboEstimate, ObjectiveError> {
    let c = &model.config;
    let y = check_input(y, c.y_dim, "y")?;
    expect_kind(eps_x, NoiseKind::StandardNormal, "x")?;
    let s = samples_for(y.rows(), eps_x, c.x_dim, "x")?;
    let n = y.rows();
    let (z_values, draws): (Tensor, Vec<&NoiseDraw>) = match &z {
        ZInput::Latent(u) => {
            expect_kind(u, NoiseKind::Uniform, "z")?;
            (prior_z_from_uniform(c, &u.values), vec![*u, eps_x])
        }
        ZInput::Observed(t) => {
            if t.cols() != c.z_dim || t.rows() != n {
                return Err(ObjectiveError::Shape(format!("observed z has shape {:?}", t.shape())));
            }
            let zt = t.as_matrix();
            let rep = zt.select_rows(&(0..n * s).map(|r| r / s).collect::<Vec<_>>());
            (rep, vec![eps_x])
        }
        ZInput::Aux(e) => {
            if c.aux_z.is_none() {
                return Err(ObjectiveError::Config("variant aux_z requires model.aux_z".into()));
            }
            expect_kind(e, NoiseKind::StandardNormal, "z")?;
            (e.values.as_matrix(), vec![*e, eps_x])
        }
    };
    if z_values.rows() != n * s || z_values.cols() != c.z_dim {
        return Err(ObjectiveError::Shape("z input does not match the x noise sample count".into()));
    }
    estimate(model, s, &draws, |g, nets| {
        let yn = g.constant(y);
        let yn = g.repeat_rows(yn, s);
        let src = match z {
            ZInput::Latent(_) => ZSource::Prior(&z_values),
            ZInput::Observed(_) => ZSource::Observed(&z_values),
            ZInput::Aux(_) => ZSource::Aux(&z_values),
        };
        ry_terms(g, nets, yn, src, &eps_x.values, gamma)
    })
}

/// Mean over compositions of the auxiliary consistency KL.
pub fn aux_consistency_kl(model: &Model, y: &Tensor, samples: usize, eps_z: &NoiseDraw, eps_x: &NoiseDraw) -> Result<f64, ObjectiveError> {
    let c = &model.config;
    if samples < 1 {
        return Err(ObjectiveError::Config("sample_count must be at least 1".into()));
    }
    if c.aux_z.is_none() {
        return Err(ObjectiveError::Config("auxiliary z network not configured".into()));
    }
    let y = check_input(y, c.y_dim, "y")?;
    let n = y.rows();
    if eps_z.values.rows() != n * samples || eps_z.values.cols() != c.z_dim || eps_x.values.rows() != n * samples || eps_x.values.cols() != c.x_dim {
        return Err(ObjectiveError::Shape("noise must have y rows × sample_count rows".into()));
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let nets = Nets::new(c, &bound);
    let yn = g.constant(y);
    let kl = aux_kl_node(&mut g, &nets, yn, samples, &eps_z.values, &eps_x.values);
    let v = g.value(kl).sum() / n as f64;
    if !v.is_finite() {
        return Err(ObjectiveError::NonFiniteTerm("aux_kl".into()));
    }
    Ok(v)
}

/// Mean `KL(y ‖ ȳ)` and mean `‖x̄ - x‖²` over the labeled rows; `u_z` is uniform noise.
pub fn discriminative_losses(model: &Model, x: &Tensor, y: &Tensor, u_z: &NoiseDraw) -> Result<(f64, f64), ObjectiveError> {
    let c = &model.config;
    let (x, y) = (check_input(x, c.x_dim, "x")?, check_input(y, c.y_dim, "y")?);
    expect_kind(u_z, NoiseKind::Uniform, "z")?;
    if u_z.values.rows() != x.rows() || u_z.values.cols() != c.z_dim || x.rows() != y.rows() {
        return Err(ObjectiveError::Shape("one z draw per labeled row".into()));
    }
    let z = prior_z_from_uniform(c, &u_z.values);
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let nets = Nets::new(c, &bound);
    let n = x.rows() as f64;
    let xn = g.constant(x);
    let ly = loss_y_node(&mut g, &nets, xn, &y);
    let yn = g.constant(y);
    let lx = loss_x_node(&mut g, &nets, xn, yn, &z);
    Ok((g.value(ly).sum() / n, g.value(lx).sum() / n))
}

/// A mini-batch split by data kind. Empty sub-batches have zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled_x: Tensor,
    pub labeled_y: Tensor,
    pub unlabeled_x: Tensor,
    pub unfeatured_y: Tensor,
    /// Observed nuisance values for the unfeatured compositions.
    pub unfeatured_z: Option<Tensor>,
}

impl Batch {
    pub fn empty(config: &ModelConfig) -> Self {
        Self {
            labeled_x: Tensor::zeros(&[0, config.x_dim]),
            labeled_y: Tensor::zeros(&[0, config.y_dim]),
            unlabeled_x: Tensor::zeros(&[0, config.x_dim]),
            unfeatured_y: Tensor::zeros(&[0, config.y_dim]),
            unfeatured_z: None,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let r = |t: &Tensor| if t.is_empty() { 0 } else { t.rows() };
        (r(&self.labeled_x), r(&self.unlabeled_x), r(&self.unfeatured_y))
    }

    pub fn is_empty(&self) -> bool {
        self.counts() == (0, 0, 0)
    }
}

/// All noise one evaluation of the combined objective consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNoise {
    /// Standard normal, labeled `z ~ q(z|x,y)`.
    pub fxy_z: Tensor,
    /// Uniform, labeled `z ~ p(z)`; shared by the reverse bound and `loss_x`.
    pub rxy_z: Tensor,
    /// Unlabeled `y ~ q(y|x)` (normal or Gumbel).
    pub fx_y: Tensor,
    /// Standard normal, unlabeled `z ~ q(z|x,y)`.
    pub fx_z: Tensor,
    /// Unfeatured `z`: uniform (latent), normal (aux), empty (observed).
    pub ry_z: Tensor,
    /// Standard normal, unfeatured `x ~ p(x|y,z)`.
    pub ry_x: Tensor,
    /// Auxiliary KL noise, `aux_kl_samples` rows per composition.
    pub aux_z: Tensor,
    pub aux_x: Tensor,
}

impl BatchNoise {
    /// Draws every noise tensor from `stream` in a fixed order.
    pub fn draw(stream: &mut NoiseStream, model: &ModelConfig, obj: &ObjectiveConfig, counts: (usize, usize, usize)) -> Self {
        let (nl, nu, ny) = counts;
        let s = obj.samples;
        let (xd, yd, zd) = (model.x_dim, model.y_dim, model.z_dim);
        let yk = y_noise_kind(model);
        let fxy_z = stream.normal(nl * s, zd).values;
        let rxy_z = stream.uniform(nl * s, zd).values;
        let fx_y = stream.draw(yk, nu * s, yd).values;
        let fx_z = stream.normal(nu * s, zd).values;
        let ry_z = match obj.variant {
            UnfeaturedVariant::LatentZ => stream.uniform(ny * s, zd).values,
            UnfeaturedVariant::AuxZ => stream.normal(ny * s, zd).values,
            UnfeaturedVariant::ObservedZ => Tensor::zeros(&[0, zd]),
        };
        let ry_x = stream.normal(ny * s, xd).values;
        let (aux_z, aux_x) = if obj.variant == UnfeaturedVariant::AuxZ {
            let k = obj.aux_kl_samples;
            (stream.normal(ny * k, zd).values, stream.normal(ny * k, xd).values)
        } else {
            (Tensor::zeros(&[0, zd]), Tensor::zeros(&[0, xd]))
        };
        Self { fxy_z, rxy_z, fx_y, fx_z, ry_z, ry_x, aux_z, aux_x }
    }
}

/// Per-term values of one objective evaluation. Bounds are summed over
/// items; losses are means over labeled items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveMetrics {
    #[serde(rename = "J")]
    pub j: f64,
    pub elbo_fxy: f64,
    pub elbo_fx: f64,
    pub elbo_rxy: f64,
    pub elbo_ry: f64,
    pub loss_y: f64,
    pub loss_x: f64,
    pub aux_kl: f64,
}

/// Graph nodes of a built objective.
pub struct ObjectiveNodes {
    pub j: NodeId,
    pub elbo_fxy: Option<NodeId>,
    pub elbo_fx: Option<NodeId>,
    pub elbo_rxy: Option<NodeId>,
    pub elbo_ry: Option<NodeId>,
    pub loss_y: Option<NodeId>,
    pub loss_x: Option<NodeId>,
    pub aux_kl: Option<NodeId>,
    pub warnings: Vec<String>,
}

impl ObjectiveNodes {
    pub fn metrics(&self, g: &Graph) -> ObjectiveMetrics {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item());
        ObjectiveMetrics {
            j: g.value(self.j).item(),
            elbo_fxy: v(self.elbo_fxy),
            elbo_fx: v(self.elbo_fx),
            elbo_rxy: v(self.elbo_rxy),
            elbo_ry: v(self.elbo_ry),
            loss_y: v(self.loss_y),
            loss_x: v(self.loss_x),
            aux_kl: v(self.aux_kl),
        }
    }
}

fn weighted(g: &mut Graph, acc: Option<NodeId>, term: NodeId, w: f64) -> Option<NodeId> {
    let t = g.scale(term, w);
    Some(match acc {
        Some(a) => g.add(a, t),
        None => t,
    })
}

/// Builds `J = α_f (Σ L_fxy + Σ L_fx) - α_f^d mean L_y + α_r (Σ L_rxy + Σ L_ry) - α_r^d mean L_x`
/// (minus the weighted auxiliary KL for the aux_z variant), accumulating the
/// labeled, unlabeled and unfeatured contributions in that order. Terms whose
/// coefficient is zero are not built.
pub fn build_objective(g: &mut Graph, nets: &Nets, batch: &Batch, obj: &ObjectiveConfig, noise: &BatchNoise) -> ObjectiveNodes {
    let c = nets.config;
    let a = obj.coefficients;
    let s = obj.samples;
    let (nl, nu, ny) = batch.counts();
    let mut warnings = Vec::new();
    let zero = g.scalar(0.0);
    let mut nodes = ObjectiveNodes {
        j: zero,
        elbo_fxy: None,
        elbo_fx: None,
        elbo_rxy: None,
        elbo_ry: None,
        loss_y: None,
        loss_x: None,
        aux_kl: None,
        warnings: Vec::new(),
    };
    let mut j: Option<NodeId> = None;

    if nl > 0 {
        let x = g.constant(batch.labeled_x.as_matrix());
        let y = g.constant(batch.labeled_y.as_matrix());
        let (xs, ys) = if s > 1 { (g.repeat_rows(x, s), g.repeat_rows(y, s)) } else { (x, y) };
        if a.alpha_f > 0.0 {
            let t = fxy_terms(g, nets, xs, ys, &noise.fxy_z);
            let v = t.sum(g, s);
            nodes.elbo_fxy = Some(v);
            j = weighted(g, j, v, a.alpha_f);
        }
        if a.alpha_f_d > 0.0 {
            let yt = batch.labeled_y.as_matrix();
            let l = loss_y_node(g, nets, x, &yt);
            let l = g.mean(l);
            nodes.loss_y = Some(l);
            j = weighted(g, j, l, -a.alpha_f_d);
        }
        let z_prior = prior_z_from_uniform(c, &noise.rxy_z);
        if a.alpha_r > 0.0 {
            let t = rxy_terms(g, nets, xs, ys, &z_prior, obj.gamma);
            let v = t.sum(g, s);
            nodes.elbo_rxy = Some(v);
            j = weighted(g, j, v, a.alpha_r);
        }
        if a.alpha_r_d > 0.0 {
            // The first prior draw of each item, shared with the reverse bound.
            let first: Vec<usize> = (0..nl).map(|i| i * s).collect();
            let zp = z_prior.select_rows(&first);
            let l = loss_x_node(g, nets, x, y, &zp);
            let l = g.mean(l);
            nodes.loss_x = Some(l);
            j = weighted(g, j, l, -a.alpha_r_d);
        }
    }

    if nu > 0 && a.alpha_f > 0.0 {
        let x = g.constant(batch.unlabeled_x.as_matrix());
        let xs = if s > 1 { g.repeat_rows(x, s) } else { x };
        let t = fx_terms(g, nets, xs, &noise.fx_y, &noise.fx_z);
        let v = t.sum(g, s);
        nodes.elbo_fx = Some(v);
        j = weighted(g, j, v, a.alpha_f);
    }

    if ny > 0 && a.alpha_r > 0.0 {
        let y = g.constant(batch.unfeatured_y.as_matrix());
        let ys = if s > 1 { g.repeat_rows(y, s) } else { y };
        let observed;
        let prior;
        let src = match obj.variant {
            UnfeaturedVariant::LatentZ => {
                prior = prior_z_from_uniform(c, &noise.ry_z);
                ZSource::Prior(&prior)
            }
            UnfeaturedVariant::ObservedZ => {
                let z = batch.unfeatured_z.as_ref().expect("observed-z variant needs unfeatured z");
                observed = z.as_matrix().select_rows(&(0..ny * s).map(|r| r / s).collect::<Vec<_>>());
                ZSource::Observed(&observed)
            }
            UnfeaturedVariant::AuxZ => ZSource::Aux(&noise.ry_z),
        };
        let t = ry_terms(g, nets, ys, src, &noise.ry_x, obj.gamma);
        let v = t.sum(g, s);
        nodes.elbo_ry = Some(v);
        j = weighted(g, j, v, a.alpha_r);
        if obj.variant == UnfeaturedVariant::AuxZ && obj.aux_kl_weight > 0.0 {
            let kl = aux_kl_node(g, nets, y, obj.aux_kl_samples, &noise.aux_z, &noise.aux_x);
            let kl = g.sum(kl);
            nodes.aux_kl = Some(kl);
            j = weighted(g, j, kl, -obj.aux_kl_weight);
        }
    }

    if batch.is_empty() {
        warnings.push("empty batch: objective is 0".to_owned());
        warn!("empty batch: objective is 0");
    }
    nodes.j = j.unwrap_or(zero);
    nodes.warnings = warnings;
    nodes
}

/// Value and per-term metrics of the combined objective.
pub fn total_objective(model: &Model, batch: &Batch, obj: &ObjectiveConfig, noise: &BatchNoise) -> Result<(ObjectiveMetrics, Vec<String>), ObjectiveError> {
    obj.validate(&model.config)?;
    validate_batch(&model.config, batch, obj)?;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let nets = Nets::new(&model.config, &bound);
    let nodes = build_objective(&mut g, &nets, batch, obj, noise);
    Ok((nodes.metrics(&g), nodes.warnings))
}

/// Value and gradient of `J` with respect to every parameter.
pub fn objective_gradient(
    config: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
    obj: &ObjectiveConfig,
    noise: &BatchNoise,
) -> Result<(ObjectiveMetrics, ParamSet), ObjectiveError> {
    let mut metrics = ObjectiveMetrics::default();
    let grads = crate::diffcore::gradient(params, |g: &mut Graph, p: &BoundParams| {
        let nets = Nets::new(config, p);
        let nodes = build_objective(g, &nets, batch, obj, noise);
        metrics = nodes.metrics(g);
        nodes.j
    })?;
    Ok((metrics, grads))
}

pub fn validate_batch(config: &ModelConfig, batch: &Batch, obj: &ObjectiveConfig) -> Result<(), ObjectiveError> {
    let (nl, nu, ny) = batch.counts();
    let check = |t: &Tensor, n: usize, cols: usize, what: &str| {
        if n > 0 && t.cols() != cols {
            return Err(ObjectiveError::Shape(format!("{what} needs {cols} columns, got {:?}", t.shape())));
        }
        Ok(())
    };
    check(&batch.labeled_x, nl, config.x_dim, "labeled x")?;
    check(&batch.labeled_y, nl, config.y_dim, "labeled y")?;
    check(&batch.unlabeled_x, nu, config.x_dim, "unlabeled x")?;
    check(&batch.unfeatured_y, ny, config.y_dim, "unfeatured y")?;
    if nl > 0 && batch.labeled_y.rows() != nl {
        return Err(ObjectiveError::Shape("labeled x and y row counts differ".into()));
    }
    if ny > 0 && obj.variant == UnfeaturedVariant::ObservedZ {
        match &batch.unfeatured_z {
            Some(z) if z.rows() == ny && z.cols() == config.z_dim => {}
            _ => return Err(ObjectiveError::Shape("observed-z variant needs one z per unfeatured composition".into())),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::init(ModelConfig::small(3, 3, 1, 4), 7).unwrap()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec())
    }

    #[test]
    fn breakdown_sums_to_value() {
        let m = model();
        let mut s = NoiseStream::new(1, 0);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.3]);
        let y = Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        let checks = [
            elbo_forward_labeled(&m, &x, &y, &s.normal(2, 1)).unwrap(),
            elbo_forward_unlabeled(&m, &x, &s.normal(2, 3), &s.normal(2, 1)).unwrap(),
            elbo_reverse_labeled(&m, &x, &y, &s.uniform(2, 1), 10.0).unwrap(),
            elbo_reverse_unfeatured(&m, &y, ZInput::Latent(&s.uniform(2, 1)), &s.normal(2, 3), 10.0).unwrap(),
        ];
        for e in checks {
            let total: f64 = e.breakdown.values().sum();
            assert!((total - e.value).abs() < 1e-10, "{e:?}");
            assert!(!e.provenance.is_empty());
        }
    }

    #[test]
    fn reverse_constant_term() {
        let m = model();
        let e = elbo_reverse_labeled(&m, &row(&[0.1, 0.2, 0.3]), &row(&[0.2, 0.3, 0.5]), &NoiseDraw::fixed(NoiseKind::Uniform, row(&[0.3])), 10.0).unwrap();
        assert_eq!(e.breakdown["log_q_x"], -3.0 * 20f64.ln());
    }

    #[test]
    fn observed_and_latent_differ_by_prior() {
        let m = model();
        let y = row(&[0.2, 0.3, 0.5]);
        let u = NoiseDraw::fixed(NoiseKind::Uniform, row(&[0.8]));
        let z = prior_z_from_uniform(&m.config, &u.values);
        let eps = NoiseDraw::fixed(NoiseKind::StandardNormal, row(&[0.3, -0.2, 1.1]));
        let latent = elbo_reverse_unfeatured(&m, &y, ZInput::Latent(&u), &eps, 10.0).unwrap();
        let observed = elbo_reverse_unfeatured(&m, &y, ZInput::Observed(&z), &eps, 10.0).unwrap();
        let back = observed.value - m.config.z_prior_log_density();
        assert!((back - latent.value).abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_give_zero_objective() {
        let m = model();
        let batch = Batch {
            labeled_x: row(&[0.1, 0.2, 0.3]),
            labeled_y: row(&[0.2, 0.3, 0.5]),
            unlabeled_x: row(&[0.0, 1.0, 0.5]),
            unfeatured_y: row(&[1.0, 0.0, 0.0]),
            unfeatured_z: Some(row(&[0.4])),
        };
        let obj = ObjectiveConfig::new(Coefficients::ZERO);
        let noise = BatchNoise::draw(&mut NoiseStream::new(3, 0), &m.config, &obj, batch.counts());
        let (metrics, _) = total_objective(&m, &batch, &obj, &noise).unwrap();
        assert_eq!(metrics.j, 0.0);
        let (_, grads) = objective_gradient(&m.config, &m.params, &batch, &obj, &noise).unwrap();
        assert!(grads.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn empty_batch_warns() {
        let m = model();
        let obj = ObjectiveConfig::new(Coefficients::CRISM);
        let batch = Batch::empty(&m.config);
        let noise = BatchNoise::draw(&mut NoiseStream::new(3, 0), &m.config, &obj, batch.counts());
        let (metrics, warnings) = total_objective(&m, &batch, &obj, &noise).unwrap();
        assert_eq!(metrics.j, 0.0);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn discriminative_zero_cases() {
        let mut m = model();
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // Zero network: ȳ uniform and x̄ = 0.
        let third = 1.0 / 3.0;
        let (ly, lx) = discriminative_losses(&m, &row(&[0.0, 0.0, 0.0]), &row(&[third, third, third]), &NoiseDraw::fixed(NoiseKind::Uniform, row(&[0.5]))).unwrap();
        assert!(ly.abs() < 1e-15);
        assert_eq!(lx, 0.0);
    }
}
