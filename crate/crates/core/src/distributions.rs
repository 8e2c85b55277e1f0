//! Distribution families used by the model: exact log-densities and
//! reparameterized samplers, plus seeded noise streams.
//!
//! Every density is written once, against graph nodes ([`NodeDist`]), so the
//! same code produces both plain values ([`DistSpec`]) and differentiable terms
//! inside an objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Graph, NodeId, Tensor};

/// Probability floor inside the logs of categorical, simplex and Bernoulli terms.
pub const PROB_FLOOR: f64 = 1e-9;

const SIMPLEX_TOL: f64 = 1e-9;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value is not on the probability simplex: {0}")]
    OffSimplex(String),
    #[error("negative probability component {value} at index {index}")]
    NegativeComponent { index: usize, value: f64 },
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
    #[error("noise of kind {got:?} cannot drive {family:?}")]
    WrongNoise { family: Family, got: NoiseKind },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    DiagGaussian,
    LogisticNormal,
    UniformBox,
    SimplexUniform,
    Concrete,
    Bernoulli,
}

/// A parameterized distribution. Parameter tensors may carry a batch of rows;
/// densities then factor over rows.
#[derive(Clone, Debug, PartialEq)]
pub enum DistSpec {
    DiagGaussian { mean: Tensor, log_var: Tensor },
    /// Softmax of a Gaussian. `loc` is the Gaussian location in logit space,
    /// so `softmax(loc)` is the point the distribution is centred on. The
    /// last coordinate is the log-ratio reference and its variance is unused.
    LogisticNormal { loc: Tensor, log_var: Tensor },
    UniformBox { lo: Tensor, hi: Tensor },
    /// Dirichlet(1, …, 1) over `dim` categories.
    SimplexUniform { dim: usize },
    Concrete { logits: Tensor, temperature: f64 },
    Bernoulli { logits: Tensor },
}

impl DistSpec {
    pub fn family(&self) -> Family {
        match self {
            DistSpec::DiagGaussian { .. } => Family::DiagGaussian,
            DistSpec::LogisticNormal { .. } => Family::LogisticNormal,
            DistSpec::UniformBox { .. } => Family::UniformBox,
            DistSpec::SimplexUniform { .. } => Family::SimplexUniform,
            DistSpec::Concrete { .. } => Family::Concrete,
            DistSpec::Bernoulli { .. } => Family::Bernoulli,
        }
    }

    /// Event dimensionality (columns of a value).
    pub fn dim(&self) -> usize {
        match self {
            DistSpec::DiagGaussian { mean, .. } => mean.cols(),
            DistSpec::LogisticNormal { loc, .. } => loc.cols(),
            DistSpec::UniformBox { lo, .. } => lo.cols(),
            DistSpec::SimplexUniform { dim } => *dim,
            DistSpec::Concrete { logits, .. } => logits.cols(),
            DistSpec::Bernoulli { logits } => logits.cols(),
        }
    }

    fn validate(&self) -> Result<(), DistError> {
        match self {
            DistSpec::DiagGaussian { mean: a, log_var: v } | DistSpec::LogisticNormal { loc: a, log_var: v } => {
                if a.shape() != v.shape() {
                    return Err(DistError::ShapeMismatch(format!("location {:?} vs log-variance {:?}", a.shape(), v.shape())));
                }
                if !v.is_finite() {
                    return Err(DistError::InvalidParameter("log-variance must be finite".into()));
                }
            }
            DistSpec::UniformBox { lo, hi } => {
                if lo.shape() != hi.shape() {
                    return Err(DistError::ShapeMismatch(format!("bounds {:?} vs {:?}", lo.shape(), hi.shape())));
                }
                if lo.data().iter().zip(hi.data()).any(|(l, h)| l >= h) {
                    return Err(DistError::InvalidParameter("uniform box needs lo < hi".into()));
                }
            }
            DistSpec::SimplexUniform { dim } => {
                if *dim < 1 {
                    return Err(DistError::InvalidParameter("simplex dimension must be positive".into()));
                }
            }
            DistSpec::Concrete { temperature, .. } => {
                if !(*temperature > 0.0) {
                    return Err(DistError::InvalidParameter("temperature must be positive".into()));
                }
            }
            DistSpec::Bernoulli { .. } => {}
        }
        Ok(())
    }

    /// Mean (for simplex families, the probability vector the distribution centres on).
    pub fn mean(&self) -> Tensor {
        let mut g = Graph::new();
        match self {
            DistSpec::UniformBox { lo, hi } => {
                let data = lo.data().iter().zip(hi.data()).map(|(l, h)| 0.5 * (l + h)).collect();
                Tensor::new(lo.shape().to_vec(), data).expect("same shape")
            }
            DistSpec::SimplexUniform { dim } => Tensor::vector(vec![1.0 / *dim as f64; *dim]),
            other => {
                let d = NodeDist::from_spec(&mut g, other);
                let m = d.mean(&mut g);
                g.value(m).clone()
            }
        }
    }
}

/// Exact log-density of `value`, summed over rows for batched parameters.
///
/// Uniform families return `-inf` outside their support. Simplex families
/// require `value` on the closed simplex; zero components are floored at
/// [`PROB_FLOOR`] inside logs.
pub fn log_density(dist: &DistSpec, value: &Tensor) -> Result<f64, DistError> {
    Ok(log_density_rows(dist, value)?.iter().sum())
}

/// Per-row log-densities.
pub fn log_density_rows(dist: &DistSpec, value: &Tensor) -> Result<Vec<f64>, DistError> {
    dist.validate()?;
    let dim = dist.dim();
    if value.cols() != dim {
        return Err(DistError::ShapeMismatch(format!("value has {} components, distribution has {dim}", value.cols())));
    }
    match dist {
        DistSpec::UniformBox { lo, hi } => {
            if lo.rows() != 1 && lo.rows() != value.rows() {
                return Err(DistError::ShapeMismatch("bounds rows must be 1 or match value rows".into()));
            }
            Ok(value
                .row_iter()
                .enumerate()
                .map(|(i, row)| {
                    let r = if lo.rows() == 1 { 0 } else { i };
                    uniform_box_log_density(lo.row(r), hi.row(r), row)
                })
                .collect())
        }
        DistSpec::SimplexUniform { dim } => {
            check_simplex(value)?;
            Ok(vec![simplex_uniform_log_density(*dim); value.rows()])
        }
        other => {
            if matches!(other, DistSpec::LogisticNormal { .. } | DistSpec::Concrete { .. }) {
                check_simplex(value)?;
            }
            let mut g = Graph::new();
            let d = NodeDist::from_spec(&mut g, other);
            if d.rows(&g) != value.rows() {
                return Err(DistError::ShapeMismatch(format!(
                    "{} parameter rows vs {} value rows",
                    d.rows(&g),
                    value.rows()
                )));
            }
            let v = g.constant(value.as_matrix());
            let lp = d.log_density(&mut g, v);
            Ok(g.value(lp).data().to_vec())
        }
    }
}

/// `-Σ log(hi - lo)` inside `[lo, hi]`, `-inf` outside.
pub fn uniform_box_log_density(lo: &[f64], hi: &[f64], value: &[f64]) -> f64 {
    let inside = value.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v <= h);
    if inside {
        -lo.iter().zip(hi).map(|(l, h)| (h - l).ln()).sum::<f64>()
    } else {
        f64::NEG_INFINITY
    }
}

/// Dir(1) density on the `dim`-simplex: `log Γ(dim) = log (dim-1)!`.
pub fn simplex_uniform_log_density(dim: usize) -> f64 {
    (1..dim).map(|k| (k as f64).ln()).sum()
}

fn check_simplex(value: &Tensor) -> Result<(), DistError> {
    for (i, row) in value.row_iter().enumerate() {
        if let Some((j, &v)) = row.iter().enumerate().find(|(_, v)| **v < 0.0 || !v.is_finite()) {
            return Err(DistError::OffSimplex(format!("row {i} component {j} = {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(DistError::OffSimplex(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Reparameterized draw driven by external noise.
///
/// Gaussian families consume standard-normal noise, Concrete consumes Gumbel
/// noise, uniform families consume `Uniform(0,1)` noise. Bernoulli returns its
/// mean (a real-valued relaxation), ignoring the noise values.
pub fn rsample(dist: &DistSpec, noise: &NoiseDraw) -> Result<Tensor, DistError> {
    dist.validate()?;
    match dist {
        DistSpec::UniformBox { lo, hi } => {
            expect_noise(dist.family(), noise, NoiseKind::Uniform)?;
            if noise.values.len() != lo.len() {
                return Err(DistError::ShapeMismatch("noise length must match box dimension".into()));
            }
            let data = noise
                .values
                .data()
                .iter()
                .zip(lo.data().iter().zip(hi.data()))
                .map(|(u, (l, h))| l + (h - l) * u)
                .collect();
            Ok(Tensor::new(lo.shape().to_vec(), data).expect("same shape"))
        }
        DistSpec::SimplexUniform { dim } => {
            // Normalized exponentials: -ln(u) are Exp(1) draws.
            expect_noise(dist.family(), noise, NoiseKind::Uniform)?;
            if noise.values.cols() != *dim {
                return Err(DistError::ShapeMismatch("noise columns must match simplex dimension".into()));
            }
            let mut out = noise.values.as_matrix().map(|u| -u.ln());
            for row in out.data_mut().chunks_mut(*dim) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok(out)
        }
        other => {
            let mut g = Graph::new();
            let d = NodeDist::from_spec(&mut g, other);
            let want = d.noise_kind();
            if let Some(kind) = want {
                expect_noise(dist.family(), noise, kind)?;
            }
            let (r, c) = (d.rows(&g), d.cols(&g));
            if want.is_some() && (noise.values.rows(), noise.values.cols()) != (r, c) {
                return Err(DistError::ShapeMismatch(format!(
                    "noise {:?} vs parameters {r}x{c}",
                    noise.values.shape()
                )));
            }
            let s = d.rsample(&mut g, &noise.values);
            let out = g.value(s).clone();
            let shape = match other {
                DistSpec::DiagGaussian { mean, .. } => mean.shape().to_vec(),
                DistSpec::LogisticNormal { loc, .. } => loc.shape().to_vec(),
                DistSpec::Concrete { logits, .. } | DistSpec::Bernoulli { logits } => logits.shape().to_vec(),
                _ => unreachable!(),
            };
            Ok(out.reshape(shape).expect("same length"))
        }
    }
}

fn expect_noise(family: Family, noise: &NoiseDraw, kind: NoiseKind) -> Result<(), DistError> {
    if noise.kind == kind {
        Ok(())
    } else {
        Err(DistError::WrongNoise { family, got: noise.kind })
    }
}

/// `Σ p_i log(p_i / max(q_i, η))` with `0 · log 0 = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    if p.len() != q.len() {
        return Err(DistError::ShapeMismatch(format!("{} vs {} categories", p.len(), q.len())));
    }
    for (index, &value) in p.iter().chain(q).enumerate() {
        if value < 0.0 || value.is_nan() {
            return Err(DistError::NegativeComponent { index: index % p.len(), value });
        }
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

/// A distribution whose parameters are graph nodes.
#[derive(Clone, Copy, Debug)]
pub enum NodeDist {
    DiagGaussian { mean: NodeId, log_var: NodeId },
    LogisticNormal { loc: NodeId, log_var: NodeId },
    Concrete { logits: NodeId, temperature: f64 },
    Bernoulli { logits: NodeId },
}

impl NodeDist {
    /// Registers the parameters of `spec` as constants. Panics for uniform families.
    pub fn from_spec(g: &mut Graph, spec: &DistSpec) -> Self {
        match spec {
            DistSpec::DiagGaussian { mean, log_var } => NodeDist::DiagGaussian {
                mean: g.constant(mean.as_matrix()),
                log_var: g.constant(log_var.as_matrix()),
            },
            DistSpec::LogisticNormal { loc, log_var } => NodeDist::LogisticNormal {
                loc: g.constant(loc.as_matrix()),
                log_var: g.constant(log_var.as_matrix()),
            },
            DistSpec::Concrete { logits, temperature } => NodeDist::Concrete {
                logits: g.constant(logits.as_matrix()),
                temperature: *temperature,
            },
            DistSpec::Bernoulli { logits } => NodeDist::Bernoulli {
                logits: g.constant(logits.as_matrix()),
            },
            DistSpec::UniformBox { .. } | DistSpec::SimplexUniform { .. } => {
                panic!("uniform families have constant densities and are not graph distributions")
            }
        }
    }

    /// Current parameter values as a plain [`DistSpec`].
    pub fn to_spec(&self, g: &Graph) -> DistSpec {
        match *self {
            NodeDist::DiagGaussian { mean, log_var } => DistSpec::DiagGaussian {
                mean: g.value(mean).clone(),
                log_var: g.value(log_var).clone(),
            },
            NodeDist::LogisticNormal { loc, log_var } => DistSpec::LogisticNormal {
                loc: g.value(loc).clone(),
                log_var: g.value(log_var).clone(),
            },
            NodeDist::Concrete { logits, temperature } => DistSpec::Concrete {
                logits: g.value(logits).clone(),
                temperature,
            },
            NodeDist::Bernoulli { logits } => DistSpec::Bernoulli {
                logits: g.value(logits).clone(),
            },
        }
    }

    fn primary(&self) -> NodeId {
        match *self {
            NodeDist::DiagGaussian { mean, .. } => mean,
            NodeDist::LogisticNormal { loc, .. } => loc,
            NodeDist::Concrete { logits, .. } | NodeDist::Bernoulli { logits } => logits,
        }
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.primary()).rows()
    }

    pub fn cols(&self, g: &Graph) -> usize {
        g.value(self.primary()).cols()
    }

    /// The noise kind [`NodeDist::rsample`] consumes, if any.
    pub fn noise_kind(&self) -> Option<NoiseKind> {
        match self {
            NodeDist::DiagGaussian { .. } | NodeDist::LogisticNormal { .. } => Some(NoiseKind::StandardNormal),
            NodeDist::Concrete { .. } => Some(NoiseKind::Gumbel),
            NodeDist::Bernoulli { .. } => None,
        }
    }

    /// Per-row log-density of `value` (`n×d`), as an `n×1` node.
    pub fn log_density(&self, g: &mut Graph, value: NodeId) -> NodeId {
        match *self {
            NodeDist::DiagGaussian { mean, log_var } => gaussian_log_density(g, value, mean, log_var),
            NodeDist::LogisticNormal { loc, log_var } => {
                // Additive logistic-normal: Gaussian on log(y_i / y_K), i < K,
                // with Jacobian Π_i 1 / y_i.
                let k = g.value(loc).cols();
                let floored = g.clamp_min(value, PROB_FLOOR);
                let log_y = g.log(floored);
                let u = log_ratios(g, log_y, k);
                let m = log_ratios(g, loc, k);
                let lv = g.slice_cols(log_var, 0, k - 1);
                let lp = gaussian_log_density(g, u, m, lv);
                let jac = g.row_sum(log_y);
                g.sub(lp, jac)
            }
            NodeDist::Concrete { logits, temperature } => {
                let k = g.value(logits).cols();
                let log_pi = g.log_softmax_rows(logits);
                let floored = g.clamp_min(value, PROB_FLOOR);
                let log_y = g.log(floored);
                let scaled = g.scale(log_y, temperature);
                let a = g.sub(log_pi, scaled);
                let lse = g.logsumexp_rows(a);
                let lse = g.scale(lse, k as f64);
                let sum_pi = g.row_sum(log_pi);
                let sum_y = g.row_sum(log_y);
                let sum_y = g.scale(sum_y, temperature + 1.0);
                let t = g.sub(sum_pi, sum_y);
                let t = g.sub(t, lse);
                let constant = simplex_uniform_log_density(k) + (k as f64 - 1.0) * temperature.ln();
                g.add_scalar(t, constant)
            }
            NodeDist::Bernoulli { logits } => {
                // x·l − softplus(l), the stable form of x log σ(l) + (1−x) log(1−σ(l)).
                let xl = g.mul(value, logits);
                let sp = g.softplus(logits);
                let d = g.sub(xl, sp);
                g.row_sum(d)
            }
        }
    }

    /// Reparameterized sample driven by `noise` (same shape as the parameters).
    pub fn rsample(&self, g: &mut Graph, noise: &Tensor) -> NodeId {
        match *self {
            NodeDist::DiagGaussian { mean, log_var } => gaussian_rsample(g, mean, log_var, noise),
            NodeDist::LogisticNormal { loc, log_var } => {
                // The last coordinate is the log-ratio reference: its noise is
                // dropped so draws follow the density above exactly.
                let mut eps = noise.as_matrix();
                let k = eps.cols();
                for row in eps.data_mut().chunks_mut(k) {
                    row[k - 1] = 0.0;
                }
                let pre = gaussian_rsample(g, loc, log_var, &eps);
                g.softmax_rows(pre)
            }
            NodeDist::Concrete { logits, temperature } => {
                let gumbel = g.constant(noise.as_matrix());
                let s = g.add(logits, gumbel);
                let s = g.scale(s, 1.0 / temperature);
                g.softmax_rows(s)
            }
            NodeDist::Bernoulli { logits } => g.sigmoid(logits),
        }
    }

    pub fn mean(&self, g: &mut Graph) -> NodeId {
        match *self {
            NodeDist::DiagGaussian { mean, .. } => mean,
            NodeDist::LogisticNormal { loc, .. } => g.softmax_rows(loc),
            NodeDist::Concrete { logits, .. } => g.softmax_rows(logits),
            NodeDist::Bernoulli { logits } => g.sigmoid(logits),
        }
    }
}

fn log_ratios(g: &mut Graph, a: NodeId, k: usize) -> NodeId {
    let head = g.slice_cols(a, 0, k - 1);
    let last = g.slice_cols(a, k - 1, k);
    let last = g.broadcast_cols(last, k - 1);
    g.sub(head, last)
}

/// Row-wise `Σ_j log N(x_j; m_j, exp(lv_j))` as an `n×1` node.
pub fn gaussian_log_density(g: &mut Graph, x: NodeId, mean: NodeId, log_var: NodeId) -> NodeId {
    let d = g.sub(x, mean);
    let sq = g.square(d);
    let neg_lv = g.neg(log_var);
    let inv_var = g.exp(neg_lv);
    let maha = g.mul(sq, inv_var);
    let t = g.add(maha, log_var);
    let t = g.add_scalar(t, LN_2PI);
    let s = g.row_sum(t);
    g.scale(s, -0.5)
}

fn gaussian_rsample(g: &mut Graph, mean: NodeId, log_var: NodeId, noise: &Tensor) -> NodeId {
    let half = g.scale(log_var, 0.5);
    let sd = g.exp(half);
    let eps = g.constant(noise.as_matrix());
    let scaled = g.mul(sd, eps);
    g.add(mean, scaled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    StandardNormal,
    Gumbel,
    /// Open interval `(0, 1)`.
    Uniform,
}

/// Where a noise draw came from: replaying the stream up to `position`
/// reproduces it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    pub seed: u64,
    pub stream: u64,
    /// Scalars drawn from the stream before this draw.
    pub position: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub kind: NoiseKind,
    pub values: Tensor,
    /// `None` for hand-constructed noise.
    pub provenance: Option<NoiseProvenance>,
}

impl NoiseDraw {
    pub fn fixed(kind: NoiseKind, values: Tensor) -> Self {
        Self {
            kind,
            values,
            provenance: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::fixed(NoiseKind::StandardNormal, Tensor::zeros(&[rows, cols]))
    }
}

/// A seeded, replayable source of noise. Streams with different ids are independent.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    stream: u64,
    position: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            position: 0,
            rng,
        }
    }

    /// A stream advanced past `position` scalars, for replaying a recorded draw.
    pub fn replay(provenance: NoiseProvenance, kind: NoiseKind) -> Self {
        let mut s = Self::new(provenance.seed, provenance.stream);
        for _ in 0..provenance.position {
            s.scalar(kind);
        }
        s
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    fn scalar(&mut self, kind: NoiseKind) -> f64 {
        self.position += 1;
        match kind {
            NoiseKind::StandardNormal => self.rng.sample(StandardNormal),
            NoiseKind::Uniform => open_unit(&mut self.rng),
            NoiseKind::Gumbel => -(-open_unit(&mut self.rng).ln()).ln(),
        }
    }

    pub fn draw(&mut self, kind: NoiseKind, rows: usize, cols: usize) -> NoiseDraw {
        let provenance = NoiseProvenance {
            seed: self.seed,
            stream: self.stream,
            position: self.position,
        };
        let data = (0..rows * cols).map(|_| self.scalar(kind)).collect();
        NoiseDraw {
            kind,
            values: Tensor::matrix(rows, cols, data),
            provenance: Some(provenance),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize) -> NoiseDraw {
        self.draw(NoiseKind::StandardNormal, rows, cols)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize) -> NoiseDraw {
        self.draw(NoiseKind::Uniform, rows, cols)
    }

    pub fn gumbel(&mut self, rows: usize, cols: usize) -> NoiseDraw {
        self.draw(NoiseKind::Gumbel, rows, cols)
    }

    /// Access to the underlying generator for non-noise randomness (shuffles).
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Uniform on the open interval (0, 1).
pub fn open_unit(rng: &mut impl Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}
