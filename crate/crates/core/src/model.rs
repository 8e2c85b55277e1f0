//! The recognition networks `q(y|x)`, `q(z|x,y)`, the optional `q(z|y)`, and
//! the decoder `p(x|y,z)`.
//!
//! Every network is a stack of dense layers followed by one or two affine
//! heads. Parameters are named `<partition>.<network>.<layer>.<weight|bias>`,
//! e.g. `phi.encoder_y.h0.weight` or `theta.decoder_x.mean.bias`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, BoundParams, DiffError, Graph, NodeId, ParamSet, Partition, Tensor};
use crate::distributions::{DistError, DistSpec, NodeDist, NoiseDraw, NoiseKind};

/// Floor added to the z encoder's standard deviation.
const Z_SD_FLOOR: f64 = 1e-6;
/// Margin keeping clamped z strictly inside the prior support.
pub const Z_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

fn config_err(field: &str, reason: impl Into<String>) -> ModelError {
    ModelError::Config {
        field: field.to_owned(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YFamily {
    LogisticNormal,
    Concrete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XFamily {
    DiagGaussian,
    Bernoulli,
}

/// Hidden stack and output nonlinearity of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Nonlinearity on the mean (or logits) head.
    pub output: Activation,
}

impl NetConfig {
    pub fn new(hidden: Vec<usize>, activation: Activation, output: Activation) -> Self {
        Self {
            hidden,
            activation,
            output,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub x_dim: usize,
    pub y_dim: usize,
    pub z_dim: usize,
    pub encoder_y: NetConfig,
    pub encoder_z: NetConfig,
    pub decoder_x: NetConfig,
    /// `q(z|y)`; present only when the auxiliary-z objective is used.
    #[serde(default)]
    pub aux_z: Option<NetConfig>,
    pub y_family: YFamily,
    pub x_family: XFamily,
    /// Concrete relaxation temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub z_lo: f64,
    pub z_hi: f64,
    /// Fixed decoder log-variance; `None` learns a log-variance head.
    #[serde(default)]
    pub decoder_log_var: Option<f64>,
}

fn default_temperature() -> f64 {
    0.5
}

impl ModelConfig {
    /// A small tanh model with logistic-normal compositions and a Gaussian decoder.
    pub fn small(x_dim: usize, y_dim: usize, z_dim: usize, hidden: usize) -> Self {
        let net = |out| NetConfig::new(vec![hidden], Activation::Tanh, out);
        Self {
            x_dim,
            y_dim,
            z_dim,
            encoder_y: net(Activation::Softmax),
            encoder_z: net(Activation::Sigmoid),
            decoder_x: net(Activation::Identity),
            aux_z: None,
            y_family: YFamily::LogisticNormal,
            x_family: XFamily::DiagGaussian,
            temperature: default_temperature(),
            z_lo: -1.5,
            z_hi: 1.5,
            decoder_log_var: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [("x_dim", self.x_dim), ("y_dim", self.y_dim), ("z_dim", self.z_dim)] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if self.y_dim < 2 {
            return Err(config_err("y_dim", "a composition needs at least two components"));
        }
        let nets = [
            ("encoder_y", Some(&self.encoder_y)),
            ("encoder_z", Some(&self.encoder_z)),
            ("decoder_x", Some(&self.decoder_x)),
            ("aux_z", self.aux_z.as_ref()),
        ];
        for (name, net) in nets {
            if let Some(net) = net {
                if net.hidden.iter().any(|&w| w == 0) {
                    return Err(config_err(&format!("{name}.hidden"), "widths must be positive"));
                }
                if net.activation == Activation::Softmax {
                    return Err(config_err(&format!("{name}.activation"), "softmax is not a hidden nonlinearity"));
                }
            }
        }
        if !(self.z_lo < self.z_hi) || !self.z_lo.is_finite() || !self.z_hi.is_finite() {
            return Err(config_err("z_lo", "z support needs finite z_lo < z_hi"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(config_err("temperature", "must be positive"));
        }
        if let Some(v) = self.decoder_log_var {
            if !v.is_finite() {
                return Err(config_err("decoder_log_var", "must be finite"));
            }
        }
        if self.x_family == XFamily::Bernoulli && self.decoder_log_var.is_some() {
            return Err(config_err("decoder_log_var", "has no meaning for a Bernoulli decoder"));
        }
        Ok(())
    }

    /// Layer shapes `(name, out, in)` for every parameterized layer, in a fixed order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut stack = |prefix: String, input: usize, net: &NetConfig, heads: &[(&str, usize)]| {
            let mut width = input;
            for (i, &h) in net.hidden.iter().enumerate() {
                out.push((format!("{prefix}.h{i}"), h, width));
                width = h;
            }
            for (head, dim) in heads {
                out.push((format!("{prefix}.{head}"), *dim, width));
            }
        };
        let (x, y, z) = (self.x_dim, self.y_dim, self.z_dim);
        let y_heads: &[(&str, usize)] = match self.y_family {
            YFamily::LogisticNormal => &[("mean", y), ("log_var", y)],
            YFamily::Concrete => &[("logits", y)],
        };
        stack("phi.encoder_y".into(), x, &self.encoder_y, y_heads);
        stack("phi.encoder_z".into(), x + y, &self.encoder_z, &[("mean", z), ("sd", z)]);
        if let Some(aux) = &self.aux_z {
            stack("phi.aux_z".into(), y, aux, &[("mean", z), ("sd", z)]);
        }
        let x_heads: Vec<(&str, usize)> = match (self.x_family, self.decoder_log_var) {
            (XFamily::Bernoulli, _) => vec![("logits", x)],
            (XFamily::DiagGaussian, Some(_)) => vec![("mean", x)],
            (XFamily::DiagGaussian, None) => vec![("mean", x), ("log_var", x)],
        };
        stack("theta.decoder_x".into(), y + z, &self.decoder_x, &x_heads);
        out
    }

    /// Glorot-uniform weights and zero biases, drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, rows, cols) in self.layers() {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let w = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
            params.insert(format!("{name}.weight"), Tensor::matrix(rows, cols, w))?;
            params.insert(format!("{name}.bias"), Tensor::zeros(&[rows]))?;
        }
        Ok(params)
    }

    /// Checks that `params` holds exactly the layers of this config with matching shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), ModelError> {
        let layers = self.layers();
        if params.len() != 2 * layers.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter tensors, found {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (name, rows, cols) in layers {
            let w = format!("{name}.weight");
            let b = format!("{name}.bias");
            match params.get(&w) {
                Some(t) if t.shape() == [rows, cols] => {}
                Some(t) => return Err(ModelError::Shape(format!("{w} has shape {:?}, expected [{rows}, {cols}]", t.shape()))),
                None => return Err(ModelError::MissingParameter(w)),
            }
            match params.get(&b) {
                Some(t) if t.len() == rows => {}
                Some(t) => return Err(ModelError::Shape(format!("{b} has shape {:?}, expected [{rows}]", t.shape()))),
                None => return Err(ModelError::MissingParameter(b)),
            }
        }
        Ok(())
    }

    /// Midpoint of the z support, the prior mean.
    pub fn z_prior_mean(&self) -> f64 {
        0.5 * (self.z_lo + self.z_hi)
    }

    /// `U(z_lo, z_hi)` over `z_dim` coordinates.
    pub fn z_prior(&self) -> DistSpec {
        DistSpec::UniformBox {
            lo: Tensor::full(&[1, self.z_dim], self.z_lo),
            hi: Tensor::full(&[1, self.z_dim], self.z_hi),
        }
    }

    /// `log p(z)` for a point inside the support.
    pub fn z_prior_log_density(&self) -> f64 {
        -(self.z_dim as f64) * (self.z_hi - self.z_lo).ln()
    }
}

/// Network evaluation on a graph with bound parameters.
pub struct Nets<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a BoundParams,
}

impl<'a> Nets<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a BoundParams) -> Self {
        Self { config, params }
    }

    fn layer(&self, g: &mut Graph, name: &str, input: NodeId) -> NodeId {
        let w = self.params.node(&format!("{name}.weight"));
        let b = self.params.node(&format!("{name}.bias"));
        g.affine(input, w, b)
    }

    fn trunk(&self, g: &mut Graph, prefix: &str, net: &NetConfig, input: NodeId) -> NodeId {
        let mut h = input;
        for i in 0..net.hidden.len() {
            let a = self.layer(g, &format!("{prefix}.h{i}"), h);
            h = net.activation.apply(g, a);
        }
        h
    }

    /// `q(y|x)` for a batch of rows.
    pub fn encode_y(&self, g: &mut Graph, x: NodeId) -> NodeDist {
        let net = &self.config.encoder_y;
        let h = self.trunk(g, "phi.encoder_y", net, x);
        match self.config.y_family {
            YFamily::LogisticNormal => {
                let a = self.layer(g, "phi.encoder_y.mean", h);
                // The logistic-normal location lives in logit space; a softmax
                // output is represented by its logarithm.
                let loc = match net.output {
                    Activation::Softmax => g.log_softmax_rows(a),
                    other => other.apply(g, a),
                };
                let log_var = self.layer(g, "phi.encoder_y.log_var", h);
                NodeDist::LogisticNormal { loc, log_var }
            }
            YFamily::Concrete => {
                let a = self.layer(g, "phi.encoder_y.logits", h);
                let logits = match net.output {
                    Activation::Softmax => g.log_softmax_rows(a),
                    other => other.apply(g, a),
                };
                NodeDist::Concrete {
                    logits,
                    temperature: self.config.temperature,
                }
            }
        }
    }

    fn z_head(&self, g: &mut Graph, prefix: &str, net: &NetConfig, input: NodeId) -> NodeDist {
        let (lo, hi) = (self.config.z_lo, self.config.z_hi);
        let h = self.trunk(g, prefix, net, input);
        let a = self.layer(g, &format!("{prefix}.mean"), h);
        let s = g.sigmoid(a);
        let s = g.scale(s, hi - lo);
        let mean = g.add_scalar(s, lo);
        // Soft cap: sd = softplus(b)·c / (softplus(b) + c) < c, so mean ± 6·sd
        // spans at most twice the support width.
        let cap = (hi - lo) / 6.0;
        let b = self.layer(g, &format!("{prefix}.sd"), h);
        let sp = g.softplus(b);
        let num = g.scale(sp, cap);
        let den = g.add_scalar(sp, cap);
        let sd = g.div(num, den);
        let sd = g.add_scalar(sd, Z_SD_FLOOR);
        let log_sd = g.log(sd);
        let log_var = g.scale(log_sd, 2.0);
        NodeDist::DiagGaussian { mean, log_var }
    }

    /// `q(z|x,y)`.
    pub fn encode_z(&self, g: &mut Graph, x: NodeId, y: NodeId) -> NodeDist {
        let input = g.concat_cols(&[x, y]);
        self.z_head(g, "phi.encoder_z", &self.config.encoder_z, input)
    }

    /// `q(z|y)`. Panics when the config has no auxiliary network.
    pub fn aux_z(&self, g: &mut Graph, y: NodeId) -> NodeDist {
        let net = self.config.aux_z.as_ref().expect("auxiliary z network not configured");
        self.z_head(g, "phi.aux_z", net, y)
    }

    /// `p(x|y,z)`.
    pub fn decode_x(&self, g: &mut Graph, y: NodeId, z: NodeId) -> NodeDist {
        let net = &self.config.decoder_x;
        let input = g.concat_cols(&[y, z]);
        let h = self.trunk(g, "theta.decoder_x", net, input);
        match self.config.x_family {
            XFamily::Bernoulli => {
                let a = self.layer(g, "theta.decoder_x.logits", h);
                NodeDist::Bernoulli {
                    logits: net.output.apply(g, a),
                }
            }
            XFamily::DiagGaussian => {
                let a = self.layer(g, "theta.decoder_x.mean", h);
                let mean = net.output.apply(g, a);
                let log_var = match self.config.decoder_log_var {
                    Some(v) => {
                        let rows = g.value(mean).rows();
                        g.constant(Tensor::full(&[rows, self.config.x_dim], v))
                    }
                    None => self.layer(g, "theta.decoder_x.log_var", h),
                };
                NodeDist::DiagGaussian { mean, log_var }
            }
        }
    }

    /// The noise kind and width `encode_y`'s sampler consumes.
    pub fn y_noise_kind(&self) -> NoiseKind {
        match self.config.y_family {
            YFamily::LogisticNormal => NoiseKind::StandardNormal,
            YFamily::Concrete => NoiseKind::Gumbel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    Mean,
    Sample,
}

/// A configured model with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Self { config, params })
    }

    fn input(&self, t: &Tensor, dim: usize, what: &str) -> Result<Tensor, ModelError> {
        if t.cols() != dim || t.is_empty() {
            return Err(ModelError::Shape(format!("{what} needs {dim} columns, got shape {:?}", t.shape())));
        }
        Ok(t.as_matrix())
    }

    fn with_graph<T>(&self, f: impl FnOnce(&mut Graph, &Nets) -> T) -> T {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let nets = Nets::new(&self.config, &bound);
        f(&mut g, &nets)
    }

    pub fn encode_y(&self, x: &Tensor) -> Result<DistSpec, ModelError> {
        let x = self.input(x, self.config.x_dim, "x")?;
        Ok(self.with_graph(|g, n| {
            let xn = g.constant(x);
            n.encode_y(g, xn).to_spec(g)
        }))
    }

    /// Mean of `q(y|x)`, the composition prediction.
    pub fn predict_y(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.encode_y(x)?.mean())
    }

    pub fn encode_z(&self, x: &Tensor, y: &Tensor) -> Result<DistSpec, ModelError> {
        let x = self.input(x, self.config.x_dim, "x")?;
        let y = self.input(y, self.config.y_dim, "y")?;
        check_rows(&x, &y)?;
        Ok(self.with_graph(|g, n| {
            let (xn, yn) = (g.constant(x), g.constant(y));
            n.encode_z(g, xn, yn).to_spec(g)
        }))
    }

    pub fn aux_z(&self, y: &Tensor) -> Result<DistSpec, ModelError> {
        if self.config.aux_z.is_none() {
            return Err(config_err("aux_z", "auxiliary z network not configured"));
        }
        let y = self.input(y, self.config.y_dim, "y")?;
        Ok(self.with_graph(|g, n| {
            let yn = g.constant(y);
            n.aux_z(g, yn).to_spec(g)
        }))
    }

    pub fn decode_x(&self, y: &Tensor, z: &Tensor) -> Result<DistSpec, ModelError> {
        let y = self.input(y, self.config.y_dim, "y")?;
        let z = self.input(z, self.config.z_dim, "z")?;
        check_rows(&y, &z)?;
        Ok(self.with_graph(|g, n| {
            let (yn, zn) = (g.constant(y), g.constant(z));
            n.decode_x(g, yn, zn).to_spec(g)
        }))
    }

    /// Decoder mean, or a draw from the decoder. Gaussian draws consume
    /// standard-normal noise; Bernoulli draws consume uniform noise and
    /// threshold it against the pixel probabilities.
    pub fn generate_conditional(
        &self,
        y: &Tensor,
        z: &Tensor,
        mode: GenerateMode,
        noise: Option<&NoiseDraw>,
    ) -> Result<Tensor, ModelError> {
        let dist = self.decode_x(y, z)?;
        match mode {
            GenerateMode::Mean => Ok(dist.mean()),
            GenerateMode::Sample => {
                let noise = noise.ok_or_else(|| ModelError::Shape("sampling requires noise".into()))?;
                match dist {
                    DistSpec::Bernoulli { .. } => {
                        let p = dist.mean();
                        if noise.kind != NoiseKind::Uniform || noise.values.len() != p.len() {
                            return Err(ModelError::Shape("Bernoulli draws need uniform noise of the output size".into()));
                        }
                        let data = p.data().iter().zip(noise.values.data()).map(|(p, u)| f64::from(u < p)).collect();
                        Ok(Tensor::new(p.shape().to_vec(), data).expect("same shape"))
                    }
                    other => Ok(crate::distributions::rsample(&other, noise)?),
                }
            }
        }
    }

    /// Draws `z ~ q(z|x,y)`, first drawing `y ~ q(y|x)` when `y` is absent.
    /// The result is clamped into `[z_lo + 1e-6, z_hi - 1e-6]`.
    pub fn infer_nuisance(
        &self,
        x: &Tensor,
        y: Option<&Tensor>,
        y_noise: Option<&NoiseDraw>,
        z_noise: &NoiseDraw,
    ) -> Result<Tensor, ModelError> {
        let y = match y {
            Some(y) => y.as_matrix(),
            None => {
                let noise = y_noise.ok_or_else(|| ModelError::Shape("inferring y requires noise".into()))?;
                crate::distributions::rsample(&self.encode_y(x)?, noise)?.as_matrix()
            }
        };
        let q = self.encode_z(x, &y)?;
        let z = crate::distributions::rsample(&q, z_noise)?;
        Ok(self.clamp_z(&z))
    }

    pub fn clamp_z(&self, z: &Tensor) -> Tensor {
        let (lo, hi) = (self.config.z_lo + Z_MARGIN, self.config.z_hi - Z_MARGIN);
        z.map(|v| v.clamp(lo, hi))
    }

    /// Parameters of one partition.
    pub fn partition(&self, which: Partition) -> Vec<&str> {
        self.params.names().filter(|n| Partition::of(n) == Some(which)).collect()
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<(), ModelError> {
        self.params.save(dir.join("checkpoint.bin")).map_err(DiffError::from)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(dir.join("model.json"), json).map_err(DiffError::from)?;
        Ok(())
    }
}

fn check_rows(a: &Tensor, b: &Tensor) -> Result<(), ModelError> {
    if a.rows() != b.rows() {
        return Err(ModelError::Shape(format!("{} rows vs {} rows", a.rows(), b.rows())));
    }
    Ok(())
}
