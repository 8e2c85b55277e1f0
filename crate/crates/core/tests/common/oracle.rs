//! Scalar re-derivation of every bound for a pinned tiny model
//! (x_dim = 2, y_dim = 2, z_dim = 1, one hidden tanh unit per network).
//!
//! Written with plain loops and closed-form densities, sharing no code with
//! the library beyond the parameter values it is handed.

#![allow(dead_code)]

use std::f64::consts::PI;

pub const LO: f64 = -1.5;
pub const HI: f64 = 1.5;
pub const ETA: f64 = 1e-9;

/// Weights of one network: one hidden unit, then heads.
#[derive(Clone, Debug)]
pub struct Net {
    pub hw: Vec<f64>,
    pub hb: f64,
    /// Per head: (weights on the hidden unit, biases), one entry per output.
    pub heads: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Net {
    fn hidden(&self, input: &[f64]) -> f64 {
        let a: f64 = self.hw.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + self.hb;
        a.tanh()
    }

    fn head(&self, k: usize, h: f64) -> Vec<f64> {
        let (w, b) = &self.heads[k];
        w.iter().zip(b).map(|(w, b)| w * h + b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Pinned {
    pub enc_y: Net,
    pub enc_z: Net,
    pub aux: Net,
    pub dec: Net,
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
    v.iter().map(|a| a - lse).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    log_softmax(v).into_iter().map(f64::exp).collect()
}

pub fn gauss_logpdf(x: &[f64], m: &[f64], lv: &[f64]) -> f64 {
    x.iter()
        .zip(m)
        .zip(lv)
        .map(|((x, m), lv)| -0.5 * (2.0 * PI).ln() - 0.5 * lv - (x - m).powi(2) / (2.0 * lv.exp()))
        .sum()
}

/// Additive logistic-normal density on the simplex.
pub fn logistic_normal_logpdf(y: &[f64], loc: &[f64], lv: &[f64]) -> f64 {
    let k = y.len();
    let ly: Vec<f64> = y.iter().map(|v| v.max(ETA).ln()).collect();
    let mut total = 0.0;
    for i in 0..k - 1 {
        let u = ly[i] - ly[k - 1];
        let m = loc[i] - loc[k - 1];
        total += -0.5 * (2.0 * PI * lv[i].exp()).ln() - (u - m).powi(2) / (2.0 * lv[i].exp());
    }
    total - ly.iter().sum::<f64>()
}

/// `log p(z)` under `U(LO, HI)`.
pub fn log_prior_z() -> f64 {
    -(HI - LO).ln()
}

/// `log p(y)` under Dir(1) for K = 2.
pub fn log_prior_y() -> f64 {
    0.0
}

pub fn log_q_x(gamma: f64) -> f64 {
    -2.0 * (2.0 * gamma).ln()
}

impl Pinned {
    /// (location in logit space, log-variance) of `q(y|x)`.
    pub fn q_y(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.enc_y.hidden(x);
        (log_softmax(&self.enc_y.head(0, h)), self.enc_y.head(1, h))
    }

    pub fn y_mean(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.q_y(x).0)
    }

    fn z_head(net: &Net, input: &[f64]) -> (f64, f64) {
        let h = net.hidden(input);
        let mean = LO + (HI - LO) * sigmoid(net.head(0, h)[0]);
        let s = softplus(net.head(1, h)[0]);
        let c = (HI - LO) / 6.0;
        let sd = s * c / (s + c) + 1e-6;
        (mean, 2.0 * sd.ln())
    }

    /// (mean, log-variance) of `q(z|x,y)`.
    pub fn q_z(&self, x: &[f64], y: &[f64]) -> (f64, f64) {
        Self::z_head(&self.enc_z, &[x[0], x[1], y[0], y[1]][..])
    }

    pub fn q_aux(&self, y: &[f64]) -> (f64, f64) {
        Self::z_head(&self.aux, y)
    }

    /// (mean, log-variance) of `p(x|y,z)`.
    pub fn p_x(&self, y: &[f64], z: f64) -> (Vec<f64>, Vec<f64>) {
        let h = self.dec.hidden(&[y[0], y[1], z]);
        (self.dec.head(0, h), self.dec.head(1, h))
    }

    fn log_q_y(&self, y: &[f64], x: &[f64]) -> f64 {
        let (loc, lv) = self.q_y(x);
        logistic_normal_logpdf(y, &loc, &lv)
    }

    fn log_q_z(&self, z: f64, x: &[f64], y: &[f64]) -> f64 {
        let (m, lv) = self.q_z(x, y);
        gauss_logpdf(&[z], &[m], &[lv])
    }

    fn log_p_x(&self, x: &[f64], y: &[f64], z: f64) -> f64 {
        let (m, lv) = self.p_x(y, z);
        gauss_logpdf(x, &m, &lv)
    }

    pub fn fxy(&self, x: &[f64], y: &[f64], eps: f64) -> f64 {
        let (m, lv) = self.q_z(x, y);
        let z = m + (0.5 * lv).exp() * eps;
        self.log_p_x(x, y, z) - self.log_q_z(z, x, y) + log_prior_y() + log_prior_z()
    }

    pub fn fx(&self, x: &[f64], eps_y: &[f64], eps_z: f64) -> f64 {
        let (loc, lv) = self.q_y(x);
        // Log-ratios against the last coordinate: u_i = loc_i - loc_K + sd_i·ε_i.
        let k = loc.len();
        let mut pre: Vec<f64> = (0..k - 1).map(|i| loc[i] - loc[k - 1] + (0.5 * lv[i]).exp() * eps_y[i]).collect();
        pre.push(0.0);
        let y = softmax(&pre);
        let (m, lvz) = self.q_z(x, &y);
        let z = m + (0.5 * lvz).exp() * eps_z;
        self.log_p_x(x, &y, z) - logistic_normal_logpdf(&y, &loc, &lv) - self.log_q_z(z, x, &y) + log_prior_y() + log_prior_z()
    }

    pub fn rxy(&self, x: &[f64], y: &[f64], u: f64, gamma: f64) -> f64 {
        let z = LO + (HI - LO) * u;
        self.log_q_y(y, x) + self.log_q_z(z, x, y) - log_prior_z() + log_q_x(gamma)
    }

    /// Decoder draw `x = μ + σ ε`.
    fn draw_x(&self, y: &[f64], z: f64, eps: &[f64]) -> Vec<f64> {
        let (m, lv) = self.p_x(y, z);
        m.iter().zip(&lv).zip(eps).map(|((m, v), e)| m + (0.5 * v).exp() * e).collect()
    }

    fn reverse_core(&self, y: &[f64], z: f64, eps_x: &[f64], gamma: f64) -> f64 {
        let x = self.draw_x(y, z, eps_x);
        self.log_q_y(y, &x) + self.log_q_z(z, &x, y) - self.log_p_x(&x, y, z) + log_q_x(gamma)
    }

    pub fn ry_latent(&self, y: &[f64], u: f64, eps_x: &[f64], gamma: f64) -> f64 {
        let z = LO + (HI - LO) * u;
        self.reverse_core(y, z, eps_x, gamma) - log_prior_z()
    }

    pub fn ry_observed(&self, y: &[f64], z: f64, eps_x: &[f64], gamma: f64) -> f64 {
        self.reverse_core(y, z, eps_x, gamma)
    }

    pub fn ry_aux(&self, y: &[f64], eps_z: f64, eps_x: &[f64], gamma: f64) -> f64 {
        let (m, lv) = self.q_aux(y);
        let z = m + (0.5 * lv).exp() * eps_z;
        self.reverse_core(y, z, eps_x, gamma) - gauss_logpdf(&[z], &[m], &[lv])
    }

    /// `(1/S) Σ_s [log q(z_s|y) - log (1/S) Σ_t q(z_s | x_t, y)]`.
    pub fn aux_kl(&self, y: &[f64], eps_z: &[f64], eps_x: &[Vec<f64>]) -> f64 {
        let s = eps_z.len();
        let (m, lv) = self.q_aux(y);
        let zs: Vec<f64> = eps_z.iter().map(|e| m + (0.5 * lv).exp() * e).collect();
        let xs: Vec<Vec<f64>> = zs.iter().zip(eps_x).map(|(z, e)| self.draw_x(y, *z, e)).collect();
        let mut total = 0.0;
        for z in &zs {
            let mix: f64 = xs.iter().map(|x| self.log_q_z(*z, x, y).exp()).sum::<f64>() / s as f64;
            total += gauss_logpdf(&[*z], &[m], &[lv]) - mix.ln();
        }
        total / s as f64
    }

    pub fn loss_y(&self, x: &[f64], y: &[f64]) -> f64 {
        let ybar = self.y_mean(x);
        y.iter().zip(&ybar).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q.max(ETA)).ln()).sum()
    }

    pub fn loss_x(&self, x: &[f64], y: &[f64], u: f64) -> f64 {
        let z = LO + (HI - LO) * u;
        let (m, _) = self.p_x(y, z);
        m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum()
    }
}

/// The pinned weights.
pub fn pinned() -> Pinned {
    Pinned {
        enc_y: Net {
            hw: vec![0.7, -0.4],
            hb: 0.1,
            heads: vec![(vec![1.3, -0.6], vec![0.2, -0.1]), (vec![0.5, -0.3], vec![-0.4, 0.25])],
        },
        enc_z: Net {
            hw: vec![0.35, -0.8, 0.6, -0.2],
            hb: -0.15,
            heads: vec![(vec![1.1], vec![0.05]), (vec![-0.7], vec![0.3])],
        },
        aux: Net {
            hw: vec![0.9, -0.5],
            hb: 0.2,
            heads: vec![(vec![-0.6], vec![0.1]), (vec![0.4], vec![-0.2])],
        },
        dec: Net {
            hw: vec![0.45, -0.65, 0.8],
            hb: 0.05,
            heads: vec![(vec![1.2, -0.9], vec![0.3, -0.2]), (vec![0.6, -0.4], vec![-0.5, 0.1])],
        },
    }
}
