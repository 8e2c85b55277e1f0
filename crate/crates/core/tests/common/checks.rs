//! Checks shared by the focused test files and the acceptance target.

#![allow(dead_code)]

use uvae::diffcore::{compare_gradients, finite_difference_gradient, value_and_gradient, BoundParams, Graph, NodeId, ParamSet, Tensor};
use uvae::distributions::{rsample, DistSpec, NoiseKind, NoiseStream};
use uvae::model::{Model, ModelConfig, Nets};
use uvae::objectives::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    LabeledForward,
    UnlabeledForward,
    LabeledReverse,
    UnfeaturedLatent,
    UnfeaturedObserved,
    UnfeaturedAux,
    AuxConsistency,
    CompositionLoss,
    ObservationLoss,
    Combined,
    CombinedAux,
}

pub const ALL_TERMS: [Term; 11] = [
    Term::LabeledForward,
    Term::UnlabeledForward,
    Term::LabeledReverse,
    Term::UnfeaturedLatent,
    Term::UnfeaturedObserved,
    Term::UnfeaturedAux,
    Term::AuxConsistency,
    Term::CompositionLoss,
    Term::ObservationLoss,
    Term::Combined,
    Term::CombinedAux,
];

/// Fixed inputs and noise for one gradient check.
pub struct Fixture {
    pub batch: Batch,
    pub noise: BatchNoise,
    pub noise_aux: BatchNoise,
}

pub fn fixture(config: &ModelConfig, seed: u64) -> Fixture {
    let mut s = NoiseStream::new(seed, 99);
    let n = 2;
    let x = s.normal(n, config.x_dim).values;
    let ux = s.normal(n, config.x_dim).values;
    let simplex = |s: &mut NoiseStream| {
        let u = s.uniform(n, config.y_dim).values;
        let mut e = u.map(|v| -v.ln());
        for row in e.data_mut().chunks_mut(config.y_dim) {
            let t: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= t);
        }
        e
    };
    let y = simplex(&mut s);
    let fy = simplex(&mut s);
    let fz = s.uniform(n, config.z_dim).values.map(|u| config.z_lo + (config.z_hi - config.z_lo) * u);
    let batch = Batch {
        labeled_x: x,
        labeled_y: y,
        unlabeled_x: ux,
        unfeatured_y: fy,
        unfeatured_z: Some(fz),
    };
    let counts = batch.counts();
    let mut obj = ObjectiveConfig::new(Coefficients::CRISM);
    obj.variant = UnfeaturedVariant::LatentZ;
    let latent = BatchNoise::draw(&mut s, config, &obj, counts);
    obj.variant = UnfeaturedVariant::AuxZ;
    let aux = BatchNoise::draw(&mut s, config, &obj, counts);
    Fixture {
        batch,
        noise: latent,
        noise_aux: aux,
    }
}

fn build(term: Term, g: &mut Graph, nets: &Nets, f: &Fixture) -> NodeId {
    let b = &f.batch;
    let lx = g.constant(b.labeled_x.clone());
    let ly = g.constant(b.labeled_y.clone());
    let zp = |u: &Tensor| prior_z_from_uniform(nets.config, u);
    match term {
        Term::LabeledForward => fxy_terms(g, nets, lx, ly, &f.noise.fxy_z).sum(g, 1),
        Term::UnlabeledForward => {
            let ux = g.constant(b.unlabeled_x.clone());
            fx_terms(g, nets, ux, &f.noise.fx_y, &f.noise.fx_z).sum(g, 1)
        }
        Term::LabeledReverse => rxy_terms(g, nets, lx, ly, &zp(&f.noise.rxy_z), 10.0).sum(g, 1),
        Term::UnfeaturedLatent => {
            let fy = g.constant(b.unfeatured_y.clone());
            let z = zp(&f.noise.ry_z);
            ry_terms(g, nets, fy, ZSource::Prior(&z), &f.noise.ry_x, 10.0).sum(g, 1)
        }
        Term::UnfeaturedObserved => {
            let fy = g.constant(b.unfeatured_y.clone());
            let z = b.unfeatured_z.clone().unwrap();
            ry_terms(g, nets, fy, ZSource::Observed(&z), &f.noise.ry_x, 10.0).sum(g, 1)
        }
        Term::UnfeaturedAux => {
            let fy = g.constant(b.unfeatured_y.clone());
            ry_terms(g, nets, fy, ZSource::Aux(&f.noise_aux.ry_z), &f.noise_aux.ry_x, 10.0).sum(g, 1)
        }
        Term::AuxConsistency => {
            let fy = g.constant(b.unfeatured_y.clone());
            let kl = aux_kl_node(g, nets, fy, 2, &f.noise_aux.aux_z, &f.noise_aux.aux_x);
            g.sum(kl)
        }
        Term::CompositionLoss => {
            let l = loss_y_node(g, nets, lx, &b.labeled_y);
            g.mean(l)
        }
        Term::ObservationLoss => {
            let l = loss_x_node(g, nets, lx, ly, &zp(&f.noise.rxy_z));
            g.mean(l)
        }
        Term::Combined => {
            let mut obj = ObjectiveConfig::new(Coefficients { alpha_f: 1.0, alpha_f_d: 1.0, alpha_r: 0.5, alpha_r_d: 1.0 });
            obj.variant = UnfeaturedVariant::LatentZ;
            build_objective(g, nets, b, &obj, &f.noise).j
        }
        Term::CombinedAux => {
            let mut obj = ObjectiveConfig::new(Coefficients { alpha_f: 1.0, alpha_f_d: 1.0, alpha_r: 0.5, alpha_r_d: 1.0 });
            obj.variant = UnfeaturedVariant::AuxZ;
            build_objective(g, nets, b, &obj, &f.noise_aux).j
        }
    }
}

/// Analytic gradient of `term` against central differences (step 1e-6),
/// relative 1e-4 with an absolute floor of 1e-8.
pub fn gradient_check(model: &Model, term: Term, fix: &Fixture) -> Result<(), String> {
    let config = &model.config;
    let (_, analytic) = value_and_gradient(&model.params, |g: &mut Graph, p: &BoundParams| {
        let nets = Nets::new(config, p);
        build(term, g, &nets, fix)
    })
    .map_err(|e| format!("{term:?}: {e}"))?;
    let numeric = finite_difference_gradient(&model.params, 1e-6, |p: &ParamSet| {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let nets = Nets::new(config, &bound);
        let out = build(term, &mut g, &nets, fix);
        g.value(out).item()
    });
    match compare_gradients(&analytic, &numeric, 1e-4, 1e-8) {
        None => Ok(()),
        Some((name, i, a, n)) => Err(format!("{term:?}: {name}[{i}] analytic {a} vs numeric {n}")),
    }
}

/// Exact `log p(x)` for a decoder `x = w z + b + σ ε` with `z ~ U(lo, hi)`.
pub fn linear_gaussian_log_evidence(x: &[f64], w: &[f64], b: &[f64], sigma: f64, lo: f64, hi: f64) -> f64 {
    let d = x.len() as f64;
    let r: Vec<f64> = x.iter().zip(b).map(|(x, b)| x - b).collect();
    let ww: f64 = w.iter().map(|v| v * v).sum();
    let wr: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let z_star = wr / ww;
    let s = sigma / ww.sqrt();
    let phi = |t: f64| 0.5 * (1.0 + libm::erf(t / std::f64::consts::SQRT_2));
    let mass = phi((hi - z_star) / s) - phi((lo - z_star) / s);
    -0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - (rr - wr * wr / ww) / (2.0 * sigma * sigma)
        + (s * (2.0 * std::f64::consts::PI).sqrt() * mass).ln()
        - (hi - lo).ln()
}

pub struct BoundCheck {
    pub labeled_mean: f64,
    pub labeled_se: f64,
    pub labeled_exact: f64,
    pub unlabeled_mean: f64,
    pub unlabeled_se: f64,
    pub unlabeled_exact: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.labeled_mean <= self.labeled_exact + 3.0 * self.labeled_se
            && self.unlabeled_mean <= self.unlabeled_exact + 3.0 * self.unlabeled_se
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Forward bounds of a linear-Gaussian decoder that ignores `y`, estimated
/// from `samples` single-sample draws, against the exact log-evidence.
pub fn bound_check(samples: usize, seed: u64) -> BoundCheck {
    let (w, b, sigma) = ([0.8, -0.5, 0.3], [0.1, 0.2, -0.3], 0.4f64);
    let mut cfg = ModelConfig::small(3, 3, 1, 4);
    cfg.decoder_x.hidden = vec![];
    cfg.decoder_log_var = Some(2.0 * sigma.ln());
    let mut m = Model::init(cfg.clone(), seed).unwrap();
    let dw = m.params.get_mut("theta.decoder_x.mean.weight").unwrap();
    // Columns: y (3) then z (1).
    for (j, wj) in w.iter().enumerate() {
        dw.data_mut()[j * 4..j * 4 + 4].copy_from_slice(&[0.0, 0.0, 0.0, *wj]);
    }
    m.params.get_mut("theta.decoder_x.mean.bias").unwrap().data_mut().copy_from_slice(&b);

    let x = [0.5, -0.1, -0.2];
    let y = [0.2, 0.5, 0.3];
    let log_py = 2f64.ln();
    let exact_x = linear_gaussian_log_evidence(&x, &w, &b, sigma, cfg.z_lo, cfg.z_hi);

    let mut stream = NoiseStream::new(seed, 7);
    let xs = Tensor::matrix(samples, 3, x.repeat(samples));
    let ys = Tensor::matrix(samples, 3, y.repeat(samples));
    let mut g = Graph::new();
    let bound = m.params.bind(&mut g);
    let nets = Nets::new(&cfg, &bound);
    let xn = g.constant(xs);
    let yn = g.constant(ys);
    let eps = stream.normal(samples, 1).values;
    let t = fxy_terms(&mut g, &nets, xn, yn, &eps);
    let total = t.total(&mut g);
    let (lm, lse) = mean_se(g.value(total).data());

    let ey = stream.draw(NoiseKind::StandardNormal, samples, 3).values;
    let ez = stream.normal(samples, 1).values;
    let t = fx_terms(&mut g, &nets, xn, &ey, &ez);
    let total = t.total(&mut g);
    let (um, use_) = mean_se(g.value(total).data());
    BoundCheck {
        labeled_mean: lm,
        labeled_se: lse,
        labeled_exact: exact_x + log_py,
        unlabeled_mean: um,
        unlabeled_se: use_,
        unlabeled_exact: exact_x,
    }
}

/// One sampler statistic against its exact value.
pub struct Stat {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub se: f64,
}

impl Stat {
    pub fn within(&self, k: f64) -> bool {
        (self.observed - self.expected).abs() <= k * self.se
    }
}

/// Diagonal-Gaussian means and variances, and Concrete argmax frequencies,
/// from `n` reparameterized draws each.
pub fn sampler_stats(n: usize, seed: u64) -> Vec<Stat> {
    let mut out = Vec::new();
    let mut stream = NoiseStream::new(seed, 3);
    let (mu, var) = ([1.0, -2.0], [4.0, 0.25]);
    let g = DistSpec::DiagGaussian {
        mean: Tensor::matrix(n, 2, mu.repeat(n)),
        log_var: Tensor::matrix(n, 2, var.map(f64::ln).repeat(n)),
    };
    let s = rsample(&g, &stream.normal(n, 2)).unwrap();
    for j in 0..2 {
        let col: Vec<f64> = s.row_iter().map(|r| r[j]).collect();
        let (m, _) = mean_se(&col);
        let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        out.push(Stat { name: format!("gaussian mean[{j}]"), observed: m, expected: mu[j], se: (var[j] / n as f64).sqrt() });
        out.push(Stat { name: format!("gaussian variance[{j}]"), observed: v, expected: var[j], se: var[j] * (2.0 / (n as f64 - 1.0)).sqrt() });
    }
    let logits = [1.0, 0.0, -0.5, 2.0];
    let c = DistSpec::Concrete { logits: Tensor::matrix(n, 4, logits.repeat(n)), temperature: 0.5 };
    let s = rsample(&c, &stream.gumbel(n, 4)).unwrap();
    let mut counts = [0usize; 4];
    for r in s.row_iter() {
        counts[r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0] += 1;
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for k in 0..4 {
        let p = logits[k].exp() / z;
        out.push(Stat { name: format!("concrete argmax frequency[{k}]"), observed: counts[k] as f64 / n as f64, expected: p, se: (p * (1.0 - p) / n as f64).sqrt() });
    }
    out
}
