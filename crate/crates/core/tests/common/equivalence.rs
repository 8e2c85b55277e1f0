//! Fixed inputs shared by the oracle comparisons.

use super::oracle::pinned;
use super::{pinned_model, row};
use uvae::diffcore::Tensor;
use uvae::distributions::{DistSpec, NoiseDraw, NoiseKind};
use uvae::objectives::*;

pub const GAMMA: f64 = 10.0;
pub const X1: [f64; 2] = [0.4, -1.1];
pub const Y1: [f64; 2] = [0.3, 0.7];
pub const X2: [f64; 2] = [-0.8, 0.25];
pub const Y2: [f64; 2] = [0.85, 0.15];

pub fn normal(v: &[f64]) -> NoiseDraw {
    NoiseDraw::fixed(NoiseKind::StandardNormal, Tensor::matrix(1, v.len(), v.to_vec()))
}

pub fn normal_rows(rows: usize, v: &[f64]) -> NoiseDraw {
    NoiseDraw::fixed(NoiseKind::StandardNormal, Tensor::matrix(rows, v.len() / rows, v.to_vec()))
}

pub fn uniform(v: &[f64]) -> NoiseDraw {
    NoiseDraw::fixed(NoiseKind::Uniform, Tensor::matrix(v.len(), 1, v.to_vec()))
}

pub fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "library {a} vs oracle {b}");
}

/// Two labeled pairs, one unlabeled observation, one unfeatured composition.
pub fn pinned_batch(z_u: f64) -> Batch {
    Batch {
        labeled_x: Tensor::matrix(2, 2, [X1, X2].concat()),
        labeled_y: Tensor::matrix(2, 2, [Y1, Y2].concat()),
        unlabeled_x: row(&[0.15, 0.6]),
        unfeatured_y: row(&[0.95, 0.05]),
        unfeatured_z: Some(row(&[z_u])),
    }
}

pub fn pinned_noise(variant: UnfeaturedVariant) -> BatchNoise {
    let col = |v: &[f64]| Tensor::matrix(v.len(), 1, v.to_vec());
    BatchNoise {
        fxy_z: col(&[0.37, -0.52]),
        rxy_z: col(&[0.62, 0.1]),
        fx_y: row(&[-0.6, 1.2]),
        fx_z: col(&[0.9]),
        ry_z: match variant {
            UnfeaturedVariant::ObservedZ => Tensor::zeros(&[0, 1]),
            _ => col(&[0.21]),
        },
        ry_x: row(&[0.4, -0.7]),
        aux_z: col(&[0.3, -1.1]),
        aux_x: Tensor::matrix(2, 2, vec![0.2, 0.9, -0.5, 0.1]),
    }
}

pub fn oracle_total(variant: UnfeaturedVariant, a: Coefficients, z_u: f64) -> f64 {
    let o = pinned();
    let yu = [0.95, 0.05];
    let mut j = 0.0;
    j += a.alpha_f * (o.fxy(&X1, &Y1, 0.37) + o.fxy(&X2, &Y2, -0.52));
    j -= a.alpha_f_d * 0.5 * (o.loss_y(&X1, &Y1) + o.loss_y(&X2, &Y2));
    j += a.alpha_r * (o.rxy(&X1, &Y1, 0.62, GAMMA) + o.rxy(&X2, &Y2, 0.1, GAMMA));
    j -= a.alpha_r_d * 0.5 * (o.loss_x(&X1, &Y1, 0.62) + o.loss_x(&X2, &Y2, 0.1));
    j += a.alpha_f * o.fx(&[0.15, 0.6], &[-0.6, 1.2], 0.9);
    j += a.alpha_r
        * match variant {
            UnfeaturedVariant::LatentZ => o.ry_latent(&yu, 0.21, &[0.4, -0.7], GAMMA),
            UnfeaturedVariant::ObservedZ => o.ry_observed(&yu, z_u, &[0.4, -0.7], GAMMA),
            UnfeaturedVariant::AuxZ => o.ry_aux(&yu, 0.21, &[0.4, -0.7], GAMMA),
        };
    if variant == UnfeaturedVariant::AuxZ {
        j -= o.aux_kl(&yu, &[0.3, -1.1], &[vec![0.2, 0.9], vec![-0.5, 0.1]]);
    }
    j
}

/// `(operation, library value, oracle value)` for every objective operation
/// on the pinned model.
pub fn comparisons() -> Vec<(String, f64, f64)> {
    let m = pinned_model();
    let o = pinned();
    let mut out: Vec<(String, f64, f64)> = Vec::new();
    let mut push = |name: &str, a: f64, b: f64| out.push((name.to_owned(), a, b));
    if let DistSpec::LogisticNormal { loc, log_var } = m.encode_y(&row(&X1)).unwrap() {
        let (l, v) = o.q_y(&X1);
        for i in 0..2 {
            push("q(y|x) location", loc.data()[i], l[i]);
            push("q(y|x) log-variance", log_var.data()[i], v[i]);
        }
    }
    if let DistSpec::DiagGaussian { mean, log_var } = m.encode_z(&row(&X1), &row(&Y1)).unwrap() {
        let (a, b) = o.q_z(&X1, &Y1);
        push("q(z|x,y) mean", mean.item(), a);
        push("q(z|x,y) log-variance", log_var.item(), b);
    }
    if let DistSpec::DiagGaussian { mean, log_var } = m.decode_x(&row(&Y1), &row(&[0.3])).unwrap() {
        let (a, b) = o.p_x(&Y1, 0.3);
        for i in 0..2 {
            push("p(x|y,z) mean", mean.data()[i], a[i]);
            push("p(x|y,z) log-variance", log_var.data()[i], b[i]);
        }
    }
    let e = elbo_forward_labeled(&m, &row(&X1), &row(&Y1), &normal(&[0.37])).unwrap();
    push("forward labeled bound", e.value, o.fxy(&X1, &Y1, 0.37));
    let e = elbo_forward_unlabeled(&m, &row(&X2), &normal(&[-0.6, 1.2]), &normal(&[0.9])).unwrap();
    push("forward unlabeled bound", e.value, o.fx(&X2, &[-0.6, 1.2], 0.9));
    let e = elbo_reverse_labeled(&m, &row(&X1), &row(&Y1), &uniform(&[0.62]), GAMMA).unwrap();
    push("reverse labeled bound", e.value, o.rxy(&X1, &Y1, 0.62, GAMMA));
    let eps_x = normal(&[0.4, -0.7]);
    let e = elbo_reverse_unfeatured(&m, &row(&Y2), ZInput::Latent(&uniform(&[0.21])), &eps_x, GAMMA).unwrap();
    push("reverse unfeatured bound, latent z", e.value, o.ry_latent(&Y2, 0.21, &[0.4, -0.7], GAMMA));
    let e = elbo_reverse_unfeatured(&m, &row(&Y2), ZInput::Observed(&row(&[-0.45])), &eps_x, GAMMA).unwrap();
    push("reverse unfeatured bound, observed z", e.value, o.ry_observed(&Y2, -0.45, &[0.4, -0.7], GAMMA));
    let e = elbo_reverse_unfeatured(&m, &row(&Y2), ZInput::Aux(&normal(&[1.3])), &eps_x, GAMMA).unwrap();
    push("reverse unfeatured bound, auxiliary z", e.value, o.ry_aux(&Y2, 1.3, &[0.4, -0.7], GAMMA));
    let kl = aux_consistency_kl(&m, &row(&Y1), 2, &normal_rows(2, &[0.3, -1.1]), &normal_rows(2, &[0.2, 0.9, -0.5, 0.1])).unwrap();
    push("auxiliary consistency KL", kl, o.aux_kl(&Y1, &[0.3, -1.1], &[vec![0.2, 0.9], vec![-0.5, 0.1]]));
    let x = Tensor::matrix(2, 2, [X1, X2].concat());
    let y = Tensor::matrix(2, 2, [Y1, Y2].concat());
    let (ly, lx) = discriminative_losses(&m, &x, &y, &uniform(&[0.62, 0.1])).unwrap();
    push("composition loss", ly, 0.5 * (o.loss_y(&X1, &Y1) + o.loss_y(&X2, &Y2)));
    push("observation loss", lx, 0.5 * (o.loss_x(&X1, &Y1, 0.62) + o.loss_x(&X2, &Y2, 0.1)));
    let coeffs = Coefficients { alpha_f: 0.7, alpha_f_d: 1.3, alpha_r: 0.4, alpha_r_d: 2.1 };
    for variant in [UnfeaturedVariant::LatentZ, UnfeaturedVariant::ObservedZ, UnfeaturedVariant::AuxZ] {
        let mut obj = ObjectiveConfig::new(coeffs);
        obj.variant = variant;
        let (metrics, _) = total_objective(&m, &pinned_batch(-0.45), &obj, &pinned_noise(variant)).unwrap();
        push(&format!("combined objective, {variant:?}"), metrics.j, oracle_total(variant, coeffs, -0.45));
    }
    out
}
