//! Dense tensors and reverse-mode gradients for small multilayer perceptrons.

mod graph;
mod params;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Gradients, Graph, NodeId};
pub use params::{BoundParams, ParamSet, Partition};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("objective must be scalar, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),
    #[error("non-finite value produced by `{primitive}` (node {node})")]
    NonFinite { primitive: &'static str, node: usize },
    #[error("parameter identifier `{0}` lacks a theta./phi. prefix")]
    BadIdentifier(String),
    #[error("duplicate parameter identifier `{0}`")]
    DuplicateIdentifier(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Elementwise layer nonlinearity. `Softmax` acts row-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(alias = "none")]
    Identity,
    Tanh,
    Softplus,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, a: NodeId) -> NodeId {
        match self {
            Activation::Identity => a,
            Activation::Tanh => g.tanh(a),
            Activation::Softplus => g.softplus(a),
            Activation::Sigmoid => g.sigmoid(a),
            Activation::Softmax => g.softmax_rows(a),
        }
    }
}

/// `activation(W · input + b)` for a single input vector or a batch of rows.
pub fn dense_layer(w: &Tensor, b: &Tensor, input: &Tensor, activation: Activation) -> Result<Tensor, DiffError> {
    if w.rank() != 2 {
        return Err(DiffError::ShapeMismatch(format!("weight must be a matrix, got {:?}", w.shape())));
    }
    if w.cols() != input.cols() {
        return Err(DiffError::ShapeMismatch(format!(
            "weight has {} columns but input has length {}",
            w.cols(),
            input.cols()
        )));
    }
    if b.len() != w.rows() {
        return Err(DiffError::ShapeMismatch(format!(
            "bias length {} does not match {} weight rows",
            b.len(),
            w.rows()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(input.as_matrix());
    let wn = g.constant(w.clone());
    let bn = g.constant(b.clone());
    let a = g.affine(x, wn, bn);
    let out = activation.apply(&mut g, a);
    let v = g.value(out).clone();
    if input.rank() <= 1 {
        v.reshape(vec![w.rows()])
    } else {
        Ok(v)
    }
}

/// Value and gradient of a scalar objective with respect to every parameter.
///
/// The closure receives a fresh graph with `params` bound as leaves and returns
/// the objective node. Parameters the objective does not touch get zero gradient.
pub fn value_and_gradient<F>(params: &ParamSet, objective: F) -> Result<(f64, ParamSet), DiffError>
where
    F: FnOnce(&mut Graph, &BoundParams) -> NodeId,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = objective(&mut g, &bound);
    let mut grads = g.backward(out)?;
    let mut result = params.zeros_like();
    for (name, node) in bound.iter() {
        if let Some(t) = grads.take(node) {
            *result.get_mut(name).expect("same names") = t;
        }
    }
    Ok((g.value(out).item(), result))
}

/// Gradient only; see [`value_and_gradient`].
pub fn gradient<F>(params: &ParamSet, objective: F) -> Result<ParamSet, DiffError>
where
    F: FnOnce(&mut Graph, &BoundParams) -> NodeId,
{
    value_and_gradient(params, objective).map(|(_, g)| g)
}

/// Central finite differences of `f` at every scalar parameter.
pub fn finite_difference_gradient(params: &ParamSet, step: f64, mut f: impl FnMut(&ParamSet) -> f64) -> ParamSet {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).unwrap().len();
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            out.get_mut(name).unwrap().data_mut()[i] = (up - down) / (2.0 * step);
        }
    }
    out
}

/// Largest violation of `|a - n| <= rel * max(|a|, |n|)` among entries whose
/// absolute difference exceeds `abs_floor`, reported as `(name, index, analytic, numeric)`.
pub fn compare_gradients(
    analytic: &ParamSet,
    numeric: &ParamSet,
    rel: f64,
    abs_floor: f64,
) -> Option<(String, usize, f64, f64)> {
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let diff = (x - y).abs();
            if diff > abs_floor && diff > rel * x.abs().max(y.abs()) {
                return Some((name.to_owned(), i, x, y));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t).unwrap();
        p
    }

    #[test]
    fn tanh_gradient_matches_closed_form_and_fd() {
        let p = single("phi.w", Tensor::scalar(0.5));
        let f = |g: &mut Graph, b: &BoundParams| {
            let t = g.tanh(b.node("phi.w"));
            g.sum(t)
        };
        let grad = gradient(&p, f).unwrap().get("phi.w").unwrap().item();
        let closed = 1.0 - 0.5f64.tanh().powi(2);
        assert!((grad - 0.786448).abs() < 1e-6);
        assert!((grad - closed).abs() < 1e-15);
        let fd = finite_difference_gradient(&p, 1e-6, |q| q.get("phi.w").unwrap().item().tanh());
        let fd = fd.get("phi.w").unwrap().item();
        assert!(((grad - fd) / grad).abs() < 1e-6);
    }

    #[test]
    fn constant_objective_zero_gradient() {
        let p = single("theta.w", Tensor::vector(vec![1.0, -2.0]));
        let grad = gradient(&p, |g, _| g.scalar(7.0)).unwrap();
        assert_eq!(grad.get("theta.w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dense_layer_examples() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let zero_b = Tensor::vector(vec![0.0; 3]);
        assert_eq!(dense_layer(&eye, &zero_b, &x, Activation::Identity).unwrap(), x);

        let b0 = Tensor::vector(vec![0.1, -0.7]);
        let out = dense_layer(&Tensor::zeros(&[2, 3]), &b0, &x, Activation::Tanh).unwrap();
        assert_eq!(out.data(), &[0.1f64.tanh(), (-0.7f64).tanh()]);

        let out = dense_layer(
            &Tensor::matrix(1, 1, vec![2.0]),
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![1.0]),
            Activation::Softplus,
        )
        .unwrap();
        assert!((out.item() - 2.126928).abs() < 1e-6);
        assert!((out.item() - (1.0 + 2f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn dense_layer_shape_errors() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(dense_layer(&w, &Tensor::zeros(&[2]), &Tensor::zeros(&[4]), Activation::Tanh).is_err());
        assert!(dense_layer(&w, &Tensor::zeros(&[3]), &Tensor::zeros(&[3]), Activation::Tanh).is_err());
    }

    /// Every primitive, applied to random small tensors, against central differences.
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Build = fn(&mut Graph, NodeId, NodeId) -> NodeId;
        let cases: Vec<(&str, Build)> = vec![
            ("affine", |g, a, b| {
                let bias = g.slice_cols(b, 0, 1);
                let bias = g.reshape(bias, &[2]);
                g.affine(b, a, bias)
            }),
            ("matmul", |g, a, b| {
                let m = g.reshape(a, &[3, 2]);
                g.matmul(b, m)
            }),
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("div", |g, a, b| {
                let e = g.exp(b);
                g.div(a, e)
            }),
            ("tanh", |g, a, _| g.tanh(a)),
            ("softplus", |g, a, _| g.softplus(a)),
            ("sigmoid", |g, a, _| g.sigmoid(a)),
            ("exp", |g, a, _| g.exp(a)),
            ("log", |g, a, _| {
                let s = g.square(a);
                let s = g.add_scalar(s, 0.5);
                g.log(s)
            }),
            ("square", |g, a, _| g.square(a)),
            ("softmax", |g, a, _| g.softmax_rows(a)),
            ("log_softmax", |g, a, _| g.log_softmax_rows(a)),
            ("logsumexp", |g, a, _| g.logsumexp_rows(a)),
            ("row_sum", |g, a, b| {
                let r = g.row_sum(a);
                let r = g.broadcast_cols(r, 3);
                g.mul(r, b)
            }),
            ("repeat_tile", |g, a, b| {
                let r = g.repeat_rows(a, 2);
                let t = g.tile_rows(b, 2);
                g.mul(r, t)
            }),
            ("concat_slice", |g, a, b| {
                let c = g.concat_cols(&[a, b]);
                let s = g.slice_cols(c, 2, 5);
                g.tanh(s)
            }),
            ("scale_neg", |g, a, _| {
                let s = g.scale(a, -2.5);
                g.neg(s)
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (label, build) in cases {
            for _ in 0..3 {
                let mut p = ParamSet::new();
                let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
                let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
                let weights: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
                p.insert("phi.a", Tensor::matrix(2, 3, a)).unwrap();
                p.insert("phi.b", Tensor::matrix(2, 3, b)).unwrap();
                let objective = |g: &mut Graph, bp: &BoundParams| {
                    let out = build(g, bp.node("phi.a"), bp.node("phi.b"));
                    let n = g.value(out).len();
                    let w = g.constant(Tensor::new(g.value(out).shape().to_vec(), weights[..n].to_vec()).unwrap());
                    g.dot(out, w)
                };
                let analytic = gradient(&p, objective).unwrap();
                let numeric = finite_difference_gradient(&p, 1e-6, |q| {
                    let mut g = Graph::new();
                    let bq = q.bind(&mut g);
                    let out = objective(&mut g, &bq);
                    g.value(out).item()
                });
                if let Some(bad) = compare_gradients(&analytic, &numeric, 1e-4, 1e-8) {
                    panic!("{label}: gradient mismatch {bad:?}");
                }
            }
        }
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let mut p = ParamSet::new();
        p.insert("phi.w", Tensor::matrix(3, 2, vec![0.1, -0.4, 0.9, 1.3, -0.2, 0.05])).unwrap();
        let run = || {
            value_and_gradient(&p, |g, b| {
                let x = g.constant(Tensor::matrix(2, 2, vec![0.3, 0.7, -1.0, 2.0]));
                let bias = g.constant(Tensor::vector(vec![0.0; 3]));
                let h = g.affine(x, b.node("phi.w"), bias);
                let s = g.softmax_rows(h);
                let l = g.log(s);
                g.sum(l)
            })
            .unwrap()
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.to_bytes(), g2.to_bytes());
    }

    proptest! {
        #[test]
        fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, w in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let mut p = ParamSet::new();
            p.insert("theta.w", Tensor::vector(w)).unwrap();
            let f = |g: &mut Graph, bp: &BoundParams| {
                let t = g.tanh(bp.node("theta.w"));
                g.sum(t)
            };
            let h = |g: &mut Graph, bp: &BoundParams| {
                let s = g.square(bp.node("theta.w"));
                let e = g.softplus(s);
                g.sum(e)
            };
            let gf = gradient(&p, f).unwrap();
            let gh = gradient(&p, h).unwrap();
            let gc = gradient(&p, |g, bp| {
                let x = f(g, bp);
                let y = h(g, bp);
                let x = g.scale(x, a);
                let y = g.scale(y, b);
                g.add(x, y)
            }).unwrap();
            let (f, h, c) = (gf.get("theta.w").unwrap(), gh.get("theta.w").unwrap(), gc.get("theta.w").unwrap());
            for i in 0..4 {
                let expect = a * f.data()[i] + b * h.data()[i];
                prop_assert!((c.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }
}
