#![allow(dead_code)]

pub mod checks;
pub mod equivalence;
pub mod oracle;

use uvae::diffcore::{Activation, ParamSet, Tensor};
use uvae::model::{Model, ModelConfig, NetConfig};

/// The library model holding the oracle's pinned weights.
pub fn pinned_model() -> Model {
    let p = oracle::pinned();
    let mut cfg = ModelConfig::small(2, 2, 1, 1);
    cfg.aux_z = Some(NetConfig::new(vec![1], Activation::Tanh, Activation::Sigmoid));
    let mut params = ParamSet::new();
    let mut put = |prefix: &str, net: &oracle::Net, heads: &[&str]| {
        params
            .insert(format!("{prefix}.h0.weight"), Tensor::matrix(1, net.hw.len(), net.hw.clone()))
            .unwrap();
        params.insert(format!("{prefix}.h0.bias"), Tensor::vector(vec![net.hb])).unwrap();
        for (name, (w, b)) in heads.iter().zip(&net.heads) {
            params
                .insert(format!("{prefix}.{name}.weight"), Tensor::matrix(w.len(), 1, w.clone()))
                .unwrap();
            params.insert(format!("{prefix}.{name}.bias"), Tensor::vector(b.clone())).unwrap();
        }
    };
    put("phi.encoder_y", &p.enc_y, &["mean", "log_var"]);
    put("phi.encoder_z", &p.enc_z, &["mean", "sd"]);
    put("phi.aux_z", &p.aux, &["mean", "sd"]);
    put("theta.decoder_x", &p.dec, &["mean", "log_var"]);
    Model::from_parts(cfg, params).unwrap()
}

pub fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec())
}

/// A random tiny model (3, 3, 1, hidden 4) with non-zero biases.
pub fn random_tiny(seed: u64, aux: bool) -> Model {
    use rand::{Rng, SeedableRng};
    let mut cfg = ModelConfig::small(3, 3, 1, 4);
    if aux {
        cfg.aux_z = Some(NetConfig::new(vec![4], Activation::Tanh, Activation::Sigmoid));
    }
    let mut m = Model::init(cfg, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    m
}
