use uvae::baseline::{pls_fit, pls_predict, project_to_simplex};
use uvae::data::{generate_grouped_mixtures, Dataset, Mixing, MixtureSpec, Standardization};
use uvae::diffcore::Tensor;
use uvae::eval::*;
use uvae::diffcore::Activation;
use uvae::model::{GenerateMode, Model, ModelConfig, XFamily, YFamily};

fn grouped_table(seed: u64) -> uvae::data::SampleTable {
    let spec = MixtureSpec {
        channels: 6,
        replicates: 10,
        levels: vec![1.0],
        mixing: Mixing::Linear,
        ..MixtureSpec::default()
    };
    let centres: Vec<Vec<f64>> = (0..6).map(|g| {
        let mut c = vec![1.0; 3];
        c[g % 3] += 2.0 + (g / 3) as f64;
        let s: f64 = c.iter().sum();
        c.iter().map(|v| v / s).collect()
    }).collect();
    generate_grouped_mixtures(&spec, &centres, 30.0, seed).unwrap()
}

#[test]
fn endmember_error_is_zero_against_own_generation_and_permutation_invariant() {
    let m = Model::init(ModelConfig::small(5, 3, 1, 4), 3).unwrap();
    let z = Tensor::matrix(1, 1, vec![0.2]);
    let std = Standardization { mean: vec![1.0, 2.0, 3.0, 4.0, 5.0], scale: vec![0.5, 1.0, 2.0, 1.5, 3.0] };
    let own = endmember_error(&m, &Tensor::zeros(&[3, 5]), &std, &z).unwrap();
    let truth = Tensor::from_rows(&own.generated).unwrap();
    let exact = endmember_error(&m, &truth, &std, &z).unwrap();
    assert!(exact.per_endmember.iter().all(|e| *e == 0.0));

    let other = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64).sin()).collect());
    let base = endmember_error(&m, &other, &std, &z).unwrap();
    assert_eq!(base, endmember_error(&m, &other, &std, &z).unwrap());
    // Reverse channel order in the decoder output layer, the standardization and the truth.
    let mut pm = m.clone();
    for name in ["theta.decoder_x.mean.weight", "theta.decoder_x.mean.bias", "theta.decoder_x.log_var.weight", "theta.decoder_x.log_var.bias"] {
        let t = pm.params.get(name).unwrap().clone();
        let rows: Vec<usize> = (0..t.rows()).rev().collect();
        *pm.params.get_mut(name).unwrap() = if t.rank() == 1 { Tensor::vector(t.data().iter().rev().cloned().collect()) } else { t.select_rows(&rows) };
    }
    let rev = |v: &[f64]| v.iter().rev().cloned().collect::<Vec<_>>();
    let pstd = Standardization { mean: rev(&std.mean), scale: rev(&std.scale) };
    let ptruth = Tensor::matrix(3, 5, other.row_iter().flat_map(rev).collect());
    let permuted = endmember_error(&pm, &ptruth, &pstd, &z).unwrap();
    for (a, b) in base.per_endmember.iter().zip(&permuted.per_endmember) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn dataset_mean_policy_averages_inferred_nuisance() {
    let m = Model::init(ModelConfig::small(4, 3, 2, 5), 8).unwrap();
    let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
    let z = nuisance_means(&m, &x, None).unwrap();
    let pol = policy_z(&m, &ZPolicy::DatasetMean, &x, None).unwrap();
    for j in 0..2 {
        let want = (0..3).map(|i| z.at(i, j)).sum::<f64>() / 3.0;
        assert!((pol.at(0, j) - want).abs() < 1e-15);
    }
    let y = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.2, 0.3, 0.5]);
    let zl = nuisance_means(&m, &x, Some(&y)).unwrap();
    assert_ne!(zl, z);
    let pl = policy_z(&m, &ZPolicy::DatasetMean, &x, Some(&y)).unwrap();
    assert!((pl.at(0, 1) - (0..3).map(|i| zl.at(i, 1)).sum::<f64>() / 3.0).abs() < 1e-15);
    assert_eq!(policy_z(&m, &ZPolicy::PriorMean, &x, None).unwrap().data(), &[0.0, 0.0]);
}

fn digit_model() -> Model {
    let mut cfg = ModelConfig::small(784, 10, 2, 8);
    cfg.y_family = YFamily::Concrete;
    cfg.x_family = XFamily::Bernoulli;
    cfg.decoder_x.output = Activation::Identity;
    Model::init(cfg, 4).unwrap()
}

#[test]
fn digit_grid_layout_and_determinism() {
    let m = digit_model();
    let z = Tensor::zeros(&[1, 2]);
    let g = digit_grid(&m, &z, GenerateMode::Mean, 3, 28, 0).unwrap();
    assert_eq!((g.width, g.height), (3 * 28, 10 * 28));
    assert_eq!(g.pixels.len(), 84 * 280);
    // Mean mode repeats the same image across a row.
    assert_eq!(g.pixels[0..28], g.pixels[28..56]);
    let s1 = digit_grid(&m, &z, GenerateMode::Sample, 4, 28, 9).unwrap();
    let s2 = digit_grid(&m, &z, GenerateMode::Sample, 4, 28, 9).unwrap();
    assert_eq!(s1.to_pgm(), s2.to_pgm());
    assert!(s1.pixels.iter().all(|p| *p == 0 || *p == 255));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.pgm");
    s1.write_pgm(&path).unwrap();
    assert!(std::fs::read(&path).unwrap().starts_with(b"P5\n112 280\n255\n"));
    assert!(digit_grid(&m, &z, GenerateMode::Mean, 1, 27, 0).is_err());
}

#[test]
fn constant_nuisance_encoder_gives_equal_medians() {
    let mut m = Model::init(ModelConfig::small(4, 3, 1, 5), 2).unwrap();
    let names: Vec<String> = m.params.names().filter(|n| n.contains("encoder_z")).map(String::from).collect();
    for n in names {
        m.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64).sqrt()).collect());
    let r = nuisance_analysis(&m, &x, &[0, 0, 1, 1, 2, 2]).unwrap();
    assert!(r.medians.iter().all(|v| *v == r.medians[0]));
    assert!(r.mads.iter().all(|v| *v == 0.0));
    assert!(r.outlier.iter().all(|o| !o));
}

#[test]
fn principal_components_match_power_iteration() {
    let n = 40;
    let x = Tensor::matrix(n, 4, (0..n * 4).map(|i| ((i * 7919) % 101) as f64 / 10.0 + if i % 4 == 0 { (i / 4) as f64 } else { 0.0 }).collect());
    let (proj, var) = principal_components(&x);
    // Oracle: power iteration on the covariance.
    let mean: Vec<f64> = (0..4).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
    let mut cov = [[0.0; 4]; 4];
    for i in 0..n {
        for a in 0..4 {
            for b in 0..4 {
                cov[a][b] += (x.at(i, a) - mean[a]) * (x.at(i, b) - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let mut v = [1.0, 0.5, 0.25, 0.125];
    for _ in 0..2000 {
        let w: Vec<f64> = (0..4).map(|a| (0..4).map(|b| cov[a][b] * v[b]).sum()).collect();
        let norm = w.iter().map(|t| t * t).sum::<f64>().sqrt();
        for a in 0..4 {
            v[a] = w[a] / norm;
        }
    }
    let lambda: f64 = (0..4).map(|a| v[a] * (0..4).map(|b| cov[a][b] * v[b]).sum::<f64>()).sum();
    assert!((var[0] - lambda).abs() < 1e-9 * lambda);
    let sign = if v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a }) < 0.0 { -1.0 } else { 1.0 };
    for i in 0..n {
        let want: f64 = (0..4).map(|a| (x.at(i, a) - mean[a]) * v[a] * sign).sum();
        assert!((proj[i][0] - want).abs() < 1e-8, "{} vs {want}", proj[i][0]);
    }
    assert!(var[0] >= var[1] && var[1] >= var[2]);
}

#[test]
fn grouped_leave_p_out_audits_and_scores() {
    let table = grouped_table(1);
    let cfg = LpoConfig { train_groups: vec![0, 1, 2], eval_groups: vec![3, 4, 5], labeled_fraction: 0.5, unfeatured: 10, seed: 2 };
    let mut seen: Option<Dataset> = None;
    let report = grouped_leave_p_out(&table, &cfg, None, &mut |ds: &Dataset| {
        seen = Some(ds.clone());
        let pls = pls_fit(&ds.labeled_x, &ds.labeled_y, 2)?;
        Ok(Box::new(move |x: &Tensor| Ok(project_to_simplex(&pls_predict(&pls, x)?))) as Predictor)
    })
    .unwrap();
    let ds = seen.unwrap();
    for r in ds.labeled_rows.iter().chain(&ds.unlabeled_rows) {
        assert!(table.group[*r] < 3);
    }
    let evals = (0..table.len()).filter(|i| table.group[*i] >= 3).count();
    assert_eq!(report.per_item.len(), evals);
    assert_eq!(report.metrics["eval_items"], evals as f64);
    let mean = report.per_item.iter().map(|r| r["kl"]).sum::<f64>() / evals as f64;
    assert!((report.metrics["composition_kl"] - mean).abs() < 1e-12);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["seed"], 2);
    assert!(json["config"]["train_groups"].is_array());

    let bad = LpoConfig { eval_groups: vec![2, 3], ..cfg };
    let err = grouped_leave_p_out(&table, &bad, None, &mut |_| unreachable!()).err().unwrap();
    assert!(matches!(err, EvalError::Overlap(ref g) if g == &vec![2]));
}
