//! Partial least squares regression (PLS2 with X-only deflation).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::diffcore::Tensor;

const MAX_ITER: usize = 500;

#[derive(Debug, Error, PartialEq)]
pub enum PlsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error("X has zero variance")]
    ZeroVariance,
    #[error("component {0} has a zero score vector; X has lower rank than the requested component count")]
    RankDeficient(usize),
    #[error("component {0} did not converge in {MAX_ITER} iterations")]
    NoConvergence(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlsModel {
    pub k: usize,
    /// `p × k` weights `W`.
    pub weights: DMatrix<f64>,
    /// `p × k` X loadings `P`.
    pub loadings: DMatrix<f64>,
    /// `q × k` Y loadings `C`.
    pub y_loadings: DMatrix<f64>,
    /// `n × k` training scores `T`.
    pub scores: DMatrix<f64>,
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
    /// `p × q` map from centred X to centred Ŷ: `W (PᵀW)⁻¹ Cᵀ`.
    pub coefficients: DMatrix<f64>,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let t = t.as_matrix();
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::matrix(m.nrows(), m.ncols(), data)
}

fn centre(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()));
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (c, mean)
}

/// Fits `k` latent components. Weight signs follow the Y column with the
/// largest variance.
pub fn pls_fit(x: &Tensor, y: &Tensor, k: usize) -> Result<PlsModel, PlsError> {
    if k == 0 {
        return Err(PlsError::ZeroComponents);
    }
    let (x, y) = (to_matrix(x), to_matrix(y));
    if x.nrows() != y.nrows() {
        return Err(PlsError::Shape(format!("X has {} rows, Y has {}", x.nrows(), y.nrows())));
    }
    let (n, p, q) = (x.nrows(), x.ncols(), y.ncols());
    if k > n.min(p) {
        return Err(PlsError::Shape(format!("{k} components exceed min(rows, columns) = {}", n.min(p))));
    }
    let (mut xr, x_mean) = centre(&x);
    let (yc, y_mean) = centre(&y);
    if xr.iter().all(|v| *v == 0.0) {
        return Err(PlsError::ZeroVariance);
    }
    let (mut w_all, mut p_all, mut c_all, mut t_all) = (DMatrix::zeros(p, k), DMatrix::zeros(p, k), DMatrix::zeros(q, k), DMatrix::zeros(n, k));
    let start = (0..q).max_by(|a, b| yc.column(*a).norm_squared().total_cmp(&yc.column(*b).norm_squared()));
    let y_constant = yc.iter().all(|v| *v == 0.0);
    let ss0 = xr.norm_squared();

    if !y_constant {
        let start = start.expect("Y has columns");
        for a in 0..k {
            // The NIPALS weight fixed point: the dominant left singular vector
            // of XᵣᵀY, signed to agree with Xᵣᵀy_start.
            let xty = xr.tr_mul(&yc);
            let svd = xty.clone().try_svd(true, false, f64::EPSILON, MAX_ITER).ok_or(PlsError::NoConvergence(a))?;
            let top = svd.singular_values.imax();
            if svd.singular_values[top] == 0.0 {
                return Err(PlsError::RankDeficient(a));
            }
            let mut w: DVector<f64> = svd.u.expect("u requested").column(top).into();
            if w.dot(&xty.column(start)) < 0.0 {
                w = -w;
            }
            let t = &xr * &w;
            let tt = t.norm_squared();
            if tt <= 1e-24 * ss0 {
                return Err(PlsError::RankDeficient(a));
            }
            let pa = xr.tr_mul(&t) / tt;
            let ca = yc.tr_mul(&t) / tt;
            xr -= &t * pa.transpose();
            w_all.set_column(a, &w);
            p_all.set_column(a, &pa);
            c_all.set_column(a, &ca);
            t_all.set_column(a, &t);
        }
    }
    let coefficients = if y_constant {
        DMatrix::zeros(p, q)
    } else {
        let ptw = p_all.tr_mul(&w_all);
        let inv = ptw.try_inverse().ok_or(PlsError::RankDeficient(k - 1))?;
        &w_all * inv * c_all.transpose()
    };
    Ok(PlsModel {
        k,
        weights: w_all,
        loadings: p_all,
        y_loadings: c_all,
        scores: t_all,
        x_mean,
        y_mean,
        coefficients,
    })
}

pub fn pls_predict(model: &PlsModel, x: &Tensor) -> Result<Tensor, PlsError> {
    let x = to_matrix(x);
    if x.ncols() != model.x_mean.len() {
        return Err(PlsError::Shape(format!("expected {} columns, got {}", model.x_mean.len(), x.ncols())));
    }
    let mut xc = x;
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-model.x_mean[j]);
    }
    let mut y = xc * &model.coefficients;
    for (j, mut col) in y.column_iter_mut().enumerate() {
        col.add_scalar_mut(model.y_mean[j]);
    }
    Ok(to_tensor(&y))
}

/// Clamps each row at 0 and renormalizes it to sum 1; an all-zero row
/// becomes uniform.
pub fn project_to_simplex(pred: &Tensor) -> Tensor {
    let mut out = pred.as_matrix();
    let k = out.cols();
    for row in out.data_mut().chunks_mut(k) {
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn constant_y_predicts_constant() {
        let x = random(10, 3, 1);
        let y = Tensor::matrix(10, 1, vec![2.5; 10]);
        let m = pls_fit(&x, &y, 2).unwrap();
        let pred = pls_predict(&m, &random(4, 3, 2)).unwrap();
        assert!(pred.data().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn centred_zero_input_predicts_y_mean() {
        let x = random(12, 4, 3);
        let y = random(12, 2, 4);
        let m = pls_fit(&x, &y, 2).unwrap();
        let xm = Tensor::matrix(1, 4, m.x_mean.iter().cloned().collect());
        let pred = pls_predict(&m, &xm).unwrap();
        for j in 0..2 {
            assert!((pred.data()[j] - m.y_mean[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let x = Tensor::matrix(3, 2, vec![1.0; 6]);
        assert_eq!(pls_fit(&x, &Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]), 1), Err(PlsError::ZeroVariance));
        assert_eq!(pls_fit(&x, &Tensor::matrix(2, 1, vec![1.0, 2.0]), 1).unwrap_err(), PlsError::Shape("X has 3 rows, Y has 2".into()));
        assert_eq!(pls_fit(&random(5, 2, 0), &random(5, 1, 1), 0), Err(PlsError::ZeroComponents));
    }

    #[test]
    fn simplex_projection() {
        let p = project_to_simplex(&Tensor::matrix(2, 3, vec![0.5, -0.2, 1.5, -1.0, -2.0, 0.0]));
        assert_eq!(p.row(0), &[0.25, 0.0, 0.75]);
        assert_eq!(p.row(1), &[1.0 / 3.0; 3]);
    }
}
