//! Procedurally drawn 28×28 handwritten-style digits and the partial-label
//! split, where labels exist only for a subset of the classes.
//!
//! Each class is a fixed set of pen strokes in the unit square. Every image
//! applies a random rotation, scale, shift, stroke width and per-point wobble
//! before anti-aliased rasterization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{spec_err, DataError, Dataset, Standardization};
use crate::diffcore::Tensor;

pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let n = 14;
    (0..=n)
        .map(|i| {
            let t = (from + (to - from) * i as f64 / n as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn line(points: &[(f64, f64)]) -> Stroke {
    points.to_vec()
}

/// Pen strokes of each class; `y` grows downwards, angles are clockwise.
fn template(digit: u8) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.24, 0.34, 0.0, 360.0)],
        1 => vec![line(&[(0.36, 0.26), (0.52, 0.14), (0.52, 0.86)])],
        2 => vec![arc(0.5, 0.34, 0.22, 0.18, 190.0, 380.0), line(&[(0.7, 0.42), (0.28, 0.84), (0.76, 0.84)])],
        3 => vec![arc(0.48, 0.32, 0.2, 0.16, 200.0, 450.0), arc(0.48, 0.66, 0.23, 0.19, 270.0, 520.0)],
        4 => vec![line(&[(0.62, 0.86), (0.62, 0.14), (0.24, 0.62), (0.78, 0.62)])],
        5 => vec![line(&[(0.74, 0.16), (0.36, 0.16), (0.32, 0.46)]), arc(0.48, 0.62, 0.22, 0.2, 235.0, 500.0)],
        6 => vec![arc(0.56, 0.5, 0.24, 0.36, 230.0, 150.0 + 0.0), arc(0.5, 0.66, 0.2, 0.18, 0.0, 360.0)],
        7 => vec![line(&[(0.24, 0.16), (0.76, 0.16), (0.44, 0.86)])],
        8 => vec![arc(0.5, 0.32, 0.18, 0.16, 0.0, 360.0), arc(0.5, 0.66, 0.22, 0.19, 0.0, 360.0)],
        9 => vec![arc(0.5, 0.34, 0.2, 0.18, 0.0, 360.0), line(&[(0.7, 0.36), (0.66, 0.86)])],
        _ => unreachable!("digit classes are 0 to 9"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render_one(digit: u8, rng: &mut ChaCha8Rng, out: &mut [u8]) {
    let angle = rng.random_range(-12.0f64..12.0).to_radians();
    let scale = rng.random_range(0.85..1.1);
    let (sx, sy) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let width = rng.random_range(0.045..0.075);
    let (c, s) = (angle.cos(), angle.sin());
    let strokes: Vec<Stroke> = template(digit)
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + rng.random_range(-0.015..0.015) - 0.5, y + rng.random_range(-0.015..0.015) - 0.5);
                    (0.5 + sx + scale * (c * x - s * y), 0.5 + sy + scale * (s * x + c * y))
                })
                .collect()
        })
        .collect();
    let px = 1.0 / SIDE as f64;
    for r in 0..SIDE {
        for col in 0..SIDE {
            let p = ((col as f64 + 0.5) * px, (r as f64 + 0.5) * px);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = ((width + 0.5 * px - d) / px).clamp(0.0, 1.0);
            out[r * SIDE + col] = (255.0 * v).round() as u8;
        }
    }
}

/// Raw images (`n × 28 × 28` bytes, row-major) with their class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DigitImages {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `n × 784` pixel intensities in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), SIDE * SIDE, self.pixels.iter().map(|b| *b as f64 / 255.0).collect())
    }
}

/// `n` images with labels cycling through the classes in shuffled order.
pub fn render_digits(n: usize, seed: u64) -> DigitImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % CLASSES) as u8).collect();
    labels.shuffle(&mut rng);
    let mut pixels = vec![0u8; n * SIDE * SIDE];
    for (i, d) in labels.iter().enumerate() {
        render_one(*d, &mut rng, &mut pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]);
    }
    DigitImages { pixels, labels }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialLabelCounts {
    /// Labeled pairs drawn from images of the labeled classes.
    pub labeled: usize,
    /// Copies of each class one-hot in the unfeatured set.
    pub unfeatured_per_class: usize,
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Labeled pairs only for `labeled_digits`; every image is also unlabeled;
/// the unfeatured set holds every class one-hot `unfeatured_per_class`
/// times, with an i.i.d. `U(lo, hi)` nuisance when `z` is given.
pub fn make_partial_label_split(
    images: &Tensor,
    labels: &[u8],
    labeled_digits: &[u8],
    counts: PartialLabelCounts,
    z: Option<(usize, f64, f64)>,
    seed: u64,
) -> Result<Dataset, DataError> {
    if labeled_digits.is_empty() {
        return Err(spec_err("labeled_digits", "must name at least one digit"));
    }
    if let Some(d) = labeled_digits.iter().find(|d| **d as usize >= CLASSES) {
        return Err(spec_err("labeled_digits", format!("{d} is not a digit")));
    }
    if images.rows() != labels.len() {
        return Err(DataError::Invariant("one label is needed per image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6469_6769);
    let mut pool: Vec<usize> = (0..labels.len()).filter(|i| labeled_digits.contains(&labels[*i])).collect();
    if counts.labeled > pool.len() {
        return Err(DataError::Infeasible(format!("{} labeled requested but only {} images of the labeled digits", counts.labeled, pool.len())));
    }
    pool.shuffle(&mut rng);
    let mut labeled_rows = pool[..counts.labeled].to_vec();
    labeled_rows.sort_unstable();
    let ly: Vec<f64> = labeled_rows.iter().flat_map(|i| one_hot(labels[*i] as usize, CLASSES)).collect();
    let unlabeled_rows: Vec<usize> = (0..labels.len()).collect();
    let ny = CLASSES * counts.unfeatured_per_class;
    let uy: Vec<f64> = (0..ny).flat_map(|i| one_hot(i % CLASSES, CLASSES)).collect();
    let unfeatured_z = z.map(|(dim, lo, hi)| Tensor::matrix(ny, dim, (0..ny * dim).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()));
    Ok(Dataset {
        labeled_x: images.select_rows(&labeled_rows),
        labeled_y: Tensor::matrix(labeled_rows.len(), CLASSES, ly),
        unlabeled_x: images.clone(),
        unfeatured_y: Tensor::matrix(ny, CLASSES, uy),
        unfeatured_z,
        standardization: Standardization::identity(images.cols()),
        labeled_rows,
        unlabeled_rows,
    })
}
