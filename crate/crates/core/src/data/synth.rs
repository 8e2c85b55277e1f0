//! Synthetic spectral mixtures standing in for laboratory reflectance data.
//!
//! Endmember signatures are smooth positive curves with a few absorption
//! dips. A sample's spectrum mixes them by abundance (linearly or
//! geometrically), is scaled by its acquisition configuration's brightness
//! level, and picks up a small grain-size factor and additive noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{spec_err, DataError, Dataset, Standardization};
use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    /// `x = Σ a_k s_k`.
    Linear,
    /// `x = exp(Σ a_k log s_k)`.
    Nonlinear,
}

/// Incidence angles (degrees) of the three acquisition configurations.
pub const INCIDENCE_ANGLES: [f64; 3] = [33.9, 42.7, 12.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub endmembers: usize,
    pub channels: usize,
    pub resolution: usize,
    /// Brightness multiplier per acquisition configuration.
    pub levels: Vec<f64>,
    /// Samples per (grid point, configuration).
    pub replicates: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Weight of a Dir(1) draw blended into each nominal abundance.
    pub jitter: f64,
    /// Log-scale standard deviation of the per-sample grain factor.
    pub grain: f64,
    pub mixing: Mixing,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            endmembers: 3,
            channels: 32,
            resolution: 10,
            levels: levels_from_angles(&INCIDENCE_ANGLES, 0.008),
            replicates: 10,
            noise: 0.003,
            jitter: 0.02,
            grain: 0.005,
            mixing: Mixing::Nonlinear,
        }
    }
}

/// Brightness levels `1 - slope·(θ - min θ)`: gaps between levels are
/// proportional to gaps between incidence angles.
pub fn levels_from_angles(angles: &[f64], slope: f64) -> Vec<f64> {
    let min = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    angles.iter().map(|a| 1.0 - slope * (a - min)).collect()
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.endmembers < 2 {
            return Err(spec_err("endmembers", "need at least 2"));
        }
        if self.channels == 0 {
            return Err(spec_err("channels", "must be positive"));
        }
        if self.resolution == 0 {
            return Err(spec_err("resolution", "must be positive"));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0)) {
            return Err(spec_err("levels", "need at least one positive level"));
        }
        if self.replicates == 0 {
            return Err(spec_err("replicates", "must be positive"));
        }
        for (field, v) in [("noise", self.noise), ("grain", self.grain)] {
            if !(v >= 0.0) {
                return Err(spec_err(field, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(spec_err("jitter", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn mix(&self, a: &[f64], sig: &Tensor, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = match self.mixing {
                Mixing::Linear => a.iter().enumerate().map(|(k, ak)| ak * sig.at(k, c)).sum(),
                Mixing::Nonlinear => a.iter().enumerate().map(|(k, ak)| ak * sig.at(k, c).ln()).sum::<f64>().exp(),
            };
        }
    }
}

/// Every composition with coordinates in `{0, 1/r, ..., 1}`, in
/// lexicographic order of the integer counts.
pub fn simplex_grid(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for i in (0..=left).rev() {
            prefix.push(i);
            rec(k - 1, left - i, prefix, out);
            prefix.pop();
        }
    }
    let mut counts = Vec::new();
    rec(k, resolution, &mut Vec::new(), &mut counts);
    let r = resolution as f64;
    counts.into_iter().map(|c| c.into_iter().map(|v| v as f64 / r).collect()).collect()
}

fn dirichlet_one(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `K × C` signatures: a sloped baseline with 3 to 5 Gaussian absorption
/// dips at distinct centres, floored at 0.05.
pub fn endmember_signatures(k: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = channels as f64;
    let mut data = Vec::with_capacity(k * channels);
    for e in 0..k {
        let base = 0.55 + 0.3 * rng.random::<f64>();
        let slope = rng.random_range(-0.3..0.3);
        let bumps = rng.random_range(3..=5usize);
        // Each endmember draws its centres from its own stratum so no two
        // share a feature.
        let dips: Vec<(f64, f64, f64)> = (0..bumps)
            .map(|b| {
                let slot = (b * k + e) as f64 + rng.random::<f64>();
                let centre = slot / (bumps * k) as f64 * c;
                (centre, rng.random_range(1.5..4.0) * c / 32.0, rng.random_range(0.1..0.3))
            })
            .collect();
        for ch in 0..channels {
            let t = ch as f64;
            let dip: f64 = dips.iter().map(|(m, w, d)| d * (-(t - m).powi(2) / (2.0 * w * w)).exp()).sum();
            data.push((base + slope * (t / c - 0.5) - dip).max(0.05));
        }
    }
    Tensor::matrix(k, channels, data)
}

/// One row per generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    pub abundances: Tensor,
    /// Index of the nominal grid point (or group centre).
    pub nominal: Vec<usize>,
    pub config: Vec<usize>,
    pub group: Vec<usize>,
    pub x: Tensor,
    pub outlier: Vec<bool>,
    pub signatures: Tensor,
}

impl SampleTable {
    pub fn len(&self) -> usize {
        self.config.len()
    }

    pub fn is_empty(&self) -> bool {
        self.config.is_empty()
    }
}

fn build_table(spec: &MixtureSpec, nominals: &[(usize, usize, Vec<f64>)], jitter: &mut dyn FnMut(&mut ChaCha8Rng, &[f64]) -> Vec<f64>, seed: u64) -> SampleTable {
    let k = spec.endmembers;
    let signatures = endmember_signatures(k, spec.channels, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_7874);
    let (mut ab, mut xs, mut nominal, mut config, mut group) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut buf = vec![0.0; spec.channels];
    for (g, idx, a0) in nominals {
        for (c, level) in spec.levels.iter().enumerate() {
            for _ in 0..spec.replicates {
                let a = jitter(&mut rng, a0);
                spec.mix(&a, &signatures, &mut buf);
                let grain = if spec.grain > 0.0 { (spec.grain * rng.sample::<f64, _>(StandardNormal)).exp() } else { 1.0 };
                for v in buf.iter_mut() {
                    *v *= level * grain;
                    if spec.noise > 0.0 {
                        *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                ab.extend_from_slice(&a);
                xs.extend_from_slice(&buf);
                nominal.push(*idx);
                config.push(c);
                group.push(*g);
            }
        }
    }
    let n = config.len();
    SampleTable {
        abundances: Tensor::matrix(n, k, ab),
        nominal,
        config,
        group,
        x: Tensor::matrix(n, spec.channels, xs),
        outlier: vec![false; n],
        signatures,
    }
}

/// Samples every grid composition under every configuration, `replicates`
/// times each. A pure function of `(spec, seed)`.
pub fn generate_synthetic_mixtures(spec: &MixtureSpec, seed: u64) -> Result<SampleTable, DataError> {
    spec.validate()?;
    let grid = simplex_grid(spec.endmembers, spec.resolution);
    let nominals: Vec<(usize, usize, Vec<f64>)> = grid.into_iter().enumerate().map(|(i, a)| (0, i, a)).collect();
    let j = spec.jitter;
    let k = spec.endmembers;
    let mut jitter = |rng: &mut ChaCha8Rng, a: &[f64]| -> Vec<f64> {
        if j == 0.0 {
            return a.to_vec();
        }
        let d = dirichlet_one(rng, k);
        a.iter().zip(d).map(|(a, d)| (1.0 - j) * a + j * d).collect()
    };
    Ok(build_table(spec, &nominals, &mut jitter, seed))
}

/// Samples compositions clustered around group centres: each draw is
/// `Dirichlet(concentration · centre)`. `replicates` counts draws per
/// (group, configuration).
pub fn generate_grouped_mixtures(spec: &MixtureSpec, centres: &[Vec<f64>], concentration: f64, seed: u64) -> Result<SampleTable, DataError> {
    spec.validate()?;
    if centres.iter().any(|c| c.len() != spec.endmembers || c.iter().any(|v| !(*v > 0.0))) {
        return Err(spec_err("centres", "each centre needs `endmembers` positive components"));
    }
    if !(concentration > 0.0) {
        return Err(spec_err("concentration", "must be positive"));
    }
    let nominals: Vec<(usize, usize, Vec<f64>)> = centres.iter().enumerate().map(|(g, c)| (g, g, c.clone())).collect();
    let mut jitter = |rng: &mut ChaCha8Rng, c: &[f64]| -> Vec<f64> {
        let s = c.iter().sum::<f64>();
        let draws: Vec<f64> = c
            .iter()
            .map(|v| Gamma::new(concentration * v / s, 1.0).unwrap().sample(rng).max(1e-300))
            .collect();
        let t: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / t).collect()
    };
    Ok(build_table(spec, &nominals, &mut jitter, seed))
}

/// Darkens a random `fraction` of rows to between 35% and 55% of their
/// brightness and marks them as outliers.
pub fn inject_outliers(table: &mut SampleTable, fraction: f64, seed: u64) -> Vec<usize> {
    let n = table.len();
    let m = ((n as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_746c);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(m).collect();
    chosen.sort_unstable();
    let c = table.x.cols();
    for &i in &chosen {
        let f = rng.random_range(0.35..0.55);
        table.x.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= f);
        table.outlier[i] = true;
    }
    chosen
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub unfeatured: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            labeled: 500,
            unlabeled: 992,
            unfeatured: 501,
        }
    }
}

/// L1 distance from `a` to the nearest simplex vertex.
pub fn corner_distance(a: &[f64]) -> f64 {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    2.0 * (1.0 - max)
}

fn draw_prior_z(rng: &mut ChaCha8Rng, n: usize, z: Option<(usize, f64, f64)>) -> Option<Tensor> {
    z.map(|(dim, lo, hi)| Tensor::matrix(n, dim, (0..n * dim).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()))
}

/// Labeled and unlabeled items come from disjoint interior rows (more than
/// `corner_radius` from every vertex in L1); unfeatured compositions are
/// drawn with replacement from rows within `corner_radius` of a vertex.
/// With `z = Some((dim, lo, hi))` each unfeatured composition gets an
/// i.i.d. `U(lo, hi)` nuisance.
pub fn make_simplex_split(
    table: &SampleTable,
    corner_radius: f64,
    counts: SplitCounts,
    z: Option<(usize, f64, f64)>,
    seed: u64,
) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7370_6c74);
    let (mut interior, mut corners) = (Vec::new(), Vec::new());
    for (i, a) in table.abundances.row_iter().enumerate() {
        if corner_distance(a) <= corner_radius {
            corners.push(i);
        } else {
            interior.push(i);
        }
    }
    if counts.labeled + counts.unlabeled > interior.len() {
        return Err(DataError::Infeasible(format!(
            "{} labeled + {} unlabeled requested but only {} interior rows",
            counts.labeled,
            counts.unlabeled,
            interior.len()
        )));
    }
    if counts.unfeatured > 0 && corners.is_empty() {
        return Err(DataError::Infeasible(format!("no rows within {corner_radius} of a vertex")));
    }
    interior.shuffle(&mut rng);
    let labeled_rows = interior[..counts.labeled].to_vec();
    let unlabeled_rows = interior[counts.labeled..counts.labeled + counts.unlabeled].to_vec();
    let unf: Vec<usize> = (0..counts.unfeatured).map(|_| corners[rng.random_range(0..corners.len())]).collect();
    let unfeatured_z = draw_prior_z(&mut rng, counts.unfeatured, z);
    Ok(Dataset {
        labeled_x: table.x.select_rows(&labeled_rows),
        labeled_y: table.abundances.select_rows(&labeled_rows),
        unlabeled_x: table.x.select_rows(&unlabeled_rows),
        unfeatured_y: table.abundances.select_rows(&unf),
        unfeatured_z,
        standardization: Standardization::identity(table.x.cols()),
        labeled_rows,
        unlabeled_rows,
    })
}

/// Training data restricted to `train_groups`: a `labeled_fraction` of
/// their rows is labeled, the rest unlabeled. Unfeatured compositions are
/// i.i.d. Dir(1) draws, which carry no group features.
pub fn make_group_split(
    table: &SampleTable,
    train_groups: &[usize],
    labeled_fraction: f64,
    unfeatured: usize,
    z: Option<(usize, f64, f64)>,
    seed: u64,
) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6770_7370);
    let mut rows: Vec<usize> = (0..table.len()).filter(|i| train_groups.contains(&table.group[*i])).collect();
    if rows.is_empty() {
        return Err(DataError::Infeasible("no rows in the training groups".into()));
    }
    rows.shuffle(&mut rng);
    let nl = ((rows.len() as f64) * labeled_fraction).round() as usize;
    let labeled_rows = rows[..nl].to_vec();
    let unlabeled_rows = rows[nl..].to_vec();
    let k = table.abundances.cols();
    let ys: Vec<f64> = (0..unfeatured).flat_map(|_| dirichlet_one(&mut rng, k)).collect();
    let unfeatured_z = draw_prior_z(&mut rng, unfeatured, z);
    Ok(Dataset {
        labeled_x: table.x.select_rows(&labeled_rows),
        labeled_y: table.abundances.select_rows(&labeled_rows),
        unlabeled_x: table.x.select_rows(&unlabeled_rows),
        unfeatured_y: Tensor::matrix(unfeatured, k, ys),
        unfeatured_z,
        standardization: Standardization::identity(table.x.cols()),
        labeled_rows,
        unlabeled_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_binomial_size() {
        let g = simplex_grid(3, 10);
        assert_eq!(g.len(), 66);
        let distinct: std::collections::BTreeSet<Vec<u64>> = g.iter().map(|a| a.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(distinct.len(), 66);
        assert_eq!(simplex_grid(4, 3).len(), 20);
    }

    #[test]
    fn abundances_on_simplex_and_deterministic() {
        let spec = MixtureSpec::default();
        let t = generate_synthetic_mixtures(&spec, 5).unwrap();
        assert_eq!(t.len(), 66 * 3 * spec.replicates);
        for a in t.abundances.row_iter() {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(t, generate_synthetic_mixtures(&spec, 5).unwrap());
    }

    #[test]
    fn noiseless_linear_corner_is_scaled_signature() {
        let spec = MixtureSpec {
            noise: 0.0,
            jitter: 0.0,
            grain: 0.0,
            mixing: Mixing::Linear,
            replicates: 1,
            ..MixtureSpec::default()
        };
        let t = generate_synthetic_mixtures(&spec, 2).unwrap();
        for i in 0..t.len() {
            let a = t.abundances.row(i);
            if let Some(k) = a.iter().position(|v| *v == 1.0) {
                let level = spec.levels[t.config[i]];
                for (x, s) in t.x.row(i).iter().zip(t.signatures.row(k)) {
                    assert_eq!(*x, s * level);
                }
            }
        }
    }

    #[test]
    fn levels_follow_angle_gaps() {
        let l = levels_from_angles(&INCIDENCE_ANGLES, 0.01);
        let gap_a = l[0] - l[1];
        let gap_b = l[2] - l[1];
        assert!(((gap_a / gap_b) - 8.8 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn split_excludes_corners_and_is_disjoint() {
        let t = generate_synthetic_mixtures(&MixtureSpec::default(), 1).unwrap();
        let ds = make_simplex_split(&t, 0.15, SplitCounts::default(), Some((1, -1.5, 1.5)), 9).unwrap();
        assert_eq!(ds.counts(), (500, 992, 501));
        for a in ds.labeled_y.row_iter() {
            assert!(corner_distance(a) > 0.15);
        }
        for a in ds.unfeatured_y.row_iter() {
            assert!(corner_distance(a) <= 0.15);
        }
        let l: std::collections::BTreeSet<_> = ds.labeled_rows.iter().collect();
        assert!(ds.unlabeled_rows.iter().all(|r| !l.contains(r)));
        ds.validate(Some((-1.5, 1.5))).unwrap();
    }

    #[test]
    fn infeasible_split_is_an_error() {
        let spec = MixtureSpec { replicates: 1, ..MixtureSpec::default() };
        let t = generate_synthetic_mixtures(&spec, 1).unwrap();
        assert!(matches!(make_simplex_split(&t, 0.15, SplitCounts::default(), None, 0), Err(DataError::Infeasible(_))));
    }

    #[test]
    fn outliers_are_marked() {
        let mut t = generate_synthetic_mixtures(&MixtureSpec::default(), 1).unwrap();
        let before = t.x.clone();
        let idx = inject_outliers(&mut t, 0.05, 3);
        assert_eq!(idx.len(), (t.len() as f64 * 0.05).round() as usize);
        assert_eq!(t.outlier.iter().filter(|o| **o).count(), idx.len());
        assert!(t.x.row(idx[0])[0] < before.row(idx[0])[0]);
    }
}
