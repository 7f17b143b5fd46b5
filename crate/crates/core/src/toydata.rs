//! Two-dimensional Gaussian mixtures with known mode centers, and the uniform
//! latent box sampler.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid toy distribution: {0}")]
    Invalid(String),
}

/// Equal-weight mixture of isotropic Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyDistribution {
    /// `k` modes evenly spaced on a circle.
    Ring { k: usize, radius: f64, sigma: f64 },
    /// `side x side` lattice centered at the origin.
    Grid { side: usize, spacing: f64, sigma: f64 },
}

impl Default for ToyDistribution {
    fn default() -> Self {
        ToyDistribution::Ring {
            k: 8,
            radius: 2.0,
            sigma: 0.05,
        }
    }
}

impl ToyDistribution {
    pub fn default_grid() -> Self {
        ToyDistribution::Grid {
            side: 5,
            spacing: 1.0,
            sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (count, scale, sigma) = match *self {
            ToyDistribution::Ring { k, radius, sigma } => (k, radius, sigma),
            ToyDistribution::Grid {
                side,
                spacing,
                sigma,
            } => (side, spacing, sigma),
        };
        if count == 0 {
            return Err(DataError::Invalid("mode count must be >= 1".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DataError::Invalid(format!("sigma {sigma} must be > 0")));
        }
        if count > 1 && !(scale > 0.0 && scale.is_finite()) {
            return Err(DataError::Invalid(format!(
                "radius/spacing {scale} must be > 0 for distinct centers"
            )));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            ToyDistribution::Ring { sigma, .. } | ToyDistribution::Grid { sigma, .. } => sigma,
        }
    }

    pub fn num_modes(&self) -> usize {
        match *self {
            ToyDistribution::Ring { k, .. } => k,
            ToyDistribution::Grid { side, .. } => side * side,
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    /// Mode centers; the ring starts at angle 0 and runs counter-clockwise,
    /// the grid is row-major with x varying fastest.
    pub fn mode_centers(&self) -> Vec<[f64; 2]> {
        match *self {
            ToyDistribution::Ring { k, radius, .. } => (0..k)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / k as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            ToyDistribution::Grid { side, spacing, .. } => {
                let off = (side as f64 - 1.0) / 2.0;
                let mut out = Vec::with_capacity(side * side);
                for j in 0..side {
                    for i in 0..side {
                        out.push([(i as f64 - off) * spacing, (j as f64 - off) * spacing]);
                    }
                }
                out
            }
        }
    }

    /// Analytic mean of the mixture.
    pub fn mean(&self) -> [f64; 2] {
        let c = self.mode_centers();
        let n = c.len() as f64;
        let (sx, sy) = c.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }

    /// Analytic per-coordinate variance of the mixture.
    pub fn variance(&self) -> [f64; 2] {
        let c = self.mode_centers();
        let m = self.mean();
        let n = c.len() as f64;
        let s2 = self.sigma() * self.sigma();
        let vx = c.iter().map(|p| (p[0] - m[0]).powi(2)).sum::<f64>() / n;
        let vy = c.iter().map(|p| (p[1] - m[1]).powi(2)).sum::<f64>() / n;
        [vx + s2, vy + s2]
    }

    /// `n x 2` samples: a uniformly chosen mode plus `N(0, sigma^2 I)` noise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        self.sample_labeled(n, rng).0
    }

    /// Like [`ToyDistribution::sample`], also returning each sample's mode.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let centers = self.mode_centers();
        let sigma = self.sigma();
        let mut out = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let m = rng.random_range(0..centers.len());
            let ex: f64 = StandardNormal.sample(rng);
            let ey: f64 = StandardNormal.sample(rng);
            row[0] = centers[m][0] + sigma * ex;
            row[1] = centers[m][1] + sigma * ey;
            labels.push(m);
        }
        (out, labels)
    }
}

/// Uniform latent distribution on `[-1, 1]^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub dim: usize,
}

impl LatentSpec {
    pub fn new(dim: usize) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Invalid("latent dim must be >= 1".into()));
        }
        Ok(Self { dim })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid interval");
        Array2::from_shape_simple_fn((n, self.dim), || u.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring(k: usize, radius: f64, sigma: f64) -> ToyDistribution {
        ToyDistribution::Ring { k, radius, sigma }
    }

    #[test]
    fn ring_of_four() {
        let c = ring(4, 1.0, 0.05).mode_centers();
        let want = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (p, q) in c.iter().zip(&want) {
            assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_of_five() {
        let c = ToyDistribution::default_grid().mode_centers();
        assert_eq!(c.len(), 25);
        assert_eq!(c[0], [-2.0, -2.0]);
        assert_eq!(c[24], [2.0, 2.0]);
        assert!(c.contains(&[-2.0, 2.0]) && c.contains(&[2.0, -2.0]));
    }

    #[test]
    fn ring_centers_lie_on_circle() {
        for p in ring(8, 2.0, 0.05).mode_centers() {
            assert!((p[0].hypot(p[1]) - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn validation() {
        assert!(ring(0, 1.0, 0.1).validate().is_err());
        assert!(ring(3, 1.0, 0.0).validate().is_err());
        assert!(ring(3, 0.0, 0.1).validate().is_err());
        assert!(ring(1, 0.0, 0.1).validate().is_ok());
        assert!(ToyDistribution::default().validate().is_ok());
        assert!(LatentSpec::new(0).is_err());
    }

    #[test]
    fn tiny_sigma_samples_sit_on_centers() {
        let d = ring(8, 2.0, 1e-30);
        let centers = d.mode_centers();
        let s = d.sample(500, &mut ChaCha8Rng::seed_from_u64(3));
        for row in s.rows() {
            let hit = centers
                .iter()
                .any(|c| (c[0] - row[0]).abs() < 1e-20 && (c[1] - row[1]).abs() < 1e-20);
            assert!(hit);
        }
    }

    #[test]
    fn per_mode_counts_are_binomial() {
        let n = 100_000;
        let (_, labels) = ToyDistribution::default().sample_labeled(n, &mut ChaCha8Rng::seed_from_u64(11));
        let mut counts = [0usize; 8];
        labels.iter().for_each(|&m| counts[m] += 1);
        let p = 1.0 / 8.0;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = ToyDistribution::default();
        let a = d.sample(64, &mut ChaCha8Rng::seed_from_u64(5));
        let b = d.sample(64, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let l = LatentSpec::new(2).unwrap();
        assert_eq!(
            l.sample(64, &mut ChaCha8Rng::seed_from_u64(5)),
            l.sample(64, &mut ChaCha8Rng::seed_from_u64(5))
        );
    }

    #[test]
    fn latent_samples_in_box_and_centered() {
        let n = 100_000;
        for dim in [1usize, 2] {
            let s = LatentSpec::new(dim).unwrap().sample(n, &mut ChaCha8Rng::seed_from_u64(8));
            assert_eq!(s.ncols(), dim);
            assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
            for col in s.columns() {
                assert!(col.mean().unwrap().abs() < 0.02);
            }
        }
    }

    #[test]
    fn empirical_mixture_mean_within_confidence_bounds() {
        let n = 100_000;
        for d in [ToyDistribution::default(), ToyDistribution::default_grid(), ring(3, 1.5, 0.2)] {
            let s = d.sample(n, &mut ChaCha8Rng::seed_from_u64(21));
            let m = d.mean();
            let v = d.variance();
            for c in 0..2 {
                let emp = s.column(c).mean().unwrap();
                assert!((emp - m[c]).abs() <= 4.0 * (v[c] / n as f64).sqrt());
            }
        }
    }
}
