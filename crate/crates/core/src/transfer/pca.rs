use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure, Result};

/// Mean-centred projection onto the leading covariance eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    components: Vec<Vec<f64>>,
    /// Eigenvalue of each component, non-increasing.
    variances: Vec<f64>,
    /// Sum of all eigenvalues.
    total_variance: f64,
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    ensure!(!rows.is_empty(), Contract, "no samples");
    let d = rows[0].len();
    ensure!(
        rows.iter().all(|r| r.len() == d),
        Dimension,
        "samples have differing lengths"
    );
    ensure!(
        rows.iter().flatten().all(|v| v.is_finite()),
        Contract,
        "samples contain non-finite values"
    );
    Ok(d)
}

impl Pca {
    /// Fits `out_dim` components; needs at least `out_dim` samples and dimensions.
    pub fn fit(samples: &[Vec<f64>], out_dim: usize) -> Result<Self> {
        let d = check_rows(samples)?;
        let n = samples.len();
        ensure!(out_dim >= 1, Contract, "out_dim must be positive");
        ensure!(n >= out_dim, Contract, "{n} samples cannot give {out_dim} components");
        ensure!(d >= out_dim, Contract, "{d}-dim features cannot give {out_dim} components");
        let mut mean = vec![0.0; d];
        for r in samples {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
        let denom = (n.max(2) - 1) as f64;
        let cov = (centred.transpose() * &centred) / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components = order[..out_dim]
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                // fix the sign so the largest-magnitude entry is positive
                let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                if pivot < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        let variances = order[..out_dim].iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
        let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        Ok(Self {
            mean,
            components,
            variances,
            total_variance,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.variances
    }

    /// Share of the total variance carried by each component.
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// `components · (x − mean)`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.in_dim(),
            Dimension,
            "feature has {} values, projection expects {}",
            x.len(),
            self.in_dim()
        );
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum())
            .collect())
    }

    /// `mean + componentsᵀ · z`.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        ensure!(z.len() == self.out_dim(), Dimension, "code has {} values, expected {}", z.len(), self.out_dim());
        let mut x = self.mean.clone();
        for (c, &w) in self.components.iter().zip(z) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += w * ci;
            }
        }
        Ok(x)
    }

    /// Mean squared distance between samples and their reconstructions.
    pub fn reconstruction_error(&self, samples: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let back = self.inverse(&self.apply(s)?)?;
            total += s.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / samples.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn components_are_orthonormal_and_sorted() {
        let p = Pca::fit(&random(60, 20, 1), 8).unwrap();
        for (i, a) in p.components().iter().enumerate() {
            for (j, b) in p.components().iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - (i == j) as u8 as f64).abs() < 1e-9);
            }
        }
        assert!(p.explained_variance().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mean_maps_to_zero_and_span_round_trips() {
        let data = random(50, 10, 2);
        let p = Pca::fit(&data, 4).unwrap();
        assert!(p.apply(p.mean()).unwrap().iter().all(|v| v.abs() < 1e-12));
        let z = vec![0.3, -1.0, 0.5, 2.0];
        let x = p.inverse(&z).unwrap();
        for (a, b) in p.apply(&x).unwrap().iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_one_data_has_one_component() {
        let data: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = Pca::fit(&data, 2).unwrap();
        assert!(p.explained_ratio()[0] > 0.9999);
    }

    #[test]
    fn preconditions() {
        assert!(Pca::fit(&random(5, 10, 3), 8).is_err());
        assert!(Pca::fit(&random(50, 4, 3), 8).is_err());
        let p = Pca::fit(&random(20, 5, 3), 2).unwrap();
        assert!(p.apply(&[1.0]).is_err());
    }
}
