use rand::distributions::{Distribution, WeightedIndex};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// Gaussian mixture with full covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// Eight isotropic components evenly spaced on a circle.
    pub fn eight_gaussians(radius: f64, std: f64) -> Self {
        let means = (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::PI / 4.0;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let cov = vec![vec![std * std, 0.0], vec![0.0, std * std]];
        MixtureSpec {
            means,
            covs: vec![cov; 8],
            weights: vec![1.0 / 8.0; 8],
        }
    }

    pub fn gaussian_1d(mean: f64, var: f64) -> Self {
        MixtureSpec {
            means: vec![vec![mean]],
            covs: vec![vec![vec![var]]],
            weights: vec![1.0],
        }
    }

    pub fn standard_normal(dim: usize) -> Self {
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| f64::from(i == j)).collect())
            .collect();
        MixtureSpec {
            means: vec![vec![0.0; dim]],
            covs: vec![cov],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Checks shapes, weights and positive-definiteness; returns the
    /// Cholesky factor of every covariance.
    pub fn validate(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let d = self.dim();
        let k = self.means.len();
        if k == 0 || d == 0 {
            return Err(Error::invalid(
                "mixture needs at least one component of dimension >= 1",
            ));
        }
        if self.covs.len() != k || self.weights.len() != k {
            return Err(Error::invalid(format!(
                "{k} means, {} covariances, {} weights",
                self.covs.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(format!(
                "weights {:?} must be >= 0 and sum to 1",
                self.weights
            )));
        }
        self.means
            .iter()
            .zip(&self.covs)
            .enumerate()
            .map(|(i, (m, c))| {
                if m.len() != d || c.len() != d || c.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid(format!(
                        "component {i} has inconsistent dimensions"
                    )));
                }
                cholesky(c).ok_or_else(|| {
                    Error::invalid(format!(
                        "covariance of component {i} is not positive-definite"
                    ))
                })
            })
            .collect()
    }

    /// Log-density at a point.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let chol = self.validate()?;
        let d = self.dim();
        let mut terms = Vec::with_capacity(self.means.len());
        for ((m, l), w) in self.means.iter().zip(&chol).zip(&self.weights) {
            if *w == 0.0 {
                continue;
            }
            // solve L z = x - m
            let mut z = vec![0.0; d];
            for i in 0..d {
                let s: f64 = (0..i).map(|j| l[i][j] * z[j]).sum();
                z[i] = (x[i] - m[i] - s) / l[i][i];
            }
            let logdet: f64 = (0..d).map(|i| l[i][i].ln()).sum();
            let quad: f64 = z.iter().map(|v| v * v).sum();
            terms.push(
                w.ln() - 0.5 * quad - logdet - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
            );
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// `n` i.i.d. draws as an `[n, d]` tensor plus each draw's component.
pub fn gen_mixture_labeled(
    spec: &MixtureSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("gen_mixture needs n >= 1"));
    }
    let chol = spec.validate()?;
    let d = spec.dim();
    let pick = WeightedIndex::new(&spec.weights).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick.sample(rng);
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..d {
            let lz: f64 = (0..=i).map(|j| chol[k][i][j] * z[j]).sum();
            data.push(spec.means[k][i] + lz);
        }
        labels.push(k);
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}

pub fn gen_mixture(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> Result<Tensor> {
    Ok(gen_mixture_labeled(spec, n, rng)?.0)
}
