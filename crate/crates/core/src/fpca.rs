//! Functional principal components of complete ILR curves on the ten-lag grid.
//!
//! Inner products are plain sums over lags, so the eigenfunctions are the
//! eigenvectors of the 10x10 sample covariance matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::triangle::NUM_LAGS;

/// Mean function, leading eigenfunctions and eigenvalues of a curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub mean: Vec<f64>,
    /// Column-major: `eigenfunctions[k]` is the k-th eigenfunction over lags.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Leading eigenvalues, nonincreasing.
    pub eigenvalues: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_train: usize,
    /// Trace of the sample covariance (sum of all eigenvalues).
    #[serde(default)]
    pub total_variance: f64,
}

/// Flip `v` so that its entry of largest magnitude is nonnegative.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Fit the mean and top-`k` eigenpairs of the lag covariance (denominator
/// `N - 1`) of complete curves.
pub fn fit_fpca<C: AsRef<[f64]>>(curves: &[C], k: usize) -> Result<FpcaModel> {
    let n = curves.len();
    if k == 0 || k > NUM_LAGS {
        return Err(Error::Argument(format!(
            "number of components must be in 1..={NUM_LAGS}, got {k}"
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "FPCA needs at least 2 curves, got {n}"
        )));
    }
    if k > n {
        return Err(Error::Argument(format!(
            "cannot extract {k} components from {n} curves"
        )));
    }
    for (i, c) in curves.iter().enumerate() {
        let c = c.as_ref();
        if c.len() != NUM_LAGS {
            return Err(Error::Validation(format!(
                "curve {i} has {} lags; FPCA requires complete curves",
                c.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("curve {i} has non-finite values")));
        }
    }

    let mut mean = vec![0.0; NUM_LAGS];
    for c in curves {
        for (m, v) in mean.iter_mut().zip(c.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(NUM_LAGS, NUM_LAGS);
    let mut centered = [0.0; NUM_LAGS];
    for c in curves {
        for (x, (v, m)) in c.as_ref().iter().zip(&mean).enumerate() {
            centered[x] = v - m;
        }
        for i in 0..NUM_LAGS {
            for j in i..NUM_LAGS {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..NUM_LAGS {
        for j in i..NUM_LAGS {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..NUM_LAGS).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut eigenfunctions = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        fix_sign(&mut v);
        eigenfunctions.push(v);
        eigenvalues.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(FpcaModel {
        mean,
        eigenfunctions,
        eigenvalues,
        k,
        n_train: n,
        total_variance,
    })
}

impl FpcaModel {
    /// The same model restricted to its first `k` components.
    pub fn truncated(&self, k: usize) -> Result<FpcaModel> {
        if k == 0 || k > self.k {
            return Err(Error::Argument(format!(
                "cannot truncate a {}-component model to {k}",
                self.k
            )));
        }
        Ok(FpcaModel {
            mean: self.mean.clone(),
            eigenfunctions: self.eigenfunctions[..k].to_vec(),
            eigenvalues: self.eigenvalues[..k].to_vec(),
            k,
            n_train: self.n_train,
            total_variance: self.total_variance,
        })
    }

    /// `phi_k(lag)`.
    pub fn phi(&self, k: usize, lag: usize) -> f64 {
        self.eigenfunctions[k][lag]
    }

    /// 10 x K matrix of eigenfunctions.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(NUM_LAGS, self.k, |x, k| self.eigenfunctions[k][x])
    }

    /// Scores `<y - mu, phi_k>` of a complete curve.
    pub fn scores(&self, curve: &[f64]) -> Result<Vec<f64>> {
        if curve.len() != NUM_LAGS {
            return Err(Error::Validation(format!(
                "scoring needs a complete curve, got {} lags",
                curve.len()
            )));
        }
        Ok(self
            .eigenfunctions
            .iter()
            .map(|phi| {
                phi.iter()
                    .zip(curve.iter().zip(&self.mean))
                    .map(|(p, (y, m))| p * (y - m))
                    .sum()
            })
            .collect())
    }

    /// `mu(x) + sum_k phi_k(x) beta_k` over all lags.
    pub fn reconstruct(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.k {
            return Err(Error::Argument(format!(
                "expected {} scores, got {}",
                self.k,
                scores.len()
            )));
        }
        Ok((0..NUM_LAGS)
            .map(|x| {
                self.mean[x]
                    + self
                        .eigenfunctions
                        .iter()
                        .zip(scores)
                        .map(|(phi, b)| phi[x] * b)
                        .sum::<f64>()
            })
            .collect())
    }

    /// Residual curve `y - reconstruct(scores(y))`.
    pub fn residual(&self, curve: &[f64]) -> Result<Vec<f64>> {
        let fit = self.reconstruct(&self.scores(curve)?)?;
        Ok(curve.iter().zip(&fit).map(|(y, f)| y - f).collect())
    }

    /// Share of total variance carried by the retained components.
    pub fn explained_variance(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        (self.eigenvalues.iter().sum::<f64>() / self.total_variance).min(1.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: FpcaModel = serde_json::from_str(s)?;
        if m.eigenfunctions.len() != m.k
            || m.eigenvalues.len() != m.k
            || m.mean.len() != NUM_LAGS
            || m.eigenfunctions.iter().any(|p| p.len() != NUM_LAGS)
        {
            return Err(Error::Validation("inconsistent FPCA model document".into()));
        }
        Ok(m)
    }

    /// SHA-256 of the JSON document, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("model serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Score matrix of `curves` under `model`, one row per curve.
pub fn score_matrix<C: AsRef<[f64]>>(model: &FpcaModel, curves: &[C]) -> Result<Vec<Vec<f64>>> {
    curves.iter().map(|c| model.scores(c.as_ref())).collect()
}

/// Dense copy of a curve as an nalgebra vector.
pub(crate) fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_curves(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..NUM_LAGS).map(|x| rng.random::<f64>() / (1 + x) as f64).collect())
            .collect()
    }

    #[test]
    fn identical_curves_have_zero_spectrum() {
        let c: Vec<f64> = (0..NUM_LAGS).map(|x| x as f64 * 0.01).collect();
        let m = fit_fpca(&[c.clone(), c.clone(), c.clone()], 2).unwrap();
        for (a, b) in m.mean.iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(m.eigenvalues.iter().all(|&l| l.abs() < 1e-28));
    }

    #[test]
    fn rank_one_sample_recovers_direction() {
        let v: Vec<f64> = {
            let raw: Vec<f64> = (0..NUM_LAGS).map(|x| (x as f64 - 3.0).sin()).collect();
            let norm = raw.iter().map(|a| a * a).sum::<f64>().sqrt();
            raw.iter().map(|a| a / norm).collect()
        };
        let mu: Vec<f64> = (0..NUM_LAGS).map(|x| 0.2 / (1 + x) as f64).collect();
        let a = [0.3, -1.2, 0.7, 2.0, -0.4, 0.1];
        let curves: Vec<Vec<f64>> = a
            .iter()
            .map(|ai| mu.iter().zip(&v).map(|(m, vi)| m + ai * vi).collect())
            .collect();
        let m = fit_fpca(&curves, 1).unwrap();
        let sign = if v.iter().cloned().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b }) < 0.0 {
            -1.0
        } else {
            1.0
        };
        for x in 0..NUM_LAGS {
            assert!((m.phi(0, x) - sign * v[x]).abs() < 1e-10);
        }
        let mean_a = a.iter().sum::<f64>() / a.len() as f64;
        let var_a = a.iter().map(|x| (x - mean_a).powi(2)).sum::<f64>() / (a.len() - 1) as f64;
        assert!((m.eigenvalues[0] - var_a).abs() < 1e-10);
    }

    #[test]
    fn full_rank_reconstruction_is_exact() {
        let curves = random_curves(1, 40);
        let m = fit_fpca(&curves, NUM_LAGS).unwrap();
        for c in &curves {
            let r = m.reconstruct(&m.scores(c).unwrap()).unwrap();
            for (a, b) in r.iter().zip(c) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        assert!((m.explained_variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn basis_is_orthonormal_and_sign_fixed() {
        let m = fit_fpca(&random_curves(2, 30), NUM_LAGS).unwrap();
        let phi = m.basis_matrix();
        let gram = phi.transpose() * &phi;
        for i in 0..NUM_LAGS {
            for j in 0..NUM_LAGS {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-10);
            }
            let col = &m.eigenfunctions[i];
            let big = col.iter().cloned().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(big >= 0.0);
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn scores_special_cases() {
        let m = fit_fpca(&random_curves(3, 25), 4).unwrap();
        assert!(m.scores(&m.mean).unwrap().iter().all(|&s| s == 0.0));
        let shifted: Vec<f64> = m.mean.iter().zip(&m.eigenfunctions[0]).map(|(a, b)| a + b).collect();
        let s = m.scores(&shifted).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(m.reconstruct(&[0.0; 4]).unwrap(), m.mean);
        assert!(m.reconstruct(&[0.0; 3]).is_err());
    }

    #[test]
    fn scores_match_matrix_product() {
        let curves = random_curves(4, 25);
        let m = fit_fpca(&curves, 5).unwrap();
        let phi = m.basis_matrix();
        let y = to_dvector(&curves[7]) - to_dvector(&m.mean);
        let direct = phi.transpose() * y;
        let s = m.scores(&curves[7]).unwrap();
        for k in 0..5 {
            assert!((direct[k] - s[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn training_scores_are_centered_and_errors_shrink_with_k() {
        let curves = random_curves(5, 50);
        let mut prev_sse = f64::INFINITY;
        let mut prev_ev = 0.0;
        for k in 1..=NUM_LAGS {
            let m = fit_fpca(&curves, k).unwrap();
            let b = score_matrix(&m, &curves).unwrap();
            for j in 0..k {
                let mean: f64 = b.iter().map(|r| r[j]).sum::<f64>() / b.len() as f64;
                assert!(mean.abs() < 1e-12);
            }
            let mut resid_mean = [0.0; NUM_LAGS];
            let mut sse = 0.0;
            for c in &curves {
                for (x, r) in m.residual(c).unwrap().iter().enumerate() {
                    resid_mean[x] += r / curves.len() as f64;
                    sse += r * r;
                }
            }
            assert!(resid_mean.iter().all(|r| r.abs() < 1e-12));
            assert!(sse <= prev_sse + 1e-15);
            assert!(m.explained_variance() >= prev_ev - 1e-15);
            prev_sse = sse;
            prev_ev = m.explained_variance();
        }
    }

    #[test]
    fn scaling_curves_scales_model() {
        let curves = random_curves(6, 30);
        let c = 3.5;
        let scaled: Vec<Vec<f64>> = curves.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
        let a = fit_fpca(&curves, 3).unwrap();
        let b = fit_fpca(&scaled, 3).unwrap();
        for x in 0..NUM_LAGS {
            assert!((b.mean[x] - c * a.mean[x]).abs() < 1e-12);
            for k in 0..3 {
                assert!((b.phi(k, x) - a.phi(k, x)).abs() < 1e-8);
            }
        }
        for k in 0..3 {
            assert!((b.eigenvalues[k] - c * c * a.eigenvalues[k]).abs() < 1e-10);
        }
        let sa = a.scores(&curves[0]).unwrap();
        let sb = b.scores(&scaled[0]).unwrap();
        for k in 0..3 {
            assert!((sb[k] - c * sa[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn argument_checks() {
        let curves = random_curves(7, 5);
        assert!(fit_fpca(&curves, 11).is_err());
        assert!(fit_fpca(&curves, 0).is_err());
        assert!(fit_fpca(&curves, 6).is_err());
        assert!(fit_fpca(&curves[..1], 1).is_err());
        let short = vec![vec![0.0; 9], vec![0.0; 9]];
        assert!(fit_fpca(&short, 1).is_err());
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let m = fit_fpca(&random_curves(8, 20), 6).unwrap();
        let back = FpcaModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_json().unwrap().contains("\"K\": 6"));
        assert_eq!(m.digest().len(), 64);
    }
}
