//! LASSO regressions of FPCA scores on encoded company features.
//!
//! Each factor is fit separately by cyclic coordinate descent on standardized
//! features with an unpenalized intercept, minimizing
//! `(1/2N) ||b - a - X theta||^2 + penalty * ||theta||_1`.

use std::io::Write;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::cv::GroupFolds;
use crate::error::{Error, Result};

/// Coordinate descent stops once no standardized coefficient moves by more.
pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 100_000;
pub const DEFAULT_CV_FOLDS: usize = 10;
pub const DEFAULT_CV_GRID: usize = 30;
/// Smallest penalty on the CV path, relative to the null-model threshold.
const CV_PATH_RATIO: f64 = 1e-3;

/// How the per-factor penalty is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PenaltySpec {
    Fixed(f64),
    PerFactor(Vec<f64>),
    /// Group V-fold CV minimizing held-out squared error over a
    /// log-spaced path from the null-model threshold down.
    CrossValidated { folds: usize, grid_size: usize, seed: u64 },
}

impl PenaltySpec {
    pub fn cross_validated(seed: u64) -> Self {
        PenaltySpec::CrossValidated {
            folds: DEFAULT_CV_FOLDS,
            grid_size: DEFAULT_CV_GRID,
            seed,
        }
    }
}

/// Column centering and population-sd scaling. A zero scale marks a dropped
/// (constant) column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    fn fit(x: &[Vec<f64>], rows: &[usize], p: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(&x[i]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = vec![0.0; p];
        for &i in rows {
            for j in 0..p {
                scale[j] += (x[i][j] - mean[j]).powi(2);
            }
        }
        for (j, s) in scale.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s <= 1e-12 * mean[j].abs().max(1.0) {
                *s = 0.0;
            }
        }
        Standardization { mean, scale }
    }

    fn kept(&self) -> Vec<usize> {
        (0..self.scale.len()).filter(|&j| self.scale[j] > 0.0).collect()
    }
}

/// One factor's fitted regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorFit {
    pub intercept: f64,
    /// Coefficients on the original feature scale; exact zeros when inactive.
    pub coef: Vec<f64>,
    /// Coefficients on the standardized scale (zeros for dropped columns).
    pub std_coef: Vec<f64>,
    pub penalty: f64,
    pub sweeps: usize,
}

/// Per-factor regression prior `beta_RM = intercept + x' theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePrior {
    pub feature_names: Vec<String>,
    pub standardization: Standardization,
    pub factors: Vec<FactorFit>,
}

/// Gram matrix of the standardized kept columns over `rows`, divided by N.
struct Design {
    kept: Vec<usize>,
    gram: Vec<f64>,
}

impl Design {
    fn new(x: &[Vec<f64>], rows: &[usize], st: &Standardization) -> Self {
        let kept = st.kept();
        let q = kept.len();
        let n = rows.len() as f64;
        let mut gram = vec![0.0; q * q];
        let mut z = vec![0.0; q];
        for &i in rows {
            for (a, &j) in kept.iter().enumerate() {
                z[a] = (x[i][j] - st.mean[j]) / st.scale[j];
            }
            for a in 0..q {
                for b in a..q {
                    gram[a * q + b] += z[a] * z[b];
                }
            }
        }
        for a in 0..q {
            for b in a..q {
                let v = gram[a * q + b] / n;
                gram[a * q + b] = v;
                gram[b * q + a] = v;
            }
        }
        Design { kept, gram }
    }

    /// `(1/N) Z' (y - mean(y))` and `mean(y)`.
    fn correlations(
        &self,
        x: &[Vec<f64>],
        y: &[f64],
        rows: &[usize],
        st: &Standardization,
    ) -> (Vec<f64>, f64) {
        let n = rows.len() as f64;
        let ybar = rows.iter().map(|&i| y[i]).sum::<f64>() / n;
        let mut c = vec![0.0; self.kept.len()];
        for &i in rows {
            let r = y[i] - ybar;
            for (a, &j) in self.kept.iter().enumerate() {
                c[a] += (x[i][j] - st.mean[j]) / st.scale[j] * r;
            }
        }
        c.iter_mut().for_each(|v| *v /= n);
        (c, ybar)
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent with covariance updates. `theta` is the warm start and
/// receives the solution; returns the number of sweeps.
fn lasso_gram(gram: &[f64], corr: &[f64], penalty: f64, theta: &mut [f64]) -> Result<usize> {
    let q = corr.len();
    // g = gram * theta, kept in sync with theta
    let mut g = vec![0.0; q];
    for a in 0..q {
        for b in 0..q {
            g[a] += gram[a * q + b] * theta[b];
        }
    }
    for sweep in 1..=LASSO_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..q {
            let gjj = gram[j * q + j];
            let z = corr[j] - g[j] + gjj * theta[j];
            let new = soft_threshold(z, penalty) / gjj;
            let delta = new - theta[j];
            if delta != 0.0 {
                for a in 0..q {
                    g[a] += gram[a * q + j] * delta;
                }
                theta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < LASSO_TOLERANCE {
            return Ok(sweep);
        }
    }
    Err(Error::Convergence(format!(
        "coordinate descent did not converge in {LASSO_MAX_SWEEPS} sweeps (penalty {penalty})"
    )))
}

fn check_finite(scores: &[Vec<f64>], x: &[Vec<f64>], k: usize, p: usize) -> Result<()> {
    if scores.len() != x.len() {
        return Err(Error::Argument(format!(
            "{} score rows but {} feature rows",
            scores.len(),
            x.len()
        )));
    }
    for (i, (b, xi)) in scores.iter().zip(x).enumerate() {
        if b.len() != k || xi.len() != p {
            return Err(Error::Argument(format!("row {i} has inconsistent dimensions")));
        }
        if b.iter().chain(xi).any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("row {i} has non-finite values")));
        }
    }
    Ok(())
}

/// Null-model threshold: the smallest penalty at which every coefficient is 0.
fn lambda_max(corr: &[f64]) -> f64 {
    corr.iter().fold(0.0, |m, c| m.max(c.abs()))
}

/// Held-out squared error summed over folds, per penalty on `path`.
fn cv_errors(
    x: &[Vec<f64>],
    y: &[f64],
    folds: &GroupFolds,
    path: &[f64],
) -> Result<Vec<f64>> {
    let p = x[0].len();
    let mut sse = vec![0.0; path.len()];
    for f in 0..folds.num_folds() {
        let (train, valid) = folds.split(f);
        let st = Standardization::fit(x, &train, p);
        let design = Design::new(x, &train, &st);
        let (corr, ybar) = design.correlations(x, y, &train, &st);
        let mut theta = vec![0.0; design.kept.len()];
        for (g, &pen) in path.iter().enumerate() {
            lasso_gram(&design.gram, &corr, pen, &mut theta)?;
            for &i in &valid {
                let mut pred = ybar;
                for (a, &j) in design.kept.iter().enumerate() {
                    pred += theta[a] * (x[i][j] - st.mean[j]) / st.scale[j];
                }
                sse[g] += (y[i] - pred).powi(2);
            }
        }
    }
    Ok(sse)
}

/// Fit one LASSO per score column.
///
/// `groups` labels rows for cross-validation; rows are their own groups when
/// it is `None`.
pub fn fit_lasso<S: AsRef<str>, G: AsRef<str>>(
    scores: &[Vec<f64>],
    x: &[Vec<f64>],
    feature_names: &[S],
    penalty: &PenaltySpec,
    groups: Option<&[G]>,
) -> Result<ScorePrior> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 2 rows, got {n}"
        )));
    }
    let k = scores[0].len();
    let p = feature_names.len();
    check_finite(scores, x, k, p)?;
    let rows: Vec<usize> = (0..n).collect();
    let st = Standardization::fit(x, &rows, p);
    for (j, s) in st.scale.iter().enumerate() {
        if *s == 0.0 {
            debug!(
                "feature {} is constant over the training rows; dropped",
                feature_names[j].as_ref()
            );
        }
    }
    let design = Design::new(x, &rows, &st);

    let penalties: Vec<Option<f64>> = match penalty {
        PenaltySpec::Fixed(v) => vec![Some(*v); k],
        PenaltySpec::PerFactor(v) => {
            if v.len() != k {
                return Err(Error::Argument(format!(
                    "{} penalties for {k} factors",
                    v.len()
                )));
            }
            v.iter().map(|p| Some(*p)).collect()
        }
        PenaltySpec::CrossValidated { .. } => vec![None; k],
    };
    if penalties.iter().flatten().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Argument("penalties must be finite and nonnegative".into()));
    }
    let folds = match penalty {
        PenaltySpec::CrossValidated { folds, seed, .. } => {
            let labels: Vec<String> = match groups {
                Some(g) => g.iter().map(|s| s.as_ref().to_string()).collect(),
                None => (0..n).map(|i| i.to_string()).collect(),
            };
            Some(GroupFolds::new(&labels, *folds, *seed)?)
        }
        _ => None,
    };

    let mut factors = Vec::with_capacity(k);
    for (f, fixed) in penalties.iter().enumerate() {
        let y: Vec<f64> = scores.iter().map(|b| b[f]).collect();
        let (corr, ybar) = design.correlations(x, &y, &rows, &st);
        let pen = match fixed {
            Some(v) => *v,
            None => {
                let PenaltySpec::CrossValidated { grid_size, .. } = penalty else {
                    unreachable!()
                };
                let top = lambda_max(&corr);
                if top == 0.0 {
                    0.0
                } else {
                    let path = crate::stats::logspace(top, top * CV_PATH_RATIO, (*grid_size).max(2));
                    let sse = cv_errors(x, &y, folds.as_ref().expect("folds"), &path)?;
                    // descending path: strict improvement keeps the larger penalty on ties
                    let mut best = 0;
                    for g in 1..path.len() {
                        if sse[g] < sse[best] {
                            best = g;
                        }
                    }
                    path[best]
                }
            }
        };
        let mut theta = vec![0.0; design.kept.len()];
        let sweeps = lasso_gram(&design.gram, &corr, pen, &mut theta)?;
        let mut std_coef = vec![0.0; p];
        let mut coef = vec![0.0; p];
        let mut intercept = ybar;
        for (a, &j) in design.kept.iter().enumerate() {
            std_coef[j] = theta[a];
            coef[j] = theta[a] / st.scale[j];
            intercept -= coef[j] * st.mean[j];
        }
        factors.push(FactorFit {
            intercept,
            coef,
            std_coef,
            penalty: pen,
            sweeps,
        });
    }
    Ok(ScorePrior {
        feature_names: feature_names.iter().map(|s| s.as_ref().to_string()).collect(),
        standardization: st,
        factors,
    })
}

impl ScorePrior {
    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn penalties(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.penalty).collect()
    }

    /// Prior scores for one encoded feature vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_names.len() {
            return Err(Error::Validation(format!(
                "feature vector has {} entries; the prior was trained on {}",
                x.len(),
                self.feature_names.len()
            )));
        }
        Ok(self
            .factors
            .iter()
            .map(|f| f.intercept + f.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>())
            .collect())
    }

    /// Prior truncated to the first `k` factors.
    pub fn truncated(&self, k: usize) -> ScorePrior {
        ScorePrior {
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
            factors: self.factors[..k.min(self.factors.len())].to_vec(),
        }
    }

    /// Largest violation of the LASSO optimality conditions on the data,
    /// measured by standardized gradients recomputed from raw residuals.
    pub fn kkt_violation(&self, scores: &[Vec<f64>], x: &[Vec<f64>]) -> f64 {
        let n = scores.len() as f64;
        let st = &self.standardization;
        let mut worst: f64 = 0.0;
        for (f, fit) in self.factors.iter().enumerate() {
            let resid: Vec<f64> = scores
                .iter()
                .zip(x)
                .map(|(b, xi)| {
                    b[f] - fit.intercept - fit.coef.iter().zip(xi).map(|(c, v)| c * v).sum::<f64>()
                })
                .collect();
            worst = worst.max((resid.iter().sum::<f64>() / n).abs());
            for j in 0..self.feature_names.len() {
                if st.scale[j] == 0.0 {
                    continue;
                }
                let grad = x
                    .iter()
                    .zip(&resid)
                    .map(|(xi, r)| (xi[j] - st.mean[j]) / st.scale[j] * r)
                    .sum::<f64>()
                    / n;
                let v = if fit.std_coef[j] != 0.0 {
                    (grad - fit.penalty * fit.std_coef[j].signum()).abs()
                } else {
                    (grad.abs() - fit.penalty).max(0.0)
                };
                worst = worst.max(v);
            }
        }
        worst
    }
}

/// Coefficient table: one row per `(s, k)`, blanks for exact zeros.
pub fn write_coefficients_csv<W: Write>(out: W, rows: &[(usize, &ScorePrior)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = rows
        .first()
        .map(|(_, p)| p.feature_names.clone())
        .unwrap_or_default();
    let mut header = vec!["s".to_string(), "k".into(), "penalty".into(), "intercept".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (s, prior) in rows {
        if prior.feature_names != names {
            return Err(Error::Argument("coefficient tables use different encodings".into()));
        }
        for (k, f) in prior.factors.iter().enumerate() {
            let mut rec = vec![
                s.to_string(),
                (k + 1).to_string(),
                f.penalty.to_string(),
                f.intercept.to_string(),
            ];
            rec.extend(
                f.coef
                    .iter()
                    .map(|c| if *c == 0.0 { String::new() } else { c.to_string() }),
            );
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
