//! Completion of partially observed ILR curves by penalized least squares on
//! FPCA scores, shrunk toward the regression prior.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cv::GroupFolds;
use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, score_matrix, to_dvector, FpcaModel};
use crate::regression::{fit_lasso, PenaltySpec, ScorePrior};
use crate::stats::logspace;
use crate::triangle::{to_clr, CompanyFeatures, CurveId, DevCurve, FeatureEncoding, NUM_LAGS};

/// Absolute MAPE difference below which two grid points count as tied.
pub const TIE_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_TUNE_FOLDS: usize = 10;

/// Factorized normal equations `(Phi_e' Phi_e + lambda I)` for a fixed basis,
/// observed-lag count and penalty.
#[derive(Debug, Clone)]
pub struct PlsSystem {
    s: usize,
    lambda: f64,
    phi_e: DMatrix<f64>,
    mu_e: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PlsSystem {
    pub fn new(model: &FpcaModel, s: usize, lambda: f64) -> Result<Self> {
        if s == 0 || s > NUM_LAGS {
            return Err(Error::Argument(format!("observed lags must be in 1..={NUM_LAGS}, got {s}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Argument(format!("penalty must be finite and >= 0, got {lambda}")));
        }
        let k = model.k;
        let phi_e = DMatrix::from_fn(s, k, |x, j| model.eigenfunctions[j][x]);
        let mu_e = DVector::from_column_slice(&model.mean[..s]);
        let mut a = phi_e.transpose() * &phi_e;
        if lambda == 0.0 {
            let singular = s < k || {
                let ev = SymmetricEigen::new(a.clone()).eigenvalues;
                let max = ev.max();
                ev.min() <= 1e-12 * max.max(f64::MIN_POSITIVE)
            };
            if singular {
                return Err(Error::Singular(format!(
                    "observed-lag basis is rank deficient ({s} lags, {k} components); use a penalty > 0"
                )));
            }
        }
        for i in 0..k {
            a[(i, i)] += lambda;
        }
        let chol = Cholesky::new(a).ok_or_else(|| {
            Error::Singular(format!(
                "normal equations not positive definite ({s} lags, {k} components, penalty {lambda})"
            ))
        })?;
        Ok(PlsSystem {
            s,
            lambda,
            phi_e,
            mu_e,
            chol,
        })
    }

    pub fn observed_lags(&self) -> usize {
        self.s
    }

    /// `(Phi_e' Phi_e + lambda I)^-1 (Phi_e' (y_e - mu_e) + lambda prior)`.
    pub fn solve(&self, observed: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
        if observed.len() != self.s {
            return Err(Error::Argument(format!(
                "expected {} observed lags, got {}",
                self.s,
                observed.len()
            )));
        }
        if prior.len() != self.phi_e.ncols() {
            return Err(Error::Argument(format!(
                "prior has {} scores, the basis has {} components",
                prior.len(),
                self.phi_e.ncols()
            )));
        }
        let centered = to_dvector(observed) - &self.mu_e;
        let rhs = self.phi_e.transpose() * centered + to_dvector(prior) * self.lambda;
        Ok(self.chol.solve(&rhs).iter().copied().collect())
    }
}

/// Closed-form penalized scores for one partial curve.
pub fn pls_scores(model: &FpcaModel, prior: &[f64], observed: &[f64], lambda: f64) -> Result<Vec<f64>> {
    PlsSystem::new(model, observed.len(), lambda)?.solve(observed, prior)
}

/// Fit-plus-penalty objective minimized by [`pls_scores`].
pub fn pls_objective(model: &FpcaModel, prior: &[f64], observed: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    let fit: f64 = observed
        .iter()
        .enumerate()
        .map(|(x, y)| {
            let yhat = model.mean[x]
                + beta.iter().enumerate().map(|(k, b)| model.eigenfunctions[k][x] * b).sum::<f64>();
            (y - yhat).powi(2)
        })
        .sum();
    let pen: f64 = beta.iter().zip(prior).map(|(b, p)| (b - p).powi(2)).sum();
    fit + lambda * pen
}

/// Provenance attached to every completed curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: String,
    pub k: usize,
    pub lambda: f64,
}

/// A partial curve with its penalized completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedCurve {
    pub id: CurveId,
    pub premium: f64,
    pub features: CompanyFeatures,
    /// Observed ILR prefix, lags `0..s`.
    pub observed: Vec<f64>,
    pub beta: Vec<f64>,
    /// `mu + Phi beta` over all lags.
    pub fitted: Vec<f64>,
    /// Forecast ILR over lags `s..10`.
    pub forecast_ilr: Vec<f64>,
    /// Forecast CLR over lags `s..10`, continuing the observed CLR.
    pub forecast_clr: Vec<f64>,
    pub provenance: Provenance,
}

impl CompletedCurve {
    pub fn observed_lags(&self) -> usize {
        self.observed.len()
    }

    /// Observed prefix followed by the forecast.
    pub fn full_ilr(&self) -> Vec<f64> {
        let mut v = self.observed.clone();
        v.extend(&self.forecast_ilr);
        v
    }

    pub fn full_clr(&self) -> Vec<f64> {
        to_clr(&self.full_ilr())
    }

    pub fn ultimate_clr(&self) -> f64 {
        *self.full_clr().last().expect("nonempty curve")
    }

    /// The completed curve as pseudo-complete training data.
    pub fn to_dev_curve(&self) -> DevCurve {
        DevCurve {
            id: self.id.clone(),
            premium: self.premium,
            ilr: self.full_ilr(),
            features: self.features.clone(),
        }
    }
}

/// Continue the observed CLR with forecast increments.
pub fn forecast_clr_path(observed_ilr: &[f64], forecast_ilr: &[f64]) -> Vec<f64> {
    let mut acc: f64 = observed_ilr.iter().sum();
    forecast_ilr
        .iter()
        .map(|y| {
            acc += y;
            acc
        })
        .collect()
}

/// Complete `partial` with basis `model` and prior scores `prior`.
pub fn complete_pls(
    model: &FpcaModel,
    prior: &[f64],
    partial: &DevCurve,
    lambda: f64,
    model_hash: &str,
) -> Result<CompletedCurve> {
    let system = PlsSystem::new(model, partial.observed_lags(), lambda)?;
    complete_with(&system, model, prior, partial, model_hash)
}

fn complete_with(
    system: &PlsSystem,
    model: &FpcaModel,
    prior: &[f64],
    partial: &DevCurve,
    model_hash: &str,
) -> Result<CompletedCurve> {
    let beta = system.solve(&partial.ilr, prior)?;
    let fitted = model.reconstruct(&beta)?;
    let s = partial.observed_lags();
    let forecast_ilr = fitted[s..].to_vec();
    let forecast_clr = forecast_clr_path(&partial.ilr, &forecast_ilr);
    Ok(CompletedCurve {
        id: partial.id.clone(),
        premium: partial.premium,
        features: partial.features.clone(),
        observed: partial.ilr.clone(),
        beta,
        fitted,
        forecast_ilr,
        forecast_clr,
        provenance: Provenance {
            model_hash: model_hash.to_string(),
            k: model.k,
            lambda: system.lambda,
        },
    })
}

/// FPCA basis, regression prior and the feature encoding they were fit with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionModel {
    pub fpca: FpcaModel,
    pub prior: ScorePrior,
    pub encoding: FeatureEncoding,
}

pub(crate) fn encode_all(curves: &[DevCurve], encoding: &FeatureEncoding) -> Result<Vec<Vec<f64>>> {
    curves.iter().map(|c| encoding.encode(&c.features)).collect()
}

pub(crate) fn company_labels(curves: &[DevCurve]) -> Vec<String> {
    curves.iter().map(|c| c.id.company_id.clone()).collect()
}

fn require_complete(curves: &[DevCurve]) -> Result<()> {
    match curves.iter().find(|c| !c.is_complete()) {
        Some(c) => Err(Error::Validation(format!(
            "training curve {} is not fully developed",
            c.id
        ))),
        None => Ok(()),
    }
}

impl CompletionModel {
    /// FPCA with `k` components, then one LASSO per component.
    pub fn fit(
        train: &[DevCurve],
        k: usize,
        encoding: &FeatureEncoding,
        penalty: &PenaltySpec,
    ) -> Result<Self> {
        require_complete(train)?;
        let ilr: Vec<&[f64]> = train.iter().map(|c| c.ilr.as_slice()).collect();
        let fpca = fit_fpca(&ilr, k)?;
        let scores = score_matrix(&fpca, &ilr)?;
        let x = encode_all(train, encoding)?;
        let groups = company_labels(train);
        let prior = fit_lasso(&scores, &x, &encoding.names(), penalty, Some(&groups[..]))?;
        Ok(CompletionModel {
            fpca,
            prior,
            encoding: encoding.clone(),
        })
    }

    pub fn k(&self) -> usize {
        self.fpca.k
    }

    pub fn truncated(&self, k: usize) -> Result<Self> {
        Ok(CompletionModel {
            fpca: self.fpca.truncated(k)?,
            prior: self.prior.truncated(k),
            encoding: self.encoding.clone(),
        })
    }

    pub fn prior_for(&self, features: &CompanyFeatures) -> Result<Vec<f64>> {
        self.prior.predict(&self.encoding.encode(features)?)
    }

    pub fn complete(&self, partial: &DevCurve, lambda: f64) -> Result<CompletedCurve> {
        let prior = self.prior_for(&partial.features)?;
        complete_pls(&self.fpca, &prior, partial, lambda, &self.digest())
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("model serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// 25 log-spaced penalties in `[1e-4, 1]`.
pub fn default_lambda_grid() -> Vec<f64> {
    logspace(1e-4, 1.0, 25)
}

/// `1..=min(10, s + 3)`.
pub fn default_k_grid(s: usize) -> Vec<usize> {
    (1..=NUM_LAGS.min(s + 3)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSettings {
    pub folds: usize,
    pub seed: u64,
    pub penalty: PenaltySpec,
}

impl TuneSettings {
    pub fn new(seed: u64) -> Self {
        TuneSettings {
            folds: DEFAULT_TUNE_FOLDS,
            seed,
            penalty: PenaltySpec::cross_validated(seed),
        }
    }
}

/// Cross-validated MAPE of one `(K, lambda)` candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k: usize,
    pub lambda: f64,
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub s: usize,
    pub n_train: usize,
    pub k: usize,
    pub lambda: f64,
    /// Cross-validated MAPE of ultimate CLR at the selected point.
    pub mape: f64,
    /// Prior penalties held fixed inside the folds.
    pub prior_penalties: Vec<f64>,
    pub grid: Vec<GridPoint>,
}

/// Per-fold sums of absolute percentage errors, indexed like the grid.
struct FoldErrors {
    ape: Vec<f64>,
    count: Vec<usize>,
    ok: Vec<bool>,
}

/// Choose `(K, lambda)` for curves observed through `s` lags by group V-fold
/// cross-validation on the MAPE of ultimate CLR.
///
/// The regression-prior penalties are resolved once on the full training set
/// and held fixed inside the folds. Ties go to smaller K, then larger lambda.
pub fn tune(
    train: &[DevCurve],
    s: usize,
    k_grid: &[usize],
    lambda_grid: &[f64],
    encoding: &FeatureEncoding,
    settings: &TuneSettings,
) -> Result<TuneResult> {
    if k_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::Argument("tuning grids must be nonempty".into()));
    }
    if s == 0 || s >= NUM_LAGS {
        return Err(Error::Argument(format!("tuning needs 1 <= s <= 9, got {s}")));
    }
    if let Some(k) = k_grid.iter().find(|&&k| k == 0 || k > NUM_LAGS) {
        return Err(Error::Argument(format!("K = {k} outside 1..={NUM_LAGS}")));
    }
    if let Some(l) = lambda_grid.iter().find(|&&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::Argument(format!("invalid penalty {l} in grid")));
    }
    require_complete(train)?;
    let n = train.len();
    let k_max = *k_grid.iter().max().expect("nonempty");
    let k_max = k_max.min(n);

    let prior_penalties = match &settings.penalty {
        PenaltySpec::CrossValidated { .. } => {
            CompletionModel::fit(train, k_max, encoding, &settings.penalty)?
                .prior
                .penalties()
        }
        PenaltySpec::Fixed(v) => vec![*v; k_max],
        PenaltySpec::PerFactor(v) => {
            if v.len() < k_max {
                return Err(Error::Argument(format!(
                    "{} prior penalties for up to {k_max} components",
                    v.len()
                )));
            }
            v[..k_max].to_vec()
        }
    };

    let folds = GroupFolds::new(&company_labels(train), settings.folds, settings.seed)?;
    let grid: Vec<(usize, f64)> = k_grid
        .iter()
        .flat_map(|&k| lambda_grid.iter().map(move |&l| (k, l)))
        .collect();

    let per_fold: Vec<Result<FoldErrors>> = (0..folds.num_folds())
        .into_par_iter()
        .map(|f| {
            let (tr, va) = folds.split(f);
            let fold_train: Vec<DevCurve> = tr.iter().map(|&i| train[i].clone()).collect();
            let kf = k_max.min(fold_train.len());
            let model = CompletionModel::fit(
                &fold_train,
                kf,
                encoding,
                &PenaltySpec::PerFactor(prior_penalties[..kf].to_vec()),
            )?;
            let targets: Vec<(DevCurve, Vec<f64>, f64)> = va
                .iter()
                .filter_map(|&i| {
                    let truth = to_clr(&train[i].ilr)[NUM_LAGS - 1];
                    if truth == 0.0 {
                        warn!("{} has zero ultimate CLR; excluded from MAPE", train[i].id);
                        return None;
                    }
                    let partial = train[i].truncated(s);
                    Some(model.prior_for(&partial.features).map(|p| (partial, p, truth)))
                })
                .collect::<Result<_>>()?;
            let mut out = FoldErrors {
                ape: vec![0.0; grid.len()],
                count: vec![0; grid.len()],
                ok: vec![false; grid.len()],
            };
            for (g, &(k, lambda)) in grid.iter().enumerate() {
                if k > kf || (lambda == 0.0 && s < k) {
                    continue;
                }
                let basis = model.fpca.truncated(k)?;
                let system = match PlsSystem::new(&basis, s, lambda) {
                    Ok(sys) => sys,
                    Err(Error::Singular(_)) => continue,
                    Err(e) => return Err(e),
                };
                for (partial, prior, truth) in &targets {
                    let beta = system.solve(&partial.ilr, &prior[..k])?;
                    let fitted = basis.reconstruct(&beta)?;
                    let ult = partial.ilr.iter().sum::<f64>() + fitted[s..].iter().sum::<f64>();
                    out.ape[g] += ((ult - truth) / truth).abs();
                    out.count[g] += 1;
                }
                out.ok[g] = true;
            }
            Ok(out)
        })
        .collect();
    let per_fold: Vec<FoldErrors> = per_fold.into_iter().collect::<Result<_>>()?;

    let mut table = Vec::new();
    for (g, &(k, lambda)) in grid.iter().enumerate() {
        if !per_fold.iter().all(|f| f.ok[g]) {
            warn!("grid point K={k}, lambda={lambda} infeasible at s={s}; skipped");
            continue;
        }
        let ape: f64 = per_fold.iter().map(|f| f.ape[g]).sum();
        let count: usize = per_fold.iter().map(|f| f.count[g]).sum();
        if count == 0 {
            continue;
        }
        table.push(GridPoint {
            k,
            lambda,
            mape: ape / count as f64,
        });
    }
    let best = select_grid_point(&table).ok_or_else(|| {
        Error::InsufficientData(format!("no feasible (K, lambda) grid point at s={s}"))
    })?;
    Ok(TuneResult {
        s,
        n_train: n,
        k: best.k,
        lambda: best.lambda,
        mape: best.mape,
        prior_penalties,
        grid: table,
    })
}

/// Lowest MAPE; within [`TIE_TOLERANCE`] prefer smaller K, then larger lambda.
fn select_grid_point(table: &[GridPoint]) -> Option<GridPoint> {
    let mut order: Vec<&GridPoint> = table.iter().collect();
    order.sort_by(|a, b| a.k.cmp(&b.k).then(b.lambda.total_cmp(&a.lambda)));
    let mut best: Option<&GridPoint> = None;
    for p in order {
        if best.is_none_or(|b| p.mape < b.mape - TIE_TOLERANCE) {
            best = Some(p);
        }
    }
    best.cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpca::fit_fpca;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_model(seed: u64, k: usize) -> FpcaModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let curves: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..NUM_LAGS).map(|x| rng.random::<f64>() / (1 + x) as f64).collect())
            .collect();
        fit_fpca(&curves, k).unwrap()
    }

    fn gradient(model: &FpcaModel, prior: &[f64], y: &[f64], lambda: f64, beta: &[f64]) -> Vec<f64> {
        let s = y.len();
        let resid: Vec<f64> = (0..s)
            .map(|x| {
                y[x] - model.mean[x]
                    - beta.iter().enumerate().map(|(k, b)| model.eigenfunctions[k][x] * b).sum::<f64>()
            })
            .collect();
        (0..beta.len())
            .map(|k| {
                -2.0 * (0..s).map(|x| model.eigenfunctions[k][x] * resid[x]).sum::<f64>()
                    + 2.0 * lambda * (beta[k] - prior[k])
            })
            .collect()
    }

    #[test]
    fn huge_penalty_returns_prior() {
        let m = random_model(1, 4);
        let prior = [0.1, -0.2, 0.05, 0.3];
        let beta = pls_scores(&m, &prior, &[0.2, 0.1, 0.05], 1e12).unwrap();
        for (b, p) in beta.iter().zip(&prior) {
            assert!(((b - p) / p).abs() < 1e-6);
        }
    }

    #[test]
    fn full_information_returns_exact_scores() {
        let m = random_model(2, NUM_LAGS);
        let y: Vec<f64> = (0..NUM_LAGS).map(|x| 0.3 / (x + 1) as f64).collect();
        let beta = pls_scores(&m, &[0.0; NUM_LAGS], &y, 0.0).unwrap();
        let exact = m.scores(&y).unwrap();
        for (a, b) in beta.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-10);
        }
        let curve = DevCurve {
            id: CurveId::new("c", 2000),
            premium: 1.0,
            ilr: y.clone(),
            features: CompanyFeatures::new(2000, 1.0),
        };
        let done = complete_pls(&m, &[0.0; NUM_LAGS], &curve, 0.0, "h").unwrap();
        assert!(done.forecast_ilr.is_empty() && done.forecast_clr.is_empty());
    }

    #[test]
    fn closed_form_is_a_stationary_minimum() {
        let m = random_model(3, 3);
        let prior = [0.02, -0.01, 0.03];
        let y = [0.15, 0.2, 0.08, 0.05];
        let beta = pls_scores(&m, &prior, &y, 0.1).unwrap();
        let g = gradient(&m, &prior, &y, 0.1, &beta);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
        let best = pls_objective(&m, &prior, &y, 0.1, &beta);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let scale = 10f64.powf(rng.random_range(-6.0..0.0));
            let b: Vec<f64> = beta
                .iter()
                .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!(pls_objective(&m, &prior, &y, 0.1, &b) >= best);
        }
    }

    #[test]
    fn rank_deficiency_requires_penalty() {
        let m = random_model(5, 4);
        assert!(matches!(
            pls_scores(&m, &[0.0; 4], &[0.1, 0.2], 0.0),
            Err(Error::Singular(_))
        ));
        assert!(pls_scores(&m, &[0.0; 4], &[0.1, 0.2], 0.01).is_ok());
        assert!(pls_scores(&m, &[0.0; 3], &[0.1, 0.2], 0.01).is_err());
    }

    #[test]
    fn shrinkage_is_monotone_in_penalty() {
        let m = random_model(6, 5);
        let prior = [0.05, 0.0, -0.02, 0.01, 0.0];
        let y = [0.1, 0.25, 0.12];
        let mut prev = f64::INFINITY;
        for lambda in logspace(1e-4, 1e3, 30) {
            let b = pls_scores(&m, &prior, &y, lambda).unwrap();
            let d = b.iter().zip(&prior).map(|(a, p)| (a - p).powi(2)).sum::<f64>().sqrt();
            assert!(d <= prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn forecast_clr_continues_observed() {
        let m = random_model(7, 3);
        let curve = DevCurve {
            id: CurveId::new("c", 2005),
            premium: 10.0,
            ilr: vec![0.2, 0.3, 0.1, 0.05],
            features: CompanyFeatures::new(2005, 10.0),
        };
        let done = complete_pls(&m, &[0.0; 3], &curve, 0.5, "h").unwrap();
        assert_eq!(done.forecast_ilr.len(), 6);
        let mut acc = 0.65;
        for (f, c) in done.forecast_ilr.iter().zip(&done.forecast_clr) {
            acc += f;
            assert!((acc - c).abs() < 1e-15);
        }
        assert!((done.ultimate_clr() - done.forecast_clr[5]).abs() < 1e-15);
        assert_eq!(done.to_dev_curve().ilr.len(), NUM_LAGS);
    }

    #[test]
    fn tie_break_prefers_small_k_then_large_lambda() {
        let t = vec![
            GridPoint { k: 3, lambda: 0.1, mape: 0.05 },
            GridPoint { k: 2, lambda: 0.01, mape: 0.05 + 1e-12 },
            GridPoint { k: 2, lambda: 0.5, mape: 0.05 },
            GridPoint { k: 1, lambda: 1.0, mape: 0.2 },
        ];
        let b = select_grid_point(&t).unwrap();
        assert_eq!((b.k, b.lambda), (2, 0.5));
        let t2 = vec![GridPoint { k: 4, lambda: 0.1, mape: 0.01 }, GridPoint { k: 1, lambda: 0.1, mape: 0.02 }];
        assert_eq!(select_grid_point(&t2).unwrap().k, 4);
    }

    #[test]
    fn default_grids() {
        let l = default_lambda_grid();
        assert_eq!(l.len(), 25);
        assert!((l[0] - 1e-4).abs() < 1e-18 && (l[24] - 1.0).abs() < 1e-12);
        assert_eq!(default_k_grid(1), vec![1, 2, 3, 4]);
        assert_eq!(default_k_grid(9).len(), 10);
    }
}
