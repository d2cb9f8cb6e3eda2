//! Functional bootstrap for completion forecasts and the predictive regions
//! built from it.
//!
//! Each replicate resamples the training curves, refits the score regressions
//! with the penalties of the reference model, re-solves the penalized scores of
//! the target, and adds one whole residual curve drawn from the resample.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completion::{company_labels, encode_all, forecast_clr_path, CompletionModel, PlsSystem};
use crate::depth::{central_envelope, deepest_first, extremal_depth, RankMatrix};
use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, score_matrix, FpcaModel};
use crate::regression::{fit_lasso, PenaltySpec, ScorePrior};
use crate::seed::{derive_seed, rng_for};
use crate::stats::{quantile_sorted, sorted_copy};
use crate::triangle::{DevCurve, FeatureEncoding, NUM_LAGS};

pub const DEFAULT_REPLICATES: usize = 1000;
/// Degenerate resamples are redrawn at most this many times.
pub const MAX_RETRIES: usize = 10;

/// What a bootstrap draw resamples with replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    #[default]
    Curve,
    /// Whole companies, keeping all their accident years together.
    Company,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub unit: ResampleUnit,
    /// Refit the FPCA basis inside every replicate instead of holding it fixed.
    pub refit_basis: bool,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapConfig {
            replicates,
            seed,
            unit: ResampleUnit::Curve,
            refit_basis: false,
        }
    }
}

/// Basis and training residual curves of one score space.
#[derive(Debug)]
struct World {
    basis: FpcaModel,
    /// Residual curve (all lags) of every training row under `basis`.
    residuals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Replicate {
    world: Arc<World>,
    prior: ScorePrior,
    /// Training rows drawn by the resample; residuals come from these rows.
    rows: Vec<usize>,
    seed: u64,
}

/// Resamples and refit regressions shared by every target of one `(K, lambda)`.
#[derive(Debug, Clone)]
pub struct BootstrapPlan {
    pub lambda: f64,
    pub encoding: FeatureEncoding,
    pub config: BootstrapConfig,
    replicates: Vec<Replicate>,
}

fn residual_curves(basis: &FpcaModel, curves: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    curves.iter().map(|c| basis.residual(c)).collect()
}

fn draw_rows<R: Rng>(rng: &mut R, unit: ResampleUnit, companies: &[String], groups: &[Vec<usize>]) -> Vec<usize> {
    match unit {
        ResampleUnit::Curve => {
            let n = companies.len();
            (0..n).map(|_| rng.random_range(0..n)).collect()
        }
        ResampleUnit::Company => {
            let g = groups.len();
            (0..g)
                .flat_map(|_| groups[rng.random_range(0..g)].iter().copied())
                .collect()
        }
    }
}

impl BootstrapPlan {
    /// Draw `config.replicates` resamples of `train` and refit the priors.
    ///
    /// `model` supplies the basis (unless `refit_basis`), the number of
    /// components and the regression penalties.
    pub fn build(
        train: &[DevCurve],
        model: &CompletionModel,
        lambda: f64,
        config: &BootstrapConfig,
    ) -> Result<Self> {
        if config.replicates < 2 {
            return Err(Error::Argument(format!(
                "bootstrap needs at least 2 replicates, got {}",
                config.replicates
            )));
        }
        if train.iter().any(|c| !c.is_complete()) {
            return Err(Error::Validation("bootstrap training curves must be complete".into()));
        }
        let k = model.k();
        let ilr: Vec<&[f64]> = train.iter().map(|c| c.ilr.as_slice()).collect();
        let x = encode_all(train, &model.encoding)?;
        let names = model.encoding.names();
        let penalty = PenaltySpec::PerFactor(model.prior.penalties());
        let companies = company_labels(train);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        {
            let mut index = std::collections::BTreeMap::new();
            for (i, c) in companies.iter().enumerate() {
                let g = *index.entry(c.as_str()).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(i);
            }
        }

        let fixed = if config.refit_basis {
            None
        } else {
            let basis = model.fpca.clone();
            let residuals = residual_curves(&basis, &ilr)?;
            Some(Arc::new(World { basis, residuals }))
        };
        let fixed_scores = match &fixed {
            Some(w) => Some(score_matrix(&w.basis, &ilr)?),
            None => None,
        };

        let replicates: Vec<Result<Replicate>> = (0..config.replicates)
            .into_par_iter()
            .map(|b| {
                let seed = derive_seed(config.seed, &[b as u64]);
                let mut rng = rng_for(seed, &[0]);
                for _attempt in 0..=MAX_RETRIES {
                    let rows = draw_rows(&mut rng, config.unit, &companies, &groups);
                    let first = ilr[rows[0]];
                    if rows.iter().all(|&r| ilr[r] == first) {
                        continue;
                    }
                    let xs: Vec<Vec<f64>> = rows.iter().map(|&r| x[r].clone()).collect();
                    let (world, scores) = match (&fixed, &fixed_scores) {
                        (Some(w), Some(sc)) => {
                            (w.clone(), rows.iter().map(|&r| sc[r].clone()).collect::<Vec<_>>())
                        }
                        _ => {
                            let sample: Vec<&[f64]> = rows.iter().map(|&r| ilr[r]).collect();
                            if sample.len() < k {
                                continue;
                            }
                            let basis = fit_fpca(&sample, k)?;
                            let residuals = residual_curves(&basis, &ilr)?;
                            let scores = score_matrix(&basis, &sample)?;
                            (Arc::new(World { basis, residuals }), scores)
                        }
                    };
                    let prior = fit_lasso(&scores, &xs, &names, &penalty, None::<&[String]>)?;
                    return Ok(Replicate {
                        world,
                        prior,
                        rows,
                        seed,
                    });
                }
                Err(Error::Numerical(format!(
                    "bootstrap replicate {b}: resample degenerate after {MAX_RETRIES} retries"
                )))
            })
            .collect();
        let replicates = replicates.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(BootstrapPlan {
            lambda,
            encoding: model.encoding.clone(),
            config: config.clone(),
            replicates,
        })
    }

    pub fn num_replicates(&self) -> usize {
        self.replicates.len()
    }

    /// Replicate forecasts for one partial curve. `stream` separates the
    /// residual draws of different targets sharing this plan.
    pub fn forecast(&self, target: &DevCurve, stream: u64) -> Result<BootstrapEnsemble> {
        let s = target.observed_lags();
        if s >= NUM_LAGS {
            return Err(Error::Argument(format!("{} has no future lags", target.id)));
        }
        let x = self.encoding.encode(&target.features)?;
        let shared = if self.config.refit_basis {
            None
        } else {
            Some(PlsSystem::new(&self.replicates[0].world.basis, s, self.lambda)?)
        };
        let mut ilr = Vec::with_capacity(self.replicates.len());
        for rep in &self.replicates {
            let basis = &rep.world.basis;
            let own;
            let system = match &shared {
                Some(sys) => sys,
                None => {
                    own = PlsSystem::new(basis, s, self.lambda)?;
                    &own
                }
            };
            let prior = rep.prior.predict(&x)?;
            let beta = system.solve(&target.ilr, &prior)?;
            let fitted = basis.reconstruct(&beta)?;
            let mut rng = rng_for(rep.seed, &[1, stream]);
            let row = rep.rows[rng.random_range(0..rep.rows.len())];
            let eps = &rep.world.residuals[row];
            ilr.push((s..NUM_LAGS).map(|x| fitted[x] + eps[x]).collect::<Vec<f64>>());
        }
        Ok(BootstrapEnsemble::new(s, &target.ilr, ilr, self.replicates.iter().map(|r| r.seed).collect()))
    }
}

/// Bootstrap replicate paths over the future lags `s..10` of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEnsemble {
    pub s: usize,
    /// Observed CLR at lag `s - 1`.
    pub observed_clr: f64,
    pub ilr: Vec<Vec<f64>>,
    pub clr: Vec<Vec<f64>>,
    /// Resample seed of each replicate.
    pub seeds: Vec<u64>,
}

/// Scale a region is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Ilr,
    Clr,
}

impl BootstrapEnsemble {
    pub fn new(s: usize, observed_ilr: &[f64], ilr: Vec<Vec<f64>>, seeds: Vec<u64>) -> Self {
        let clr = ilr.iter().map(|p| forecast_clr_path(observed_ilr, p)).collect();
        BootstrapEnsemble {
            s,
            observed_clr: observed_ilr.iter().sum(),
            ilr,
            clr,
            seeds,
        }
    }

    pub fn num_replicates(&self) -> usize {
        self.ilr.len()
    }

    pub fn lags(&self) -> Vec<usize> {
        (self.s..NUM_LAGS).collect()
    }

    pub fn paths(&self, scale: Scale) -> &[Vec<f64>] {
        match scale {
            Scale::Ilr => &self.ilr,
            Scale::Clr => &self.clr,
        }
    }

    /// Replicate values at the last lag on `scale`.
    pub fn ultimate(&self, scale: Scale) -> Vec<f64> {
        self.paths(scale).iter().map(|p| *p.last().expect("future lag")).collect()
    }

    /// Replicate mean path.
    pub fn mean_path(&self, scale: Scale) -> Vec<f64> {
        let paths = self.paths(scale);
        let b = paths.len() as f64;
        (0..paths[0].len())
            .map(|j| paths.iter().map(|p| p[j]).sum::<f64>() / b)
            .collect()
    }

    pub fn region(&self, kind: RegionKind, scale: Scale, alpha: f64) -> Result<PredictiveRegion> {
        let lags = self.lags();
        match kind {
            RegionKind::Pointwise => pointwise_interval(self.paths(scale), &lags, alpha),
            RegionKind::Exd => exd_region(self.paths(scale), &lags, alpha),
        }
    }

    /// `replicate,lag,ilr,clr` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "lag", "ilr", "clr"])?;
        for (b, (pi, pc)) in self.ilr.iter().zip(&self.clr).enumerate() {
            for (j, (yi, yc)) in pi.iter().zip(pc).enumerate() {
                w.write_record([
                    (b + 1).to_string(),
                    (self.s + j).to_string(),
                    yi.to_string(),
                    yc.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Pointwise,
    Exd,
}

impl std::fmt::Display for RegionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegionKind::Pointwise => "pointwise",
            RegionKind::Exd => "exd",
        })
    }
}

impl std::str::FromStr for RegionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pointwise" => Ok(RegionKind::Pointwise),
            "exd" => Ok(RegionKind::Exd),
            _ => Err(Error::Argument(format!("unknown region kind {s:?}"))),
        }
    }
}

/// Lower/upper curves over a set of lags with nominal content `1 - alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveRegion {
    pub kind: RegionKind,
    pub alpha: f64,
    pub lags: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Replicates spanning an EXD region; empty for pointwise intervals.
    pub members: Vec<usize>,
}

impl PredictiveRegion {
    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn contains(&self, path: &[f64]) -> bool {
        path.len() == self.lower.len()
            && path
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    /// Interval at the last lag.
    pub fn last(&self) -> (f64, f64) {
        (*self.lower.last().expect("lag"), *self.upper.last().expect("lag"))
    }

    /// `lag,kind,level,lower,upper` rows.
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (j, lag) in self.lags.iter().enumerate() {
            w.write_record([
                lag.to_string(),
                self.kind.to_string(),
                self.level().to_string(),
                self.lower[j].to_string(),
                self.upper[j].to_string(),
            ])?;
        }
        Ok(())
    }
}

pub const REGION_HEADER: [&str; 5] = ["lag", "kind", "level", "lower", "upper"];

pub fn write_regions_csv<W: Write>(out: W, regions: &[PredictiveRegion]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REGION_HEADER)?;
    for r in regions {
        r.write_rows(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn check_paths(paths: &[Vec<f64>], lags: &[usize], alpha: f64, min_b: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if paths.len() < min_b {
        return Err(Error::InsufficientData(format!(
            "{} replicates; at least {min_b} needed at alpha = {alpha}",
            paths.len()
        )));
    }
    if lags.is_empty() || paths.iter().any(|p| p.len() != lags.len()) {
        return Err(Error::Argument("replicate paths must cover every lag".into()));
    }
    Ok(())
}

/// Per-lag type-7 quantiles at `alpha/2` and `1 - alpha/2`.
pub fn pointwise_interval(paths: &[Vec<f64>], lags: &[usize], alpha: f64) -> Result<PredictiveRegion> {
    let min_b = (2.0 / alpha - 1e-9).ceil() as usize;
    check_paths(paths, lags, alpha, min_b)?;
    let mut lower = Vec::with_capacity(lags.len());
    let mut upper = Vec::with_capacity(lags.len());
    for j in 0..lags.len() {
        let col = sorted_copy(&paths.iter().map(|p| p[j]).collect::<Vec<_>>());
        lower.push(quantile_sorted(&col, alpha / 2.0));
        upper.push(quantile_sorted(&col, 1.0 - alpha / 2.0));
    }
    Ok(PredictiveRegion {
        kind: RegionKind::Pointwise,
        alpha,
        lags: lags.to_vec(),
        lower,
        upper,
        members: Vec::new(),
    })
}

/// Envelope of the `ceil((1 - alpha) B)` replicates of highest extremal depth.
///
/// A single lag carries no shape information, so there the region is the
/// pointwise interval.
pub fn exd_region(paths: &[Vec<f64>], lags: &[usize], alpha: f64) -> Result<PredictiveRegion> {
    check_paths(paths, lags, alpha, 10)?;
    if lags.len() == 1 {
        let mut r = pointwise_interval(paths, lags, alpha)?;
        r.kind = RegionKind::Exd;
        r.members = (0..paths.len())
            .filter(|&b| r.lower[0] <= paths[b][0] && paths[b][0] <= r.upper[0])
            .collect();
        return Ok(r);
    }
    let depth = extremal_depth(&RankMatrix::new(paths)?);
    let env = central_envelope(paths, &deepest_first(&depth), alpha)?;
    Ok(PredictiveRegion {
        kind: RegionKind::Exd,
        alpha,
        lags: lags.to_vec(),
        lower: env.lower,
        upper: env.upper,
        members: env.members,
    })
}

/// Region for the CLR paths obtained by cumulating each ILR replicate from
/// `observed_clr`; bounds are never cumulated.
pub fn clr_region(
    ilr_paths: &[Vec<f64>],
    lags: &[usize],
    observed_clr: f64,
    alpha: f64,
    kind: RegionKind,
) -> Result<PredictiveRegion> {
    let clr: Vec<Vec<f64>> = ilr_paths
        .iter()
        .map(|p| forecast_clr_path(&[observed_clr], p))
        .collect();
    match kind {
        RegionKind::Pointwise => pointwise_interval(&clr, lags, alpha),
        RegionKind::Exd => exd_region(&clr, lags, alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_paths(seed: u64, b: usize, l: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|_| (0..l).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn constant_replicates_give_point_interval() {
        let paths = vec![vec![0.3, 0.1]; 50];
        let r = pointwise_interval(&paths, &[8, 9], 0.05).unwrap();
        assert_eq!(r.lower, vec![0.3, 0.1]);
        assert_eq!(r.upper, vec![0.3, 0.1]);
        let e = exd_region(&paths, &[8, 9], 0.05).unwrap();
        assert_eq!(e.width(), vec![0.0, 0.0]);
    }

    #[test]
    fn four_replicates_at_half_level() {
        // type 7: h = 3p, so p = 0.25 -> 1.75 and p = 0.75 -> 3.25
        let paths = vec![vec![3.0], vec![1.0], vec![4.0], vec![2.0]];
        let r = pointwise_interval(&paths, &[9], 0.5).unwrap();
        assert_eq!((r.lower[0], r.upper[0]), (1.75, 3.25));
        assert!(pointwise_interval(&paths, &[9], 0.05).is_err());
    }

    #[test]
    fn single_lag_exd_equals_pointwise() {
        let paths = random_paths(1, 200, 1);
        let p = pointwise_interval(&paths, &[9], 0.05).unwrap();
        let e = exd_region(&paths, &[9], 0.05).unwrap();
        assert_eq!((p.lower, p.upper), (e.lower, e.upper));
    }

    #[test]
    fn exd_region_collapses_to_deepest() {
        let paths = random_paths(2, 40, 4);
        let r = exd_region(&paths, &[6, 7, 8, 9], 0.999).unwrap();
        assert_eq!(r.members.len(), 1);
        assert_eq!(r.lower, r.upper);
        let depth = extremal_depth(&RankMatrix::new(&paths).unwrap());
        assert_eq!(r.members[0], deepest_first(&depth)[0]);
    }

    #[test]
    fn regions_nest_and_bounds_are_attained() {
        for seed in 0..20 {
            let paths = random_paths(100 + seed, 120, 5);
            let lags: Vec<usize> = (5..10).collect();
            for kind in [RegionKind::Pointwise, RegionKind::Exd] {
                let wide = match kind {
                    RegionKind::Pointwise => pointwise_interval(&paths, &lags, 0.05),
                    RegionKind::Exd => exd_region(&paths, &lags, 0.05),
                }
                .unwrap();
                let narrow = match kind {
                    RegionKind::Pointwise => pointwise_interval(&paths, &lags, 0.3),
                    RegionKind::Exd => exd_region(&paths, &lags, 0.3),
                }
                .unwrap();
                for j in 0..5 {
                    assert!(wide.lower[j] <= narrow.lower[j] && narrow.upper[j] <= wide.upper[j]);
                    assert!(wide.lower[j] <= wide.upper[j]);
                }
            }
            let e = exd_region(&paths, &lags, 0.1).unwrap();
            for j in 0..5 {
                assert!(e.members.iter().any(|&b| paths[b][j] == e.lower[j]));
                assert!(e.members.iter().any(|&b| paths[b][j] == e.upper[j]));
            }
        }
    }

    #[test]
    fn exd_region_contains_pointwise_median() {
        for seed in 0..20 {
            let paths = random_paths(200 + seed, 101, 4);
            let lags = [6, 7, 8, 9];
            let median: Vec<f64> = (0..4)
                .map(|j| crate::stats::median(&paths.iter().map(|p| p[j]).collect::<Vec<_>>()))
                .collect();
            for alpha in [0.05, 0.2, 0.5] {
                assert!(exd_region(&paths, &lags, alpha).unwrap().contains(&median));
            }
        }
    }

    #[test]
    fn clr_single_lag_is_shifted_ilr_interval() {
        let paths = random_paths(3, 100, 1);
        let ilr = pointwise_interval(&paths, &[9], 0.1).unwrap();
        let clr = clr_region(&paths, &[9], 0.7, 0.1, RegionKind::Pointwise).unwrap();
        assert!((clr.lower[0] - (0.7 + ilr.lower[0])).abs() < 1e-12);
        assert!((clr.upper[0] - (0.7 + ilr.upper[0])).abs() < 1e-12);
    }

    #[test]
    fn positive_increments_give_nondecreasing_clr_bounds() {
        let paths: Vec<Vec<f64>> = random_paths(4, 200, 5)
            .into_iter()
            .map(|p| p.into_iter().map(|v: f64| v.abs() * 0.01).collect())
            .collect();
        for kind in [RegionKind::Pointwise, RegionKind::Exd] {
            let r = clr_region(&paths, &[5, 6, 7, 8, 9], 0.4, 0.05, kind).unwrap();
            assert!(r.lower.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn cumulating_bounds_is_not_the_path_interval() {
        // Quantiles are not subadditive: a path-based bound can exceed the
        // cumulated ILR bound.
        let mut paths = vec![vec![0.0, 0.0]; 100];
        paths[0] = vec![1.0, 0.0];
        paths[1] = vec![1.0, 0.0];
        paths[2] = vec![0.0, 1.0];
        paths[3] = vec![0.0, 1.0];
        let ilr = pointwise_interval(&paths, &[8, 9], 0.05).unwrap();
        let clr = clr_region(&paths, &[8, 9], 0.0, 0.05, RegionKind::Pointwise).unwrap();
        let cumulated_upper = ilr.upper[0] + ilr.upper[1];
        assert_eq!(cumulated_upper, 0.0);
        assert_eq!(clr.upper[1], 1.0);
        // what does hold: path bounds stay within the range of path totals
        for seed in 0..50 {
            let p = random_paths(300 + seed, 60, 3);
            let c = clr_region(&p, &[7, 8, 9], 0.0, 0.05, RegionKind::Pointwise).unwrap();
            let totals: Vec<f64> = p.iter().map(|v| v.iter().sum::<f64>()).collect();
            let min = totals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(min <= c.lower[2] && c.upper[2] <= max);
        }
    }

    #[test]
    fn ensemble_csv_layout() {
        let e = BootstrapEnsemble::new(8, &[0.5, 0.2], vec![vec![0.1, 0.05], vec![0.2, 0.0]], vec![1, 2]);
        assert!((e.clr[0][1] - 0.85).abs() < 1e-12);
        let mut out = Vec::new();
        e.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("replicate,lag,ilr,clr\n1,8,0.1,"));
        assert_eq!(text.lines().count(), 5);
    }
}
