//! End-to-end pipelines: fixed-origin backtest and sequential completion of
//! the lower-right triangles, plus the forecast tables they exchange with
//! scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{BootstrapConfig, BootstrapEnsemble, BootstrapPlan, RegionKind, ResampleUnit, Scale};
use crate::chain_ladder::{ClForecast, IntervalKind};
use crate::completion::{
    default_k_grid, default_lambda_grid, tune, CompletedCurve, CompletionModel, TuneResult, TuneSettings,
    DEFAULT_TUNE_FOLDS,
};
use crate::depth::{DepthMethod, DepthReport, MbdScale, OutlierRule};
use crate::error::{Error, Result};
use crate::regression::{PenaltySpec, DEFAULT_CV_FOLDS, DEFAULT_CV_GRID};
use crate::scoring::{score_method, Band, PitPooling, ScoreRow, TargetForecast};
use crate::seed::{derive_seed, stream};
use crate::triangle::{
    to_clr, to_ilr, CompanyProfile, CurveId, DevCurve, FeatureEncoding, LossTriangle, NUM_LAGS,
};

/// Development curves of a set of triangles with their covariates attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub triangles: Vec<LossTriangle>,
    /// Ordered by company, then accident year.
    pub curves: Vec<DevCurve>,
    pub encoding: FeatureEncoding,
}

impl Dataset {
    /// With `profiles`, every company must have one and the encoding uses them.
    /// The accident-year index counts from the earliest year present.
    pub fn new(mut triangles: Vec<LossTriangle>, profiles: Option<&BTreeMap<String, CompanyProfile>>) -> Result<Self> {
        triangles.sort_by(|a, b| a.company_id.cmp(&b.company_id));
        let base_year = triangles
            .iter()
            .flat_map(|t| t.accident_years.first().copied())
            .min()
            .ok_or_else(|| Error::InsufficientData("no triangles".into()))?;
        let mut curves = Vec::new();
        for t in &triangles {
            let profile = match profiles {
                Some(p) => Some(*p.get(&t.company_id).ok_or_else(|| {
                    Error::Validation(format!("company {} has no features row", t.company_id))
                })?),
                None => None,
            };
            for mut c in to_ilr(t) {
                c.features.profile = profile;
                curves.push(c);
            }
        }
        Ok(Dataset {
            triangles,
            curves,
            encoding: FeatureEncoding::new(base_year, profiles.is_some()),
        })
    }

    pub fn latest_year(&self) -> i32 {
        self.curves.iter().map(|c| c.id.accident_year).max().expect("nonempty dataset")
    }

    /// Fully developed curves with accident year at most `max_year`.
    pub fn complete_curves(&self, max_year: i32) -> Vec<DevCurve> {
        self.curves
            .iter()
            .filter(|c| c.is_complete() && c.id.accident_year <= max_year)
            .cloned()
            .collect()
    }

    pub fn year(&self, accident_year: i32) -> Vec<DevCurve> {
        self.curves.iter().filter(|c| c.id.accident_year == accident_year).cloned().collect()
    }

    /// Full CLR path of every complete curve.
    pub fn truth_clr(&self) -> BTreeMap<CurveId, Vec<f64>> {
        self.curves
            .iter()
            .filter(|c| c.is_complete())
            .map(|c| (c.id.clone(), c.clr()))
            .collect()
    }
}

/// Depth-based removal of outlying training curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSettings {
    pub method: DepthMethod,
    pub rule: OutlierRule,
    #[serde(default)]
    pub mbd_scale: MbdScale,
}

/// Split complete curves into kept curves and the flagged ids.
pub fn drop_outliers(curves: Vec<DevCurve>, settings: &OutlierSettings) -> Result<(Vec<DevCurve>, Vec<CurveId>)> {
    let mut report = DepthReport::compute(&curves, settings.method, settings.mbd_scale)?;
    let flagged: BTreeSet<usize> = report.flag(settings.rule)?.iter().copied().collect();
    let ids = flagged.iter().map(|&i| curves[i].id.clone()).collect();
    let kept = curves
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !flagged.contains(i))
        .map(|(_, c)| c)
        .collect();
    Ok((kept, ids))
}

fn default_alpha() -> f64 {
    0.05
}
fn default_folds() -> usize {
    DEFAULT_TUNE_FOLDS
}
fn default_replicates() -> usize {
    crate::bootstrap::DEFAULT_REPLICATES
}
fn default_pit_lags() -> Vec<usize> {
    vec![7, 8, 9]
}

/// Tuning, prior and bootstrap knobs shared by both pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Candidate K values; the default depends on `s`.
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    /// Regression-prior penalty; cross-validated when absent.
    #[serde(default)]
    pub prior_penalty: Option<PenaltySpec>,
    /// Zero disables the bootstrap.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub resample: ResampleUnit,
    #[serde(default)]
    pub refit_basis: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl PipelineSettings {
    pub fn new(seed: u64) -> Self {
        PipelineSettings {
            seed,
            folds: DEFAULT_TUNE_FOLDS,
            k_grid: None,
            lambda_grid: None,
            prior_penalty: None,
            replicates: default_replicates(),
            resample: ResampleUnit::Curve,
            refit_basis: false,
            alpha: default_alpha(),
        }
    }

    pub fn tune_settings(&self, s: usize) -> TuneSettings {
        TuneSettings {
            folds: self.folds,
            seed: derive_seed(self.seed, &[stream::TUNING, s as u64]),
            penalty: self.prior_penalty.clone().unwrap_or(PenaltySpec::CrossValidated {
                folds: DEFAULT_CV_FOLDS,
                grid_size: DEFAULT_CV_GRID,
                seed: derive_seed(self.seed, &[stream::PRIOR_CV, s as u64]),
            }),
        }
    }

    pub fn bootstrap_config(&self, s: usize) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.replicates,
            seed: derive_seed(self.seed, &[stream::BOOTSTRAP, s as u64]),
            unit: self.resample,
            refit_basis: self.refit_basis,
        }
    }

    /// Tune at `s`, then refit on all of `train` with the chosen K.
    pub fn tune_and_fit(
        &self,
        train: &[DevCurve],
        s: usize,
        encoding: &FeatureEncoding,
    ) -> Result<(TuneResult, CompletionModel)> {
        let k_grid = self.k_grid.clone().unwrap_or_else(|| default_k_grid(s));
        let lambda_grid = self.lambda_grid.clone().unwrap_or_else(default_lambda_grid);
        let tuned = tune(train, s, &k_grid, &lambda_grid, encoding, &self.tune_settings(s))?;
        let model = CompletionModel::fit(
            train,
            tuned.k,
            encoding,
            &PenaltySpec::PerFactor(tuned.prior_penalties[..tuned.k].to_vec()),
        )?;
        Ok((tuned, model))
    }
}

/// How a forecast band was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PlsPointwise,
    PlsExd,
    Cl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::PlsPointwise => "pls_pointwise",
            Method::PlsExd => "pls_exd",
            Method::Cl => "cl",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pls_pointwise" => Ok(Method::PlsPointwise),
            "pls_exd" => Ok(Method::PlsExd),
            "cl" => Ok(Method::Cl),
            _ => Err(Error::Argument(format!("unknown forecast method `{s}`"))),
        }
    }
}

/// Point forecast and interval band of future CLR for one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBand {
    pub id: CurveId,
    pub s: usize,
    pub method: Method,
    pub premium: f64,
    pub lags: Vec<usize>,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub const BAND_HEADER: [&str; 9] = [
    "company_id",
    "accident_year",
    "s",
    "method",
    "premium",
    "lag",
    "point",
    "lower",
    "upper",
];

pub fn write_bands_csv<W: Write>(out: W, bands: &[ForecastBand]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BAND_HEADER)?;
    for b in bands {
        for j in 0..b.lags.len() {
            w.write_record([
                b.id.company_id.clone(),
                b.id.accident_year.to_string(),
                b.s.to_string(),
                b.method.to_string(),
                b.premium.to_string(),
                b.lags[j].to_string(),
                b.point[j].to_string(),
                b.lower[j].to_string(),
                b.upper[j].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse<T: FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {what} `{field}`"),
    })
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Read a table written by [`write_bands_csv`]; consecutive rows of the same
/// curve, `s` and method form one band.
pub fn read_bands_csv<R: Read>(source: R) -> Result<Vec<ForecastBand>> {
    let mut rdr = csv::Reader::from_reader(source);
    check_header(&mut rdr, &BAND_HEADER)?;
    let mut out: Vec<ForecastBand> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = CurveId::new(&rec[0], parse(&rec[1], "accident year", line)?);
        let s: usize = parse(&rec[2], "s", line)?;
        let method: Method = rec[3].parse()?;
        let premium: f64 = parse(&rec[4], "premium", line)?;
        let lag: usize = parse(&rec[5], "lag", line)?;
        let same = out.last().is_some_and(|b| b.id == id && b.s == s && b.method == method);
        if !same {
            out.push(ForecastBand {
                id,
                s,
                method,
                premium,
                lags: Vec::new(),
                point: Vec::new(),
                lower: Vec::new(),
                upper: Vec::new(),
            });
        }
        let b = out.last_mut().expect("pushed");
        b.lags.push(lag);
        b.point.push(parse(&rec[6], "point", line)?);
        b.lower.push(parse(&rec[7], "lower", line)?);
        b.upper.push(parse(&rec[8], "upper", line)?);
    }
    Ok(out)
}

/// Bootstrap CLR values of one curve at one future lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSlice {
    pub id: CurveId,
    pub s: usize,
    pub lag: usize,
    pub values: Vec<f64>,
}

pub const ENSEMBLE_HEADER: [&str; 6] = ["company_id", "accident_year", "s", "lag", "replicate", "clr"];

pub fn write_ensembles_csv<W: Write>(out: W, slices: &[EnsembleSlice]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ENSEMBLE_HEADER)?;
    for e in slices {
        for (b, v) in e.values.iter().enumerate() {
            w.write_record([
                e.id.company_id.clone(),
                e.id.accident_year.to_string(),
                e.s.to_string(),
                e.lag.to_string(),
                (b + 1).to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ensembles_csv<R: Read>(source: R) -> Result<Vec<EnsembleSlice>> {
    let mut rdr = csv::Reader::from_reader(source);
    check_header(&mut rdr, &ENSEMBLE_HEADER)?;
    let mut out: Vec<EnsembleSlice> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = CurveId::new(&rec[0], parse(&rec[1], "accident year", line)?);
        let s: usize = parse(&rec[2], "s", line)?;
        let lag: usize = parse(&rec[3], "lag", line)?;
        let same = out.last().is_some_and(|e| e.id == id && e.s == s && e.lag == lag);
        if !same {
            out.push(EnsembleSlice { id, s, lag, values: Vec::new() });
        }
        out.last_mut().expect("pushed").values.push(parse(&rec[5], "clr", line)?);
    }
    Ok(out)
}

fn pls_bands(done: &CompletedCurve, ens: &BootstrapEnsemble, alpha: f64) -> Result<Vec<ForecastBand>> {
    let s = done.observed_lags();
    let lags: Vec<usize> = (s..NUM_LAGS).collect();
    [(Method::PlsPointwise, RegionKind::Pointwise), (Method::PlsExd, RegionKind::Exd)]
        .into_iter()
        .map(|(method, kind)| {
            let r = ens.region(kind, Scale::Clr, alpha)?;
            Ok(ForecastBand {
                id: done.id.clone(),
                s,
                method,
                premium: done.premium,
                lags: lags.clone(),
                point: done.forecast_clr.clone(),
                lower: r.lower,
                upper: r.upper,
            })
        })
        .collect()
}

/// Chain-ladder bands of the given accident year for every company.
fn cl_bands(dataset: &Dataset, year: i32, kind: IntervalKind, alpha: f64) -> Vec<ForecastBand> {
    let mut out = Vec::new();
    for t in &dataset.triangles {
        let Some(s) = t.cumulative.get(&year).map(Vec::len) else { continue };
        if s >= NUM_LAGS {
            continue;
        }
        let fc = match ClForecast::fit(t) {
            Ok(f) => f,
            Err(e) => {
                warn!("chain ladder skipped for {}: {e}", t.company_id);
                continue;
            }
        };
        if let Some(f) = fc.clr_curves(kind, alpha).into_iter().find(|f| f.accident_year == year) {
            out.push(ForecastBand {
                id: CurveId::new(t.company_id.clone(), year),
                s,
                method: Method::Cl,
                premium: t.premiums[&year],
                lags: f.lags,
                point: f.clr,
                lower: f.lower,
                upper: f.upper,
            });
        }
    }
    out
}

/// One step of the sequential completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub s: usize,
    pub accident_year: i32,
    pub n_train: usize,
    pub k: usize,
    pub lambda: f64,
    /// Cross-validated MAPE of ultimate CLR at the chosen point.
    pub mape: f64,
}

pub const LEDGER_HEADER: [&str; 5] = ["s", "n_train", "K", "lambda", "mape"];

pub fn write_ledger_csv<W: Write>(out: W, rows: &[LedgerRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LEDGER_HEADER)?;
    for r in rows {
        w.write_record([
            r.s.to_string(),
            r.n_train.to_string(),
            r.k.to_string(),
            r.lambda.to_string(),
            r.mape.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialSettings {
    pub start_year: i32,
    pub end_year: i32,
    #[serde(flatten)]
    pub pipeline: PipelineSettings,
    /// Lags whose bootstrap CLR values are kept for PIT.
    #[serde(default = "default_pit_lags")]
    pub pit_lags: Vec<usize>,
    #[serde(default)]
    pub cl_interval: IntervalKind,
    /// Also emit chain-ladder bands for the completed years.
    #[serde(default)]
    pub chain_ladder: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequentialOutput {
    pub ledger: Vec<LedgerRow>,
    pub completed: Vec<CompletedCurve>,
    pub bands: Vec<ForecastBand>,
    pub ensembles: Vec<EnsembleSlice>,
}

/// Complete accident years `start..=end` in order. Each year is tuned on the
/// current training set, completed, and its completed curves join the
/// training set of the next year.
pub fn sequential_completion(
    dataset: &Dataset,
    train: Vec<DevCurve>,
    settings: &SequentialSettings,
) -> Result<SequentialOutput> {
    let current = dataset.latest_year();
    let mut train = train;
    let mut out = SequentialOutput::default();
    for year in settings.start_year..=settings.end_year {
        let lags = current - year + 1;
        if !(1..NUM_LAGS as i32).contains(&lags) {
            return Err(Error::Argument(format!(
                "accident year {year} has {lags} lags at calendar year {current}; need 1..=9"
            )));
        }
        let s = lags as usize;
        let targets = dataset.year(year);
        if targets.is_empty() {
            warn!("no curves for accident year {year}; skipped");
            continue;
        }
        if let Some(c) = targets.iter().find(|c| c.observed_lags() != s) {
            return Err(Error::Validation(format!(
                "{} has {} lags, calendar year {current} implies {s}",
                c.id,
                c.observed_lags()
            )));
        }
        let (tuned, model) = settings.pipeline.tune_and_fit(&train, s, &dataset.encoding)?;
        out.ledger.push(LedgerRow {
            s,
            accident_year: year,
            n_train: train.len(),
            k: tuned.k,
            lambda: tuned.lambda,
            mape: tuned.mape,
        });
        let completed: Vec<CompletedCurve> = targets
            .iter()
            .map(|c| model.complete(c, tuned.lambda))
            .collect::<Result<_>>()?;
        if settings.pipeline.replicates > 0 {
            let plan = BootstrapPlan::build(&train, &model, tuned.lambda, &settings.pipeline.bootstrap_config(s))?;
            for (i, done) in completed.iter().enumerate() {
                let ens = plan.forecast(&targets[i], i as u64)?;
                out.bands.extend(pls_bands(done, &ens, settings.pipeline.alpha)?);
                for &lag in settings.pit_lags.iter().filter(|&&l| l >= s && l < NUM_LAGS) {
                    out.ensembles.push(EnsembleSlice {
                        id: done.id.clone(),
                        s,
                        lag,
                        values: ens.clr.iter().map(|p| p[lag - s]).collect(),
                    });
                }
            }
        }
        if settings.chain_ladder {
            out.bands.extend(cl_bands(dataset, year, settings.cl_interval, settings.pipeline.alpha));
        }
        train.extend(completed.iter().map(CompletedCurve::to_dev_curve));
        out.completed.extend(completed);
    }
    Ok(out)
}

/// `company_id,accident_year,lag,cumulative_paid,earned_premium,source` for
/// every curve, with completed cells marked `forecast`.
pub fn write_completed_triangles_csv<W: Write>(
    out: W,
    dataset: &Dataset,
    completed: &[CompletedCurve],
) -> Result<()> {
    let done: BTreeMap<&CurveId, &CompletedCurve> = completed.iter().map(|c| (&c.id, c)).collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["company_id", "accident_year", "lag", "cumulative_paid", "earned_premium", "source"])?;
    for c in &dataset.curves {
        let (ilr, s) = match done.get(&c.id) {
            Some(d) => (d.full_ilr(), d.observed_lags()),
            None => (c.ilr.clone(), c.ilr.len()),
        };
        for (lag, clr) in to_clr(&ilr).iter().enumerate() {
            w.write_record([
                c.id.company_id.clone(),
                c.id.accident_year.to_string(),
                lag.to_string(),
                (clr * c.premium).to_string(),
                c.premium.to_string(),
                if lag < s { "observed" } else { "forecast" }.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `company_id,accident_year,lag,ilr,clr,source` of the completed curves.
pub fn write_completed_curves_csv<W: Write>(out: W, completed: &[CompletedCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["company_id", "accident_year", "lag", "ilr", "clr", "source"])?;
    for c in completed {
        let s = c.observed_lags();
        for (lag, (y, v)) in c.full_ilr().iter().zip(c.full_clr()).enumerate() {
            w.write_record([
                c.id.company_id.clone(),
                c.id.accident_year.to_string(),
                lag.to_string(),
                y.to_string(),
                v.to_string(),
                if lag < s { "observed" } else { "forecast" }.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Score report rows by `(s, method)`, plus bands that had no truth.
pub fn score_bands(
    bands: &[ForecastBand],
    truth: &BTreeMap<CurveId, Vec<f64>>,
    alpha: f64,
) -> Result<(Vec<ScoreRow>, Vec<CurveId>)> {
    let mut groups: BTreeMap<(usize, Method), Vec<TargetForecast>> = BTreeMap::new();
    let mut missing = Vec::new();
    for b in bands {
        let Some(path) = truth.get(&b.id) else {
            missing.push(b.id.clone());
            continue;
        };
        groups.entry((b.s, b.method)).or_default().push(TargetForecast {
            premium: b.premium,
            point: *b.point.last().expect("future lag"),
            band: Band {
                lower: b.lower.clone(),
                upper: b.upper.clone(),
            },
            truth: b.lags.iter().map(|&l| path[l]).collect(),
        });
    }
    missing.sort();
    missing.dedup();
    let rows = groups
        .iter()
        .rev()
        .map(|((s, m), t)| score_method(*s, &m.to_string(), t, alpha))
        .collect::<Result<_>>()?;
    Ok((rows, missing))
}

/// PIT values of the stored ensembles against the truth, optionally
/// restricted to accident years in `years`.
pub fn ensemble_pits(
    slices: &[EnsembleSlice],
    truth: &BTreeMap<CurveId, Vec<f64>>,
    pooling: PitPooling,
    years: Option<(i32, i32)>,
) -> Result<Vec<f64>> {
    let keep = |e: &&EnsembleSlice| {
        truth.contains_key(&e.id) && years.is_none_or(|(a, b)| (a..=b).contains(&e.id.accident_year))
    };
    let mut by_target: BTreeMap<(&CurveId, usize), Vec<&EnsembleSlice>> = BTreeMap::new();
    for e in slices.iter().filter(keep) {
        by_target.entry((&e.id, e.s)).or_default().push(e);
    }
    let mut ens = Vec::new();
    let mut ys = Vec::new();
    for ((id, _), mut v) in by_target {
        v.sort_by_key(|e| e.lag);
        ys.push(v.iter().map(|e| truth[id][e.lag]).collect());
        ens.push(v.iter().map(|e| e.values.clone()).collect());
    }
    crate::scoring::pit_values(&ens, &ys, pooling)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSettings {
    /// Accident year treated as current.
    pub origin_year: i32,
    /// Companies to forecast; all with truth when absent.
    #[serde(default)]
    pub companies: Option<Vec<String>>,
    #[serde(flatten)]
    pub pipeline: PipelineSettings,
    #[serde(default = "default_region")]
    pub region: RegionKind,
}

fn default_region() -> RegionKind {
    RegionKind::Exd
}

/// Ultimate CLR forecast of one company at one `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub company_id: String,
    pub s: usize,
    pub k: usize,
    pub lambda: f64,
    pub truth: f64,
    pub forecast: f64,
    /// Mean of the bootstrap ultimates; NaN without a bootstrap.
    pub bootstrap_mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BacktestOutput {
    pub rows: Vec<BacktestRow>,
    /// Companies left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Forecast the origin-year curve of each company from `s = 1..=9` observed
/// lags, always training on the curves developed by the origin year.
pub fn fixed_origin_backtest(dataset: &Dataset, train: Vec<DevCurve>, settings: &BacktestSettings) -> Result<BacktestOutput> {
    let year = settings.origin_year;
    let mut out = BacktestOutput::default();
    let mut targets = Vec::new();
    let wanted: Option<BTreeSet<&str>> = settings.companies.as_ref().map(|v| v.iter().map(String::as_str).collect());
    for t in &dataset.triangles {
        if wanted.as_ref().is_some_and(|w| !w.contains(t.company_id.as_str())) {
            continue;
        }
        match dataset.curves.iter().find(|c| c.id.company_id == t.company_id && c.id.accident_year == year) {
            Some(c) if c.is_complete() => targets.push(c.clone()),
            Some(_) => out.skipped.push((t.company_id.clone(), format!("accident year {year} not developed to lag 9"))),
            None => out.skipped.push((t.company_id.clone(), format!("no accident year {year}"))),
        }
    }
    if let Some(w) = &wanted {
        for id in w.iter().filter(|id| !dataset.triangles.iter().any(|t| t.company_id == **id)) {
            out.skipped.push((id.to_string(), "unknown company".into()));
        }
    }
    for s in 1..NUM_LAGS {
        let (tuned, model) = settings.pipeline.tune_and_fit(&train, s, &dataset.encoding)?;
        let plan = if settings.pipeline.replicates > 0 {
            Some(BootstrapPlan::build(&train, &model, tuned.lambda, &settings.pipeline.bootstrap_config(s))?)
        } else {
            None
        };
        for (i, full) in targets.iter().enumerate() {
            let partial = full.truncated(s);
            let done = model.complete(&partial, tuned.lambda)?;
            let (mean, lower, upper) = match &plan {
                Some(p) => {
                    let ens = p.forecast(&partial, i as u64)?;
                    let ult = ens.ultimate(Scale::Clr);
                    let (lo, hi) = ens.region(settings.region, Scale::Clr, settings.pipeline.alpha)?.last();
                    (ult.iter().sum::<f64>() / ult.len() as f64, lo, hi)
                }
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            out.rows.push(BacktestRow {
                company_id: full.id.company_id.clone(),
                s,
                k: tuned.k,
                lambda: tuned.lambda,
                truth: *full.clr().last().expect("complete"),
                forecast: done.ultimate_clr(),
                bootstrap_mean: mean,
                lower,
                upper,
            });
        }
    }
    Ok(out)
}

pub fn write_backtest_csv<W: Write>(out: W, rows: &[BacktestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["company_id", "s", "K", "lambda", "truth", "forecast", "bootstrap_mean", "lower", "upper"])?;
    for r in rows {
        w.write_record([
            r.company_id.clone(),
            r.s.to_string(),
            r.k.to_string(),
            r.lambda.to_string(),
            r.truth.to_string(),
            r.forecast.to_string(),
            r.bootstrap_mean.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SynthSpec};

    /// Scores exactly linear in time and log premium, no noise.
    fn noiseless(companies: usize, seed: u64) -> SynthSpec {
        let a: Vec<f64> = (0..NUM_LAGS).map(|x| (x as f64 * 0.4).sin()).collect();
        let b: Vec<f64> = (0..NUM_LAGS).map(|x| 1.0 / (1.0 + x as f64)).collect();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let a: Vec<f64> = a.iter().map(|v| v / na).collect();
        let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let b: Vec<f64> = b.iter().zip(&a).map(|(y, x)| y - d * x).collect();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b: Vec<f64> = b.iter().map(|v| v / nb).collect();
        let mut spec = SynthSpec::plain(
            companies,
            (1995, 2010),
            vec![0.17, 0.19, 0.1, 0.06, 0.034, 0.022, 0.015, 0.011, 0.008, 0.006],
            vec![a, b],
            vec![0.0, 0.0],
            vec![0.0; NUM_LAGS],
            seed,
        );
        spec.effects = vec![vec![0.002, 0.02, 0.0], vec![-0.001, 0.0, 0.004]];
        spec
    }

    fn exact_settings(seed: u64) -> PipelineSettings {
        PipelineSettings {
            folds: 3,
            k_grid: Some(vec![1, 2, 3]),
            lambda_grid: Some(vec![0.01, 1.0]),
            prior_penalty: Some(PenaltySpec::Fixed(0.0)),
            replicates: 0,
            ..PipelineSettings::new(seed)
        }
    }

    #[test]
    fn noiseless_sequential_completion_is_exact() {
        let spec = noiseless(12, 3);
        let data = generate(&spec).unwrap();
        let ds = Dataset::new(data.triangles.clone(), None).unwrap();
        let truth = Dataset::new(data.truth.clone(), None).unwrap().truth_clr();
        let settings = SequentialSettings {
            start_year: 2002,
            end_year: 2010,
            pipeline: exact_settings(1),
            pit_lags: vec![9],
            cl_interval: IntervalKind::Normal,
            chain_ladder: false,
        };
        let out = sequential_completion(&ds, ds.complete_curves(2001), &settings).unwrap();
        assert_eq!(out.ledger.len(), 9);
        assert_eq!(out.ledger[0].n_train, 12 * 7);
        assert_eq!(out.ledger[8].n_train, 12 * 15);
        assert!(out.ledger.iter().all(|r| r.k >= 2), "{:?}", out.ledger);
        for c in &out.completed {
            for (a, b) in c.full_clr().iter().zip(&truth[&c.id]) {
                assert!((a - b).abs() < 1e-6, "{}: {a} vs {b}", c.id);
            }
        }
        let mut csv = Vec::new();
        write_completed_triangles_csv(&mut csv, &ds, &out.completed).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 12 * 16 * NUM_LAGS);
        assert_eq!(text.lines().filter(|l| l.ends_with("forecast")).count(), 12 * 45);
    }

    #[test]
    fn single_year_is_one_pass() {
        let spec = noiseless(8, 5);
        let data = generate(&spec).unwrap();
        let ds = Dataset::new(data.triangles, None).unwrap();
        let settings = SequentialSettings {
            start_year: 2009,
            end_year: 2009,
            pipeline: exact_settings(2),
            pit_lags: vec![],
            cl_interval: IntervalKind::Normal,
            chain_ladder: true,
        };
        let out = sequential_completion(&ds, ds.complete_curves(2001), &settings).unwrap();
        assert_eq!(out.ledger.len(), 1);
        assert_eq!(out.ledger[0].s, 2);
        assert_eq!(out.completed.len(), 8);
        assert!(out.bands.iter().all(|b| b.method == Method::Cl && b.lags == (2..NUM_LAGS).collect::<Vec<_>>()));
    }

    #[test]
    fn noiseless_backtest_hits_truth_once_s_reaches_k() {
        let spec = noiseless(10, 7);
        let data = generate(&spec).unwrap();
        let ds = Dataset::new(data.truth, None).unwrap();
        let settings = BacktestSettings {
            origin_year: 2010,
            companies: Some(vec!["S001".into(), "S002".into(), "nope".into()]),
            pipeline: exact_settings(4),
            region: RegionKind::Exd,
        };
        let out = fixed_origin_backtest(&ds, ds.complete_curves(2001), &settings).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.rows.len(), 2 * 9);
        for r in out.rows.iter().filter(|r| r.s >= 2) {
            assert!((r.forecast - r.truth).abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn bands_and_ensembles_round_trip_and_score() {
        let spec = SynthSpec::workers_comp(10, 11);
        let data = generate(&spec).unwrap();
        let ds = Dataset::new(data.triangles.clone(), Some(&data.profiles)).unwrap();
        let truth = Dataset::new(data.truth.clone(), Some(&data.profiles)).unwrap().truth_clr();
        let settings = SequentialSettings {
            start_year: 2008,
            end_year: 2010,
            pipeline: PipelineSettings {
                folds: 3,
                k_grid: Some(vec![1, 2]),
                lambda_grid: Some(vec![0.01, 0.1]),
                replicates: 40,
                ..PipelineSettings::new(9)
            },
            pit_lags: vec![7, 8, 9],
            cl_interval: IntervalKind::Normal,
            chain_ladder: true,
        };
        let out = sequential_completion(&ds, ds.complete_curves(2001), &settings).unwrap();
        let mut buf = Vec::new();
        write_bands_csv(&mut buf, &out.bands).unwrap();
        assert_eq!(read_bands_csv(&buf[..]).unwrap(), out.bands);
        let mut buf = Vec::new();
        write_ensembles_csv(&mut buf, &out.ensembles).unwrap();
        assert_eq!(read_ensembles_csv(&buf[..]).unwrap(), out.ensembles);

        let (rows, missing) = score_bands(&out.bands, &truth, 0.05).unwrap();
        assert!(missing.is_empty());
        // three years, three methods
        assert_eq!(rows.len(), 9);
        assert!(rows.windows(2).all(|w| w[0].s >= w[1].s));
        for r in &rows {
            assert!(r.func_coverage <= r.coverage, "{r:?}");
        }
        let pits = ensemble_pits(&out.ensembles, &truth, PitPooling::PerTargetLag, None).unwrap();
        assert_eq!(pits.len(), 10 * 3 * 3);
        assert!(pits.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}
