//! Forecast evaluation: MAPE, coverage, interval scores and PIT uniformity.
//!
//! Everything is scored on the cumulative loss-ratio scale.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Asymptotic 5% Kolmogorov-Smirnov constant.
pub const KS_CONSTANT: f64 = 1.358;

/// Mean absolute percentage error plus the targets left out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub value: f64,
    pub used: usize,
    /// Indices with nonpositive truth.
    pub excluded: Vec<usize>,
}

/// `mean |f - y| / |y|` over targets with positive truth.
pub fn mape_ultimate(forecasts: &[f64], truths: &[f64]) -> Result<Mape> {
    if forecasts.len() != truths.len() {
        return Err(Error::Argument(format!(
            "{} forecasts for {} truths",
            forecasts.len(),
            truths.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for (i, (f, y)) in forecasts.iter().zip(truths).enumerate() {
        if *y <= 0.0 {
            warn!("target {i} has nonpositive ultimate truth {y}; excluded from MAPE");
            excluded.push(i);
            continue;
        }
        sum += (f - y).abs() / y.abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::InsufficientData("no target with positive truth".into()));
    }
    Ok(Mape {
        value: sum / used as f64,
        used,
        excluded,
    })
}

/// Interval score of `[lower, upper]` for outcome `y` at level `1 - alpha`.
pub fn interval_score(lower: f64, upper: f64, y: f64, alpha: f64) -> Result<f64> {
    if upper < lower {
        return Err(Error::Argument(format!("upper {upper} below lower {lower}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut s = upper - lower;
    if y < lower {
        s += 2.0 / alpha * (lower - y);
    }
    if y > upper {
        s += 2.0 / alpha * (y - upper);
    }
    Ok(s)
}

/// Premium-weighted mean of per-target interval scores.
pub fn uis_weighted(scores: &[f64], premiums: &[f64]) -> Result<f64> {
    if scores.len() != premiums.len() {
        return Err(Error::Argument("scores and premiums differ in length".into()));
    }
    let total: f64 = premiums.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Argument(format!("total premium {total} is not positive")));
    }
    Ok(scores.iter().zip(premiums).map(|(s, p)| s * p).sum::<f64>() / total)
}

/// Interval band over the future lags of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    pub fn contains(&self, path: &[f64]) -> bool {
        path.len() == self.lower.len()
            && path
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(y, (l, u))| l <= y && y <= u)
    }
}

/// Mean over targets of the lag-averaged interval score along the future path.
pub fn cis(bands: &[Band], truths: &[Vec<f64>], alpha: f64) -> Result<f64> {
    if bands.len() != truths.len() || bands.is_empty() {
        return Err(Error::Argument("need one nonempty band per truth path".into()));
    }
    let mut total = 0.0;
    for (b, y) in bands.iter().zip(truths) {
        if b.lower.len() != y.len() || b.upper.len() != y.len() || y.is_empty() {
            return Err(Error::Argument("band and truth path lengths differ".into()));
        }
        let mut acc = 0.0;
        for j in 0..y.len() {
            acc += interval_score(b.lower[j], b.upper[j], y[j], alpha)?;
        }
        total += acc / y.len() as f64;
    }
    Ok(total / bands.len() as f64)
}

/// Share of targets with `lower <= y <= upper`.
pub fn coverage(intervals: &[(f64, f64)], truths: &[f64]) -> f64 {
    let hit = intervals
        .iter()
        .zip(truths)
        .filter(|((l, u), y)| l <= *y && *y <= u)
        .count();
    hit as f64 / truths.len().max(1) as f64
}

/// Share of targets whose whole truth path lies in its band.
pub fn functional_coverage(bands: &[Band], truths: &[Vec<f64>]) -> f64 {
    let hit = bands.iter().zip(truths).filter(|(b, y)| b.contains(y)).count();
    hit as f64 / truths.len().max(1) as f64
}

/// `(#below + 0.5 #equal + 0.5) / (B + 1)`.
pub fn pit(ensemble: &[f64], truth: f64) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    let below = ensemble.iter().filter(|&&v| v < truth).count() as f64;
    let equal = ensemble.iter().filter(|&&v| v == truth).count() as f64;
    Ok((below + 0.5 * equal + 0.5) / (ensemble.len() as f64 + 1.0))
}

/// How several scored lags of one target enter the PIT sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitPooling {
    /// One PIT per (target, lag).
    #[default]
    PerTargetLag,
    /// One PIT per target, taken at its last scored lag.
    PerTarget,
}

/// Kolmogorov-Smirnov test of PIT values against the uniform law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub n: usize,
    pub statistic: f64,
    pub critical: f64,
    pub reject: bool,
}

/// `sup |F_n(u) - u|` with critical value `constant / sqrt(n)`.
pub fn ks_uniform(pits: &[f64], constant: f64) -> Result<KsResult> {
    if pits.is_empty() {
        return Err(Error::InsufficientData("no PIT values".into()));
    }
    let mut u = pits.to_vec();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let statistic = u.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        d.max((i as f64 + 1.0) / n - v).max(v - i as f64 / n)
    });
    let critical = constant / n.sqrt();
    Ok(KsResult {
        n: u.len(),
        statistic,
        critical,
        reject: statistic > critical,
    })
}

/// PIT values of per-target ensembles over several lags.
///
/// `ensembles[t][j]` holds the replicate values of target `t` at its `j`-th
/// scored lag and `truths[t][j]` the outcome.
pub fn pit_values(ensembles: &[Vec<Vec<f64>>], truths: &[Vec<f64>], pooling: PitPooling) -> Result<Vec<f64>> {
    if ensembles.len() != truths.len() {
        return Err(Error::Argument("ensembles and truths differ in length".into()));
    }
    let mut out = Vec::new();
    for (e, y) in ensembles.iter().zip(truths) {
        if e.len() != y.len() || y.is_empty() {
            return Err(Error::Argument("ensemble and truth lags differ".into()));
        }
        match pooling {
            PitPooling::PerTargetLag => {
                for (vals, t) in e.iter().zip(y) {
                    out.push(pit(vals, *t)?);
                }
            }
            PitPooling::PerTarget => out.push(pit(e.last().expect("lag"), *y.last().expect("lag"))?),
        }
    }
    Ok(out)
}

/// `pit_quantile,empirical_cdf` rows of the sorted PIT sample.
pub fn write_ecdf_csv<W: Write>(out: W, pits: &[f64]) -> Result<()> {
    let mut u = pits.to_vec();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pit_quantile", "empirical_cdf"])?;
    for (i, v) in u.iter().enumerate() {
        w.write_record([v.to_string(), ((i as f64 + 1.0) / n).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Forecast of one target's future CLR path, as consumed by [`score_method`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetForecast {
    pub premium: f64,
    /// Point forecast of ultimate CLR.
    pub point: f64,
    /// Band over the future lags `s..10`.
    pub band: Band,
    /// Realized CLR over the same lags.
    pub truth: Vec<f64>,
}

/// One row of the score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub s: usize,
    pub method: String,
    pub mape: f64,
    pub coverage: f64,
    pub uis: f64,
    pub cis: f64,
    pub func_coverage: f64,
}

pub const SCORE_HEADER: [&str; 7] = ["s", "method", "mape", "coverage", "uis", "cis", "func_coverage"];

/// Aggregate the metrics of one method at one `s`.
pub fn score_method(s: usize, method: &str, targets: &[TargetForecast], alpha: f64) -> Result<ScoreRow> {
    if targets.is_empty() {
        return Err(Error::InsufficientData(format!("no targets to score for {method} at s={s}")));
    }
    let last = |v: &Vec<f64>| *v.last().expect("future lag");
    let points: Vec<f64> = targets.iter().map(|t| t.point).collect();
    let ult: Vec<f64> = targets.iter().map(|t| last(&t.truth)).collect();
    let intervals: Vec<(f64, f64)> = targets
        .iter()
        .map(|t| (last(&t.band.lower), last(&t.band.upper)))
        .collect();
    let is: Vec<f64> = intervals
        .iter()
        .zip(&ult)
        .map(|((l, u), y)| interval_score(*l, *u, *y, alpha))
        .collect::<Result<_>>()?;
    let premiums: Vec<f64> = targets.iter().map(|t| t.premium).collect();
    let bands: Vec<Band> = targets.iter().map(|t| t.band.clone()).collect();
    let truths: Vec<Vec<f64>> = targets.iter().map(|t| t.truth.clone()).collect();
    Ok(ScoreRow {
        s,
        method: method.to_string(),
        mape: mape_ultimate(&points, &ult)?.value,
        coverage: coverage(&intervals, &ult),
        uis: uis_weighted(&is, &premiums)?,
        cis: cis(&bands, &truths, alpha)?,
        func_coverage: functional_coverage(&bands, &truths),
    })
}

pub fn write_score_csv<W: Write>(out: W, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_HEADER)?;
    for r in rows {
        w.write_record([
            r.s.to_string(),
            r.method.clone(),
            r.mape.to_string(),
            r.coverage.to_string(),
            r.uis.to_string(),
            r.cis.to_string(),
            r.func_coverage.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
