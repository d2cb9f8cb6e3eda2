//! Loss triangles and the incremental / cumulative loss-ratio curves derived
//! from them.
//!
//! A [`LossTriangle`] stores, per accident year, the observed prefix of
//! cumulative paid losses over development lags `0..=9` together with the
//! year's net earned premium. [`to_ilr`] turns it into one [`DevCurve`] per
//! accident year; [`to_clr`] and [`clr_to_ilr`] move between the incremental
//! and cumulative ratio scales.

mod features;
mod ingest;
mod summary;

pub use features::{
    read_features_csv, write_features_csv, BusinessFocus, CompanyFeatures, CompanyProfile, FeatureEncoding,
    Geography, Ownership,
};
pub use ingest::{
    apply_filters, ingest_triangles, write_triangles_csv, Exclusion, Ingested, SelectionFilters,
    TRIANGLE_HEADER,
};
pub use summary::{summarize, LagSummary, SummaryTable, ZERO_TOLERANCE};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of development lags (`0..=9`).
pub const NUM_LAGS: usize = 10;
/// Index of the last development lag.
pub const LAST_LAG: usize = NUM_LAGS - 1;

/// Cumulative paid losses of one company, by accident year and lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTriangle {
    pub company_id: String,
    /// Accident years in ascending order.
    pub accident_years: Vec<i32>,
    pub premiums: BTreeMap<i32, f64>,
    /// Observed prefix of cumulative paid losses, lags `0..len`.
    pub cumulative: BTreeMap<i32, Vec<f64>>,
}

impl LossTriangle {
    /// Build a triangle from per-year `(premium, cumulative prefix)` rows.
    pub fn new(
        company_id: impl Into<String>,
        rows: impl IntoIterator<Item = (i32, f64, Vec<f64>)>,
    ) -> Result<Self> {
        let company_id = company_id.into();
        let mut premiums = BTreeMap::new();
        let mut cumulative = BTreeMap::new();
        for (year, premium, cells) in rows {
            if premiums.insert(year, premium).is_some() {
                return Err(Error::Validation(format!(
                    "{company_id}: accident year {year} given twice"
                )));
            }
            cumulative.insert(year, cells);
        }
        let accident_years = premiums.keys().copied().collect();
        let t = LossTriangle {
            company_id,
            accident_years,
            premiums,
            cumulative,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for &year in &self.accident_years {
            let p = self.premiums.get(&year).copied().unwrap_or(f64::NAN);
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::Validation(format!(
                    "{}: premium for accident year {year} must be positive, got {p}",
                    self.company_id
                )));
            }
            let cells = self.cumulative.get(&year).map(Vec::as_slice).unwrap_or(&[]);
            if cells.is_empty() || cells.len() > NUM_LAGS {
                return Err(Error::Validation(format!(
                    "{}: accident year {year} has {} observed lags, expected 1..={NUM_LAGS}",
                    self.company_id,
                    cells.len()
                )));
            }
            if let Some(v) = cells.iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{}: accident year {year} has non-finite cell {v}",
                    self.company_id
                )));
            }
        }
        Ok(())
    }

    /// Last observed lag for an accident year.
    pub fn observed_through(&self, year: i32) -> Option<usize> {
        self.cumulative.get(&year).map(|c| c.len() - 1)
    }

    pub fn latest_year(&self) -> Option<i32> {
        self.accident_years.last().copied()
    }

    /// The triangle as it looked at the end of calendar year `current_year`:
    /// later accident years are dropped and each year keeps lags
    /// `0..=min(9, current_year - t)`.
    pub fn masked(&self, current_year: i32) -> LossTriangle {
        let mut out = LossTriangle {
            company_id: self.company_id.clone(),
            accident_years: Vec::new(),
            premiums: BTreeMap::new(),
            cumulative: BTreeMap::new(),
        };
        for &year in self.accident_years.iter().filter(|&&y| y <= current_year) {
            let keep = ((current_year - year) as usize + 1).min(NUM_LAGS);
            let cells = &self.cumulative[&year];
            out.accident_years.push(year);
            out.premiums.insert(year, self.premiums[&year]);
            out.cumulative
                .insert(year, cells[..keep.min(cells.len())].to_vec());
        }
        out
    }

    /// Accident years whose observed prefix does not match the diagonal of
    /// calendar year `current_year`.
    pub fn diagonal_violations(&self, current_year: i32) -> Vec<String> {
        let mut out = Vec::new();
        for &year in &self.accident_years {
            let have = self.cumulative[&year].len();
            if year > current_year {
                out.push(format!(
                    "{}: accident year {year} is after calendar year {current_year}",
                    self.company_id
                ));
                continue;
            }
            let want = ((current_year - year) as usize + 1).min(NUM_LAGS);
            if have != want {
                out.push(format!(
                    "{}: accident year {year} has {have} lags, diagonal of {current_year} implies {want}",
                    self.company_id
                ));
            }
        }
        out
    }
}

/// Identifies one development curve: a company's accident year.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CurveId {
    pub company_id: String,
    pub accident_year: i32,
}

impl CurveId {
    pub fn new(company_id: impl Into<String>, accident_year: i32) -> Self {
        CurveId {
            company_id: company_id.into(),
            accident_year,
        }
    }
}

impl fmt::Display for CurveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.company_id, self.accident_year)
    }
}

/// Incremental loss-ratio curve of one (company, accident year).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevCurve {
    pub id: CurveId,
    pub premium: f64,
    /// Observed incremental loss ratios, lags `0..=observed_through`.
    pub ilr: Vec<f64>,
    pub features: CompanyFeatures,
}

impl DevCurve {
    pub fn observed_through(&self) -> usize {
        self.ilr.len() - 1
    }

    /// Number of observed lags (`s` in the completion notation).
    pub fn observed_lags(&self) -> usize {
        self.ilr.len()
    }

    pub fn is_complete(&self) -> bool {
        self.ilr.len() == NUM_LAGS
    }

    /// ILR at `lag`, or `None` beyond the observed prefix.
    pub fn ilr_at(&self, lag: usize) -> Option<f64> {
        self.ilr.get(lag).copied()
    }

    pub fn clr(&self) -> Vec<f64> {
        to_clr(&self.ilr)
    }

    /// Same curve truncated to its first `lags` observations.
    pub fn truncated(&self, lags: usize) -> DevCurve {
        let mut c = self.clone();
        c.ilr.truncate(lags.max(1));
        c
    }
}

/// Split a triangle into incremental loss-ratio curves, one per accident year.
///
/// Negative increments are kept as-is.
pub fn to_ilr(t: &LossTriangle) -> Vec<DevCurve> {
    t.accident_years
        .iter()
        .map(|&year| {
            let premium = t.premiums[&year];
            let cells = &t.cumulative[&year];
            let ilr = cells
                .iter()
                .enumerate()
                .map(|(x, &c)| {
                    if x == 0 {
                        c / premium
                    } else {
                        (c - cells[x - 1]) / premium
                    }
                })
                .collect();
            DevCurve {
                id: CurveId::new(t.company_id.clone(), year),
                premium,
                ilr,
                features: CompanyFeatures::new(year, premium),
            }
        })
        .collect()
}

/// Running sum of incremental loss ratios.
pub fn to_clr(ilr: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    ilr.iter()
        .map(|y| {
            acc += y;
            acc
        })
        .collect()
}

/// First differences of a cumulative loss-ratio vector.
pub fn clr_to_ilr(clr: &[f64]) -> Vec<f64> {
    clr.iter()
        .enumerate()
        .map(|(x, &c)| if x == 0 { c } else { c - clr[x - 1] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(rows: Vec<(i32, f64, Vec<f64>)>) -> LossTriangle {
        LossTriangle::new("C1", rows).unwrap()
    }

    #[test]
    fn ilr_from_two_cells() {
        let t = tri(vec![(2000, 1000.0, vec![100.0, 150.0])]);
        let c = &to_ilr(&t)[0];
        assert_eq!(c.ilr, vec![0.10, 0.05]);
        assert_eq!(c.observed_through(), 1);
    }

    #[test]
    fn constant_tail_gives_zero_increments() {
        let cells = vec![10.0, 20.0, 30.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0];
        let t = tri(vec![(2000, 100.0, cells)]);
        let c = &to_ilr(&t)[0];
        assert!(c.ilr[4..].iter().all(|&y| y == 0.0));
        assert!(c.is_complete());
    }

    #[test]
    fn negative_increment_is_preserved() {
        let t = tri(vec![(2000, 1000.0, vec![100.0, 90.0])]);
        let c = &to_ilr(&t)[0];
        assert_eq!(c.ilr[0], 0.1);
        assert!((c.ilr[1] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn clr_is_running_sum() {
        let clr = to_clr(&[0.1, 0.05, 0.02]);
        assert!((clr[0] - 0.10).abs() < 1e-15);
        assert!((clr[1] - 0.15).abs() < 1e-15);
        assert!((clr[2] - 0.17).abs() < 1e-15);
        assert_eq!(to_clr(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn premium_times_clr_recovers_cumulative() {
        let cells = vec![123.5, 456.25, 500.0, 612.75];
        let t = tri(vec![(2001, 987.0, cells.clone())]);
        let c = &to_ilr(&t)[0];
        for (x, clr) in c.clr().iter().enumerate() {
            assert!((clr * c.premium - cells[x]).abs() <= 1e-12 * cells[x].abs());
        }
    }

    #[test]
    fn masking_follows_the_diagonal() {
        let full: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let t = tri(vec![
            (2000, 10.0, full.clone()),
            (2005, 10.0, full.clone()),
            (2009, 10.0, full),
        ]);
        let m = t.masked(2008);
        assert_eq!(m.accident_years, vec![2000, 2005]);
        assert_eq!(m.observed_through(2000), Some(8));
        assert_eq!(m.observed_through(2005), Some(3));
        assert!(m.diagonal_violations(2008).is_empty());
        assert_eq!(t.diagonal_violations(2008).len(), 3);
    }

    #[test]
    fn nonpositive_premium_rejected() {
        assert!(LossTriangle::new("C", vec![(2000, 0.0, vec![1.0])]).is_err());
        assert!(LossTriangle::new("C", vec![(2000, -5.0, vec![1.0])]).is_err());
    }

    proptest::proptest! {
        // dyadic values keep every partial sum exact
        #[test]
        fn ilr_clr_roundtrip_exact(raw in proptest::collection::vec(-1024i32..1024, 1..=10)) {
            let ilr: Vec<f64> = raw.iter().map(|&v| v as f64 / 1024.0).collect();
            proptest::prop_assert_eq!(clr_to_ilr(&to_clr(&ilr)), ilr.clone());
            let clr = to_clr(&ilr);
            proptest::prop_assert_eq!(to_clr(&clr_to_ilr(&clr)), clr);
        }
    }
}
