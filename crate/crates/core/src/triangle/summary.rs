use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{DevCurve, NUM_LAGS};
use crate::error::{Error, Result};
use crate::stats;

/// `|y|` below this counts as a zero ILR.
pub const ZERO_TOLERANCE: f64 = 1e-12;
const WINSOR_TAIL: f64 = 0.05;

/// Descriptive statistics of the ILRs observed at one lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagSummary {
    pub lag: usize,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    /// Median absolute deviation, unscaled.
    pub mad_raw: f64,
    /// `mad_raw * 1.4826`.
    pub mad: f64,
    pub min: f64,
    pub max: f64,
    pub q95: f64,
    pub q99: f64,
    /// Moment skewness.
    pub skewness: f64,
    /// Non-excess moment kurtosis.
    pub kurtosis: f64,
    pub winsorized_mean: f64,
    pub winsorized_sd: f64,
    pub n_positive: usize,
    pub n_zero: usize,
    pub n_negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub lags: Vec<LagSummary>,
}

fn lag_summary(lag: usize, values: &[f64]) -> LagSummary {
    let sorted = stats::sorted_copy(values);
    let wins = stats::winsorize(values, WINSOR_TAIL);
    let mad_raw = stats::mad_raw(values);
    LagSummary {
        lag,
        n: values.len(),
        mean: stats::mean(values),
        sd: stats::sample_sd(values),
        median: stats::quantile_sorted(&sorted, 0.5),
        mad_raw,
        mad: mad_raw * stats::MAD_SCALE,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        q95: stats::quantile_sorted(&sorted, 0.95),
        q99: stats::quantile_sorted(&sorted, 0.99),
        skewness: stats::skewness(values),
        kurtosis: stats::kurtosis(values),
        winsorized_mean: stats::mean(&wins),
        winsorized_sd: stats::sample_sd(&wins),
        n_positive: values.iter().filter(|&&v| v >= ZERO_TOLERANCE).count(),
        n_zero: values.iter().filter(|&&v| v.abs() < ZERO_TOLERANCE).count(),
        n_negative: values.iter().filter(|&&v| v <= -ZERO_TOLERANCE).count(),
    }
}

/// Per-lag summary statistics over every curve observed at that lag.
pub fn summarize(curves: &[DevCurve]) -> Result<SummaryTable> {
    let complete = curves.iter().filter(|c| c.is_complete()).count();
    if complete < 2 {
        return Err(Error::InsufficientData(format!(
            "summary needs at least 2 complete curves, got {complete}"
        )));
    }
    let lags = (0..NUM_LAGS)
        .map(|lag| {
            let values: Vec<f64> = curves.iter().filter_map(|c| c.ilr_at(lag)).collect();
            lag_summary(lag, &values)
        })
        .collect();
    Ok(SummaryTable { lags })
}

impl SummaryTable {
    pub const CSV_HEADER: [&'static str; 18] = [
        "lag",
        "n",
        "mean",
        "sd",
        "median",
        "mad",
        "mad_raw",
        "min",
        "max",
        "q95",
        "q99",
        "skewness",
        "kurtosis",
        "winsorized_mean",
        "winsorized_sd",
        "n_positive",
        "n_zero",
        "n_negative",
    ];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for s in &self.lags {
            w.write_record([
                s.lag.to_string(),
                s.n.to_string(),
                s.mean.to_string(),
                s.sd.to_string(),
                s.median.to_string(),
                s.mad.to_string(),
                s.mad_raw.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                s.q95.to_string(),
                s.q99.to_string(),
                s.skewness.to_string(),
                s.kurtosis.to_string(),
                s.winsorized_mean.to_string(),
                s.winsorized_sd.to_string(),
                s.n_positive.to_string(),
                s.n_zero.to_string(),
                s.n_negative.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triangle::{CompanyFeatures, CurveId};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal, StudentT};

    fn curve(i: usize, ilr: Vec<f64>) -> DevCurve {
        DevCurve {
            id: CurveId::new(format!("C{i}"), 2000),
            premium: 1.0,
            ilr,
            features: CompanyFeatures::new(2000, 1.0),
        }
    }

    #[test]
    fn identical_curves_have_zero_spread() {
        let ilr: Vec<f64> = (0..10).map(|x| 0.1 / (x + 1) as f64).collect();
        let t = summarize(&[curve(0, ilr.clone()), curve(1, ilr.clone())]).unwrap();
        for (s, v) in t.lags.iter().zip(&ilr) {
            assert_eq!(s.sd, 0.0);
            assert_eq!(s.mad, 0.0);
            assert_eq!(s.mean, *v);
            assert_eq!(s.median, *v);
        }
    }

    #[test]
    fn too_few_curves() {
        assert!(matches!(
            summarize(&[curve(0, vec![0.0; 10])]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn scaled_mad_estimates_normal_sd() {
        // sd of the scaled MAD at n = 1000 is about 0.037, so a single draw
        // lands within 5% of 1 only ~82% of the time; check the distribution
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mads: Vec<f64> = (0..200)
            .map(|_| {
                let xs: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
                stats::mad_raw(&xs) * stats::MAD_SCALE
            })
            .collect();
        let within = mads.iter().filter(|m| (*m - 1.0).abs() < 0.05).count();
        assert!(within >= 150, "{within}/200 within 5%");
        assert!((stats::mean(&mads) - 1.0).abs() < 0.01);
    }

    #[test]
    fn sign_counts_partition_and_winsorizing_shrinks_sd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let heavy = StudentT::new(2.0).unwrap();
        let curves: Vec<DevCurve> = (0..400)
            .map(|i| {
                let mut ilr: Vec<f64> = (0..10).map(|_| 0.01 * heavy.sample(&mut rng)).collect();
                if i % 7 == 0 {
                    ilr[9] = 0.0;
                }
                curve(i, ilr)
            })
            .collect();
        let t = summarize(&curves).unwrap();
        for s in &t.lags {
            assert_eq!(s.n_positive + s.n_zero + s.n_negative, s.n);
            assert!(s.winsorized_sd <= s.sd);
            assert!(s.min <= s.median && s.median <= s.max);
        }
        assert!(t.lags[9].n_zero >= 400 / 7);
    }

    #[test]
    fn winsorized_mean_unchanged_without_tail_values() {
        // ties at both ends put the 5%/95% quantiles on the extremes
        let mut xs = vec![0.0; 10];
        xs.extend([0.3, 0.5, 0.2, 0.7]);
        xs.extend(vec![1.0; 10]);
        let w = stats::winsorize(&xs, 0.05);
        assert_eq!(stats::mean(&w), stats::mean(&xs));
    }

    #[test]
    fn csv_has_one_row_per_lag() {
        let curves: Vec<DevCurve> = (0..3).map(|i| curve(i, vec![i as f64; 10])).collect();
        let mut buf = Vec::new();
        summarize(&curves).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("lag,n,mean,sd,median,mad"));
    }
}
