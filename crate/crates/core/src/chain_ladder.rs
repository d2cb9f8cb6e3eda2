//! Mack chain-ladder benchmark on one company's cumulative triangle.

use std::io::Write;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::triangle::LossTriangle;

/// How a forecast and its Mack standard error become an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    /// `C +- z se`.
    #[default]
    Normal,
    /// Lognormal with matching mean and variance.
    LogNormal,
}

impl FromStr for IntervalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(IntervalKind::Normal),
            "lognormal" | "log_normal" => Ok(IntervalKind::LogNormal),
            _ => Err(Error::Argument(format!("unknown interval kind {s:?}"))),
        }
    }
}

/// Two-sided standard-normal quantile for content `1 - alpha`.
pub fn normal_z(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Forecast and Mack standard error of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClCell {
    pub value: f64,
    pub se: f64,
    pub observed: bool,
}

impl ClCell {
    pub fn interval(&self, kind: IntervalKind, alpha: f64) -> (f64, f64) {
        let z = normal_z(alpha);
        if self.se == 0.0 {
            return (self.value, self.value);
        }
        match kind {
            IntervalKind::Normal => (self.value - z * self.se, self.value + z * self.se),
            IntervalKind::LogNormal => {
                if self.value <= 0.0 {
                    return (self.value - z * self.se, self.value + z * self.se);
                }
                let s2 = (1.0 + (self.se / self.value).powi(2)).ln();
                let m = self.value.ln() - s2 / 2.0;
                ((m - z * s2.sqrt()).exp(), (m + z * s2.sqrt()).exp())
            }
        }
    }
}

/// Development factors, variance parameters and completed rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClFit {
    /// `f_j = sum C(j+1) / sum C(j)` over rows observing both columns.
    pub factors: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `sigma2[j]` came from the extrapolation rule rather than data.
    pub sigma2_extrapolated: Vec<bool>,
    /// `sum C(j)` over the rows used for `f_j`.
    pub column_sums: Vec<f64>,
    /// Every row completed to the last column.
    pub rows: Vec<Vec<ClCell>>,
}

/// Fit Mack's model to cumulative rows (observed prefixes, oldest first).
///
/// Column count is the longest row. A variance parameter estimated from a
/// single row pair is replaced by `min(s_{j-1}^4 / s_{j-2}^2, s_{j-2}^2,
/// s_{j-1}^2)` (or `s_0^2` at `j = 1`) and flagged.
pub fn fit_cl(rows: &[Vec<f64>]) -> Result<ClFit> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.iter().any(|r| r.is_empty()) || cols < 2 {
        return Err(Error::InsufficientData(
            "chain ladder needs at least two development columns".into(),
        ));
    }
    let mut factors = Vec::with_capacity(cols - 1);
    let mut column_sums = Vec::with_capacity(cols - 1);
    let mut pairs = Vec::with_capacity(cols - 1);
    for j in 0..cols - 1 {
        let used: Vec<&Vec<f64>> = rows.iter().filter(|r| r.len() > j + 1).collect();
        if used.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no accident year observes both columns {j} and {}",
                j + 1
            )));
        }
        let below: f64 = used.iter().map(|r| r[j]).sum();
        let above: f64 = used.iter().map(|r| r[j + 1]).sum();
        if !(below > 0.0) {
            return Err(Error::Numerical(format!(
                "column {j} sums to {below}; development factor undefined"
            )));
        }
        let f = above / below;
        if f == 0.0 {
            return Err(Error::Numerical(format!("development factor {j} is zero")));
        }
        factors.push(f);
        column_sums.push(below);
        pairs.push(used);
    }

    let mut sigma2 = vec![0.0; cols - 1];
    let mut extrapolated = vec![false; cols - 1];
    for j in 0..cols - 1 {
        let used = &pairs[j];
        if used.len() >= 2 {
            let mut acc = 0.0;
            for r in used {
                if r[j] > 0.0 {
                    acc += (r[j + 1] - factors[j] * r[j]).powi(2) / r[j];
                } else {
                    warn!("nonpositive cell in column {j} skipped in the variance estimate");
                }
            }
            sigma2[j] = acc / (used.len() - 1) as f64;
        } else {
            extrapolated[j] = true;
            sigma2[j] = match j {
                0 => {
                    return Err(Error::InsufficientData(
                        "first development period observed by a single accident year".into(),
                    ))
                }
                1 => sigma2[0],
                _ => {
                    let (a, b) = (sigma2[j - 2], sigma2[j - 1]);
                    if a == 0.0 {
                        0.0
                    } else {
                        (b * b / a).min(a).min(b)
                    }
                }
            };
        }
    }

    let mut out_rows = Vec::with_capacity(rows.len());
    for r in rows {
        let last = r.len() - 1;
        let mut cells: Vec<ClCell> = r
            .iter()
            .map(|&v| ClCell {
                value: v,
                se: 0.0,
                observed: true,
            })
            .collect();
        let mut value = r[last];
        // running sum of (sigma2_k / f_k^2)(1/C_k + 1/S_k)
        let mut acc = 0.0;
        for k in last..cols - 1 {
            let ck = value;
            acc += sigma2[k] / factors[k].powi(2) * (1.0 / ck + 1.0 / column_sums[k]);
            value = factors[k] * ck;
            let mse = value * value * acc;
            cells.push(ClCell {
                value,
                se: if mse.is_finite() && mse > 0.0 { mse.sqrt() } else { 0.0 },
                observed: false,
            });
        }
        out_rows.push(cells);
    }
    Ok(ClFit {
        factors,
        sigma2,
        sigma2_extrapolated: extrapolated,
        column_sums,
        rows: out_rows,
    })
}

/// Chain-ladder forecast of one company triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClForecast {
    pub company_id: String,
    pub accident_years: Vec<i32>,
    pub premiums: Vec<f64>,
    pub fit: ClFit,
}

/// One forecast lag on the loss-ratio scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClrForecast {
    pub accident_year: i32,
    pub lags: Vec<usize>,
    pub clr: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ClForecast {
    pub fn fit(t: &LossTriangle) -> Result<Self> {
        let rows: Vec<Vec<f64>> = t
            .accident_years
            .iter()
            .map(|y| t.cumulative[y].clone())
            .collect();
        let fit = fit_cl(&rows).map_err(|e| match e {
            Error::InsufficientData(m) => Error::InsufficientData(format!("{}: {m}", t.company_id)),
            Error::Numerical(m) => Error::Numerical(format!("{}: {m}", t.company_id)),
            other => other,
        })?;
        if fit.sigma2_extrapolated.iter().any(|&b| b) {
            warn!("{}: last variance parameter extrapolated", t.company_id);
        }
        Ok(ClForecast {
            company_id: t.company_id.clone(),
            accident_years: t.accident_years.clone(),
            premiums: t.accident_years.iter().map(|y| t.premiums[y]).collect(),
            fit,
        })
    }

    pub fn row(&self, accident_year: i32) -> Option<&[ClCell]> {
        let i = self.accident_years.iter().position(|&y| y == accident_year)?;
        Some(&self.fit.rows[i])
    }

    /// Forecast CLR and intervals over the unobserved lags of every year.
    pub fn clr_curves(&self, kind: IntervalKind, alpha: f64) -> Vec<ClrForecast> {
        self.accident_years
            .iter()
            .zip(&self.fit.rows)
            .zip(&self.premiums)
            .map(|((&year, cells), &p)| {
                let mut f = ClrForecast {
                    accident_year: year,
                    lags: Vec::new(),
                    clr: Vec::new(),
                    lower: Vec::new(),
                    upper: Vec::new(),
                };
                for (lag, c) in cells.iter().enumerate().filter(|(_, c)| !c.observed) {
                    let (lo, hi) = c.interval(kind, alpha);
                    f.lags.push(lag);
                    f.clr.push(c.value / p);
                    f.lower.push(lo / p);
                    f.upper.push(hi / p);
                }
                f
            })
            .collect()
    }
}

pub const CL_HEADER: [&str; 7] = [
    "company_id",
    "accident_year",
    "lag",
    "forecast_cumulative",
    "se",
    "lower95",
    "upper95",
];

/// Forecast cells of every triangle with 95% intervals of `kind`.
pub fn write_cl_csv<W: Write>(out: W, forecasts: &[ClForecast], kind: IntervalKind) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CL_HEADER)?;
    for f in forecasts {
        for (&year, cells) in f.accident_years.iter().zip(&f.fit.rows) {
            for (lag, c) in cells.iter().enumerate().filter(|(_, c)| !c.observed) {
                let (lo, hi) = c.interval(kind, 0.05);
                w.write_record([
                    f.company_id.clone(),
                    year.to_string(),
                    lag.to_string(),
                    c.value.to_string(),
                    c.se.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vec<Vec<f64>> {
        vec![vec![100.0, 200.0, 220.0], vec![110.0, 230.0], vec![120.0]]
    }

    #[test]
    fn three_by_three_example() {
        let fit = fit_cl(&small()).unwrap();
        assert_eq!(fit.factors[0], 430.0 / 210.0);
        assert_eq!(fit.factors[1], 1.1);
        assert_eq!(fit.rows[2][2].value, 120.0 * (430.0 / 210.0) * 1.1);
        assert_eq!(fit.rows[0][2], ClCell { value: 220.0, se: 0.0, observed: true });
        // sigma2_1 from one row pair falls back to sigma2_0
        assert!(fit.sigma2_extrapolated[1] && !fit.sigma2_extrapolated[0]);
        assert_eq!(fit.sigma2[1], fit.sigma2[0]);
    }

    #[test]
    fn multiplicative_triangle_has_zero_error() {
        let dev = [1.0, 1.8, 2.1, 2.2, 2.25];
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let base = 100.0 + 37.0 * i as f64;
                dev[..5 - i].iter().map(|d| base * d).collect()
            })
            .collect();
        let fit = fit_cl(&rows).unwrap();
        assert!(fit.sigma2.iter().all(|s| s.abs() < 1e-20));
        for (i, r) in fit.rows.iter().enumerate() {
            let base = 100.0 + 37.0 * i as f64;
            for (x, c) in r.iter().enumerate() {
                assert!((c.value - base * dev[x]).abs() < 1e-9);
                assert!(c.se < 1e-8);
            }
        }
    }

    #[test]
    fn factors_are_scale_invariant_and_clr_ratio_invariant() {
        let t = LossTriangle::new(
            "c",
            vec![
                (2000, 500.0, vec![100.0, 180.0, 210.0]),
                (2001, 520.0, vec![90.0, 170.0]),
                (2002, 540.0, vec![120.0]),
            ],
        )
        .unwrap();
        let scaled = LossTriangle::new(
            "c",
            t.accident_years.iter().map(|y| {
                (*y, t.premiums[y] * 7.0, t.cumulative[y].iter().map(|v| v * 7.0).collect())
            }),
        )
        .unwrap();
        let a = ClForecast::fit(&t).unwrap();
        let b = ClForecast::fit(&scaled).unwrap();
        for (fa, fb) in a.fit.factors.iter().zip(&b.fit.factors) {
            assert!((fa - fb).abs() < 1e-14);
        }
        let ca = a.clr_curves(IntervalKind::Normal, 0.05);
        let cb = b.clr_curves(IntervalKind::Normal, 0.05);
        for (x, y) in ca.iter().zip(&cb) {
            for (u, v) in x.clr.iter().zip(&y.clr) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(ca[0].lags.is_empty());
        assert_eq!(ca[2].lags, vec![1, 2]);
    }

    #[test]
    fn factors_above_one_give_increasing_forecasts() {
        let fit = fit_cl(&small()).unwrap();
        for r in &fit.rows {
            assert!(r.windows(2).all(|w| w[0].value <= w[1].value));
        }
    }

    #[test]
    fn standard_error_grows_along_the_row() {
        let rows = vec![
            vec![100.0, 190.0, 215.0, 220.0],
            vec![105.0, 210.0, 230.0, 236.0],
            vec![98.0, 200.0, 228.0],
            vec![115.0, 220.0],
            vec![120.0],
        ];
        let fit = fit_cl(&rows).unwrap();
        let last = &fit.rows[4];
        assert!(last.windows(2).skip(1).all(|w| w[0].se <= w[1].se));
        assert!(last[3].se > 0.0);
        let (lo, hi) = last[3].interval(IntervalKind::Normal, 0.05);
        assert!((hi - lo - 2.0 * 1.959963984540054 * last[3].se).abs() < 1e-9);
        let (llo, lhi) = last[3].interval(IntervalKind::LogNormal, 0.05);
        assert!(llo > 0.0 && llo < last[3].value && lhi > last[3].value);
    }

    #[test]
    fn errors() {
        assert!(fit_cl(&[vec![1.0], vec![2.0]]).is_err());
        assert!(matches!(
            fit_cl(&[vec![0.0, 1.0], vec![0.0, 2.0]]),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            fit_cl(&[vec![1.0, 2.0], vec![1.0]]),
            Err(Error::InsufficientData(_))
        ));
        assert!("lognormal".parse::<IntervalKind>().is_ok());
        assert!("t".parse::<IntervalKind>().is_err());
    }
}
