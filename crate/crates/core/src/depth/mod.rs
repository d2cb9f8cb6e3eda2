//! Rank-based functional depth: band depth, modified band depth and extremal
//! depth, plus outlier rules and depth-ordered central envelopes.
//!
//! Every depth here is a function of the marginal rank matrix only, where the
//! rank of curve `i` at lag `x` is one plus the number of curves strictly
//! below it. Ties therefore deflate ranks: a value shared by every curve has
//! rank 1.

mod envelope;

pub use envelope::{
    central_envelope, stratified_envelopes, Envelope, GroupBy, GroupEnvelope,
};

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::triangle::{CurveId, DevCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthMethod {
    Bd,
    Mbd,
    Exd,
}

impl FromStr for DepthMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bd" => Ok(Self::Bd),
            "mbd" => Ok(Self::Mbd),
            "exd" => Ok(Self::Exd),
            _ => Err(Error::Argument(format!("unknown depth method `{s}`"))),
        }
    }
}

impl fmt::Display for DepthMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bd => "bd",
            Self::Mbd => "mbd",
            Self::Exd => "exd",
        })
    }
}

/// Normalization of the modified band depth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MbdScale {
    /// Fraction of (pair, lag) combinations whose band contains the curve;
    /// lies in `[0, 1]`.
    #[default]
    Pairwise,
    /// `sum_x (R-1)(M-R) / (M - L - 1) / (M (M + 1))` with `L` lags. The
    /// divisor is negative for `M <= L`, which reverses the ordering, and
    /// zero at `M = L + 1`.
    Unnormalized,
}

/// Marginal ranks `R(x)` of every curve at every lag.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMatrix {
    m: usize,
    lags: usize,
    ranks: Vec<Vec<u32>>,
}

impl RankMatrix {
    /// Ranks of `curves`, which must all have the same positive length.
    pub fn new<C: AsRef<[f64]>>(curves: &[C]) -> Result<Self> {
        let m = curves.len();
        if m < 2 {
            return Err(Error::InsufficientData(format!(
                "depth needs at least 2 curves, got {m}"
            )));
        }
        let lags = curves[0].as_ref().len();
        if lags == 0 {
            return Err(Error::Argument("curves have no lags".into()));
        }
        for (i, c) in curves.iter().enumerate() {
            let c = c.as_ref();
            if c.len() != lags {
                return Err(Error::Argument(format!(
                    "curve {i} has {} lags, expected {lags}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("curve {i} has non-finite values")));
            }
        }
        let mut ranks = vec![vec![0u32; lags]; m];
        let mut column = vec![0.0; m];
        for x in 0..lags {
            for (slot, c) in column.iter_mut().zip(curves) {
                *slot = c.as_ref()[x];
            }
            let sorted = stats::sorted_copy(&column);
            for (i, &v) in column.iter().enumerate() {
                let below = sorted.partition_point(|&s| s < v);
                ranks[i][x] = below as u32 + 1;
            }
        }
        Ok(RankMatrix { m, lags, ranks })
    }

    pub fn num_curves(&self) -> usize {
        self.m
    }

    pub fn num_lags(&self) -> usize {
        self.lags
    }

    pub fn rank(&self, curve: usize, lag: usize) -> u32 {
        self.ranks[curve][lag]
    }

    pub fn ranks_of(&self, curve: usize) -> &[u32] {
        &self.ranks[curve]
    }

    /// Numerators `M - |2R - M - 1|` of the pointwise extremal depths, so that
    /// `d(x) = numerator / M`.
    fn pointwise_numerators(&self, curve: usize) -> Vec<u32> {
        let m = self.m as i64;
        self.ranks[curve]
            .iter()
            .map(|&r| (m - (2 * r as i64 - m - 1).abs()) as u32)
            .collect()
    }

    /// Pointwise extremal depth `d(x) = 1 - |2R(x) - M - 1| / M`.
    pub fn pointwise_depth(&self, curve: usize) -> Vec<f64> {
        self.pointwise_numerators(curve)
            .into_iter()
            .map(|n| n as f64 / self.m as f64)
            .collect()
    }

    pub fn depth_cdf(&self, curve: usize) -> DepthCdf {
        let mut nums = self.pointwise_numerators(curve);
        nums.sort_unstable();
        DepthCdf { m: self.m, nums }
    }
}

/// Empirical CDF of a curve's pointwise depths across lags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthCdf {
    m: usize,
    nums: Vec<u32>,
}

impl DepthCdf {
    /// `Phi(r)`: fraction of lags with pointwise depth at most `r`.
    pub fn eval(&self, r: f64) -> f64 {
        let count = self
            .nums
            .iter()
            .filter(|&&n| n as f64 / self.m as f64 <= r)
            .count();
        count as f64 / self.nums.len() as f64
    }

    /// Attainable pointwise depth values `1 - |2r - M - 1| / M`, ascending.
    pub fn grid(&self) -> Vec<f64> {
        let m = self.m as i64;
        let mut nums: Vec<i64> = (1..=m).map(|r| m - (2 * r - m - 1).abs()).collect();
        nums.sort_unstable();
        nums.dedup();
        nums.into_iter().map(|n| n as f64 / m as f64).collect()
    }

    /// Left-tail stochastic comparison: `Greater` means `self` is deeper.
    ///
    /// Scanning `r` upward, the first `r` where the CDFs differ decides, and
    /// the one with less mass at or below `r` is deeper. On sorted pointwise
    /// depths this is a lexicographic comparison.
    pub fn compare(&self, other: &DepthCdf) -> Ordering {
        self.nums.cmp(&other.nums)
    }
}

/// Band depth from the minimum and maximum marginal rank:
/// `((min R - 1)(M - max R) + M - 1) / (M (M + 1))`.
pub fn band_depth(ranks: &RankMatrix) -> Vec<f64> {
    let m = ranks.m as f64;
    (0..ranks.m)
        .map(|i| {
            let r = ranks.ranks_of(i);
            let lo = *r.iter().min().unwrap() as f64;
            let hi = *r.iter().max().unwrap() as f64;
            ((lo - 1.0) * (m - hi) + m - 1.0) / (m * (m + 1.0))
        })
        .collect()
}

/// Modified band depth: lag-average of the rank product `(R - 1)(M - R)`.
pub fn modified_band_depth(ranks: &RankMatrix, scale: MbdScale) -> Result<Vec<f64>> {
    let m = ranks.m as f64;
    let lags = ranks.lags as f64;
    let products = (0..ranks.m).map(|i| {
        ranks
            .ranks_of(i)
            .iter()
            .map(|&r| (r as f64 - 1.0) * (m - r as f64))
            .sum::<f64>()
    });
    match scale {
        MbdScale::Pairwise => {
            let pairs = m * (m - 1.0) / 2.0;
            Ok(products
                .map(|p| (p + lags * (m - 1.0)) / (lags * pairs))
                .collect())
        }
        MbdScale::Unnormalized => {
            let divisor = m - lags - 1.0;
            if divisor == 0.0 {
                return Err(Error::Argument(format!(
                    "unnormalized MBD is undefined for M = {} with {} lags",
                    ranks.m, ranks.lags
                )));
            }
            Ok(products.map(|p| p / divisor / (m * (m + 1.0))).collect())
        }
    }
}

/// Extremal depth: the share of curves whose depth CDF this curve dominates
/// in the left-tail stochastic order, itself included.
pub fn extremal_depth(ranks: &RankMatrix) -> Vec<f64> {
    let m = ranks.m;
    let cdfs: Vec<DepthCdf> = (0..m).map(|i| ranks.depth_cdf(i)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| cdfs[a].compare(&cdfs[b]));
    let sorted: Vec<&DepthCdf> = order.iter().map(|&i| &cdfs[i]).collect();
    cdfs.iter()
        .map(|c| {
            let dominated = sorted.partition_point(|s| s.compare(c) != Ordering::Greater);
            dominated as f64 / m as f64
        })
        .collect()
}

/// Depth values of `curves` under `method`.
pub fn depth_values<C: AsRef<[f64]>>(
    curves: &[C],
    method: DepthMethod,
    mbd_scale: MbdScale,
) -> Result<Vec<f64>> {
    let ranks = RankMatrix::new(curves)?;
    match method {
        DepthMethod::Bd => Ok(band_depth(&ranks)),
        DepthMethod::Mbd => modified_band_depth(&ranks, mbd_scale),
        DepthMethod::Exd => Ok(extremal_depth(&ranks)),
    }
}

/// Indices sorted deepest first; equal depths keep input order.
pub fn deepest_first(depth: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..depth.len()).collect();
    idx.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]));
    idx
}

/// Rule for turning depth values into an outlier set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutlierRule {
    /// The `k` shallowest curves.
    Count(usize),
    /// Curves with depth strictly below the threshold.
    Threshold(f64),
    /// Curves below `Q1 - coef * IQR` of the depth values.
    Fence(f64),
}

impl Default for OutlierRule {
    fn default() -> Self {
        OutlierRule::Count(50)
    }
}

impl FromStr for OutlierRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("invalid outlier rule `{s}`"));
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("count", Some(a)) => a.parse().map(Self::Count).map_err(|_| bad()),
            ("threshold", Some(a)) => a.parse().map(Self::Threshold).map_err(|_| bad()),
            ("fence", None) => Ok(Self::Fence(1.5)),
            ("fence", Some(a)) => a.parse().map(Self::Fence).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for OutlierRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(k) => write!(f, "count:{k}"),
            Self::Threshold(v) => write!(f, "threshold:{v}"),
            Self::Fence(c) => write!(f, "fence:{c}"),
        }
    }
}

/// Indices flagged by `rule`, in ascending order.
pub fn flag_outliers(depth: &[f64], rule: OutlierRule) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = match rule {
        OutlierRule::Count(k) => {
            if k > depth.len() {
                return Err(Error::Argument(format!(
                    "asked for {k} outliers among {} curves",
                    depth.len()
                )));
            }
            let ranking = deepest_first(depth);
            ranking[depth.len() - k..].to_vec()
        }
        OutlierRule::Threshold(v) => (0..depth.len()).filter(|&i| depth[i] < v).collect(),
        OutlierRule::Fence(coef) => {
            if depth.is_empty() {
                return Ok(Vec::new());
            }
            let sorted = stats::sorted_copy(depth);
            let q1 = stats::quantile_sorted(&sorted, 0.25);
            let q3 = stats::quantile_sorted(&sorted, 0.75);
            let fence = q1 - coef * (q3 - q1);
            (0..depth.len()).filter(|&i| depth[i] < fence).collect()
        }
    };
    out.sort_unstable();
    Ok(out)
}

/// Depth ranking of a collection of complete development curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub method: DepthMethod,
    pub ids: Vec<CurveId>,
    pub depth: Vec<f64>,
    /// Curve indices, deepest first.
    pub ranking: Vec<usize>,
    /// Index of the deepest curve (first in `ranking`).
    pub median: usize,
    /// Indices of flagged curves; empty until [`DepthReport::flag`] runs.
    pub outliers: Vec<usize>,
}

impl DepthReport {
    pub fn compute(curves: &[DevCurve], method: DepthMethod, mbd_scale: MbdScale) -> Result<Self> {
        if let Some(c) = curves.iter().find(|c| !c.is_complete()) {
            return Err(Error::Validation(format!(
                "depth requires complete curves; {} is observed through lag {}",
                c.id,
                c.observed_through()
            )));
        }
        let values: Vec<&[f64]> = curves.iter().map(|c| c.ilr.as_slice()).collect();
        let depth = depth_values(&values, method, mbd_scale)?;
        let ranking = deepest_first(&depth);
        Ok(DepthReport {
            method,
            ids: curves.iter().map(|c| c.id.clone()).collect(),
            median: ranking[0],
            depth,
            ranking,
            outliers: Vec::new(),
        })
    }

    pub fn flag(&mut self, rule: OutlierRule) -> Result<&[usize]> {
        self.outliers = flag_outliers(&self.depth, rule)?;
        Ok(&self.outliers)
    }

    pub fn median_id(&self) -> &CurveId {
        &self.ids[self.median]
    }

    pub fn depth_of(&self, id: &CurveId) -> Option<f64> {
        self.ids.iter().position(|i| i == id).map(|i| self.depth[i])
    }

    /// Position of each curve in the ranking, 1 = deepest.
    pub fn rank_positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.depth.len()];
        for (p, &i) in self.ranking.iter().enumerate() {
            pos[i] = p + 1;
        }
        pos
    }

    /// `curve_id,depth,rank,outlier`
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let pos = self.rank_positions();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["curve_id", "depth", "rank", "outlier"])?;
        for (i, id) in self.ids.iter().enumerate() {
            let flagged = self.outliers.binary_search(&i).is_ok();
            w.write_record([
                id.to_string(),
                self.depth[i].to_string(),
                pos[i].to_string(),
                flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
