use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{deepest_first, depth_values, DepthMethod, MbdScale};
use crate::error::{Error, Result};
use crate::triangle::{BusinessFocus, CompanyProfile, CurveId, DevCurve, Geography, Ownership};

/// Pointwise band spanned by the deepest curves of a collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// Central region has nominal content `1 - alpha`.
    pub alpha: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Indices of the curves forming the region.
    pub members: Vec<usize>,
}

impl Envelope {
    pub fn contains(&self, curve: &[f64]) -> bool {
        curve.len() == self.lower.len()
            && curve
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }
}

/// Number of curves kept in a `1 - alpha` central region of `m` curves.
pub(crate) fn central_count(m: usize, alpha: f64) -> usize {
    // guard against (1 - alpha) * m landing a hair above an integer
    (((1.0 - alpha) * m as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Pointwise min/max over the `ceil((1 - alpha) M)` deepest curves.
///
/// `ranking` lists curve indices deepest first.
pub fn central_envelope<C: AsRef<[f64]>>(
    curves: &[C],
    ranking: &[usize],
    alpha: f64,
) -> Result<Envelope> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if curves.is_empty() || ranking.len() != curves.len() {
        return Err(Error::Argument(
            "ranking must cover a non-empty curve collection".into(),
        ));
    }
    let keep = central_count(curves.len(), alpha);
    let members: Vec<usize> = ranking[..keep].to_vec();
    let lags = curves[members[0]].as_ref().len();
    let mut lower = vec![f64::INFINITY; lags];
    let mut upper = vec![f64::NEG_INFINITY; lags];
    for &i in &members {
        for (x, &v) in curves[i].as_ref().iter().enumerate() {
            lower[x] = lower[x].min(v);
            upper[x] = upper[x].max(v);
        }
    }
    let mut members = members;
    members.sort_unstable();
    Ok(Envelope {
        alpha,
        lower,
        upper,
        members,
    })
}

/// Categorical covariate used to split curves into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupBy {
    BusinessFocus,
    Ownership,
    Geography,
}

impl FromStr for GroupBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "business_focus" => Ok(Self::BusinessFocus),
            "ownership" => Ok(Self::Ownership),
            "geography" => Ok(Self::Geography),
            _ => Err(Error::Argument(format!("unknown feature selector `{s}`"))),
        }
    }
}

impl GroupBy {
    pub fn levels(self) -> Vec<&'static str> {
        match self {
            Self::BusinessFocus => BusinessFocus::ALL.iter().map(|v| v.as_str()).collect(),
            Self::Ownership => Ownership::ALL.iter().map(|v| v.as_str()).collect(),
            Self::Geography => Geography::ALL.iter().map(|v| v.as_str()).collect(),
        }
    }

    fn level_of(self, p: &CompanyProfile) -> &'static str {
        match self {
            Self::BusinessFocus => p.business_focus.as_str(),
            Self::Ownership => p.ownership.as_str(),
            Self::Geography => p.geography.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroupEnvelope {
    Computed {
        median: CurveId,
        median_curve: Vec<f64>,
        envelope: Envelope,
        size: usize,
    },
    Insufficient {
        size: usize,
    },
}

/// Per-level extremal-depth median and `1 - alpha` envelope.
///
/// Levels with fewer than `min_group_size` curves (including empty ones) are
/// reported as [`GroupEnvelope::Insufficient`].
pub fn stratified_envelopes(
    curves: &[DevCurve],
    group_by: GroupBy,
    alpha: f64,
    min_group_size: usize,
) -> Result<BTreeMap<String, GroupEnvelope>> {
    let mut groups: BTreeMap<&'static str, Vec<&DevCurve>> =
        group_by.levels().into_iter().map(|l| (l, Vec::new())).collect();
    for c in curves {
        let p = c.features.profile.as_ref().ok_or_else(|| {
            Error::Validation(format!("curve {} has no company profile", c.id))
        })?;
        if !c.is_complete() {
            return Err(Error::Validation(format!("curve {} is not complete", c.id)));
        }
        groups.get_mut(group_by.level_of(p)).unwrap().push(c);
    }
    let min = min_group_size.max(2);
    let mut out = BTreeMap::new();
    for (level, members) in groups {
        let entry = if members.len() < min {
            GroupEnvelope::Insufficient {
                size: members.len(),
            }
        } else {
            let values: Vec<&[f64]> = members.iter().map(|c| c.ilr.as_slice()).collect();
            let depth = depth_values(&values, DepthMethod::Exd, MbdScale::Pairwise)?;
            let ranking = deepest_first(&depth);
            let envelope = central_envelope(&values, &ranking, alpha)?;
            GroupEnvelope::Computed {
                median: members[ranking[0]].id.clone(),
                median_curve: members[ranking[0]].ilr.clone(),
                envelope,
                size: members.len(),
            }
        };
        out.insert(level.to_string(), entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triangle::CompanyFeatures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_near_one_keeps_only_the_deepest() {
        let curves: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 4]).collect();
        let ranking = vec![2, 1, 3, 0, 4];
        let e = central_envelope(&curves, &ranking, 0.999).unwrap();
        assert_eq!(e.members, vec![2]);
        assert_eq!(e.lower, curves[2]);
        assert_eq!(e.upper, curves[2]);
    }

    #[test]
    fn half_of_four_curves() {
        let curves = vec![
            vec![0.0, 3.0],
            vec![1.0, 1.0],
            vec![2.0, 0.0],
            vec![3.0, 2.0],
        ];
        // hand ranking: curves 1 and 2 deepest
        let e = central_envelope(&curves, &[1, 2, 0, 3], 0.5).unwrap();
        assert_eq!(e.members, vec![1, 2]);
        assert_eq!(e.lower, vec![1.0, 0.0]);
        assert_eq!(e.upper, vec![2.0, 1.0]);
    }

    #[test]
    fn alpha_bounds_checked() {
        let curves = vec![vec![0.0], vec![1.0]];
        assert!(central_envelope(&curves, &[0, 1], 0.0).is_err());
        assert!(central_envelope(&curves, &[0, 1], 1.0).is_err());
    }

    #[test]
    fn central_count_is_robust_to_rounding() {
        assert_eq!(central_count(20, 0.95), 1);
        assert_eq!(central_count(4, 0.5), 2);
        assert_eq!(central_count(1000, 0.05), 950);
    }

    #[test]
    fn members_inside_and_width_grows_as_alpha_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let curves: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..10).map(|_| rng.random::<f64>()).collect())
            .collect();
        let d = depth_values(&curves, DepthMethod::Exd, MbdScale::Pairwise).unwrap();
        let ranking = deepest_first(&d);
        let mut prev: Option<Vec<f64>> = None;
        for alpha in [0.9, 0.7, 0.5, 0.3, 0.1] {
            let e = central_envelope(&curves, &ranking, alpha).unwrap();
            assert_eq!(e.members.len(), central_count(25, alpha));
            for &i in &e.members {
                assert!(e.contains(&curves[i]));
            }
            let w = e.width();
            if let Some(p) = prev {
                assert!(w.iter().zip(&p).all(|(a, b)| a >= b));
            }
            prev = Some(w);
        }
    }

    fn profiled(i: usize, focus: BusinessFocus, ilr: Vec<f64>) -> DevCurve {
        let mut features = CompanyFeatures::new(2000, 1.0);
        features.profile = Some(CompanyProfile {
            business_focus: focus,
            ownership: Ownership::Stock,
            geography: Geography::West,
        });
        DevCurve {
            id: CurveId::new(format!("C{i}"), 2000),
            premium: 1.0,
            ilr,
            features,
        }
    }

    #[test]
    fn shifted_groups_have_shifted_medians() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base: Vec<Vec<f64>> = (0..41)
            .map(|_| (0..10).map(|_| 0.01 * rng.random::<f64>()).collect())
            .collect();
        let mut curves = Vec::new();
        for (i, b) in base.iter().enumerate() {
            curves.push(profiled(i, BusinessFocus::Personal, b.clone()));
            let shifted = b.iter().map(|v| v + 0.05).collect();
            curves.push(profiled(100 + i, BusinessFocus::WkComp, shifted));
        }
        let g = stratified_envelopes(&curves, GroupBy::BusinessFocus, 0.5, 5).unwrap();
        let median = |k: &str| match &g[k] {
            GroupEnvelope::Computed { median_curve, .. } => median_curve.clone(),
            other => panic!("{other:?}"),
        };
        let (p, w) = (median("personal"), median("wkcomp"));
        for x in 0..10 {
            assert!((w[x] - p[x] - 0.05).abs() < 1e-12);
        }
        assert_eq!(g["commercial"], GroupEnvelope::Insufficient { size: 0 });
    }

    #[test]
    fn single_group_matches_plain_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let curves: Vec<DevCurve> = (0..15)
            .map(|i| {
                profiled(i, BusinessFocus::Commercial, (0..10).map(|_| rng.random()).collect())
            })
            .collect();
        let g = stratified_envelopes(&curves, GroupBy::BusinessFocus, 0.5, 2).unwrap();
        let values: Vec<&[f64]> = curves.iter().map(|c| c.ilr.as_slice()).collect();
        let d = depth_values(&values, DepthMethod::Exd, MbdScale::Pairwise).unwrap();
        let ranking = deepest_first(&d);
        let plain = central_envelope(&values, &ranking, 0.5).unwrap();
        match &g["commercial"] {
            GroupEnvelope::Computed { envelope, median, .. } => {
                assert_eq!(envelope, &plain);
                assert_eq!(median, &curves[ranking[0]].id);
            }
            other => panic!("{other:?}"),
        }
        assert!("premium".parse::<GroupBy>().is_err());
    }
}
