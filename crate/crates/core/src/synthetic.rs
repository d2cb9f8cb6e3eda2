//! Synthetic multi-company triangles with known ground truth.
//!
//! Each curve is `mu + sum_k phi_k (f_k(x) + xi_k) + eps`, where `f_k` is a
//! linear effect of the centered encoded covariates, `xi_k` is a score draw
//! with variance `eigenvalues[k]`, and `eps` is a per-lag residual.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};
use crate::stats;
use crate::triangle::{
    to_clr, BusinessFocus, CompanyFeatures, CompanyProfile, CurveId, DevCurve, FeatureEncoding, Geography,
    LossTriangle, Ownership, NUM_LAGS,
};

/// Shape of the score and residual draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// Student t with 4 degrees of freedom, rescaled to unit variance.
    StudentT4,
}

/// Company-level lognormal premium with a common yearly drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiumLaw {
    pub log_mean: f64,
    pub log_sd: f64,
    /// Log growth per accident year.
    pub growth: f64,
    /// Sd of the year-to-year log premium jitter within a company.
    pub jitter: f64,
}

impl Default for PremiumLaw {
    fn default() -> Self {
        PremiumLaw {
            log_mean: (50_000.0f64).ln(),
            log_sd: 1.5,
            growth: 0.03,
            jitter: 0.1,
        }
    }
}

/// Curves shifted by `shift_mads` per-lag MADs at `lags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierInjection {
    pub count: usize,
    pub shift_mads: f64,
    pub lags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub companies: usize,
    pub first_year: i32,
    /// Last accident year, also the calendar year the triangles are cut at.
    pub last_year: i32,
    pub mean: Vec<f64>,
    /// `K_true` orthonormal curves of length 10.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Variances of the score draws, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Draw company profiles and let them enter the covariate effects.
    pub profiles: bool,
    /// One coefficient row per factor over the encoded covariates; empty means none.
    #[serde(default)]
    pub effects: Vec<Vec<f64>>,
    pub residual_sd: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseLaw,
    #[serde(default)]
    pub premium: PremiumLaw,
    #[serde(default)]
    pub outliers: Option<OutlierInjection>,
    /// Replace the sample scores by an exactly uncorrelated set with sample
    /// variances equal to `eigenvalues`.
    #[serde(default)]
    pub orthogonal_scores: bool,
    pub seed: u64,
}

const WC_MEAN: [f64; NUM_LAGS] = [
    0.1669, 0.1900, 0.1003, 0.0581, 0.0344, 0.0219, 0.0145, 0.0109, 0.0078, 0.0062,
];
const WC_SD: [f64; NUM_LAGS] = [
    0.0479, 0.0532, 0.0354, 0.0253, 0.0182, 0.0135, 0.0105, 0.0084, 0.0067, 0.0055,
];
const WC_LOADINGS: [[f64; NUM_LAGS]; 8] = [
    [-0.3790, -0.7542, -0.4389, -0.2515, -0.1282, -0.0959, -0.0579, -0.0366, -0.0267, -0.0257],
    [-0.8715, 0.1102, 0.3064, 0.2873, 0.1737, 0.1210, 0.0599, 0.0416, 0.0382, 0.0210],
    [0.3061, -0.6380, 0.4560, 0.4049, 0.2772, 0.1688, 0.1169, 0.0737, 0.0490, 0.0257],
    [0.0535, 0.1067, -0.7059, 0.4696, 0.3902, 0.2208, 0.1867, 0.1310, 0.1061, 0.0514],
    [-0.0082, 0.0217, 0.0728, -0.6584, 0.7049, 0.1469, 0.1536, 0.0779, 0.0766, 0.0816],
    [0.0027, 0.0085, -0.0167, 0.1855, 0.4653, -0.7146, -0.3575, -0.2096, -0.1991, -0.1634],
    [0.0160, -0.0007, -0.0358, 0.0015, 0.1024, 0.5825, -0.7338, -0.2648, -0.1827, -0.0824],
    [0.0016, -0.0039, 0.0176, -0.0144, -0.0194, -0.1233, -0.4816, 0.7963, 0.3293, 0.0966],
];

impl SynthSpec {
    /// Workers' compensation look-alike: industry lag means and sds, eight
    /// industry loading shapes (orthonormalized), geometric eigenvalue decay,
    /// residuals at 30% of the per-lag sd, and profile effects on the first
    /// two factors.
    pub fn workers_comp(companies: usize, seed: u64) -> Self {
        let eigenfunctions = gram_schmidt(&WC_LOADINGS.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let eigenvalues = (0..8).map(|k| 0.0031 * 0.5f64.powi(k)).collect();
        let enc = FeatureEncoding::new(1987, true);
        let mut effects = vec![vec![0.0; enc.dim()]; 8];
        let set = |row: &mut Vec<f64>, name: &str, v: f64| {
            let j = enc.names().iter().position(|n| *n == name).expect("known covariate");
            row[j] = v;
        };
        // factor 1 carries the overall level, factor 2 the speed of payment
        set(&mut effects[0], "personal", 0.03);
        set(&mut effects[0], "wkcomp", -0.05);
        set(&mut effects[0], "mutual", 0.01);
        set(&mut effects[0], "log_prem", -0.01);
        set(&mut effects[0], "time", 0.001);
        set(&mut effects[1], "wkcomp", 0.02);
        set(&mut effects[1], "south", -0.01);
        set(&mut effects[1], "west", 0.01);
        SynthSpec {
            companies,
            first_year: 1987,
            last_year: 2010,
            mean: WC_MEAN.to_vec(),
            eigenfunctions,
            eigenvalues,
            profiles: true,
            effects,
            residual_sd: WC_SD.iter().map(|s| 0.3 * s).collect(),
            noise: NoiseLaw::Gaussian,
            premium: PremiumLaw::default(),
            outliers: None,
            orthogonal_scores: false,
            seed,
        }
    }

    /// Gaussian model with no covariates and the given structure.
    pub fn plain(
        companies: usize,
        years: (i32, i32),
        mean: Vec<f64>,
        eigenfunctions: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        residual_sd: Vec<f64>,
        seed: u64,
    ) -> Self {
        SynthSpec {
            companies,
            first_year: years.0,
            last_year: years.1,
            mean,
            eigenfunctions,
            eigenvalues,
            profiles: false,
            effects: Vec::new(),
            residual_sd,
            noise: NoiseLaw::Gaussian,
            premium: PremiumLaw::default(),
            outliers: None,
            orthogonal_scores: false,
            seed,
        }
    }

    pub fn k_true(&self) -> usize {
        self.eigenfunctions.len()
    }

    pub fn encoding(&self) -> FeatureEncoding {
        FeatureEncoding::new(self.first_year, self.profiles)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k_true();
        if k > NUM_LAGS {
            return Err(Error::Argument(format!("K_true = {k} exceeds {NUM_LAGS} lags")));
        }
        if self.companies == 0 || self.first_year > self.last_year {
            return Err(Error::Argument("need at least one company and one accident year".into()));
        }
        if self.mean.len() != NUM_LAGS || self.residual_sd.len() != NUM_LAGS {
            return Err(Error::Argument(format!("mean and residual sd need {NUM_LAGS} lags")));
        }
        if self.residual_sd.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Argument("residual sd must be nonnegative".into()));
        }
        if self.eigenvalues.len() != k {
            return Err(Error::Argument(format!("{k} eigenfunctions but {} eigenvalues", self.eigenvalues.len())));
        }
        if self.eigenvalues.iter().any(|v| !(*v >= 0.0)) || self.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Argument("eigenvalues must be nonnegative and nonincreasing".into()));
        }
        for (a, fa) in self.eigenfunctions.iter().enumerate() {
            if fa.len() != NUM_LAGS {
                return Err(Error::Argument(format!("eigenfunction {a} needs {NUM_LAGS} lags")));
            }
            for (b, fb) in self.eigenfunctions.iter().enumerate().skip(a) {
                let dot: f64 = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(Error::Argument(format!("eigenfunctions {a} and {b} are not orthonormal")));
                }
            }
        }
        let dim = self.encoding().dim();
        if !self.effects.is_empty() && (self.effects.len() != k || self.effects.iter().any(|r| r.len() != dim)) {
            return Err(Error::Argument(format!("effects need {k} rows of {dim} coefficients")));
        }
        if self.orthogonal_scores && self.num_curves() <= k {
            return Err(Error::Argument("orthogonal scores need more curves than factors".into()));
        }
        if let Some(o) = &self.outliers {
            if o.count > self.num_curves() || o.lags.iter().any(|&l| l >= NUM_LAGS) {
                return Err(Error::Argument("outlier injection out of range".into()));
            }
        }
        Ok(())
    }

    pub fn num_curves(&self) -> usize {
        self.companies * (self.last_year - self.first_year + 1) as usize
    }
}

/// Generated data set with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Triangles as seen at the end of calendar year `last_year`.
    pub triangles: Vec<LossTriangle>,
    /// The same triangles with every accident year developed through lag 9.
    pub truth: Vec<LossTriangle>,
    /// Complete ILR curves, company-major then by accident year.
    pub curves: Vec<DevCurve>,
    /// True scores `f_k(x) + xi_k` per curve.
    pub scores: Vec<Vec<f64>>,
    pub profiles: BTreeMap<String, CompanyProfile>,
    /// Curves carrying an injected shift.
    pub outliers: Vec<CurveId>,
}

fn gram_schmidt(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for r in rows {
        let mut v = r.clone();
        for q in &out {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        out.push(v);
    }
    out
}

fn draw<R: Rng>(rng: &mut R, law: NoiseLaw) -> f64 {
    match law {
        NoiseLaw::Gaussian => Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
        // var(t_4) = 2
        NoiseLaw::StudentT4 => StudentT::new(4.0).expect("t4").sample(rng) / 2f64.sqrt(),
    }
}

fn company_id(i: usize, n: usize) -> String {
    let width = n.to_string().len().max(3);
    format!("S{:0width$}", i + 1)
}

/// Draw a data set. Each company uses its own derived random stream.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let k = spec.k_true();
    let years: Vec<i32> = (spec.first_year..=spec.last_year).collect();
    let enc = spec.encoding();

    let mut profiles = BTreeMap::new();
    let mut ids = Vec::new();
    let mut premiums = Vec::new();
    let mut xi = Vec::new();
    let mut eps = Vec::new();
    for c in 0..spec.companies {
        let id = company_id(c, spec.companies);
        let mut rng = rng_for(spec.seed, &[stream::SYNTHETIC, c as u64]);
        let profile = CompanyProfile {
            business_focus: *BusinessFocus::ALL.choose(&mut rng).expect("levels"),
            ownership: *Ownership::ALL.choose(&mut rng).expect("levels"),
            geography: *Geography::ALL.choose(&mut rng).expect("levels"),
        };
        if spec.profiles {
            profiles.insert(id.clone(), profile);
        }
        let base = spec.premium.log_mean + spec.premium.log_sd * draw(&mut rng, NoiseLaw::Gaussian);
        for (i, _) in years.iter().enumerate() {
            let lp = base + spec.premium.growth * i as f64 + spec.premium.jitter * draw(&mut rng, NoiseLaw::Gaussian);
            premiums.push(lp.exp());
            ids.push((id.clone(), spec.profiles.then_some(profile)));
            xi.push((0..k).map(|j| spec.eigenvalues[j].sqrt() * draw(&mut rng, spec.noise)).collect::<Vec<_>>());
            eps.push((0..NUM_LAGS).map(|x| spec.residual_sd[x] * draw(&mut rng, spec.noise)).collect::<Vec<_>>());
        }
    }

    let n = ids.len();
    let features: Vec<CompanyFeatures> = (0..n)
        .map(|i| CompanyFeatures {
            profile: ids[i].1,
            accident_year: years[i % years.len()],
            log_premium: premiums[i].ln(),
        })
        .collect();
    let mut scores = xi;
    if !spec.effects.is_empty() {
        let x: Vec<Vec<f64>> = features.iter().map(|f| enc.encode(f)).collect::<Result<_>>()?;
        let center: Vec<f64> = (0..enc.dim()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        for (row, xr) in scores.iter_mut().zip(&x) {
            for (kk, b) in spec.effects.iter().enumerate() {
                row[kk] += b.iter().zip(xr).zip(&center).map(|((b, v), m)| b * (v - m)).sum::<f64>();
            }
        }
    }
    if spec.orthogonal_scores && k > 0 {
        scores = orthogonalize(&scores, &spec.eigenvalues);
    }

    let mut ilr: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..NUM_LAGS)
                .map(|x| {
                    spec.mean[x]
                        + (0..k).map(|j| spec.eigenfunctions[j][x] * scores[i][j]).sum::<f64>()
                        + eps[i][x]
                })
                .collect()
        })
        .collect();

    let mut outliers = Vec::new();
    if let Some(o) = &spec.outliers {
        let mads: Vec<f64> = (0..NUM_LAGS)
            .map(|x| stats::mad_raw(&ilr.iter().map(|c| c[x]).collect::<Vec<_>>()))
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(spec.seed, &[stream::SYNTHETIC, u64::MAX]));
        let mut chosen = order[..o.count].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            for &x in &o.lags {
                ilr[i][x] += o.shift_mads * mads[x];
            }
            outliers.push(CurveId::new(ids[i].0.clone(), features[i].accident_year));
        }
    }

    let curves: Vec<DevCurve> = (0..n)
        .map(|i| DevCurve {
            id: CurveId::new(ids[i].0.clone(), features[i].accident_year),
            premium: premiums[i],
            ilr: ilr[i].clone(),
            features: features[i].clone(),
        })
        .collect();

    let mut truth = Vec::with_capacity(spec.companies);
    for chunk in curves.chunks(years.len()) {
        let rows = chunk.iter().map(|c| {
            let cum = to_clr(&c.ilr).iter().map(|v| v * c.premium).collect();
            (c.id.accident_year, c.premium, cum)
        });
        truth.push(LossTriangle::new(chunk[0].id.company_id.clone(), rows)?);
    }
    let triangles = truth.iter().map(|t| t.masked(spec.last_year)).collect();

    Ok(SynthDataset {
        triangles,
        truth,
        curves,
        scores,
        profiles,
        outliers,
    })
}

/// Centered, mutually orthogonal score columns with sample variance `target`.
fn orthogonalize(scores: &[Vec<f64>], target: &[f64]) -> Vec<Vec<f64>> {
    let n = scores.len();
    let k = target.len();
    let mut m = DMatrix::from_fn(n, k, |i, j| scores[i][j]);
    for j in 0..k {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let q = m.qr().q();
    let scale = ((n - 1) as f64).sqrt();
    (0..n)
        .map(|i| (0..k).map(|j| q[(i, j)] * scale * target[j].sqrt()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpca::fit_fpca;

    fn unit(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; NUM_LAGS];
        v[i] = 1.0;
        v
    }

    fn two_factor(n: usize, sd: f64, seed: u64) -> SynthSpec {
        let a: Vec<f64> = (0..NUM_LAGS).map(|x| (x as f64 * 0.4).sin()).collect();
        let b: Vec<f64> = (0..NUM_LAGS).map(|x| 1.0 / (1.0 + x as f64)).collect();
        SynthSpec::plain(
            n,
            (2001, 2010),
            WC_MEAN.to_vec(),
            gram_schmidt(&[a, b]),
            vec![0.004, 0.001],
            vec![sd; NUM_LAGS],
            seed,
        )
    }

    #[test]
    fn degenerate_spec_gives_the_mean() {
        let spec = SynthSpec::plain(3, (2008, 2010), WC_MEAN.to_vec(), vec![unit(0)], vec![0.0], vec![0.0; NUM_LAGS], 5);
        let d = generate(&spec).unwrap();
        assert_eq!(d.curves.len(), 9);
        for c in &d.curves {
            for (a, b) in c.ilr.iter().zip(&WC_MEAN) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_factor_model_is_recovered() {
        let mut spec = two_factor(40, 0.0, 1);
        let fit = fit_fpca(&generate(&spec).unwrap().curves.iter().map(|c| c.ilr.clone()).collect::<Vec<_>>(), 2).unwrap();
        let ev = fit.eigenvalues[..2].iter().sum::<f64>() / fit.total_variance;
        assert!(ev > 0.999_999, "{ev}");

        spec.orthogonal_scores = true;
        let d = generate(&spec).unwrap();
        let fit = fit_fpca(&d.curves.iter().map(|c| c.ilr.clone()).collect::<Vec<_>>(), 2).unwrap();
        for (k, truth) in spec.eigenfunctions.iter().enumerate() {
            let dev = |sign: f64| {
                truth.iter().zip(&fit.eigenfunctions[k]).map(|(a, b)| (sign * a - b).abs()).fold(0.0, f64::max)
            };
            assert!(dev(1.0).min(dev(-1.0)) < 1e-10);
            assert!((fit.eigenvalues[k] - spec.eigenvalues[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = SynthSpec::workers_comp(12, 9);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().curves, generate(&other).unwrap().curves);
    }

    #[test]
    fn masking_follows_the_calendar_diagonal() {
        let spec = SynthSpec::workers_comp(5, 3);
        let d = generate(&spec).unwrap();
        for (t, full) in d.triangles.iter().zip(&d.truth) {
            assert!(t.diagonal_violations(spec.last_year).is_empty());
            for &y in &t.accident_years {
                let lags = t.cumulative[&y].len();
                assert_eq!(lags, ((spec.last_year - y + 1) as usize).min(NUM_LAGS));
                assert_eq!(t.cumulative[&y][..], full.cumulative[&y][..lags]);
            }
        }
    }

    #[test]
    fn sample_mean_converges() {
        let sd = 0.02;
        let spec = SynthSpec { companies: 10_000, ..two_factor(1, sd, 4) };
        let d = generate(&spec).unwrap();
        let n = d.curves.len() as f64;
        for x in 0..NUM_LAGS {
            let var: f64 = spec.eigenfunctions.iter().zip(&spec.eigenvalues).map(|(f, l)| f[x] * f[x] * l).sum::<f64>() + sd * sd;
            let m = d.curves.iter().map(|c| c.ilr[x]).sum::<f64>() / n;
            assert!((m - spec.mean[x]).abs() < 3.0 * var.sqrt() / n.sqrt(), "lag {x}");
        }
    }

    #[test]
    fn outliers_are_shifted_and_reported() {
        let mut spec = two_factor(20, 0.005, 2);
        let clean = generate(&spec).unwrap();
        spec.outliers = Some(OutlierInjection { count: 3, shift_mads: 8.0, lags: vec![2, 3] });
        let d = generate(&spec).unwrap();
        assert_eq!(d.outliers.len(), 3);
        for (a, b) in clean.curves.iter().zip(&d.curves) {
            let hit = d.outliers.contains(&a.id);
            assert_eq!(a.ilr[0], b.ilr[0]);
            assert_eq!(hit, b.ilr[2] > a.ilr[2]);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = two_factor(5, 0.0, 1);
        spec.eigenvalues.reverse();
        assert!(generate(&spec).is_err());
        let mut spec = two_factor(5, 0.0, 1);
        spec.eigenfunctions = (0..11).map(|_| vec![0.0; NUM_LAGS]).collect();
        assert!(generate(&spec).is_err());
        let mut spec = two_factor(5, 0.0, 1);
        spec.eigenfunctions[1] = spec.eigenfunctions[0].clone();
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn workers_comp_spec_is_valid() {
        let spec = SynthSpec::workers_comp(4, 1);
        spec.validate().unwrap();
        let d = generate(&spec).unwrap();
        assert_eq!(d.profiles.len(), 4);
        assert!(d.curves.iter().all(|c| c.features.profile.is_some()));
    }
}
