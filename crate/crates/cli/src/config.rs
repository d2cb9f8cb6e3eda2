//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use funcreserve::chain_ladder::IntervalKind;
use funcreserve::depth::{DepthMethod, MbdScale, OutlierRule};
use funcreserve::scoring::{PitPooling, KS_CONSTANT};
use funcreserve::synthetic::{NoiseLaw, OutlierInjection, SynthSpec};
use funcreserve::triangle::SelectionFilters;
use funcreserve::workflow::{OutlierSettings, PipelineSettings};
use funcreserve::{Error, Result};

/// Overrides `output` when set.
pub const OUTPUT_ENV: &str = "FUNCRESERVE_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub triangles: Option<PathBuf>,
    #[serde(default)]
    pub features: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default)]
    pub filters: SelectionFilters,
    /// Calendar year the triangles are cut at; the latest accident year when absent.
    #[serde(default)]
    pub current_year: Option<i32>,
    /// Depth-based removal of training curves before fitting.
    #[serde(default)]
    pub outliers: Option<OutlierConfig>,
    #[serde(flatten)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub envelopes: EnvelopeConfig,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub forecast: Option<ForecastConfig>,
    #[serde(default)]
    pub backtest: Option<BacktestConfig>,
    #[serde(default)]
    pub complete: CompleteConfig,
    #[serde(default)]
    pub score: Option<ScoreConfig>,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierConfig {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_rule")]
    pub rule: String,
    #[serde(default = "default_scale")]
    pub mbd_scale: String,
}

fn default_method() -> String {
    "exd".into()
}
fn default_rule() -> String {
    OutlierRule::default().to_string()
}
fn default_scale() -> String {
    "pairwise".into()
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            method: default_method(),
            rule: default_rule(),
            mbd_scale: default_scale(),
        }
    }
}

impl OutlierConfig {
    pub fn settings(&self) -> Result<OutlierSettings> {
        let mbd_scale = match self.mbd_scale.as_str() {
            "pairwise" => MbdScale::Pairwise,
            "unnormalized" => MbdScale::Unnormalized,
            other => return Err(Error::Argument(format!("unknown MBD scale `{other}`"))),
        };
        Ok(OutlierSettings {
            method: self.method.parse::<DepthMethod>()?,
            rule: self.rule.parse()?,
            mbd_scale,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    #[serde(default = "default_envelope_alpha")]
    pub alpha: f64,
    #[serde(default = "default_group_by")]
    pub group_by: Vec<String>,
    #[serde(default = "default_min_group")]
    pub min_group_size: usize,
}

fn default_envelope_alpha() -> f64 {
    0.05
}
fn default_group_by() -> Vec<String> {
    vec!["business_focus".into(), "ownership".into(), "geography".into()]
}
fn default_min_group() -> usize {
    5
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            alpha: default_envelope_alpha(),
            group_by: default_group_by(),
            min_group_size: default_min_group(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Observed lags the model is tuned for.
    pub s: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub company_id: String,
    pub accident_year: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub origin_year: i32,
    #[serde(default)]
    pub companies: Option<Vec<String>>,
    #[serde(default = "default_region")]
    pub region: String,
}

fn default_region() -> String {
    "exd".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteConfig {
    /// First accident year to complete; eight years before the current one when absent.
    #[serde(default)]
    pub start_year: Option<i32>,
    #[serde(default)]
    pub end_year: Option<i32>,
    #[serde(default = "default_pit_lags")]
    pub pit_lags: Vec<usize>,
    #[serde(default = "default_true")]
    pub chain_ladder: bool,
    #[serde(default)]
    pub cl_interval: IntervalKind,
}

fn default_pit_lags() -> Vec<usize> {
    vec![7, 8, 9]
}
fn default_true() -> bool {
    true
}

impl Default for CompleteConfig {
    fn default() -> Self {
        CompleteConfig {
            start_year: None,
            end_year: None,
            pit_lags: default_pit_lags(),
            chain_ladder: true,
            cl_interval: IntervalKind::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Fully developed triangles, same schema as the input triangles.
    pub truth: PathBuf,
    pub bands: PathBuf,
    #[serde(default)]
    pub ensembles: Option<PathBuf>,
    #[serde(default)]
    pub pooling: PitPooling,
    #[serde(default = "default_ks")]
    pub ks_constant: f64,
    /// Inclusive accident-year window for the PIT sample.
    #[serde(default)]
    pub pit_years: Option<(i32, i32)>,
}

fn default_ks() -> f64 {
    KS_CONSTANT
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_companies")]
    pub companies: usize,
    #[serde(default)]
    pub years: Option<(i32, i32)>,
    #[serde(default)]
    pub noise: Option<NoiseLaw>,
    #[serde(default)]
    pub outliers: Option<OutlierInjection>,
    /// Full model; replaces the workers-comp preset.
    #[serde(default)]
    pub spec: Option<SynthSpec>,
}

fn default_companies() -> usize {
    50
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            companies: default_companies(),
            years: None,
            noise: None,
            outliers: None,
            spec: None,
        }
    }
}

impl SynthConfig {
    /// The model to draw from; the run seed always wins.
    pub fn spec(&self, seed: u64) -> SynthSpec {
        let mut spec = self.spec.clone().unwrap_or_else(|| SynthSpec::workers_comp(self.companies, seed));
        spec.seed = seed;
        if let Some((a, b)) = self.years {
            spec.first_year = a;
            spec.last_year = b;
        }
        if let Some(noise) = self.noise {
            spec.noise = noise;
        }
        if self.outliers.is_some() {
            spec.outliers = self.outliers.clone();
        }
        spec
    }
}

/// A parsed config plus the exact bytes it came from.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
}

impl LoadedConfig {
    /// Read and parse `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path)
            .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&raw)
            .map_err(|e| Error::Argument(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Ok(dir) = std::env::var(OUTPUT_ENV) {
            if !dir.is_empty() {
                config.output = PathBuf::from(dir);
            }
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.output);
        if let Some(p) = config.triangles.as_mut() {
            resolve(p);
        }
        if let Some(p) = config.features.as_mut() {
            resolve(p);
        }
        if let Some(sc) = config.score.as_mut() {
            resolve(&mut sc.truth);
            resolve(&mut sc.bands);
            if let Some(p) = sc.ensembles.as_mut() {
                resolve(p);
            }
        }
        Ok(LoadedConfig { config, raw })
    }
}
