use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BusinessFocus {
    Personal,
    Commercial,
    WkComp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ownership {
    Stock,
    Mutual,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Geography {
    National,
    Midwest,
    Northeast,
    South,
    West,
}

impl BusinessFocus {
    pub const ALL: [BusinessFocus; 3] = [Self::Personal, Self::Commercial, Self::WkComp];
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Personal => "personal",
            Self::Commercial => "commercial",
            Self::WkComp => "wkcomp",
        }
    }
}

impl Ownership {
    pub const ALL: [Ownership; 3] = [Self::Stock, Self::Mutual, Self::Other];
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stock => "stock",
            Self::Mutual => "mutual",
            Self::Other => "other",
        }
    }
}

impl Geography {
    pub const ALL: [Geography; 5] = [
        Self::National,
        Self::Midwest,
        Self::Northeast,
        Self::South,
        Self::West,
    ];
    pub fn as_str(self) -> &'static str {
        match self {
            Self::National => "national",
            Self::Midwest => "midwest",
            Self::Northeast => "northeast",
            Self::South => "south",
            Self::West => "west",
        }
    }
}

macro_rules! impl_level {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let norm: String = s
                    .trim()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .collect::<String>()
                    .to_ascii_lowercase();
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.as_str() == norm)
                    .ok_or_else(|| Error::Validation(format!("unknown {} `{}`", $what, s)))
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

impl_level!(BusinessFocus, "business focus");
impl_level!(Ownership, "ownership");
impl_level!(Geography, "geography");

/// Time-invariant company characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompanyProfile {
    pub business_focus: BusinessFocus,
    pub ownership: Ownership,
    pub geography: Geography,
}

/// Covariates attached to one development curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanyFeatures {
    pub profile: Option<CompanyProfile>,
    pub accident_year: i32,
    pub log_premium: f64,
}

impl CompanyFeatures {
    pub fn new(accident_year: i32, premium: f64) -> Self {
        CompanyFeatures {
            profile: None,
            accident_year,
            log_premium: premium.ln(),
        }
    }
}

/// Maps [`CompanyFeatures`] to a fixed-length numeric vector.
///
/// Categorical levels are one-hot encoded against the reference levels
/// `commercial`, `stock` and `national`. The continuous block is the accident
/// year index `t = year - base_year + 1`, the log premium, and their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoding {
    pub base_year: i32,
    pub include_profile: bool,
}

const PROFILE_NAMES: [&str; 8] = [
    "personal",
    "wkcomp",
    "mutual",
    "other",
    "midwest",
    "northeast",
    "south",
    "west",
];
const CONTINUOUS_NAMES: [&str; 3] = ["time", "log_prem", "log_prem_x_time"];

impl FeatureEncoding {
    pub fn new(base_year: i32, include_profile: bool) -> Self {
        FeatureEncoding {
            base_year,
            include_profile,
        }
    }

    pub fn dim(&self) -> usize {
        self.names().len()
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::with_capacity(11);
        if self.include_profile {
            v.extend(PROFILE_NAMES);
        }
        v.extend(CONTINUOUS_NAMES);
        v
    }

    pub fn time_index(&self, accident_year: i32) -> f64 {
        (accident_year - self.base_year + 1) as f64
    }

    pub fn encode(&self, f: &CompanyFeatures) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.dim());
        if self.include_profile {
            let p = f.profile.ok_or_else(|| {
                Error::Validation(format!(
                    "accident year {} has no company profile but the encoding requires one",
                    f.accident_year
                ))
            })?;
            let flag = |b: bool| if b { 1.0 } else { 0.0 };
            v.push(flag(p.business_focus == BusinessFocus::Personal));
            v.push(flag(p.business_focus == BusinessFocus::WkComp));
            v.push(flag(p.ownership == Ownership::Mutual));
            v.push(flag(p.ownership == Ownership::Other));
            v.push(flag(p.geography == Geography::Midwest));
            v.push(flag(p.geography == Geography::Northeast));
            v.push(flag(p.geography == Geography::South));
            v.push(flag(p.geography == Geography::West));
        }
        let t = self.time_index(f.accident_year);
        v.push(t);
        v.push(f.log_premium);
        v.push(f.log_premium * t);
        Ok(v)
    }
}

/// Read `company_id,business_focus,ownership,geography`.
pub fn read_features_csv<R: Read>(source: R) -> Result<BTreeMap<String, CompanyProfile>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected = ["company_id", "business_focus", "ownership", "geography"];
    if header != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, got {}", expected.join(","), header.join(",")),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |e: Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        let id = rec[0].to_string();
        let profile = CompanyProfile {
            business_focus: rec[1].parse().map_err(parse_err)?,
            ownership: rec[2].parse().map_err(parse_err)?,
            geography: rec[3].parse().map_err(parse_err)?,
        };
        if out.insert(id.clone(), profile).is_some() {
            return Err(Error::Validation(format!(
                "line {line}: duplicate features for company {id}"
            )));
        }
    }
    Ok(out)
}

/// Write the features table in the same schema [`read_features_csv`] reads.
pub fn write_features_csv<W: std::io::Write>(
    out: W,
    profiles: &BTreeMap<String, CompanyProfile>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["company_id", "business_focus", "ownership", "geography"])?;
    for (id, p) in profiles {
        w.write_record([
            id.as_str(),
            p.business_focus.as_str(),
            p.ownership.as_str(),
            p.geography.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_uses_reference_levels() {
        let enc = FeatureEncoding::new(1987, true);
        let mut f = CompanyFeatures::new(1990, std::f64::consts::E);
        f.profile = Some(CompanyProfile {
            business_focus: BusinessFocus::Commercial,
            ownership: Ownership::Stock,
            geography: Geography::National,
        });
        let v = enc.encode(&f).unwrap();
        assert_eq!(v.len(), 11);
        assert!(v[..8].iter().all(|&x| x == 0.0));
        assert_eq!(&v[8..], &[4.0, 1.0, 4.0]);

        f.profile = Some(CompanyProfile {
            business_focus: BusinessFocus::WkComp,
            ownership: Ownership::Other,
            geography: Geography::West,
        });
        let v = enc.encode(&f).unwrap();
        assert_eq!(&v[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_profile_is_an_error_only_when_required() {
        let f = CompanyFeatures::new(2000, 10.0);
        assert!(FeatureEncoding::new(2000, true).encode(&f).is_err());
        assert_eq!(FeatureEncoding::new(2000, false).encode(&f).unwrap().len(), 3);
    }

    #[test]
    fn features_csv_roundtrip() {
        let src = "company_id,business_focus,ownership,geography\nA,WkComp,Mutual,South\nB,personal,stock,National\n";
        let m = read_features_csv(src.as_bytes()).unwrap();
        assert_eq!(m["A"].business_focus, BusinessFocus::WkComp);
        assert_eq!(m["B"].geography, Geography::National);
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &m).unwrap();
        assert_eq!(read_features_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn unknown_level_reports_line() {
        let src = "company_id,business_focus,ownership,geography\nA,Marine,Mutual,South\n";
        match read_features_csv(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
