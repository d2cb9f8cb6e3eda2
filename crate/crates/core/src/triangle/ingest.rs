use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{LossTriangle, NUM_LAGS};
use crate::error::{Error, Result};

pub const TRIANGLE_HEADER: [&str; 5] = [
    "company_id",
    "accident_year",
    "lag",
    "cumulative_paid",
    "earned_premium",
];

/// Company-level sample-selection rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionFilters {
    /// Every accident year must earn at least this premium.
    pub min_premium: Option<f64>,
    /// Companies whose max/min annual premium exceeds this ratio are dropped
    /// (strict inequality).
    pub max_premium_ratio: Option<f64>,
}

impl SelectionFilters {
    pub fn none() -> Self {
        Self::default()
    }

    fn reject_reason(&self, t: &LossTriangle) -> Option<String> {
        let (lo, hi) = t
            .premiums
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        if let Some(min) = self.min_premium {
            if lo < min {
                return Some(format!("minimum annual premium {lo} below {min}"));
            }
        }
        if let Some(bound) = self.max_premium_ratio {
            if hi / lo > bound {
                return Some(format!("premium ratio {} exceeds {bound}", hi / lo));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub company_id: String,
    pub reason: String,
}

/// Result of ingestion: the surviving triangles plus why others were dropped.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub triangles: Vec<LossTriangle>,
    pub exclusions: Vec<Exclusion>,
}

/// Keep the triangles that pass `filters`; the rest are returned as exclusions.
pub fn apply_filters(
    triangles: Vec<LossTriangle>,
    filters: &SelectionFilters,
) -> (Vec<LossTriangle>, Vec<Exclusion>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for t in triangles {
        match filters.reject_reason(&t) {
            None => kept.push(t),
            Some(reason) => {
                log::info!("excluding company {}: {reason}", t.company_id);
                excluded.push(Exclusion {
                    company_id: t.company_id,
                    reason,
                });
            }
        }
    }
    (kept, excluded)
}

#[derive(Default)]
struct YearRows {
    premium: Option<f64>,
    premium_line: u64,
    cells: BTreeMap<usize, f64>,
}

fn parse_num(field: &str, what: &str, line: u64) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

/// Read the triangle CSV and build validated per-company triangles.
///
/// An accident year whose premium field is empty is dropped on its own; the
/// rest of the company is kept.
pub fn ingest_triangles<R: Read>(source: R, filters: &SelectionFilters) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.iter().map(String::as_str).ne(TRIANGLE_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header {}, got {}",
                TRIANGLE_HEADER.join(","),
                header.join(",")
            ),
        });
    }

    let mut companies: BTreeMap<String, BTreeMap<i32, YearRows>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != TRIANGLE_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let company = rec[0].to_string();
        if company.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty company_id".into(),
            });
        }
        let year: i32 = rec[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid accident_year `{}`", &rec[1]),
        })?;
        let lag: usize = rec[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid lag `{}`", &rec[2]),
        })?;
        if lag >= NUM_LAGS {
            return Err(Error::Validation(format!(
                "line {line}: lag {lag} outside 0..={}",
                NUM_LAGS - 1
            )));
        }
        let paid = parse_num(&rec[3], "cumulative_paid", line)?;
        if !paid.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite cumulative_paid".into(),
            });
        }
        let premium = if rec[4].is_empty() {
            None
        } else {
            let p = parse_num(&rec[4], "earned_premium", line)?;
            if !(p.is_finite() && p > 0.0) {
                return Err(Error::Validation(format!(
                    "line {line}: earned premium must be positive, got {p}"
                )));
            }
            Some(p)
        };

        let entry = companies
            .entry(company.clone())
            .or_default()
            .entry(year)
            .or_default();
        if entry.cells.insert(lag, paid).is_some() {
            return Err(Error::Validation(format!(
                "line {line}: duplicate row for ({company}, {year}, {lag})"
            )));
        }
        if let Some(p) = premium {
            match entry.premium {
                Some(prev) if prev != p => {
                    return Err(Error::Validation(format!(
                        "line {line}: premium {p} for ({company}, {year}) conflicts with {prev} on line {}",
                        entry.premium_line
                    )));
                }
                Some(_) => {}
                None => {
                    entry.premium = Some(p);
                    entry.premium_line = line;
                }
            }
        }
    }

    let mut triangles = Vec::with_capacity(companies.len());
    let mut exclusions = Vec::new();
    for (company, years) in companies {
        let mut rows = Vec::with_capacity(years.len());
        for (year, yr) in years {
            let lags: Vec<usize> = yr.cells.keys().copied().collect();
            if lags.iter().enumerate().any(|(i, &l)| i != l) {
                return Err(Error::Validation(format!(
                    "({company}, {year}): lags {lags:?} are not a contiguous prefix starting at 0"
                )));
            }
            let Some(premium) = yr.premium else {
                log::warn!("({company}, {year}): no earned premium, accident year dropped");
                exclusions.push(Exclusion {
                    company_id: company.clone(),
                    reason: format!("accident year {year} has no earned premium"),
                });
                continue;
            };
            rows.push((year, premium, yr.cells.into_values().collect()));
        }
        if rows.is_empty() {
            continue;
        }
        triangles.push(LossTriangle::new(company, rows)?);
    }

    let (triangles, excluded) = apply_filters(triangles, filters);
    exclusions.extend(excluded);
    Ok(Ingested {
        triangles,
        exclusions,
    })
}

/// Write triangles in the ingest schema.
pub fn write_triangles_csv<W: Write>(out: W, triangles: &[LossTriangle]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIANGLE_HEADER)?;
    for t in triangles {
        for &year in &t.accident_years {
            let p = t.premiums[&year];
            for (lag, c) in t.cumulative[&year].iter().enumerate() {
                w.write_record([
                    t.company_id.clone(),
                    year.to_string(),
                    lag.to_string(),
                    c.to_string(),
                    p.to_string(),
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
    use std::collections::BTreeSet;

    fn company_ids(triangles: &[LossTriangle]) -> BTreeSet<String> {
        triangles.iter().map(|t| t.company_id.clone()).collect()
    }

    fn csv_for(rows: &[(&str, i32, usize, f64, &str)]) -> String {
        let mut s = TRIANGLE_HEADER.join(",");
        s.push('\n');
        for (c, y, l, v, p) in rows {
            s.push_str(&format!("{c},{y},{l},{v},{p}\n"));
        }
        s
    }

    #[test]
    fn min_premium_filter_excludes_small_company() {
        let src = csv_for(&[
            ("A", 2000, 0, 10.0, "900000"),
            ("A", 2001, 0, 10.0, "2000000"),
            ("B", 2000, 0, 10.0, "1000000"),
        ]);
        let f = SelectionFilters {
            min_premium: Some(1e6),
            max_premium_ratio: None,
        };
        let got = ingest_triangles(src.as_bytes(), &f).unwrap();
        assert_eq!(company_ids(&got.triangles), ["B".to_string()].into());
        assert_eq!(got.exclusions[0].company_id, "A");
    }

    #[test]
    fn premium_ratio_filter_is_strict() {
        let src = csv_for(&[
            ("A", 2000, 0, 1.0, "10e6"),
            ("A", 2001, 0, 1.0, "150e6"),
            ("B", 2000, 0, 1.0, "10e6"),
            ("B", 2001, 0, 1.0, "100e6"),
        ]);
        let f = SelectionFilters {
            min_premium: None,
            max_premium_ratio: Some(10.0),
        };
        let got = ingest_triangles(src.as_bytes(), &f).unwrap();
        assert_eq!(company_ids(&got.triangles), ["B".to_string()].into());
    }

    #[test]
    fn full_triangle_passes_through() {
        let rows: Vec<_> = (0..10)
            .map(|l| ("A", 2000, l, 100.0 * (l + 1) as f64, "1000"))
            .collect();
        let got = ingest_triangles(csv_for(&rows).as_bytes(), &SelectionFilters::none()).unwrap();
        assert_eq!(got.triangles.len(), 1);
        assert_eq!(got.triangles[0].observed_through(2000), Some(9));
    }

    #[test]
    fn errors_carry_context() {
        let bad = format!("{}\nA,2000,0,abc,10\n", TRIANGLE_HEADER.join(","));
        assert!(matches!(
            ingest_triangles(bad.as_bytes(), &SelectionFilters::none()),
            Err(Error::Parse { line: 2, .. })
        ));
        let neg = csv_for(&[("A", 2000, 0, 1.0, "-5")]);
        assert!(matches!(
            ingest_triangles(neg.as_bytes(), &SelectionFilters::none()),
            Err(Error::Validation(_))
        ));
        let gap = csv_for(&[("A", 2000, 0, 1.0, "5"), ("A", 2000, 2, 1.0, "5")]);
        assert!(matches!(
            ingest_triangles(gap.as_bytes(), &SelectionFilters::none()),
            Err(Error::Validation(_))
        ));
        let dup = csv_for(&[("A", 2000, 0, 1.0, "5"), ("A", 2000, 0, 2.0, "5")]);
        assert!(matches!(
            ingest_triangles(dup.as_bytes(), &SelectionFilters::none()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_premium_drops_only_that_year() {
        let src = csv_for(&[("A", 2000, 0, 1.0, "5"), ("A", 2001, 0, 1.0, "")]);
        let got = ingest_triangles(src.as_bytes(), &SelectionFilters::none()).unwrap();
        assert_eq!(got.triangles[0].accident_years, vec![2000]);
        assert_eq!(got.exclusions.len(), 1);
    }

    #[test]
    fn write_then_ingest_roundtrip() {
        let t = LossTriangle::new(
            "Z",
            vec![(2000, 1234.5, vec![1.5, 2.25, 3.0]), (2001, 99.0, vec![0.1])],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_triangles_csv(&mut buf, std::slice::from_ref(&t)).unwrap();
        let got = ingest_triangles(buf.as_slice(), &SelectionFilters::none()).unwrap();
        assert_eq!(got.triangles, vec![t]);
    }

    proptest::proptest! {
        #[test]
        fn filters_are_idempotent(
            prems in proptest::collection::vec(proptest::collection::vec(0.1f64..100.0, 1..5), 1..8),
            min in 0.0f64..5.0,
            ratio in 1.0f64..20.0,
        ) {
            let tris: Vec<LossTriangle> = prems
                .iter()
                .enumerate()
                .map(|(i, ps)| {
                    LossTriangle::new(
                        format!("C{i}"),
                        ps.iter().enumerate().map(|(j, &p)| (2000 + j as i32, p, vec![1.0])),
                    )
                    .unwrap()
                })
                .collect();
            let f = SelectionFilters { min_premium: Some(min), max_premium_ratio: Some(ratio) };
            let (once, _) = apply_filters(tris, &f);
            let (twice, dropped) = apply_filters(once.clone(), &f);
            proptest::prop_assert_eq!(once, twice);
            proptest::prop_assert!(dropped.is_empty());
        }
    }
}
