//! One function per subcommand. Each reads its inputs through [`Outputs`]
//! and writes every artifact through it.

use std::collections::BTreeMap;

use serde_json::json;

use funcreserve::bootstrap::{BootstrapPlan, RegionKind, Scale};
use funcreserve::depth::{central_envelope, stratified_envelopes, DepthReport, GroupBy, GroupEnvelope};
use funcreserve::scoring::{ks_uniform, write_ecdf_csv, write_score_csv};
use funcreserve::synthetic::generate;
use funcreserve::triangle::{
    ingest_triangles, read_features_csv, summarize, to_clr, write_features_csv, write_triangles_csv, CompanyProfile,
    DevCurve, LossTriangle, NUM_LAGS,
};
use funcreserve::workflow::{
    drop_outliers, ensemble_pits, fixed_origin_backtest, read_bands_csv, read_ensembles_csv, score_bands,
    sequential_completion, write_backtest_csv, write_bands_csv, write_completed_curves_csv,
    write_completed_triangles_csv, write_ensembles_csv, write_ledger_csv, BacktestSettings, Dataset,
    SequentialSettings,
};
use funcreserve::{Error, Result};

use crate::config::RunConfig;
use crate::output::Outputs;

struct Loaded {
    dataset: Dataset,
    exclusions: Vec<funcreserve::triangle::Exclusion>,
}

fn read_triangles(cfg: &RunConfig, out: &mut Outputs) -> Result<(Vec<LossTriangle>, Vec<funcreserve::triangle::Exclusion>)> {
    let path = cfg
        .triangles
        .as_ref()
        .ok_or_else(|| Error::Argument("config has no `triangles` path".into()))?;
    let bytes = out.read_input(path)?;
    let ingested = ingest_triangles(&bytes[..], &cfg.filters)?;
    Ok((ingested.triangles, ingested.exclusions))
}

fn read_profiles(cfg: &RunConfig, out: &mut Outputs) -> Result<Option<BTreeMap<String, CompanyProfile>>> {
    match &cfg.features {
        Some(path) => {
            let bytes = out.read_input(path)?;
            Ok(Some(read_features_csv(&bytes[..])?))
        }
        None => Ok(None),
    }
}

fn load(cfg: &RunConfig, out: &mut Outputs) -> Result<Loaded> {
    let (mut triangles, exclusions) = read_triangles(cfg, out)?;
    if let Some(year) = cfg.current_year {
        triangles = triangles.iter().map(|t| t.masked(year)).collect();
    }
    let profiles = read_profiles(cfg, out)?;
    Ok(Loaded {
        dataset: Dataset::new(triangles, profiles.as_ref())?,
        exclusions,
    })
}

/// Complete curves up to `max_year`, minus depth outliers when configured.
fn training_curves(cfg: &RunConfig, ds: &Dataset, max_year: i32, out: &mut Outputs) -> Result<Vec<DevCurve>> {
    let curves = ds.complete_curves(max_year);
    if curves.is_empty() {
        return Err(Error::InsufficientData(format!("no complete curves up to accident year {max_year}")));
    }
    let Some(oc) = &cfg.outliers else { return Ok(curves) };
    let (kept, dropped) = drop_outliers(curves, &oc.settings()?)?;
    log::info!("dropped {} outlying training curves", dropped.len());
    out.write_with("removed_outliers.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["company_id", "accident_year"])?;
        for id in &dropped {
            w.write_record([id.company_id.clone(), id.accident_year.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(kept)
}

pub fn validate(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let (triangles, exclusions) = read_triangles(cfg, out)?;
    let profiles = read_profiles(cfg, out)?;
    let current = cfg.current_year.unwrap_or_else(|| {
        triangles.iter().filter_map(LossTriangle::latest_year).max().unwrap_or(i32::MIN)
    });
    let mut violations: Vec<String> = triangles.iter().flat_map(|t| t.diagonal_violations(current)).collect();
    if let Some(p) = &profiles {
        violations.extend(
            triangles
                .iter()
                .filter(|t| !p.contains_key(&t.company_id))
                .map(|t| format!("{}: no features row", t.company_id)),
        );
    }
    let curves: usize = triangles.iter().map(|t| t.accident_years.len()).sum();
    let complete: usize = triangles
        .iter()
        .flat_map(|t| t.cumulative.values())
        .filter(|c| c.len() == NUM_LAGS)
        .count();
    out.write_json(
        "validation.json",
        &json!({
            "current_year": current,
            "companies": triangles.len(),
            "curves": curves,
            "complete_curves": complete,
            "exclusions": exclusions,
            "violations": violations,
        }),
    )?;
    Ok(violations)
}

pub fn summarize_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let loaded = load(cfg, out)?;
    let ds = &loaded.dataset;
    let complete = ds.complete_curves(i32::MAX);
    if complete.is_empty() {
        return Err(Error::InsufficientData("no complete curves to summarize".into()));
    }
    let table = summarize(&complete)?;
    out.write_with("summary.csv", |buf| table.write_csv(buf))?;
    out.write_with("curves.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["company_id", "accident_year", "lag", "ilr", "clr", "complete"])?;
        for c in &ds.curves {
            for (lag, (y, cl)) in c.ilr.iter().zip(c.clr()).enumerate() {
                w.write_record([
                    c.id.company_id.clone(),
                    c.id.accident_year.to_string(),
                    lag.to_string(),
                    y.to_string(),
                    cl.to_string(),
                    c.is_complete().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    if !loaded.exclusions.is_empty() {
        out.write_json("exclusions.json", &loaded.exclusions)?;
    }
    Ok(())
}

pub fn outliers(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let ds = load(cfg, out)?.dataset;
    let curves = ds.complete_curves(i32::MAX);
    let settings = cfg.outliers.clone().unwrap_or_default().settings()?;
    let mut report = DepthReport::compute(&curves, settings.method, settings.mbd_scale)?;
    report.flag(settings.rule)?;
    out.write_with("depth.csv", |buf| report.write_csv(buf))?;

    let alpha = cfg.envelopes.alpha;
    let values: Vec<&[f64]> = curves.iter().map(|c| c.ilr.as_slice()).collect();
    let overall = central_envelope(&values, &report.ranking, alpha)?;
    let median = &curves[report.median];
    let mut groups: Vec<(String, String, GroupEnvelope)> = vec![(
        "all".into(),
        "all".into(),
        GroupEnvelope::Computed {
            median: median.id.clone(),
            median_curve: median.ilr.clone(),
            envelope: overall,
            size: curves.len(),
        },
    )];
    if ds.encoding.include_profile {
        for name in &cfg.envelopes.group_by {
            let by: GroupBy = name.parse()?;
            for (level, env) in stratified_envelopes(&curves, by, alpha, cfg.envelopes.min_group_size)? {
                groups.push((name.clone(), level, env));
            }
        }
    }
    out.write_with("envelopes.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "group_by", "level", "size", "status", "median_company", "median_year", "lag", "median", "lower", "upper",
        ])?;
        for (by, level, env) in &groups {
            match env {
                GroupEnvelope::Computed {
                    median,
                    median_curve,
                    envelope,
                    size,
                } => {
                    for lag in 0..median_curve.len() {
                        w.write_record([
                            by.clone(),
                            level.clone(),
                            size.to_string(),
                            "computed".into(),
                            median.company_id.clone(),
                            median.accident_year.to_string(),
                            lag.to_string(),
                            median_curve[lag].to_string(),
                            envelope.lower[lag].to_string(),
                            envelope.upper[lag].to_string(),
                        ])?;
                    }
                }
                GroupEnvelope::Insufficient { size } => {
                    w.write_record([by, level, &size.to_string(), "insufficient", "", "", "", "", "", ""])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

pub fn fit(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let fc = cfg.fit.as_ref().ok_or_else(|| Error::Argument("config has no `fit` section".into()))?;
    let ds = load(cfg, out)?.dataset;
    let train = training_curves(cfg, &ds, i32::MAX, out)?;
    let (tuned, model) = cfg.pipeline.tune_and_fit(&train, fc.s, &ds.encoding)?;
    out.write_json("model.json", &model)?;
    out.write_json(
        "fit.json",
        &json!({
            "s": tuned.s,
            "n_train": tuned.n_train,
            "k": tuned.k,
            "lambda": tuned.lambda,
            "cv_mape": tuned.mape,
            "prior_penalties": tuned.prior_penalties,
            "eigenvalues": model.fpca.eigenvalues,
            "explained_variance": model.fpca.explained_variance(),
            "model_sha256": model.digest(),
        }),
    )?;
    out.write_with("tuning.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["K", "lambda", "mape"])?;
        for g in &tuned.grid {
            w.write_record([g.k.to_string(), g.lambda.to_string(), g.mape.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write_with("loadings.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let mut header = vec!["lag".to_string(), "mean".to_string()];
        header.extend((1..=model.k()).map(|k| format!("phi_{k}")));
        w.write_record(&header)?;
        for lag in 0..NUM_LAGS {
            let mut row = vec![lag.to_string(), model.fpca.mean[lag].to_string()];
            row.extend((0..model.k()).map(|k| model.fpca.phi(k, lag).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write_with("prior.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["factor", "term", "coefficient", "penalty"])?;
        for (k, f) in model.prior.factors.iter().enumerate() {
            let factor = (k + 1).to_string();
            w.write_record([factor.as_str(), "intercept", &f.intercept.to_string(), &f.penalty.to_string()])?;
            for (name, c) in model.prior.feature_names.iter().zip(&f.coef) {
                w.write_record([factor.as_str(), name, &c.to_string(), &f.penalty.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

pub fn forecast(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let fc = cfg
        .forecast
        .as_ref()
        .ok_or_else(|| Error::Argument("config has no `forecast` section".into()))?;
    let ds = load(cfg, out)?.dataset;
    let target = ds
        .year(fc.accident_year)
        .into_iter()
        .find(|c| c.id.company_id == fc.company_id)
        .ok_or_else(|| Error::Argument(format!("no curve for {}:{}", fc.company_id, fc.accident_year)))?;
    let s = target.observed_lags();
    if s >= NUM_LAGS {
        return Err(Error::Argument(format!("{} is fully developed", target.id)));
    }
    let train = training_curves(cfg, &ds, i32::MAX, out)?;
    let (tuned, model) = cfg.pipeline.tune_and_fit(&train, s, &ds.encoding)?;
    let done = model.complete(&target, tuned.lambda)?;
    let ensemble = if cfg.pipeline.replicates > 0 {
        let plan = BootstrapPlan::build(&train, &model, tuned.lambda, &cfg.pipeline.bootstrap_config(s))?;
        Some(plan.forecast(&target, 0)?)
    } else {
        None
    };
    let alpha = cfg.pipeline.alpha;
    let regions = match &ensemble {
        Some(e) => Some((
            e.region(RegionKind::Pointwise, Scale::Clr, alpha)?,
            e.region(RegionKind::Exd, Scale::Clr, alpha)?,
        )),
        None => None,
    };
    out.write_with("forecast.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "lag", "source", "ilr", "clr", "pointwise_lower", "pointwise_upper", "exd_lower", "exd_upper",
        ])?;
        let ilr = done.full_ilr();
        let clr = to_clr(&ilr);
        for lag in 0..NUM_LAGS {
            let future = lag >= s;
            let band = |v: &[f64]| if future { v[lag - s].to_string() } else { String::new() };
            let (pl, pu, el, eu) = match &regions {
                Some((p, e)) => (band(&p.lower), band(&p.upper), band(&e.lower), band(&e.upper)),
                None => Default::default(),
            };
            w.write_record([
                lag.to_string(),
                if future { "forecast" } else { "observed" }.to_string(),
                ilr[lag].to_string(),
                clr[lag].to_string(),
                pl,
                pu,
                el,
                eu,
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    if let Some(e) = &ensemble {
        out.write_with("ensemble.csv", |buf| e.write_csv(buf))?;
    }
    out.write_json(
        "forecast.json",
        &json!({
            "company_id": fc.company_id,
            "accident_year": fc.accident_year,
            "s": s,
            "k": tuned.k,
            "lambda": tuned.lambda,
            "cv_mape": tuned.mape,
            "beta": done.beta,
            "prior": model.prior_for(&target.features)?,
            "ultimate_clr": done.ultimate_clr(),
            "model_sha256": model.digest(),
        }),
    )?;
    Ok(())
}

pub fn backtest(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let bc = cfg
        .backtest
        .as_ref()
        .ok_or_else(|| Error::Argument("config has no `backtest` section".into()))?;
    let ds = load(cfg, out)?.dataset;
    let train = training_curves(cfg, &ds, bc.origin_year - NUM_LAGS as i32 + 1, out)?;
    let settings = BacktestSettings {
        origin_year: bc.origin_year,
        companies: bc.companies.clone(),
        pipeline: cfg.pipeline.clone(),
        region: bc.region.parse()?,
    };
    let result = fixed_origin_backtest(&ds, train, &settings)?;
    out.write_with("backtest.csv", |buf| write_backtest_csv(buf, &result.rows))?;
    if !result.skipped.is_empty() {
        out.write_with("backtest_skipped.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["company_id", "reason"])?;
            for (id, why) in &result.skipped {
                w.write_record([id, why])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}

pub fn complete(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let ds = load(cfg, out)?.dataset;
    let current = ds.latest_year();
    let cc = &cfg.complete;
    let start = cc.start_year.unwrap_or(current - NUM_LAGS as i32 + 2);
    let end = cc.end_year.unwrap_or(current);
    let train = training_curves(cfg, &ds, start - 1, out)?;
    let settings = SequentialSettings {
        start_year: start,
        end_year: end,
        pipeline: cfg.pipeline.clone(),
        pit_lags: cc.pit_lags.clone(),
        cl_interval: cc.cl_interval,
        chain_ladder: cc.chain_ladder,
    };
    let result = sequential_completion(&ds, train, &settings)?;
    out.write_with("ledger.csv", |buf| write_ledger_csv(buf, &result.ledger))?;
    out.write_with("completed_triangles.csv", |buf| {
        write_completed_triangles_csv(buf, &ds, &result.completed)
    })?;
    out.write_with("completed_curves.csv", |buf| write_completed_curves_csv(buf, &result.completed))?;
    if !result.bands.is_empty() {
        out.write_with("bands.csv", |buf| write_bands_csv(buf, &result.bands))?;
    }
    if !result.ensembles.is_empty() {
        out.write_with("ensembles.csv", |buf| write_ensembles_csv(buf, &result.ensembles))?;
    }
    Ok(())
}

pub fn score(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let sc = cfg.score.as_ref().ok_or_else(|| Error::Argument("config has no `score` section".into()))?;
    let truth_bytes = out.read_input(&sc.truth)?;
    let truth = Dataset::new(ingest_triangles(&truth_bytes[..], &Default::default())?.triangles, None)?.truth_clr();
    let bands = read_bands_csv(&out.read_input(&sc.bands)?[..])?;
    let (rows, missing) = score_bands(&bands, &truth, cfg.pipeline.alpha)?;
    if !missing.is_empty() {
        log::warn!("{} forecast curves have no developed truth and were not scored", missing.len());
    }
    out.write_with("scores.csv", |buf| write_score_csv(buf, &rows))?;
    if let Some(path) = &sc.ensembles {
        let slices = read_ensembles_csv(&out.read_input(path)?[..])?;
        let pits = ensemble_pits(&slices, &truth, sc.pooling, sc.pit_years)?;
        let ks = ks_uniform(&pits, sc.ks_constant)?;
        out.write_with("pit_ecdf.csv", |buf| write_ecdf_csv(buf, &pits))?;
        out.write_json("ks.json", &ks)?;
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let spec = cfg.synth.spec(cfg.pipeline.seed);
    let data = generate(&spec)?;
    out.write_json("synth_spec.json", &spec)?;
    out.write_with("triangles.csv", |buf| write_triangles_csv(buf, &data.triangles))?;
    out.write_with("truth.csv", |buf| write_triangles_csv(buf, &data.truth))?;
    if spec.profiles {
        out.write_with("features.csv", |buf| write_features_csv(buf, &data.profiles))?;
    }
    out.write_with("true_scores.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["company_id", "accident_year", "factor", "score"])?;
        for (c, scores) in data.curves.iter().zip(&data.scores) {
            for (k, v) in scores.iter().enumerate() {
                w.write_record([
                    c.id.company_id.clone(),
                    c.id.accident_year.to_string(),
                    (k + 1).to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    if !data.outliers.is_empty() {
        out.write_with("injected_outliers.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["company_id", "accident_year"])?;
            for id in &data.outliers {
                w.write_record([id.company_id.clone(), id.accident_year.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}
