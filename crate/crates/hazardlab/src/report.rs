//! Study orchestration: stratified fits, hazard-curve families, and the
//! deterministic report bundle (spell table, group comparisons, fit tables,
//! residual battery, and curve files) produced from a price series and a
//! recession calendar.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde_json::json;

use crate::data::{
    self, describe_spells, load_recessions, load_series, quartile_breaks, quartile_of,
    welch_t_test, RecessionRule, SpellRecord, SpellSet,
};
use crate::diagnostics::{
    bg_serial_test, bpg_hetero_test, qq_points, residual_summary, residuals, write_qq_csv,
    write_residuals_csv, ResidualKind, ResidualSummary,
};
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::estimate::{
    self, fit, likelihood, Covariate, FitResult, Frailty, Metric, ModelFamily, ModelSpec,
    PredictKind,
};
use crate::inference::{information_criteria, ph_assumption_test, ssr_goodness};
use crate::nonparametric::{
    default_hazard_grid, kaplan_meier_stratum, smoothed_hazard, CurvePoint, CurveSample,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Quartiles,
    /// Strictly increasing custom breakpoints; k points make k + 1 groups.
    Breakpoints(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratificationPlan {
    pub covariate: Covariate,
    pub scheme: Scheme,
    /// Optional binary covariate crossed with the scheme.
    pub factor: Option<Covariate>,
}

/// One stratum's fit attempt. Non-convergence is recorded, not fatal.
#[derive(Debug)]
pub struct StratumFit {
    pub label: String,
    pub indices: Vec<usize>,
    /// Covariates kept after dropping those constant within the stratum.
    pub covariates: Vec<Covariate>,
    /// Stratum means of the kept covariates, the curve evaluation point.
    pub mean_covariates: Vec<f64>,
    pub outcome: Result<FitResult>,
}

fn group_labels(plan: &StratificationPlan, n_groups: usize) -> Vec<String> {
    match plan.scheme {
        Scheme::Quartiles => (1..=4).map(|q| format!("q{q}")).collect(),
        Scheme::Breakpoints(_) => (1..=n_groups).map(|g| format!("g{g}")).collect(),
    }
}

fn strata_indices(
    spells: &[SpellRecord],
    plan: &StratificationPlan,
) -> Result<Vec<(String, Vec<usize>)>> {
    let xs: Vec<f64> = spells.iter().map(|s| plan.covariate.value(s)).collect();
    let assign: Vec<usize> = match &plan.scheme {
        Scheme::Quartiles => {
            let breaks = quartile_breaks(&xs)?;
            xs.iter().map(|&x| quartile_of(x, &breaks)).collect()
        }
        Scheme::Breakpoints(bs) => {
            if bs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(
                    "breakpoints must be strictly increasing".into(),
                ));
            }
            xs.iter()
                .map(|&x| 1 + bs.iter().filter(|&&b| x > b).count())
                .collect()
        }
    };
    let n_groups = match &plan.scheme {
        Scheme::Quartiles => 4,
        Scheme::Breakpoints(bs) => bs.len() + 1,
    };
    let labels = group_labels(plan, n_groups);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (g, base_label) in labels.iter().enumerate() {
        let members: Vec<usize> = assign
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == g + 1)
            .map(|(i, _)| i)
            .collect();
        match plan.factor {
            None => out.push((base_label.clone(), members)),
            Some(f) => {
                for (suffix, want) in [("no_", false), ("", true)] {
                    let sub: Vec<usize> = members
                        .iter()
                        .copied()
                        .filter(|&i| {
                            let v = f.value(&spells[i]);
                            (v != 0.0) == want
                        })
                        .collect();
                    out.push((format!("{base_label}:{suffix}{}", f.name()), sub));
                }
            }
        }
    }
    for (label, idx) in &out {
        if idx.is_empty() {
            return Err(Error::EmptyGroup(format!("stratum {label}")));
        }
    }
    Ok(out)
}

fn expected_param_count(spec: &ModelSpec, p_covs: usize) -> usize {
    match spec.family {
        ModelFamily::Cox => p_covs,
        ModelFamily::Parametric(f) => {
            likelihood::packed_len(f, spec.frailty, p_covs + 1)
        }
    }
}

/// Fit the specification independently inside each stratum of the plan.
/// Covariates constant within a stratum are dropped there; strata whose fits
/// fail carry the error in their outcome instead of aborting the rest.
pub fn stratified_fits(
    spec: &ModelSpec,
    spells: &[SpellRecord],
    plan: &StratificationPlan,
) -> Result<Vec<StratumFit>> {
    spec.validate()?;
    if spec.link.is_some() {
        return Err(Error::Unsupported(
            "stratified fits do not take linked parameters".into(),
        ));
    }
    let groups = strata_indices(spells, plan)?;
    let mut out = Vec::with_capacity(groups.len());
    for (label, indices) in groups {
        let sub: Vec<SpellRecord> = indices.iter().map(|&i| spells[i].clone()).collect();
        let kept: Vec<Covariate> = spec
            .covariates
            .iter()
            .copied()
            .filter(|c| {
                let v0 = c.value(&sub[0]);
                sub.iter().any(|s| c.value(s) != v0)
            })
            .collect();
        let mean_covariates: Vec<f64> = kept
            .iter()
            .map(|c| sub.iter().map(|s| c.value(s)).sum::<f64>() / sub.len() as f64)
            .collect();
        let mut sspec = spec.clone();
        sspec.covariates = kept.clone();
        let outcome = (|| {
            let need = 2 * expected_param_count(&sspec, kept.len());
            let events = sub.iter().filter(|s| s.event == 1).count();
            if events < need {
                return Err(Error::Data(format!(
                    "stratum {label} has {events} events, fewer than twice the {} parameters",
                    need / 2
                )));
            }
            fit(&sspec, &sub)
        })();
        out.push(StratumFit {
            label,
            indices,
            covariates: kept,
            mean_covariates,
            outcome,
        });
    }
    Ok(out)
}

/// A stratum's predicted hazard over a grid plus the interior peak when the
/// fitted hazard has one.
#[derive(Debug, Clone)]
pub struct HazardCurve {
    pub label: String,
    pub curve: CurveSample,
    pub peak: Option<(f64, f64)>,
}

/// Model hazards evaluated at each stratum's mean covariates.
pub fn hazard_curve_family(fits: &[StratumFit], grid: &[f64]) -> Result<Vec<HazardCurve>> {
    let mut out = Vec::with_capacity(fits.len());
    for sf in fits {
        let fit = sf
            .outcome
            .as_ref()
            .map_err(|e| Error::Data(format!("stratum {}: {e}", sf.label)))?;
        let mut points = Vec::with_capacity(grid.len());
        for &t in grid {
            let h = estimate::predict(fit, &sf.mean_covariates, t, PredictKind::Hazard)?;
            points.push(CurvePoint {
                time: t,
                value: h,
                std_err: 0.0,
            });
        }
        let peak = match estimate::hazard_peak(fit, &sf.mean_covariates) {
            Ok(p) => Some(p),
            Err(Error::Unsupported(_)) => None,
            Err(e) => return Err(e),
        };
        out.push(HazardCurve {
            label: sf.label.clone(),
            curve: CurveSample { points },
            peak,
        });
    }
    Ok(out)
}

/// Default reporting grid: 0.1-month steps over [0.5, 12].
pub fn default_report_grid() -> Vec<f64> {
    (0..=115).map(|i| 0.5 + 0.1 * f64::from(i)).collect()
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub prices: PathBuf,
    pub recessions: PathBuf,
    pub out_dir: PathBuf,
    pub rule: RecessionRule,
    pub bandwidth: f64,
    pub tolerance: f64,
}

impl StudyConfig {
    pub fn new(prices: PathBuf, recessions: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            prices,
            recessions,
            out_dir,
            rule: RecessionRule::Any,
            bandwidth: 1.5,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct StudyBundle {
    pub files: Vec<PathBuf>,
    pub manifest: serde_json::Value,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonConvergence { .. } | Error::SingularHessian { .. } => e,
        other => Error::Data(format!("{name}: {other}")),
    })
}

/// Six significant digits, the table convention.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        format!("{x:.5e}")
    } else {
        let decimals = (5 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    }
}

fn study_models() -> Vec<(&'static str, ModelSpec)> {
    let covs = vec![
        Covariate::Recession,
        Covariate::PriceDecline,
        Covariate::InterestRate,
    ];
    vec![
        (
            "lognormal",
            ModelSpec::parametric(Family::LogNormal, Metric::Aft, Frailty::None, covs.clone()),
        ),
        (
            "lognormal_frailty",
            ModelSpec::parametric(Family::LogNormal, Metric::Aft, Frailty::Gamma, covs.clone()),
        ),
        (
            "weibull",
            ModelSpec::parametric(Family::Weibull, Metric::Aft, Frailty::None, covs.clone()),
        ),
        (
            "weibull_frailty",
            ModelSpec::parametric(
                Family::Weibull,
                Metric::Aft,
                Frailty::InverseGaussian,
                covs.clone(),
            ),
        ),
        (
            "exponential",
            ModelSpec::parametric(Family::Exponential, Metric::Ph, Frailty::None, covs.clone()),
        ),
        (
            "exponential_frailty",
            ModelSpec::parametric(Family::Exponential, Metric::Ph, Frailty::Gamma, covs),
        ),
    ]
}

fn summary_json(s: &ResidualSummary) -> serde_json::Value {
    json!({
        "n": s.n,
        "mean": s.mean,
        "median": s.median,
        "max": s.max,
        "min": s.min,
        "sd": s.sd,
        "skewness": if s.skewness.is_nan() { serde_json::Value::Null } else { json!(s.skewness) },
        "kurtosis": if s.kurtosis.is_nan() { serde_json::Value::Null } else { json!(s.kurtosis) },
        "sum": s.sum,
        "sum_sq_dev": s.sum_sq_dev,
        "jarque_bera": s.jb.as_ref().map(|t| t.to_json()),
    })
}

struct Emitter {
    out_dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Emitter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }
}

fn curve_csv(rows: &[(String, &CurveSample)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "estimate", "std_err", "stratum"])?;
    for (label, curve) in rows {
        for p in &curve.points {
            w.write_record([
                format!("{}", p.time),
                format!("{}", p.value),
                format!("{}", p.std_err),
                label.clone(),
            ])?;
        }
    }
    Ok(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
}

/// Run the full empirical study and write its deterministic bundle.
pub fn run_study(config: &StudyConfig) -> Result<StudyBundle> {
    let series = stage("load_series", load_series(&config.prices))?;
    let calendar = stage("load_recessions", load_recessions(&config.recessions))?;
    let returns = stage("compute_returns", data::compute_returns(&series))?;
    let set = stage(
        "extract_spells",
        data::extract_spells(&returns, &calendar, config.rule),
    )?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut em = Emitter {
        out_dir: config.out_dir.clone(),
        files: Vec::new(),
    };
    let mut manifest = BTreeMap::<String, serde_json::Value>::new();

    write_spell_stage(&mut em, &mut manifest, &set, &returns)?;
    write_group_stage(&mut em, &mut manifest, &set)?;
    write_km_stage(&mut em, &mut manifest, &set, config.bandwidth)?;
    let fits = write_fit_stage(&mut em, &mut manifest, &set, config.tolerance)?;
    write_residual_stage(&mut em, &mut manifest, &set, &fits)?;
    write_peak_stage(&mut em, &mut manifest, &set, &fits)?;
    write_strata_stage(&mut em, &mut manifest, &set)?;

    let manifest = serde_json::Value::Object(manifest.into_iter().collect());
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    em.write("manifest.json", &bytes)?;
    Ok(StudyBundle {
        files: em.files,
        manifest,
    })
}

fn write_spell_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
    returns: &data::ReturnSeries,
) -> Result<()> {
    let mut buf = Vec::new();
    stage("export_spells", data::write_spells_csv(&set.spells, &mut buf))?;
    em.write("spells.csv", &buf)?;

    let durations = set.durations();
    let mut sorted = durations.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let losses: Vec<f64> = returns
        .rows()
        .iter()
        .filter(|r| r.r < 0.0)
        .map(|r| -100.0 * r.r)
        .collect();
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let max_loss = losses.iter().cloned().fold(f64::MIN, f64::max);
    manifest.insert(
        "spells".into(),
        json!({
            "count": set.spells.len(),
            "negative_months": set.negative_months,
            "joint_recession_months": set.joint_recession_months,
            "mean_duration": durations.iter().sum::<f64>() / n as f64,
            "median_duration": median,
            "max_duration": sorted[n - 1],
            "mean_monthly_loss_pct": mean_loss,
            "max_monthly_loss_pct": max_loss,
            "censored": set.spells.iter().filter(|s| s.event == 0).count(),
            "source_digest": set.source_digest,
        }),
    );
    Ok(())
}

fn write_group_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
) -> Result<()> {
    let spells = &set.spells;
    let rec_idx: Vec<usize> = (0..spells.len()).filter(|&i| spells[i].recession).collect();
    let norec_idx: Vec<usize> = (0..spells.len()).filter(|&i| !spells[i].recession).collect();
    let grouping = vec![
        ("all".to_string(), (0..spells.len()).collect::<Vec<_>>()),
        ("recession".to_string(), rec_idx.clone()),
        ("no_recession".to_string(), norec_idx.clone()),
    ];
    let summary = stage("describe", describe_spells(spells, Some(&grouping)))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "n", "mean", "variance", "min", "max"])
        .map_err(Error::from)?;
    for g in &summary.groups {
        w.write_record([
            g.label.clone(),
            g.n.to_string(),
            sig6(g.mean),
            g.variance.map_or("NA".into(), sig6),
            g.min.to_string(),
            g.max.to_string(),
        ])
        .map_err(Error::from)?;
    }
    em.write(
        "table1.csv",
        &w.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;

    let dur = |idx: &[usize]| -> Vec<f64> {
        idx.iter().map(|&i| f64::from(spells[i].duration)).collect()
    };
    let (t, df, p) = stage("welch", welch_t_test(&dur(&rec_idx), &dur(&norec_idx)))?;
    let mean_of = |idx: &[usize]| dur(idx).iter().sum::<f64>() / idx.len() as f64;
    manifest.insert(
        "welch".into(),
        json!({
            "mean_recession": mean_of(&rec_idx),
            "mean_no_recession": mean_of(&norec_idx),
            "t": t,
            "df": df,
            "p": p,
        }),
    );

    let mut qcounts = BTreeMap::new();
    for cov in [Covariate::PriceDecline, Covariate::InterestRate] {
        let xs: Vec<f64> = spells.iter().map(|s| cov.value(s)).collect();
        let breaks = stage("quartiles", quartile_breaks(&xs))?;
        let mut counts = [0usize; 4];
        for &x in &xs {
            counts[quartile_of(x, &breaks) - 1] += 1;
        }
        qcounts.insert(cov.name().to_string(), json!(counts.to_vec()));
    }
    manifest.insert(
        "quartile_counts".into(),
        serde_json::Value::Object(qcounts.into_iter().collect()),
    );

    let (coef, r2) = stage("cubic_trend", data::cubic_trend_fit(&summary.histogram))?;
    manifest.insert(
        "cubic_trend".into(),
        json!({ "coefficients": coef.to_vec(), "r_squared": r2 }),
    );
    let hist: BTreeMap<String, usize> = summary
        .histogram
        .iter()
        .map(|(k, v)| (format!("{k:02}"), *v))
        .collect();
    manifest.insert("duration_histogram".into(), json!(hist));
    Ok(())
}

fn write_km_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
    bandwidth: f64,
) -> Result<()> {
    let spells = &set.spells;
    let rec = |s: &SpellRecord| s.recession;
    let norec = |s: &SpellRecord| !s.recession;
    let km_all = stage("km", kaplan_meier_stratum(spells, "all", None))?;
    let km_rec = stage("km", kaplan_meier_stratum(spells, "recession", Some(&rec)))?;
    let km_norec = stage(
        "km",
        kaplan_meier_stratum(spells, "no_recession", Some(&norec)),
    )?;
    em.write(
        "km.csv",
        &curve_csv(&[
            ("all".into(), &km_all),
            ("recession".into(), &km_rec),
            ("no_recession".into(), &km_norec),
        ])?,
    )?;
    let at1 = |c: &CurveSample| {
        c.point_at(1.0)
            .map(|p| (p.value, p.std_err))
            .unwrap_or((1.0, 0.0))
    };
    let (s_r, se_r) = at1(&km_rec);
    let (s_n, se_n) = at1(&km_norec);
    manifest.insert(
        "km".into(),
        json!({
            "recession": { "s_at_1": s_r, "greenwood_se_at_1": se_r },
            "no_recession": { "s_at_1": s_n, "greenwood_se_at_1": se_n },
        }),
    );

    let mut rows = Vec::new();
    let mut smoothed = Vec::new();
    for (label, filter) in [
        ("all", None::<&dyn Fn(&SpellRecord) -> bool>),
        ("recession", Some(&rec)),
        ("no_recession", Some(&norec)),
    ] {
        let selected: Vec<&SpellRecord> = match filter {
            None => spells.iter().collect(),
            Some(f) => spells.iter().filter(|s| f(s)).collect(),
        };
        let t: Vec<f64> = selected.iter().map(|s| f64::from(s.duration)).collect();
        let d: Vec<u8> = selected.iter().map(|s| s.event).collect();
        let grid = default_hazard_grid(&t);
        let curve = stage("smoothed_hazard", smoothed_hazard(&t, &d, bandwidth, &grid))?;
        smoothed.push((label.to_string(), curve));
    }
    for (label, curve) in &smoothed {
        rows.push((label.clone(), curve));
    }
    em.write("hazard_smoothed.csv", &curve_csv(&rows)?)?;
    Ok(())
}

fn write_fit_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
    tolerance: f64,
) -> Result<Vec<(&'static str, FitResult)>> {
    let mut fits = Vec::new();
    for (key, mut spec) in study_models() {
        spec.tolerance = tolerance;
        let f = stage(key, fit(&spec, &set.spells))?;
        fits.push((key, f));
    }
    let mut cox_spec = ModelSpec::cox(vec![
        Covariate::Recession,
        Covariate::PriceDecline,
        Covariate::InterestRate,
    ]);
    cox_spec.tolerance = tolerance;
    let cox_fit = stage("cox", fit(&cox_spec, &set.spells))?;

    let mut aic = BTreeMap::new();
    let mut loglik = BTreeMap::new();
    let mut ssr = BTreeMap::new();
    let mut fits_json = BTreeMap::new();
    let mut coef_rows = csv::Writer::from_writer(Vec::new());
    coef_rows
        .write_record(["model", "parameter", "estimate", "se_model", "se_robust", "z", "p"])
        .map_err(Error::from)?;
    let mut model_rows = csv::Writer::from_writer(Vec::new());
    model_rows
        .write_record(["model", "loglik", "aic", "bic", "ssr", "iterations", "converged"])
        .map_err(Error::from)?;

    let mut emit = |key: &str, f: &FitResult| -> Result<()> {
        let s = stage(key, ssr_goodness(f, &set.spells))?;
        let (a, _) = information_criteria(f)
            .unwrap_or((f.aic, f.bic));
        if f.spec.family != ModelFamily::Cox {
            aic.insert(key.to_string(), json!(a));
        }
        loglik.insert(key.to_string(), json!(f.loglik));
        ssr.insert(key.to_string(), json!(s));
        fits_json.insert(key.to_string(), f.to_json());
        for j in 0..f.params.len() {
            coef_rows
                .write_record([
                    key.to_string(),
                    f.names[j].clone(),
                    sig6(f.params[j]),
                    sig6(f.se_model(j)),
                    f.se_robust(j).map_or("NA".into(), sig6),
                    sig6(f.z_value(j)),
                    sig6(f.p_value(j)),
                ])
                .map_err(Error::from)?;
        }
        model_rows
            .write_record([
                key.to_string(),
                sig6(f.loglik),
                sig6(f.aic),
                sig6(f.bic),
                sig6(s),
                f.iterations.to_string(),
                f.converged.to_string(),
            ])
            .map_err(Error::from)?;
        Ok(())
    };
    for (key, f) in &fits {
        emit(key, f)?;
    }
    emit("cox", &cox_fit)?;

    em.write(
        "table2.csv",
        &coef_rows.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    em.write(
        "table3.csv",
        &model_rows.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    let fits_value = serde_json::Value::Object(fits_json.into_iter().collect());
    let mut bytes = serde_json::to_vec_pretty(&fits_value)?;
    bytes.push(b'\n');
    em.write("fits.json", &bytes)?;

    manifest.insert("aic".into(), serde_json::Value::Object(aic.into_iter().collect()));
    manifest.insert(
        "loglik".into(),
        serde_json::Value::Object(loglik.into_iter().collect()),
    );
    manifest.insert("ssr".into(), serde_json::Value::Object(ssr.into_iter().collect()));

    let (global, components) = stage("ph_test", ph_assumption_test(&cox_fit, &set.spells))?;
    manifest.insert(
        "ph_test".into(),
        json!({
            "statistic": global.statistic,
            "df": global.df,
            "p_value": global.p_value,
            "components": components.iter().map(|c| c.to_json()).collect::<Vec<_>>(),
        }),
    );
    manifest.insert(
        "cox".into(),
        json!({
            "aic_partial_likelihood": cox_fit.aic,
            "comparable_with_parametric_aic": false,
            "loglik": cox_fit.loglik,
        }),
    );
    fits.push(("cox", cox_fit));
    Ok(fits)
}

fn fit_regressor_matrix(f: &FitResult, spells: &[SpellRecord]) -> DMatrix<f64> {
    let covs = &f.spec.covariates;
    let mut x = DMatrix::zeros(spells.len(), covs.len());
    for (i, s) in spells.iter().enumerate() {
        for (j, c) in covs.iter().enumerate() {
            x[(i, j)] = c.value(s);
        }
    }
    x
}

fn write_residual_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
    fits: &[(&'static str, FitResult)],
) -> Result<()> {
    let spells = &set.spells;
    let mut table = csv::Writer::from_writer(Vec::new());
    table
        .write_record([
            "model", "kind", "mean", "median", "max", "min", "sd", "skewness", "kurtosis",
            "sum", "sum_sq_dev", "jarque_bera", "jb_p",
        ])
        .map_err(Error::from)?;
    let mut tests = BTreeMap::new();

    for key in ["lognormal", "lognormal_frailty"] {
        let f = &fits.iter().find(|(k, _)| *k == key).expect("study fit").1;
        let cs = stage("residuals", residuals(f, spells, ResidualKind::CoxSnell))?;
        let mg = stage("residuals", residuals(f, spells, ResidualKind::Martingale))?;
        let dev = stage("residuals", residuals(f, spells, ResidualKind::Deviance))?;
        let mut entry = BTreeMap::new();
        for set in [&cs, &mg, &dev] {
            let s = stage("residual_summary", residual_summary(set))?;
            entry.insert(format!("{}_summary", set.kind.name()), summary_json(&s));
            table
                .write_record([
                    key.to_string(),
                    set.kind.name().to_string(),
                    sig6(s.mean),
                    sig6(s.median),
                    sig6(s.max),
                    sig6(s.min),
                    sig6(s.sd),
                    if s.skewness.is_nan() { "NA".into() } else { sig6(s.skewness) },
                    if s.kurtosis.is_nan() { "NA".into() } else { sig6(s.kurtosis) },
                    sig6(s.sum),
                    sig6(s.sum_sq_dev),
                    s.jb.as_ref().map_or("NA".into(), |t| sig6(t.statistic)),
                    s.jb.as_ref().map_or("NA".into(), |t| sig6(t.p_value)),
                ])
                .map_err(Error::from)?;
        }
        let x = fit_regressor_matrix(f, spells);
        for (name, res) in [("bg_deviance", &dev), ("bg_cox_snell", &cs)] {
            let t = stage("bg_test", bg_serial_test(res, &x, 2))?;
            entry.insert(name.to_string(), t.to_json());
        }
        let lp = likelihood::linear_predictor(
            match f.spec.family {
                ModelFamily::Parametric(fam) => fam,
                ModelFamily::Cox => unreachable!("study residual battery is parametric"),
            },
            f.spec.frailty,
            f.spec.metric,
            &f.params,
            &likelihood::Design::parametric(spells, &f.spec.covariates)?,
        );
        let lp_mat = DMatrix::from_column_slice(lp.len(), 1, &lp);
        let (lm, scaled) = stage("bpg_test", bpg_hetero_test(&dev, &lp_mat))?;
        entry.insert("bpg_deviance".to_string(), json!({
            "lm": lm.to_json(),
            "scaled_ss": scaled.to_json(),
        }));
        tests.insert(key.to_string(), serde_json::Value::Object(entry.into_iter().collect()));

        if key == "lognormal" {
            let mut buf = Vec::new();
            write_residuals_csv(&mut buf, &[&cs, &mg, &dev])?;
            em.write("residuals.csv", &buf)?;
            let qq = stage("qq", qq_points(&dev))?;
            let mut qbuf = Vec::new();
            write_qq_csv(&mut qbuf, &qq)?;
            em.write("qq.csv", &qbuf)?;
        }
    }
    em.write(
        "table4.csv",
        &table.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    manifest.insert(
        "residual_tests".into(),
        serde_json::Value::Object(tests.into_iter().collect()),
    );
    Ok(())
}

fn write_peak_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
    fits: &[(&'static str, FitResult)],
) -> Result<()> {
    let spells = &set.spells;
    let covs = [
        Covariate::Recession,
        Covariate::PriceDecline,
        Covariate::InterestRate,
    ];
    let means: Vec<f64> = covs
        .iter()
        .map(|c| spells.iter().map(|s| c.value(s)).sum::<f64>() / spells.len() as f64)
        .collect();
    manifest.insert("mean_covariates".into(), json!(means));

    let mut peaks = BTreeMap::new();
    let mut curves = Vec::new();
    let grid = default_report_grid();
    for key in ["lognormal", "lognormal_frailty"] {
        let f = &fits.iter().find(|(k, _)| *k == key).expect("study fit").1;
        let (t_star, h_star) = stage("hazard_peak", estimate::hazard_peak(f, &means))?;
        peaks.insert(key.to_string(), json!({ "t": t_star, "h": h_star }));
        let mut points = Vec::with_capacity(grid.len());
        for &t in &grid {
            let h = stage("predict", estimate::predict(f, &means, t, PredictKind::Hazard))?;
            points.push(CurvePoint {
                time: t,
                value: h,
                std_err: 0.0,
            });
        }
        curves.push((key.to_string(), CurveSample { points }));
        if key == "lognormal" {
            let m = stage("predict", estimate::acceleration_multiplier(f, &means))?;
            manifest.insert("acceleration_multiplier".into(), json!({ "lognormal": m }));
        }
    }
    let rows: Vec<(String, &CurveSample)> =
        curves.iter().map(|(l, c)| (l.clone(), c)).collect();
    em.write("hazard_model.csv", &curve_csv(&rows)?)?;
    manifest.insert(
        "hazard_peak".into(),
        serde_json::Value::Object(peaks.into_iter().collect()),
    );
    Ok(())
}

fn write_strata_stage(
    em: &mut Emitter,
    manifest: &mut BTreeMap<String, serde_json::Value>,
    set: &SpellSet,
) -> Result<()> {
    let spells = &set.spells;
    // intercept-only fits per stratum: the grouping itself carries the
    // covariate information, and cell moments pin the within-cell hazards
    let base = ModelSpec::parametric(Family::LogNormal, Metric::Aft, Frailty::None, vec![])
        .without_robust();
    let grid = default_report_grid();
    let mut peak_map = BTreeMap::new();
    let mut all_rows: Vec<(String, CurveSample)> = Vec::new();
    let mut strata_info = Vec::new();

    for (file, plan) in [
        (
            "hazard_price_quartiles.csv",
            StratificationPlan {
                covariate: Covariate::PriceDecline,
                scheme: Scheme::Quartiles,
                factor: Some(Covariate::Recession),
            },
        ),
        (
            "hazard_rate_quartiles.csv",
            StratificationPlan {
                covariate: Covariate::InterestRate,
                scheme: Scheme::Quartiles,
                factor: None,
            },
        ),
    ] {
        let fits = stage("stratified_fits", stratified_fits(&base, spells, &plan))?;
        let mut converged: Vec<&StratumFit> = Vec::new();
        for sf in &fits {
            let status = match &sf.outcome {
                Ok(f) if f.converged => {
                    converged.push(sf);
                    "converged".to_string()
                }
                Ok(_) => "not_converged".to_string(),
                Err(e) => format!("failed: {e}"),
            };
            strata_info.push(json!({
                "plan": plan.covariate.name(),
                "stratum": sf.label,
                "n": sf.indices.len(),
                "status": status,
            }));
        }
        let ok_fits: Vec<StratumFit> = converged
            .iter()
            .map(|sf| StratumFit {
                label: format!("{}:{}", plan.covariate.name(), sf.label),
                indices: sf.indices.clone(),
                covariates: sf.covariates.clone(),
                mean_covariates: sf.mean_covariates.clone(),
                outcome: Ok(sf.outcome.as_ref().unwrap().clone()),
            })
            .collect();
        let family = stage("hazard_curve_family", hazard_curve_family(&ok_fits, &grid))?;
        let mut rows = Vec::new();
        for hc in &family {
            if let Some((t, h)) = hc.peak {
                peak_map.insert(hc.label.clone(), json!({ "t": t, "h": h }));
            }
            rows.push((hc.label.clone(), hc.curve.clone()));
        }
        let refs: Vec<(String, &CurveSample)> =
            rows.iter().map(|(l, c)| (l.clone(), c)).collect();
        em.write(file, &curve_csv(&refs)?)?;
        all_rows.extend(rows);
    }
    manifest.insert(
        "stratified_peaks".into(),
        serde_json::Value::Object(peak_map.into_iter().collect()),
    );
    manifest.insert("strata".into(), json!(strata_info));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::YearMonth;

    fn toy_spells(n: usize) -> Vec<SpellRecord> {
        (0..n)
            .map(|i| SpellRecord {
                start: YearMonth::from_index(21000 + 8 * i as i64),
                duration: 1 + (i % 9) as u32,
                event: 1,
                recession: i % 3 == 0,
                price_decline: 0.5 + (i % 13) as f64 * 0.45,
                interest_rate: 1.0 + (i % 11) as f64 * 0.6,
            })
            .collect()
    }

    #[test]
    fn quartile_strata_partition() {
        let sp = toy_spells(83);
        let plan = StratificationPlan {
            covariate: Covariate::PriceDecline,
            scheme: Scheme::Quartiles,
            factor: Some(Covariate::Recession),
        };
        let groups = strata_indices(&sp, &plan).unwrap();
        assert_eq!(groups.len(), 8);
        let total: usize = groups.iter().map(|(_, idx)| idx.len()).sum();
        assert_eq!(total, 83);
        let mut seen = vec![false; 83];
        for (_, idx) in &groups {
            for &i in idx {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
    }

    #[test]
    fn single_stratum_matches_unstratified() {
        let sp = toy_spells(60);
        let spec = ModelSpec::parametric(
            Family::LogNormal,
            Metric::Aft,
            Frailty::None,
            vec![Covariate::PriceDecline],
        )
        .without_robust();
        let plan = StratificationPlan {
            covariate: Covariate::PriceDecline,
            scheme: Scheme::Breakpoints(vec![]),
            factor: None,
        };
        let strata = stratified_fits(&spec, &sp, &plan).unwrap();
        assert_eq!(strata.len(), 1);
        let whole = fit(&spec, &sp).unwrap();
        let got = strata[0].outcome.as_ref().unwrap();
        assert!((got.loglik - whole.loglik).abs() < 1e-10);
    }

    #[test]
    fn constant_covariate_is_dropped_per_stratum() {
        let sp = toy_spells(90);
        let spec = ModelSpec::parametric(
            Family::LogNormal,
            Metric::Aft,
            Frailty::None,
            vec![Covariate::Recession, Covariate::PriceDecline],
        )
        .without_robust();
        let plan = StratificationPlan {
            covariate: Covariate::PriceDecline,
            scheme: Scheme::Quartiles,
            factor: Some(Covariate::Recession),
        };
        let strata = stratified_fits(&spec, &sp, &plan).unwrap();
        for sf in &strata {
            assert!(
                !sf.covariates.contains(&Covariate::Recession),
                "recession must drop inside a recession-factor stratum"
            );
        }
    }

    #[test]
    fn sig6_formats() {
        assert_eq!(sig6(2.596491228), "2.59649");
        assert_eq!(sig6(0.00037), "0.000370000");
        assert_eq!(sig6(621.54), "621.540");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-1.5), "-1.50000");
    }

    #[test]
    fn curve_family_marks_flat_hazard() {
        let sp = toy_spells(70);
        let spec = ModelSpec::parametric(Family::Exponential, Metric::Ph, Frailty::None, vec![])
            .without_robust();
        let plan = StratificationPlan {
            covariate: Covariate::PriceDecline,
            scheme: Scheme::Breakpoints(vec![]),
            factor: None,
        };
        let strata = stratified_fits(&spec, &sp, &plan).unwrap();
        let fam = hazard_curve_family(&strata, &default_report_grid()).unwrap();
        assert_eq!(fam.len(), 1);
        assert!(fam[0].peak.is_none());
        let vals: Vec<f64> = fam[0].curve.points.iter().map(|p| p.value).collect();
        let spread = vals
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
            - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-12, "exponential hazard must be flat");
    }
}
