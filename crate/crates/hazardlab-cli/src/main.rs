//! Command-line front end: spell extraction, descriptive tables, survivor
//! curves, model fits, diagnostics, model comparison, and the full study
//! bundle. Exit codes: 0 success, 1 usage, 2 data problem, 3 fit failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hazardlab::data::{
    self, describe_spells, welch_t_test, RecessionRule, SpellRecord, SpellSet,
};
use hazardlab::diagnostics::{
    bg_serial_test, bpg_hetero_test, qq_points, residual_summary, residuals, write_qq_csv,
    write_residuals_csv, ResidualKind,
};
use hazardlab::dist::Family;
use hazardlab::estimate::{
    self, likelihood, Covariate, FitResult, Frailty, LinkSpec, LinkedParam, Metric,
    ModelFamily, ModelSpec, Ties,
};
use hazardlab::inference::{information_criteria, lr_test, ph_assumption_test, ssr_goodness};
use hazardlab::nonparametric::kaplan_meier_stratum;
use hazardlab::report::{run_study, sig6, StudyConfig};
use hazardlab::{Error, Result};

const INPUT_FORMATS: &str = "\
Input file formats:
  --prices      CSV, header exactly `date,real_price,long_rate_pct`;
                date is YYYY-MM, prices are positive reals, rates in percent.
  --recessions  CSV, header exactly `begin,end`; one row per contraction,
                both bounds inclusive YYYY-MM months, intervals disjoint.";

#[derive(Parser)]
#[command(
    name = "hazardlab",
    version,
    about = "Duration analysis of consecutive monthly decline spells",
    long_about = "Duration analysis of consecutive monthly decline spells.\n\
        Spells are maximal runs of strictly negative monthly log returns of a\n\
        real price index; their lengths are modeled with nonparametric and\n\
        parametric duration tools.\n\n\
        The environment variable HAZARDLAB_SEED (unsigned 64-bit) fixes the\n\
        seed used by simulation-backed checks."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract decline spells and write the spell table as CSV
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: CSV with header \
        `start,duration,event,recession,price_decline_pct,interest_rate_pct`;\n\
        start is YYYY-MM, duration in months, event is 1 unless censored,\n\
        recession is 0/1, the last two columns are percentages."))]
    Spells(SpellsArgs),
    /// Group statistics, mean-duration test, quartile counts, histogram trend
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: a `group,n,mean,\
        variance,min,max` table (6 significant digits) on the output stream,\n\
        or a full-precision JSON document with --json."))]
    Describe(DescribeArgs),
    /// Kaplan-Meier survivor curves with Greenwood standard errors
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: CSV with header \
        `time,estimate,std_err,stratum`, strata `all`, `recession`,\n\
        `no_recession`; full precision."))]
    Km(KmArgs),
    /// Fit one duration model and print the result as JSON
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: one JSON document \
        with the model specification, per-coefficient estimates and standard\n\
        errors, ancillary parameters, log-likelihood, AIC/BIC, and convergence\n\
        state; full precision."))]
    Fit(FitArgs),
    /// Residual battery and specification tests for one fitted model
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: JSON with residual \
        summaries, serial-correlation and heteroskedasticity tests, and the\n\
        fit's squared-residual total on the output stream; with --out DIR also\n\
        `residuals.csv` (header `spell_start,kind,value`) and `qq.csv`\n\
        (header `theoretical,empirical`)."))]
    Diagnose(DiagnoseArgs),
    /// Likelihood-ratio comparison of a nested model pair
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: JSON with both \
        fits' information criteria and the likelihood-ratio test."))]
    Compare(CompareArgs),
    /// Run the full study and write its deterministic bundle
    #[command(after_help = format!("{INPUT_FORMATS}\n\nOutput: a directory of \
        CSV tables and curve files plus `manifest.json`; repeated runs over\n\
        identical inputs produce byte-identical files."))]
    Study(StudyArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Monthly price series CSV (see file formats below)
    #[arg(long, value_name = "FILE")]
    prices: PathBuf,
    /// Recession calendar CSV (see file formats below)
    #[arg(long, value_name = "FILE")]
    recessions: PathBuf,
    /// Spell recession tag: any | majority | all overlapping months
    #[arg(long, value_name = "RULE", default_value = "any")]
    recession_rule: String,
}

#[derive(Args)]
struct ModelArgs {
    /// Distribution family: exponential | weibull | gamma | gengamma | lognormal | cox
    #[arg(long, value_name = "NAME", default_value = "lognormal")]
    family: String,
    /// Covariate metric: aft | ph (ignored for cox)
    #[arg(long, value_name = "METRIC", default_value = "aft")]
    metric: String,
    /// Shared frailty: none | gamma | invgauss
    #[arg(long, value_name = "KIND", default_value = "none")]
    frailty: String,
    /// Covariates, comma separated: recession, price_decline, interest_rate
    #[arg(
        long,
        value_name = "LIST",
        value_delimiter = ',',
        default_value = "recession,price_decline,interest_rate"
    )]
    covariates: Vec<String>,
    /// Report robust (sandwich) standard errors [default]
    #[arg(long, overrides_with = "no_robust")]
    robust: bool,
    /// Report model-based standard errors only
    #[arg(long)]
    no_robust: bool,
    /// Tie handling for cox: efron | breslow
    #[arg(long, value_name = "RULE", default_value = "efron")]
    ties: String,
    /// Regress this ancillary parameter on covariates: rate | sigma | shape
    #[arg(long, value_name = "PARAM")]
    link_param: Option<String>,
    /// Covariates for --link-param, comma separated
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    link_covariates: Option<Vec<String>>,
    /// Gradient max-norm convergence tolerance
    #[arg(long, value_name = "TOL", default_value_t = 1e-8)]
    tolerance: f64,
    /// Newton iteration cap
    #[arg(long, value_name = "N", default_value_t = 100)]
    max_iterations: usize,
}

#[derive(Args)]
struct SpellsArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Write the CSV here instead of the output stream
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Emit one full-precision JSON document instead of the table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct KmArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Write the CSV here instead of the output stream
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Breusch-Godfrey lag order
    #[arg(long, value_name = "N", default_value_t = 2)]
    bg_lags: usize,
    /// Also write residuals.csv and qq.csv into this directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Nested family (defaults to the full model's family)
    #[arg(long, value_name = "NAME")]
    nested_family: Option<String>,
    /// Nested frailty (defaults to none)
    #[arg(long, value_name = "KIND", default_value = "none")]
    nested_frailty: String,
    /// Nested covariates (defaults to the full model's)
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    nested_covariates: Option<Vec<String>>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output directory for the bundle
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Epanechnikov bandwidth for the smoothed hazard (months)
    #[arg(long, value_name = "W", default_value_t = 1.5)]
    bandwidth: f64,
    /// Gradient max-norm convergence tolerance for every fit
    #[arg(long, value_name = "TOL", default_value_t = 1e-8)]
    tolerance: f64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonConvergence { .. } | Error::SingularHessian { .. } => 3,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Spells(a) => spells_cmd(a),
        Cmd::Describe(a) => describe_cmd(a),
        Cmd::Km(a) => km_cmd(a),
        Cmd::Fit(a) => fit_cmd(a),
        Cmd::Diagnose(a) => diagnose_cmd(a),
        Cmd::Compare(a) => compare_cmd(a),
        Cmd::Study(a) => study_cmd(a),
    }
}

fn load_spells(input: &InputArgs) -> CliResult<SpellSet> {
    let rule: RecessionRule = usage(input.recession_rule.parse())?;
    let series = data::load_series(&input.prices)?;
    let calendar = data::load_recessions(&input.recessions)?;
    let returns = data::compute_returns(&series)?;
    Ok(data::extract_spells(&returns, &calendar, rule)?)
}

/// Resolve the model flags into a specification; every inconsistency is a
/// usage error, caught before any input file is touched.
fn build_spec(m: &ModelArgs) -> CliResult<ModelSpec> {
    let covariates: Vec<Covariate> = usage(
        m.covariates
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| s.parse())
            .collect::<Result<Vec<_>>>(),
    )?;
    let mut spec = if m.family == "cox" {
        let mut s = ModelSpec::cox(covariates);
        s.ties = usage(Ties::from_str(&m.ties))?;
        s
    } else {
        let family: Family = usage(m.family.parse())?;
        let metric: Metric = usage(m.metric.parse())?;
        let frailty: Frailty = usage(m.frailty.parse())?;
        ModelSpec::parametric(family, metric, frailty, covariates)
    };
    if let Some(param) = &m.link_param {
        let param: LinkedParam = usage(param.parse())?;
        let link_covs: Vec<Covariate> = usage(
            m.link_covariates
                .clone()
                .unwrap_or_default()
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| s.parse())
                .collect::<Result<Vec<_>>>(),
        )?;
        spec = spec.with_link(LinkSpec {
            param,
            covariates: link_covs,
        });
    } else if m.link_covariates.is_some() {
        return Err(Failure::Usage(
            "--link-covariates needs --link-param".into(),
        ));
    }
    if m.no_robust {
        spec = spec.without_robust();
    }
    spec.tolerance = m.tolerance;
    spec.max_iterations = m.max_iterations;
    usage(spec.validate())?;
    Ok(spec)
}

fn write_out(out: Option<&PathBuf>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(Error::from)?,
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(Error::from)?,
    }
    Ok(())
}

fn spells_cmd(a: SpellsArgs) -> CliResult<()> {
    let set = load_spells(&a.input)?;
    let mut buf = Vec::new();
    data::write_spells_csv(&set.spells, &mut buf)?;
    write_out(a.out.as_ref(), &buf)?;
    eprintln!(
        "{} spells, {} negative months, {} joint recession months",
        set.spells.len(),
        set.negative_months,
        set.joint_recession_months
    );
    Ok(())
}

fn describe_cmd(a: DescribeArgs) -> CliResult<()> {
    let set = load_spells(&a.input)?;
    let spells = &set.spells;
    let rec_idx: Vec<usize> = (0..spells.len()).filter(|&i| spells[i].recession).collect();
    let norec_idx: Vec<usize> = (0..spells.len()).filter(|&i| !spells[i].recession).collect();
    let grouping = vec![
        ("all".to_string(), (0..spells.len()).collect::<Vec<_>>()),
        ("recession".to_string(), rec_idx.clone()),
        ("no_recession".to_string(), norec_idx.clone()),
    ];
    let summary = describe_spells(spells, Some(&grouping))?;
    let dur = |idx: &[usize]| -> Vec<f64> {
        idx.iter().map(|&i| f64::from(spells[i].duration)).collect()
    };
    let (t, df, p) = welch_t_test(&dur(&rec_idx), &dur(&norec_idx))?;
    let mut qcounts = BTreeMap::new();
    for cov in [Covariate::PriceDecline, Covariate::InterestRate] {
        let xs: Vec<f64> = spells.iter().map(|s| cov.value(s)).collect();
        let breaks = data::quartile_breaks(&xs)?;
        let mut counts = [0usize; 4];
        for &x in &xs {
            counts[data::quartile_of(x, &breaks) - 1] += 1;
        }
        qcounts.insert(cov.name().to_string(), counts.to_vec());
    }
    let (coef, r2) = data::cubic_trend_fit(&summary.histogram)?;

    if a.json {
        let doc = json!({
            "groups": summary.groups.iter().map(|g| json!({
                "label": g.label,
                "n": g.n,
                "mean": g.mean,
                "variance": g.variance,
                "min": g.min,
                "max": g.max,
            })).collect::<Vec<_>>(),
            "histogram": summary.histogram.iter()
                .map(|(k, v)| (format!("{k:02}"), *v))
                .collect::<BTreeMap<String, usize>>(),
            "welch": { "t": t, "df": df, "p": p },
            "quartile_counts": qcounts,
            "cubic_trend": { "coefficients": coef.to_vec(), "r_squared": r2 },
            "negative_months": set.negative_months,
            "joint_recession_months": set.joint_recession_months,
        });
        println!("{}", serde_json::to_string_pretty(&doc).map_err(Error::from)?);
        return Ok(());
    }
    let mut out = String::from("group,n,mean,variance,min,max\n");
    for g in &summary.groups {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            g.label,
            g.n,
            sig6(g.mean),
            g.variance.map_or("NA".into(), sig6),
            g.min,
            g.max
        ));
    }
    print!("{out}");
    eprintln!(
        "Welch t = {} df = {df} p = {}; quartiles {:?}",
        sig6(t),
        sig6(p),
        qcounts
    );
    Ok(())
}

fn km_cmd(a: KmArgs) -> CliResult<()> {
    let set = load_spells(&a.input)?;
    let spells = &set.spells;
    let rec = |s: &SpellRecord| s.recession;
    let norec = |s: &SpellRecord| !s.recession;
    let mut buf = String::from("time,estimate,std_err,stratum\n");
    for (label, filter) in [
        ("all", None::<&dyn Fn(&SpellRecord) -> bool>),
        ("recession", Some(&rec)),
        ("no_recession", Some(&norec)),
    ] {
        let curve = kaplan_meier_stratum(spells, label, filter)?;
        for p in &curve.points {
            buf.push_str(&format!("{},{},{},{label}\n", p.time, p.value, p.std_err));
        }
    }
    write_out(a.out.as_ref(), buf.as_bytes())
}

fn fit_cmd(a: FitArgs) -> CliResult<()> {
    let spec = build_spec(&a.model)?;
    let set = load_spells(&a.input)?;
    let fit = estimate::fit(&spec, &set.spells)?;
    println!("{}", fit.to_json_string().map_err(Error::from)?);
    Ok(())
}

fn linear_predictor_of(fit: &FitResult, spells: &[SpellRecord]) -> Result<Vec<f64>> {
    match fit.spec.family {
        ModelFamily::Parametric(fam) => Ok(likelihood::linear_predictor(
            fam,
            fit.spec.frailty,
            fit.spec.metric,
            &fit.params,
            &likelihood::Design::parametric(spells, &fit.spec.covariates)?,
        )),
        ModelFamily::Cox => Ok(spells
            .iter()
            .map(|s| {
                fit.spec
                    .covariates
                    .iter()
                    .zip(fit.params.iter())
                    .map(|(c, b)| c.value(s) * b)
                    .sum()
            })
            .collect()),
    }
}

fn diagnose_cmd(a: DiagnoseArgs) -> CliResult<()> {
    let spec = build_spec(&a.model)?;
    let set = load_spells(&a.input)?;
    let fit = estimate::fit(&spec, &set.spells)?;
    let spells = &set.spells;
    let cs = residuals(&fit, spells, ResidualKind::CoxSnell)?;
    let mg = residuals(&fit, spells, ResidualKind::Martingale)?;
    let dev = residuals(&fit, spells, ResidualKind::Deviance)?;

    let mut x = nalgebra::DMatrix::zeros(spells.len(), spec.covariates.len());
    for (i, s) in spells.iter().enumerate() {
        for (j, c) in spec.covariates.iter().enumerate() {
            x[(i, j)] = c.value(s);
        }
    }
    let lp = linear_predictor_of(&fit, spells)?;
    let lp_mat = nalgebra::DMatrix::from_column_slice(lp.len(), 1, &lp);

    let mut doc = BTreeMap::<String, serde_json::Value>::new();
    for set in [&cs, &mg, &dev] {
        let s = residual_summary(set)?;
        doc.insert(
            format!("{}_summary", set.kind.name()),
            json!({
                "n": s.n, "mean": s.mean, "median": s.median, "max": s.max,
                "min": s.min, "sd": s.sd,
                "skewness": if s.skewness.is_nan() { serde_json::Value::Null } else { json!(s.skewness) },
                "kurtosis": if s.kurtosis.is_nan() { serde_json::Value::Null } else { json!(s.kurtosis) },
                "jarque_bera": s.jb.as_ref().map(|t| t.to_json()),
            }),
        );
    }
    for (name, res) in [("bg_deviance", &dev), ("bg_cox_snell", &cs)] {
        doc.insert(
            name.into(),
            bg_serial_test(res, &x, a.bg_lags)?.to_json(),
        );
    }
    let (lm, scaled) = bpg_hetero_test(&dev, &lp_mat)?;
    doc.insert(
        "bpg_deviance".into(),
        json!({ "lm": lm.to_json(), "scaled_ss": scaled.to_json() }),
    );
    doc.insert("ssr".into(), json!(ssr_goodness(&fit, spells)?));
    if fit.spec.family == ModelFamily::Cox {
        let (global, components) = ph_assumption_test(&fit, spells)?;
        doc.insert(
            "proportional_hazards".into(),
            json!({
                "global": global.to_json(),
                "components": components.iter().map(|c| c.to_json()).collect::<Vec<_>>(),
            }),
        );
    }

    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let mut buf = Vec::new();
        write_residuals_csv(&mut buf, &[&cs, &mg, &dev])?;
        std::fs::write(dir.join("residuals.csv"), &buf).map_err(Error::from)?;
        let qq = qq_points(&dev)?;
        let mut qbuf = Vec::new();
        write_qq_csv(&mut qbuf, &qq)?;
        std::fs::write(dir.join("qq.csv"), &qbuf).map_err(Error::from)?;
    }
    let doc = serde_json::Value::Object(doc.into_iter().collect());
    println!("{}", serde_json::to_string_pretty(&doc).map_err(Error::from)?);
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> CliResult<()> {
    let full_spec = build_spec(&a.model)?;
    if full_spec.family == ModelFamily::Cox {
        return Err(Failure::Usage(
            "compare needs parametric models on both sides".into(),
        ));
    }
    let nested_args = ModelArgs {
        family: a
            .nested_family
            .clone()
            .unwrap_or_else(|| a.model.family.clone()),
        frailty: a.nested_frailty.clone(),
        covariates: a
            .nested_covariates
            .clone()
            .unwrap_or_else(|| a.model.covariates.clone()),
        link_param: None,
        link_covariates: None,
        ..copy_model_args(&a.model)
    };
    let nested_spec = build_spec(&nested_args)?;
    let set = load_spells(&a.input)?;
    let full = estimate::fit(&full_spec, &set.spells)?;
    let nested = estimate::fit(&nested_spec, &set.spells)?;
    let df = full
        .k_params
        .checked_sub(nested.k_params)
        .filter(|&d| d > 0)
        .ok_or_else(|| {
            Failure::Usage("the nested model must have fewer parameters".into())
        })?;
    let test = lr_test(&nested, &full, df)?;
    let (aic_f, bic_f) = information_criteria(&full)?;
    let (aic_n, bic_n) = information_criteria(&nested)?;
    let doc = json!({
        "full": { "model": spec_label(&full.spec), "loglik": full.loglik,
                  "aic": aic_f, "bic": bic_f, "k": full.k_params },
        "nested": { "model": spec_label(&nested.spec), "loglik": nested.loglik,
                    "aic": aic_n, "bic": bic_n, "k": nested.k_params },
        "likelihood_ratio": test.to_json(),
    });
    println!("{}", serde_json::to_string_pretty(&doc).map_err(Error::from)?);
    Ok(())
}

fn spec_label(spec: &ModelSpec) -> String {
    let mut label = spec.family.name().to_string();
    match spec.frailty {
        Frailty::None => {}
        Frailty::Gamma => label.push_str(" + gamma frailty"),
        Frailty::InverseGaussian => label.push_str(" + invgauss frailty"),
    }
    label
}

fn copy_model_args(m: &ModelArgs) -> ModelArgs {
    ModelArgs {
        family: m.family.clone(),
        metric: m.metric.clone(),
        frailty: m.frailty.clone(),
        covariates: m.covariates.clone(),
        robust: m.robust,
        no_robust: m.no_robust,
        ties: m.ties.clone(),
        link_param: m.link_param.clone(),
        link_covariates: m.link_covariates.clone(),
        tolerance: m.tolerance,
        max_iterations: m.max_iterations,
    }
}

fn study_cmd(a: StudyArgs) -> CliResult<()> {
    let rule: RecessionRule = usage(a.input.recession_rule.parse())?;
    let mut config = StudyConfig::new(
        a.input.prices.clone(),
        a.input.recessions.clone(),
        a.out.clone(),
    );
    config.rule = rule;
    config.bandwidth = a.bandwidth;
    config.tolerance = a.tolerance;
    let bundle = run_study(&config)?;
    eprintln!("wrote {} files to {}", bundle.files.len(), a.out.display());
    Ok(())
}
