//! Residuals of fitted duration models (Cox-Snell, martingale-like,
//! deviance) and the residual-based test battery: descriptive statistics
//! with Jarque-Bera, Breusch-Godfrey serial correlation, Breusch-Pagan-
//! Godfrey heteroskedasticity, and normal Q-Q data.

use nalgebra::{DMatrix, DVector};

use crate::data::{SpellRecord, YearMonth};
use crate::error::{Error, Result};
use crate::estimate::{cox, likelihood, FitResult, ModelFamily};
use crate::inference::TestResult;
use crate::special;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualKind {
    CoxSnell,
    Martingale,
    Deviance,
}

impl ResidualKind {
    pub fn name(self) -> &'static str {
        match self {
            ResidualKind::CoxSnell => "cox_snell",
            ResidualKind::Martingale => "martingale",
            ResidualKind::Deviance => "deviance",
        }
    }
}

impl std::str::FromStr for ResidualKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cox_snell" => Ok(Self::CoxSnell),
            "martingale" => Ok(Self::Martingale),
            "deviance" => Ok(Self::Deviance),
            other => Err(Error::Data(format!(
                "unknown residual kind {other:?}, want cox_snell|martingale|deviance"
            ))),
        }
    }
}

/// Residual values aligned with the spell order (chronological by start).
#[derive(Debug, Clone)]
pub struct ResidualSet {
    pub kind: ResidualKind,
    pub values: Vec<f64>,
    pub starts: Vec<YearMonth>,
}

fn sign(m: f64) -> f64 {
    if m > 0.0 {
        1.0
    } else if m < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cox-Snell, martingale-like, or deviance residuals of a converged fit.
pub fn residuals(
    fit: &FitResult,
    spells: &[SpellRecord],
    kind: ResidualKind,
) -> Result<ResidualSet> {
    if !fit.converged {
        return Err(Error::NonConvergence {
            iterations: fit.iterations,
            grad_norm: fit.grad_max_norm,
        });
    }
    if fit.spec.link.is_some() {
        return Err(Error::Unsupported(
            "residuals with linked parameters are not supported".into(),
        ));
    }
    let (cs, d): (Vec<f64>, Vec<f64>) = match fit.spec.family {
        ModelFamily::Cox => {
            let design = likelihood::Design::cox(spells, &fit.spec.covariates)?;
            (cox::cox_snell_cox(&design, &fit.params), design.d)
        }
        ModelFamily::Parametric(family) => {
            let design = likelihood::Design::parametric(spells, &fit.spec.covariates)?;
            (
                likelihood::cox_snell(family, fit.spec.frailty, fit.spec.metric, &fit.params, &design),
                design.d,
            )
        }
    };
    let starts: Vec<YearMonth> = spells.iter().map(|s| s.start).collect();
    let values = match kind {
        ResidualKind::CoxSnell => cs,
        ResidualKind::Martingale => cs.iter().zip(&d).map(|(r, d)| d - r).collect(),
        ResidualKind::Deviance => {
            let mut out = Vec::with_capacity(cs.len());
            for (i, (&r, &di)) in cs.iter().zip(&d).enumerate() {
                let m = di - r;
                let inner = if di > 0.0 {
                    let dm = di - m;
                    if dm <= 0.0 {
                        return Err(Error::Data(format!(
                            "deviance residual undefined for the spell starting {}: d - m = {dm}",
                            starts[i]
                        )));
                    }
                    m + di * dm.ln()
                } else {
                    m
                };
                out.push(sign(m) * (-2.0 * inner).max(0.0).sqrt());
            }
            out
        }
    };
    Ok(ResidualSet {
        kind,
        values,
        starts,
    })
}

/// Descriptive statistics of a residual sequence; skewness and kurtosis use
/// the population normalization, kurtosis is non-excess.
#[derive(Debug, Clone)]
pub struct ResidualSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    pub sd: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub sum: f64,
    pub sum_sq_dev: f64,
    /// Jarque-Bera normality test; absent when the sample is constant.
    pub jb: Option<TestResult>,
}

pub fn residual_summary(res: &ResidualSet) -> Result<ResidualSummary> {
    let x = &res.values;
    let n = x.len();
    if n < 8 {
        return Err(Error::Data(format!(
            "the residual summary needs at least 8 values, got {n}"
        )));
    }
    let nf = n as f64;
    let sum: f64 = x.iter().sum();
    let mean = sum / nf;
    let mut sorted = x.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let sum_sq_dev: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let sd = (sum_sq_dev / (nf - 1.0)).sqrt();
    let sdp = (sum_sq_dev / nf).sqrt();
    let (skewness, kurtosis, jb) = if sdp > 0.0 {
        let skew = x.iter().map(|v| ((v - mean) / sdp).powi(3)).sum::<f64>() / nf;
        let kurt = x.iter().map(|v| ((v - mean) / sdp).powi(4)).sum::<f64>() / nf;
        let stat = nf / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
        let jb = TestResult {
            name: "jarque_bera".into(),
            statistic: stat,
            df: 2,
            p_value: special::chi2_sf(stat, 2.0)?,
        };
        (skew, kurt, Some(jb))
    } else {
        (f64::NAN, f64::NAN, None)
    };
    Ok(ResidualSummary {
        n,
        mean,
        median,
        max: sorted[n - 1],
        min: sorted[0],
        sd,
        skewness,
        kurtosis,
        sum,
        sum_sq_dev,
        jb,
    })
}

struct Ols {
    r2: f64,
    ess: f64,
}

/// Least-squares fit with an explicit full-rank check.
fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<Ols> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < x.ncols() {
        return Err(Error::Data(
            "the auxiliary regression is rank deficient".into(),
        ));
    }
    let coef = svd
        .solve(y, tol)
        .map_err(|e| Error::Data(format!("least squares failed: {e}")))?;
    let fitted = x * coef;
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    if tss <= 0.0 {
        return Err(Error::Data(
            "the auxiliary regression response is constant".into(),
        ));
    }
    let rss: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let ess: f64 = fitted.iter().map(|v| (v - ybar).powi(2)).sum();
    Ok(Ols {
        r2: 1.0 - rss / tss,
        ess,
    })
}

/// Breusch-Godfrey serial-correlation LM test: residuals regressed on the
/// given regressors (intercept added here) plus `lags` lagged residuals with
/// zero-padded pre-sample values; n R-squared is chi-square at `lags` df.
pub fn bg_serial_test(
    res: &ResidualSet,
    regressors: &DMatrix<f64>,
    lags: usize,
) -> Result<TestResult> {
    let n = res.values.len();
    if lags == 0 {
        return Err(Error::Data("the serial test needs at least one lag".into()));
    }
    if regressors.nrows() != n {
        return Err(Error::Data(format!(
            "regressor rows {} do not match residual count {n}",
            regressors.nrows()
        )));
    }
    if n <= lags + regressors.ncols() + 1 {
        return Err(Error::Data(format!(
            "the serial test needs n > lags + regressors + 1, got n={n}"
        )));
    }
    let m = regressors.ncols();
    let mut x = DMatrix::zeros(n, 1 + m + lags);
    let y = DVector::from_column_slice(&res.values);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 0..m {
            x[(i, 1 + j)] = regressors[(i, j)];
        }
        for l in 1..=lags {
            x[(i, m + l)] = if i >= l { res.values[i - l] } else { 0.0 };
        }
    }
    let fit = ols(&y, &x)?;
    let statistic = n as f64 * fit.r2;
    Ok(TestResult {
        name: "breusch_godfrey".into(),
        statistic,
        df: lags,
        p_value: special::chi2_sf(statistic, lags as f64)?,
    })
}

/// Breusch-Pagan-Godfrey heteroskedasticity test of squared residuals on the
/// given regressors (intercept added here). Returns the LM variant
/// (n R-squared, chi-square at the regressor count) and the scaled
/// explained-sum-of-squares variant.
pub fn bpg_hetero_test(
    res: &ResidualSet,
    regressors: &DMatrix<f64>,
) -> Result<(TestResult, TestResult)> {
    let n = res.values.len();
    if regressors.nrows() != n {
        return Err(Error::Data(format!(
            "regressor rows {} do not match residual count {n}",
            regressors.nrows()
        )));
    }
    let m = regressors.ncols();
    if n <= m + 1 {
        return Err(Error::Data(format!(
            "the heteroskedasticity test needs n > regressors + 1, got n={n}"
        )));
    }
    let u2: Vec<f64> = res.values.iter().map(|v| v * v).collect();
    let y = DVector::from_column_slice(&u2);
    let mut x = DMatrix::zeros(n, 1 + m);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 0..m {
            x[(i, 1 + j)] = regressors[(i, j)];
        }
    }
    let fit = ols(&y, &x)?;
    let lm_stat = n as f64 * fit.r2;
    let sigma2 = u2.iter().sum::<f64>() / n as f64;
    let ss_stat = fit.ess / (2.0 * sigma2 * sigma2);
    Ok((
        TestResult {
            name: "breusch_pagan_godfrey".into(),
            statistic: lm_stat,
            df: m,
            p_value: special::chi2_sf(lm_stat, m as f64)?,
        },
        TestResult {
            name: "scaled_explained_ss".into(),
            statistic: ss_stat,
            df: m,
            p_value: special::chi2_sf(ss_stat, m as f64)?,
        },
    ))
}

/// Ordered residuals paired with standard-normal quantiles at
/// (i - 0.5)/n positions.
pub fn qq_points(res: &ResidualSet) -> Result<Vec<(f64, f64)>> {
    let n = res.values.len();
    if n < 2 {
        return Err(Error::Data("a Q-Q plot needs at least two values".into()));
    }
    let mut sorted = res.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let q = special::std_normal_quantile((i as f64 + 0.5) / n as f64)?;
            Ok((q, v))
        })
        .collect()
}

/// Residual CSV rows: `spell_start,kind,value`.
pub fn write_residuals_csv<W: std::io::Write>(w: W, sets: &[&ResidualSet]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["spell_start", "kind", "value"])?;
    for set in sets {
        for (start, v) in set.starts.iter().zip(&set.values) {
            wtr.write_record([start.to_string(), set.kind.name().to_string(), format!("{v}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Q-Q CSV rows: `theoretical,empirical`.
pub fn write_qq_csv<W: std::io::Write>(w: W, points: &[(f64, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["theoretical", "empirical"])?;
    for (t, e) in points {
        wtr.write_record([format!("{t}"), format!("{e}")])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Family;
    use crate::estimate::{fit_mle, Covariate, Frailty, Metric, ModelSpec};

    fn toy_spells(n: usize) -> Vec<SpellRecord> {
        (0..n)
            .map(|i| SpellRecord {
                start: YearMonth::from_index(23000 + 9 * i as i64),
                duration: 1 + (i % 8) as u32,
                event: u8::from(i % 11 != 10),
                recession: i % 2 == 1,
                price_decline: 1.0 + (i % 4) as f64 * 0.9,
                interest_rate: 2.0 + (i % 6) as f64 * 0.3,
            })
            .collect()
    }

    fn toy_set(values: Vec<f64>) -> ResidualSet {
        let starts = (0..values.len())
            .map(|i| YearMonth::from_index(24000 + i as i64))
            .collect();
        ResidualSet {
            kind: ResidualKind::Deviance,
            values,
            starts,
        }
    }

    #[test]
    fn martingale_is_event_minus_cox_snell() {
        let sp = toy_spells(40);
        let fit = fit_mle(
            &ModelSpec::parametric(
                Family::LogNormal,
                Metric::Aft,
                Frailty::None,
                vec![Covariate::Recession],
            )
            .without_robust(),
            &sp,
        )
        .unwrap();
        let cs = residuals(&fit, &sp, ResidualKind::CoxSnell).unwrap();
        let mg = residuals(&fit, &sp, ResidualKind::Martingale).unwrap();
        for (i, s) in sp.iter().enumerate() {
            assert_eq!(mg.values[i], f64::from(s.event) - cs.values[i]);
            assert!(cs.values[i] >= 0.0);
            assert!(mg.values[i] <= 1.0);
        }
    }

    #[test]
    fn deviance_formula_spot_values() {
        // r = 1, d = 1 gives m = 0 and deviance 0
        // r = 0.5, d = 0 gives m = -0.5 and deviance -1
        let inner0 = 0.0f64 + 1.0 * (1.0f64 - 0.0).ln();
        assert_eq!(inner0, 0.0);
        let m = -0.5;
        let dev = sign(m) * (-2.0 * m).sqrt();
        assert!((dev + 1.0).abs() < 1e-15);
    }

    #[test]
    fn summary_of_known_sample() {
        let set = toy_set(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let s = residual_summary(&set).unwrap();
        assert!((s.mean - 4.5).abs() < 1e-12);
        assert!((s.median - 4.5).abs() < 1e-12);
        assert_eq!(s.max, 8.0);
        assert_eq!(s.min, 1.0);
        assert!(s.skewness.abs() < 1e-12);
        assert!(s.jb.is_some());
    }

    #[test]
    fn constant_sample_has_no_jb() {
        let set = toy_set(vec![2.0; 10]);
        let s = residual_summary(&set).unwrap();
        assert!(s.skewness.is_nan());
        assert!(s.kurtosis.is_nan());
        assert!(s.jb.is_none());
    }

    #[test]
    fn qq_identity_on_exact_normal_quantiles() {
        let n = 50;
        let vals: Vec<f64> = (0..n)
            .map(|i| special::std_normal_quantile((i as f64 + 0.5) / n as f64).unwrap())
            .collect();
        let set = toy_set(vals);
        for (t, e) in qq_points(&set).unwrap() {
            assert!((t - e).abs() < 1e-6);
        }
    }

    #[test]
    fn bg_test_needs_enough_observations() {
        let set = toy_set(vec![0.1, -0.2, 0.3, 0.0, 0.2]);
        let x = DMatrix::zeros(5, 2);
        assert!(bg_serial_test(&set, &x, 2).is_err());
    }

    #[test]
    fn bpg_detects_scale_trend() {
        // variance grows with the regressor: both variants should reject
        let n = 400;
        let mut vals = Vec::with_capacity(n);
        let mut reg = DMatrix::zeros(n, 1);
        // deterministic pseudo-noise from a fixed linear congruential stream
        let mut state: u64 = 42;
        for i in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            let z = (u - 0.5) * 3.46; // roughly unit variance
            let x = i as f64 / n as f64;
            reg[(i, 0)] = x;
            vals.push(z * (0.2 + 3.0 * x));
        }
        let set = toy_set(vals);
        let (lm, ss) = bpg_hetero_test(&set, &reg).unwrap();
        assert!(lm.p_value < 0.01, "lm p = {}", lm.p_value);
        assert!(ss.p_value < 0.01, "ss p = {}", ss.p_value);
    }
}
