//! Model comparison and hypothesis tests over fitted duration models:
//! information criteria, likelihood-ratio and Wald tests, the
//! proportional-hazards assumption test, and a residual-based
//! goodness-of-fit sum.

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::data::SpellRecord;
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::estimate::{cox, likelihood, FitResult, Frailty, ModelFamily};
use crate::special;

#[derive(Debug, Clone)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

impl TestResult {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "name": self.name,
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
        })
    }
}

fn require_converged(fit: &FitResult) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(Error::NonConvergence {
            iterations: fit.iterations,
            grad_norm: fit.grad_max_norm,
        })
    }
}

/// (AIC, BIC) recomputed from the stored log-likelihood and parameter count.
pub fn information_criteria(fit: &FitResult) -> Result<(f64, f64)> {
    require_converged(fit)?;
    let k = fit.k_params as f64;
    Ok((
        -2.0 * fit.loglik + 2.0 * k,
        -2.0 * fit.loglik + (fit.n as f64).ln() * k,
    ))
}

/// Does `outer` strictly or trivially contain `inner` as a special case?
fn family_nests(inner: Family, outer: Family) -> bool {
    if inner == outer {
        return true;
    }
    match outer {
        Family::Weibull | Family::Gamma => inner == Family::Exponential,
        Family::GeneralizedGamma => matches!(
            inner,
            Family::Exponential | Family::Weibull | Family::Gamma
        ),
        _ => false,
    }
}

fn is_nested(nested: &FitResult, full: &FitResult) -> bool {
    let (nf, ff) = match (nested.spec.family, full.spec.family) {
        (ModelFamily::Parametric(a), ModelFamily::Parametric(b)) => (a, b),
        // the partial likelihood is not comparable with a parametric one
        _ => return false,
    };
    if nested.spec.link.is_some() || full.spec.link.is_some() {
        return nested.spec == full.spec;
    }
    let covs_ok = nested
        .spec
        .covariates
        .iter()
        .all(|c| full.spec.covariates.contains(c));
    let frailty_ok =
        nested.spec.frailty == full.spec.frailty || nested.spec.frailty == Frailty::None;
    covs_ok && frailty_ok && family_nests(nf, ff)
}

/// Likelihood-ratio test of a nested restriction.
pub fn lr_test(nested: &FitResult, full: &FitResult, df: usize) -> Result<TestResult> {
    require_converged(nested)?;
    require_converged(full)?;
    if !is_nested(nested, full) {
        return Err(Error::Unsupported(
            "the likelihood-ratio test needs nested specifications".into(),
        ));
    }
    let diff = full.loglik - nested.loglik;
    if diff < -1e-6 {
        return Err(Error::Data(format!(
            "the full model's log-likelihood {:.6} is below the nested one's {:.6}; the fits are inconsistent",
            full.loglik, nested.loglik
        )));
    }
    let statistic = (2.0 * diff).max(0.0);
    Ok(TestResult {
        name: "likelihood_ratio".into(),
        statistic,
        df,
        p_value: special::chi2_sf(statistic, df as f64)?,
    })
}

/// Wald chi-square test that the selected coefficients are jointly zero,
/// using the robust covariance when the fit carries one.
pub fn wald_test(fit: &FitResult, indices: &[usize]) -> Result<TestResult> {
    require_converged(fit)?;
    if indices.is_empty() {
        return Err(Error::Data("the Wald test needs at least one index".into()));
    }
    let k = fit.params.len();
    for &j in indices {
        if j >= k {
            return Err(Error::Data(format!(
                "coefficient index {j} out of range (have {k} parameters)"
            )));
        }
    }
    let cov = fit.cov_robust.as_ref().unwrap_or(&fit.cov_model);
    let m = indices.len();
    let mut b = DVector::zeros(m);
    let mut v = DMatrix::zeros(m, m);
    for (a, &ja) in indices.iter().enumerate() {
        b[a] = fit.params[ja];
        for (c, &jc) in indices.iter().enumerate() {
            v[(a, c)] = cov[(ja, jc)];
        }
    }
    let solved = v
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Data("restricted covariance is singular".into()))?;
    let statistic = b.dot(&solved);
    Ok(TestResult {
        name: "wald".into(),
        statistic,
        df: m,
        p_value: special::chi2_sf(statistic, m as f64)?,
    })
}

/// Grambsch-Therneau test of the proportional-hazards assumption on a Cox
/// fit; returns the global chi-square plus one component per covariate.
pub fn ph_assumption_test(
    fit: &FitResult,
    spells: &[SpellRecord],
) -> Result<(TestResult, Vec<TestResult>)> {
    require_converged(fit)?;
    if fit.spec.family != ModelFamily::Cox {
        return Err(Error::Unsupported(
            "the proportional-hazards test needs a Cox fit".into(),
        ));
    }
    let design = likelihood::Design::cox(spells, &fit.spec.covariates)?;
    // recover the Hessian from the stored model covariance
    let info = fit
        .cov_model
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Data("stored covariance is singular".into()))?;
    let hessian = -info;
    let ph = cox::schoenfeld_global_test(&design, &fit.params, &hessian)?;
    let global = TestResult {
        name: "proportional_hazards".into(),
        statistic: ph.statistic,
        df: ph.df,
        p_value: ph.p_value,
    };
    let components = ph
        .components
        .iter()
        .zip(&fit.names)
        .map(|(&(s, p), name)| TestResult {
            name: format!("proportional_hazards:{name}"),
            statistic: s,
            df: 1,
            p_value: p,
        })
        .collect();
    Ok((global, components))
}

/// Residual sum of squares used as the goodness-of-fit summary: squared
/// log-duration regression residuals for parametric fits, squared
/// martingale-like residuals for the Cox fit.
pub fn ssr_goodness(fit: &FitResult, spells: &[SpellRecord]) -> Result<f64> {
    require_converged(fit)?;
    match fit.spec.family {
        ModelFamily::Cox => {
            let design = likelihood::Design::cox(spells, &fit.spec.covariates)?;
            let cs = cox::cox_snell_cox(&design, &fit.params);
            Ok(design
                .d
                .iter()
                .zip(&cs)
                .map(|(d, r)| (d - r).powi(2))
                .sum())
        }
        ModelFamily::Parametric(family) => {
            let design = likelihood::Design::parametric(spells, &fit.spec.covariates)?;
            let v_aft = likelihood::as_aft(
                family,
                fit.spec.frailty,
                fit.spec.metric,
                &fit.params,
                fit.n_beta,
            );
            Ok((0..design.n())
                .map(|i| (design.y[i] - design.row_dot(i, &v_aft[..fit.n_beta])).powi(2))
                .sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::YearMonth;
    use crate::estimate::{fit_cox, fit_mle, Covariate, Metric, ModelSpec};

    fn toy_spells(n: usize) -> Vec<SpellRecord> {
        (0..n)
            .map(|i| SpellRecord {
                start: YearMonth::from_index(22000 + 10 * i as i64),
                duration: 1 + (i % 6) as u32 + u32::from(i % 4 == 0) * 2,
                event: 1,
                recession: i % 3 == 0,
                price_decline: 0.8 + (i % 5) as f64,
                interest_rate: 1.5 + (i % 7) as f64 * 0.4,
            })
            .collect()
    }

    #[test]
    fn identical_fits_give_zero_lr() {
        let sp = toy_spells(40);
        let spec = ModelSpec::parametric(
            Family::Weibull,
            Metric::Aft,
            Frailty::None,
            vec![Covariate::Recession],
        )
        .without_robust();
        let a = fit_mle(&spec, &sp).unwrap();
        let b = fit_mle(&spec, &sp).unwrap();
        let t = lr_test(&a, &b, 1).unwrap();
        assert!(t.statistic.abs() < 1e-9);
        assert!((t.p_value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exponential_restriction_of_weibull_is_nested() {
        let sp = toy_spells(60);
        let e = fit_mle(
            &ModelSpec::parametric(Family::Exponential, Metric::Aft, Frailty::None, vec![])
                .without_robust(),
            &sp,
        )
        .unwrap();
        let w = fit_mle(
            &ModelSpec::parametric(Family::Weibull, Metric::Aft, Frailty::None, vec![])
                .without_robust(),
            &sp,
        )
        .unwrap();
        let t = lr_test(&e, &w, 1).unwrap();
        assert!(t.statistic >= 0.0);
        // a Cox fit can never be compared by LR with a parametric fit
        let c = fit_cox(&ModelSpec::cox(vec![Covariate::Recession]), &sp).unwrap();
        assert!(lr_test(&c, &w, 1).is_err());
    }

    #[test]
    fn single_coefficient_wald_is_z_squared() {
        let sp = toy_spells(50);
        let fit = fit_mle(
            &ModelSpec::parametric(
                Family::LogNormal,
                Metric::Aft,
                Frailty::None,
                vec![Covariate::Recession, Covariate::InterestRate],
            ),
            &sp,
        )
        .unwrap();
        let t = wald_test(&fit, &[1]).unwrap();
        let z = fit.z_value(1);
        assert!((t.statistic - z * z).abs() < 1e-9);
        assert_eq!(t.df, 1);
    }

    #[test]
    fn information_criteria_match_stored() {
        let sp = toy_spells(45);
        let fit = fit_mle(
            &ModelSpec::parametric(Family::Weibull, Metric::Aft, Frailty::None, vec![])
                .without_robust(),
            &sp,
        )
        .unwrap();
        let (aic, bic) = information_criteria(&fit).unwrap();
        assert_eq!(aic, fit.aic);
        assert_eq!(bic, fit.bic);
    }

    #[test]
    fn ph_test_runs_on_cox_fit() {
        let sp = toy_spells(80);
        let fit = fit_cox(
            &ModelSpec::cox(vec![Covariate::Recession, Covariate::PriceDecline]),
            &sp,
        )
        .unwrap();
        let (global, comps) = ph_assumption_test(&fit, &sp).unwrap();
        assert_eq!(global.df, 2);
        assert_eq!(comps.len(), 2);
        assert!((0.0..=1.0).contains(&global.p_value));
    }

    #[test]
    fn perfect_cox_snell_gives_zero_ssr() {
        // SSR over martingale residuals is zero iff every residual equals d
        let sp = toy_spells(30);
        let fit = fit_cox(&ModelSpec::cox(vec![Covariate::Recession]), &sp).unwrap();
        let ssr = ssr_goodness(&fit, &sp).unwrap();
        assert!(ssr > 0.0);
    }
}
