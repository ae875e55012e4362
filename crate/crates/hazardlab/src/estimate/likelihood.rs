//! Log-duration-scale likelihood machinery shared by all parametric fits.
//!
//! Every family is expressed through the log-hazard and cumulative hazard of
//! the standardized log-scale variable w = (ln t − x'beta)/sigma; the total
//! log-likelihood is sum(d * ln lambda_Z − Lambda_Z) on the ln T scale, with
//! per-spell frailty marginalized in closed form.

use nalgebra::DMatrix;

use crate::data::SpellRecord;
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::special;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Aft,
    Ph,
    PartialLikelihood,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aft" => Ok(Metric::Aft),
            "ph" => Ok(Metric::Ph),
            other => Err(Error::Domain(format!(
                "unknown metric {other:?}, want aft|ph"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frailty {
    None,
    Gamma,
    InverseGaussian,
}

impl std::str::FromStr for Frailty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Frailty::None),
            "gamma" => Ok(Frailty::Gamma),
            "invgauss" | "inverse_gaussian" => Ok(Frailty::InverseGaussian),
            other => Err(Error::Domain(format!(
                "unknown frailty {other:?}, want none|gamma|invgauss"
            ))),
        }
    }
}

/// Spell covariates selectable for a design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Covariate {
    Recession,
    PriceDecline,
    InterestRate,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::Recession => "recession",
            Covariate::PriceDecline => "price_decline",
            Covariate::InterestRate => "interest_rate",
        }
    }

    pub fn value(self, s: &SpellRecord) -> f64 {
        match self {
            Covariate::Recession => f64::from(u8::from(s.recession)),
            Covariate::PriceDecline => s.price_decline,
            Covariate::InterestRate => s.interest_rate,
        }
    }
}

impl std::str::FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recession" => Ok(Self::Recession),
            "price_decline" => Ok(Self::PriceDecline),
            "interest_rate" => Ok(Self::InterestRate),
            other => Err(Error::Data(format!("unknown covariate {other:?}"))),
        }
    }
}

/// Outcomes plus design matrix for one regression.
#[derive(Debug, Clone)]
pub struct Design {
    /// Durations in months.
    pub t: Vec<f64>,
    /// ln durations.
    pub y: Vec<f64>,
    /// Event indicators as 0/1 reals.
    pub d: Vec<f64>,
    /// n x p design; parametric designs carry an intercept first column.
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub has_intercept: bool,
}

impl Design {
    fn build(spells: &[SpellRecord], covs: &[Covariate], intercept: bool) -> Result<Self> {
        if spells.is_empty() {
            return Err(Error::Data("design needs at least one spell".into()));
        }
        let n = spells.len();
        let p = covs.len() + usize::from(intercept);
        let mut x = DMatrix::zeros(n, p);
        let mut names = Vec::with_capacity(p);
        if intercept {
            names.push("intercept".to_string());
        }
        names.extend(covs.iter().map(|c| c.name().to_string()));
        for (i, s) in spells.iter().enumerate() {
            let mut j = 0;
            if intercept {
                x[(i, 0)] = 1.0;
                j = 1;
            }
            for c in covs {
                x[(i, j)] = c.value(s);
                j += 1;
            }
        }
        Ok(Self {
            t: spells.iter().map(|s| f64::from(s.duration)).collect(),
            y: spells.iter().map(|s| f64::from(s.duration).ln()).collect(),
            d: spells.iter().map(|s| f64::from(s.event)).collect(),
            x,
            names,
            has_intercept: intercept,
        })
    }

    /// Intercept-first design for parametric regressions.
    pub fn parametric(spells: &[SpellRecord], covs: &[Covariate]) -> Result<Self> {
        Self::build(spells, covs, true)
    }

    /// Intercept-free design for the partial likelihood.
    pub fn cox(spells: &[SpellRecord], covs: &[Covariate]) -> Result<Self> {
        if covs.is_empty() {
            return Err(Error::Data("a Cox design needs at least one covariate".into()));
        }
        Self::build(spells, covs, false)
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.d.iter().filter(|&&d| d == 1.0).count()
    }

    pub fn row_dot(&self, i: usize, beta: &[f64]) -> f64 {
        (0..self.p()).map(|j| self.x[(i, j)] * beta[j]).sum()
    }
}

/// Whether the family carries a free log-scale sigma, a free shape, or both.
pub fn sigma_slots(family: Family) -> usize {
    match family {
        Family::Exponential | Family::Gamma => 0,
        Family::Weibull | Family::LogNormal | Family::GeneralizedGamma => 1,
    }
}

pub fn shape_slots(family: Family) -> usize {
    match family {
        Family::Gamma | Family::GeneralizedGamma => 1,
        _ => 0,
    }
}

/// Packed parameter vector length for a family/frailty/metric combination.
pub fn packed_len(family: Family, frailty: Frailty, p: usize) -> usize {
    p + sigma_slots(family) + shape_slots(family) + usize::from(frailty != Frailty::None)
}

/// Natural-scale decomposition of a packed vector.
#[derive(Debug, Clone)]
pub struct Unpacked {
    pub beta: Vec<f64>,
    pub ln_sigma: f64,
    pub ln_shape: f64,
    pub ln_theta: Option<f64>,
}

pub fn unpack(family: Family, frailty: Frailty, v: &[f64], p: usize) -> Unpacked {
    let beta = v[..p].to_vec();
    let mut i = p;
    let ln_sigma = if sigma_slots(family) == 1 {
        i += 1;
        v[i - 1]
    } else {
        0.0
    };
    let ln_shape = if shape_slots(family) == 1 {
        i += 1;
        v[i - 1]
    } else {
        0.0
    };
    let ln_theta = if frailty != Frailty::None {
        Some(v[i])
    } else {
        None
    };
    Unpacked {
        beta,
        ln_sigma,
        ln_shape,
        ln_theta,
    }
}

/// (ln hazard, cumulative hazard) of the standardized log-scale variable.
pub fn lnh_cumh(family: Family, shape_k: f64, w: f64) -> (f64, f64) {
    match family {
        Family::LogNormal => {
            let lnsf = special::ln_std_normal_sf(w);
            (special::ln_std_normal_pdf(w) - lnsf, -lnsf)
        }
        Family::Exponential | Family::Weibull => (w, w.exp()),
        Family::Gamma | Family::GeneralizedGamma => {
            let ew = w.exp();
            let lnq = special::ln_reg_upper_incomplete_gamma(shape_k, ew)
                .unwrap_or(f64::NEG_INFINITY);
            let lnf = shape_k * w - ew - special::ln_gamma(shape_k).expect("k > 0");
            (lnf - lnq, -lnq)
        }
    }
}

/// d·ln(marginal hazard) − marginal cumulative hazard from the conditional
/// log-hazard and cumulative hazard, integrating the frailty out in closed
/// form.
pub fn marginal_term(frailty: Frailty, theta: f64, d: f64, lam: f64, cumh: f64) -> f64 {
    match frailty {
        Frailty::None => d * lam - cumh,
        Frailty::Gamma => {
            let g = (theta * cumh).ln_1p();
            d * (lam - g) - g / theta
        }
        Frailty::InverseGaussian => {
            let s = (1.0 + 2.0 * theta * cumh).sqrt();
            d * (lam - s.ln()) - (s - 1.0) / theta
        }
    }
}

/// One spell's log-likelihood term on the ln T scale.
fn spell_term(
    family: Family,
    frailty: Frailty,
    up: &Unpacked,
    sigma: f64,
    shape_k: f64,
    y: f64,
    eta: f64,
    d: f64,
) -> f64 {
    let w = (y - eta) / sigma;
    let (lnh, cumh) = lnh_cumh(family, shape_k, w);
    let lam = lnh - sigma.ln();
    let theta = up.ln_theta.map_or(1.0, f64::exp);
    marginal_term(frailty, theta, d, lam, cumh)
}

/// Translate a PH-metric packed vector into AFT terms: beta_aft =
/// −sigma * beta_ph with sigma = 1/p; only the exponential and Weibull close
/// under both metrics.
fn ph_to_aft(family: Family, frailty: Frailty, v: &[f64], p: usize) -> Vec<f64> {
    let up = unpack(family, frailty, v, p);
    let sigma = match family {
        Family::Exponential => 1.0,
        // packed ancillary is ln p for the PH metric
        Family::Weibull => (-up.ln_sigma).exp(),
        _ => unreachable!("PH metric is restricted to exponential and Weibull"),
    };
    let mut out: Vec<f64> = up.beta.iter().map(|b| -sigma * b).collect();
    if sigma_slots(family) == 1 {
        out.push(sigma.ln());
    }
    if let Some(lt) = up.ln_theta {
        out.push(lt);
    }
    out
}

/// Raw packed-vector log-likelihood; non-finite values propagate so the
/// optimizer's step control can reject them.
pub fn model_loglik(
    family: Family,
    frailty: Frailty,
    metric: Metric,
    v: &[f64],
    design: &Design,
) -> f64 {
    let v_aft;
    let v = match metric {
        Metric::Aft => v,
        Metric::Ph => {
            v_aft = ph_to_aft(family, frailty, v, design.p());
            &v_aft
        }
        Metric::PartialLikelihood => unreachable!("partial likelihood is fitted separately"),
    };
    let up = unpack(family, frailty, v, design.p());
    let sigma = if sigma_slots(family) == 1 {
        up.ln_sigma.exp()
    } else {
        1.0
    };
    let shape_k = if shape_slots(family) == 1 {
        up.ln_shape.exp()
    } else {
        1.0
    };
    // Kahan compensation keeps the sum bit-stable across spell orderings
    let mut sum = 0.0;
    let mut c = 0.0;
    for i in 0..design.n() {
        let eta = design.row_dot(i, &up.beta);
        let term = spell_term(
            family, frailty, &up, sigma, shape_k, design.y[i], eta, design.d[i],
        );
        let t = term - c;
        let s = sum + t;
        c = (s - sum) - t;
        sum = s;
    }
    sum
}

/// Checked log-likelihood: reports the first spell whose term is non-finite.
pub fn loglik_checked(
    family: Family,
    frailty: Frailty,
    metric: Metric,
    v: &[f64],
    design: &Design,
) -> Result<f64> {
    let v_aft;
    let v = match metric {
        Metric::Aft => v,
        Metric::Ph => {
            v_aft = ph_to_aft(family, frailty, v, design.p());
            &v_aft
        }
        Metric::PartialLikelihood => {
            return Err(Error::Unsupported(
                "partial-likelihood values come from the Cox fitter".into(),
            ))
        }
    };
    let up = unpack(family, frailty, v, design.p());
    let sigma = if sigma_slots(family) == 1 {
        up.ln_sigma.exp()
    } else {
        1.0
    };
    let shape_k = if shape_slots(family) == 1 {
        up.ln_shape.exp()
    } else {
        1.0
    };
    let mut sum = 0.0;
    let mut c = 0.0;
    for i in 0..design.n() {
        let eta = design.row_dot(i, &up.beta);
        let term = spell_term(
            family, frailty, &up, sigma, shape_k, design.y[i], eta, design.d[i],
        );
        if !term.is_finite() {
            return Err(Error::NonFiniteLikelihood { index: i });
        }
        let t = term - c;
        let s = sum + t;
        c = (s - sum) - t;
        sum = s;
    }
    Ok(sum)
}

/// Cox-Snell residuals r_i = marginal cumulative hazard at each spell.
pub fn cox_snell(
    family: Family,
    frailty: Frailty,
    metric: Metric,
    v: &[f64],
    design: &Design,
) -> Vec<f64> {
    let v_aft;
    let v = match metric {
        Metric::Aft => v,
        Metric::Ph => {
            v_aft = ph_to_aft(family, frailty, v, design.p());
            &v_aft
        }
        Metric::PartialLikelihood => unreachable!("Cox handled by its own residual path"),
    };
    let up = unpack(family, frailty, v, design.p());
    let sigma = if sigma_slots(family) == 1 {
        up.ln_sigma.exp()
    } else {
        1.0
    };
    let shape_k = if shape_slots(family) == 1 {
        up.ln_shape.exp()
    } else {
        1.0
    };
    (0..design.n())
        .map(|i| {
            let w = (design.y[i] - design.row_dot(i, &up.beta)) / sigma;
            let (_, cumh) = lnh_cumh(family, shape_k, w);
            match frailty {
                Frailty::None => cumh,
                Frailty::Gamma => {
                    let th = up.ln_theta.expect("gamma frailty").exp();
                    (th * cumh).ln_1p() / th
                }
                Frailty::InverseGaussian => {
                    let th = up.ln_theta.expect("inverse-Gaussian frailty").exp();
                    ((1.0 + 2.0 * th * cumh).sqrt() - 1.0) / th
                }
            }
        })
        .collect()
}

/// Linear predictors x'beta (AFT orientation) for a fitted vector.
pub fn linear_predictor(
    family: Family,
    frailty: Frailty,
    metric: Metric,
    v: &[f64],
    design: &Design,
) -> Vec<f64> {
    let v_aft;
    let v = match metric {
        Metric::Aft => v,
        Metric::Ph => {
            v_aft = ph_to_aft(family, frailty, v, design.p());
            &v_aft
        }
        Metric::PartialLikelihood => unreachable!(),
    };
    let up = unpack(family, frailty, v, design.p());
    (0..design.n()).map(|i| design.row_dot(i, &up.beta)).collect()
}

/// AFT-orientation view of a packed vector regardless of the fitted metric.
pub fn as_aft(family: Family, frailty: Frailty, metric: Metric, v: &[f64], p: usize) -> Vec<f64> {
    match metric {
        Metric::Aft => v.to_vec(),
        Metric::Ph => ph_to_aft(family, frailty, v, p),
        Metric::PartialLikelihood => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::YearMonth;

    fn one_spell_design() -> Design {
        let s = SpellRecord {
            start: YearMonth::new(2000, 1).unwrap(),
            duration: 1,
            event: 1,
            recession: false,
            price_decline: 1.0,
            interest_rate: 1.0,
        };
        Design::parametric(&[s], &[]).unwrap()
    }

    #[test]
    fn unit_exponential_single_spell() {
        let d = one_spell_design();
        let ll = model_loglik(Family::Exponential, Frailty::None, Metric::Ph, &[0.0], &d);
        assert!((ll - (-1.0)).abs() < 1e-14);
        let ll_aft = model_loglik(Family::Exponential, Frailty::None, Metric::Aft, &[0.0], &d);
        assert!((ll_aft - (-1.0)).abs() < 1e-14);
    }

    #[test]
    fn gamma_shape_one_nests_exponential() {
        let d = one_spell_design();
        for v in [[0.3], [-0.2]] {
            let gam = model_loglik(Family::Gamma, Frailty::None, Metric::Aft, &[v[0], 0.0], &d);
            let exp = model_loglik(Family::Exponential, Frailty::None, Metric::Aft, &[v[0]], &d);
            assert!((gam - exp).abs() < 1e-10, "{gam} vs {exp}");
        }
    }

    #[test]
    fn frailty_theta_small_matches_no_frailty() {
        let d = one_spell_design();
        let base = model_loglik(Family::LogNormal, Frailty::None, Metric::Aft, &[0.1, 0.2], &d);
        let fr = model_loglik(
            Family::LogNormal,
            Frailty::Gamma,
            Metric::Aft,
            &[0.1, 0.2, (1e-8f64).ln()],
            &d,
        );
        assert!((base - fr).abs() < 1e-6);
    }
}
