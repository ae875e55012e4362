//! Duration distributions: the three-parameter generalized gamma family with
//! its nested special cases, the log-normal, and the GEV / extreme-value
//! log-scale parameterization.

use crate::error::{Error, Result};
use crate::special;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Generalized gamma parameters (inverse-scale lambda, power p, shape k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GGParams {
    pub lambda: f64,
    pub p: f64,
    pub k: f64,
}

impl GGParams {
    pub fn new(lambda: f64, p: f64, k: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("p", p), ("k", k)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Domain(format!(
                    "generalized gamma parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(Self { lambda, p, k })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Domain(format!(
                "log-normal parameters need finite mu and sigma > 0, got mu={mu} sigma={sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GEVParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GEVParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !mu.is_finite() || !xi.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Domain(format!(
                "GEV parameters need finite mu, xi and sigma > 0, got mu={mu} sigma={sigma} xi={xi}"
            )));
        }
        Ok(Self { mu, sigma, xi })
    }
}

/// Distribution family tags used by the regression layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Exponential,
    Weibull,
    Gamma,
    GeneralizedGamma,
    LogNormal,
}

impl Family {
    /// Number of ancillary (non-regression) parameters the family carries.
    pub fn ancillary_arity(self) -> usize {
        match self {
            Family::Exponential => 0,
            Family::Weibull | Family::Gamma | Family::LogNormal => 1,
            Family::GeneralizedGamma => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Exponential => "exponential",
            Family::Weibull => "weibull",
            Family::Gamma => "gamma",
            Family::GeneralizedGamma => "gengamma",
            Family::LogNormal => "lognormal",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(Self::Exponential),
            "weibull" => Ok(Self::Weibull),
            "gamma" => Ok(Self::Gamma),
            "gengamma" => Ok(Self::GeneralizedGamma),
            "lognormal" => Ok(Self::LogNormal),
            other => Err(Error::Data(format!(
                "unknown family {other:?}, want exponential|weibull|gamma|gengamma|lognormal"
            ))),
        }
    }
}

fn ln_gg_density(t: f64, gp: &GGParams) -> f64 {
    let x = (gp.lambda * t).powf(gp.p);
    gp.lambda.ln() + gp.p.ln() + (gp.p * gp.k - 1.0) * (gp.lambda * t).ln() - x
        - special::ln_gamma(gp.k).expect("k > 0")
}

/// Generalized gamma density f(t).
pub fn gg_density(t: f64, gp: &GGParams) -> Result<f64> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::Domain(format!("gg_density requires t > 0, got {t}")));
    }
    Ok(ln_gg_density(t, gp).exp())
}

/// Generalized gamma survivor S(t) = Q(k, (lambda t)^p).
pub fn gg_survivor(t: f64, gp: &GGParams) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Domain(format!("gg_survivor requires t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    special::reg_upper_incomplete_gamma(gp.k, (gp.lambda * t).powf(gp.p))
}

// three-term tail series for Q(k, x) used once S underflows
fn ln_gg_survivor_tail(x: f64, k: f64) -> f64 {
    let series = 1.0 + (k - 1.0) / x + (k - 1.0) * (k - 2.0) / (x * x);
    (k - 1.0) * x.ln() - x - special::ln_gamma(k).expect("k > 0") + series.ln()
}

/// Generalized gamma hazard f(t)/S(t), evaluated in log space when the
/// survivor underflows.
pub fn gg_hazard(t: f64, gp: &GGParams) -> Result<f64> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::Domain(format!("gg_hazard requires t > 0, got {t}")));
    }
    let s = gg_survivor(t, gp)?;
    if s > 1e-300 {
        Ok(gg_density(t, gp)? / s)
    } else {
        let x = (gp.lambda * t).powf(gp.p);
        Ok((ln_gg_density(t, gp) - ln_gg_survivor_tail(x, gp.k)).exp())
    }
}

/// Cumulative hazard −ln S(t) for the generalized gamma.
pub fn gg_cumulative_hazard(t: f64, gp: &GGParams) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Domain(format!(
            "gg_cumulative_hazard requires t >= 0, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let s = gg_survivor(t, gp)?;
    if s > 1e-300 {
        Ok(-s.ln())
    } else {
        let x = (gp.lambda * t).powf(gp.p);
        Ok(-ln_gg_survivor_tail(x, gp.k))
    }
}

/// r-th raw moment E[T^r] = Γ(k + r/p) / (λ^r Γ(k)).
pub fn gg_moment(r: u32, gp: &GGParams) -> Result<f64> {
    if r == 0 {
        return Ok(1.0);
    }
    let rf = f64::from(r);
    let ln_m = special::ln_gamma(gp.k + rf / gp.p)? - special::ln_gamma(gp.k)?
        - rf * gp.lambda.ln();
    if ln_m > 709.0 {
        return Err(Error::Overflow(format!(
            "gg_moment r={r} exceeds the representable range (ln value {ln_m:.1})"
        )));
    }
    Ok(ln_m.exp())
}

/// Mean and variance of the generalized gamma from its first two moments.
pub fn gg_mean_variance(gp: &GGParams) -> Result<(f64, f64)> {
    let m1 = gg_moment(1, gp)?;
    let m2 = gg_moment(2, gp)?;
    Ok((m1, m2 - m1 * m1))
}

/// Log-normal survivor, density and hazard at t.
pub fn lognormal_sfh(t: f64, lp: &LogNormalParams) -> Result<(f64, f64, f64)> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::Domain(format!(
            "lognormal_sfh requires t > 0, got {t}"
        )));
    }
    let w = (t.ln() - lp.mu) / lp.sigma;
    let s = special::std_normal_sf(w);
    let f = special::std_normal_pdf(w) / (t * lp.sigma);
    let h = (special::ln_std_normal_pdf(w) - t.ln() - lp.sigma.ln()
        - special::ln_std_normal_sf(w))
    .exp();
    Ok((s, f, h))
}

/// GEV distribution function and density at x. Outside the support the CDF
/// is exactly 0 or 1 (which side depends on the sign of xi) and the density
/// is 0.
pub fn gev_cdf_pdf(x: f64, gp: &GEVParams) -> (f64, f64) {
    let u = (x - gp.mu) / gp.sigma;
    if gp.xi == 0.0 {
        let e = (-u).exp();
        let cdf = (-e).exp();
        let pdf = (-u - e).exp() / gp.sigma;
        return (cdf, pdf);
    }
    let s = 1.0 + gp.xi * u;
    if s <= 0.0 {
        // below the lower endpoint when xi > 0, above the upper when xi < 0
        return if gp.xi > 0.0 { (0.0, 0.0) } else { (1.0, 0.0) };
    }
    let t = s.powf(-1.0 / gp.xi);
    let cdf = (-t).exp();
    let pdf = t.powf(gp.xi + 1.0) * cdf / gp.sigma;
    (cdf, pdf)
}

/// A possibly-divergent moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Moment {
    Finite(f64),
    Infinite,
}

/// GEV mean and variance; divergent moments are reported as markers rather
/// than errors (mean infinite for xi >= 1, variance for xi >= 1/2).
pub fn gev_moments(gp: &GEVParams) -> (Moment, Moment) {
    if gp.xi == 0.0 {
        let mean = gp.mu + gp.sigma * EULER_GAMMA;
        let var = gp.sigma * gp.sigma * std::f64::consts::PI * std::f64::consts::PI / 6.0;
        return (Moment::Finite(mean), Moment::Finite(var));
    }
    let mean = if gp.xi >= 1.0 {
        Moment::Infinite
    } else {
        let g1 = special::ln_gamma(1.0 - gp.xi).expect("1 - xi > 0").exp();
        Moment::Finite(gp.mu + gp.sigma * (g1 - 1.0) / gp.xi)
    };
    let var = if gp.xi >= 0.5 {
        Moment::Infinite
    } else {
        let g1 = special::ln_gamma(1.0 - gp.xi).expect("1 - xi > 0").exp();
        let g2 = special::ln_gamma(1.0 - 2.0 * gp.xi).expect("1 - 2 xi > 0").exp();
        Moment::Finite(gp.sigma * gp.sigma * (g2 - g1 * g1) / (gp.xi * gp.xi))
    };
    (mean, var)
}

/// Log-scale parameterization of a duration T ~ GG(lambda, p, k):
/// ln T = alpha + sigma W with alpha = −ln lambda, sigma = 1/p, shape k.
pub fn ev_link(gp: &GGParams) -> (f64, f64, f64) {
    (-gp.lambda.ln(), 1.0 / gp.p, gp.k)
}

/// Inverse of [`ev_link`]: recover the time-scale parameters.
pub fn ev_link_inverse(alpha: f64, sigma: f64, k: f64) -> Result<GGParams> {
    if sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "ev_link_inverse requires sigma > 0, got {sigma}"
        )));
    }
    GGParams::new((-alpha).exp(), 1.0 / sigma, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gg(l: f64, p: f64, k: f64) -> GGParams {
        GGParams::new(l, p, k).unwrap()
    }

    #[test]
    fn exponential_case() {
        let g = gg(1.0, 1.0, 1.0);
        assert!((gg_density(1.0, &g).unwrap() - (-1.0f64).exp()).abs() < 1e-14);
        assert!((gg_survivor(1.0, &g).unwrap() - (-1.0f64).exp()).abs() < 1e-14);
        assert!((gg_hazard(5.3, &gg(0.7, 1.0, 1.0)).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn weibull_case() {
        let g = gg(1.0, 2.0, 1.0);
        assert!((gg_density(1.0, &g).unwrap() - 2.0 * (-1.0f64).exp()).abs() < 1e-13);
        assert!((gg_hazard(1.0, &g).unwrap() - 2.0).abs() < 1e-11);
    }

    #[test]
    fn moments() {
        assert!((gg_moment(1, &gg(2.0, 1.0, 1.0)).unwrap() - 0.5).abs() < 1e-14);
        assert!((gg_moment(1, &gg(1.0, 1.0, 3.0)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lognormal_standard_point() {
        let lp = LogNormalParams::new(0.0, 1.0).unwrap();
        let (s, f, h) = lognormal_sfh(1.0, &lp).unwrap();
        assert!((s - 0.5).abs() < 1e-14);
        assert!((f - 0.398_942_280_401_432_7).abs() < 1e-14);
        assert!((h - 2.0 * f).abs() < 1e-12);
    }

    #[test]
    fn gev_basics() {
        let g0 = GEVParams::new(0.0, 1.0, 0.0).unwrap();
        let (c, _) = gev_cdf_pdf(0.0, &g0);
        assert!((c - (-1.0f64).exp()).abs() < 1e-14);
        let (m, v) = gev_moments(&g0);
        assert_eq!(m, Moment::Finite(0.0 + EULER_GAMMA));
        match v {
            Moment::Finite(x) => assert!((x - 1.644_934_066_848_226_4).abs() < 1e-12),
            Moment::Infinite => panic!(),
        }
        let heavy = GEVParams::new(0.0, 1.0, 1.2).unwrap();
        assert_eq!(gev_moments(&heavy).0, Moment::Infinite);
    }

    #[test]
    fn ev_link_round_trip() {
        let g = gg(std::f64::consts::E, 2.0, 1.0);
        let (a, s, k) = ev_link(&g);
        assert!((a + 1.0).abs() < 1e-15 && (s - 0.5).abs() < 1e-15 && k == 1.0);
        let back = ev_link_inverse(a, s, k).unwrap();
        assert!((back.lambda - g.lambda).abs() < 1e-12);
        assert!((back.p - g.p).abs() < 1e-15);
    }
}
