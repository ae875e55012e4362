//! Regressions on distribution parameters: the log of one ancillary
//! parameter (rate, scale sigma, or shape) is itself a linear function of
//! covariates, nesting the plain fit as the intercept-only case.

use crate::data::SpellRecord;
use crate::dist::Family;
use crate::error::{Error, Result};

use super::likelihood::{
    lnh_cumh, marginal_term, model_loglik, shape_slots, sigma_slots, Covariate, Design, Frailty,
    Metric,
};

/// Which distribution parameter the link regression drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkedParam {
    /// ln lambda = s'gamma; exponential only, equivalent to the PH fit.
    Rate,
    /// ln sigma = s'gamma for families with a free scale.
    Sigma,
    /// ln k = s'gamma for the gamma and generalized-gamma families.
    Shape,
}

impl std::str::FromStr for LinkedParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(Self::Rate),
            "sigma" => Ok(Self::Sigma),
            "shape" => Ok(Self::Shape),
            other => Err(Error::Data(format!(
                "unknown linked parameter {other:?}, want rate|sigma|shape"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSpec {
    pub param: LinkedParam,
    pub covariates: Vec<Covariate>,
}

/// Main and link designs over the same spells.
#[derive(Debug, Clone)]
pub struct LinkedDesign {
    pub main: Design,
    pub link: Design,
    pub param: LinkedParam,
    pub family: Family,
    pub frailty: Frailty,
}

impl LinkedDesign {
    pub fn build(
        spells: &[SpellRecord],
        family: Family,
        frailty: Frailty,
        covs: &[Covariate],
        link: &LinkSpec,
    ) -> Result<Self> {
        match link.param {
            LinkedParam::Rate => {
                if family != Family::Exponential {
                    return Err(Error::Unsupported(
                        "a rate link needs the exponential family".into(),
                    ));
                }
                if !covs.is_empty() {
                    return Err(Error::Unsupported(
                        "a rate link replaces the covariate regression; move the covariates into the link".into(),
                    ));
                }
            }
            LinkedParam::Sigma => {
                if sigma_slots(family) == 0 {
                    return Err(Error::Unsupported(format!(
                        "{family:?} has no free scale to link"
                    )));
                }
            }
            LinkedParam::Shape => {
                if shape_slots(family) == 0 {
                    return Err(Error::Unsupported(format!(
                        "{family:?} has no free shape to link"
                    )));
                }
            }
        }
        Ok(Self {
            main: Design::parametric(spells, covs)?,
            link: Design::parametric(spells, &link.covariates)?,
            param: link.param,
            family,
            frailty,
        })
    }

    pub fn n(&self) -> usize {
        self.main.n()
    }

    /// Packed layout: beta, then the linked or scalar ancillaries in
    /// sigma-shape order, then ln theta.
    pub fn packed_len(&self) -> usize {
        let q = self.link.p();
        let th = usize::from(self.frailty != Frailty::None);
        match self.param {
            LinkedParam::Rate => q + th,
            LinkedParam::Sigma => self.main.p() + q + shape_slots(self.family) + th,
            LinkedParam::Shape => self.main.p() + sigma_slots(self.family) + q + th,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let link_names = |prefix: &str, out: &mut Vec<String>| {
            for n in &self.link.names {
                out.push(format!("{prefix}:{n}"));
            }
        };
        match self.param {
            LinkedParam::Rate => link_names("ln_rate", &mut out),
            LinkedParam::Sigma => {
                out.extend(self.main.names.iter().cloned());
                link_names("ln_sigma", &mut out);
                if shape_slots(self.family) == 1 {
                    out.push("ln_shape".into());
                }
            }
            LinkedParam::Shape => {
                out.extend(self.main.names.iter().cloned());
                if sigma_slots(self.family) == 1 {
                    out.push("ln_sigma".into());
                }
                link_names("ln_shape", &mut out);
            }
        }
        if self.frailty != Frailty::None {
            out.push("ln_theta".into());
        }
        out
    }

    /// Starting vector under the shared initialization policy: zero slopes,
    /// ancillary intercepts from moments of the event log-durations.
    pub fn init(&self, ln_sigma0: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.packed_len()];
        let p = self.main.p();
        match self.param {
            LinkedParam::Rate => {}
            LinkedParam::Sigma => v[p] = ln_sigma0,
            LinkedParam::Shape => {
                if sigma_slots(self.family) == 1 {
                    v[p] = ln_sigma0;
                }
            }
        }
        if self.frailty != Frailty::None {
            let last = v.len() - 1;
            v[last] = 0.1f64.ln();
        }
        v
    }

    fn theta(&self, v: &[f64]) -> f64 {
        if self.frailty == Frailty::None {
            1.0
        } else {
            v[v.len() - 1].exp()
        }
    }

    pub fn loglik_row(&self, v: &[f64], i: usize) -> f64 {
        if self.param == LinkedParam::Rate {
            // ln lambda_i = s_i'gamma, identical to an exponential PH term
            let sub = Design {
                t: vec![self.link.t[i]],
                y: vec![self.link.y[i]],
                d: vec![self.link.d[i]],
                x: self.link.x.rows(i, 1).into_owned(),
                names: self.link.names.clone(),
                has_intercept: true,
            };
            return model_loglik(self.family, self.frailty, Metric::Ph, v, &sub);
        }
        let p = self.main.p();
        let q = self.link.p();
        let theta = self.theta(v);
        let eta = self.main.row_dot(i, &v[..p]);
        let (ln_sigma, ln_shape) = match self.param {
            LinkedParam::Sigma => {
                let g = &v[p..p + q];
                let lk = if shape_slots(self.family) == 1 {
                    v[p + q]
                } else {
                    0.0
                };
                (self.link.row_dot(i, g), lk)
            }
            LinkedParam::Shape => {
                let mut j = p;
                let ls = if sigma_slots(self.family) == 1 {
                    j += 1;
                    v[j - 1]
                } else {
                    0.0
                };
                (ls, self.link.row_dot(i, &v[j..j + q]))
            }
            LinkedParam::Rate => unreachable!(),
        };
        let sigma = ln_sigma.exp();
        let w = (self.main.y[i] - eta) / sigma;
        let (lnh, cumh) = lnh_cumh(self.family, ln_shape.exp(), w);
        marginal_term(self.frailty, theta, self.main.d[i], lnh - ln_sigma, cumh)
    }

    pub fn loglik(&self, v: &[f64]) -> f64 {
        if self.param == LinkedParam::Rate {
            return model_loglik(self.family, self.frailty, Metric::Ph, v, &self.link);
        }
        let mut sum = 0.0;
        let mut c = 0.0;
        for i in 0..self.n() {
            let term = self.loglik_row(v, i);
            let t = term - c;
            let s = sum + t;
            c = (s - sum) - t;
            sum = s;
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::YearMonth;

    fn spells() -> Vec<SpellRecord> {
        [(1u32, 1u8, false), (2, 1, true), (3, 1, false), (7, 0, true)]
            .iter()
            .enumerate()
            .map(|(i, &(t, d, r))| SpellRecord {
                start: YearMonth::from_index(1500 + 30 * i as i64),
                duration: t,
                event: d,
                recession: r,
                price_decline: 0.5 + i as f64,
                interest_rate: 3.0,
            })
            .collect()
    }

    #[test]
    fn intercept_only_sigma_link_matches_plain_loglik() {
        let sp = spells();
        let ld = LinkedDesign::build(
            &sp,
            Family::LogNormal,
            Frailty::None,
            &[Covariate::Recession],
            &LinkSpec {
                param: LinkedParam::Sigma,
                covariates: vec![],
            },
        )
        .unwrap();
        let d = Design::parametric(&sp, &[Covariate::Recession]).unwrap();
        let v = [0.4, -0.2, -0.3];
        let plain = model_loglik(Family::LogNormal, Frailty::None, Metric::Aft, &v, &d);
        assert!((ld.loglik(&v) - plain).abs() < 1e-12);
    }

    #[test]
    fn rate_link_matches_exponential_ph() {
        let sp = spells();
        let ld = LinkedDesign::build(
            &sp,
            Family::Exponential,
            Frailty::None,
            &[],
            &LinkSpec {
                param: LinkedParam::Rate,
                covariates: vec![Covariate::PriceDecline],
            },
        )
        .unwrap();
        let d = Design::parametric(&sp, &[Covariate::PriceDecline]).unwrap();
        let v = [-0.7, 0.1];
        let ph = model_loglik(Family::Exponential, Frailty::None, Metric::Ph, &v, &d);
        assert!((ld.loglik(&v) - ph).abs() < 1e-12);
    }

    #[test]
    fn row_terms_sum_to_total() {
        let sp = spells();
        let ld = LinkedDesign::build(
            &sp,
            Family::Weibull,
            Frailty::Gamma,
            &[Covariate::Recession],
            &LinkSpec {
                param: LinkedParam::Sigma,
                covariates: vec![Covariate::Recession],
            },
        )
        .unwrap();
        let v = [0.5, -0.1, -0.4, 0.2, -1.0];
        assert_eq!(v.len(), ld.packed_len());
        let total: f64 = (0..ld.n()).map(|i| ld.loglik_row(&v, i)).sum();
        assert!((total - ld.loglik(&v)).abs() < 1e-12);
    }

    #[test]
    fn rate_link_rejects_weibull() {
        let sp = spells();
        let err = LinkedDesign::build(
            &sp,
            Family::Weibull,
            Frailty::None,
            &[],
            &LinkSpec {
                param: LinkedParam::Rate,
                covariates: vec![],
            },
        );
        assert!(err.is_err());
    }
}
