//! Prediction from fitted parametric models: survivor, hazard, cumulative
//! hazard at arbitrary covariates, plus hazard-peak location.

use crate::dist::Family;
use crate::error::{Error, Result};

use super::likelihood::{lnh_cumh, shape_slots, sigma_slots, unpack, Frailty, Unpacked};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictKind {
    Survivor,
    Hazard,
    CumHazard,
}

pub(crate) struct AftView {
    pub up: Unpacked,
    pub sigma: f64,
    pub shape_k: f64,
    pub family: Family,
    pub frailty: Frailty,
}

impl AftView {
    pub fn new(family: Family, frailty: Frailty, v_aft: &[f64], p: usize) -> Self {
        let up = unpack(family, frailty, v_aft, p);
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
        Self {
            up,
            sigma,
            shape_k,
            family,
            frailty,
        }
    }

    fn eta(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.up.beta).map(|(a, b)| a * b).sum()
    }

    /// Frailty-marginalized cumulative hazard at time t and covariates x.
    pub fn cum_hazard(&self, x: &[f64], t: f64) -> f64 {
        let w = (t.ln() - self.eta(x)) / self.sigma;
        let (_, cumh) = lnh_cumh(self.family, self.shape_k, w);
        match self.frailty {
            Frailty::None => cumh,
            Frailty::Gamma => {
                let th = self.up.ln_theta.expect("gamma frailty").exp();
                (th * cumh).ln_1p() / th
            }
            Frailty::InverseGaussian => {
                let th = self.up.ln_theta.expect("inverse-Gaussian frailty").exp();
                ((1.0 + 2.0 * th * cumh).sqrt() - 1.0) / th
            }
        }
    }

    /// Marginal hazard on the duration scale at time t and covariates x.
    pub fn hazard(&self, x: &[f64], t: f64) -> f64 {
        let w = (t.ln() - self.eta(x)) / self.sigma;
        let (lnh, cumh) = lnh_cumh(self.family, self.shape_k, w);
        let mut lam_z = (lnh - self.sigma.ln()).exp();
        match self.frailty {
            Frailty::None => {}
            Frailty::Gamma => {
                let th = self.up.ln_theta.expect("gamma frailty").exp();
                lam_z /= 1.0 + th * cumh;
            }
            Frailty::InverseGaussian => {
                let th = self.up.ln_theta.expect("inverse-Gaussian frailty").exp();
                lam_z /= (1.0 + 2.0 * th * cumh).sqrt();
            }
        }
        lam_z / t
    }
}

/// Evaluate one prediction with an AFT-orientation packed vector.
pub(crate) fn predict_aft(
    family: Family,
    frailty: Frailty,
    v_aft: &[f64],
    p: usize,
    x: &[f64],
    t: f64,
    kind: PredictKind,
) -> Result<f64> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Domain(format!("predict requires t > 0, got {t}")));
    }
    if x.len() != p {
        return Err(Error::Data(format!(
            "covariate vector length {} does not match design width {p}",
            x.len()
        )));
    }
    let view = AftView::new(family, frailty, v_aft, p);
    Ok(match kind {
        PredictKind::CumHazard => view.cum_hazard(x, t),
        PredictKind::Survivor => (-view.cum_hazard(x, t)).exp(),
        PredictKind::Hazard => view.hazard(x, t),
    })
}

/// Golden-section maximization of a unimodal function on [a, b].
pub fn golden_peak<F: Fn(f64) -> f64>(h: &F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let invphi = (5.0f64.sqrt() - 1.0) / 2.0;
    let invphi2 = (3.0 - 5.0f64.sqrt()) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut x1 = a + invphi2 * (b - a);
    let mut x2 = a + invphi * (b - a);
    let mut f1 = h(x1);
    let mut f2 = h(x2);
    while b - a > tol {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + invphi2 * (b - a);
            f1 = h(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + invphi * (b - a);
            f2 = h(x2);
        }
    }
    let t = (a + b) / 2.0;
    (t, h(t))
}

/// Whether the family/frailty pair can have an interior hazard maximum.
pub(crate) fn hazard_is_unimodal(family: Family, frailty: Frailty) -> bool {
    match family {
        Family::LogNormal => true,
        Family::Exponential => false,
        Family::Weibull | Family::Gamma | Family::GeneralizedGamma => frailty != Frailty::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_quadratic_peak() {
        let f = |t: f64| -(t - 3.2).powi(2) + 1.0;
        let (t, v) = golden_peak(&f, 0.01, 60.0, 1e-6);
        assert!((t - 3.2).abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lognormal_peak_matches_grid() {
        // mu = 0, sigma = 1 baseline
        let view = AftView::new(Family::LogNormal, Frailty::None, &[0.0, 0.0], 1);
        let h = |t: f64| view.hazard(&[0.0], t);
        let (tp, _) = golden_peak(&h, 0.01, 60.0, 1e-6);
        let mut best = (0.0, f64::MIN);
        for i in 1..=200_000 {
            let t = 0.0005 * i as f64;
            let v = h(t);
            if v > best.1 {
                best = (t, v);
            }
        }
        assert!((tp - best.0).abs() < 1e-3);
    }

    #[test]
    fn survivor_exp_of_cum_hazard() {
        let v = [0.4, -0.2, -0.6];
        for &t in &[0.5, 1.0, 2.0, 7.5] {
            let s = predict_aft(
                Family::Weibull,
                Frailty::None,
                &v,
                2,
                &[1.0, 0.3],
                t,
                PredictKind::Survivor,
            )
            .unwrap();
            let ch = predict_aft(
                Family::Weibull,
                Frailty::None,
                &v,
                2,
                &[1.0, 0.3],
                t,
                PredictKind::CumHazard,
            )
            .unwrap();
            assert!((s - (-ch).exp()).abs() < 1e-12);
        }
    }
}
