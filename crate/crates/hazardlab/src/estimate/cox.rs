//! Cox partial-likelihood fitting with Efron or Breslow tie handling,
//! Schoenfeld-based proportional-hazards testing, the Breslow baseline
//! cumulative hazard, and per-spell score residuals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::likelihood::Design;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

impl std::str::FromStr for Ties {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efron" => Ok(Self::Efron),
            "breslow" => Ok(Self::Breslow),
            other => Err(Error::Data(format!(
                "unknown tie rule {other:?}, want efron|breslow"
            ))),
        }
    }
}

struct RiskGroup {
    time: f64,
    risk: Vec<usize>,
    dead: Vec<usize>,
}

fn risk_groups(design: &Design) -> Vec<RiskGroup> {
    let mut times: Vec<f64> = design
        .t
        .iter()
        .zip(&design.d)
        .filter(|&(_, &d)| d == 1.0)
        .map(|(&t, _)| t)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
    times.dedup();
    times
        .into_iter()
        .map(|tt| RiskGroup {
            time: tt,
            risk: (0..design.n()).filter(|&i| design.t[i] >= tt).collect(),
            dead: (0..design.n())
                .filter(|&i| design.t[i] == tt && design.d[i] == 1.0)
                .collect(),
        })
        .collect()
}

fn xrow(design: &Design, i: usize) -> DVector<f64> {
    design.x.row(i).transpose()
}

/// Partial log-likelihood with analytic gradient and Hessian.
pub fn cox_loglik_grad_hess(
    beta: &[f64],
    design: &Design,
    ties: Ties,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = design.p();
    let n = design.n();
    let eta: Vec<f64> = (0..n).map(|i| design.row_dot(i, beta)).collect();
    let ex: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let mut loglik = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);

    for grp in risk_groups(design) {
        let dk = grp.dead.len();
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        for &i in &grp.risk {
            let xi = xrow(design, i);
            s0 += ex[i];
            s1 += &xi * ex[i];
            s2 += &xi * xi.transpose() * ex[i];
        }
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        let mut d2 = DMatrix::zeros(p, p);
        for &i in &grp.dead {
            let xi = xrow(design, i);
            d0 += ex[i];
            d1 += &xi * ex[i];
            d2 += &xi * xi.transpose() * ex[i];
            loglik += eta[i];
            grad += xi;
        }
        match ties {
            Ties::Breslow => {
                loglik -= dk as f64 * s0.ln();
                grad -= &s1 * (dk as f64 / s0);
                hess -= (&s2 / s0 - (&s1 * s1.transpose()) / (s0 * s0)) * dk as f64;
            }
            Ties::Efron => {
                for l in 0..dk {
                    let f = l as f64 / dk as f64;
                    let a0 = s0 - f * d0;
                    let a1 = &s1 - &d1 * f;
                    let a2 = &s2 - &d2 * f;
                    loglik -= a0.ln();
                    grad -= &a1 / a0;
                    hess -= &a2 / a0 - (&a1 * a1.transpose()) / (a0 * a0);
                }
            }
        }
    }
    (loglik, grad, hess)
}

#[derive(Debug, Clone)]
pub struct CoxOutcome {
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max_norm: f64,
    pub hessian: DMatrix<f64>,
}

/// Newton-Raphson on the partial likelihood from beta = 0 with step-halving.
pub fn cox_fit(design: &Design, ties: Ties, tol: f64, max_iter: usize) -> Result<CoxOutcome> {
    if design.n_events() == 0 {
        return Err(Error::Data("cox_fit needs at least one event".into()));
    }
    let p = design.p();
    let mut beta = vec![0.0; p];
    let (mut loglik, mut grad, mut hess) = cox_loglik_grad_hess(&beta, design, ties);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_max_norm = grad.amax();

    for it in 1..=max_iter {
        iterations = it;
        grad_max_norm = grad.amax();
        if grad_max_norm <= tol {
            converged = true;
            break;
        }
        let mut step = hess
            .clone()
            .lu()
            .solve(&(-&grad))
            .ok_or(Error::SingularHessian { iteration: it })?;
        let mut next = None;
        for _ in 0..21 {
            let bn: Vec<f64> = beta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let (ln, gn, hn) = cox_loglik_grad_hess(&bn, design, ties);
            next = Some((bn, ln, gn, hn));
            if ln >= loglik - 1e-12 {
                break;
            }
            step /= 2.0;
        }
        let (bn, ln, gn, hn) = next.expect("at least one trial");
        beta = bn;
        loglik = ln;
        grad = gn;
        hess = hn;
    }

    Ok(CoxOutcome {
        beta,
        loglik,
        converged,
        iterations,
        grad_max_norm,
        hessian: hess,
    })
}

/// Global and per-covariate Grambsch-Therneau proportional-hazards test
/// results.
#[derive(Debug, Clone)]
pub struct PhTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Per-covariate (statistic, p at 1 df), diagonal components.
    pub components: Vec<(f64, f64)>,
}

/// Grambsch-Therneau global test of proportional hazards: regression of the
/// Schoenfeld residuals on event time, chi-square with one df per covariate.
pub fn schoenfeld_global_test(
    design: &Design,
    beta: &[f64],
    hessian: &DMatrix<f64>,
) -> Result<PhTest> {
    let p = design.p();
    if design.n_events() < p {
        return Err(Error::Data(format!(
            "proportional-hazards test needs at least {p} events, got {}",
            design.n_events()
        )));
    }
    let ex: Vec<f64> = (0..design.n())
        .map(|i| design.row_dot(i, beta).exp())
        .collect();
    let mut resid: Vec<DVector<f64>> = Vec::new();
    let mut gtimes: Vec<f64> = Vec::new();
    for grp in risk_groups(design) {
        let dk = grp.dead.len() as f64;
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        for &i in &grp.risk {
            s0 += ex[i];
            s1 += xrow(design, i) * ex[i];
        }
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        for &i in &grp.dead {
            d0 += ex[i];
            d1 += xrow(design, i) * ex[i];
        }
        let mut xbar = DVector::zeros(p);
        for l in 0..grp.dead.len() {
            let f = l as f64 / dk;
            xbar += (&s1 - &d1 * f) / (s0 - f * d0);
        }
        xbar /= dk;
        for &i in &grp.dead {
            resid.push(xrow(design, i) - &xbar);
            gtimes.push(grp.time);
        }
    }
    let ndead = gtimes.len() as f64;
    let gmean = gtimes.iter().sum::<f64>() / ndead;
    let gc: Vec<f64> = gtimes.iter().map(|t| t - gmean).collect();
    let gss: f64 = gc.iter().map(|v| v * v).sum();
    let mut u = DVector::zeros(p);
    for (r, &c) in resid.iter().zip(&gc) {
        u += r * c;
    }
    let info = -hessian.clone();
    let inv = info
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Data("singular information matrix in the hazards test".into()))?;
    let stat = u.dot(&(&inv * &u)) * ndead / gss;
    let pval = crate::special::chi2_sf(stat, p as f64)?;
    let mut components = Vec::with_capacity(p);
    for j in 0..p {
        let sj = u[j] * u[j] * inv[(j, j)] * ndead / gss;
        components.push((sj, crate::special::chi2_sf(sj, 1.0)?));
    }
    Ok(PhTest {
        statistic: stat,
        df: p,
        p_value: pval,
        components,
    })
}

/// Breslow baseline cumulative hazard as a right-continuous step function.
#[derive(Debug, Clone)]
pub struct BaselineHazard {
    times: Vec<f64>,
    cumvals: Vec<f64>,
}

impl BaselineHazard {
    pub fn eval(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&x| x <= t);
        if i == 0 {
            0.0
        } else {
            self.cumvals[i - 1]
        }
    }
}

pub fn breslow_baseline(design: &Design, beta: &[f64]) -> BaselineHazard {
    let ex: Vec<f64> = (0..design.n())
        .map(|i| design.row_dot(i, beta).exp())
        .collect();
    let mut times = Vec::new();
    let mut cumvals = Vec::new();
    let mut c = 0.0;
    for grp in risk_groups(design) {
        let s0: f64 = grp.risk.iter().map(|&i| ex[i]).sum();
        c += grp.dead.len() as f64 / s0;
        times.push(grp.time);
        cumvals.push(c);
    }
    BaselineHazard { times, cumvals }
}

/// Cox-Snell residuals for a Cox fit via the Breslow baseline.
pub fn cox_snell_cox(design: &Design, beta: &[f64]) -> Vec<f64> {
    let base = breslow_baseline(design, beta);
    (0..design.n())
        .map(|i| base.eval(design.t[i]) * design.row_dot(i, beta).exp())
        .collect()
}

/// Per-spell score residuals of the partial likelihood (the counting-process
/// decomposition of the score), used for the Cox sandwich covariance.
pub fn cox_score_residuals(design: &Design, beta: &[f64], ties: Ties) -> DMatrix<f64> {
    let p = design.p();
    let n = design.n();
    let ex: Vec<f64> = (0..n).map(|i| design.row_dot(i, beta).exp()).collect();
    let mut scores = DMatrix::<f64>::zeros(n, p);

    for grp in risk_groups(design) {
        let dk = grp.dead.len();
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        for &i in &grp.risk {
            s0 += ex[i];
            s1 += xrow(design, i) * ex[i];
        }
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        for &i in &grp.dead {
            d0 += ex[i];
            d1 += xrow(design, i) * ex[i];
        }
        // per-subinterval means and increments; Breslow is the f = 0 case
        let mut sum_inv_a0 = 0.0;
        let mut sum_xbar_over_a0 = DVector::zeros(p);
        let mut sum_inv_a0_dead = 0.0;
        let mut sum_xbar_over_a0_dead = DVector::zeros(p);
        let mut xbar_mean = DVector::zeros(p);
        for l in 0..dk {
            let f = match ties {
                Ties::Efron => l as f64 / dk as f64,
                Ties::Breslow => 0.0,
            };
            let a0 = s0 - f * d0;
            let xbar_l = (&s1 - &d1 * f) / a0;
            sum_inv_a0 += 1.0 / a0;
            sum_xbar_over_a0 += &xbar_l / a0;
            sum_inv_a0_dead += (1.0 - f) / a0;
            sum_xbar_over_a0_dead += &xbar_l * ((1.0 - f) / a0);
            xbar_mean += xbar_l;
        }
        xbar_mean /= dk as f64;

        let is_dead: std::collections::HashSet<usize> = grp.dead.iter().copied().collect();
        for &i in &grp.risk {
            let xi = xrow(design, i);
            let contrib = if is_dead.contains(&i) {
                (&xi - &xbar_mean)
                    - (&xi * sum_inv_a0_dead - &sum_xbar_over_a0_dead) * ex[i]
            } else {
                -((&xi * sum_inv_a0 - &sum_xbar_over_a0) * ex[i])
            };
            for j in 0..p {
                scores[(i, j)] += contrib[j];
            }
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SpellRecord, YearMonth};
    use crate::estimate::likelihood::Covariate;

    fn design(data: &[(u32, u8, bool)]) -> Design {
        let spells: Vec<SpellRecord> = data
            .iter()
            .enumerate()
            .map(|(i, &(t, d, r))| SpellRecord {
                start: YearMonth::from_index(100 + i as i64 * 20),
                duration: t,
                event: d,
                recession: r,
                price_decline: 1.0,
                interest_rate: 1.0,
            })
            .collect();
        Design::cox(&spells, &[Covariate::Recession]).unwrap()
    }

    #[test]
    fn identical_covariates_give_zero_beta() {
        let d = design(&[(1, 1, true), (2, 1, true), (3, 1, true), (5, 1, true)]);
        let fit = cox_fit(&d, Ties::Efron, 1e-8, 100).unwrap();
        assert!(fit.converged);
        assert!(fit.beta[0].abs() < 1e-8);
    }

    #[test]
    fn untied_spells_match_scalar_maximization() {
        // three untied spells, binary covariate, interior score root
        let d = design(&[(1, 1, true), (2, 1, false), (3, 1, true)]);
        let fit = cox_fit(&d, Ties::Efron, 1e-10, 100).unwrap();
        // bisection on the scalar score of the same partial likelihood
        let score = |b: f64| {
            let (_, g, _) = cox_loglik_grad_hess(&[b], &d, Ties::Efron);
            g[0]
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((fit.beta[0] - 0.5 * (lo + hi)).abs() < 1e-6);
    }

    #[test]
    fn score_residuals_sum_to_gradient() {
        let d = design(&[
            (1, 1, true),
            (1, 1, false),
            (2, 1, true),
            (2, 1, false),
            (3, 1, false),
            (4, 0, true),
        ]);
        for ties in [Ties::Efron, Ties::Breslow] {
            let beta = [0.37];
            let (_, g, _) = cox_loglik_grad_hess(&beta, &d, ties);
            let s = cox_score_residuals(&d, &beta, ties);
            let total: f64 = (0..d.n()).map(|i| s[(i, 0)]).sum();
            assert!((total - g[0]).abs() < 1e-10, "{ties:?}: {total} vs {}", g[0]);
        }
    }

    #[test]
    fn breslow_baseline_steps() {
        let d = design(&[(1, 1, true), (2, 1, false), (3, 0, true)]);
        let base = breslow_baseline(&d, &[0.0]);
        assert_eq!(base.eval(0.5), 0.0);
        assert!((base.eval(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((base.eval(10.0) - (1.0 / 3.0 + 1.0 / 2.0)).abs() < 1e-15);
    }
}
