//! Sandwich covariance from per-spell score contributions.

use nalgebra::DMatrix;

use crate::dist::Family;
use crate::error::{Error, Result};

use super::likelihood::{model_loglik, Design, Frailty, Metric};
use super::optimizer::fd_step;

/// Per-spell score rows: central finite differences of each spell's own
/// log-likelihood term with respect to every packed parameter.
pub fn per_spell_scores(
    family: Family,
    frailty: Frailty,
    metric: Metric,
    v: &[f64],
    design: &Design,
) -> DMatrix<f64> {
    let single = |vv: &[f64], i: usize| {
        let sub = Design {
            t: vec![design.t[i]],
            y: vec![design.y[i]],
            d: vec![design.d[i]],
            x: design.x.rows(i, 1).into_owned(),
            names: design.names.clone(),
            has_intercept: design.has_intercept,
        };
        model_loglik(family, frailty, metric, vv, &sub)
    };
    scores_from_rows(single, v, design.n())
}

/// Central-difference score matrix from any per-row log-likelihood.
pub fn scores_from_rows(
    row_loglik: impl Fn(&[f64], usize) -> f64,
    v: &[f64],
    n: usize,
) -> DMatrix<f64> {
    let m = v.len();
    let mut scores = DMatrix::zeros(n, m);
    let mut vp = v.to_vec();
    let mut vm = v.to_vec();
    for j in 0..m {
        let h = fd_step(v[j]);
        vp[j] = v[j] + h;
        vm[j] = v[j] - h;
        for i in 0..n {
            scores[(i, j)] = (row_loglik(&vp, i) - row_loglik(&vm, i)) / (2.0 * h);
        }
        vp[j] = v[j];
        vm[j] = v[j];
    }
    scores
}

/// Sandwich estimator: bread = model covariance, meat = score outer-product
/// sum, small-sample scaled by n/(n − k − 1) with k the count of
/// non-intercept covariates.
pub fn sandwich(
    cov_model: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    n: usize,
    k_nonintercept: usize,
) -> Result<DMatrix<f64>> {
    if n <= k_nonintercept + 1 {
        return Err(Error::Data(format!(
            "sandwich scaling needs n > k + 1, got n={n} k={k_nonintercept}"
        )));
    }
    let meat = scores.transpose() * scores;
    let scale = n as f64 / (n - k_nonintercept - 1) as f64;
    Ok(cov_model * meat * cov_model * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SpellRecord, YearMonth};
    use crate::estimate::likelihood::Covariate;
    use crate::estimate::optimizer::fd_grad;

    fn spells() -> Vec<SpellRecord> {
        (0..6)
            .map(|i| SpellRecord {
                start: YearMonth::new(2000, 1 + i as u32).unwrap(),
                duration: 1 + (i % 3) as u32,
                event: 1,
                recession: i % 2 == 0,
                price_decline: 1.0 + 0.5 * i as f64,
                interest_rate: 3.0,
            })
            .collect()
    }

    #[test]
    fn scores_sum_to_total_gradient() {
        let sp = spells();
        let d = Design::parametric(&sp, &[Covariate::Recession, Covariate::PriceDecline]).unwrap();
        let v = [0.2, 0.1, -0.05, -0.3];
        let s = per_spell_scores(Family::LogNormal, Frailty::None, Metric::Aft, &v, &d);
        let f = |vv: &[f64]| model_loglik(Family::LogNormal, Frailty::None, Metric::Aft, vv, &d);
        let g = fd_grad(&f, &v);
        for j in 0..v.len() {
            let col: f64 = (0..d.n()).map(|i| s[(i, j)]).sum();
            assert!((col - g[j]).abs() < 1e-7, "column {j}: {col} vs {}", g[j]);
        }
    }

    #[test]
    fn one_spell_sandwich_is_rank_one_triple_product() {
        let sp = &spells()[..1];
        let d = Design::parametric(sp, &[Covariate::PriceDecline]).unwrap();
        let v = [0.3, 0.05, -0.2];
        let s = per_spell_scores(Family::LogNormal, Frailty::None, Metric::Aft, &v, &d);
        let bread = DMatrix::identity(3, 3) * 0.5;
        let sw = sandwich(&bread, &s, 5, 1).unwrap();
        let u = s.row(0).transpose();
        let brute = &bread * (&u * u.transpose()) * &bread * (5.0 / 3.0);
        assert!((sw - brute).norm() < 1e-12);
    }
}
