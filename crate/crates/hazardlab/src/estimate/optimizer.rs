//! Newton-Raphson maximization with finite-difference derivatives,
//! step-halving, and ridge-regularized retries for ill-conditioned steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower bound for a log frailty variance; a fit parked here with an inward
/// gradient is treated as converged on the boundary.
pub const LN_THETA_FLOOR: f64 = -20.0;

const RIDGE_ATTEMPTS: usize = 12;
const HALVINGS: usize = 21;

pub fn fd_step(vj: f64) -> f64 {
    1e-5 * vj.abs().max(1.0)
}

/// Central-difference gradient.
pub fn fd_grad<F: Fn(&[f64]) -> f64>(f: &F, v: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; v.len()];
    let mut work = v.to_vec();
    for j in 0..v.len() {
        let h = fd_step(v[j]);
        work[j] = v[j] + h;
        let fp = f(&work);
        work[j] = v[j] - h;
        let fm = f(&work);
        work[j] = v[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Finite-difference Hessian: 3-point diagonal, 4-point off-diagonal.
pub fn fd_hess<F: Fn(&[f64]) -> f64>(f: &F, v: &[f64], f0: Option<f64>) -> DMatrix<f64> {
    let n = v.len();
    let hs: Vec<f64> = v.iter().map(|&x| fd_step(x)).collect();
    let f0 = f0.unwrap_or_else(|| f(v));
    let mut h = DMatrix::zeros(n, n);
    let mut work = v.to_vec();
    for j in 0..n {
        work[j] = v[j] + hs[j];
        let fp = f(&work);
        work[j] = v[j] - hs[j];
        let fm = f(&work);
        work[j] = v[j];
        h[(j, j)] = (fp - 2.0 * f0 + fm) / (hs[j] * hs[j]);
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let mut eval = |sj: f64, sk: f64| {
                work[j] = v[j] + sj * hs[j];
                work[k] = v[k] + sk * hs[k];
                let val = f(&work);
                work[j] = v[j];
                work[k] = v[k];
                val
            };
            let fpp = eval(1.0, 1.0);
            let fpm = eval(1.0, -1.0);
            let fmp = eval(-1.0, 1.0);
            let fmm = eval(-1.0, -1.0);
            let val = (fpp - fpm - fmp + fmm) / (4.0 * hs[j] * hs[k]);
            h[(j, k)] = val;
            h[(k, j)] = val;
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub v: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max_norm: f64,
    /// Hessian at the final point.
    pub hessian: DMatrix<f64>,
}

/// Maximize `f` from `v0`. `floor_index` marks a coordinate clamped at
/// [`LN_THETA_FLOOR`]; a point resting there counts as converged when every
/// other gradient entry is inside tolerance and the floored one points
/// outward.
pub fn newton_max<F: Fn(&[f64]) -> f64>(
    f: &F,
    v0: &[f64],
    tol: f64,
    max_iter: usize,
    floor_index: Option<usize>,
) -> Result<NewtonOutcome> {
    let mut v = v0.to_vec();
    let mut loglik = f(&v);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_max_norm = f64::INFINITY;

    for it in 1..=max_iter {
        iterations = it;
        let g = fd_grad(f, &v);
        let pinned = floor_index.is_some_and(|i| v[i] <= LN_THETA_FLOOR + 1e-12 && g[i] < tol);
        let checked_max = g
            .iter()
            .enumerate()
            .map(|(j, &gj)| {
                if pinned && Some(j) == floor_index {
                    0.0
                } else {
                    gj.abs()
                }
            })
            .fold(0.0f64, f64::max);
        grad_max_norm = checked_max;
        if checked_max <= tol {
            converged = true;
            break;
        }

        let hess = fd_hess(f, &v, Some(loglik));
        let neg_g = DVector::from_iterator(g.len(), g.iter().map(|&x| -x));
        let mut tau = 0.0;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        let mut last_solve_failed = true;
        for _ in 0..RIDGE_ATTEMPTS {
            let mut reg = hess.clone();
            for j in 0..v.len() {
                reg[(j, j)] -= tau;
            }
            let step = reg.lu().solve(&neg_g);
            last_solve_failed = step.is_none();
            if let Some(step) = step {
                let mut s: Vec<f64> = step.iter().copied().collect();
                for _ in 0..HALVINGS {
                    let mut vn: Vec<f64> = v.iter().zip(&s).map(|(a, b)| a + b).collect();
                    if let Some(i) = floor_index {
                        if vn[i] < LN_THETA_FLOOR {
                            vn[i] = LN_THETA_FLOOR;
                        }
                    }
                    let ln = f(&vn);
                    if ln >= loglik - 1e-12 {
                        accepted = Some((vn, ln));
                        break;
                    }
                    for x in &mut s {
                        *x /= 2.0;
                    }
                }
                if accepted.is_some() {
                    break;
                }
            }
            // singular solve or no ascent: regularize the Hessian and retry
            tau = if tau == 0.0 {
                let max_diag = (0..v.len())
                    .map(|j| hess[(j, j)].abs())
                    .fold(0.0f64, f64::max);
                1e-8 * max_diag.max(1.0)
            } else {
                tau * 10.0
            };
        }
        match accepted {
            Some((vn, ln)) => {
                v = vn;
                loglik = ln;
            }
            None => {
                if last_solve_failed {
                    return Err(Error::SingularHessian { iteration: it });
                }
                break;
            }
        }
    }

    let hessian = fd_hess(f, &v, None);
    Ok(NewtonOutcome {
        v,
        loglik,
        converged,
        iterations,
        grad_max_norm,
        hessian,
    })
}

/// Model covariance as the inverse negative Hessian.
pub fn invert_neg_hessian(hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    (-hessian.clone())
        .try_inverse()
        .ok_or_else(|| Error::Data("information matrix is singular at the optimum".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges_in_one_step() {
        let f = |v: &[f64]| -((v[0] - 2.0).powi(2) + 3.0 * (v[1] + 1.0).powi(2));
        let out = newton_max(&f, &[0.0, 0.0], 1e-8, 50, None).unwrap();
        assert!(out.converged);
        assert!((out.v[0] - 2.0).abs() < 1e-7);
        assert!((out.v[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn fd_grad_matches_analytic() {
        let f = |v: &[f64]| v[0].sin() + v[0] * v[1];
        let g = fd_grad(&f, &[0.7, -1.3]);
        assert!((g[0] - (0.7f64.cos() - 1.3)).abs() < 1e-9);
        assert!((g[1] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn floor_is_respected() {
        // maximum lies below the floor in coordinate 1
        let f = |v: &[f64]| -(v[0].powi(2)) + 0.5 * (-v[1]).min(25.0);
        let out = newton_max(&f, &[1.0, -3.0], 1e-8, 100, Some(1)).unwrap();
        assert!(out.v[1] >= LN_THETA_FLOOR - 1e-12);
    }
}
