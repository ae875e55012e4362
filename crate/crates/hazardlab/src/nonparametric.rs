//! Kaplan-Meier product-limit estimation with Greenwood standard errors and
//! Epanechnikov-smoothed hazard estimation.

use crate::data::SpellRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub time: f64,
    pub value: f64,
    pub std_err: f64,
}

/// An estimated curve sampled at strictly increasing times.
#[derive(Debug, Clone, Default)]
pub struct CurveSample {
    pub points: Vec<CurvePoint>,
}

impl CurveSample {
    /// Step-function value at `t` for survivor-style curves: 1 before the
    /// first sampled time, last sampled value at or after it.
    pub fn step_value_at(&self, t: f64) -> f64 {
        let mut v = 1.0;
        for p in &self.points {
            if p.time <= t {
                v = p.value;
            } else {
                break;
            }
        }
        v
    }

    pub fn point_at(&self, t: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.time == t)
    }
}

/// Product-limit survivor estimate over distinct event times. Censored
/// observations shrink later risk sets without contributing events. The
/// standard error is Greenwood's; it is reported as 0 once the curve
/// reaches 0.
pub fn kaplan_meier(t: &[f64], events: &[u8]) -> Result<CurveSample> {
    if t.is_empty() || t.len() != events.len() {
        return Err(Error::Data(format!(
            "kaplan_meier needs matching non-empty samples, got {} times and {} events",
            t.len(),
            events.len()
        )));
    }
    let mut event_times: Vec<f64> = t
        .iter()
        .zip(events)
        .filter(|&(_, &d)| d == 1)
        .map(|(&tt, _)| tt)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    event_times.dedup();

    let mut s = 1.0;
    let mut greenwood = 0.0;
    let mut points = Vec::with_capacity(event_times.len());
    for &tt in &event_times {
        let nrisk = t.iter().filter(|&&x| x >= tt).count() as f64;
        let dd = t
            .iter()
            .zip(events)
            .filter(|&(&x, &d)| x == tt && d == 1)
            .count() as f64;
        s *= 1.0 - dd / nrisk;
        let se = if nrisk > dd {
            greenwood += dd / (nrisk * (nrisk - dd));
            s * greenwood.sqrt()
        } else {
            0.0
        };
        points.push(CurvePoint {
            time: tt,
            value: s,
            std_err: se,
        });
    }
    Ok(CurveSample { points })
}

/// Kaplan-Meier over an optional stratum filter of a spell set.
pub fn kaplan_meier_stratum(
    spells: &[SpellRecord],
    label: &str,
    filter: Option<&dyn Fn(&SpellRecord) -> bool>,
) -> Result<CurveSample> {
    let selected: Vec<&SpellRecord> = match filter {
        None => spells.iter().collect(),
        Some(f) => spells.iter().filter(|s| f(s)).collect(),
    };
    if selected.is_empty() {
        return Err(Error::EmptyGroup(label.to_string()));
    }
    let t: Vec<f64> = selected.iter().map(|s| f64::from(s.duration)).collect();
    let d: Vec<u8> = selected.iter().map(|s| s.event).collect();
    kaplan_meier(&t, &d)
}

/// Epanechnikov kernel mass below v (support [-1, 1]).
pub fn epanechnikov_cdf(v: f64) -> f64 {
    let v = v.clamp(-1.0, 1.0);
    0.25 * (2.0 + 3.0 * v - v * v * v)
}

/// Kernel-smoothed hazard: Epanechnikov-weighted Nelson-Aalen increments on
/// the supplied grid, with left-boundary mass correction at t = 1.
pub fn smoothed_hazard(t: &[f64], events: &[u8], bandwidth: f64, grid: &[f64]) -> Result<CurveSample> {
    if bandwidth <= 0.0 || !bandwidth.is_finite() {
        return Err(Error::Domain(format!(
            "smoothed_hazard requires bandwidth > 0, got {bandwidth}"
        )));
    }
    if t.is_empty() || t.len() != events.len() {
        return Err(Error::Data(
            "smoothed_hazard needs matching non-empty samples".into(),
        ));
    }
    if events.iter().all(|&d| d == 0) {
        return Err(Error::Data(
            "smoothed_hazard needs at least one event".into(),
        ));
    }
    let mut event_times: Vec<f64> = t
        .iter()
        .zip(events)
        .filter(|&(_, &d)| d == 1)
        .map(|(&tt, _)| tt)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    event_times.dedup();
    let increments: Vec<(f64, f64)> = event_times
        .iter()
        .map(|&tt| {
            let nrisk = t.iter().filter(|&&x| x >= tt).count() as f64;
            let dd = t
                .iter()
                .zip(events)
                .filter(|&(&x, &d)| x == tt && d == 1)
                .count() as f64;
            (tt, dd / nrisk)
        })
        .collect();

    let points = grid
        .iter()
        .map(|&g| {
            let mut s = 0.0;
            for &(tt, dl) in &increments {
                let u = (g - tt) / bandwidth;
                if u.abs() < 1.0 {
                    s += 0.75 * (1.0 - u * u) / bandwidth * dl;
                }
            }
            let q = epanechnikov_cdf((g - 1.0) / bandwidth);
            CurvePoint {
                time: g,
                value: if q > 0.0 { s / q } else { 0.0 },
                std_err: 0.0,
            }
        })
        .collect();
    Ok(CurveSample { points })
}

/// Uniform grid from 1 to the largest duration in 0.1-month steps.
pub fn default_hazard_grid(t: &[f64]) -> Vec<f64> {
    let max = t.iter().cloned().fold(1.0f64, f64::max);
    let n = ((max - 1.0) / 0.1).round() as usize;
    (0..=n).map(|i| 1.0 + 0.1 * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product_limit() {
        let t = [1.0, 1.0, 2.0, 3.0];
        let d = [1, 1, 1, 1];
        let km = kaplan_meier(&t, &d).unwrap();
        let vals: Vec<f64> = km.points.iter().map(|p| p.value).collect();
        assert_eq!(vals, vec![0.5, 0.25, 0.0]);
        assert_eq!(km.points[2].std_err, 0.0);
    }

    #[test]
    fn censored_only_is_flat() {
        let km = kaplan_meier(&[2.0], &[0]).unwrap();
        assert!(km.points.is_empty());
        assert_eq!(km.step_value_at(5.0), 1.0);
    }

    #[test]
    fn km_equals_empirical_without_censoring() {
        let t = [1.0, 2.0, 2.0, 3.0, 5.0, 7.0];
        let d = [1u8; 6];
        let km = kaplan_meier(&t, &d).unwrap();
        for p in &km.points {
            let emp = t.iter().filter(|&&x| x > p.time).count() as f64 / t.len() as f64;
            assert!((p.value - emp).abs() < 1e-15);
        }
    }

    #[test]
    fn single_event_smoothing_peaks_near_event() {
        // event far enough from the left boundary that the mass
        // correction is inactive around it
        let grid: Vec<f64> = (0..=70).map(|i| 1.0 + 0.1 * i as f64).collect();
        let h = smoothed_hazard(&[4.0], &[1], 2.0, &grid).unwrap();
        let best = h
            .points
            .iter()
            .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
            .unwrap();
        assert!((best.time - 4.0).abs() < 0.11);
    }

    #[test]
    fn bad_bandwidth_rejected() {
        assert!(smoothed_hazard(&[1.0], &[1], 0.0, &[1.0]).is_err());
    }
}
