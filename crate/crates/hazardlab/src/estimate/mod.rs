//! Model specification and maximum-likelihood fitting for the parametric
//! duration regressions and the Cox partial likelihood, plus prediction from
//! fitted models.

pub mod cox;
pub mod likelihood;
pub mod link;
pub mod optimizer;
pub mod predict;
pub mod robust;

use nalgebra::DMatrix;
use serde_json::json;

use crate::data::SpellRecord;
use crate::dist::Family;
use crate::error::{Error, Result};
use crate::special;

pub use cox::Ties;
pub use likelihood::{Covariate, Design, Frailty, Metric};
pub use link::{LinkSpec, LinkedParam};
pub use predict::PredictKind;

use likelihood::{model_loglik, packed_len, shape_slots, sigma_slots};
use link::LinkedDesign;
use optimizer::{fd_grad, fd_hess, invert_neg_hessian, newton_max};

/// Regression family: one of the parametric families or the semi-parametric
/// Cox model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    Parametric(Family),
    Cox,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Parametric(f) => f.name(),
            ModelFamily::Cox => "cox",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub metric: Metric,
    pub frailty: Frailty,
    pub covariates: Vec<Covariate>,
    pub link: Option<LinkSpec>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub robust: bool,
    pub ties: Ties,
}

impl ModelSpec {
    pub fn parametric(
        family: Family,
        metric: Metric,
        frailty: Frailty,
        covariates: Vec<Covariate>,
    ) -> Self {
        Self {
            family: ModelFamily::Parametric(family),
            metric,
            frailty,
            covariates,
            link: None,
            tolerance: 1e-8,
            max_iterations: 100,
            robust: true,
            ties: Ties::Efron,
        }
    }

    pub fn cox(covariates: Vec<Covariate>) -> Self {
        Self {
            family: ModelFamily::Cox,
            metric: Metric::PartialLikelihood,
            frailty: Frailty::None,
            covariates,
            link: None,
            tolerance: 1e-8,
            max_iterations: 100,
            robust: true,
            ties: Ties::Efron,
        }
    }

    pub fn with_link(mut self, link: LinkSpec) -> Self {
        self.link = Some(link);
        self
    }

    pub fn without_robust(mut self) -> Self {
        self.robust = false;
        self
    }

    /// Enforce the combinatorial rules between family, metric, frailty and
    /// linked parameters.
    pub fn validate(&self) -> Result<()> {
        match self.family {
            ModelFamily::Cox => {
                if self.metric != Metric::PartialLikelihood {
                    return Err(Error::Unsupported(
                        "a Cox model is fitted by partial likelihood only".into(),
                    ));
                }
                if self.frailty != Frailty::None {
                    return Err(Error::Unsupported(
                        "frailty is not supported in the Cox fit".into(),
                    ));
                }
                if self.link.is_some() {
                    return Err(Error::Unsupported(
                        "linked parameters need a parametric family".into(),
                    ));
                }
                if self.covariates.is_empty() {
                    return Err(Error::Data(
                        "a Cox model needs at least one covariate".into(),
                    ));
                }
            }
            ModelFamily::Parametric(family) => {
                match self.metric {
                    Metric::PartialLikelihood => {
                        return Err(Error::Unsupported(
                            "partial likelihood applies to the Cox model only".into(),
                        ))
                    }
                    Metric::Ph => {
                        if !matches!(family, Family::Exponential | Family::Weibull) {
                            return Err(Error::Unsupported(format!(
                                "{} does not close under proportional hazards; use the accelerated metric",
                                family.name()
                            )));
                        }
                    }
                    Metric::Aft => {}
                }
                if let Some(link) = &self.link {
                    if self.metric != Metric::Aft {
                        return Err(Error::Unsupported(
                            "linked parameters are fitted on the accelerated metric".into(),
                        ));
                    }
                    match link.param {
                        LinkedParam::Rate => {
                            if family != Family::Exponential {
                                return Err(Error::Unsupported(
                                    "a rate link needs the exponential family".into(),
                                ));
                            }
                            if !self.covariates.is_empty() {
                                return Err(Error::Unsupported(
                                    "a rate link replaces the covariate regression; move the covariates into the link".into(),
                                ));
                            }
                        }
                        LinkedParam::Sigma => {
                            if sigma_slots(family) == 0 {
                                return Err(Error::Unsupported(format!(
                                    "{} has no free scale to link",
                                    family.name()
                                )));
                            }
                        }
                        LinkedParam::Shape => {
                            if shape_slots(family) == 0 {
                                return Err(Error::Unsupported(format!(
                                    "{} has no free shape to link",
                                    family.name()
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn parametric_family(&self) -> Result<Family> {
        match self.family {
            ModelFamily::Parametric(f) => Ok(f),
            ModelFamily::Cox => Err(Error::Unsupported(
                "this operation needs a parametric family".into(),
            )),
        }
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Aft => "aft",
        Metric::Ph => "ph",
        Metric::PartialLikelihood => "partial_likelihood",
    }
}

fn frailty_name(f: Frailty) -> &'static str {
    match f {
        Frailty::None => "none",
        Frailty::Gamma => "gamma",
        Frailty::InverseGaussian => "invgauss",
    }
}

fn ties_name(t: Ties) -> &'static str {
    match t {
        Ties::Efron => "efron",
        Ties::Breslow => "breslow",
    }
}

/// Fitted parameters split into their natural blocks; ancillary entries stay
/// on the log scale.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub ancillary: Vec<f64>,
    pub ln_theta: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// Packed parameter names aligned with `params`.
    pub names: Vec<String>,
    /// Packed estimates on the fitted metric.
    pub params: Vec<f64>,
    /// Count of leading entries that form the coefficient block.
    pub n_beta: usize,
    pub loglik: f64,
    pub cov_model: DMatrix<f64>,
    pub cov_robust: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_max_norm: f64,
    pub n: usize,
    pub n_events: usize,
    pub k_params: usize,
    pub aic: f64,
    pub bic: f64,
}

impl FitResult {
    pub fn param_vector(&self) -> ParamVector {
        let has_theta = self.spec.frailty != Frailty::None;
        let anc_end = self.params.len() - usize::from(has_theta);
        ParamVector {
            beta: self.params[..self.n_beta].to_vec(),
            ancillary: self.params[self.n_beta..anc_end].to_vec(),
            ln_theta: has_theta.then(|| self.params[anc_end]),
        }
    }

    pub fn se_model(&self, j: usize) -> f64 {
        self.cov_model[(j, j)].max(0.0).sqrt()
    }

    pub fn se_robust(&self, j: usize) -> Option<f64> {
        self.cov_robust.as_ref().map(|c| c[(j, j)].max(0.0).sqrt())
    }

    /// Reporting standard error: robust when attached, model-based otherwise.
    pub fn se(&self, j: usize) -> f64 {
        self.se_robust(j).unwrap_or_else(|| self.se_model(j))
    }

    pub fn z_value(&self, j: usize) -> f64 {
        self.params[j] / self.se(j)
    }

    pub fn p_value(&self, j: usize) -> f64 {
        2.0 * special::std_normal_sf(self.z_value(j).abs())
    }

    fn entry_json(&self, j: usize) -> serde_json::Value {
        json!({
            "name": self.names[j],
            "estimate": self.params[j],
            "se_model": self.se_model(j),
            "se_robust": self.se_robust(j),
            "z": self.z_value(j),
            "p": self.p_value(j),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let has_theta = self.spec.frailty != Frailty::None;
        let anc_end = self.params.len() - usize::from(has_theta);
        let coefficients: Vec<_> = (0..self.n_beta).map(|j| self.entry_json(j)).collect();
        let ancillary: Vec<_> = (self.n_beta..anc_end).map(|j| self.entry_json(j)).collect();
        json!({
            "spec": {
                "family": self.spec.family.name(),
                "metric": metric_name(self.spec.metric),
                "frailty": frailty_name(self.spec.frailty),
                "covariates": self.spec.covariates.iter().map(|c| c.name()).collect::<Vec<_>>(),
                "linked_param": self.spec.link.as_ref().map(|l| match l.param {
                    LinkedParam::Rate => "rate",
                    LinkedParam::Sigma => "sigma",
                    LinkedParam::Shape => "shape",
                }),
                "ties": ties_name(self.spec.ties),
                "robust": self.spec.robust,
                "tolerance": self.spec.tolerance,
                "max_iterations": self.spec.max_iterations,
            },
            "coefficients": coefficients,
            "ancillary": ancillary,
            "ln_theta": has_theta.then(|| self.params[anc_end]),
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "n": self.n,
            "n_events": self.n_events,
            "iterations": self.iterations,
            "converged": self.converged,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json())?)
    }
}

/// Sample standard deviation (n − 1 divisor) of the event log-durations.
fn event_log_sd(design: &Design) -> f64 {
    let lt: Vec<f64> = design
        .y
        .iter()
        .zip(&design.d)
        .filter(|&(_, &d)| d == 1.0)
        .map(|(&y, _)| y)
        .collect();
    if lt.len() < 2 {
        return 1.0;
    }
    let mean = lt.iter().sum::<f64>() / lt.len() as f64;
    let var = lt.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (lt.len() - 1) as f64;
    let s = var.sqrt();
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Moment-based starting value for the log-scale ancillary.
fn ln_sigma0(design: &Design, family: Family, metric: Metric) -> f64 {
    let s = event_log_sd(design);
    match (family, metric) {
        // for a Weibull, SD(ln T) = sigma * pi / sqrt(6)
        (Family::Weibull, Metric::Aft) => (s * 6f64.sqrt() / std::f64::consts::PI).ln(),
        (Family::Weibull, Metric::Ph) => -(s * 6f64.sqrt() / std::f64::consts::PI).ln(),
        _ => s.ln(),
    }
}

fn param_names(family: Family, frailty: Frailty, metric: Metric, design: &Design) -> Vec<String> {
    let mut names = design.names.clone();
    if sigma_slots(family) == 1 {
        names.push(if metric == Metric::Ph { "ln_p" } else { "ln_sigma" }.to_string());
    }
    if shape_slots(family) == 1 {
        names.push("ln_shape".to_string());
    }
    if frailty != Frailty::None {
        names.push("ln_theta".to_string());
    }
    names
}

fn information_criteria(loglik: f64, k: usize, n: usize) -> (f64, f64) {
    let k = k as f64;
    (-2.0 * loglik + 2.0 * k, -2.0 * loglik + (n as f64).ln() * k)
}

struct FitPieces {
    names: Vec<String>,
    n_beta: usize,
    out: optimizer::NewtonOutcome,
    cov_model: DMatrix<f64>,
    cov_robust: Option<DMatrix<f64>>,
    n: usize,
    n_events: usize,
    k_params: usize,
}

fn assemble(spec: &ModelSpec, pieces: FitPieces) -> FitResult {
    let (aic, bic) = information_criteria(pieces.out.loglik, pieces.k_params, pieces.n);
    FitResult {
        spec: spec.clone(),
        names: pieces.names,
        params: pieces.out.v,
        n_beta: pieces.n_beta,
        loglik: pieces.out.loglik,
        cov_model: pieces.cov_model,
        cov_robust: pieces.cov_robust,
        iterations: pieces.out.iterations,
        converged: pieces.out.converged,
        grad_max_norm: pieces.out.grad_max_norm,
        n: pieces.n,
        n_events: pieces.n_events,
        k_params: pieces.k_params,
        aic,
        bic,
    }
}

/// Log-likelihood of a parametric specification at a packed vector, with the
/// offending spell named when a term is non-finite.
pub fn loglik(spec: &ModelSpec, spells: &[SpellRecord], v: &[f64]) -> Result<f64> {
    spec.validate()?;
    let family = spec.parametric_family()?;
    if let Some(link) = &spec.link {
        let ld = LinkedDesign::build(spells, family, spec.frailty, &spec.covariates, link)?;
        check_dim(v.len(), ld.packed_len())?;
        let mut sum = 0.0;
        for i in 0..ld.n() {
            let term = ld.loglik_row(v, i);
            if !term.is_finite() {
                return Err(Error::NonFiniteLikelihood { index: i });
            }
            sum += term;
        }
        return Ok(sum);
    }
    let design = Design::parametric(spells, &spec.covariates)?;
    check_dim(v.len(), packed_len(family, spec.frailty, design.p()))?;
    likelihood::loglik_checked(family, spec.frailty, spec.metric, v, &design)
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Data(format!(
            "parameter vector length {got} does not match the specification ({want})"
        )));
    }
    Ok(())
}

/// Gradient and Hessian of the specification's log-likelihood at `v`.
/// The exponential proportional-hazards case uses its closed forms; other
/// families use central finite differences.
pub fn score_hessian(
    spec: &ModelSpec,
    spells: &[SpellRecord],
    v: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    spec.validate()?;
    if spec.family == ModelFamily::Cox {
        let design = Design::cox(spells, &spec.covariates)?;
        check_dim(v.len(), design.p())?;
        let (_, g, h) = cox::cox_loglik_grad_hess(v, &design, spec.ties);
        return Ok((g.iter().copied().collect(), h));
    }
    let family = spec.parametric_family()?;
    if let Some(link) = &spec.link {
        let ld = LinkedDesign::build(spells, family, spec.frailty, &spec.covariates, link)?;
        check_dim(v.len(), ld.packed_len())?;
        let f = |vv: &[f64]| ld.loglik(vv);
        return Ok((fd_grad(&f, v), fd_hess(&f, v, None)));
    }
    let design = Design::parametric(spells, &spec.covariates)?;
    check_dim(v.len(), packed_len(family, spec.frailty, design.p()))?;
    if family == Family::Exponential && spec.metric == Metric::Ph && spec.frailty == Frailty::None
    {
        // closed-form score and Hessian of the exponential hazard regression
        let p = design.p();
        let mut g = vec![0.0; p];
        let mut h = DMatrix::zeros(p, p);
        for i in 0..design.n() {
            let ex = design.row_dot(i, v).exp();
            for j in 0..p {
                let xj = design.x[(i, j)];
                g[j] += design.d[i] * xj - design.t[i] * xj * ex;
                for l in 0..p {
                    h[(j, l)] -= design.t[i] * xj * design.x[(i, l)] * ex;
                }
            }
        }
        return Ok((g, h));
    }
    let f = |vv: &[f64]| model_loglik(family, spec.frailty, spec.metric, vv, &design);
    Ok((fd_grad(&f, v), fd_hess(&f, v, None)))
}

/// Newton-Raphson maximum-likelihood fit of a parametric specification.
pub fn fit_mle(spec: &ModelSpec, spells: &[SpellRecord]) -> Result<FitResult> {
    spec.validate()?;
    let family = spec.parametric_family().map_err(|_| {
        Error::Unsupported("the Cox model is fitted by fit_cox, not fit_mle".into())
    })?;
    if let Some(link) = &spec.link {
        return fit_linked(spec, family, link, spells);
    }
    let design = Design::parametric(spells, &spec.covariates)?;
    let k = packed_len(family, spec.frailty, design.p());
    if design.n_events() < k {
        return Err(Error::Data(format!(
            "the fit needs at least {k} events, got {}",
            design.n_events()
        )));
    }
    let mut v0 = vec![0.0; k];
    if sigma_slots(family) == 1 {
        v0[design.p()] = ln_sigma0(&design, family, spec.metric);
    }
    let floor = if spec.frailty != Frailty::None {
        v0[k - 1] = 0.1f64.ln();
        Some(k - 1)
    } else {
        None
    };
    let f = |vv: &[f64]| model_loglik(family, spec.frailty, spec.metric, vv, &design);
    let out = newton_max(&f, &v0, spec.tolerance, spec.max_iterations, floor)?;
    let cov_model = invert_neg_hessian(&out.hessian)?;
    let cov_robust = if spec.robust {
        let scores =
            robust::per_spell_scores(family, spec.frailty, spec.metric, &out.v, &design);
        Some(robust::sandwich(
            &cov_model,
            &scores,
            design.n(),
            spec.covariates.len(),
        )?)
    } else {
        None
    };
    Ok(assemble(
        spec,
        FitPieces {
            names: param_names(family, spec.frailty, spec.metric, &design),
            n_beta: design.p(),
            out,
            cov_model,
            cov_robust,
            n: design.n(),
            n_events: design.n_events(),
            k_params: k,
        },
    ))
}

fn fit_linked(
    spec: &ModelSpec,
    family: Family,
    link: &LinkSpec,
    spells: &[SpellRecord],
) -> Result<FitResult> {
    let ld = LinkedDesign::build(spells, family, spec.frailty, &spec.covariates, link)?;
    let k = ld.packed_len();
    if ld.main.n_events() < k {
        return Err(Error::Data(format!(
            "the fit needs at least {k} events, got {}",
            ld.main.n_events()
        )));
    }
    let v0 = ld.init(ln_sigma0(&ld.main, family, Metric::Aft));
    let floor = (spec.frailty != Frailty::None).then(|| k - 1);
    let f = |vv: &[f64]| ld.loglik(vv);
    let out = newton_max(&f, &v0, spec.tolerance, spec.max_iterations, floor)?;
    let cov_model = invert_neg_hessian(&out.hessian)?;
    let cov_robust = if spec.robust {
        let scores = robust::scores_from_rows(|vv, i| ld.loglik_row(vv, i), &out.v, ld.n());
        Some(robust::sandwich(
            &cov_model,
            &scores,
            ld.n(),
            spec.covariates.len() + link.covariates.len(),
        )?)
    } else {
        None
    };
    let n_beta = match link.param {
        LinkedParam::Rate => ld.link.p(),
        _ => ld.main.p(),
    };
    Ok(assemble(
        spec,
        FitPieces {
            names: ld.names(),
            n_beta,
            out,
            cov_model,
            cov_robust,
            n: ld.n(),
            n_events: ld.main.n_events(),
            k_params: k,
        },
    ))
}

/// Fit with one distribution parameter's log regressed on covariates.
pub fn parameter_link_fit(spec: &ModelSpec, spells: &[SpellRecord]) -> Result<FitResult> {
    if spec.link.is_none() {
        return Err(Error::Data(
            "the specification has no linked parameter".into(),
        ));
    }
    fit_mle(spec, spells)
}

/// Cox partial-likelihood fit.
pub fn fit_cox(spec: &ModelSpec, spells: &[SpellRecord]) -> Result<FitResult> {
    spec.validate()?;
    if spec.family != ModelFamily::Cox {
        return Err(Error::Unsupported(
            "fit_cox needs a Cox specification".into(),
        ));
    }
    let design = Design::cox(spells, &spec.covariates)?;
    let out = cox::cox_fit(&design, spec.ties, spec.tolerance, spec.max_iterations)?;
    let cov_model = invert_neg_hessian(&out.hessian)?;
    let cov_robust = if spec.robust {
        let scores = cox::cox_score_residuals(&design, &out.beta, spec.ties);
        Some(robust::sandwich(
            &cov_model,
            &scores,
            design.n(),
            design.p(),
        )?)
    } else {
        None
    };
    let k = design.p();
    let pieces = FitPieces {
        names: design.names.clone(),
        n_beta: k,
        out: optimizer::NewtonOutcome {
            v: out.beta,
            loglik: out.loglik,
            converged: out.converged,
            iterations: out.iterations,
            grad_max_norm: out.grad_max_norm,
            hessian: out.hessian,
        },
        cov_model,
        cov_robust,
        n: design.n(),
        n_events: design.n_events(),
        k_params: k,
    };
    Ok(assemble(spec, pieces))
}

/// Route a specification to the matching fitter.
pub fn fit(spec: &ModelSpec, spells: &[SpellRecord]) -> Result<FitResult> {
    match spec.family {
        ModelFamily::Cox => fit_cox(spec, spells),
        ModelFamily::Parametric(_) => fit_mle(spec, spells),
    }
}

/// Sandwich covariance for a converged fit, recomputed from the spells.
pub fn robust_covariance(fit: &FitResult, spells: &[SpellRecord]) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(Error::NonConvergence {
            iterations: fit.iterations,
            grad_norm: fit.grad_max_norm,
        });
    }
    match fit.spec.family {
        ModelFamily::Cox => {
            let design = Design::cox(spells, &fit.spec.covariates)?;
            let scores = cox::cox_score_residuals(&design, &fit.params, fit.spec.ties);
            robust::sandwich(&fit.cov_model, &scores, design.n(), design.p())
        }
        ModelFamily::Parametric(family) => {
            if let Some(link) = &fit.spec.link {
                let ld =
                    LinkedDesign::build(spells, family, fit.spec.frailty, &fit.spec.covariates, link)?;
                let scores =
                    robust::scores_from_rows(|vv, i| ld.loglik_row(vv, i), &fit.params, ld.n());
                return robust::sandwich(
                    &fit.cov_model,
                    &scores,
                    ld.n(),
                    fit.spec.covariates.len() + link.covariates.len(),
                );
            }
            let design = Design::parametric(spells, &fit.spec.covariates)?;
            let scores = robust::per_spell_scores(
                family,
                fit.spec.frailty,
                fit.spec.metric,
                &fit.params,
                &design,
            );
            robust::sandwich(&fit.cov_model, &scores, design.n(), fit.spec.covariates.len())
        }
    }
}

fn require_plain_parametric(fit: &FitResult) -> Result<Family> {
    if !fit.converged {
        return Err(Error::NonConvergence {
            iterations: fit.iterations,
            grad_norm: fit.grad_max_norm,
        });
    }
    if fit.spec.link.is_some() {
        return Err(Error::Unsupported(
            "prediction with linked parameters is not supported".into(),
        ));
    }
    match fit.spec.family {
        ModelFamily::Parametric(f) => Ok(f),
        ModelFamily::Cox => Err(Error::Unsupported(
            "the Cox fit leaves the baseline unspecified; parametric prediction is unavailable"
                .into(),
        )),
    }
}

/// Survivor, hazard, or cumulative hazard at duration `t` for covariate
/// values `covariates` (without the intercept slot).
pub fn predict(
    fit: &FitResult,
    covariates: &[f64],
    t: f64,
    kind: PredictKind,
) -> Result<f64> {
    let family = require_plain_parametric(fit)?;
    if covariates.len() + 1 != fit.n_beta {
        return Err(Error::Data(format!(
            "expected {} covariate values, got {}",
            fit.n_beta - 1,
            covariates.len()
        )));
    }
    let v_aft = likelihood::as_aft(
        family,
        fit.spec.frailty,
        fit.spec.metric,
        &fit.params,
        fit.n_beta,
    );
    let mut x = Vec::with_capacity(fit.n_beta);
    x.push(1.0);
    x.extend_from_slice(covariates);
    predict::predict_aft(family, fit.spec.frailty, &v_aft, fit.n_beta, &x, t, kind)
}

/// Multiplier the covariates apply to the baseline survival time: exp of the
/// non-intercept part of the accelerated-metric linear predictor.
pub fn acceleration_multiplier(fit: &FitResult, covariates: &[f64]) -> Result<f64> {
    let family = require_plain_parametric(fit)?;
    if covariates.len() + 1 != fit.n_beta {
        return Err(Error::Data(format!(
            "expected {} covariate values, got {}",
            fit.n_beta - 1,
            covariates.len()
        )));
    }
    let v_aft = likelihood::as_aft(
        family,
        fit.spec.frailty,
        fit.spec.metric,
        &fit.params,
        fit.n_beta,
    );
    Ok(covariates
        .iter()
        .zip(&v_aft[1..fit.n_beta])
        .map(|(x, b)| x * b)
        .sum::<f64>()
        .exp())
}

/// Location and height of the marginal hazard maximum on [0.01, 60] months,
/// found by golden-section search to 1e-6.
pub fn hazard_peak(fit: &FitResult, covariates: &[f64]) -> Result<(f64, f64)> {
    let family = require_plain_parametric(fit)?;
    if !predict::hazard_is_unimodal(family, fit.spec.frailty) {
        return Err(Error::Unsupported(format!(
            "the {} hazard is monotone here; its extremum sits at a boundary of the duration range",
            family.name()
        )));
    }
    let v_aft = likelihood::as_aft(
        family,
        fit.spec.frailty,
        fit.spec.metric,
        &fit.params,
        fit.n_beta,
    );
    let mut x = Vec::with_capacity(fit.n_beta);
    x.push(1.0);
    x.extend_from_slice(covariates);
    let view = predict::AftView::new(family, fit.spec.frailty, &v_aft, fit.n_beta);
    let h = |t: f64| view.hazard(&x, t);
    Ok(predict::golden_peak(&h, 0.01, 60.0, 1e-6))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::YearMonth;

    fn toy_spells(n: usize) -> Vec<SpellRecord> {
        // deterministic mix of durations/covariates, all events
        (0..n)
            .map(|i| SpellRecord {
                start: YearMonth::from_index(24000 + 14 * i as i64),
                duration: 1 + (i % 7) as u32 + u32::from(i % 3 == 0),
                event: 1,
                recession: i % 2 == 0,
                price_decline: 1.0 + (i % 5) as f64 * 0.7,
                interest_rate: 2.0 + (i % 4) as f64 * 0.5,
            })
            .collect()
    }

    #[test]
    fn exponential_no_covariates_matches_closed_form() {
        let sp = toy_spells(40);
        let spec = ModelSpec::parametric(
            Family::Exponential,
            Metric::Ph,
            Frailty::None,
            vec![],
        )
        .without_robust();
        let fit = fit_mle(&spec, &sp).unwrap();
        assert!(fit.converged);
        let td: f64 = sp.iter().map(|s| f64::from(s.duration)).sum();
        let dd: f64 = sp.iter().map(|s| f64::from(s.event)).sum();
        // intercept is ln lambda-hat = ln(sum d / sum t)
        assert!((fit.params[0] - (dd / td).ln()).abs() < 1e-10);
    }

    #[test]
    fn exponential_ph_closed_form_score_hessian() {
        let sp = toy_spells(25);
        let spec = ModelSpec::parametric(
            Family::Exponential,
            Metric::Ph,
            Frailty::None,
            vec![Covariate::Recession, Covariate::PriceDecline],
        );
        let v = [0.2, -0.3, 0.05];
        let (g, h) = score_hessian(&spec, &sp, &v).unwrap();
        let design = Design::parametric(&sp, &spec.covariates).unwrap();
        let f = |vv: &[f64]| model_loglik(Family::Exponential, Frailty::None, Metric::Ph, vv, &design);
        let g_fd = fd_grad(&f, &v);
        for j in 0..3 {
            let scale = g[j].abs().max(1.0);
            assert!((g[j] - g_fd[j]).abs() / scale < 1e-5, "{:?} vs {:?}", g, g_fd);
        }
        // Hessian must be symmetric and negative definite here
        for j in 0..3 {
            for l in 0..3 {
                assert!((h[(j, l)] - h[(l, j)]).abs() < 1e-12);
            }
        }
        assert!(h.symmetric_eigenvalues().iter().all(|&e| e < 0.0));
    }

    #[test]
    fn weibull_closes_under_both_metrics() {
        let sp = toy_spells(60);
        let covs = vec![Covariate::Recession, Covariate::InterestRate];
        let aft = fit_mle(
            &ModelSpec::parametric(Family::Weibull, Metric::Aft, Frailty::None, covs.clone())
                .without_robust(),
            &sp,
        )
        .unwrap();
        let ph = fit_mle(
            &ModelSpec::parametric(Family::Weibull, Metric::Ph, Frailty::None, covs).without_robust(),
            &sp,
        )
        .unwrap();
        assert!((aft.loglik - ph.loglik).abs() < 1e-8);
        let p_hat = ph.params[3].exp();
        for j in 0..3 {
            assert!(
                (ph.params[j] + p_hat * aft.params[j]).abs() < 1e-6,
                "coefficient {j}: {} vs {}",
                ph.params[j],
                -p_hat * aft.params[j]
            );
        }
    }

    #[test]
    fn spec_invariants_rejected() {
        assert!(ModelSpec::parametric(
            Family::LogNormal,
            Metric::Ph,
            Frailty::None,
            vec![]
        )
        .validate()
        .is_err());
        let mut cox = ModelSpec::cox(vec![Covariate::Recession]);
        cox.metric = Metric::Aft;
        assert!(cox.validate().is_err());
        assert!(ModelSpec::cox(vec![]).validate().is_err());
    }

    #[test]
    fn intercept_only_link_reduces_to_plain_fit() {
        let sp = toy_spells(45);
        let covs = vec![Covariate::Recession];
        let plain = fit_mle(
            &ModelSpec::parametric(Family::Weibull, Metric::Aft, Frailty::None, covs.clone())
                .without_robust(),
            &sp,
        )
        .unwrap();
        let linked = parameter_link_fit(
            &ModelSpec::parametric(Family::Weibull, Metric::Aft, Frailty::None, covs)
                .with_link(LinkSpec {
                    param: LinkedParam::Sigma,
                    covariates: vec![],
                })
                .without_robust(),
            &sp,
        )
        .unwrap();
        assert!((plain.loglik - linked.loglik).abs() < 1e-10);
    }

    #[test]
    fn rate_link_equals_exponential_ph_fit() {
        let sp = toy_spells(45);
        let ph = fit_mle(
            &ModelSpec::parametric(
                Family::Exponential,
                Metric::Ph,
                Frailty::None,
                vec![Covariate::Recession, Covariate::PriceDecline],
            )
            .without_robust(),
            &sp,
        )
        .unwrap();
        let linked = parameter_link_fit(
            &ModelSpec::parametric(Family::Exponential, Metric::Aft, Frailty::None, vec![])
                .with_link(LinkSpec {
                    param: LinkedParam::Rate,
                    covariates: vec![Covariate::Recession, Covariate::PriceDecline],
                })
                .without_robust(),
            &sp,
        )
        .unwrap();
        assert!((ph.loglik - linked.loglik).abs() < 1e-8);
        for j in 0..3 {
            assert!((ph.params[j] - linked.params[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn predict_baseline_at_zero_covariates() {
        let sp = toy_spells(50);
        let spec = ModelSpec::parametric(
            Family::LogNormal,
            Metric::Aft,
            Frailty::None,
            vec![Covariate::Recession],
        )
        .without_robust();
        let fit = fit_mle(&spec, &sp).unwrap();
        let s = predict(&fit, &[0.0], 2.0, PredictKind::Survivor).unwrap();
        let ch = predict(&fit, &[0.0], 2.0, PredictKind::CumHazard).unwrap();
        assert!((s - (-ch).exp()).abs() < 1e-12);
        // x = 0 leaves only the intercept: the baseline in the adopted sense
        let mu = fit.params[0];
        let sigma = fit.params[2].exp();
        let w = (2f64.ln() - mu) / sigma;
        let direct = crate::special::std_normal_sf(w);
        assert!((s - direct).abs() < 1e-12);
    }

    #[test]
    fn ph_power_rule() {
        let sp = toy_spells(50);
        let spec = ModelSpec::parametric(
            Family::Weibull,
            Metric::Ph,
            Frailty::None,
            vec![Covariate::Recession],
        )
        .without_robust();
        let fit = fit_mle(&spec, &sp).unwrap();
        let b = fit.params[1];
        for t in [0.5, 2.0, 6.5] {
            let s0 = predict(&fit, &[0.0], t, PredictKind::Survivor).unwrap();
            let s1 = predict(&fit, &[1.0], t, PredictKind::Survivor).unwrap();
            assert!((s1 - s0.powf(b.exp())).abs() < 1e-10);
        }
    }

    #[test]
    fn hazard_peak_refuses_monotone_families() {
        let sp = toy_spells(40);
        let fit = fit_mle(
            &ModelSpec::parametric(Family::Exponential, Metric::Ph, Frailty::None, vec![])
                .without_robust(),
            &sp,
        )
        .unwrap();
        assert!(hazard_peak(&fit, &[]).is_err());
    }

    #[test]
    fn json_round_trip_fields() {
        let sp = toy_spells(40);
        let fit = fit_mle(
            &ModelSpec::parametric(
                Family::LogNormal,
                Metric::Aft,
                Frailty::None,
                vec![Covariate::Recession],
            ),
            &sp,
        )
        .unwrap();
        let v = fit.to_json();
        assert_eq!(v["spec"]["family"], "lognormal");
        assert_eq!(v["n"], 40);
        assert_eq!(v["coefficients"].as_array().unwrap().len(), 2);
        assert_eq!(v["ancillary"].as_array().unwrap().len(), 1);
        assert!(v["ln_theta"].is_null());
        assert!(v["converged"].as_bool().unwrap());
    }
}
