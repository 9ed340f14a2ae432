//! Gradient and Hessian identities implied by an equivariance `f∘H = G∘f`.
//!
//! Every check evaluates both sides independently (the left side from the
//! differentiated loss, the right side from loss and transform pieces) and
//! returns an [`IdentityReport`]. Mathematical preconditions that do not hold
//! are errors; numerical disagreement is a failing report, never an error.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffConfig, DiffMode};
use crate::error::{Error, Result};
use crate::linalg::{matmul, numerical_rank, power_iteration_max, square_data, symmetric_eigen};
use crate::models::{
    build_model, grad_and_hessian_of_loss, LossDerivatives, LossFamily, Model, ModelSpec, Objective,
};
use crate::models::{Architecture, Loss};
use crate::tensor::{compose, compose_k, dot, invert_square, reciprocal_condition, Tensor};
use crate::transforms::{
    build_transform, derivative_certificates, fixed_point_project, good_position, DerivSlot,
    TransformDerivatives, TransformKind, TransformSpec, Transformation,
};

/// Default pass threshold on `rel_residual` for a differentiation mode.
pub fn default_tolerance(mode: DiffMode) -> f64 {
    match mode {
        DiffMode::Exact => 1e-9,
        DiffMode::FiniteDifference => 1e-4,
    }
}

/// Pass threshold for finite-difference certificates of transform derivatives.
pub const CERTIFICATE_TOL: f64 = 1e-6;

/// Largest `‖H(θ) − θ‖ / max(1, ‖θ‖)` accepted as a fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub diff: DiffConfig,
    pub tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig::for_mode(DiffConfig::exact())
    }
}

impl CheckConfig {
    pub fn for_mode(diff: DiffConfig) -> Self {
        CheckConfig {
            diff,
            tolerance: default_tolerance(diff.mode),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub model: String,
    pub loss: String,
    pub transform: Option<String>,
    pub seed: Option<u64>,
    pub position: Option<usize>,
    pub lambda: Vec<f64>,
}

impl ReportContext {
    pub fn new(model: &Model, loss: &Loss) -> Self {
        ReportContext {
            model: model.name.clone(),
            loss: loss.family.name().to_string(),
            ..ReportContext::default()
        }
    }

    fn with_transform(mut self, t: &Transformation, lambda: &[f64]) -> Self {
        self.transform = Some(t.name.clone());
        self.lambda = lambda.to_vec();
        self
    }
}

/// Outcome of one identity evaluation. `rel_residual` is
/// `abs_residual / max(lhs_norm, rhs_norm, scale, 1e-12)`, where `scale` is
/// the natural magnitude of the identity's ingredients, so identities whose
/// sides vanish exactly are judged against roundoff of their parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub check_name: String,
    pub anchor: String,
    pub lhs_norm: f64,
    pub rhs_norm: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
    pub scale: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub context: ReportContext,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl IdentityReport {
    /// Compares two tensors of equal shape.
    pub fn compare(
        check_name: &str,
        anchor: &str,
        lhs: &Tensor,
        rhs: &Tensor,
        scale: f64,
        tolerance: f64,
        context: ReportContext,
    ) -> Result<IdentityReport> {
        let abs = lhs.distance(rhs)?;
        Ok(IdentityReport::from_norms(
            check_name,
            anchor,
            lhs.norm(),
            rhs.norm(),
            abs,
            scale,
            tolerance,
            context,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_norms(
        check_name: &str,
        anchor: &str,
        lhs_norm: f64,
        rhs_norm: f64,
        abs_residual: f64,
        scale: f64,
        tolerance: f64,
        context: ReportContext,
    ) -> IdentityReport {
        let denom = lhs_norm.max(rhs_norm).max(scale).max(1e-12);
        let rel = abs_residual / denom;
        IdentityReport {
            check_name: check_name.to_string(),
            anchor: anchor.to_string(),
            lhs_norm,
            rhs_norm,
            abs_residual,
            rel_residual: rel,
            scale,
            tolerance,
            // NaN compares false
            pass: rel <= tolerance,
            context,
            extra: BTreeMap::new(),
        }
    }

    fn with_extra(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    /// Fails the report without touching the residual fields.
    fn require(mut self, key: &str, holds: bool) -> Self {
        self.extra.insert(key.to_string(), f64::from(u8::from(holds)));
        self.pass &= holds;
        self
    }
}

/// Eigen-decomposition of a Hessian with an independent power-iteration
/// estimate of the top eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub lambda_max: f64,
    pub power_lambda_max: f64,
    pub reconstruction_error: f64,
    pub orthonormality_error: f64,
}

impl SpectralSummary {
    /// Eigenvalues with `|λ| ≤ tol`.
    pub fn null_count(&self, tol: f64) -> usize {
        self.eigenvalues.iter().filter(|l| l.abs() <= tol).count()
    }
}

pub fn spectral_summary(hessian: &Tensor) -> Result<SpectralSummary> {
    let (data, n) = square_data(hessian)?;
    let eig = symmetric_eigen(data, n)?;
    let rec = eig.reconstruct();
    let reconstruction_error = rec.iter().zip(data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        / hessian.norm().max(f64::MIN_POSITIVE);
    Ok(SpectralSummary {
        lambda_max: eig.values[0],
        power_lambda_max: power_iteration_max(data, n, 2000),
        orthonormality_error: eig.orthonormality_error(),
        reconstruction_error,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
    })
}

fn invert_at(jac: &Tensor, what: &str) -> Result<Tensor> {
    invert_square(jac).map_err(|e| match e {
        Error::Singular { rcond } => Error::NotGoodPosition(format!(
            "{what} is singular (reciprocal condition {rcond:e})"
        )),
        other => other,
    })
}

/// Everything the first- and second-order identities consume at one point.
struct Pieces {
    ld: LossDerivatives,
    td: TransformDerivatives,
    x: Tensor,
    y: Tensor,
    /// `∇ℓ∘∇f∘∇θH⁻¹`, shape `(d)`.
    u: Tensor,
    /// `∇ℓ∘∇yG⁻¹`, shape `(c)`.
    w: Tensor,
    rcond_h: f64,
    rcond_g: f64,
}

fn check_dims(model: &Model, loss: &Loss, t: &Transformation) -> Result<()> {
    if t.d != model.d() || t.c != model.c() || loss.c() != model.c() {
        return Err(Error::SizeMismatch(format!(
            "transform acts on (d={}, c={}), model has (d={}, c={}), loss takes {}",
            t.d,
            t.c,
            model.d(),
            model.c(),
            loss.c()
        )));
    }
    Ok(())
}

fn pieces(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    lambda: &[f64],
    cfg: &CheckConfig,
) -> Result<Pieces> {
    check_dims(model, loss, t)?;
    if t.kind != TransformKind::Continuous {
        return Err(Error::NotGoodPosition(format!("{} is discrete", t.name)));
    }
    if !model.is_off_kink(theta) {
        return Err(Error::NotGoodPosition(format!(
            "θ lies within the kink margin of {}",
            model.name
        )));
    }
    let ld = grad_and_hessian_of_loss(model, loss, theta, &cfg.diff)?;
    let td = t.derivatives(theta, &ld.output, lambda)?;
    let hinv = invert_at(&td.h_theta, "∇θH")?;
    let ginv = invert_at(&td.g_y, "∇yG")?;
    let x = compose(&hinv, &td.h_lambda)?;
    let y = compose(&ginv, &td.g_lambda)?;
    let u = compose(&compose(&ld.loss_grad, &ld.model_jacobian)?, &hinv)?;
    let w = compose(&ld.loss_grad, &ginv)?;
    Ok(Pieces {
        rcond_h: reciprocal_condition(&td.h_theta)?,
        rcond_g: reciprocal_condition(&td.g_y)?,
        ld,
        td,
        x,
        y,
        u,
        w,
    })
}

/// Sums `terms`; `dropped` are indices expected to vanish by structure, whose
/// combined norm and effect on the total are recorded.
fn assemble(terms: &[Tensor], dropped: &[usize]) -> Result<(Tensor, f64, f64)> {
    let mut full = terms[0].clone();
    for t in &terms[1..] {
        full = full.add(t)?;
    }
    let mut reduced = Tensor::zeros(full.shape().clone());
    let mut dropped_sum = Tensor::zeros(full.shape().clone());
    for (i, t) in terms.iter().enumerate() {
        if dropped.contains(&i) {
            dropped_sum = dropped_sum.add(t)?;
        } else {
            reduced = reduced.add(t)?;
        }
    }
    let gap = full.distance(&reduced)?;
    Ok((full, dropped_sum.norm(), gap))
}

/// Indices among the five right-hand terms that vanish structurally:
/// `G`-dependent terms for symmetries, `∇θ²H` terms for `H` linear in `θ`.
fn structurally_zero(t: &Transformation) -> Vec<usize> {
    let mut out = Vec::new();
    if t.is_symmetry {
        out.extend([0, 3, 4]);
    }
    if t.is_linear_in_theta() {
        out.push(2);
    }
    out
}

fn decorate(mut r: IdentityReport, p: &Pieces, terms: &[Tensor], dropped_norm: f64, gap: f64) -> IdentityReport {
    for (i, t) in terms.iter().enumerate() {
        r.extra.insert(format!("term{}_norm", i + 1), t.norm());
    }
    r.with_extra("dropped_terms_norm", dropped_norm)
        .with_extra("reduced_gap", gap)
        .with_extra("x_norm", p.x.norm())
        .with_extra("y_norm", p.y.norm())
        .with_extra("rcond_h", p.rcond_h)
        .with_extra("rcond_g", p.rcond_g)
}

/// `∇L∘X = ∇ℓ∘Y`, shape `(p)`.
pub fn check_first_order(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    lambda: &[f64],
    cfg: &CheckConfig,
) -> Result<IdentityReport> {
    let p = pieces(model, loss, t, theta, lambda, cfg)?;
    let lhs = compose(&p.ld.gradient, &p.x)?;
    let rhs = compose(&p.ld.loss_grad, &p.y)?;
    let scale = p.ld.gradient.norm() * p.x.norm() + p.ld.loss_grad.norm() * p.y.norm();
    let ctx = ReportContext::new(model, loss).with_transform(t, lambda);
    let r = IdentityReport::compare(
        "first_order",
        "gradient projection onto characteristic direction",
        &lhs,
        &rhs,
        scale,
        cfg.tolerance,
        ctx,
    )?;
    Ok(decorate(r, &p, &[], 0.0, 0.0))
}

/// `∇²L∘X` against its five-term expansion, shape `(p, d)`.
pub fn check_second_action(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    lambda: &[f64],
    cfg: &CheckConfig,
) -> Result<IdentityReport> {
    let p = pieces(model, loss, t, theta, lambda, cfg)?;
    let jf = &p.ld.model_jacobian;
    let lhs = compose(&p.ld.hessian, &p.x)?;
    let terms = [
        compose_k(&compose(&p.ld.loss_hess, &p.y)?, jf, 2)?,
        compose(&p.u, &p.td.h_lambda_theta)?.scale(-1.0),
        compose(&p.u, &compose(&p.td.h_theta2, &p.x)?)?,
        compose_k(&compose(&p.w, &p.td.g_lambda_y)?, jf, 2)?,
        compose_k(&compose(&p.w, &compose(&p.td.g_y2, &p.y)?)?, jf, 2)?.scale(-1.0),
    ];
    let (rhs, dropped, gap) = assemble(&terms, &structurally_zero(t))?;
    let parts: f64 = terms.iter().map(Tensor::norm).sum();
    let scale = (p.ld.hessian.norm() * p.x.norm()).max(parts);
    let ctx = ReportContext::new(model, loss).with_transform(t, lambda);
    let r = IdentityReport::compare(
        "second_action",
        "Hessian action on characteristic direction",
        &lhs,
        &rhs,
        scale,
        cfg.tolerance,
        ctx,
    )?;
    Ok(decorate(r, &p, &terms, dropped, gap))
}

/// `∇²L∘X∘₂X` against its five-term expansion, shape `(p, p)`.
pub fn check_second_quadratic(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    lambda: &[f64],
    cfg: &CheckConfig,
) -> Result<IdentityReport> {
    let p = pieces(model, loss, t, theta, lambda, cfg)?;
    let lhs = compose_k(&compose(&p.ld.hessian, &p.x)?, &p.x, 2)?;
    let terms = [
        compose_k(&compose(&p.ld.loss_hess, &p.y)?, &p.y, 2)?,
        compose(&p.u, &p.td.h_lambda2)?.scale(-1.0),
        compose(&p.u, &compose_k(&compose(&p.td.h_theta2, &p.x)?, &p.x, 2)?)?,
        compose(&p.w, &p.td.g_lambda2)?,
        compose(&p.w, &compose_k(&compose(&p.td.g_y2, &p.y)?, &p.y, 2)?)?.scale(-1.0),
    ];
    let (rhs, dropped, gap) = assemble(&terms, &structurally_zero(t))?;
    let parts: f64 = terms.iter().map(Tensor::norm).sum();
    let scale = (p.ld.hessian.norm() * p.x.norm().powi(2)).max(parts);
    let ctx = ReportContext::new(model, loss).with_transform(t, lambda);
    let r = IdentityReport::compare(
        "second_quadratic",
        "Hessian quadratic form on characteristic direction",
        &lhs,
        &rhs,
        scale,
        cfg.tolerance,
        ctx,
    )?;
    Ok(decorate(r, &p, &terms, dropped, gap))
}

/// Finite-difference certificates of every analytic transform derivative,
/// one report per slot.
pub fn certificate_reports(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    lambda: &[f64],
    cfg: &CheckConfig,
) -> Result<Vec<IdentityReport>> {
    let y = model.forward(theta)?;
    let certs = derivative_certificates(t, theta, &y, lambda, cfg.diff.fd_step_scale)?;
    Ok(certs
        .into_iter()
        .map(|c| {
            let ctx = ReportContext::new(model, loss).with_transform(t, lambda);
            let mut r = IdentityReport::from_norms(
                &format!("certificate_{}", c.slot.name()),
                "analytic transform derivative against finite differences",
                c.analytic_norm,
                c.fd_norm,
                0.0,
                0.0,
                CERTIFICATE_TOL,
                ctx,
            );
            // the certificate carries its own normalization
            r.rel_residual = c.residual;
            r.abs_residual = c.residual * c.analytic_norm.max(c.fd_norm).max(1.0);
            r.pass = c.residual <= CERTIFICATE_TOL;
            r
        })
        .collect())
}

struct Homogeneous {
    m: f64,
    y: f64,
    l1: f64,
    l2: f64,
    ld: LossDerivatives,
}

fn homogeneous(model: &Model, loss: &Loss, theta: &[f64], cfg: &CheckConfig) -> Result<Homogeneous> {
    let m = model.homogeneity_degree.ok_or_else(|| {
        Error::InvalidParams(format!("{} declares no homogeneity degree", model.name))
    })?;
    if model.c() != 1 {
        return Err(Error::SizeMismatch(format!(
            "homogeneity specializations need a scalar output, {} has {}",
            model.name,
            model.c()
        )));
    }
    if !model.is_off_kink(theta) {
        return Err(Error::NotGoodPosition(format!(
            "θ lies within the kink margin of {}",
            model.name
        )));
    }
    let ld = grad_and_hessian_of_loss(model, loss, theta, &cfg.diff)?;
    Ok(Homogeneous {
        m: f64::from(m),
        y: ld.output[0],
        l1: ld.loss_grad.data()[0],
        l2: ld.loss_hess.data()[0],
        ld,
    })
}

/// For an `m`-homogeneous scalar model:
/// `∇²Lθ = (m y ℓ''/ℓ' + m − 1)∇L` and
/// `⟨θ, ∇²Lθ⟩ = ℓ'' m² y² + ℓ' m (m − 1) y`.
/// `ℓ' = 0` makes the first ratio undefined and is a [`Error::DegenerateLoss`].
pub fn check_homogeneity_specialization(
    model: &Model,
    loss: &Loss,
    theta: &[f64],
    cfg: &CheckConfig,
) -> Result<(IdentityReport, IdentityReport)> {
    let h = homogeneous(model, loss, theta, cfg)?;
    if h.l1 == 0.0 {
        return Err(Error::DegenerateLoss(format!(
            "ℓ'(y) = 0 at y = {}; use the ℓ'-multiplied form",
            h.y
        )));
    }
    let th = Tensor::vector(theta);
    let h_theta = h.ld.hessian.matvec(theta)?;
    let coef = h.m * h.y * h.l2 / h.l1 + h.m - 1.0;
    let rhs = h.ld.gradient.scale(coef);
    let ctx = ReportContext::new(model, loss);
    let action = IdentityReport::compare(
        "homogeneity_action",
        "Hessian action on θ for homogeneous models",
        &Tensor::vector(&h_theta),
        &rhs,
        h.ld.hessian.norm() * th.norm() + coef.abs() * h.ld.gradient.norm(),
        cfg.tolerance,
        ctx.clone(),
    )?
    .with_extra("coefficient", coef);
    let quad_lhs = dot(theta, &h_theta);
    let a = h.l2 * h.m * h.m * h.y * h.y;
    let b = h.l1 * h.m * (h.m - 1.0) * h.y;
    let quad = IdentityReport::compare(
        "homogeneity_quadratic",
        "Hessian quadratic form on θ for homogeneous models",
        &Tensor::scalar(quad_lhs),
        &Tensor::scalar(a + b),
        h.ld.hessian.norm() * th.norm().powi(2) + a.abs() + b.abs(),
        cfg.tolerance,
        ctx,
    )?;
    Ok((action, quad))
}

/// `∇²Lθ = (m y ℓ'' + (m − 1) ℓ')∇f`, valid for every `ℓ'` including zero.
pub fn check_degenerate_branch(
    model: &Model,
    loss: &Loss,
    theta: &[f64],
    cfg: &CheckConfig,
) -> Result<IdentityReport> {
    let h = homogeneous(model, loss, theta, cfg)?;
    let jf = h.ld.model_jacobian.reshape([model.d()])?;
    let coef = h.m * h.y * h.l2 + (h.m - 1.0) * h.l1;
    let lhs = Tensor::vector(&h.ld.hessian.matvec(theta)?);
    let scale = h.ld.hessian.norm() * dot(theta, theta).sqrt() + coef.abs() * jf.norm();
    Ok(IdentityReport::compare(
        "homogeneity_action_multiplied",
        "Hessian action on θ scaled by ℓ'",
        &lhs,
        &jf.scale(coef),
        scale,
        cfg.tolerance,
        ReportContext::new(model, loss),
    )?
    .with_extra("coefficient", coef)
    .with_extra("loss_slope", h.l1))
}

/// `α = 1/(m y ℓ''/ℓ' + m − 1)`, with `α = 0` where `ℓ' = 0` (the gradient
/// vanishes there).
fn alignment_alpha(h: &Homogeneous) -> Result<f64> {
    if h.l1 == 0.0 {
        return Ok(0.0);
    }
    let coef = h.m * h.y * h.l2 / h.l1 + h.m - 1.0;
    if coef == 0.0 {
        return Err(Error::DegenerateLoss(
            "m y ℓ''/ℓ' + m − 1 vanishes, so the alignment constant is undefined".into(),
        ));
    }
    Ok(1.0 / coef)
}

/// Per-eigenvector alignment `⟨∇L, u_k⟩ = λ_k α ⟨θ, u_k⟩` and the statement
/// that `∇L` lies in the span of eigenvectors with nonzero eigenvalue.
pub fn check_eigen_alignment(
    model: &Model,
    loss: &Loss,
    theta: &[f64],
    cfg: &CheckConfig,
) -> Result<(IdentityReport, IdentityReport)> {
    let h = homogeneous(model, loss, theta, cfg)?;
    let alpha = alignment_alpha(&h)?;
    let spec = spectral_summary(&h.ld.hessian)?;
    let g = h.ld.gradient.data();
    let lhs: Vec<f64> = spec.eigenvectors.iter().map(|u| dot(g, u)).collect();
    let rhs: Vec<f64> = spec
        .eigenvalues
        .iter()
        .zip(&spec.eigenvectors)
        .map(|(lam, u)| lam * alpha * dot(theta, u))
        .collect();
    let gnorm = h.ld.gradient.norm();
    let tnorm = dot(theta, theta).sqrt();
    let ctx = ReportContext::new(model, loss);
    let abs_sum: f64 = spec.eigenvalues.iter().map(|l| l.abs()).sum();
    let weighted: f64 = spec.eigenvalues.iter().zip(&lhs).map(|(l, c)| l.abs() * c * c).sum();
    // gradient-weighted curvature relative to the mean curvature magnitude
    let concentration = if gnorm > 0.0 && abs_sum > 0.0 {
        (weighted / (gnorm * gnorm)) / (abs_sum / spec.eigenvalues.len() as f64)
    } else {
        0.0
    };
    let max_dev = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let alignment = IdentityReport::compare(
        "eigen_alignment",
        "gradient components along Hessian eigenvectors",
        &Tensor::vector(&lhs),
        &Tensor::vector(&rhs),
        gnorm + alpha.abs() * spec.lambda_max.abs().max(spec.eigenvalues.last().map_or(0.0, |l| l.abs())) * tnorm,
        cfg.tolerance,
        ctx.clone(),
    )?
    .with_extra("alpha", alpha)
    .with_extra("max_component_deviation", max_dev)
    .with_extra("lambda_max", spec.lambda_max)
    .with_extra("curvature_concentration", concentration);

    let top = spec.eigenvalues.iter().map(|l| l.abs()).fold(0.0, f64::max);
    let null_tol = 1e-10 * top;
    let mut residual = g.to_vec();
    for (lam, u) in spec.eigenvalues.iter().zip(&spec.eigenvectors) {
        if lam.abs() > null_tol {
            let c = dot(g, u);
            residual.iter_mut().zip(u).for_each(|(r, ui)| *r -= c * ui);
        }
    }
    let zeros = vec![0.0; residual.len()];
    let column = IdentityReport::compare(
        "gradient_in_column_space",
        "gradient orthogonal to the Hessian null space",
        &Tensor::vector(&residual),
        &Tensor::vector(&zeros),
        gnorm,
        cfg.tolerance,
        ctx,
    )?
    .with_extra("null_count", spec.null_count(null_tol) as f64);
    Ok((alignment, column))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    /// `(m/‖θ‖²)(ℓ'' m y² + ℓ'(m − 1) y)`.
    pub bound: f64,
    /// `⟨θ, ∇²Lθ⟩/‖θ‖²`.
    pub rayleigh: f64,
    pub lambda_max: f64,
    pub power_lambda_max: f64,
    pub report: IdentityReport,
}

/// Lower bound on the top Hessian eigenvalue from the Rayleigh quotient at
/// `θ`. The report compares the closed form with the numerical Rayleigh
/// quotient and additionally requires `λ_max ≥ bound`.
pub fn sharpness_bound(model: &Model, loss: &Loss, theta: &[f64], cfg: &CheckConfig) -> Result<SharpnessReport> {
    let h = homogeneous(model, loss, theta, cfg)?;
    let tt = dot(theta, theta);
    if tt == 0.0 {
        return Err(Error::InvalidParams("sharpness bound needs θ ≠ 0".into()));
    }
    let bound = h.m / tt * (h.l2 * h.m * h.y * h.y + h.l1 * (h.m - 1.0) * h.y);
    let rayleigh = dot(theta, &h.ld.hessian.matvec(theta)?) / tt;
    let spec = spectral_summary(&h.ld.hessian)?;
    let slack = 1e-9 * bound.abs().max(1.0);
    let holds = spec.lambda_max >= bound - slack && spec.power_lambda_max >= bound - slack;
    let report = IdentityReport::compare(
        "sharpness_bound",
        "Rayleigh-quotient lower bound on the top Hessian eigenvalue",
        &Tensor::scalar(rayleigh),
        &Tensor::scalar(bound),
        h.ld.hessian.norm() + bound.abs(),
        cfg.tolerance,
        ReportContext::new(model, loss),
    )?
    .with_extra("lambda_max", spec.lambda_max)
    .with_extra("power_lambda_max", spec.power_lambda_max)
    .with_extra("bound_slack", spec.lambda_max - bound)
    .require("bound_holds", holds);
    Ok(SharpnessReport {
        bound,
        rayleigh,
        lambda_max: spec.lambda_max,
        power_lambda_max: spec.power_lambda_max,
        report,
    })
}

fn require_fixed_point(t: &Transformation, theta: &[f64]) -> Result<()> {
    if t.kind != TransformKind::Discrete {
        return Err(Error::InvalidParams(format!("{} is not discrete", t.name)));
    }
    let ht = t.h(theta, &[])?;
    let diff = ht.iter().zip(theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let residual = diff / dot(theta, theta).sqrt().max(1.0);
    if residual > FIXED_POINT_TOL {
        return Err(Error::NotFixedPoint { residual });
    }
    Ok(())
}

/// At `θ ∈ Fix(H)`: `∇L∘X̂ = ∇L` with `X̂ = ∇θH`.
pub fn check_discrete_first(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    cfg: &CheckConfig,
) -> Result<IdentityReport> {
    check_dims(model, loss, t)?;
    require_fixed_point(t, theta)?;
    let ld = grad_and_hessian_of_loss(model, loss, theta, &cfg.diff)?;
    let xh = t.derivative(DerivSlot::HTheta, theta, &[])?;
    let lhs = compose(&ld.gradient, &xh)?;
    let ctx = ReportContext::new(model, loss).with_transform(t, &[]);
    IdentityReport::compare(
        "discrete_first",
        "gradient invariance at a fixed point",
        &lhs,
        &ld.gradient,
        ld.gradient.norm(),
        cfg.tolerance,
        ctx,
    )
}

/// At `θ ∈ Fix(H)`: `∇²L∘X̂∘₂X̂ = ∇²L − ∇L∘∇θ²H`.
pub fn check_discrete_second(
    model: &Model,
    loss: &Loss,
    t: &Transformation,
    theta: &[f64],
    cfg: &CheckConfig,
) -> Result<IdentityReport> {
    check_dims(model, loss, t)?;
    require_fixed_point(t, theta)?;
    let ld = grad_and_hessian_of_loss(model, loss, theta, &cfg.diff)?;
    let xh = t.derivative(DerivSlot::HTheta, theta, &[])?;
    let curv = t.derivative(DerivSlot::HTheta2, theta, &[])?;
    let lhs = compose_k(&compose(&ld.hessian, &xh)?, &xh, 2)?;
    let correction = compose(&ld.gradient, &curv)?;
    let rhs = ld.hessian.sub(&correction)?;
    let ctx = ReportContext::new(model, loss).with_transform(t, &[]);
    Ok(IdentityReport::compare(
        "discrete_second",
        "Hessian conjugation invariance at a fixed point",
        &lhs,
        &rhs,
        ld.hessian.norm() + correction.norm(),
        cfg.tolerance,
        ctx,
    )?
    .with_extra("curvature_correction_norm", correction.norm()))
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// Mirror symmetry `P = I − 2OOᵀ` at `θ ⊥ col(O)`: `Oᵀ∇L = 0` and the
/// Hessian is block diagonal with respect to `col(O) ⊕ col(O)^⊥`, i.e.
/// `(I − Q)HO = 0` and `QH(I − Q) = 0` with `Q = OOᵀ`. The second report also
/// records `‖PHP − H‖`, which equals twice the block residual.
pub fn check_mirror(
    model: &Model,
    loss: &Loss,
    columns: &[Vec<f64>],
    theta: &[f64],
    cfg: &CheckConfig,
) -> Result<(IdentityReport, IdentityReport)> {
    let t = build_transform(
        &TransformSpec::Mirror {
            columns: columns.to_vec(),
        },
        model,
    )?;
    check_dims(model, loss, &t)?;
    let d = model.d();
    let tn = dot(theta, theta).sqrt().max(1.0);
    let offset = columns.iter().map(|o| dot(o, theta).powi(2)).sum::<f64>().sqrt() / tn;
    if offset > FIXED_POINT_TOL {
        return Err(Error::NotFixedPoint { residual: offset });
    }
    let ld = grad_and_hessian_of_loss(model, loss, theta, &cfg.diff)?;
    let g = ld.gradient.data();
    let ctx = ReportContext::new(model, loss).with_transform(&t, &[]);
    let proj: Vec<f64> = columns.iter().map(|o| dot(o, g)).collect();
    let grad = IdentityReport::compare(
        "mirror_gradient",
        "gradient orthogonal to the mirror directions",
        &Tensor::vector(&proj),
        &Tensor::vector(&vec![0.0; proj.len()]),
        ld.gradient.norm(),
        cfg.tolerance,
        ctx.clone(),
    )?;

    let hm = ld.hessian.data();
    let mut q = vec![0.0; d * d];
    for o in columns {
        for i in 0..d {
            for j in 0..d {
                q[i * d + j] += o[i] * o[j];
            }
        }
    }
    let mut comp = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            comp[i * d + j] = f64::from(u8::from(i == j)) - q[i * d + j];
        }
    }
    // (I − Q) H O, column by column
    let mut block = Vec::new();
    for o in columns {
        block.extend(mat_vec(&comp, &mat_vec(hm, o, d), d));
    }
    let cross_a: f64 = block.iter().map(|v| v * v).sum();
    let qhc = matmul(&matmul(&q, hm, d), &comp, d);
    let cross_b: f64 = qhc.iter().map(|v| v * v).sum();
    block.extend(&qhc);
    let p: Vec<f64> = comp.iter().zip(&q).map(|(c, qq)| c - qq).collect();
    let php = matmul(&matmul(&p, hm, d), &p, d);
    let conj = php.iter().zip(hm).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let block_norm = (cross_a + cross_b).sqrt();
    let hess = IdentityReport::compare(
        "mirror_hessian",
        "Hessian block diagonal across the mirror",
        &Tensor::vector(&block),
        &Tensor::vector(&vec![0.0; block.len()]),
        ld.hessian.norm(),
        cfg.tolerance,
        ctx,
    )?
    .with_extra("conjugation_residual", conj)
    .with_extra("equivalence_gap", (conj - 2.0 * block_norm).abs());
    Ok((grad, hess))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastLayerReport {
    /// `⟨vec V, ∇²_W L vec V⟩ = (Vh)ᵀ∇²ℓ(Vh)` for `V = UW`, one per trial.
    pub trials: Vec<IdentityReport>,
    /// For softmax cross-entropy, the same quadratic form against
    /// `Var_p(Vh)`; empty otherwise.
    pub variance: Vec<IdentityReport>,
}

/// Curvature of `L` along last-layer directions `V = UW` (random `U`) equals
/// the output-space curvature of the loss along `Vh`.
pub fn check_last_layer_alignment(
    model: &Model,
    loss: &Loss,
    theta: &[f64],
    trials: usize,
    seed: u64,
    cfg: &CheckConfig,
) -> Result<LastLayerReport> {
    let name = model.last_layer_block.as_ref().ok_or_else(|| {
        Error::NotFactoredModel(format!("{} has no last-layer block", model.name))
    })?;
    let block = model.block(name)?.clone();
    let (c, s) = (block.rows(), block.cols());
    if c != model.c() || loss.c() != c {
        return Err(Error::NotFactoredModel(format!(
            "last-layer block {name} has {c} rows, model outputs {}",
            model.c()
        )));
    }
    if !model.is_off_kink(theta) {
        return Err(Error::NotGoodPosition(format!(
            "θ lies within the kink margin of {}",
            model.name
        )));
    }
    let ld = grad_and_hessian_of_loss(model, loss, theta, &cfg.diff)?;
    let h = model.last_layer_features(theta)?;
    let d = model.d();
    let w = &theta[block.range()];
    let hw: Vec<f64> = {
        let full = ld.hessian.data();
        block
            .range()
            .flat_map(|i| block.range().map(move |j| full[i * d + j]))
            .collect()
    };
    let n = block.len();
    let lh = ld.loss_hess.data();
    let probs = matches!(loss.family, LossFamily::SoftmaxCrossEntropy).then(|| crate::models::softmax(&ld.output));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LastLayerReport {
        trials: Vec::with_capacity(trials),
        variance: Vec::new(),
    };
    for trial in 0..trials {
        let u: Vec<f64> = (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v = vec![0.0; c * s];
        for a in 0..c {
            for b in 0..c {
                for k in 0..s {
                    v[a * s + k] += u[a * c + b] * w[b * s + k];
                }
            }
        }
        let lhs = dot(&v, &mat_vec(&hw, &v, n));
        let z: Vec<f64> = (0..c).map(|a| dot(&v[a * s..(a + 1) * s], &h)).collect();
        let rhs = dot(&z, &mat_vec(lh, &z, c));
        let vv = dot(&v, &v);
        let zz = dot(&z, &z);
        let hw_norm = hw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = hw_norm * vv + ld.loss_hess.norm() * zz;
        let mut ctx = ReportContext::new(model, loss);
        ctx.seed = Some(seed);
        ctx.position = Some(trial);
        out.trials.push(
            IdentityReport::compare(
                "last_layer_alignment",
                "last-layer curvature along row-space directions",
                &Tensor::scalar(lhs),
                &Tensor::scalar(rhs),
                scale,
                cfg.tolerance,
                ctx.clone(),
            )?
            .with_extra("direction_norm", vv.sqrt()),
        );
        if let Some(p) = &probs {
            let mean: f64 = p.iter().zip(&z).map(|(pi, zi)| pi * zi).sum();
            let var: f64 = p.iter().zip(&z).map(|(pi, zi)| pi * (zi - mean).powi(2)).sum();
            out.variance.push(IdentityReport::compare(
                "last_layer_variance",
                "last-layer curvature as output variance under the softmax",
                &Tensor::scalar(lhs),
                &Tensor::scalar(var),
                scale,
                cfg.tolerance,
                ctx,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaryConfig {
    /// Required `‖∇L‖` at the candidate stationary point.
    pub grad_tol: f64,
    /// Eigenvalues with `|λ| ≤ null_tol` count as null.
    pub null_tol: f64,
    /// Relative tolerance of the rank of the stacked directions.
    pub rank_tol: f64,
    /// Pass threshold for `‖∇²L∘X‖ / (‖∇²L‖‖X‖)`.
    pub flat_tol: f64,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig {
            grad_tol: 1e-10,
            null_tol: 1e-7,
            rank_tol: 1e-8,
            flat_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryReport {
    pub grad_norm: f64,
    /// Rank of the stacked characteristic directions at `λ = 0`.
    pub rank: usize,
    pub null_count: usize,
    pub eigenvalues: Vec<f64>,
    /// `‖∇²L∘X‖ / ‖∇L‖` per transformation.
    pub kappa: Vec<f64>,
    /// One flatness report per transformation followed by the count report.
    pub reports: Vec<IdentityReport>,
}

/// At a stationary point every symmetry direction is a Hessian null
/// direction, so the null space has dimension at least the rank of the
/// stacked directions.
pub fn stationary_null_count(
    objective: &Objective,
    symmetries: &[Transformation],
    theta: &[f64],
    cfg: &StationaryConfig,
) -> Result<StationaryReport> {
    let (_, grad, hess) = objective.value_grad_hess(theta)?;
    let grad_norm = dot(&grad, &grad).sqrt();
    if !(grad_norm <= cfg.grad_tol) {
        return Err(Error::NotConverged {
            grad_norm,
            threshold: cfg.grad_tol,
        });
    }
    let model = &objective.terms()[0].0;
    let mut ctx = ReportContext {
        model: model.name.clone(),
        loss: objective.terms()[0].1.family.name().to_string(),
        ..ReportContext::default()
    };
    let mut rows = Vec::new();
    let mut kappa = Vec::new();
    let mut reports = Vec::new();
    for t in symmetries {
        if !t.is_symmetry || t.kind != TransformKind::Continuous {
            return Err(Error::InvalidParams(format!("{} is not a continuous symmetry", t.name)));
        }
        if t.d != objective.d() {
            return Err(Error::SizeMismatch(format!(
                "{} acts on d={}, objective has d={}",
                t.name,
                t.d,
                objective.d()
            )));
        }
        let zero = vec![0.0; t.p];
        let x = crate::transforms::characteristic_direction(t, theta, &zero)?;
        let hx = compose(&hess, &x)?;
        kappa.push(hx.norm() / grad_norm.max(f64::MIN_POSITIVE));
        rows.extend(x.data().chunks(t.d).map(<[f64]>::to_vec));
        let tctx = ReportContext {
            transform: Some(t.name.clone()),
            lambda: zero,
            ..ctx.clone()
        };
        reports.push(IdentityReport::compare(
            "stationary_flat_direction",
            "symmetry direction in the Hessian null space at a stationary point",
            &hx,
            &Tensor::zeros(hx.shape().clone()),
            hess.norm() * x.norm(),
            cfg.flat_tol,
            tctx,
        )?);
    }
    let rank = numerical_rank(&rows, cfg.rank_tol)?;
    let spec = spectral_summary(&hess)?;
    let null_count = spec.null_count(cfg.null_tol);
    ctx.transform = None;
    let deficit = rank.saturating_sub(null_count) as f64;
    let mut count = IdentityReport::from_norms(
        "stationary_null_count",
        "Hessian null space contains the symmetry orbit directions",
        null_count as f64,
        rank as f64,
        deficit,
        1.0,
        0.0,
        ctx,
    );
    count.rel_residual = deficit;
    count.pass = null_count >= rank;
    reports.push(
        count
            .with_extra("grad_norm", grad_norm)
            .with_extra("null_tol", cfg.null_tol),
    );
    Ok(StationaryReport {
        grad_norm,
        rank,
        null_count,
        eigenvalues: spec.eigenvalues,
        kappa,
        reports,
    })
}

/// One model, loss and set of transformations evaluated at random positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub model: ModelSpec,
    pub loss: Loss,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
}

/// Fault injection: multiply one derivative slot of the named transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mutation {
    pub transform: String,
    pub slot: DerivSlot,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub entries: Vec<SuiteEntry>,
    #[serde(default = "default_positions")]
    pub positions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub diff: DiffConfig,
    /// Overrides [`default_tolerance`] for the differentiation mode.
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "default_trials")]
    pub last_layer_trials: usize,
    #[serde(default)]
    pub mutation: Option<Mutation>,
}

fn default_positions() -> usize {
    3
}

fn default_trials() -> usize {
    4
}

/// Attempts at drawing a good random position before giving up.
const MAX_DRAWS: usize = 64;

impl SuiteSpec {
    /// Every catalog model paired with every compatible catalog transformation.
    pub fn full_catalog() -> SuiteSpec {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let model = |architecture, input: Option<Vec<f64>>, seed| ModelSpec::new(architecture, input, seed);
        let entries = vec![
            SuiteEntry {
                model: model(Architecture::LinearProbe { n: 3 }, Some(vec![1.0, 2.0, -1.0]), 1),
                loss: Loss::square(&[0.7]),
                transforms: vec![
                    TransformSpec::HomogeneityScaling { m: 1 },
                    TransformSpec::ShearedScaling {
                        a: vec![0.3, -0.2, 0.5],
                        v: vec![s, 0.0, s],
                    },
                    TransformSpec::Mirror {
                        columns: vec![vec![s, 0.0, s]],
                    },
                ],
            },
            SuiteEntry {
                model: model(Architecture::HomogeneousReluMlp { widths: vec![3, 4, 1] }, None, 2),
                loss: Loss::logistic(1.0),
                transforms: vec![
                    TransformSpec::HomogeneityScaling { m: 2 },
                    TransformSpec::LayerRescaling {
                        block1: "W1".into(),
                        block2: "W2".into(),
                    },
                    TransformSpec::ModulatedRescaling {
                        block1: "W1".into(),
                        block2: "W2".into(),
                    },
                    TransformSpec::LastLayerLeftAction,
                    TransformSpec::Permutation {
                        block_in: "W1".into(),
                        block_out: "W2".into(),
                        i: 0,
                        j: 2,
                    },
                ],
            },
            SuiteEntry {
                model: model(Architecture::DeepLinear { widths: vec![3, 3, 2] }, None, 3),
                loss: Loss::square(&[0.5, -0.4]),
                transforms: vec![
                    TransformSpec::HomogeneityScaling { m: 2 },
                    TransformSpec::LayerRescaling {
                        block1: "W1".into(),
                        block2: "W2".into(),
                    },
                    TransformSpec::ModulatedRescaling {
                        block1: "W1".into(),
                        block2: "W2".into(),
                    },
                    TransformSpec::LinearReparam {
                        block_in: "W1".into(),
                        block_out: "W2".into(),
                        generator: vec![vec![0.2, -0.5, 0.1], vec![0.4, 0.3, -0.2], vec![-0.1, 0.6, 0.0]],
                    },
                    TransformSpec::LastLayerLeftAction,
                    TransformSpec::SignFlip {
                        blocks: vec!["W1".into(), "W2".into()],
                    },
                    TransformSpec::UnitSignFlip {
                        block_in: "W1".into(),
                        block_out: "W2".into(),
                        unit: 1,
                    },
                    TransformSpec::Permutation {
                        block_in: "W1".into(),
                        block_out: "W2".into(),
                        i: 0,
                        j: 1,
                    },
                ],
            },
            SuiteEntry {
                model: model(Architecture::DeepLinear { widths: vec![2, 3, 1] }, None, 4),
                loss: Loss::exponential(1.0),
                transforms: vec![TransformSpec::HomogeneityScaling { m: 2 }],
            },
            SuiteEntry {
                model: model(
                    Architecture::FactoredLastLayer {
                        c: 3,
                        s: 2,
                        hidden: vec![3],
                    },
                    None,
                    5,
                ),
                loss: Loss::softmax_class(3, 1),
                transforms: vec![
                    TransformSpec::LastLayerLeftAction,
                    TransformSpec::UnitSignFlip {
                        block_in: "V1".into(),
                        block_out: "W".into(),
                        unit: 0,
                    },
                ],
            },
            SuiteEntry {
                model: model(Architecture::ExpProbe { n: 2 }, Some(vec![0.6, -0.8]), 6),
                loss: Loss::exponential(-1.0),
                transforms: vec![TransformSpec::LogHomogeneityScaling { m: 1 }],
            },
            SuiteEntry {
                model: model(Architecture::EvenQuadratic, Some(vec![1.0, -0.5, 0.8]), 7),
                loss: Loss::square(&[0.3]),
                transforms: vec![TransformSpec::Mirror {
                    columns: vec![vec![1.0, 0.0]],
                }],
            },
        ];
        SuiteSpec {
            entries,
            positions: default_positions(),
            seed: 0,
            diff: DiffConfig::exact(),
            tolerance: None,
            last_layer_trials: default_trials(),
            mutation: None,
        }
    }

    pub fn check_config(&self) -> CheckConfig {
        CheckConfig {
            diff: self.diff,
            tolerance: self.tolerance.unwrap_or_else(|| default_tolerance(self.diff.mode)),
        }
    }
}

fn positioned(mut r: IdentityReport, seed: u64, position: usize) -> IdentityReport {
    r.context.seed = Some(seed);
    r.context.position = Some(position);
    r
}

/// Draws `θ` off the kinks and a `λ` at which the transformation is in good
/// position.
fn draw_position(
    model: &Model,
    t: &Transformation,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    for _ in 0..MAX_DRAWS {
        let theta = model.sample_position(rng)?;
        let lambda = t.sample_lambda(rng);
        let positive = model.forward(&theta)?.iter().all(|v| *v > 0.0);
        if matches!(t.spec, TransformSpec::LogHomogeneityScaling { .. }) && !positive {
            continue;
        }
        if good_position(t, model, &theta, &lambda).ok {
            return Ok((theta, lambda));
        }
    }
    Err(Error::NotGoodPosition(format!(
        "no good position for {} on {} after {MAX_DRAWS} draws",
        t.name, model.name
    )))
}

/// Runs every applicable check of every entry. Reports are produced in a
/// deterministic order; failing identities are reports, precondition
/// violations are errors.
pub fn run_suite(spec: &SuiteSpec) -> Result<Vec<IdentityReport>> {
    let cfg = spec.check_config();
    cfg.diff.validate()?;
    let mut out = Vec::new();
    for (e, entry) in spec.entries.iter().enumerate() {
        let model = build_model(&entry.model)?;
        entry.loss.validate()?;
        let loss = &entry.loss;
        let entry_seed = spec.seed.wrapping_add(e as u64);
        let mut transforms = Vec::new();
        for ts in &entry.transforms {
            let mut t = build_transform(ts, &model)?;
            if let Some(m) = &spec.mutation {
                if m.transform == t.name {
                    t = t.with_mutation(m.slot, m.factor);
                }
            }
            transforms.push(t);
        }
        for pos in 0..spec.positions {
            let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
            rng.set_stream(pos as u64);
            for t in &transforms {
                let reports = match t.kind {
                    TransformKind::Continuous => {
                        let (theta, lambda) = draw_position(&model, t, &mut rng)?;
                        let mut r = certificate_reports(&model, loss, t, &theta, &lambda, &cfg)?;
                        r.push(check_first_order(&model, loss, t, &theta, &lambda, &cfg)?);
                        r.push(check_second_action(&model, loss, t, &theta, &lambda, &cfg)?);
                        r.push(check_second_quadratic(&model, loss, t, &theta, &lambda, &cfg)?);
                        r
                    }
                    TransformKind::Discrete => {
                        let theta = draw_fixed_point(&model, t, &mut rng)?;
                        let mut r = vec![
                            check_discrete_first(&model, loss, t, &theta, &cfg)?,
                            check_discrete_second(&model, loss, t, &theta, &cfg)?,
                        ];
                        if let TransformSpec::Mirror { columns } = &t.spec {
                            let (a, b) = check_mirror(&model, loss, columns, &theta, &cfg)?;
                            r.extend([a, b]);
                        }
                        r
                    }
                };
                out.extend(reports.into_iter().map(|r| positioned(r, entry_seed, pos)));
            }
            let theta = draw_off_kink(&model, &mut rng)?;
            if model.homogeneity_degree.is_some() && model.c() == 1 {
                let ld = grad_and_hessian_of_loss(&model, loss, &theta, &cfg.diff)?;
                let mut r = Vec::new();
                if ld.loss_grad.data()[0] != 0.0 {
                    let (a, b) = check_homogeneity_specialization(&model, loss, &theta, &cfg)?;
                    r.extend([a, b]);
                    let (a, b) = check_eigen_alignment(&model, loss, &theta, &cfg)?;
                    r.extend([a, b]);
                }
                r.push(check_degenerate_branch(&model, loss, &theta, &cfg)?);
                r.push(sharpness_bound(&model, loss, &theta, &cfg)?.report);
                out.extend(r.into_iter().map(|r| positioned(r, entry_seed, pos)));
            }
            if model.last_layer_block.is_some() {
                let ll = check_last_layer_alignment(
                    &model,
                    loss,
                    &theta,
                    spec.last_layer_trials,
                    entry_seed ^ (pos as u64).rotate_left(32),
                    &cfg,
                )?;
                out.extend(ll.trials);
                out.extend(ll.variance);
            }
        }
    }
    Ok(out)
}

fn draw_off_kink(model: &Model, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    // sample_position already resamples near kinks
    model.sample_position(rng)
}

fn draw_fixed_point(model: &Model, t: &Transformation, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..MAX_DRAWS {
        let theta = fixed_point_project(t, &model.sample_position(rng)?)?;
        if model.is_off_kink(&theta) {
            return Ok(theta);
        }
    }
    Err(Error::NotGoodPosition(format!(
        "no off-kink fixed point of {} on {}",
        t.name, model.name
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::TransformSpec as TS;

    fn probe(x: &[f64]) -> Model {
        build_model(&ModelSpec::new(
            Architecture::LinearProbe { n: x.len() },
            Some(x.to_vec()),
            0,
        ))
        .unwrap()
    }

    fn exact() -> CheckConfig {
        CheckConfig::default()
    }

    #[test]
    fn euler_identity_on_linear_probe() {
        // y = 1, ℓ' = −1, X = θ, Y = 1: both sides equal −1
        let m = probe(&[1.0, 2.0]);
        let loss = Loss::square(&[2.0]);
        let t = build_transform(&TS::HomogeneityScaling { m: 1 }, &m).unwrap();
        let r = check_first_order(&m, &loss, &t, &[3.0, -1.0], &[0.0], &exact()).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.lhs_norm - 1.0).abs() < 1e-14);
        assert!(r.abs_residual < 1e-14);
    }

    #[test]
    fn hessian_action_on_linear_probe() {
        let m = probe(&[1.0, 2.0]);
        let loss = Loss::square(&[2.0]);
        let t = build_transform(&TS::HomogeneityScaling { m: 1 }, &m).unwrap();
        let theta = [3.0, -1.0];
        let r = check_second_action(&m, &loss, &t, &theta, &[0.0], &exact()).unwrap();
        assert!(r.pass, "{r:?}");
        // ∇²Lθ = (1, 2)
        assert!((r.lhs_norm - 5f64.sqrt()).abs() < 1e-14);
        let q = check_second_quadratic(&m, &loss, &t, &theta, &[0.0], &exact()).unwrap();
        // ⟨θ, ∇²Lθ⟩ = 1
        assert!((q.lhs_norm - 1.0).abs() < 1e-14 && q.pass, "{q:?}");
    }

    #[test]
    fn homogeneity_specializations_on_linear_probe() {
        let m = probe(&[1.0, 2.0]);
        let loss = Loss::square(&[2.0]);
        let theta = [3.0, -1.0];
        let (a, b) = check_homogeneity_specialization(&m, &loss, &theta, &exact()).unwrap();
        assert!(a.pass && b.pass);
        assert_eq!(a.extra["coefficient"], -1.0);
        let (al, col) = check_eigen_alignment(&m, &loss, &theta, &exact()).unwrap();
        assert!(al.pass && col.pass, "{al:?} {col:?}");
        assert_eq!(al.extra["alpha"], -1.0);
        assert!(al.extra["max_component_deviation"] < 1e-12);
        let s = sharpness_bound(&m, &loss, &theta, &exact()).unwrap();
        assert!((s.bound - 0.1).abs() < 1e-15);
        assert!((s.lambda_max - 5.0).abs() < 1e-12);
        assert!(s.report.pass);
    }

    #[test]
    fn degenerate_loss_is_reported() {
        // target equals the output, so ℓ' = 0
        let m = probe(&[1.0, 2.0]);
        let loss = Loss::square(&[1.0]);
        let theta = [3.0, -1.0];
        assert!(matches!(
            check_homogeneity_specialization(&m, &loss, &theta, &exact()),
            Err(Error::DegenerateLoss(_))
        ));
        let r = check_degenerate_branch(&m, &loss, &theta, &exact()).unwrap();
        assert!(r.pass);
        // ∇²Lθ = m y ℓ'' ∇f = x, not zero
        assert!((r.lhs_norm - 5f64.sqrt()).abs() < 1e-14);
        let (al, _) = check_eigen_alignment(&m, &loss, &theta, &exact()).unwrap();
        assert_eq!(al.extra["alpha"], 0.0);
        assert!(al.pass);
    }

    #[test]
    fn mirror_parity_example() {
        // f = x₁θ₁² + x₂θ₂ + x₃θ₁²θ₂ is even in θ₁; fixed points have θ₁ = 0
        let m = build_model(&ModelSpec::new(Architecture::EvenQuadratic, Some(vec![1.0, 1.0, 1.0]), 0)).unwrap();
        let loss = Loss::square(&[0.0]);
        let cols = vec![vec![1.0, 0.0]];
        let (g, h) = check_mirror(&m, &loss, &cols, &[0.0, 5.0], &exact()).unwrap();
        assert!(g.pass && h.pass, "{g:?} {h:?}");
        assert!(h.extra["equivalence_gap"] < 1e-12);
        assert!(matches!(
            check_mirror(&m, &loss, &cols, &[-3.0, 5.0], &exact()),
            Err(Error::NotFixedPoint { .. })
        ));
        let bad = vec![vec![1.0, 1.0]];
        assert!(matches!(
            check_mirror(&m, &loss, &bad, &[0.0, 5.0], &exact()),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn mirror_equivalence_off_symmetry() {
        // a non-symmetric Hessian block structure still satisfies the norm identity
        let m = build_model(&ModelSpec::new(Architecture::EvenQuadratic, Some(vec![1.0, 1.0, 1.0]), 0)).unwrap();
        let loss = Loss::square(&[0.2]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let cols = vec![vec![s, s]];
        let theta = [0.3, -0.3];
        let (_, h) = check_mirror(&m, &loss, &cols, &theta, &exact()).unwrap();
        assert!(h.extra["conjugation_residual"] > 1e-3);
        assert!(h.extra["equivalence_gap"] < 1e-12 * h.extra["conjugation_residual"].max(1.0));
        assert!(!h.pass);
    }

    #[test]
    fn discrete_checks_require_fixed_point() {
        let m = build_model(&ModelSpec::new(
            Architecture::DeepLinear { widths: vec![2, 2, 1] },
            None,
            9,
        ))
        .unwrap();
        let loss = Loss::square(&[0.4]);
        let t = build_transform(
            &TS::UnitSignFlip {
                block_in: "W1".into(),
                block_out: "W2".into(),
                unit: 0,
            },
            &m,
        )
        .unwrap();
        let theta = m.init.clone();
        assert!(matches!(
            check_discrete_first(&m, &loss, &t, &theta, &exact()),
            Err(Error::NotFixedPoint { .. })
        ));
        let fixed = fixed_point_project(&t, &theta).unwrap();
        assert!(check_discrete_first(&m, &loss, &t, &fixed, &exact()).unwrap().pass);
        let r = check_discrete_second(&m, &loss, &t, &fixed, &exact()).unwrap();
        assert!(r.pass);
        assert_eq!(r.extra["curvature_correction_norm"], 0.0);
    }

    #[test]
    fn last_layer_variance_form() {
        let m = build_model(&ModelSpec::new(
            Architecture::FactoredLastLayer {
                c: 3,
                s: 2,
                hidden: vec![3],
            },
            None,
            4,
        ))
        .unwrap();
        let loss = Loss::softmax_class(3, 2);
        let r = check_last_layer_alignment(&m, &loss, &m.init, 5, 11, &exact()).unwrap();
        assert_eq!(r.trials.len(), 5);
        assert_eq!(r.variance.len(), 5);
        assert!(r.trials.iter().chain(&r.variance).all(|x| x.pass));
        let probe_model = probe(&[1.0]);
        assert!(matches!(
            check_last_layer_alignment(&probe_model, &Loss::square(&[0.0]), &[1.0], 1, 0, &exact()),
            Err(Error::NotFactoredModel(_))
        ));
    }

    #[test]
    fn symmetric_terms_vanish_structurally() {
        let m = build_model(&ModelSpec::new(
            Architecture::DeepLinear { widths: vec![2, 3, 2] },
            None,
            1,
        ))
        .unwrap();
        let loss = Loss::square(&[0.1, -0.3]);
        let t = build_transform(
            &TS::LayerRescaling {
                block1: "W1".into(),
                block2: "W2".into(),
            },
            &m,
        )
        .unwrap();
        let r = check_second_action(&m, &loss, &t, &m.init, &[0.3], &exact()).unwrap();
        assert!(r.pass);
        assert_eq!(r.extra["dropped_terms_norm"], 0.0);
        assert_eq!(r.extra["reduced_gap"], 0.0);
    }

    #[test]
    fn full_catalog_passes_in_both_modes() {
        let spec = SuiteSpec::full_catalog();
        let reports = run_suite(&spec).unwrap();
        let failing: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
        assert!(failing.is_empty(), "{failing:#?}");
        let fd = SuiteSpec {
            diff: DiffConfig::finite_difference(),
            positions: 1,
            ..SuiteSpec::full_catalog()
        };
        let reports = run_suite(&fd).unwrap();
        let failing: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
        assert!(failing.is_empty(), "{failing:#?}");
    }

    #[test]
    fn suite_json_round_trip() {
        let spec = SuiteSpec::full_catalog();
        let text = serde_json::to_string(&spec).unwrap();
        let back: SuiteSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
