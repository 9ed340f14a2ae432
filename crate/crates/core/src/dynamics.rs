//! Training dynamics with charge tracking: gradient flow (RK4), gradient
//! descent, stochastic gradient flow (Euler–Maruyama) and the Noether drift
//! of conserved quantities under noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::fd_oracle_fn;
use crate::error::{Error, Result};
use crate::identities::{IdentityReport, ReportContext};
use crate::linalg::{psd_sqrt, symmetric_eigen};
use crate::models::{LossFamily, Objective};
use crate::tensor::{dot, Tensor};
use crate::transforms::{characteristic_direction, Charge, TransformKind, Transformation};

/// Maximum number of records kept per trajectory.
pub const MAX_RECORDS: usize = 1000;

/// Step halvings tried before a loss increase becomes a [`Error::StepFailure`].
pub const MAX_HALVINGS: usize = 20;

/// A loss `L` with gradient, as consumed by the integrators.
pub trait GradientField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Extra per-record series.
    fn diagnostics(&self, _theta: &[f64]) -> Result<Vec<(&'static str, f64)>> {
        Ok(Vec::new())
    }
}

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFiniteResult(what.to_string()))
    }
}

impl GradientField for Objective {
    fn dim(&self) -> usize {
        self.d()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        let v = Objective::value(self, theta)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteResult("loss".into()));
        }
        Ok(v)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        finite(Objective::gradient(self, theta)?, "gradient")
    }

    /// `f(θ)` for scalar single-sample objectives, plus the Rayleigh sharpness
    /// bound when the model is homogeneous.
    fn diagnostics(&self, theta: &[f64]) -> Result<Vec<(&'static str, f64)>> {
        let [(model, loss)] = self.terms() else {
            return Ok(Vec::new());
        };
        if model.c() != 1 {
            return Ok(Vec::new());
        }
        let y = model.forward(theta)?;
        let mut out = vec![("output", y[0])];
        if let Some(m) = model.homogeneity_degree {
            let m = f64::from(m);
            let (l1, l2) = (loss.grad(&y)[0], loss.hess(&y)[0]);
            let tt = dot(theta, theta);
            if tt > 0.0 {
                out.push(("sharpness_bound", m / tt * (l2 * m * y[0] * y[0] + l1 * (m - 1.0) * y[0])));
            }
        }
        Ok(out)
    }
}

/// `L(θ) = ½ θᵀAθ` for a symmetric `A`; the closed-form flow is `e^{−tA}θ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    n: usize,
    matrix: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(matrix: Vec<f64>, n: usize) -> Result<Self> {
        if matrix.len() != n * n || n == 0 {
            return Err(Error::SizeMismatch(format!("expected a {n}x{n} matrix")));
        }
        let asym = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (matrix[i * n + j] - matrix[j * n + i]).abs())
            .fold(0.0, f64::max);
        if asym > 0.0 || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("quadratic form must be finite and symmetric".into()));
        }
        Ok(QuadraticObjective { n, matrix })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        (0..n).for_each(|i| m[i * n + i] = 1.0);
        QuadraticObjective { n, matrix: m }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl GradientField for QuadraticObjective {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(0.5 * dot(theta, &self.gradient(theta)?))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.n {
            return Err(Error::SizeMismatch(format!("expected θ of length {}", self.n)));
        }
        let n = self.n;
        finite(
            (0..n).map(|i| dot(&self.matrix[i * n..(i + 1) * n], theta)).collect(),
            "gradient",
        )
    }
}

/// Time series recorded by an integrator. All series have one entry per
/// record time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub charges: BTreeMap<String, Vec<f64>>,
    pub diagnostics: BTreeMap<String, Vec<f64>>,
    /// Whole-run scalars (maxima, time averages, flags).
    pub summary: BTreeMap<String, f64>,
    pub events: Vec<String>,
}

impl Trajectory {
    fn record(&mut self, t: f64, theta: &[f64], loss: f64, charges: &[Charge], diag: &[(String, f64)]) {
        self.times.push(t);
        self.states.push(theta.to_vec());
        self.losses.push(loss);
        for c in charges {
            self.charges.entry(c.name.clone()).or_default().push(c.value(theta));
        }
        for (k, v) in diag {
            self.diagnostics.entry(k.clone()).or_default().push(*v);
        }
    }

    fn bump_max(&mut self, key: &str, v: f64) {
        let e = self.summary.entry(key.to_string()).or_insert(0.0);
        *e = e.max(v);
    }

    /// Times strictly increasing and every series as long as `times`.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams("trajectory times are not increasing".into()));
        }
        let lens = [self.states.len(), self.losses.len()]
            .into_iter()
            .chain(self.charges.values().map(Vec::len))
            .chain(self.diagnostics.values().map(Vec::len));
        for len in lens {
            if len != n {
                return Err(Error::SizeMismatch(format!("series of length {len}, expected {n}")));
            }
        }
        Ok(())
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    /// `max_t |C(t) − C(0)| / (1 + |C(0)|)`.
    pub fn charge_drift(&self, name: &str) -> Option<f64> {
        let s = self.charges.get(name)?;
        let c0 = *s.first()?;
        Some(s.iter().map(|c| (c - c0).abs()).fold(0.0, f64::max) / (1.0 + c0.abs()))
    }

    /// CSV with columns `time, loss, theta_norm, charges…, diagnostics…`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,loss,theta_norm");
        for k in self.charges.keys().chain(self.diagnostics.keys()) {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for i in 0..self.times.len() {
            let tn = dot(&self.states[i], &self.states[i]).sqrt();
            out.push_str(&format!("{:e},{:e},{:e}", self.times[i], self.losses[i], tn));
            for s in self.charges.values().chain(self.diagnostics.values()) {
                out.push_str(&format!(",{:e}", s[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn record_stride(steps: usize) -> usize {
    steps.div_ceil(MAX_RECORDS).max(1)
}

fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite() && t_end >= dt && t_end.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "need dt > 0 and T ≥ dt, got dt = {dt}, T = {t_end}"
        )));
    }
    Ok((t_end / dt).round() as usize)
}

fn field_diagnostics(field: &impl GradientField, theta: &[f64], grad: &[f64]) -> Result<Vec<(String, f64)>> {
    let mut d = vec![
        ("grad_norm".to_string(), dot(grad, grad).sqrt()),
        ("theta_norm_sq".to_string(), dot(theta, theta)),
    ];
    d.extend(field.diagnostics(theta)?.into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub t_end: f64,
    pub dt: f64,
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

fn rk4_step(field: &impl GradientField, theta: &[f64], g1: &[f64], h: f64) -> Result<Vec<f64>> {
    let g2 = field.gradient(&axpy(theta, -0.5 * h, g1))?;
    let g3 = field.gradient(&axpy(theta, -0.5 * h, &g2))?;
    let g4 = field.gradient(&axpy(theta, -h, &g3))?;
    Ok((0..theta.len())
        .map(|i| theta[i] - h / 6.0 * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]))
        .collect())
}

/// `θ̇ = −∇L` by classical RK4. A substep that raises the loss by more than
/// `1e-13(1 + |L|)` is halved, up to [`MAX_HALVINGS`] times.
pub fn gradient_flow(
    field: &impl GradientField,
    theta0: &[f64],
    cfg: &FlowConfig,
    charges: &[Charge],
) -> Result<Trajectory> {
    if theta0.len() != field.dim() {
        return Err(Error::SizeMismatch(format!("θ₀ has length {}, expected {}", theta0.len(), field.dim())));
    }
    let steps = step_count(cfg.t_end, cfg.dt)?;
    let stride = record_stride(steps);
    let mut traj = Trajectory::default();
    let mut theta = theta0.to_vec();
    let mut loss = field.value(&theta)?;
    let mut grad = field.gradient(&theta)?;
    traj.record(0.0, &theta, loss, charges, &field_diagnostics(field, &theta, &grad)?);
    let mut halvings_used = 0usize;
    for k in 1..=steps {
        let mut remaining = cfg.dt;
        while remaining > 0.0 {
            let mut h = remaining;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = rk4_step(field, &theta, &grad, h)?;
                let cl = field.value(&cand)?;
                if cl <= loss + 1e-13 * (1.0 + loss.abs()) {
                    accepted = Some((cand, cl));
                    break;
                }
                h *= 0.5;
                halvings_used += 1;
            }
            let Some((cand, cl)) = accepted else {
                return Err(Error::StepFailure {
                    time: (k - 1) as f64 * cfg.dt + (cfg.dt - remaining),
                    reason: format!("loss increased after {MAX_HALVINGS} halvings"),
                });
            };
            theta = cand;
            loss = cl;
            grad = field.gradient(&theta)?;
            remaining = if h >= remaining { 0.0 } else { remaining - h };
        }
        if k % stride == 0 || k == steps {
            let t = k as f64 * cfg.dt;
            traj.record(t, &theta, loss, charges, &field_diagnostics(field, &theta, &grad)?);
        }
    }
    traj.summary.insert("halvings".into(), halvings_used as f64);
    for c in charges {
        if let Some(d) = traj.charge_drift(&c.name) {
            traj.summary.insert(format!("charge_drift:{}", c.name), d);
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescentConfig {
    pub eta: f64,
    pub steps: usize,
}

/// Successive steps whose directions nearly reverse for this many
/// iterations, with no loss decrease, are reported as oscillation.
const OSCILLATION_WINDOW: usize = 10;

/// `θ ← θ − η∇L`. For every symmetry the normalized inner product
/// `|⟨Δθ, X(θ, 0)⟩| / (‖Δθ‖‖X‖)` is recorded (`orthogonality:<name>`) and its
/// maximum kept in `summary["max_orthogonality"]`.
pub fn gradient_descent(
    field: &impl GradientField,
    theta0: &[f64],
    cfg: &DescentConfig,
    charges: &[Charge],
    symmetries: &[Transformation],
) -> Result<Trajectory> {
    if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) {
        return Err(Error::InvalidParams(format!("step size must be ≥ 0, got {}", cfg.eta)));
    }
    if theta0.len() != field.dim() {
        return Err(Error::SizeMismatch(format!("θ₀ has length {}, expected {}", theta0.len(), field.dim())));
    }
    for t in symmetries {
        if !t.is_symmetry || t.kind != TransformKind::Continuous {
            return Err(Error::InvalidParams(format!("{} is not a continuous symmetry", t.name)));
        }
    }
    let stride = record_stride(cfg.steps);
    let mut traj = Trajectory::default();
    traj.summary.insert("max_orthogonality".into(), 0.0);
    let mut theta = theta0.to_vec();
    let mut loss = field.value(&theta)?;
    let mut grad = field.gradient(&theta)?;
    let mut diag = field_diagnostics(field, &theta, &grad)?;
    let mut prev_step: Option<Vec<f64>> = None;
    let mut reversals = 0usize;
    let mut oscillating = false;
    for k in 0..=cfg.steps {
        if k == cfg.steps {
            traj.record(k as f64, &theta, loss, charges, &diag);
            break;
        }
        let step: Vec<f64> = grad.iter().map(|g| -cfg.eta * g).collect();
        let sn = dot(&step, &step).sqrt();
        for t in symmetries {
            let x = characteristic_direction(t, &theta, &vec![0.0; t.p])?;
            let worst = x
                .data()
                .chunks(t.d)
                .map(|row| {
                    let xn = dot(row, row).sqrt();
                    if sn == 0.0 || xn == 0.0 {
                        0.0
                    } else {
                        dot(&step, row).abs() / (sn * xn)
                    }
                })
                .fold(0.0, f64::max);
            diag.push((format!("orthogonality:{}", t.name), worst));
            traj.bump_max("max_orthogonality", worst);
        }
        let cosine = match &prev_step {
            Some(p) => {
                let pn = dot(p, p).sqrt();
                if pn == 0.0 || sn == 0.0 {
                    0.0
                } else {
                    dot(p, &step) / (pn * sn)
                }
            }
            None => 0.0,
        };
        diag.push(("step_cosine".into(), cosine));
        if k % stride == 0 {
            traj.record(k as f64, &theta, loss, charges, &diag);
        }
        theta = axpy(&theta, 1.0, &step);
        let new_loss = field.value(&theta)?;
        if cosine < -0.9 && new_loss >= loss * (1.0 - 1e-12) {
            reversals += 1;
        } else {
            reversals = 0;
        }
        if reversals >= OSCILLATION_WINDOW && !oscillating {
            oscillating = true;
            traj.events.push(format!("oscillation detected at step {k}"));
        }
        loss = new_loss;
        grad = field.gradient(&theta)?;
        diag = field_diagnostics(field, &theta, &grad)?;
        prev_step = Some(step);
    }
    // the last record has no step diagnostics; pad so series stay aligned
    let n = traj.times.len();
    for series in traj.diagnostics.values_mut() {
        if series.len() + 1 == n {
            let last = *series.last().unwrap_or(&0.0);
            series.push(last);
        }
    }
    traj.summary.insert("oscillation".into(), f64::from(u8::from(oscillating)));
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormGrowthStatus {
    Ok,
    NeverCorrectlyClassified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormGrowthReport {
    pub status: NormGrowthStatus,
    /// First record time after which every sample stays correctly classified.
    pub t0: Option<f64>,
    /// `‖θ‖²` non-decreasing on records after `t0`.
    pub monotone: bool,
    /// Largest relative gap between `−⟨θ, ∇L⟩` and `−m Σ μ ℓ'(y) y`.
    pub max_euler_rel: f64,
    /// Largest gap between central differences of `½‖θ‖²` along the records
    /// and `−m Σ μ ℓ'(y) y`, relative to the largest `|m Σ μ ℓ'(y) y|`
    /// (diagnostic).
    pub max_fd_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Along a gradient flow of an `m`-homogeneous scalar model under a
/// classification loss, `d/dt ½‖θ‖² = −m Σ μ ℓ'(y) y`, which is positive once
/// every sample is correctly classified (`ℓ'(y) y < 0`).
pub fn norm_growth_check(objective: &Objective, traj: &Trajectory, tolerance: f64) -> Result<NormGrowthReport> {
    let m = objective.model.homogeneity_degree.ok_or_else(|| {
        Error::InvalidParams(format!("{} declares no homogeneity degree", objective.model.name))
    })?;
    let m = f64::from(m);
    if objective.model.c() != 1 {
        return Err(Error::SizeMismatch("norm growth needs a scalar output".into()));
    }
    if !matches!(objective.family, LossFamily::Exponential | LossFamily::Logistic) {
        return Err(Error::InvalidParams(format!(
            "{} loss lacks the classification sign property",
            objective.family.name()
        )));
    }
    traj.validate()?;
    let n = traj.times.len();
    let mut rhs = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    let mut max_euler_rel: f64 = 0.0;
    for theta in &traj.states {
        let mut r = 0.0;
        let mut ok = true;
        for ((model, loss), w) in objective.terms().iter().zip(&objective.dataset.weights) {
            let y = model.forward(theta)?;
            let l1y = loss.grad(&y)[0] * y[0];
            ok &= l1y < 0.0;
            r -= m * w * l1y;
        }
        let g = objective.gradient(theta)?;
        let lhs = -dot(theta, &g);
        let denom = lhs.abs().max(r.abs()).max(f64::MIN_POSITIVE);
        max_euler_rel = max_euler_rel.max((lhs - r).abs() / denom);
        rhs.push(r);
        correct.push(ok);
    }
    let k0 = (0..n).find(|&k| correct[k..].iter().all(|&c| c));
    let half_sq: Vec<f64> = traj.states.iter().map(|s| 0.5 * dot(s, s)).collect();
    // the velocity changes sign before t0, so the FD gap uses a run-wide scale
    let rhs_scale = rhs.iter().map(|r| r.abs()).fold(f64::MIN_POSITIVE, f64::max);
    let mut max_fd_rel: f64 = 0.0;
    for k in 1..n.saturating_sub(1) {
        let fd = (half_sq[k + 1] - half_sq[k - 1]) / (traj.times[k + 1] - traj.times[k - 1]);
        max_fd_rel = max_fd_rel.max((fd - rhs[k]).abs() / rhs_scale);
    }
    let monotone = match k0 {
        Some(k0) => (k0..n.saturating_sub(1)).all(|k| {
            let a = 2.0 * half_sq[k];
            2.0 * half_sq[k + 1] >= a - 1e-12 * (1.0 + a)
        }),
        None => true,
    };
    let status = if k0.is_some() {
        NormGrowthStatus::Ok
    } else {
        NormGrowthStatus::NeverCorrectlyClassified
    };
    Ok(NormGrowthReport {
        status,
        t0: k0.map(|k| traj.times[k]),
        monotone,
        max_euler_rel,
        max_fd_rel,
        tolerance,
        pass: monotone && max_euler_rel <= tolerance,
    })
}

/// Gradient noise covariance over a finite dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// `Σ = E[∇L_x∇L_xᵀ] − ∇L∇Lᵀ`, shape `(d, d)`.
    pub sigma: Tensor,
    pub trace: f64,
    /// `∂Tr Σ/∂θ = 2(E[∇²L_x∇L_x] − ∇²L∇L)`.
    pub grad_trace: Tensor,
    /// Central-difference gradient of `Tr Σ`.
    pub fd_grad_trace: Tensor,
    pub fd_rel_error: f64,
    pub min_eigenvalue: f64,
}

struct SampleDerivs {
    mean_grad: Vec<f64>,
    sigma: Vec<f64>,
    grad_trace: Vec<f64>,
}

fn sample_derivs(objective: &Objective, theta: &[f64], with_hessian: bool) -> Result<SampleDerivs> {
    let d = objective.d();
    let mut mean_grad = vec![0.0; d];
    let mut second = vec![0.0; d * d];
    let mut mean_hg = vec![0.0; d];
    let mut mean_h = vec![0.0; d * d];
    for (i, &w) in objective.dataset.weights.iter().enumerate() {
        let single = objective.sample_objective(i)?;
        let (g, h) = if with_hessian {
            let (_, g, h) = single.value_grad_hess(theta)?;
            (g, Some(h))
        } else {
            (single.gradient(theta)?, None)
        };
        let g = finite(g, "per-sample gradient")?;
        for a in 0..d {
            mean_grad[a] += w * g[a];
            for b in 0..d {
                second[a * d + b] += w * g[a] * g[b];
            }
        }
        if let Some(h) = h {
            let hd = h.data();
            for a in 0..d {
                mean_hg[a] += w * dot(&hd[a * d..(a + 1) * d], &g);
                for b in 0..d {
                    mean_h[a * d + b] += w * hd[a * d + b];
                }
            }
        }
    }
    let mut sigma = second;
    for a in 0..d {
        for b in 0..d {
            sigma[a * d + b] -= mean_grad[a] * mean_grad[b];
        }
    }
    let grad_trace = if with_hessian {
        (0..d)
            .map(|a| 2.0 * (mean_hg[a] - dot(&mean_h[a * d..(a + 1) * d], &mean_grad)))
            .collect()
    } else {
        Vec::new()
    };
    Ok(SampleDerivs {
        mean_grad,
        sigma,
        grad_trace,
    })
}

fn trace(m: &[f64], d: usize) -> f64 {
    (0..d).map(|i| m[i * d + i]).sum()
}

pub fn noise_covariance(objective: &Objective, theta: &[f64]) -> Result<CovarianceReport> {
    let d = objective.d();
    let s = sample_derivs(objective, theta, true)?;
    let tr = trace(&s.sigma, d);
    let trace_fn = |x: &[f64]| -> Result<Vec<f64>> {
        let s = sample_derivs(objective, x, false)?;
        Ok(vec![trace(&s.sigma, d)])
    };
    let fd = fd_oracle_fn(&trace_fn, theta, 1, 1, 1.0)?.reshape([d])?;
    let gt = Tensor::vector(&s.grad_trace);
    let denom = gt.norm().max(fd.norm()).max(1e-12);
    let fd_rel_error = gt.distance(&fd)? / denom;
    let min_eigenvalue = *symmetric_eigen(&s.sigma, d)?.values.last().expect("d ≥ 1");
    Ok(CovarianceReport {
        sigma: Tensor::from_vec([d, d], s.sigma)?,
        trace: tr,
        grad_trace: gt,
        fd_grad_trace: fd,
        fd_rel_error,
        min_eigenvalue,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `θ ← θ − ∇L dt + √2 σ B ξ √dt` with `BBᵀ = Σ(θ)`.
    ExactSde,
    /// `θ ← θ − ∇L_x dt` with `x ~ μ` each step.
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub mode: NoiseMode,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidNoiseModel(format!("σ must be ≥ 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `σ²` of the equivalent SDE. Minibatch steps carry covariance `dt²Σ`,
    /// i.e. `2σ²Σ dt` with `σ² = dt/2`.
    pub fn effective_sigma2(&self, dt: f64) -> f64 {
        match self.mode {
            NoiseMode::ExactSde => self.sigma * self.sigma,
            NoiseMode::Minibatch => 0.5 * dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgfConfig {
    pub t_end: f64,
    pub dt: f64,
    pub ensemble: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub noise: NoiseModel,
    pub config: SgfConfig,
    pub trajectories: Vec<Trajectory>,
}

/// Negative eigenvalues of `Σ` down to this are clipped before factoring.
const PSD_CLIP: f64 = 1e-10;

fn trace_product(a: &[f64], b: &[f64], d: usize) -> f64 {
    (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| a[i * d + j] * b[j * d + i])
        .sum()
}

fn sgf_one(
    objective: &Objective,
    theta0: &[f64],
    noise: &NoiseModel,
    cfg: &SgfConfig,
    charges: &[Charge],
    index: usize,
) -> Result<Trajectory> {
    let d = objective.d();
    let steps = step_count(cfg.t_end, cfg.dt)?;
    let stride = record_stride(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(index as u64);
    let hessians: Vec<Vec<f64>> = charges.iter().map(|c| c.hess().into_data()).collect();
    let mut trace_sum = vec![0.0; charges.len()];
    let mut traj = Trajectory::default();
    let mut theta = theta0.to_vec();
    let weights = &objective.dataset.weights;
    let noise_scale = (2.0f64).sqrt() * noise.sigma * cfg.dt.sqrt();
    for k in 0..=steps {
        let s = sample_derivs(objective, &theta, false)?;
        if k % stride == 0 || k == steps {
            let loss = GradientField::value(objective, &theta)?;
            traj.record(k as f64 * cfg.dt, &theta, loss, charges, &[]);
        }
        if k == steps {
            break;
        }
        for (acc, h) in trace_sum.iter_mut().zip(&hessians) {
            *acc += trace_product(&s.sigma, h, d);
        }
        let next: Vec<f64> = match noise.mode {
            NoiseMode::ExactSde => {
                let mut next = axpy(&theta, -cfg.dt, &s.mean_grad);
                if noise.sigma > 0.0 {
                    let b = psd_sqrt(&s.sigma, d, PSD_CLIP)?;
                    let xi: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    for (i, v) in next.iter_mut().enumerate() {
                        *v += noise_scale * dot(&b[i * d..(i + 1) * d], &xi);
                    }
                }
                next
            }
            NoiseMode::Minibatch => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let g = objective.sample_objective(pick)?.gradient(&theta)?;
                axpy(&theta, -cfg.dt, &g)
            }
        };
        theta = finite(next, "SGF state")?;
    }
    for (c, acc) in charges.iter().zip(trace_sum) {
        traj.summary.insert(format!("trace_term:{}", c.name), acc / steps as f64);
    }
    Ok(traj)
}

/// Stochastic gradient flow ensemble. Trajectory `i` draws from the ChaCha8
/// stream `i` of the master seed, so results do not depend on scheduling.
/// Each trajectory's `summary["trace_term:<charge>"]` holds the time average
/// of `Tr(Σ(θ_k)∇²C)` over its steps.
pub fn sgf(
    objective: &Objective,
    theta0: &[f64],
    noise: &NoiseModel,
    cfg: &SgfConfig,
    charges: &[Charge],
) -> Result<Ensemble> {
    noise.validate()?;
    step_count(cfg.t_end, cfg.dt)?;
    if theta0.len() != objective.d() {
        return Err(Error::SizeMismatch(format!("θ₀ has length {}, expected {}", theta0.len(), objective.d())));
    }
    let mut trajectories = (0..cfg.ensemble)
        .into_par_iter()
        .map(|i| sgf_one(objective, theta0, noise, cfg, charges, i))
        .collect::<Result<Vec<_>>>()?;
    let s = sample_derivs(objective, theta0, false)?;
    let budget = noise.effective_sigma2(cfg.dt) * trace(&s.sigma, objective.d()) * cfg.dt;
    let charge_scale = charges.iter().map(|c| 1.0 + c.value(theta0).abs()).fold(1.0, f64::max);
    if budget > 1e-2 * charge_scale {
        if let Some(t) = trajectories.first_mut() {
            t.events.push(format!(
                "warning: σ²·TrΣ·dt = {budget:e} is not small against the charge scale"
            ));
        }
    }
    Ok(Ensemble {
        noise: *noise,
        config: *cfg,
        trajectories,
    })
}

/// `(−σ²/2 ⟨∇C, ∂TrΣ/∂θ⟩, σ² Tr(Σ∇²C))`, the inner-product and trace forms of
/// the Noether drift at `θ`.
pub fn drift_theory(objective: &Objective, charge: &Charge, theta: &[f64], sigma2: f64) -> Result<(f64, f64)> {
    let cov = noise_covariance(objective, theta)?;
    let d = objective.d();
    let t1 = -0.5 * sigma2 * dot(&charge.grad(theta), cov.grad_trace.data());
    let t2 = sigma2 * trace_product(cov.sigma.data(), &charge.generator, d);
    Ok((t1, t2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TheoryPath {
    /// Theory evaluated along the ensemble-mean path.
    MeanPath,
    /// Theory averaged over every trajectory and step.
    #[default]
    Pathwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub theory_path: TheoryPath,
    /// Recorded states at which the two theory forms are compared.
    pub identity_states: usize,
    pub identity_tol: f64,
    pub min_ensemble: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            theory_path: TheoryPath::Pathwise,
            identity_states: 50,
            identity_tol: 1e-8,
            min_ensemble: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub ensemble: usize,
    /// Ensemble mean of `(C(T) − C(0))/T`.
    pub empirical: f64,
    pub standard_error: f64,
    pub theory: f64,
    pub theory_mean_path: f64,
    pub theory_pathwise: f64,
    /// `dt · max |½∇Lᵀ∇²C∇L|` over the sampled states: the Euler bias of the
    /// deterministic part.
    pub bias_budget: f64,
    pub identity_max_rel: f64,
    pub pass: bool,
    /// Identity and empirical comparisons in report form.
    pub reports: Vec<IdentityReport>,
}

/// Compares the ensemble drift of `charge` against theory and checks that the
/// inner-product and trace forms agree on recorded states.
pub fn noether_drift_check(
    ensemble: &Ensemble,
    charge: &Charge,
    objective: &Objective,
    cfg: &DriftConfig,
) -> Result<DriftReport> {
    let n = ensemble.trajectories.len();
    if n < cfg.min_ensemble {
        return Err(Error::InsufficientEnsemble {
            actual: n,
            required: cfg.min_ensemble,
        });
    }
    let sgf_cfg = ensemble.config;
    let sigma2 = ensemble.noise.effective_sigma2(sgf_cfg.dt);
    let t_end = sgf_cfg.t_end;
    let key = format!("trace_term:{}", charge.name);
    let mut drifts = Vec::with_capacity(n);
    let mut pathwise = 0.0;
    for t in &ensemble.trajectories {
        let series = t
            .charges
            .get(&charge.name)
            .ok_or_else(|| Error::InvalidParams(format!("charge {} was not tracked", charge.name)))?;
        let span = t.times.last().copied().unwrap_or(t_end);
        drifts.push((series.last().expect("recorded") - series[0]) / span);
        pathwise += sigma2 * t.summary.get(&key).copied().unwrap_or(0.0);
    }
    pathwise /= n as f64;
    let empirical = drifts.iter().sum::<f64>() / n as f64;
    let var = drifts.iter().map(|x| (x - empirical).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let standard_error = (var / n as f64).sqrt();

    // mean path: average state at each record, theory averaged over records
    let first = &ensemble.trajectories[0];
    let records = first.times.len();
    let d = objective.d();
    let mut mean_theory = 0.0;
    for k in 0..records {
        let mut mean = vec![0.0; d];
        for t in &ensemble.trajectories {
            mean.iter_mut().zip(&t.states[k]).for_each(|(m, s)| *m += s / n as f64);
        }
        mean_theory += drift_theory(objective, charge, &mean, sigma2)?.1;
    }
    let theory_mean_path = mean_theory / records as f64;

    let mut identity_max_rel: f64 = 0.0;
    let mut bias: f64 = 0.0;
    let states = cfg.identity_states.max(1);
    let ctx = ReportContext {
        model: objective.model.name.clone(),
        loss: objective.family.name().to_string(),
        transform: Some(charge.name.clone()),
        seed: Some(ensemble.noise.seed),
        ..ReportContext::default()
    };
    let mut worst_pair = (0.0, 0.0, 0.0);
    for j in 0..states {
        let traj = &ensemble.trajectories[j % n];
        let theta = &traj.states[(j * 7919) % records];
        let cov = noise_covariance(objective, theta)?;
        let t1 = -0.5 * sigma2 * dot(&charge.grad(theta), cov.grad_trace.data());
        let t2 = sigma2 * trace_product(cov.sigma.data(), &charge.generator, d);
        let scale = sigma2
            * (0.5 * dot(&charge.grad(theta), &charge.grad(theta)).sqrt() * cov.grad_trace.norm()
                + cov.sigma.norm() * charge.hess().norm());
        let rel = (t1 - t2).abs() / t1.abs().max(t2.abs()).max(scale).max(1e-300);
        if rel >= identity_max_rel {
            identity_max_rel = rel;
            worst_pair = (t1, t2, scale);
        }
        let g = objective.gradient(theta)?;
        let kg: Vec<f64> = charge.hess().matvec(&g)?;
        bias = bias.max((0.5 * dot(&g, &kg)).abs());
    }
    let bias_budget = sgf_cfg.dt * bias;
    let theory = match cfg.theory_path {
        TheoryPath::MeanPath => theory_mean_path,
        TheoryPath::Pathwise => pathwise,
    };
    let mut identity = IdentityReport::from_norms(
        "noether_drift_identity",
        "inner-product and trace forms of the Noether drift",
        worst_pair.0.abs(),
        worst_pair.1.abs(),
        (worst_pair.0 - worst_pair.1).abs(),
        worst_pair.2,
        cfg.identity_tol,
        ctx.clone(),
    );
    identity.rel_residual = identity_max_rel;
    identity.pass = identity_max_rel <= cfg.identity_tol;
    let allowed = 3.0 * standard_error + bias_budget;
    let gap = (empirical - theory).abs();
    let mut mc = IdentityReport::from_norms(
        "noether_drift_empirical",
        "ensemble charge drift against theory",
        empirical.abs(),
        theory.abs(),
        gap,
        allowed,
        1.0,
        ctx,
    );
    // the empirical comparison is judged in units of the allowance
    mc.rel_residual = gap / allowed.max(f64::MIN_POSITIVE);
    mc.pass = gap <= allowed;
    mc.extra.insert("standard_error".into(), standard_error);
    mc.extra.insert("bias_budget".into(), bias_budget);
    mc.extra.insert("theory_mean_path".into(), theory_mean_path);
    mc.extra.insert("theory_pathwise".into(), pathwise);
    mc.extra.insert("ensemble".into(), n as f64);
    let pass = identity.pass && mc.pass;
    Ok(DriftReport {
        ensemble: n,
        empirical,
        standard_error,
        theory,
        theory_mean_path,
        theory_pathwise: pathwise,
        bias_budget,
        identity_max_rel,
        pass,
        reports: vec![identity, mc],
    })
}
