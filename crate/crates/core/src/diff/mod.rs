//! Exact first and second derivatives by hyper-dual directional sweeps, and
//! an independent central-difference oracle.

mod hyperdual;

pub use hyperdual::{HyperDual, Scalar};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A map `Rᵈ → Rᶜ` whose evaluation is generic over [`Scalar`].
pub trait GenericMap: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

/// Object-safe view of a [`GenericMap`].
pub trait DiffMap: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval_f64(&self, x: &[f64]) -> Vec<f64>;
    fn eval_dual(&self, x: &[HyperDual]) -> Vec<HyperDual>;
}

impl<T: GenericMap> DiffMap for T {
    fn input_dim(&self) -> usize {
        GenericMap::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        GenericMap::output_dim(self)
    }
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x)
    }
    fn eval_dual(&self, x: &[HyperDual]) -> Vec<HyperDual> {
        self.apply(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffMode {
    #[default]
    Exact,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    pub fd_step_scale: f64,
    pub mode: DiffMode,
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig {
            fd_step_scale: 1.0,
            mode: DiffMode::Exact,
        }
    }
}

impl DiffConfig {
    pub fn exact() -> Self {
        DiffConfig::default()
    }

    pub fn finite_difference() -> Self {
        DiffConfig {
            mode: DiffMode::FiniteDifference,
            ..DiffConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fd_step_scale > 0.0 && self.fd_step_scale.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "fd_step_scale must be positive, got {}",
                self.fd_step_scale
            )));
        }
        Ok(())
    }

    pub fn jacobian(&self, map: &dyn DiffMap, point: &[f64]) -> Result<Tensor> {
        match self.mode {
            DiffMode::Exact => jacobian(map, point),
            DiffMode::FiniteDifference => fd_oracle(map, point, 1, self.fd_step_scale),
        }
    }

    pub fn second_derivative(&self, map: &dyn DiffMap, point: &[f64]) -> Result<Tensor> {
        match self.mode {
            DiffMode::Exact => second_derivative(map, point),
            DiffMode::FiniteDifference => fd_oracle(map, point, 2, self.fd_step_scale),
        }
    }
}

fn check_point(map: &dyn DiffMap, point: &[f64]) -> Result<()> {
    if point.len() != map.input_dim() {
        return Err(Error::SizeMismatch(format!(
            "point has length {}, map expects {}",
            point.len(),
            map.input_dim()
        )));
    }
    if let Some((index, &value)) = point.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteEntry { index, value });
    }
    Ok(())
}

fn finite_or_err(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteResult(what.to_string()))
    }
}

fn eval_checked(map: &dyn DiffMap, x: &[f64]) -> Result<Vec<f64>> {
    let out = map.eval_f64(x);
    if out.len() != map.output_dim() {
        return Err(Error::SizeMismatch(format!(
            "map returned {} outputs, declared {}",
            out.len(),
            map.output_dim()
        )));
    }
    finite_or_err(&out, "map value")?;
    Ok(out)
}

fn seeded(point: &[f64], i: usize, j: Option<usize>) -> Vec<HyperDual> {
    point
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let d1 = if k == i { 1.0 } else { 0.0 };
            let d2 = match j {
                Some(j) if k == j => 1.0,
                _ => 0.0,
            };
            HyperDual::new(v, d1, d2, 0.0)
        })
        .collect()
}

/// Value of the map at `point`.
pub fn value(map: &dyn DiffMap, point: &[f64]) -> Result<Vec<f64>> {
    check_point(map, point)?;
    eval_checked(map, point)
}

/// `J[i, j] = ∂ out_j / ∂ x_i`, shape `(d, c)`.
pub fn jacobian(map: &dyn DiffMap, point: &[f64]) -> Result<Tensor> {
    check_point(map, point)?;
    let (d, c) = (map.input_dim(), map.output_dim());
    let sweeps: Vec<Vec<HyperDual>> = (0..d)
        .into_par_iter()
        .map(|i| map.eval_dual(&seeded(point, i, None)))
        .collect();
    if sweeps.iter().flatten().any(|h| !h.value.is_finite()) {
        return Err(Error::NonFiniteResult("map value".into()));
    }
    let data: Vec<f64> = sweeps.iter().flatten().map(|h| h.d1).collect();
    finite_or_err(&data, "jacobian")?;
    Tensor::from_vec([d, c], data)
}

/// `D[i, j, k] = ∂² out_k / ∂x_i ∂x_j`, shape `(d, d, c)`, from the
/// `d(d+1)/2` sweeps over unordered index pairs.
pub fn second_derivative(map: &dyn DiffMap, point: &[f64]) -> Result<Tensor> {
    Ok(derivatives(map, point)?.hessian)
}

/// Value, Jacobian and second derivative of a map from one set of sweeps.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: Vec<f64>,
    pub jacobian: Tensor,
    pub hessian: Tensor,
}

pub fn derivatives(map: &dyn DiffMap, point: &[f64]) -> Result<Derivatives> {
    check_point(map, point)?;
    let (d, c) = (map.input_dim(), map.output_dim());
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let sweeps: Vec<Vec<HyperDual>> = pairs
        .par_iter()
        .map(|&(i, j)| map.eval_dual(&seeded(point, i, Some(j))))
        .collect();
    let mut hess = vec![0.0; d * d * c];
    let mut jac = vec![0.0; d * c];
    let value: Vec<f64> = match sweeps.first() {
        Some(s) => s.iter().map(|h| h.value).collect(),
        None => eval_checked(map, point)?,
    };
    for (&(i, j), out) in pairs.iter().zip(&sweeps) {
        for (k, h) in out.iter().enumerate() {
            hess[(i * d + j) * c + k] = h.d12;
            hess[(j * d + i) * c + k] = h.d12;
            if i == j {
                jac[i * c + k] = h.d1;
            }
        }
    }
    finite_or_err(&value, "map value")?;
    finite_or_err(&jac, "jacobian")?;
    finite_or_err(&hess, "second derivative")?;
    Ok(Derivatives {
        value,
        jacobian: Tensor::from_vec([d, c], jac)?,
        hessian: Tensor::from_vec([d, d, c], hess)?,
    })
}

/// Central-difference derivatives. Order 1 returns shape `(d, c)` with step
/// `scale·max(1,|xᵢ|)·ε^{1/3}`; order 2 returns `(d, d, c)` from the
/// four-point mixed stencil with step `scale·max(1,|xᵢ|)·ε^{1/4}`, which
/// balances its `O(h²)` truncation against `O(ε/h²)` rounding.
pub fn fd_oracle(map: &dyn DiffMap, point: &[f64], order: usize, scale: f64) -> Result<Tensor> {
    check_point(map, point)?;
    let eval = |x: &[f64]| eval_checked(map, x);
    fd_core(&eval, point, map.output_dim(), order, scale)
}

/// [`fd_oracle`] for a plain `f64` closure with `c` outputs.
pub fn fd_oracle_fn(
    map: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync),
    point: &[f64],
    c: usize,
    order: usize,
    scale: f64,
) -> Result<Tensor> {
    if let Some((index, &value)) = point.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteEntry { index, value });
    }
    let eval = |x: &[f64]| -> Result<Vec<f64>> {
        let out = map(x)?;
        if out.len() != c {
            return Err(Error::SizeMismatch(format!(
                "map returned {} outputs, declared {c}",
                out.len()
            )));
        }
        finite_or_err(&out, "map value")?;
        Ok(out)
    };
    fd_core(&eval, point, c, order, scale)
}

fn fd_core(
    eval: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync),
    point: &[f64],
    c: usize,
    order: usize,
    scale: f64,
) -> Result<Tensor> {
    if !(1..=2).contains(&order) {
        return Err(Error::IndexOutOfRange(format!(
            "finite differences of order {order} are not supported"
        )));
    }
    let d = point.len();
    let base = if order == 1 {
        f64::EPSILON.cbrt()
    } else {
        f64::EPSILON.powf(0.25)
    };
    let steps: Vec<f64> = point
        .iter()
        .map(|v| {
            let h = scale * base * v.abs().max(1.0);
            // make the step exactly representable relative to the coordinate
            (v + h) - v
        })
        .collect();
    let shifted = |moves: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut x = point.to_vec();
        for &(i, s) in moves {
            x[i] += s * steps[i];
        }
        eval(&x)
    };
    if order == 1 {
        let rows: Vec<Result<Vec<f64>>> = (0..d)
            .into_par_iter()
            .map(|i| {
                let plus = shifted(&[(i, 1.0)])?;
                let minus = shifted(&[(i, -1.0)])?;
                Ok(plus
                    .iter()
                    .zip(&minus)
                    .map(|(p, m)| (p - m) / (2.0 * steps[i]))
                    .collect())
            })
            .collect();
        let data: Vec<f64> = rows.into_iter().collect::<Result<Vec<_>>>()?.concat();
        return Tensor::from_vec([d, c], data);
    }
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let center = eval(point)?;
    let entries: Vec<Result<Vec<f64>>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                let plus = shifted(&[(i, 1.0)])?;
                let minus = shifted(&[(i, -1.0)])?;
                let h2 = steps[i] * steps[i];
                return Ok((0..c)
                    .map(|k| (plus[k] - 2.0 * center[k] + minus[k]) / h2)
                    .collect());
            }
            let pp = shifted(&[(i, 1.0), (j, 1.0)])?;
            let pm = shifted(&[(i, 1.0), (j, -1.0)])?;
            let mp = shifted(&[(i, -1.0), (j, 1.0)])?;
            let mm = shifted(&[(i, -1.0), (j, -1.0)])?;
            let denom = 4.0 * steps[i] * steps[j];
            Ok((0..c)
                .map(|k| (pp[k] - pm[k] - mp[k] + mm[k]) / denom)
                .collect())
        })
        .collect();
    let mut hess = vec![0.0; d * d * c];
    for (&(i, j), e) in pairs.iter().zip(entries) {
        for (k, v) in e?.into_iter().enumerate() {
            hess[(i * d + j) * c + k] = v;
            hess[(j * d + i) * c + k] = v;
        }
    }
    finite_or_err(&hess, "finite-difference second derivative")?;
    Tensor::from_vec([d, d, c], hess)
}

/// Norm-wise relative distance `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> Result<f64> {
    let diff = a.distance(b)?;
    Ok(diff / a.norm().max(b.norm()).max(floor))
}
