//! Hyper-dual numbers `a + b ε₁ + c ε₂ + d ε₁ε₂` with `ε₁² = ε₂² = 0`.
//!
//! Seeding `ε₁` along direction `u` and `ε₂` along `v` makes the `ε₁ε₂`
//! coefficient of `f(x)` equal to the exact mixed directional second
//! derivative `uᵀ ∇²f(x) v`, with no truncation error.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Arithmetic needed by model and loss forward passes. Implemented for `f64`
/// and [`HyperDual`] so every forward pass is written once.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    /// Real part.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// `max(x, 0)` with derivative `0` at the kink.
    fn relu(self) -> Self;
    /// `ln(1 + eˣ)` evaluated without overflow.
    fn softplus(self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HyperDual {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d12: f64,
}

impl HyperDual {
    pub const fn new(value: f64, d1: f64, d2: f64, d12: f64) -> Self {
        HyperDual { value, d1, d2, d12 }
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at the real part.
    #[inline]
    pub fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        HyperDual {
            value: f,
            d1: df * self.d1,
            d2: df * self.d2,
            d12: df * self.d12 + ddf * self.d1 * self.d2,
        }
    }

    pub fn recip(self) -> Self {
        let inv = 1.0 / self.value;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Scalar for HyperDual {
    fn constant(v: f64) -> Self {
        HyperDual::new(v, 0.0, 0.0, 0.0)
    }
    fn re(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let inv = 1.0 / self.value;
        self.chain(self.value.ln(), inv, -inv * inv)
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        let dt = 1.0 - t * t;
        self.chain(t, dt, -2.0 * t * dt)
    }
    fn relu(self) -> Self {
        if self.value > 0.0 {
            self
        } else {
            HyperDual::constant(0.0)
        }
    }
    fn softplus(self) -> Self {
        let s = sigmoid(self.value);
        self.chain(softplus(self.value), s, s * (1.0 - s))
    }
}

impl Add for HyperDual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        HyperDual::new(
            self.value + o.value,
            self.d1 + o.d1,
            self.d2 + o.d2,
            self.d12 + o.d12,
        )
    }
}

impl Sub for HyperDual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        HyperDual::new(
            self.value - o.value,
            self.d1 - o.d1,
            self.d2 - o.d2,
            self.d12 - o.d12,
        )
    }
}

impl Mul for HyperDual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        HyperDual::new(
            self.value * o.value,
            self.value * o.d1 + self.d1 * o.value,
            self.value * o.d2 + self.d2 * o.value,
            self.value * o.d12 + self.d1 * o.d2 + self.d2 * o.d1 + self.d12 * o.value,
        )
    }
}

impl Div for HyperDual {
    type Output = Self;
    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl Neg for HyperDual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        HyperDual::new(-self.value, -self.d1, -self.d2, -self.d12)
    }
}

impl AddAssign for HyperDual {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for HyperDual {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for HyperDual {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Add<f64> for HyperDual {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        HyperDual::new(self.value + o, self.d1, self.d2, self.d12)
    }
}

impl Sub<f64> for HyperDual {
    type Output = Self;
    fn sub(self, o: f64) -> Self {
        HyperDual::new(self.value - o, self.d1, self.d2, self.d12)
    }
}

impl Mul<f64> for HyperDual {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        HyperDual::new(self.value * o, self.d1 * o, self.d2 * o, self.d12 * o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(x: f64) -> HyperDual {
        HyperDual::new(x, 1.0, 1.0, 0.0)
    }

    fn check(h: HyperDual, f: f64, df: f64, ddf: f64) {
        let tol = 1e-13 * (1.0 + f.abs() + df.abs() + ddf.abs());
        assert!((h.value - f).abs() < tol, "value {} vs {f}", h.value);
        assert!((h.d1 - df).abs() < tol, "d1 {} vs {df}", h.d1);
        assert!((h.d2 - df).abs() < tol, "d2 {} vs {df}", h.d2);
        assert!((h.d12 - ddf).abs() < tol, "d12 {} vs {ddf}", h.d12);
    }

    #[test]
    fn elementary_functions_match_analytic_derivatives() {
        let x = 0.7;
        check(seeded(x).exp(), x.exp(), x.exp(), x.exp());
        check(seeded(x).ln(), x.ln(), 1.0 / x, -1.0 / (x * x));
        let t = x.tanh();
        check(seeded(x).tanh(), t, 1.0 - t * t, -2.0 * t * (1.0 - t * t));
        check(seeded(x) * seeded(x) * seeded(x), x.powi(3), 3.0 * x * x, 6.0 * x);
        check(seeded(x).recip(), 1.0 / x, -1.0 / (x * x), 2.0 / x.powi(3));
        let s = 1.0 / (1.0 + (-x).exp());
        check(seeded(x).softplus(), (1.0 + x.exp()).ln(), s, s * (1.0 - s));
        check((seeded(x) * 3.0 + 1.0) / seeded(x), 3.0 + 1.0 / x, -1.0 / (x * x), 2.0 / x.powi(3));
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        check(seeded(-0.3).relu(), 0.0, 0.0, 0.0);
        check(seeded(0.0).relu(), 0.0, 0.0, 0.0);
        check(seeded(0.4).relu(), 0.4, 1.0, 0.0);
    }

    #[test]
    fn nilpotent_perturbations() {
        let e1 = HyperDual::new(0.0, 1.0, 0.0, 0.0);
        let e2 = HyperDual::new(0.0, 0.0, 1.0, 0.0);
        assert_eq!(e1 * e1, HyperDual::constant(0.0));
        assert_eq!(e2 * e2, HyperDual::constant(0.0));
        assert_eq!(e1 * e2, HyperDual::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn softplus_is_stable_for_large_arguments() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }
}
