//! Scalar abstraction shared by every tensor kernel.
//!
//! Kernels are written once against [`Real`]. `f64` is the working type;
//! [`Dual`] carries a tangent alongside the value so that running a backward
//! pass over dual numbers yields exact Hessian-vector products
//! (forward-over-reverse).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Default
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn from_f64(v: f64) -> Self;
    /// Value with an attached tangent. Plain reals drop the tangent.
    fn with_tangent(v: f64, tangent: f64) -> Self;
    /// Real part.
    fn re(self) -> f64;
    /// Tangent part (zero for plain reals).
    fn tangent(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re().is_finite() && self.tangent().is_finite()
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }
    #[inline]
    fn max_re(self, other: Self) -> Self {
        if other.re() > self.re() {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn with_tangent(v: f64, _tangent: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn tangent(self) -> f64 {
        0.0
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
}

/// First-order dual number `re + du·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.du - q * o.du) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl DivAssign for Dual {
    #[inline]
    fn div_assign(&mut self, o: Dual) {
        *self = *self / o;
    }
}

impl Sum for Dual {
    fn sum<I: Iterator<Item = Dual>>(iter: I) -> Dual {
        iter.fold(Dual::default(), |a, b| a + b)
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn with_tangent(v: f64, tangent: f64) -> Self {
        Dual::new(v, tangent)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn tangent(self) -> f64 {
        self.du
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.du)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.du)
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual::new(self.re * k, self.du * k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dual_tangents_match_finite_differences() {
        let x = 0.7;
        let d = Dual::new(x, 1.0);
        assert!((d.exp().du - fd(f64::exp, x)).abs() < 1e-8);
        assert!((d.ln().du - fd(f64::ln, x)).abs() < 1e-8);
        assert!((d.sqrt().du - fd(f64::sqrt, x)).abs() < 1e-8);
        assert!((d.tanh().du - fd(f64::tanh, x)).abs() < 1e-8);
        let q = Dual::new(2.0, 0.0) / d;
        assert!((q.du - fd(|v| 2.0 / v, x)).abs() < 1e-6);
    }

    #[test]
    fn plain_real_drops_tangent() {
        assert_eq!(<f64 as Real>::with_tangent(3.0, 9.0), 3.0);
        assert_eq!(<f64 as Real>::tangent(3.0), 0.0);
    }
}
