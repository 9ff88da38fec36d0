//! Forward-mode dual numbers with a fixed number of tangent slots, and the
//! small scalar trait the dynamics are written against.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Maximum number of simultaneous directional derivatives.
pub const MAX_TANGENTS: usize = 16;

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn val(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }

    /// Clamp with zero derivative outside `[lo, hi]`.
    fn clip(self, lo: f64, hi: f64) -> Self {
        if self.val() < lo {
            Self::cst(lo)
        } else if self.val() > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn val(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; MAX_TANGENTS],
}

impl Dual {
    /// A variable seeded with unit tangent in slot `slot`.
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; MAX_TANGENTS];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= dv);
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; MAX_TANGENTS];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; MAX_TANGENTS];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - v * o.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl Scalar for Dual {
    fn cst(x: f64) -> Self {
        Self { v: x, d: [0.0; MAX_TANGENTS] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_quotient_rules() {
        let x = Dual::var(2.0, 0);
        let y = Dual::var(3.0, 1);
        let f = x * y / (x + y);
        // f = xy/(x+y); ∂f/∂x = y²/(x+y)², ∂f/∂y = x²/(x+y)²
        assert!((f.v - 1.2).abs() < 1e-15);
        assert!((f.d[0] - 9.0 / 25.0).abs() < 1e-15);
        assert!((f.d[1] - 4.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn trig_derivatives() {
        let x = Dual::var(0.7, 3);
        assert!((x.sin().d[3] - 0.7f64.cos()).abs() < 1e-15);
        assert!((x.cos().d[3] + 0.7f64.sin()).abs() < 1e-15);
        assert!((x.tanh().d[3] - (1.0 - 0.7f64.tanh().powi(2))).abs() < 1e-15);
    }

    #[test]
    fn clip_kills_derivative_outside_box() {
        assert_eq!(Dual::var(2.0, 0).clip(-1.0, 1.0).d[0], 0.0);
        assert_eq!(Dual::var(0.5, 0).clip(-1.0, 1.0).d[0], 1.0);
    }
}
