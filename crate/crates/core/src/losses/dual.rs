//! Forward-mode dual numbers carrying four partial derivatives, enough to
//! differentiate a box loss with respect to its four coordinates exactly.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and [`Dual4`].
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn atan2(self, x: Self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;

    /// Branch selected on the primal value.
    fn max(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self
        } else {
            other
        }
    }

    fn square(self) -> Self {
        self * self
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        if self.val() > 0.0 {
            self + (Self::cst(1.0) + (-self).exp()).ln()
        } else {
            (Self::cst(1.0) + self.exp()).ln()
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    /// The `i`-th independent variable with value `v`.
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual4 { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Dual4 {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual4 {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual4 {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual4 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual4 {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual4 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Dual4 {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) * inv * inv),
        }
    }
}

impl Neg for Dual4 {
    type Output = Self;
    fn neg(self) -> Self {
        Dual4 {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Real for Dual4 {
    fn cst(v: f64) -> Self {
        Dual4 { v, d: [0.0; 4] }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn atan2(self, x: Self) -> Self {
        let r2 = self.v * self.v + x.v * x.v;
        let v = self.v.atan2(x.v);
        if r2 == 0.0 {
            return Dual4::cst(v);
        }
        Dual4 {
            v,
            d: std::array::from_fn(|i| (x.v * self.d[i] - self.v * x.d[i]) / r2),
        }
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
}
