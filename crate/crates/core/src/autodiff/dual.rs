//! Forward-mode dual numbers over a fixed number of seed directions.
//!
//! `Dual<0>` degenerates to plain `f64` arithmetic, which lets one generic
//! kernel serve both the value-only and the differentiated path.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Seeds direction `index` with `slope`; indices `>= N` are ignored.
    #[inline]
    pub fn variable(v: f64, index: usize, slope: f64) -> Self {
        let mut d = [0.0; N];
        if index < N {
            d[index] = slope;
        }
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: f64, slope: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= slope;
        }
        Self { v, d }
    }

    #[inline]
    pub fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    #[inline]
    pub fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    #[inline]
    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    /// Zero slope at the origin.
    #[inline]
    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, if s > 0.0 { 0.5 / s } else { 0.0 })
    }

    #[inline]
    pub fn sigmoid(self) -> Self {
        let s = super::sigmoid(self.v);
        self.chain(s, s * (1.0 - s))
    }

    /// Slope `sign(x)`, zero at the origin.
    #[inline]
    pub fn abs(self) -> Self {
        let s = if self.v > 0.0 {
            1.0
        } else if self.v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.chain(self.v.abs(), s)
    }

    #[inline]
    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        self.chain(self.v * s, s)
    }

    /// Clamp with zero slope outside `[lo, hi]`.
    #[inline]
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.v < lo {
            Self::constant(lo)
        } else if self.v > hi {
            Self::constant(hi)
        } else {
            self
        }
    }
}

impl<const N: usize> From<f64> for Dual<N> {
    fn from(v: f64) -> Self {
        Self::constant(v)
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let v = self.v / o.v;
        let mut d = [0.0; N];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - v * o.d[i]) / o.v;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.v += o;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: f64) -> Self {
        self.v -= o;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        self.scale(o)
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
    fn elementary_slopes() {
        let x = 0.37;
        let d = Dual::<1>::variable(x, 0, 1.0);
        let cases: [(Dual<1>, fn(f64) -> f64); 5] = [
            (d.sin(), f64::sin),
            (d.cos(), f64::cos),
            (d.exp(), f64::exp),
            (d.sqrt(), f64::sqrt),
            (d.sigmoid(), crate::autodiff::sigmoid),
        ];
        for (out, f) in cases {
            assert_eq!(out.v, f(x));
            assert!((out.d[0] - fd(f, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn quotient_rule() {
        let a = Dual::<2>::variable(1.5, 0, 1.0);
        let b = Dual::<2>::variable(-0.4, 1, 1.0);
        let q = (a * a + b) / (b - 3.0);
        let f = |a: f64, b: f64| (a * a + b) / (b - 3.0);
        assert!((q.d[0] - fd(|x| f(x, -0.4), 1.5)).abs() < 1e-8);
        assert!((q.d[1] - fd(|x| f(1.5, x), -0.4)).abs() < 1e-8);
    }

    #[test]
    fn zero_directions_are_plain_values() {
        let x = Dual::<0>::variable(2.0, 0, 1.0);
        assert_eq!((x * x).sqrt().v, 2.0);
    }
}
