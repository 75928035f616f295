//! Double-double arithmetic for finite-difference oracles.
//!
//! Loss values are evaluated with roughly 32 significant digits so central
//! differences at `h = 1e-5` are limited by truncation, not cancellation.

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: 0.6931471805599453,
    lo: 2.3190468138462996e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let y = Dd::new(self.hi.sqrt());
        // one Newton step on y² = x
        y + (self - y * y) / (y * Dd::new(2.0))
    }

    pub fn exp(self) -> Dd {
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * Dd::new(k);
        // r / 2^10, Taylor, then square back up
        let r = r * Dd::new(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..=20 {
            term = term * r / Dd::new(i as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: sum.hi * scale,
            lo: sum.lo * scale,
        }
    }

    pub fn ln(self) -> Dd {
        let y = Dd::new(self.hi.ln());
        // Newton on exp(y) = x
        y + self * (-y).exp() - Dd::ONE
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

pub fn sum(xs: impl IntoIterator<Item = Dd>) -> Dd {
    xs.into_iter().fold(Dd::ZERO, |a, b| a + b)
}

/// `softmax(z / tau)` in double-double.
pub fn softmax(z: &[Dd], tau: f64) -> Vec<Dd> {
    let t = Dd::new(tau);
    let max = z.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = z.iter().map(|&v| ((v - Dd::new(max)) / t).exp()).collect();
    let s = sum(e.iter().copied());
    e.into_iter().map(|v| v / s).collect()
}

/// `log softmax(z)` at index `k`.
pub fn log_softmax_at(z: &[Dd], k: usize) -> Dd {
    let max = z.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
    let s = sum(z.iter().map(|&v| (v - Dd::new(max)).exp()));
    z[k] - Dd::new(max) - s.ln()
}

pub fn kl(p: &[Dd], q: &[Dd]) -> Dd {
    sum(p
        .iter()
        .zip(q)
        .filter(|(pi, _)| pi.hi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln())))
}

/// Central differences of `f` around `x`, with `f` evaluated in double-double.
pub fn central_diff<F: Fn(&[f64]) -> Dd>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let up = x[i] + h;
            let down = x[i] - h;
            probe[i] = up;
            let fu = f(&probe);
            probe[i] = down;
            let fd = f(&probe);
            probe[i] = x[i];
            ((fu - fd) / Dd::new(up - down)).to_f64()
        })
        .collect()
}

pub fn lift(x: &[f64]) -> Vec<Dd> {
    x.iter().map(|&v| Dd::new(v)).collect()
}
