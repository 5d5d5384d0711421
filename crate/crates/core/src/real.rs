//! Scalar abstraction for the forward kernel.
//!
//! The forward computations are generic so the finite-difference harness can
//! evaluate them in double-double arithmetic while analytic gradients stay in
//! `f64`. Central differences in plain `f64` lose roughly `1e-16 / eps` in
//! absolute terms, which swamps gradient components below about `1e-6`.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::{One, Zero};
use twofloat::TwoFloat;

/// Minimal floating-point interface used by the forward kernel.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn is_finite(self) -> bool;

    #[inline]
    fn abs(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    #[inline]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    #[inline]
    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }

    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// Double-double scalar (about 106 bits of mantissa).
///
/// Arithmetic comes from [`TwoFloat`]; `exp` and `ln_1p` are evaluated here
/// because the upstream versions are only accurate to about `1e-11` in parts
/// of the range the kernel uses.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default)]
pub struct DoubleDouble(TwoFloat);

impl DoubleDouble {
    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }

    fn powi2(k: i32) -> Self {
        DoubleDouble(TwoFloat::from(2f64.powi(k)))
    }
}

const LN2_HI: f64 = std::f64::consts::LN_2;
const LN2_LO: f64 = 2.319_046_813_846_299_6e-17;
const EXP_HALVINGS: i32 = 9;

macro_rules! dd_binop {
    ($tr:ident, $f:ident, $op:tt) => {
        impl $tr for DoubleDouble {
            type Output = DoubleDouble;
            #[inline]
            fn $f(self, rhs: DoubleDouble) -> DoubleDouble {
                DoubleDouble(self.0 $op rhs.0)
            }
        }
    };
}

dd_binop!(Add, add, +);
dd_binop!(Sub, sub, -);
dd_binop!(Mul, mul, *);
dd_binop!(Div, div, /);

impl Neg for DoubleDouble {
    type Output = DoubleDouble;
    #[inline]
    fn neg(self) -> DoubleDouble {
        DoubleDouble(-self.0)
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        DoubleDouble(TwoFloat::from(0.0))
    }

    fn is_zero(&self) -> bool {
        self.0.hi() == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        DoubleDouble(TwoFloat::from(1.0))
    }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        DoubleDouble(TwoFloat::from(x))
    }
}

impl Real for DoubleDouble {
    fn of(x: f64) -> Self {
        DoubleDouble::from(x)
    }

    fn as_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }

    fn exp(self) -> Self {
        let x = self.as_f64();
        if x.is_nan() {
            return self;
        }
        if x < -708.0 {
            return Self::zero();
        }
        if x > 709.0 {
            return Self::of(f64::INFINITY);
        }
        // x = k ln2 + r, |r| <= ln2 / 2, then exp(r) = exp(r / 2^9)^(2^9).
        let k = (x / LN2_HI).round();
        let ln2 = DoubleDouble(TwoFloat::new_add(LN2_HI, LN2_LO));
        let r = (self - ln2 * Self::of(k)) * Self::powi2(-EXP_HALVINGS);
        // expm1 by Taylor series; |r| < 7e-4 so 12 terms reach 1e-40.
        let mut term = r;
        let mut em1 = r;
        for n in 2..=12 {
            term = term * r / Self::of(n as f64);
            em1 = em1 + term;
        }
        // (1 + a)^2 - 1 = a (2 + a), keeping the small part separate.
        for _ in 0..EXP_HALVINGS {
            em1 = em1 * (Self::of(2.0) + em1);
        }
        (Self::one() + em1) * Self::powi2(k as i32)
    }

    fn ln_1p(self) -> Self {
        let x = self.as_f64();
        if x.is_nan() || x < -1.0 {
            return Self::of(f64::NAN);
        }
        if x == -1.0 && self.0.lo() <= 0.0 {
            return Self::of(f64::NEG_INFINITY);
        }
        let u = Self::one() + self;
        // Newton on g(y) = exp(y) - u, written as y += u exp(-y) - 1.
        let mut y = Self::of(x.ln_1p());
        for _ in 0..2 {
            y = y + (u * (-y).exp() - Self::one());
        }
        y
    }

    fn is_finite(self) -> bool {
        self.0.hi().is_finite()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    let e = (-x.abs()).exp();
    let recip = S::one() / (S::one() + e);
    if x >= S::zero() {
        recip
    } else {
        e * recip
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(dd: DoubleDouble, hi: f64, lo: f64) -> f64 {
        let truth = DoubleDouble(TwoFloat::new_add(hi, lo));
        ((dd - truth) / truth).as_f64().abs()
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [-30.0, -2.5, 0.0, 0.7, 12.0] {
            let a: f64 = sigmoid(x);
            let b: f64 = sigmoid(-x);
            assert!((a + b - 1.0).abs() < 1e-15);
        }
        assert_eq!(sigmoid(0.0_f64), 0.5);
    }

    // Reference values from a 50-digit evaluation, split into hi + lo.
    #[test]
    fn double_double_exp_matches_reference() {
        let cases = [
            (-80.0, 1.8048513878454153e-35, -1.2636603623764078e-51),
            (-16.3, 8.336810789962771e-08, 5.591146675679881e-24),
            (-2.0, 0.1353352832366127, -1.042381423288669e-17),
            (-0.7, 0.4965853037914095, 9.827550225511106e-18),
            (0.4, 1.4918246976412703, 3.4465650470333193e-18),
            (16.0, 8886110.520507872, 5.321182483501564e-10),
        ];
        for (x, hi, lo) in cases {
            let e = DoubleDouble::of(x).exp();
            assert!(
                rel(e, hi, lo) < 1e-22,
                "exp({x}): rel err {}",
                rel(e, hi, lo)
            );
        }
        assert_eq!(DoubleDouble::zero().exp(), DoubleDouble::one());
    }

    #[test]
    fn double_double_ln_1p_matches_reference() {
        let cases = [
            (-1e-7, -1.0000000500000033e-07, 2.44146596723983e-24),
            (-0.5, -std::f64::consts::LN_2, -2.3190468138462996e-17),
            (-0.9, -std::f64::consts::LN_10, -4.968982586806388e-18),
            (-(1.0 - 1e-7), -16.118095651484676, 6.312124114281461e-16),
        ];
        for (x, hi, lo) in cases {
            let v = DoubleDouble::of(x).ln_1p();
            assert!(
                rel(v, hi, lo) < 1e-22,
                "ln_1p({x}): rel err {}",
                rel(v, hi, lo)
            );
        }
    }

    #[test]
    fn double_double_round_trips() {
        assert_eq!(DoubleDouble::of(0.1).as_f64(), 0.1);
        let s: DoubleDouble = sigmoid(DoubleDouble::of(1.5));
        assert!((s.as_f64() - sigmoid(1.5_f64)).abs() < 1e-16);
    }
}
