//! Double-double arithmetic: a value is the unevaluated sum `hi + lo` of two
//! f64 with `|lo| <= ulp(hi) / 2`, giving about 106 significant bits.
//!
//! Arithmetic, `sqrt`, `exp`, `exp_m1`, `ln`, `tanh` and `powi` keep full
//! precision. The trigonometric and inverse hyperbolic functions, which no
//! model layer uses, fall back to f64.

use std::cmp::Ordering;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Num, NumCast, One, ToPrimitive, Zero};

use super::scalar::{check_extent, Float};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd { hi: 6.931_471_805_599_453e-1, lo: 2.319_046_813_846_299_6e-17 };

/// Halvings applied to the reduced argument of `exp`.
const EXP_HALVINGS: i32 = 10;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    /// Normalises `hi + lo`.
    pub fn new(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self { hi, lo: 0.0 };
        }
        let (hi, lo) = two_sum(hi, lo);
        Self { hi, lo }
    }

    pub const fn of(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    /// `self · 2^k`, exact barring overflow and underflow.
    fn ldexp(self, k: i32) -> Self {
        let half = 2f64.powi(k / 2);
        let rest = 2f64.powi(k - k / 2);
        Self { hi: self.hi * half * rest, lo: self.lo * half * rest }
    }

    /// `e^r − 1` by its Taylor series; accurate for `|r| < 1/2`.
    fn exp_m1_series(r: Self) -> Self {
        let mut term = r;
        let mut sum = r;
        for n in 2..60 {
            term = term * r / Self::of(n as f64);
            sum = sum + term;
            if term.hi.abs() <= 1e-34 * sum.hi.abs() {
                break;
            }
        }
        sum
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Self;
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        if !s.is_finite() {
            return Self::of(s);
        }
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::renorm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        if !p.is_finite() {
            return Self::of(p);
        }
        Self::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || q1 == 0.0 && self.hi == 0.0 {
            return Self::of(q1);
        }
        let r = self - o * Self::of(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Self::of(q2);
        let q3 = r.hi / o.hi;
        Self::renorm(q1, q2) + Self::of(q3)
    }
}

impl Rem for Dd {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        self - num_traits::Float::trunc(self / o) * o
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Self::of(0.0)
    }

    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Self::of(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;

    /// Parses at f64 precision.
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        <f64 as Num>::from_str_radix(s, radix).map(Self::of)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        num_traits::Float::trunc(*self).as_f64().to_i64()
    }

    fn to_u64(&self) -> Option<u64> {
        num_traits::Float::trunc(*self).as_f64().to_u64()
    }

    fn to_f64(&self) -> Option<f64> {
        Some(self.as_f64())
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::of)
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), Add::add)
    }
}

/// f64 fallback for functions the model does not use.
fn via_f64(x: Dd, f: impl Fn(f64) -> f64) -> Dd {
    Dd::of(f(x.as_f64()))
}

impl num_traits::Float for Dd {
    fn nan() -> Self {
        Self::of(f64::NAN)
    }

    fn infinity() -> Self {
        Self::of(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        Self::of(f64::NEG_INFINITY)
    }

    fn neg_zero() -> Self {
        Self::of(-0.0)
    }

    fn min_value() -> Self {
        Self::of(f64::MIN)
    }

    fn min_positive_value() -> Self {
        Self::of(f64::MIN_POSITIVE)
    }

    fn max_value() -> Self {
        Self::of(f64::MAX)
    }

    fn epsilon() -> Self {
        Self::of(2f64.powi(-104))
    }

    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }

    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }

    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }

    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }

    fn classify(self) -> FpCategory {
        self.hi.classify()
    }

    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            Self::renorm(h, self.lo.floor())
        } else {
            Self::of(h)
        }
    }

    fn ceil(self) -> Self {
        let h = self.hi.ceil();
        if h == self.hi {
            Self::renorm(h, self.lo.ceil())
        } else {
            Self::of(h)
        }
    }

    fn round(self) -> Self {
        if self.hi < 0.0 {
            -(-self + Self::of(0.5)).floor()
        } else {
            (self + Self::of(0.5)).floor()
        }
    }

    fn trunc(self) -> Self {
        if self.hi < 0.0 {
            self.ceil()
        } else {
            self.floor()
        }
    }

    fn fract(self) -> Self {
        self - self.trunc()
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn signum(self) -> Self {
        Self::of(self.hi.signum())
    }

    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }

    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }

    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::of(self.hi.sqrt());
        }
        let a = Self::of(self.hi.sqrt());
        a + (self - a * a) / (a + a)
    }

    fn exp(self) -> Self {
        if self.hi.is_nan() || self.hi > 709.78 {
            return Self::of(self.hi.exp());
        }
        if self.hi < -745.2 {
            return Self::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Self::of(k)).ldexp(-EXP_HALVINGS);
        // (1 + s)² − 1 = s·(2 + s) undoes one halving without losing the
        // small part of s.
        let mut s = Self::exp_m1_series(r);
        for _ in 0..EXP_HALVINGS {
            s = s * (s + Self::of(2.0));
        }
        (s + Self::one()).ldexp(k as i32)
    }

    fn exp2(self) -> Self {
        (self * LN2).exp()
    }

    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::of(self.hi.ln());
        }
        // One Newton step on e^y = x from the f64 logarithm.
        let y = Self::of(self.hi.ln());
        y + self * (-y).exp() - Self::one()
    }

    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }

    fn log2(self) -> Self {
        self.ln() / LN2
    }

    fn log10(self) -> Self {
        self.ln() / Self::of(10.0).ln()
    }

    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }

    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }

    fn cbrt(self) -> Self {
        via_f64(self, f64::cbrt)
    }

    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }

    fn sin(self) -> Self {
        via_f64(self, f64::sin)
    }

    fn cos(self) -> Self {
        via_f64(self, f64::cos)
    }

    fn tan(self) -> Self {
        via_f64(self, f64::tan)
    }

    fn asin(self) -> Self {
        via_f64(self, f64::asin)
    }

    fn acos(self) -> Self {
        via_f64(self, f64::acos)
    }

    fn atan(self) -> Self {
        via_f64(self, f64::atan)
    }

    fn atan2(self, other: Self) -> Self {
        Self::of(self.as_f64().atan2(other.as_f64()))
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn exp_m1(self) -> Self {
        if self.hi.abs() < 0.5 {
            Self::exp_m1_series(self)
        } else {
            self.exp() - Self::one()
        }
    }

    fn ln_1p(self) -> Self {
        (Self::one() + self).ln()
    }

    fn sinh(self) -> Self {
        let e = self.exp_m1();
        // sinh x = (e^x − e^−x) / 2 = e·(e + 2) / (2·(e + 1)) with e = e^x − 1.
        e * (e + Self::of(2.0)) / ((e + Self::one()) * Self::of(2.0))
    }

    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()) / Self::of(2.0)
    }

    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Self::of(self.hi.signum());
        }
        let e = (self + self).exp_m1();
        e / (e + Self::of(2.0))
    }

    fn asinh(self) -> Self {
        via_f64(self, f64::asinh)
    }

    fn acosh(self) -> Self {
        via_f64(self, f64::acosh)
    }

    fn atanh(self) -> Self {
        via_f64(self, f64::atanh)
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        num_traits::Float::integer_decode(self.hi)
    }
}

impl Float for Dd {
    fn from_f64(v: f64) -> Self {
        Self::of(v)
    }

    fn as_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        (ar, ac): (isize, isize),
        b: &[Self],
        (br, bc): (isize, isize),
        beta: Self,
        c: &mut [Self],
        (cr, cc): (isize, isize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_extent(a.len(), m, k, (ar, ac));
        check_extent(b.len(), k, n, (br, bc));
        check_extent(c.len(), m, n, (cr, cc));
        let at = |i: usize, j: usize, rs: isize, cs: isize| (i as isize * rs + j as isize * cs) as usize;
        for i in 0..m {
            for j in 0..n {
                let dot = (0..k).map(|p| a[at(i, p, ar, ac)] * b[at(p, j, br, bc)]).sum::<Self>();
                let ci = at(i, j, cr, cc);
                // As in BLAS, c is not read when beta is zero.
                c[ci] = if beta.is_zero() { alpha * dot } else { alpha * dot + beta * c[ci] };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Float as _;

    fn close(a: Dd, hi: f64, lo: f64, tol: f64) {
        let err = ((a - Dd::new(hi, lo)) / Dd::new(hi, lo)).as_f64().abs();
        assert!(err < tol, "{a:?} vs {hi:e} + {lo:e}: {err:e}");
    }

    #[test]
    fn one_third_times_three() {
        let t = Dd::one() / Dd::of(3.0);
        let back = t * Dd::of(3.0) - Dd::one();
        assert!(back.as_f64().abs() < 1e-31, "{back:?}");
    }

    #[test]
    fn sqrt_two_squared() {
        let s = Dd::of(2.0).sqrt();
        assert!((s * s - Dd::of(2.0)).as_f64().abs() < 1e-31);
    }

    #[test]
    fn exp_of_one() {
        // e = 2.718281828459045235360287471352662497757...
        close(Dd::one().exp(), 2.718_281_828_459_045, 1.445_646_891_729_250_2e-16, 1e-30);
    }

    #[test]
    fn ln_inverts_exp() {
        for x in [-30.0, -1.7, -1e-3, 0.3, 2.5, 20.0] {
            let x = Dd::of(x) / Dd::of(7.0);
            // exp(x) near 1 only holds x to absolute precision.
            let err = (x.exp().ln() - x).as_f64().abs() / x.as_f64().abs().max(1.0);
            assert!(err < 1e-30, "{x:?}: {err:e}");
        }
    }

    #[test]
    fn tanh_small_and_large() {
        let x = Dd::of(1e-20);
        close(x.tanh(), 1e-20, 0.0, 1e-30);
        assert_eq!(Dd::of(50.0).tanh(), Dd::one());
        let y = Dd::of(0.7);
        let via_exp = ((y + y).exp() - Dd::one()) / ((y + y).exp() + Dd::one());
        close(y.tanh(), via_exp.hi, via_exp.lo, 1e-30);
    }

    #[test]
    fn gemm_matches_f64() {
        let a: Vec<Dd> = (0..6).map(|v| Dd::of(v as f64 - 2.0)).collect();
        let b: Vec<Dd> = (0..6).map(|v| Dd::of(0.5 * v as f64)).collect();
        let mut c = vec![Dd::of(f64::NAN); 4];
        Dd::gemm(2, 3, 2, Dd::one(), &a, (3, 1), &b, (2, 1), Dd::zero(), &mut c, (2, 1));
        let got: Vec<f64> = c.iter().map(|v| v.as_f64()).collect();
        assert_eq!(got, vec![-1.0, -2.5, 8.0, 11.0]);
    }
}
