//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All model code is written against [`Real`], which is implemented for `f32`
//! and `f64`. Special functions are evaluated in double precision and rounded
//! to the target type.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self {
        Self::lit(erfc_f64(self.f64()))
    }

    /// Scaled complementary error function `exp(x^2) erfc(x)`.
    fn erfcx(self) -> Self {
        Self::lit(erfcx_f64(self.f64()))
    }

    /// Error function.
    fn erf(self) -> Self {
        Self::lit(erf_f64(self.f64()))
    }

    /// Row-major dense product `c = a * b` with `a: m x k`, `b: k x n`, `c: m x n`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// Converts an `f64` literal, panicking only if the value is unrepresentable.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Real for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: slice lengths checked above; row-major strides describe
        // exactly the checked extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: as for the f64 implementation.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Standard normal distribution function.
#[inline]
pub fn norm_cdf<T: Real>(w: T) -> T {
    T::lit(0.5) * (-w * T::FRAC_1_SQRT_2()).erfc()
}

/// Returns `(Phi(w), ln Phi(w))`, accurate far into the lower tail where
/// `Phi(w)` itself underflows.
#[inline]
pub fn norm_cdf_with_ln<T: Real>(w: T) -> (T, T) {
    let (p, lp) = norm_cdf_with_ln_f64(w.f64());
    (T::lit(p), T::lit(lp))
}

pub(crate) fn norm_cdf_with_ln_f64(w: f64) -> (f64, f64) {
    let x = -w * std::f64::consts::FRAC_1_SQRT_2;
    if w > 0.0 {
        let upper = 0.5 * erfc_f64(-x);
        (1.0 - upper, (-upper).ln_1p())
    } else if w > -5.0 {
        let p = 0.5 * erfc_f64(x);
        (p, p.ln())
    } else {
        let lp = (0.5 * erfcx_f64(x)).ln() - x * x;
        (lp.exp(), lp)
    }
}

/// Logarithm of the standard normal density.
#[inline]
pub fn ln_norm_pdf<T: Real>(w: T) -> T {
    let half_ln_2pi = T::lit(0.918_938_533_204_672_7);
    -T::lit(0.5) * w * w - half_ln_2pi
}

/// Kahan-compensated accumulator with a fixed traversal order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum<T> {
    sum: T,
    carry: T,
}

impl<T: Real> KahanSum<T> {
    pub fn new() -> Self {
        Self { sum: T::zero(), carry: T::zero() }
    }

    #[inline]
    pub fn add(&mut self, x: T) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum
    }
}

// Rational approximations of W. J. Cody, "Rational Chebyshev approximations
// for the error function", Math. Comp. 23 (1969), as distributed in CALERF.

const THRESH: f64 = 0.46875;
const SQRPI: f64 = 5.641_895_835_477_562_869_5e-1;
const XSMALL: f64 = 1.11e-16;
const XBIG: f64 = 26.543;
const XHUGE: f64 = 6.71e7;
const XMAX: f64 = 2.53e307;
const XNEG: f64 = -26.628;

const A: [f64; 5] = [
    3.161_123_743_870_565_6,
    1.138_641_541_510_501_56e2,
    3.774_852_376_853_020_21e2,
    3.209_377_589_138_469_47e3,
    1.857_777_061_846_031_53e-1,
];
const B: [f64; 4] = [
    2.360_129_095_234_412_09e1,
    2.440_246_379_344_441_73e2,
    1.282_616_526_077_372_28e3,
    2.844_236_833_439_170_62e3,
];
const C: [f64; 9] = [
    5.641_884_969_886_700_89e-1,
    8.883_149_794_388_375_94,
    6.611_919_063_714_162_95e1,
    2.986_351_381_974_001_31e2,
    8.819_522_212_417_690_9e2,
    1.712_047_612_634_070_58e3,
    2.051_078_377_826_071_47e3,
    1.230_339_354_797_997_25e3,
    2.153_115_354_744_038_46e-8,
];
const D: [f64; 8] = [
    1.574_492_611_070_983_47e1,
    1.176_939_508_913_124_99e2,
    5.371_811_018_620_098_58e2,
    1.621_389_574_566_690_19e3,
    3.290_799_235_733_459_63e3,
    4.362_619_090_143_247_16e3,
    3.439_367_674_143_721_64e3,
    1.230_339_354_803_749_42e3,
];
const P: [f64; 6] = [
    3.053_266_349_612_323_44e-1,
    3.603_448_999_498_044_39e-1,
    1.257_817_261_112_292_46e-1,
    1.608_378_514_874_227_66e-2,
    6.587_491_615_298_378_03e-4,
    1.631_538_713_730_209_78e-2,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822_42,
    1.872_952_849_923_467_25,
    5.279_051_029_514_284_12e-1,
    6.051_834_131_244_131_91e-2,
    2.335_204_976_268_691_85e-3,
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Erf,
    Erfc,
    Erfcx,
}

fn calerf(x: f64, kind: Kind) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let y = x.abs();
    let mut result;
    if y <= THRESH {
        let ysq = if y > XSMALL { y * y } else { 0.0 };
        let mut xnum = A[4] * ysq;
        let mut xden = ysq;
        for i in 0..3 {
            xnum = (xnum + A[i]) * ysq;
            xden = (xden + B[i]) * ysq;
        }
        result = x * (xnum + A[3]) / (xden + B[3]);
        if kind != Kind::Erf {
            result = 1.0 - result;
        }
        if kind == Kind::Erfcx {
            result *= ysq.exp();
        }
        return result;
    } else if y <= 4.0 {
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        result = (xnum + C[7]) / (xden + D[7]);
        if kind != Kind::Erfcx {
            let ysq = (y * 16.0).trunc() / 16.0;
            let del = (y - ysq) * (y + ysq);
            result *= (-ysq * ysq).exp() * (-del).exp();
        }
    } else {
        result = 0.0;
        let mut skip = false;
        if y >= XBIG {
            if kind != Kind::Erfcx || y >= XMAX {
                skip = true;
            } else if y >= XHUGE {
                result = SQRPI / y;
                skip = true;
            }
        }
        if !skip {
            let ysq = 1.0 / (y * y);
            let mut xnum = P[5] * ysq;
            let mut xden = ysq;
            for i in 0..4 {
                xnum = (xnum + P[i]) * ysq;
                xden = (xden + Q[i]) * ysq;
            }
            result = ysq * (xnum + P[4]) / (xden + Q[4]);
            result = (SQRPI - result) / y;
            if kind != Kind::Erfcx {
                let ysq = (y * 16.0).trunc() / 16.0;
                let del = (y - ysq) * (y + ysq);
                result *= (-ysq * ysq).exp() * (-del).exp();
            }
        }
    }
    match kind {
        Kind::Erf => {
            result = (0.5 - result) + 0.5;
            if x < 0.0 {
                result = -result;
            }
        }
        Kind::Erfc => {
            if x < 0.0 {
                result = 2.0 - result;
            }
        }
        Kind::Erfcx => {
            if x < 0.0 {
                if x < XNEG {
                    result = f64::INFINITY;
                } else {
                    let ysq = (x * 16.0).trunc() / 16.0;
                    let del = (x - ysq) * (x + ysq);
                    let e = (ysq * ysq).exp() * del.exp();
                    result = (e + e) - result;
                }
            }
        }
    }
    result
}

pub(crate) fn erf_f64(x: f64) -> f64 {
    calerf(x, Kind::Erf)
}

pub(crate) fn erfc_f64(x: f64) -> f64 {
    calerf(x, Kind::Erfc)
}

pub(crate) fn erfcx_f64(x: f64) -> f64 {
    calerf(x, Kind::Erfcx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Values from high-precision tables.
        let cases = [
            (0.1, 0.112_462_916_018_284_89),
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.5, 0.999_999_256_901_627_7),
        ];
        for (x, want) in cases {
            assert!((erf_f64(x) - want).abs() < 1e-15, "erf({x})");
            assert!((erf_f64(-x) + want).abs() < 1e-15);
        }
        assert!((erfc_f64(5.0) - 1.537_459_794_428_034_9e-12).abs() < 1e-26);
        assert!((erfc_f64(10.0) - 2.088_487_583_762_544_8e-45).abs() < 1e-58);
        assert_eq!(erfc_f64(30.0), 0.0);
        assert!((erfc_f64(-1.0) - 1.842_700_792_949_715).abs() < 1e-15);
    }

    #[test]
    fn erfcx_matches_scaled_erfc() {
        for &x in &[-3.0, -0.3, 0.0, 0.2, 1.7, 3.9, 4.5, 8.0, 20.0] {
            let direct = (x * x as f64).exp() * erfc_f64(x);
            assert!(((erfcx_f64(x) - direct) / direct).abs() < 1e-13, "x = {x}");
        }
        // erfcx(x) ~ 1 / (x sqrt(pi)) for large x.
        let x = 1e8;
        assert!((erfcx_f64(x) * x * std::f64::consts::PI.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_cdf_is_continuous_across_branches() {
        for &w in &[-5.0 - 1e-9, -5.0, -5.0 + 1e-9, -1e-12, 0.0, 1e-12] {
            let (p, lp) = norm_cdf_with_ln_f64(w);
            assert!((p.ln() - lp).abs() < 1e-12, "w = {w}");
        }
        let (_, lp) = norm_cdf_with_ln_f64(-40.0);
        // ln Phi(-40) = -804.608442013754...
        assert!((lp + 804.608_442_013_754_2).abs() < 1e-9);
    }

    #[test]
    fn kahan_recovers_small_terms() {
        let mut k = KahanSum::<f64>::new();
        k.add(1.0);
        for _ in 0..10_000 {
            k.add(1e-16);
        }
        assert!((k.value() - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn gemm_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
        let mut c32 = [0.0f32; 4];
        f32::gemm(2, 3, 2, &a32, &b32, &mut c32);
        assert_eq!(c32, [4.0, 5.0, 10.0, 11.0]);
    }
}
