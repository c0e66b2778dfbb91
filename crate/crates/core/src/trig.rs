//! Slice-wise sine and cosine for the activation hot path.
//!
//! Arguments are reduced by multiples of π/2 in 64-bit, then short minimax
//! polynomials on `[−π/4, π/4]` are evaluated in 32-bit. The loops are
//! branch-free so they vectorize; results agree with the correctly rounded
//! values to within a few ulp for the phase magnitudes a sine network sees.

use std::f64::consts::FRAC_2_PI;
use std::f64::consts::FRAC_PI_2;

// Adding and subtracting 1.5·2⁵² rounds an f64 of magnitude < 2⁵¹ to the nearest integer.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

#[inline(always)]
fn reduce(x: f32) -> (f32, u32) {
    let xd = x as f64;
    let k = (xd * FRAC_2_PI + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (xd - k * FRAC_PI_2) as f32;
    (r, (k as i64 & 3) as u32)
}

#[inline(always)]
fn sin_poly(r: f32) -> f32 {
    let r2 = r * r;
    r + r * r2 * (-1.666_665_5e-1 + r2 * (8.332_161e-3 + r2 * -1.951_529_6e-4))
}

#[inline(always)]
fn cos_poly(r: f32) -> f32 {
    let r2 = r * r;
    1.0 - 0.5 * r2 + r2 * r2 * (4.166_664_6e-2 + r2 * (-1.388_731_6e-3 + r2 * 2.443_315_7e-5))
}

#[inline(always)]
fn quadrant(q: u32, s: f32, c: f32) -> (f32, f32) {
    let swap = q & 1 == 1;
    let (sv, cv) = if swap { (c, s) } else { (s, c) };
    let sin_neg = q & 2 == 2;
    let cos_neg = (q + 1) & 2 == 2;
    (if sin_neg { -sv } else { sv }, if cos_neg { -cv } else { cv })
}

/// `sin` and `cos` of one value.
#[inline]
pub fn sin_cos(x: f32) -> (f32, f32) {
    let (r, q) = reduce(x);
    quadrant(q, sin_poly(r), cos_poly(r))
}

/// Replaces every element with its sine.
pub fn sin_inplace(v: &mut [f32]) {
    for x in v {
        *x = sin_cos(*x).0;
    }
}

/// Replaces `v` with `sin(v)` and writes `cos(v)` into `cos_out`.
pub fn sin_cos_inplace(v: &mut [f32], cos_out: &mut [f32]) {
    assert_eq!(v.len(), cos_out.len());
    for (x, c) in v.iter_mut().zip(cos_out.iter_mut()) {
        let (s, co) = sin_cos(*x);
        *x = s;
        *c = co;
    }
}
