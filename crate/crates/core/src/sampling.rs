//! Deterministic sample sets: Halton points and geometric ladders.

use crate::torus::TorusPoint;

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical inverse of `index` in `base`.
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// The first `count` Halton points of `T^dim`, skipping the origin.
pub fn halton_points(count: usize, dim: usize) -> Vec<TorusPoint> {
    assert!(dim <= PRIMES.len(), "Halton bases only cover dimension <= {}", PRIMES.len());
    (1..=count as u64)
        .map(|i| TorusPoint::new(PRIMES[..dim].iter().map(|&b| halton(i, b)).collect()))
        .collect()
}

/// `t0 · ratio^k` for `k = 0..count`.
pub fn geometric_ladder(t0: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| t0 * ratio.powi(k as i32)).collect()
}

/// Log-uniform ladder from `largest` down by factor `sqrt(2)` covering `decades` decades.
pub fn default_ladder(largest: f64, decades: f64) -> Vec<f64> {
    let ratio = std::f64::consts::FRAC_1_SQRT_2;
    let count = (decades * 10f64.ln() / 2f64.sqrt().ln()).round() as usize + 1;
    geometric_ladder(largest, ratio, count)
}
