//! The splitting `T𝕋² = E_u ⊕ E_s` by projective cocycle iteration, the
//! transform `𝒯ₙ` on sampled line fields, and finite-time hyperbolicity rates.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifolds::{grow_manifold, ManifoldKind, ManifoldRequest, Polyline};
use crate::sampling::halton_points;
use crate::torus::{Inverse, Jacobian, TorusMap, TorusPoint};

/// A line through the origin of `R²`, stored as a unit vector whose first
/// nonzero component is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction2 {
    u: [f64; 2],
}

impl Direction2 {
    pub fn new(u1: f64, u2: f64) -> Result<Self> {
        let norm = u1.hypot(u2);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot normalize ({u1}, {u2})")));
        }
        Ok(Self::canonical(u1 / norm, u2 / norm))
    }

    fn canonical(u1: f64, u2: f64) -> Self {
        let flip = u1 < 0.0 || (u1 == 0.0 && u2 < 0.0);
        let (a, b) = if flip { (-u1, -u2) } else { (u1, u2) };
        // adding +0.0 turns -0.0 into +0.0 so equal lines compare bitwise
        Self { u: [a + 0.0, b + 0.0] }
    }

    pub fn from_slope(slope: f64) -> Self {
        Self::new(1.0, slope).expect("finite slope")
    }

    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c, s).expect("unit vector")
    }

    pub fn horizontal() -> Self {
        Self { u: [1.0, 0.0] }
    }

    pub fn vertical() -> Self {
        Self { u: [0.0, 1.0] }
    }

    pub fn components(&self) -> [f64; 2] {
        self.u
    }

    /// Unsigned angle between the two lines, in `[0, π/2]`.
    pub fn angle_to(&self, other: &Direction2) -> f64 {
        let cross = self.u[0] * other.u[1] - self.u[1] * other.u[0];
        let dot = self.u[0] * other.u[0] + self.u[1] * other.u[1];
        cross.abs().atan2(dot.abs())
    }

    /// Rotate the line counterclockwise by `theta`.
    pub fn rotated(&self, theta: f64) -> Direction2 {
        let (s, c) = theta.sin_cos();
        Direction2::new(c * self.u[0] - s * self.u[1], s * self.u[0] + c * self.u[1])
            .expect("rotation preserves length")
    }
}

/// `J·dir`, renormalized.
pub fn pushforward(j: &Jacobian, dir: &Direction2) -> Result<Direction2> {
    if j.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: j.dim() });
    }
    let m = [[j.get(0, 0), j.get(0, 1)], [j.get(1, 0), j.get(1, 1)]];
    push2(&m, dir)
}

fn push2(m: &[[f64; 2]; 2], dir: &Direction2) -> Result<Direction2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-300 {
        return Err(Error::SingularJacobian(det.abs()));
    }
    let [a, b] = dir.u;
    Direction2::new(m[0][0] * a + m[0][1] * b, m[1][0] * a + m[1][1] * b)
}

fn jac2<M: TorusMap>(map: &M, x: &[f64]) -> [[f64; 2]; 2] {
    let j = map.jacobian_at(x);
    [[j.get(0, 0), j.get(0, 1)], [j.get(1, 0), j.get(1, 1)]]
}

/// The slope `u₂/u₁`; undefined near vertical lines.
pub fn slope_of(dir: &Direction2) -> Result<f64> {
    let [u1, u2] = dir.u;
    if u1.abs() <= 1e-12 {
        return Err(Error::VerticalDirection(u1, u2));
    }
    Ok(u2 / u1)
}

/// Expanding and contracting eigenlines of a hyperbolic 2×2 matrix.
pub fn eigen_directions(m: &nalgebra::DMatrix<f64>) -> (Direction2, Direction2) {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let tr = a + d;
    let det = a * d - b * c;
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let big = if tr >= 0.0 { (tr + disc) / 2.0 } else { (tr - disc) / 2.0 };
    let small = det / big;
    let line = |lambda: f64| {
        // two candidate kernel vectors of M - λI; keep the better conditioned one
        let v1 = (b, lambda - a);
        let v2 = (lambda - d, c);
        let v = if v1.0.hypot(v1.1) >= v2.0.hypot(v2.1) { v1 } else { v2 };
        Direction2::new(v.0, v.1).expect("hyperbolic matrix has real eigenvectors")
    };
    (line(big), line(small))
}

/// Iteration policy for the splitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplittingConfig {
    pub depth: usize,
    pub certificate_extra: usize,
    pub tolerance: f64,
}

impl Default for SplittingConfig {
    fn default() -> Self {
        Self {
            depth: 60,
            certificate_extra: 10,
            tolerance: 1e-11,
        }
    }
}

fn require_dim2<M: TorusMap>(map: &M) -> Result<()> {
    if map.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: map.dim() });
    }
    Ok(())
}

/// The seed used when none is given, nudged off the contracting eigenline.
fn resolve_seed<M: TorusMap>(map: &M, seed: Option<Direction2>) -> Direction2 {
    let (unstable, stable) = eigen_directions(map.linear_part());
    let seed = seed.unwrap_or(unstable);
    if seed.angle_to(&stable) < 1e-12 {
        seed.rotated(1e-3)
    } else {
        seed
    }
}

/// Backward orbit `[x, φ⁻¹x, …, φ⁻ⁿx]` as raw coordinates.
fn backward_orbit<M: TorusMap>(map: &M, x: &TorusPoint, n: usize) -> Vec<TorusPoint> {
    let mut pts = Vec::with_capacity(n + 1);
    pts.push(x.clone());
    for k in 0..n {
        let next = map.apply_inverse(&pts[k]);
        pts.push(next);
    }
    pts
}

/// Push `seed` from `orbit[n]` down to `orbit[0]`.
fn push_along<M: TorusMap>(map: &M, orbit: &[TorusPoint], n: usize, seed: Direction2) -> Result<Direction2> {
    let mut v = seed;
    for p in orbit[1..=n].iter().rev() {
        v = push2(&jac2(map, p.coords()), &v)?;
    }
    Ok(v)
}

/// `dφⁿ(φ⁻ⁿx)·seed`, normalized one step at a time so the product never
/// overflows. Converges to `E_u(x)` for generic seeds.
pub fn unstable_direction<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    n: usize,
    seed: Option<Direction2>,
) -> Result<Direction2> {
    require_dim2(map)?;
    if n == 0 {
        return Err(Error::InvalidArgument("iteration depth must be >= 1".into()));
    }
    let seed = resolve_seed(map, seed);
    let orbit = backward_orbit(map, x, n);
    push_along(map, &orbit, n, seed)
}

/// `E_s(x)`, computed as the unstable direction of `φ⁻¹`.
pub fn stable_direction<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    n: usize,
    seed: Option<Direction2>,
) -> Result<Direction2> {
    unstable_direction(&Inverse(map), x, n, seed)
}

/// A splitting direction together with its convergence certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifiedDirection {
    pub direction: Direction2,
    /// Angle between the depth-`n` and depth-`n + extra` results.
    pub achieved: f64,
    pub certified: bool,
}

impl CertifiedDirection {
    pub fn require(self, required: f64) -> Result<Direction2> {
        if self.certified {
            Ok(self.direction)
        } else {
            Err(Error::NonConvergentSplitting { achieved: self.achieved, required })
        }
    }
}

pub fn certified_unstable<M: TorusMap>(map: &M, x: &TorusPoint, cfg: &SplittingConfig) -> Result<CertifiedDirection> {
    require_dim2(map)?;
    if cfg.depth == 0 {
        return Err(Error::InvalidArgument("iteration depth must be >= 1".into()));
    }
    let seed = resolve_seed(map, None);
    let far = cfg.depth + cfg.certificate_extra;
    let orbit = backward_orbit(map, x, far);
    let direction = push_along(map, &orbit, cfg.depth, seed)?;
    let reference = push_along(map, &orbit, far, seed)?;
    let achieved = direction.angle_to(&reference);
    Ok(CertifiedDirection {
        direction,
        achieved,
        certified: achieved < cfg.tolerance,
    })
}

pub fn certified_stable<M: TorusMap>(map: &M, x: &TorusPoint, cfg: &SplittingConfig) -> Result<CertifiedDirection> {
    certified_unstable(&Inverse(map), x, cfg)
}

/// `E_u(x)` at the configured depth; fails if the certificate fails.
pub fn unstable_at<M: TorusMap>(map: &M, x: &TorusPoint, cfg: &SplittingConfig) -> Result<Direction2> {
    certified_unstable(map, x, cfg)?.require(cfg.tolerance)
}

pub fn stable_at<M: TorusMap>(map: &M, x: &TorusPoint, cfg: &SplittingConfig) -> Result<Direction2> {
    certified_stable(map, x, cfg)?.require(cfg.tolerance)
}

/// Angle between `dφ(x)·v(x)` and `v(φx)`.
pub fn invariance_defect<M, F>(map: &M, x: &TorusPoint, field_at: F) -> Result<f64>
where
    M: TorusMap,
    F: Fn(&TorusPoint) -> Result<Direction2>,
{
    require_dim2(map)?;
    let pushed = pushforward(&map.jacobian(x), &field_at(x)?)?;
    let there = field_at(&map.apply(x))?;
    Ok(pushed.angle_to(&there))
}

/// A line field sampled on the `N×N` grid with node `(i, j)` at `(i/N, j/N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeField {
    resolution: usize,
    values: Vec<Direction2>,
}

impl SlopeField {
    pub fn from_values(resolution: usize, values: Vec<Direction2>) -> Result<Self> {
        if resolution == 0 || values.len() != resolution * resolution {
            return Err(Error::InvalidArgument(format!(
                "{} values do not fill a {resolution}x{resolution} grid",
                values.len()
            )));
        }
        Ok(Self { resolution, values })
    }

    pub fn constant(resolution: usize, dir: Direction2) -> Self {
        Self {
            resolution,
            values: vec![dir; resolution * resolution],
        }
    }

    /// Evaluate `f` at every node, in parallel.
    pub fn from_fn<F>(resolution: usize, f: F) -> Result<Self>
    where
        F: Fn(&TorusPoint) -> Result<Direction2> + Sync,
    {
        let values = (0..resolution * resolution)
            .into_par_iter()
            .map(|k| f(&node_point(resolution, k / resolution, k % resolution)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(resolution, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[Direction2] {
        &self.values
    }

    pub fn node(&self, i: usize, j: usize) -> TorusPoint {
        node_point(self.resolution, i, j)
    }

    pub fn value(&self, i: usize, j: usize) -> Direction2 {
        self.values[i * self.resolution + j]
    }

    /// Value at the grid node nearest to `p`.
    pub fn nearest(&self, p: &TorusPoint) -> Direction2 {
        let n = self.resolution;
        let idx = |c: f64| ((c * n as f64).round() as usize) % n;
        let c = p.coords();
        self.values[idx(c[0]) * n + idx(c[1])]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["i", "j", "u1", "u2"])?;
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                let [u1, u2] = self.value(i, j).u;
                out.write_record(&[i.to_string(), j.to_string(), u1.to_string(), u2.to_string()])?;
            }
        }
        out.flush().map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            rows.push(rec?);
        }
        let n = (rows.len() as f64).sqrt().round() as usize;
        if n * n != rows.len() {
            return Err(Error::Serialization(format!("{} rows do not form a square grid", rows.len())));
        }
        let mut values = vec![Direction2::horizontal(); n * n];
        let mut seen = vec![false; n * n];
        for (i, j, u1, u2) in rows {
            if i >= n || j >= n || seen[i * n + j] {
                return Err(Error::Serialization(format!("bad or repeated node ({i}, {j})")));
            }
            seen[i * n + j] = true;
            // keep stored unit vectors bit-for-bit; renormalizing would perturb the last digit
            values[i * n + j] = if (u1.hypot(u2) - 1.0).abs() < 1e-12 {
                Direction2::canonical(u1, u2)
            } else {
                Direction2::new(u1, u2)?
            };
        }
        Self::from_values(n, values)
    }
}

fn node_point(resolution: usize, i: usize, j: usize) -> TorusPoint {
    TorusPoint::xy(i as f64 / resolution as f64, j as f64 / resolution as f64)
}

/// The computed `E_u` sampled on a grid.
pub fn unstable_field<M: TorusMap>(map: &M, resolution: usize, cfg: &SplittingConfig) -> Result<SlopeField> {
    SlopeField::from_fn(resolution, |p| unstable_at(map, p, cfg))
}

pub fn stable_field<M: TorusMap>(map: &M, resolution: usize, cfg: &SplittingConfig) -> Result<SlopeField> {
    SlopeField::from_fn(resolution, |p| stable_at(map, p, cfg))
}

/// `(𝒯ₙv)(y) = dφⁿ(p)·v(p)` with `p = φ⁻ⁿ(y)` and `v(p)` read at the nearest node.
pub fn transform_at<M: TorusMap>(map: &M, field: &SlopeField, y: &TorusPoint, n: usize) -> Result<Direction2> {
    require_dim2(map)?;
    if n == 0 {
        return Err(Error::InvalidArgument("transform depth must be >= 1".into()));
    }
    let orbit = backward_orbit(map, y, n);
    push_along(map, &orbit, n, field.nearest(&orbit[n]))
}

/// `𝒯ₙ` applied at every grid node.
pub fn transform_field<M: TorusMap>(map: &M, field: &SlopeField, n: usize) -> Result<SlopeField> {
    SlopeField::from_fn(field.resolution, |p| transform_at(map, field, p, n))
}

/// Largest nodewise angle between two fields on the same grid.
pub fn field_distance(a: &SlopeField, b: &SlopeField) -> Result<f64> {
    if a.resolution != b.resolution {
        return Err(Error::ResolutionMismatch(a.resolution, b.resolution));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(p, q)| p.angle_to(q))
        .fold(0.0, f64::max))
}

/// Finite-horizon estimates of the hyperbolicity constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityEstimate {
    pub kappa_hat: f64,
    pub lambda_hat: f64,
    pub big_c_hat: f64,
    pub distortion_l_hat: f64,
    pub alpha_max: f64,
    pub horizon_n: usize,
}

/// `min(2, 2 ln λ / ln κ)`; exactly 2 when the rates coincide to rounding.
pub fn alpha_max(kappa: f64, lambda: f64) -> f64 {
    let (lk, ll) = (kappa.ln(), lambda.ln());
    if (ll - lk).abs() <= 1e-12 * lk.abs() {
        return 2.0;
    }
    (2.0 * ll / lk).min(2.0)
}

struct SampleRates {
    /// one-step contraction of `E_s` along the forward orbit, `f_k = ‖dφ(y_k)e_s(y_k)‖`
    stable_steps: Vec<f64>,
    /// one-step contraction of `E_u` under `φ⁻¹` along the backward orbit from `x`
    unstable_steps: Vec<f64>,
}

fn sample_rates<M: TorusMap>(map: &M, x: &TorusPoint, n: usize, cfg: &SplittingConfig) -> Result<SampleRates> {
    let mut forward = Vec::with_capacity(n + 1);
    forward.push(x.clone());
    for k in 0..n {
        let next = map.apply(&forward[k]);
        forward.push(next);
    }
    // Walk E_s back from the far end: backward iteration is attracted to E_s.
    let mut w = stable_at(map, &forward[n], cfg)?;
    let mut stable_steps = vec![0.0; n];
    for k in (0..n).rev() {
        let m = jac2(&Inverse(map), forward[k + 1].coords());
        let [a, b] = w.u;
        let (v1, v2) = (m[0][0] * a + m[0][1] * b, m[1][0] * a + m[1][1] * b);
        stable_steps[k] = 1.0 / v1.hypot(v2);
        w = Direction2::new(v1, v2)?;
    }

    let backward = backward_orbit(map, x, n);
    let mut w = unstable_at(map, &backward[n], cfg)?;
    let mut unstable_steps = vec![0.0; n];
    for k in (1..=n).rev() {
        let m = jac2(map, backward[k].coords());
        let [a, b] = w.u;
        let (v1, v2) = (m[0][0] * a + m[0][1] * b, m[1][0] * a + m[1][1] * b);
        unstable_steps[k - 1] = 1.0 / v1.hypot(v2);
        w = Direction2::new(v1, v2)?;
    }
    Ok(SampleRates {
        stable_steps,
        unstable_steps,
    })
}

/// Worst-case finite-time contraction rates of `E_s` forward and `E_u`
/// backward over the sample set.
///
/// `λ̂` and `κ̂` are the largest and smallest `n`-step geometric-mean rates,
/// `Ĉ` the smallest constant with `Ĉ⁻¹κ̂ᵐ ≤ ‖·‖ ≤ Ĉλ̂ᵐ` for all `m ≤ n`, and
/// `L̂` the ratio of largest to smallest one-step stable contraction.
pub fn finite_time_rates<M: TorusMap>(
    map: &M,
    samples: &[TorusPoint],
    n: usize,
    cfg: &SplittingConfig,
) -> Result<HyperbolicityEstimate> {
    require_dim2(map)?;
    if n < 8 {
        return Err(Error::InvalidArgument(format!("horizon {n} < 8")));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no sample points".into()));
    }
    let rates = samples
        .par_iter()
        .map(|x| sample_rates(map, x, n, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut lambda = f64::NEG_INFINITY;
    let mut kappa = f64::INFINITY;
    for r in &rates {
        for steps in [&r.stable_steps, &r.unstable_steps] {
            let rate = (steps.iter().map(|f| f.ln()).sum::<f64>() / n as f64).exp();
            lambda = lambda.max(rate);
            kappa = kappa.min(rate);
        }
    }
    if !(kappa > 0.0) || kappa >= 1.0 || lambda >= 1.0 {
        return Err(Error::NotHyperbolic { kappa, lambda });
    }

    let mut big_c = 1.0f64;
    let mut f_max = f64::NEG_INFINITY;
    let mut f_min = f64::INFINITY;
    for r in &rates {
        for steps in [&r.stable_steps, &r.unstable_steps] {
            let mut log_norm = 0.0;
            for (m, f) in steps.iter().enumerate() {
                log_norm += f.ln();
                let m = (m + 1) as f64;
                big_c = big_c
                    .max((log_norm - m * lambda.ln()).exp())
                    .max((m * kappa.ln() - log_norm).exp());
            }
        }
        for &f in &r.stable_steps {
            f_max = f_max.max(f);
            f_min = f_min.min(f);
        }
    }

    Ok(HyperbolicityEstimate {
        kappa_hat: kappa,
        lambda_hat: lambda,
        big_c_hat: big_c,
        distortion_l_hat: (f_max / f_min).max(1.0),
        alpha_max: alpha_max(kappa, lambda),
        horizon_n: n,
    })
}

/// `finite_time_rates` on the default 256 Halton points with horizon 40.
pub fn default_rates<M: TorusMap>(map: &M, cfg: &SplittingConfig) -> Result<HyperbolicityEstimate> {
    finite_time_rates(map, &halton_points(256, 2), 40, cfg)
}

/// Off-diagonal growth of the cocycle along a stable leaf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaGrowth {
    pub gamma_n: f64,
    pub linear_bound_ratio: f64,
    /// The diagonal entry along `e_u`, for scale.
    pub a_n: f64,
}

/// `γₙ(y)` for `y` at arclength `t` on the stable leaf `leaf` through `x`.
///
/// The cocycle `dφⁿ(y)` is written with source frame `(e_u(x), e_s(y))` and
/// target frame `(e_u(φⁿx), e_s(φⁿy))`; the `e_s` column is then zero above
/// the diagonal by invariance and `γₙ` is the `e_s` component of the image
/// of `e_u(x)`.
pub fn gamma_growth_on<M: TorusMap>(
    map: &M,
    leaf: &Polyline,
    t: f64,
    n: usize,
    cfg: &SplittingConfig,
) -> Result<GammaGrowth> {
    require_dim2(map)?;
    let x = leaf.base();
    let y = leaf.point_at_arclength(t)?;
    let eu_x = unstable_at(map, &x, cfg)?;

    let mut xn = x.clone();
    let mut yn = y.clone();
    let [mut w1, mut w2] = eu_x.u;
    for _ in 0..n {
        let m = jac2(map, yn.coords());
        (w1, w2) = (m[0][0] * w1 + m[0][1] * w2, m[1][0] * w1 + m[1][1] * w2);
        xn = map.apply(&xn);
        yn = map.apply(&yn);
    }
    let [u1, u2] = unstable_at(map, &xn, cfg)?.u;
    let [s1, s2] = stable_at(map, &yn, cfg)?.u;
    let det = u1 * s2 - s1 * u2;
    let a_n = (w1 * s2 - s1 * w2) / det;
    let gamma_n = (u1 * w2 - w1 * u2) / det;
    Ok(GammaGrowth {
        gamma_n,
        linear_bound_ratio: if t == 0.0 { 0.0 } else { gamma_n.abs() / t.abs() },
        a_n,
    })
}

/// `gamma_growth_on` with a freshly grown stable leaf through `x`.
pub fn gamma_growth<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    t: f64,
    n: usize,
    cfg: &SplittingConfig,
) -> Result<GammaGrowth> {
    let half_length = (2.0 * t.abs()).clamp(0.02, 0.5);
    let req = ManifoldRequest::new(x.clone(), ManifoldKind::Stable, half_length, half_length / 200.0)?;
    let leaf = grow_manifold(map, &req, cfg)?;
    gamma_growth_on(map, &leaf, t, n, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{cat_map, perturbed_cat};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn golden() -> (f64, f64) {
        let r5 = 5f64.sqrt();
        ((r5 - 1.0) / 2.0, -(r5 + 1.0) / 2.0)
    }

    fn random_point(rng: &mut ChaCha8Rng) -> TorusPoint {
        TorusPoint::xy(rng.random(), rng.random())
    }

    #[test]
    fn direction_canonical_sign() {
        let a = Direction2::new(-1.0, -2.0).unwrap();
        let b = Direction2::new(1.0, 2.0).unwrap();
        assert_eq!(a, b);
        let v = Direction2::new(0.0, -3.0).unwrap();
        assert_eq!(v.components(), [0.0, 1.0]);
        assert_eq!(Direction2::new(-0.0, 1.0).unwrap().components()[0].to_bits(), 0);
        let n = Direction2::new(3.0, -4.0).unwrap().components();
        assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-15);
        assert!(Direction2::new(0.0, 0.0).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let j = Jacobian::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]));
        let d = pushforward(&j, &Direction2::from_slope(1.0)).unwrap();
        assert!((slope_of(&d).unwrap() - 0.25).abs() < 1e-15);

        let dir = Direction2::from_slope(0.3);
        assert!(pushforward(&Jacobian::identity(2), &dir).unwrap().angle_to(&dir) < 1e-16);

        let cat = Jacobian::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));
        let eu = Direction2::from_slope(golden().0);
        assert!(pushforward(&cat, &eu).unwrap().angle_to(&eu) < 1e-14);

        let singular = Jacobian::new(DMatrix::zeros(2, 2));
        assert!(matches!(pushforward(&singular, &eu), Err(Error::SingularJacobian(_))));
    }

    #[test]
    fn slope_chart() {
        assert_eq!(slope_of(&Direction2::horizontal()).unwrap(), 0.0);
        assert!((slope_of(&Direction2::new(1.0, 1.0).unwrap()).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(slope_of(&Direction2::vertical()), Err(Error::VerticalDirection(..))));
    }

    #[test]
    fn eigen_oracle_on_cat_map() {
        let (su, ss) = golden();
        let cat = cat_map();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random_point(&mut rng);
            let seed = Direction2::from_angle(rng.random_range(0.0..3.0));
            let eu = unstable_direction(&cat, &x, 60, Some(seed)).unwrap();
            let es = stable_direction(&cat, &x, 60, Some(seed)).unwrap();
            assert!((slope_of(&eu).unwrap() - su).abs() < 1e-10);
            assert!((slope_of(&es).unwrap() - ss).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_seed_is_invariant_for_linear_map() {
        let cat = cat_map();
        let eu = eigen_directions(cat.linear_part()).0;
        let got = unstable_direction(&cat, &TorusPoint::xy(0.2, 0.3), 5, Some(eu)).unwrap();
        assert!(got.angle_to(&eu) < 1e-15);
    }

    #[test]
    fn stable_seed_is_nudged() {
        let cat = cat_map();
        let es = eigen_directions(cat.linear_part()).1;
        let got = unstable_direction(&cat, &TorusPoint::xy(0.2, 0.3), 60, Some(es)).unwrap();
        assert!((slope_of(&got).unwrap() - golden().0).abs() < 1e-10);
    }

    #[test]
    fn depth_doubling_shrinks_error() {
        let spec = perturbed_cat(0.05);
        let x = TorusPoint::xy(0.31, 0.72);
        let reference = unstable_direction(&spec, &x, 120, None).unwrap();
        let seed = Some(Direction2::horizontal());
        let errs: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&n| unstable_direction(&spec, &x, n, seed).unwrap().angle_to(&reference))
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= 0.5 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn duality_is_bitwise() {
        let spec = perturbed_cat(0.05);
        let x = TorusPoint::xy(0.4, 0.1);
        let a = stable_direction(&spec, &x, 60, None).unwrap();
        let b = unstable_direction(&spec.inverse(), &x, 60, None).unwrap();
        assert_eq!(a.components()[0].to_bits(), b.components()[0].to_bits());
        assert_eq!(a.components()[1].to_bits(), b.components()[1].to_bits());
    }

    #[test]
    fn splitting_is_transverse() {
        let spec = perturbed_cat(0.05);
        let cfg = SplittingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = random_point(&mut rng);
            let eu = unstable_at(&spec, &x, &cfg).unwrap();
            let es = stable_at(&spec, &x, &cfg).unwrap();
            assert!(eu.angle_to(&es) > 1e-3);
        }
    }

    #[test]
    fn invariance_defect_examples() {
        let cat = cat_map();
        let eu = eigen_directions(cat.linear_part()).0;
        let x = TorusPoint::xy(0.6, 0.2);
        assert!(invariance_defect(&cat, &x, |_| Ok(eu)).unwrap() < 1e-14);

        let spec = perturbed_cat(0.05);
        let d = invariance_defect(&spec, &x, |p| unstable_direction(&spec, p, 60, None)).unwrap();
        assert!(d < 1e-8, "{d}");

        let h = Direction2::horizontal();
        let expected = Direction2::new(2.0, 1.0).unwrap().angle_to(&h);
        let got = invariance_defect(&cat, &x, |_| Ok(h)).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn transform_field_examples() {
        let cat = cat_map();
        let eu = eigen_directions(cat.linear_part()).0;
        let fixed = SlopeField::constant(16, eu);
        let t = transform_field(&cat, &fixed, 3).unwrap();
        assert!(field_distance(&t, &fixed).unwrap() < 1e-15);

        let flat = SlopeField::constant(16, Direction2::horizontal());
        let t = transform_field(&cat, &flat, 1).unwrap();
        let expected = Direction2::new(2.0, 1.0).unwrap();
        assert!(t.values().iter().all(|v| v.angle_to(&expected) < 1e-15));
    }

    #[test]
    fn transform_contracts_at_cat_rate() {
        let cat = cat_map();
        let eu = eigen_directions(cat.linear_part()).0;
        let target = SlopeField::constant(8, eu);
        let start = SlopeField::constant(8, eu.rotated(0.05));
        let d: Vec<f64> = (1..=4)
            .map(|n| field_distance(&transform_field(&cat, &start, n).unwrap(), &target).unwrap())
            .collect();
        let mu = (3.0 + 5f64.sqrt()) / 2.0;
        for w in d.windows(2) {
            assert!((w[1] / w[0] - mu.powi(-2)).abs() < 0.01, "{d:?}");
        }
    }

    #[test]
    fn field_distance_examples() {
        let a = SlopeField::constant(4, Direction2::horizontal());
        let b = SlopeField::constant(4, Direction2::from_slope(1.0));
        assert_eq!(field_distance(&a, &a).unwrap(), 0.0);
        assert!((field_distance(&a, &b).unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert_eq!(field_distance(&a, &b).unwrap(), field_distance(&b, &a).unwrap());
        let c = SlopeField::constant(5, Direction2::horizontal());
        assert!(matches!(field_distance(&a, &c), Err(Error::ResolutionMismatch(4, 5))));
    }

    #[test]
    fn slope_field_csv_round_trip() {
        let spec = perturbed_cat(0.05);
        let f = unstable_field(&spec, 6, &SplittingConfig::default()).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,u1,u2\n"));
        assert_eq!(text.lines().count(), 37);
        let back = SlopeField::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn cat_map_rates() {
        let est = default_rates(&cat_map(), &SplittingConfig::default()).unwrap();
        let k = (3.0 - 5f64.sqrt()) / 2.0;
        assert!((est.kappa_hat - k).abs() < 1e-9);
        assert!((est.lambda_hat - k).abs() < 1e-9);
        assert_eq!(est.alpha_max, 2.0);
        assert!(est.big_c_hat >= 1.0 && est.big_c_hat < 1.0 + 1e-9);
        assert!(est.distortion_l_hat >= 1.0 && est.distortion_l_hat < 1.0 + 1e-9);
        let json = serde_json::to_value(&est).unwrap();
        for key in ["kappa_hat", "lambda_hat", "big_c_hat", "distortion_l_hat", "alpha_max", "horizon_n"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn perturbed_rates_are_hyperbolic() {
        let spec = perturbed_cat(0.05);
        let est = finite_time_rates(&spec, &halton_points(64, 2), 20, &SplittingConfig::default()).unwrap();
        assert!(0.0 < est.kappa_hat && est.kappa_hat <= est.lambda_hat && est.lambda_hat < 1.0);
        assert!(est.alpha_max > 1.0 && est.alpha_max <= 2.0);
        assert!(est.lambda_hat.powf(2.0 / est.alpha_max) <= est.kappa_hat * (1.0 + 1e-12));
        assert!(est.distortion_l_hat > 1.0);
    }

    #[test]
    fn rates_reject_short_horizon_and_wrong_dimension() {
        let pts = halton_points(4, 2);
        assert!(finite_time_rates(&cat_map(), &pts, 7, &SplittingConfig::default()).is_err());
        let four = crate::presets::cat4();
        assert!(matches!(
            unstable_direction(&four, &TorusPoint::origin(4), 10, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn alpha_max_examples() {
        assert_eq!(alpha_max(0.3, 0.3), 2.0);
        assert!((alpha_max(0.25, 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(alpha_max(0.5, 0.25), 2.0);
    }

    #[test]
    fn gamma_vanishes_at_base_and_for_linear_maps() {
        let cfg = SplittingConfig::default();
        let spec = perturbed_cat(0.05);
        let x = TorusPoint::xy(0.3, 0.6);
        let g = gamma_growth(&spec, &x, 0.0, 8, &cfg).unwrap();
        assert!(g.gamma_n.abs() < 1e-10, "{g:?}");
        assert_eq!(g.linear_bound_ratio, 0.0);

        let cat = cat_map();
        for t in [0.05, -0.02, 0.001] {
            let g = gamma_growth(&cat, &x, t, 8, &cfg).unwrap();
            assert!(g.gamma_n.abs() <= 1e-12 * g.a_n.abs(), "{g:?}");
        }
    }

    #[test]
    fn gamma_is_linear_in_offset() {
        let cfg = SplittingConfig::default();
        let spec = perturbed_cat(0.05);
        let x = TorusPoint::xy(0.3, 0.6);
        let ratios: Vec<f64> = [0.02, 0.01, 0.005]
            .iter()
            .map(|&t| gamma_growth(&spec, &x, t, 6, &cfg).unwrap().linear_bound_ratio)
            .collect();
        for r in &ratios[1..] {
            assert!((r / ratios[0] - 1.0).abs() < 0.2, "{ratios:?}");
        }
    }

    fn near_field(base: &SlopeField, delta: f64, seed: u64) -> SlopeField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = base.values().iter().map(|v| v.rotated(rng.random_range(-delta..delta))).collect();
        SlopeField::from_values(base.resolution(), values).unwrap()
    }

    #[test]
    fn transform_distance_decreases_for_random_fields() {
        let spec = perturbed_cat(0.05);
        let cfg = SplittingConfig::default();
        let eu = unstable_field(&spec, 24, &cfg).unwrap();
        for trial in 0..20 {
            let f = near_field(&eu, 0.3, trial);
            let d: Vec<f64> = (1..=8)
                .map(|n| field_distance(&transform_field(&spec, &f, n).unwrap(), &eu).unwrap())
                .collect();
            for w in d[3..].windows(2) {
                assert!(w[1] < w[0], "trial {trial}: {d:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn prop_chart_matches_angle(a in -1.0f64..1.0, da in -0.1f64..0.1) {
            let p = Direction2::from_angle(a);
            let q = Direction2::from_angle(a + da);
            prop_assume!(p.components()[0].abs() > 1e-6 && q.components()[0].abs() > 1e-6 && da.abs() > 1e-9);
            let slope_gap = (slope_of(&p).unwrap() - slope_of(&q).unwrap()).abs();
            let ratio = slope_gap / p.angle_to(&q);
            prop_assert!((0.5..=2.0 / (a.cos().powi(2) * 0.5)).contains(&ratio), "{ratio}");
        }

        #[test]
        fn prop_angle_is_symmetric(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let p = Direction2::from_angle(a);
            let q = Direction2::from_angle(b);
            prop_assert_eq!(p.angle_to(&q), q.angle_to(&p));
            prop_assert!(p.angle_to(&q) <= std::f64::consts::FRAC_PI_2);
        }

        #[test]
        fn prop_alpha_bound(k in 0.05f64..0.95, r in 0.0f64..1.0) {
            let l = k + r * (0.99 - k);
            let a = alpha_max(k, l);
            prop_assert!(a > 0.0 && a <= 2.0);
            prop_assert!(l.powf(2.0 / a) <= k * (1.0 + 1e-12));
        }
    }
}
