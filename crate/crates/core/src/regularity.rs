//! Regularity of `E_u` along stable transversals: Hölder fits, the
//! second-difference differentiability test, Hölder continuity of the
//! derivative, and cone-field nesting under `𝒯ₙ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifolds::{grow_manifold, ManifoldKind, ManifoldRequest, Polyline};
use crate::sampling::geometric_ladder;
use crate::splitting2::{stable_at, transform_at, unstable_at, unstable_field, Direction2, SlopeField, SplittingConfig};
use crate::torus::{TorusMap, TorusPoint};

/// Deviations at or below this are treated as zero.
pub const DEFAULT_FLOOR: f64 = 1e-12;
const MIN_FIT_SAMPLES: usize = 6;
/// Relative slack on the measured cone constant. Round-1 fields are still
/// converging at about the 1e-9 level after `N` steps.
pub const K_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderSample {
    pub t: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub exponent: f64,
    pub constant: f64,
    pub fit_range: (f64, f64),
    pub r_squared: f64,
    pub n_samples: usize,
}

struct LineFit {
    slope: f64,
    intercept: f64,
    r_squared: f64,
    max_residual: f64,
}

fn ols(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut max_residual = 0.0f64;
    for (a, b) in x.iter().zip(y) {
        let r = b - (intercept + slope * a);
        ss_res += r * r;
        max_residual = max_residual.max(r.abs());
    }
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    LineFit {
        slope,
        intercept,
        r_squared,
        max_residual,
    }
}

/// Least-squares fit of `log deviation = log K + β log|t|`.
///
/// Samples with `t = 0` or `deviation <= floor` are discarded. The fit uses
/// the widest contiguous window in `|t|` (at least six samples) whose largest
/// residual is within 10% of the window's log-deviation range, falling back
/// to all admissible samples.
pub fn fit_holder(samples: &[HolderSample], floor: f64) -> Result<HolderReport> {
    let mut pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.t != 0.0 && s.deviation > floor && s.deviation.is_finite())
        .map(|s| (s.t.abs().ln(), s.deviation.ln()))
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::Degenerate { admissible: pts.len() });
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if pts[0].0 == pts[pts.len() - 1].0 {
        return Err(Error::InvalidArgument("all samples share one |t|; no exponent to fit".into()));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();

    let accepts = |lo: usize, hi: usize| -> Option<LineFit> {
        let (x, y) = (&xs[lo..hi], &ys[lo..hi]);
        if x[0] == x[x.len() - 1] {
            return None;
        }
        let fit = ols(x, y);
        let range = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - y.iter().cloned().fold(f64::INFINITY, f64::min);
        (fit.max_residual <= 0.1 * range + 1e-12).then_some(fit)
    };

    let n = pts.len();
    let mut chosen: Option<(usize, usize, LineFit)> = None;
    for width in (MIN_FIT_SAMPLES..=n).rev() {
        let mut best_span = f64::NEG_INFINITY;
        for lo in 0..=n - width {
            let hi = lo + width;
            let span = xs[hi - 1] - xs[lo];
            if span <= best_span {
                continue;
            }
            if let Some(fit) = accepts(lo, hi) {
                best_span = span;
                chosen = Some((lo, hi, fit));
            }
        }
        if chosen.is_some() {
            break;
        }
    }
    let (lo, hi, fit) = chosen.unwrap_or_else(|| (0, n, ols(&xs, &ys)));
    Ok(HolderReport {
        exponent: fit.slope,
        constant: fit.intercept.exp(),
        fit_range: (xs[lo].exp(), xs[hi - 1].exp()),
        r_squared: fit.r_squared,
        n_samples: hi - lo,
    })
}

/// `|h₂f(x+h₁) + h₁f(x−h₂) − (h₁+h₂)f(x)| / (h₁h₂)`.
pub fn second_difference(f_plus: f64, f_base: f64, f_minus: f64, h1: f64, h2: f64) -> f64 {
    (h2 * f_plus + h1 * f_minus - (h1 + h2) * f_base).abs() / (h1 * h2)
}

/// `(f(t+h) − f(t−h)) / 2h`.
pub fn central_derivative<F: Fn(f64) -> f64>(f: F, t: f64, h: f64) -> f64 {
    (f(t + h) - f(t - h)) / (2.0 * h)
}

/// A stable leaf through `x` long enough for arclengths up to `reach`, with
/// node spacing fine enough for the smallest scale of interest.
pub fn stable_leaf<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    reach: f64,
    finest: f64,
    cfg: &SplittingConfig,
) -> Result<Polyline> {
    let half_length = (reach * 1.05).min(0.5);
    if reach > half_length {
        return Err(Error::InvalidArgument(format!("scale {reach} exceeds the local leaf length 0.5")));
    }
    let step = (finest / 8.0).max(1e-6).min(half_length / 4.0);
    let req = ManifoldRequest::new(x.clone(), ManifoldKind::Stable, half_length, step)?;
    grow_manifold(map, &req, cfg)
}

fn check_scales(scales: &[f64]) -> Result<(f64, f64)> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no scales given".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {s} is not a nonnegative number")));
    }
    let max = scales.iter().cloned().fold(0.0, f64::max);
    let min_pos = scales.iter().cloned().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    Ok((max, min_pos))
}

/// Angle between `E_u` at arclength `±t` along `W_s(x)` and `E_u(x)`.
pub fn stable_transversal_samples<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    scales: &[f64],
    cfg: &SplittingConfig,
) -> Result<Vec<HolderSample>> {
    let (max, min_pos) = check_scales(scales)?;
    let leaf = stable_leaf(map, x, max.max(1e-3), min_pos.min(max.max(1e-3)), cfg)?;
    samples_on_leaf(map, &leaf, scales, cfg)
}

/// As [`stable_transversal_samples`] on an already grown leaf.
pub fn samples_on_leaf<M: TorusMap>(
    map: &M,
    leaf: &Polyline,
    scales: &[f64],
    cfg: &SplittingConfig,
) -> Result<Vec<HolderSample>> {
    let reference = unstable_at(map, &leaf.base(), cfg)?;
    let ts: Vec<f64> = scales
        .iter()
        .flat_map(|&s| if s == 0.0 { vec![0.0] } else { vec![s, -s] })
        .collect();
    ts.par_iter()
        .map(|&t| {
            let y = leaf.point_at_arclength(t)?;
            let deviation = unstable_at(map, &y, cfg)?.angle_to(&reference);
            Ok(HolderSample { t, deviation })
        })
        .collect()
}

/// Signed slope of `dir` in the frame `(e_u, e_s)`.
fn frame_slope(dir: &Direction2, eu: &Direction2, es: &Direction2) -> f64 {
    let [u1, u2] = eu.components();
    let [s1, s2] = es.components();
    let [v1, v2] = dir.components();
    let det = u1 * s2 - s1 * u2;
    let a = (v1 * s2 - s1 * v2) / det;
    let b = (u1 * v2 - v1 * u2) / det;
    b / a
}

/// The straightened slope function along the stable leaf through `x`:
/// `f(t)` is the slope of `E_u(y(t))` in the frame `(e_u(x), e_s(x))`,
/// so `f(0) = 0`.
pub struct StraightenedSlope<'a, M> {
    map: &'a M,
    leaf: Polyline,
    eu: Direction2,
    es: Direction2,
    cfg: SplittingConfig,
}

impl<'a, M: TorusMap> StraightenedSlope<'a, M> {
    pub fn new(map: &'a M, x: &TorusPoint, reach: f64, finest: f64, cfg: &SplittingConfig) -> Result<Self> {
        let leaf = stable_leaf(map, x, reach, finest, cfg)?;
        Ok(Self {
            map,
            eu: unstable_at(map, x, cfg)?,
            es: stable_at(map, x, cfg)?,
            leaf,
            cfg: *cfg,
        })
    }

    pub fn leaf(&self) -> &Polyline {
        &self.leaf
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        let y = self.leaf.point_at_arclength(t)?;
        let v = unstable_at(self.map, &y, &self.cfg)?;
        Ok(frame_slope(&v, &self.eu, &self.es))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffStatus {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "affine at this precision")]
    AffineAtPrecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub scales: Vec<(f64, f64)>,
    pub quotients: Vec<f64>,
    pub fitted_rate: Option<f64>,
    pub status: DiffStatus,
}

/// Second-difference quotients of an arbitrary function at 0, sorted by
/// decreasing `h₁ + h₂`.
pub fn differentiability_from_fn<F>(f: F, ladder: &[(f64, f64)]) -> Result<DiffReport>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if ladder.is_empty() {
        return Err(Error::InvalidArgument("empty ladder".into()));
    }
    if let Some(p) = ladder.iter().find(|(a, b)| !(*a > 0.0 && *b > 0.0)) {
        return Err(Error::InvalidArgument(format!("scales must be positive, got {p:?}")));
    }
    let mut scales = ladder.to_vec();
    scales.sort_by(|a, b| (b.0 + b.1).total_cmp(&(a.0 + a.1)));
    scales.dedup();
    let f0 = f(0.0)?;
    let quotients = scales
        .par_iter()
        .map(|&(h1, h2)| Ok(second_difference(f(h1)?, f0, f(-h2)?, h1, h2)))
        .collect::<Result<Vec<f64>>>()?;

    let (xs, ys): (Vec<f64>, Vec<f64>) = scales
        .iter()
        .zip(&quotients)
        .filter(|(_, q)| **q > DEFAULT_FLOOR)
        .map(|((h1, h2), q)| ((h1 + h2).ln(), q.ln()))
        .unzip();
    let distinct = xs.first() != xs.last();
    let fitted_rate = (xs.len() >= 3 && distinct).then(|| ols(&xs, &ys).slope);
    let status = if quotients.iter().all(|q| *q < DEFAULT_FLOOR) {
        DiffStatus::AffineAtPrecision
    } else {
        DiffStatus::Ok
    };
    Ok(DiffReport {
        scales,
        quotients,
        fitted_rate,
        status,
    })
}

/// Second-difference test of the straightened slope of `E_u` along `W_s(x)`.
pub fn differentiability_profile<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    ladder: &[(f64, f64)],
    cfg: &SplittingConfig,
) -> Result<DiffReport> {
    let flat: Vec<f64> = ladder.iter().flat_map(|&(a, b)| [a, b]).collect();
    let (max, min_pos) = check_scales(&flat)?;
    let slope = StraightenedSlope::new(map, x, max, min_pos, cfg)?;
    differentiability_from_fn(|t| slope.at(t), ladder)
}

/// `(1, 1/r, 1/r², …)`-scaled symmetric ladder `(h, h)` from `largest`.
pub fn symmetric_ladder(largest: f64, count: usize) -> Vec<(f64, f64)> {
    geometric_ladder(largest, std::f64::consts::FRAC_1_SQRT_2, count)
        .into_iter()
        .map(|h| (h, h))
        .collect()
}

/// Hölder fit of `|f′(t) − f′(0)|` with `f′` by central differences.
pub fn derivative_holder_from_fn<F>(f: F, scales: &[f64], fd_step: f64, floor: f64) -> Result<HolderReport>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {fd_step} must be positive")));
    }
    if let Some(s) = scales.iter().find(|s| **s < 10.0 * fd_step) {
        return Err(Error::InvalidArgument(format!("scale {s} is below 10 x fd_step ({fd_step})")));
    }
    let derivative = |t: f64| -> Result<f64> { Ok((f(t + fd_step)? - f(t - fd_step)?) / (2.0 * fd_step)) };
    let d0 = derivative(0.0)?;
    let samples = scales
        .par_iter()
        .flat_map(|&s| [s, -s])
        .map(|t| Ok(HolderSample { t, deviation: (derivative(t)? - d0).abs() }))
        .collect::<Result<Vec<_>>>()?;
    fit_holder(&samples, floor)
}

/// Hölder continuity of the derivative of the straightened slope at `x`.
pub fn derivative_holder_profile<M: TorusMap>(
    map: &M,
    x: &TorusPoint,
    scales: &[f64],
    fd_step: f64,
    cfg: &SplittingConfig,
) -> Result<HolderReport> {
    let (max, _) = check_scales(scales)?;
    let slope = StraightenedSlope::new(map, x, max + 2.0 * fd_step, fd_step, cfg)?;
    derivative_holder_from_fn(|t| slope.at(t), scales, fd_step, DEFAULT_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub delta: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub constant_k: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl ConeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delta > 0.0
            && 0.0 < self.eps0
            && self.eps0 < self.eps1
            && self.alpha > 0.0
            && self.alpha <= 2.0
            && self.eps > 0.0
            && self.eps < self.alpha
            && self.constant_k >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent cone parameters {self:?}")))
        }
    }

    pub fn bound(&self, t: f64, k: f64) -> f64 {
        k * t.abs().powf(self.alpha - self.eps)
    }
}

impl Default for ConeParams {
    fn default() -> Self {
        Self {
            delta: 0.2,
            eps0: 0.01,
            eps1: 0.1,
            constant_k: 1.0,
            alpha: 1.0,
            eps: 0.1,
        }
    }
}

/// Every sample with `ε₀ ≤ |t| ≤ ε₁` has deviation at most `K|t|^{α−ε}`.
pub fn cone_membership(samples: &[HolderSample], params: &ConeParams) -> bool {
    membership_with(samples, params, params.eps0, params.constant_k)
}

fn membership_with(samples: &[HolderSample], params: &ConeParams, eps0: f64, k: f64) -> bool {
    samples
        .iter()
        .filter(|s| eps0 <= s.t.abs() && s.t.abs() <= params.eps1)
        .all(|s| s.deviation <= params.bound(s.t, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialField {
    /// `E_u` rotated nodewise by independent uniform angles in `[−δ, δ]`.
    Random,
    /// `E_u` itself.
    Unstable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeOptions {
    pub base: TorusPoint,
    pub resolution: usize,
    pub seed: u64,
    pub field: TrialField,
}

impl Default for ConeOptions {
    fn default() -> Self {
        Self {
            base: TorusPoint::origin(2),
            resolution: 128,
            seed: 0,
            field: TrialField::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeRound {
    pub round: usize,
    pub n: usize,
    pub eps0: f64,
    pub passed_measured_k: usize,
    pub passed_given_k: usize,
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub params: ConeParams,
    pub big_n: usize,
    pub trials: usize,
    pub stable_factor: f64,
    pub measured_k: f64,
    pub rounds: Vec<ConeRound>,
    pub failures_measured_k: usize,
    pub failures_given_k: usize,
}

/// Random `δ`-perturbations of `base`, one stream per trial.
pub fn perturbed_field(base: &SlopeField, delta: f64, seed: u64, trial: u64) -> SlopeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial + 1);
    let values = base
        .values()
        .iter()
        .map(|v| v.rotated(rng.random_range(-delta..=delta)))
        .collect();
    SlopeField::from_values(base.resolution(), values).expect("same grid")
}

/// Apply `𝒯_{r·N}` to δ-perturbed fields for rounds `r = 1..rounds` and test
/// cone membership along `W_s(base)` with `ε₀` shrunk by the one-step
/// stable contraction factor at the base each round.
///
/// `K` is measured as the largest ratio `deviation / |t|^{α−ε}` seen in
/// round 1 over all trials (with relative slack [`K_SLACK`]); later rounds are
/// checked against it and against `params.constant_k`.
pub fn cone_nesting_check<M: TorusMap>(
    map: &M,
    params: &ConeParams,
    big_n: usize,
    rounds: usize,
    trials: usize,
    opts: &ConeOptions,
    cfg: &SplittingConfig,
) -> Result<ConeReport> {
    params.validate()?;
    if big_n == 0 || rounds == 0 {
        return Err(Error::InvalidArgument("big_n and rounds must be >= 1".into()));
    }
    let x = &opts.base;
    let es = stable_at(map, x, cfg)?.components();
    let j = map.jacobian(x);
    let c = (j.get(0, 0) * es[0] + j.get(0, 1) * es[1]).hypot(j.get(1, 0) * es[0] + j.get(1, 1) * es[1]);

    let smallest = params.eps0 * c.powi(rounds as i32);
    let count = ((params.eps1 / smallest).ln() / std::f64::consts::SQRT_2.ln()).ceil() as usize + 1;
    let ladder = geometric_ladder(params.eps1, std::f64::consts::FRAC_1_SQRT_2, count);
    let leaf = stable_leaf(map, x, params.eps1, *ladder.last().unwrap(), cfg)?;
    let points: Vec<(f64, TorusPoint)> = ladder
        .iter()
        .flat_map(|&s| [s, -s])
        .map(|t| Ok((t, leaf.point_at_arclength(t)?)))
        .collect::<Result<_>>()?;
    let reference = unstable_at(map, x, cfg)?;
    let eu = unstable_field(map, opts.resolution, cfg)?;

    // deviations[trial][round] = samples
    let deviations = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let field = match opts.field {
                TrialField::Random => perturbed_field(&eu, params.delta, opts.seed, trial),
                TrialField::Unstable => eu.clone(),
            };
            (1..=rounds)
                .map(|r| {
                    points
                        .iter()
                        .map(|(t, y)| {
                            let v = transform_at(map, &field, y, r * big_n)?;
                            Ok(HolderSample { t: *t, deviation: v.angle_to(&reference) })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let eps0_at = |r: usize| params.eps0 * c.powi(r as i32);
    let ratio = |samples: &[HolderSample], eps0: f64| {
        samples
            .iter()
            .filter(|s| eps0 <= s.t.abs() && s.t.abs() <= params.eps1)
            .map(|s| s.deviation / params.bound(s.t, 1.0))
            .fold(0.0, f64::max)
    };
    let measured_k = deviations
        .iter()
        .map(|per_round| ratio(&per_round[0], eps0_at(1)))
        .fold(0.0, f64::max)
        * (1.0 + K_SLACK);

    let mut report_rounds = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let eps0 = eps0_at(r);
        let mut passed_measured_k = 0;
        let mut passed_given_k = 0;
        let mut worst_ratio = 0.0f64;
        for per_round in &deviations {
            let s = &per_round[r - 1];
            passed_measured_k += membership_with(s, params, eps0, measured_k) as usize;
            passed_given_k += membership_with(s, params, eps0, params.constant_k) as usize;
            worst_ratio = worst_ratio.max(ratio(s, eps0));
        }
        report_rounds.push(ConeRound {
            round: r,
            n: r * big_n,
            eps0,
            passed_measured_k,
            passed_given_k,
            worst_ratio,
        });
    }
    Ok(ConeReport {
        params: *params,
        big_n,
        trials,
        stable_factor: c,
        measured_k,
        failures_measured_k: report_rounds.iter().map(|r| trials - r.passed_measured_k).sum(),
        failures_given_k: report_rounds.iter().map(|r| trials - r.passed_given_k).sum(),
        rounds: report_rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{cat_map, perturbed_cat};
    use crate::sampling::default_ladder;
    use rand_distr::{Distribution, Normal};

    fn power_law(k: f64, beta: f64, ts: &[f64]) -> Vec<HolderSample> {
        ts.iter()
            .flat_map(|&t| [t, -t])
            .map(|t| HolderSample { t, deviation: k * t.abs().powf(beta) })
            .collect()
    }

    #[test]
    fn fit_recovers_planted_power_law() {
        let ts = geometric_ladder(1e-1, 0.5, 12);
        let r = fit_holder(&power_law(0.3, 0.7, &ts), DEFAULT_FLOOR).unwrap();
        assert!((r.exponent - 0.7).abs() < 1e-10);
        assert!((r.constant - 0.3).abs() < 1e-10);
        assert!((r.r_squared - 1.0).abs() < 1e-10);
        assert_eq!(r.n_samples, 24);
        assert!(r.fit_range.0 < r.fit_range.1);

        let lip = fit_holder(&power_law(2.0, 1.0, &ts), DEFAULT_FLOOR).unwrap();
        assert!((lip.exponent - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fit_tolerates_noise() {
        let ts = default_ladder(1e-1, 3.0);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for beta in [0.3, 0.7, 1.0, 1.5] {
            let noisy: Vec<HolderSample> = power_law(0.5, beta, &ts)
                .into_iter()
                .map(|s| HolderSample { deviation: s.deviation * (1.0 + normal.sample(&mut rng)), ..s })
                .collect();
            let r = fit_holder(&noisy, DEFAULT_FLOOR).unwrap();
            assert!((r.exponent - beta).abs() < 0.05, "{beta}: {r:?}");
        }
    }

    #[test]
    fn fit_degenerate_on_zero_deviations() {
        let zeros: Vec<HolderSample> = (1..20).map(|k| HolderSample { t: k as f64 * 1e-3, deviation: 0.0 }).collect();
        assert!(matches!(fit_holder(&zeros, DEFAULT_FLOOR), Err(Error::Degenerate { admissible: 0 })));
    }

    #[test]
    fn fit_window_drops_a_noise_floor_plateau() {
        let mut samples = power_law(1.0, 1.0, &geometric_ladder(1e-1, 0.5, 10));
        // below the floor the curve flattens at 1e-9
        samples.extend((0..8).map(|k| HolderSample { t: 1e-6 * 0.5f64.powi(k), deviation: 1e-9 }));
        let r = fit_holder(&samples, DEFAULT_FLOOR).unwrap();
        assert!((r.exponent - 1.0).abs() < 1e-6, "{r:?}");
        assert!(r.fit_range.0 > 1e-5);
    }

    #[test]
    fn second_difference_identities() {
        for (h1, h2) in [(0.1, 0.3), (1e-3, 1e-3), (0.5, 0.25)] {
            let affine = |x: f64| 3.0 - 2.0 * x;
            assert!(second_difference(affine(h1), affine(0.0), affine(-h2), h1, h2) < 1e-12);
            assert_eq!(second_difference(h1 * h1, 0.0, h2 * h2, h1, h2), h1 + h2);
        }
        let (h, f) = (0.1, |x: f64| x.exp());
        let symmetric = (f(h) + f(-h) - 2.0 * f(0.0)).abs() / (h * h) * h;
        assert!((second_difference(f(h), f(0.0), f(-h), h, h) - symmetric).abs() < 1e-14);
    }

    #[test]
    fn linear_map_samples_are_flat() {
        let cfg = SplittingConfig::default();
        let x = TorusPoint::xy(0.3, 0.3);
        let samples = stable_transversal_samples(&cat_map(), &x, &[0.0, 1e-3, 1e-2, 0.1], &cfg).unwrap();
        assert_eq!(samples.len(), 7);
        assert!(samples.iter().all(|s| s.deviation < 1e-12));
        assert!(matches!(fit_holder(&samples, DEFAULT_FLOOR), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn perturbed_deviations_shrink_with_scale() {
        let cfg = SplittingConfig::default();
        let x = TorusPoint::xy(0.3, 0.3);
        let scales = default_ladder(0.1, 3.0);
        let samples = stable_transversal_samples(&perturbed_cat(0.05), &x, &scales, &cfg).unwrap();
        let big: f64 = samples[..6].iter().map(|s| s.deviation).sum();
        let small: f64 = samples[samples.len() - 6..].iter().map(|s| s.deviation).sum();
        assert!(small < 0.1 * big);
        let r = fit_holder(&samples, DEFAULT_FLOOR).unwrap();
        assert!(r.exponent > 0.5 && r.exponent.is_finite(), "{r:?}");
    }

    #[test]
    fn deeper_splitting_changes_samples_below_certificate() {
        let x = TorusPoint::xy(0.7, 0.2);
        let shallow = SplittingConfig::default();
        let deep = SplittingConfig { depth: 120, ..shallow };
        let scales = [1e-3, 1e-2, 5e-2];
        let spec = perturbed_cat(0.05);
        let a = stable_transversal_samples(&spec, &x, &scales, &shallow).unwrap();
        let b = stable_transversal_samples(&spec, &x, &scales, &deep).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.deviation - q.deviation).abs() < shallow.tolerance);
        }
    }

    #[test]
    fn straightened_slope_vanishes_at_base() {
        let cfg = SplittingConfig::default();
        for spec in [cat_map(), perturbed_cat(0.05)] {
            for x in [TorusPoint::origin(2), TorusPoint::xy(0.4, 0.9)] {
                let f = StraightenedSlope::new(&spec, &x, 0.01, 1e-3, &cfg).unwrap();
                assert!(f.at(0.0).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_map_is_affine_at_precision() {
        let cfg = SplittingConfig::default();
        let r = differentiability_profile(&cat_map(), &TorusPoint::xy(0.2, 0.5), &symmetric_ladder(0.05, 10), &cfg)
            .unwrap();
        assert_eq!(r.status, DiffStatus::AffineAtPrecision);
        assert!(r.quotients.iter().all(|q| *q < 1e-12));
        assert_eq!(r.fitted_rate, None);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"affine at this precision\""));
    }

    #[test]
    fn quadratic_self_test_has_rate_one() {
        let r = differentiability_from_fn(|t| Ok(t * t), &symmetric_ladder(0.1, 12)).unwrap();
        assert_eq!(r.status, DiffStatus::Ok);
        assert!((r.fitted_rate.unwrap() - 1.0).abs() < 1e-9);
        assert!(r.scales.windows(2).all(|w| w[0].0 + w[0].1 > w[1].0 + w[1].1));
    }

    #[test]
    fn perturbed_quotients_decay() {
        let cfg = SplittingConfig::default();
        let r = differentiability_profile(
            &perturbed_cat(0.05),
            &TorusPoint::xy(0.3, 0.6),
            &symmetric_ladder(0.05, 12),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.status, DiffStatus::Ok);
        let peak = r.quotients.iter().cloned().fold(0.0, f64::max);
        assert!(*r.quotients.last().unwrap() < 0.5 * peak, "{:?}", r.quotients);
        assert!(r.fitted_rate.unwrap().is_finite());
    }

    #[test]
    fn synthetic_derivative_holder() {
        let (c, a, beta) = (0.7, 0.4, 0.6);
        let theta = |t: f64| Ok(c * t + a * t.signum() * t.abs().powf(1.0 + beta));
        let scales = geometric_ladder(1e-1, std::f64::consts::FRAC_1_SQRT_2, 14);
        let r = derivative_holder_from_fn(theta, &scales, 1e-4, DEFAULT_FLOOR).unwrap();
        assert!((r.exponent - beta).abs() < 0.05, "{r:?}");
        assert!(derivative_holder_from_fn(theta, &[1e-4], 1e-4, DEFAULT_FLOOR).is_err());
    }

    #[test]
    fn central_difference_is_second_order() {
        let f = |t: f64| (3.0 * t).sin() + t * t * t;
        let exact = 3.0 * (3.0 * 0.2f64).cos() + 3.0 * 0.04;
        let errs: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&h| (central_derivative(f, 0.2, h) - exact).abs()).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..=5.0).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn derivative_profile_linear_map_is_degenerate() {
        let cfg = SplittingConfig::default();
        let r = derivative_holder_profile(&cat_map(), &TorusPoint::xy(0.1, 0.1), &[1e-3, 1e-2, 3e-2], 1e-5, &cfg);
        assert!(matches!(r, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn derivative_profile_perturbed_has_positive_exponent() {
        let cfg = SplittingConfig::default();
        let scales = geometric_ladder(0.05, std::f64::consts::FRAC_1_SQRT_2, 12);
        let r = derivative_holder_profile(&perturbed_cat(0.05), &TorusPoint::xy(0.3, 0.6), &scales, 1e-4, &cfg).unwrap();
        assert!(r.exponent > 0.0, "{r:?}");
    }

    #[test]
    fn cone_membership_examples() {
        let p = ConeParams::default();
        let none = [HolderSample { t: 1.0, deviation: 10.0 }];
        assert!(cone_membership(&none, &p));
        let zeros: Vec<HolderSample> = (1..10).map(|k| HolderSample { t: k as f64 * 0.01, deviation: 0.0 }).collect();
        assert!(cone_membership(&zeros, &ConeParams { constant_k: 1e-9, ..p }));
        let t = 0.05;
        let bad = [HolderSample { t, deviation: 2.0 * p.bound(t, p.constant_k) }];
        assert!(!cone_membership(&bad, &p));
    }

    #[test]
    fn cone_params_validation() {
        assert!(ConeParams::default().validate().is_ok());
        assert!(ConeParams { eps0: 0.2, ..Default::default() }.validate().is_err());
        assert!(ConeParams { eps: 1.5, ..Default::default() }.validate().is_err());
        assert!(ConeParams { alpha: 2.5, eps: 0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn cone_nesting_on_fixed_and_linear_fields() {
        let cfg = SplittingConfig::default();
        let p = ConeParams::default();
        let opts = ConeOptions { resolution: 32, field: TrialField::Unstable, ..Default::default() };
        let r = cone_nesting_check(&perturbed_cat(0.05), &p, 4, 3, 2, &opts, &cfg).unwrap();
        assert_eq!(r.failures_measured_k, 0);

        let opts = ConeOptions { resolution: 32, ..Default::default() };
        let small_k = ConeParams { constant_k: 1e-3, delta: 0.3, ..p };
        let r = cone_nesting_check(&cat_map(), &small_k, 10, 3, 4, &opts, &cfg).unwrap();
        assert_eq!(r.failures_given_k, 0, "{r:?}");
        assert_eq!(r.failures_measured_k, 0);
    }

    #[test]
    fn perturbed_fields_are_reproducible() {
        let base = SlopeField::constant(8, Direction2::horizontal());
        let a = perturbed_field(&base, 0.2, 42, 3);
        assert_eq!(a, perturbed_field(&base, 0.2, 42, 3));
        assert_ne!(a, perturbed_field(&base, 0.2, 42, 4));
        assert!(a.values().iter().all(|v| v.angle_to(&Direction2::horizontal()) <= 0.2 + 1e-15));
    }
}
