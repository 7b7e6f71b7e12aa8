//! Torus points, the admissible family of maps, and their differentials.
//!
//! A [`MapSpec`] is `A ∘ h_k ∘ … ∘ h_1` where `A` is a hyperbolic integer
//! matrix with `|det A| = 1` and every `h_i` is a shear adding
//! `ε·s(x[source])` to `x[target]`. Shears and `A` are volume preserving and
//! invert in closed form, so the whole family is exactly invertible.

use std::f64::consts::TAU;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entry-magnitude cap for cocycle products.
pub const DEFAULT_ENTRY_CAP: f64 = 1e12;

/// Eigenvalues closer than this to the unit circle are rejected.
const SPECTRAL_GAP_TOL: f64 = 1e-9;

/// Reduce a real number into `[0, 1)`.
#[inline]
pub fn wrap_unit(v: f64) -> f64 {
    let w = v - v.floor();
    // `v - floor(v)` rounds up to 1.0 for tiny negative v.
    if w >= 1.0 {
        0.0
    } else {
        w + 0.0
    }
}

/// Representative of `a` in `[-1/2, 1/2]` modulo 1.
#[inline]
pub fn wrap_diff(a: f64) -> f64 {
    a - a.round()
}

/// A point of `T^d = R^d / Z^d`, stored in the fundamental domain `[0,1)^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self {
            coords: coords.into_iter().map(wrap_unit).collect(),
        }
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            coords: vec![0.0; dim],
        }
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Self::new(vec![x, y])
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Wrap-aware Euclidean distance, at most `sqrt(d)/2`.
    pub fn distance(&self, other: &TorusPoint) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| wrap_diff(a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Square integer matrix with `|det| = 1` and no eigenvalue on the unit circle.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeMatrix {
    dim: usize,
    entries: Vec<i64>,
    inverse: Vec<i64>,
    determinant: i64,
    unstable_dim: usize,
}

impl LatticeMatrix {
    pub fn new(rows: Vec<Vec<i64>>) -> Result<Self> {
        let dim = rows.len();
        if dim < 2 {
            return Err(Error::InvalidLattice(format!("dimension {dim} < 2")));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidLattice("matrix is not square".into()));
        }
        let entries: Vec<i64> = rows.into_iter().flatten().collect();
        let wide: Vec<i128> = entries.iter().map(|&v| v as i128).collect();
        let det = det_bareiss(&wide, dim);
        if det.abs() != 1 {
            return Err(Error::InvalidLattice(format!(
                "|det| = {} (torus automorphisms need |det| = 1)",
                det.abs()
            )));
        }
        let inverse = integer_inverse(&wide, dim, det)?;
        let as_f64 = DMatrix::from_row_iterator(dim, dim, entries.iter().map(|&v| v as f64));
        let unstable_dim = check_spectrum(&as_f64)?;
        Ok(Self {
            dim,
            entries,
            inverse,
            determinant: det as i64,
            unstable_dim,
        })
    }

    /// The cat map `(2 1; 1 1)`.
    pub fn cat() -> Self {
        Self::new(vec![vec![2, 1], vec![1, 1]]).expect("cat map is hyperbolic")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> i64 {
        self.entries[i * self.dim + j]
    }

    pub fn determinant(&self) -> i64 {
        self.determinant
    }

    /// Number of eigenvalues outside the unit circle.
    pub fn unstable_dim(&self) -> usize {
        self.unstable_dim
    }

    pub fn rows(&self) -> Vec<Vec<i64>> {
        self.entries.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn inverse_rows(&self) -> Vec<Vec<i64>> {
        self.inverse.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.dim, self.dim, self.entries.iter().map(|&v| v as f64))
    }

    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.dim, self.dim, self.inverse.iter().map(|&v| v as f64))
    }
}

fn det_bareiss(m: &[i128], n: usize) -> i128 {
    if n == 0 {
        return 1;
    }
    let mut a = m.to_vec();
    let mut sign = 1;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k * n + k] == 0 {
            let Some(p) = (k + 1..n).find(|&i| a[i * n + k] != 0) else {
                return 0;
            };
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i * n + j] = (a[i * n + j] * a[k * n + k] - a[i * n + k] * a[k * n + j]) / prev;
            }
        }
        prev = a[k * n + k];
    }
    sign * a[n * n - 1]
}

fn integer_inverse(m: &[i128], n: usize, det: i128) -> Result<Vec<i64>> {
    let mut inv = vec![0i64; n * n];
    let mut minor = Vec::with_capacity((n - 1) * (n - 1));
    for i in 0..n {
        for j in 0..n {
            minor.clear();
            for r in (0..n).filter(|&r| r != i) {
                for c in (0..n).filter(|&c| c != j) {
                    minor.push(m[r * n + c]);
                }
            }
            let cofactor = if (i + j) % 2 == 0 { 1 } else { -1 } * det_bareiss(&minor, n - 1);
            // inverse = adj / det and det = ±1
            let v = cofactor * det;
            inv[j * n + i] = i64::try_from(v)
                .map_err(|_| Error::InvalidLattice("inverse entry overflows i64".into()))?;
        }
    }
    Ok(inv)
}

/// Rejects eigenvalues on the unit circle and defective (Jordan) spectra.
/// Returns the number of eigenvalues outside the unit circle.
fn check_spectrum(a: &DMatrix<f64>) -> Result<usize> {
    let eig: Vec<Complex<f64>> = a.complex_eigenvalues().iter().copied().collect();
    if let Some(z) = eig.iter().find(|z| (z.norm() - 1.0).abs() < SPECTRAL_GAP_TOL) {
        return Err(Error::InvalidLattice(format!(
            "eigenvalue {z} lies on the unit circle (not hyperbolic)"
        )));
    }
    let scale = a.norm().max(1.0);
    let cluster_tol = 1e-6 * scale;
    let mut used = vec![false; eig.len()];
    for i in 0..eig.len() {
        if used[i] {
            continue;
        }
        let members: Vec<usize> = (i..eig.len())
            .filter(|&j| !used[j] && (eig[j] - eig[i]).norm() < cluster_tol)
            .collect();
        for &j in &members {
            used[j] = true;
        }
        if members.len() < 2 {
            continue;
        }
        let mean = members.iter().map(|&j| eig[j]).sum::<Complex<f64>>() / members.len() as f64;
        let n = a.nrows();
        let shifted = DMatrix::from_fn(n, n, |r, c| {
            let v = Complex::new(a[(r, c)], 0.0);
            if r == c {
                v - mean
            } else {
                v
            }
        });
        let sv = shifted.svd(false, false).singular_values;
        let rank = sv.iter().filter(|&&s| s > 1e-5 * scale).count();
        if n - rank < members.len() {
            return Err(Error::InvalidLattice(format!(
                "defective eigenvalue {mean} (algebraic multiplicity {}, geometric {})",
                members.len(),
                n - rank
            )));
        }
    }
    Ok(eig.iter().filter(|z| z.norm() > 1.0).count())
}

/// One term `sin·sin(2π f x) + cos·cos(2π f x)` of a shear profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub freq: u32,
    pub sin: f64,
    pub cos: f64,
}

impl Harmonic {
    pub fn sine(freq: u32, coeff: f64) -> Self {
        Self {
            freq,
            sin: coeff,
            cos: 0.0,
        }
    }
}

/// Shear `x[target] += amplitude · s(x[source])` with a 1-periodic
/// trigonometric polynomial `s` vanishing at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShearDoc", into = "ShearDoc")]
pub struct ShearTerm {
    source: usize,
    target: usize,
    amplitude: f64,
    profile: Vec<Harmonic>,
}

#[derive(Serialize, Deserialize)]
struct ShearDoc {
    source: usize,
    target: usize,
    amplitude: f64,
    profile: Vec<Harmonic>,
}

impl TryFrom<ShearDoc> for ShearTerm {
    type Error = Error;
    fn try_from(d: ShearDoc) -> Result<Self> {
        ShearTerm::new(d.source, d.target, d.amplitude, d.profile)
    }
}

impl From<ShearTerm> for ShearDoc {
    fn from(s: ShearTerm) -> Self {
        ShearDoc {
            source: s.source,
            target: s.target,
            amplitude: s.amplitude,
            profile: s.profile,
        }
    }
}

impl ShearTerm {
    pub fn new(source: usize, target: usize, amplitude: f64, profile: Vec<Harmonic>) -> Result<Self> {
        if source == target {
            return Err(Error::InvalidShear(format!("source axis == target axis ({source})")));
        }
        if !amplitude.is_finite() {
            return Err(Error::InvalidShear("non-finite amplitude".into()));
        }
        if let Some(h) = profile.iter().find(|h| h.freq == 0) {
            return Err(Error::InvalidShear(format!("frequency must be positive: {h:?}")));
        }
        if profile.iter().any(|h| !h.sin.is_finite() || !h.cos.is_finite()) {
            return Err(Error::InvalidShear("non-finite profile coefficient".into()));
        }
        let at_zero: f64 = profile.iter().map(|h| h.cos).sum();
        let scale: f64 = 1.0 + profile.iter().map(|h| h.cos.abs()).sum::<f64>();
        if at_zero.abs() > 1e-12 * scale {
            return Err(Error::InvalidShear(format!(
                "profile must vanish at 0 (s(0) = {at_zero})"
            )));
        }
        Ok(Self {
            source,
            target,
            amplitude,
            profile,
        })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn profile(&self) -> &[Harmonic] {
        &self.profile
    }

    /// `s(x)`.
    pub fn profile_value(&self, x: f64) -> f64 {
        self.profile
            .iter()
            .map(|h| {
                let (s, c) = (TAU * h.freq as f64 * x).sin_cos();
                h.sin * s + h.cos * c
            })
            .sum()
    }

    /// `s'(x)`.
    pub fn profile_slope(&self, x: f64) -> f64 {
        self.profile
            .iter()
            .map(|h| {
                let w = TAU * h.freq as f64;
                let (s, c) = (w * x).sin_cos();
                w * (h.sin * c - h.cos * s)
            })
            .sum()
    }

    #[inline]
    fn push(&self, y: &mut [f64]) {
        y[self.target] += self.amplitude * self.profile_value(y[self.source]);
    }

    #[inline]
    fn pull(&self, y: &mut [f64]) {
        y[self.target] -= self.amplitude * self.profile_value(y[self.source]);
    }
}

/// Differential of a torus map at a point (or a product of them).
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian(DMatrix<f64>);

impl Jacobian {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn volume_defect(&self) -> f64 {
        (self.determinant() - 1.0).abs()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.0.amax()
    }
}

impl std::ops::Mul for &Jacobian {
    type Output = Jacobian;
    fn mul(self, rhs: &Jacobian) -> Jacobian {
        Jacobian(&self.0 * &rhs.0)
    }
}

/// A smooth invertible map of `T^d` given on the universal cover.
///
/// `lift_forward` and `lift_backward` act on `R^d` without wrapping and
/// commute with integer translations up to the linear part, so continuous
/// curves stay continuous under them.
pub trait TorusMap: Sync {
    fn dim(&self) -> usize;
    fn lift_forward(&self, x: &[f64]) -> Vec<f64>;
    fn lift_backward(&self, x: &[f64]) -> Vec<f64>;
    /// `dφ(x)`.
    fn jacobian_at(&self, x: &[f64]) -> Jacobian;
    /// `d(φ⁻¹)(x)`.
    fn inverse_jacobian_at(&self, x: &[f64]) -> Jacobian;
    fn linear_part(&self) -> &DMatrix<f64>;
    fn linear_part_inverse(&self) -> &DMatrix<f64>;
    /// True when the map has no nonlinear terms.
    fn is_linear(&self) -> bool;

    fn apply(&self, x: &TorusPoint) -> TorusPoint {
        TorusPoint::new(self.lift_forward(x.coords()))
    }

    fn apply_inverse(&self, x: &TorusPoint) -> TorusPoint {
        TorusPoint::new(self.lift_backward(x.coords()))
    }

    fn jacobian(&self, x: &TorusPoint) -> Jacobian {
        self.jacobian_at(x.coords())
    }
}

impl<M: TorusMap + ?Sized> TorusMap for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn lift_forward(&self, x: &[f64]) -> Vec<f64> {
        (**self).lift_forward(x)
    }
    fn lift_backward(&self, x: &[f64]) -> Vec<f64> {
        (**self).lift_backward(x)
    }
    fn jacobian_at(&self, x: &[f64]) -> Jacobian {
        (**self).jacobian_at(x)
    }
    fn inverse_jacobian_at(&self, x: &[f64]) -> Jacobian {
        (**self).inverse_jacobian_at(x)
    }
    fn linear_part(&self) -> &DMatrix<f64> {
        (**self).linear_part()
    }
    fn linear_part_inverse(&self) -> &DMatrix<f64> {
        (**self).linear_part_inverse()
    }
    fn is_linear(&self) -> bool {
        (**self).is_linear()
    }
}

/// The inverse of a torus map, with forward and backward roles exchanged.
#[derive(Debug, Clone, Copy)]
pub struct Inverse<M>(pub M);

impl<M: TorusMap> TorusMap for Inverse<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn lift_forward(&self, x: &[f64]) -> Vec<f64> {
        self.0.lift_backward(x)
    }
    fn lift_backward(&self, x: &[f64]) -> Vec<f64> {
        self.0.lift_forward(x)
    }
    fn jacobian_at(&self, x: &[f64]) -> Jacobian {
        self.0.inverse_jacobian_at(x)
    }
    fn inverse_jacobian_at(&self, x: &[f64]) -> Jacobian {
        self.0.jacobian_at(x)
    }
    fn linear_part(&self) -> &DMatrix<f64> {
        self.0.linear_part_inverse()
    }
    fn linear_part_inverse(&self) -> &DMatrix<f64> {
        self.0.linear_part()
    }
    fn is_linear(&self) -> bool {
        self.0.is_linear()
    }
}

/// `φ = A ∘ h_k ∘ … ∘ h_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    linear: LatticeMatrix,
    shears: Vec<ShearTerm>,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
}

impl MapSpec {
    pub fn new(linear: LatticeMatrix, shears: Vec<ShearTerm>) -> Result<Self> {
        let d = linear.dim();
        for s in &shears {
            if s.source >= d || s.target >= d {
                return Err(Error::InvalidShear(format!(
                    "axes ({}, {}) out of range for dimension {d}",
                    s.source, s.target
                )));
            }
        }
        let a = linear.to_matrix();
        let a_inv = linear.inverse_matrix();
        Ok(Self {
            linear,
            shears,
            a,
            a_inv,
        })
    }

    pub fn linear_only(linear: LatticeMatrix) -> Self {
        Self::new(linear, Vec::new()).expect("no shears to validate")
    }

    pub fn cat() -> Self {
        Self::linear_only(LatticeMatrix::cat())
    }

    pub fn linear(&self) -> &LatticeMatrix {
        &self.linear
    }

    pub fn shears(&self) -> &[ShearTerm] {
        &self.shears
    }

    pub fn inverse(&self) -> Inverse<&MapSpec> {
        Inverse(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MapSpec serializes")
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .map(|i| (0..n).map(|j| m[(i, j)] * x[j]).sum())
        .collect()
}

impl TorusMap for MapSpec {
    fn dim(&self) -> usize {
        self.linear.dim()
    }

    fn lift_forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.shears {
            s.push(&mut y);
        }
        mat_vec(&self.a, &y)
    }

    fn lift_backward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = mat_vec(&self.a_inv, x);
        for s in self.shears.iter().rev() {
            s.pull(&mut y);
        }
        y
    }

    fn jacobian_at(&self, x: &[f64]) -> Jacobian {
        let d = self.dim();
        let mut y = x.to_vec();
        let mut j = DMatrix::<f64>::identity(d, d);
        for s in &self.shears {
            // (I + c·E_{target,source}) · J adds c·row(source) to row(target)
            let c = s.amplitude * s.profile_slope(y[s.source]);
            for col in 0..d {
                let v = j[(s.source, col)];
                j[(s.target, col)] += c * v;
            }
            s.push(&mut y);
        }
        Jacobian(&self.a * j)
    }

    fn inverse_jacobian_at(&self, x: &[f64]) -> Jacobian {
        let d = self.dim();
        let mut y = mat_vec(&self.a_inv, x);
        let mut j = self.a_inv.clone();
        for s in self.shears.iter().rev() {
            let c = s.amplitude * s.profile_slope(y[s.source]);
            for col in 0..d {
                let v = j[(s.source, col)];
                j[(s.target, col)] -= c * v;
            }
            s.pull(&mut y);
        }
        Jacobian(j)
    }

    fn linear_part(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn linear_part_inverse(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    fn is_linear(&self) -> bool {
        self.shears.iter().all(|s| s.amplitude == 0.0 || s.profile.is_empty())
    }
}

#[derive(Serialize, Deserialize)]
struct MapSpecDoc {
    linear: Vec<Vec<i64>>,
    #[serde(default)]
    shears: Vec<ShearTerm>,
}

impl Serialize for MapSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MapSpecDoc {
            linear: self.linear.rows(),
            shears: self.shears.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MapSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = MapSpecDoc::deserialize(deserializer)?;
        let linear = LatticeMatrix::new(doc.linear).map_err(serde::de::Error::custom)?;
        MapSpec::new(linear, doc.shears).map_err(serde::de::Error::custom)
    }
}

pub fn apply_map<M: TorusMap>(map: &M, x: &TorusPoint) -> TorusPoint {
    map.apply(x)
}

pub fn apply_inverse<M: TorusMap>(map: &M, x: &TorusPoint) -> TorusPoint {
    map.apply_inverse(x)
}

pub fn jacobian<M: TorusMap>(map: &M, x: &TorusPoint) -> Jacobian {
    map.jacobian(x)
}

pub fn volume_defect<M: TorusMap>(map: &M, x: &TorusPoint) -> f64 {
    map.jacobian(x).volume_defect()
}

/// `dφⁿ(x)` with the default entry cap.
pub fn cocycle<M: TorusMap>(map: &M, x: &TorusPoint, n: i64) -> Result<Jacobian> {
    cocycle_capped(map, x, n, DEFAULT_ENTRY_CAP)
}

/// `dφⁿ(x)` as the left-multiplied product of one-step differentials along
/// the orbit; negative `n` walks the backward orbit with inverse
/// differentials.
pub fn cocycle_capped<M: TorusMap>(map: &M, x: &TorusPoint, n: i64, cap: f64) -> Result<Jacobian> {
    if n < 0 {
        forward_cocycle(&Inverse(map), x, n.unsigned_abs() as usize, cap)
    } else {
        forward_cocycle(map, x, n as usize, cap)
    }
}

fn forward_cocycle<M: TorusMap>(map: &M, x: &TorusPoint, n: usize, cap: f64) -> Result<Jacobian> {
    let mut acc = Jacobian::identity(map.dim());
    let mut y = x.coords().to_vec();
    for step in 0..n {
        let j = map.jacobian_at(&y);
        acc = &j * &acc;
        let magnitude = acc.max_abs_entry();
        if !(magnitude <= cap) {
            return Err(Error::CocycleOverflow {
                steps: step + 1,
                magnitude,
                cap,
            });
        }
        y = map.lift_forward(&y).into_iter().map(wrap_unit).collect();
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeDirection {
    Forward,
    Backward,
}

/// `[x, φ^{±1}x, …, φ^{±n}x]`.
pub fn orbit<M: TorusMap>(map: &M, x: &TorusPoint, n: usize, direction: TimeDirection) -> Vec<TorusPoint> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(x.clone());
    for _ in 0..n {
        let last = out.last().expect("orbit is non-empty");
        let next = match direction {
            TimeDirection::Forward => map.apply(last),
            TimeDirection::Backward => map.apply_inverse(last),
        };
        out.push(next);
    }
    out
}
