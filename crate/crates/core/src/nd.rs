//! The splitting on `d`-dimensional tori via the graph transform
//! `T ↦ (C + DT)(A + BT)⁻¹`, with block-norm diagnostics along stable
//! transversals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splitting2::SplittingConfig;
use crate::torus::{wrap_diff, Inverse, TorusMap, TorusPoint};

/// Condition number of `A + BT` beyond which the candidate is no longer a graph.
pub const MAX_CHART_CONDITION: f64 = 1e12;
const POWER_ITERATIONS: usize = 64;
const POWER_SEED: u64 = 0x6e6f726d;
const SUBSPACE_ITERATIONS: usize = 4000;

/// A linear map `T: ℝ^{d_u} → ℝ^{d_s}` whose graph `{(u, Tu)}` is a
/// `d_u`-dimensional subspace in reference-frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMap {
    d_u: usize,
    d_s: usize,
    matrix: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphMapDoc {
    d_u: usize,
    d_s: usize,
    matrix: Vec<Vec<f64>>,
}

impl GraphMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("graph map has non-finite entries".into()));
        }
        Ok(Self {
            d_u: matrix.ncols(),
            d_s: matrix.nrows(),
            matrix,
        })
    }

    pub fn zero(d_u: usize, d_s: usize) -> Self {
        Self {
            d_u,
            d_s,
            matrix: DMatrix::zeros(d_s, d_u),
        }
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Columns of `(𝟙; T)`.
    pub fn basis(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d_u + self.d_s, self.d_u);
        m.view_mut((0, 0), (self.d_u, self.d_u)).fill_with_identity();
        m.view_mut((self.d_u, 0), (self.d_s, self.d_u)).copy_from(&self.matrix);
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph maps always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Serialize for GraphMap {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        GraphMapDoc {
            d_u: self.d_u,
            d_s: self.d_s,
            matrix: self.matrix.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GraphMap {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = GraphMapDoc::deserialize(deserializer)?;
        if doc.matrix.len() != doc.d_s || doc.matrix.iter().any(|r| r.len() != doc.d_u) {
            return Err(D::Error::custom(format!(
                "matrix must be {} rows of {} entries",
                doc.d_s, doc.d_u
            )));
        }
        let m = DMatrix::from_fn(doc.d_s, doc.d_u, |i, j| doc.matrix[i][j]);
        GraphMap::new(m).map_err(D::Error::custom)
    }
}

/// A Jacobian split into blocks `(A B; C D)` along `ℝ^{d_u} ⊕ ℝ^{d_s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl BlockJacobian {
    pub fn from_matrix(m: &DMatrix<f64>, d_u: usize) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n || d_u == 0 || d_u >= n {
            return Err(Error::InvalidArgument(format!(
                "cannot split a {}x{} matrix with d_u = {d_u}",
                m.nrows(),
                m.ncols()
            )));
        }
        let d_s = n - d_u;
        Ok(Self {
            a: m.view((0, 0), (d_u, d_u)).into_owned(),
            b: m.view((0, d_u), (d_u, d_s)).into_owned(),
            c: m.view((d_u, 0), (d_s, d_u)).into_owned(),
            d: m.view((d_u, d_u), (d_s, d_s)).into_owned(),
        })
    }

    pub fn d_u(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_s(&self) -> usize {
        self.d.nrows()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let (du, ds) = (self.d_u(), self.d_s());
        let mut m = DMatrix::zeros(du + ds, du + ds);
        m.view_mut((0, 0), (du, du)).copy_from(&self.a);
        m.view_mut((0, du), (du, ds)).copy_from(&self.b);
        m.view_mut((du, 0), (ds, du)).copy_from(&self.c);
        m.view_mut((du, du), (ds, ds)).copy_from(&self.d);
        m
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// `T′ = (C + DT)(A + BT)⁻¹`.
pub fn graph_transform(j: &BlockJacobian, t: &GraphMap) -> Result<GraphMap> {
    if j.d_u() != t.d_u || j.d_s() != t.d_s {
        return Err(Error::DimensionMismatch {
            expected: j.d_u() + j.d_s(),
            got: t.d_u + t.d_s,
        });
    }
    let top = &j.a + &j.b * &t.matrix;
    let bottom = &j.c + &j.d * &t.matrix;
    let condition = condition_number(&top);
    if !(condition <= MAX_CHART_CONDITION) {
        return Err(Error::GraphChartLeft { orbit_index: 0, condition });
    }
    // T′ᵀ solves (A + BT)ᵀ T′ᵀ = (C + DT)ᵀ
    let solved = top.transpose().lu().solve(&bottom.transpose()).ok_or(Error::GraphChartLeft {
        orbit_index: 0,
        condition: f64::INFINITY,
    })?;
    GraphMap::new(solved.transpose())
}

/// Orthonormal basis of the dominant `k`-dimensional invariant subspace of
/// `m` by QR subspace iteration from a fixed start.
fn dominant_subspace(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let start = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    let mut q = start.qr().q();
    for _ in 0..SUBSPACE_ITERATIONS {
        let next = (m * &q).qr().q();
        let moved = subspace_sine(&q, &next);
        q = next;
        if moved < 1e-15 {
            break;
        }
    }
    q
}

/// `‖(I − Q₁Q₁ᵀ)Q₂‖` for orthonormal bases.
fn subspace_sine(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    let resid = q2 - q1 * (q1.transpose() * q2);
    resid.singular_values().max()
}

fn unstable_count(m: &DMatrix<f64>) -> usize {
    m.complex_eigenvalues().iter().filter(|z| z.norm() > 1.0).count()
}

/// A basis `F = [U | S]` of `ℝ^d` adapted to a splitting, with `U` and `S`
/// each orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    d_u: usize,
    frame: DMatrix<f64>,
    frame_inv: DMatrix<f64>,
}

impl ReferenceFrame {
    /// The spectral splitting of the linear part of `map`. `d_u` must equal
    /// the number of eigenvalues outside the unit circle.
    pub fn spectral<M: TorusMap>(map: &M, d_u: usize) -> Result<Self> {
        let a = map.linear_part();
        let d = a.nrows();
        let found = unstable_count(a);
        if found != d_u {
            return Err(Error::InvalidArgument(format!(
                "d_u = {d_u} does not match the {found} expanding eigenvalues of the linear part"
            )));
        }
        if d_u == 0 || d_u == d {
            return Err(Error::InvalidArgument("both subspaces must be nontrivial".into()));
        }
        let u = dominant_subspace(a, d_u);
        let s = dominant_subspace(map.linear_part_inverse(), d - d_u);
        let mut frame = DMatrix::zeros(d, d);
        frame.view_mut((0, 0), (d, d_u)).copy_from(&u);
        frame.view_mut((0, d_u), (d, d - d_u)).copy_from(&s);
        Self::from_columns(frame, d_u)
    }

    /// Any invertible basis whose first `d_u` columns span the unstable side.
    pub fn from_columns(frame: DMatrix<f64>, d_u: usize) -> Result<Self> {
        if !frame.is_square() || d_u == 0 || d_u >= frame.nrows() {
            return Err(Error::InvalidArgument("frame must be square with 0 < d_u < d".into()));
        }
        let condition = condition_number(&frame);
        if !(condition <= MAX_CHART_CONDITION) {
            return Err(Error::InvalidArgument(format!("frame is singular (condition {condition:e})")));
        }
        let frame_inv = frame.clone().try_inverse().expect("well-conditioned frame inverts");
        Ok(Self { d_u, frame, frame_inv })
    }

    /// The coordinate frame with the first `d_u` axes on the unstable side.
    pub fn standard(d: usize, d_u: usize) -> Result<Self> {
        Self::from_columns(DMatrix::identity(d, d), d_u)
    }

    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    pub fn d_u(&self) -> usize {
        self.d_u
    }

    pub fn d_s(&self) -> usize {
        self.dim() - self.d_u
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.frame
    }

    /// `[S | U]`: the frame for the inverse map.
    pub fn swapped(&self) -> Self {
        let (d, du) = (self.dim(), self.d_u);
        let ds = d - du;
        let mut frame = DMatrix::zeros(d, d);
        frame.view_mut((0, 0), (d, ds)).copy_from(&self.frame.view((0, du), (d, ds)));
        frame.view_mut((0, ds), (d, du)).copy_from(&self.frame.view((0, 0), (d, du)));
        let mut frame_inv = DMatrix::zeros(d, d);
        frame_inv.view_mut((0, 0), (ds, d)).copy_from(&self.frame_inv.view((du, 0), (ds, d)));
        frame_inv.view_mut((ds, 0), (du, d)).copy_from(&self.frame_inv.view((0, 0), (du, d)));
        Self { d_u: ds, frame, frame_inv }
    }

    /// `F⁻¹JF` split into blocks.
    pub fn blocks(&self, j: &DMatrix<f64>) -> Result<BlockJacobian> {
        BlockJacobian::from_matrix(&(&self.frame_inv * j * &self.frame), self.d_u)
    }

    /// Ambient basis `F·(𝟙; T)` of the graph of `t`.
    pub fn embed(&self, t: &GraphMap) -> DMatrix<f64> {
        &self.frame * t.basis()
    }
}

fn orthonormal(basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis.clone().qr().q()
}

fn principal_angle(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    let sine = subspace_sine(q1, q2);
    let cosine = (q1.transpose() * q2).singular_values().min();
    sine.atan2(cosine)
}

/// Largest principal angle between the graphs of `p` and `q` in
/// graph coordinates.
pub fn subspace_angle(p: &GraphMap, q: &GraphMap) -> Result<f64> {
    if p.d_u != q.d_u || p.d_s != q.d_s {
        return Err(Error::DimensionMismatch {
            expected: p.d_u + p.d_s,
            got: q.d_u + q.d_s,
        });
    }
    Ok(principal_angle(&orthonormal(&p.basis()), &orthonormal(&q.basis())))
}

/// Largest principal angle between the graphs of `p` and `q` after mapping
/// both into ambient coordinates by `frame`.
pub fn ambient_angle(frame: &ReferenceFrame, p: &GraphMap, q: &GraphMap) -> Result<f64> {
    if p.d_u != q.d_u || p.d_s != q.d_s || p.d_u != frame.d_u || p.d_s != frame.d_s() {
        return Err(Error::DimensionMismatch {
            expected: frame.dim(),
            got: q.d_u + q.d_s,
        });
    }
    Ok(principal_angle(&orthonormal(&frame.embed(p)), &orthonormal(&frame.embed(q))))
}

/// Operator 2-norm by 64 power iterations on `MᵀM` from a fixed start.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    v /= v.norm();
    let mtm = m.transpose() * m;
    for _ in 0..POWER_ITERATIONS {
        let w = &mtm * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    (m * v).norm()
}

/// Graph of the unstable subspace at `x` after pushing `T = 0` forward
/// along `n` steps of the backward orbit.
pub fn unstable_graph_in<M: TorusMap>(map: &M, frame: &ReferenceFrame, x: &TorusPoint, n: usize) -> Result<GraphMap> {
    if map.dim() != frame.dim() || x.dim() != frame.dim() {
        return Err(Error::DimensionMismatch {
            expected: frame.dim(),
            got: map.dim().max(x.dim()),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("iteration depth must be >= 1".into()));
    }
    let mut orbit = Vec::with_capacity(n + 1);
    orbit.push(x.clone());
    for k in 0..n {
        let next = map.apply_inverse(&orbit[k]);
        orbit.push(next);
    }
    let mut t = GraphMap::zero(frame.d_u(), frame.d_s());
    for k in (1..=n).rev() {
        let j = frame.blocks(map.jacobian(&orbit[k]).matrix())?;
        t = graph_transform(&j, &t).map_err(|e| match e {
            Error::GraphChartLeft { condition, .. } => Error::GraphChartLeft { orbit_index: k, condition },
            other => other,
        })?;
    }
    Ok(t)
}

/// [`unstable_graph_in`] in the spectral frame of `map`.
pub fn unstable_graph<M: TorusMap>(map: &M, x: &TorusPoint, n: usize, d_u: usize) -> Result<GraphMap> {
    let frame = ReferenceFrame::spectral(map, d_u)?;
    unstable_graph_in(map, &frame, x, n)
}

/// Graph of the stable subspace at `x`, over the `S` columns of `frame`:
/// vectors `(Tw, w)` in `frame` coordinates.
pub fn stable_graph_in<M: TorusMap>(map: &M, frame: &ReferenceFrame, x: &TorusPoint, n: usize) -> Result<GraphMap> {
    unstable_graph_in(&Inverse(map), &frame.swapped(), x, n)
}

/// The unstable graph at the configured depth, certified against
/// `depth + certificate_extra`.
pub fn certified_unstable_graph<M: TorusMap>(
    map: &M,
    frame: &ReferenceFrame,
    x: &TorusPoint,
    cfg: &SplittingConfig,
) -> Result<GraphMap> {
    let t = unstable_graph_in(map, frame, x, cfg.depth)?;
    let reference = unstable_graph_in(map, frame, x, cfg.depth + cfg.certificate_extra)?;
    let achieved = ambient_angle(frame, &t, &reference)?;
    if achieved < cfg.tolerance {
        Ok(t)
    } else {
        Err(Error::NonConvergentSplitting {
            achieved,
            required: cfg.tolerance,
        })
    }
}

/// Angle between `dφ(x)·E_u(x)` and `E_u(φx)`, both at depth `n`.
pub fn nd_invariance_defect<M: TorusMap>(map: &M, frame: &ReferenceFrame, x: &TorusPoint, n: usize) -> Result<f64> {
    let here = unstable_graph_in(map, frame, x, n)?;
    let fx = map.apply(x);
    let there = unstable_graph_in(map, frame, &fx, n)?;
    let pushed = graph_transform(&frame.blocks(map.jacobian(x).matrix())?, &here)?;
    ambient_angle(frame, &pushed, &there)
}

/// Per-step blocks restricted to the invariant subspaces in graph
/// coordinates: `A⁽ᵏ⁾ = A + BT_u` acts on `E_u` and `B⁽ᵏ⁾ = CT_s + D` acts
/// on `E_s`.
fn restricted_blocks<M: TorusMap>(
    map: &M,
    frame: &ReferenceFrame,
    y: &TorusPoint,
    cfg: &SplittingConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let tu = unstable_graph_in(map, frame, y, cfg.depth)?;
    let ts = stable_graph_in(map, frame, y, cfg.depth)?;
    let j = frame.blocks(map.jacobian(y).matrix())?;
    let unstable = &j.a + &j.b * tu.matrix();
    let stable = &j.c * ts.matrix() + &j.d;
    Ok((unstable, stable))
}

/// `(Aₙ, Bₙ)` for `k = 1..=n` along the forward orbit of `y`.
fn block_cocycles<M: TorusMap>(
    map: &M,
    frame: &ReferenceFrame,
    y: &TorusPoint,
    n: usize,
    cfg: &SplittingConfig,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let mut orbit = vec![y.clone()];
    for k in 0..n.saturating_sub(1) {
        let next = map.apply(&orbit[k]);
        orbit.push(next);
    }
    let steps: Vec<(DMatrix<f64>, DMatrix<f64>)> = orbit
        .par_iter()
        .map(|p| restricted_blocks(map, frame, p, cfg))
        .collect::<Result<_>>()?;
    let mut a = DMatrix::identity(frame.d_u(), frame.d_u());
    let mut b = DMatrix::identity(frame.d_s(), frame.d_s());
    let mut out = Vec::with_capacity(n);
    for (ak, bk) in steps {
        a = ak * a;
        b = bk * b;
        out.push((a.clone(), b.clone()));
    }
    Ok(out)
}

/// Finite-time rates of the restricted block cocycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdRates {
    /// `max ‖Aₙ⁻¹‖^{1/n}` over the samples.
    pub kappa_hat: f64,
    /// `max ‖Bₙ‖^{1/n}` over the samples.
    pub lambda_hat: f64,
    pub horizon_n: usize,
}

pub fn nd_growth_rates<M: TorusMap>(
    map: &M,
    frame: &ReferenceFrame,
    samples: &[TorusPoint],
    n: usize,
    cfg: &SplittingConfig,
) -> Result<NdRates> {
    if samples.is_empty() || n == 0 {
        return Err(Error::InvalidArgument("need at least one sample and n >= 1".into()));
    }
    let rates: Vec<(f64, f64)> = samples
        .iter()
        .map(|x| {
            let (a, b) = block_cocycles(map, frame, x, n, cfg)?.pop().expect("n >= 1");
            let a_inv = a.try_inverse().ok_or(Error::SingularJacobian(0.0))?;
            let inv_n = 1.0 / n as f64;
            Ok((operator_norm(&a_inv).powf(inv_n), operator_norm(&b).powf(inv_n)))
        })
        .collect::<Result<_>>()?;
    let kappa_hat = rates.iter().map(|r| r.0).fold(0.0, f64::max);
    let lambda_hat = rates.iter().map(|r| r.1).fold(0.0, f64::max);
    if kappa_hat >= 1.0 || lambda_hat >= 1.0 {
        return Err(Error::NotHyperbolic {
            kappa: kappa_hat,
            lambda: lambda_hat,
        });
    }
    Ok(NdRates {
        kappa_hat,
        lambda_hat,
        horizon_n: n,
    })
}

/// A point on the stable leaf of `x` at distance about `|t|`: offset
/// `φᵐx` along the first stable basis vector by `t·λᵐ`-scaled arclength
/// and pull back `m` steps.
pub fn stable_leaf_point<M: TorusMap>(
    map: &M,
    frame: &ReferenceFrame,
    x: &TorusPoint,
    t: f64,
    cfg: &SplittingConfig,
) -> Result<TorusPoint> {
    const PULLBACK: usize = 10;
    let mut z = x.clone();
    for _ in 0..PULLBACK {
        z = map.apply(&z);
    }
    let ts = stable_graph_in(map, frame, &z, cfg.depth)?;
    // stable vectors are (Tw, w) in frame coordinates
    let d = frame.dim();
    let du = frame.d_u();
    let mut w = DVector::zeros(d);
    w.rows_mut(0, du).copy_from(&ts.matrix().column(0));
    w[du] = 1.0;
    let mut v = frame.matrix() * w;
    v /= v.norm();

    // scale the offset so that the pulled-back point lands near |t|
    let pull = |s: f64| -> TorusPoint {
        let mut y = TorusPoint::new(z.coords().iter().zip(v.iter()).map(|(c, e)| c + s * e).collect());
        for _ in 0..PULLBACK {
            y = map.apply_inverse(&y);
        }
        y
    };
    let probe = 1e-9;
    let gain = x.distance(&pull(probe)) / probe;
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidArgument("stable offset collapsed under pullback".into()));
    }
    Ok(pull(t / gain))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrowthRow {
    pub n: usize,
    /// `‖Bₙ(y) − Bₙ(x)‖`.
    pub b_diff: f64,
    /// `R λⁿ ‖y − x‖` with the report's `r_min`.
    pub bound: f64,
    /// `b_diff / (λⁿ ‖y − x‖)`.
    pub ratio: f64,
    /// `‖Aₙ(x)⁻¹‖`.
    pub a_inv_norm: f64,
    /// `‖Bₙ(x)‖`.
    pub b_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrowthReport {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub offset: f64,
    pub lambda: f64,
    pub rows: Vec<BlockGrowthRow>,
    /// Smallest `R` with `‖Bₙ(y) − Bₙ(x)‖ ≤ Rλⁿ‖y − x‖` for all rows.
    pub r_min: f64,
    /// Smallest `L` with `‖Aₙ⁻¹‖, ‖Bₙ‖ ≤ Lλⁿ` for all rows.
    pub l_min: f64,
}

/// Compares the restricted stable cocycles at `x` and at a point `y` on its
/// stable leaf at distance about `|t|`, for `n = 1..=n_max`.
pub fn block_growth_check<M: TorusMap>(
    map: &M,
    frame: &ReferenceFrame,
    x: &TorusPoint,
    t: f64,
    n_max: usize,
    lambda: f64,
    cfg: &SplittingConfig,
) -> Result<BlockGrowthReport> {
    if n_max == 0 || !(lambda > 0.0 && lambda < 1.0) || t == 0.0 {
        return Err(Error::InvalidArgument("need n_max >= 1, 0 < lambda < 1 and t != 0".into()));
    }
    let y = stable_leaf_point(map, frame, x, t, cfg)?;
    let offset = x.coords().iter().zip(y.coords()).map(|(a, b)| wrap_diff(b - a).powi(2)).sum::<f64>().sqrt();
    let at_x = block_cocycles(map, frame, x, n_max, cfg)?;
    let at_y = block_cocycles(map, frame, &y, n_max, cfg)?;
    let mut rows = Vec::with_capacity(n_max);
    for (k, ((ax, bx), (_, by))) in at_x.iter().zip(&at_y).enumerate() {
        let n = k + 1;
        let scale = lambda.powi(n as i32);
        let b_diff = operator_norm(&(by - bx));
        let a_inv = ax.clone().try_inverse().ok_or(Error::SingularJacobian(0.0))?;
        rows.push(BlockGrowthRow {
            n,
            b_diff,
            bound: 0.0,
            ratio: b_diff / (scale * offset),
            a_inv_norm: operator_norm(&a_inv),
            b_norm: operator_norm(bx),
        });
    }
    let r_min = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let l_min = rows
        .iter()
        .map(|r| r.a_inv_norm.max(r.b_norm) / lambda.powi(r.n as i32))
        .fold(0.0, f64::max);
    for r in &mut rows {
        r.bound = r_min * lambda.powi(r.n as i32) * offset;
    }
    Ok(BlockGrowthReport {
        x: x.coords().to_vec(),
        y: y.coords().to_vec(),
        offset,
        lambda,
        rows,
        r_min,
        l_min,
    })
}

/// Rescales rays so that `Σ‖vᵢ‖ = 1`.
pub fn normalize_rays(rays: &[Vec<f64>; 3]) -> [Vec<f64>; 3] {
    let total: f64 = rays.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt()).sum();
    rays.clone().map(|v| v.into_iter().map(|c| c / total).collect())
}

/// `|h₂h₃f(c₁(h₁)) + h₁h₃f(c₂(h₂)) + h₁h₂f(c₃(h₃)) − (h₁h₂ + h₂h₃ + h₁h₃)f(x)| / (h₁h₂h₃)`
/// with `cᵢ(h) = x + h·vᵢ`. The rays must sum to zero.
pub fn three_direction_second_difference<F: Fn(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    h: [f64; 3],
    rays: &[Vec<f64>; 3],
) -> Result<f64> {
    if h.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("step sizes must be positive".into()));
    }
    if rays.iter().any(|v| v.len() != x.len()) {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: rays.iter().map(Vec::len).find(|&l| l != x.len()).unwrap_or(0),
        });
    }
    let scale: f64 = rays.iter().flatten().map(|c| c.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let residual = (0..x.len())
        .map(|i| rays.iter().map(|v| v[i]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if residual > 1e-12 * scale {
        return Err(Error::RaySum(residual));
    }
    let at = |k: usize| -> f64 {
        let p: Vec<f64> = x.iter().zip(&rays[k]).map(|(a, v)| a + h[k] * v).collect();
        f(&p)
    };
    let f0 = f(x);
    let [h1, h2, h3] = h;
    let sum = h2 * h3 * (at(0) - f0) + h1 * h3 * (at(1) - f0) + h1 * h2 * (at(2) - f0);
    Ok(sum.abs() / (h1 * h2 * h3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{cat4, cat4_matrix, cat_map, perturbed_cat, perturbed_cat4};
    use crate::regularity::second_difference;
    use crate::sampling::halton_points;
    use crate::splitting2::{slope_of, unstable_at, Direction2};
    use crate::torus::{LatticeMatrix, MapSpec};
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn block_diagonal_keeps_zero() {
        let m = mat(&[&[2.0, 0.0, 0.0], &[0.0, 3.0, 0.0], &[0.0, 0.0, 0.5]]);
        let j = BlockJacobian::from_matrix(&m, 2).unwrap();
        assert_eq!(j.to_matrix(), m);
        let t = graph_transform(&j, &GraphMap::zero(2, 1)).unwrap();
        assert!(t.matrix().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_blocks_match_slope_pushforward() {
        let (a, b, c, d) = (2.0, 1.0, 1.0, 1.0);
        let j = BlockJacobian::from_matrix(&mat(&[&[a, b], &[c, d]]), 1).unwrap();
        for theta in [-0.7, 0.0, 0.3, 2.5] {
            let t = graph_transform(&j, &GraphMap::new(scalar(theta)).unwrap()).unwrap();
            assert_eq!(t.matrix()[(0, 0)], (c + d * theta) / (a + b * theta));
            let dir = crate::splitting2::pushforward(
                &crate::torus::Jacobian::new(mat(&[&[a, b], &[c, d]])),
                &Direction2::from_slope(theta),
            )
            .unwrap();
            assert!((slope_of(&dir).unwrap() - t.matrix()[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn chart_failure_is_reported() {
        let j = BlockJacobian::from_matrix(&mat(&[&[1.0, 1.0], &[0.0, 1.0]]), 1).unwrap();
        let err = graph_transform(&j, &GraphMap::new(scalar(-1.0)).unwrap()).unwrap_err();
        assert!(matches!(err, Error::GraphChartLeft { .. }));
    }

    #[test]
    fn angles_of_simple_graphs() {
        let p = GraphMap::new(scalar(0.0)).unwrap();
        let q = GraphMap::new(scalar(1.0)).unwrap();
        assert!((subspace_angle(&p, &q).unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert_eq!(subspace_angle(&q, &q).unwrap(), 0.0);
        assert!(subspace_angle(&p, &GraphMap::zero(2, 1)).is_err());
    }

    #[test]
    fn graph_map_json_shape() {
        let t = GraphMap::new(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let json = t.to_json();
        assert_eq!(json, r#"{"d_u":2,"d_s":3,"matrix":[[1.0,2.0],[3.0,4.0],[5.0,6.0]]}"#);
        assert_eq!(GraphMap::from_json(&json).unwrap(), t);
        assert!(GraphMap::from_json(r#"{"d_u":2,"d_s":1,"matrix":[[1.0]]}"#).is_err());
    }

    #[test]
    fn operator_norm_matches_svd() {
        let m = mat(&[&[3.0, 1.0, 0.0], &[1.0, -2.0, 0.5]]);
        let exact = m.singular_values().max();
        assert!((operator_norm(&m) - exact).abs() < 1e-12 * exact);
        assert_eq!(operator_norm(&DMatrix::zeros(2, 2)), 0.0);
    }

    #[test]
    fn spectral_frame_is_invariant() {
        let spec = cat4();
        let frame = ReferenceFrame::spectral(&spec, 2).unwrap();
        let j = frame.blocks(spec.linear_part()).unwrap();
        assert!(j.b.norm() < 1e-12 && j.c.norm() < 1e-12);
        assert!(ReferenceFrame::spectral(&spec, 1).is_err());
        let t = unstable_graph(&spec, &TorusPoint::new(vec![0.1, 0.2, 0.3, 0.4]), 60, 2).unwrap();
        assert!(t.matrix().norm() < 1e-12);
    }

    /// Graph over the first two coordinates of the expanding eigenspace of
    /// `S(C⊕C)S⁻¹`, from the closed-form eigenvectors of `C`.
    fn cat4_oracle() -> DMatrix<f64> {
        let su = (5f64.sqrt() - 1.0) / 2.0;
        // S(e₀ + s e₂) = e₀ + e₁ + s e₂ and S(e₁ + s e₃) = e₁ + s e₃
        let upper = mat(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let lower = mat(&[&[su, 0.0], &[0.0, su]]);
        lower * upper.try_inverse().unwrap()
    }

    #[test]
    fn cat4_graph_transform_matches_eigenbasis() {
        let m = LatticeMatrix::new(cat4_matrix()).unwrap().to_matrix();
        let j = BlockJacobian::from_matrix(&m, 2).unwrap();
        let mut t = GraphMap::zero(2, 2);
        for _ in 0..60 {
            t = graph_transform(&j, &t).unwrap();
        }
        assert!((t.matrix() - cat4_oracle()).amax() < 1e-9);
    }

    #[test]
    fn six_dimensional_graph_transform_matches_eigenbasis() {
        // blocks on (0,3), (1,4), (2,5), conjugated by S adding x₀ to x₁ and x₁ to x₂
        let mut sum = vec![vec![0i64; 6]; 6];
        for i in 0..3 {
            sum[i][i] = 2;
            sum[i][i + 3] = 1;
            sum[i + 3][i] = 1;
            sum[i + 3][i + 3] = 1;
        }
        let mut s = DMatrix::<f64>::identity(6, 6);
        s[(1, 0)] = 1.0;
        s[(2, 1)] = 1.0;
        let sum_f = DMatrix::from_fn(6, 6, |i, j| sum[i][j] as f64);
        let m = &s * sum_f * s.clone().try_inverse().unwrap();
        let rows: Vec<Vec<i64>> = (0..6).map(|i| (0..6).map(|j| m[(i, j)].round() as i64).collect()).collect();
        let lattice = LatticeMatrix::new(rows).unwrap();
        assert_eq!(lattice.unstable_dim(), 3);

        let j = BlockJacobian::from_matrix(&lattice.to_matrix(), 3).unwrap();
        let mut t = GraphMap::zero(3, 3);
        for _ in 0..60 {
            t = graph_transform(&j, &t).unwrap();
        }
        let su = (5f64.sqrt() - 1.0) / 2.0;
        let upper = s.view((0, 0), (3, 3)).into_owned();
        let oracle = upper.try_inverse().unwrap() * su;
        assert!((t.matrix() - oracle).amax() < 1e-9);
    }

    #[test]
    fn two_dimensional_reduction_matches_slopes() {
        let cfg = SplittingConfig::default();
        for spec in [cat_map(), perturbed_cat(0.05)] {
            let frame = ReferenceFrame::standard(2, 1).unwrap();
            for x in halton_points(10, 2) {
                let t = unstable_graph_in(&spec, &frame, &x, 60).unwrap();
                let eu = unstable_at(&spec, &x, &cfg).unwrap();
                assert!((t.matrix()[(0, 0)] - slope_of(&eu).unwrap()).abs() < 1e-12);

                let spectral = ReferenceFrame::spectral(&spec, 1).unwrap();
                let b = spectral.embed(&unstable_graph_in(&spec, &spectral, &x, 60).unwrap());
                let dir = Direction2::new(b[(0, 0)], b[(1, 0)]).unwrap();
                assert!(dir.angle_to(&eu) < 1e-12);
            }
        }
    }

    #[test]
    fn perturbed_4d_invariance() {
        let spec = perturbed_cat4(0.02);
        let frame = ReferenceFrame::spectral(&spec, 2).unwrap();
        for x in halton_points(8, 4) {
            assert!(nd_invariance_defect(&spec, &frame, &x, 60).unwrap() < 1e-7);
            let a = unstable_graph_in(&spec, &frame, &x, 60).unwrap();
            let b = unstable_graph_in(&spec, &frame, &x, 120).unwrap();
            assert!(ambient_angle(&frame, &a, &b).unwrap() < 1e-10);
        }
        let cfg = SplittingConfig::default();
        assert!(certified_unstable_graph(&spec, &frame, &TorusPoint::new(vec![0.3; 4]), &cfg).is_ok());
    }

    #[test]
    fn stable_graph_is_invariant_under_inverse() {
        let spec = perturbed_cat4(0.02);
        let frame = ReferenceFrame::spectral(&spec, 2).unwrap();
        let x = TorusPoint::new(vec![0.1, 0.7, 0.4, 0.9]);
        let back = frame.swapped();
        let defect = nd_invariance_defect(&Inverse(&spec), &back, &x, 60).unwrap();
        assert!(defect < 1e-7);
        let ts = stable_graph_in(&spec, &frame, &x, 60).unwrap();
        let tu = unstable_graph_in(&spec, &frame, &x, 60).unwrap();
        // transversal: the combined basis is well conditioned
        let mut both = DMatrix::zeros(4, 4);
        both.view_mut((0, 0), (4, 2)).copy_from(&frame.embed(&tu));
        both.view_mut((0, 2), (4, 2)).copy_from(&back.embed(&ts));
        assert!(condition_number(&both) < 1e3);
    }

    #[test]
    fn linear_block_growth_is_flat() {
        let spec = cat4();
        let frame = ReferenceFrame::spectral(&spec, 2).unwrap();
        let cfg = SplittingConfig::default();
        let lambda = (3.0 - 5f64.sqrt()) / 2.0;
        let r = block_growth_check(&spec, &frame, &TorusPoint::new(vec![0.2; 4]), 1e-3, 10, lambda, &cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.b_diff < 1e-12), "{r:?}");
        assert!(r.r_min < 1e-6);
        assert!((r.offset - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn perturbed_block_growth() {
        let spec = perturbed_cat4(0.02);
        let frame = ReferenceFrame::spectral(&spec, 2).unwrap();
        let cfg = SplittingConfig::default();
        let rates = nd_growth_rates(&spec, &frame, &halton_points(16, 4), 20, &cfg).unwrap();
        assert!(rates.lambda_hat < 1.0 && rates.kappa_hat < 1.0);
        let x = TorusPoint::new(vec![0.3, 0.1, 0.6, 0.2]);
        let short = block_growth_check(&spec, &frame, &x, 1e-3, 10, rates.lambda_hat, &cfg).unwrap();
        let long = block_growth_check(&spec, &frame, &x, 1e-3, 20, rates.lambda_hat, &cfg).unwrap();
        assert!(short.r_min > 0.0 && long.r_min.is_finite());
        assert!(long.r_min / short.r_min < 2.0, "{} {}", short.r_min, long.r_min);
        let half = block_growth_check(&spec, &frame, &x, 5e-4, 10, rates.lambda_hat, &cfg).unwrap();
        let ratio = half.rows[9].b_diff / short.rows[9].b_diff;
        assert!((ratio - 0.5).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn three_direction_examples() {
        let rays = normalize_rays(&[vec![1.0, 0.0], vec![-0.5, 0.75f64.sqrt()], vec![-0.5, -(0.75f64.sqrt())]]);
        let affine = |p: &[f64]| 3.0 + 2.0 * p[0] - p[1];
        let v = three_direction_second_difference(affine, &[0.3, 0.4], [0.1, 0.2, 0.3], &rays).unwrap();
        assert!(v < 1e-12);
        for h in [0.1, 0.01, 0.001] {
            let quad = |p: &[f64]| p[0] * p[0] + p[1] * p[1];
            let v = three_direction_second_difference(quad, &[0.0, 0.0], [h; 3], &rays).unwrap();
            // h⁴ Σ‖vᵢ‖² / h³ with ‖vᵢ‖ = 1/3
            assert!((v - h / 3.0).abs() < 1e-12, "{v}");
        }
        let bad = [vec![1.0], vec![1.0], vec![0.0]];
        assert!(matches!(
            three_direction_second_difference(affine_1d, &[0.0], [0.1; 3], &bad),
            Err(Error::RaySum(_))
        ));
    }

    fn affine_1d(p: &[f64]) -> f64 {
        2.0 * p[0]
    }

    #[test]
    fn one_dimensional_rays_reduce_to_second_difference() {
        let f = |p: &[f64]| p[0].sin();
        let rays = [vec![1.0], vec![-1.0], vec![0.0]];
        for (h1, h2) in [(0.1, 0.2), (0.01, 0.03)] {
            let x = 0.4;
            let three = three_direction_second_difference(f, &[x], [h1, h2, 0.5], &rays).unwrap();
            let two = second_difference((x + h1).sin(), x.sin(), (x - h2).sin(), h1, h2);
            assert!((three - two).abs() < 1e-12 * two.max(1.0));
        }
    }

    #[test]
    fn linear_rates() {
        let spec = MapSpec::cat();
        let frame = ReferenceFrame::spectral(&spec, 1).unwrap();
        let r = nd_growth_rates(&spec, &frame, &halton_points(4, 2), 20, &SplittingConfig::default()).unwrap();
        let lambda = (3.0 - 5f64.sqrt()) / 2.0;
        assert!((r.lambda_hat - lambda).abs() < 1e-9 && (r.kappa_hat - lambda).abs() < 1e-9);
    }

    fn small_matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-1.0f64..1.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
    }

    proptest! {
        #[test]
        fn transform_is_a_cocycle(j1 in small_matrix(4, 4), j2 in small_matrix(4, 4), t in small_matrix(2, 2)) {
            let shift = DMatrix::<f64>::identity(4, 4) * 2.0;
            let (m1, m2) = (&j1 + &shift, &j2 + &shift);
            let t = GraphMap::new(t * 0.3).unwrap();
            let b1 = BlockJacobian::from_matrix(&m1, 2).unwrap();
            let b2 = BlockJacobian::from_matrix(&m2, 2).unwrap();
            let b21 = BlockJacobian::from_matrix(&(&m2 * &m1), 2).unwrap();
            if let (Ok(step), Ok(direct)) = (graph_transform(&b1, &t), graph_transform(&b21, &t)) {
                if let Ok(two) = graph_transform(&b2, &step) {
                    let scale = 1.0 + direct.matrix().amax();
                    prop_assert!((two.matrix() - direct.matrix()).amax() < 1e-10 * scale);
                }
            }
        }

        #[test]
        fn angle_is_a_metric(a in small_matrix(2, 2), b in small_matrix(2, 2), c in small_matrix(2, 2)) {
            let (p, q, r) = (GraphMap::new(a).unwrap(), GraphMap::new(b).unwrap(), GraphMap::new(c).unwrap());
            let pq = subspace_angle(&p, &q).unwrap();
            prop_assert!((pq - subspace_angle(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!(pq <= subspace_angle(&p, &r).unwrap() + subspace_angle(&r, &q).unwrap() + 1e-12);
            prop_assert!(subspace_angle(&p, &p).unwrap() < 1e-12);
        }
    }
}
