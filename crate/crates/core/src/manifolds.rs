//! Local stable and unstable manifolds on `T²` as polylines.
//!
//! Unstable curves are grown by pushing a short segment along `E_u` at
//! `φ⁻ᵈ(base)` forward `d` times, refining in the preimage whenever an image
//! gap or turning angle gets too large. Transverse errors contract under the
//! forward map, so only the last refinement limits accuracy. Stable curves
//! are unstable curves of `φ⁻¹`.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splitting2::{certified_unstable, Direction2, SplittingConfig};
use crate::torus::{Inverse, TorusMap, TorusPoint};

/// Interval refinement stops below this fraction of the working spacing.
const MIN_GAP_FRACTION: f64 = 1e-3;
const MAX_TURN: f64 = 0.2;
const MAX_DEPTH: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    Unstable,
    Stable,
}

impl ManifoldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ManifoldKind::Unstable => "unstable",
            ManifoldKind::Stable => "stable",
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            ManifoldKind::Unstable => "blue",
            ManifoldKind::Stable => "red",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldRequest {
    pub base: TorusPoint,
    pub kind: ManifoldKind,
    pub half_length: f64,
    pub step: f64,
    /// Number of map applications; chosen automatically when `None`.
    pub depth: Option<usize>,
}

impl ManifoldRequest {
    pub fn new(base: TorusPoint, kind: ManifoldKind, half_length: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && step < half_length && half_length <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < step < half_length <= 0.5, got step {step}, half_length {half_length}"
            )));
        }
        if base.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: base.dim() });
        }
        Ok(Self {
            base,
            kind,
            half_length,
            step,
            depth: None,
        })
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = Some(depth);
        self
    }
}

/// A manifold piece through `base`, parametrized by signed arclength.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    kind: ManifoldKind,
    base: TorusPoint,
    /// Continuous planar lift; the node at `base_index` equals `base`.
    lift: Vec<[f64; 2]>,
    arclength: Vec<f64>,
    base_index: usize,
    step: f64,
    half_length: f64,
    tangent: Direction2,
    self_intersecting: bool,
}

impl Polyline {
    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn base(&self) -> TorusPoint {
        self.base.clone()
    }

    pub fn lift(&self) -> &[[f64; 2]] {
        &self.lift
    }

    pub fn arclength(&self) -> &[f64] {
        &self.arclength
    }

    pub fn base_index(&self) -> usize {
        self.base_index
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn len(&self) -> usize {
        self.lift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lift.is_empty()
    }

    /// Tangent at the base, from a second-order difference on the
    /// unresampled curve.
    pub fn tangent(&self) -> Direction2 {
        self.tangent
    }

    /// Set when two non-adjacent segments cross on the torus.
    pub fn self_intersecting(&self) -> bool {
        self.self_intersecting
    }

    /// Nodes reduced to the fundamental domain.
    pub fn points(&self) -> Vec<TorusPoint> {
        self.lift.iter().map(|p| TorusPoint::xy(p[0], p[1])).collect()
    }

    /// Planar lift of the point at signed arclength `t`.
    pub fn lift_at_arclength(&self, t: f64) -> Result<[f64; 2]> {
        if !(t.abs() <= self.half_length * (1.0 + 1e-12)) {
            return Err(Error::ArclengthOutOfRange {
                t,
                half_length: self.half_length,
            });
        }
        if t == 0.0 {
            return Ok(self.lift[self.base_index]);
        }
        let s = &self.arclength;
        let k = s.partition_point(|&v| v <= t).clamp(1, s.len() - 1);
        let (s0, s1) = (s[k - 1], s[k]);
        let w = ((t - s0) / (s1 - s0)).clamp(0.0, 1.0);
        let (a, b) = (self.lift[k - 1], self.lift[k]);
        Ok([a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])])
    }

    pub fn point_at_arclength(&self, t: f64) -> Result<TorusPoint> {
        if t == 0.0 {
            return Ok(self.base.clone());
        }
        let p = self.lift_at_arclength(t)?;
        Ok(TorusPoint::xy(p[0], p[1]))
    }

    /// The lift cut at the edges of the unit square, each piece translated
    /// into `[0,1]²`.
    pub fn wrapped_segments(&self) -> Vec<Vec<[f64; 2]>> {
        wrap_polyline(&self.lift)
    }

    /// Smallest torus distance from `p` to the polyline.
    pub fn distance_to(&self, p: &TorusPoint) -> f64 {
        let c = p.coords();
        self.lift
            .windows(2)
            .map(|w| {
                let mid = [(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0];
                let q = [c[0] + (mid[0] - c[0]).round(), c[1] + (mid[1] - c[1]).round()];
                point_segment_distance(q, w[0], w[1])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let w = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    norm(sub(p, [a[0] + w * ab[0], a[1] + w * ab[1]]))
}

fn turning_angle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let (u, v) = (sub(b, a), sub(c, b));
    cross(u, v).abs().atan2(dot(u, v))
}

/// Grow the requested manifold piece.
pub fn grow_manifold<M: TorusMap>(map: &M, req: &ManifoldRequest, cfg: &SplittingConfig) -> Result<Polyline> {
    if map.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: map.dim() });
    }
    match req.kind {
        ManifoldKind::Unstable => grow_unstable(map, req, cfg),
        ManifoldKind::Stable => grow_unstable(&Inverse(map), req, cfg),
    }
}

/// The seed segment `p + σ·e` pushed forward, with the integer shifts that
/// keep the orbit of `p` in the unit square.
struct Seed<'a, M> {
    map: &'a M,
    p: [f64; 2],
    e: [f64; 2],
    shifts: Vec<[f64; 2]>,
}

impl<M: TorusMap> Seed<'_, M> {
    fn step(&self, z: [f64; 2], level: usize) -> [f64; 2] {
        let v = self.map.lift_forward(&z);
        let k = self.shifts[level];
        [v[0] - k[0], v[1] - k[1]]
    }

    /// `Φ_j(σ)`: the point with parameter `σ` after `level` applications.
    fn image(&self, sigma: f64, level: usize) -> [f64; 2] {
        let mut z = [self.p[0] + sigma * self.e[0], self.p[1] + sigma * self.e[1]];
        for j in 0..level {
            z = self.step(z, j);
        }
        z
    }
}

#[derive(Clone, Copy)]
struct Node {
    sigma: f64,
    img: [f64; 2],
}

/// Push the curve from `level` to `level + 1`, inserting parameter midpoints
/// until image gaps are at most `gap` and turning angles at most `MAX_TURN`.
fn advance<M: TorusMap>(seed: &Seed<M>, curve: &[Node], level: usize, gap: f64) -> Vec<Node> {
    let next = level + 1;
    let at = |sigma: f64| Node {
        sigma,
        img: seed.image(sigma, next),
    };
    let mut nodes: Vec<Node> = curve
        .iter()
        .map(|n| Node {
            sigma: n.sigma,
            img: seed.step(n.img, level),
        })
        .collect();
    let min_gap = gap * MIN_GAP_FRACTION;

    let mut refined = Vec::with_capacity(nodes.len() * 3);
    let mut stack = Vec::new();
    let mut left = nodes[0];
    for &right in &nodes[1..] {
        // depth-first bisection of [left, right] in the parameter
        stack.push(right);
        while let Some(r) = stack.pop() {
            if norm(sub(r.img, left.img)) > gap && (r.sigma - left.sigma).abs() > 1e-300 {
                stack.push(r);
                stack.push(at((left.sigma + r.sigma) / 2.0));
            } else {
                refined.push(left);
                left = r;
            }
        }
    }
    refined.push(left);
    nodes = refined;

    for _ in 0..8 {
        let mut split = vec![false; nodes.len()];
        let mut any = false;
        for k in 1..nodes.len() - 1 {
            if turning_angle(nodes[k - 1].img, nodes[k].img, nodes[k + 1].img) > MAX_TURN {
                for i in [k - 1, k] {
                    if norm(sub(nodes[i + 1].img, nodes[i].img)) > min_gap {
                        split[i] = true;
                        any = true;
                    }
                }
            }
        }
        if !any {
            break;
        }
        let mut more = Vec::with_capacity(nodes.len() * 2);
        for i in 0..nodes.len() {
            more.push(nodes[i]);
            if split[i] {
                more.push(at((nodes[i].sigma + nodes[i + 1].sigma) / 2.0));
            }
        }
        nodes = more;
    }
    nodes
}

fn center_of(curve: &[Node]) -> usize {
    curve.iter().position(|n| n.sigma == 0.0).expect("the base parameter is never dropped")
}

/// Cumulative chord length measured from `center` (negative before it).
fn arclength_from(curve: &[Node], center: usize) -> Vec<f64> {
    let mut s = vec![0.0; curve.len()];
    for i in center + 1..curve.len() {
        s[i] = s[i - 1] + norm(sub(curve[i].img, curve[i - 1].img));
    }
    for i in (0..center).rev() {
        s[i] = s[i + 1] - norm(sub(curve[i + 1].img, curve[i].img));
    }
    s
}

/// Drop nodes more than `reach` away from the center along the curve,
/// keeping one node past the limit on each side.
fn trim(curve: &mut Vec<Node>, reach: f64) {
    let s = arclength_from(curve, center_of(curve));
    let hi = s.iter().position(|&v| v > reach).unwrap_or(s.len() - 1);
    let lo = s.iter().rposition(|&v| v < -reach).unwrap_or(0);
    curve.truncate(hi + 1);
    curve.drain(..lo);
}

fn grow_unstable<M: TorusMap>(map: &M, req: &ManifoldRequest, cfg: &SplittingConfig) -> Result<Polyline> {
    let base = &req.base;
    let fine = req.step / 4.0;
    let r0 = req.step / 4.0;
    let reach = req.half_length + 2.0 * req.step;
    certified_unstable(map, base, cfg)?.require(cfg.tolerance)?;

    let a = map.linear_part();
    let tr = a[(0, 0)] + a[(1, 1)];
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let rho = (tr.abs() + (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0;
    let mut depth = req
        .depth
        .unwrap_or_else(|| ((reach / r0).ln() / rho.ln()).ceil() as usize + 2)
        .max(1);

    loop {
        let (seed, curve) = push_segment(map, base, depth, r0, fine, reach, cfg)?;
        let s = arclength_from(&curve, center_of(&curve));
        let covered = s[0] <= -(req.half_length + req.step) && *s.last().unwrap() >= req.half_length + req.step;
        if covered {
            return finish(req, &seed, depth, curve);
        }
        if req.depth.is_some() {
            return Err(Error::ManifoldGrowth(format!(
                "depth {depth} covers only [{:.3e}, {:.3e}] of ±{}",
                s[0],
                s.last().unwrap(),
                req.half_length
            )));
        }
        depth += 4;
        if depth > MAX_DEPTH {
            return Err(Error::ManifoldGrowth(format!(
                "no coverage of ±{} within {MAX_DEPTH} iterations",
                req.half_length
            )));
        }
    }
}

fn push_segment<'a, M: TorusMap>(
    map: &'a M,
    base: &TorusPoint,
    depth: usize,
    r0: f64,
    fine: f64,
    reach: f64,
    cfg: &SplittingConfig,
) -> Result<(Seed<'a, M>, Vec<Node>)> {
    let mut p = base.clone();
    for _ in 0..depth {
        p = map.apply_inverse(&p);
    }
    let e = certified_unstable(map, &p, cfg)?.require(cfg.tolerance)?.components();
    let pc = [p.coords()[0], p.coords()[1]];
    let mut shifts = Vec::with_capacity(depth);
    let mut c = pc;
    for _ in 0..depth {
        let v = map.lift_forward(&c);
        let k = [v[0].floor(), v[1].floor()];
        c = [v[0] - k[0], v[1] - k[1]];
        shifts.push(k);
    }
    let seed = Seed { map, p: pc, e, shifts };
    let mut curve: Vec<Node> = [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|&s| Node {
            sigma: s * r0,
            img: seed.image(s * r0, 0),
        })
        .collect();
    for level in 0..depth {
        curve = advance(&seed, &curve, level, fine);
        trim(&mut curve, reach);
    }
    Ok((seed, curve))
}

/// Re-center on `base`, orient, and place nodes at uniform arclength. Every
/// node is an exact image of a seed parameter, never an interpolated point.
fn finish<M: TorusMap>(req: &ManifoldRequest, seed: &Seed<M>, depth: usize, mut curve: Vec<Node>) -> Result<Polyline> {
    let b = req.base.coords();
    let b = [b[0], b[1]];
    let mut center = center_of(&curve);
    let cp = curve[center].img;
    let k = [(b[0] - cp[0]).round(), (b[1] - cp[1]).round()];
    for n in curve.iter_mut() {
        n.img = [n.img[0] + k[0], n.img[1] + k[1]];
    }

    // second-order tangent at the center node from its two neighbours
    let (lo, c0, hi) = (curve[center - 1].img, curve[center].img, curve[center + 1].img);
    let (hm, hp) = (norm(sub(c0, lo)), norm(sub(hi, c0)));
    let d = |k: usize| (hm * hm * (hi[k] - c0[k]) - hp * hp * (lo[k] - c0[k])) / (hm * hp * (hm + hp));
    let tangent = Direction2::new(d(0), d(1))?;
    // orient so arclength increases along the canonical tangent
    if dot(sub(hi, lo), tangent.components()) < 0.0 {
        curve.reverse();
        center = curve.len() - 1 - center;
    }

    // project the base onto the nearby curve to fix the arclength origin
    let s = arclength_from(&curve, center);
    let window = center.saturating_sub(16)..(center + 16).min(curve.len() - 1);
    let mut best = (f64::INFINITY, 0.0);
    for i in window {
        let (a, bb) = (curve[i].img, curve[i + 1].img);
        let ab = sub(bb, a);
        let w = (dot(sub(b, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
        let q = [a[0] + w * ab[0], a[1] + w * ab[1]];
        let dist = norm(sub(b, q));
        if dist < best.0 {
            best = (dist, s[i] + w * (s[i + 1] - s[i]));
        }
    }
    let s: Vec<f64> = s.iter().map(|v| v - best.1).collect();

    let h = req.half_length;
    let k_max = (h / req.step).floor() as i64;
    let mut ts: Vec<f64> = (-k_max..=k_max).map(|k| k as f64 * req.step).collect();
    let rem = h - k_max as f64 * req.step;
    if rem >= 0.5 * req.step {
        ts.insert(0, -h);
        ts.push(h);
    } else {
        ts[0] = -h;
        *ts.last_mut().unwrap() = h;
    }

    let mut lift = Vec::with_capacity(ts.len());
    for &t in &ts {
        if t == 0.0 {
            lift.push(b);
            continue;
        }
        let i = s.partition_point(|&v| v <= t).clamp(1, s.len() - 1);
        let w = (t - s[i - 1]) / (s[i] - s[i - 1]);
        let sigma = curve[i - 1].sigma + w * (curve[i].sigma - curve[i - 1].sigma);
        let z = seed.image(sigma, depth);
        lift.push([z[0] + k[0], z[1] + k[1]]);
    }
    let base_index = ts.iter().position(|&t| t == 0.0).expect("0 is on the ladder");
    let self_intersecting = has_self_intersection(&lift);
    Ok(Polyline {
        kind: req.kind,
        base: req.base.clone(),
        lift,
        arclength: ts,
        base_index,
        step: req.step,
        half_length: h,
        tangent,
        self_intersecting,
    })
}

fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(sub(p2, p1), sub(q1, p1));
    let d2 = cross(sub(p2, p1), sub(q2, p1));
    let d3 = cross(sub(q2, q1), sub(p1, q1));
    let d4 = cross(sub(q2, q1), sub(p2, q1));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn has_self_intersection(lift: &[[f64; 2]]) -> bool {
    let segs: Vec<([f64; 2], [f64; 2], [f64; 2])> = lift
        .windows(2)
        .map(|w| (w[0], w[1], [(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0]))
        .collect();
    for i in 0..segs.len() {
        for j in i + 2..segs.len() {
            let (p1, p2, mp) = segs[i];
            let (q1, q2, mq) = segs[j];
            let k = [(mp[0] - mq[0]).round(), (mp[1] - mq[1]).round()];
            let (q1, q2) = ([q1[0] + k[0], q1[1] + k[1]], [q2[0] + k[0], q2[1] + k[1]]);
            if segments_cross(p1, p2, q1, q2) {
                return true;
            }
        }
    }
    false
}

/// Cut a planar polyline where it crosses the integer grid and translate each
/// piece into the unit square.
pub fn wrap_polyline(lift: &[[f64; 2]]) -> Vec<Vec<[f64; 2]>> {
    let mut paths = Vec::new();
    if lift.is_empty() {
        return paths;
    }
    let cell = |p: [f64; 2]| [p[0].floor(), p[1].floor()];
    let mut c = cell(lift[0]);
    let mut cur = vec![sub(lift[0], c)];
    for w in lift.windows(2) {
        let (mut a, b) = (w[0], w[1]);
        loop {
            let mut s_exit = f64::INFINITY;
            let mut moves = [0.0; 2];
            for ax in 0..2 {
                let d = b[ax] - a[ax];
                let (bound, step) = if d > 0.0 && b[ax] >= c[ax] + 1.0 {
                    (c[ax] + 1.0, 1.0)
                } else if d < 0.0 && b[ax] < c[ax] {
                    (c[ax], -1.0)
                } else {
                    continue;
                };
                let s = ((bound - a[ax]) / d).clamp(0.0, 1.0);
                if s < s_exit - 1e-15 {
                    s_exit = s;
                    moves = [0.0; 2];
                    moves[ax] = step;
                } else if (s - s_exit).abs() <= 1e-15 {
                    moves[ax] = step;
                }
            }
            if s_exit.is_infinite() {
                cur.push(sub(b, c));
                break;
            }
            let q = [a[0] + s_exit * (b[0] - a[0]), a[1] + s_exit * (b[1] - a[1])];
            cur.push(sub(q, c));
            paths.push(std::mem::take(&mut cur));
            c = [c[0] + moves[0], c[1] + moves[1]];
            cur.push(sub(q, c));
            a = q;
        }
    }
    paths.push(cur);
    paths.retain(|p| p.len() >= 2);
    paths
}

/// One polyline of a figure, or the reason it could not be grown.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureEntry {
    pub base_index: usize,
    pub kind: ManifoldKind,
    pub polyline: Result<Polyline>,
}

/// Unstable and stable pieces through each base, in input order.
pub fn figure_field<M: TorusMap>(
    map: &M,
    bases: &[TorusPoint],
    half_length: f64,
    step: f64,
    cfg: &SplittingConfig,
) -> Vec<FigureEntry> {
    let jobs: Vec<(usize, ManifoldKind)> = (0..bases.len())
        .flat_map(|i| [(i, ManifoldKind::Unstable), (i, ManifoldKind::Stable)])
        .collect();
    jobs.par_iter()
        .map(|&(i, kind)| FigureEntry {
            base_index: i,
            kind,
            polyline: ManifoldRequest::new(bases[i].clone(), kind, half_length, step)
                .and_then(|req| grow_manifold(map, &req, cfg)),
        })
        .collect()
}

/// `k×k` grid of bases offset by half a cell.
pub fn base_grid(k: usize) -> Vec<TorusPoint> {
    let h = 1.0 / k as f64;
    (0..k)
        .flat_map(|i| (0..k).map(move |j| TorusPoint::xy((i as f64 + 0.5) * h, (j as f64 + 0.5) * h)))
        .collect()
}

pub fn figure_svg(entries: &[FigureEntry]) -> String {
    let mut out = String::new();
    out.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"800\" height=\"800\">\n",
    );
    out.push_str("<rect x=\"0\" y=\"0\" width=\"1\" height=\"1\" fill=\"white\"/>\n");
    for e in entries {
        let Ok(p) = &e.polyline else { continue };
        let _ = writeln!(
            out,
            "<g class=\"{}\" data-base=\"{}\" stroke=\"{}\" stroke-width=\"0.003\" fill=\"none\">",
            e.kind.as_str(),
            e.base_index,
            e.kind.color()
        );
        for seg in p.wrapped_segments() {
            out.push_str("<path d=\"");
            for (k, q) in seg.iter().enumerate() {
                let _ = write!(out, "{}{:.6} {:.6}", if k == 0 { "M" } else { " L" }, q[0], 1.0 - q[1]);
            }
            out.push_str("\"/>\n");
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_figure_csv<W: Write>(entries: &[FigureEntry], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["base_index", "kind", "t", "x", "y"])?;
    for e in entries {
        match &e.polyline {
            Ok(p) => {
                for (t, q) in p.arclength().iter().zip(p.points()) {
                    let c = q.coords();
                    out.write_record(&[
                        e.base_index.to_string(),
                        e.kind.as_str().to_string(),
                        t.to_string(),
                        c[0].to_string(),
                        c[1].to_string(),
                    ])?;
                }
            }
            Err(_) => {
                out.write_record(&[e.base_index.to_string(), "failed".into(), String::new(), String::new(), String::new()])?;
            }
        }
    }
    out.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}
