//! Flow topology on the torus: critical points of the stream function,
//! separatrix tracing, decomposition of the torus into invariant cells,
//! cellular vs open-channel classification, and the graph obtained by
//! collapsing each connected level-set component to a point.

use crate::field::StreamFunction;
use crate::geom::{self, Vec2};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("degenerate critical point near ({0:.6}, {1:.6}): |det Hess| = {2:.3e}")]
    DegenerateCriticalPoint(f64, f64, f64),
    #[error("no critical points found; field has no Morse structure")]
    NoCriticalPoints,
    #[error("separatrix branch from saddle {0} returns to it with zero winding (loop)")]
    LoopSeparatrix(usize),
    #[error("level-curve tracing stalled near ({0:.6}, {1:.6})")]
    TracingStall(f64, f64),
    #[error("inconsistent cell decomposition: {0}")]
    InconsistentDecomposition(String),
}

/// Hard floor on |det Hess| at a converged root; the theory assumes
/// nondegenerate critical points, so borderline inputs are rejected loudly.
pub const DEGENERACY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CriticalKind {
    Saddle,
    Minimum,
    Maximum,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CriticalPoint {
    pub location: Vec2,
    pub kind: CriticalKind,
    pub h_value: f64,
    pub hessian_det: f64,
}

/// Result of the critical-point scan. Seeds where Newton failed to converge
/// are reported, not fatal.
#[derive(Clone, Debug)]
pub struct CriticalScan {
    pub points: Vec<CriticalPoint>,
    pub failed_seeds: Vec<Vec2>,
}

/// One separatrix edge: the piece of a critical level set carried by the
/// flow from `source` to `target`. The polyline is a plane lift starting at
/// the source saddle's torus representative; `winding` is the integer offset
/// of its endpoint from the target's torus representative, so an edge with
/// `source == target` is legal only when `winding != 0` (a channel that
/// closes around the torus). Contractible loops are rejected upstream.
#[derive(Clone, Debug, Serialize)]
pub struct SeparatrixEdge {
    pub source: usize,
    pub target: usize,
    pub level: f64,
    /// Plane-lift polyline; `polyline[0]` is the source saddle.
    pub polyline: Vec<Vec2>,
    /// Cumulative arclength at each polyline vertex.
    pub arclength: Vec<f64>,
    /// Monotone table of theta (d theta = |grad H| d l) at each vertex.
    pub theta: Vec<f64>,
    pub theta_length: f64,
    pub winding: [i32; 2],
    /// Cells on each side of the curve (left = +90 degrees from the flow).
    pub left_cell: usize,
    pub right_cell: usize,
}

impl SeparatrixEdge {
    /// Torus point and tangent direction at a given theta along the edge.
    pub fn point_at_theta(&self, th: f64) -> Vec2 {
        let th = th.clamp(0.0, self.theta_length);
        let i = match self
            .theta
            .binary_search_by(|t| t.partial_cmp(&th).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let i = i.min(self.polyline.len() - 2);
        let span = (self.theta[i + 1] - self.theta[i]).max(f64::MIN_POSITIVE);
        let s = ((th - self.theta[i]) / span).clamp(0.0, 1.0);
        let p = [
            self.polyline[i][0] + s * (self.polyline[i + 1][0] - self.polyline[i][0]),
            self.polyline[i][1] + s * (self.polyline[i + 1][1] - self.polyline[i][1]),
        ];
        geom::wrap(p)
    }

    /// Theta of the polyline vertex nearest to a torus point, refined by
    /// projection onto the adjacent segments.
    pub fn theta_of_point(&self, p: Vec2, hint: usize) -> (f64, f64) {
        // Search around the hint vertex (as returned by the edge locator).
        let lo = hint.saturating_sub(2);
        let hi = (hint + 2).min(self.polyline.len() - 1);
        let mut best = (f64::INFINITY, 0.0);
        for i in lo..hi {
            let a = geom::wrap(self.polyline[i]);
            let seg = geom::torus_delta(a, geom::wrap(self.polyline[i + 1]));
            let d = geom::torus_delta(a, p);
            let len2 = geom::dot(seg, seg).max(f64::MIN_POSITIVE);
            let s = (geom::dot(d, seg) / len2).clamp(0.0, 1.0);
            let closest = [a[0] + s * seg[0], a[1] + s * seg[1]];
            let dist = geom::torus_dist(closest, p);
            if dist < best.0 {
                let th = self.theta[i] + s * (self.theta[i + 1] - self.theta[i]);
                best = (dist, th);
            }
        }
        (best.1, best.0)
    }
}

/// A connected component of the torus minus the separatrix set.
#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub id: usize,
    /// Boundary cycles in flow order (cellular cells have exactly one).
    pub boundary_cycles: Vec<Vec<usize>>,
    /// Cumulative theta offset of each edge inside its cycle.
    pub cycle_theta_offsets: Vec<Vec<f64>>,
    /// Sign of H - (boundary level) in the interior (cellular flows).
    pub interior_sign: i8,
    pub area: f64,
    pub sample_interior_point: Vec2,
    /// Extremal interior H value (at the sample point).
    pub h_extremal: f64,
    /// Distinct critical levels appearing on the boundary.
    pub boundary_levels: Vec<f64>,
    /// Contained extremum (index into critical points), if any.
    pub extremum: Option<usize>,
    /// Net winding of a non-contractible boundary cycle, if any.
    pub winding: [i32; 2],
}

impl Cell {
    /// Total theta length of one full lap of the given boundary cycle.
    pub fn cycle_theta_length(&self, cycle: usize, edges: &[SeparatrixEdge]) -> f64 {
        self.boundary_cycles[cycle]
            .iter()
            .map(|&e| edges[e].theta_length)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum FlowClass {
    Cellular,
    OpenChannels { direction: [i32; 2] },
}

/// A connected component of the separatrix set (saddles plus edges).
#[derive(Clone, Debug, Serialize)]
pub struct SepComponent {
    pub level: f64,
    pub saddles: Vec<usize>,
    pub edges: Vec<usize>,
    /// Winding vectors of independent non-contractible cycles (empty for
    /// contractible components).
    pub windings: Vec<[i32; 2]>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub enum FwVertexKind {
    /// Connected component of a critical level containing saddles.
    Separatrix { component: usize },
    /// An extremum of H (index into critical points).
    Extremum { critical_point: usize },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FwVertex {
    pub kind: FwVertexKind,
    pub level: f64,
}

/// Graph edge: a family of invariant level curves inside one cell,
/// parametrized by H on an open interval.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FwEdge {
    pub cell: usize,
    pub h_lo: f64,
    pub h_hi: f64,
    pub v_lo: usize,
    pub v_hi: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FwGraph {
    pub vertices: Vec<FwVertex>,
    pub edges: Vec<FwEdge>,
}

impl FwGraph {
    pub fn is_connected(&self) -> bool {
        if self.vertices.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.vertices.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for e in &self.edges {
                for (a, b) in [(e.v_lo, e.v_hi), (e.v_hi, e.v_lo)] {
                    if a == v && !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Node-to-cell membership on the offset grid used by the flood fill.
#[derive(Clone, Debug)]
pub struct MembershipGrid {
    pub n: usize,
    pub cell_of_node: Vec<u32>,
}

impl MembershipGrid {
    /// Cell containing a torus point (nearest-node lookup; points within half
    /// a grid spacing of a separatrix may round to the neighbor cell).
    pub fn cell_at(&self, p: Vec2) -> usize {
        let p = geom::wrap(p);
        let i = ((p[0] * self.n as f64 - 0.5).round().rem_euclid(self.n as f64)) as usize
            % self.n;
        let j = ((p[1] * self.n as f64 - 0.5).round().rem_euclid(self.n as f64)) as usize
            % self.n;
        self.cell_of_node[j * self.n + i] as usize
    }
}

/// Spatial index from torus position to nearby (edge, vertex) pairs, used to
/// project separatrix hits onto the edge tables quickly.
#[derive(Clone, Debug)]
pub struct EdgeLocator {
    n: usize,
    buckets: Vec<Vec<(u32, u32)>>,
}

impl EdgeLocator {
    fn build(edges: &[SeparatrixEdge], n: usize) -> Self {
        let mut buckets = vec![Vec::new(); n * n];
        for (ei, e) in edges.iter().enumerate() {
            for (vi, p) in e.polyline.iter().enumerate() {
                let w = geom::wrap(*p);
                let i = (w[0] * n as f64) as usize % n;
                let j = (w[1] * n as f64) as usize % n;
                buckets[j * n + i].push((ei as u32, vi as u32));
            }
        }
        EdgeLocator { n, buckets }
    }

    /// Nearest (edge, theta, distance) to a torus point.
    pub fn nearest(&self, edges: &[SeparatrixEdge], p: Vec2) -> Option<(usize, f64, f64)> {
        let p = geom::wrap(p);
        let n = self.n;
        let ci = (p[0] * n as f64) as usize % n;
        let cj = (p[1] * n as f64) as usize % n;
        let mut best: Option<(usize, usize, f64)> = None;
        for ring in 0..3i64 {
            for dj in -ring..=ring {
                for di in -ring..=ring {
                    if di.abs() != ring && dj.abs() != ring {
                        continue;
                    }
                    let i = (ci as i64 + di).rem_euclid(n as i64) as usize;
                    let j = (cj as i64 + dj).rem_euclid(n as i64) as usize;
                    for &(ei, vi) in &self.buckets[j * n + i] {
                        let q = geom::wrap(edges[ei as usize].polyline[vi as usize]);
                        let d = geom::torus_dist(q, p);
                        if best.map(|b| d < b.2).unwrap_or(true) {
                            best = Some((ei as usize, vi as usize, d));
                        }
                    }
                }
            }
            if best.is_some() && ring >= 1 {
                break;
            }
        }
        best.map(|(ei, vi, _)| {
            let (th, dist) = edges[ei].theta_of_point(p, vi);
            (ei, th, dist)
        })
    }
}

/// Everything the downstream modules need about one flow, immutable after
/// construction.
#[derive(Clone, Debug)]
pub struct FlowTopology {
    pub critical_points: Vec<CriticalPoint>,
    /// Indices of the saddles within `critical_points`.
    pub saddles: Vec<usize>,
    pub edges: Vec<SeparatrixEdge>,
    pub cells: Vec<Cell>,
    pub sep_components: Vec<SepComponent>,
    pub flow_class: FlowClass,
    pub graph: FwGraph,
    pub membership: MembershipGrid,
    pub edge_locator: EdgeLocator,
    pub newton_failures: usize,
}

const NEWTON_GRID_DEFAULT: usize = 64;
const FLOOD_GRID_DEFAULT: usize = 512;
/// Offset of the separatrix launch point along the level-curve tangent
/// directions at the saddle (the level set is singular exactly there).
const SADDLE_LAUNCH_OFFSET: f64 = 1e-6;
const SADDLE_CAPTURE_RADIUS: f64 = 1e-3;

impl FlowTopology {
    pub fn build(f: &StreamFunction) -> Result<Self, TopologyError> {
        Self::build_with(f, NEWTON_GRID_DEFAULT, FLOOD_GRID_DEFAULT)
    }

    pub fn build_with(
        f: &StreamFunction,
        newton_grid: usize,
        flood_grid: usize,
    ) -> Result<Self, TopologyError> {
        let scan = find_critical_points(f, newton_grid)?;
        let edges = trace_separatrices(f, &scan.points)?;
        let (mut cells, membership) = build_cells(f, &scan.points, &edges, flood_grid)?;
        let mut edges = edges;
        assign_edge_sides(f, &mut edges, &membership);
        build_boundary_cycles(&mut cells, &edges, &membership)?;
        let sep_components = sep_components(&scan.points, &edges);
        let flow_class = classify(&cells);
        let graph = build_fw_graph(&scan.points, &edges, &cells, &sep_components)?;
        let edge_locator = EdgeLocator::build(&edges, 128);
        let saddles = scan
            .points
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == CriticalKind::Saddle)
            .map(|(i, _)| i)
            .collect();
        Ok(FlowTopology {
            critical_points: scan.points,
            saddles,
            edges,
            cells,
            sep_components,
            flow_class,
            graph,
            membership,
            edge_locator,
            newton_failures: scan.failed_seeds.len(),
        })
    }

    /// All saddles lie on a single critical level (the cellular chain
    /// requires this); returns that level.
    pub fn common_saddle_level(&self) -> Option<f64> {
        let mut lv: Option<f64> = None;
        for &s in &self.saddles {
            let h = self.critical_points[s].h_value;
            match lv {
                None => lv = Some(h),
                Some(l) if (l - h).abs() < 1e-6 => {}
                Some(_) => return None,
            }
        }
        lv
    }

    /// JSON export of the decomposition (vertices, edges, cells, polylines).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "critical_points": self.critical_points,
            "edges": self.edges.iter().map(|e| serde_json::json!({
                "source": e.source,
                "target": e.target,
                "level": e.level,
                "theta_length": e.theta_length,
                "winding": e.winding,
                "left_cell": e.left_cell,
                "right_cell": e.right_cell,
                "polyline": decimate(&e.polyline, 200),
            })).collect::<Vec<_>>(),
            "cells": self.cells,
            "flow_class": self.flow_class,
            "graph": self.graph,
        })
    }
}

fn decimate(poly: &[Vec2], max_pts: usize) -> Vec<Vec2> {
    if poly.len() <= max_pts {
        return poly.to_vec();
    }
    let stride = poly.len() / max_pts + 1;
    let mut out: Vec<Vec2> = poly.iter().step_by(stride).copied().collect();
    if *out.last().unwrap() != *poly.last().unwrap() {
        out.push(*poly.last().unwrap());
    }
    out
}

// ---------------------------------------------------------------------------
// Critical points
// ---------------------------------------------------------------------------

/// Newton iteration on `grad H = 0` seeded from every grid cell where both
/// gradient components change sign (or vanish). Roots are deduplicated,
/// classified by the Hessian, and sorted deterministically.
pub fn find_critical_points(
    f: &StreamFunction,
    grid_n: usize,
) -> Result<CriticalScan, TopologyError> {
    assert!(grid_n >= 32, "grid_n must be at least 32");
    let n = grid_n;
    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let g = f.evaluate([i as f64 / n as f64, j as f64 / n as f64]).grad;
            gx[j * n + i] = g[0];
            gy[j * n + i] = g[1];
        }
    }
    let grad_scale = f.speed_bound();
    let zero_tol = 1e-9 * grad_scale;

    // Degenerate critical sets (lines of critical points) often pass through
    // grid nodes; reject them before Newton, which cannot converge there.
    for j in 0..n {
        for i in 0..n {
            if gx[j * n + i].abs() < zero_tol && gy[j * n + i].abs() < zero_tol {
                let x = [i as f64 / n as f64, j as f64 / n as f64];
                let h = f.evaluate(x).hessian;
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                if det.abs() < DEGENERACY_TOL {
                    return Err(TopologyError::DegenerateCriticalPoint(x[0], x[1], det.abs()));
                }
            }
        }
    }

    let sign_change = |vals: [f64; 4]| -> bool {
        let mut has_pos = false;
        let mut has_neg = false;
        let mut has_zero = false;
        for v in vals {
            if v > zero_tol {
                has_pos = true;
            } else if v < -zero_tol {
                has_neg = true;
            } else {
                has_zero = true;
            }
        }
        (has_pos && has_neg) || has_zero
    };

    let mut points: Vec<CriticalPoint> = Vec::new();
    let mut failed: Vec<Vec2> = Vec::new();
    let mut degenerate: Option<(Vec2, f64)> = None;

    for j in 0..n {
        for i in 0..n {
            let i1 = (i + 1) % n;
            let j1 = (j + 1) % n;
            let corners = [j * n + i, j * n + i1, j1 * n + i, j1 * n + i1];
            let cx = corners.map(|c| gx[c]);
            let cy = corners.map(|c| gy[c]);
            if !(sign_change(cx) && sign_change(cy)) {
                continue;
            }
            let seed = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64];
            match newton_root(f, seed, 1.5 / n as f64) {
                NewtonOutcome::Root(x) => {
                    let e = f.evaluate(x);
                    let det = e.hessian[0][0] * e.hessian[1][1] - e.hessian[0][1] * e.hessian[0][1];
                    if points
                        .iter()
                        .any(|p| geom::torus_dist(p.location, x) < 1e-8)
                    {
                        continue;
                    }
                    if det.abs() < DEGENERACY_TOL {
                        degenerate = Some((x, det.abs()));
                        continue;
                    }
                    let kind = if det < 0.0 {
                        CriticalKind::Saddle
                    } else if e.hessian[0][0] + e.hessian[1][1] < 0.0 {
                        CriticalKind::Maximum
                    } else {
                        CriticalKind::Minimum
                    };
                    points.push(CriticalPoint {
                        location: x,
                        kind,
                        h_value: e.h,
                        hessian_det: det,
                    });
                }
                NewtonOutcome::Failed => failed.push(seed),
            }
        }
    }

    if let Some((x, det)) = degenerate {
        return Err(TopologyError::DegenerateCriticalPoint(x[0], x[1], det));
    }
    if points.is_empty() {
        return Err(TopologyError::NoCriticalPoints);
    }
    points.sort_by(|a, b| {
        let ka = (quantize(a.location[0]), quantize(a.location[1]));
        let kb = (quantize(b.location[0]), quantize(b.location[1]));
        ka.cmp(&kb)
    });
    Ok(CriticalScan { points, failed_seeds: failed })
}

fn quantize(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

enum NewtonOutcome {
    Root(Vec2),
    Failed,
}

fn newton_root(f: &StreamFunction, seed: Vec2, step_clamp: f64) -> NewtonOutcome {
    let mut x = seed;
    let tol = 1e-12 * f.speed_bound().max(1.0);
    for _ in 0..60 {
        let e = f.evaluate(x);
        let g = e.grad;
        if geom::norm(g) < tol {
            return NewtonOutcome::Root(geom::wrap(x));
        }
        let h = e.hessian;
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if det.abs() < 1e-14 * f.hessian_bound().powi(2) {
            return NewtonOutcome::Failed;
        }
        let mut dx = [
            -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
            -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
        ];
        let nl = geom::norm(dx);
        if nl > step_clamp {
            dx = geom::scale(dx, step_clamp / nl);
        }
        x = geom::wrap(geom::add(x, dx));
    }
    // One last check: Newton may oscillate within rounding of a root.
    let g = f.evaluate(x).grad;
    if geom::norm(g) < 1e-9 * f.speed_bound().max(1.0) {
        NewtonOutcome::Root(geom::wrap(x))
    } else {
        NewtonOutcome::Failed
    }
}

// ---------------------------------------------------------------------------
// Separatrix tracing
// ---------------------------------------------------------------------------

/// Null directions of the Hessian quadratic form at a saddle: the tangents of
/// the two level-curve branches through it.
fn saddle_null_directions(hess: [[f64; 2]; 2]) -> [Vec2; 2] {
    let (a, b, c) = (hess[0][0], hess[0][1], hess[1][1]);
    let scale = a.abs().max(b.abs()).max(c.abs());
    let disc = (b * b - a * c).max(0.0).sqrt();
    if a.abs().max(c.abs()) < 1e-12 * scale {
        // Pure cross term 2 b x y: the branches follow the axes.
        return [[1.0, 0.0], [0.0, 1.0]];
    }
    if c.abs() >= a.abs() {
        // direction (1, t) with c t^2 + 2 b t + a = 0
        let t1 = (-b + disc) / c;
        let t2 = (-b - disc) / c;
        [geom::normalize([1.0, t1]), geom::normalize([1.0, t2])]
    } else {
        // direction (u, 1) with a u^2 + 2 b u + c = 0
        let u1 = (-b + disc) / a;
        let u2 = (-b - disc) / a;
        [geom::normalize([u1, 1.0]), geom::normalize([u2, 1.0])]
    }
}

/// Trace the four level-set branches of every saddle along the flow
/// direction; each outgoing branch is followed by predictor-corrector level
/// tracing until it reaches a saddle on the same level, which yields one
/// directed edge. Branches that come back to their own saddle with zero
/// winding violate the no-loops assumption and are rejected.
pub fn trace_separatrices(
    f: &StreamFunction,
    cps: &[CriticalPoint],
) -> Result<Vec<SeparatrixEdge>, TopologyError> {
    let saddle_ids: Vec<usize> = cps
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == CriticalKind::Saddle)
        .map(|(i, _)| i)
        .collect();
    let mut edges = Vec::new();
    for &si in &saddle_ids {
        let cp = &cps[si];
        let hess = f.evaluate(cp.location).hessian;
        let dirs = saddle_null_directions(hess);
        let mut launches: Vec<Vec2> = Vec::new();
        for d in dirs {
            launches.push(d);
            launches.push([-d[0], -d[1]]);
        }
        // Deterministic launch order by angle.
        launches.sort_by(|p, q| {
            p[1].atan2(p[0])
                .partial_cmp(&q[1].atan2(q[0]))
                .unwrap()
        });
        for d in launches {
            let p0 = geom::add(cp.location, geom::scale(d, SADDLE_LAUNCH_OFFSET));
            let v0 = f.velocity(p0);
            if geom::dot(v0, d) <= 0.0 {
                continue; // stable branch; discovered from its own source
            }
            let edge = trace_branch(f, cps, si, p0, cp.h_value)?;
            if edge.source == edge.target && edge.winding == [0, 0] {
                return Err(TopologyError::LoopSeparatrix(si));
            }
            edges.push(edge);
        }
    }
    Ok(edges)
}

fn trace_branch(
    f: &StreamFunction,
    cps: &[CriticalPoint],
    source: usize,
    p0: Vec2,
    level: f64,
) -> Result<SeparatrixEdge, TopologyError> {
    let start = cps[source].location;
    let hess_bound = f.hessian_bound();
    let level_tol = 1e-10 * f.speed_bound().max(1.0);

    // Saddles on this level, as capture targets.
    let targets: Vec<(usize, Vec2)> = cps
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == CriticalKind::Saddle && (c.h_value - level).abs() < 1e-7)
        .map(|(i, c)| (i, c.location))
        .collect();

    let mut poly: Vec<Vec2> = vec![start, p0];
    let mut arc: Vec<f64> = vec![0.0, geom::norm(geom::sub(p0, start))];
    let mut theta: Vec<f64> = vec![0.0, {
        let g = geom::norm(f.grad(p0));
        0.5 * g * geom::norm(geom::sub(p0, start))
    }];
    let mut x = p0; // plane coordinates
    let mut grad_prev = geom::norm(f.grad(p0));

    let max_steps = 3_000_000usize;
    for _ in 0..max_steps {
        let e = f.evaluate(x);
        let gn = geom::norm(e.grad);
        // Adaptive step: resolve both the curve curvature and the gradient
        // scale near saddles. ds <= |grad|/hess keeps relative |grad| change
        // per step bounded.
        let ds = (0.35 * gn / hess_bound).clamp(1e-7, 1.5e-3);
        let tang = geom::normalize(e.v);
        let mut xn = geom::add(x, geom::scale(tang, ds));
        // Newton projection back onto the level.
        let mut stalled = true;
        for _ in 0..6 {
            let en = f.evaluate(xn);
            let err = en.h - level;
            let g2 = geom::dot(en.grad, en.grad).max(f64::MIN_POSITIVE);
            xn = geom::sub(xn, geom::scale(en.grad, err / g2));
            if (f.evaluate(xn).h - level).abs() < level_tol {
                stalled = false;
                break;
            }
        }
        if stalled {
            return Err(TopologyError::TracingStall(x[0], x[1]));
        }
        let seg = geom::norm(geom::sub(xn, x));
        let gn_new = geom::norm(f.grad(xn));
        arc.push(arc.last().unwrap() + seg);
        theta.push(theta.last().unwrap() + 0.5 * (grad_prev + gn_new) * seg);
        poly.push(xn);
        grad_prev = gn_new;
        x = xn;

        // Capture once clearly away from the launch point.
        if *arc.last().unwrap() > 5e-3 {
            for &(ti, tloc) in &targets {
                let d = geom::torus_dist(geom::wrap(x), tloc);
                if d < SADDLE_CAPTURE_RADIUS {
                    // Snap the endpoint to the nearest plane copy of the
                    // target saddle.
                    let raw = geom::sub(x, tloc);
                    let w = [raw[0].round(), raw[1].round()];
                    let end = geom::add(tloc, w);
                    let seg = geom::norm(geom::sub(end, x));
                    arc.push(arc.last().unwrap() + seg);
                    theta.push(theta.last().unwrap() + 0.5 * grad_prev * seg);
                    poly.push(end);
                    let theta_length = *theta.last().unwrap();
                    return Ok(SeparatrixEdge {
                        source,
                        target: ti,
                        level,
                        polyline: poly,
                        arclength: arc,
                        theta,
                        theta_length,
                        winding: [w[0] as i32, w[1] as i32],
                        left_cell: usize::MAX,
                        right_cell: usize::MAX,
                    });
                }
            }
        }
    }
    Err(TopologyError::TracingStall(x[0], x[1]))
}

// ---------------------------------------------------------------------------
// Cell decomposition
// ---------------------------------------------------------------------------

struct SegmentIndex {
    n: usize,
    buckets: Vec<Vec<(Vec2, Vec2)>>,
}

impl SegmentIndex {
    fn build(edges: &[SeparatrixEdge], n: usize) -> Self {
        let mut buckets: Vec<Vec<(Vec2, Vec2)>> = vec![Vec::new(); n * n];
        let mut insert = |a: Vec2, b: Vec2| {
            let min = [a[0].min(b[0]), a[1].min(b[1])];
            let max = [a[0].max(b[0]), a[1].max(b[1])];
            let lo = [
                (min[0] * n as f64).floor() as i64 - 1,
                (min[1] * n as f64).floor() as i64 - 1,
            ];
            let hi = [
                (max[0] * n as f64).floor() as i64 + 1,
                (max[1] * n as f64).floor() as i64 + 1,
            ];
            for bj in lo[1]..=hi[1] {
                if bj < 0 || bj >= n as i64 {
                    continue;
                }
                for bi in lo[0]..=hi[0] {
                    if bi < 0 || bi >= n as i64 {
                        continue;
                    }
                    buckets[(bj as usize) * n + bi as usize].push((a, b));
                }
            }
        };
        for e in edges {
            for s in e.polyline.windows(2) {
                let (a, b) = (s[0], s[1]);
                // Anchor near the torus and add the translates that can touch
                // the fundamental domain.
                let base = [a[0].floor(), a[1].floor()];
                let a0 = geom::sub(a, base);
                let b0 = geom::sub(b, base);
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        let off = [dx as f64, dy as f64];
                        let at = geom::add(a0, off);
                        let bt = geom::add(b0, off);
                        let minx = at[0].min(bt[0]);
                        let maxx = at[0].max(bt[0]);
                        let miny = at[1].min(bt[1]);
                        let maxy = at[1].max(bt[1]);
                        if maxx < -0.02 || minx > 1.02 || maxy < -0.02 || miny > 1.02 {
                            continue;
                        }
                        insert(at, bt);
                    }
                }
            }
        }
        SegmentIndex { n, buckets }
    }

    /// Does the short segment p-q (length ~ 1/grid) cross any separatrix?
    fn crosses(&self, p: Vec2, q: Vec2) -> bool {
        let n = self.n;
        let mid = [(p[0] + q[0]) * 0.5, (p[1] + q[1]) * 0.5];
        let ci = (mid[0] * n as f64).floor() as i64;
        let cj = (mid[1] * n as f64).floor() as i64;
        for dj in -1..=1i64 {
            for di in -1..=1i64 {
                let i = ci + di;
                let j = cj + dj;
                if i < 0 || i >= n as i64 || j < 0 || j >= n as i64 {
                    continue;
                }
                for &(a, b) in &self.buckets[(j as usize) * n + i as usize] {
                    if geom::segments_cross(p, q, a, b) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n as u32).collect() }
    }
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let g = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = g;
            x = g;
        }
        x
    }
    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra.max(rb) as usize] = ra.min(rb);
        }
    }
}

/// Flood fill of the torus minus the separatrix set on an offset grid:
/// adjacent nodes are joined unless the segment between them crosses a
/// separatrix polyline, so every node lands in exactly one component and the
/// areas sum to one by construction.
pub fn build_cells(
    f: &StreamFunction,
    cps: &[CriticalPoint],
    edges: &[SeparatrixEdge],
    grid_n: usize,
) -> Result<(Vec<Cell>, MembershipGrid), TopologyError> {
    let n = grid_n;
    let index = SegmentIndex::build(edges, (n / 2).max(64));
    let node = |i: usize, j: usize| -> Vec2 {
        [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]
    };
    let mut uf = UnionFind::new(n * n);
    for j in 0..n {
        for i in 0..n {
            let p = node(i, j);
            // Right neighbor (may stick out past 1; the segment index holds
            // translated copies out to 1.02).
            let qa = [p[0] + 1.0 / n as f64, p[1]];
            if !index.crosses(p, qa) {
                uf.union((j * n + i) as u32, (j * n + (i + 1) % n) as u32);
            }
            let qb = [p[0], p[1] + 1.0 / n as f64];
            if !index.crosses(p, qb) {
                uf.union((j * n + i) as u32, (((j + 1) % n) * n + i) as u32);
            }
        }
    }
    // Relabel components deterministically by their smallest node index.
    let mut label = vec![u32::MAX; n * n];
    let mut order: Vec<u32> = Vec::new();
    for idx in 0..(n * n) as u32 {
        let r = uf.find(idx);
        if label[r as usize] == u32::MAX {
            label[r as usize] = order.len() as u32;
            order.push(r);
        }
    }
    let mut cell_of_node = vec![0u32; n * n];
    let mut counts = vec![0usize; order.len()];
    for idx in 0..n * n {
        let c = label[uf.find(idx as u32) as usize];
        cell_of_node[idx] = c;
        counts[c as usize] += 1;
    }
    let k = order.len();
    if k < 2 {
        return Err(TopologyError::InconsistentDecomposition(format!(
            "flood fill found {k} component(s)"
        )));
    }

    // Boundary levels per component come later (needs edge sides); here we
    // compute geometry: areas, sample points, H ranges.
    let levels: Vec<f64> = edges.iter().map(|e| e.level).collect();
    let mut best_score = vec![-1.0f64; k];
    let mut sample = vec![[0.0, 0.0]; k];
    let mut h_ext = vec![0.0f64; k];
    for j in 0..n {
        for i in 0..n {
            let c = cell_of_node[j * n + i] as usize;
            let p = node(i, j);
            let h = f.h(p);
            let score = levels
                .iter()
                .map(|l| (h - l).abs())
                .fold(f64::INFINITY, f64::min);
            if score > best_score[c] {
                best_score[c] = score;
                sample[c] = p;
                h_ext[c] = h;
            }
        }
    }

    // Contained extrema.
    let membership = MembershipGrid { n, cell_of_node };
    let mut extremum: Vec<Option<usize>> = vec![None; k];
    for (ci, cp) in cps.iter().enumerate() {
        if cp.kind == CriticalKind::Saddle {
            continue;
        }
        let c = membership.cell_at(cp.location);
        if let Some(prev) = extremum[c] {
            return Err(TopologyError::InconsistentDecomposition(format!(
                "cell {c} contains extrema {prev} and {ci}"
            )));
        }
        extremum[c] = Some(ci);
    }

    let total: usize = counts.iter().sum();
    if (total as f64 / (n * n) as f64 - 1.0).abs() > 1e-3 {
        return Err(TopologyError::InconsistentDecomposition(
            "areas do not sum to the torus area".into(),
        ));
    }

    let cells = (0..k)
        .map(|c| Cell {
            id: c,
            boundary_cycles: Vec::new(),
            cycle_theta_offsets: Vec::new(),
            interior_sign: 0,
            area: counts[c] as f64 / (n * n) as f64,
            sample_interior_point: sample[c],
            h_extremal: h_ext[c],
            boundary_levels: Vec::new(),
            extremum: extremum[c],
            winding: [0, 0],
        })
        .collect();
    Ok((cells, membership))
}

/// Fill in the left/right cell of each edge by sampling just off the curve.
fn assign_edge_sides(
    _f: &StreamFunction,
    edges: &mut [SeparatrixEdge],
    membership: &MembershipGrid,
) {
    let delta = 1.5 / membership.n as f64;
    for e in edges.iter_mut() {
        let mut votes_left: std::collections::HashMap<usize, usize> = Default::default();
        let mut votes_right: std::collections::HashMap<usize, usize> = Default::default();
        let m = e.polyline.len();
        let samples = 24.min(m - 1);
        for s in 0..samples {
            // Stay away from the saddle endpoints where quadrants meet.
            let idx = ((s as f64 + 0.5) / samples as f64 * (m - 1) as f64) as usize;
            let idx = idx.clamp(1, m - 2);
            let tang = geom::normalize(geom::sub(e.polyline[idx + 1], e.polyline[idx - 1]));
            let nrm = geom::perp(tang);
            let p = e.polyline[idx];
            let l = membership.cell_at(geom::add(p, geom::scale(nrm, delta)));
            let r = membership.cell_at(geom::sub(p, geom::scale(nrm, delta)));
            *votes_left.entry(l).or_default() += 1;
            *votes_right.entry(r).or_default() += 1;
        }
        let top = |v: &std::collections::HashMap<usize, usize>| {
            v.iter().max_by_key(|(c, n)| (**n, usize::MAX - **c)).map(|(c, _)| *c).unwrap_or(usize::MAX)
        };
        e.left_cell = top(&votes_left);
        e.right_cell = top(&votes_right);
    }
}

/// Order each cell's boundary edges into flow-directed cycles. Both adjacent
/// cells traverse a separatrix edge in the same (flow) direction, so each
/// directed edge appears in exactly two cycles.
fn build_boundary_cycles(
    cells: &mut [Cell],
    edges: &[SeparatrixEdge],
    membership: &MembershipGrid,
) -> Result<(), TopologyError> {
    let delta = 3.0 / membership.n as f64;
    for cell in cells.iter_mut() {
        let mine: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.left_cell == cell.id || e.right_cell == cell.id)
            .map(|(i, _)| i)
            .collect();
        if mine.is_empty() {
            return Err(TopologyError::InconsistentDecomposition(format!(
                "cell {} has no boundary edges",
                cell.id
            )));
        }
        let mut remaining: Vec<usize> = mine.clone();
        let mut cycles: Vec<Vec<usize>> = Vec::new();
        while let Some(&start) = remaining.first() {
            let mut cycle = vec![start];
            remaining.retain(|&e| e != start);
            let mut cur = start;
            loop {
                let tgt = edges[cur].target;
                // Candidates: boundary edges of this cell leaving the target
                // saddle.
                let cands: Vec<usize> = mine
                    .iter()
                    .copied()
                    .filter(|&e| edges[e].source == tgt)
                    .collect();
                let next = match cands.len() {
                    0 => {
                        return Err(TopologyError::InconsistentDecomposition(format!(
                            "cell {}: no outgoing boundary edge at saddle {tgt}",
                            cell.id
                        )))
                    }
                    1 => cands[0],
                    _ => {
                        // Corner disambiguation: the turn through the cell
                        // interior picks the true successor.
                        let m_in = edges[cur].polyline.len();
                        let p_in = geom::wrap(edges[cur].polyline[m_in.saturating_sub(2).max(1) - 0]);
                        let a = geom::wrap(*edges[cur].polyline.last().unwrap());
                        let dir_in = geom::normalize(geom::torus_delta(a, p_in));
                        let mut pick = None;
                        for &cand in &cands {
                            let p_out = geom::wrap(edges[cand].polyline[1.min(edges[cand].polyline.len() - 1)]);
                            let dir_out = geom::normalize(geom::torus_delta(a, p_out));
                            let bis = geom::normalize(geom::add(dir_in, dir_out));
                            let probe = geom::wrap(geom::add(a, geom::scale(bis, delta)));
                            if membership.cell_at(probe) == cell.id {
                                pick = Some(cand);
                                break;
                            }
                        }
                        pick.ok_or_else(|| {
                            TopologyError::InconsistentDecomposition(format!(
                                "cell {}: ambiguous corner at saddle {tgt}",
                                cell.id
                            ))
                        })?
                    }
                };
                if next == start {
                    break;
                }
                if !remaining.contains(&next) {
                    return Err(TopologyError::InconsistentDecomposition(format!(
                        "cell {}: boundary walk revisited edge {next}",
                        cell.id
                    )));
                }
                remaining.retain(|&e| e != next);
                cycle.push(next);
                cur = next;
            }
            cycles.push(cycle);
        }

        // Theta offsets and net winding per cycle.
        let mut offsets = Vec::new();
        let mut winding = [0i32, 0i32];
        for cyc in &cycles {
            let mut off = Vec::with_capacity(cyc.len());
            let mut acc = 0.0;
            let mut w = [0i32, 0i32];
            for &e in cyc {
                off.push(acc);
                acc += edges[e].theta_length;
                w[0] += edges[e].winding[0];
                w[1] += edges[e].winding[1];
            }
            if w != [0, 0] && winding == [0, 0] {
                winding = w;
            }
            offsets.push(off);
        }
        cell.boundary_cycles = cycles;
        cell.cycle_theta_offsets = offsets;
        cell.winding = winding;

        // Boundary levels and interior sign.
        let mut levels: Vec<f64> = mine.iter().map(|&e| edges[e].level).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup_by(|a, b| (*a - *b).abs() < 1e-7);
        cell.boundary_levels = levels;
        let nearest = cell
            .boundary_levels
            .iter()
            .copied()
            .min_by(|a, b| {
                (cell.h_extremal - a)
                    .abs()
                    .partial_cmp(&(cell.h_extremal - b).abs())
                    .unwrap()
            })
            .unwrap_or(0.0);
        cell.interior_sign = if cell.h_extremal >= nearest { 1 } else { -1 };
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Separatrix components, classification, graph
// ---------------------------------------------------------------------------

pub fn sep_components(cps: &[CriticalPoint], edges: &[SeparatrixEdge]) -> Vec<SepComponent> {
    let ns = cps.len();
    let mut uf = UnionFind::new(ns);
    for e in edges {
        uf.union(e.source as u32, e.target as u32);
    }
    let mut comp_of: std::collections::BTreeMap<u32, usize> = Default::default();
    let mut comps: Vec<SepComponent> = Vec::new();
    for (i, cp) in cps.iter().enumerate() {
        if cp.kind != CriticalKind::Saddle {
            continue;
        }
        let r = uf.find(i as u32);
        let id = *comp_of.entry(r).or_insert_with(|| {
            comps.push(SepComponent {
                level: cp.h_value,
                saddles: Vec::new(),
                edges: Vec::new(),
                windings: Vec::new(),
            });
            comps.len() - 1
        });
        comps[id].saddles.push(i);
    }
    for (ei, e) in edges.iter().enumerate() {
        let r = uf.find(e.source as u32);
        if let Some(&id) = comp_of.get(&r) {
            comps[id].edges.push(ei);
        }
    }
    // Winding of each component via a spanning-tree lift of its saddles.
    for comp in comps.iter_mut() {
        let mut lift: std::collections::BTreeMap<usize, [i32; 2]> = Default::default();
        if let Some(&root) = comp.saddles.first() {
            lift.insert(root, [0, 0]);
        }
        let mut changed = true;
        while changed {
            changed = false;
            for &ei in &comp.edges {
                let e = &edges[ei];
                if let Some(&ls) = lift.get(&e.source) {
                    let cand = [ls[0] + e.winding[0], ls[1] + e.winding[1]];
                    match lift.get(&e.target) {
                        None => {
                            lift.insert(e.target, cand);
                            changed = true;
                        }
                        Some(&lt) => {
                            let mismatch = [cand[0] - lt[0], cand[1] - lt[1]];
                            if mismatch != [0, 0]
                                && !comp.windings.contains(&mismatch)
                                && !comp.windings.contains(&[-mismatch[0], -mismatch[1]])
                            {
                                comp.windings.push(mismatch);
                            }
                        }
                    }
                }
            }
        }
    }
    comps
}

/// A flow is cellular when every component of the complement of the
/// separatrix set is bounded once unfolded to the plane, i.e. no cell winds
/// around the torus. A winding cell is an open channel along which solutions
/// of `x' = v(x)` go off to infinity; its winding vector is the channel
/// direction. (The cellular separatrix lattice itself is non-contractible --
/// it winds in both directions -- so the class is decided by the cells, not
/// by the critical level components.)
pub fn classify(cells: &[Cell]) -> FlowClass {
    for c in cells {
        let w = c.winding;
        if w != [0, 0] {
            let g = gcd(w[0].unsigned_abs(), w[1].unsigned_abs()).max(1) as i32;
            let mut dir = [w[0] / g, w[1] / g];
            if dir[0] < 0 || (dir[0] == 0 && dir[1] < 0) {
                dir = [-dir[0], -dir[1]];
            }
            return FlowClass::OpenChannels { direction: dir };
        }
    }
    FlowClass::Cellular
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One vertex per connected critical-level component (separatrix components
/// and extrema), one edge per cell spanning its open H interval.
pub fn build_fw_graph(
    cps: &[CriticalPoint],
    _edges: &[SeparatrixEdge],
    cells: &[Cell],
    comps: &[SepComponent],
) -> Result<FwGraph, TopologyError> {
    let mut vertices = Vec::new();
    let mut comp_vertex = vec![usize::MAX; comps.len()];
    for (i, c) in comps.iter().enumerate() {
        comp_vertex[i] = vertices.len();
        vertices.push(FwVertex { kind: FwVertexKind::Separatrix { component: i }, level: c.level });
    }
    let mut ext_vertex: std::collections::BTreeMap<usize, usize> = Default::default();
    for (i, cp) in cps.iter().enumerate() {
        if cp.kind != CriticalKind::Saddle {
            ext_vertex.insert(i, vertices.len());
            vertices.push(FwVertex {
                kind: FwVertexKind::Extremum { critical_point: i },
                level: cp.h_value,
            });
        }
    }
    let comp_of_edge = |ei: usize| -> usize {
        comps
            .iter()
            .position(|c| c.edges.contains(&ei))
            .expect("edge belongs to a component")
    };

    let mut g_edges = Vec::new();
    for cell in cells {
        // Anchors: (level, vertex) per boundary cycle plus the contained
        // extremum.
        let mut anchors: Vec<(f64, usize)> = Vec::new();
        for cyc in &cell.boundary_cycles {
            let comp = comp_of_edge(cyc[0]);
            let v = comp_vertex[comp];
            if !anchors.iter().any(|a| a.1 == v) {
                anchors.push((comps[comp].level, v));
            }
        }
        if let Some(ext) = cell.extremum {
            anchors.push((cps[ext].h_value, ext_vertex[&ext]));
        }
        if anchors.len() < 2 {
            return Err(TopologyError::InconsistentDecomposition(format!(
                "cell {} touches fewer than two critical values",
                cell.id
            )));
        }
        anchors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (h_lo, v_lo) = *anchors.first().unwrap();
        let (h_hi, v_hi) = *anchors.last().unwrap();
        if !(h_hi > h_lo) {
            return Err(TopologyError::InconsistentDecomposition(format!(
                "cell {} has an empty H interval",
                cell.id
            )));
        }
        g_edges.push(FwEdge { cell: cell.id, h_lo, h_hi, v_lo, v_hi });
    }
    Ok(FwGraph { vertices, edges: g_edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Preset;

    fn cellular() -> StreamFunction {
        StreamFunction::preset(Preset::CellularSine)
    }

    fn channel() -> StreamFunction {
        StreamFunction::preset(Preset::OpenChannel)
    }

    #[test]
    fn critical_points_cellular() {
        let scan = find_critical_points(&cellular(), 64).unwrap();
        assert_eq!(scan.points.len(), 8);
        let saddles: Vec<_> = scan
            .points
            .iter()
            .filter(|p| p.kind == CriticalKind::Saddle)
            .collect();
        let maxima: Vec<_> = scan
            .points
            .iter()
            .filter(|p| p.kind == CriticalKind::Maximum)
            .collect();
        let minima: Vec<_> = scan
            .points
            .iter()
            .filter(|p| p.kind == CriticalKind::Minimum)
            .collect();
        assert_eq!(saddles.len(), 4);
        assert_eq!(maxima.len(), 2);
        assert_eq!(minima.len(), 2);
        for s in &saddles {
            assert!(s.h_value.abs() < 1e-9);
            // Saddles sit on the half-integer lattice.
            for c in s.location {
                let d = (c * 2.0 - (c * 2.0).round()).abs();
                assert!(d < 1e-8, "saddle coordinate {c}");
            }
        }
        for m in &maxima {
            assert!((m.h_value - 1.0).abs() < 1e-9);
        }
        for m in &minima {
            assert!((m.h_value + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn critical_points_channel() {
        let scan = find_critical_points(&channel(), 64).unwrap();
        assert_eq!(scan.points.len(), 4);
        let mut by_kind: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
        for p in &scan.points {
            let k = match p.kind {
                CriticalKind::Saddle => "saddle",
                CriticalKind::Maximum => "max",
                CriticalKind::Minimum => "min",
            };
            by_kind.entry(k).or_default().push(p.h_value);
        }
        assert_eq!(by_kind["max"], vec![11.0].iter().map(|x| {
            let got = by_kind["max"][0];
            assert!((got - x).abs() < 1e-9);
            got
        }).collect::<Vec<_>>());
        assert!((by_kind["min"][0] + 11.0).abs() < 1e-9);
        let mut sad = by_kind["saddle"].clone();
        sad.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((sad[0] + 9.0).abs() < 1e-9);
        assert!((sad[1] - 9.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_shear_rejected() {
        // H = sin(2 pi x2): the critical set is two circles, det Hess = 0.
        let f = StreamFunction::parse("0 1 0 1").unwrap();
        match find_critical_points(&f, 64) {
            Err(TopologyError::DegenerateCriticalPoint(..)) => {}
            other => panic!("expected degenerate rejection, got {other:?}"),
        }
    }

    #[test]
    fn separatrices_cellular() {
        let f = cellular();
        let scan = find_critical_points(&f, 64).unwrap();
        let edges = trace_separatrices(&f, &scan.points).unwrap();
        assert_eq!(edges.len(), 8);
        for e in &edges {
            assert!((e.theta_length - 2.0).abs() < 2e-3, "theta len {}", e.theta_length);
            assert!(e.level.abs() < 1e-9);
            // Grid-line edges: one coordinate stays on the half-integer grid.
            let fixed_x = e
                .polyline
                .iter()
                .all(|p| ((p[0] * 2.0) - (p[0] * 2.0).round()).abs() < 1e-6);
            let fixed_y = e
                .polyline
                .iter()
                .all(|p| ((p[1] * 2.0) - (p[1] * 2.0).round()).abs() < 1e-6);
            assert!(fixed_x || fixed_y, "edge should follow a grid line");
            // theta table strictly increasing.
            for w in e.theta.windows(2) {
                assert!(w[1] >= w[0]);
            }
            // |grad H| > 0 except near the ends.
            for (i, p) in e.polyline.iter().enumerate() {
                let arc = e.arclength[i];
                let from_ends = arc.min(e.arclength.last().unwrap() - arc);
                if from_ends > 5e-3 {
                    assert!(geom::norm(f.grad(*p)) > 1e-4);
                }
            }
        }
    }

    #[test]
    fn separatrices_channel_wind() {
        let f = channel();
        let scan = find_critical_points(&f, 64).unwrap();
        let edges = trace_separatrices(&f, &scan.points).unwrap();
        // Two saddles, two outgoing branches each.
        assert_eq!(edges.len(), 4);
        for e in &edges {
            assert_eq!(e.source, e.target);
            assert_eq!(e.winding[0].abs(), 1, "winding {:?}", e.winding);
            assert_eq!(e.winding[1], 0);
        }
    }

    #[test]
    fn loop_separatrix_rejected() {
        // Adding a strong second harmonic subdivides each cell: interior
        // saddles appear whose separatrix branches enclose one sub-extremum
        // and come back -- a figure-eight. Those flows are rejected.
        let f = StreamFunction::parse(
            "1 -1 0.5 0\n1 1 -0.5 0\n2 -2 0.25 0\n2 2 -0.25 0\n",
        )
        .unwrap();
        let scan = find_critical_points(&f, 96).unwrap();
        match trace_separatrices(&f, &scan.points) {
            Err(TopologyError::LoopSeparatrix(_)) => {}
            other => panic!("expected LoopSeparatrix, got {other:?}"),
        }
    }

    #[test]
    fn cells_cellular() {
        let f = cellular();
        let topo = FlowTopology::build(&f).unwrap();
        assert_eq!(topo.cells.len(), 4);
        let mut signs = Vec::new();
        for c in &topo.cells {
            assert!((c.area - 0.25).abs() < 1e-3, "area {}", c.area);
            assert_eq!(c.boundary_cycles.len(), 1);
            assert_eq!(c.boundary_cycles[0].len(), 4);
            let thl = c.cycle_theta_length(0, &topo.edges);
            assert!((thl - 8.0).abs() < 1e-2, "boundary theta {thl}");
            signs.push(c.interior_sign);
        }
        signs.sort();
        assert_eq!(signs, vec![-1, -1, 1, 1]);
        // Euler-type count: #saddles == #cells for the cellular preset.
        assert_eq!(topo.saddles.len(), topo.cells.len());
        assert_eq!(topo.flow_class, FlowClass::Cellular);
    }

    #[test]
    fn cells_channel() {
        let f = channel();
        let topo = FlowTopology::build(&f).unwrap();
        assert_eq!(topo.cells.len(), 4);
        let mut channels = 0;
        let mut disks = 0;
        for c in &topo.cells {
            if c.winding != [0, 0] {
                channels += 1;
                assert_eq!(c.winding[1], 0);
                assert!(c.extremum.is_none());
            } else {
                disks += 1;
                assert!(c.extremum.is_some());
            }
        }
        assert_eq!(channels, 2, "two channel annuli winding in x1");
        assert_eq!(disks, 2, "two disks around the extrema");
        match topo.flow_class {
            FlowClass::OpenChannels { direction } => assert_eq!(direction, [1, 0]),
            ref other => panic!("expected open channels, got {other:?}"),
        }
    }

    #[test]
    fn fw_graph_shapes() {
        let topo = FlowTopology::build(&cellular()).unwrap();
        // Star: one separatrix vertex + 4 extrema, 4 edges.
        assert_eq!(topo.graph.vertices.len(), 5);
        assert_eq!(topo.graph.edges.len(), 4);
        assert!(topo.graph.is_connected());
        let sep_vertices = topo
            .graph
            .vertices
            .iter()
            .filter(|v| matches!(v.kind, FwVertexKind::Separatrix { .. }))
            .count();
        assert_eq!(sep_vertices, 1);
        for e in &topo.graph.edges {
            // Each edge spans from the separatrix level 0 to an extremum +-1.
            let lo = e.h_lo.abs().min(e.h_hi.abs());
            let hi = e.h_lo.abs().max(e.h_hi.abs());
            assert!(lo < 1e-9);
            assert!((hi - 1.0).abs() < 1e-9);
        }

        let topo = FlowTopology::build(&channel()).unwrap();
        // 2 saddle-level vertices, 2 extremum vertices, 4 edges of which 2
        // are channels spanning (-9, 9).
        assert_eq!(topo.graph.vertices.len(), 4);
        assert_eq!(topo.graph.edges.len(), 4);
        assert!(topo.graph.is_connected());
        let channel_edges: Vec<_> = topo
            .graph
            .edges
            .iter()
            .filter(|e| (e.h_lo + 9.0).abs() < 1e-6 && (e.h_hi - 9.0).abs() < 1e-6)
            .collect();
        assert_eq!(channel_edges.len(), 2);
    }

    #[test]
    fn classify_translation_invariant() {
        // Shift the cellular preset by an arbitrary phase; class is unchanged.
        // sin(2pi(x1+a)) sin(2pi(x2+b)) expanded:
        // = 0.5 cos(2pi(x1-x2) + 2pi(a-b)) - 0.5 cos(2pi(x1+x2) + 2pi(a+b))
        let (a, b) = (0.137, 0.261);
        let t1 = 2.0 * std::f64::consts::PI * (a - b);
        let t2 = 2.0 * std::f64::consts::PI * (a + b);
        let f = StreamFunction::new(vec![
            crate::field::Mode { k1: 1, k2: -1, c_cos: 0.5 * t1.cos(), c_sin: -0.5 * t1.sin() },
            crate::field::Mode { k1: 1, k2: 1, c_cos: -0.5 * t2.cos(), c_sin: 0.5 * t2.sin() },
        ]);
        let topo = FlowTopology::build(&f).unwrap();
        assert_eq!(topo.flow_class, FlowClass::Cellular);
        assert_eq!(topo.cells.len(), 4);

        // Swapping x1 and x2 also stays cellular.
        let g = StreamFunction::new(vec![
            crate::field::Mode { k1: -1, k2: 1, c_cos: 0.5, c_sin: 0.0 },
            crate::field::Mode { k1: 1, k2: 1, c_cos: -0.5, c_sin: 0.0 },
        ]);
        let topo = FlowTopology::build(&g).unwrap();
        assert_eq!(topo.flow_class, FlowClass::Cellular);
    }

    #[test]
    fn edge_locator_roundtrip() {
        let topo = FlowTopology::build(&cellular()).unwrap();
        for &ei in &[0usize, 3, 7] {
            let e = &topo.edges[ei.min(topo.edges.len() - 1)];
            let th = 0.37 * e.theta_length;
            let p = e.point_at_theta(th);
            let (found, th2, dist) = topo.edge_locator.nearest(&topo.edges, p).unwrap();
            assert!(dist < 1e-6);
            // The point could legitimately be closest to another edge only at
            // saddle corners; mid-edge it must match.
            assert_eq!(found, ei.min(topo.edges.len() - 1));
            assert!((th2 - th).abs() < 1e-3, "theta {th} vs {th2}");
        }
    }
}
