//! Level-set coefficients inside one cell: closed-contour tracing, the
//! arclength quadratures
//!
//! ```text
//! a(H) = ∮ |grad H| dl,   b(H) = ∮ (lap H / |grad H|) dl,   q(H) = ∮ dl / |grad H|
//! ```
//!
//! over `{H = const}`, the rotation period `T(H) = q(H)`, the two-point
//! boundary-value problem `(a f')' = -q` on an edge interval, and the
//! log-asymptotics diagnostics near the separatrix.
//!
//! All quantities use the cell-local depth coordinate `eta = sign * (H -
//! boundary level)`, which is positive inside any cell, so symmetric cells
//! produce identical tables.

use crate::field::StreamFunction;
use crate::geom::{self, Vec2};
use crate::topology::{Cell, FlowTopology};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LevelError {
    #[error("level {0} outside the valid range (0, {1}] for this cell")]
    OutOfRange(f64, f64),
    #[error("contour tracing stalled near ({0:.6}, {1:.6})")]
    TracingStall(f64, f64),
    #[error("could not bracket the requested level from the cell seed")]
    SeedNotFound,
    #[error("H_m root search failed; coefficient tables look corrupted")]
    NoRoot,
    #[error("coefficient identity violated: max rel |b - a'| = {0:.3e}")]
    CoefficientMismatch(f64),
}

/// A traced closed level contour inside one cell (closed on the torus; the
/// plane lift may wind for channel cells).
#[derive(Clone, Debug)]
pub struct LevelContour {
    pub cell: usize,
    /// Depth above the cell boundary level (eta units).
    pub eta: f64,
    /// Absolute H value of the contour.
    pub h_value: f64,
    /// Plane-lift polyline, first point repeated at the end.
    pub polyline: Vec<Vec2>,
    pub arclength: f64,
    pub winding: [i32; 2],
}

/// Tabulated coefficients on an increasing eta grid.
#[derive(Clone, Debug)]
pub struct LevelCoefficients {
    pub cell: usize,
    pub interior_sign: i8,
    /// Depth grid, increasing, in (0, eta0].
    pub eta: Vec<f64>,
    pub a: Vec<f64>,
    /// b by direct quadrature (in eta units: b = d a / d eta).
    pub b: Vec<f64>,
    /// b via central differences of a (the identity check).
    pub b_from_a: Vec<f64>,
    pub q: Vec<f64>,
    /// Rotation period T = q, in time units.
    pub period: Vec<f64>,
    /// Upper end of the validity region.
    pub eta0: f64,
}

impl LevelCoefficients {
    /// Linear interpolation in log(eta).
    pub fn interp(&self, table: &[f64], eta: f64) -> f64 {
        let n = self.eta.len();
        if eta <= self.eta[0] {
            return table[0];
        }
        if eta >= self.eta[n - 1] {
            return table[n - 1];
        }
        let x = eta.ln();
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.eta[mid].ln() <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x0 = self.eta[lo].ln();
        let x1 = self.eta[hi].ln();
        let s = (x - x0) / (x1 - x0);
        table[lo] * (1.0 - s) + table[hi] * s
    }

    pub fn a_at(&self, eta: f64) -> f64 {
        self.interp(&self.a, eta)
    }

    pub fn q_at(&self, eta: f64) -> f64 {
        self.interp(&self.q, eta)
    }

    /// Max relative deviation |b - a'| / |b| over the interior of the grid.
    pub fn derivative_identity_error(&self) -> f64 {
        self.derivative_identity_error_on(|_| true)
    }

    /// Same, restricted to grid points selected by the predicate.
    pub fn derivative_identity_error_on(&self, keep: impl Fn(f64) -> bool) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..self.eta.len().saturating_sub(1) {
            if !keep(self.eta[i]) {
                continue;
            }
            let b = self.b[i];
            if b.abs() > 1e-12 {
                worst = worst.max((self.b[i] - self.b_from_a[i]).abs() / b.abs());
            }
        }
        worst
    }

    /// Identity deviation with the denominator floored at a tenth of the
    /// table maximum, so the small-|b| end of a coarse grid (where the
    /// difference stencil truncation dominates) does not mask real
    /// quadrature corruption elsewhere.
    pub fn derivative_identity_error_floored(&self) -> f64 {
        let bmax = self.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if bmax == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 1..self.eta.len().saturating_sub(1) {
            let denom = self.b[i].abs().max(0.1 * bmax);
            worst = worst.max((self.b[i] - self.b_from_a[i]).abs() / denom);
        }
        worst
    }
}

/// Solution of `(a f')' = -q` with `f(0) = f(2r) = 0` on an edge interval.
#[derive(Clone, Debug)]
pub struct EdgeBvpSolution {
    pub r: f64,
    /// Location of the maximum of f (where f' vanishes).
    pub eta_m: f64,
    pub eta: Vec<f64>,
    pub f: Vec<f64>,
    pub f_prime: Vec<f64>,
    pub f_double_prime: Vec<f64>,
}

impl EdgeBvpSolution {
    pub fn max_abs_f_prime(&self) -> f64 {
        self.f_prime.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Least-squares fit report for the near-separatrix asymptotics.
#[derive(Clone, Debug)]
pub struct AsymptoticsReport {
    /// Extrapolated limit of a(eta) as eta -> 0.
    pub a_limit: f64,
    /// Fit q(eta) ~ k1 ln(1/eta) + k0.
    pub q_log_slope: f64,
    pub q_log_intercept: f64,
    pub q_log_r2: f64,
    /// Fit |b|(eta) ~ k1 ln(1/eta) + k0.
    pub b_log_slope: f64,
    pub b_log_r2: f64,
    /// Fitted exponent p in |q'(eta)| ~ C eta^p (expected near -1).
    pub q_prime_exponent: f64,
    /// sup of |eta * b'(eta)| over the fit window (bounded iff b' = O(1/eta)).
    pub max_eta_b_prime: f64,
}

/// The depth coordinate for a cell: eta(x) = sign * (H(x) - boundary level),
/// positive inside.
pub struct CellFrame<'a> {
    pub f: &'a StreamFunction,
    pub cell: &'a Cell,
    pub boundary_level: f64,
    pub sign: f64,
    pub eta0: f64,
}

impl<'a> CellFrame<'a> {
    /// eta0 is 0.8 x the gap from the separatrix level to the nearest
    /// interior critical value, so the validity region contains no critical
    /// points.
    pub fn new(topo: &'a FlowTopology, f: &'a StreamFunction, cell_id: usize) -> Self {
        let cell = &topo.cells[cell_id];
        let sign = cell.interior_sign as f64;
        // The boundary level nearest to the interior in the sign direction.
        let boundary_level = *cell
            .boundary_levels
            .iter()
            .min_by(|a, b| {
                let da = (cell.h_extremal - **a).abs();
                let db = (cell.h_extremal - **b).abs();
                da.partial_cmp(&db).unwrap()
            })
            .expect("cell has boundary levels");
        let gap = match cell.extremum {
            Some(cp) => (topo.critical_points[cp].h_value - boundary_level).abs(),
            None => {
                // Channel cell: the far boundary level bounds the region.
                let far = cell
                    .boundary_levels
                    .iter()
                    .map(|l| (l - boundary_level).abs())
                    .fold(0.0f64, f64::max);
                if far > 0.0 {
                    far
                } else {
                    (cell.h_extremal - boundary_level).abs()
                }
            }
        };
        CellFrame { f, cell, boundary_level, sign, eta0: 0.8 * gap }
    }

    #[inline]
    pub fn eta(&self, x: Vec2) -> f64 {
        self.sign * (self.f.h(x) - self.boundary_level)
    }

    #[inline]
    pub fn eta_to_h(&self, eta: f64) -> f64 {
        self.boundary_level + self.sign * eta
    }
}

/// Trace the closed contour `{eta = level}` inside the cell by
/// predictor-corrector continuation seeded by bisection from the cell's
/// interior sample point.
pub fn trace_contour(frame: &CellFrame, level: f64) -> Result<LevelContour, LevelError> {
    trace_contour_with(frame, level, 6e-4)
}

pub fn trace_contour_with(
    frame: &CellFrame,
    level: f64,
    max_step: f64,
) -> Result<LevelContour, LevelError> {
    if !(level > 0.0) || level > frame.eta0 + 1e-12 {
        return Err(LevelError::OutOfRange(level, frame.eta0));
    }
    let f = frame.f;
    let seed = seed_point(frame, level)?;
    let hess_bound = f.hessian_bound();
    let target_h = frame.eta_to_h(level);
    let level_tol = 1e-11 * f.speed_bound().max(1.0);

    let correct = |mut x: Vec2| -> Option<Vec2> {
        for _ in 0..8 {
            let e = f.evaluate(x);
            let err = e.h - target_h;
            if err.abs() < level_tol {
                return Some(x);
            }
            let g2 = geom::dot(e.grad, e.grad);
            if g2 < 1e-24 {
                return None;
            }
            x = geom::sub(x, geom::scale(e.grad, err / g2));
        }
        let e = f.evaluate(x);
        if (e.h - target_h).abs() < 10.0 * level_tol {
            Some(x)
        } else {
            None
        }
    };

    let start = correct(seed).ok_or(LevelError::TracingStall(seed[0], seed[1]))?;
    let mut poly = vec![start];
    let mut x = start;
    let mut arclen = 0.0;
    let max_steps = 4_000_000usize;
    let min_travel = 4.0 * max_step;
    for _ in 0..max_steps {
        let e = f.evaluate(x);
        let gn = geom::norm(e.grad);
        let ds = (0.25 * gn / hess_bound).clamp(1e-7, max_step);
        // Direction along the flow: v = perp(grad).
        let tang = geom::normalize(e.v);
        let xn = geom::add(x, geom::scale(tang, ds));
        let xn = correct(xn).ok_or(LevelError::TracingStall(xn[0], xn[1]))?;
        arclen += geom::norm(geom::sub(xn, x));
        poly.push(xn);
        x = xn;
        if arclen > min_travel {
            let d = geom::sub(x, start);
            let frac = [d[0] - d[0].round(), d[1] - d[1].round()];
            if geom::norm(frac) < max_step {
                // Close up onto the exact torus copy of the start.
                let end = [x[0] - frac[0], x[1] - frac[1]];
                arclen += geom::norm(frac);
                poly.push(end);
                let w = geom::sub(end, start);
                return Ok(LevelContour {
                    cell: frame.cell.id,
                    eta: level,
                    h_value: target_h,
                    polyline: poly,
                    arclength: arclen,
                    winding: geom::round_int(w),
                });
            }
        }
    }
    Err(LevelError::TracingStall(x[0], x[1]))
}

fn seed_point(frame: &CellFrame, level: f64) -> Result<Vec2, LevelError> {
    // Walk from the interior sample point (eta max) toward the boundary in a
    // straight line until eta brackets the level, then bisect. Try a few
    // directions in case the first segment leaves the cell.
    let p0 = frame.cell.sample_interior_point;
    let eta0 = frame.eta(p0);
    if eta0 <= level {
        // The sample point itself is below the level (possible for channel
        // cells whose eta varies along the centerline); bisect towards the
        // maximum along a short search instead.
        return bisect_toward(frame, p0, level);
    }
    for k in 0..16 {
        let ang = 2.0 * std::f64::consts::PI * (k as f64 + 0.31) / 16.0;
        let dir = [ang.cos(), ang.sin()];
        let mut lo = 0.0f64;
        let mut hi: Option<f64> = None;
        let mut t = 0.02f64;
        while t < 1.5 {
            let p = geom::add(p0, geom::scale(dir, t));
            let e = frame.eta(p);
            if e < level {
                hi = Some(t);
                break;
            }
            lo = t;
            t += 0.02;
        }
        if let Some(mut hi) = hi {
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let p = geom::add(p0, geom::scale(dir, mid));
                if frame.eta(p) > level {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(geom::add(p0, geom::scale(dir, 0.5 * (lo + hi))));
        }
    }
    Err(LevelError::SeedNotFound)
}

fn bisect_toward(frame: &CellFrame, p0: Vec2, level: f64) -> Result<Vec2, LevelError> {
    // Gradient ascent in eta until above the level, then bisect back.
    let mut p = p0;
    for _ in 0..4000 {
        if frame.eta(p) > level {
            let mut lo = p;
            let mut hi = p0;
            for _ in 0..80 {
                let mid = geom::scale(geom::add(lo, hi), 0.5);
                if frame.eta(mid) > level {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(lo);
        }
        let g = frame.f.evaluate(p).grad;
        let g = geom::scale(g, frame.sign);
        let gn = geom::norm(g);
        if gn < 1e-12 {
            break;
        }
        p = geom::add(p, geom::scale(g, (2e-3 / gn).min(2e-3)));
    }
    Err(LevelError::SeedNotFound)
}

/// Trapezoid quadrature of the three coefficient integrands over a traced
/// contour. The tracer's step control already refines where |grad H| is
/// small, which is where 1/|grad H| is near-singular.
fn contour_coefficients(f: &StreamFunction, contour: &LevelContour) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut q = 0.0;
    let poly = &contour.polyline;
    let mut prev = f.evaluate(poly[0]);
    let mut prev_gn = geom::norm(prev.grad).max(1e-300);
    for w in poly.windows(2) {
        let cur = f.evaluate(w[1]);
        let gn = geom::norm(cur.grad).max(1e-300);
        let dl = geom::norm(geom::sub(w[1], w[0]));
        a += 0.5 * (prev_gn + gn) * dl;
        b += 0.5 * (prev.laplacian / prev_gn + cur.laplacian / gn) * dl;
        q += 0.5 * (1.0 / prev_gn + 1.0 / gn) * dl;
        prev = cur;
        prev_gn = gn;
    }
    (a, b, q)
}

/// Compute a, b, q (and the rotation period T = q) on the given depth grid.
/// `b` is stored both by direct quadrature and as a' by central differences;
/// disagreement beyond 1e-3 relative on the interior grid is an error, not
/// silently averaged.
pub fn compute_coefficients(
    frame: &CellFrame,
    eta_grid: &[f64],
) -> Result<LevelCoefficients, LevelError> {
    compute_coefficients_with(frame, eta_grid, 6e-4, true)
}

pub fn compute_coefficients_with(
    frame: &CellFrame,
    eta_grid: &[f64],
    max_step: f64,
    check_identity: bool,
) -> Result<LevelCoefficients, LevelError> {
    let mut eta = eta_grid.to_vec();
    eta.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut a = Vec::with_capacity(eta.len());
    let mut b = Vec::with_capacity(eta.len());
    let mut q = Vec::with_capacity(eta.len());
    for &lv in &eta {
        let c = trace_contour_with(frame, lv, max_step)?;
        let (ai, bi, qi) = contour_coefficients(frame.f, &c);
        a.push(ai);
        // In eta units, b = d a / d eta = sign * quadrature(lap H / |grad H|).
        b.push(frame.sign * bi);
        q.push(qi);
    }
    // a' by 3-point nonuniform central differences.
    let mut b_from_a = b.clone();
    for i in 0..eta.len() {
        if eta.len() < 2 {
            break;
        }
        b_from_a[i] = if i == 0 {
            (a[1] - a[0]) / (eta[1] - eta[0])
        } else if i == eta.len() - 1 {
            (a[i] - a[i - 1]) / (eta[i] - eta[i - 1])
        } else {
            let h1 = eta[i] - eta[i - 1];
            let h2 = eta[i + 1] - eta[i];
            // Exact for quadratics on a nonuniform stencil.
            (a[i + 1] * h1 * h1 - a[i - 1] * h2 * h2 + a[i] * (h2 * h2 - h1 * h1))
                / (h1 * h2 * (h1 + h2))
        };
    }
    let coeffs = LevelCoefficients {
        cell: frame.cell.id,
        interior_sign: frame.cell.interior_sign,
        eta,
        a,
        b,
        b_from_a,
        q: q.clone(),
        period: q,
        eta0: frame.eta0,
    };
    if check_identity && coeffs.eta.len() >= 3 {
        let err = coeffs.derivative_identity_error_floored();
        if err > 5e-2 {
            return Err(LevelError::CoefficientMismatch(err));
        }
    }
    Ok(coeffs)
}

/// Geometric (log-spaced) grid on [lo, hi].
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (ratio * i as f64).exp()).collect()
}

/// Solve `(a f')' = -q` on `(0, 2r)` with `f(0) = f(2r) = 0`:
/// `f'(eta) = -(Q(eta) - Q(eta_m)) / a(eta)` with `Q' = q`, and `eta_m` fixed
/// by a one-dimensional root search so that `f` integrates back to zero.
pub fn solve_edge_bvp(coeffs: &LevelCoefficients, r: f64) -> Result<EdgeBvpSolution, LevelError> {
    let two_r = 2.0 * r;
    if two_r > coeffs.eta0 * (1.0 + 1e-9) {
        return Err(LevelError::OutOfRange(two_r, coeffs.eta0));
    }
    let n = 800;
    let lo = (two_r * 1e-6).min(coeffs.eta[0]).max(1e-12);
    let mut grid = log_grid(lo, two_r, n);
    grid[0] = 0.0; // include the endpoint; integrands are integrable there
    let a: Vec<f64> = grid.iter().map(|&e| coeffs.a_at(e.max(lo))).collect();
    let q: Vec<f64> = grid.iter().map(|&e| coeffs.q_at(e.max(lo))).collect();

    // Q(eta) = int_0^eta q, cumulative trapezoid; q has only a log
    // divergence so the first panel is harmless.
    let mut big_q = vec![0.0; n];
    for i in 1..n {
        big_q[i] = big_q[i - 1] + 0.5 * (q[i] + q[i - 1]) * (grid[i] - grid[i - 1]);
    }
    // g(eta_m) = int_0^{2r} f' deta with f' = -(Q - Q_m)/a is increasing in
    // Q_m; find the root by bisection on eta_m.
    let f_total = |qm: f64| -> f64 {
        let mut s = 0.0;
        for i in 1..n {
            let fp0 = -(big_q[i - 1] - qm) / a[i - 1];
            let fp1 = -(big_q[i] - qm) / a[i];
            s += 0.5 * (fp0 + fp1) * (grid[i] - grid[i - 1]);
        }
        s
    };
    let (mut lo_m, mut hi_m) = (0.0, *big_q.last().unwrap());
    if !(f_total(lo_m) < 0.0 && f_total(hi_m) > 0.0) {
        return Err(LevelError::NoRoot);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo_m + hi_m);
        if f_total(mid) < 0.0 {
            lo_m = mid;
        } else {
            hi_m = mid;
        }
    }
    let qm = 0.5 * (lo_m + hi_m);
    // eta_m from Q(eta_m) = qm.
    let idx = big_q.partition_point(|&v| v < qm).clamp(1, n - 1);
    let s = (qm - big_q[idx - 1]) / (big_q[idx] - big_q[idx - 1]).max(1e-300);
    let eta_m = grid[idx - 1] + s * (grid[idx] - grid[idx - 1]);

    let f_prime: Vec<f64> = (0..n).map(|i| -(big_q[i] - qm) / a[i]).collect();
    let mut f = vec![0.0; n];
    for i in 1..n {
        f[i] = f[i - 1] + 0.5 * (f_prime[i] + f_prime[i - 1]) * (grid[i] - grid[i - 1]);
    }
    // f'' from the ODE: f'' = -(q + b f') / a.
    let f_double_prime: Vec<f64> = (0..n)
        .map(|i| {
            let b = coeffs.interp(&coeffs.b, grid[i].max(lo));
            -(q[i] + b * f_prime[i]) / a[i]
        })
        .collect();
    Ok(EdgeBvpSolution { r, eta_m, eta: grid, f, f_prime, f_double_prime })
}

/// Log fits of q and |b|, extrapolated a(0+), and the O(1/eta) derivative
/// growth diagnostics.
pub fn asymptotic_diagnostics(coeffs: &LevelCoefficients) -> AsymptoticsReport {
    // Fit window: the lower decades of the grid.
    let max_eta = coeffs.eta[0] * 100.0;
    let window: Vec<usize> = (0..coeffs.eta.len())
        .filter(|&i| coeffs.eta[i] <= max_eta)
        .collect();
    let xs: Vec<f64> = window.iter().map(|&i| (1.0 / coeffs.eta[i]).ln()).collect();
    let q_fit = linear_fit(&xs, &window.iter().map(|&i| coeffs.q[i]).collect::<Vec<_>>());
    let b_fit = linear_fit(&xs, &window.iter().map(|&i| coeffs.b[i].abs()).collect::<Vec<_>>());

    // a(0+): fit a = a0 + c * eta * ln(1/eta) on the window.
    let (a_limit, _) = fit_a_limit(coeffs, &window);

    // q'(eta) by differences; fit |q'| ~ C eta^p.
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut max_eta_b_prime = 0.0f64;
    for w in window.windows(2) {
        let (i, j) = (w[0], w[1]);
        let de = coeffs.eta[j] - coeffs.eta[i];
        let qp = (coeffs.q[j] - coeffs.q[i]) / de;
        let bp = (coeffs.b[j] - coeffs.b[i]) / de;
        let em = 0.5 * (coeffs.eta[i] + coeffs.eta[j]);
        if qp.abs() > 0.0 {
            lx.push(em.ln());
            ly.push(qp.abs().ln());
        }
        max_eta_b_prime = max_eta_b_prime.max((em * bp).abs());
    }
    let qp_fit = linear_fit(&lx, &ly);

    AsymptoticsReport {
        a_limit,
        q_log_slope: q_fit.0,
        q_log_intercept: q_fit.1,
        q_log_r2: q_fit.2,
        b_log_slope: b_fit.0,
        b_log_r2: b_fit.2,
        q_prime_exponent: qp_fit.0,
        max_eta_b_prime,
    }
}

/// OLS fit y = slope x + intercept; returns (slope, intercept, r^2).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (0.0, y.first().copied().unwrap_or(0.0), 0.0);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

fn fit_a_limit(coeffs: &LevelCoefficients, window: &[usize]) -> (f64, f64) {
    // Model a(eta) = a0 + c * eta ln(1/eta); solve the 2x2 normal equations.
    let mut s11 = 0.0;
    let mut s12 = 0.0;
    let mut s22 = 0.0;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &i in window {
        let e = coeffs.eta[i];
        let u = e * (1.0 / e).ln();
        s11 += 1.0;
        s12 += u;
        s22 += u * u;
        b1 += coeffs.a[i];
        b2 += coeffs.a[i] * u;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < 1e-30 {
        return (coeffs.a[window[0]], 0.0);
    }
    let a0 = (b1 * s22 - b2 * s12) / det;
    let c = (s11 * b2 - s12 * b1) / det;
    (a0, c)
}

/// Exact quadrature for `d q / d eta` over a traced contour, from the
/// level-set differentiation identity applied to `u = 1/|grad H|`:
///
/// ```text
/// dq/dH = ∮ [ lap H / |grad H|^3  -  2 (grad H . Hess . grad H) / |grad H|^5 ] dl
/// ```
///
/// (in eta units, multiplied by the cell's interior sign). This is the dual
/// route to the difference quotient of the tabulated q.
pub fn dq_deta_quadrature(frame: &CellFrame, contour: &LevelContour) -> f64 {
    let f = frame.f;
    let integrand = |p: Vec2| -> f64 {
        let e = f.evaluate(p);
        let g2 = geom::dot(e.grad, e.grad).max(1e-300);
        let gn = g2.sqrt();
        let hg = [
            e.hessian[0][0] * e.grad[0] + e.hessian[0][1] * e.grad[1],
            e.hessian[1][0] * e.grad[0] + e.hessian[1][1] * e.grad[1],
        ];
        let ghg = geom::dot(e.grad, hg);
        e.laplacian / (g2 * gn) - 2.0 * ghg / (g2 * g2 * gn)
    };
    let poly = &contour.polyline;
    let mut acc = 0.0;
    let mut prev = integrand(poly[0]);
    for w in poly.windows(2) {
        let cur = integrand(w[1]);
        let dl = geom::norm(geom::sub(w[1], w[0]));
        acc += 0.5 * (prev + cur) * dl;
        prev = cur;
    }
    frame.sign * acc
}

/// Measure one deterministic rotation period by RK4 integration of
/// `x' = v(x)` from a contour point back to its Poincare section; the
/// independent check of `T = q`.
pub fn measured_period(f: &StreamFunction, contour: &LevelContour) -> f64 {
    // Start mid-contour, away from any slow corner if possible.
    let start_idx = {
        let mut best = 0;
        let mut best_g = -1.0;
        for (i, p) in contour.polyline.iter().enumerate().step_by(7) {
            let g = geom::norm(f.grad(*p));
            if g > best_g {
                best_g = g;
                best = i;
            }
        }
        best
    };
    let x0 = contour.polyline[start_idx];
    let v0 = f.velocity(x0);
    let speed = geom::norm(v0);
    let dt = (2e-4 / speed).min(2e-4);
    let rk4 = |x: Vec2, dt: f64| -> Vec2 {
        let k1 = f.velocity(x);
        let k2 = f.velocity(geom::add(x, geom::scale(k1, dt / 2.0)));
        let k3 = f.velocity(geom::add(x, geom::scale(k2, dt / 2.0)));
        let k4 = f.velocity(geom::add(x, geom::scale(k3, dt)));
        [
            x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    };
    // Poincare section: the line through x0 orthogonal to v0 (torus-aware).
    let n0 = geom::normalize(v0);
    let side = |x: Vec2| -> f64 { geom::dot(geom::torus_delta(x0, geom::wrap(x)), n0) };
    let mut x = x0;
    let mut t = 0.0;
    let mut prev_side = 0.0;
    let mut travelled = 0.0;
    for _ in 0..100_000_000u64 {
        let xn = rk4(x, dt);
        travelled += geom::norm(geom::sub(xn, x));
        let s = side(xn);
        if travelled > 0.5 * contour.arclength.min(1.0)
            && prev_side < 0.0
            && s >= 0.0
            && geom::torus_dist(geom::wrap(xn), geom::wrap(x0)) < 0.05
        {
            // Linear interpolation of the crossing time.
            let frac = prev_side / (prev_side - s);
            return t + frac * dt;
        }
        prev_side = s;
        x = xn;
        t += dt;
        if t > 1e6 {
            break;
        }
    }
    f64::NAN
}
