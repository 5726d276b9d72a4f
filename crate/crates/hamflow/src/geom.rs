//! Small 2-vector helpers shared by the geometry-heavy modules.
//!
//! Points are plain `[f64; 2]`. Torus points live in `[0, 1)^2`; plane points
//! are torus points plus an integer winding vector.

pub type Vec2 = [f64; 2];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn normalize(a: Vec2) -> Vec2 {
    let n = norm(a);
    if n == 0.0 {
        [0.0, 0.0]
    } else {
        [a[0] / n, a[1] / n]
    }
}

/// Rotate by +90 degrees.
#[inline]
pub fn perp(a: Vec2) -> Vec2 {
    [-a[1], a[0]]
}

/// Reduce a plane point to the torus `[0, 1)^2`.
#[inline]
pub fn wrap(a: Vec2) -> Vec2 {
    [a[0] - a[0].floor(), a[1] - a[1].floor()]
}

/// Shortest displacement from `a` to `b` on the torus (each component in
/// `[-1/2, 1/2)`).
#[inline]
pub fn torus_delta(a: Vec2, b: Vec2) -> Vec2 {
    let mut d = sub(b, a);
    for c in &mut d {
        *c -= c.round();
    }
    d
}

/// Torus distance.
#[inline]
pub fn torus_dist(a: Vec2, b: Vec2) -> f64 {
    norm(torus_delta(a, b))
}

/// Round each component to the nearest integer.
#[inline]
pub fn round_int(a: Vec2) -> [i32; 2] {
    [a[0].round() as i32, a[1].round() as i32]
}

/// Proper segment intersection test (shared endpoints count as crossing).
/// Used by the cell decomposition to decide whether the straight segment
/// between two grid nodes crosses a separatrix polyline segment.
pub fn segments_cross(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    #[inline]
    fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    }
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    // Collinear/touching cases: treat as crossing, which only makes the cell
    // decomposition mask slightly more conservative.
    if d1 == 0.0 && on_segment(q1, q2, p1) {
        return true;
    }
    if d2 == 0.0 && on_segment(q1, q2, p2) {
        return true;
    }
    if d3 == 0.0 && on_segment(p1, p2, q1) {
        return true;
    }
    if d4 == 0.0 && on_segment(p1, p2, q2) {
        return true;
    }
    false
}

#[inline]
fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_and_delta() {
        let p = wrap([1.25, -0.25]);
        assert_eq!(p, [0.25, 0.75]);
        let d = torus_delta([0.9, 0.1], [0.1, 0.9]);
        assert!((d[0] - 0.2).abs() < 1e-15);
        assert!((d[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn crossing() {
        assert!(segments_cross([0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]));
        assert!(!segments_cross(
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 0.1],
            [1.0, 0.1]
        ));
    }
}
