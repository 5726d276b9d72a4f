//! Periodic stream functions on the unit torus.
//!
//! A stream function is a finite Fourier sum
//!
//! ```text
//! H(x) = sum_m  c_cos[m] * cos(2*pi*(k1[m]*x1 + k2[m]*x2))
//!             + c_sin[m] * sin(2*pi*(k1[m]*x1 + k2[m]*x2))
//! ```
//!
//! with integer wave vectors, so H, the velocity v = (-dH/dx2, dH/dx1), the
//! Laplacian and the Hessian are all evaluated exactly by term-wise
//! differentiation. Period is fixed to 1 in each variable.

use crate::geom::Vec2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

pub const TWO_PI: f64 = 2.0 * PI;

/// One Fourier mode `(k1, k2, c_cos, c_sin)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k1: i32,
    pub k2: i32,
    pub c_cos: f64,
    pub c_sin: f64,
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("malformed mode spec at line {line}: {msg}")]
    MalformedSpec { line: usize, msg: String },
    #[error("complex coefficients violate conjugation symmetry at k=({0}, {1}); field is not real")]
    NonRealField(i32, i32),
}

/// The two flows used throughout the test suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `H = sin(2 pi x1) sin(2 pi x2)`: separatrices form a rectangular lattice.
    CellularSine,
    /// `H = sin(2 pi x1) sin(2 pi x2) + 10 sin(2 pi x2)`: open channels along x1.
    OpenChannel,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cellular_sine" => Ok(Preset::CellularSine),
            "open_channel" => Ok(Preset::OpenChannel),
            other => Err(format!(
                "unknown preset `{other}` (expected cellular_sine or open_channel)"
            )),
        }
    }
}

/// Full pointwise evaluation of the field and its derivatives.
#[derive(Clone, Copy, Debug)]
pub struct FieldEval {
    pub h: f64,
    pub grad: Vec2,
    /// `v = (-grad[1], grad[0])`, exactly.
    pub v: Vec2,
    pub laplacian: f64,
    /// Symmetric 2x2 Hessian, row major.
    pub hessian: [[f64; 2]; 2],
}

/// A real periodic stream function as a finite Fourier sum. Immutable after
/// construction; cheap to clone and safe to share across workers.
#[derive(Clone, Debug)]
pub struct StreamFunction {
    modes: Vec<Mode>,
    speed_bound: f64,
    hessian_bound: f64,
    min_wavelength: f64,
}

impl StreamFunction {
    pub fn new(modes: Vec<Mode>) -> Self {
        // Merge modes sharing a wave vector; fold (-k1,-k2) onto (k1,k2)
        // using cos(-t) = cos(t), sin(-t) = -sin(t). The constant mode only
        // shifts H and never contributes to v, but is kept for round-trips.
        let mut merged: Vec<Mode> = Vec::new();
        for m in modes {
            let (k1, k2, c_cos, c_sin) = if m.k1 < 0 || (m.k1 == 0 && m.k2 < 0) {
                (-m.k1, -m.k2, m.c_cos, -m.c_sin)
            } else {
                (m.k1, m.k2, m.c_cos, m.c_sin)
            };
            if let Some(e) = merged.iter_mut().find(|e| e.k1 == k1 && e.k2 == k2) {
                e.c_cos += c_cos;
                e.c_sin += c_sin;
            } else {
                merged.push(Mode { k1, k2, c_cos, c_sin });
            }
        }
        merged.sort_by_key(|m| (m.k1, m.k2));

        let mut speed_bound: f64 = 0.0;
        let mut hessian_bound: f64 = 0.0;
        let mut max_k: f64 = 0.0;
        for m in &merged {
            let kn = ((m.k1 as f64).powi(2) + (m.k2 as f64).powi(2)).sqrt();
            let amp = m.c_cos.abs() + m.c_sin.abs();
            speed_bound += TWO_PI * kn * amp;
            hessian_bound += TWO_PI * TWO_PI * kn * kn * amp;
            max_k = max_k.max(kn);
        }
        let min_wavelength = if max_k > 0.0 { 1.0 / max_k } else { 1.0 };
        StreamFunction {
            modes: merged,
            speed_bound: speed_bound.max(f64::MIN_POSITIVE),
            hessian_bound: hessian_bound.max(f64::MIN_POSITIVE),
            min_wavelength,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            // sin a sin b = (cos(a-b) - cos(a+b)) / 2
            Preset::CellularSine => StreamFunction::new(vec![
                Mode { k1: 1, k2: -1, c_cos: 0.5, c_sin: 0.0 },
                Mode { k1: 1, k2: 1, c_cos: -0.5, c_sin: 0.0 },
            ]),
            Preset::OpenChannel => StreamFunction::new(vec![
                Mode { k1: 1, k2: -1, c_cos: 0.5, c_sin: 0.0 },
                Mode { k1: 1, k2: 1, c_cos: -0.5, c_sin: 0.0 },
                Mode { k1: 0, k2: 1, c_cos: 0.0, c_sin: 10.0 },
            ]),
        }
    }

    /// Shear flow `v = (sin(2 pi x2), 0)`, i.e. `H = cos(2 pi x2) / (2 pi)`.
    /// Its effective diffusivity is known in closed form, which makes it the
    /// main cross-method oracle for the estimators.
    pub fn shear() -> Self {
        StreamFunction::new(vec![Mode { k1: 0, k2: 1, c_cos: 1.0 / TWO_PI, c_sin: 0.0 }])
    }

    /// The zero field (`H = 0`, `v = 0`).
    pub fn zero() -> Self {
        StreamFunction::new(Vec::new())
    }

    /// The field with all coefficients multiplied by `factor` (velocity
    /// scales by the same factor).
    pub fn scaled(&self, factor: f64) -> Self {
        StreamFunction::new(
            self.modes
                .iter()
                .map(|m| Mode { c_cos: m.c_cos * factor, c_sin: m.c_sin * factor, ..*m })
                .collect(),
        )
    }

    /// Parse the textual mode list: one `k1 k2 c_cos c_sin` entry per line,
    /// `#` starts a comment, blank lines ignored.
    pub fn parse(spec: &str) -> Result<Self, FieldError> {
        let mut modes = Vec::new();
        for (idx, raw) in spec.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tok: Vec<&str> = content.split_whitespace().collect();
            if tok.len() != 4 {
                return Err(FieldError::MalformedSpec {
                    line,
                    msg: format!("expected 4 fields `k1 k2 c_cos c_sin`, got {}", tok.len()),
                });
            }
            let k1: i32 = tok[0].parse().map_err(|_| FieldError::MalformedSpec {
                line,
                msg: format!("bad integer `{}`", tok[0]),
            })?;
            let k2: i32 = tok[1].parse().map_err(|_| FieldError::MalformedSpec {
                line,
                msg: format!("bad integer `{}`", tok[1]),
            })?;
            let c_cos: f64 = tok[2].parse().map_err(|_| FieldError::MalformedSpec {
                line,
                msg: format!("bad real `{}`", tok[2]),
            })?;
            let c_sin: f64 = tok[3].parse().map_err(|_| FieldError::MalformedSpec {
                line,
                msg: format!("bad real `{}`", tok[3]),
            })?;
            if !(c_cos.is_finite() && c_sin.is_finite()) {
                return Err(FieldError::MalformedSpec {
                    line,
                    msg: "non-finite coefficient".into(),
                });
            }
            modes.push(Mode { k1, k2, c_cos, c_sin });
        }
        Ok(StreamFunction::new(modes))
    }

    /// Build from complex exponential coefficients `(k1, k2, re, im)` for
    /// `H = sum c_k exp(2 pi i k.x)`. A real field needs `c_{-k} = conj(c_k)`;
    /// anything else is rejected.
    pub fn from_complex_modes(modes: &[(i32, i32, f64, f64)]) -> Result<Self, FieldError> {
        let find = |k1: i32, k2: i32| -> Option<(f64, f64)> {
            modes
                .iter()
                .find(|m| m.0 == k1 && m.1 == k2)
                .map(|m| (m.2, m.3))
        };
        let mut real = Vec::new();
        for &(k1, k2, re, im) in modes {
            if k1 == 0 && k2 == 0 {
                if im.abs() > 1e-12 * (re.abs() + 1.0) {
                    return Err(FieldError::NonRealField(0, 0));
                }
                real.push(Mode { k1: 0, k2: 0, c_cos: re, c_sin: 0.0 });
                continue;
            }
            if k1 < 0 || (k1 == 0 && k2 < 0) {
                continue; // handled by the conjugate partner
            }
            let (cre, cim) = find(-k1, -k2).ok_or(FieldError::NonRealField(k1, k2))?;
            let tol = 1e-12 * (1.0 + re.abs() + im.abs());
            if (cre - re).abs() > tol || (cim + im).abs() > tol {
                return Err(FieldError::NonRealField(k1, k2));
            }
            // c e^{it} + conj(c) e^{-it} = 2 re cos t - 2 im sin t
            real.push(Mode { k1, k2, c_cos: 2.0 * re, c_sin: -2.0 * im });
        }
        Ok(StreamFunction::new(real))
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    /// Serialize back to the textual grammar (locale-independent, shortest
    /// round-trip decimals, so parse(to_spec()) is bit-exact).
    pub fn to_spec_string(&self) -> String {
        let mut out = String::new();
        for m in &self.modes {
            let _ = writeln!(out, "{} {} {} {}", m.k1, m.k2, m.c_cos, m.c_sin);
        }
        out
    }

    /// Upper bound on `sup |v|`.
    #[inline]
    pub fn speed_bound(&self) -> f64 {
        self.speed_bound
    }

    /// Upper bound on the Hessian norm of H.
    #[inline]
    pub fn hessian_bound(&self) -> f64 {
        self.hessian_bound
    }

    /// Shortest spatial wavelength present in the field.
    #[inline]
    pub fn min_wavelength(&self) -> f64 {
        self.min_wavelength
    }

    /// H only.
    #[inline]
    pub fn h(&self, x: Vec2) -> f64 {
        let x = crate::geom::wrap(x);
        let mut h = 0.0;
        for m in &self.modes {
            let phase = TWO_PI * (m.k1 as f64 * x[0] + m.k2 as f64 * x[1]);
            let (s, c) = phase.sin_cos();
            h += m.c_cos * c + m.c_sin * s;
        }
        h
    }

    /// H and velocity in one pass; the hot path of the SDE integrator.
    #[inline]
    pub fn h_and_velocity(&self, x: Vec2) -> (f64, Vec2) {
        let x = crate::geom::wrap(x);
        let mut h = 0.0;
        let mut g0 = 0.0;
        let mut g1 = 0.0;
        for m in &self.modes {
            let k1 = m.k1 as f64;
            let k2 = m.k2 as f64;
            let phase = TWO_PI * (k1 * x[0] + k2 * x[1]);
            let (s, c) = phase.sin_cos();
            h += m.c_cos * c + m.c_sin * s;
            let d = -m.c_cos * s + m.c_sin * c;
            g0 += TWO_PI * k1 * d;
            g1 += TWO_PI * k2 * d;
        }
        (h, [-g1, g0])
    }

    #[inline]
    pub fn velocity(&self, x: Vec2) -> Vec2 {
        self.h_and_velocity(x).1
    }

    #[inline]
    pub fn grad(&self, x: Vec2) -> Vec2 {
        let e = self.evaluate(x);
        e.grad
    }

    /// Full evaluation; plane inputs are reduced modulo 1 first, so `x` and
    /// `x + e1` give identical results.
    pub fn evaluate(&self, x: Vec2) -> FieldEval {
        self.eval_at(crate::geom::wrap(x))
    }

    /// Evaluation without torus reduction (used to check that the winding
    /// bookkeeping reproduces the plain plane integration).
    pub fn evaluate_raw(&self, x: Vec2) -> FieldEval {
        self.eval_at(x)
    }

    fn eval_at(&self, x: Vec2) -> FieldEval {
        let mut h = 0.0;
        let mut g = [0.0, 0.0];
        let mut hess = [[0.0, 0.0], [0.0, 0.0]];
        for m in &self.modes {
            let k1 = m.k1 as f64;
            let k2 = m.k2 as f64;
            let phase = TWO_PI * (k1 * x[0] + k2 * x[1]);
            let (s, c) = phase.sin_cos();
            h += m.c_cos * c + m.c_sin * s;
            let d1 = -m.c_cos * s + m.c_sin * c; // first phase derivative
            let d2 = -(m.c_cos * c + m.c_sin * s); // second phase derivative
            g[0] += TWO_PI * k1 * d1;
            g[1] += TWO_PI * k2 * d1;
            let w = TWO_PI * TWO_PI * d2;
            hess[0][0] += w * k1 * k1;
            hess[0][1] += w * k1 * k2;
            hess[1][1] += w * k2 * k2;
        }
        hess[1][0] = hess[0][1];
        FieldEval {
            h,
            grad: g,
            v: [-g[1], g[0]],
            laplacian: hess[0][0] + hess[1][1],
            hessian: hess,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;

    /// Five-point central differences; the independent oracle for the exact
    /// term-wise derivatives.
    fn fd_grad(f: &StreamFunction, x: Vec2, step: f64) -> Vec2 {
        let mut g = [0.0, 0.0];
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            let mut xp2 = x;
            let mut xm2 = x;
            xp[i] += step;
            xm[i] -= step;
            xp2[i] += 2.0 * step;
            xm2[i] -= 2.0 * step;
            g[i] = (8.0 * (f.h(xp) - f.h(xm)) - (f.h(xp2) - f.h(xm2))) / (12.0 * step);
        }
        g
    }

    #[test]
    fn preset_values() {
        let f = StreamFunction::preset(Preset::CellularSine);
        assert!((f.h([0.25, 0.25]) - 1.0).abs() < 1e-15);
        for i in 0..20 {
            let x2 = i as f64 / 20.0;
            assert!(f.h([0.0, x2]).abs() < 1e-15);
        }
        let g = StreamFunction::preset(Preset::OpenChannel);
        for i in 0..20 {
            let x1 = i as f64 / 20.0;
            assert!(g.h([x1, 0.0]).abs() < 1e-12);
        }
        assert!((g.h([0.25, 0.25]) - 11.0).abs() < 1e-12);
    }

    #[test]
    fn exact_velocity_at_quarter_points() {
        let f = StreamFunction::preset(Preset::CellularSine);
        let e = f.evaluate([0.25, 0.0]);
        assert!((e.v[0] + TWO_PI).abs() < 1e-12);
        assert!(e.v[1].abs() < 1e-12);

        let top = f.evaluate([0.25, 0.25]);
        assert!(geom::norm(top.grad) < 1e-12);
        assert!(top.hessian[0][0] < 0.0 && top.hessian[1][1] < 0.0);
        assert!(top.hessian[0][1].abs() < 1e-9);
    }

    #[test]
    fn periodicity_and_plane_reduction() {
        let f = StreamFunction::preset(Preset::OpenChannel);
        // Dyadic coordinates survive the shift by 1 exactly, so the reduced
        // evaluation is bitwise identical.
        let a = f.evaluate([0.3125, 0.6875]);
        let b = f.evaluate([1.3125, 0.6875]);
        let c = f.evaluate([0.3125, -0.3125]);
        assert_eq!(a.h, b.h);
        assert_eq!(a.v, b.v);
        assert_eq!(a.h, c.h);
        assert_eq!(a.hessian, c.hessian);
        // Non-dyadic shifts agree to rounding.
        let d = f.evaluate([0.3, 0.7]);
        let e = f.evaluate([1.3, 0.7]);
        assert!((d.h - e.h).abs() < 1e-12);
        assert!((d.v[0] - e.v[0]).abs() < 1e-12 && (d.v[1] - e.v[1]).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let f = StreamFunction::parse("1 -1 0.5 0\n1 1 -0.5 0\n0 1 0 10\n2 3 0.1 -0.2\n")
            .unwrap();
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let x = [next(), next()];
            let e = f.evaluate(x);
            let g = fd_grad(&f, x, 1e-5);
            assert!((e.grad[0] - g[0]).abs() < 1e-6);
            assert!((e.grad[1] - g[1]).abs() < 1e-6);
            // Hessian against finite differences of the exact gradient.
            let step = 1e-5;
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += step;
                xm[i] -= step;
                let gp = f.evaluate(xp).grad;
                let gm = f.evaluate(xm).grad;
                for j in 0..2 {
                    let fd = (gp[j] - gm[j]) / (2.0 * step);
                    assert!((e.hessian[j][i] - fd).abs() < 1e-4);
                }
            }
            // Structural identities.
            assert_eq!(e.v[0], -e.grad[1]);
            assert_eq!(e.v[1], e.grad[0]);
            assert_eq!(e.laplacian, e.hessian[0][0] + e.hessian[1][1]);
            assert_eq!(geom::dot(e.v, e.grad), -e.grad[1] * e.grad[0] + e.grad[0] * e.grad[1]);
        }
    }

    #[test]
    fn zero_mean_velocity() {
        // Quadrature of v over the periodicity cell vanishes for any list.
        let f = StreamFunction::parse("1 0 0.3 0.4\n1 2 -0.2 0.7\n0 0 5 0\n").unwrap();
        let n = 64;
        let mut sum = [0.0, 0.0];
        for i in 0..n {
            for j in 0..n {
                let v = f.velocity([(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
                sum[0] += v[0];
                sum[1] += v[1];
            }
        }
        assert!(sum[0].abs() / ((n * n) as f64) < 1e-12);
        assert!(sum[1].abs() / ((n * n) as f64) < 1e-12);
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let f = StreamFunction::parse("# comment\n1 1 0.125 -3.5\n0 2 1e-3 0\n").unwrap();
        let g = StreamFunction::parse(&f.to_spec_string()).unwrap();
        assert_eq!(f.modes(), g.modes());

        assert!(matches!(
            StreamFunction::parse("1 1 zero 0"),
            Err(FieldError::MalformedSpec { line: 1, .. })
        ));
        assert!(matches!(
            StreamFunction::parse("1 1 0.5"),
            Err(FieldError::MalformedSpec { .. })
        ));

        let empty = StreamFunction::parse("").unwrap();
        assert_eq!(empty.h([0.3, 0.4]), 0.0);
        assert_eq!(empty.velocity([0.3, 0.4]), [0.0, 0.0]);
    }

    #[test]
    fn sine_product_from_expanded_modes() {
        // sin(2 pi x1) sin(2 pi x2) expanded by hand into cos modes.
        let f = StreamFunction::parse("1 -1 0.5 0\n1 1 -0.5 0\n").unwrap();
        let p = StreamFunction::preset(Preset::CellularSine);
        for i in 0..40 {
            for j in 0..40 {
                let x = [i as f64 / 40.0, j as f64 / 40.0];
                assert!((f.h(x) - p.h(x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn complex_modes_require_conjugation() {
        // Valid pair: c_{(1,0)} = 1 - 2i, c_{(-1,0)} = 1 + 2i.
        let ok = StreamFunction::from_complex_modes(&[(1, 0, 1.0, -2.0), (-1, 0, 1.0, 2.0)])
            .unwrap();
        // 2 re cos - 2 im sin = 2 cos(2 pi x1) + 4 sin(2 pi x1)
        let x = [0.2, 0.9];
        let want = 2.0 * (TWO_PI * x[0]).cos() + 4.0 * (TWO_PI * x[0]).sin();
        assert!((ok.h(x) - want).abs() < 1e-12);

        assert!(matches!(
            StreamFunction::from_complex_modes(&[(1, 0, 1.0, -2.0), (-1, 0, 1.0, 2.5)]),
            Err(FieldError::NonRealField(1, 0))
        ));
        assert!(matches!(
            StreamFunction::from_complex_modes(&[(1, 0, 1.0, 0.0)]),
            Err(FieldError::NonRealField(1, 0))
        ));
    }

    #[test]
    fn rk4_conserves_h_along_flow() {
        let f = StreamFunction::preset(Preset::CellularSine);
        let mut x = [0.13, 0.31];
        let h0 = f.h(x);
        let dt = 2e-4;
        let steps = (1.0 / dt) as usize;
        for _ in 0..steps {
            let k1 = f.velocity(x);
            let k2 = f.velocity(geom::add(x, geom::scale(k1, dt / 2.0)));
            let k3 = f.velocity(geom::add(x, geom::scale(k2, dt / 2.0)));
            let k4 = f.velocity(geom::add(x, geom::scale(k3, dt)));
            for i in 0..2 {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        assert!((f.h(x) - h0).abs() < 1e-8);
    }
}
