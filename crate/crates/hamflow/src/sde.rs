//! SDE integration on the torus with winding bookkeeping, reproducible
//! Gaussian streams, and exact simulation of the limiting `(h, theta)`
//! process (unit-rate Brownian motion in h, unit drift in theta).

use crate::field::StreamFunction;
use crate::geom::{self, Vec2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("state became non-finite at t = {0} (step-size policy bug or blow-up)")]
    NonFiniteState(f64),
}

/// Counter-based Gaussian increment source.
///
/// Backed by ChaCha12: `seed` selects the key (via `seed_from_u64`) and
/// `stream_id` the ChaCha stream word, so distinct ids give independent
/// sequences regardless of the order in which workers consume them. The
/// algorithm identity (ChaCha12 + the ziggurat of `rand_distr`) is fixed by
/// the lockfile, which makes runs reproducible across machine counts.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: ChaCha12Rng,
    pub seed: u64,
    pub stream_id: u64,
}

impl GaussianStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        GaussianStream { rng, seed, stream_id }
    }

    /// Standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Pair of independent standard normals.
    #[inline]
    pub fn normal_pair(&mut self) -> (f64, f64) {
        (self.normal(), self.normal())
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.rng)
    }
}

/// Time stepping scheme for the drift part; the noise is additive and exact
/// either way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    /// Predictor-corrector (Heun) on the drift. Twice the field evaluations
    /// per step, much smaller deterministic error; the default.
    HeunDrift,
}

/// Step-size policy and diffusion strength.
///
/// The effective step is
/// `dt = min(dt_max, cfl * wavelength / sup|v|, c_diff * eps^(2*alpha1 - 1))`:
/// the second term resolves the advection, the third keeps the per-step
/// diffusive displacement small against the `eps^alpha1` tube half-width so
/// that crossing detection stays meaningful.
#[derive(Clone, Copy, Debug)]
pub struct IntegratorConfig {
    pub epsilon: f64,
    pub dt_max: f64,
    pub cfl: f64,
    pub c_diff: f64,
    pub alpha1: f64,
    pub scheme: Scheme,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            epsilon: 0.0,
            dt_max: 1e-4,
            cfl: 0.1,
            c_diff: 0.01,
            alpha1: 0.3,
            scheme: Scheme::HeunDrift,
        }
    }
}

impl IntegratorConfig {
    pub fn new(epsilon: f64) -> Self {
        IntegratorConfig { epsilon, ..Default::default() }
    }

    /// Production policy used by the estimators: larger step cap, validated
    /// by the dt-halving bias check in the test suite.
    pub fn production(epsilon: f64) -> Self {
        IntegratorConfig { epsilon, dt_max: 1e-3, ..Default::default() }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_dt_max(mut self, dt_max: f64) -> Self {
        self.dt_max = dt_max;
        self
    }

    /// Resolve the effective step for a given field.
    pub fn effective_dt(&self, f: &StreamFunction) -> f64 {
        let mut dt = self.dt_max;
        let adv = self.cfl * f.min_wavelength() / f.speed_bound();
        dt = dt.min(adv);
        if self.epsilon > 0.0 {
            let diff = self.c_diff * self.epsilon.powf(2.0 * self.alpha1 - 1.0);
            dt = dt.min(diff);
        }
        assert!(dt > 0.0, "degenerate step size");
        dt
    }
}

/// One sample path: torus position plus integer winding, so
/// `plane position = torus_pos + winding` exactly reconstructs the R^2 path.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryState {
    pub torus_pos: Vec2,
    pub winding: [i64; 2],
    pub t: f64,
}

impl TrajectoryState {
    pub fn new(x: Vec2) -> Self {
        TrajectoryState { torus_pos: geom::wrap(x), winding: [0, 0], t: 0.0 }
    }

    #[inline]
    pub fn plane_pos(&self) -> Vec2 {
        [
            self.torus_pos[0] + self.winding[0] as f64,
            self.torus_pos[1] + self.winding[1] as f64,
        ]
    }
}

/// Everything an observer may need about one completed step. `h_*` are stream
/// function values at the two endpoints (computed inside the stepper, where
/// they are free).
#[derive(Clone, Copy, Debug)]
pub struct StepEvent {
    pub t_prev: f64,
    pub t_next: f64,
    pub pos_prev: Vec2,
    pub pos_next: Vec2,
    pub winding_prev: [i64; 2],
    pub winding_next: [i64; 2],
    pub h_prev: f64,
    pub h_next: f64,
    pub v_next: Vec2,
}

impl StepEvent {
    /// Unwrapped displacement of this step.
    #[inline]
    pub fn step_vec(&self) -> Vec2 {
        [
            self.pos_next[0] + (self.winding_next[0] - self.winding_prev[0]) as f64
                - self.pos_prev[0],
            self.pos_next[1] + (self.winding_next[1] - self.winding_prev[1]) as f64
                - self.pos_prev[1],
        ]
    }

    /// Position at fraction `s` of the step (linear interpolation, torus).
    #[inline]
    pub fn pos_at(&self, s: f64) -> Vec2 {
        let d = self.step_vec();
        geom::wrap([self.pos_prev[0] + s * d[0], self.pos_prev[1] + s * d[1]])
    }
}

pub enum StepControl {
    Continue,
    Stop,
}

#[inline]
fn advance(
    f: &StreamFunction,
    scheme: Scheme,
    x: Vec2,
    v: Vec2,
    dt: f64,
    noise: Vec2,
) -> Vec2 {
    match scheme {
        Scheme::EulerMaruyama => [x[0] + v[0] * dt + noise[0], x[1] + v[1] * dt + noise[1]],
        Scheme::HeunDrift => {
            let xp = [x[0] + v[0] * dt, x[1] + v[1] * dt];
            let vp = f.velocity(xp);
            [
                x[0] + 0.5 * (v[0] + vp[0]) * dt + noise[0],
                x[1] + 0.5 * (v[1] + vp[1]) * dt + noise[1],
            ]
        }
    }
}

#[inline]
fn rewrap(state: &mut TrajectoryState, x_new: Vec2) {
    let fl = [x_new[0].floor(), x_new[1].floor()];
    state.torus_pos = [x_new[0] - fl[0], x_new[1] - fl[1]];
    // Saturating: a diverging path is about to be reported as non-finite
    // anyway, and must not panic on winding arithmetic first.
    state.winding[0] = state.winding[0].saturating_add(fl[0] as i64);
    state.winding[1] = state.winding[1].saturating_add(fl[1] as i64);
}

/// Integrate to `t_end` without observation. Bitwise reproducible for a fixed
/// `(seed, stream, scheme, dt policy)`.
pub fn integrate(
    f: &StreamFunction,
    cfg: &IntegratorConfig,
    state: &mut TrajectoryState,
    stream: &mut GaussianStream,
    t_end: f64,
) -> Result<(), SdeError> {
    let dt = cfg.effective_dt(f);
    let sig = (cfg.epsilon * dt).sqrt();
    while state.t < t_end {
        let step = dt.min(t_end - state.t);
        let (sig, step) = if step < dt { ((cfg.epsilon * step).sqrt(), step) } else { (sig, step) };
        let x = state.torus_pos;
        let v = f.velocity(x);
        let (z1, z2) = stream.normal_pair();
        let x_new = advance(f, cfg.scheme, x, v, step, [sig * z1, sig * z2]);
        if !(x_new[0].is_finite() && x_new[1].is_finite()) {
            return Err(SdeError::NonFiniteState(state.t));
        }
        rewrap(state, x_new);
        state.t += step;
    }
    Ok(())
}

/// Integrate with a per-step observer; runs until `t_end` or until the
/// observer stops it. Returns `true` if the observer stopped the run.
pub fn integrate_observed(
    f: &StreamFunction,
    cfg: &IntegratorConfig,
    state: &mut TrajectoryState,
    stream: &mut GaussianStream,
    t_end: f64,
    mut observer: impl FnMut(&StepEvent) -> StepControl,
) -> Result<bool, SdeError> {
    let dt = cfg.effective_dt(f);
    let sig = (cfg.epsilon * dt).sqrt();
    let (mut h, _) = f.h_and_velocity(state.torus_pos);
    while state.t < t_end {
        let step = dt.min(t_end - state.t);
        let sig = if step < dt { (cfg.epsilon * step).sqrt() } else { sig };
        let x = state.torus_pos;
        let w = state.winding;
        let v = f.velocity(x);
        let (z1, z2) = stream.normal_pair();
        let x_new = advance(f, cfg.scheme, x, v, step, [sig * z1, sig * z2]);
        if !(x_new[0].is_finite() && x_new[1].is_finite()) {
            return Err(SdeError::NonFiniteState(state.t));
        }
        rewrap(state, x_new);
        let (h_new, v_new) = f.h_and_velocity(state.torus_pos);
        let ev = StepEvent {
            t_prev: state.t,
            t_next: state.t + step,
            pos_prev: x,
            pos_next: state.torus_pos,
            winding_prev: w,
            winding_next: state.winding,
            h_prev: h,
            h_next: h_new,
            v_next: v_new,
        };
        state.t += step;
        h = h_new;
        if let StepControl::Stop = observer(&ev) {
            return Ok(true);
        }
    }
    Ok(false)
}

// ---------------------------------------------------------------------------
// Limit process in (h, theta): dH = dW, dTheta = dt.
// ---------------------------------------------------------------------------

/// Stopping rule for the limit process.
#[derive(Clone, Copy, Debug)]
pub struct LimitStopRule {
    /// Absorb at `h = 0` once `theta >= arm_theta`.
    pub absorb_after: Option<f64>,
    /// Stop when `|h|` reaches this barrier.
    pub barrier: Option<f64>,
    /// Hard cap on theta (the limit process clock).
    pub theta_cap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitExitKind {
    AbsorbedAtZero,
    HitBarrier,
    CapReached,
}

#[derive(Clone, Copy, Debug)]
pub struct LimitExit {
    pub kind: LimitExitKind,
    pub theta: f64,
    pub h: f64,
}

/// Step the limit process exactly: theta advances deterministically, h by
/// Gaussian increments; a zero crossing inside a step is resolved with the
/// Brownian bridge hitting probability `exp(-2 h1 h2 / dtheta)`.
pub fn simulate_limit_process(
    start_h: f64,
    start_theta: f64,
    rule: &LimitStopRule,
    dtheta: f64,
    stream: &mut GaussianStream,
) -> LimitExit {
    let mut h = start_h;
    let mut theta = start_theta;
    let sqrt_dt = dtheta.sqrt();
    loop {
        if theta >= rule.theta_cap {
            return LimitExit { kind: LimitExitKind::CapReached, theta, h };
        }
        let armed = rule.absorb_after.map(|a| theta >= a).unwrap_or(false);
        let h_new = h + sqrt_dt * stream.normal();
        let theta_new = theta + dtheta;
        if armed {
            let crossed = (h <= 0.0) != (h_new <= 0.0)
                || h == 0.0
                || h_new == 0.0
                || {
                    // Both endpoints on the same side: bridge may still dip.
                    let p = (-2.0 * h * h_new / dtheta).exp();
                    h * h_new > 0.0 && stream.uniform() < p
                };
            if crossed {
                // Crossing time by linear interpolation in h.
                let s = if (h_new - h).abs() > 0.0 {
                    (h / (h - h_new)).clamp(0.0, 1.0)
                } else {
                    0.5
                };
                return LimitExit {
                    kind: LimitExitKind::AbsorbedAtZero,
                    theta: theta + s * dtheta,
                    h: 0.0,
                };
            }
        }
        if let Some(b) = rule.barrier {
            if h_new.abs() >= b {
                return LimitExit {
                    kind: LimitExitKind::HitBarrier,
                    theta: theta_new,
                    h: b.copysign(h_new),
                };
            }
        }
        h = h_new;
        theta = theta_new;
        // Arm exactly at the threshold so absorption cannot be skipped by
        // stepping over it.
        if let Some(a) = rule.absorb_after {
            if theta < a && theta + dtheta > a {
                theta = a;
            }
        }
    }
}

/// First-passage density of standard Brownian motion from `h0 > 0` to 0:
/// `h0 t^(-3/2) exp(-h0^2 / (2t)) / sqrt(2 pi)`.
pub fn first_passage_density(h0: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    h0 / (2.0 * std::f64::consts::PI * t * t * t).sqrt() * (-h0 * h0 / (2.0 * t)).exp()
}

/// CDF of the first-passage time from `h0 > 0` to 0: `2 Phi(-h0 / sqrt(t))`.
pub fn first_passage_cdf(h0: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    2.0 * normal_cdf(-h0 / t.sqrt())
}

/// Standard normal CDF via erfc.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes rational approximation,
/// |rel err| < 1.2e-7, with symmetry for negative arguments).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Density at time `t` of Brownian motion started at 0 and killed at the two
/// barriers `±b`, evaluated by the method of images, plus the two absorbed
/// atom masses (equal by symmetry).
pub fn two_barrier_density(u: f64, t: f64, b: f64, terms: i32) -> f64 {
    if u.abs() >= b {
        return 0.0;
    }
    let phi = |y: f64| (-(y * y) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
    let mut p = 0.0;
    for k in -terms..=terms {
        let shift = 4.0 * b * k as f64;
        p += phi(u - shift) - phi(2.0 * b - u - shift);
    }
    p.max(0.0)
}

/// Mass absorbed at each barrier (`±b`) by time `t` for a start at 0.
pub fn two_barrier_atom_mass(t: f64, b: f64, terms: i32) -> f64 {
    // Integrate the surviving density numerically; the atoms carry the rest.
    let n = 2000;
    let mut surv = 0.0;
    for i in 0..n {
        let u = -b + (i as f64 + 0.5) * (2.0 * b / n as f64);
        surv += two_barrier_density(u, t, b, terms);
    }
    surv *= 2.0 * b / n as f64;
    (0.5 * (1.0 - surv)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Preset, StreamFunction};

    #[test]
    fn streams_are_deterministic_and_independent() {
        let a: Vec<f64> = {
            let mut s = GaussianStream::new(7, 3);
            (0..64).map(|_| s.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut s = GaussianStream::new(7, 3);
            (0..64).map(|_| s.normal()).collect()
        };
        assert_eq!(a, b);

        let n = 1_000_000usize;
        let mut s1 = GaussianStream::new(7, 1);
        let mut s2 = GaussianStream::new(7, 2);
        let (mut m1, mut m2, mut v1, mut v2, mut cross) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = s1.normal();
            let y = s2.normal();
            m1 += x;
            m2 += y;
            v1 += x * x;
            v2 += y * y;
            cross += x * y;
        }
        let nf = n as f64;
        m1 /= nf;
        m2 /= nf;
        assert!(m1.abs() < 4.0 / nf.sqrt(), "mean {m1}");
        assert!(m2.abs() < 4.0 / nf.sqrt());
        assert!((v1 / nf - 1.0).abs() < 0.01);
        assert!((v2 / nf - 1.0).abs() < 0.01);
        let corr = cross / nf - m1 * m2;
        assert!(corr.abs() < 4.0 / nf.sqrt(), "cross-corr {corr}");
    }

    #[test]
    fn pure_brownian_covariance() {
        // v = 0, eps = 0.04: cov(X_T)/T = eps * I within 3 standard errors.
        let f = StreamFunction::zero();
        let eps = 0.04;
        let cfg = IntegratorConfig { epsilon: eps, dt_max: 0.01, ..Default::default() };
        let t_end = 100.0;
        let n = 10_000;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let mut st = TrajectoryState::new([0.5, 0.5]);
            let mut stream = GaussianStream::new(42, i as u64);
            integrate(&f, &cfg, &mut st, &mut stream, t_end).unwrap();
            let p = st.plane_pos();
            let d = [p[0] - 0.5, p[1] - 0.5];
            sxx += d[0] * d[0];
            syy += d[1] * d[1];
            sxy += d[0] * d[1];
        }
        let nf = n as f64;
        let (cxx, cyy, cxy) = (sxx / nf / t_end, syy / nf / t_end, sxy / nf / t_end);
        // var of per-path X^2/T is 2 eps^2; 3 standard errors
        let se = (2.0f64).sqrt() * eps / nf.sqrt() * 3.0;
        assert!((cxx - eps).abs() < se, "cxx {cxx} vs {eps} +- {se}");
        assert!((cyy - eps).abs() < se);
        assert!(cxy.abs() < se);
    }

    #[test]
    fn deterministic_flow_conserves_h_default_policy() {
        // eps = 0 under the default dt policy; one revolution at H = 0.3.
        let f = StreamFunction::preset(Preset::CellularSine);
        // A point with H close to 0.3 inside the positive cell.
        let x0 = [0.25, (0.3f64).asin() / (2.0 * std::f64::consts::PI)];
        let h0 = f.h(x0);
        assert!((h0 - 0.3).abs() < 1e-12);
        let cfg = IntegratorConfig::new(0.0);
        let mut st = TrajectoryState::new(x0);
        let mut stream = GaussianStream::new(1, 1);
        // One period is below 1 time unit for this level.
        integrate(&f, &cfg, &mut st, &mut stream, 1.0).unwrap();
        assert!((f.h(st.torus_pos) - h0).abs() < 1e-6);
    }

    #[test]
    fn winding_matches_plane_integration() {
        let f = StreamFunction::preset(Preset::OpenChannel);
        let cfg = IntegratorConfig { epsilon: 0.01, dt_max: 1e-3, ..Default::default() };
        let dt = cfg.effective_dt(&f);
        let sig = (cfg.epsilon * dt).sqrt();

        let mut torus = TrajectoryState::new([0.9, 0.05]);
        let mut plane = [0.9, 0.05];
        let mut s1 = GaussianStream::new(9, 0);
        let mut s2 = GaussianStream::new(9, 0);
        for _ in 0..100 {
            let t_next = torus.t + dt;
            integrate(&f, &cfg, &mut torus, &mut s1, t_next).unwrap();
            // Plane stepping without reduction, same noise.
            let v = {
                let e = f.evaluate_raw(plane);
                e.v
            };
            let (z1, z2) = s2.normal_pair();
            let xp = [plane[0] + v[0] * dt, plane[1] + v[1] * dt];
            let vp = f.evaluate_raw(xp).v;
            plane = [
                plane[0] + 0.5 * (v[0] + vp[0]) * dt + sig * z1,
                plane[1] + 0.5 * (v[1] + vp[1]) * dt + sig * z2,
            ];
            let tp = torus.plane_pos();
            assert!((tp[0] - plane[0]).abs() < 1e-9, "{} vs {}", tp[0], plane[0]);
            assert!((tp[1] - plane[1]).abs() < 1e-9);
        }
        assert!(torus.winding != [0, 0] || torus.t < 0.05, "path should have wrapped by now");
    }

    #[test]
    fn limit_process_hit_probability() {
        // Start h = 1, absorb at 0, cap theta = 1: P(hit) = 2 Phi(-1).
        let rule = LimitStopRule { absorb_after: Some(0.0), barrier: None, theta_cap: 1.0 };
        let n = 100_000;
        let mut hits = 0usize;
        let mut stream = GaussianStream::new(5, 0);
        for _ in 0..n {
            let e = simulate_limit_process(1.0, 0.0, &rule, 1e-3, &mut stream);
            if e.kind == LimitExitKind::AbsorbedAtZero {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let want = 2.0 * normal_cdf(-1.0);
        assert!((p - want).abs() < 0.005, "hit prob {p} vs {want}");
    }

    #[test]
    fn limit_process_sign_symmetry() {
        // From h = 0, the sign at a fixed horizon is a fair coin.
        let rule = LimitStopRule { absorb_after: None, barrier: None, theta_cap: 0.5 };
        let n = 40_000;
        let mut neg = 0usize;
        let mut stream = GaussianStream::new(6, 0);
        for _ in 0..n {
            let e = simulate_limit_process(0.0, 0.0, &rule, 1e-3, &mut stream);
            if e.h < 0.0 {
                neg += 1;
            }
        }
        let p = neg as f64 / n as f64;
        assert!((p - 0.5).abs() < 3.0 * 0.5 / (n as f64).sqrt(), "P(h<0) = {p}");
    }

    #[test]
    fn first_passage_distribution_ks() {
        let h0 = 0.7;
        let rule = LimitStopRule { absorb_after: Some(0.0), barrier: None, theta_cap: 400.0 };
        let n = 100_000;
        let mut times: Vec<f64> = Vec::with_capacity(n);
        let mut stream = GaussianStream::new(11, 0);
        for _ in 0..n {
            let e = simulate_limit_process(h0, 0.0, &rule, 2e-3, &mut stream);
            if e.kind == LimitExitKind::AbsorbedAtZero {
                times.push(e.theta);
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // KS distance against the reflection-principle CDF, conditioned on
        // absorption by the cap.
        let total_mass = first_passage_cdf(h0, rule.theta_cap);
        let m = times.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, &t) in times.iter().enumerate() {
            let emp = (i + 1) as f64 / m;
            let the = first_passage_cdf(h0, t) / total_mass;
            ks = ks.max((emp - the).abs());
        }
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn non_finite_state_reported() {
        // A corrupted (NaN) state must be reported, not silently wrapped.
        let f = StreamFunction::preset(Preset::CellularSine);
        let cfg = IntegratorConfig::new(0.01);
        let mut st = TrajectoryState::new([0.3, 0.3]);
        st.torus_pos[0] = f64::NAN;
        let mut stream = GaussianStream::new(1, 1);
        match integrate(&f, &cfg, &mut st, &mut stream, 1.0) {
            Err(SdeError::NonFiniteState(_)) => {}
            other => panic!("expected NonFiniteState, got {other:?}"),
        }
    }

    #[test]
    fn two_barrier_density_normalizes() {
        let b = 1.5;
        let t = 0.8;
        let n = 4000;
        let mut mass = 0.0;
        for i in 0..n {
            let u = -b + (i as f64 + 0.5) * 2.0 * b / n as f64;
            mass += two_barrier_density(u, t, b, 8);
        }
        mass *= 2.0 * b / n as f64;
        let atoms = 2.0 * two_barrier_atom_mass(t, b, 8);
        assert!((mass + atoms - 1.0).abs() < 1e-6, "mass {mass} atoms {atoms}");
    }
}
