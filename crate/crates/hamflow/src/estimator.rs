//! Effective-diffusivity estimators: long-time mean-square displacement,
//! Green-Kubo velocity autocorrelation of the accelerated process, graph
//! averaging of observables over level sets, scaling-exponent fits, and the
//! channel-to-channel transition chain for the cross-channel component.
//!
//! Normalization note: the diffusivity is `lim E[X_i X_j] / t`, without the
//! customary 1/2, everywhere in this crate.

use crate::field::StreamFunction;
use crate::geom::{self, Vec2};
use crate::levelcoeffs::{self, CellFrame};
use crate::sde::{self, GaussianStream, IntegratorConfig, StepControl, TrajectoryState};
use crate::topology::{FlowClass, FlowTopology, FwGraph};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("estimate still drifting at t_final: {0}")]
    InsufficientMixing(String),
    #[error("velocity autocorrelation has not decayed by t_cut = {t_cut} (|C|/C0 = {ratio:.3e})")]
    TailNotDecaying { t_cut: f64, ratio: f64 },
    #[error("cannot fit a power law through a non-positive value: {0}")]
    NonPositiveValue(f64),
    #[error("need at least 3 epsilon points spanning a decade, got {0}")]
    TooFewPoints(usize),
    #[error("flow has no open channels")]
    NotChannelFlow,
    #[error("integration failed: {0}")]
    Sde(#[from] sde::SdeError),
    #[error("level tracing failed: {0}")]
    Level(#[from] levelcoeffs::LevelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EstimatorMethod {
    Msd,
    GreenKubo,
    Chain,
}

/// A 2x2 effective-diffusivity estimate with per-entry standard errors.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EffDiffEstimate {
    pub d: [[f64; 2]; 2],
    pub stderr: [[f64; 2]; 2],
    pub method: EstimatorMethod,
    pub epsilon: f64,
    pub n_paths: usize,
    pub t_final: f64,
}

impl EffDiffEstimate {
    /// Smallest eigenvalue of the symmetrized matrix (PSD check).
    pub fn min_eigenvalue(&self) -> f64 {
        let a = self.d[0][0];
        let b = 0.5 * (self.d[0][1] + self.d[1][0]);
        let c = self.d[1][1];
        let tr = a + c;
        let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
        0.5 * (tr - disc)
    }
}

// ---------------------------------------------------------------------------
// Mean-square displacement
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct MsdConfig {
    pub epsilon: f64,
    pub n_paths: usize,
    pub t_final: f64,
    pub seed: u64,
    pub dt_max: f64,
    /// When true, a drift beyond 3 sigma between the half-time and full-time
    /// windows is an error.
    pub strict_mixing_check: bool,
}

impl MsdConfig {
    pub fn new(epsilon: f64, n_paths: usize, t_final: f64, seed: u64) -> Self {
        MsdConfig { epsilon, n_paths, t_final, seed, dt_max: 1e-3, strict_mixing_check: true }
    }
}

/// `D_ij = E[X_i X_j] / t` at `t_final` over paths started from the uniform
/// measure on the periodicity cell, by displacement from the start point.
/// Standard errors by path batching; drift between the half-time and
/// full-time windows beyond 3 sigma reports insufficient mixing.
pub fn estimate_msd(f: &StreamFunction, cfg: &MsdConfig) -> Result<EffDiffEstimate, EstimatorError> {
    let icfg = IntegratorConfig {
        epsilon: cfg.epsilon,
        dt_max: cfg.dt_max,
        ..Default::default()
    };
    let n = cfg.n_paths;
    let samples: Vec<([f64; 3], [f64; 3])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = GaussianStream::new(cfg.seed, i as u64);
            let x0 = [stream.uniform(), stream.uniform()];
            let mut st = TrajectoryState::new(x0);
            sde::integrate(f, &icfg, &mut st, &mut stream, cfg.t_final / 2.0)
                .expect("finite state");
            let p_half = st.plane_pos();
            let d_half = geom::sub(p_half, x0);
            sde::integrate(f, &icfg, &mut st, &mut stream, cfg.t_final).expect("finite state");
            let p = st.plane_pos();
            let d = geom::sub(p, x0);
            (
                [d[0] * d[0], d[1] * d[1], d[0] * d[1]],
                [
                    d_half[0] * d_half[0],
                    d_half[1] * d_half[1],
                    d_half[0] * d_half[1],
                ],
            )
        })
        .collect();

    let full: Vec<[f64; 3]> = samples.iter().map(|s| s.0).collect();
    let half: Vec<[f64; 3]> = samples.iter().map(|s| s.1).collect();
    let (d_full, se_full) = batched_mean(&full, cfg.t_final);
    let (d_half, se_half) = batched_mean(&half, cfg.t_final / 2.0);

    // Mixing check on the trace.
    let drift = (d_full[0] - d_half[0]) + (d_full[1] - d_half[1]);
    let sigma = (se_full[0] * se_full[0]
        + se_full[1] * se_full[1]
        + se_half[0] * se_half[0]
        + se_half[1] * se_half[1])
        .sqrt();
    if cfg.strict_mixing_check && drift.abs() > 3.0 * sigma {
        return Err(EstimatorError::InsufficientMixing(format!(
            "trace moved {drift:.3e} between t/2 and t, sigma {sigma:.3e}"
        )));
    }

    Ok(EffDiffEstimate {
        d: [[d_full[0], d_full[2]], [d_full[2], d_full[1]]],
        stderr: [[se_full[0], se_full[2]], [se_full[2], se_full[1]]],
        method: EstimatorMethod::Msd,
        epsilon: cfg.epsilon,
        n_paths: n,
        t_final: cfg.t_final,
    })
}

fn batched_mean(samples: &[[f64; 3]], t: f64) -> ([f64; 3], [f64; 3]) {
    let n = samples.len();
    let n_batches = 32.min(n);
    let mut batch_means = vec![[0.0f64; 3]; n_batches];
    let mut batch_counts = vec![0usize; n_batches];
    for (i, s) in samples.iter().enumerate() {
        let b = i * n_batches / n;
        for c in 0..3 {
            batch_means[b][c] += s[c];
        }
        batch_counts[b] += 1;
    }
    for b in 0..n_batches {
        for c in 0..3 {
            batch_means[b][c] /= (batch_counts[b].max(1) as f64) * t;
        }
    }
    let mut mean = [0.0f64; 3];
    for bm in &batch_means {
        for c in 0..3 {
            mean[c] += bm[c];
        }
    }
    for c in 0..3 {
        mean[c] /= n_batches as f64;
    }
    let mut se = [0.0f64; 3];
    for bm in &batch_means {
        for c in 0..3 {
            se[c] += (bm[c] - mean[c]) * (bm[c] - mean[c]);
        }
    }
    for c in 0..3 {
        se[c] = (se[c] / (n_batches as f64 - 1.0) / n_batches as f64).sqrt();
    }
    (mean, se)
}

// ---------------------------------------------------------------------------
// Green-Kubo
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GreenKuboConfig {
    pub epsilon: f64,
    /// Velocity component: 0 for the first coordinate, 1 for the second.
    pub component: usize,
    pub n_paths: usize,
    /// Hard cap on the autocorrelation integral (accelerated clock).
    pub t_cut_max: f64,
    pub seed: u64,
}

impl GreenKuboConfig {
    pub fn new(epsilon: f64, component: usize, n_paths: usize, seed: u64) -> Self {
        GreenKuboConfig { epsilon, component, n_paths, t_cut_max: 12.0, seed }
    }
}

pub struct GreenKuboDetail {
    pub estimate: EffDiffEstimate,
    pub lag_grid: Vec<f64>,
    pub vacf: Vec<f64>,
    pub t_cut: f64,
    pub tail_bound: f64,
}

/// Green-Kubo via the accelerated process (drift `v / eps`, unit diffusion):
/// `D_cc = eps + (2/eps) * Int_0^{t_cut} E[v_c(X~_0) v_c(X~_s)] ds`, with
/// `X~_0` uniform on the torus (the invariant measure). Integration stops
/// adaptively once |VACF| stays below 1e-3 of its initial value for five
/// consecutive windows.
pub fn estimate_green_kubo(
    f: &StreamFunction,
    cfg: &GreenKuboConfig,
) -> Result<GreenKuboDetail, EstimatorError> {
    let c = cfg.component;
    estimate_green_kubo_observable(f, cfg, |x| f.velocity(x)[c])
}

/// Same machinery with an arbitrary observable in place of the velocity
/// component (used by the fluctuation-reduction diagnostics).
pub fn estimate_green_kubo_observable(
    f: &StreamFunction,
    cfg: &GreenKuboConfig,
    observable: impl Fn(Vec2) -> f64 + Sync,
) -> Result<GreenKuboDetail, EstimatorError> {
    let accel = f.scaled(1.0 / cfg.epsilon);
    let icfg = IntegratorConfig {
        epsilon: 1.0,
        dt_max: 2e-3,
        ..Default::default()
    };
    let dt = icfg.effective_dt(&accel);
    // Record the observable every `rec_every` steps; lag resolution must
    // resolve the decay (torus mixing time is O(1) in this clock).
    let rec_every = ((5e-3 / dt).round() as usize).max(1);
    let d_rec = dt * rec_every as f64;
    let n_lags = (cfg.t_cut_max / d_rec).ceil() as usize;
    let run_t = cfg.t_cut_max * 3.0;
    let n_rec = (run_t / d_rec) as usize;

    let n = cfg.n_paths;
    let acc: Vec<(Vec<f64>, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = GaussianStream::new(cfg.seed, i as u64);
            let x0 = [stream.uniform(), stream.uniform()];
            let mut st = TrajectoryState::new(x0);
            let mut series = Vec::with_capacity(n_rec + 1);
            series.push(observable(st.torus_pos));
            let mut step_count = 0usize;
            let _ = sde::integrate_observed(
                &accel,
                &icfg,
                &mut st,
                &mut stream,
                run_t,
                |ev| {
                    step_count += 1;
                    if step_count % rec_every == 0 {
                        series.push(observable(ev.pos_next));
                    }
                    StepControl::Continue
                },
            );
            // Time-averaged lag products for this path.
            let m = series.len();
            let mut corr = vec![0.0f64; n_lags + 1];
            let mut count = 0u64;
            let stride = 4usize;
            let mut start = 0usize;
            while start + n_lags < m {
                for k in 0..=n_lags {
                    corr[k] += series[start] * series[start + k];
                }
                count += 1;
                start += stride;
            }
            (corr, count)
        })
        .collect();

    let mut vacf = vec![0.0f64; n_lags + 1];
    let mut total = 0u64;
    for (corr, count) in &acc {
        for k in 0..=n_lags {
            vacf[k] += corr[k];
        }
        total += count;
    }
    for v in vacf.iter_mut() {
        *v /= total.max(1) as f64;
    }
    let c0 = vacf[0].abs().max(1e-300);

    // Adaptive cut: five consecutive lags below 1e-3 * C(0).
    let mut cut_idx = None;
    let mut streak = 0;
    for (k, v) in vacf.iter().enumerate().skip(1) {
        if v.abs() < 1e-3 * c0 {
            streak += 1;
            if streak >= 5 {
                cut_idx = Some(k);
                break;
            }
        } else {
            streak = 0;
        }
    }
    let Some(cut_idx) = cut_idx else {
        return Err(EstimatorError::TailNotDecaying {
            t_cut: cfg.t_cut_max,
            ratio: vacf[n_lags].abs() / c0,
        });
    };
    let t_cut = cut_idx as f64 * d_rec;

    // Trapezoid integral up to the cut; tail bounded by the cut level times
    // the fitted decay time.
    let mut integral = 0.0;
    for k in 1..=cut_idx {
        integral += 0.5 * (vacf[k] + vacf[k - 1]) * d_rec;
    }
    let tail_bound = 1e-3 * c0 * t_cut.max(d_rec * 5.0);

    let d_val = cfg.epsilon + 2.0 / cfg.epsilon * integral;
    // Stderr: path-batch the integral.
    let n_batches = 16.min(n.max(1));
    let mut batch_int = vec![0.0f64; n_batches];
    let mut batch_n = vec![0.0f64; n_batches];
    for (i, (corr, count)) in acc.iter().enumerate() {
        let b = i * n_batches / n.max(1);
        if *count == 0 {
            continue;
        }
        let mut integ = 0.0;
        for k in 1..=cut_idx {
            integ += 0.5 * (corr[k] + corr[k - 1]) / *count as f64 * d_rec;
        }
        batch_int[b] += integ;
        batch_n[b] += 1.0;
    }
    let means: Vec<f64> = batch_int
        .iter()
        .zip(&batch_n)
        .filter(|(_, n)| **n > 0.0)
        .map(|(s, n)| s / n)
        .collect();
    let bm = means.iter().sum::<f64>() / means.len() as f64;
    let bv = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>()
        / (means.len().max(2) - 1) as f64;
    let se_int = (bv / means.len() as f64).sqrt();
    let se = 2.0 / cfg.epsilon * se_int + 2.0 / cfg.epsilon * tail_bound;

    let c = cfg.component;
    let mut d = [[f64::NAN; 2]; 2];
    let mut stderr = [[f64::NAN; 2]; 2];
    d[c][c] = d_val;
    stderr[c][c] = se;
    Ok(GreenKuboDetail {
        estimate: EffDiffEstimate {
            d,
            stderr,
            method: EstimatorMethod::GreenKubo,
            epsilon: cfg.epsilon,
            n_paths: n,
            t_final: run_t,
        },
        lag_grid: (0..=n_lags).map(|k| k as f64 * d_rec).collect(),
        vacf,
        t_cut,
        tail_bound,
    })
}

// ---------------------------------------------------------------------------
// Graph averaging
// ---------------------------------------------------------------------------

/// An observable averaged over one deterministic revolution on each level
/// curve, tabulated per graph edge on an interior H grid.
#[derive(Clone, Debug, Serialize)]
pub struct GraphAveragedFunction {
    /// Per graph edge: (H grid, averaged values).
    pub per_edge: Vec<(Vec<f64>, Vec<f64>)>,
}

/// `avg(e, H) = (∮ obs / |grad H| dl) / (∮ dl / |grad H|)` over the level
/// curve `{H}` in the cell of edge `e` -- the time average over one rotation,
/// since `|v| = |grad H|` and `T = q`.
pub fn graph_average(
    f: &StreamFunction,
    topo: &FlowTopology,
    graph: &FwGraph,
    observable: impl Fn(Vec2) -> f64,
    n_grid: usize,
) -> Result<GraphAveragedFunction, EstimatorError> {
    let mut per_edge = Vec::new();
    for ge in &graph.edges {
        let frame = CellFrame::new(topo, f, ge.cell);
        // Interior H grid with a 2% margin away from the critical ends.
        let span = ge.h_hi - ge.h_lo;
        let mut h_grid = Vec::with_capacity(n_grid);
        let mut values = Vec::with_capacity(n_grid);
        for k in 0..n_grid {
            let h = ge.h_lo + span * (0.02 + 0.96 * (k as f64 + 0.5) / n_grid as f64);
            let eta = frame.sign * (h - frame.boundary_level);
            if !(eta > 0.0) {
                continue;
            }
            let eta = eta.min(frame.eta0 * 0.999);
            let contour = levelcoeffs::trace_contour(&frame, eta)?;
            let mut num = 0.0;
            let mut den = 0.0;
            let poly = &contour.polyline;
            let mut prev_g = geom::norm(f.grad(poly[0])).max(1e-300);
            let mut prev_o = observable(geom::wrap(poly[0]));
            for w in poly.windows(2) {
                let g = geom::norm(f.grad(w[1])).max(1e-300);
                let o = observable(geom::wrap(w[1]));
                let dl = geom::norm(geom::sub(w[1], w[0]));
                num += 0.5 * (prev_o / prev_g + o / g) * dl;
                den += 0.5 * (1.0 / prev_g + 1.0 / g) * dl;
                prev_g = g;
                prev_o = o;
            }
            h_grid.push(frame.eta_to_h(eta));
            values.push(num / den);
        }
        per_edge.push((h_grid, values));
    }
    Ok(GraphAveragedFunction { per_edge })
}

// ---------------------------------------------------------------------------
// Scaling fits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ScalingFit {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// 95% confidence half-width of the slope.
    pub slope_ci: f64,
}

/// Weighted OLS of `ln D` against `ln eps`; weights from per-point relative
/// standard errors when available.
pub fn fit_scaling(
    estimates: &[EffDiffEstimate],
    component: (usize, usize),
) -> Result<ScalingFit, EstimatorError> {
    if estimates.len() < 3 {
        return Err(EstimatorError::TooFewPoints(estimates.len()));
    }
    let (i, j) = component;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut eps = Vec::new();
    let mut vals = Vec::new();
    for e in estimates {
        let v = e.d[i][j];
        if !(v > 0.0) {
            return Err(EstimatorError::NonPositiveValue(v));
        }
        let se = e.stderr[i][j];
        let rel = if se.is_finite() && se > 0.0 { se / v } else { 0.05 };
        xs.push(e.epsilon.ln());
        ys.push(v.ln());
        ws.push(1.0 / (rel * rel).max(1e-12));
        eps.push(e.epsilon);
        vals.push(v);
    }
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for k in 0..xs.len() {
        sxx += ws[k] * (xs[k] - mx) * (xs[k] - mx);
        sxy += ws[k] * (xs[k] - mx) * (ys[k] - my);
        syy += ws[k] * (ys[k] - my) * (ys[k] - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    // Residual variance (weighted) for the slope CI.
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let mut rss = 0.0;
    for k in 0..xs.len() {
        let r = ys[k] - (intercept + slope * xs[k]);
        rss += ws[k] * r * r;
    }
    let slope_var = rss / dof / sxx;
    Ok(ScalingFit {
        epsilons: eps,
        values: vals,
        slope,
        intercept,
        r_squared,
        slope_ci: 1.96 * slope_var.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Channel transition chain (cross-channel diffusivity)
// ---------------------------------------------------------------------------

/// Cross-channel diffusivity from the chain of transitions of the
/// accelerated process between the non-compact separatrix levels:
/// `D22 = eps * d / E[tau]`, where `d` is the CLT variance of the
/// level-to-level vertical displacements and `tau` the transition times in
/// the accelerated clock.
pub fn channel_chain_d22(
    f: &StreamFunction,
    topo: &FlowTopology,
    epsilon: f64,
    n_steps: usize,
    seed: u64,
) -> Result<EffDiffEstimate, EstimatorError> {
    let FlowClass::OpenChannels { .. } = topo.flow_class else {
        return Err(EstimatorError::NotChannelFlow);
    };
    // Non-compact separatrix components with their levels and anchor x2.
    let channels: Vec<(f64, f64)> = topo
        .sep_components
        .iter()
        .filter(|c| !c.windings.is_empty())
        .map(|c| {
            let anchor = topo.critical_points[c.saddles[0]].location[1];
            (c.level, anchor)
        })
        .collect();
    if channels.len() < 2 {
        return Err(EstimatorError::NotChannelFlow);
    }

    let accel = f.scaled(1.0 / epsilon);
    let icfg = IntegratorConfig { epsilon: 1.0, dt_max: 2e-3, ..Default::default() };
    let n_chains = 2 * rayon::current_num_threads().max(1);
    let per_chain = n_steps.div_ceil(n_chains);

    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chains)
        .into_par_iter()
        .map(|ci| {
            let mut stream = GaussianStream::new(seed, ci as u64);
            let mut st = TrajectoryState::new([stream.uniform(), stream.uniform()]);
            let mut deltas = Vec::with_capacity(per_chain);
            let mut taus = Vec::with_capacity(per_chain);
            // Current component: index into `channels`, with its plane copy.
            let mut current: Option<(usize, f64)> = None;
            let mut t_last = 0.0;
            let _ = sde::integrate_observed(&accel, &icfg, &mut st, &mut stream, 1e12, |ev| {
                for (k, &(level_k, anchor_k)) in channels.iter().enumerate() {
                    // The accelerated field's H is H/eps; compare in original
                    // units.
                    let h_prev = ev.h_prev * epsilon;
                    let h_next = ev.h_next * epsilon;
                    if (h_prev - level_k) == 0.0
                        || ((h_prev - level_k) <= 0.0) == ((h_next - level_k) <= 0.0)
                    {
                        continue;
                    }
                    match current {
                        Some((cur, _)) if cur == k => {}
                        Some((_, a_prev)) => {
                            let frac = ((h_prev - level_k) / (h_prev - h_next)).clamp(0.0, 1.0);
                            let x2_plane = ev.pos_prev[1]
                                + frac * ev.step_vec()[1]
                                + ev.winding_prev[1] as f64;
                            let copy = (x2_plane - anchor_k).round();
                            let a_now = anchor_k + copy;
                            deltas.push(a_now - a_prev);
                            let t_hit = ev.t_prev + frac * (ev.t_next - ev.t_prev);
                            taus.push(t_hit - t_last);
                            t_last = t_hit;
                            current = Some((k, a_now));
                        }
                        None => {
                            let frac = ((h_prev - level_k) / (h_prev - h_next)).clamp(0.0, 1.0);
                            let x2_plane = ev.pos_prev[1]
                                + frac * ev.step_vec()[1]
                                + ev.winding_prev[1] as f64;
                            let copy = (x2_plane - anchor_k).round();
                            current = Some((k, anchor_k + copy));
                            t_last = ev.t_prev + frac * (ev.t_next - ev.t_prev);
                        }
                    }
                    break;
                }
                if deltas.len() >= per_chain {
                    StepControl::Stop
                } else {
                    StepControl::Continue
                }
            });
            (deltas, taus)
        })
        .collect();

    // Batch-means variance of the deltas and mean transition time.
    let mut all_n = 0usize;
    let mut tau_sum = 0.0;
    let mut mean_delta = 0.0;
    for (d, t) in &results {
        all_n += d.len();
        tau_sum += t.iter().sum::<f64>();
        mean_delta += d.iter().sum::<f64>();
    }
    if all_n < 64 {
        return Err(EstimatorError::InsufficientMixing(format!(
            "only {all_n} channel transitions recorded"
        )));
    }
    mean_delta /= all_n as f64;
    let mean_tau = tau_sum / all_n as f64;
    let batch = 32usize;
    let mut bvars = Vec::new();
    for (d, _) in &results {
        let mut i = 0;
        while i + batch <= d.len() {
            let s: f64 = d[i..i + batch].iter().map(|x| x - mean_delta).sum();
            bvars.push(s * s / batch as f64);
            i += batch;
        }
    }
    let dvar = bvars.iter().sum::<f64>() / bvars.len().max(1) as f64;
    let dvar_se = {
        let m = dvar;
        let v = bvars.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            / (bvars.len().max(2) - 1) as f64;
        (v / bvars.len().max(1) as f64).sqrt()
    };
    let d22 = epsilon * dvar / mean_tau;
    let se = epsilon * dvar_se / mean_tau;
    let mut d = [[f64::NAN; 2]; 2];
    let mut stderr = [[f64::NAN; 2]; 2];
    d[1][1] = d22;
    stderr[1][1] = se;
    Ok(EffDiffEstimate {
        d,
        stderr,
        method: EstimatorMethod::Chain,
        epsilon,
        n_paths: all_n,
        t_final: tau_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Preset;

    #[test]
    fn molecular_baseline() {
        // v = 0: D = eps I within 3 standard errors.
        let f = StreamFunction::zero();
        let cfg = MsdConfig { dt_max: 5e-3, ..MsdConfig::new(0.04, 4000, 50.0, 12) };
        let est = estimate_msd(&f, &cfg).unwrap();
        for i in 0..2 {
            assert!(
                (est.d[i][i] - 0.04).abs() < 3.0 * est.stderr[i][i],
                "D{i}{i} = {} +- {}",
                est.d[i][i],
                est.stderr[i][i]
            );
        }
        assert!(est.d[0][1].abs() < 3.0 * est.stderr[0][1].max(1e-4));
        assert!(est.min_eigenvalue() > -1e-12);
    }

    #[test]
    fn shear_taylor_dispersion_msd() {
        // v = (sin 2 pi x2, 0), eps = 0.1: D11 = eps + 1/(2 pi^2 eps).
        let f = StreamFunction::shear();
        let eps = 0.1;
        let want = eps + 1.0 / (2.0 * std::f64::consts::PI.powi(2) * eps);
        let cfg = MsdConfig { dt_max: 2e-3, ..MsdConfig::new(eps, 6000, 80.0, 21) };
        let est = estimate_msd(&f, &cfg).unwrap();
        let rel = (est.d[0][0] - want).abs() / want;
        assert!(rel < 0.05, "D11 {} vs {} (rel {:.3})", est.d[0][0], want, rel);
    }

    #[test]
    fn shear_taylor_dispersion_green_kubo() {
        let f = StreamFunction::shear();
        let eps = 0.1;
        let want = eps + 1.0 / (2.0 * std::f64::consts::PI.powi(2) * eps);
        let cfg = GreenKuboConfig::new(eps, 0, 600, 33);
        let detail = estimate_green_kubo(&f, &cfg).unwrap();
        let got = detail.estimate.d[0][0];
        let rel = (got - want).abs() / want;
        assert!(rel < 0.05, "GK D11 {got} vs {want} (rel {rel:.3})");
        // The VACF of sin under unit-rate vertical diffusion decays like
        // exp(-2 pi^2 s); check the measured half-life roughly.
        let c0 = detail.vacf[0];
        assert!((c0 - 0.5).abs() < 0.02, "C(0) = {c0}");
    }

    #[test]
    fn zero_velocity_component_gives_molecular_gk() {
        // H depending on x2 only has v2 = 0: the channel integral vanishes
        // and D22 = eps.
        let f = StreamFunction::shear();
        let cfg = GreenKuboConfig::new(0.1, 1, 200, 5);
        let detail = estimate_green_kubo(&f, &cfg).unwrap();
        assert!((detail.estimate.d[1][1] - 0.1).abs() < 0.002);
    }

    #[test]
    fn graph_average_constant_and_v2() {
        let f = StreamFunction::preset(Preset::CellularSine);
        let topo = FlowTopology::build(&f).unwrap();
        let ones = graph_average(&f, &topo, &topo.graph, |_| 1.0, 8).unwrap();
        for (_, vals) in &ones.per_edge {
            for v in vals {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        let v2 = graph_average(&f, &topo, &topo.graph, |x| f.velocity(x)[1], 8).unwrap();
        for (_, vals) in &v2.per_edge {
            for v in vals {
                assert!(v.abs() < 1e-6, "v2 average {v}");
            }
        }
    }

    #[test]
    fn graph_average_v1_on_channels() {
        let f = StreamFunction::preset(Preset::OpenChannel);
        let topo = FlowTopology::build(&f).unwrap();
        let v1 = graph_average(&f, &topo, &topo.graph, |x| f.velocity(x)[0], 6).unwrap();
        // The two channel edges carry nonzero averages of opposite sign; the
        // disk edges average to ~0... (closed orbits have zero net drift).
        let mut channel_means = Vec::new();
        for (ge, (_, vals)) in topo.graph.edges.iter().zip(&v1.per_edge) {
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            if topo.cells[ge.cell].winding != [0, 0] {
                channel_means.push(mean);
            } else {
                assert!(mean.abs() < 1e-6, "disk-edge v1 average {mean}");
            }
        }
        assert_eq!(channel_means.len(), 2);
        assert!(channel_means[0] * channel_means[1] < 0.0);
        assert!(channel_means[0].abs() > 0.5);
    }

    #[test]
    fn insufficient_mixing_detected() {
        // A horizon far below the decorrelation time leaves the estimate
        // drifting between the half- and full-time windows.
        let f = StreamFunction::shear();
        let cfg = MsdConfig { dt_max: 2e-3, ..MsdConfig::new(0.1, 4000, 2.0, 77) };
        match estimate_msd(&f, &cfg) {
            Err(EstimatorError::InsufficientMixing(_)) => {}
            other => panic!("expected InsufficientMixing, got {other:?}"),
        }
    }

    #[test]
    fn scaling_fit_exact_power_law() {
        let estimates: Vec<EffDiffEstimate> = [0.04f64, 0.02, 0.01, 0.005]
            .iter()
            .map(|&e| EffDiffEstimate {
                d: [[3.0 * e.sqrt(), 0.0], [0.0, 1.0]],
                stderr: [[0.0; 2]; 2],
                method: EstimatorMethod::Msd,
                epsilon: e,
                n_paths: 1,
                t_final: 1.0,
            })
            .collect();
        let fit = fit_scaling(&estimates, (0, 0)).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-9);

        // Non-positive values are rejected.
        let mut bad = estimates.clone();
        bad[0].d[0][0] = -1.0;
        assert!(matches!(
            fit_scaling(&bad, (0, 0)),
            Err(EstimatorError::NonPositiveValue(_))
        ));
        assert!(matches!(
            fit_scaling(&estimates[..2], (0, 0)),
            Err(EstimatorError::TooFewPoints(2))
        ));
    }
}
