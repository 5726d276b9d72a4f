//! The discrete chain traced by the diffusion around the separatrix skeleton
//! of a cellular flow: a tube `{|H| < eps^alpha1}` around the separatrix,
//! cross-sections transversal to the flow at each saddle, the stopping-time
//! pairs (pass a new saddle or exit the tube, then return to the separatrix),
//! and the per-step records (edge, theta, winding jump, transit time) that
//! the effective diffusivity is assembled from.
//!
//! The `eps -> 0` one-step law is computed three independent ways: a closed
//! form (Gaussian arrival at the first saddle composed with the
//! reflection-principle first passage beyond it), Monte Carlo stepping of the
//! limit process, and a Crank-Nicolson solve of the exit problem on a strip.

use crate::estimator::EffDiffEstimate;
use crate::field::StreamFunction;
use crate::geom::{self, Vec2};
use crate::sde::{
    self, GaussianStream, IntegratorConfig, LimitStopRule, StepControl, TrajectoryState,
};
use crate::topology::{FlowClass, FlowTopology};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("flow is not cellular (or saddles are not on a single level)")]
    NotCellular,
    #[error("alpha1 = {0} outside the open interval (1/4, 1/2)")]
    BadAlpha(f64),
    #[error("step too coarse: multiple cross-sections triggered in one step at t = {0}")]
    StepTooCoarse(f64),
    #[error("integration failed: {0}")]
    Sde(#[from] sde::SdeError),
    #[error("kernel binnings do not match: {0} vs {1} bins per edge")]
    BinningMismatch(usize, usize),
    #[error("rotation tail beyond m_max carries bin mass {0:.2e} > 1e-3; increase m_max")]
    TailTooHeavy(f64),
    #[error("not enough chain samples ({0}) for a variance estimate")]
    InsufficientSamples(u64),
}

/// Tube around the separatrix: `|H - level| < eps^alpha1`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TubeSpec {
    pub epsilon: f64,
    pub alpha1: f64,
    pub level: f64,
    pub half_width: f64,
}

impl TubeSpec {
    pub fn new(epsilon: f64, alpha1: f64, level: f64) -> Result<Self, ChainError> {
        if !(alpha1 > 0.25 && alpha1 < 0.5) {
            return Err(ChainError::BadAlpha(alpha1));
        }
        Ok(TubeSpec { epsilon, alpha1, level, half_width: epsilon.powf(alpha1) })
    }
}

/// Cross-section at a saddle: the transversal segment `{theta = theta(A)}`
/// inside the tube, realized as the bisector lines of the saddle frame
/// (|incoming coordinate| = |outgoing coordinate|).
#[derive(Clone, Debug, Serialize)]
pub struct CrossSection {
    pub saddle: usize,
    pub location: Vec2,
    /// Unit tangent of the incoming separatrix branches.
    pub dir_in: Vec2,
    /// Unit tangent of the outgoing branches.
    pub dir_out: Vec2,
    /// Radius within which the local frame is used for crossing detection;
    /// the section endpoints sit on |H - level| = half_width.
    pub radius: f64,
}

/// Local saddle frame with the dual basis for coordinate extraction.
#[derive(Clone, Copy, Debug)]
struct SaddleFrame {
    loc: Vec2,
    // x - loc = s_in * u_in + s_out * u_out; dual rows reconstruct (s_in, s_out).
    dual_in: Vec2,
    dual_out: Vec2,
    radius: f64,
}

impl SaddleFrame {
    #[inline]
    fn coords(&self, delta: Vec2) -> (f64, f64) {
        (geom::dot(self.dual_in, delta), geom::dot(self.dual_out, delta))
    }
}

/// One chain step: the landing state on the separatrix, the winding jump of
/// the base-saddle lattice copy, and the transit time in the original clock.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChainRecord {
    pub edge: usize,
    pub theta: f64,
    /// Lattice copy of the containing edge's source saddle.
    pub base: [i32; 2],
    pub winding_jump: [i32; 2],
    pub transit_time: f64,
    pub passed_saddle: Option<usize>,
    pub visited_tube_boundary: bool,
    /// h = (H - level)/sqrt(eps) at the pass/exit time (for the one-step
    /// marginal diagnostics).
    pub h_at_sigma: f64,
}

/// Aggregated chain statistics: empirical kernel, occupation histogram,
/// transit times, and the CLT variance of cumulative winding jumps.
#[derive(Clone, Debug)]
pub struct ChainStatistics {
    pub bins_per_edge: usize,
    pub n_edges: usize,
    pub n_transitions: u64,
    /// Row-sparse empirical kernel over (source bin -> target bin).
    pub kernel: Vec<HashMap<u32, u64>>,
    /// Occupation counts of source bins (the invariant-measure histogram).
    pub occupancy: Vec<u64>,
    pub transit_sum: Vec<f64>,
    pub transit_count: Vec<u64>,
    pub mean_transit: f64,
    pub mean_transit_stderr: f64,
    pub jump_mean: [f64; 2],
    pub jump_mean_stderr: [f64; 2],
    /// Observed winding jump values (the finite set S).
    pub jump_set: Vec<[i32; 2]>,
    /// CLT covariance of the jump sums, per step.
    pub d_matrix: [[f64; 2]; 2],
    pub d_stderr: [[f64; 2]; 2],
    /// Fraction of steps that exited the tube before passing a saddle.
    pub tube_exit_fraction: f64,
    /// Autocorrelation of jump components at lags 1..=20.
    pub jump_autocorr: Vec<f64>,
}

impl ChainStatistics {
    pub fn bin_count(&self) -> usize {
        self.n_edges * self.bins_per_edge
    }

    /// Normalized kernel row (counting measure: rows sum to exactly one).
    pub fn kernel_row(&self, src: usize) -> Option<Vec<f64>> {
        let row = &self.kernel[src];
        let total: u64 = row.values().sum();
        if total == 0 {
            return None;
        }
        let mut out = vec![0.0; self.bin_count()];
        for (&tgt, &c) in row {
            out[tgt as usize] = c as f64 / total as f64;
        }
        Some(out)
    }
}

pub struct ChainRun {
    pub records: Vec<Vec<ChainRecord>>,
    pub stats: ChainStatistics,
    pub tube: TubeSpec,
}

/// Chain run configuration. `n_steps` is the total number of transitions
/// across all independent chains.
#[derive(Clone, Copy, Debug)]
pub struct ChainConfig {
    pub epsilon: f64,
    pub alpha1: f64,
    pub n_steps: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub bins_per_edge: usize,
    pub dt_max: f64,
}

impl ChainConfig {
    pub fn new(epsilon: f64, n_steps: usize, seed: u64) -> Self {
        ChainConfig {
            epsilon,
            alpha1: 0.3,
            n_steps,
            n_chains: 2 * rayon::current_num_threads().max(1),
            seed,
            bins_per_edge: 64,
            dt_max: 1e-3,
        }
    }
}

fn saddle_frames(
    f: &StreamFunction,
    topo: &FlowTopology,
    tube: &TubeSpec,
) -> Vec<(usize, SaddleFrame)> {
    let mut min_pair = f64::INFINITY;
    for (i, &a) in topo.saddles.iter().enumerate() {
        for &b in topo.saddles.iter().skip(i + 1) {
            min_pair = min_pair.min(geom::torus_dist(
                topo.critical_points[a].location,
                topo.critical_points[b].location,
            ));
        }
    }
    if !min_pair.is_finite() {
        min_pair = 0.5;
    }
    topo.saddles
        .iter()
        .map(|&si| {
            let loc = topo.critical_points[si].location;
            let e = f.evaluate(loc);
            let dirs = saddle_branch_dirs(f, loc, e.hessian);
            let (u_in, u_out) = dirs;
            // Dual basis of (u_in, u_out).
            let det = u_in[0] * u_out[1] - u_in[1] * u_out[0];
            let dual_in = [u_out[1] / det, -u_out[0] / det];
            let dual_out = [-u_in[1] / det, u_in[0] / det];
            // Section reaches |H - level| = half_width along the bisectors:
            // |H| ~ 1/2 |d' Hess d| r^2 there.
            let bis = geom::normalize(geom::add(u_in, u_out));
            let hd = [
                e.hessian[0][0] * bis[0] + e.hessian[0][1] * bis[1],
                e.hessian[1][0] * bis[0] + e.hessian[1][1] * bis[1],
            ];
            let quad = geom::dot(bis, hd).abs().max(1e-9);
            let r_tube = (2.0 * tube.half_width / quad).sqrt();
            let radius = r_tube.min(0.4 * min_pair);
            (
                si,
                SaddleFrame { loc, dual_in, dual_out, radius },
            )
        })
        .collect()
}

fn saddle_branch_dirs(f: &StreamFunction, loc: Vec2, hess: [[f64; 2]; 2]) -> (Vec2, Vec2) {
    // Null directions of the Hessian; classify by the flow direction just off
    // the saddle: outgoing if v points away.
    let nulls = {
        let (a, b, c) = (hess[0][0], hess[0][1], hess[1][1]);
        let scale = a.abs().max(b.abs()).max(c.abs());
        let disc = (b * b - a * c).max(0.0).sqrt();
        if a.abs().max(c.abs()) < 1e-12 * scale {
            [[1.0, 0.0], [0.0, 1.0]]
        } else if c.abs() >= a.abs() {
            [
                geom::normalize([1.0, (-b + disc) / c]),
                geom::normalize([1.0, (-b - disc) / c]),
            ]
        } else {
            [
                geom::normalize([(-b + disc) / a, 1.0]),
                geom::normalize([(-b - disc) / a, 1.0]),
            ]
        }
    };
    let mut dir_in = nulls[0];
    let mut dir_out = nulls[1];
    let probe = 1e-5;
    let v0 = f.velocity(geom::add(loc, geom::scale(nulls[0], probe)));
    if geom::dot(v0, nulls[0]) > 0.0 {
        dir_in = nulls[1];
        dir_out = nulls[0];
    }
    (dir_in, dir_out)
}

/// Public geometric description of the cross-sections (for export/tests).
pub fn cross_sections(
    f: &StreamFunction,
    topo: &FlowTopology,
    tube: &TubeSpec,
) -> Vec<CrossSection> {
    saddle_frames(f, topo, tube)
        .into_iter()
        .map(|(si, fr)| {
            let loc = topo.critical_points[si].location;
            let hess = f.evaluate(loc).hessian;
            let (dir_in, dir_out) = saddle_branch_dirs(f, loc, hess);
            CrossSection { saddle: si, location: loc, dir_in, dir_out, radius: fr.radius }
        })
        .collect()
}

enum Phase {
    /// Waiting for the first separatrix hit.
    Seek,
    /// On the separatrix; waiting to pass a saddle other than `excluded` or
    /// to exit the tube.
    Armed { excluded: usize },
    /// Passed a saddle / exited the tube; waiting for the next separatrix hit.
    Return,
}

struct ChainWorker<'a> {
    topo: &'a FlowTopology,
    frames: &'a [(usize, SaddleFrame)],
    tube: TubeSpec,
    sqrt_eps: f64,
    phase: Phase,
    last_tau: f64,
    last_base: [i32; 2],
    pending_saddle: Option<usize>,
    pending_tube_exit: bool,
    pending_h_sigma: f64,
    records: Vec<ChainRecord>,
    target: usize,
    error: Option<ChainError>,
}

impl<'a> ChainWorker<'a> {
    /// Linear-interpolated fraction of the step at which H crosses the level.
    #[inline]
    fn level_cross_frac(&self, h0: f64, h1: f64) -> Option<f64> {
        let a = h0 - self.tube.level;
        let b = h1 - self.tube.level;
        if (a <= 0.0) == (b <= 0.0) || a == b {
            return None;
        }
        Some((a / (a - b)).clamp(0.0, 1.0))
    }

    /// Plane position at fraction `s` of the step (winding-safe: interpolate
    /// the unwrapped path, not the torus representative).
    #[inline]
    fn plane_at(ev: &sde::StepEvent, s: f64) -> Vec2 {
        let d = ev.step_vec();
        [
            ev.pos_prev[0] + ev.winding_prev[0] as f64 + s * d[0],
            ev.pos_prev[1] + ev.winding_prev[1] as f64 + s * d[1],
        ]
    }

    fn on_step(&mut self, ev: &sde::StepEvent) -> StepControl {
        match self.phase {
            Phase::Seek | Phase::Return => {
                if let Some(frac) = self.level_cross_frac(ev.h_prev, ev.h_next) {
                    let t_hit = ev.t_prev + frac * (ev.t_next - ev.t_prev);
                    self.register_tau(Self::plane_at(ev, frac), t_hit);
                }
            }
            Phase::Armed { excluded } => {
                // Tube exit?
                let out_prev = (ev.h_prev - self.tube.level).abs() >= self.tube.half_width;
                let out_next = (ev.h_next - self.tube.level).abs() >= self.tube.half_width;
                let mut tube_frac: Option<f64> = None;
                if !out_prev && out_next {
                    let a = (ev.h_prev - self.tube.level).abs();
                    let b = (ev.h_next - self.tube.level).abs();
                    tube_frac = Some(((self.tube.half_width - a) / (b - a)).clamp(0.0, 1.0));
                }
                // Section crossing? (co-flow orientation: |in| - |out| goes
                // from positive to negative inside the saddle frame)
                let mut section_hit: Option<(usize, f64)> = None;
                for &(si, ref fr) in self.frames {
                    if si == excluded {
                        continue;
                    }
                    let d_prev = geom::torus_delta(fr.loc, ev.pos_prev);
                    let d_next = geom::torus_delta(fr.loc, ev.pos_next);
                    if geom::norm(d_prev) > fr.radius || geom::norm(d_next) > fr.radius {
                        continue;
                    }
                    let (i0, o0) = fr.coords(d_prev);
                    let (i1, o1) = fr.coords(d_next);
                    let g0 = i0.abs() - o0.abs();
                    let g1 = i1.abs() - o1.abs();
                    if g0 > 0.0 && g1 <= 0.0 {
                        let frac = (g0 / (g0 - g1)).clamp(0.0, 1.0);
                        if section_hit.is_some() {
                            self.error = Some(ChainError::StepTooCoarse(ev.t_prev));
                            return StepControl::Stop;
                        }
                        section_hit = Some((si, frac));
                    }
                }
                match (tube_frac, section_hit) {
                    (Some(tf), Some((si, sf))) => {
                        if sf <= tf {
                            self.trigger_sigma(Some(si), ev, sf);
                        } else {
                            self.trigger_sigma(None, ev, tf);
                        }
                    }
                    (Some(tf), None) => self.trigger_sigma(None, ev, tf),
                    (None, Some((si, sf))) => self.trigger_sigma(Some(si), ev, sf),
                    (None, None) => {}
                }
            }
        }
        if self.records.len() >= self.target || self.error.is_some() {
            StepControl::Stop
        } else {
            StepControl::Continue
        }
    }

    fn trigger_sigma(&mut self, saddle: Option<usize>, ev: &sde::StepEvent, frac: f64) {
        self.pending_saddle = saddle;
        self.pending_tube_exit = saddle.is_none();
        let h = ev.h_prev + frac * (ev.h_next - ev.h_prev);
        self.pending_h_sigma = (h - self.tube.level) / self.sqrt_eps;
        self.phase = Phase::Return;
        // The separatrix may be re-hit within this same step, after frac.
        if let Some(cf) = self.level_cross_frac(
            ev.h_prev + frac * (ev.h_next - ev.h_prev),
            ev.h_next,
        ) {
            let residual = frac + cf * (1.0 - frac);
            let t_hit = ev.t_prev + residual * (ev.t_next - ev.t_prev);
            self.register_tau(Self::plane_at(ev, residual), t_hit);
        }
    }

    fn register_tau(&mut self, plane: Vec2, t_hit: f64) {
        let hit = geom::wrap(plane);
        let Some((edge, theta, dist)) = self.topo.edge_locator.nearest(&self.topo.edges, hit)
        else {
            return;
        };
        if dist > 0.05 {
            return; // spurious: interpolation landed too far from the skeleton
        }
        let e = &self.topo.edges[edge];
        // Lattice copy of the edge's source saddle: plane hit position minus
        // the canonical polyline point at this theta.
        let canon = {
            let th = theta.clamp(0.0, e.theta_length);
            let i = match e.theta.binary_search_by(|t| t.partial_cmp(&th).unwrap()) {
                Ok(i) => i,
                Err(i) => i.saturating_sub(1),
            };
            let i = i.min(e.polyline.len() - 2);
            let span = (e.theta[i + 1] - e.theta[i]).max(f64::MIN_POSITIVE);
            let s = ((th - e.theta[i]) / span).clamp(0.0, 1.0);
            [
                e.polyline[i][0] + s * (e.polyline[i + 1][0] - e.polyline[i][0]),
                e.polyline[i][1] + s * (e.polyline[i + 1][1] - e.polyline[i][1]),
            ]
        };
        // Lattice copy of this hit: the plane offset from the canonical
        // polyline point (integer up to tracing tolerance).
        let base = geom::round_int(geom::sub(plane, canon));
        let first = matches!(self.phase, Phase::Seek);
        let jump = [base[0] - self.last_base[0], base[1] - self.last_base[1]];
        if !first {
            self.records.push(ChainRecord {
                edge,
                theta,
                base,
                winding_jump: jump,
                transit_time: t_hit - self.last_tau,
                passed_saddle: self.pending_saddle,
                visited_tube_boundary: self.pending_tube_exit,
                h_at_sigma: self.pending_h_sigma,
            });
        }
        self.last_tau = t_hit;
        self.last_base = base;
        self.pending_saddle = None;
        self.pending_tube_exit = false;
        self.pending_h_sigma = 0.0;
        self.phase = Phase::Armed { excluded: e.source };
    }
}

/// Run the separatrix chain: `n_steps` transitions split across independent
/// chains with distinct noise streams, merged in stream order.
pub fn run_chain(
    f: &StreamFunction,
    topo: &FlowTopology,
    cfg: &ChainConfig,
) -> Result<ChainRun, ChainError> {
    if topo.flow_class != FlowClass::Cellular {
        return Err(ChainError::NotCellular);
    }
    let level = topo.common_saddle_level().ok_or(ChainError::NotCellular)?;
    let tube = TubeSpec::new(cfg.epsilon, cfg.alpha1, level)?;
    let frames = saddle_frames(f, topo, &tube);
    let n_chains = cfg.n_chains.max(1);
    let per_chain = cfg.n_steps.div_ceil(n_chains);

    let results: Vec<Result<Vec<ChainRecord>, ChainError>> = (0..n_chains)
        .into_par_iter()
        .map(|chain_idx| {
            let mut stream = GaussianStream::new(cfg.seed, chain_idx as u64);
            let start = [stream.uniform(), stream.uniform()];
            let mut state = TrajectoryState::new(start);
            let icfg = IntegratorConfig {
                epsilon: cfg.epsilon,
                dt_max: cfg.dt_max,
                alpha1: cfg.alpha1,
                ..Default::default()
            };
            let mut worker = ChainWorker {
                topo,
                frames: &frames,
                tube,
                sqrt_eps: cfg.epsilon.sqrt(),
                phase: Phase::Seek,
                last_tau: 0.0,
                last_base: [0, 0],
                pending_saddle: None,
                pending_tube_exit: false,
                pending_h_sigma: 0.0,
                records: Vec::with_capacity(per_chain),
                target: per_chain,
                error: None,
            };
            // Generous time cap; the observer stops the run by step count.
            let t_cap = 1e12;
            sde::integrate_observed(f, &icfg, &mut state, &mut stream, t_cap, |ev| {
                worker.on_step(ev)
            })?;
            if let Some(e) = worker.error {
                return Err(e);
            }
            Ok(worker.records)
        })
        .collect();

    let mut records = Vec::with_capacity(n_chains);
    for r in results {
        records.push(r?);
    }
    let stats = build_statistics(topo, &records, cfg.bins_per_edge);
    Ok(ChainRun { records, stats, tube })
}

/// Global bin index of a chain state.
pub fn state_bin(topo: &FlowTopology, bins_per_edge: usize, edge: usize, theta: f64) -> usize {
    let e = &topo.edges[edge];
    let frac = (theta / e.theta_length).clamp(0.0, 1.0 - 1e-12);
    edge * bins_per_edge + (frac * bins_per_edge as f64) as usize
}

pub fn build_statistics(
    topo: &FlowTopology,
    records: &[Vec<ChainRecord>],
    bins_per_edge: usize,
) -> ChainStatistics {
    let n_edges = topo.edges.len();
    let n_bins = n_edges * bins_per_edge;
    let mut kernel: Vec<HashMap<u32, u64>> = vec![HashMap::new(); n_bins];
    let mut occupancy = vec![0u64; n_bins];
    let mut transit_sum = vec![0.0; n_bins];
    let mut transit_count = vec![0u64; n_bins];
    let mut jump_set: Vec<[i32; 2]> = Vec::new();
    let mut n_transitions = 0u64;
    let mut jump_sum = [0.0f64; 2];
    let mut jump_sq = [0.0f64; 2];
    let mut transit_total = 0.0f64;
    let mut tube_exits = 0u64;

    for chain in records {
        for w in chain.windows(2) {
            let src = state_bin(topo, bins_per_edge, w[0].edge, w[0].theta);
            let tgt = state_bin(topo, bins_per_edge, w[1].edge, w[1].theta);
            *kernel[src].entry(tgt as u32).or_default() += 1;
            occupancy[src] += 1;
            transit_sum[src] += w[1].transit_time;
            transit_count[src] += 1;
        }
        for r in chain {
            n_transitions += 1;
            transit_total += r.transit_time;
            for c in 0..2 {
                jump_sum[c] += r.winding_jump[c] as f64;
                jump_sq[c] += (r.winding_jump[c] as f64).powi(2);
            }
            if !jump_set.contains(&r.winding_jump) {
                jump_set.push(r.winding_jump);
            }
            if r.visited_tube_boundary {
                tube_exits += 1;
            }
        }
    }
    let n = n_transitions.max(1) as f64;
    let jump_mean = [jump_sum[0] / n, jump_sum[1] / n];
    let jump_mean_stderr = [
        ((jump_sq[0] / n - jump_mean[0] * jump_mean[0]).max(0.0) / n).sqrt(),
        ((jump_sq[1] / n - jump_mean[1] * jump_mean[1]).max(0.0) / n).sqrt(),
    ];
    let mean_transit = transit_total / n;

    // Batch-means CLT covariance of the jump sums and of the transit times.
    let mut batch_cov = [[0.0f64; 2]; 2];
    let mut batch_cov_sq = [[0.0f64; 2]; 2];
    let mut n_batches = 0usize;
    let mut transit_batch_means = Vec::new();
    let batch_len = 256usize;
    for chain in records {
        let mut i = 0;
        while i + batch_len <= chain.len() {
            let mut s = [0.0f64; 2];
            let mut ts = 0.0;
            for r in &chain[i..i + batch_len] {
                s[0] += r.winding_jump[0] as f64;
                s[1] += r.winding_jump[1] as f64;
                ts += r.transit_time;
            }
            let bl = batch_len as f64;
            for a in 0..2 {
                for b in 0..2 {
                    let v = (s[a] - jump_mean[a] * bl) * (s[b] - jump_mean[b] * bl) / bl;
                    batch_cov[a][b] += v;
                    batch_cov_sq[a][b] += v * v;
                }
            }
            transit_batch_means.push(ts / bl);
            n_batches += 1;
            i += batch_len;
        }
    }
    let mut d_matrix = [[0.0f64; 2]; 2];
    let mut d_stderr = [[0.0f64; 2]; 2];
    if n_batches > 1 {
        for a in 0..2 {
            for b in 0..2 {
                let m = batch_cov[a][b] / n_batches as f64;
                let var = (batch_cov_sq[a][b] / n_batches as f64 - m * m).max(0.0);
                d_matrix[a][b] = m;
                d_stderr[a][b] = (var / n_batches as f64).sqrt();
            }
        }
    }
    let mean_transit_stderr = if transit_batch_means.len() > 1 {
        let m = transit_batch_means.iter().sum::<f64>() / transit_batch_means.len() as f64;
        let v = transit_batch_means.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            / (transit_batch_means.len() - 1) as f64;
        (v / transit_batch_means.len() as f64).sqrt()
    } else {
        f64::INFINITY
    };

    // Jump autocorrelation (component-summed), lags 1..=20, within chains.
    let mut autocorr = vec![0.0f64; 20];
    let mut var0 = 0.0f64;
    let mut counts = vec![0u64; 20];
    for chain in records {
        let xs: Vec<f64> = chain
            .iter()
            .map(|r| {
                (r.winding_jump[0] as f64 - jump_mean[0])
                    + (r.winding_jump[1] as f64 - jump_mean[1])
            })
            .collect();
        for &x in &xs {
            var0 += x * x;
        }
        for lag in 1..=20usize {
            for i in lag..xs.len() {
                autocorr[lag - 1] += xs[i] * xs[i - lag];
                counts[lag - 1] += 1;
            }
        }
    }
    let var0 = (var0 / n).max(1e-300);
    let jump_autocorr: Vec<f64> = autocorr
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 / var0 } else { 0.0 })
        .collect();

    jump_set.sort();
    ChainStatistics {
        bins_per_edge,
        n_edges,
        n_transitions,
        kernel,
        occupancy,
        transit_sum,
        transit_count,
        mean_transit,
        mean_transit_stderr,
        jump_mean,
        jump_mean_stderr,
        jump_set,
        d_matrix,
        d_stderr,
        tube_exit_fraction: tube_exits as f64 / n,
        jump_autocorr,
    }
}

/// Effective diffusivity from the chain: the CLT covariance of winding jumps
/// divided by the mean transit time under the empirical invariant measure.
pub fn assemble_diffusivity(stats: &ChainStatistics, epsilon: f64) -> Result<EffDiffEstimate, ChainError> {
    if stats.n_transitions < 256 || !stats.mean_transit_stderr.is_finite() {
        return Err(ChainError::InsufficientSamples(stats.n_transitions));
    }
    let mt = stats.mean_transit;
    let mut d = [[0.0f64; 2]; 2];
    let mut se = [[0.0f64; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            d[a][b] = stats.d_matrix[a][b] / mt;
            // Relative errors add in quadrature.
            let rel_d = if stats.d_matrix[a][b].abs() > 0.0 {
                stats.d_stderr[a][b] / stats.d_matrix[a][b].abs()
            } else {
                0.0
            };
            let rel_t = stats.mean_transit_stderr / mt;
            se[a][b] = d[a][b].abs() * (rel_d * rel_d + rel_t * rel_t).sqrt();
        }
    }
    // Symmetrize (the estimator is symmetric up to noise).
    let off = 0.5 * (d[0][1] + d[1][0]);
    d[0][1] = off;
    d[1][0] = off;
    Ok(EffDiffEstimate {
        d,
        stderr: se,
        method: crate::estimator::EstimatorMethod::Chain,
        epsilon,
        n_paths: stats.n_transitions as usize,
        t_final: mt * stats.n_transitions as f64,
    })
}

/// Synthetic-statistics constructor used by the unit tests of (Dd).
pub fn statistics_from_jumps(
    jumps: &[[i32; 2]],
    transit: f64,
) -> ChainStatistics {
    let n = jumps.len() as f64;
    let mean = [
        jumps.iter().map(|j| j[0] as f64).sum::<f64>() / n,
        jumps.iter().map(|j| j[1] as f64).sum::<f64>() / n,
    ];
    let mut d = [[0.0f64; 2]; 2];
    for j in jumps {
        for a in 0..2 {
            for b in 0..2 {
                d[a][b] += (j[a] as f64 - mean[a]) * (j[b] as f64 - mean[b]);
            }
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            d[a][b] /= n;
        }
    }
    ChainStatistics {
        bins_per_edge: 1,
        n_edges: 1,
        n_transitions: jumps.len() as u64,
        kernel: vec![HashMap::new()],
        occupancy: vec![jumps.len() as u64],
        transit_sum: vec![transit * n],
        transit_count: vec![jumps.len() as u64],
        mean_transit: transit,
        mean_transit_stderr: 0.0,
        jump_mean: mean,
        jump_mean_stderr: [0.0, 0.0],
        jump_set: Vec::new(),
        d_matrix: d,
        d_stderr: [[0.0; 2]; 2],
        tube_exit_fraction: 0.0,
        jump_autocorr: vec![0.0; 20],
    }
}

// ---------------------------------------------------------------------------
// The eps -> 0 one-step kernel.
// ---------------------------------------------------------------------------

/// Walk description of one cell chart seen from a source point on its
/// boundary: the cyclic (edge, theta) layout, the distance to the first
/// saddle ahead, and the lap length.
struct ChartWalk {
    /// Distance (in theta) from the source to the first saddle ahead.
    theta_first: f64,
    /// Lap length: total boundary theta of the cell.
    lap: f64,
    /// (global bin, width) in walk order, starting at the first saddle.
    bins: Vec<(usize, f64)>,
}

fn chart_walk(
    topo: &FlowTopology,
    cell_id: usize,
    source_edge: usize,
    theta: f64,
    bins_per_edge: usize,
) -> ChartWalk {
    let cell = &topo.cells[cell_id];
    assert_eq!(cell.boundary_cycles.len(), 1, "cellular cell has one cycle");
    let cycle = &cell.boundary_cycles[0];
    let pos = cycle.iter().position(|&e| e == source_edge).expect("edge on cell boundary");
    let e = &topo.edges[source_edge];
    let theta_first = e.theta_length - theta;
    let lap: f64 = cycle.iter().map(|&ei| topo.edges[ei].theta_length).sum();
    // Bins in walk order, starting from the edge AFTER the source edge.
    let mut bins = Vec::new();
    for k in 1..=cycle.len() {
        let ei = cycle[(pos + k) % cycle.len()];
        let el = &topo.edges[ei];
        let w = el.theta_length / bins_per_edge as f64;
        for b in 0..bins_per_edge {
            bins.push((ei * bins_per_edge + b, w));
        }
    }
    ChartWalk { theta_first, lap, bins }
}

/// Closed-form chart mass: cumulative exit probability within `s` of theta
/// past the first saddle, for a chart entered with Gaussian(0, theta_first)
/// arrival split at h = 0. Integrates to 1/2 per chart as s -> infinity.
#[inline]
fn chart_cum(theta_first: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    (s / theta_first).sqrt().atan() / std::f64::consts::PI
}

#[derive(Clone, Debug)]
pub struct LimitKernel {
    pub source_edge: usize,
    pub source_theta: f64,
    pub bins_per_edge: usize,
    /// Probability mass per global (edge, bin).
    pub masses: Vec<f64>,
    /// Mass beyond m_max laps (reported, not binned).
    pub tail_mass: f64,
    pub m_max: usize,
    /// Mass routed into each adjacent chart (left, right cell of the edge).
    pub chart_mass: [f64; 2],
}

impl LimitKernel {
    pub fn total_binned(&self) -> f64 {
        self.masses.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMethod {
    SemiAnalytic,
    MonteCarlo,
}

/// The one-step limit kernel from a source on an edge: the arrival law at the
/// first saddle ahead splits evenly between the two adjacent cell charts, and
/// within each chart the exit position follows the first-passage law beyond
/// that saddle, wrapped around the cell boundary up to `m_max` laps.
pub fn limit_kernel_p0(
    topo: &FlowTopology,
    source_edge: usize,
    theta: f64,
    m_max: usize,
    bins_per_edge: usize,
    method: KernelMethod,
    mc_paths: usize,
    seed: u64,
) -> Result<LimitKernel, ChainError> {
    if topo.flow_class != FlowClass::Cellular {
        return Err(ChainError::NotCellular);
    }
    let e = &topo.edges[source_edge];
    let charts = [e.left_cell, e.right_cell];
    let n_bins = topo.edges.len() * bins_per_edge;
    let mut masses = vec![0.0; n_bins];
    let mut tail = 0.0;
    let mut chart_mass = [0.0f64; 2];

    for (ci, &cell) in charts.iter().enumerate() {
        let walk = chart_walk(topo, cell, source_edge, theta, bins_per_edge);
        match method {
            KernelMethod::SemiAnalytic => {
                let mut u = 0.0f64; // theta past the first saddle
                for _lap in 0..=m_max {
                    for &(bin, w) in &walk.bins {
                        let m = chart_cum(walk.theta_first, u + w) - chart_cum(walk.theta_first, u);
                        masses[bin] += m;
                        chart_mass[ci] += m;
                        u += w;
                    }
                }
                tail += 0.5 - chart_cum(walk.theta_first, u);
            }
            KernelMethod::MonteCarlo => {
                // Paths are split evenly between charts by the sign of the
                // Gaussian arrival; simulate per chart with its own stream.
                let mut stream = GaussianStream::new(seed, ci as u64);
                let n = mc_paths / 2;
                let horizon = (m_max as f64 + 1.0) * walk.lap;
                let rule = LimitStopRule {
                    absorb_after: Some(0.0),
                    barrier: None,
                    theta_cap: horizon,
                };
                let dtheta = (walk.lap / 4000.0).min(2e-3);
                let w_per_path = 0.5 / n as f64;
                for _ in 0..n {
                    let u0 = walk.theta_first.sqrt() * stream.normal().abs();
                    let exit =
                        sde::simulate_limit_process(u0, 0.0, &rule, dtheta, &mut stream);
                    if exit.kind != sde::LimitExitKind::AbsorbedAtZero {
                        tail += w_per_path;
                        continue;
                    }
                    // Locate the bin at walk position exit.theta.
                    let mut u = exit.theta % walk.lap;
                    let mut idx = 0;
                    while u > walk.bins[idx].1 {
                        u -= walk.bins[idx].1;
                        idx += 1;
                        if idx >= walk.bins.len() {
                            idx = 0;
                        }
                    }
                    masses[walk.bins[idx].0] += w_per_path;
                    chart_mass[ci] += w_per_path;
                }
            }
        }
    }

    // Truncation quality: the next lap would add at most this much to a bin.
    let kernel = LimitKernel {
        source_edge,
        source_theta: theta,
        bins_per_edge,
        masses,
        tail_mass: tail,
        m_max,
        chart_mass,
    };
    if method == KernelMethod::SemiAnalytic {
        let worst_next_bin = next_lap_bin_bound(topo, source_edge, theta, m_max, bins_per_edge);
        if worst_next_bin > 1e-3 {
            return Err(ChainError::TailTooHeavy(worst_next_bin));
        }
    }
    Ok(kernel)
}

/// Upper bound on the mass the (m_max+1)-th lap would add to any single bin.
fn next_lap_bin_bound(
    topo: &FlowTopology,
    source_edge: usize,
    theta: f64,
    m_max: usize,
    bins_per_edge: usize,
) -> f64 {
    let e = &topo.edges[source_edge];
    let mut worst = 0.0f64;
    for &cell in &[e.left_cell, e.right_cell] {
        let walk = chart_walk(topo, cell, source_edge, theta, bins_per_edge);
        let u0 = (m_max as f64 + 1.0) * walk.lap;
        let wmax = walk.bins.iter().map(|b| b.1).fold(0.0f64, f64::max);
        worst = worst.max(chart_cum(walk.theta_first, u0 + wmax) - chart_cum(walk.theta_first, u0));
    }
    worst
}

/// Crank-Nicolson oracle for the chart exit law: march the density of the
/// limit process on a strip with an absorbing wall, collecting the absorbed
/// flux per theta step and binning it along the chart walk. Brute force and
/// independent of both other routes.
pub fn limit_kernel_pde(
    topo: &FlowTopology,
    source_edge: usize,
    theta: f64,
    m_max: usize,
    bins_per_edge: usize,
) -> Result<LimitKernel, ChainError> {
    if topo.flow_class != FlowClass::Cellular {
        return Err(ChainError::NotCellular);
    }
    let e = &topo.edges[source_edge];
    let charts = [e.left_cell, e.right_cell];
    let n_bins = topo.edges.len() * bins_per_edge;
    let mut masses = vec![0.0; n_bins];
    let mut tail = 0.0;
    let mut chart_mass = [0.0f64; 2];

    for (ci, &cell) in charts.iter().enumerate() {
        let walk = chart_walk(topo, cell, source_edge, theta, bins_per_edge);
        let horizon = (m_max as f64 + 1.0) * walk.lap;
        let h_max = 5.0 * (walk.theta_first + horizon).sqrt();
        let nh = 1200usize;
        let dh = h_max / nh as f64;
        let dth = (walk.lap / bins_per_edge as f64 / 24.0).min(0.01);
        // Initial condition: half-Gaussian N(0, theta_first) on h > 0.
        let mut p: Vec<f64> = (0..nh)
            .map(|i| {
                let h = (i as f64 + 0.5) * dh;
                (-h * h / (2.0 * walk.theta_first)).exp()
                    / (2.0 * std::f64::consts::PI * walk.theta_first).sqrt()
            })
            .collect();
        // Crank-Nicolson for dp/dth = 1/2 d2p/dh2, absorbing at h=0 (ghost
        // node -p[0]), reflecting at h_max.
        let n_steps = (horizon / dth).ceil() as usize;
        let dth = horizon / n_steps as f64;
        let r = 0.25 * dth / (dh * dh);
        let mut lower = vec![0.0; nh];
        let mut diag = vec![0.0; nh];
        let mut upper = vec![0.0; nh];
        for i in 0..nh {
            lower[i] = -r;
            diag[i] = 1.0 + 2.0 * r;
            upper[i] = -r;
        }
        // Absorbing at i = -1 (ghost = -p0): the i=0 equation gains +r on diag.
        diag[0] = 1.0 + 3.0 * r;
        // Reflecting at top: ghost = p[nh-1].
        diag[nh - 1] = 1.0 + r;
        let mut mass_prev: f64 = p.iter().sum::<f64>() * dh;
        let total0 = mass_prev;
        let mut u = 0.0f64;
        let mut bin_idx = 0usize;
        let mut lap_count = 0usize;
        let mut bin_u_end = walk.bins[0].1;
        let mut rhs = vec![0.0; nh];
        let mut scratch = vec![0.0; nh];
        for _step in 0..n_steps {
            // RHS: explicit half-step with the same stencil.
            for i in 0..nh {
                let pm = if i == 0 { -p[0] } else { p[i - 1] };
                let pp = if i == nh - 1 { p[nh - 1] } else { p[i + 1] };
                rhs[i] = p[i] + r * (pm - 2.0 * p[i] + pp);
            }
            thomas_solve(&lower, &diag, &upper, &mut rhs, &mut scratch);
            std::mem::swap(&mut p, &mut rhs);
            let mass_now: f64 = p.iter().sum::<f64>() * dh;
            let exited = (mass_prev - mass_now).max(0.0);
            mass_prev = mass_now;
            u += dth;
            // Attribute to the current walk bin (theta past first saddle).
            while u > bin_u_end {
                bin_idx += 1;
                if bin_idx >= walk.bins.len() {
                    bin_idx = 0;
                    lap_count += 1;
                }
                bin_u_end += walk.bins[bin_idx].1;
            }
            if lap_count <= m_max {
                masses[walk.bins[bin_idx].0] += exited;
                chart_mass[ci] += exited;
            } else {
                tail += exited;
            }
        }
        tail += mass_prev;
        debug_assert!((total0 - 0.5).abs() < 1e-3, "half-Gaussian mass {total0}");
    }
    Ok(LimitKernel {
        source_edge,
        source_theta: theta,
        bins_per_edge,
        masses,
        tail_mass: tail,
        m_max,
        chart_mass,
    })
}

fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = rhs.len();
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = upper[i] / m;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Per-source-bin total-variation distance between the empirical kernel and
/// the limit kernel rows on a common binning.
pub struct KernelComparison {
    pub per_bin: Vec<(usize, f64, u64)>,
    pub mean_tv: f64,
}

pub fn compare_kernels(
    topo: &FlowTopology,
    stats: &ChainStatistics,
    m_max: usize,
    min_count: u64,
) -> Result<KernelComparison, ChainError> {
    let bins = stats.bins_per_edge;
    let mut per_bin = Vec::new();
    let mut acc = 0.0;
    for src in 0..stats.bin_count() {
        let count = stats.occupancy[src];
        if count < min_count {
            continue;
        }
        let Some(emp) = stats.kernel_row(src) else { continue };
        let edge = src / bins;
        let theta = (src % bins) as f64 / bins as f64 * topo.edges[edge].theta_length
            + 0.5 * topo.edges[edge].theta_length / bins as f64;
        let p0 = limit_kernel_p0(
            topo,
            edge,
            theta,
            m_max,
            bins,
            KernelMethod::SemiAnalytic,
            0,
            0,
        )?;
        // TV on the binned laws; put the kernel's unbinned tail against the
        // empirical mass uniformly (it is < 1e-3 by construction).
        let mut tv = 0.0;
        for i in 0..emp.len() {
            tv += (emp[i] - p0.masses[i]).abs();
        }
        let tv = 0.5 * (tv + p0.tail_mass);
        per_bin.push((src, tv, count));
        acc += tv;
    }
    if per_bin.is_empty() {
        return Err(ChainError::InsufficientSamples(0));
    }
    let mean_tv = acc / per_bin.len() as f64;
    Ok(KernelComparison { per_bin, mean_tv })
}

/// KS distance between two binned kernels (used to compare the semi-analytic
/// and Monte Carlo routes over the exit-theta law).
pub fn kernel_ks_distance(a: &LimitKernel, b: &LimitKernel) -> Result<f64, ChainError> {
    if a.bins_per_edge != b.bins_per_edge {
        return Err(ChainError::BinningMismatch(a.bins_per_edge, b.bins_per_edge));
    }
    let ta = a.total_binned().max(1e-300);
    let tb = b.total_binned().max(1e-300);
    let mut ca = 0.0;
    let mut cb = 0.0;
    let mut ks = 0.0f64;
    for i in 0..a.masses.len() {
        ca += a.masses[i] / ta;
        cb += b.masses[i] / tb;
        ks = ks.max((ca - cb).abs());
    }
    Ok(ks)
}

// ---------------------------------------------------------------------------
// Exit-probability and one-step diagnostics.
// ---------------------------------------------------------------------------

pub struct ExitProbReport {
    /// (depth fraction c, MC probability of exiting through the tube wall
    /// before reaching the separatrix) for starts at eta = c * half_width.
    pub interior: Vec<(f64, f64)>,
    /// From the separatrix: probability that the tube wall is reached before
    /// the chain step completes.
    pub from_skeleton: f64,
    /// Mean time to leave the tube from the separatrix, and the fitted
    /// constant C in E tau <= C eps^(2 alpha1 - 1) |ln eps|.
    pub mean_tube_exit_time: f64,
    pub fitted_c: f64,
}

/// Monte Carlo check of the linear exit law: starting from depth
/// `c * eps^alpha1` inside a cell, the probability of reaching the tube wall
/// before the separatrix is `c + O(eps^alpha1 ln eps)`.
pub fn exit_probability_diagnostic(
    f: &StreamFunction,
    topo: &FlowTopology,
    epsilon: f64,
    alpha1: f64,
    fractions: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<ExitProbReport, ChainError> {
    let level = topo.common_saddle_level().ok_or(ChainError::NotCellular)?;
    let tube = TubeSpec::new(epsilon, alpha1, level)?;
    let icfg = IntegratorConfig {
        epsilon,
        dt_max: 1e-3,
        alpha1,
        ..Default::default()
    };
    // A positive cell and a start contour at each depth.
    let cell = topo
        .cells
        .iter()
        .find(|c| c.interior_sign > 0)
        .ok_or(ChainError::NotCellular)?;
    let frame = crate::levelcoeffs::CellFrame::new(topo, f, cell.id);

    let mut interior = Vec::new();
    for &frac in fractions {
        let eta_start = frac * tube.half_width;
        let contour = crate::levelcoeffs::trace_contour(&frame, eta_start)
            .map_err(|_| ChainError::NotCellular)?;
        let hits: u64 = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let mut stream = GaussianStream::new(seed ^ 0x5eed, i as u64);
                let k = (stream.uniform() * (contour.polyline.len() - 1) as f64) as usize;
                let mut state = TrajectoryState::new(geom::wrap(contour.polyline[k]));
                let mut exited_wall = false;
                let _ = sde::integrate_observed(
                    f,
                    &icfg,
                    &mut state,
                    &mut stream,
                    1e9,
                    |ev| {
                        let depth = (ev.h_next - level) * cell.interior_sign as f64;
                        if depth >= tube.half_width {
                            exited_wall = true;
                            StepControl::Stop
                        } else if depth <= 0.0 {
                            StepControl::Stop
                        } else {
                            StepControl::Continue
                        }
                    },
                );
                exited_wall as u64
            })
            .sum();
        interior.push((frac, hits as f64 / n_paths as f64));
    }

    // From the separatrix: one full chain step per path; count tube exits,
    // and measure the time to leave the tube.
    let run = run_chain(
        f,
        topo,
        &ChainConfig {
            epsilon,
            alpha1,
            n_steps: n_paths,
            n_chains: 2 * rayon::current_num_threads().max(1),
            seed: seed ^ 0xface,
            bins_per_edge: 16,
            dt_max: 1e-3,
        },
    )?;
    let from_skeleton = run.stats.tube_exit_fraction;

    // Mean tube exit time from separatrix starts.
    let times: Vec<f64> = (0..n_paths.min(2000))
        .into_par_iter()
        .map(|i| {
            let mut stream = GaussianStream::new(seed ^ 0x7157, i as u64);
            let e = &topo.edges[i % topo.edges.len()];
            let start = e.point_at_theta(0.5 * e.theta_length);
            let mut state = TrajectoryState::new(start);
            let mut t_exit = f64::NAN;
            let _ = sde::integrate_observed(f, &icfg, &mut state, &mut stream, 1e9, |ev| {
                if (ev.h_next - level).abs() >= tube.half_width {
                    t_exit = ev.t_next;
                    StepControl::Stop
                } else {
                    StepControl::Continue
                }
            });
            t_exit
        })
        .collect();
    let mean_tube_exit_time =
        times.iter().filter(|t| t.is_finite()).sum::<f64>() / times.len() as f64;
    let fitted_c = mean_tube_exit_time
        / (epsilon.powf(2.0 * alpha1 - 1.0) * epsilon.ln().abs());

    Ok(ExitProbReport { interior, from_skeleton, mean_tube_exit_time, fitted_c })
}

/// Transit times of single chain steps started from a fixed point on an
/// edge (used to compare transit-time laws between symmetric starts).
pub fn one_step_transits(
    f: &StreamFunction,
    topo: &FlowTopology,
    epsilon: f64,
    alpha1: f64,
    edge: usize,
    theta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>, ChainError> {
    let level = topo.common_saddle_level().ok_or(ChainError::NotCellular)?;
    let tube = TubeSpec::new(epsilon, alpha1, level)?;
    let frames = saddle_frames(f, topo, &tube);
    let start = topo.edges[edge].point_at_theta(theta);
    let source = topo.edges[edge].source;
    let out: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut stream = GaussianStream::new(seed, i as u64);
            let mut state = TrajectoryState::new(start);
            let icfg = IntegratorConfig {
                epsilon,
                dt_max: 1e-3,
                alpha1,
                ..Default::default()
            };
            let mut worker = ChainWorker {
                topo,
                frames: &frames,
                tube,
                sqrt_eps: epsilon.sqrt(),
                phase: Phase::Armed { excluded: source },
                last_tau: 0.0,
                last_base: [0, 0],
                pending_saddle: None,
                pending_tube_exit: false,
                pending_h_sigma: 0.0,
                records: Vec::with_capacity(1),
                target: 1,
                error: None,
            };
            let _ = sde::integrate_observed(f, &icfg, &mut state, &mut stream, 1e9, |ev| {
                worker.on_step(ev)
            });
            worker.records.first().map(|r| r.transit_time).unwrap_or(f64::NAN)
        })
        .filter(|t| t.is_finite())
        .collect();
    Ok(out)
}

/// One-step h marginal at the pass/exit time from a fixed start point on an
/// edge: the empirical law to compare against the absorbed Gaussian with
/// atoms at the tube walls.
pub fn one_step_h_marginal(
    f: &StreamFunction,
    topo: &FlowTopology,
    epsilon: f64,
    alpha1: f64,
    edge: usize,
    theta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(f64, bool)>, ChainError> {
    let level = topo.common_saddle_level().ok_or(ChainError::NotCellular)?;
    let tube = TubeSpec::new(epsilon, alpha1, level)?;
    let frames = saddle_frames(f, topo, &tube);
    let excluded = topo.edges[edge].source;
    let start = topo.edges[edge].point_at_theta(theta);
    let out: Vec<(f64, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut stream = GaussianStream::new(seed, i as u64);
            let mut state = TrajectoryState::new(start);
            let icfg = IntegratorConfig {
                epsilon,
                dt_max: 1e-3,
                alpha1,
                ..Default::default()
            };
            let mut result = (0.0f64, false);
            let sqrt_eps = epsilon.sqrt();
            let _ = sde::integrate_observed(f, &icfg, &mut state, &mut stream, 1e9, |ev| {
                // Tube exit -> atom at the wall.
                if (ev.h_next - level).abs() >= tube.half_width {
                    let sign = (ev.h_next - level).signum();
                    result = (sign * tube.half_width / sqrt_eps, true);
                    return StepControl::Stop;
                }
                for &(si, ref fr) in &frames {
                    if si == excluded {
                        continue;
                    }
                    let d_prev = geom::torus_delta(fr.loc, ev.pos_prev);
                    let d_next = geom::torus_delta(fr.loc, ev.pos_next);
                    if geom::norm(d_prev) > fr.radius || geom::norm(d_next) > fr.radius {
                        continue;
                    }
                    let (i0, o0) = fr.coords(d_prev);
                    let (i1, o1) = fr.coords(d_next);
                    let g0 = i0.abs() - o0.abs();
                    let g1 = i1.abs() - o1.abs();
                    if g0 > 0.0 && g1 <= 0.0 {
                        let frac = (g0 / (g0 - g1)).clamp(0.0, 1.0);
                        let h = ev.h_prev + frac * (ev.h_next - ev.h_prev);
                        result = ((h - level) / sqrt_eps, false);
                        return StepControl::Stop;
                    }
                }
                StepControl::Continue
            });
            result
        })
        .collect();
    Ok(out)
}
