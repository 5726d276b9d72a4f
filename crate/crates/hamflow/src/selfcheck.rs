//! The acceptance criteria as runnable checks with pinned parameters and
//! tolerances. The CLI `selftest` command runs the fast subset; the
//! `acceptance` integration test runs everything. Each check returns a
//! result line rather than panicking, so a full report is always produced.

use crate::chain::{self, ChainConfig, KernelMethod};
use crate::estimator::{self, GreenKuboConfig, MsdConfig};
use crate::field::{Preset, StreamFunction};
use crate::levelcoeffs::{self, CellFrame};
use crate::topology::FlowTopology;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:2} {:<28} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.details,
            self.seconds
        )
    }
}

/// Criteria cheap enough for the command-line self test.
pub const FAST_IDS: [usize; 6] = [3, 4, 5, 6, 7, 12];
pub const ALL_IDS: [usize; 12] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];

pub const DEFAULT_SEED: u64 = 20260808;

fn cellular() -> (StreamFunction, FlowTopology) {
    let f = StreamFunction::preset(Preset::CellularSine);
    let topo = FlowTopology::build(&f).expect("cellular topology");
    (f, topo)
}

/// Run a set of criteria, sharing the heavy chain runs between 8, 10, 11.
pub fn run_many(ids: &[usize], seed: u64) -> Vec<CriterionResult> {
    let mut shared = SharedChains::default();
    ids.iter().map(|&id| run_criterion(id, seed, &mut shared)).collect()
}

#[derive(Default)]
pub struct SharedChains {
    // (epsilon, run) pairs reused across criteria 8, 10, 11.
    runs: Vec<(f64, chain::ChainRun)>,
}

impl SharedChains {
    fn get(
        &mut self,
        f: &StreamFunction,
        topo: &FlowTopology,
        eps: f64,
        n_steps: usize,
        seed: u64,
    ) -> &chain::ChainRun {
        if let Some(i) = self.runs.iter().position(|(e, _)| (*e - eps).abs() < 1e-12) {
            return &self.runs[i].1;
        }
        let cfg = ChainConfig {
            bins_per_edge: 16,
            ..ChainConfig::new(eps, n_steps, seed ^ (eps.to_bits() >> 17))
        };
        let run = chain::run_chain(f, topo, &cfg).expect("chain run");
        self.runs.push((eps, run));
        &self.runs.last().unwrap().1
    }
}

pub fn run_criterion(id: usize, seed: u64, shared: &mut SharedChains) -> CriterionResult {
    let t0 = Instant::now();
    let (outcome, name): (Outcome, &'static str) = match id {
        1 => (c1_cellular_scaling(seed), "cellular scaling D ~ sqrt(eps)"),
        2 => (c2_channel_scaling(seed), "channel scaling D11, D22"),
        3 => (c3_molecular_baseline(seed), "molecular baseline"),
        4 => (c4_shear_oracle(seed), "shear-flow oracle"),
        5 => (c5_coefficient_identity(), "coefficient identity b = a'"),
        6 => (c6_log_period(), "log period and a(0+) limit"),
        7 => (c7_limit_kernel(seed), "limit kernel three-way match"),
        8 => (c8_chain_identity(seed, shared), "chain vs MSD diffusivity"),
        9 => (c9_exit_linearity(seed), "exit-probability linearity"),
        10 => (c10_transit_scaling(seed, shared), "transit-time scaling"),
        11 => (c11_kernel_convergence(seed, shared), "kernel convergence trend"),
        12 => (c12_graph_averages(), "graph averages"),
        other => ((false, format!("unknown criterion {other}")), "unknown"),
    };
    CriterionResult {
        id,
        name,
        passed: outcome.0,
        details: outcome.1,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

type Outcome = (bool, String);

fn msd_horizon_cellular(eps: f64) -> f64 {
    // ~ 170 chain transits (sqrt(eps) * E tau ~ 0.058); long enough that the
    // warmup drift between the half- and full-time windows sits well under
    // the 3-sigma mixing check at 2e4 paths.
    (140.0 * (0.005f64 / eps).sqrt()).max(20.0)
}

fn c1_cellular_scaling(seed: u64) -> Outcome {
    let f = StreamFunction::preset(Preset::CellularSine);
    let epsilons = [0.04, 0.02, 0.01, 0.005];
    let mut estimates = Vec::new();
    for (i, &eps) in epsilons.iter().enumerate() {
        let cfg = MsdConfig {
            dt_max: 1e-3,
            ..MsdConfig::new(eps, 20_000, msd_horizon_cellular(eps), seed + 101 + i as u64)
        };
        match estimator::estimate_msd(&f, &cfg) {
            Ok(e) => estimates.push(e),
            Err(e) => return (false, format!("estimator error at eps={eps}: {e}")),
        }
    }
    let fit = match estimator::fit_scaling(&estimates, (0, 0)) {
        Ok(f) => f,
        Err(e) => return (false, format!("fit failed: {e}")),
    };
    let ok = fit.slope >= 0.4 && fit.slope <= 0.6 && fit.r_squared > 0.95;
    (
        ok,
        format!(
            "slope {:.3} (want [0.4,0.6]), R^2 {:.4} (want >0.95), D11 = {:?}",
            fit.slope,
            fit.r_squared,
            fit.values.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn c2_channel_scaling(seed: u64) -> Outcome {
    let f = StreamFunction::preset(Preset::OpenChannel);
    let epsilons = [0.2, 0.1, 0.05, 0.025];
    let horizons = [30.0, 60.0, 120.0, 240.0];
    let mut estimates = Vec::new();
    for (i, (&eps, &t)) in epsilons.iter().zip(&horizons).enumerate() {
        let cfg = MsdConfig {
            dt_max: 1e-3,
            ..MsdConfig::new(eps, 12_000, t, seed + 201 + i as u64)
        };
        match estimator::estimate_msd(&f, &cfg) {
            Ok(e) => estimates.push(e),
            Err(e) => return (false, format!("estimator error at eps={eps}: {e}")),
        }
    }
    let f11 = match estimator::fit_scaling(&estimates, (0, 0)) {
        Ok(f) => f,
        Err(e) => return (false, format!("fit D11 failed: {e}")),
    };
    let f22 = match estimator::fit_scaling(&estimates, (1, 1)) {
        Ok(f) => f,
        Err(e) => return (false, format!("fit D22 failed: {e}")),
    };
    let ok = (-1.2..=-0.8).contains(&f11.slope) && (0.8..=1.2).contains(&f22.slope);
    (
        ok,
        format!(
            "D11 slope {:.3} (want [-1.2,-0.8]), D22 slope {:.3} (want [0.8,1.2])",
            f11.slope, f22.slope
        ),
    )
}

fn c3_molecular_baseline(seed: u64) -> Outcome {
    let f = StreamFunction::zero();
    let cfg = MsdConfig { dt_max: 5e-3, ..MsdConfig::new(0.04, 4000, 50.0, seed + 301) };
    let est = match estimator::estimate_msd(&f, &cfg) {
        Ok(e) => e,
        Err(e) => return (false, format!("estimator error: {e}")),
    };
    let mut ok = true;
    let mut msg = String::new();
    for i in 0..2 {
        let dev = (est.d[i][i] - 0.04).abs();
        let lim = 3.0 * est.stderr[i][i];
        ok &= dev < lim;
        let _ = write!(msg, "D{i}{i} {:.5}+-{:.5} ", est.d[i][i], est.stderr[i][i]);
    }
    ok &= est.d[0][1].abs() < 3.0 * est.stderr[0][1].max(1e-4);
    (ok, format!("{msg}(target 0.04 within 3 SE)"))
}

fn c4_shear_oracle(seed: u64) -> Outcome {
    let f = StreamFunction::shear();
    let eps = 0.1;
    let want = eps + 1.0 / (2.0 * std::f64::consts::PI.powi(2) * eps);
    let msd_cfg = MsdConfig { dt_max: 2e-3, ..MsdConfig::new(eps, 6000, 80.0, seed + 401) };
    let msd = match estimator::estimate_msd(&f, &msd_cfg) {
        Ok(e) => e.d[0][0],
        Err(e) => return (false, format!("msd error: {e}")),
    };
    let gk_cfg = GreenKuboConfig::new(eps, 0, 600, seed + 402);
    let gk = match estimator::estimate_green_kubo(&f, &gk_cfg) {
        Ok(d) => d.estimate.d[0][0],
        Err(e) => return (false, format!("green-kubo error: {e}")),
    };
    let rel_msd = (msd - want).abs() / want;
    let rel_gk = (gk - want).abs() / want;
    (
        rel_msd < 0.05 && rel_gk < 0.05,
        format!(
            "target {want:.4}: msd {msd:.4} (rel {:.3}), green-kubo {gk:.4} (rel {:.3}), want rel < 0.05",
            rel_msd, rel_gk
        ),
    )
}

fn c5_coefficient_identity() -> Outcome {
    let (f, topo) = cellular();
    let cell = topo.cells.iter().find(|c| c.interior_sign > 0).unwrap().id;
    let frame = CellFrame::new(&topo, &f, cell);
    let grid = levelcoeffs::log_grid(0.04, 0.55, 160);
    let coeffs = match levelcoeffs::compute_coefficients(&frame, &grid) {
        Ok(c) => c,
        Err(e) => return (false, format!("coefficients failed: {e}")),
    };
    let worst = coeffs.derivative_identity_error_on(|eta| (0.05..=0.5).contains(&eta));
    (worst < 1e-3, format!("max rel |b - a'| = {worst:.2e} on [0.05, 0.5] (want < 1e-3)"))
}

fn c6_log_period() -> Outcome {
    let (f, topo) = cellular();
    let cell = topo.cells.iter().find(|c| c.interior_sign > 0).unwrap().id;
    let frame = CellFrame::new(&topo, &f, cell);
    let grid = levelcoeffs::log_grid(1e-4, 0.5, 128);
    let coeffs = match levelcoeffs::compute_coefficients_with(&frame, &grid, 6e-4, false) {
        Ok(c) => c,
        Err(e) => return (false, format!("coefficients failed: {e}")),
    };
    let rep = levelcoeffs::asymptotic_diagnostics(&coeffs);
    let a_ok = (rep.a_limit - 8.0).abs() / 8.0 < 0.01;
    let q_ok = rep.q_log_r2 > 0.99;
    (
        a_ok && q_ok,
        format!(
            "a(0+) = {:.4} (want 8 within 1%), q log-fit R^2 = {:.5} on [1e-4, 1e-2] (want > 0.99)",
            rep.a_limit, rep.q_log_r2
        ),
    )
}

fn c7_limit_kernel(seed: u64) -> Outcome {
    let (_, topo) = cellular();
    let edge = 0;
    let theta = 0.5 * topo.edges[edge].theta_length;
    let sa = match chain::limit_kernel_p0(&topo, edge, theta, 6, 32, KernelMethod::SemiAnalytic, 0, 0)
    {
        Ok(k) => k,
        Err(e) => return (false, format!("semi-analytic failed: {e}")),
    };
    let mc = match chain::limit_kernel_p0(
        &topo,
        edge,
        theta,
        6,
        32,
        KernelMethod::MonteCarlo,
        100_000,
        seed + 701,
    ) {
        Ok(k) => k,
        Err(e) => return (false, format!("monte carlo failed: {e}")),
    };
    let ks = match chain::kernel_ks_distance(&sa, &mc) {
        Ok(k) => k,
        Err(e) => return (false, format!("{e}")),
    };
    let sa3 = chain::limit_kernel_p0(&topo, edge, theta, 3, 16, KernelMethod::SemiAnalytic, 0, 0)
        .expect("semi-analytic");
    let pde = match chain::limit_kernel_pde(&topo, edge, theta, 3, 16) {
        Ok(k) => k,
        Err(e) => return (false, format!("pde oracle failed: {e}")),
    };
    let mut worst = 0.0f64;
    for i in 0..sa3.masses.len() {
        worst = worst.max((sa3.masses[i] - pde.masses[i]).abs());
    }
    (
        ks < 0.02 && worst < 1e-2,
        format!("MC vs closed form KS = {ks:.4} (want < 0.02); PDE max bin dev = {worst:.2e} (want < 1e-2)"),
    )
}

fn c8_chain_identity(seed: u64, shared: &mut SharedChains) -> Outcome {
    let (f, topo) = cellular();
    let eps = 0.01;
    let run = shared.get(&f, &topo, eps, 600_000, seed);
    let d_chain = match chain::assemble_diffusivity(&run.stats, eps) {
        Ok(d) => d,
        Err(e) => return (false, format!("assembly failed: {e}")),
    };
    let cfg = MsdConfig {
        dt_max: 1e-3,
        ..MsdConfig::new(eps, 20_000, msd_horizon_cellular(eps), seed + 801)
    };
    let d_msd = match estimator::estimate_msd(&f, &cfg) {
        Ok(e) => e,
        Err(e) => return (false, format!("msd error: {e}")),
    };
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        worst = worst.max((d_chain.d[i][i] - d_msd.d[i][i]).abs() / d_msd.d[i][i]);
    }
    (
        worst < 0.15,
        format!(
            "chain D ({:.4}, {:.4}) vs msd D ({:.4}, {:.4}): worst rel dev {:.3} (want < 0.15)",
            d_chain.d[0][0], d_chain.d[1][1], d_msd.d[0][0], d_msd.d[1][1], worst
        ),
    )
}

fn c9_exit_linearity(seed: u64) -> Outcome {
    let (f, topo) = cellular();
    let rep = match chain::exit_probability_diagnostic(
        &f,
        &topo,
        1e-3,
        0.3,
        &[0.25, 0.5, 0.75],
        4000,
        seed + 901,
    ) {
        Ok(r) => r,
        Err(e) => return (false, format!("diagnostic failed: {e}")),
    };
    let mut ok = true;
    let mut msg = String::new();
    for (c, p) in &rep.interior {
        ok &= (p - c).abs() < 0.05;
        let _ = write!(msg, "P({c:.2}) = {p:.3} ");
    }
    (ok, format!("{msg}(want within 0.05 of the depth fraction)"))
}

fn c10_transit_scaling(seed: u64, shared: &mut SharedChains) -> Outcome {
    let (f, topo) = cellular();
    let epsilons = [0.02, 0.01, 0.005];
    let mut vals = Vec::new();
    for &eps in &epsilons {
        let run = shared.get(&f, &topo, eps, 600_000, seed);
        vals.push(eps.sqrt() * run.stats.mean_transit);
    }
    let r1 = vals[1] / vals[0];
    let r2 = vals[2] / vals[1];
    let ok = (0.8..=1.25).contains(&r1) && (0.8..=1.25).contains(&r2);
    (
        ok,
        format!(
            "sqrt(eps)*E[tau] = ({:.4}, {:.4}, {:.4}); ratios {:.3}, {:.3} (want in [0.8, 1.25])",
            vals[0], vals[1], vals[2], r1, r2
        ),
    )
}

fn c11_kernel_convergence(seed: u64, shared: &mut SharedChains) -> Outcome {
    let (f, topo) = cellular();
    let coarse = shared.get(&f, &topo, 0.02, 600_000, seed);
    let tv_coarse = match chain::compare_kernels(&topo, &coarse.stats, 6, 2000) {
        Ok(c) => c,
        Err(e) => return (false, format!("comparison failed: {e}")),
    };
    let fine = shared.get(&f, &topo, 0.005, 600_000, seed);
    let tv_fine = match chain::compare_kernels(&topo, &fine.stats, 6, 2000) {
        Ok(c) => c,
        Err(e) => return (false, format!("comparison failed: {e}")),
    };
    // Per-source-bin comparison on the bins common to both runs.
    let mut improved = 0usize;
    let mut total = 0usize;
    for (bin, tv_c, _) in &tv_coarse.per_bin {
        if let Some((_, tv_f, _)) = tv_fine.per_bin.iter().find(|(b, _, _)| b == bin) {
            total += 1;
            if tv_f < tv_c {
                improved += 1;
            }
        }
    }
    if total == 0 {
        return (false, "no common source bins with enough visits".into());
    }
    let frac = improved as f64 / total as f64;
    (
        frac >= 0.8,
        format!(
            "TV decreased on {improved}/{total} source bins ({:.1}%); mean TV {:.3} -> {:.3}",
            100.0 * frac,
            tv_coarse.mean_tv,
            tv_fine.mean_tv
        ),
    )
}

fn c12_graph_averages() -> Outcome {
    let mut ok = true;
    let mut msg = String::new();
    for preset in [Preset::CellularSine, Preset::OpenChannel] {
        let f = StreamFunction::preset(preset);
        let topo = match FlowTopology::build(&f) {
            Ok(t) => t,
            Err(e) => return (false, format!("topology failed: {e}")),
        };
        let ones = match estimator::graph_average(&f, &topo, &topo.graph, |_| 1.0, 8) {
            Ok(g) => g,
            Err(e) => return (false, format!("graph average failed: {e}")),
        };
        let mut c_dev = 0.0f64;
        for (_, vals) in &ones.per_edge {
            for v in vals {
                c_dev = c_dev.max((v - 1.0).abs());
            }
        }
        let v2 = match estimator::graph_average(&f, &topo, &topo.graph, |x| f.velocity(x)[1], 8)
        {
            Ok(g) => g,
            Err(e) => return (false, format!("graph average failed: {e}")),
        };
        let mut v_dev = 0.0f64;
        for (_, vals) in &v2.per_edge {
            for v in vals {
                v_dev = v_dev.max(v.abs());
            }
        }
        ok &= c_dev < 1e-12 && v_dev < 1e-6;
        let _ = write!(msg, "{preset:?}: |const-1| {c_dev:.1e}, |v2bar| {v_dev:.1e}; ");
    }
    (ok, format!("{msg}(want exact and < 1e-6)"))
}
