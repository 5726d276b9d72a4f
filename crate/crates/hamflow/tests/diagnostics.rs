//! Scaling and closeness diagnostics beyond the acceptance gate: the
//! tracking bounds of the perturbed process along deterministic orbits, the
//! exit-time and exit-probability estimates, invariant-measure stability,
//! the one-step arrival marginal, and the channel-flow cross-checks.

use hamflow::chain::{self, ChainConfig};
use hamflow::estimator::{self, GreenKuboConfig, MsdConfig};
use hamflow::field::{Preset, StreamFunction};
use hamflow::geom;
use hamflow::levelcoeffs::{self, CellFrame};
use hamflow::sde::{self, GaussianStream, IntegratorConfig, StepControl, TrajectoryState};
use hamflow::topology::FlowTopology;
use std::sync::OnceLock;

fn cellular() -> &'static (StreamFunction, FlowTopology) {
    static T: OnceLock<(StreamFunction, FlowTopology)> = OnceLock::new();
    T.get_or_init(|| {
        let f = StreamFunction::preset(Preset::CellularSine);
        let topo = FlowTopology::build(&f).unwrap();
        (f, topo)
    })
}

/// RK4 reference orbit sampled at the SDE step times.
fn deterministic_orbit(f: &StreamFunction, x0: [f64; 2], dt: f64, n: usize) -> Vec<[f64; 2]> {
    let mut xs = Vec::with_capacity(n + 1);
    let mut x = x0;
    xs.push(x);
    for _ in 0..n {
        let k1 = f.velocity(x);
        let k2 = f.velocity(geom::add(x, geom::scale(k1, dt / 2.0)));
        let k3 = f.velocity(geom::add(x, geom::scale(k2, dt / 2.0)));
        let k4 = f.velocity(geom::add(x, geom::scale(k3, dt)));
        for i in 0..2 {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        xs.push(x);
    }
    xs
}

/// Fraction of sample paths whose sup-deviation from the deterministic orbit
/// over one rotation exceeds the given thresholds (in H and in position).
fn tracking_exceedance(
    f: &StreamFunction,
    eps: f64,
    x0: [f64; 2],
    period: f64,
    h_threshold: f64,
    pos_threshold: f64,
    n_paths: usize,
    seed: u64,
) -> (f64, f64) {
    let cfg = IntegratorConfig { epsilon: eps, dt_max: 1e-3, ..Default::default() };
    let dt = cfg.effective_dt(f);
    let n_steps = (period / dt).ceil() as usize;
    let orbit = deterministic_orbit(f, x0, dt, n_steps);
    let h_ref: Vec<f64> = orbit.iter().map(|&x| f.h(x)).collect();
    let mut h_exceed = 0usize;
    let mut pos_exceed = 0usize;
    for i in 0..n_paths {
        let mut stream = GaussianStream::new(seed, i as u64);
        let mut st = TrajectoryState::new(x0);
        let mut k = 0usize;
        let mut h_bad = false;
        let mut pos_bad = false;
        let _ = sde::integrate_observed(f, &cfg, &mut st, &mut stream, period, |ev| {
            k += 1;
            if k < orbit.len() {
                if (ev.h_next - h_ref[k]).abs() > h_threshold {
                    h_bad = true;
                }
                if geom::torus_dist(ev.pos_next, geom::wrap(orbit[k])) > pos_threshold {
                    pos_bad = true;
                }
            }
            StepControl::Continue
        });
        if h_bad {
            h_exceed += 1;
        }
        if pos_bad {
            pos_exceed += 1;
        }
    }
    (h_exceed as f64 / n_paths as f64, pos_exceed as f64 / n_paths as f64)
}

#[test]
fn perturbed_process_tracks_deterministic_orbit() {
    // Over one rotation from a mid-cell level, the sup deviation of H from
    // the deterministic orbit stays below eps^(1/2 - delta) with high
    // probability, improving as eps decreases.
    let (f, topo) = cellular();
    let cell = topo.cells.iter().find(|c| c.interior_sign > 0).unwrap();
    let frame = CellFrame::new(topo, f, cell.id);
    let contour = levelcoeffs::trace_contour(&frame, 0.3).unwrap();
    let x0 = geom::wrap(contour.polyline[contour.polyline.len() / 3]);
    let coeffs = levelcoeffs::compute_coefficients_with(&frame, &[0.3], 6e-4, false).unwrap();
    let period = coeffs.period[0];

    // sup |H(X_s) - H(x_s)| over a rotation has standard deviation
    // sqrt(eps * a(H)) ~ 2.6 sqrt(eps), so the threshold eps^(1/2 - delta)
    // is a rare-event level only once eps^(-delta) clears a few sigmas;
    // delta = 0.35 puts it at 4+ sigma for eps = 1e-3.
    let delta = 0.35;
    let mut h_fracs = Vec::new();
    let mut pos_fracs = Vec::new();
    for &e in &[1e-2f64, 1e-3] {
        let (h_frac, pos_frac) = tracking_exceedance(
            f,
            e,
            x0,
            period,
            e.powf(0.5 - delta),
            e.powf(0.05),
            1000,
            71,
        );
        h_fracs.push(h_frac);
        pos_fracs.push(pos_frac);
    }
    assert!(h_fracs[1] < 0.05, "H tracking exceedance {} at eps 1e-3", h_fracs[1]);
    assert!(
        h_fracs[1] <= h_fracs[0] + 0.02,
        "H exceedance did not improve: {h_fracs:?}"
    );
    // Position property at fixed delta' = 0.05: small and non-increasing.
    assert!(pos_fracs[1] < 0.05, "position exceedance {} at eps 1e-3", pos_fracs[1]);
    assert!(
        pos_fracs[1] <= pos_fracs[0] + 0.02,
        "position exceedance did not improve: {pos_fracs:?}"
    );
}

#[test]
fn step_size_bias_subdominant() {
    // Halving dt_max moves D(eps = 0.02) by less than the Monte Carlo error.
    let f = StreamFunction::preset(Preset::CellularSine);
    let mk = |dt: f64| MsdConfig {
        dt_max: dt,
        strict_mixing_check: false,
        ..MsdConfig::new(0.02, 10_000, 50.0, 2024)
    };
    let a = estimator::estimate_msd(&f, &mk(1e-3)).unwrap();
    let b = estimator::estimate_msd(&f, &mk(5e-4)).unwrap();
    for i in 0..2 {
        let diff = (a.d[i][i] - b.d[i][i]).abs();
        let sigma = (a.stderr[i][i].powi(2) + b.stderr[i][i].powi(2)).sqrt();
        assert!(
            diff < 2.0 * sigma,
            "dt bias on D{i}{i}: {} vs {} (diff {diff:.2e}, sigma {sigma:.2e})",
            a.d[i][i],
            b.d[i][i]
        );
    }
}

#[test]
fn lattice_symmetry_of_diffusivity() {
    // D11 ~ D22 for the cellular preset (joint two-sigma band).
    let f = StreamFunction::preset(Preset::CellularSine);
    let cfg = MsdConfig { dt_max: 1e-3, ..MsdConfig::new(0.01, 8000, 71.0, 4096) };
    let est = estimator::estimate_msd(&f, &cfg).unwrap();
    let diff = (est.d[0][0] - est.d[1][1]).abs();
    let sigma = (est.stderr[0][0].powi(2) + est.stderr[1][1].powi(2)).sqrt();
    assert!(diff < 2.5 * sigma, "D11 {} vs D22 {}", est.d[0][0], est.d[1][1]);
}

#[test]
fn exit_probability_bounds_and_trends() {
    let (f, topo) = cellular();
    // From the separatrix, the probability of exiting the tube before the
    // chain step completes decreases as eps shrinks (the c eps^(1/2-alpha1)
    // bound), and the mean tube exit time has a stable fitted constant.
    let mut from_l = Vec::new();
    let mut cs = Vec::new();
    for &eps in &[1e-2, 1e-3] {
        let rep = chain::exit_probability_diagnostic(f, topo, eps, 0.3, &[0.5], 1500, 33)
            .unwrap();
        from_l.push(rep.from_skeleton);
        cs.push(rep.fitted_c);
        // Starting exactly on the wall exits immediately: depth fraction 1.
        // (Covered analytically: the tube test is >=, so a wall start is an
        // exit; asserted here through the linear-law endpoint being close.)
        assert!(rep.interior[0].1 > 0.35 && rep.interior[0].1 < 0.65);
    }
    assert!(
        from_l[1] < from_l[0],
        "tube-exit-first probability should decrease with eps: {from_l:?}"
    );
    let ratio = cs[1] / cs[0];
    assert!(
        (0.5..=2.0).contains(&ratio),
        "fitted exit-time constants unstable: {cs:?}"
    );
}

#[test]
fn one_step_arrival_marginal_matches_absorbed_gaussian() {
    // The h marginal at the first pass/exit from a mid-edge start is the
    // absorbed Gaussian with variance = theta distance to the next saddle,
    // plus two atoms at the tube walls.
    let (f, topo) = cellular();
    let eps: f64 = 0.005;
    let alpha1 = 0.3;
    let edge = 0;
    let theta0 = 0.5 * topo.edges[edge].theta_length;
    let theta_j = topo.edges[edge].theta_length - theta0;
    let barrier = eps.powf(alpha1) / eps.sqrt(); // eps^(alpha1 - 1/2)
    let samples =
        chain::one_step_h_marginal(f, topo, eps, alpha1, edge, theta0, 20_000, 55).unwrap();

    // Empirical histogram: interior bins plus the two atoms.
    let n_bins = 24usize;
    let mut hist = vec![0.0; n_bins + 2];
    let total = samples.len() as f64;
    for &(h, atom) in &samples {
        if atom {
            if h > 0.0 {
                hist[n_bins + 1] += 1.0;
            } else {
                hist[n_bins] += 1.0;
            }
        } else {
            let b = (((h + barrier) / (2.0 * barrier)) * n_bins as f64)
                .clamp(0.0, n_bins as f64 - 1.0) as usize;
            hist[b] += 1.0;
        }
    }
    for v in hist.iter_mut() {
        *v /= total;
    }
    // Reference law: absorbed density by images + equal atoms.
    let mut want = vec![0.0; n_bins + 2];
    let atom = sde::two_barrier_atom_mass(theta_j, barrier, 8);
    want[n_bins] = atom;
    want[n_bins + 1] = atom;
    let m = 400;
    for b in 0..n_bins {
        let lo = -barrier + 2.0 * barrier * b as f64 / n_bins as f64;
        let hi = -barrier + 2.0 * barrier * (b + 1) as f64 / n_bins as f64;
        let mut mass = 0.0;
        for k in 0..m {
            let u = lo + (hi - lo) * (k as f64 + 0.5) / m as f64;
            mass += sde::two_barrier_density(u, theta_j, barrier, 8);
        }
        want[b] = mass * (hi - lo) / m as f64;
    }
    let tv: f64 = 0.5
        * hist
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    assert!(tv < 0.05, "one-step h marginal TV {tv}");
}

#[test]
fn chain_mixing_and_invariant_measure_stability() {
    let (f, topo) = cellular();
    let mk = |eps: f64, seed: u64| {
        let cfg = ChainConfig { bins_per_edge: 16, ..ChainConfig::new(eps, 60_000, seed) };
        chain::run_chain(f, topo, &cfg).unwrap()
    };
    let r04 = mk(0.04, 91);
    let r01 = mk(0.01, 92);
    let r005 = mk(0.005, 93);

    // Mean winding jump vanishes within 3 sigma.
    for r in [&r04, &r01, &r005] {
        for c in 0..2 {
            assert!(
                r.stats.jump_mean[c].abs() < 3.5 * r.stats.jump_mean_stderr[c],
                "jump mean {c}: {} +- {}",
                r.stats.jump_mean[c],
                r.stats.jump_mean_stderr[c]
            );
        }
    }

    // Mixing proxy: jump autocorrelation below 0.05 by lag 20.
    let late = &r01.stats.jump_autocorr[10..20];
    for (k, v) in late.iter().enumerate() {
        assert!(v.abs() < 0.05, "autocorr lag {} = {v}", k + 11);
    }

    // Invariant-measure stability: TV(mu(0.01), mu(0.005)) below
    // TV(mu(0.04), mu(0.01)).
    let tv = |a: &chain::ChainStatistics, b: &chain::ChainStatistics| -> f64 {
        let ta: f64 = a.occupancy.iter().sum::<u64>() as f64;
        let tb: f64 = b.occupancy.iter().sum::<u64>() as f64;
        0.5 * a
            .occupancy
            .iter()
            .zip(&b.occupancy)
            .map(|(x, y)| (*x as f64 / ta - *y as f64 / tb).abs())
            .sum::<f64>()
    };
    let coarse_gap = tv(&r04.stats, &r01.stats);
    let fine_gap = tv(&r01.stats, &r005.stats);
    assert!(
        fine_gap < coarse_gap,
        "invariant measure not converging: TV(0.04, 0.01) = {coarse_gap:.4}, TV(0.01, 0.005) = {fine_gap:.4}"
    );
}

#[test]
fn symmetric_starts_have_equal_transit_laws() {
    // Starts related by the lattice symmetry produce the same transit-time
    // distribution (two-sample KS).
    let (f, topo) = cellular();
    let gather = |edge: usize, seed: u64| -> Vec<f64> {
        let e = &topo.edges[edge];
        let theta = 0.5 * e.theta_length;
        let samples =
            chain::one_step_transits(f, topo, 0.01, 0.3, edge, theta, 8000, seed).unwrap();
        let mut s = samples;
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s
    };
    // Two edges mapped onto each other by the half-period translation.
    let e0 = 0usize;
    let p0 = geom::wrap(topo.edges[e0].point_at_theta(0.3));
    let shifted = geom::wrap([p0[0] + 0.5, p0[1] + 0.5]);
    let (e1, _, d) = topo.edge_locator.nearest(&topo.edges, shifted).unwrap();
    assert!(d < 1e-6, "translated edge point should sit on an edge");
    let a = gather(e0, 7001);
    let b = gather(e1, 7002);
    let ks = {
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        ks
    };
    assert!(ks < 0.03, "transit-time KS between symmetric starts: {ks}");
}

#[test]
fn channel_chain_matches_msd_d22() {
    // The chain of transitions between the unbounded separatrix levels
    // reproduces the cross-channel diffusivity.
    let f = StreamFunction::preset(Preset::OpenChannel);
    let topo = FlowTopology::build(&f).unwrap();
    let eps = 0.05;
    let chain_est = estimator::channel_chain_d22(&f, &topo, eps, 20_000, 314).unwrap();
    let msd_cfg = MsdConfig { dt_max: 1e-3, ..MsdConfig::new(eps, 6000, 60.0, 315) };
    let msd = estimator::estimate_msd(&f, &msd_cfg).unwrap();
    let rel = (chain_est.d[1][1] - msd.d[1][1]).abs() / msd.d[1][1];
    assert!(
        rel < 0.2,
        "channel-chain D22 {} vs MSD {} (rel {rel:.3})",
        chain_est.d[1][1],
        msd.d[1][1]
    );
}

#[test]
fn accelerated_process_preserves_lebesgue() {
    // Torus-position histogram of the accelerated process at t = 50 from
    // uniform starts stays uniform (chi^2, 8x8 bins, alpha = 0.001).
    let f = StreamFunction::preset(Preset::CellularSine);
    let eps = 0.1;
    let accel = f.scaled(1.0 / eps);
    let icfg = IntegratorConfig { epsilon: 1.0, dt_max: 2e-3, ..Default::default() };
    let n_paths = 2000usize;
    let nb = 8usize;
    let mut counts = vec![0u64; nb * nb];
    for i in 0..n_paths {
        let mut stream = GaussianStream::new(777, i as u64);
        let mut st = TrajectoryState::new([stream.uniform(), stream.uniform()]);
        sde::integrate(&accel, &icfg, &mut st, &mut stream, 50.0).unwrap();
        let bx = (st.torus_pos[0] * nb as f64) as usize % nb;
        let by = (st.torus_pos[1] * nb as f64) as usize % nb;
        counts[by * nb + bx] += 1;
    }
    let expected = n_paths as f64 / (nb * nb) as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // chi^2 critical value at alpha = 0.001 for 63 dof (Wilson-Hilferty).
    let dof = (nb * nb - 1) as f64;
    let z = 3.090;
    let crit = dof * (1.0 - 2.0 / (9.0 * dof) + z * (2.0 / (9.0 * dof)).sqrt()).powi(3);
    assert!(chi2 < crit, "chi^2 {chi2:.1} over critical {crit:.1}");
}

#[test]
fn channel_green_kubo_scaling_and_fluctuation_reduction() {
    let f = StreamFunction::preset(Preset::OpenChannel);
    let topo = FlowTopology::build(&f).unwrap();

    // eps * D11 stabilizes over a 4x epsilon range.
    let mut scaled = Vec::new();
    for (i, &eps) in [0.2, 0.1, 0.05].iter().enumerate() {
        let cfg = GreenKuboConfig::new(eps, 0, 400, 500 + i as u64);
        let d = estimator::estimate_green_kubo(&f, &cfg).unwrap();
        scaled.push(eps * d.estimate.d[0][0]);
    }
    for w in scaled.windows(2) {
        let r = w[1] / w[0];
        assert!((0.7..=1.4).contains(&r), "eps*D11 ratios unstable: {scaled:?}");
    }

    // Vanishing-average reduction: for an observable whose level-set average
    // is identically zero (v1 minus the lift of its graph average), the time
    // integral of its expectation from a fixed interior start is small
    // compared with the unsubtracted integral, and does not grow as eps
    // decreases.
    let vbar = estimator::graph_average(&f, &topo, &topo.graph, |x| f.velocity(x)[0], 32)
        .unwrap();
    let lookup = |x: [f64; 2]| -> f64 {
        let cell = topo.membership.cell_at(x);
        let (ge_idx, _) = topo
            .graph
            .edges
            .iter()
            .enumerate()
            .find(|(_, e)| e.cell == cell)
            .expect("cell has a graph edge");
        let (grid, vals) = &vbar.per_edge[ge_idx];
        if grid.is_empty() {
            return 0.0;
        }
        let h = f.h(x);
        let i = grid.partition_point(|&g| g < h).clamp(1, grid.len() - 1);
        let s = ((h - grid[i - 1]) / (grid[i] - grid[i - 1])).clamp(0.0, 1.0);
        vals[i - 1] * (1.0 - s) + vals[i] * s
    };
    // Mid-channel start (on the line where H = 0).
    let x0 = [0.31, 0.0];
    let t_int = 1.0; // accelerated clock
    let n_paths = 3000usize;
    let mut ratios = Vec::new();
    for (i, &eps) in [0.2f64, 0.1].iter().enumerate() {
        let accel = f.scaled(1.0 / eps);
        let icfg = hamflow::sde::IntegratorConfig {
            epsilon: 1.0,
            dt_max: 2e-3,
            ..Default::default()
        };
        let mut raw_sum = 0.0;
        let mut fluct_sum = 0.0;
        for p in 0..n_paths {
            let mut stream = GaussianStream::new(900 + i as u64, p as u64);
            let mut st = TrajectoryState::new(x0);
            let mut raw = 0.0;
            let mut fluct = 0.0;
            let _ = sde::integrate_observed(&accel, &icfg, &mut st, &mut stream, t_int, |ev| {
                let dt = ev.t_next - ev.t_prev;
                let v1 = f.velocity(ev.pos_next)[0];
                raw += v1 * dt;
                fluct += (v1 - lookup(ev.pos_next)) * dt;
                StepControl::Continue
            });
            raw_sum += raw;
            fluct_sum += fluct;
        }
        let raw_mean = (raw_sum / n_paths as f64).abs();
        let fluct_mean = (fluct_sum / n_paths as f64).abs();
        ratios.push(fluct_mean / raw_mean.max(1e-9));
    }
    for (i, r) in ratios.iter().enumerate() {
        assert!(
            *r < 0.1,
            "averaged-out observable integral not small at index {i}: ratios {ratios:?}"
        );
    }
}
