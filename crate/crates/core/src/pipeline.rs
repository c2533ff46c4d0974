//! Scenario pipeline (flow, conjugate kernels, Harnack checks, reduced
//! distance, functionals), verdict collection and refinement studies.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conjugate::{
    duality_defect, kernel_upper_bound_check, pairing, solve_conjugate_fundamental,
    solve_forward_heat, ConjugateHeatSolution, HeatSolution,
};
use crate::error::{Error, Result};
use crate::fixtures::theta_solution;
use crate::flow::{
    gauge_invariants_compare, monitor_report, run_flow, shi_diagnostic, DtPolicy, FlowTrajectory,
};
use crate::functionals::{
    base_whole_consistency, derivative_identities, entropy_psiw, functional_series, lambda_w,
    lambda_w_dense, mu_monotonicity_check, mu_w, nu_w_sweep, small_tau_mu_limit, soliton_residual,
    strangebehavior_probe,
};
use crate::geometry::{Gauge, WarpedGeometry};
use crate::harnack::{
    check_nonpositivity, compute_v, conjugate_identity_residual, curve_harnack_check,
    gradient_estimate_check, rho_at, rho_monotone_limit, second_order_verdict, Curve,
    EstimateConstants, HarnackReport, RefinementVerdict,
};
use crate::io::{self, HarnackRow};
use crate::reduced::{
    compare_h_ell, curvature_bounds, lw_bounds_check, mueller_d_identity, reduced_volume,
    small_tau_limits, solve_reduced_distance_with, ReducedOptions,
};
use crate::scenario::{ScenarioConfig, Stage};

/// Minimum fitted order for refinement verdicts.
pub const MIN_ORDER: f64 = 1.8;

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub stage: Stage,
    /// The statement the check certifies.
    pub anchor: &'static str,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub level: u32,
    pub n_points: usize,
    pub verdicts: Vec<Verdict>,
    /// Measured quantities reported without a verdict.
    pub diagnostics: BTreeMap<String, f64>,
    pub all_pass: bool,
}

impl RunSummary {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

struct Collector {
    verdicts: Vec<Verdict>,
    diagnostics: BTreeMap<String, f64>,
}

impl Collector {
    fn check(
        &mut self,
        stage: Stage,
        name: impl Into<String>,
        anchor: &'static str,
        pass: bool,
        value: f64,
        tolerance: f64,
    ) {
        self.verdicts.push(Verdict {
            name: name.into(),
            stage,
            anchor,
            pass,
            value,
            tolerance,
        });
    }

    fn note(&mut self, name: impl Into<String>, value: f64) {
        self.diagnostics.insert(name.into(), value);
    }
}

fn staged<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage.name()))
}

/// Flow for the configuration at its own resolution.
pub fn run_trajectory(cfg: &ScenarioConfig) -> Result<Arc<FlowTrajectory>> {
    let init = cfg.initial_geometry()?;
    Ok(Arc::new(run_flow(&init, &cfg.integrator(), cfg.system)?))
}

/// `B = max(0, −min_τ μ(g(0), τ))` over dyadic `τ ≤ T`, the constant of the
/// kernel upper bound.
pub fn entropy_bound_b(geom: &WarpedGeometry, t_final: f64) -> Result<f64> {
    let taus: Vec<f64> = (0..6).map(|k| t_final / 2f64.powi(k)).collect();
    let sweep = nu_w_sweep(geom, &taus)?;
    Ok((-sweep.min).max(0.0))
}

/// Relative change of `∫H u dμ` with `u` the exponent carried by the
/// trajectory, which solves the forward heat equation of its own system.
/// Normalised by `sup |u(0)|` since the pairing itself may vanish.
pub fn evolved_exponent_duality(sol: &ConjugateHeatSolution) -> f64 {
    let u0 = &sol.geometry(0).u;
    let scale = u0.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let reference = pairing(sol, u0, 0);
    (0..=sol.bootstrap_index)
        .map(|k| (pairing(sol, &sol.geometry(k).u, k) - reference).abs() / scale)
        .fold(0.0, f64::max)
}

/// Kernel at `y`, refusing grids so coarse that the Gaussian bootstrap
/// starts above `tau_min`.
fn kernel(
    cfg: &ScenarioConfig,
    traj: Arc<FlowTrajectory>,
    y: usize,
) -> Result<ConjugateHeatSolution> {
    let sol = solve_conjugate_fundamental(traj, y, cfg.t_final)?;
    let tau0 = sol.tau(sol.bootstrap_index);
    if tau0 > cfg.tau_min() {
        return Err(Error::config(format!(
            "bootstrap tau {tau0} exceeds tau_min {}; refine the grid or raise tau_min",
            cfg.tau_min()
        )));
    }
    Ok(sol)
}

/// The same scenario integrated in `system`, with its kernel at `y`.
fn companion(cfg: &ScenarioConfig, system: Gauge, y: usize) -> Result<ConjugateHeatSolution> {
    let mut other = cfg.clone();
    other.system = system;
    let traj = run_trajectory(&other)?;
    kernel(cfg, traj, y)
}

fn forward(sol: &ConjugateHeatSolution, f: impl Fn(f64) -> f64) -> Result<HeatSolution> {
    let g = sol.trajectory.first();
    solve_forward_heat(sol.trajectory.clone(), &g.grid.sample(f), g.time)
}

/// Run the requested stages of `cfg` refined `level` times and write the run
/// directory. Verdict failures are reported, not raised.
pub fn run_scenario(cfg: &ScenarioConfig, level: u32, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.at_level(level);
    io::ensure_dir(out)?;
    let mut c = Collector {
        verdicts: Vec::new(),
        diagnostics: BTreeMap::new(),
    };
    let t_final = cfg.t_final;
    let tau_min = cfg.tau_min();

    let traj = staged(Stage::Flow, run_trajectory(&cfg))?;
    io::write_json(
        &out.join("manifest.json"),
        &io::Manifest::new(
            &cfg.name,
            &traj,
            cfg.v_f,
            cfg.seed,
            level,
            cfg.csv_time_rows,
        ),
    )?;
    io::write_snapshots(&out.join("snapshots.csv"), &traj, cfg.csv_time_rows)?;
    if cfg.wants(Stage::Flow) {
        let m = monitor_report(&traj);
        let worst = m.min_s_drop.max(m.max_grad_rise).max(m.max_abs_u_rise);
        c.check(
            Stage::Flow,
            "max_principle_monitors",
            "min S nondecreasing, max |grad u|^2 and max |u| nonincreasing",
            m.pass,
            worst,
            m.tolerance,
        );
        let shi = shi_diagnostic(&traj);
        c.note("shi_scaled_gradient", shi.max_scaled_gradient);
        c.note("shi_soft_bound", shi.bound);
    }

    let needs_kernel = [
        Stage::Conjugate,
        Stage::Harnack,
        Stage::Reduced,
        Stage::Functionals,
    ]
    .iter()
    .any(|s| cfg.wants(*s));
    if !needs_kernel {
        return finish(cfg, level, c, out);
    }

    let b = staged(Stage::Conjugate, entropy_bound_b(traj.first(), t_final))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (ci, &y) in cfg.centers.iter().enumerate() {
        let tag = |name: &str| {
            if ci == 0 {
                name.to_string()
            } else {
                format!("{name}@{y}")
            }
        };
        let sol = staged(Stage::Conjugate, kernel(&cfg, traj.clone(), y))?;
        io::write_conjugate(
            &out.join(io::conjugate_file_name(y, t_final)),
            &sol,
            cfg.csv_time_rows,
        )?;
        let ones = staged(Stage::Conjugate, forward(&sol, |_| 1.0))?;

        if cfg.wants(Stage::Conjugate) {
            let drift = sol.mass_drift();
            c.check(
                Stage::Conjugate,
                tag("mass_conservation"),
                "integral of H is constant in t",
                drift <= 1e-6,
                drift,
                1e-6,
            );
            let cosine = staged(Stage::Conjugate, forward(&sol, |x| 2.0 + x.cos()))?;
            let d = staged(Stage::Conjugate, duality_defect(&sol, &cosine))?;
            c.check(
                Stage::Conjugate,
                tag("duality_cosine"),
                "integral of H Phi is constant for heat solutions Phi",
                d <= 1e-5,
                d,
                1e-5,
            );
            let d = evolved_exponent_duality(&sol);
            c.check(
                Stage::Conjugate,
                tag("duality_exponent"),
                "integral of H Phi is constant for heat solutions Phi",
                d <= 1e-5,
                d,
                1e-5,
            );
            let s0 = traj.first().adapted_scalar();
            let dmin = s0.iter().copied().fold(0.0, f64::min);
            let kb = kernel_upper_bound_check(&sol, b, dmin);
            c.check(
                Stage::Conjugate,
                tag("kernel_upper_bound"),
                "H <= exp(B - tau D / 3) (4 pi tau)^(-n/2)",
                kb.pass,
                kb.worst_margin,
                kb.tolerance,
            );
        }

        let report = compute_v(&sol);
        if cfg.wants(Stage::Harnack) {
            harnack_stage(&cfg, &sol, &report, &ones, b, &mut rng, &mut c, &tag)?;
            if ci == 0 {
                write_harnack_csv(&cfg, &sol, &report, &ones, out)?;
            }
        }

        if cfg.wants(Stage::Reduced) {
            // the action lives on the gauged flow; ungauged scenarios use a gauged rerun
            let (gauged_sol, gauged_ones);
            let (traj, sol, ones) = if traj.system == Gauge::Gauged {
                (traj.clone(), &sol, &ones)
            } else {
                gauged_sol = staged(Stage::Reduced, companion(&cfg, Gauge::Gauged, y))?;
                gauged_ones = staged(Stage::Reduced, forward(&gauged_sol, |_| 1.0))?;
                (gauged_sol.trajectory.clone(), &gauged_sol, &gauged_ones)
            };
            let opts = ReducedOptions {
                slices: cfg.reduced_slices,
                ..ReducedOptions::default()
            };
            let field = staged(
                Stage::Reduced,
                solve_reduced_distance_with(traj.clone(), y, t_final, t_final, &opts),
            )?;
            io::write_reduced(&out.join(io::reduced_file_name(y, t_final)), &field)?;
            let (k1, k2) = curvature_bounds(&traj, 0.0, t_final);
            let lw = lw_bounds_check(&field, k1, k2);
            c.check(
                Stage::Reduced,
                tag("action_bounds"),
                "two-sided bounds of 4 tau ell by d_T^2 with curvature constants",
                lw.pass,
                lw.lower_margin.min(lw.upper_margin),
                lw.tolerance,
            );
            let cmp = staged(Stage::Reduced, compare_h_ell(&sol, &field, tau_min))?;
            c.check(
                Stage::Reduced,
                tag("h_below_ell"),
                "h <= ell_w",
                cmp.pass,
                cmp.min_margin,
                cmp.tolerance,
            );
            c.note(tag("h_below_ell_all_levels"), cmp.min_margin_all);
            let st = staged(Stage::Reduced, small_tau_limits(&sol, &field, &ones, 1e-3))?;
            c.check(
                Stage::Reduced,
                tag("small_tau_distance"),
                "4 tau ell tends to d_T^2",
                st.pass_d2,
                st.d2_relative_error,
                st.d2_tolerance,
            );
            let moment_err = st
                .moment_limits
                .iter()
                .map(|m| (m - st.moment_target).abs())
                .fold(0.0, f64::max);
            c.check(
                Stage::Reduced,
                tag("small_tau_moments"),
                "integrals of h H, ell H and d^2/(4 tau) H tend to n/2",
                st.pass_moments,
                moment_err,
                st.moment_tolerance,
            );
            c.note(
                tag("reduced_volume_nonincreasing_defect"),
                reduced_volume(&field).nonincreasing_defect,
            );
            if ci == 0 && traj.system == Gauge::Gauged && traj.len() > 2 {
                let k = traj.len() / 2;
                let g = &traj.snapshots[k];
                let x = g.grid.sample(|x| 0.5 * x.cos());
                let d = staged(Stage::Reduced, mueller_d_identity(&traj, k, &x))?;
                c.note("d_identity_residual", d.max_residual);
            }
        }

        if cfg.wants(Stage::Functionals) && ci == 0 {
            functionals_stage(&cfg, &traj, &sol, &mut c, out)?;
        }
    }
    finish(cfg, level, c, out)
}

#[allow(clippy::too_many_arguments)]
fn harnack_stage(
    cfg: &ScenarioConfig,
    sol: &ConjugateHeatSolution,
    report: &HarnackReport,
    ones: &HeatSolution,
    b: f64,
    rng: &mut ChaCha8Rng,
    c: &mut Collector,
    tag: &dyn Fn(&str) -> String,
) -> Result<()> {
    let t_final = cfg.t_final;
    let tau_min = cfg.tau_min();
    let spacing = sol.geometry(0).grid.spacing();
    let tol = 10.0 * spacing * spacing;
    let max_v = report.max_v_in_window(tau_min);
    c.check(
        Stage::Harnack,
        tag("harnack_nonpositivity"),
        "v <= 0 for t < T",
        max_v <= tol,
        max_v,
        tol,
    );
    if cfg.is_flat_static() {
        let exact = staged(
            Stage::Harnack,
            theta_solution(sol.trajectory.clone(), sol.y_index, t_final),
        )?;
        let at_top = compute_v(&exact).max_v_series[0];
        c.check(
            Stage::Harnack,
            tag("flat_strict_negativity"),
            "v < 0 on the flat circle",
            at_top < 0.0,
            at_top,
            0.0,
        );
    }
    let res = staged(
        Stage::Harnack,
        conjugate_identity_residual(sol, report, tau_min),
    )?;
    c.note(
        tag("identity_residual"),
        res.iter().map(|r| r.residual).fold(0.0, f64::max),
    );

    let mut worst_curve = f64::INFINITY;
    let mut curves_pass = true;
    for _ in 0..3 {
        let curve = Curve::random(rng, sol.geometry(0).n(), tau_min, t_final, 4);
        let cr = staged(Stage::Harnack, curve_harnack_check(sol, &curve, 0.01))?;
        worst_curve = worst_curve.min(cr.worst_margin);
        curves_pass &= cr.pass;
    }
    c.check(
        Stage::Harnack,
        tag("curve_harnack"),
        "d/dtau (2 sqrt(tau) h) <= sqrt(tau)(S + |gamma'|^2) along curves",
        curves_pass,
        worst_curve,
        tol,
    );

    let consts = EstimateConstants::measure(&sol.trajectory, b);
    let ge = staged(
        Stage::Harnack,
        gradient_estimate_check(sol, &consts, t_final - tau_min),
    )?;
    c.check(
        Stage::Harnack,
        tag("gradient_estimate"),
        "tau |grad q|^2 / q^2 <= (1 + C1 tau)(ln(A/q) + C2 tau)",
        ge.pass,
        ge.worst_margin,
        ge.tolerance,
    );

    let rho = staged(
        Stage::Harnack,
        rho_monotone_limit(sol, report, ones, tau_min),
    )?;
    c.check(
        Stage::Harnack,
        tag("rho_constant_weight"),
        "rho_Phi nondecreasing with limit 0 at t = T",
        rho.pass,
        rho.limit_estimate,
        rho.limit_tolerance,
    );
    let cosine = staged(Stage::Harnack, forward(sol, |x| 2.0 + x.cos()))?;
    let rho = staged(
        Stage::Harnack,
        rho_monotone_limit(sol, report, &cosine, tau_min),
    )?;
    c.check(
        Stage::Harnack,
        tag("rho_cosine_weight"),
        "rho_Phi nondecreasing with limit 0 at t = T",
        rho.pass,
        rho.limit_estimate,
        rho.limit_tolerance,
    );

    // rho_1 and the adapted entropy differ only by the discrete integration by parts
    let mut gap: f64 = 0.0;
    for k in 0..sol.levels() {
        if sol.tau(k) < tau_min - 1e-12 {
            continue;
        }
        let psi = staged(
            Stage::Harnack,
            entropy_psiw(sol.geometry(k), &sol.log_density[k], sol.tau(k)),
        )?;
        gap = gap.max((rho_at(sol, report, ones.at(k).unwrap(), k) - psi).abs());
    }
    c.note(tag("rho_one_entropy_gap"), gap);
    Ok(())
}

fn write_harnack_csv(
    cfg: &ScenarioConfig,
    sol: &ConjugateHeatSolution,
    report: &HarnackReport,
    ones: &HeatSolution,
    out: &Path,
) -> Result<()> {
    let res = conjugate_identity_residual(sol, report, 0.0)?;
    let mut residual = vec![f64::NAN; sol.levels()];
    for r in res {
        residual[r.index] = r.residual;
    }
    let rows: Vec<HarnackRow> = io::strided(sol.levels(), cfg.csv_time_rows)
        .into_iter()
        .map(|k| HarnackRow {
            t: report.times[k],
            max_v: report.max_v_series[k],
            identity_residual: residual[k],
            rho: rho_at(sol, report, ones.at(k).unwrap(), k),
        })
        .collect();
    io::write_harnack_report(&out.join("harnack_report.csv"), &rows)
}

fn functionals_stage(
    cfg: &ScenarioConfig,
    traj: &Arc<FlowTrajectory>,
    sol: &ConjugateHeatSolution,
    c: &mut Collector,
    out: &Path,
) -> Result<()> {
    let st = Stage::Functionals;
    let t_final = cfg.t_final;
    let tau_min = cfg.tau_min();
    let rows = staged(st, functional_series(sol, cfg.functional_rows, tau_min))?;
    io::write_functionals(&out.join("functionals.csv"), &rows)?;
    let ids = staged(st, derivative_identities(sol, tau_min))?;
    c.note("energy_derivative_residual", ids.max_energy_residual);
    c.note("entropy_derivative_residual", ids.max_entropy_residual);

    let times: Vec<f64> = (0..5).map(|k| t_final * k as f64 / 4.0).collect();
    let mono = staged(st, mu_monotonicity_check(traj, &times, 0.2 * t_final, 1e-4))?;
    c.check(
        st,
        "mu_monotonicity",
        "mu_w(g(t), tau(t)) nondecreasing when dtau/dt = -1",
        mono.pass,
        mono.defect,
        mono.tolerance,
    );

    let g_t = traj.last();
    let eig = staged(st, lambda_w(g_t))?;
    let dense = lambda_w_dense(g_t);
    let gap = (eig.value - dense).abs();
    c.check(
        st,
        "lambda_dense_agreement",
        "bottom eigenvalue of -4 Laplacian + S",
        gap <= 1e-8,
        gap,
        1e-8,
    );
    c.note("lambda_w_final", eig.value);

    let mu = staged(st, mu_w(g_t, tau_min))?;
    c.check(
        st,
        "mu_euler_lagrange",
        "minimizer satisfies tau(2 Lap h - |grad h|^2 + S) + h - n = mu",
        mu.euler_lagrange_residual <= 1e-6,
        mu.euler_lagrange_residual,
        1e-6,
    );
    let mut big = g_t.clone();
    big.phi.iter_mut().for_each(|v| *v *= 2.0);
    let mu4 = staged(st, mu_w(&big, 4.0 * tau_min))?;
    let scaling = (mu.value - mu4.value).abs();
    c.check(
        st,
        "mu_scaling",
        "mu_w(g, tau) = mu_w(c g, c tau)",
        scaling <= 1e-6,
        scaling,
        1e-6,
    );
    let sol_res = soliton_residual(g_t, &mu.h_min, 1.0 / (2.0 * tau_min));
    c.note("soliton_tensor_residual", sol_res.tensor);
    c.note("soliton_coupling_residual", sol_res.coupling);

    let sweep = staged(st, nu_w_sweep(g_t, &cfg.mu_sweep_taus))?;
    c.note("nu_w_sampled_min", sweep.min);
    if cfg.is_flat_static() {
        let lim = small_tau_mu_limit(&sweep);
        c.check(
            st,
            "mu_small_tau_limit",
            "mu_w(tau) tends to 0 as tau tends to 0",
            lim.abs() <= 1e-3,
            lim,
            1e-3,
        );
    }

    let smallest = cfg
        .strange_taus
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if sol.tau(sol.bootstrap_index) <= smallest * (1.0 + 1e-9) {
        let sb = staged(st, strangebehavior_probe(sol, cfg.v_f, &cfg.strange_taus))?;
        let dev = (sb.slope - sb.expected_slope).abs();
        c.check(
            st,
            "total_space_entropy_slope",
            "total-space entropy of the lifted kernel grows like (p/2) ln(1/tau)",
            dev <= 0.05,
            sb.slope,
            0.05,
        );
        c.check(
            st,
            "fiber_volume_conversion",
            "Psi(h~) = Psi(h-bar)/V(F) + ln V(F)",
            sb.identity_residual <= 1e-10,
            sb.identity_residual,
            1e-10,
        );
    } else {
        c.note(
            "total_space_entropy_skipped_bootstrap_tau",
            sol.tau(sol.bootstrap_index),
        );
    }

    {
        // the comparison is posed in the ungauged frame
        let ungauged_sol;
        let sol = if traj.system == Gauge::Ungauged {
            sol
        } else {
            ungauged_sol = staged(st, companion(cfg, Gauge::Ungauged, cfg.centers[0]))?;
            &ungauged_sol
        };
        let bw = staged(st, base_whole_consistency(sol, tau_min))?;
        let gap = bw.max_gap_unit.max(bw.max_gap_kernel);
        c.check(
            st,
            "base_total_space_consistency",
            "base equation for h equals total-space equation for h + p u",
            gap <= 1e-10,
            gap,
            1e-10,
        );
        c.note("base_equation_residual", bw.max_base_kernel);
    }
    Ok(())
}

fn finish(cfg: ScenarioConfig, level: u32, c: Collector, out: &Path) -> Result<RunSummary> {
    let all_pass = c.verdicts.iter().all(|v| v.pass);
    let summary = RunSummary {
        name: cfg.name.clone(),
        level,
        n_points: cfg.grid.n_points,
        verdicts: c.verdicts,
        diagnostics: c.diagnostics,
        all_pass,
    };
    io::write_json(&out.join("verdict.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub n_points: usize,
    pub spacing: f64,
    pub max_v: f64,
    pub identity_residual: f64,
    pub duality_defect: f64,
    pub h_ell_violation: f64,
    pub gauge_deviation: f64,
    pub energy_derivative_residual: f64,
    pub entropy_derivative_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyVerdict {
    pub name: String,
    pub anchor: &'static str,
    pub verdict: RefinementVerdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub name: String,
    pub levels: Vec<LevelRow>,
    pub verdicts: Vec<StudyVerdict>,
    pub all_pass: bool,
}

/// Quantities of one refinement level. The gauge comparison reruns both
/// systems on a shared fixed step, 0.8 times the smallest CFL step of the
/// main run.
pub fn study_level(cfg: &ScenarioConfig) -> Result<LevelRow> {
    let tau_min = cfg.tau_min();
    let traj = staged(Stage::Flow, run_trajectory(cfg))?;
    let spacing = traj.first().grid.spacing();
    let y = cfg.centers[0];
    let sol = staged(Stage::Conjugate, kernel(cfg, traj.clone(), y))?;
    let report = compute_v(&sol);
    let res = staged(
        Stage::Harnack,
        conjugate_identity_residual(&sol, &report, tau_min),
    )?;
    let cosine = staged(Stage::Conjugate, forward(&sol, |x| 2.0 + x.cos()))?;
    let duality = staged(Stage::Conjugate, duality_defect(&sol, &cosine))?;

    let opts = ReducedOptions {
        slices: cfg.reduced_slices,
        ..ReducedOptions::default()
    };
    let field = staged(
        Stage::Reduced,
        solve_reduced_distance_with(traj.clone(), y, cfg.t_final, cfg.t_final, &opts),
    )?;
    let cmp = staged(Stage::Reduced, compare_h_ell(&sol, &field, tau_min))?;

    let dt = 0.8
        * traj
            .dt_sequence
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
    let mut fixed = cfg.integrator();
    fixed.dt_policy = DtPolicy::Fixed(dt);
    let init = cfg.initial_geometry()?;
    let a = staged(Stage::Flow, run_flow(&init, &fixed, Gauge::Gauged))?;
    let b = staged(Stage::Flow, run_flow(&init, &fixed, Gauge::Ungauged))?;
    let gauge = staged(Stage::Flow, gauge_invariants_compare(&a, &b))?;

    let ids = staged(Stage::Functionals, derivative_identities(&sol, tau_min))?;
    Ok(LevelRow {
        n_points: cfg.grid.n_points,
        spacing,
        max_v: report.max_v_in_window(tau_min),
        identity_residual: res.iter().map(|r| r.residual).fold(0.0, f64::max),
        duality_defect: duality,
        h_ell_violation: -cmp.min_margin,
        gauge_deviation: gauge.max_relative_deviation,
        energy_derivative_residual: ids.max_energy_residual,
        entropy_derivative_residual: ids.max_entropy_residual,
    })
}

/// Exact to round-off at every level, or second-order decay.
fn exact_or_second_order(spacings: &[f64], values: &[f64]) -> Result<RefinementVerdict> {
    if values.iter().all(|v| v.abs() <= 1e-10) {
        return Ok(RefinementVerdict {
            spacings: spacings.to_vec(),
            values: values.to_vec(),
            order: None,
            pass: true,
        });
    }
    second_order_verdict(spacings, values, MIN_ORDER)
}

/// Rerun `cfg` at `levels` resolutions (spacing halved per level, the CFL
/// step following) and fit convergence orders.
pub fn refinement_study(
    cfg: &ScenarioConfig,
    levels: u32,
    out: Option<&Path>,
) -> Result<StudyResult> {
    cfg.validate()?;
    if levels < 2 {
        return Err(Error::config("a refinement study needs at least 2 levels"));
    }
    let rows = (0..levels)
        .map(|k| study_level(&cfg.at_level(k)))
        .collect::<Result<Vec<_>>>()?;
    let hs: Vec<f64> = rows.iter().map(|r| r.spacing).collect();
    let col = |f: fn(&LevelRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let verdicts = vec![
        StudyVerdict {
            name: "harnack_nonpositivity".into(),
            anchor: "v <= 0 for t < T",
            verdict: check_nonpositivity(&hs, &col(|r| r.max_v))?,
        },
        StudyVerdict {
            name: "conjugate_identity".into(),
            anchor: "Box* v = -2 tau(|S + Hess h - g/2tau|^2 + |Lap w - grad w grad h|^2) H",
            verdict: second_order_verdict(&hs, &col(|r| r.identity_residual), MIN_ORDER)?,
        },
        StudyVerdict {
            name: "duality".into(),
            anchor: "integral of H Phi is constant for heat solutions Phi",
            verdict: exact_or_second_order(&hs, &col(|r| r.duality_defect))?,
        },
        StudyVerdict {
            name: "h_below_ell".into(),
            anchor: "h <= ell_w",
            verdict: check_nonpositivity(&hs, &col(|r| r.h_ell_violation))?,
        },
        StudyVerdict {
            name: "gauge_equivalence".into(),
            anchor: "gauged and ungauged flows are diffeomorphic",
            verdict: exact_or_second_order(&hs, &col(|r| r.gauge_deviation))?,
        },
        StudyVerdict {
            name: "energy_derivative".into(),
            anchor: "dF/dt = 2 int(|S + Hess h|^2 + |Lap w - grad w grad h|^2) e^-h",
            verdict: second_order_verdict(&hs, &col(|r| r.energy_derivative_residual), MIN_ORDER)?,
        },
        StudyVerdict {
            name: "entropy_derivative".into(),
            anchor: "dPsi/dt = 2 tau int(|S + Hess h - g/2tau|^2 + |Lap w - grad w grad h|^2) H",
            verdict: second_order_verdict(&hs, &col(|r| r.entropy_derivative_residual), MIN_ORDER)?,
        },
    ];
    let all_pass = verdicts.iter().all(|v| v.verdict.pass);
    let result = StudyResult {
        name: cfg.name.clone(),
        levels: rows,
        verdicts,
        all_pass,
    };
    if let Some(dir) = out {
        io::ensure_dir(dir)?;
        io::write_json(&dir.join("study.json"), &result)?;
    }
    Ok(result)
}
