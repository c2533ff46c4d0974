//! Time integration of the coupled metric/exponent system on the circle base.
//!
//! Gauged system: `∂t φ = (∂x ũ)²/φ`, `∂t ũ = Δ_N ũ`.
//! Ungauged system: `∂t φ² = 2p (Hess f)_xx / f`, `∂t u = Δ_N u + p|∇u|²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Gauge, WarpedGeometry};
use crate::tridiag::CyclicTridiag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ExplicitRk4,
    ImplicitTrapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtPolicy {
    /// `dt = cfl_safety · (min φ · spacing)² / 2`, recomputed every step.
    Cfl,
    /// Constant step (the last step is shortened to land on `t_end`).
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub cfl_safety: f64,
    pub t_end: f64,
    pub degeneracy_floor: f64,
    #[serde(default = "default_dt_policy")]
    pub dt_policy: DtPolicy,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_dt_policy() -> DtPolicy {
    DtPolicy::Cfl
}

fn default_max_steps() -> usize {
    2_000_000
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::ExplicitRk4,
            cfl_safety: 0.2,
            t_end: 0.5,
            degeneracy_floor: 1e-6,
            dt_policy: DtPolicy::Cfl,
            max_steps: default_max_steps(),
        }
    }
}

impl IntegratorConfig {
    pub fn with_t_end(t_end: f64) -> Self {
        Self {
            t_end,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::config(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if self.scheme == Scheme::ExplicitRk4 && self.cfl_safety > 0.5 {
            return Err(Error::config(
                "cfl_safety must be <= 0.5 for the explicit scheme",
            ));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!("invalid t_end {}", self.t_end)));
        }
        if !(self.degeneracy_floor > 0.0) {
            return Err(Error::config("degeneracy_floor must be positive"));
        }
        if let DtPolicy::Fixed(dt) = self.dt_policy {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::config(format!("invalid fixed dt {dt}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub time: f64,
    pub min_s: f64,
    pub max_grad_u_sq: f64,
    pub max_abs_u: f64,
    pub total_length: f64,
}

impl MonitorRecord {
    pub fn of(geom: &WarpedGeometry) -> Self {
        let s = geom.adapted_scalar();
        let grad = geom.gradient_norm_sq(&geom.u);
        Self {
            time: geom.time,
            min_s: s.iter().copied().fold(f64::INFINITY, f64::min),
            max_grad_u_sq: grad.iter().copied().fold(0.0, f64::max),
            max_abs_u: geom.u.iter().map(|v| v.abs()).fold(0.0, f64::max),
            total_length: geom.total_length(),
        }
    }
}

/// Immutable sequence of snapshots produced by [`run_flow`].
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub snapshots: Vec<WarpedGeometry>,
    pub dt_sequence: Vec<f64>,
    pub system: Gauge,
    pub config: IntegratorConfig,
    pub monitors: Vec<MonitorRecord>,
}

impl FlowTrajectory {
    /// Constant-in-time trajectory with uniform steps, for fixtures whose
    /// geometry is a fixed point of the flow.
    pub fn stationary(geom: WarpedGeometry, dt: f64, steps: usize) -> Self {
        let mut snapshots = Vec::with_capacity(steps + 1);
        let t0 = geom.time;
        for k in 0..=steps {
            let mut g = geom.clone();
            g.time = t0 + k as f64 * dt;
            snapshots.push(g);
        }
        let monitors = snapshots.iter().map(MonitorRecord::of).collect();
        let system = geom.gauge;
        Self {
            snapshots,
            dt_sequence: vec![dt; steps],
            system,
            config: IntegratorConfig {
                dt_policy: DtPolicy::Fixed(dt),
                t_end: t0 + steps as f64 * dt,
                ..IntegratorConfig::default()
            },
            monitors,
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn first(&self) -> &WarpedGeometry {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &WarpedGeometry {
        &self.snapshots[self.snapshots.len() - 1]
    }

    /// Index of the stored time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let times = self.times();
        match times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) if k >= times.len() => times.len() - 1,
            Err(k) => {
                if (times[k] - t).abs() < (t - times[k - 1]).abs() {
                    k
                } else {
                    k - 1
                }
            }
        }
    }

    /// Index of a stored time equal to `t` up to a small relative tolerance.
    pub fn index_of_time(&self, t: f64) -> Result<usize> {
        let k = self.nearest_index(t);
        let scale = 1e-9 * (1.0 + t.abs());
        if (self.snapshots[k].time - t).abs() <= scale {
            Ok(k)
        } else {
            Err(Error::config(format!(
                "time {t} is not on the trajectory grid (nearest {})",
                self.snapshots[k].time
            )))
        }
    }
}

/// Time derivatives `(∂t φ, ∂t u)` of the chosen system.
pub fn velocity(geom: &WarpedGeometry) -> (Vec<f64>, Vec<f64>) {
    let n = geom.n();
    let p = geom.p as f64;
    match geom.gauge {
        Gauge::Gauged => {
            let du = geom.grid.d1(&geom.u);
            let phi_t = (0..n).map(|i| du[i] * du[i] / geom.phi[i]).collect();
            (phi_t, geom.laplacian(&geom.u))
        }
        Gauge::Ungauged => {
            let f = geom.warp();
            let hess = geom.hessian_xx(&f);
            let phi_t = (0..n).map(|i| p * hess[i] / (f[i] * geom.phi[i])).collect();
            let lap = geom.laplacian(&geom.u);
            let grad = geom.gradient_norm_sq(&geom.u);
            let u_t = (0..n).map(|i| lap[i] + p * grad[i]).collect();
            (phi_t, u_t)
        }
    }
}

fn validate_state(geom: &WarpedGeometry, floor: f64) -> Result<()> {
    if geom.u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBlowup { time: geom.time });
    }
    geom.check_nondegenerate(floor)
}

fn axpy(state: &WarpedGeometry, dt: f64, k: &(Vec<f64>, Vec<f64>)) -> WarpedGeometry {
    let mut out = state.clone();
    for i in 0..state.n() {
        out.phi[i] += dt * k.0[i];
        out.u[i] += dt * k.1[i];
    }
    out
}

fn rk4(state: &WarpedGeometry, dt: f64) -> WarpedGeometry {
    let k1 = velocity(state);
    let k2 = velocity(&axpy(state, 0.5 * dt, &k1));
    let k3 = velocity(&axpy(state, 0.5 * dt, &k2));
    let k4 = velocity(&axpy(state, dt, &k3));
    let mut out = state.clone();
    for i in 0..state.n() {
        out.phi[i] += dt / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
        out.u[i] += dt / 6.0 * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i]);
    }
    out.time = state.time + dt;
    out
}

/// Matrix of the conservative base Laplacian.
pub fn laplacian_matrix(geom: &WarpedGeometry) -> CyclicTridiag {
    let n = geom.n();
    let h = geom.grid.spacing();
    let mut a = CyclicTridiag::zeros(n);
    for i in 0..n {
        let w = 1.0 / (geom.phi[i] * h * h);
        a.lower[i] = w / geom.phi_half(geom.grid.prev(i));
        a.upper[i] = w / geom.phi_half(i);
        a.diag[i] = -(a.lower[i] + a.upper[i]);
    }
    a
}

/// Trapezoidal step with the `u`-Laplacian implicit and the remaining terms
/// resolved by fixed-point iteration.
fn trapezoidal(state: &WarpedGeometry, dt: f64) -> Result<WarpedGeometry> {
    let n = state.n();
    let p = state.p as f64;
    let (phi_t0, _) = velocity(state);
    let lap0 = state.laplacian(&state.u);
    let extra = |g: &WarpedGeometry| -> Vec<f64> {
        match g.gauge {
            Gauge::Gauged => vec![0.0; n],
            Gauge::Ungauged => g.gradient_norm_sq(&g.u).iter().map(|v| p * v).collect(),
        }
    };
    let extra0 = extra(state);
    let mut next = rk4(state, dt);
    for _ in 0..60 {
        let (phi_t1, _) = velocity(&next);
        let extra1 = extra(&next);
        let mut a = laplacian_matrix(&next);
        for i in 0..n {
            a.lower[i] *= -0.5 * dt;
            a.upper[i] *= -0.5 * dt;
            a.diag[i] = 1.0 - 0.5 * dt * a.diag[i];
        }
        let rhs: Vec<f64> = (0..n)
            .map(|i| state.u[i] + 0.5 * dt * (lap0[i] + extra0[i] + extra1[i]))
            .collect();
        let u_new = a.solve(&rhs)?;
        let phi_new: Vec<f64> = (0..n)
            .map(|i| state.phi[i] + 0.5 * dt * (phi_t0[i] + phi_t1[i]))
            .collect();
        let change = (0..n)
            .map(|i| {
                (u_new[i] - next.u[i])
                    .abs()
                    .max((phi_new[i] - next.phi[i]).abs())
            })
            .fold(0.0, f64::max);
        next.u = u_new;
        next.phi = phi_new;
        if change < 1e-14 {
            break;
        }
    }
    next.time = state.time + dt;
    Ok(next)
}

fn step(state: &WarpedGeometry, dt: f64, scheme: Scheme, floor: f64) -> Result<WarpedGeometry> {
    let next = match scheme {
        Scheme::ExplicitRk4 => rk4(state, dt),
        Scheme::ImplicitTrapezoidal => trapezoidal(state, dt)?,
    };
    validate_state(&next, floor)?;
    Ok(next)
}

/// One step of the gauged system; `state` must be stored in the gauged convention.
pub fn step_gauged(state: &WarpedGeometry, dt: f64, scheme: Scheme) -> Result<WarpedGeometry> {
    if state.gauge != Gauge::Gauged {
        return Err(Error::config("step_gauged needs a gauged state"));
    }
    step(
        state,
        dt,
        scheme,
        IntegratorConfig::default().degeneracy_floor,
    )
}

/// One step of the ungauged system; `state` must be stored in the ungauged convention.
pub fn step_ungauged(state: &WarpedGeometry, dt: f64, scheme: Scheme) -> Result<WarpedGeometry> {
    if state.gauge != Gauge::Ungauged {
        return Err(Error::config("step_ungauged needs an ungauged state"));
    }
    step(
        state,
        dt,
        scheme,
        IntegratorConfig::default().degeneracy_floor,
    )
}

fn cfl_dt(geom: &WarpedGeometry, cfl: f64) -> f64 {
    let min_phi = geom.phi.iter().copied().fold(f64::INFINITY, f64::min);
    let hm = min_phi * geom.grid.spacing();
    cfl * hm * hm / 2.0
}

/// Integrate `initial` to `cfg.t_end` under `system`. The initial exponent is
/// converted to the system's storage convention.
pub fn run_flow(
    initial: &WarpedGeometry,
    cfg: &IntegratorConfig,
    system: Gauge,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    let mut state = initial.convert(system);
    validate_state(&state, cfg.degeneracy_floor)?;
    let t_end = state.time + cfg.t_end;
    let mut snapshots = vec![state.clone()];
    let mut monitors = vec![MonitorRecord::of(&state)];
    let mut dts = Vec::new();
    while state.time < t_end - 1e-14 * (1.0 + t_end.abs()) {
        if dts.len() >= cfg.max_steps {
            return Err(Error::StepBudget {
                budget: cfg.max_steps,
                time: state.time,
                t_end,
            });
        }
        let mut dt = match cfg.dt_policy {
            DtPolicy::Cfl => cfl_dt(&state, cfg.cfl_safety),
            DtPolicy::Fixed(dt) => dt,
        };
        let last = t_end - state.time <= dt * (1.0 + 1e-9);
        if last {
            dt = t_end - state.time;
        }
        let mut next = step(&state, dt, cfg.scheme, cfg.degeneracy_floor)?;
        if last {
            next.time = t_end;
        }
        monitors.push(MonitorRecord::of(&next));
        dts.push(dt);
        snapshots.push(next.clone());
        state = next;
    }
    Ok(FlowTrajectory {
        snapshots,
        dt_sequence: dts,
        system,
        config: *cfg,
        monitors,
    })
}

/// Largest violation of monotonicity in `series` (0 when monotone).
pub fn monotonicity_defect(series: &[f64], nondecreasing: bool) -> f64 {
    series
        .windows(2)
        .map(|w| {
            if nondecreasing {
                w[0] - w[1]
            } else {
                w[1] - w[0]
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorReport {
    pub min_s_drop: f64,
    pub max_grad_rise: f64,
    pub max_abs_u_rise: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Maximum-principle monitors: `min S` nondecreasing, `max |∇u|²` and
/// `max |u|` nonincreasing, each within `10·spacing²`.
pub fn monitor_report(traj: &FlowTrajectory) -> MonitorReport {
    let h = traj.first().grid.spacing();
    let tol = 10.0 * h * h;
    let min_s: Vec<f64> = traj.monitors.iter().map(|m| m.min_s).collect();
    let grad: Vec<f64> = traj.monitors.iter().map(|m| m.max_grad_u_sq).collect();
    let absu: Vec<f64> = traj.monitors.iter().map(|m| m.max_abs_u).collect();
    let a = monotonicity_defect(&min_s, true);
    let b = monotonicity_defect(&grad, false);
    let c = absu.iter().map(|v| v - absu[0]).fold(0.0, f64::max);
    MonitorReport {
        min_s_drop: a,
        max_grad_rise: b,
        max_abs_u_rise: c,
        tolerance: tol,
        pass: a <= tol && b <= tol && c <= tol,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiReport {
    pub max_scaled_gradient: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `sup|∇u|(t)·√t` against the soft bound `4·sup|u(·,0)|`.
pub fn shi_diagnostic(traj: &FlowTrajectory) -> ShiReport {
    let t0 = traj.first().time;
    let bound = 4.0 * traj.monitors[0].max_abs_u;
    let max_scaled = traj
        .monitors
        .iter()
        .map(|m| m.max_grad_u_sq.sqrt() * (m.time - t0).sqrt())
        .fold(0.0, f64::max);
    ShiReport {
        max_scaled_gradient: max_scaled,
        bound,
        pass: max_scaled <= bound,
    }
}

/// Gauge-invariant scalars of one snapshot: total length, `min S`, `max S`,
/// `∫S dμ`, `min |∇w|²`, `max |∇w|²`.
pub fn invariant_scalars(geom: &WarpedGeometry) -> [f64; 6] {
    let s = geom.adapted_scalar();
    let min_s = -vertex_max(geom, &s.iter().map(|v| -v).collect::<Vec<_>>());
    let max_s = vertex_max(geom, &s);
    [
        geom.total_length(),
        min_s,
        max_s,
        geom.integral(&s),
        -max_s,
        -min_s,
    ]
}

/// Maximum of `field` refined by the parabola through the largest node and
/// its two neighbours in arclength, so the estimate does not depend on where
/// the grid points fall.
fn vertex_max(geom: &WarpedGeometry, field: &[f64]) -> f64 {
    let g = &geom.grid;
    let k = (0..field.len())
        .max_by(|&a, &b| field[a].total_cmp(&field[b]))
        .unwrap();
    let (kp, km) = (g.next(k), g.prev(k));
    let h = g.spacing();
    let dp = 0.5 * h * (geom.phi[k] + geom.phi[kp]);
    let dm = 0.5 * h * (geom.phi[k] + geom.phi[km]);
    // Newton form of the parabola through (−dm, fm), (0, f0), (dp, fp)
    let (fm, f0, fp) = (field[km], field[k], field[kp]);
    let s1 = (fp - f0) / dp;
    let s0 = (f0 - fm) / dm;
    let c2 = (s1 - s0) / (dp + dm);
    if !(c2 < 0.0) {
        return f0;
    }
    let b = s1 - c2 * dp;
    f0 - b * b / (4.0 * c2)
}

pub const INVARIANT_NAMES: [&str; 6] = [
    "total_length",
    "min_s",
    "max_s",
    "integral_s",
    "min_grad_w_sq",
    "max_grad_w_sq",
];

#[derive(Debug, Clone, Serialize)]
pub struct GaugeComparison {
    /// Per invariant: max absolute deviation over time.
    pub max_abs_deviation: Vec<f64>,
    /// Per invariant: max deviation relative to the series' scale.
    pub max_rel_deviation: Vec<f64>,
    pub max_relative_deviation: f64,
}

/// Compare diffeomorphism-invariant scalars of two runs on the same time grid.
pub fn gauge_invariants_compare(a: &FlowTrajectory, b: &FlowTrajectory) -> Result<GaugeComparison> {
    if a.len() != b.len()
        || a.snapshots
            .iter()
            .zip(&b.snapshots)
            .any(|(x, y)| (x.time - y.time).abs() > 1e-12 * (1.0 + x.time.abs()))
    {
        return Err(Error::config("gauge comparison needs identical time grids"));
    }
    let sa: Vec<[f64; 6]> = a.snapshots.iter().map(invariant_scalars).collect();
    let sb: Vec<[f64; 6]> = b.snapshots.iter().map(invariant_scalars).collect();
    let mut abs_dev = vec![0.0; 6];
    let mut rel_dev = vec![0.0; 6];
    // extrema of S can vanish identically, so the curvature entries share
    // the scale sup |S| (times the length for the integral)
    let peak = |f: &dyn Fn(&[f64; 6]) -> f64| sa.iter().chain(&sb).map(f).fold(0.0, f64::max);
    let length = peak(&|v| v[0].abs());
    let curv = peak(&|v| v[1].abs().max(v[2].abs()));
    let scales = [length, curv, curv, curv * length, curv, curv];
    for q in 0..6 {
        let scale = scales[q];
        for (x, y) in sa.iter().zip(&sb) {
            let d = (x[q] - y[q]).abs();
            abs_dev[q] = f64::max(abs_dev[q], d);
            if scale > 0.0 {
                rel_dev[q] = f64::max(rel_dev[q], d / scale);
            } else if d > 0.0 {
                rel_dev[q] = f64::INFINITY;
            }
        }
    }
    let max_rel = rel_dev.iter().copied().fold(0.0, f64::max);
    Ok(GaugeComparison {
        max_abs_deviation: abs_dev,
        max_rel_deviation: rel_dev,
        max_relative_deviation: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;

    fn initial(n: usize, amp: f64, p: u32, gauge: Gauge) -> WarpedGeometry {
        let g = Grid1D::circle(n).unwrap();
        WarpedGeometry::new(g, vec![1.0; n], g.sample(|x| amp * x.sin()), p, 0.0, gauge).unwrap()
    }

    #[test]
    fn constant_u_is_stationary() {
        for gauge in [Gauge::Gauged, Gauge::Ungauged] {
            let mut g = initial(32, 0.0, 2, gauge);
            g.u = vec![0.4; 32];
            let next = step(&g, 0.01, Scheme::ExplicitRk4, 1e-6).unwrap();
            assert_eq!(next.phi, g.phi);
            assert_eq!(next.u, g.u);
        }
    }

    #[test]
    fn gauged_velocity_single_euler_step() {
        let eps = 0.01;
        let g = initial(256, eps, 1, Gauge::Gauged);
        let (phi_t, u_t) = velocity(&g);
        for i in 0..256 {
            let x = g.grid.x(i);
            assert!((u_t[i] + eps * x.sin()).abs() < 1e-4 * eps);
            assert!((phi_t[i] - eps * eps * x.cos().powi(2)).abs() < 1e-3 * eps * eps);
        }
    }

    #[test]
    fn ungauged_velocity_single_euler_step() {
        let eps = 0.01;
        let gr = Grid1D::circle(256).unwrap();
        let u = gr.sample(|x| (1.0 + eps * x.sin()).ln());
        let g = WarpedGeometry::new(gr, vec![1.0; 256], u, 1, 0.0, Gauge::Ungauged).unwrap();
        let (phi_t, _) = velocity(&g);
        for i in 0..256 {
            let x = g.grid.x(i);
            // ∂t φ² = 2φ ∂t φ = −2ε sin x / (1 + ε sin x)
            let exact = -eps * x.sin() / (1.0 + eps * x.sin());
            assert!((phi_t[i] - exact).abs() < 1e-4 * eps);
        }
    }

    #[test]
    fn linearized_heat_decay() {
        let a = 1e-3;
        let k = 2.0;
        let gr = Grid1D::circle(128).unwrap();
        let g = WarpedGeometry::new(
            gr,
            vec![1.0; 128],
            gr.sample(|x| a * (k * x).sin()),
            1,
            0.0,
            Gauge::Gauged,
        )
        .unwrap();
        let traj = run_flow(&g, &IntegratorConfig::with_t_end(0.2), Gauge::Gauged).unwrap();
        let last = traj.last();
        let decay = (-k * k * last.time).exp();
        for i in 0..128 {
            let exact = a * decay * (k * gr.x(i)).sin();
            assert!((last.u[i] - exact).abs() < 1e-3 * a, "i={i}");
        }
    }

    #[test]
    fn monitors_hold_on_coupled_run() {
        for system in [Gauge::Gauged, Gauge::Ungauged] {
            let traj = run_flow(
                &initial(64, 0.3, 2, Gauge::Ungauged),
                &IntegratorConfig::with_t_end(0.3),
                system,
            )
            .unwrap();
            let rep = monitor_report(&traj);
            assert!(rep.pass, "{system:?} {rep:?}");
            assert!(shi_diagnostic(&traj).pass);
            let t = traj.times();
            assert!(t.windows(2).all(|w| w[1] > w[0]));
            assert!((t[t.len() - 1] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn ungauged_max_u_nonincreasing() {
        let traj = run_flow(
            &initial(64, 0.5, 1, Gauge::Ungauged),
            &IntegratorConfig::with_t_end(0.2),
            Gauge::Ungauged,
        )
        .unwrap();
        let maxu: Vec<f64> = traj
            .snapshots
            .iter()
            .map(|s| s.u.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        assert!(monotonicity_defect(&maxu, false) < 1e-12);
    }

    #[test]
    fn measure_evolution_matches_integral_of_s() {
        let traj = run_flow(
            &initial(128, 0.3, 2, Gauge::Ungauged),
            &IntegratorConfig::with_t_end(0.1),
            Gauge::Gauged,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for k in 1..traj.len() - 1 {
            let dt = traj.snapshots[k + 1].time - traj.snapshots[k - 1].time;
            let dl =
                (traj.snapshots[k + 1].total_length() - traj.snapshots[k - 1].total_length()) / dt;
            let g = &traj.snapshots[k];
            worst = worst.max((dl + g.integral(&g.adapted_scalar())).abs());
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn explicit_and_implicit_agree() {
        let g = initial(64, 0.3, 1, Gauge::Gauged);
        let dt = 1e-3;
        let cfg = |scheme| IntegratorConfig {
            scheme,
            dt_policy: DtPolicy::Fixed(dt),
            t_end: 0.1,
            cfl_safety: 0.2,
            ..IntegratorConfig::default()
        };
        let a = run_flow(&g, &cfg(Scheme::ExplicitRk4), Gauge::Gauged).unwrap();
        let b = run_flow(&g, &cfg(Scheme::ImplicitTrapezoidal), Gauge::Gauged).unwrap();
        let err = a
            .last()
            .u
            .iter()
            .zip(&b.last().u)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gauge_comparison_rejects_mismatched_grids() {
        let g = initial(32, 0.3, 1, Gauge::Ungauged);
        let a = run_flow(&g, &IntegratorConfig::with_t_end(0.01), Gauge::Gauged).unwrap();
        let b = FlowTrajectory::stationary(g, 1e-3, 3);
        assert!(gauge_invariants_compare(&a, &b).is_err());
    }

    #[test]
    fn constant_u_gauge_series_identical() {
        let mut g = initial(32, 0.0, 2, Gauge::Ungauged);
        g.u = vec![0.2; 32];
        let cfg = IntegratorConfig {
            dt_policy: DtPolicy::Fixed(1e-3),
            t_end: 0.01,
            ..IntegratorConfig::default()
        };
        let a = run_flow(&g, &cfg, Gauge::Gauged).unwrap();
        let b = run_flow(&g, &cfg, Gauge::Ungauged).unwrap();
        let rep = gauge_invariants_compare(&a, &b).unwrap();
        assert_eq!(rep.max_relative_deviation, 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let g = initial(32, 0.3, 1, Gauge::Gauged);
        let mut cfg = IntegratorConfig::default();
        cfg.cfl_safety = 0.8;
        assert!(run_flow(&g, &cfg, Gauge::Gauged).is_err());
        cfg.cfl_safety = 0.2;
        cfg.max_steps = 3;
        assert!(matches!(
            run_flow(&g, &cfg, Gauge::Gauged),
            Err(Error::StepBudget { .. })
        ));
    }
}
