//! Harnack quantity `v = (τ(2Δh − |∇h|² + S) + h − n)H` of a conjugate heat
//! kernel and the checks built on it.

use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;

use crate::conjugate::{ConjugateHeatSolution, HeatSolution};
use crate::error::{Error, Result};
use crate::flow::{monotonicity_defect, FlowTrajectory};
use crate::geometry::{interp_periodic, Gauge, WarpedGeometry};
use crate::grid::{observed_order, polyfit_eval};

/// Base dimension.
const N_BASE: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct HarnackReport {
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub max_v_series: Vec<f64>,
}

impl HarnackReport {
    /// `max_t max_x v` over stored levels with `τ ≥ tau_min`.
    pub fn max_v_in_window(&self, tau_min: f64) -> f64 {
        self.taus
            .iter()
            .zip(&self.max_v_series)
            .filter(|(t, _)| **t >= tau_min - 1e-12)
            .map(|(_, m)| *m)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn harnack_fields(
    geom: &WarpedGeometry,
    h: &[f64],
    big_h: &[f64],
    tau: f64,
) -> (Vec<f64>, Vec<f64>) {
    let lap = geom.laplacian(h);
    let grad = geom.gradient_norm_sq(h);
    let s = geom.adapted_scalar();
    let q: Vec<f64> = (0..geom.n())
        .map(|i| 2.0 * lap[i] - grad[i] + s[i])
        .collect();
    let v = (0..geom.n())
        .map(|i| (tau * q[i] + h[i] - N_BASE) * big_h[i])
        .collect();
    (v, q)
}

pub fn compute_v(sol: &ConjugateHeatSolution) -> HarnackReport {
    let levels = sol.levels();
    let mut report = HarnackReport {
        times: Vec::with_capacity(levels),
        taus: Vec::with_capacity(levels),
        v: Vec::with_capacity(levels),
        q: Vec::with_capacity(levels),
        max_v_series: Vec::with_capacity(levels),
    };
    for k in 0..levels {
        let tau = sol.tau(k);
        let (v, q) = harnack_fields(sol.geometry(k), &sol.log_density[k], &sol.kernel[k], tau);
        report.times.push(sol.geometry(k).time);
        report.taus.push(tau);
        report
            .max_v_series
            .push(v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        report.v.push(v);
        report.q.push(q);
    }
    report
}

/// Copy of `sol` with `h` raised by `delta` (so `H` is scaled by `e^{−delta}`).
pub fn shift_log_density(sol: &ConjugateHeatSolution, delta: f64) -> ConjugateHeatSolution {
    let mut out = sol.clone();
    let scale = (-delta).exp();
    for k in 0..out.levels() {
        out.log_density[k].iter_mut().for_each(|h| *h += delta);
        out.kernel[k].iter_mut().for_each(|v| *v *= scale);
        out.mass_series[k] *= scale;
    }
    out
}

/// Non-uniform three-point derivative at the middle node.
fn central_derivative(t: [f64; 3], y: [f64; 3]) -> f64 {
    let h1 = t[1] - t[0];
    let h2 = t[2] - t[1];
    -h2 / (h1 * (h1 + h2)) * y[0] + (h2 - h1) / (h1 * h2) * y[1] + h1 / (h2 * (h1 + h2)) * y[2]
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualPoint {
    pub index: usize,
    pub time: f64,
    pub tau: f64,
    pub residual: f64,
    /// `max |RHS|`, for scale.
    pub rhs_scale: f64,
}

/// Pointwise residual of `(−∂t − Δ + S)v = −2τ(|𝒮 + Hess h − g/2τ|² + |Δw − ⟨∇w, ∇h⟩|²)H`
/// (with the drift `+⟨∇w, ∇v⟩` for ungauged trajectories) at interior levels with `τ ≥ tau_min`.
pub fn conjugate_identity_residual(
    sol: &ConjugateHeatSolution,
    report: &HarnackReport,
    tau_min: f64,
) -> Result<Vec<ResidualPoint>> {
    let levels = sol.levels();
    if levels < 3 {
        return Err(Error::config(
            "identity residual needs at least three time levels",
        ));
    }
    let mut out = Vec::new();
    for k in 1..levels - 1 {
        let tau = sol.tau(k);
        if tau < tau_min - 1e-12 {
            continue;
        }
        let geom = sol.geometry(k);
        let n = geom.n();
        let t = [
            sol.geometry(k - 1).time,
            geom.time,
            sol.geometry(k + 1).time,
        ];
        let vk = &report.v[k];
        let lap_v = geom.laplacian(vk);
        let s = geom.adapted_scalar();
        let w = geom.adapted_potential();
        let drift = match geom.gauge {
            Gauge::Gauged => vec![0.0; n],
            Gauge::Ungauged => geom.gradient_dot(&w, vk),
        };
        let h = &sol.log_density[k];
        let lap_h = geom.laplacian(h);
        let lap_w = geom.laplacian(&w);
        let wh = geom.gradient_dot(&w, h);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            let dv = central_derivative(t, [report.v[k - 1][i], vk[i], report.v[k + 1][i]]);
            let lhs = -dv - lap_v[i] + s[i] * vk[i] + drift[i];
            let a = s[i] + lap_h[i] - 1.0 / (2.0 * tau);
            let b = lap_w[i] - wh[i];
            let rhs = -2.0 * tau * (a * a + b * b) * sol.kernel[k][i];
            worst = worst.max((lhs - rhs).abs());
            scale = scale.max(rhs.abs());
        }
        out.push(ResidualPoint {
            index: k,
            time: geom.time,
            tau,
            residual: worst,
            rhs_scale: scale,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementVerdict {
    pub spacings: Vec<f64>,
    pub values: Vec<f64>,
    pub order: Option<f64>,
    pub pass: bool,
}

/// Verdict for a quantity that must vanish at second order under refinement.
pub fn second_order_verdict(
    spacings: &[f64],
    values: &[f64],
    min_order: f64,
) -> Result<RefinementVerdict> {
    if spacings.len() < 2 || spacings.len() != values.len() {
        return Err(Error::config(
            "an order fit needs at least two refinement levels",
        ));
    }
    let order = if values.iter().all(|v| *v > 0.0) {
        Some(observed_order(spacings, values))
    } else {
        None
    };
    let pass = order.map_or(false, |o| o >= min_order);
    Ok(RefinementVerdict {
        spacings: spacings.to_vec(),
        values: values.to_vec(),
        order,
        pass,
    })
}

/// PASS iff `v ≤ 0` at every level, or its positive part decays at order ≥ 1.8.
pub fn check_nonpositivity(spacings: &[f64], max_v: &[f64]) -> Result<RefinementVerdict> {
    if spacings.len() < 2 || spacings.len() != max_v.len() {
        return Err(Error::config(
            "nonpositivity check needs at least two refinement levels",
        ));
    }
    if max_v.iter().all(|v| *v <= 0.0) {
        return Ok(RefinementVerdict {
            spacings: spacings.to_vec(),
            values: max_v.to_vec(),
            order: None,
            pass: true,
        });
    }
    let positive: Vec<f64> = max_v.iter().map(|v| v.max(0.0)).collect();
    if positive.iter().all(|v| *v > 0.0) {
        return second_order_verdict(spacings, &positive, 1.8);
    }
    // mixed: the positive part must vanish on every finer level once it does
    let first_zero = positive.iter().position(|v| *v == 0.0).unwrap();
    let pass = positive[first_zero..].iter().all(|v| *v == 0.0);
    Ok(RefinementVerdict {
        spacings: spacings.to_vec(),
        values: max_v.to_vec(),
        order: None,
        pass,
    })
}

/// Piecewise-linear path in (τ, fractional grid index).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    /// Knots `(τ, position)`, increasing in `τ`.
    pub knots: Vec<(f64, f64)>,
}

impl Curve {
    pub fn constant(position: f64, tau_lo: f64, tau_hi: f64) -> Self {
        Self {
            knots: vec![(tau_lo, position), (tau_hi, position)],
        }
    }

    /// Random path with `segments` linear pieces between `tau_lo` and `tau_hi`.
    pub fn random<R: Rng>(
        rng: &mut R,
        n_points: usize,
        tau_lo: f64,
        tau_hi: f64,
        segments: usize,
    ) -> Self {
        let knots = (0..=segments)
            .map(|j| {
                let tau = tau_lo + (tau_hi - tau_lo) * j as f64 / segments as f64;
                (tau, rng.gen_range(0.0..n_points as f64))
            })
            .collect();
        Self { knots }
    }

    pub fn tau_range(&self) -> (f64, f64) {
        (self.knots[0].0, self.knots[self.knots.len() - 1].0)
    }

    pub fn position(&self, tau: f64) -> f64 {
        let k = &self.knots;
        let j = k
            .windows(2)
            .position(|w| tau <= w[1].0)
            .unwrap_or(k.len() - 2);
        let (t0, x0) = k[j];
        let (t1, x1) = k[j + 1];
        let s = ((tau - t0) / (t1 - t0)).clamp(0.0, 1.0);
        x0 + s * (x1 - x0)
    }
}

/// Cubic Lagrange interpolation of a periodic field at fractional index `pos`.
pub fn interp_cubic(field: &[f64], pos: f64) -> f64 {
    let n = field.len() as isize;
    let base = pos.floor();
    let t = pos - base;
    let i = base as isize;
    let f = |o: isize| field[(i + o).rem_euclid(n) as usize];
    let (fm, f0, f1, f2) = (f(-1), f(0), f(1), f(2));
    -t * (t - 1.0) * (t - 2.0) / 6.0 * fm + (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0 * f0
        - (t + 1.0) * t * (t - 2.0) / 2.0 * f1
        + (t + 1.0) * t * (t - 1.0) / 6.0 * f2
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveReport {
    /// `(τ_start, τ_end, margin)` per stride, margin =
    /// `∫√τ(S + |γ̇|²)dτ − [2√τ h(γ(τ), τ)]`.
    pub margins: Vec<(f64, f64, f64)>,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Integrated curve Harnack inequality over strides of about `stride` in `τ`.
pub fn curve_harnack_check(
    sol: &ConjugateHeatSolution,
    curve: &Curve,
    stride: f64,
) -> Result<CurveReport> {
    let (lo, hi) = curve.tau_range();
    let tau_small = sol.tau(sol.bootstrap_index);
    let tau_big = sol.tau(0);
    if lo < tau_small - 1e-12 || hi > tau_big + 1e-12 {
        return Err(Error::config(format!(
            "curve spans tau in [{lo}, {hi}] but the solution covers [{tau_small}, {tau_big}]"
        )));
    }
    // levels inside the curve's range, ordered by increasing tau
    let ks: Vec<usize> = (0..sol.levels())
        .rev()
        .filter(|&k| sol.tau(k) >= lo - 1e-12 && sol.tau(k) <= hi + 1e-12)
        .collect();
    if ks.len() < 2 {
        return Err(Error::config(
            "curve window contains fewer than two stored times",
        ));
    }
    let spacing = sol.geometry(0).grid.spacing();
    let weighted_h = |k: usize| {
        let tau = sol.tau(k);
        2.0 * tau.sqrt() * interp_cubic(&sol.log_density[k], curve.position(tau))
    };
    let mut margins = Vec::new();
    let mut start = 0;
    let mut action = 0.0;
    for j in 1..ks.len() {
        let (ka, kb) = (ks[j - 1], ks[j]);
        let (ta, tb) = (sol.tau(ka), sol.tau(kb));
        let (xa, xb) = (curve.position(ta), curve.position(tb));
        let ga = sol.geometry(ka);
        let gb = sol.geometry(kb);
        let sa = interp_periodic(&ga.adapted_scalar(), xa);
        let sb = interp_periodic(&gb.adapted_scalar(), xb);
        let dtau = tb - ta;
        let tm = 0.5 * (ta + tb);
        let phi_m = interp_periodic(&ga.phi, 0.5 * (xa + xb));
        let speed = phi_m * (xb - xa) * spacing / dtau;
        action += 0.5 * (ta.sqrt() * sa + tb.sqrt() * sb) * dtau + tm.sqrt() * speed * speed * dtau;
        let t_start = sol.tau(ks[start]);
        if tb - t_start >= stride * (1.0 - 1e-9) || j == ks.len() - 1 {
            let lhs = weighted_h(kb) - weighted_h(ks[start]);
            margins.push((t_start, tb, action - lhs));
            start = j;
            action = 0.0;
        }
    }
    let worst = margins.iter().map(|m| m.2).fold(f64::INFINITY, f64::min);
    let tol = 10.0 * spacing * spacing;
    Ok(CurveReport {
        margins,
        worst_margin: worst,
        tolerance: tol,
        pass: worst >= -tol,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EstimateConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl EstimateConstants {
    /// Bounds measured over every stored snapshot; `b` comes from the
    /// entropy sweep and `a` is filled in per check.
    pub fn measure(traj: &FlowTrajectory, b: f64) -> Self {
        let mut k2 = f64::NEG_INFINITY;
        let mut k3: f64 = 0.0;
        for g in &traj.snapshots {
            let s = g.adapted_scalar();
            let grad_s = g.gradient_norm_sq(&s);
            let smax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let gmax = grad_s.iter().copied().fold(0.0, f64::max);
            k2 = k2.max(smax.max(gmax));
            k3 = k3.max(-s.iter().copied().fold(f64::INFINITY, f64::min));
        }
        let k2 = k2.max(0.0);
        let k1 = 0.0;
        let s0 = traj.first().adapted_scalar();
        let d = s0.iter().copied().fold(0.0, f64::min);
        Self {
            k1,
            k2,
            k3,
            a: 0.0,
            b,
            d,
            c1: (4.0 + N_BASE) * k1 + 3.0 * k3 + 1.0,
            c2: 0.0,
            c3: b.exp() / 2f64.powf(N_BASE / 2.0),
        }
    }

    /// `C₂ = e^{k₂τ}(n k₁ + k₃) + k₂`.
    pub fn c2_at(&self, tau: f64) -> f64 {
        (self.k2 * tau).exp() * (N_BASE * self.k1 + self.k3) + self.k2
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientEstimateReport {
    pub constants: EstimateConstants,
    pub window_final_time: f64,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub checked_levels: usize,
    pub pass: bool,
}

/// Check `τ'|∇q|²/q² ≤ (1 + C₁τ')(ln(A/q) + C₂τ')` for `q = H` restricted to
/// `t ≤ T'`, with `T'` the stored time nearest `window_final_time`,
/// `τ' = T' − t` and `A = sup q` there.
pub fn gradient_estimate_check(
    sol: &ConjugateHeatSolution,
    consts: &EstimateConstants,
    window_final_time: f64,
) -> Result<GradientEstimateReport> {
    let kf = sol.trajectory.nearest_index(window_final_time);
    if kf == 0 || kf > sol.bootstrap_index {
        return Err(Error::config("gradient estimate window is empty"));
    }
    let t_prime = sol.geometry(kf).time;
    let span = t_prime - sol.geometry(0).time;
    let limit = if consts.k2 > 0.0 {
        1.0f64.min(span).min(0.5 / consts.k2)
    } else {
        1.0f64.min(span)
    };
    let a_sup = (0..=kf)
        .flat_map(|k| sol.kernel[k].iter().copied())
        .fold(0.0, f64::max);
    let mut consts = *consts;
    consts.a = a_sup;
    let ln_a = a_sup.ln();
    let spacing = sol.geometry(0).grid.spacing();
    let mut worst = f64::INFINITY;
    let mut checked = 0;
    for k in 0..kf {
        let tp = t_prime - sol.geometry(k).time;
        if tp > limit + 1e-12 {
            continue;
        }
        checked += 1;
        let g = sol.geometry(k);
        let h = &sol.log_density[k];
        let grad = g.gradient_norm_sq(h);
        let ln_norm = 0.5 * (4.0 * PI * sol.tau(k)).ln();
        let c2 = consts.c2_at(tp);
        for i in 0..g.n() {
            let ln_ratio = ln_a + h[i] + ln_norm;
            let rhs = (1.0 + consts.c1 * tp) * (ln_ratio + c2 * tp);
            worst = worst.min(rhs - tp * grad[i]);
        }
    }
    if checked == 0 {
        return Err(Error::config("gradient estimate window is empty"));
    }
    consts.c2 = consts.c2_at(limit);
    let tol = 10.0 * spacing * spacing;
    Ok(GradientEstimateReport {
        constants: consts,
        window_final_time: t_prime,
        worst_margin: worst,
        tolerance: tol,
        checked_levels: checked,
        pass: worst >= -tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RhoReport {
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    pub rho: Vec<f64>,
    pub monotone_drop: f64,
    pub drop_tolerance: f64,
    pub limit_estimate: f64,
    pub limit_tolerance: f64,
    pub pass: bool,
}

/// `ρ_Φ(t) = ∫ v Φ dμ` at trajectory index `k`.
pub fn rho_at(sol: &ConjugateHeatSolution, report: &HarnackReport, phi: &[f64], k: usize) -> f64 {
    let g = sol.geometry(k);
    let vp: Vec<f64> = report.v[k].iter().zip(phi).map(|(a, b)| a * b).collect();
    g.integral(&vp)
}

/// `ρ_Φ` series, its monotonicity on `τ ≥ tau_min` and its extrapolated limit
/// at `τ = 0` (quadratic fit over `τ ∈ [0.02, 0.2]`).
pub fn rho_monotone_limit(
    sol: &ConjugateHeatSolution,
    report: &HarnackReport,
    phi_sol: &HeatSolution,
    tau_min: f64,
) -> Result<RhoReport> {
    if phi_sol.start_index != 0 || phi_sol.end_index() < sol.bootstrap_index {
        return Err(Error::config(
            "forward solution must cover the conjugate window",
        ));
    }
    let mut out = RhoReport {
        times: Vec::new(),
        taus: Vec::new(),
        rho: Vec::new(),
        monotone_drop: 0.0,
        drop_tolerance: 0.0,
        limit_estimate: f64::NAN,
        limit_tolerance: 0.0,
        pass: false,
    };
    for k in 0..sol.levels() {
        out.times.push(sol.geometry(k).time);
        out.taus.push(sol.tau(k));
        out.rho.push(rho_at(sol, report, phi_sol.at(k).unwrap(), k));
    }
    let window: Vec<f64> = out
        .taus
        .iter()
        .zip(&out.rho)
        .filter(|(t, _)| **t >= tau_min - 1e-12)
        .map(|(_, r)| *r)
        .collect();
    out.monotone_drop = monotonicity_defect(&window, true);
    let (xs, ys): (Vec<f64>, Vec<f64>) = out
        .taus
        .iter()
        .zip(&out.rho)
        .filter(|(t, _)| **t >= 0.02 && **t <= 0.2)
        .map(|(t, r)| (*t, *r))
        .unzip();
    if xs.len() < 4 {
        return Err(Error::config(
            "too few levels in tau in [0.02, 0.2] to extrapolate",
        ));
    }
    out.limit_estimate = polyfit_eval(&xs, &ys, 2, 0.0);
    let h = sol.geometry(0).grid.spacing();
    out.drop_tolerance = 10.0 * h * h;
    out.limit_tolerance = 10.0 * h;
    out.pass =
        out.monotone_drop <= out.drop_tolerance && out.limit_estimate.abs() <= out.limit_tolerance;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::{solve_conjugate_fundamental, solve_forward_heat};
    use crate::fixtures::{euclidean_gaussian, flat_static_trajectory, theta_solution};
    use crate::flow::{run_flow, IntegratorConfig};
    use crate::grid::Grid1D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn flat_solution(n: usize) -> ConjugateHeatSolution {
        let traj = Arc::new(flat_static_trajectory(n, 1, 0.5));
        solve_conjugate_fundamental(traj, 0, 0.5).unwrap()
    }

    #[test]
    fn euclidean_gaussian_is_sharp() {
        let sol = euclidean_gaussian(400, 0.1, 0.01, 30).unwrap();
        let rep = compute_v(&sol);
        let sup = sol.kernel.iter().flatten().copied().fold(0.0, f64::max);
        let vmax = rep.v.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(vmax < 1e-12 * sup, "{vmax}");
        let res = conjugate_identity_residual(&sol, &rep, 0.0).unwrap();
        assert!(res.iter().all(|r| r.residual < 1e-10), "{res:?}");
        let c = Curve::constant(sol.y_index as f64, 0.1, 0.4);
        let cr = curve_harnack_check(&sol, &c, 0.01).unwrap();
        assert!(cr.margins.iter().all(|m| m.2.abs() < 1e-12));
    }

    #[test]
    fn flat_circle_v_is_negative_on_the_exact_kernel() {
        let traj = Arc::new(flat_static_trajectory(256, 1, 0.5));
        let sol = theta_solution(traj, 0, 0.5).unwrap();
        let rep = compute_v(&sol);
        assert!((rep.taus[0] - 0.5).abs() < 1e-12);
        assert!(rep.max_v_series[0] < 0.0, "{}", rep.max_v_series[0]);
    }

    #[test]
    fn solver_v_positive_part_is_second_order() {
        let spacings: Vec<f64> = [64, 128].iter().map(|&n| 2.0 * PI / n as f64).collect();
        let vals: Vec<f64> = [64, 128]
            .iter()
            .map(|&n| compute_v(&flat_solution(n)).max_v_in_window(0.25))
            .collect();
        assert!(
            check_nonpositivity(&spacings, &vals).unwrap().pass,
            "{vals:?}"
        );
    }

    #[test]
    fn negative_control_fails() {
        let spacings: Vec<f64> = [64, 128].iter().map(|&n| 2.0 * PI / n as f64).collect();
        let vals: Vec<f64> = [64, 128]
            .iter()
            .map(|&n| compute_v(&shift_log_density(&flat_solution(n), 0.1)).max_v_in_window(0.25))
            .collect();
        assert!(!check_nonpositivity(&spacings, &vals).unwrap().pass);
    }

    #[test]
    fn verdict_needs_two_levels() {
        assert!(check_nonpositivity(&[0.1], &[-1.0]).is_err());
        assert!(
            check_nonpositivity(&[0.1, 0.05], &[-1.0, -2.0])
                .unwrap()
                .pass
        );
        assert!(
            check_nonpositivity(&[0.1, 0.05], &[4e-3, 1e-3])
                .unwrap()
                .pass
        );
        assert!(
            !check_nonpositivity(&[0.1, 0.05], &[4e-3, 3e-3])
                .unwrap()
                .pass
        );
    }

    #[test]
    fn flat_curves_have_nonnegative_margin() {
        let sol = flat_solution(128);
        let c = Curve::constant(20.0, 0.25, 0.5);
        assert!(curve_harnack_check(&sol, &c, 0.01).unwrap().pass);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Curve::random(&mut rng, 128, 0.25, 0.5, 3);
        assert!(curve_harnack_check(&sol, &c, 0.01).unwrap().pass);
        assert!(curve_harnack_check(&sol, &Curve::constant(3.0, 0.25, 0.9), 0.01).is_err());
    }

    #[test]
    fn cubic_interpolation_is_exact_for_cubics() {
        let f: Vec<f64> = (0..16)
            .map(|i| (i as f64).powi(3) - 2.0 * i as f64)
            .collect();
        let x: f64 = 5.3;
        assert!((interp_cubic(&f, x) - (x.powi(3) - 2.0 * x)).abs() < 1e-10);
    }

    #[test]
    fn flat_gradient_estimate_and_rho() {
        let sol = flat_solution(128);
        let consts = EstimateConstants::measure(&sol.trajectory, 0.0);
        assert_eq!(consts.k3, 0.0);
        let rep = gradient_estimate_check(&sol, &consts, 0.25).unwrap();
        assert!(rep.pass, "{rep:?}");
        let hv = compute_v(&sol);
        let ones = solve_forward_heat(sol.trajectory.clone(), &[1.0; 128], 0.0).unwrap();
        let rho = rho_monotone_limit(&sol, &hv, &ones, 0.25).unwrap();
        assert!(rho.pass, "{} {}", rho.monotone_drop, rho.limit_estimate);
    }

    #[test]
    fn coupled_identity_residual_is_small() {
        let g = Grid1D::circle(128).unwrap();
        let init = WarpedGeometry::new(
            g,
            vec![1.0; 128],
            g.sample(|x| 0.3 * x.sin()),
            1,
            0.0,
            Gauge::Ungauged,
        )
        .unwrap();
        for system in [Gauge::Gauged, Gauge::Ungauged] {
            let traj =
                Arc::new(run_flow(&init, &IntegratorConfig::with_t_end(0.5), system).unwrap());
            let sol = solve_conjugate_fundamental(traj, 0, 0.5).unwrap();
            let rep = compute_v(&sol);
            let res = conjugate_identity_residual(&sol, &rep, 0.25).unwrap();
            let worst = res.iter().map(|r| r.residual).fold(0.0, f64::max);
            assert!(worst < 1e-2, "{system:?} {worst}");
        }
    }
}
