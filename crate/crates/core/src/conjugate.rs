//! Backward conjugate heat kernel and forward heat solutions on a stored
//! trajectory.
//!
//! Both solvers are lumped-mass Crank–Nicolson schemes on the trajectory's own
//! time grid. The backward scheme evolves the density `H dμ` in conservative
//! form, so its total mass is constant to round-off.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowTrajectory;
use crate::geometry::{Gauge, WarpedGeometry};
use crate::tridiag::CyclicTridiag;

/// Fundamental solution `H(·, t; y, T)` stored at trajectory indices `0..=bootstrap_index`.
#[derive(Debug, Clone)]
pub struct ConjugateHeatSolution {
    pub trajectory: Arc<FlowTrajectory>,
    pub y_index: usize,
    pub t_final: f64,
    pub final_index: usize,
    pub tau0: f64,
    pub bootstrap_index: usize,
    /// `H` per trajectory index.
    pub kernel: Vec<Vec<f64>>,
    /// `h = −ln((4πτ)^{1/2} H)` per trajectory index.
    pub log_density: Vec<Vec<f64>>,
    pub mass_series: Vec<f64>,
}

impl ConjugateHeatSolution {
    pub fn tau(&self, k: usize) -> f64 {
        self.t_final - self.trajectory.snapshots[k].time
    }

    pub fn geometry(&self, k: usize) -> &WarpedGeometry {
        &self.trajectory.snapshots[k]
    }

    /// Number of stored levels (`bootstrap_index + 1`).
    pub fn levels(&self) -> usize {
        self.bootstrap_index + 1
    }

    /// Largest stored index `k` with `τ_k ≥ tau_min`, if any.
    pub fn last_index_with_tau_at_least(&self, tau_min: f64) -> Option<usize> {
        (0..self.levels())
            .rev()
            .find(|&k| self.tau(k) >= tau_min - 1e-12)
    }

    /// Largest relative drift of `∫H dμ`.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.mass_series[self.bootstrap_index];
        self.mass_series
            .iter()
            .map(|m| ((m - m0) / m0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct HeatSolution {
    pub trajectory: Arc<FlowTrajectory>,
    pub start_index: usize,
    /// `Φ` per trajectory index `start_index..`; `fields[k - start_index]`.
    pub fields: Vec<Vec<f64>>,
}

impl HeatSolution {
    pub fn at(&self, k: usize) -> Option<&[f64]> {
        k.checked_sub(self.start_index)
            .and_then(|j| self.fields.get(j))
            .map(|v| v.as_slice())
    }

    pub fn end_index(&self) -> usize {
        self.start_index + self.fields.len() - 1
    }
}

/// Generator `L` of the density equation `∂τ(M H) = L H`.
///
/// `L = K` (flux-form stiffness) for the gauged system. The ungauged system
/// adds the conservative drift `−p ∂x(H ∂x u / φ)`.
pub fn density_generator(geom: &WarpedGeometry) -> CyclicTridiag {
    let n = geom.n();
    let h = geom.grid.spacing();
    let mut a = CyclicTridiag::zeros(n);
    for i in 0..n {
        let im = geom.grid.prev(i);
        a.lower[i] = 1.0 / (h * geom.phi_half(im));
        a.upper[i] = 1.0 / (h * geom.phi_half(i));
        a.diag[i] = -(a.lower[i] + a.upper[i]);
    }
    if geom.gauge == Gauge::Ungauged {
        let p = geom.p as f64;
        // a_{i+1/2} = (u_{i+1} − u_i) / (h φ_{i+1/2})
        let slope: Vec<f64> = (0..n)
            .map(|i| (geom.u[geom.grid.next(i)] - geom.u[i]) / (h * geom.phi_half(i)))
            .collect();
        for i in 0..n {
            let ap = slope[i];
            let am = slope[geom.grid.prev(i)];
            a.diag[i] -= 0.5 * p * (ap - am);
            a.upper[i] -= 0.5 * p * ap;
            a.lower[i] += 0.5 * p * am;
        }
    }
    a
}

fn check_positive(field: &[f64], time: f64) -> Result<()> {
    for (index, &value) in field.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::PositivityViolation { time, index, value });
        }
    }
    Ok(())
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Default bootstrap time: four metric cells at time `T`.
pub fn default_tau0(geom_t: &WarpedGeometry) -> f64 {
    let max_phi = geom_t.phi.iter().copied().fold(0.0, f64::max);
    let hm = max_phi * geom_t.grid.spacing();
    4.0 * hm * hm
}

/// Solve the conjugate heat equation backward from a Gaussian bootstrap at
/// `τ₀ = 4(max φ(T) · spacing)²` centered at `y_index`.
pub fn solve_conjugate_fundamental(
    traj: Arc<FlowTrajectory>,
    y_index: usize,
    t_final: f64,
) -> Result<ConjugateHeatSolution> {
    let kt = traj.index_of_time(t_final)?;
    let tau0 = default_tau0(&traj.snapshots[kt]);
    solve_conjugate_with_tau0(traj, y_index, t_final, tau0)
}

/// As [`solve_conjugate_fundamental`] with an explicit bootstrap target. The
/// realized `τ₀` is snapped to the largest stored `T − t_k` not below it.
pub fn solve_conjugate_with_tau0(
    traj: Arc<FlowTrajectory>,
    y_index: usize,
    t_final: f64,
    tau0_target: f64,
) -> Result<ConjugateHeatSolution> {
    let kt = traj.index_of_time(t_final)?;
    let n = traj.first().n();
    if y_index >= n {
        return Err(Error::config(format!(
            "center index {y_index} outside grid of {n}"
        )));
    }
    let t_final = traj.snapshots[kt].time;
    let available = t_final - traj.first().time;
    let k0 = (0..=kt)
        .rev()
        .find(|&k| t_final - traj.snapshots[k].time >= tau0_target * (1.0 - 1e-12))
        .ok_or(Error::WindowTooShort {
            tau0: tau0_target,
            available,
        })?;
    if k0 == 0 {
        return Err(Error::WindowTooShort {
            tau0: tau0_target,
            available,
        });
    }
    let tau0 = t_final - traj.snapshots[k0].time;

    let geom_t = &traj.snapshots[kt];
    let d = geom_t.distances_from(y_index);
    let g0 = &traj.snapshots[k0];
    let mass = g0.cell_measure();
    let norm = (4.0 * PI * tau0).sqrt();
    let raw: Vec<f64> = d.iter().map(|d| d * d / (4.0 * tau0)).collect();
    // unit mass: Σ M_i e^{−h_i} / norm = 1
    let c = log_sum_exp(raw.iter().zip(&mass).map(|(r, m)| m.ln() - r)) - norm.ln();
    let h0: Vec<f64> = raw.iter().map(|r| r + c).collect();
    let big_h0: Vec<f64> = h0.iter().map(|h| (-h).exp() / norm).collect();

    let mut kernel = vec![Vec::new(); k0 + 1];
    let mut logs = vec![Vec::new(); k0 + 1];
    let mut masses = vec![0.0; k0 + 1];
    masses[k0] = big_h0.iter().zip(&mass).map(|(a, b)| a * b).sum();
    kernel[k0] = big_h0;
    logs[k0] = h0;

    let mut gen_next = density_generator(&traj.snapshots[k0]);
    let mut mass_next = mass;
    for k in (0..k0).rev() {
        let gk = &traj.snapshots[k];
        let dt = traj.snapshots[k + 1].time - gk.time;
        let gen_k = density_generator(gk);
        let mass_k = gk.cell_measure();
        let hn = &kernel[k + 1];
        let lh = gen_next.apply(hn);
        let rhs: Vec<f64> = (0..n)
            .map(|i| mass_next[i] * hn[i] + 0.5 * dt * lh[i])
            .collect();
        let mut a = gen_k.clone();
        for i in 0..n {
            a.lower[i] *= -0.5 * dt;
            a.upper[i] *= -0.5 * dt;
            a.diag[i] = mass_k[i] - 0.5 * dt * a.diag[i];
        }
        let hk = a.solve(&rhs)?;
        check_positive(&hk, gk.time)?;
        let tau = t_final - gk.time;
        let ln_norm = 0.5 * (4.0 * PI * tau).ln();
        logs[k] = hk.iter().map(|v| -(v.ln() + ln_norm)).collect();
        masses[k] = hk.iter().zip(&mass_k).map(|(a, b)| a * b).sum();
        kernel[k] = hk;
        gen_next = gen_k;
        mass_next = mass_k;
    }

    Ok(ConjugateHeatSolution {
        trajectory: traj,
        y_index,
        t_final,
        final_index: kt,
        tau0,
        bootstrap_index: k0,
        kernel,
        log_density: logs,
        mass_series: masses,
    })
}

/// Forward heat flow `∂t Φ = Δ Φ` (gauged) or `∂t Φ = Δ Φ + p⟨∇u, ∇Φ⟩`
/// (ungauged), discretized as the adjoint of the backward scheme.
pub fn solve_forward_heat(
    traj: Arc<FlowTrajectory>,
    phi0: &[f64],
    t0: f64,
) -> Result<HeatSolution> {
    let k_start = traj.index_of_time(t0)?;
    traj.first().grid.check_field(phi0)?;
    check_positive(phi0, t0)?;
    let n = phi0.len();
    let mut fields = vec![phi0.to_vec()];
    let mut gen_t = density_generator(&traj.snapshots[k_start]).transpose();
    let mut mass_k = traj.snapshots[k_start].cell_measure();
    for k in k_start..traj.len() - 1 {
        let g1 = &traj.snapshots[k + 1];
        let dt = g1.time - traj.snapshots[k].time;
        let gen1_t = density_generator(g1).transpose();
        let mass1 = g1.cell_measure();
        let prev = &fields[fields.len() - 1];
        let lp = gen_t.apply(prev);
        let rhs: Vec<f64> = (0..n)
            .map(|i| mass1[i] * prev[i] + 0.5 * dt * mass1[i] / mass_k[i] * lp[i])
            .collect();
        let mut a = gen1_t.clone();
        for i in 0..n {
            a.lower[i] *= -0.5 * dt;
            a.upper[i] *= -0.5 * dt;
            a.diag[i] = mass1[i] - 0.5 * dt * a.diag[i];
        }
        let next = a.solve(&rhs)?;
        check_positive(&next, g1.time)?;
        fields.push(next);
        gen_t = gen1_t;
        mass_k = mass1;
    }
    Ok(HeatSolution {
        trajectory: traj,
        start_index: k_start,
        fields,
    })
}

/// `∫ H Φ dμ` at trajectory index `k`.
pub fn pairing(h_sol: &ConjugateHeatSolution, phi: &[f64], k: usize) -> f64 {
    let g = h_sol.geometry(k);
    let hk = &h_sol.kernel[k];
    g.integral(&hk.iter().zip(phi).map(|(a, b)| a * b).collect::<Vec<_>>())
}

/// Largest relative change of `∫HΦ dμ` over the common window, measured
/// against its value at the earliest common index.
pub fn duality_defect(h_sol: &ConjugateHeatSolution, phi_sol: &HeatSolution) -> Result<f64> {
    if !Arc::ptr_eq(&h_sol.trajectory, &phi_sol.trajectory) {
        return Err(Error::config(
            "duality needs both solutions on the same trajectory",
        ));
    }
    let lo = phi_sol.start_index;
    let hi = h_sol.bootstrap_index.min(phi_sol.end_index());
    if lo > hi {
        return Err(Error::config(
            "conjugate and forward solutions have disjoint windows",
        ));
    }
    let reference = pairing(h_sol, phi_sol.at(lo).unwrap(), lo);
    let mut worst: f64 = 0.0;
    for k in lo..=hi {
        let v = pairing(h_sol, phi_sol.at(k).unwrap(), k);
        worst = worst.max(((v - reference) / reference).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelBoundReport {
    /// Smallest value of `e^{B − τD/3} − H·(4πτ)^{1/2}` over all nodes.
    pub worst_margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check `H ≤ e^{B − τD/3}(4πτ)^{−1/2}` at every node and stored time.
pub fn kernel_upper_bound_check(
    h_sol: &ConjugateHeatSolution,
    b: f64,
    d: f64,
) -> KernelBoundReport {
    let hsp = h_sol.geometry(0).grid.spacing();
    let tol = 10.0 * hsp * hsp;
    let mut worst = f64::INFINITY;
    for k in 0..h_sol.levels() {
        let tau = h_sol.tau(k);
        let bound = (b - tau * d / 3.0).exp();
        let scale = (4.0 * PI * tau).sqrt();
        for &v in &h_sol.kernel[k] {
            worst = worst.min(bound - v * scale);
        }
    }
    KernelBoundReport {
        worst_margin: worst,
        tolerance: tol,
        pass: worst >= -tol,
    }
}
