//! Analytic fixtures: the flat-circle image-sum kernel, static flat
//! trajectories and an exact Euclidean Gaussian on a long flat segment.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::conjugate::{solve_conjugate_fundamental, ConjugateHeatSolution};
use crate::error::Result;
use crate::flow::{run_flow, FlowTrajectory, IntegratorConfig};
use crate::geometry::{Gauge, WarpedGeometry};
use crate::grid::Grid1D;

/// Heat kernel of the flat circle `[0, L)` with unit metric, summed over images.
pub fn theta_kernel(grid: &Grid1D, y_index: usize, tau: f64) -> Vec<f64> {
    let l = grid.coordinate_length();
    let y = grid.x(y_index);
    let norm = (4.0 * PI * tau).sqrt();
    let images = (l.recip() * (40.0 * tau).sqrt()).ceil() as i64 + 2;
    grid.sample(|x| {
        (-images..=images)
            .map(|k| {
                let d = x - y + k as f64 * l;
                (-d * d / (4.0 * tau)).exp()
            })
            .sum::<f64>()
            / norm
    })
}

/// Flat unit circle with constant exponent, integrated as a gauged flow (which
/// leaves it fixed) so the time grid is the production CFL grid.
pub fn flat_static_trajectory(n: usize, p: u32, t_end: f64) -> FlowTrajectory {
    let grid = Grid1D::circle(n).expect("fixture grid");
    let geom = WarpedGeometry::flat(grid, p, Gauge::Gauged);
    run_flow(&geom, &IntegratorConfig::with_t_end(t_end), Gauge::Gauged).expect("flat flow")
}

/// The image-sum kernel laid out as a conjugate solution on a static flat
/// unit-circle trajectory, with the same bootstrap window as the solver.
pub fn theta_solution(
    traj: Arc<FlowTrajectory>,
    y_index: usize,
    t_final: f64,
) -> Result<ConjugateHeatSolution> {
    let reference = solve_conjugate_fundamental(traj, y_index, t_final)?;
    let mut out = reference;
    for k in 0..out.levels() {
        let tau = out.tau(k);
        let g = out.geometry(k).clone();
        let big = theta_kernel(&g.grid, y_index, tau);
        let ln_norm = 0.5 * (4.0 * PI * tau).ln();
        out.log_density[k] = big.iter().map(|v| -(v.ln() + ln_norm)).collect();
        out.mass_series[k] = g.integral(&big);
        out.kernel[k] = big;
    }
    Ok(out)
}

/// Length of the flat segment used by [`euclidean_gaussian`].
pub const EUCLIDEAN_LENGTH: f64 = 40.0;

/// The Euclidean fundamental solution `H = (4πτ)^{−1/2} e^{−(x−y)²/4τ}` laid
/// out on a flat segment long enough that the periodic seam carries only
/// round-off-sized values. The center sits mid-segment and
/// `τ` runs over `[tau_min, tau_min + steps·dt]`.
pub fn euclidean_gaussian(
    n: usize,
    tau_min: f64,
    dt: f64,
    steps: usize,
) -> Result<ConjugateHeatSolution> {
    let grid = Grid1D::new(n, EUCLIDEAN_LENGTH)?;
    let geom = WarpedGeometry::flat(grid, 1, Gauge::Gauged);
    let traj = Arc::new(FlowTrajectory::stationary(geom, dt, steps + 1));
    let y_index = n / 2;
    let y = grid.x(y_index);
    let t_final = traj.last().time + tau_min - dt;
    let bootstrap_index = steps;
    let mut kernel = Vec::with_capacity(steps + 1);
    let mut logs = Vec::with_capacity(steps + 1);
    let mut masses = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let tau = t_final - traj.snapshots[k].time;
        let h: Vec<f64> = grid.sample(|x| (x - y) * (x - y) / (4.0 * tau));
        let big: Vec<f64> = h
            .iter()
            .map(|v| (-v).exp() / (4.0 * PI * tau).sqrt())
            .collect();
        masses.push(traj.snapshots[k].integral(&big));
        kernel.push(big);
        logs.push(h);
    }
    Ok(ConjugateHeatSolution {
        final_index: traj.len() - 1,
        trajectory: traj,
        y_index,
        t_final,
        tau0: tau_min,
        bootstrap_index,
        kernel,
        log_density: logs,
        mass_series: masses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_kernel_has_unit_mass() {
        let g = Grid1D::circle(64).unwrap();
        let k = theta_kernel(&g, 3, 0.5);
        let mass: f64 = k.iter().sum::<f64>() * g.spacing();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_gaussian_layout() {
        let sol = euclidean_gaussian(400, 0.1, 0.01, 20).unwrap();
        assert_eq!(sol.levels(), 21);
        assert!((sol.tau(sol.bootstrap_index) - 0.1).abs() < 1e-12);
        assert!((sol.tau(0) - 0.3).abs() < 1e-12);
        assert!(sol.mass_series.iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert_eq!(sol.log_density[0][sol.y_index], 0.0);
    }
}
