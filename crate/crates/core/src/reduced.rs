//! Adapted reduced distance `ℓ(x, τ)` by dynamic programming over slices in
//! `s = √τ`, and the checks that compare it with the conjugate heat kernel.
//!
//! In `s` the action reads `∫ (2s²S(γ) + |γ'|²/2) ds`, which is regular at
//! `s = 0`. A transition from slice `j` to `j'` costs
//! `Δs·2s̄²S(x̄) + d²/(2Δs)` with `d` and `S` taken from the snapshot nearest
//! the slab midpoint `s̄`, and `x̄` the midpoint of the shorter arc.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::Serialize;

use crate::conjugate::{ConjugateHeatSolution, HeatSolution};
use crate::error::{Error, Result};
use crate::flow::{monotonicity_defect, FlowTrajectory};
use crate::geometry::{interp_periodic, Gauge};
use crate::grid::polyfit_eval;

/// Base dimension.
const N_BASE: f64 = 1.0;

/// Upper end of the `τ` range used for small-`τ` extrapolation.
pub const SMALL_TAU_FIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedOptions {
    /// Number of `s`-steps; slices are `s_j = j·√τ_max / slices`.
    pub slices: usize,
    /// Largest index offset of a single transition. `None` means `n/2`, the
    /// full circle.
    pub window: Option<usize>,
    /// Largest number of slices a transition may skip. `None` means no limit.
    pub max_skip: Option<usize>,
    /// Constant added to `S` inside the action (0 except for controls).
    pub s_shift: f64,
}

impl Default for ReducedOptions {
    fn default() -> Self {
        Self {
            slices: 64,
            window: None,
            max_skip: None,
            s_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReducedDistanceField {
    pub trajectory: Arc<FlowTrajectory>,
    pub y_index: usize,
    pub t_final: f64,
    pub options: ReducedOptions,
    /// `s_j`, `j = 0..=slices`.
    pub s: Vec<f64>,
    pub taus: Vec<f64>,
    /// Trajectory index used for slice `j` (nearest to `T − τ_j`).
    pub snapshot_of_slice: Vec<usize>,
    /// Minimal action per slice and grid point.
    pub action: Vec<Vec<f64>>,
    /// `ℓ = action / (2s)`; slice 0 holds 0 at the center and `+∞` elsewhere.
    pub ell: Vec<Vec<f64>>,
    /// Argmin predecessor `(slice, index)` per node.
    pub policy: Vec<Vec<Option<(usize, usize)>>>,
    /// Distances from the center at time `T`.
    pub d_final: Vec<f64>,
}

impl ReducedDistanceField {
    pub fn slices(&self) -> usize {
        self.s.len() - 1
    }

    pub fn spacing(&self) -> f64 {
        self.trajectory.first().grid.spacing()
    }

    /// Optimal path ending at `(j, i)`, listed from slice 0.
    pub fn optimal_path(&self, j: usize, i: usize) -> Vec<(usize, usize)> {
        let mut path = vec![(j, i)];
        let mut cur = (j, i);
        while let Some(prev) = self.policy[cur.0][cur.1] {
            path.push(prev);
            cur = prev;
        }
        path.reverse();
        path
    }

    /// Flat node id `j·n + i` of the predecessor, for export.
    pub fn predecessor_id(&self, j: usize, i: usize) -> Option<usize> {
        let n = self.d_final.len();
        self.policy[j][i].map(|(pj, pi)| pj * n + pi)
    }

    /// `ℓ(·, τ)` from linear interpolation of `τℓ` in `τ` between slices.
    pub fn ell_at_tau(&self, tau: f64) -> Option<Vec<f64>> {
        if tau < self.taus[1] - 1e-14 {
            return None;
        }
        let j = (1..self.taus.len()).find(|&j| self.taus[j] >= tau - 1e-14)?;
        if j == 1 {
            return Some(self.ell[1].clone());
        }
        let (t0, t1) = (self.taus[j - 1], self.taus[j]);
        let w = (tau - t0) / (t1 - t0);
        Some(
            self.ell[j - 1]
                .iter()
                .zip(&self.ell[j])
                .map(|(a, b)| ((1.0 - w) * t0 * a + w * t1 * b) / tau)
                .collect(),
        )
    }
}

/// Geometry of one snapshot as seen by the action.
struct Slab {
    arc: Vec<f64>,
    total: f64,
    s: Vec<f64>,
}

struct ActionCost {
    s: Vec<f64>,
    /// Slab index for the pair `(j, j')`, stored at `j·(J+1) + j'`.
    pair_slab: Vec<usize>,
    slabs: Vec<Slab>,
}

impl ActionCost {
    fn eval(&self, j: usize, i: usize, j2: usize, i2: usize) -> f64 {
        let stride = self.s.len();
        let slab = &self.slabs[self.pair_slab[j * stride + j2]];
        let n = slab.arc.len();
        let ds = self.s[j2] - self.s[j];
        let sm = 0.5 * (self.s[j] + self.s[j2]);
        let fwd = (slab.arc[i2] - slab.arc[i]).rem_euclid(slab.total);
        let (d, offset) = if fwd <= slab.total - fwd {
            (fwd, ((i2 + n - i) % n) as f64)
        } else {
            (slab.total - fwd, -(((i + n - i2) % n) as f64))
        };
        let s_mid = interp_periodic(&slab.s, i as f64 + 0.5 * offset);
        ds * 2.0 * sm * sm * s_mid + d * d / (2.0 * ds)
    }
}

type Policy = Vec<Vec<Option<(usize, usize)>>>;

fn allowed(n: usize, window: usize, i: usize, i2: usize) -> bool {
    let d = (i2 + n - i) % n;
    d.min(n - d) <= window
}

/// Bellman recursion over `slices + 1` layers of `nodes` points starting from
/// `start` on layer 0. Ties keep the first candidate in `(j, i)` order.
pub fn bellman<F>(
    nodes: usize,
    slices: usize,
    start: usize,
    max_skip: usize,
    window: usize,
    cost: F,
) -> (Vec<Vec<f64>>, Policy)
where
    F: Fn(usize, usize, usize, usize) -> f64,
{
    let mut value = vec![vec![f64::INFINITY; nodes]; slices + 1];
    let mut policy: Policy = vec![vec![None; nodes]; slices + 1];
    value[0][start] = 0.0;
    for j2 in 1..=slices {
        let lo = j2.saturating_sub(max_skip);
        for j in lo..j2 {
            for i in 0..nodes {
                let base = value[j][i];
                if !base.is_finite() {
                    continue;
                }
                for i2 in 0..nodes {
                    if !allowed(nodes, window, i, i2) {
                        continue;
                    }
                    let cand = base + cost(j, i, j2, i2);
                    if cand < value[j2][i2] {
                        value[j2][i2] = cand;
                        policy[j2][i2] = Some((j, i));
                    }
                }
            }
        }
    }
    (value, policy)
}

/// Minimum over every admissible path, by explicit enumeration. Exponential;
/// meant for tiny instances only.
pub fn enumerate_paths<F>(
    nodes: usize,
    slices: usize,
    start: usize,
    max_skip: usize,
    window: usize,
    cost: F,
) -> Vec<Vec<f64>>
where
    F: Fn(usize, usize, usize, usize) -> f64,
{
    fn walk<F: Fn(usize, usize, usize, usize) -> f64>(
        j: usize,
        i: usize,
        acc: f64,
        ctx: (usize, usize, usize, usize),
        cost: &F,
        best: &mut Vec<Vec<f64>>,
    ) {
        let (nodes, slices, max_skip, window) = ctx;
        for j2 in j + 1..=(j + max_skip).min(slices) {
            for i2 in 0..nodes {
                if !allowed(nodes, window, i, i2) {
                    continue;
                }
                let total = acc + cost(j, i, j2, i2);
                if total < best[j2][i2] {
                    best[j2][i2] = total;
                }
                walk(j2, i2, total, ctx, cost, best);
            }
        }
    }
    let mut best = vec![vec![f64::INFINITY; nodes]; slices + 1];
    best[0][start] = 0.0;
    walk(
        0,
        start,
        0.0,
        (nodes, slices, max_skip, window),
        &cost,
        &mut best,
    );
    best
}

fn slice_grid(tau_max: f64, slices: usize) -> Vec<f64> {
    let ds = tau_max.sqrt() / slices as f64;
    (0..=slices).map(|j| j as f64 * ds).collect()
}

fn build_cost(
    traj: &FlowTrajectory,
    t_final: f64,
    s: &[f64],
    s_shift: f64,
) -> (ActionCost, Vec<usize>) {
    let stride = s.len();
    let mut slab_of_snapshot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut slabs = Vec::new();
    let mut slab_for = |k: usize, slabs: &mut Vec<Slab>| -> usize {
        *slab_of_snapshot.entry(k).or_insert_with(|| {
            let g = &traj.snapshots[k];
            slabs.push(Slab {
                arc: g.arc_positions(),
                total: g.total_length(),
                s: g.adapted_scalar()
                    .into_iter()
                    .map(|v| v + s_shift)
                    .collect(),
            });
            slabs.len() - 1
        })
    };
    let mut pair_slab = vec![0; stride * stride];
    for j in 0..stride {
        for j2 in j + 1..stride {
            let sm = 0.5 * (s[j] + s[j2]);
            let k = traj.nearest_index(t_final - sm * sm);
            pair_slab[j * stride + j2] = slab_for(k, &mut slabs);
        }
    }
    let snapshot_of_slice = s
        .iter()
        .map(|sj| traj.nearest_index(t_final - sj * sj))
        .collect();
    (
        ActionCost {
            s: s.to_vec(),
            pair_slab,
            slabs,
        },
        snapshot_of_slice,
    )
}

fn check_window(traj: &FlowTrajectory, y_index: usize, t_final: f64, tau_max: f64) -> Result<()> {
    let n = traj.first().n();
    if y_index >= n {
        return Err(Error::config(format!(
            "center index {y_index} outside grid of {n}"
        )));
    }
    if traj.system != Gauge::Gauged {
        return Err(Error::config(
            "the adapted action is defined along the gauged flow",
        ));
    }
    if !(tau_max > 0.0) {
        return Err(Error::config(format!(
            "tau_max must be positive, got {tau_max}"
        )));
    }
    let (t0, t1) = (traj.first().time, traj.last().time);
    if t_final > t1 + 1e-9 || t_final - tau_max < t0 - 1e-9 {
        return Err(Error::config(format!(
            "tau_max {tau_max} before T = {t_final} leaves the trajectory window [{t0}, {t1}]"
        )));
    }
    Ok(())
}

pub fn solve_reduced_distance(
    traj: Arc<FlowTrajectory>,
    y_index: usize,
    t_final: f64,
    tau_max: f64,
) -> Result<ReducedDistanceField> {
    solve_reduced_distance_with(traj, y_index, t_final, tau_max, &ReducedOptions::default())
}

pub fn solve_reduced_distance_with(
    traj: Arc<FlowTrajectory>,
    y_index: usize,
    t_final: f64,
    tau_max: f64,
    opts: &ReducedOptions,
) -> Result<ReducedDistanceField> {
    check_window(&traj, y_index, t_final, tau_max)?;
    if opts.slices < 2 {
        return Err(Error::config("reduced distance needs at least 2 slices"));
    }
    let n = traj.first().n();
    let s = slice_grid(tau_max, opts.slices);
    let (cost, snapshot_of_slice) = build_cost(&traj, t_final, &s, opts.s_shift);
    let window = opts.window.unwrap_or(n / 2);
    let max_skip = opts.max_skip.unwrap_or(opts.slices).max(1);
    let (action, policy) = bellman(n, opts.slices, y_index, max_skip, window, |j, i, j2, i2| {
        cost.eval(j, i, j2, i2)
    });
    let ell = action
        .iter()
        .zip(&s)
        .map(|(row, &sj)| {
            if sj == 0.0 {
                row.clone()
            } else {
                row.iter().map(|v| v / (2.0 * sj)).collect()
            }
        })
        .collect();
    let k_final = traj.nearest_index(t_final);
    let d_final = traj.snapshots[k_final].distances_from(y_index);
    Ok(ReducedDistanceField {
        y_index,
        t_final,
        options: *opts,
        taus: s.iter().map(|v| v * v).collect(),
        s,
        snapshot_of_slice,
        action,
        ell,
        policy,
        d_final,
        trajectory: traj,
    })
}

/// `k₁ = max(0, −min S)` and `k₂ = max(0, max S)` over snapshots with times in
/// `[t_lo, t_hi]`. On a one-dimensional base `𝒮 = S g`.
pub fn curvature_bounds(traj: &FlowTrajectory, t_lo: f64, t_hi: f64) -> (f64, f64) {
    let mut k1: f64 = 0.0;
    let mut k2: f64 = 0.0;
    for g in &traj.snapshots {
        if g.time < t_lo - 1e-12 || g.time > t_hi + 1e-12 {
            continue;
        }
        for s in g.adapted_scalar() {
            k1 = k1.max(-s);
            k2 = k2.max(s);
        }
    }
    (k1, k2)
}

#[derive(Debug, Clone, Serialize)]
pub struct LwBoundsReport {
    pub k1: f64,
    pub k2: f64,
    /// Smallest `L − lower` over nodes.
    pub lower_margin: f64,
    /// Smallest `upper − L` over nodes.
    pub upper_margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Two-sided bounds on `L = 4τℓ` in terms of `d_T²`, with tolerance
/// `10·spacing`.
pub fn lw_bounds_check(field: &ReducedDistanceField, k1: f64, k2: f64) -> LwBoundsReport {
    let mut lower_margin = f64::INFINITY;
    let mut upper_margin = f64::INFINITY;
    for j in 1..field.taus.len() {
        let tau = field.taus[j];
        for (i, &d) in field.d_final.iter().enumerate() {
            let l = 4.0 * tau * field.ell[j][i];
            let lower = (-2.0 * k1 * tau).exp() * d * d - 4.0 * k1 * N_BASE / 3.0 * tau * tau;
            let upper = (2.0 * k2 * tau).exp() * d * d + 4.0 * k2 * N_BASE / 3.0 * tau * tau;
            lower_margin = lower_margin.min(l - lower);
            upper_margin = upper_margin.min(upper - l);
        }
    }
    let tolerance = 10.0 * field.spacing();
    LwBoundsReport {
        k1,
        k2,
        lower_margin,
        upper_margin,
        tolerance,
        pass: lower_margin >= -tolerance && upper_margin >= -tolerance,
    }
}

fn check_same_center(h_sol: &ConjugateHeatSolution, field: &ReducedDistanceField) -> Result<()> {
    if !Arc::ptr_eq(&h_sol.trajectory, &field.trajectory)
        || h_sol.y_index != field.y_index
        || (h_sol.t_final - field.t_final).abs() > 1e-12
    {
        return Err(Error::config(
            "kernel and reduced distance must share trajectory, center and final time",
        ));
    }
    Ok(())
}

/// `h` at `τ` from linear interpolation of `τh` between stored kernel levels;
/// `τh` is close to linear where `h` itself is strongly convex.
fn log_density_at_tau(h_sol: &ConjugateHeatSolution, tau: f64) -> Option<Vec<f64>> {
    let top = h_sol.tau(0);
    let bottom = h_sol.tau(h_sol.bootstrap_index);
    if tau > top + 1e-12 || tau < bottom - 1e-12 {
        return None;
    }
    // τ decreases with the level index
    let k = (0..h_sol.levels()).find(|&k| h_sol.tau(k) <= tau + 1e-12)?;
    if k == 0 || (h_sol.tau(k) - tau).abs() <= 1e-12 {
        return Some(h_sol.log_density[k].clone());
    }
    let (ta, tb) = (h_sol.tau(k - 1), h_sol.tau(k));
    let w = (tau - tb) / (ta - tb);
    Some(
        h_sol.log_density[k]
            .iter()
            .zip(&h_sol.log_density[k - 1])
            .map(|(b, a)| ((1.0 - w) * tb * b + w * ta * a) / tau)
            .collect(),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct HEllComparison {
    /// `(τ_j, ℓ − h)` per slice inside the kernel window.
    pub margins: Vec<(f64, Vec<f64>)>,
    /// Smallest margin over slices with `τ ≥ tau_min`.
    pub min_margin: f64,
    /// Smallest margin over every slice, including the under-resolved ones.
    pub min_margin_all: f64,
    pub tau_min: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `ℓ − h` at every slice whose `τ` lies inside the kernel window. The verdict
/// uses slices with `τ ≥ tau_min`; for `τ = O(spacing²)` the lattice kernel is
/// not yet close to the continuum one.
pub fn compare_h_ell(
    h_sol: &ConjugateHeatSolution,
    field: &ReducedDistanceField,
    tau_min: f64,
) -> Result<HEllComparison> {
    check_same_center(h_sol, field)?;
    let mut margins = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut min_margin_all = f64::INFINITY;
    for j in 1..field.taus.len() {
        let tau = field.taus[j];
        let Some(h) = log_density_at_tau(h_sol, tau) else {
            continue;
        };
        let m: Vec<f64> = field.ell[j].iter().zip(&h).map(|(l, h)| l - h).collect();
        let lowest = m.iter().copied().fold(f64::INFINITY, f64::min);
        min_margin_all = min_margin_all.min(lowest);
        if tau >= tau_min - 1e-12 {
            min_margin = min_margin.min(lowest);
        }
        margins.push((tau, m));
    }
    if !min_margin.is_finite() {
        return Err(Error::config(
            "no reduced-distance slice inside the kernel window",
        ));
    }
    let sp = field.spacing();
    let tolerance = 10.0 * sp * sp;
    Ok(HEllComparison {
        margins,
        min_margin,
        min_margin_all,
        tau_min,
        tolerance,
        pass: min_margin >= -tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SmallTauReport {
    /// `max_x |lim 4τℓ − d_T²| / max_x d_T²`.
    pub d2_relative_error: f64,
    pub d2_tolerance: f64,
    pub fit_taus: Vec<f64>,
    /// Extrapolated `∫hHΦ`, `∫ℓHΦ` and `∫(d²/4τ)HΦ` at `τ = 0`.
    pub moment_limits: [f64; 3],
    pub moment_target: f64,
    pub moment_tolerance: f64,
    pub pass_d2: bool,
    pub pass_moments: bool,
}

/// Small-`τ` limits: `4τℓ → d_T²` per point, and the three moments against
/// `(n/2)Φ(y, T)`. Quadratic fits in `τ` over `τ ≤ 0.05`.
pub fn small_tau_limits(
    h_sol: &ConjugateHeatSolution,
    field: &ReducedDistanceField,
    phi_sol: &HeatSolution,
    d2_tolerance: f64,
) -> Result<SmallTauReport> {
    check_same_center(h_sol, field)?;
    if !Arc::ptr_eq(&h_sol.trajectory, &phi_sol.trajectory) {
        return Err(Error::config(
            "forward solution lives on a different trajectory",
        ));
    }

    let d_slices: Vec<usize> = (1..field.taus.len())
        .filter(|&j| field.taus[j] <= SMALL_TAU_FIT + 1e-12)
        .collect();
    if d_slices.len() < 4 {
        return Err(Error::config(
            "fewer than 4 reduced-distance slices with small tau",
        ));
    }
    let xs: Vec<f64> = d_slices.iter().map(|&j| field.taus[j]).collect();
    let d2max = field.d_final.iter().map(|d| d * d).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for (i, d) in field.d_final.iter().enumerate() {
        let ys: Vec<f64> = d_slices
            .iter()
            .map(|&j| 4.0 * field.taus[j] * field.ell[j][i])
            .collect();
        worst = worst.max((polyfit_eval(&xs, &ys, 2, 0.0) - d * d).abs());
    }
    let d2_relative_error = worst / d2max;

    let mut fit_taus = Vec::new();
    let mut moments: [Vec<f64>; 3] = Default::default();
    for k in (0..h_sol.levels()).rev() {
        let tau = h_sol.tau(k);
        if tau > SMALL_TAU_FIT + 1e-12 {
            break;
        }
        let (Some(ell), Some(phi)) = (field.ell_at_tau(tau), phi_sol.at(k)) else {
            continue;
        };
        let g = h_sol.geometry(k);
        let big = &h_sol.kernel[k];
        let dist = g.distances_from(h_sol.y_index);
        let weigh = |f: &dyn Fn(usize) -> f64| -> f64 {
            let vals: Vec<f64> = (0..g.n()).map(|i| f(i) * big[i] * phi[i]).collect();
            g.integral(&vals)
        };
        moments[0].push(weigh(&|i| h_sol.log_density[k][i]));
        moments[1].push(weigh(&|i| ell[i]));
        moments[2].push(weigh(&|i| dist[i] * dist[i] / (4.0 * tau)));
        fit_taus.push(tau);
    }
    if fit_taus.len() < 4 {
        return Err(Error::config("fewer than 4 kernel levels with small tau"));
    }
    let moment_limits = [0, 1, 2].map(|m| polyfit_eval(&fit_taus, &moments[m], 2, 0.0));
    let phi_y = phi_sol
        .at(h_sol.final_index)
        .ok_or_else(|| Error::config("forward solution does not reach T"))?[h_sol.y_index];
    let moment_target = 0.5 * N_BASE * phi_y;
    let moment_tolerance = 10.0 * field.spacing();
    Ok(SmallTauReport {
        d2_relative_error,
        d2_tolerance,
        fit_taus,
        moment_limits,
        moment_target,
        moment_tolerance,
        pass_d2: d2_relative_error <= d2_tolerance,
        pass_moments: moment_limits
            .iter()
            .all(|m| (m - moment_target).abs() <= moment_tolerance),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReducedVolumeSeries {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// Observed only; no monotonicity is asserted.
    pub nonincreasing_defect: f64,
}

/// `V(τ) = ∫ (4πτ)^{−1/2} e^{−ℓ} dμ_τ` at every slice `τ > 0`.
pub fn reduced_volume(field: &ReducedDistanceField) -> ReducedVolumeSeries {
    let mut taus = Vec::new();
    let mut values = Vec::new();
    for j in 1..field.taus.len() {
        let tau = field.taus[j];
        let g = &field.trajectory.snapshots[field.snapshot_of_slice[j]];
        let norm = (4.0 * PI * tau).powf(-0.5 * N_BASE);
        let integrand: Vec<f64> = field.ell[j].iter().map(|l| norm * (-l).exp()).collect();
        taus.push(tau);
        values.push(g.integral(&integrand));
    }
    let nonincreasing_defect = monotonicity_defect(&values, false);
    ReducedVolumeSeries {
        taus,
        values,
        nonincreasing_defect,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DIdentityReport {
    pub index: usize,
    pub max_residual: f64,
    /// `max |2(Δw − ⟨∇w, X⟩)²|`, for scale.
    pub max_rhs: f64,
}

/// Assemble `∂tS − ΔS − 2|𝒮|² + 4(div 𝒮)(X) − 2⟨∇S, X⟩ + 2(Rc − 𝒮)(X, X)` at
/// interior index `k` of a gauged trajectory and compare it with
/// `2(Δw − ⟨∇w, X⟩)²`. `X` is given by its component along the unit tangent.
pub fn mueller_d_identity(
    traj: &FlowTrajectory,
    k: usize,
    x_field: &[f64],
) -> Result<DIdentityReport> {
    if traj.system != Gauge::Gauged {
        return Err(Error::config(
            "the identity is stated for the gauged system",
        ));
    }
    if k == 0 || k + 1 >= traj.len() {
        return Err(Error::config(format!(
            "index {k} has no neighbours on both sides in a trajectory of {}",
            traj.len()
        )));
    }
    let g = &traj.snapshots[k];
    g.grid.check_field(x_field)?;
    let (gm, gp) = (&traj.snapshots[k - 1], &traj.snapshots[k + 1]);
    let (sm, s0, sp) = (gm.adapted_scalar(), g.adapted_scalar(), gp.adapted_scalar());
    let (a, b) = (g.time - gm.time, gp.time - g.time);
    let ds_dt: Vec<f64> = (0..g.n())
        .map(|i| {
            (-b / (a * (a + b))) * sm[i] + ((b - a) / (a * b)) * s0[i] + (a / (b * (a + b))) * sp[i]
        })
        .collect();

    let w = g.adapted_potential();
    let grad_w = g.gradient(&w);
    let lap_w = g.laplacian(&w);
    let lap_s = g.laplacian(&s0);
    let grad_s = g.gradient(&s0);
    // unit-tangent component of 𝒮 = Rc_N − dw⊗dw, and Rc_N = 0
    let s_tt: Vec<f64> = grad_w.iter().map(|d| -d * d).collect();
    let div_s = g.gradient(&s_tt);

    let mut max_residual: f64 = 0.0;
    let mut max_rhs: f64 = 0.0;
    for i in 0..g.n() {
        let x = x_field[i];
        let lhs = ds_dt[i] - lap_s[i] - 2.0 * s_tt[i] * s_tt[i] + 4.0 * div_s[i] * x
            - 2.0 * grad_s[i] * x
            + 2.0 * (0.0 - s_tt[i]) * x * x;
        let r = lap_w[i] - grad_w[i] * x;
        let rhs = 2.0 * r * r;
        max_residual = max_residual.max((lhs - rhs).abs());
        max_rhs = max_rhs.max(rhs.abs());
    }
    Ok(DIdentityReport {
        index: k,
        max_residual,
        max_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::{solve_conjugate_fundamental, solve_forward_heat};
    use crate::fixtures::{euclidean_gaussian, flat_static_trajectory, theta_solution};
    use crate::flow::{run_flow, IntegratorConfig};
    use crate::geometry::WarpedGeometry;
    use crate::grid::{observed_order, Grid1D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cost(nodes: usize, slices: usize, seed: u64) -> ActionCost {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..=slices).map(|j| 0.2 * j as f64).collect();
        let mut slabs = Vec::new();
        for _ in 0..3 {
            let mut arc = Vec::new();
            let mut acc = 0.0;
            for _ in 0..nodes {
                arc.push(acc);
                acc += rng.gen_range(0.5..1.5);
            }
            let s_field = (0..nodes).map(|_| rng.gen_range(-2.0..0.0)).collect();
            slabs.push(Slab {
                arc,
                total: acc,
                s: s_field,
            });
        }
        let stride = slices + 1;
        let pair_slab = (0..stride * stride).map(|_| rng.gen_range(0..3)).collect();
        ActionCost {
            s,
            pair_slab,
            slabs,
        }
    }

    #[test]
    fn dp_matches_enumeration_on_tiny_instances() {
        for seed in 0..4 {
            let c = random_cost(8, 4, seed);
            let f = |j, i, j2, i2| c.eval(j, i, j2, i2);
            for (skip, window) in [(1, 4), (4, 4), (2, 2)] {
                let (dp, _) = bellman(8, 4, 3, skip, window, f);
                let brute = enumerate_paths(8, 4, 3, skip, window, f);
                assert_eq!(dp, brute, "seed {seed} skip {skip} window {window}");
            }
        }
    }

    #[test]
    fn dp_matches_enumeration_on_a_flow() {
        let g = Grid1D::circle(16).unwrap();
        let init = WarpedGeometry::new(
            g,
            vec![1.0; 16],
            g.sample(|x| 0.4 * x.sin()),
            1,
            0.0,
            Gauge::Gauged,
        )
        .unwrap();
        let traj = run_flow(&init, &IntegratorConfig::with_t_end(0.3), Gauge::Gauged).unwrap();
        let s = slice_grid(0.3, 3);
        let (c, _) = build_cost(&traj, 0.3, &s, 0.0);
        let f = |j, i, j2, i2| c.eval(j, i, j2, i2);
        let (dp, _) = bellman(16, 3, 5, 3, 8, f);
        assert_eq!(dp, enumerate_paths(16, 3, 5, 3, 8, f));
    }

    fn flat_field(n: usize) -> ReducedDistanceField {
        let traj = Arc::new(flat_static_trajectory(n, 1, 0.5));
        solve_reduced_distance(traj, 5, 0.5, 0.5).unwrap()
    }

    #[test]
    fn flat_reduced_distance_is_the_euclidean_one() {
        let field = flat_field(64);
        for j in 1..field.taus.len() {
            let tau = field.taus[j];
            for (i, d) in field.d_final.iter().enumerate() {
                let exact = d * d / (4.0 * tau);
                let got = field.ell[j][i];
                if exact == 0.0 {
                    assert!(got.abs() < 1e-14);
                } else {
                    assert!(
                        ((got - exact) / exact).abs() < 1e-4,
                        "{j} {i} {got} {exact}"
                    );
                }
            }
        }
        let path = field.optimal_path(field.slices(), 20);
        assert_eq!(path[0], (0, 5));
        let rep = lw_bounds_check(&field, 0.0, 0.0);
        assert!(rep.pass && rep.lower_margin.abs() < 1e-12 && rep.upper_margin.abs() < 1e-12);
    }

    #[test]
    fn flat_reduced_distance_is_lipschitz_type() {
        let field = flat_field(64);
        let g = field.trajectory.first();
        for j in [8, 32, 64] {
            let tau = field.taus[j];
            let lmax = field.ell[j].iter().copied().fold(0.0, f64::max);
            for a in 0..64 {
                for b in 0..64 {
                    let d = g.geodesic_distance(a, b);
                    let bound = d / tau.sqrt() * (lmax.sqrt() + d / (4.0 * tau.sqrt()));
                    assert!((field.ell[j][a] - field.ell[j][b]).abs() <= bound + 1e-12);
                }
            }
        }
    }

    #[test]
    fn shifted_action_breaks_the_lower_bound() {
        let traj = Arc::new(flat_static_trajectory(256, 1, 0.5));
        let opts = ReducedOptions {
            s_shift: -1.0,
            ..Default::default()
        };
        let field = solve_reduced_distance_with(traj, 5, 0.5, 0.5, &opts).unwrap();
        let rep = lw_bounds_check(&field, 0.0, 0.0);
        assert!(!rep.pass, "{rep:?}");
    }

    #[test]
    fn rejects_tau_beyond_window() {
        let traj = Arc::new(flat_static_trajectory(32, 1, 0.2));
        assert!(matches!(
            solve_reduced_distance(traj, 0, 0.2, 0.3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flat_circle_margin_is_positive_on_the_exact_kernel() {
        let traj = Arc::new(flat_static_trajectory(64, 1, 0.5));
        let field = solve_reduced_distance(traj.clone(), 0, 0.5, 0.5).unwrap();
        let sol = theta_solution(traj.clone(), 0, 0.5).unwrap();
        let cmp = compare_h_ell(&sol, &field, 0.0).unwrap();
        assert!(
            cmp.pass && cmp.min_margin_all > -1e-12,
            "{}",
            cmp.min_margin
        );
        // at the antipode two images tie, so the margin is about ln 2
        for (tau, m) in &cmp.margins {
            assert!(m[32] > 0.6, "{tau} {}", m[32]);
        }

        let other = solve_conjugate_fundamental(traj, 3, 0.5).unwrap();
        assert!(compare_h_ell(&other, &field, 0.0).is_err());
    }

    #[test]
    fn euclidean_second_moment_is_one_half() {
        let sol = euclidean_gaussian(400, 0.05, 0.01, 20).unwrap();
        for k in 0..sol.levels() {
            let g = sol.geometry(k);
            let d = g.distances_from(sol.y_index);
            let tau = sol.tau(k);
            let vals: Vec<f64> = (0..g.n())
                .map(|i| d[i] * d[i] / (4.0 * tau) * sol.kernel[k][i])
                .collect();
            assert!((g.integral(&vals) - 0.5).abs() < 1e-12);
            let i = sol.y_index + 7;
            assert!((sol.log_density[k][i] - d[i] * d[i] / (4.0 * tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_small_tau_limits() {
        let traj = Arc::new(flat_static_trajectory(128, 1, 0.5));
        let field = solve_reduced_distance(traj.clone(), 0, 0.5, 0.5).unwrap();
        let sol = solve_conjugate_fundamental(traj.clone(), 0, 0.5).unwrap();
        let ones = solve_forward_heat(traj, &[1.0; 128], 0.0).unwrap();
        let rep = small_tau_limits(&sol, &field, &ones, 1e-4).unwrap();
        assert!(rep.pass_d2 && rep.pass_moments, "{rep:?}");
    }

    #[test]
    fn flat_reduced_volume() {
        let field = flat_field(64);
        let h = field.spacing();
        let vol = reduced_volume(&field);
        let resolved: Vec<f64> = vol
            .taus
            .iter()
            .zip(&vol.values)
            .filter(|(t, _)| **t >= 4.0 * h * h)
            .map(|(_, v)| *v)
            .collect();
        assert!(resolved.iter().all(|v| *v > 0.0 && *v <= 1.0 + 1e-9));
        assert!((resolved[0] - 1.0).abs() < 1e-6);
        assert!(*resolved.last().unwrap() < 1.0 - 1e-4);

        let mut mock = field.clone();
        for row in mock.ell.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let vm = reduced_volume(&mock);
        for (t, v) in vm.taus.iter().zip(&vm.values) {
            let expect = 2.0 * PI * (4.0 * PI * t).powf(-0.5);
            assert!((v - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn coupled_run_reduced_distance_checks() {
        let g = Grid1D::circle(128).unwrap();
        let init = WarpedGeometry::new(
            g,
            vec![1.0; 128],
            g.sample(|x| 0.3 * x.sin()),
            1,
            0.0,
            Gauge::Gauged,
        )
        .unwrap();
        let traj =
            Arc::new(run_flow(&init, &IntegratorConfig::with_t_end(0.5), Gauge::Gauged).unwrap());
        let field = solve_reduced_distance(traj.clone(), 0, 0.5, 0.5).unwrap();
        let (k1, k2) = curvature_bounds(&traj, 0.0, 0.5);
        assert!(k1 > 0.0 && k2 == 0.0);
        assert!(lw_bounds_check(&field, k1, k2).pass);
        let sol = solve_conjugate_fundamental(traj.clone(), 0, 0.5).unwrap();
        let cmp = compare_h_ell(&sol, &field, 0.25).unwrap();
        assert!(cmp.pass, "{}", cmp.min_margin);
        let ones = solve_forward_heat(traj, &[1.0; 128], 0.0).unwrap();
        let st = small_tau_limits(&sol, &field, &ones, 1e-3).unwrap();
        assert!(st.pass_d2 && st.pass_moments, "{st:?}");
        assert!(reduced_volume(&field)
            .values
            .iter()
            .all(|v| v.is_finite() && *v > 0.0));
    }

    fn coupled(n: usize) -> FlowTrajectory {
        let g = Grid1D::circle(n).unwrap();
        let init = WarpedGeometry::new(
            g,
            vec![1.0; n],
            g.sample(|x| 0.3 * x.sin()),
            1,
            0.0,
            Gauge::Gauged,
        )
        .unwrap();
        run_flow(&init, &IntegratorConfig::with_t_end(0.2), Gauge::Gauged).unwrap()
    }

    #[test]
    fn d_identity_converges_at_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_of = |x: f64| {
            coeffs[0] + coeffs[1] * x.sin() + coeffs[2] * x.cos() + coeffs[3] * (2.0 * x).sin()
        };
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for n in [64, 128, 256] {
            let traj = coupled(n);
            let k = traj.nearest_index(0.1);
            let g = &traj.snapshots[k];
            let x = g.grid.sample(x_of);
            let rep = mueller_d_identity(&traj, k, &x).unwrap();
            let grad = g.gradient(&g.adapted_potential());
            let along = mueller_d_identity(&traj, k, &grad).unwrap();
            assert!(along.max_residual < 1e-2);
            hs.push(g.grid.spacing());
            errs.push(rep.max_residual);
        }
        assert!(observed_order(&hs, &errs) > 1.8, "{errs:?}");
    }

    #[test]
    fn d_identity_trivial_and_errors() {
        let traj = flat_static_trajectory(32, 1, 0.1);
        let rep = mueller_d_identity(&traj, 1, &[0.7; 32]).unwrap();
        assert!(rep.max_residual < 1e-14 && rep.max_rhs == 0.0);
        assert!(mueller_d_identity(&traj, 0, &[0.0; 32]).is_err());
        let g = Grid1D::circle(32).unwrap();
        let init = WarpedGeometry::new(
            g,
            vec![1.0; 32],
            g.sample(|x| 0.1 * x.sin()),
            1,
            0.0,
            Gauge::Ungauged,
        )
        .unwrap();
        let ung = run_flow(&init, &IntegratorConfig::with_t_end(0.01), Gauge::Ungauged).unwrap();
        let ung_arc = Arc::new(ung.clone());
        assert!(solve_reduced_distance(ung_arc, 0, 0.01, 0.01).is_err());
        assert!(mueller_d_identity(&ung, 1, &[0.0; 32]).is_err());
    }
}
