//! Adapted energy `F` and entropy `Ψ`, the constants `λ`, `μ`, `ν` obtained by
//! minimizing them, and the identities tying them to the flow.
//!
//! Integrals use the metric cell measure. The gradient term is written on
//! cell faces through `ψ = e^{−h/2}`, so `F(h) = ⟨ψ, (−4Δ + S)ψ⟩` holds
//! exactly for the discrete Laplacian and the minimization problems become
//! discrete eigen/log-Sobolev problems.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::conjugate::ConjugateHeatSolution;
use crate::error::{Error, Result};
use crate::flow::{monotonicity_defect, velocity, FlowTrajectory};
use crate::geometry::{Gauge, WarpedGeometry};
use crate::grid::fit_line;
use crate::tridiag::CyclicTridiag;

/// Base dimension.
const N_BASE: f64 = 1.0;

const CONSTRAINT_TOL: f64 = 1e-6;

/// Face conductances `1 / (spacing · φ_{i+1/2})`.
fn conductance(geom: &WarpedGeometry) -> Vec<f64> {
    let h = geom.grid.spacing();
    (0..geom.n())
        .map(|i| 1.0 / (h * geom.phi_half(i)))
        .collect()
}

/// `⟨ψ, (−4Δ + S)ψ⟩` with the face form of the Dirichlet energy.
fn quadratic_form(geom: &WarpedGeometry, s: &[f64], psi: &[f64]) -> f64 {
    let a = conductance(geom);
    let m = geom.cell_measure();
    let g = &geom.grid;
    (0..geom.n())
        .map(|i| {
            let d = psi[g.next(i)] - psi[i];
            4.0 * a[i] * d * d + s[i] * m[i] * psi[i] * psi[i]
        })
        .sum()
}

fn check_mass(mass: f64) -> Result<()> {
    if (mass - 1.0).abs() > CONSTRAINT_TOL {
        return Err(Error::Constraint {
            integral: mass,
            expected: 1.0,
        });
    }
    Ok(())
}

/// `F(h) = ∫(S + |∇h|²) e^{−h} dμ` under `∫e^{−h} dμ = 1`.
pub fn energy_fw(geom: &WarpedGeometry, h: &[f64]) -> Result<f64> {
    geom.grid.check_field(h)?;
    let psi: Vec<f64> = h.iter().map(|v| (-0.5 * v).exp()).collect();
    let sq: Vec<f64> = psi.iter().map(|p| p * p).collect();
    check_mass(geom.integral(&sq))?;
    Ok(quadratic_form(geom, &geom.adapted_scalar(), &psi))
}

/// `Ψ(h, τ) = ∫(τ(|∇h|² + S) + h − n)(4πτ)^{−n/2} e^{−h} dμ` under unit mass.
pub fn entropy_psiw(geom: &WarpedGeometry, h: &[f64], tau: f64) -> Result<f64> {
    geom.grid.check_field(h)?;
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let norm = (4.0 * PI * tau).powf(-0.25 * N_BASE);
    let psi: Vec<f64> = h.iter().map(|v| norm * (-0.5 * v).exp()).collect();
    let sq: Vec<f64> = psi.iter().map(|p| p * p).collect();
    check_mass(geom.integral(&sq))?;
    let rest: Vec<f64> = (0..geom.n()).map(|i| (h[i] - N_BASE) * sq[i]).collect();
    Ok(tau * quadratic_form(geom, &geom.adapted_scalar(), &psi) + geom.integral(&rest))
}

/// `M^{−1/2}(4K + MS)M^{−1/2}`, the symmetric form of `−4Δ + S`.
fn symmetric_operator(geom: &WarpedGeometry) -> CyclicTridiag {
    let n = geom.n();
    let a = conductance(geom);
    let m = geom.cell_measure();
    let s = geom.adapted_scalar();
    let g = &geom.grid;
    let mut b = CyclicTridiag::zeros(n);
    for i in 0..n {
        let (ip, im) = (g.next(i), g.prev(i));
        b.diag[i] = 4.0 * (a[i] + a[im]) / m[i] + s[i];
        b.upper[i] = -4.0 * a[i] / (m[i] * m[ip]).sqrt();
        b.lower[i] = -4.0 * a[im] / (m[i] * m[im]).sqrt();
    }
    b
}

#[derive(Debug, Clone, Serialize)]
pub struct Eigenpair {
    pub value: f64,
    /// Positive, with `∫ψ² dμ = 1`.
    pub eigenfunction: Vec<f64>,
    pub iterations: usize,
}

/// Bottom of the spectrum of `−4Δ + S` by shifted inverse iteration.
pub fn lambda_w(geom: &WarpedGeometry) -> Result<Eigenpair> {
    geom.check_nondegenerate(0.0)?;
    let b = symmetric_operator(geom);
    let n = geom.n();
    let shift = (0..n)
        .map(|i| b.diag[i] - b.lower[i].abs() - b.upper[i].abs())
        .fold(f64::INFINITY, f64::min)
        - 0.1;
    let scale = (0..n)
        .map(|i| b.diag[i].abs() + b.lower[i].abs() + b.upper[i].abs())
        .fold(1.0, f64::max);
    let mut shifted = b.clone();
    shifted.diag.iter_mut().for_each(|d| *d -= shift);

    let m = geom.cell_measure();
    let mut y: Vec<f64> = m.iter().map(|v| v.sqrt()).collect();
    normalize(&mut y);
    let mut value = f64::NAN;
    for it in 1..=1000 {
        let mut z = shifted.solve(&y)?;
        normalize(&mut z);
        y = z;
        let by = b.apply(&y);
        let next: f64 = y.iter().zip(&by).map(|(a, b)| a * b).sum();
        let resid = by
            .iter()
            .zip(&y)
            .map(|(b, y)| (b - next * y).powi(2))
            .sum::<f64>()
            .sqrt();
        value = next;
        // the eigenvalue error is bounded by resid² / gap
        if resid <= 1e-10 * scale {
            let sign = if y.iter().sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
            let eigenfunction = y.iter().zip(&m).map(|(v, m)| sign * v / m.sqrt()).collect();
            return Ok(Eigenpair {
                value,
                eigenfunction,
                iterations: it,
            });
        }
    }
    Err(Error::Solver(format!(
        "inverse iteration for the bottom eigenvalue did not settle (last value {value})"
    )))
}

/// Smallest eigenvalue of the same operator by a dense symmetric eigensolve.
pub fn lambda_w_dense(geom: &WarpedGeometry) -> f64 {
    let b = symmetric_operator(geom);
    let n = geom.n();
    let mut dense = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        dense[(i, i)] += b.diag[i];
        dense[(i, geom.grid.next(i))] += b.upper[i];
        dense[(i, geom.grid.prev(i))] += b.lower[i];
    }
    dense
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimizerResult {
    /// Minimizer with `∫(4πτ)^{−1/2} e^{−h} dμ = 1`.
    pub h_min: Vec<f64>,
    pub value: f64,
    /// `max |τ(2Δh − |∇h|² + S) + h − n − μ|`, with `2Δh − |∇h|²` taken as
    /// `−4Δψ/ψ`.
    pub euler_lagrange_residual: f64,
    pub iterations: usize,
    pub starts: usize,
    pub converged_starts: usize,
}

struct LogSobolev<'a> {
    tau: f64,
    a: Vec<f64>,
    m: Vec<f64>,
    s: Vec<f64>,
    geom: &'a WarpedGeometry,
}

impl LogSobolev<'_> {
    /// `R_i = τ(Aψ)_i / (m_i ψ_i) − 2 ln ψ_i − 1 − Λ` and the mass defect.
    fn residual(&self, lnpsi: &[f64], lam: f64) -> (Vec<f64>, f64) {
        let g = &self.geom.grid;
        let n = lnpsi.len();
        let mut r = Vec::with_capacity(n);
        let mut mass = 0.0;
        for i in 0..n {
            let (ip, im) = (g.next(i), g.prev(i));
            let up = (lnpsi[ip] - lnpsi[i]).exp();
            let dn = (lnpsi[im] - lnpsi[i]).exp();
            let a_over =
                4.0 * (self.a[i] * (1.0 - up) + self.a[im] * (1.0 - dn)) / self.m[i] + self.s[i];
            r.push(self.tau * a_over - 2.0 * lnpsi[i] - 1.0 - lam);
            mass += self.m[i] * (2.0 * lnpsi[i]).exp();
        }
        (r, mass - 1.0)
    }

    fn merit(&self, lnpsi: &[f64], lam: f64) -> f64 {
        let (r, c) = self.residual(lnpsi, lam);
        r.iter().map(|v| v * v).sum::<f64>() + c * c
    }

    /// Jacobian rows: four entries per grid row, then the dense constraint row.
    fn jacobian(&self, lnpsi: &[f64]) -> (Vec<[(usize, f64); 4]>, Vec<f64>) {
        let g = &self.geom.grid;
        let n = lnpsi.len();
        let rows = (0..n)
            .map(|i| {
                let (ip, im) = (g.next(i), g.prev(i));
                let up = 4.0 * self.tau * self.a[i] * (lnpsi[ip] - lnpsi[i]).exp() / self.m[i];
                let dn = 4.0 * self.tau * self.a[im] * (lnpsi[im] - lnpsi[i]).exp() / self.m[i];
                [(ip, -up), (im, -dn), (i, up + dn - 2.0), (n, -1.0)]
            })
            .collect();
        let last = (0..n)
            .map(|i| 2.0 * self.m[i] * (2.0 * lnpsi[i]).exp())
            .collect();
        (rows, last)
    }

    /// `(JᵀJ, Jᵀr)` accumulated row by row.
    fn normal_equations(&self, lnpsi: &[f64], r: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let n = lnpsi.len();
        let (rows, last) = self.jacobian(lnpsi);
        let mut jtj = DMatrix::<f64>::zeros(n + 1, n + 1);
        let mut grad = DVector::<f64>::zeros(n + 1);
        for (i, row) in rows.iter().enumerate() {
            for &(a, va) in row {
                grad[a] += va * r[i];
                for &(b, vb) in row {
                    jtj[(a, b)] += va * vb;
                }
            }
        }
        for a in 0..n {
            grad[a] += last[a] * r[n];
            for b in 0..n {
                jtj[(a, b)] += last[a] * last[b];
            }
        }
        (jtj, grad)
    }

    /// Levenberg–Marquardt on the stationarity conditions; the damping keeps
    /// the step defined when the Jacobian has a kernel, as it does on a flat
    /// circle where every translate of a minimizer is a minimizer. Returns
    /// `(ln ψ, Λ, iterations)` on convergence.
    fn solve(&self, mut lnpsi: Vec<f64>) -> Option<(Vec<f64>, f64, usize)> {
        let n = lnpsi.len();
        // start on the constraint, with Λ from the Rayleigh-type identity
        let mass: f64 = (0..n).map(|i| self.m[i] * (2.0 * lnpsi[i]).exp()).sum();
        lnpsi.iter_mut().for_each(|v| *v -= 0.5 * mass.ln());
        let (r0, _) = self.residual(&lnpsi, 0.0);
        let mut lam: f64 = (0..n)
            .map(|i| r0[i] * self.m[i] * (2.0 * lnpsi[i]).exp())
            .sum();
        let mut damping = 1e-8;
        for it in 1..=300 {
            let (r, c) = self.residual(&lnpsi, lam);
            let rmax = r.iter().fold(c.abs(), |acc, v| acc.max(v.abs()));
            if rmax <= 1e-11 {
                return Some((lnpsi, lam, it));
            }
            let mut rv = DVector::<f64>::from_vec(r);
            rv = rv.push(c);
            let (jtj, grad) = self.normal_equations(&lnpsi, &rv);
            let f0 = rv.norm_squared();
            loop {
                let mut a = jtj.clone();
                for d in 0..=n {
                    a[(d, d)] += damping * jtj[(d, d)].max(1e-12);
                }
                let step = a.cholesky().map(|ch| ch.solve(&(-&grad)));
                if let Some(step) = step {
                    let trial: Vec<f64> = (0..n).map(|i| lnpsi[i] + step[i]).collect();
                    let tl = lam + step[n];
                    let f1 = self.merit(&trial, tl);
                    if f1.is_finite() && f1 < f0 {
                        let stalled = f0 - f1 <= 1e-14 * f0;
                        lnpsi = trial;
                        lam = tl;
                        damping = (damping / 3.0).max(1e-15);
                        if stalled && rmax <= 1e-9 {
                            return Some((lnpsi, lam, it));
                        }
                        break;
                    }
                }
                damping *= 4.0;
                if damping > 1e12 {
                    return (rmax <= 1e-9).then_some((lnpsi, lam, it));
                }
            }
        }
        None
    }
}

/// `μ(g, τ) = inf Ψ(h, τ)` over unit-mass `h`.
///
/// Damped Gauss–Newton on the Euler–Lagrange system in `ln ψ`, started from the bottom
/// eigenfunction of `−4Δ + S` and from Gaussian bumps of width `√τ` at the
/// minimum of `S` and at four equally spaced points; the lowest converged
/// value is returned.
pub fn mu_w(geom: &WarpedGeometry, tau: f64) -> Result<MinimizerResult> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let n = geom.n();
    let problem = LogSobolev {
        tau,
        a: conductance(geom),
        m: geom.cell_measure(),
        s: geom.adapted_scalar(),
        geom,
    };
    let mut starts: Vec<Vec<f64>> = vec![lambda_w(geom)?
        .eigenfunction
        .iter()
        .map(|v| v.ln())
        .collect()];
    let s_min = (0..n)
        .min_by(|&a, &b| problem.s[a].total_cmp(&problem.s[b]))
        .unwrap();
    let mut centers = vec![s_min];
    centers.extend((0..4).map(|k| k * n / 4).filter(|c| *c != s_min));
    for c in centers {
        let d = geom.distances_from(c);
        starts.push(d.iter().map(|d| -d * d / (8.0 * tau)).collect());
    }

    let mut best: Option<MinimizerResult> = None;
    let mut converged = 0;
    let mut last_failure = String::new();
    for start in &starts {
        let Some((lnpsi, lam, iters)) = problem.solve(start.clone()) else {
            last_failure = "line search stalled or iteration cap reached".into();
            continue;
        };
        converged += 1;
        let half_log = 0.5 * N_BASE * (4.0 * PI * tau).ln();
        let h_min: Vec<f64> = lnpsi.iter().map(|v| -2.0 * v - half_log).collect();
        let value = entropy_psiw(geom, &h_min, tau)?;
        let (r, _) = problem.residual(&lnpsi, lam);
        // R_i = τ(−4Δψ/ψ + S) + h_i − n − μ once Λ = μ + ½ ln(4πτ)
        let mu_from_lam = lam - half_log;
        let resid = r
            .iter()
            .map(|v| (v + mu_from_lam - value).abs())
            .fold(0.0, f64::max);
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(MinimizerResult {
                h_min,
                value,
                euler_lagrange_residual: resid,
                iterations: iters,
                starts: starts.len(),
                converged_starts: 0,
            });
        }
    }
    match best {
        Some(mut b) => {
            b.converged_starts = converged;
            Ok(b)
        }
        None => Err(Error::Solver(format!(
            "entropy minimization at tau = {tau} failed from all {} starts: {last_failure}",
            starts.len()
        ))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MuMonotonicityReport {
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    pub mus: Vec<f64>,
    pub defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `μ(g(t), τ(t))` with `τ(t) = tau_last + t_last − t` at the snapshots
/// nearest `times`; passes if nondecreasing within `tolerance`.
pub fn mu_monotonicity_check(
    traj: &FlowTrajectory,
    times: &[f64],
    tau_last: f64,
    tolerance: f64,
) -> Result<MuMonotonicityReport> {
    if times.len() < 4 {
        return Err(Error::config("monotonicity check needs at least 4 times"));
    }
    let mut idx: Vec<usize> = times.iter().map(|t| traj.nearest_index(*t)).collect();
    idx.sort_unstable();
    idx.dedup();
    let t_last = traj.snapshots[*idx.last().unwrap()].time;
    let mut out = MuMonotonicityReport {
        times: Vec::new(),
        taus: Vec::new(),
        mus: Vec::new(),
        defect: 0.0,
        tolerance,
        pass: false,
    };
    for k in idx {
        let g = &traj.snapshots[k];
        let tau = tau_last + t_last - g.time;
        out.mus.push(mu_w(g, tau)?.value);
        out.times.push(g.time);
        out.taus.push(tau);
    }
    out.defect = monotonicity_defect(&out.mus, true);
    out.pass = out.defect <= tolerance;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct NuSweep {
    pub taus: Vec<f64>,
    pub mus: Vec<f64>,
    /// Smallest sampled value; not a claim about the infimum over all `τ`.
    pub min: f64,
}

pub fn nu_w_sweep(geom: &WarpedGeometry, taus: &[f64]) -> Result<NuSweep> {
    if taus.is_empty() {
        return Err(Error::config("empty tau grid"));
    }
    let mus = taus
        .iter()
        .map(|t| mu_w(geom, *t).map(|r| r.value))
        .collect::<Result<Vec<_>>>()?;
    let min = mus.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(NuSweep {
        taus: taus.to_vec(),
        mus,
        min,
    })
}

/// `μ(τ → 0)` by a quadratic fit through a sweep.
pub fn small_tau_mu_limit(sweep: &NuSweep) -> f64 {
    crate::grid::polyfit_eval(&sweep.taus, &sweep.mus, 2.min(sweep.taus.len() - 1), 0.0)
}

fn time_derivative(tm: f64, t0: f64, tp: f64, fm: f64, f0: f64, fp: f64) -> f64 {
    let (a, b) = (t0 - tm, tp - t0);
    -b / (a * (a + b)) * fm + (b - a) / (a * b) * f0 + a / (b * (a + b)) * fp
}

/// `(Δw − ⟨∇w, ∇h⟩, 𝒮 + Hess h)` pointwise; on the base `𝒮 = −|∇w|²` and
/// `Hess h = Δh` along the unit tangent.
fn soliton_terms(geom: &WarpedGeometry, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = geom.adapted_potential();
    let gw = geom.gradient(&w);
    let lw = geom.laplacian(&w);
    let gh = geom.gradient(h);
    let lh = geom.laplacian(h);
    let coupling = (0..geom.n()).map(|i| lw[i] - gw[i] * gh[i]).collect();
    let tensor = (0..geom.n()).map(|i| -gw[i] * gw[i] + lh[i]).collect();
    (coupling, tensor)
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeIdentityReport {
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    pub energy: Vec<f64>,
    pub entropy: Vec<f64>,
    /// `|dF/dt − 2∫(|𝒮 + Hess h|² + |Δw − ∇w∇h|²)e^{−h}dμ|`, NaN outside the window.
    pub energy_residual: Vec<f64>,
    /// Same for `Ψ` against `2τ∫(|𝒮 + Hess h − g/2τ|² + |Δw − ∇w∇h|²)H dμ`.
    pub entropy_residual: Vec<f64>,
    pub max_energy_residual: f64,
    pub max_entropy_residual: f64,
    pub tau_min: f64,
}

/// `F` and `Ψ` along a conjugate kernel and the residuals of their time
/// derivatives against the sum-of-squares integrands, on levels with
/// `τ ≥ tau_min`. The `p|Δu − ∇u∇h|²` term is `|Δw − ∇w∇h|²` in terms of
/// `w = √p ln f`.
pub fn derivative_identities(
    h_sol: &ConjugateHeatSolution,
    tau_min: f64,
) -> Result<DerivativeIdentityReport> {
    let levels = h_sol.levels();
    let mut energy = Vec::with_capacity(levels);
    let mut entropy = Vec::with_capacity(levels);
    let mut times = Vec::with_capacity(levels);
    let mut taus = Vec::with_capacity(levels);
    for k in 0..levels {
        let g = h_sol.geometry(k);
        let tau = h_sol.tau(k);
        let mass = g.integral(&h_sol.kernel[k]);
        let hf: Vec<f64> = h_sol.kernel[k].iter().map(|v| -(v / mass).ln()).collect();
        energy.push(energy_fw(g, &hf)?);
        entropy.push(entropy_psiw(g, &h_sol.log_density[k], tau)?);
        times.push(g.time);
        taus.push(tau);
    }
    let mut energy_residual = vec![f64::NAN; levels];
    let mut entropy_residual = vec![f64::NAN; levels];
    for k in 1..levels.saturating_sub(1) {
        if taus[k] < tau_min - 1e-12 {
            continue;
        }
        let g = h_sol.geometry(k);
        let big = &h_sol.kernel[k];
        let h = &h_sol.log_density[k];
        let tau = taus[k];
        let (coupling, tensor) = soliton_terms(g, h);
        let f_integrand: Vec<f64> = (0..g.n())
            .map(|i| 2.0 * (tensor[i] * tensor[i] + coupling[i] * coupling[i]) * big[i])
            .collect();
        let p_integrand: Vec<f64> = (0..g.n())
            .map(|i| {
                let t = tensor[i] - 0.5 / tau;
                2.0 * tau * (t * t + coupling[i] * coupling[i]) * big[i]
            })
            .collect();
        let (tm, t0, tp) = (times[k - 1], times[k], times[k + 1]);
        let df = time_derivative(tm, t0, tp, energy[k - 1], energy[k], energy[k + 1]);
        let dpsi = time_derivative(tm, t0, tp, entropy[k - 1], entropy[k], entropy[k + 1]);
        energy_residual[k] = (df - g.integral(&f_integrand)).abs();
        entropy_residual[k] = (dpsi - g.integral(&p_integrand)).abs();
    }
    let fold = |v: &[f64]| {
        v.iter()
            .filter(|x| x.is_finite())
            .fold(0.0f64, |a, b| a.max(*b))
    };
    if energy_residual.iter().all(|v| v.is_nan()) {
        return Err(Error::config(
            "no interior kernel level with tau >= tau_min",
        ));
    }
    Ok(DerivativeIdentityReport {
        max_energy_residual: fold(&energy_residual),
        max_entropy_residual: fold(&entropy_residual),
        times,
        taus,
        energy,
        entropy,
        energy_residual,
        entropy_residual,
        tau_min,
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BaseWholeReport {
    /// Unit-mass normalization `H = e^{−h}`.
    pub max_base_unit: f64,
    pub max_whole_unit: f64,
    pub max_gap_unit: f64,
    /// Heat-kernel normalization `H = (4πτ)^{−n/2} e^{−h}`.
    pub max_base_kernel: f64,
    pub max_whole_kernel: f64,
    pub max_gap_kernel: f64,
    pub levels: usize,
}

/// Residuals of the base equation for `h` and of the total-space equation for
/// `h̄ = h + pu` (or `h + pu − (p/2) ln 4πτ`), on an ungauged kernel. `∂t h̄` is
/// assembled from `∂t h` and the flow velocity of `u`, so the two residuals
/// agree up to round-off.
pub fn base_whole_consistency(
    h_sol: &ConjugateHeatSolution,
    tau_min: f64,
) -> Result<BaseWholeReport> {
    if h_sol.trajectory.system != Gauge::Ungauged {
        return Err(Error::config(
            "base/total-space comparison needs an ungauged trajectory",
        ));
    }
    let mut rep = BaseWholeReport::default();
    let levels = h_sol.levels();
    let kernel_h = |k: usize| h_sol.log_density[k].clone();
    let unit_h = |k: usize| -> Vec<f64> {
        let shift = 0.5 * N_BASE * (4.0 * PI * h_sol.tau(k)).ln();
        h_sol.log_density[k].iter().map(|v| v + shift).collect()
    };
    for k in 1..levels.saturating_sub(1) {
        let tau = h_sol.tau(k);
        if tau < tau_min - 1e-12 {
            continue;
        }
        rep.levels += 1;
        let g = h_sol.geometry(k);
        let n = g.n();
        let p = g.p as f64;
        let u = g.log_warp();
        let (_, u_t) = velocity(g);
        let s = g.adapted_scalar();
        let r_m = g.scalar_curvature_log_form();
        let gu = g.gradient(&u);
        let (tm, t0, tp) = (
            h_sol.geometry(k - 1).time,
            g.time,
            h_sol.geometry(k + 1).time,
        );
        for kernel_form in [false, true] {
            let field = |j: usize| if kernel_form { kernel_h(j) } else { unit_h(j) };
            let (hm, h0, hp) = (field(k - 1), field(k), field(k + 1));
            let h_t: Vec<f64> = (0..n)
                .map(|i| time_derivative(tm, t0, tp, hm[i], h0[i], hp[i]))
                .collect();
            let (extra_base, extra_whole, shift, shift_t) = if kernel_form {
                (
                    N_BASE / (2.0 * tau),
                    (N_BASE + p) / (2.0 * tau),
                    -0.5 * p * (4.0 * PI * tau).ln(),
                    0.5 * p / tau,
                )
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            let gh = g.gradient(&h0);
            let lh = g.laplacian(&h0);
            let hbar: Vec<f64> = (0..n).map(|i| h0[i] + p * u[i] + shift).collect();
            let hbar_t: Vec<f64> = (0..n).map(|i| h_t[i] + p * u_t[i] + shift_t).collect();
            let ghb = g.gradient_norm_sq(&hbar);
            let lmhb = g.warped_laplacian(&hbar)?;
            let mut worst = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                let base = h_t[i] - (-s[i] - lh[i] + gh[i] * (gh[i] + p * gu[i]) + extra_base);
                let whole = hbar_t[i] - (ghb[i] - lmhb[i] - r_m[i] + extra_whole);
                worst.0 = worst.0.max(base.abs());
                worst.1 = worst.1.max(whole.abs());
                worst.2 = worst.2.max((base - whole).abs());
            }
            let slot = if kernel_form {
                (
                    &mut rep.max_base_kernel,
                    &mut rep.max_whole_kernel,
                    &mut rep.max_gap_kernel,
                )
            } else {
                (
                    &mut rep.max_base_unit,
                    &mut rep.max_whole_unit,
                    &mut rep.max_gap_unit,
                )
            };
            *slot.0 = slot.0.max(worst.0);
            *slot.1 = slot.1.max(worst.1);
            *slot.2 = slot.2.max(worst.2);
        }
    }
    if rep.levels == 0 {
        return Err(Error::config(
            "no interior kernel level with tau >= tau_min",
        ));
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct StrangeBehaviorReport {
    pub taus: Vec<f64>,
    /// Total-space entropy of `H̃ = H̄ / V(F)`.
    pub psi_tilde: Vec<f64>,
    /// Total-space entropy of `H̄ = H e^{−pu}`.
    pub psi_bar: Vec<f64>,
    /// `max |Ψ(h̃) − Ψ(h̄)/V(F) − ln V(F)|`.
    pub identity_residual: f64,
    /// Slope of `Ψ(h̃)` against `ln(1/τ)`.
    pub slope: f64,
    pub expected_slope: f64,
}

/// Total-space entropies of the lifted kernel at the stored levels nearest
/// `taus`, evaluated by integrating over the fiber analytically.
pub fn strangebehavior_probe(
    h_sol: &ConjugateHeatSolution,
    v_f: f64,
    taus: &[f64],
) -> Result<StrangeBehaviorReport> {
    if taus.len() < 2 || !(v_f > 0.0) {
        return Err(Error::config(
            "need at least two tau samples and a positive fiber volume",
        ));
    }
    let mut out = StrangeBehaviorReport {
        taus: Vec::new(),
        psi_tilde: Vec::new(),
        psi_bar: Vec::new(),
        identity_residual: 0.0,
        slope: f64::NAN,
        expected_slope: 0.0,
    };
    for &target in taus {
        let k = (0..h_sol.levels())
            .min_by(|&a, &b| {
                (h_sol.tau(a) - target)
                    .abs()
                    .total_cmp(&(h_sol.tau(b) - target).abs())
            })
            .unwrap();
        let tau = h_sol.tau(k);
        let g = h_sol.geometry(k);
        let p = g.p as f64;
        let m_dim = N_BASE + p;
        out.expected_slope = 0.5 * p;
        let u = g.log_warp();
        let r_m = g.scalar_curvature_log_form();
        let h = &h_sol.log_density[k];
        let lift = (4.0 * PI * tau).ln();
        let h_tilde: Vec<f64> = (0..g.n())
            .map(|i| h[i] + p * u[i] + v_f.ln() - 0.5 * p * lift)
            .collect();
        let h_bar: Vec<f64> = h_tilde.iter().map(|v| v - v_f.ln()).collect();
        // ∫_M X (4πτ)^{−m/2} e^{−h̄} dμ_M = V(F) ∫_N X (4πτ)^{−m/2} e^{−h̄} e^{pu} dμ_N
        let entropy = |hb: &[f64], fiber: f64| -> f64 {
            let grad = g.gradient_norm_sq(hb);
            let vals: Vec<f64> = (0..g.n())
                .map(|i| {
                    let weight = fiber * (-0.5 * m_dim * lift - hb[i] + p * u[i]).exp();
                    (tau * (grad[i] + r_m[i]) + hb[i] - m_dim) * weight
                })
                .collect();
            g.integral(&vals)
        };
        let pt = entropy(&h_tilde, v_f);
        let pb = entropy(&h_bar, v_f);
        out.identity_residual = out
            .identity_residual
            .max((pt - (pb / v_f + v_f.ln())).abs());
        out.taus.push(tau);
        out.psi_tilde.push(pt);
        out.psi_bar.push(pb);
    }
    let xs: Vec<f64> = out.taus.iter().map(|t| (1.0 / t).ln()).collect();
    out.slope = fit_line(&xs, &out.psi_tilde).0;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolitonResidual {
    /// `‖𝒮 + Hess h − λg‖` in `L²(dμ)`.
    pub tensor: f64,
    /// `‖√p (Δu − ⟨∇u, ∇h⟩ + λ)‖` in `L²(dμ)`, with `u = ln f`.
    pub coupling: f64,
}

pub fn soliton_residual(geom: &WarpedGeometry, h: &[f64], lambda: f64) -> SolitonResidual {
    let (_, tensor) = soliton_terms(geom, h);
    let u = geom.log_warp();
    let lu = geom.laplacian(&u);
    let dot = geom.gradient_dot(&u, h);
    let p = geom.p as f64;
    let t2: Vec<f64> = tensor.iter().map(|t| (t - lambda).powi(2)).collect();
    let c2: Vec<f64> = (0..geom.n())
        .map(|i| p * (lu[i] - dot[i] + lambda).powi(2))
        .collect();
    SolitonResidual {
        tensor: geom.integral(&t2).sqrt(),
        coupling: geom.integral(&c2).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FunctionalRow {
    pub t: f64,
    pub tau: f64,
    pub f_w: f64,
    pub psi_w: f64,
    pub lambda_w: f64,
    pub mu_w: f64,
    pub df_residual: f64,
    pub dpsi_residual: f64,
}

/// Functional values at about `rows` evenly spaced kernel levels.
pub fn functional_series(
    h_sol: &ConjugateHeatSolution,
    rows: usize,
    tau_min: f64,
) -> Result<Vec<FunctionalRow>> {
    let ids = derivative_identities(h_sol, tau_min)?;
    let levels = h_sol.levels();
    let rows = rows.clamp(2, levels);
    let mut picks: Vec<usize> = (0..rows).map(|r| r * (levels - 1) / (rows - 1)).collect();
    picks.dedup();
    picks
        .into_iter()
        .map(|k| {
            let g = h_sol.geometry(k);
            Ok(FunctionalRow {
                t: ids.times[k],
                tau: ids.taus[k],
                f_w: ids.energy[k],
                psi_w: ids.entropy[k],
                lambda_w: lambda_w(g)?.value,
                mu_w: mu_w(g, ids.taus[k])?.value,
                df_residual: ids.energy_residual[k],
                dpsi_residual: ids.entropy_residual[k],
            })
        })
        .collect()
}
