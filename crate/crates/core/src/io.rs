//! Run-directory persistence. Reals are written with 17 significant digits
//! so reruns of the same configuration are byte-identical.

use std::fs::File;
use std::path::Path;

use serde::Serialize;

use crate::conjugate::ConjugateHeatSolution;
use crate::error::{Error, Result};
use crate::flow::{FlowTrajectory, IntegratorConfig};
use crate::functionals::FunctionalRow;
use crate::geometry::Gauge;
use crate::grid::Grid1D;
use crate::reduced::ReducedDistanceField;
use crate::scenario::SCHEMA_VERSION;

pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

/// About `max_rows` evenly strided indices out of `0..len`, always keeping
/// the first and the last.
pub fn strided(len: usize, max_rows: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let stride = len.div_ceil(max_rows.max(2) - 1).max(1);
    let mut out: Vec<usize> = (0..len).step_by(stride).collect();
    if *out.last().unwrap() != len - 1 {
        out.push(len - 1);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub system_tag: Gauge,
    pub grid: Grid1D,
    pub p: u32,
    #[serde(rename = "V_F")]
    pub v_f: f64,
    pub integrator: IntegratorConfig,
    pub dt_policy: String,
    pub steps: usize,
    pub min_dt: f64,
    pub max_dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub level: u32,
    pub snapshot_rows: Vec<usize>,
}

impl Manifest {
    pub fn new(
        name: &str,
        traj: &FlowTrajectory,
        v_f: f64,
        seed: u64,
        level: u32,
        max_rows: usize,
    ) -> Self {
        let g = traj.first();
        let fold =
            |init: f64, f: fn(f64, f64) -> f64| traj.dt_sequence.iter().copied().fold(init, f);
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            system_tag: traj.system,
            grid: g.grid,
            p: g.p,
            v_f,
            integrator: traj.config,
            dt_policy: format!("{:?}", traj.config.dt_policy),
            steps: traj.dt_sequence.len(),
            min_dt: fold(f64::INFINITY, f64::min),
            max_dt: fold(0.0, f64::max),
            t_final: traj.last().time,
            seed,
            level,
            snapshot_rows: strided(traj.len(), max_rows),
        }
    }
}

/// `t, x_index, phi, u` at strided snapshots.
pub fn write_snapshots(path: &Path, traj: &FlowTrajectory, max_rows: usize) -> Result<()> {
    let mut w = writer(path, &["t", "x_index", "phi", "u"])?;
    for k in strided(traj.len(), max_rows) {
        let g = &traj.snapshots[k];
        for i in 0..g.n() {
            w.write_record([real(g.time), i.to_string(), real(g.phi[i]), real(g.u[i])])?;
        }
    }
    finish(w, path)
}

pub fn conjugate_file_name(y_index: usize, t_final: f64) -> String {
    format!("conjugate_{y_index}_{t_final}.csv")
}

pub fn reduced_file_name(y_index: usize, t_final: f64) -> String {
    format!("reduced_{y_index}_{t_final}.csv")
}

/// `t, x_index, H, h` at strided kernel levels.
pub fn write_conjugate(path: &Path, sol: &ConjugateHeatSolution, max_rows: usize) -> Result<()> {
    let mut w = writer(path, &["t", "x_index", "H", "h"])?;
    for k in strided(sol.levels(), max_rows) {
        let t = sol.geometry(k).time;
        for i in 0..sol.kernel[k].len() {
            w.write_record([
                real(t),
                i.to_string(),
                real(sol.kernel[k][i]),
                real(sol.log_density[k][i]),
            ])?;
        }
    }
    finish(w, path)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HarnackRow {
    pub t: f64,
    pub max_v: f64,
    /// NaN where the identity is not evaluated.
    pub identity_residual: f64,
    pub rho: f64,
}

pub fn write_harnack_report(path: &Path, rows: &[HarnackRow]) -> Result<()> {
    let mut w = writer(path, &["t", "max_v", "identity_residual", "rho"])?;
    for r in rows {
        w.write_record([
            real(r.t),
            real(r.max_v),
            real(r.identity_residual),
            real(r.rho),
        ])?;
    }
    finish(w, path)
}

/// `tau, x_index, ell, policy_predecessor`; the predecessor is
/// `slice · n + index`, or −1 at the root and at unreached nodes.
pub fn write_reduced(path: &Path, field: &ReducedDistanceField) -> Result<()> {
    let mut w = writer(path, &["tau", "x_index", "ell", "policy_predecessor"])?;
    for j in 0..field.taus.len() {
        for i in 0..field.ell[j].len() {
            let pred = field
                .predecessor_id(j, i)
                .map_or_else(|| "-1".to_string(), |v| v.to_string());
            w.write_record([
                real(field.taus[j]),
                i.to_string(),
                real(field.ell[j][i]),
                pred,
            ])?;
        }
    }
    finish(w, path)
}

pub fn write_functionals(path: &Path, rows: &[FunctionalRow]) -> Result<()> {
    let mut w = writer(
        path,
        &[
            "t",
            "tau",
            "F_w",
            "Psi_w",
            "lambda_w",
            "mu_w",
            "dF_residual",
            "dPsi_residual",
        ],
    )?;
    for r in rows {
        w.write_record([
            real(r.t),
            real(r.tau),
            real(r.f_w),
            real(r.psi_w),
            real(r.lambda_w),
            real(r.mu_w),
            real(r.df_residual),
            real(r.dpsi_residual),
        ])?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_keeps_both_ends() {
        assert_eq!(strided(5, 101), vec![0, 1, 2, 3, 4]);
        let s = strided(1000, 11);
        assert_eq!(s.first(), Some(&0));
        assert_eq!(s.last(), Some(&999));
        assert!(s.len() <= 12);
        assert!(strided(0, 10).is_empty());
        assert_eq!(strided(1, 10), vec![0]);
    }

    #[test]
    fn reals_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            assert_eq!(real(v).parse::<f64>().unwrap(), v);
        }
    }
}
