//! Scenario configuration: grid, initial data from a fixed expression
//! catalog, integrator settings and the checks to run.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::IntegratorConfig;
use crate::geometry::{Gauge, WarpedGeometry};
use crate::grid::Grid1D;

pub const SCHEMA_VERSION: u32 = 1;

/// Initial-data expressions. There is deliberately no general parser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expr {
    Constant {
        value: f64,
    },
    /// `a·sin(kx) + b`
    Sine {
        a: f64,
        k: i32,
        b: f64,
    },
    /// `1 + ε·cos(mx)`
    CosineBump {
        eps: f64,
        m: i32,
    },
}

impl Expr {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Expr::Constant { value } => value,
            Expr::Sine { a, k, b } => a * (k as f64 * x).sin() + b,
            Expr::CosineBump { eps, m } => 1.0 + eps * (m as f64 * x).cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Flow,
    Conjugate,
    Harnack,
    Reduced,
    Functionals,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Flow,
        Stage::Conjugate,
        Stage::Harnack,
        Stage::Reduced,
        Stage::Functionals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Conjugate => "conjugate",
            Stage::Harnack => "harnack",
            Stage::Reduced => "reduced",
            Stage::Functionals => "functionals",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_points: usize,
    #[serde(default = "two_pi")]
    pub coordinate_length: f64,
}

fn two_pi() -> f64 {
    2.0 * PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub grid: GridSpec,
    pub p: u32,
    /// Fiber volume `V(F)`; only the total-space entropy conversion uses it.
    #[serde(default = "one")]
    pub v_f: f64,
    /// Metric factor `φ` at `t = 0`.
    pub phi: Expr,
    /// `ln f` at `t = 0`.
    pub u: Expr,
    pub system: Gauge,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    /// Final time `T` of the conjugate kernels; also the flow length.
    pub t_final: f64,
    #[serde(default = "default_centers")]
    pub centers: Vec<usize>,
    /// Lower end of the `τ` window for refinement-calibrated checks
    /// (default `T/2`).
    #[serde(default)]
    pub tau_min: Option<f64>,
    #[serde(default = "default_slices")]
    pub reduced_slices: usize,
    #[serde(default = "default_mu_taus")]
    pub mu_sweep_taus: Vec<f64>,
    #[serde(default = "default_strange_taus")]
    pub strange_taus: Vec<f64>,
    #[serde(default = "default_rows")]
    pub functional_rows: usize,
    /// Time rows kept in the snapshot and kernel CSVs.
    #[serde(default = "default_csv_rows")]
    pub csv_time_rows: usize,
    #[serde(default = "default_checks")]
    pub checks: Vec<Stage>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_centers() -> Vec<usize> {
    vec![0]
}
fn default_slices() -> usize {
    64
}
fn default_mu_taus() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_strange_taus() -> Vec<f64> {
    vec![0.08, 0.04, 0.02, 0.01]
}
fn default_rows() -> usize {
    9
}
fn default_csv_rows() -> usize {
    101
}
fn default_checks() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let grid = self.grid()?;
        if self.p == 0 {
            return Err(Error::config("p must be positive"));
        }
        if !(self.v_f > 0.0) {
            return Err(Error::config("v_f must be positive"));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::config("t_final must be positive"));
        }
        self.integrator.validate()?;
        if self.centers.is_empty() || self.centers.iter().any(|&c| c >= grid.len()) {
            return Err(Error::config("centers must be non-empty grid indices"));
        }
        let tau_min = self.tau_min();
        if !(tau_min > 0.0 && tau_min < self.t_final) {
            return Err(Error::config("tau_min must lie in (0, t_final)"));
        }
        if self
            .mu_sweep_taus
            .iter()
            .chain(&self.strange_taus)
            .any(|t| !(*t > 0.0))
        {
            return Err(Error::config("tau samples must be positive"));
        }
        let phi0 = grid.sample(|x| self.phi.eval(x));
        if phi0.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("initial phi must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.grid.n_points, self.grid.coordinate_length)
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min.unwrap_or(0.5 * self.t_final)
    }

    /// Integrator settings with the flow length tied to `t_final`.
    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            t_end: self.t_final,
            ..self.integrator
        }
    }

    pub fn initial_geometry(&self) -> Result<WarpedGeometry> {
        let grid = self.grid()?;
        WarpedGeometry::new(
            grid,
            grid.sample(|x| self.phi.eval(x)),
            grid.sample(|x| self.u.eval(x)),
            self.p,
            0.0,
            Gauge::Ungauged,
        )
    }

    /// Copy with the spacing halved `level` times.
    pub fn at_level(&self, level: u32) -> Self {
        let mut out = self.clone();
        out.grid.n_points <<= level;
        out.centers.iter_mut().for_each(|c| *c <<= level);
        out
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.checks.contains(&stage)
    }

    /// A constant initial exponent on a constant metric: the flow is static
    /// and the flat-circle image-sum kernel is exact.
    pub fn is_flat_static(&self) -> bool {
        matches!(self.phi, Expr::Constant { value } if value == 1.0)
            && matches!(self.u, Expr::Constant { .. })
            && (self.grid.coordinate_length - 2.0 * PI).abs() < 1e-12
    }

    pub fn preset(name: &str) -> Result<Self> {
        let base = |name: &str, p: u32, u: Expr| ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            grid: GridSpec {
                n_points: 256,
                coordinate_length: two_pi(),
            },
            p,
            v_f: 1.0,
            phi: Expr::Constant { value: 1.0 },
            u,
            system: Gauge::Gauged,
            integrator: IntegratorConfig::with_t_end(0.5),
            t_final: 0.5,
            centers: default_centers(),
            tau_min: None,
            reduced_slices: default_slices(),
            mu_sweep_taus: default_mu_taus(),
            strange_taus: default_strange_taus(),
            functional_rows: default_rows(),
            csv_time_rows: default_csv_rows(),
            checks: default_checks(),
            seed: 7,
        };
        let sine = Expr::Sine {
            a: 0.3,
            k: 1,
            b: 0.0,
        };
        match name {
            "flat-static" => Ok(base(name, 1, Expr::Constant { value: 0.0 })),
            "coupled-p1" => Ok(base(name, 1, sine)),
            "coupled-p2" => {
                let mut c = base(name, 2, sine);
                c.system = Gauge::Ungauged;
                c.v_f = 4.0 * PI;
                Ok(c)
            }
            other => Err(Error::config(format!(
                "unknown preset `{other}` (known: flat-static, coupled-p1, coupled-p2)"
            ))),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["flat-static", "coupled-p1", "coupled-p2"];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in ScenarioConfig::PRESETS {
            let cfg = ScenarioConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        }
        assert!(ScenarioConfig::preset("spherical").is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let text = r#"{
            "schema_version": 1, "name": "m", "grid": {"n_points": 64}, "p": 1,
            "phi": {"kind": "constant", "value": 1.0},
            "u": {"kind": "cosine_bump", "eps": 0.1, "m": 2},
            "system": "ungauged", "t_final": 0.25
        }"#;
        let cfg = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(cfg.checks, Stage::ALL.to_vec());
        assert_eq!(cfg.tau_min(), 0.125);
        let g = cfg.initial_geometry().unwrap();
        assert!((g.u[0] - 1.1).abs() < 1e-15);
        assert!(!cfg.is_flat_static());
    }

    #[test]
    fn unknown_expression_is_rejected() {
        let text = r#"{
            "schema_version": 1, "name": "m", "grid": {"n_points": 64}, "p": 1,
            "phi": {"kind": "constant", "value": 1.0},
            "u": {"kind": "exp", "a": 1.0},
            "system": "gauged", "t_final": 0.25
        }"#;
        assert!(matches!(
            ScenarioConfig::from_json(text),
            Err(Error::Json(_))
        ));
        let bad_version = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(ScenarioConfig::from_json(&bad_version).is_err());
    }

    #[test]
    fn levels_refine_grid_and_centers() {
        let mut cfg = ScenarioConfig::preset("coupled-p1").unwrap();
        cfg.grid.n_points = 64;
        cfg.centers = vec![3];
        let fine = cfg.at_level(2);
        assert_eq!(fine.grid.n_points, 256);
        assert_eq!(fine.centers, vec![12]);
        let g = cfg.grid().unwrap();
        let gf = fine.grid().unwrap();
        assert!((g.x(3) - gf.x(12)).abs() < 1e-15);
    }
}
