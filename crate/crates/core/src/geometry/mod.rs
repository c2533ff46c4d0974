//! One time slice of a warped product `φ² dx² + e^{2 ln f} g_F` over a circle.

mod product;

pub use product::product_curvature_oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid1D;

/// How the stored exponent relates to the warping function `f`.
///
/// `Ungauged` stores `u = ln f`. `Gauged` stores `ũ = √p · ln f`, the
/// convention of the pulled-back flow in which `𝒮 = Rc − dũ⊗dũ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gauge {
    Gauged,
    Ungauged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpedGeometry {
    pub grid: Grid1D,
    pub phi: Vec<f64>,
    pub u: Vec<f64>,
    pub p: u32,
    pub time: f64,
    pub gauge: Gauge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOperators {
    pub gradient_norm_sq: Vec<f64>,
    pub laplacian: Vec<f64>,
    pub integral_dmu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureBundle {
    /// Scalar curvature of the total space.
    pub r_m: Vec<f64>,
    /// Coefficient of `g_F` in the Ricci tensor of the total space.
    pub rc_fiber_block: Vec<f64>,
    /// Adapted scalar `S = −p|∇ ln f|²`.
    pub s: Vec<f64>,
    /// Coordinate component `𝒮_xx = −(∂x ũ)²`.
    pub s_tensor_xx: Vec<f64>,
}

impl WarpedGeometry {
    pub fn new(
        grid: Grid1D,
        phi: Vec<f64>,
        u: Vec<f64>,
        p: u32,
        time: f64,
        gauge: Gauge,
    ) -> Result<Self> {
        grid.check_field(&phi)?;
        grid.check_field(&u)?;
        if p == 0 {
            return Err(Error::config("fiber dimension p must be positive"));
        }
        let geom = Self {
            grid,
            phi,
            u,
            p,
            time,
            gauge,
        };
        geom.check_nondegenerate(0.0)?;
        if geom.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { time });
        }
        Ok(geom)
    }

    /// Flat circle of the grid's coordinate length with constant exponent.
    pub fn flat(grid: Grid1D, p: u32, gauge: Gauge) -> Self {
        let n = grid.len();
        Self {
            grid,
            phi: vec![1.0; n],
            u: vec![0.0; n],
            p,
            time: 0.0,
            gauge,
        }
    }

    /// Errors unless `φ > floor` at every point.
    pub fn check_nondegenerate(&self, floor: f64) -> Result<()> {
        for (index, &value) in self.phi.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NumericalBlowup { time: self.time });
            }
            if value <= floor {
                return Err(Error::DegenerateMetric {
                    index,
                    value,
                    floor,
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn sqrt_p(&self) -> f64 {
        (self.p as f64).sqrt()
    }

    /// `ln f` regardless of the storage convention.
    pub fn log_warp(&self) -> Vec<f64> {
        match self.gauge {
            Gauge::Ungauged => self.u.clone(),
            Gauge::Gauged => {
                let s = self.sqrt_p();
                self.u.iter().map(|v| v / s).collect()
            }
        }
    }

    /// `w = √p · ln f`, the potential entering `S = −|∇w|²` and `𝒮`.
    pub fn adapted_potential(&self) -> Vec<f64> {
        match self.gauge {
            Gauge::Gauged => self.u.clone(),
            Gauge::Ungauged => {
                let s = self.sqrt_p();
                self.u.iter().map(|v| v * s).collect()
            }
        }
    }

    pub fn warp(&self) -> Vec<f64> {
        self.log_warp().iter().map(|v| v.exp()).collect()
    }

    /// Same geometry with the exponent stored in the other convention.
    pub fn convert(&self, gauge: Gauge) -> Self {
        let mut out = self.clone();
        out.u = match gauge {
            Gauge::Ungauged => self.log_warp(),
            Gauge::Gauged => self.adapted_potential(),
        };
        out.gauge = gauge;
        out
    }

    /// Cell measure `φ_i · spacing`.
    pub fn cell_measure(&self) -> Vec<f64> {
        let h = self.grid.spacing();
        self.phi.iter().map(|p| p * h).collect()
    }

    pub fn integral(&self, field: &[f64]) -> f64 {
        let h = self.grid.spacing();
        field.iter().zip(&self.phi).map(|(f, p)| f * p * h).sum()
    }

    pub fn total_length(&self) -> f64 {
        self.phi.iter().sum::<f64>() * self.grid.spacing()
    }

    /// Metric derivative `∂x f / φ` by centered differences.
    pub fn gradient(&self, field: &[f64]) -> Vec<f64> {
        let d = self.grid.d1(field);
        d.iter().zip(&self.phi).map(|(d, p)| d / p).collect()
    }

    pub fn gradient_norm_sq(&self, field: &[f64]) -> Vec<f64> {
        self.gradient(field).iter().map(|g| g * g).collect()
    }

    /// `⟨∇a, ∇b⟩` with centered differences.
    pub fn gradient_dot(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let da = self.grid.d1(a);
        let db = self.grid.d1(b);
        (0..self.n())
            .map(|i| da[i] * db[i] / (self.phi[i] * self.phi[i]))
            .collect()
    }

    /// `φ` at the half point `i + 1/2`.
    #[inline]
    pub fn phi_half(&self, i: usize) -> f64 {
        0.5 * (self.phi[i] + self.phi[self.grid.next(i)])
    }

    /// Conservative base Laplacian `(1/φ) ∂x((1/φ) ∂x f)`.
    pub fn laplacian(&self, field: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let h = g.spacing();
        let mut flux = vec![0.0; self.n()];
        for (i, fl) in flux.iter_mut().enumerate() {
            *fl = (field[g.next(i)] - field[i]) / (h * self.phi_half(i));
        }
        (0..self.n())
            .map(|i| (flux[i] - flux[g.prev(i)]) / (self.phi[i] * h))
            .collect()
    }

    /// Hessian component `(Hess f)_xx = ∂x∂x f − (∂xφ/φ) ∂x f`.
    pub fn hessian_xx(&self, field: &[f64]) -> Vec<f64> {
        let d1 = self.grid.d1(field);
        let d2 = self.grid.d2(field);
        let dphi = self.grid.d1(&self.phi);
        (0..self.n())
            .map(|i| d2[i] - dphi[i] / self.phi[i] * d1[i])
            .collect()
    }

    pub fn base_operators(&self, field: &[f64]) -> Result<BaseOperators> {
        self.grid.check_field(field)?;
        Ok(BaseOperators {
            gradient_norm_sq: self.gradient_norm_sq(field),
            laplacian: self.laplacian(field),
            integral_dmu: self.integral(field),
        })
    }

    /// `Δ_N field + p ⟨∇ ln f, ∇ field⟩`.
    pub fn warped_laplacian(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.grid.check_field(field)?;
        let lap = self.laplacian(field);
        let lnf = self.log_warp();
        let dot = self.gradient_dot(&lnf, field);
        let p = self.p as f64;
        Ok(lap.iter().zip(&dot).map(|(l, d)| l + p * d).collect())
    }

    /// `S = −|∇w|²` (the base is one-dimensional, so `R_N = 0`).
    pub fn adapted_scalar(&self) -> Vec<f64> {
        self.gradient_norm_sq(&self.adapted_potential())
            .into_iter()
            .map(|g| -g)
            .collect()
    }

    pub fn warped_curvatures(&self) -> Result<CurvatureBundle> {
        self.check_nondegenerate(0.0)?;
        let p = self.p as f64;
        let f = self.warp();
        let lap_f = self.laplacian(&f);
        let grad_f = self.gradient_norm_sq(&f);
        let r_m = (0..self.n())
            .map(|i| -2.0 * p * lap_f[i] / f[i] - p * (p - 1.0) * grad_f[i] / (f[i] * f[i]))
            .collect();
        let rc_fiber_block = (0..self.n())
            .map(|i| -(f[i] * lap_f[i] + (p - 1.0) * grad_f[i]))
            .collect();
        let w = self.adapted_potential();
        let s_tensor_xx = self.grid.d1(&w).iter().map(|d| -d * d).collect();
        Ok(CurvatureBundle {
            r_m,
            rc_fiber_block,
            s: self.adapted_scalar(),
            s_tensor_xx,
        })
    }

    /// Scalar curvature of the total space written through `ln f`:
    /// `R_M = −2pΔ ln f − p(p+1)|∇ ln f|²`.
    pub fn scalar_curvature_log_form(&self) -> Vec<f64> {
        let p = self.p as f64;
        let lnf = self.log_warp();
        let lap = self.laplacian(&lnf);
        let grad = self.gradient_norm_sq(&lnf);
        (0..self.n())
            .map(|i| -2.0 * p * lap[i] - p * (p + 1.0) * grad[i])
            .collect()
    }

    /// Cumulative arc length from index 0 by the trapezoid rule.
    pub fn arc_positions(&self) -> Vec<f64> {
        let h = self.grid.spacing();
        let mut out = Vec::with_capacity(self.n());
        let mut acc = 0.0;
        for i in 0..self.n() {
            out.push(acc);
            acc += 0.5 * h * (self.phi[i] + self.phi[self.grid.next(i)]);
        }
        out
    }

    /// Distances from `y_index` to every grid point.
    pub fn distances_from(&self, y_index: usize) -> Vec<f64> {
        let arc = self.arc_positions();
        let total = self.total_length();
        arc.iter()
            .map(|a| {
                let d = (a - arc[y_index]).abs();
                d.min(total - d)
            })
            .collect()
    }

    pub fn geodesic_distance(&self, x_index: usize, y_index: usize) -> f64 {
        let arc = self.arc_positions();
        let d = (arc[x_index] - arc[y_index]).abs();
        d.min(self.total_length() - d)
    }
}

/// Linear interpolation of a periodic grid field at fractional index `pos`.
pub fn interp_periodic(field: &[f64], pos: f64) -> f64 {
    let n = field.len();
    let fl = pos.floor();
    let t = pos - fl;
    let i = (fl as isize).rem_euclid(n as isize) as usize;
    let j = (i + 1) % n;
    (1.0 - t) * field[i] + t * field[j]
}
