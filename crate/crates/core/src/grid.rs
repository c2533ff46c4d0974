//! Uniform periodic grid on a circle and the finite-difference stencils used
//! everywhere else in the crate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform periodic 1-d grid. Index arithmetic wraps modulo `n_points`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    n_points: usize,
    coordinate_length: f64,
}

impl Grid1D {
    pub const MIN_POINTS: usize = 16;

    pub fn new(n_points: usize, coordinate_length: f64) -> Result<Self> {
        if n_points < Self::MIN_POINTS || n_points % 2 != 0 {
            return Err(Error::Grid(format!(
                "n_points must be even and >= {}, got {n_points}",
                Self::MIN_POINTS
            )));
        }
        if !(coordinate_length.is_finite() && coordinate_length > 0.0) {
            return Err(Error::Grid(format!(
                "coordinate_length must be positive, got {coordinate_length}"
            )));
        }
        Ok(Self {
            n_points,
            coordinate_length,
        })
    }

    /// Grid on `[0, 2π)`.
    pub fn circle(n_points: usize) -> Result<Self> {
        Self::new(n_points, 2.0 * PI)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_points
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn coordinate_length(&self) -> f64 {
        self.coordinate_length
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.coordinate_length / self.n_points as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Sample a function of the coordinate on the grid.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n_points).map(|i| f(self.x(i))).collect()
    }

    #[inline]
    pub fn next(&self, i: usize) -> usize {
        if i + 1 == self.n_points {
            0
        } else {
            i + 1
        }
    }

    #[inline]
    pub fn prev(&self, i: usize) -> usize {
        if i == 0 {
            self.n_points - 1
        } else {
            i - 1
        }
    }

    #[inline]
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n_points as isize) as usize
    }

    /// Signed index offset from `from` to `to` along the shorter way round.
    pub fn index_offset(&self, from: usize, to: usize) -> isize {
        let n = self.n_points as isize;
        let mut d = to as isize - from as isize;
        if d > n / 2 {
            d -= n;
        } else if d < -n / 2 {
            d += n;
        }
        d
    }

    pub fn check_field(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.n_points {
            return Err(Error::Dimension {
                expected: self.n_points,
                got: field.len(),
            });
        }
        Ok(())
    }

    /// Centered first difference `(f[i+1] - f[i-1]) / 2h`.
    pub fn d1(&self, f: &[f64]) -> Vec<f64> {
        let h2 = 2.0 * self.spacing();
        (0..self.n_points)
            .map(|i| (f[self.next(i)] - f[self.prev(i)]) / h2)
            .collect()
    }

    /// Centered second difference `(f[i+1] - 2 f[i] + f[i-1]) / h²`.
    pub fn d2(&self, f: &[f64]) -> Vec<f64> {
        let hh = self.spacing() * self.spacing();
        (0..self.n_points)
            .map(|i| (f[self.next(i)] - 2.0 * f[i] + f[self.prev(i)]) / hh)
            .collect()
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (slope, _) = fit_line(xs, ys);
    slope
}

/// Least-squares line `y = a x + b`, returned as `(a, b)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let a = sxy / sxx;
    (a, my - a * mx)
}

/// Least-squares polynomial of the given degree evaluated at `x0`.
pub fn polyfit_eval(xs: &[f64], ys: &[f64], degree: usize, x0: f64) -> f64 {
    let m = degree + 1;
    // normal equations; degrees here are tiny
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let pows: Vec<f64> = (0..m).map(|k| (x - x0).powi(k as i32)).collect();
        for r in 0..m {
            for c in 0..m {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][m] += pows[r] * y;
        }
    }
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    a[0][m] / a[0][0]
}

/// Observed convergence order from (spacing, error) pairs by log-log fit.
pub fn observed_order(spacings: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = spacings.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    fit_slope(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_odd_grids() {
        assert!(Grid1D::circle(8).is_err());
        assert!(Grid1D::circle(17).is_err());
        assert!(Grid1D::new(16, 0.0).is_err());
        assert!(Grid1D::circle(16).is_ok());
    }

    #[test]
    fn wraps_indices() {
        let g = Grid1D::circle(16).unwrap();
        assert_eq!(g.next(15), 0);
        assert_eq!(g.prev(0), 15);
        assert_eq!(g.wrap(-1), 15);
        assert_eq!(g.index_offset(1, 15), -2);
        assert_eq!(g.index_offset(15, 1), 2);
    }

    #[test]
    fn polyfit_recovers_quadratic() {
        let xs = [0.1, 0.2, 0.3, 0.5];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 3.0 * x + 0.5 * x * x).collect();
        assert!((polyfit_eval(&xs, &ys, 2, 0.0) - 2.0).abs() < 1e-12);
        assert!((polyfit_eval(&xs, &ys, 2, 1.0) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn order_of_pure_power_law() {
        let hs = [0.1, 0.05, 0.025];
        let es: Vec<f64> = hs.iter().map(|h| 3.0 * h * h).collect();
        assert!((observed_order(&hs, &es) - 2.0).abs() < 1e-12);
    }
}
