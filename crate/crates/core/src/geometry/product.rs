//! Scalar curvature of the assembled product metric `diag(φ², f², …, f²)`
//! computed from coordinate Christoffel symbols on a periodic product grid.

use crate::error::{Error, Result};

use super::WarpedGeometry;

const FIBER_POINTS: usize = 4;
const MAX_FIBER_DIM: u32 = 3;

struct ProductGrid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl ProductGrid {
    fn new(dims: Vec<usize>, spacing: Vec<f64>) -> Self {
        let mut strides = vec![1; dims.len()];
        for a in 1..dims.len() {
            strides[a] = strides[a - 1] * dims[a - 1];
        }
        let len = dims.iter().product();
        Self {
            dims,
            spacing,
            strides,
            len,
        }
    }

    fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.dims[axis]
    }

    fn shift(&self, idx: usize, axis: usize, delta: isize) -> usize {
        let c = self.coord(idx, axis) as isize;
        let d = self.dims[axis] as isize;
        let nc = (c + delta).rem_euclid(d) as usize;
        idx - self.coord(idx, axis) * self.strides[axis] + nc * self.strides[axis]
    }

    /// Centered derivative along `axis` of a scalar stored per node.
    fn diff(&self, field: &[f64], idx: usize, axis: usize) -> f64 {
        let fwd = field[self.shift(idx, axis, 1)];
        let bwd = field[self.shift(idx, axis, -1)];
        (fwd - bwd) / (2.0 * self.spacing[axis])
    }
}

fn invert(m: &[f64], d: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
            .unwrap();
        for k in 0..d {
            a.swap(col * d + k, piv * d + k);
            inv.swap(col * d + k, piv * d + k);
        }
        let pv = a[col * d + col];
        for k in 0..d {
            a[col * d + k] /= pv;
            inv[col * d + k] /= pv;
        }
        for r in 0..d {
            if r != col {
                let f = a[r * d + col];
                for k in 0..d {
                    a[r * d + k] -= f * a[col * d + k];
                    inv[r * d + k] -= f * inv[col * d + k];
                }
            }
        }
    }
    inv
}

/// Scalar curvature of the `(1+p)`-dimensional product metric, sampled on the
/// base grid. The fiber is a flat unit torus with 4 points per direction.
pub fn product_curvature_oracle(geom: &WarpedGeometry) -> Result<Vec<f64>> {
    if geom.p > MAX_FIBER_DIM {
        return Err(Error::config(format!(
            "product curvature oracle supports p <= {MAX_FIBER_DIM}, got {}",
            geom.p
        )));
    }
    geom.check_nondegenerate(0.0)?;
    let d = 1 + geom.p as usize;
    let n = geom.n();
    let mut dims = vec![n];
    let mut spacing = vec![geom.grid.spacing()];
    for _ in 0..geom.p {
        dims.push(FIBER_POINTS);
        spacing.push(1.0 / FIBER_POINTS as f64);
    }
    let pg = ProductGrid::new(dims, spacing);
    let f = geom.warp();

    // metric components g_ab per node, one field per (a, b)
    let mut g = vec![vec![0.0; pg.len]; d * d];
    for idx in 0..pg.len {
        let i = pg.coord(idx, 0);
        g[0][idx] = geom.phi[i] * geom.phi[i];
        for a in 1..d {
            g[a * d + a][idx] = f[i] * f[i];
        }
    }
    let mut ginv = vec![vec![0.0; d * d]; pg.len];
    for (idx, gi) in ginv.iter_mut().enumerate() {
        let m: Vec<f64> = (0..d * d).map(|k| g[k][idx]).collect();
        *gi = invert(&m, d);
    }

    // dg[c][a*d+b] = ∂_c g_ab
    let mut dg = vec![vec![vec![0.0; pg.len]; d * d]; d];
    for c in 0..d {
        for ab in 0..d * d {
            for idx in 0..pg.len {
                dg[c][ab][idx] = pg.diff(&g[ab], idx, c);
            }
        }
    }

    // gamma[k][i*d+j] = Γ^k_ij
    let mut gamma = vec![vec![vec![0.0; pg.len]; d * d]; d];
    for idx in 0..pg.len {
        for k in 0..d {
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for l in 0..d {
                        let gkl = ginv[idx][k * d + l];
                        if gkl == 0.0 {
                            continue;
                        }
                        s += gkl
                            * (dg[i][j * d + l][idx] + dg[j][i * d + l][idx]
                                - dg[l][i * d + j][idx]);
                    }
                    gamma[k][i * d + j][idx] = 0.5 * s;
                }
            }
        }
    }

    // R_ij = ∂_k Γ^k_ij − ∂_j Γ^k_ik + Γ^k_kl Γ^l_ij − Γ^k_jl Γ^l_ik, on fiber index 0
    let mut out = Vec::with_capacity(n);
    for i0 in 0..n {
        let idx = i0;
        let mut r = 0.0;
        for i in 0..d {
            for j in 0..d {
                let gij = ginv[idx][i * d + j];
                if gij == 0.0 {
                    continue;
                }
                let mut ric = 0.0;
                for k in 0..d {
                    ric += pg.diff(&gamma[k][i * d + j], idx, k);
                    ric -= pg.diff(&gamma[k][i * d + k], idx, j);
                    for l in 0..d {
                        ric += gamma[k][k * d + l][idx] * gamma[l][i * d + j][idx];
                        ric -= gamma[k][j * d + l][idx] * gamma[l][i * d + k][idx];
                    }
                }
                r += gij * ric;
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gauge;
    use crate::grid::Grid1D;

    fn geom(n: usize, p: u32, u: impl Fn(f64) -> f64) -> WarpedGeometry {
        let g = Grid1D::circle(n).unwrap();
        WarpedGeometry::new(g, vec![1.0; n], g.sample(u), p, 0.0, Gauge::Ungauged).unwrap()
    }

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_u_gives_zero() {
        let r = product_curvature_oracle(&geom(32, 2, |_| 0.3)).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn p1_matches_gauss_curvature_at_second_order() {
        let errs: Vec<f64> = [64, 128]
            .iter()
            .map(|&n| {
                let g = geom(n, 1, |x| (2.0 + x.sin()).ln());
                let r = product_curvature_oracle(&g).unwrap();
                let exact = g.grid.sample(|x| 2.0 * x.sin() / (2.0 + x.sin()));
                max_err(&r, &exact)
            })
            .collect();
        assert!(errs[1] < 2e-3, "{errs:?}");
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.5 && ratio < 4.5, "{errs:?}");
    }

    #[test]
    fn rejects_large_fibers() {
        assert!(product_curvature_oracle(&geom(16, 4, |_| 0.0)).is_err());
    }
}
