//! 3D Sobel gradient magnitude and the edge-aware L1 loss.
//!
//! Grids are flat slices with X fastest; public functions take dims as
//! `[nx, ny, nz]`. Borders use replicate padding and the stencils are not
//! normalized.

use crate::error::{Error, Result};

const DERIV: [f64; 3] = [-1.0, 0.0, 1.0];
const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// The three 3x3x3 Sobel stencils, indexed `[(oz+1)*9 + (oy+1)*3 + (ox+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelKernels {
    pub x: [f64; 27],
    pub y: [f64; 27],
    pub z: [f64; 27],
}

impl Default for SobelKernels {
    fn default() -> Self {
        Self::new()
    }
}

impl SobelKernels {
    pub fn new() -> Self {
        Self {
            x: stencil(0),
            y: stencil(1),
            z: stencil(2),
        }
    }

    pub fn axis(&self, axis: usize) -> &[f64; 27] {
        match axis {
            0 => &self.x,
            1 => &self.y,
            _ => &self.z,
        }
    }
}

fn stencil(axis: usize) -> [f64; 27] {
    let mut k = [0.0; 27];
    for oz in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let o = [ox, oy, oz];
                let mut w = 1.0;
                for (a, &idx) in o.iter().enumerate() {
                    w *= if a == axis { DERIV[idx] } else { SMOOTH[idx] };
                }
                k[oz * 9 + oy * 3 + ox] = w;
            }
        }
    }
    k
}

fn check_dims(d: [usize; 3]) -> Result<()> {
    if d.iter().any(|&n| n < 3) {
        return Err(Error::InvalidArgument(format!(
            "sobel needs every axis >= 3, got {d:?}"
        )));
    }
    Ok(())
}

#[inline]
fn clampi(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Apply one axis stencil; `d` is `[nz, ny, nx]`.
pub(crate) fn sobel_axis_into(d: [usize; 3], src: &[f64], axis: usize, out: &mut [f64]) -> Result<()> {
    check_dims(d)?;
    let k = stencil(axis);
    let [nz, ny, nx] = d;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for oz in 0..3 {
                    let zz = clampi(z as isize + oz as isize - 1, nz);
                    for oy in 0..3 {
                        let yy = clampi(y as isize + oy as isize - 1, ny);
                        let row = (zz * ny + yy) * nx;
                        for ox in 0..3 {
                            let w = k[oz * 9 + oy * 3 + ox];
                            if w != 0.0 {
                                acc += w * src[row + clampi(x as isize + ox as isize - 1, nx)];
                            }
                        }
                    }
                }
                out[(z * ny + y) * nx + x] = acc;
            }
        }
    }
    Ok(())
}

/// Transpose of [`sobel_axis_into`], accumulating into `dx`.
pub(crate) fn sobel_axis_adjoint_into(d: [usize; 3], g: &[f64], axis: usize, dx: &mut [f64]) {
    let k = stencil(axis);
    let [nz, ny, nx] = d;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let gv = g[(z * ny + y) * nx + x];
                if gv == 0.0 {
                    continue;
                }
                for oz in 0..3 {
                    let zz = clampi(z as isize + oz as isize - 1, nz);
                    for oy in 0..3 {
                        let yy = clampi(y as isize + oy as isize - 1, ny);
                        let row = (zz * ny + yy) * nx;
                        for ox in 0..3 {
                            let w = k[oz * 9 + oy * 3 + ox];
                            if w != 0.0 {
                                dx[row + clampi(x as isize + ox as isize - 1, nx)] += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn zyx(dims: [usize; 3]) -> [usize; 3] {
    [dims[2], dims[1], dims[0]]
}

fn check_len(dims: [usize; 3], data: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} need {n} values, got {}",
            data.len()
        )));
    }
    Ok(())
}

/// Per-axis Sobel responses `[gx, gy, gz]`.
pub fn sobel_gradients(dims: [usize; 3], data: &[f64]) -> Result<[Vec<f64>; 3]> {
    check_len(dims, data)?;
    let d = zyx(dims);
    let mut out = [vec![0.0; data.len()], vec![0.0; data.len()], vec![0.0; data.len()]];
    for (axis, o) in out.iter_mut().enumerate() {
        sobel_axis_into(d, data, axis, o)?;
    }
    Ok(out)
}

/// `sqrt(gx^2 + gy^2 + gz^2)` per voxel; output has the input's dims.
pub fn sobel_magnitude(dims: [usize; 3], data: &[f64]) -> Result<Vec<f64>> {
    let [gx, gy, gz] = sobel_gradients(dims, data)?;
    Ok((0..data.len())
        .map(|i| (gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]).sqrt())
        .collect())
}

/// Mean absolute difference of the Sobel magnitudes of `a` and `b`.
pub fn edge_loss(dims: [usize; 3], a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "edge_loss inputs differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ma = sobel_magnitude(dims, a)?;
    let mb = sobel_magnitude(dims, b)?;
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
