//! Dense 3D convolution kernels (im2col + GEMM) shared by the graph ops.

use super::tensor::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, in_dims: [usize; 3]) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = in_dims[a] + 2 * pad;
            if span < k {
                return None;
            }
            out_dims[a] = (span - k) / stride + 1;
        }
        Some(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Unfold one sample `[cin, Z, Y, X]` into `[cin*k^3, out_spatial]`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let [iz_n, iy_n, ix_n] = g.in_dims;
    let [oz_n, oy_n, ox_n] = g.out_dims;
    let so = g.out_spatial();
    let k = g.k;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.in_spatial()..(ci + 1) * g.in_spatial()];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * so..(row + 1) * so];
                    let mut o = 0;
                    for oz in 0..oz_n {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..oy_n {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iz < 0 || iz >= iz_n as isize || iy < 0 || iy >= iy_n as isize {
                                dst[o..o + ox_n].iter_mut().for_each(|v| *v = 0.0);
                                o += ox_n;
                                continue;
                            }
                            let base = (iz as usize * iy_n + iy as usize) * ix_n;
                            for ox in 0..ox_n {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                dst[o] = if ix < 0 || ix >= ix_n as isize {
                                    0.0
                                } else {
                                    xc[base + ix as usize]
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `dx`.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let [iz_n, iy_n, ix_n] = g.in_dims;
    let [oz_n, oy_n, ox_n] = g.out_dims;
    let so = g.out_spatial();
    let k = g.k;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * g.in_spatial()..(ci + 1) * g.in_spatial()];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * so..(row + 1) * so];
                    let mut o = 0;
                    for oz in 0..oz_n {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..oy_n {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iz < 0 || iz >= iz_n as isize || iy < 0 || iy >= iy_n as isize {
                                o += ox_n;
                                continue;
                            }
                            let base = (iz as usize * iy_n + iy as usize) * ix_n;
                            for ox in 0..ox_n {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < ix_n as isize {
                                    xc[base + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let si = g.cin * g.in_spatial();
    let so = g.out_spatial();
    let rows = g.rows();
    let mut out = vec![0.0; batch * g.cout * so];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0; rows * so] };
    for n in 0..batch {
        let xn = &x[n * si..(n + 1) * si];
        let on = &mut out[n * g.cout * so..(n + 1) * g.cout * so];
        if let Some(b) = b {
            for (co, bias) in b.iter().enumerate() {
                on[co * so..(co + 1) * so].iter_mut().for_each(|v| *v = *bias);
            }
        }
        let src: &[f64] = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(
            g.cout,
            rows,
            so,
            1.0,
            w,
            (rows as isize, 1),
            src,
            (so as isize, 1),
            1.0,
            on,
            (so as isize, 1),
        );
    }
    out
}

/// Gradients w.r.t. input (if `dx` given), weight (`dw`) and bias (`db`).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let si = g.cin * g.in_spatial();
    let so = g.out_spatial();
    let rows = g.rows();
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0; rows * so] };
    let mut dcols = if g.pointwise() || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; rows * so]
    };
    for n in 0..batch {
        let xn = &x[n * si..(n + 1) * si];
        let dn = &dout[n * g.cout * so..(n + 1) * g.cout * so];
        if let Some(db) = db.as_deref_mut() {
            for co in 0..g.cout {
                db[co] += dn[co * so..(co + 1) * so].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[f64] = if g.pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dw[co, r] += sum_s dout[co, s] * cols[r, s]
            gemm(
                g.cout,
                so,
                rows,
                1.0,
                dn,
                (so as isize, 1),
                src,
                (1, so as isize),
                1.0,
                dw,
                (rows as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * si..(n + 1) * si];
            if g.pointwise() {
                gemm(
                    rows,
                    g.cout,
                    so,
                    1.0,
                    w,
                    (1, rows as isize),
                    dn,
                    (so as isize, 1),
                    1.0,
                    dxn,
                    (so as isize, 1),
                );
            } else {
                gemm(
                    rows,
                    g.cout,
                    so,
                    1.0,
                    w,
                    (1, rows as isize),
                    dn,
                    (so as isize, 1),
                    0.0,
                    &mut dcols,
                    (so as isize, 1),
                );
                col2im(g, &dcols, dxn);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [oz, oy, ox] = g.out_dims;
        let [iz, iy, ix] = g.in_dims;
        let mut out = vec![0.0; g.cout * g.out_spatial()];
        for co in 0..g.cout {
            for z in 0..oz {
                for y in 0..oy {
                    for xx in 0..ox {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for kz in 0..g.k {
                                for ky in 0..g.k {
                                    for kx in 0..g.k {
                                        let pz = (z * g.stride + kz) as isize - g.pad as isize;
                                        let py = (y * g.stride + ky) as isize - g.pad as isize;
                                        let px = (xx * g.stride + kx) as isize - g.pad as isize;
                                        if pz < 0 || py < 0 || px < 0 || pz >= iz as isize || py >= iy as isize || px >= ix as isize {
                                            continue;
                                        }
                                        let xi = ((ci * iz + pz as usize) * iy + py as usize) * ix + px as usize;
                                        let wi = (((co * g.cin + ci) * g.k + kz) * g.k + ky) * g.k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * oz + z) * oy + y) * ox + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_direct_loops() {
        let g = ConvGeom::new(2, 3, 3, 2, 1, [5, 4, 6]).unwrap();
        assert_eq!(g.out_dims, [3, 2, 3]);
        let x: Vec<f64> = (0..2 * 120).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let b = vec![0.5, -1.0, 2.0];
        let got = conv3d_forward(&g, 1, &x, &w, Some(&b));
        let want = naive(&g, &x, &w, &b);
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
