//! Raw numeric kernels behind the graph ops. No shape checking happens here;
//! callers in `graph` validate first.

/// `C = alpha * A·B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above describe the accessed extents; every
    // caller sizes its buffers from the same m/k/n it passes here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Interpolation stencil along one axis for a normalized coordinate.
#[derive(Clone, Copy, Debug)]
struct AxisStencil {
    i0: usize,
    i1: usize,
    frac: f64,
    dfrac: f64,
}

fn axis_stencil(p: f64, n: usize) -> AxisStencil {
    if n == 1 {
        return AxisStencil { i0: 0, i1: 0, frac: 0.0, dfrac: 0.0 };
    }
    let u = p * n as f64 - 0.5;
    let hi = (n - 1) as f64;
    if u <= 0.0 {
        AxisStencil { i0: 0, i1: 1, frac: 0.0, dfrac: 0.0 }
    } else if u >= hi {
        AxisStencil { i0: n - 2, i1: n - 1, frac: 1.0, dfrac: 0.0 }
    } else {
        let i0 = (u.floor() as usize).min(n - 2);
        AxisStencil { i0, i1: i0 + 1, frac: u - i0 as f64, dfrac: n as f64 }
    }
}

/// Eight corner offsets (spatial flat index), weights and weight gradients
/// w.r.t. the normalized point.
pub(crate) struct TrilinearStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
}

pub(crate) fn trilinear_stencil(p: [f64; 3], dims: [usize; 3]) -> TrilinearStencil {
    let sx = axis_stencil(p[0], dims[0]);
    let sy = axis_stencil(p[1], dims[1]);
    let sz = axis_stencil(p[2], dims[2]);
    let mut out = TrilinearStencil { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 3]; 8] };
    let mut c = 0;
    for (ix, wx, dx) in [(sx.i0, 1.0 - sx.frac, -sx.dfrac), (sx.i1, sx.frac, sx.dfrac)] {
        for (iy, wy, dy) in [(sy.i0, 1.0 - sy.frac, -sy.dfrac), (sy.i1, sy.frac, sy.dfrac)] {
            for (iz, wz, dz) in [(sz.i0, 1.0 - sz.frac, -sz.dfrac), (sz.i1, sz.frac, sz.dfrac)] {
                out.idx[c] = (ix * dims[1] + iy) * dims[2] + iz;
                out.w[c] = wx * wy * wz;
                out.dw[c] = [dx * wy * wz, wx * dy * wz, wx * wy * dz];
                c += 1;
            }
        }
    }
    out
}

/// Samples `vol` (`[C, X, Y, Z]`) at normalized points, output `[M, C]`.
pub(crate) fn trilinear_forward(vol: &[f64], c: usize, dims: [usize; 3], pts: &[f64]) -> Vec<f64> {
    let s: usize = dims.iter().product();
    let m = pts.len() / 3;
    let mut out = vec![0.0; m * c];
    for i in 0..m {
        let st = trilinear_stencil([pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]], dims);
        let row = &mut out[i * c..(i + 1) * c];
        for (ch, o) in row.iter_mut().enumerate() {
            let base = ch * s;
            let mut acc = 0.0;
            for k in 0..8 {
                acc += st.w[k] * vol[base + st.idx[k]];
            }
            *o = acc;
        }
    }
    out
}

pub(crate) fn trilinear_backward(
    vol: &[f64],
    c: usize,
    dims: [usize; 3],
    pts: &[f64],
    dout: &[f64],
    dvol: Option<&mut [f64]>,
    dpts: Option<&mut [f64]>,
) {
    let s: usize = dims.iter().product();
    let m = pts.len() / 3;
    let mut dvol = dvol;
    let mut dpts = dpts;
    for i in 0..m {
        let st = trilinear_stencil([pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]], dims);
        let g = &dout[i * c..(i + 1) * c];
        if let Some(dv) = dvol.as_deref_mut() {
            for (ch, &gc) in g.iter().enumerate() {
                let base = ch * s;
                for k in 0..8 {
                    dv[base + st.idx[k]] += st.w[k] * gc;
                }
            }
        }
        if let Some(dp) = dpts.as_deref_mut() {
            let mut acc = [0.0; 3];
            for (ch, &gc) in g.iter().enumerate() {
                let base = ch * s;
                for k in 0..8 {
                    let v = vol[base + st.idx[k]] * gc;
                    acc[0] += st.dw[k][0] * v;
                    acc[1] += st.dw[k][1] * v;
                    acc[2] += st.dw[k][2] * v;
                }
            }
            dp[3 * i] += acc[0];
            dp[3 * i + 1] += acc[1];
            dp[3 * i + 2] += acc[2];
        }
    }
}

/// Offset index of kernel tap `(a, b, c)`, each in `0..3`.
#[inline]
pub(crate) fn tap(a: usize, b: usize, c: usize) -> usize {
    (a * 3 + b) * 3 + c
}

/// Output extent of a 3-tap, padding-1 convolution.
pub(crate) fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// im2col for a 3³ kernel with padding 1: `[Cin*27, S_out]`.
pub(crate) fn im2col3(x: &[f64], cin: usize, dims: [usize; 3], stride: usize) -> (Vec<f64>, [usize; 3]) {
    let od = [conv_out_dim(dims[0], stride), conv_out_dim(dims[1], stride), conv_out_dim(dims[2], stride)];
    let so: usize = od.iter().product();
    let si: usize = dims.iter().product();
    let mut cols = vec![0.0; cin * 27 * so];
    for ci in 0..cin {
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let row = (ci * 27 + tap(a, b, c)) * so;
                    for ox in 0..od[0] {
                        let ix = (ox * stride + a) as isize - 1;
                        if ix < 0 || ix >= dims[0] as isize {
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = (oy * stride + b) as isize - 1;
                            if iy < 0 || iy >= dims[1] as isize {
                                continue;
                            }
                            for oz in 0..od[2] {
                                let iz = (oz * stride + c) as isize - 1;
                                if iz < 0 || iz >= dims[2] as isize {
                                    continue;
                                }
                                let src = ci * si + ((ix as usize) * dims[1] + iy as usize) * dims[2] + iz as usize;
                                cols[row + (ox * od[1] + oy) * od[2] + oz] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, od)
}

/// Adjoint of [`im2col3`]: scatters column gradients back into `dx`.
pub(crate) fn col2im3(dcols: &[f64], cin: usize, dims: [usize; 3], stride: usize, dx: &mut [f64]) {
    let od = [conv_out_dim(dims[0], stride), conv_out_dim(dims[1], stride), conv_out_dim(dims[2], stride)];
    let so: usize = od.iter().product();
    let si: usize = dims.iter().product();
    for ci in 0..cin {
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let row = (ci * 27 + tap(a, b, c)) * so;
                    for ox in 0..od[0] {
                        let ix = (ox * stride + a) as isize - 1;
                        if ix < 0 || ix >= dims[0] as isize {
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = (oy * stride + b) as isize - 1;
                            if iy < 0 || iy >= dims[1] as isize {
                                continue;
                            }
                            for oz in 0..od[2] {
                                let iz = (oz * stride + c) as isize - 1;
                                if iz < 0 || iz >= dims[2] as isize {
                                    continue;
                                }
                                let dst = ci * si + ((ix as usize) * dims[1] + iy as usize) * dims[2] + iz as usize;
                                dx[dst] += dcols[row + (ox * od[1] + oy) * od[2] + oz];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gather/scatter plan of a sparse convolution: for each of the 27 kernel taps,
/// the `(input row, output row)` pairs it connects.
#[derive(Clone, Debug, Default)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

/// Sparse convolution forward: `x [N_in, Cin]`, `w [Cout, Cin, 27]` → `[N_out, Cout]`.
pub(crate) fn sparse_conv_forward(x: &[f64], cin: usize, w: &[f64], cout: usize, rules: &Rulebook) -> Vec<f64> {
    let mut out = vec![0.0; rules.n_out * cout];
    let mut gathered = Vec::new();
    let mut prod = Vec::new();
    for (k, pairs) in rules.pairs.iter().enumerate() {
        let p = pairs.len();
        if p == 0 {
            continue;
        }
        gathered.clear();
        for &(i, _) in pairs {
            let i = i as usize;
            gathered.extend_from_slice(&x[i * cin..(i + 1) * cin]);
        }
        prod.clear();
        prod.resize(p * cout, 0.0);
        gemm(p, cin, cout, 1.0, &gathered, cin, 1, &w[k..], 27, cin * 27, 0.0, &mut prod, cout, 1);
        for (r, &(_, o)) in pairs.iter().enumerate() {
            let o = o as usize;
            let dst = &mut out[o * cout..(o + 1) * cout];
            for (d, s) in dst.iter_mut().zip(&prod[r * cout..(r + 1) * cout]) {
                *d += s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sparse_conv_backward(
    x: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    rules: &Rulebook,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    let mut gx = Vec::new();
    let mut gd = Vec::new();
    let mut buf = Vec::new();
    for (k, pairs) in rules.pairs.iter().enumerate() {
        let p = pairs.len();
        if p == 0 {
            continue;
        }
        gd.clear();
        for &(_, o) in pairs {
            let o = o as usize;
            gd.extend_from_slice(&dout[o * cout..(o + 1) * cout]);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gx.clear();
            for &(i, _) in pairs {
                let i = i as usize;
                gx.extend_from_slice(&x[i * cin..(i + 1) * cin]);
            }
            // dW_k[ci, co] += Σ_r x[r, ci] · dout[r, co]
            gemm(cin, p, cout, 1.0, &gx, 1, cin, &gd, cout, 1, 1.0, &mut dw[k..], 27, cin * 27);
        }
        if let Some(dx) = dx.as_deref_mut() {
            buf.clear();
            buf.resize(p * cin, 0.0);
            gemm(p, cout, cin, 1.0, &gd, cout, 1, &w[k..], cin * 27, 27, 0.0, &mut buf, cin, 1);
            for (r, &(i, _)) in pairs.iter().enumerate() {
                let i = i as usize;
                let dst = &mut dx[i * cin..(i + 1) * cin];
                for (d, s) in dst.iter_mut().zip(&buf[r * cin..(r + 1) * cin]) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        for p in [[0.1, 0.5, 0.93], [-0.2, 1.4, 0.5], [0.0, 0.0, 0.0]] {
            let st = trilinear_stencil(p, [4, 5, 3]);
            let s: f64 = st.w.iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_out_dims() {
        assert_eq!(conv_out_dim(8, 1), 8);
        assert_eq!(conv_out_dim(8, 2), 4);
        assert_eq!(conv_out_dim(7, 2), 4);
        assert_eq!(conv_out_dim(1, 2), 1);
    }
}
