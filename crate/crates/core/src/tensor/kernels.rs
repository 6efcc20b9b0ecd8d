//! Raw numeric kernels behind the graph operations.
//!
//! Everything here works on flat row-major slices. Convolution goes through
//! im2col followed by a GEMM; the dense and atrous cases share that path, so
//! `dilation = 1` is not special-cased anywhere. Only unpadded 1x1 kernels
//! skip the unfolding, since their column matrix is the input itself.

/// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
///
/// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. When `beta == 0` the prior
/// content of `C` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
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

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extent for one spatial axis, or `None` when the dilated kernel
    /// does not fit inside the padded input.
    pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
        let span = dil * (k - 1) + 1;
        let padded = size + 2 * pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + off - pad`
/// falls inside `0..w`.
fn valid_range(g: &ConvGeom, off: usize) -> (usize, usize) {
    let first = |ox: usize| (ox * g.stride + off) as isize - g.pad as isize;
    let lo = (0..g.wo).find(|&ox| first(ox) >= 0).unwrap_or(g.wo);
    let hi = (lo..g.wo).find(|&ox| first(ox) >= g.w as isize).unwrap_or(g.wo);
    (lo, hi)
}

/// Unfolds one sample `cin x h x w` into a `(cin*k*k) x (ho*wo)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_range(g, kj * g.dil);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + kj * g.dil - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, ix) in line[lo..hi].iter_mut().zip((start..).step_by(g.stride)) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into `cin x h x w`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_range(g, kj * g.dil);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj * g.dil - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (v, ix) in line.iter().zip((start..).step_by(g.stride)) {
                        dst[ix] += v;
                    }
                }
            }
        }
    }
}

/// A 1x1 kernel without stride or padding reads the input as its own
/// column matrix.
fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// Forward convolution of a batch. `w` is `cout x cin x k x k`.
pub fn conv2d_forward(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, cout: usize, g: &ConvGeom) -> Vec<f64> {
    let rows = g.cols_rows();
    let ncol = g.cols_len();
    let mut out = vec![0.0; n * cout * ncol];
    let pointwise = is_pointwise(g);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncol] };
    let in_stride = g.cin * g.h * g.w;
    for s in 0..n {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let src = if pointwise {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let y = &mut out[s * cout * ncol..(s + 1) * cout * ncol];
        gemm(cout, rows, ncol, 1.0, w, (rows, 1), src, (ncol, 1), 0.0, y, (ncol, 1));
        if let Some(b) = b {
            for (co, chunk) in y.chunks_mut(ncol).enumerate() {
                let bias = b[co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Gradients of a batched convolution. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    cout: usize,
    g: &ConvGeom,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let rows = g.cols_rows();
    let ncol = g.cols_len();
    let in_stride = g.cin * g.h * g.w;
    let pointwise = is_pointwise(g);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncol] };
    for s in 0..n {
        let dys = &dy[s * cout * ncol..(s + 1) * cout * ncol];
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dys.chunks(ncol).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW += dY (cout x ncol) * cols^T (ncol x rows)
            gemm(cout, ncol, rows, 1.0, dys, (ncol, 1), src, (1, ncol), 1.0, dw, (rows, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_stride..(s + 1) * in_stride];
            // dcols = W^T (rows x cout) * dY (cout x ncol)
            if pointwise {
                gemm(rows, cout, ncol, 1.0, w, (1, rows), dys, (ncol, 1), 1.0, dxs, (ncol, 1));
            } else {
                gemm(rows, cout, ncol, 1.0, w, (1, rows), dys, (ncol, 1), 0.0, &mut cols, (ncol, 1));
                col2im(&cols, g, dxs);
            }
        }
    }
}

/// Source index pairs and weights for 1-D linear resampling with the
/// half-pixel (`align_corners = false`) convention.
pub fn linear_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of `planes` independent `h x w` planes.
pub fn bilinear_resize(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let wy = linear_weights(h, oh);
    let wx = linear_weights(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in wy.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in wx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                dst[oy * ow + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward(dy: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let wy = linear_weights(h, oh);
    let wx = linear_weights(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ty)) in wy.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in wx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                dst[y0 * w + x1] += g * (1.0 - ty) * tx;
                dst[y1 * w + x0] += g * ty * (1.0 - tx);
                dst[y1 * w + x1] += g * ty * tx;
            }
        }
    }
    dx
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)` extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along the middle extent of an `(outer, len, inner)` view.
pub fn softmax_forward(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    out
}
