//! Dense numeric kernels shared by the forward and transposed layers.
//!
//! A forward convolution and its transposed counterpart are the same linear
//! map read in opposite directions, so both are expressed through one
//! im2col/col2im pair and a row-major sgemm.

/// Spatial geometry of a forward convolution (or pooling) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

/// Forward output size of a sliding window, `None` if the window does not fit.
pub fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major unless the
/// transposition flags ask otherwise.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are bounds-checked above and strides describe dense
    // row-major (or transposed) layouts within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `(in_c, in_h, in_w)` image into `(in_c*k*k, out_h*out_w)` columns.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ohw = g.out_hw();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image: `out = W * im2col(x) + b`.
pub fn conv_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom, cols: &mut [f32], out: &mut [f32]) {
    im2col(x, g, cols);
    let ohw = g.out_hw();
    for (oc, bias) in b.iter().enumerate() {
        out[oc * ohw..(oc + 1) * ohw].fill(*bias);
    }
    gemm(g.out_c, g.cols_rows(), ohw, w, false, cols, false, out, 1.0);
}

/// Adjoint of the convolution with respect to its input: `col2im(W^T * y)`.
/// This is exactly the transposed convolution of `y`.
pub fn conv_input_adjoint(y: &[f32], w: &[f32], g: &ConvGeom, cols: &mut [f32], x: &mut [f32]) {
    gemm(g.cols_rows(), g.out_c, g.out_hw(), w, true, y, false, cols, 0.0);
    x.fill(0.0);
    col2im(cols, g, x);
}

/// Accumulate `dW += y * cols^T` where `cols = im2col(x)` is already filled.
pub fn conv_weight_grad(y: &[f32], cols: &[f32], g: &ConvGeom, dw: &mut [f32]) {
    gemm(g.out_c, g.out_hw(), g.cols_rows(), y, false, cols, true, dw, 1.0);
}

/// Max pooling over one `(c, h, w)` image; records flat argmax positions.
pub fn maxpool_forward(x: &[f32], g: &ConvGeom, out: &mut [f32], argmax: &mut [u32]) {
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.in_c {
        let plane = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f32::NEG_INFINITY;
                let mut at = 0usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = (oy * s + ky, ox * s + kx);
                        if iy < g.in_h && ix < g.in_w {
                            let idx = plane + iy * g.in_w + ix;
                            if x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                }
                let o = (c * g.out_h + oy) * g.out_w + ox;
                out[o] = best;
                argmax[o] = at as u32;
            }
        }
    }
}

/// Depthwise transposed convolution with a constant kernel: every input
/// value is spread over its forward pooling window, scaled by `weight`.
pub fn spread_forward(y: &[f32], g: &ConvGeom, weight: f32, x: &mut [f32]) {
    x.fill(0.0);
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.in_c {
        let plane = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let v = weight * y[(c * g.out_h + oy) * g.out_w + ox];
                for ky in 0..k {
                    let iy = oy * s + ky;
                    if iy >= g.in_h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox * s + kx;
                        if ix < g.in_w {
                            x[plane + iy * g.in_w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`spread_forward`]: window sums scaled by `weight`.
pub fn spread_adjoint(gx: &[f32], g: &ConvGeom, weight: f32, gy: &mut [f32]) {
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.in_c {
        let plane = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = oy * s + ky;
                    if iy >= g.in_h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox * s + kx;
                        if ix < g.in_w {
                            acc += gx[plane + iy * g.in_w + ix];
                        }
                    }
                }
                gy[(c * g.out_h + oy) * g.out_w + ox] = weight * acc;
            }
        }
    }
}
