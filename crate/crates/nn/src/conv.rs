//! im2col convolution kernels on top of `matrixmultiply::sgemm`.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox + j) as isize - g.pad as isize;
                            *o = if ix >= 0 && (ix as usize) < g.w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            *o = if ix >= 0 && (ix as usize) < g.w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in s.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * a[m×k] * b[k×n] + beta * c`, all with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    // SAFETY: callers pass slices sized for the given dimensions/strides.
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

/// x: `[n, c, h, w]`, weight: `[o, c, kh, kw]`, bias: `[o]` -> `[n, o, ho, wo]`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    bias: Option<&[f32]>,
    out_ch: usize,
) -> Vec<f32> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = out_ch * ncols;
    let mut y = vec![0.0f32; n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; rows * ncols]
    };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (o, bo) in b.iter().enumerate() {
                ys[o * ncols..(o + 1) * ncols].fill(*bo);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let cm: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(
            out_ch,
            rows,
            ncols,
            weight,
            (rows as isize, 1),
            cm,
            (ncols as isize, 1),
            beta,
            ys,
        );
    }
    y
}

/// Accumulates parameter gradients and returns the input gradient.
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_ch: usize,
    dy: &[f32],
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (rows, ncols) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = out_ch * ncols;
    let mut dx = if need_dx {
        Some(vec![0.0f32; n * in_len])
    } else {
        None
    };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; rows * ncols]
    };
    let mut dcols = vec![0.0f32; rows * ncols];
    if let Some(db) = dbias {
        for s in 0..n {
            let dys = &dy[s * out_len..(s + 1) * out_len];
            for (o, d) in db.iter_mut().enumerate() {
                *d += dys[o * ncols..(o + 1) * ncols].iter().sum::<f32>();
            }
        }
    }
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        let cm: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        // dW[o×rows] += dY[o×ncols] · colsᵀ[ncols×rows]
        gemm(
            out_ch,
            ncols,
            rows,
            dys,
            (ncols as isize, 1),
            cm,
            (1, ncols as isize),
            1.0,
            dweight,
        );
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                // dX[rows×ncols] = Wᵀ[rows×o] · dY[o×ncols]
                gemm(
                    rows,
                    out_ch,
                    ncols,
                    weight,
                    (1, rows as isize),
                    dys,
                    (ncols as isize, 1),
                    0.0,
                    dxs,
                );
            } else {
                gemm(
                    rows,
                    out_ch,
                    ncols,
                    weight,
                    (1, rows as isize),
                    dys,
                    (ncols as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im_add(&dcols, g, dxs);
            }
        }
    }
    dx
}
