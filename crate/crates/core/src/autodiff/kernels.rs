//! Forward/backward numeric kernels on raw NCHW slices.

/// Convolution geometry. Kernels are square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// `same`-style 3x3 convolution at the given stride and dilation.
    pub const fn k3(stride: usize, dilation: usize) -> Self {
        Self::new(stride, dilation, dilation)
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_identity_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (usize, usize),
    b: &[f64],
    (b_rs, b_cs): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
        assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    }
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct ConvShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], s: &ConvShape, col: &mut [f64]) {
    let (k, ho, wo) = (s.k, s.ho, s.wo);
    let ConvSpec {
        stride,
        padding,
        dilation,
    } = s.spec;
    for c in 0..s.c {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + i * dilation) as isize - padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + j * dilation) as isize - padding as isize;
                        *out = if ix < 0 || ix >= s.w as isize {
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

fn col2im(col: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let (k, ho, wo) = (s.k, s.ho, s.wo);
    let ConvSpec {
        stride,
        padding,
        dilation,
    } = s.spec;
    for c in 0..s.c {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + i * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..wo {
                        let ix = (ox * stride + j * dilation) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < s.w {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `out` has shape `(B, O, ho, wo)`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
    s: &ConvShape,
    out: &mut [f64],
) {
    let rows = s.rows();
    let cols = s.cols();
    let in_len = s.c * s.h * s.w;
    let out_len = out_channels * cols;
    let pointwise = s.spec.is_identity_pointwise(s.k);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        let colb: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, s, &mut col);
            &col
        };
        gemm(
            out_channels,
            rows,
            cols,
            weight,
            (rows, 1),
            colb,
            (cols, 1),
            0.0,
            ob,
        );
        if let Some(bias) = bias {
            for (o, &bo) in bias.iter().enumerate() {
                for v in &mut ob[o * cols..(o + 1) * cols] {
                    *v += bo;
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    out_channels: usize,
    s: &ConvShape,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let rows = s.rows();
    let cols = s.cols();
    let in_len = s.c * s.h * s.w;
    let out_len = out_channels * cols;
    let pointwise = s.spec.is_identity_pointwise(s.k);
    let mut col = vec![0.0; if pointwise { 0 } else { rows * cols }];
    let mut dcol = vec![0.0; if dx.is_some() { rows * cols } else { 0 }];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            let colb: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, s, &mut col);
                &col
            };
            // dW[O, R] += dY[O, P] * col[R, P]^T
            gemm(
                out_channels,
                cols,
                rows,
                dyb,
                (cols, 1),
                colb,
                (1, cols),
                1.0,
                dw,
            );
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, g) in db.iter_mut().enumerate() {
                *g += dyb[o * cols..(o + 1) * cols].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                // dX[C, P] += W[O, C]^T * dY[O, P]
                gemm(
                    s.c,
                    out_channels,
                    cols,
                    weight,
                    (1, rows),
                    dyb,
                    (cols, 1),
                    1.0,
                    dxb,
                );
            } else {
                gemm(
                    rows,
                    out_channels,
                    cols,
                    weight,
                    (1, rows),
                    dyb,
                    (cols, 1),
                    0.0,
                    &mut dcol,
                );
                col2im(&dcol, s, dxb);
            }
        }
    }
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    out: &mut [f64],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &src[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                dst[oy * wo + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1])
                    + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
            }
        }
    }
}

pub(crate) fn resize_backward(
    dy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                d[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                d[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                d[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                d[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
            }
        }
    }
}

/// Numerically stable softmax over axis 1 of an NCHW buffer.
pub(crate) fn softmax_channels(x: &[f64], (b, k, hw): (usize, usize, usize), out: &mut [f64]) {
    for n in 0..b {
        let base = n * k * hw;
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(x[base + c * hw + p]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (x[base + c * hw + p] - max).exp();
                out[base + c * hw + p] = e;
                sum += e;
            }
            for c in 0..k {
                out[base + c * hw + p] /= sum;
            }
        }
    }
}
