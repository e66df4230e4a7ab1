//! Forward and backward kernels for the fixed op set.
//!
//! Convolution lowers to im2col followed by a single GEMM. The GEMM runs on
//! one thread, so summation order, and therefore every result, is
//! reproducible bit for bit.

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let bad = |reason: String| TensorError::InvalidShape {
            op: "conv2d",
            shape: input.to_vec(),
            reason,
        };
        if input.len() != 3 || kernel.len() != 4 {
            return Err(bad(format!("expected [C,H,W] input and 4-D kernel, kernel {kernel:?}")));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![c_out, c_in, kh, kw],
                found: kernel.to_vec(),
            });
        }
        if bias != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![c_out],
                found: bias.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(bad("kernel extents must be odd".into()));
        }
        if stride == 0 {
            return Err(bad("stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(bad("kernel larger than padded input".into()));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `[lo, hi)` whose input column for kernel column `kj` lies
/// inside the image.
fn valid_cols(kj: usize, g: &ConvGeometry) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride).min(g.out_w);
    let hi = if g.w + g.padding > kj {
        ((g.w + g.padding - kj - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Input row read by output row `oi` through kernel row `ki`, if any.
fn input_row(oi: usize, ki: usize, g: &ConvGeometry) -> Option<usize> {
    let ii = (oi * g.stride + ki).checked_sub(g.padding)?;
    (ii < g.h).then_some(ii)
}

/// Patch matrix `[c_in·kh·kw, out_h·out_w]`, written once without a
/// zero-fill pass.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.patch_len() * g.out_len());
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(kj, g);
                for oi in 0..g.out_h {
                    let Some(ii) = input_row(oi, ki, g) else {
                        cols.extend(std::iter::repeat_n(0.0, g.out_w));
                        continue;
                    };
                    let start = ii * g.w + lo * g.stride + kj - g.padding;
                    cols.extend(std::iter::repeat_n(0.0, lo));
                    if g.stride == 1 {
                        cols.extend_from_slice(&xc[start..start + (hi - lo)]);
                    } else {
                        cols.extend(xc[start..].iter().step_by(g.stride).take(hi - lo));
                    }
                    cols.extend(std::iter::repeat_n(0.0, g.out_w - hi));
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out_len();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(kj, g);
                for oi in 0..g.out_h {
                    let Some(ii) = input_row(oi, ki, g) else { continue };
                    let start = ii * g.w + lo * g.stride + kj - g.padding;
                    let srow = &src[oi * g.out_w + lo..oi * g.out_w + hi];
                    for (d, s) in xc[start..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// `a[m×k] · b[k×n]` with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: the operand slices cover every index the strides address.
    // With beta = 0 the destination is only written, so it may start
    // uninitialized; all m·n entries are written before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Returns the output and the patch matrix needed by the backward pass.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<(Tensor, Vec<f64>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let cols = im2col(input.data(), &g);
    let n = g.out_len();
    let k = g.patch_len();
    let mut out = gemm(g.c_out, k, n, kernel.data(), k as isize, 1, &cols, n as isize, 1);
    for (o, b) in bias.data().iter().enumerate() {
        for v in &mut out[o * n..(o + 1) * n] {
            *v += b;
        }
    }
    let out = Tensor::from_raw(vec![g.c_out, g.out_h, g.out_w], out).check_finite("conv2d")?;
    Ok((out, cols))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Gradients of a convolution given the patch matrix of its forward pass.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cols: &[f64],
    input_shape: &[usize],
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input_shape, kernel.shape(), &[kernel.shape()[0]], stride, padding)?;
    grad_out.expect_shape("conv2d_backward", &[g.c_out, g.out_h, g.out_w])?;
    let n = g.out_len();
    let k = g.patch_len();
    if cols.len() != k * n {
        return Err(TensorError::InvalidShape {
            op: "conv2d_backward",
            shape: vec![cols.len()],
            reason: format!("patch matrix must hold {} values", k * n),
        });
    }
    let go = grad_out.data();
    // dK = dOut · colsᵀ
    let dk = gemm(g.c_out, n, k, go, n as isize, 1, cols, 1, n as isize);
    let db: Vec<f64> = (0..g.c_out).map(|o| go[o * n..(o + 1) * n].iter().sum()).collect();
    let input = need_input.then(|| {
        // dCols = Kᵀ · dOut
        let dcols = gemm(k, g.c_out, n, kernel.data(), 1, k as isize, go, n as isize, 1);
        Tensor::from_raw(input_shape.to_vec(), col2im(&dcols, &g))
    });
    Ok(ConvGrads {
        input,
        kernel: Tensor::from_raw(kernel.shape().to_vec(), dk),
        bias: Tensor::from_raw(vec![g.c_out], db),
    })
}

/// Source taps for one output coordinate of half-pixel bilinear 2x upsampling.
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(TensorError::InvalidShape {
            op: "upsample2x",
            shape: x.shape().to_vec(),
            reason: "expected [C,H,W]".into(),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = upsample_taps(2 * h, h);
    let cols = upsample_taps(2 * w, w);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * 4 * h * w);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, 2 * h, 2 * w], out))
}

pub fn upsample2x_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let rows = upsample_taps(2 * h, h);
    let cols = upsample_taps(2 * w, w);
    let go = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let gplane = &go[ch * 4 * h * w..(ch + 1) * 4 * h * w];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let gv = gplane[i * 2 * w + j];
                plane[r0 * w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                plane[r0 * w + c1] += gv * (1.0 - fr) * fc;
                plane[r1 * w + c0] += gv * fr * (1.0 - fc);
                plane[r1 * w + c1] += gv * fr * fc;
            }
        }
    }
    Tensor::from_raw(input_shape.to_vec(), dx)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[1..] != b.shape()[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_raw(
        vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]],
        data,
    ))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
