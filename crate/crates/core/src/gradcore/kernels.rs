//! Raw array kernels shared by the tape and by pure image code.

use crate::error::{Error, Result};

/// `c = a · b + beta · c` for logical shapes `a: [m, k]`, `b: [k, n]`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths, given the strides computed for the logical shapes.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation over `[B, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let bad = || Error::Shape {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 4 || kernel[1] != input[1] || kernel[2] != kernel[3]
        {
            return Err(bad());
        }
        if stride == 0 || kernel[2] == 0 {
            return Err(Error::invalid(
                "conv2d stride and kernel size must be positive",
            ));
        }
        if input[2] + 2 * padding < kernel[2] || input[3] + 2 * padding < kernel[2] {
            return Err(bad());
        }
        Ok(ConvGeom {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kernel: kernel[2],
            stride,
            padding,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Number of output positions across the whole batch.
    pub fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.out_height(),
            self.out_width(),
        ]
    }

    /// Input coordinate feeding output `(oh, ow)` at kernel tap `(ki, kj)`.
    fn source(&self, oh: usize, ow: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride + ki).checked_sub(self.padding)?;
        let x = (ow * self.stride + kj).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds the input into a `[C·k·k, B·OH·OW]` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let n = g.positions();
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &input[(b * g.in_channels + c) * g.height * g.width..];
                    for oh in 0..oh_n {
                        for ow in 0..ow_n {
                            if let Some((y, x)) = g.source(oh, ow, ki, kj) {
                                dst[(b * oh_n + oh) * ow_n + ow] = plane[y * g.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_height(), g.out_width());
    let n = g.positions();
    let mut out = vec![0.0; g.batch * g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let base = (b * g.in_channels + c) * g.height * g.width;
                    for oh in 0..oh_n {
                        for ow in 0..ow_n {
                            if let Some((y, x)) = g.source(oh, ow, ki, kj) {
                                out[base + y * g.width + x] += src[(b * oh_n + oh) * ow_n + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation forward. Returns `(output, cols)`; `cols` is kept for backward.
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let n = g.positions();
    let mut tmp = vec![0.0; g.out_channels * n];
    gemm(
        g.out_channels,
        g.patch_len(),
        n,
        kernel,
        false,
        &cols,
        false,
        &mut tmp,
        0.0,
    );
    let per_image = g.out_height() * g.out_width();
    let mut out = vec![0.0; tmp.len()];
    for o in 0..g.out_channels {
        for b in 0..g.batch {
            let src = &tmp[o * n + b * per_image..o * n + (b + 1) * per_image];
            let dst = &mut out[(b * g.out_channels + o) * per_image..][..per_image];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    (out, cols)
}

/// Gradients of the cross-correlation: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    grad_out: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.positions();
    let per_image = g.out_height() * g.out_width();
    // [B, O, P] -> [O, B·P]
    let mut dtmp = vec![0.0; g.out_channels * n];
    let mut d_bias = vec![0.0; g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let src = &grad_out[(b * g.out_channels + o) * per_image..][..per_image];
            dtmp[o * n + b * per_image..][..per_image].copy_from_slice(src);
            d_bias[o] += src.iter().sum::<f64>();
        }
    }
    let mut d_kernel = vec![0.0; g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        n,
        g.patch_len(),
        &dtmp,
        false,
        cols,
        true,
        &mut d_kernel,
        0.0,
    );
    let mut d_cols = vec![0.0; g.patch_len() * n];
    gemm(
        g.patch_len(),
        g.out_channels,
        n,
        kernel,
        true,
        &dtmp,
        false,
        &mut d_cols,
        0.0,
    );
    (col2im(&d_cols, g), d_kernel, d_bias)
}

fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "expected an image-shaped tensor, got shape {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// 2×2 max-pool over the two trailing axes. Returns values and the flat
/// source index of each maximum (first in row-major order on ties).
pub fn maxpool2(data: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let (p, h, w) = planes(shape)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2 needs even spatial extents, got {shape:?}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(p * oh * ow);
    let mut arg = Vec::with_capacity(p * oh * ow);
    for plane in 0..p {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Ok((out, arg, out_shape))
}

/// Replicates every pixel of the two trailing axes into a 2×2 block.
pub fn upsample2(data: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let (p, h, w) = planes(shape)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; p * oh * ow];
    for plane in 0..p {
        for i in 0..oh {
            for j in 0..ow {
                out[plane * oh * ow + i * ow + j] = data[plane * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Ok((out, out_shape))
}

/// Adjoint of [`upsample2`]: sums each 2×2 block of `grad`.
pub fn upsample2_adjoint(grad: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (p, h, w) = planes(in_shape).expect("shape validated in forward");
    let ow = 2 * w;
    let mut out = vec![0.0; p * h * w];
    for plane in 0..p {
        for i in 0..2 * h {
            for j in 0..ow {
                out[plane * h * w + (i / 2) * w + j / 2] += grad[plane * 4 * h * w + i * ow + j];
            }
        }
    }
    out
}

/// `ln(cosh(x))` without overflow.
pub fn lncosh(x: f64) -> f64 {
    let a = x.abs();
    if a > 20.0 {
        a - std::f64::consts::LN_2
    } else {
        a.cosh().ln()
    }
}
