//! Forward and backward kernels for the handful of operators the models use.
//!
//! Convolutions are lowered to GEMM through im2col / col2im on channels-last
//! data. The transposed convolution reuses the same lowering in the opposite
//! direction, so its forward pass is exactly the data-gradient of `conv2d`.

use crate::error::{Error, Result};

use super::Tensor;

/// Output extent of a strided, zero-padded cross-correlation.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `stride·(in−1) + kernel − 2·pad`.
pub fn deconv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input == 0 {
        return Err(Error::config("stride and input extent must be positive"));
    }
    let full = stride * (input - 1) + kernel;
    if full <= 2 * pad {
        return Err(Error::config(format!(
            "transposed convolution output extent would be non-positive (in {input}, kernel {kernel}, stride {stride}, pad {pad})"
        )));
    }
    Ok(full - 2 * pad)
}

/// `c = a · b` (+ `beta·c`) for row-major `c` of shape `m×n`, with arbitrary
/// strides on `a` (`m×k`) and `b` (`k×n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial layout shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    batch: usize,
    /// The cross-correlation input (the transposed convolution output).
    in_h: usize,
    in_w: usize,
    channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    /// The cross-correlation output (the transposed convolution input).
    out_h: usize,
    out_w: usize,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn cols(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visit every (column-row offset, source offset) pair that lies inside
    /// the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let c = self.channels;
        let cols = self.cols();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * c;
                            let dst = row * cols + (ky * self.kw + kx) * c;
                            f(dst, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let c = self.channels;
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each_tap(|dst, src| cols[dst..dst + c].copy_from_slice(&input[src..src + c]));
        cols
    }

    fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let c = self.channels;
        let mut out = vec![0.0; self.batch * self.in_h * self.in_w * c];
        self.for_each_tap(|dst, src| {
            for (o, v) in out[src..src + c].iter_mut().zip(&cols[dst..dst + c]) {
                *o += v;
            }
        });
        out
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::shape(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    let c = bias.len();
    for row in out.chunks_exact_mut(c) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad(dout: &[f32], channels: usize) -> Vec<f32> {
    let mut db = vec![0.0; channels];
    for row in dout.chunks_exact(channels) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    db
}

/// Geometry of a `conv2d` call, validated against the operand shapes.
fn conv_lowering(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Lowering> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d weight")?;
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw, wcin) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wcin != cin {
        return Err(Error::config(format!(
            "conv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::config(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            b.shape()
        )));
    }
    Ok(Lowering {
        batch: n,
        in_h: h,
        in_w: wd,
        channels: cin,
        kh,
        kw,
        stride,
        pad,
        out_h: conv_out_extent(h, kh, stride, pad)?,
        out_w: conv_out_extent(wd, kw, stride, pad)?,
    })
}

/// Cross-correlation: `x [N,H,W,Cin]`, `w [Cout,kh,kw,Cin]`, `b [Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let low = conv_lowering(x, w, b, stride, pad)?;
    let cout = w.shape()[0];
    let (m, k) = (low.rows(), low.cols());
    let mut out = vec![0.0; m * cout];
    let owned;
    let cols: &[f32] = if low.is_pointwise() {
        x.data()
    } else {
        owned = low.im2col(x.data());
        &owned
    };
    gemm(m, k, cout, cols, (k, 1), w.data(), (1, k), 0.0, &mut out);
    add_bias(&mut out, b.data());
    Tensor::new(vec![low.batch, low.out_h, low.out_w, cout], out)
}

/// Gradients of a `conv2d` call; each requested part is `Some`.
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
    need_dx: bool,
    need_params: bool,
) -> Result<ConvGrads> {
    let low = conv_lowering(x, w, b, stride, pad)?;
    let cout = w.shape()[0];
    let (m, k) = (low.rows(), low.cols());
    if dout.len() != m * cout {
        return Err(Error::shape("conv2d upstream gradient has the wrong size"));
    }
    let mut grads = ConvGrads {
        dx: None,
        dw: None,
        db: None,
    };
    if need_params {
        let owned;
        let cols: &[f32] = if low.is_pointwise() {
            x.data()
        } else {
            owned = low.im2col(x.data());
            &owned
        };
        let mut dw = vec![0.0; cout * k];
        gemm(cout, m, k, dout.data(), (1, cout), cols, (k, 1), 0.0, &mut dw);
        grads.dw = Some(Tensor::new(w.shape().to_vec(), dw)?);
        grads.db = Some(Tensor::new(vec![cout], bias_grad(dout.data(), cout))?);
    }
    if need_dx {
        let mut dcols = vec![0.0; m * k];
        gemm(m, cout, k, dout.data(), (cout, 1), w.data(), (k, 1), 0.0, &mut dcols);
        let dx = if low.is_pointwise() {
            dcols
        } else {
            low.col2im(&dcols)
        };
        grads.dx = Some(Tensor::new(x.shape().to_vec(), dx)?);
    }
    Ok(grads)
}

fn deconv_lowering(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Lowering> {
    expect_rank(x, 4, "deconv2d input")?;
    expect_rank(w, 4, "deconv2d weight")?;
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wcin, kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wcin != cin {
        return Err(Error::config(format!(
            "deconv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::config(format!(
            "deconv2d bias shape {:?} does not match {cout} output channels",
            b.shape()
        )));
    }
    Ok(Lowering {
        batch: n,
        in_h: deconv_out_extent(h, kh, stride, pad)?,
        in_w: deconv_out_extent(wd, kw, stride, pad)?,
        channels: cout,
        kh,
        kw,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    })
}

/// Transposed convolution: `x [N,H,W,Cin]`, `w [Cin,kh,kw,Cout]`, `b [Cout]`.
///
/// Without the bias this is the adjoint of [`conv2d`] applied with the same
/// weight tensor read as `[Cout', kh, kw, Cin']` where `Cout' = Cin`.
pub fn deconv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let low = deconv_lowering(x, w, b, stride, pad)?;
    let cin = x.shape()[3];
    let (m, k) = (low.rows(), low.cols());
    let mut cols = vec![0.0; m * k];
    gemm(m, cin, k, x.data(), (cin, 1), w.data(), (k, 1), 0.0, &mut cols);
    let mut out = low.col2im(&cols);
    add_bias(&mut out, b.data());
    Tensor::new(vec![low.batch, low.in_h, low.in_w, low.channels], out)
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
    need_dx: bool,
    need_params: bool,
) -> Result<ConvGrads> {
    let low = deconv_lowering(x, w, b, stride, pad)?;
    let cin = x.shape()[3];
    let cout = low.channels;
    let (m, k) = (low.rows(), low.cols());
    if dout.len() != low.batch * low.in_h * low.in_w * cout {
        return Err(Error::shape("deconv2d upstream gradient has the wrong size"));
    }
    let gcols = low.im2col(dout.data());
    let mut grads = ConvGrads {
        dx: None,
        dw: None,
        db: None,
    };
    if need_params {
        let mut dw = vec![0.0; cin * k];
        gemm(cin, m, k, x.data(), (1, cin), &gcols, (k, 1), 0.0, &mut dw);
        grads.dw = Some(Tensor::new(w.shape().to_vec(), dw)?);
        grads.db = Some(Tensor::new(vec![cout], bias_grad(dout.data(), cout))?);
    }
    if need_dx {
        let mut dx = vec![0.0; m * cin];
        gemm(m, k, cin, &gcols, (k, 1), w.data(), (1, k), 0.0, &mut dx);
        grads.dx = Some(Tensor::new(x.shape().to_vec(), dx)?);
    }
    Ok(grads)
}

fn dense_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(x, 2, "dense input")?;
    expect_rank(w, 2, "dense weight")?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (c, wd) = (w.shape()[0], w.shape()[1]);
    if wd != d {
        return Err(Error::shape(format!(
            "dense input dimension {d} does not match weight dimension {wd}"
        )));
    }
    if b.shape() != [c] {
        return Err(Error::shape(format!(
            "dense bias shape {:?} does not match {c} outputs",
            b.shape()
        )));
    }
    Ok((n, d, c))
}

/// Affine map `x [N,d] · wᵀ + b` with `w [C,d]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d, c) = dense_dims(x, w, b)?;
    let mut out = vec![0.0; n * c];
    gemm(n, d, c, x.data(), (d, 1), w.data(), (1, d), 0.0, &mut out);
    add_bias(&mut out, b.data());
    Tensor::new(vec![n, c], out)
}

pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dout: &Tensor,
    need_dx: bool,
    need_params: bool,
) -> Result<ConvGrads> {
    let (n, d, c) = dense_dims(x, w, b)?;
    if dout.shape() != [n, c] {
        return Err(Error::shape("dense upstream gradient has the wrong shape"));
    }
    let mut grads = ConvGrads {
        dx: None,
        dw: None,
        db: None,
    };
    if need_params {
        let mut dw = vec![0.0; c * d];
        gemm(c, n, d, dout.data(), (1, c), x.data(), (d, 1), 0.0, &mut dw);
        grads.dw = Some(Tensor::new(vec![c, d], dw)?);
        grads.db = Some(Tensor::new(vec![c], bias_grad(dout.data(), c))?);
    }
    if need_dx {
        let mut dx = vec![0.0; n * d];
        gemm(n, c, d, dout.data(), (c, 1), w.data(), (d, 1), 0.0, &mut dx);
        grads.dx = Some(Tensor::new(vec![n, d], dx)?);
    }
    Ok(grads)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `[N,H,W,C] → [N,C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 4, "global_avg_pool input")?;
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let scale = 1.0 / (h * w) as f32;
    let mut out = vec![0.0; n * c];
    for (b, pooled) in out.chunks_exact_mut(c).enumerate() {
        let image = &x.data()[b * h * w * c..(b + 1) * h * w * c];
        for pixel in image.chunks_exact(c) {
            for (p, v) in pooled.iter_mut().zip(pixel) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p *= scale);
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dout: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if dout.shape() != [n, c] {
        return Err(Error::shape("global_avg_pool upstream gradient has the wrong shape"));
    }
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Vec::with_capacity(n * h * w * c);
    for g in dout.data().chunks_exact(c) {
        for _ in 0..h * w {
            dx.extend(g.iter().map(|v| v * scale));
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Row-wise `softmax(logits / mu)` over the last axis.
pub fn softmax_t(logits: &Tensor, mu: f32) -> Result<Tensor> {
    if !(mu > 0.0) {
        return Err(Error::config(format!("softmax temperature must be positive, got {mu}")));
    }
    let c = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax of an empty shape"))?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        softmax_row_in_place(row, mu);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_row_in_place(row: &mut [f32], mu: f32) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / mu).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Vector-Jacobian product of `softmax_t` given its output `probs`.
pub fn softmax_t_backward(probs: &Tensor, dout: &Tensor, mu: f32) -> Tensor {
    let c = *probs.shape().last().expect("non-empty shape");
    let mut dx = vec![0.0; probs.len()];
    for ((p, g), d) in probs
        .data()
        .chunks_exact(c)
        .zip(dout.data().chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        let dot: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for i in 0..c {
            d[i] = p[i] * (g[i] - dot) / mu;
        }
    }
    Tensor::new(probs.shape().to_vec(), dx).expect("same shape")
}
