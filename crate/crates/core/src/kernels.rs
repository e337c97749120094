//! Value-level compute kernels behind the graph ops.
//!
//! Convolutions go through im2col and a strided GEMM. The three convolution
//! kernels (forward, input-adjoint, kernel-adjoint) are each other's
//! derivatives, which is what lets the graph differentiate through a gradient.

use crate::error::{Error, Result};
use crate::tensor::{mat_strides, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [batch, in_ch, h, w] = input;
        let [out_ch, kc, kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if kc != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_ch} channels but kernel expects {kc}"),
            ));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"),
            ));
        }
        Ok(Self {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.h, self.w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.oh, self.ow]
    }

    /// Source pixel for kernel tap `(ky, kx)` at output `(oy, ox)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

pub fn dims4(t: &Tensor<impl Real>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected a 4-d tensor, got {s:?}"))),
    }
}

fn im2col<T: Real>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.w + x] = plane[y * g.w + x] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `[B,C,H,W] ⋆ [F,C,kh,kw] → [B,F,H',W']`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(dims4(x, "conv2d")?, dims4(k, "conv2d")?, stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&g.output_shape());
    let mut col = vec![T::zero(); rows * cols];
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * cols;
    for b in 0..g.batch {
        im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut col);
        T::gemm_raw(
            g.out_ch,
            rows,
            cols,
            k.data(),
            mat_strides(rows, false),
            &col,
            mat_strides(cols, false),
            T::zero(),
            &mut out.data_mut()[b * out_len..(b + 1) * out_len],
            mat_strides(cols, false),
        );
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] in its input: maps `[B,F,H',W']` back onto `[B,C,H,W]`.
pub fn conv2d_input_adjoint<T: Real>(
    gy: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
    hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [b, f, oh, ow] = dims4(gy, "conv_transpose")?;
    let [kf, c, kh, kw] = dims4(k, "conv_transpose")?;
    if kf != f {
        return Err(Error::shape(
            "conv_transpose",
            format!("gradient has {f} channels but kernel has {kf} filters"),
        ));
    }
    let g = ConvGeom::new([b, c, hw.0, hw.1], [kf, c, kh, kw], stride, pad)?;
    if (g.oh, g.ow) != (oh, ow) {
        return Err(Error::shape(
            "conv_transpose",
            format!("gradient spatial {oh}x{ow} inconsistent with input {}x{}", hw.0, hw.1),
        ));
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&g.input_shape());
    let mut col = vec![T::zero(); rows * cols];
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * cols;
    for bi in 0..g.batch {
        T::gemm_raw(
            rows,
            g.out_ch,
            cols,
            k.data(),
            mat_strides(rows, true),
            &gy.data()[bi * out_len..(bi + 1) * out_len],
            mat_strides(cols, false),
            T::zero(),
            &mut col,
            mat_strides(cols, false),
        );
        col2im_add(&g, &col, &mut out.data_mut()[bi * in_len..(bi + 1) * in_len]);
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] in its kernel: `Σ_b gy_b · im2col(x_b)ᵀ`.
pub fn conv2d_kernel_adjoint<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    khw: (usize, usize),
) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(x, "conv_kernel_grad")?;
    let [gb, f, oh, ow] = dims4(gy, "conv_kernel_grad")?;
    if gb != b {
        return Err(Error::shape(
            "conv_kernel_grad",
            format!("batch {b} vs gradient batch {gb}"),
        ));
    }
    let g = ConvGeom::new([b, c, h, w], [f, c, khw.0, khw.1], stride, pad)?;
    if (g.oh, g.ow) != (oh, ow) {
        return Err(Error::shape(
            "conv_kernel_grad",
            format!("gradient spatial {oh}x{ow} inconsistent with input {h}x{w}"),
        ));
    }
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&g.kernel_shape());
    let mut col = vec![T::zero(); rows * cols];
    let in_len = c * h * w;
    let out_len = f * cols;
    for bi in 0..b {
        im2col(&g, &x.data()[bi * in_len..(bi + 1) * in_len], &mut col);
        T::gemm_raw(
            f,
            cols,
            rows,
            &gy.data()[bi * out_len..(bi + 1) * out_len],
            mat_strides(cols, false),
            &col,
            mat_strides(cols, true),
            T::one(),
            out.data_mut(),
            mat_strides(rows, false),
        );
    }
    Ok(out)
}

/// `op(a) · op(b)` for 2-d tensors, `op` optionally transposing.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (ar, ac) = dims2(a, "matmul")?;
    let (br, bc) = dims2(b, "matmul")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} · {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm_raw(
        m,
        k,
        n,
        a.data(),
        mat_strides(ac, ta),
        b.data(),
        mat_strides(bc, tb),
        T::zero(),
        out.data_mut(),
        mat_strides(n, false),
    );
    Ok(out)
}

pub fn dims2(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(Error::shape(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)` counts.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums over every axis except `axis`, returning a 1-d tensor.
pub fn sum_keep<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::shape(
            "sum_keep",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); n];
    let d = x.data();
    for o in 0..outer {
        for (j, acc) in out.iter_mut().enumerate() {
            let base = (o * n + j) * inner;
            *acc = *acc + d[base..base + inner].iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![n], out)
}

/// Repeats a 1-d tensor along `axis` of `shape`.
pub fn broadcast_along<T: Real>(v: &Tensor<T>, axis: usize, shape: &[usize]) -> Result<Tensor<T>> {
    if axis >= shape.len() || v.shape() != [shape[axis]] {
        return Err(Error::shape(
            "broadcast_along",
            format!("cannot spread {:?} along axis {axis} of {shape:?}", v.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * n * inner);
    for _ in 0..outer {
        for &val in v.data() {
            out.extend(std::iter::repeat_n(val, inner));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row-wise `x − logsumexp(x)` of a 2-d tensor, max-subtracted.
pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = dims2(x, "log_softmax")?;
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Ok(out)
}

/// Per-row cross-entropy `−Σ_c target·log softmax(logits)` computed outside any graph.
pub fn cross_entropy_rows<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<T>> {
    logits.expect_same_shape("cross_entropy", target)?;
    let ls = log_softmax_rows(logits)?;
    let (rows, _) = dims2(logits, "cross_entropy")?;
    Ok((0..rows)
        .map(|r| {
            -ls.row(r)
                .iter()
                .zip(target.row(r))
                .map(|(&l, &t)| if t == T::zero() { T::zero() } else { t * l })
                .sum::<T>()
        })
        .collect())
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.dim0())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
