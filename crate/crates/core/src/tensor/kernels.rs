//! Dense kernels shared by the graph operations.

use crate::error::{Error, Result};

/// A row-major matrix view with explicit strides, so transposes are free.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c ← beta·c + a·b` where `c` is a dense row-major `[a.rows, b.cols]` buffer.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above and MatRef construction guarantee every
    // strided access lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major product of `[m,k]` and `[k,n]` buffers into `out` (`[m,n]`).
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(MatRef::new(a, m, k), MatRef::new(b, k, n), 0.0, out);
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::dim(
            "conv2d",
            format!("({input} + 2·{padding} − {kernel}) / {stride} + 1 is not a positive integer"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C,H,W]` image into a `[C·kh·kw, OH·OW]` column matrix.
pub fn im2col(
    image: &[f64],
    (channels, height, width): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Vec<f64>> {
    let out_h = conv_output_size(height, kh, stride, padding)?;
    let out_w = conv_output_size(width, kw, stride, padding)?;
    let g = ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        padding,
        out_h,
        out_w,
    };
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    im2col_into(image, &g, &mut cols);
    Ok(cols)
}

/// Range of output columns `ow` whose input column `ow·stride + k − padding`
/// falls inside `[0, width)`.
fn valid_range(
    out: usize,
    width: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // largest ow with ow·stride + k < width + padding
    let hi = if width + padding > k {
        ((width + padding - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn im2col_into(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_range(g.out_w, g.width, kj, g.stride, g.padding);
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (v, s) in line[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: accumulates columns back into an image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_range(g.out_w, g.width, kj, g.stride, g.padding);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let line = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        dst[first..first + (hi - lo)]
                            .iter_mut()
                            .zip(line)
                            .for_each(|(d, s)| *d += s);
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
