//! im2col-based convolution kernels shared by the forward and backward rules.
//!
//! `conv2d` forward and `conv2d_transpose` backward-data both gather image
//! patches into columns; `conv2d` backward-data and `conv2d_transpose`
//! forward both scatter columns back into an image. One [`ConvGeom`]
//! describes the patch grid for either direction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output has `ceil(input / stride)` positions.
    /// An odd total pad puts the extra row/column after the image.
    Same,
    Valid,
}

/// Patch grid over an image of `channels × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn for_conv(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Geometry {
                op,
                detail: format!("kernel {kernel} and stride {stride} must be >= 1"),
            });
        }
        let (out_h, pad_top) = axis(op, height, kernel, stride, padding)?;
        let (out_w, pad_left) = axis(op, width, kernel, stride, padding)?;
        Ok(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Geometry of the `stride×`-upsampled output image of a transposed
    /// convolution whose input has `in_h × in_w` positions.
    pub fn for_transpose(
        op: &'static str,
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || kernel < stride {
            return Err(Error::Geometry {
                op,
                detail: format!("need kernel >= stride >= 1, got kernel {kernel} stride {stride}"),
            });
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::Geometry {
                op,
                detail: "zero-size input".to_string(),
            });
        }
        let crop = (kernel - stride) / 2;
        Ok(ConvGeom {
            channels,
            height: in_h * stride,
            width: in_w * stride,
            kernel,
            stride,
            pad_top: crop,
            pad_left: crop,
            out_h: in_h,
            out_w: in_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn axis(
    op: &'static str,
    size: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            if size == 0 {
                return Err(Error::Geometry {
                    op,
                    detail: "zero-size spatial input".to_string(),
                });
            }
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if size < kernel {
                return Err(Error::Geometry {
                    op,
                    detail: format!("input extent {size} smaller than kernel {kernel}"),
                });
            }
            Ok(((size - kernel) / stride + 1, 0))
        }
    }
}

#[inline]
fn source_index(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (out * stride + k).checked_sub(pad).filter(|&i| i < extent)
}

pub fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match source_index(oh, kh, g.stride, g.pad_top, g.height) {
                        None => line.fill(T::zero()),
                        Some(ih) => {
                            let src = &image[c * plane + ih * g.width..][..g.width];
                            for (ow, v) in line.iter_mut().enumerate() {
                                *v = match source_index(ow, kw, g.stride, g.pad_left, g.width) {
                                    Some(iw) => src[iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns into `image`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let Some(ih) = source_index(oh, kh, g.stride, g.pad_top, g.height) else {
                        continue;
                    };
                    let dst = &mut image[c * plane + ih * g.width..][..g.width];
                    let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, &v) in line.iter().enumerate() {
                        if let Some(iw) = source_index(ow, kw, g.stride, g.pad_left, g.width) {
                            dst[iw] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

/// `x: [n, c, h, w]`, `w: [o, c, k, k]` → `[n, o, out_h, out_w]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], n: usize, w: &[T], bias: &[T], o: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.image_len();
    let out_plane = g.col_cols();
    let mut out = vec![T::zero(); n * o * out_plane];
    out.par_chunks_mut(o * out_plane)
        .zip(x.par_chunks(in_len))
        .for_each(|(out_b, x_b)| {
            let mut cols = vec![T::zero(); g.col_rows() * out_plane];
            im2col(x_b, g, &mut cols);
            T::gemm(
                o,
                g.col_rows(),
                out_plane,
                T::one(),
                w,
                (g.col_rows(), 1),
                &cols,
                (out_plane, 1),
                T::zero(),
                out_b,
                (out_plane, 1),
            );
            add_bias(out_b, bias, out_plane);
        });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    o: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let in_len = g.image_len();
    let out_plane = g.col_cols();
    let rows = g.col_rows();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let x_b = &x[b * in_len..(b + 1) * in_len];
            let dy_b = &dy[b * o * out_plane..(b + 1) * o * out_plane];
            let mut cols = vec![T::zero(); rows * out_plane];
            im2col(x_b, g, &mut cols);
            let mut dw = vec![T::zero(); o * rows];
            // dW[o, r] = dy_b[o, p] · cols[r, p]^T
            T::gemm(o, out_plane, rows, T::one(), dy_b, (out_plane, 1), &cols, (1, out_plane), T::zero(), &mut dw, (rows, 1));
            let dx = need_dx.then(|| {
                // dcols[r, p] = W[o, r]^T · dy_b[o, p]
                T::gemm(rows, o, out_plane, T::one(), w, (1, rows), dy_b, (out_plane, 1), T::zero(), &mut cols, (out_plane, 1));
                let mut dx_b = vec![T::zero(); in_len];
                col2im(&cols, g, &mut dx_b);
                dx_b
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); o * rows];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_len));
    for (dw_b, dx_b) in per_sample {
        for (a, b) in dw.iter_mut().zip(dw_b) {
            *a += b;
        }
        if let (Some(dx), Some(dx_b)) = (dx.as_mut(), dx_b) {
            dx.extend(dx_b);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: channel_sums(dy, n, o, out_plane),
    }
}

/// `x: [n, c, h, w]`, `w: [c, o, k, k]` → `[n, o, h·s, w·s]`; `g` describes the output image.
pub fn conv_transpose_forward<T: Scalar>(x: &[T], n: usize, c: usize, w: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let in_plane = g.col_cols();
    let rows = g.col_rows();
    let out_len = g.image_len();
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(c * in_plane))
        .for_each(|(out_b, x_b)| {
            let mut cols = vec![T::zero(); rows * in_plane];
            // cols[r, p] = W[c, r]^T · x_b[c, p]
            T::gemm(rows, c, in_plane, T::one(), w, (1, rows), x_b, (in_plane, 1), T::zero(), &mut cols, (in_plane, 1));
            col2im(&cols, g, out_b);
            add_bias(out_b, bias, plane);
        });
    out
}

pub fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    w: &[T],
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let in_plane = g.col_cols();
    let rows = g.col_rows();
    let out_len = g.image_len();
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let x_b = &x[b * c * in_plane..(b + 1) * c * in_plane];
            let dy_b = &dy[b * out_len..(b + 1) * out_len];
            let mut dcols = vec![T::zero(); rows * in_plane];
            im2col(dy_b, g, &mut dcols);
            let mut dw = vec![T::zero(); c * rows];
            // dW[c, r] = x_b[c, p] · dcols[r, p]^T
            T::gemm(c, in_plane, rows, T::one(), x_b, (in_plane, 1), &dcols, (1, in_plane), T::zero(), &mut dw, (rows, 1));
            let dx = need_dx.then(|| {
                let mut dx_b = vec![T::zero(); c * in_plane];
                T::gemm(c, rows, in_plane, T::one(), w, (rows, 1), &dcols, (in_plane, 1), T::zero(), &mut dx_b, (in_plane, 1));
                dx_b
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); c * rows];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * c * in_plane));
    for (dw_b, dx_b) in per_sample {
        for (a, b) in dw.iter_mut().zip(dw_b) {
            *a += b;
        }
        if let (Some(dx), Some(dx_b)) = (dx.as_mut(), dx_b) {
            dx.extend(dx_b);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: channel_sums(dy, n, g.channels, g.height * g.width),
    }
}

fn channel_sums<T: Scalar>(dy: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..n {
        for (ch, slot) in db.iter_mut().enumerate() {
            let base = (b * channels + ch) * plane;
            *slot += dy[base..base + plane].iter().copied().sum::<T>();
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_halving_exact() {
        let mut s = 256;
        while s > 16 {
            let g = ConvGeom::for_conv("t", 1, s, s, 3, 2, Padding::Same).unwrap();
            assert_eq!(g.out_h, s / 2);
            assert_eq!(g.pad_top, 0);
            s /= 2;
        }
        let g = ConvGeom::for_conv("t", 1, 7, 7, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (7, 1));
        let g = ConvGeom::for_conv("t", 1, 7, 7, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
    }

    #[test]
    fn valid_too_small_is_geometry_error() {
        assert!(matches!(
            ConvGeom::for_conv("t", 1, 2, 2, 3, 1, Padding::Valid),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom::for_conv("t", 2, 5, 4, 3, 2, Padding::Same).unwrap();
        let img: Vec<f64> = (0..g.image_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols_probe: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_probe, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
