//! im2col-based 2-D convolution kernels over `[channels, time, freq]` maps.

use alloc::vec;
use alloc::vec::Vec;

use super::array::gemm;

/// Geometry of a 'same'-padded strided convolution.
///
/// Output extent is `ceil(input / stride)`; the total zero padding is split
/// evenly with the odd element on the trailing side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_t: usize,
    pub in_f: usize,
    pub kernel_t: usize,
    pub kernel_f: usize,
    pub stride_t: usize,
    pub stride_f: usize,
    pub out_t: usize,
    pub out_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

pub fn same_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

impl ConvGeometry {
    pub fn same(
        in_channels: usize,
        in_t: usize,
        in_f: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        let (kernel_t, kernel_f) = kernel;
        let (stride_t, stride_f) = stride;
        let out_t = same_extent(in_t, stride_t);
        let out_f = same_extent(in_f, stride_f);
        let pad_t = ((out_t - 1) * stride_t + kernel_t).saturating_sub(in_t) / 2;
        let pad_f = ((out_f - 1) * stride_f + kernel_f).saturating_sub(in_f) / 2;
        Self {
            in_channels,
            in_t,
            in_f,
            kernel_t,
            kernel_f,
            stride_t,
            stride_f,
            out_t,
            out_f,
            pad_t,
            pad_f,
        }
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_t * self.kernel_f
    }

    /// Columns of the im2col matrix.
    pub fn positions(&self) -> usize {
        self.out_t * self.out_f
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_t == 1
            && self.kernel_f == 1
            && self.stride_t == 1
            && self.stride_f == 1
    }

    /// Output indices `[lo, hi)` along one axis whose tap `k` lands inside
    /// the input.
    #[inline]
    fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        // o * stride + k - pad in [0, extent)
        let lo = pad.saturating_sub(k).div_ceil(stride);
        let hi = if extent + pad > k {
            (extent + pad - k).div_ceil(stride).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds `x` (`[C, T, F]`) into a `[patch_len, positions]` matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        if self.is_pointwise() {
            return x.to_vec();
        }
        let p = self.positions();
        let mut col = Vec::with_capacity(self.patch_len() * p);
        let (sf, of_n) = (self.stride_f, self.out_f);
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_t * self.in_f..(c + 1) * self.in_t * self.in_f];
            for kt in 0..self.kernel_t {
                let (t_lo, t_hi) = Self::valid_range(kt, self.stride_t, self.pad_t, self.in_t, self.out_t);
                for kf in 0..self.kernel_f {
                    let (f_lo, f_hi) = Self::valid_range(kf, sf, self.pad_f, self.in_f, of_n);
                    col.resize(col.len() + t_lo * of_n, 0.0);
                    for ot in t_lo..t_hi {
                        let it = ot * self.stride_t + kt - self.pad_t;
                        let src_row = &plane[it * self.in_f..(it + 1) * self.in_f];
                        col.resize(col.len() + f_lo, 0.0);
                        if f_hi > f_lo {
                            let start = f_lo * sf + kf - self.pad_f;
                            if sf == 1 {
                                col.extend_from_slice(&src_row[start..start + (f_hi - f_lo)]);
                            } else {
                                col.extend(src_row[start..].iter().step_by(sf).take(f_hi - f_lo));
                            }
                        }
                        col.resize(col.len() + (of_n - f_hi), 0.0);
                    }
                    col.resize(col.len() + (self.out_t - t_hi) * of_n, 0.0);
                }
            }
        }
        debug_assert_eq!(col.len(), self.patch_len() * p);
        col
    }

    /// Folds a `[patch_len, positions]` matrix back onto `[C, T, F]`, accumulating into `out`.
    pub fn col2im(&self, col: &[f64], out: &mut [f64]) {
        if self.is_pointwise() {
            for (o, c) in out.iter_mut().zip(col) {
                *o += c;
            }
            return;
        }
        let p = self.positions();
        let (sf, of_n) = (self.stride_f, self.out_f);
        for c in 0..self.in_channels {
            let plane = &mut out[c * self.in_t * self.in_f..(c + 1) * self.in_t * self.in_f];
            for kt in 0..self.kernel_t {
                let (t_lo, t_hi) = Self::valid_range(kt, self.stride_t, self.pad_t, self.in_t, self.out_t);
                for kf in 0..self.kernel_f {
                    let (f_lo, f_hi) = Self::valid_range(kf, sf, self.pad_f, self.in_f, of_n);
                    if f_hi <= f_lo {
                        continue;
                    }
                    let row = (c * self.kernel_t + kt) * self.kernel_f + kf;
                    let src = &col[row * p..(row + 1) * p];
                    let start = f_lo * sf + kf - self.pad_f;
                    for ot in t_lo..t_hi {
                        let it = ot * self.stride_t + kt - self.pad_t;
                        let src_row = &src[ot * of_n + f_lo..ot * of_n + f_hi];
                        let dst_row = &mut plane[it * self.in_f..(it + 1) * self.in_f];
                        if sf == 1 {
                            for (d, s) in dst_row[start..start + src_row.len()].iter_mut().zip(src_row) {
                                *d += s;
                            }
                        } else {
                            for (d, s) in dst_row[start..].iter_mut().step_by(sf).zip(src_row) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[Cout, P] = W[Cout, K] * im2col(x)`.
pub fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64], out_channels: usize) -> Vec<f64> {
    let col = g.im2col(x);
    let mut out = vec![0.0; out_channels * g.positions()];
    gemm(
        out_channels,
        g.patch_len(),
        g.positions(),
        w,
        false,
        &col,
        false,
        &mut out,
        0.0,
    );
    out
}

/// Adjoint of [`conv_forward`] with respect to its input, accumulated into `dx`.
pub fn conv_input_adjoint(
    g: &ConvGeometry,
    dout: &[f64],
    w: &[f64],
    out_channels: usize,
    dx: &mut [f64],
) {
    let mut dcol = vec![0.0; g.patch_len() * g.positions()];
    gemm(
        g.patch_len(),
        out_channels,
        g.positions(),
        w,
        true,
        dout,
        false,
        &mut dcol,
        0.0,
    );
    g.col2im(&dcol, dx);
}

/// Adjoint of [`conv_forward`] with respect to its weight, accumulated into `dw`.
pub fn conv_weight_adjoint(
    g: &ConvGeometry,
    dout: &[f64],
    x: &[f64],
    out_channels: usize,
    dw: &mut [f64],
) {
    let col = g.im2col(x);
    gemm(
        out_channels,
        g.positions(),
        g.patch_len(),
        dout,
        false,
        &col,
        true,
        dw,
        1.0,
    );
}
