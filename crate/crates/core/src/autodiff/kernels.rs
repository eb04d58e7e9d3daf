//! Slice-level kernels shared by forward and backward passes.

use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_height(&self) -> usize {
        Self::out_extent(self.height, self.kernel, self.stride, self.pad).unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        Self::out_extent(self.width, self.kernel, self.stride, self.pad).unwrap_or(0)
    }

    /// `true` when im2col is the identity reshaping (1x1, stride 1, no pad).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds `x[C,H,W]` into `cols[C*k*k, Ho*Wo]`; padded taps read as zero.
pub fn im2col<T: Scalar>(x: &[T], w: &Window, cols: &mut [T]) {
    let (ho, wo) = (w.out_height(), w.out_width());
    let plane = ho * wo;
    let k = w.kernel;
    for c in 0..w.channels {
        let src = &x[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * w.stride + ky) as isize - w.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= w.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w.width..(iy as usize + 1) * w.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * w.stride + kx) as isize - w.pad as isize;
                        *out = if ix < 0 || ix >= w.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `dx`.
pub fn col2im_add<T: Scalar>(cols: &[T], w: &Window, dx: &mut [T]) {
    let (ho, wo) = (w.out_height(), w.out_width());
    let plane = ho * wo;
    let k = w.kernel;
    for c in 0..w.channels {
        let dst = &mut dx[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * w.stride + ky) as isize - w.pad as isize;
                    if iy < 0 || iy >= w.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w.width..(iy as usize + 1) * w.width];
                    for ox in 0..wo {
                        let ix = (ox * w.stride + kx) as isize - w.pad as isize;
                        if ix >= 0 && ix < w.width as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling with `-inf` padding; records the flat input index of each maximum.
pub fn maxpool<T: Scalar>(x: &[T], w: &Window, out: &mut [T], argmax: &mut [u32]) {
    let (ho, wo) = (w.out_height(), w.out_width());
    for c in 0..w.channels {
        let base = c * w.height * w.width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = u32::MAX;
                for ky in 0..w.kernel {
                    let iy = (oy * w.stride + ky) as isize - w.pad as isize;
                    if iy < 0 || iy >= w.height as isize {
                        continue;
                    }
                    for kx in 0..w.kernel {
                        let ix = (ox * w.stride + kx) as isize - w.pad as isize;
                        if ix < 0 || ix >= w.width as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w.width + ix as usize;
                        // strict `>` keeps the first maximum in scan order
                        if x[idx] > best || best_idx == u32::MAX {
                            best = x[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (c * ho + oy) * wo + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(c: usize, h: usize, k: usize, s: usize, p: usize) -> Window {
        Window {
            channels: c,
            height: h,
            width: h,
            kernel: k,
            stride: s,
            pad: p,
        }
    }

    #[test]
    fn out_extent_formula() {
        assert_eq!(Window::out_extent(256, 3, 2, 1), Some(128));
        assert_eq!(Window::out_extent(8, 5, 1, 2), Some(8));
        assert_eq!(Window::out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(Window::out_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c
        let w = win(2, 5, 3, 2, 1);
        let x: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let n = w.col_rows() * w.out_height() * w.out_width();
        let c: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, &w, &mut cols);
        let mut back = vec![0.0; 50];
        col2im_add(&c, &w, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn maxpool_same_padding_preserves_extent() {
        let w = win(1, 4, 5, 1, 2);
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut out = vec![0.0; 16];
        let mut arg = vec![0; 16];
        maxpool(&x, &w, &mut out, &mut arg);
        assert_eq!(out[0], 10.0);
        assert_eq!(out[15], 15.0);
    }
}
