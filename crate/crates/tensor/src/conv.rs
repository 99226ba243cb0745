//! im2col / col2im kernels behind the convolution op.

use crate::Scalar;

/// Geometry of one 2-D convolution over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix (`in_c * k * k`).
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1×1 stride-1 unpadded convolutions read the input directly.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output index range `[lo, hi)` along one axis for which
    /// `o * stride + offset - pad` falls inside `0..size`.
    fn valid_range(&self, offset: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.pad as isize;
        // o*s + shift >= 0  and  o*s + shift < size
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = if size as isize - shift <= 0 {
            0
        } else {
            ((size as isize - shift + s - 1) / s).min(out as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Unfolds `x` (`in_c × in_h × in_w`) into `cols` (`col_rows × col_cols`).
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, ow);
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                dst.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.pad;
                    let src_row = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * s + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `dx`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, ow);
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.pad;
                    let dst_row = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * s + kx - g.pad] += src_row[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> ConvGeom {
        ConvGeom {
            in_c: c,
            in_h: h,
            in_w: w,
            kernel: k,
            stride: s,
            pad: p,
        }
    }

    // Direct indexing reference for im2col.
    fn im2col_ref(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.col_rows() * oh * ow];
        for c in 0..g.in_c {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                out[row * oh * ow + oy * ow + ox] =
                                    x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn output_sizes() {
        assert_eq!(geom(3, 64, 64, 3, 2, 1).out_h(), 32);
        assert_eq!(geom(3, 64, 64, 4, 2, 1).out_h(), 32);
        assert_eq!(geom(3, 8, 8, 3, 1, 1).out_w(), 8);
        assert_eq!(geom(3, 8, 8, 1, 1, 0).out_w(), 8);
    }

    #[test]
    fn im2col_matches_reference_and_col2im_is_adjoint() {
        for &(c, h, w, k, s, p) in &[
            (2, 5, 6, 3, 1, 1),
            (3, 8, 8, 3, 2, 1),
            (1, 7, 5, 4, 2, 1),
            (2, 4, 4, 1, 1, 0),
            (1, 6, 6, 5, 1, 2),
            (2, 9, 7, 3, 2, 0),
        ] {
            let g = geom(c, h, w, k, s, p);
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(&g, &x, &mut cols);
            assert_eq!(cols, im2col_ref(&g, &x), "geom {g:?}");

            // <im2col(x), y> == <x, col2im(y)>
            let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&g, &y, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "geom {g:?}");
        }
    }
}
