use super::tensor::Real;

/// Shape bookkeeping for one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
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

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        }
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kj - padding`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.padding {
            0
        } else {
            (self.padding - kj).div_ceil(s)
        };
        // ox*s + kj - p <= w - 1  <=>  ox <= (w - 1 + p - kj) / s
        let hi = if self.w + self.padding > kj {
            ((self.w - 1 + self.padding - kj) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds `[C_in, H, W]` into the `[C_in*kH*kW, out_h*out_w]` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let spatial = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.patch() * spatial];
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let start = lo + kj - g.padding;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let spatial = g.out_h * g.out_w;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src_rows = &cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &src_rows[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kj - g.padding] += src[ox];
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

    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.out_h * g.out_w];
        for co in 0..g.c_out {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * k[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(c_in, h, w, c_out, kh, kw, stride, pad) in &[
            (1, 5, 6, 2, 3, 3, 1, 1),
            (2, 7, 5, 3, 3, 2, 2, 1),
            (3, 4, 4, 1, 1, 1, 1, 0),
            (2, 6, 9, 2, 3, 3, 3, 2),
            (1, 3, 3, 1, 3, 3, 1, 0),
        ] {
            let g = ConvGeom::new(c_in, h, w, c_out, kh, kw, stride, pad);
            let x: Vec<f64> = (0..c_in * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let k: Vec<f64> = (0..c_out * g.patch()).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let cols = im2col(&x, &g);
            let mut out = vec![0.0; c_out * g.out_h * g.out_w];
            f64::gemm(c_out, g.patch(), g.out_h * g.out_w, &k, false, &cols, false, &mut out, 0.0);
            assert_eq!(out, naive_conv(&x, &k, &g), "geometry {g:?}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 6, 7, 1, 3, 3, 2, 1);
        let x: Vec<f64> = (0..2 * 6 * 7).map(|i| (i as f64 * 0.37).sin()).collect();
        let spatial = g.out_h * g.out_w;
        let y: Vec<f64> = (0..g.patch() * spatial).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
