use super::Float;

/// Stride and zero padding of a 2-D convolution, as (height, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeom {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    pub fn unit() -> Self {
        Self::new((1, 1), (0, 0))
    }

    /// Output size of a convolution over an `h×w` input, or `None` when the
    /// kernel does not fit the padded input.
    pub fn conv_out(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (ph, pw) = self.padding;
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    /// Output size of the transposed convolution over an `h×w` input.
    pub fn transpose_out(
        &self,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    ) -> Option<(usize, usize)> {
        let (ph, pw) = self.padding;
        let (sh, sw) = self.stride;
        let full_h = (h - 1) * sh + kh;
        let full_w = (w - 1) * sw + kw;
        if sh == 0 || sw == 0 || full_h <= 2 * ph || full_w <= 2 * pw {
            return None;
        }
        Some((full_h - 2 * ph, full_w - 2 * pw))
    }
}

/// Geometry shared by im2col/col2im: an image of `c×h×w` unfolded into
/// patches of `kh×kw` with `oh×ow` output positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Patches {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: Conv2dGeom,
}

impl Patches {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input row for output row `pos` and kernel row `k`, or `None` when it
    /// falls into the padding.
    #[inline]
    fn src(pos: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = pos * stride + k;
        if p < pad || p - pad >= len {
            None
        } else {
            Some(p - pad)
        }
    }

    /// Output columns `lo..hi` whose input column for kernel column `kx`
    /// lies inside the image; the input column of `lo` is returned too.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize, usize) {
        let (sw, pw) = (self.geom.stride.1, self.geom.padding.1);
        let lo = if kx >= pw { 0 } else { (pw - kx).div_ceil(sw) };
        let hi = if self.w + pw <= kx {
            0
        } else {
            ((self.w - 1 + pw - kx) / sw + 1).min(self.ow)
        };
        let hi = hi.max(lo);
        (lo, hi, lo * sw + kx - pw.min(lo * sw + kx))
    }

    /// Unfolds `img` (`c×h×w`) into `col` (`rows × cols`).
    pub fn im2col<S: Float>(&self, img: &[S], col: &mut [S]) {
        let (sh, sw) = self.geom.stride;
        let ph = self.geom.padding.0;
        let cols = self.cols();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi, ix0) = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, ky, sh, ph, self.h) {
                            None => out.fill(S::zero()),
                            Some(iy) => {
                                let src = &img[(ch * self.h + iy) * self.w..][..self.w];
                                out[..lo].fill(S::zero());
                                out[hi..].fill(S::zero());
                                if sw == 1 {
                                    out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                                } else {
                                    for (j, v) in out[lo..hi].iter_mut().enumerate() {
                                        *v = src[ix0 + j * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `col` back into `img`, summing overlapping contributions.
    pub fn col2im<S: Float>(&self, col: &[S], img: &mut [S]) {
        let (sh, sw) = self.geom.stride;
        let ph = self.geom.padding.0;
        let cols = self.cols();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    let (lo, hi, ix0) = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ky, sh, ph, self.h) else {
                            continue;
                        };
                        let dst = &mut img[(ch * self.h + iy) * self.w..][..self.w];
                        let part = &src[oy * self.ow + lo..oy * self.ow + hi];
                        if sw == 1 {
                            for (d, &v) in dst[ix0..ix0 + part.len()].iter_mut().zip(part) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in part.iter().enumerate() {
                                dst[ix0 + j * sw] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
