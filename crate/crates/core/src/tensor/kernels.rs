// Dense kernels shared by the forward and backward rules. All loops run in a
// fixed order so results are bit-reproducible.

use super::tape::Padding;
use super::Real;

/// Row-major matrix view with optional transposition.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`), `out` row-major `m x n`.
pub(crate) fn matmul<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.logical();
    let (kb, n) = b.logical();
    assert_eq!(k, kb, "inner dimensions disagree");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every address the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

/// Pads every `h x w` plane of `x` (`planes` of them) by `pad` on each side.
pub(crate) fn pad_planes<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    pad: usize,
    mode: Padding,
) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * hp * wp];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * hp * wp..(p + 1) * hp * wp];
        for yp in 0..hp {
            let y = yp as isize - pad as isize;
            let sy = match mode {
                Padding::Zero if y < 0 || y >= h as isize => continue,
                Padding::Zero => y as usize,
                Padding::Reflect => reflect(y, h),
            };
            let row = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[yp * wp..(yp + 1) * wp];
            drow[pad..pad + w].copy_from_slice(row);
            if mode == Padding::Reflect {
                for i in 0..pad {
                    drow[pad - 1 - i] = row[reflect(-(i as isize) - 1, w)];
                    drow[pad + w + i] = row[reflect((w + i) as isize, w)];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_planes`]: folds a padded gradient back onto the interior.
pub(crate) fn unpad_planes_grad<T: Real>(
    gp: &[T],
    planes: usize,
    h: usize,
    w: usize,
    pad: usize,
    mode: Padding,
) -> Vec<T> {
    if pad == 0 {
        return gp.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gp[p * hp * wp..(p + 1) * hp * wp];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for yp in 0..hp {
            let y = yp as isize - pad as isize;
            let sy = match mode {
                Padding::Zero if y < 0 || y >= h as isize => continue,
                Padding::Zero => y as usize,
                Padding::Reflect => reflect(y, h),
            };
            for xp in 0..wp {
                let x = xp as isize - pad as isize;
                let sx = match mode {
                    Padding::Zero if x < 0 || x >= w as isize => continue,
                    Padding::Zero => x as usize,
                    Padding::Reflect => reflect(x, w),
                };
                dst[sy * w + sx] = dst[sy * w + sx] + src[yp * wp + xp];
            }
        }
    }
    out
}

/// Geometry of a valid (unpadded) strided window sweep over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one sample `[C, H, W]` into `[C*K*K, Ho*Wo]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], g: Window, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let src = &plane[(oy * g.stride + ky) * g.in_w..];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        drow.copy_from_slice(&src[kx..kx + g.out_w]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            *d = src[ox * g.stride + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C, H, W]`.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: Window, x: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let base = (oy * g.stride + ky) * g.in_w + kx;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in srow.iter().enumerate() {
                        let i = base + ox * g.stride;
                        plane[i] = plane[i] + v;
                    }
                }
            }
        }
    }
}

/// Index map of a transposed convolution: input pixel `i`, tap `k` lands on
/// output `i * stride + k - crop`, kept when inside `[0, out)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Scatter {
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub crop: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Scatter {
    #[inline]
    fn target(&self, i: usize, k: usize, len: usize) -> Option<usize> {
        let o = (i * self.stride + k) as isize - self.crop as isize;
        (o >= 0 && (o as usize) < len).then_some(o as usize)
    }
}

/// Scatters `[Cout*K*K, H*W]` columns into an output sample `[Cout, Ho, Wo]`.
pub(crate) fn scatter_add<T: Real>(cols: &[T], s: Scatter, out: &mut [T]) {
    let ncol = s.in_h * s.in_w;
    for co in 0..s.out_channels {
        let plane = &mut out[co * s.out_h * s.out_w..(co + 1) * s.out_h * s.out_w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (co * s.kernel + ky) * s.kernel + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for iy in 0..s.in_h {
                    let Some(oy) = s.target(iy, ky, s.out_h) else { continue };
                    for ix in 0..s.in_w {
                        let Some(ox) = s.target(ix, kx, s.out_w) else { continue };
                        let i = oy * s.out_w + ox;
                        plane[i] = plane[i] + src[iy * s.in_w + ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`scatter_add`]: gathers an output-shaped gradient into columns.
pub(crate) fn gather<T: Real>(gout: &[T], s: Scatter, cols: &mut [T]) {
    let ncol = s.in_h * s.in_w;
    for co in 0..s.out_channels {
        let plane = &gout[co * s.out_h * s.out_w..(co + 1) * s.out_h * s.out_w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = (co * s.kernel + ky) * s.kernel + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for iy in 0..s.in_h {
                    let oy = s.target(iy, ky, s.out_h);
                    for ix in 0..s.in_w {
                        dst[iy * s.in_w + ix] = match (oy, s.target(ix, kx, s.out_w)) {
                            (Some(oy), Some(ox)) => plane[oy * s.out_w + ox],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Source taps of 2x bilinear upsampling (half-pixel centers, edge clamp):
/// output `j` = `lerp(x[lo], x[hi], t)`.
#[inline]
fn upsample_taps(j: usize, len: usize) -> (usize, usize, f64) {
    let i = j / 2;
    if j % 2 == 0 {
        (i.saturating_sub(1), i, if i == 0 { 0.0 } else { 0.75 })
    } else {
        (i, (i + 1).min(len - 1), if i + 1 >= len { 0.0 } else { 0.25 })
    }
}

/// Upsamples every `h x w` plane to `2h x 2w`.
pub(crate) fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let col_taps: Vec<_> = (0..w2).map(|j| upsample_taps(j, w)).collect();
    let row_taps: Vec<_> = (0..h2).map(|j| upsample_taps(j, h)).collect();
    let mut tmp = vec![T::zero(); h * w2];
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (j, &(lo, hi, t)) in col_taps.iter().enumerate() {
                let (a, b) = (row[lo], row[hi]);
                tmp[y * w2 + j] = a + T::lit(t) * (b - a);
            }
        }
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for (j, &(lo, hi, t)) in row_taps.iter().enumerate() {
            let t = T::lit(t);
            for x in 0..w2 {
                let (a, b) = (tmp[lo * w2 + x], tmp[hi * w2 + x]);
                dst[j * w2 + x] = a + t * (b - a);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`].
pub(crate) fn upsample2x_grad<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let col_taps: Vec<_> = (0..w2).map(|j| upsample_taps(j, w)).collect();
    let row_taps: Vec<_> = (0..h2).map(|j| upsample_taps(j, h)).collect();
    let mut tmp = vec![T::zero(); h * w2];
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for (j, &(lo, hi, t)) in row_taps.iter().enumerate() {
            let t = T::lit(t);
            let one_t = T::one() - t;
            for x in 0..w2 {
                let v = src[j * w2 + x];
                tmp[lo * w2 + x] = tmp[lo * w2 + x] + one_t * v;
                tmp[hi * w2 + x] = tmp[hi * w2 + x] + t * v;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (j, &(lo, hi, t)) in col_taps.iter().enumerate() {
                let t = T::lit(t);
                let v = tmp[y * w2 + j];
                dst[y * w + lo] = dst[y * w + lo] + (T::one() - t) * v;
                dst[y * w + hi] = dst[y * w + hi] + t * v;
            }
        }
    }
    out
}

/// Mean over non-overlapping `f x f` cells of every plane.
pub(crate) fn avg_pool<T: Real>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let inv = T::lit(1.0 / (f * f) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        acc = acc + src[(oy * f + dy) * w + ox * f + dx];
                    }
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_grad<T: Real>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let inv = T::lit(1.0 / (f * f) as f64);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / f) * wo + x / f] * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let p = pad_planes(&x, 1, 3, 3, 2, Padding::Reflect);
        // rows 0 and 1 of the 7x7 output mirror input rows 2 and 1
        assert_eq!(&p[2 * 7..3 * 7], &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(&p[0..7], &[9.0, 8.0, 7.0, 8.0, 9.0, 8.0, 7.0]);
        assert_eq!(&p[7..14], &[6.0, 5.0, 4.0, 5.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn unpad_is_adjoint_of_pad() {
        let (h, w, pad) = (4, 5, 2);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..(h + 2 * pad) * (w + 2 * pad))
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        for mode in [Padding::Zero, Padding::Reflect] {
            let px = pad_planes(&x, 1, h, w, pad, mode);
            let ug = unpad_planes_grad(&g, 1, h, w, pad, mode);
            let lhs: f64 = px.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ug).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn upsample_taps_match_half_pixel_convention() {
        let x = [0.0f64, 1.0];
        let up = upsample2x(&x, 1, 1, 2);
        assert_eq!(up[..4], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(Mat::t(&a, 2, 2), Mat::new(&b, 2, 2), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(Mat::new(&a, 2, 2), Mat::t(&b, 2, 2), &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
