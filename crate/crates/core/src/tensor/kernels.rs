//! Dense NCHW kernels: convolution via im2col + GEMM, 2×2 max pooling and
//! half-pixel bilinear resampling, each with its adjoint.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut2, Axis};

/// Zero padding applied around the input of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Output size equals input size. Even kernels put the extra row/column at the
    /// bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        let (top, left) = ((kh - 1) / 2, (kw - 1) / 2);
        Padding {
            top,
            bottom: kh - 1 - top,
            left,
            right: kw - 1 - left,
        }
    }

    pub fn none() -> Self {
        Padding::default()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: Padding,
}

impl ConvGeom {
    fn new(x: (usize, usize, usize, usize), wgt: (usize, usize, usize, usize), pad: Padding) -> Self {
        let (_, ci, h, w) = x;
        let (_, wci, kh, kw) = wgt;
        assert_eq!(ci, wci, "conv input channels {ci} vs weight {wci}");
        let ho = (h + pad.top + pad.bottom + 1)
            .checked_sub(kh)
            .expect("kernel taller than padded input");
        let wo = (w + pad.left + pad.right + 1)
            .checked_sub(kw)
            .expect("kernel wider than padded input");
        ConvGeom { ci, h, w, kh, kw, ho, wo, pad }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Direct view of the input is usable as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == Padding::none()
    }

    /// Range of output positions `o` whose source `o + k - pad` lies inside `[0, n)`.
    fn valid(o_len: usize, n: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (n + pad).saturating_sub(k).min(o_len);
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let (p, hw) = (self.p(), self.h * self.w);
        col.fill(0.0);
        for c in 0..self.ci {
            let plane = &x[c * hw..(c + 1) * hw];
            for ki in 0..self.kh {
                let (y0, y1) = Self::valid(self.ho, self.h, ki, self.pad.top);
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (x0, x1) = Self::valid(self.wo, self.w, kj, self.pad.left);
                    for oy in y0..y1 {
                        let iy = oy + ki - self.pad.top;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let ix0 = x0 + kj - self.pad.left;
                        d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], gx: &mut [f32]) {
        let (p, hw) = (self.p(), self.h * self.w);
        for c in 0..self.ci {
            let plane = &mut gx[c * hw..(c + 1) * hw];
            for ki in 0..self.kh {
                let (y0, y1) = Self::valid(self.ho, self.h, ki, self.pad.top);
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    let (x0, x1) = Self::valid(self.wo, self.w, kj, self.pad.left);
                    for oy in y0..y1 {
                        let iy = oy + ki - self.pad.top;
                        let ix0 = x0 + kj - self.pad.left;
                        let d = &mut plane[iy * self.w + ix0..iy * self.w + ix0 + (x1 - x0)];
                        let s = &src[oy * self.wo + x0..oy * self.wo + x1];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }
}

fn as_matrix(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn as_matrix_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix")
}

/// Stride-1 2-D convolution (cross-correlation). `x`: `[N, Ci, H, W]`, `w`: `[Co, Ci, kh, kw]`.
pub fn conv2d(x: ArrayView4<'_, f32>, w: ArrayView4<'_, f32>, b: Option<ArrayView1<'_, f32>>, pad: Padding) -> Array4<f32> {
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let g = ConvGeom::new(x.dim(), w.dim(), pad);
    let (n, co) = (x.dim().0, w.dim().0);
    let (k, p) = (g.k(), g.p());
    let xs = x.as_slice().expect("standard layout");
    let wm = as_matrix(w.as_slice().expect("standard layout"), co, k);
    let mut out = Array4::<f32>::zeros((n, co, g.ho, g.wo));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; k * p] };
    let in_len = g.ci * g.h * g.w;
    let out_s = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        let xi = &xs[i * in_len..(i + 1) * in_len];
        let cm = if g.is_pointwise() {
            as_matrix(xi, k, p)
        } else {
            g.im2col(xi, &mut col);
            as_matrix(&col, k, p)
        };
        let mut om = as_matrix_mut(&mut out_s[i * co * p..(i + 1) * co * p], co, p);
        if let Some(b) = &b {
            for (mut row, bv) in om.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row.fill(*bv);
            }
            general_mat_mul(1.0, &wm, &cm, 1.0, &mut om);
        } else {
            general_mat_mul(1.0, &wm, &cm, 0.0, &mut om);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: ArrayView4<'_, f32>,
    w: ArrayView4<'_, f32>,
    gout: ArrayView4<'_, f32>,
    pad: Padding,
    need_gx: bool,
) -> (Option<Array4<f32>>, Array4<f32>, Array1<f32>) {
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let gout = gout.as_standard_layout();
    let g = ConvGeom::new(x.dim(), w.dim(), pad);
    let (n, co) = (x.dim().0, w.dim().0);
    let (k, p) = (g.k(), g.p());
    let xs = x.as_slice().expect("standard layout");
    let gs = gout.as_slice().expect("standard layout");
    let wm = as_matrix(w.as_slice().expect("standard layout"), co, k);
    let mut gx = Array4::<f32>::zeros(x.dim());
    let mut gw = Array4::<f32>::zeros(w.dim());
    let gb = gout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { k * p }];
    let mut gcol = vec![0.0f32; k * p];
    let in_len = g.ci * g.h * g.w;
    let gx_s = gx.as_slice_mut().expect("fresh array");
    let gw_s = gw.as_slice_mut().expect("fresh array");
    for i in 0..n {
        let xi = &xs[i * in_len..(i + 1) * in_len];
        let gm = as_matrix(&gs[i * co * p..(i + 1) * co * p], co, p);
        let cm = if g.is_pointwise() {
            as_matrix(xi, k, p)
        } else {
            g.im2col(xi, &mut col);
            as_matrix(&col, k, p)
        };
        let mut gwm = as_matrix_mut(gw_s, co, k);
        general_mat_mul(1.0, &gm, &cm.t(), 1.0, &mut gwm);
        if !need_gx {
            continue;
        }
        let gxi = &mut gx_s[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            let mut gxm = as_matrix_mut(gxi, k, p);
            general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut gxm);
        } else {
            let mut gcm = as_matrix_mut(&mut gcol, k, p);
            general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut gcm);
            g.col2im(&gcol, gxi);
        }
    }
    (need_gx.then_some(gx), gw, gb)
}

/// 2×2 stride-2 max pooling. Returns the pooled map and, per output element, the
/// flat index of the winning input element.
pub fn max_pool2(x: ArrayView4<'_, f32>) -> (Array4<f32>, Vec<u32>) {
    let x = x.as_standard_layout();
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<f32>::zeros((n, c, ho, wo));
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let os = out.as_slice_mut().expect("fresh array");
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                os[o] = xs[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(x_dim: (usize, usize, usize, usize), argmax: &[u32], gout: ArrayView4<'_, f32>) -> Array4<f32> {
    let gout = gout.as_standard_layout();
    let mut gx = Array4::<f32>::zeros(x_dim);
    let gs = gx.as_slice_mut().expect("fresh array");
    for (g, idx) in gout.iter().zip(argmax) {
        gs[*idx as usize] += *g;
    }
    gx
}

/// Source taps for one output coordinate of a half-pixel bilinear resample.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = (src - i0 as f64) as f32;
            Tap { i0, i1, w0: 1.0 - l, w1: l }
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear(x: ArrayView4<'_, f32>, ho: usize, wo: usize) -> Array4<f32> {
    let x = x.as_standard_layout();
    let (n, c, h, w) = x.dim();
    let (ty, tx) = (taps(h, ho), taps(w, wo));
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<f32>::zeros((n, c, ho, wo));
    let os = out.as_slice_mut().expect("fresh array");
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut os[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
            for (ox, s) in tx.iter().enumerate() {
                let top = s.w0 * r0[s.i0] + s.w1 * r0[s.i1];
                let bot = s.w0 * r1[s.i0] + s.w1 * r1[s.i1];
                dst[oy * wo + ox] = t.w0 * top + t.w1 * bot;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(x_dim: (usize, usize, usize, usize), gout: ArrayView4<'_, f32>) -> Array4<f32> {
    let gout = gout.as_standard_layout();
    let (n, c, h, w) = x_dim;
    let (_, _, ho, wo) = gout.dim();
    let (ty, tx) = (taps(h, ho), taps(w, wo));
    let gs = gout.as_slice().expect("standard layout");
    let mut gx = Array4::<f32>::zeros(x_dim);
    let gxs = gx.as_slice_mut().expect("fresh array");
    for plane in 0..n * c {
        let g = &gs[plane * ho * wo..(plane + 1) * ho * wo];
        let d = &mut gxs[plane * h * w..(plane + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                d[t.i0 * w + s.i0] += t.w0 * s.w0 * v;
                d[t.i0 * w + s.i1] += t.w0 * s.w1 * v;
                d[t.i1 * w + s.i0] += t.w1 * s.w0 * v;
                d[t.i1 * w + s.i1] += t.w1 * s.w1 * v;
            }
        }
    }
    gx
}

/// Nearest-neighbour resampling of a label plane (`src = floor(o * in / out)`).
pub fn resize_nearest_labels(labels: ndarray::ArrayView2<'_, u8>, ho: usize, wo: usize) -> ndarray::Array2<u8> {
    let (h, w) = labels.dim();
    ndarray::Array2::from_shape_fn((ho, wo), |(y, x)| labels[[y * h / ho, x * w / wo]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array2};

    fn naive_conv(x: &Array4<f32>, w: &Array4<f32>, pad: Padding) -> Array4<f32> {
        let (n, ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let ho = h + pad.top + pad.bottom + 1 - kh;
        let wo = wd + pad.left + pad.right + 1 - kw;
        Array4::from_shape_fn((n, co, ho, wo), |(b, o, y, xx)| {
            let mut acc = 0.0;
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = y as isize + i as isize - pad.top as isize;
                        let ix = xx as isize + j as isize - pad.left as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x[[b, c, iy as usize, ix as usize]] * w[[o, c, i, j]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: (usize, usize, usize, usize), k: f32) -> Array4<f32> {
        Array::from_shape_fn(shape, |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) as f32 * k).sin())
    }

    #[test]
    fn conv_matches_naive_for_several_kernels() {
        let x = ramp((2, 3, 6, 5), 0.37);
        for (kh, kw) in [(1, 1), (2, 2), (3, 3), (7, 7)] {
            let w = ramp((4, 3, kh, kw), 0.91);
            let pad = Padding::same(kh, kw);
            let got = conv2d(x.view(), w.view(), None, pad);
            let want = naive_conv(&x, &w, pad);
            assert_eq!(got.dim(), (2, 4, 6, 5));
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{kh}x{kw}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_even_kernel_pads_bottom_right() {
        let p = Padding::same(2, 2);
        assert_eq!((p.top, p.bottom, p.left, p.right), (0, 1, 0, 1));
        let p = Padding::same(3, 3);
        assert_eq!((p.top, p.bottom, p.left, p.right), (1, 1, 1, 1));
    }

    #[test]
    fn conv_bias_is_added() {
        let x = Array4::<f32>::zeros((1, 2, 3, 3));
        let w = Array4::<f32>::ones((2, 2, 3, 3));
        let b = ndarray::arr1(&[1.5f32, -2.0]);
        let out = conv2d(x.view(), w.view(), Some(b.view()), Padding::same(3, 3));
        assert!(out.index_axis(Axis(1), 0).iter().all(|v| *v == 1.5));
        assert!(out.index_axis(Axis(1), 1).iter().all(|v| *v == -2.0));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is bilinear: its gradient w.r.t. x and w must satisfy
        // <gx, x> = <gw, w> = <conv(x, w), g> for bias-free convolutions.
        let x = ramp((2, 3, 5, 4), 0.21);
        let w = ramp((2, 3, 2, 2), 0.53);
        let pad = Padding::same(2, 2);
        let y = conv2d(x.view(), w.view(), None, pad);
        let g = ramp(y.dim(), 0.77);
        let (gx, gw, _) = conv2d_backward(x.view(), w.view(), g.view(), pad, true);
        let gx = gx.unwrap();
        let yg: f32 = (&y * &g).sum();
        assert!(((&gx * &x).sum() - yg).abs() < 1e-3);
        assert!(((&gw * &w).sum() - yg).abs() < 1e-3);
    }

    #[test]
    fn bilinear_2x_is_quarter_weights() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_bilinear(x.view(), 4, 4);
        // row 0 uses source row 0 only (clamped); column taps 0, .25, .75, 1
        let r0: Vec<f32> = up.slice(ndarray::s![0, 0, 0, ..]).to_vec();
        assert_eq!(r0, vec![0.0, 0.25, 0.75, 1.0]);
        let down = resize_bilinear(up.view(), 2, 2);
        assert_eq!(down.dim(), (1, 1, 2, 2));
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f32);
        let d = resize_bilinear(x.view(), 2, 2);
        assert_eq!(d[[0, 0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = ramp((1, 2, 4, 4), 0.3);
        let y = resize_bilinear(x.view(), 8, 8);
        let g = ramp(y.dim(), 0.6);
        let gx = resize_bilinear_backward(x.dim(), g.view());
        assert!(((&gx * &x).sum() - (&y * &g).sum()).abs() < 1e-4);
    }

    #[test]
    fn maxpool_picks_max() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (out, arg) = max_pool2(x.view());
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
        let g = Array4::from_elem((1, 1, 1, 2), 1.0f32);
        let gx = max_pool2_backward(x.dim(), &arg, g.view());
        assert_eq!(gx.iter().sum::<f32>(), 2.0);
        assert_eq!(gx[[0, 0, 1, 2]], 1.0);
    }

    #[test]
    fn nearest_labels() {
        let l = Array2::from_shape_fn((4, 4), |(y, x)| ((y * 4 + x) % 2) as u8);
        let d = resize_nearest_labels(l.view(), 2, 2);
        assert_eq!(d, Array2::from_shape_vec((2, 2), vec![0, 0, 0, 0]).unwrap());
        let u = resize_nearest_labels(l.view(), 8, 8);
        assert_eq!(u[[0, 2]], 1);
        assert_eq!(u[[0, 1]], 0);
    }
}
