//! Forward and adjoint kernels for the spatial operators.
//!
//! Convolutions lower to one GEMM per sample over an im2col buffer. The
//! bilinear upsampler uses half-pixel centers with edge clamping, which makes
//! a 2x upsample the fixed stencil `[0.25, 0.75]` / `[0.75, 0.25]` per axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, ci, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::Rank {
                    op: "conv2d input",
                    expected: 4,
                    got: x.len(),
                })
            }
        };
        let (co, wci, kh, kw) = match *w {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::Rank {
                    op: "conv2d weight",
                    expected: 4,
                    got: w.len(),
                })
            }
        };
        if wci != ci {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                expected: vec![co, ci, kh, kw],
                got: w.to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Invalid(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{wd}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel offset `k` along an
    /// axis of input length `len` and output length `out`.
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // need 0 <= o*s + k - p < len
        let lo = (p - k + s - 1).div_euclid(s).clamp(0, out as isize);
        let hi = ((len as isize - 1 + p - k).div_euclid(s) + 1).clamp(0, out as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.ci {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.wo);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < oy_lo || oy >= oy_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        out_row[ox_lo..ox_hi]
                            .copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = src_row[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.ci {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.ho);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * g.stride + kj - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (k, plane) = (g.k(), g.out_plane());
    let mut y = vec![T::zero(); g.n * g.co * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let xs = x.data();
    let in_len = g.ci * g.h * g.w;
    for n in 0..g.n {
        let xn = &xs[n * in_len..(n + 1) * in_len];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut col);
            &col
        };
        let yn = &mut y[n * g.co * plane..(n + 1) * g.co * plane];
        // SAFETY: w is co x k, b is k x plane, yn is co x plane, all contiguous.
        unsafe {
            T::gemm(
                g.co,
                k,
                plane,
                T::one(),
                w.data().as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                yn.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    Tensor::new(&[g.n, g.co, g.ho, g.wo], y)
}

/// `w[co, ci, i, j]` to `w'[ci, co, kh-1-i, kw-1-j]`.
fn flip_transpose<T: Scalar>(w: &Tensor<T>, g: &ConvGeom) -> Result<Tensor<T>> {
    let (kh, kw) = (g.kh, g.kw);
    let mut out = vec![T::zero(); w.numel()];
    let wd = w.data();
    for co in 0..g.co {
        for ci in 0..g.ci {
            for i in 0..kh {
                for j in 0..kw {
                    out[((ci * g.co + co) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] = wd[((co * g.ci + ci) * kh + i) * kw + j];
                }
            }
        }
    }
    Tensor::new(&[g.ci, g.co, kh, kw], out)
}

/// Gradients of a convolution with respect to its input and/or weight.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    // Stride-1 input gradients are a full correlation with the flipped
    // kernel, which keeps the GEMM inner dimension large.
    if need_dx && stride == 1 && !g.is_pointwise() && pad < g.kh && pad < g.kw && g.kh == g.kw {
        let flipped = flip_transpose(w, &g)?;
        let dx = conv2d_forward(dy, &flipped, 1, g.kh - 1 - pad)?;
        let (_, dw) = conv2d_backward(x, w, dy, stride, pad, false, need_dw)?;
        return Ok((Some(dx), dw));
    }
    let (k, plane) = (g.k(), g.out_plane());
    let in_len = g.ci * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
    let mut dcol = vec![T::zero(); if need_dx && !g.is_pointwise() { k * plane } else { 0 }];
    let xs = x.data();
    for n in 0..g.n {
        let xn = &xs[n * in_len..(n + 1) * in_len];
        let dyn_ = &dy.data()[n * g.co * plane..(n + 1) * g.co * plane];
        if let Some(dw) = dw.as_mut() {
            let b: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, &g, &mut col);
                &col
            };
            // dW (co x k) += dY (co x plane) * col^T (plane x k)
            unsafe {
                T::gemm(
                    g.co,
                    plane,
                    k,
                    T::one(),
                    dyn_.as_ptr(),
                    plane as isize,
                    1,
                    b.as_ptr(),
                    1,
                    plane as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            // dcol (k x plane) = W^T (k x co) * dY (co x plane)
            let target: &mut [T] = if g.is_pointwise() { dxn } else { &mut dcol };
            unsafe {
                T::gemm(
                    k,
                    g.co,
                    plane,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    k as isize,
                    dyn_.as_ptr(),
                    plane as isize,
                    1,
                    T::zero(),
                    target.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
            if !g.is_pointwise() {
                col2im(&dcol, &g, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::new(w.shape(), d)).transpose()?;
    Ok((dx, dw))
}

/// Half-pixel-center 2x linear interpolation of one line.
#[inline]
fn upsample_line<T: Scalar>(src: &[T], src_stride: usize, len: usize, dst: &mut [T], dst_stride: usize) {
    let (near, far) = (T::from_f64(0.75), T::from_f64(0.25));
    for i in 0..len {
        let c = src[i * src_stride];
        let prev = src[i.saturating_sub(1) * src_stride];
        let next = src[(i + 1).min(len - 1) * src_stride];
        dst[2 * i * dst_stride] = near * c + far * prev;
        dst[(2 * i + 1) * dst_stride] = near * c + far * next;
    }
}

/// Adjoint of [`upsample_line`], accumulating into `dsrc`.
#[inline]
fn upsample_line_adjoint<T: Scalar>(
    ddst: &[T],
    dst_stride: usize,
    len: usize,
    dsrc: &mut [T],
    src_stride: usize,
) {
    let (near, far) = (T::from_f64(0.75), T::from_f64(0.25));
    for i in 0..len {
        let a = ddst[2 * i * dst_stride];
        let b = ddst[(2 * i + 1) * dst_stride];
        dsrc[i * src_stride] += near * (a + b);
        dsrc[i.saturating_sub(1) * src_stride] += far * a;
        dsrc[(i + 1).min(len - 1) * src_stride] += far * b;
    }
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    let mut tmp = vec![T::zero(); h * w2];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            upsample_line(&src[r * w..], 1, w, &mut tmp[r * w2..], 1);
        }
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for col in 0..w2 {
            upsample_line(&tmp[col..], w2, h, &mut dst[col..], w2);
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = dy.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![T::zero(); n * c * h * w];
    let mut tmp = vec![T::zero(); h * w2];
    for p in 0..n * c {
        let src = &dy.data()[p * h2 * w2..(p + 1) * h2 * w2];
        tmp.fill(T::zero());
        for col in 0..w2 {
            upsample_line_adjoint(&src[col..], w2, h, &mut tmp[col..], w2);
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            upsample_line_adjoint(&tmp[r * w2..], 1, w, &mut dst[r * w..], 1);
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

pub(crate) fn avg_pool2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Invalid(format!("avg_pool2x: odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let cc = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = quarter * (a + b + cc + d);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn avg_pool2x_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (h, w) = (2 * ho, 2 * wo);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let g = quarter * src[i * wo + j];
                dst[2 * i * w + 2 * j] = g;
                dst[2 * i * w + 2 * j + 1] = g;
                dst[(2 * i + 1) * w + 2 * j] = g;
                dst[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as the reference.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * ci + i) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + i) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        y.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad, h) in &[(3, 1, 1, 5), (3, 2, 1, 8), (1, 1, 0, 4), (4, 2, 1, 6), (3, 1, 0, 4)] {
            let x = pseudo_random(&[2, 3, h, h], 1);
            let w = pseudo_random(&[4, 3, k, k], 2);
            let y = conv2d_forward(&x, &w, stride, pad).unwrap();
            let r = conv_reference(&x, &w, stride, pad);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x, w), dy> = <x, dx> = <w, dw> since conv is bilinear.
        for &(k, stride, pad, h) in &[(3, 1, 1, 5), (3, 2, 1, 8), (1, 1, 0, 4)] {
            let x = pseudo_random(&[2, 3, h, h], 3);
            let w = pseudo_random(&[4, 3, k, k], 4);
            let y = conv2d_forward(&x, &w, stride, pad).unwrap();
            let dy = pseudo_random(y.shape(), 5);
            let (dx, dw) = conv2d_backward(&x, &w, &dy, stride, pad, true, true).unwrap();
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 1.5);
        let y = upsample2x_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_and_pool_adjoints() {
        let x = pseudo_random(&[2, 2, 3, 4], 6);
        let y = upsample2x_forward(&x).unwrap();
        let dy = pseudo_random(y.shape(), 7);
        let dx = upsample2x_backward(&dy).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let x = pseudo_random(&[2, 2, 4, 6], 8);
        let y = avg_pool2x_forward(&x).unwrap();
        let dy = pseudo_random(y.shape(), 9);
        let dx = avg_pool2x_backward(&dy).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
