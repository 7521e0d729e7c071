use rayon::prelude::*;

use super::{charge, MacCounter};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{Shape, Tensor};

/// Output positions processed per im2col tile.
const TILE: usize = 256;

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(Error::shape(op, format!("kernel {k} larger than padded extent {}", size + 2 * pad)));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Output shape of a dense convolution, validating every argument.
pub fn conv2d_shape(x: Shape, w: Shape, bias: Option<usize>, stride: usize, pad: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::domain("conv2d", "stride must be positive"));
    }
    if w.h != w.w || w.h == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and non-empty, got {w}")));
    }
    if x.c != w.c {
        return Err(Error::shape("conv2d", format!("input has {} channels, weight expects {}", x.c, w.c)));
    }
    if let Some(b) = bias {
        if b != w.n {
            return Err(Error::shape("conv2d", format!("bias length {b} for {} output channels", w.n)));
        }
    }
    let k = w.h;
    Ok(Shape::new(
        x.n,
        w.n,
        out_extent("conv2d", x.h, k, stride, pad)?,
        out_extent("conv2d", x.w, k, stride, pad)?,
    ))
}

/// Output shape of a depthwise convolution with weight `(c, 1, k, k)`.
pub fn depthwise_shape(x: Shape, w: Shape, bias: Option<usize>, stride: usize, pad: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::domain("depthwise_conv2d", "stride must be positive"));
    }
    if w.c != 1 || w.h != w.w || w.h == 0 {
        return Err(Error::shape("depthwise_conv2d", format!("weight must be (c, 1, k, k), got {w}")));
    }
    if w.n != x.c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input has {} channels, weight has {}", x.c, w.n),
        ));
    }
    if let Some(b) = bias {
        if b != w.n {
            return Err(Error::shape("depthwise_conv2d", format!("bias length {b} for {} channels", w.n)));
        }
    }
    let k = w.h;
    Ok(Shape::new(
        x.n,
        x.c,
        out_extent("depthwise_conv2d", x.h, k, stride, pad)?,
        out_extent("depthwise_conv2d", x.w, k, stride, pad)?,
    ))
}

/// Closed-form MACs of a dense convolution: `n · c_out · c_in · k² · H_out · W_out`.
pub fn conv2d_macs(x: Shape, w: Shape, y: Shape) -> u64 {
    (y.n * w.n * x.c * w.h * w.w * y.h * y.w) as u64
}

/// Closed-form MACs of a depthwise convolution: `n · c · k² · H_out · W_out`.
pub fn depthwise_macs(w: Shape, y: Shape) -> u64 {
    (y.n * y.c * w.h * w.w * y.h * y.w) as u64
}

/// Cross-correlation with zero padding, evaluated as tiled im2col + GEMM.
///
/// Each output element is accumulated as `bias + Σ_j w_j · col_j` in ascending `j`
/// (input channel, then kernel row, then kernel column) regardless of tiling or
/// thread count.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    macs: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let ys = conv2d_shape(xs, ws, bias.map(|b| b.numel()), stride, pad)?;
    let k = ws.h;
    let depth = ws.c * k * k;
    let cout = ws.n;
    let positions = ys.plane();
    let pointwise = k == 1 && stride == 1 && pad == 0;

    let tiles: Vec<(usize, usize, usize)> = (0..xs.n)
        .flat_map(|n| {
            (0..positions)
                .step_by(TILE)
                .map(move |t0| (n, t0, TILE.min(positions - t0)))
        })
        .collect();

    let in_plane = xs.c * xs.plane();
    let bias = bias.map(|b| b.data());
    let results: Vec<(Vec<T>, u64)> = tiles
        .par_iter()
        .map(|&(n, t0, len)| {
            let xin = &x.data()[n * in_plane..(n + 1) * in_plane];
            if pointwise {
                let rows: Vec<&[T]> = (0..xs.c)
                    .map(|c| &xin[c * positions + t0..c * positions + t0 + len])
                    .collect();
                gemm_tile(w.data(), bias, cout, depth, &rows, len)
            } else {
                let cols = im2col_tile(xin, xs, k, stride, pad, ys.w, t0, len);
                let rows: Vec<&[T]> = cols.chunks(len).collect();
                gemm_tile(w.data(), bias, cout, depth, &rows, len)
            }
        })
        .collect();

    let mut out = vec![T::zero(); ys.numel()];
    let mut counted = 0u64;
    for (&(n, t0, len), (tile, count)) in tiles.iter().zip(results) {
        counted += count;
        for o in 0..cout {
            let dst = (n * cout + o) * positions + t0;
            out[dst..dst + len].copy_from_slice(&tile[o * len..(o + 1) * len]);
        }
    }
    charge(macs, counted);
    Tensor::from_vec(ys, out)
}

#[allow(clippy::too_many_arguments)]
fn im2col_tile<T: Float>(
    xin: &[T],
    xs: Shape,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    t0: usize,
    len: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); xs.c * k * k * len];
    let base: Vec<(isize, isize)> = (t0..t0 + len)
        .map(|p| (((p / wo) * stride) as isize - pad as isize, ((p % wo) * stride) as isize - pad as isize))
        .collect();
    let (h, w) = (xs.h as isize, xs.w as isize);
    let mut j = 0;
    for c in 0..xs.c {
        let plane = &xin[c * xs.plane()..(c + 1) * xs.plane()];
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                let row = &mut cols[j * len..(j + 1) * len];
                for (dst, &(by, bx)) in row.iter_mut().zip(&base) {
                    let (iy, ix) = (by + ky, bx + kx);
                    if iy >= 0 && iy < h && ix >= 0 && ix < w {
                        *dst = plane[(iy * w + ix) as usize];
                    }
                }
                j += 1;
            }
        }
    }
    cols
}

/// `out[o][t] = bias[o] + Σ_j w[o][j] · rows[j][t]`, four output rows at a time.
fn gemm_tile<T: Float>(
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    depth: usize,
    rows: &[&[T]],
    len: usize,
) -> (Vec<T>, u64) {
    let mut out = vec![T::zero(); cout * len];
    let mut count = 0u64;
    for (block, chunk) in out.chunks_mut(4 * len).enumerate() {
        let o0 = block * 4;
        let nr = chunk.len() / len;
        for r in 0..nr {
            let b = bias.map_or(T::zero(), |b| b[o0 + r]);
            chunk[r * len..(r + 1) * len].fill(b);
        }
        if nr == 4 {
            let (a0, rest) = chunk.split_at_mut(len);
            let (a1, rest) = rest.split_at_mut(len);
            let (a2, a3) = rest.split_at_mut(len);
            for (j, row) in rows.iter().enumerate() {
                let w0 = w[o0 * depth + j];
                let w1 = w[(o0 + 1) * depth + j];
                let w2 = w[(o0 + 2) * depth + j];
                let w3 = w[(o0 + 3) * depth + j];
                for ((((&v, y0), y1), y2), y3) in row
                    .iter()
                    .zip(a0.iter_mut())
                    .zip(a1.iter_mut())
                    .zip(a2.iter_mut())
                    .zip(a3.iter_mut())
                {
                    *y0 = *y0 + w0 * v;
                    *y1 = *y1 + w1 * v;
                    *y2 = *y2 + w2 * v;
                    *y3 = *y3 + w3 * v;
                }
                count += 4 * row.len() as u64;
            }
        } else {
            for r in 0..nr {
                let acc = &mut chunk[r * len..(r + 1) * len];
                for (j, row) in rows.iter().enumerate() {
                    let wv = w[(o0 + r) * depth + j];
                    for (y, &v) in acc.iter_mut().zip(row.iter()) {
                        *y = *y + wv * v;
                    }
                    count += row.len() as u64;
                }
            }
        }
    }
    (out, count)
}

/// Gradients of [`conv2d`]. Each entry is computed only when requested.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let ys = conv2d_shape(xs, ws, None, stride, pad)?;
    if dy.shape() != ys {
        return Err(Error::shape("conv2d_backward", format!("grad {} for output {ys}", dy.shape())));
    }
    let k = ws.h;
    let mut dx = vec![T::zero(); xs.numel()];
    let mut dw = vec![T::zero(); ws.numel()];
    let mut db = vec![T::zero(); ws.n];
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let g = gd[ys.index(n, o, oy, ox)];
                    db[o] = db[o] + g;
                    for c in 0..xs.c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let xi = xs.index(n, c, iy as usize, ix as usize);
                                let wi = ws.index(o, c, ky, kx);
                                dx[xi] = dx[xi] + wd[wi] * g;
                                dw[wi] = dw[wi] + xd[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: need[0].then(|| Tensor::from_vec(xs, dx)).transpose()?,
        dw: need[1].then(|| Tensor::from_vec(ws, dw)).transpose()?,
        db: need[2].then(|| Tensor::from_vec(Shape::new(ws.n, 1, 1, 1), db)).transpose()?,
    })
}

/// Per-channel cross-correlation. Each input plane is copied into a zero-padded
/// buffer, so every one of the `k²` taps is an executed multiply-accumulate.
pub fn depthwise_conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    macs: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let ys = depthwise_shape(xs, ws, bias.map(|b| b.numel()), stride, pad)?;
    let k = ws.h;
    let (hp, wp) = (xs.h + 2 * pad, xs.w + 2 * pad);
    let mut out = vec![T::zero(); ys.numel()];
    let counts: Vec<u64> = out
        .par_chunks_mut(ys.plane())
        .enumerate()
        .map(|(plane_idx, dst)| {
            let c = plane_idx % xs.c;
            let src = &x.data()[plane_idx * xs.plane()..(plane_idx + 1) * xs.plane()];
            let mut padded = vec![T::zero(); hp * wp];
            for y in 0..xs.h {
                padded[(y + pad) * wp + pad..(y + pad) * wp + pad + xs.w]
                    .copy_from_slice(&src[y * xs.w..(y + 1) * xs.w]);
            }
            dst.fill(bias.map_or(T::zero(), |b| b.data()[c]));
            let kernel = &w.data()[c * k * k..(c + 1) * k * k];
            let mut count = 0u64;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kernel[ky * k + kx];
                    for oy in 0..ys.h {
                        let row = &padded[(oy * stride + ky) * wp + kx..];
                        let acc = &mut dst[oy * ys.w..(oy + 1) * ys.w];
                        if stride == 1 {
                            for (a, &v) in acc.iter_mut().zip(row.iter()) {
                                *a = *a + wv * v;
                            }
                        } else {
                            for (ox, a) in acc.iter_mut().enumerate() {
                                *a = *a + wv * row[ox * stride];
                            }
                        }
                        count += ys.w as u64;
                    }
                }
            }
            count
        })
        .collect();
    charge(macs, counts.iter().sum());
    Tensor::from_vec(ys, out)
}

pub fn depthwise_conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let ys = depthwise_shape(xs, ws, None, stride, pad)?;
    if dy.shape() != ys {
        return Err(Error::shape("depthwise_backward", format!("grad {} for output {ys}", dy.shape())));
    }
    let k = ws.h;
    let mut dx = vec![T::zero(); xs.numel()];
    let mut dw = vec![T::zero(); ws.numel()];
    let mut db = vec![T::zero(); ws.n];
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let g = gd[ys.index(n, c, oy, ox)];
                    db[c] = db[c] + g;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let xi = xs.index(n, c, iy as usize, ix as usize);
                            let wi = c * k * k + ky * k + kx;
                            dx[xi] = dx[xi] + wd[wi] * g;
                            dw[wi] = dw[wi] + xd[xi] * g;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: need[0].then(|| Tensor::from_vec(xs, dx)).transpose()?,
        dw: need[1].then(|| Tensor::from_vec(ws, dw)).transpose()?,
        db: need[2].then(|| Tensor::from_vec(Shape::new(ws.n, 1, 1, 1), db)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(s: Shape) -> Tensor<f32> {
        Tensor::ones(s)
    }

    /// Direct seven-loop reference, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let ys = conv2d_shape(xs, ws, None, stride, pad).unwrap();
        Tensor::from_fn(ys, |n, o, oy, ox| {
            let mut acc = 0.0;
            for c in 0..xs.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::uniform(Shape::new(2, 3, 4, 5), 1, -1.0, 1.0);
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, None, 1, 0, None).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn all_ones_window_sums() {
        let x = ones(Shape::new(1, 1, 5, 5));
        let w = ones(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, None, 1, 1, None).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
        for (h, w_) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
            assert_eq!(y.at(0, 0, h, w_), 4.0);
        }
        for (h, w_) in [(0, 2), (2, 0), (4, 2), (2, 4), (0, 1), (3, 4)] {
            assert_eq!(y.at(0, 0, h, w_), 6.0);
        }
    }

    #[test]
    fn mac_count_matches_closed_form() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64));
        let w = Tensor::<f32>::zeros(Shape::new(16, 3, 3, 3));
        let counter = MacCounter::new();
        let y = conv2d(&x, &w, None, 1, 1, Some(&counter)).unwrap();
        assert_eq!(counter.get(), 1_769_472);
        assert_eq!(conv2d_macs(x.shape(), w.shape(), y.shape()), 1_769_472);
    }

    #[test]
    fn matches_direct_loops() {
        for (i, &(c, o, k, s, p, h)) in [(3, 5, 3, 1, 1, 7), (2, 6, 3, 2, 1, 9), (4, 4, 1, 1, 0, 5), (2, 3, 5, 2, 2, 11), (1, 9, 7, 1, 3, 8)]
            .iter()
            .enumerate()
        {
            let x = Tensor::<f64>::uniform(Shape::new(2, c, h, h + 1), i as u64, -1.0, 1.0);
            let w = Tensor::<f64>::uniform(Shape::new(o, c, k, k), 100 + i as u64, -1.0, 1.0);
            let y = conv2d(&x, &w, None, s, p, None).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&x, &w, s, p)) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 8, 8));
        let w = Tensor::<f32>::zeros(Shape::new(4, 2, 3, 3));
        assert!(matches!(conv2d(&x, &w, None, 1, 1, None), Err(Error::ShapeMismatch { .. })));
        let w = Tensor::<f32>::zeros(Shape::new(4, 3, 3, 3));
        assert!(matches!(conv2d(&x, &w, None, 0, 1, None), Err(Error::Domain { .. })));
    }

    #[test]
    fn depthwise_center_tap_is_identity() {
        let x = Tensor::<f32>::uniform(Shape::new(2, 4, 6, 5), 3, -2.0, 2.0);
        let w = Tensor::from_fn(Shape::new(4, 1, 7, 7), |_, _, h, w| if h == 3 && w == 3 { 1.0 } else { 0.0 });
        let y = depthwise_conv2d(&x, &w, None, 1, 3, None).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn depthwise_window_sums() {
        let x = ones(Shape::new(1, 1, 3, 3));
        let w = ones(Shape::new(1, 1, 3, 3));
        let y = depthwise_conv2d(&x, &w, None, 1, 1, None).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let s = Shape::new(1, 2, 5, 5);
        let x = Tensor::<f32>::uniform(s, 9, -1.0, 1.0);
        let w = Tensor::<f32>::uniform(Shape::new(2, 1, 3, 3), 10, -1.0, 1.0);
        let y0 = depthwise_conv2d(&x, &w, None, 1, 1, None).unwrap();
        let x1 = x.with_value(s.index(0, 0, 2, 2), 5.0);
        let y1 = depthwise_conv2d(&x1, &w, None, 1, 1, None).unwrap();
        let plane = s.plane();
        assert_eq!(&y0.data()[plane..], &y1.data()[plane..]);
        assert_ne!(&y0.data()[..plane], &y1.data()[..plane]);
    }

    #[test]
    fn depthwise_macs_count_every_tap() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 6, 9, 9));
        let w = Tensor::<f32>::zeros(Shape::new(6, 1, 7, 7));
        let counter = MacCounter::new();
        let y = depthwise_conv2d(&x, &w, None, 2, 3, Some(&counter)).unwrap();
        assert_eq!(counter.get(), depthwise_macs(w.shape(), y.shape()));
    }

    #[test]
    fn zero_input_zero_output() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 6, 6));
        let w = Tensor::<f32>::uniform(Shape::new(5, 3, 3, 3), 4, -1.0, 1.0);
        assert!(conv2d(&x, &w, None, 1, 1, None).unwrap().data().iter().all(|&v| v == 0.0));
        let wd = Tensor::<f32>::uniform(Shape::new(3, 1, 3, 3), 4, -1.0, 1.0);
        assert!(depthwise_conv2d(&x, &wd, None, 1, 1, None).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
