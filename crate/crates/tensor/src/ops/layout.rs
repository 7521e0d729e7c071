use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{Shape, Tensor};

pub fn concat_shape(shapes: &[Shape]) -> Result<Shape> {
    let first = *shapes
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "empty input list"))?;
    let mut c = 0;
    for s in shapes {
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", format!("{s} does not match {first} outside channels")));
        }
        c += s.c;
    }
    Ok(Shape::new(first.n, c, first.h, first.w))
}

pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<Shape> = xs.iter().map(|t| t.shape()).collect();
    let s = concat_shape(&shapes)?;
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for x in xs {
            let block = x.shape().c * s.plane();
            out.extend_from_slice(&x.data()[n * block..(n + 1) * block]);
        }
    }
    Tensor::from_vec(s, out)
}

pub fn narrow_shape(x: Shape, start: usize, len: usize) -> Result<Shape> {
    if len == 0 || start + len > x.c {
        return Err(Error::shape(
            "split_channels",
            format!("channels {start}..{} out of range for {x}", start + len),
        ));
    }
    Ok(Shape::new(x.n, len, x.h, x.w))
}

/// Channels `start..start + len`.
pub fn narrow_channels<T: Float>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let s = narrow_shape(xs, start, len)?;
    let plane = xs.plane();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..xs.n {
        let off = (n * xs.c + start) * plane;
        out.extend_from_slice(&x.data()[off..off + len * plane]);
    }
    Tensor::from_vec(s, out)
}

/// Places `dy` (a gradient for a narrowed slice) back into a zero tensor of `full`.
pub fn narrow_backward<T: Float>(full: Shape, start: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let ds = dy.shape();
    let expect = narrow_shape(full, start, ds.c)?;
    if expect != ds {
        return Err(Error::shape("narrow_backward", format!("grad {ds} for slice {expect}")));
    }
    let plane = full.plane();
    let mut out = vec![T::zero(); full.numel()];
    for n in 0..full.n {
        let dst = (n * full.c + start) * plane;
        out[dst..dst + ds.c * plane].copy_from_slice(&dy.data()[n * ds.c * plane..(n + 1) * ds.c * plane]);
    }
    Tensor::from_vec(full, out)
}

pub fn split_channels<T: Float>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if sizes.iter().sum::<usize>() != x.shape().c {
        return Err(Error::shape(
            "split_channels",
            format!("sizes {sizes:?} do not sum to {} channels", x.shape().c),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = narrow_channels(x, start, len);
            start += len;
            t
        })
        .collect()
}

pub fn upsample_shape(x: Shape) -> Shape {
    Shape::new(x.n, x.c, 2 * x.h, 2 * x.w)
}

pub fn upsample_nearest2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    Tensor::from_fn(upsample_shape(xs), |n, c, h, w| x.at(n, c, h / 2, w / 2))
}

pub fn upsample_nearest2x_backward<T: Float>(xs: Shape, dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(xs, |n, c, h, w| {
        dy.at(n, c, 2 * h, 2 * w)
            + dy.at(n, c, 2 * h, 2 * w + 1)
            + dy.at(n, c, 2 * h + 1, 2 * w)
            + dy.at(n, c, 2 * h + 1, 2 * w + 1)
    })
}

pub fn max_pool_shape(x: Shape, k: usize, stride: usize, pad: usize) -> Result<Shape> {
    if k == 0 || stride == 0 {
        return Err(Error::domain("max_pool", "kernel and stride must be positive"));
    }
    if pad > k / 2 {
        return Err(Error::domain("max_pool", format!("padding {pad} exceeds half of kernel {k}")));
    }
    if x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::shape("max_pool", format!("kernel {k} larger than padded {x}")));
    }
    Ok(Shape::new(x.n, x.c, (x.h + 2 * pad - k) / stride + 1, (x.w + 2 * pad - k) / stride + 1))
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per output
/// element, the flat input index of the first maximum in scan order.
pub fn max_pool<T: Float>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let xs = x.shape();
    let ys = max_pool_shape(xs, k, stride, pad)?;
    let mut out = Vec::with_capacity(ys.numel());
    let mut arg = Vec::with_capacity(ys.numel());
    for n in 0..ys.n {
        for c in 0..ys.c {
            for oy in 0..ys.h {
                let y0 = (oy * stride) as isize - pad as isize;
                let ylo = y0.max(0) as usize;
                let yhi = ((y0 + k as isize) as usize).min(xs.h);
                for ox in 0..ys.w {
                    let x0 = (ox * stride) as isize - pad as isize;
                    let xlo = x0.max(0) as usize;
                    let xhi = ((x0 + k as isize) as usize).min(xs.w);
                    let mut best = xs.index(n, c, ylo, xlo);
                    for iy in ylo..yhi {
                        for ix in xlo..xhi {
                            let i = xs.index(n, c, iy, ix);
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(ys, out)?, arg))
}

pub fn max_pool_backward<T: Float>(xs: Shape, argmax: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != dy.numel() {
        return Err(Error::shape("max_pool_backward", "gradient does not match pooled output"));
    }
    let mut dx = vec![T::zero(); xs.numel()];
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx[i] = dx[i] + g;
    }
    Tensor::from_vec(xs, dx)
}

pub fn space_to_depth_shape(x: Shape) -> Result<Shape> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::shape("focus", format!("spatial dims of {x} must be even")));
    }
    Ok(Shape::new(x.n, 4 * x.c, x.h / 2, x.w / 2))
}

/// Offsets `(dy, dx)` of the four 2×2 phases, in output channel-group order.
const PHASES: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// 2×2 space-to-depth: output channel `g·C + c` holds input channel `c` sampled at
/// phase `g` of `(0,0), (1,0), (0,1), (1,1)` (row offset first).
pub fn space_to_depth<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ys = space_to_depth_shape(xs)?;
    Ok(Tensor::from_fn(ys, |n, oc, h, w| {
        let (g, c) = (oc / xs.c, oc % xs.c);
        let (dy, dx) = PHASES[g];
        x.at(n, c, 2 * h + dy, 2 * w + dx)
    }))
}

pub fn space_to_depth_backward<T: Float>(xs: Shape, dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(xs, |n, c, h, w| {
        let g = PHASES.iter().position(|&p| p == (h % 2, w % 2)).expect("phase exists");
        dy.at(n, g * xs.c + c, h / 2, w / 2)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

/// Pools over `(h, w)` into `(n, c, 1, 1)`. For `Max`, also returns argmax indices.
pub fn global_pool<T: Float>(x: &Tensor<T>, kind: PoolKind) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * s.c);
    let mut arg = Vec::new();
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        match kind {
            PoolKind::Mean => out.push(chunk.iter().fold(T::zero(), |a, &v| a + v) / T::lit(plane as f64)),
            PoolKind::Max => {
                let best = (1..plane).fold(0, |b, j| if chunk[j] > chunk[b] { j } else { b });
                out.push(chunk[best]);
                arg.push(i * plane + best);
            }
        }
    }
    (Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out).expect("sized"), arg)
}

pub fn global_pool_backward<T: Float>(xs: Shape, kind: PoolKind, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    match kind {
        PoolKind::Mean => {
            let inv = T::one() / T::lit(xs.plane() as f64);
            Tensor::from_fn(xs, |n, c, _, _| dy.at(n, c, 0, 0) * inv)
        }
        PoolKind::Max => {
            let mut dx = vec![T::zero(); xs.numel()];
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                dx[i] = dx[i] + g;
            }
            Tensor::from_vec(xs, dx).expect("sized")
        }
    }
}

/// Pools across channels into `(n, 1, h, w)`. For `Max`, also returns argmax indices.
pub fn channel_pool<T: Float>(x: &Tensor<T>, kind: PoolKind) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let ys = Shape::new(s.n, 1, s.h, s.w);
    let mut out = Vec::with_capacity(ys.numel());
    let mut arg = Vec::new();
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                match kind {
                    PoolKind::Mean => {
                        let sum = (0..s.c).fold(T::zero(), |a, c| a + x.at(n, c, h, w));
                        out.push(sum / T::lit(s.c as f64));
                    }
                    PoolKind::Max => {
                        let mut best = s.index(n, 0, h, w);
                        for c in 1..s.c {
                            let i = s.index(n, c, h, w);
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                        out.push(x.data()[best]);
                        arg.push(best);
                    }
                }
            }
        }
    }
    (Tensor::from_vec(ys, out).expect("sized"), arg)
}

pub fn channel_pool_backward<T: Float>(xs: Shape, kind: PoolKind, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    match kind {
        PoolKind::Mean => {
            let inv = T::one() / T::lit(xs.c as f64);
            Tensor::from_fn(xs, |n, _, h, w| dy.at(n, 0, h, w) * inv)
        }
        PoolKind::Max => {
            let mut dx = vec![T::zero(); xs.numel()];
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                dx[i] = dx[i] + g;
            }
            Tensor::from_vec(xs, dx).expect("sized")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn upsample_replicates() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 5.0);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn max_pool_center_max_and_identity_k1() {
        let mut x = Tensor::<f32>::uniform(Shape::new(1, 2, 5, 5), 3, -1.0, 1.0);
        x = x.with_value(Shape::new(1, 2, 5, 5).index(0, 1, 2, 2), 10.0);
        let (y, _) = max_pool(&x, 5, 1, 2).unwrap();
        assert_eq!(y.at(0, 1, 2, 2), 10.0);
        let (y1, _) = max_pool(&x, 1, 1, 0).unwrap();
        assert!(y1.bit_eq(&x));
        let (y2, _) = max_pool(&y1, 1, 1, 0).unwrap();
        assert!(y2.bit_eq(&y1));
    }

    #[test]
    fn space_to_depth_is_a_permutation() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f32);
        let y = space_to_depth(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 2));
        let mut a = x.to_vec();
        let mut b = y.to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        // phase (1, 0) is channel group 1
        assert_eq!(y.at(0, 1, 0, 0), 4.0);
        assert!(space_to_depth(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn split_size_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 5, 2, 2));
        assert!(split_channels(&x, &[2, 2]).is_err());
        assert_eq!(split_channels(&x, &[2, 3]).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn concat_split_round_trip(n in 1usize..3, ca in 1usize..5, cb in 1usize..5, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let a = Tensor::<f32>::uniform(Shape::new(n, ca, h, w), seed, -1.0, 1.0);
            let b = Tensor::<f32>::uniform(Shape::new(n, cb, h, w), seed + 1, -1.0, 1.0);
            let cat = concat_channels(&[&a, &b]).unwrap();
            let parts = split_channels(&cat, &[ca, cb]).unwrap();
            prop_assert!(parts[0].bit_eq(&a));
            prop_assert!(parts[1].bit_eq(&b));
        }
    }
}
