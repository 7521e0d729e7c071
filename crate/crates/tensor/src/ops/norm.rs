use super::{charge, MacCounter};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{Shape, Tensor};

/// Running-statistics momentum for batch normalization in training mode.
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch-norm output plus what the backward pass needs.
pub struct BatchNormOut<T> {
    pub y: Tensor<T>,
    /// Mean used for normalization, per channel (batch mean in train mode).
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Updated `(running_mean, running_var)`; only in train mode.
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

fn check_vec(op: &'static str, what: &str, v: &Tensor<impl Float>, c: usize) -> Result<()> {
    if v.numel() != c {
        return Err(Error::shape(op, format!("{what} has {} entries for {c} channels", v.numel())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    mode: BnMode,
    macs: Option<&MacCounter>,
) -> Result<BatchNormOut<T>> {
    let s = x.shape();
    for (what, v) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        check_vec("batch_norm", what, v, s.c)?;
    }
    if eps < 0.0 || (eps == 0.0 && mode == BnMode::Train) || !eps.is_finite() {
        return Err(Error::domain("batch_norm", format!("eps = {eps}")));
    }
    let eps_t = T::lit(eps);
    let plane = s.plane();
    let xd = x.data();

    let (mean, var, running) = match mode {
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        BnMode::Train => {
            let count = s.n * plane;
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut sum = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    sum = xd[off..off + plane].iter().fold(sum, |a, &v| a + v);
                }
                let m = sum / T::lit(count as f64);
                let mut sq = T::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    sq = xd[off..off + plane].iter().fold(sq, |a, &v| a + (v - m) * (v - m));
                }
                mean[c] = m;
                var[c] = sq / T::lit(count as f64);
            }
            let mom = T::lit(BN_MOMENTUM);
            let keep = T::one() - mom;
            let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
            let rm: Vec<T> = (0..s.c).map(|c| keep * running_mean.data()[c] + mom * mean[c]).collect();
            let rv: Vec<T> = (0..s.c).map(|c| keep * running_var.data()[c] + mom * var[c] * unbias).collect();
            let running = (
                Tensor::from_vec(running_mean.shape(), rm)?,
                Tensor::from_vec(running_var.shape(), rv)?,
            );
            (mean, var, Some(running))
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma.data()[c] * inv_std[c];
            let (m, b) = (mean[c], beta.data()[c]);
            let off = (n * s.c + c) * plane;
            for (o, &v) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                *o = (v - m) * scale + b;
            }
        }
    }
    charge(macs, s.numel() as u64);
    Ok(BatchNormOut { y: Tensor::from_vec(s, out)?, mean, inv_std, running })
}

pub struct NormGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dgamma: Option<Tensor<T>>,
    pub dbeta: Option<Tensor<T>>,
}

/// Shared gradient for normalizations over groups of `count` elements.
/// `dxhat` is `dy · γ`; returns `inv/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))`.
fn normalized_group_grad<T: Float>(xhat: &[T], dxhat: &[T], inv: T, out: &mut [T]) {
    let nn = T::lit(xhat.len() as f64);
    let sum_d = dxhat.iter().fold(T::zero(), |a, &v| a + v);
    let sum_dx = dxhat.iter().zip(xhat).fold(T::zero(), |a, (&d, &xh)| a + d * xh);
    for ((o, &d), &xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv / nn * (nn * d - sum_d - xh * sum_dx);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    mode: BnMode,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<NormGrads<T>> {
    let s = x.shape();
    if dy.shape() != s {
        return Err(Error::shape("batch_norm_backward", format!("grad {} for {s}", dy.shape())));
    }
    let plane = s.plane();
    let (xd, gd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let g = gamma.data()[c];
        let mut xhat = Vec::with_capacity(s.n * plane);
        let mut dxhat = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                let xh = (xd[i] - mean[c]) * inv_std[c];
                dgamma[c] = dgamma[c] + gd[i] * xh;
                dbeta[c] = dbeta[c] + gd[i];
                xhat.push(xh);
                dxhat.push(gd[i] * g);
            }
        }
        if need[0] {
            let mut local = vec![T::zero(); xhat.len()];
            match mode {
                BnMode::Eval => {
                    for (o, &d) in local.iter_mut().zip(&dxhat) {
                        *o = d * inv_std[c];
                    }
                }
                BnMode::Train => normalized_group_grad(&xhat, &dxhat, inv_std[c], &mut local),
            }
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                dx[off..off + plane].copy_from_slice(&local[n * plane..(n + 1) * plane]);
            }
        }
    }
    let vs = gamma.shape();
    Ok(NormGrads {
        dx: need[0].then(|| Tensor::from_vec(s, dx)).transpose()?,
        dgamma: need[1].then(|| Tensor::from_vec(vs, dgamma)).transpose()?,
        dbeta: need[2].then(|| Tensor::from_vec(vs, dbeta)).transpose()?,
    })
}

/// Layer-norm output plus per-location statistics, indexed `n · H·W + p`.
pub struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes over the channel dimension independently at every `(n, h, w)`.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    macs: Option<&MacCounter>,
) -> Result<LayerNormOut<T>> {
    let s = x.shape();
    check_vec("layer_norm", "gamma", gamma, s.c)?;
    check_vec("layer_norm", "beta", beta, s.c)?;
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::domain("layer_norm", format!("eps = {eps}")));
    }
    let eps_t = T::lit(eps);
    let plane = s.plane();
    let cc = T::lit(s.c as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); s.numel()];
    let mut mean = Vec::with_capacity(s.n * plane);
    let mut inv_std = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let m = (0..s.c).fold(T::zero(), |a, c| a + xd[base + c * plane + p]) / cc;
            let v = (0..s.c).fold(T::zero(), |a, c| {
                let d = xd[base + c * plane + p] - m;
                a + d * d
            }) / cc;
            let inv = T::one() / (v + eps_t).sqrt();
            for c in 0..s.c {
                let i = base + c * plane + p;
                out[i] = (xd[i] - m) * inv * gamma.data()[c] + beta.data()[c];
            }
            mean.push(m);
            inv_std.push(inv);
        }
    }
    charge(macs, s.numel() as u64);
    Ok(LayerNormOut { y: Tensor::from_vec(s, out)?, mean, inv_std })
}

pub fn layer_norm_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
    need: [bool; 3],
) -> Result<NormGrads<T>> {
    let s = x.shape();
    if dy.shape() != s {
        return Err(Error::shape("layer_norm_backward", format!("grad {} for {s}", dy.shape())));
    }
    let plane = s.plane();
    let (xd, gd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let mut xhat = vec![T::zero(); s.c];
    let mut dxhat = vec![T::zero(); s.c];
    let mut local = vec![T::zero(); s.c];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let (m, inv) = (mean[n * plane + p], inv_std[n * plane + p]);
            for c in 0..s.c {
                let i = base + c * plane + p;
                xhat[c] = (xd[i] - m) * inv;
                dxhat[c] = gd[i] * gamma.data()[c];
                dgamma[c] = dgamma[c] + gd[i] * xhat[c];
                dbeta[c] = dbeta[c] + gd[i];
            }
            if need[0] {
                normalized_group_grad(&xhat, &dxhat, inv, &mut local);
                for c in 0..s.c {
                    dx[base + c * plane + p] = local[c];
                }
            }
        }
    }
    let vs = gamma.shape();
    Ok(NormGrads {
        dx: need[0].then(|| Tensor::from_vec(s, dx)).transpose()?,
        dgamma: need[1].then(|| Tensor::from_vec(vs, dgamma)).transpose()?,
        dbeta: need[2].then(|| Tensor::from_vec(vs, dbeta)).transpose()?,
    })
}

/// Per-channel vector stored as a `(c, 1, 1, 1)` tensor.
pub fn channel_vector<T: Float>(values: &[f64]) -> Tensor<T> {
    Tensor::from_vec(
        Shape::new(values.len(), 1, 1, 1),
        values.iter().map(|&v| T::lit(v)).collect(),
    )
    .expect("length matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(c: usize, g: f64, b: f64, m: f64, v: f64) -> [Tensor<f64>; 4] {
        [
            channel_vector(&vec![g; c]),
            channel_vector(&vec![b; c]),
            channel_vector(&vec![m; c]),
            channel_vector(&vec![v; c]),
        ]
    }

    #[test]
    fn eval_unit_stats_is_identity() {
        let x = Tensor::<f64>::uniform(Shape::new(2, 3, 4, 4), 1, -3.0, 3.0);
        let [g, b, m, v] = vecs(3, 1.0, 0.0, 0.0, 1.0);
        let out = batch_norm(&x, &g, &b, &m, &v, 0.0, BnMode::Eval, None).unwrap();
        assert!(out.y.bit_eq(&x));
    }

    #[test]
    fn eval_affine_arithmetic() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 3.0);
        let [g, b, m, v] = vecs(1, 2.0, 1.0, 0.0, 1.0);
        let out = batch_norm(&x, &g, &b, &m, &v, 0.0, BnMode::Eval, None).unwrap();
        assert_eq!(out.y.data(), &[7.0]);
    }

    #[test]
    fn train_constant_input_gives_beta() {
        let x = Tensor::<f64>::full(Shape::new(2, 2, 3, 3), 4.5);
        let [g, b, m, v] = vecs(2, 1.7, 0.25, 0.0, 1.0);
        let out = batch_norm(&x, &g, &b, &m, &v, 1e-5, BnMode::Train, None).unwrap();
        assert!(out.y.data().iter().all(|&y| y == 0.25));
        let (rm, rv) = out.running.unwrap();
        assert!((rm.data()[0] - 0.03 * 4.5).abs() < 1e-12);
        assert!((rv.data()[0] - 0.97).abs() < 1e-12);
    }

    #[test]
    fn eps_domain() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let [g, b, m, v] = vecs(1, 1.0, 0.0, 0.0, 1.0);
        assert!(batch_norm(&x, &g, &b, &m, &v, -1e-3, BnMode::Eval, None).is_err());
        assert!(batch_norm(&x, &g, &b, &m, &v, 0.0, BnMode::Train, None).is_err());
    }

    #[test]
    fn layer_norm_two_channels() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
        let g = channel_vector(&[1.0, 1.0]);
        let b = channel_vector(&[0.0, 0.0]);
        let out = layer_norm(&x, &g, &b, 0.0, None).unwrap();
        assert_eq!(out.y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_constant_or_zero_gamma_gives_beta() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |n, _, h, w| (n + h * 2 + w) as f64);
        let g = channel_vector(&[1.0, 2.0, 3.0]);
        let b = channel_vector(&[0.5, -1.0, 2.0]);
        let out = layer_norm(&x, &g, &b, 1e-6, None).unwrap();
        for c in 0..3 {
            assert!((0..4).all(|p| out.y.data()[c * 4 + p] == b.data()[c]));
        }
        let x = Tensor::<f64>::uniform(Shape::new(1, 3, 2, 2), 5, -1.0, 1.0);
        let z = channel_vector(&[0.0, 0.0, 0.0]);
        let out = layer_norm(&x, &z, &b, 1e-6, None).unwrap();
        for c in 0..3 {
            assert!((0..4).all(|p| out.y.data()[c * 4 + p] == b.data()[c]));
        }
    }
}
