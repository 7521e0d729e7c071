use std::fmt;
use std::str::FromStr;

use super::{charge, MacCounter};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    /// Exact form `x · Φ(x)` with `Φ` from the error function.
    Gelu,
    Sigmoid,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::domain("activation", format!("unknown kind {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        })
    }
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn normal_cdf<T: Float>(v: T) -> T {
    T::lit(0.5) * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn normal_pdf<T: Float>(v: T) -> T {
    T::lit(0.398_942_280_401_432_7) * (-(v * v) * T::lit(0.5)).exp()
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, v: T) -> T {
        match self {
            Activation::Silu => v * sigmoid(v),
            Activation::Gelu => v * normal_cdf(v),
            Activation::Sigmoid => sigmoid(v),
            Activation::Relu => v.max(T::zero()),
        }
    }

    #[inline]
    pub fn derivative<T: Float>(self, v: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }
            Activation::Gelu => normal_cdf(v) + v * normal_pdf(v),
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (T::one() - s)
            }
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn activation<T: Float>(x: &Tensor<T>, kind: Activation, macs: Option<&MacCounter>) -> Tensor<T> {
    charge(macs, x.numel() as u64);
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Float>(x: &Tensor<T>, kind: Activation, dy: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("activation_backward", x.shape(), dy.shape())?;
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| g * kind.derivative(v)).collect();
    Tensor::from_vec(x.shape(), data)
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

pub fn add_shape(a: Shape, b: Shape) -> Result<Shape> {
    same_shape("add", a, b).map(|_| a)
}

pub fn mul_shape(a: Shape, b: Shape) -> Result<Shape> {
    same_shape("mul", a, b).map(|_| a)
}

pub fn add<T: Float>(x: &Tensor<T>, y: &Tensor<T>, macs: Option<&MacCounter>) -> Result<Tensor<T>> {
    add_shape(x.shape(), y.shape())?;
    charge(macs, x.numel() as u64);
    Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect())
}

pub fn mul<T: Float>(x: &Tensor<T>, y: &Tensor<T>, macs: Option<&MacCounter>) -> Result<Tensor<T>> {
    mul_shape(x.shape(), y.shape())?;
    charge(macs, x.numel() as u64);
    Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(&a, &b)| a * b).collect())
}

pub fn scale<T: Float>(x: &Tensor<T>, k: T, macs: Option<&MacCounter>) -> Tensor<T> {
    charge(macs, x.numel() as u64);
    x.map(|v| v * k)
}

/// Shape check for `x ⊙ g` where every dimension of `g` either equals the one in
/// `x` or is 1 (broadcast).
pub fn broadcast_shape(x: Shape, g: Shape) -> Result<Shape> {
    let ok = x.dims().iter().zip(g.dims()).all(|(&a, b)| b == a || b == 1);
    if !ok {
        return Err(Error::shape("broadcast_mul", format!("cannot broadcast {g} onto {x}")));
    }
    Ok(x)
}

#[inline]
fn broadcast_index(g: Shape, n: usize, c: usize, h: usize, w: usize) -> usize {
    let pick = |d: usize, i: usize| if d == 1 { 0 } else { i };
    g.index(pick(g.n, n), pick(g.c, c), pick(g.h, h), pick(g.w, w))
}

pub fn broadcast_mul<T: Float>(x: &Tensor<T>, g: &Tensor<T>, macs: Option<&MacCounter>) -> Result<Tensor<T>> {
    let s = broadcast_shape(x.shape(), g.shape())?;
    let gs = g.shape();
    let (xd, gd) = (x.data(), g.data());
    charge(macs, s.numel() as u64);
    Ok(Tensor::from_fn(s, |n, c, h, w| xd[s.index(n, c, h, w)] * gd[broadcast_index(gs, n, c, h, w)]))
}

pub fn broadcast_mul_backward<T: Float>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = broadcast_shape(x.shape(), g.shape())?;
    same_shape("broadcast_mul_backward", s, dy.shape())?;
    let gs = g.shape();
    let (xd, gd, dd) = (x.data(), g.data(), dy.data());
    let dx = Tensor::from_fn(s, |n, c, h, w| dd[s.index(n, c, h, w)] * gd[broadcast_index(gs, n, c, h, w)]);
    let mut dg = vec![T::zero(); gs.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let i = s.index(n, c, h, w);
                    let j = broadcast_index(gs, n, c, h, w);
                    dg[j] = dg[j] + dd[i] * xd[i];
                }
            }
        }
    }
    Ok((dx, Tensor::from_vec(gs, dg)?))
}

/// Sum of all elements as a `(1, 1, 1, 1)` tensor.
pub fn sum_all<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply(1.0f64) - expect).abs() < 1e-15);
        assert!((Activation::Silu.apply(1.0f64) - 0.731059).abs() < 1e-6);
        let v = Activation::Silu.apply(-20.0f64);
        assert!(v > -1e-7 && v < 0.0);
        let v32 = Activation::Silu.apply(-20.0f32);
        assert!(v32 > -1e-7 && v32 < 0.0);
    }

    #[test]
    fn gelu_uses_erf() {
        // x · Φ(x) at x = 1: Φ(1) = 0.841344746068543
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-14);
    }

    #[test]
    fn elementwise_identities() {
        let s = Shape::new(1, 2, 1, 1);
        let x = Tensor::<f32>::from_vec(s, vec![2.0, -3.0]).unwrap();
        assert!(mul(&x, &Tensor::ones(s), None).unwrap().bit_eq(&x));
        assert!(add(&x, &Tensor::zeros(s), None).unwrap().bit_eq(&x));
        assert_eq!(mul(&x, &x, None).unwrap().data(), &[4.0, 9.0]);
        assert!(add(&x, &Tensor::zeros(Shape::new(1, 1, 1, 2)), None).is_err());
    }

    #[test]
    fn broadcast_over_space_and_channels() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| (c * 4 + h * 2 + w) as f64);
        let gc = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![10.0, 100.0]).unwrap();
        let y = broadcast_mul(&x, &gc, None).unwrap();
        assert_eq!(y.at(0, 1, 1, 1), 700.0);
        let gs = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = broadcast_mul(&x, &gs, None).unwrap();
        assert_eq!(y.at(0, 1, 1, 0), 6.0 * 3.0);
        assert!(broadcast_mul(&x, &Tensor::zeros(Shape::new(1, 3, 1, 1)), None).is_err());
    }
}
