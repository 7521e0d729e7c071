use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{Shape, Tensor};

/// A named model tensor. Trainable parameters receive gradients; buffers (batch-norm
/// running statistics) are carried and serialized but never differentiated.
#[derive(Clone, Debug)]
pub struct Param<T: Float> {
    name: String,
    dims: Vec<usize>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    trainable: bool,
}

/// Logical dims (rank 1 to 4) padded with trailing unit dims into a 4-D shape.
pub fn shape_for_dims(dims: &[usize]) -> Result<Shape> {
    if dims.is_empty() || dims.len() > 4 || dims.contains(&0) {
        return Err(Error::domain("param", format!("unsupported dims {dims:?}")));
    }
    let mut d = [1usize; 4];
    d[..dims.len()].copy_from_slice(dims);
    Ok(Shape::new(d[0], d[1], d[2], d[3]))
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, dims: &[usize], value: Tensor<T>, trainable: bool) -> Result<Self> {
        let shape = shape_for_dims(dims)?;
        if value.shape() != shape {
            return Err(Error::shape("param", format!("value {} for dims {dims:?}", value.shape())));
        }
        Ok(Param { name: name.into(), dims: dims.to_vec(), value, grad: None, trainable })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "param",
                format!("{}: new value {} for {}", self.name, value.shape(), self.value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Option<Tensor<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.shape() != self.value.shape() {
                return Err(Error::shape("param", format!("{}: grad {} for {}", self.name, g.shape(), self.value.shape())));
            }
        }
        self.grad = grad;
        Ok(())
    }
}

/// 64-bit FNV-1a of a parameter name.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Deterministic parameter initialization.
///
/// Weights are Kaiming-uniform with negative slope `√5`, i.e. on `[-1/√fan_in, 1/√fan_in)`, drawn from a
/// SplitMix64 stream seeded with `seed ^ fnv1a64(name)`: `u = (next >> 11) · 2⁻⁵³`,
/// `w = (2u − 1) · bound`, rounded to f32 before conversion so f32 and f64 builds
/// hold identical values.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `fan_in` is the product of all dims after the first.
    pub fn kaiming<T: Float>(&self, name: impl Into<String>, dims: &[usize]) -> Param<T> {
        let name = name.into();
        let shape = shape_for_dims(dims).expect("layer dims are validated by the caller");
        let fan_in: usize = dims[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = SplitMix64::seed_from_u64(self.seed ^ name_hash(&name));
        let data = (0..shape.numel())
            .map(|_| {
                let u: f64 = rng.random();
                T::lit(((2.0 * u - 1.0) * bound) as f32 as f64)
            })
            .collect();
        let value = Tensor::from_vec(shape, data).expect("sized");
        Param::new(name, dims, value, true).expect("sized")
    }

    pub fn constant<T: Float>(&self, name: impl Into<String>, dims: &[usize], v: f64, trainable: bool) -> Param<T> {
        let shape = shape_for_dims(dims).expect("layer dims are validated by the caller");
        Param::new(name, dims, Tensor::full(shape, T::lit(v)), trainable).expect("sized")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn kaiming_is_keyed_by_name_and_seed() {
        let init = Initializer::new(0);
        let a: Param<f32> = init.kaiming("x.weight", &[8, 4, 3, 3]);
        let b: Param<f32> = init.kaiming("x.weight", &[8, 4, 3, 3]);
        let c: Param<f32> = init.kaiming("y.weight", &[8, 4, 3, 3]);
        let d: Param<f32> = Initializer::new(1).kaiming("x.weight", &[8, 4, 3, 3]);
        assert!(a.value().bit_eq(b.value()));
        assert!(!a.value().bit_eq(c.value()));
        assert!(!a.value().bit_eq(d.value()));
        let bound = (6.0f32 / 36.0).sqrt();
        assert!(a.value().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn f64_build_matches_f32_values() {
        let init = Initializer::new(42);
        let a: Param<f32> = init.kaiming("w", &[3, 5, 1, 1]);
        let b: Param<f64> = init.kaiming("w", &[3, 5, 1, 1]);
        assert!(a.value().cast::<f64>().bit_eq(b.value()));
    }

    #[test]
    fn dims_pad_to_four() {
        assert_eq!(shape_for_dims(&[7]).unwrap(), Shape::new(7, 1, 1, 1));
        assert!(shape_for_dims(&[]).is_err());
        assert!(shape_for_dims(&[1, 2, 3, 4, 5]).is_err());
    }
}
