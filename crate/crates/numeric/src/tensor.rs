//! Dense n-dimensional tensors with optional gradient storage.

use crate::error::NumericError;
use crate::real::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense tensor. `grad`, when present, always has the same length as `data`.
#[derive(Debug, Clone)]
pub struct Tensor<R: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    pub grad: Option<Vec<R>>,
    pub requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self, NumericError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericError::ShapeMismatch {
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(1 / fan_in).
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| R::of_f64(rng.random_range(-bound..bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[R]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![R::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = R::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_bad_shape() {
        let r = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_in_init_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::<f32>::fan_in_uniform(&[4, 4], 4, &mut a);
        let tb = Tensor::<f32>::fan_in_uniform(&[4, 4], 4, &mut b);
        assert_eq!(ta.data, tb.data);
        let bound = 0.5f32;
        assert!(ta.data.iter().all(|v| v.abs() <= bound));
    }
}
