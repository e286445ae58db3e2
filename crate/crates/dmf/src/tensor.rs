use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use std::sync::Arc;

/// Dense n-dimensional array of floats with an optional gradient slot.
///
/// Data is stored flat in row-major order behind an `Arc`, so cloning a
/// tensor into a computation graph is cheap and frozen parameter sets can
/// be shared across threads. Mutation goes through [`Tensor::data_mut`],
/// which copies only if the buffer is still shared.
#[derive(Clone, Debug)]
pub struct Tensor<P: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<P>>,
    requires_grad: bool,
    grad: Option<Vec<P>>,
}

impl<P: Scalar> PartialEq for Tensor<P> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl<P: Scalar> Tensor<P> {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<P>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![P::zero(); numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: P) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: P) -> Self {
        Tensor::from_vec(vec![1], vec![value]).unwrap()
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> P) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new((0..numel).map(&mut f).collect()),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform draws in (-a, a), `a = sqrt(6 / (fan_in + fan_out))`.
    ///
    /// Fans follow the usual convention: for a rank-2 weight `[in, out]`
    /// the fans are the two dimensions; for a conv kernel
    /// `[out_ch, in_ch, kh, kw]` each fan is multiplied by the receptive
    /// field size; anything else falls back to `numel` for both fans.
    pub fn glorot_uniform(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let (fan_in, fan_out) = match shape.len() {
            2 => (shape[0], shape[1]),
            4 => {
                let rf = shape[2] * shape[3];
                (shape[1] * rf, shape[0] * rf)
            }
            _ => {
                let n: usize = shape.iter().product();
                (n, n)
            }
        };
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| P::from_f64(rng.uniform(-a, a)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    /// Mutable access to the buffer; copies if it is shared with a graph.
    pub fn data_mut(&mut self) -> &mut [P] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<P>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<P>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
        if !yes {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[P]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient slot. Length must match the data buffer.
    pub fn set_grad(&mut self, grad: Vec<P>) {
        assert_eq!(grad.len(), self.data.len(), "gradient length mismatch");
        self.grad = Some(grad);
    }

    /// Adds `delta` into the gradient slot, allocating zeros if absent.
    pub fn accumulate_grad(&mut self, delta: &[P]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![P::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = P::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// All elements finite (no NaN or infinity).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        })
    }

    /// Element-wise cast to another scalar width.
    pub fn cast<Q: Scalar>(&self) -> Tensor<Q> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| Q::from_f64(Scalar::to_f64(x))).collect()),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]);
        assert!(err.is_err());
    }

    #[test]
    fn glorot_bound_holds() {
        // 300x300: a = sqrt(6/600) = 0.1; every draw lies inside (-a, a).
        let mut rng = Rng::new(9);
        let t = Tensor::<f64>::glorot_uniform(vec![300, 300], &mut rng);
        let a = (6.0f64 / 600.0).sqrt();
        assert!((a - 0.1).abs() < 1e-12);
        assert!(t.data().iter().all(|v| v.abs() <= a));
        // The sample actually gets close to the bound.
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.09);
    }

    #[test]
    fn glorot_deterministic() {
        let a = Tensor::<f32>::glorot_uniform(vec![17, 5], &mut Rng::new(123));
        let b = Tensor::<f32>::glorot_uniform(vec![17, 5], &mut Rng::new(123));
        assert_eq!(a, b);
    }

    #[test]
    fn zeros_scheme() {
        let t = Tensor::<f32>::zeros(vec![4, 4]);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }
}
