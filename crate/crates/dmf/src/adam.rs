//! Adam with bias correction.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use indexmap::IndexMap;

/// Optimizer state. Moment buffers are keyed by parameter name and created
/// lazily, so the same optimizer can be reused after a checkpoint reload
/// as long as the layout is unchanged.
#[derive(Debug)]
pub struct Adam<P: Scalar> {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Vec<P>>,
    v: IndexMap<String, Vec<P>>,
}

impl<P: Scalar> Adam<P> {
    /// Defaults: alpha 3e-4, beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(alpha: f64) -> Self {
        Adam {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients stored on the parameters.
    /// Parameters without a gradient slot are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<P>) {
        self.t += 1;
        let b1 = P::from_f64(self.beta1);
        let b2 = P::from_f64(self.beta2);
        let one = P::one();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        // theta -= alpha * mhat / (sqrt(vhat) + eps), with the bias
        // corrections folded into a single step size.
        let rate = P::from_f64(self.alpha / c1);
        let vscale = P::from_f64(1.0 / c2);
        let eps = P::from_f64(self.eps);

        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad() else { continue };
            let grad = grad.to_vec();
            let n = grad.len();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![P::zero(); n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![P::zero(); n]);
            assert_eq!(m.len(), n, "parameter {name} changed size");
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let vhat = v[i] * vscale;
                data[i] = data[i] - rate * m[i] / (vhat.sqrt() + eps);
            }
        }
    }
}
