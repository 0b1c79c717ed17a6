use crate::numerics::matrix::Matrix;
use crate::numerics::params::{ParamGrads, ParameterSet};
use crate::scalar::Scalar;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), step: 0, moments: Vec::new() }
    }

    /// Applies one update; frozen tensors and tensors without a gradient are untouched.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParamGrads<T>) {
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (id, g) in grads.iter() {
            if params.get(id).frozen {
                continue;
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let value = params.value_mut(id);
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
