use alloc::vec;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, &[x], |g, p, _| {
            vec![Some(Tensor::full(p[0].shape(), g.item()))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let out = Tensor::scalar(self.value(x).sum() / n);
        self.push_op(out, &[x], move |g, p, _| {
            vec![Some(Tensor::full(p[0].shape(), g.item() / n))]
        })
    }

    /// `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> crate::Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean_all(d))
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> crate::Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean_all(d))
    }
}
