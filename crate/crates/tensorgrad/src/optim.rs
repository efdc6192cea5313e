use crate::param::ParamSet;
use crate::scalar::Scalar;

/// Plain SGD with optional heavy-ball momentum.
///
/// `v <- momentum * v + g; theta <- theta - lr * v`, then gradients are zeroed.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        }
        let (mu, lr) = (F::from_f64(self.momentum), F::from_f64(lr));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.data();
            for ((theta, vel), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + g;
                *theta = *theta - lr * *vel;
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Parameter, Tensor};

    fn single(value: f64, grad: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let id = ps.push(Parameter::new("w", Tensor::scalar(value))).unwrap();
        ps.get_mut(id).grad = Tensor::scalar(grad);
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = single(1.25, 0.0);
        Sgd::new(0.9).step(&mut ps, 0.1);
        assert_eq!(ps.iter().next().unwrap().value.data(), &[1.25]);
    }

    #[test]
    fn plain_step_and_grad_reset() {
        let mut ps = single(1.0, 1.0);
        Sgd::new(0.0).step(&mut ps, 0.1);
        let p = ps.iter().next().unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(p.grad.data(), &[0.0]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = 1, v2 = 0.9 + 1 = 1.9; total decrease 2.9.
        let mut ps = single(0.0, 1.0);
        let mut opt = Sgd::new(0.9);
        opt.step(&mut ps, 1.0);
        ps.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        opt.step(&mut ps, 1.0);
        assert!((ps.iter().next().unwrap().value.data()[0] + 2.9).abs() < 1e-12);
    }
}
