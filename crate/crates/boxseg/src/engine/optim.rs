//! SGD with momentum and a step-decayed learning rate.

use crate::scalar::Scalar;

/// Momentum-SGD state (one velocity entry per parameter).
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub velocity: Vec<S>,
    pub momentum: S,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(param_count: usize, momentum: f64) -> Self {
        Sgd {
            velocity: vec![S::zero(); param_count],
            momentum: S::of(momentum),
        }
    }

    /// `v <- m v + scale * g; p <- p - lr * v`
    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: S, grad_scale: S) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + *g * grad_scale;
            *p -= lr * *v;
        }
    }
}

/// Step decay mirroring the common two-drop schedule: x0.1 at 2/3 and at
/// 8/9 of the run.
pub fn lr_at(base: f64, iter: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = iter as f64 / total as f64;
    if frac >= 8.0 / 9.0 {
        base * 0.01
    } else if frac >= 2.0 / 3.0 {
        base * 0.1
    } else {
        base
    }
}
