use super::TrainConfig;
use crate::autodiff::{Scalar, Tensor};

/// Moment buffers mirroring the parameter list. SGD keeps its velocity in
/// `first`; `second` stays empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&mut Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
) {
    state.step += 1;
    let (mu, wd, lr) = (T::lit(config.momentum), T::lit(config.weight_decay), T::lit(lr));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
        debug_assert_eq!(p.shape(), g.shape());
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = if wd == T::zero() { g } else { g + wd * *p };
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Adam with bias correction and decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + λp)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (eps, wd, lr) = (T::lit(config.eps), T::lit(config.weight_decay), T::lit(lr));
    let iter = params.iter_mut().zip(grads).zip(state.first.iter_mut().zip(&mut state.second));
    for ((p, g), (m, v)) in iter {
        debug_assert_eq!(p.shape(), g.shape());
        let cells = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in cells {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p;
            *p -= lr * update;
        }
    }
}
