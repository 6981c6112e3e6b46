//! Nesterov-momentum SGD with decoupled-into-gradient weight decay.
//!
//! Per trainable parameter, with d = g + wd * p:
//!     v <- mu * v + d
//!     p <- p - lr * (d + mu * v)
//! Momentum buffers persist in the parameter store across steps.

#![allow(clippy::needless_range_loop)] // index loops drive parallel buffers

use crate::param::{ParamKind, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

pub fn sgd_nesterov_step<T: Scalar>(store: &mut ParamStore<T>, cfg: SgdConfig) {
    let lr = T::from_f64(cfg.lr);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for p in store.iter_mut() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let d = p.grad[i] + wd * value[i];
            let v = mu * p.momentum[i] + d;
            p.momentum[i] = v;
            value[i] = value[i] - lr * (d + mu * v);
        }
    }
}
