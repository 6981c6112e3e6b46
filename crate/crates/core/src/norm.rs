//! Batch normalization kernels over NCHW tensors.
//!
//! Train mode standardizes by per-channel batch statistics (biased variance)
//! and updates running statistics with the unbiased estimate; eval mode uses
//! the running statistics as constants. The saved normalized activations and
//! inverse standard deviations drive the backward pass.

#![allow(clippy::needless_range_loop)] // index loops drive parallel buffers

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Values saved by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

#[derive(Debug)]
pub struct BnForwardOut<T> {
    pub y: Vec<T>,
    pub saved: BnSaved<T>,
    /// Batch statistics (mean, unbiased variance) per channel; train mode only.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Train-mode forward: standardize by batch statistics. Returns the biased
/// normalization alongside (mean, unbiased variance) for the caller's
/// running-stat update.
pub fn batchnorm_forward_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
) -> Result<BnForwardOut<T>> {
    let per_channel = batch * plane;
    if per_channel < 2 {
        return Err(Error::shape(
            "batchnorm2d",
            format!("train mode needs batch*H*W >= 2 per channel, got {per_channel}"),
        ));
    }

    let mut y = vec![T::ZERO; x.len()];
    let mut x_hat = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; channels];
    let mut means = vec![T::ZERO; channels];
    let mut unbiased = vec![T::ZERO; channels];

    for c in 0..channels {
        let mut sum = 0.0f64;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for &v in &x[base..base + plane] {
                sum += v.to_f64();
            }
        }
        let mean = sum / per_channel as f64;
        let mut sq = 0.0f64;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for &v in &x[base..base + plane] {
                let d = v.to_f64() - mean;
                sq += d * d;
            }
        }
        let var = sq / per_channel as f64;
        means[c] = T::from_f64(mean);
        unbiased[c] = T::from_f64(sq / (per_channel - 1) as f64);

        let istd = 1.0 / (var + eps).sqrt();
        inv_std[c] = T::from_f64(istd);
        let g = gamma[c].to_f64();
        let b = beta[c].to_f64();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in base..base + plane {
                let xh = (x[i].to_f64() - mean) * istd;
                x_hat[i] = T::from_f64(xh);
                y[i] = T::from_f64(g * xh + b);
            }
        }
    }

    Ok(BnForwardOut {
        y,
        saved: BnSaved {
            x_hat,
            inv_std,
            train: true,
        },
        batch_stats: Some((means, unbiased)),
    })
}

/// Eval-mode forward with explicit running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_eval<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f64,
) -> BnForwardOut<T> {
    let mut y = vec![T::ZERO; x.len()];
    let mut x_hat = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; channels];
    for c in 0..channels {
        let mean = running_mean[c].to_f64();
        let istd = 1.0 / (running_var[c].to_f64() + eps).sqrt();
        inv_std[c] = T::from_f64(istd);
        let g = gamma[c].to_f64();
        let b = beta[c].to_f64();
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in base..base + plane {
                let xh = (x[i].to_f64() - mean) * istd;
                x_hat[i] = T::from_f64(xh);
                y[i] = T::from_f64(g * xh + b);
            }
        }
    }
    BnForwardOut {
        y,
        saved: BnSaved {
            x_hat,
            inv_std,
            train: false,
        },
        batch_stats: None,
    }
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    g: &[T],
    gamma: &[T],
    saved: &BnSaved<T>,
    batch: usize,
    channels: usize,
    plane: usize,
) -> BnGrads<T> {
    let per_channel = (batch * plane) as f64;
    let mut dx = vec![T::ZERO; g.len()];
    let mut dgamma = vec![T::ZERO; channels];
    let mut dbeta = vec![T::ZERO; channels];

    for c in 0..channels {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for n in 0..batch {
            let base = (n * channels + c) * plane;
            for i in base..base + plane {
                let gv = g[i].to_f64();
                sum_g += gv;
                sum_gx += gv * saved.x_hat[i].to_f64();
            }
        }
        dgamma[c] = T::from_f64(sum_gx);
        dbeta[c] = T::from_f64(sum_g);

        let gam = gamma[c].to_f64();
        let istd = saved.inv_std[c].to_f64();
        if saved.train {
            // dx = gamma*istd/N * (N*g - sum(g) - x_hat * sum(g*x_hat))
            let k = gam * istd / per_channel;
            for n in 0..batch {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    let gv = g[i].to_f64();
                    let xh = saved.x_hat[i].to_f64();
                    dx[i] = T::from_f64(k * (per_channel * gv - sum_g - xh * sum_gx));
                }
            }
        } else {
            // statistics are constants
            let k = gam * istd;
            for n in 0..batch {
                let base = (n * channels + c) * plane;
                for i in base..base + plane {
                    dx[i] = T::from_f64(k * g[i].to_f64());
                }
            }
        }
    }

    BnGrads { dx, dgamma, dbeta }
}
