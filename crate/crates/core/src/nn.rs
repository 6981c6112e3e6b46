//! Layer building blocks: parameter registration plus a taped forward.

use crate::error::Result;
use crate::init;
use crate::param::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tape::TensorId;
use crate::tensor::{Scalar, Tensor};

/// Border handling for the padded region of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Edge replication keeps spatially constant inputs exactly constant.
    Replicate,
}

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.register(
            &wname,
            init::conv_weight(seed, &wname, c_out, c_in, k),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.register(
                &format!("{name}.bias"),
                Tensor::zeros(vec![c_out]),
                ParamKind::Weight,
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
            pad,
            pad_mode: PadMode::Zero,
        })
    }

    pub fn with_replicate_pad(mut self) -> Self {
        self.pad_mode = PadMode::Replicate;
        self
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        match self.pad_mode {
            PadMode::Replicate if self.pad > 0 => {
                let padded = s.tape.replicate_pad2d(x, self.pad)?;
                s.tape.conv2d(padded, w, b, self.stride, 0)
            }
            _ => s.tape.conv2d(x, w, b, self.stride, self.pad),
        }
    }

    pub fn weight_scalars(&self) -> u64 {
        let w = (self.c_out * self.c_in * self.k * self.k) as u64;
        w + if self.bias.is_some() {
            self.c_out as u64
        } else {
            0
        }
    }

    /// Multiply-adds for one sample at the given output extents.
    pub fn flops(&self, h_out: usize, w_out: usize) -> u64 {
        (h_out * w_out * self.c_out * self.c_in * self.k * self.k) as u64
    }
}

pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.register(
            &wname,
            init::conv_transpose_weight(seed, &wname, c_in, c_out, k),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.register(
                &format!("{name}.bias"),
                Tensor::zeros(vec![c_out]),
                ParamKind::Weight,
            )?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
            pad,
        })
    }

    /// Upsample to exactly (target_h, target_w); the per-axis output padding
    /// is derived from the target extents.
    pub fn forward_to<T: Scalar>(
        &self,
        s: &mut Session<T>,
        x: TensorId,
        target_h: usize,
        target_w: usize,
    ) -> Result<TensorId> {
        let dims = s.tape.dims(x);
        let (h_in, w_in) = (dims[2], dims[3]);
        let opad_h = output_pad_for(h_in, target_h, self.k, self.stride, self.pad)?;
        let opad_w = output_pad_for(w_in, target_w, self.k, self.stride, self.pad)?;
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape
            .conv_transpose2d(x, w, b, self.stride, self.pad, (opad_h, opad_w))
    }

    pub fn weight_scalars(&self) -> u64 {
        let w = (self.c_in * self.c_out * self.k * self.k) as u64;
        w + if self.bias.is_some() {
            self.c_out as u64
        } else {
            0
        }
    }

    /// Multiply-adds for one sample, counted at kernel placements (one per
    /// input position).
    pub fn flops(&self, h_in: usize, w_in: usize) -> u64 {
        (h_in * w_in * self.c_in * self.c_out * self.k * self.k) as u64
    }
}

fn output_pad_for(
    extent_in: usize,
    target: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let base = (extent_in - 1) * stride + k;
    let need = target + 2 * pad;
    if need < base || need - base >= stride {
        return Err(crate::error::Error::shape(
            "conv_transpose2d",
            format!("cannot reach target extent {target} from {extent_in} with k={k} stride={stride} pad={pad}"),
        ));
    }
    Ok(need - base)
}

pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.register(
            &wname,
            init::linear_weight(seed, &wname, d_out, d_in),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.register(
                &format!("{name}.bias"),
                Tensor::zeros(vec![d_out]),
                ParamKind::Weight,
            )?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }

    pub fn weight_scalars(&self) -> u64 {
        (self.d_out * self.d_in + if self.bias.is_some() { self.d_out } else { 0 }) as u64
    }

    pub fn flops(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.register(
            &format!("{name}.gamma"),
            Tensor::ones(vec![channels]),
            ParamKind::Weight,
        )?;
        let beta = store.register(
            &format!("{name}.beta"),
            Tensor::zeros(vec![channels]),
            ParamKind::Weight,
        )?;
        let running_mean = store.register(
            &format!("{name}.running_mean"),
            Tensor::zeros(vec![channels]),
            ParamKind::Buffer,
        )?;
        let running_var = store.register(
            &format!("{name}.running_var"),
            Tensor::ones(vec![channels]),
            ParamKind::Buffer,
        )?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Train mode standardizes by batch statistics and folds them into the
    /// running buffers; eval mode normalizes by the running statistics.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.tape.batchnorm2d(x, gamma, beta, None, self.eps)?;
                let (mean, var) = stats.expect("train mode returns batch stats");
                let m = T::from_f64(self.momentum);
                let keep = T::from_f64(1.0 - self.momentum);
                s.update_buffer(self.running_mean, |rm| {
                    for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                        *r = keep * *r + m * b;
                    }
                });
                s.update_buffer(self.running_var, |rv| {
                    for (r, &b) in rv.iter_mut().zip(var.iter()) {
                        *r = keep * *r + m * b;
                    }
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(self.running_mean).to_vec();
                let var = s.buffer(self.running_var).to_vec();
                let (y, _) = s
                    .tape
                    .batchnorm2d(x, gamma, beta, Some((&mean, &var)), self.eps)?;
                Ok(y)
            }
        }
    }

    pub fn weight_scalars(&self) -> u64 {
        2 * self.channels as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_layer_counts() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, 0, "c", 2, 4, 3, 1, 1, true).unwrap();
        // 2*4*9 + 4 bias
        assert_eq!(conv.weight_scalars(), 76);
        assert_eq!(store.num_weight_scalars(), 76);
    }

    #[test]
    fn smooth_conv_flops_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, 0, "s", 256, 256, 3, 1, 1, false).unwrap();
        assert_eq!(conv.flops(56, 56), 1_849_688_064);
    }

    #[test]
    fn bn_updates_running_statistics_only_in_train() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();

        let mut s = Session::new(&mut store, Mode::Eval);
        let xid = s.input(x.clone());
        bn.forward(&mut s, xid).unwrap();
        drop(s);
        assert_eq!(store.get(bn.running_mean).value.data(), &[0.0]);

        let mut s = Session::new(&mut store, Mode::Train);
        let xid = s.input(x);
        bn.forward(&mut s, xid).unwrap();
        drop(s);
        // running_mean = 0.9*0 + 0.1*2 = 0.2
        assert!((store.get(bn.running_mean).value.data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of [1,3] is 2 -> running_var = 0.9*1 + 0.1*2
        assert!((store.get(bn.running_var).value.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn transpose_targets_both_parities() {
        let mut store = ParamStore::<f64>::new();
        let deconv = ConvTranspose2d::new(&mut store, 0, "d", 2, 2, 3, 2, 1, false).unwrap();
        // even target: 4 -> 8 needs opad 1; odd target: 4 -> 7 needs opad 0
        for (h_in, target) in [(4usize, 8usize), (4, 7)] {
            let mut s = Session::new(&mut store, Mode::Eval);
            let x = s.input(Tensor::ones(vec![1, 2, h_in, h_in]));
            let y = deconv.forward_to(&mut s, x, target, target).unwrap();
            assert_eq!(s.tape.dims(y), &[1, 2, target, target]);
        }
    }
}
