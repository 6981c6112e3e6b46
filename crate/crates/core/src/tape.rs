//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Tape`] is an arena of tensors plus one node per recorded operation.
//! Forward methods append nodes in topological order; [`Tape::backward`]
//! sweeps the nodes in reverse once, accumulating gradients into the `grad`
//! buffer of every tensor that requires one. Gradients are never zeroed
//! implicitly: a second backward call accumulates on top of the first, and
//! the caller clears leaf gradients explicitly between steps.

#![allow(clippy::needless_range_loop)] // kernel loops index parallel buffers

use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::norm::{self, BnSaved};
use crate::resize;
use crate::tensor::{broadcast_dims, conv_out_extent, Scalar, Tensor};

/// Per-channel (mean, unbiased variance) produced by a train-mode batch
/// normalization, for the caller's running-statistics update.
pub type BnBatchStats<T> = Option<(Vec<T>, Vec<T>)>;

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        /// Dims of the conv this op is the adjoint of: `x` lives on the
        /// output side, the result on the input side.
        dims: ConvDims,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    ChannelAvgPool {
        x: TensorId,
    },
    BilinearResize {
        x: TensorId,
    },
    ReplicatePad {
        x: TensorId,
        pad: usize,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: TensorId,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        saved: BnSaved<T>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: TensorId,
    },
}

struct Slot<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether the
    /// backward sweep delivers a gradient to it.
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    /// Gradient accumulated for `id`, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.slots[id.0].value.grad.as_deref()
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        self.slots[id.0].value.dims()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> TensorId {
        debug_assert!(
            value.all_finite(),
            "non-finite forward output at node {}",
            self.slots.len()
        );
        value.grad = None;
        self.slots.push(Slot { value, op });
        TensorId(self.slots.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.slots[id.0].value.requires_grad
    }

    fn derived(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.requires(id))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn broadcast_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        let out_dims = broadcast_dims(self.dims(a), self.dims(b), name)?;
        let av = &self.slots[a.0].value;
        let bv = &self.slots[b.0].value;
        let data = if av.dims() == bv.dims() {
            av.data()
                .iter()
                .zip(bv.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let numel: usize = out_dims.iter().product();
            let a_da = BroadcastIter::new(av.dims(), &out_dims);
            let b_da = BroadcastIter::new(bv.dims(), &out_dims);
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                data.push(f(av.data()[a_da.source(i)], bv.data()[b_da.source(i)]));
            }
            data
        };
        let mut out = Tensor::new(out_dims, data)?;
        out.requires_grad = self.derived(&[a, b]);
        Ok(self.push(out, op(a, b)))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = &self.slots[x.0].value;
        let mut out = v.map(|e| e.maximum(T::ZERO));
        out.requires_grad = self.requires(x);
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v = &self.slots[x.0].value;
        let mut out = v.map(|e| T::from_f64(1.0 / (1.0 + (-e.to_f64()).exp())));
        out.requires_grad = self.requires(x);
        self.push(out, Op::Sigmoid { x })
    }

    // ---- convolution family ---------------------------------------------

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::shape("conv2d", "input and weight must be rank 4"));
        }
        let (batch, c_in, h_in, w_in) = (xv.n(), xv.c(), xv.h(), xv.w());
        let (c_out, wc_in, k, k2) = (wv.dims()[0], wv.dims()[1], wv.dims()[2], wv.dims()[3]);
        if k != k2 {
            return Err(Error::shape("conv2d", "kernel must be square"));
        }
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wc_in} input channels, tensor has {c_in}"),
            ));
        }
        if let Some(b) = bias {
            if self.dims(b) != [c_out] {
                return Err(Error::shape("conv2d", "bias must be [C_out]"));
            }
        }
        let h_out = conv_out_extent(h_in, k, stride, pad)?;
        let w_out = conv_out_extent(w_in, k, stride, pad)?;
        let dims = ConvDims {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let mut out = vec![T::ZERO; batch * c_out * h_out * w_out];
        let bias_slice = bias.map(|b| self.value(b).data().to_vec());
        conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias_slice.as_deref(),
            &dims,
            &mut out,
        );
        let mut t = Tensor::new(vec![batch, c_out, h_out, w_out], out)?;
        let mut ids = vec![x, w];
        ids.extend(bias);
        t.requires_grad = self.derived(&ids);
        Ok(self.push(t, Op::Conv2d { x, w, bias, dims }))
    }

    /// Exact adjoint of `conv2d(_, w, stride, pad)`: maps a tensor shaped
    /// like that convolution's output back to its input shape. `output_pad`
    /// (per axis, < stride) resolves the output-extent ambiguity.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
        output_pad: (usize, usize),
    ) -> Result<TensorId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::shape(
                "conv_transpose2d",
                "input and weight must be rank 4",
            ));
        }
        let (batch, c_in, h_in, w_in) = (xv.n(), xv.c(), xv.h(), xv.w());
        let (wc_in, c_out, k, k2) = (wv.dims()[0], wv.dims()[1], wv.dims()[2], wv.dims()[3]);
        if k != k2 {
            return Err(Error::shape("conv_transpose2d", "kernel must be square"));
        }
        if wc_in != c_in {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight expects {wc_in} input channels, tensor has {c_in}"),
            ));
        }
        if output_pad.0 >= stride || output_pad.1 >= stride {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("output_pad {:?} must be < stride {stride}", output_pad),
            ));
        }
        let h_out = ((h_in - 1) * stride + k + output_pad.0)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "output extent underflow"))?;
        let w_out = ((w_in - 1) * stride + k + output_pad.1)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "output extent underflow"))?;
        // Sanity: the adjoint conv must map back to x's extents.
        if conv_out_extent(h_out, k, stride, pad)? != h_in
            || conv_out_extent(w_out, k, stride, pad)? != w_in
        {
            return Err(Error::shape(
                "conv_transpose2d",
                "output_pad inconsistent with stride/pad",
            ));
        }
        let dims = ConvDims {
            batch,
            c_in: c_out, // conv-side input channels
            h_in: h_out,
            w_in: w_out,
            c_out: c_in, // conv-side output channels
            k,
            stride,
            pad,
            h_out: h_in,
            w_out: w_in,
        };
        let mut out = vec![T::ZERO; batch * c_out * h_out * w_out];
        conv::conv2d_backward_input(self.value(x).data(), self.value(w).data(), &dims, &mut out);
        if let Some(b) = bias {
            if self.dims(b) != [c_out] {
                return Err(Error::shape("conv_transpose2d", "bias must be [C_out]"));
            }
            let bv = self.value(b).data().to_vec();
            let plane = h_out * w_out;
            for n in 0..batch {
                for co in 0..c_out {
                    let base = (n * c_out + co) * plane;
                    for v in &mut out[base..base + plane] {
                        *v += bv[co];
                    }
                }
            }
        }
        let mut t = Tensor::new(vec![batch, c_out, h_out, w_out], out)?;
        let mut ids = vec![x, w];
        ids.extend(bias);
        t.requires_grad = self.derived(&ids);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, bias, dims }))
    }

    pub fn max_pool2d(
        &mut self,
        x: TensorId,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("max_pool2d", "input must be rank 4"));
        }
        let (batch, channels, h_in, w_in) = (xv.n(), xv.c(), xv.h(), xv.w());
        if pad >= k {
            return Err(Error::shape("max_pool2d", "pad must be < kernel"));
        }
        let h_out = conv_out_extent(h_in, k, stride, pad)?;
        let w_out = conv_out_extent(w_in, k, stride, pad)?;
        let mut out = vec![T::ZERO; batch * channels * h_out * w_out];
        let mut argmax = vec![0usize; out.len()];
        conv::max_pool2d_forward(
            self.value(x).data(),
            batch,
            channels,
            h_in,
            w_in,
            k,
            stride,
            pad,
            h_out,
            w_out,
            &mut out,
            &mut argmax,
        );
        let mut t = Tensor::new(vec![batch, channels, h_out, w_out], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    // ---- pooling and resize ----------------------------------------------

    /// Spatial mean per channel: NCHW -> NC11.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("global_avg_pool", "input must be rank 4"));
        }
        let (batch, channels, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        let plane = h * w;
        let mut out = vec![T::ZERO; batch * channels];
        for nc in 0..batch * channels {
            let base = nc * plane;
            let mut acc = 0.0f64;
            for &v in &xv.data()[base..base + plane] {
                acc += v.to_f64();
            }
            out[nc] = T::from_f64(acc / plane as f64);
        }
        let mut t = Tensor::new(vec![batch, channels, 1, 1], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    /// Cross-channel mean per position: NCHW -> N1HW.
    pub fn channel_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("channel_avg_pool", "input must be rank 4"));
        }
        let (batch, channels, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        let plane = h * w;
        let mut out = vec![T::ZERO; batch * plane];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * plane;
                let out_base = n * plane;
                for i in 0..plane {
                    out[out_base + i] += xv.data()[base + i];
                }
            }
        }
        let inv = T::from_f64(1.0 / channels as f64);
        for v in &mut out {
            *v = *v * inv;
        }
        let mut t = Tensor::new(vec![batch, 1, h, w], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::ChannelAvgPool { x }))
    }

    pub fn bilinear_resize(
        &mut self,
        x: TensorId,
        target_h: usize,
        target_w: usize,
    ) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("bilinear_resize", "input must be rank 4"));
        }
        if target_h == 0 || target_w == 0 {
            return Err(Error::shape("bilinear_resize", "target dims must be >= 1"));
        }
        let (batch, channels, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        let mut out = vec![T::ZERO; batch * channels * target_h * target_w];
        resize::bilinear_forward(
            xv.data(),
            batch * channels,
            h,
            w,
            target_h,
            target_w,
            &mut out,
        );
        let mut t = Tensor::new(vec![batch, channels, target_h, target_w], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::BilinearResize { x }))
    }

    /// Edge-replicate padding: border values extend outward, so constants
    /// stay constant through a following convolution.
    pub fn replicate_pad2d(&mut self, x: TensorId, pad: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("replicate_pad2d", "input must be rank 4"));
        }
        if pad == 0 {
            return Err(Error::shape("replicate_pad2d", "pad must be >= 1"));
        }
        let (batch, channels, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::ZERO; batch * channels * hp * wp];
        for nc in 0..batch * channels {
            let src = &xv.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * hp * wp..(nc + 1) * hp * wp];
            for ph in 0..hp {
                let ih = ph.saturating_sub(pad).min(h - 1);
                for pw in 0..wp {
                    let iw = pw.saturating_sub(pad).min(w - 1);
                    dst[ph * wp + pw] = src[ih * w + iw];
                }
            }
        }
        let mut t = Tensor::new(vec![batch, channels, hp, wp], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::ReplicatePad { x, pad }))
    }

    // ---- shape ------------------------------------------------------------

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "needs at least one input"));
        }
        let first = self.dims(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let d = self.dims(id);
            if d.len() != first.len()
                || d.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "dims {:?} incompatible with {:?} along axis {axis}",
                        d, first
                    ),
                ));
            }
            axis_total += d[axis];
        }
        let mut out_dims = first.clone();
        out_dims[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_dims.iter().product();
        let mut data = vec![T::ZERO; numel];
        let mut offset = 0;
        for &id in inputs {
            let d_axis = self.dims(id)[axis];
            let src = self.value(id).data();
            for o in 0..outer {
                let src_base = o * d_axis * inner;
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + d_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + d_axis * inner]);
            }
            offset += d_axis;
        }
        let mut t = Tensor::new(out_dims, data)?;
        t.requires_grad = self.derived(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(Error::shape("slice", format!("axis {axis} out of range")));
        }
        if start + len > dims[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {start}+{len}) exceeds extent {}", dims[axis]),
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out_dims = dims.clone();
        out_dims[axis] = len;
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * dims[axis] + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let mut t = Tensor::new(out_dims, data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: TensorId, dims: Vec<usize>) -> Result<TensorId> {
        let xv = self.value(x);
        let mut t = Tensor::new(dims, xv.data().to_vec())?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Reshape { x }))
    }

    // ---- dense and loss ----------------------------------------------------

    /// `x: [N, D], w: [D_out, D], bias: [D_out] -> [N, D_out]`
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 2 || wv.rank() != 2 {
            return Err(Error::shape("linear", "input and weight must be rank 2"));
        }
        let (n, d) = (xv.dims()[0], xv.dims()[1]);
        let (d_out, wd) = (wv.dims()[0], wv.dims()[1]);
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!("weight expects {wd} features, input has {d}"),
            ));
        }
        if let Some(b) = bias {
            if self.dims(b) != [d_out] {
                return Err(Error::shape("linear", "bias must be [D_out]"));
            }
        }
        let bias_vec = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::ZERO; n * d_out];
        let xd = self.value(x).data();
        let wd_ = self.value(w).data();
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = bias_vec.as_ref().map_or(T::ZERO, |b| b[o]);
                let xrow = &xd[i * d..(i + 1) * d];
                let wrow = &wd_[o * d..(o + 1) * d];
                for (&xv_, &wv_) in xrow.iter().zip(wrow.iter()) {
                    acc += xv_ * wv_;
                }
                out[i * d_out + o] = acc;
            }
        }
        let mut t = Tensor::new(vec![n, d_out], out)?;
        let mut ids = vec![x, w];
        ids.extend(bias);
        t.requires_grad = self.derived(&ids);
        Ok(self.push(t, Op::Linear { x, w, bias }))
    }

    /// Batch normalization with caller-supplied statistics handling; see
    /// `nn::BatchNorm2d` for the layer that owns the running buffers.
    pub fn batchnorm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(TensorId, BnBatchStats<T>)> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("batchnorm2d", "input must be rank 4"));
        }
        let (batch, channels, h, w) = (xv.n(), xv.c(), xv.h(), xv.w());
        if self.dims(gamma) != [channels] || self.dims(beta) != [channels] {
            return Err(Error::shape("batchnorm2d", "gamma/beta must be [C]"));
        }
        let out = match running {
            None => norm::batchnorm_forward_train(
                xv.data(),
                self.value(gamma).data(),
                self.value(beta).data(),
                batch,
                channels,
                h * w,
                eps,
            )?,
            Some((mean, var)) => norm::batchnorm_forward_eval(
                xv.data(),
                self.value(gamma).data(),
                self.value(beta).data(),
                mean,
                var,
                batch,
                channels,
                h * w,
                eps,
            ),
        };
        let mut t = Tensor::new(vec![batch, channels, h, w], out.y)?;
        t.requires_grad = self.derived(&[x, gamma, beta]);
        let id = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: out.saved,
            },
        );
        Ok((id, out.batch_stats))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "logits must be [N, K]",
            ));
        }
        let (n, k) = (lv.dims()[0], lv.dims()[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = vec![T::ZERO; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let mut denom = 0.0f64;
            for &v in row {
                denom += (v.to_f64() - max).exp();
            }
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = T::from_f64(((v.to_f64() - max) - log_denom).exp());
            }
            loss -= (row[labels[i]].to_f64() - max) - log_denom;
        }
        let mut t = Tensor::scalar(T::from_f64(loss / n as f64));
        t.requires_grad = self.requires(logits);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Full reduction to a scalar; the gradient oracle's standard target.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let mut acc = 0.0f64;
        for &v in xv.data() {
            acc += v.to_f64();
        }
        let mut t = Tensor::scalar(T::from_f64(acc));
        t.requires_grad = self.requires(x);
        self.push(t, Op::Sum { x })
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every tensor with `requires_grad`
    /// reachable from `loss` receives (accumulates) its gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.dims(loss)),
            ));
        }
        // Seed and sweep into scratch buffers, then fold into tensor grads.
        let n = self.slots.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.slots[i].value.requires_grad {
                continue;
            }
            let g = grads[i].take().expect("present");
            self.accumulate_into_tensor(i, &g);
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate_into_tensor(&mut self, idx: usize, g: &[T]) {
        let slot = &mut self.slots[idx];
        match &mut slot.value.grad {
            Some(existing) => {
                for (e, &gv) in existing.iter_mut().zip(g.iter()) {
                    *e += gv;
                }
            }
            None => slot.value.grad = Some(g.to_vec()),
        }
    }

    fn add_grad(
        &self,
        grads: &mut [Option<Vec<T>>],
        id: TensorId,
        contribution: impl FnOnce(&mut Vec<T>),
    ) {
        if !self.requires(id) {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![T::ZERO; self.value(id).numel()]);
        contribution(buf);
    }

    fn propagate(&mut self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        // Ops are read immutably; split borrows via raw indexing on `slots`.
        let op = std::mem::replace(&mut self.slots[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                let out_dims = self.dims(TensorId(idx)).to_vec();
                for id in [*a, *b] {
                    let in_dims = self.dims(id).to_vec();
                    self.add_grad(grads, id, |buf| {
                        reduce_broadcast(g, &out_dims, buf, &in_dims, |gv, _| gv);
                    });
                }
            }

            Op::Mul { a, b } => {
                let out_dims = self.dims(TensorId(idx)).to_vec();
                let (a, b) = (*a, *b);
                let b_iter = BroadcastIter::new(self.dims(b), &out_dims);
                let b_data: Vec<T> = self.value(b).data().to_vec();
                self.add_grad(grads, a, |buf| {
                    let in_dims = self.dims(a).to_vec();
                    reduce_broadcast(g, &out_dims, buf, &in_dims, |gv, i| {
                        gv * b_data[b_iter.source(i)]
                    });
                });
                let a_iter = BroadcastIter::new(self.dims(a), &out_dims);
                let a_data: Vec<T> = self.value(a).data().to_vec();
                self.add_grad(grads, b, |buf| {
                    let in_dims = self.dims(b).to_vec();
                    reduce_broadcast(g, &out_dims, buf, &in_dims, |gv, i| {
                        gv * a_data[a_iter.source(i)]
                    });
                });
            }

            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let mask: Vec<T> = xd
                    .iter()
                    .map(|&v| if v > T::ZERO { T::ONE } else { T::ZERO })
                    .collect();
                self.add_grad(grads, *x, |buf| {
                    for ((b, &gv), &m) in buf.iter_mut().zip(g.iter()).zip(mask.iter()) {
                        *b += gv * m;
                    }
                });
            }

            Op::Sigmoid { x } => {
                let yd: Vec<T> = self.slots[idx].value.data().to_vec();
                self.add_grad(grads, *x, |buf| {
                    for ((b, &gv), &y) in buf.iter_mut().zip(g.iter()).zip(yd.iter()) {
                        *b += gv * y * (T::ONE - y);
                    }
                });
            }

            Op::Conv2d { x, w, bias, dims } => {
                if self.requires(*x) {
                    let mut dx = vec![T::ZERO; self.value(*x).numel()];
                    conv::conv2d_backward_input(g, self.value(*w).data(), dims, &mut dx);
                    self.add_grad(grads, *x, |buf| {
                        for (b, &v) in buf.iter_mut().zip(dx.iter()) {
                            *b += v;
                        }
                    });
                }
                if self.requires(*w) {
                    let mut dw = vec![T::ZERO; self.value(*w).numel()];
                    conv::conv2d_backward_weight(self.value(*x).data(), g, dims, &mut dw);
                    self.add_grad(grads, *w, |buf| {
                        for (b, &v) in buf.iter_mut().zip(dw.iter()) {
                            *b += v;
                        }
                    });
                }
                if let Some(bid) = bias {
                    if self.requires(*bid) {
                        let mut db = vec![T::ZERO; dims.c_out];
                        conv::conv2d_backward_bias(g, dims, &mut db);
                        self.add_grad(grads, *bid, |buf| {
                            for (b, &v) in buf.iter_mut().zip(db.iter()) {
                                *b += v;
                            }
                        });
                    }
                }
            }

            Op::ConvTranspose2d { x, w, bias, dims } => {
                // forward was A^T x; gradient wrt x is A g (a plain conv)
                if self.requires(*x) {
                    let mut dx = vec![T::ZERO; self.value(*x).numel()];
                    conv::conv2d_forward(g, self.value(*w).data(), None, dims, &mut dx);
                    self.add_grad(grads, *x, |buf| {
                        for (b, &v) in buf.iter_mut().zip(dx.iter()) {
                            *b += v;
                        }
                    });
                }
                if self.requires(*w) {
                    let mut dw = vec![T::ZERO; self.value(*w).numel()];
                    conv::conv2d_backward_weight(g, self.value(*x).data(), dims, &mut dw);
                    self.add_grad(grads, *w, |buf| {
                        for (b, &v) in buf.iter_mut().zip(dw.iter()) {
                            *b += v;
                        }
                    });
                }
                if let Some(bid) = bias {
                    if self.requires(*bid) {
                        // bias added on the transpose-output side
                        let c_out = self.value(*bid).numel();
                        let plane = dims.h_in * dims.w_in;
                        let mut db = vec![T::ZERO; c_out];
                        for n in 0..dims.batch {
                            for co in 0..c_out {
                                let base = (n * c_out + co) * plane;
                                let mut acc = T::ZERO;
                                for &gv in &g[base..base + plane] {
                                    acc += gv;
                                }
                                db[co] += acc;
                            }
                        }
                        self.add_grad(grads, *bid, |buf| {
                            for (b, &v) in buf.iter_mut().zip(db.iter()) {
                                *b += v;
                            }
                        });
                    }
                }
            }

            Op::MaxPool { x, argmax } => {
                self.add_grad(grads, *x, |buf| {
                    for (&src, &gv) in argmax.iter().zip(g.iter()) {
                        buf[src] += gv;
                    }
                });
            }

            Op::GlobalAvgPool { x } => {
                let d = self.dims(*x).to_vec();
                let plane = d[2] * d[3];
                let inv = T::from_f64(1.0 / plane as f64);
                self.add_grad(grads, *x, |buf| {
                    for nc in 0..d[0] * d[1] {
                        let gv = g[nc] * inv;
                        for b in &mut buf[nc * plane..(nc + 1) * plane] {
                            *b += gv;
                        }
                    }
                });
            }

            Op::ChannelAvgPool { x } => {
                let d = self.dims(*x).to_vec();
                let (channels, plane) = (d[1], d[2] * d[3]);
                let inv = T::from_f64(1.0 / channels as f64);
                self.add_grad(grads, *x, |buf| {
                    for n in 0..d[0] {
                        for c in 0..channels {
                            let base = (n * channels + c) * plane;
                            let g_base = n * plane;
                            for i in 0..plane {
                                buf[base + i] += g[g_base + i] * inv;
                            }
                        }
                    }
                });
            }

            Op::BilinearResize { x } => {
                let d_in = self.dims(*x).to_vec();
                let d_out = self.dims(TensorId(idx)).to_vec();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                resize::bilinear_backward(
                    g,
                    d_in[0] * d_in[1],
                    d_in[2],
                    d_in[3],
                    d_out[2],
                    d_out[3],
                    &mut dx,
                );
                self.add_grad(grads, *x, |buf| {
                    for (b, &v) in buf.iter_mut().zip(dx.iter()) {
                        *b += v;
                    }
                });
            }

            Op::ReplicatePad { x, pad } => {
                let d = self.dims(*x).to_vec();
                let (h, w) = (d[2], d[3]);
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let pad = *pad;
                self.add_grad(grads, *x, |buf| {
                    for nc in 0..d[0] * d[1] {
                        let gp = &g[nc * hp * wp..(nc + 1) * hp * wp];
                        let bp = &mut buf[nc * h * w..(nc + 1) * h * w];
                        for ph in 0..hp {
                            let ih = ph.saturating_sub(pad).min(h - 1);
                            for pw in 0..wp {
                                let iw = pw.saturating_sub(pad).min(w - 1);
                                bp[ih * w + iw] += gp[ph * wp + pw];
                            }
                        }
                    }
                });
            }

            Op::Concat { inputs, axis } => {
                let out_dims = self.dims(TensorId(idx)).to_vec();
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[*axis + 1..].iter().product();
                let total = out_dims[*axis];
                let mut offset = 0;
                for &id in inputs {
                    let d_axis = self.dims(id)[*axis];
                    let off = offset;
                    self.add_grad(grads, id, |buf| {
                        for o in 0..outer {
                            let g_base = (o * total + off) * inner;
                            let b_base = o * d_axis * inner;
                            for i in 0..d_axis * inner {
                                buf[b_base + i] += g[g_base + i];
                            }
                        }
                    });
                    offset += d_axis;
                }
            }

            Op::Slice { x, axis, start } => {
                let in_dims = self.dims(*x).to_vec();
                let out_dims = self.dims(TensorId(idx)).to_vec();
                let outer: usize = in_dims[..*axis].iter().product();
                let inner: usize = in_dims[*axis + 1..].iter().product();
                let len = out_dims[*axis];
                self.add_grad(grads, *x, |buf| {
                    for o in 0..outer {
                        let b_base = (o * in_dims[*axis] + start) * inner;
                        let g_base = o * len * inner;
                        for i in 0..len * inner {
                            buf[b_base + i] += g[g_base + i];
                        }
                    }
                });
            }

            Op::Reshape { x } => {
                self.add_grad(grads, *x, |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g.iter()) {
                        *b += gv;
                    }
                });
            }

            Op::Linear { x, w, bias } => {
                let xd = self.value(*x).data().to_vec();
                let wd = self.value(*w).data().to_vec();
                let (n, d) = (self.dims(*x)[0], self.dims(*x)[1]);
                let d_out = self.dims(*w)[0];
                if self.requires(*x) {
                    self.add_grad(grads, *x, |buf| {
                        for i in 0..n {
                            for o in 0..d_out {
                                let gv = g[i * d_out + o];
                                let wrow = &wd[o * d..(o + 1) * d];
                                let brow = &mut buf[i * d..(i + 1) * d];
                                for (b, &wv) in brow.iter_mut().zip(wrow.iter()) {
                                    *b += gv * wv;
                                }
                            }
                        }
                    });
                }
                if self.requires(*w) {
                    self.add_grad(grads, *w, |buf| {
                        for i in 0..n {
                            for o in 0..d_out {
                                let gv = g[i * d_out + o];
                                let xrow = &xd[i * d..(i + 1) * d];
                                let brow = &mut buf[o * d..(o + 1) * d];
                                for (b, &xv) in brow.iter_mut().zip(xrow.iter()) {
                                    *b += gv * xv;
                                }
                            }
                        }
                    });
                }
                if let Some(bid) = bias {
                    self.add_grad(grads, *bid, |buf| {
                        for i in 0..n {
                            for o in 0..d_out {
                                buf[o] += g[i * d_out + o];
                            }
                        }
                    });
                }
            }

            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let d = self.dims(*x).to_vec();
                let (batch, channels, plane) = (d[0], d[1], d[2] * d[3]);
                let out = norm::batchnorm_backward(
                    g,
                    self.value(*gamma).data(),
                    saved,
                    batch,
                    channels,
                    plane,
                );
                if self.requires(*x) {
                    self.add_grad(grads, *x, |buf| {
                        for (b, &v) in buf.iter_mut().zip(out.dx.iter()) {
                            *b += v;
                        }
                    });
                }
                self.add_grad(grads, *gamma, |buf| {
                    for (b, &v) in buf.iter_mut().zip(out.dgamma.iter()) {
                        *b += v;
                    }
                });
                self.add_grad(grads, *beta, |buf| {
                    for (b, &v) in buf.iter_mut().zip(out.dbeta.iter()) {
                        *b += v;
                    }
                });
            }

            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = self.dims(*logits)[1];
                let scale = g[0].to_f64() / n as f64;
                self.add_grad(grads, *logits, |buf| {
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            buf[i * k + j] +=
                                T::from_f64((probs[i * k + j].to_f64() - onehot) * scale);
                        }
                    }
                });
            }

            Op::Sum { x } => {
                let gv = g[0];
                self.add_grad(grads, *x, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }
        }
        self.slots[idx].op = op;
        Ok(())
    }
}

/// Maps flat indices of a broadcast output to flat indices of a source
/// tensor whose axes are either equal or 1.
struct BroadcastIter {
    out_dims: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastIter {
    fn new(src_dims: &[usize], out_dims: &[usize]) -> Self {
        let mut strides = vec![0usize; src_dims.len()];
        let mut acc = 1;
        for i in (0..src_dims.len()).rev() {
            strides[i] = if src_dims[i] == 1 { 0 } else { acc };
            acc *= src_dims[i];
        }
        BroadcastIter {
            out_dims: out_dims.to_vec(),
            src_strides: strides,
        }
    }

    #[inline]
    fn source(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for i in (0..self.out_dims.len()).rev() {
            let coord = flat % self.out_dims[i];
            flat /= self.out_dims[i];
            idx += coord * self.src_strides[i];
        }
        idx
    }
}

/// Accumulate `f(g[i], i)` into the (possibly broadcast) source gradient,
/// summing over axes the source broadcast along.
fn reduce_broadcast<T: Scalar>(
    g: &[T],
    out_dims: &[usize],
    buf: &mut [T],
    in_dims: &[usize],
    f: impl Fn(T, usize) -> T,
) {
    if out_dims == in_dims {
        for (i, (b, &gv)) in buf.iter_mut().zip(g.iter()).enumerate() {
            *b += f(gv, i);
        }
    } else {
        let iter = BroadcastIter::new(in_dims, out_dims);
        for (i, &gv) in g.iter().enumerate() {
            buf[iter.source(i)] += f(gv, i);
        }
    }
}
