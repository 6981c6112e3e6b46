//! Direct convolution, transposed convolution, and max-pool kernels.
//!
//! These operate on flat NCHW buffers plus explicit dims so the tape's
//! backward sweep can reuse them: the transposed convolution forward is the
//! same kernel as the convolution input-gradient, and its gradients are a
//! convolution forward and a weight-gradient with the roles of input and
//! output swapped.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    fn in_plane(&self) -> usize {
        self.h_in * self.w_in
    }
    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Range of output positions `o` with `0 <= o*stride + k_off - pad < extent`.
#[inline]
fn out_range(
    extent_in: usize,
    extent_out: usize,
    stride: usize,
    pad: usize,
    k_off: usize,
) -> (usize, usize) {
    // smallest o with o*stride >= pad - k_off
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k_off - pad <= extent_in - 1
    let hi_excl = if extent_in + pad > k_off {
        (((extent_in + pad - k_off - 1) / stride) + 1).min(extent_out)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// `y[n,co,oh,ow] = bias[co] + sum_{ci,kh,kw} x[n,ci,oh*s+kh-p, ow*s+kw-p] * w[co,ci,kh,kw]`
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), d.batch * d.c_out * d.out_plane());
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (n * d.c_out + co) * d.out_plane();
            let init = bias.map_or(T::ZERO, |b| b[co]);
            out[out_base..out_base + d.out_plane()].fill(init);
            for ci in 0..d.c_in {
                let in_base = (n * d.c_in + ci) * d.in_plane();
                let w_base = (co * d.c_in + ci) * d.k * d.k;
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = out_range(d.h_in, d.h_out, d.stride, d.pad, kh);
                    for kw in 0..d.k {
                        let w = weight[w_base + kh * d.k + kw];
                        let (ow_lo, ow_hi) = out_range(d.w_in, d.w_out, d.stride, d.pad, kw);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.pad;
                            let in_row = in_base + ih * d.w_in;
                            let out_row = out_base + oh * d.w_out;
                            if d.stride == 1 {
                                let iw0 = ow_lo + kw - d.pad;
                                let xs = &x[in_row + iw0..in_row + iw0 + (ow_hi - ow_lo)];
                                let os = &mut out[out_row + ow_lo..out_row + ow_hi];
                                for (o, &xv) in os.iter_mut().zip(xs.iter()) {
                                    *o += w * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.pad;
                                    out[out_row + ow] += w * x[in_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dx[n,ci,ih,iw] = sum_{co,kh,kw} g[n,co,oh,ow] * w[co,ci,kh,kw]` over valid (oh, ow).
///
/// This is also the forward pass of the transposed convolution: with `g` as
/// its input and the output extents chosen by the caller, the result is the
/// exact adjoint of [`conv2d_forward`] as a linear map.
pub fn conv2d_backward_input<T: Scalar>(g: &[T], weight: &[T], d: &ConvDims, dx: &mut [T]) {
    debug_assert_eq!(dx.len(), d.batch * d.c_in * d.in_plane());
    dx.fill(T::ZERO);
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g_base = (n * d.c_out + co) * d.out_plane();
            for ci in 0..d.c_in {
                let dx_base = (n * d.c_in + ci) * d.in_plane();
                let w_base = (co * d.c_in + ci) * d.k * d.k;
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = out_range(d.h_in, d.h_out, d.stride, d.pad, kh);
                    for kw in 0..d.k {
                        let w = weight[w_base + kh * d.k + kw];
                        let (ow_lo, ow_hi) = out_range(d.w_in, d.w_out, d.stride, d.pad, kw);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.pad;
                            let dx_row = dx_base + ih * d.w_in;
                            let g_row = g_base + oh * d.w_out;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * d.stride + kw - d.pad;
                                dx[dx_row + iw] += w * g[g_row + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dw[co,ci,kh,kw] = sum_{n,oh,ow} g[n,co,oh,ow] * x[n,ci,oh*s+kh-p, ow*s+kw-p]`
pub fn conv2d_backward_weight<T: Scalar>(x: &[T], g: &[T], d: &ConvDims, dw: &mut [T]) {
    debug_assert_eq!(dw.len(), d.c_out * d.c_in * d.k * d.k);
    dw.fill(T::ZERO);
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g_base = (n * d.c_out + co) * d.out_plane();
            for ci in 0..d.c_in {
                let in_base = (n * d.c_in + ci) * d.in_plane();
                let w_base = (co * d.c_in + ci) * d.k * d.k;
                for kh in 0..d.k {
                    let (oh_lo, oh_hi) = out_range(d.h_in, d.h_out, d.stride, d.pad, kh);
                    for kw in 0..d.k {
                        let (ow_lo, ow_hi) = out_range(d.w_in, d.w_out, d.stride, d.pad, kw);
                        let mut acc = T::ZERO;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.pad;
                            let in_row = in_base + ih * d.w_in;
                            let g_row = g_base + oh * d.w_out;
                            if d.stride == 1 {
                                let iw0 = ow_lo + kw - d.pad;
                                let xs = &x[in_row + iw0..in_row + iw0 + (ow_hi - ow_lo)];
                                let gs = &g[g_row + ow_lo..g_row + ow_hi];
                                for (&gv, &xv) in gs.iter().zip(xs.iter()) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * d.stride + kw - d.pad;
                                    acc += g[g_row + ow] * x[in_row + iw];
                                }
                            }
                        }
                        dw[w_base + kh * d.k + kw] += acc;
                    }
                }
            }
        }
    }
}

/// `db[co] = sum_{n,oh,ow} g[n,co,oh,ow]`
#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward_bias<T: Scalar>(g: &[T], d: &ConvDims, db: &mut [T]) {
    debug_assert_eq!(db.len(), d.c_out);
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g_base = (n * d.c_out + co) * d.out_plane();
            let mut acc = T::ZERO;
            for &gv in &g[g_base..g_base + d.out_plane()] {
                acc += gv;
            }
            db[co] += acc;
        }
    }
}

/// Max pooling with zero padding; ties resolve to the first index scanned,
/// padding never wins. Returns per-output flat argmax indices for backward.
#[allow(clippy::too_many_arguments)]
pub fn max_pool2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    h_in: usize,
    w_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let in_plane = h_in * w_in;
    let out_plane = h_out * w_out;
    for nc in 0..batch * channels {
        let in_base = nc * in_plane;
        let out_base = nc * out_plane;
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut best: Option<(T, usize)> = None;
                for kh in 0..k {
                    let ih = oh * stride + kh;
                    if ih < pad || ih >= h_in + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for kw in 0..k {
                        let iw = ow * stride + kw;
                        if iw < pad || iw >= w_in + pad {
                            continue;
                        }
                        let iw = iw - pad;
                        let idx = in_base + ih * w_in + iw;
                        let v = x[idx];
                        match best {
                            None => best = Some((v, idx)),
                            Some((bv, _)) if v > bv => best = Some((v, idx)),
                            _ => {}
                        }
                    }
                }
                let (v, idx) = best.expect("pool window overlaps input");
                out[out_base + oh * w_out + ow] = v;
                argmax[out_base + oh * w_out + ow] = idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvDims {
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        ConvDims {
            batch,
            c_in,
            h_in: h,
            w_in: w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    /// Direct-summation convolution oracle: literal loop over the definition,
    /// no range precomputation. Kept independent of the production kernel.
    fn conv_oracle(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.c_out * d.h_out * d.w_out];
        for n in 0..d.batch {
            for co in 0..d.c_out {
                for oh in 0..d.h_out {
                    for ow in 0..d.w_out {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for kh in 0..d.k {
                                for kw in 0..d.k {
                                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                    let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < d.h_in
                                        && (iw as usize) < d.w_in
                                    {
                                        let xi = ((n * d.c_in + ci) * d.h_in + ih as usize)
                                            * d.w_in
                                            + iw as usize;
                                        let wi = ((co * d.c_in + ci) * d.k + kh) * d.k + kw;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((n * d.c_out + co) * d.h_out + oh) * d.w_out + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let d = dims(1, 1, 3, 3, 1, 1, 1, 0);
        let x: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d_forward(&x, &[1.0], None, &d, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn all_ones_3x3_padded_counts_window_overlap() {
        // center 9, edges 6, corners 4
        let d = dims(1, 1, 3, 3, 1, 3, 1, 1);
        let x = vec![1.0f64; 9];
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0; 9];
        conv2d_forward(&x, &w, None, &d, &mut out);
        assert_eq!(out, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn forward_matches_direct_summation_oracle() {
        let mut rng = crate::rng::Rng::new(5);
        for (stride, pad, k) in [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 3, 7)] {
            let d = dims(2, 3, 9, 8, 4, k, stride, pad);
            let x: Vec<f64> = (0..2 * 3 * 9 * 8).map(|_| rng.next_normal()).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|_| rng.next_normal()).collect();
            let mut out = vec![0.0; 2 * 4 * d.h_out * d.w_out];
            conv2d_forward(&x, &w, None, &d, &mut out);
            let expect = conv_oracle(&x, &w, &d);
            for (a, b) in out.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn bias_adds_per_channel_constant() {
        let d = dims(1, 1, 2, 2, 2, 1, 1, 0);
        let x = vec![0.0f64; 4];
        let w = vec![1.0, 1.0];
        let mut out = vec![0.0; 8];
        conv2d_forward(&x, &w, Some(&[5.0, -2.0]), &d, &mut out);
        assert_eq!(&out[..4], &[5.0; 4]);
        assert_eq!(&out[4..], &[-2.0; 4]);
    }

    /// Inner-product oracle: <conv(x), y> must equal <x, convT(y)> exactly
    /// up to float error, for any stride/pad combination.
    #[test]
    fn adjoint_identity_on_random_inputs() {
        let mut rng = crate::rng::Rng::new(17);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 2, 5)] {
            let d = dims(2, 2, 4, 4, 3, k, stride, pad);
            let x: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.next_normal()).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.next_normal()).collect();
            let y: Vec<f64> = (0..2 * 3 * d.h_out * d.w_out)
                .map(|_| rng.next_normal())
                .collect();

            let mut cx = vec![0.0; y.len()];
            conv2d_forward(&x, &w, None, &d, &mut cx);
            let mut cty = vec![0.0; x.len()];
            conv2d_backward_input(&y, &w, &d, &mut cty);

            let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(cty.iter()).map(|(a, b)| a * b).sum();
            let denom = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-10,
                "adjoint identity failed: {lhs} vs {rhs} (stride {stride} pad {pad} k {k})"
            );
        }
    }

    #[test]
    fn weight_gradient_matches_oracle_via_directional_probe() {
        // d/deps <conv(x; w + eps*e), g> = <conv(x; e), g> for linear maps;
        // check conv2d_backward_weight against that inner product exactly.
        let mut rng = crate::rng::Rng::new(23);
        let d = dims(1, 2, 5, 5, 2, 3, 2, 1);
        let x: Vec<f64> = (0..2 * 25).map(|_| rng.next_normal()).collect();
        let g: Vec<f64> = (0..2 * d.h_out * d.w_out)
            .map(|_| rng.next_normal())
            .collect();
        let mut dw = vec![0.0; 2 * 2 * 9];
        conv2d_backward_weight(&x, &g, &d, &mut dw);
        for probe in 0..dw.len() {
            let mut e = vec![0.0; dw.len()];
            e[probe] = 1.0;
            let mut ce = vec![0.0; g.len()];
            conv2d_forward(&x, &e, None, &d, &mut ce);
            let expect: f64 = ce.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            assert!((dw[probe] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn max_pool_basic_and_argmax() {
        // 1x1x4x4, k=3 s=2 p=1 -> 2x2
        let x: Vec<f64> = (1..=16).map(|i| i as f64).collect();
        let mut out = vec![0.0; 4];
        let mut arg = vec![0usize; 4];
        max_pool2d_forward(&x, 1, 1, 4, 4, 3, 2, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out, vec![6.0, 8.0, 14.0, 16.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }
}
