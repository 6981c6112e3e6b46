//! Bilinear resize with half-pixel centers.
//!
//! Source coordinate for output index d: s = (d + 0.5) * (in/out) - 0.5,
//! clamped to [0, in-1]. Weights along each axis sum to one, so constants map
//! to constants exactly and the operator is linear; the backward pass is its
//! transpose (scatter-add with the same weights).

use crate::tensor::Scalar;

/// Per-axis interpolation taps: (low index, high index, high-side weight).
fn axis_taps(extent_in: usize, extent_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = extent_in as f64 / extent_out as f64;
    (0..extent_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(extent_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [T],
) {
    let rows = axis_taps(h_in, h_out);
    let cols = axis_taps(w_in, w_out);
    for p in 0..planes {
        let in_base = p * h_in * w_in;
        let out_base = p * h_out * w_out;
        for (oh, &(r0, r1, fr)) in rows.iter().enumerate() {
            let row0 = in_base + r0 * w_in;
            let row1 = in_base + r1 * w_in;
            let out_row = out_base + oh * w_out;
            for (ow, &(c0, c1, fc)) in cols.iter().enumerate() {
                let v00 = x[row0 + c0].to_f64();
                let v01 = x[row0 + c1].to_f64();
                let v10 = x[row1 + c0].to_f64();
                let v11 = x[row1 + c1].to_f64();
                let top = v00 + (v01 - v00) * fc;
                let bot = v10 + (v11 - v10) * fc;
                out[out_row + ow] = T::from_f64(top + (bot - top) * fr);
            }
        }
    }
}

/// Transpose of [`bilinear_forward`]: scatter each output gradient back to
/// its four taps with the same weights.
pub fn bilinear_backward<T: Scalar>(
    g: &[T],
    planes: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [T],
) {
    let rows = axis_taps(h_in, h_out);
    let cols = axis_taps(w_in, w_out);
    dx.fill(T::ZERO);
    for p in 0..planes {
        let in_base = p * h_in * w_in;
        let out_base = p * h_out * w_out;
        for (oh, &(r0, r1, fr)) in rows.iter().enumerate() {
            let out_row = out_base + oh * w_out;
            for (ow, &(c0, c1, fc)) in cols.iter().enumerate() {
                let gv = g[out_row + ow].to_f64();
                let add = |dx: &mut [T], idx: usize, v: f64| {
                    dx[idx] = T::from_f64(dx[idx].to_f64() + v);
                };
                add(dx, in_base + r0 * w_in + c0, gv * (1.0 - fr) * (1.0 - fc));
                add(dx, in_base + r0 * w_in + c1, gv * (1.0 - fr) * fc);
                add(dx, in_base + r1 * w_in + c0, gv * fr * (1.0 - fc));
                add(dx, in_base + r1 * w_in + c1, gv * fr * fc);
            }
        }
    }
}
