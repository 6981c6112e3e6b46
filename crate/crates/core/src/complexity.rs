//! Closed-form parameter and multiply-add counting.
//!
//! This walk derives every count from the model spec alone, independently of
//! the registered parameter store; a test pins the two routes against each
//! other exactly. Conventions: multiply-adds for convolutions and fully
//! connected layers only (transposed convolutions counted at one kernel
//! placement per input position); batch-norm, pooling, resizing, and
//! elementwise work are excluded; batch-norm affine weights count as
//! parameters, running statistics do not.

use serde::Serialize;

use crate::attention::{AttentionConfig, ScaKind};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityRow {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityReport {
    pub arch: String,
    pub input: usize,
    pub total_params: u64,
    pub total_flops: u64,
    pub breakdown: Vec<ComplexityRow>,
}

impl ComplexityReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} input {}x{}\n",
            self.arch, self.input, self.input
        ));
        for row in &self.breakdown {
            out.push_str(&format!(
                "  {:<12} {:>12} params {:>16} mult-adds\n",
                row.module, row.params, row.flops
            ));
        }
        out.push_str(&format!(
            "  {:<12} {:>12} params {:>16} mult-adds\n",
            "total", self.total_params, self.total_flops
        ));
        out
    }
}

fn conv(
    params: &mut u64,
    flops: &mut u64,
    c_in: usize,
    c_out: usize,
    k: usize,
    out_extent: usize,
    bias: bool,
) {
    *params += (c_out * c_in * k * k + if bias { c_out } else { 0 }) as u64;
    *flops += (out_extent * out_extent * c_out * c_in * k * k) as u64;
}

fn bn(params: &mut u64, channels: usize) {
    *params += 2 * channels as u64;
}

/// Structural walk over a model spec at a square input extent.
pub fn complexity(spec: &ModelSpec, arch: &str, input: usize) -> Result<ComplexityReport> {
    spec.validate()?;
    let stride = spec.backbone.total_stride();
    if !input.is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "input extent {input} must be divisible by {stride}"
        )));
    }

    let mut rows = Vec::new();
    let width = spec.backbone.lateral_width;
    let levels = spec.backbone.levels();

    // backbone: stem conv + pool, then pre-act basic blocks with exit bn
    let (mut bb_params, mut bb_flops) = (0u64, 0u64);
    let stem = spec.backbone.stem_channels;
    conv(&mut bb_params, &mut bb_flops, 3, stem, 7, input / 2, false);
    let mut extent = input / 4; // after the stride-2 pool
    let mut c_in = stem;
    for (si, st) in spec.backbone.stages.iter().enumerate() {
        if si > 0 {
            extent /= 2;
        }
        for b in 0..st.blocks {
            let stride2 = b == 0 && si > 0;
            bn(&mut bb_params, c_in);
            conv(
                &mut bb_params,
                &mut bb_flops,
                c_in,
                st.width,
                3,
                extent,
                false,
            );
            bn(&mut bb_params, st.width);
            conv(
                &mut bb_params,
                &mut bb_flops,
                st.width,
                st.width,
                3,
                extent,
                false,
            );
            if stride2 || c_in != st.width {
                conv(
                    &mut bb_params,
                    &mut bb_flops,
                    c_in,
                    st.width,
                    1,
                    extent,
                    false,
                );
            }
            c_in = st.width;
        }
        bn(&mut bb_params, st.width);
    }
    rows.push(ComplexityRow {
        module: "backbone".into(),
        params: bb_params,
        flops: bb_flops,
    });

    let level_extent = |l: usize| spec.backbone.level_extent(input, l);

    let (mut lat_params, mut lat_flops) = (0u64, 0u64);
    for (l, st) in spec.backbone.stages.iter().enumerate() {
        conv(
            &mut lat_params,
            &mut lat_flops,
            st.width,
            width,
            1,
            level_extent(l),
            true,
        );
    }
    rows.push(ComplexityRow {
        module: "laterals".into(),
        params: lat_params,
        flops: lat_flops,
    });

    let (mut sm_params, mut sm_flops) = (0u64, 0u64);
    for l in 0..levels {
        let smoothed = l < levels - 1 || spec.smooth_top;
        if smoothed {
            conv(
                &mut sm_params,
                &mut sm_flops,
                width,
                width,
                3,
                level_extent(l),
                true,
            );
        }
    }
    rows.push(ComplexityRow {
        module: "smooths".into(),
        params: sm_params,
        flops: sm_flops,
    });

    let (mut att_params, mut att_flops) = (0u64, 0u64);
    for l in 0..levels - 1 {
        let (p, f) = attention_level_complexity(&spec.attention, width, level_extent(l));
        att_params += p;
        att_flops += f;
    }
    rows.push(ComplexityRow {
        module: "attention".into(),
        params: att_params,
        flops: att_flops,
    });

    let d_in = levels * width;
    let head_params = (d_in * spec.num_classes + spec.num_classes) as u64;
    let head_flops = (d_in * spec.num_classes) as u64;
    rows.push(ComplexityRow {
        module: "head".into(),
        params: head_params,
        flops: head_flops,
    });

    Ok(ComplexityReport {
        arch: arch.to_string(),
        input,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        breakdown: rows,
    })
}

/// Closed-form per-level attention cost at extent e.
pub fn attention_level_complexity(cfg: &AttentionConfig, c: usize, e: usize) -> (u64, u64) {
    let (mut params, mut flops) = (0u64, 0u64);
    let e2 = e.div_ceil(2);

    if cfg.variant.has_ca() {
        let hidden = (2 * c / cfg.t).max(1);
        params += (hidden * 2 * c + hidden) as u64; // fc1
        params += (2 * c * hidden + 2 * c) as u64; // fc2
        params += 4 * c as u64; // bn over 2C
        flops += 2 * (2 * c * hidden) as u64;
    }

    match cfg.variant.sca_kind() {
        Some(ScaKind::Alpha) => {
            params += (2 * 2 * 9 + 2) as u64; // down 3x3 stride 2
            params += 4; // refine 1x1, no bias
            params += 4; // bn over 2
            flops += (e2 * e2 * 2 * 2 * 9) as u64;
            flops += (e * e * 2 * 2) as u64;
        }
        Some(ScaKind::Theta) => {
            let cr = (c / cfg.r).max(1);
            params += 2 * (c * cr + cr) as u64; // two 1x1 squeezes
            params += (2 * (2 * cr) * 9 + 2) as u64; // down to 2 channels
            params += 4; // refine
            params += 4; // bn
            flops += 2 * (e * e * c * cr) as u64;
            flops += (e2 * e2 * 2 * (2 * cr) * 9) as u64;
            flops += (e * e * 2 * 2) as u64;
        }
        Some(ScaKind::ThetaPlus) => {
            let cr = (c / cfg.r).max(1);
            let mid = 2 * cr;
            params += 2 * (c * cr + cr) as u64;
            params += (mid * mid * 9 + mid) as u64; // down
            params += (mid * mid * 9 + mid) as u64; // transposed up
            params += (mid * 2) as u64; // proj 1x1, no bias
            params += 4; // bn
            flops += 2 * (e * e * c * cr) as u64;
            flops += (e2 * e2 * mid * mid * 9) as u64; // down at output extents
            flops += (e2 * e2 * mid * mid * 9) as u64; // up at input placements
            flops += (e * e * mid * 2) as u64;
        }
        None => {}
    }

    if cfg.variant.has_post() {
        params += 2 * (c * c + c) as u64;
        flops += 2 * (e * e * c * c) as u64;
    }

    (params, flops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::model::Apn;
    use crate::param::ParamStore;
    use crate::pyramid::BackboneSpec;

    fn spec(variant: AttentionVariant, t: usize, r: usize, backbone: BackboneSpec) -> ModelSpec {
        ModelSpec {
            backbone,
            attention: AttentionConfig::new(variant, t, r),
            num_classes: 98,
            smooth_top: false,
        }
    }

    #[test]
    fn walk_matches_registered_parameters_exactly() {
        for (variant, backbone) in [
            (AttentionVariant::None, BackboneSpec::resnet18()),
            (AttentionVariant::Ca, BackboneSpec::resnet18()),
            (AttentionVariant::ScaAlpha, BackboneSpec::resnet18()),
            (AttentionVariant::CscaAlpha, BackboneSpec::resnet18()),
            (AttentionVariant::CscaTheta, BackboneSpec::resnet18()),
            (AttentionVariant::CscaThetaPlus, BackboneSpec::resnet18()),
            (AttentionVariant::CscaAlpha, BackboneSpec::resnet34()),
            (AttentionVariant::CscaThetaPlus, BackboneSpec::toy()),
        ] {
            let spec = if backbone.lateral_width == 8 {
                ModelSpec {
                    num_classes: 8,
                    ..spec(variant, 2, 2, backbone)
                }
            } else {
                spec(variant, 16, 8, backbone)
            };
            let report = complexity(
                &spec,
                "test",
                if spec.backbone.lateral_width == 8 {
                    32
                } else {
                    224
                },
            )
            .unwrap();
            let mut store = ParamStore::<f32>::new();
            let model = Apn::build(&mut store, 0, &spec).unwrap();
            assert_eq!(
                report.total_params,
                store.num_weight_scalars(),
                "variant {:?}",
                variant
            );
            assert_eq!(report.total_params, model.weight_scalars());
        }
    }

    #[test]
    fn fpn18_reproduces_reference_complexity() {
        let report = complexity(
            &spec(AttentionVariant::None, 16, 8, BackboneSpec::resnet18()),
            "fpn18",
            224,
        )
        .unwrap();
        assert!((report.total_params as f64 - 13.3e6).abs() / 13.3e6 < 0.05);
        assert!((report.total_flops as f64 - 4.34e9).abs() / 4.34e9 < 0.05);
    }

    #[test]
    fn csca18_reproduces_reference_complexity() {
        let report = complexity(
            &spec(AttentionVariant::CscaAlpha, 16, 8, BackboneSpec::resnet18()),
            "apn-csca18",
            224,
        )
        .unwrap();
        assert!((report.total_params as f64 - 13.8e6).abs() / 13.8e6 < 0.05);
        assert!((report.total_flops as f64 - 4.88e9).abs() / 4.88e9 < 0.05);
    }

    #[test]
    fn attention_delta_is_the_closed_form_times_levels() {
        let base = spec(AttentionVariant::None, 16, 8, BackboneSpec::resnet18());
        let csca = spec(AttentionVariant::CscaAlpha, 16, 8, BackboneSpec::resnet18());
        let mut store_a = ParamStore::<f32>::new();
        Apn::build(&mut store_a, 0, &base).unwrap();
        let mut store_b = ParamStore::<f32>::new();
        Apn::build(&mut store_b, 0, &csca).unwrap();
        let per_level = attention_level_complexity(&csca.attention, 256, 56).0;
        assert_eq!(
            store_b.num_weight_scalars() - store_a.num_weight_scalars(),
            3 * per_level
        );
    }

    #[test]
    fn lone_smooth_conv_flops() {
        // closed-form check: 3x3 conv 256 -> 256 at 56x56
        let (mut p, mut f) = (0u64, 0u64);
        conv(&mut p, &mut f, 256, 256, 3, 56, false);
        assert_eq!(f, 1_849_688_064);
    }
}
