//! Bottom-up backbone with lateral connections and the top-down pathway.
//!
//! The backbone is a pre-activation residual network: a 7x7 stride-2 stem,
//! a 3x3 stride-2 max pool, then stages of BN-ReLU-conv basic blocks whose
//! first block halves the spatial extents from the second stage on. Each
//! stage's output passes a BN-ReLU exit before feeding its lateral 1x1
//! projection, so every pyramid tap sees normalized activations.
//!
//! The top-down pathway upsamples the coarser level by a factor of two
//! (bilinear), merges with the lateral by element-wise addition, and smooths
//! the merge with a 3x3 convolution. The top level has no top-down input and
//! by default no smooth; both follow the baseline fusion this module
//! provides, which the attention modules later replace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::param::{ParamStore, Session};
use crate::tape::TensorId;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    #[serde(default)]
    pub bottleneck: bool,
}

impl StageSpec {
    pub fn basic(blocks: usize, width: usize) -> Self {
        StageSpec {
            blocks,
            width,
            bottleneck: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Stem: 7x7 convolution, stride 2, then 3x3 max pool, stride 2.
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Common pyramid width C of the lateral projections.
    #[serde(default = "default_lateral")]
    pub lateral_width: usize,
}

fn default_stem() -> usize {
    64
}
fn default_lateral() -> usize {
    256
}

impl BackboneSpec {
    pub fn resnet18() -> Self {
        BackboneSpec {
            stem_channels: 64,
            stages: vec![
                StageSpec::basic(2, 64),
                StageSpec::basic(2, 128),
                StageSpec::basic(2, 256),
                StageSpec::basic(2, 512),
            ],
            lateral_width: 256,
        }
    }

    pub fn resnet34() -> Self {
        BackboneSpec {
            stem_channels: 64,
            stages: vec![
                StageSpec::basic(3, 64),
                StageSpec::basic(4, 128),
                StageSpec::basic(6, 256),
                StageSpec::basic(3, 512),
            ],
            lateral_width: 256,
        }
    }

    /// Two-level desk-scale variant for 32x32 inputs.
    pub fn toy() -> Self {
        BackboneSpec {
            stem_channels: 8,
            stages: vec![StageSpec::basic(1, 8), StageSpec::basic(1, 16)],
            lateral_width: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::Config("backbone needs at least 2 stages".into()));
        }
        if self.lateral_width == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.width == 0) {
            return Err(Error::Config(
                "stage blocks and widths must be positive".into(),
            ));
        }
        if self.stages.iter().any(|s| s.bottleneck) {
            return Err(Error::Config(
                "bottleneck stages are accepted by the schema but not built; use basic blocks"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Overall downsampling factor from input to the last stage.
    pub fn total_stride(&self) -> usize {
        1 << (self.levels() + 1)
    }

    /// Spatial extent of level `l` (0-based) for a square input.
    pub fn level_extent(&self, input: usize, level: usize) -> usize {
        input >> (level + 2)
    }
}

/// Pre-activation basic block: BN-ReLU-conv3x3(s) -> BN-ReLU-conv3x3, plus a
/// 1x1 projection shortcut (taken from the first pre-activation) when the
/// extents or widths change.
pub struct PreActBlock {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl PreActBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), c_in)?;
        let conv1 = Conv2d::new(
            store,
            seed,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            stride,
            1,
            false,
        )?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), c_out)?;
        let conv2 = Conv2d::new(
            store,
            seed,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            1,
            1,
            false,
        )?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(
                store,
                seed,
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                1,
                stride,
                0,
                false,
            )?)
        } else {
            None
        };
        Ok(PreActBlock {
            bn1,
            conv1,
            bn2,
            conv2,
            shortcut,
        })
    }

    fn forward<T: Scalar>(&self, s: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let pre = self.bn1.forward(s, x)?;
        let pre = s.tape.relu(pre);
        let short = match &self.shortcut {
            Some(proj) => proj.forward(s, pre)?,
            None => x,
        };
        let out = self.conv1.forward(s, pre)?;
        let out = self.bn2.forward(s, out)?;
        let out = s.tape.relu(out);
        let out = self.conv2.forward(s, out)?;
        s.tape.add(out, short)
    }

    fn weight_scalars(&self) -> u64 {
        self.bn1.weight_scalars()
            + self.conv1.weight_scalars()
            + self.bn2.weight_scalars()
            + self.conv2.weight_scalars()
            + self.shortcut.as_ref().map_or(0, Conv2d::weight_scalars)
    }
}

struct Stage {
    blocks: Vec<PreActBlock>,
    exit_bn: BatchNorm2d,
}

pub struct Backbone {
    pub spec: BackboneSpec,
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        spec: &BackboneSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::new(
            store,
            seed,
            "backbone.stem.conv",
            3,
            spec.stem_channels,
            7,
            2,
            3,
            false,
        )?;
        let mut stages = Vec::new();
        let mut c_in = spec.stem_channels;
        for (si, st) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..st.blocks {
                let stride = if b == 0 && si > 0 { 2 } else { 1 };
                blocks.push(PreActBlock::new(
                    store,
                    seed,
                    &format!("backbone.stage{si}.block{b}"),
                    c_in,
                    st.width,
                    stride,
                )?);
                c_in = st.width;
            }
            let exit_bn =
                BatchNorm2d::new(store, &format!("backbone.stage{si}.exit_bn"), st.width)?;
            stages.push(Stage { blocks, exit_bn });
        }
        Ok(Backbone {
            spec: spec.clone(),
            stem,
            stages,
        })
    }

    /// Run the bottom-up pathway; returns the normalized stage outputs X_l,
    /// finest level first.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: TensorId) -> Result<Vec<TensorId>> {
        let dims = s.tape.dims(x).to_vec();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::shape("backbone_forward", "input must be Nx3xHxW"));
        }
        let stride = self.spec.total_stride();
        if !dims[2].is_multiple_of(stride) || !dims[3].is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input extents {}x{} must be divisible by {stride}",
                dims[2], dims[3]
            )));
        }
        let mut cur = self.stem.forward(s, x)?;
        cur = s.tape.max_pool2d(cur, 3, 2, 1)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                cur = block.forward(s, cur)?;
            }
            let tap = stage.exit_bn.forward(s, cur)?;
            taps.push(s.tape.relu(tap));
        }
        Ok(taps)
    }

    pub fn weight_scalars(&self) -> u64 {
        self.stem.weight_scalars()
            + self
                .stages
                .iter()
                .map(|st| {
                    st.blocks
                        .iter()
                        .map(PreActBlock::weight_scalars)
                        .sum::<u64>()
                        + st.exit_bn.weight_scalars()
                })
                .sum::<u64>()
    }
}

/// Lateral projections and post-fusion smoothing of the top-down pathway.
pub struct Pyramid {
    laterals: Vec<Conv2d>,
    smooths: Vec<Option<Conv2d>>,
    pub width: usize,
}

impl Pyramid {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        spec: &BackboneSpec,
        smooth_top: bool,
    ) -> Result<Self> {
        let levels = spec.levels();
        let width = spec.lateral_width;
        let mut laterals = Vec::with_capacity(levels);
        let mut smooths = Vec::with_capacity(levels);
        for (l, st) in spec.stages.iter().enumerate() {
            laterals.push(Conv2d::new(
                store,
                seed,
                &format!("pyramid.lateral{l}"),
                st.width,
                width,
                1,
                1,
                0,
                true,
            )?);
            let smoothed = l < levels - 1 || smooth_top;
            smooths.push(if smoothed {
                Some(Conv2d::new(
                    store,
                    seed,
                    &format!("pyramid.smooth{l}"),
                    width,
                    width,
                    3,
                    1,
                    1,
                    true,
                )?)
            } else {
                None
            });
        }
        Ok(Pyramid {
            laterals,
            smooths,
            width,
        })
    }

    /// X_l -> X'_l: the 1x1 lateral projection, no norm or activation.
    pub fn lateral<T: Scalar>(
        &self,
        s: &mut Session<T>,
        level: usize,
        x: TensorId,
    ) -> Result<TensorId> {
        self.laterals[level].forward(s, x)
    }

    /// P_{l+1} -> U_l: bilinear upsample to the finer level's extents.
    pub fn upsample<T: Scalar>(
        s: &mut Session<T>,
        p_coarser: TensorId,
        target_h: usize,
        target_w: usize,
    ) -> Result<TensorId> {
        s.tape.bilinear_resize(p_coarser, target_h, target_w)
    }

    /// Baseline fusion P'_l = X'_l + U_l.
    pub fn fuse<T: Scalar>(
        s: &mut Session<T>,
        lateral: TensorId,
        upsampled: TensorId,
    ) -> Result<TensorId> {
        s.tape.add(lateral, upsampled)
    }

    /// P'_l -> P_l: 3x3 anti-aliasing convolution (identity where absent).
    pub fn smooth<T: Scalar>(
        &self,
        s: &mut Session<T>,
        level: usize,
        x: TensorId,
    ) -> Result<TensorId> {
        match &self.smooths[level] {
            Some(conv) => conv.forward(s, x),
            None => Ok(x),
        }
    }

    pub fn has_smooth(&self, level: usize) -> bool {
        self.smooths[level].is_some()
    }

    pub fn weight_scalars(&self) -> u64 {
        self.laterals
            .iter()
            .map(Conv2d::weight_scalars)
            .sum::<u64>()
            + self
                .smooths
                .iter()
                .flatten()
                .map(Conv2d::weight_scalars)
                .sum::<u64>()
    }
}
