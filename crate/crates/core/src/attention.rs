//! Competitive and spatial collaborative attention over the two fusion flows.
//!
//! Each pyramid level below the top fuses a lateral (spatial) flow X'_l with
//! an upsampled top-down (semantic) flow U_l. Competitive attention squeezes
//! both flows to global channel descriptors, excites them jointly through a
//! bottleneck of width 2C/t, and splits the sigmoid output into one channel
//! weight vector per flow. Spatial collaborative attention squeezes across
//! channels instead, downsamples the joint map with a stride-2 convolution,
//! restores the level's extents, and splits into one single-channel mask per
//! flow. The combined module multiplies channel weights by spatial masks,
//! refines each product with a 1x1 convolution, and scales the flows before
//! their addition.
//!
//! Batch normalization precedes every terminal sigmoid. The parametric
//! squeeze variants replace the cross-channel mean with learned 1x1
//! projections to C/r channels; the fully parametric variant also learns the
//! upsampling as a transposed convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear};
use crate::param::{ParamStore, Session};
use crate::tape::TensorId;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "ca")]
    Ca,
    #[serde(rename = "sca-alpha")]
    ScaAlpha,
    #[serde(rename = "sca-theta")]
    ScaTheta,
    #[serde(rename = "sca-theta-plus")]
    ScaThetaPlus,
    #[serde(rename = "csca-alpha")]
    CscaAlpha,
    #[serde(rename = "csca-theta")]
    CscaTheta,
    #[serde(rename = "csca-theta-plus")]
    CscaThetaPlus,
}

impl AttentionVariant {
    pub fn has_ca(self) -> bool {
        matches!(
            self,
            AttentionVariant::Ca
                | AttentionVariant::CscaAlpha
                | AttentionVariant::CscaTheta
                | AttentionVariant::CscaThetaPlus
        )
    }

    pub fn sca_kind(self) -> Option<ScaKind> {
        match self {
            AttentionVariant::ScaAlpha | AttentionVariant::CscaAlpha => Some(ScaKind::Alpha),
            AttentionVariant::ScaTheta | AttentionVariant::CscaTheta => Some(ScaKind::Theta),
            AttentionVariant::ScaThetaPlus | AttentionVariant::CscaThetaPlus => {
                Some(ScaKind::ThetaPlus)
            }
            _ => None,
        }
    }

    /// Combined modules carry the two post-multiplication 1x1 convolutions.
    pub fn has_post(self) -> bool {
        matches!(
            self,
            AttentionVariant::CscaAlpha
                | AttentionVariant::CscaTheta
                | AttentionVariant::CscaThetaPlus
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::None => "none",
            AttentionVariant::Ca => "ca",
            AttentionVariant::ScaAlpha => "sca-alpha",
            AttentionVariant::ScaTheta => "sca-theta",
            AttentionVariant::ScaThetaPlus => "sca-theta-plus",
            AttentionVariant::CscaAlpha => "csca-alpha",
            AttentionVariant::CscaTheta => "csca-theta",
            AttentionVariant::CscaThetaPlus => "csca-theta-plus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaKind {
    Alpha,
    Theta,
    ThetaPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    /// Competitive-attention reduction: excitation bottleneck width 2C/t.
    #[serde(default = "default_t")]
    pub t: usize,
    /// Parametric-squeeze reduction: squeezed channel count C/r.
    #[serde(default = "default_r")]
    pub r: usize,
    /// Diagnostic switch: replace every attention activation with ones,
    /// reducing the fusion to the plain baseline.
    #[serde(default)]
    pub force_unit_masks: bool,
    /// Leave the fully-parametric masks linear (no sigmoid).
    #[serde(default)]
    pub linear_theta_plus_masks: bool,
}

fn default_t() -> usize {
    16
}
fn default_r() -> usize {
    8
}

impl AttentionConfig {
    pub fn none() -> Self {
        AttentionConfig {
            variant: AttentionVariant::None,
            t: default_t(),
            r: default_r(),
            force_unit_masks: false,
            linear_theta_plus_masks: false,
        }
    }

    pub fn new(variant: AttentionVariant, t: usize, r: usize) -> Self {
        AttentionConfig {
            variant,
            t,
            r,
            force_unit_masks: false,
            linear_theta_plus_masks: false,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.t == 0 || self.r == 0 {
            return Err(Error::Config("reduction ratios must be >= 1".into()));
        }
        if self.variant.has_ca() && 2 * channels / self.t == 0 {
            return Err(Error::Config(format!(
                "t={} reduces the 2C={} descriptor below one channel",
                self.t,
                2 * channels
            )));
        }
        if matches!(
            self.variant.sca_kind(),
            Some(ScaKind::Theta | ScaKind::ThetaPlus)
        ) && channels / self.r == 0
        {
            return Err(Error::Config(format!(
                "r={} reduces C={channels} below one channel",
                self.r
            )));
        }
        Ok(())
    }

    /// Non-fatal configuration oddities (non-divisible ratios floor).
    pub fn warnings(&self, channels: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.variant.has_ca() && !(2 * channels).is_multiple_of(self.t) {
            out.push(format!(
                "2C={} not divisible by t={}; excitation width floors to {}",
                2 * channels,
                self.t,
                (2 * channels / self.t).max(1)
            ));
        }
        if matches!(
            self.variant.sca_kind(),
            Some(ScaKind::Theta | ScaKind::ThetaPlus)
        ) && !channels.is_multiple_of(self.r)
        {
            out.push(format!(
                "C={channels} not divisible by r={}; squeeze width floors to {}",
                self.r,
                (channels / self.r).max(1)
            ));
        }
        out
    }

    fn excitation_width(&self, channels: usize) -> usize {
        (2 * channels / self.t).max(1)
    }

    fn squeeze_width(&self, channels: usize) -> usize {
        (channels / self.r).max(1)
    }
}

/// Competitive-attention weights: joint excitation of the concatenated
/// global descriptors, batch-normalized before the sigmoid.
pub struct CaWeights {
    fc1: Linear,
    fc2: Linear,
    bn: BatchNorm2d,
    channels: usize,
}

impl CaWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let hidden = cfg.excitation_width(channels);
        let fc1 = Linear::new(
            store,
            seed,
            &format!("{name}.fc1"),
            2 * channels,
            hidden,
            true,
        )?;
        let fc2 = Linear::new(
            store,
            seed,
            &format!("{name}.fc2"),
            hidden,
            2 * channels,
            true,
        )?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), 2 * channels)?;
        Ok(CaWeights {
            fc1,
            fc2,
            bn,
            channels,
        })
    }

    /// (X'_l, U_l) -> (S_spa, S_sem), each Nx C x1x1 in (0,1).
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        lateral: TensorId,
        upsampled: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        if s.tape.dims(lateral) != s.tape.dims(upsampled) {
            return Err(Error::shape("ca_forward", "flows must share dims"));
        }
        let batch = s.tape.dims(lateral)[0];
        let c = self.channels;
        let spa = s.tape.global_avg_pool(lateral)?;
        let sem = s.tape.global_avg_pool(upsampled)?;
        let joint = s.tape.concat(&[spa, sem], 1)?;
        let flat = s.tape.reshape(joint, vec![batch, 2 * c])?;
        let h = self.fc1.forward(s, flat)?;
        let h = s.tape.relu(h);
        let e = self.fc2.forward(s, h)?;
        let e = s.tape.reshape(e, vec![batch, 2 * c, 1, 1])?;
        let e = self.bn.forward(s, e)?;
        let gates = s.tape.sigmoid(e);
        let s_spa = s.tape.slice(gates, 1, 0, c)?;
        let s_sem = s.tape.slice(gates, 1, c, c)?;
        Ok((s_spa, s_sem))
    }

    pub fn weight_scalars(&self) -> u64 {
        self.fc1.weight_scalars() + self.fc2.weight_scalars() + self.bn.weight_scalars()
    }

    pub fn flops(&self) -> u64 {
        self.fc1.flops() + self.fc2.flops()
    }
}

/// Scale each flow by its channel weights and add: the competitive-attention
/// fusion. With both weight vectors at one this is the baseline addition.
pub fn ca_scale<T: Scalar>(
    s: &mut Session<T>,
    lateral: TensorId,
    upsampled: TensorId,
    s_spa: TensorId,
    s_sem: TensorId,
) -> Result<TensorId> {
    let a = s.tape.mul(s_spa, lateral)?;
    let b = s.tape.mul(s_sem, upsampled)?;
    s.tape.add(a, b)
}

/// Spatial collaborative attention weights; layout depends on the squeeze
/// and excitation parameterization.
pub enum ScaWeights {
    Alpha {
        down: Conv2d,
        refine: Conv2d,
        bn: BatchNorm2d,
    },
    Theta {
        squeeze_spa: Conv2d,
        squeeze_sem: Conv2d,
        down: Conv2d,
        refine: Conv2d,
        bn: BatchNorm2d,
    },
    ThetaPlus {
        squeeze_spa: Conv2d,
        squeeze_sem: Conv2d,
        down: Conv2d,
        up: ConvTranspose2d,
        proj: Conv2d,
        bn: BatchNorm2d,
    },
}

impl ScaWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        channels: usize,
        kind: ScaKind,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        match kind {
            ScaKind::Alpha => Ok(ScaWeights::Alpha {
                down: Conv2d::new(store, seed, &format!("{name}.down"), 2, 2, 3, 2, 1, true)?
                    .with_replicate_pad(),
                refine: Conv2d::new(store, seed, &format!("{name}.refine"), 2, 2, 1, 1, 0, false)?,
                bn: BatchNorm2d::new(store, &format!("{name}.bn"), 2)?,
            }),
            ScaKind::Theta => {
                let cr = cfg.squeeze_width(channels);
                Ok(ScaWeights::Theta {
                    squeeze_spa: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.squeeze_spa"),
                        channels,
                        cr,
                        1,
                        1,
                        0,
                        true,
                    )?,
                    squeeze_sem: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.squeeze_sem"),
                        channels,
                        cr,
                        1,
                        1,
                        0,
                        true,
                    )?,
                    down: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.down"),
                        2 * cr,
                        2,
                        3,
                        2,
                        1,
                        true,
                    )?
                    .with_replicate_pad(),
                    refine: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.refine"),
                        2,
                        2,
                        1,
                        1,
                        0,
                        false,
                    )?,
                    bn: BatchNorm2d::new(store, &format!("{name}.bn"), 2)?,
                })
            }
            ScaKind::ThetaPlus => {
                let cr = cfg.squeeze_width(channels);
                Ok(ScaWeights::ThetaPlus {
                    squeeze_spa: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.squeeze_spa"),
                        channels,
                        cr,
                        1,
                        1,
                        0,
                        true,
                    )?,
                    squeeze_sem: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.squeeze_sem"),
                        channels,
                        cr,
                        1,
                        1,
                        0,
                        true,
                    )?,
                    down: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.down"),
                        2 * cr,
                        2 * cr,
                        3,
                        2,
                        1,
                        true,
                    )?
                    .with_replicate_pad(),
                    up: ConvTranspose2d::new(
                        store,
                        seed,
                        &format!("{name}.up"),
                        2 * cr,
                        2 * cr,
                        3,
                        2,
                        1,
                        true,
                    )?,
                    proj: Conv2d::new(
                        store,
                        seed,
                        &format!("{name}.proj"),
                        2 * cr,
                        2,
                        1,
                        1,
                        0,
                        false,
                    )?,
                    bn: BatchNorm2d::new(store, &format!("{name}.bn"), 2)?,
                })
            }
        }
    }

    /// (X'_l, U_l) -> (xi_spa, xi_sem), each Nx1xHxW.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        lateral: TensorId,
        upsampled: TensorId,
        cfg: &AttentionConfig,
    ) -> Result<(TensorId, TensorId)> {
        if s.tape.dims(lateral) != s.tape.dims(upsampled) {
            return Err(Error::shape("sca_forward", "flows must share dims"));
        }
        let dims = s.tape.dims(lateral).to_vec();
        let (h, w) = (dims[2], dims[3]);

        let excited = match self {
            ScaWeights::Alpha { down, refine, bn } => {
                let spa = s.tape.channel_avg_pool(lateral)?;
                let sem = s.tape.channel_avg_pool(upsampled)?;
                let joint = s.tape.concat(&[spa, sem], 1)?;
                let eps = down.forward(s, joint)?;
                let eps = s.tape.relu(eps);
                let e = s.tape.bilinear_resize(eps, h, w)?;
                let e = refine.forward(s, e)?;
                bn.forward(s, e)?
            }
            ScaWeights::Theta {
                squeeze_spa,
                squeeze_sem,
                down,
                refine,
                bn,
            } => {
                let spa = squeeze_spa.forward(s, lateral)?;
                let sem = squeeze_sem.forward(s, upsampled)?;
                let joint = s.tape.concat(&[spa, sem], 1)?;
                let eps = down.forward(s, joint)?;
                let eps = s.tape.relu(eps);
                let e = s.tape.bilinear_resize(eps, h, w)?;
                let e = refine.forward(s, e)?;
                bn.forward(s, e)?
            }
            ScaWeights::ThetaPlus {
                squeeze_spa,
                squeeze_sem,
                down,
                up,
                proj,
                bn,
            } => {
                let spa = squeeze_spa.forward(s, lateral)?;
                let sem = squeeze_sem.forward(s, upsampled)?;
                let joint = s.tape.concat(&[spa, sem], 1)?;
                let eps = down.forward(s, joint)?;
                let eps = s.tape.relu(eps);
                let e = up.forward_to(s, eps, h, w)?;
                let e = proj.forward(s, e)?;
                bn.forward(s, e)?
            }
        };

        let masks = if matches!(self, ScaWeights::ThetaPlus { .. }) && cfg.linear_theta_plus_masks {
            excited
        } else {
            s.tape.sigmoid(excited)
        };
        let xi_spa = s.tape.slice(masks, 1, 0, 1)?;
        let xi_sem = s.tape.slice(masks, 1, 1, 1)?;
        Ok((xi_spa, xi_sem))
    }

    pub fn weight_scalars(&self) -> u64 {
        match self {
            ScaWeights::Alpha { down, refine, bn } => {
                down.weight_scalars() + refine.weight_scalars() + bn.weight_scalars()
            }
            ScaWeights::Theta {
                squeeze_spa,
                squeeze_sem,
                down,
                refine,
                bn,
            } => {
                squeeze_spa.weight_scalars()
                    + squeeze_sem.weight_scalars()
                    + down.weight_scalars()
                    + refine.weight_scalars()
                    + bn.weight_scalars()
            }
            ScaWeights::ThetaPlus {
                squeeze_spa,
                squeeze_sem,
                down,
                up,
                proj,
                bn,
            } => {
                squeeze_spa.weight_scalars()
                    + squeeze_sem.weight_scalars()
                    + down.weight_scalars()
                    + up.weight_scalars()
                    + proj.weight_scalars()
                    + bn.weight_scalars()
            }
        }
    }

    /// Conv multiply-adds at level extents (H, W).
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        match self {
            ScaWeights::Alpha { down, refine, .. } => down.flops(h2, w2) + refine.flops(h, w),
            ScaWeights::Theta {
                squeeze_spa,
                squeeze_sem,
                down,
                refine,
                ..
            } => {
                squeeze_spa.flops(h, w)
                    + squeeze_sem.flops(h, w)
                    + down.flops(h2, w2)
                    + refine.flops(h, w)
            }
            ScaWeights::ThetaPlus {
                squeeze_spa,
                squeeze_sem,
                down,
                up,
                proj,
                ..
            } => {
                squeeze_spa.flops(h, w)
                    + squeeze_sem.flops(h, w)
                    + down.flops(h2, w2)
                    + up.flops(h2, w2)
                    + proj.flops(h, w)
            }
        }
    }
}

/// The two 1x1 refinements applied to the combined channel-by-spatial masks.
pub struct CscaPost {
    post_spa: Conv2d,
    post_sem: Conv2d,
}

impl CscaPost {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(CscaPost {
            post_spa: Conv2d::new(
                store,
                seed,
                &format!("{name}.post_spa"),
                channels,
                channels,
                1,
                1,
                0,
                true,
            )?,
            post_sem: Conv2d::new(
                store,
                seed,
                &format!("{name}.post_sem"),
                channels,
                channels,
                1,
                1,
                0,
                true,
            )?,
        })
    }

    /// Set both refinements to the exact identity map (diagnostics/tests).
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for conv in [&self.post_spa, &self.post_sem] {
            let c = conv.c_out;
            let w = store.get_mut(conv.weight);
            w.value.data_mut().fill(T::ZERO);
            for i in 0..c {
                w.value.data_mut()[i * c + i] = T::ONE;
            }
            if let Some(b) = conv.bias {
                store.get_mut(b).value.data_mut().fill(T::ZERO);
            }
        }
    }

    pub fn weight_scalars(&self) -> u64 {
        self.post_spa.weight_scalars() + self.post_sem.weight_scalars()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.post_spa.flops(h, w) + self.post_sem.flops(h, w)
    }
}

/// Combined fusion: M = xi (x) S broadcast to NxCxHxW, refined by the 1x1
/// convolutions, then P' = M_spa (x) X' + M_sem (x) U.
#[allow(clippy::too_many_arguments)]
pub fn csca_combine<T: Scalar>(
    s: &mut Session<T>,
    lateral: TensorId,
    upsampled: TensorId,
    s_spa: TensorId,
    s_sem: TensorId,
    xi_spa: TensorId,
    xi_sem: TensorId,
    post: &CscaPost,
) -> Result<TensorId> {
    let m_spa = s.tape.mul(xi_spa, s_spa)?;
    let m_sem = s.tape.mul(xi_sem, s_sem)?;
    let m_spa = post.post_spa.forward(s, m_spa)?;
    let m_sem = post.post_sem.forward(s, m_sem)?;
    let a = s.tape.mul(m_spa, lateral)?;
    let b = s.tape.mul(m_sem, upsampled)?;
    s.tape.add(a, b)
}

/// Mask and weight tensors produced while fusing one level.
#[derive(Debug, Clone, Copy, Default)]
pub struct LevelMasks {
    pub s_spa: Option<TensorId>,
    pub s_sem: Option<TensorId>,
    pub xi_spa: Option<TensorId>,
    pub xi_sem: Option<TensorId>,
}

/// Attention bundle of one pyramid level.
pub struct LevelAttention {
    pub config: AttentionConfig,
    channels: usize,
    ca: Option<CaWeights>,
    sca: Option<ScaWeights>,
    post: Option<CscaPost>,
}

impl LevelAttention {
    /// Allocate and register the variant's parameters under `name`.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let ca = if cfg.variant.has_ca() {
            Some(CaWeights::new(
                store,
                seed,
                &format!("{name}.ca"),
                channels,
                cfg,
            )?)
        } else {
            None
        };
        let sca = match cfg.variant.sca_kind() {
            Some(kind) => Some(ScaWeights::new(
                store,
                seed,
                &format!("{name}.sca"),
                channels,
                kind,
                cfg,
            )?),
            None => None,
        };
        let post = if cfg.variant.has_post() {
            Some(CscaPost::new(store, seed, name, channels)?)
        } else {
            None
        };
        Ok(LevelAttention {
            config: *cfg,
            channels,
            ca,
            sca,
            post,
        })
    }

    pub fn post(&self) -> Option<&CscaPost> {
        self.post.as_ref()
    }

    /// Fuse the two flows according to the configured variant.
    pub fn fuse<T: Scalar>(
        &self,
        s: &mut Session<T>,
        lateral: TensorId,
        upsampled: TensorId,
    ) -> Result<(TensorId, LevelMasks)> {
        let dims = s.tape.dims(lateral).to_vec();
        let (batch, h, w) = (dims[0], dims[2], dims[3]);
        let mut masks = LevelMasks::default();

        let channel_weights = match &self.ca {
            Some(ca) if !self.config.force_unit_masks => Some(ca.forward(s, lateral, upsampled)?),
            Some(_) => {
                let ones = Tensor::ones(vec![batch, self.channels, 1, 1]);
                Some((s.input(ones.clone()), s.input(ones)))
            }
            None => None,
        };
        if let Some((a, b)) = channel_weights {
            masks.s_spa = Some(a);
            masks.s_sem = Some(b);
        }

        let spatial_masks = match &self.sca {
            Some(sca) if !self.config.force_unit_masks => {
                Some(sca.forward(s, lateral, upsampled, &self.config)?)
            }
            Some(_) => {
                let ones = Tensor::ones(vec![batch, 1, h, w]);
                Some((s.input(ones.clone()), s.input(ones)))
            }
            None => None,
        };
        if let Some((a, b)) = spatial_masks {
            masks.xi_spa = Some(a);
            masks.xi_sem = Some(b);
        }

        let fused = match (&self.post, channel_weights, spatial_masks) {
            (Some(post), Some((s_spa, s_sem)), Some((xi_spa, xi_sem))) => {
                csca_combine(s, lateral, upsampled, s_spa, s_sem, xi_spa, xi_sem, post)?
            }
            (None, Some((s_spa, s_sem)), None) => ca_scale(s, lateral, upsampled, s_spa, s_sem)?,
            (None, None, Some((xi_spa, xi_sem))) => {
                // mask-only fusion: P' = xi_spa (x) X' + xi_sem (x) U
                let a = s.tape.mul(xi_spa, lateral)?;
                let b = s.tape.mul(xi_sem, upsampled)?;
                s.tape.add(a, b)?
            }
            (None, None, None) => s.tape.add(lateral, upsampled)?,
            _ => {
                return Err(Error::Config(
                    "combined variants require both attention branches".into(),
                ))
            }
        };
        Ok((fused, masks))
    }

    pub fn weight_scalars(&self) -> u64 {
        self.ca.as_ref().map_or(0, CaWeights::weight_scalars)
            + self.sca.as_ref().map_or(0, ScaWeights::weight_scalars)
            + self.post.as_ref().map_or(0, CscaPost::weight_scalars)
    }

    /// Conv/fc multiply-adds at level extents (per sample).
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.ca.as_ref().map_or(0, CaWeights::flops)
            + self.sca.as_ref().map_or(0, |sca| sca.flops(h, w))
            + self.post.as_ref().map_or(0, |p| p.flops(h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Mode;
    use crate::rng::Rng;

    fn random_flows(
        s: &mut Session<f64>,
        seed: u64,
        batch: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> (TensorId, TensorId) {
        let mut rng = Rng::new(seed);
        let a = Tensor::from_fn(vec![batch, c, h, w], || rng.next_normal());
        let b = Tensor::from_fn(vec![batch, c, h, w], || rng.next_normal());
        (s.input(a), s.input(b))
    }

    fn csca_cfg(variant: AttentionVariant) -> AttentionConfig {
        AttentionConfig::new(variant, 2, 2)
    }

    #[test]
    fn ca_dims_match_the_table_widths() {
        let cfg = AttentionConfig::new(AttentionVariant::Ca, 16, 8);
        let mut store = ParamStore::<f32>::new();
        let ca = CaWeights::new(&mut store, 0, "ca", 256, &cfg).unwrap();
        assert_eq!(store.get(ca.fc1.weight).value.dims(), &[32, 512]);
        assert_eq!(store.get(ca.fc2.weight).value.dims(), &[512, 32]);
    }

    #[test]
    fn ca_outputs_are_sigmoid_bounded() {
        let cfg = csca_cfg(AttentionVariant::Ca);
        let mut store = ParamStore::<f64>::new();
        let ca = CaWeights::new(&mut store, 0, "ca", 4, &cfg).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = random_flows(&mut s, 11, 2, 4, 5, 5);
        let (s_spa, s_sem) = ca.forward(&mut s, x, u).unwrap();
        assert_eq!(s.tape.dims(s_spa), &[2, 4, 1, 1]);
        for id in [s_spa, s_sem] {
            assert!(s.tape.value(id).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn ca_zero_weights_give_half_gates() {
        let cfg = csca_cfg(AttentionVariant::Ca);
        let mut store = ParamStore::<f64>::new();
        let ca = CaWeights::new(&mut store, 0, "ca", 4, &cfg).unwrap();
        for name in [
            "ca.fc1.weight",
            "ca.fc1.bias",
            "ca.fc2.weight",
            "ca.fc2.bias",
        ] {
            let id = store.lookup(name).unwrap();
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        // eval-mode bn with fresh running stats (mean 0, var 1) is identity up to eps
        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = random_flows(&mut s, 3, 2, 4, 3, 3);
        let (s_spa, s_sem) = ca.forward(&mut s, x, u).unwrap();
        for id in [s_spa, s_sem] {
            for &v in s.tape.value(id).data() {
                assert!((v - 0.5).abs() < 1e-9, "{v}");
            }
        }
    }

    #[test]
    fn ca_scale_with_unit_weights_is_baseline_fusion() {
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = random_flows(&mut s, 4, 2, 3, 4, 4);
        let ones = Tensor::ones(vec![2, 3, 1, 1]);
        let (w1, w2) = (s.input(ones.clone()), s.input(ones));
        let fused = ca_scale(&mut s, x, u, w1, w2).unwrap();
        let base = s.tape.add(x, u).unwrap();
        for (a, b) in s
            .tape
            .value(fused)
            .data()
            .iter()
            .zip(s.tape.value(base).data())
        {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ca_scale_with_half_gates_is_half_the_fusion() {
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = random_flows(&mut s, 13, 2, 3, 4, 4);
        let half = Tensor::full(vec![2, 3, 1, 1], 0.5);
        let (w1, w2) = (s.input(half.clone()), s.input(half));
        let fused = ca_scale(&mut s, x, u, w1, w2).unwrap();
        let base = s.tape.add(x, u).unwrap();
        for (a, b) in s
            .tape
            .value(fused)
            .data()
            .iter()
            .zip(s.tape.value(base).data())
        {
            assert!((a - 0.5 * b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sca_alpha_shapes_on_odd_extent() {
        let cfg = csca_cfg(AttentionVariant::ScaAlpha);
        let mut store = ParamStore::<f64>::new();
        let sca = ScaWeights::new(&mut store, 0, "sca", 4, ScaKind::Alpha, &cfg).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = random_flows(&mut s, 5, 1, 4, 7, 7);
        let (xi1, xi2) = sca.forward(&mut s, x, u, &cfg).unwrap();
        // stride-2 pad-1 downsample of 7x7 is 4x4; masks restored to 7x7
        assert_eq!(s.tape.dims(xi1), &[1, 1, 7, 7]);
        assert_eq!(s.tape.dims(xi2), &[1, 1, 7, 7]);
        for id in [xi1, xi2] {
            assert!(s.tape.value(id).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn sca_alpha_constant_inputs_give_constant_masks() {
        let cfg = csca_cfg(AttentionVariant::ScaAlpha);
        let mut store = ParamStore::<f64>::new();
        let sca = ScaWeights::new(&mut store, 0, "sca", 3, ScaKind::Alpha, &cfg).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(Tensor::full(vec![1, 3, 8, 8], 0.7));
        let u = s.input(Tensor::full(vec![1, 3, 8, 8], -0.2));
        let (xi1, xi2) = sca.forward(&mut s, x, u, &cfg).unwrap();
        for id in [xi1, xi2] {
            let data = s.tape.value(id).data();
            for &v in data {
                assert!((v - data[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn theta_squeeze_width_follows_r() {
        let cfg = AttentionConfig::new(AttentionVariant::ScaTheta, 16, 8);
        let mut store = ParamStore::<f32>::new();
        let sca = ScaWeights::new(&mut store, 0, "sca", 256, ScaKind::Theta, &cfg).unwrap();
        if let ScaWeights::Theta { squeeze_spa, .. } = &sca {
            assert_eq!(squeeze_spa.c_out, 32);
        } else {
            panic!("wrong variant");
        }
        // r = C collapses to a learned single-channel mean
        let cfg_full = AttentionConfig::new(AttentionVariant::ScaTheta, 16, 256);
        let mut store2 = ParamStore::<f32>::new();
        let sca2 = ScaWeights::new(&mut store2, 0, "sca", 256, ScaKind::Theta, &cfg_full).unwrap();
        if let ScaWeights::Theta { squeeze_spa, .. } = &sca2 {
            assert_eq!(squeeze_spa.c_out, 1);
        } else {
            panic!("wrong variant");
        }
    }

    #[test]
    fn theta_plus_intermediate_channels_and_extents() {
        let cfg = AttentionConfig::new(AttentionVariant::ScaThetaPlus, 16, 8);
        let mut store = ParamStore::<f64>::new();
        let sca = ScaWeights::new(&mut store, 0, "sca", 256, ScaKind::ThetaPlus, &cfg).unwrap();
        let ScaWeights::ThetaPlus { down, up, .. } = &sca else {
            panic!("wrong variant");
        };
        assert_eq!((down.c_in, down.c_out), (64, 64));
        assert_eq!((up.c_in, up.c_out), (64, 64));

        // masks restored to the level extents on both parities
        let cfg_small = AttentionConfig::new(AttentionVariant::ScaThetaPlus, 2, 2);
        let mut store_small = ParamStore::<f64>::new();
        let sca_small = ScaWeights::new(
            &mut store_small,
            0,
            "sca",
            4,
            ScaKind::ThetaPlus,
            &cfg_small,
        )
        .unwrap();
        for hw in [7usize, 8] {
            let mut s = Session::new(&mut store_small, Mode::Eval);
            let (x, u) = random_flows(&mut s, 6, 1, 4, hw, hw);
            let (xi1, _) = sca_small.forward(&mut s, x, u, &cfg_small).unwrap();
            assert_eq!(s.tape.dims(xi1), &[1, 1, hw, hw]);
        }
    }

    #[test]
    fn combined_masks_broadcast_as_outer_product() {
        // C=2, H=W=2: M[c,i,j] = S[c] * xi[i,j]
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, Mode::Eval);
        let gates = s.input(Tensor::new(vec![1, 2, 1, 1], vec![0.3, 0.8]).unwrap());
        let mask = s.input(Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.4, 0.6, 0.9]).unwrap());
        let m = s.tape.mul(mask, gates).unwrap();
        assert_eq!(s.tape.dims(m), &[1, 2, 2, 2]);
        let expect = [
            0.3 * 0.1,
            0.3 * 0.4,
            0.3 * 0.6,
            0.3 * 0.9,
            0.8 * 0.1,
            0.8 * 0.4,
            0.8 * 0.6,
            0.8 * 0.9,
        ];
        for (a, b) in s.tape.value(m).data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn csca_with_unit_masks_and_identity_post_is_baseline() {
        let cfg = csca_cfg(AttentionVariant::CscaAlpha);
        let mut store = ParamStore::<f64>::new();
        let level = LevelAttention::build(&mut store, 0, "att", 4, &cfg).unwrap();
        level.post().unwrap().set_identity(&mut store);

        for seed in 0..20 {
            let mut s = Session::new(&mut store, Mode::Eval);
            let (x, u) = random_flows(&mut s, seed, 2, 4, 3, 3);
            let ones_c = Tensor::ones(vec![2, 4, 1, 1]);
            let ones_s = Tensor::ones(vec![2, 1, 3, 3]);
            let (sa, se) = (s.input(ones_c.clone()), s.input(ones_c));
            let (xa, xe) = (s.input(ones_s.clone()), s.input(ones_s));
            let fused = csca_combine(&mut s, x, u, sa, se, xa, xe, level.post().unwrap()).unwrap();
            let base = s.tape.add(x, u).unwrap();
            for (a, b) in s
                .tape
                .value(fused)
                .data()
                .iter()
                .zip(s.tape.value(base).data())
            {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn force_unit_masks_reduces_csca_to_baseline() {
        let mut cfg = csca_cfg(AttentionVariant::CscaAlpha);
        cfg.force_unit_masks = true;
        let mut store = ParamStore::<f64>::new();
        let level = LevelAttention::build(&mut store, 0, "att", 4, &cfg).unwrap();
        level.post().unwrap().set_identity(&mut store);
        let mut s = Session::new(&mut store, Mode::Eval);
        let (x, u) = random_flows(&mut s, 42, 2, 4, 4, 4);
        let (fused, masks) = level.fuse(&mut s, x, u).unwrap();
        assert!(masks.s_spa.is_some() && masks.xi_spa.is_some());
        let base = s.tape.add(x, u).unwrap();
        for (a, b) in s
            .tape
            .value(fused)
            .data()
            .iter()
            .zip(s.tape.value(base).data())
        {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_permutation_permutes_masks_exactly() {
        let cfg = csca_cfg(AttentionVariant::CscaAlpha);
        let mut store = ParamStore::<f64>::new();
        let level = LevelAttention::build(&mut store, 0, "att", 4, &cfg).unwrap();

        let mut rng = Rng::new(9);
        let a = Tensor::from_fn(vec![3, 4, 4, 4], || rng.next_normal());
        let b = Tensor::from_fn(vec![3, 4, 4, 4], || rng.next_normal());
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor<f64>| {
            let plane = 4 * 4 * 4;
            let mut data = vec![0.0; t.numel()];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * plane..(dst + 1) * plane]
                    .copy_from_slice(&t.data()[src * plane..(src + 1) * plane]);
            }
            Tensor::new(vec![3, 4, 4, 4], data).unwrap()
        };

        let mut s1 = Session::new(&mut store, Mode::Eval);
        let (x1, u1) = (s1.input(a.clone()), s1.input(b.clone()));
        let (_, m1) = level.fuse(&mut s1, x1, u1).unwrap();
        let xi_base = s1.tape.value(m1.xi_spa.unwrap()).clone();
        drop(s1);

        let mut s2 = Session::new(&mut store, Mode::Eval);
        let (x2, u2) = (s2.input(permute(&a)), s2.input(permute(&b)));
        let (_, m2) = level.fuse(&mut s2, x2, u2).unwrap();
        let xi_perm = s2.tape.value(m2.xi_spa.unwrap()).clone();

        let plane = 4 * 4;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &xi_perm.data()[dst * plane..(dst + 1) * plane],
                &xi_base.data()[src * plane..(src + 1) * plane]
            );
        }
    }

    #[test]
    fn csca_alpha_registers_ten_parameter_groups() {
        let cfg = AttentionConfig::new(AttentionVariant::CscaAlpha, 16, 8);
        let mut store = ParamStore::<f32>::new();
        LevelAttention::build(&mut store, 0, "att", 256, &cfg).unwrap();
        let groups: std::collections::BTreeSet<String> = store
            .iter()
            .filter(|p| p.kind == crate::param::ParamKind::Weight)
            .map(|p| {
                p.name
                    .trim_end_matches(".weight")
                    .trim_end_matches(".bias")
                    .to_string()
            })
            .collect();
        assert_eq!(groups.len(), 10, "groups: {groups:?}");
    }

    #[test]
    fn variant_none_registers_nothing() {
        let cfg = AttentionConfig::none();
        let mut store = ParamStore::<f32>::new();
        let level = LevelAttention::build(&mut store, 0, "att", 256, &cfg).unwrap();
        assert_eq!(store.len(), 0);
        assert_eq!(level.weight_scalars(), 0);
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let cfg = csca_cfg(AttentionVariant::CscaThetaPlus);
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        LevelAttention::build(&mut a, 123, "att", 8, &cfg).unwrap();
        LevelAttention::build(&mut b, 123, "att", 8, &cfg).unwrap();
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
        }
    }

    #[test]
    fn invalid_ratios_are_config_errors() {
        let cfg = AttentionConfig::new(AttentionVariant::CscaAlpha, 64, 8);
        assert!(cfg.validate(4).is_err()); // 2C/t = 8/64 floors to 0
        let cfg2 = AttentionConfig::new(AttentionVariant::CscaTheta, 2, 64);
        assert!(cfg2.validate(4).is_err()); // C/r = 4/64 floors to 0
        let cfg3 = AttentionConfig::new(AttentionVariant::ScaAlpha, 64, 64);
        assert!(cfg3.validate(4).is_ok()); // alpha ignores both ratios
    }

    #[test]
    fn non_divisible_ratio_warns() {
        let cfg = AttentionConfig::new(AttentionVariant::CscaTheta, 3, 3);
        let warnings = cfg.warnings(8);
        assert_eq!(warnings.len(), 2);
        assert!(warnings[1].contains("floors to 2"));
    }

    #[test]
    fn per_level_extra_parameters_match_table_arithmetic() {
        // alpha variant at C=256, t=16: CA fcs 2*16384, spatial convs 36+4,
        // post refinements 2*65536, plus biases and the two bn affines.
        let cfg = AttentionConfig::new(AttentionVariant::CscaAlpha, 16, 8);
        let mut store = ParamStore::<f32>::new();
        let level = LevelAttention::build(&mut store, 0, "att", 256, &cfg).unwrap();
        let total = level.weight_scalars();
        assert_eq!(total, store.num_weight_scalars());
        let core = 2 * 16_384 + 36 + 4 + 2 * 65_536;
        assert!(total as i64 - core as i64 >= 0);
        assert!(
            (total as i64 - core as i64) < 3000,
            "bias/bn overhead too large: {total}"
        );
        // three levels land near the expected 0.49M delta over the baseline
        let three = 3 * total;
        assert!(
            (three as f64 - 490_000.0).abs() / 490_000.0 < 0.05,
            "{three}"
        );
    }
}
