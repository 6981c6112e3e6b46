//! Full classifier: backbone, pyramid, per-level attention fusion, and the
//! pooled multi-level head.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LevelAttention, LevelMasks};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::param::{ParamStore, Session};
use crate::pyramid::{Backbone, BackboneSpec, Pyramid};
use crate::tape::TensorId;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub attention: AttentionConfig,
    pub num_classes: usize,
    /// Apply the 3x3 smooth at the top level too; off leaves the top
    /// lateral untouched.
    #[serde(default)]
    pub smooth_top: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate(self.backbone.lateral_width)?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.backbone.levels()
    }
}

/// Tensor handles produced by one forward pass.
pub struct ForwardArtifacts {
    pub logits: TensorId,
    /// Smoothed pyramid outputs P_l, finest level first.
    pub levels: Vec<TensorId>,
    /// Attention activations per fused level (length L-1).
    pub masks: Vec<LevelMasks>,
}

pub struct Apn {
    pub spec: ModelSpec,
    backbone: Backbone,
    pyramid: Pyramid,
    attention: Vec<LevelAttention>,
    head: Linear,
}

impl Apn {
    /// Register all parameters (seed-derived, order-independent) and wire
    /// the layers.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        spec: &ModelSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let backbone = Backbone::new(store, seed, &spec.backbone)?;
        let pyramid = Pyramid::new(store, seed, &spec.backbone, spec.smooth_top)?;
        let levels = spec.levels();
        let width = spec.backbone.lateral_width;
        let mut attention = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            attention.push(LevelAttention::build(
                store,
                seed,
                &format!("attention.level{l}"),
                width,
                &spec.attention,
            )?);
        }
        let head = Linear::new(
            store,
            seed,
            "head.fc",
            levels * width,
            spec.num_classes,
            true,
        )?;
        Ok(Apn {
            spec: spec.clone(),
            backbone,
            pyramid,
            attention,
            head,
        })
    }

    /// Nx3xHxW -> NxK logits, plus the pyramid outputs and attention masks.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: TensorId) -> Result<ForwardArtifacts> {
        let taps = self.backbone.forward(s, x)?;
        let levels = taps.len();
        let mut laterals = Vec::with_capacity(levels);
        for (l, &tap) in taps.iter().enumerate() {
            laterals.push(self.pyramid.lateral(s, l, tap)?);
        }

        let mut outputs = vec![None; levels];
        let mut masks = vec![LevelMasks::default(); levels.saturating_sub(1)];
        let top = levels - 1;
        let mut coarser = self.pyramid.smooth(s, top, laterals[top])?;
        outputs[top] = Some(coarser);
        for l in (0..top).rev() {
            let dims = s.tape.dims(laterals[l]).to_vec();
            let upsampled = Pyramid::upsample(s, coarser, dims[2], dims[3])?;
            let (fused, level_masks) = self.attention[l].fuse(s, laterals[l], upsampled)?;
            masks[l] = level_masks;
            let smoothed = self.pyramid.smooth(s, l, fused)?;
            outputs[l] = Some(smoothed);
            coarser = smoothed;
        }
        let levels_out: Vec<TensorId> = outputs.into_iter().map(|o| o.expect("filled")).collect();

        let batch = s.tape.dims(x)[0];
        let width = self.pyramid.width;
        let mut pooled = Vec::with_capacity(levels);
        for &p in &levels_out {
            let g = s.tape.global_avg_pool(p)?;
            pooled.push(s.tape.reshape(g, vec![batch, width])?);
        }
        let features = s.tape.concat(&pooled, 1)?;
        let logits = self.head.forward(s, features)?;

        Ok(ForwardArtifacts {
            logits,
            levels: levels_out,
            masks,
        })
    }

    /// Exact count of registered trainable scalars.
    pub fn weight_scalars(&self) -> u64 {
        self.backbone.weight_scalars()
            + self.pyramid.weight_scalars()
            + self
                .attention
                .iter()
                .map(LevelAttention::weight_scalars)
                .sum::<u64>()
            + self.head.weight_scalars()
    }

    pub fn attention_levels(&self) -> &[LevelAttention] {
        &self.attention
    }
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &std::path::Path) -> Result<()> {
    checkpoint::save(store, path)
}

pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &std::path::Path) -> Result<()> {
    checkpoint::load(store, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::param::Mode;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn toy_spec(variant: AttentionVariant) -> ModelSpec {
        ModelSpec {
            backbone: BackboneSpec::toy(),
            attention: AttentionConfig::new(variant, 2, 2),
            num_classes: 3,
            smooth_top: false,
        }
    }

    #[test]
    fn toy_forward_shapes() {
        let spec = toy_spec(AttentionVariant::CscaAlpha);
        let mut store = ParamStore::<f32>::new();
        let model = Apn::build(&mut store, 1, &spec).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let mut rng = Rng::new(0);
        let x = s.input(Tensor::from_fn(vec![2, 3, 32, 32], || {
            rng.next_f64() as f32
        }));
        let art = model.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.dims(art.logits), &[2, 3]);
        assert_eq!(art.levels.len(), 2);
        assert_eq!(s.tape.dims(art.levels[0]), &[2, 8, 8, 8]);
        assert_eq!(s.tape.dims(art.levels[1]), &[2, 8, 4, 4]);
        // head consumed the concatenated 2*8 pooled vector
        assert_eq!(model.head.d_in, 16);
        let m = &art.masks[0];
        assert_eq!(s.tape.dims(m.xi_spa.unwrap()), &[2, 1, 8, 8]);
        assert_eq!(s.tape.dims(m.s_spa.unwrap()), &[2, 8, 1, 1]);
    }

    #[test]
    fn logits_finite_over_random_draws() {
        let spec = toy_spec(AttentionVariant::CscaThetaPlus);
        let mut store = ParamStore::<f32>::new();
        let model = Apn::build(&mut store, 2, &spec).unwrap();
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let mut s = Session::new(&mut store, Mode::Eval);
            let x = s.input(Tensor::from_fn(vec![1, 3, 32, 32], || {
                (rng.next_f64() * 4.0 - 2.0) as f32
            }));
            let art = model.forward(&mut s, x).unwrap();
            assert!(s.tape.value(art.logits).all_finite());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_model_output() {
        let spec = toy_spec(AttentionVariant::CscaAlpha);
        let mut store = ParamStore::<f32>::new();
        let model = Apn::build(&mut store, 3, &spec).unwrap();

        let mut rng = Rng::new(5);
        let input = Tensor::from_fn(vec![1, 3, 32, 32], || rng.next_f64() as f32);
        let logits_of = |store: &mut ParamStore<f32>| {
            let mut s = Session::new(store, Mode::Eval);
            let x = s.input(input.clone());
            let art = model.forward(&mut s, x).unwrap();
            s.tape.value(art.logits).data().to_vec()
        };
        let before = logits_of(&mut store);

        let bytes = crate::checkpoint::save_to_vec(&store);
        // rebuild from a different seed, then load the checkpoint over it
        let mut store2 = ParamStore::<f32>::new();
        let _model2 = Apn::build(&mut store2, 99, &spec).unwrap();
        crate::checkpoint::load_from_slice(&mut store2, &bytes).unwrap();
        let after = logits_of(&mut store2);
        assert_eq!(before, after);
        // and the bytes themselves are stable
        assert_eq!(crate::checkpoint::save_to_vec(&store2), bytes);
    }

    #[test]
    fn forced_unit_masks_reproduce_the_baseline_pyramid() {
        // same seed: backbone/pyramid/head weights are identical by name
        let fpn = toy_spec(AttentionVariant::None);
        let mut csca = toy_spec(AttentionVariant::CscaAlpha);
        csca.attention.force_unit_masks = true;

        let mut store_a = ParamStore::<f64>::new();
        let model_a = Apn::build(&mut store_a, 11, &fpn).unwrap();
        let mut store_b = ParamStore::<f64>::new();
        let model_b = Apn::build(&mut store_b, 11, &csca).unwrap();
        for level in model_b.attention_levels() {
            level.post().unwrap().set_identity(&mut store_b);
        }

        let mut rng = Rng::new(31);
        let input = Tensor::from_fn(vec![2, 3, 32, 32], || rng.next_normal());

        let mut sa = Session::new(&mut store_a, Mode::Eval);
        let xa = sa.input(input.clone());
        let art_a = model_a.forward(&mut sa, xa).unwrap();

        let mut sb = Session::new(&mut store_b, Mode::Eval);
        let xb = sb.input(input);
        let art_b = model_b.forward(&mut sb, xb).unwrap();

        for (pa, pb) in art_a.levels.iter().zip(art_b.levels.iter()) {
            for (a, b) in sa
                .tape
                .value(*pa)
                .data()
                .iter()
                .zip(sb.tape.value(*pb).data())
            {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
        for (a, b) in sa
            .tape
            .value(art_a.logits)
            .data()
            .iter()
            .zip(sb.tape.value(art_b.logits).data())
        {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn table_architecture_head_dims_at_224() {
        let spec = ModelSpec {
            backbone: BackboneSpec::resnet18(),
            attention: AttentionConfig::none(),
            num_classes: 98,
            smooth_top: false,
        };
        let mut store = ParamStore::<f32>::new();
        let model = Apn::build(&mut store, 0, &spec).unwrap();
        assert_eq!(model.head.d_in, 4 * 256);
        assert_eq!(model.head.d_out, 98);

        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(Tensor::full(vec![1, 3, 224, 224], 0.1));
        let art = model.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.dims(art.logits), &[1, 98]);
        let expect = [(256usize, 56usize), (256, 28), (256, 14), (256, 7)];
        for (p, (c, e)) in art.levels.iter().zip(expect.iter()) {
            assert_eq!(s.tape.dims(*p), &[1, *c, *e, *e]);
        }
    }
}
