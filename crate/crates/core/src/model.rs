//! The assembled detector: semantic-enhancement stage, expert emotional
//! reasoning, and the final classifier, with ablation switches that zero
//! feature blocks without changing any tensor shape.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::SeqVar;
use crate::detector::{classify, DetectorParams, DetectorVars};
use crate::emotion::{
    aggregate_experts, bayes_estimate, bayes_estimate_var, emotion_loss_var, EmotionParams,
    EmotionVars, EmotionVerdict,
};
use crate::encoders::EmbeddingBundle;
use crate::error::{Result, SeerError};
use crate::fusion::{
    cosine, enhance_pairwise, enhance_unimodal, fuse, FusionBundle, FusionParams, FusionVars,
};
use crate::harness::{AblationFlag, HyperParams};
use crate::numerics::tape::{Tape, Var};
use crate::params::{join, ParamTensors, Registry};

/// Every trainable tensor in the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeerParams {
    pub fusion: FusionParams,
    pub emotion: EmotionParams,
    pub detector: DetectorParams,
}

pub struct SeerVars {
    pub fusion: FusionVars,
    pub emotion: EmotionVars,
    pub detector: DetectorVars,
}

impl SeerParams {
    pub fn init(hp: &HyperParams) -> Result<Self> {
        Ok(Self {
            fusion: FusionParams::init(hp.seed, hp)?,
            emotion: EmotionParams::init(hp.seed, hp.d, hp.heads, hp.d_f, hp.k_experts)?,
            detector: DetectorParams::init(hp.seed, hp.d_f),
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> SeerVars {
        SeerVars {
            fusion: self.fusion.bind(tape, &join(prefix, "fusion"), reg),
            emotion: self.emotion.bind(tape, &join(prefix, "emotion"), reg),
            detector: self.detector.bind(tape, &join(prefix, "detector"), reg),
        }
    }
}

impl ParamTensors for SeerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.emotion.visit(&join(prefix, "emotion"), f);
        self.detector.visit(&join(prefix, "detector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.emotion.visit_mut(&join(prefix, "emotion"), f);
        self.detector.visit_mut(&join(prefix, "detector"), f);
    }
}

/// Tape handles for one sample's forward pass.
pub struct SampleTrace {
    pub p_real: Var,
    /// Authenticity estimate from tone; absent under the no-reasoning
    /// ablation.
    pub emotion_estimate: Option<Var>,
    pub mixed_score: Option<Var>,
    pub text_score: Option<Var>,
    pub caption_score: Option<Var>,
    pub emotion_feature: Var,
    pub text_enhanced: Var,
    pub image_enhanced: Var,
    pub fused: Var,
    pub joint: Var,
    pub similarity: f64,
}

/// Model = hyperparameters + parameters. Forward passes record onto a
/// caller-supplied tape; convenience methods run scratch tapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeerModel {
    pub hp: HyperParams,
    pub params: SeerParams,
}

impl SeerModel {
    pub fn init(hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            hp: hp.clone(),
            params: SeerParams::init(hp)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> (SeerVars, Registry) {
        let mut reg = Registry::new();
        let vars = self.params.bind(tape, "", &mut reg);
        (vars, reg)
    }

    /// Record one sample's forward pass.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        vars: &SeerVars,
        bundle: &EmbeddingBundle,
    ) -> Result<SampleTrace> {
        let hp = &self.hp;
        let ab = |flag| hp.has(flag);

        let text = bundle.text_seq.bind(tape);
        let image = bundle.image_seq.bind(tape);
        let caption = if ab(AblationFlag::NoCaptions) {
            let zeros = Array2::zeros((bundle.caption_seq.len(), bundle.caption_seq.dim()));
            SeqVar {
                var: tape.leaf(zeros),
                mask: bundle.caption_seq.mask().to_vec(),
            }
        } else {
            bundle.caption_seq.bind(tape)
        };

        let (clip_text, clip_image, similarity) = if ab(AblationFlag::NoClip) {
            let zt = tape.leaf(Array2::zeros(bundle.clip_text.dim()));
            let zi = tape.leaf(Array2::zeros(bundle.clip_image.dim()));
            (zt, zi, 1.0)
        } else {
            let sim = cosine(&bundle.clip_text, &bundle.clip_image)?;
            (
                tape.leaf(bundle.clip_text.clone()),
                tape.leaf(bundle.clip_image.clone()),
                sim,
            )
        };
        let gate = if ab(AblationFlag::NoClip) {
            1.0
        } else if hp.rescale_theta {
            (similarity + 1.0) / 2.0
        } else {
            similarity
        };

        // fused multimodal feature
        let fused = if ab(AblationFlag::NoMsem) {
            tape.leaf(Array2::zeros((1, hp.d_f)))
        } else {
            let (h_t, h_v, h_p) = if ab(AblationFlag::NoCa) {
                (text.pool(tape), image.pool(tape), caption.pool(tape))
            } else {
                enhance_pairwise(tape, &text, &image, &caption, &vars.fusion)?
            };
            fuse(
                tape,
                h_t,
                h_v,
                h_p,
                clip_text,
                clip_image,
                gate,
                &vars.fusion,
            )
        };

        // unimodal enhancement
        let (t_enh, v_enh) = enhance_unimodal(
            tape,
            &text,
            &image,
            clip_text,
            clip_image,
            &vars.fusion,
            ab(AblationFlag::NoSa),
        )?;
        let text_enhanced = if ab(AblationFlag::NoText) {
            tape.leaf(Array2::zeros((1, hp.d_f)))
        } else {
            t_enh
        };
        let image_enhanced = if ab(AblationFlag::NoImage) {
            tape.leaf(Array2::zeros((1, hp.d_f)))
        } else {
            v_enh
        };

        // expert emotional reasoning
        let (emotion_feature, emotion_estimate, mixed_score, text_score, caption_score) =
            if ab(AblationFlag::NoEerm) {
                let zeros = tape.leaf(Array2::zeros((1, hp.d_f)));
                (zeros, None, None, None, None)
            } else {
                let expert_caption = if ab(AblationFlag::SeerI) { &image } else { &caption };
                let trace =
                    aggregate_experts(tape, &text, expert_caption, &vars.emotion, hp.lambda)?;
                let estimate = bayes_estimate_var(tape, trace.mixed_score, hp.alpha, hp.beta)?;
                (
                    trace.feature,
                    Some(estimate),
                    Some(trace.mixed_score),
                    Some(trace.text_score),
                    Some(trace.caption_score),
                )
            };

        let det = classify(
            tape,
            text_enhanced,
            image_enhanced,
            emotion_feature,
            fused,
            &vars.detector,
        )?;

        Ok(SampleTrace {
            p_real: det.p_real,
            emotion_estimate,
            mixed_score,
            text_score,
            caption_score,
            emotion_feature,
            text_enhanced,
            image_enhanced,
            fused,
            joint: det.joint,
            similarity,
        })
    }

    /// Total loss for one sample: classification cross-entropy plus, unless
    /// the reasoning head is ablated, the emotional-reasoning cross-entropy.
    pub fn loss_sample(&self, tape: &mut Tape, trace: &SampleTrace, label: u8) -> Var {
        let l_f = emotion_loss_var(tape, trace.p_real, label);
        match trace.emotion_estimate {
            Some(estimate) => {
                let l_e = emotion_loss_var(tape, estimate, label);
                tape.add(l_e, l_f)
            }
            None => l_f,
        }
    }

    /// P(real) for one sample on a scratch tape.
    pub fn predict(&self, bundle: &EmbeddingBundle) -> Result<f64> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape);
        let trace = self.forward_sample(&mut tape, &vars, bundle)?;
        Ok(tape.scalar(trace.p_real))
    }

    /// Feature bundles for inspection dumps and the plain API surface.
    pub fn features(&self, bundle: &EmbeddingBundle) -> Result<(FusionBundle, EmotionVerdict, Vec<f64>)> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape);
        let trace = self.forward_sample(&mut tape, &vars, bundle)?;
        let fusion = FusionBundle {
            text_enhanced: tape.value(trace.text_enhanced).clone(),
            image_enhanced: tape.value(trace.image_enhanced).clone(),
            fused: tape.value(trace.fused).clone(),
            similarity: trace.similarity,
        };
        let verdict = EmotionVerdict {
            text_score: trace.text_score.map_or(0.5, |v| tape.scalar(v)),
            caption_score: trace.caption_score.map_or(0.5, |v| tape.scalar(v)),
            mixed_score: trace.mixed_score.map_or(0.5, |v| tape.scalar(v)),
            feature: tape.value(trace.emotion_feature).clone(),
            estimate: trace.emotion_estimate.map(|v| tape.scalar(v)),
        };
        let joint = tape.value(trace.joint).row(0).to_vec();
        Ok((fusion, verdict, joint))
    }

    /// Plain authenticity estimate from a tone score under this model's
    /// priors.
    pub fn estimate_from_tone(&self, mixed_score: f64) -> Result<f64> {
        bayes_estimate(mixed_score, self.hp.alpha, self.hp.beta)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self)
            .map_err(|e| SeerError::Contract(format!("model serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: SeerModel = serde_json::from_str(text)
            .map_err(|e| SeerError::Config(format!("model file: {e}")))?;
        model.hp.validate()?;
        if model.params.detector.w.nrows() != 4 * model.hp.d_f {
            return Err(SeerError::Config(format!(
                "model file is inconsistent: detector expects {} inputs, config implies {}",
                model.params.detector.w.nrows(),
                4 * model.hp.d_f
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{NewsItem, StubEncoder};
    use crate::numerics::grad_check;
    use crate::numerics::rng::Stream;
    use crate::params::Gradients;
    use std::collections::BTreeSet;

    pub(crate) fn toy_hp(seed: u64) -> HyperParams {
        HyperParams {
            d: 8,
            d_c: 4,
            d_f: 8,
            heads: 2,
            k_experts: 1,
            m_len: 5,
            z_len: 4,
            n_regions: 3,
            region_dim: 2,
            vocab_size: 64,
            seed,
            ..Default::default()
        }
    }

    fn toy_bundle(hp: &HyperParams, id: &str) -> EmbeddingBundle {
        let enc = StubEncoder::new(hp).unwrap();
        let mut s = Stream::with_tag(hp.seed, &format!("toy.{id}"));
        let item = NewsItem {
            id: id.to_string(),
            text_tokens: vec![3, 9, 14],
            caption_tokens: vec![5, 21],
            image_regions: Array2::from_shape_fn((hp.n_regions, hp.region_dim), |_| {
                s.range(-1.0, 1.0)
            }),
            label: 1,
            split: None,
            embedding_ref: None,
        };
        enc.encode(&item).unwrap()
    }

    #[test]
    fn initialization_is_deterministic() {
        let hp = toy_hp(5);
        let a = SeerModel::init(&hp).unwrap();
        let b = SeerModel::init(&hp).unwrap();
        let bundle = toy_bundle(&hp, "det");
        assert_eq!(
            a.predict(&bundle).unwrap().to_bits(),
            b.predict(&bundle).unwrap().to_bits()
        );
    }

    #[test]
    fn every_ablation_combination_runs() {
        let hp = toy_hp(6);
        let bundle = toy_bundle(&hp, "ablate");
        for flag in AblationFlag::ALL {
            let mut hp2 = hp.clone();
            hp2.ablation = BTreeSet::from([flag]);
            let model = SeerModel::init(&hp2).unwrap();
            let p = model.predict(&bundle).unwrap();
            assert!(p > 0.0 && p < 1.0, "{flag:?} broke the pipeline");
        }
        // all flags at once still runs
        let mut hp3 = hp.clone();
        hp3.ablation = AblationFlag::ALL.into_iter().collect();
        let model = SeerModel::init(&hp3).unwrap();
        assert!(model.predict(&bundle).unwrap().is_finite());
    }

    #[test]
    fn ablations_zero_only_their_slice() {
        let hp = toy_hp(7);
        let bundle = toy_bundle(&hp, "slice");
        let full = SeerModel::init(&hp).unwrap();
        let (_, _, joint_full) = full.features(&bundle).unwrap();
        let mut hp_abl = hp.clone();
        hp_abl.ablation = BTreeSet::from([AblationFlag::NoMsem]);
        let ablated = SeerModel::init(&hp_abl).unwrap();
        let (_, _, joint_abl) = ablated.features(&bundle).unwrap();
        let d = hp.d_f;
        for c in 0..4 * d {
            if c >= 3 * d {
                assert_eq!(joint_abl[c], 0.0);
            } else {
                assert_eq!(joint_abl[c], joint_full[c], "col {c}");
            }
        }
    }

    #[test]
    fn model_file_round_trips() {
        let hp = toy_hp(8);
        let model = SeerModel::init(&hp).unwrap();
        let bundle = toy_bundle(&hp, "io");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = SeerModel::load(&path).unwrap();
        assert_eq!(
            model.predict(&bundle).unwrap().to_bits(),
            loaded.predict(&bundle).unwrap().to_bits()
        );
    }

    #[test]
    fn corrupt_model_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, "{\"hp\": 3}").unwrap();
        assert!(matches!(
            SeerModel::load(&path),
            Err(SeerError::Config(_))
        ));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let hp = toy_hp(9);
        let model = SeerModel::init(&hp).unwrap();
        let bundle = toy_bundle(&hp, "grad");
        let mut params = model.params.clone();
        let reports = grad_check(
            &mut params,
            |p| {
                let probe = SeerModel {
                    hp: hp.clone(),
                    params: p.clone(),
                };
                let mut tape = Tape::new();
                let (vars, reg) = probe.bind(&mut tape);
                let trace = probe.forward_sample(&mut tape, &vars, &bundle)?;
                let loss = probe.loss_sample(&mut tape, &trace, 1);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(reports.len() > 50);
        for r in &reports {
            assert!(r.pass, "{} rel err {}", r.param, r.max_rel_error);
        }
    }
}
