//! Final classifier: concatenates the enhanced text/image features, the
//! emotion feature and the fused feature, and maps them to an authenticity
//! probability through a two-logit softmax head.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::emotion::{emotion_loss, EmotionVerdict};
use crate::error::{Result, SeerError};
use crate::fusion::FusionBundle;
use crate::numerics::rng::Stream;
use crate::numerics::tape::{Tape, Var};
use crate::params::{join, xavier, ParamTensors, Registry};

/// Fully-connected block mapping the `4 * d_f` joint feature to 2 logits;
/// column 1 is the real-class logit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorParams {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

pub struct DetectorVars {
    pub w: Var,
    pub b: Var,
}

impl DetectorParams {
    pub fn init(seed: u64, feature_dim: usize) -> Self {
        let mut s = Stream::with_tag(seed, "detector.w");
        Self {
            w: xavier(&mut s, 4 * feature_dim, 2),
            b: Array2::zeros((1, 2)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> DetectorVars {
        DetectorVars {
            w: reg.bind(tape, join(prefix, "w"), &self.w),
            b: reg.bind(tape, join(prefix, "b"), &self.b),
        }
    }
}

impl ParamTensors for DetectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Joint feature and authenticity probability for one sample.
pub struct DetectorTrace {
    /// `[text; image; emotion; fused]`, `1 x 4 d_f`.
    pub joint: Var,
    /// P(real) from the softmax head.
    pub p_real: Var,
}

/// Concatenate the four feature blocks and classify.
pub fn classify(
    tape: &mut Tape,
    text_enhanced: Var,
    image_enhanced: Var,
    emotion_feature: Var,
    fused: Var,
    params: &DetectorVars,
) -> Result<DetectorTrace> {
    let joint = tape.concat_cols(&[text_enhanced, image_enhanced, emotion_feature, fused]);
    let (_, width) = tape.shape(joint);
    let expected = tape.shape(params.w).0;
    if width != expected {
        return Err(SeerError::Shape {
            op: "classify",
            detail: format!("joint feature width {width}, head expects {expected}"),
        });
    }
    let logits = tape.matmul(joint, params.w);
    let logits = tape.add_row(logits, params.b);
    let probs = tape.softmax_rows(logits, &[true, true]);
    let p_real = tape.slice_cols(probs, 1, 1);
    Ok(DetectorTrace { joint, p_real })
}

/// Plain classification of precomputed features.
pub fn classify_apply(
    fusion: &FusionBundle,
    verdict: &EmotionVerdict,
    params: &DetectorParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut reg = Registry::new();
    let vars = params.bind(&mut tape, "detector", &mut reg);
    let t = tape.leaf(fusion.text_enhanced.clone());
    let v = tape.leaf(fusion.image_enhanced.clone());
    let e = tape.leaf(verdict.feature.clone());
    let m = tape.leaf(fusion.fused.clone());
    let trace = classify(&mut tape, t, v, e, m, &vars)?;
    Ok(tape.scalar(trace.p_real))
}

/// Classification loss, emotional-reasoning loss, and their unweighted sum.
pub fn total_loss(p_fnd: f64, p_emo: f64, label: u8) -> Result<(f64, f64, f64)> {
    let l_f = emotion_loss(p_fnd, label)?;
    let l_e = emotion_loss(p_emo, label)?;
    Ok((l_f, l_e, l_e + l_f))
}
