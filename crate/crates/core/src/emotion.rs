//! Expert emotional reasoning: a panel of recurrent experts scores the
//! emotional tone of the text and caption sequences, scores are mixed
//! across modalities, and a closed-form prior converts the mixed tone
//! score into an authenticity estimate trained with cross-entropy.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{self_attention, AttentionParams, AttentionVars, SeqVar, SequenceTensor};
use crate::error::{Result, SeerError};
use crate::numerics::rng::Stream;
use crate::numerics::tape::{Tape, Var};
use crate::params::{join, xavier, Mlp, MlpVars, ParamTensors, Registry};

/// Probability clamp for cross-entropy arguments.
pub const PROB_EPS: f64 = 1e-7;

/// One direction of a recurrent layer with the four gates packed into
/// single matrices, order `[input, forget, cell, output]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmParams {
    /// Input projection, `d x 4h`.
    pub w: Array2<f64>,
    /// Recurrent projection, `h x 4h`.
    pub u: Array2<f64>,
    /// Gate bias, `1 x 4h`.
    pub b: Array2<f64>,
}

pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

impl LstmParams {
    pub fn init(seed: u64, tag: &str, input: usize, hidden: usize) -> Self {
        let mut sw = Stream::with_tag(seed, &format!("{tag}.w"));
        let mut su = Stream::with_tag(seed, &format!("{tag}.u"));
        Self {
            w: xavier(&mut sw, input, 4 * hidden),
            u: xavier(&mut su, hidden, 4 * hidden),
            b: Array2::zeros((1, 4 * hidden)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> LstmVars {
        LstmVars {
            w: reg.bind(tape, join(prefix, "w"), &self.w),
            u: reg.bind(tape, join(prefix, "u"), &self.u),
            b: reg.bind(tape, join(prefix, "b"), &self.b),
        }
    }
}

impl ParamTensors for LstmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "u"), &self.u);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "u"), &mut self.u);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// One scoring expert: a bidirectional recurrent layer, a self-attention
/// refinement, and a two-logit score head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub attn: AttentionParams,
    /// Score head weights, `2h x 2`; column 1 is the positive-tone logit.
    pub score_w: Array2<f64>,
    pub score_b: Array2<f64>,
}

pub struct ExpertVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
    pub attn: AttentionVars,
    pub score_w: Var,
    pub score_b: Var,
}

impl ExpertParams {
    /// `dim` must be even: each direction carries `dim / 2` hidden units so
    /// the concatenated state keeps the model width.
    pub fn init(seed: u64, tag: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(SeerError::Config(format!(
                "expert input dim must be even, got {dim}"
            )));
        }
        let hidden = dim / 2;
        let mut sw = Stream::with_tag(seed, &format!("{tag}.score_w"));
        Ok(Self {
            forward: LstmParams::init(seed, &format!("{tag}.fwd"), dim, hidden),
            backward: LstmParams::init(seed, &format!("{tag}.bwd"), dim, hidden),
            attn: AttentionParams::init(seed, &format!("{tag}.attn"), dim, heads)?,
            score_w: xavier(&mut sw, dim, 2),
            score_b: Array2::zeros((1, 2)),
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> ExpertVars {
        ExpertVars {
            forward: self.forward.bind(tape, &join(prefix, "fwd"), reg),
            backward: self.backward.bind(tape, &join(prefix, "bwd"), reg),
            attn: self.attn.bind(tape, &join(prefix, "attn"), reg),
            score_w: reg.bind(tape, join(prefix, "score_w"), &self.score_w),
            score_b: reg.bind(tape, join(prefix, "score_b"), &self.score_b),
        }
    }
}

impl ParamTensors for ExpertParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.forward.visit(&join(prefix, "fwd"), f);
        self.backward.visit(&join(prefix, "bwd"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        f(&join(prefix, "score_w"), &self.score_w);
        f(&join(prefix, "score_b"), &self.score_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.forward.visit_mut(&join(prefix, "fwd"), f);
        self.backward.visit_mut(&join(prefix, "bwd"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(&join(prefix, "score_w"), &mut self.score_w);
        f(&join(prefix, "score_b"), &mut self.score_b);
    }
}

/// The whole reasoning stage: the expert panel plus the feature mixer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmotionParams {
    pub experts: Vec<ExpertParams>,
    /// Maps the weighted concatenation of per-modality features to `d_f`.
    pub mlp_feature: Mlp,
}

pub struct EmotionVars {
    pub experts: Vec<ExpertVars>,
    pub mlp_feature: MlpVars,
}

impl EmotionParams {
    pub fn init(seed: u64, dim: usize, heads: usize, feature_dim: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(SeerError::Contract("expert panel is empty".to_string()));
        }
        let experts = (0..k)
            .map(|i| ExpertParams::init(seed, &format!("emotion.expert{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experts,
            mlp_feature: Mlp::init(
                seed,
                "emotion.mlp_feature",
                2 * dim,
                2 * feature_dim,
                feature_dim,
            ),
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> EmotionVars {
        EmotionVars {
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(i, e)| e.bind(tape, &join(prefix, &format!("expert{i}")), reg))
                .collect(),
            mlp_feature: self.mlp_feature.bind(tape, &join(prefix, "mlp_feature"), reg),
        }
    }
}

impl ParamTensors for EmotionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("expert{i}")), f);
        }
        self.mlp_feature.visit(&join(prefix, "mlp_feature"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expert{i}")), f);
        }
        self.mlp_feature.visit_mut(&join(prefix, "mlp_feature"), f);
    }
}

/// Per-sample result of the reasoning stage. Scores are positive-tone
/// probabilities; `estimate` is P(real) from the closed-form prior.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionVerdict {
    pub text_score: f64,
    pub caption_score: f64,
    pub mixed_score: f64,
    /// Mixed emotion feature, `1 x d_f`.
    pub feature: Array2<f64>,
    pub estimate: Option<f64>,
}

/// Run one recurrent direction over the valid positions of `seq`,
/// returning the hidden state rows aligned with the input (zeros at masked
/// positions).
fn lstm_direction(
    tape: &mut Tape,
    seq: &SeqVar,
    params: &LstmVars,
    hidden: usize,
    reverse: bool,
) -> Vec<Var> {
    let len = seq.mask.len();
    // one GEMM for every step's input projection
    let projected = tape.matmul(seq.var, params.w);
    let projected = tape.add_row(projected, params.b);
    let zero_row = tape.leaf(Array2::zeros((1, hidden)));
    let mut states = vec![zero_row; len];
    let mut h = zero_row;
    let mut c = zero_row;
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        if !seq.mask[t] {
            continue;
        }
        let x_t = tape.slice_rows(projected, t, 1);
        let rec = tape.matmul(h, params.u);
        let gates = tape.add(x_t, rec);
        c = tape.lstm_state(gates, c);
        h = tape.lstm_output(gates, c);
        states[t] = h;
    }
    states
}

/// One expert's evaluation of a sequence: bidirectional recurrent states
/// per position, refined by self-attention, pooled, and scored. Returns
/// the pooled feature (`1 x 2h`) and the positive-tone probability.
pub fn expert_score(tape: &mut Tape, seq: &SeqVar, expert: &ExpertVars) -> Result<(Var, Var)> {
    let hidden = tape.shape(expert.forward.u).0;
    let fwd = lstm_direction(tape, seq, &expert.forward, hidden, false);
    let bwd = lstm_direction(tape, seq, &expert.backward, hidden, true);
    let rows: Vec<Var> = fwd
        .iter()
        .zip(bwd.iter())
        .map(|(f, b)| tape.concat_cols(&[*f, *b]))
        .collect();
    let stacked = tape.concat_rows(&rows);
    let states = SeqVar {
        var: stacked,
        mask: seq.mask.clone(),
    };
    let refined = self_attention(tape, &states, &expert.attn)?;
    let feature = refined.pool(tape);
    let logits = tape.matmul(feature, expert.score_w);
    let logits = tape.add_row(logits, expert.score_b);
    let probs = tape.softmax_rows(logits, &[true, true]);
    let score = tape.slice_cols(probs, 1, 1);
    Ok((feature, score))
}

/// Mix two modality scores: `weight * text + (1 - weight) * caption`.
pub(crate) fn mix_scores(tape: &mut Tape, text: Var, caption: Var, weight: f64) -> Var {
    let t = tape.scale(text, weight);
    let c = tape.scale(caption, 1.0 - weight);
    tape.add(t, c)
}

fn mean_of(tape: &mut Tape, items: &[Var]) -> Var {
    let mut acc = items[0];
    for item in &items[1..] {
        acc = tape.add(acc, *item);
    }
    tape.scale(acc, 1.0 / items.len() as f64)
}

pub struct EmotionTrace {
    pub text_score: Var,
    pub caption_score: Var,
    pub mixed_score: Var,
    pub feature: Var,
}

/// Evaluate every expert on both modalities, average scores and features
/// in panel order, mix across modalities with `weight`, and produce the
/// mixed emotion feature.
pub fn aggregate_experts(
    tape: &mut Tape,
    text: &SeqVar,
    caption: &SeqVar,
    vars: &EmotionVars,
    weight: f64,
) -> Result<EmotionTrace> {
    if vars.experts.is_empty() {
        return Err(SeerError::Contract("expert panel is empty".to_string()));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(SeerError::Config(format!(
            "modality weight must be in [0, 1], got {weight}"
        )));
    }
    let mut text_scores = Vec::new();
    let mut text_feats = Vec::new();
    let mut cap_scores = Vec::new();
    let mut cap_feats = Vec::new();
    for expert in &vars.experts {
        let (tf, ts) = expert_score(tape, text, expert)?;
        text_feats.push(tf);
        text_scores.push(ts);
        let (cf, cs) = expert_score(tape, caption, expert)?;
        cap_feats.push(cf);
        cap_scores.push(cs);
    }
    let text_score = mean_of(tape, &text_scores);
    let caption_score = mean_of(tape, &cap_scores);
    let text_feat = mean_of(tape, &text_feats);
    let cap_feat = mean_of(tape, &cap_feats);
    let mixed_score = mix_scores(tape, text_score, caption_score, weight);
    let wt = tape.scale(text_feat, weight);
    let wc = tape.scale(cap_feat, 1.0 - weight);
    let cat = tape.concat_cols(&[wt, wc]);
    let feature = vars.mlp_feature.apply(tape, cat);
    Ok(EmotionTrace {
        text_score,
        caption_score,
        mixed_score,
        feature,
    })
}

/// The two coefficients of the authenticity estimate: P(real | positive
/// tone) and P(real | negative tone), given the priors that real/fake news
/// carries positive tone with probability `alpha`/`beta`.
pub fn bayes_coefficients(alpha: f64, beta: f64) -> Result<(f64, f64)> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(SeerError::Config(format!(
                "{name} must be in (0, 1), got {v}"
            )));
        }
    }
    if alpha + beta <= 0.0 || 2.0 - alpha - beta <= 0.0 {
        return Err(SeerError::Config(format!(
            "degenerate tone priors alpha={alpha}, beta={beta}"
        )));
    }
    Ok((alpha / (alpha + beta), (1.0 - alpha) / (2.0 - alpha - beta)))
}

/// Closed-form authenticity estimate: affine in the mixed tone score.
pub fn bayes_estimate(mixed_score: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mixed_score) {
        return Err(SeerError::Contract(format!(
            "mixed tone score must be in [0, 1], got {mixed_score}"
        )));
    }
    let (pos, neg) = bayes_coefficients(alpha, beta)?;
    Ok(pos * mixed_score + neg * (1.0 - mixed_score))
}

/// Tape version of [`bayes_estimate`], same operation order so values
/// agree bit for bit.
pub fn bayes_estimate_var(tape: &mut Tape, mixed_score: Var, alpha: f64, beta: f64) -> Result<Var> {
    let (pos, neg) = bayes_coefficients(alpha, beta)?;
    let t1 = tape.scale(mixed_score, pos);
    let flipped = tape.affine(mixed_score, -1.0, 1.0);
    let t2 = tape.scale(flipped, neg);
    Ok(tape.add(t1, t2))
}

/// Binary cross-entropy against a `{0, 1}` label, with the probability
/// clamped to `[PROB_EPS, 1 - PROB_EPS]` to keep the value finite.
pub fn emotion_loss(p_real: f64, label: u8) -> Result<f64> {
    if label > 1 {
        return Err(SeerError::Contract(format!(
            "label must be 0 or 1, got {label}"
        )));
    }
    let p = p_real.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(label);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// Tape version of [`emotion_loss`].
pub fn emotion_loss_var(tape: &mut Tape, p_real: Var, label: u8) -> Var {
    let y = f64::from(label);
    let p = tape.clamp(p_real, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.ln(p);
    let flipped = tape.affine(p, -1.0, 1.0);
    let lq = tape.ln(flipped);
    let t1 = tape.scale(lp, y);
    let t2 = tape.scale(lq, 1.0 - y);
    let sum = tape.add(t1, t2);
    tape.scale(sum, -1.0)
}

// ---- plain wrappers ----

pub fn expert_score_apply(
    seq: &SequenceTensor,
    params: &ExpertParams,
) -> Result<(Array2<f64>, f64)> {
    let mut tape = Tape::new();
    let mut reg = Registry::new();
    let vars = params.bind(&mut tape, "expert", &mut reg);
    let sv = seq.bind(&mut tape);
    let (feature, score) = expert_score(&mut tape, &sv, &vars)?;
    Ok((tape.value(feature).clone(), tape.scalar(score)))
}

/// Plain aggregation over a panel; `estimate` is left unset for the caller
/// to fill from [`bayes_estimate`].
pub fn aggregate_experts_apply(
    text: &SequenceTensor,
    caption: &SequenceTensor,
    params: &EmotionParams,
    weight: f64,
) -> Result<EmotionVerdict> {
    let mut tape = Tape::new();
    let mut reg = Registry::new();
    let vars = params.bind(&mut tape, "emotion", &mut reg);
    let tv = text.bind(&mut tape);
    let cv = caption.bind(&mut tape);
    let trace = aggregate_experts(&mut tape, &tv, &cv, &vars, weight)?;
    Ok(EmotionVerdict {
        text_score: tape.scalar(trace.text_score),
        caption_score: tape.scalar(trace.caption_score),
        mixed_score: tape.scalar(trace.mixed_score),
        feature: tape.value(trace.feature).clone(),
        estimate: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::params::Gradients;
    use proptest::prelude::*;

    fn seq(seed: u64, len: usize, dim: usize, mask: Vec<bool>) -> SequenceTensor {
        let mut s = Stream::with_tag(seed, "emoseq");
        SequenceTensor::new(
            Array2::from_shape_fn((len, dim), |_| s.range(-1.0, 1.0)),
            mask,
        )
        .unwrap()
    }

    #[test]
    fn score_is_strictly_inside_unit_interval() {
        let params = ExpertParams::init(1, "e", 8, 2).unwrap();
        for seed in 0..5 {
            let s = seq(seed, 4, 8, vec![true, true, false, true]);
            let (feature, score) = expert_score_apply(&s, &params).unwrap();
            assert!(score > 0.0 && score < 1.0);
            assert_eq!(feature.dim(), (1, 8));
        }
    }

    #[test]
    fn zero_score_head_gives_even_odds() {
        let mut params = ExpertParams::init(2, "e", 8, 2).unwrap();
        params.score_w.fill(0.0);
        params.score_b.fill(0.0);
        let s = seq(3, 4, 8, vec![true; 4]);
        let (_, score) = expert_score_apply(&s, &params).unwrap();
        assert_eq!(score, 0.5);
    }

    #[test]
    fn expert_gradients_match_finite_differences() {
        // length-4, dim-8 instance through the whole expert
        let mut params = ExpertParams::init(4, "e", 8, 2).unwrap();
        let s = seq(5, 4, 8, vec![true, true, true, false]);
        let mut ps = Stream::with_tag(6, "probe");
        let probe = Array2::from_shape_fn((1, 1), |_| ps.range(0.5, 1.5));
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let sv = s.bind(&mut tape);
                let (feature, score) = expert_score(&mut tape, &sv, &vars)?;
                // touch both outputs so every parameter is exercised
                let fsum = tape.sum_all(feature);
                let fsum = tape.scale(fsum, 0.25);
                let mixed = tape.add(score, fsum);
                let loss = tape.probe_sum(mixed, &probe);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            1e-3,
            1e-4,
        )
        .unwrap();
        for r in &reports {
            assert!(r.pass, "{} rel err {}", r.param, r.max_rel_error);
        }
    }

    #[test]
    fn full_weight_ignores_caption_bit_for_bit() {
        let params = EmotionParams::init(7, 8, 2, 8, 2).unwrap();
        let text = seq(8, 4, 8, vec![true; 4]);
        let cap_a = seq(9, 3, 8, vec![true; 3]);
        let cap_b = seq(10, 3, 8, vec![true; 3]);
        let va = aggregate_experts_apply(&text, &cap_a, &params, 1.0).unwrap();
        let vb = aggregate_experts_apply(&text, &cap_b, &params, 1.0).unwrap();
        assert_eq!(va.mixed_score.to_bits(), vb.mixed_score.to_bits());
        // and symmetrically for weight 0
        let wa = aggregate_experts_apply(&cap_a, &text, &params, 0.0).unwrap();
        let wb = aggregate_experts_apply(&cap_b, &text, &params, 0.0).unwrap();
        assert_eq!(wa.mixed_score.to_bits(), wb.mixed_score.to_bits());
    }

    #[test]
    fn mixing_matches_hand_arithmetic() {
        let mut tape = Tape::new();
        let t = tape.leaf(Array2::from_elem((1, 1), 0.8));
        let c = tape.leaf(Array2::from_elem((1, 1), 0.4));
        let m = mix_scores(&mut tape, t, c, 0.75);
        assert!((tape.scalar(m) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn identical_experts_aggregate_to_single_expert() {
        let single = EmotionParams::init(11, 8, 2, 8, 1).unwrap();
        let mut panel = single.clone();
        panel.experts = vec![single.experts[0].clone(); 3];
        let text = seq(12, 4, 8, vec![true; 4]);
        let cap = seq(13, 3, 8, vec![true; 3]);
        let one = aggregate_experts_apply(&text, &cap, &single, 0.6).unwrap();
        let many = aggregate_experts_apply(&text, &cap, &panel, 0.6).unwrap();
        assert!((one.mixed_score - many.mixed_score).abs() < 1e-13);
        for (a, b) in one.feature.iter().zip(many.feature.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn panel_order_does_not_matter() {
        let params = EmotionParams::init(14, 8, 2, 8, 3).unwrap();
        let mut shuffled = params.clone();
        shuffled.experts.rotate_left(1);
        let text = seq(15, 4, 8, vec![true; 4]);
        let cap = seq(16, 3, 8, vec![true; 3]);
        let a = aggregate_experts_apply(&text, &cap, &params, 0.3).unwrap();
        let b = aggregate_experts_apply(&text, &cap, &shuffled, 0.3).unwrap();
        assert!((a.mixed_score - b.mixed_score).abs() < 1e-12);
        assert!((a.text_score - b.text_score).abs() < 1e-12);
    }

    #[test]
    fn empty_panel_is_rejected() {
        let mut params = EmotionParams::init(17, 8, 2, 8, 1).unwrap();
        params.experts.clear();
        let text = seq(18, 4, 8, vec![true; 4]);
        let err = aggregate_experts_apply(&text, &text, &params, 0.5).unwrap_err();
        assert!(matches!(err, SeerError::Contract(_)));
    }

    #[test]
    fn symmetric_priors_make_tone_uninformative() {
        for g in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let est = bayes_estimate(g, 0.5, 0.5).unwrap();
            assert!((est - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_settings_match_hand_arithmetic() {
        // first dataset setting: coefficients 0.6 and 0.44
        let (pos, neg) = bayes_coefficients(0.45, 0.3).unwrap();
        assert!((pos - 0.6).abs() < 1e-12);
        assert!((neg - 0.44).abs() < 1e-12);
        assert!((bayes_estimate(1.0, 0.45, 0.3).unwrap() - 0.6).abs() < 1e-12);
        // second dataset setting: 0.35 / 1.05 at zero tone
        let est = bayes_estimate(0.0, 0.65, 0.3).unwrap();
        assert!((est - 0.35 / 1.05).abs() < 1e-12);
        assert!((est - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn estimate_is_monotone_for_both_settings() {
        for (alpha, beta) in [(0.45, 0.3), (0.65, 0.3)] {
            let (pos, neg) = bayes_coefficients(alpha, beta).unwrap();
            assert!(pos > neg);
            let mut last = -1.0;
            for i in 0..=10 {
                let g = i as f64 / 10.0;
                let est = bayes_estimate(g, alpha, beta).unwrap();
                assert!(est > last);
                last = est;
            }
        }
    }

    #[test]
    fn invalid_priors_are_config_errors() {
        assert!(matches!(
            bayes_estimate(0.5, 0.0, 0.3),
            Err(SeerError::Config(_))
        ));
        assert!(matches!(
            bayes_estimate(0.5, 0.45, 1.0),
            Err(SeerError::Config(_))
        ));
        assert!(matches!(
            bayes_estimate(1.5, 0.45, 0.3),
            Err(SeerError::Contract(_))
        ));
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        assert!((emotion_loss(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((emotion_loss(0.5, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((emotion_loss(0.6, 1).unwrap() - 0.5108256237659907).abs() < 1e-12);
    }

    #[test]
    fn extreme_probabilities_stay_finite() {
        assert!(emotion_loss(0.0, 1).unwrap().is_finite());
        assert!(emotion_loss(1.0, 0).unwrap().is_finite());
    }

    #[test]
    fn tape_and_plain_losses_agree() {
        for (p, label) in [(0.31, 1u8), (0.77, 0u8), (0.5, 1u8)] {
            let plain = emotion_loss(p, label).unwrap();
            let mut tape = Tape::new();
            let pv = tape.leaf(Array2::from_elem((1, 1), p));
            let lv = emotion_loss_var(&mut tape, pv, label);
            assert_eq!(tape.scalar(lv).to_bits(), plain.to_bits());
        }
    }

    #[test]
    fn bayes_tape_and_plain_agree() {
        for g in [0.0, 0.25, 0.66, 1.0] {
            let plain = bayes_estimate(g, 0.45, 0.3).unwrap();
            let mut tape = Tape::new();
            let gv = tape.leaf(Array2::from_elem((1, 1), g));
            let ev = bayes_estimate_var(&mut tape, gv, 0.45, 0.3).unwrap();
            assert_eq!(tape.scalar(ev).to_bits(), plain.to_bits());
        }
    }

    #[test]
    fn reasoning_chain_matches_finite_differences() {
        // loss(bayes(aggregate(params))) against finite differences on a
        // tiny panel
        let mut params = EmotionParams::init(19, 8, 2, 8, 1).unwrap();
        let text = seq(20, 3, 8, vec![true; 3]);
        let cap = seq(21, 3, 8, vec![true, false, true]);
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let tv = text.bind(&mut tape);
                let cv = cap.bind(&mut tape);
                let trace = aggregate_experts(&mut tape, &tv, &cv, &vars, 0.75)?;
                let estimate = bayes_estimate_var(&mut tape, trace.mixed_score, 0.45, 0.3)?;
                let bce = emotion_loss_var(&mut tape, estimate, 1);
                // fold in the feature so the mixer is exercised too
                let fsum = tape.sum_all(trace.feature);
                let scaled = tape.scale(fsum, 0.05);
                let loss = tape.add(bce, scaled);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            1e-3,
            1e-4,
        )
        .unwrap();
        for r in &reports {
            assert!(r.pass, "{} rel err {}", r.param, r.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(p in 0.0f64..=1.0, label in 0u8..=1) {
            prop_assert!(emotion_loss(p, label).unwrap() >= 0.0);
        }

        #[test]
        fn estimate_stays_between_coefficients(
            g in 0.0f64..=1.0,
            alpha in 0.01f64..0.99,
            beta in 0.01f64..0.99,
        ) {
            let (pos, neg) = bayes_coefficients(alpha, beta).unwrap();
            let est = bayes_estimate(g, alpha, beta).unwrap();
            let lo = pos.min(neg) - 1e-12;
            let hi = pos.max(neg) + 1e-12;
            prop_assert!(est >= lo && est <= hi);
        }

        #[test]
        fn mixed_score_is_convex_combination(
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
            w in 0.0f64..=1.0,
        ) {
            let mut tape = Tape::new();
            let av = tape.leaf(Array2::from_elem((1, 1), a));
            let bv = tape.leaf(Array2::from_elem((1, 1), b));
            let m = mix_scores(&mut tape, av, bv, w);
            let mixed = tape.scalar(m);
            prop_assert!(mixed >= a.min(b) - 1e-12 && mixed <= a.max(b) + 1e-12);
        }
    }
}
