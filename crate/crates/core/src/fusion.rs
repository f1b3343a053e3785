//! Multimodal semantic enhancement: pairwise co-attention over text,
//! image and caption, three fusion branches mapped to a common space, a
//! cosine similarity gate on the fused feature, and self-attention based
//! unimodal enhancement.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{co_attention, self_attention, AttentionParams, AttentionVars, SeqVar};
use crate::encoders::EmbeddingBundle;
use crate::error::{Result, SeerError};
use crate::harness::HyperParams;
use crate::numerics::tape::{Tape, Var};
use crate::params::{join, Dense, DenseVars, Mlp, MlpVars, ParamTensors, Registry};

/// The four classifier inputs produced by the semantic stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBundle {
    /// Enhanced text feature, `1 x d_f`.
    pub text_enhanced: Array2<f64>,
    /// Enhanced image feature, `1 x d_f`.
    pub image_enhanced: Array2<f64>,
    /// Gated fused multimodal feature, `1 x d_f`.
    pub fused: Array2<f64>,
    /// Cosine similarity of the aligned-space vectors, in `[-1, 1]`.
    pub similarity: f64,
}

/// A co-attention block: two encoder layers with independent parameters.
/// `ab` enhances the first operand using the second as context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoAttentionPair {
    pub ab: AttentionParams,
    pub ba: AttentionParams,
}

pub struct CoAttentionPairVars {
    pub ab: AttentionVars,
    pub ba: AttentionVars,
}

impl CoAttentionPair {
    pub fn init(seed: u64, tag: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ab: AttentionParams::init(seed, &format!("{tag}.ab"), dim, heads)?,
            ba: AttentionParams::init(seed, &format!("{tag}.ba"), dim, heads)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> CoAttentionPairVars {
        CoAttentionPairVars {
            ab: self.ab.bind(tape, &join(prefix, "ab"), reg),
            ba: self.ba.bind(tape, &join(prefix, "ba"), reg),
        }
    }
}

impl ParamTensors for CoAttentionPair {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.ab.visit(&join(prefix, "ab"), f);
        self.ba.visit(&join(prefix, "ba"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.ab.visit_mut(&join(prefix, "ab"), f);
        self.ba.visit_mut(&join(prefix, "ba"), f);
    }
}

/// All parameters of the semantic-enhancement stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParams {
    pub co_text_image: CoAttentionPair,
    pub co_text_caption: CoAttentionPair,
    pub co_image_caption: CoAttentionPair,
    pub sa_text: AttentionParams,
    pub sa_image: AttentionParams,
    /// Branch over the co-attended text/image features.
    pub sigma_fused: Dense,
    /// Branch over the aligned-space text/image vectors.
    pub sigma_aligned: Dense,
    /// Branch over the aligned text vector and the enhanced caption.
    pub sigma_caption: Dense,
    pub mlp_fused: Mlp,
    pub mlp_text: Mlp,
    pub mlp_image: Mlp,
}

pub struct FusionVars {
    pub co_text_image: CoAttentionPairVars,
    pub co_text_caption: CoAttentionPairVars,
    pub co_image_caption: CoAttentionPairVars,
    pub sa_text: AttentionVars,
    pub sa_image: AttentionVars,
    pub sigma_fused: DenseVars,
    pub sigma_aligned: DenseVars,
    pub sigma_caption: DenseVars,
    pub mlp_fused: MlpVars,
    pub mlp_text: MlpVars,
    pub mlp_image: MlpVars,
}

impl FusionParams {
    pub fn init(seed: u64, hp: &HyperParams) -> Result<Self> {
        let (d, dc, df, heads) = (hp.d, hp.d_c, hp.d_f, hp.heads);
        Ok(Self {
            co_text_image: CoAttentionPair::init(seed, "fusion.co_ti", d, heads)?,
            co_text_caption: CoAttentionPair::init(seed, "fusion.co_tc", d, heads)?,
            co_image_caption: CoAttentionPair::init(seed, "fusion.co_ic", d, heads)?,
            sa_text: AttentionParams::init(seed, "fusion.sa_text", d, heads)?,
            sa_image: AttentionParams::init(seed, "fusion.sa_image", d, heads)?,
            sigma_fused: Dense::init(seed, "fusion.sigma_fused", 2 * d, df),
            sigma_aligned: Dense::init(seed, "fusion.sigma_aligned", 2 * dc, df),
            sigma_caption: Dense::init(seed, "fusion.sigma_caption", dc + d, df),
            mlp_fused: Mlp::init(seed, "fusion.mlp_fused", 3 * df, 2 * df, df),
            mlp_text: Mlp::init(seed, "fusion.mlp_text", dc + d, 2 * df, df),
            mlp_image: Mlp::init(seed, "fusion.mlp_image", dc + d, 2 * df, df),
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> FusionVars {
        FusionVars {
            co_text_image: self.co_text_image.bind(tape, &join(prefix, "co_ti"), reg),
            co_text_caption: self.co_text_caption.bind(tape, &join(prefix, "co_tc"), reg),
            co_image_caption: self.co_image_caption.bind(tape, &join(prefix, "co_ic"), reg),
            sa_text: self.sa_text.bind(tape, &join(prefix, "sa_text"), reg),
            sa_image: self.sa_image.bind(tape, &join(prefix, "sa_image"), reg),
            sigma_fused: self.sigma_fused.bind(tape, &join(prefix, "sigma_fused"), reg),
            sigma_aligned: self
                .sigma_aligned
                .bind(tape, &join(prefix, "sigma_aligned"), reg),
            sigma_caption: self
                .sigma_caption
                .bind(tape, &join(prefix, "sigma_caption"), reg),
            mlp_fused: self.mlp_fused.bind(tape, &join(prefix, "mlp_fused"), reg),
            mlp_text: self.mlp_text.bind(tape, &join(prefix, "mlp_text"), reg),
            mlp_image: self.mlp_image.bind(tape, &join(prefix, "mlp_image"), reg),
        }
    }
}

impl ParamTensors for FusionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.co_text_image.visit(&join(prefix, "co_ti"), f);
        self.co_text_caption.visit(&join(prefix, "co_tc"), f);
        self.co_image_caption.visit(&join(prefix, "co_ic"), f);
        self.sa_text.visit(&join(prefix, "sa_text"), f);
        self.sa_image.visit(&join(prefix, "sa_image"), f);
        self.sigma_fused.visit(&join(prefix, "sigma_fused"), f);
        self.sigma_aligned.visit(&join(prefix, "sigma_aligned"), f);
        self.sigma_caption.visit(&join(prefix, "sigma_caption"), f);
        self.mlp_fused.visit(&join(prefix, "mlp_fused"), f);
        self.mlp_text.visit(&join(prefix, "mlp_text"), f);
        self.mlp_image.visit(&join(prefix, "mlp_image"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.co_text_image.visit_mut(&join(prefix, "co_ti"), f);
        self.co_text_caption.visit_mut(&join(prefix, "co_tc"), f);
        self.co_image_caption.visit_mut(&join(prefix, "co_ic"), f);
        self.sa_text.visit_mut(&join(prefix, "sa_text"), f);
        self.sa_image.visit_mut(&join(prefix, "sa_image"), f);
        self.sigma_fused.visit_mut(&join(prefix, "sigma_fused"), f);
        self.sigma_aligned.visit_mut(&join(prefix, "sigma_aligned"), f);
        self.sigma_caption.visit_mut(&join(prefix, "sigma_caption"), f);
        self.mlp_fused.visit_mut(&join(prefix, "mlp_fused"), f);
        self.mlp_text.visit_mut(&join(prefix, "mlp_text"), f);
        self.mlp_image.visit_mut(&join(prefix, "mlp_image"), f);
    }
}

/// Cosine similarity of two row vectors, clamped to `[-1, 1]` against
/// rounding. Zero-norm operands are a contract violation.
pub fn cosine(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(SeerError::Shape {
            op: "cosine",
            detail: format!("{:?} vs {:?}", a.dim(), b.dim()),
        });
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(SeerError::Contract(
            "cosine of a zero-norm vector".to_string(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Run the three co-attention blocks, average each modality's two enhanced
/// sequences, and mean-pool over valid positions. Returns pooled
/// `(text, image, caption)` rows.
pub fn enhance_pairwise(
    tape: &mut Tape,
    text: &SeqVar,
    image: &SeqVar,
    caption: &SeqVar,
    vars: &FusionVars,
) -> Result<(Var, Var, Var)> {
    let (t_by_v, v_by_t) = co_attention(
        tape,
        text,
        image,
        &vars.co_text_image.ab,
        &vars.co_text_image.ba,
    )?;
    let (t_by_p, p_by_t) = co_attention(
        tape,
        text,
        caption,
        &vars.co_text_caption.ab,
        &vars.co_text_caption.ba,
    )?;
    let (v_by_p, p_by_v) = co_attention(
        tape,
        image,
        caption,
        &vars.co_image_caption.ab,
        &vars.co_image_caption.ba,
    )?;
    let average = |tape: &mut Tape, a: &SeqVar, b: &SeqVar| -> SeqVar {
        let sum = tape.add(a.var, b.var);
        SeqVar {
            var: tape.scale(sum, 0.5),
            mask: a.mask.clone(),
        }
    };
    let text_avg = average(tape, &t_by_v, &t_by_p);
    let image_avg = average(tape, &v_by_t, &v_by_p);
    let caption_avg = average(tape, &p_by_t, &p_by_v);
    Ok((
        text_avg.pool(tape),
        image_avg.pool(tape),
        caption_avg.pool(tape),
    ))
}

/// The three fusion branches and the gated fused feature. `gate` is the
/// precomputed similarity scalar (a constant with respect to training).
pub fn fuse(
    tape: &mut Tape,
    pooled_text: Var,
    pooled_image: Var,
    pooled_caption: Var,
    clip_text: Var,
    clip_image: Var,
    gate: f64,
    vars: &FusionVars,
) -> Var {
    let tv = tape.concat_cols(&[pooled_text, pooled_image]);
    let b1 = vars.sigma_fused.apply(tape, tv);
    let branch_fused = tape.gelu(b1);
    let cc = tape.concat_cols(&[clip_text, clip_image]);
    let b2 = vars.sigma_aligned.apply(tape, cc);
    let branch_aligned = tape.gelu(b2);
    let cp = tape.concat_cols(&[clip_text, pooled_caption]);
    let b3 = vars.sigma_caption.apply(tape, cp);
    let branch_caption = tape.gelu(b3);
    let all = tape.concat_cols(&[branch_fused, branch_aligned, branch_caption]);
    let mixed = vars.mlp_fused.apply(tape, all);
    tape.scale(mixed, gate)
}

/// Self-attention (or the identity when `skip_self_attention`) over each
/// unimodal sequence, pooled and fused with the aligned-space vector.
pub fn enhance_unimodal(
    tape: &mut Tape,
    text: &SeqVar,
    image: &SeqVar,
    clip_text: Var,
    clip_image: Var,
    vars: &FusionVars,
    skip_self_attention: bool,
) -> Result<(Var, Var)> {
    let text_pooled = if skip_self_attention {
        text.pool(tape)
    } else {
        self_attention(tape, text, &vars.sa_text)?.pool(tape)
    };
    let image_pooled = if skip_self_attention {
        image.pool(tape)
    } else {
        self_attention(tape, image, &vars.sa_image)?.pool(tape)
    };
    let t_in = tape.concat_cols(&[clip_text, text_pooled]);
    let text_enhanced = vars.mlp_text.apply(tape, t_in);
    let v_in = tape.concat_cols(&[clip_image, image_pooled]);
    let image_enhanced = vars.mlp_image.apply(tape, v_in);
    Ok((text_enhanced, image_enhanced))
}

// ---- plain wrappers ----

fn with_vars<T>(
    params: &FusionParams,
    f: impl FnOnce(&mut Tape, &FusionVars) -> Result<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let mut reg = Registry::new();
    let vars = params.bind(&mut tape, "fusion", &mut reg);
    f(&mut tape, &vars)
}

pub fn enhance_pairwise_apply(
    bundle: &EmbeddingBundle,
    params: &FusionParams,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    with_vars(params, |tape, vars| {
        let t = bundle.text_seq.bind(tape);
        let v = bundle.image_seq.bind(tape);
        let p = bundle.caption_seq.bind(tape);
        let (ht, hv, hp_) = enhance_pairwise(tape, &t, &v, &p, vars)?;
        Ok((
            tape.value(ht).clone(),
            tape.value(hv).clone(),
            tape.value(hp_).clone(),
        ))
    })
}

/// Fusion branch on plain arrays: computes the gate from the bundle's
/// aligned-space vectors, then the gated fused feature.
pub fn fuse_apply(
    bundle: &EmbeddingBundle,
    pooled_text: &Array2<f64>,
    pooled_image: &Array2<f64>,
    pooled_caption: &Array2<f64>,
    params: &FusionParams,
    rescale_gate: bool,
) -> Result<(Array2<f64>, f64)> {
    let similarity = cosine(&bundle.clip_text, &bundle.clip_image)?;
    let gate = if rescale_gate {
        (similarity + 1.0) / 2.0
    } else {
        similarity
    };
    let fused = with_vars(params, |tape, vars| {
        let ht = tape.leaf(pooled_text.clone());
        let hv = tape.leaf(pooled_image.clone());
        let hp_ = tape.leaf(pooled_caption.clone());
        let ct = tape.leaf(bundle.clip_text.clone());
        let ci = tape.leaf(bundle.clip_image.clone());
        let out = fuse(tape, ht, hv, hp_, ct, ci, gate, vars);
        Ok(tape.value(out).clone())
    })?;
    Ok((fused, similarity))
}

pub fn enhance_unimodal_apply(
    bundle: &EmbeddingBundle,
    params: &FusionParams,
    skip_self_attention: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    with_vars(params, |tape, vars| {
        let t = bundle.text_seq.bind(tape);
        let v = bundle.image_seq.bind(tape);
        let ct = tape.leaf(bundle.clip_text.clone());
        let ci = tape.leaf(bundle.clip_image.clone());
        let (te, ie) = enhance_unimodal(tape, &t, &v, ct, ci, vars, skip_self_attention)?;
        Ok((tape.value(te).clone(), tape.value(ie).clone()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::SequenceTensor;
    use crate::encoders::{NewsItem, StubEncoder};
    use crate::numerics::grad_check;
    use crate::numerics::rng::Stream;
    use crate::params::Gradients;

    fn tiny_hp() -> HyperParams {
        HyperParams {
            d: 8,
            d_c: 4,
            d_f: 8,
            heads: 2,
            m_len: 5,
            z_len: 4,
            n_regions: 3,
            region_dim: 2,
            vocab_size: 64,
            seed: 11,
            ..Default::default()
        }
    }

    fn bundle(hp: &HyperParams, id: &str, text: Vec<u32>, caption: Vec<u32>) -> EmbeddingBundle {
        let enc = StubEncoder::new(hp).unwrap();
        let mut s = Stream::with_tag(hp.seed, &format!("test.regions.{id}"));
        let item = NewsItem {
            id: id.to_string(),
            text_tokens: text,
            caption_tokens: caption,
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
    fn tied_parameters_and_identical_inputs_are_symmetric() {
        let hp = tiny_hp();
        let mut params = FusionParams::init(3, &hp).unwrap();
        // tie all six encoder layers
        let shared = params.co_text_image.ab.clone();
        params.co_text_image.ba = shared.clone();
        params.co_text_caption.ab = shared.clone();
        params.co_text_caption.ba = shared.clone();
        params.co_image_caption.ab = shared.clone();
        params.co_image_caption.ba = shared;

        let mut s = Stream::with_tag(1, "sym");
        let seq = SequenceTensor::full(Array2::from_shape_fn((4, hp.d), |_| s.range(-1.0, 1.0)))
            .unwrap();
        let b = EmbeddingBundle {
            text_seq: seq.clone(),
            image_seq: seq.clone(),
            caption_seq: seq,
            clip_text: Array2::ones((1, hp.d_c)),
            clip_image: Array2::ones((1, hp.d_c)),
        };
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        for (a, c) in ht.iter().zip(hv.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
        for (a, c) in ht.iter().zip(hp_.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_outputs_are_row_vectors() {
        let hp = tiny_hp();
        let params = FusionParams::init(4, &hp).unwrap();
        let b = bundle(&hp, "rows", vec![1, 2, 3], vec![4, 5]);
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        assert_eq!(ht.dim(), (1, hp.d));
        assert_eq!(hv.dim(), (1, hp.d));
        assert_eq!(hp_.dim(), (1, hp.d));
    }

    #[test]
    fn zero_attention_reduces_to_pooled_double_norm() {
        let hp = tiny_hp();
        let mut params = FusionParams::init(5, &hp).unwrap();
        let zero_out = |p: &mut AttentionParams| {
            for h in &mut p.heads {
                h.wq.fill(0.0);
                h.wk.fill(0.0);
                h.wv.fill(0.0);
            }
            p.wo.fill(0.0);
            p.ffn.hidden.w.fill(0.0);
            p.ffn.hidden.b.fill(0.0);
            p.ffn.out.w.fill(0.0);
            p.ffn.out.b.fill(0.0);
        };
        zero_out(&mut params.co_text_image.ab);
        zero_out(&mut params.co_text_image.ba);
        zero_out(&mut params.co_text_caption.ab);
        zero_out(&mut params.co_text_caption.ba);
        zero_out(&mut params.co_image_caption.ab);
        zero_out(&mut params.co_image_caption.ba);

        let b = bundle(&hp, "zero", vec![1, 2, 3], vec![4, 5]);
        let (ht, _, _) = enhance_pairwise_apply(&b, &params).unwrap();

        // reference: masked mean of LN(LN(text))
        let ln = |x: &Array2<f64>| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.mapv_inplace(|v| (v - mean) * inv);
            }
            out
        };
        let normed = ln(&ln(b.text_seq.data()));
        let valid: Vec<usize> = b
            .text_seq
            .mask()
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect();
        for c in 0..hp.d {
            let mean: f64 =
                valid.iter().map(|r| normed[[*r, c]]).sum::<f64>() / valid.len() as f64;
            assert!((ht[[0, c]] - mean).abs() < 1e-12, "col {c}");
        }
    }

    #[test]
    fn equal_aligned_vectors_leave_fusion_ungated() {
        let hp = tiny_hp();
        let params = FusionParams::init(6, &hp).unwrap();
        let mut b = bundle(&hp, "gate", vec![1, 2], vec![3]);
        b.clip_image = b.clip_text.clone();
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        let (fused, similarity) = fuse_apply(&b, &ht, &hv, &hp_, &params, false).unwrap();
        assert!((similarity - 1.0).abs() < 1e-12);
        assert!(fused.iter().all(|v| v.is_finite()));
        // gate of exactly 1 is a no-op: recompute with the gate hardwired
        let ungated = with_vars(&params, |tape, vars| {
            let t = tape.leaf(ht.clone());
            let v = tape.leaf(hv.clone());
            let p = tape.leaf(hp_.clone());
            let ct = tape.leaf(b.clip_text.clone());
            let ci = tape.leaf(b.clip_image.clone());
            let out = fuse(tape, t, v, p, ct, ci, 1.0, vars);
            Ok(tape.value(out).clone())
        })
        .unwrap();
        assert_eq!(fused, ungated);
    }

    #[test]
    fn orthogonal_aligned_vectors_zero_the_fusion() {
        let hp = tiny_hp();
        let params = FusionParams::init(7, &hp).unwrap();
        let mut b = bundle(&hp, "orth", vec![1, 2], vec![3]);
        let mut ct = Array2::zeros((1, hp.d_c));
        ct[[0, 0]] = 1.0;
        let mut ci = Array2::zeros((1, hp.d_c));
        ci[[0, 1]] = 1.0;
        b.clip_text = ct;
        b.clip_image = ci;
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        let (fused, similarity) = fuse_apply(&b, &ht, &hv, &hp_, &params, false).unwrap();
        assert_eq!(similarity, 0.0);
        assert!(fused.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opposite_aligned_vectors_flip_the_sign() {
        let hp = tiny_hp();
        let params = FusionParams::init(8, &hp).unwrap();
        let mut b = bundle(&hp, "anti", vec![1, 2], vec![3]);
        b.clip_image = b.clip_text.mapv(|v| -v);
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        let (fused, similarity) = fuse_apply(&b, &ht, &hv, &hp_, &params, false).unwrap();
        assert!((similarity + 1.0).abs() < 1e-12);
        let ungated = with_vars(&params, |tape, vars| {
            let t = tape.leaf(ht.clone());
            let v = tape.leaf(hv.clone());
            let p = tape.leaf(hp_.clone());
            let ct = tape.leaf(b.clip_text.clone());
            let ci = tape.leaf(b.clip_image.clone());
            let out = fuse(tape, t, v, p, ct, ci, 1.0, vars);
            Ok(tape.value(out).clone())
        })
        .unwrap();
        for (f, u) in fused.iter().zip(ungated.iter()) {
            assert!((f + u).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_norm_is_linear_in_the_gate() {
        let hp = tiny_hp();
        let params = FusionParams::init(9, &hp).unwrap();
        let b = bundle(&hp, "lin", vec![1, 2, 4], vec![3]);
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        let at_gate = |gate: f64| {
            with_vars(&params, |tape, vars| {
                let t = tape.leaf(ht.clone());
                let v = tape.leaf(hv.clone());
                let p = tape.leaf(hp_.clone());
                let ct = tape.leaf(b.clip_text.clone());
                let ci = tape.leaf(b.clip_image.clone());
                let out = fuse(tape, t, v, p, ct, ci, gate, vars);
                Ok(tape
                    .value(out)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt())
            })
            .unwrap()
        };
        let n1 = at_gate(0.3);
        let n2 = at_gate(0.6);
        assert!((n2 - 2.0 * n1).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_aligned_vector_is_rejected() {
        let hp = tiny_hp();
        let params = FusionParams::init(10, &hp).unwrap();
        let mut b = bundle(&hp, "zn", vec![1, 2], vec![3]);
        b.clip_image = Array2::zeros((1, hp.d_c));
        let (ht, hv, hp_) = enhance_pairwise_apply(&b, &params).unwrap();
        let err = fuse_apply(&b, &ht, &hv, &hp_, &params, false).unwrap_err();
        assert!(matches!(err, SeerError::Contract(_)));
    }

    #[test]
    fn unimodal_enhancement_separates_modalities() {
        let hp = tiny_hp();
        let params = FusionParams::init(11, &hp).unwrap();
        let a = bundle(&hp, "same-image", vec![1, 2, 3], vec![4]);
        let mut b = bundle(&hp, "same-image", vec![1, 2, 3], vec![4]);
        // same text, different image
        let mut s = Stream::with_tag(99, "other-image");
        let other =
            Array2::from_shape_fn((hp.n_regions, hp.d), |_| s.range(-1.0, 1.0));
        b.image_seq = SequenceTensor::full(other).unwrap();
        b.clip_image = {
            let enc_proj = b.clip_image.clone(); // keep dims; recompute roughly
            enc_proj
        };
        let (ta, va) = enhance_unimodal_apply(&a, &params, false).unwrap();
        let (tb, vb) = enhance_unimodal_apply(&b, &params, false).unwrap();
        assert_eq!(ta.dim(), (1, hp.d_f));
        assert_eq!(va.dim(), (1, hp.d_f));
        assert_eq!(ta, tb);
        assert_ne!(va, vb);
    }

    #[test]
    fn ablated_paths_keep_shapes() {
        let hp = tiny_hp();
        let params = FusionParams::init(12, &hp).unwrap();
        let b = bundle(&hp, "shapes", vec![1, 2], vec![3, 4]);
        // skip co-attention: raw pooled embeddings in place of the blocks
        let mut tape = Tape::new();
        let mut reg = Registry::new();
        let vars = params.bind(&mut tape, "f", &mut reg);
        let t = b.text_seq.bind(&mut tape);
        let v = b.image_seq.bind(&mut tape);
        let p = b.caption_seq.bind(&mut tape);
        let ht = t.pool(&mut tape);
        let hv = v.pool(&mut tape);
        let hpv = p.pool(&mut tape);
        let ct = tape.leaf(b.clip_text.clone());
        let ci = tape.leaf(b.clip_image.clone());
        let fused = fuse(&mut tape, ht, hv, hpv, ct, ci, 0.5, &vars);
        assert_eq!(tape.shape(fused), (1, hp.d_f));
        // skip self-attention
        let (te, ie) = enhance_unimodal_apply(&b, &params, true).unwrap();
        assert_eq!(te.dim(), (1, hp.d_f));
        assert_eq!(ie.dim(), (1, hp.d_f));
    }

    fn unimodal_loss(
        params: &FusionParams,
        b: &EmbeddingBundle,
        probe: &Array2<f64>,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let mut reg = Registry::new();
        let vars = params.bind(&mut tape, "", &mut reg);
        let t = b.text_seq.bind(&mut tape);
        let v = b.image_seq.bind(&mut tape);
        let ct = tape.leaf(b.clip_text.clone());
        let ci = tape.leaf(b.clip_image.clone());
        let (te, ie) = enhance_unimodal(&mut tape, &t, &v, ct, ci, &vars, false)?;
        let both = tape.concat_cols(&[te, ie]);
        let loss = tape.probe_sum(both, probe);
        let value = tape.scalar(loss);
        tape.backward(loss);
        Ok((value, Gradients::from_tape(&mut tape, &reg)))
    }

    #[test]
    fn unimodal_path_matches_finite_differences() {
        let hp = tiny_hp();
        let mut params = FusionParams::init(13, &hp).unwrap();
        let b = bundle(&hp, "fd", vec![1, 2, 3], vec![4, 5]);
        let mut s = Stream::with_tag(14, "probe");
        let probe = Array2::from_shape_fn((1, 2 * hp.d_f), |_| s.range(-1.0, 1.0));
        let reports = grad_check(
            &mut params,
            |p| unimodal_loss(p, &b, &probe),
            1e-3,
            1e-4,
        )
        .unwrap();
        // only the parameters on the unimodal path receive gradients; the
        // others must check out as exactly zero against finite differences
        for r in &reports {
            assert!(r.pass, "{} rel err {}", r.param, r.max_rel_error);
        }
    }
}
