//! Bundled finite-difference verification of every trainable module:
//! encoder layer, co-attention, the fusion pipeline, a single expert, the
//! reasoning chain (aggregation, closed-form estimate, loss), the
//! detector, and the fully assembled model.

use ndarray::Array2;

use crate::attention::{co_attention, encoder_layer, AttentionParams, SequenceTensor};
use crate::detector::{classify, DetectorParams};
use crate::emotion::{
    aggregate_experts, bayes_estimate_var, emotion_loss_var, expert_score, EmotionParams,
    ExpertParams,
};
use crate::encoders::{EmbeddingBundle, NewsItem, StubEncoder};
use crate::error::{Result, SeerError};
use crate::fusion::{cosine, enhance_pairwise, enhance_unimodal, fuse, CoAttentionPair, FusionParams};
use crate::harness::HyperParams;
use crate::model::SeerModel;
use crate::numerics::rng::Stream;
use crate::numerics::tape::Tape;
use crate::numerics::{grad_check, GradCheckReport};
use crate::params::{Gradients, Registry};

fn random_seq(seed: u64, tag: &str, len: usize, dim: usize, mask: Vec<bool>) -> SequenceTensor {
    let mut s = Stream::with_tag(seed, tag);
    SequenceTensor::new(
        Array2::from_shape_fn((len, dim), |_| s.range(-1.0, 1.0)),
        mask,
    )
    .expect("valid test sequence")
}

fn probe(seed: u64, tag: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut s = Stream::with_tag(seed, tag);
    Array2::from_shape_fn((rows, cols), |_| s.range(-1.0, 1.0))
}

fn toy_hp(dim: usize, heads: usize, seed: u64) -> Result<HyperParams> {
    if dim < 4 || dim % 2 != 0 {
        return Err(SeerError::Config(format!(
            "verification dim must be an even number of at least 4, got {dim}"
        )));
    }
    let hp = HyperParams {
        d: dim,
        d_c: dim / 2,
        d_f: dim,
        heads,
        k_experts: 1,
        m_len: 4,
        z_len: 4,
        n_regions: 3,
        region_dim: 2,
        vocab_size: 64,
        seed,
        ..Default::default()
    };
    hp.validate()?;
    Ok(hp)
}

fn toy_bundle(hp: &HyperParams) -> Result<EmbeddingBundle> {
    let encoder = StubEncoder::new(hp)?;
    let mut s = Stream::with_tag(hp.seed, "verify.regions");
    let item = NewsItem {
        id: "verify".to_string(),
        text_tokens: vec![3, 9, 14],
        caption_tokens: vec![5, 21, 8],
        image_regions: Array2::from_shape_fn((hp.n_regions, hp.region_dim), |_| {
            s.range(-1.0, 1.0)
        }),
        label: 1,
        split: None,
        embedding_ref: None,
    };
    encoder.encode(&item)
}

fn prefixed(prefix: &str, reports: Vec<GradCheckReport>) -> Vec<GradCheckReport> {
    reports
        .into_iter()
        .map(|r| GradCheckReport {
            param: format!("{prefix}.{}", r.param),
            ..r
        })
        .collect()
}

/// Run every module-level gradient check at the given size and collect the
/// per-parameter reports under module-name prefixes.
pub fn gradient_suite(
    dim: usize,
    heads: usize,
    seed: u64,
    epsilon: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>> {
    let hp = toy_hp(dim, heads, seed)?;
    let mut all = Vec::new();

    // encoder layer on a 3 x dim primary with a masked position
    {
        let mut params = AttentionParams::init(seed, "v.enc", dim, heads)?;
        let primary = random_seq(seed, "v.enc.p", 3, dim, vec![true, true, false]);
        let context = random_seq(seed, "v.enc.c", 4, dim, vec![true, false, true, true]);
        let pr = probe(seed, "v.enc.probe", 3, dim);
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let pv = primary.bind(&mut tape);
                let cv = context.bind(&mut tape);
                let out = encoder_layer(&mut tape, &pv, &cv, &vars)?;
                let loss = tape.probe_sum(out.var, &pr);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("encoder_layer", reports));
    }

    // co-attention pair, both outputs in the loss
    {
        let mut params = CoAttentionPair::init(seed, "v.co", dim, heads)?;
        let a = random_seq(seed, "v.co.a", 3, dim, vec![true; 3]);
        let b = random_seq(seed, "v.co.b", 4, dim, vec![true, true, true, false]);
        let pa = probe(seed, "v.co.pa", 3, dim);
        let pb = probe(seed, "v.co.pb", 4, dim);
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let av = a.bind(&mut tape);
                let bv = b.bind(&mut tape);
                let (ae, be) = co_attention(&mut tape, &av, &bv, &vars.ab, &vars.ba)?;
                let la = tape.probe_sum(ae.var, &pa);
                let lb = tape.probe_sum(be.var, &pb);
                let loss = tape.add(la, lb);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("co_attention", reports));
    }

    // the whole semantic stage: pairwise enhancement, gated fusion,
    // unimodal enhancement
    {
        let mut params = FusionParams::init(seed, &hp)?;
        let bundle = toy_bundle(&hp)?;
        let gate = cosine(&bundle.clip_text, &bundle.clip_image)?;
        let pf = probe(seed, "v.fus.f", 1, hp.d_f);
        let pt = probe(seed, "v.fus.t", 1, hp.d_f);
        let pv = probe(seed, "v.fus.v", 1, hp.d_f);
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let t = bundle.text_seq.bind(&mut tape);
                let v = bundle.image_seq.bind(&mut tape);
                let c = bundle.caption_seq.bind(&mut tape);
                let ct = tape.leaf(bundle.clip_text.clone());
                let ci = tape.leaf(bundle.clip_image.clone());
                let (ht, hv, hc) = enhance_pairwise(&mut tape, &t, &v, &c, &vars)?;
                let fused = fuse(&mut tape, ht, hv, hc, ct, ci, gate, &vars);
                let (te, ie) = enhance_unimodal(&mut tape, &t, &v, ct, ci, &vars, false)?;
                let lf = tape.probe_sum(fused, &pf);
                let lt = tape.probe_sum(te, &pt);
                let lv = tape.probe_sum(ie, &pv);
                let partial = tape.add(lf, lt);
                let loss = tape.add(partial, lv);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("fusion_pipeline", reports));
    }

    // one expert, feature and score both exercised
    {
        let mut params = ExpertParams::init(seed, "v.exp", dim, heads)?;
        let s = random_seq(seed, "v.exp.s", 4, dim, vec![true, true, true, false]);
        let pr = probe(seed, "v.exp.probe", 1, dim);
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let sv = s.bind(&mut tape);
                let (feature, score) = expert_score(&mut tape, &sv, &vars)?;
                let lf = tape.probe_sum(feature, &pr);
                let ls = tape.scale(score, 2.0);
                let loss = tape.add(lf, ls);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("expert", reports));
    }

    // aggregation -> closed-form estimate -> cross-entropy
    {
        let mut params = EmotionParams::init(seed, dim, heads, dim, 1)?;
        let text = random_seq(seed, "v.bayes.t", 3, dim, vec![true; 3]);
        let caption = random_seq(seed, "v.bayes.c", 3, dim, vec![true, false, true]);
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let tv = text.bind(&mut tape);
                let cv = caption.bind(&mut tape);
                let trace = aggregate_experts(&mut tape, &tv, &cv, &vars, 0.75)?;
                let estimate = bayes_estimate_var(&mut tape, trace.mixed_score, 0.45, 0.3)?;
                let bce = emotion_loss_var(&mut tape, estimate, 1);
                let fsum = tape.sum_all(trace.feature);
                let scaled = tape.scale(fsum, 0.05);
                let loss = tape.add(bce, scaled);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("reasoning_chain", reports));
    }

    // detector head on fixed random features, through the total loss
    {
        let mut params = DetectorParams::init(seed, dim);
        let feats: Vec<Array2<f64>> = (0..4)
            .map(|i| probe(seed, &format!("v.det.f{i}"), 1, dim))
            .collect();
        let reports = grad_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let mut reg = Registry::new();
                let vars = p.bind(&mut tape, "", &mut reg);
                let t = tape.leaf(feats[0].clone());
                let v = tape.leaf(feats[1].clone());
                let e = tape.leaf(feats[2].clone());
                let m = tape.leaf(feats[3].clone());
                let trace = classify(&mut tape, t, v, e, m, &vars)?;
                let loss = emotion_loss_var(&mut tape, trace.p_real, 1);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("detector", reports));
    }

    // the fully assembled model through the joint loss
    {
        let model = SeerModel::init(&hp)?;
        let bundle = toy_bundle(&hp)?;
        let mut params = model.params.clone();
        let reports = grad_check(
            &mut params,
            |p| {
                let probe_model = SeerModel {
                    hp: hp.clone(),
                    params: p.clone(),
                };
                let mut tape = Tape::new();
                let (vars, reg) = probe_model.bind(&mut tape);
                let trace = probe_model.forward_sample(&mut tape, &vars, &bundle)?;
                let loss = probe_model.loss_sample(&mut tape, &trace, 1);
                let value = tape.scalar(loss);
                tape.backward(loss);
                Ok((value, Gradients::from_tape(&mut tape, &reg)))
            },
            epsilon,
            tol,
        )?;
        all.extend(prefixed("full_model", reports));
    }

    Ok(all)
}
