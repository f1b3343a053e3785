//! Shared attention machinery: masked multihead attention, the
//! residual+norm+FFN encoder layer, co-attention pairs, and intra-modal
//! self-attention.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeerError};
use crate::numerics::rng::Stream;
use crate::numerics::tape::{Tape, Var};
use crate::params::{join, xavier, LayerNorm, LayerNormVars, Mlp, MlpVars, ParamTensors, Registry};

/// A `length x dim` activation sequence with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTensor {
    data: Array2<f64>,
    mask: Vec<bool>,
}

impl SequenceTensor {
    pub fn new(data: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(SeerError::Contract("empty sequence".to_string()));
        }
        if mask.len() != data.nrows() {
            return Err(SeerError::Shape {
                op: "sequence",
                detail: format!("mask length {} vs {} rows", mask.len(), data.nrows()),
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(SeerError::Contract(
                "sequence mask has no valid positions".to_string(),
            ));
        }
        Ok(Self { data, mask })
    }

    /// Sequence with every position valid.
    pub fn full(data: Array2<f64>) -> Result<Self> {
        let mask = vec![true; data.nrows()];
        Self::new(data, mask)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Bind onto a tape as a constant input.
    pub fn bind(&self, tape: &mut Tape) -> SeqVar {
        SeqVar {
            var: tape.leaf(self.data.clone()),
            mask: self.mask.clone(),
        }
    }
}

/// Tape-side sequence: a node handle plus the validity mask.
#[derive(Clone)]
pub struct SeqVar {
    pub var: Var,
    pub mask: Vec<bool>,
}

impl SeqVar {
    pub fn to_tensor(&self, tape: &Tape) -> SequenceTensor {
        SequenceTensor {
            data: tape.value(self.var).clone(),
            mask: self.mask.clone(),
        }
    }

    /// Masked mean over valid positions, `1 x d`.
    pub fn pool(&self, tape: &mut Tape) -> Var {
        tape.mean_rows(self.var, &self.mask)
    }
}

/// Per-head query/key/value projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadProjection {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Everything one encoder layer owns: head projections, output projection,
/// feed-forward block and the two normalizations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: Vec<HeadProjection>,
    pub wo: Array2<f64>,
    pub ffn: Mlp,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
}

pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

pub struct AttentionVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub ffn: MlpVars,
    pub norm_attn: LayerNormVars,
    pub norm_ffn: LayerNormVars,
    dim: usize,
    head_dim: usize,
}

impl AttentionParams {
    /// FFN hidden width is `4 * dim`; `heads` must divide `dim`.
    pub fn init(seed: u64, tag: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(SeerError::Config(format!(
                "head count {heads} must divide model dim {dim}"
            )));
        }
        let head_dim = dim / heads;
        let head_params = (0..heads)
            .map(|j| {
                let mut sq = Stream::with_tag(seed, &format!("{tag}.h{j}.wq"));
                let mut sk = Stream::with_tag(seed, &format!("{tag}.h{j}.wk"));
                let mut sv = Stream::with_tag(seed, &format!("{tag}.h{j}.wv"));
                HeadProjection {
                    wq: xavier(&mut sq, dim, head_dim),
                    wk: xavier(&mut sk, dim, head_dim),
                    wv: xavier(&mut sv, dim, head_dim),
                }
            })
            .collect();
        let mut so = Stream::with_tag(seed, &format!("{tag}.wo"));
        Ok(Self {
            heads: head_params,
            wo: xavier(&mut so, dim, dim),
            ffn: Mlp::init(seed, &format!("{tag}.ffn"), dim, 4 * dim, dim),
            norm_attn: LayerNorm::init(dim),
            norm_ffn: LayerNorm::init(dim),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.wo.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].wq.ncols()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> AttentionVars {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(j, h)| HeadVars {
                wq: reg.bind(tape, join(prefix, &format!("h{j}.wq")), &h.wq),
                wk: reg.bind(tape, join(prefix, &format!("h{j}.wk")), &h.wk),
                wv: reg.bind(tape, join(prefix, &format!("h{j}.wv")), &h.wv),
            })
            .collect();
        AttentionVars {
            heads,
            wo: reg.bind(tape, join(prefix, "wo"), &self.wo),
            ffn: self.ffn.bind(tape, &join(prefix, "ffn"), reg),
            norm_attn: self.norm_attn.bind(tape, &join(prefix, "norm_attn"), reg),
            norm_ffn: self.norm_ffn.bind(tape, &join(prefix, "norm_ffn"), reg),
            dim: self.model_dim(),
            head_dim: self.head_dim(),
        }
    }
}

impl ParamTensors for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (j, h) in self.heads.iter().enumerate() {
            f(&join(prefix, &format!("h{j}.wq")), &h.wq);
            f(&join(prefix, &format!("h{j}.wk")), &h.wk);
            f(&join(prefix, &format!("h{j}.wv")), &h.wv);
        }
        f(&join(prefix, "wo"), &self.wo);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm_attn.visit(&join(prefix, "norm_attn"), f);
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (j, h) in self.heads.iter_mut().enumerate() {
            f(&join(prefix, &format!("h{j}.wq")), &mut h.wq);
            f(&join(prefix, &format!("h{j}.wk")), &mut h.wk);
            f(&join(prefix, &format!("h{j}.wv")), &mut h.wv);
        }
        f(&join(prefix, "wo"), &mut self.wo);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm_attn.visit_mut(&join(prefix, "norm_attn"), f);
        self.norm_ffn.visit_mut(&join(prefix, "norm_ffn"), f);
    }
}

fn check_seq(tape: &Tape, name: &'static str, seq: &SeqVar, dim: usize) -> Result<()> {
    let (rows, cols) = tape.shape(seq.var);
    if cols != dim {
        return Err(SeerError::Shape {
            op: "multihead",
            detail: format!("{name} has dim {cols}, params expect {dim}"),
        });
    }
    if seq.mask.len() != rows {
        return Err(SeerError::Shape {
            op: "multihead",
            detail: format!("{name} mask length {} vs {} rows", seq.mask.len(), rows),
        });
    }
    Ok(())
}

/// Masked scaled-dot-product attention over `heads` parallel projections,
/// concatenated and projected back to the model dim. Returns the output
/// sequence and the per-head attention-weight matrices.
pub fn multihead_with_weights(
    tape: &mut Tape,
    query: &SeqVar,
    key: &SeqVar,
    value: &SeqVar,
    params: &AttentionVars,
) -> Result<(SeqVar, Vec<Var>)> {
    check_seq(tape, "query", query, params.dim)?;
    check_seq(tape, "key", key, params.dim)?;
    check_seq(tape, "value", value, params.dim)?;
    if tape.shape(key.var).0 != tape.shape(value.var).0 || key.mask != value.mask {
        return Err(SeerError::Shape {
            op: "multihead",
            detail: "key and value must share length and mask".to_string(),
        });
    }
    if !key.mask.iter().any(|m| *m) {
        return Err(SeerError::Contract(
            "attention over a fully masked key sequence".to_string(),
        ));
    }

    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = tape.matmul(query.var, head.wq);
        let k = tape.matmul(key.var, head.wk);
        let v = tape.matmul(value.var, head.wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled, &key.mask);
        weights.push(attn);
        head_outputs.push(tape.matmul(attn, v));
    }
    let merged = tape.concat_cols(&head_outputs);
    let out = tape.matmul(merged, params.wo);
    Ok((
        SeqVar {
            var: out,
            mask: query.mask.clone(),
        },
        weights,
    ))
}

pub fn multihead(
    tape: &mut Tape,
    query: &SeqVar,
    key: &SeqVar,
    value: &SeqVar,
    params: &AttentionVars,
) -> Result<SeqVar> {
    multihead_with_weights(tape, query, key, value, params).map(|(seq, _)| seq)
}

/// `Norm(primary + MultiHead(primary, context, context))` followed by
/// `Norm(h + FFN(h))`.
pub fn encoder_layer(
    tape: &mut Tape,
    primary: &SeqVar,
    context: &SeqVar,
    params: &AttentionVars,
) -> Result<SeqVar> {
    let attended = multihead(tape, primary, context, context, params)?;
    let residual = tape.add(primary.var, attended.var);
    let normed = params.norm_attn.apply(tape, residual);
    let ffn_out = params.ffn.apply(tape, normed);
    let residual2 = tape.add(normed, ffn_out);
    let out = params.norm_ffn.apply(tape, residual2);
    Ok(SeqVar {
        var: out,
        mask: primary.mask.clone(),
    })
}

/// Two encoder layers with independent parameters, each modality attending
/// to the other. Returns `(a enhanced by b, b enhanced by a)`.
pub fn co_attention(
    tape: &mut Tape,
    a: &SeqVar,
    b: &SeqVar,
    params_ab: &AttentionVars,
    params_ba: &AttentionVars,
) -> Result<(SeqVar, SeqVar)> {
    let a_enh = encoder_layer(tape, a, b, params_ab)?;
    let b_enh = encoder_layer(tape, b, a, params_ba)?;
    Ok((a_enh, b_enh))
}

/// Intra-modal interaction: the encoder layer with the sequence as its own
/// context.
pub fn self_attention(tape: &mut Tape, x: &SeqVar, params: &AttentionVars) -> Result<SeqVar> {
    encoder_layer(tape, x, x, params)
}

// ---- plain (non-tape) wrappers ----

fn run_plain<F>(params: &AttentionParams, f: F) -> Result<SequenceTensor>
where
    F: FnOnce(&mut Tape, &AttentionVars) -> Result<SeqVar>,
{
    let mut tape = Tape::new();
    let mut reg = Registry::new();
    let vars = params.bind(&mut tape, "attn", &mut reg);
    let out = f(&mut tape, &vars)?;
    Ok(out.to_tensor(&tape))
}

pub fn multihead_apply(
    query: &SequenceTensor,
    key: &SequenceTensor,
    value: &SequenceTensor,
    params: &AttentionParams,
) -> Result<SequenceTensor> {
    run_plain(params, |tape, vars| {
        let q = query.bind(tape);
        let k = key.bind(tape);
        let v = value.bind(tape);
        multihead(tape, &q, &k, &v, vars)
    })
}

pub fn encoder_layer_apply(
    primary: &SequenceTensor,
    context: &SequenceTensor,
    params: &AttentionParams,
) -> Result<SequenceTensor> {
    run_plain(params, |tape, vars| {
        let p = primary.bind(tape);
        let c = context.bind(tape);
        encoder_layer(tape, &p, &c, vars)
    })
}

pub fn self_attention_apply(
    x: &SequenceTensor,
    params: &AttentionParams,
) -> Result<SequenceTensor> {
    encoder_layer_apply(x, x, params)
}

pub fn co_attention_apply(
    a: &SequenceTensor,
    b: &SequenceTensor,
    params_ab: &AttentionParams,
    params_ba: &AttentionParams,
) -> Result<(SequenceTensor, SequenceTensor)> {
    let mut tape = Tape::new();
    let mut reg = Registry::new();
    let vars_ab = params_ab.bind(&mut tape, "ab", &mut reg);
    let vars_ba = params_ba.bind(&mut tape, "ba", &mut reg);
    let av = a.bind(&mut tape);
    let bv = b.bind(&mut tape);
    let (ae, be) = co_attention(&mut tape, &av, &bv, &vars_ab, &vars_ba)?;
    Ok((ae.to_tensor(&tape), be.to_tensor(&tape)))
}
