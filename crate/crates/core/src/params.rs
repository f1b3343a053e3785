//! Parameter containers shared by the model modules: a visitor over named
//! tensors, dense/MLP building blocks, gradient collection, and the Adam
//! optimizer.

use std::collections::BTreeMap;

use rayon::prelude::*;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::Stream;
use crate::numerics::tape::{Tape, Var};

/// Walk every named parameter tensor of a module in a fixed order.
pub trait ParamTensors {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Order-preserving record of which tape node holds which parameter.
#[derive(Default)]
pub struct Registry {
    entries: Vec<(String, Var)>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: String, var: Var) {
        self.entries.push((name, var));
    }

    pub fn bind(&mut self, tape: &mut Tape, name: String, value: &Array2<f64>) -> Var {
        let var = tape.param(value.clone());
        self.record(name, var);
        var
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Named gradient tensors in registry order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Array2<f64>)>,
}

impl Gradients {
    pub fn from_tape(tape: &mut Tape, registry: &Registry) -> Self {
        let entries = registry
            .entries()
            .iter()
            .map(|(name, var)| (name.clone(), tape.take_grad(*var)))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    /// Elementwise accumulation; both sides must come from the same
    /// binding order. Entries are independent, so they sum in parallel
    /// without affecting the result.
    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.entries.len(), other.entries.len(), "gradient layouts");
        self.entries
            .par_iter_mut()
            .zip(other.entries.par_iter())
            .for_each(|((name, g), (oname, og))| {
                assert_eq!(name, oname, "gradient layouts");
                *g += og;
            });
    }
}

/// Single affine map `x . w + b`; the activation is applied by the caller.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn init(seed: u64, tag: &str, input: usize, output: usize) -> Self {
        let mut stream = Stream::with_tag(seed, tag);
        Self {
            w: xavier(&mut stream, input, output),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> DenseVars {
        DenseVars {
            w: reg.bind(tape, join(prefix, "w"), &self.w),
            b: reg.bind(tape, join(prefix, "b"), &self.b),
        }
    }
}

impl DenseVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.w);
        tape.add_row(xw, self.b)
    }
}

impl ParamTensors for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Two affine maps with a GELU between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

pub struct MlpVars {
    pub hidden: DenseVars,
    pub out: DenseVars,
}

impl Mlp {
    pub fn init(seed: u64, tag: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Dense::init(seed, &format!("{tag}.hidden"), input, hidden),
            out: Dense::init(seed, &format!("{tag}.out"), hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.out.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> MlpVars {
        MlpVars {
            hidden: self.hidden.bind(tape, &join(prefix, "hidden"), reg),
            out: self.out.bind(tape, &join(prefix, "out"), reg),
        }
    }
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.apply(tape, x);
        let h = tape.gelu(h);
        self.out.apply(tape, h)
    }
}

impl ParamTensors for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Learnable gain and bias for layer normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: Array2::ones((1, dim)),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, reg: &mut Registry) -> LayerNormVars {
        LayerNormVars {
            gain: reg.bind(tape, join(prefix, "gain"), &self.gain),
            bias: reg.bind(tape, join(prefix, "bias"), &self.bias),
        }
    }
}

impl LayerNormVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

impl ParamTensors for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn xavier(stream: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| stream.range(-limit, limit))
}

/// Adaptive-moment gradient descent, keyed by parameter name so the update
/// never depends on traversal details.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    state: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut dyn ParamTensors, grads: &Gradients) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        params.visit_mut("", &mut |name, value| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (Array2::zeros(value.dim()), Array2::zeros(value.dim())));
            for ((idx, p), gv) in value.indexed_iter_mut().zip(g.iter()) {
                let mi = self.beta1 * m[idx] + (1.0 - self.beta1) * gv;
                let vi = self.beta2 * v[idx] + (1.0 - self.beta2) * gv * gv;
                m[idx] = mi;
                v[idx] = vi;
                *p -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        });
    }
}

/// Row-major logical position of a flat element index, valid for any
/// memory layout.
pub fn flat_index(shape: (usize, usize), flat: usize) -> (usize, usize) {
    (flat / shape.1, flat % shape.1)
}

/// Read one scalar parameter by name and flat element index.
pub fn read_param<P: ParamTensors + ?Sized>(params: &P, name: &str, flat: usize) -> f64 {
    let mut out = None;
    params.visit("", &mut |n, value| {
        if n == name {
            out = Some(value[flat_index(value.dim(), flat)]);
        }
    });
    out.unwrap_or_else(|| panic!("parameter {name} not found"))
}

/// Overwrite one scalar parameter by name and flat element index.
pub fn write_param<P: ParamTensors + ?Sized>(params: &mut P, name: &str, flat: usize, val: f64) {
    let mut hit = false;
    params.visit_mut("", &mut |n, value| {
        if n == name {
            let idx = flat_index(value.dim(), flat);
            value[idx] = val;
            hit = true;
        }
    });
    assert!(hit, "parameter {name} not found");
}

/// `(name, element count)` for every tensor, in visit order.
pub fn param_layout<P: ParamTensors + ?Sized>(params: &P) -> Vec<(String, usize)> {
    let mut layout = Vec::new();
    params.visit("", &mut |name, value| {
        layout.push((name.to_string(), value.len()));
    });
    layout
}
