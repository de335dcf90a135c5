//! Layers shared by the language model and the query transformer.

use crate::rng::SplitMix64;
use crate::tensor::{Result, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Visits named parameters in a fixed order.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_param(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
}

fn filled_param(shape: &[usize], value: f64) -> Tensor {
    Tensor::param(shape, vec![value; shape.iter().product()]).expect("shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        Self {
            weight: normal_param(&[inputs, outputs], 1.0 / (inputs as f64).sqrt(), rng),
            bias: filled_param(&[outputs], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: filled_param(&[dim], 1.0),
            bias: filled_param(&[dim], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn init(dim: usize, source_dim: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            query: Linear::init(dim, dim, rng),
            key: Linear::init(source_dim, dim, rng),
            value: Linear::init(source_dim, dim, rng),
            output: Linear::init(dim, dim, rng),
            heads,
        }
    }

    /// `mask`, when given, is added to the `[queries, sources]` scores.
    pub fn forward(&self, x: &Tensor, source: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.query.forward(x)?;
        let k = self.key.forward(source)?;
        let v = self.value.forward(source)?;
        let width = q.cols() / self.heads;
        let scale = 1.0 / (width as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * width..(h + 1) * width;
            let qh = q.slice_cols(cols.start, cols.end)?;
            let kh = k.slice_cols(cols.start, cols.end)?;
            let vh = v.slice_cols(cols.start, cols.end)?;
            let mut scores = qh.matmul_nt(&kh)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax(1)?.matmul(&vh)?);
        }
        self.output.forward(&Tensor::concat_cols(&heads)?)
    }
}

impl Module for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(dim: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            up: Linear::init(dim, hidden, rng),
            down: Linear::init(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu())
    }
}

impl Module for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

/// `[n, n]` additive mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(&[n, n], data).expect("square mask")
}
