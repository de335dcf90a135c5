//! Small decoder-only language model that reads soft prompt rows followed by
//! text tokens.

pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, normal_param, prefixed, Attention, FeedForward, LayerNorm, Module};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::SplitMix64;
use crate::tensor::{no_grad, Tensor, TensorError};

pub use vocab::{normalize, tokenize, Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_positions: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Sentences start at a random position in `0..=max_offset`, so that
    /// positions later taken by soft prompts are trained too.
    pub max_offset: usize,
    pub corpus_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            max_offset: 8,
            corpus_size: 6000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Module for DecoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&prefixed(prefix, "ln1"), f);
        self.attn.visit(&prefixed(prefix, "attn"), f);
        self.ln2.visit(&prefixed(prefix, "ln2"), f);
        self.ffn.visit(&prefixed(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&prefixed(prefix, "ln1"), f);
        self.attn.visit_mut(&prefixed(prefix, "attn"), f);
        self.ln2.visit_mut(&prefixed(prefix, "ln2"), f);
        self.ffn.visit_mut(&prefixed(prefix, "ffn"), f);
    }
}

/// The output projection is tied to `token_embedding`.
#[derive(Debug, Clone)]
pub struct ToyLmParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub ln_final: LayerNorm,
}

impl Module for ToyLmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefixed(prefix, "token_embedding"), &self.token_embedding);
        f(prefixed(prefix, "position_embedding"), &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&prefixed(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&prefixed(prefix, "ln_final"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefixed(prefix, "token_embedding"), &mut self.token_embedding);
        f(prefixed(prefix, "position_embedding"), &mut self.position_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&prefixed(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&prefixed(prefix, "ln_final"), f);
    }
}

/// Greedy output with the log-probability of each chosen token.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub config: ToyLmConfig,
    pub vocab: Vocabulary,
    pub params: ToyLmParams,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl ToyLm {
    pub fn init(mut config: ToyLmConfig, vocab: Vocabulary, seed: u64) -> Self {
        config.vocab_size = vocab.len();
        let mut rng = SplitMix64::derive(seed, "toy-lm-init");
        let d = config.dim;
        let params = ToyLmParams {
            token_embedding: normal_param(&[config.vocab_size, d], 0.2, &mut rng),
            position_embedding: normal_param(&[config.max_positions, d], 0.2, &mut rng),
            blocks: (0..config.layers)
                .map(|_| DecoderBlock {
                    ln1: LayerNorm::init(d),
                    attn: Attention::init(d, d, config.heads, &mut rng),
                    ln2: LayerNorm::init(d),
                    ffn: FeedForward::init(d, config.ffn_dim, &mut rng),
                })
                .collect(),
            ln_final: LayerNorm::init(d),
        };
        Self { config, vocab, params }
    }

    /// Turns every parameter into a constant.
    pub fn freeze(&mut self) {
        self.params.visit_mut("", &mut |_, t| *t = t.detach());
    }

    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.params.visit("", &mut |_, t| frozen &= !t.requires_grad());
        frozen
    }

    /// BOS followed by the encoded text.
    pub fn prompt_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.vocab.encode(text));
        ids
    }

    /// Final hidden states of the text rows, text starting at position
    /// `offset` after `prefix_rows` prompt rows.
    fn text_hidden(&self, prefix: Option<&Tensor>, ids: &[usize], offset: usize) -> Result<Tensor> {
        let k = prefix.map_or(0, |p| p.rows());
        let total = offset + k + ids.len();
        if total > self.config.max_positions {
            return Err(Error::Contract(format!(
                "sequence of {total} positions exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let mut parts = Vec::new();
        if let Some(p) = prefix.filter(|p| p.rows() > 0) {
            parts.push(p.clone());
        }
        if !ids.is_empty() {
            parts.push(Tensor::embed(&self.params.token_embedding, ids)?);
        }
        let n = k + ids.len();
        let pos = self.params.position_embedding.slice_rows(offset, offset + n)?;
        let mut x = Tensor::concat_rows(&parts)?.add(&pos)?;
        let mask = causal_mask(n);
        for b in &self.params.blocks {
            let h = b.ln1.forward(&x)?;
            x = x.add(&b.attn.forward(&h, &h, Some(&mask))?)?;
            x = x.add(&b.ffn.forward(&b.ln2.forward(&x)?)?)?;
        }
        Ok(self.params.ln_final.forward(&x.slice_rows(k, n)?)?)
    }

    fn check_prompt(&self, soft_prompt: &Tensor) -> Result<()> {
        if soft_prompt.shape().len() != 2 || soft_prompt.cols() != self.config.dim {
            return Err(TensorError::Shape {
                op: "lm_forward",
                left: soft_prompt.shape().to_vec(),
                right: vec![self.config.dim],
            }
            .into());
        }
        Ok(())
    }

    /// Logits `[n, V]` for the `n` text positions; row `i` predicts token
    /// `i + 1`. Soft prompt rows come first and are visible to every text
    /// position.
    pub fn forward(&self, soft_prompt: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.check_prompt(soft_prompt)?;
        if ids.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.vocab_size]));
        }
        let h = self.text_hidden(Some(soft_prompt), ids, 0)?;
        Ok(h.matmul_nt(&self.params.token_embedding)?)
    }

    /// Mean next-token cross-entropy over `target` followed by EOS, given
    /// the prompt. Returns the loss and the number of scored tokens.
    pub fn target_loss(&self, soft_prompt: &Tensor, prompt: &[usize], target: &[usize]) -> Result<(Tensor, usize)> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must contain at least BOS".into()));
        }
        let mut text = prompt.to_vec();
        text.extend_from_slice(target);
        text.push(EOS);
        let inputs = &text[..text.len() - 1];
        let targets: Vec<usize> =
            (0..inputs.len()).map(|j| if j + 1 < prompt.len() { PAD } else { text[j + 1] }).collect();
        let logits = self.forward(soft_prompt, inputs)?;
        Ok((logits.cross_entropy(&targets, PAD)?, target.len() + 1))
    }

    /// Per-token log-probabilities of `continuation` after `prompt`.
    pub fn continuation_logprobs(&self, soft_prompt: &Tensor, prompt: &[usize], continuation: &[usize]) -> Result<Vec<f64>> {
        if continuation.is_empty() {
            return Err(Error::Contract("continuation must be non-empty".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must contain at least BOS".into()));
        }
        let mut text = prompt.to_vec();
        text.extend_from_slice(&continuation[..continuation.len() - 1]);
        let logits = no_grad(|| self.forward(soft_prompt, &text))?;
        let v = self.config.vocab_size;
        Ok(continuation
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = prompt.len() - 1 + i;
                log_softmax_row(&logits.data()[row * v..(row + 1) * v])[t]
            })
            .collect())
    }

    /// Total log-likelihood of `continuation`, without length normalization.
    pub fn sequence_logprob(&self, soft_prompt: &Tensor, prompt: &[usize], continuation: &[usize]) -> Result<f64> {
        Ok(self.continuation_logprobs(soft_prompt, prompt, continuation)?.iter().sum())
    }

    /// Appends the argmax token (lowest id on ties) until EOS or `max_len`
    /// tokens. The EOS, when produced, is included.
    pub fn greedy_decode(&self, soft_prompt: &Tensor, prompt: &[usize], max_len: usize) -> Result<Decoded> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must contain at least BOS".into()));
        }
        let v = self.config.vocab_size;
        let mut text = prompt.to_vec();
        let mut out = Decoded { ids: Vec::new(), logprobs: Vec::new() };
        while out.ids.len() < max_len {
            let logits = no_grad(|| self.forward(soft_prompt, &text))?;
            let last = &logits.data()[(text.len() - 1) * v..text.len() * v];
            let next = argmax(last);
            out.logprobs.push(log_softmax_row(last)[next]);
            out.ids.push(next);
            text.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }

    fn sentence_ids(&self, sentence: &str) -> Vec<usize> {
        let mut ids = self.prompt_ids(sentence);
        ids.push(EOS);
        ids
    }

    fn sentence_loss(&self, ids: &[usize], offset: usize) -> Result<Tensor> {
        let inputs = &ids[..ids.len() - 1];
        let h = self.text_hidden(None, inputs, offset)?;
        h.matmul_nt(&self.params.token_embedding)?.cross_entropy(&ids[1..], PAD).map_err(Into::into)
    }

    /// Mean per-token loss over `sentences`, text at position 0.
    pub fn corpus_loss(&self, sentences: &[String]) -> Result<f64> {
        no_grad(|| {
            let (mut total, mut count) = (0.0, 0usize);
            for s in sentences {
                let ids = self.sentence_ids(s);
                let n = ids.len() - 1;
                total += self.sentence_loss(&ids, 0)?.item() * n as f64;
                count += n;
            }
            Ok(total / count.max(1) as f64)
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "toy_lm",
            "config": self.config,
            "vocab": self.vocab.tokens(),
        });
        Checkpoint::from_named(meta.to_string(), &self.params.named_tensors())
    }

    /// Rebuilds a frozen model from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            config: ToyLmConfig,
            vocab: Vec<String>,
        }
        let meta: Meta = serde_json::from_str(&ck.meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        if meta.kind != "toy_lm" {
            return Err(Error::Config(format!("expected a toy_lm checkpoint, found {}", meta.kind)));
        }
        let mut lm = Self::init(meta.config, Vocabulary::from_tokens(meta.vocab), 0);
        let mut err = None;
        lm.params.visit_mut("", &mut |name, t| match ck.get(&name, t.shape()) {
            Ok(s) => *t = Tensor::new(&s.shape, s.data.clone()).expect("checked shape"),
            Err(e) => err = err.take().or(Some(e)),
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        Ok(lm)
    }
}

/// Trains a fresh model by next-token prediction on `corpus`, then freezes
/// it. Returns the model and the per-step training loss.
pub fn pretrain_toy(
    corpus: &[String],
    vocab: Vocabulary,
    config: &ToyLmConfig,
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<(ToyLm, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    let mut lm = ToyLm::init(config.clone(), vocab, seed);
    let encoded: Vec<Vec<usize>> = corpus.iter().map(|s| lm.sentence_ids(s)).collect();
    let longest = encoded.iter().map(Vec::len).max().unwrap_or(0);
    if longest > lm.config.max_positions {
        return Err(Error::Contract(format!(
            "corpus sentence of {longest} tokens exceeds max_positions {}",
            lm.config.max_positions
        )));
    }
    let schedule = LrSchedule {
        lr_start: 0.0,
        lr_peak: pcfg.lr,
        lr_min: pcfg.lr * 0.05,
        warmup_steps: pcfg.warmup_steps.min(pcfg.steps),
        max_steps: pcfg.steps,
    };
    let mut opt = AdamW::new(AdamWConfig { weight_decay: pcfg.weight_decay, ..Default::default() });
    let mut rng = SplitMix64::derive(seed, "toy-lm-pretrain");
    let mut losses = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let mut total = Tensor::scalar(0.0);
        for _ in 0..pcfg.batch_size {
            let ids = &encoded[rng.below(encoded.len())];
            let room = lm.config.max_positions - (ids.len() - 1);
            let offset = rng.below(pcfg.max_offset.min(room) + 1);
            total = total.add(&lm.sentence_loss(ids, offset)?)?;
        }
        let loss = total.scale(1.0 / pcfg.batch_size as f64);
        if !loss.item().is_finite() {
            return Err(Error::Divergence { step, loss: loss.item() });
        }
        losses.push(loss.item());
        loss.backward()?;
        opt.step(&mut lm.params, schedule.lr_at(step));
    }
    lm.freeze();
    Ok((lm, losses))
}
