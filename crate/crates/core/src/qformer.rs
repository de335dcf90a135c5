//! Query transformer: learnable queries read the frozen patch features
//! through cross-attention, optionally conditioned on instruction tokens
//! through shared self-attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{normal_param, prefixed, Attention, FeedForward, LayerNorm, Linear, Module};
use crate::rng::SplitMix64;
use crate::stubs::VisualFeatures;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QFormerMode {
    Aware,
    Agnostic,
}

impl QFormerMode {
    pub const ALL: [QFormerMode; 2] = [QFormerMode::Aware, QFormerMode::Agnostic];

    pub fn name(self) -> &'static str {
        match self {
            QFormerMode::Aware => "aware",
            QFormerMode::Agnostic => "agnostic",
        }
    }
}

impl fmt::Display for QFormerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QFormerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown qformer mode {s:?} (expected aware or agnostic)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub llm_dim: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
    pub mode: QFormerMode,
    pub max_instruction_tokens: usize,
    pub frames: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            dim: 48,
            layers: 2,
            heads: 4,
            ffn_dim: 96,
            llm_dim: 64,
            visual_dim: 32,
            vocab_size: 0,
            mode: QFormerMode::Aware,
            max_instruction_tokens: 32,
            frames: 4,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QFormerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Module for QFormerBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln_self.visit(&prefixed(prefix, "ln_self"), f);
        self.self_attn.visit(&prefixed(prefix, "self_attn"), f);
        self.ln_cross.visit(&prefixed(prefix, "ln_cross"), f);
        self.cross_attn.visit(&prefixed(prefix, "cross_attn"), f);
        self.ln_ffn.visit(&prefixed(prefix, "ln_ffn"), f);
        self.ffn.visit(&prefixed(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln_self.visit_mut(&prefixed(prefix, "ln_self"), f);
        self.self_attn.visit_mut(&prefixed(prefix, "self_attn"), f);
        self.ln_cross.visit_mut(&prefixed(prefix, "ln_cross"), f);
        self.cross_attn.visit_mut(&prefixed(prefix, "cross_attn"), f);
        self.ln_ffn.visit_mut(&prefixed(prefix, "ln_ffn"), f);
        self.ffn.visit_mut(&prefixed(prefix, "ffn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct QFormerParams {
    pub queries: Tensor,
    pub instruction_embedding: Tensor,
    pub instruction_position: Tensor,
    pub blocks: Vec<QFormerBlock>,
    pub ln_final: LayerNorm,
    pub projection: Linear,
}

impl Module for QFormerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefixed(prefix, "queries"), &self.queries);
        f(prefixed(prefix, "instruction_embedding"), &self.instruction_embedding);
        f(prefixed(prefix, "instruction_position"), &self.instruction_position);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&prefixed(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&prefixed(prefix, "ln_final"), f);
        self.projection.visit(&prefixed(prefix, "projection"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefixed(prefix, "queries"), &mut self.queries);
        f(prefixed(prefix, "instruction_embedding"), &mut self.instruction_embedding);
        f(prefixed(prefix, "instruction_position"), &mut self.instruction_position);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&prefixed(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&prefixed(prefix, "ln_final"), f);
        self.projection.visit_mut(&prefixed(prefix, "projection"), f);
    }
}

/// Hidden states of one block, `[queries ; instruction]` rows.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub after_self: Tensor,
    pub after_cross: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub params: QFormerParams,
}

/// Keeps the first `max` tokens.
pub fn truncate_instruction(ids: &[usize], max: usize) -> &[usize] {
    &ids[..ids.len().min(max)]
}

impl QFormer {
    pub fn init(config: QFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, "qformer-init");
        let d = config.dim;
        let params = QFormerParams {
            queries: normal_param(&[config.num_queries, d], 1.0, &mut rng),
            instruction_embedding: normal_param(&[config.vocab_size, d], 0.02, &mut rng),
            instruction_position: normal_param(&[config.max_instruction_tokens, d], 0.2, &mut rng),
            blocks: (0..config.layers)
                .map(|_| QFormerBlock {
                    ln_self: LayerNorm::init(d),
                    self_attn: Attention::init(d, d, config.heads, &mut rng),
                    ln_cross: LayerNorm::init(d),
                    cross_attn: Attention::init(d, config.visual_dim, config.heads, &mut rng),
                    ln_ffn: LayerNorm::init(d),
                    ffn: FeedForward::init(d, config.ffn_dim, &mut rng),
                })
                .collect(),
            ln_final: LayerNorm::init(d),
            projection: Linear::init(d, config.llm_dim, &mut rng),
        };
        Ok(Self { config, params })
    }

    fn run(&self, visual: &VisualFeatures, instruction: &[usize], mut trace: Option<&mut Vec<BlockTrace>>) -> Result<Tensor> {
        let k = self.config.num_queries;
        if instruction.len() > self.config.max_instruction_tokens {
            return Err(Error::Contract(format!(
                "instruction has {} tokens, limit is {}",
                instruction.len(),
                self.config.max_instruction_tokens
            )));
        }
        let p = &self.params;
        let mut x = p.queries.clone();
        if self.config.mode == QFormerMode::Aware && !instruction.is_empty() {
            let words = Tensor::embed(&p.instruction_embedding, instruction)?
                .add(&p.instruction_position.slice_rows(0, instruction.len())?)?;
            x = Tensor::concat_rows(&[x, words])?;
        }
        let n = x.rows();
        for b in &p.blocks {
            let h = b.ln_self.forward(&x)?;
            x = x.add(&b.self_attn.forward(&h, &h, None)?)?;
            let after_self = x.clone();
            // only the query rows read the patches
            let q = x.slice_rows(0, k)?;
            let q = q.add(&b.cross_attn.forward(&b.ln_cross.forward(&q)?, &visual.patches, None)?)?;
            x = if n > k { Tensor::concat_rows(&[q, x.slice_rows(k, n)?])? } else { q };
            let after_cross = x.clone();
            x = x.add(&b.ffn.forward(&b.ln_ffn.forward(&x)?)?)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(BlockTrace { after_self, after_cross, output: x.clone() });
            }
        }
        Ok(p.ln_final.forward(&x.slice_rows(0, k)?)?)
    }

    /// `[K, dim]` query outputs. Agnostic mode ignores `instruction`.
    pub fn extract(&self, visual: &VisualFeatures, instruction: &[usize]) -> Result<Tensor> {
        self.run(visual, instruction, None)
    }

    pub fn extract_traced(&self, visual: &VisualFeatures, instruction: &[usize]) -> Result<(Tensor, Vec<BlockTrace>)> {
        let mut trace = Vec::new();
        let out = self.run(visual, instruction, Some(&mut trace))?;
        Ok((out, trace))
    }

    /// `[K, llm_dim]`.
    pub fn project(&self, query_out: &Tensor) -> Result<Tensor> {
        Ok(self.params.projection.forward(query_out)?)
    }

    /// Soft prompt for a still image.
    pub fn soft_prompt(&self, visual: &VisualFeatures, instruction: &[usize]) -> Result<Tensor> {
        self.project(&self.extract(visual, instruction)?)
    }

    /// Each frame extracted and projected on its own, stacked in frame order:
    /// `[frames * K, llm_dim]`.
    pub fn extract_video(&self, frames: &[VisualFeatures], instruction: &[usize]) -> Result<Tensor> {
        if frames.len() != self.config.frames {
            return Err(Error::Contract(format!(
                "expected {} frames, got {}",
                self.config.frames,
                frames.len()
            )));
        }
        let parts = frames
            .iter()
            .map(|f| self.soft_prompt(f, instruction))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat_rows(&parts)?)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({ "kind": "qformer", "config": self.config, "extra": extra });
        Checkpoint::from_named(meta.to_string(), &self.params.named_tensors())
    }

    /// Loads trainable parameters and the metadata's `extra` field.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            config: QFormerConfig,
            #[serde(default)]
            extra: serde_json::Value,
        }
        let meta: Meta = serde_json::from_str(&ck.meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        if meta.kind != "qformer" {
            return Err(Error::Config(format!("expected a qformer checkpoint, found {}", meta.kind)));
        }
        let mut q = Self::init(meta.config, 0)?;
        let mut err = None;
        q.params.visit_mut("", &mut |name, t| match ck.get(&name, t.shape()) {
            Ok(s) => *t = Tensor::param(&s.shape, s.data.clone()).expect("checked shape"),
            Err(e) => err = err.take().or(Some(e)),
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        Ok((q, meta.extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ToyLm, ToyLmConfig, Vocabulary, BOS};
    use crate::stubs::{ImageEncoder, StubConfig, SyntheticImage};
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn tiny_cfg(mode: QFormerMode) -> QFormerConfig {
        QFormerConfig {
            num_queries: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 12,
            llm_dim: 10,
            visual_dim: 32,
            vocab_size: 20,
            mode,
            max_instruction_tokens: 6,
            frames: 4,
        }
    }

    fn image(id: u64) -> VisualFeatures {
        let enc = ImageEncoder::new(StubConfig::default());
        let mut rng = SplitMix64::new(id);
        enc.encode_image(&SyntheticImage::random(id, &mut rng)).unwrap()
    }

    fn l2(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn shapes_do_not_depend_on_instruction_length() {
        let q = QFormer::init(tiny_cfg(QFormerMode::Aware), 1).unwrap();
        let v = image(3);
        for ids in [&[][..], &[4], &[4, 5, 6, 7, 8, 9]] {
            assert_eq!(q.extract(&v, ids).unwrap().shape(), &[3, 8]);
        }
        assert_eq!(q.soft_prompt(&v, &[4]).unwrap().shape(), &[3, 10]);
        assert!(matches!(q.extract(&v, &[1; 7]), Err(Error::Contract(_))));
        assert_eq!(truncate_instruction(&[1, 2, 3, 4], 2), &[1, 2]);
    }

    #[test]
    fn agnostic_ignores_instruction_aware_does_not() {
        let v = image(3);
        let agn = QFormer::init(tiny_cfg(QFormerMode::Agnostic), 1).unwrap();
        assert_eq!(agn.extract(&v, &[4, 5]).unwrap().data(), agn.extract(&v, &[9]).unwrap().data());
        let aware = QFormer::init(tiny_cfg(QFormerMode::Aware), 1).unwrap();
        assert!(l2(&aware.extract(&v, &[4, 5]).unwrap(), &aware.extract(&v, &[9]).unwrap()) > 1e-6);
    }

    #[test]
    fn projection_is_affine() {
        let q = QFormer::init(tiny_cfg(QFormerMode::Aware), 2).unwrap();
        let zero = q.project(&Tensor::zeros(&[3, 8])).unwrap();
        for row in zero.data().chunks(10) {
            assert_eq!(row, q.params.projection.bias.data());
        }
        let mut rng = SplitMix64::new(8);
        let a = Tensor::new(&[3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(&[3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let lhs = q.project(&a.add(&b).unwrap()).unwrap();
        let rhs = q.project(&a).unwrap().add(&q.project(&b).unwrap()).unwrap().add(&zero.scale(-1.0)).unwrap();
        assert!(l2(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn cross_attention_never_touches_instruction_rows() {
        let q = QFormer::init(tiny_cfg(QFormerMode::Aware), 5).unwrap();
        let v = image(4);
        let blank = VisualFeatures { patches: Tensor::zeros(&[16, 32]), source_id: 4 };
        let ins = [4, 11, 7];
        let (out_a, ta) = q.extract_traced(&v, &ins).unwrap();
        let (out_b, tb) = q.extract_traced(&blank, &ins).unwrap();
        assert!(l2(&out_a, &out_b) > 1e-6);
        for t in ta.iter().chain(&tb) {
            assert_eq!(&t.after_self.data()[24..], &t.after_cross.data()[24..]);
        }
        // Instruction rows first meet image-dependent query rows in the
        // second block's self-attention, so they agree through block one.
        assert_eq!(&ta[0].output.data()[24..], &tb[0].output.data()[24..]);

        let one = QFormer::init(QFormerConfig { layers: 1, ..tiny_cfg(QFormerMode::Aware) }, 5).unwrap();
        let (_, ta) = one.extract_traced(&v, &ins).unwrap();
        let (_, tb) = one.extract_traced(&blank, &ins).unwrap();
        assert_eq!(&ta[0].output.data()[24..], &tb[0].output.data()[24..]);
    }

    #[test]
    fn video_stacks_frames_in_order() {
        let q = QFormer::init(tiny_cfg(QFormerMode::Aware), 6).unwrap();
        let frames: Vec<_> = (0..4).map(|i| image(10 + i)).collect();
        let out = q.extract_video(&frames, &[3, 4]).unwrap();
        assert_eq!(out.shape(), &[12, 10]);
        let same = q.extract_video(&vec![frames[0].clone(); 4], &[3, 4]).unwrap();
        let single = q.soft_prompt(&frames[0], &[3, 4]).unwrap();
        for block in same.data().chunks(30) {
            assert_eq!(block, single.data());
        }
        let swapped = q.extract_video(&[frames[2].clone(), frames[1].clone(), frames[0].clone(), frames[3].clone()], &[3, 4]).unwrap();
        assert_eq!(&swapped.data()[..30], &out.data()[60..90]);
        assert_eq!(&swapped.data()[60..90], &out.data()[..30]);
        assert_eq!(&swapped.data()[90..], &out.data()[90..]);
        assert!(matches!(q.extract_video(&frames[..3], &[3]), Err(Error::Contract(_))));
    }

    fn tiny_lm() -> ToyLm {
        let tokens = (0..20).map(|i| format!("w{i}")).collect();
        let cfg = ToyLmConfig { dim: 10, layers: 1, heads: 2, ffn_dim: 12, max_positions: 16, ..Default::default() };
        let mut lm = ToyLm::init(cfg, Vocabulary::from_tokens(tokens), 9);
        lm.freeze();
        lm
    }

    #[test]
    fn gradients_reach_only_the_qformer() {
        let q = QFormer::init(tiny_cfg(QFormerMode::Aware), 7).unwrap();
        let lm = tiny_lm();
        let v = image(5);
        let prompt = q.soft_prompt(&v, &[4, 5]).unwrap();
        let (loss, _) = lm.target_loss(&prompt, &[BOS, 6], &[7, 8]).unwrap();
        loss.backward().unwrap();
        for (name, t) in q.params.named_tensors() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} got no gradient"));
            if !name.contains("position") {
                assert!(g.iter().any(|x| *x != 0.0), "{name} gradient is all zero");
            }
        }
        assert!(v.patches.grad().is_none());
        for (name, t) in lm.params.named_tensors() {
            assert!(t.grad().is_none(), "{name}");
        }
    }

    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        let cfg = QFormerConfig { layers: 1, ..tiny_cfg(QFormerMode::Aware) };
        let q = QFormer::init(cfg, 8).unwrap();
        let lm = tiny_lm();
        let v = image(6);
        let names: Vec<String> = q.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let inputs: Vec<Tensor> = q.params.named_tensors().into_iter().map(|(_, t)| t).collect();
        let err = grad_check(
            |xs| {
                let mut q2 = q.clone();
                let mut i = 0;
                q2.params.visit_mut("", &mut |_, t| {
                    *t = xs[i].clone();
                    i += 1;
                });
                let prompt = q2.soft_prompt(&v, &[3, 9]).unwrap();
                lm.target_loss(&prompt, &[BOS, 5], &[6, 7]).map(|(l, _)| l).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err} over {names:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn agnostic_is_exactly_instruction_invariant(
            seed in 0u64..200,
            a in proptest::collection::vec(0usize..20, 0..6),
            b in proptest::collection::vec(0usize..20, 0..6),
        ) {
            let q = QFormer::init(tiny_cfg(QFormerMode::Agnostic), seed).unwrap();
            let v = image(seed);
            let (x, y) = (q.extract(&v, &a).unwrap(), q.extract(&v, &b).unwrap());
            prop_assert_eq!(x.data(), y.data());
        }

        #[test]
        fn aware_output_depends_on_instruction(seed in 0u64..200, t in 0usize..19) {
            let q = QFormer::init(tiny_cfg(QFormerMode::Aware), seed).unwrap();
            let v = image(seed);
            prop_assert!(l2(&q.extract(&v, &[t]).unwrap(), &q.extract(&v, &[t + 1]).unwrap()) > 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let q = QFormer::init(tiny_cfg(QFormerMode::Aware), 9).unwrap();
        let ck = q.to_checkpoint(serde_json::json!({"step": 3}));
        let (back, extra) = QFormer::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(extra["step"], 3);
        let v = image(1);
        assert_eq!(q.extract(&v, &[2]).unwrap().data(), back.extract(&v, &[2]).unwrap().data());
    }
}
