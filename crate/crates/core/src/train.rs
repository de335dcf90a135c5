//! Instruction tuning of the Q-Former against the frozen language model.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{contamination_check, render, FormatMode, Protocol};
use crate::error::{Error, Result};
use crate::eval::held_in_scores;
use crate::lm::ToyLm;
use crate::mixture::{next_sample, MixtureSchedule, Sample, SamplerMode};
use crate::model::ModelBundle;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::qformer::{QFormer, QFormerConfig, QFormerMode};
use crate::rng::SplitMix64;
use crate::stubs::ImageEncoder;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    /// 0 validates only once, after the last step.
    pub validate_every: usize,
    /// Validation examples scored per dataset; 0 means all.
    pub val_limit: usize,
    pub seed: u64,
    pub format_mode: FormatMode,
    pub sampler_mode: SamplerMode,
    pub qformer_mode: QFormerMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 200,
            lr_start: 1e-8,
            lr_peak: 2e-3,
            lr_min: 0.0,
            validate_every: 250,
            val_limit: 0,
            seed: 0,
            format_mode: FormatMode::Instruction,
            sampler_mode: SamplerMode::Balanced,
            qformer_mode: QFormerMode::Aware,
        }
    }
}

impl TrainConfig {
    /// Optimizer and schedule constants of the full-scale recipe.
    pub fn full_scale() -> Self {
        Self {
            max_steps: 60_000,
            batch_size: 192,
            warmup_steps: 1000,
            lr_start: 1e-8,
            lr_peak: 1e-5,
            lr_min: 0.0,
            validate_every: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.lr_start < self.lr_peak) {
            return Err(Error::Config(format!("lr_start ({}) must be below lr_peak ({})", self.lr_start, self.lr_peak)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_start: self.lr_start,
            lr_peak: self.lr_peak,
            lr_min: self.lr_min,
            warmup_steps: self.warmup_steps,
            max_steps: self.max_steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub scores: BTreeMap<String, f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schedule: MixtureSchedule,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best_step: usize,
    pub best_average: f64,
    pub sample_counts: BTreeMap<String, usize>,
}

impl TrainReport {
    /// One JSON object per line: a header, every step, every validation,
    /// then the selected checkpoint.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        line(serde_json::json!({ "event": "schedule", "schedule": self.schedule }));
        for s in &self.steps {
            line(serde_json::json!({ "event": "step", "step": s.step, "loss": s.loss, "lr": s.lr, "counts": s.counts }));
        }
        for v in &self.validations {
            line(serde_json::json!({ "event": "validation", "step": v.step, "scores": v.scores, "average": v.average }));
        }
        line(serde_json::json!({
            "event": "selected",
            "best_step": self.best_step,
            "best_average": self.best_average,
            "sample_counts": self.sample_counts,
        }));
        out
    }
}

/// Trainable state: the Q-Former inside `bundle` plus optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub opt: AdamW,
    pub step: usize,
}

/// One rendered training example.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub dataset: String,
    pub image: crate::stubs::SyntheticImage,
    pub input: String,
    pub target: String,
}

pub fn assemble(protocol: &Protocol, samples: &[Sample<'_>], mode: FormatMode) -> Result<Vec<BatchItem>> {
    samples
        .iter()
        .map(|s| {
            let (input, target) = render(protocol, s.dataset, s.example, s.template_idx, mode)?;
            Ok(BatchItem { dataset: s.dataset.name.clone(), image: s.example.image.clone(), input, target })
        })
        .collect()
}

/// Mean cross-entropy over every target token in the batch.
pub fn batch_loss(bundle: &ModelBundle, batch: &[BatchItem]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    let mut tokens = 0usize;
    for item in batch {
        let prompt = bundle.soft_prompt(&item.image, &item.input)?;
        let (loss, n) = bundle.lm.target_loss(&prompt, &bundle.lm.prompt_ids(&item.input), &bundle.lm.vocab.encode(&item.target))?;
        total = total.add(&loss.scale(n as f64))?;
        tokens += n;
    }
    Ok(total.scale(1.0 / tokens.max(1) as f64))
}

/// One AdamW update of the Q-Former. Returns the pre-update loss.
pub fn train_step(state: &mut TrainState, batch: &[BatchItem], lr: f64) -> Result<f64> {
    let loss = batch_loss(&state.bundle, batch)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence { step: state.step, loss: value });
    }
    loss.backward()?;
    state.opt.step(&mut state.bundle.qformer.params, lr);
    state.step += 1;
    Ok(value)
}

/// Earliest record with the highest held-in average.
pub fn best_validation(records: &[ValidationRecord]) -> Option<&ValidationRecord> {
    let mut best: Option<&ValidationRecord> = None;
    for r in records {
        if best.map_or(true, |b| r.average > b.average) {
            best = Some(r);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the validation-best step.
    pub best: ModelBundle,
    pub last: ModelBundle,
    pub report: TrainReport,
}

/// Full run: contamination check, mixture sampling, periodic validation and
/// best-checkpoint selection.
pub fn run(
    cfg: &TrainConfig,
    qcfg: &QFormerConfig,
    protocol: &Protocol,
    encoder: Arc<ImageEncoder>,
    lm: Arc<ToyLm>,
) -> Result<TrainOutcome> {
    let held_out: Vec<_> = protocol.held_out().cloned().collect();
    contamination_check(&protocol.held_in, &held_out)?;
    run_unchecked(cfg, qcfg, protocol, encoder, lm)
}

fn run_unchecked(
    cfg: &TrainConfig,
    qcfg: &QFormerConfig,
    protocol: &Protocol,
    encoder: Arc<ImageEncoder>,
    lm: Arc<ToyLm>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !lm.is_frozen() {
        return Err(Error::Contract("language model must be frozen before instruction tuning".into()));
    }
    let qcfg = QFormerConfig { mode: cfg.qformer_mode, vocab_size: lm.vocab.len(), llm_dim: lm.config.dim, ..qcfg.clone() };
    let qformer = QFormer::init(qcfg, cfg.seed)?;
    let mut state = TrainState { bundle: ModelBundle { encoder, lm, qformer }, opt: AdamW::new(cfg.adamw()), step: 0 };
    let schedule = MixtureSchedule::new(&protocol.held_in, cfg.sampler_mode)?;
    let lr = cfg.schedule();
    let mut rng = SplitMix64::derive(cfg.seed, "train-sampler");

    let mut report = TrainReport {
        schedule: schedule.clone(),
        steps: Vec::with_capacity(cfg.max_steps),
        validations: Vec::new(),
        best_step: 0,
        best_average: f64::NEG_INFINITY,
        sample_counts: schedule.names.iter().map(|n| (n.clone(), 0)).collect(),
    };
    let mut best = state.bundle.clone();
    for step in 0..cfg.max_steps {
        let samples =
            (0..cfg.batch_size).map(|_| next_sample(&schedule, protocol, &mut rng)).collect::<Result<Vec<_>>>()?;
        let batch = assemble(protocol, &samples, cfg.format_mode)?;
        let rate = lr.lr_at(step);
        let loss = train_step(&mut state, &batch, rate)?;
        let mut counts = BTreeMap::new();
        for item in &batch {
            *counts.entry(item.dataset.clone()).or_insert(0) += 1;
            *report.sample_counts.get_mut(&item.dataset).expect("scheduled dataset") += 1;
        }
        report.steps.push(StepRecord { step, loss, lr: rate, counts });

        let done = step + 1;
        let due = (cfg.validate_every > 0 && done % cfg.validate_every == 0) || done == cfg.max_steps;
        if due {
            let scores = held_in_scores(&state.bundle, protocol, cfg.format_mode, cfg.val_limit)?;
            let average = scores.values().sum::<f64>() / scores.len().max(1) as f64;
            if report.validations.is_empty() || average > report.best_average {
                report.best_average = average;
                report.best_step = done;
                best = state.bundle.clone();
            }
            report.validations.push(ValidationRecord { step: done, scores, average });
        }
    }
    Ok(TrainOutcome { best, last: state.bundle, report })
}
