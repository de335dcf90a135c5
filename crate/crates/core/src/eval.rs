//! Inference paths, metrics and the ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{render, validation_template, zero_shot_input, FormatMode, Protocol, TaskKind, FALSE_LABEL, TRUE_LABEL};
use crate::error::{Error, Result};
use crate::lm::{normalize, ToyLm, EOS};
use crate::mixture::SamplerMode;
use crate::model::ModelBundle;
use crate::qformer::{QFormerConfig, QFormerMode};
use crate::stubs::{ImageEncoder, SyntheticImage};
use crate::tensor::no_grad;
use crate::train::{run, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Best verbalizer's log-likelihood.
    Max,
    /// Log of the summed verbalizer probabilities.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizerMap {
    pub classes: Vec<(String, Vec<String>)>,
}

impl Default for VerbalizerMap {
    fn default() -> Self {
        Self {
            classes: vec![
                (TRUE_LABEL.into(), vec!["true".into(), "yes".into()]),
                (FALSE_LABEL.into(), vec!["false".into(), "no".into()]),
            ],
        }
    }
}

impl VerbalizerMap {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("verbalizer map has no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for (label, words) in &self.classes {
            if words.is_empty() {
                return Err(Error::Config(format!("class {label:?} has no verbalizers")));
            }
            for w in words {
                if !seen.insert(normalize(w)) {
                    return Err(Error::Config(format!("verbalizer {w:?} appears in more than one class")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub length_normalize: bool,
    pub aggregation: Aggregation,
    pub verbalizers: VerbalizerMap,
    /// Held-out examples scored per dataset; 0 means all.
    pub held_out_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            length_normalize: false,
            aggregation: Aggregation::Max,
            verbalizers: VerbalizerMap::default(),
            held_out_limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: String,
    pub logprob: f64,
    pub rank: usize,
}

/// Greedy generation, detokenized.
pub fn predict_generate(bundle: &ModelBundle, image: &SyntheticImage, input: &str, max_new_tokens: usize) -> Result<String> {
    no_grad(|| {
        let prompt = bundle.soft_prompt(image, input)?;
        let out = bundle.lm.greedy_decode(&prompt, &bundle.lm.prompt_ids(input), max_new_tokens)?;
        Ok(bundle.lm.vocab.decode(&out.ids))
    })
}

/// Ranks are a permutation of `1..=n`, highest log-likelihood first, ties to
/// the earlier candidate. Scores come back in candidate order.
fn assign_ranks(candidates: &[String], logprobs: Vec<f64>) -> Vec<CandidateScore> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; candidates.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    candidates
        .iter()
        .zip(logprobs)
        .zip(ranks)
        .map(|((c, logprob), rank)| CandidateScore { candidate: c.clone(), logprob, rank })
        .collect()
}

/// Log-likelihood of each candidate followed by EOS.
pub fn rank_candidates(
    bundle: &ModelBundle,
    image: &SyntheticImage,
    input: &str,
    candidates: &[String],
    length_normalize: bool,
) -> Result<Vec<CandidateScore>> {
    if candidates.is_empty() {
        return Err(Error::Contract("candidate list is empty".into()));
    }
    let logprobs = no_grad(|| {
        let prompt = bundle.soft_prompt(image, input)?;
        let ids = bundle.lm.prompt_ids(input);
        candidates
            .iter()
            .map(|c| {
                let mut cont = bundle.lm.vocab.encode(c);
                cont.push(EOS);
                let lp = bundle.lm.sequence_logprob(&prompt, &ids, &cont)?;
                Ok(if length_normalize { lp / cont.len() as f64 } else { lp })
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(assign_ranks(candidates, logprobs))
}

pub fn top_candidate(scores: &[CandidateScore]) -> Option<&CandidateScore> {
    scores.iter().find(|s| s.rank == 1)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-class scores in declaration order.
pub fn class_scores(scores: &[CandidateScore], vmap: &VerbalizerMap, aggregation: Aggregation) -> Vec<f64> {
    let mut at = 0;
    vmap.classes
        .iter()
        .map(|(_, words)| {
            let lps: Vec<f64> = scores[at..at + words.len()].iter().map(|s| s.logprob).collect();
            at += words.len();
            match aggregation {
                Aggregation::Max => lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Sum => log_sum_exp(&lps),
            }
        })
        .collect()
}

/// Winning class label; ties go to the class declared first.
pub fn classify_with_verbalizers(
    bundle: &ModelBundle,
    image: &SyntheticImage,
    input: &str,
    vmap: &VerbalizerMap,
    aggregation: Aggregation,
    length_normalize: bool,
) -> Result<String> {
    vmap.validate()?;
    let flat: Vec<String> = vmap.classes.iter().flat_map(|(_, w)| w.iter().cloned()).collect();
    let scores = rank_candidates(bundle, image, input, &flat, length_normalize)?;
    let per_class = class_scores(&scores, vmap, aggregation);
    let mut best = 0;
    for (i, &s) in per_class.iter().enumerate() {
        if s > per_class[best] {
            best = i;
        }
    }
    Ok(vmap.classes[best].0.clone())
}

/// Exact match after whitespace normalization.
pub fn metric_accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!("{} predictions for {} golds", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| normalize(p) == normalize(g)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean of `1 / rank(gold)`.
pub fn metric_mrr(ranked: &[Vec<CandidateScore>], gold_indices: &[usize]) -> Result<f64> {
    if ranked.len() != gold_indices.len() {
        return Err(Error::Contract(format!("{} rankings for {} golds", ranked.len(), gold_indices.len())));
    }
    if ranked.is_empty() {
        return Err(Error::Contract("no rankings to score".into()));
    }
    let mut total = 0.0;
    for (scores, &g) in ranked.iter().zip(gold_indices) {
        let s = scores.get(g).ok_or_else(|| Error::Contract(format!("gold index {g} out of range")))?;
        total += 1.0 / s.rank as f64;
    }
    Ok(total / ranked.len() as f64)
}

fn limited<T>(items: &[T], limit: usize) -> &[T] {
    if limit == 0 {
        items
    } else {
        &items[..items.len().min(limit)]
    }
}

/// Generation accuracy on each held-in validation split, in the model's own
/// training format. Template choice is fixed per example.
pub fn held_in_scores(bundle: &ModelBundle, protocol: &Protocol, mode: FormatMode, limit: usize) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for d in &protocol.held_in {
        let n_templates = protocol.templates_for(d.task_kind).len();
        let (mut preds, mut golds) = (Vec::new(), Vec::new());
        for ex in limited(&d.val_examples, limit) {
            let (input, target) = render(protocol, d, ex, validation_template(ex, n_templates), mode)?;
            let budget = bundle.lm.vocab.encode(&target).len() + 2;
            preds.push(predict_generate(bundle, &ex.image, &input, budget)?);
            golds.push(target);
        }
        if !preds.is_empty() {
            out.insert(d.name.clone(), metric_accuracy(&preds, &golds)?);
        }
    }
    Ok(out)
}

/// Zero-shot accuracy on every held-out dataset, always with the fixed
/// evaluation instructions. Classification goes through verbalizers,
/// multiple choice through candidate ranking, the rest through generation.
pub fn held_out_scores(bundle: &ModelBundle, protocol: &Protocol, cfg: &EvalConfig) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for d in protocol.held_out() {
        let (mut preds, mut golds) = (Vec::new(), Vec::new());
        for ex in limited(&d.examples, cfg.held_out_limit) {
            let input = zero_shot_input(d.task_kind, ex)?;
            let pred = match d.task_kind {
                TaskKind::Classification => classify_with_verbalizers(
                    bundle,
                    &ex.image,
                    &input,
                    &cfg.verbalizers,
                    cfg.aggregation,
                    cfg.length_normalize,
                )?,
                _ if !ex.options.is_empty() => {
                    let scores = rank_candidates(bundle, &ex.image, &input, &ex.options, cfg.length_normalize)?;
                    top_candidate(&scores).expect("non-empty ranking").candidate.clone()
                }
                _ => predict_generate(bundle, &ex.image, &input, cfg.max_new_tokens)?,
            };
            preds.push(pred);
            golds.push(ex.answer.clone());
        }
        if !preds.is_empty() {
            out.insert(d.name.clone(), metric_accuracy(&preds, &golds)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AblationCell {
    pub qformer_mode: QFormerMode,
    pub sampler_mode: SamplerMode,
    pub format_mode: FormatMode,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.qformer_mode, self.sampler_mode, self.format_mode)
    }
}

impl std::str::FromStr for AblationCell {
    type Err = String;
    /// Parses the `qformer/sampler/format` label.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('/').collect();
        let [q, m, f] = parts[..] else {
            return Err(format!("cell {s:?} is not of the form qformer/sampler/format"));
        };
        Ok(Self { qformer_mode: q.parse()?, sampler_mode: m.parse()?, format_mode: f.parse()? })
    }
}

/// All twelve combinations.
pub fn full_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for qformer_mode in QFormerMode::ALL {
        for sampler_mode in SamplerMode::ALL {
            for format_mode in FormatMode::ALL {
                cells.push(AblationCell { qformer_mode, sampler_mode, format_mode });
            }
        }
    }
    cells
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub seed: u64,
    pub best_step: usize,
    pub held_in: BTreeMap<String, f64>,
    pub held_out: BTreeMap<String, f64>,
    pub held_in_mean: f64,
    /// Unseen datasets of seen tasks.
    pub type1_mean: f64,
    /// Unseen tasks.
    pub type2_mean: f64,
    pub held_out_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: AblationCell,
    pub seeds: usize,
    pub held_in_mean: f64,
    pub type1_mean: f64,
    pub type2_mean: f64,
    pub held_out_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub results: Vec<CellResult>,
}

impl AblationReport {
    pub fn summary(&self, cell: AblationCell) -> Option<CellSummary> {
        let rows: Vec<&CellResult> = self.results.iter().filter(|r| r.cell == cell).collect();
        if rows.is_empty() {
            return None;
        }
        Some(CellSummary {
            cell,
            seeds: rows.len(),
            held_in_mean: mean(rows.iter().map(|r| r.held_in_mean)),
            type1_mean: mean(rows.iter().map(|r| r.type1_mean)),
            type2_mean: mean(rows.iter().map(|r| r.type2_mean)),
            held_out_mean: mean(rows.iter().map(|r| r.held_out_mean)),
        })
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let set: BTreeSet<AblationCell> = self.results.iter().map(|r| r.cell).collect();
        set.into_iter().collect()
    }

    /// Per-seed rows then per-cell means, tab separated, accuracies in
    /// percent.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cell\tseed\tbest_step\theld_in\ttype1\ttype2\theld_out\n");
        for r in &self.results {
            out += &format!(
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
                r.cell.label(),
                r.seed,
                r.best_step,
                100.0 * r.held_in_mean,
                100.0 * r.type1_mean,
                100.0 * r.type2_mean,
                100.0 * r.held_out_mean
            );
        }
        for cell in self.cells() {
            let s = self.summary(cell).expect("cell present");
            out += &format!(
                "{}\tmean({})\t-\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
                cell.label(),
                s.seeds,
                100.0 * s.held_in_mean,
                100.0 * s.type1_mean,
                100.0 * s.type2_mean,
                100.0 * s.held_out_mean
            );
        }
        out
    }

    /// The three ablation directions, each comparing cells that differ in one
    /// factor. Margins are in accuracy points.
    pub fn direction_checks(&self) -> Vec<DirectionCheck> {
        use FormatMode::*;
        use QFormerMode::*;
        use SamplerMode::*;
        let cell = |q, s, f| AblationCell { qformer_mode: q, sampler_mode: s, format_mode: f };
        let pts = |c: AblationCell, f: fn(&CellSummary) -> f64| self.summary(c).map_or(f64::NAN, |s| 100.0 * f(&s));
        let mut checks = Vec::new();

        let aware = pts(cell(Aware, Balanced, Instruction), |s| s.type1_mean);
        let agnostic = pts(cell(Agnostic, Balanced, Instruction), |s| s.type1_mean);
        checks.push(DirectionCheck {
            name: "type-1 held-out: aware - agnostic >= 5".into(),
            lhs: aware,
            rhs: agnostic,
            passed: aware - agnostic >= 5.0,
        });

        let balanced = pts(cell(Aware, Balanced, Instruction), |s| s.held_in_mean);
        let uniform = pts(cell(Aware, Uniform, Instruction), |s| s.held_in_mean);
        checks.push(DirectionCheck {
            name: "held-in: balanced >= uniform".into(),
            lhs: balanced,
            rhs: uniform,
            passed: balanced >= uniform,
        });

        let instr_out = pts(cell(Aware, Balanced, Instruction), |s| s.held_out_mean);
        let plain_out = pts(cell(Aware, Balanced, Plain), |s| s.held_out_mean);
        checks.push(DirectionCheck {
            name: "held-out: instruction - plain >= 5".into(),
            lhs: instr_out,
            rhs: plain_out,
            passed: instr_out - plain_out >= 5.0,
        });
        let instr_in = pts(cell(Aware, Balanced, Instruction), |s| s.held_in_mean);
        let plain_in = pts(cell(Aware, Balanced, Plain), |s| s.held_in_mean);
        checks.push(DirectionCheck {
            name: "held-in: |instruction - plain| < 5".into(),
            lhs: instr_in,
            rhs: plain_in,
            passed: (instr_in - plain_in).abs() < 5.0,
        });
        checks
    }
}

/// Everything a grid run shares across cells.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub train: TrainConfig,
    pub qformer: QFormerConfig,
    pub eval: EvalConfig,
    pub protocol: &'a Protocol,
    pub encoder: Arc<ImageEncoder>,
    pub lm: Arc<ToyLm>,
}

/// Trains and evaluates one cell for one seed.
pub fn run_cell(setup: &AblationSetup<'_>, cell: AblationCell, seed: u64) -> Result<CellResult> {
    let cfg = TrainConfig {
        seed,
        qformer_mode: cell.qformer_mode,
        sampler_mode: cell.sampler_mode,
        format_mode: cell.format_mode,
        ..setup.train.clone()
    };
    let outcome = run(&cfg, &setup.qformer, setup.protocol, setup.encoder.clone(), setup.lm.clone())?;
    let held_in = held_in_scores(&outcome.best, setup.protocol, cell.format_mode, 0)?;
    let held_out = held_out_scores(&outcome.best, setup.protocol, &setup.eval)?;
    let pick = |names: &[String]| mean(names.iter().filter_map(|n| held_out.get(n).copied()));
    let type1: Vec<String> = setup.protocol.held_out_data.iter().map(|d| d.name.clone()).collect();
    let type2: Vec<String> = setup.protocol.held_out_task.iter().map(|d| d.name.clone()).collect();
    Ok(CellResult {
        cell,
        seed,
        best_step: outcome.report.best_step,
        held_in_mean: mean(held_in.values().copied()),
        type1_mean: pick(&type1),
        type2_mean: pick(&type2),
        held_out_mean: mean(held_out.values().copied()),
        held_in,
        held_out,
    })
}

/// Runs every cell for every seed. `progress` sees each result as it lands.
pub fn run_ablation_suite(
    setup: &AblationSetup<'_>,
    cells: &[AblationCell],
    seeds: &[u64],
    progress: &mut dyn FnMut(&CellResult),
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut report = AblationReport::default();
    for &cell in cells {
        for &seed in seeds {
            let r = run_cell(setup, cell, seed)?;
            progress(&r);
            report.results.push(r);
        }
    }
    Ok(report)
}
