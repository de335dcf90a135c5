//! Synthetic task registry and the held-in / held-out protocol.
//!
//! Every task is an attribute query over a [`SyntheticImage`], so ground
//! truth is exact. Held-in datasets supply training and validation
//! examples; held-out datasets are either an unseen dataset of a seen task
//! (`held_out_data`) or an entirely unseen task (`held_out_task`).

mod corpus;
pub mod manifest;
mod templates;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64;
use crate::rng::SplitMix64;
use crate::stubs::{Attribute, SyntheticImage};

pub use corpus::pretrain_corpus;
pub use templates::{
    all_template_strings, fill, format_options, inject_ocr, instantiate, zero_shot, zero_shot_input, FormatMode,
    TaskKind, TemplateSet,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("template error: {0}")]
    Template(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("protocol violation: {} held-out example(s) also appear in held-in training data: {}", hashes.len(), format_hashes(hashes))]
    Contamination { hashes: Vec<u64> },
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_hashes(hashes: &[u64]) -> String {
    hashes.iter().map(|h| format!("{h:016x}")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub image: SyntheticImage,
    /// Empty for captioning; the statement for classification.
    pub question: String,
    /// The caption for captioning, `true`/`false` for classification.
    pub answer: String,
    pub options: Vec<String>,
    pub ocr_tokens: Vec<String>,
    pub example_hash: u64,
}

/// FNV-1a over `image_id 0x1f question 0x1f answer`.
pub fn example_hash(image_id: u64, question: &str, answer: &str) -> u64 {
    fnv1a64(format!("{image_id}\u{1f}{question}\u{1f}{answer}").as_bytes())
}

impl SyntheticExample {
    pub fn new(image: SyntheticImage, question: &str, answer: &str) -> Self {
        let example_hash = example_hash(image.image_id, question, answer);
        Self {
            image,
            question: question.to_string(),
            answer: answer.to_string(),
            options: Vec::new(),
            ocr_tokens: Vec::new(),
            example_hash,
        }
    }

    pub fn hash_is_consistent(&self) -> bool {
        self.example_hash == example_hash(self.image.image_id, &self.question, &self.answer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub task_kind: TaskKind,
    pub held_in: bool,
    pub weight_override: f64,
    pub has_ocr: bool,
    /// Training examples for held-in datasets, evaluation examples otherwise.
    pub examples: Vec<SyntheticExample>,
    /// Held-in validation split.
    pub val_examples: Vec<SyntheticExample>,
}

impl DatasetSpec {
    pub fn size(&self) -> usize {
        self.examples.len()
    }
}

/// Question phrasings used by held-in datasets. The first is canonical and
/// is what question generation targets.
pub fn held_in_phrasings(attribute: Attribute) -> &'static [&'static str] {
    match attribute {
        Attribute::Color => &["what color is the shape ?", "what is the color of the shape ?", "what color is it ?"],
        Attribute::Shape => &["what shape is it ?", "what is the shape ?", "what kind of shape is this ?"],
        Attribute::Count => &["how many shapes are there ?", "how many shapes can you see ?", "what is the number of shapes ?"],
        Attribute::Size => &["what size is the shape ?", "what is the size of the shape ?", "what size is it ?"],
        Attribute::Texture => &["what texture does the shape have ?", "what is the texture of the shape ?", "what texture is it ?"],
        Attribute::Text => &["what word is written on the shape ?", "what is written on the shape ?", "what word is on it ?"],
    }
}

pub fn held_in_question(attribute: Attribute) -> &'static str {
    held_in_phrasings(attribute)[0]
}

/// Phrasing of the unseen held-out VQA dataset.
pub fn held_out_question(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::Color => "which color does the object have ?",
        Attribute::Shape => "which shape does the object have ?",
        Attribute::Count => "how many objects are in the picture ?",
        Attribute::Size => "which size does the object have ?",
        Attribute::Texture => "which texture does the object have ?",
        Attribute::Text => "which word can be read on the object ?",
    }
}

pub fn caption(image: &SyntheticImage) -> String {
    [
        Attribute::Count,
        Attribute::Size,
        Attribute::Color,
        Attribute::Texture,
        Attribute::Shape,
    ]
    .iter()
    .map(|&a| image.word(a))
    .collect::<Vec<_>>()
    .join(" ")
}

pub fn statement(attribute: Attribute, word: &str) -> String {
    format!("the {attribute} is {word}")
}

pub const TRUE_LABEL: &str = "true";
pub const FALSE_LABEL: &str = "false";

/// What a dataset's examples ask about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Recipe {
    Caption,
    Question { attributes: &'static [Attribute], held_out_phrasing: bool },
    Generate { attributes: &'static [Attribute] },
    Verify { attributes: &'static [Attribute] },
}

const VQA_A: &[Attribute] = &[Attribute::Color, Attribute::Shape];
const VQA_B: &[Attribute] = &[Attribute::Count, Attribute::Size, Attribute::Texture, Attribute::Text];
const VISUAL: &[Attribute] = &[
    Attribute::Color,
    Attribute::Shape,
    Attribute::Count,
    Attribute::Size,
    Attribute::Texture,
];

fn make_example(recipe: Recipe, image: SyntheticImage, rng: &mut SplitMix64, ocr: bool) -> SyntheticExample {
    let pick = |attrs: &'static [Attribute], rng: &mut SplitMix64| attrs[rng.below(attrs.len())];
    let mut ex = match recipe {
        Recipe::Caption => {
            let c = caption(&image);
            SyntheticExample::new(image, "", &c)
        }
        Recipe::Question {
            attributes,
            held_out_phrasing,
        } => {
            let a = pick(attributes, rng);
            let q = if held_out_phrasing {
                held_out_question(a)
            } else {
                let options = held_in_phrasings(a);
                options[rng.below(options.len())]
            };
            let answer = image.word(a);
            SyntheticExample::new(image, q, answer)
        }
        Recipe::Generate { attributes } => {
            let a = pick(attributes, rng);
            let answer = image.word(a);
            SyntheticExample::new(image, held_in_question(a), answer)
        }
        Recipe::Verify { attributes } => {
            let a = pick(attributes, rng);
            let truth = image.get(a);
            let holds = rng.below(2) == 0;
            let value = if holds {
                truth
            } else {
                (truth + 1 + rng.below(a.cardinality() - 1)) % a.cardinality()
            };
            let label = if holds { TRUE_LABEL } else { FALSE_LABEL };
            SyntheticExample::new(image, &statement(a, a.word(value)), label)
        }
    };
    if ocr {
        ex.ocr_tokens = vec![ex.image.word(Attribute::Text).to_string()];
    }
    ex
}

fn make_examples(
    seed: u64,
    name: &str,
    id_base: u64,
    count: usize,
    recipe: Recipe,
    ocr: bool,
) -> Vec<SyntheticExample> {
    let mut rng = SplitMix64::derive(seed, &format!("dataset/{name}/{id_base}"));
    (0..count)
        .map(|i| {
            let image = SyntheticImage::random(id_base + i as u64, &mut rng);
            make_example(recipe, image, &mut rng, ocr)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub captioning_size: usize,
    pub vqa_a_size: usize,
    pub vqa_b_size: usize,
    pub vqg_size: usize,
    pub held_out_size: usize,
    pub val_size: usize,
    /// Multiplicative factors on the balanced sampling weight, by dataset.
    pub weight_overrides: BTreeMap<String, f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            captioning_size: 2000,
            vqa_a_size: 800,
            vqa_b_size: 250,
            vqg_size: 80,
            held_out_size: 200,
            val_size: 48,
            weight_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub held_in: Vec<DatasetSpec>,
    pub held_out_data: Vec<DatasetSpec>,
    pub held_out_task: Vec<DatasetSpec>,
    pub templates: BTreeMap<TaskKind, TemplateSet>,
}

pub const CAPT_A: &str = "synth-capt-A";
pub const VQA_A_NAME: &str = "synth-vqa-A";
pub const VQA_B_NAME: &str = "synth-vqa-B";
pub const VQG_A: &str = "synth-vqg-A";
pub const VQA_C: &str = "synth-vqa-C";
pub const CLS_A: &str = "synth-cls-A";

/// Builds the synthetic registry: four held-in datasets, one unseen dataset
/// of a seen task, and one unseen task.
pub fn build_protocol(seed: u64, cfg: &ProtocolConfig) -> Protocol {
    struct Entry {
        name: &'static str,
        kind: TaskKind,
        recipe: Recipe,
        size: usize,
        ocr: bool,
    }
    let held_out_recipe = Recipe::Question {
        attributes: VISUAL,
        held_out_phrasing: true,
    };
    let held_in = [
        Entry {
            name: CAPT_A,
            kind: TaskKind::Captioning,
            recipe: Recipe::Caption,
            size: cfg.captioning_size,
            ocr: false,
        },
        Entry {
            name: VQA_A_NAME,
            kind: TaskKind::Vqa,
            recipe: Recipe::Question {
                attributes: VQA_A,
                held_out_phrasing: false,
            },
            size: cfg.vqa_a_size,
            ocr: false,
        },
        Entry {
            name: VQA_B_NAME,
            kind: TaskKind::Vqa,
            recipe: Recipe::Question {
                attributes: VQA_B,
                held_out_phrasing: false,
            },
            size: cfg.vqa_b_size,
            ocr: true,
        },
        Entry {
            name: VQG_A,
            kind: TaskKind::Vqg,
            recipe: Recipe::Generate { attributes: VISUAL },
            size: cfg.vqg_size,
            ocr: false,
        },
    ];
    let held_out = [
        (
            Entry {
                name: VQA_C,
                kind: TaskKind::Vqa,
                recipe: held_out_recipe,
                size: cfg.held_out_size,
                ocr: false,
            },
            false,
        ),
        (
            Entry {
                name: CLS_A,
                kind: TaskKind::Classification,
                recipe: Recipe::Verify { attributes: VISUAL },
                size: cfg.held_out_size,
                ocr: false,
            },
            true,
        ),
    ];

    let weight = |name: &str| cfg.weight_overrides.get(name).copied().unwrap_or(1.0);
    let id_base = |slot: u64| (slot + 1) * 1_000_000;

    let held_in = held_in
        .iter()
        .enumerate()
        .map(|(slot, e)| DatasetSpec {
            name: e.name.to_string(),
            task_kind: e.kind,
            held_in: true,
            weight_override: weight(e.name),
            has_ocr: e.ocr,
            examples: make_examples(seed, e.name, id_base(slot as u64), e.size, e.recipe, e.ocr),
            val_examples: make_examples(seed, e.name, id_base(slot as u64) + 500_000, cfg.val_size, e.recipe, e.ocr),
        })
        .collect();

    let mut held_out_data = Vec::new();
    let mut held_out_task = Vec::new();
    for (slot, (e, unseen_task)) in held_out.iter().enumerate() {
        let spec = DatasetSpec {
            name: e.name.to_string(),
            task_kind: e.kind,
            held_in: false,
            weight_override: weight(e.name),
            has_ocr: e.ocr,
            examples: make_examples(seed, e.name, id_base(10 + slot as u64), e.size, e.recipe, e.ocr),
            val_examples: Vec::new(),
        };
        if *unseen_task {
            held_out_task.push(spec);
        } else {
            held_out_data.push(spec);
        }
    }

    Protocol {
        held_in,
        held_out_data,
        held_out_task,
        templates: TaskKind::ALL.iter().map(|&k| (k, TemplateSet::standard(k))).collect(),
    }
}

impl Protocol {
    pub fn held_out(&self) -> impl Iterator<Item = &DatasetSpec> {
        self.held_out_data.iter().chain(&self.held_out_task)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &DatasetSpec> {
        self.held_in.iter().chain(self.held_out())
    }

    pub fn find(&self, name: &str) -> Result<&DatasetSpec, DataError> {
        self.datasets()
            .find(|d| d.name == name)
            .ok_or_else(|| DataError::UnknownDataset(name.to_string()))
    }

    pub fn templates_for(&self, kind: TaskKind) -> &TemplateSet {
        &self.templates[&kind]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for d in self.datasets() {
            if let Some(bad) = d.examples.iter().chain(&d.val_examples).find(|e| !e.hash_is_consistent()) {
                return Err(DataError::Invariant(format!(
                    "dataset {}: example hash {:016x} does not match its content",
                    d.name, bad.example_hash
                )));
            }
            if d.held_in && d.examples.is_empty() {
                return Err(DataError::Invariant(format!("held-in dataset {} is empty", d.name)));
            }
            if !(d.weight_override > 0.0) {
                return Err(DataError::Invariant(format!("dataset {}: weight override must be positive", d.name)));
            }
        }
        for d in &self.held_in {
            let t = self.templates_for(d.task_kind);
            if !(10..=15).contains(&t.len()) {
                return Err(DataError::Invariant(format!(
                    "{} templates for {} (need 10 to 15)",
                    t.len(),
                    d.task_kind
                )));
            }
        }
        Ok(())
    }
}

/// Training-format `(input, target)` for an example of `dataset`. OCR
/// datasets get their tokens injected once, in every format mode.
pub fn render(
    protocol: &Protocol,
    dataset: &DatasetSpec,
    ex: &SyntheticExample,
    template_idx: usize,
    mode: FormatMode,
) -> Result<(String, String), DataError> {
    let (input, target) = instantiate(protocol.templates_for(dataset.task_kind), &dataset.name, ex, template_idx, mode)?;
    let input = if dataset.has_ocr { inject_ocr(&input, &ex.ocr_tokens) } else { input };
    Ok((input, target))
}

/// Fixed template choice for validation examples.
pub fn validation_template(ex: &SyntheticExample, n_templates: usize) -> usize {
    (ex.example_hash % n_templates.max(1) as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub example_hash: u64,
    pub held_in: String,
    pub held_out: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub violations: Vec<Violation>,
}

impl ContaminationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every `(hash, held-in dataset, held-out dataset)` triple where a held-out
/// evaluation example also occurs among held-in training examples.
pub fn contamination_report(held_in: &[DatasetSpec], held_out: &[DatasetSpec]) -> ContaminationReport {
    let mut seen: HashMap<u64, Vec<&str>> = HashMap::new();
    for d in held_in {
        for e in &d.examples {
            let owners = seen.entry(e.example_hash).or_default();
            if !owners.contains(&d.name.as_str()) {
                owners.push(&d.name);
            }
        }
    }
    let mut violations = Vec::new();
    for d in held_out {
        for e in &d.examples {
            if let Some(owners) = seen.get(&e.example_hash) {
                for owner in owners {
                    violations.push(Violation {
                        example_hash: e.example_hash,
                        held_in: owner.to_string(),
                        held_out: d.name.clone(),
                    });
                }
            }
        }
    }
    ContaminationReport { violations }
}

/// Fails with the offending hashes unless held-in and held-out are disjoint.
pub fn contamination_check(held_in: &[DatasetSpec], held_out: &[DatasetSpec]) -> Result<ContaminationReport, DataError> {
    let report = contamination_report(held_in, held_out);
    if report.is_clean() {
        Ok(report)
    } else {
        let mut hashes: Vec<u64> = report.violations.iter().map(|v| v.example_hash).collect();
        hashes.dedup();
        Err(DataError::Contamination { hashes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ProtocolConfig {
        ProtocolConfig {
            captioning_size: 40,
            vqa_a_size: 30,
            vqa_b_size: 20,
            vqg_size: 10,
            held_out_size: 25,
            val_size: 5,
            ..Default::default()
        }
    }

    #[test]
    fn protocol_split_types() {
        let p = build_protocol(3, &small());
        let held_in_kinds: Vec<TaskKind> = p.held_in.iter().map(|d| d.task_kind).collect();
        for d in &p.held_out_task {
            assert!(!held_in_kinds.contains(&d.task_kind));
        }
        for d in &p.held_out_data {
            assert!(held_in_kinds.contains(&d.task_kind));
        }
        assert!(contamination_check(&p.held_in, &p.held_out().cloned().collect::<Vec<_>>())
            .unwrap()
            .is_clean());
        p.validate().unwrap();
        assert_eq!(p.find(VQA_B_NAME).unwrap().size(), 20);
    }

    #[test]
    fn protocol_is_deterministic() {
        assert_eq!(build_protocol(9, &small()), build_protocol(9, &small()));
        assert_ne!(build_protocol(9, &small()), build_protocol(10, &small()));
    }

    #[test]
    fn examples_are_well_formed() {
        let p = build_protocol(5, &small());
        for d in p.datasets() {
            for e in &d.examples {
                assert!(e.hash_is_consistent());
                e.image.validate().unwrap();
                assert_eq!(d.has_ocr, !e.ocr_tokens.is_empty());
                match d.task_kind {
                    TaskKind::Captioning => assert_eq!(e.answer, caption(&e.image)),
                    TaskKind::Classification => assert!(e.answer == TRUE_LABEL || e.answer == FALSE_LABEL),
                    _ => assert!(!e.question.is_empty()),
                }
                for idx in 0..p.templates_for(d.task_kind).len() {
                    let (input, _) = instantiate(p.templates_for(d.task_kind), &d.name, e, idx, FormatMode::Instruction)
                        .unwrap();
                    assert!(!input.contains('{'), "{input}");
                }
            }
        }
    }

    #[test]
    fn planted_duplicate_is_caught() {
        let mut p = build_protocol(1, &small());
        let held_out: Vec<DatasetSpec> = p.held_out().cloned().collect();
        let planted = held_out[0].examples[3].clone();
        p.held_in[1].examples.push(planted.clone());
        let report = contamination_report(&p.held_in, &held_out);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].example_hash, planted.example_hash);
        match contamination_check(&p.held_in, &held_out) {
            Err(DataError::Contamination { hashes }) => assert_eq!(hashes, vec![planted.example_hash]),
            other => panic!("expected contamination, got {other:?}"),
        }
    }

    #[test]
    fn same_image_different_question_is_not_a_violation() {
        let p = build_protocol(1, &small());
        let mut a = p.held_out_data[0].clone();
        let original = a.examples[0].clone();
        let other_q = SyntheticExample::new(original.image.clone(), "what shape is it ?", "zzz");
        let mut held_in = p.held_in.clone();
        held_in[0].examples.push(other_q);
        a.examples.truncate(1);
        assert!(contamination_report(&held_in, &[a]).is_clean());
    }

    #[test]
    fn verify_examples_are_balanced_and_correct() {
        let p = build_protocol(2, &ProtocolConfig {
            held_out_size: 400,
            ..small()
        });
        let cls = &p.held_out_task[0];
        let trues = cls.examples.iter().filter(|e| e.answer == TRUE_LABEL).count();
        assert!((150..250).contains(&trues), "{trues}");
        for e in &cls.examples {
            let word = e.question.rsplit(' ').next().unwrap();
            let attr = Attribute::ALL.iter().find(|a| e.question.starts_with(&format!("the {a} is"))).unwrap();
            assert_eq!(e.image.word(*attr) == word, e.answer == TRUE_LABEL);
        }
    }
}
