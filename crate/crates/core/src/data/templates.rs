//! Instruction templates and input-format rendering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, SyntheticExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Captioning,
    Vqa,
    Vqg,
    Classification,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Captioning, TaskKind::Vqa, TaskKind::Vqg, TaskKind::Classification];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Captioning => "captioning",
            TaskKind::Vqa => "vqa",
            TaskKind::Vqg => "vqg",
            TaskKind::Classification => "classification",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::Parse(format!("unknown task kind `{s}`")))
    }
}

/// How the text input of a training example is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    /// Fill an instruction template.
    Instruction,
    /// Bare question (empty input for captioning).
    Plain,
    /// Plain input prefixed by `[task:dataset]`.
    TaskId,
}

impl FormatMode {
    pub const ALL: [FormatMode; 3] = [FormatMode::Instruction, FormatMode::Plain, FormatMode::TaskId];

    pub fn name(self) -> &'static str {
        match self {
            FormatMode::Instruction => "instruction",
            FormatMode::Plain => "plain",
            FormatMode::TaskId => "task_id",
        }
    }
}

impl fmt::Display for FormatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FormatMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown format mode {s:?} (expected instruction, plain or task_id)"))
    }
}

const CAPTIONING: &[&str] = &[
    "A short image caption:",
    "A short image description:",
    "A photo of",
    "An image that shows",
    "Write a short description for the image.",
    "Write a description for the photo.",
    "Provide a description of what is presented in the photo.",
    "Briefly describe the content of the image.",
    "Can you briefly explain what you see in the image?",
    "Could you use a few words to describe what you perceive in the photo?",
    "Please provide a short depiction of the picture.",
    "Using language, provide a short account of the image.",
    "Use a few words to illustrate what is happening in the picture.",
];

const VQA: &[&str] = &[
    "{Question}",
    "Question: {Question}",
    "{Question} A short answer to the question is",
    "Q: {Question} A:",
    "Question: {Question} Short answer:",
    "Given the image, answer the following question with no more than three words. {Question}",
    "Based on the image, respond to this question with a short answer: {Question}. Answer:",
    "Use the provided image to answer the question: {Question} Provide your answer as short as possible:",
    "What is the answer to the following question? \"{Question}\"",
    "The question \"{Question}\" can be answered using the image. A short answer is",
];

const VQG: &[&str] = &[
    "Given the image, generate a question whose answer is: {Answer}. Question:",
    "Based on the image, provide a question with the answer: {Answer}. Question:",
    "Given the visual representation, create a question for which the answer is \"{Answer}\".",
    "From the image provided, craft a question that leads to the reply: {Answer}. Question:",
    "Considering the picture, come up with a question where the answer is: {Answer}.",
    "Taking the image into account, generate an question that has the answer: {Answer}. Question:",
    "Write a question about the image whose answer is {Answer}. Question:",
    "Using the image, ask a question that can be answered with: {Answer}.",
    "The answer is \"{Answer}\". What question about the image leads to it?",
    "Look at the picture and pose a question with the answer {Answer}. Question:",
];

const CLASSIFICATION: &[&str] = &[
    "Is the following statement about the image true or false? \"{Question}\" Answer:",
    "Decide whether this statement matches the image: {Question}. Answer:",
    "True or false: {Question}",
    "Look at the image. {Question}. Is that true?",
    "Does the image support the statement \"{Question}\"? Answer:",
    "Statement: {Question} Is it correct? Short answer:",
    "Judge the claim using the photo: {Question}. Answer:",
    "Given the picture, tell whether {Question} is true. Answer:",
    "Is it true that {Question}? Answer briefly:",
    "Check this description against the image: {Question}. True or false?",
];

/// Zero-shot instruction strings used for held-out evaluation.
pub mod zero_shot {
    pub const VQA: &str = "Question: {Question} Short answer:";
    pub const VQA_OCR: &str = "OCR tokens: {OCR}. Question: {Question} Short answer:";
    pub const VQA_OPTIONS: &str = "Question: {Question} Options: {Options}. Short answer:";
    pub const CAPTIONING: &str = "A short image description:";
    pub const CLASSIFICATION: &str = "Based on the image, is this statement true or false? \"{Question}\" Answer:";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub task_kind: TaskKind,
    pub templates: Vec<String>,
    pub short_variant: Vec<bool>,
}

fn is_short_variant(template: &str) -> bool {
    let lower = template.to_lowercase();
    lower.contains("short") || lower.contains("briefly")
}

impl TemplateSet {
    pub fn new(task_kind: TaskKind, templates: Vec<String>) -> Self {
        let short_variant = templates.iter().map(|t| is_short_variant(t)).collect();
        Self {
            task_kind,
            templates,
            short_variant,
        }
    }

    pub fn standard(task_kind: TaskKind) -> Self {
        let src = match task_kind {
            TaskKind::Captioning => CAPTIONING,
            TaskKind::Vqa => VQA,
            TaskKind::Vqg => VQG,
            TaskKind::Classification => CLASSIFICATION,
        };
        Self::new(task_kind, src.iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Plain-text form: one template per line.
    pub fn to_text(&self) -> String {
        let mut out = self.templates.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(task_kind: TaskKind, text: &str) -> Self {
        Self::new(
            task_kind,
            text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
        )
    }
}

/// Options rendered alphabetically: `(a) blue (b) yellow`.
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {o}", (b'a' + i as u8) as char))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Substitutes `{Question}`, `{Answer}`, `{Options}` and `{OCR}`.
pub fn fill(template: &str, ex: &SyntheticExample) -> Result<String, DataError> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| DataError::Template(format!("unterminated placeholder in `{template}`")))?;
        let name = &after[..close];
        let value = match name {
            "Question" if !ex.question.is_empty() => ex.question.clone(),
            "Answer" if !ex.answer.is_empty() => ex.answer.clone(),
            "Options" if !ex.options.is_empty() => format_options(&ex.options),
            "OCR" if !ex.ocr_tokens.is_empty() => ex.ocr_tokens.join(" "),
            _ => return Err(DataError::Template(format!("cannot resolve placeholder {{{name}}}"))),
        };
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders `(input_text, target_text)` for one example.
pub fn instantiate(
    tset: &TemplateSet,
    dataset_name: &str,
    ex: &SyntheticExample,
    template_idx: usize,
    mode: FormatMode,
) -> Result<(String, String), DataError> {
    let target = match tset.task_kind {
        TaskKind::Vqg => ex.question.clone(),
        _ => ex.answer.clone(),
    };
    let input = match mode {
        FormatMode::Instruction => {
            let template = tset.templates.get(template_idx).ok_or_else(|| {
                DataError::Template(format!("template index {template_idx} out of range ({})", tset.len()))
            })?;
            fill(template, ex)?
        }
        FormatMode::Plain => plain_input(tset.task_kind, ex),
        FormatMode::TaskId => format!("[{}:{}] {}", tset.task_kind, dataset_name, plain_input(tset.task_kind, ex)),
    };
    Ok((input, target))
}

fn plain_input(kind: TaskKind, ex: &SyntheticExample) -> String {
    match kind {
        TaskKind::Captioning => String::new(),
        TaskKind::Vqa | TaskKind::Classification => ex.question.clone(),
        TaskKind::Vqg => ex.answer.clone(),
    }
}

/// Prefixes `OCR tokens: t1 t2. `; an empty token list leaves the input as is.
pub fn inject_ocr(input: &str, ocr_tokens: &[String]) -> String {
    if ocr_tokens.is_empty() {
        return input.to_string();
    }
    format!("OCR tokens: {}. {input}", ocr_tokens.join(" "))
}

/// Zero-shot instruction for held-out evaluation of `ex`.
pub fn zero_shot_input(kind: TaskKind, ex: &SyntheticExample) -> Result<String, DataError> {
    let template = match kind {
        TaskKind::Captioning => zero_shot::CAPTIONING,
        TaskKind::Vqa if !ex.ocr_tokens.is_empty() => zero_shot::VQA_OCR,
        TaskKind::Vqa if !ex.options.is_empty() => zero_shot::VQA_OPTIONS,
        TaskKind::Vqa => zero_shot::VQA,
        TaskKind::Classification => zero_shot::CLASSIFICATION,
        TaskKind::Vqg => VQG[0],
    };
    fill(template, ex)
}

/// Every template string known to the crate, for vocabulary construction.
pub fn all_template_strings() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = Vec::new();
    v.extend_from_slice(CAPTIONING);
    v.extend_from_slice(VQA);
    v.extend_from_slice(VQG);
    v.extend_from_slice(CLASSIFICATION);
    v.extend_from_slice(&[
        zero_shot::VQA,
        zero_shot::VQA_OCR,
        zero_shot::VQA_OPTIONS,
        zero_shot::CAPTIONING,
        zero_shot::CLASSIFICATION,
    ]);
    v
}
