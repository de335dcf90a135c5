use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{
    all_template_strings, held_in_phrasings, held_out_question, statement, TaskKind, CAPT_A, CLS_A, FALSE_LABEL,
    TRUE_LABEL, VQA_A_NAME, VQA_B_NAME, VQA_C, VQG_A,
};
use crate::stubs::Attribute;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace; every non-alphanumeric character is
/// a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical spacing used for exact-match comparison.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Special tokens followed by every word appearing in templates,
    /// questions, attribute values and task identifiers, sorted.
    pub fn standard() -> Self {
        let mut texts: Vec<String> = all_template_strings().iter().map(|s| s.to_string()).collect();
        for a in Attribute::ALL {
            texts.extend(held_in_phrasings(a).iter().map(|q| q.to_string()));
            texts.push(held_out_question(a).into());
            texts.push(statement(a, ""));
            texts.extend(a.words().iter().map(|w| w.to_string()));
        }
        for k in TaskKind::ALL {
            texts.push(k.name().into());
        }
        for name in [CAPT_A, VQA_A_NAME, VQA_B_NAME, VQG_A, VQA_C, CLS_A] {
            texts.push(format!("[{name}]"));
        }
        texts.extend([TRUE_LABEL, FALSE_LABEL, "yes", "no", "(a) (b) (c) (d)"].map(String::from));
        let words: BTreeSet<String> = texts.iter().flat_map(|t| tokenize(t)).collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, stopping at EOS and skipping
    /// padding / BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("Question: What \"color\"?  [vqa:synth-vqa-A]"),
            ["question", ":", "what", "\"", "color", "\"", "?", "[", "vqa", ":", "synth", "-", "vqa", "-", "a", "]"]
        );
        assert_eq!(normalize("  a   red\tsquare "), "a red square");
    }

    #[test]
    fn standard_vocab_covers_pipeline_text() {
        let v = Vocabulary::standard();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(EOS), "<eos>");
        let unique: BTreeSet<&String> = v.tokens().iter().collect();
        assert_eq!(unique.len(), v.len());
        for t in all_template_strings() {
            assert!(!v.encode(t).contains(&UNK), "{t}");
        }
        assert_eq!(v.encode("zebra"), vec![UNK]);
        let ids = v.encode("three large red striped square");
        assert_eq!(v.decode(&ids), "three large red striped square");
        assert!(v.len() < 260, "{}", v.len());
    }

    #[test]
    fn json_round_trip_restores_lookup() {
        let v = Vocabulary::standard();
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back.id("square"), v.id("square"));
        assert_eq!(back, v);
    }
}
