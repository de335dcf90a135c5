use crate::rng::SplitMix64;
use crate::stubs::{Attribute, SyntheticImage};

use super::templates::{fill, zero_shot, TaskKind, TemplateSet};
use super::{caption, held_in_phrasings, held_in_question, held_out_question, statement, SyntheticExample, FALSE_LABEL, TRUE_LABEL};

/// Text-only sentences for language-model pretraining.
///
/// Scenes are described in words, followed by the same kinds of requests
/// the multimodal tasks make, so the model learns to read answers out of
/// its context. Image ids are drawn from a range no dataset uses.
pub fn pretrain_corpus(seed: u64, n: usize) -> Vec<String> {
    let mut rng = SplitMix64::derive(seed, "pretrain-corpus");
    let vqa = TemplateSet::standard(TaskKind::Vqa);
    let capt = TemplateSet::standard(TaskKind::Captioning);
    let vqg = TemplateSet::standard(TaskKind::Vqg);
    (0..n)
        .map(|i| {
            let image = SyntheticImage::random(900_000_000 + i as u64, &mut rng);
            let scene = caption(&image);
            match rng.below(6) {
                0..=2 => {
                    let rounds = 1;
                    let mut ocr = false;
                    let mut turns = Vec::new();
                    for _ in 0..rounds {
                        let attr = Attribute::ALL[rng.below(Attribute::ALL.len())];
                        ocr |= attr == Attribute::Text;
                        let phrasings = held_in_phrasings(attr);
                        let q = match rng.below(phrasings.len() + 1) {
                            k if k == phrasings.len() => held_out_question(attr),
                            k => phrasings[k],
                        };
                        let ex = SyntheticExample::new(image.clone(), q, image.word(attr));
                        let template = match rng.below(vqa.len() + 1) {
                            k if k == vqa.len() => zero_shot::VQA,
                            k => vqa.templates[k].as_str(),
                        };
                        let prompt = fill(template, &ex).expect("question template");
                        turns.push(format!("{prompt} {}", ex.answer));
                    }
                    let context = if ocr {
                        format!("{scene} . OCR tokens: {}.", image.word(Attribute::Text))
                    } else {
                        format!("{scene} .")
                    };
                    format!("{context} {}", turns.join(" . "))
                }
                3 => {
                    let template = &capt.templates[rng.below(capt.len())];
                    format!("{template} {scene}")
                }
                4 => {
                    let attr = Attribute::ALL[rng.below(Attribute::ALL.len() - 1)];
                    let ex = SyntheticExample::new(image.clone(), held_in_question(attr), image.word(attr));
                    let prompt = fill(&vqg.templates[rng.below(vqg.len())], &ex).expect("vqg template");
                    format!("{prompt} {}", ex.question)
                }
                _ => {
                    let turns: Vec<String> = (0..1 + rng.below(3))
                        .map(|_| {
                            let attr = Attribute::ALL[rng.below(Attribute::ALL.len() - 1)];
                            let truth = image.get(attr);
                            let holds = rng.below(2) == 0;
                            let value = if holds {
                                truth
                            } else {
                                (truth + 1 + rng.below(attr.cardinality() - 1)) % attr.cardinality()
                            };
                            let ex = SyntheticExample::new(image.clone(), &statement(attr, attr.word(value)), "");
                            let prompt = fill(zero_shot::CLASSIFICATION, &ex).expect("classification template");
                            format!("{prompt} {}", if holds { TRUE_LABEL } else { FALSE_LABEL })
                        })
                        .collect();
                    format!("{scene} . {}", turns.join(" . "))
                }
            }
        })
        .collect()
}
