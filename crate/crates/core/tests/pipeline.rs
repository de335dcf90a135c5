//! Cross-module flows: protocol on disk, training, checkpoints, scoring.

use std::sync::Arc;

use proptest::prelude::*;
use querytune::checkpoint::Checkpoint;
use querytune::data::manifest::{read_protocol, write_protocol};
use querytune::data::{build_protocol, contamination_check, Protocol, ProtocolConfig};
use querytune::eval::{classify_with_verbalizers, rank_candidates, top_candidate, Aggregation, VerbalizerMap};
use querytune::lm::{ToyLm, ToyLmConfig, Vocabulary};
use querytune::mixture::{mixture_weights, MixtureSchedule, SamplerMode};
use querytune::model::ModelBundle;
use querytune::nn::Module;
use querytune::qformer::{QFormer, QFormerConfig};
use querytune::rng::SplitMix64;
use querytune::stubs::{ImageEncoder, StubConfig, SyntheticImage};
use querytune::train::{self, TrainConfig, TrainOutcome};

fn small_protocol(seed: u64) -> Protocol {
    build_protocol(
        seed,
        &ProtocolConfig { captioning_size: 16, vqa_a_size: 12, vqa_b_size: 8, vqg_size: 6, held_out_size: 6, val_size: 3, ..Default::default() },
    )
}

fn small_lm() -> Arc<ToyLm> {
    let mut lm = ToyLm::init(ToyLmConfig { dim: 16, layers: 1, heads: 2, ffn_dim: 16, ..Default::default() }, Vocabulary::standard(), 3);
    lm.freeze();
    Arc::new(lm)
}

fn small_qformer() -> QFormerConfig {
    QFormerConfig { num_queries: 2, dim: 8, layers: 1, heads: 2, ffn_dim: 8, ..Default::default() }
}

fn short_run(protocol: &Protocol, seed: u64) -> TrainOutcome {
    let cfg = TrainConfig { max_steps: 12, batch_size: 2, warmup_steps: 3, validate_every: 6, val_limit: 2, seed, ..Default::default() };
    train::run(&cfg, &small_qformer(), protocol, Arc::new(ImageEncoder::new(StubConfig::default())), small_lm()).unwrap()
}

fn image(id: u64) -> SyntheticImage {
    SyntheticImage::random(id, &mut SplitMix64::new(id))
}

#[test]
fn protocol_survives_disk_and_keeps_its_contamination_status() {
    let dir = tempfile::tempdir().unwrap();
    let protocol = small_protocol(4);
    write_protocol(dir.path(), &protocol).unwrap();
    let back = read_protocol(dir.path()).unwrap();
    assert_eq!(back, protocol);
    let held_out: Vec<_> = back.held_out().cloned().collect();
    assert!(contamination_check(&back.held_in, &held_out).is_ok());

    let mut dirty = back.clone();
    dirty.held_in[0].examples.push(dirty.held_out_task[0].examples[0].clone());
    let other = tempfile::tempdir().unwrap();
    write_protocol(other.path(), &dirty).unwrap();
    let reread = read_protocol(other.path()).unwrap();
    let held_out: Vec<_> = reread.held_out().cloned().collect();
    assert!(contamination_check(&reread.held_in, &held_out).is_err());
}

#[test]
fn training_is_a_function_of_its_seed() {
    let protocol = small_protocol(5);
    let a = short_run(&protocol, 1);
    let b = short_run(&protocol, 1);
    let c = short_run(&protocol, 2);
    let params = |o: &TrainOutcome| o.last.qformer.to_checkpoint(serde_json::Value::Null).to_bytes();
    assert_eq!(params(&a), params(&b));
    assert_ne!(params(&a), params(&c));
    let losses = |o: &TrainOutcome| o.report.steps.iter().map(|s| s.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.report.sample_counts.values().sum::<usize>(), 12 * 2);
}

#[test]
fn reloaded_checkpoints_score_identically() {
    let protocol = small_protocol(6);
    let out = short_run(&protocol, 3);
    let dir = tempfile::tempdir().unwrap();
    let (lm_path, q_path) = (dir.path().join("lm.qtck"), dir.path().join("q.qtck"));
    out.best.lm.to_checkpoint().save(&lm_path).unwrap();
    out.best.qformer.to_checkpoint(serde_json::json!({ "note": 1 })).save(&q_path).unwrap();
    assert!(out.best.lm.to_checkpoint().save(&lm_path).is_err(), "checkpoints are never overwritten");

    let mut lm = ToyLm::from_checkpoint(&Checkpoint::load(&lm_path).unwrap()).unwrap();
    lm.freeze();
    let (qformer, extra) = QFormer::from_checkpoint(&Checkpoint::load(&q_path).unwrap()).unwrap();
    assert_eq!(extra["note"], 1);
    let reloaded = ModelBundle { encoder: out.best.encoder.clone(), lm: Arc::new(lm), qformer };
    assert_eq!(reloaded.qformer.params.named_tensors().len(), out.best.qformer.params.named_tensors().len());

    let cands: Vec<String> = ["red", "blue", "green square", "two"].map(String::from).to_vec();
    for id in 0..5 {
        let img = image(50 + id);
        let before = rank_candidates(&out.best, &img, "what color is the shape ?", &cands, false).unwrap();
        let after = rank_candidates(&reloaded, &img, "what color is the shape ?", &cands, false).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn one_verbalizer_per_class_is_plain_ranking() {
    let lm = small_lm();
    let q = QFormer::init(QFormerConfig { vocab_size: lm.vocab.len(), llm_dim: lm.config.dim, ..small_qformer() }, 9).unwrap();
    let bundle = ModelBundle { encoder: Arc::new(ImageEncoder::new(StubConfig::default())), lm, qformer: q };
    let vmap = VerbalizerMap { classes: vec![("yes".into(), vec!["true".into()]), ("no".into(), vec!["false".into()])] };
    for id in 0..6 {
        let img = image(id);
        let input = "is the shape red ?";
        let scores = rank_candidates(&bundle, &img, input, &["true".into(), "false".into()], false).unwrap();
        let expected = if top_candidate(&scores).unwrap().candidate == "true" { "yes" } else { "no" };
        for agg in [Aggregation::Max, Aggregation::Sum] {
            assert_eq!(classify_with_verbalizers(&bundle, &img, input, &vmap, agg, false).unwrap(), expected);
        }
    }
}

proptest! {
    #[test]
    fn balanced_weights_follow_square_root_sizes(sizes in prop::collection::vec(1usize..5000, 1..8)) {
        let p = mixture_weights(&sizes, &vec![1.0; sizes.len()]).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let root_total: f64 = sizes.iter().map(|&s| (s as f64).sqrt()).sum();
        for (pi, &s) in p.iter().zip(&sizes) {
            prop_assert!((pi - (s as f64).sqrt() / root_total).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedules_from_datasets_match_the_formula(seed in 0u64..50) {
        let protocol = small_protocol(seed);
        let sched = MixtureSchedule::new(&protocol.held_in, SamplerMode::Balanced).unwrap();
        let sizes: Vec<usize> = protocol.held_in.iter().map(|d| d.size()).collect();
        prop_assert_eq!(sched.probabilities, mixture_weights(&sizes, &vec![1.0; sizes.len()]).unwrap());
    }
}
