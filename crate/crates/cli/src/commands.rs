//! The subcommands, as library functions so tests can drive them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use querytune::checkpoint::Checkpoint;
use querytune::data::manifest::{read_protocol, write_protocol};
use querytune::data::{build_protocol, contamination_report, pretrain_corpus, DatasetSpec, Protocol};
use querytune::eval::{held_in_scores, held_out_scores, run_ablation_suite, AblationSetup};
use querytune::lm::{pretrain_toy, ToyLm, Vocabulary};
use querytune::mixture::{mixture_weights, uniform_mode, MixtureSchedule};
use querytune::model::ModelBundle;
use querytune::qformer::QFormer;
use querytune::rng::SplitMix64;
use querytune::stubs::{ImageEncoder, StubConfig};
use querytune::train;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::runs::{hash_dir, hash_file, input_hash, open_run, Artifact, RunDir, RunManifest, TrainingScope, Writer};

pub const LM_FILE: &str = "lm.qtck";
pub const QFORMER_FILE: &str = "qformer.qtck";
pub const PROTOCOL_DIR: &str = "protocol";

/// Shared inputs of every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub config_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    /// An identical finished run was found and left alone.
    pub reused: bool,
    /// Human-readable result, tab separated where tabular.
    pub summary: String,
}

impl Context {
    fn manifest(&self, command: &str, seed: u64, hash: &str, inputs: Vec<Artifact>) -> RunManifest {
        RunManifest {
            command: command.into(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            config: self.config.clone(),
            seed,
            output_dir: String::new(),
            input_hash: hash.into(),
            inputs,
            artifacts: Vec::new(),
            training: None,
        }
    }
}

fn reused(dir: PathBuf, file: &str) -> Result<Outcome> {
    let summary = std::fs::read_to_string(dir.join(file)).unwrap_or_default();
    Ok(Outcome { dir, reused: true, summary })
}

/// A run directory holding `file`, or the file itself.
fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn protocol_input(path: Option<&Path>) -> Result<Option<(PathBuf, Artifact)>> {
    let Some(path) = path else { return Ok(None) };
    let dir = if path.join(PROTOCOL_DIR).is_dir() { path.join(PROTOCOL_DIR) } else { path.to_path_buf() };
    if !dir.join("registry.json").is_file() {
        bail!("{} is not a prepared protocol (no registry.json)", dir.display());
    }
    let art = Artifact { path: dir.display().to_string(), sha256: hash_dir(&dir)? };
    Ok(Some((dir, art)))
}

fn load_protocol(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Protocol> {
    let protocol = match dir {
        Some(d) => read_protocol(d).with_context(|| format!("reading protocol {}", d.display()))?,
        None => build_protocol(cfg.run.protocol_seed, &cfg.protocol),
    };
    protocol.validate()?;
    Ok(protocol)
}

fn refuse_contamination(protocol: &Protocol) -> Result<()> {
    let held_out: Vec<DatasetSpec> = protocol.held_out().cloned().collect();
    let report = contamination_report(&protocol.held_in, &held_out);
    if report.is_clean() {
        return Ok(());
    }
    let mut msg = format!("refusing to train: {} held-out example(s) also appear in held-in data\n", report.violations.len());
    msg += "example_hash\theld_in\theld_out\n";
    for v in &report.violations {
        let _ = writeln!(msg, "{:016x}\t{}\t{}", v.example_hash, v.held_in, v.held_out);
    }
    Err(anyhow!(msg.trim_end().to_string()))
}

fn load_lm(path: &Path) -> Result<(Arc<ToyLm>, Artifact)> {
    let file = resolve(path, LM_FILE);
    let ck = Checkpoint::load(&file).with_context(|| format!("loading language model {}", file.display()))?;
    let mut lm = ToyLm::from_checkpoint(&ck)?;
    lm.freeze();
    Ok((Arc::new(lm), Artifact { path: file.display().to_string(), sha256: hash_file(&file)? }))
}

pub fn cmd_prepare(ctx: &Context) -> Result<Outcome> {
    let cfg = &ctx.config;
    let hash = input_hash("prepare", cfg, &[], &[]);
    let dir = match open_run(&ctx.root, "prepare", &cfg.run.name, &hash)? {
        RunDir::Done(dir) => return reused(dir, "datasets.tsv"),
        RunDir::Fresh(dir) => dir,
    };
    let protocol = load_protocol(cfg, None)?;
    refuse_contamination(&protocol)?;
    let mut w = Writer::new(dir);
    write_protocol(&w.path(PROTOCOL_DIR), &protocol)?;
    let mut files = Vec::new();
    collect_files(&w.path(PROTOCOL_DIR), PROTOCOL_DIR, &mut files)?;
    files.sort();
    for f in &files {
        w.record(f)?;
    }
    let mut table = String::from("dataset\tsplit\ttask\ttrain\tval\n");
    let splits = [("held_in", &protocol.held_in), ("held_out_data", &protocol.held_out_data), ("held_out_task", &protocol.held_out_task)];
    for (split, specs) in splits {
        for d in specs.iter() {
            let _ = writeln!(table, "{}\t{split}\t{}\t{}\t{}", d.name, d.task_kind, d.examples.len(), d.val_examples.len());
        }
    }
    w.write("datasets.tsv", table.as_bytes())?;
    let dir = w.finish(ctx.manifest("prepare", cfg.run.protocol_seed, &hash, Vec::new()))?;
    Ok(Outcome { dir, reused: false, summary: table })
}

fn collect_files(dir: &Path, rel: &str, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = format!("{rel}/{}", entry.file_name().to_string_lossy());
        if entry.path().is_dir() {
            collect_files(&entry.path(), &name, out)?;
        } else {
            out.push(name);
        }
    }
    Ok(())
}

pub fn cmd_pretrain_lm(ctx: &Context) -> Result<Outcome> {
    let cfg = &ctx.config;
    let hash = input_hash("pretrain-lm", cfg, &[], &[]);
    let dir = match open_run(&ctx.root, "pretrain-lm", &cfg.run.name, &hash)? {
        RunDir::Done(dir) => return reused(dir, "summary.tsv"),
        RunDir::Fresh(dir) => dir,
    };
    let corpus = pretrain_corpus(cfg.run.lm_seed, cfg.pretrain.corpus_size);
    let (lm, losses) = pretrain_toy(&corpus, Vocabulary::standard(), &cfg.lm, &cfg.pretrain, cfg.run.lm_seed)?;
    let held = lm.corpus_loss(&pretrain_corpus(cfg.run.lm_seed.wrapping_add(1), 300))?;

    let mut w = Writer::new(dir);
    lm.to_checkpoint().save(&w.path(LM_FILE))?;
    w.record(LM_FILE)?;
    let mut curve = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(curve, "{i}\t{l:.6}");
    }
    w.write("losses.tsv", curve.as_bytes())?;
    let tail = &losses[losses.len().saturating_sub(50)..];
    let summary = format!(
        "steps\tfinal_loss\theld_out_loss\tparameters\n{}\t{:.4}\t{:.4}\t{}\n",
        losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        held,
        querytune::nn::Module::parameter_count(&lm.params)
    );
    w.write("summary.tsv", summary.as_bytes())?;
    let dir = w.finish(ctx.manifest("pretrain-lm", cfg.run.lm_seed, &hash, Vec::new()))?;
    Ok(Outcome { dir, reused: false, summary })
}

/// Extra metadata stored with a trained Q-Former.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFormerMeta {
    pub stub: StubConfig,
    pub lm_sha256: String,
    pub best_step: usize,
}

pub fn cmd_train(ctx: &Context, lm_path: &Path, protocol_path: Option<&Path>) -> Result<Outcome> {
    let cfg = &ctx.config;
    let (lm, lm_art) = load_lm(lm_path)?;
    let proto = protocol_input(protocol_path)?;
    let protocol = load_protocol(cfg, proto.as_ref().map(|(d, _)| d.as_path()))?;
    refuse_contamination(&protocol)?;

    let mut inputs = vec![lm_art.clone()];
    inputs.extend(proto.map(|(_, a)| a));
    let hash = input_hash("train", cfg, &[], &inputs);
    let dir = match open_run(&ctx.root, "train", &cfg.run.name, &hash)? {
        RunDir::Done(dir) => return reused(dir, "validation.tsv"),
        RunDir::Fresh(dir) => dir,
    };
    let encoder = Arc::new(ImageEncoder::new(cfg.stub.clone()));
    let outcome = train::run(&cfg.train, &cfg.qformer, &protocol, encoder, lm)?;
    let report = &outcome.report;

    let mut w = Writer::new(dir);
    let meta = QFormerMeta { stub: cfg.stub.clone(), lm_sha256: lm_art.sha256, best_step: report.best_step };
    outcome.best.qformer.to_checkpoint(serde_json::to_value(&meta)?).save(&w.path(QFORMER_FILE))?;
    w.record(QFORMER_FILE)?;
    w.write("report.jsonl", report.to_jsonl().as_bytes())?;
    let names: Vec<&String> = report.schedule.names.iter().collect();
    let mut table = String::from("step\taverage");
    for n in &names {
        let _ = write!(table, "\t{n}");
    }
    table.push('\n');
    for v in &report.validations {
        let _ = write!(table, "{}\t{:.4}", v.step, v.average);
        for n in &names {
            let _ = write!(table, "\t{:.4}", v.scores.get(*n).copied().unwrap_or(f64::NAN));
        }
        table.push('\n');
    }
    let _ = writeln!(table, "best\t{:.4}\tstep={}", report.best_average, report.best_step);
    w.write("validation.tsv", table.as_bytes())?;

    let mut manifest = ctx.manifest("train", cfg.train.seed, &hash, inputs);
    manifest.training = Some(TrainingScope {
        datasets: protocol.held_in.iter().map(|d| d.name.clone()).collect(),
        tasks: protocol.held_in.iter().map(|d| d.task_kind).collect::<BTreeSet<_>>().into_iter().collect(),
    });
    let dir = w.finish(manifest)?;
    Ok(Outcome { dir, reused: false, summary: table })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    HeldIn,
    HeldOutData,
    HeldOutTask,
    /// Both held-out kinds.
    HeldOut,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::HeldIn => "held-in",
            EvalSplit::HeldOutData => "held-out-data",
            EvalSplit::HeldOutTask => "held-out-task",
            EvalSplit::HeldOut => "held-out",
        }
    }
}

/// Evaluates a finished training run. The protocol is the one the run used
/// unless `protocol_path` names another.
pub fn cmd_eval(ctx: &Context, run: &Path, split: EvalSplit, protocol_path: Option<&Path>) -> Result<Outcome> {
    let trained = RunManifest::load(run)?;
    let scope = trained.training.clone().ok_or_else(|| anyhow!("{} is not a training run", run.display()))?;
    let cfg = &ctx.config;
    let lm_art = trained.input(LM_FILE).ok_or_else(|| anyhow!("training manifest lists no language model"))?;
    let (lm, lm_now) = load_lm(Path::new(&lm_art.path))?;
    if lm_now.sha256 != lm_art.sha256 {
        bail!("language model {} changed since training", lm_art.path);
    }
    let proto = match protocol_path {
        Some(p) => protocol_input(Some(p))?,
        None => match trained.inputs.iter().find(|a| Path::new(&a.path).join("registry.json").is_file()) {
            Some(a) => protocol_input(Some(Path::new(&a.path)))?,
            None => None,
        },
    };
    let mut protocol = load_protocol(&trained.config, proto.as_ref().map(|(d, _)| d.as_path()))?;

    match split {
        EvalSplit::HeldIn => {}
        EvalSplit::HeldOutData => protocol.held_out_task.clear(),
        EvalSplit::HeldOutTask => protocol.held_out_data.clear(),
        EvalSplit::HeldOut => {}
    }
    if split == EvalSplit::HeldOutTask || split == EvalSplit::HeldOut {
        let leaked: Vec<String> = protocol
            .held_out_task
            .iter()
            .filter(|d| scope.tasks.contains(&d.task_kind))
            .map(|d| format!("{} ({})", d.name, d.task_kind))
            .collect();
        if !leaked.is_empty() {
            bail!("refusing held-out-task evaluation: training covered the task of {}", leaked.join(", "));
        }
    }
    let leaked: Vec<&str> = protocol.held_out().filter(|d| scope.datasets.contains(&d.name)).map(|d| d.name.as_str()).collect();
    if split != EvalSplit::HeldIn && !leaked.is_empty() {
        bail!("refusing held-out evaluation: {} was used in training", leaked.join(", "));
    }

    let ck_path = run.join(QFORMER_FILE);
    let ck_art = Artifact { path: ck_path.display().to_string(), sha256: hash_file(&ck_path)? };
    let mut inputs = vec![ck_art, lm_now];
    inputs.extend(proto.map(|(_, a)| a));
    let hash = input_hash("eval", cfg, &[("split", split.name().into())], &inputs);
    let dir = match open_run(&ctx.root, "eval", &cfg.run.name, &hash)? {
        RunDir::Done(dir) => return reused(dir, "metrics.tsv"),
        RunDir::Fresh(dir) => dir,
    };

    let (qformer, extra) = QFormer::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    let meta: QFormerMeta = serde_json::from_value(extra).context("checkpoint metadata")?;
    let bundle = ModelBundle { encoder: Arc::new(ImageEncoder::new(meta.stub)), lm, qformer };
    let scores = match split {
        EvalSplit::HeldIn => held_in_scores(&bundle, &protocol, trained.config.train.format_mode, 0)?,
        _ => held_out_scores(&bundle, &protocol, &cfg.eval)?,
    };
    let mut table = String::from("dataset\taccuracy\n");
    for (name, acc) in &scores {
        let _ = writeln!(table, "{name}\t{:.4}", acc);
    }
    let mean = scores.values().sum::<f64>() / scores.len().max(1) as f64;
    let _ = writeln!(table, "mean\t{mean:.4}");
    let mut w = Writer::new(dir);
    w.write("metrics.tsv", table.as_bytes())?;
    let dir = w.finish(ctx.manifest("eval", trained.seed, &hash, inputs))?;
    Ok(Outcome { dir, reused: false, summary: table })
}

pub fn cmd_ablate(ctx: &Context, lm_path: &Path, progress: &mut dyn FnMut(&str)) -> Result<Outcome> {
    let cfg = &ctx.config;
    let (lm, lm_art) = load_lm(lm_path)?;
    let protocol = load_protocol(cfg, None)?;
    refuse_contamination(&protocol)?;
    let cells = cfg.ablation.cells()?;
    let inputs = vec![lm_art];
    let hash = input_hash("ablate", cfg, &[], &inputs);
    let dir = match open_run(&ctx.root, "ablate", &cfg.run.name, &hash)? {
        RunDir::Done(dir) => return reused(dir, "ablation.tsv"),
        RunDir::Fresh(dir) => dir,
    };
    let setup = AblationSetup {
        train: cfg.train.clone(),
        qformer: cfg.qformer.clone(),
        eval: cfg.eval.clone(),
        protocol: &protocol,
        encoder: Arc::new(ImageEncoder::new(cfg.stub.clone())),
        lm,
    };
    let report = run_ablation_suite(&setup, &cells, &cfg.ablation.seeds, &mut |r| {
        progress(&format!(
            "{}\tseed {}\theld_in {:.2}\ttype1 {:.2}\ttype2 {:.2}",
            r.cell.label(),
            r.seed,
            100.0 * r.held_in_mean,
            100.0 * r.type1_mean,
            100.0 * r.type2_mean
        ))
    })?;
    let mut w = Writer::new(dir);
    let tsv = report.to_tsv();
    w.write("ablation.tsv", tsv.as_bytes())?;
    let mut jsonl = String::new();
    for r in &report.results {
        jsonl += &serde_json::to_string(r)?;
        jsonl.push('\n');
    }
    w.write("results.jsonl", jsonl.as_bytes())?;
    let mut checks = String::from("check\tlhs\trhs\tpassed\n");
    for c in report.direction_checks() {
        let _ = writeln!(checks, "{}\t{:.2}\t{:.2}\t{}", c.name, c.lhs, c.rhs, c.passed);
    }
    w.write("directions.tsv", checks.as_bytes())?;
    let dir = w.finish(ctx.manifest("ablate", cfg.train.seed, &hash, inputs))?;
    Ok(Outcome { dir, reused: false, summary: format!("{tsv}\n{checks}") })
}

const STATS_DRAWS: usize = 60_000;

/// Names of the direction checks an ablation run failed.
pub fn failed_directions(dir: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(dir.join("directions.tsv")).with_context(|| format!("reading {}", dir.display()))?;
    Ok(text.lines().skip(1).filter(|l| l.ends_with("\tfalse")).map(|l| l.split('\t').next().unwrap_or("").to_string()).collect())
}

/// Sampling table for the configured held-in datasets, or for bare sizes.
pub fn cmd_stats(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<String> {
    let (names, sizes, overrides): (Vec<String>, Vec<usize>, Vec<f64>) = if sizes.is_empty() {
        let protocol = build_protocol(cfg.run.protocol_seed, &cfg.protocol);
        (
            protocol.held_in.iter().map(|d| d.name.clone()).collect(),
            protocol.held_in.iter().map(DatasetSpec::size).collect(),
            protocol.held_in.iter().map(|d| d.weight_override).collect(),
        )
    } else {
        ((0..sizes.len()).map(|i| format!("d{i}")).collect(), sizes.to_vec(), vec![1.0; sizes.len()])
    };
    let balanced = mixture_weights(&sizes, &overrides)?;
    let uniform = uniform_mode(&sizes)?;
    // Observed frequencies of the balanced sampler, seeded like training.
    let schedule = MixtureSchedule { names: names.clone(), sizes: sizes.clone(), overrides: overrides.clone(), probabilities: balanced.clone() };
    let mut rng = SplitMix64::new(cfg.train.seed);
    let mut counts = vec![0usize; names.len()];
    for _ in 0..STATS_DRAWS {
        counts[schedule.draw(&mut rng)] += 1;
    }
    let mut out = String::from("dataset\tsize\tweight\tbalanced\tuniform\tempirical\n");
    for i in 0..names.len() {
        let freq = counts[i] as f64 / STATS_DRAWS as f64;
        let _ = writeln!(out, "{}\t{}\t{}\t{:.4}\t{:.4}\t{freq:.4}", names[i], sizes[i], overrides[i], balanced[i], uniform[i]);
    }
    Ok(out)
}
