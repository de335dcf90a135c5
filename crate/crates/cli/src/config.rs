//! Experiment configuration: one TOML file, one section per stage.
//!
//! Every key is optional. Missing keys take the library defaults, unknown
//! keys are rejected, and `--set section.key=value` overrides are applied to
//! the parsed document before it is checked.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use querytune::data::ProtocolConfig;
use querytune::eval::{full_grid, AblationCell, EvalConfig};
use querytune::lm::{PretrainConfig, ToyLmConfig};
use querytune::qformer::QFormerConfig;
use querytune::stubs::StubConfig;
use querytune::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Used in run directory names.
    pub name: String,
    /// Seed of the synthetic protocol.
    pub protocol_seed: u64,
    /// Seed of the pretraining corpus and language-model init.
    pub lm_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { name: "experiment".into(), protocol_seed: 7, lm_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    /// `qformer/sampler/format` labels; empty means the full grid.
    pub cells: Vec<String>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], cells: Vec::new() }
    }
}

impl AblationSection {
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        if self.cells.is_empty() {
            return Ok(full_grid());
        }
        self.cells.iter().map(|c| c.parse().map_err(|e: String| anyhow!("ablation.cells: {e}"))).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub protocol: ProtocolConfig,
    pub stub: StubConfig,
    pub lm: ToyLmConfig,
    pub pretrain: PretrainConfig,
    pub qformer: QFormerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, overrides).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let resolved = toml::to_string(&table).context("re-serializing config")?;
        let cfg: Self = serde_path_to_error::deserialize(toml::Deserializer::new(&resolved)).map_err(|err| {
            let key = err.path().to_string();
            anyhow!("config key `{key}`: {}", err.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("[train]")?;
        // vocab_size and llm_dim are taken from the language model at train time.
        QFormerConfig { vocab_size: self.qformer.vocab_size.max(1), ..self.qformer.clone() }.validate().context("[qformer]")?;
        self.eval.verbalizers.validate().context("[eval]")?;
        self.ablation.cells()?;
        if self.run.name.is_empty() || !self.run.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(anyhow!("config key `run.name`: expected a non-empty name of [A-Za-z0-9_-], got {:?}", self.run.name));
        }
        Ok(())
    }

    /// The fully resolved configuration, every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override {item:?} is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("override key {key:?} is malformed"));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: `{p}` is not a section"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string, so that
/// `--set train.format_mode=plain` works without quoting.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use querytune::data::FormatMode;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_beat_file_keys() {
        let text = "[train]\nmax_steps = 40\nwarmup_steps = 4\n";
        let cfg = ExperimentConfig::parse(text, &["train.max_steps=80".into(), "train.format_mode=plain".into()]).unwrap();
        assert_eq!(cfg.train.max_steps, 80);
        assert_eq!(cfg.train.warmup_steps, 4);
        assert_eq!(cfg.train.format_mode, FormatMode::Plain);
        let cfg = ExperimentConfig::parse("", &["ablation.seeds=[4, 5, 6]".into()]).unwrap();
        assert_eq!(cfg.ablation.seeds, vec![4, 5, 6]);
    }

    #[test]
    fn bad_keys_name_the_key_and_type() {
        let err = ExperimentConfig::parse("[train]\nmax_steps = \"many\"\n", &[]).unwrap_err().to_string();
        assert!(err.contains("train.max_steps") && err.contains("usize"), "{err}");
        let err = ExperimentConfig::parse("[train]\nmax_stepz = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("max_stepz"), "{err}");
        let err = ExperimentConfig::parse("", &["qformer.mode=sideways".into()]).unwrap_err().to_string();
        assert!(err.contains("qformer.mode"), "{err}");
        assert!(ExperimentConfig::parse("", &["train".into()]).is_err());
        assert!(ExperimentConfig::parse("", &["ablation.cells=[\"aware/balanced\"]".into()]).is_err());
        assert!(ExperimentConfig::parse("[train]\nwarmup_steps = 5000\n", &[]).is_err());
    }

    #[test]
    fn resolved_form_round_trips() {
        let cfg = ExperimentConfig::parse("", &["train.seed=9".into(), "run.name=abc".into()]).unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(ExperimentConfig::load(&dir.join("example.toml"), &[]).unwrap(), ExperimentConfig::default());
        let grid = ExperimentConfig::load(&dir.join("ablation.toml"), &[]).unwrap();
        assert_eq!(grid.ablation.cells().unwrap().len(), 4);
    }
}
