//! On-disk registry layout.
//!
//! ```text
//! <dir>/registry.json            dataset metadata, in protocol order
//! <dir>/datasets/<name>.jsonl    one example per line
//! <dir>/datasets/<name>.val.jsonl
//! <dir>/templates/<task>.txt     one template per line
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSpec, Protocol, SyntheticExample, TaskKind, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    HeldIn,
    HeldOutData,
    HeldOutTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub task_kind: TaskKind,
    pub split: Split,
    pub weight_override: f64,
    pub has_ocr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryIndex {
    pub datasets: Vec<DatasetMeta>,
}

fn write_examples(path: &Path, examples: &[SyntheticExample]) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e).map_err(|err| DataError::Parse(err.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_examples(path: &Path) -> Result<Vec<SyntheticExample>, DataError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SyntheticExample = serde_json::from_str(&line)
            .map_err(|err| DataError::Parse(format!("{}:{}: {err}", path.display(), lineno + 1)))?;
        if !ex.hash_is_consistent() {
            return Err(DataError::Invariant(format!(
                "{}:{}: stored example_hash does not match content",
                path.display(),
                lineno + 1
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_protocol(dir: &Path, protocol: &Protocol) -> Result<(), DataError> {
    fs::create_dir_all(dir.join("datasets"))?;
    fs::create_dir_all(dir.join("templates"))?;
    let mut metas = Vec::new();
    let groups = [
        (Split::HeldIn, &protocol.held_in),
        (Split::HeldOutData, &protocol.held_out_data),
        (Split::HeldOutTask, &protocol.held_out_task),
    ];
    for (split, specs) in groups {
        for d in specs {
            metas.push(DatasetMeta {
                name: d.name.clone(),
                task_kind: d.task_kind,
                split,
                weight_override: d.weight_override,
                has_ocr: d.has_ocr,
            });
            write_examples(&dir.join("datasets").join(format!("{}.jsonl", d.name)), &d.examples)?;
            if !d.val_examples.is_empty() {
                write_examples(&dir.join("datasets").join(format!("{}.val.jsonl", d.name)), &d.val_examples)?;
            }
        }
    }
    let index = serde_json::to_string_pretty(&RegistryIndex { datasets: metas })
        .map_err(|err| DataError::Parse(err.to_string()))?;
    fs::write(dir.join("registry.json"), index + "\n")?;
    for (kind, set) in &protocol.templates {
        fs::write(dir.join("templates").join(format!("{kind}.txt")), set.to_text())?;
    }
    Ok(())
}

pub fn read_protocol(dir: &Path) -> Result<Protocol, DataError> {
    let index: RegistryIndex = serde_json::from_str(&fs::read_to_string(dir.join("registry.json"))?)
        .map_err(|err| DataError::Parse(format!("registry.json: {err}")))?;
    let mut templates = BTreeMap::new();
    for kind in TaskKind::ALL {
        let path = dir.join("templates").join(format!("{kind}.txt"));
        if path.exists() {
            templates.insert(kind, TemplateSet::from_text(kind, &fs::read_to_string(path)?));
        }
    }
    let mut protocol = Protocol {
        held_in: Vec::new(),
        held_out_data: Vec::new(),
        held_out_task: Vec::new(),
        templates,
    };
    for meta in index.datasets {
        if !protocol.templates.contains_key(&meta.task_kind) {
            return Err(DataError::Parse(format!("no template file for task {}", meta.task_kind)));
        }
        let spec = DatasetSpec {
            examples: read_examples(&dir.join("datasets").join(format!("{}.jsonl", meta.name)))?,
            val_examples: read_examples(&dir.join("datasets").join(format!("{}.val.jsonl", meta.name)))?,
            name: meta.name,
            task_kind: meta.task_kind,
            held_in: meta.split == Split::HeldIn,
            weight_override: meta.weight_override,
            has_ocr: meta.has_ocr,
        };
        match meta.split {
            Split::HeldIn => protocol.held_in.push(spec),
            Split::HeldOutData => protocol.held_out_data.push(spec),
            Split::HeldOutTask => protocol.held_out_task.push(spec),
        }
    }
    protocol.validate()?;
    Ok(protocol)
}
