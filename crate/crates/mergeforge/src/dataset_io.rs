//! Datasets on disk: one directory per task holding `meta.json` and one
//! JSON-lines file per split. Each line is `{"id":…,"x":[…],"y":…}`; `id` may
//! be omitted, in which case ids are assigned in file order across the
//! train, validation and test files.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use mergeforge_core::{DatasetSplit, Example};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Serialize, Deserialize)]
struct Meta {
    task_name: String,
    input_dim: usize,
    num_classes: usize,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: u64,
    x: &'a [f32],
    y: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: Option<u64>,
    x: Vec<f32>,
    y: usize,
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        let record = RecordOut {
            id: ex.id,
            x: &ex.x,
            y: ex.y,
        };
        serde_json::to_writer(&mut out, &record).expect("records always serialize");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Reads a JSON-lines file; records without an id get `next_id`, `next_id+1`, …
pub fn read_jsonl(path: &Path, next_id: &mut u64) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecordIn = serde_json::from_str(&line).map_err(|source| Error::Dataset {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        let id = record.id.unwrap_or(*next_id);
        *next_id = (*next_id).max(id + 1);
        out.push(Example {
            id,
            x: record.x,
            y: record.y,
        });
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        task_name: split.task_name.clone(),
        input_dim: split.input_dim,
        num_classes: split.num_classes,
    };
    let mut json = serde_json::to_vec_pretty(&meta).expect("meta always serializes");
    json.push(b'\n');
    write_atomic(&dir.join("meta.json"), &json)?;
    for (name, examples) in SPLITS.iter().zip([&split.train, &split.validation, &split.test]) {
        write_jsonl(&dir.join(format!("{name}.jsonl")), examples)?;
    }
    Ok(())
}

/// Reads a task directory. A missing `validation.jsonl` is carved out of
/// the training file with `validation_fraction`, keyed by `seed`.
pub fn read_dataset(dir: &Path, validation_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_slice(&meta_bytes).map_err(|source| Error::Dataset {
        path: meta_path.clone(),
        line: 1,
        source,
    })?;
    let mut next_id = 0;
    let train = read_jsonl(&dir.join("train.jsonl"), &mut next_id)?;
    let val_path = dir.join("validation.jsonl");
    let validation = val_path
        .exists()
        .then(|| read_jsonl(&val_path, &mut next_id))
        .transpose()?;
    let test = read_jsonl(&dir.join("test.jsonl"), &mut next_id)?;
    let split = match validation {
        Some(validation) => {
            DatasetSplit::new(meta.task_name, meta.input_dim, meta.num_classes, train, validation, test)?
        }
        None => DatasetSplit::with_carved_validation(
            meta.task_name,
            meta.input_dim,
            meta.num_classes,
            train,
            test,
            validation_fraction,
            seed,
        )?,
    };
    Ok(split)
}
