use std::path::Path;

use mace_core::bcm::{make_task, task_seed, GeneratorConfig, TaskBundle};
use mace_core::formats::{atomic_write, read_bundle, write_bundle};
use mace_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub run_digest: String,
    pub generator: GeneratorConfig,
    pub generator_digest: String,
    /// Task-prior digest compared against checkpoints.
    pub prior_digest: String,
    pub master_seed: u64,
    pub count: usize,
    pub tasks: Vec<ManifestEntry>,
}

pub struct Corpus {
    pub manifest: Manifest,
    pub tasks: Vec<TaskBundle>,
}

pub fn task_file(index: usize) -> String {
    format!("task_{index}.macd")
}

/// Writes `task_{k}.macd` for `k < count` and then `manifest.json`.
pub fn generate_corpus(run: &RunConfig, count: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let digest = run.digest();
    let tasks = (0..count)
        .into_par_iter()
        .map(|k| {
            let s = task_seed(seed, k as u64);
            let bundle = make_task(&run.generator, s)?;
            write_bundle(&dir.join(task_file(k)), &bundle, Some(&digest))?;
            Ok(ManifestEntry {
                index: k,
                seed: s,
                file: task_file(k),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        run_digest: digest,
        generator: run.generator.clone(),
        generator_digest: run.generator.digest(),
        prior_digest: run.generator.prior_digest(),
        master_seed: seed,
        count,
        tasks,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    atomic_write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.tasks.len() != manifest.count {
        return Err(Error::Format("manifest task count disagrees with its entries".into()));
    }
    let tasks = manifest
        .tasks
        .par_iter()
        .map(|e| read_bundle(&dir.join(&e.file)).map(|(b, _)| b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, tasks })
}
