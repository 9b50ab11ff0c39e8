use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffengine::{AdamState, ParamStore, Tensor};
use crate::digest::bytes_digest;
use crate::error::{Error, Result};
use crate::formats::{atomic_write, read_container, write_container};
use crate::model::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything required to resume training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    /// Next task-stream index.
    pub tasks_seen: u64,
    pub train_digest: String,
    /// Digest of the task prior the model was trained on (see
    /// [`GeneratorConfig::prior_digest`](crate::bcm::GeneratorConfig::prior_digest)).
    pub generator_digest: String,
    /// Digest of the run configuration that produced this checkpoint, if any.
    pub run_digest: Option<String>,
}

impl Checkpoint {
    /// Errors unless the stored model config matches `config`.
    pub fn expect_model(&self, config: &ModelConfig) -> Result<()> {
        if self.model_config.digest() != config.digest() {
            return Err(Error::Config("checkpoint model config digest differs from the requested config".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    model_digest: String,
    train_digest: String,
    generator_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_digest: Option<String>,
    step: u64,
    tasks_seen: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_step: u64,
    arrays: Vec<ArraySpec>,
    payload_sha256: String,
}

fn payload(ck: &Checkpoint) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in ck.params.iter() {
        out.extend_from_slice(t.data());
    }
    for t in ck.adam.m.iter().chain(&ck.adam.v) {
        out.extend_from_slice(t.data());
    }
    out
}

fn payload_digest(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    bytes_digest(&bytes)
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let values = payload(ck);
    let header = Header {
        model_config: ck.model_config.clone(),
        model_digest: ck.model_config.digest(),
        train_digest: ck.train_digest.clone(),
        generator_digest: ck.generator_digest.clone(),
        run_digest: ck.run_digest.clone(),
        step: ck.step,
        tasks_seen: ck.tasks_seen,
        adam_beta1: ck.adam.beta1,
        adam_beta2: ck.adam.beta2,
        adam_eps: ck.adam.eps,
        adam_step: ck.adam.step,
        arrays: ck
            .params
            .iter()
            .map(|(name, t)| ArraySpec {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: payload_digest(&values),
    };
    write_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &[&values])
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let c = read_container::<Header>(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, |h| {
        Ok(3 * h.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum::<usize>())
    })?;
    let h = c.header;
    if h.model_digest != h.model_config.digest() {
        return Err(Error::Format("checkpoint model digest does not match its config".into()));
    }
    if h.payload_sha256 != payload_digest(&c.data) {
        return Err(Error::Format("checkpoint payload digest mismatch".into()));
    }
    let mut rest = c.data.as_slice();
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        let (a, b) = rest.split_at(n);
        rest = b;
        Tensor::new(shape.to_vec(), a.to_vec())
    };
    let mut params = ParamStore::new();
    for a in &h.arrays {
        params.insert(a.name.clone(), take(&a.shape)?)?;
    }
    let m = h.arrays.iter().map(|a| take(&a.shape)).collect::<Result<Vec<_>>>()?;
    let v = h.arrays.iter().map(|a| take(&a.shape)).collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model_config: h.model_config,
        params,
        adam: AdamState {
            beta1: h.adam_beta1,
            beta2: h.adam_beta2,
            eps: h.adam_eps,
            step: h.adam_step,
            m,
            v,
        },
        step: h.step,
        tasks_seen: h.tasks_seen,
        train_digest: h.train_digest,
        generator_digest: h.generator_digest,
        run_digest: h.run_digest,
    })
}
