use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_container, write_container};
use crate::bcm::{GeneratorMetadata, Standardizer, TaskBundle};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

pub const MACD_MAGIC: &[u8; 4] = b"MACD";
pub const MACD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    d: usize,
    n_obs: usize,
    n_int: usize,
    m_int: usize,
    i: usize,
    j: usize,
    seed: u64,
    metadata: Option<GeneratorMetadata>,
    standardizer: Option<Standardizer>,
    /// Digest of the run configuration that produced the bundle, if any.
    #[serde(default)]
    run_digest: Option<String>,
}

pub fn bundle_bytes(bundle: &TaskBundle, run_digest: Option<&str>) -> Result<Vec<u8>> {
    bundle.validate()?;
    let header = Header {
        d: bundle.num_nodes(),
        n_obs: bundle.n_obs(),
        n_int: bundle.n_int(),
        m_int: bundle.m_int(),
        i: bundle.outcome_node,
        j: bundle.int_node,
        seed: bundle.seed,
        metadata: bundle.metadata.clone(),
        standardizer: bundle.standardizer.clone(),
        run_digest: run_digest.map(str::to_string),
    };
    write_container(
        MACD_MAGIC,
        MACD_VERSION,
        &header,
        &[
            bundle.obs.data(),
            &bundle.int_values,
            bundle.int_full.data(),
            bundle.context.data(),
        ],
    )
}

pub fn write_bundle(path: &Path, bundle: &TaskBundle, run_digest: Option<&str>) -> Result<()> {
    atomic_write(path, &bundle_bytes(bundle, run_digest)?)
}

/// Reads a bundle and the run digest stored alongside it.
pub fn read_bundle(path: &Path) -> Result<(TaskBundle, Option<String>)> {
    let bytes = std::fs::read(path)?;
    let c = read_container::<Header>(&bytes, MACD_MAGIC, MACD_VERSION, |h| {
        Ok(h.n_obs * h.d + h.n_int + h.n_int * h.d + h.m_int * h.d)
    })?;
    let h = c.header;
    let mut rest = c.data.as_slice();
    let mut take = |n: usize| {
        let (a, b) = rest.split_at(n);
        rest = b;
        a.to_vec()
    };
    let obs = Tensor::new(vec![h.n_obs, h.d], take(h.n_obs * h.d))?;
    let int_values = take(h.n_int);
    let int_full = Tensor::new(vec![h.n_int, h.d], take(h.n_int * h.d))?;
    let context = Tensor::new(vec![h.m_int, h.d], take(h.m_int * h.d))?;
    let bundle = TaskBundle {
        obs,
        int_node: h.j,
        outcome_node: h.i,
        int_values,
        int_full,
        context,
        metadata: h.metadata,
        seed: h.seed,
        standardizer: h.standardizer,
    };
    bundle
        .validate()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((bundle, h.run_digest))
}
