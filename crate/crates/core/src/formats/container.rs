use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Decoded container: format version, JSON header, and the flat array payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<H> {
    pub version: u32,
    pub header: H,
    pub data: Vec<f64>,
}

/// Layout: 4-byte magic, u32 version, u64 header length, JSON header, then
/// every array as little-endian `f64`, concatenated in order.
pub fn write_container<H: Serialize>(magic: &[u8; 4], version: u32, header: &H, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let total: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for array in arrays {
        for v in *array {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container after checking magic and version; `expected_len` maps the
/// header to the number of floats it declares.
pub fn read_container<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 4],
    version: u32,
    expected_len: impl FnOnce(&H) -> Result<usize>,
) -> Result<Container<H>> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::Format(format!("unsupported format version {found} (expected {version})")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: H = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];
    let want = expected_len(&header)?;
    if payload.len() != want * 8 {
        return Err(Error::Format(format!(
            "payload is {} bytes but the header declares {want} values",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Container { version, header, data })
}
