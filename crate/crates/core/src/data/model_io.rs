use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::Network;

/// Writes the model JSON atomically (temp file + rename).
pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), net.to_json().as_bytes())
}

/// Like [`save_model`], with `provenance` stored alongside the parameters.
pub fn save_model_with_provenance(
    net: &Network,
    provenance: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut doc = net.to_doc();
    doc.provenance = Some(provenance.clone());
    write_atomic(path.as_ref(), serde_json::to_string(&doc)?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_json(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
