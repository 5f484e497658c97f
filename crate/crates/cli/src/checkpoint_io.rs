//! Saving and loading parameter checkpoints.

use std::path::Path;

use chainstack::tensor::{decode_checkpoint, encode_checkpoint, CheckpointError, ParamStore};

use crate::CliError;

/// Writes through a temporary file and a rename, so a reader never sees a
/// partial checkpoint.
pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<(), CliError> {
    let bytes = encode_checkpoint(params).map_err(|e| CliError::Checkpoint { path: path.to_path_buf(), source: e })?;
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| CliError::Checkpoint { path: path.to_path_buf(), source: e })
}

/// Loads `path` into `params`, which fixes the expected names and shapes.
pub fn load_into(path: &Path, params: &mut ParamStore) -> Result<(), CliError> {
    let loaded = load_checkpoint(path)?;
    let mismatch = |m: String| CliError::Checkpoint { path: path.to_path_buf(), source: CheckpointError::Mismatch(m) };
    for (i, (name, t)) in params.iter().enumerate() {
        let Some((got_name, got)) = loaded.iter().nth(i) else {
            return Err(mismatch(format!("parameter `{name}` missing ({} in file, {} expected)", loaded.len(), params.len())));
        };
        if got_name != name {
            return Err(mismatch(format!("parameter {i} is `{got_name}` in the file, expected `{name}`")));
        }
        if got.shape() != t.shape() {
            return Err(mismatch(format!(
                "parameter `{name}` has shape {:?} in the file, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if loaded.len() != params.len() {
        return Err(mismatch(format!("{} parameters in the file, expected {}", loaded.len(), params.len())));
    }
    params.assign_from(&loaded).map_err(|e| mismatch(e.to_string()))
}
