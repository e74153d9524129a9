//! Named-array archive (safetensors layout) with a string metadata map.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Params, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Write `params` and `metadata` atomically (temp file + rename).
pub fn save(path: &Path, params: &Params, metadata: &BTreeMap<String, String>) -> Result<(), CheckpointError> {
    let fmt_err = |message: String| CheckpointError::Format { path: path.to_path_buf(), message };
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = params
        .iter()
        .map(|(k, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(k, raw, shape)| TensorView::new(Dtype::F32, shape.clone(), raw).map(|v| (k.clone(), v)).map_err(|e| fmt_err(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let encoded = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| fmt_err(e.to_string()))?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(&encoded).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CheckpointError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Params, BTreeMap<String, String>), CheckpointError> {
    let fmt_err = |message: String| CheckpointError::Format { path: path.to_path_buf(), message };
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| fmt_err(e.to_string()))?;
    let metadata = header.metadata().as_ref().map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()).unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes).map_err(|e| fmt_err(e.to_string()))?;
    let mut params = Params::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(fmt_err(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        params.insert(name, Tensor::from_vec(view.shape(), data));
    }
    Ok((params, metadata))
}
