use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::spec::{Architecture, ArchitectureSpec};
use crate::error::{Error, Result};
use crate::nn::{BlockRole, Model, ParamId};

/// Environment variable naming the pretrained-weight cache directory.
pub const WEIGHTS_ENV: &str = "CXRBENCH_WEIGHTS";

/// `$CXRBENCH_WEIGHTS`, else `$XDG_CACHE_HOME/cxrbench/weights`, else
/// `~/.cache/cxrbench/weights`.
pub fn default_weights_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(WEIGHTS_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    let cache = std::env::var_os("XDG_CACHE_HOME")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))
        .unwrap_or_else(|| PathBuf::from(".cache"));
    cache.join("cxrbench").join("weights")
}

pub fn weights_path(dir: &Path, arch: Architecture) -> PathBuf {
    dir.join(format!("{}.safetensors", arch.name()))
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_params(
    model: &Model,
    ids: &[ParamId],
    metadata: HashMap<String, String>,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let ps = model.params();
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = ids
        .iter()
        .map(|&id| {
            let p = ps.get(id);
            (p.name.clone(), to_bytes(&p.value), p.shape.clone())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, data, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), data).map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| weights_err(path, e))?;
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(views, &Some(metadata), &tmp).map_err(|e| weights_err(path, e))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn weights_err(path: &Path, reason: impl ToString) -> Error {
    Error::Weights {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

struct LoadedFile {
    bytes: Vec<u8>,
}

impl LoadedFile {
    fn open(path: &Path) -> Result<Self> {
        Ok(Self { bytes: fs::read(path)? })
    }

    fn parse(&self, path: &Path) -> Result<(SafeTensors<'_>, HashMap<String, String>)> {
        let (_, meta) = SafeTensors::read_metadata(&self.bytes).map_err(|e| weights_err(path, e))?;
        let tensors = SafeTensors::deserialize(&self.bytes).map_err(|e| weights_err(path, e))?;
        Ok((tensors, meta.metadata().clone().unwrap_or_default()))
    }
}

/// Copies every parameter in `ids` from the file, checking names and shapes.
fn read_into(model: &mut Model, ids: &[ParamId], tensors: &SafeTensors<'_>, path: &Path) -> Result<()> {
    for &id in ids {
        let param = model.params_mut().get_mut(id);
        let view = tensors
            .tensor(&param.name)
            .map_err(|_| weights_err(path, format!("tensor {} is missing", param.name)))?;
        if view.dtype() != Dtype::F32 {
            return Err(weights_err(path, format!("tensor {} is not f32", param.name)));
        }
        if view.shape() != param.shape.as_slice() {
            return Err(weights_err(
                path,
                format!("tensor {} has shape {:?}, expected {:?}", param.name, view.shape(), param.shape),
            ));
        }
        for (dst, src) in param.value.iter_mut().zip(view.data().chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
    }
    Ok(())
}

fn backbone_ids(model: &Model) -> Vec<ParamId> {
    (0..model.blocks().len())
        .filter(|&i| model.blocks()[i].role == BlockRole::Backbone)
        .flat_map(|i| model.block_params(i))
        .collect()
}

fn all_ids(model: &Model) -> Vec<ParamId> {
    model.params().iter().map(|(id, _)| id).collect()
}

/// Loads backbone parameters. A missing file is reported as
/// [`Error::MissingPretrainedWeights`] so callers never silently fall back to
/// random features.
pub fn load_pretrained(model: &mut Model, arch: Architecture, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingPretrainedWeights {
            backbone: arch.name().to_string(),
            path: path.to_path_buf(),
        });
    }
    let file = LoadedFile::open(path)?;
    let (tensors, meta) = file.parse(path)?;
    if let Some(name) = meta.get("architecture") {
        if name != arch.name() {
            return Err(weights_err(path, format!("holds weights for {name}, not {arch}")));
        }
    }
    if meta.get("origin").map(String::as_str) == Some("synthetic") {
        log::warn!("{arch}: using synthetic backbone weights from {}", path.display());
    }
    let ids = backbone_ids(model);
    read_into(model, &ids, &tensors, path)
}

/// Writes a deterministic stand-in weight file for `arch` into `dir`, tagged
/// with `origin=synthetic`. Returns the file path.
pub fn write_synthetic_weights(arch: Architecture, dir: &Path, seed: u64) -> Result<PathBuf> {
    let mut spec = ArchitectureSpec::default_for(arch);
    spec.pretrained = false;
    let model = super::build_untrained(&spec, seed)?;
    let path = weights_path(dir, arch);
    let meta = HashMap::from([
        ("architecture".to_string(), arch.name().to_string()),
        ("origin".to_string(), "synthetic".to_string()),
        ("seed".to_string(), seed.to_string()),
    ]);
    write_params(&model, &backbone_ids(&model), meta, &path)?;
    Ok(path)
}

/// Saves every parameter plus the ArchitectureSpec (as JSON metadata) and any extra
/// string metadata.
pub fn save_checkpoint(
    model: &Model,
    spec: &ArchitectureSpec,
    extra: &[(&str, String)],
    path: &Path,
) -> Result<()> {
    let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    meta.insert("kind".into(), "checkpoint".into());
    meta.insert("spec".into(), serde_json::to_string(spec)?);
    write_params(model, &all_ids(model), meta, path)
}

pub fn read_checkpoint_spec(path: &Path) -> Result<ArchitectureSpec> {
    let file = LoadedFile::open(path)?;
    let (_, meta) = file.parse(path)?;
    let json = meta
        .get("spec")
        .ok_or_else(|| weights_err(path, "not a checkpoint (no spec metadata)"))?;
    Ok(serde_json::from_str(json)?)
}

/// Rebuilds the network described by the checkpoint and restores all
/// parameters.
pub fn load_checkpoint(path: &Path) -> Result<(ArchitectureSpec, Model)> {
    let file = LoadedFile::open(path)?;
    let (tensors, meta) = file.parse(path)?;
    let json = meta
        .get("spec")
        .ok_or_else(|| weights_err(path, "not a checkpoint (no spec metadata)"))?;
    let spec: ArchitectureSpec = serde_json::from_str(json)?;
    let mut model = super::build_untrained(&spec, 0)?;
    let ids = all_ids(&model);
    read_into(&mut model, &ids, &tensors, path)?;
    Ok((spec, model))
}
