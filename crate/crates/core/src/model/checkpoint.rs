//! Checkpoint directories: one tensor file per parameter plus `manifest.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ModelConfig, ModelParams};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.txt";

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes a checkpoint into `dir`, replacing any previous one only after the
/// new directory is complete.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, step: u64) -> Result<()> {
    let staging = sibling(dir, "partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let mut manifest = KeyValues::new();
    manifest.set("step", step);
    manifest.merge(&params.config.to_kv("model."));
    for (name, t) in params.iter() {
        write_tensor(staging.join(format!("{name}.cdgt")), t)?;
        manifest.set(format!("param.{name}"), shape_text(t.shape()));
    }
    let text = format!("# cdgmae checkpoint\n{}", manifest.render());
    atomic_write(&staging.join(MANIFEST), text.as_bytes())?;

    let old = sibling(dir, "old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

/// Loads parameters and the training step from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, u64)> {
    let manifest_path = dir.join(MANIFEST);
    let kv = KeyValues::load(&manifest_path)?;
    let step = kv.get::<u64>("step")?.ok_or_else(|| Error::format(&manifest_path, "missing `step`"))?;
    let mut config = ModelConfig::tiny();
    for key in ModelConfig::KEYS {
        if kv.get_str(&format!("model.{key}")).is_none() {
            return Err(Error::format(&manifest_path, format!("missing `model.{key}`")));
        }
    }
    config.apply_kv(&kv, "model.")?;
    let mut named = Vec::new();
    for (key, shape) in kv.iter() {
        let Some(name) = key.strip_prefix("param.") else { continue };
        let t = read_tensor(dir.join(format!("{name}.cdgt")))?;
        if shape_text(t.shape()) != shape {
            return Err(Error::format(&manifest_path, format!("`{name}` listed as {shape} but stored as {}", shape_text(t.shape()))));
        }
        named.push((name.to_string(), t));
    }
    let params = ModelParams::from_named(config, named)?;
    Ok((params, step))
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut s = dir.as_os_str().to_owned();
    s.push(format!(".{suffix}"));
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        let cfg = ModelConfig { norm_pix: true, ..ModelConfig::tiny() };
        let p = ModelParams::init(&cfg, 9).unwrap();
        save_checkpoint(&dir, &p, 17).unwrap();
        let (back, step) = load_checkpoint(&dir).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, p);

        // Overwriting keeps exactly one complete checkpoint.
        let q = ModelParams::init(&cfg, 10).unwrap();
        save_checkpoint(&dir, &q, 18).unwrap();
        assert_eq!(load_checkpoint(&dir).unwrap(), (q, 18));
        assert!(!sibling(&dir, "old").exists() && !sibling(&dir, "partial").exists());
    }

    #[test]
    fn missing_files_name_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_checkpoint(tmp.path()).unwrap_err();
        assert!(err.to_string().contains(MANIFEST));
    }
}
