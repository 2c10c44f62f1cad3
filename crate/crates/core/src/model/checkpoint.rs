//! Checkpoint directory: `manifest.toml`, `weights.bin` (parameters then
//! running statistics) and `optimizer.bin` (Adam moments), all arrays in the
//! tensor snapshot format.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, CpieModel, ModelConfig, Preset};
use crate::error::{Error, Result};
use crate::tensor::snapshot::{read_snapshot, write_snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub preset: Preset,
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
    pub seed: u64,
    pub step: u64,
    pub adam_t: u64,
    pub model: ModelConfig,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(dir: &Path, model: &CpieModel, adam: &Adam, preset: Preset, seed: u64, step: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = model.config().clone();
    let manifest = Manifest {
        preset,
        alpha: cfg.head.alpha,
        beta: cfg.head.beta,
        tau: cfg.head.tau,
        seed,
        step,
        adam_t: adam.t,
        model: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())?;

    let mut w = Vec::new();
    for p in model.params() {
        write_snapshot(&mut w, &p.shape, &p.data).map_err(|e| Error::io(dir, e))?;
    }
    for r in model.running() {
        write_snapshot(&mut w, &[r.mean.len()], &r.mean).map_err(|e| Error::io(dir, e))?;
        write_snapshot(&mut w, &[r.var.len()], &r.var).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(&dir.join("weights.bin"), &w)?;

    let mut o = BufWriter::new(Vec::new());
    for (p, (m, v)) in model.params().iter().zip(adam.m.iter().zip(&adam.v)) {
        write_snapshot(&mut o, &p.shape, m).map_err(|e| Error::io(dir, e))?;
        write_snapshot(&mut o, &p.shape, v).map_err(|e| Error::io(dir, e))?;
    }
    o.flush().map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("optimizer.bin"), o.get_ref())
}

fn read_into(r: &mut impl std::io::Read, path: &Path, shape: &[usize], what: &str) -> Result<Vec<f32>> {
    let (s, data) = read_snapshot(r).map_err(|e| Error::io(path, e))?;
    if s != shape {
        return Err(Error::DimMismatch(format!("{what}: checkpoint shape {s:?}, model expects {shape:?}")));
    }
    Ok(data)
}

/// Loads model, optimizer state and manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(CpieModel, Adam, Manifest)> {
    let mpath = dir.join("manifest.toml");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
    let mut model = CpieModel::new(manifest.model.clone(), manifest.seed)?;

    let wpath = dir.join("weights.bin");
    let mut r = BufReader::new(File::open(&wpath).map_err(|e| Error::io(&wpath, e))?);
    for p in model.params_mut() {
        p.data = read_into(&mut r, &wpath, &p.shape.clone(), &p.name)?;
    }
    for rs in model.running_mut() {
        let n = rs.mean.len();
        rs.mean = read_into(&mut r, &wpath, &[n], "running mean")?;
        rs.var = read_into(&mut r, &wpath, &[n], "running var")?;
    }

    let opath = dir.join("optimizer.bin");
    let mut adam = Adam::new(&model);
    adam.t = manifest.adam_t;
    let mut r = BufReader::new(File::open(&opath).map_err(|e| Error::io(&opath, e))?);
    for (k, p) in model.params().iter().enumerate() {
        adam.m[k] = read_into(&mut r, &opath, &p.shape, &p.name)?;
        adam.v[k] = read_into(&mut r, &opath, &p.shape, &p.name)?;
    }
    Ok((model, adam, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = std::env::temp_dir().join(format!("cpie-ckpt-{}", std::process::id()));
        let mut model = CpieModel::new(ModelConfig::preset(Preset::Toy), 9).unwrap();
        model.running_mut()[0].mean[0] = 0.25;
        let mut adam = Adam::new(&model);
        adam.t = 7;
        adam.m[1][0] = 0.5;
        save_checkpoint(&dir, &model, &adam, Preset::Toy, 9, 70).unwrap();
        let (m2, a2, man) = load_checkpoint(&dir).unwrap();
        assert_eq!(m2.params(), model.params());
        assert_eq!(m2.running(), model.running());
        assert_eq!(a2, adam);
        assert_eq!((man.step, man.alpha, man.beta), (70, 20.0, 5.0));
        let text = fs::read_to_string(dir.join("manifest.toml")).unwrap();
        assert!(text.contains("preset = \"toy\""));
        fs::remove_dir_all(&dir).unwrap();
    }
}
