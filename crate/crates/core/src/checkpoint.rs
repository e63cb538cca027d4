//! Checkpoint directories: `manifest.json` plus one little-endian array
//! file per parameter.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TmMamba};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// File name relative to the checkpoint directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn checkpoint_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Manifest {
    /// Parses and validates a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(checkpoint_err(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        self.config.validate()?;
        let mut names = BTreeSet::new();
        let mut files = BTreeSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return Err(checkpoint_err(format!("duplicate parameter {}", p.name)));
            }
            if !files.insert(p.file.as_str()) {
                return Err(checkpoint_err(format!("file {} used twice", p.file)));
            }
            let plain = !p.file.is_empty()
                && !p.file.starts_with('.')
                && !p.file.contains(['/', '\\', ':'])
                && p.file != MANIFEST_FILE;
            if !plain {
                return Err(checkpoint_err(format!("unsafe file name {:?}", p.file)));
            }
            if p.shape.contains(&0) {
                return Err(checkpoint_err(format!("{} has an empty extent", p.name)));
            }
            p.shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| checkpoint_err(format!("{} is too large", p.name)))?;
        }
        Ok(())
    }
}

fn file_name(name: &str) -> String {
    format!("{name}.bin")
}

/// Writes `params` under `dir`, creating it if needed.
pub fn save<T: Real>(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ParamStore<T>,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let file = file_name(name);
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        let mut bytes = Vec::with_capacity(tensor.len() * T::DTYPE.size_of());
        for &x in tensor.data() {
            x.write_le(&mut bytes);
        }
        w.write_all(&bytes)?;
        w.flush()?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: config.clone(),
        params: entries,
        meta,
    };
    manifest.validate()?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(())
}

fn read_array<S: Real>(path: &Path, len: usize) -> Result<Vec<S>> {
    let bytes = fs::read(path)?;
    let width = S::DTYPE.size_of();
    if bytes.len() != len * width {
        return Err(checkpoint_err(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            len * width
        )));
    }
    Ok(bytes.chunks_exact(width).map(S::read_le).collect())
}

/// Reads a checkpoint, converting stored values to `T`.
pub fn load<T: Real>(dir: impl AsRef<Path>) -> Result<(Manifest, ParamStore<T>)> {
    let dir = dir.as_ref();
    let manifest = Manifest::from_json(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let len = p.shape.iter().product();
        let path = dir.join(&p.file);
        let data: Vec<T> = match manifest.dtype {
            DType::F64 => read_array::<f64>(&path, len)?.into_iter().map(T::c).collect(),
            DType::F32 => read_array::<f32>(&path, len)?
                .into_iter()
                .map(|x| T::c(x as f64))
                .collect(),
        };
        let tensor = Tensor::new(p.shape.clone(), data)?;
        if !tensor.all_finite() {
            return Err(checkpoint_err(format!("{} contains non-finite values", p.name)));
        }
        store.insert(p.name.clone(), tensor)?;
    }
    Ok((manifest, store))
}

impl<T: Real> TmMamba<T> {
    pub fn save(&self, dir: impl AsRef<Path>, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        save(dir, &self.config, &self.params, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let (manifest, params) = load::<T>(dir)?;
        let model = Self::from_parts(manifest.config.clone(), params)?;
        Ok((model, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonGraph;
    use crate::model::Ablation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            num_blocks: 1,
            state_size: 2,
            graph: SkeletonGraph::chain(3).unwrap(),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = TmMamba::<f64>::init(config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.save(dir.path(), BTreeMap::from([("seed".to_string(), 1.into())]))
            .unwrap();
        let (back, manifest) = TmMamba::<f64>::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest.meta["seed"], 1);
        assert_eq!(manifest.dtype, DType::F64);
    }

    #[test]
    fn f32_checkpoints_load_as_f64() {
        let dir = tempfile::tempdir().unwrap();
        let m = TmMamba::<f32>::init(config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        m.save(dir.path(), BTreeMap::new()).unwrap();
        let (back, _) = TmMamba::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.params.cast::<f32>(), m.params);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = TmMamba::<f64>::init(config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.save(dir.path(), BTreeMap::new()).unwrap();
        let victim = dir.path().join("head.1.b.bin");
        fs::write(&victim, [0u8; 3]).unwrap();
        assert!(TmMamba::<f64>::load(dir.path()).is_err());
        fs::write(&victim, f64::NAN.to_le_bytes()).unwrap();
        assert!(TmMamba::<f64>::load(dir.path()).is_err());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = TmMamba::<f64>::init(config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut cfg = config();
        cfg.ablation = Ablation::UNIDIRECTIONAL;
        save(dir.path(), &cfg, &m.params, BTreeMap::new()).unwrap();
        assert!(TmMamba::<f64>::load(dir.path()).is_err());
    }

    #[test]
    fn manifest_rejects_unsafe_files() {
        let m = TmMamba::<f64>::init(config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: DType::F64,
            config: m.config.clone(),
            params: vec![ParamEntry {
                name: "x".into(),
                shape: vec![1],
                file: "../x.bin".into(),
            }],
            meta: BTreeMap::new(),
        };
        assert!(Manifest::from_json(&manifest.to_json()).is_err());
        manifest.params[0].file = "x.bin".into();
        assert!(Manifest::from_json(&manifest.to_json()).is_ok());
        manifest.format_version = 9;
        assert!(Manifest::from_json(&manifest.to_json()).is_err());
    }
}
