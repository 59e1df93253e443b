//! Versioned binary checkpoints: magic, format version, a JSON manifest
//! (names, shapes, byte offsets, config, optimizer scalars), then raw
//! little-endian `f64` buffers.

use std::io::{Read, Write};
use std::path::Path;

use lazysurf_tape::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Kind, ParamStore};
use crate::optim::Adam;
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"LZSFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Offsets of the first/second moments, per trainable tensor in order.
    pub moments: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub epoch: usize,
    pub step: usize,
    pub config_hash: String,
    pub config: Config,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
    pub data_bytes: u64,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self::build(&t.config, &t.model.store, Some(&t.optimizer), t.epoch, t.step)
    }

    pub fn from_model(config: &Config, model: &Model) -> Self {
        Self::build(config, &model.store, None, 0, 0)
    }

    fn build(config: &Config, store: &ParamStore, optimizer: Option<&Adam>, epoch: usize, step: usize) -> Self {
        let mut offset = 0u64;
        let tensors = store
            .entries()
            .iter()
            .map(|e| {
                let r = TensorRecord {
                    name: e.name.clone(),
                    trainable: e.kind == Kind::Param,
                    shape: e.value.shape().to_vec(),
                    offset,
                };
                offset += 8 * e.value.len() as u64;
                r
            })
            .collect();
        let opt = optimizer.map(|a| {
            let moments = a
                .m
                .iter()
                .map(|m| {
                    let pair = (offset, offset + 8 * m.len() as u64);
                    offset += 16 * m.len() as u64;
                    pair
                })
                .collect();
            OptimizerRecord {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                moments,
            }
        });
        Self {
            manifest: Manifest {
                version: FORMAT_VERSION,
                epoch,
                step,
                config_hash: config.model.hash(),
                config: config.clone(),
                tensors,
                optimizer: opt,
                data_bytes: offset,
            },
            store: store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(20 + manifest.len() + self.manifest.data_bytes as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for e in self.store.entries() {
            put(e.value.data());
        }
        if let Some(a) = &self.optimizer {
            for (m, v) in a.m.iter().zip(&a.v) {
                put(m);
                put(v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let mend = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..mend])?;
        if manifest.version != version {
            return Err(bad("manifest version disagrees with header"));
        }
        let data = &bytes[mend..];
        if data.len() as u64 != manifest.data_bytes {
            return Err(Error::Checkpoint(format!(
                "data section has {} bytes, manifest says {}",
                data.len(),
                manifest.data_bytes
            )));
        }
        let read = |offset: u64, n: usize| -> Result<Vec<f64>> {
            let start = offset as usize;
            let end = start.checked_add(8 * n).filter(|&e| e <= data.len()).ok_or_else(|| bad("buffer out of range"))?;
            Ok(data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut store = ParamStore::new();
        for t in &manifest.tensors {
            let n = t.shape.iter().product();
            let value = Tensor::new(t.shape.clone(), read(t.offset, n)?)?;
            if t.trainable {
                store.param(t.name.clone(), value);
            } else {
                store.buffer(t.name.clone(), value);
            }
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let sizes: Vec<usize> = store.trainable().map(|id| store.get(id).len()).collect();
                if sizes.len() != o.moments.len() {
                    return Err(bad("optimizer state does not match the parameters"));
                }
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (&n, &(mo, vo)) in sizes.iter().zip(&o.moments) {
                    m.push(read(mo, n)?);
                    v.push(read(vo, n)?);
                }
                Some(Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        if manifest.config.model.hash() != manifest.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }
        Ok(Self {
            manifest,
            store,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a model configuration other than the one trained.
    pub fn check_config(&self, model: &ModelConfig) -> Result<()> {
        let want = model.hash();
        if want != self.manifest.config_hash {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model config {}, requested {}",
                &self.manifest.config_hash[..12],
                &want[..12]
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.manifest.config.model, self.manifest.config.seed)?;
        model.store.load_values(&self.store)?;
        Ok(model)
    }

    /// Resumes training where the checkpoint left off.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(&self.manifest.config)?;
        t.model.store.load_values(&self.store)?;
        if let Some(a) = &self.optimizer {
            t.optimizer = a.clone();
        }
        t.epoch = self.manifest.epoch;
        t.step = self.manifest.step;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::geometry::{PointCloud, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Config {
        let mut cfg = Config::default();
        cfg.model.scale.scales = vec![1, 4];
        cfg.model.local_width = 8;
        cfg.model.cell_width = 8;
        cfg.model.head_hidden = vec![16, 8, 8, 4];
        cfg.model.attention_ff = 16;
        cfg.data.input_points = 300;
        cfg.data.surface_queries = 50;
        cfg.data.uniform_queries = 50;
        cfg.data.queries_per_step = 50;
        cfg.train.batch_size = 2;
        cfg
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut t = Trainer::new(&tiny()).unwrap();
        t.run_epoch(&generate_corpus(2, 3)).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.optimizer, Some(t.optimizer.clone()));
        let model = back.model().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = || (0..200).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.9..0.9))).collect::<Vec<_>>();
        let cloud = PointCloud::new(pts(), None).unwrap();
        let qs = pts();
        let a = t.model.predict_sdf(&t.model.encode(&cloud).unwrap(), &qs).unwrap();
        let b = model.predict_sdf(&model.encode(&cloud).unwrap(), &qs).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());

        let resumed = back.trainer().unwrap();
        assert_eq!(resumed.epoch, 1);
        assert_eq!(resumed.optimizer, t.optimizer);
    }

    #[test]
    fn mismatched_config_is_refused() {
        let t = Trainer::new(&tiny()).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        assert!(ck.check_config(&tiny().model).is_ok());
        let mut other = tiny().model;
        other.scale.knn_k = 4;
        assert!(matches!(ck.check_config(&other), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Trainer::new(&tiny()).unwrap();
        let bytes = Checkpoint::from_trainer(&t).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = tiny();
        let model = Model::new(&cfg.model, 4).unwrap();
        Checkpoint::from_model(&cfg, &model).save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert!(back.optimizer.is_none());
        for (a, b) in back.store.entries().iter().zip(model.store.entries()) {
            assert_eq!(a.value, b.value);
        }
    }
}
