//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "OVSFDACK"
//! version     u32      1
//! manifest    u64 length + UTF-8 JSON (model config, adapter sites, tensor roles)
//! count       u32
//! count × tensor record:
//!     name    u32 length + UTF-8
//!     dtype   u8       1 = f64
//!     flags   u8       bit 0 adapter, bit 1 frozen
//!     ndim    u32
//!     dims    ndim × u64
//!     payload product(dims) × f64, row-major
//! ```
//!
//! Writing is deterministic, so `write(read(bytes)) == bytes`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Encoder, LoraAdapter, LoraSet, Projection, Site};
use crate::model::{BackboneParams, ModelConfig};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"OVSFDACK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const FLAG_ADAPTER: u8 = 1;
const FLAG_FROZEN: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Frozen,
    Trainable,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub encoder: Encoder,
    pub block: usize,
    pub projection: Projection,
    pub scaling: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub adapters: Vec<AdapterEntry>,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Base weights plus optional adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BackboneParams,
    pub adapters: Option<LoraSet>,
    pub metadata: BTreeMap<String, String>,
}

fn adapter_names(site: &Site) -> (String, String) {
    (format!("{site}.lora_a"), format!("{site}.lora_b"))
}

impl Checkpoint {
    pub fn new(params: BackboneParams, adapters: Option<LoraSet>) -> Self {
        Self {
            params,
            adapters,
            metadata: BTreeMap::new(),
        }
    }

    fn manifest(&self) -> Manifest {
        let base_role = if self.params.is_frozen() {
            Role::Frozen
        } else {
            Role::Trainable
        };
        let mut tensors: Vec<ManifestEntry> = self
            .params
            .names()
            .iter()
            .map(|n| ManifestEntry {
                name: n.clone(),
                role: base_role,
            })
            .collect();
        let mut adapters = Vec::new();
        for (site, ad) in self.adapters.iter().flat_map(LoraSet::iter) {
            let (a, b) = adapter_names(site);
            tensors.push(ManifestEntry {
                name: a,
                role: Role::Adapter,
            });
            tensors.push(ManifestEntry {
                name: b,
                role: Role::Adapter,
            });
            adapters.push(AdapterEntry {
                encoder: site.encoder,
                block: site.block,
                projection: site.projection,
                scaling: ad.scaling(),
            });
        }
        Manifest {
            model: self.params.config().clone(),
            adapters,
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let frozen_flag = if self.params.is_frozen() { FLAG_FROZEN } else { 0 };
        let mut records: Vec<(String, &Tensor, u8)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t, frozen_flag))
            .collect();
        for (site, ad) in self.adapters.iter().flat_map(LoraSet::iter) {
            let (a, b) = adapter_names(site);
            records.push((a, ad.a(), FLAG_ADAPTER));
            records.push((b, ad.b(), FLAG_ADAPTER));
        }
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, t, flags) in records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F64, flags])?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mlen = read_u64(r)? as usize;
        let manifest: Manifest = serde_json::from_slice(&read_bytes(r, mlen)?)?;
        let count = read_u32(r)? as usize;
        let mut base = Vec::new();
        let mut adapter_tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut frozen = None;
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            if head[0] != DTYPE_F64 {
                return Err(Error::Format(format!("tensor `{name}` has unknown dtype {}", head[0])));
            }
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if head[1] & FLAG_ADAPTER != 0 {
                adapter_tensors.insert(name, t);
            } else {
                let f = head[1] & FLAG_FROZEN != 0;
                if frozen.is_some_and(|prev| prev != f) {
                    return Err(Error::Format("mixed frozen flags on base tensors".into()));
                }
                frozen = Some(f);
                base.push((name, t));
            }
        }
        let params = BackboneParams::from_named(manifest.model.clone(), base, frozen.unwrap_or(false))?;
        let adapters = if manifest.adapters.is_empty() && adapter_tensors.is_empty() {
            None
        } else {
            let mut set = LoraSet::empty();
            for e in &manifest.adapters {
                let site = Site::new(e.encoder, e.block, e.projection)?;
                let (an, bn) = adapter_names(&site);
                let missing = |n: &str| Error::Format(format!("missing adapter tensor `{n}`"));
                let a = adapter_tensors.remove(&an).ok_or_else(|| missing(&an))?;
                let b = adapter_tensors.remove(&bn).ok_or_else(|| missing(&bn))?;
                set.insert(site, LoraAdapter::from_factors(a, b, e.scaling)?);
            }
            if let Some(extra) = adapter_tensors.keys().next() {
                return Err(Error::Format(format!("adapter tensor `{extra}` has no manifest entry")));
            }
            Some(set)
        };
        Ok(Self {
            params,
            adapters,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            blocks: 2,
            mlp_hidden: 8,
            agg_dim: 4,
            agg_hidden: 4,
            token_vocab: 64,
            max_tokens: 8,
            prompts: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = BackboneParams::init(&small(), &mut rng).unwrap();
        params.freeze();
        let mut adapters = LoraSet::init(
            &LoraConfig {
                blocks: 2,
                ..Default::default()
            },
            8,
            &mut rng,
        )
        .unwrap();
        for t in adapters.trainable_parameters_mut() {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
        let mut ck = Checkpoint::new(params, Some(adapters));
        ck.metadata.insert("stage".into(), "adapted".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ck = Checkpoint::new(BackboneParams::init(&small(), &mut rng).unwrap(), None);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
