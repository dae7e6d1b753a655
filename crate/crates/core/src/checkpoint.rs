//! Checkpoint container.
//!
//! Layout: 8-byte magic `PSRCKPT\0`, u64 LE header length, UTF-8 JSON header,
//! then every tensor's f64 LE payload in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParameterSet};

pub const CKPT_MAGIC: &[u8; 8] = b"PSRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    step: u64,
    run_config: String,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    /// The run configuration as TOML text, stored verbatim.
    pub run_config: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub groups: BTreeMap<String, ParameterSet>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, run_config: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            run_config: run_config.into(),
            ..Default::default()
        }
    }

    pub fn group(&self, name: &str) -> Result<&ParameterSet> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::MissingComponent(format!("{} checkpoint has no {name:?} group", self.kind)))
    }

    pub fn set_group(&mut self, name: &str, ps: ParameterSet) {
        self.groups.insert(name.to_string(), ps);
    }

    pub fn get_meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::MissingComponent(format!("{} checkpoint has no {key:?} entry", self.kind)))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, v: &T) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(v)?);
        Ok(())
    }

    /// Require `kind` to match.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::MissingComponent(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Store optimizer moments as groups `{prefix}.m` / `{prefix}.v`.
    pub fn set_adam(&mut self, prefix: &str, opt: &Adam) -> Result<()> {
        let to_set = |m: &BTreeMap<String, Tensor>| {
            let mut ps = ParameterSet::new();
            for (k, t) in m {
                ps.insert(k.clone(), t.clone());
            }
            ps
        };
        self.set_group(&format!("{prefix}.m"), to_set(&opt.m));
        self.set_group(&format!("{prefix}.v"), to_set(&opt.v));
        self.set_meta(&format!("{prefix}.step"), &opt.step)?;
        self.set_meta(&format!("{prefix}.cfg"), &opt.cfg)
    }

    pub fn adam(&self, prefix: &str) -> Result<Adam> {
        let cfg: AdamConfig = self.get_meta(&format!("{prefix}.cfg"))?;
        let mut opt = Adam::new(cfg);
        opt.step = self.get_meta(&format!("{prefix}.step"))?;
        let from = |g: &ParameterSet| g.iter().map(|(k, t)| (k.to_string(), t.clone())).collect();
        opt.m = from(self.group(&format!("{prefix}.m"))?);
        opt.v = from(self.group(&format!("{prefix}.v"))?);
        Ok(opt)
    }

    /// `group/name -> sha256` for every tensor.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.groups
            .iter()
            .flat_map(|(g, ps)| ps.hashes().into_iter().map(move |(n, h)| (format!("{g}/{n}"), h)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (g, ps) in &self.groups {
            for (name, t) in ps.iter() {
                tensors.push(TensorEntry {
                    group: g.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    trainable: ps.is_trainable(name),
                });
                payload.extend_from_slice(&t.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            step: self.step,
            run_config: self.run_config.clone(),
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                needed: 16,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != CKPT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                needed: 16 + hlen,
                found: bytes.len(),
            })?;
        let version: serde_json::Value = serde_json::from_slice(&bytes[16..body])?;
        let v = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if v != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(v));
        }
        let header: Header = serde_json::from_value(version)?;
        let needed = body + header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum::<usize>();
        if bytes.len() != needed {
            return Err(Error::DimMismatch {
                expected: needed - body,
                found: bytes.len() - body,
            });
        }
        let mut groups: BTreeMap<String, ParameterSet> = BTreeMap::new();
        let mut at = body;
        for e in header.tensors {
            let n = e.shape.iter().product::<usize>();
            let data = bytes[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 8 * n;
            let ps = groups.entry(e.group).or_default();
            ps.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
            if e.trainable {
                ps.set_trainable(&e.name, true)?;
            }
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            run_config: header.run_config,
            meta: header.meta,
            groups,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("backbone", "seed = 3\n");
        c.step = 17;
        let mut ps = ParameterSet::new();
        ps.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]).unwrap());
        ps.insert("b", Tensor::scalar(4.0));
        ps.set_trainable("b", true).unwrap();
        c.set_group("unet", ps);
        c.set_meta("latent_scale", &0.75).unwrap();
        c
    }

    #[test]
    fn bytes_roundtrip_and_lookup_errors() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(back.group("unet").unwrap().is_trainable("b"));
        assert_eq!(back.get_meta::<f64>("latent_scale").unwrap(), 0.75);
        assert!(matches!(back.group("adapters"), Err(Error::MissingComponent(m)) if m.contains("adapters")));
        assert!(matches!(back.get_meta::<f64>("nope"), Err(Error::MissingComponent(_))));
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::DimMismatch { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        let mut v = bytes[..16].to_vec();
        v.extend_from_slice(text.as_bytes());
        v.extend_from_slice(&bytes[16 + hlen..]);
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn adam_state_roundtrip() {
        let mut c = sample();
        let mut opt = Adam::new(AdamConfig::default());
        let mut ps = c.groups["unet"].clone();
        let g: BTreeMap<String, Tensor> = [("b".to_string(), Tensor::scalar(1.0))].into();
        opt.step(&mut ps, &g).unwrap();
        c.set_adam("opt", &opt).unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap().adam("opt").unwrap();
        assert_eq!((back.step, &back.m, &back.v), (opt.step, &opt.m, &opt.v));
    }
}
