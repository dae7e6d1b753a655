use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, Labels};
use crate::volumes::{percentile_normalize, read_volume, write_volume, Volume};

use super::config::{DataConfig, NormalizeConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub seed: u64,
    pub t1: Volume,
    pub flair: Volume,
    pub psr: Volume,
    pub labels: Labels,
}

impl Subject {
    pub fn from_phantom(seed: u64, dims: [usize; 3], n_lesions: usize) -> Result<Self> {
        let p = generate_phantom(seed, dims, n_lesions)?;
        Ok(Self {
            seed,
            t1: p.t1,
            flair: p.flair,
            psr: p.psr,
            labels: p.labels,
        })
    }

    pub fn brain_mask(&self) -> Vec<bool> {
        self.labels.brain_mask()
    }

    /// Normalized `[2, Z, Y, X]` T1/FLAIR stack.
    pub fn cond_tensor(&self, norm: &NormalizeConfig) -> Result<Tensor> {
        cond_tensor(&self.t1, &self.flair, norm)
    }

    /// `[1, Z, Y, X]` PSR target.
    pub fn psr_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.psr.dims();
        self.psr.to_tensor().reshape(&[1, nz, ny, nx]).expect("same element count")
    }
}

/// Percentile-normalize both contrasts and stack them as channels.
pub fn cond_tensor(t1: &Volume, flair: &Volume, norm: &NormalizeConfig) -> Result<Tensor> {
    if t1.dims() != flair.dims() {
        return Err(Error::Shape(format!("t1 {:?} vs flair {:?}", t1.dims(), flair.dims())));
    }
    let a = percentile_normalize(t1, norm.lo_pct, norm.hi_pct)?.volume.to_tensor();
    let b = percentile_normalize(flair, norm.lo_pct, norm.hi_pct)?.volume.to_tensor();
    let [nx, ny, nz] = t1.dims();
    let mut data = a.into_data();
    data.extend_from_slice(b.data());
    Tensor::new(&[2, nz, ny, nx], data)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub cohort: Vec<Subject>,
    pub pretrain: Vec<Subject>,
}

impl Dataset {
    pub fn cohort_seeds(&self) -> Vec<u64> {
        self.cohort.iter().map(|s| s.seed).collect()
    }
}

pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let make = |base: u64, n: usize| -> Result<Vec<Subject>> {
        (0..n as u64)
            .map(|i| Subject::from_phantom(base + i, cfg.dims, cfg.n_lesions))
            .collect()
    };
    let cohort = make(cfg.seed_base, cfg.n_subjects)?;
    let pretrain = make(cfg.pretrain_seed_base, cfg.n_pretrain)?;
    if cohort.iter().any(|c| pretrain.iter().any(|p| p.seed == c.seed)) {
        return Err(Error::InvalidArgument("cohort and pretraining seed ranges overlap".into()));
    }
    Ok(Dataset { cohort, pretrain })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Cohort,
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub pool: Pool,
    pub t1: PathBuf,
    pub flair: PathBuf,
    pub psr: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Write every subject as VOL1 files under `dir` plus `dir/manifest.json`
/// with paths relative to `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest::default();
    for (pool, subjects) in [(Pool::Cohort, &ds.cohort), (Pool::Pretrain, &ds.pretrain)] {
        for s in subjects {
            let rel = PathBuf::from(format!("{:?}", pool).to_lowercase()).join(s.seed.to_string());
            std::fs::create_dir_all(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
            let entry = ManifestEntry {
                seed: s.seed,
                pool,
                t1: rel.join("t1.vol"),
                flair: rel.join("flair.vol"),
                psr: rel.join("psr.vol"),
                labels: rel.join("labels.vol"),
            };
            write_volume(&s.t1, dir.join(&entry.t1))?;
            write_volume(&s.flair, dir.join(&entry.flair))?;
            write_volume(&s.psr, dir.join(&entry.psr))?;
            write_volume(&s.labels.to_volume(), dir.join(&entry.labels))?;
            manifest.entries.push(entry);
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset::default();
    for e in manifest.entries {
        let s = Subject {
            seed: e.seed,
            t1: read_volume(root.join(&e.t1))?,
            flair: read_volume(root.join(&e.flair))?,
            psr: read_volume(root.join(&e.psr))?,
            labels: Labels::from_volume(&read_volume(root.join(&e.labels))?)?,
        };
        match e.pool {
            Pool::Cohort => ds.cohort.push(s),
            Pool::Pretrain => ds.pretrain.push(s),
        }
    }
    Ok(ds)
}
