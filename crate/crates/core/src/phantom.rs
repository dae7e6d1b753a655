//! Procedural paired T1-like / FLAIR-like / PSR-like brain phantoms.
//!
//! The brain is a smoothly deformed ellipsoid with nested CSF, GM and WM
//! shells. Lesions are spheres stamped into white matter. PSR follows a fixed
//! analytic map of the labels so ground truth is known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::Volume;

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GM: u8 = 2;
pub const WM: u8 = 3;
pub const LESION: u8 = 4;

pub const MIN_DIM: usize = 24;
pub const NOISE_SIGMA: f64 = 0.02;
/// Width (voxels) of the perilesional PSR ramp.
pub const RAMP_WIDTH: f64 = 3.0;
const PSR_SCALE: f64 = 0.2;

// Shell boundaries in normalized deformed radius.
const CSF_INNER: f64 = 0.9;
const GM_INNER: f64 = 0.72;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Lesion {
    /// Signed distance from voxel `p` to the sphere surface (negative inside).
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        d2.sqrt() - self.radius
    }
}

/// Integer tissue labels on an X-fastest grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("labels dims {dims:?} vs {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > LESION) {
            return Err(Error::InvalidArgument(format!("invalid label {v}")));
        }
        Ok(Self { dims, data })
    }

    pub fn brain_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&l| l != BACKGROUND).collect()
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_data(self.dims, self.data.iter().map(|&l| l as f32).collect())
            .expect("labels dims are consistent")
            .with_mask(Some(self.brain_mask()))
            .expect("mask matches dims")
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .data()
            .iter()
            .map(|&x| {
                if x.fract() != 0.0 || !(0.0..=LESION as f32).contains(&x) {
                    Err(Error::InvalidArgument(format!("label value {x} is not a valid tissue class")))
                } else {
                    Ok(x as u8)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(v.dims(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub t1: Volume,
    pub flair: Volume,
    pub psr: Volume,
    pub labels: Labels,
    pub lesions: Vec<Lesion>,
    pub seed: u64,
}

struct TissueMeans {
    csf: f64,
    gm: f64,
    wm: f64,
    lesion: f64,
}

const T1_MEANS: TissueMeans = TissueMeans {
    csf: 0.25,
    gm: 0.55,
    wm: 0.80,
    lesion: 0.40,
};

const FLAIR_MEANS: TissueMeans = TissueMeans {
    csf: 0.10,
    gm: 0.60,
    wm: 0.45,
    lesion: 0.90,
};
/// Extra FLAIR brightness of perilesional WM at the lesion boundary.
const FLAIR_RAMP: f64 = 0.10;

impl TissueMeans {
    fn get(&self, label: u8) -> f64 {
        match label {
            CSF => self.csf,
            GM => self.gm,
            WM => self.wm,
            LESION => self.lesion,
            _ => 0.0,
        }
    }
}

/// Unscaled PSR of each tissue class.
pub fn base_psr(label: u8) -> f64 {
    match label {
        CSF => 0.02,
        GM => 0.10,
        WM => 0.16,
        LESION => 0.07,
        _ => 0.0,
    }
}

/// Ramp weight in `[0, 1]`: 1 at a lesion surface, 0 beyond [`RAMP_WIDTH`].
fn ramp_weight(p: [f64; 3], lesions: &[Lesion]) -> f64 {
    let d = lesions
        .iter()
        .map(|l| l.surface_distance(p))
        .fold(f64::INFINITY, f64::min);
    if d <= 0.0 {
        1.0
    } else {
        (1.0 - d / RAMP_WIDTH).max(0.0)
    }
}

fn voxel(labels: &Labels, i: usize) -> [f64; 3] {
    let c = labels.coords(i);
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

/// Noise-free PSR implied by the labels and lesion geometry, scaled by 1/0.2.
pub fn analytic_psr(labels: &Labels, lesions: &[Lesion]) -> Volume {
    let data = labels
        .data
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = if l == WM && !lesions.is_empty() {
                let w = ramp_weight(voxel(labels, i), lesions);
                base_psr(LESION) * w + base_psr(WM) * (1.0 - w)
            } else {
                base_psr(l)
            };
            (p / PSR_SCALE) as f32
        })
        .collect();
    Volume::from_data(labels.dims, data)
        .expect("labels dims are consistent")
        .with_mask(Some(labels.brain_mask()))
        .expect("mask matches dims")
}

struct Anatomy {
    center: [f64; 3],
    semi_axes: [f64; 3],
    shape_coeffs: [f64; 5],
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let mut center = [0.0; 3];
        let mut semi_axes = [0.0; 3];
        for a in 0..3 {
            center[a] = (dims[a] as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
            semi_axes[a] = 0.42 * dims[a] as f64 * (1.0 + rng.random_range(-0.05..0.05));
        }
        let mut shape_coeffs = [0.0; 5];
        for c in shape_coeffs.iter_mut() {
            *c = rng.random_range(-1.0..1.0);
        }
        Self {
            center,
            semi_axes,
            shape_coeffs,
        }
    }

    /// Deformed normalized radius; 1 on the brain surface.
    fn radius(&self, p: [f64; 3]) -> f64 {
        let u: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.semi_axes[a]);
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        let n = [u[0] / r, u[1] / r, u[2] / r];
        let c = &self.shape_coeffs;
        let deform = 0.06 * (c[0] * n[0] * n[1] + c[1] * n[1] * n[2] + c[2] * n[0] * n[2])
            + 0.04 * (c[3] * (n[0] * n[0] - n[1] * n[1]) + c[4] * (2.0 * n[2] * n[2] - n[0] * n[0] - n[1] * n[1]) / 2.0);
        r * (1.0 + deform)
    }

    fn label(&self, p: [f64; 3]) -> u8 {
        let rho = self.radius(p);
        if rho > 1.0 {
            BACKGROUND
        } else if rho > CSF_INNER {
            CSF
        } else if rho > GM_INNER {
            GM
        } else {
            WM
        }
    }
}

/// Smooth multiplicative field `exp(poly)` with quadratic terms, coefficients ~ N(0, 0.05^2).
fn bias_field(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<f64> {
    let normal = Normal::new(0.0, 0.05).unwrap();
    let c: Vec<f64> = (0..9).map(|_| normal.sample(rng)).collect();
    let n: usize = dims.iter().product();
    (0..n)
        .map(|i| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            let u = [x, y, z]
                .iter()
                .zip(dims)
                .map(|(&v, d)| 2.0 * v as f64 / (d as f64 - 1.0) - 1.0)
                .collect::<Vec<_>>();
            let poly = c[0] * u[0]
                + c[1] * u[1]
                + c[2] * u[2]
                + c[3] * u[0] * u[0]
                + c[4] * u[1] * u[1]
                + c[5] * u[2] * u[2]
                + c[6] * u[0] * u[1]
                + c[7] * u[1] * u[2]
                + c[8] * u[0] * u[2];
            poly.exp()
        })
        .collect()
}

fn place_lesions(rng: &mut ChaCha8Rng, labels: &Labels, anatomy: &Anatomy, n: usize) -> Result<Vec<Lesion>> {
    let wm: Vec<usize> = (0..labels.data.len()).filter(|&i| labels.data[i] == WM).collect();
    if n > 0 && wm.is_empty() {
        return Err(Error::InvalidArgument("phantom has no white matter for lesions".into()));
    }
    let min_axis = anatomy.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lesions: Vec<Lesion> = Vec::with_capacity(n);
    let mut attempts = 0;
    while lesions.len() < n {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {n} lesions in white matter of dims {:?}",
                labels.dims
            )));
        }
        let center_idx = wm[rng.random_range(0..wm.len())];
        let radius = rng.random_range(2.0..=4.0);
        let center = voxel(labels, center_idx);
        // Keep at least half of the radius inside white matter.
        if anatomy.radius(center) > GM_INNER - 0.5 * radius / min_axis {
            continue;
        }
        let separated = lesions.iter().all(|l| {
            let d: f64 = (0..3).map(|a| (l.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
            d >= l.radius + radius + 2.0
        });
        if separated {
            lesions.push(Lesion { center, radius });
        }
    }
    Ok(lesions)
}

/// Deterministic phantom for `(seed, dims, n_lesions)`.
pub fn generate_phantom(seed: u64, dims: [usize; 3], n_lesions: usize) -> Result<Phantom> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::InvalidArgument(format!(
            "phantom dims {dims:?} too small to fit tissue shells (need >= {MIN_DIM})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::sample(&mut rng, dims);
    let n: usize = dims.iter().product();
    let mut labels = Labels {
        dims,
        data: vec![BACKGROUND; n],
    };
    for i in 0..n {
        labels.data[i] = anatomy.label(voxel(&labels, i));
    }
    let lesions = place_lesions(&mut rng, &labels, &anatomy, n_lesions)?;
    for i in 0..n {
        if labels.data[i] == WM {
            let p = voxel(&labels, i);
            if lesions.iter().any(|l| l.surface_distance(p) <= 0.0) {
                labels.data[i] = LESION;
            }
        }
    }

    let bias_t1 = bias_field(&mut rng, dims);
    let bias_flair = bias_field(&mut rng, dims);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let clean_psr = analytic_psr(&labels, &lesions);
    let mut t1 = vec![0.0f32; n];
    let mut flair = vec![0.0f32; n];
    let mut psr = vec![0.0f32; n];
    for i in 0..n {
        let l = labels.data[i];
        if l == BACKGROUND {
            continue;
        }
        let mut f = FLAIR_MEANS.get(l);
        if l == WM && !lesions.is_empty() {
            f += FLAIR_RAMP * ramp_weight(voxel(&labels, i), &lesions);
        }
        t1[i] = (T1_MEANS.get(l) * bias_t1[i] + noise.sample(&mut rng)) as f32;
        flair[i] = (f * bias_flair[i] + noise.sample(&mut rng)) as f32;
        psr[i] = ((clean_psr.data()[i] as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0)) as f32;
    }
    let mask = Some(labels.brain_mask());
    let mk = |data: Vec<f32>, kind: &str| -> Result<Volume> {
        let mut v = Volume::new(dims, [1.0; 3], data, mask.clone())?;
        v.meta.insert("seed".into(), seed.to_string());
        v.meta.insert("modality".into(), kind.into());
        Ok(v)
    };
    Ok(Phantom {
        t1: mk(t1, "t1")?,
        flair: mk(flair, "flair")?,
        psr: mk(psr, "psr")?,
        labels,
        lesions,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// 26-connected components of the voxels with `label`.
    fn components(labels: &Labels, label: u8) -> usize {
        let [nx, ny, nz] = labels.dims;
        let mut seen = vec![false; labels.data.len()];
        let mut count = 0;
        for start in 0..labels.data.len() {
            if labels.data[start] != label || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                let [x, y, z] = labels.coords(i);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                                continue;
                            }
                            let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                            if labels.data[j] == label && !seen[j] {
                                seen[j] = true;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_phantom(7, [24, 26, 28], 2).unwrap();
        let b = generate_phantom(7, [24, 26, 28], 2).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(8, [24, 26, 28], 2).unwrap();
        assert_ne!(a.t1, c.t1);
    }

    #[test]
    fn no_lesions_means_no_lesion_label() {
        let p = generate_phantom(3, [32, 32, 32], 0).unwrap();
        assert!(!p.labels.data.contains(&LESION));
        assert!(p.lesions.is_empty());
    }

    #[test]
    fn three_lesions_give_three_components() {
        let p = generate_phantom(1, [32, 32, 32], 3).unwrap();
        assert_eq!(p.lesions.len(), 3);
        assert_eq!(components(&p.labels, LESION), 3);
    }

    #[test]
    fn structural_invariants_hold() {
        for seed in 0..6 {
            let p = generate_phantom(seed, [32, 32, 32], 3).unwrap();
            let mask = p.t1.mask().unwrap();
            for (i, &l) in p.labels.data.iter().enumerate() {
                assert_eq!(l == BACKGROUND, !mask[i]);
            }
            assert!(p.psr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for l in &p.lesions {
                let c = l.center.map(|v| v as usize);
                let i = c[0] + 32 * (c[1] + 32 * c[2]);
                assert_eq!(p.labels.data[i], LESION);
                assert!((2.0..=4.0).contains(&l.radius));
            }
            assert_eq!(p.t1.dims(), p.psr.dims());
            assert_eq!(p.flair.dims(), p.labels.dims);
            for tissue in [CSF, GM, WM] {
                assert!(p.labels.data.contains(&tissue));
            }
        }
    }

    #[test]
    fn too_small_dims_rejected() {
        assert!(generate_phantom(0, [23, 32, 32], 0).is_err());
    }

    #[test]
    fn analytic_psr_values() {
        let dims = [6, 6, 6];
        let labels = Labels::new(dims, vec![WM; 216]).unwrap();
        let v = analytic_psr(&labels, &[]);
        assert!(v.data().iter().all(|&x| x == (0.16f64 / 0.2) as f32));

        let mut data = vec![WM; 216];
        data[0] = BACKGROUND;
        let center = [3.0, 3.0, 3.0];
        let lesion = Lesion { center, radius: 1.0 };
        for (i, d) in data.iter_mut().enumerate() {
            let p = [(i % 6) as f64, ((i / 6) % 6) as f64, (i / 36) as f64];
            if *d == WM && lesion.surface_distance(p) <= 0.0 {
                *d = LESION;
            }
        }
        let labels = Labels::new(dims, data).unwrap();
        let v = analytic_psr(&labels, &[lesion]);
        assert_eq!(v.get(3, 3, 3), (0.07f64 / 0.2) as f32);
        assert_eq!(v.get(0, 0, 0), 0.0);
        // Two voxels from the centre: one voxel outside the surface, w = 2/3.
        let w = 2.0 / 3.0;
        let want = ((0.07 * w + 0.16 * (1.0 - w)) / 0.2) as f32;
        assert!((v.get(5, 3, 3) - want).abs() < 1e-6);
    }

    #[test]
    fn lesion_psr_is_below_distal_wm() {
        for seed in 0..4 {
            let p = generate_phantom(seed, [32, 32, 32], 3).unwrap();
            let mean = |pred: &dyn Fn(usize) -> bool| {
                let vals: Vec<f64> = (0..p.psr.len()).filter(|&i| pred(i)).map(|i| p.psr.data()[i] as f64).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            let lesion = mean(&|i| p.labels.data[i] == LESION);
            let distal = mean(&|i| {
                p.labels.data[i] == WM
                    && p.lesions.iter().all(|l| l.surface_distance(voxel(&p.labels, i)) > RAMP_WIDTH)
            });
            assert!(lesion < distal, "seed {seed}: lesion {lesion} vs distal {distal}");
        }
    }
}
