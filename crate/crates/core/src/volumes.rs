//! Volume container, VOL1 file I/O, percentile normalization and
//! overlapping patch extraction/stitching.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const VOL_MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 12 + 12 + 1;

/// A 3D scalar grid stored X-fastest: index `x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
    mask: Option<Vec<bool>>,
    pub meta: BTreeMap<String, String>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>, mask: Option<Vec<bool>>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 {
            return Err(Error::InvalidArgument(format!("empty dims {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(Error::Shape(format!("mask has {} voxels, data {n}", m.len())));
            }
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("volume data must be finite".into()));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            mask,
            meta: BTreeMap::new(),
        })
    }

    /// Unit-spacing volume without mask.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, [1.0; 3], data, None)
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; n],
            mask: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn with_mask(mut self, mask: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != self.data.len() {
                return Err(Error::Shape(format!("mask has {} voxels, data {}", m.len(), self.data.len())));
            }
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        let mut v = Self::new(self.dims, self.spacing, data, self.mask.clone())?;
        v.meta = self.meta.clone();
        Ok(v)
    }

    /// Zero every voxel outside the mask (no-op without a mask).
    pub fn apply_mask(&self) -> Self {
        let mut out = self.clone();
        if let Some(m) = &self.mask {
            for (v, &inside) in out.data.iter_mut().zip(m) {
                if !inside {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Values inside the mask, or all values without one.
    pub fn masked_values(&self) -> Vec<f32> {
        match &self.mask {
            Some(m) => self.data.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).collect(),
            None => self.data.clone(),
        }
    }

    /// `[1, 1, nz, ny, nx]` tensor view of the data.
    pub fn to_tensor(&self) -> Tensor {
        let [nx, ny, nz] = self.dims;
        Tensor::new(&[1, 1, nz, ny, nx], self.data.iter().map(|&v| v as f64).collect())
            .expect("volume dims match data")
    }

    /// Build a volume from a single-channel `[1, 1, nz, ny, nx]` tensor.
    pub fn from_tensor(t: &Tensor, spacing: [f32; 3]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(Error::Shape(format!("expected [1, 1, Z, Y, X], got {s:?}")));
        }
        Self::new([s[4], s[3], s[2]], spacing, t.data().iter().map(|&v| v as f32).collect(), None)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 5);
        out.extend_from_slice(VOL_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.push(self.mask.is_some() as u8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(m) = &self.mask {
            out.extend(m.iter().map(|&b| b as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[..4] != VOL_MAGIC {
            return Err(Error::BadMagic {
                expected: "VOL1".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                needed: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize];
        let spacing = [f32_at(16), f32_at(20), f32_at(24)];
        let has_mask = match bytes[28] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("invalid mask flag {other}"))),
        };
        let n: usize = dims.iter().product();
        let expected = n * 4 + if has_mask { n } else { 0 };
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                found: payload.len(),
            });
        }
        let data = payload[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = if has_mask {
            let raw = &payload[n * 4..];
            if raw.iter().any(|&b| b > 1) {
                return Err(Error::Format("mask bytes must be 0 or 1".into()));
            }
            Some(raw.iter().map(|&b| b == 1).collect())
        } else {
            None
        };
        Self::new(dims, spacing, data, mask)
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, v.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}

/// Order-statistic percentile: the sorted value at rank `ceil(pct/100 * (n-1))`.
///
/// Uses selection rather than a full sort.
pub fn percentile(values: &[f32], pct: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty set".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!("percentile {pct} outside [0, 100]")));
    }
    let rank = percentile_rank(values.len(), pct);
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    Ok(*v)
}

pub(crate) fn percentile_rank(n: usize, pct: f64) -> usize {
    ((pct / 100.0) * (n - 1) as f64).ceil().min((n - 1) as f64) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: Volume,
    /// Set when the two percentiles coincide; the volume is then all zero.
    pub degenerate: bool,
    pub lo: f32,
    pub hi: f32,
}

/// Map the `lo_pct` percentile to 0 and `hi_pct` to 1, clipping to `[0, 1]`.
/// Percentiles are taken over the mask when one is present.
pub fn percentile_normalize(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Normalized> {
    if lo_pct > hi_pct {
        return Err(Error::InvalidArgument(format!("lo {lo_pct} > hi {hi_pct}")));
    }
    let vals = v.masked_values();
    if vals.is_empty() {
        return Err(Error::InvalidArgument("normalization mask is empty".into()));
    }
    let lo = percentile(&vals, lo_pct)?;
    let hi = percentile(&vals, hi_pct)?;
    if hi <= lo {
        return Ok(Normalized {
            volume: v.with_data(vec![0.0; v.len()])?,
            degenerate: true,
            lo,
            hi,
        });
    }
    let range = hi - lo;
    let data = v.data().iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect();
    Ok(Normalized {
        volume: v.with_data(data)?,
        degenerate: false,
        lo,
        hi,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub source_dims: [usize; 3],
    pub patches: Vec<Patch>,
}

/// Origins along one axis: multiples of `stride`, with the last origin
/// clamped so the final patch ends on the boundary.
pub fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + size <= dim {
        out.push(o);
        o += stride;
    }
    if out.last().is_some_and(|&l| l + size < dim) {
        out.push(dim - size);
    }
    out
}

pub fn extract_patches(v: &Volume, size: [usize; 3], stride: [usize; 3]) -> Result<PatchSet> {
    let dims = v.dims();
    for a in 0..3 {
        if size[a] == 0 || stride[a] == 0 {
            return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
        }
        if stride[a] > size[a] {
            return Err(Error::InvalidArgument(format!(
                "stride {stride:?} larger than patch size {size:?} leaves gaps"
            )));
        }
        if size[a] > dims[a] {
            return Err(Error::InvalidArgument(format!(
                "patch size {size:?} exceeds dims {dims:?}"
            )));
        }
    }
    let ox = axis_origins(dims[0], size[0], stride[0]);
    let oy = axis_origins(dims[1], size[1], stride[1]);
    let oz = axis_origins(dims[2], size[2], stride[2]);
    let mut patches = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z0 in &oz {
        for &y0 in &oy {
            for &x0 in &ox {
                let mut data = Vec::with_capacity(size.iter().product());
                for z in 0..size[2] {
                    for y in 0..size[1] {
                        let start = v.index(x0, y0 + y, z0 + z);
                        data.extend_from_slice(&v.data()[start..start + size[0]]);
                    }
                }
                patches.push(Patch {
                    origin: [x0, y0, z0],
                    data,
                });
            }
        }
    }
    Ok(PatchSet {
        patch_size: size,
        stride,
        source_dims: dims,
        patches,
    })
}

/// Separable cosine taper, strictly positive on every patch voxel.
fn taper(size: usize) -> Vec<f64> {
    (0..size)
        .map(|i| {
            let s = (std::f64::consts::PI * (i as f64 + 0.5) / size as f64).sin();
            s * s
        })
        .collect()
}

/// Blend patches back into a volume of `dims` with normalized taper weights.
pub fn stitch_patches(ps: &PatchSet, dims: [usize; 3]) -> Result<Volume> {
    let n: usize = dims.iter().product();
    let size = ps.patch_size;
    let w = [taper(size[0]), taper(size[1]), taper(size[2])];
    let mut wsum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    for p in &ps.patches {
        if p.data.len() != size.iter().product::<usize>() || (0..3).any(|a| p.origin[a] + size[a] > dims[a]) {
            return Err(Error::Shape(format!("patch at {:?} does not fit dims {dims:?}", p.origin)));
        }
        for z in 0..size[2] {
            for y in 0..size[1] {
                for x in 0..size[0] {
                    let i = idx(p.origin[0] + x, p.origin[1] + y, p.origin[2] + z);
                    wsum[i] += w[0][x] * w[1][y] * w[2][z];
                    count[i] += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        return Err(Error::UncoveredVoxel([x, y, z]));
    }
    let mut acc = vec![0.0f64; n];
    for p in &ps.patches {
        for z in 0..size[2] {
            for y in 0..size[1] {
                for x in 0..size[0] {
                    let i = idx(p.origin[0] + x, p.origin[1] + y, p.origin[2] + z);
                    let v = p.data[(z * size[1] + y) * size[0] + x] as f64;
                    if count[i] == 1 {
                        acc[i] = v;
                    } else {
                        acc[i] += w[0][x] * w[1][y] * w[2][z] / wsum[i] * v;
                    }
                }
            }
        }
    }
    Volume::from_data(dims, acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::from_data(dims, (0..n).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let v = Volume::new([4, 4, 4], [1.0, 0.5, 2.0], (0..64).map(|i| i as f32 / 7.0).collect(), None).unwrap();
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        let bits = |v: &Volume| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
        assert!(back.mask().is_none());
    }

    #[test]
    fn mask_round_trip() {
        let mut mask = vec![false; 64];
        for i in [0, 5, 9, 17, 33, 50, 63] {
            mask[i] = true;
        }
        let v = ramp([4, 4, 4]).with_mask(Some(mask.clone())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vol");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.mask().unwrap(), &mask[..]);
        assert_eq!(back.mask().unwrap().iter().filter(|&&b| b).count(), 7);
        assert_eq!(back, v);
    }

    #[test]
    fn read_errors_are_distinct() {
        let good = ramp([2, 2, 2]).to_bytes();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Volume::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(Volume::from_bytes(&good[..20]), Err(Error::Truncated { .. })));
        assert!(matches!(Volume::from_bytes(&good[..good.len() - 3]), Err(Error::DimMismatch { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Volume::from_bytes(&long), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn invariants_checked_on_construction() {
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8], None).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![f32::NAN; 8], None).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 8], Some(vec![true; 7])).is_err());
    }

    #[test]
    fn constant_volume_normalizes_to_zero_with_flag() {
        let v = Volume::from_data([3, 3, 3], vec![5.0; 27]).unwrap();
        let n = percentile_normalize(&v, 0.0, 99.5).unwrap();
        assert!(n.degenerate);
        assert!(n.volume.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ramp_maps_995th_percentile_to_one() {
        // 7 * 11 * 13 = 1001 voxels holding 0..=1000 in shuffled order.
        let mut vals: Vec<f32> = (0..=1000).map(|i| i as f32).collect();
        vals.reverse();
        vals.swap(3, 700);
        let v = Volume::from_data([7, 11, 13], vals.clone()).unwrap();
        let n = percentile_normalize(&v, 0.0, 99.5).unwrap();
        assert!(!n.degenerate);
        // Sort oracle: rank 0.995 * 1000 = 995.
        let mut sorted = vals.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(n.hi, sorted[995]);
        assert_eq!(n.lo, 0.0);
        for (x, y) in vals.iter().zip(n.volume.data()) {
            if *x >= 995.0 {
                assert_eq!(*y, 1.0);
            } else {
                assert!((*y - x / 995.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unit_ramp_full_range_is_identity() {
        let vals: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let v = Volume::from_data([4, 4, 4], vals.clone()).unwrap();
        let n = percentile_normalize(&v, 0.0, 100.0).unwrap();
        for (a, b) in vals.iter().zip(n.volume.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_uses_mask_only() {
        let mut data = vec![1000.0f32; 27];
        let mut mask = vec![false; 27];
        for i in 0..10 {
            data[i] = i as f32;
            mask[i] = true;
        }
        let v = Volume::from_data([3, 3, 3], data).unwrap().with_mask(Some(mask)).unwrap();
        let n = percentile_normalize(&v, 0.0, 100.0).unwrap();
        assert_eq!(n.hi, 9.0);
        assert_eq!(n.volume.data()[20], 1.0);
    }

    #[test]
    fn patch_grids() {
        let count = |d: usize, s: usize, st: usize| {
            extract_patches(&ramp([d, d, d]), [s; 3], [st; 3]).unwrap().patches.len()
        };
        let one = extract_patches(&ramp([8, 8, 8]), [8; 3], [8; 3]).unwrap();
        assert_eq!(one.patches.len(), 1);
        assert_eq!(one.patches[0].origin, [0, 0, 0]);
        assert_eq!(count(8, 4, 4), 8);
        assert_eq!(axis_origins(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(count(10, 4, 4), 27);
        assert!(extract_patches(&ramp([8, 8, 8]), [9, 4, 4], [4; 3]).is_err());
    }

    #[test]
    fn single_patch_stitch_is_exact() {
        let v = ramp([6, 5, 4]);
        let ps = extract_patches(&v, [6, 5, 4], [6, 5, 4]).unwrap();
        assert_eq!(stitch_patches(&ps, v.dims()).unwrap().data(), v.data());
    }

    #[test]
    fn half_overlap_blend_is_monotone() {
        let dims = [8, 4, 4];
        let ps = PatchSet {
            patch_size: [6, 4, 4],
            stride: [2, 4, 4],
            source_dims: dims,
            patches: vec![
                Patch { origin: [0, 0, 0], data: vec![0.0; 96] },
                Patch { origin: [2, 0, 0], data: vec![1.0; 96] },
            ],
        };
        let out = stitch_patches(&ps, dims).unwrap();
        let row: Vec<f32> = (0..8).map(|x| out.get(x, 1, 1)).collect();
        assert_eq!(row[0], 0.0);
        assert_eq!(row[7], 1.0);
        for x in 2..6 {
            assert!(row[x] > 0.0 && row[x] < 1.0, "{row:?}");
        }
        assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
    }

    #[test]
    fn uncovered_voxel_is_reported() {
        let ps = PatchSet {
            patch_size: [2, 2, 2],
            stride: [2, 2, 2],
            source_dims: [3, 2, 2],
            patches: vec![Patch { origin: [0, 0, 0], data: vec![1.0; 8] }],
        };
        match stitch_patches(&ps, [3, 2, 2]) {
            Err(Error::UncoveredVoxel(c)) => assert_eq!(c, [2, 0, 0]),
            other => panic!("expected uncovered voxel, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn stitch_of_extract_is_identity(
            dx in 3usize..12, dy in 3usize..12, dz in 3usize..12,
            size in 2usize..6, stride in 1usize..6, seed in any::<u64>(),
        ) {
            let dims = [dx, dy, dz];
            let size = [size.min(dx), size.min(dy), size.min(dz)];
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 100.0).collect();
            let v = Volume::from_data(dims, data).unwrap();
            let stride = [stride.min(size[0]), stride.min(size[1]), stride.min(size[2])];
            let ps = extract_patches(&v, size, stride).unwrap();
            let out = stitch_patches(&ps, dims).unwrap();
            for (a, b) in v.data().iter().zip(out.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }

        #[test]
        fn normalization_is_idempotent(vals in proptest::collection::vec(-50.0f32..50.0, 27), lo in 0.0f64..20.0, hi in 80.0f64..100.0) {
            let v = Volume::from_data([3, 3, 3], vals).unwrap();
            let once = percentile_normalize(&v, lo, hi).unwrap();
            prop_assume!(!once.degenerate);
            let twice = percentile_normalize(&once.volume, lo, hi).unwrap();
            for (a, b) in once.volume.data().iter().zip(twice.volume.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn percentile_matches_full_sort(vals in proptest::collection::vec(-1e3f32..1e3, 1..400), pct in 0.0f64..=100.0) {
            let mut sorted = vals.clone();
            sorted.sort_by(f32::total_cmp);
            let rank = ((pct / 100.0) * (sorted.len() - 1) as f64).ceil() as usize;
            prop_assert_eq!(percentile(&vals, pct).unwrap(), sorted[rank.min(sorted.len() - 1)]);
        }
    }
}
