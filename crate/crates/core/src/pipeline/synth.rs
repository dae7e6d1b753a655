use crate::autograd::Tensor;
use crate::diffusion::sample_clipped;
use crate::error::{Error, Result};
use crate::volumes::{extract_patches, percentile_normalize, stitch_patches, Patch, PatchSet, Volume};

use super::config::{NormalizeConfig, SampleConfig};
use super::train::ConditionalModel;

/// `[N, C, pz, py, px]` batch from per-channel patch sets sharing origins.
fn patch_batch(sets: &[PatchSet]) -> Result<Tensor> {
    let [px, py, pz] = sets[0].patch_size;
    let n = sets[0].patches.len();
    let mut data = Vec::with_capacity(n * sets.len() * px * py * pz);
    for i in 0..n {
        for s in sets {
            data.extend(s.patches[i].data.iter().map(|&v| v as f64));
        }
    }
    Tensor::new(&[n, sets.len(), pz, py, px], data)
}

/// Brain mask of the condition: the T1 mask when present, else nonzero T1 or FLAIR.
pub fn condition_mask(t1: &Volume, flair: &Volume) -> Vec<bool> {
    match t1.mask().or(flair.mask()) {
        Some(m) => m.to_vec(),
        None => t1.data().iter().zip(flair.data()).map(|(a, b)| *a != 0.0 || *b != 0.0).collect(),
    }
}

/// Encode condition patches, sample latents, decode and stitch.
/// The result is masked to the condition brain and clamped to `[0, 1]`.
pub fn synthesize_volume(
    model: &ConditionalModel,
    t1: &Volume,
    flair: &Volume,
    norm: &NormalizeConfig,
    sc: &SampleConfig,
    seed: u64,
) -> Result<Volume> {
    let dims = t1.dims();
    if flair.dims() != dims {
        return Err(Error::Shape(format!("t1 {dims:?} vs flair {:?}", flair.dims())));
    }
    let a = percentile_normalize(t1, norm.lo_pct, norm.hi_pct)?.volume;
    let b = percentile_normalize(flair, norm.lo_pct, norm.hi_pct)?.volume;
    let pa = extract_patches(&a, sc.patch, sc.stride)?;
    let pb = extract_patches(&b, sc.patch, sc.stride)?;
    let x_c = patch_batch(&[pa.clone(), pb])?;
    let n = pa.patches.len();
    let z_c = model.ae_cond.encode(&x_c)?.mu.scale(model.latent_scale);
    let sched = model.schedule()?;
    let mut shape = z_c.shape().to_vec();
    shape[1] = model.ae_psr.cfg.latent_channels;
    let mut den = |z: &Tensor, t: usize| model.predict_eps(z, &vec![t; n], &z_c);
    let clip = (sc.clip > 0.0).then_some(sc.clip);
    let z0 = sample_clipped(&mut den, &shape, &sched, sc.steps, sc.eta, clip, seed)?;
    let y = model.ae_psr.decode(&z0.scale(1.0 / model.latent_scale))?;
    let per = y.numel() / n;
    let patches = pa
        .patches
        .iter()
        .enumerate()
        .map(|(i, p)| Patch {
            origin: p.origin,
            data: y.data()[i * per..(i + 1) * per].iter().map(|&v| v as f32).collect(),
        })
        .collect();
    let stitched = stitch_patches(
        &PatchSet {
            patches,
            ..pa
        },
        dims,
    )?;
    let mask = condition_mask(t1, flair);
    let data = stitched
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v.clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Volume::new(dims, t1.spacing(), data, Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{generate_dataset, DataConfig};

    #[test]
    fn patch_batch_keeps_channel_order_and_layout() {
        let v = Volume::from_data([4, 2, 2], (0..16).map(|i| i as f32).collect()).unwrap();
        let w = v.with_data((0..16).map(|i| -(i as f32)).collect()).unwrap();
        let a = extract_patches(&v, [2, 2, 2], [2, 2, 2]).unwrap();
        let b = extract_patches(&w, [2, 2, 2], [2, 2, 2]).unwrap();
        let t = patch_batch(&[a, b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 2, 2]);
        assert_eq!(&t.data()[..8], &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]);
        assert_eq!(t.data()[8], 0.0);
        assert_eq!(t.data()[9], -1.0);
        assert_eq!(&t.data()[16..18], &[2.0, 3.0]);
    }

    #[test]
    fn condition_mask_prefers_volume_mask() {
        let cfg = DataConfig {
            n_subjects: 1,
            n_pretrain: 0,
            dims: [24, 24, 24],
            ..Default::default()
        };
        let s = &generate_dataset(&cfg).unwrap().cohort[0];
        assert_eq!(condition_mask(&s.t1, &s.flair), s.t1.mask().unwrap());
    }
}
