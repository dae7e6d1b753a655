//! Noise schedule, forward noising, clean-latent inversion, the composite
//! denoising objective, and DDIM/DDPM sampling.
//!
//! Timesteps run `1..=T`; `alpha_bar(0) = 1` denotes clean data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::autoencoder::edge_graph;
use crate::error::{Error, Result};
use crate::nn::Scope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.len()))),
        }
    }

    fn check_t(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.len())));
        }
        self.alpha_bar(t)
    }
}

pub fn make_schedule(cfg: &ScheduleConfig) -> Result<NoiseSchedule> {
    let ScheduleConfig {
        steps: t,
        beta_min,
        beta_max,
        kind: ScheduleKind::Linear,
    } = *cfg;
    if t < 1 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={t}, [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// `√ᾱ z + √(1−ᾱ) ε`.
pub fn forward_noise_ab(z: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.zip_map(eps, |z, e| a * z + b * e)
}

pub fn forward_noise(z: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    forward_noise_ab(z, eps, sched.check_t(t)?)
}

/// `(z_t − √(1−ᾱ) ε̂) / √ᾱ`.
pub fn predict_clean_ab(z_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if !(alpha_bar > 0.0) {
        return Err(Error::InvalidArgument("alpha_bar = 0: clean latent is not recoverable".into()));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - b * e) / a)
}

pub fn predict_clean(z_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    predict_clean_ab(z_t, eps_hat, sched.check_t(t)?)
}

/// One DDIM update from `t` to `t_prev`; `eta = 1` with consecutive steps is ancestral DDPM.
pub fn ddim_step<R: Rng + ?Sized>(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("t_prev {t_prev} must be < t {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")));
    }
    let ab = sched.check_t(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let z0 = predict_clean_ab(z_t, eps_hat, ab)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = z0.zip_map(eps_hat, |x0, e| ab_prev.sqrt() * x0 + dir * e)?;
    if sigma > 0.0 {
        let noise = Tensor::randn(z_t.shape(), 1.0, rng);
        for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += sigma * n;
        }
    }
    Ok(out)
}

/// Uniformly strided descending subsequence of `1..=T` containing `T` and `1`.
pub fn timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(Error::InvalidArgument(format!("steps {steps} outside 1..={t_max}")));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Noise predictor `ε̂(z_t, t)`; conditioning is captured by the implementor.
pub trait Denoiser {
    fn predict(&mut self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&mut self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

/// Draw a latent of `shape` from seeded `N(0, I)` and denoise it to `t = 0`.
pub fn sample(model: &mut dyn Denoiser, shape: &[usize], sched: &NoiseSchedule, steps: usize, eta: f64, seed: u64) -> Result<Tensor> {
    sample_clipped(model, shape, sched, steps, eta, None, seed)
}

/// `ε̂` consistent with the clean estimate clamped to `[-clip, clip]`.
pub fn clip_eps(z_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64, clip: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_t.zip_map(eps_hat, |z, e| {
        let x0 = ((z - b * e) / a).clamp(-clip, clip);
        (z - a * x0) / b
    })
}

/// [`sample`] with the clean-latent estimate clamped to `[-clip, clip]` at every step.
pub fn sample_clipped(
    model: &mut dyn Denoiser,
    shape: &[usize],
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    clip: Option<f64>,
    seed: u64,
) -> Result<Tensor> {
    if let Some(c) = clip {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!("clip {c} must be positive")));
        }
    }
    let ts = timesteps(sched.len(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(shape, 1.0, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let mut eps = model.predict(&z, t)?;
        if let Some(c) = clip {
            eps = clip_eps(&z, &eps, sched.check_t(t)?, c)?;
        }
        z = ddim_step(&z, t, t_prev, &eps, sched, eta, &mut rng)?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionWeights {
    pub edge: f64,
    pub align: f64,
}

impl Default for DiffusionWeights {
    fn default() -> Self {
        Self {
            edge: 0.05,
            align: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiffusionLossVars {
    pub total: Var,
    pub noise: Var,
    pub edge: Option<Var>,
    pub align: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLoss {
    pub total: f64,
    pub noise: f64,
    /// `None` when the edge term was skipped this step.
    pub edge: Option<f64>,
    pub align: f64,
}

impl DiffusionLossVars {
    pub fn values(&self, s: &Scope) -> DiffusionLoss {
        DiffusionLoss {
            total: s.value(self.total).item(),
            noise: s.value(self.noise).item(),
            edge: self.edge.map(|e| s.value(e).item()),
            align: s.value(self.align).item(),
        }
    }
}

/// Per-sample `ẑ_y` inside a graph.
pub fn predict_clean_graph(s: &mut Scope, z_t: Var, eps_hat: Var, alpha_bars: &[f64]) -> Result<Var> {
    if alpha_bars.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument("alpha_bar = 0: clean latent is not recoverable".into()));
    }
    let b: Vec<f64> = alpha_bars.iter().map(|a| -(1.0 - a).sqrt()).collect();
    let inv: Vec<f64> = alpha_bars.iter().map(|a| 1.0 / a.sqrt()).collect();
    let e = s.g.scale_batch(eps_hat, b)?;
    let d = s.g.add(z_t, e)?;
    s.g.scale_batch(d, inv)
}

/// Decoder applied to `ẑ_y` for the edge term.
pub type DecodeFn<'f> = dyn FnMut(&mut Scope, Var) -> Result<Var> + 'f;

/// `‖ε − ε̂‖² + λ_edge ‖∇D(ẑ_y) − ∇y‖₁ + λ_align ‖z_c − z_y‖²` (means).
/// The edge term is computed only when both `decode` and `y` are supplied.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_graph(
    s: &mut Scope,
    eps_hat: Var,
    eps: Var,
    z_t: Var,
    alpha_bars: &[f64],
    z_c: Var,
    z_y: Var,
    y: Option<Var>,
    decode: Option<&mut DecodeFn>,
    w: &DiffusionWeights,
) -> Result<DiffusionLossVars> {
    if w.edge < 0.0 || w.align < 0.0 {
        return Err(Error::InvalidArgument(format!("loss weights must be >= 0: {w:?}")));
    }
    if s.value(z_c).shape() != s.value(z_y).shape() {
        return Err(Error::Shape(format!(
            "z_c {:?} vs z_y {:?}",
            s.value(z_c).shape(),
            s.value(z_y).shape()
        )));
    }
    let noise = s.g.mse(eps_hat, eps)?;
    let align = s.g.mse(z_c, z_y)?;
    let edge = match (decode, y) {
        (Some(dec), Some(y)) => {
            let zhat = predict_clean_graph(s, z_t, eps_hat, alpha_bars)?;
            let img = dec(s, zhat)?;
            Some(edge_graph(s, img, y)?)
        }
        _ => None,
    };
    let mut total = noise;
    if let Some(e) = edge {
        if w.edge != 0.0 {
            let t = s.g.scale(e, w.edge);
            total = s.g.add(total, t)?;
        }
    }
    if w.align != 0.0 {
        let t = s.g.scale(align, w.align);
        total = s.g.add(total, t)?;
    }
    Ok(DiffusionLossVars {
        total,
        noise,
        edge,
        align,
    })
}

/// Tensor-level objective for one timestep with `model` and an image decoder.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    model: &mut dyn Denoiser,
    decode: &dyn Fn(&Tensor) -> Result<Tensor>,
    z_y: &Tensor,
    z_c: &Tensor,
    y: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    w: &DiffusionWeights,
) -> Result<DiffusionLoss> {
    if z_c.shape() != z_y.shape() {
        return Err(Error::Shape(format!("z_c {:?} vs z_y {:?}", z_c.shape(), z_y.shape())));
    }
    let z_t = forward_noise(z_y, t, eps, sched)?;
    let eps_hat = model.predict(&z_t, t)?;
    let zhat = predict_clean(&z_t, t, &eps_hat, sched)?;
    let img = decode(&zhat)?;
    let mut s = Scope::new();
    let eh = s.constant(eps_hat);
    let e = s.constant(eps.clone());
    let zc = s.constant(z_c.clone());
    let zy = s.constant(z_y.clone());
    let im = s.constant(img);
    let yv = s.constant(y.clone());
    let zt = s.constant(z_t);
    let mut dec = |_: &mut Scope, _: Var| Ok(im);
    let ab = sched.alpha_bar(t)?;
    let lead = z_y.shape().first().copied().unwrap_or(1);
    let vars = diffusion_loss_graph(&mut s, eh, e, zt, &vec![ab; lead], zc, zy, Some(yv), Some(&mut dec), w)?;
    Ok(vars.values(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::edge_loss;

    fn sched(t: usize) -> NoiseSchedule {
        make_schedule(&ScheduleConfig {
            steps: t,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s1 = sched(1);
        assert_eq!(s1.alpha_bars, vec![1.0 - 1e-4]);
        let s = sched(100);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        let mut prod = 1.0;
        for (a, ab) in s.alphas.iter().zip(&s.alpha_bars) {
            prod *= a;
            assert!((prod - ab).abs() < 1e-12);
        }
        let s = sched(1000);
        let last = *s.alpha_bars.last().unwrap();
        // Independent oracle: exp of the summed log retention.
        let oracle: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum::<f64>()
            .exp();
        assert!((last - oracle).abs() < 1e-12 * oracle.max(1.0));
        assert!((last - 4.0e-5).abs() < 0.2 * 4.0e-5, "{last}");
        assert!(make_schedule(&ScheduleConfig {
            steps: 10,
            beta_min: 0.1,
            beta_max: 0.01,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn forward_and_inverse_closed_forms() {
        let z = Tensor::scalar(2.0);
        let e = Tensor::scalar(1.0);
        let zt = forward_noise_ab(&z, &e, 0.25).unwrap();
        assert!((zt.item() - 1.866_025_403_784_438_6).abs() < 1e-12);
        let back = predict_clean_ab(&Tensor::scalar(1.86603), &e, 0.25).unwrap();
        assert!((back.item() - 2.0).abs() < 1e-4);
        assert_eq!(forward_noise_ab(&z, &e, 1.0).unwrap(), z);
        assert_eq!(forward_noise_ab(&z, &e, 0.0).unwrap(), e);
        let zero = Tensor::scalar(0.0);
        assert_eq!(predict_clean_ab(&zt, &zero, 0.25).unwrap().item(), zt.item() / 0.5);
        assert!(predict_clean_ab(&zt, &e, 0.0).is_err());
        assert!(forward_noise(&z, 0, &e, &sched(10)).is_err());
        assert!(forward_noise(&z, 11, &e, &sched(10)).is_err());
    }

    #[test]
    fn marginal_variance_is_preserved() {
        let s = sched(100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let z = Tensor::randn(&[n], 1.0, &mut rng);
        let e = Tensor::randn(&[n], 1.0, &mut rng);
        for t in [1, 25, 50, 100] {
            let zt = forward_noise(&z, t, &e, &s).unwrap();
            let m = zt.mean();
            let var = zt.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Standard error of a Gaussian sample variance.
            let se = (2.0 / (n - 1) as f64).sqrt();
            assert!((var - 1.0).abs() < 3.0 * se, "t={t} var={var}");
        }
    }

    #[test]
    fn ddim_contracts() {
        let s = sched(100);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let zt = forward_noise(&z0, 80, &eps, &s).unwrap();
        let zp = ddim_step(&zt, 80, 40, &eps, &s, 0.0, &mut rng).unwrap();
        let back = predict_clean(&zp, 40, &eps, &s).unwrap();
        assert!(back.max_abs_diff(&z0) < 1e-12);
        let last = ddim_step(&zt, 80, 0, &eps, &s, 0.7, &mut rng).unwrap();
        assert!(last.max_abs_diff(&predict_clean(&zt, 80, &eps, &s).unwrap()) < 1e-12);
        let a = ddim_step(&zt, 80, 40, &eps, &s, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = ddim_step(&zt, 80, 40, &eps, &s, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(&zt, 40, 40, &eps, &s, 0.0, &mut rng).is_err());
    }

    #[test]
    fn timestep_subsequence() {
        assert_eq!(timesteps(100, 1).unwrap(), vec![100]);
        let ts = timesteps(100, 25).unwrap();
        assert_eq!((ts[0], *ts.last().unwrap(), ts.len()), (100, 1, 25));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert!(timesteps(10, 0).is_err());
        assert!(timesteps(10, 11).is_err());
    }

    #[test]
    fn sampling_is_deterministic_with_expected_shape() {
        let s = sched(100);
        let mut model = |z: &Tensor, _t: usize| Ok(z.scale(0.1));
        let a = sample(&mut model, &[4, 2, 2, 2], &s, 10, 0.0, 7).unwrap();
        let b = sample(&mut model, &[4, 2, 2, 2], &s, 10, 0.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 2, 2, 2]);
        assert!(sample(&mut model, &[1], &s, 0, 0.0, 7).is_err());
    }

    /// Ancestral sampling with the exact posterior-mean denoiser of 1-D
    /// Gaussian data reproduces the data mean.
    #[test]
    fn ddpm_with_oracle_denoiser_recovers_data_mean() {
        let s = make_schedule(&ScheduleConfig {
            steps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
            ..Default::default()
        })
        .unwrap();
        assert!(s.alpha_bars[99] < 1e-4);
        let (m, sd) = (1.5, 0.5);
        let ab = s.alpha_bars.clone();
        let mut oracle = |z: &Tensor, t: usize| {
            let a = ab[t - 1];
            let var = a * sd * sd + 1.0 - a;
            Ok(z.map(|x| (1.0 - a).sqrt() * (x - a.sqrt() * m) / var))
        };
        let runs = 1000;
        let xs: Vec<f64> = (0..runs)
            .map(|seed| sample(&mut oracle, &[1], &s, 100, 1.0, seed).unwrap().item())
            .collect();
        let mean = xs.iter().sum::<f64>() / runs as f64;
        let se = sd / (runs as f64).sqrt();
        assert!((mean - m).abs() < 3.0 * se, "mean {mean}");
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        assert!((var - sd * sd).abs() < 0.25 * sd * sd, "var {var}");
    }

    #[test]
    fn loss_reductions() {
        let s = sched(100);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z_y = Tensor::randn(&[1, 2, 2, 2, 2], 1.0, &mut rng);
        let z_c = Tensor::randn(&[1, 2, 2, 2, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[1, 2, 2, 2, 2], 1.0, &mut rng);
        let y = Tensor::randn(&[1, 1, 8, 8, 8], 1.0, &mut rng);
        // Decoder stub: nearest upsample of channel 0 by 4.
        let decode = |z: &Tensor| -> Result<Tensor> {
            let mut out = vec![0.0; 512];
            for (i, o) in out.iter_mut().enumerate() {
                let (x, yy, zz) = (i % 8 / 4, i / 8 % 8 / 4, i / 64 / 4);
                *o = z.data()[zz * 4 + yy * 2 + x];
            }
            Tensor::new(&[1, 1, 8, 8, 8], out)
        };
        let truth = eps.clone();
        let mut perfect = move |_: &Tensor, _: usize| Ok(truth.clone());
        let w = DiffusionWeights::default();
        let l = diffusion_loss(&mut perfect, &decode, &z_y, &z_c, &y, 30, &eps, &s, &w).unwrap();
        assert_eq!(l.noise, 0.0);
        let want = edge_loss([8, 8, 8], decode(&z_y).unwrap().data(), y.data()).unwrap();
        assert!((l.edge.unwrap() - want).abs() < 1e-9);
        assert!((l.total - (l.noise + w.edge * l.edge.unwrap() + w.align * l.align)).abs() < 1e-12);

        let mut wrong = |z: &Tensor, _: usize| Ok(z.scale(0.3));
        let zero = DiffusionWeights { edge: 0.0, align: 0.0 };
        let l = diffusion_loss(&mut wrong, &decode, &z_y, &z_c, &y, 30, &eps, &s, &zero).unwrap();
        assert_eq!(l.total, l.noise);
        let l = diffusion_loss(&mut wrong, &decode, &z_y, &z_y, &y, 30, &eps, &s, &w).unwrap();
        assert_eq!(l.align, 0.0);
        let bad = Tensor::zeros(&[1, 3, 2, 2, 2]);
        assert!(diffusion_loss(&mut wrong, &decode, &z_y, &bad, &y, 30, &eps, &s, &w).is_err());
    }
}
