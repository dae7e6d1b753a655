use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::autoencoder::{
    align_finetune_step, decoder_graph, encoder_graph, init_discriminator, train_ae, AEPair, AeConfig, AeStepLog, AlignLoss,
    Domain,
};
use crate::backbone::{init_unet, unet_graph, UNetConfig};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{conditioned_graph, init_adapters, stage2_params, AdapterConfig, Streams};
use crate::diffusion::{diffusion_loss_graph, forward_noise_ab, make_schedule, DiffusionLoss, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::params::{Adam, AdamConfig, ParameterSet};
use crate::volumes::{extract_patches, percentile_normalize, Volume};

use super::config::{AlignConfig, NormalizeConfig, PretrainConfig, RunConfig, SampleConfig, Stage2Config};
use super::data::{Dataset, Subject};

pub const KIND_AE: &str = "autoencoder";
pub const KIND_BACKBONE: &str = "backbone";
pub const KIND_CONDITIONAL: &str = "conditional";

/// Per-step generator: stream `step + 1` of the run seed, so a resumed run
/// draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}

fn adam(lr: f64) -> Adam {
    Adam::new(AdamConfig {
        lr,
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1 {
    pub ae_psr: AEPair,
    pub ae_cond: AEPair,
}

/// Both autoencoders, with the condition encoder aligned to the PSR latent space.
pub fn train_stage1(cfg: &RunConfig, ds: &Dataset) -> Result<Stage1> {
    let (ae_psr, _, _) = train_autoencoder(cfg, ds, Domain::Psr)?;
    let (mut ae_cond, _, _) = train_autoencoder(cfg, ds, Domain::Cond)?;
    align_cond_encoder(&cfg.align, &cfg.normalize, &mut ae_cond, &ae_psr, &ds.pretrain)?;
    Ok(Stage1 { ae_psr, ae_cond })
}

/// Train one autoencoder and its critic on the pretraining pool.
pub fn train_autoencoder(cfg: &RunConfig, ds: &Dataset, domain: Domain) -> Result<(AEPair, ParameterSet, Vec<AeStepLog>)> {
    let tcfg = match domain {
        Domain::Psr => &cfg.train_ae_psr,
        Domain::Cond => &cfg.train_ae_cond,
    };
    let data = ds
        .pretrain
        .iter()
        .map(|s| match domain {
            Domain::Psr => Ok(s.psr_tensor()),
            Domain::Cond => s.cond_tensor(&cfg.normalize),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut ae = AEPair::new(domain, cfg.autoencoder.clone(), &mut rng);
    let mut disc = init_discriminator(domain.channels(), &mut rng);
    let logs = train_ae(&mut ae, &mut disc, &data, tcfg)?;
    ae.params.freeze_all();
    disc.freeze_all();
    Ok((ae, disc, logs))
}

pub fn ae_checkpoint(run_config: &str, ae: &AEPair, disc: Option<&ParameterSet>, aligned: bool) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(KIND_AE, run_config);
    c.set_group("ae", ae.params.clone());
    if let Some(d) = disc {
        c.set_group("disc", d.clone());
    }
    c.set_meta("domain", &ae.domain)?;
    c.set_meta("ae_config", &ae.cfg)?;
    c.set_meta("aligned", &aligned)?;
    Ok(c)
}

pub fn ae_from_checkpoint(c: &Checkpoint, domain: Domain) -> Result<AEPair> {
    c.expect_kind(KIND_AE)?;
    let found: Domain = c.get_meta("domain")?;
    if found != domain {
        return Err(Error::MissingComponent(format!(
            "expected a {} autoencoder, found {}",
            domain.as_str(),
            found.as_str()
        )));
    }
    let cfg: AeConfig = c.get_meta("ae_config")?;
    let mut params = c.group("ae")?.clone();
    params.freeze_all();
    Ok(AEPair { domain, cfg, params })
}

fn crop_origin<R: Rng + ?Sized>(shape: &[usize], size: usize, rng: &mut R) -> [usize; 3] {
    [
        rng.random_range(0..=shape[1] - size),
        rng.random_range(0..=shape[2] - size),
        rng.random_range(0..=shape[3] - size),
    ]
}

/// `size³` crop of a `[C, Z, Y, X]` tensor at `[z, y, x]` origin, as `[1, C, s, s, s]`.
fn crop_at(t: &Tensor, o: [usize; 3], size: usize) -> Result<Tensor> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s[0] * size * size * size);
    for c in 0..s[0] {
        for z in 0..size {
            for y in 0..size {
                let base = ((c * s[1] + o[0] + z) * s[2] + o[1] + y) * s[3] + o[2];
                out.extend_from_slice(&t.data()[base..base + size]);
            }
        }
    }
    Tensor::new(&[1, s[0], size, size, size], out)
}

fn with_batch_axis(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

/// Fine-tune the conditioning encoder toward the frozen PSR encoder.
pub fn align_cond_encoder(
    acfg: &AlignConfig,
    norm: &NormalizeConfig,
    ae_cond: &mut AEPair,
    ae_psr: &AEPair,
    subjects: &[Subject],
) -> Result<Vec<AlignLoss>> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no alignment subjects".into()));
    }
    let pairs = subjects
        .iter()
        .map(|s| Ok((s.cond_tensor(norm)?, s.psr_tensor())))
        .collect::<Result<Vec<_>>>()?;
    let mut psr = ae_psr.clone();
    psr.params.freeze_all();
    ae_cond.params.train_all();
    let mut opt = adam(acfg.lr);
    let mut logs = Vec::with_capacity(acfg.steps);
    for step in 0..acfg.steps {
        let mut rng = step_rng(acfg.seed, step);
        let mut xs = Vec::with_capacity(acfg.batch);
        let mut ys = Vec::with_capacity(acfg.batch);
        for _ in 0..acfg.batch {
            let (x, y) = &pairs[rng.random_range(0..pairs.len())];
            if acfg.crop == 0 {
                xs.push(with_batch_axis(x)?);
                ys.push(with_batch_axis(y)?);
            } else {
                let o = crop_origin(x.shape(), acfg.crop, &mut rng);
                xs.push(crop_at(x, o, acfg.crop)?);
                ys.push(crop_at(y, o, acfg.crop)?);
            }
        }
        let x = Tensor::stack_batch(&xs)?;
        let y = Tensor::stack_batch(&ys)?;
        logs.push(align_finetune_step(ae_cond, &mut opt, &psr, &x, &y)?);
    }
    ae_cond.params.freeze_all();
    Ok(logs)
}

/// Posterior means of `xs` (`[C, Z, Y, X]` each), unbatched.
pub fn encode_means(ae: &AEPair, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(4) {
        let batch = Tensor::stack_batch(&chunk.iter().map(with_batch_axis).collect::<Result<Vec<_>>>()?)?;
        let mu = ae.encode(&batch)?.mu;
        for i in 0..chunk.len() {
            let item = mu.batch_item(i);
            let shape = item.shape()[1..].to_vec();
            out.push(item.reshape(&shape)?);
        }
    }
    Ok(out)
}

/// `1 / std` over every element of `mus`.
pub fn latent_scale(mus: &[Tensor]) -> Result<f64> {
    let vals: Vec<f64> = mus.iter().flat_map(|t| t.data().iter().copied()).collect();
    if vals.len() < 2 {
        return Err(Error::InvalidArgument("need latents to estimate a scale".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::Degenerate("latents have zero variance".into()));
    }
    Ok(1.0 / var.sqrt())
}

/// Scaled patch latents plus the image-space patches they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentSet {
    pub seeds: Vec<u64>,
    /// `[L, z, y, x]` scaled PSR posterior means.
    pub z_y: Vec<Tensor>,
    /// `[L, z, y, x]` scaled condition posterior means.
    pub z_c: Vec<Tensor>,
    /// `[1, p, p, p]` PSR patches.
    pub y: Vec<Tensor>,
    /// `[2, p, p, p]` normalized condition patches.
    pub x_c: Vec<Tensor>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// Every item belonging to `seeds`, in stored order.
    pub fn select(&self, seeds: &[u64]) -> Result<LatentSet> {
        if let Some(s) = seeds.iter().find(|s| !self.seeds.contains(s)) {
            return Err(Error::InvalidArgument(format!("seed {s} not encoded")));
        }
        let mut out = LatentSet::default();
        for i in (0..self.len()).filter(|&i| seeds.contains(&self.seeds[i])) {
            out.seeds.push(self.seeds[i]);
            out.z_y.push(self.z_y[i].clone());
            out.z_c.push(self.z_c[i].clone());
            out.y.push(self.y[i].clone());
            out.x_c.push(self.x_c[i].clone());
        }
        Ok(out)
    }
}

fn patch_tensors(v: &Volume, sc: &SampleConfig) -> Result<Vec<Tensor>> {
    let [px, py, pz] = sc.patch;
    extract_patches(v, sc.patch, sc.stride)?
        .patches
        .into_iter()
        .map(|p| Tensor::new(&[1, pz, py, px], p.data.into_iter().map(f64::from).collect()))
        .collect()
}

/// PSR (`[1, p, p, p]`) and normalized condition (`[2, p, p, p]`) patches of
/// one subject on the synthesis patch grid.
pub fn subject_patches(s: &Subject, norm: &NormalizeConfig, sc: &SampleConfig) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let y = patch_tensors(&s.psr, sc)?;
    let t1 = patch_tensors(&percentile_normalize(&s.t1, norm.lo_pct, norm.hi_pct)?.volume, sc)?;
    let fl = patch_tensors(&percentile_normalize(&s.flair, norm.lo_pct, norm.hi_pct)?.volume, sc)?;
    let x_c = t1
        .into_iter()
        .zip(fl)
        .map(|(a, b)| {
            let shape = [2, a.shape()[1], a.shape()[2], a.shape()[3]];
            let mut d = a.into_data();
            d.extend_from_slice(b.data());
            Tensor::new(&shape, d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((y, x_c))
}

/// Per-patch scaled latents of `subjects`; `seeds` repeats once per patch.
pub fn encode_subjects(
    stage1: &Stage1,
    scale: f64,
    subjects: &[Subject],
    norm: &NormalizeConfig,
    sc: &SampleConfig,
) -> Result<LatentSet> {
    let mut out = LatentSet::default();
    for s in subjects {
        let (y, x_c) = subject_patches(s, norm, sc)?;
        out.seeds.extend(std::iter::repeat_n(s.seed, y.len()));
        out.z_y.extend(encode_means(&stage1.ae_psr, &y)?.into_iter().map(|t| t.scale(scale)));
        out.z_c.extend(encode_means(&stage1.ae_cond, &x_c)?.into_iter().map(|t| t.scale(scale)));
        out.y.extend(y);
        out.x_c.extend(x_c);
    }
    Ok(out)
}

/// One noised minibatch drawn from `rng`.
struct NoisyBatch {
    idx: Vec<usize>,
    t: Vec<usize>,
    alpha_bars: Vec<f64>,
    eps: Tensor,
    z_t: Tensor,
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    Tensor::stack_batch(&items.iter().map(with_batch_axis).collect::<Result<Vec<_>>>()?)
}

fn draw_batch<R: Rng + ?Sized>(z_y: &[Tensor], batch: usize, sched: &NoiseSchedule, rng: &mut R) -> Result<NoisyBatch> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..z_y.len())).collect();
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sched.len())).collect();
    let alpha_bars = t.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let mut zs = Vec::with_capacity(batch);
    let mut es = Vec::with_capacity(batch);
    for (&i, &ab) in idx.iter().zip(&alpha_bars) {
        let e = Tensor::randn(z_y[i].shape(), 1.0, rng);
        zs.push(with_batch_axis(&forward_noise_ab(&z_y[i], &e, ab)?)?);
        es.push(with_batch_axis(&e)?);
    }
    Ok(NoisyBatch {
        idx,
        t,
        alpha_bars,
        eps: Tensor::stack_batch(&es)?,
        z_t: Tensor::stack_batch(&zs)?,
    })
}

fn t_f64(t: &[usize]) -> Vec<f64> {
    t.iter().map(|&t| t as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub opt: Adam,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLog {
    pub step: usize,
    pub loss: f64,
}

/// Frozen unconditional denoiser and the latent scale it was trained at.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: UNetConfig,
    pub schedule: ScheduleConfig,
    pub params: ParameterSet,
    pub latent_scale: f64,
}

impl Backbone {
    pub fn from_state(cfg: &RunConfig, state: &TrainState, latent_scale: f64) -> Self {
        let mut params = state.params.clone();
        params.freeze_all();
        Self {
            cfg: cfg.unet.clone(),
            schedule: cfg.schedule.clone(),
            params,
            latent_scale,
        }
    }
}

/// Unconditional noise-prediction training on PSR patch latents of the
/// pretraining pool, from `resume` (or a fresh init) up to step `until`.
pub fn pretrain_backbone(
    cfg: &RunConfig,
    ae_psr: &AEPair,
    ds: &Dataset,
    resume: Option<TrainState>,
    until: usize,
) -> Result<(TrainState, f64, Vec<NoiseLog>)> {
    let pc: &PretrainConfig = &cfg.pretrain;
    if ds.pretrain.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining pool".into()));
    }
    let mut y = Vec::new();
    for s in &ds.pretrain {
        y.extend(patch_tensors(&s.psr, &cfg.sample)?);
    }
    let mus = encode_means(ae_psr, &y)?;
    let scale = latent_scale(&mus)?;
    let z_y: Vec<Tensor> = mus.iter().map(|t| t.scale(scale)).collect();
    let sched = make_schedule(&cfg.schedule)?;
    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut params = init_unet(&cfg.unet, &mut ChaCha8Rng::seed_from_u64(pc.seed))?;
            params.train_all();
            TrainState {
                params,
                opt: adam(pc.lr),
                step: 0,
            }
        }
    };
    let mut logs = Vec::new();
    while state.step < until {
        let mut rng = step_rng(pc.seed, state.step);
        let b = draw_batch(&z_y, pc.batch, &sched, &mut rng)?;
        let (grads, loss) = {
            let mut s = Scope::new().with(&state.params);
            let zt = s.constant(b.z_t);
            let eps = s.constant(b.eps);
            let eh = unet_graph(&mut s, &cfg.unet, zt, &t_f64(&b.t), None)?;
            let l = s.g.mse(eh, eps)?;
            (s.grads(l)?, s.value(l).item())
        };
        state.opt.step(&mut state.params, &grads)?;
        logs.push(NoiseLog { step: state.step, loss });
        state.step += 1;
    }
    Ok((state, scale, logs))
}

/// Backbone checkpoint; tensors are stored frozen, optimizer state kept for resuming.
pub fn backbone_checkpoint(run_config: &str, cfg: &RunConfig, state: &TrainState, scale: f64) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(KIND_BACKBONE, run_config);
    c.step = state.step as u64;
    let mut unet = state.params.clone();
    unet.freeze_all();
    c.set_group("unet", unet);
    c.set_adam("opt", &state.opt)?;
    c.set_meta("unet_config", &cfg.unet)?;
    c.set_meta("schedule", &cfg.schedule)?;
    c.set_meta("latent_scale", &scale)?;
    Ok(c)
}

pub fn backbone_from_checkpoint(c: &Checkpoint) -> Result<Backbone> {
    c.expect_kind(KIND_BACKBONE)?;
    let mut params = c.group("unet")?.clone();
    params.freeze_all();
    Ok(Backbone {
        cfg: c.get_meta("unet_config")?,
        schedule: c.get_meta("schedule")?,
        params,
        latent_scale: c.get_meta("latent_scale")?,
    })
}

pub fn resume_state(c: &Checkpoint) -> Result<TrainState> {
    c.expect_kind(KIND_BACKBONE)?;
    let mut params = c.group("unet")?.clone();
    params.train_all();
    Ok(TrainState {
        params,
        opt: c.adam("opt")?,
        step: c.step as usize,
    })
}

/// Frozen backbone with (possibly empty) adapters and both autoencoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalModel {
    pub unet: UNetConfig,
    pub adapter_cfg: AdapterConfig,
    pub schedule: ScheduleConfig,
    pub backbone: ParameterSet,
    pub adapters: ParameterSet,
    pub ae_psr: AEPair,
    pub ae_cond: AEPair,
    pub latent_scale: f64,
}

impl ConditionalModel {
    /// The backbone alone: no streams, no adapters.
    pub fn unconditional(backbone: &Backbone, stage1: &Stage1) -> Self {
        Self {
            unet: backbone.cfg.clone(),
            adapter_cfg: AdapterConfig {
                streams: Streams::NONE,
                ..Default::default()
            },
            schedule: backbone.schedule.clone(),
            backbone: backbone.params.clone(),
            adapters: ParameterSet::new(),
            ae_psr: stage1.ae_psr.clone(),
            ae_cond: stage1.ae_cond.clone(),
            latent_scale: backbone.latent_scale,
        }
    }

    pub fn streams(&self) -> Streams {
        self.adapter_cfg.streams
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(&self.schedule)
    }

    /// `ε̂` for batched `z_t` with per-sample timesteps and scaled condition latents.
    pub fn predict_eps(&self, z_t: &Tensor, t: &[usize], z_c: &Tensor) -> Result<Tensor> {
        let mut s = Scope::new().with_frozen(&self.backbone).with_frozen(&self.adapters);
        let zt = s.constant(z_t.clone());
        let zc = s.constant(z_c.clone());
        let out = conditioned_graph(&mut s, &self.unet, &self.adapter_cfg, zt, &t_f64(t), Some(zc))?;
        Ok(s.value(out).clone())
    }

    pub fn to_checkpoint(&self, run_config: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(KIND_CONDITIONAL, run_config);
        c.set_group("unet", self.backbone.clone());
        c.set_group("adapters", self.adapters.clone());
        c.set_group("ae_psr", self.ae_psr.params.clone());
        c.set_group("ae_cond", self.ae_cond.params.clone());
        c.set_meta("unet_config", &self.unet)?;
        c.set_meta("adapter_config", &self.adapter_cfg)?;
        c.set_meta("schedule", &self.schedule)?;
        c.set_meta("latent_scale", &self.latent_scale)?;
        c.set_meta("ae_config", &self.ae_psr.cfg)?;
        c.set_meta("streams", &self.streams().label())?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND_CONDITIONAL)?;
        let ae_cfg: AeConfig = c.get_meta("ae_config")?;
        let ae = |group: &str, domain| -> Result<AEPair> {
            Ok(AEPair {
                domain,
                cfg: ae_cfg.clone(),
                params: c.group(group)?.clone(),
            })
        };
        Ok(Self {
            unet: c.get_meta("unet_config")?,
            adapter_cfg: c.get_meta("adapter_config")?,
            schedule: c.get_meta("schedule")?,
            backbone: c.group("unet")?.clone(),
            adapters: c.group("adapters")?.clone(),
            ae_psr: ae("ae_psr", Domain::Psr)?,
            ae_cond: ae("ae_cond", Domain::Cond)?,
            latent_scale: c.get_meta("latent_scale")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub step: usize,
    pub t_mean: f64,
    pub total: f64,
    pub noise: f64,
    /// Empty on steps without the edge term.
    pub edge: Option<f64>,
    pub align: f64,
}

impl Stage2Log {
    fn new(step: usize, t: &[usize], l: DiffusionLoss) -> Self {
        Self {
            step,
            t_mean: t.iter().sum::<usize>() as f64 / t.len() as f64,
            total: l.total,
            noise: l.noise,
            edge: l.edge,
            align: l.align,
        }
    }
}

/// Frozen-tensor hash diff and trainable census of a Stage-2 run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub frozen_tensors: usize,
    pub changed: Vec<String>,
    pub trainable: Vec<String>,
    pub expected_trainable: Vec<String>,
    pub trainable_params: usize,
}

impl FreezeAudit {
    pub fn passed(&self) -> bool {
        self.changed.is_empty() && self.trainable == self.expected_trainable
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Run {
    pub model: ConditionalModel,
    pub logs: Vec<Stage2Log>,
    pub audit: FreezeAudit,
}

fn prefixed_hashes(prefix: &str, ps: &ParameterSet) -> BTreeMap<String, String> {
    ps.hashes().into_iter().map(|(k, v)| (format!("{prefix}/{k}"), v)).collect()
}

/// Train the enabled adapters against a frozen backbone and frozen autoencoders.
pub fn train_stage2(
    sc: &Stage2Config,
    acfg: &AdapterConfig,
    backbone: &Backbone,
    stage1: &Stage1,
    data: &LatentSet,
) -> Result<Stage2Run> {
    if acfg.streams == Streams::NONE {
        return Err(Error::InvalidArgument("stage 2 needs at least one conditioning stream".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no stage-2 training latents".into()));
    }
    let cfg = &backbone.cfg;
    let sched = make_schedule(&backbone.schedule)?;
    let mut adapters = init_adapters(&backbone.params, cfg, acfg, &mut ChaCha8Rng::seed_from_u64(sc.seed))?;
    let dec_psr = stage1.ae_psr.params.subset("dec.");
    let mut ae_cond = stage1.ae_cond.clone();
    ae_cond.params.freeze_all();
    let mut enc_cond = ae_cond.params.subset("enc.");
    if sc.adapt_cond_encoder {
        enc_cond.train_all();
    }

    let mut frozen_before = prefixed_hashes("unet", &backbone.params);
    frozen_before.extend(prefixed_hashes("ae_psr", &stage1.ae_psr.params));
    if !sc.adapt_cond_encoder {
        frozen_before.extend(prefixed_hashes("ae_cond", &ae_cond.params));
    }

    let mut opt = adam(sc.lr);
    let mut opt_cond = adam(sc.lr);
    let inv_scale = 1.0 / backbone.latent_scale;
    let mut logs = Vec::with_capacity(sc.steps);
    for step in 0..sc.steps {
        let mut rng = step_rng(sc.seed, step);
        let b = draw_batch(&data.z_y, sc.batch, &sched, &mut rng)?;
        let pick = |v: &[Tensor]| stack(&b.idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        let with_edge = sc.edge_every > 0 && step % sc.edge_every == 0 && sc.weights.edge > 0.0;
        let (grads, loss) = {
            let mut s = Scope::new()
                .with_frozen(&backbone.params)
                .with(&adapters)
                .with_frozen(&dec_psr)
                .with(&enc_cond);
            let zt = s.constant(b.z_t.clone());
            let eps = s.constant(b.eps.clone());
            let zy = s.constant(pick(&data.z_y)?);
            let zc = if sc.adapt_cond_encoder {
                let x = s.constant(pick(&data.x_c)?);
                let (mu, _) = encoder_graph(&mut s, Domain::Cond, x)?;
                s.g.scale(mu, backbone.latent_scale)
            } else {
                s.constant(pick(&data.z_c)?)
            };
            let y = if with_edge { Some(s.constant(pick(&data.y)?)) } else { None };
            let eh = conditioned_graph(&mut s, cfg, acfg, zt, &t_f64(&b.t), Some(zc))?;
            let mut decode = |s: &mut Scope, z: crate::autograd::Var| {
                let z = s.g.scale(z, inv_scale);
                decoder_graph(s, z)
            };
            let vars = diffusion_loss_graph(
                &mut s,
                eh,
                eps,
                zt,
                &b.alpha_bars,
                zc,
                zy,
                y,
                if with_edge { Some(&mut decode) } else { None },
                &sc.weights,
            )?;
            (s.grads(vars.total)?, vars.values(&s))
        };
        let (cond_grads, adapter_grads): (BTreeMap<_, _>, BTreeMap<_, _>) =
            grads.into_iter().partition(|(k, _)| k.starts_with("enc."));
        opt.step(&mut adapters, &adapter_grads)?;
        if sc.adapt_cond_encoder {
            opt_cond.step(&mut enc_cond, &cond_grads)?;
        }
        logs.push(Stage2Log::new(step, &b.t, loss));
    }

    if sc.adapt_cond_encoder {
        for (name, t) in enc_cond.iter() {
            *ae_cond.params.get_mut(name).expect("subset of ae_cond") = t.clone();
        }
    }
    let mut frozen_after = prefixed_hashes("unet", &backbone.params);
    frozen_after.extend(prefixed_hashes("ae_psr", &stage1.ae_psr.params));
    if !sc.adapt_cond_encoder {
        frozen_after.extend(prefixed_hashes("ae_cond", &ae_cond.params));
    }
    let changed: Vec<String> = frozen_before
        .iter()
        .filter(|(k, v)| frozen_after.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    let combined = stage2_params(&backbone.params, &adapters)?;
    let expected: Vec<String> = combined.select(&acfg.streams.patterns())?.into_iter().collect();
    let audit = FreezeAudit {
        frozen_tensors: frozen_before.len(),
        changed,
        trainable: combined.trainable_names().map(String::from).collect(),
        expected_trainable: expected,
        trainable_params: adapters.trainable_numel(),
    };
    if let Some(name) = audit.changed.first() {
        return Err(Error::FrozenModified(name.clone()));
    }
    if audit.trainable != audit.expected_trainable {
        return Err(Error::InvalidArgument(format!(
            "trainable census {:?} does not match stream patterns {:?}",
            audit.trainable, audit.expected_trainable
        )));
    }
    Ok(Stage2Run {
        model: ConditionalModel {
            unet: cfg.clone(),
            adapter_cfg: acfg.clone(),
            schedule: backbone.schedule.clone(),
            backbone: backbone.params.clone(),
            adapters,
            ae_psr: stage1.ae_psr.clone(),
            ae_cond,
            latent_scale: backbone.latent_scale,
        },
        logs,
        audit,
    })
}

/// Mean noise-prediction MSE over fixed `(t, ε)` draws on every latent.
pub fn validation_noise_loss(model: &ConditionalModel, data: &LatentSet, draws: usize, seed: u64) -> Result<f64> {
    let sched = model.schedule()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for d in 0..draws {
        for chunk in (0..data.len()).collect::<Vec<_>>().chunks(8) {
            let mut rng = step_rng(seed, d * 100_000 + chunk[0]);
            let t: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=sched.len())).collect();
            let mut zs = Vec::new();
            let mut es = Vec::new();
            for (&i, &ti) in chunk.iter().zip(&t) {
                let e = Tensor::randn(data.z_y[i].shape(), 1.0, &mut rng);
                zs.push(forward_noise_ab(&data.z_y[i], &e, sched.alpha_bar(ti)?)?);
                es.push(e);
            }
            let zc: Vec<Tensor> = chunk.iter().map(|&i| data.z_c[i].clone()).collect();
            let eh = model.predict_eps(&stack(&zs)?, &t, &stack(&zc)?)?;
            let e = stack(&es)?;
            total += eh.data().iter().zip(e.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += e.numel();
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no validation latents".into()));
    }
    Ok(total / count as f64)
}
