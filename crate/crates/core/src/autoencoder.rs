//! KL autoencoders (4x spatial downsampling), the LSGAN patch critic, and the
//! conditioning-encoder alignment fine-tune.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::backbone::batched;
use crate::error::{Error, Result};
use crate::nn::{init_conv, Scope};
use crate::params::{Adam, ParameterSet};

/// Clamp range of the half-log-variance head.
pub const HALF_LOGVAR_RANGE: (f64, f64) = (-15.0, 5.0);
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Psr,
    Cond,
}

impl Domain {
    pub fn channels(self) -> usize {
        match self {
            Domain::Psr => 1,
            Domain::Cond => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Psr => "psr",
            Domain::Cond => "cond",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psr" => Ok(Domain::Psr),
            "cond" => Ok(Domain::Cond),
            _ => Err(Error::InvalidArgument(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub latent_channels: usize,
    /// Width of the full-resolution stage; doubled at each downsampling.
    pub base_width: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AEPair {
    pub domain: Domain,
    pub cfg: AeConfig,
    /// `enc.*` and `dec.*` tensors.
    pub params: ParameterSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

const ENC_LAYERS: [(&str, usize); 6] = [
    ("enc.conv_in", 1),
    ("enc.down1", 2),
    ("enc.res1", 1),
    ("enc.down2", 2),
    ("enc.res2", 1),
    ("enc.out", 1),
];

impl AEPair {
    pub fn new<R: Rng + ?Sized>(domain: Domain, cfg: AeConfig, rng: &mut R) -> Self {
        let c = domain.channels();
        let (b, l) = (cfg.base_width, cfg.latent_channels);
        let mut ps = ParameterSet::new();
        let gain = 2f64.sqrt();
        init_conv(&mut ps, "enc.conv_in", c, b, 3, gain, rng);
        init_conv(&mut ps, "enc.down1", b, 2 * b, 3, gain, rng);
        init_conv(&mut ps, "enc.res1", 2 * b, 2 * b, 3, gain, rng);
        init_conv(&mut ps, "enc.down2", 2 * b, 4 * b, 3, gain, rng);
        init_conv(&mut ps, "enc.res2", 4 * b, 4 * b, 3, gain, rng);
        init_conv(&mut ps, "enc.out", 4 * b, 2 * l, 1, 1.0, rng);
        init_conv(&mut ps, "dec.conv_in", l, 4 * b, 3, gain, rng);
        init_conv(&mut ps, "dec.res1", 4 * b, 4 * b, 3, gain, rng);
        init_conv(&mut ps, "dec.up1", 4 * b, 2 * b, 3, gain, rng);
        init_conv(&mut ps, "dec.res2", 2 * b, 2 * b, 3, gain, rng);
        init_conv(&mut ps, "dec.up2", 2 * b, b, 3, gain, rng);
        init_conv(&mut ps, "dec.out", b, c, 3, 1.0, rng);
        ps.train_all();
        Self {
            domain,
            cfg,
            params: ps,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    pub fn encode(&self, u: &Tensor) -> Result<GaussianPosterior> {
        let (x, squeeze) = batched(u)?;
        let mut s = Scope::new().with_frozen(&self.params);
        let xv = s.constant(x);
        let (mu, h) = encoder_graph(&mut s, self.domain, xv)?;
        let sig = s.g.exp(h);
        let (mut mu, mut sigma) = (s.value(mu).clone(), s.value(sig).clone());
        if squeeze {
            let shape = mu.shape()[1..].to_vec();
            mu = mu.reshape(&shape)?;
            sigma = sigma.reshape(&shape)?;
        }
        Ok(GaussianPosterior { mu, sigma })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (x, squeeze) = batched(z)?;
        let mut s = Scope::new().with_frozen(&self.params);
        let zv = s.constant(x);
        let out = decoder_graph(&mut s, zv)?;
        let out = s.value(out).clone();
        if squeeze {
            let shape = out.shape()[1..].to_vec();
            out.reshape(&shape)
        } else {
            Ok(out)
        }
    }
}

/// Encoder inside a graph: `x: [N, C, Z, Y, X]` to `(mu, half_logvar)`.
pub fn encoder_graph(s: &mut Scope, domain: Domain, x: Var) -> Result<(Var, Var)> {
    let shape = s.value(x).shape().to_vec();
    if shape.len() != 5 || shape[1] != domain.channels() {
        return Err(Error::Shape(format!(
            "{} encoder expects {} channels, got shape {shape:?}",
            domain.as_str(),
            domain.channels()
        )));
    }
    if let Some(d) = shape[2..].iter().find(|&&d| d == 0 || d % DOWNSAMPLE != 0) {
        return Err(Error::Shape(format!("spatial size {d} not divisible by {DOWNSAMPLE}")));
    }
    let mut h = x;
    for (i, (name, stride)) in ENC_LAYERS.iter().enumerate() {
        let pad = if *name == "enc.out" { 0 } else { 1 };
        let y = s.conv(name, h, *stride, pad)?;
        h = if i + 1 == ENC_LAYERS.len() {
            y
        } else if name.contains(".res") {
            let y = s.g.silu(y);
            s.g.add(h, y)?
        } else {
            s.g.silu(y)
        };
    }
    let l = s.value(h).shape()[1] / 2;
    let mu = s.g.narrow(h, 0, l)?;
    let hv = s.g.narrow(h, l, l)?;
    let hv = s.g.clamp(hv, HALF_LOGVAR_RANGE.0, HALF_LOGVAR_RANGE.1);
    Ok((mu, hv))
}

/// Decoder inside a graph: `z: [N, L, z, y, x]` to `[N, C, 4z, 4y, 4x]`.
pub fn decoder_graph(s: &mut Scope, z: Var) -> Result<Var> {
    let mut h = s.conv("dec.conv_in", z, 1, 1)?;
    h = s.g.silu(h);
    let r = s.conv("dec.res1", h, 1, 1)?;
    let r = s.g.silu(r);
    h = s.g.add(h, r)?;
    h = s.g.upsample2(h)?;
    h = s.conv("dec.up1", h, 1, 1)?;
    h = s.g.silu(h);
    let r = s.conv("dec.res2", h, 1, 1)?;
    let r = s.g.silu(r);
    h = s.g.add(h, r)?;
    h = s.g.upsample2(h)?;
    h = s.conv("dec.up2", h, 1, 1)?;
    h = s.g.silu(h);
    s.conv("dec.out", h, 1, 1)
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)` drawn from `seed`.
pub fn reparameterize(p: &GaussianPosterior, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(p.mu.shape(), 1.0, &mut rng);
    let data = p
        .mu
        .data()
        .iter()
        .zip(p.sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(p.mu.shape(), data).expect("posterior shapes agree")
}

/// Mean over elements of `½(μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_term(p: &GaussianPosterior) -> f64 {
    let n = p.mu.numel().max(1) as f64;
    p.mu
        .data()
        .iter()
        .zip(p.sigma.data())
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum::<f64>()
        / n
}

/// KL term from the half-log-variance `h = ln σ` inside a graph.
pub fn kl_graph(s: &mut Scope, mu: Var, h: Var) -> Result<Var> {
    let m2 = s.g.square(mu);
    let h2 = s.g.scale(h, 2.0);
    let s2 = s.g.exp(h2);
    let a = s.g.add(m2, s2)?;
    let a = s.g.sub(a, h2)?;
    let a = s.g.add_scalar(a, -1.0);
    let m = s.g.mean(a);
    Ok(s.g.scale(m, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeLossWeights {
    pub kl: f64,
    pub edge: f64,
    pub adv: f64,
}

impl Default for AeLossWeights {
    fn default() -> Self {
        Self {
            kl: 1e-6,
            edge: 0.1,
            adv: 0.05,
        }
    }
}

impl AeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.kl, self.edge, self.adv].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Graph nodes of a composite autoencoder loss.
#[derive(Clone, Copy, Debug)]
pub struct AeLossVars {
    pub total: Var,
    pub l1: Var,
    pub kl: Var,
    pub edge: Var,
    pub adv: Option<Var>,
    pub recon: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeLoss {
    pub total: f64,
    pub l1: f64,
    pub kl: f64,
    pub edge: f64,
    pub adv: f64,
}

impl AeLossVars {
    pub fn values(&self, s: &Scope) -> AeLoss {
        let v = |x: Var| s.value(x).item();
        AeLoss {
            total: v(self.total),
            l1: v(self.l1),
            kl: v(self.kl),
            edge: v(self.edge),
            adv: self.adv.map(v).unwrap_or(0.0),
        }
    }
}

/// Mean absolute difference of Sobel gradient magnitudes.
pub fn edge_graph(s: &mut Scope, a: Var, b: Var) -> Result<Var> {
    let ma = s.g.sobel_magnitude(a)?;
    let mb = s.g.sobel_magnitude(b)?;
    s.g.l1(ma, mb)
}

/// `L1 + λ_KL KL + λ_edge edge + λ_adv g_adv` from a reconstruction and posterior.
/// `disc_fake` is the critic output on `recon`; pass `None` to omit the term.
pub fn compose_ae_loss(
    s: &mut Scope,
    u: Var,
    recon: Var,
    mu: Var,
    half_logvar: Var,
    disc_fake: Option<Var>,
    w: &AeLossWeights,
) -> Result<AeLossVars> {
    w.validate()?;
    let l1 = s.g.l1(recon, u)?;
    let kl = kl_graph(s, mu, half_logvar)?;
    let edge = edge_graph(s, recon, u)?;
    let mut total = l1;
    for (term, weight) in [(kl, w.kl), (edge, w.edge)] {
        if weight != 0.0 {
            let t = s.g.scale(term, weight);
            total = s.g.add(total, t)?;
        }
    }
    let adv = match disc_fake {
        Some(df) => {
            let g_loss = lsgan_generator(s, df);
            if w.adv != 0.0 {
                let t = s.g.scale(g_loss, w.adv);
                total = s.g.add(total, t)?;
            }
            Some(g_loss)
        }
        None => None,
    };
    Ok(AeLossVars {
        total,
        l1,
        kl,
        edge,
        adv,
        recon,
    })
}

pub fn init_discriminator<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> ParameterSet {
    let mut ps = ParameterSet::new();
    init_conv(&mut ps, "disc.c1", channels, 8, 3, 2f64.sqrt(), rng);
    init_conv(&mut ps, "disc.c2", 8, 16, 3, 2f64.sqrt(), rng);
    init_conv(&mut ps, "disc.c3", 16, 1, 3, 1.0, rng);
    ps.train_all();
    ps
}

/// Three-layer strided patch critic.
pub fn disc_graph(s: &mut Scope, x: Var) -> Result<Var> {
    let h = s.conv("disc.c1", x, 2, 1)?;
    let h = s.g.leaky_relu(h, 0.2);
    let h = s.conv("disc.c2", h, 2, 1)?;
    let h = s.g.leaky_relu(h, 0.2);
    s.conv("disc.c3", h, 1, 1)
}

/// `½ E[(D(fake) − 1)²]`.
pub fn lsgan_generator(s: &mut Scope, d_fake: Var) -> Var {
    let m = s.g.add_scalar(d_fake, -1.0);
    let sq = s.g.square(m);
    let mean = s.g.mean(sq);
    s.g.scale(mean, 0.5)
}

/// `½ E[(D(real) − 1)²] + ½ E[D(fake)²]`.
pub fn lsgan_discriminator(s: &mut Scope, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = lsgan_generator(s, d_real);
    let f = s.g.square(d_fake);
    let f = s.g.mean(f);
    let f = s.g.scale(f, 0.5);
    s.g.add(r, f)
}

/// `(d_loss, g_loss)` of the critic on batched `real` and `fake`.
pub fn discriminator_losses(disc: &ParameterSet, real: &Tensor, fake: &Tensor) -> Result<(f64, f64)> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let mut s = Scope::new().with_frozen(disc);
    let r = s.constant(batched(real)?.0);
    let f = s.constant(batched(fake)?.0);
    let dr = disc_graph(&mut s, r)?;
    let df = disc_graph(&mut s, f)?;
    let d = lsgan_discriminator(&mut s, dr, df)?;
    let g = lsgan_generator(&mut s, df);
    Ok((s.value(d).item(), s.value(g).item()))
}

/// Full composite loss for `u` (`[C, Z, Y, X]` or batched) using the
/// posterior sample drawn from `seed`.
pub fn ae_loss(ae: &AEPair, u: &Tensor, w: &AeLossWeights, disc: Option<&ParameterSet>, seed: u64) -> Result<AeLoss> {
    let empty = ParameterSet::new();
    let mut s = Scope::new().with_frozen(&ae.params).with_frozen(disc.unwrap_or(&empty));
    let x = s.constant(batched(u)?.0);
    let vars = ae_forward_loss(&mut s, ae.domain, x, w, disc.is_some(), seed)?;
    Ok(vars.values(&s))
}

/// Encode, sample, decode and score `x` inside a graph.
pub fn ae_forward_loss(s: &mut Scope, domain: Domain, x: Var, w: &AeLossWeights, with_disc: bool, seed: u64) -> Result<AeLossVars> {
    let (mu, h) = encoder_graph(s, domain, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = s.constant(Tensor::randn(s.value(mu).shape(), 1.0, &mut rng));
    let sigma = s.g.exp(h);
    let noise = s.g.mul(sigma, eps)?;
    let z = s.g.add(mu, noise)?;
    let recon = decoder_graph(s, z)?;
    let fake = if with_disc { Some(disc_graph(s, recon)?) } else { None };
    compose_ae_loss(s, x, recon, mu, h, fake, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Edge length of the random training crops (multiple of 4).
    pub crop: usize,
    pub lr: f64,
    pub weights: AeLossWeights,
    /// Fraction of steps before the adversarial term switches on.
    pub adv_warmup: f64,
    pub use_adversarial: bool,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 4,
            crop: 16,
            lr: 1e-4,
            weights: AeLossWeights::default(),
            adv_warmup: 0.25,
            use_adversarial: true,
            seed: 0,
        }
    }
}

/// Random `size³` crop of a `[C, Z, Y, X]` tensor, as `[1, C, s, s, s]`.
pub fn random_crop<R: Rng + ?Sized>(t: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[1..].iter().any(|&d| d < size) {
        return Err(Error::Shape(format!("cannot crop {size}³ from {s:?}")));
    }
    let o: Vec<usize> = s[1..].iter().map(|&d| rng.random_range(0..=d - size)).collect();
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

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeStepLog {
    pub step: usize,
    pub loss: AeLoss,
    pub d_loss: f64,
}

/// Train `ae` (and its critic) on `[C, Z, Y, X]` samples.
pub fn train_ae(ae: &mut AEPair, disc: &mut ParameterSet, data: &[Tensor], cfg: &AeTrainConfig) -> Result<Vec<AeStepLog>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    if cfg.crop % DOWNSAMPLE != 0 {
        return Err(Error::InvalidArgument(format!("crop {} not divisible by {DOWNSAMPLE}", cfg.crop)));
    }
    ae.params.train_all();
    disc.train_all();
    let adam = crate::params::AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut opt_g = Adam::new(adam);
    let mut opt_d = Adam::new(adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let warm = (cfg.adv_warmup * cfg.steps as f64).ceil() as usize;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Tensor> = (0..cfg.batch)
            .map(|_| random_crop(&data[rng.random_range(0..data.len())], cfg.crop, &mut rng))
            .collect::<Result<_>>()?;
        let x = Tensor::stack_batch(&batch)?;
        let adv_on = cfg.use_adversarial && step >= warm;
        let noise_seed = rng.random::<u64>();

        let (grads, loss, recon) = {
            let mut s = Scope::new().with(&ae.params).with_frozen(disc);
            let xv = s.constant(x.clone());
            let vars = ae_forward_loss(&mut s, ae.domain, xv, &cfg.weights, adv_on, noise_seed)?;
            let loss = vars.values(&s);
            let recon = adv_on.then(|| s.value(vars.recon).clone());
            (s.grads(vars.total)?, loss, recon)
        };
        opt_g.step(&mut ae.params, &grads)?;

        let mut d_loss = 0.0;
        if let Some(fake) = recon {
            let mut s = Scope::new().with(disc);
            let r = s.constant(x);
            let f = s.constant(fake);
            let dr = disc_graph(&mut s, r)?;
            let df = disc_graph(&mut s, f)?;
            let dl = lsgan_discriminator(&mut s, dr, df)?;
            d_loss = s.value(dl).item();
            let g = s.grads(dl)?;
            opt_d.step(disc, &g)?;
        }
        logs.push(AeStepLog { step, loss, d_loss });
    }
    Ok(logs)
}

/// Alignment fine-tune of the conditioning autoencoder against a frozen PSR encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLoss {
    pub total: f64,
    pub align: f64,
    pub recon: f64,
}

pub const ALIGN_RECON_WEIGHT: f64 = 0.1;

/// One step of `mean(μ_cond − μ_psr)² + 0.1 L1(D_cond(μ_cond), x_c)`.
/// Only `e_cond` tensors change.
pub fn align_finetune_step(e_cond: &mut AEPair, opt: &mut Adam, e_psr: &AEPair, x_c: &Tensor, y: &Tensor) -> Result<AlignLoss> {
    if e_psr.params.trainable_count() > 0 {
        return Err(Error::InvalidArgument(
            "PSR autoencoder must be frozen during alignment".into(),
        ));
    }
    if e_cond.domain != Domain::Cond || e_psr.domain != Domain::Psr {
        return Err(Error::InvalidArgument("alignment needs a cond and a psr autoencoder".into()));
    }
    let target = e_psr.encode(y)?.mu;
    let target = batched(&target)?.0;
    let (grads, loss) = {
        let mut s = Scope::new().with(&e_cond.params);
        let x = s.constant(batched(x_c)?.0);
        let t = s.constant(target);
        let (mu, _) = encoder_graph(&mut s, Domain::Cond, x)?;
        let align = s.g.mse(mu, t)?;
        let recon = decoder_graph(&mut s, mu)?;
        let rl = s.g.l1(recon, x)?;
        let w = s.g.scale(rl, ALIGN_RECON_WEIGHT);
        let total = s.g.add(align, w)?;
        let loss = AlignLoss {
            total: s.value(total).item(),
            align: s.value(align).item(),
            recon: s.value(rl).item(),
        };
        (s.grads(total)?, loss)
    };
    opt.step(&mut e_cond.params, &grads)?;
    Ok(loss)
}

/// `[1, 2, Z, Y, X]` stacking of two single-channel volumes given as `[1, 1, Z, Y, X]`.
pub fn stack_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("no channels".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != s.as_slice() || s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(Error::Shape(format!("channel part {:?} vs {s:?}", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[1, parts.len(), s[2], s[3], s[4]], data)
}
