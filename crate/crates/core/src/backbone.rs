//! 3D UNet denoiser with sinusoidal timestep embedding and self-attention.
//!
//! Parameter names are rooted at a prefix (`unet` for the backbone,
//! `control.copy` for the ControlNet copy). Layout per level `i`:
//! `enc{i}.res`, optional `enc{i}.attn`, `down{i}`; then `mid.res1`,
//! `mid.attn`, `mid.res2`; then `dec{i}.res`, optional `dec{i}.attn`,
//! `up{i}`; finally `out.norm`, `out.conv`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_group_norm, init_linear, Scope};
use crate::params::ParameterSet;

pub const BACKBONE_PREFIX: &str = "unet";
pub const TIME_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub levels: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub num_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            levels: vec![32, 64, 64],
            attention_levels: vec![1, 2],
            time_embed_dim: 128,
            num_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels.len() < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels.len()));
        }
        if let Some(a) = self.attention_levels.iter().find(|&&a| a >= self.levels.len()) {
            return bad(format!("attention level {a} out of range"));
        }
        if self.num_groups == 0 || self.levels.iter().any(|c| c % self.num_groups != 0) {
            return bad(format!("widths {:?} not divisible by {} groups", self.levels, self.num_groups));
        }
        if self.in_channels == 0 || self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("in_channels must be positive and time_embed_dim even".into());
        }
        Ok(())
    }

    pub fn depth_factor(&self) -> usize {
        1 << (self.levels.len() - 1)
    }

    fn has_attn(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// `(site, width)` for every self-attention block, e.g. `("enc1.attn", 64)`.
    pub fn attention_sites(&self) -> Vec<(String, usize)> {
        let n = self.levels.len();
        let mut out = Vec::new();
        for i in 0..n {
            if self.has_attn(i) {
                out.push((format!("enc{i}.attn"), self.levels[i]));
            }
        }
        out.push(("mid.attn".to_string(), self.levels[n - 1]));
        for i in (0..n).rev() {
            if self.has_attn(i) {
                out.push((format!("dec{i}.attn"), self.levels[i]));
            }
        }
        out
    }

    /// Channel widths of the residuals a ControlNet injects: one per level, then mid.
    pub fn residual_channels(&self) -> Vec<usize> {
        let mut c = self.levels.clone();
        c.push(*self.levels.last().unwrap());
        c
    }

    /// Spatial dims of each residual for a latent of dims `[z, y, x]`.
    pub fn residual_dims(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let mut out: Vec<[usize; 3]> = (0..self.levels.len())
            .map(|i| dims.map(|d| d >> i))
            .collect();
        out.push(*out.last().unwrap());
        out
    }

    /// Check a `[N, C, Z, Y, X]` input; errors name the offending axis.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::Shape(format!("expected [N, C, Z, Y, X], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "channel axis: expected {} channels, got {}",
                self.in_channels, shape[1]
            )));
        }
        let f = self.depth_factor();
        for (axis, name) in [(2, "z"), (3, "y"), (4, "x")] {
            if shape[axis] == 0 || shape[axis] % f != 0 {
                return Err(Error::Shape(format!(
                    "{name} axis: size {} not divisible by {f}",
                    shape[axis]
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})]`
/// with `w_j = 10000^(-j/h)`, `h = dim/2`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|j| TIME_BASE.powf(-(j as f64) / half as f64)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

fn init_res<R: Rng + ?Sized>(ps: &mut ParameterSet, name: &str, cin: usize, cout: usize, temb: usize, rng: &mut R) {
    init_group_norm(ps, &format!("{name}.norm1"), cin);
    init_conv(ps, &format!("{name}.conv1"), cin, cout, 3, 1.0, rng);
    init_linear(ps, &format!("{name}.temb"), temb, cout, true, rng);
    init_group_norm(ps, &format!("{name}.norm2"), cout);
    init_conv(ps, &format!("{name}.conv2"), cout, cout, 3, 1.0, rng);
    if cin != cout {
        init_conv(ps, &format!("{name}.skip"), cin, cout, 1, 1.0, rng);
    }
}

fn init_attn<R: Rng + ?Sized>(ps: &mut ParameterSet, name: &str, c: usize, rng: &mut R) {
    init_group_norm(ps, &format!("{name}.norm"), c);
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.{p}"), c, c, p == "o", rng);
    }
}

/// Parameters of the encoder half (time MLP, input conv, encoder levels, mid).
fn init_encoder<R: Rng + ?Sized>(ps: &mut ParameterSet, cfg: &UNetConfig, prefix: &str, rng: &mut R) {
    let e = cfg.time_embed_dim;
    init_linear(ps, &format!("{prefix}.time.l1"), e, e, true, rng);
    init_linear(ps, &format!("{prefix}.time.l2"), e, e, true, rng);
    init_conv(ps, &format!("{prefix}.conv_in"), cfg.in_channels, cfg.levels[0], 3, 1.0, rng);
    let n = cfg.levels.len();
    for i in 0..n {
        let cin = if i == 0 { cfg.levels[0] } else { cfg.levels[i - 1] };
        init_res(ps, &format!("{prefix}.enc{i}.res"), cin, cfg.levels[i], e, rng);
        if cfg.has_attn(i) {
            init_attn(ps, &format!("{prefix}.enc{i}.attn"), cfg.levels[i], rng);
        }
        if i + 1 < n {
            init_conv(ps, &format!("{prefix}.down{i}"), cfg.levels[i], cfg.levels[i], 3, 1.0, rng);
        }
    }
    let c = cfg.levels[n - 1];
    init_res(ps, &format!("{prefix}.mid.res1"), c, c, e, rng);
    init_attn(ps, &format!("{prefix}.mid.attn"), c, rng);
    init_res(ps, &format!("{prefix}.mid.res2"), c, c, e, rng);
}

/// Freshly initialized backbone parameters, all trainable.
pub fn init_unet<R: Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let p = BACKBONE_PREFIX;
    let mut ps = ParameterSet::new();
    init_encoder(&mut ps, cfg, p, rng);
    let n = cfg.levels.len();
    let e = cfg.time_embed_dim;
    for i in (0..n).rev() {
        let below = if i + 1 == n { cfg.levels[n - 1] } else { cfg.levels[i + 1] };
        init_res(&mut ps, &format!("{p}.dec{i}.res"), below + cfg.levels[i], cfg.levels[i], e, rng);
        if cfg.has_attn(i) {
            init_attn(&mut ps, &format!("{p}.dec{i}.attn"), cfg.levels[i], rng);
        }
        if i > 0 {
            init_conv(&mut ps, &format!("{p}.up{i}"), cfg.levels[i], cfg.levels[i], 3, 1.0, rng);
        }
    }
    init_group_norm(&mut ps, &format!("{p}.out.norm"), cfg.levels[0]);
    init_conv(&mut ps, &format!("{p}.out.conv"), cfg.levels[0], cfg.in_channels, 3, 1.0, rng);
    ps.train_all();
    Ok(ps)
}

/// Copy selected by glob `patterns` as trainable; zero matches is an error.
pub fn partition_params(params: &ParameterSet, patterns: &[&str]) -> Result<ParameterSet> {
    params.partition(patterns)
}

/// Conditioning inputs already lowered into the graph.
#[derive(Clone, Debug, Default)]
pub struct CondVars {
    /// `[N, S, d]` semantic tokens for cross-attention.
    pub tokens: Option<Var>,
    /// One residual per level skip, then one for the mid output.
    pub residuals: Option<Vec<Var>>,
    /// LoRA scale numerator α; the rank comes from the factor shapes.
    pub lora_alpha: Option<f64>,
}

/// Adapter lookups in effect for a forward pass.
struct Adapters<'c> {
    cond: Option<&'c CondVars>,
}

impl Adapters<'_> {
    fn tokens(&self) -> Option<Var> {
        self.cond.and_then(|c| c.tokens)
    }

    fn lora_alpha(&self) -> Option<f64> {
        self.cond.and_then(|c| c.lora_alpha)
    }
}

/// `[N, E]` time embedding after the MLP.
pub(crate) fn time_mlp(s: &mut Scope, prefix: &str, t: &[f64], dim: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        data.extend(time_embed(ti, dim)?);
    }
    let x = s.constant(Tensor::new(&[t.len(), dim], data)?);
    let h = s.linear(&format!("{prefix}.time.l1"), x)?;
    let h = s.g.silu(h);
    s.linear(&format!("{prefix}.time.l2"), h)
}

fn res_block(s: &mut Scope, name: &str, x: Var, temb: Var, groups: usize) -> Result<Var> {
    let h = s.group_norm(&format!("{name}.norm1"), x, groups)?;
    let h = s.g.silu(h);
    let h = s.conv(&format!("{name}.conv1"), h, 1, 1)?;
    let te = s.g.silu(temb);
    let te = s.linear(&format!("{name}.temb"), te)?;
    let h = s.g.add_channel(h, te)?;
    let h = s.group_norm(&format!("{name}.norm2"), h, groups)?;
    let h = s.g.silu(h);
    let h = s.conv(&format!("{name}.conv2"), h, 1, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = if s.has(&format!("{skip_name}.w")) {
        s.conv(&skip_name, x, 1, 0)?
    } else {
        x
    };
    s.g.add(skip, h)
}

/// Linear projection with an optional low-rank update `(α/r) (x Aᵀ) Bᵀ`.
pub(crate) fn lora_linear(s: &mut Scope, name: &str, lora_name: &str, x: Var, alpha: Option<f64>) -> Result<Var> {
    let y = s.linear(name, x)?;
    let Some(alpha) = alpha else { return Ok(y) };
    let (a_name, b_name) = (format!("{lora_name}.a"), format!("{lora_name}.b"));
    if !s.has(&a_name) {
        return Ok(y);
    }
    let a = s.p(&a_name)?;
    let b = s.p(&b_name)?;
    let r = s.value(a).shape()[0];
    let xa = s.g.linear(x, a, None)?;
    let xab = s.g.linear(xa, b, None)?;
    let upd = s.g.scale(xab, alpha / r as f64);
    s.g.add(y, upd)
}

/// Single-head dot-product attention of `q: [N, M, c]` over `k, v: [N, S, c]`.
pub(crate) fn attend(s: &mut Scope, q: Var, k: Var, v: Var) -> Result<Var> {
    let c = *s.value(q).shape().last().unwrap();
    let logits = s.g.bmm(q, k, true)?;
    let logits = s.g.scale(logits, 1.0 / (c as f64).sqrt());
    let w = s.g.softmax(logits)?;
    s.g.bmm(w, v, false)
}

fn self_attn(s: &mut Scope, prefix: &str, site: &str, x: Var, groups: usize, ad: &Adapters) -> Result<Var> {
    let name = format!("{prefix}.{site}");
    let shape = s.value(x).shape().to_vec();
    let dims = [shape[2], shape[3], shape[4]];
    let h = s.group_norm(&format!("{name}.norm"), x, groups)?;
    let h = s.g.to_tokens(h)?;
    let alpha = if prefix == BACKBONE_PREFIX { ad.lora_alpha() } else { None };
    let proj = |s: &mut Scope, p: &str, input: Var| lora_linear(s, &format!("{name}.{p}"), &format!("lora.{site}.{p}"), input, alpha);
    let q = proj(s, "q", h)?;
    let k = proj(s, "k", h)?;
    let v = proj(s, "v", h)?;
    let a = attend(s, q, k, v)?;
    let o = proj(s, "o", a)?;
    let o = s.g.from_tokens(o, dims)?;
    let mut out = s.g.add(x, o)?;
    if prefix == BACKBONE_PREFIX {
        if let Some(tokens) = ad.tokens() {
            out = crate::conditioning::cross_attend_graph(s, &format!("semantic.{site}.xattn"), out, tokens)?;
        }
    }
    Ok(out)
}

/// Encoder half shared by the backbone and its ControlNet copy.
pub(crate) struct EncoderOut {
    pub skips: Vec<Var>,
    pub mid: Var,
}

fn run_encoder(s: &mut Scope, cfg: &UNetConfig, prefix: &str, x: Var, temb: Var, ad: &Adapters) -> Result<EncoderOut> {
    let g = cfg.num_groups;
    let n = cfg.levels.len();
    let mut h = s.conv(&format!("{prefix}.conv_in"), x, 1, 1)?;
    let mut skips = Vec::with_capacity(n);
    for i in 0..n {
        h = res_block(s, &format!("{prefix}.enc{i}.res"), h, temb, g)?;
        if cfg.has_attn(i) {
            h = self_attn(s, prefix, &format!("enc{i}.attn"), h, g, ad)?;
        }
        skips.push(h);
        if i + 1 < n {
            h = s.conv(&format!("{prefix}.down{i}"), h, 2, 1)?;
        }
    }
    h = res_block(s, &format!("{prefix}.mid.res1"), h, temb, g)?;
    h = self_attn(s, prefix, "mid.attn", h, g, ad)?;
    h = res_block(s, &format!("{prefix}.mid.res2"), h, temb, g)?;
    Ok(EncoderOut { skips, mid: h })
}

/// Encoder pass for a parameter prefix without adapters (ControlNet copy).
pub(crate) fn encoder_graph(s: &mut Scope, cfg: &UNetConfig, prefix: &str, x: Var, temb: Var) -> Result<EncoderOut> {
    run_encoder(s, cfg, prefix, x, temb, &Adapters { cond: None })
}

/// Backbone forward inside a graph: `z_t: [N, L, Z, Y, X]`, one timestep per sample.
pub fn unet_graph(s: &mut Scope, cfg: &UNetConfig, z_t: Var, t: &[f64], cond: Option<&CondVars>) -> Result<Var> {
    let shape = s.value(z_t).shape().to_vec();
    cfg.check_input(&shape)?;
    if t.len() != shape[0] {
        return Err(Error::Shape(format!("{} timesteps for batch {}", t.len(), shape[0])));
    }
    let p = BACKBONE_PREFIX;
    let ad = Adapters { cond };
    let g = cfg.num_groups;
    let n = cfg.levels.len();
    let temb = time_mlp(s, p, t, cfg.time_embed_dim)?;
    let EncoderOut { mut skips, mut mid } = run_encoder(s, cfg, p, z_t, temb, &ad)?;
    if let Some(res) = cond.and_then(|c| c.residuals.as_ref()) {
        if res.len() != n + 1 {
            return Err(Error::Shape(format!("{} control residuals for {} scales", res.len(), n + 1)));
        }
        for (i, r) in res[..n].iter().enumerate() {
            if s.value(*r).shape() != s.value(skips[i]).shape() {
                return Err(Error::Shape(format!(
                    "control residual {i}: {:?} vs skip {:?}",
                    s.value(*r).shape(),
                    s.value(skips[i]).shape()
                )));
            }
            skips[i] = s.g.add(skips[i], *r)?;
        }
        mid = s.g.add(mid, res[n])?;
    }
    let mut h = mid;
    for i in (0..n).rev() {
        h = s.g.concat(h, skips[i])?;
        h = res_block(s, &format!("{p}.dec{i}.res"), h, temb, g)?;
        if cfg.has_attn(i) {
            h = self_attn(s, p, &format!("dec{i}.attn"), h, g, &ad)?;
        }
        if i > 0 {
            h = s.g.upsample2(h)?;
            h = s.conv(&format!("{p}.up{i}"), h, 1, 1)?;
        }
    }
    h = s.group_norm(&format!("{p}.out.norm"), h, g)?;
    h = s.g.silu(h);
    s.conv(&format!("{p}.out.conv"), h, 1, 1)
}

/// Add a leading batch axis to a single `[C, Z, Y, X]` latent.
pub(crate) fn batched(z: &Tensor) -> Result<(Tensor, bool)> {
    match z.shape().len() {
        4 => {
            let mut s = vec![1];
            s.extend_from_slice(z.shape());
            Ok((z.clone().reshape(&s)?, true))
        }
        5 => Ok((z.clone(), false)),
        _ => Err(Error::Shape(format!("latent must be 4D or 5D, got {:?}", z.shape()))),
    }
}

/// Predicted noise for `z_t` (`[C, Z, Y, X]` or `[N, C, Z, Y, X]`) at timestep `t`.
pub fn unet_forward(
    params: &ParameterSet,
    cfg: &UNetConfig,
    z_t: &Tensor,
    t: f64,
    cond: Option<&ConditioningBundle>,
) -> Result<Tensor> {
    let (z, squeeze) = batched(z_t)?;
    let n = z.shape()[0];
    let adapters = cond.map(|c| c.adapter_params()).transpose()?;
    let mut s = Scope::new().with_frozen(params);
    if let Some(a) = &adapters {
        s = s.with_frozen(a);
    }
    let x = s.constant(z);
    let cv = match cond {
        Some(c) => Some(c.lower(&mut s, n)?),
        None => None,
    };
    let out = unet_graph(&mut s, cfg, x, &vec![t; n], cv.as_ref())?;
    let out = s.value(out).clone();
    if squeeze {
        out.reshape(&z_t.shape().to_vec())
    } else {
        Ok(out)
    }
}

/// Names of the backbone encoder half (copied by the ControlNet).
pub(crate) fn is_encoder_param(name: &str) -> bool {
    let rest = name.strip_prefix("unet.").unwrap_or("");
    ["time.", "conv_in.", "enc", "down", "mid."].iter().any(|p| rest.starts_with(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            levels: vec![4, 8],
            attention_levels: vec![1],
            time_embed_dim: 8,
            num_groups: 2,
        }
    }

    #[test]
    fn time_embed_closed_forms() {
        let e = time_embed(0.0, 6).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let e = time_embed(100.0, 4).unwrap();
        let w1 = 10_000f64.powf(-0.5);
        let want = [100f64.sin(), (100.0 * w1).sin(), 100f64.cos(), (100.0 * w1).cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        for t in [1.0, 37.0, 999.0] {
            assert!(time_embed(t, 128).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(time_embed(3.0, 5).is_err());
    }

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let cfg = UNetConfig {
            in_channels: 8,
            levels: vec![8, 16, 16],
            attention_levels: vec![1, 2],
            time_embed_dim: 16,
            num_groups: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = init_unet(&cfg, &mut rng).unwrap();
        let z = Tensor::randn(&[8, 8, 8, 8], 1.0, &mut rng);
        let a = unet_forward(&ps, &cfg, &z, 17.0, None).unwrap();
        let b = unet_forward(&ps, &cfg, &z, 17.0, None).unwrap();
        assert_eq!(a.shape(), &[8, 8, 8, 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let cfg = tiny();
        let ps = init_unet(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = unet_forward(&ps, &cfg, &Tensor::zeros(&[2, 4, 4, 3]), 1.0, None).unwrap_err();
        assert!(err.to_string().contains("x axis"), "{err}");
        let err = unet_forward(&ps, &cfg, &Tensor::zeros(&[3, 4, 4, 4]), 1.0, None).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.levels = vec![4];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.attention_levels = vec![2];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.levels = vec![4, 6];
        c.num_groups = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partition_of_missing_pattern_fails() {
        let ps = init_unet(&tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(partition_params(&ps, &["lora.*"]).is_err());
        let enc = partition_params(&ps, &["unet.enc*"]).unwrap();
        assert!(enc.trainable_names().all(|n| n.starts_with("unet.enc")));
    }

    /// Gradient of ‖ε̂‖² w.r.t. every backbone tensor on a 4³ latent.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ps = init_unet(&cfg, &mut rng).unwrap();
        let z = Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
        let results = check_param_gradients(&ps, &[], 1e-5, 6, |s| {
            let x = s.constant(z.clone());
            let out = unet_graph(s, &cfg, x, &[7.0], None)?;
            let sq = s.g.square(out);
            Ok(s.g.sum(sq))
        })
        .unwrap();
        assert_eq!(results.len(), ps.len());
        for (name, err) in results {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
