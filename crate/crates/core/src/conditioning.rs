//! Conditioning streams injected into the frozen backbone: semantic
//! cross-attention tokens, a zero-gated ControlNet copy of the encoder, and
//! LoRA factors on the self-attention projections.
//!
//! Adapter parameter names: `semantic.proj`, `semantic.{site}.xattn.{q,k,v,o}`,
//! `control.gate_in`, `control.copy.*`, `control.gate_out.{i}`,
//! `control.gate_mid`, `lora.{site}.{q,k,v,o}.{a,b}`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::backbone::{batched, encoder_graph, is_encoder_param, time_mlp, unet_graph, CondVars, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_zero_conv, Scope};
use crate::params::ParameterSet;

pub const PE_BASE: f64 = 10_000.0;
const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Streams {
    pub semantic: bool,
    pub control: bool,
    pub lora: bool,
}

impl Default for Streams {
    fn default() -> Self {
        Self::ALL
    }
}

impl Streams {
    pub const ALL: Streams = Streams {
        semantic: true,
        control: true,
        lora: true,
    };
    pub const NONE: Streams = Streams {
        semantic: false,
        control: false,
        lora: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.semantic {
            parts.push("semantic");
        }
        if self.control {
            parts.push("controlnet");
        }
        if self.lora {
            parts.push("lora");
        }
        if parts.is_empty() {
            "unconditional".into()
        } else {
            parts.join("+")
        }
    }

    /// Glob patterns selecting the adapter tensors of the enabled streams.
    pub fn patterns(&self) -> Vec<&'static str> {
        let mut p = Vec::new();
        if self.semantic {
            p.push("semantic.*");
        }
        if self.control {
            p.push("control.*");
        }
        if self.lora {
            p.push("lora.*");
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub streams: Streams,
    /// Token width `d`; must be divisible by 6.
    pub token_dim: usize,
    /// Pooled token grid `[z, y, x]`.
    pub pooled: [usize; 3],
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            streams: Streams::ALL,
            token_dim: 66,
            pooled: [4, 4, 4],
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTokens {
    /// `[N, S, d]` with `S = product(pooled)`.
    pub tokens: Tensor,
    pub pooled: [usize; 3],
}

impl SemanticTokens {
    pub fn count(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Low-rank update `(alpha / r) B A` for an `o x i` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactor {
    /// `[r, i]`
    pub a: Tensor,
    /// `[o, r]`
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraFactor {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }
}

/// `W + (alpha / r) B A`; `w` is left untouched.
pub fn lora_effective(w: &Tensor, f: &LoraFactor) -> Result<Tensor> {
    let (ws, a, b) = (w.shape(), f.a.shape(), f.b.shape());
    if ws.len() != 2 || a.len() != 2 || b.len() != 2 || a[1] != ws[1] || b[0] != ws[0] || b[1] != a[0] {
        return Err(Error::Shape(format!("lora: W {ws:?}, A {a:?}, B {b:?}")));
    }
    let (o, i, r) = (ws[0], ws[1], a[0]);
    let scale = f.alpha / r as f64;
    let mut out = w.clone();
    crate::autograd::gemm(
        o,
        r,
        i,
        scale,
        f.b.data(),
        (r as isize, 1),
        f.a.data(),
        (i as isize, 1),
        1.0,
        out.data_mut(),
        (i as isize, 1),
    );
    Ok(out)
}

/// Fixed `[S, d]` encoding of the pooled grid coordinates. Each axis owns a
/// `d/3` band of interleaved `sin, cos` pairs; bands are ordered x, y, z.
pub fn positional_encoding(pooled: [usize; 3], d: usize) -> Result<Tensor> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::InvalidArgument(format!("token width {d} must be divisible by 6")));
    }
    let band = d / 3;
    let pairs = band / 2;
    let [pz, py, px] = pooled;
    let s = pz * py * px;
    let mut data = Vec::with_capacity(s * d);
    for idx in 0..s {
        let coord = [idx % px, (idx / px) % py, idx / (px * py)];
        for &c in &coord {
            for j in 0..pairs {
                let w = PE_BASE.powf(-(j as f64) / pairs as f64);
                data.push((c as f64 * w).sin());
                data.push((c as f64 * w).cos());
            }
        }
    }
    Tensor::new(&[s, d], data)
}

fn pool_kernel(dims: &[usize], pooled: [usize; 3]) -> Result<[usize; 3]> {
    let mut k = [0; 3];
    for a in 0..3 {
        if pooled[a] == 0 || dims[a] % pooled[a] != 0 {
            return Err(Error::Shape(format!("pooled grid {pooled:?} does not divide latent dims {dims:?}")));
        }
        k[a] = dims[a] / pooled[a];
    }
    Ok(k)
}

/// `z_c: [N, L, Z, Y, X]` to tokens `[N, S, d]` inside a graph.
pub fn semantic_tokens_graph(s: &mut Scope, z_c: Var, d: usize, pooled: [usize; 3]) -> Result<Var> {
    let pe = positional_encoding(pooled, d)?;
    let shape = s.value(z_c).shape().to_vec();
    let k = pool_kernel(&shape[2..], pooled)?;
    let h = s.conv("semantic.proj", z_c, 1, 0)?;
    let h = s.g.avg_pool(h, k)?;
    let h = s.g.to_tokens(h)?;
    let n = shape[0];
    let mut rep = Vec::with_capacity(n * pe.numel());
    for _ in 0..n {
        rep.extend_from_slice(pe.data());
    }
    let pe = s.constant(Tensor::new(&[n, pe.shape()[0], d], rep)?);
    s.g.add(h, pe)
}

/// `H + O(softmax(Q Kᵀ / sqrt(c)) V)` on token layouts `h: [N, M, c]`, `tokens: [N, S, d]`.
pub fn cross_attend_tokens(s: &mut Scope, name: &str, h: Var, tokens: Var) -> Result<(Var, Var)> {
    let q = s.linear(&format!("{name}.q"), h)?;
    let k = s.linear(&format!("{name}.k"), tokens)?;
    let v = s.linear(&format!("{name}.v"), tokens)?;
    let c = *s.value(q).shape().last().unwrap();
    let logits = s.g.bmm(q, k, true)?;
    let logits = s.g.scale(logits, 1.0 / (c as f64).sqrt());
    let w = s.g.softmax(logits)?;
    let a = s.g.bmm(w, v, false)?;
    let o = s.linear(&format!("{name}.o"), a)?;
    Ok((s.g.add(h, o)?, w))
}

/// Cross-attention on a spatial feature map `h: [N, C, Z, Y, X]`.
pub(crate) fn cross_attend_graph(s: &mut Scope, name: &str, h: Var, tokens: Var) -> Result<Var> {
    let shape = s.value(h).shape().to_vec();
    let ht = s.g.to_tokens(h)?;
    let (out, _) = cross_attend_tokens(s, name, ht, tokens)?;
    s.g.from_tokens(out, [shape[2], shape[3], shape[4]])
}

/// ControlNet residuals (one per level skip, then mid) inside a graph.
pub fn control_graph(s: &mut Scope, cfg: &UNetConfig, z_c: Var, z_t: Var, t: &[f64]) -> Result<Vec<Var>> {
    let zs = s.value(z_t).shape().to_vec();
    let cs = s.value(z_c).shape().to_vec();
    if zs != cs {
        return Err(Error::Shape(format!("control input z_c {cs:?} vs z_t {zs:?}")));
    }
    cfg.check_input(&zs)?;
    let gated = s.conv("control.gate_in", z_c, 1, 0)?;
    let x = s.g.add(z_t, gated)?;
    let temb = time_mlp(s, "control.copy", t, cfg.time_embed_dim)?;
    let enc = encoder_graph(s, cfg, "control.copy", x, temb)?;
    let mut out = Vec::with_capacity(enc.skips.len() + 1);
    for (i, skip) in enc.skips.iter().enumerate() {
        out.push(s.conv(&format!("control.gate_out.{i}"), *skip, 1, 0)?);
    }
    out.push(s.conv("control.gate_mid", enc.mid, 1, 0)?);
    Ok(out)
}

/// Lower the enabled streams for `z_c` into graph conditioning inputs.
pub fn cond_graph(s: &mut Scope, cfg: &UNetConfig, acfg: &AdapterConfig, z_c: Var, z_t: Var, t: &[f64]) -> Result<CondVars> {
    let st = acfg.streams;
    Ok(CondVars {
        tokens: if st.semantic {
            Some(semantic_tokens_graph(s, z_c, acfg.token_dim, acfg.pooled)?)
        } else {
            None
        },
        residuals: if st.control {
            Some(control_graph(s, cfg, z_c, z_t, t)?)
        } else {
            None
        },
        lora_alpha: st.lora.then_some(acfg.lora_alpha),
    })
}

/// Conditioned denoiser prediction inside a graph.
pub fn conditioned_graph(
    s: &mut Scope,
    cfg: &UNetConfig,
    acfg: &AdapterConfig,
    z_t: Var,
    t: &[f64],
    z_c: Option<Var>,
) -> Result<Var> {
    match z_c {
        Some(zc) if acfg.streams != Streams::NONE => {
            let cv = cond_graph(s, cfg, acfg, zc, z_t, t)?;
            unet_graph(s, cfg, z_t, t, Some(&cv))
        }
        _ => unet_graph(s, cfg, z_t, t, None),
    }
}

/// Zero-initialized adapters for the enabled streams, all trainable.
/// The ControlNet copy is cloned from `backbone`'s encoder half.
pub fn init_adapters<R: Rng + ?Sized>(
    backbone: &ParameterSet,
    cfg: &UNetConfig,
    acfg: &AdapterConfig,
    rng: &mut R,
) -> Result<ParameterSet> {
    cfg.validate()?;
    let l = cfg.in_channels;
    let d = acfg.token_dim;
    let mut ps = ParameterSet::new();
    if acfg.streams.semantic {
        positional_encoding(acfg.pooled, d)?;
        init_conv(&mut ps, "semantic.proj", l, d, 1, 1.0, rng);
        for (site, c) in cfg.attention_sites() {
            let name = format!("semantic.{site}.xattn");
            ps.init_normal(&format!("{name}.q.w"), &[c, c], 1.0 / (c as f64).sqrt(), rng);
            ps.init_normal(&format!("{name}.k.w"), &[c, d], 1.0 / (d as f64).sqrt(), rng);
            ps.init_normal(&format!("{name}.v.w"), &[c, d], 1.0 / (d as f64).sqrt(), rng);
            ps.init_const(&format!("{name}.o.w"), &[c, c], 0.0);
            ps.init_const(&format!("{name}.o.b"), &[c], 0.0);
        }
    }
    if acfg.streams.control {
        init_zero_conv(&mut ps, "control.gate_in", l, l);
        for (name, t) in backbone.iter().filter(|(n, _)| is_encoder_param(n)) {
            let rest = name.strip_prefix("unet.").unwrap();
            ps.insert(format!("control.copy.{rest}"), t.clone());
        }
        if !ps.names().any(|n| n.starts_with("control.copy.")) {
            return Err(Error::MissingComponent("backbone encoder parameters".into()));
        }
        for (i, c) in cfg.levels.iter().enumerate() {
            init_zero_conv(&mut ps, &format!("control.gate_out.{i}"), *c, *c);
        }
        let c = *cfg.levels.last().unwrap();
        init_zero_conv(&mut ps, "control.gate_mid", c, c);
    }
    if acfg.streams.lora {
        let r = acfg.lora_rank;
        for (site, c) in cfg.attention_sites() {
            if r == 0 || r > c {
                return Err(Error::InvalidArgument(format!("lora rank {r} invalid for width {c}")));
            }
            for p in PROJECTIONS {
                ps.init_normal(&format!("lora.{site}.{p}.a"), &[r, c], 0.01, rng);
                ps.init_const(&format!("lora.{site}.{p}.b"), &[c, r], 0.0);
            }
        }
    }
    ps.train_all();
    Ok(ps)
}

/// Verify adapter tensor shapes against a backbone config.
pub fn check_adapters(adapters: &ParameterSet, cfg: &UNetConfig, acfg: &AdapterConfig) -> Result<()> {
    let expect = |name: &str, shape: &[usize]| -> Result<()> {
        let t = adapters.require(name)?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "{name}: built for {:?}, backbone config needs {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    let l = cfg.in_channels;
    if acfg.streams.semantic {
        expect("semantic.proj.w", &[acfg.token_dim, l, 1, 1, 1])?;
        for (site, c) in cfg.attention_sites() {
            expect(&format!("semantic.{site}.xattn.q.w"), &[c, c])?;
            expect(&format!("semantic.{site}.xattn.k.w"), &[c, acfg.token_dim])?;
        }
    }
    if acfg.streams.control {
        expect("control.gate_in.w", &[l, l, 1, 1, 1])?;
        for (i, c) in cfg.levels.iter().enumerate() {
            expect(&format!("control.gate_out.{i}.w"), &[*c, *c, 1, 1, 1])?;
        }
    }
    if acfg.streams.lora {
        for (site, c) in cfg.attention_sites() {
            for p in PROJECTIONS {
                expect(&format!("lora.{site}.{p}.b"), &[c, acfg.lora_rank])?;
            }
        }
    }
    Ok(())
}

/// Materialized conditioning for one `(z_c, z_t, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub semantic: Option<SemanticTokens>,
    pub control_residuals: Option<Vec<Tensor>>,
    /// Keyed by `{site}.{projection}`, e.g. `mid.attn.q`.
    pub lora: BTreeMap<String, LoraFactor>,
    /// Cross-attention projections `semantic.{site}.xattn.*`.
    pub cross_attn: ParameterSet,
}

impl ConditioningBundle {
    pub(crate) fn adapter_params(&self) -> Result<ParameterSet> {
        let mut ps = self.cross_attn.clone();
        for (key, f) in &self.lora {
            ps.insert(format!("lora.{key}.a"), f.a.clone());
            ps.insert(format!("lora.{key}.b"), f.b.clone());
        }
        ps.freeze_all();
        Ok(ps)
    }

    pub(crate) fn lower(&self, s: &mut Scope, n: usize) -> Result<CondVars> {
        let tokens = match &self.semantic {
            Some(st) => {
                let t = &st.tokens;
                let t = if t.shape()[0] == n {
                    t.clone()
                } else if t.shape()[0] == 1 {
                    Tensor::stack_batch(&vec![t.batch_item(0); n])?
                } else {
                    return Err(Error::Shape(format!("tokens batch {} vs {n}", t.shape()[0])));
                };
                Some(s.constant(t))
            }
            None => None,
        };
        let residuals = self
            .control_residuals
            .as_ref()
            .map(|r| r.iter().map(|t| s.constant(t.clone())).collect());
        let lora_alpha = self.lora.values().next().map(|f| f.alpha);
        Ok(CondVars {
            tokens,
            residuals,
            lora_alpha,
        })
    }
}

fn scope_eval<T>(params: &[&ParameterSet], f: impl FnOnce(&mut Scope) -> Result<T>) -> Result<T> {
    let mut s = Scope::new();
    for p in params {
        s = s.with_frozen(p);
    }
    f(&mut s)
}

/// Tokens for `z_c` (`[L, Z, Y, X]` or batched) using `semantic.proj`.
pub fn make_semantic_tokens(params: &ParameterSet, z_c: &Tensor, d: usize, pooled: [usize; 3]) -> Result<SemanticTokens> {
    let (z, _) = batched(z_c)?;
    scope_eval(&[params], |s| {
        let x = s.constant(z);
        let t = semantic_tokens_graph(s, x, d, pooled)?;
        Ok(SemanticTokens {
            tokens: s.value(t).clone(),
            pooled,
        })
    })
}

/// `h: [M, c]` attending over `tokens: [S, d]` with projections under `name`.
/// Returns the updated hidden states and the `[M, S]` attention weights.
pub fn cross_attend(params: &ParameterSet, name: &str, h: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
    let (hs, ts) = (h.shape().to_vec(), tokens.shape().to_vec());
    if hs.len() != 2 || ts.len() != 2 {
        return Err(Error::Shape(format!("cross_attend expects 2D inputs, got {hs:?} and {ts:?}")));
    }
    scope_eval(&[params], |s| {
        let hv = s.constant(h.clone().reshape(&[1, hs[0], hs[1]])?);
        let tv = s.constant(tokens.clone().reshape(&[1, ts[0], ts[1]])?);
        let (out, w) = cross_attend_tokens(s, name, hv, tv)?;
        Ok((
            s.value(out).clone().reshape(&hs)?,
            s.value(w).clone().reshape(&[hs[0], ts[0]])?,
        ))
    })
}

/// ControlNet residuals for batched or single latents.
pub fn control_forward(params: &ParameterSet, cfg: &UNetConfig, z_c: &Tensor, z_t: &Tensor, t: f64) -> Result<Vec<Tensor>> {
    let (zc, _) = batched(z_c)?;
    let (zt, _) = batched(z_t)?;
    let n = zt.shape()[0];
    scope_eval(&[params], |s| {
        let c = s.constant(zc);
        let x = s.constant(zt);
        let res = control_graph(s, cfg, c, x, &vec![t; n])?;
        Ok(res.iter().map(|v| s.value(*v).clone()).collect())
    })
}

/// Assemble the enabled streams for `z_c` against one backbone config.
/// `params` must hold the adapter tensors (backbone entries may also be present).
pub fn assemble_bundle(
    params: &ParameterSet,
    cfg: &UNetConfig,
    acfg: &AdapterConfig,
    z_c: &Tensor,
    z_t: &Tensor,
    t: f64,
) -> Result<ConditioningBundle> {
    check_adapters(params, cfg, acfg)?;
    let st = acfg.streams;
    let semantic = if st.semantic {
        Some(make_semantic_tokens(params, z_c, acfg.token_dim, acfg.pooled)?)
    } else {
        None
    };
    let control_residuals = if st.control {
        Some(control_forward(params, cfg, z_c, z_t, t)?)
    } else {
        None
    };
    let mut lora = BTreeMap::new();
    if st.lora {
        for (site, _) in cfg.attention_sites() {
            for p in PROJECTIONS {
                let key = format!("{site}.{p}");
                lora.insert(
                    key.clone(),
                    LoraFactor {
                        a: params.require(&format!("lora.{key}.a"))?.clone(),
                        b: params.require(&format!("lora.{key}.b"))?.clone(),
                        alpha: acfg.lora_alpha,
                    },
                );
            }
        }
    }
    let mut cross_attn = ParameterSet::new();
    if st.semantic {
        for (name, t) in params.iter().filter(|(n, _)| n.contains(".xattn.")) {
            cross_attn.insert(name, t.clone());
        }
    }
    Ok(ConditioningBundle {
        semantic,
        control_residuals,
        lora,
        cross_attn,
    })
}

/// Backbone entries that a stream set leaves frozen plus its trainable adapters.
pub fn stage2_params(backbone: &ParameterSet, adapters: &ParameterSet) -> Result<ParameterSet> {
    let mut all = backbone.clone();
    all.freeze_all();
    all.merge(adapters.clone())?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_unet, unet_forward};
    use crate::nn::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> UNetConfig {
        UNetConfig {
            in_channels: 4,
            levels: vec![8, 16],
            attention_levels: vec![1],
            time_embed_dim: 16,
            num_groups: 4,
        }
    }

    fn setup(streams: Streams) -> (ParameterSet, ParameterSet, AdapterConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = init_unet(&cfg(), &mut rng).unwrap();
        let acfg = AdapterConfig {
            streams,
            token_dim: 12,
            pooled: [2, 2, 2],
            lora_rank: 2,
            lora_alpha: 2.0,
        };
        let ad = init_adapters(&bb, &cfg(), &acfg, &mut rng).unwrap();
        (bb, ad, acfg)
    }

    #[test]
    fn lora_hand_example_and_zero_init() {
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = LoraFactor {
            a: Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
            b: Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
            alpha: 1.0,
        };
        assert_eq!(lora_effective(&w, &f).unwrap().data(), &[1.0, 1.0, 0.0, 1.0]);
        let zero = LoraFactor {
            b: Tensor::zeros(&[2, 1]),
            ..f.clone()
        };
        assert_eq!(lora_effective(&w, &zero).unwrap(), w);
        let bad = LoraFactor {
            a: Tensor::zeros(&[1, 3]),
            ..f
        };
        assert!(lora_effective(&w, &bad).is_err());
    }

    #[test]
    fn positional_encoding_is_injective() {
        let pe = positional_encoding([4, 4, 4], 66).unwrap();
        let rows: Vec<&[f64]> = pe.data().chunks(66).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3, "tokens {i} and {j} collide");
            }
        }
        assert!(positional_encoding([4, 4, 4], 64).is_err());
    }

    #[test]
    fn token_shapes_and_pure_encoding() {
        let mut ps = ParameterSet::new();
        ps.insert("semantic.proj.w", Tensor::zeros(&[66, 4, 1, 1, 1]));
        ps.insert("semantic.proj.b", Tensor::zeros(&[66]));
        let z = Tensor::zeros(&[4, 8, 8, 8]);
        let st = make_semantic_tokens(&ps, &z, 66, [4, 4, 4]).unwrap();
        assert_eq!((st.count(), st.width()), (64, 66));
        let pe = positional_encoding([4, 4, 4], 66).unwrap();
        assert_eq!(st.tokens.data(), pe.data());
        assert!(make_semantic_tokens(&ps, &z, 66, [3, 4, 4]).is_err());
    }

    #[test]
    fn cross_attention_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParameterSet::new();
        ps.init_normal("x.q.w", &[6, 6], 0.5, &mut rng);
        ps.init_normal("x.k.w", &[6, 12], 0.5, &mut rng);
        ps.init_normal("x.v.w", &[6, 12], 0.5, &mut rng);
        ps.init_const("x.o.w", &[6, 6], 0.0);
        ps.init_const("x.o.b", &[6], 0.0);
        let h = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let c = Tensor::randn(&[3, 12], 1.0, &mut rng);
        let (out, w) = cross_attend(&ps, "x", &h, &c).unwrap();
        assert_eq!(out, h);
        for row in w.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        // Single token: weight 1, output H + O(V c).
        ps.init_normal("x.o.w", &[6, 6], 0.5, &mut rng);
        let c1 = Tensor::randn(&[1, 12], 1.0, &mut rng);
        let (out, w) = cross_attend(&ps, "x", &h, &c1).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let (wv, wo) = (ps.get("x.v.w").unwrap(), ps.get("x.o.w").unwrap());
        let v: Vec<f64> = (0..6).map(|i| (0..12).map(|j| wv.data()[i * 12 + j] * c1.data()[j]).sum()).collect();
        let o: Vec<f64> = (0..6).map(|i| (0..6).map(|j| wo.data()[i * 6 + j] * v[j]).sum()).collect();
        for m in 0..5 {
            for i in 0..6 {
                assert!((out.data()[m * 6 + i] - h.data()[m * 6 + i] - o[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_streams_leave_backbone_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zc = Tensor::randn(&[4, 4, 4, 4], 1.0, &mut rng);
        let zt = Tensor::randn(&[4, 4, 4, 4], 1.0, &mut rng);
        for streams in [
            Streams::ALL,
            Streams { semantic: true, control: false, lora: false },
            Streams { semantic: false, control: true, lora: false },
            Streams { semantic: false, control: false, lora: true },
        ] {
            let (bb, ad, acfg) = setup(streams);
            let all = stage2_params(&bb, &ad).unwrap();
            let bundle = assemble_bundle(&all, &cfg(), &acfg, &zc, &zt, 9.0).unwrap();
            if let Some(r) = &bundle.control_residuals {
                assert!(r.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
            }
            let base = unet_forward(&bb, &cfg(), &zt, 9.0, None).unwrap();
            let cond = unet_forward(&bb, &cfg(), &zt, 9.0, Some(&bundle)).unwrap();
            assert_eq!(base, cond, "{}", streams.label());
        }
    }

    #[test]
    fn perturbed_streams_are_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zc = Tensor::randn(&[4, 4, 4, 4], 1.0, &mut rng);
        let zt = Tensor::randn(&[4, 4, 4, 4], 1.0, &mut rng);
        let (bb, mut ad, acfg) = setup(Streams::ALL);
        ad.get_mut("control.gate_out.1.w").unwrap().data_mut()[0] = 1.0;
        let all = stage2_params(&bb, &ad).unwrap();
        let res = control_forward(&all, &cfg(), &zc, &zt, 3.0).unwrap();
        assert!(res[1].data().iter().any(|&v| v != 0.0));
        assert!(res[0].data().iter().all(|&v| v == 0.0));

        let (bb, mut ad, acfg2) = setup(Streams { semantic: false, control: false, lora: true });
        ad.get_mut("lora.mid.attn.v.b").unwrap().data_mut()[0] = 0.5;
        let all = stage2_params(&bb, &ad).unwrap();
        let bundle = assemble_bundle(&all, &cfg(), &acfg2, &zc, &zt, 3.0).unwrap();
        let base = unet_forward(&bb, &cfg(), &zt, 3.0, None).unwrap();
        let cond = unet_forward(&bb, &cfg(), &zt, 3.0, Some(&bundle)).unwrap();
        assert!(base.max_abs_diff(&cond) > 1e-8);
        let again = assemble_bundle(&all, &cfg(), &acfg2, &zc, &zt, 3.0).unwrap();
        assert_eq!(bundle, again);
        let _ = acfg;
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let (bb, ad, acfg) = setup(Streams::ALL);
        let all = stage2_params(&bb, &ad).unwrap();
        let mut other = cfg();
        other.levels = vec![8, 24];
        let z = Tensor::zeros(&[4, 4, 4, 4]);
        assert!(assemble_bundle(&all, &other, &acfg, &z, &z, 1.0).is_err());
    }

    #[test]
    fn lora_census_and_partition() {
        let (bb, ad, _) = setup(Streams { semantic: false, control: false, lora: true });
        let all = stage2_params(&bb, &ad).unwrap();
        let part = all.partition(&["lora.*"]).unwrap();
        assert_eq!(part.trainable_count(), 24);
        assert_eq!(part.frozen_names().count(), bb.len());
    }

    #[test]
    fn lora_merge_matches_factored_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let f = LoraFactor {
            a: Tensor::randn(&[3, 7], 1.0, &mut rng),
            b: Tensor::randn(&[5, 3], 1.0, &mut rng),
            alpha: 6.0,
        };
        let merged = lora_effective(&w, &f).unwrap();
        let x = Tensor::randn(&[7], 1.0, &mut rng);
        for o in 0..5 {
            let direct: f64 = (0..7).map(|i| merged.data()[o * 7 + i] * x.data()[i]).sum();
            let wx: f64 = (0..7).map(|i| w.data()[o * 7 + i] * x.data()[i]).sum();
            let ax: Vec<f64> = (0..3).map(|r| (0..7).map(|i| f.a.data()[r * 7 + i] * x.data()[i]).sum()).collect();
            let bax: f64 = (0..3).map(|r| f.b.data()[o * 3 + r] * ax[r]).sum();
            assert!((direct - (wx + 2.0 * bax)).abs() < 1e-9);
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let (bb, mut ad, acfg) = setup(Streams::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Open the zero gates so every adapter tensor receives gradient.
        for name in ad.names().map(String::from).collect::<Vec<_>>() {
            if name.contains("gate") || name.ends_with(".o.w") || name.ends_with("lora.mid.attn.q.b") {
                let shape = ad.get(&name).unwrap().shape().to_vec();
                ad.insert(name.clone(), Tensor::randn(&shape, 0.3, &mut rng));
            }
        }
        ad.train_all();
        let sub = ad.partition(&["semantic.proj.*", "control.gate_*", "lora.mid.*", "semantic.mid.*"]).unwrap();
        let zc = Tensor::randn(&[1, 4, 4, 4, 4], 1.0, &mut rng);
        let zt = Tensor::randn(&[1, 4, 4, 4, 4], 1.0, &mut rng);
        let res = check_param_gradients(&sub, &[&bb], 1e-5, 5, |s| {
            let c = s.constant(zc.clone());
            let x = s.constant(zt.clone());
            let out = conditioned_graph(s, &cfg(), &acfg, x, &[4.0], Some(c))?;
            let sq = s.g.square(out);
            Ok(s.g.sum(sq))
        })
        .unwrap();
        for (n, e) in res {
            assert!(e < 1e-3, "{n}: {e}");
        }
    }
}
