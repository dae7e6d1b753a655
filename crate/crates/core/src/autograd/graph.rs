//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value. Leaves are
//! either trainable parameters (gradients tracked) or constants. Spatial
//! tensors are laid out `[N, C, Z, Y, X]` with X fastest.

use super::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use super::tensor::{gemm, Tensor};
use crate::edge;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Exp(Var),
    Silu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    ScaleBatch(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample2(Var),
    AvgPool(Var, [usize; 3]),
    Concat(Var, Var),
    Narrow(Var, usize),
    AddChannel(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    Transpose12(Var),
    Reshape(Var),
    Sobel(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar w.r.t. every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "expected [N, C, Z, Y, X], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, Op::Abs(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.unary(a, v, Op::Silu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, v, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Multiply sample `n` of a batched tensor by `coeffs[n]`.
    pub fn scale_batch(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        let n = x.shape().first().copied().unwrap_or(0);
        if coeffs.len() != n {
            return Err(Error::Shape(format!(
                "scale_batch: {} coefficients for batch {n}",
                coeffs.len()
            )));
        }
        let per = x.numel() / n.max(1);
        let mut v = x.clone();
        for (i, c) in coeffs.iter().enumerate() {
            v.data_mut()[i * per..(i + 1) * per].iter_mut().for_each(|e| *e *= c);
        }
        Ok(self.unary(a, v, Op::ScaleBatch(a, coeffs)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    /// Mean of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// Mean of `|a - b|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.abs(d);
        Ok(self.mean(s))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, dims) = spatial(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[1] != cin || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape(format!(
                "conv3d weight {ws:?} incompatible with input channels {cin}"
            )));
        }
        if let Some(b) = b {
            self.value(b).expect_shape(&[ws[0]])?;
        }
        let geom = ConvGeom::new(cin, ws[0], ws[2], stride, pad, dims)
            .ok_or_else(|| Error::Shape(format!("conv3d kernel {} larger than input {dims:?}", ws[2])))?;
        let out = conv3d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let od = geom.out_dims;
        let value = Tensor::new(&[n, ws[0], od[0], od[1], od[2]], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv3d { x, w, b, geom, batch: n }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("group_norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
        }
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        let s: usize = shape[2..].iter().product();
        let cg = c / groups;
        let m = (cg * s) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * s;
                let block = &xv[start..start + cg * s];
                let mean = block.iter().sum::<f64>() / m;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let rstd = 1.0 / (var + eps).sqrt();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = start + ci * s;
                    for j in 0..s {
                        out[off + j] = (xv[off + j] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, [z, y, xx]) = spatial(self.shape(x))?;
        let src = self.value(x).data();
        let (z2, y2, x2) = (2 * z, 2 * y, 2 * xx);
        let mut out = vec![0.0; n * c * z2 * y2 * x2];
        for nc in 0..n * c {
            let s = &src[nc * z * y * xx..(nc + 1) * z * y * xx];
            let d = &mut out[nc * z2 * y2 * x2..(nc + 1) * z2 * y2 * x2];
            for oz in 0..z2 {
                for oy in 0..y2 {
                    for ox in 0..x2 {
                        d[(oz * y2 + oy) * x2 + ox] = s[((oz / 2) * y + oy / 2) * xx + ox / 2];
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, z2, y2, x2], out)?;
        Ok(self.unary(x, value, Op::Upsample2(x)))
    }

    /// Non-overlapping average pooling with per-axis factors `[kz, ky, kx]`.
    pub fn avg_pool(&mut self, x: Var, k: [usize; 3]) -> Result<Var> {
        let (n, c, dims) = spatial(self.shape(x))?;
        for a in 0..3 {
            if k[a] == 0 || dims[a] % k[a] != 0 {
                return Err(Error::Shape(format!(
                    "pool factor {k:?} does not divide dims {dims:?}"
                )));
            }
        }
        let od = [dims[0] / k[0], dims[1] / k[1], dims[2] / k[2]];
        let inv = 1.0 / (k[0] * k[1] * k[2]) as f64;
        let src = self.value(x).data();
        let si: usize = dims.iter().product();
        let so: usize = od.iter().product();
        let mut out = vec![0.0; n * c * so];
        for nc in 0..n * c {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for xx in 0..dims[2] {
                        let o = ((z / k[0]) * od[1] + y / k[1]) * od[2] + xx / k[2];
                        out[nc * so + o] += src[nc * si + (z * dims[1] + y) * dims[2] + xx] * inv;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, od[0], od[1], od[2]], out)?;
        Ok(self.unary(x, value, Op::AvgPool(x, k)))
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let s: usize = sa[2..].iter().product();
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * s..(ni + 1) * ca * s]);
            out.extend_from_slice(&bv[ni * cb * s..(ni + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Channels `[start, start + len)` of a `[N, C, ...]` tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let s: usize = shape[2..].iter().product();
        let c = shape[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * len * s);
        for ni in 0..shape[0] {
            let off = (ni * c + start) * s;
            out.extend_from_slice(&xv[off..off + len * s]);
        }
        let mut os = shape.clone();
        os[1] = len;
        let value = Tensor::new(&os, out)?;
        Ok(self.unary(x, value, Op::Narrow(x, start)))
    }

    /// Broadcast-add `v: [N, C]` over the trailing axes of `x: [N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("add_channel on {shape:?}")));
        }
        self.value(v).expect_shape(&shape[..2])?;
        let s: usize = shape[2..].iter().product();
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for (i, b) in vv.iter().enumerate() {
            out.data_mut()[i * s..(i + 1) * s].iter_mut().for_each(|e| *e += b);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddChannel(x, v), rg))
    }

    /// `x @ w^T + b` over the last axis: `x: [..., K]`, `w: [O, K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(Error::Shape(format!("linear weight {ws:?} vs input {xs:?}")));
        }
        let o = ws[0];
        if let Some(b) = b {
            self.value(b).expect_shape(&[o])?;
        }
        let r = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; r * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            r,
            k,
            o,
            1.0,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (1, k as isize),
            1.0,
            &mut out,
            (o as isize, 1),
        );
        let mut os = xs.clone();
        *os.last_mut().unwrap() = o;
        let value = Tensor::new(&os, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Batched matmul `[B, M, K] x [B, K, P]`, or `[B, M, K] x [B, P, K]^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Shape(format!("bmm inner dims {sa:?} x {sb:?}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bn * m * p];
        let bstr = if trans_b { (1, k as isize) } else { (p as isize, 1) };
        for i in 0..bn {
            gemm(
                m,
                k,
                p,
                1.0,
                &av[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv[i * k * p..(i + 1) * k * p],
                bstr,
                0.0,
                &mut out[i * m * p..(i + 1) * m * p],
                (p as isize, 1),
            );
        }
        let value = Tensor::new(&[bn, m, p], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::Shape("softmax on scalar".into()))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.unary(x, out, Op::Softmax(x)))
    }

    /// `[B, A, C] -> [B, C, A]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("transpose12 on {s:?}")));
        }
        let out = transpose12(self.value(x).data(), s[0], s[1], s[2]);
        let value = Tensor::new(&[s[0], s[2], s[1]], out)?;
        Ok(self.unary(x, value, Op::Transpose12(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// `[N, C, Z, Y, X] -> [N, Z*Y*X, C]` token layout.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, c, d) = spatial(self.shape(x))?;
        let r = self.reshape(x, &[n, c, d[0] * d[1] * d[2]])?;
        self.transpose12(r)
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, dims: [usize; 3]) -> Result<Var> {
        let t = self.transpose12(x)?;
        let s = self.shape(t).to_vec();
        self.reshape(t, &[s[0], s[1], dims[0], dims[1], dims[2]])
    }

    /// Replicate-padded 3x3x3 Sobel derivative along `axis` (0 = X, 1 = Y, 2 = Z).
    pub fn sobel(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (n, c, d) = spatial(self.shape(x))?;
        let s = d[0] * d[1] * d[2];
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for nc in 0..n * c {
            edge::sobel_axis_into(d, &src[nc * s..(nc + 1) * s], axis, &mut out[nc * s..(nc + 1) * s])?;
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.unary(x, value, Op::Sobel(x, axis)))
    }

    /// Gradient magnitude `sqrt(gx^2 + gy^2 + gz^2)`.
    pub fn sobel_magnitude(&mut self, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for axis in 0..3 {
            let g = self.sobel(x, axis)?;
            let g2 = self.square(g);
            acc = Some(match acc {
                None => g2,
                Some(a) => self.add(a, g2)?,
            });
        }
        Ok(self.sqrt(acc.unwrap()))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let ls = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&ls, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accum(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accum(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)?;
                self.accum(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accum(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(out, |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })?;
                self.accum(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y)?;
                self.accum(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                self.accum(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                self.accum(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x < *lo || x > *hi { 0.0 } else { gv })?;
                self.accum(grads, *a, ga);
            }
            Op::ScaleBatch(a, coeffs) => {
                let per = g.numel() / coeffs.len().max(1);
                let mut ga = g.clone();
                for (i, c) in coeffs.iter().enumerate() {
                    ga.data_mut()[i * per..(i + 1) * per].iter_mut().for_each(|e| *e *= c);
                }
                self.accum(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.shape(*a), g.item());
                self.accum(grads, *a, ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let ga = Tensor::full(self.shape(*a), g.item() / n);
                self.accum(grads, *a, ga);
            }
            Op::Conv3d { x, w, b, geom, batch } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.shape()));
                let mut db = b.filter(|b| self.rg(*b)).map(|b| Tensor::zeros(self.shape(b)));
                conv3d_backward(
                    geom,
                    *batch,
                    xv.data(),
                    wv.data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accum(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let cg = c / groups;
                let m = (cg * s) as f64;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let k = ni * groups + gi;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let start = (ni * c + gi * cg) * s;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let off = start + ci * s;
                            for j in 0..s {
                                let xhat = (xv[off + j] - mu) * rs;
                                let dy = gd[off + j];
                                dgamma[ch] += dy * xhat;
                                dbeta[ch] += dy;
                                let dxhat = dy * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let off = start + ci * s;
                            for j in 0..s {
                                let xhat = (xv[off + j] - mu) * rs;
                                let dxhat = gd[off + j] * gv[ch];
                                dx[off + j] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(shape, dx)?);
                self.accum(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accum(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::Upsample2(x) => {
                let (n, c, [z, y, xx]) = spatial(self.shape(*x))?;
                let (y2, x2) = (2 * y, 2 * xx);
                let s_in = z * y * xx;
                let s_out = 8 * s_in;
                let mut dx = vec![0.0; n * c * s_in];
                let gd = g.data();
                for nc in 0..n * c {
                    for oz in 0..2 * z {
                        for oy in 0..y2 {
                            for ox in 0..x2 {
                                dx[nc * s_in + ((oz / 2) * y + oy / 2) * xx + ox / 2] +=
                                    gd[nc * s_out + (oz * y2 + oy) * x2 + ox];
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::AvgPool(x, k) => {
                let (n, c, dims) = spatial(self.shape(*x))?;
                let od = [dims[0] / k[0], dims[1] / k[1], dims[2] / k[2]];
                let inv = 1.0 / (k[0] * k[1] * k[2]) as f64;
                let si: usize = dims.iter().product();
                let so: usize = od.iter().product();
                let gd = g.data();
                let mut dx = vec![0.0; n * c * si];
                for nc in 0..n * c {
                    for z in 0..dims[0] {
                        for y in 0..dims[1] {
                            for xx in 0..dims[2] {
                                let o = ((z / k[0]) * od[1] + y / k[1]) * od[2] + xx / k[2];
                                dx[nc * si + (z * dims[1] + y) * dims[2] + xx] = gd[nc * so + o] * inv;
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let s: usize = sa[2..].iter().product();
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let gd = g.data();
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for ni in 0..n {
                    let off = ni * (ca + cb) * s;
                    ga.extend_from_slice(&gd[off..off + ca * s]);
                    gb.extend_from_slice(&gd[off + ca * s..off + (ca + cb) * s]);
                }
                self.accum(grads, *a, Tensor::new(&sa, ga)?);
                self.accum(grads, *b, Tensor::new(&sb, gb)?);
            }
            Op::Narrow(x, start) => {
                let shape = self.shape(*x).to_vec();
                let s: usize = shape[2..].iter().product();
                let c = shape[1];
                let len = out.shape()[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for ni in 0..shape[0] {
                    let off = (ni * c + start) * s;
                    dx[off..off + len * s].copy_from_slice(&g.data()[ni * len * s..(ni + 1) * len * s]);
                }
                self.accum(grads, *x, Tensor::new(&shape, dx)?);
            }
            Op::AddChannel(x, v) => {
                self.accum(grads, *x, g.clone());
                if self.rg(*v) {
                    let vs = self.shape(*v).to_vec();
                    let nc = vs[0] * vs[1];
                    let s = g.numel() / nc;
                    let dv: Vec<f64> = (0..nc).map(|i| g.data()[i * s..(i + 1) * s].iter().sum()).collect();
                    self.accum(grads, *v, Tensor::new(&vs, dv)?);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w).to_vec();
                let (o, k) = (ws[0], ws[1]);
                let r = self.value(*x).numel() / k.max(1);
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * k];
                    gemm(r, o, k, 1.0, g.data(), (o as isize, 1), self.value(*w).data(), (k as isize, 1), 0.0, &mut dx, (k as isize, 1));
                    self.accum(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * k];
                    gemm(o, r, k, 1.0, g.data(), (1, o as isize), self.value(*x).data(), (k as isize, 1), 0.0, &mut dw, (k as isize, 1));
                    self.accum(grads, *w, Tensor::new(&ws, dw)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, b, Tensor::new(&[o], db)?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let p = out.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gd = g.data();
                if self.rg(*a) {
                    // da = g · b^T (b as [K, P]) or g · b (b stored [P, K]).
                    let bstr = if *trans_b { (k as isize, 1) } else { (1, p as isize) };
                    let mut da = vec![0.0; bn * m * k];
                    for i in 0..bn {
                        gemm(m, p, k, 1.0, &gd[i * m * p..(i + 1) * m * p], (p as isize, 1), &bv[i * k * p..(i + 1) * k * p], bstr, 0.0, &mut da[i * m * k..(i + 1) * m * k], (k as isize, 1));
                    }
                    self.accum(grads, *a, Tensor::new(&sa, da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bn * k * p];
                    for i in 0..bn {
                        let ga = &gd[i * m * p..(i + 1) * m * p];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * p..(i + 1) * k * p];
                        if *trans_b {
                            // db[P, K] = g^T · a
                            gemm(p, m, k, 1.0, ga, (1, p as isize), ai, (k as isize, 1), 0.0, dbi, (k as isize, 1));
                        } else {
                            // db[K, P] = a^T · g
                            gemm(k, m, p, 1.0, ai, (1, k as isize), ga, (p as isize, 1), 0.0, dbi, (p as isize, 1));
                        }
                    }
                    self.accum(grads, *b, Tensor::new(&sb, db)?);
                }
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().unwrap();
                let mut dx = vec![0.0; out.numel()];
                for ((yr, gr), dr) in out.data().chunks(k).zip(g.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(out.shape(), dx)?);
            }
            Op::Transpose12(x) => {
                let s = out.shape();
                let dx = transpose12(g.data(), s[0], s[1], s[2]);
                self.accum(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x))?;
                self.accum(grads, *x, gx);
            }
            Op::Sobel(x, axis) => {
                let (n, c, d) = spatial(self.shape(*x))?;
                let s = d[0] * d[1] * d[2];
                let mut dx = vec![0.0; n * c * s];
                for nc in 0..n * c {
                    edge::sobel_axis_adjoint_into(d, &g.data()[nc * s..(nc + 1) * s], *axis, &mut dx[nc * s..(nc + 1) * s]);
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
        }
        Ok(())
    }
}

fn transpose12(src: &[f64], b: usize, a: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let s = &src[bi * a * c..(bi + 1) * a * c];
        let d = &mut out[bi * a * c..(bi + 1) * a * c];
        for i in 0..a {
            for j in 0..c {
                d[j * a + i] = s[i * c + j];
            }
        }
    }
    out
}
