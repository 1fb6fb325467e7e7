//! Self-attention, transformer blocks, bilinear sampling, deformable
//! convolution and the distortion-adaptive attention block.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::{evaluate, Ctx, Init, Mode, ParamRegistry, ParameterStore};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::tokenizer::{FeatureMap, SoftSplitSpec, TokenSequence, Tokens};

/// Query rows processed at once when attention probabilities are not kept.
const QUERY_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self { dim, heads, mlp_ratio: 4.0, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

// ----------------------------------------------------------------------
// Scaled dot-product attention kernel
// ----------------------------------------------------------------------

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Forward pass over a packed `[B, L, 3·D]` query/key/value tensor.
/// Returns the `[B, L, D]` output and, if requested, the `[B, heads, L, L]` probabilities.
fn attention_forward<T: Real>(
    qkv: &[T],
    b: usize,
    l: usize,
    heads: usize,
    dh: usize,
    keep_probs: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let d = heads * dh;
    let row = 3 * d;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); b * l * d];
    let mut probs = keep_probs.then(|| vec![T::zero(); b * heads * l * l]);
    let chunk = if keep_probs { l } else { l.min(QUERY_CHUNK) };
    let mut scores = vec![T::zero(); chunk * l];
    for bi in 0..b {
        let base = bi * l * row;
        for h in 0..heads {
            let k = MatRef::strided(&qkv[base + d + h * dh..], l, dh, row);
            let v = MatRef::strided(&qkv[base + 2 * d + h * dh..], l, dh, row);
            let mut r0 = 0;
            while r0 < l {
                let rows = chunk.min(l - r0);
                let s = &mut scores[..rows * l];
                let q = MatRef::strided(&qkv[base + r0 * row + h * dh..], rows, dh, row);
                gemm(scale, q, k.t(), T::zero(), MatMut::new(s, rows, l));
                softmax_rows(s, l);
                if let Some(p) = probs.as_mut() {
                    let off = ((bi * heads + h) * l + r0) * l;
                    p[off..off + rows * l].copy_from_slice(s);
                }
                gemm(
                    T::one(),
                    MatRef::new(s, rows, l),
                    v,
                    T::zero(),
                    MatMut::strided(&mut out[(bi * l + r0) * d + h * dh..], rows, dh, d),
                );
                r0 += rows;
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    grad: &[T],
    b: usize,
    l: usize,
    heads: usize,
    dh: usize,
) -> Vec<T> {
    let d = heads * dh;
    let row = 3 * d;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); b * l * row];
    let mut dp = vec![T::zero(); l * l];
    for bi in 0..b {
        let base = bi * l * row;
        for h in 0..heads {
            let p = &probs[(bi * heads + h) * l * l..][..l * l];
            let q = MatRef::strided(&qkv[base + h * dh..], l, dh, row);
            let k = MatRef::strided(&qkv[base + d + h * dh..], l, dh, row);
            let v = MatRef::strided(&qkv[base + 2 * d + h * dh..], l, dh, row);
            let dout = MatRef::strided(&grad[bi * l * d + h * dh..], l, dh, d);
            gemm(T::one(), dout, v.t(), T::zero(), MatMut::new(&mut dp, l, l));
            gemm(
                T::one(),
                MatRef::new(p, l, l).t(),
                dout,
                T::zero(),
                MatMut::strided(&mut dqkv[base + 2 * d + h * dh..], l, dh, row),
            );
            for (dr, pr) in dp.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            gemm(
                T::one(),
                MatRef::new(&dp, l, l),
                k,
                T::zero(),
                MatMut::strided(&mut dqkv[base + h * dh..], l, dh, row),
            );
            gemm(
                T::one(),
                MatRef::new(&dp, l, l).t(),
                q,
                T::zero(),
                MatMut::strided(&mut dqkv[base + d + h * dh..], l, dh, row),
            );
        }
    }
    dqkv
}

/// Attention probabilities `[heads, L, L]` for every batch item of a packed
/// query/key/value tensor; exposed for inspecting the softmax normalization.
pub fn attention_weights<T: Real>(qkv: &Tensor<T>, heads: usize) -> Result<Vec<Tensor<T>>> {
    let (b, l, three_d) = qkv.dims3("attention_weights")?;
    if three_d % (3 * heads) != 0 {
        return Err(shape_err("attention_weights", format!("{three_d} not divisible by 3·{heads}")));
    }
    let dh = three_d / 3 / heads;
    let (_, probs) = attention_forward(qkv.data(), b, l, heads, dh, true);
    let probs = probs.unwrap_or_default();
    (0..b)
        .map(|bi| Tensor::new(&[heads, l, l], probs[bi * heads * l * l..(bi + 1) * heads * l * l].to_vec()))
        .collect()
}

impl<T: Real> Graph<T> {
    /// Multi-head scaled dot-product attention over a packed `[B, L, 3·D]`
    /// tensor (queries, keys, values concatenated on the last axis).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (b, l, three_d) = self.value(qkv).dims3("attention")?;
        if heads == 0 || three_d % (3 * heads) != 0 {
            return Err(shape_err("attention", format!("{three_d} not divisible by 3·{heads}")));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let keep = self.is_recording() && self.requires_grad(qkv);
        let (out, probs) = attention_forward(self.value(qkv).data(), b, l, heads, dh, keep);
        let out = Tensor::new(&[b, l, d], out)?;
        let probs = probs.unwrap_or_default();
        Ok(self.push(out, &[qkv], move |cx| {
            let g = attention_backward(cx.input(0).data(), &probs, cx.grad.data(), b, l, heads, dh);
            Ok(vec![Some(Tensor::new(&[b, l, three_d], g)?)])
        }))
    }
}

// ----------------------------------------------------------------------
// Bilinear sampling and deformable unfold
// ----------------------------------------------------------------------

/// Neighbor indices and weights of a bilinear sample; out-of-range neighbors are `None`.
#[derive(Clone, Copy, Debug)]
struct BilinearTap {
    idx: [Option<usize>; 4],
    ly: f64,
    lx: f64,
}

impl BilinearTap {
    fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let ly = y - y0f;
        let lx = x - x0f;
        let (y0, x0) = (y0f as i64, x0f as i64);
        let at = |yy: i64, xx: i64| {
            (yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64).then(|| yy as usize * w + xx as usize)
        };
        Self { idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)], ly, lx }
    }

    fn weights(&self) -> [f64; 4] {
        let (ly, lx) = (self.ly, self.lx);
        [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx]
    }

    fn corners<T: Real>(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }
}

/// Bilinear interpolation of an `h × w` plane at real coordinates `(y, x)`.
/// Neighbors outside the plane read as zero, so any coordinate outside
/// `(-1, h) × (-1, w)` samples 0.
pub fn bilinear_sample<T: Real>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let tap = BilinearTap::new(h, w, y, x);
    let v = tap.corners(plane);
    let wts = tap.weights();
    (0..4).map(|i| v[i] * T::c(wts[i])).sum()
}

/// Partial derivatives `(d/dy, d/dx)` of [`bilinear_sample`] with respect to the coordinates.
pub fn bilinear_sample_coord_grad<T: Real>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> (T, T) {
    let tap = BilinearTap::new(h, w, y, x);
    let [v00, v01, v10, v11] = tap.corners(plane);
    let (ly, lx) = (T::c(tap.ly), T::c(tap.lx));
    let one = T::one();
    let dy = (one - lx) * (v10 - v00) + lx * (v11 - v01);
    let dx = (one - ly) * (v01 - v00) + ly * (v11 - v10);
    (dy, dx)
}

/// Deformable column extraction: like a same-size soft split, but tap `t`
/// of the window at `(oy, ox)` samples at its regular position plus the
/// offsets `(off[2t], off[2t+1]) = (Δy, Δx)` at `(oy, ox)`.
fn deform_unfold_forward<T: Real>(
    x: &[T],
    off: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let (b, c, h, w) = dims;
    let kk = k * k;
    let pad = (k / 2) as f64;
    let hw = h * w;
    let dim = c * kk;
    let mut cols = vec![T::zero(); b * hw * dim];
    for bi in 0..b {
        let offb = &off[bi * 2 * kk * hw..][..2 * kk * hw];
        let xb = &x[bi * c * hw..][..c * hw];
        for oy in 0..h {
            for ox in 0..w {
                let p = oy * w + ox;
                let col = &mut cols[(bi * hw + p) * dim..][..dim];
                for t in 0..kk {
                    let (i, j) = (t / k, t % k);
                    let py = oy as f64 - pad + i as f64 + offb[2 * t * hw + p].f64();
                    let px = ox as f64 - pad + j as f64 + offb[(2 * t + 1) * hw + p].f64();
                    let tap = BilinearTap::new(h, w, py, px);
                    let wts = tap.weights().map(T::c);
                    for ci in 0..c {
                        let plane = &xb[ci * hw..][..hw];
                        let mut acc = T::zero();
                        for n in 0..4 {
                            if let Some(ix) = tap.idx[n] {
                                acc += wts[n] * plane[ix];
                            }
                        }
                        col[ci * kk + t] = acc;
                    }
                }
            }
        }
    }
    cols
}

fn deform_unfold_backward<T: Real>(
    x: &[T],
    off: &[T],
    grad: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
    need_x: bool,
    need_off: bool,
) -> (Vec<T>, Vec<T>) {
    let (b, c, h, w) = dims;
    let kk = k * k;
    let pad = (k / 2) as f64;
    let hw = h * w;
    let dim = c * kk;
    let mut gx = vec![T::zero(); if need_x { x.len() } else { 0 }];
    let mut goff = vec![T::zero(); if need_off { off.len() } else { 0 }];
    let one = T::one();
    for bi in 0..b {
        let offb = &off[bi * 2 * kk * hw..][..2 * kk * hw];
        let xb = &x[bi * c * hw..][..c * hw];
        for oy in 0..h {
            for ox in 0..w {
                let p = oy * w + ox;
                let g = &grad[(bi * hw + p) * dim..][..dim];
                for t in 0..kk {
                    let (i, j) = (t / k, t % k);
                    let py = oy as f64 - pad + i as f64 + offb[2 * t * hw + p].f64();
                    let px = ox as f64 - pad + j as f64 + offb[(2 * t + 1) * hw + p].f64();
                    let tap = BilinearTap::new(h, w, py, px);
                    if tap.idx.iter().all(Option::is_none) {
                        continue;
                    }
                    let wts = tap.weights().map(T::c);
                    let (ly, lx) = (T::c(tap.ly), T::c(tap.lx));
                    let mut dy = T::zero();
                    let mut dx = T::zero();
                    for ci in 0..c {
                        let gv = g[ci * kk + t];
                        if gv == T::zero() {
                            continue;
                        }
                        if need_x {
                            let plane = &mut gx[(bi * c + ci) * hw..][..hw];
                            for n in 0..4 {
                                if let Some(ix) = tap.idx[n] {
                                    plane[ix] += wts[n] * gv;
                                }
                            }
                        }
                        if need_off {
                            let [v00, v01, v10, v11] = tap.corners(&xb[ci * hw..][..hw]);
                            dy += gv * ((one - lx) * (v10 - v00) + lx * (v11 - v01));
                            dx += gv * ((one - ly) * (v01 - v00) + ly * (v11 - v10));
                        }
                    }
                    if need_off {
                        let ob = bi * 2 * kk * hw;
                        goff[ob + 2 * t * hw + p] += dy;
                        goff[ob + (2 * t + 1) * hw + p] += dx;
                    }
                }
            }
        }
    }
    (gx, goff)
}

impl<T: Real> Graph<T> {
    /// Deformable columns `[B, H·W, C·k²]` of a `B×C×H×W` map sampled with
    /// per-pixel offsets `[B, 2·k², H, W]` (stride 1, padding `k/2`).
    pub fn deform_unfold(&mut self, x: Var, offsets: Var, kernel: usize) -> Result<Tokens> {
        let (b, c, h, w) = self.value(x).dims4("deform_unfold")?;
        let os = self.value(offsets).dims4("deform_unfold")?;
        let kk = kernel * kernel;
        if kernel.is_multiple_of(2) || os != (b, 2 * kk, h, w) {
            return Err(shape_err(
                "deform_unfold",
                format!("offsets {os:?} for input {:?} and odd kernel {kernel}", (b, c, h, w)),
            ));
        }
        let dims = (b, c, h, w);
        let cols = deform_unfold_forward(self.value(x).data(), self.value(offsets).data(), dims, kernel);
        let out = Tensor::new(&[b, h * w, c * kk], cols)?;
        let var = self.push(out, &[x, offsets], move |cx| {
            let (gx, goff) = deform_unfold_backward(
                cx.input(0).data(),
                cx.input(1).data(),
                cx.grad.data(),
                dims,
                kernel,
                cx.needs(0),
                cx.needs(1),
            );
            Ok(vec![
                cx.needs(0).then(|| Tensor::new(cx.input(0).shape(), gx)).transpose()?,
                cx.needs(1).then(|| Tensor::new(cx.input(1).shape(), goff)).transpose()?,
            ])
        });
        Ok(Tokens { var, grid_h: h, grid_w: w })
    }
}

// ----------------------------------------------------------------------
// Layers
// ----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadSelfAttention {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, cfg: AttentionConfig) -> Self {
        Self {
            qkv: Linear::new(reg, &format!("{prefix}.qkv"), cfg.dim, 3 * cfg.dim, true),
            proj: Linear::new(reg, &format!("{prefix}.proj"), cfg.dim, cfg.dim, true),
            cfg,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let d = *cx.graph.shape(x).last().unwrap_or(&0);
        if d != self.cfg.dim {
            return Err(shape_err("multi_head_self_attention", format!("token dim {d} vs {}", self.cfg.dim)));
        }
        let qkv = self.qkv.apply(cx, x)?;
        let a = cx.graph.attention(qkv, self.cfg.heads)?;
        let y = self.proj.apply(cx, a)?;
        dropout(cx, y, self.cfg.dropout)
    }

    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, t: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let out = evaluate(store, |cx| {
            let x = cx.graph.constant(t.data.clone());
            self.apply(cx, x)
        })?;
        TokenSequence::new(out, t.grid_h, t.grid_w)
    }
}

fn dropout<T: Real>(cx: &mut Ctx<'_, T>, x: Var, p: f64) -> Result<Var> {
    if p <= 0.0 || cx.mode == Mode::Eval {
        return Ok(x);
    }
    let seed = cx.next_dropout_seed();
    cx.graph.dropout(x, p, seed)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize, hidden: usize, dropout: f64) -> Self {
        Self {
            fc1: Linear::new(reg, &format!("{prefix}.fc1"), dim, hidden, true),
            fc2: Linear::new(reg, &format!("{prefix}.fc2"), hidden, dim, true),
            dropout,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(cx, x)?;
        let h = cx.graph.gelu(h);
        let h = dropout(cx, h, self.dropout)?;
        let y = self.fc2.apply(cx, h)?;
        dropout(cx, y, self.dropout)
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, cfg: AttentionConfig) -> Self {
        Self {
            norm1: LayerNorm::new(reg, &format!("{prefix}.norm1"), cfg.dim),
            attn: MultiHeadSelfAttention::new(reg, &format!("{prefix}.attn"), cfg),
            norm2: LayerNorm::new(reg, &format!("{prefix}.norm2"), cfg.dim),
            mlp: Mlp::new(reg, &format!("{prefix}.mlp"), cfg.dim, cfg.hidden(), cfg.dropout),
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.apply(cx, x)?;
        let h = self.attn.apply(cx, h)?;
        let x = cx.graph.add(x, h)?;
        let h = self.norm2.apply(cx, x)?;
        let h = self.mlp.apply(cx, h)?;
        cx.graph.add(x, h)
    }

    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, t: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let out = evaluate(store, |cx| {
            let x = cx.graph.constant(t.data.clone());
            self.apply(cx, x)
        })?;
        TokenSequence::new(out, t.grid_h, t.grid_w)
    }
}

/// Single-head attention layer of the tokens-to-token stages. It maps tokens
/// of width `in_dim` (a flattened window) to width `out_dim`; the residual
/// around attention is taken from the value projection because the widths differ.
#[derive(Clone, Debug)]
pub struct TokenTransformer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub out_dim: usize,
}

impl TokenTransformer {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            norm1: LayerNorm::new(reg, &format!("{prefix}.norm1"), in_dim),
            qkv: Linear::new(reg, &format!("{prefix}.qkv"), in_dim, 3 * out_dim, true),
            proj: Linear::new(reg, &format!("{prefix}.proj"), out_dim, out_dim, true),
            norm2: LayerNorm::new(reg, &format!("{prefix}.norm2"), out_dim),
            mlp: Mlp::new(reg, &format!("{prefix}.mlp"), out_dim, out_dim, 0.0),
            out_dim,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.apply(cx, x)?;
        let qkv = self.qkv.apply(cx, h)?;
        let v = cx.graph.narrow_last(qkv, 2 * self.out_dim, self.out_dim)?;
        let a = cx.graph.attention(qkv, 1)?;
        let a = self.proj.apply(cx, a)?;
        let x = cx.graph.add(v, a)?;
        let h = self.norm2.apply(cx, x)?;
        let h = self.mlp.apply(cx, h)?;
        cx.graph.add(x, h)
    }
}

/// Deformable convolution: a zero-initialized standard convolution predicts
/// `2·k²` offset channels `(Δy, Δx)` per tap; the main kernel then samples
/// the input bilinearly at the displaced tap positions.
#[derive(Clone, Debug)]
pub struct DeformableConv {
    pub offset: Conv2d,
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl DeformableConv {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight_init: Init,
    ) -> Self {
        let kk = kernel * kernel;
        Self {
            offset: Conv2d::new(
                reg,
                &format!("{prefix}.offset"),
                in_channels,
                2 * kk,
                SoftSplitSpec::same(kernel),
                Init::Zeros,
            ),
            weight: reg.param(format!("{prefix}.weight"), &[out_channels, in_channels, kernel, kernel], weight_init),
            bias: reg.param(format!("{prefix}.bias"), &[out_channels], Init::Zeros),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.graph.value(x).dims4("deformable_conv")?.1;
        if c != self.in_channels {
            return Err(shape_err("deformable_conv", format!("{c} channels, expected {}", self.in_channels)));
        }
        let off = self.offset.apply(cx, x)?;
        let cols = cx.graph.deform_unfold(x, off, self.kernel)?;
        let w = cx.param(&self.weight)?;
        let b = cx.param(&self.bias)?;
        let y = cx.graph.linear(cols.var, w, Some(b))?;
        cx.graph.tokens_to_map(cols.with_var(y))
    }

    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let out = evaluate(store, |cx| {
            let v = cx.graph.constant(x.data.clone());
            self.apply(cx, v)
        })?;
        FeatureMap::new(out)
    }
}

/// Transformer block with a deformable convolution on the trunk between
/// attention and the feed-forward layer:
/// `x₁ = x + MSA(LN(x))`, `x₂ = tokens(DConv(map(x₁)))`, `out = x₂ + MLP(LN(x₂))`.
#[derive(Clone, Debug)]
pub struct DaBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub dconv: DeformableConv,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub const DA_KERNEL: usize = 3;

impl DaBlock {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, cfg: AttentionConfig) -> Self {
        Self {
            norm1: LayerNorm::new(reg, &format!("{prefix}.norm1"), cfg.dim),
            attn: MultiHeadSelfAttention::new(reg, &format!("{prefix}.attn"), cfg),
            dconv: DeformableConv::new(
                reg,
                &format!("{prefix}.dconv"),
                cfg.dim,
                cfg.dim,
                DA_KERNEL,
                Init::IdentityConv { std: crate::nn::PROJ_STD },
            ),
            norm2: LayerNorm::new(reg, &format!("{prefix}.norm2"), cfg.dim),
            mlp: Mlp::new(reg, &format!("{prefix}.mlp"), cfg.dim, cfg.hidden(), cfg.dropout),
        }
    }

    pub fn apply<T: Real>(&self, cx: &mut Ctx<'_, T>, t: Tokens) -> Result<Tokens> {
        let x = t.var;
        let h = self.norm1.apply(cx, x)?;
        let h = self.attn.apply(cx, h)?;
        let x1 = cx.graph.add(x, h)?;
        let map = cx.graph.tokens_to_map(t.with_var(x1))?;
        let map = self.dconv.apply(cx, map)?;
        let x2 = cx.graph.map_to_tokens(map)?;
        let h = self.norm2.apply(cx, x2.var)?;
        let h = self.mlp.apply(cx, h)?;
        let out = cx.graph.add(x2.var, h)?;
        Ok(t.with_var(out))
    }

    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, t: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        let out = evaluate(store, |cx| {
            let x = cx.graph.constant(t.data.clone());
            let tokens = Tokens { var: x, grid_h: t.grid_h, grid_w: t.grid_w };
            Ok(self.apply(cx, tokens)?.var)
        })?;
        TokenSequence::new(out, t.grid_h, t.grid_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};

    fn randomize(store: &mut ParameterStore<f64>, prefix_filter: &str, scale: f64, seed: u64) {
        for (i, (name, t)) in store.params.iter_mut().enumerate() {
            if name.contains(prefix_filter) {
                *t = random_tensor(t.shape(), seed + i as u64, scale);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let qkv = random_tensor(&[2, 7, 3 * 8], 1, 3.0);
        for p in attention_weights(&qkv, 2).unwrap() {
            for row in p.data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunked_inference_matches_full_attention() {
        let l = QUERY_CHUNK + 37;
        let qkv = random_tensor(&[1, l, 3 * 4], 2, 1.0);
        let (chunked, _) = attention_forward(qkv.data(), 1, l, 2, 2, false);
        let (full, _) = attention_forward(qkv.data(), 1, l, 2, 2, true);
        let diff = chunked.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut reg = ParamRegistry::new();
        let msa = MultiHeadSelfAttention::new(&mut reg, "a", AttentionConfig::new(4, 2));
        let store: ParameterStore<f64> = reg.init(3).unwrap();
        let x = random_tensor(&[1, 1, 4], 4, 1.0);
        let y = msa.forward(&store, &TokenSequence::new(x.clone(), 1, 1).unwrap()).unwrap();
        let wqkv = store.get("a.qkv.weight").unwrap().data();
        let bqkv = store.get("a.qkv.bias").unwrap().data();
        let wo = store.get("a.proj.weight").unwrap().data();
        let bo = store.get("a.proj.bias").unwrap().data();
        let v: Vec<f64> = (0..4)
            .map(|o| bqkv[8 + o] + (0..4).map(|i| wqkv[(8 + o) * 4 + i] * x.data()[i]).sum::<f64>())
            .collect();
        for o in 0..4 {
            let expect = bo[o] + (0..4).map(|i| wo[o * 4 + i] * v[i]).sum::<f64>();
            assert!((y.data.data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut reg = ParamRegistry::new();
        let msa = MultiHeadSelfAttention::new(&mut reg, "a", AttentionConfig::new(8, 2));
        let mut store: ParameterStore<f64> = reg.init(5).unwrap();
        randomize(&mut store, "a.", 0.5, 50);
        let x = random_tensor(&[1, 5, 8], 6, 1.0);
        let perm = [3, 0, 4, 1, 2];
        let px = Tensor::from_fn(&[1, 5, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let y = msa.forward(&store, &TokenSequence::new(x, 1, 5).unwrap()).unwrap();
        let py = msa.forward(&store, &TokenSequence::new(px, 1, 5).unwrap()).unwrap();
        for r in 0..5 {
            for c in 0..8 {
                let a = py.data.data()[r * 8 + c];
                let b = y.data.data()[perm[r] * 8 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
        let twin = Tensor::from_fn(&[1, 2, 8], |i| (i % 8) as f64 * 0.1);
        let out = msa.forward(&store, &TokenSequence::new(twin, 1, 2).unwrap()).unwrap();
        assert_eq!(out.data.data()[..8], out.data.data()[8..]);
    }

    #[test]
    fn attention_gradient() {
        check_gradients(
            |g, v| {
                let a = g.attention(v[0], 2)?;
                let y = g.mul(a, v[1])?;
                Ok(g.sum(y))
            },
            &[random_tensor(&[2, 3, 12], 7, 1.0), random_tensor(&[2, 3, 4], 8, 1.0)],
            1e-5,
            1e-5,
        )
        .unwrap();
    }

    #[test]
    fn bilinear_sampling_rules() {
        let plane = [0.0f64, 1.0, 2.0, 3.0];
        assert_eq!(bilinear_sample(&plane, 2, 2, 1.0, 0.0), 2.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 1.0), 1.0);
        assert!((bilinear_sample(&plane, 2, 2, 0.5, 0.5) - 1.5).abs() < 1e-15);
        assert_eq!(bilinear_sample(&plane, 2, 2, -5.0, -5.0), 0.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, -1.0, 0.0), 0.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 2.0), 0.0);
        // half a pixel beyond the last row blends with the zero border
        assert!((bilinear_sample(&plane, 2, 2, 1.5, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_coordinate_gradient_matches_differences() {
        let plane: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        for &(y, x) in &[(0.3, 0.7), (1.6, 2.2), (-0.4, 1.1), (2.5, 3.4)] {
            let (dy, dx) = bilinear_sample_coord_grad(&plane, 3, 4, y, x);
            let h = 1e-6;
            let ny = (bilinear_sample(&plane, 3, 4, y + h, x) - bilinear_sample(&plane, 3, 4, y - h, x)) / (2.0 * h);
            let nx = (bilinear_sample(&plane, 3, 4, y, x + h) - bilinear_sample(&plane, 3, 4, y, x - h)) / (2.0 * h);
            assert!((dy - ny).abs() < 1e-8, "{dy} {ny}");
            assert!((dx - nx).abs() < 1e-8, "{dx} {nx}");
        }
    }

    #[test]
    fn zero_offsets_reduce_to_plain_unfold() {
        let x = random_tensor(&[2, 3, 4, 5], 9, 1.0);
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x);
        let off = g.constant(Tensor::zeros(&[2, 18, 4, 5]));
        let d = g.deform_unfold(xv, off, 3).unwrap();
        let u = g.soft_split(xv, SoftSplitSpec::same(3)).unwrap();
        assert_eq!(g.value(d.var), g.value(u.var));
    }

    #[test]
    fn deform_unfold_gradient() {
        check_gradients(
            |g, v| {
                let t = g.deform_unfold(v[0], v[1], 3)?;
                let y = g.mul(t.var, v[2])?;
                Ok(g.sum(y))
            },
            &[
                random_tensor(&[1, 2, 4, 4], 10, 1.0),
                random_tensor(&[1, 18, 4, 4], 11, 1.3),
                random_tensor(&[1, 16, 18], 12, 1.0),
            ],
            1e-6,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn da_block_with_identity_trunk_is_identity() {
        let mut reg = ParamRegistry::new();
        let blk = DaBlock::new(&mut reg, "da", AttentionConfig::new(8, 2));
        let mut store: ParameterStore<f64> = reg.init(1).unwrap();
        for name in ["da.attn.proj.weight", "da.attn.proj.bias", "da.mlp.fc2.weight", "da.mlp.fc2.bias"] {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut reg2 = ParamRegistry::new();
        reg2.param("w", &[8, 8, 3, 3], Init::IdentityConv { std: 0.0 });
        let ident = reg2.init::<f64>(0).unwrap().get("w").unwrap().clone();
        *store.get_mut("da.dconv.weight").unwrap() = ident;
        let x = random_tensor(&[2, 6, 8], 13, 1.0);
        let t = TokenSequence::new(x.clone(), 2, 3).unwrap();
        let y = blk.forward(&store, &t).unwrap();
        assert!(y.data.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn identity_transformer_block_with_zero_projections() {
        let mut reg = ParamRegistry::new();
        let blk = TransformerBlock::new(&mut reg, "b", AttentionConfig::new(8, 2));
        let mut store: ParameterStore<f64> = reg.init(1).unwrap();
        for name in ["b.attn.proj.weight", "b.attn.proj.bias", "b.mlp.fc2.weight", "b.mlp.fc2.bias"] {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let x = random_tensor(&[2, 392 / 28, 8], 14, 1.0);
        let t = TokenSequence::new(x.clone(), 2, 7).unwrap();
        assert_eq!(blk.forward(&store, &t).unwrap().data, x);
    }
}
