//! Soft split (overlapping unfold) and fold, the down- and up-sampling
//! kernels of the tokens-to-token encoder and its reverse decoder.
//!
//! A window of size `k` with overlap `s` advances by `k - s` pixels. A token
//! produced from a `C`-channel map has dimension `C·k²` and is laid out
//! channel-major, then row-major within the window: element
//! `c·k² + i·k + j` holds pixel `(y0 + i, x0 + j)` of channel `c`, where
//! `(y0, x0)` is the padded window origin. Padding contributes zeros.
//! Fold is the adjoint of soft split: every token scatters its window back
//! and overlapping contributions add up.

use crate::error::{precondition, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Sliding-window geometry: kernel `k`, overlap `s`, padding `p`; stride is `k - s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SoftSplitSpec {
    pub kernel: usize,
    pub overlap: usize,
    pub padding: usize,
}

impl SoftSplitSpec {
    pub fn new(kernel: usize, overlap: usize, padding: usize) -> Result<Self> {
        let s = Self { kernel, overlap, padding };
        s.validate()?;
        Ok(s)
    }

    /// Same-size window for a stride-1 convolution with odd kernel `k`.
    pub fn same(kernel: usize) -> Self {
        Self { kernel, overlap: kernel.saturating_sub(1), padding: kernel / 2 }
    }

    /// Window with an explicit stride.
    pub fn strided(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 || stride > kernel {
            return Err(precondition("soft_split", format!("stride {stride} for kernel {kernel}")));
        }
        Self::new(kernel, kernel - stride, padding)
    }

    pub fn stride(&self) -> usize {
        self.kernel - self.overlap
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.overlap >= self.kernel {
            return Err(precondition(
                "soft_split",
                format!("need k >= 1 and 0 <= s < k, got k={} s={}", self.kernel, self.overlap),
            ));
        }
        Ok(())
    }

    pub fn window_area(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// Number of window positions along one axis of length `len`.
pub fn out_length(len: usize, spec: SoftSplitSpec) -> Result<usize> {
    spec.validate()?;
    let padded = len + 2 * spec.padding;
    if padded < spec.kernel {
        return Err(precondition(
            "out_length",
            format!("window {} larger than padded input {padded}", spec.kernel),
        ));
    }
    Ok((padded - spec.kernel) / spec.stride() + 1)
}

/// `B × C × H × W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let (b, c, h, w) = data.dims4("feature_map")?;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(shape_err("feature_map", format!("empty dimension in {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// `B × L × D` tokens that remember the 2-d grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub data: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(data: Tensor<T>, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (_, l, d) = data.dims3("token_sequence")?;
        if l != grid_h * grid_w {
            return Err(shape_err(
                "token_sequence",
                format!("{l} tokens cannot form a {grid_h}×{grid_w} grid"),
            ));
        }
        if d == 0 {
            return Err(shape_err("token_sequence", "token dimension is zero"));
        }
        Ok(Self { data, grid_h, grid_w })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Graph handle for a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub var: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

// ----------------------------------------------------------------------
// Kernels
// ----------------------------------------------------------------------

/// Unfold `x` (`B×C×H×W`) into `out` (`B×L×C·k²`). `out` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unfold_into<T: Real>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: SoftSplitSpec,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let k = spec.kernel;
    let kk = k * k;
    let st = spec.stride() as isize;
    let p = spec.padding as isize;
    let dim = c * kk;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let tok = &mut out[((bi * oh + oy) * ow + ox) * dim..][..dim];
                let y0 = oy as isize * st - p;
                let x0 = ox as isize * st - p;
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..][..h * w];
                    for i in 0..k {
                        let iy = y0 + i as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..][..w];
                        let dst = &mut tok[ci * kk + i * k..][..k];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let ix = x0 + j as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add tokens (`B×L×C·k²`) into `out` (`B×C×H×W`). `out` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fold_into<T: Real>(
    tokens: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: SoftSplitSpec,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let k = spec.kernel;
    let kk = k * k;
    let st = spec.stride() as isize;
    let p = spec.padding as isize;
    let dim = c * kk;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let tok = &tokens[((bi * oh + oy) * ow + ox) * dim..][..dim];
                let y0 = oy as isize * st - p;
                let x0 = ox as isize * st - p;
                for ci in 0..c {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    for i in 0..k {
                        let iy = y0 + i as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &mut plane[iy as usize * w..][..w];
                        let src = &tok[ci * kk + i * k..][..k];
                        for (j, &s) in src.iter().enumerate() {
                            let ix = x0 + j as isize;
                            if ix >= 0 && ix < w as isize {
                                row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Number of windows covering each pixel of an `h × w` plane.
pub fn overlap_count(h: usize, w: usize, spec: SoftSplitSpec) -> Result<Vec<usize>> {
    let oh = out_length(h, spec)?;
    let ow = out_length(w, spec)?;
    let ones = vec![1.0f64; oh * ow * spec.window_area()];
    let mut acc = vec![0.0f64; h * w];
    fold_into(&ones, 1, 1, h, w, spec, oh, ow, &mut acc);
    Ok(acc.into_iter().map(|v| v as usize).collect())
}

/// Batched transpose `[B, R, C] -> [B, C, R]`.
pub(crate) fn transpose_batched<T: Copy>(src: &[T], b: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut dst = Vec::with_capacity(src.len());
    for bi in 0..b {
        let base = bi * rows * cols;
        for c in 0..cols {
            for r in 0..rows {
                dst.push(src[base + r * cols + c]);
            }
        }
    }
    dst
}

// ----------------------------------------------------------------------
// Tensor-level operations
// ----------------------------------------------------------------------

pub fn soft_split<T: Real>(x: &FeatureMap<T>, spec: SoftSplitSpec) -> Result<TokenSequence<T>> {
    let mut g = Graph::inference();
    let v = g.constant(x.data.clone());
    let t = g.soft_split(v, spec)?;
    let data = g.take_value(t.var);
    TokenSequence::new(data, t.grid_h, t.grid_w)
}

pub fn token_fold<T: Real>(
    t: &TokenSequence<T>,
    spec: SoftSplitSpec,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap<T>> {
    let mut g = Graph::inference();
    let v = g.constant(t.data.clone());
    let tokens = Tokens { var: v, grid_h: t.grid_h, grid_w: t.grid_w };
    let m = g.token_fold(tokens, spec, out_h, out_w, false)?;
    FeatureMap::new(g.take_value(m))
}

pub fn tokens_to_map<T: Real>(t: &TokenSequence<T>) -> Result<FeatureMap<T>> {
    let (b, l, d) = t.data.dims3("tokens_to_map")?;
    if l != t.grid_h * t.grid_w {
        return Err(shape_err("tokens_to_map", format!("{l} tokens vs grid {}×{}", t.grid_h, t.grid_w)));
    }
    let data = transpose_batched(t.data.data(), b, l, d);
    FeatureMap::new(Tensor::new(&[b, d, t.grid_h, t.grid_w], data)?)
}

pub fn map_to_tokens<T: Real>(x: &FeatureMap<T>) -> Result<TokenSequence<T>> {
    let (b, c, h, w) = x.dims();
    let data = transpose_batched(x.data.data(), b, c, h * w);
    TokenSequence::new(Tensor::new(&[b, h * w, c], data)?, h, w)
}

// ----------------------------------------------------------------------
// Graph operations
// ----------------------------------------------------------------------

impl<T: Real> Graph<T> {
    /// Soft split of a `B×C×H×W` map into `B×L×C·k²` tokens.
    pub fn soft_split(&mut self, x: Var, spec: SoftSplitSpec) -> Result<Tokens> {
        let (b, c, h, w) = self.value(x).dims4("soft_split")?;
        let oh = out_length(h, spec)?;
        let ow = out_length(w, spec)?;
        let dim = c * spec.window_area();
        let mut out = vec![T::zero(); b * oh * ow * dim];
        unfold_into(self.value(x).data(), b, c, h, w, spec, oh, ow, &mut out);
        let out = Tensor::new(&[b, oh * ow, dim], out)?;
        let var = self.push(out, &[x], move |cx| {
            let mut gx = vec![T::zero(); b * c * h * w];
            fold_into(cx.grad.data(), b, c, h, w, spec, oh, ow, &mut gx);
            Ok(vec![Some(Tensor::new(&[b, c, h, w], gx)?)])
        });
        Ok(Tokens { var, grid_h: oh, grid_w: ow })
    }

    /// Fold `B×L×C·k²` tokens back into a `B×C×out_h×out_w` map.
    ///
    /// With `normalize`, each pixel is divided by the number of windows covering it.
    pub fn token_fold(
        &mut self,
        t: Tokens,
        spec: SoftSplitSpec,
        out_h: usize,
        out_w: usize,
        normalize: bool,
    ) -> Result<Var> {
        let (b, l, d) = self.value(t.var).dims3("token_fold")?;
        let kk = spec.window_area();
        if d % kk != 0 {
            return Err(shape_err("token_fold", format!("token dim {d} not divisible by k²={kk}")));
        }
        let oh = out_length(out_h, spec)?;
        let ow = out_length(out_w, spec)?;
        if (oh, ow) != (t.grid_h, t.grid_w) || l != oh * ow {
            return Err(shape_err(
                "token_fold",
                format!(
                    "grid {}×{} ({l} tokens) does not fold to {out_h}×{out_w} (needs {oh}×{ow})",
                    t.grid_h, t.grid_w
                ),
            ));
        }
        let c = d / kk;
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        fold_into(self.value(t.var).data(), b, c, out_h, out_w, spec, oh, ow, &mut out);
        let inv: Option<Vec<T>> = if normalize {
            let counts = overlap_count(out_h, out_w, spec)?;
            Some(
                counts
                    .into_iter()
                    .map(|n| if n == 0 { T::zero() } else { T::one() / T::c(n as f64) })
                    .collect(),
            )
        } else {
            None
        };
        let plane = out_h * out_w;
        if let Some(inv) = &inv {
            for chunk in out.chunks_mut(plane) {
                for (o, &s) in chunk.iter_mut().zip(inv) {
                    *o *= s;
                }
            }
        }
        let out = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(out, &[t.var], move |cx| {
            let mut g = cx.grad.data().to_vec();
            if let Some(inv) = &inv {
                for chunk in g.chunks_mut(plane) {
                    for (o, &s) in chunk.iter_mut().zip(inv) {
                        *o *= s;
                    }
                }
            }
            let mut gt = vec![T::zero(); b * l * d];
            unfold_into(&g, b, c, out_h, out_w, spec, oh, ow, &mut gt);
            Ok(vec![Some(Tensor::new(&[b, l, d], gt)?)])
        }))
    }

    /// `B×L×D` tokens to a `B×D×grid_h×grid_w` map.
    pub fn tokens_to_map(&mut self, t: Tokens) -> Result<Var> {
        let (b, l, d) = self.value(t.var).dims3("tokens_to_map")?;
        if l != t.grid_h * t.grid_w {
            return Err(shape_err(
                "tokens_to_map",
                format!("{l} tokens vs grid {}×{}", t.grid_h, t.grid_w),
            ));
        }
        let data = transpose_batched(self.value(t.var).data(), b, l, d);
        let out = Tensor::new(&[b, d, t.grid_h, t.grid_w], data)?;
        Ok(self.push(out, &[t.var], move |cx| {
            let g = transpose_batched(cx.grad.data(), b, d, l);
            Ok(vec![Some(Tensor::new(&[b, l, d], g)?)])
        }))
    }

    /// `B×C×H×W` map to `B×(H·W)×C` tokens on an `H×W` grid.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Tokens> {
        let (b, c, h, w) = self.value(x).dims4("map_to_tokens")?;
        let l = h * w;
        let data = transpose_batched(self.value(x).data(), b, c, l);
        let out = Tensor::new(&[b, l, c], data)?;
        let var = self.push(out, &[x], move |cx| {
            let g = transpose_batched(cx.grad.data(), b, l, c);
            Ok(vec![Some(Tensor::new(&[b, c, h, w], g)?)])
        });
        Ok(Tokens { var, grid_h: h, grid_w: w })
    }

    /// Standard 2-d convolution as soft split followed by a linear map.
    /// `weight` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: SoftSplitSpec) -> Result<Var> {
        let ws = self.value(weight).shape().to_vec();
        let cin = self.value(x).dims4("conv2d")?.1;
        if ws.len() != 4 || ws[1] != cin || ws[2] != spec.kernel || ws[3] != spec.kernel {
            return Err(shape_err(
                "conv2d",
                format!("weight {ws:?} for {cin} input channels and kernel {}", spec.kernel),
            ));
        }
        let cols = self.soft_split(x, spec)?;
        let y = self.linear(cols.var, weight, bias)?;
        self.tokens_to_map(cols.with_var(y))
    }
}
