//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a backward closure. [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients into the inputs. Leaf
//! gradients are kept for inspection; interior gradients are dropped as soon
//! as they have been propagated.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view handed to a backward closure.
pub struct BackwardCx<'a, T> {
    inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

impl<'a, T> BackwardCx<'a, T> {
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        self.inputs[i]
    }

    /// Whether input `i` needs a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type Grads<T> = Vec<Option<Tensor<T>>>;

type BackwardFn<T> = Box<dyn Fn(&BackwardCx<'_, T>) -> Result<Grads<T>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), record: true }
    }

    /// A forward-only graph; nothing requires a gradient.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation (when recording).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.record;
        self.push_node(value, Vec::new(), None, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node { value, inputs, backward, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Append an operation. The closure is dropped when no input needs a gradient.
    pub fn push<F>(&mut self, value: Tensor<T>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCx<'_, T>) -> Result<Grads<T>> + 'static,
    {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.push_node(value, inputs.to_vec(), backward, requires_grad)
    }

    /// Accumulate gradients of the single-element `loss` into every leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = self.grads[i].take() else { continue };
            let cx = BackwardCx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                output: &node.value,
                grad: &grad,
            };
            let contributions = backward(&cx)?;
            let inputs = node.inputs.clone();
            drop(cx);
            for (var, contrib) in inputs.into_iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if contrib.shape() != self.nodes[var.0].value.shape() {
                    return Err(shape_err(
                        "backward",
                        format!(
                            "gradient {:?} does not match value {:?}",
                            contrib.shape(),
                            self.nodes[var.0].value.shape()
                        ),
                    ));
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Elementwise and layout operations
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, &[a, b], |cx| Ok(vec![Some(cx.grad.clone()), Some(cx.grad.clone())])))
    }

    /// `x + y` where `y` has a leading axis of 1 broadcast over the batch of `x`.
    pub fn add_batch_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (vx, vy) = (self.value(x), self.value(y));
        if vy.shape().first() != Some(&1) || vx.shape()[1..] != vy.shape()[1..] {
            return Err(shape_err(
                "add_batch_broadcast",
                format!("{:?} + {:?}", vx.shape(), vy.shape()),
            ));
        }
        let per = vy.len();
        let mut out = vx.clone();
        for chunk in out.data_mut().chunks_mut(per) {
            for (o, &v) in chunk.iter_mut().zip(vy.data()) {
                *o += v;
            }
        }
        Ok(self.push(out, &[x, y], move |cx| {
            let gy = if cx.needs(1) {
                let mut acc = vec![T::zero(); per];
                for chunk in cx.grad.data().chunks(per) {
                    for (a, &g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                Some(Tensor::new(cx.input(1).shape(), acc)?)
            } else {
                None
            };
            Ok(vec![Some(cx.grad.clone()), gy])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, &[a, b], |cx| {
            let g = cx.grad.data();
            let ga = cx.needs(0).then(|| {
                let d = g.iter().zip(cx.input(1).data()).map(|(&g, &y)| g * y).collect();
                Tensor::new(cx.grad.shape(), d)
            });
            let gb = cx.needs(1).then(|| {
                let d = g.iter().zip(cx.input(0).data()).map(|(&g, &x)| g * x).collect();
                Tensor::new(cx.grad.shape(), d)
            });
            Ok(vec![ga.transpose()?, gb.transpose()?])
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::c(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], move |cx| Ok(vec![Some(cx.grad.map(|g| g * s))]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], |cx| {
            Ok(vec![Some(cx.grad.clone().reshape(cx.input(0).shape())?)])
        }))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let dim = *vx.shape().last().unwrap_or(&0);
        if start + len > dim {
            return Err(shape_err("narrow_last", format!("{start}+{len} exceeds {dim}")));
        }
        let rows = vx.len() / dim.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * dim + start..r * dim + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, &[x], move |cx| {
            let mut d = vec![T::zero(); rows * dim];
            for (r, g) in cx.grad.data().chunks(len).enumerate() {
                d[r * dim + start..r * dim + start + len].copy_from_slice(g);
            }
            Ok(vec![Some(Tensor::new(cx.input(0).shape(), d)?)])
        }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, &[x], |cx| {
            let d = cx
                .grad
                .data()
                .iter()
                .zip(cx.output.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            Ok(vec![Some(Tensor::new(cx.grad.shape(), d)?)])
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, &[x], |cx| {
            let d = cx
                .grad
                .data()
                .iter()
                .zip(cx.input(0).data())
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect();
            Ok(vec![Some(Tensor::new(cx.grad.shape(), d)?)])
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], |cx| {
            Ok(vec![Some(Tensor::full(cx.input(0).shape(), cx.grad.item()))])
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout with a mask drawn from `seed`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push(out, &[x], move |cx| {
            let d = cx.grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            Ok(vec![Some(Tensor::new(cx.grad.shape(), d)?)])
        }))
    }

    // ------------------------------------------------------------------
    // Dense layers
    // ------------------------------------------------------------------

    /// `y = x Wᵀ + b` over the last axis of `x`. `w` is `[out, in...]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let out_dim = vw.shape()[0];
        let in_dim = vw.len() / out_dim.max(1);
        let last = *vx.shape().last().unwrap_or(&0);
        if last != in_dim {
            return Err(shape_err(
                "linear",
                format!("input {:?} against weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let rows = vx.len() / in_dim.max(1);
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != out_dim {
                return Err(shape_err("linear", format!("bias {:?}", vb.shape())));
            }
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(vb.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(vx.data(), rows, in_dim),
            MatRef::new(vw.data(), out_dim, in_dim).t(),
            beta,
            MatMut::new(&mut out, rows, out_dim),
        );
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, &inputs, move |cx| {
            let g = cx.grad.data();
            let xv = cx.input(0);
            let wv = cx.input(1);
            let gx = if cx.needs(0) {
                let mut d = vec![T::zero(); rows * in_dim];
                gemm(
                    T::one(),
                    MatRef::new(g, rows, out_dim),
                    MatRef::new(wv.data(), out_dim, in_dim),
                    T::zero(),
                    MatMut::new(&mut d, rows, in_dim),
                );
                Some(Tensor::new(xv.shape(), d)?)
            } else {
                None
            };
            let gw = if cx.needs(1) {
                let mut d = vec![T::zero(); out_dim * in_dim];
                gemm(
                    T::one(),
                    MatRef::new(g, rows, out_dim).t(),
                    MatRef::new(xv.data(), rows, in_dim),
                    T::zero(),
                    MatMut::new(&mut d, out_dim, in_dim),
                );
                Some(Tensor::new(wv.shape(), d)?)
            } else {
                None
            };
            let mut grads = vec![gx, gw];
            if cx.inputs.len() == 3 {
                let gb = if cx.needs(2) {
                    let mut d = vec![T::zero(); out_dim];
                    for row in g.chunks(out_dim) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Some(Tensor::new(cx.input(2).shape(), d)?)
                } else {
                    None
                };
                grads.push(gb);
            }
            Ok(grads)
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let dim = *vx.shape().last().unwrap_or(&0);
        if self.value(gamma).len() != dim || self.value(beta).len() != dim {
            return Err(shape_err("layer_norm", format!("input {:?}", vx.shape())));
        }
        let rows = vx.len() / dim.max(1);
        let eps = T::c(eps);
        let n = T::c(dim as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(dim) {
            for ((o, &g), &b) in row.iter_mut().zip(vg).zip(vb) {
                *o = *o * g + b;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.push(out, &[x, gamma, beta], move |cx| {
            let g = cx.grad.data();
            let gamma = cx.input(1).data();
            let mut gx = cx.needs(0).then(|| vec![T::zero(); g.len()]);
            let mut gg = vec![T::zero(); dim];
            let mut gb = vec![T::zero(); dim];
            let mut dxhat = vec![T::zero(); dim];
            for r in 0..rows {
                let gr = &g[r * dim..(r + 1) * dim];
                let xr = &xhat[r * dim..(r + 1) * dim];
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for i in 0..dim {
                    gg[i] += gr[i] * xr[i];
                    gb[i] += gr[i];
                    dxhat[i] = gr[i] * gamma[i];
                    mean_d += dxhat[i];
                    mean_dx += dxhat[i] * xr[i];
                }
                mean_d /= n;
                mean_dx /= n;
                if let Some(gx) = gx.as_mut() {
                    for i in 0..dim {
                        gx[r * dim + i] = rstd[r] * (dxhat[i] - mean_d - xr[i] * mean_dx);
                    }
                }
            }
            Ok(vec![
                gx.map(|d| Tensor::new(cx.input(0).shape(), d)).transpose()?,
                Some(Tensor::new(cx.input(1).shape(), gg)?),
                Some(Tensor::new(cx.input(2).shape(), gb)?),
            ])
        }))
    }

    /// Per-channel batch normalization of a `B×C×H×W` map.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)` so the caller can update running averages.
    /// With `running = Some((mean, var))` the map is normalized by those.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let vx = self.value(x);
        let (b, c, h, w) = vx.dims4("batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batch_norm", format!("{c} channels vs affine params")));
        }
        let hw = h * w;
        let count = b * hw;
        let eps = T::c(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut stats = None;
        match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", "running statistics size"));
                }
                mean.copy_from_slice(rm.data());
                var.copy_from_slice(rv.data());
            }
            None => {
                let n = T::c(count as f64);
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        mean[ch] += vx.data()[base..base + hw].iter().copied().sum::<T>();
                    }
                }
                for m in &mut mean {
                    *m /= n;
                }
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let m = mean[ch];
                        var[ch] +=
                            vx.data()[base..base + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&s| if count > 1 { s / T::c((count - 1) as f64) } else { T::zero() })
                    .collect();
                for v in &mut var {
                    *v /= n;
                }
                stats = Some((Tensor::new(&[c], mean.clone())?, Tensor::new(&[c], unbiased)?));
            }
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (vx.data()[i] - mean[ch]) * rstd[ch];
                }
            }
        }
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for o in &mut out[base..base + hw] {
                    *o = *o * vg[ch] + vb[ch];
                }
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let batch_stats = running.is_none();
        let var = self.push(out, &[x, gamma, beta], move |cx| {
            let g = cx.grad.data();
            let gamma = cx.input(1).data();
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let mut sum_d = vec![T::zero(); c];
            let mut sum_dx = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        gg[ch] += g[i] * xhat[i];
                        gb[ch] += g[i];
                        let d = g[i] * gamma[ch];
                        sum_d[ch] += d;
                        sum_dx[ch] += d * xhat[i];
                    }
                }
            }
            let gx = if cx.needs(0) {
                let n = T::c(count as f64);
                let mut d = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            let dxh = g[i] * gamma[ch];
                            d[i] = if batch_stats {
                                rstd[ch] * (dxh - sum_d[ch] / n - xhat[i] * sum_dx[ch] / n)
                            } else {
                                rstd[ch] * dxh
                            };
                        }
                    }
                }
                Some(Tensor::new(cx.input(0).shape(), d)?)
            } else {
                None
            };
            Ok(vec![
                gx,
                Some(Tensor::new(cx.input(1).shape(), gg)?),
                Some(Tensor::new(cx.input(2).shape(), gb)?),
            ])
        });
        Ok((var, stats))
    }

    // ------------------------------------------------------------------
    // Losses
    // ------------------------------------------------------------------

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    ///
    /// The probability is clamped to `[eps, 1 - eps]` for the value; the
    /// gradient is the logit-space gradient `(sigmoid(z) - g) / n`, which stays
    /// finite and non-zero where the clamp is active.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var, eps: f64) -> Result<Var> {
        let (vz, vt) = (self.value(logits), self.value(target));
        if vz.shape() != vt.shape() {
            return Err(shape_err("bce_with_logits", format!("{:?} vs {:?}", vz.shape(), vt.shape())));
        }
        let n = vz.len().max(1) as f64;
        let total: f64 = vz
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&z, &g)| {
                let p = sigmoid(z.f64()).clamp(eps, 1.0 - eps);
                let g = g.f64();
                -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(T::c(total / n));
        Ok(self.push(out, &[logits, target], move |cx| {
            let s = cx.grad.item() / T::c(n);
            let d = cx
                .input(0)
                .data()
                .iter()
                .zip(cx.input(1).data())
                .map(|(&z, &g)| (sigmoid(z) - g) * s)
                .collect();
            Ok(vec![Some(Tensor::new(cx.input(0).shape(), d)?), None])
        }))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`, with
    /// `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: Var, eps: f64) -> Result<Var> {
        let (vp, vt) = (self.value(p), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(shape_err("bce", format!("{:?} vs {:?}", vp.shape(), vt.shape())));
        }
        let n = vp.len().max(1) as f64;
        let total: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &g)| {
                let p = p.f64().clamp(eps, 1.0 - eps);
                let g = g.f64();
                -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(T::c(total / n));
        Ok(self.push(out, &[p, target], move |cx| {
            let s = cx.grad.item() / T::c(n);
            let (lo, hi) = (T::c(eps), T::c(1.0 - eps));
            let d = cx
                .input(0)
                .data()
                .iter()
                .zip(cx.input(1).data())
                .map(|(&p, &g)| {
                    if p < lo || p > hi {
                        T::zero()
                    } else {
                        (p - g) / (p * (T::one() - p)) * s
                    }
                })
                .collect();
            Ok(vec![Some(Tensor::new(cx.input(0).shape(), d)?), None])
        }))
    }
}

/// Logistic function kept strictly inside `(0, 1)`: saturated values are
/// pinned to the nearest representable numbers off the endpoints.
pub fn sigmoid<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    if y.is_nan() {
        return y;
    }
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() * T::c(0.5))
}

pub fn gelu<T: Real>(x: T) -> T {
    x * T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-x * x * T::c(0.5)).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        crate::gradcheck::random_tensor(shape, seed, 1.0)
    }

    #[test]
    fn linear_matches_naive_product() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(t(&[2, 3, 4], 1));
        let w = g.constant(t(&[5, 4], 2));
        let b = g.constant(t(&[5], 3));
        let y = g.linear(x, w, Some(b)).unwrap();
        let (xv, wv, bv) = (g.value(x).clone(), g.value(w).clone(), g.value(b).clone());
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 3, 5]);
        for r in 0..6 {
            for o in 0..5 {
                let mut acc = bv.data()[o];
                for i in 0..4 {
                    acc += xv.data()[r * 4 + i] * wv.data()[o * 4 + i];
                }
                assert!((yv.data()[r * 5 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_and_layer_norm_gradients() {
        let inputs = [t(&[3, 4], 4), t(&[2, 4], 5), t(&[2], 6), t(&[2], 7), t(&[2], 8)];
        check_gradients(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                let y = g.layer_norm(y, v[3], v[4], 1e-5)?;
                let y = g.gelu(y);
                let y = g.sigmoid(y);
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn batch_norm_gradients_in_both_modes() {
        let inputs = [t(&[2, 3, 2, 2], 9), t(&[3], 10), t(&[3], 11), t(&[2, 3, 2, 2], 12)];
        check_gradients(
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                let y = g.mul(y, v[3])?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        let rm = t(&[3], 13);
        let rv = t(&[3], 14).map(|v| v.abs() + 0.5);
        check_gradients(
            move |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?;
                let y = g.mul(y, v[3])?;
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn broadcast_reshape_scale_gradients() {
        let inputs = [t(&[3, 2, 2], 15), t(&[1, 2, 2], 16)];
        check_gradients(
            |g, v| {
                let y = g.add_batch_broadcast(v[0], v[1])?;
                let y = g.reshape(y, &[6, 2])?;
                let y = g.scale(y, -1.5);
                let y = g.gelu(y);
                Ok(g.mean(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn bce_with_logits_matches_composed_bce() {
        let z = t(&[1, 1, 3, 3], 17);
        let target = Tensor::from_fn(&[1, 1, 3, 3], |i| (i % 2) as f64);
        let mut g = Graph::<f64>::new();
        let zv = g.leaf(z.clone());
        let tv = g.constant(target.clone());
        let fused = g.bce_with_logits(zv, tv, 1e-7).unwrap();
        let p = g.sigmoid(zv);
        let composed = g.bce(p, tv, 1e-7).unwrap();
        assert!((g.value(fused).item() - g.value(composed).item()).abs() < 1e-12);
        check_gradients(
            move |g, v| {
                let tv = g.constant(target.clone());
                g.bce_with_logits(v[0], tv, 1e-7)
            },
            &[z],
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn dropout_is_identity_at_zero_and_scales_kept_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[1000]));
        assert_eq!(g.dropout(x, 0.0, 1).unwrap(), x);
        let y = g.dropout(x, 0.5, 1).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }
}
