//! Saliency and edge losses.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_sal: f64,
    pub loss_edge: f64,
    pub loss_total: f64,
}

impl LossReport {
    pub fn new(loss_sal: f64, loss_edge: f64) -> Self {
        Self { loss_sal, loss_edge, loss_total: loss_sal + loss_edge }
    }
}

fn check_same<T: Real>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", p.shape(), g.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy over every pixel of every batch item.
pub fn bce_loss<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Result<f64> {
    check_same("bce_loss", p, g)?;
    let n = p.len().max(1) as f64;
    let s: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &g)| {
            let p = p.f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let g = g.f64();
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / n)
}

/// Analytic gradient of [`bce_loss`] with respect to `p`; zero where the clamp is active.
pub fn bce_grad<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<f64>> {
    check_same("bce_grad", p, g)?;
    let n = p.len().max(1) as f64;
    Ok(Tensor::from_fn(p.shape(), |i| {
        let (p, g) = (p.data()[i].f64(), g.data()[i].f64());
        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
            0.0
        } else {
            (p - g) / (p * (1.0 - p)) / n
        }
    }))
}

pub fn total_loss<T: Real>(
    sal: &Tensor<T>,
    edge: &Tensor<T>,
    g_sal: &Tensor<T>,
    g_edge: &Tensor<T>,
) -> Result<LossReport> {
    Ok(LossReport::new(bce_loss(sal, g_sal)?, bce_loss(edge, g_edge)?))
}

/// Loss nodes `(total, saliency, edge)` from logits.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    sal_logits: Var,
    edge_logits: Var,
    g_sal: Var,
    g_edge: Var,
) -> Result<(Var, Var, Var)> {
    let ls = g.bce_with_logits(sal_logits, g_sal, BCE_EPS)?;
    let le = g.bce_with_logits(edge_logits, g_edge, BCE_EPS)?;
    let total = g.add(ls, le)?;
    Ok((total, ls, le))
}
