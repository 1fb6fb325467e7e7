//! Grayscale renderings of the relation-matrix prior and of the scale regulator output.

use crate::error::{precondition, Result};
use crate::geometry::{PriorKind, RelationMatrix};
use crate::tensor::{Real, Tensor};

pub const MOSAIC_ROWS: usize = 3;
pub const MOSAIC_COLS: usize = 4;

/// A single-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Codomain of each prior, mapped linearly onto black..white.
pub fn prior_range(kind: PriorKind) -> (f64, f64) {
    match kind {
        PriorKind::Cosine | PriorKind::Blank => (0.0, 1.0),
        PriorKind::Sine => (-1.0, 1.0),
    }
}

pub fn render_prior(rm: &RelationMatrix) -> GrayMap {
    let (lo, hi) = prior_range(rm.kind);
    GrayMap {
        values: rm.values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
        height: rm.height,
        width: rm.width,
    }
}

/// Tiles the first 12 channels of `[C, h, w]` row-major into a 3×4 mosaic,
/// each tile min-max normalized on its own; constant channels render black.
pub fn channel_mosaic<T: Real>(maps: &Tensor<T>) -> Result<GrayMap> {
    let (c, h, w) = maps.dims3("channel_mosaic")?;
    let tiles = MOSAIC_ROWS * MOSAIC_COLS;
    if c < tiles {
        return Err(precondition("channel_mosaic", format!("{c} channels, need {tiles}")));
    }
    let (height, width) = (MOSAIC_ROWS * h, MOSAIC_COLS * w);
    let mut values = vec![0.0; height * width];
    for t in 0..tiles {
        let plane: Vec<f64> = maps.data()[t * h * w..(t + 1) * h * w].iter().map(|v| v.f64()).collect();
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (tr, tc) = (t / MOSAIC_COLS, t % MOSAIC_COLS);
        for r in 0..h {
            for q in 0..w {
                let v = if hi > lo { (plane[r * w + q] - lo) / (hi - lo) } else { 0.0 };
                values[(tr * h + r) * width + tc * w + q] = v;
            }
        }
    }
    Ok(GrayMap { values, height, width })
}
