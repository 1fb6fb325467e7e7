//! Equirectangular coordinates and the latitude prior grid.
//!
//! Pixel indices enter the angle formulas unshifted: row 0 maps to latitude
//! exactly −π/2 and column 0 to longitude exactly −π.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{precondition, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalCoord {
    /// Longitude in radians.
    pub phi: f64,
    /// Latitude in radians.
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PriorKind {
    #[default]
    Cosine,
    Sine,
    Blank,
}

impl PriorKind {
    pub const ALL: [PriorKind; 3] = [PriorKind::Cosine, PriorKind::Sine, PriorKind::Blank];

    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Cosine => "cosine",
            PriorKind::Sine => "sine",
            PriorKind::Blank => "blank",
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(PriorKind::Cosine),
            "sine" => Ok(PriorKind::Sine),
            "blank" => Ok(PriorKind::Blank),
            other => Err(Error::Config(format!("unknown prior `{other}` (expected cosine, sine or blank)"))),
        }
    }
}

pub fn latitude(h: f64, height: usize) -> f64 {
    let hh = height as f64;
    (h - hh / 2.0) / hh * PI
}

pub fn longitude(w: f64, width: usize) -> f64 {
    let ww = width as f64;
    (w - ww / 2.0) / ww * 2.0 * PI
}

/// Inverse of [`latitude`]: the (real) row index of latitude `theta`.
pub fn row_of_latitude(theta: f64, height: usize) -> f64 {
    let hh = height as f64;
    theta / PI * hh + hh / 2.0
}

pub fn erp_pixel_to_sphere(h: usize, w: usize, height: usize, width: usize) -> Result<SphericalCoord> {
    if height == 0 || width == 0 || h >= height || w >= width {
        return Err(precondition(
            "erp_pixel_to_sphere",
            format!("pixel ({h}, {w}) outside a {height}x{width} image"),
        ));
    }
    Ok(SphericalCoord { phi: longitude(w as f64, width), theta: latitude(h as f64, height) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    /// Row-major `height × width` values.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub kind: PriorKind,
}

impl RelationMatrix {
    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.width..(h + 1) * self.width]
    }

    /// The grid as a `[1, 1, H, W]` feature map.
    pub fn to_tensor<T: crate::tensor::Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::c(self.values[i]))
    }
}

/// Cosine: `cos θ(h)`; sine: signed `sin θ(h)`; blank: zeros. Every row is constant.
pub fn init_relation_matrix(height: usize, width: usize, kind: PriorKind) -> Result<RelationMatrix> {
    if height == 0 || width == 0 {
        return Err(precondition("init_relation_matrix", format!("size {height}x{width}")));
    }
    let mut values = Vec::with_capacity(height * width);
    for h in 0..height {
        let theta = latitude(h as f64, height);
        let v = match kind {
            PriorKind::Cosine => theta.cos(),
            PriorKind::Sine => theta.sin(),
            PriorKind::Blank => 0.0,
        };
        values.extend(std::iter::repeat_n(v, width));
    }
    Ok(RelationMatrix { values, height, width, kind })
}
