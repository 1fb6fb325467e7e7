//! Saliency evaluation metrics.
//!
//! Conventions:
//! - A map is binarized at each of the 255 thresholds `t = k/255`, `k = 0..=254`,
//!   as `P > t`. A perfect binary prediction therefore scores 1 at every threshold.
//! - F-measure uses `β² = 0.3`; `F_t = 0` when its denominator vanishes.
//! - E-measure averages the enhanced-alignment matrix over all `N` pixels. An
//!   all-background ground truth scores the fraction of predicted background,
//!   an all-foreground one the fraction of predicted foreground.
//! - S-measure uses `α = 0.5` and clamps at 0. The centroid is rounded half to
//!   even, then shifted by one so the top-left quadrant includes it. Empty quadrants
//!   carry zero weight and are skipped. A standard deviation over fewer than two
//!   pixels is 0.
//! - Dataset scores average per-image values; maxF/maxE average per-image maxima.
//!   F-measure is undefined for an all-background ground truth, so such images
//!   are left out of the two F averages only.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BETA2: f64 = 0.3;
pub const N_THRESHOLDS: usize = 255;
/// Guards the S-measure ratios against division by zero.
pub const S_EPS: f64 = f64::EPSILON;
pub const S_ALPHA: f64 = 0.5;

/// A single-channel `height × width` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Plane {
    pub fn new(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(shape_err("plane", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(Self { data, height, width })
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
    pub fn from_tensor<T: crate::tensor::Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(shape_err("plane", format!("{s:?} is not a single map")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self::new(t.data().iter().map(|v| v.f64()).collect(), h, w)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn check_pair(op: &'static str, p: &Plane, g: &Plane) -> Result<()> {
    if (p.height, p.width) != (g.height, g.width) {
        return Err(shape_err(op, format!("{}x{} vs {}x{}", p.height, p.width, g.height, g.width)));
    }
    if g.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(precondition(op, "ground truth must be binary"));
    }
    Ok(())
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// Number of thresholds that `p` exceeds.
fn exceeded(p: f64) -> usize {
    let mut n = ((p * 255.0).ceil().max(0.0) as usize).min(N_THRESHOLDS);
    while n > 0 && p <= threshold(n - 1) {
        n -= 1;
    }
    while n < N_THRESHOLDS && p > threshold(n) {
        n += 1;
    }
    n
}

/// Per threshold, the number of predicted-positive pixels over foreground and background.
fn positive_counts(p: &Plane, g: &Plane) -> (Vec<usize>, Vec<usize>) {
    let mut hist_fg = vec![0usize; N_THRESHOLDS + 1];
    let mut hist_bg = vec![0usize; N_THRESHOLDS + 1];
    for (&pv, &gv) in p.data.iter().zip(&g.data) {
        let n = exceeded(pv);
        if gv == 1.0 {
            hist_fg[n] += 1;
        } else {
            hist_bg[n] += 1;
        }
    }
    // positive at threshold k  <=>  exceeded > k
    let mut tp = vec![0usize; N_THRESHOLDS];
    let mut fp = vec![0usize; N_THRESHOLDS];
    let (mut a, mut b) = (0, 0);
    for k in (0..N_THRESHOLDS).rev() {
        a += hist_fg[k + 1];
        b += hist_bg[k + 1];
        tp[k] = a;
        fp[k] = b;
    }
    (tp, fp)
}

pub fn mae(p: &Plane, g: &Plane) -> Result<f64> {
    if (p.height, p.width) != (g.height, g.width) {
        return Err(shape_err("mae", format!("{}x{} vs {}x{}", p.height, p.width, g.height, g.width)));
    }
    Ok(p.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.data.len() as f64)
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

/// F-measure at every threshold. Errors on an all-background ground truth.
pub fn f_curve(p: &Plane, g: &Plane) -> Result<Vec<f64>> {
    check_pair("f_measure", p, g)?;
    let n_fg = g.data.iter().filter(|&&v| v == 1.0).count();
    if n_fg == 0 {
        return Err(precondition("f_measure", "ground truth has no foreground"));
    }
    let (tp, fp) = positive_counts(p, g);
    Ok((0..N_THRESHOLDS)
        .map(|k| {
            let pos = tp[k] + fp[k];
            let prec = if pos == 0 { 0.0 } else { tp[k] as f64 / pos as f64 };
            let rec = tp[k] as f64 / n_fg as f64;
            f_score(prec, rec)
        })
        .collect())
}

fn max_mean(curve: &[f64]) -> (f64, f64) {
    let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max, curve.iter().sum::<f64>() / curve.len() as f64)
}

/// `(maxF, meanF)`.
pub fn f_measure(p: &Plane, g: &Plane) -> Result<(f64, f64)> {
    Ok(max_mean(&f_curve(p, g)?))
}

/// Enhanced-alignment score of a binary prediction with `tp` true and `fp`
/// false positives against a ground truth with `n_fg` of `n` pixels in the foreground.
fn e_score(tp: usize, fp: usize, n_fg: usize, n: usize) -> f64 {
    let nf = n as f64;
    let pos = tp + fp;
    if n_fg == 0 {
        return (n - pos) as f64 / nf;
    }
    if n_fg == n {
        return pos as f64 / nf;
    }
    let mp = pos as f64 / nf;
    let mg = n_fg as f64 / nf;
    let fn_ = n_fg - tp;
    let tn = n - n_fg - fp;
    // (prediction, ground truth, count)
    let parts = [(1.0, 1.0, tp), (1.0, 0.0, fp), (0.0, 1.0, fn_), (0.0, 0.0, tn)];
    let mut sum = 0.0;
    for (pv, gv, count) in parts {
        if count == 0 {
            continue;
        }
        let (ap, ag) = (pv - mp, gv - mg);
        let phi = 2.0 * ap * ag / (ap * ap + ag * ag);
        sum += count as f64 * (phi + 1.0) * (phi + 1.0) / 4.0;
    }
    sum / nf
}

pub fn e_curve(p: &Plane, g: &Plane) -> Result<Vec<f64>> {
    check_pair("e_measure", p, g)?;
    let n = g.data.len();
    let n_fg = g.data.iter().filter(|&&v| v == 1.0).count();
    let (tp, fp) = positive_counts(p, g);
    Ok((0..N_THRESHOLDS).map(|k| e_score(tp[k], fp[k], n_fg, n)).collect())
}

/// `(maxE, meanE)`.
pub fn e_measure(p: &Plane, g: &Plane) -> Result<(f64, f64)> {
    Ok(max_mean(&e_curve(p, g)?))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, std, n)
}

fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, _) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + S_EPS)
}

pub(crate) fn s_object(p: &Plane, g: &Plane) -> f64 {
    let u = g.mean();
    let pairs = || p.data.iter().zip(&g.data);
    let fg = object_similarity(pairs().filter(|(_, &gv)| gv == 1.0).map(|(&pv, _)| pv));
    let bg = object_similarity(pairs().filter(|(_, &gv)| gv == 0.0).map(|(&pv, _)| 1.0 - pv));
    u * fg + (1.0 - u) * bg
}

/// `(col, row)` split point: the rounded foreground centroid plus one.
pub fn split_point(g: &Plane) -> (usize, usize) {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for r in 0..g.height {
        for c in 0..g.width {
            if g.get(r, c) == 1.0 {
                n += 1;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    let (x, y) = if n == 0 {
        ((g.width as f64 / 2.0).round_ties_even(), (g.height as f64 / 2.0).round_ties_even())
    } else {
        ((sc / n as f64).round_ties_even(), (sr / n as f64).round_ties_even())
    };
    (x as usize + 1, y as usize + 1)
}

fn block_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    let nf = n as f64;
    let x = p.iter().sum::<f64>() / nf;
    let y = g.iter().sum::<f64>() / nf;
    let d = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&a, &b) in p.iter().zip(g) {
            sx += (a - x) * (a - x);
            sy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
    }
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + S_EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn s_region(p: &Plane, g: &Plane) -> f64 {
    let (h, w) = (p.height, p.width);
    let (x, y) = split_point(g);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let mut score = 0.0;
    for (r0, r1, c0, c1) in quads {
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let mut pb = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut gb = Vec::with_capacity(pb.capacity());
        for r in r0..r1 {
            pb.extend_from_slice(&p.data[r * w + c0..r * w + c1]);
            gb.extend_from_slice(&g.data[r * w + c0..r * w + c1]);
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
        score += weight * block_ssim(&pb, &gb);
    }
    score
}

pub fn s_measure(p: &Plane, g: &Plane) -> Result<f64> {
    check_pair("s_measure", p, g)?;
    let y = g.mean();
    if y == 0.0 {
        return Ok(1.0 - p.mean());
    }
    if y == 1.0 {
        return Ok(p.mean());
    }
    let s = S_ALPHA * s_object(p, g) + (1.0 - S_ALPHA) * s_region(p, g);
    Ok(s.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    /// `None` for an all-background ground truth.
    pub f: Option<(f64, f64)>,
    pub max_e: f64,
    pub mean_e: f64,
    pub s_measure: f64,
}

pub fn image_metrics(p: &Plane, g: &Plane) -> Result<ImageMetrics> {
    let f = match f_measure(p, g) {
        Ok(v) => Some(v),
        Err(Error::Precondition { .. }) if g.data.iter().all(|&v| v == 0.0) => None,
        Err(e) => return Err(e),
    };
    let (max_e, mean_e) = e_measure(p, g)?;
    Ok(ImageMetrics { mae: mae(p, g)?, f, max_e, mean_e, s_measure: s_measure(p, g)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    #[serde(rename = "maxF")]
    pub max_f: f64,
    #[serde(rename = "meanF")]
    pub mean_f: f64,
    #[serde(rename = "maxE")]
    pub max_e: f64,
    #[serde(rename = "meanE")]
    pub mean_e: f64,
    pub s_measure: f64,
    pub n_images: usize,
}

impl MetricsReport {
    pub fn aggregate(per_image: &[ImageMetrics]) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Config("cannot evaluate an empty dataset".into()));
        }
        let n = per_image.len() as f64;
        let avg = |f: &dyn Fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let fs: Vec<(f64, f64)> = per_image.iter().filter_map(|m| m.f).collect();
        let nf = fs.len().max(1) as f64;
        Ok(Self {
            mae: avg(&|m| m.mae),
            max_f: fs.iter().map(|f| f.0).sum::<f64>() / nf,
            mean_f: fs.iter().map(|f| f.1).sum::<f64>() / nf,
            max_e: avg(&|m| m.max_e),
            mean_e: avg(&|m| m.mean_e),
            s_measure: avg(&|m| m.s_measure),
            n_images: per_image.len(),
        })
    }

    /// The six scores in the order mae, maxF, meanF, maxE, meanE, S.
    pub fn scores(&self) -> [f64; 6] {
        [self.mae, self.max_f, self.mean_f, self.max_e, self.mean_e, self.s_measure]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

pub fn evaluate_pairs(pairs: &[(Plane, Plane)]) -> Result<MetricsReport> {
    let per: Vec<ImageMetrics> = pairs.iter().map(|(p, g)| image_metrics(p, g)).collect::<Result<_>>()?;
    MetricsReport::aggregate(&per)
}
