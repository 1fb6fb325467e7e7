//! Slow, literal implementations used as oracles by the test suite and the
//! `selfcheck` command. Nothing here shares code with the optimized paths.

use crate::tokenizer::SoftSplitSpec;

/// Number of soft-split windows covering each pixel of an `h × w` map, by enumeration.
pub fn overlap_count(h: usize, w: usize, spec: SoftSplitSpec) -> Vec<usize> {
    let (k, p, s) = (spec.kernel as i64, spec.padding as i64, (spec.kernel - spec.overlap) as i64);
    let mut counts = vec![0usize; h * w];
    let mut top = -p;
    while top + k <= h as i64 + p {
        let mut left = -p;
        while left + k <= w as i64 + p {
            for r in top..top + k {
                for c in left..left + k {
                    if r >= 0 && c >= 0 && r < h as i64 && c < w as i64 {
                        counts[r as usize * w + c as usize] += 1;
                    }
                }
            }
            left += s;
        }
        top += s;
    }
    counts
}

/// Direct zero-padded cross-correlation. `x` is `[C_in, H, W]`, `weight`
/// `[C_out, C_in, k, k]`; returns `[C_out, H_out, W_out]` and the output size.
pub fn conv2d(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    spec: SoftSplitSpec,
) -> (Vec<f64>, usize, usize) {
    let k = spec.kernel;
    let s = k - spec.overlap;
    let p = spec.padding as i64;
    let oh = (h + 2 * spec.padding - k) / s + 1;
    let ow = (w + 2 * spec.padding - k) / s + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for ci in 0..cin {
                    for i in 0..k {
                        for j in 0..k {
                            let r = (oy * s + i) as i64 - p;
                            let c = (ox * s + j) as i64 - p;
                            if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                                continue;
                            }
                            acc += weight[((o * cin + ci) * k + i) * k + j] * x[(ci * h + r as usize) * w + c as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn mae(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).abs();
    }
    s / p.len() as f64
}

fn binarize(p: &[f64], k: usize) -> Vec<f64> {
    let t = k as f64 / 255.0;
    p.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect()
}

/// `(maxF, meanF)` by counting at each threshold.
pub fn f_measure(p: &[f64], g: &[f64]) -> (f64, f64) {
    let mut fs = Vec::new();
    for k in 0..255 {
        let b = binarize(p, k);
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            match (b[i] == 1.0, g[i] == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let den = 0.3 * prec + rec;
        fs.push(if den > 0.0 { 1.3 * prec * rec / den } else { 0.0 });
    }
    let max = fs.iter().cloned().fold(f64::MIN, f64::max);
    (max, fs.iter().sum::<f64>() / 255.0)
}

/// `(maxE, meanE)` from the per-pixel enhanced-alignment matrix.
pub fn e_measure(p: &[f64], g: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let gm = g.iter().sum::<f64>() / n;
    let mut es = Vec::new();
    for k in 0..255 {
        let b = binarize(p, k);
        let score = if gm == 0.0 {
            b.iter().map(|v| 1.0 - v).sum::<f64>() / n
        } else if gm == 1.0 {
            b.iter().sum::<f64>() / n
        } else {
            let bm = b.iter().sum::<f64>() / n;
            let mut s = 0.0;
            for i in 0..p.len() {
                let ap = b[i] - bm;
                let ag = g[i] - gm;
                let phi = 2.0 * ap * ag / (ap * ap + ag * ag);
                s += (phi + 1.0).powi(2) / 4.0;
            }
            s / n
        };
        es.push(score);
    }
    let max = es.iter().cloned().fold(f64::MIN, f64::max);
    (max, es.iter().sum::<f64>() / 255.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if p.len() > 1 {
        for i in 0..p.len() {
            sx += (p[i] - x).powi(2) / (n - 1.0);
            sy += (g[i] - y).powi(2) / (n - 1.0);
            sxy += (p[i] - x) * (g[i] - y) / (n - 1.0);
        }
    }
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let y = mean(g);
    if y == 0.0 {
        return 1.0 - mean(p);
    }
    if y == 1.0 {
        return mean(p);
    }
    let fg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 1.0).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 0.0).map(|i| 1.0 - p[i]).collect();
    let obj = |v: &[f64]| {
        let x = mean(v);
        2.0 * x / (x * x + 1.0 + std1(v) + f64::EPSILON)
    };
    let s_obj = y * obj(&fg) + (1.0 - y) * obj(&bg);

    let coords: Vec<(f64, f64)> = (0..p.len()).filter(|&i| g[i] == 1.0).map(|i| ((i / w) as f64, (i % w) as f64)).collect();
    let cy = coords.iter().map(|c| c.0).sum::<f64>() / coords.len() as f64;
    let cx = coords.iter().map(|c| c.1).sum::<f64>() / coords.len() as f64;
    let sx = ((cx.round_ties_even() as usize) + 1).min(w);
    let sy = ((cy.round_ties_even() as usize) + 1).min(h);
    let mut s_reg = 0.0;
    for (r0, r1, c0, c1) in [(0, sy, 0, sx), (0, sy, sx, w), (sy, h, 0, sx), (sy, h, sx, w)] {
        let mut pb = Vec::new();
        let mut gb = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pb.push(p[r * w + c]);
                gb.push(g[r * w + c]);
            }
        }
        if pb.is_empty() {
            continue;
        }
        s_reg += pb.len() as f64 / (h * w) as f64 * ssim(&pb, &gb);
    }
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}
