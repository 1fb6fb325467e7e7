//! Brute-force oracles for the integration tests. Written against the
//! metric and layer definitions directly; nothing is shared with the crate.
#![allow(dead_code)]

use panosal::tokenizer::SoftSplitSpec;

/// Window starts along one axis, in padded coordinates shifted back by the padding.
fn window_starts(len: usize, spec: SoftSplitSpec) -> Vec<i64> {
    let (k, p) = (spec.kernel as i64, spec.padding as i64);
    let stride = (spec.kernel - spec.overlap) as i64;
    (0..)
        .map(|i| i * stride - p)
        .take_while(|&s| s + k <= len as i64 + p)
        .collect()
}

/// Windows covering each index of one axis.
fn axis_cover(len: usize, spec: SoftSplitSpec) -> Vec<usize> {
    let mut cover = vec![0; len];
    for s in window_starts(len, spec) {
        for i in s..s + spec.kernel as i64 {
            if (0..len as i64).contains(&i) {
                cover[i as usize] += 1;
            }
        }
    }
    cover
}

/// Overlap count of a 2-D soft split; the window grid is a product of the axis grids.
pub fn overlap_count(h: usize, w: usize, spec: SoftSplitSpec) -> Vec<f64> {
    let (rows, cols) = (axis_cover(h, spec), axis_cover(w, spec));
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r * c) as f64)).collect()
}

/// Stride-1, zero-padded ("same") cross-correlation of `[cin, h, w]` with an odd `k × k` kernel.
pub fn conv_same(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let cout = bias.len();
    let half = (k / 2) as i64;
    let at = |c: usize, r: i64, q: i64| -> f64 {
        if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
            0.0
        } else {
            x[c * h * w + r as usize * w + q as usize]
        }
    };
    let mut out = Vec::with_capacity(cout * h * w);
    for o in 0..cout {
        for r in 0..h as i64 {
            for q in 0..w as i64 {
                let mut acc = bias[o];
                for c in 0..cin {
                    for i in 0..k {
                        for j in 0..k {
                            let wv = weight[o * cin * k * k + c * k * k + i * k + j];
                            acc += wv * at(c, r + i as i64 - half, q + j as i64 - half);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn mae(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

fn confusion(p: &[f64], g: &[f64], t: f64) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&pv, &gv) in p.iter().zip(g) {
        match (pv > t, gv > 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    (tp, fp, fn_, tn)
}

fn max_and_mean(v: &[f64]) -> (f64, f64) {
    (v.iter().cloned().fold(f64::NEG_INFINITY, f64::max), v.iter().sum::<f64>() / v.len() as f64)
}

/// `(maxF, meanF)` over the thresholds `k/255`, `k = 0..255`, with β² = 0.3.
pub fn f_measure(p: &[f64], g: &[f64]) -> (f64, f64) {
    let scores: Vec<f64> = (0..255)
        .map(|k| {
            let (tp, fp, fn_, _) = confusion(p, g, k as f64 / 255.0);
            let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let recall = tp / (tp + fn_);
            if precision + recall == 0.0 {
                0.0
            } else {
                1.3 * precision * recall / (0.3 * precision + recall)
            }
        })
        .collect();
    max_and_mean(&scores)
}

/// `(maxE, meanE)`: mean of `(1 + ξ)² / 4` over pixels, `ξ` the alignment of the
/// mean-centred binary prediction and ground truth.
pub fn e_measure(p: &[f64], g: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let fg = g.iter().filter(|&&v| v > 0.5).count() as f64;
    let scores: Vec<f64> = (0..255)
        .map(|k| {
            let t = k as f64 / 255.0;
            let (tp, fp, _, tn) = confusion(p, g, t);
            if fg == 0.0 {
                return tn / n;
            }
            if fg == n {
                return tp / n;
            }
            let mp = (tp + fp) / n;
            let mg = fg / n;
            p.iter()
                .zip(g)
                .map(|(&pv, &gv)| {
                    let a = if pv > t { 1.0 } else { 0.0 } - mp;
                    let b = gv - mg;
                    let xi = 2.0 * a * b / (a * a + b * b);
                    (1.0 + xi) * (1.0 + xi) / 4.0
                })
                .sum::<f64>()
                / n
        })
        .collect();
    max_and_mean(&scores)
}

fn stats(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (stats(a).0, stats(b).0);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let ((mx, vx), (my, vy)) = (stats(p), stats(g));
    let num = 4.0 * mx * my * covariance(p, g);
    let den = (mx * mx + my * my) * (vx + vy);
    if num != 0.0 {
        num / (den + f64::EPSILON)
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure with α = 0.5: object-aware plus region-aware similarity.
pub fn s_measure(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let n = p.len() as f64;
    let u = g.iter().sum::<f64>() / n;
    let pm = p.iter().sum::<f64>() / n;
    if u == 0.0 {
        return 1.0 - pm;
    }
    if u == 1.0 {
        return pm;
    }
    let score = |v: Vec<f64>| {
        let (m, var) = stats(&v);
        2.0 * m / (m * m + 1.0 + var.sqrt() + f64::EPSILON)
    };
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &gv)| gv == 1.0).map(|(&pv, _)| pv).collect();
    let bg: Vec<f64> = p.iter().zip(g).filter(|(_, &gv)| gv == 0.0).map(|(&pv, _)| 1.0 - pv).collect();
    let object = u * score(fg) + (1.0 - u) * score(bg);

    let (mut cy, mut cx, mut count) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if g[i] == 1.0 {
            cy += (i / w) as f64;
            cx += (i % w) as f64;
            count += 1.0;
        }
    }
    let x = ((cx / count).round_ties_even() as usize + 1).min(w);
    let y = ((cy / count).round_ties_even() as usize + 1).min(h);
    let mut region = 0.0;
    for (rows, cols) in [(0..y, 0..x), (0..y, x..w), (y..h, 0..x), (y..h, x..w)] {
        let idx: Vec<usize> = rows.clone().flat_map(|r| cols.clone().map(move |c| r * w + c)).collect();
        if idx.is_empty() {
            continue;
        }
        let pb: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let gb: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        region += idx.len() as f64 / n * region_ssim(&pb, &gb);
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Binary cross-entropy averaged over pixels.
pub fn bce(p: &[f64], g: &[f64]) -> f64 {
    -p.iter().zip(g).map(|(&pv, &gv)| gv * pv.ln() + (1.0 - gv) * (1.0 - pv).ln()).sum::<f64>() / p.len() as f64
}
