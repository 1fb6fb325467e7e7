//! Samples, dataset loading, augmentation, edge targets and synthetic panoramas.
//!
//! Dataset layout: `<root>/images/<id>.(png|jpg|jpeg)` and `<root>/masks/<id>.png`.
//! Masks are binarized at 128/255.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Limits, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{precondition, shape_err, Error, Result};
use crate::geometry::latitude;
use crate::tensor::Tensor;

pub const MASK_THRESHOLD: u8 = 128;
/// Largest side accepted by the decoders.
pub const MAX_SIDE: u32 = 8192;

/// `image` is `[3, H, W]` in `[0, 1]`; `mask` and `edge` are `[1, H, W]` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub edge: Tensor<f32>,
}

impl Sample {
    /// Builds a sample from an image and a binary mask; the edge map is derived.
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = image.dims3("sample").map_err(|e| sample_err(&id, e))?;
        let (mc, mh, mw) = mask.dims3("sample").map_err(|e| sample_err(&id, e))?;
        if c != 3 || mc != 1 || (h, w) != (mh, mw) {
            return Err(Error::Sample {
                id,
                detail: format!("image {c}x{h}x{w} and mask {mc}x{mh}x{mw} do not match"),
            });
        }
        let edge = edge_from_mask(&mask).map_err(|e| sample_err(&id, e))?;
        Ok(Self { id, image, mask, edge })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn coverage(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }
}

fn sample_err(id: &str, e: Error) -> Error {
    Error::Sample { id: id.to_string(), detail: e.to_string() }
}

fn limits() -> Limits {
    let mut l = Limits::default();
    l.max_image_width = Some(MAX_SIDE);
    l.max_image_height = Some(MAX_SIDE);
    l.max_alloc = Some(256 << 20);
    l
}

fn decode(bytes: &[u8]) -> Result<image::DynamicImage> {
    let mut reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    reader.limits(limits());
    Ok(reader.decode()?)
}

/// Decodes PNG or JPEG bytes into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let rgb = decode(bytes)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|i| raw[(i % (h * w)) * 3 + i / (h * w)] as f32 / 255.0).collect())
}

/// Decodes a grayscale mask into a binary `[1, H, W]` tensor.
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor<f32>> {
    let g = decode(bytes)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Tensor::new(&[1, h, w], g.as_raw().iter().map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect())
}

/// `edge = mask AND NOT erode(mask)`, 3×3 structuring element, zero padding.
pub fn edge_from_mask(mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = mask.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(shape_err("edge_from_mask", format!("{s:?} is not a single map")));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(precondition("edge_from_mask", "mask must be binary"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let m = mask.data();
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m[r as usize * w + c as usize] == 1.0;
    Ok(Tensor::from_fn(s, |i| {
        if m[i] == 0.0 {
            return 0.0;
        }
        let (r, c) = ((i / w) as i64, (i % w) as i64);
        let interior = (-1..=1).all(|dr| (-1..=1).all(|dc| at(r + dr, c + dc)));
        if interior {
            0.0
        } else {
            1.0
        }
    }))
}

fn list_stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Dataset { path: dir.to_path_buf(), detail: e.to_string() })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
        if let (Some(ext), Some(stem)) = (ext, stem) {
            if exts.contains(&ext.as_str()) {
                if let Some(prev) = out.insert(stem.clone(), path.clone()) {
                    return Err(Error::Sample {
                        id: stem,
                        detail: format!("both {} and {} exist", prev.display(), path.display()),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn load_sample(id: &str, image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Sample { id: id.into(), detail: format!("{}: {e}", p.display()) });
    let image = decode_image(&read(image_path)?).map_err(|e| sample_err(id, e))?;
    let mask = decode_mask(&read(mask_path)?).map_err(|e| sample_err(id, e))?;
    Sample::new(id, image, mask)
}

/// Loads every image/mask pair under `root`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let (images, masks) = dataset_pairs(root)?;
    images.iter().map(|(id, ip)| load_sample(id, ip, &masks[id])).collect()
}

type Pairs = (BTreeMap<String, PathBuf>, BTreeMap<String, PathBuf>);

/// Matched `(images, masks)` paths; errors name the first unmatched id.
pub fn dataset_pairs(root: &Path) -> Result<Pairs> {
    let img_dir = root.join("images");
    let mask_dir = root.join("masks");
    for d in [&img_dir, &mask_dir] {
        if !d.is_dir() {
            return Err(Error::Dataset { path: d.clone(), detail: "directory not found".into() });
        }
    }
    let images = list_stems(&img_dir, &["png", "jpg", "jpeg"])?;
    let masks = list_stems(&mask_dir, &["png"])?;
    if images.is_empty() {
        return Err(Error::Dataset { path: img_dir, detail: "no images".into() });
    }
    if let Some(id) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::Sample { id: id.clone(), detail: format!("no mask in {}", mask_dir.display()) });
    }
    if let Some(id) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Sample { id: id.clone(), detail: format!("no image in {}", img_dir.display()) });
    }
    Ok((images, masks))
}

// ----------------------------------------------------------------------
// Image writing
// ----------------------------------------------------------------------

pub fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an RGB PNG.
pub fn save_rgb_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.dims3("save_rgb_png")?;
    if c != 3 {
        return Err(shape_err("save_rgb_png", format!("{c} channels")));
    }
    let d = image.data();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| to_u8(d[ch * h * w + i] as f64)))
    });
    buf.save(path)?;
    Ok(())
}

/// Writes an `H × W` map in `[0, 1]` as an 8-bit grayscale PNG (`round(255·v)`).
pub fn save_gray_png(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(shape_err("save_gray_png", format!("{} values for {h}x{w}", values.len())));
    }
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(values[y as usize * w + x as usize])]));
    buf.save(path)?;
    Ok(())
}

/// Writes a sample in the dataset layout under `root`.
pub fn save_sample(root: &Path, s: &Sample) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    save_rgb_png(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
    let m: Vec<f64> = s.mask.data().iter().map(|&v| v as f64).collect();
    save_gray_png(&root.join("masks").join(format!("{}.png", s.id)), &m, s.height(), s.width())
}

// ----------------------------------------------------------------------
// Resizing and augmentation
// ----------------------------------------------------------------------

/// Bilinear resize of `[C, H, W]` with half-pixel centers and edge clamping.
pub fn resize_bilinear(x: &Tensor<f32>, nh: usize, nw: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = x.dims3("resize_bilinear")?;
    if (h, w) == (nh, nw) {
        return Ok(x.clone());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(nh, h);
    let xs = axis(nw, w);
    let d = x.data();
    Ok(Tensor::from_fn(&[c, nh, nw], |i| {
        let ch = i / (nh * nw);
        let (y0, y1, ly) = ys[(i / nw) % nh];
        let (x0, x1, lx) = xs[i % nw];
        let p = |r: usize, q: usize| d[(ch * h + r) * w + q];
        let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
        let bot = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
        top * (1.0 - ly) + bot * ly
    }))
}

/// Nearest-neighbor resize of `[C, H, W]`; preserves binary values.
pub fn resize_nearest(x: &Tensor<f32>, nh: usize, nw: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = x.dims3("resize_nearest")?;
    let d = x.data();
    let src = |o: usize, n_out: usize, n_in: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Ok(Tensor::from_fn(&[c, nh, nw], |i| {
        let ch = i / (nh * nw);
        let r = src((i / nw) % nh, nh, h);
        let q = src(i % nw, nw, w);
        d[(ch * h + r) * w + q]
    }))
}

pub fn crop(x: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = x.dims3("crop")?;
    if top + ch > h || left + cw > w {
        return Err(precondition("crop", format!("{ch}x{cw} at ({top}, {left}) exceeds {h}x{w}")));
    }
    let d = x.data();
    Ok(Tensor::from_fn(&[c, ch, cw], |i| {
        let k = i / (ch * cw);
        d[(k * h + top + (i / cw) % ch) * w + left + i % cw]
    }))
}

pub fn hflip(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = x.dims3("hflip")?;
    let d = x.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let row = i / w;
        d[row * w + (w - 1 - i % w)]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub resize_to: (usize, usize),
    pub crop_to: (usize, usize),
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, resize_to: (256, 512), crop_to: (224, 448), hflip_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ((rh, rw), (ch, cw)) = (self.resize_to, self.crop_to);
        if ch == 0 || cw == 0 || ch > rh || cw > rw {
            return Err(Error::Config(format!("crop {ch}x{cw} does not fit inside resize {rh}x{rw}")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

/// Geometry of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let top = rng.random_range(0..=cfg.resize_to.0 - cfg.crop_to.0);
        let left = rng.random_range(0..=cfg.resize_to.1 - cfg.crop_to.1);
        let flip = rng.random_bool(cfg.hflip_prob);
        Self { top, left, flip }
    }
}

/// Resize, crop and flip; the edge map is recomputed from the transformed mask.
pub fn augment_with(s: &Sample, cfg: &AugmentConfig, draw: AugmentDraw) -> Result<Sample> {
    let (rh, rw) = cfg.resize_to;
    let (ch, cw) = cfg.crop_to;
    let mut image = crop(&resize_bilinear(&s.image, rh, rw)?, draw.top, draw.left, ch, cw)?;
    let mut mask = crop(&resize_nearest(&s.mask, rh, rw)?, draw.top, draw.left, ch, cw)?;
    if draw.flip {
        image = hflip(&image)?;
        mask = hflip(&mask)?;
    }
    Sample::new(s.id.clone(), image, mask)
}

pub fn augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    augment_with(s, cfg, AugmentDraw::sample(cfg, rng))
}

/// Brings a sample to the model resolution without randomness.
pub fn fit_to(s: &Sample, h: usize, w: usize) -> Result<Sample> {
    if (s.height(), s.width()) == (h, w) {
        return Ok(s.clone());
    }
    Sample::new(s.id.clone(), resize_bilinear(&s.image, h, w)?, resize_nearest(&s.mask, h, w)?)
}

/// Stacks samples into `([B,3,H,W], [B,1,H,W], [B,1,H,W])`.
pub fn collate(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let stack = |f: &dyn Fn(&Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = samples
            .iter()
            .map(|s| {
                let t = f(s);
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                t.clone().reshape(&shape)
            })
            .collect::<Result<_>>()?;
        Tensor::stack_batch(&items)
    };
    Ok((stack(&|s| &s.image)?, stack(&|s| &s.mask)?, stack(&|s| &s.edge)?))
}

// ----------------------------------------------------------------------
// Synthetic panoramas
// ----------------------------------------------------------------------

pub const SYNTH_MIN_COVERAGE: f64 = 0.02;
pub const SYNTH_MAX_COVERAGE: f64 = 0.6;
/// Probability that an object center lies in the central half of the rows.
pub const SYNTH_CENTRAL_PROB: f64 = 0.85;
const SYNTH_STREAM: u64 = 0x005E_ED0F_5A11_E0C7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    /// Star-shaped polygon with the given vertex count.
    Polygon(usize),
}

/// One placed object in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthObject {
    pub kind: ShapeKind,
    /// Center row and column in pixels.
    pub center: (f64, f64),
    /// Half extents in pixels, horizontal one already stretched.
    pub half: (f64, f64),
    /// Polygon vertex radii (unit scale) at evenly spaced angles.
    pub radii: Vec<f64>,
    pub phase: f64,
    pub color: [f64; 3],
}

impl SynthObject {
    /// Membership test with horizontal wrap-around at the seam.
    pub fn contains(&self, r: f64, c: f64, width: usize) -> bool {
        let w = width as f64;
        let mut dx = c - self.center.1;
        dx -= (dx / w).round() * w;
        let u = dx / self.half.1;
        let v = (r - self.center.0) / self.half.0;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Polygon(n) => {
                let rad = (u * u + v * v).sqrt();
                if rad == 0.0 {
                    return true;
                }
                let ang = (v.atan2(u) - self.phase).rem_euclid(std::f64::consts::TAU);
                let step = std::f64::consts::TAU / n as f64;
                let i = ((ang / step) as usize).min(n - 1);
                let t = ang / step - i as f64;
                // the edge between consecutive vertices, intersected with the ray
                let (a, b) = (self.radii[i], self.radii[(i + 1) % n]);
                let (pa, pb) = ((i as f64) * step, (i as f64 + 1.0) * step);
                let (ax, ay) = (a * pa.cos(), a * pa.sin());
                let (bx, by) = (b * pb.cos(), b * pb.sin());
                let th = pa + t * step;
                let (dx, dy) = (th.cos(), th.sin());
                let (ex, ey) = (bx - ax, by - ay);
                let den = dx * ey - dy * ex;
                let boundary = if den.abs() < 1e-12 { a.min(b) } else { (ax * ey - ay * ex) / den };
                rad <= boundary
            }
        }
    }
}

/// Row of an object center: the central half of the rows with probability [`SYNTH_CENTRAL_PROB`].
fn draw_center_row<R: Rng>(rng: &mut R, h: usize) -> f64 {
    let hf = h as f64;
    if rng.random_bool(SYNTH_CENTRAL_PROB) {
        rng.random_range(0.25 * hf..0.75 * hf)
    } else if rng.random_bool(0.5) {
        rng.random_range(0.0..0.25 * hf)
    } else {
        rng.random_range(0.75 * hf..hf)
    }
}

/// Horizontal stretch of an object centered at row `r`.
pub fn pole_stretch(r: f64, h: usize) -> f64 {
    1.0 / latitude(r, h).cos().max(0.2)
}

fn draw_objects<R: Rng>(rng: &mut R, h: usize, w: usize, n: usize) -> Vec<SynthObject> {
    let hf = h as f64;
    (0..n)
        .map(|_| {
            let cr = draw_center_row(rng, h);
            let cc = rng.random_range(0.0..w as f64);
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Polygon(rng.random_range(5..=8)),
            };
            let hy = rng.random_range(0.08..0.22) * hf;
            let hx = rng.random_range(0.08..0.22) * hf * pole_stretch(cr, h);
            let nv = if let ShapeKind::Polygon(k) = kind { k } else { 0 };
            let radii = (0..nv).map(|_| rng.random_range(0.6..1.0)).collect();
            let color = random_color(rng);
            SynthObject {
                kind,
                center: (cr, cc),
                half: (hy, hx),
                radii,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                color,
            }
        })
        .collect()
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn rasterize(objects: &[SynthObject], h: usize, w: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            for (k, o) in objects.iter().enumerate() {
                if o.contains(r as f64, c as f64, w) {
                    owner[r * w + c] = Some(k);
                }
            }
        }
    }
    owner
}

/// Synthetic panorama: `n_objects` shapes on a seamless textured background.
/// Object sizes are rescaled until the mask covers between 2% and 60% of the image.
pub fn synth_erp_sample(seed: u64, h: usize, w: usize, n_objects: usize) -> Result<Sample> {
    if h < 32 || w < 32 || n_objects == 0 {
        return Err(precondition("synth_erp_sample", format!("size {h}x{w} with {n_objects} objects")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SYNTH_STREAM);
    let mut objects = draw_objects(&mut rng, h, w, n_objects);
    let target_lo = SYNTH_MIN_COVERAGE * 1.5;
    let target_hi = SYNTH_MAX_COVERAGE * 0.9;
    let mut owner = rasterize(&objects, h, w);
    for _ in 0..40 {
        let cov = owner.iter().filter(|o| o.is_some()).count() as f64 / (h * w) as f64;
        let factor = if cov < SYNTH_MIN_COVERAGE {
            (target_lo / cov.max(1e-4)).sqrt().min(2.0)
        } else if cov > SYNTH_MAX_COVERAGE {
            (target_hi / cov).sqrt()
        } else {
            break;
        };
        for o in &mut objects {
            o.half.0 *= factor;
            o.half.1 = (o.half.1 * factor).min(w as f64 / 2.0);
        }
        owner = rasterize(&objects, h, w);
    }

    let bg = random_color(&mut rng);
    let obj_shift: Vec<[f64; 3]> = objects
        .iter()
        .map(|o| {
            // keep objects separable from the background
            let mut c = o.color;
            let dist: f64 = (0..3).map(|i| (c[i] - bg[i]).abs()).sum();
            if dist < 0.6 {
                for (ci, bi) in c.iter_mut().zip(&bg) {
                    *ci = if *bi > 0.5 { (*bi - 0.45).max(0.0) } else { (*bi + 0.45).min(1.0) };
                }
            }
            c
        })
        .collect();
    let fx = [rng.random_range(1..5) as f64, rng.random_range(2..9) as f64];
    let fy = [rng.random_range(1.0..4.0), rng.random_range(3.0..9.0)];
    let ph: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let tau = std::f64::consts::TAU;
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            // integer horizontal frequencies make the texture periodic across the seam
            let tex = 0.08 * (tau * fx[0] * x + tau * fy[0] * y + ph[0]).sin()
                + 0.05 * (tau * fx[1] * x + ph[1]).sin() * (tau * fy[1] * y + ph[2]).cos();
            let i = r * w + c;
            let (base, t) = match owner[i] {
                Some(k) => {
                    mask[i] = 1.0;
                    (obj_shift[k], 0.04 * (tau * 3.0 * (fx[0] * x + y) + ph[3]).sin())
                }
                None => (bg, tex),
            };
            for ch in 0..3 {
                image[ch * h * w + i] = (base[ch] + t).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample::new(format!("synth_{seed:06}"), Tensor::new(&[3, h, w], image)?, Tensor::new(&[1, h, w], mask)?)
}

/// Object count used for the `i`-th sample of a synthetic dataset.
pub fn synth_object_count(seed: u64) -> usize {
    1 + (crate::params::fnv1a(&seed.to_le_bytes()) % 3) as usize
}

/// Object centers that [`synth_erp_sample`] would place, before coverage rescaling.
pub fn synth_object_centers(seed: u64, h: usize, w: usize, n_objects: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SYNTH_STREAM);
    draw_objects(&mut rng, h, w, n_objects).into_iter().map(|o| o.center).collect()
}

pub fn synth_dataset(n: usize, seed: u64, h: usize, w: usize) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
            let mut sample = synth_erp_sample(s, h, w, synth_object_count(s))?;
            sample.id = format!("synth_{i:05}");
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_examples() {
        let zero = Tensor::<f32>::zeros(&[1, 4, 4]);
        assert!(edge_from_mask(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = Tensor::<f32>::ones(&[1, 3, 3]);
        let e = edge_from_mask(&ones).unwrap();
        assert_eq!(e.data(), &[1., 1., 1., 1., 0., 1., 1., 1., 1.]);
        let mut dot = Tensor::<f32>::zeros(&[1, 3, 3]);
        dot.data_mut()[4] = 1.0;
        assert_eq!(edge_from_mask(&dot).unwrap(), dot);
        let bad = Tensor::<f32>::full(&[1, 2, 2], 0.5);
        assert!(edge_from_mask(&bad).is_err());
    }

    #[test]
    fn hflip_is_an_involution_and_augment_has_crop_size() {
        let s = synth_erp_sample(3, 64, 128, 2).unwrap();
        assert_eq!(hflip(&hflip(&s.image).unwrap()).unwrap(), s.image);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..4 {
            let d = AugmentDraw::sample(&cfg, &mut rng);
            assert!(d.top <= 32 && d.left <= 64);
            let a = augment_with(&s, &cfg, d).unwrap();
            assert_eq!((a.height(), a.width()), (224, 448));
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn synth_is_deterministic_and_covered() {
        let a = synth_erp_sample(11, 64, 128, 2).unwrap();
        assert_eq!(a, synth_erp_sample(11, 64, 128, 2).unwrap());
        assert!((SYNTH_MIN_COVERAGE..=SYNTH_MAX_COVERAGE).contains(&a.coverage()));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn png_round_trip_keeps_mask_binary() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_erp_sample(5, 32, 64, 1).unwrap();
        save_sample(dir.path(), &s).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].mask, s.mask);
        assert!(back[0].image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-6);
    }
}
