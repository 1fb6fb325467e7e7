//! Optimization loop: step schedule, Adam, deterministic batching, logging.
//!
//! All randomness of step `t` (batch order, augmentation, dropout) is derived
//! from `(seed, t)`, so a run resumed from a checkpoint at step `t` replays the
//! uninterrupted run exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{augment, collate, fit_to, resize_bilinear, AugmentConfig, Sample};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{self, MetricsReport, Plane};
use crate::model::Model;
use crate::objectives::total_loss_graph;
use crate::params::{fnv1a, Ctx, Mode, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Global L2 norm cap on the gradient; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            total_steps: 70_000,
            base_lr: 1e-4,
            decay_steps: vec![45_000, 60_000],
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 5_000,
            log_every: 100,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay_steps {:?} must be strictly increasing", self.decay_steps));
        }
        if self.decay_steps.last().is_some_and(|&s| s >= self.total_steps) {
            return bad(format!("decay_steps {:?} must be below total_steps {}", self.decay_steps, self.total_steps));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// Rounds to 12 significant digits, so a decayed rate is the decimal a user would write.
fn round_sig(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// `base_lr · decay_factor^n` where `n` counts the decay steps `≤ step`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.decay_steps.iter().filter(|&&s| s <= step).count();
    round_sig(cfg.base_lr * cfg.decay_factor.powi(n as i32))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }
}

/// Bias-corrected Adam step number `t ≥ 1`, in place. Arithmetic is carried out in `f64`.
pub fn adam_update<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(shape_err(
            "adam_update",
            format!("param {:?}, grad {:?}, moments {:?}/{:?}", param.shape(), grad.shape(), m.shape(), v.shape()),
        ));
    }
    if t == 0 {
        return Err(crate::error::precondition("adam_update", "step count starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let (pd, md, vd) = (param.data_mut(), m.data_mut(), v.data_mut());
    for (i, g) in grad.data().iter().enumerate() {
        let g = g.f64();
        let mi = cfg.beta1 * md[i].f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * vd[i].f64() + (1.0 - cfg.beta2) * g * g;
        md[i] = T::c(mi);
        vd[i] = T::c(vi);
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        pd[i] = T::c(pd[i].f64() - step);
    }
    Ok(())
}

/// One loss-log row; `step` is the 1-based count of completed updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_sal: f64,
    pub loss_edge: f64,
    pub loss_total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,loss_sal,loss_edge,loss_total,lr";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.step, r.loss_sal, r.loss_edge, r.loss_total, r.lr);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: usize,
    pub params: ParameterStore<f32>,
    pub adam_m: BTreeMap<String, Tensor<f32>>,
    pub adam_v: BTreeMap<String, Tensor<f32>>,
    pub history: Vec<LogRow>,
}

impl TrainState {
    pub fn new(params: ParameterStore<f32>) -> Self {
        let zeros = |p: &ParameterStore<f32>| p.params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { step: 0, adam_m: zeros(&params), adam_v: zeros(&params), params, history: Vec::new() }
    }
}

const STREAM_ORDER: u64 = 0x0BDE_5EED;
const STREAM_STEP: u64 = 0x57E9_5EED;

fn stream(seed: u64, tag: u64, i: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&tag.to_le_bytes());
    bytes[16..].copy_from_slice(&i.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
}

/// Dataset indices of the batch for 0-based step `step`: successive batches
/// walk a fresh permutation per epoch, so every sample is seen once per epoch.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let global = step * batch + j;
            let epoch = global / n;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream(seed, STREAM_ORDER, epoch as u64));
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[global % n]
        })
        .collect()
}

/// Where checkpoints and the loss log go.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Echo of the resolved run configuration stored in each checkpoint.
    pub config_echo: String,
}

impl TrainOutput {
    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    fn save(&self, state: &TrainState, path: &Path) -> Result<()> {
        Checkpoint::from_state(&self.config_echo, state).save(path)?;
        std::fs::write(self.log_path(), log_csv(&state.history))?;
        Ok(())
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Runs a single update at `state.step` and appends its log row.
pub fn train_step(
    model: &Model,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    data: &[Sample],
    state: &mut TrainState,
) -> Result<LogRow> {
    let step = state.step;
    let mut rng = stream(cfg.seed, STREAM_STEP, step as u64);
    let mc = model.config();
    let batch = batch_indices(cfg.seed, step, cfg.batch_size, data.len())
        .into_iter()
        .map(|i| if aug.enabled { augment(&data[i], aug, &mut rng) } else { fit_to(&data[i], mc.height, mc.width) })
        .collect::<Result<Vec<_>>>()?;
    let (img, mask, edge) = collate(&batch)?;
    let mut cx = Ctx::new(&state.params, Mode::Train, true).with_dropout_seed(rng.random());
    let (sal, edge_logits) = model.forward_graph(&mut cx, &img)?;
    let gs = cx.graph.constant(mask);
    let ge = cx.graph.constant(edge);
    let (total, ls, le) = total_loss_graph(&mut cx.graph, sal, edge_logits, gs, ge)?;
    let lr = lr_at_step(step, cfg);
    let row = LogRow {
        step: step + 1,
        loss_sal: cx.graph.value(ls).item().f64(),
        loss_edge: cx.graph.value(le).item().f64(),
        loss_total: cx.graph.value(total).item().f64(),
        lr,
    };
    for (term, value) in [("loss_sal", row.loss_sal), ("loss_edge", row.loss_edge), ("loss_total", row.loss_total)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1, term, value });
        }
    }
    cx.graph.backward(total)?;
    let mut grads = cx.param_grads();
    let updates = std::mem::take(&mut cx.buffer_updates);
    drop(cx);

    if let Some((name, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient { step: step + 1, param: name.clone() });
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = global_norm(&grads);
        if norm > clip {
            let s = (clip / norm) as f32;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let adam = AdamConfig::from(cfg);
    for (name, g) in &grads {
        let p = state.params.get_mut(name)?;
        let m = state.adam_m.get_mut(name).ok_or_else(|| Error::MissingParameter(format!("adam_m/{name}")))?;
        let v = state.adam_v.get_mut(name).ok_or_else(|| Error::MissingParameter(format!("adam_v/{name}")))?;
        adam_update(p, g, m, v, step as u64 + 1, lr, &adam)?;
    }
    for (name, value) in updates {
        *state.params.buffer_mut(&name)? = value;
    }
    state.step += 1;
    state.history.push(row);
    Ok(row)
}

/// Trains until `cfg.total_steps` updates are done. `progress` sees each row
/// that falls on the `log_every` cadence.
pub fn train(
    model: &Model,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    data: &[Sample],
    mut state: TrainState,
    out: Option<&TrainOutput>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainState> {
    cfg.validate()?;
    if aug.enabled {
        aug.validate()?;
        let mc = model.config();
        if aug.crop_to != (mc.height, mc.width) {
            return Err(Error::Config(format!(
                "augmentation crop {:?} differs from model input {}x{}",
                aug.crop_to, mc.height, mc.width
            )));
        }
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if state.step > cfg.total_steps {
        return Err(Error::Config(format!("state is at step {} beyond total_steps {}", state.step, cfg.total_steps)));
    }
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
    }
    while state.step < cfg.total_steps {
        let row = train_step(model, cfg, aug, data, &mut state)?;
        if cfg.log_every > 0 && (row.step % cfg.log_every == 0 || row.step == cfg.total_steps) {
            progress(&row);
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && row.step % cfg.checkpoint_every == 0 {
                o.save(&state, &o.checkpoint_path(row.step))?;
            }
        }
    }
    if let Some(o) = out {
        o.save(&state, &o.final_path())?;
    }
    Ok(state)
}

/// Saliency probabilities `[H, W]` for one sample at its own resolution.
pub fn predict_saliency(model: &Model, store: &ParameterStore<f32>, s: &Sample) -> Result<Plane> {
    let mc = model.config();
    let img = resize_bilinear(&s.image, mc.height, mc.width)?;
    let img = img.reshape(&[1, 3, mc.height, mc.width])?;
    let sal = model.forward(store, &img)?.saliency().reshape(&[1, mc.height, mc.width])?;
    let sal = resize_bilinear(&sal, s.height(), s.width())?;
    Plane::new(sal.data().iter().map(|&v| v as f64).collect(), s.height(), s.width())
}

/// Per-image metrics averaged over `data`, predictions resized to each mask.
pub fn evaluate_dataset(model: &Model, store: &ParameterStore<f32>, data: &[Sample]) -> Result<MetricsReport> {
    let pairs = data
        .iter()
        .map(|s| {
            let p = predict_saliency(model, store, s)?;
            let g = Plane::from_tensor(&s.mask)?;
            Ok((p, g))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_pairs(&pairs)
}
