//! Named invariant, gradient and oracle checks run by `panosal selfcheck`.
//!
//! Each check returns a one-line detail on success or a failure reason.
//! [`Faults`] swaps a metric for a deliberately wrong variant so the suite
//! can be shown to catch it.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::attention_weights;
use crate::checkpoint::Checkpoint;
use crate::data::{augment_with, edge_from_mask, synth_erp_sample, AugmentConfig, AugmentDraw};
use crate::distortion::DistortionMapping;
use crate::error::{Error, Result};
use crate::geometry::{erp_pixel_to_sphere, init_relation_matrix, PriorKind};
use crate::gradcheck::{check_gradients, random_tensor, relative_error, DEFAULT_STEP};
use crate::graph::Graph;
use crate::metrics::{self, evaluate_pairs, Plane};
use crate::model::{Model, ModelConfig};
use crate::objectives::{bce_grad, bce_loss, total_loss, total_loss_graph, BCE_EPS};
use crate::params::{Ctx, Mode, ParamRegistry, ParameterStore};
use crate::reference;
use crate::tensor::Tensor;
use crate::tokenizer::{
    map_to_tokens, out_length, soft_split, token_fold, tokens_to_map, FeatureMap, SoftSplitSpec,
};
use crate::trainer::{adam_update, lr_at_step, train, AdamConfig, TrainConfig, TrainState};

type Outcome = std::result::Result<String, String>;

/// Metric implementations that can be replaced by a wrong variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Fault {
    /// Mean squared instead of mean absolute error.
    Mae,
    /// β² = 1 instead of 0.3.
    FMeasure,
    /// Alignment mean divided by `N - 1`.
    EMeasure,
    /// Object/region weight 0.7 instead of 0.5.
    SMeasure,
}

impl FromStr for Fault {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(Fault::Mae),
            "f-measure" => Ok(Fault::FMeasure),
            "e-measure" => Ok(Fault::EMeasure),
            "s-measure" => Ok(Fault::SMeasure),
            _ => Err(Error::Config(format!("unknown fault `{s}` (mae, f-measure, e-measure, s-measure)"))),
        }
    }
}

pub type Faults = BTreeSet<Fault>;

struct MetricImpls {
    mae: fn(&Plane, &Plane) -> Result<f64>,
    f: fn(&Plane, &Plane) -> Result<(f64, f64)>,
    e: fn(&Plane, &Plane) -> Result<(f64, f64)>,
    s: fn(&Plane, &Plane) -> Result<f64>,
}

fn faulty_mae(p: &Plane, g: &Plane) -> Result<f64> {
    Ok(p.data.iter().zip(&g.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.data.len() as f64)
}

fn faulty_f(p: &Plane, g: &Plane) -> Result<(f64, f64)> {
    let curve: Vec<f64> = (0..metrics::N_THRESHOLDS)
        .map(|k| {
            let t = metrics::threshold(k);
            let (mut tp, mut pp) = (0.0, 0.0);
            for (a, b) in p.data.iter().zip(&g.data) {
                if *a > t {
                    pp += 1.0;
                    tp += b;
                }
            }
            let gp: f64 = g.data.iter().sum();
            let (pr, rc) = (if pp > 0.0 { tp / pp } else { 0.0 }, if gp > 0.0 { tp / gp } else { 0.0 });
            if pr + rc > 0.0 {
                2.0 * pr * rc / (pr + rc)
            } else {
                0.0
            }
        })
        .collect();
    Ok((curve.iter().cloned().fold(0.0, f64::max), curve.iter().sum::<f64>() / curve.len() as f64))
}

fn faulty_e(p: &Plane, g: &Plane) -> Result<(f64, f64)> {
    let n = p.data.len() as f64;
    let (mx, mean) = metrics::e_measure(p, g)?;
    Ok((mx * n / (n - 1.0), mean * n / (n - 1.0)))
}

fn faulty_s(p: &Plane, g: &Plane) -> Result<f64> {
    let gm = g.mean();
    if gm == 0.0 || gm == 1.0 {
        return metrics::s_measure(p, g);
    }
    Ok((0.7 * metrics::s_object(p, g) + 0.3 * metrics::s_region(p, g)).max(0.0))
}

impl MetricImpls {
    fn with(faults: &Faults) -> Self {
        Self {
            mae: if faults.contains(&Fault::Mae) { faulty_mae } else { metrics::mae },
            f: if faults.contains(&Fault::FMeasure) { faulty_f } else { metrics::f_measure },
            e: if faults.contains(&Fault::EMeasure) { faulty_e } else { metrics::e_measure },
            s: if faults.contains(&Fault::SMeasure) { faulty_s } else { metrics::s_measure },
        }
    }
}

pub struct Check {
    pub name: &'static str,
    run: fn(&Faults) -> Outcome,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

// ----------------------------------------------------------------------
// geometry
// ----------------------------------------------------------------------

fn geometry_cosine_formula(_: &Faults) -> Outcome {
    for (h, w) in [(224, 448), (64, 128), (7, 14)] {
        let rm = init_relation_matrix(h, w, PriorKind::Cosine).map_err(e2s)?;
        for r in 0..h {
            let want = ((r as f64 - h as f64 / 2.0) / h as f64 * std::f64::consts::PI).cos();
            for c in 0..w {
                let got = rm.get(r, c);
                ensure((got - want).abs() <= 1e-12, || format!("{h}x{w} at ({r},{c}): {got} vs {want}"))?;
            }
        }
    }
    Ok("cos((h - H/2)/H·π) to 1e-12".into())
}

fn geometry_prior_structure(_: &Faults) -> Outcome {
    let (h, w) = (64, 128);
    for kind in PriorKind::ALL {
        let rm = init_relation_matrix(h, w, kind).map_err(e2s)?;
        for r in 0..h {
            let row = rm.row(r);
            ensure(row.iter().all(|&v| v == row[0]), || format!("{kind} row {r} not constant"))?;
        }
        for r in 1..h {
            let (a, b) = (rm.get(r, 0), rm.get(h - r, 0));
            let ok = match kind {
                PriorKind::Cosine | PriorKind::Blank => (a - b).abs() < 1e-12,
                PriorKind::Sine => (a + b).abs() < 1e-12,
            };
            ensure(ok, || format!("{kind} rows {r} and {} break equator symmetry", h - r))?;
        }
    }
    let cos = init_relation_matrix(h, w, PriorKind::Cosine).map_err(e2s)?;
    let mid = h as f64 / 2.0;
    for a in 0..h {
        for b in 0..h {
            if (a as f64 - mid).abs() < (b as f64 - mid).abs() {
                ensure(cos.get(a, 0) > cos.get(b, 0), || format!("cosine not decreasing from row {a} to {b}"))?;
            }
        }
    }
    Ok("row-constant, equator-symmetric, cosine decreasing away from the equator".into())
}

fn geometry_sphere_ranges(_: &Faults) -> Outcome {
    let (h, w) = (16, 32);
    for r in 0..h {
        for c in 0..w {
            let s = erp_pixel_to_sphere(r, c, h, w).map_err(e2s)?;
            ensure(s.theta.abs() <= std::f64::consts::FRAC_PI_2 && s.phi.abs() <= std::f64::consts::PI, || {
                format!("({r},{c}) -> {s:?}")
            })?;
        }
    }
    ensure(erp_pixel_to_sphere(h, 0, h, w).is_err(), || "out-of-range row accepted".into())?;
    Ok("latitude in [-π/2, π/2], longitude in [-π, π]".into())
}

// ----------------------------------------------------------------------
// tokenizer
// ----------------------------------------------------------------------

fn tokenizer_stated_grids(_: &Faults) -> Outcome {
    let cfg = ModelConfig::default();
    let grids = cfg.grids().map_err(e2s)?;
    ensure(grids == [(56, 112), (28, 56), (14, 28)], || format!("{grids:?}"))?;
    let lens: Vec<usize> = grids.iter().map(|(a, b)| a * b).collect();
    ensure(lens == [6272, 1568, 392], || format!("{lens:?}"))?;
    for spec in cfg.t2t {
        ensure(out_length(spec.kernel - 1, spec).is_err() || spec.padding > 0, || "short input accepted".into())?;
    }
    Ok("l1 = 56×112, l2 = 28×56, l3 = 14×28".into())
}

fn random_spec(rng: &mut ChaCha8Rng) -> SoftSplitSpec {
    loop {
        let k = rng.random_range(1..=4);
        let o = rng.random_range(0..k);
        let p = rng.random_range(0..=k / 2);
        if let Ok(s) = SoftSplitSpec::new(k, o, p) {
            return s;
        }
    }
}

fn tokenizer_fold_oracle(_: &Faults) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut done = 0;
    while done < 100 {
        let spec = random_spec(&mut rng);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        if out_length(h, spec).is_err() || out_length(w, spec).is_err() {
            continue;
        }
        let c = rng.random_range(1..=3);
        let x = Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-1.0..1.0));
        let t = soft_split(&FeatureMap::new(x.clone()).map_err(e2s)?, spec).map_err(e2s)?;
        let y = token_fold(&t, spec, h, w).map_err(e2s)?;
        let counts = reference::overlap_count(h, w, spec);
        for (i, (&a, &b)) in y.data.data().iter().zip(x.data()).enumerate() {
            let want = b * counts[i % (h * w)] as f64;
            ensure((a - want).abs() <= 1e-6, || format!("{spec:?} {h}x{w}: {a} vs {want}"))?;
        }
        done += 1;
    }
    Ok("fold(split(x)) = x ⊙ overlap count on 100 random maps".into())
}

fn tokenizer_map_round_trip(_: &Faults) -> Outcome {
    let x = random_tensor(&[2, 3, 4, 5], 4, 1.0);
    let fm = FeatureMap::new(x).map_err(e2s)?;
    let back = tokens_to_map(&map_to_tokens(&fm).map_err(e2s)?).map_err(e2s)?;
    ensure(back == fm, || "tokens_to_map ∘ map_to_tokens is not the identity".into())?;
    Ok("tokens_to_map ∘ map_to_tokens = id".into())
}

// ----------------------------------------------------------------------
// attention and deformable convolution
// ----------------------------------------------------------------------

fn attention_softmax(_: &Faults) -> Outcome {
    let qkv = random_tensor(&[1, 9, 24], 3, 3.0);
    for (h, p) in attention_weights(&qkv, 2).map_err(e2s)?.iter().enumerate() {
        for (r, row) in p.data().chunks(9).enumerate() {
            let s: f64 = row.iter().sum();
            ensure((s - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0), || format!("head {h} row {r} sums to {s}"))?;
        }
    }
    Ok("rows non-negative and sum to 1".into())
}

fn attention_gradient(_: &Faults) -> Outcome {
    let r = check_gradients(
        |g, v| {
            let a = g.attention(v[0], 2)?;
            let y = g.mul(a, v[1])?;
            Ok(g.sum(y))
        },
        &[random_tensor(&[1, 5, 12], 5, 1.0), random_tensor(&[1, 5, 4], 6, 1.0)],
        DEFAULT_STEP,
        1e-4,
    )?;
    Ok(format!("{} coordinates, max error {:.1e}", r.checked, r.max_error))
}

fn deform_conv_graph(g: &mut Graph<f64>, x: crate::graph::Var, off: crate::graph::Var, w: crate::graph::Var, b: crate::graph::Var) -> Result<crate::graph::Var> {
    let t = g.deform_unfold(x, off, 3)?;
    let y = g.linear(t.var, w, Some(b))?;
    g.tokens_to_map(t.with_var(y))
}

fn deform_zero_offset_oracle(_: &Faults) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..50 {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::new(&[1, cin, h, w], x.clone()).map_err(e2s)?);
        let ov = g.constant(Tensor::zeros(&[1, 18, h, w]));
        let wv = g.constant(Tensor::new(&[cout, cin, 3, 3], wt.clone()).map_err(e2s)?);
        let bv = g.constant(Tensor::new(&[cout], bias.clone()).map_err(e2s)?);
        let y = deform_conv_graph(&mut g, xv, ov, wv, bv).map_err(e2s)?;
        let (want, ..) = reference::conv2d(&x, cin, h, w, &wt, &bias, cout, SoftSplitSpec::same(3));
        for (i, (a, b)) in g.value(y).data().iter().zip(&want).enumerate() {
            ensure((a - b).abs() <= 1e-6, || format!("case {case} element {i}: {a} vs {b}"))?;
        }
    }
    Ok("matches direct convolution on 50 random cases".into())
}

fn deform_gradient(_: &Faults) -> Outcome {
    let r = check_gradients(
        |g, v| {
            let y = deform_conv_graph(g, v[0], v[1], v[2], v[3])?;
            let y = g.mul(y, v[4])?;
            Ok(g.sum(y))
        },
        &[
            random_tensor(&[1, 2, 4, 4], 40, 1.0),
            random_tensor(&[1, 18, 4, 4], 41, 1.3),
            random_tensor(&[3, 2, 3, 3], 42, 1.0),
            random_tensor(&[3], 43, 1.0),
            random_tensor(&[1, 3, 4, 4], 44, 1.0),
        ],
        1e-6,
        1e-4,
    )?;
    Ok(format!("input, offsets, weight, bias: {} coordinates, max error {:.1e}", r.checked, r.max_error))
}

// ----------------------------------------------------------------------
// distortion mapping
// ----------------------------------------------------------------------

fn dm_setup(channels: usize) -> Result<(DistortionMapping, ParameterStore<f64>)> {
    let mut reg = ParamRegistry::new();
    let dm = DistortionMapping::new(&mut reg, "dm", channels);
    let store = reg.init::<f64>(8)?;
    Ok((dm, store))
}

fn dm_gate_range(_: &Faults) -> Outcome {
    let (dm, store) = dm_setup(3).map_err(e2s)?;
    for (seed, scale) in [(1, 1e6), (2, 1e3), (3, 1.0)] {
        let mut x = random_tensor(&[2, 3, 5, 6], seed, scale);
        x.data_mut()[0] = 1e6;
        x.data_mut()[1] = -1e6;
        let g = dm.gate_map(&store, &FeatureMap::new(x).map_err(e2s)?).map_err(e2s)?;
        ensure(g.data.data().iter().all(|&v| v > 0.0 && v < 2.0), || format!("gate left (0, 2) at scale {scale}"))?;
    }
    Ok("gate strictly inside (0, 2) for inputs up to ±1e6".into())
}

fn dm_identity_at_zero(_: &Faults) -> Outcome {
    let (dm, mut store) = dm_setup(3).map_err(e2s)?;
    for t in store.params.values_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let x = FeatureMap::new(random_tensor(&[1, 3, 4, 4], 9, 2.0)).map_err(e2s)?;
    let y = dm.forward(&store, &x).map_err(e2s)?;
    ensure(y == x, || format!("output differs from input by {:.2e}", y.data.max_abs_diff(&x.data)))?;
    Ok("zero pre-activation gives gate 1 and output = input".into())
}

fn dm_gradient(_: &Faults) -> Outcome {
    let r = check_gradients(
        |g, v| {
            let z = g.gelu(v[0]);
            let s = g.sigmoid(z);
            let s = g.scale(s, 2.0);
            let y = g.mul(s, v[1])?;
            let y = g.mul(y, v[2])?;
            Ok(g.sum(y))
        },
        &[random_tensor(&[1, 2, 3, 3], 50, 2.0), random_tensor(&[1, 2, 3, 3], 51, 1.0), random_tensor(&[1, 2, 3, 3], 52, 1.0)],
        DEFAULT_STEP,
        1e-4,
    )?;
    let (dm, store) = dm_setup(2).map_err(e2s)?;
    let mut store = store;
    for (name, t) in store.params.iter_mut() {
        if name.contains("offset") {
            *t = random_tensor(t.shape(), 53, 0.05);
        }
    }
    let x = random_tensor(&[2, 2, 4, 4], 54, 1.0);
    let probe = random_tensor(&[2, 2, 4, 4], 55, 1.0);
    let loss = |store: &ParameterStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut cx = Ctx::new(store, Mode::Train, false);
        let xv = cx.graph.constant(x.clone());
        let y = dm.apply(&mut cx, xv)?;
        let pv = cx.graph.constant(probe.clone());
        let y = cx.graph.mul(y, pv)?;
        let s = cx.graph.sum(y);
        Ok(cx.graph.value(s).item())
    };
    let mut cx = Ctx::new(&store, Mode::Train, true);
    let xv = cx.graph.leaf(x.clone());
    let y = dm.apply(&mut cx, xv).map_err(e2s)?;
    let pv = cx.graph.constant(probe.clone());
    let y = cx.graph.mul(y, pv).map_err(e2s)?;
    let s = cx.graph.sum(y);
    cx.graph.backward(s).map_err(e2s)?;
    let gx = cx.graph.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let grads = cx.param_grads();
    drop(cx);
    let mut worst: f64 = 0.0;
    for j in (0..x.len()).step_by(3) {
        let mut xp = x.clone();
        xp.data_mut()[j] += DEFAULT_STEP;
        let mut xm = x.clone();
        xm.data_mut()[j] -= DEFAULT_STEP;
        let num = (loss(&store, &xp).map_err(e2s)? - loss(&store, &xm).map_err(e2s)?) / (2.0 * DEFAULT_STEP);
        worst = worst.max(relative_error(gx.data()[j], num));
    }
    for (name, g) in &grads {
        for j in (0..g.len()).step_by(7) {
            let orig = store.get(name).map_err(e2s)?.data()[j];
            store.get_mut(name).map_err(e2s)?.data_mut()[j] = orig + DEFAULT_STEP;
            let lp = loss(&store, &x).map_err(e2s)?;
            store.get_mut(name).map_err(e2s)?.data_mut()[j] = orig - DEFAULT_STEP;
            let lm = loss(&store, &x).map_err(e2s)?;
            store.get_mut(name).map_err(e2s)?.data_mut()[j] = orig;
            worst = worst.max(relative_error(g.data()[j], (lp - lm) / (2.0 * DEFAULT_STEP)));
        }
    }
    ensure(worst <= 1e-4, || format!("module gradient error {worst:.2e}"))?;
    Ok(format!("gate composite max error {:.1e}; full module max error {worst:.1e}", r.max_error))
}

fn regulator_shapes(_: &Faults) -> Outcome {
    let model = Model::new(ModelConfig::tiny()).map_err(e2s)?;
    let store = model.init::<f64>(0).map_err(e2s)?;
    let reg = model.regulator().ok_or("tiny model has no regulator")?;
    let rm = model.relation_matrix().ok_or("tiny model has no relation matrix")?;
    let t = reg.forward(&store, rm).map_err(e2s)?;
    let cfg = model.config();
    ensure((t.grid_h, t.grid_w, t.dim()) == (cfg.height / 16, cfg.width / 16, cfg.embed_dim), || {
        format!("{}x{}x{}", t.grid_h, t.grid_w, t.dim())
    })?;
    Ok(format!("prior {}x{} -> {} tokens of width {}", cfg.height, cfg.width, t.len(), t.dim()))
}

// ----------------------------------------------------------------------
// model
// ----------------------------------------------------------------------

fn test_image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 3, h, w], |_| rng.random_range(0.0..1.0))
}

fn model_shapes_and_range(_: &Faults) -> Outcome {
    let model = Model::new(ModelConfig::tiny()).map_err(e2s)?;
    let store = model.init::<f32>(1).map_err(e2s)?;
    let img = test_image(2, 64, 128, 2).cast::<f32>();
    let a = model.forward(&store, &img).map_err(e2s)?;
    let b = model.forward(&store, &img).map_err(e2s)?;
    ensure(a == b, || "two identical forwards differ".into())?;
    for t in [a.saliency(), a.edge()] {
        ensure(t.shape() == [2, 1, 64, 128], || format!("{:?}", t.shape()))?;
        ensure(t.data().iter().all(|&v| v > 0.0 && v < 1.0), || "output outside (0, 1)".into())?;
    }
    let (t1, t2, e) = model.encode(&store, &img).map_err(e2s)?;
    let dims = [t1.data.shape(), t2.data.shape(), e.data.shape()];
    ensure(dims == [&[2, 512, 32][..], &[2, 128, 32], &[2, 32, 96]], || format!("{dims:?}"))?;
    Ok("tiny (2,3,64,128) -> (2,1,64,128) in (0,1); grids H/4, H/8, H/16".into())
}

fn model_zero_heads(_: &Faults) -> Outcome {
    let model = Model::new(ModelConfig::tiny()).map_err(e2s)?;
    let mut store = model.init::<f32>(3).map_err(e2s)?;
    for head in ["saliency_head", "edge_head"] {
        for p in ["weight", "bias"] {
            let t = store.get_mut(&format!("decoder.{head}.{p}")).map_err(e2s)?;
            *t = Tensor::zeros(t.shape());
        }
    }
    let out = model.forward(&store, &test_image(1, 64, 128, 4).cast()).map_err(e2s)?;
    ensure(out.saliency().data().iter().chain(out.edge().data()).all(|&v| v == 0.5), || "not 0.5".into())?;
    Ok("zeroed heads give 0.5 everywhere".into())
}

fn model_ablation_subtrees(_: &Faults) -> Outcome {
    let names = |cfg: ModelConfig| -> Result<BTreeSet<(String, Vec<usize>)>> {
        Ok(Model::new(cfg)?.registry().specs().iter().map(|s| (s.name.clone(), s.shape.clone())).collect())
    };
    let base = names(ModelConfig::tiny()).map_err(e2s)?;
    let variants: [(&str, ModelConfig, &str); 3] = [
        ("use_rm", ModelConfig { use_rm: false, ..ModelConfig::tiny() }, "encoder.regulator."),
        ("use_dm", ModelConfig { use_dm: false, ..ModelConfig::tiny() }, "decoder."),
        ("use_da", ModelConfig { use_da: false, ..ModelConfig::tiny() }, "decoder."),
    ];
    for (flag, cfg, prefix) in variants {
        let other = names(cfg).map_err(e2s)?;
        let diff: Vec<_> = base.symmetric_difference(&other).collect();
        ensure(!diff.is_empty(), || format!("{flag}=false changed nothing"))?;
        if let Some(bad) = diff.iter().find(|(n, _)| !n.starts_with(prefix)) {
            return Err(format!("{flag}=false touched `{}`", bad.0));
        }
    }
    Ok("use_rm touches only the regulator; use_dm/use_da only the decoder".into())
}

fn model_init_determinism(_: &Faults) -> Outcome {
    let model = Model::new(ModelConfig::tiny()).map_err(e2s)?;
    let a = model.init::<f32>(5).map_err(e2s)?;
    let b = model.init::<f32>(5).map_err(e2s)?;
    let c = model.init::<f32>(6).map_err(e2s)?;
    ensure(a.checksum() == b.checksum() && a == b, || "same seed gave different parameters".into())?;
    ensure(a.checksum() != c.checksum(), || "different seeds gave the same parameters".into())?;
    a.check_against(model.registry()).map_err(e2s)?;
    Ok(format!("checksum {:016x}, {} parameters", a.checksum(), a.num_params()))
}

fn model_batch_independence(_: &Faults) -> Outcome {
    let model = Model::new(ModelConfig::tiny()).map_err(e2s)?;
    let store = model.init::<f64>(7).map_err(e2s)?;
    let img = test_image(2, 64, 128, 8);
    let joint = model.forward(&store, &img).map_err(e2s)?;
    let split = model.predict(&store, &img).map_err(e2s)?;
    let d = joint.saliency_logits.max_abs_diff(&split.saliency_logits).max(joint.edge_logits.max_abs_diff(&split.edge_logits));
    ensure(d <= 1e-6, || format!("batch of 2 differs from two singles by {d:.2e}"))?;
    Ok(format!("max difference {d:.1e}"))
}

/// Finite-difference check of the training loss against `n` sampled parameter entries.
pub fn model_gradient_check(
    model: &Model,
    store: &ParameterStore<f64>,
    image: &Tensor<f64>,
    mask: &Tensor<f64>,
    edge: &Tensor<f64>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let loss_of = |store: &ParameterStore<f64>, record: bool| -> Result<(f64, Option<std::collections::BTreeMap<String, Tensor<f64>>>)> {
        let mut cx = Ctx::new(store, Mode::Train, record);
        let (s, e) = model.forward_graph(&mut cx, image)?;
        let gs = cx.graph.constant(mask.clone());
        let ge = cx.graph.constant(edge.clone());
        let (total, ..) = total_loss_graph(&mut cx.graph, s, e, gs, ge)?;
        let v = cx.graph.value(total).item();
        if record {
            cx.graph.backward(total)?;
            return Ok((v, Some(cx.param_grads())));
        }
        Ok((v, None))
    };
    let grads = loss_of(store, true)?.1.expect("recorded");
    let names: Vec<&String> = store.params.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..n {
        let name = names[rng.random_range(0..names.len())];
        let j = rng.random_range(0..store.get(name)?.len());
        let orig = store.get(name)?.data()[j];
        work.get_mut(name)?.data_mut()[j] = orig + h;
        let lp = loss_of(&work, false)?.0;
        work.get_mut(name)?.data_mut()[j] = orig - h;
        let lm = loss_of(&work, false)?.0;
        work.get_mut(name)?.data_mut()[j] = orig;
        let a = grads.get(name).map_or(0.0, |g| g.data()[j]);
        let err = relative_error(a, (lp - lm) / (2.0 * h));
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Tiny-model store in f64 with offset predictors moved off zero, so sampling
/// positions avoid the kinks of bilinear interpolation at integer coordinates.
pub fn gradient_test_store(model: &Model, seed: u64) -> Result<ParameterStore<f64>> {
    let mut store = model.init::<f64>(seed)?;
    for (name, t) in store.params.iter_mut() {
        if name.contains(".offset.") {
            *t = random_tensor(t.shape(), seed ^ crate::params::fnv1a(name.as_bytes()), 0.05);
        }
    }
    Ok(store)
}

fn model_end_to_end_gradient(_: &Faults) -> Outcome {
    let model = Model::new(ModelConfig::tiny()).map_err(e2s)?;
    let store = gradient_test_store(&model, 11).map_err(e2s)?;
    let s = synth_erp_sample(12, 64, 128, 2).map_err(e2s)?;
    let image = s.image.cast::<f64>().reshape(&[1, 3, 64, 128]).map_err(e2s)?;
    let mask = s.mask.cast::<f64>().reshape(&[1, 1, 64, 128]).map_err(e2s)?;
    let edge = s.edge.cast::<f64>().reshape(&[1, 1, 64, 128]).map_err(e2s)?;
    let worst = model_gradient_check(&model, &store, &image, &mask, &edge, 20, 13).map_err(e2s)?;
    ensure(worst <= 1e-3, || format!("relative error {worst:.2e} > 1e-3"))?;
    Ok(format!("20 sampled parameters, max relative error {worst:.1e}"))
}

// ----------------------------------------------------------------------
// objectives
// ----------------------------------------------------------------------

fn objectives_closed_forms(_: &Faults) -> Outcome {
    let g = Tensor::from_fn(&[2, 1, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let half = Tensor::full(&[2, 1, 4, 4], 0.5);
    let l = bce_loss(&half, &g).map_err(e2s)?;
    ensure((l - std::f64::consts::LN_2).abs() <= 1e-9, || format!("BCE(0.5) = {l}"))?;
    let p = random_tensor(&[2, 1, 4, 4], 60, 0.49).map(|v| v + 0.5);
    let q = random_tensor(&[2, 1, 4, 4], 61, 0.49).map(|v| v + 0.5);
    let r = total_loss(&p, &q, &g, &g).map_err(e2s)?;
    ensure(r.loss_total == r.loss_sal + r.loss_edge, || "L_total is not L_sal + L_edge".into())?;
    Ok("BCE(0.5) = ln 2; L_total = L_sal + L_edge exactly".into())
}

fn objectives_gradient_formula(_: &Faults) -> Outcome {
    let (h, w) = (5, 6);
    let p = random_tensor(&[1, 1, h, w], 62, 0.45).map(|v| v + 0.5);
    let g = Tensor::from_fn(&[1, 1, h, w], |i| (i % 3 == 0) as u8 as f64);
    let mut gr = Graph::new();
    let pv = gr.leaf(p.clone());
    let gv = gr.constant(g.clone());
    let l = gr.bce(pv, gv, BCE_EPS).map_err(e2s)?;
    gr.backward(l).map_err(e2s)?;
    let auto = gr.grad(pv).cloned().ok_or("no gradient")?;
    let closed = bce_grad(&p, &g).map_err(e2s)?;
    for i in 0..p.len() {
        let (pi, gi) = (p.data()[i], g.data()[i]);
        let want = (pi - gi) / (pi * (1.0 - pi)) / (h * w) as f64;
        ensure((auto.data()[i] - want).abs() <= 1e-6 && (closed.data()[i] - want).abs() <= 1e-12, || {
            format!("pixel {i}: autodiff {} closed {} formula {want}", auto.data()[i], closed.data()[i])
        })?;
    }
    Ok("dL/dP = (P - G)/(P(1 - P))/(WH)".into())
}

fn objectives_nonnegative_convex(_: &Faults) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for _ in 0..200 {
        let g = rng.random_range(0..2) as f64;
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let l = |p: f64| bce_loss(&Tensor::scalar(p), &Tensor::scalar(g)).expect("scalar");
        ensure(l(a) >= 0.0, || format!("negative loss at {a}"))?;
        ensure(l(0.5 * (a + b)) <= 0.5 * (l(a) + l(b)) + 1e-12, || format!("not convex between {a} and {b}"))?;
    }
    Ok("non-negative and midpoint-convex on 200 random pairs".into())
}

// ----------------------------------------------------------------------
// metrics
// ----------------------------------------------------------------------

fn random_case(rng: &mut ChaCha8Rng, case: usize) -> (Plane, Plane) {
    let n = 64;
    let g: Vec<f64> = match case % 10 {
        0 => vec![0.0; n],
        1 => vec![1.0; n],
        _ => {
            let rate = rng.random_range(0.1..0.7);
            (0..n).map(|_| rng.random_bool(rate) as u8 as f64).collect()
        }
    };
    let p: Vec<f64> = (0..n)
        .map(|i| match case % 4 {
            // values on the threshold grid probe the strict comparison
            0 => rng.random_range(0..=255) as f64 / 255.0,
            1 => (0.7 * g[i] + rng.random_range(0.0..0.3)).min(1.0),
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    (Plane::new(p, 8, 8).expect("8x8"), Plane::new(g, 8, 8).expect("8x8"))
}

fn metric_oracle(faults: &Faults, which: &str) -> Outcome {
    let m = MetricImpls::with(faults);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (p, g) = random_case(&mut rng, case);
        let pairs: Vec<(f64, f64)> = match which {
            "mae" => vec![((m.mae)(&p, &g).map_err(e2s)?, reference::mae(&p.data, &g.data))],
            "f" => {
                if g.data.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (a, b) = (m.f)(&p, &g).map_err(e2s)?;
                let (c, d) = reference::f_measure(&p.data, &g.data);
                vec![(a, c), (b, d)]
            }
            "e" => {
                let (a, b) = (m.e)(&p, &g).map_err(e2s)?;
                let (c, d) = reference::e_measure(&p.data, &g.data);
                vec![(a, c), (b, d)]
            }
            _ => vec![((m.s)(&p, &g).map_err(e2s)?, reference::s_measure(&p.data, &g.data, 8, 8))],
        };
        for (got, want) in pairs {
            let d = (got - want).abs();
            ensure(d <= 1e-6, || format!("case {case}: {got} vs reference {want}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("50 random 8×8 cases, max deviation {worst:.1e}"))
}

fn metrics_mae_oracle(f: &Faults) -> Outcome {
    metric_oracle(f, "mae")
}
fn metrics_f_oracle(f: &Faults) -> Outcome {
    metric_oracle(f, "f")
}
fn metrics_e_oracle(f: &Faults) -> Outcome {
    metric_oracle(f, "e")
}
fn metrics_s_oracle(f: &Faults) -> Outcome {
    metric_oracle(f, "s")
}

fn metrics_perfect_report(faults: &Faults) -> Outcome {
    let m = MetricImpls::with(faults);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (_, g) = random_case(&mut rng, 3);
    let r = evaluate_pairs(&[(g.clone(), g.clone())]).map_err(e2s)?;
    let s = [
        (m.mae)(&g, &g).map_err(e2s)?,
        (m.f)(&g, &g).map_err(e2s)?.0,
        (m.f)(&g, &g).map_err(e2s)?.1,
        (m.e)(&g, &g).map_err(e2s)?.0,
        (m.e)(&g, &g).map_err(e2s)?.1,
        (m.s)(&g, &g).map_err(e2s)?,
    ];
    let want = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    for (label, got) in [("report", r.scores()), ("metrics", s)] {
        ensure(got.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-9), || format!("{label} {got:?}"))?;
    }
    Ok("P = G gives (0, 1, 1, 1, 1, 1)".into())
}

fn metrics_sanity(faults: &Faults) -> Outcome {
    let m = MetricImpls::with(faults);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    for case in 0..50 {
        let (p, g) = random_case(&mut rng, case);
        let (a, b) = ((m.mae)(&p, &g).map_err(e2s)?, (m.mae)(&g, &p).map_err(e2s)?);
        ensure(a == b, || format!("case {case}: mae not symmetric ({a} vs {b})"))?;
        if g.data.iter().any(|&v| v > 0.0) {
            let fp = (m.f)(&p, &g).map_err(e2s)?.0;
            let fg = (m.f)(&g, &g).map_err(e2s)?.0;
            ensure(fg >= fp, || format!("case {case}: maxF drops from {fp} to {fg} when P = G"))?;
        }
        let ep = (m.e)(&p, &g).map_err(e2s)?.0;
        let eg = (m.e)(&g, &g).map_err(e2s)?.0;
        ensure(eg >= ep, || format!("case {case}: maxE drops from {ep} to {eg} when P = G"))?;
    }
    Ok("mae symmetric; P = G never lowers maxF or maxE".into())
}

// ----------------------------------------------------------------------
// trainer
// ----------------------------------------------------------------------

fn trainer_schedule(_: &Faults) -> Outcome {
    let c = TrainConfig::default();
    let got = [0, 45_000, 60_000, 69_999].map(|s| lr_at_step(s, &c));
    ensure(got == [1e-4, 1e-5, 1e-6, 1e-6], || format!("{got:?}"))?;
    let mut drops = 0;
    for s in 1..c.total_steps {
        let (a, b) = (lr_at_step(s - 1, &c), lr_at_step(s, &c));
        ensure(b <= a, || format!("lr rises at step {s}"))?;
        drops += (b < a) as usize;
    }
    ensure(drops == 2, || format!("{drops} drops"))?;
    Ok("1e-4 / 1e-5 / 1e-6 at steps 0 / 45000 / 60000; two drops".into())
}

/// Textbook Adam on plain slices.
fn reference_adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

fn trainer_adam_oracle(_: &Faults) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let n = 16;
    let mut p = Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0));
    let (mut m, mut v) = (Tensor::zeros(&[n]), Tensor::zeros(&[n]));
    let (mut rp, mut rm, mut rv) = (p.data().to_vec(), vec![0.0; n], vec![0.0; n]);
    for t in 1..=10 {
        let g = Tensor::from_fn(&[n], |_| rng.random_range(-2.0..2.0));
        adam_update(&mut p, &g, &mut m, &mut v, t, 1e-3, &AdamConfig::default()).map_err(e2s)?;
        reference_adam(&mut rp, g.data(), &mut rm, &mut rv, t as i32, 1e-3);
    }
    let d = p.data().iter().zip(&rp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(d <= 1e-10, || format!("deviation {d:.2e}"))?;
    Ok(format!("10 random steps, max deviation {d:.1e}"))
}

fn tiny_train_setup() -> Result<(Model, TrainConfig, Vec<crate::data::Sample>)> {
    let cfg = ModelConfig { encoder_depth: 1, ..ModelConfig::tiny() };
    let model = Model::new(cfg)?;
    let data = vec![synth_erp_sample(90, 64, 128, 2)?, synth_erp_sample(91, 64, 128, 1)?];
    let tc = TrainConfig { batch_size: 2, total_steps: 4, decay_steps: vec![2], base_lr: 1e-3, seed: 5, ..TrainConfig::default() };
    Ok((model, tc, data))
}

fn trainer_resume(_: &Faults) -> Outcome {
    let (model, tc, data) = tiny_train_setup().map_err(e2s)?;
    let aug = AugmentConfig { enabled: false, ..AugmentConfig::default() };
    let init = model.init::<f32>(0).map_err(e2s)?;
    let full = train(&model, &tc, &aug, &data, TrainState::new(init.clone()), None, |_| {}).map_err(e2s)?;
    let again = train(&model, &tc, &aug, &data, TrainState::new(init.clone()), None, |_| {}).map_err(e2s)?;
    ensure(full == again, || "identical seeds gave different runs".into())?;
    let half_cfg = TrainConfig { total_steps: 2, decay_steps: vec![], ..tc.clone() };
    let half = train(&model, &half_cfg, &aug, &data, TrainState::new(init), None, |_| {}).map_err(e2s)?;
    let bytes = Checkpoint::from_state("", &half).encode();
    let restored = Checkpoint::decode(&bytes).map_err(e2s)?.into_state();
    ensure(restored == half, || "checkpoint round trip changed the state".into())?;
    let resumed = train(&model, &tc, &aug, &data, restored, None, |_| {}).map_err(e2s)?;
    ensure(resumed.history == full.history, || "resumed loss sequence differs".into())?;
    ensure(resumed.params == full.params, || "resumed parameters differ".into())?;
    Ok(format!("4 steps, resumed at 2: loss sequence identical (final {:.4})", full.history[3].loss_total))
}

// ----------------------------------------------------------------------
// data
// ----------------------------------------------------------------------

fn data_edge_properties(_: &Faults) -> Outcome {
    for seed in 0..5 {
        let s = synth_erp_sample(seed, 32, 64, 2).map_err(e2s)?;
        let e = edge_from_mask(&s.mask).map_err(e2s)?;
        ensure(e.data().iter().zip(s.mask.data()).all(|(&a, &b)| a <= b), || format!("seed {seed}: edge outside mask"))?;
        let (h, w) = (32usize, 64usize);
        let m = s.mask.data();
        for i in 0..h * w {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let boundary = m[i] == 1.0
                && (-1..=1i64).any(|dr| {
                    (-1..=1i64).any(|dc| {
                        let (rr, cc) = (r + dr, c + dc);
                        rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 || m[rr as usize * w + cc as usize] == 0.0
                    })
                });
            ensure((e.data()[i] == 1.0) == boundary, || format!("seed {seed}: pixel {i} misclassified"))?;
        }
    }
    Ok("edge = mask pixels with a background or out-of-image 8-neighbour".into())
}

fn data_synth(_: &Faults) -> Outcome {
    for seed in 0..6 {
        let a = synth_erp_sample(seed, 64, 128, 1 + seed as usize % 3).map_err(e2s)?;
        let b = synth_erp_sample(seed, 64, 128, 1 + seed as usize % 3).map_err(e2s)?;
        ensure(a == b, || format!("seed {seed} not deterministic"))?;
        let cov = a.coverage();
        ensure((0.02..=0.6).contains(&cov), || format!("seed {seed}: coverage {cov}"))?;
        let d = AugmentDraw { top: 3, left: 5, flip: seed % 2 == 0 };
        let cfg = AugmentConfig { enabled: true, resize_to: (72, 144), crop_to: (64, 128), hflip_prob: 0.5 };
        let aug = augment_with(&a, &cfg, d).map_err(e2s)?;
        ensure(aug.mask.data().iter().all(|&v| v == 0.0 || v == 1.0), || "augmented mask not binary".into())?;
    }
    Ok("deterministic per seed, coverage in [0.02, 0.6], augmentation keeps masks binary".into())
}

pub fn checks() -> Vec<Check> {
    macro_rules! c {
        ($name:literal, $f:ident) => {
            Check { name: $name, run: $f }
        };
    }
    vec![
        c!("geometry.cosine_prior_formula", geometry_cosine_formula),
        c!("geometry.prior_row_constant_symmetric_monotone", geometry_prior_structure),
        c!("geometry.sphere_coordinate_ranges", geometry_sphere_ranges),
        c!("tokenizer.stated_token_grids", tokenizer_stated_grids),
        c!("tokenizer.fold_split_overlap_oracle", tokenizer_fold_oracle),
        c!("tokenizer.map_token_round_trip", tokenizer_map_round_trip),
        c!("attention.softmax_rows", attention_softmax),
        c!("attention.gradient_check", attention_gradient),
        c!("attention.deform_zero_offset_conv_oracle", deform_zero_offset_oracle),
        c!("attention.deform_gradient_check", deform_gradient),
        c!("distortion.gate_range_adversarial", dm_gate_range),
        c!("distortion.gate_identity_at_zero", dm_identity_at_zero),
        c!("distortion.gradient_check", dm_gradient),
        c!("distortion.regulator_shapes", regulator_shapes),
        c!("model.shapes_range_determinism", model_shapes_and_range),
        c!("model.zeroed_heads_give_half", model_zero_heads),
        c!("model.ablation_subtrees", model_ablation_subtrees),
        c!("model.init_determinism", model_init_determinism),
        c!("model.batch_independence", model_batch_independence),
        c!("model.end_to_end_gradient", model_end_to_end_gradient),
        c!("objectives.closed_forms", objectives_closed_forms),
        c!("objectives.bce_gradient_formula", objectives_gradient_formula),
        c!("objectives.bce_nonnegative_convex", objectives_nonnegative_convex),
        c!("metrics.mae_matches_reference", metrics_mae_oracle),
        c!("metrics.f_measure_matches_reference", metrics_f_oracle),
        c!("metrics.e_measure_matches_reference", metrics_e_oracle),
        c!("metrics.s_measure_matches_reference", metrics_s_oracle),
        c!("metrics.perfect_prediction_report", metrics_perfect_report),
        c!("metrics.symmetry_and_monotonicity", metrics_sanity),
        c!("trainer.lr_schedule", trainer_schedule),
        c!("trainer.adam_matches_reference", trainer_adam_oracle),
        c!("trainer.determinism_and_resume", trainer_resume),
        c!("data.edge_from_mask", data_edge_properties),
        c!("data.synthetic_samples", data_synth),
    ]
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, faults: &Faults) -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let t = Instant::now();
            let r = std::panic::catch_unwind(|| (c.run)(faults)).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome { name: c.name, passed, detail, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&format!(
            "{} {:width$} {:>7.2}s  {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        ));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    s.push_str(&format!("{} checks, {} passed, {} failed\n", outcomes.len(), outcomes.len() - failed, failed));
    s
}
