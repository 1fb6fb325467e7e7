//! Property tests for the invariants of each module.

mod common;

use proptest::prelude::*;

use panosal::checkpoint::Checkpoint;
use panosal::config::{Preset, RunConfig};
use panosal::data::{edge_from_mask, hflip, resize_bilinear};
use panosal::geometry::{erp_pixel_to_sphere, init_relation_matrix, PriorKind};
use panosal::graph::{gelu, sigmoid};
use panosal::metrics::{self, Plane};
use panosal::objectives::bce_loss;
use panosal::params::ParameterStore;
use panosal::tokenizer::{map_to_tokens, out_length, soft_split, token_fold, tokens_to_map, FeatureMap, SoftSplitSpec};
use panosal::trainer::{batch_indices, lr_at_step, LogRow, TrainConfig, TrainState};
use panosal::Tensor;

fn spec() -> impl Strategy<Value = SoftSplitSpec> {
    (1usize..=5)
        .prop_flat_map(|k| (Just(k), 0..k, 0..=k / 2))
        .prop_map(|(kernel, overlap, padding)| SoftSplitSpec { kernel, overlap, padding })
}

/// A prediction in `[0, 1]` and a binary mask on the same `h × w` grid.
fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, usize)> {
    (1usize..=9, 1usize..=9).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
            Just(h),
            Just(w),
        )
    })
}

fn mask(max: usize) -> impl Strategy<Value = (Vec<f32>, usize, usize)> {
    (1usize..=max, 1usize..=max).prop_flat_map(|(h, w)| {
        (prop::collection::vec(prop::bool::weighted(0.6).prop_map(|b| b as u8 as f32), h * w), Just(h), Just(w))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fold_of_split_scales_by_overlap(spec in spec(), h in 1usize..=9, w in 1usize..=9, c in 1usize..=3, seed in any::<u64>()) {
        prop_assume!(out_length(h, spec).is_ok() && out_length(w, spec).is_ok());
        let x = panosal::gradcheck::random_tensor(&[1, c, h, w], seed, 1.0);
        let t = soft_split(&FeatureMap::new(x.clone()).unwrap(), spec).unwrap();
        let (oh, ow) = (out_length(h, spec).unwrap(), out_length(w, spec).unwrap());
        prop_assert_eq!((t.grid_h, t.grid_w, t.dim()), (oh, ow, c * spec.window_area()));
        let y = token_fold(&t, spec, h, w).unwrap();
        let count = common::overlap_count(h, w, spec);
        for (i, (&a, &b)) in y.data.data().iter().zip(x.data()).enumerate() {
            prop_assert!((a - b * count[i % (h * w)]).abs() <= 1e-9);
        }
    }

    #[test]
    fn fold_is_adjoint_of_split(spec in spec(), h in 1usize..=7, w in 1usize..=7, seed in any::<u64>()) {
        prop_assume!(out_length(h, spec).is_ok() && out_length(w, spec).is_ok());
        let x = panosal::gradcheck::random_tensor(&[1, 2, h, w], seed, 1.0);
        let t = soft_split(&FeatureMap::new(x.clone()).unwrap(), spec).unwrap();
        let mut u = t.clone();
        u.data = panosal::gradcheck::random_tensor(t.data.shape(), seed ^ 1, 1.0);
        // <split(x), u> = <x, fold(u)>
        let lhs: f64 = t.data.data().iter().zip(u.data.data()).map(|(a, b)| a * b).sum();
        let folded = token_fold(&u, spec, h, w).unwrap();
        let rhs: f64 = x.data().iter().zip(folded.data.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn map_token_round_trip(b in 1usize..=2, c in 1usize..=4, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>()) {
        let fm = FeatureMap::new(panosal::gradcheck::random_tensor(&[b, c, h, w], seed, 1.0)).unwrap();
        prop_assert_eq!(tokens_to_map(&map_to_tokens(&fm).unwrap()).unwrap(), fm);
    }

    #[test]
    fn metric_ranges((p, g, h, w) in pair()) {
        let (pp, gp) = (Plane::new(p.clone(), h, w).unwrap(), Plane::new(g.clone(), h, w).unwrap());
        let m = metrics::mae(&pp, &gp).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, metrics::mae(&gp, &pp).unwrap());
        prop_assert_eq!(metrics::mae(&pp, &pp).unwrap(), 0.0);
        let (max_e, mean_e) = metrics::e_measure(&pp, &gp).unwrap();
        prop_assert!(0.0 <= mean_e && mean_e <= max_e + 1e-15 && max_e <= 1.0 + 1e-12);
        let sm = metrics::s_measure(&pp, &gp).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&sm));
        if g.contains(&1.0) {
            let (max_f, mean_f) = metrics::f_measure(&pp, &gp).unwrap();
            prop_assert!(0.0 <= mean_f && mean_f <= max_f + 1e-15 && max_f <= 1.0 + 1e-12);
        } else {
            prop_assert!(metrics::f_measure(&pp, &gp).is_err());
        }
    }

    #[test]
    fn metrics_match_oracle((p, g, h, w) in pair()) {
        let (pp, gp) = (Plane::new(p.clone(), h, w).unwrap(), Plane::new(g.clone(), h, w).unwrap());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        prop_assert!(close(metrics::mae(&pp, &gp).unwrap(), common::mae(&p, &g)));
        let (a, b) = metrics::e_measure(&pp, &gp).unwrap();
        let (c, d) = common::e_measure(&p, &g);
        prop_assert!(close(a, c) && close(b, d));
        prop_assert!(close(metrics::s_measure(&pp, &gp).unwrap(), common::s_measure(&p, &g, h, w)));
        if g.contains(&1.0) {
            let (a, b) = metrics::f_measure(&pp, &gp).unwrap();
            let (c, d) = common::f_measure(&p, &g);
            prop_assert!(close(a, c) && close(b, d));
        }
    }

    #[test]
    fn perfect_prediction_is_perfect((_, g, h, w) in pair()) {
        let gp = Plane::new(g.clone(), h, w).unwrap();
        prop_assert_eq!(metrics::mae(&gp, &gp).unwrap(), 0.0);
        prop_assert!((metrics::e_measure(&gp, &gp).unwrap().0 - 1.0).abs() <= 1e-12);
        prop_assert!((metrics::s_measure(&gp, &gp).unwrap() - 1.0).abs() <= 1e-9);
        if g.contains(&1.0) {
            prop_assert!((metrics::f_measure(&gp, &gp).unwrap().0 - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_is_nonnegative_and_convex(g in 0u8..=1, a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let l = |p: f64| bce_loss(&Tensor::scalar(p), &Tensor::scalar(g as f64)).unwrap();
        prop_assert!(l(a) >= 0.0 && l(a).is_finite());
        let mid = t * a + (1.0 - t) * b;
        prop_assert!(l(mid) <= t * l(a) + (1.0 - t) * l(b) + 1e-9);
    }

    #[test]
    fn gate_stays_inside_open_interval(x in -1e6f64..1e6) {
        let v = 2.0 * sigmoid(gelu(x));
        prop_assert!(v > 0.0 && v < 2.0);
    }

    #[test]
    fn edge_is_the_mask_boundary((m, h, w) in mask(12)) {
        let mt = Tensor::new(&[1, h, w], m.clone()).unwrap();
        let e = edge_from_mask(&mt).unwrap();
        let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m[r as usize * w + c as usize] == 1.0;
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let i = r as usize * w + c as usize;
                let boundary = inside(r, c) && (-1..=1).any(|dr| (-1..=1).any(|dc| !inside(r + dr, c + dc)));
                prop_assert_eq!(e.data()[i] == 1.0, boundary);
            }
        }
    }

    #[test]
    fn hflip_is_an_involution(c in 1usize..=3, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>()) {
        let x = panosal::gradcheck::random_tensor(&[c, h, w], seed, 1.0).cast::<f32>();
        let y = hflip(&x).unwrap();
        prop_assert_eq!(y.data()[w - 1], x.data()[0]);
        prop_assert_eq!(hflip(&y).unwrap(), x);
    }

    #[test]
    fn resize_to_same_size_is_identity(c in 1usize..=3, h in 1usize..=8, w in 1usize..=8, seed in any::<u64>()) {
        let x = panosal::gradcheck::random_tensor(&[c, h, w], seed, 1.0).cast::<f32>();
        let y = resize_bilinear(&x, h, w).unwrap();
        prop_assert!(y.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn priors_have_their_codomain(h in 1usize..=40, w in 1usize..=40) {
        let cos = init_relation_matrix(h, w, PriorKind::Cosine).unwrap();
        let sin = init_relation_matrix(h, w, PriorKind::Sine).unwrap();
        prop_assert!(cos.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(sin.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        for r in 1..h {
            prop_assert!((sin.get(r, 0) + sin.get(h - r, 0)).abs() <= 1e-12);
        }
        for c in 0..w {
            let s = erp_pixel_to_sphere(0, c, h, w).unwrap();
            prop_assert!(s.phi.abs() <= std::f64::consts::PI);
        }
    }

    #[test]
    fn lr_is_a_nonincreasing_step_function(base in 1e-6f64..1e-1, mut decays in prop::collection::vec(1usize..1000, 0..4), step in 0usize..1000) {
        decays.sort_unstable();
        decays.dedup();
        let cfg = TrainConfig { base_lr: base, decay_steps: decays.clone(), total_steps: 1000, ..TrainConfig::default() };
        let (a, b) = (lr_at_step(step, &cfg), lr_at_step(step + 1, &cfg));
        prop_assert!(b <= a);
        let n = decays.iter().filter(|&&d| d <= step).count() as i32;
        prop_assert!((a - base * 0.1f64.powi(n)).abs() <= 1e-11 * a);
    }

    #[test]
    fn epochs_visit_every_sample_once(seed in any::<u64>(), n in 1usize..=12, batch in 1usize..=5, epoch in 0usize..3) {
        let per_epoch = n * batch;
        let start = epoch * per_epoch;
        // `batch` epochs laid end to end take exactly `n` steps.
        let mut seen: Vec<usize> = (0..n).flat_map(|s| batch_indices(seed, start / batch + s, batch, n)).collect();
        prop_assert!(seen.iter().all(|&i| i < n));
        seen.sort_unstable();
        let want: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, batch)).collect();
        prop_assert_eq!(seen, want);
        prop_assert_eq!(batch_indices(seed, 7, batch, n), batch_indices(seed, 7, batch, n));
    }

    #[test]
    fn config_echo_round_trips(
        seed in any::<u64>(), steps in 1usize..100_000, lr in 1e-7f64..1.0, flags in any::<[bool; 4]>(),
        prior in prop::sample::select(vec!["cosine", "sine", "blank"]), tiny in any::<bool>(),
    ) {
        let mut cfg = RunConfig::preset(if tiny { Preset::Tiny } else { Preset::Full });
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("total_steps", &steps.to_string()).unwrap();
        cfg.set("decay_steps", "").unwrap();
        cfg.set("base_lr", &format!("{lr:e}")).unwrap();
        cfg.set("prior", prior).unwrap();
        for (key, on) in ["use_dm", "use_da", "use_rm", "use_pe"].iter().zip(flags) {
            cfg.set(key, &on.to_string()).unwrap();
        }
        let back = RunConfig::parse(&cfg.echo()).unwrap();
        prop_assert_eq!(back.echo(), cfg.echo());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn checkpoint_round_trip_and_bit_flips(
        values in prop::collection::vec(any::<f32>(), 1..40), step in 0usize..1_000_000,
        losses in prop::collection::vec(any::<f64>(), 0..8), flip in any::<prop::sample::Index>(), bit in 0u8..8,
    ) {
        let mut params = ParameterStore::default();
        params.params.insert("w".into(), Tensor::new(&[values.len()], values.clone()).unwrap());
        params.buffers.insert("bn.running_var".into(), Tensor::new(&[1], vec![values[0]]).unwrap());
        let mut state = TrainState::new(params);
        state.step = step;
        state.adam_m.insert("w".into(), Tensor::new(&[values.len()], values.iter().rev().copied().collect()).unwrap());
        state.history = losses.iter().enumerate().map(|(i, &l)| LogRow { step: i + 1, loss_sal: l, loss_edge: -l, loss_total: 0.0, lr: l }).collect();
        let ck = Checkpoint::from_state("preset = tiny\n", &state);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes.clone());
        prop_assert_eq!(back.step, step);
        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= 1 << bit;
        prop_assert!(Checkpoint::decode(&bad).is_err());
    }
}
