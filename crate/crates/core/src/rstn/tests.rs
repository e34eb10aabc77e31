use proptest::prelude::*;

use super::*;
use crate::model::{Architecture, ModelBundle, ModelConfig, SaliencyConfig};
use crate::rng::SplitMix64;
use crate::synthgen::{generate_corpus, PhantomSpec};
use crate::tensorcore::check_gradients;
use crate::volume::Axis;

/// Scan oracle: bounds of activated pixels, widened and clamped.
fn scan_box(r: &[f64], h: usize, w: usize, k: usize) -> CropBox {
    let mut hits = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if r[row * w + col] >= 0.5 {
                hits.push((row as i64, col as i64));
            }
        }
    }
    if hits.is_empty() {
        return CropBox::whole(h, w);
    }
    let k = k as i64;
    let lo_r = hits.iter().map(|p| p.0).min().unwrap() - k;
    let hi_r = hits.iter().map(|p| p.0).max().unwrap() + k;
    let lo_c = hits.iter().map(|p| p.1).min().unwrap() - k;
    let hi_c = hits.iter().map(|p| p.1).max().unwrap() + k;
    CropBox {
        min_row: lo_r.max(0) as usize,
        min_col: lo_c.max(0) as usize,
        max_row: hi_r.min(h as i64 - 1) as usize,
        max_col: hi_c.min(w as i64 - 1) as usize,
    }
}

#[test]
fn crop_matches_scan_oracle_on_random_references() {
    let mut rng = SplitMix64::new(2024);
    let (h, w) = (16, 16);
    for trial in 0..1000 {
        let density = [0.0, 0.005, 0.02, 0.1, 0.5][trial % 5];
        let reference = Tensor::from_fn(&[1, h, w], |_| {
            if rng.next_f64() < density {
                rng.uniform(0.5, 1.0)
            } else {
                rng.uniform(0.0, 0.4999)
            }
        });
        let image = Tensor::from_fn(&[3, h, w], |_| rng.next_f64());
        let k = rng.below(7);
        let (out, b) = crop(&image, &reference, k).unwrap();
        let want = scan_box(reference.data(), h, w, k);
        assert_eq!(b, want, "trial {trial}");
        assert_eq!(out.shape(), &[3, b.height(), b.width()]);
        for ch in 0..3 {
            for r in 0..b.height() {
                for c in 0..b.width() {
                    let got = out.data()[(ch * b.height() + r) * b.width() + c];
                    let src = image.data()[(ch * h + b.min_row + r) * w + b.min_col + c];
                    assert_eq!(got, src);
                }
            }
        }
    }
}

#[test]
fn crop_examples() {
    let mut r = Tensor::zeros(&[1, 64, 64]);
    r.data_mut()[10 * 64 + 10] = 1.0;
    let img = Tensor::zeros(&[3, 64, 64]);
    let (_, b) = crop(&img, &r, 20).unwrap();
    assert_eq!((b.min_row, b.max_row, b.min_col, b.max_col), (0, 30, 0, 30));

    let (_, b) = crop(&img, &Tensor::zeros(&[1, 64, 64]), 20).unwrap();
    assert!(b.is_whole(64, 64));

    let mut r = Tensor::zeros(&[1, 16, 16]);
    r.data_mut()[5 * 16 + 5] = 0.5;
    r.data_mut()[7 * 16 + 9] = 0.9;
    let (out, b) = crop(&Tensor::zeros(&[3, 16, 16]), &r, 0).unwrap();
    assert_eq!((b.min_row, b.max_row, b.min_col, b.max_col), (5, 7, 5, 9));
    assert_eq!(out.shape(), &[3, 3, 5]);

    assert!(crop(&img, &Tensor::zeros(&[1, 64, 63]), 2).is_err());
}

#[test]
fn boxes_grow_to_a_minimum_size() {
    let b = CropBox {
        min_row: 0,
        min_col: 5,
        max_row: 0,
        max_col: 5,
    };
    let g = b.at_least(4, 10, 10);
    assert_eq!((g.height(), g.width()), (4, 4));
    assert!(g.contains(0, 5));
    let g = b.at_least(20, 10, 6);
    assert!(g.is_whole(10, 6));
    let c = CropBox {
        min_row: 8,
        min_col: 9,
        max_row: 9,
        max_col: 9,
    };
    let g = c.at_least(5, 10, 10);
    assert_eq!((g.min_row, g.max_row, g.min_col, g.max_col), (5, 9, 5, 9));
}

fn dice_value(y: &Tensor, p: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (yv, pv) = (g.constant(y.clone()), g.constant(p.clone()));
    let l = soft_dsc_loss(&mut g, yv, pv)?;
    Ok(g.value(l).data()[0])
}

#[test]
fn soft_dice_fixed_points() {
    let mut rng = SplitMix64::new(1);
    let y = Tensor::from_fn(&[1, 6, 7], |_| f64::from(rng.next_f64() < 0.3));
    assert!(y.sum() > 0.0);
    assert!(dice_value(&y, &y).unwrap().abs() <= 1e-6);
    let l = dice_value(&y, &Tensor::zeros(&[1, 6, 7])).unwrap();
    assert!((l - 1.0).abs() <= 1e-6);
    // empty label and empty prediction: no singularity
    let z = Tensor::zeros(&[1, 6, 7]);
    assert_eq!(dice_value(&z, &z).unwrap(), 0.0);
    assert!(dice_value(&y, &Tensor::zeros(&[1, 7, 6])).is_err());
}

#[test]
fn soft_dice_gradient_matches_finite_differences() {
    let mut rng = SplitMix64::new(5);
    let y = Tensor::from_fn(&[1, 5, 6], |_| f64::from(rng.next_f64() < 0.4));
    let p = Tensor::from_fn(&[1, 5, 6], |_| rng.uniform(0.05, 0.95));
    let report = check_gradients(
        |g, v| {
            let yv = g.constant(y.clone());
            soft_dsc_loss(g, yv, v[0])
        },
        &[p],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    assert_eq!(report.checked, 30);
}

#[test]
fn loss_weight_examples() {
    let w = loss_weights(2).unwrap();
    assert_eq!(w.len(), 3);
    for (a, b) in w.iter().zip([0.2, 0.4, 0.4]) {
        assert!((a - b).abs() <= 1e-15);
    }
    let w = loss_weights(1).unwrap();
    assert!((w[0] - 1.0 / 3.0).abs() <= 1e-15 && (w[1] - 2.0 / 3.0).abs() <= 1e-15);
    assert!(loss_weights(0).is_err());
}

proptest! {
    #[test]
    fn loss_weights_sum_to_one(t in 1usize..40) {
        let w = loss_weights(t).unwrap();
        prop_assert_eq!(w.len(), t + 1);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for &l in &w[1..] {
            prop_assert_eq!(2.0 * w[0], l);
        }
    }

    #[test]
    fn crop_box_covers_activation(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, k in 0usize..8) {
        let mut rng = SplitMix64::new(seed);
        let r: Vec<f64> = (0..h * w).map(|_| rng.next_f64() * 0.6).collect();
        let b = crop_box(&r, h, w, k);
        prop_assert!(b.max_row < h && b.max_col < w);
        for row in 0..h {
            for col in 0..w {
                if r[row * w + col] >= 0.5 {
                    prop_assert!(b.contains(row, col));
                }
            }
        }
    }
}

#[test]
fn train_config_validation() {
    TrainConfig::default().validate().unwrap();
    let c = TrainConfig::default();
    assert_eq!(c.phase1_steps, 2 * c.total_steps() / 3);
    for bad in [
        TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            iterations: 6,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr1: 0.01,
            lr2: 0.01,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr1: 0.001,
            lr2: 0.01,
            ..TrainConfig::default()
        },
        TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            clip_norm: Some(0.0),
            ..TrainConfig::default()
        },
        TrainConfig {
            clip_norm: Some(f64::INFINITY),
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let c = TrainConfig::default().with_budget(10);
    assert_eq!((c.phase1_steps, c.phase2_steps), (7, 3));
    assert_eq!(c.phase_at(6), Phase::One);
    assert_eq!(c.phase_at(7), Phase::Two);
}

proptest! {
    #[test]
    fn clipping_caps_each_group(vals in proptest::collection::vec(-5.0f64..5.0, 9), max in 0.1f64..4.0) {
        let t = |r: std::ops::Range<usize>| Tensor::new(vec![r.len()], vals[r].to_vec()).unwrap();
        let mut grads = vec![t(0..2), t(2..5), t(5..6), t(6..9)];
        let before = grads.clone();
        train::clip_groups(&mut grads, &[2, 2], max);
        for (a, b) in [(0, 2), (2, 4)] {
            let norm = |g: &[Tensor]| g.iter().flat_map(|x| x.data()).map(|v| v * v).sum::<f64>().sqrt();
            let (n0, n1) = (norm(&before[a..b]), norm(&grads[a..b]));
            prop_assert!((n1 - n0.min(max)).abs() <= 1e-12 * n0.max(1.0));
            // direction is kept
            for i in a..b {
                for (x, y) in before[i].data().iter().zip(grads[i].data()) {
                    prop_assert!((y - x * n1 / n0).abs() <= 1e-12 * n0.max(1.0));
                }
            }
        }
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        architecture: Architecture::tiny(),
        saliency: SaliencyConfig {
            kernel: 3,
            layers: 2,
        },
    }
}

fn fixture(seed: u64) -> (ModelBundle, Tensor, Tensor) {
    gradcheck_fixture(seed).unwrap()
}

fn full_step_gradcheck(iterations: usize, reference: ReferenceMode) -> f64 {
    let report = unrolled_gradcheck(iterations, reference, 31 + iterations as u64).unwrap();
    assert_eq!(report.skipped_non_finite, 0);
    assert!(report.checked > 200);
    report.max_rel_error
}

#[test]
fn full_step_gradients_t1() {
    let e = full_step_gradcheck(1, ReferenceMode::GroundTruth);
    assert!(e <= 1e-4, "max rel error {e}");
    let e = full_step_gradcheck(1, ReferenceMode::Predicted);
    assert!(e <= 1e-4, "max rel error {e}");
}

#[test]
fn full_step_gradients_t2() {
    let e = full_step_gradcheck(2, ReferenceMode::GroundTruth);
    assert!(e <= 1e-4, "max rel error {e}");
    let e = full_step_gradcheck(2, ReferenceMode::Predicted);
    assert!(e <= 1e-4, "max rel error {e}");
}

#[test]
fn step_state_is_consistent() {
    let (bundle, stack, y) = fixture(3);
    let cfg = TrainConfig {
        iterations: 2,
        margin: 1,
        ..TrainConfig::default()
    };
    let out = unrolled_step(&bundle, &stack, &y, &cfg, Phase::One).unwrap();
    let s = &out.state;
    assert_eq!(s.inputs.len(), 3);
    assert_eq!(s.boxes[0], None);
    // ground-truth rows 3..6, cols 2..6 plus one pixel
    let want = CropBox {
        min_row: 2,
        min_col: 1,
        max_row: 6,
        max_col: 6,
    };
    assert_eq!(s.boxes[1], Some(want));
    assert_eq!(s.inputs[1].shape(), &[3, 5, 6]);
    for p in &s.probs {
        assert_eq!(p.shape(), &[1, 9, 9]);
    }
    // outside the box the padded map is zero
    assert_eq!(s.probs[1].data()[0], 0.0);
    assert!((out.loss_terms.iter().sum::<f64>() - out.total).abs() < 1e-12);
    assert_eq!(out.grads.len(), bundle.tensors().len());
    for (g, p) in out.grads.iter().zip(bundle.tensors()) {
        assert_eq!(g.shape(), p.shape());
    }
}

#[test]
fn identity_saliency_reduces_to_plain_crop() {
    let (mut bundle, stack, y) = fixture(4);
    bundle.saliency.set_identity();
    let cfg = TrainConfig {
        iterations: 1,
        margin: 2,
        ..TrainConfig::default()
    };
    let out = unrolled_step(&bundle, &stack, &y, &cfg, Phase::One).unwrap();
    let (plain, b) = crop(&stack, &y, 2).unwrap();
    assert_eq!(out.state.boxes[1], Some(b));
    assert_eq!(out.state.inputs[1], plain);
}

fn small_corpus() -> Vec<crate::synthgen::Case> {
    let spec = PhantomSpec {
        extents: [32, 32, 32],
        target_fraction: [0.01, 0.02],
        clutter_count: [2, 3],
        ..PhantomSpec::reference(0)
    };
    generate_corpus(&spec, 2, 77).unwrap()
}

fn short_config() -> TrainConfig {
    TrainConfig {
        phase1_steps: 6,
        phase2_steps: 4,
        margin: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn saliency_gradients_are_live_after_training() {
    let cases = small_corpus();
    let (bundle, records) =
        train_viewpoint(&cases, Axis::Sagittal, &tiny_config(), &short_config(), 5).unwrap();
    assert_eq!(records.len(), 10);
    assert_eq!(records[5].phase, 1);
    assert_eq!(records[6].phase, 2);
    let idx = cases[0].mask.occupied_slices(Axis::Sagittal)[3];
    let stack = crate::volume::slice_stack(&cases[0].volume, Axis::Sagittal, idx)
        .unwrap()
        .to_tensor();
    let y = cases[0].mask.slice_tensor(Axis::Sagittal, idx).unwrap();
    let out = unrolled_step(&bundle, &stack, &y, &short_config(), Phase::Two).unwrap();
    let n = bundle.coarse.tensors().len() + bundle.fine.tensors().len();
    let norm: f64 = out.grads[n..]
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    assert!(norm > 0.0);
}

#[test]
fn training_is_deterministic() {
    let cases = small_corpus();
    let a = train(&cases, &tiny_config(), &short_config(), 9).unwrap();
    let b = train(&cases, &tiny_config(), &short_config(), 9).unwrap();
    assert_eq!(a, b);
    let c = train(&cases, &tiny_config(), &short_config(), 10).unwrap();
    assert_ne!(a.bundles, c.bundles);
    assert_eq!(a.log.records.len(), 30);
    let mut buf = Vec::new();
    a.log.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "phase", "viewpoint", "loss_terms", "total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn training_rejects_bad_input() {
    let cases = small_corpus();
    let bad = TrainConfig {
        lr2: 1.0,
        ..short_config()
    };
    assert!(train(&cases, &tiny_config(), &bad, 1).is_err());
    assert!(train(&[], &tiny_config(), &short_config(), 1).is_err());
}

#[test]
fn divergence_is_reported() {
    let cases = small_corpus();
    let cfg = TrainConfig {
        lr1: 1e300,
        lr2: 1e299,
        ..short_config()
    };
    match train(&cases, &tiny_config(), &cfg, 1) {
        Err(crate::Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
