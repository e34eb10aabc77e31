use super::*;
use crate::inference::segment_volume;
use crate::model::{Architecture, SaliencyConfig};
use crate::rng::SplitMix64;
use crate::rstn::crop;
use crate::synthgen::{generate_corpus, PhantomSpec};
use crate::volume::slice_stack;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        architecture: Architecture::tiny(),
        saliency: SaliencyConfig {
            kernel: 3,
            layers: 2,
        },
    }
}

fn corpus(n: usize) -> Vec<Case> {
    let spec = PhantomSpec {
        extents: [32, 32, 32],
        target_fraction: [0.01, 0.02],
        clutter_count: [2, 3],
        ..PhantomSpec::reference(0)
    };
    generate_corpus(&spec, n, 41).unwrap()
}

fn short_config() -> TrainConfig {
    TrainConfig {
        phase1_steps: 4,
        phase2_steps: 2,
        margin: 4,
        ..TrainConfig::default()
    }
}

fn infer_cfg() -> InferenceConfig {
    InferenceConfig {
        max_iterations: 3,
        threshold: 0.99,
        margin: 4,
        ..InferenceConfig::default()
    }
}

fn joint_bundles(seed: u64) -> [ModelBundle; 3] {
    let mut rng = SplitMix64::new(seed);
    Axis::ALL.map(|a| {
        let mut b = ModelBundle::init(a, &tiny_config(), seed + a.dim() as u64).unwrap();
        for t in b.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.uniform(-0.1, 0.1);
            }
        }
        b
    })
}

#[test]
fn identity_saliency_matches_stagewise_pipeline() {
    let cases = corpus(1);
    let mut joint = joint_bundles(3);
    for b in &mut joint {
        b.saliency.set_identity();
    }
    let stagewise = joint.clone().map(|b| StagewiseBundle::from_joint(&b));
    let (a, ta) = segment_volume(&joint, &cases[0].volume, &infer_cfg()).unwrap();
    let (b, tb) = stagewise_infer(&stagewise, &cases[0].volume, &infer_cfg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.probs, tb.probs);
    assert_eq!(ta.d, tb.d);
}

#[test]
fn fine_inputs_are_ground_truth_crops() {
    let cases = corpus(1);
    let b = StagewiseBundle::from_joint(&joint_bundles(5)[0]);
    let axis = b.viewpoint;
    for &idx in cases[0].mask.occupied_slices(axis).iter().step_by(3) {
        let stack = slice_stack(&cases[0].volume, axis, idx)
            .unwrap()
            .to_tensor();
        let y = cases[0].mask.slice_tensor(axis, idx).unwrap();
        let mut g = Graph::new();
        let nets = Nets::register(&mut g, &b.coarse, &b.fine, None);
        let rec =
            record_unroll(&mut g, &nets, &stack, &y, 2, 4, ReferenceMode::GroundTruth).unwrap();
        let (plain, bx) = crop(&stack, &y, 4).unwrap();
        let min = b.fine.architecture().min_extent;
        let (rows, cols) = axis.slice_dims(cases[0].mask.extents());
        if bx.at_least(min, rows, cols) == bx {
            assert_eq!(rec.state.inputs[1], plain, "slice {idx}");
            assert_eq!(rec.state.inputs[2], plain, "slice {idx}");
        }
        assert_eq!(rec.state.boxes[1], Some(bx.at_least(min, rows, cols)));
    }
}

#[test]
fn stagewise_training_is_deterministic_and_round_trips() {
    let cases = corpus(2);
    let a = stagewise_train(&cases, &tiny_config(), &short_config(), 4).unwrap();
    let b = stagewise_train(&cases, &tiny_config(), &short_config(), 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.log.records.len(), 18);
    assert_eq!(a.log.records[0].loss_terms.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("view.json");
    a.bundles[1].save(&p).unwrap();
    assert_eq!(StagewiseBundle::load(&p).unwrap(), a.bundles[1]);
    // a stage-wise file is not a joint bundle
    assert!(ModelBundle::load(&p).is_err());
}

#[test]
fn stagewise_and_joint_start_from_the_same_networks() {
    let cases = corpus(1);
    let cfg = TrainConfig {
        phase1_steps: 0,
        phase2_steps: 0,
        ..short_config()
    };
    let (s, _) = stagewise_train_viewpoint(&cases, Axis::Coronal, &tiny_config(), &cfg, 8).unwrap();
    let (j, _) =
        crate::rstn::train_viewpoint(&cases, Axis::Coronal, &tiny_config(), &cfg, 8).unwrap();
    assert_eq!(s, StagewiseBundle::from_joint(&j));
}

#[test]
fn mixed_views_carry_saliency_with_joint_fine_network() {
    let joint = joint_bundles(7);
    let stage = joint_bundles(8).map(|b| StagewiseBundle::from_joint(&b));
    for coarse in [Source::Stagewise, Source::Joint] {
        for fine in [Source::Stagewise, Source::Joint] {
            let v = mixed_views(&joint, &stage, coarse, fine).unwrap();
            for (i, view) in v.iter().enumerate() {
                let want_coarse = if coarse == Source::Joint {
                    &joint[i].coarse
                } else {
                    &stage[i].coarse
                };
                assert!(std::ptr::eq(view.coarse, want_coarse));
                assert_eq!(view.saliency.is_some(), fine == Source::Joint);
            }
        }
    }
}

#[test]
fn mix_and_match_reproduces_pure_methods() {
    let cases = corpus(2);
    let joint = joint_bundles(11);
    let stage = joint_bundles(12).map(|b| StagewiseBundle::from_joint(&b));
    let ids = |v: &[usize]| v.iter().map(|&i| cases[i].id.clone()).collect::<Vec<_>>();
    let jf = vec![FoldModels {
        fold: 0,
        train_ids: ids(&[0]),
        test_ids: ids(&[1]),
        bundles: joint.clone(),
    }];
    let sf = vec![FoldModels {
        fold: 0,
        train_ids: ids(&[0]),
        test_ids: ids(&[1]),
        bundles: stage.clone(),
    }];
    let report = mix_and_match(&jf, &sf, &cases, &infer_cfg()).unwrap();
    assert_eq!(report.entries.len(), 4);

    let (z, _) = segment_volume(&joint, &cases[1].volume, &infer_cfg()).unwrap();
    let jj = report.entry(Source::Joint, Source::Joint).unwrap();
    assert_eq!(jj.dsc, vec![dsc(&z, &cases[1].mask).unwrap()]);
    let (z, _) = stagewise_infer(&stage, &cases[1].volume, &infer_cfg()).unwrap();
    let ss = report.entry(Source::Stagewise, Source::Stagewise).unwrap();
    assert_eq!(ss.dsc, vec![dsc(&z, &cases[1].mask).unwrap()]);
    assert_eq!(ss.std, 0.0);

    let mut bad = sf.clone();
    bad[0].train_ids = ids(&[1]);
    assert!(mix_and_match(&jf, &bad, &cases, &infer_cfg()).is_err());
    assert!(mix_and_match(&jf, &[], &cases, &infer_cfg()).is_err());
}

#[test]
fn mean_std_matches_two_pass_formula() {
    let mut rng = SplitMix64::new(1);
    for n in 1..30 {
        let v: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let (m, s) = mean_std(&v);
        // Welford update as an independent route
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, x) in v.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        assert!((m - mean).abs() < 1e-12);
        assert!((s - (m2 / n as f64).sqrt()).abs() < 1e-12);
    }
    assert!(mean_std(&[]).0.is_nan());
}
