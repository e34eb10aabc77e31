use super::*;
use crate::model::{Architecture, ModelConfig, SaliencyConfig};
use crate::rng::SplitMix64;
use crate::synthgen::{generate, PhantomSpec};

fn phantom() -> (Volume, LabelMask) {
    let spec = PhantomSpec {
        extents: [32, 32, 32],
        target_fraction: [0.02, 0.03],
        clutter_count: [1, 2],
        ..PhantomSpec::reference(5)
    };
    generate(&spec).unwrap()
}

fn bundles(seed: u64) -> [ModelBundle; 3] {
    let cfg = ModelConfig {
        architecture: Architecture::tiny(),
        saliency: SaliencyConfig {
            kernel: 3,
            layers: 1,
        },
    };
    let mut rng = SplitMix64::new(seed);
    Axis::ALL.map(|a| {
        let mut b = ModelBundle::init(a, &cfg, seed + a.dim() as u64).unwrap();
        for t in b.saliency.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.uniform(-0.3, 0.3);
            }
        }
        b
    })
}

/// Push the output layer bias of a backbone so it saturates.
fn set_output_bias(p: &mut BackboneParams, bias: f64) {
    let convs = p.tensors_mut();
    let n = convs.len();
    let mut it = convs.into_iter();
    let kernel = it.nth(n - 2).unwrap();
    kernel.data_mut().iter_mut().for_each(|v| *v = 0.0);
    it.next().unwrap().data_mut()[0] = bias;
}

fn cfg(t: usize, thr: f64) -> InferenceConfig {
    InferenceConfig {
        max_iterations: t,
        threshold: thr,
        margin: 3,
        ..InferenceConfig::default()
    }
}

#[test]
fn identical_consecutive_masks_stop_on_threshold() {
    let (x, _) = phantom();
    let mut b = bundles(1);
    for v in &mut b {
        set_output_bias(&mut v.coarse, 10.0);
        set_output_bias(&mut v.fine, -10.0);
    }
    let (z, trace) = segment_volume(&b, &x, &cfg(5, 0.99)).unwrap();
    assert_eq!(trace.voxel_counts[0], 32 * 32 * 32);
    // fine stage predicts nothing twice in a row
    assert_eq!(trace.d, vec![0.0, 1.0]);
    assert_eq!(trace.iterations, 2);
    assert_eq!(trace.termination, Termination::Threshold);
    assert_eq!(trace.fallback_iterations, vec![2]);
    assert!(z.is_empty());
}

#[test]
fn threshold_one_runs_to_the_cap_unless_fixed() {
    let (x, _) = phantom();
    let b = bundles(2);
    let (_, trace) = segment_volume(&b, &x, &cfg(3, 1.0)).unwrap();
    assert!(trace.d.iter().all(|d| (0.0..=1.0).contains(d)));
    if trace.d.iter().all(|&d| d < 1.0) {
        assert_eq!(trace.iterations, 3);
        assert_eq!(trace.termination, Termination::MaxIterations);
    } else {
        assert_eq!(*trace.d.last().unwrap(), 1.0);
        assert_eq!(trace.termination, Termination::Threshold);
    }
    assert_eq!(trace.masks.len(), trace.iterations + 1);
    assert_eq!(trace.voxel_counts.len(), trace.iterations + 1);
}

#[test]
fn mask_is_final_trace_entry_and_runs_are_reproducible() {
    let (x, _) = phantom();
    let b = bundles(3);
    let (z, trace) = segment_volume(&b, &x, &cfg(3, 0.999)).unwrap();
    assert_eq!(&z, trace.final_mask());
    let (z2, trace2) = segment_volume(&b, &x, &cfg(3, 0.999)).unwrap();
    assert_eq!(z, z2);
    assert_eq!(trace, trace2);
}

#[test]
fn coarse_stage_ignores_fine_networks() {
    let (x, _) = phantom();
    let b = bundles(4);
    let (_, trace) = segment_volume(&b, &x, &cfg(1, 0.99)).unwrap();
    let mut altered = b.clone();
    for v in &mut altered {
        set_output_bias(&mut v.fine, 3.0);
        v.saliency.set_identity();
    }
    let (_, trace2) = segment_volume(&altered, &x, &cfg(1, 0.99)).unwrap();
    assert_eq!(trace.probs[0], trace2.probs[0]);
    assert_eq!(trace.masks[0], trace2.masks[0]);
    let views = [b[0].view(), b[1].view(), b[2].view()];
    let (p0, _) = coarse_stage(&views, &x).unwrap();
    assert_eq!(p0, trace.probs[0]);
}

#[test]
fn stored_reference_reproduces_each_iteration() {
    let (x, _) = phantom();
    let b = bundles(5);
    let config = cfg(3, 1.0);
    let (_, trace) = segment_volume(&b, &x, &config).unwrap();
    let views = [b[0].view(), b[1].view(), b[2].view()];
    for t in 1..=trace.iterations {
        let r = refine(
            &views,
            &x,
            &trace.probs[t - 1],
            BoxSource::Previous,
            &config,
        )
        .unwrap();
        assert_eq!(r.mask, trace.masks[t]);
        assert_eq!(r.prob, trace.probs[t]);
        assert_eq!(r.boxes, trace.boxes[t - 1]);
    }
}

#[test]
fn oracle_mode_uses_ground_truth_boxes() {
    let (x, y) = phantom();
    let b = bundles(6);
    let mut config = cfg(2, 0.99);
    let (_, trace) = segment_with_oracle_boxes(&b, &x, &y, &config).unwrap();
    assert!(trace.oracle);
    for (vi, axis) in Axis::ALL.into_iter().enumerate() {
        let occupied = y.occupied_slices(axis);
        for (i, bx) in trace.boxes[0][vi].iter().enumerate() {
            assert_eq!(bx.is_some(), occupied.contains(&i), "{axis} slice {i}");
            if let Some(bx) = bx {
                let s = y.slice(axis, i).unwrap();
                let (rows, cols) = axis.slice_dims(y.extents());
                let r: Vec<f64> = s.into_iter().map(f64::from).collect();
                let want = crate::rstn::crop_box(&r, rows, cols, 3);
                assert_eq!(*bx, want);
            }
        }
    }
    // with the whole-image policy, empty ground-truth slices are not skipped
    config.empty_reference = EmptyReference::WholeImage;
    let (_, trace) = segment_with_oracle_boxes(&b, &x, &y, &config).unwrap();
    let (rows, cols) = Axis::Axial.slice_dims(y.extents());
    let empty = (0..32)
        .find(|i| !y.occupied_slices(Axis::Axial).contains(i))
        .unwrap();
    assert_eq!(trace.boxes[0][2][empty], Some(CropBox::whole(rows, cols)));
}

#[test]
fn inter_iteration_dsc_matches_volume_dsc() {
    let mut rng = SplitMix64::new(8);
    let e = [6, 5, 4];
    let mut mk = |p: f64| {
        LabelMask::new(e, (0..120).map(|_| u8::from(rng.next_f64() < p)).collect()).unwrap()
    };
    for i in 0..100 {
        let p = (i % 10) as f64 / 20.0;
        let (a, b) = (mk(p), mk(0.25));
        assert_eq!(inter_iteration_dsc(&a, &b).unwrap(), dsc(&a, &b).unwrap());
    }
    let a = mk(0.5);
    assert_eq!(inter_iteration_dsc(&a, &a).unwrap(), 1.0);
    let mut inv = a.data().to_vec();
    inv.iter_mut().for_each(|v| *v = 1 - *v);
    assert_eq!(
        inter_iteration_dsc(&a, &LabelMask::new(e, inv).unwrap()).unwrap(),
        0.0
    );
}

#[test]
fn config_and_view_validation() {
    assert!(InferenceConfig {
        threshold: 0.0,
        ..InferenceConfig::default()
    }
    .validate()
    .is_err());
    assert!(InferenceConfig {
        threshold: 1.5,
        ..InferenceConfig::default()
    }
    .validate()
    .is_err());
    assert!(InferenceConfig {
        max_iterations: 0,
        ..InferenceConfig::default()
    }
    .validate()
    .is_err());
    let (x, _) = phantom();
    let b = bundles(9);
    let views = [b[0].view(), b[0].view(), b[2].view()];
    assert!(run_pipeline(&views, &x, &cfg(1, 0.9), None).is_err());
}

#[test]
fn trace_file_schema() {
    let (x, _) = phantom();
    let b = bundles(10);
    let (_, trace) = segment_volume(&b, &x, &cfg(2, 0.99)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.json");
    trace.save(&p).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(v["iterations"], trace.iterations);
    assert_eq!(v["d_sequence"].as_array().unwrap().len(), trace.iterations);
    assert!(["threshold", "max-iterations"].contains(&v["termination"].as_str().unwrap()));
    assert_eq!(
        v["voxel_counts"].as_array().unwrap().len(),
        trace.iterations + 1
    );
}
