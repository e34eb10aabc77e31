use proptest::prelude::*;

use super::*;
use crate::rng::SplitMix64;

fn ramp_volume(e: [usize; 3]) -> Volume {
    let n = e[0] * e[1] * e[2];
    let data = (0..n).map(|i| i as f32 / n as f32).collect();
    Volume::new(e, [1.0; 3], data).unwrap()
}

fn random_mask(e: [usize; 3], p: f64, rng: &mut SplitMix64) -> LabelMask {
    let n = e[0] * e[1] * e[2];
    LabelMask::new(e, (0..n).map(|_| u8::from(rng.next_f64() < p)).collect()).unwrap()
}

#[test]
fn stack_uses_neighbouring_slices() {
    let v = ramp_volume([4, 5, 12]);
    let s = slice_stack(&v, Axis::Axial, 5).unwrap();
    for (c, idx) in [4, 5, 6].into_iter().enumerate() {
        assert_eq!(s.channel(c), v.slice(Axis::Axial, idx).unwrap().as_slice());
    }
}

#[test]
fn stack_replicates_edges() {
    let v = ramp_volume([4, 5, 12]);
    let s = slice_stack(&v, Axis::Axial, 0).unwrap();
    let s0 = v.slice(Axis::Axial, 0).unwrap();
    assert_eq!(s.channel(0), s0.as_slice());
    assert_eq!(s.channel(1), s0.as_slice());
    assert_eq!(s.channel(2), v.slice(Axis::Axial, 1).unwrap().as_slice());
    let s = slice_stack(&v, Axis::Axial, 11).unwrap();
    assert_eq!(s.channel(2), s.channel(1));
}

#[test]
fn stack_shapes_per_axis() {
    let v = ramp_volume([8, 9, 10]);
    let s = slice_stack(&v, Axis::Coronal, 3).unwrap();
    assert_eq!((s.rows, s.cols), (9, 10));
    assert_eq!(s.to_tensor().shape(), &[3, 9, 10]);
    let s = slice_stack(&v, Axis::Sagittal, 3).unwrap();
    assert_eq!((s.rows, s.cols), (8, 10));
    let s = slice_stack(&v, Axis::Axial, 3).unwrap();
    assert_eq!((s.rows, s.cols), (8, 9));
    assert!(slice_stack(&v, Axis::Coronal, 8).is_err());
}

#[test]
fn slices_address_the_right_voxels() {
    let v = ramp_volume([4, 5, 6]);
    let s = v.slice(Axis::Sagittal, 2).unwrap();
    // row = x, col = z
    assert_eq!(s[3 * 6 + 4] as f32, v.get(3, 2, 4));
    let s = v.slice(Axis::Coronal, 1).unwrap();
    assert_eq!(s[4 * 6 + 5] as f32, v.get(1, 4, 5));
}

#[test]
fn volume_validation() {
    assert!(Volume::new([2, 5, 5], [1.0; 3], vec![0.0; 50]).is_err());
    assert!(Volume::new([3, 3, 3], [1.0; 3], vec![0.0; 26]).is_err());
    assert!(Volume::new([3, 3, 3], [1.0; 3], vec![1.5; 27]).is_err());
    assert!(LabelMask::new([3, 3, 3], vec![2; 27]).is_err());
    let raw: Vec<f64> = (0..27).map(|i| i as f64 * 100.0 - 500.0).collect();
    let v = Volume::from_window([3, 3, 3], [1.0; 3], &raw, (-100.0, 300.0)).unwrap();
    assert_eq!(v.data()[0], 0.0);
    assert_eq!(v.data()[26], 1.0);
    assert_eq!(v.data()[4], 0.0);
    assert_eq!(v.data()[5], 0.25);
}

#[test]
fn reassemble_round_trips_center_channels() {
    let v = ramp_volume([6, 7, 8]);
    for axis in Axis::ALL {
        let maps: Vec<Tensor> = (0..axis.extent(v.extents()))
            .map(|i| {
                let s = slice_stack(&v, axis, i).unwrap();
                let (r, c) = (s.rows, s.cols);
                Tensor::new(vec![1, r, c], s.channel(1).to_vec()).unwrap()
            })
            .collect();
        let p = reassemble(&maps, axis, v.extents()).unwrap();
        for (a, b) in p.data().iter().zip(v.data()) {
            assert_eq!(*a, f64::from(*b));
        }
        for (i, m) in maps.iter().enumerate() {
            assert_eq!(p.slice(axis, i).unwrap(), m.data());
        }
    }
}

#[test]
fn reassemble_constant_and_errors() {
    let e = [4, 5, 6];
    let maps = vec![Tensor::full(&[4, 5], 0.3); 6];
    let p = reassemble(&maps, Axis::Axial, e).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.3));
    assert!(reassemble(&maps[..5], Axis::Axial, e).is_err());
    let mut bad = maps.clone();
    bad[2] = Tensor::full(&[5, 4], 0.3);
    assert!(reassemble(&bad, Axis::Axial, e).is_err());
}

#[test]
fn dsc_examples() {
    let e = [3, 3, 3];
    let mut a = vec![0u8; 27];
    let mut b = vec![0u8; 27];
    a[0] = 1;
    a[1] = 1;
    b[1] = 1;
    b[2] = 1;
    let (ma, mb) = (
        LabelMask::new(e, a.clone()).unwrap(),
        LabelMask::new(e, b).unwrap(),
    );
    assert_eq!(dsc(&ma, &mb).unwrap(), 0.5);
    assert_eq!(dsc(&ma, &ma).unwrap(), 1.0);
    let mut c = vec![0u8; 27];
    c[20] = 1;
    assert_eq!(dsc(&ma, &LabelMask::new(e, c).unwrap()).unwrap(), 0.0);
    assert_eq!(
        dsc(&LabelMask::empty(e), &LabelMask::empty(e)).unwrap(),
        1.0
    );
    assert!(dsc(&ma, &LabelMask::empty([3, 3, 4])).is_err());
}

#[test]
fn fusion_examples() {
    let e = [3, 3, 3];
    let p = ProbVolume::new(e, (0..27).map(|i| i as f64 / 26.0).collect()).unwrap();
    let (f, _) = fuse_and_binarize(&p, &p, &p).unwrap();
    for (a, b) in f.data().iter().zip(p.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    let a = ProbVolume::new(e, vec![0.6; 27]).unwrap();
    let c = ProbVolume::new(e, vec![0.3; 27]).unwrap();
    let (f, m) = fuse_and_binarize(&a, &a, &c).unwrap();
    assert_eq!(f.data()[0], 0.5);
    assert_eq!(m.count(), 27);

    let z = ProbVolume::new(e, vec![0.0; 27]).unwrap();
    let (_, m) = fuse_and_binarize(&z, &z, &z).unwrap();
    assert!(m.is_empty());

    let other = ProbVolume::new([3, 3, 4], vec![0.0; 36]).unwrap();
    assert!(fuse_and_binarize(&z, &z, &other).is_err());
}

#[test]
fn occupied_slices_lists_foreground() {
    let e = [4, 4, 4];
    let mut d = vec![0u8; 64];
    d[1 + 4 * (2 + 4 * 3)] = 1; // (1,2,3)
    let m = LabelMask::new(e, d).unwrap();
    assert_eq!(m.occupied_slices(Axis::Coronal), vec![1]);
    assert_eq!(m.occupied_slices(Axis::Sagittal), vec![2]);
    assert_eq!(m.occupied_slices(Axis::Axial), vec![3]);
}

#[test]
fn rvol_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let v = ramp_volume([5, 4, 3]);
    let p = dir.path().join("v.json");
    rvol::save_volume(&v, &p).unwrap();
    assert_eq!(rvol::load_volume(&p).unwrap(), v);
    assert!(rvol::load_mask(&p).is_err(), "dtype mismatch");

    let header: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(header["dtype"], "f32");
    assert_eq!(header["byte-order"], "little");
    assert_eq!(header["data-file"], "v.raw");
    let raw = std::fs::read(dir.path().join("v.raw")).unwrap();
    assert_eq!(raw.len(), 60 * 4);
    assert_eq!(&raw[4..8], &v.data()[1].to_le_bytes());

    std::fs::write(dir.path().join("v.raw"), &raw[..10]).unwrap();
    assert!(rvol::load_volume(&p).is_err());
}

/// Counting oracle: enumerate voxel coordinates explicitly.
fn brute_force_dsc(a: &LabelMask, b: &LabelMask) -> f64 {
    let [w, h, l] = a.extents();
    let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                let i = x + w * (y + h * z);
                let (ia, ib) = (a.data()[i] == 1, b.data()[i] == 1);
                if ia {
                    na += 1.0;
                }
                if ib {
                    nb += 1.0;
                }
                if ia && ib {
                    inter += 1.0;
                }
            }
        }
    }
    if na + nb == 0.0 {
        1.0
    } else {
        2.0 * inter / (na + nb)
    }
}

proptest! {
    #[test]
    fn dsc_properties(seed in any::<u64>(), pa in 0.0f64..0.6, pb in 0.0f64..0.6) {
        let mut rng = SplitMix64::new(seed);
        let e = [8, 8, 8];
        let a = random_mask(e, pa, &mut rng);
        let b = random_mask(e, pb, &mut rng);
        let d = dsc(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert!((d - brute_force_dsc(&a, &b)).abs() <= 1e-12);
        if !a.is_empty() {
            prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn fusion_stays_in_unit_interval(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let e = [4, 3, 5];
        let mk = |rng: &mut SplitMix64| ProbVolume::new(e, (0..60).map(|_| rng.next_f64()).collect()).unwrap();
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let (f, m) = fuse_and_binarize(&a, &b, &c).unwrap();
        for (i, &p) in f.data().iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(m.data()[i], u8::from(p >= 0.5));
        }
    }

    #[test]
    fn rvol_is_bit_exact(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let e = [3 + rng.below(5), 3 + rng.below(5), 3 + rng.below(5)];
        let n = e[0] * e[1] * e[2];
        let v = Volume::new(e, [rng.uniform(0.5, 2.0), 1.0, 0.7], (0..n).map(|_| rng.next_f64() as f32).collect()).unwrap();
        let m = random_mask(e, 0.3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        rvol::save_volume(&v, dir.path().join("a.json")).unwrap();
        rvol::save_mask(&m, v.spacing(), dir.path().join("b.json")).unwrap();
        let v2 = rvol::load_volume(dir.path().join("a.json")).unwrap();
        prop_assert_eq!(v2.spacing().map(f64::to_bits), v.spacing().map(f64::to_bits));
        prop_assert!(v2.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(rvol::load_mask(dir.path().join("b.json")).unwrap(), m);
    }
}
