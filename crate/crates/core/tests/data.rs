use mcads_core::data::netpbm::{self, Raster};
use mcads_core::data::*;
use mcads_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ramp(h: usize, w: usize, c: usize) -> Tensor<f32> {
    Tensor::new(vec![h, w, c], (0..h * w * c).map(|i| (i % 251) as f32 / 250.0).collect()).unwrap()
}

#[test]
fn lattice_for_thousand_pixel_images() {
    let g = plan_patches((1000, 1000), 256, 128).unwrap();
    assert_eq!(g.padded_hw, (1024, 1024));
    let rows: Vec<usize> = g.offsets.iter().filter(|o| o.1 == 0).map(|o| o.0).collect();
    assert_eq!(rows, vec![0, 128, 256, 384, 512, 640, 768]);
    assert_eq!(g.offsets.len(), 49);
}

#[test]
fn exact_fits_use_one_patch() {
    assert_eq!(plan_patches((256, 256), 256, 128).unwrap().offsets, vec![(0, 0)]);
    assert_eq!(plan_patches((64, 64), 64, 32).unwrap().offsets, vec![(0, 0)]);
    let small = plan_patches((40, 50), 64, 32).unwrap();
    assert_eq!((small.padded_hw, small.offsets.len()), ((64, 64), 1));
}

#[test]
fn coverage_counts_follow_lattice_geometry() {
    let g = plan_patches((1000, 1000), 256, 128).unwrap();
    let cov = g.coverage();
    let at = |y: usize, x: usize| cov[y * 1024 + x];
    // One patch per axis covers [0, 128) and [896, 1024); two cover the rest.
    assert_eq!(at(500, 500), 4);
    assert_eq!(at(128, 895), 4);
    assert_eq!(at(0, 0), 1);
    assert_eq!(at(1023, 1023), 1);
    assert_eq!(at(50, 500), 2);
    let expected = |v: usize| if !(128..896).contains(&v) { 1 } else { 2 };
    assert!((0..1024).step_by(7).all(|y| (0..1024).step_by(5).all(|x| at(y, x) == expected(y) * expected(x))));
}

#[test]
fn interior_patch_is_a_direct_slice() {
    let img = ramp(100, 90, 3);
    let g = plan_patches((100, 90), 32, 16).unwrap();
    let patches = g.extract(&img).unwrap();
    assert_eq!(patches.len(), g.offsets.len());
    let i = g.offsets.iter().position(|&o| o == (32, 48)).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                assert_eq!(patches[i].get(&[y, x, c]), img.get(&[32 + y, 48 + x, c]));
            }
        }
    }
}

#[test]
fn reflect_padding_mirrors_the_last_rows() {
    let img = ramp(5, 5, 1);
    let g = plan_patches((5, 5), 4, 2).unwrap();
    assert_eq!(g.padded_hw, (6, 6));
    let p = g.extract(&img).unwrap();
    let last = g.offsets.iter().position(|&o| o == (2, 2)).unwrap();
    // Padded row 5 mirrors row 3.
    assert_eq!(p[last].get(&[3, 0, 0]), img.get(&[3, 2, 0]));
}

#[test]
fn sample_patches_keep_masks_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = synth_dataset(1, 64, &mut rng).unwrap().remove(0);
    let g = plan_patches((64, 64), 48, 16).unwrap();
    let ps = s.patches(&g).unwrap();
    assert_eq!(ps.len(), 4);
    for p in &ps {
        p.validate().unwrap();
    }
    assert_eq!(ps[1].id, "synth_0000_r0_c16");
}

#[test]
fn reassembly_averages() {
    let g = plan_patches((96, 96), 64, 32).unwrap();
    let flat = vec![Tensor::full(vec![64, 64, 1], 0.7f64); g.offsets.len()];
    assert!(g.reassemble(&flat).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let g = plan_patches((64, 96), 64, 32).unwrap();
    assert_eq!(g.offsets, vec![(0, 0), (0, 32)]);
    let preds = vec![Tensor::full(vec![64, 64, 1], 0.2f64), Tensor::full(vec![64, 64, 1], 0.6)];
    let out = g.reassemble(&preds).unwrap();
    assert!((out.get(&[10, 40, 0]) - 0.4).abs() < 1e-15);
    assert_eq!(out.get(&[10, 10, 0]), 0.2);
    assert_eq!(out.get(&[10, 90, 0]), 0.6);
}

#[test]
fn reassembly_and_extraction_errors() {
    let g = plan_patches((96, 96), 64, 32).unwrap();
    assert!(g.reassemble(&[Tensor::<f32>::zeros(vec![64, 64, 1])]).is_err());
    assert!(g.extract(&ramp(64, 64, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extract_then_reassemble_is_identity(h in 1usize..70, w in 1usize..70, patch in 1usize..24, s in 1usize..24) {
        let stride = s.min(patch);
        let img = ramp(h, w, 2).cast::<f64>();
        let g = plan_patches((h, w), patch, stride).unwrap();
        let (ph, pw) = g.padded_hw;
        prop_assert!(ph >= h && pw >= w && ph >= patch);
        prop_assert_eq!((ph - patch) % stride, 0);
        prop_assert!(g.coverage().iter().all(|&c| c >= 1));
        let back = g.reassemble(&g.extract(&img).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_preserves_values_and_pairs_transforms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.gen_range(2..9);
        let w = rng.gen_range(2..9);
        let image = Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0f32)).collect()).unwrap();
        // The mask is a function of the image, so a shared transform keeps the relation.
        let mask = Tensor::new(vec![h, w, 1], image.data().chunks(3).map(|p| (p[0] > 0.5) as u8 as f32).collect()).unwrap();
        let s = Sample { id: "x".into(), image, mask };
        let (a, d) = augment(&s, &mut rng);
        a.validate().unwrap();
        for (p, &m) in a.image.data().chunks(3).zip(a.mask.data()) {
            prop_assert_eq!((p[0] > 0.5) as u8 as f32, m);
        }
        let mut before: Vec<f32> = s.image.data().to_vec();
        let mut after: Vec<f32> = a.image.data().to_vec();
        before.sort_by(f32::total_cmp);
        after.sort_by(f32::total_cmp);
        prop_assert_eq!(before, after);
        prop_assert_eq!(d.apply(&s.mask), a.mask);
    }

    #[test]
    fn dihedral_group_is_closed(i in 0usize..8, j in 0usize..8) {
        let probe = ramp(3, 4, 1);
        let all = Dihedral::all();
        let composed = all[i].apply(&all[j].apply(&probe));
        prop_assert!(all.iter().any(|d| d.apply(&probe) == composed));
    }
}

#[test]
fn double_flip_is_identity() {
    let img = ramp(5, 7, 3);
    let h = Dihedral { hflip: true, ..Dihedral::default() };
    assert_eq!(h.apply(&h.apply(&img)), img);
    let r = Dihedral { rot90: true, ..Dihedral::default() };
    assert_eq!(r.apply(&r.apply(&r.apply(&r.apply(&img)))), img);
    assert_eq!(Dihedral::default().apply(&img), img);
}

#[test]
fn synthetic_generator_audit() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = synth_dataset(4, 64, &mut rng).unwrap();
        assert_eq!(set.len(), 4);
        for s in &set {
            s.validate().unwrap();
            assert_eq!(s.image.shape(), &[64, 64, 3]);
            let fg = s.mask.data().iter().filter(|&&m| m == 1.0).count();
            let frac = fg as f64 / 4096.0;
            assert!((0.05..=0.5).contains(&frac), "seed {seed}: {frac}");
            assert!((1..4096).contains(&fg));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn synthetic_generator_is_deterministic() {
    let a = synth_dataset(3, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = synth_dataset(3, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c = synth_dataset(3, 32, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(synth_dataset(1, 48, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn netpbm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for channels in [1, 3] {
        let r = Raster { width: 7, height: 5, channels, data: (0..35 * channels).map(|_| rng.gen()).collect() };
        let path = dir.path().join(format!("x{channels}.pnm"));
        netpbm::write(&path, &r).unwrap();
        assert_eq!(netpbm::read(&path).unwrap(), r);
        assert_eq!(Raster::from_tensor(&r.to_tensor()).unwrap(), r);
    }
    let path = dir.path().join("deep.pgm");
    std::fs::write(&path, b"P5\n1 1\n65535\n\x00\x01").unwrap();
    assert!(netpbm::read(&path).is_err());
    let m = Raster { width: 2, height: 1, channels: 1, data: vec![255, 0] }.to_mask().unwrap();
    assert_eq!(m.data(), &[1.0, 0.0]);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth_dataset(3, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    save_dir(dir.path(), &set).unwrap();
    assert!(dir.path().join("images/synth_0001.ppm").exists());
    assert!(dir.path().join("masks/synth_0001.pgm").exists());
    let back = load_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.iter().zip(&set) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
    assert!(load_dir(dir.path().join("missing")).is_err());
}

#[test]
fn split_and_stack() {
    let set = synth_dataset(10, 32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (train, val) = split(set.clone(), 0.2);
    assert_eq!((train.len(), val.len()), (8, 2));
    assert_eq!(val[0].id, "synth_0008");
    let (t1, v1) = split(set[..1].to_vec(), 0.2);
    assert_eq!((t1.len(), v1.len()), (1, 0));
    let b = stack(&train.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    assert_eq!(b.shape(), &[8, 32, 32, 3]);
    assert!(stack(&[]).is_err());
}
