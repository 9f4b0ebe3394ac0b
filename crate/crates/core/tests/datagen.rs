use std::fs;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use warpsynth::datagen::{
    generate_dataset, make_pair, procedural_image, sample_seed, swap_channels, DatasetConfig, DatasetManifest,
    MANIFEST_NAME,
};
use warpsynth::deform::{compose, grid, warp, Deformation, Image, Mask, Preset, SimDeformParams};
use warpsynth::metrics::mde;
use warpsynth::{Tape, Tensor};

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig { preset: "LR".into(), size: 32, train: 3, val: 2, test: 2, seed, image_dir: None }
}

#[test]
fn regeneration_is_byte_identical_and_counts_match() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&small_config(11), a.path()).unwrap();
    generate_dataset(&small_config(11), b.path()).unwrap();
    let loaded = DatasetManifest::load(&a.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(loaded, ma);
    for split in ["train", "val", "test"] {
        assert_eq!(loaded.split(split).len(), fs::read_dir(a.path().join(split)).unwrap().count() / 5);
        for f in loaded.split(split) {
            for rel in [&f.x, &f.y_tilde, &f.y_mask, &f.y_true, &f.d_true] {
                assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
            }
        }
    }
    assert_eq!(fs::read(a.path().join(MANIFEST_NAME)).unwrap(), fs::read(b.path().join(MANIFEST_NAME)).unwrap());
}

#[test]
fn failed_generation_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { image_dir: Some(dir.path().join("missing")), ..small_config(1) };
    assert!(generate_dataset(&cfg, dir.path()).is_err());
    assert!(!dir.path().join(MANIFEST_NAME).exists());
    let cfg = DatasetConfig { size: 20, ..small_config(1) };
    assert!(generate_dataset(&cfg, dir.path()).is_err());
    assert_eq!(fs::read_dir(dir.path().join("train")).unwrap().count(), 0);
}

#[test]
fn stored_samples_are_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(5);
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    let params = SimDeformParams::preset_for_size(Preset::LargeRandom, 32);
    for (i, f) in m.split("val").iter().enumerate() {
        let s = DatasetManifest::load_sample(dir.path(), f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 1, i));
        let x = procedural_image(&mut rng, 32, 32).unwrap();
        let again = make_pair(x, &params, &mut rng).unwrap();
        assert_eq!(s.x, again.x);
        assert_eq!(s.y_true, swap_channels(&s.x).unwrap());
        assert_eq!(s.d_true, again.deformation.inverse);
        let tape = Tape::new();
        let fwd = again.deformation.to_deformation(&tape).unwrap();
        let y = warp(&Image::full(tape.constant(s.y_true.clone())).unwrap(), &fwd).unwrap();
        assert_eq!(*y.data.value(), s.y_tilde);
        assert_eq!(y.mask, s.y_mask);
    }
}

#[test]
fn ground_truth_round_trip_for_every_preset() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for preset in ["LR", "SR", "LC", "SC"] {
        let p = SimDeformParams::preset_for_size(Preset::parse(preset).unwrap(), 64);
        let x = procedural_image(&mut rng, 64, 64).unwrap();
        let s = make_pair(x, &p, &mut rng).unwrap();
        let tape = Tape::new();
        let fwd = s.deformation.to_deformation(&tape).unwrap();
        let inv = Deformation::dense(tape.constant(s.deformation.inverse.clone()), Mask::full(64, 64)).unwrap();
        let round = compose(&inv, &fwd).unwrap();
        // Pixels whose inverse image leaves the grid have no meaningful round trip.
        let inside = Mask::from_fn(64, 64, |r, c| {
            let q = r * 64 + c;
            let (a, b) = (s.deformation.inverse.data()[q], s.deformation.inverse.data()[4096 + q]);
            (0.0..=63.0).contains(&a) && (0.0..=63.0).contains(&b)
        });
        let err = mde(&round.coords().unwrap().value(), &grid(64, 64), &inside).unwrap();
        assert!(err < 0.1, "{preset}: {err}");
    }
}

#[test]
fn large_random_preset_moves_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = SimDeformParams::preset_for_size(Preset::LargeRandom, 48);
    for _ in 0..5 {
        let s = make_pair(procedural_image(&mut rng, 48, 48).unwrap(), &p, &mut rng).unwrap();
        assert!(mde(&s.deformation.inverse, &grid(48, 48), &Mask::full(48, 48)).unwrap() > 0.0);
    }
}

#[test]
fn channels_are_distinguishable() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut gaps = [0.0; 3];
    for _ in 0..100 {
        let x = procedural_image(&mut rng, 32, 32).unwrap();
        let mean = |c: usize| x.data()[c * 1024..(c + 1) * 1024].iter().sum::<f64>() / 1024.0;
        for (k, (i, j)) in [(0, 1), (1, 2), (0, 2)].into_iter().enumerate() {
            gaps[k] += (mean(i) - mean(j)).abs() / 100.0;
        }
    }
    assert!(gaps.iter().all(|&g| g > 1.0), "{gaps:?}");
}

#[test]
fn desk_default_generates_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let m = generate_dataset(&DatasetConfig::default(), dir.path()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!((m.split("train").len(), m.split("val").len(), m.split("test").len()), (200, 20, 50));
    assert!(elapsed < 60.0, "{elapsed} s");
    let s = DatasetManifest::load_sample(dir.path(), &m.split("test")[0]).unwrap();
    assert_eq!(s.x.shape(), &[3, 96, 96]);
    assert_eq!(s.d_true.shape(), Tensor::zeros(&[2, 96, 96]).shape());
}
