use part_core::data::{
    decode_pnm, encode_pgm, encode_ppm, generate_dataset, load_dataset, load_pgm, load_ppm, render_template,
    save_dataset, save_pgm, save_ppm, Image, MotifLayout, SynthSpec,
};
use part_core::model::{ModelConfig, PartModel};
use part_core::tensor::{load_checkpoint, save_checkpoint};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { per_class: 5, seed, ..SynthSpec::default() }
}

#[test]
fn templates_differ_only_inside_motif_boxes() {
    let spec = SynthSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let layout = MotifLayout::sample(&spec, &mut rng);
        for a in 0..spec.classes {
            let ta = render_template(&spec, a, &layout).unwrap();
            for b in a + 1..spec.classes {
                let tb = render_template(&spec, b, &layout).unwrap();
                let mut inside_diff = false;
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let d = ta.get(x, y, 0) - tb.get(x, y, 0);
                        if layout.covers(spec.motif_size, x, y) {
                            inside_diff |= d != 0.0;
                        } else {
                            assert_eq!(d, 0.0, "classes {a},{b} differ at ({x},{y})");
                        }
                    }
                }
                assert!(inside_diff, "classes {a},{b} have identical templates");
            }
        }
    }
}

#[test]
fn motifs_stay_inside_the_margins() {
    let spec = SynthSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let layout = MotifLayout::sample(&spec, &mut rng);
        for &(x, y) in &layout.origins {
            assert!(x >= spec.margin && x + spec.motif_size + spec.margin <= spec.width);
            assert!(y >= spec.margin && y + spec.motif_size + spec.margin <= spec.height);
        }
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let a = generate_dataset(&small_spec(9)).unwrap();
    let b = generate_dataset(&small_spec(9)).unwrap();
    let c = generate_dataset(&small_spec(10)).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.train.iter().zip(&b.train) {
        assert!(x.image.data.iter().zip(&y.image.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_ne!(a.train[0].image, c.train[0].image);
}

#[test]
fn split_and_label_counts() {
    let spec = SynthSpec::default();
    let d = generate_dataset(&spec).unwrap();
    assert_eq!(d.train.len(), 8 * 32);
    assert_eq!(d.test.len(), 8 * 8);
    for k in 0..8 {
        assert_eq!(d.train.iter().filter(|s| s.label == k).count(), 32);
        assert_eq!(d.test.iter().filter(|s| s.label == k).count(), 8);
    }
    assert!(d.train.iter().all(|s| s.index < 32) && d.test.iter().all(|s| s.index >= 32));
    let all = d.train.iter().chain(&d.test);
    assert!(all.flat_map(|s| &s.image.data).all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pgm_and_ppm_roundtrip_after_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for channels in [1, 3] {
        let img = Image::from_data(7, 5, channels, (0..35 * channels).map(|_| rng.gen_range(0.0..=1.0)).collect())
            .unwrap();
        let quantised = Image::from_data(7, 5, channels, img.data.iter().map(|v| (v * 255.0).round() / 255.0).collect())
            .unwrap();
        let path = dir.path().join(format!("img{channels}.pnm"));
        if channels == 1 {
            save_pgm(&path, &img).unwrap();
            assert_eq!(load_pgm(&path).unwrap(), quantised);
        } else {
            save_ppm(&path, &img).unwrap();
            assert!(load_pgm(&path).is_err());
        }
        let back = load_ppm(&path).unwrap();
        assert_eq!(back, quantised);
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        // A second trip through the codec is lossless.
        let bytes = if channels == 1 { encode_pgm(&back) } else { encode_ppm(&back) }.unwrap();
        assert_eq!(decode_pnm(&bytes).unwrap(), back);
    }
}

#[test]
fn dataset_save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_dataset(&small_spec(3)).unwrap();
    save_dataset(dir.path(), &d.train).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), d.train.len());
    for (a, b) in d.train.iter().zip(&back) {
        assert_eq!((a.label, a.index), (b.label, b.index));
        assert!(a.image.data.iter().zip(&b.image.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn model_checkpoint_restores_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = ModelConfig { image: (16, 16), ..ModelConfig::default() };
    let trained = PartModel::seeded(cfg.clone(), 1).unwrap();
    save_checkpoint(&path, &trained.store).unwrap();
    let mut fresh = PartModel::seeded(cfg, 2).unwrap();
    load_checkpoint(&path, &mut fresh.store).unwrap();
    let pairs = trained.store.iter().zip(fresh.store.iter());
    for ((_, na, ta), (_, nb, tb)) in pairs {
        assert_eq!(na, nb);
        assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #[test]
    fn codec_is_exact_on_quantised_images(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_data(w, h, 1, (0..w * h).map(|_| rng.gen_range(0..=255u8) as f64 / 255.0).collect())
            .unwrap();
        prop_assert_eq!(decode_pnm(&encode_pgm(&img).unwrap()).unwrap(), img);
    }
}
