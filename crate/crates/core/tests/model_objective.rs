use part_core::data::Image;
use part_core::discovery::{DiscoveryConfig, PartProposal};
use part_core::model::{grad_cam, BackboneConfig, ModelConfig, PartModel};
use part_core::posenc::PosMode;
use part_core::tensor::{grad_check_by_param, Graph, Optimizer, OptimizerKind, Tensor};
use part_core::transformer::stack_forward;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: PosMode) -> ModelConfig {
    ModelConfig {
        classes: 3,
        image: (16, 16),
        backbone: BackboneConfig { in_channels: 1, widths: [2, 3, 4], channels: 4 },
        head_dim: 2,
        heads_global: 2,
        stack_global: 2,
        pos_mode: mode,
        discovery: DiscoveryConfig { parts: 2, ..DiscoveryConfig::default() },
        ..ModelConfig::default()
    }
}

fn image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_data(w, h, 1, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

// Natural-log cross entropy of one row, written out directly.
fn ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[label]
}

#[test]
fn uniform_logits_give_one_point_four_ln_k() {
    let cfg = ModelConfig { image: (32, 32), ..ModelConfig::default() };
    assert_eq!((cfg.classes, cfg.discovery.parts, cfg.lambda), (8, 4, 0.1));
    let mut model = PartModel::seeded(cfg, 7).unwrap();
    model.store.get_mut(model.w_g).data_mut().fill(0.0);
    for &id in &model.w_l {
        model.store.get_mut(id).data_mut().fill(0.0);
    }
    let img = image(32, 32, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let total = model.total_loss(&img, 5, &mut rng).unwrap();
    assert!((total - 1.4 * 8f64.ln()).abs() < 1e-9, "{total}");
}

#[test]
fn zero_lambda_is_global_cross_entropy() {
    let mut model = PartModel::seeded(small(PosMode::Relative), 11).unwrap();
    model.lambdas.iter_mut().for_each(|l| *l = 0.0);
    let img = image(16, 16, 2);
    let logits = model.logits(&img).unwrap();
    let mut g = Graph::new(&model.store);
    let grid = model.config.feature_grid();
    let parts = vec![PartProposal::full(grid); 2];
    let s = model.sample_loss(&mut g, &img, 1, &parts).unwrap();
    let mut g2 = Graph::new(&model.store);
    let out = model.backbone_forward(&mut g2, &img).unwrap();
    let gl = model.global_logits(&mut g2, out.xg, out.grid).unwrap();
    let only = g2.tape.cross_entropy(gl, &[1]).unwrap();
    assert_eq!(g.scalar(s.loss).unwrap().to_bits(), g2.scalar(only).unwrap().to_bits());
    assert!((g.scalar(s.loss).unwrap() - ce(&logits, 1)).abs() < 1e-12);
}

#[test]
fn loss_adds_weighted_part_terms() {
    let model = PartModel::seeded(small(PosMode::Relative), 12).unwrap();
    let img = image(16, 16, 3);
    let grid = model.config.feature_grid();
    let mut half = PartProposal::full(grid);
    half.mask.iter_mut().enumerate().for_each(|(i, m)| *m = i % 2 == 0);
    let parts = vec![PartProposal::full(grid), half];
    let mut g = Graph::new(&model.store);
    let total = model.sample_loss(&mut g, &img, 2, &parts).unwrap();
    let total = g.scalar(total.loss).unwrap();

    let mut g = Graph::new(&model.store);
    let out = model.backbone_forward(&mut g, &img).unwrap();
    let mut expected = ce(&model.logits(&img).unwrap(), 2);
    for (i, p) in parts.iter().enumerate() {
        let l = model.part_logits(&mut g, out.xp, out.grid, i, &p.mask).unwrap().unwrap();
        expected += 0.1 * ce(g.tape.value(l).data(), 2);
    }
    assert!((total - expected).abs() < 1e-12);
}

#[test]
fn empty_part_mask_is_skipped() {
    let model = PartModel::seeded(small(PosMode::Relative), 13).unwrap();
    let img = image(16, 16, 4);
    let grid = model.config.feature_grid();
    let mut empty = PartProposal::full(grid);
    empty.mask.fill(false);
    let mut g = Graph::new(&model.store);
    let with_empty = model.sample_loss(&mut g, &img, 0, &[empty.clone(), empty]).unwrap();
    assert_eq!(g.scalar(with_empty.loss).unwrap(), ce(&model.logits(&img).unwrap(), 0));
}

#[test]
fn prediction_unchanged_after_deleting_part_branches() {
    for mode in [PosMode::Relative, PosMode::Absolute, PosMode::None] {
        let mut model = PartModel::seeded(small(mode), 21).unwrap();
        let imgs: Vec<Image> = (0..6).map(|s| image(16, 16, 100 + s)).collect();
        let before: Vec<Vec<f64>> = imgs.iter().map(|i| model.logits(i).unwrap()).collect();
        let preds: Vec<usize> = imgs.iter().map(|i| model.predict(i).unwrap()).collect();
        model.strip_parts();
        for ((img, l), p) in imgs.iter().zip(&before).zip(&preds) {
            let after = model.logits(img).unwrap();
            assert!(after.iter().zip(l).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(model.predict(img).unwrap(), *p);
        }
    }
}

#[test]
fn full_mask_part_branch_matches_unmasked_pipeline() {
    let model = PartModel::seeded(small(PosMode::Relative), 31).unwrap();
    let img = image(16, 16, 5);
    let grid = model.config.feature_grid();
    let mut g = Graph::new(&model.store);
    let out = model.backbone_forward(&mut g, &img).unwrap();
    let full = vec![true; grid.pixels()];
    let logits = model.part_logits(&mut g, out.xp, grid, 1, &full).unwrap().unwrap();
    let logits = g.tape.value(logits).clone();

    let ctx = part_core::transformer::PositionContext::new(grid, 4, PosMode::Relative).unwrap();
    let feats = stack_forward(&mut g, out.xp, &model.parts[1], &ctx, None).unwrap();
    let f = g.tape.value(feats).clone();
    let w = model.store.get(model.w_l[0]);
    for k in 0..3 {
        let mut s = 0.0;
        for c in 0..4 {
            let mean = (0..grid.pixels()).map(|i| f.row(i)[c]).sum::<f64>() / grid.pixels() as f64;
            s += mean * w.row(c)[k];
        }
        assert!((logits.data()[k] - s).abs() < 1e-12);
    }
}

#[test]
fn gradients_of_every_parameter_match_finite_differences() {
    for mode in [PosMode::Relative, PosMode::Learnable] {
        let mut model = PartModel::seeded(small(mode), 41).unwrap();
        // Learnable tables start at zero; move them off it.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for layer in model.global.iter().chain(model.parts.iter().flatten()) {
            if let Some(id) = layer.encoding {
                model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        for id in model.backbone.param_ids() {
            let t = model.store.get_mut(id);
            if t.rows() == 1 || t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.1));
            }
        }
        let img = image(16, 16, 6);
        let grid = model.config.feature_grid();
        let mut corner = PartProposal::full(grid);
        corner.mask.iter_mut().enumerate().for_each(|(i, m)| *m = i != 0);
        let parts = vec![PartProposal::full(grid), corner];
        let count = model.store.len();
        let m = &model;
        let mut store = m.store.clone();
        let report = grad_check_by_param(&mut store, 1e-4, |g| Ok(m.sample_loss(g, &img, 2, &parts)?.loss)).unwrap();
        assert_eq!(report.len(), count, "every parameter must be reached");
        for (name, err) in report {
            assert!(err < 1e-3, "{mode}: {name} rel err {err}");
        }
    }
}

#[test]
fn small_sgd_steps_reduce_the_loss() {
    for lr in [1e-3, 1e-4] {
        let mut model = PartModel::seeded(small(PosMode::Relative), 51).unwrap();
        let img = image(16, 16, 7);
        let grid = model.config.feature_grid();
        let parts = vec![PartProposal::full(grid); 2];
        let eval = |m: &PartModel| {
            let mut g = Graph::new(&m.store);
            let s = m.sample_loss(&mut g, &img, 0, &parts).unwrap();
            let v = g.scalar(s.loss).unwrap();
            (v, g.backward(s.loss).unwrap())
        };
        let (before, grads) = eval(&model);
        Optimizer::new(OptimizerKind::Sgd).step(&mut model.store, &grads, lr);
        let (after, _) = eval(&model);
        assert!(after < before, "lr {lr}: {before} -> {after}");
    }
}

#[test]
fn grad_cam_is_normalised() {
    let model = PartModel::seeded(small(PosMode::Relative), 61).unwrap();
    let img = image(16, 16, 8);
    for class in 0..3 {
        let map = grad_cam(&model, &img, class).unwrap();
        assert_eq!(map.values.len(), model.config.feature_grid().pixels());
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let hi = map.values.iter().cloned().fold(0.0, f64::max);
        assert!(hi == 1.0 || map.values.iter().all(|&v| v == 0.0));
    }
    let mut stripped = model.clone();
    stripped.strip_parts();
    assert!(grad_cam(&stripped, &img, 0).is_err());
    assert!(grad_cam(&model, &img, 3).is_err());
}

#[test]
fn backbone_is_deterministic_and_part_features_nonnegative() {
    let a = PartModel::seeded(small(PosMode::Relative), 71).unwrap();
    let b = PartModel::seeded(small(PosMode::Relative), 71).unwrap();
    let img = image(16, 16, 9);
    let run = |m: &PartModel| {
        let mut g = Graph::new(&m.store);
        let out = m.backbone_forward(&mut g, &img).unwrap();
        (g.tape.value(out.xg).clone(), g.tape.value(out.xp).clone())
    };
    let (ga, pa) = run(&a);
    let (gb, pb) = run(&b);
    assert_eq!(ga, gb);
    assert_eq!(pa, pb);
    assert!(pa.data().iter().all(|&v| v >= 0.0));
    assert_eq!(pa.shape(), &[4, 4]);
    let _: &Tensor = &ga;
}
