use part_core::conv_equiv::{
    conv2d_reference, conv_attention_forward, conv_attention_weights, equivalence_gap, interior_pixels, ConvKernel,
    ConvSpec,
};
use part_core::feature::{FeatureMap, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(seed: u64, size: usize, c_in: usize, c_out: usize) -> (FeatureMap, ConvKernel, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(8, 8);
    let x = FeatureMap::new(grid, c_in, (0..64 * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let k = ConvKernel::new(
        size,
        c_in,
        c_out,
        (0..size * size * c_in * c_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let b = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
    (x, k, b)
}

// Direct nested-loop convolution, independent of the library's indexing helpers.
fn naive_conv(x: &FeatureMap, k: &ConvKernel, b: &[f64], qx: usize, qy: usize, co: usize) -> f64 {
    let r = (k.size / 2) as isize;
    let mut s = b[co];
    for ky in 0..k.size {
        for kx in 0..k.size {
            let sx = qx as isize + kx as isize - r;
            let sy = qy as isize + ky as isize - r;
            if sx < 0 || sy < 0 || sx >= x.width() as isize || sy >= x.height() as isize {
                continue;
            }
            for ci in 0..k.c_in {
                let w = k.data[((ky * k.size + kx) * k.c_in + ci) * k.c_out + co];
                s += x.get(sx as usize, sy as usize, ci) * w;
            }
        }
    }
    s
}

#[test]
fn reference_conv_matches_nested_loops() {
    let (x, k, b) = random_instance(1, 3, 4, 3);
    let y = conv2d_reference(&x, &k, &b).unwrap();
    for qy in 0..8 {
        for qx in 0..8 {
            for co in 0..3 {
                assert!((y.get(qx, qy, co) - naive_conv(&x, &k, &b, qx, qy, co)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sharp_attention_reproduces_three_by_three_conv() {
    for seed in 0..3 {
        let (x, k, b) = random_instance(seed, 3, 4, 4);
        let gap = equivalence_gap(&x, &k, &b, ConvSpec::new(100.0)).unwrap();
        assert!(gap < 1e-4, "seed {seed}: gap {gap}");
    }
}

#[test]
fn gap_shrinks_with_sharpness() {
    let (x, k, b) = random_instance(7, 3, 4, 4);
    let gaps: Vec<f64> = [1.0, 10.0, 100.0]
        .iter()
        .map(|&a| equivalence_gap(&x, &k, &b, ConvSpec::new(a)).unwrap())
        .collect();
    assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
    assert!(gaps[1] > gaps[2]);
}

#[test]
fn pointwise_kernel_is_nearly_exact() {
    let (x, k, b) = random_instance(3, 1, 4, 4);
    let gap = equivalence_gap(&x, &k, &b, ConvSpec::new(100.0)).unwrap();
    assert!(gap < 1e-6, "gap {gap}");
}

#[test]
fn fewer_output_channels_supported() {
    let (x, k, b) = random_instance(4, 3, 4, 2);
    assert!(equivalence_gap(&x, &k, &b, ConvSpec::new(100.0)).unwrap() < 1e-4);
}

#[test]
fn attention_mass_lands_on_offset() {
    let grid = Grid::new(8, 8);
    for off in [(0isize, 0isize), (1, 0), (-1, 1), (1, -1)] {
        let w = conv_attention_weights(grid, 4, off, ConvSpec::new(100.0)).unwrap();
        for (qx, qy) in interior_pixels(grid, 3) {
            let q = grid.index(qx, qy);
            let key = grid.index((qx as isize + off.0) as usize, (qy as isize + off.1) as usize);
            assert!(w.at(q, key) >= 1.0 - 1e-6, "offset {off:?} query {q}: {}", w.at(q, key));
        }
    }
}

#[test]
fn zero_offset_sharp_attention_is_identity() {
    let grid = Grid::new(5, 4);
    let w = conv_attention_weights(grid, 4, (0, 0), ConvSpec::new(200.0)).unwrap();
    for i in 0..grid.pixels() {
        for j in 0..grid.pixels() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((w.at(i, j) - e).abs() < 1e-9);
        }
    }
}

#[test]
fn rows_are_distributions_at_every_sharpness() {
    let grid = Grid::new(6, 6);
    for alpha in [0.01, 1.0, 10.0, 100.0, 1e4] {
        let w = conv_attention_weights(grid, 4, (1, 1), ConvSpec::new(alpha)).unwrap();
        for i in 0..grid.pixels() {
            let s: f64 = (0..grid.pixels()).map(|j| w.at(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9, "alpha {alpha}: row {i} sums to {s}");
            assert!((0..grid.pixels()).all(|j| w.at(i, j).is_finite()));
        }
    }
}

#[test]
fn border_query_falls_back_to_nearest_key() {
    let grid = Grid::new(4, 4);
    let w = conv_attention_weights(grid, 4, (1, 0), ConvSpec::new(100.0)).unwrap();
    // No key at q + (1, 0); the query itself is the unique closest pixel,
    // so border outputs differ from zero padding.
    let q = grid.index(3, 1);
    assert!(w.at(q, q) > 1.0 - 1e-6);
    // Off-grid targets resolve to their clamped position.
    let w = conv_attention_weights(grid, 4, (1, 1), ConvSpec::new(100.0)).unwrap();
    assert!(w.at(q, grid.index(3, 2)) > 1.0 - 1e-6);
}

#[test]
fn kernel_perturbation_changes_only_its_slice() {
    let (x, k, b) = random_instance(9, 3, 4, 4);
    let spec = ConvSpec::new(100.0);
    let base = conv_attention_forward(&x, &k, &b, spec).unwrap();
    let mut k2 = k.clone();
    let eps = 0.25;
    let (dx, dy, ci, co) = (1isize, -1isize, 2usize, 3usize);
    k2.set(dx, dy, ci, co, k.get(dx, dy, ci, co) + eps);
    let moved = conv_attention_forward(&x, &k2, &b, spec).unwrap();
    for (qx, qy) in interior_pixels(x.grid(), 3) {
        for c in 0..4 {
            let diff = moved.get(qx, qy, c) - base.get(qx, qy, c);
            let expected = if c == co {
                eps * x.get((qx as isize + dx) as usize, (qy as isize + dy) as usize, ci)
            } else {
                0.0
            };
            assert!((diff - expected).abs() < 1e-6, "pixel ({qx},{qy}) ch {c}: {diff} vs {expected}");
        }
    }
}
