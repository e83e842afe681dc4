use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

#[path = "../../tests/common/oracles.rs"]
mod oracles;

/// Restores every masked pixel to the clean image.
struct Perfect(Image);

impl Restorer for Perfect {
    fn restore(&self, _masked: &Image, _mask: &MaskPlane) -> Result<Image> {
        Ok(self.0.clone())
    }
}

/// Returns a fixed image regardless of input.
struct Constant(Image);

impl Restorer for Constant {
    fn restore(&self, _masked: &Image, _mask: &MaskPlane) -> Result<Image> {
        Ok(self.0.clone())
    }
}

struct Counting(Image, AtomicUsize);

impl Restorer for Counting {
    fn restore(&self, _masked: &Image, _mask: &MaskPlane) -> Result<Image> {
        self.1.fetch_add(1, Ordering::Relaxed);
        Ok(self.0.clone())
    }
}

fn smooth_texture(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fy, fx, ph): (f64, f64, f64) = (
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
        rng.random(),
    );
    let base: [f64; 3] = [
        rng.random_range(0.1..0.3),
        rng.random_range(0.1..0.3),
        rng.random_range(0.1..0.3),
    ];
    Image::from_fn(3, size, size, |c, y, x| {
        base[c] + 0.08 * ((fy * y as f64 + fx * x as f64 + 6.3 * ph).sin() + 1.0)
    })
}

/// Fine high-contrast stripes.
fn busy_texture(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.random_range(0.2..0.45);
    let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let (fy, fx) = (freq * angle.sin(), freq * angle.cos());
    Image::from_fn(3, size, size, |c, y, x| {
        let t = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph;
        0.5 + tint[c] + 0.4 * t.sin()
    })
}

fn cfg() -> InferenceConfig {
    InferenceConfig::default()
}

fn sim() -> SimilarityConfig {
    SimilarityConfig::default()
}

fn table(entries: &[(usize, f64)]) -> ThresholdTable {
    let mut t = ThresholdTable::new();
    for &(k, v) in entries {
        t.insert(k, v).unwrap();
    }
    t
}

#[test]
fn refine_mask_examples() {
    let grid = GridSpec::new(4, 16, 16).unwrap();
    let zero = ScoreMap::zeros(16, 16);
    assert_eq!(
        refine_mask(&zero, grid, 0.0).unwrap(),
        MaskPlane::ones(16, 16)
    );
    let huge = ScoreMap::filled(16, 16, 1e6);
    assert_eq!(
        refine_mask(&huge, grid, 3.0).unwrap(),
        MaskPlane::zeros(16, 16)
    );

    let mut hot = ScoreMap::zeros(16, 16);
    for y in 8..12 {
        for x in 4..8 {
            hot.set(y, x, 2.0);
        }
    }
    // A neighbouring pixel leaks into another patch but stays below eta.
    hot.set(7, 4, 5.0);
    let m = refine_mask(&hot, grid, 1.0).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let in_patch = (8..12).contains(&y) && (4..8).contains(&x);
            assert_eq!(m.is_visible(y, x), !in_patch, "({y},{x})");
        }
    }
    assert!(refine_mask(&zero, GridSpec::new(4, 8, 8).unwrap(), 0.0).is_err());
}

#[test]
fn patch_means_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = ScoreMap::from_fn(24, 16, |_, _| rng.random());
    let grid = GridSpec::new(8, 24, 16).unwrap();
    let means = patch_means(&s, grid).unwrap();
    assert_eq!(means.len(), 6);
    for r in 0..3 {
        for c in 0..2 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += s.get(r * 8 + y, c * 8 + x);
                }
            }
            assert!((means[r * 2 + c] - acc / 64.0).abs() < 1e-12);
        }
    }
}

#[test]
fn initialization_uses_two_maps_per_scale() {
    let img = smooth_texture(1, 32);
    let r = Counting(Image::filled(3, 32, 32, 0.5), AtomicUsize::new(0));
    let scales = ScaleSet::new(vec![2, 4, 8, 16]).unwrap();
    initialize_scores(&r, &img, &scales, &sim()).unwrap();
    assert_eq!(r.1.load(Ordering::Relaxed), 8);
}

#[test]
fn initialization_is_mean_of_checkerboard_maps() {
    let img = smooth_texture(2, 32);
    let r = Constant(smooth_texture(3, 32));
    let scales = ScaleSet::new(vec![4, 8]).unwrap();
    let s0 = initialize_scores(&r, &img, &scales, &sim()).unwrap();

    // Independent recomputation with the naive error map and a reversed scale order.
    let mut acc = vec![0.0; 32 * 32];
    for k in [8usize, 4] {
        for parity in [0usize, 1] {
            let mut composed = img.clone();
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        if (y / k + x / k) % 2 != parity {
                            composed.set(c, y, x, r.0.get(c, y, x));
                        }
                    }
                }
            }
            let f = oracles::naive_error_map(img.data(), composed.data(), 3, 32, 32);
            acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
        }
    }
    for (a, b) in s0.data().iter().zip(&acc) {
        assert!((a - b / 4.0).abs() < 1e-10);
    }
}

#[test]
fn perfect_restorer_gives_zero_initialization() {
    let img = smooth_texture(5, 32);
    let s0 = initialize_scores(
        &Perfect(img.clone()),
        &img,
        &ScaleSet::new(vec![4, 8, 16]).unwrap(),
        &sim(),
    )
    .unwrap();
    assert!(s0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn clean_image_converges_to_all_ones() {
    let img = smooth_texture(6, 32);
    let r = Perfect(img.clone());
    let scales = ScaleSet::new(vec![4, 8]).unwrap();
    let s0 = initialize_scores(&r, &img, &scales, &sim()).unwrap();
    let st = progressive_refinement(&r, &img, 4, 0.0, &s0, &cfg()).unwrap();
    assert_eq!(st.mask, MaskPlane::ones(32, 32));
    assert!(st.converged);
    assert!(st.iterations <= 2);
    assert_eq!(st.epsilon, 0.0);
    assert!(st.scores.data().iter().all(|&v| v == 0.0));
}

fn is_grid_aligned(mask: &MaskPlane, k: usize) -> bool {
    (0..mask.height())
        .all(|y| (0..mask.width()).all(|x| mask.get(y, x) == mask.get(y / k * k, x / k * k)))
}

/// Error map of `defective` against itself with masked pixels replaced by `clean`.
fn oracle_map(defective: &Image, clean: &Image, mask: &MaskPlane) -> Vec<f64> {
    let mut composed = defective.clone();
    for c in 0..3 {
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if !mask.is_visible(y, x) {
                    composed.set(c, y, x, clean.get(c, y, x));
                }
            }
        }
    }
    oracles::naive_error_map(
        defective.data(),
        composed.data(),
        3,
        mask.height(),
        mask.width(),
    )
}

fn naive_patch_means(map: &[f64], size: usize, k: usize) -> Vec<f64> {
    let n = size / k;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for y in 0..k {
                for x in 0..k {
                    acc += map[(r * k + y) * size + c * k + x];
                }
            }
            out[r * n + c] = acc / (k * k) as f64;
        }
    }
    out
}

#[test]
fn oracle_localization_recovers_defect_cells() {
    let size = 64;
    for k in [4usize, 8, 16] {
        let n = size / k;
        let grid = GridSpec::new(k, size, size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        for case in 0..50 {
            let clean = busy_texture(rng.random(), size);
            let count = rng.random_range(1..=3);
            let mut defect = vec![false; n * n];
            while defect.iter().filter(|&&d| d).count() < count {
                defect[rng.random_range(0..n * n)] = true;
            }
            // Flat patches erase the texture inside the chosen cells.
            let shade: f64 = rng.random_range(0.3..0.7);
            let mut img = clean.clone();
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        if defect[(y / k) * n + x / k] {
                            img.set(c, y, x, shade);
                        }
                    }
                }
            }
            let truth = grid.expand(|r, c| !defect[r * n + c]);

            // Brute-force choice of eta from the initial map and the map at the fixed point.
            let (a, b) = make_checkerboard_pair(grid);
            let init: Vec<f64> = oracle_map(&img, &clean, &a)
                .iter()
                .zip(oracle_map(&img, &clean, &b))
                .map(|(u, v)| (u + v) / 2.0)
                .collect();
            let fixed = oracle_map(&img, &clean, &truth);
            let mut hi_normal = 0.0f64;
            let mut lo_defect = f64::INFINITY;
            for map in [&init, &fixed] {
                for (i, e) in naive_patch_means(map, size, k).into_iter().enumerate() {
                    if defect[i] {
                        lo_defect = lo_defect.min(e);
                    } else {
                        hi_normal = hi_normal.max(e);
                    }
                }
            }
            assert!(
                hi_normal < lo_defect,
                "k={k} case {case}: no separating threshold"
            );
            let eta = (hi_normal + lo_defect) / 2.0;

            let r = Perfect(clean.clone());
            let s0 = initialize_scores(&r, &img, &ScaleSet::new(vec![k]).unwrap(), &sim()).unwrap();
            let st = progressive_refinement(&r, &img, k, eta, &s0, &cfg()).unwrap();
            assert!(
                st.converged && st.iterations <= DEFAULT_MAX_ITERS,
                "k={k} case {case}"
            );
            assert_eq!(st.mask, truth, "k={k} case {case}");
            assert!(is_grid_aligned(&st.mask, k));
        }
    }
}

#[test]
fn growing_mask_reports_non_convergence() {
    let img = Image::filled(3, 32, 32, 0.2);
    let r = Constant(Image::filled(3, 32, 32, 0.9));
    let mut s0 = ScoreMap::zeros(32, 32);
    for y in 12..16 {
        for x in 12..16 {
            s0.set(y, x, 1.0);
        }
    }
    let one = InferenceConfig {
        max_iters: 1,
        ..cfg()
    };
    let st = progressive_refinement(&r, &img, 4, 1e-9, &s0, &one).unwrap();
    assert_eq!(st.iterations, 1);
    assert!(!st.converged);

    let st = progressive_refinement(&r, &img, 4, 1e-9, &s0, &cfg()).unwrap();
    assert!(st.converged);
    assert!(st.iterations > 1 && st.iterations <= DEFAULT_MAX_ITERS);
    assert_eq!(st.mask, MaskPlane::zeros(32, 32));
    // Everything masked: the denominator is clamped to one.
    assert_eq!(st.epsilon, st.scores.sum());

    let zero_iters = InferenceConfig {
        max_iters: 0,
        ..cfg()
    };
    assert!(progressive_refinement(&r, &img, 4, 0.0, &s0, &zero_iters).is_err());
}

#[test]
fn converged_state_is_a_fixed_point() {
    let clean = smooth_texture(9, 32);
    let mut img = clean.clone();
    for c in 0..3 {
        for y in 8..16 {
            for x in 16..24 {
                img.set(c, y, x, 0.95);
            }
        }
    }
    let r = Perfect(clean);
    let s0 = initialize_scores(&r, &img, &ScaleSet::new(vec![8]).unwrap(), &sim()).unwrap();
    let st = progressive_refinement(&r, &img, 8, 0.5, &s0, &cfg()).unwrap();
    assert!(st.converged);
    assert!(st.mask.count_visible() < 32 * 32);
    let again = progressive_refinement(&r, &img, 8, 0.5, &st.scores, &cfg()).unwrap();
    assert_eq!(again.mask, st.mask);
    assert_eq!(again.scores, st.scores);
    assert_eq!(again.iterations, 1);
}

#[test]
fn scale_score_is_zero_iff_map_is_zero() {
    let mask = sample_mask();
    let zero = ScoreMap::zeros(16, 16);
    assert_eq!(scale_score(&zero, &mask, ScoreNumerator::FullImage), 0.0);
    let mut one = zero.clone();
    one.set(3, 3, 0.25);
    assert!(scale_score(&one, &mask, ScoreNumerator::FullImage) > 0.0);
    let visible = mask.count_visible() as f64;
    assert_eq!(
        scale_score(&one, &mask, ScoreNumerator::FullImage),
        0.25 / visible
    );

    // (3, 3) lies in a masked cell of the sample mask.
    assert!(!mask.is_visible(3, 3));
    assert_eq!(
        scale_score(&one, &mask, ScoreNumerator::MaskedOnly),
        0.25 / visible
    );
    let mut off = zero.clone();
    off.set(0, 8, 1.0);
    assert!(mask.is_visible(0, 8));
    assert_eq!(scale_score(&off, &mask, ScoreNumerator::MaskedOnly), 0.0);
}

fn sample_mask() -> MaskPlane {
    // Masks the top-left 8x8 quadrant only.
    MaskPlane::from_fn(16, 16, |y, x| !(y < 8 && x < 8))
}

#[test]
fn detect_single_scale_equals_refinement() {
    let clean = smooth_texture(11, 32);
    let mut img = clean.clone();
    img.set(0, 5, 5, 1.0);
    let r = Constant(smooth_texture(12, 32));
    let scales = ScaleSet::new(vec![8]).unwrap();
    let res = detect(&r, &table(&[(8, 0.3)]), &img, &scales, &cfg()).unwrap();
    assert_eq!(res.scales.len(), 1);
    assert_eq!(res.scores, res.scales[0].scores);
    assert_eq!(res.epsilon, res.scales[0].epsilon);
}

#[test]
fn detect_ensembles_by_arithmetic_mean() {
    let img = smooth_texture(13, 32);
    let r = Constant(smooth_texture(14, 32));
    let scales = ScaleSet::new(vec![4, 8, 16]).unwrap();
    let t = table(&[(4, 0.2), (8, 0.25), (16, 0.3)]);
    let res = detect(&r, &t, &img, &scales, &cfg()).unwrap();
    for i in 0..32 * 32 {
        let m = res.scales.iter().map(|s| s.scores.data()[i]).sum::<f64>() / 3.0;
        assert!((res.scores.data()[i] - m).abs() < 1e-12);
    }
    let e = res.scales.iter().map(|s| s.epsilon).sum::<f64>() / 3.0;
    assert!((res.epsilon - e).abs() < 1e-12);
    for s in &res.scales {
        assert!(s.epsilon >= 0.0);
        assert!(is_grid_aligned(&s.mask, s.cell));
    }
    assert_eq!(detect(&r, &t, &img, &scales, &cfg()).unwrap(), res);
}

#[test]
fn detect_clean_with_perfect_restorer_is_zero() {
    let img = smooth_texture(15, 32);
    let r = Perfect(img.clone());
    let scales = ScaleSet::new(vec![4, 8, 16]).unwrap();
    let res = detect(
        &r,
        &table(&[(4, 0.0), (8, 0.0), (16, 0.0)]),
        &img,
        &scales,
        &cfg(),
    )
    .unwrap();
    assert_eq!(res.epsilon, 0.0);
    assert!(res.scores.data().iter().all(|&v| v == 0.0));
}

#[test]
fn detect_requires_every_threshold() {
    let img = smooth_texture(16, 32);
    let r = Perfect(img.clone());
    let scales = ScaleSet::new(vec![4, 8]).unwrap();
    let err = detect(&r, &table(&[(4, 0.1)]), &img, &scales, &cfg()).unwrap_err();
    assert!(matches!(err, Error::MissingThreshold(8)));
}
