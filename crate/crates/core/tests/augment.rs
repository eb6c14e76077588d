mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use scribbleseg::augment::{apply_common, apply_further, zscore, CommonAugmentConfig, FurtherAugmentConfig};
use scribbleseg::{Grid, ImageSample, ScribbleLabel, UNLABELED};

fn sample(image: Grid<f64>, labels: Grid<u8>, k: usize) -> ImageSample {
    let gt = labels.map(|&v| if v == UNLABELED { 0 } else { v });
    ImageSample::new(image, ScribbleLabel::new(labels, k).unwrap(), Some(gt), "p", (1.0, 1.0)).unwrap()
}

fn disk_labels(n: usize, radius: f64) -> Grid<u8> {
    let c = (n as f64 - 1.0) / 2.0;
    Grid::from_fn(n, n, |r, col| {
        if ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt() <= radius {
            1
        } else {
            UNLABELED
        }
    })
}

#[test]
fn rotation_preserves_scribble_count() {
    let n = 48;
    let labels = disk_labels(n, 10.0);
    let before = labels.as_slice().iter().filter(|&&v| v == 1).count() as f64;
    let s = sample(Grid::from_fn(n, n, |r, c| (r + 2 * c) as f64), labels, 2);
    let cfg = CommonAugmentConfig {
        rotation_prob: 1.0,
        ..CommonAugmentConfig::identity()
    };
    let mut r = rng(1);
    for draw in 0..1000 {
        let out = apply_common(&s, &cfg, &mut r).unwrap();
        let l = out.scribble.as_slice();
        assert!(l.iter().all(|&v| v == 1 || v == UNLABELED), "draw {draw}");
        let after = l.iter().filter(|&&v| v == 1).count() as f64;
        // Nearest-neighbor sampling only perturbs the rim of the disk.
        assert!((after - before).abs() <= 0.05 * before, "draw {draw}: {before} -> {after}");
    }
}

#[test]
fn labels_follow_the_image() {
    // A smooth bump whose center is labeled: after any geometric transform
    // the intensity peak and the labeled pixels stay together.
    let n = 40;
    let mut r = rng(2);
    let cfg = CommonAugmentConfig {
        noise_prob: 0.0,
        zoom_prob: 0.5,
        elastic_prob: 0.5,
        rotation_prob: 0.5,
        ..CommonAugmentConfig::default()
    };
    let mut checked = 0;
    for _ in 0..300 {
        let (pr, pc) = (r.random_range(8..n - 8) as f64, r.random_range(8..n - 8) as f64);
        let image = Grid::from_fn(n, n, |y, x| (-((y as f64 - pr).powi(2) + (x as f64 - pc).powi(2)) / 8.0).exp());
        let labels = Grid::from_fn(n, n, |y, x| {
            if (y as f64 - pr).abs() <= 1.0 && (x as f64 - pc).abs() <= 1.0 {
                1
            } else {
                UNLABELED
            }
        });
        let out = apply_common(&sample(image, labels, 2), &cfg, &mut r).unwrap();
        let img = out.image.as_slice();
        let peak = (0..img.len()).max_by(|&a, &b| img[a].total_cmp(&img[b])).unwrap();
        let (py, px) = ((peak / n) as f64, (peak % n) as f64);
        let marked: Vec<(f64, f64)> = out
            .scribble
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| ((i / n) as f64, (i % n) as f64))
            .collect();
        if marked.is_empty() {
            continue;
        }
        let cy = marked.iter().map(|p| p.0).sum::<f64>() / marked.len() as f64;
        let cx = marked.iter().map(|p| p.1).sum::<f64>() / marked.len() as f64;
        assert!((cy - py).abs() <= 1.0 && (cx - px).abs() <= 1.0, "peak ({py}, {px}) label ({cy}, {cx})");
        checked += 1;
    }
    assert!(checked > 250);
}

#[test]
fn flip_twice_is_identity() {
    let n = 12;
    let mut r = rng(3);
    let image = Grid::from_fn(n, n, |_, _| r.random_range(0.0..100.0));
    let labels = Grid::from_fn(n, n, |_, _| if r.random_bool(0.3) { r.random_range(0..3) } else { UNLABELED });
    let s = sample(image, labels, 3);
    for (h, v) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let cfg = CommonAugmentConfig {
            hflip_prob: h,
            vflip_prob: v,
            ..CommonAugmentConfig::identity()
        };
        let once = apply_common(&s, &cfg, &mut r).unwrap();
        assert_ne!(once.scribble, s.scribble);
        let twice = apply_common(&once, &cfg, &mut r).unwrap();
        assert_eq!(twice.scribble, s.scribble);
        assert_eq!(twice.gt_mask, s.gt_mask);
        let z = zscore(&s.image);
        for (a, b) in twice.image.as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn strength_scales_the_ranges() {
    let mut prev = -1.0;
    for i in 0..=10 {
        let cfg = FurtherAugmentConfig {
            strength: i as f64 / 10.0,
            prob: 0.8,
        };
        assert!(cfg.half_width() > prev);
        prev = cfg.half_width();
    }
    // Zero strength disables every operation.
    let image = Grid::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
    let cfg = FurtherAugmentConfig { strength: 0.0, prob: 1.0 };
    assert_eq!(apply_further(&image, &cfg, &mut rng(7)).unwrap(), image);
}

proptest! {
    #[test]
    fn further_is_photometric(seed in any::<u64>(), delta in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let image = Grid::from_fn(6, 7, |_, _| r.random_range(-3.0..3.0));
        let cfg = FurtherAugmentConfig { strength: delta, prob: 0.8 };
        let out = apply_further(&image, &cfg, &mut r).unwrap();
        prop_assert_eq!(out.shape(), image.shape());
        let (a, b) = (image.as_slice(), out.as_slice());
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] < a[j] {
                    prop_assert!(b[i] <= b[j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn common_output_is_valid(seed in any::<u64>(), tr in 8usize..40, tc in 8usize..40) {
        let mut r = rng(seed);
        let (rows, cols) = (r.random_range(8..32), r.random_range(8..32));
        let image = Grid::from_fn(rows, cols, |_, _| r.random_range(0.0..500.0));
        let labels = Grid::from_fn(rows, cols, |_, _| if r.random_bool(0.2) { r.random_range(0..3) } else { UNLABELED });
        let s = sample(image, labels, 3);
        let cfg = CommonAugmentConfig { crop_pad_to: Some((tr, tc)), ..CommonAugmentConfig::default() };
        let out = apply_common(&s, &cfg, &mut r).unwrap();
        prop_assert_eq!(out.shape(), (tr, tc));
        prop_assert!(out.scribble.as_slice().iter().all(|&v| v < 3 || v == UNLABELED));
        prop_assert!(out.gt_mask.as_ref().unwrap().as_slice().iter().all(|&v| v < 3));
        prop_assert!(out.image.as_slice().iter().all(|v| v.is_finite()));
    }
}
