mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{map_oracle, random_box, random_output, selection_oracle};
use sfa_core::attack::{clamp_valid, project_linf};
use sfa_core::bbox::BBox;
use sfa_core::dataset::{class_histogram, generate_dataset, DatasetConfig, GroundTruthObject, MIN_OBJECT_AREA};
use sfa_core::detector::{postprocess, Detection};
use sfa_core::eval::{compute_map, nmse, ssim_proxy, tv};
use sfa_core::targeting::{select_classification_targets, select_regression_targets, SelectionConfig};
use sfa_core::tensor::Tensor;
use sfa_core::wavelet::{dwt2, idwt2, reconstruct_hfc, reconstruct_lfc, WaveletFilters};

fn tensor(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn project_then_clamp_keeps_both_invariants(seed in any::<u64>(), eps in 0.001f64..0.2) {
        let x = tensor(seed, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut d = Tensor::from_fn(3, 4, 5, |_, _, _| rng.gen_range(-0.5..0.5));
        project_linf(&mut d, eps);
        clamp_valid(&mut d, &x);
        for (dv, xv) in d.data.iter().zip(&x.data) {
            prop_assert!(dv.abs() <= eps);
            prop_assert!((0.0..=1.0).contains(&(xv + dv)));
        }
        let mut again = d.clone();
        project_linf(&mut again, eps);
        clamp_valid(&mut again, &x);
        prop_assert_eq!(again, d);
    }

    #[test]
    fn selection_matches_oracle(seed in any::<u64>(), n in 1usize..=64, m in 1usize..=4, k in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_output(&mut rng, n, 3, 64.0);
        let gts: Vec<GroundTruthObject> = (0..m)
            .map(|_| GroundTruthObject { bbox: random_box(&mut rng, 64.0), label: rng.gen_range(0..3) })
            .collect();
        let cfg = SelectionConfig { k, iou_floor: 0.05 };
        let labels: Vec<usize> = (0..n).map(|i| out.object_label(i)).collect();
        prop_assert_eq!(select_regression_targets(&out, &gts, &cfg), selection_oracle(&out.boxes, &labels, &gts, k, 0.05, false));
        prop_assert_eq!(select_classification_targets(&out, &gts, &cfg), selection_oracle(&out.boxes, &labels, &gts, k, 0.05, true));
    }

    #[test]
    fn larger_k_extends_selection(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_output(&mut rng, 40, 3, 64.0);
        let gts = vec![GroundTruthObject { bbox: random_box(&mut rng, 64.0), label: 1 }];
        let small = select_regression_targets(&out, &gts, &SelectionConfig { k, iou_floor: 0.05 });
        let big = select_regression_targets(&out, &gts, &SelectionConfig { k: k + 1, iou_floor: 0.05 });
        prop_assert!(big[0].starts_with(&small[0]));
        let c = select_classification_targets(&out, &gts, &SelectionConfig { k, iou_floor: 0.05 });
        prop_assert!(c[0].iter().all(|&i| out.object_label(i) == 1));
    }

    #[test]
    fn map_matches_oracle(seed in any::<u64>(), n_pred in 0usize..=5, n_gt in 1usize..=3, images in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut preds = vec![Vec::new(); images];
        let mut gts = vec![Vec::new(); images];
        for _ in 0..n_gt {
            let img = rng.gen_range(0..images);
            gts[img].push(GroundTruthObject { bbox: random_box(&mut rng, 20.0), label: rng.gen_range(0..2) });
        }
        for _ in 0..n_pred {
            let img = rng.gen_range(0..images);
            // Coarse scores so ties occur.
            let score = rng.gen_range(1..=4) as f64 / 4.0;
            preds[img].push(Detection { bbox: random_box(&mut rng, 20.0), label: rng.gen_range(0..2), score });
        }
        for thr in [0.1, 0.5, 0.75] {
            let got = compute_map(&preds, &gts, thr).unwrap().map;
            let want = map_oracle(&preds, &gts, thr).unwrap();
            prop_assert!((got - want).abs() < 1e-12, "thr {}: {} vs {}", thr, got, want);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn map_depends_only_on_score_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = vec![(0..3).map(|_| GroundTruthObject { bbox: random_box(&mut rng, 30.0), label: rng.gen_range(0..2) }).collect::<Vec<_>>()];
        let preds = vec![(0..6).map(|_| Detection { bbox: random_box(&mut rng, 30.0), label: rng.gen_range(0..2), score: rng.gen_range(0.0..1.0) }).collect::<Vec<_>>()];
        let squashed = vec![preds[0].iter().map(|d| Detection { score: d.score.powi(3) * 0.5, ..*d }).collect::<Vec<_>>()];
        prop_assert_eq!(compute_map(&preds, &gts, 0.5).unwrap().map, compute_map(&squashed, &gts, 0.5).unwrap().map);
    }

    #[test]
    fn postprocess_output_is_sorted_and_suppressed(seed in any::<u64>(), nms in 0.2f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_output(&mut rng, 30, 3, 32.0);
        let dets = postprocess(&out, 0.05, nms);
        for w in dets.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, a) in dets.iter().enumerate() {
            prop_assert!(a.label < 3 && a.score >= 0.05);
            for b in &dets[i + 1..] {
                prop_assert!(a.label != b.label || a.bbox.iou(&b.bbox) <= nms);
            }
        }
    }

    #[test]
    fn wavelet_round_trip_and_energy(seed in any::<u64>(), hh in 1usize..12, ww in 1usize..12) {
        let x = tensor(seed, 2, 2 * hh, 2 * ww);
        for f in [WaveletFilters::haar(), WaveletFilters::daubechies2()] {
            let d = dwt2(&x, &f).unwrap();
            prop_assert!(idwt2(&d, &f).unwrap().max_abs_diff(&x) < 1e-9);
            prop_assert!((d.energy() - x.sum_sq()).abs() <= 1e-9 * x.sum_sq());
            let c = Tensor::filled(2, 2 * hh, 2 * ww, x.data[0]);
            prop_assert!(reconstruct_lfc(&c, &f).unwrap().max_abs_diff(&c) < 1e-12);
            prop_assert!(reconstruct_hfc(&c, &f).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn stealth_metrics_vanish_at_identity(seed in any::<u64>(), c in 0.0f64..1.0) {
        let x = tensor(seed, 3, 16, 16).map(|v| 0.05 + 0.9 * v);
        prop_assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        prop_assert!(ssim_proxy(&x, &x).unwrap().abs() < 1e-12);
        prop_assert_eq!(tv(&Tensor::filled(3, 16, 16, c)), 0.0);
        prop_assert!(tv(&x) >= 0.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_box(&mut rng, 50.0);
        let b = random_box(&mut rng, 50.0);
        let v = a.iou(&b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, b.iou(&a));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        prop_assert!((v - common::iou_oracle(&a, &b)).abs() < 1e-12);
        let _ = BBox::ORIGIN;
    }
}

#[test]
fn generated_annotations_hold_invariants_over_1000_scenes() {
    let cfg = DatasetConfig { seed: 3, n_scenes: 1000, image_size: 64, ..DatasetConfig::default() };
    let scenes = generate_dataset(&cfg).unwrap();
    assert_eq!(scenes.len(), 1000);
    for s in &scenes {
        assert!((cfg.objects_min..=cfg.objects_max).contains(&s.objects.len()), "{}", s.id);
        for o in &s.objects {
            let b = o.bbox;
            assert!(b.is_ordered() && b.x1 >= 0.0 && b.y1 >= 0.0, "{}", s.id);
            assert!(b.x2 <= 64.0 && b.y2 <= 64.0, "{}", s.id);
            assert!(b.area() >= MIN_OBJECT_AREA, "{}", s.id);
            assert!(o.label < cfg.k_classes);
        }
        for (i, a) in s.objects.iter().enumerate() {
            for b in &s.objects[i + 1..] {
                assert_eq!(a.bbox.intersection(&b.bbox), 0.0, "{}: objects overlap", s.id);
            }
        }
        assert!(s.image.tensor().data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn class_distribution_is_near_uniform() {
    for seed in [0, 7] {
        let cfg = DatasetConfig { seed, n_scenes: 500, ..DatasetConfig::default() };
        let hist = class_histogram(&generate_dataset(&cfg).unwrap(), cfg.k_classes);
        let mean = hist.iter().sum::<usize>() as f64 / hist.len() as f64;
        for &h in &hist {
            assert!(h >= 100, "seed {seed}: {hist:?}");
            assert!((h as f64 - mean).abs() <= 0.2 * mean, "seed {seed}: {hist:?}");
        }
    }
}
