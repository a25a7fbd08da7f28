//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{map_oracle, random_box, random_output, relative_error, selection_oracle};
use sfa_core::attack::{attack_batch, objective, AttackConfig, AttackResult, AttackVariant};
use sfa_core::bbox::BBox;
use sfa_core::dataset::{generate_dataset, DatasetConfig, GroundTruthObject, Scene};
use sfa_core::detector::{Detection, Detector, DetectorConfig, TrainConfig};
use sfa_core::eval::{compute_map, detect_all, evaluate, Corruption, DefenseSpec, EvalConfig};
use sfa_core::targeting::{
    build_attack_target_set, select_classification_targets, select_regression_targets, SelectionConfig,
};
use sfa_core::tensor::Tensor;
use sfa_core::wavelet::{dwt2, idwt2, reconstruct_hfc, reconstruct_lfc, WaveletFilters};

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id} ({name}): {detail}");
        if !pass {
            self.failures.push(format!("{id} {name}"));
        }
    }
}

fn wavelet_correctness() -> (bool, String) {
    let f = WaveletFilters::haar();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_rt, mut worst_parseval, mut worst_const) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let h = 2 * rng.gen_range(1..=32);
        let w = 2 * rng.gen_range(1..=32);
        let c = rng.gen_range(1..=3);
        let x = Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0));
        let d = dwt2(&x, &f).unwrap();
        worst_rt = worst_rt.max(idwt2(&d, &f).unwrap().max_abs_diff(&x));
        worst_parseval = worst_parseval.max((d.energy() - x.sum_sq()).abs() / x.sum_sq());
        let k = Tensor::filled(c, h, w, rng.gen_range(0.0..1.0));
        worst_const = worst_const
            .max(reconstruct_lfc(&k, &f).unwrap().max_abs_diff(&k))
            .max(reconstruct_hfc(&k, &f).unwrap().max_abs());
    }
    let pass = worst_rt < 1e-6 && worst_parseval < 1e-6 && worst_const < 1e-6;
    (
        pass,
        format!("round-trip {worst_rt:.2e}, Parseval rel {worst_parseval:.2e}, constants {worst_const:.2e} (limit 1e-6)"),
    )
}

fn gradient_fidelity() -> (bool, String) {
    let det = Detector::new(DetectorConfig::tiny(8, 3, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.2..0.8));
    let delta = Tensor::from_fn(3, 8, 8, |_, _, _| rng.gen_range(-0.03..0.03));
    let x_adv = x.add(&delta).unwrap();
    let gts = [GroundTruthObject {
        bbox: BBox::new(1.0, 1.0, 6.0, 7.0),
        label: 1,
    }];
    let cfg = AttackConfig {
        selection: SelectionConfig { k: 4, iou_floor: 0.0 },
        ..AttackConfig::default()
    };
    let out = det.forward_cached(&x_adv).unwrap().output;
    let targets = build_attack_target_set(&out, &gts, &cfg.selection).unwrap();
    assert!(targets.regression_count() > 0 && targets.classification_count() > 0);
    let eval = objective(&det, &x, &x_adv, &targets, &cfg).unwrap();
    let scale = eval.grad.max_abs();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..x_adv.len() {
        let mut p = x_adv.clone();
        p.data[i] += h;
        let mut m = x_adv.clone();
        m.data[i] -= h;
        let jp = objective(&det, &x, &p, &targets, &cfg).unwrap().breakdown.j_total;
        let jm = objective(&det, &x, &m, &targets, &cfg).unwrap().breakdown.j_total;
        let fd = (jp - jm) / (2.0 * h);
        worst = worst.max(relative_error(eval.grad.data[i], fd, 1e-3 * scale));
    }
    (
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {} pixels (limit 1e-4)", x_adv.len()),
    )
}

fn oracle_equivalence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sel_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let m = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=5);
        let out = random_output(&mut rng, n, 3, 64.0);
        let gts: Vec<GroundTruthObject> = (0..m)
            .map(|_| GroundTruthObject {
                bbox: random_box(&mut rng, 64.0),
                label: rng.gen_range(0..3),
            })
            .collect();
        let cfg = SelectionConfig { k, iou_floor: 0.05 };
        let labels: Vec<usize> = (0..n).map(|i| out.object_label(i)).collect();
        if select_regression_targets(&out, &gts, &cfg) != selection_oracle(&out.boxes, &labels, &gts, k, 0.05, false)
            || select_classification_targets(&out, &gts, &cfg)
                != selection_oracle(&out.boxes, &labels, &gts, k, 0.05, true)
        {
            sel_mismatch += 1;
        }
    }
    let mut map_mismatch = 0;
    let mut map_cases = 0;
    for _ in 0..2000 {
        let n_pred = rng.gen_range(0..=5);
        let n_gt = rng.gen_range(1..=3);
        let mut preds = vec![Vec::new(); 2];
        let mut gts = vec![Vec::new(); 2];
        for _ in 0..n_gt {
            let img = rng.gen_range(0..2);
            gts[img].push(GroundTruthObject {
                bbox: random_box(&mut rng, 20.0),
                label: rng.gen_range(0..2),
            });
        }
        for _ in 0..n_pred {
            let img = rng.gen_range(0..2);
            preds[img].push(Detection {
                bbox: random_box(&mut rng, 20.0),
                label: rng.gen_range(0..2),
                score: rng.gen_range(1..=4) as f64 / 4.0,
            });
        }
        for thr in [0.5, 0.75] {
            map_cases += 1;
            let a = compute_map(&preds, &gts, thr).unwrap().map;
            let b = map_oracle(&preds, &gts, thr).unwrap();
            if (a - b).abs() > 1e-12 {
                map_mismatch += 1;
            }
        }
    }
    let crafted_gts = vec![vec![
        GroundTruthObject {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            label: 0,
        },
        GroundTruthObject {
            bbox: BBox::new(20.0, 0.0, 30.0, 10.0),
            label: 0,
        },
    ]];
    let d = |b: BBox, score: f64| Detection { bbox: b, label: 0, score };
    let crafted = vec![vec![
        d(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9),
        d(BBox::new(50.0, 50.0, 60.0, 60.0), 0.8),
        d(BBox::new(20.0, 0.0, 30.0, 10.0), 0.7),
    ]];
    let ap = compute_map(&crafted, &crafted_gts, 0.5).unwrap().map;
    let pass = sel_mismatch == 0 && map_mismatch == 0 && (ap - 5.0 / 6.0).abs() < 1e-12;
    (
        pass,
        format!(
            "selection mismatches {sel_mismatch}/1000, mAP mismatches {map_mismatch}/{map_cases}, crafted AP {ap} (want 5/6)"
        ),
    )
}

fn adversarial_map(det: &Detector, scenes: &[Scene], adv: &[Tensor]) -> f64 {
    let imgs: Vec<&Tensor> = adv.iter().collect();
    let preds = detect_all(det, &imgs, &Default::default(), true).unwrap();
    let gts: Vec<Vec<GroundTruthObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    compute_map(&preds, &gts, 0.5).unwrap().map
}

#[test]
fn acceptance() {
    let mut gate = Gate { failures: Vec::new() };

    let (ok, msg) = wavelet_correctness();
    gate.record(1, "wavelet correctness", ok, msg);
    let (ok, msg) = gradient_fidelity();
    gate.record(2, "gradient fidelity", ok, msg);
    let (ok, msg) = oracle_equivalence();
    gate.record(3, "oracle equivalence", ok, msg);

    let train = generate_dataset(&DatasetConfig {
        seed: 1,
        n_scenes: 500,
        ..DatasetConfig::default()
    })
    .unwrap();
    let test = generate_dataset(&DatasetConfig {
        seed: 2,
        n_scenes: 100,
        ..DatasetConfig::default()
    })
    .unwrap();
    let t = Instant::now();
    let mut det = Detector::new(DetectorConfig::default()).unwrap();
    det.train(&train, &[], &TrainConfig::default()).unwrap();
    let train_secs = t.elapsed().as_secs_f64();

    let cfg = AttackConfig::default();
    let t = Instant::now();
    let results: Vec<AttackResult> = attack_batch(&det, &test, &cfg, true)
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
    let adv: Vec<Tensor> = results.iter().map(|r| r.adversarial.clone()).collect();
    let report = evaluate(
        &det,
        &test,
        &adv,
        &EvalConfig {
            defenses: DefenseSpec::sweep(Corruption::Brightness),
            ..EvalConfig::default()
        },
        None,
    )
    .unwrap();
    let attack_secs = t.elapsed().as_secs_f64();
    println!("{}", report.to_table());

    // 4: budget, from every recorded iterate plus the returned perturbations.
    let records: usize = results.iter().map(|r| r.trace.len()).sum();
    let trace_ok = results.iter().all(|r| {
        r.trace.len() == cfg.iterations && r.trace.iter().all(|rec| rec.linf <= cfg.epsilon && rec.range_ok)
    });
    let final_ok = results.iter().zip(&test).all(|(r, s)| {
        r.delta.max_abs() <= cfg.epsilon && r.adversarial.data.iter().all(|v| (0.0..=1.0).contains(v)) && {
            let x = s.image.tensor();
            x.add(&r.delta).unwrap() == r.adversarial
        }
    });
    gate.record(
        4,
        "budget invariants",
        trace_ok && final_ok,
        format!("{records} iterates checked, max linf {:.6} (eps {:.6})", report.linf_max, cfg.epsilon),
    );

    // 5: efficacy.
    let ok5 = report.clean_map50 >= 0.70
        && report.adv_map50 <= 0.2 * report.clean_map50
        && report.adv_map75 <= 0.2 * report.clean_map75
        && train_secs < 1800.0
        && attack_secs < 1800.0;
    gate.record(
        5,
        "attack efficacy",
        ok5,
        format!(
            "clean mAP50 {:.4} mAP75 {:.4}; adv mAP50 {:.4} ({:.1}% of clean) mAP75 {:.4} ({:.1}% of clean); train {train_secs:.0}s, attack+eval {attack_secs:.0}s",
            report.clean_map50,
            report.clean_map75,
            report.adv_map50,
            100.0 * report.adv_map50 / report.clean_map50,
            report.adv_map75,
            100.0 * report.adv_map75 / report.clean_map75,
        ),
    );

    // 6: stealth.
    gate.record(
        6,
        "stealth",
        report.nmse_mean <= 1e-3 && report.ssim_proxy_mean <= 0.05,
        format!(
            "mean NMSE {:.3e} (limit 1e-3), mean 1-SSIM {:.4} (limit 0.05)",
            report.nmse_mean, report.ssim_proxy_mean
        ),
    );

    // 7: ablation on the first 30 test scenes. The full variant is the
    // default attack, so its perturbations are reused from above.
    let split = &test[..30];
    let full = adversarial_map(&det, split, &adv[..30]);
    let mut rows = vec![("full", full)];
    for v in [
        AttackVariant::NoFa,
        AttackVariant::NoCls,
        AttackVariant::NoLoc,
        AttackVariant::BaselinePgd,
    ] {
        let imgs: Vec<Tensor> = sfa_core::par::map(split, true, |s| v.run(&det, s, &cfg).unwrap().adversarial);
        rows.push((v.name(), adversarial_map(&det, split, &imgs)));
    }
    let pgd = rows.last().unwrap().1;
    let ok7 = rows.iter().all(|&(_, m)| full <= m) && full < pgd;
    gate.record(
        7,
        "ablation ordering",
        ok7,
        rows.iter()
            .map(|(n, m)| format!("{n} {m:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
    );

    // 8: brightness.
    let ok8 = report.defenses.len() == 5 && report.defenses.iter().all(|d| d.adv.map50 <= 0.5 * d.clean.map50);
    gate.record(
        8,
        "corruption resilience",
        ok8,
        report
            .defenses
            .iter()
            .map(|d| format!("{} adv {:.4} / clean {:.4}", d.defense, d.adv.map50, d.clean.map50))
            .collect::<Vec<_>>()
            .join("; "),
    );

    // 9: determinism, rerun sequentially.
    let rerun: Vec<AttackResult> = attack_batch(&det, &test[..20], &cfg, false)
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
    let identical = rerun.iter().zip(&results).all(|(a, b)| {
        a.delta.data.len() == b.delta.data.len()
            && a.delta.data.iter().zip(&b.delta.data).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    gate.record(
        9,
        "determinism",
        identical,
        format!("{} scenes re-attacked sequentially, bit-identical: {identical}", rerun.len()),
    );

    assert!(gate.failures.is_empty(), "failed criteria: {:?}", gate.failures);
}
