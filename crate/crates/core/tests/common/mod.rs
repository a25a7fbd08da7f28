//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use sfa_core::bbox::BBox;
use sfa_core::dataset::GroundTruthObject;
use sfa_core::detector::{Detection, DetectorOutput};

/// Filter-then-sort selection written from scratch: per object, keep every
/// eligible candidate at or above the floor, order by (IoU desc, index asc)
/// with a full comparison sort, take the first `k`.
pub fn selection_oracle(
    boxes: &[BBox],
    object_labels: &[usize],
    gts: &[GroundTruthObject],
    k: usize,
    floor: f64,
    label_aware: bool,
) -> Vec<Vec<usize>> {
    gts.iter()
        .map(|g| {
            let mut pool = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                if label_aware && object_labels[i] != g.label {
                    continue;
                }
                let v = iou_oracle(b, &g.bbox);
                if v >= floor {
                    pool.push((i, v));
                }
            }
            // Insertion sort keeps this independent of the library's sort.
            for a in 1..pool.len() {
                let mut j = a;
                while j > 0 {
                    let (p, q) = (pool[j - 1], pool[j]);
                    let swap = q.1 > p.1 || (q.1 == p.1 && q.0 < p.0);
                    if !swap {
                        break;
                    }
                    pool.swap(j - 1, j);
                    j -= 1;
                }
            }
            pool.into_iter().take(k).map(|(i, _)| i).collect()
        })
        .collect()
}

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// mAP via an explicit prediction×GT IoU matrix and O(n²) all-points
/// interpolation: precision at each rank is the maximum precision over all
/// ranks with recall at least as large.
pub fn map_oracle(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    thr: f64,
) -> Option<f64> {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut aps = Vec::new();
    for &c in &classes {
        let n_gt = gts.iter().flatten().filter(|g| g.label == c).count();
        let mut flat: Vec<(usize, usize, Detection)> = Vec::new();
        for (img, ps) in preds.iter().enumerate() {
            for (j, p) in ps.iter().enumerate() {
                if p.label == c {
                    flat.push((img, j, *p));
                }
            }
        }
        // Stable ranking: score desc, then (image, position) asc.
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&a, &b| {
            flat[b].2.score.partial_cmp(&flat[a].2.score).unwrap().then((flat[a].0, flat[a].1).cmp(&(flat[b].0, flat[b].1)))
        });
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::new();
        for &o in &order {
            let (img, _, p) = flat[o];
            let ious: Vec<f64> = gts[img]
                .iter()
                .map(|g| if g.label == c { iou_oracle(&p.bbox, &g.bbox) } else { -1.0 })
                .collect();
            let mut best: Option<usize> = None;
            for (j, &v) in ious.iter().enumerate() {
                if taken[img][j] || v < thr {
                    continue;
                }
                if best.is_none_or(|b| v > ious[b]) {
                    best = Some(j);
                }
            }
            if let Some(b) = best {
                taken[img][b] = true;
            }
            tp.push(best.is_some());
        }
        let n = tp.len();
        let mut prec = vec![0.0; n];
        let mut rec = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            if tp[i] {
                acc += 1.0;
            }
            prec[i] = acc / (i + 1) as f64;
            rec[i] = acc / n_gt as f64;
        }
        let mut ap = 0.0;
        let mut last_r = 0.0;
        for i in 0..n {
            if rec[i] > last_r {
                let p_interp = (i..n).map(|j| prec[j]).fold(0.0, f64::max);
                ap += (rec[i] - last_r) * p_interp;
                last_r = rec[i];
            }
        }
        aps.push(ap);
    }
    Some(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn random_box(rng: &mut impl Rng, size: f64) -> BBox {
    let x1 = rng.gen_range(0.0..size - 2.0);
    let y1 = rng.gen_range(0.0..size - 2.0);
    let x2 = rng.gen_range(x1 + 1.0..=size);
    let y2 = rng.gen_range(y1 + 1.0..=size);
    BBox::new(x1, y1, x2, y2)
}

/// Random detector output whose rows put most mass on a random label.
pub fn random_output(rng: &mut impl Rng, n: usize, k: usize, size: f64) -> DetectorOutput {
    let boxes = (0..n).map(|_| random_box(rng, size)).collect();
    let mut probs = Vec::with_capacity(n * (k + 1));
    for _ in 0..n {
        let raw: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / s));
    }
    DetectorOutput { boxes, probs, num_classes: k }
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// dominating the maximum.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
