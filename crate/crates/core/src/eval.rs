//! Detection accuracy, stealth metrics, corruptions and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruthObject, Scene};
use crate::detector::{postprocess, Detection, ObjectDetector, PostprocessConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

// ----------------------------------------------------------------------
// mAP

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    /// AP of every class with at least one ground-truth instance.
    pub per_class: BTreeMap<usize, f64>,
}

/// All-points interpolated AP from a TP/FP sequence already in score order.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// mAP over a set of images. `predictions[i]` and `ground_truths[i]` belong to
/// image `i`. Predictions are ranked by score per class; equal scores keep
/// input order.
pub fn compute_map(
    predictions: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruthObject>],
    iou_threshold: f64,
) -> Result<MapResult> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for g in ground_truths.iter().flatten() {
        *gt_count.entry(g.label).or_default() += 1;
    }
    if gt_count.is_empty() {
        return Err(Error::Undefined("mAP needs at least one ground-truth object".into()));
    }
    let mut per_class = BTreeMap::new();
    for (&class, &n_gt) in &gt_count {
        let mut ranked: Vec<(usize, &Detection)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(img, ps)| ps.iter().filter(|p| p.label == class).map(move |p| (img, p)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, p)| {
                let best = ground_truths[img]
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| g.label == class && !used[img][*j])
                    .map(|(j, g)| (j, p.bbox.iou(&g.bbox)))
                    .filter(|&(_, v)| v >= iou_threshold)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                match best {
                    Some((j, _)) => {
                        used[img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.insert(class, average_precision(&hits, n_gt));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapResult { map, per_class })
}

pub fn detect_all<D: ObjectDetector + ?Sized>(
    model: &D,
    images: &[&Tensor],
    pp: &PostprocessConfig,
    parallel: bool,
) -> Result<Vec<Vec<Detection>>> {
    par::map(images, parallel, |img| {
        model
            .forward(img)
            .map(|out| postprocess(&out, pp.score_threshold, pp.nms_iou))
    })
    .into_iter()
    .collect()
}

/// mAP of `model` on the clean images of `scenes`.
pub fn detector_map<D: ObjectDetector + ?Sized>(
    model: &D,
    scenes: &[Scene],
    pp: &PostprocessConfig,
    iou_threshold: f64,
    parallel: bool,
) -> Result<f64> {
    let images: Vec<&Tensor> = scenes.iter().map(|s| s.image.tensor()).collect();
    let preds = detect_all(model, &images, pp, parallel)?;
    let gts: Vec<Vec<GroundTruthObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    Ok(compute_map(&preds, &gts, iou_threshold)?.map)
}

// ----------------------------------------------------------------------
// Stealth metrics

pub fn nmse(x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    x.ensure_same_shape(x_adv)?;
    let energy = x.sum_sq();
    if energy == 0.0 {
        return Err(Error::Undefined("NMSE of an all-zero reference image".into()));
    }
    let diff: f64 = x.data.iter().zip(&x_adv.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(diff / energy)
}

/// Anisotropic total variation on a 0–255 scale: mean absolute horizontal
/// neighbour difference plus mean absolute vertical one, summed over channels.
pub fn tv(x: &Tensor) -> f64 {
    let (c, h, w) = x.shape();
    let (mut horiz, mut vert) = (0.0, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x.get(ch, y, xx);
                if xx + 1 < w {
                    horiz += (x.get(ch, y, xx + 1) - v).abs();
                }
                if y + 1 < h {
                    vert += (x.get(ch, y + 1, xx) - v).abs();
                }
            }
        }
    }
    let h_pairs = (h * w.saturating_sub(1)) as f64;
    let v_pairs = (h.saturating_sub(1) * w) as f64;
    let h_term = if h_pairs > 0.0 { horiz / h_pairs } else { 0.0 };
    let v_term = if v_pairs > 0.0 { vert / v_pairs } else { 0.0 };
    255.0 * (h_term + v_term)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn grayscale(x: &Tensor) -> Vec<f64> {
    let n = x.plane_len();
    let mut g = vec![0.0; n];
    for c in 0..x.channels {
        for (a, b) in g.iter_mut().zip(x.plane(c)) {
            *a += b / x.channels as f64;
        }
    }
    g
}

/// Mean windowed SSIM of the channel-mean grayscale images (dynamic range 1).
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.ensure_same_shape(y)?;
    let (_, h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let a = grayscale(x);
    let b = grayscale(y);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_a = filter_valid(&a, h, w, &g);
    let mu_b = filter_valid(&b, h, w, &g);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &g);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &g);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `1 − SSIM`; zero for identical images.
pub fn ssim_proxy(x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    Ok(1.0 - ssim(x, x_adv)?)
}

// ----------------------------------------------------------------------
// Corruptions

pub const BRIGHTNESS_OFFSETS: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.25];
const SPATTER_MAX_BLOBS_PER_LEVEL: usize = 3;
const SPATTER_COLOR: [f64; 3] = [0.32, 0.27, 0.22];

fn check_severity(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(severity as usize - 1)
    } else {
        Err(Error::Range(format!("severity must be 1..=5, got {severity}")))
    }
}

pub fn corrupt_brightness(image: &Tensor, severity: u8) -> Result<Tensor> {
    let off = BRIGHTNESS_OFFSETS[check_severity(severity)?];
    Ok(image.map(|v| (v + off).clamp(0.0, 1.0)))
}

/// Opaque round blobs in a single colour. Blob centres and base radii come
/// from `seed` alone, and both count and radius grow with severity, so the
/// covered region at one severity contains the region of every lower one.
pub fn corrupt_spatter(image: &Tensor, severity: u8, seed: u64) -> Result<Tensor> {
    let level = check_severity(severity)? + 1;
    let (c, h, w) = image.shape();
    let scale = h.min(w) as f64 / 128.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64)> = (0..5 * SPATTER_MAX_BLOBS_PER_LEVEL)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(2.0..4.0) * scale,
            )
        })
        .collect();
    let active = &blobs[..level * SPATTER_MAX_BLOBS_PER_LEVEL];
    let grow = 0.5 + 0.25 * level as f64;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = active.iter().any(|&(bx, by, r)| {
                let r = r * grow;
                (px - bx).powi(2) + (py - by).powi(2) <= r * r
            });
            if hit {
                for ch in 0..c {
                    let color = if c == 3 { SPATTER_COLOR[ch] } else { 0.27 };
                    out.set(ch, y, x, color);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Brightness,
    Spatter,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::Brightness => "brightness",
            Corruption::Spatter => "spatter",
        }
    }
}

/// A corruption at a fixed severity, written `name:severity` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub corruption: Corruption,
    pub severity: u8,
}

impl DefenseSpec {
    pub fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        match self.corruption {
            Corruption::Brightness => corrupt_brightness(image, self.severity),
            Corruption::Spatter => corrupt_spatter(image, self.severity, seed),
        }
    }

    /// Every severity of `corruption`, in increasing order.
    pub fn sweep(corruption: Corruption) -> Vec<DefenseSpec> {
        (1..=5).map(|severity| DefenseSpec { corruption, severity }).collect()
    }
}

impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.corruption.name(), self.severity)
    }
}

impl FromStr for DefenseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("defense '{s}' is not of the form name:severity")))?;
        let corruption = match name {
            "brightness" => Corruption::Brightness,
            "spatter" => Corruption::Spatter,
            _ => return Err(Error::Config(format!("unknown corruption '{name}'"))),
        };
        let severity: u8 = sev
            .parse()
            .map_err(|_| Error::Config(format!("bad severity in '{s}'")))?;
        check_severity(severity).map_err(|e| Error::Config(e.to_string()))?;
        Ok(DefenseSpec { corruption, severity })
    }
}

// ----------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub postprocess: PostprocessConfig,
    pub defenses: Vec<DefenseSpec>,
    /// Spatter blobs for scene `i` are drawn from `spatter_seed + i`.
    pub spatter_seed: u64,
    pub parallel: bool,
    pub fingerprint: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            postprocess: PostprocessConfig::default(),
            defenses: Vec::new(),
            spatter_seed: 0,
            parallel: true,
            fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_id: String,
    pub num_objects: usize,
    pub clean_detections: usize,
    pub adv_detections: usize,
    pub nmse: f64,
    pub tv: f64,
    pub tv_delta: f64,
    pub ssim_proxy: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPair {
    pub map50: f64,
    pub map75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub defense: DefenseSpec,
    pub clean: MapPair,
    pub adv: MapPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub clean_map50: f64,
    pub clean_map75: f64,
    pub adv_map50: f64,
    pub adv_map75: f64,
    pub nmse_mean: f64,
    /// Mean TV of the adversarial images.
    pub tv_mean: f64,
    /// Mean TV of the perturbations alone.
    pub tv_delta_mean: f64,
    pub ssim_proxy_mean: f64,
    pub linf_max: f64,
    pub scenes: Vec<SceneRow>,
    pub defenses: Vec<DefenseRow>,
    /// Clean/adversarial mAP of the defended model, when one was supplied.
    pub defended_model: Option<(MapPair, MapPair)>,
    pub fingerprint: String,
}

pub const SSIM_NOTE: &str =
    "stealth uses windowed SSIM (11x11 Gaussian, sigma 1.5, grayscale) in place of IW-SSIM";

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        let maps = [self.clean_map50, self.clean_map75, self.adv_map50, self.adv_map75]
            .into_iter()
            .chain(self.defenses.iter().flat_map(|d| [d.clean.map50, d.clean.map75, d.adv.map50, d.adv.map75]));
        for m in maps {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Consistency(format!("mAP {m} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Human-readable table; mAP, 1−SSIM and NMSE are multiplied by 100.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {SSIM_NOTE}");
        let _ = writeln!(s, "# mAP, 1-SSIM and NMSE are x100; TV is per pixel on a 0-255 scale");
        if !self.fingerprint.is_empty() {
            let _ = writeln!(s, "# config {}", self.fingerprint);
        }
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>8} {:>8}",
            "condition", "clean50", "clean75", "adv50", "adv75"
        );
        let row = |s: &mut String, name: &str, c: MapPair, a: MapPair| {
            let _ = writeln!(
                s,
                "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                name,
                100.0 * c.map50,
                100.0 * c.map75,
                100.0 * a.map50,
                100.0 * a.map75
            );
        };
        row(
            &mut s,
            "none",
            MapPair {
                map50: self.clean_map50,
                map75: self.clean_map75,
            },
            MapPair {
                map50: self.adv_map50,
                map75: self.adv_map75,
            },
        );
        for d in &self.defenses {
            row(&mut s, &d.defense.to_string(), d.clean, d.adv);
        }
        if let Some((c, a)) = self.defended_model {
            row(&mut s, "defended-model", c, a);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<16} {:>10.4}", "1-SSIM x100", 100.0 * self.ssim_proxy_mean);
        let _ = writeln!(s, "{:<16} {:>10.4}", "NMSE x100", 100.0 * self.nmse_mean);
        let _ = writeln!(s, "{:<16} {:>10.2}", "TV (adv)", self.tv_mean);
        let _ = writeln!(s, "{:<16} {:>10.2}", "TV (delta)", self.tv_delta_mean);
        let _ = writeln!(s, "{:<16} {:>10.5}", "max linf", self.linf_max);
        s
    }
}

fn map_pair<D: ObjectDetector + ?Sized>(
    model: &D,
    images: &[&Tensor],
    gts: &[Vec<GroundTruthObject>],
    pp: &PostprocessConfig,
    parallel: bool,
) -> Result<(MapPair, Vec<usize>)> {
    let preds = detect_all(model, images, pp, parallel)?;
    let counts = preds.iter().map(Vec::len).collect();
    Ok((
        MapPair {
            map50: compute_map(&preds, gts, 0.5)?.map,
            map75: compute_map(&preds, gts, 0.75)?.map,
        },
        counts,
    ))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores `model` on the clean scenes and on `adversarial[i]` (the attacked
/// version of `scenes[i]`), optionally after each requested corruption.
pub fn evaluate(
    model: &dyn ObjectDetector,
    scenes: &[Scene],
    adversarial: &[Tensor],
    cfg: &EvalConfig,
    defended: Option<&dyn ObjectDetector>,
) -> Result<EvaluationReport> {
    if scenes.len() != adversarial.len() {
        return Err(Error::Shape(format!(
            "{} adversarial images for {} scenes",
            adversarial.len(),
            scenes.len()
        )));
    }
    for (s, a) in scenes.iter().zip(adversarial) {
        s.image.tensor().ensure_same_shape(a).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("scene {}: {m}", s.id)),
            other => other,
        })?;
    }
    let clean: Vec<&Tensor> = scenes.iter().map(|s| s.image.tensor()).collect();
    let adv: Vec<&Tensor> = adversarial.iter().collect();
    let gts: Vec<Vec<GroundTruthObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    let pp = &cfg.postprocess;

    let (clean_maps, clean_counts) = map_pair(model, &clean, &gts, pp, cfg.parallel)?;
    let (adv_maps, adv_counts) = map_pair(model, &adv, &gts, pp, cfg.parallel)?;

    let pairs: Vec<usize> = (0..scenes.len()).collect();
    let stealth = par::map(&pairs, cfg.parallel, |&i| -> Result<(f64, f64, f64, f64, f64)> {
        let (x, a) = (clean[i], adv[i]);
        let delta = a.sub(x)?;
        Ok((nmse(x, a)?, tv(a), tv(&delta), ssim_proxy(x, a)?, delta.max_abs()))
    });
    let mut rows = Vec::with_capacity(scenes.len());
    for (i, st) in stealth.into_iter().enumerate() {
        let (nmse, tv, tv_delta, ssim_proxy, linf) = st?;
        rows.push(SceneRow {
            scene_id: scenes[i].id.clone(),
            num_objects: scenes[i].objects.len(),
            clean_detections: clean_counts[i],
            adv_detections: adv_counts[i],
            nmse,
            tv,
            tv_delta,
            ssim_proxy,
            linf,
        });
    }

    let mut defenses = Vec::with_capacity(cfg.defenses.len());
    for d in &cfg.defenses {
        let corrupt = |imgs: &[&Tensor]| -> Result<Vec<Tensor>> {
            imgs.iter()
                .enumerate()
                .map(|(i, t)| d.apply(t, cfg.spatter_seed.wrapping_add(i as u64)))
                .collect()
        };
        let c = corrupt(&clean)?;
        let a = corrupt(&adv)?;
        let (cm, _) = map_pair(model, &c.iter().collect::<Vec<_>>(), &gts, pp, cfg.parallel)?;
        let (am, _) = map_pair(model, &a.iter().collect::<Vec<_>>(), &gts, pp, cfg.parallel)?;
        defenses.push(DefenseRow {
            defense: *d,
            clean: cm,
            adv: am,
        });
    }

    let defended_model = match defended {
        Some(m) => Some((
            map_pair(m, &clean, &gts, pp, cfg.parallel)?.0,
            map_pair(m, &adv, &gts, pp, cfg.parallel)?.0,
        )),
        None => None,
    };

    let report = EvaluationReport {
        clean_map50: clean_maps.map50,
        clean_map75: clean_maps.map75,
        adv_map50: adv_maps.map50,
        adv_map75: adv_maps.map75,
        nmse_mean: mean(rows.iter().map(|r| r.nmse)),
        tv_mean: mean(rows.iter().map(|r| r.tv)),
        tv_delta_mean: mean(rows.iter().map(|r| r.tv_delta)),
        ssim_proxy_mean: mean(rows.iter().map(|r| r.ssim_proxy)),
        linf_max: rows.iter().map(|r| r.linf).fold(0.0, f64::max),
        scenes: rows,
        defenses,
        defended_model,
        fingerprint: cfg.fingerprint.clone(),
    };
    report.validate()?;
    Ok(report)
}
