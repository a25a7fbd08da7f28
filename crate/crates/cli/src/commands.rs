use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use sfa_core::attack::{AttackResult, AttackVariant, IterationRecord};
use sfa_core::dataset::{generate_dataset, read_annotations, write_annotations, Annotations, Scene};
use sfa_core::detector::{Detector, DetectorConfig};
use sfa_core::eval::{evaluate, Corruption, DefenseSpec, EvalConfig, EvaluationReport};
use sfa_core::io::{load_png, save_png, BitDepth};
use sfa_core::plot::{line_chart, Series};
use sfa_core::tensor::Tensor;
use sfa_core::wavelet::{dwt2, pad_even, reconstruct_hfc, reconstruct_lfc, WaveletFilters};

use crate::config::RunConfig;
use crate::rundir::{write_atomic, RunDir};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const CHECKPOINT_FILE: &str = "detector.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "sfa-adversarial/1";

/// Accepts a split directory or the annotation file inside it.
pub fn load_split(path: &Path, limit: Option<usize>) -> Result<Annotations> {
    let file = if path.is_dir() { path.join(ANNOTATION_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        bail!("dataset not found: {}", file.display());
    }
    let mut ann = read_annotations(&file).with_context(|| format!("loading dataset {}", file.display()))?;
    if let Some(n) = limit {
        ann.scenes.truncate(n);
    }
    if ann.scenes.is_empty() {
        bail!("dataset {} has no scenes", file.display());
    }
    Ok(ann)
}

pub fn load_checkpoint(path: &Path) -> Result<Detector> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        bail!("checkpoint not found: {}", file.display());
    }
    Detector::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

fn check_compatible(det: &Detector, ann: &Annotations) -> Result<()> {
    let cfg = det.config();
    if cfg.num_classes != ann.num_classes {
        bail!("checkpoint has {} classes, dataset has {}", cfg.num_classes, ann.num_classes);
    }
    if let Some(s) = ann.scenes.iter().find(|s| s.image.width() != cfg.image_size || s.image.height() != cfg.image_size) {
        bail!(
            "scene {} is {}x{}, checkpoint expects {}x{}",
            s.id,
            s.image.width(),
            s.image.height(),
            cfg.image_size,
            cfg.image_size
        );
    }
    Ok(())
}

// ----------------------------------------------------------------------
// gen-data

pub fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let scenes = generate_dataset(&cfg.data)?;
    write_annotations(&scenes, cfg.data.k_classes, &dir.join(ANNOTATION_FILE))?;
    let hist = sfa_core::dataset::class_histogram(&scenes, cfg.data.k_classes);
    info!("wrote {} scenes, objects per class {:?}", scenes.len(), hist);
    Ok(())
}

// ----------------------------------------------------------------------
// train

pub fn train(cfg: &RunConfig, dir: &RunDir, data: &Path, val: Option<&Path>) -> Result<()> {
    let train = load_split(data, None)?;
    let val = val.map(|p| load_split(p, None)).transpose()?;
    let size = train.scenes[0].image.width();
    let det_cfg = DetectorConfig {
        image_size: size,
        in_channels: train.scenes[0].image.channels(),
        num_classes: train.num_classes,
        ..cfg.detector.clone()
    };
    let mut det = Detector::new(det_cfg)?;
    let val_scenes: &[Scene] = val.as_ref().map_or(&[], |v| &v.scenes);
    let history = det.train(&train.scenes, val_scenes, &cfg.train)?;
    det.save(&dir.join(CHECKPOINT_FILE))?;
    dir.write_json("training.json", &history)?;
    let loss = Series {
        name: "train loss".into(),
        points: history.iter().map(|h| (h.epoch as f64, h.loss)).collect(),
    };
    let mut series = vec![loss];
    if history.iter().any(|h| h.val_map50.is_some()) {
        series.push(Series {
            name: "val mAP50".into(),
            points: history.iter().filter_map(|h| h.val_map50.map(|m| (h.epoch as f64, m))).collect(),
        });
    }
    dir.write_text("plots/training.svg", &line_chart("Detector training", "epoch", "value", &series))?;
    if let Some(last) = history.last() {
        println!("final loss {:.4}, val mAP50 {:?}", last.loss, last.val_map50);
    }
    Ok(())
}

// ----------------------------------------------------------------------
// attack

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub fingerprint: String,
    pub variant: String,
    /// Scene id to image path, relative to the manifest's directory.
    pub scenes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.format != MANIFEST_FORMAT {
            bail!("manifest {} has unknown format {:?}", path.display(), m.format);
        }
        Ok(m)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneSummary {
    scene_id: String,
    outcome: sfa_core::attack::AttackOutcome,
    best_iteration: usize,
    clean_detections: usize,
    final_detections: usize,
    linf: f64,
    elapsed_secs: f64,
}

fn trace_path(id: &str) -> String {
    format!("traces/{id}.jsonl")
}

fn adv_path(id: &str) -> String {
    format!("adv/{id}.png")
}

fn write_scene(dir: &RunDir, r: &AttackResult) -> Result<SceneSummary> {
    save_png(&r.adversarial, &dir.join(adv_path(&r.scene_id)), BitDepth::Sixteen)?;
    let mut lines = String::new();
    for rec in &r.trace {
        lines.push_str(&serde_json::to_string(rec)?);
        lines.push('\n');
    }
    dir.write_text(trace_path(&r.scene_id), &lines)?;
    Ok(SceneSummary {
        scene_id: r.scene_id.clone(),
        outcome: r.outcome,
        best_iteration: r.best_iteration,
        clean_detections: r.clean_detections,
        final_detections: r.final_detections.len(),
        linf: r.linf(),
        elapsed_secs: r.elapsed_secs,
    })
}

fn read_trace(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading trace {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing trace {}", path.display())))
        .collect()
}

fn loss_plot(traces: &[Vec<IterationRecord>]) -> String {
    let mean_of = |f: &dyn Fn(&IterationRecord) -> f64| -> Vec<(f64, f64)> {
        let len = traces.iter().map(Vec::len).max().unwrap_or(0);
        (0..len)
            .map(|i| {
                let vals: Vec<f64> = traces.iter().filter_map(|t| t.get(i)).map(f).collect();
                (i as f64, vals.iter().sum::<f64>() / vals.len().max(1) as f64)
            })
            .collect()
    };
    let series = [
        ("J_total", mean_of(&|r| r.losses.j_total)),
        ("J_sa", mean_of(&|r| r.losses.j_sa)),
        ("best J_total", mean_of(&|r| r.best_total)),
    ]
    .into_iter()
    .map(|(n, p)| Series { name: n.into(), points: p })
    .collect::<Vec<_>>();
    line_chart("Attack loss (mean over scenes)", "iteration", "loss", &series)
}

pub struct AttackArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub limit: Option<usize>,
    pub variant: AttackVariant,
    pub parallel: bool,
    pub chunk: usize,
}

pub fn attack(cfg: &RunConfig, dir: &RunDir, args: &AttackArgs) -> Result<()> {
    cfg.attack.validate()?;
    let det = load_checkpoint(args.checkpoint)?;
    let ann = load_split(args.data, args.limit)?;
    check_compatible(&det, &ann)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let m = Manifest::load(&manifest_path)?;
        if m.variant != args.variant.name() {
            bail!("cannot resume: run used variant {}, requested {}", m.variant, args.variant);
        }
        m
    } else {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            fingerprint: dir.fingerprint.clone(),
            variant: args.variant.name().into(),
            scenes: BTreeMap::new(),
        }
    };
    let pending: Vec<&Scene> = ann
        .scenes
        .iter()
        .filter(|s| {
            let done = manifest.scenes.contains_key(&s.id)
                && dir.join(adv_path(&s.id)).exists()
                && dir.join(trace_path(&s.id)).exists();
            !done
        })
        .collect();
    if pending.len() < ann.scenes.len() {
        info!("resuming: {} of {} scenes already done", ann.scenes.len() - pending.len(), ann.scenes.len());
    }

    let mut failures = Vec::new();
    for chunk in pending.chunks(args.chunk.max(1)) {
        let results = sfa_core::par::map(chunk, args.parallel, |s| args.variant.run(&det, s, &cfg.attack));
        for (scene, r) in chunk.iter().zip(results) {
            match r.map_err(anyhow::Error::from).and_then(|r| write_scene(dir, &r)) {
                Ok(summary) => {
                    info!(
                        "{}: {} -> {} detections (best iteration {})",
                        summary.scene_id, summary.clean_detections, summary.final_detections, summary.best_iteration
                    );
                    let line = serde_json::to_string(&summary)?;
                    let mut f = fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("summary.jsonl"))
                        .context("opening summary.jsonl")?;
                    writeln!(f, "{line}").context("writing summary.jsonl")?;
                    manifest.scenes.insert(scene.id.clone(), adv_path(&scene.id));
                }
                Err(e) => {
                    warn!("{}: {e:#}", scene.id);
                    failures.push(scene.id.clone());
                }
            }
        }
        dir.write_json(MANIFEST_FILE, &manifest)?;
    }

    let traces = ann
        .scenes
        .iter()
        .filter(|s| manifest.scenes.contains_key(&s.id))
        .map(|s| read_trace(&dir.join(trace_path(&s.id))))
        .collect::<Result<Vec<_>>>()?;
    dir.write_text("plots/loss_trace.svg", &loss_plot(&traces))?;
    if !failures.is_empty() {
        bail!("{} scene(s) failed: {}", failures.len(), failures.join(", "));
    }
    println!("attacked {} scenes", manifest.scenes.len());
    Ok(())
}

// ----------------------------------------------------------------------
// eval

pub fn parse_defenses(specs: &[String], sweeps: &[String]) -> Result<Vec<DefenseSpec>> {
    let mut out: Vec<DefenseSpec> = specs
        .iter()
        .map(|s| s.parse::<DefenseSpec>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    for s in sweeps {
        let kind = match s.as_str() {
            "brightness" => Corruption::Brightness,
            "spatter" => Corruption::Spatter,
            other => bail!("unknown corruption sweep '{other}'"),
        };
        out.extend(DefenseSpec::sweep(kind));
    }
    let mut seen = std::collections::HashSet::new();
    out.retain(|d| seen.insert(*d));
    Ok(out)
}

/// Loads the adversarial image of every scene; a scene absent from the
/// manifest is an error.
pub fn load_adversarial(manifest_path: &Path, scenes: &[Scene]) -> Result<Vec<Tensor>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    scenes
        .iter()
        .map(|s| {
            let rel = manifest
                .scenes
                .get(&s.id)
                .with_context(|| format!("scene {} is missing from manifest {}", s.id, manifest_path.display()))?;
            let p = base.join(rel);
            Ok(load_png(&p).with_context(|| format!("loading {}", p.display()))?.into_tensor())
        })
        .collect()
}

fn severity_plot(report: &EvaluationReport) -> Option<String> {
    if report.defenses.is_empty() {
        return None;
    }
    let mut series = Vec::new();
    for kind in [Corruption::Brightness, Corruption::Spatter] {
        let mut rows: Vec<_> = report.defenses.iter().filter(|d| d.defense.corruption == kind).collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|d| d.defense.severity);
        let mut clean = vec![(0.0, report.clean_map50)];
        let mut adv = vec![(0.0, report.adv_map50)];
        for d in rows {
            clean.push((d.defense.severity as f64, d.clean.map50));
            adv.push((d.defense.severity as f64, d.adv.map50));
        }
        series.push(Series { name: format!("{} clean", kind.name()), points: clean });
        series.push(Series { name: format!("{} adv", kind.name()), points: adv });
    }
    Some(line_chart("mAP50 under corruption", "severity", "mAP50", &series))
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub manifest: &'a Path,
    pub limit: Option<usize>,
    pub defenses: Vec<DefenseSpec>,
    pub defended: Option<&'a Path>,
    pub parallel: bool,
}

pub fn eval(cfg: &RunConfig, dir: &RunDir, args: &EvalArgs) -> Result<EvaluationReport> {
    let det = load_checkpoint(args.checkpoint)?;
    let ann = load_split(args.data, args.limit)?;
    check_compatible(&det, &ann)?;
    let adv = load_adversarial(args.manifest, &ann.scenes)?;
    let defended = args.defended.map(load_checkpoint).transpose()?;
    let eval_cfg = EvalConfig {
        postprocess: cfg.eval.postprocess,
        defenses: args.defenses.clone(),
        spatter_seed: cfg.eval.spatter_seed,
        parallel: args.parallel,
        fingerprint: dir.fingerprint.clone(),
    };
    let report = evaluate(
        &det,
        &ann.scenes,
        &adv,
        &eval_cfg,
        defended.as_ref().map(|d| d as &dyn sfa_core::detector::ObjectDetector),
    )?;
    let table = report.to_table();
    dir.write_text("report.txt", &table)?;
    dir.write_json("report.json", &report)?;
    if let Some(svg) = severity_plot(&report) {
        dir.write_text("plots/map_vs_severity.svg", &svg)?;
    }
    print!("{table}");
    Ok(report)
}

// ----------------------------------------------------------------------
// ablate

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub adv_map50: f64,
    pub adv_map75: f64,
    pub nmse_mean: f64,
    pub ssim_proxy_mean: f64,
    pub seed: u64,
    pub fingerprint: String,
}

pub fn ablate(
    cfg: &RunConfig,
    dir: &RunDir,
    checkpoint: &Path,
    data: &Path,
    limit: Option<usize>,
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    cfg.attack.validate()?;
    let det = load_checkpoint(checkpoint)?;
    let ann = load_split(data, limit)?;
    check_compatible(&det, &ann)?;
    let eval_cfg = EvalConfig {
        postprocess: cfg.eval.postprocess,
        parallel,
        fingerprint: dir.fingerprint.clone(),
        ..EvalConfig::default()
    };
    let mut rows = Vec::new();
    for variant in AttackVariant::ALL {
        let adv = sfa_core::par::map(&ann.scenes, parallel, |s| {
            variant.run(&det, s, &cfg.attack).map(|r| r.adversarial)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let report = evaluate(&det, &ann.scenes, &adv, &eval_cfg, None)?;
        info!("{variant}: adv mAP50 {:.4}", report.adv_map50);
        rows.push(AblationRow {
            variant: variant.name().into(),
            adv_map50: report.adv_map50,
            adv_map75: report.adv_map75,
            nmse_mean: report.nmse_mean,
            ssim_proxy_mean: report.ssim_proxy_mean,
            seed: cfg.attack.seed,
            fingerprint: dir.fingerprint.clone(),
        });
    }
    let mut table = String::new();
    let _ = writeln!(table, "# mAP and NMSE x100; {} scenes", ann.scenes.len());
    let _ = writeln!(table, "{:<14} {:>8} {:>8} {:>8} {:>8}", "variant", "adv50", "adv75", "NMSE", "1-SSIM");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<14} {:>8.2} {:>8.2} {:>8.4} {:>8.4}",
            r.variant,
            100.0 * r.adv_map50,
            100.0 * r.adv_map75,
            100.0 * r.nmse_mean,
            r.ssim_proxy_mean
        );
    }
    dir.write_text("ablation.txt", &table)?;
    dir.write_json("ablation.json", &rows)?;
    print!("{table}");
    Ok(rows)
}

// ----------------------------------------------------------------------
// decompose

/// Maps `t` linearly onto `[0, 1]` for display.
fn stretch(t: &Tensor) -> Tensor {
    let lo = t.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return t.map(|_| 0.5);
    }
    t.map(|v| (v - lo) / (hi - lo))
}

pub fn decompose(dir: &RunDir, image: &Path) -> Result<()> {
    if !image.exists() {
        bail!("image not found: {}", image.display());
    }
    let x = load_png(image)?.into_tensor();
    let f = WaveletFilters::haar();
    let (padded, record) = pad_even(&x);
    let d = dwt2(&padded, &f)?;
    let mut energies = BTreeMap::new();
    for (name, band) in d.bands() {
        save_png(&stretch(band), &dir.join(format!("band_{name}.png")), BitDepth::Eight)?;
        energies.insert(name.to_string(), band.sum_sq());
    }
    let lfc = reconstruct_lfc(&x, &f)?;
    let hfc = reconstruct_hfc(&x, &f)?;
    save_png(&lfc.map(|v| v.clamp(0.0, 1.0)), &dir.join("lfc.png"), BitDepth::Eight)?;
    save_png(&stretch(&hfc), &dir.join("hfc.png"), BitDepth::Eight)?;
    dir.write_json(
        "energies.json",
        &serde_json::json!({ "padded": !record.is_empty(), "bands": energies, "image": x.sum_sq() }),
    )?;
    for (name, e) in &energies {
        println!("{name:<3} {e:.4}");
    }
    Ok(())
}

pub fn write_invocation(dir: &RunDir, command: &[String]) -> Result<()> {
    let record = serde_json::json!({
        "command": command,
        "fingerprint": dir.fingerprint,
        "started": chrono::Local::now().to_rfc3339(),
    });
    write_atomic(&dir.join("invocation.json"), serde_json::to_string_pretty(&record)?.as_bytes())
}
