//! Iterative L∞-bounded attack combining the spatial and frequency objectives.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruthObject, Scene};
use crate::detector::{postprocess, Detection, Detector, DetectorOutput, PostprocessConfig};
use crate::error::{Error, Result};
use crate::losses::{cls_loss, freq_loss, loc_loss, total_loss, LossBreakdown};
use crate::par;
use crate::targeting::{build_attack_target_set, AttackTargetSet, SelectionConfig, TargetingError};
use crate::tensor::Tensor;
use crate::wavelet::WaveletFilters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `δ ← δ − lr·wd·δ` after the adaptive step.
    #[default]
    Decoupled,
    /// `g ← g + wd·δ` before the moment updates.
    Coupled,
}

/// Which terms of the objective are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loc: bool,
    pub cls: bool,
    pub lfc: bool,
    pub hfc: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        loc: true,
        cls: true,
        lfc: true,
        hfc: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub selection: SelectionConfig,
    /// Re-use the first iteration's targets instead of re-selecting each step.
    pub freeze_targets: bool,
    /// Halve the step size after this many iterations without a new best loss.
    pub plateau_patience: Option<usize>,
    /// Start from uniform noise in `[-ε, ε]` instead of zero.
    pub random_init: bool,
    pub seed: u64,
    pub postprocess: PostprocessConfig,
    pub terms: LossTerms,
    #[serde(skip, default)]
    pub filters: WaveletFilters,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            iterations: 50,
            lr: 0.03,
            weight_decay: 0.02,
            weight_decay_mode: WeightDecayMode::Decoupled,
            lambda: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            selection: SelectionConfig::default(),
            freeze_targets: false,
            plateau_patience: None,
            random_init: false,
            seed: 0,
            postprocess: PostprocessConfig::default(),
            terms: LossTerms::ALL,
            filters: WaveletFilters::haar(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must be in (0, 1], got {}", self.epsilon));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        self.selection.validate()
    }
}

/// Loss value, gradient with respect to the adversarial image, and the
/// detections it produced.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub grad: Tensor,
    pub detections: usize,
}

/// Evaluates the attack objective at `x_adv` for a fixed target set.
pub fn objective(
    detector: &Detector,
    x: &Tensor,
    x_adv: &Tensor,
    targets: &AttackTargetSet,
    cfg: &AttackConfig,
) -> Result<ObjectiveEval> {
    x.ensure_same_shape(x_adv)?;
    let cache = detector.forward_cached(x_adv)?;
    let out = &cache.output;
    let detections = postprocess(out, cfg.postprocess.score_threshold, cfg.postprocess.nms_iou).len();
    let (w, h) = (x.width as f64, x.height as f64);
    let mut d_boxes = vec![[0.0; 4]; out.len()];
    let mut d_probs = vec![0.0; out.probs.len()];
    let terms = cfg.terms;

    let reg: Vec<(usize, [f64; 4])> = targets.regression_pairs().map(|(i, b)| (i, b.to_array())).collect();
    let loc_active = terms.loc && !reg.is_empty();
    let j_loc = if loc_active {
        let norm = |b: [f64; 4]| [b[0] / w, b[1] / h, b[2] / w, b[3] / h];
        let adv: Vec<[f64; 4]> = reg.iter().map(|&(i, _)| norm(out.boxes[i].to_array())).collect();
        let tgt: Vec<[f64; 4]> = reg.iter().map(|&(_, b)| norm(b)).collect();
        let (v, g) = loc_loss(&adv, &tgt)?;
        for (&(i, _), gi) in reg.iter().zip(&g) {
            let scale = [1.0 / w, 1.0 / h, 1.0 / w, 1.0 / h];
            for j in 0..4 {
                d_boxes[i][j] += gi[j] * scale[j];
            }
        }
        v
    } else {
        0.0
    };

    let cls: Vec<(usize, usize)> = targets.classification_pairs().collect();
    let cls_active = terms.cls && !cls.is_empty();
    let j_cls = if cls_active {
        let rows: Vec<&[f64]> = cls.iter().map(|&(i, _)| out.prob_row(i)).collect();
        let labels: Vec<usize> = cls.iter().map(|&(_, l)| l).collect();
        let (v, g) = cls_loss(&rows, &labels)?;
        let k1 = out.row_len();
        for (&(i, _), gi) in cls.iter().zip(&g) {
            for (d, gv) in d_probs[i * k1..(i + 1) * k1].iter_mut().zip(gi) {
                *d += cfg.lambda * gv;
            }
        }
        v
    } else {
        0.0
    };

    let mut grad = if loc_active || cls_active {
        detector.backward_input(&cache, &d_boxes, &d_probs)
    } else {
        Tensor::zeros(x.channels, x.height, x.width)
    };

    let (j_lfc, j_hfc) = if terms.lfc || terms.hfc {
        let f = freq_loss(x, x_adv, &cfg.filters)?;
        let w_l = if terms.lfc { 1.0 } else { 0.0 };
        let w_h = if terms.hfc { 1.0 } else { 0.0 };
        grad.add_assign(&f.weighted_grad(w_l, w_h))?;
        (w_l * f.j_lfc, w_h * f.j_hfc)
    } else {
        (0.0, 0.0)
    };

    let mut breakdown = LossBreakdown::new(j_loc, j_cls, cfg.lambda, j_lfc, j_hfc)?;
    breakdown.loc_active = loc_active;
    breakdown.cls_active = cls_active;
    let breakdown = total_loss(breakdown)?;
    Ok(ObjectiveEval {
        breakdown,
        grad,
        detections,
    })
}

/// Clips every element of `delta` to `[-ε, ε]`.
pub fn project_linf(delta: &mut Tensor, epsilon: f64) {
    for v in &mut delta.data {
        *v = v.clamp(-epsilon, epsilon);
    }
}

/// Adjusts `delta` so that `x + delta` lies in `[0, 1]`.
pub fn clamp_valid(delta: &mut Tensor, x: &Tensor) {
    for (d, &xv) in delta.data.iter_mut().zip(&x.data) {
        // Clamping δ itself keeps |δ| from picking up rounding error.
        *d = d.clamp(-xv, 1.0 - xv);
    }
}

/// Adamax with optional weight decay, operating on a flat parameter vector.
#[derive(Debug, Clone)]
struct Adamax {
    m: Vec<f64>,
    u: Vec<f64>,
    t: i32,
}

impl Adamax {
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            u: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, delta: &mut [f64], grad: &[f64], lr: f64, cfg: &AttackConfig) {
        self.t += 1;
        let bias = 1.0 - cfg.beta1.powi(self.t);
        let coupled = cfg.weight_decay_mode == WeightDecayMode::Coupled;
        for i in 0..delta.len() {
            let g = if coupled {
                grad[i] + cfg.weight_decay * delta[i]
            } else {
                grad[i]
            };
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.u[i] = (cfg.beta2 * self.u[i]).max(g.abs() + Self::EPS);
            delta[i] -= lr / bias * self.m[i] / self.u[i];
            if !coupled {
                delta[i] -= lr * cfg.weight_decay * delta[i];
            }
        }
    }
}

/// One row of the per-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub regression_targets: usize,
    pub classification_targets: usize,
    /// Detections on the iterate the losses were measured on.
    pub detections: usize,
    /// L∞ norm of the perturbation after this iteration's update.
    pub linf: f64,
    pub range_ok: bool,
    pub best_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackOutcome {
    Completed,
    /// No candidate was eligible on the clean image, so only the frequency
    /// terms were optimised.
    NothingToAttack,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub scene_id: String,
    pub outcome: AttackOutcome,
    pub delta: Tensor,
    pub adversarial: Tensor,
    /// Index of the returned iterate; `iterations` means the final one.
    pub best_iteration: usize,
    /// Post-processed detections on `adversarial`.
    pub final_detections: Vec<Detection>,
    pub clean_detections: usize,
    pub trace: Vec<IterationRecord>,
    pub elapsed_secs: f64,
}

impl AttackResult {
    pub fn linf(&self) -> f64 {
        self.delta.max_abs()
    }
}

fn initial_delta(x: &Tensor, cfg: &AttackConfig, scene_id: &str) -> Tensor {
    if !cfg.random_init {
        return Tensor::zeros(x.channels, x.height, x.width);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stream = scene_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    rng.set_stream(stream);
    let noise = (0..x.len()).map(|_| rng.gen_range(-cfg.epsilon..=cfg.epsilon)).collect();
    let mut d = Tensor::from_vec(x.channels, x.height, x.width, noise).expect("shape matches");
    clamp_valid(&mut d, x);
    d
}

struct Best {
    delta: Tensor,
    iteration: usize,
    detections: usize,
    total: f64,
}

impl Best {
    fn offer(&mut self, delta: &Tensor, iteration: usize, detections: usize, total: f64) {
        if detections < self.detections || (detections == self.detections && total < self.total) {
            self.delta = delta.clone();
            self.iteration = iteration;
            self.detections = detections;
            self.total = total;
        }
    }
}

enum Update {
    Adamax,
    SignedGradient,
}

fn run(detector: &Detector, scene: &Scene, cfg: &AttackConfig, update: Update) -> Result<AttackResult> {
    cfg.validate()?;
    let x = scene.image.tensor();
    let clean = detector.forward_cached(x)?.output;
    let clean_detections =
        postprocess(&clean, cfg.postprocess.score_threshold, cfg.postprocess.nms_iou).len();
    let (first, outcome) = match build_attack_target_set(&clean, &scene.objects, &cfg.selection) {
        Ok(t) => (t, AttackOutcome::Completed),
        Err(TargetingError::NothingToAttack) => {
            log::warn!("scene {}: no eligible candidate, only the frequency terms apply", scene.id);
            (select_or_empty(&clean, &scene.objects, &cfg.selection), AttackOutcome::NothingToAttack)
        }
    };
    let started = Instant::now();

    let mut delta = initial_delta(x, cfg, &scene.id);
    let mut opt = Adamax::new(delta.len());
    let mut lr = cfg.lr;
    let mut best: Option<Best> = None;
    let mut best_total = f64::INFINITY;
    let mut since_best = 0usize;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..=cfg.iterations {
        let x_adv = x.add(&delta)?;
        let targets = if it == 0 || cfg.freeze_targets {
            first.clone()
        } else {
            let out = detector.forward_cached(&x_adv)?.output;
            select_or_empty(&out, &scene.objects, &cfg.selection)
        };
        let eval = objective(detector, x, &x_adv, &targets, cfg)?;
        let total = eval.breakdown.j_total;
        match best.as_mut() {
            Some(b) => b.offer(&delta, it, eval.detections, total),
            None => {
                best = Some(Best {
                    delta: delta.clone(),
                    iteration: it,
                    detections: eval.detections,
                    total,
                })
            }
        }
        if it == cfg.iterations {
            break;
        }
        if total < best_total {
            best_total = total;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.plateau_patience.is_some_and(|p| since_best >= p) {
                lr *= 0.5;
                since_best = 0;
            }
        }

        match update {
            Update::Adamax => opt.step(&mut delta.data, &eval.grad.data, lr, cfg),
            Update::SignedGradient => {
                for (d, g) in delta.data.iter_mut().zip(&eval.grad.data) {
                    *d -= lr * sign(*g);
                }
            }
        }
        project_linf(&mut delta, cfg.epsilon);
        clamp_valid(&mut delta, x);

        let linf = delta.max_abs();
        let range_ok = x.data.iter().zip(&delta.data).all(|(a, d)| (0.0..=1.0).contains(&(a + d)));
        trace.push(IterationRecord {
            iteration: it,
            losses: eval.breakdown,
            regression_targets: targets.regression_count(),
            classification_targets: targets.classification_count(),
            detections: eval.detections,
            linf,
            range_ok,
            best_total,
            lr,
        });
        if linf > cfg.epsilon || !range_ok {
            return Err(Error::Consistency(format!(
                "iteration {it} left the budget: linf {linf}, range ok {range_ok}"
            )));
        }
    }

    let best = best.expect("loop runs at least once");
    let adversarial = x.add(&best.delta)?;
    let final_detections = detector.detect(&adversarial, &cfg.postprocess)?;
    Ok(AttackResult {
        scene_id: scene.id.clone(),
        outcome,
        delta: best.delta,
        adversarial,
        best_iteration: best.iteration,
        final_detections,
        clean_detections,
        trace,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn select_or_empty(
    out: &DetectorOutput,
    gts: &[GroundTruthObject],
    sel: &SelectionConfig,
) -> AttackTargetSet {
    build_attack_target_set(out, gts, sel).unwrap_or_else(|_| AttackTargetSet {
        regression: vec![Vec::new(); gts.len()],
        target_boxes: vec![Vec::new(); gts.len()],
        classification: vec![Vec::new(); gts.len()],
        gt_labels: vec![Vec::new(); gts.len()],
    })
}

/// Runs the adaptive attack on one scene.
///
/// The returned perturbation is the iterate with the fewest post-processed
/// detections, ties broken by lower total loss.
pub fn attack_scene(detector: &Detector, scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult> {
    run(detector, scene, cfg, Update::Adamax)
}

/// Signed-gradient PGD on the spatial objective only, with step `cfg.lr`.
pub fn run_baseline_pgd(detector: &Detector, scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult> {
    let cfg = AttackConfig {
        terms: LossTerms {
            lfc: false,
            hfc: false,
            ..cfg.terms
        },
        ..cfg.clone()
    };
    run(detector, scene, &cfg, Update::SignedGradient)
}

pub fn attack_batch(
    detector: &Detector,
    scenes: &[Scene],
    cfg: &AttackConfig,
    parallel: bool,
) -> Vec<Result<AttackResult>> {
    par::map(scenes, parallel, |s| attack_scene(detector, s, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    Full,
    NoFa,
    NoCls,
    NoLoc,
    FaOnly,
    BaselinePgd,
}

impl AttackVariant {
    pub const ALL: [AttackVariant; 6] = [
        AttackVariant::Full,
        AttackVariant::NoFa,
        AttackVariant::NoCls,
        AttackVariant::NoLoc,
        AttackVariant::FaOnly,
        AttackVariant::BaselinePgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackVariant::Full => "full",
            AttackVariant::NoFa => "no-fa",
            AttackVariant::NoCls => "no-cls",
            AttackVariant::NoLoc => "no-loc",
            AttackVariant::FaOnly => "fa-only",
            AttackVariant::BaselinePgd => "baseline-pgd",
        }
    }

    pub fn terms(self) -> LossTerms {
        let (loc, cls, fa) = match self {
            AttackVariant::Full => (true, true, true),
            AttackVariant::NoFa | AttackVariant::BaselinePgd => (true, true, false),
            AttackVariant::NoCls => (true, false, true),
            AttackVariant::NoLoc => (false, true, true),
            AttackVariant::FaOnly => (false, false, true),
        };
        LossTerms {
            loc,
            cls,
            lfc: fa,
            hfc: fa,
        }
    }

    pub fn run(self, detector: &Detector, scene: &Scene, cfg: &AttackConfig) -> Result<AttackResult> {
        let cfg = AttackConfig {
            terms: self.terms(),
            ..cfg.clone()
        };
        match self {
            AttackVariant::BaselinePgd => run_baseline_pgd(detector, scene, &cfg),
            _ => attack_scene(detector, scene, &cfg),
        }
    }
}

impl fmt::Display for AttackVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack variant '{s}'")))
    }
}
