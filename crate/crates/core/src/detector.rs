//! A small single-stage anchor-based detector with an analytic backward pass.
//!
//! The network is a stack of 3×3 convolutions with SiLU activations followed
//! by two 1×1 heads on the final grid: box offsets relative to each anchor and
//! `K + 1` class logits with index `K` reserved for background. The forward
//! pass decodes offsets into corner boxes and logits into probabilities, so
//! the raw output is exactly what an attacker consuming detector outputs sees.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr_normal::standard_normal;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{conv_backward, conv_forward, silu, silu_grad, softmax, softmax_backward, ConvSpec};
use crate::par;
use crate::tensor::Tensor;

/// Upper bound on the magnitude of the log-scale offsets before `exp`.
const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Side of the square input image.
    pub image_size: usize,
    pub in_channels: usize,
    /// Number of object classes `K`; the background adds one more output.
    pub num_classes: usize,
    pub backbone: Vec<LayerConfig>,
    /// Anchor side lengths in pixels, one anchor per entry in every cell.
    pub anchor_sizes: Vec<f64>,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            in_channels: 3,
            num_classes: 3,
            backbone: [(8, 2), (16, 2), (32, 2), (64, 2), (64, 1)]
                .into_iter()
                .map(|(channels, stride)| LayerConfig { channels, stride })
                .collect(),
            anchor_sizes: vec![32.0],
            seed: 0,
        }
    }
}

impl DetectorConfig {
    /// A reduced model for gradient checks: `size×size` input, stride 4.
    pub fn tiny(size: usize, in_channels: usize, num_classes: usize) -> Self {
        Self {
            image_size: size,
            in_channels,
            num_classes,
            backbone: vec![
                LayerConfig { channels: 3, stride: 2 },
                LayerConfig { channels: 4, stride: 2 },
            ],
            anchor_sizes: vec![size as f64 / 2.0],
            seed: 7,
        }
    }

    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|l| l.stride).product()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.grid() * self.grid() * self.anchors_per_cell()
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() || self.anchor_sizes.is_empty() {
            return Err(Error::Config("detector needs layers and anchors".into()));
        }
        if self.backbone.iter().any(|l| l.channels == 0 || l.stride == 0) {
            return Err(Error::Config("layer channels and strides must be positive".into()));
        }
        let stride = self.stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "stride {stride} does not divide image size {}",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("class and channel counts must be positive".into()));
        }
        Ok(())
    }

    /// The fixed anchor boxes in candidate order.
    pub fn anchors(&self) -> Vec<BBox> {
        let (g, s) = (self.grid(), self.stride() as f64);
        let mut out = Vec::with_capacity(self.num_candidates());
        for gy in 0..g {
            for gx in 0..g {
                let (cx, cy) = ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s);
                for &a in &self.anchor_sizes {
                    out.push(BBox::new(cx - a / 2.0, cy - a / 2.0, cx + a / 2.0, cy + a / 2.0));
                }
            }
        }
        out
    }
}

/// Raw detector output for one image: `N` corner boxes in pixels and `N`
/// probability rows of length `K + 1` (background last).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub boxes: Vec<BBox>,
    pub probs: Vec<f64>,
    pub num_classes: usize,
}

impl DetectorOutput {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn row_len(&self) -> usize {
        self.num_classes + 1
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        let r = self.row_len();
        &self.probs[i * r..(i + 1) * r]
    }

    pub fn background(&self, i: usize) -> f64 {
        self.prob_row(i)[self.num_classes]
    }

    /// Arg-max over the object classes only (background excluded).
    pub fn object_label(&self, i: usize) -> usize {
        argmax(&self.prob_row(i)[..self.num_classes])
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps an image to raw detector output.
pub trait ObjectDetector: Sync {
    fn forward(&self, image: &Tensor) -> Result<DetectorOutput>;
    fn num_classes(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Drops background-argmax and low-score rows, then runs greedy per-class NMS.
/// The result is sorted by score, highest first.
pub fn postprocess(output: &DetectorOutput, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let k = output.num_classes;
    let mut cands: Vec<(usize, Detection)> = (0..output.len())
        .filter_map(|i| {
            let row = output.prob_row(i);
            let label = argmax(row);
            if label == k || row[label] < score_threshold {
                return None;
            }
            Some((
                i,
                Detection {
                    bbox: output.boxes[i],
                    label,
                    score: row[label],
                },
            ))
        })
        .collect();
    cands.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    let mut kept: Vec<Detection> = Vec::new();
    for (_, d) in cands {
        let suppressed = kept
            .iter()
            .any(|k| k.label == d.label && k.bbox.iou(&d.bbox) > nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Intermediate values kept by [`Detector::forward_cached`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs_hw: Vec<(usize, usize)>,
    layer_cols: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    head_cols: Vec<f64>,
    raw_boxes: Vec<f64>,
    pub output: DetectorOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    layers: Vec<ConvSpec>,
    box_head: ConvSpec,
    cls_head: ConvSpec,
    params: Vec<f64>,
}

mod rand_distr_normal {
    use rand::Rng;

    /// Box–Muller standard normal draw.
    pub fn standard_normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut offset = 0;
        let mut make = |in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize| {
            let spec = ConvSpec {
                in_channels: in_c,
                out_channels: out_c,
                kernel,
                stride,
                padding,
                weight_offset: offset,
                bias_offset: offset + out_c * in_c * kernel * kernel,
            };
            offset += spec.param_len();
            spec
        };
        let mut layers = Vec::new();
        let mut in_c = config.in_channels;
        for l in &config.backbone {
            layers.push(make(in_c, l.channels, 3, l.stride, 1));
            in_c = l.channels;
        }
        let a = config.anchors_per_cell();
        let box_head = make(in_c, 4 * a, 1, 1, 0);
        let cls_head = make(in_c, (config.num_classes + 1) * a, 1, 1, 0);
        let mut det = Self {
            config,
            layers,
            box_head,
            cls_head,
            params: vec![0.0; offset],
        };
        det.initialize();
        Ok(det)
    }

    fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        for spec in self.layers.clone() {
            let std = (2.0 / spec.patch_len() as f64).sqrt();
            for w in &mut self.params[spec.weight_offset..spec.weight_offset + spec.weight_len()] {
                *w = standard_normal(&mut rng) * std;
            }
        }
        for spec in [self.box_head, self.cls_head] {
            for w in &mut self.params[spec.weight_offset..spec.weight_offset + spec.weight_len()] {
                *w = standard_normal(&mut rng) * 0.01;
            }
        }
        // Start with background favoured so early training is not flooded by
        // confident false positives.
        let k = self.config.num_classes;
        for a in 0..self.config.anchors_per_cell() {
            self.params[self.cls_head.bias_offset + a * (k + 1) + k] = 2.0;
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.shape() != (c.in_channels, c.image_size, c.image_size) {
            return Err(Error::Shape(format!(
                "detector expects {}x{}x{}, got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let (mut h, mut w) = (x.height, x.width);
        let mut act = x.data.clone();
        let mut layer_inputs_hw = Vec::with_capacity(self.layers.len());
        let mut layer_cols = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let (z, cols) = conv_forward(&self.params, spec, &act, h, w);
            layer_inputs_hw.push((h, w));
            (h, w) = spec.output_size(h, w);
            act = z.iter().map(|&v| silu(v)).collect();
            layer_cols.push(cols);
            pre_activations.push(z);
        }
        let (box_out, head_cols) = conv_forward(&self.params, &self.box_head, &act, h, w);
        let (cls_out, _) = conv_forward(&self.params, &self.cls_head, &act, h, w);

        let cfg = &self.config;
        let k1 = cfg.num_classes + 1;
        let cells = h * w;
        let anchors = cfg.anchors();
        let n = cfg.num_candidates();
        let mut raw_boxes = vec![0.0; n * 4];
        let mut boxes = Vec::with_capacity(n);
        let mut probs = vec![0.0; n * k1];
        let mut logits = vec![0.0; k1];
        for cell in 0..cells {
            for a in 0..cfg.anchors_per_cell() {
                let idx = cell * cfg.anchors_per_cell() + a;
                let t: [f64; 4] = std::array::from_fn(|j| box_out[(a * 4 + j) * cells + cell]);
                raw_boxes[idx * 4..idx * 4 + 4].copy_from_slice(&t);
                boxes.push(decode(&anchors[idx], &t));
                for (c, l) in logits.iter_mut().enumerate() {
                    *l = cls_out[(a * k1 + c) * cells + cell];
                }
                softmax(&logits, &mut probs[idx * k1..(idx + 1) * k1]);
            }
        }
        Ok(ForwardCache {
            layer_inputs_hw,
            layer_cols,
            pre_activations,
            head_cols,
            raw_boxes,
            output: DetectorOutput {
                boxes,
                probs,
                num_classes: cfg.num_classes,
            },
        })
    }

    /// Backward pass from gradients on the decoded output (corner boxes and
    /// probabilities). Returns the gradient with respect to the input image.
    pub fn backward_input(&self, cache: &ForwardCache, d_boxes: &[[f64; 4]], d_probs: &[f64]) -> Tensor {
        let out = &cache.output;
        let k1 = out.row_len();
        let anchors = self.config.anchors();
        let mut d_raw = vec![0.0; out.len() * 4];
        let mut d_logits = vec![0.0; out.len() * k1];
        for i in 0..out.len() {
            let t = &cache.raw_boxes[i * 4..i * 4 + 4];
            let g = decode_backward(&anchors[i], t, &d_boxes[i]);
            d_raw[i * 4..i * 4 + 4].copy_from_slice(&g);
            softmax_backward(
                out.prob_row(i),
                &d_probs[i * k1..(i + 1) * k1],
                &mut d_logits[i * k1..(i + 1) * k1],
            );
        }
        self.backward_raw(cache, &d_raw, &d_logits, None, true)
            .expect("input gradient requested")
    }

    /// Backward pass from gradients on raw box offsets and class logits.
    pub fn backward_raw(
        &self,
        cache: &ForwardCache,
        d_raw_boxes: &[f64],
        d_logits: &[f64],
        mut param_grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Tensor> {
        let cfg = &self.config;
        let a_per = cfg.anchors_per_cell();
        let k1 = cfg.num_classes + 1;
        let (h, w) = self
            .layers
            .last()
            .zip(cache.layer_inputs_hw.last())
            .map(|(s, &(h, w))| s.output_size(h, w))
            .expect("at least one layer");
        let cells = h * w;
        let mut d_box_out = vec![0.0; 4 * a_per * cells];
        let mut d_cls_out = vec![0.0; k1 * a_per * cells];
        for cell in 0..cells {
            for a in 0..a_per {
                let idx = cell * a_per + a;
                for j in 0..4 {
                    d_box_out[(a * 4 + j) * cells + cell] = d_raw_boxes[idx * 4 + j];
                }
                for c in 0..k1 {
                    d_cls_out[(a * k1 + c) * cells + cell] = d_logits[idx * k1 + c];
                }
            }
        }
        let mut d_act = conv_backward(
            &self.params,
            &self.box_head,
            &cache.head_cols,
            &d_box_out,
            h,
            w,
            param_grads.as_deref_mut(),
            true,
        )
        .expect("input gradient requested");
        let d_act_cls = conv_backward(
            &self.params,
            &self.cls_head,
            &cache.head_cols,
            &d_cls_out,
            h,
            w,
            param_grads.as_deref_mut(),
            true,
        )
        .expect("input gradient requested");
        for (a, b) in d_act.iter_mut().zip(&d_act_cls) {
            *a += b;
        }
        for (li, spec) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[li];
            let d_z: Vec<f64> = d_act.iter().zip(z).map(|(g, &zv)| g * silu_grad(zv)).collect();
            let (ih, iw) = cache.layer_inputs_hw[li];
            let need_input = li > 0 || want_input;
            let d_in = conv_backward(
                &self.params,
                spec,
                &cache.layer_cols[li],
                &d_z,
                ih,
                iw,
                param_grads.as_deref_mut(),
                need_input,
            );
            {
                let d = d_in?;
                d_act = d
            }
        }
        Some(
            Tensor::from_vec(cfg.in_channels, cfg.image_size, cfg.image_size, d_act)
                .expect("input gradient has input shape"),
        )
    }

    pub fn detect(&self, image: &Tensor, pp: &PostprocessConfig) -> Result<Vec<Detection>> {
        let out = ObjectDetector::forward(self, image)?;
        Ok(postprocess(&out, pp.score_threshold, pp.nms_iou))
    }

    // ------------------------------------------------------------------
    // Checkpoints

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            params: self.params.clone(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                record: path.display().to_string(),
                reason: format!("unknown checkpoint format {:?}", ckpt.format),
            });
        }
        let mut det = Detector::new(ckpt.config)?;
        if ckpt.params.len() != det.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, architecture needs {}",
                ckpt.params.len(),
                det.params.len()
            )));
        }
        det.params = ckpt.params;
        Ok(det)
    }
}

impl ObjectDetector for Detector {
    fn forward(&self, image: &Tensor) -> Result<DetectorOutput> {
        Ok(self.forward_cached(image)?.output)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

const CHECKPOINT_FORMAT: &str = "sfa-detector/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: DetectorConfig,
    params: Vec<f64>,
}

fn decode(anchor: &BBox, t: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let s = anchor.width();
    let cx = acx + t[0] * s;
    let cy = acy + t[1] * s;
    let w = s * t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = s * t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

fn decode_backward(anchor: &BBox, t: &[f64], d: &[f64; 4]) -> [f64; 4] {
    let s = anchor.width();
    let scale_grad = |tv: f64| {
        if tv.abs() < MAX_LOG_SCALE {
            s * tv.exp()
        } else {
            0.0
        }
    };
    let d_cx = d[0] + d[2];
    let d_cy = d[1] + d[3];
    let d_w = 0.5 * (d[2] - d[0]);
    let d_h = 0.5 * (d[3] - d[1]);
    [s * d_cx, s * d_cy, scale_grad(t[2]) * d_w, scale_grad(t[3]) * d_h]
}

/// Inverse of the box decoding for a ground-truth box.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let s = anchor.width();
    [
        (gcx - acx) / s,
        (gcy - acy) / s,
        (gt.width() / s).ln(),
        (gt.height() / s).ln(),
    ]
}

// ----------------------------------------------------------------------------
// Training

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorTarget {
    Background,
    Ignore,
    Object { gt: usize, label: usize },
}

/// Matches every anchor to its highest-IoU ground truth: positive at
/// IoU ≥ 0.5, background below 0.4, ignored in between. Each ground truth
/// additionally claims its best anchor so no object is left unmatched.
pub fn assign_anchors(anchors: &[BBox], gts: &[(BBox, usize)]) -> Vec<AnchorTarget> {
    let mut targets: Vec<AnchorTarget> = anchors
        .iter()
        .map(|a| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(g, (b, _))| (g, a.iou(b)))
                .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            match best {
                Some((g, v)) if v >= POSITIVE_IOU => AnchorTarget::Object {
                    gt: g,
                    label: gts[g].1,
                },
                Some((_, v)) if v >= NEGATIVE_IOU => AnchorTarget::Ignore,
                _ => AnchorTarget::Background,
            }
        })
        .collect();
    for (g, (b, label)) in gts.iter().enumerate() {
        let mut best = None::<(usize, f64)>;
        for (i, a) in anchors.iter().enumerate() {
            let v = a.iou(b);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            targets[i] = AnchorTarget::Object { gt: g, label: *label };
        }
    }
    targets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips of training scenes.
    pub flip: bool,
    /// Smooth-L1 transition point on encoded box offsets.
    pub box_beta: f64,
    pub parallel: bool,
    pub postprocess: PostprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            flip: true,
            box_beta: 1.0 / 9.0,
            parallel: true,
            postprocess: PostprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub positives: usize,
    pub val_map50: Option<f64>,
}

struct SampleGrad {
    box_loss: f64,
    cls_loss: f64,
    grads: Vec<f64>,
}

fn flip_scene(image: &Tensor, gts: &[(BBox, usize)]) -> (Tensor, Vec<(BBox, usize)>) {
    let w = image.width as f64;
    let flipped = Tensor::from_fn(image.channels, image.height, image.width, |c, y, x| {
        image.get(c, y, image.width - 1 - x)
    });
    let boxes = gts
        .iter()
        .map(|(b, l)| (BBox::new(w - b.x2, b.y1, w - b.x1, b.y2), *l))
        .collect();
    (flipped, boxes)
}

impl Detector {
    fn sample_gradient(
        &self,
        image: &Tensor,
        targets: &[AnchorTarget],
        gts: &[(BBox, usize)],
        norm: f64,
        box_beta: f64,
    ) -> Result<SampleGrad> {
        let cache = self.forward_cached(image)?;
        let out = &cache.output;
        let k1 = out.row_len();
        let anchors = self.config.anchors();
        let mut d_raw = vec![0.0; out.len() * 4];
        let mut d_logits = vec![0.0; out.len() * k1];
        let (mut box_loss, mut cls_loss) = (0.0, 0.0);
        for (i, target) in targets.iter().enumerate() {
            let cls = match *target {
                AnchorTarget::Ignore => continue,
                AnchorTarget::Background => self.config.num_classes,
                AnchorTarget::Object { gt, label } => {
                    let want = encode(&anchors[i], &gts[gt].0);
                    for j in 0..4 {
                        let d = cache.raw_boxes[i * 4 + j] - want[j];
                        let (l, g) = if d.abs() < box_beta {
                            (0.5 * d * d / box_beta, d / box_beta)
                        } else {
                            (d.abs() - 0.5 * box_beta, d.signum())
                        };
                        box_loss += l / norm;
                        d_raw[i * 4 + j] = g / norm;
                    }
                    label
                }
            };
            let row = out.prob_row(i);
            cls_loss -= row[cls].max(1e-300).ln() / norm;
            for c in 0..k1 {
                let onehot = if c == cls { 1.0 } else { 0.0 };
                d_logits[i * k1 + c] = (row[c] - onehot) / norm;
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        self.backward_raw(&cache, &d_raw, &d_logits, Some(&mut grads), false);
        Ok(SampleGrad {
            box_loss,
            cls_loss,
            grads,
        })
    }

    /// Mini-batch Adam training with cosine learning-rate decay.
    ///
    /// When `validation` is non-empty its mAP50 is recorded after each epoch.
    pub fn train(
        &mut self,
        scenes: &[Scene],
        validation: &[Scene],
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochStats>> {
        if scenes.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        let anchors = self.config.anchors();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(self.params.len());
        let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
        let total_steps = (steps_per_epoch * cfg.epochs).max(1);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..scenes.len()).collect();

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut box_sum, mut cls_sum, mut pos_total) = (0.0, 0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let samples: Vec<(Tensor, Vec<(BBox, usize)>)> = batch
                    .iter()
                    .map(|&i| {
                        let s = &scenes[i];
                        let gts: Vec<(BBox, usize)> =
                            s.objects.iter().map(|o| (o.bbox, o.label)).collect();
                        if cfg.flip && rng.gen_bool(0.5) {
                            flip_scene(s.image.tensor(), &gts)
                        } else {
                            (s.image.tensor().clone(), gts)
                        }
                    })
                    .collect();
                let assignments: Vec<Vec<AnchorTarget>> = samples
                    .iter()
                    .map(|(_, gts)| assign_anchors(&anchors, gts))
                    .collect();
                let positives: usize = assignments
                    .iter()
                    .flatten()
                    .filter(|t| matches!(t, AnchorTarget::Object { .. }))
                    .count();
                pos_total += positives;
                let norm = positives.max(1) as f64;
                let jobs: Vec<usize> = (0..samples.len()).collect();
                let results = par::map(&jobs, cfg.parallel, |&j| {
                    self.sample_gradient(&samples[j].0, &assignments[j], &samples[j].1, norm, cfg.box_beta)
                });
                let mut grads = vec![0.0; self.params.len()];
                for r in results {
                    let r = r?;
                    box_sum += r.box_loss;
                    cls_sum += r.cls_loss;
                    for (g, v) in grads.iter_mut().zip(&r.grads) {
                        *g += v;
                    }
                }
                let progress = adam.t as f64 / total_steps as f64;
                let lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
                adam.step(&mut self.params, &grads, lr);
            }
            if pos_total == 0 {
                warn!("epoch {epoch}: no positive anchors");
            }
            let val_map50 = if validation.is_empty() {
                None
            } else {
                Some(eval::detector_map(self, validation, &cfg.postprocess, 0.5, cfg.parallel)?)
            };
            let stats = EpochStats {
                epoch,
                loss: (box_sum + cls_sum) / steps_per_epoch as f64,
                box_loss: box_sum / steps_per_epoch as f64,
                cls_loss: cls_sum / steps_per_epoch as f64,
                positives: pos_total,
                val_map50,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} (box {:.4}, cls {:.4}) val mAP50 {:?}",
                stats.loss,
                stats.box_loss,
                stats.cls_loss,
                stats.val_map50
            );
            history.push(stats);
        }
        Ok(history)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(c: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, size, size, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn default_geometry() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.stride(), 16);
        assert_eq!(cfg.num_candidates(), 64);
        assert_eq!(cfg.backbone.len(), 5);
    }

    #[test]
    fn stride_must_divide_image_size() {
        let cfg = DetectorConfig {
            image_size: 120,
            ..Default::default()
        };
        assert!(matches!(Detector::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn probability_rows_are_normalised() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        let out = det.forward(&random_image(3, 128, 1)).unwrap();
        assert_eq!(out.len(), 64);
        for i in 0..out.len() {
            let row = out.prob_row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        let zero = Tensor::zeros(3, 128, 128);
        assert_eq!(det.forward(&zero).unwrap(), det.forward(&zero).unwrap());
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        assert!(matches!(det.forward(&Tensor::zeros(3, 64, 64)), Err(Error::Shape(_))));
    }

    #[test]
    fn background_gradient_matches_finite_differences() {
        let det = Detector::new(DetectorConfig::tiny(8, 1, 2)).unwrap();
        let x = random_image(1, 8, 3);
        let k = 2;
        let objective = |t: &Tensor| -> f64 {
            let out = det.forward(t).unwrap();
            (0..out.len()).map(|i| out.background(i)).sum()
        };
        let cache = det.forward_cached(&x).unwrap();
        let n = cache.output.len();
        let d_boxes = vec![[0.0; 4]; n];
        let mut d_probs = vec![0.0; n * (k + 1)];
        for i in 0..n {
            d_probs[i * (k + 1) + k] = 1.0;
        }
        let g = det.backward_input(&cache, &d_boxes, &d_probs);
        let scale = g.max_abs();
        for i in 0..x.len() {
            let mut a = x.clone();
            a.data[i] += 1e-3;
            let mut b = x.clone();
            b.data[i] -= 1e-3;
            let fd = (objective(&a) - objective(&b)) / 2e-3;
            let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-3 * scale);
            assert!(rel < 1e-4, "pixel {i}: fd {fd} analytic {}", g.data[i]);
        }
    }

    #[test]
    fn box_gradient_matches_finite_differences() {
        let det = Detector::new(DetectorConfig::tiny(8, 3, 2)).unwrap();
        let x = random_image(3, 8, 4);
        let weights: Vec<[f64; 4]> = (0..4)
            .map(|i| std::array::from_fn(|j| ((i * 4 + j) as f64 * 0.7).sin()))
            .collect();
        let objective = |t: &Tensor| -> f64 {
            let out = det.forward(t).unwrap();
            out.boxes
                .iter()
                .zip(&weights)
                .map(|(b, w)| b.to_array().iter().zip(w).map(|(a, c)| a * c).sum::<f64>())
                .sum()
        };
        let cache = det.forward_cached(&x).unwrap();
        let g = det.backward_input(&cache, &weights, &[0.0; 4 * 3]);
        let scale = g.max_abs();
        for i in 0..x.len() {
            let mut a = x.clone();
            a.data[i] += 1e-3;
            let mut b = x.clone();
            b.data[i] -= 1e-3;
            let fd = (objective(&a) - objective(&b)) / 2e-3;
            let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-3 * scale);
            assert!(rel < 1e-4, "pixel {i}: fd {fd} analytic {}", g.data[i]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let det = Detector::new(DetectorConfig::tiny(8, 1, 2)).unwrap();
        let x = random_image(1, 8, 5);
        let gts = vec![(BBox::new(1.0, 1.0, 5.0, 6.0), 1)];
        let targets = assign_anchors(&det.config().anchors(), &gts);
        let loss = |d: &Detector| -> f64 {
            let s = d.sample_gradient(&x, &targets, &gts, 1.0, 1.0 / 9.0).unwrap();
            s.box_loss + s.cls_loss
        };
        let analytic = det.sample_gradient(&x, &targets, &gts, 1.0, 1.0 / 9.0).unwrap().grads;
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in (0..det.num_params()).step_by(3) {
            let mut a = det.clone();
            a.params[i] += 1e-5;
            let mut b = det.clone();
            b.params[i] -= 1e-5;
            let fd = (loss(&a) - loss(&b)) / 2e-5;
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3 * scale);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn encode_inverts_decode() {
        let anchor = BBox::new(8.0, 8.0, 40.0, 40.0);
        let gt = BBox::new(12.0, 5.0, 30.0, 44.0);
        let back = decode(&anchor, &encode(&anchor, &gt));
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_assignment_thresholds() {
        let anchors = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(20.0, 0.0, 30.0, 10.0),
            BBox::new(40.0, 0.0, 50.0, 10.0),
        ];
        let gts = vec![
            (BBox::new(0.0, 0.0, 10.0, 10.0), 2),
            // IoU 0.45 with the second anchor: ignore band, but it is this
            // object's best anchor so it is claimed anyway.
            (BBox::new(20.0, 0.0, 24.5, 10.0), 1),
        ];
        let t = assign_anchors(&anchors, &gts);
        assert_eq!(t[0], AnchorTarget::Object { gt: 0, label: 2 });
        assert_eq!(t[1], AnchorTarget::Object { gt: 1, label: 1 });
        assert_eq!(t[2], AnchorTarget::Background);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let scenes = crate::dataset::generate_dataset(&crate::dataset::DatasetConfig {
            n_scenes: 2,
            ..Default::default()
        })
        .unwrap();
        let mut det = Detector::new(DetectorConfig::default()).unwrap();
        let before = det.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let hist = det.train(&scenes, &[], &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(det, before);
        assert!(det.train(&[], &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let det = Detector::new(DetectorConfig::tiny(16, 3, 3)).unwrap();
        let p = dir.path().join("ckpt.json");
        det.save(&p).unwrap();
        assert_eq!(Detector::load(&p).unwrap(), det);
    }

    fn output_with(boxes: Vec<BBox>, rows: Vec<Vec<f64>>) -> DetectorOutput {
        let k = rows[0].len() - 1;
        DetectorOutput {
            boxes,
            probs: rows.into_iter().flatten().collect(),
            num_classes: k,
        }
    }

    #[test]
    fn postprocess_empty_after_threshold() {
        let out = output_with(
            vec![BBox::new(0.0, 0.0, 5.0, 5.0)],
            vec![vec![0.1, 0.05, 0.85]],
        );
        assert!(postprocess(&out, 0.5, 0.5).is_empty());
    }

    #[test]
    fn postprocess_suppresses_exact_duplicate() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let out = output_with(vec![b, b], vec![vec![0.8, 0.1, 0.1], vec![0.9, 0.05, 0.05]]);
        let d = postprocess(&out, 0.05, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].score, 0.9);
    }

    /// Brute force: a detection survives iff no higher-ranked surviving
    /// detection of the same class overlaps it above the threshold; evaluated
    /// by recursion over the rank order from scratch for every candidate.
    fn nms_oracle(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
        fn survives(i: usize, dets: &[Detection], thr: f64) -> bool {
            (0..i).all(|j| {
                !(dets[j].label == dets[i].label
                    && dets[j].bbox.iou(&dets[i].bbox) > thr
                    && survives(j, dets, thr))
            })
        }
        let mut sorted = dets.to_vec();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        (0..sorted.len())
            .filter(|&i| survives(i, &sorted, iou_thr))
            .map(|i| sorted[i])
            .collect()
    }

    #[test]
    fn postprocess_matches_greedy_nms_oracle() {
        // Pairwise IoUs: (a,b) = 0.6, (a,c) = 0.2, (b,c) = 0.1
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 6.0, 10.0);
        let c = BBox::new(4.0, 5.0, 9.0, 15.0);
        assert!((a.iou(&b) - 0.6).abs() < 1e-12);
        assert!((a.iou(&c) - 0.2).abs() < 1e-12);
        assert!((b.iou(&c) - 0.1).abs() < 1e-12);
        let rows = vec![vec![0.7, 0.3], vec![0.9, 0.1], vec![0.8, 0.2]];
        let out = output_with(vec![a, b, c], rows);
        let got = postprocess(&out, 0.05, 0.5);
        let all: Vec<Detection> = (0..3)
            .map(|i| Detection {
                bbox: out.boxes[i],
                label: 0,
                score: out.prob_row(i)[0],
            })
            .collect();
        assert_eq!(got, nms_oracle(&all, 0.5));
        assert_eq!(got.len(), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let n = rng.gen_range(1..8);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..20.0);
                    let y = rng.gen_range(0.0..20.0);
                    Detection {
                        bbox: BBox::new(x, y, x + rng.gen_range(2.0..10.0), y + rng.gen_range(2.0..10.0)),
                        label: rng.gen_range(0..2),
                        score: rng.gen_range(0.34..1.0),
                    }
                })
                .collect();
            let mut probs = Vec::new();
            for d in &dets {
                let mut row = vec![0.0; 3];
                row[d.label] = d.score;
                let rest = 1.0 - d.score;
                row[1 - d.label] = rest * 0.5;
                row[2] = rest * 0.5;
                probs.extend(row);
            }
            let out = DetectorOutput {
                boxes: dets.iter().map(|d| d.bbox).collect(),
                probs,
                num_classes: 2,
            };
            assert_eq!(postprocess(&out, 0.05, 0.5), nms_oracle(&dets, 0.5));
        }
    }
}
