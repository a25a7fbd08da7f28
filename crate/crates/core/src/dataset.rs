//! Synthetic multi-object shapes scenes and their annotation files.
//!
//! Every class is one geometric shape drawn in a random saturated colour over
//! a textured background. Objects never overlap, so each box is the exact
//! extent of the visible shape.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::io::{load_png, quantize, save_png, BitDepth};
use crate::par;
use crate::tensor::{Image, Tensor};

pub const MAX_CLASSES: usize = 10;
pub const MIN_OBJECT_AREA: f64 = 64.0;

/// Shape drawn for each class index.
pub const SHAPE_NAMES: [&str; MAX_CLASSES] = [
    "circle", "square", "triangle", "diamond", "cross", "ring", "hexagon", "star", "ellipse",
    "frame",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Image,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub image_size: usize,
    pub k_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Grid stride of the detector the data is meant for.
    pub stride: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 500,
            image_size: 128,
            k_classes: 3,
            objects_min: 1,
            objects_max: 4,
            stride: 16,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.k_classes) {
            return Err(Error::Config(format!(
                "class count must be in [2, {MAX_CLASSES}], got {}",
                self.k_classes
            )));
        }
        if self.stride == 0 || self.image_size < Image::MIN_SIDE || !self.image_size.is_multiple_of(self.stride)
        {
            return Err(Error::Config(format!(
                "image size {} must be >= {} and a multiple of stride {}",
                self.image_size,
                Image::MIN_SIDE,
                self.stride
            )));
        }
        if self.objects_min == 0 || self.objects_max < self.objects_min {
            return Err(Error::Config(format!(
                "invalid objects-per-scene range {}..{}",
                self.objects_min, self.objects_max
            )));
        }
        let cells = (self.image_size / self.stride).pow(2);
        if self.objects_max > cells {
            return Err(Error::Config(format!(
                "{} objects cannot fit a {}-cell grid",
                self.objects_max, cells
            )));
        }
        Ok(())
    }
}

/// Generates `n_scenes` scenes. Scene `i` depends only on `(seed, i)`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let indices: Vec<usize> = (0..cfg.n_scenes).collect();
    par::map(&indices, true, |&i| generate_scene(cfg, i)).into_iter().collect()
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn generate_scene(cfg: &DatasetConfig, index: usize) -> Result<Scene> {
    let mut rng = scene_rng(cfg.seed, index);
    let size = cfg.image_size;
    let mut canvas = background(&mut rng, size);

    let n_objects = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    // Labels cycle through classes from a random start, which keeps the class
    // histogram close to uniform over any reasonably large split.
    let first_label = rng.gen_range(0..cfg.k_classes);
    let min_side = ((size as f64) * 0.16).round().max(9.0) as usize;
    let max_side = ((size as f64) * 0.31).round().max(min_side as f64 + 1.0) as usize;

    let mut objects = Vec::with_capacity(n_objects);
    let mut used_cells = HashSet::new();
    for j in 0..n_objects {
        let label = (first_label + j) % cfg.k_classes;
        let mut placed = None;
        for attempt in 0..400 {
            let side = if attempt < 300 {
                rng.gen_range(min_side..=max_side)
            } else {
                min_side
            };
            let x0 = rng.gen_range(1..size - side - 1);
            let y0 = rng.gen_range(1..size - side - 1);
            let Some(mask_box) = shape_extent(label, x0, y0, side) else {
                continue;
            };
            if mask_box.area() < MIN_OBJECT_AREA {
                continue;
            }
            let (cx, cy) = mask_box.center();
            let cell = (cy as usize / cfg.stride, cx as usize / cfg.stride);
            let padded = BBox::new(
                mask_box.x1 - 2.0,
                mask_box.y1 - 2.0,
                mask_box.x2 + 2.0,
                mask_box.y2 + 2.0,
            );
            let clear = objects
                .iter()
                .all(|o: &GroundTruthObject| o.bbox.intersection(&padded) == 0.0);
            if clear && !used_cells.contains(&cell) {
                used_cells.insert(cell);
                placed = Some((x0, y0, side));
                break;
            }
        }
        let Some((x0, y0, side)) = placed else {
            if j < cfg.objects_min {
                return Err(Error::Config(format!(
                    "could not place {} objects in a {size}px scene",
                    cfg.objects_min
                )));
            }
            break;
        };
        let color = object_color(&mut rng);
        let bbox = draw_shape(&mut canvas, &mut rng, label, x0, y0, side, color);
        objects.push(GroundTruthObject { bbox, label });
    }

    let image = Image::new(quantize(&canvas, BitDepth::Eight))?;
    Ok(Scene {
        id: format!("s{}-{index:05}", cfg.seed),
        image,
        objects,
    })
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.4..0.7));
    let grad: [f64; 2] = [rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12)];
    // A few oriented sinusoids make a texture with structure at several scales.
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..4)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.08..0.7);
            (
                theta.cos() * freq,
                theta.sin() * freq,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
                rng.gen_range(0..3),
            )
        })
        .collect();
    let n = size as f64;
    let mut t = Tensor::from_fn(3, size, size, |c, y, x| {
        let (fx, fy) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
        let mut v = base[c] + grad[0] * fx + grad[1] * fy;
        for &(kx, ky, phase, amp, chan) in &waves {
            let s = (kx * x as f64 + ky * y as f64 + phase).sin() * amp;
            v += if chan == c { s } else { 0.5 * s };
        }
        v
    });
    for v in &mut t.data {
        *v = (*v + rng.gen_range(-0.07..0.07)).clamp(0.0, 1.0);
    }
    t
}

fn object_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue: f64 = rng.gen_range(0.0..6.0);
    let bright = rng.gen_bool(0.5);
    let (hi, lo) = if bright { (0.95, 0.25) } else { (0.3, 0.02) };
    let f = hue - hue.floor();
    let mid_up = lo + (hi - lo) * f;
    let mid_down = hi - (hi - lo) * f;
    match hue as usize {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    }
}

/// Shape membership for normalised coordinates `u, v ∈ [−1, 1]`.
fn inside(label: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match label {
        0 => r <= 1.0,
        1 => u.abs() <= 1.0 && v.abs() <= 1.0,
        2 => v <= 1.0 && u.abs() <= (v + 1.0) * 0.5,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.34 || v.abs() <= 0.34) && u.abs() <= 1.0 && v.abs() <= 1.0,
        5 => (0.55..=1.0).contains(&r),
        6 => {
            let s3 = 3f64.sqrt();
            v.abs() <= s3 / 2.0 && s3 * u.abs() + v.abs() <= s3
        }
        7 => {
            let theta = v.atan2(u) + std::f64::consts::FRAC_PI_2;
            r <= 0.55 + 0.45 * (5.0 * theta).cos()
        }
        8 => u * u + (v / 0.55).powi(2) <= 1.0,
        _ => u.abs().max(v.abs()) <= 1.0 && u.abs().max(v.abs()) >= 0.6,
    }
}

fn covers(label: usize, x0: usize, y0: usize, side: usize, px: usize, py: usize) -> bool {
    let half = side as f64 / 2.0;
    let u = (px as f64 + 0.5 - x0 as f64 - half) / half;
    let v = (py as f64 + 0.5 - y0 as f64 - half) / half;
    inside(label, u, v)
}

fn shape_extent(label: usize, x0: usize, y0: usize, side: usize) -> Option<BBox> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for py in y0..y0 + side {
        for px in x0..x0 + side {
            if covers(label, x0, y0, side, px, py) {
                ext = Some(match ext {
                    None => (px, py, px, py),
                    Some((a, b, c, d)) => (a.min(px), b.min(py), c.max(px), d.max(py)),
                });
            }
        }
    }
    ext.map(|(a, b, c, d)| BBox::new(a as f64, b as f64, (c + 1) as f64, (d + 1) as f64))
}

fn draw_shape(
    canvas: &mut Tensor,
    rng: &mut ChaCha8Rng,
    label: usize,
    x0: usize,
    y0: usize,
    side: usize,
    color: [f64; 3],
) -> BBox {
    for py in y0..y0 + side {
        for px in x0..x0 + side {
            if covers(label, x0, y0, side, px, py) {
                let jitter = rng.gen_range(-0.03..0.03);
                for (c, &col) in color.iter().enumerate() {
                    canvas.set(c, py, px, (col + jitter).clamp(0.0, 1.0));
                }
            }
        }
    }
    shape_extent(label, x0, y0, side).expect("placement checked the extent")
}

/// Per-class object counts.
pub fn class_histogram(scenes: &[Scene], k_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; k_classes];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        if o.label < k_classes {
            counts[o.label] += 1;
        }
    }
    counts
}

// ----------------------------------------------------------------------------
// Annotation files

pub const ANNOTATION_FORMAT: &str = "sfa-annotations/1";

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    format: String,
    num_classes: usize,
    scenes: Vec<SceneRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    image: String,
    width: usize,
    height: usize,
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: usize,
}

/// A split as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub num_classes: usize,
    pub scenes: Vec<Scene>,
}

pub fn image_file_name(id: &str) -> String {
    format!("images/{id}.png")
}

/// Writes the annotation JSON to `path` and each scene image as an 8-bit PNG
/// under `images/` next to it.
pub fn write_annotations(scenes: &[Scene], num_classes: usize, path: &Path) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records = scenes
        .iter()
        .map(|s| SceneRecord {
            id: s.id.clone(),
            image: image_file_name(&s.id),
            width: s.image.width(),
            height: s.image.height(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    bbox: o.bbox.to_array(),
                    label: o.label,
                })
                .collect(),
        })
        .collect::<Vec<_>>();
    par::map(scenes, true, |s| {
        save_png(s.image.tensor(), &dir.join(image_file_name(&s.id)), BitDepth::Eight)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let file = AnnotationFile {
        format: ANNOTATION_FORMAT.to_string(),
        num_classes,
        scenes: records,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn validate_record(rec: &SceneRecord, num_classes: usize) -> Result<()> {
    let fail = |reason: String| Error::Parse {
        record: rec.id.clone(),
        reason,
    };
    if rec.objects.is_empty() {
        return Err(fail("scene has no objects".into()));
    }
    for (i, o) in rec.objects.iter().enumerate() {
        let b = BBox::from_array(o.bbox);
        if !b.is_ordered() {
            return Err(fail(format!("object {i}: box {:?} is not corner-ordered", o.bbox)));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > rec.width as f64 || b.y2 > rec.height as f64 {
            return Err(fail(format!(
                "object {i}: box {:?} leaves the {}x{} image",
                o.bbox, rec.width, rec.height
            )));
        }
        if o.label >= num_classes {
            return Err(fail(format!(
                "object {i}: label {} >= class count {num_classes}",
                o.label
            )));
        }
    }
    Ok(())
}

/// Reads an annotation file and the images it references.
pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != ANNOTATION_FORMAT {
        return Err(Error::Parse {
            record: path.display().to_string(),
            reason: format!("unknown format tag {:?}", file.format),
        });
    }
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for rec in &file.scenes {
        validate_record(rec, file.num_classes)?;
    }
    let scenes = par::map(&file.scenes, true, |rec| -> Result<Scene> {
        let image = load_png(&dir.join(&rec.image))?;
        if image.width() != rec.width || image.height() != rec.height {
            return Err(Error::Parse {
                record: rec.id.clone(),
                reason: format!(
                    "image is {}x{}, record says {}x{}",
                    image.width(),
                    image.height(),
                    rec.width,
                    rec.height
                ),
            });
        }
        Ok(Scene {
            id: rec.id.clone(),
            image,
            objects: rec
                .objects
                .iter()
                .map(|o| GroundTruthObject {
                    bbox: BBox::from_array(o.bbox),
                    label: o.label,
                })
                .collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Annotations {
        num_classes: file.num_classes,
        scenes,
    })
}
