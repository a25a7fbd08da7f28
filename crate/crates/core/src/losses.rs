//! Attack objectives and their gradients.
//!
//! `total = sa + fa`, `sa = loc + λ·cls`, `fa = lfc − hfc`. Every function
//! returns the loss value together with its gradient with respect to the
//! quantity the attack differentiates through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{reconstruct_band, reconstruct_band_vjp, Band, WaveletFilters};

pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const PROB_FLOOR: f64 = 1e-12;
const CONSISTENCY_TOL: f64 = 1e-6;

#[inline]
fn huber(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Mean Smooth-L1 distance and its gradient with respect to `a`.
pub fn smooth_l1_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "smooth_l1 operands differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (l, g) = huber(x - y, SMOOTH_L1_BETA);
            total += l;
            g / n
        })
        .collect();
    Ok((total / n, grad))
}

pub fn smooth_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    smooth_l1_grad(a, b).map(|(v, _)| v)
}

/// Box-location loss over the selected regression targets.
///
/// Boxes are in normalised `[0, 1]` image coordinates. The result is the mean
/// over targets of the per-box Smooth-L1 distance to its target box.
pub fn loc_loss(adv_boxes: &[[f64; 4]], target_boxes: &[[f64; 4]]) -> Result<(f64, Vec<[f64; 4]>)> {
    if adv_boxes.is_empty() {
        return Err(Error::Consistency("loc_loss needs at least one target".into()));
    }
    if adv_boxes.len() != target_boxes.len() {
        return Err(Error::Shape("one target box per selected box".into()));
    }
    let n = adv_boxes.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(adv_boxes.len());
    for (a, t) in adv_boxes.iter().zip(target_boxes) {
        let (l, g) = smooth_l1_grad(a, t)?;
        total += l / n;
        grads.push([g[0] / n, g[1] / n, g[2] / n, g[3] / n]);
    }
    Ok((total, grads))
}

/// Foreground/background separation loss:
/// `mean log p_gt − mean log p_background` over the selected rows.
///
/// Each row is a full probability vector with the background last. Returns
/// the gradient with respect to each row.
pub fn cls_loss(rows: &[&[f64]], gt_labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if rows.is_empty() {
        return Err(Error::Consistency("cls_loss needs at least one target".into()));
    }
    if rows.len() != gt_labels.len() {
        return Err(Error::Shape("one label per selected row".into()));
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rows.len());
    for (row, &label) in rows.iter().zip(gt_labels) {
        let bg = row.len() - 1;
        if label >= bg {
            return Err(Error::Range(format!("label {label} is not an object class")));
        }
        let mut g = vec![0.0; row.len()];
        let p_gt = row[label];
        let p_bg = row[bg];
        total += (p_gt.clamp(PROB_FLOOR, 1.0).ln() - p_bg.clamp(PROB_FLOOR, 1.0).ln()) / n;
        if p_gt > PROB_FLOOR {
            g[label] += 1.0 / (p_gt * n);
        }
        if p_bg > PROB_FLOOR {
            g[bg] -= 1.0 / (p_bg * n);
        }
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn spatial_loss(j_loc: f64, j_cls: f64, lambda: f64) -> f64 {
    j_loc + lambda * j_cls
}

/// Frequency interference terms and the gradient of `lfc − hfc` with respect
/// to the adversarial image. The clean image is treated as a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqLoss {
    pub j_lfc: f64,
    pub j_hfc: f64,
    pub j_fa: f64,
    pub grad_lfc: Tensor,
    pub grad_hfc: Tensor,
}

impl FreqLoss {
    /// Gradient of `w_lfc·lfc − w_hfc·hfc`.
    pub fn weighted_grad(&self, w_lfc: f64, w_hfc: f64) -> Tensor {
        let mut g = self.grad_lfc.scale(w_lfc);
        for (a, b) in g.data.iter_mut().zip(&self.grad_hfc.data) {
            *a -= w_hfc * b;
        }
        g
    }
}

fn band_term(x: &Tensor, x_adv: &Tensor, filters: &WaveletFilters, band: Band) -> Result<(f64, Tensor)> {
    let clean = reconstruct_band(x, filters, band)?;
    let adv = reconstruct_band(x_adv, filters, band)?;
    let (v, g) = smooth_l1_grad(&adv.data, &clean.data)?;
    let g = Tensor::from_vec(adv.channels, adv.height, adv.width, g)?;
    Ok((v, reconstruct_band_vjp(&g, filters, band)?))
}

pub fn freq_loss(x: &Tensor, x_adv: &Tensor, filters: &WaveletFilters) -> Result<FreqLoss> {
    x.ensure_same_shape(x_adv)?;
    let (j_lfc, grad_lfc) = band_term(x, x_adv, filters, Band::Ll)?;
    let (j_hfc, grad_hfc) = band_term(x, x_adv, filters, Band::Hh)?;
    Ok(FreqLoss {
        j_lfc,
        j_hfc,
        j_fa: j_lfc - j_hfc,
        grad_lfc,
        grad_hfc,
    })
}

/// All loss terms of one attack iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_loc: f64,
    pub j_cls: f64,
    pub j_sa: f64,
    pub j_lfc: f64,
    pub j_hfc: f64,
    pub j_fa: f64,
    pub j_total: f64,
    pub lambda: f64,
    /// False when the regression track selected nothing and `j_loc` is 0.
    pub loc_active: bool,
    /// False when the classification track selected nothing and `j_cls` is 0.
    pub cls_active: bool,
}

impl LossBreakdown {
    pub fn new(j_loc: f64, j_cls: f64, lambda: f64, j_lfc: f64, j_hfc: f64) -> Result<Self> {
        let j_sa = spatial_loss(j_loc, j_cls, lambda);
        let j_fa = j_lfc - j_hfc;
        total_loss(LossBreakdown {
            j_loc,
            j_cls,
            j_sa,
            j_lfc,
            j_hfc,
            j_fa,
            j_total: f64::NAN,
            lambda,
            loc_active: true,
            cls_active: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.j_loc,
            self.j_cls,
            self.j_sa,
            self.j_lfc,
            self.j_hfc,
            self.j_fa,
            self.j_total,
            self.lambda,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!("non-finite loss term in {self:?}")));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= CONSISTENCY_TOL * (1.0 + a.abs().max(b.abs()));
        if !close(self.j_sa, self.j_loc + self.lambda * self.j_cls) {
            return Err(Error::Consistency(format!(
                "j_sa {} != j_loc + lambda*j_cls {}",
                self.j_sa,
                self.j_loc + self.lambda * self.j_cls
            )));
        }
        if !close(self.j_fa, self.j_lfc - self.j_hfc) {
            return Err(Error::Consistency(format!(
                "j_fa {} != j_lfc - j_hfc {}",
                self.j_fa,
                self.j_lfc - self.j_hfc
            )));
        }
        if !close(self.j_total, self.j_sa + self.j_fa) {
            return Err(Error::Consistency(format!(
                "j_total {} != j_sa + j_fa {}",
                self.j_total,
                self.j_sa + self.j_fa
            )));
        }
        Ok(())
    }
}

/// Fills in `j_total = j_sa + j_fa` and checks every invariant.
pub fn total_loss(mut parts: LossBreakdown) -> Result<LossBreakdown> {
    parts.j_total = parts.j_sa + parts.j_fa;
    parts.validate()?;
    Ok(parts)
}
