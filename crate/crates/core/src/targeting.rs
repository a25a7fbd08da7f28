//! Dual-track attack target selection.
//!
//! For each ground-truth object the regression track takes the `k` candidates
//! with the highest IoU to it; the classification track does the same but only
//! among candidates whose predicted object label equals the ground-truth label.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset::GroundTruthObject;
use crate::detector::DetectorOutput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub iou_floor: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 3,
            iou_floor: 0.05,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), crate::Error> {
        if self.k == 0 || !(0.0..1.0).contains(&self.iou_floor) {
            return Err(crate::Error::Config(format!(
                "selection needs k >= 1 and iou_floor in [0, 1), got k={} floor={}",
                self.k, self.iou_floor
            )));
        }
        Ok(())
    }
}

/// Indices selected per ground-truth object on each track.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackTargetSet {
    pub regression: Vec<Vec<usize>>,
    /// Attacker-chosen box for each regression index, parallel to `regression`.
    pub target_boxes: Vec<Vec<BBox>>,
    pub classification: Vec<Vec<usize>>,
    /// Ground-truth label for each classification index.
    pub gt_labels: Vec<Vec<usize>>,
}

impl AttackTargetSet {
    pub fn regression_count(&self) -> usize {
        self.regression.iter().map(Vec::len).sum()
    }

    pub fn classification_count(&self) -> usize {
        self.classification.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.regression_count() == 0 && self.classification_count() == 0
    }

    /// Flattened `(candidate, target box)` pairs of the regression track.
    pub fn regression_pairs(&self) -> impl Iterator<Item = (usize, BBox)> + '_ {
        self.regression
            .iter()
            .zip(&self.target_boxes)
            .flat_map(|(idx, tb)| idx.iter().copied().zip(tb.iter().copied()))
    }

    /// Flattened `(candidate, label)` pairs of the classification track.
    pub fn classification_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.classification
            .iter()
            .zip(&self.gt_labels)
            .flat_map(|(idx, l)| idx.iter().copied().zip(l.iter().copied()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetingError {
    #[error("no candidate is eligible on either track")]
    NothingToAttack,
}

fn top_k_by_iou(
    output: &DetectorOutput,
    gt: &GroundTruthObject,
    cfg: &SelectionConfig,
    eligible: impl Fn(usize) -> bool,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = (0..output.len())
        .filter(|&i| eligible(i))
        .map(|i| (i, output.boxes[i].iou(&gt.bbox)))
        .filter(|&(_, v)| v >= cfg.iou_floor)
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.k);
    scored.into_iter().map(|(i, _)| i).collect()
}

pub fn select_regression_targets(
    output: &DetectorOutput,
    gts: &[GroundTruthObject],
    cfg: &SelectionConfig,
) -> Vec<Vec<usize>> {
    gts.iter().map(|gt| top_k_by_iou(output, gt, cfg, |_| true)).collect()
}

pub fn select_classification_targets(
    output: &DetectorOutput,
    gts: &[GroundTruthObject],
    cfg: &SelectionConfig,
) -> Vec<Vec<usize>> {
    gts.iter()
        .map(|gt| top_k_by_iou(output, gt, cfg, |i| output.object_label(i) == gt.label))
        .collect()
}

/// Runs both tracks. Every regression target is pulled toward the degenerate
/// box at the image origin.
pub fn build_attack_target_set(
    output: &DetectorOutput,
    gts: &[GroundTruthObject],
    cfg: &SelectionConfig,
) -> Result<AttackTargetSet, TargetingError> {
    let regression = select_regression_targets(output, gts, cfg);
    let classification = select_classification_targets(output, gts, cfg);
    let target_boxes = regression
        .iter()
        .map(|idx| vec![BBox::ORIGIN; idx.len()])
        .collect();
    let gt_labels = classification
        .iter()
        .zip(gts)
        .map(|(idx, gt)| vec![gt.label; idx.len()])
        .collect();
    let set = AttackTargetSet {
        regression,
        target_boxes,
        classification,
        gt_labels,
    };
    if set.is_empty() {
        Err(TargetingError::NothingToAttack)
    } else {
        Ok(set)
    }
}
