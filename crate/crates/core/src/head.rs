//! SSD-style anchor machinery: grid anchor generation, anchor-to-ground-truth
//! matching, and greedy non-maximum suppression.

use crate::boxes::{iou, BBox, Detection, GroundTruth};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// One anchor scale (pixels, √area) per pyramid level.
    pub scales: Vec<f64>,
    /// Height/width ratios shared by all levels; pedestrians are tall.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![64.0, 128.0, 256.0],
            ratios: vec![1.0 / 0.41, 2.0, 3.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.scales.len() != levels {
            return Err(Error::validation(format!(
                "anchor config has {} scales for {levels} pyramid levels",
                self.scales.len()
            )));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation("anchor scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("anchor scales must increase with level"));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| r <= 0.0) {
            return Err(Error::validation("anchor ratios must be positive"));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len()
    }
}

/// Generates one anchor per (level cell × ratio), centered on feature-map
/// cells, ordered level → row → column → ratio, clipped to the image.
pub fn generate_anchors(
    pyramid_shapes: &[(usize, usize)],
    strides: &[usize],
    spec: &AnchorConfig,
    image_h: usize,
    image_w: usize,
) -> Result<Vec<BBox>> {
    if pyramid_shapes.len() != strides.len() {
        return Err(Error::validation("one stride per pyramid level"));
    }
    spec.validate(pyramid_shapes.len())?;
    let mut anchors = Vec::new();
    for (level, (&(h, w), &stride)) in pyramid_shapes.iter().zip(strides).enumerate() {
        if h * stride > image_h + stride || w * stride > image_w + stride {
            return Err(Error::validation(format!(
                "level {level} shape {h}x{w} at stride {stride} exceeds image {image_h}x{image_w}"
            )));
        }
        let scale = spec.scales[level];
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                for &r in &spec.ratios {
                    let ah = scale * r.sqrt();
                    let aw = scale / r.sqrt();
                    anchors.push(BBox::from_center(cx, cy, aw, ah).clip(image_h, image_w));
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorAssignment {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    /// Overlaps an ignore region; excluded from the loss.
    Ignored,
}

/// SSD matching: every non-ignored gt claims its best free anchor (forced,
/// regardless of IoU), then any unclaimed anchor with IoU ≥ `pos_iou` to a
/// non-ignored gt becomes positive for its best such gt. Unclaimed anchors
/// whose best overlap is with an ignore gt at ≥ `pos_iou` are excluded.
pub fn match_anchors(
    anchors: &[BBox],
    gts: &[GroundTruth],
    pos_iou: f64,
) -> Vec<AnchorAssignment> {
    let mut assign = vec![AnchorAssignment::Negative; anchors.len()];
    if gts.is_empty() || anchors.is_empty() {
        return assign;
    }
    // Forced best-anchor per gt, processed in gt order; claimed anchors are
    // skipped so every gt lands somewhere distinct.
    let mut claimed = vec![false; anchors.len()];
    for (gi, gt) in gts.iter().enumerate() {
        if gt.is_ignore {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (ai, a) in anchors.iter().enumerate() {
            if claimed[ai] {
                continue;
            }
            let v = iou(a, &gt.bbox);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ai, v));
            }
        }
        if let Some((ai, _)) = best {
            claimed[ai] = true;
            assign[ai] = AnchorAssignment::Positive(gi);
        }
    }
    // Threshold matching for the rest.
    for (ai, a) in anchors.iter().enumerate() {
        if claimed[ai] {
            continue;
        }
        let mut best_pos: Option<(usize, f64)> = None;
        let mut best_ignore = 0.0f64;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(a, &gt.bbox);
            if gt.is_ignore {
                best_ignore = best_ignore.max(v);
            } else if best_pos.map_or(true, |(_, bv)| v > bv) {
                best_pos = Some((gi, v));
            }
        }
        match best_pos {
            Some((gi, v)) if v >= pos_iou => assign[ai] = AnchorAssignment::Positive(gi),
            _ if best_ignore >= pos_iou => assign[ai] = AnchorAssignment::Ignored,
            _ => {}
        }
    }
    assign
}

/// Greedy NMS: sorts by confidence descending (ties keep input order), keeps a
/// detection iff its IoU with every already-kept detection is below
/// `iou_thresh`, stops after `top_k` kept.
pub fn nms(dets: &[Detection], iou_thresh: f64, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence().total_cmp(&dets[a].confidence()));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        if kept.len() >= top_k {
            break;
        }
        let d = &dets[idx];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}
