//! Axis-aligned boxes in image pixel coordinates, ground-truth records, and
//! the SSD offset parameterization.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_valid() {
            return Err(Error::validation(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Clamps the box to [0,w]×[0,h].
    pub fn clip(&self, img_h: usize, img_w: usize) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, img_w as f64),
            y_min: self.y_min.clamp(0.0, img_h as f64),
            x_max: self.x_max.clamp(0.0, img_w as f64),
            y_max: self.y_max.clamp(0.0, img_h as f64),
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Encodes gt relative to an anchor: center offsets scaled by anchor size,
/// log size ratios, unit variance scaling.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 || anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::validation("encode requires positive box sizes"));
    }
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    Ok([
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ])
}

/// Inverse of [`encode_box`]. Clipping to the image is a separate step so the
/// round-trip stays exact.
pub fn decode_box(offsets: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
        return Err(Error::validation("decode requires a positive-size anchor"));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + offsets[0] * anchor.width();
    let cy = acy + offsets[1] * anchor.height();
    let w = anchor.width() * offsets[2].exp();
    let h = anchor.height() * offsets[3].exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// One annotated pedestrian with per-modality visibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub bbox: BBox,
    pub visible_rgb: bool,
    pub visible_thermal: bool,
    pub is_ignore: bool,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::validation(format!("degenerate gt box {:?}", self.bbox)));
        }
        if !self.is_ignore && !self.visible_rgb && !self.visible_thermal {
            return Err(Error::validation(
                "ground truth must be visible in at least one modality unless ignored",
            ));
        }
        Ok(())
    }
}

/// One detector output box with the per-modality scores it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score_rgb: f64,
    pub score_thermal: f64,
}

impl Detection {
    /// Final score: max of the modality scores, so a pedestrian visible in
    /// only one modality keeps its evidence.
    pub fn confidence(&self) -> f64 {
        self.score_rgb.max(self.score_thermal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn encode_fixed_point_at_anchor() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(encode_box(&a, &a).unwrap(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BBox::new(5.0, 0.0, 5.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 10.0).is_err());
    }
}
