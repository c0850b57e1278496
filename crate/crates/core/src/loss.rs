//! Training objective: smooth-L1 box regression over positive anchors plus
//! per-modality binary cross-entropy with hard-negative mining, combined as
//! total = l_bbox + λ·l_multilabel.

use crate::boxes::{encode_box, BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::head::AnchorAssignment;
use crate::mask::ModalityMask;
use ndarray::Array2;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_bbox: f64,
    pub l_multilabel: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Combines the two terms; λ must be positive.
pub fn total_loss(l_bbox: f64, l_multilabel: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda <= 0.0 {
        return Err(Error::validation("lambda must be positive"));
    }
    Ok(LossBreakdown {
        l_bbox,
        l_multilabel,
        lambda,
        total: l_bbox + lambda * l_multilabel,
    })
}

/// Per-anchor, per-modality classification target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    Pos,
    Neg,
    Ignore,
}

/// Regression and classification targets for one image.
pub struct AnchorTargets {
    /// Encoded offsets; rows for non-positive anchors are zero.
    pub loc: Array2<f64>,
    /// (anchors, 2): column 0 RGB, column 1 thermal.
    pub cls: Vec<[ClsTarget; 2]>,
    pub positive: Vec<bool>,
    pub n_pos: usize,
}

/// Builds targets from a matching. Positive anchors regress to their gt and
/// carry the gt's visibility flags as labels; anchors whose center falls in a
/// blacked-out region of a modality get that modality's label ignored (there
/// is nothing in the input to classify).
pub fn build_targets(
    anchors: &[BBox],
    assignment: &[AnchorAssignment],
    gts: &[GroundTruth],
    m_rgb: &ModalityMask,
    m_thermal: &ModalityMask,
) -> Result<AnchorTargets> {
    if anchors.len() != assignment.len() {
        return Err(Error::validation("assignment length must match anchors"));
    }
    let n = anchors.len();
    let mut loc = Array2::zeros((n, 4));
    let mut cls = vec![[ClsTarget::Neg; 2]; n];
    let mut positive = vec![false; n];
    let mut n_pos = 0;
    for (ai, (anchor, assign)) in anchors.iter().zip(assignment).enumerate() {
        match assign {
            AnchorAssignment::Positive(gi) => {
                let gt = &gts[*gi];
                let off = encode_box(&gt.bbox, anchor)?;
                for (k, v) in off.into_iter().enumerate() {
                    loc[[ai, k]] = v;
                }
                positive[ai] = true;
                n_pos += 1;
                cls[ai] = [
                    if gt.visible_rgb { ClsTarget::Pos } else { ClsTarget::Neg },
                    if gt.visible_thermal { ClsTarget::Pos } else { ClsTarget::Neg },
                ];
            }
            AnchorAssignment::Negative => {}
            AnchorAssignment::Ignored => cls[ai] = [ClsTarget::Ignore; 2],
        }
        let (cx, cy) = anchor.center();
        let px = (cx.floor() as usize).min(m_rgb.w().saturating_sub(1));
        let py = (cy.floor() as usize).min(m_rgb.h().saturating_sub(1));
        if m_rgb.get(py, px) == 0 {
            cls[ai][0] = ClsTarget::Ignore;
        }
        if m_thermal.get(py, px) == 0 {
            cls[ai][1] = ClsTarget::Ignore;
        }
    }
    Ok(AnchorTargets {
        loc,
        cls,
        positive,
        n_pos,
    })
}

fn smooth_l1(r: f64) -> f64 {
    if r.abs() < 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

fn smooth_l1_grad(r: f64) -> f64 {
    if r.abs() < 1.0 {
        r
    } else {
        r.signum()
    }
}

/// Smooth-L1 over positive anchors, summed over the four coordinates and
/// normalized by the positive count. Returns the loss and ∂loss/∂pred.
pub fn bbox_loss(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    positive: &[bool],
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() || pred.nrows() != positive.len() || pred.ncols() != 4 {
        return Err(Error::validation("bbox loss expects aligned (anchors,4) arrays"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut grad = Array2::zeros(pred.dim());
    if n_pos == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    for (ai, &is_pos) in positive.iter().enumerate() {
        if !is_pos {
            continue;
        }
        for k in 0..4 {
            let r = pred[[ai, k]] - target[[ai, k]];
            loss += smooth_l1(r);
            grad[[ai, k]] = smooth_l1_grad(r) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Numerically stable softplus: ln(1+eˣ).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-modality binary cross-entropy with 3:1 hard-negative mining.
///
/// For each modality, all Pos entries contribute softplus(−z); the Neg entries
/// are ranked by loss and only the top 3·(#Pos in that modality) contribute.
/// Ignore entries contribute nothing. The sum is normalized by the count of
/// positive anchors. Returns the loss and ∂loss/∂logits.
pub fn multilabel_loss(
    logits: &Array2<f64>,
    cls: &[[ClsTarget; 2]],
    n_pos: usize,
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != cls.len() || logits.ncols() != 2 {
        return Err(Error::validation("multilabel loss expects (anchors,2) logits"));
    }
    let mut grad = Array2::zeros(logits.dim());
    if n_pos == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    for m in 0..2 {
        let mut pos_count = 0usize;
        let mut negs: Vec<(f64, usize)> = Vec::new();
        for (ai, t) in cls.iter().enumerate() {
            let z = logits[[ai, m]];
            match t[m] {
                ClsTarget::Pos => {
                    pos_count += 1;
                    loss += softplus(-z) * inv;
                    grad[[ai, m]] = (sigmoid(z) - 1.0) * inv;
                }
                ClsTarget::Neg => negs.push((softplus(z), ai)),
                ClsTarget::Ignore => {}
            }
        }
        let keep = 3 * pos_count;
        negs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(l, ai) in negs.iter().take(keep) {
            loss += l * inv;
            grad[[ai, m]] = sigmoid(logits[[ai, m]]) * inv;
        }
    }
    Ok((loss, grad))
}
