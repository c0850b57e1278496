//! Detection scoring in the Caltech pedestrian style: greedy IoU matching per
//! image, an FPPI/miss-rate tradeoff curve over score thresholds, and the
//! log-average miss rate over 9 log-spaced FPPI reference points in [10⁻², 1].

use crate::boxes::{iou, Detection, GroundTruth};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetOutcome {
    /// Matched the gt with this index.
    Tp(usize),
    Fp,
    /// Matched an ignore region; counts as neither TP nor FP.
    Ignored,
}

/// Matching result for one image: per-detection (confidence, outcome) plus the
/// count of evaluated (non-ignored) ground truths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub outcomes: Vec<(f64, DetOutcome)>,
    pub n_gt: usize,
}

/// Greedy matching at `iou_thresh`: detections in confidence order (ties keep
/// input order) take the highest-IoU unmatched non-ignored gt; failing that,
/// any ignore gt at the threshold absorbs the detection; otherwise it is a
/// false positive. Ignore gts may absorb any number of detections.
pub fn match_image(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> ImageEval {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence().total_cmp(&dets[a].confidence()));
    let mut gt_taken = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.is_ignore || gt_taken[gi] {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        let outcome = match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                DetOutcome::Tp(gi)
            }
            None => {
                let hits_ignore = gts
                    .iter()
                    .any(|gt| gt.is_ignore && iou(&d.bbox, &gt.bbox) >= iou_thresh);
                if hits_ignore {
                    DetOutcome::Ignored
                } else {
                    DetOutcome::Fp
                }
            }
        };
        outcomes.push((d.confidence(), outcome));
    }
    ImageEval {
        outcomes,
        n_gt: gts.iter().filter(|g| !g.is_ignore).count(),
    }
}

/// Marks ground truths below `min_height` pixels as ignore (the configurable
/// reasonable-subset predicate).
pub fn apply_height_filter(gts: &[GroundTruth], min_height: f64) -> Vec<GroundTruth> {
    gts.iter()
        .map(|g| GroundTruth {
            is_ignore: g.is_ignore || g.bbox.height() < min_height,
            ..*g
        })
        .collect()
}

/// FPPI / miss-rate curve swept over the detection score thresholds,
/// descending. One point per distinct confidence value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MRCurve {
    pub thresholds: Vec<f64>,
    pub fppi: Vec<f64>,
    pub miss_rate: Vec<f64>,
    pub n_gt: usize,
    pub n_images: usize,
}

/// Builds the curve from per-image matching results.
pub fn miss_rate_curve(evals: &[ImageEval]) -> Result<MRCurve> {
    if evals.is_empty() {
        return Err(Error::validation("miss-rate curve needs at least one image"));
    }
    let n_images = evals.len();
    let n_gt: usize = evals.iter().map(|e| e.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::validation(
            "no evaluated ground truths: miss rate is undefined",
        ));
    }
    let mut events: Vec<(f64, bool)> = Vec::new(); // (confidence, is_tp)
    for e in evals {
        for &(conf, outcome) in &e.outcomes {
            match outcome {
                DetOutcome::Tp(_) => events.push((conf, true)),
                DetOutcome::Fp => events.push((conf, false)),
                DetOutcome::Ignored => {}
            }
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut thresholds = Vec::new();
    let mut fppi = Vec::new();
    let mut miss_rate = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        fppi.push(fp as f64 / n_images as f64);
        miss_rate.push(1.0 - tp as f64 / n_gt as f64);
    }
    if thresholds.is_empty() {
        // No detections anywhere: the curve degenerates to one point.
        thresholds.push(1.0);
        fppi.push(0.0);
        miss_rate.push(1.0);
    }
    Ok(MRCurve {
        thresholds,
        fppi,
        miss_rate,
        n_gt,
        n_images,
    })
}

/// The 9 FPPI reference points, equally spaced in log10 on [10⁻², 10⁰].
pub fn fppi_reference_points() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + i as f64 * 0.25))
}

/// Log-average miss rate as a percentage: geometric mean of the miss rate
/// sampled at the 9 reference points. At each point the curve value is the
/// miss rate of the last threshold whose FPPI is ≤ the point; if the curve
/// never reaches that low an FPPI, its highest miss rate is used. Zero miss
/// rates are clamped to 1/(10·#gt) before the logarithm.
pub fn log_average_miss_rate(curve: &MRCurve) -> f64 {
    let clamp = 1.0 / (10.0 * curve.n_gt as f64);
    let mut sampled = [0.0f64; 9];
    for (out, p) in sampled.iter_mut().zip(fppi_reference_points()) {
        let mut mr = curve.miss_rate[0];
        for (f, m) in curve.fppi.iter().zip(&curve.miss_rate) {
            if *f <= p {
                mr = *m;
            } else {
                break;
            }
        }
        *out = mr.max(clamp);
    }
    // The geometric mean of a constant sequence is that constant; skipping
    // the exp/ln round trip keeps the clamp floor exact.
    if sampled.iter().all(|&m| m == sampled[0]) {
        return 100.0 * sampled[0];
    }
    let log_sum: f64 = sampled.iter().map(|m| m.ln()).sum();
    100.0 * (log_sum / 9.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn gt(x: f64, y: f64, s: f64) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, y, x + s, y + s * 2.0).unwrap(),
            visible_rgb: true,
            visible_thermal: true,
            is_ignore: false,
        }
    }

    fn det(g: &GroundTruth, score: f64) -> Detection {
        Detection {
            bbox: g.bbox,
            score_rgb: score,
            score_thermal: 0.0,
        }
    }

    #[test]
    fn perfect_match_is_tp() {
        let g = gt(10.0, 10.0, 20.0);
        let e = match_image(&[det(&g, 0.9)], &[g], 0.5);
        assert_eq!(e.outcomes, vec![(0.9, DetOutcome::Tp(0))]);
        assert_eq!(e.n_gt, 1);
    }

    #[test]
    fn second_det_on_same_gt_is_fp() {
        let g = gt(10.0, 10.0, 20.0);
        let e = match_image(&[det(&g, 0.8), det(&g, 0.9)], &[g], 0.5);
        // Higher score matched first despite input order.
        assert_eq!(e.outcomes[0], (0.9, DetOutcome::Tp(0)));
        assert_eq!(e.outcomes[1], (0.8, DetOutcome::Fp));
    }

    #[test]
    fn curve_requires_gts() {
        let e = ImageEval {
            outcomes: vec![],
            n_gt: 0,
        };
        assert!(miss_rate_curve(&[e]).is_err());
    }

    #[test]
    fn empty_detector_scores_one_hundred() {
        let e = ImageEval {
            outcomes: vec![],
            n_gt: 3,
        };
        let curve = miss_rate_curve(&[e]).unwrap();
        assert_eq!(curve.fppi, vec![0.0]);
        assert_eq!(curve.miss_rate, vec![1.0]);
        assert_eq!(log_average_miss_rate(&curve), 100.0);
    }

    #[test]
    fn height_filter_marks_small_ignore() {
        let small = gt(0.0, 0.0, 10.0); // height 20
        let big = gt(30.0, 30.0, 40.0); // height 80
        let out = apply_height_filter(&[small, big], 55.0);
        assert!(out[0].is_ignore);
        assert!(!out[1].is_ignore);
    }
}
