//! Shared oracle implementations and toy fixtures for the integration tests.
//! Everything here is deliberately naive: plain loops that re-derive what the
//! library computes with vectorized kernels.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rgbt_detect::boxes::{BBox, Detection, GroundTruth};
use rgbt_detect::config::{EvalConfig, ModelConfig, StageSpec, TrainConfig};
use rgbt_detect::data::SynthConfig;
use rgbt_detect::ha::{attend, project_qkv, HaParams};
use rgbt_detect::head::AnchorConfig;
use rgbt_detect::mask::ModalityMask;

pub fn rand_map(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((b, c, h, w), |_| rng.gen_range(-1.5..1.5))
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p_zero: f64) -> ModalityMask {
    let data = ndarray::Array2::from_shape_fn((h, w), |_| u8::from(rng.gen::<f64>() >= p_zero));
    ModalityMask::new(data).unwrap()
}

/// Naive reference for the fused attention block: per token, explicit
/// projection, combined-query logits, softmax, and value mixing, in loops.
pub fn reference_hybrid(
    f_rgb: &Array4<f64>,
    f_th: &Array4<f64>,
    m_rgb: &ModalityMask,
    m_th: &ModalityMask,
    p: &HaParams,
) -> (Array4<f64>, Array4<f64>) {
    let (b, c, h, w) = f_rgb.dim();
    assert_eq!(b, 1);
    let n = h * w;
    let masked = |f: &Array4<f64>, m: &ModalityMask| -> Vec<Vec<f64>> {
        (0..n)
            .map(|pix| {
                let (y, x) = (pix / w, pix % w);
                (0..c)
                    .map(|ci| f[[0, ci, y, x]] * f64::from(m.get(y, x)))
                    .collect()
            })
            .collect()
    };
    let project = |tokens: &[Vec<f64>], wm: &Array2<f64>| -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|t| {
                (0..c)
                    .map(|co| (0..c).map(|ci| wm[[co, ci]] * t[ci]).sum())
                    .collect()
            })
            .collect()
    };
    let x_rgb = masked(f_rgb, m_rgb);
    let x_th = masked(f_th, m_th);
    let q_rgb = project(&x_rgb, &p.wq_rgb);
    let q_th = project(&x_th, &p.wq_thermal);
    let qc: Vec<Vec<f64>> = q_rgb
        .iter()
        .zip(&q_th)
        .map(|(a, bb)| a.iter().zip(bb).map(|(u, v)| u + v).collect())
        .collect();
    let attend_ref = |x: &[Vec<f64>], wk: &Array2<f64>, wv: &Array2<f64>| -> Vec<Vec<f64>> {
        let k = project(x, wk);
        let v = project(x, wv);
        let scale = 1.0 / (c as f64).sqrt();
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..c).map(|ci| qc[i][ci] * k[j][ci]).sum::<f64>() * scale)
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                (0..c)
                    .map(|ci| {
                        (0..n).map(|j| exps[j] / z * v[j][ci]).sum::<f64>() + x[i][ci]
                    })
                    .collect()
            })
            .collect()
    };
    let to_map = |tokens: Vec<Vec<f64>>| {
        Array4::from_shape_fn((1, c, h, w), |(_, ci, y, x)| tokens[y * w + x][ci])
    };
    (
        to_map(attend_ref(&x_rgb, &p.wk_rgb, &p.wv_rgb)),
        to_map(attend_ref(&x_th, &p.wk_thermal, &p.wv_thermal)),
    )
}

/// Single-modality self-attention assembled from the library's primitives:
/// what the fused block must reproduce when the other modality is gone.
pub fn self_attention(
    f: &Array4<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
) -> Array4<f64> {
    let (q, k, v) = project_qkv(f, wq, wk, wv).unwrap();
    let star = attend(&q, &k, &v).unwrap();
    f + &star
}

pub fn det(x: f64, y: f64, w: f64, h: f64, conf: f64) -> Detection {
    Detection {
        bbox: BBox::new(x, y, x + w, y + h).unwrap(),
        score_rgb: conf,
        score_thermal: 0.0,
    }
}

pub fn gt(x: f64, y: f64, w: f64, h: f64) -> GroundTruth {
    GroundTruth {
        bbox: BBox::new(x, y, x + w, y + h).unwrap(),
        visible_rgb: true,
        visible_thermal: true,
        is_ignore: false,
    }
}

pub fn ignore_gt(x: f64, y: f64, w: f64, h: f64) -> GroundTruth {
    GroundTruth { is_ignore: true, ..gt(x, y, w, h) }
}

/// Plain rectangle IoU, independent of the library's.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let ua = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    let ub = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    if inter <= 0.0 { 0.0 } else { inter / (ua + ub - inter) }
}

/// Greedy matching of one image at one threshold, counting (TP, FP).
pub fn ref_match_counts(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresh: f64,
    iou: f64,
) -> (usize, usize) {
    let mut kept: Vec<&Detection> = dets.iter().filter(|d| d.confidence() >= thresh).collect();
    kept.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
    let mut taken = vec![false; gts.len()];
    let (mut tp, mut fp) = (0, 0);
    for d in kept {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.is_ignore || taken[gi] {
                continue;
            }
            let v = ref_iou(&d.bbox, &g.bbox);
            if v >= iou && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp += 1;
        } else if !gts.iter().any(|g| g.is_ignore && ref_iou(&d.bbox, &g.bbox) >= iou) {
            fp += 1;
        }
    }
    (tp, fp)
}

/// Exhaustive-threshold reference for the log-average miss rate: re-runs the
/// greedy matching at every distinct confidence.
pub fn ref_lamr(images: &[(Vec<Detection>, Vec<GroundTruth>)], iou: f64) -> f64 {
    let n_images = images.len() as f64;
    let n_gt: usize = images
        .iter()
        .map(|(_, gts)| gts.iter().filter(|g| !g.is_ignore).count())
        .sum();
    assert!(n_gt > 0);
    let mut threshs: Vec<f64> = images
        .iter()
        .flat_map(|(dets, _)| dets.iter().map(Detection::confidence))
        .collect();
    threshs.sort_by(|a, b| b.total_cmp(a));
    threshs.dedup();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for t in threshs {
        let (mut tp, mut fp) = (0, 0);
        for (dets, gts) in images {
            let (itp, ifp) = ref_match_counts(dets, gts, t, iou);
            tp += itp;
            fp += ifp;
        }
        points.push((fp as f64 / n_images, 1.0 - tp as f64 / n_gt as f64));
    }
    if points.is_empty() {
        points.push((0.0, 1.0));
    }
    let clamp = 1.0 / (10.0 * n_gt as f64);
    let mut sampled = [0.0f64; 9];
    for (i, out) in sampled.iter_mut().enumerate() {
        let p = 10f64.powf(-2.0 + 0.25 * i as f64);
        let mut mr = points[0].1;
        for &(f, m) in &points {
            if f <= p {
                mr = m;
            } else {
                break;
            }
        }
        *out = mr.max(clamp);
    }
    if sampled.iter().all(|&m| m == sampled[0]) {
        return 100.0 * sampled[0];
    }
    let log_sum: f64 = sampled.iter().map(|m| m.ln()).sum();
    100.0 * (log_sum / 9.0).exp()
}

/// Ten hand-built images exercising duplicates, ties, ignores, and misses.
pub fn hand_fixture() -> Vec<(Vec<Detection>, Vec<GroundTruth>)> {
    vec![
        (vec![det(10.0, 10.0, 20.0, 40.0, 0.9), det(200.0, 10.0, 20.0, 40.0, 0.95)],
         vec![gt(10.0, 10.0, 20.0, 40.0)]),
        (vec![det(50.0, 50.0, 20.0, 40.0, 0.8), det(51.0, 50.0, 20.0, 40.0, 0.7)],
         vec![gt(50.0, 50.0, 20.0, 40.0)]),
        (vec![det(0.0, 0.0, 10.0, 20.0, 0.5), det(30.0, 0.0, 10.0, 20.0, 0.5)],
         vec![gt(0.0, 0.0, 10.0, 20.0), gt(30.0, 0.0, 10.0, 20.0)]),
        (vec![det(100.0, 100.0, 30.0, 60.0, 0.6)],
         vec![gt(0.0, 0.0, 10.0, 20.0), ignore_gt(98.0, 98.0, 34.0, 64.0)]),
        (vec![det(0.0, 0.0, 10.0, 20.0, 0.4)],
         vec![gt(6.0, 0.0, 10.0, 20.0)]),
        (vec![det(1.0, 1.0, 20.0, 40.0, 0.85)],
         vec![gt(0.0, 0.0, 20.0, 40.0)]),
        (Vec::new(), vec![gt(5.0, 5.0, 12.0, 24.0)]),
        (vec![det(300.0, 10.0, 15.0, 30.0, 0.3)],
         vec![gt(0.0, 0.0, 15.0, 30.0), ignore_gt(100.0, 100.0, 15.0, 30.0)]),
        (vec![det(400.0, 10.0, 15.0, 30.0, 0.99), det(0.0, 0.0, 15.0, 30.0, 0.2)],
         vec![gt(0.0, 0.0, 15.0, 30.0)]),
        (vec![det(0.0, 0.0, 10.0, 20.0, 0.75), det(20.0, 0.0, 10.0, 20.0, 0.65)],
         vec![gt(0.0, 0.0, 10.0, 20.0), gt(20.0, 0.0, 10.0, 20.0), gt(40.0, 0.0, 10.0, 20.0)]),
    ]
}

/// Small, fast synthetic dataset for smoke-level pipeline tests.
pub fn toy_synth() -> SynthConfig {
    SynthConfig {
        height: 48,
        width: 64,
        ped_count_min: 1,
        ped_count_max: 3,
        ped_height_min: 12.0,
        ped_height_max: 36.0,
        only_thermal_frac: 0.06,
        only_rgb_frac: 0.06,
        night_frac: 0.4,
        rgb_noise: 12.0,
        thermal_noise: 10.0,
        distractors_max: 2,
        train: 24,
        val: 8,
        test: 8,
        seed: 7,
    }
}

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        stage_specs: vec![
            StageSpec { channels: 8, stride: 4, depth: 1 },
            StageSpec { channels: 12, stride: 2, depth: 1 },
            StageSpec { channels: 16, stride: 2, depth: 1 },
        ],
        fusion_channels: vec![16, 16, 16],
        use_ha: true,
        anchors: AnchorConfig {
            scales: vec![9.0, 14.0, 21.0],
            ratios: vec![1.0 / 0.41],
        },
        init_std: 0.05,
    }
}

pub fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 2e-3,
        momentum: 0.9,
        weight_decay: 5e-4,
        decay_epochs: vec![],
        gamma: 0.1,
        lambda: 1.0,
        seed: 1,
        patience: 50,
    }
}

pub fn toy_eval() -> EvalConfig {
    EvalConfig {
        iou_thresh: 0.5,
        min_height: 10.0,
        score_floor: 0.01,
        nms_iou: 0.45,
        top_k: 200,
    }
}

pub const H_STEP: f64 = 1e-5;

/// Relative error with an absolute floor, so gradients at the FD noise level
/// do not produce spurious ratios.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-8 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central finite-difference sweep of the fused attention block: inputs of
/// both modalities and all six projection matrices. Returns the worst
/// relative error against the analytic backward pass.
pub fn ha_fd_worst_rel() -> f64 {
    use rgbt_detect::ha::{hybrid_attention, hybrid_attention_backward, hybrid_attention_train};
    use rgbt_detect::rng::stream_rng;

    let mut rng = stream_rng(21, "fd-ha", 0);
    let (c, h, w) = (3, 2, 3);
    let mut params = HaParams::init(c, 0.6, &mut rng);
    let mut sample = |b, c, h, w| {
        Array4::from_shape_fn((b, c, h, w), |_| rng.gen_range(-1.0..1.0))
    };
    let f_rgb = sample(1, c, h, w);
    let f_th = sample(1, c, h, w);
    let r_rgb = sample(1, c, h, w);
    let r_th = sample(1, c, h, w);
    let m_rgb = ModalityMask::from_fn(h, w, |y, x| !(y == 1 && x == 0));
    let m_th = ModalityMask::from_fn(h, w, |y, x| !(y == 0 && x == 2));

    let loss = |f_r: &Array4<f64>, f_t: &Array4<f64>, p: &HaParams| -> f64 {
        let (o_r, o_t) =
            hybrid_attention(f_r, f_t, &[m_rgb.clone()], &[m_th.clone()], p).unwrap();
        (&o_r * &r_rgb).sum() + (&o_t * &r_th).sum()
    };

    let (_, cache) =
        hybrid_attention_train(&f_rgb, &f_th, &[m_rgb.clone()], &[m_th.clone()], &params).unwrap();
    let (d_rgb, d_th, wgrads) = hybrid_attention_backward(&cache, &params, &r_rgb, &r_th);

    let mut worst = 0.0f64;
    for (f, d, is_rgb) in [(&f_rgb, &d_rgb, true), (&f_th, &d_th, false)] {
        for idx in 0..f.len() {
            let mut plus = f.clone();
            let mut minus = f.clone();
            plus.as_slice_mut().unwrap()[idx] += H_STEP;
            minus.as_slice_mut().unwrap()[idx] -= H_STEP;
            let numeric = if is_rgb {
                (loss(&plus, &f_th, &params) - loss(&minus, &f_th, &params)) / (2.0 * H_STEP)
            } else {
                (loss(&f_rgb, &plus, &params) - loss(&f_rgb, &minus, &params)) / (2.0 * H_STEP)
            };
            worst = worst.max(rel_err(d.as_slice().unwrap()[idx], numeric));
        }
    }
    let analytic = [
        (&wgrads.dwq_rgb, 0usize),
        (&wgrads.dwk_rgb, 1),
        (&wgrads.dwv_rgb, 2),
        (&wgrads.dwq_thermal, 3),
        (&wgrads.dwk_thermal, 4),
        (&wgrads.dwv_thermal, 5),
    ];
    for (grad, which) in analytic {
        for idx in 0..grad.len() {
            fn pick(p: &mut HaParams, which: usize) -> &mut Array2<f64> {
                match which {
                    0 => &mut p.wq_rgb,
                    1 => &mut p.wk_rgb,
                    2 => &mut p.wv_rgb,
                    3 => &mut p.wq_thermal,
                    4 => &mut p.wk_thermal,
                    _ => &mut p.wv_thermal,
                }
            }
            let mut probe = |delta: f64| {
                pick(&mut params, which).as_slice_mut().unwrap()[idx] += delta;
                let l = loss(&f_rgb, &f_th, &params);
                pick(&mut params, which).as_slice_mut().unwrap()[idx] -= delta;
                l
            };
            let numeric = (probe(H_STEP) - probe(-H_STEP)) / (2.0 * H_STEP);
            worst = worst.max(rel_err(grad.as_slice().unwrap()[idx], numeric));
        }
    }
    worst
}

/// Central finite-difference sweep of the total training loss through a tiny
/// two-stage model: every learnable scalar is probed. Returns the worst
/// relative error and the number of scalars swept.
pub fn model_loss_fd() -> (f64, usize) {
    use rgbt_detect::boxes::GroundTruth;
    use rgbt_detect::head::match_anchors;
    use rgbt_detect::loss::{bbox_loss, build_targets, multilabel_loss};
    use rgbt_detect::model::{
        flatten_head_outputs, scatter_head_gradients, DetectorModel, ParamKind, TensorMut,
    };
    use rgbt_detect::rng::stream_rng;

    let cfg = ModelConfig {
        stage_specs: vec![
            StageSpec { channels: 2, stride: 2, depth: 1 },
            StageSpec { channels: 2, stride: 2, depth: 1 },
        ],
        fusion_channels: vec![2, 2],
        use_ha: true,
        anchors: AnchorConfig { scales: vec![3.0, 6.0], ratios: vec![2.0] },
        init_std: 0.2,
    };
    let mut rng = stream_rng(24, "fd-model", 0);
    let mut model = DetectorModel::init(&cfg, &mut rng).unwrap();
    let (ih, iw) = (8, 8);
    let anchors = model.anchors(ih, iw).unwrap();
    // Ground truths placed exactly on anchors: guaranteed positives with zero
    // regression targets, and enough of them that hard-negative mining keeps
    // every negative (3 * #pos >= #neg), so the loss is smooth in the logits.
    let picks = [0usize, 3, 6, 9, 12, 15, 17, 19];
    let gts: Vec<GroundTruth> = picks
        .iter()
        .enumerate()
        .map(|(i, &ai)| GroundTruth {
            bbox: anchors[ai],
            visible_rgb: true,
            visible_thermal: i != 2,
            is_ignore: false,
        })
        .collect();
    let m_rgb = ModalityMask::ones(ih, iw);
    let m_th = ModalityMask::ones(ih, iw);
    let rgb = Array4::from_shape_fn((1, 3, ih, iw), |_| rng.gen_range(-1.0..1.0));
    let thermal = Array4::from_shape_fn((1, 1, ih, iw), |_| rng.gen_range(-1.0..1.0));
    let lambda = 1.0;

    let loss = |model: &mut DetectorModel| -> f64 {
        let (outputs, _) =
            model.forward_train(&rgb, &thermal, &[m_rgb.clone()], &[m_th.clone()]).unwrap();
        let ratios = model.cfg.anchors.ratios.len();
        let (loc_flat, cls_flat) = flatten_head_outputs(&outputs, 0, ratios);
        let assignment = match_anchors(&anchors, &gts, 0.5);
        let targets = build_targets(&anchors, &assignment, &gts, &m_rgb, &m_th).unwrap();
        let (lb, _) = bbox_loss(&loc_flat, &targets.loc, &targets.positive).unwrap();
        let (lm, _) = multilabel_loss(&cls_flat, &targets.cls, targets.n_pos).unwrap();
        lb + lambda * lm
    };
    let analytic = {
        let (outputs, cache) =
            model.forward_train(&rgb, &thermal, &[m_rgb.clone()], &[m_th.clone()]).unwrap();
        let ratios = model.cfg.anchors.ratios.len();
        let (loc_flat, cls_flat) = flatten_head_outputs(&outputs, 0, ratios);
        let assignment = match_anchors(&anchors, &gts, 0.5);
        let targets = build_targets(&anchors, &assignment, &gts, &m_rgb, &m_th).unwrap();
        let (_, glb) = bbox_loss(&loc_flat, &targets.loc, &targets.positive).unwrap();
        let (_, mut glm) = multilabel_loss(&cls_flat, &targets.cls, targets.n_pos).unwrap();
        glm.mapv_inplace(|v| v * lambda);
        let mut d_loc: Vec<Array4<f64>> =
            outputs.loc.iter().map(|l| Array4::zeros(l.dim())).collect();
        let mut d_cls: Vec<Array4<f64>> =
            outputs.cls.iter().map(|l| Array4::zeros(l.dim())).collect();
        scatter_head_gradients(&glb, &glm, &mut d_loc, &mut d_cls, 0, ratios);
        model.backward(&cache, &d_loc, &d_cls)
    };

    let add_to_param = |model: &mut DetectorModel, name: &str, idx: usize, delta: f64| {
        let mut hit = false;
        model.visit_mut(&mut |n, kind, t| {
            if kind != ParamKind::Param || n != name {
                return;
            }
            hit = true;
            match t {
                TensorMut::A1(a) => a.as_slice_mut().unwrap()[idx] += delta,
                TensorMut::A2(a) => a.as_slice_mut().unwrap()[idx] += delta,
                TensorMut::A4(a) => a.as_slice_mut().unwrap()[idx] += delta,
            }
        });
        assert!(hit, "no parameter named {name}");
    };

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let names: Vec<(String, usize)> = model
        .named_tensors()
        .into_iter()
        .filter(|(_, (kind, _))| *kind == ParamKind::Param)
        .map(|(name, (_, arr))| (name, arr.len()))
        .collect();
    for (name, len) in names {
        let grad = analytic.get(&name).unwrap_or_else(|| panic!("no grad for {name}"));
        let grad = grad.as_slice().unwrap();
        for idx in 0..len {
            add_to_param(&mut model, &name, idx, H_STEP);
            let plus = loss(&mut model);
            add_to_param(&mut model, &name, idx, -2.0 * H_STEP);
            let minus = loss(&mut model);
            add_to_param(&mut model, &name, idx, H_STEP);
            let numeric = (plus - minus) / (2.0 * H_STEP);
            worst = worst.max(rel_err(grad[idx], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

pub struct EventCounts {
    pub full_rgb: usize,
    pub full_thermal: usize,
    pub patch_rgb: usize,
    pub patch_thermal: usize,
    pub co_masked_pixels: usize,
}

/// Draws training masks `draws` times on independent seeded streams and
/// tallies full-blackout events, patch events, and co-masked pixels.
pub fn masking_event_stats(
    policy: &rgbt_detect::augment::MaskingPolicy,
    draws: usize,
    h: usize,
    w: usize,
) -> EventCounts {
    use rgbt_detect::augment::sample_training_masks;
    use rgbt_detect::rng::stream_rng;
    let mut c = EventCounts {
        full_rgb: 0,
        full_thermal: 0,
        patch_rgb: 0,
        patch_thermal: 0,
        co_masked_pixels: 0,
    };
    for i in 0..draws {
        let mut rng = stream_rng(77, "maskaug", i as u64);
        let (m_rgb, m_th) = sample_training_masks(&mut rng, policy, h, w).unwrap();
        let classify = |m: &ModalityMask| (m.is_all_zero(), !m.is_all_zero() && m.count_zeros() > 0);
        let (fr, pr) = classify(&m_rgb);
        let (ft, pt) = classify(&m_th);
        c.full_rgb += usize::from(fr);
        c.full_thermal += usize::from(ft);
        c.patch_rgb += usize::from(pr);
        c.patch_thermal += usize::from(pt);
        for (a, b) in m_rgb.data().iter().zip(m_th.data().iter()) {
            if *a == 0 && *b == 0 {
                c.co_masked_pixels += 1;
            }
        }
    }
    c
}
