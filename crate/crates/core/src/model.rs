//! The dual-branch detector: per-modality conv stages, hybrid attention after
//! the first stage, per-level concat fusion, and SSD heads. Training uses
//! hand-written backward passes; inference uses running batch-norm statistics
//! and the blocked attention kernel.

use crate::boxes::{decode_box, BBox, Detection};
use crate::config::{EvalConfig, ModelConfig, HA_INSERTION_INDEX};
use crate::error::{Error, Result};
use crate::ha::{
    hybrid_attention, hybrid_attention_backward, hybrid_attention_train, HaCache, HaParams,
};
use crate::head::{generate_anchors, nms};
use crate::mask::{downsample_mask, ModalityMask};
use crate::nn::{relu_backward, relu_forward, BatchNorm, BnCache, Conv2d, Conv2dCache};
use ndarray::{s, Array1, Array2, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// A conv → batch-norm → ReLU unit. Stage convs carry no bias (the norm's
/// shift subsumes it).
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm,
}

struct UnitCache {
    conv: Conv2dCache,
    bn: BnCache,
    y: Array4<f64>,
}

impl ConvUnit {
    fn forward_train(&mut self, x: &Array4<f64>) -> Result<(Array4<f64>, UnitCache)> {
        let (z, conv_cache) = self.conv.forward(x)?;
        let (n, bn_cache) = self.bn.forward_train(&z)?;
        let y = relu_forward(&n);
        Ok((
            y.clone(),
            UnitCache {
                conv: conv_cache,
                bn: bn_cache,
                y,
            },
        ))
    }

    fn forward_eval(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(relu_forward(&self.bn.forward_eval(&self.conv.forward_eval(x)?)?))
    }

    /// Returns (dx, dweight, dgamma, dbeta).
    fn backward(
        &self,
        cache: &UnitCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array1<f64>, Array1<f64>) {
        let dn = relu_backward(&cache.y, dy);
        let (dz, dgamma, dbeta) = self.bn.backward(&cache.bn, &dn);
        let (dx, dw, _) = self.conv.backward(&cache.conv, &dz);
        (dx, dw, dgamma, dbeta)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    units: Vec<ConvUnit>,
}

/// Concat fusion: conv (with bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
struct FusionLevel {
    conv: Conv2d,
    bn: BatchNorm,
}

/// Per-level regression and classification convs (with bias, no norm).
#[derive(Debug, Clone)]
struct HeadPair {
    loc: Conv2d,
    cls: Conv2d,
}

pub struct DetectorModel {
    pub cfg: ModelConfig,
    rgb_stages: Vec<Stage>,
    thermal_stages: Vec<Stage>,
    ha: Option<HaParams>,
    fusion: Vec<FusionLevel>,
    heads: Vec<HeadPair>,
}

/// Borrowed view of one parameter or buffer tensor.
pub enum Tensor<'a> {
    A1(&'a Array1<f64>),
    A2(&'a Array2<f64>),
    A4(&'a Array4<f64>),
}

pub enum TensorMut<'a> {
    A1(&'a mut Array1<f64>),
    A2(&'a mut Array2<f64>),
    A4(&'a mut Array4<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by SGD.
    Param,
    /// Persisted state that is not optimized (batch-norm running stats).
    Buffer,
}

pub type ParamGrads = BTreeMap<String, ArrayD<f64>>;

fn normal_conv(
    rng: &mut ChaCha8Rng,
    std: f64,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    bias: bool,
) -> Conv2d {
    let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| crate::ha::sample_normal(rng) * std);
    Conv2d {
        weight,
        bias: bias.then(|| Array1::zeros(c_out)),
        stride,
        pad: k / 2,
    }
}

impl DetectorModel {
    /// Builds a model with normal(std) conv weights, zero biases, and identity
    /// batch-norm. The parameter draw order is fixed, so a seed fully
    /// determines the weights.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let std = cfg.init_std;
        let build_branch = |rng: &mut ChaCha8Rng, in_ch: usize| -> Vec<Stage> {
            let mut stages = Vec::new();
            let mut prev = in_ch;
            for spec in &cfg.stage_specs {
                let mut units = Vec::new();
                for (ui, stride) in spec.unit_strides().into_iter().enumerate() {
                    let c_in = if ui == 0 { prev } else { spec.channels };
                    units.push(ConvUnit {
                        conv: normal_conv(rng, std, spec.channels, c_in, 3, stride, false),
                        bn: BatchNorm::new(spec.channels),
                    });
                }
                prev = spec.channels;
                stages.push(Stage { units });
            }
            stages
        };
        let rgb_stages = build_branch(rng, 3);
        let thermal_stages = build_branch(rng, 1);
        let ha_channels = cfg.stage_specs[HA_INSERTION_INDEX - 1].channels;
        let ha = cfg.use_ha.then(|| HaParams::init(ha_channels, std, rng));
        let mut fusion = Vec::new();
        let mut heads = Vec::new();
        let r = cfg.anchors.anchors_per_cell();
        for (level, si) in cfg.fusion_stage_indices().enumerate() {
            let c_in = 2 * cfg.stage_specs[si].channels;
            let c_out = cfg.fusion_channels[level];
            fusion.push(FusionLevel {
                conv: normal_conv(rng, std, c_out, c_in, 3, 1, true),
                bn: BatchNorm::new(c_out),
            });
            heads.push(HeadPair {
                loc: normal_conv(rng, std, 4 * r, c_out, 3, 1, true),
                cls: normal_conv(rng, std, 2 * r, c_out, 3, 1, true),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            rgb_stages,
            thermal_stages,
            ha,
            fusion,
            heads,
        })
    }

    /// Pyramid level shapes for a given image size.
    pub fn pyramid_shapes(&self, img_h: usize, img_w: usize) -> Vec<(usize, usize)> {
        self.cfg
            .pyramid_strides()
            .iter()
            .map(|&s| (img_h / s, img_w / s))
            .collect()
    }

    /// All anchors for a given image size, in head output order.
    pub fn anchors(&self, img_h: usize, img_w: usize) -> Result<Vec<BBox>> {
        generate_anchors(
            &self.pyramid_shapes(img_h, img_w),
            &self.cfg.pyramid_strides(),
            &self.cfg.anchors,
            img_h,
            img_w,
        )
    }

    fn validate_inputs(
        &self,
        rgb: &Array4<f64>,
        thermal: &Array4<f64>,
        m_rgb: &[ModalityMask],
        m_thermal: &[ModalityMask],
    ) -> Result<(usize, usize, usize)> {
        let (b, c_rgb, h, w) = rgb.dim();
        let (bt, c_th, ht, wt) = thermal.dim();
        if c_rgb != 3 || c_th != 1 {
            return Err(Error::validation("expected 3-channel rgb and 1-channel thermal"));
        }
        if b != bt || h != ht || w != wt {
            return Err(Error::validation(format!(
                "modality shapes differ: rgb {b}x3x{h}x{w}, thermal {bt}x1x{ht}x{wt}"
            )));
        }
        let stride = self.cfg.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::validation(format!(
                "image {h}x{w} not divisible by total stride {stride}"
            )));
        }
        if m_rgb.len() != b || m_thermal.len() != b {
            return Err(Error::validation("one mask per modality per batch item"));
        }
        for m in m_rgb.iter().chain(m_thermal) {
            if m.h() != h || m.w() != w {
                return Err(Error::validation("masks must be at image resolution"));
            }
        }
        Ok((b, h, w))
    }

    fn downsample_masks(
        masks: &[ModalityMask],
        h: usize,
        w: usize,
    ) -> Result<Vec<ModalityMask>> {
        masks.iter().map(|m| downsample_mask(m, h, w)).collect()
    }
}

/// Per-level raw head outputs: loc (B,4R,H,W) and cls logits (B,2R,H,W).
pub struct HeadOutputs {
    pub loc: Vec<Array4<f64>>,
    pub cls: Vec<Array4<f64>>,
}

pub struct TrainCache {
    rgb_stages: Vec<Vec<UnitCache>>,
    thermal_stages: Vec<Vec<UnitCache>>,
    ha: Option<HaCache>,
    /// Post-ReLU fused maps plus layer caches per level.
    fusion: Vec<(Conv2dCache, BnCache, Array4<f64>)>,
    heads: Vec<(Conv2dCache, Conv2dCache)>,
    /// Stage output shapes per branch, for gradient accumulation.
    feat_shapes: Vec<(usize, usize, usize, usize)>,
}

impl DetectorModel {
    fn stage_forward_train(
        stage: &mut Stage,
        x: &Array4<f64>,
    ) -> Result<(Array4<f64>, Vec<UnitCache>)> {
        let mut caches = Vec::with_capacity(stage.units.len());
        let mut cur = x.clone();
        for unit in &mut stage.units {
            let (y, c) = unit.forward_train(&cur)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    fn stage_backward(
        stage: &Stage,
        caches: &[UnitCache],
        dy: &Array4<f64>,
        prefix: &str,
        grads: &mut ParamGrads,
    ) -> Array4<f64> {
        let mut d = dy.clone();
        for (ui, (unit, cache)) in stage.units.iter().zip(caches).enumerate().rev() {
            let (dx, dw, dgamma, dbeta) = unit.backward(cache, &d);
            grads.insert(format!("{prefix}.unit{ui}.conv.weight"), dw.into_dyn());
            grads.insert(format!("{prefix}.unit{ui}.bn.gamma"), dgamma.into_dyn());
            grads.insert(format!("{prefix}.unit{ui}.bn.beta"), dbeta.into_dyn());
            d = dx;
        }
        d
    }

    /// Training forward. Masks are given at image resolution; the attention
    /// module consumes them downsampled to its feature resolution.
    pub fn forward_train(
        &mut self,
        rgb: &Array4<f64>,
        thermal: &Array4<f64>,
        m_rgb: &[ModalityMask],
        m_thermal: &[ModalityMask],
    ) -> Result<(HeadOutputs, TrainCache)> {
        self.validate_inputs(rgb, thermal, m_rgb, m_thermal)?;
        let n_stages = self.cfg.num_stages();
        let mut rgb_caches = Vec::with_capacity(n_stages);
        let mut th_caches = Vec::with_capacity(n_stages);
        let mut feats_rgb: Vec<Array4<f64>> = Vec::with_capacity(n_stages);
        let mut feats_th: Vec<Array4<f64>> = Vec::with_capacity(n_stages);

        let (f1_rgb, c) = Self::stage_forward_train(&mut self.rgb_stages[0], rgb)?;
        rgb_caches.push(c);
        let (f1_th, c) = Self::stage_forward_train(&mut self.thermal_stages[0], thermal)?;
        th_caches.push(c);

        let (h1, w1) = (f1_rgb.dim().2, f1_rgb.dim().3);
        let ha_cache;
        let (e_rgb, e_th) = if let Some(params) = &self.ha {
            let m1_rgb = Self::downsample_masks(m_rgb, h1, w1)?;
            let m1_th = Self::downsample_masks(m_thermal, h1, w1)?;
            let ((er, et), cache) =
                hybrid_attention_train(&f1_rgb, &f1_th, &m1_rgb, &m1_th, params)?;
            ha_cache = Some(cache);
            (er, et)
        } else {
            ha_cache = None;
            (f1_rgb, f1_th)
        };
        feats_rgb.push(e_rgb);
        feats_th.push(e_th);

        for si in 1..n_stages {
            let (y, c) = Self::stage_forward_train(&mut self.rgb_stages[si], &feats_rgb[si - 1])?;
            rgb_caches.push(c);
            feats_rgb.push(y);
            let (y, c) =
                Self::stage_forward_train(&mut self.thermal_stages[si], &feats_th[si - 1])?;
            th_caches.push(c);
            feats_th.push(y);
        }

        let mut fusion_caches = Vec::new();
        let mut head_caches = Vec::new();
        let mut loc_out = Vec::new();
        let mut cls_out = Vec::new();
        for (level, si) in self.cfg.fusion_stage_indices().enumerate() {
            let concat = concat_channels(&feats_rgb[si], &feats_th[si]);
            let fl = &mut self.fusion[level];
            let (z, conv_cache) = fl.conv.forward(&concat)?;
            let (nrm, bn_cache) = fl.bn.forward_train(&z)?;
            let fused = relu_forward(&nrm);
            let (loc, loc_cache) = self.heads[level].loc.forward(&fused)?;
            let (cls, cls_cache) = self.heads[level].cls.forward(&fused)?;
            fusion_caches.push((conv_cache, bn_cache, fused));
            head_caches.push((loc_cache, cls_cache));
            loc_out.push(loc);
            cls_out.push(cls);
        }

        let feat_shapes = feats_rgb.iter().map(|f| f.dim()).collect();
        Ok((
            HeadOutputs {
                loc: loc_out,
                cls: cls_out,
            },
            TrainCache {
                rgb_stages: rgb_caches,
                thermal_stages: th_caches,
                ha: ha_cache,
                fusion: fusion_caches,
                heads: head_caches,
                feat_shapes,
            },
        ))
    }

    /// Backward pass from per-level head-output gradients to parameter
    /// gradients, keyed by the same names the visitor reports.
    pub fn backward(
        &self,
        cache: &TrainCache,
        d_loc: &[Array4<f64>],
        d_cls: &[Array4<f64>],
    ) -> ParamGrads {
        let mut grads = ParamGrads::new();
        let n_stages = self.cfg.num_stages();
        let mut d_feats_rgb: Vec<Array4<f64>> = cache
            .feat_shapes
            .iter()
            .map(|&sh| Array4::zeros(sh))
            .collect();
        let mut d_feats_th = d_feats_rgb.clone();

        for (level, si) in self.cfg.fusion_stage_indices().enumerate() {
            let (loc_cache, cls_cache) = &cache.heads[level];
            let (dx_loc, dw, db) = self.heads[level].loc.backward(loc_cache, &d_loc[level]);
            grads.insert(format!("head{level}.loc.weight"), dw.into_dyn());
            grads.insert(
                format!("head{level}.loc.bias"),
                db.expect("head convs carry bias").into_dyn(),
            );
            let (dx_cls, dw, db) = self.heads[level].cls.backward(cls_cache, &d_cls[level]);
            grads.insert(format!("head{level}.cls.weight"), dw.into_dyn());
            grads.insert(
                format!("head{level}.cls.bias"),
                db.expect("head convs carry bias").into_dyn(),
            );
            let d_fused = dx_loc + dx_cls;
            let (conv_cache, bn_cache, fused) = &cache.fusion[level];
            let dn = relu_backward(fused, &d_fused);
            let (dz, dgamma, dbeta) = self.fusion[level].bn.backward(bn_cache, &dn);
            grads.insert(format!("fusion{level}.bn.gamma"), dgamma.into_dyn());
            grads.insert(format!("fusion{level}.bn.beta"), dbeta.into_dyn());
            let (d_concat, dw, db) = self.fusion[level].conv.backward(conv_cache, &dz);
            grads.insert(format!("fusion{level}.conv.weight"), dw.into_dyn());
            grads.insert(
                format!("fusion{level}.conv.bias"),
                db.expect("fusion convs carry bias").into_dyn(),
            );
            let c_rgb = cache.feat_shapes[si].1;
            d_feats_rgb[si] += &d_concat.slice(s![.., ..c_rgb, .., ..]);
            d_feats_th[si] += &d_concat.slice(s![.., c_rgb.., .., ..]);
        }

        for si in (1..n_stages).rev() {
            let d = Self::stage_backward(
                &self.rgb_stages[si],
                &cache.rgb_stages[si],
                &d_feats_rgb[si],
                &format!("rgb.stage{si}"),
                &mut grads,
            );
            d_feats_rgb[si - 1] += &d;
            let d = Self::stage_backward(
                &self.thermal_stages[si],
                &cache.thermal_stages[si],
                &d_feats_th[si],
                &format!("thermal.stage{si}"),
                &mut grads,
            );
            d_feats_th[si - 1] += &d;
        }

        let (d_f1_rgb, d_f1_th) = if let (Some(params), Some(ha_cache)) = (&self.ha, &cache.ha) {
            let (dr, dt, hg) =
                hybrid_attention_backward(ha_cache, params, &d_feats_rgb[0], &d_feats_th[0]);
            grads.insert("ha.wq_rgb".into(), hg.dwq_rgb.into_dyn());
            grads.insert("ha.wk_rgb".into(), hg.dwk_rgb.into_dyn());
            grads.insert("ha.wv_rgb".into(), hg.dwv_rgb.into_dyn());
            grads.insert("ha.wq_thermal".into(), hg.dwq_thermal.into_dyn());
            grads.insert("ha.wk_thermal".into(), hg.dwk_thermal.into_dyn());
            grads.insert("ha.wv_thermal".into(), hg.dwv_thermal.into_dyn());
            (dr, dt)
        } else {
            (d_feats_rgb[0].clone(), d_feats_th[0].clone())
        };

        Self::stage_backward(
            &self.rgb_stages[0],
            &cache.rgb_stages[0],
            &d_f1_rgb,
            "rgb.stage0",
            &mut grads,
        );
        Self::stage_backward(
            &self.thermal_stages[0],
            &cache.thermal_stages[0],
            &d_f1_th,
            "thermal.stage0",
            &mut grads,
        );
        grads
    }

    fn stage_forward_eval(stage: &Stage, x: &Array4<f64>) -> Result<Array4<f64>> {
        let mut cur = x.clone();
        for unit in &stage.units {
            cur = unit.forward_eval(&cur)?;
        }
        Ok(cur)
    }

    /// Inference forward producing the fused pyramid (largest level first).
    pub fn forward_features_eval(
        &self,
        rgb: &Array4<f64>,
        thermal: &Array4<f64>,
        m_rgb: &[ModalityMask],
        m_thermal: &[ModalityMask],
    ) -> Result<Vec<Array4<f64>>> {
        self.validate_inputs(rgb, thermal, m_rgb, m_thermal)?;
        let n_stages = self.cfg.num_stages();
        let f1_rgb = Self::stage_forward_eval(&self.rgb_stages[0], rgb)?;
        let f1_th = Self::stage_forward_eval(&self.thermal_stages[0], thermal)?;
        let (h1, w1) = (f1_rgb.dim().2, f1_rgb.dim().3);
        let (mut cur_rgb, mut cur_th) = if let Some(params) = &self.ha {
            let m1_rgb = Self::downsample_masks(m_rgb, h1, w1)?;
            let m1_th = Self::downsample_masks(m_thermal, h1, w1)?;
            hybrid_attention(&f1_rgb, &f1_th, &m1_rgb, &m1_th, params)?
        } else {
            (f1_rgb, f1_th)
        };
        let mut fused = Vec::new();
        let fusion_range = self.cfg.fusion_stage_indices();
        for si in 1..n_stages {
            if fusion_range.contains(&(si - 1)) {
                let level = si - 1 - fusion_range.start;
                fused.push(self.fuse_eval(level, &cur_rgb, &cur_th)?);
            }
            cur_rgb = Self::stage_forward_eval(&self.rgb_stages[si], &cur_rgb)?;
            cur_th = Self::stage_forward_eval(&self.thermal_stages[si], &cur_th)?;
        }
        let level = n_stages - 1 - fusion_range.start;
        fused.push(self.fuse_eval(level, &cur_rgb, &cur_th)?);
        Ok(fused)
    }

    fn fuse_eval(&self, level: usize, f_rgb: &Array4<f64>, f_th: &Array4<f64>) -> Result<Array4<f64>> {
        let concat = concat_channels(f_rgb, f_th);
        let fl = &self.fusion[level];
        Ok(relu_forward(&fl.bn.forward_eval(&fl.conv.forward_eval(&concat)?)?))
    }

    /// Inference head outputs for a fused pyramid.
    pub fn predict_maps(&self, pyramid: &[Array4<f64>]) -> Result<HeadOutputs> {
        if pyramid.len() != self.heads.len() {
            return Err(Error::validation(format!(
                "pyramid has {} levels, heads expect {}",
                pyramid.len(),
                self.heads.len()
            )));
        }
        let mut loc = Vec::new();
        let mut cls = Vec::new();
        for (level, f) in pyramid.iter().enumerate() {
            loc.push(self.heads[level].loc.forward_eval(f)?);
            cls.push(self.heads[level].cls.forward_eval(f)?);
        }
        Ok(HeadOutputs { loc, cls })
    }

    /// Full detection pipeline for a batch: eval forward, per-anchor decode,
    /// score floor, NMS. Returns one detection list per batch item.
    pub fn detect(
        &self,
        rgb: &Array4<f64>,
        thermal: &Array4<f64>,
        m_rgb: &[ModalityMask],
        m_thermal: &[ModalityMask],
        eval_cfg: &EvalConfig,
    ) -> Result<Vec<Vec<Detection>>> {
        eval_cfg.validate()?;
        let (b, _, h, w) = rgb.dim();
        let pyramid = self.forward_features_eval(rgb, thermal, m_rgb, m_thermal)?;
        let outputs = self.predict_maps(&pyramid)?;
        let anchors = self.anchors(h, w)?;
        let r = self.cfg.anchors.anchors_per_cell();
        let mut all = Vec::with_capacity(b);
        for bi in 0..b {
            let (loc, logits) = flatten_head_outputs(&outputs, bi, r);
            let mut dets = Vec::new();
            for (ai, anchor) in anchors.iter().enumerate() {
                let score_rgb = sigmoid(logits[[ai, 0]]);
                let score_thermal = sigmoid(logits[[ai, 1]]);
                if score_rgb.max(score_thermal) < eval_cfg.score_floor {
                    continue;
                }
                let off = [loc[[ai, 0]], loc[[ai, 1]], loc[[ai, 2]], loc[[ai, 3]]];
                let Ok(bbox) = decode_box(&off, anchor) else {
                    continue;
                };
                let bbox = bbox.clip(h, w);
                if !bbox.is_valid() {
                    continue;
                }
                dets.push(Detection {
                    bbox,
                    score_rgb,
                    score_thermal,
                });
            }
            all.push(nms(&dets, eval_cfg.nms_iou, eval_cfg.top_k));
        }
        Ok(all)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel-axis concat into a freshly allocated standard-layout array (the
/// conv kernels require contiguous input).
fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (ba, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut out = Array4::zeros((ba, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Flattens per-level head maps into per-anchor rows for one batch item, in
/// anchor order (level → row → column → ratio).
pub fn flatten_head_outputs(
    outputs: &HeadOutputs,
    bi: usize,
    ratios: usize,
) -> (Array2<f64>, Array2<f64>) {
    let total: usize = outputs
        .loc
        .iter()
        .map(|l| l.dim().2 * l.dim().3 * ratios)
        .sum();
    let mut loc = Array2::zeros((total, 4));
    let mut cls = Array2::zeros((total, 2));
    let mut a = 0;
    for (lmap, cmap) in outputs.loc.iter().zip(&outputs.cls) {
        let (_, _, hl, wl) = lmap.dim();
        for y in 0..hl {
            for x in 0..wl {
                for r in 0..ratios {
                    for k in 0..4 {
                        loc[[a, k]] = lmap[[bi, r * 4 + k, y, x]];
                    }
                    cls[[a, 0]] = cmap[[bi, r * 2, y, x]];
                    cls[[a, 1]] = cmap[[bi, r * 2 + 1, y, x]];
                    a += 1;
                }
            }
        }
    }
    (loc, cls)
}

/// Scatters per-anchor gradient rows back into per-level head-output maps,
/// accumulating into `d_loc`/`d_cls` at batch item `bi`.
pub fn scatter_head_gradients(
    d_loc_flat: &Array2<f64>,
    d_cls_flat: &Array2<f64>,
    d_loc: &mut [Array4<f64>],
    d_cls: &mut [Array4<f64>],
    bi: usize,
    ratios: usize,
) {
    let mut a = 0;
    for (lmap, cmap) in d_loc.iter_mut().zip(d_cls.iter_mut()) {
        let (_, _, hl, wl) = lmap.dim();
        for y in 0..hl {
            for x in 0..wl {
                for r in 0..ratios {
                    for k in 0..4 {
                        lmap[[bi, r * 4 + k, y, x]] += d_loc_flat[[a, k]];
                    }
                    cmap[[bi, r * 2, y, x]] += d_cls_flat[[a, 0]];
                    cmap[[bi, r * 2 + 1, y, x]] += d_cls_flat[[a, 1]];
                    a += 1;
                }
            }
        }
    }
}

impl DetectorModel {
    /// Calls `f` for every named tensor: trainable parameters and batch-norm
    /// running buffers. Order is stable and matches `visit_mut`.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, Tensor<'_>)) {
        let visit_unit = |name: &str, u: &ConvUnit, f: &mut dyn FnMut(&str, ParamKind, Tensor<'_>)| {
            f(&format!("{name}.conv.weight"), ParamKind::Param, Tensor::A4(&u.conv.weight));
            f(&format!("{name}.bn.gamma"), ParamKind::Param, Tensor::A1(&u.bn.gamma));
            f(&format!("{name}.bn.beta"), ParamKind::Param, Tensor::A1(&u.bn.beta));
            f(&format!("{name}.bn.running_mean"), ParamKind::Buffer, Tensor::A1(&u.bn.running_mean));
            f(&format!("{name}.bn.running_var"), ParamKind::Buffer, Tensor::A1(&u.bn.running_var));
        };
        for (branch, stages) in [("rgb", &self.rgb_stages), ("thermal", &self.thermal_stages)] {
            for (si, stage) in stages.iter().enumerate() {
                for (ui, unit) in stage.units.iter().enumerate() {
                    visit_unit(&format!("{branch}.stage{si}.unit{ui}"), unit, f);
                }
            }
        }
        if let Some(ha) = &self.ha {
            for (name, w) in ha.named() {
                f(&format!("ha.{name}"), ParamKind::Param, Tensor::A2(w));
            }
        }
        for (level, fl) in self.fusion.iter().enumerate() {
            f(&format!("fusion{level}.conv.weight"), ParamKind::Param, Tensor::A4(&fl.conv.weight));
            f(
                &format!("fusion{level}.conv.bias"),
                ParamKind::Param,
                Tensor::A1(fl.conv.bias.as_ref().expect("fusion convs carry bias")),
            );
            f(&format!("fusion{level}.bn.gamma"), ParamKind::Param, Tensor::A1(&fl.bn.gamma));
            f(&format!("fusion{level}.bn.beta"), ParamKind::Param, Tensor::A1(&fl.bn.beta));
            f(&format!("fusion{level}.bn.running_mean"), ParamKind::Buffer, Tensor::A1(&fl.bn.running_mean));
            f(&format!("fusion{level}.bn.running_var"), ParamKind::Buffer, Tensor::A1(&fl.bn.running_var));
        }
        for (level, hp) in self.heads.iter().enumerate() {
            for (kind, conv) in [("loc", &hp.loc), ("cls", &hp.cls)] {
                f(&format!("head{level}.{kind}.weight"), ParamKind::Param, Tensor::A4(&conv.weight));
                f(
                    &format!("head{level}.{kind}.bias"),
                    ParamKind::Param,
                    Tensor::A1(conv.bias.as_ref().expect("head convs carry bias")),
                );
            }
        }
    }

    /// Mutable variant of [`visit`], same names and order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, TensorMut<'_>)) {
        let visit_unit =
            |name: &str, u: &mut ConvUnit, f: &mut dyn FnMut(&str, ParamKind, TensorMut<'_>)| {
                f(&format!("{name}.conv.weight"), ParamKind::Param, TensorMut::A4(&mut u.conv.weight));
                f(&format!("{name}.bn.gamma"), ParamKind::Param, TensorMut::A1(&mut u.bn.gamma));
                f(&format!("{name}.bn.beta"), ParamKind::Param, TensorMut::A1(&mut u.bn.beta));
                f(
                    &format!("{name}.bn.running_mean"),
                    ParamKind::Buffer,
                    TensorMut::A1(&mut u.bn.running_mean),
                );
                f(
                    &format!("{name}.bn.running_var"),
                    ParamKind::Buffer,
                    TensorMut::A1(&mut u.bn.running_var),
                );
            };
        for (branch, stages) in [
            ("rgb", &mut self.rgb_stages),
            ("thermal", &mut self.thermal_stages),
        ] {
            for (si, stage) in stages.iter_mut().enumerate() {
                for (ui, unit) in stage.units.iter_mut().enumerate() {
                    visit_unit(&format!("{branch}.stage{si}.unit{ui}"), unit, f);
                }
            }
        }
        if let Some(ha) = &mut self.ha {
            for (name, w) in [
                ("wq_rgb", &mut ha.wq_rgb),
                ("wk_rgb", &mut ha.wk_rgb),
                ("wv_rgb", &mut ha.wv_rgb),
                ("wq_thermal", &mut ha.wq_thermal),
                ("wk_thermal", &mut ha.wk_thermal),
                ("wv_thermal", &mut ha.wv_thermal),
            ] {
                f(&format!("ha.{name}"), ParamKind::Param, TensorMut::A2(w));
            }
        }
        for (level, fl) in self.fusion.iter_mut().enumerate() {
            f(&format!("fusion{level}.conv.weight"), ParamKind::Param, TensorMut::A4(&mut fl.conv.weight));
            f(
                &format!("fusion{level}.conv.bias"),
                ParamKind::Param,
                TensorMut::A1(fl.conv.bias.as_mut().expect("fusion convs carry bias")),
            );
            f(&format!("fusion{level}.bn.gamma"), ParamKind::Param, TensorMut::A1(&mut fl.bn.gamma));
            f(&format!("fusion{level}.bn.beta"), ParamKind::Param, TensorMut::A1(&mut fl.bn.beta));
            f(
                &format!("fusion{level}.bn.running_mean"),
                ParamKind::Buffer,
                TensorMut::A1(&mut fl.bn.running_mean),
            );
            f(
                &format!("fusion{level}.bn.running_var"),
                ParamKind::Buffer,
                TensorMut::A1(&mut fl.bn.running_var),
            );
        }
        for (level, hp) in self.heads.iter_mut().enumerate() {
            for (kind, conv) in [("loc", &mut hp.loc), ("cls", &mut hp.cls)] {
                f(&format!("head{level}.{kind}.weight"), ParamKind::Param, TensorMut::A4(&mut conv.weight));
                f(
                    &format!("head{level}.{kind}.bias"),
                    ParamKind::Param,
                    TensorMut::A1(conv.bias.as_mut().expect("head convs carry bias")),
                );
            }
        }
    }

    /// Snapshot of every named tensor.
    pub fn named_tensors(&self) -> BTreeMap<String, (ParamKind, ArrayD<f64>)> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, kind, t| {
            let arr = match t {
                Tensor::A1(a) => a.clone().into_dyn(),
                Tensor::A2(a) => a.clone().into_dyn(),
                Tensor::A4(a) => a.clone().into_dyn(),
            };
            out.insert(name.to_string(), (kind, arr));
        });
        out
    }
}
