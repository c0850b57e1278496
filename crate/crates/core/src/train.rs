//! SGD training loop and scenario evaluation. Training consumes a generated
//! dataset, applies baseline and masking augmentation with per-sample seeded
//! streams, and checkpoints whenever the validation miss rate improves. The
//! returned metrics come from the reloaded best checkpoint, so they are
//! exactly reproducible from the file alone.

use crate::augment::{
    apply_baseline, apply_masks, sample_training_masks, BaselineAugment, MaskingPolicy,
};
use crate::blackout::{apply_scenario, Scenario};
use crate::boxes::Detection;
use crate::ckpt::{load_model, save_model};
use crate::config::{EvalConfig, ModelConfig, TrainConfig};
use crate::data::{load_scene, scene_to_inputs, Dataset, DayNight, ScenePair};
use crate::error::{Error, Result};
use crate::evalmr::{
    apply_height_filter, log_average_miss_rate, match_image, miss_rate_curve, ImageEval, MRCurve,
};
use crate::head::match_anchors;
use crate::loss::{bbox_loss, build_targets, multilabel_loss, total_loss};
use crate::model::{
    flatten_head_outputs, scatter_head_gradients, DetectorModel, ParamGrads, ParamKind, TensorMut,
};
use crate::rng::stream_rng;
use ndarray::{s, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// IoU at or above which an anchor is assigned to a ground truth during
/// training.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Serialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub l_bbox: f64,
    pub l_multilabel: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochVal {
    pub epoch: usize,
    pub val_mr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<StepLoss>,
    pub val_history: Vec<EpochVal>,
    /// Validation miss rate of the reloaded best checkpoint.
    pub best_val_mr: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn preload(dataset: &Dataset, split: &str) -> Result<Vec<ScenePair>> {
    dataset
        .manifest
        .split(split)?
        .iter()
        .map(|id| load_scene(&dataset.root, id))
        .collect()
}

/// One SGD step with momentum and decoupled-from-nothing weight decay folded
/// into the gradient (v = m·v − lr·(g + wd·p); p += v).
fn sgd_step(
    model: &mut DetectorModel,
    grads: &ParamGrads,
    velocity: &mut BTreeMap<String, ArrayD<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |name, kind, tensor| {
        if kind != ParamKind::Param || err.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else {
            err = Some(Error::validation(format!("no gradient for parameter {name}")));
            return;
        };
        let mut update = |p: &mut dyn Iterator<Item = &mut f64>| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            for ((pv, gv), vv) in p.zip(g.iter()).zip(v.iter_mut()) {
                *vv = momentum * *vv - lr * (gv + weight_decay * *pv);
                *pv += *vv;
            }
        };
        match tensor {
            TensorMut::A1(a) => update(&mut a.iter_mut()),
            TensorMut::A2(a) => update(&mut a.iter_mut()),
            TensorMut::A4(a) => update(&mut a.iter_mut()),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Log-average miss rate of `model` over `scenes` under one blackout
/// scenario.
pub fn mr_on_scenes(
    model: &DetectorModel,
    scenes: &[ScenePair],
    scenario: Scenario,
    eval_cfg: &EvalConfig,
) -> Result<f64> {
    let mut evals = Vec::with_capacity(scenes.len());
    for pair in scenes {
        evals.push(eval_one(model, pair, scenario, eval_cfg)?.1);
    }
    Ok(log_average_miss_rate(&miss_rate_curve(&evals)?))
}

fn eval_one(
    model: &DetectorModel,
    pair: &ScenePair,
    scenario: Scenario,
    eval_cfg: &EvalConfig,
) -> Result<(Vec<Detection>, ImageEval)> {
    let (masked, m_rgb, m_thermal) = apply_scenario(pair, scenario)?;
    let (rgb, thermal) = scene_to_inputs(&masked);
    let mut dets = model.detect(&rgb, &thermal, &[m_rgb], &[m_thermal], eval_cfg)?;
    let dets = dets.pop().expect("batch of one");
    let gts = apply_height_filter(&pair.gts, eval_cfg.min_height);
    let eval = match_image(&dets, &gts, eval_cfg.iou_thresh);
    Ok((dets, eval))
}

pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    masking: &MaskingPolicy,
    baseline: &BaselineAugment,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    masking.validate()?;
    baseline.validate()?;
    eval_cfg.validate()?;
    let train_scenes = preload(dataset, "train")?;
    let val_scenes = preload(dataset, "val")?;
    if train_scenes.is_empty() {
        return Err(Error::validation("training needs a non-empty train split"));
    }
    if val_scenes.is_empty() {
        return Err(Error::validation(
            "training needs a non-empty val split for checkpoint selection",
        ));
    }
    let (h, w) = (train_scenes[0].height(), train_scenes[0].width());
    let stride = model_cfg.total_stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::validation(format!(
            "scene size {h}x{w} not divisible by model stride {stride}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model = DetectorModel::init(model_cfg, &mut stream_rng(train_cfg.seed, "init", 0))?;
    let anchors = model.anchors(h, w)?;
    let ratios = model_cfg.anchors.anchors_per_cell();
    let n = train_scenes.len();
    let mut velocity: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut history = Vec::new();
    let mut val_history = Vec::new();
    let ckpt_path = out_dir.join("best.ckpt");
    let mut best_mr = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..train_cfg.epochs {
        epochs_run = epoch + 1;
        let lr = train_cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut orng = stream_rng(train_cfg.seed, "order", epoch as u64);
        shuffle(&mut order, &mut orng);

        for (step, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let bsz = chunk.len();
            let mut rgb = Array4::zeros((bsz, 3, h, w));
            let mut thermal = Array4::zeros((bsz, 1, h, w));
            let mut masks_rgb = Vec::with_capacity(bsz);
            let mut masks_thermal = Vec::with_capacity(bsz);
            let mut batch_gts = Vec::with_capacity(bsz);
            for (bi, &idx) in chunk.iter().enumerate() {
                let sample_key = (epoch * n + idx) as u64;
                let mut brng = stream_rng(train_cfg.seed, "baseaug", sample_key);
                let augmented = apply_baseline(&mut brng, baseline, &train_scenes[idx])?;
                let mut mrng = stream_rng(train_cfg.seed, "maskaug", sample_key);
                let (m_rgb, m_th) = sample_training_masks(&mut mrng, masking, h, w)?;
                let masked = apply_masks(&augmented, &m_rgb, &m_th)?;
                let (r, t) = scene_to_inputs(&masked);
                rgb.slice_mut(s![bi..bi + 1, .., .., ..]).assign(&r);
                thermal.slice_mut(s![bi..bi + 1, .., .., ..]).assign(&t);
                masks_rgb.push(m_rgb);
                masks_thermal.push(m_th);
                batch_gts.push(augmented.gts);
            }

            let (outputs, cache) =
                model.forward_train(&rgb, &thermal, &masks_rgb, &masks_thermal)?;
            let mut d_loc: Vec<Array4<f64>> =
                outputs.loc.iter().map(|l| Array4::zeros(l.dim())).collect();
            let mut d_cls: Vec<Array4<f64>> =
                outputs.cls.iter().map(|l| Array4::zeros(l.dim())).collect();
            let mut l_bbox_sum = 0.0;
            let mut l_ml_sum = 0.0;
            let inv_b = 1.0 / bsz as f64;
            for bi in 0..bsz {
                let (loc_flat, cls_flat) = flatten_head_outputs(&outputs, bi, ratios);
                let assignment = match_anchors(&anchors, &batch_gts[bi], MATCH_IOU);
                let targets = build_targets(
                    &anchors,
                    &assignment,
                    &batch_gts[bi],
                    &masks_rgb[bi],
                    &masks_thermal[bi],
                )?;
                let (lb, mut glb) = bbox_loss(&loc_flat, &targets.loc, &targets.positive)?;
                let (lm, mut glm) = multilabel_loss(&cls_flat, &targets.cls, targets.n_pos)?;
                glb.mapv_inplace(|v| v * inv_b);
                glm.mapv_inplace(|v| v * train_cfg.lambda * inv_b);
                scatter_head_gradients(&glb, &glm, &mut d_loc, &mut d_cls, bi, ratios);
                l_bbox_sum += lb;
                l_ml_sum += lm;
            }
            let breakdown =
                total_loss(l_bbox_sum * inv_b, l_ml_sum * inv_b, train_cfg.lambda)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let grads = model.backward(&cache, &d_loc, &d_cls);
            sgd_step(
                &mut model,
                &grads,
                &mut velocity,
                lr,
                train_cfg.momentum,
                train_cfg.weight_decay,
            )?;
            history.push(StepLoss {
                epoch,
                step,
                l_bbox: breakdown.l_bbox,
                l_multilabel: breakdown.l_multilabel,
                total: breakdown.total,
                lr,
            });
        }

        let val_mr = mr_on_scenes(&model, &val_scenes, Scenario::Dual, eval_cfg)?;
        val_history.push(EpochVal { epoch, val_mr });
        if val_mr < best_mr {
            best_mr = val_mr;
            best_epoch = epoch;
            save_model(&model, &ckpt_path)?;
        }
        if epoch - best_epoch >= train_cfg.patience {
            break;
        }
    }

    write_history(&history, &out_dir.join("history.csv"))?;

    let reloaded = load_model(&ckpt_path)?;
    let best_val_mr = mr_on_scenes(&reloaded, &val_scenes, Scenario::Dual, eval_cfg)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        history,
        val_history,
        best_val_mr,
        best_epoch,
        epochs_run,
    })
}

/// Fisher–Yates with draws from the epoch's order stream.
fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn write_history(history: &[StepLoss], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::from("epoch,step,l_bbox,l_multilabel,total,lr\n");
    for s in history {
        buf.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.epoch, s.step, s.l_bbox, s.l_multilabel, s.total, s.lr
        ));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Day,
    Night,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::Day, Subset::Night];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Day => "day",
            Subset::Night => "night",
        }
    }

    fn admits(self, tag: DayNight) -> bool {
        match self {
            Subset::All => true,
            Subset::Day => tag == DayNight::Day,
            Subset::Night => tag == DayNight::Night,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrCell {
    pub scenario: Scenario,
    pub subset: Subset,
    pub mr: f64,
    pub curve: MRCurve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrTable {
    pub split: String,
    pub cells: Vec<MrCell>,
}

impl MrTable {
    pub fn get(&self, scenario: Scenario, subset: Subset) -> Option<&MrCell> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.subset == subset)
    }
}

/// Evaluates a model over a split for each scenario, reporting the
/// log-average miss rate for the whole split and for the day and night
/// subsets. Scenes stream from disk one at a time. Subsets without any
/// usable ground truth are omitted (the full-split cells are always present).
pub fn evaluate_scenarios(
    model: &DetectorModel,
    dataset: &Dataset,
    split: &str,
    scenarios: &[Scenario],
    eval_cfg: &EvalConfig,
) -> Result<MrTable> {
    eval_cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::validation("no scenarios requested"));
    }
    let ids = dataset.manifest.split(split)?;
    if ids.is_empty() {
        return Err(Error::validation(format!("split {split} is empty")));
    }
    let mut per_scenario: BTreeMap<usize, Vec<(DayNight, ImageEval)>> = BTreeMap::new();
    for id in ids {
        let pair = load_scene(&dataset.root, id)?;
        for (si, &scenario) in scenarios.iter().enumerate() {
            let (_, eval) = eval_one(model, &pair, scenario, eval_cfg)?;
            per_scenario.entry(si).or_default().push((pair.meta.tag, eval));
        }
    }
    let mut cells = Vec::new();
    for (si, &scenario) in scenarios.iter().enumerate() {
        let evals = &per_scenario[&si];
        for subset in Subset::ALL {
            let subset_evals: Vec<ImageEval> = evals
                .iter()
                .filter(|(tag, _)| subset.admits(*tag))
                .map(|(_, e)| e.clone())
                .collect();
            let has_gt = subset_evals.iter().any(|e| e.n_gt > 0);
            if subset == Subset::All {
                let curve = miss_rate_curve(&subset_evals)?;
                let mr = log_average_miss_rate(&curve);
                cells.push(MrCell { scenario, subset, mr, curve });
            } else if !subset_evals.is_empty() && has_gt {
                let curve = miss_rate_curve(&subset_evals)?;
                let mr = log_average_miss_rate(&curve);
                cells.push(MrCell { scenario, subset, mr, curve });
            }
        }
    }
    Ok(MrTable {
        split: split.to_string(),
        cells,
    })
}

/// Detections for every scene of a split under one scenario, keyed by scene
/// id. Used by the CLI to export raw results.
pub fn detections_for_split(
    model: &DetectorModel,
    dataset: &Dataset,
    split: &str,
    scenario: Scenario,
    eval_cfg: &EvalConfig,
) -> Result<Vec<(String, Vec<Detection>)>> {
    let ids = dataset.manifest.split(split)?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let pair = load_scene(&dataset.root, id)?;
        let (dets, _) = eval_one(model, &pair, scenario, eval_cfg)?;
        out.push((id.clone(), dets));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageSpec;
    use crate::head::AnchorConfig;

    #[test]
    fn sgd_matches_closed_form_for_two_steps() {
        let cfg = ModelConfig {
            stage_specs: vec![
                StageSpec { channels: 2, stride: 2, depth: 1 },
                StageSpec { channels: 2, stride: 2, depth: 1 },
            ],
            fusion_channels: vec![2, 2],
            use_ha: true,
            anchors: AnchorConfig { scales: vec![4.0, 8.0], ratios: vec![2.0] },
            init_std: 0.1,
        };
        let mut model = DetectorModel::init(&cfg, &mut stream_rng(0, "init", 0)).unwrap();
        let mut grads = ParamGrads::new();
        let mut p0 = None;
        model.visit(&mut |name, kind, t| {
            if kind == ParamKind::Param {
                let shape: Vec<usize> = match t {
                    crate::model::Tensor::A1(a) => a.shape().to_vec(),
                    crate::model::Tensor::A2(a) => {
                        if name == "ha.wq_rgb" {
                            p0 = Some(a[[0, 0]]);
                        }
                        a.shape().to_vec()
                    }
                    crate::model::Tensor::A4(a) => a.shape().to_vec(),
                };
                grads.insert(name.to_string(), ArrayD::ones(shape));
            }
        });
        let p0 = p0.unwrap();
        let (lr, mom, wd) = (0.1, 0.9, 0.01);
        let mut vel = BTreeMap::new();
        sgd_step(&mut model, &grads, &mut vel, lr, mom, wd).unwrap();
        sgd_step(&mut model, &grads, &mut vel, lr, mom, wd).unwrap();
        let v1 = -lr * (1.0 + wd * p0);
        let p1 = p0 + v1;
        let v2 = mom * v1 - lr * (1.0 + wd * p1);
        let expect = p1 + v2;
        let mut got = None;
        model.visit(&mut |name, _, t| {
            if name == "ha.wq_rgb" {
                if let crate::model::Tensor::A2(a) = t {
                    got = Some(a[[0, 0]]);
                }
            }
        });
        assert!((got.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let cfg = ModelConfig {
            stage_specs: vec![
                StageSpec { channels: 2, stride: 2, depth: 1 },
                StageSpec { channels: 2, stride: 2, depth: 1 },
            ],
            fusion_channels: vec![2, 2],
            use_ha: false,
            anchors: AnchorConfig { scales: vec![4.0, 8.0], ratios: vec![2.0] },
            init_std: 0.1,
        };
        let mut model = DetectorModel::init(&cfg, &mut stream_rng(0, "init", 0)).unwrap();
        let grads = ParamGrads::new();
        let mut vel = BTreeMap::new();
        assert!(sgd_step(&mut model, &grads, &mut vel, 0.1, 0.9, 0.0).is_err());
    }
}
