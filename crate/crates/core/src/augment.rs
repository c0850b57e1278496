//! Training-time masking augmentation plus the baseline flip/jitter/crop
//! pre-step. Masking events follow the policy probabilities exactly while
//! guaranteeing that no pixel is ever masked in both modalities.

use crate::boxes::BBox;
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::mask::ModalityMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts augmentation invocations; evaluation paths must leave it untouched.
static INVOCATIONS: AtomicU64 = AtomicU64::new(0);

pub fn augmentation_invocations() -> u64 {
    INVOCATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub p_full_rgb: f64,
    pub p_full_thermal: f64,
    pub p_patch_rgb: f64,
    pub p_patch_thermal: f64,
    /// Patch side lengths as fractions of the image dimensions.
    pub patch_min_frac: f64,
    pub patch_max_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            p_full_rgb: 0.10,
            p_full_thermal: 0.10,
            p_patch_rgb: 0.10,
            p_patch_thermal: 0.10,
            patch_min_frac: 0.2,
            patch_max_frac: 0.5,
        }
    }
}

impl MaskingPolicy {
    pub fn disabled() -> Self {
        Self {
            p_full_rgb: 0.0,
            p_full_thermal: 0.0,
            p_patch_rgb: 0.0,
            p_patch_thermal: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [
            self.p_full_rgb,
            self.p_full_thermal,
            self.p_patch_rgb,
            self.p_patch_thermal,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation("masking probabilities must lie in [0,1]"));
            }
        }
        if self.p_full_rgb + self.p_full_thermal > 1.0 {
            return Err(Error::validation(
                "full-masking probabilities must sum to at most 1 (events are exclusive)",
            ));
        }
        let open = 1.0 - self.p_full_rgb - self.p_full_thermal;
        if self.p_patch_rgb > open || self.p_patch_thermal > open {
            return Err(Error::validation(
                "patch probability exceeds the share of draws without a full-masking event",
            ));
        }
        if !(self.patch_min_frac > 0.0
            && self.patch_min_frac <= self.patch_max_frac
            && self.patch_max_frac < 1.0)
        {
            return Err(Error::validation("patch fraction range invalid"));
        }
        Ok(())
    }

    fn any_active(&self) -> bool {
        self.p_full_rgb > 0.0
            || self.p_full_thermal > 0.0
            || self.p_patch_rgb > 0.0
            || self.p_patch_thermal > 0.0
    }
}

/// Integer pixel rectangle [y0,y1)×[x0,x1).
#[derive(Debug, Clone, Copy)]
struct PatchRect {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl PatchRect {
    fn intersects(&self, o: &PatchRect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

fn sample_patch(rng: &mut ChaCha8Rng, policy: &MaskingPolicy, h: usize, w: usize) -> PatchRect {
    let ph = ((rng.gen_range(policy.patch_min_frac..=policy.patch_max_frac) * h as f64) as usize)
        .clamp(1, h - 1);
    let pw = ((rng.gen_range(policy.patch_min_frac..=policy.patch_max_frac) * w as f64) as usize)
        .clamp(1, w - 1);
    let y0 = rng.gen_range(0..=h - ph);
    let x0 = rng.gen_range(0..=w - pw);
    PatchRect {
        y0,
        y1: y0 + ph,
        x0,
        x1: x0 + pw,
    }
}

fn mask_without(h: usize, w: usize, hole: Option<PatchRect>) -> ModalityMask {
    match hole {
        None => ModalityMask::ones(h, w),
        Some(r) => ModalityMask::from_fn(h, w, |y, x| {
            !(y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1)
        }),
    }
}

/// Draws the per-sample masking events and returns (m_rgb, m_thermal).
///
/// The two full-modality events are carved from one uniform draw, so each
/// keeps its exact marginal probability while never co-occurring. Patch
/// events are drawn only on draws without a full event, with conditional
/// probability p/(1−p_full_rgb−p_full_thermal), which restores their exact
/// marginals; the two patches are rejection-sampled apart (16 tries, then the
/// second patch is skipped) so no pixel loses both modalities.
pub fn sample_training_masks(
    rng: &mut ChaCha8Rng,
    policy: &MaskingPolicy,
    h: usize,
    w: usize,
) -> Result<(ModalityMask, ModalityMask)> {
    policy.validate()?;
    if h < 2 || w < 2 {
        return Err(Error::validation("masking needs at least a 2x2 image"));
    }
    INVOCATIONS.fetch_add(1, Ordering::Relaxed);
    if !policy.any_active() {
        return Ok((ModalityMask::ones(h, w), ModalityMask::ones(h, w)));
    }
    let u: f64 = rng.gen();
    if u < policy.p_full_rgb {
        return Ok((ModalityMask::zeros(h, w), ModalityMask::ones(h, w)));
    }
    if u >= 1.0 - policy.p_full_thermal {
        return Ok((ModalityMask::ones(h, w), ModalityMask::zeros(h, w)));
    }
    let open = 1.0 - policy.p_full_rgb - policy.p_full_thermal;
    let rgb_patch = if rng.gen::<f64>() < policy.p_patch_rgb / open {
        Some(sample_patch(rng, policy, h, w))
    } else {
        None
    };
    let thermal_patch = if rng.gen::<f64>() < policy.p_patch_thermal / open {
        let mut found = None;
        for _ in 0..16 {
            let cand = sample_patch(rng, policy, h, w);
            if rgb_patch.map_or(true, |r| !cand.intersects(&r)) {
                found = Some(cand);
                break;
            }
        }
        found // still None after 16 tries → event skipped
    } else {
        None
    };
    Ok((
        mask_without(h, w, rgb_patch),
        mask_without(h, w, thermal_patch),
    ))
}

/// Zeroes each modality's pixels where its mask is 0.
pub fn apply_masks(
    pair: &ScenePair,
    m_rgb: &ModalityMask,
    m_thermal: &ModalityMask,
) -> Result<ScenePair> {
    let (h, w) = (pair.height(), pair.width());
    if m_rgb.h() != h || m_rgb.w() != w || m_thermal.h() != h || m_thermal.w() != w {
        return Err(Error::validation(format!(
            "mask dims do not match image {h}x{w}"
        )));
    }
    let mut out = pair.clone();
    out.zero_rgb_where(m_rgb);
    out.zero_thermal_where(m_thermal);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineAugment {
    pub hflip_prob: f64,
    /// Brightness scale drawn from [1−jitter, 1+jitter], shared by both
    /// modalities so they stay photometrically aligned.
    pub brightness_jitter: f64,
    pub crop_prob: f64,
    /// Cropped window size as a fraction of each dimension; the window is
    /// resized back to the original size (nearest neighbor).
    pub crop_min_frac: f64,
}

impl Default for BaselineAugment {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            brightness_jitter: 0.15,
            crop_prob: 0.0,
            crop_min_frac: 0.8,
        }
    }
}

impl BaselineAugment {
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            brightness_jitter: 0.0,
            crop_prob: 0.0,
            crop_min_frac: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.crop_prob) {
            return Err(Error::validation("augmentation probabilities must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::validation("brightness jitter must lie in [0,1)"));
        }
        if !(0.1..=1.0).contains(&self.crop_min_frac) {
            return Err(Error::validation("crop fraction must lie in [0.1,1]"));
        }
        Ok(())
    }
}

fn scale_u8(v: u8, s: f64) -> u8 {
    (f64::from(v) * s).clamp(0.0, 255.0) as u8
}

/// Applies the baseline augmentations identically to both modalities and
/// transforms the boxes to match.
pub fn apply_baseline(
    rng: &mut ChaCha8Rng,
    cfg: &BaselineAugment,
    pair: &ScenePair,
) -> Result<ScenePair> {
    cfg.validate()?;
    INVOCATIONS.fetch_add(1, Ordering::Relaxed);
    let mut out = pair.clone();
    let (h, w) = (pair.height(), pair.width());

    if rng.gen::<f64>() < cfg.hflip_prob {
        let mut rgb = out.rgb.clone();
        for ((y, x, c), v) in out.rgb.indexed_iter() {
            rgb[[y, w - 1 - x, c]] = *v;
        }
        let mut th = out.thermal.clone();
        for ((y, x), v) in out.thermal.indexed_iter() {
            th[[y, w - 1 - x]] = *v;
        }
        out.rgb = rgb;
        out.thermal = th;
        for g in &mut out.gts {
            let (x0, x1) = (g.bbox.x_min, g.bbox.x_max);
            g.bbox.x_min = w as f64 - x1;
            g.bbox.x_max = w as f64 - x0;
        }
    }

    if cfg.brightness_jitter > 0.0 {
        let s = rng.gen_range(1.0 - cfg.brightness_jitter..=1.0 + cfg.brightness_jitter);
        out.rgb.mapv_inplace(|v| scale_u8(v, s));
        out.thermal.mapv_inplace(|v| scale_u8(v, s));
    }

    if rng.gen::<f64>() < cfg.crop_prob {
        let fh = rng.gen_range(cfg.crop_min_frac..=1.0);
        let fw = rng.gen_range(cfg.crop_min_frac..=1.0);
        let ch = ((fh * h as f64) as usize).clamp(2, h);
        let cw = ((fw * w as f64) as usize).clamp(2, w);
        let oy = rng.gen_range(0..=h - ch);
        let ox = rng.gen_range(0..=w - cw);
        let sy = ch as f64 / h as f64;
        let sx = cw as f64 / w as f64;
        let mut rgb = out.rgb.clone();
        let mut th = out.thermal.clone();
        for y in 0..h {
            let src_y = oy + ((y as f64 * sy) as usize).min(ch - 1);
            for x in 0..w {
                let src_x = ox + ((x as f64 * sx) as usize).min(cw - 1);
                for c in 0..3 {
                    rgb[[y, x, c]] = out.rgb[[src_y, src_x, c]];
                }
                th[[y, x]] = out.thermal[[src_y, src_x]];
            }
        }
        out.rgb = rgb;
        out.thermal = th;
        let mut kept = Vec::new();
        for g in &out.gts {
            let b = BBox {
                x_min: (g.bbox.x_min - ox as f64) / sx,
                y_min: (g.bbox.y_min - oy as f64) / sy,
                x_max: (g.bbox.x_max - ox as f64) / sx,
                y_max: (g.bbox.y_max - oy as f64) / sy,
            }
            .clip(h, w);
            if b.width() >= 2.0 && b.height() >= 2.0 {
                kept.push(crate::boxes::GroundTruth { bbox: b, ..*g });
            }
        }
        out.gts = kept;
    }

    Ok(out)
}
