//! Synthetic RGB-thermal scene generation, dataset persistence, and import of
//! KAIST-style text annotations.
//!
//! Pedestrians are tall rectangles with modality-dependent appearance: warm
//! bright bodies in thermal, colored two-tone bodies in RGB. Night scenes
//! darken RGB globally so the day/night split carries signal. Wide warm
//! distractor blobs and color clutter keep the background from being trivial.

use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::mask::ModalityMask;
use crate::rng::stream_rng;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayNight {
    Day,
    Night,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub tag: DayNight,
}

/// A co-registered RGB (H,W,3) + thermal (H,W) pair with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub rgb: Array3<u8>,
    pub thermal: Array2<u8>,
    pub gts: Vec<GroundTruth>,
    pub meta: SceneMeta,
}

impl ScenePair {
    pub fn height(&self) -> usize {
        self.thermal.nrows()
    }

    pub fn width(&self) -> usize {
        self.thermal.ncols()
    }

    pub fn zero_rgb_where(&mut self, mask: &ModalityMask) {
        for ((y, x, _), v) in self.rgb.indexed_iter_mut() {
            if mask.get(y, x) == 0 {
                *v = 0;
            }
        }
    }

    pub fn zero_thermal_where(&mut self, mask: &ModalityMask) {
        for ((y, x), v) in self.thermal.indexed_iter_mut() {
            if mask.get(y, x) == 0 {
                *v = 0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub ped_count_min: usize,
    pub ped_count_max: usize,
    /// Pedestrian pixel heights, sampled uniformly.
    pub ped_height_min: f64,
    pub ped_height_max: f64,
    /// Fraction of pedestrians visible only in thermal / only in RGB;
    /// the remainder is visible in both.
    pub only_thermal_frac: f64,
    pub only_rgb_frac: f64,
    pub night_frac: f64,
    /// Per-pixel uniform noise amplitude, 8-bit units.
    pub rgb_noise: f64,
    pub thermal_noise: f64,
    /// Maximum count of non-pedestrian clutter shapes per modality.
    pub distractors_max: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 320,
            ped_count_min: 1,
            ped_count_max: 4,
            ped_height_min: 64.0,
            ped_height_max: 160.0,
            only_thermal_frac: 0.08,
            only_rgb_frac: 0.08,
            night_frac: 0.4,
            rgb_noise: 12.0,
            thermal_noise: 10.0,
            distractors_max: 3,
            train: 200,
            val: 40,
            test: 60,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("image size must be positive"));
        }
        if self.ped_count_min > self.ped_count_max {
            return Err(Error::validation("pedestrian count range inverted"));
        }
        if !(self.ped_height_min > 0.0 && self.ped_height_max >= self.ped_height_min) {
            return Err(Error::validation("pedestrian height range invalid"));
        }
        if self.ped_height_max >= self.height as f64 {
            return Err(Error::validation(
                "pedestrian height must be below image height",
            ));
        }
        for f in [self.only_thermal_frac, self.only_rgb_frac, self.night_frac] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::validation("fractions must lie in [0,1]"));
            }
        }
        if self.only_thermal_frac + self.only_rgb_frac > 1.0 {
            return Err(Error::validation(
                "single-modality visibility fractions must sum to at most 1",
            ));
        }
        if self.train == 0 {
            return Err(Error::validation("train split must be non-empty"));
        }
        Ok(())
    }

    pub fn total_scenes(&self) -> usize {
        self.train + self.val + self.test
    }
}

fn put_rgb(img: &mut Array3<u8>, y: usize, x: usize, c: [f64; 3]) {
    for (ch, v) in c.iter().enumerate() {
        img[[y, x, ch]] = v.clamp(0.0, 255.0) as u8;
    }
}

fn fill_rect_rgb(img: &mut Array3<u8>, b: &BBox, color: [f64; 3], noise: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (img.dim().0, img.dim().1);
    let y0 = b.y_min.max(0.0) as usize;
    let y1 = (b.y_max.ceil() as usize).min(h);
    let x0 = b.x_min.max(0.0) as usize;
    let x1 = (b.x_max.ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let n: f64 = rng.gen_range(-noise..=noise);
            put_rgb(img, y, x, [color[0] + n, color[1] + n, color[2] + n]);
        }
    }
}

fn fill_rect_thermal(img: &mut Array2<u8>, b: &BBox, level: f64, noise: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = img.dim();
    let y0 = b.y_min.max(0.0) as usize;
    let y1 = (b.y_max.ceil() as usize).min(h);
    let x0 = b.x_min.max(0.0) as usize;
    let x1 = (b.x_max.ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let n: f64 = rng.gen_range(-noise..=noise);
            img[[y, x]] = (level + n).clamp(0.0, 255.0) as u8;
        }
    }
}

/// Generates scene `index` of the dataset described by `cfg`; deterministic in
/// (cfg.seed, index).
pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, "scene", index);
    let (h, w) = (cfg.height, cfg.width);
    let night = rng.gen::<f64>() < cfg.night_frac;

    // Background: smooth per-channel ramp plus noise; darker at night.
    let (lo, hi) = if night { (10.0, 45.0) } else { (60.0, 150.0) };
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(lo..hi));
    let ramp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-25.0..25.0));
    let mut rgb = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64) / (w.max(2) - 1) as f64;
            let n: f64 = rng.gen_range(-cfg.rgb_noise..=cfg.rgb_noise);
            put_rgb(
                &mut rgb,
                y,
                x,
                std::array::from_fn(|c| base[c] + ramp[c] * t + n),
            );
        }
    }
    let th_base = rng.gen_range(25.0..70.0);
    let mut thermal = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let n: f64 = rng.gen_range(-cfg.thermal_noise..=cfg.thermal_noise);
            thermal[[y, x]] = (th_base + n).clamp(0.0, 255.0) as u8;
        }
    }

    // Clutter: wide warm blobs in thermal, colored patches in RGB. Wide, so
    // shape separates them from tall pedestrians.
    let n_distract = rng.gen_range(0..=cfg.distractors_max);
    for _ in 0..n_distract {
        let dw = rng.gen_range(0.12..0.3) * w as f64;
        let dh = dw * rng.gen_range(0.3..0.6);
        let x0 = rng.gen_range(0.0..(w as f64 - dw));
        let y0 = rng.gen_range(0.0..(h as f64 - dh));
        let b = BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + dw,
            y_max: y0 + dh,
        };
        fill_rect_thermal(&mut thermal, &b, rng.gen_range(110.0..190.0), cfg.thermal_noise, &mut rng);
        let bright = if night { 60.0 } else { 190.0 };
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..1.0) * bright);
        fill_rect_rgb(&mut rgb, &b, color, cfg.rgb_noise, &mut rng);
    }

    // Pedestrians.
    let count = rng.gen_range(cfg.ped_count_min..=cfg.ped_count_max);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let ph = rng.gen_range(cfg.ped_height_min..=cfg.ped_height_max);
        let pw = (ph * 0.41).max(2.0);
        if pw >= w as f64 - 2.0 || ph >= h as f64 - 2.0 {
            continue;
        }
        // Keep pedestrians mostly separated so evaluation matching is clean.
        let mut placed = None;
        for _try in 0..10 {
            let x0 = rng.gen_range(1.0..(w as f64 - pw - 1.0));
            let y0 = rng.gen_range(1.0..(h as f64 - ph - 1.0));
            let cand = BBox {
                x_min: x0,
                y_min: y0,
                x_max: x0 + pw,
                y_max: y0 + ph,
            };
            if gts
                .iter()
                .all(|g| crate::boxes::iou(&g.bbox, &cand) < 0.25)
            {
                placed = Some(cand);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        let u: f64 = rng.gen();
        let (visible_rgb, visible_thermal) = if u < cfg.only_thermal_frac {
            (false, true)
        } else if u < cfg.only_thermal_frac + cfg.only_rgb_frac {
            (true, false)
        } else {
            (true, true)
        };
        if visible_thermal {
            let heat = rng.gen_range(185.0..245.0);
            fill_rect_thermal(&mut thermal, &bbox, heat, cfg.thermal_noise, &mut rng);
        }
        if visible_rgb {
            let dim = if night { 0.45 } else { 1.0 };
            let torso: [f64; 3] = std::array::from_fn(|_| rng.gen_range(120.0..250.0) * dim);
            let legs: [f64; 3] = std::array::from_fn(|i| torso[i] * 0.55);
            let split = bbox.y_min + bbox.height() * 0.55;
            let top = BBox {
                y_max: split,
                ..bbox
            };
            let bottom = BBox {
                y_min: split,
                ..bbox
            };
            fill_rect_rgb(&mut rgb, &top, torso, cfg.rgb_noise, &mut rng);
            fill_rect_rgb(&mut rgb, &bottom, legs, cfg.rgb_noise, &mut rng);
        }
        gts.push(GroundTruth {
            bbox,
            visible_rgb,
            visible_thermal,
            is_ignore: false,
        });
    }

    Ok(ScenePair {
        rgb,
        thermal,
        gts,
        meta: SceneMeta {
            id: format!("scene_{index:06}"),
            tag: if night { DayNight::Night } else { DayNight::Day },
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub tags: BTreeMap<String, DayNight>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

/// On-disk layout of one dataset directory.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            root: dir.to_path_buf(),
            manifest: load_manifest(dir)?,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn png_rgb(img: &Array3<u8>) -> Vec<u8> {
    let (h, w, _) = img.dim();
    let buf: Vec<u8> = img.iter().copied().collect();
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        enc,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .expect("in-memory png encode");
    out
}

fn png_gray(img: &Array2<u8>) -> Vec<u8> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().copied().collect();
    let mut out = Vec::new();
    let enc = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        enc,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )
    .expect("in-memory png encode");
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneAnnotation {
    id: String,
    tag: DayNight,
    objects: Vec<GroundTruth>,
}

/// Generates and persists the full dataset: PNG pairs under images/, one JSON
/// Encodes and writes one RGB image.
pub fn write_rgb_png(path: &Path, img: &Array3<u8>) -> Result<()> {
    write_atomic(path, &png_rgb(img))
}

/// Encodes and writes one grayscale image.
pub fn write_gray_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    write_atomic(path, &png_gray(img))
}

/// annotation per scene under ann/, and manifest.json at the root. Returns the
/// manifest. Scene ids are globally indexed so splits are disjoint.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images = out_dir.join("images");
    let ann = out_dir.join("ann");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&ann).map_err(|e| Error::io(&ann, e))?;

    let mut tags = BTreeMap::new();
    let mut ids = Vec::with_capacity(cfg.total_scenes());
    for index in 0..cfg.total_scenes() as u64 {
        let scene = generate_scene(cfg, index)?;
        write_atomic(
            &images.join(format!("{}_rgb.png", scene.meta.id)),
            &png_rgb(&scene.rgb),
        )?;
        write_atomic(
            &images.join(format!("{}_thermal.png", scene.meta.id)),
            &png_gray(&scene.thermal),
        )?;
        let a = SceneAnnotation {
            id: scene.meta.id.clone(),
            tag: scene.meta.tag,
            objects: scene.gts.clone(),
        };
        let path = ann.join(format!("{}.json", scene.meta.id));
        let json = serde_json::to_vec_pretty(&a).expect("annotation serialization");
        write_atomic(&path, &json)?;
        tags.insert(scene.meta.id.clone(), scene.meta.tag);
        ids.push(scene.meta.id);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        train: ids[..cfg.train].to_vec(),
        val: ids[cfg.train..cfg.train + cfg.val].to_vec(),
        test: ids[cfg.train + cfg.val..].to_vec(),
        tags,
    };
    let mpath = out_dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialization");
    write_atomic(&mpath, &json)?;
    Ok(manifest)
}

pub fn load_manifest(dataset_dir: &Path) -> Result<Manifest> {
    let path = dataset_dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path,
        source: e,
    })
}

/// Loads one scene (images + annotations) from a dataset directory.
pub fn load_scene(dataset_dir: &Path, id: &str) -> Result<ScenePair> {
    let apath = dataset_dir.join("ann").join(format!("{id}.json"));
    let bytes = fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
    let ann: SceneAnnotation = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: apath.clone(),
        source: e,
    })?;
    let rpath = dataset_dir.join("images").join(format!("{id}_rgb.png"));
    let rgb_img = image::open(&rpath)
        .map_err(|e| Error::validation(format!("{}: {e}", rpath.display())))?
        .into_rgb8();
    let tpath = dataset_dir.join("images").join(format!("{id}_thermal.png"));
    let th_img = image::open(&tpath)
        .map_err(|e| Error::validation(format!("{}: {e}", tpath.display())))?
        .into_luma8();
    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    if (th_img.width() as usize, th_img.height() as usize) != (w, h) {
        return Err(Error::validation(format!(
            "{id}: rgb and thermal image sizes differ"
        )));
    }
    let rgb = Array3::from_shape_vec((h, w, 3), rgb_img.into_raw()).expect("rgb buffer size");
    let thermal = Array2::from_shape_vec((h, w), th_img.into_raw()).expect("thermal buffer size");
    for g in &ann.objects {
        g.validate()?;
    }
    Ok(ScenePair {
        rgb,
        thermal,
        gts: ann.objects,
        meta: SceneMeta {
            id: ann.id,
            tag: ann.tag,
        },
    })
}

/// Parses a KAIST-style annotation file.
///
/// Grammar, one object per line (header lines starting with `%` or `#` and
/// blank lines are skipped):
///
/// ```text
/// label x y w h [occ] [x_t y_t w_t h_t ...]
/// ```
///
/// Boxes are x,y,w,h in pixels and become corner boxes. Labels other than
/// `person` (`people`, `person?`, `cyclist`) mark crowd or uncertain regions
/// and map to is_ignore, as does heavy occlusion (occ ≥ 2). A nine-field line
/// carries a second, thermal-modality box: per-modality visibility is then
/// zero-area-based per box and the stored box is the visible one (RGB wins
/// when both are present). Plain five/six-field lines are sanitized
/// annotations, visible in both modalities.
pub fn load_kaist_annotations(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line,
                reason: format!("expected at least 5 fields, got {}", fields.len()),
            });
        }
        let label = fields[0];
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line,
                reason: format!("field {} ({:?}) is not numeric", idx + 1, fields[idx]),
            })
        };
        let corner_box = |x: f64, y: f64, w: f64, h: f64| -> Result<Option<BBox>> {
            if w == 0.0 && h == 0.0 {
                return Ok(None); // absent modality box
            }
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line,
                    reason: format!("non-positive box size {w}x{h}"),
                });
            }
            Ok(Some(BBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
            }))
        };
        let rgb_box = corner_box(num(1)?, num(2)?, num(3)?, num(4)?)?;
        let occ = if fields.len() >= 6 { num(5)? } else { 0.0 };
        let thermal_box = if fields.len() >= 10 {
            corner_box(num(6)?, num(7)?, num(8)?, num(9)?)?
        } else {
            None
        };
        let paired = fields.len() >= 10;
        let (bbox, visible_rgb, visible_thermal) = if paired {
            match (rgb_box, thermal_box) {
                (Some(r), t) => (r, true, t.is_some()),
                (None, Some(t)) => (t, false, true),
                (None, None) => {
                    return Err(Error::Parse {
                        file: path.to_path_buf(),
                        line,
                        reason: "both modality boxes are empty".into(),
                    })
                }
            }
        } else {
            let Some(r) = rgb_box else {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line,
                    reason: "zero-size box".into(),
                });
            };
            (r, true, true)
        };
        let label_ignore = matches!(label, "people" | "person?" | "cyclist" | "person-fa");
        let gt = GroundTruth {
            bbox,
            visible_rgb,
            visible_thermal,
            is_ignore: label_ignore || occ >= 2.0,
        };
        gt.validate().map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        out.push(gt);
    }
    Ok(out)
}

/// Normalized f64 model inputs for one scene: rgb (1,3,H,W), thermal (1,1,H,W)
/// in [0,1].
pub fn scene_to_inputs(pair: &ScenePair) -> (ndarray::Array4<f64>, ndarray::Array4<f64>) {
    let (h, w) = (pair.height(), pair.width());
    let mut rgb = ndarray::Array4::zeros((1, 3, h, w));
    for ((y, x, c), &v) in pair.rgb.indexed_iter() {
        rgb[[0, c, y, x]] = f64::from(v) / 255.0;
    }
    let mut th = ndarray::Array4::zeros((1, 1, h, w));
    for ((y, x), &v) in pair.thermal.indexed_iter() {
        th[[0, 0, y, x]] = f64::from(v) / 255.0;
    }
    (rgb, th)
}
