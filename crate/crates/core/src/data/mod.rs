//! Synthetic shape scenes with pixel-accurate joint ground truth: amodal
//! boxes (full shape extent, even under occlusion) and modal class masks
//! (visible pixels, front shape wins). Scenes are deterministic per seed.
//!
//! On disk a dataset is `manifest.json` plus `images/<id>.ppm` (binary P6)
//! and `masks/<id>.pgm` (binary P5, label bytes).

mod pnm;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::error::{CoreError, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Shape classes in label order; class id = index + 1, 0 is background.
pub const SHAPE_NAMES: [&str; 5] = ["rectangle", "disk", "triangle", "diamond", "ring"];

const PALETTE: [[f64; 3]; 5] = [
    [0.85, 0.25, 0.25],
    [0.25, 0.55, 0.90],
    [0.30, 0.80, 0.35],
    [0.90, 0.80, 0.25],
    [0.75, 0.35, 0.85],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rectangle,
    Disk,
    Triangle,
    Diamond,
    Ring,
}

impl Shape {
    fn for_class(class: usize) -> Shape {
        match class {
            1 => Shape::Rectangle,
            2 => Shape::Disk,
            3 => Shape::Triangle,
            4 => Shape::Diamond,
            5 => Shape::Ring,
            _ => unreachable!("class out of range"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Foreground classes, 2..=5; class k uses `SHAPE_NAMES[k-1]`.
    pub num_classes: usize,
    pub max_objects: usize,
    /// Shape half-extent range as a fraction of the shorter image side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// Background noise amplitude around the base gray.
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            height: 64,
            width: 64,
            num_classes: 3,
            max_objects: 4,
            min_size_frac: 0.10,
            max_size_frac: 0.28,
            noise: 0.05,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(CoreError::config("scene size must be at least 16x16"));
        }
        if !(2..=SHAPE_NAMES.len()).contains(&self.num_classes) {
            return Err(CoreError::config(format!(
                "num_classes must be in 2..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            )));
        }
        if self.max_objects == 0 {
            return Err(CoreError::config("max_objects must be positive"));
        }
        if !(self.min_size_frac > 0.0
            && self.min_size_frac <= self.max_size_frac
            && self.max_size_frac <= 0.45)
        {
            return Err(CoreError::config("size fractions must satisfy 0 < min <= max <= 0.45"));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(CoreError::config("noise amplitude must be in [0, 0.2]"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// 1..=K
    pub class: usize,
    /// Amodal box in unit coordinates.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// CHW, 3*h*w values in [0,1].
    pub image: Vec<f64>,
    /// h*w labels in 0..=K (0 = background).
    pub mask: Vec<u8>,
    pub objects: Vec<SceneObject>,
}

fn rasterize(shape: Shape, cx: f64, cy: f64, ex: f64, ey: f64, h: usize, w: usize) -> Vec<usize> {
    let x_lo = (cx - ex - 0.5).floor().max(0.0) as usize;
    let y_lo = (cy - ey - 0.5).floor().max(0.0) as usize;
    let x_hi = ((cx + ex + 0.5).ceil()).min(w as f64 - 1.0) as usize;
    let y_hi = ((cy + ey + 0.5).ceil()).min(h as f64 - 1.0) as usize;
    let inner = 0.55 * ex;
    let mut pixels = Vec::new();
    for y in y_lo..=y_hi {
        let dy = y as f64 + 0.5 - cy;
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let inside = match shape {
                Shape::Rectangle => dx.abs() <= ex && dy.abs() <= ey,
                Shape::Disk => dx * dx + dy * dy <= ex * ex,
                Shape::Triangle => {
                    let t = (dy + ey) / (2.0 * ey);
                    (0.0..=1.0).contains(&t) && dx.abs() <= ex * t
                }
                Shape::Diamond => dx.abs() / ex + dy.abs() / ey <= 1.0,
                Shape::Ring => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= ex * ex && d2 >= inner * inner
                }
            };
            if inside {
                pixels.push(y * w + x);
            }
        }
    }
    pixels
}

struct Placed {
    class: usize,
    pixels: Vec<usize>,
    visible: usize,
    color: [f64; 3],
}

/// Generate one scene. Shapes are placed front-most last; a placement that
/// would leave any shape less than 30% visible is rejected and resampled, and
/// after 100 rejections the scene keeps the objects placed so far (never
/// fewer than one).
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut image = vec![0.0f64; 3 * h * w];
    for v in image.iter_mut() {
        *v = (0.10 + cfg.noise * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0);
    }

    let min_dim = h.min(w) as f64;
    let lo = (cfg.min_size_frac * min_dim).max(3.0);
    let hi = (cfg.max_size_frac * min_dim).max(lo);
    let target = rng.gen_range(1..=cfg.max_objects);

    let mut owner: Vec<usize> = vec![usize::MAX; h * w];
    let mut placed: Vec<Placed> = Vec::new();
    'objects: for _ in 0..target {
        for _attempt in 0..100 {
            let class = rng.gen_range(1..=cfg.num_classes);
            let shape = Shape::for_class(class);
            let ex = rng.gen_range(lo..=hi);
            let ey = match shape {
                Shape::Disk | Shape::Ring => ex,
                _ => rng.gen_range(lo..=hi),
            };
            if 2.0 * ex + 1.0 >= w as f64 || 2.0 * ey + 1.0 >= h as f64 {
                continue;
            }
            let cx = rng.gen_range(ex + 0.5..w as f64 - ex - 0.5);
            let cy = rng.gen_range(ey + 0.5..h as f64 - ey - 0.5);
            let pixels = rasterize(shape, cx, cy, ex, ey, h, w);
            if pixels.is_empty() {
                continue;
            }
            let mut stolen = vec![0usize; placed.len()];
            for &p in &pixels {
                if owner[p] != usize::MAX {
                    stolen[owner[p]] += 1;
                }
            }
            let survives = placed
                .iter()
                .zip(&stolen)
                .all(|(pl, &s)| (pl.visible - s) as f64 >= 0.3 * pl.pixels.len() as f64);
            if !survives {
                continue;
            }
            for (pl, &s) in placed.iter_mut().zip(&stolen) {
                pl.visible -= s;
            }
            let idx = placed.len();
            for &p in &pixels {
                owner[p] = idx;
            }
            let base = PALETTE[class - 1];
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = (base[c] + rng.gen_range(-0.08..=0.08)).clamp(0.15, 1.0);
            }
            let visible = pixels.len();
            placed.push(Placed { class, pixels, visible, color });
            continue 'objects;
        }
        break; // crowded scene: settle for the objects placed so far
    }
    debug_assert!(!placed.is_empty());

    let mut mask = vec![0u8; h * w];
    for (i, pl) in placed.iter().enumerate() {
        for &p in &pl.pixels {
            if owner[p] == i {
                mask[p] = pl.class as u8;
                for c in 0..3 {
                    image[c * h * w + p] = pl.color[c];
                }
            }
        }
    }

    let objects = placed
        .iter()
        .map(|pl| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for &p in &pl.pixels {
                let (y, x) = (p / w, p % w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            SceneObject {
                class: pl.class,
                bbox: BBox::from_corners(
                    x0 as f64 / w as f64,
                    y0 as f64 / h as f64,
                    (x1 + 1) as f64 / w as f64,
                    (y1 + 1) as f64 / h as f64,
                ),
            }
        })
        .collect();

    Ok(SceneSample { id: format!("{seed:016x}"), height: h, width: w, image, mask, objects })
}

/// Generate `count` scenes with per-sample seeds `base_seed + i`.
pub fn generate_dataset(cfg: &GenConfig, count: usize, base_seed: u64) -> Result<Vec<SceneSample>> {
    if count == 0 {
        return Err(CoreError::invalid("dataset must hold at least one sample"));
    }
    (0..count)
        .map(|i| generate_scene(cfg, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Mirror a sample left-to-right (image, mask, and boxes).
pub fn hflip(s: &SceneSample) -> SceneSample {
    let (h, w) = (s.height, s.width);
    let mut image = s.image.clone();
    for c in 0..3 {
        for y in 0..h {
            image[c * h * w + y * w..c * h * w + (y + 1) * w].reverse();
        }
    }
    let mut mask = s.mask.clone();
    for y in 0..h {
        mask[y * w..(y + 1) * w].reverse();
    }
    let objects = s
        .objects
        .iter()
        .map(|o| SceneObject {
            class: o.class,
            bbox: BBox::new(1.0 - o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h),
        })
        .collect();
    SceneSample { id: s.id.clone(), height: h, width: w, image, mask, objects }
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    image: String,
    mask: String,
    objects: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    height: usize,
    width: usize,
    class_names: Vec<String>,
    samples: Vec<ManifestRecord>,
}

#[derive(Debug)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn save_dataset(dir: &Path, samples: &[SceneSample], class_names: &[String]) -> Result<()> {
    if samples.is_empty() {
        return Err(CoreError::invalid("refusing to save an empty dataset"));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != samples.len() {
        return Err(CoreError::invalid("duplicate sample ids"));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(CoreError::invalid("samples disagree on image size"));
        }
        let mut rgb = vec![0u8; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[3 * p + c] = (s.image[c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let image_rel = format!("images/{}.ppm", s.id);
        let mask_rel = format!("masks/{}.pgm", s.id);
        pnm::write_ppm(&dir.join(&image_rel), w, h, &rgb)?;
        pnm::write_pgm(&dir.join(&mask_rel), w, h, &s.mask)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            image: image_rel,
            mask: mask_rel,
            objects: s.objects.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        height: h,
        width: w,
        class_names: class_names.to_vec(),
        samples: records,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CoreError::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::Dataset(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CoreError::Dataset(format!(
            "{}: unsupported manifest version {}",
            manifest_path.display(),
            manifest.version
        )));
    }
    if manifest.samples.is_empty() {
        return Err(CoreError::Dataset(format!("{}: empty dataset", manifest_path.display())));
    }
    let k = manifest.class_names.len();
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let image_path = dir.join(&rec.image);
        let (iw, ih, rgb) = pnm::read_ppm(&image_path)?;
        if (ih, iw) != (h, w) {
            return Err(CoreError::Dataset(format!(
                "{}: image is {iw}x{ih}, manifest says {w}x{h}",
                image_path.display()
            )));
        }
        let mask_path = dir.join(&rec.mask);
        let (mw, mh, mask) = pnm::read_pgm(&mask_path)?;
        if (mh, mw) != (h, w) {
            return Err(CoreError::Dataset(format!(
                "{}: mask is {mw}x{mh}, manifest says {w}x{h}",
                mask_path.display()
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&v| v as usize > k) {
            return Err(CoreError::Dataset(format!(
                "{}: mask label {bad} exceeds {k} classes",
                mask_path.display()
            )));
        }
        if rec.objects.is_empty() {
            return Err(CoreError::Dataset(format!("sample {}: no objects", rec.id)));
        }
        for o in &rec.objects {
            if o.class == 0 || o.class > k {
                return Err(CoreError::Dataset(format!(
                    "sample {}: object class {} out of 1..={k}",
                    rec.id, o.class
                )));
            }
            let (x0, y0, x1, y1) = o.bbox.corners();
            let eps = 1e-9;
            let sane = x0 >= -eps && y0 >= -eps && x1 <= 1.0 + eps && y1 <= 1.0 + eps
                && x0 < x1 && y0 < y1;
            if !sane {
                return Err(CoreError::Dataset(format!(
                    "sample {}: degenerate bbox {:?}",
                    rec.id, o.bbox
                )));
            }
        }
        let mut image = vec![0.0f64; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                image[c * h * w + p] = rgb[3 * p + c] as f64 / 255.0;
            }
        }
        samples.push(SceneSample {
            id: rec.id.clone(),
            height: h,
            width: w,
            image,
            mask,
            objects: rec.objects.clone(),
        });
    }
    Ok(Dataset { height: h, width: w, class_names: manifest.class_names, samples })
}
