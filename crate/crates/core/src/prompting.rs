//! Structured defect prompts, their text-side embedding, and the
//! image/mask/prompt triplet builder.
//!
//! A prompt carries the attributes a defect description must mention
//! (type, size, color tone, shape) plus its location. The embedding places
//! those attributes at fixed offsets of a 17-dimensional vector and
//! L2-normalizes it:
//!
//! | slots   | content                          |
//! |---------|----------------------------------|
//! | 0..6    | one-hot defect type              |
//! | 6..9    | one-hot shape                    |
//! | 9       | area fraction                    |
//! | 10..13  | color tone per channel (gray: 10)|
//! | 13..15  | box center (x, y)                |
//! | 15..17  | box extent (width, height)       |
//!
//! The image-side embedding in [`crate::qaw`] measures the same attributes
//! into the same slots, so their cosine is a consistency score.
//!
//! Rendered text follows one template:
//! `"<size word> <tone word> <shape> <type> at (cx, cy) covering p% of the surface"`.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{self, ImageError, PixelMask};
use crate::rng;

pub const EMBED_DIM: usize = 17;
pub const TYPE_SLOTS: std::ops::Range<usize> = 0..6;
pub const SHAPE_SLOTS: std::ops::Range<usize> = 6..9;
pub const SIZE_SLOT: usize = 9;
pub const TONE_SLOTS: std::ops::Range<usize> = 10..13;
pub const CENTER_SLOTS: std::ops::Range<usize> = 13..15;
pub const EXTENT_SLOTS: std::ops::Range<usize> = 15..17;
/// Slots holding continuous attributes.
pub const CONTINUOUS_SLOTS: std::ops::Range<usize> = 9..17;

/// Masks per normal image.
pub const DEFAULT_MASKS_PER_IMAGE: usize = 6;

/// Elongation (principal-axis ratio) at or above which a mask is "elongated".
pub const ELONGATION_THRESHOLD: f64 = 3.0;
/// Box fill ratio at or above which a compact mask is a "blob".
pub const BLOB_FILL_THRESHOLD: f64 = 0.6;
/// Probability that a sampled prompt names the mask's geometric shape class.
const SHAPE_FIDELITY: f64 = 0.8;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("invalid prompt: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectType {
    Scratch,
    Stain,
    Hole,
    Crack,
    Contamination,
    Discoloration,
}

impl DefectType {
    pub const ALL: [DefectType; 6] = [
        DefectType::Scratch,
        DefectType::Stain,
        DefectType::Hole,
        DefectType::Crack,
        DefectType::Contamination,
        DefectType::Discoloration,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 6]
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectType::Scratch => "scratch",
            DefectType::Stain => "stain",
            DefectType::Hole => "hole",
            DefectType::Crack => "crack",
            DefectType::Contamination => "contamination",
            DefectType::Discoloration => "discoloration",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Elongated,
    Blob,
    Irregular,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Elongated, Shape::Blob, Shape::Irregular];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Elongated => "elongated",
            Shape::Blob => "blob",
            Shape::Irregular => "irregular",
        }
    }
}

/// Normalized bounding box; `x1`/`y1` are exclusive edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.x1 - self.x0, self.y1 - self.y0)
    }

    /// Tight box of the mask in normalized coordinates.
    pub fn of_mask(mask: &PixelMask) -> Option<Self> {
        let (x0, y0, x1, y1) = mask.bounding_box()?;
        let (w, h) = (mask.width() as f64, mask.height() as f64);
        Some(Self {
            x0: x0 as f64 / w,
            y0: y0 as f64 / h,
            x1: x1 as f64 / w,
            y1: y1 as f64 / h,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub defect_type: DefectType,
    pub location: BoundingBox,
    pub size: f64,
    /// Signed intensity shift per channel, in units of half the 8-bit range.
    pub color_tone: Vec<f64>,
    pub shape: Shape,
    pub rendered_text: String,
}

impl PromptRecord {
    /// Builds a record and renders its text.
    pub fn new(
        defect_type: DefectType,
        location: BoundingBox,
        size: f64,
        color_tone: Vec<f64>,
        shape: Shape,
    ) -> Result<Self, PromptError> {
        let mut p = Self {
            defect_type,
            location,
            size,
            color_tone,
            shape,
            rendered_text: String::new(),
        };
        p.rendered_text = p.render();
        p.validate()?;
        Ok(p)
    }

    pub fn render(&self) -> String {
        let size_word = match self.size {
            s if s < 0.01 => "tiny",
            s if s < 0.05 => "small",
            s if s < 0.15 => "medium",
            _ => "large",
        };
        let tone = self.color_tone.iter().sum::<f64>() / self.color_tone.len().max(1) as f64;
        let tone_word = if tone > 0.1 {
            "bright"
        } else if tone < -0.1 {
            "dark"
        } else {
            "neutral"
        };
        let (cx, cy) = self.location.center();
        format!(
            "{size_word} {tone_word} {} {} at ({cx:.2}, {cy:.2}) covering {:.1}% of the surface",
            self.shape.name(),
            self.defect_type.name(),
            self.size * 100.0
        )
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let b = &self.location;
        let bad = |m: String| Err(PromptError::Invalid(m));
        if ![b.x0, b.y0, b.x1, b.y1].iter().all(|v| (0.0..=1.0).contains(v)) || !(b.x0 < b.x1 && b.y0 < b.y1) {
            return bad(format!("bad location {b:?}"));
        }
        if !(self.size > 0.0 && self.size <= 1.0) {
            return bad(format!("size {} outside (0, 1]", self.size));
        }
        if self.size > b.area() + 0.05 {
            return bad(format!("size {} exceeds box area {}", self.size, b.area()));
        }
        if !(self.color_tone.len() == 1 || self.color_tone.len() == 3)
            || self.color_tone.iter().any(|t| !(-1.0..=1.0).contains(t))
        {
            return bad(format!("bad color tone {:?}", self.color_tone));
        }
        if self.rendered_text != self.render() {
            return bad("rendered_text does not match attributes".into());
        }
        Ok(())
    }
}

/// Principal-axis ratio of the set pixels (square root of the covariance
/// eigenvalue ratio). A `L × t` bar has elongation `L / t`.
pub fn elongation(mask: &PixelMask) -> f64 {
    let mut n = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                n += 1.0;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    if n == 0.0 {
        return 1.0;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let (dx, dy) = (x as f64 - mx, y as f64 - my);
                cxx += dx * dx;
                cyy += dy * dy;
                cxy += dx * dy;
            }
        }
    }
    // Continuous-pixel correction so single rows/columns have finite extent.
    let (cxx, cyy, cxy) = (cxx / n + 1.0 / 12.0, cyy / n + 1.0 / 12.0, cxy / n);
    let tr = cxx + cyy;
    let disc = ((cxx - cyy).powi(2) + 4.0 * cxy * cxy).sqrt();
    let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    (l1 / l2.max(1e-12)).sqrt()
}

/// Geometric shape class of a mask.
pub fn shape_class(mask: &PixelMask) -> Shape {
    if elongation(mask) >= ELONGATION_THRESHOLD {
        return Shape::Elongated;
    }
    let fill = match mask.bounding_box() {
        Some((x0, y0, x1, y1)) => mask.count() as f64 / ((x1 - x0) * (y1 - y0)) as f64,
        None => 0.0,
    };
    if fill >= BLOB_FILL_THRESHOLD {
        Shape::Blob
    } else {
        Shape::Irregular
    }
}

/// Draws a prompt for `mask`: location and size are measured exactly;
/// type, shape and tone are seeded draws.
pub fn sample_prompt(mask: &PixelMask, channels: usize, seed: u64) -> Result<PromptRecord, PromptError> {
    let location = BoundingBox::of_mask(mask).ok_or(PromptError::EmptyMask)?;
    let mut r = rng::seeded(seed);
    let defect_type = DefectType::from_index(r.gen_range(0..6));
    let geometric = shape_class(mask);
    let shape = if r.gen_bool(SHAPE_FIDELITY) {
        geometric
    } else {
        let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != geometric).collect();
        *others.choose(&mut r).expect("two alternatives")
    };
    let color_tone = (0..channels)
        .map(|_| {
            let magnitude: f64 = r.gen_range(0.2..0.8);
            if r.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    PromptRecord::new(defect_type, location, mask.area_fraction(), color_tone, shape)
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    vector: Vec<f64>,
}

impl PromptEmbedding {
    /// Normalizes `raw`; returns `None` for a zero or non-finite vector.
    pub fn from_raw(raw: &[f64]) -> Option<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm > 0.0 && norm.is_finite()).then(|| Self {
            vector: raw.iter().map(|v| v / norm).collect(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &PromptEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// Un-normalized feature vector in the shared layout.
pub fn prompt_features(p: &PromptRecord) -> [f64; EMBED_DIM] {
    let mut f = [0.0; EMBED_DIM];
    f[TYPE_SLOTS.start + p.defect_type.index()] = 1.0;
    f[SHAPE_SLOTS.start + p.shape.index()] = 1.0;
    f[SIZE_SLOT] = p.size;
    for (slot, t) in TONE_SLOTS.zip(&p.color_tone) {
        f[slot] = *t;
    }
    let (cx, cy) = p.location.center();
    let (ex, ey) = p.location.extent();
    f[CENTER_SLOTS.start] = cx;
    f[CENTER_SLOTS.start + 1] = cy;
    f[EXTENT_SLOTS.start] = ex;
    f[EXTENT_SLOTS.start + 1] = ey;
    f
}

pub fn embed_prompt(p: &PromptRecord) -> PromptEmbedding {
    // Two one-hot blocks keep the norm at least sqrt(2).
    PromptEmbedding::from_raw(&prompt_features(p)).expect("one-hot slots are never zero")
}

/// Largest observed ratio `‖g(u) - g(v)‖ / ‖u - v‖` over perturbations of the
/// continuous slots, where `g` is the normalized embedding.
pub fn measured_lipschitz(records: &[PromptRecord], eps: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for p in records {
        let base = prompt_features(p);
        let g0 = PromptEmbedding::from_raw(&base).expect("nonzero");
        for slot in CONTINUOUS_SLOTS {
            let mut moved = base;
            moved[slot] += eps;
            let g1 = PromptEmbedding::from_raw(&moved).expect("nonzero");
            let d: f64 = g0
                .vector()
                .iter()
                .zip(g1.vector())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d / eps);
        }
    }
    worst
}

/// One image/mask/prompt training triplet. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub image_ref: String,
    pub mask_ref: String,
    pub prompt: PromptRecord,
    pub seed: u64,
}

fn list_netpbm(dir: &Path) -> Result<Vec<PathBuf>, PromptError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    out.sort();
    Ok(out)
}

/// Path of `target` relative to directory `base`.
pub fn relative_path(base: &Path, target: &Path) -> PathBuf {
    let (Ok(base), Ok(target)) = (base.canonicalize(), target.canonicalize()) else {
        return target.to_path_buf();
    };
    let b: Vec<Component> = base.components().collect();
    let t: Vec<Component> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Pairs every normal image with `k` masks from the pool and a seeded
/// prompt per pair. Resized masks are written under `out_dir/masks/` and
/// the manifest to `out_dir/manifest.jsonl`.
///
/// Masks are drawn without replacement when the pool holds at least `k`
/// masks and with replacement otherwise.
pub fn build_triplets(
    normal_dir: &Path,
    mask_pool_dir: &Path,
    out_dir: &Path,
    k: usize,
    seed: u64,
) -> Result<Vec<Triplet>, PromptError> {
    let images = list_netpbm(normal_dir)?;
    let pool = list_netpbm(mask_pool_dir)?;
    if images.is_empty() {
        return Err(PromptError::EmptyCorpus(format!("no images in {}", normal_dir.display())));
    }
    if pool.is_empty() {
        return Err(PromptError::EmptyCorpus(format!("no masks in {}", mask_pool_dir.display())));
    }
    let masks: Vec<PixelMask> = pool.iter().map(imagery::mask_read).collect::<Result<_, _>>()?;
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&mask_dir)?;

    let mut triplets = Vec::with_capacity(images.len() * k);
    for (i, path) in images.iter().enumerate() {
        let img = imagery::read_image(path)?;
        let mut r = rng::seeded(rng::derive_seed(seed, &[i as u64]));
        let picks: Vec<usize> = if masks.len() >= k {
            rand::seq::index::sample(&mut r, masks.len(), k).into_vec()
        } else {
            (0..k).map(|_| r.gen_range(0..masks.len())).collect()
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for (j, &m) in picks.iter().enumerate() {
            let mask = masks[m].resize_nearest(img.width(), img.height())?;
            let tseed = rng::derive_seed(seed, &[i as u64, j as u64]);
            let prompt = sample_prompt(&mask, img.channels(), tseed)?;
            let mask_path = mask_dir.join(format!("{stem}_{j}.pgm"));
            imagery::mask_write(&mask, &mask_path)?;
            triplets.push(Triplet {
                image_ref: path_string(&relative_path(out_dir, path)),
                mask_ref: path_string(&relative_path(out_dir, &mask_path)),
                prompt,
                seed: tseed,
            });
        }
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &triplets)?;
    Ok(triplets)
}

pub fn write_manifest<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PromptError> {
    let mut f = fs::File::create(path)?;
    for row in rows {
        writeln!(f, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

pub fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PromptError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(PromptError::from))
        .collect()
}
