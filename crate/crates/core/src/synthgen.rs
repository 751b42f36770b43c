//! Seeded synthetic corpus: procedural normal textures, anomaly masks and an
//! attribute-faithful defect painter with an optional corruption mode.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{Image, ImageError, PixelMask};
use crate::prompting::{BoundingBox, DefectType, PromptRecord};
use crate::rng;

/// Peak deviation of a painted defect pattern around its tone level.
pub const PATTERN_AMPLITUDE: f64 = 8.0;
/// Intensity change for a unit color tone.
pub const TONE_SCALE: f64 = 127.0;
pub const DEFAULT_INCONSISTENT_FRACTION: f64 = 0.3;
/// Ring width used to measure the local background level.
pub const RING_RADIUS: usize = 3;

/// Lag-1 (horizontal, vertical) autocorrelation of each type's pattern, in
/// [`DefectType::ALL`] order.
pub const TYPE_SIGNATURES: [(f64, f64); 6] = [(1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, 0.0), (0.0, 1.0), (0.0, 0.0)];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask and image dimensions differ")]
    DimensionMismatch,
    #[error("prompt location {prompt:?} does not match mask box {mask:?}")]
    BoxMismatch { prompt: BoundingBox, mask: BoundingBox },
    #[error("prompt has {tones} tones for a {channels}-channel image")]
    ToneMismatch { tones: usize, channels: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Stripes,
    Checker,
    Grain,
    Rings,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [TextureKind::Stripes, TextureKind::Checker, TextureKind::Grain, TextureKind::Rings];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub period: usize,
    pub base: f64,
    /// Half the peak-to-peak swing of the pattern.
    pub contrast: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl TextureSpec {
    pub fn new(kind: TextureKind, width: usize, height: usize, seed: u64) -> Self {
        Self {
            kind,
            width,
            height,
            channels: 1,
            period: 8,
            base: 128.0,
            contrast: 20.0,
            noise_amplitude: 4.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.period < 2 {
            return Err(SynthError::InvalidSpec(format!("period {} < 2", self.period)));
        }
        if !(0.0..=255.0).contains(&self.base) {
            return Err(SynthError::InvalidSpec(format!("base {} outside [0, 255]", self.base)));
        }
        if !(self.contrast >= 0.0 && self.noise_amplitude >= 0.0) {
            return Err(SynthError::InvalidSpec("negative contrast or noise".into()));
        }
        Ok(())
    }
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn gen_texture(spec: &TextureSpec) -> Result<Image, SynthError> {
    spec.validate()?;
    let mut img = Image::filled(spec.width, spec.height, spec.channels, 0)?;
    let mut r = rng::seeded(spec.seed);
    let p = spec.period;
    let (cx, cy) = (r.gen_range(0.0..spec.width as f64), r.gen_range(0.0..spec.height as f64));
    for y in 0..spec.height {
        for x in 0..spec.width {
            let pattern = match spec.kind {
                TextureKind::Stripes => (2.0 * PI * (x % p) as f64 / p as f64).sin(),
                TextureKind::Checker => {
                    if (x / p + y / p) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                TextureKind::Grain => r.gen_range(-1.0..=1.0),
                TextureKind::Rings => {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    (2.0 * PI * d / p as f64).sin()
                }
            };
            for c in 0..spec.channels {
                let noise = if spec.noise_amplitude > 0.0 {
                    r.gen_range(-spec.noise_amplitude..=spec.noise_amplitude)
                } else {
                    0.0
                };
                img.set(x, y, c, to_byte(spec.base + spec.contrast * pattern + noise));
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    Blob,
    Scratch,
}

/// Rasterizes a shape centered on pixel `(0, 0)` into relative offsets.
fn raster(reach: f64, inside: impl Fn(f64, f64) -> bool) -> Vec<(i64, i64)> {
    let n = reach.ceil() as i64 + 1;
    let mut out = Vec::new();
    for dy in -n..=n {
        for dx in -n..=n {
            if inside(dx as f64, dy as f64) {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Area within 10% of `fraction · width · height`, placed at a seeded offset.
pub fn gen_mask(shape: MaskShape, fraction: f64, seed: u64, width: usize, height: usize) -> Result<PixelMask, SynthError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SynthError::InvalidSpec(format!("area fraction {fraction} outside (0, 1)")));
    }
    let target = fraction * (width * height) as f64;
    let mut r = rng::seeded(seed);
    // Shape at scale `s`: returns reach (max radius) and the membership test.
    let build: Box<dyn Fn(f64) -> (f64, Box<dyn Fn(f64, f64) -> bool>)> = match shape {
        MaskShape::Blob => {
            let harmonics: Vec<(f64, f64, f64)> = (2..=4)
                .map(|k| (k as f64, r.gen_range(0.0..0.12), r.gen_range(0.0..2.0 * PI)))
                .collect();
            let lobe = 1.0 + harmonics.iter().map(|h| h.1).sum::<f64>();
            Box::new(move |s: f64| {
                let harmonics = harmonics.clone();
                let test = move |x: f64, y: f64| {
                    let rad = s * (1.0 + harmonics.iter().map(|(k, a, ph)| a * (k * y.atan2(x) + ph).cos()).sum::<f64>());
                    x * x + y * y <= rad * rad
                };
                (s * lobe, Box::new(test) as Box<dyn Fn(f64, f64) -> bool>)
            })
        }
        MaskShape::Scratch => {
            let ratio = r.gen_range(6.0..10.0);
            let theta = r.gen_range(0.0..PI);
            let (c, sn) = (theta.cos(), theta.sin());
            Box::new(move |s: f64| {
                let (half_l, half_t) = (ratio * s / 2.0, s / 2.0);
                let test = move |x: f64, y: f64| (x * c + y * sn).abs() <= half_l && (-x * sn + y * c).abs() <= half_t;
                (half_l + half_t, Box::new(test) as Box<dyn Fn(f64, f64) -> bool>)
            })
        }
    };
    let count = |s: f64| {
        let (reach, test) = build(s);
        raster(reach, test)
    };
    // Bisection on scale; pixel count is monotone in `s` for both shapes.
    let (mut lo, mut hi) = (0.5, 1.0);
    while (count(hi).len() as f64) < target {
        hi *= 2.0;
        if hi > 4.0 * (width.max(height) as f64) {
            return Err(SynthError::InvalidSpec("area target unreachable".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if (count(mid).len() as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [lo, hi]
        .into_iter()
        .map(count)
        .min_by(|a, b| (a.len() as f64 - target).abs().total_cmp(&(b.len() as f64 - target).abs()))
        .expect("two candidates");
    if ((best.len() as f64 - target) / target).abs() > 0.1 {
        return Err(SynthError::InvalidSpec(format!("cannot rasterize {} pixels at this size", target)));
    }
    let (minx, maxx) = (best.iter().map(|p| p.0).min().unwrap(), best.iter().map(|p| p.0).max().unwrap());
    let (miny, maxy) = (best.iter().map(|p| p.1).min().unwrap(), best.iter().map(|p| p.1).max().unwrap());
    let (span_x, span_y) = (maxx - minx + 1, maxy - miny + 1);
    if span_x > width as i64 || span_y > height as i64 {
        return Err(SynthError::InvalidSpec("shape does not fit the image".into()));
    }
    let ox = r.gen_range(0..=width as i64 - span_x) - minx;
    let oy = r.gen_range(0..=height as i64 - span_y) - miny;
    let mut mask = PixelMask::empty(width, height)?;
    for (dx, dy) in best {
        mask.set((dx + ox) as usize, (dy + oy) as usize, true);
    }
    Ok(mask)
}

/// Zero-mean ±1 texture of a defect type at absolute pixel `(x, y)`.
pub fn type_pattern(t: DefectType, x: usize, y: usize) -> f64 {
    let on = match t {
        DefectType::Scratch => y % 2 == 0,
        DefectType::Stain => x % 2 == 0,
        DefectType::Hole => (x + y) % 2 == 0,
        DefectType::Crack => (y / 2) % 2 == 0,
        DefectType::Contamination => (x / 2) % 2 == 0,
        DefectType::Discoloration => (x / 2 + y / 2) % 2 == 0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    WrongType,
    WrongColor,
    CollapsedTexture,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 3] = [CorruptionMode::WrongType, CorruptionMode::WrongColor, CorruptionMode::CollapsedTexture];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPolicy {
    pub inconsistent_fraction: f64,
    pub modes: Vec<CorruptionMode>,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        Self::new(DEFAULT_INCONSISTENT_FRACTION)
    }
}

impl CorruptionPolicy {
    pub fn new(inconsistent_fraction: f64) -> Self {
        Self {
            inconsistent_fraction,
            modes: CorruptionMode::ALL.to_vec(),
        }
    }

    pub fn faithful() -> Self {
        Self::new(0.0)
    }

    pub fn only(mode: CorruptionMode, inconsistent_fraction: f64) -> Self {
        Self {
            inconsistent_fraction,
            modes: vec![mode],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.inconsistent_fraction) {
            return Err(SynthError::InvalidSpec(format!("λ = {} outside [0, 1]", self.inconsistent_fraction)));
        }
        if self.inconsistent_fraction > 0.0 && self.modes.is_empty() {
            return Err(SynthError::InvalidSpec("corruption requested with no modes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub mask: PixelMask,
    pub prompt: PromptRecord,
    pub seed: u64,
    pub corruption: Option<CorruptionMode>,
}

/// Per-channel background level around the mask.
fn ring_level(img: &Image, mask: &PixelMask) -> Vec<f64> {
    let ring = mask.ring(RING_RADIUS);
    img.channel_means(|x, y| ring.get(x, y))
        .or_else(|| img.channel_means(|_, _| true))
        .expect("image is nonempty")
}

fn check_inputs(img: &Image, mask: &PixelMask, prompt: &PromptRecord) -> Result<(), SynthError> {
    if !mask.matches(img) {
        return Err(SynthError::DimensionMismatch);
    }
    let bb = BoundingBox::of_mask(mask).ok_or(SynthError::EmptyMask)?;
    let p = prompt.location;
    if [p.x0 - bb.x0, p.y0 - bb.y0, p.x1 - bb.x1, p.y1 - bb.y1].iter().any(|d| d.abs() > 1e-9) {
        return Err(SynthError::BoxMismatch { prompt: p, mask: bb });
    }
    if prompt.color_tone.len() != img.channels() {
        return Err(SynthError::ToneMismatch {
            tones: prompt.color_tone.len(),
            channels: img.channels(),
        });
    }
    Ok(())
}

/// Fills the masked pixels with `level + tone · 127 + A · pattern(type)`.
fn fill_region(img: &mut Image, mask: &PixelMask, level: &[f64], tone: &[f64], pattern: Option<DefectType>) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !mask.get(x, y) {
                continue;
            }
            let texture = pattern.map_or(0.0, |t| PATTERN_AMPLITUDE * type_pattern(t, x, y));
            for c in 0..img.channels() {
                img.set(x, y, c, to_byte(level[c] + tone[c] * TONE_SCALE + texture));
            }
        }
    }
}

/// Re-renders the masked region of `img` in a prompt-inconsistent way.
/// Pixels outside the mask are untouched.
pub fn corrupt_region(
    img: &Image,
    mask: &PixelMask,
    prompt: &PromptRecord,
    mode: CorruptionMode,
    seed: u64,
) -> Result<Image, SynthError> {
    check_inputs(img, mask, prompt)?;
    let mut out = img.clone();
    let level = ring_level(img, mask);
    let mut r = rng::seeded(seed);
    match mode {
        CorruptionMode::WrongType => {
            let others: Vec<DefectType> = DefectType::ALL.into_iter().filter(|&t| t != prompt.defect_type).collect();
            let t = *others.choose(&mut r).expect("five alternatives");
            fill_region(&mut out, mask, &level, &prompt.color_tone, Some(t));
        }
        CorruptionMode::WrongColor => {
            let flipped: Vec<f64> = prompt.color_tone.iter().map(|&t| if t >= 0.0 { t - 1.0 } else { t + 1.0 }).collect();
            fill_region(&mut out, mask, &level, &flipped, Some(prompt.defect_type));
        }
        CorruptionMode::CollapsedTexture => {
            fill_region(&mut out, mask, &level, &vec![0.0; img.channels()], None);
        }
    }
    Ok(out)
}

/// Paints the defect described by `prompt` into the masked region. With
/// probability λ the pixels are rendered by a corruption mode instead,
/// leaving the prompt as it was.
pub fn paint_defect(
    img: &Image,
    mask: &PixelMask,
    prompt: &PromptRecord,
    policy: &CorruptionPolicy,
    seed: u64,
) -> Result<SynthSample, SynthError> {
    policy.validate()?;
    check_inputs(img, mask, prompt)?;
    let mut r = rng::seeded(seed);
    let corruption = if r.gen_bool(policy.inconsistent_fraction) {
        Some(*policy.modes.choose(&mut r).expect("validated"))
    } else {
        None
    };
    let image = match corruption {
        Some(mode) => corrupt_region(img, mask, prompt, mode, r.gen())?,
        None => {
            let mut out = img.clone();
            fill_region(&mut out, mask, &ring_level(img, mask), &prompt.color_tone, Some(prompt.defect_type));
            out
        }
    };
    Ok(SynthSample {
        image,
        mask: mask.clone(),
        prompt: prompt.clone(),
        seed,
        corruption,
    })
}
