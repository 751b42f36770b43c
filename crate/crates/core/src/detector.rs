//! Linear patch scorer trained on the weighted risk, heatmap inference and
//! image/pixel AUROC evaluation.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{Image, ImageError, PixelMask};
use crate::rng;
use crate::synthgen::SynthSample;

pub const DEFAULT_WINDOW: usize = 7;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no gradient signal: no weighted synthetic samples and no normals")]
    EmptyCorpus,
    #[error("{weights} weights for {samples} synthetic samples")]
    WeightLengthMismatch { samples: usize, weights: usize },
    #[error("weight {0} is negative or not finite")]
    InvalidWeight(f64),
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("AUROC needs both classes")]
    SingleClass,
    #[error("{0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Per-pixel anomaly probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean of the highest 1% of values (at least one).
    pub fn top_percent_mean(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        let n = (v.len() / 100).max(1);
        v[..n].iter().sum::<f64>() / n as f64
    }

    /// Probability × 255, rounded, as a grayscale image.
    pub fn to_image(&self) -> Image {
        let data = self.values.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Image::new(self.width, self.height, 1, data).expect("heatmap dims are valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScorer {
    pub window: usize,
    /// Weights over `[window intensities, local mean, local variance]`,
    /// applied after standardization.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl PatchScorer {
    pub fn zeros(window: usize) -> Self {
        let n = feature_len(window);
        Self {
            window,
            weights: vec![0.0; n],
            bias: 0.0,
            feature_mean: vec![0.0; n],
            feature_scale: vec![1.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn logit(&self, raw: &[f64]) -> f64 {
        let mut z = self.bias;
        for i in 0..raw.len() {
            z += self.weights[i] * (raw[i] - self.feature_mean[i]) / self.feature_scale[i];
        }
        z
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn feature_len(window: usize) -> usize {
    window * window + 2
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Channel-averaged intensities in [0, 1].
fn luminance(img: &Image) -> Vec<f64> {
    let c = img.channels();
    img.data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * c as f64))
        .collect()
}

fn pixel_features(lum: &[f64], width: usize, height: usize, window: usize, x: usize, y: usize, out: &mut [f64]) {
    let half = (window / 2) as i64;
    let mut k = 0;
    for dy in -half..=half {
        let yy = reflect(y as i64 + dy, height);
        for dx in -half..=half {
            let xx = reflect(x as i64 + dx, width);
            out[k] = lum[yy * width + xx];
            k += 1;
        }
    }
    let n = k as f64;
    let mean = out[..k].iter().sum::<f64>() / n;
    let var = out[..k].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    out[k] = mean;
    out[k + 1] = var;
}

fn check_size(img: &Image, window: usize) -> Result<(), DetectorError> {
    if img.width() < window || img.height() < window {
        return Err(DetectorError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            window,
        });
    }
    Ok(())
}

pub fn infer(scorer: &PatchScorer, img: &Image) -> Result<Heatmap, DetectorError> {
    check_size(img, scorer.window)?;
    let (w, h) = (img.width(), img.height());
    let lum = luminance(img);
    let mut f = vec![0.0; feature_len(scorer.window)];
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            pixel_features(&lum, w, h, scorer.window, x, y, &mut f);
            values.push(sigmoid(scorer.logit(&f)));
        }
    }
    Ok(Heatmap {
        width: w,
        height: h,
        values,
    })
}

/// Raw features and labels for a subset of one image's pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl PixelSet {
    /// Features of `pixels` (all when `None`) with labels from `mask`
    /// (all zero when `None`).
    pub fn extract(img: &Image, mask: Option<&PixelMask>, window: usize, pixels: Option<&[usize]>) -> Result<Self, DetectorError> {
        check_size(img, window)?;
        let (w, h) = (img.width(), img.height());
        let lum = luminance(img);
        let all: Vec<usize>;
        let pixels = match pixels {
            Some(p) => p,
            None => {
                all = (0..w * h).collect();
                &all
            }
        };
        let mut features = Vec::with_capacity(pixels.len());
        let mut labels = Vec::with_capacity(pixels.len());
        for &p in pixels {
            let (x, y) = (p % w, p / w);
            let mut f = vec![0.0; feature_len(window)];
            pixel_features(&lum, w, h, window, x, y, &mut f);
            features.push(f);
            labels.push(if mask.is_some_and(|m| m.get(x, y)) { 1.0 } else { 0.0 });
        }
        Ok(Self { features, labels })
    }

    fn mean_bce(&self, scorer: &PatchScorer) -> f64 {
        let mut total = 0.0;
        for (f, &y) in self.features.iter().zip(&self.labels) {
            let z = scorer.logit(f);
            // log(1 + e^z) - y z, stable for either sign of z
            total += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        }
        total / self.labels.len() as f64
    }

    /// Adds `scale · ∇ mean_bce` into `grad` (weights then bias).
    fn accumulate_gradient(&self, scorer: &PatchScorer, scale: f64, grad: &mut [f64]) {
        let n = self.labels.len() as f64;
        let nf = scorer.weights.len();
        for (f, &y) in self.features.iter().zip(&self.labels) {
            let r = scale * (sigmoid(scorer.logit(f)) - y) / n;
            for i in 0..nf {
                grad[i] += r * (f[i] - scorer.feature_mean[i]) / scorer.feature_scale[i];
            }
            grad[nf] += r;
        }
    }
}

/// `Σ_i w_i ℓ_i + Σ_j ℓ_j` over synthetic sets (weighted) and normal sets.
pub fn objective(scorer: &PatchScorer, synthetic: &[PixelSet], weights: &[f64], normals: &[PixelSet]) -> f64 {
    synthetic.iter().zip(weights).map(|(s, w)| w * s.mean_bce(scorer)).sum::<f64>()
        + normals.iter().map(|s| s.mean_bce(scorer)).sum::<f64>()
}

/// Gradient of [`objective`] with respect to `(weights, bias)`.
pub fn gradient(scorer: &PatchScorer, synthetic: &[PixelSet], weights: &[f64], normals: &[PixelSet]) -> Vec<f64> {
    let mut g = vec![0.0; scorer.weights.len() + 1];
    for (s, &w) in synthetic.iter().zip(weights) {
        s.accumulate_gradient(scorer, w, &mut g);
    }
    for s in normals {
        s.accumulate_gradient(scorer, 1.0, &mut g);
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub window: usize,
    /// Pixels drawn per training image, fixed for the whole run.
    pub pixels_per_image: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.2,
            window: DEFAULT_WINDOW,
            pixels_per_image: 512,
            seed: 123,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(DetectorError::InvalidConfig(format!("window {} must be odd", self.window)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DetectorError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.pixels_per_image == 0 {
            return Err(DetectorError::InvalidConfig("pixels_per_image must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub loss_curve: Vec<f64>,
}

impl DetectorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

fn sample_pixels(img: &Image, n: usize, seed: u64) -> Vec<usize> {
    let total = img.width() * img.height();
    let mut g = rng::seeded(seed);
    let mut p = index::sample(&mut g, total, n.min(total)).into_vec();
    p.sort_unstable();
    p
}

/// Per-image SGD on the weighted pixel BCE. Synthetic sample `i` has its
/// step scaled by `weights[i]`; normals are labelled all-zero.
pub fn train_detector(
    synthetic: &[SynthSample],
    weights: &[f64],
    normals: &[Image],
    cfg: &DetectorConfig,
) -> Result<(PatchScorer, DetectorReport), DetectorError> {
    cfg.validate()?;
    if synthetic.len() != weights.len() {
        return Err(DetectorError::WeightLengthMismatch {
            samples: synthetic.len(),
            weights: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(DetectorError::InvalidWeight(w));
    }
    if normals.is_empty() && weights.iter().all(|&w| w == 0.0) {
        return Err(DetectorError::EmptyCorpus);
    }

    let syn_sets = synthetic
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let px = sample_pixels(&s.image, cfg.pixels_per_image, rng::derive_seed(cfg.seed, &[1, i as u64]));
            PixelSet::extract(&s.image, Some(&s.mask), cfg.window, Some(&px))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let normal_sets = normals
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let px = sample_pixels(img, cfg.pixels_per_image, rng::derive_seed(cfg.seed, &[2, i as u64]));
            PixelSet::extract(img, None, cfg.window, Some(&px))
        })
        .collect::<Result<Vec<_>, _>>()?;

    // Standardize on the unweighted pool so the weights only enter the loss.
    let mut scorer = PatchScorer::zeros(cfg.window);
    let nf = scorer.weights.len();
    let rows: Vec<&Vec<f64>> = syn_sets.iter().chain(&normal_sets).flat_map(|s| &s.features).collect();
    let n = rows.len() as f64;
    for i in 0..nf {
        let m = rows.iter().map(|r| r[i]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n;
        scorer.feature_mean[i] = m;
        scorer.feature_scale[i] = if v > 1e-12 { v.sqrt() } else { 1.0 };
    }

    let mut steps: Vec<(bool, usize)> = (0..syn_sets.len()).map(|i| (true, i)).chain((0..normal_sets.len()).map(|j| (false, j))).collect();
    let mut g = rng::seeded(cfg.seed);
    let mut report = DetectorReport::default();
    let mut grad = vec![0.0; nf + 1];
    for epoch in 0..cfg.epochs {
        // Linear decay to zero so the last epochs settle near the optimum.
        let lr = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64);
        steps.shuffle(&mut g);
        for &(is_syn, i) in &steps {
            let (set, w) = if is_syn { (&syn_sets[i], weights[i]) } else { (&normal_sets[i], 1.0) };
            if w == 0.0 {
                continue;
            }
            grad.iter_mut().for_each(|v| *v = 0.0);
            set.accumulate_gradient(&scorer, w, &mut grad);
            for k in 0..nf {
                scorer.weights[k] -= lr * grad[k];
            }
            scorer.bias -= lr * grad[nf];
        }
        let total = syn_sets.len() + normal_sets.len();
        report.loss_curve.push(objective(&scorer, &syn_sets, weights, &normal_sets) / total as f64);
    }
    Ok((scorer, report))
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, DetectorError> {
    if scores.len() != labels.len() {
        return Err(DetectorError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DetectorError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps midranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += midrank2 * pos_in_tie;
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos as u128) * (n_pos as u128 + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageAggregation {
    #[default]
    Max,
    TopPercentMean,
}

impl ImageAggregation {
    pub fn apply(self, h: &Heatmap) -> f64 {
        match self {
            ImageAggregation::Max => h.max(),
            ImageAggregation::TopPercentMean => h.top_percent_mean(),
        }
    }
}

/// Held-out image with its ground truth; an empty mask marks a normal image.
#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    pub category: String,
    pub image: Image,
    pub mask: PixelMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub per_category: Vec<CategoryResult>,
}

impl EvalResult {
    /// One row per category plus an `all` row; undefined AUROCs are blank.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("category,image_auroc,pixel_auroc\n");
        for c in &self.per_category {
            s.push_str(&format!("{},{},{}\n", c.category, cell(c.image_auroc), cell(c.pixel_auroc)));
        }
        s.push_str(&format!("all,{:.6},{:.6}\n", self.image_auroc, self.pixel_auroc));
        s
    }
}

struct Scored {
    category: String,
    image_score: f64,
    anomalous: bool,
    pixel_scores: Vec<f64>,
    pixel_labels: Vec<bool>,
}

fn pooled(items: &[&Scored]) -> (Result<f64, DetectorError>, Result<f64, DetectorError>) {
    let img_scores: Vec<f64> = items.iter().map(|s| s.image_score).collect();
    let img_labels: Vec<bool> = items.iter().map(|s| s.anomalous).collect();
    let px_scores: Vec<f64> = items.iter().flat_map(|s| s.pixel_scores.iter().copied()).collect();
    let px_labels: Vec<bool> = items.iter().flat_map(|s| s.pixel_labels.iter().copied()).collect();
    (auroc(&img_scores, &img_labels), auroc(&px_scores, &px_labels))
}

pub fn evaluate(scorer: &PatchScorer, test: &[TestItem], aggregation: ImageAggregation) -> Result<EvalResult, DetectorError> {
    let scored = test
        .par_iter()
        .map(|t| {
            if !t.mask.matches(&t.image) {
                return Err(DetectorError::Image(ImageError::InvalidDimensions {
                    width: t.mask.width(),
                    height: t.mask.height(),
                    channels: t.image.channels(),
                }));
            }
            let heat = infer(scorer, &t.image)?;
            Ok(Scored {
                category: t.category.clone(),
                image_score: aggregation.apply(&heat),
                anomalous: !t.mask.is_empty(),
                pixel_scores: heat.values,
                pixel_labels: t.mask.data().iter().map(|&b| b != 0).collect(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<&Scored> = scored.iter().collect();
    let (image_auroc, pixel_auroc) = pooled(&all);
    let mut categories: Vec<&str> = scored.iter().map(|s| s.category.as_str()).collect();
    categories.sort_unstable();
    categories.dedup();
    let per_category = categories
        .into_iter()
        .map(|c| {
            let subset: Vec<&Scored> = scored.iter().filter(|s| s.category == c).collect();
            let (i, p) = pooled(&subset);
            CategoryResult {
                category: c.to_string(),
                image_auroc: i.ok(),
                pixel_auroc: p.ok(),
            }
        })
        .collect();
    Ok(EvalResult {
        image_auroc: image_auroc?,
        pixel_auroc: pixel_auroc?,
        per_category,
    })
}
