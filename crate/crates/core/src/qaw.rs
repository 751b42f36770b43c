//! Quality-aware weighting of synthetic samples.
//!
//! A sample's consistency score is the cosine between an image-side
//! embedding, measured from the edited pixels inside its mask, and the
//! prompt embedding. Scores pass through an increasing calibration `φ` and
//! are divided by their batch mean, so the weights of every batch average
//! exactly one.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{Image, PixelMask};
use crate::prompting::{
    self, embed_prompt, BoundingBox, PromptEmbedding, PromptRecord, CENTER_SLOTS, EMBED_DIM, EXTENT_SLOTS, SHAPE_SLOTS,
    SIZE_SLOT, TONE_SLOTS, TYPE_SLOTS,
};
use crate::rng;
use crate::synthgen::{PATTERN_AMPLITUDE, RING_RADIUS, TYPE_SIGNATURES};

pub const DEFAULT_GAMMA: f64 = 2.5;
pub const DEFAULT_BETA: f64 = 0.20;

/// Temperature of the soft type assignment over correlation signatures.
const TYPE_SOFTNESS: f64 = 0.1;
/// Step for the central finite difference in γ.
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum QawError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask and image dimensions differ")]
    DimensionMismatch,
    #[error("all calibrated weights are zero; the batch must be skipped or redrawn")]
    DegenerateBatch,
    #[error("calibrated population mass is zero")]
    DegeneratePopulation,
    #[error("length mismatch: {0} losses vs {1} scores")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibration {
    /// `φ(s) = exp(γ s)`
    Softmax { gamma: f64 },
    /// `φ(s) = max(0, s - β)`
    Hinge { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub calibration: Calibration,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self::softmax(DEFAULT_GAMMA)
    }
}

impl WeightConfig {
    pub fn softmax(gamma: f64) -> Self {
        Self {
            calibration: Calibration::Softmax { gamma },
        }
    }

    pub fn hinge(beta: f64) -> Self {
        Self {
            calibration: Calibration::Hinge { beta },
        }
    }

    pub fn validate(&self) -> Result<(), QawError> {
        match self.calibration {
            Calibration::Softmax { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(QawError::InvalidConfig(format!("gamma must be positive, got {gamma}")))
            }
            Calibration::Hinge { beta } if !(-1.0..1.0).contains(&beta) => {
                Err(QawError::InvalidConfig(format!("beta must lie in [-1, 1), got {beta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn phi(&self, s: f64) -> f64 {
        match self.calibration {
            Calibration::Softmax { gamma } => (gamma * s).exp(),
            Calibration::Hinge { beta } => (s - beta).max(0.0),
        }
    }
}

/// Image-side embedding in the prompt layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSideEmbedding {
    pub embedding: PromptEmbedding,
    pub features: ImageFeatures,
}

/// Raw measurements behind an [`ImageSideEmbedding`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub location: BoundingBox,
    pub area_fraction: f64,
    /// Mean inside minus mean of the surrounding ring, per channel, over 127.
    pub color_shift: Vec<f64>,
    pub shape: prompting::Shape,
    /// Lag-1 residual correlation (horizontal, vertical) inside the mask.
    pub correlation: (f64, f64),
    /// 1 for a flat defect region, 0 for full pattern contrast.
    pub texture_collapse: f64,
}

/// Measures the defect region of `edited` under `mask`.
pub fn measure(edited: &Image, mask: &PixelMask) -> Result<ImageFeatures, QawError> {
    if !mask.matches(edited) {
        return Err(QawError::DimensionMismatch);
    }
    let location = BoundingBox::of_mask(mask).ok_or(QawError::EmptyMask)?;
    let inside = edited
        .channel_means(|x, y| mask.get(x, y))
        .expect("nonempty mask");
    let ring = mask.ring(RING_RADIUS);
    // A full mask has no ring; its shift is measured as zero.
    let outside = edited.channel_means(|x, y| ring.get(x, y)).unwrap_or_else(|| inside.clone());
    let color_shift = inside
        .iter()
        .zip(&outside)
        .map(|(a, b)| ((a - b) / 127.0).clamp(-1.0, 1.0))
        .collect();

    // Residual of the per-pixel channel mean about its in-mask average.
    let c = edited.channels();
    let level = |x: usize, y: usize| (0..c).map(|k| edited.get(x, y, k) as f64).sum::<f64>() / c as f64;
    let mean_in = inside.iter().sum::<f64>() / c as f64;
    let (w, h) = (edited.width(), edited.height());
    let mut sum_sq = 0.0;
    let mut n = 0.0;
    let (mut h_num, mut h_a, mut h_b) = (0.0, 0.0, 0.0);
    let (mut v_num, mut v_a, mut v_b) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let r = level(x, y) - mean_in;
            sum_sq += r * r;
            n += 1.0;
            if x + 1 < w && mask.get(x + 1, y) {
                let r2 = level(x + 1, y) - mean_in;
                h_num += r * r2;
                h_a += r * r;
                h_b += r2 * r2;
            }
            if y + 1 < h && mask.get(x, y + 1) {
                let r2 = level(x, y + 1) - mean_in;
                v_num += r * r2;
                v_a += r * r;
                v_b += r2 * r2;
            }
        }
    }
    let corr = |num: f64, a: f64, b: f64| if a > 0.0 && b > 0.0 { num / (a * b).sqrt() } else { 0.0 };
    let std = (sum_sq / n).sqrt();
    Ok(ImageFeatures {
        location,
        area_fraction: mask.area_fraction(),
        color_shift,
        shape: prompting::shape_class(mask),
        correlation: (corr(h_num, h_a, h_b), corr(v_num, v_a, v_b)),
        texture_collapse: 1.0 - (std / PATTERN_AMPLITUDE).min(1.0),
    })
}

/// Soft assignment of a correlation signature to defect types.
pub fn type_affinity(correlation: (f64, f64)) -> [f64; 6] {
    let mut p = [0.0; 6];
    for (k, sig) in TYPE_SIGNATURES.iter().enumerate() {
        let d2 = (correlation.0 - sig.0).powi(2) + (correlation.1 - sig.1).powi(2);
        p[k] = (-d2 / TYPE_SOFTNESS).exp();
    }
    let z: f64 = p.iter().sum();
    p.map(|v| v / z)
}

pub fn image_features_vector(f: &ImageFeatures) -> [f64; EMBED_DIM] {
    let mut v = [0.0; EMBED_DIM];
    let affinity = type_affinity(f.correlation);
    for (slot, a) in TYPE_SLOTS.zip(affinity) {
        v[slot] = (1.0 - f.texture_collapse) * a;
    }
    v[SHAPE_SLOTS.start + f.shape.index()] = 1.0;
    v[SIZE_SLOT] = f.area_fraction;
    for (slot, t) in TONE_SLOTS.zip(&f.color_shift) {
        v[slot] = *t;
    }
    let (cx, cy) = f.location.center();
    let (ex, ey) = f.location.extent();
    v[CENTER_SLOTS.start] = cx;
    v[CENTER_SLOTS.start + 1] = cy;
    v[EXTENT_SLOTS.start] = ex;
    v[EXTENT_SLOTS.start + 1] = ey;
    v
}

pub fn embed_image_side(edited: &Image, mask: &PixelMask) -> Result<ImageSideEmbedding, QawError> {
    let features = measure(edited, mask)?;
    // The shape one-hot keeps the vector away from zero.
    let embedding = PromptEmbedding::from_raw(&image_features_vector(&features)).expect("shape slot is nonzero");
    Ok(ImageSideEmbedding { embedding, features })
}

/// Cosine between the image-side and prompt embeddings, in [-1, 1].
pub fn score(edited: &Image, mask: &PixelMask, prompt: &PromptRecord) -> Result<f64, QawError> {
    let img = embed_image_side(edited, mask)?;
    Ok(cosine(&img.embedding, &embed_prompt(prompt)))
}

pub fn cosine(a: &PromptEmbedding, b: &PromptEmbedding) -> f64 {
    a.dot(b).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub scores: Vec<f64>,
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean_weight: f64,
}

impl WeightReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,s,phi,w\n");
        for (i, ((sc, phi), w)) in self.scores.iter().zip(&self.raw).zip(&self.weights).enumerate() {
            s.push_str(&format!("{i},{sc},{phi},{w}\n"));
        }
        s
    }
}

/// `w_i = φ(s_i) / mean_j φ(s_j)`.
pub fn calibrate_and_normalize(scores: &[f64], cfg: &WeightConfig) -> Result<WeightReport, QawError> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(QawError::DegenerateBatch);
    }
    let raw: Vec<f64> = scores.iter().map(|&s| cfg.phi(s)).collect();
    let weights = normalized(&raw).ok_or(QawError::DegenerateBatch)?;
    let mean_weight = weights.iter().sum::<f64>() / weights.len() as f64;
    Ok(WeightReport {
        scores: scores.to_vec(),
        raw,
        weights,
        mean_weight,
    })
}

fn normalized(raw: &[f64]) -> Option<Vec<f64>> {
    // Dividing by the max first makes equal inputs come out exactly 1.
    let max = raw.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return None;
    }
    let scaled: Vec<f64> = raw.iter().map(|r| r / max).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    Some(scaled.iter().map(|r| r / mean).collect())
}

/// Softmax-normalized weights at temperature `gamma` (any sign).
fn softmax_weights(scores: &[f64], gamma: f64) -> Vec<f64> {
    let max = scores.iter().map(|s| gamma * s).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = scores.iter().map(|s| (gamma * s - max).exp()).collect();
    normalized(&raw).expect("exponentials are positive")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn pop_cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

/// `Var(w(γ) ℓ)` under softmax weights at temperature γ.
pub fn weighted_loss_variance(losses: &[f64], scores: &[f64], gamma: f64) -> f64 {
    let w = softmax_weights(scores, gamma);
    let wl: Vec<f64> = w.iter().zip(losses).map(|(w, l)| w * l).collect();
    pop_var(&wl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    pub n: usize,
    pub var_loss: f64,
    /// `Var(w ℓ)` under the configured calibration.
    pub var_weighted_loss: f64,
    pub cov_loss_score: f64,
    /// `Cov(ℓ, φ(s))` under the configured calibration.
    pub cov_loss_phi: f64,
    /// Central finite difference of `Var(w(γ) ℓ)` at γ = 0 (softmax weights).
    pub fd_derivative_at_zero: f64,
    /// Closed form of the same derivative: `2 Cov(ℓ (ℓ - mean ℓ), s)`.
    pub exact_derivative_at_zero: f64,
    /// `2 Cov(ℓ, s)`, the first-order term of the derivative.
    pub twice_cov_loss_score: f64,
}

pub fn variance_report(losses: &[f64], scores: &[f64], cfg: &WeightConfig) -> Result<VarianceDiagnostics, QawError> {
    if losses.len() != scores.len() {
        return Err(QawError::LengthMismatch(losses.len(), scores.len()));
    }
    if losses.len() < 2 {
        return Err(QawError::LengthMismatch(losses.len(), scores.len()));
    }
    let report = calibrate_and_normalize(scores, cfg)?;
    let wl: Vec<f64> = report.weights.iter().zip(losses).map(|(w, l)| w * l).collect();
    let fd = (weighted_loss_variance(losses, scores, FD_STEP) - weighted_loss_variance(losses, scores, -FD_STEP))
        / (2.0 * FD_STEP);
    let ml = mean(losses);
    let centered: Vec<f64> = losses.iter().map(|l| l * (l - ml)).collect();
    Ok(VarianceDiagnostics {
        n: losses.len(),
        var_loss: pop_var(losses),
        var_weighted_loss: pop_var(&wl),
        cov_loss_score: pop_cov(losses, scores),
        cov_loss_phi: pop_cov(losses, &report.raw),
        fd_derivative_at_zero: fd,
        exact_derivative_at_zero: 2.0 * pop_cov(&centered, scores),
        twice_cov_loss_score: 2.0 * pop_cov(losses, scores),
    })
}

/// How minibatches are drawn from a finite population.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchScheme {
    /// Uniform without replacement. The self-normalized mean is then a
    /// ratio estimator with O(1/B) bias.
    Uniform,
    /// First item with probability proportional to `φ`, the rest uniform
    /// without replacement. Under this design the self-normalized batch
    /// mean is exactly unbiased for the `φ`-tilted population mean.
    SizeBiased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationRisk {
    /// `Σ φ(s_i) ℓ_i / Σ φ(s_i)` over the population.
    pub target: f64,
    /// Mean of per-batch self-normalized risks.
    pub estimate: f64,
    pub standard_error: f64,
    pub gap: f64,
    pub batches: usize,
    /// Batches dropped because every weight in them was zero.
    pub skipped_batches: usize,
}

pub fn reweighted_population_risk(
    population: &[(f64, f64)],
    cfg: &WeightConfig,
    batch_size: usize,
    n_batches: usize,
    scheme: BatchScheme,
    seed: u64,
) -> Result<PopulationRisk, QawError> {
    cfg.validate()?;
    let n = population.len();
    let phi: Vec<f64> = population.iter().map(|&(_, s)| cfg.phi(s)).collect();
    let total: f64 = phi.iter().sum();
    if n == 0 || !(total > 0.0) || batch_size == 0 || n_batches == 0 {
        return Err(QawError::DegeneratePopulation);
    }
    let target = phi.iter().zip(population).map(|(p, (l, _))| p * l).sum::<f64>() / total;
    let batch_risk = |idx: &[usize]| -> Option<f64> {
        let raw: Vec<f64> = idx.iter().map(|&i| phi[i]).collect();
        let w = normalized(&raw)?;
        Some(w.iter().zip(idx).map(|(w, &i)| w * population[i].0).sum::<f64>() / idx.len() as f64)
    };

    let mut g = rng::seeded(seed);
    let b = batch_size.min(n);
    let mut estimates = Vec::with_capacity(n_batches);
    let mut skipped = 0;
    for _ in 0..n_batches {
        let idx: Vec<usize> = match scheme {
            BatchScheme::Uniform => index::sample(&mut g, n, b).into_vec(),
            BatchScheme::SizeBiased => {
                let mut u = g.gen::<f64>() * total;
                let mut first = n - 1;
                for (i, p) in phi.iter().enumerate() {
                    if u < *p {
                        first = i;
                        break;
                    }
                    u -= p;
                }
                let rest: Vec<usize> = (0..n).filter(|&i| i != first).collect();
                let mut idx = vec![first];
                idx.extend(index::sample(&mut g, rest.len(), b - 1).into_iter().map(|k| rest[k]));
                idx
            }
        };
        match batch_risk(&idx) {
            Some(r) => estimates.push(r),
            None => skipped += 1,
        }
    }
    if estimates.is_empty() {
        return Err(QawError::DegenerateBatch);
    }
    let estimate = mean(&estimates);
    let se = if estimates.len() > 1 {
        (estimates.iter().map(|e| (e - estimate).powi(2)).sum::<f64>() / (estimates.len() - 1) as f64 / estimates.len() as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(PopulationRisk {
        target,
        estimate,
        standard_error: se,
        gap: estimate - target,
        batches: estimates.len(),
        skipped_batches: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    #[test]
    fn uniform_scores_give_unit_weights() {
        for cfg in [WeightConfig::softmax(2.5), WeightConfig::hinge(0.2)] {
            let r = calibrate_and_normalize(&[0.7; 5], &cfg).unwrap();
            assert!(r.weights.iter().all(|&w| w == 1.0), "{:?}", r.weights);
        }
    }

    #[test]
    fn two_point_softmax_weights() {
        // Frozen from a 40-digit evaluation of 2 e^{±2.25} / (e^{2.25} + e^{-2.25}).
        let r = calibrate_and_normalize(&[0.9, -0.9], &WeightConfig::softmax(2.5)).unwrap();
        assert!((r.raw[0] - 2.25f64.exp()).abs() < 1e-12);
        assert!((r.raw[1] - (-2.25f64).exp()).abs() < 1e-15);
        assert!((r.weights[0] - 1.978_026_114_738_813_6).abs() < 1e-12);
        assert!((r.weights[1] - 0.021_973_885_261_186_36).abs() < 1e-12);
    }

    #[test]
    fn all_clipped_hinge_is_degenerate() {
        assert!(matches!(
            calibrate_and_normalize(&[0.1, 0.15], &WeightConfig::hinge(0.2)),
            Err(QawError::DegenerateBatch)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(WeightConfig::softmax(0.0).validate().is_err());
        assert!(WeightConfig::hinge(1.0).validate().is_err());
        assert!(WeightConfig::hinge(-1.0).validate().is_ok());
    }

    #[test]
    fn constant_loss_diagnostics() {
        let scores = [-0.5, 0.1, 0.4, 0.9];
        let d = variance_report(&[0.8; 4], &scores, &WeightConfig::default()).unwrap();
        assert_eq!(d.var_loss, 0.0);
        assert!(d.cov_loss_score.abs() < 1e-15);
        let w = calibrate_and_normalize(&scores, &WeightConfig::default()).unwrap().weights;
        assert!((d.var_weighted_loss - 0.64 * pop_var(&w)).abs() < 1e-12);
        assert!(d.fd_derivative_at_zero.abs() < 1e-8);
    }

    #[test]
    fn anti_correlated_three_point_fixture() {
        let s = [-0.8, 0.0, 0.8];
        let l: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
        let d = variance_report(&l, &s, &WeightConfig::default()).unwrap();
        // Cov(ℓ, s) = -Var(s) = -(0.64 + 0.64) / 3
        assert!((d.cov_loss_score + 1.28 / 3.0).abs() < 1e-12);
        // 2 Cov(ℓ(ℓ - 1), s) with ℓ(ℓ - 1) = {1.44, 0, -0.16}: 2 * (-1.152 - 0.128) / 3
        assert!((d.exact_derivative_at_zero + 2.56 / 3.0).abs() < 1e-12);
        assert!((d.fd_derivative_at_zero - d.exact_derivative_at_zero).abs() < 1e-6);
        assert!(d.fd_derivative_at_zero < 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            variance_report(&[1.0, 2.0], &[0.1], &WeightConfig::default()),
            Err(QawError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn whole_population_batch_is_exact() {
        let pop: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 0.3, (i as f64 - 4.5) / 5.0)).collect();
        for scheme in [BatchScheme::Uniform, BatchScheme::SizeBiased] {
            let r = reweighted_population_risk(&pop, &WeightConfig::default(), 10, 3, scheme, 1).unwrap();
            assert!((r.gap).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_phi_target_is_plain_mean() {
        let pop: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 0.5)).collect();
        let r = reweighted_population_risk(&pop, &WeightConfig::hinge(0.2), 6, 1, BatchScheme::Uniform, 1).unwrap();
        assert!((r.target - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_population_rejected() {
        let pop = vec![(1.0, 0.0), (2.0, 0.1)];
        assert!(matches!(
            reweighted_population_risk(&pop, &WeightConfig::hinge(0.5), 1, 10, BatchScheme::Uniform, 1),
            Err(QawError::DegeneratePopulation)
        ));
    }

    #[test]
    fn size_biased_batches_are_unbiased() {
        let mut g = rng::seeded(3);
        let pop: Vec<(f64, f64)> = (0..10)
            .map(|_| {
                let s: f64 = g.gen_range(-1.0..1.0);
                ((1.0 - 0.5 * s + g.gen_range(-0.2..0.2)).max(0.0), s)
            })
            .collect();
        let r = reweighted_population_risk(&pop, &WeightConfig::default(), 5, 10_000, BatchScheme::SizeBiased, 9).unwrap();
        assert!(r.gap.abs() < 3.0 * r.standard_error, "{r:?}");
    }

    #[test]
    fn size_biased_design_is_exactly_unbiased_by_enumeration() {
        // Exact expectation over all batches under the size-biased design:
        // P(B) ∝ Σ_{i∈B} φ_i, so E[Σφℓ/Σφ] = Σ_B Σ_{i∈B} φ_i ℓ_i / Σ_B Σ_{i∈B} φ_i.
        let pop = [(0.3, -0.9), (1.4, -0.2), (0.2, 0.1), (0.9, 0.5), (0.1, 0.95), (0.7, 0.0)];
        let cfg = WeightConfig::default();
        let phi: Vec<f64> = pop.iter().map(|&(_, s)| cfg.phi(s)).collect();
        let target = phi.iter().zip(&pop).map(|(p, (l, _))| p * l).sum::<f64>() / phi.iter().sum::<f64>();
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..6 {
            for b in a + 1..6 {
                for c in b + 1..6 {
                    let mass = phi[a] + phi[b] + phi[c];
                    let risk = (phi[a] * pop[a].0 + phi[b] * pop[b].0 + phi[c] * pop[c].0) / mass;
                    num += mass * risk;
                    den += mass;
                }
            }
        }
        assert!((num / den - target).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_average_one_and_preserve_order(scores in proptest::collection::vec(-1.0f64..1.0, 1..64), gamma in 0.1f64..8.0) {
            let r = calibrate_and_normalize(&scores, &WeightConfig::softmax(gamma)).unwrap();
            prop_assert!((r.mean_weight - 1.0).abs() < 1e-12);
            prop_assert!(r.weights.iter().all(|&w| w > 0.0));
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] <= scores[j] {
                        prop_assert!(r.weights[i] <= r.weights[j]);
                    }
                }
            }
        }

        #[test]
        fn hinge_weights_nonnegative(scores in proptest::collection::vec(-1.0f64..1.0, 1..64)) {
            match calibrate_and_normalize(&scores, &WeightConfig::hinge(0.2)) {
                Ok(r) => {
                    prop_assert!((r.mean_weight - 1.0).abs() < 1e-12);
                    prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
                }
                Err(QawError::DegenerateBatch) => prop_assert!(scores.iter().all(|&s| s <= 0.2)),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn score_extremes_and_bounds() {
        let mask = PixelMask::from_fn(32, 32, |x, y| (8..16).contains(&x) && (8..20).contains(&y)).unwrap();
        let img = Image::filled(32, 32, 1, 100).unwrap();
        let e = embed_image_side(&img, &mask).unwrap();
        assert!((e.embedding.norm() - 1.0).abs() < 1e-9);
        assert_eq!(e, embed_image_side(&img, &mask).unwrap());
        let neg = PromptEmbedding::from_raw(&e.embedding.vector().iter().map(|v| -v).collect::<Vec<_>>()).unwrap();
        assert!((cosine(&e.embedding, &e.embedding) - 1.0).abs() < 1e-12);
        assert!((cosine(&e.embedding, &neg) + 1.0).abs() < 1e-12);
        let p = prompting::sample_prompt(&mask, 1, 3).unwrap();
        assert!(score(&img, &mask, &p).unwrap().abs() <= 1.0 + 1e-12);
        assert!(matches!(score(&img, &PixelMask::empty(32, 32).unwrap(), &p), Err(QawError::EmptyMask)));
    }

    #[test]
    fn flat_region_reads_as_collapsed() {
        let mask = PixelMask::from_fn(32, 32, |x, y| (8..16).contains(&x) && (8..16).contains(&y)).unwrap();
        let f = measure(&Image::filled(32, 32, 1, 90).unwrap(), &mask).unwrap();
        assert_eq!(f.texture_collapse, 1.0);
        assert_eq!(f.color_shift, vec![0.0]);
        assert_eq!(f.correlation, (0.0, 0.0));
    }
}
