//! Desk-scale weighting experiment: train the detector on a partly
//! corrupted synthetic corpus under different weightings and evaluate on a
//! clean held-out set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{self, DetectorConfig, DetectorError, EvalResult, ImageAggregation, TestItem};
use crate::imagery::{Image, PixelMask};
use crate::prompting::sample_prompt;
use crate::qaw::{self, WeightConfig};
use crate::rng;
use crate::synthgen::{self, CorruptionMode, CorruptionPolicy, MaskShape, SynthSample, TextureKind, TextureSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub side: usize,
    pub train_normals: usize,
    pub synthetic: usize,
    pub test_normals: usize,
    pub test_anomalous: usize,
    pub mask_fraction: (f64, f64),
    pub inconsistent_fraction: f64,
    pub corruption_modes: Vec<CorruptionMode>,
    pub polarity: Polarity,
    pub seed: u64,
}

/// Sign of the prompted color tone for every defect in a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Mixed,
    Dark,
    Bright,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            side: 64,
            train_normals: 32,
            synthetic: 96,
            test_normals: 24,
            test_anomalous: 48,
            mask_fraction: (0.02, 0.08),
            inconsistent_fraction: synthgen::DEFAULT_INCONSISTENT_FRACTION,
            corruption_modes: CorruptionMode::ALL.to_vec(),
            polarity: Polarity::Dark,
            seed: 123,
        }
    }
}

pub fn texture_name(kind: TextureKind) -> &'static str {
    match kind {
        TextureKind::Stripes => "stripes",
        TextureKind::Checker => "checker",
        TextureKind::Grain => "grain",
        TextureKind::Rings => "rings",
    }
}

/// Seeded texture with randomized period, level and contrast.
pub fn random_texture(kind: TextureKind, side: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    let mut spec = TextureSpec::new(kind, side, side, r.gen());
    spec.period = r.gen_range(4..12);
    spec.base = r.gen_range(115.0..140.0);
    spec.contrast = r.gen_range(20.0..40.0);
    spec.noise_amplitude = r.gen_range(2.0..6.0);
    synthgen::gen_texture(&spec).expect("parameters are in range")
}

/// Random mask, prompt and painted defect on `img`.
pub fn random_defect(img: &Image, cfg: &CorpusConfig, policy: &CorruptionPolicy, seed: u64) -> SynthSample {
    let mut r = rng::seeded(seed);
    loop {
        let shape = if r.gen_bool(0.5) { MaskShape::Blob } else { MaskShape::Scratch };
        let fraction = r.gen_range(cfg.mask_fraction.0..cfg.mask_fraction.1);
        let Ok(mask) = synthgen::gen_mask(shape, fraction, r.gen(), img.width(), img.height()) else {
            continue;
        };
        let mut prompt = sample_prompt(&mask, img.channels(), r.gen()).expect("mask is nonempty");
        let sign = match cfg.polarity {
            Polarity::Mixed => None,
            Polarity::Dark => Some(-1.0),
            Polarity::Bright => Some(1.0),
        };
        if let Some(sign) = sign {
            prompt.color_tone.iter_mut().for_each(|t| *t = sign * t.abs());
            prompt.rendered_text = prompt.render();
        }
        return synthgen::paint_defect(img, &mask, &prompt, policy, r.gen()).expect("prompt matches mask");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub synthetic: Vec<SynthSample>,
    pub normals: Vec<Image>,
    pub test: Vec<TestItem>,
}

pub fn build_corpus(cfg: &CorpusConfig) -> Corpus {
    let kind = |i: usize| TextureKind::ALL[i % TextureKind::ALL.len()];
    let seed = |stage: u64, i: usize| rng::derive_seed(cfg.seed, &[stage, i as u64]);
    let policy = CorruptionPolicy {
        inconsistent_fraction: cfg.inconsistent_fraction,
        modes: cfg.corruption_modes.clone(),
    };
    let synthetic = (0..cfg.synthetic)
        .map(|i| random_defect(&random_texture(kind(i), cfg.side, seed(1, i)), cfg, &policy, seed(2, i)))
        .collect();
    let normals = (0..cfg.train_normals).map(|i| random_texture(kind(i), cfg.side, seed(3, i))).collect();
    let empty = PixelMask::empty(cfg.side, cfg.side).expect("valid side");
    let mut test: Vec<TestItem> = (0..cfg.test_normals)
        .map(|i| TestItem {
            category: texture_name(kind(i)).into(),
            image: random_texture(kind(i), cfg.side, seed(4, i)),
            mask: empty.clone(),
        })
        .collect();
    test.extend((0..cfg.test_anomalous).map(|i| {
        let s = random_defect(
            &random_texture(kind(i), cfg.side, seed(5, i)),
            cfg,
            &CorruptionPolicy::faithful(),
            seed(6, i),
        );
        TestItem {
            category: texture_name(kind(i)).into(),
            image: s.image,
            mask: s.mask,
        }
    }));
    Corpus { synthetic, normals, test }
}

/// Consistency score of every synthetic sample.
pub fn corpus_scores(corpus: &Corpus) -> Vec<f64> {
    use rayon::prelude::*;
    corpus
        .synthetic
        .par_iter()
        .map(|s| qaw::score(&s.image, &s.mask, &s.prompt).expect("masks are nonempty"))
        .collect()
}

/// Trains and evaluates once per weighting; `None` is the uniform baseline.
pub fn compare_weightings(
    corpus: &Corpus,
    weightings: &[Option<WeightConfig>],
    det: &DetectorConfig,
) -> Result<Vec<EvalResult>, DetectorError> {
    let scores = corpus_scores(corpus);
    weightings
        .iter()
        .map(|wc| {
            let w = match wc {
                None => vec![1.0; scores.len()],
                Some(c) => qaw::calibrate_and_normalize(&scores, c).map_err(|e| DetectorError::InvalidConfig(e.to_string()))?.weights,
            };
            let (scorer, _) = detector::train_detector(&corpus.synthetic, &w, &corpus.normals, det)?;
            detector::evaluate(&scorer, &corpus.test, ImageAggregation::Max)
        })
        .collect()
}
