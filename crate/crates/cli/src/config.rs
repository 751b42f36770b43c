//! Run configuration. Every field has a default, so `{}` is a valid config.

use std::path::{Path, PathBuf};

use anomsynth::armodel::{self, TrainConfig};
use anomsynth::codec::{self, CodebookConfig};
use anomsynth::detector::{DetectorConfig, ImageAggregation};
use anomsynth::prompting::DEFAULT_MASKS_PER_IMAGE;
use anomsynth::qaw::{self, WeightConfig};
use anomsynth::synthgen::DEFAULT_INCONSISTENT_FRACTION;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub codec: CodecSection,
    pub armodel: ArSection,
    pub qaw: QawSection,
    pub detector: DetectorSection,
    pub corpus: CorpusSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 123,
            paths: Paths::default(),
            codec: CodecSection::default(),
            armodel: ArSection::default(),
            qaw: QawSection::default(),
            detector: DetectorSection::default(),
            corpus: CorpusSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of every artifact; relative paths resolve against the cwd.
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { workdir: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    #[serde(rename = "K")]
    pub k: usize,
    pub patch_size: usize,
    pub iterations: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self { k: codec::DEFAULT_K, patch_size: codec::DEFAULT_PATCH_SIZE, iterations: 25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArSection {
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub embed_width: usize,
    pub radius: usize,
    pub batch_size: usize,
}

impl Default for ArSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.learning_rate,
            temperature: armodel::DEFAULT_TEMPERATURE,
            embed_width: armodel::DEFAULT_EMBED_WIDTH,
            radius: armodel::DEFAULT_RADIUS,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    Softmax,
    Hinge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QawSection {
    pub calibration: CalibrationKind,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for QawSection {
    fn default() -> Self {
        Self { calibration: CalibrationKind::Softmax, gamma: qaw::DEFAULT_GAMMA, beta: qaw::DEFAULT_BETA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    TopPercentMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub epochs: usize,
    pub lr: f64,
    pub window: usize,
    pub pixels_per_image: usize,
    pub aggregation: Aggregation,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.learning_rate,
            window: d.window,
            pixels_per_image: d.pixels_per_image,
            aggregation: Aggregation::Max,
        }
    }
}

/// How `synth` produces samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Masked autoregressive edits with the trained model.
    Ar,
    /// Attribute painter with prompt-inconsistent corruptions at rate `lambda`.
    Painter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub side: usize,
    pub train_normals: usize,
    pub test_normals: usize,
    pub test_anomalous: usize,
    pub mask_pool: usize,
    pub k_masks: usize,
    pub mask_fraction: (f64, f64),
    pub lambda: f64,
    pub engine: Engine,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            side: 64,
            train_normals: 16,
            test_normals: 16,
            test_anomalous: 32,
            mask_pool: 24,
            k_masks: DEFAULT_MASKS_PER_IMAGE,
            mask_fraction: (0.02, 0.08),
            lambda: DEFAULT_INCONSISTENT_FRACTION,
            engine: Engine::Ar,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Side of the benchmark image; 1024 with patch 8 gives a 128x128 lattice.
    pub side: usize,
    pub fractions: Vec<f64>,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { side: 1024, fractions: vec![0.05, 0.10, 0.25, 0.50, 1.0], repeats: 3 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        let c = &self.corpus;
        if c.side == 0 || c.side % self.codec.patch_size.max(1) != 0 {
            return Err(format!("corpus.side {} must be a positive multiple of codec.patch_size", c.side));
        }
        if self.codec.k < 2 || self.codec.k > u16::MAX as usize || self.codec.patch_size == 0 || self.codec.iterations == 0 {
            return Err("codec: K must be in [2, 65535], patch_size and iterations >= 1".into());
        }
        if c.train_normals == 0 || c.test_normals == 0 || c.test_anomalous == 0 || c.mask_pool == 0 || c.k_masks == 0 {
            return Err("corpus counts must all be >= 1".into());
        }
        let (lo, hi) = c.mask_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(format!("corpus.mask_fraction ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
        }
        if !(0.0..=1.0).contains(&c.lambda) {
            return Err(format!("corpus.lambda {} must lie in [0, 1]", c.lambda));
        }
        if !(self.armodel.temperature > 0.0 && self.armodel.temperature.is_finite()) {
            return Err("armodel.temperature must be positive".into());
        }
        if self.armodel.embed_width == 0 || self.armodel.radius == 0 {
            return Err("armodel.embed_width and armodel.radius must be >= 1".into());
        }
        self.ar_train().validate().map_err(|e| format!("armodel: {e}"))?;
        self.weight_config().validate().map_err(|e| format!("qaw: {e}"))?;
        self.detector_config().validate().map_err(|e| format!("detector: {e}"))?;
        let b = &self.bench;
        if b.side == 0 || b.side % self.codec.patch_size != 0 || b.repeats == 0 || b.fractions.is_empty() {
            return Err("bench: side must be a multiple of patch_size, repeats and fractions nonempty".into());
        }
        if b.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err("bench.fractions must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn codebook_config(&self) -> CodebookConfig {
        CodebookConfig {
            k: self.codec.k,
            patch_size: self.codec.patch_size,
            iterations: self.codec.iterations,
            seed: self.seed,
        }
    }

    pub fn ar_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.armodel.epochs,
            learning_rate: self.armodel.lr,
            batch_size: self.armodel.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn weight_config(&self) -> WeightConfig {
        match self.qaw.calibration {
            CalibrationKind::Softmax => WeightConfig::softmax(self.qaw.gamma),
            CalibrationKind::Hinge => WeightConfig::hinge(self.qaw.beta),
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            epochs: self.detector.epochs,
            learning_rate: self.detector.lr,
            window: self.detector.window,
            pixels_per_image: self.detector.pixels_per_image,
            seed: self.seed,
        }
    }

    pub fn aggregation(&self) -> ImageAggregation {
        match self.detector.aggregation {
            Aggregation::Max => ImageAggregation::Max,
            Aggregation::TopPercentMean => ImageAggregation::TopPercentMean,
        }
    }
}
