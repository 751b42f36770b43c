//! Pipeline stages. Each stage reads its inputs from the work directory and
//! writes its artifacts back there, so stages can be re-run independently.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anomsynth::codec::{self, Codebook};
use anomsynth::detector::{self, PatchScorer, TestItem};
use anomsynth::experiment;
use anomsynth::imagery::{self, Image, PixelMask};
use anomsynth::prompting::{self, embed_prompt, PromptRecord, Triplet};
use anomsynth::qaw::{self, WeightConfig};
use anomsynth::rng;
use anomsynth::sampler::{self, EditRequest};
use anomsynth::synthgen::{self, CorruptionPolicy, MaskShape, SynthSample, TextureKind};
use anomsynth::ArModel;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Engine, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags; exit code 2.
    Config(String),
    /// Failure while running a stage; exit code 3.
    Pipeline { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline { .. } => 3,
        }
    }

    pub fn to_json(&self) -> String {
        let v = match self {
            CliError::Config(m) => serde_json::json!({"error": "config", "message": m, "exit_code": 2}),
            CliError::Pipeline { stage, message } => {
                serde_json::json!({"error": "pipeline", "stage": stage, "message": message, "exit_code": 3})
            }
        };
        v.to_string()
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Pipeline { stage, message: e.to_string() })
    }
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.paths.workdir.clone() }
    }
    fn dir(&self, name: &str) -> Result<PathBuf, CliError> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).stage("io")?;
        Ok(d)
    }
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Pipeline { stage: "io", message: format!("{}: {e}", path.display()) })
}

fn read_text(path: &Path, stage: &'static str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Pipeline {
        stage,
        message: format!("{}: {e} (run the earlier stage first)", path.display()),
    })
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Held-out test item as stored in `test/manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub category: String,
    pub image_ref: String,
    pub mask_ref: String,
}

/// Synthetic sample as stored in `synth/manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub image_ref: String,
    pub mask_ref: String,
    pub prompt: PromptRecord,
    pub seed: u64,
    pub corruption: Option<String>,
}

fn texture_kind(i: usize) -> TextureKind {
    TextureKind::ALL[i % TextureKind::ALL.len()]
}

/// Normal textures, a mask pool, the triplet manifest and the test set.
pub fn gen_corpus(cfg: &RunConfig) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let c = &cfg.corpus;
    let seed = |stage: u64, i: usize| rng::derive_seed(cfg.seed, &[stage, i as u64]);
    let normals = l.dir("normals")?;
    for i in 0..c.train_normals {
        let img = experiment::random_texture(texture_kind(i), c.side, seed(1, i));
        imagery::write_image(&img, normals.join(format!("normal_{i:03}.pgm"))).stage("gen-corpus")?;
    }
    let pool = l.dir("mask_pool")?;
    for i in 0..c.mask_pool {
        let mut g = rng::seeded(seed(2, i));
        let shape = if i % 2 == 0 { MaskShape::Blob } else { MaskShape::Scratch };
        let fraction = g.gen_range(c.mask_fraction.0..=c.mask_fraction.1);
        let mask = synthgen::gen_mask(shape, fraction, g.gen(), c.side, c.side).stage("gen-corpus")?;
        imagery::mask_write(&mask, pool.join(format!("mask_{i:03}.pgm"))).stage("gen-corpus")?;
    }
    let corpus = l.dir("corpus")?;
    let triplets = prompting::build_triplets(&normals, &pool, &corpus, c.k_masks, seed(3, 0)).stage("gen-corpus")?;

    // Held-out set: clean normals plus faithfully painted defects.
    let test = l.dir("test")?;
    let masks = l.dir("test/masks")?;
    let empty = PixelMask::empty(c.side, c.side).stage("gen-corpus")?;
    let mut records = Vec::new();
    let corpus_cfg = experiment::CorpusConfig {
        side: c.side,
        mask_fraction: c.mask_fraction,
        polarity: experiment::Polarity::Mixed,
        ..Default::default()
    };
    for i in 0..c.test_normals {
        let img = experiment::random_texture(texture_kind(i), c.side, seed(4, i));
        let name = format!("normal_{i:03}");
        imagery::write_image(&img, test.join(format!("{name}.pgm"))).stage("gen-corpus")?;
        imagery::mask_write(&empty, masks.join(format!("{name}.pgm"))).stage("gen-corpus")?;
        records.push(test_record(i, &name));
    }
    for i in 0..c.test_anomalous {
        let base = experiment::random_texture(texture_kind(i), c.side, seed(5, i));
        let s = experiment::random_defect(&base, &corpus_cfg, &CorruptionPolicy::faithful(), seed(6, i));
        let name = format!("defect_{i:03}");
        imagery::write_image(&s.image, test.join(format!("{name}.pgm"))).stage("gen-corpus")?;
        imagery::mask_write(&s.mask, masks.join(format!("{name}.pgm"))).stage("gen-corpus")?;
        records.push(test_record(i, &name));
    }
    prompting::write_manifest(&test.join("manifest.jsonl"), &records).stage("gen-corpus")?;
    Ok(format!(
        "{} normals, {} masks, {} triplets, {} test images",
        c.train_normals,
        c.mask_pool,
        triplets.len(),
        records.len()
    ))
}

fn test_record(i: usize, name: &str) -> TestRecord {
    TestRecord {
        category: experiment::texture_name(texture_kind(i)).into(),
        image_ref: format!("{name}.pgm"),
        mask_ref: format!("masks/{name}.pgm"),
    }
}

fn list_images(dir: &Path) -> Result<Vec<Image>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Pipeline { stage: "io", message: format!("{}: {e} (run gen-corpus first)", dir.display()) })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| imagery::read_image(p).stage("io")).collect()
}

fn load_triplets(l: &Layout) -> Result<Vec<(Triplet, Image, PixelMask)>, CliError> {
    let dir = l.path("corpus");
    let path = dir.join("manifest.jsonl");
    if !path.exists() {
        return Err(CliError::Pipeline { stage: "io", message: format!("{} missing (run gen-corpus first)", path.display()) });
    }
    let triplets: Vec<Triplet> = prompting::read_manifest(&path).stage("io")?;
    triplets
        .into_iter()
        .map(|t| {
            let img = imagery::read_image(dir.join(&t.image_ref)).stage("io")?;
            let mask = imagery::mask_read(dir.join(&t.mask_ref)).stage("io")?;
            Ok((t, img, mask))
        })
        .collect()
}

/// Faithfully painted version of every triplet: the ground truth the AR
/// model learns to produce.
fn painted(triplets: &[(Triplet, Image, PixelMask)], stage: &'static str) -> Result<Vec<SynthSample>, CliError> {
    triplets
        .iter()
        .map(|(t, img, mask)| synthgen::paint_defect(img, mask, &t.prompt, &CorruptionPolicy::faithful(), t.seed).stage(stage))
        .collect()
}

/// Fits the codebook on the normals and the painted triplets, so that
/// defect appearances are in the vocabulary.
pub fn train_codec(cfg: &RunConfig) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let normals = list_images(&l.path("normals"))?;
    let mut fit_set = normals.clone();
    fit_set.extend(painted(&load_triplets(&l)?, "train-codec")?.into_iter().map(|s| s.image));
    let cb = codec::train_codebook(&fit_set, &cfg.codebook_config()).stage("train-codec")?;
    let out = l.dir("codec")?;
    cb.save(out.join("codebook.json")).stage("train-codec")?;
    let mut csv = String::from("image,mse\n");
    let mut total = 0.0;
    for (i, img) in normals.iter().enumerate() {
        let rec = codec::decode(&codec::encode(img, &cb).stage("train-codec")?, &cb).stage("train-codec")?;
        let mse = img.data().iter().zip(rec.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>()
            / img.data().len() as f64;
        total += mse;
        csv.push_str(&format!("{i},{mse}\n"));
    }
    write(&out.join("codec_loss.csv"), &csv)?;
    Ok(format!("K = {}, mean reconstruction MSE {:.3}", cb.k(), total / normals.len() as f64))
}

fn load_codebook(l: &Layout) -> Result<Codebook, CliError> {
    let p = l.path("codec/codebook.json");
    Codebook::from_json(&read_text(&p, "io")?).stage("io")
}

fn load_model(l: &Layout, cfg: &RunConfig) -> Result<ArModel, CliError> {
    let p = l.path("ar/model.json");
    read_text(&p, "io")?;
    let mut m = ArModel::load(&p).stage("io")?;
    m.set_temperature(cfg.armodel.temperature).stage("io")?;
    Ok(m)
}

/// Trains the AR model on faithfully painted versions of every triplet.
pub fn train_ar(cfg: &RunConfig) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let cb = load_codebook(&l)?;
    let triplets = load_triplets(&l)?;
    let mut data = Vec::with_capacity(triplets.len());
    let mut regions = Vec::with_capacity(triplets.len());
    for s in painted(&triplets, "train-ar")? {
        data.push((codec::encode(&s.image, &cb).stage("train-ar")?, embed_prompt(&s.prompt)));
        regions.push(codec::mask_to_partition(&s.mask, cb.patch_size()).stage("train-ar")?);
    }
    let a = &cfg.armodel;
    let mut model = ArModel::new(cb.k(), prompting::EMBED_DIM, a.embed_width, a.radius, cfg.seed);
    model.set_temperature(a.temperature).stage("train-ar")?;
    let report = anomsynth::armodel::train_on_regions(&mut model, &data, &regions, &cfg.ar_train()).stage("train-ar")?;
    let out = l.dir("ar")?;
    model.save(out.join("model.json")).stage("train-ar")?;
    write(&out.join("ar_loss.csv"), &report.to_csv())?;
    Ok(format!(
        "{} lattices, final loss {:.4}",
        data.len(),
        report.loss_curve.last().copied().unwrap_or(f64::NAN)
    ))
}

/// One synthetic sample per triplet, by AR edit or by the painter.
pub fn synth(cfg: &RunConfig, parallelism: usize) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let triplets = load_triplets(&l)?;
    let images = l.dir("synth/images")?;
    let masks = l.dir("synth/masks")?;
    let mut records = Vec::with_capacity(triplets.len());
    let mut store = |i: usize, s: &SynthSample, corruption: Option<String>| -> Result<(), CliError> {
        let name = format!("sample_{i:04}.pgm");
        imagery::write_image(&s.image, images.join(&name)).stage("synth")?;
        imagery::mask_write(&s.mask, masks.join(&name)).stage("synth")?;
        records.push(SynthRecord {
            image_ref: format!("images/{name}"),
            mask_ref: format!("masks/{name}"),
            prompt: s.prompt.clone(),
            seed: s.seed,
            corruption,
        });
        Ok(())
    };
    match cfg.corpus.engine {
        Engine::Painter => {
            let policy = CorruptionPolicy::new(cfg.corpus.lambda);
            for (i, (t, img, mask)) in triplets.iter().enumerate() {
                let s = synthgen::paint_defect(img, mask, &t.prompt, &policy, t.seed).stage("synth")?;
                let c = s.corruption.map(|m| serde_json::to_value(m).expect("serializable").as_str().unwrap_or("").to_string());
                store(i, &s, c)?;
            }
        }
        Engine::Ar => {
            let cb = load_codebook(&l)?;
            let model = load_model(&l, cfg)?;
            let lattices = l.dir("synth/lattices")?;
            let reports = l.dir("synth/reports")?;
            let requests: Vec<EditRequest> = triplets
                .iter()
                .map(|(t, img, mask)| EditRequest {
                    image: img.clone(),
                    mask: mask.clone(),
                    prompt: t.prompt.clone(),
                    seed: t.seed,
                    temperature: None,
                })
                .collect();
            let results = sampler::edit_batch(&requests, &model, &cb, parallelism);
            for (i, (req, res)) in requests.iter().zip(results).enumerate() {
                let res = res.stage("synth")?;
                let stem = format!("sample_{i:04}");
                codec::lattice_write(&res.lattice_before, lattices.join(format!("{stem}_before.artl"))).stage("synth")?;
                codec::lattice_write(&res.lattice_after, lattices.join(format!("{stem}_after.artl"))).stage("synth")?;
                write(&reports.join(format!("{stem}.json")), &pretty(&res.report(req.seed)))?;
                let s = SynthSample {
                    image: res.edited,
                    mask: req.mask.clone(),
                    prompt: req.prompt.clone(),
                    seed: req.seed,
                    corruption: None,
                };
                store(i, &s, None)?;
            }
        }
    }
    prompting::write_manifest(&l.path("synth/manifest.jsonl"), &records).stage("synth")?;
    Ok(format!("{} samples", records.len()))
}

fn load_synth(l: &Layout) -> Result<Vec<SynthSample>, CliError> {
    let dir = l.path("synth");
    let path = dir.join("manifest.jsonl");
    if !path.exists() {
        return Err(CliError::Pipeline { stage: "io", message: format!("{} missing (run synth first)", path.display()) });
    }
    let recs: Vec<SynthRecord> = prompting::read_manifest(&path).stage("io")?;
    recs.into_iter()
        .map(|r| {
            Ok(SynthSample {
                image: imagery::read_image(dir.join(&r.image_ref)).stage("io")?,
                mask: imagery::mask_read(dir.join(&r.mask_ref)).stage("io")?,
                prompt: r.prompt,
                seed: r.seed,
                corruption: None,
            })
        })
        .collect()
}

fn scores(samples: &[SynthSample]) -> Result<Vec<f64>, CliError> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| qaw::score(&s.image, &s.mask, &s.prompt))
        .collect::<Result<Vec<_>, _>>()
        .stage("weigh")
}

#[derive(Serialize)]
struct WeighDiagnostics {
    calibration: WeightConfig,
    n: usize,
    mean_score: f64,
    min_score: f64,
    max_score: f64,
    mean_weight: f64,
    min_weight: f64,
    max_weight: f64,
    zero_weights: usize,
}

pub fn weigh(cfg: &RunConfig) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let samples = load_synth(&l)?;
    let s = scores(&samples)?;
    let wc = cfg.weight_config();
    let report = qaw::calibrate_and_normalize(&s, &wc).stage("weigh")?;
    let out = l.dir("weights")?;
    write(&out.join("weights.csv"), &report.to_csv())?;
    let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
    let diag = WeighDiagnostics {
        calibration: wc,
        n: s.len(),
        mean_score: s.iter().sum::<f64>() / s.len() as f64,
        min_score: fold(&s, f64::min, f64::INFINITY),
        max_score: fold(&s, f64::max, f64::NEG_INFINITY),
        mean_weight: report.mean_weight,
        min_weight: fold(&report.weights, f64::min, f64::INFINITY),
        max_weight: fold(&report.weights, f64::max, f64::NEG_INFINITY),
        zero_weights: report.weights.iter().filter(|&&w| w == 0.0).count(),
    };
    write(&out.join("diagnostics.json"), &pretty(&diag))?;
    Ok(format!("{} samples, mean score {:.4}", s.len(), diag.mean_score))
}

fn load_weights(l: &Layout, n: usize) -> Result<Vec<f64>, CliError> {
    let text = read_text(&l.path("weights/weights.csv"), "io")?;
    let w: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|r| !r.is_empty())
        .map(|r| r.rsplit(',').next().unwrap_or("").parse::<f64>())
        .collect::<Result<_, _>>()
        .stage("io")?;
    if w.len() != n {
        return Err(CliError::Pipeline {
            stage: "io",
            message: format!("weights.csv has {} rows for {n} samples (re-run weigh)", w.len()),
        });
    }
    Ok(w)
}

fn detector_name(uniform: bool) -> &'static str {
    if uniform {
        "uniform"
    } else {
        "weighted"
    }
}

fn fit(cfg: &RunConfig, samples: &[SynthSample], weights: &[f64], normals: &[Image]) -> Result<(PatchScorer, detector::DetectorReport), CliError> {
    detector::train_detector(samples, weights, normals, &cfg.detector_config()).stage("train-detector")
}

pub fn train_detector(cfg: &RunConfig, uniform: bool) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let samples = load_synth(&l)?;
    let normals = list_images(&l.path("normals"))?;
    let weights = if uniform { vec![1.0; samples.len()] } else { load_weights(&l, samples.len())? };
    let (scorer, report) = fit(cfg, &samples, &weights, &normals)?;
    let out = l.dir("detector")?;
    let name = detector_name(uniform);
    scorer.save(out.join(format!("{name}.json"))).stage("train-detector")?;
    write(&out.join(format!("{name}_loss.csv")), &report.to_csv())?;
    Ok(format!("{name} detector, final loss {:.5}", report.loss_curve.last().copied().unwrap_or(f64::NAN)))
}

fn load_test(l: &Layout) -> Result<Vec<TestItem>, CliError> {
    let dir = l.path("test");
    let path = dir.join("manifest.jsonl");
    if !path.exists() {
        return Err(CliError::Pipeline { stage: "io", message: format!("{} missing (run gen-corpus first)", path.display()) });
    }
    let recs: Vec<TestRecord> = prompting::read_manifest(&path).stage("io")?;
    recs.into_iter()
        .map(|r| {
            Ok(TestItem {
                category: r.category,
                image: imagery::read_image(dir.join(&r.image_ref)).stage("io")?,
                mask: imagery::mask_read(dir.join(&r.mask_ref)).stage("io")?,
            })
        })
        .collect()
}

pub fn eval(cfg: &RunConfig, uniform: bool) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let name = detector_name(uniform);
    let path = l.path(&format!("detector/{name}.json"));
    read_text(&path, "io")?;
    let scorer = PatchScorer::load(&path).stage("io")?;
    let test = load_test(&l)?;
    let r = detector::evaluate(&scorer, &test, cfg.aggregation()).stage("eval")?;
    let out = l.dir("eval")?;
    write(&out.join(format!("{name}.csv")), &r.to_csv())?;
    let heat = l.dir(&format!("eval/heatmaps_{name}"))?;
    for (i, t) in test.iter().enumerate() {
        let h = detector::infer(&scorer, &t.image).stage("eval")?;
        imagery::write_image(&h.to_image(), heat.join(format!("{i:03}.pgm"))).stage("eval")?;
    }
    Ok(format!("{name}: image AUROC {:.4}, pixel AUROC {:.4}", r.image_auroc, r.pixel_auroc))
}

pub fn bench_mask_scaling(cfg: &RunConfig) -> Result<String, CliError> {
    let l = Layout::new(cfg);
    let cb = load_codebook(&l)?;
    let model = load_model(&l, cfg)?;
    let b = &cfg.bench;
    let img = experiment::random_texture(TextureKind::Grain, b.side, cfg.seed);
    let mask = PixelMask::from_fn(b.side, b.side, |x, y| x < b.side / 4 && y < b.side / 4).stage("bench")?;
    let prompt = prompting::sample_prompt(&mask, 1, cfg.seed).stage("bench")?;
    let pts = sampler::bench_mask_scaling(&img, &prompt, &model, &cb, &b.fractions, b.repeats, cfg.seed).stage("bench")?;
    let mut csv = String::from("fraction,masked_tokens,mean_seconds,stderr\n");
    for p in &pts {
        csv.push_str(&format!("{},{},{},{}\n", p.fraction, p.masked_tokens, p.mean_seconds, p.stderr));
    }
    let out = l.dir("bench")?;
    write(&out.join("mask_scaling.csv"), &csv)?;
    Ok(format!("{} fractions timed", pts.len()))
}

pub fn gamma_scan(cfg: &RunConfig, gammas: &[f64]) -> Result<String, CliError> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(CliError::Config("--gammas must be a nonempty list of positive numbers".into()));
    }
    let l = Layout::new(cfg);
    let samples = load_synth(&l)?;
    let normals = list_images(&l.path("normals"))?;
    let test = load_test(&l)?;
    let s = scores(&samples)?;
    let mut csv = String::from("gamma,image_auroc,pixel_auroc\n");
    for &g in gammas {
        let w = qaw::calibrate_and_normalize(&s, &WeightConfig::softmax(g)).stage("gamma-scan")?.weights;
        let (scorer, _) = fit(cfg, &samples, &w, &normals)?;
        let r = detector::evaluate(&scorer, &test, cfg.aggregation()).stage("gamma-scan")?;
        csv.push_str(&format!("{g},{:.6},{:.6}\n", r.image_auroc, r.pixel_auroc));
    }
    let out = l.dir("gamma_scan")?;
    write(&out.join("gamma_scan.csv"), &csv)?;
    Ok(format!("{} gammas", gammas.len()))
}
