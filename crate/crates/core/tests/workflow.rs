//! Cross-module flows: files on disk, codec and sampler, painter and scorer,
//! weighting and detector training.

use anomsynth::armodel::{self, TrainConfig};
use anomsynth::codec::{self, CodebookConfig};
use anomsynth::detector::{self, DetectorConfig};
use anomsynth::experiment::{self, CorpusConfig};
use anomsynth::imagery;
use anomsynth::prompting::{self, embed_prompt, Triplet, EMBED_DIM};
use anomsynth::qaw::{self, WeightConfig};
use anomsynth::sampler::{self, EditRequest};
use anomsynth::synthgen::{self, CorruptionMode, CorruptionPolicy, MaskShape, TextureKind};
use anomsynth::ArModel;

#[test]
fn triplets_written_to_disk_reload() {
    let dir = tempfile::tempdir().unwrap();
    let normals = dir.path().join("normals");
    let pool = dir.path().join("pool");
    let out = dir.path().join("out");
    for d in [&normals, &pool, &out] {
        std::fs::create_dir_all(d).unwrap();
    }
    for i in 0..3 {
        let img = experiment::random_texture(TextureKind::ALL[i], 32, i as u64);
        imagery::write_image(&img, normals.join(format!("n{i}.pgm"))).unwrap();
    }
    for i in 0..2 {
        let m = synthgen::gen_mask(MaskShape::Blob, 0.05, i, 64, 64).unwrap();
        imagery::mask_write(&m, pool.join(format!("m{i}.pgm"))).unwrap();
    }
    let triplets = prompting::build_triplets(&normals, &pool, &out, 6, 123).unwrap();
    assert_eq!(triplets.len(), 18);
    let back: Vec<Triplet> = prompting::read_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(back, triplets);
    for t in &back {
        let img = imagery::read_image(out.join(&t.image_ref)).unwrap();
        let mask = imagery::mask_read(out.join(&t.mask_ref)).unwrap();
        assert!(mask.matches(&img));
        // The prompt describes the resized mask, so the painter accepts it.
        synthgen::paint_defect(&img, &mask, &t.prompt, &CorruptionPolicy::faithful(), t.seed).unwrap();
    }
}

#[test]
fn trained_model_edits_stay_inside_the_footprint() {
    let imgs: Vec<_> = (0..4).map(|i| experiment::random_texture(TextureKind::ALL[i], 32, 40 + i as u64)).collect();
    let cb = codec::train_codebook(&imgs, &CodebookConfig { k: 8, patch_size: 8, iterations: 5, seed: 1 }).unwrap();
    let mut data = Vec::new();
    let mut regions = Vec::new();
    for (i, img) in imgs.iter().enumerate() {
        let mask = synthgen::gen_mask(MaskShape::Blob, 0.1, i as u64, 32, 32).unwrap();
        let prompt = prompting::sample_prompt(&mask, 1, i as u64).unwrap();
        let s = synthgen::paint_defect(img, &mask, &prompt, &CorruptionPolicy::faithful(), 0).unwrap();
        data.push((codec::encode(&s.image, &cb).unwrap(), embed_prompt(&prompt)));
        regions.push(codec::mask_to_partition(&mask, 8).unwrap());
    }
    let mut model = ArModel::new(cb.k(), EMBED_DIM, 4, 1, 3);
    let report = armodel::train_on_regions(&mut model, &data, &regions, &TrainConfig { epochs: 10, ..TrainConfig::default() }).unwrap();
    assert!(report.loss_curve.last().unwrap() <= &report.loss_curve[0]);

    let dir = tempfile::tempdir().unwrap();
    let mask = synthgen::gen_mask(MaskShape::Scratch, 0.08, 9, 32, 32).unwrap();
    let req = EditRequest {
        image: imgs[0].clone(),
        mask: mask.clone(),
        prompt: prompting::sample_prompt(&mask, 1, 5).unwrap(),
        seed: 11,
        temperature: None,
    };
    let res = sampler::edit(&req, &model, &cb).unwrap();
    let path = dir.path().join("after.artl");
    codec::lattice_write(&res.lattice_after, &path).unwrap();
    assert_eq!(codec::lattice_read_checked(&path, &cb).unwrap(), res.lattice_after);
    for y in 0..32 {
        for x in 0..32 {
            if !res.partition.is_masked(y / 8, x / 8) {
                assert_eq!(res.edited.get(x, y, 0), imgs[0].get(x, y, 0));
            }
        }
    }
    let again = sampler::edit(&req, &model, &cb).unwrap();
    assert!(res.same_outcome(&again));
}

#[test]
fn faithful_samples_outscore_corrupted_twins() {
    // Paired over 120 seeds: each corruption mode against its faithful twin.
    let cfg = CorpusConfig::default();
    let mut wins = 0;
    let mut total = 0;
    for seed in 0..120u64 {
        let base = experiment::random_texture(TextureKind::ALL[(seed % 4) as usize], 64, seed);
        let faithful = experiment::random_defect(&base, &cfg, &CorruptionPolicy::faithful(), seed);
        let mode = CorruptionMode::ALL[(seed % 3) as usize];
        let bad = synthgen::corrupt_region(&base, &faithful.mask, &faithful.prompt, mode, seed).unwrap();
        let s_good = qaw::score(&faithful.image, &faithful.mask, &faithful.prompt).unwrap();
        let s_bad = qaw::score(&bad, &faithful.mask, &faithful.prompt).unwrap();
        total += 1;
        if s_good > s_bad {
            wins += 1;
        }
    }
    // One-sided sign test at p < 0.01 for n = 120 needs at least 73 wins.
    assert!(wins >= 73, "{wins}/{total}");
}

#[test]
fn weighting_downweights_corrupted_samples() {
    let corpus = experiment::build_corpus(&CorpusConfig { synthetic: 60, ..CorpusConfig::default() });
    let scores = experiment::corpus_scores(&corpus);
    let w = qaw::calibrate_and_normalize(&scores, &WeightConfig::softmax(2.5)).unwrap().weights;
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for (s, w) in corpus.synthetic.iter().zip(&w) {
        if s.corruption.is_some() {
            bad.push(*w)
        } else {
            good.push(*w)
        }
    }
    assert!(!bad.is_empty() && !good.is_empty());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&good) > mean(&bad), "{} vs {}", mean(&good), mean(&bad));
}

#[test]
fn detector_learns_painted_defects() {
    let corpus = experiment::build_corpus(&CorpusConfig {
        synthetic: 40,
        train_normals: 12,
        test_normals: 8,
        test_anomalous: 16,
        inconsistent_fraction: 0.0,
        ..CorpusConfig::default()
    });
    let w = vec![1.0; corpus.synthetic.len()];
    let cfg = DetectorConfig { epochs: 20, ..DetectorConfig::default() };
    let (scorer, report) = detector::train_detector(&corpus.synthetic, &w, &corpus.normals, &cfg).unwrap();
    assert!(report.loss_curve.last().unwrap() < &report.loss_curve[0]);
    let r = detector::evaluate(&scorer, &corpus.test, detector::ImageAggregation::Max).unwrap();
    assert!(r.pixel_auroc > 0.9, "{}", r.pixel_auroc);
    assert_eq!(r.per_category.len(), 4);
}
