//! Windowed conditional categorical model over codebook tokens.
//!
//! The logits for position `(i, j)` are an affine function of the
//! concatenation of
//!
//! * the learned embeddings of the `(2r+1)²` tokens in the window centred
//!   on `(i, j)` (unknown or off-lattice cells use a dedicated UNKNOWN slot),
//! * the prompt embedding,
//! * the normalized position `((i + 0.5) / h, (j + 0.5) / w)`.
//!
//! Training maximizes the likelihood of true tokens at masked positions,
//! with part of each masked set revealed in a random order so the model
//! sees the same partial states the sampler produces. The masked set is
//! either random or, with [`train_on_regions`], the defect footprint that an
//! edit would resample.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{IndexPartition, TokenLattice};
use crate::prompting::PromptEmbedding;
use crate::rng;

pub const DEFAULT_EMBED_WIDTH: usize = 8;
pub const DEFAULT_RADIUS: usize = 2;
/// Sampling temperature default.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ArError {
    #[error("position ({i}, {j}) outside {h}x{w} lattice")]
    OutOfBounds { i: usize, j: usize, h: usize, w: usize },
    #[error("no training lattices")]
    EmptyTrainingSet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Lattice state during sampling; `None` marks an unavailable position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialLattice {
    h: usize,
    w: usize,
    cells: Vec<Option<u16>>,
}

impl PartialLattice {
    pub fn unknown(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![None; h * w],
        }
    }

    pub fn from_lattice(z: &TokenLattice) -> Self {
        Self {
            h: z.h(),
            w: z.w(),
            cells: z.tokens().iter().map(|&t| Some(t)).collect(),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u16> {
        self.cells[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Option<u16>) {
        self.cells[i * self.w + j] = v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    e: usize,
    r: usize,
    temperature: f64,
    /// `(K + 1) × e`, row-major; row `K` is UNKNOWN.
    token_embed: Vec<f64>,
    /// `K × feature_dim`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ArModel {
    /// Zero output weights and small seeded token embeddings, so the
    /// untrained model predicts the uniform distribution.
    pub fn new(k: usize, d: usize, e: usize, r: usize, seed: u64) -> Self {
        let mut m = Self::zeros(k, d, e, r);
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let mut g = rng::seeded(seed);
        for v in m.token_embed.iter_mut() {
            *v = normal.sample(&mut g);
        }
        m
    }

    pub fn zeros(k: usize, d: usize, e: usize, r: usize) -> Self {
        let window = (2 * r + 1) * (2 * r + 1);
        let f = window * e + d + 2;
        Self {
            k,
            d,
            e,
            r,
            temperature: DEFAULT_TEMPERATURE,
            token_embed: vec![0.0; (k + 1) * e],
            weights: vec![0.0; k * f],
            bias: vec![0.0; k],
        }
    }

    /// Every parameter drawn from N(0, scale²). Useful for fixtures with
    /// non-trivial conditionals.
    pub fn random(k: usize, d: usize, e: usize, r: usize, scale: f64, seed: u64) -> Self {
        let mut m = Self::zeros(k, d, e, r);
        let normal = Normal::new(0.0, scale).expect("valid std");
        let mut g = rng::seeded(seed);
        for v in m
            .token_embed
            .iter_mut()
            .chain(m.weights.iter_mut())
            .chain(m.bias.iter_mut())
        {
            *v = normal.sample(&mut g);
        }
        m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prompt_dim(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> usize {
        self.r
    }

    pub fn embed_width(&self) -> usize {
        self.e
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<(), ArError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(ArError::InvalidConfig(format!("temperature must be positive, got {t}")));
        }
        self.temperature = t;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.window_len() * self.e + self.d + 2
    }

    fn window_len(&self) -> usize {
        (2 * self.r + 1) * (2 * self.r + 1)
    }

    fn prompt_offset(&self) -> usize {
        self.window_len() * self.e
    }

    pub fn is_finite(&self) -> bool {
        self.token_embed
            .iter()
            .chain(&self.weights)
            .chain(&self.bias)
            .all(|v| v.is_finite())
    }

    /// Embedding-table row for each window cell (K for unknown/off-lattice).
    fn window_slots(&self, state: &PartialLattice, i: usize, j: usize) -> Vec<usize> {
        let r = self.r as isize;
        let mut slots = Vec::with_capacity(self.window_len());
        for di in -r..=r {
            for dj in -r..=r {
                let (ii, jj) = (i as isize + di, j as isize + dj);
                let inside = ii >= 0 && jj >= 0 && (ii as usize) < state.h && (jj as usize) < state.w;
                let slot = if inside {
                    state
                        .get(ii as usize, jj as usize)
                        .map_or(self.k, |t| t as usize)
                } else {
                    self.k
                };
                slots.push(slot);
            }
        }
        slots
    }

    fn features(&self, state: &PartialLattice, i: usize, j: usize, prompt: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let slots = self.window_slots(state, i, j);
        let mut f = Vec::with_capacity(self.feature_dim());
        for &s in &slots {
            f.extend_from_slice(&self.token_embed[s * self.e..(s + 1) * self.e]);
        }
        f.extend_from_slice(prompt);
        f.push((i as f64 + 0.5) / state.h as f64);
        f.push((j as f64 + 0.5) / state.w as f64);
        (f, slots)
    }

    fn affine(&self, f: &[f64]) -> Vec<f64> {
        let fd = self.feature_dim();
        self.weights
            .chunks_exact(fd)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    /// Unscaled logits for position `(i, j)`.
    pub fn logits(&self, state: &PartialLattice, pos: (usize, usize), prompt: &PromptEmbedding) -> Result<Vec<f64>, ArError> {
        self.logits_for_vector(state, pos, prompt.vector())
    }

    /// Same as [`ArModel::logits`] for an arbitrary (not necessarily unit)
    /// prompt vector; used to probe sensitivity to prompt perturbations.
    pub fn logits_for_vector(&self, state: &PartialLattice, pos: (usize, usize), prompt: &[f64]) -> Result<Vec<f64>, ArError> {
        let (i, j) = pos;
        if i >= state.h || j >= state.w {
            return Err(ArError::OutOfBounds { i, j, h: state.h, w: state.w });
        }
        if prompt.len() != self.d {
            return Err(ArError::DimensionMismatch(format!(
                "prompt has dimension {}, model expects {}",
                prompt.len(),
                self.d
            )));
        }
        let (f, _) = self.features(state, i, j, prompt);
        Ok(self.affine(&f))
    }

    /// The `K × d` block of weights applied to the prompt embedding.
    pub fn prompt_block(&self) -> DMatrix<f64> {
        let fd = self.feature_dim();
        let off = self.prompt_offset();
        DMatrix::from_fn(self.k, self.d, |row, col| self.weights[row * fd + off + col])
    }

    /// Spectral norm of the prompt block: the Lipschitz constant of the
    /// logits with respect to the prompt embedding.
    pub fn prompt_lipschitz_bound(&self) -> f64 {
        self.prompt_block().singular_values().max()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArError> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let fd = m.feature_dim();
        if m.token_embed.len() != (m.k + 1) * m.e || m.weights.len() != m.k * fd || m.bias.len() != m.k {
            return Err(ArError::DimensionMismatch("parameter arrays do not match K, d, e, r".into()));
        }
        if !m.is_finite() || !(m.temperature > 0.0) {
            return Err(ArError::InvalidConfig("non-finite weights or non-positive temperature".into()));
        }
        Ok(m)
    }
}

/// Softmax of `logits / temperature`. A temperature of zero yields the
/// one-hot argmax (lowest index on ties).
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let best = argmax(logits);
        return (0..logits.len()).map(|k| if k == best { 1.0 } else { 0.0 }).collect();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Categorical draw from `softmax(logits / temperature)` by inverse CDF.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let p = softmax(logits, temperature);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, pk) in p.iter().enumerate() {
        if *pk > 0.0 {
            last = k;
        }
        acc += pk;
        if u < acc {
            return k;
        }
    }
    last
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Lattices per gradient step.
    pub batch_size: usize,
    pub mask_rate_range: (f64, f64),
    /// Masked positions scored per lattice per step.
    pub targets_per_example: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // Full-scale runs use 2000 epochs; 200 keeps desk-scale runs short.
            epochs: 200,
            learning_rate: 0.1,
            batch_size: 8,
            mask_rate_range: (0.1, 0.9),
            targets_per_example: 8,
            seed: 123,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ArError> {
        let (lo, hi) = self.mask_rate_range;
        if self.epochs == 0 || self.batch_size == 0 || self.targets_per_example == 0 {
            return Err(ArError::InvalidConfig("epochs, batch_size and targets_per_example must be >= 1".into()));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(ArError::InvalidConfig(format!("mask_rate_range ({lo}, {hi}) must lie in (0, 1)")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ArError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One training step's masked view of a lattice.
struct MaskedView {
    state: PartialLattice,
    targets: Vec<(usize, usize)>,
}

fn masked_view<R: Rng>(z: &TokenLattice, region: Option<&IndexPartition>, cfg: &TrainConfig, rng: &mut R) -> MaskedView {
    let mut masked: Vec<(usize, usize)> = match region {
        Some(part) if !part.masked().is_empty() => part.masked().to_vec(),
        _ => {
            let (lo, hi) = cfg.mask_rate_range;
            let rate = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let mut m = Vec::new();
            for i in 0..z.h() {
                for j in 0..z.w() {
                    if rng.gen_bool(rate) {
                        m.push((i, j));
                    }
                }
            }
            m
        }
    };
    if masked.is_empty() {
        masked.push((rng.gen_range(0..z.h()), rng.gen_range(0..z.w())));
    }
    masked.shuffle(rng);
    // The first `revealed` masked positions play the role of already-sampled tokens.
    let revealed = rng.gen_range(0..masked.len());
    let mut state = PartialLattice::from_lattice(z);
    for &(i, j) in &masked[revealed..] {
        state.set(i, j, None);
    }
    let mut targets = masked.split_off(revealed);
    targets.truncate(cfg.targets_per_example);
    MaskedView { state, targets }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in self.loss_curve.iter().enumerate() {
            s.push_str(&format!("{},{}\n", e + 1, l));
        }
        s
    }
}

/// Minibatch SGD on masked-token cross-entropy. Deterministic for a fixed seed.
pub fn train(
    model: &mut ArModel,
    data: &[(TokenLattice, PromptEmbedding)],
    cfg: &TrainConfig,
) -> Result<TrainReport, ArError> {
    fit(model, data, None, cfg)
}

/// Same as [`train`], but each example masks exactly the tokens of its
/// region (the footprint of the defect mask), as an edit would. Examples
/// with an empty region fall back to random masking.
pub fn train_on_regions(
    model: &mut ArModel,
    data: &[(TokenLattice, PromptEmbedding)],
    regions: &[IndexPartition],
    cfg: &TrainConfig,
) -> Result<TrainReport, ArError> {
    if regions.len() != data.len() {
        return Err(ArError::DimensionMismatch(format!("{} regions for {} lattices", regions.len(), data.len())));
    }
    for ((z, _), r) in data.iter().zip(regions) {
        if r.h() != z.h() || r.w() != z.w() {
            return Err(ArError::DimensionMismatch(format!("region {}x{} on lattice {}x{}", r.h(), r.w(), z.h(), z.w())));
        }
    }
    fit(model, data, Some(regions), cfg)
}

fn fit(
    model: &mut ArModel,
    data: &[(TokenLattice, PromptEmbedding)],
    regions: Option<&[IndexPartition]>,
    cfg: &TrainConfig,
) -> Result<TrainReport, ArError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ArError::EmptyTrainingSet);
    }
    for (z, p) in data {
        if z.k() != model.k {
            return Err(ArError::DimensionMismatch(format!("lattice K = {}, model K = {}", z.k(), model.k)));
        }
        if p.dim() != model.d {
            return Err(ArError::DimensionMismatch(format!("prompt dim {}, model d = {}", p.dim(), model.d)));
        }
    }
    let mut g = rng::seeded(cfg.seed);
    let fd = model.feature_dim();
    let e = model.e;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut grad_w = vec![0.0; model.weights.len()];
    let mut grad_b = vec![0.0; model.bias.len()];
    let mut grad_e = vec![0.0; model.token_embed.len()];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut g);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad_w.fill(0.0);
            grad_b.fill(0.0);
            grad_e.fill(0.0);
            let mut n = 0usize;
            for &idx in batch {
                let (z, prompt) = &data[idx];
                let view = masked_view(z, regions.map(|r| &r[idx]), cfg, &mut g);
                for &(i, j) in &view.targets {
                    let (f, slots) = model.features(&view.state, i, j, prompt.vector());
                    let p = softmax(&model.affine(&f), 1.0);
                    let y = z.get(i, j) as usize;
                    epoch_loss -= p[y].max(1e-300).ln();
                    n += 1;
                    for (kk, pk) in p.iter().enumerate() {
                        let dz = pk - if kk == y { 1.0 } else { 0.0 };
                        grad_b[kk] += dz;
                        let row = &model.weights[kk * fd..(kk + 1) * fd];
                        let gw = &mut grad_w[kk * fd..(kk + 1) * fd];
                        for (gwi, fi) in gw.iter_mut().zip(&f) {
                            *gwi += dz * fi;
                        }
                        for (c, &s) in slots.iter().enumerate() {
                            let ge = &mut grad_e[s * e..(s + 1) * e];
                            for (q, gq) in ge.iter_mut().enumerate() {
                                *gq += dz * row[c * e + q];
                            }
                        }
                    }
                }
            }
            epoch_n += n;
            if n == 0 {
                continue;
            }
            let step = cfg.learning_rate / n as f64;
            for (w, gw) in model.weights.iter_mut().zip(&grad_w) {
                *w -= step * gw;
            }
            for (b, gb) in model.bias.iter_mut().zip(&grad_b) {
                *b -= step * gb;
            }
            for (t, ge) in model.token_embed.iter_mut().zip(&grad_e) {
                *t -= step * ge;
            }
        }
        curve.push(epoch_loss / epoch_n.max(1) as f64);
    }
    Ok(TrainReport { loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::EMBED_DIM;

    fn unit_prompt(d: usize, seed: u64) -> PromptEmbedding {
        let mut g = rng::seeded(seed);
        let raw: Vec<f64> = (0..d).map(|_| g.gen_range(-1.0..1.0)).collect();
        PromptEmbedding::from_raw(&raw).unwrap()
    }

    fn random_state(h: usize, w: usize, k: usize, seed: u64) -> PartialLattice {
        let mut g = rng::seeded(seed);
        let mut s = PartialLattice::unknown(h, w);
        for i in 0..h {
            for j in 0..w {
                if g.gen_bool(0.7) {
                    s.set(i, j, Some(g.gen_range(0..k) as u16));
                }
            }
        }
        s
    }

    #[test]
    fn zero_map_gives_uniform_logits() {
        let m = ArModel::zeros(5, 4, 3, 2);
        let l = m.logits(&PartialLattice::unknown(3, 3), (1, 1), &unit_prompt(4, 1)).unwrap();
        assert!(l.iter().all(|&v| v == l[0]));
    }

    #[test]
    fn logits_are_deterministic_and_bounds_checked() {
        let m = ArModel::random(4, 3, 2, 1, 0.3, 9);
        let s = random_state(4, 4, 4, 2);
        let p = unit_prompt(3, 3);
        assert_eq!(m.logits(&s, (2, 3), &p).unwrap(), m.logits(&s, (2, 3), &p).unwrap());
        assert!(matches!(m.logits(&s, (4, 0), &p), Err(ArError::OutOfBounds { .. })));
        assert!(matches!(m.logits(&s, (0, 0), &unit_prompt(5, 1)), Err(ArError::DimensionMismatch(_))));
    }

    #[test]
    fn logits_ignore_tokens_outside_window() {
        let m = ArModel::random(3, 2, 2, 1, 0.5, 4);
        let p = unit_prompt(2, 0);
        let base = random_state(5, 5, 3, 8);
        let pos = (2, 2);
        let reference = m.logits(&base, pos, &p).unwrap();
        for i in 0..5usize {
            for j in 0..5usize {
                if i.abs_diff(pos.0) <= 1 && j.abs_diff(pos.1) <= 1 {
                    continue;
                }
                for v in [None, Some(0), Some(1), Some(2)] {
                    let mut s = base.clone();
                    s.set(i, j, v);
                    assert_eq!(m.logits(&s, pos, &p).unwrap(), reference);
                }
            }
        }
    }

    #[test]
    fn prompt_perturbation_respects_operator_norm() {
        let m = ArModel::random(6, EMBED_DIM, 2, 1, 0.4, 21);
        let bound = m.prompt_lipschitz_bound();
        let mut g = rng::seeded(5);
        for t in 0..100 {
            let s = random_state(4, 4, 6, t);
            let p = unit_prompt(EMBED_DIM, 1000 + t);
            let delta: Vec<f64> = (0..EMBED_DIM).map(|_| g.gen_range(-0.1..0.1)).collect();
            let moved: Vec<f64> = p.vector().iter().zip(&delta).map(|(a, b)| a + b).collect();
            let a = m.logits(&s, (1, 2), &p).unwrap();
            let b = m.logits_for_vector(&s, (1, 2), &moved).unwrap();
            let dl = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dn = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(dl <= bound * dn * (1.0 + 1e-9), "{dl} > {bound} * {dn}");
        }
    }

    #[test]
    fn softmax_arithmetic() {
        let p = softmax(&[10.0, -10.0, -10.0], 0.7);
        // 1 / (1 + 2 exp(-20 / 0.7))
        let exact = 1.0 / (1.0 + 2.0 * (-20.0f64 / 0.7).exp());
        assert!((p[0] - exact).abs() < 1e-15);
        assert!(p[0] > 0.999);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(softmax(&[0.1, 0.5, 0.5], 0.0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn dominant_logit_almost_always_drawn() {
        let mut g = rng::seeded(1);
        let hits = (0..10_000).filter(|_| sample_token(&[10.0, -10.0, -10.0], 0.7, &mut g) == 0).count();
        assert_eq!(hits, 10_000);
    }

    #[test]
    fn equal_logits_sample_uniformly() {
        let mut g = rng::seeded(77);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_token(&[0.3; 4], 0.7, &mut g)] += 1;
        }
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let draw = |seed| {
            let mut g = rng::seeded(seed);
            (0..50).map(|_| sample_token(&[0.0, 1.0, 0.5], 0.7, &mut g)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    fn constant_corpus(k: usize, token: u16, n: usize) -> Vec<(TokenLattice, PromptEmbedding)> {
        (0..n)
            .map(|s| {
                (
                    TokenLattice::new(4, 4, k, vec![token; 16], [0; 32]).unwrap(),
                    unit_prompt(EMBED_DIM, s as u64),
                )
            })
            .collect()
    }

    #[test]
    fn constant_corpus_is_learned() {
        let data = constant_corpus(5, 3, 6);
        let mut m = ArModel::new(5, EMBED_DIM, 4, 1, 1);
        let cfg = TrainConfig { epochs: 30, learning_rate: 0.5, ..TrainConfig::default() };
        let report = train(&mut m, &data, &cfg).unwrap();
        assert!(report.loss_curve.last().unwrap() < &report.loss_curve[0]);
        let s = PartialLattice::unknown(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(argmax(&m.logits(&s, (i, j), &data[0].1).unwrap()), 3);
            }
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data: Vec<_> = (0..4)
            .map(|s| {
                let mut g = rng::seeded(s);
                let t: Vec<u16> = (0..16).map(|_| g.gen_range(0..4)).collect();
                (TokenLattice::new(4, 4, 4, t, [0; 32]).unwrap(), unit_prompt(EMBED_DIM, s))
            })
            .collect();
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let mut a = ArModel::new(4, EMBED_DIM, 3, 1, 2);
        let mut b = a.clone();
        train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_errors() {
        let mut m = ArModel::new(4, EMBED_DIM, 3, 1, 2);
        assert!(matches!(train(&mut m, &[], &TrainConfig::default()), Err(ArError::EmptyTrainingSet)));
        let bad = TrainConfig { mask_rate_range: (0.0, 0.5), ..TrainConfig::default() };
        assert!(matches!(train(&mut m, &constant_corpus(4, 0, 1), &bad), Err(ArError::InvalidConfig(_))));
        assert!(matches!(train(&mut m, &constant_corpus(5, 0, 1), &TrainConfig::default()), Err(ArError::DimensionMismatch(_))));
    }

    #[test]
    fn region_training_learns_prompt_dependence() {
        // Background token 0; the 2x2 region holds 1 or 2 depending on the prompt.
        let mut e = [[0.0; EMBED_DIM]; 2];
        e[0][0] = 1.0;
        e[1][1] = 1.0;
        let part = IndexPartition::from_flags(4, 4, (0..16).map(|t| [5, 6, 9, 10].contains(&t)).collect());
        let mut data = Vec::new();
        let mut regions = Vec::new();
        for n in 0..8 {
            let fill = 1 + (n % 2) as u16;
            let t: Vec<u16> = (0..16).map(|q| if part.is_masked(q / 4, q % 4) { fill } else { 0 }).collect();
            data.push((TokenLattice::new(4, 4, 3, t, [0; 32]).unwrap(), PromptEmbedding::from_raw(&e[n % 2]).unwrap()));
            regions.push(part.clone());
        }
        let mut m = ArModel::new(3, EMBED_DIM, 3, 1, 4);
        let cfg = TrainConfig { epochs: 60, learning_rate: 0.5, ..TrainConfig::default() };
        train_on_regions(&mut m, &data, &regions, &cfg).unwrap();
        let mut s = PartialLattice::from_lattice(&data[0].0);
        for &(i, j) in part.masked() {
            s.set(i, j, None);
        }
        for (n, want) in [(0, 1), (1, 2)] {
            assert_eq!(argmax(&m.logits(&s, part.masked()[0], &data[n].1).unwrap()), want);
        }
        assert!(matches!(train_on_regions(&mut m, &data, &regions[..1], &cfg), Err(ArError::DimensionMismatch(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = ArModel::random(3, 2, 2, 1, 0.1, 5);
        m.save(&path).unwrap();
        assert_eq!(ArModel::load(&path).unwrap(), m);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["K"], 3);
        assert_eq!(v["temperature"], 0.7);
    }
}
