//! Token-anchored masked autoregressive editing.
//!
//! An edit encodes the image, splits the lattice into context tokens (no
//! mask pixel in their footprint) and masked tokens, then visits the masked
//! tokens once in a uniformly random order. Each visit samples from the
//! model given every context token, every already-visited token and the
//! prompt; not-yet-visited masked tokens are presented as UNKNOWN.
//!
//! Context tokens are never part of the sampling loop, so they keep their
//! original value with probability one. The output image takes original
//! pixels on context footprints and decoded pixels on masked footprints,
//! which makes the edited image byte-identical to the input outside the
//! masked footprints.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::armodel::{sample_token, ArError, ArModel, PartialLattice};
use crate::codec::{self, Codebook, CodecError, IndexPartition, TokenLattice};
use crate::imagery::{Image, PixelMask};
use crate::prompting::{embed_prompt, PromptEmbedding, PromptRecord};
use crate::rng;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask covers no token")]
    DegenerateMask,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ArError),
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: Image,
    pub mask: PixelMask,
    pub prompt: PromptRecord,
    pub seed: u64,
    /// Overrides the model's sampling temperature.
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub edited: Image,
    pub lattice_before: TokenLattice,
    pub lattice_after: TokenLattice,
    pub partition: IndexPartition,
    /// Visit order over the masked tokens.
    pub order: Vec<(usize, usize)>,
    /// Wall-clock seconds spent in the edit.
    pub elapsed: f64,
}

impl EditResult {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &EditResult) -> bool {
        self.edited == other.edited
            && self.lattice_before == other.lattice_before
            && self.lattice_after == other.lattice_after
            && self.partition == other.partition
            && self.order == other.order
    }

    pub fn report(&self, seed: u64) -> EditReport {
        EditReport {
            seed,
            masked_tokens: self.order.len(),
            order: self.order.clone(),
            elapsed: self.elapsed,
        }
    }
}

/// JSON edit report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub seed: u64,
    pub masked_tokens: usize,
    pub order: Vec<(usize, usize)>,
    pub elapsed: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateVerdict {
    pub holds: bool,
    /// Context coordinates whose token changed.
    pub violations: Vec<(usize, usize)>,
}

/// Checks that `after` equals `before` on every context coordinate.
pub fn gate_check(before: &TokenLattice, after: &TokenLattice, partition: &IndexPartition) -> Result<GateVerdict, SampleError> {
    if !before.same_shape(after) || before.h() != partition.h() || before.w() != partition.w() {
        return Err(SampleError::ShapeMismatch(format!(
            "{}x{} vs {}x{} vs partition {}x{}",
            before.h(),
            before.w(),
            after.h(),
            after.w(),
            partition.h(),
            partition.w()
        )));
    }
    let violations: Vec<(usize, usize)> = partition
        .context()
        .iter()
        .copied()
        .filter(|&(i, j)| before.get(i, j) != after.get(i, j))
        .collect();
    Ok(GateVerdict {
        holds: violations.is_empty(),
        violations,
    })
}

/// Resamples the tokens listed in `order`, in that order, leaving every
/// other token of `z` untouched.
pub fn sample_masked<R: Rng + ?Sized>(
    z: &TokenLattice,
    order: &[(usize, usize)],
    model: &ArModel,
    prompt: &PromptEmbedding,
    temperature: f64,
    rng: &mut R,
) -> Result<TokenLattice, SampleError> {
    let mut state = PartialLattice::from_lattice(z);
    for &(i, j) in order {
        if i >= z.h() || j >= z.w() {
            return Err(ArError::OutOfBounds { i, j, h: z.h(), w: z.w() }.into());
        }
        state.set(i, j, None);
    }
    let mut out = z.clone();
    for &(i, j) in order {
        let logits = model.logits(&state, (i, j), prompt)?;
        let t = sample_token(&logits, temperature, rng) as u16;
        state.set(i, j, Some(t));
        out.set(i, j, t);
    }
    Ok(out)
}

pub fn edit(req: &EditRequest, model: &ArModel, cb: &Codebook) -> Result<EditResult, SampleError> {
    edit_indexed(req, model, cb, 0)
}

/// Edit using rng stream `index` of the request seed.
pub fn edit_indexed(req: &EditRequest, model: &ArModel, cb: &Codebook, index: u64) -> Result<EditResult, SampleError> {
    let start = Instant::now();
    if !req.mask.matches(&req.image) {
        return Err(SampleError::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            req.mask.width(),
            req.mask.height(),
            req.image.width(),
            req.image.height()
        )));
    }
    if req.mask.is_empty() {
        return Err(SampleError::InvalidRequest("mask is empty".into()));
    }
    if model.k() != cb.k() {
        return Err(SampleError::InvalidRequest(format!("model K = {}, codebook K = {}", model.k(), cb.k())));
    }
    let temperature = req.temperature.unwrap_or(model.temperature());
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(SampleError::InvalidRequest(format!("temperature {temperature}")));
    }
    let prompt = embed_prompt(&req.prompt);

    let before = codec::encode(&req.image, cb)?;
    let partition = codec::mask_to_partition(&req.mask, cb.patch_size())?;
    if partition.masked().is_empty() {
        return Err(SampleError::DegenerateMask);
    }
    let mut g = rng::stream(req.seed, index);
    let mut order = partition.masked().to_vec();
    order.shuffle(&mut g);
    let after = sample_masked(&before, &order, model, &prompt, temperature, &mut g)?;

    let decoded = codec::decode(&after, cb)?;
    let edited = composite(&req.image, &decoded, &partition, cb.patch_size());
    let verdict = gate_check(&before, &after, &partition)?;
    assert!(verdict.holds, "context tokens changed: {:?}", verdict.violations);

    Ok(EditResult {
        edited,
        lattice_before: before,
        lattice_after: after,
        partition,
        order,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Original pixels on context footprints, decoded pixels on masked ones.
fn composite(original: &Image, decoded: &Image, partition: &IndexPartition, p: usize) -> Image {
    let mut out = original.clone();
    let c = original.channels();
    for &(i, j) in partition.masked() {
        for dy in 0..p {
            let start = out.index(j * p, i * p + dy, 0);
            out.data_mut()[start..start + p * c].copy_from_slice(&decoded.data()[start..start + p * c]);
        }
    }
    out
}

/// Independent edits; slot `i` uses rng stream `i`, so the output is the
/// same for any `parallelism`. A failing request only fails its own slot.
pub fn edit_batch(
    requests: &[EditRequest],
    model: &ArModel,
    cb: &Codebook,
    parallelism: usize,
) -> Vec<Result<EditResult, SampleError>> {
    let run = || {
        requests
            .par_iter()
            .enumerate()
            .map(|(i, r)| edit_indexed(r, model, cb, i as u64))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => requests
            .iter()
            .enumerate()
            .map(|(i, r)| edit_indexed(r, model, cb, i as u64))
            .collect(),
    }
}

/// Pixel mask covering the footprints of `fraction` of the lattice tokens,
/// chosen by a seeded permutation.
pub fn token_fraction_mask(h: usize, w: usize, p: usize, fraction: f64, seed: u64) -> Result<PixelMask, SampleError> {
    let n = h * w;
    let count = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let mut flags = vec![false; n];
    for &t in &idx[..count] {
        flags[t] = true;
    }
    PixelMask::from_fn(w * p, h * p, |x, y| flags[(y / p) * w + x / p])
        .map_err(|e| SampleError::InvalidRequest(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub fraction: f64,
    pub masked_tokens: usize,
    pub mean_seconds: f64,
    pub stderr: f64,
}

/// Times `edit` on `image` for each masked-token fraction.
pub fn bench_mask_scaling(
    image: &Image,
    prompt: &PromptRecord,
    model: &ArModel,
    cb: &Codebook,
    fractions: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScalingPoint>, SampleError> {
    let p = cb.patch_size();
    let (h, w) = (image.height() / p, image.width() / p);
    let masks: Vec<PixelMask> = fractions
        .iter()
        .enumerate()
        .map(|(k, &f)| token_fraction_mask(h, w, p, f, rng::derive_seed(seed, &[k as u64])))
        .collect::<Result<_, _>>()?;
    let mut times = vec![Vec::with_capacity(repeats); fractions.len()];
    let mut counts = vec![0; fractions.len()];
    // Warm-up, then interleave fractions so drift affects all of them alike.
    edit(&request(image, &masks[0], prompt, seed), model, cb)?;
    for r in 0..repeats.max(1) {
        for (k, mask) in masks.iter().enumerate() {
            let res = edit(&request(image, mask, prompt, rng::derive_seed(seed, &[k as u64, r as u64])), model, cb)?;
            counts[k] = res.order.len();
            times[k].push(res.elapsed);
        }
    }
    Ok(fractions
        .iter()
        .zip(times)
        .zip(counts)
        .map(|((&fraction, t), masked_tokens)| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = if t.len() > 1 {
                t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            ScalingPoint {
                fraction,
                masked_tokens,
                mean_seconds: mean,
                stderr: (var / n).sqrt(),
            }
        })
        .collect())
}

fn request(image: &Image, mask: &PixelMask, prompt: &PromptRecord, seed: u64) -> EditRequest {
    EditRequest {
        image: image.clone(),
        mask: mask.clone(),
        prompt: prompt.clone(),
        seed,
        temperature: None,
    }
}
