//! Patch-wise vector quantizer.
//!
//! Each non-overlapping `patch_size × patch_size` block of an image maps to
//! the index of its nearest codebook entry, and decoding paints each block
//! from its own entry. Because blocks never overlap, a decoded pixel depends
//! on exactly one token, which is what lets the sampler promise byte-exact
//! context preservation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagery::{Image, ImageError, PixelMask};
use crate::rng;

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_PATCH_SIZE: usize = 8;

const LATTICE_MAGIC: &[u8; 4] = b"ARTL";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("only {distinct} distinct patches available, codebook needs {k}")]
    TooFewPatches { distinct: usize, k: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("lattice was encoded with a different codebook")]
    CodebookMismatch,
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("bad magic, expected ARTL")]
    BadMagic,
    #[error("lattice hash does not match the expected codebook")]
    HashMismatch,
    #[error("lattice file truncated")]
    Truncated,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Content hash of a codebook, used to tie lattices to the codebook that produced them.
pub type CodebookId = [u8; 32];

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    patch_size: usize,
    channels: usize,
    entries: Vec<Vec<f64>>,
    id: CodebookId,
}

#[derive(Serialize, Deserialize)]
struct CodebookJson {
    patch_size: usize,
    channels: usize,
    #[serde(rename = "K")]
    k: usize,
    entries: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(patch_size: usize, channels: usize, entries: Vec<Vec<f64>>) -> Result<Self, CodecError> {
        let bad = |m: String| Err(CodecError::InvalidCodebook(m));
        if patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if channels != 1 && channels != 3 {
            return bad(format!("channels must be 1 or 3, got {channels}"));
        }
        if entries.len() < 2 || entries.len() > u16::MAX as usize {
            return bad(format!("K must be in [2, 65535], got {}", entries.len()));
        }
        let dim = patch_size * patch_size * channels;
        for (i, e) in entries.iter().enumerate() {
            if e.len() != dim {
                return bad(format!("entry {i} has length {}, expected {dim}", e.len()));
            }
            if e.iter().any(|v| !v.is_finite() || !(0.0..=255.0).contains(v)) {
                return bad(format!("entry {i} has values outside [0, 255]"));
            }
        }
        let mut seen = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            let key: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
            if let Some(j) = seen.insert(key, i) {
                return bad(format!("entries {j} and {i} are identical"));
            }
        }
        let id = hash_entries(patch_size, channels, &entries);
        Ok(Self {
            patch_size,
            channels,
            entries,
            id,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn id(&self) -> &CodebookId {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Nearest entry by squared Euclidean distance, ties to the lowest index.
    pub fn nearest(&self, patch: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, e) in self.entries.iter().enumerate() {
            let d = sq_dist(patch, e);
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    pub fn to_json(&self) -> Result<String, CodecError> {
        Ok(serde_json::to_string(&CodebookJson {
            patch_size: self.patch_size,
            channels: self.channels,
            k: self.k(),
            entries: self.entries.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self, CodecError> {
        let j: CodebookJson = serde_json::from_str(s)?;
        if j.k != j.entries.len() {
            return Err(CodecError::InvalidCodebook(format!(
                "K = {} but {} entries present",
                j.k,
                j.entries.len()
            )));
        }
        Self::new(j.patch_size, j.channels, j.entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn hash_entries(patch_size: usize, channels: usize, entries: &[Vec<f64>]) -> CodebookId {
    let mut h = Sha256::new();
    h.update(b"ARCB");
    h.update((patch_size as u32).to_le_bytes());
    h.update((channels as u32).to_le_bytes());
    h.update((entries.len() as u32).to_le_bytes());
    for e in entries {
        for v in e {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub k: usize,
    pub patch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            patch_size: DEFAULT_PATCH_SIZE,
            iterations: 25,
            seed: 123,
        }
    }
}

fn check_divisible(width: usize, height: usize, p: usize) -> Result<(), CodecError> {
    if p == 0 || width % p != 0 || height % p != 0 {
        return Err(CodecError::DimensionMismatch(format!(
            "{width}x{height} is not divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// Raw bytes of every non-overlapping patch, row-major over the lattice.
pub fn extract_patches(img: &Image, p: usize) -> Result<Vec<Vec<u8>>, CodecError> {
    check_divisible(img.width(), img.height(), p)?;
    let (h, w) = (img.height() / p, img.width() / p);
    let mut out = Vec::with_capacity(h * w);
    for ti in 0..h {
        for tj in 0..w {
            out.push(patch_bytes(img, p, ti, tj));
        }
    }
    Ok(out)
}

fn patch_bytes(img: &Image, p: usize, ti: usize, tj: usize) -> Vec<u8> {
    let c = img.channels();
    let mut v = Vec::with_capacity(p * p * c);
    for dy in 0..p {
        let start = img.index(tj * p, ti * p + dy, 0);
        v.extend_from_slice(&img.data()[start..start + p * c]);
    }
    v
}

/// Lloyd k-means over all patches of the corpus.
///
/// Initialization picks `k` distinct patches at random. A cluster that goes
/// empty is re-seeded from the patch farthest from its current centroid.
/// Final entries are rounded to integer intensities so that decoding is
/// exact; any collision introduced by rounding is replaced by the farthest
/// remaining distinct patch.
pub fn train_codebook(images: &[Image], cfg: &CodebookConfig) -> Result<Codebook, CodecError> {
    let first = images
        .first()
        .ok_or(CodecError::TooFewPatches { distinct: 0, k: cfg.k })?;
    let channels = first.channels();
    let p = cfg.patch_size;
    let mut patches: Vec<Vec<f64>> = Vec::new();
    let mut distinct: Vec<usize> = Vec::new();
    let mut seen: HashMap<Vec<u8>, ()> = HashMap::new();
    for img in images {
        if img.channels() != channels {
            return Err(CodecError::DimensionMismatch("corpus mixes channel counts".into()));
        }
        for bytes in extract_patches(img, p)? {
            if seen.insert(bytes.clone(), ()).is_none() {
                distinct.push(patches.len());
            }
            patches.push(bytes.into_iter().map(f64::from).collect());
        }
    }
    if distinct.len() < cfg.k || cfg.k < 2 {
        return Err(CodecError::TooFewPatches {
            distinct: distinct.len(),
            k: cfg.k,
        });
    }

    let mut rng = rng::seeded(cfg.seed);
    distinct.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = distinct[..cfg.k].iter().map(|&i| patches[i].clone()).collect();
    let dim = p * p * channels;
    let mut assign = vec![usize::MAX; patches.len()];
    let mut dists = vec![0.0; patches.len()];

    for _ in 0..cfg.iterations {
        let mut changed = false;
        for (n, patch) in patches.iter().enumerate() {
            let (k, d) = nearest_with_dist(&centroids, patch);
            if assign[n] != k {
                assign[n] = k;
                changed = true;
            }
            dists[n] = d;
        }
        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (n, patch) in patches.iter().enumerate() {
            counts[assign[n]] += 1;
            for (s, v) in sums[assign[n]].iter_mut().zip(patch) {
                *s += v;
            }
        }
        let mut reseeded = false;
        let mut used = vec![false; patches.len()];
        for k in 0..cfg.k {
            if counts[k] > 0 {
                centroids[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            } else {
                let far = (0..patches.len())
                    .filter(|&n| !used[n])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("at least k patches");
                used[far] = true;
                dists[far] = 0.0;
                centroids[k] = patches[far].clone();
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }

    for c in centroids.iter_mut() {
        for v in c.iter_mut() {
            *v = v.round().clamp(0.0, 255.0);
        }
    }
    resolve_collisions(&mut centroids, &patches);
    Codebook::new(p, channels, centroids)
}

fn nearest_with_dist(centroids: &[Vec<f64>], patch: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(patch, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn resolve_collisions(centroids: &mut [Vec<f64>], patches: &[Vec<f64>]) {
    loop {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut dup = None;
        for (k, c) in centroids.iter().enumerate() {
            let key: Vec<u64> = c.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key, k).is_some() {
                dup = Some(k);
                break;
            }
        }
        let Some(k) = dup else { return };
        // Patches are integer-valued, so the farthest one from all entries
        // is distinct from every entry whenever its distance is positive.
        let far = patches
            .iter()
            .max_by(|a, b| {
                nearest_with_dist(centroids, a)
                    .1
                    .total_cmp(&nearest_with_dist(centroids, b).1)
            })
            .expect("nonempty corpus");
        centroids[k] = far.clone();
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLattice {
    h: usize,
    w: usize,
    k: usize,
    tokens: Vec<u16>,
    codebook_id: CodebookId,
}

impl TokenLattice {
    pub fn new(h: usize, w: usize, k: usize, tokens: Vec<u16>, codebook_id: CodebookId) -> Result<Self, CodecError> {
        if h == 0 || w == 0 || h * w != tokens.len() {
            return Err(CodecError::InvalidLattice(format!(
                "{h}x{w} lattice with {} tokens",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= k) {
            return Err(CodecError::InvalidLattice(format!("token {t} >= K = {k}")));
        }
        Ok(Self {
            h,
            w,
            k,
            tokens,
            codebook_id,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn codebook_id(&self) -> &CodebookId {
        &self.codebook_id
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.tokens[i * self.w + j]
    }

    /// Overwrites one token. Panics when `t >= K`.
    pub fn set(&mut self, i: usize, j: usize, t: u16) {
        assert!((t as usize) < self.k, "token {t} out of range");
        self.tokens[i * self.w + j] = t;
    }

    pub fn same_shape(&self, other: &TokenLattice) -> bool {
        self.h == other.h && self.w == other.w && self.k == other.k && self.codebook_id == other.codebook_id
    }
}

pub fn encode(img: &Image, cb: &Codebook) -> Result<TokenLattice, CodecError> {
    if img.channels() != cb.channels() {
        return Err(CodecError::DimensionMismatch(format!(
            "image has {} channels, codebook {}",
            img.channels(),
            cb.channels()
        )));
    }
    let p = cb.patch_size();
    let tokens = extract_patches(img, p)?
        .into_iter()
        .map(|bytes| {
            let v: Vec<f64> = bytes.into_iter().map(f64::from).collect();
            cb.nearest(&v) as u16
        })
        .collect();
    TokenLattice::new(img.height() / p, img.width() / p, cb.k(), tokens, *cb.id())
}

pub fn decode(z: &TokenLattice, cb: &Codebook) -> Result<Image, CodecError> {
    if z.codebook_id() != cb.id() || z.k() != cb.k() {
        return Err(CodecError::CodebookMismatch);
    }
    let p = cb.patch_size();
    let c = cb.channels();
    let mut img = Image::filled(z.w() * p, z.h() * p, c, 0)?;
    for ti in 0..z.h() {
        for tj in 0..z.w() {
            paint_patch(&mut img, cb, ti, tj, z.get(ti, tj) as usize);
        }
    }
    Ok(img)
}

fn paint_patch(img: &mut Image, cb: &Codebook, ti: usize, tj: usize, token: usize) {
    let p = cb.patch_size();
    let c = cb.channels();
    let entry = &cb.entries()[token];
    for dy in 0..p {
        let start = img.index(tj * p, ti * p + dy, 0);
        let row = &mut img.data_mut()[start..start + p * c];
        for (dst, v) in row.iter_mut().zip(&entry[dy * p * c..(dy + 1) * p * c]) {
            *dst = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Context/masked split of lattice coordinates, both row-major sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexPartition {
    h: usize,
    w: usize,
    flags: Vec<bool>,
    context: Vec<(usize, usize)>,
    masked: Vec<(usize, usize)>,
}

impl IndexPartition {
    /// `flags[i * w + j]` is true for masked coordinates.
    pub fn from_flags(h: usize, w: usize, flags: Vec<bool>) -> Self {
        assert_eq!(flags.len(), h * w, "flag count must match lattice size");
        let mut context = Vec::new();
        let mut masked = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if flags[i * w + j] {
                    masked.push((i, j));
                } else {
                    context.push((i, j));
                }
            }
        }
        Self {
            h,
            w,
            flags,
            context,
            masked,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn context(&self) -> &[(usize, usize)] {
        &self.context
    }

    pub fn masked(&self) -> &[(usize, usize)] {
        &self.masked
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.flags[i * self.w + j]
    }
}

/// A token is masked iff any pixel of its footprint is set.
pub fn mask_to_partition(m: &PixelMask, patch_size: usize) -> Result<IndexPartition, CodecError> {
    check_divisible(m.width(), m.height(), patch_size)?;
    let (h, w) = (m.height() / patch_size, m.width() / patch_size);
    let mut flags = vec![false; h * w];
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                flags[(y / patch_size) * w + x / patch_size] = true;
            }
        }
    }
    Ok(IndexPartition::from_flags(h, w, flags))
}

pub fn lattice_to_bytes(z: &TokenLattice) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 2 * z.tokens.len());
    out.extend_from_slice(LATTICE_MAGIC);
    out.extend_from_slice(&(z.h as u32).to_le_bytes());
    out.extend_from_slice(&(z.w as u32).to_le_bytes());
    out.extend_from_slice(&(z.k as u32).to_le_bytes());
    out.extend_from_slice(&z.codebook_id);
    for t in &z.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn lattice_from_bytes(bytes: &[u8]) -> Result<TokenLattice, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != LATTICE_MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < 48 {
        return Err(CodecError::Truncated);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, k) = (u32_at(4), u32_at(8), u32_at(12));
    let mut id = [0u8; 32];
    id.copy_from_slice(&bytes[16..48]);
    let payload = &bytes[48..];
    let n = h.checked_mul(w).ok_or(CodecError::Truncated)?;
    if payload.len() != 2 * n {
        return Err(CodecError::Truncated);
    }
    let tokens = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    TokenLattice::new(h, w, k, tokens, id)
}

pub fn lattice_write(z: &TokenLattice, path: impl AsRef<Path>) -> Result<(), CodecError> {
    fs::write(path, lattice_to_bytes(z))?;
    Ok(())
}

pub fn lattice_read(path: impl AsRef<Path>) -> Result<TokenLattice, CodecError> {
    lattice_from_bytes(&fs::read(path)?)
}

/// Reads a lattice and checks that it was produced by `cb`.
pub fn lattice_read_checked(path: impl AsRef<Path>, cb: &Codebook) -> Result<TokenLattice, CodecError> {
    let z = lattice_read(path)?;
    if z.codebook_id() != cb.id() {
        return Err(CodecError::HashMismatch);
    }
    Ok(z)
}
