//! Patch datasets on disk, the synthetic generator, and scene tiling.
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: counts, geometry, dtype tag, provenance
//! * `patches.bin`: little-endian `f32`, record-major, channel-major within a record
//! * `labels.bin`: one byte per record, 0 or 1
//! * `masks.bin` (optional): `height·width` bytes per record, 0 or 1
//!
//! A scene is stored the same way as a single record of scene size.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Mask;
use crate::maps::{resize_nearest, ActivationMap};
use crate::models::{IN_CHANNELS, PATCH};
use crate::tensor::Tensor;

pub const FORMAT: &str = "fbnet-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
pub const MANIFEST: &str = "manifest.json";
pub const PATCHES: &str = "patches.bin";
pub const LABELS: &str = "labels.bin";
pub const MASKS: &str = "masks.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub records: u64,
    pub positives: u64,
    pub negatives: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub has_masks: bool,
    pub provenance: String,
}

/// Records stored column-wise: all patches in one buffer, all labels in
/// another.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    patches: Vec<f32>,
    labels: Vec<bool>,
    masks: Option<Vec<u8>>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, provenance: impl Into<String>) -> Self {
        Dataset {
            channels,
            height,
            width,
            patches: Vec::new(),
            labels: Vec::new(),
            masks: None,
            provenance: provenance.into(),
        }
    }

    /// Appends one record. Every record of a dataset must agree on whether it
    /// carries a mask.
    pub fn push(&mut self, bands: &Tensor, label: bool, mask: Option<&[u8]>) -> Result<()> {
        bands.ensure_shape(&[self.channels, self.height, self.width])?;
        let px = self.height * self.width;
        match (mask, &mut self.masks) {
            (Some(m), Some(all)) => {
                check_mask(m, px)?;
                all.extend_from_slice(m);
            }
            (Some(m), None) if self.labels.is_empty() => {
                check_mask(m, px)?;
                self.masks = Some(m.to_vec());
            }
            (None, None) => {}
            _ => return Err(Error::invalid("records must all have masks or all lack them")),
        }
        self.patches.extend_from_slice(bands.data());
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn record_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn patch(&self, i: usize) -> Tensor {
        let n = self.record_len();
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.patches[i * n..(i + 1) * n].to_vec(),
        )
        .expect("record geometry")
    }

    pub fn label(&self, i: usize) -> bool {
        self.labels[i]
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn has_masks(&self) -> bool {
        self.masks.is_some()
    }

    /// Raw mask bytes of record `i`.
    pub fn mask_bytes(&self, i: usize) -> Option<&[u8]> {
        let px = self.height * self.width;
        self.masks.as_ref().map(|m| &m[i * px..(i + 1) * px])
    }

    pub fn mask(&self, i: usize) -> Option<Mask> {
        self.mask_bytes(i)
            .map(|b| Mask::from_bytes(self.height, self.width, b).expect("mask geometry"))
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i]).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels[i]).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let positives = self.labels.iter().filter(|&&l| l).count() as u64;
        DatasetManifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            records: self.len() as u64,
            positives,
            negatives: self.len() as u64 - positives,
            channels: self.channels,
            height: self.height,
            width: self.width,
            dtype: DTYPE.into(),
            has_masks: self.has_masks(),
            provenance: self.provenance.clone(),
        }
    }

    /// A new dataset holding records `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.record_len();
        let px = self.height * self.width;
        let mut out = Dataset::new(self.channels, self.height, self.width, self.provenance.clone());
        out.patches = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.patches.extend_from_slice(&self.patches[i * n..(i + 1) * n]);
            out.labels.push(self.labels[i]);
        }
        out.masks = self
            .masks
            .as_ref()
            .map(|m| indices.iter().flat_map(|&i| m[i * px..(i + 1) * px].iter().copied()).collect());
        out
    }

    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.dims() == other.dims()
            && self.labels == other.labels
            && self.masks == other.masks
            && self.patches.len() == other.patches.len()
            && self.patches.iter().zip(&other.patches).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_mask(m: &[u8], px: usize) -> Result<()> {
    if m.len() != px {
        return Err(Error::shape(format!("{px}-byte mask"), m.len()));
    }
    if m.iter().any(|&b| b > 1) {
        return Err(Error::invalid("mask bytes must be 0 or 1"));
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    let manifest = serde_json::to_string_pretty(&ds.manifest()).expect("manifest serializes");
    write(MANIFEST, format!("{manifest}\n").as_bytes())?;
    let mut blob = Vec::with_capacity(ds.patches.len() * 4);
    for v in &ds.patches {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    write(PATCHES, &blob)?;
    write(LABELS, &ds.labels.iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    let masks = dir.join(MASKS);
    match &ds.masks {
        Some(m) => write(MASKS, m)?,
        None if masks.exists() => fs::remove_file(&masks).map_err(|e| Error::io(masks, e))?,
        None => {}
    }
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

fn expect_size(dir: &Path, name: &str, bytes: &[u8], expected: u64) -> Result<()> {
    if bytes.len() as u64 != expected {
        return Err(Error::Size {
            path: dir.join(name),
            what: name.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = read(dir, MANIFEST)?;
    let value: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, format!("manifest is not JSON: {e}")))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(Error::BadMagic { path, expected: FORMAT });
    }
    let m: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::format(&path, format!("bad manifest: {e}")))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Version {
            path,
            expected: FORMAT_VERSION,
            found: m.version,
        });
    }
    if m.dtype != DTYPE {
        return Err(Error::Dtype {
            expected: DTYPE.into(),
            found: m.dtype,
        });
    }
    if m.positives.checked_add(m.negatives) != Some(m.records) {
        return Err(Error::format(&path, "class counts do not sum to the record count"));
    }
    Ok(m)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let m = load_manifest(dir)?;
    let px = (m.height * m.width) as u64;
    let record = m.channels as u64 * px;

    let labels = read(dir, LABELS)?;
    expect_size(dir, LABELS, &labels, m.records)?;
    let blob = read(dir, PATCHES)?;
    expect_size(dir, PATCHES, &blob, m.records * record * 4)?;
    let masks = if m.has_masks {
        let b = read(dir, MASKS)?;
        expect_size(dir, MASKS, &b, m.records * px)?;
        if b.iter().any(|&v| v > 1) {
            return Err(Error::format(dir.join(MASKS), "mask bytes must be 0 or 1"));
        }
        Some(b)
    } else {
        None
    };
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::format(dir.join(LABELS), "label bytes must be 0 or 1"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    if positives != m.positives {
        return Err(Error::format(
            dir.join(MANIFEST),
            format!("manifest lists {} positives, labels hold {positives}", m.positives),
        ));
    }
    Ok(Dataset {
        channels: m.channels,
        height: m.height,
        width: m.width,
        patches: blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        labels: labels.iter().map(|&l| l == 1).collect(),
        masks,
        provenance: m.provenance,
    })
}

/// Deterministic per-class holdout: a `fraction` of each class, chosen by
/// `seed`, goes to the second list. Both lists are ascending.
pub fn holdout_split(labels: &[bool], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Background reflectance level per band.
pub const BACKGROUND_SIGNATURE: [f32; IN_CHANNELS] = [0.12, 0.10, 0.09, 0.08, 0.24, 0.18, 0.12];
/// Reflectance of panel pixels per band.
pub const PANEL_SIGNATURE: [f32; IN_CHANNELS] = [0.20, 0.22, 0.25, 0.27, 0.17, 0.30, 0.28];
/// Positive masks must cover strictly more than this fraction of the patch.
pub const MIN_POSITIVE_COVERAGE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    /// Standard deviation scale of every noise component.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_pos: 500,
            n_neg: 20000,
            seed: 42,
            noise: 0.03,
        }
    }
}

fn normal<R: Rng>(rng: &mut R) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Spatially correlated background: per-band offsets, a smooth field
/// interpolated from a coarse grid, and white noise.
fn background<R: Rng>(rng: &mut R, h: usize, w: usize, noise: f32) -> Tensor {
    const GRID: usize = 5;
    let coarse: Vec<f32> = (0..GRID * GRID).map(|_| normal(rng) * noise).collect();
    let offsets: Vec<f32> = (0..IN_CHANNELS).map(|_| normal(rng) * noise * 0.5).collect();
    let mut t = Tensor::zeros(&[IN_CHANNELS, h, w]);
    let sample = |i: usize, j: usize| -> f32 {
        let y = i as f32 / (h.max(2) - 1) as f32 * (GRID - 1) as f32;
        let x = j as f32 / (w.max(2) - 1) as f32 * (GRID - 1) as f32;
        let (y0, x0) = ((y as usize).min(GRID - 2), (x as usize).min(GRID - 2));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let c = |a: usize, b: usize| coarse[a * GRID + b];
        (1.0 - fy) * ((1.0 - fx) * c(y0, x0) + fx * c(y0, x0 + 1))
            + fy * ((1.0 - fx) * c(y0 + 1, x0) + fx * c(y0 + 1, x0 + 1))
    };
    let field: Vec<f32> = (0..h * w).map(|p| sample(p / w, p % w)).collect();
    for b in 0..IN_CHANNELS {
        let base = BACKGROUND_SIGNATURE[b] + offsets[b];
        for (v, &f) in t.channel_mut(b).iter_mut().zip(&field) {
            *v = base + f + normal(rng) * noise * 0.5;
        }
    }
    t
}

/// 1–4 axis-aligned rectangles inside an `h×w` grid covering more than the
/// minimum fraction.
fn panel_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<u8> {
    let need = (MIN_POSITIVE_COVERAGE * (h * w) as f64).floor() as usize + 1;
    loop {
        let mut m = vec![0u8; h * w];
        for _ in 0..rng.gen_range(1..=4) {
            let rh = rng.gen_range(3..=(h * 5 / 8).max(3).min(h));
            let rw = rng.gen_range(3..=(w * 5 / 8).max(3).min(w));
            let (r0, c0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
            for r in r0..r0 + rh {
                m[r * w + c0..r * w + c0 + rw].fill(1);
            }
        }
        if m.iter().filter(|&&b| b == 1).count() >= need {
            return m;
        }
    }
}

fn paint_panels<R: Rng>(rng: &mut R, t: &mut Tensor, mask: &[u8], noise: f32) {
    for b in 0..IN_CHANNELS {
        for (v, &m) in t.channel_mut(b).iter_mut().zip(mask) {
            if m == 1 {
                *v = PANEL_SIGNATURE[b] + normal(rng) * noise;
            }
        }
    }
}

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One synthetic record; record `index` of a dataset depends only on
/// `(seed, index)`.
pub fn synth_patch(seed: u64, index: u64, positive: bool, noise: f32) -> (Tensor, Vec<u8>) {
    let mut rng = record_rng(seed, index);
    let mut t = background(&mut rng, PATCH, PATCH, noise);
    let mask = if positive {
        let m = panel_mask(&mut rng, PATCH, PATCH);
        paint_panels(&mut rng, &mut t, &m, noise);
        m
    } else {
        vec![0; PATCH * PATCH]
    };
    (t, mask)
}

/// Positives first, then negatives, each with its pixel mask.
pub fn synth_generate(config: &SynthConfig) -> Dataset {
    let n = config.n_pos + config.n_neg;
    let records: Vec<(Tensor, Vec<u8>)> = (0..n)
        .into_par_iter()
        .map(|i| synth_patch(config.seed, i as u64, i < config.n_pos, config.noise))
        .collect();
    let mut ds = Dataset::new(
        IN_CHANNELS,
        PATCH,
        PATCH,
        format!(
            "synthetic seed={} n_pos={} n_neg={} noise={}",
            config.seed, config.n_pos, config.n_neg, config.noise
        ),
    );
    ds.patches.reserve(n * IN_CHANNELS * PATCH * PATCH);
    let mut masks = Vec::with_capacity(n * PATCH * PATCH);
    for (i, (t, m)) in records.into_iter().enumerate() {
        ds.patches.extend_from_slice(t.data());
        ds.labels.push(i < config.n_pos);
        masks.extend_from_slice(&m);
    }
    ds.masks = Some(masks);
    ds
}

/// A `rows×cols`-tile synthetic scene; the listed cells hold panels.
pub fn synth_scene(rows: usize, cols: usize, panel_cells: &[(usize, usize)], seed: u64, noise: f32) -> Result<Dataset> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("scene needs at least one tile"));
    }
    let (h, w) = (rows * PATCH, cols * PATCH);
    let mut scene = Tensor::zeros(&[IN_CHANNELS, h, w]);
    let mut mask = vec![0u8; h * w];
    for r in 0..rows {
        for c in 0..cols {
            let index = (r * cols + c) as u64;
            let positive = panel_cells.contains(&(r, c));
            let (t, m) = synth_patch(seed, index, positive, noise);
            for b in 0..IN_CHANNELS {
                for i in 0..PATCH {
                    let dst = (r * PATCH + i) * w + c * PATCH;
                    scene.channel_mut(b)[dst..dst + PATCH].copy_from_slice(&t.channel(b)[i * PATCH..(i + 1) * PATCH]);
                }
            }
            for i in 0..PATCH {
                let dst = (r * PATCH + i) * w + c * PATCH;
                mask[dst..dst + PATCH].copy_from_slice(&m[i * PATCH..(i + 1) * PATCH]);
            }
        }
    }
    for &(r, c) in panel_cells {
        if r >= rows || c >= cols {
            return Err(Error::invalid(format!("panel cell ({r}, {c}) outside {rows}x{cols} scene")));
        }
    }
    let mut ds = Dataset::new(IN_CHANNELS, h, w, format!("synthetic scene seed={seed} {rows}x{cols} tiles"));
    ds.push(&scene, !panel_cells.is_empty(), Some(&mask))?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub patch: Tensor,
    pub row: usize,
    pub col: usize,
}

/// Non-overlapping 16×16 tiles, row-major; remainder rows and columns are
/// dropped.
pub fn tile_scene(scene: &Tensor) -> Result<Vec<Tile>> {
    let (c, h, w) = scene.dims3()?;
    if c != IN_CHANNELS {
        return Err(Error::shape(format!("{IN_CHANNELS} bands"), c));
    }
    if h < PATCH || w < PATCH {
        return Err(Error::invalid(format!("scene {h}x{w} is smaller than one {PATCH}x{PATCH} tile")));
    }
    let (rows, cols) = (h / PATCH, w / PATCH);
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let patch = Tensor::from_fn(&[c, PATCH, PATCH], |i| {
                let (b, y, x) = (i / (PATCH * PATCH), (i / PATCH) % PATCH, i % PATCH);
                scene.channel(b)[(row * PATCH + y) * w + col * PATCH + x]
            });
            tiles.push(Tile { patch, row, col });
        }
    }
    Ok(tiles)
}

/// Places each tile map, resized to 16×16, at its cell of a
/// `rows·16 × cols·16` map; cells without a map stay zero.
pub fn stitch_maps(tiles: &[(ActivationMap, usize, usize)], rows: usize, cols: usize) -> Result<ActivationMap> {
    let (h, w) = (rows * PATCH, cols * PATCH);
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty tile grid"));
    }
    let mut out = vec![0.0f32; h * w];
    let mut seen = vec![false; rows * cols];
    for (map, r, c) in tiles {
        let (r, c) = (*r, *c);
        if r >= rows || c >= cols {
            return Err(Error::invalid(format!("tile ({r}, {c}) outside {rows}x{cols} grid")));
        }
        if std::mem::replace(&mut seen[r * cols + c], true) {
            return Err(Error::invalid(format!("tile ({r}, {c}) placed twice")));
        }
        let small = resize_nearest(map, PATCH, PATCH)?;
        for i in 0..PATCH {
            let dst = (r * PATCH + i) * w + c * PATCH;
            out[dst..dst + PATCH].copy_from_slice(&small.values()[i * PATCH..(i + 1) * PATCH]);
        }
    }
    ActivationMap::new(h, w, out)
}

/// Writes `<stem>.pgm` (8-bit, values in `[0, 1]` scaled to 0–255) and
/// `<stem>.f32` (raw little-endian floats, row-major).
pub fn write_map(map: &ActivationMap, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let pgm = stem.with_extension("pgm");
    let mut bytes = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    bytes.extend(map.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;
    let raw = stem.with_extension("f32");
    let floats: Vec<u8> = map.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw, floats).map_err(|e| Error::io(&raw, e))
}

/// Reads a binary PGM written by [`write_map`] back as `(width, height, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"P5\n") {
        return Err(Error::BadMagic { path: path.into(), expected: "P5" });
    }
    let mut fields = Vec::new();
    let mut pos = 3;
    while fields.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|b| b.is_ascii_whitespace())
            .ok_or_else(|| Error::format(path, "truncated PGM header"))?;
        let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| Error::format(path, "bad PGM header"))?;
        if !s.is_empty() {
            fields.push(s.parse::<usize>().map_err(|_| Error::format(path, "bad PGM header"))?);
        }
        pos += end + 1;
    }
    let (w, h) = (fields[0], fields[1]);
    let pixels = bytes[pos..].to_vec();
    if pixels.len() != w * h {
        return Err(Error::Size {
            path: path.into(),
            what: "PGM pixels".into(),
            expected: (w * h) as u64,
            actual: pixels.len() as u64,
        });
    }
    Ok((w, h, pixels))
}
