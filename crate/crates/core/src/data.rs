//! Synthetic scene dataset, augmentation and class-balanced batching.
//!
//! Every image carries a scene-wide texture (base color plus an oriented
//! grating, both determined by the scene class) so that any region of the
//! image is evidence for the scene. On top of the texture sit one to three
//! object glyphs whose identities are drawn from a per-scene co-occurrence
//! distribution, so that object presence is also evidence for the scene.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Label;
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

/// Per-channel normalization constants computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Mean and population standard deviation of every channel over `images` (`[H,W,C]` each).
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for img in images {
            let c = *img.shape().last().unwrap_or(&0);
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("channel_stats", "images disagree on channel count"));
            }
            for px in img.data().chunks(c) {
                for (k, v) in px.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            n += img.len() / c.max(1);
        }
        if n == 0 {
            return Err(Error::Invalid("cannot compute statistics of an empty image set".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// `(x − mean) / std` per channel of an `[..., C]` tensor.
    pub fn normalize(&self, img: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        if img.shape().last() != Some(&c) {
            return Err(Error::shape("normalize", format!("{:?} for {c}-channel statistics", img.shape())));
        }
        let mut out = img.clone();
        for px in out.data_mut().chunks_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        Ok(out)
    }
}

/// Appearance of one scene's background texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTexture {
    pub base: [f64; 3],
    /// Grating direction in radians.
    pub orientation: f64,
    /// Grating period in pixels.
    pub period: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub num_scenes: usize,
    pub num_objects: usize,
    pub image_hw: (usize, usize),
    pub train_per_scene: usize,
    pub val_per_scene: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Standard deviation of the per-image color shift.
    pub color_jitter: f64,
    pub glyphs: (usize, usize),
    pub glyph_size: (usize, usize),
    /// One texture per scene; generated when empty.
    pub textures: Vec<SceneTexture>,
    /// `cooccurrence[o][s]`: probability that a glyph in scene `s` shows object `o`.
    /// Generated when empty.
    pub cooccurrence: Vec<Vec<f64>>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            num_scenes: 8,
            num_objects: 6,
            image_hw: (32, 32),
            train_per_scene: 500,
            val_per_scene: 100,
            noise: 0.12,
            color_jitter: 0.05,
            glyphs: (1, 3),
            glyph_size: (3, 5),
            textures: Vec::new(),
            cooccurrence: Vec::new(),
        }
    }
}

const SIGNATURE_WEIGHT: f64 = 0.8;
const BACKGROUND_WEIGHT: f64 = 0.3;

/// Object colors; glyph shapes cycle through square, circle, triangle.
const OBJECT_COLORS: [[f64; 3]; 6] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.9, 0.9],
];

/// Default co-occurrence: scene `s` weights its signature object `s mod O` by
/// 0.8 and two background objects by 0.3 each, then normalizes the column.
pub fn default_cooccurrence(num_objects: usize, num_scenes: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; num_scenes]; num_objects];
    for s in 0..num_scenes {
        let sig = s % num_objects;
        let bg = if s < num_objects { [s + 1, s + 2] } else { [s + 3, s + 4] };
        m[sig][s] += SIGNATURE_WEIGHT;
        for b in bg {
            m[b % num_objects][s] += BACKGROUND_WEIGHT;
        }
        let total: f64 = (0..num_objects).map(|o| m[o][s]).sum();
        for row in m.iter_mut() {
            row[s] /= total;
        }
    }
    m
}

/// Default textures: scenes come in pairs sharing a base color and differing
/// in grating orientation; the second half of the scenes uses a finer period.
pub fn default_textures(num_scenes: usize) -> Vec<SceneTexture> {
    const BASES: [[f64; 3]; 4] = [
        [0.55, 0.45, 0.35],
        [0.35, 0.48, 0.58],
        [0.45, 0.55, 0.40],
        [0.55, 0.42, 0.52],
    ];
    (0..num_scenes)
        .map(|s| SceneTexture {
            base: BASES[(s / 2) % BASES.len()],
            orientation: if s % 2 == 0 { 0.0 } else { PI / 2.0 },
            period: if (s / 8) % 2 == 0 { 8.0 } else { 5.0 },
            amplitude: 0.2,
        })
        .collect()
}

impl SyntheticSceneSpec {
    /// Fills in generated textures and co-occurrence, then validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut s = self.clone();
        if s.textures.is_empty() {
            s.textures = default_textures(s.num_scenes);
        }
        if s.cooccurrence.is_empty() {
            s.cooccurrence = default_cooccurrence(s.num_objects, s.num_scenes);
        }
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.num_scenes < 2 || self.num_objects == 0 || self.num_objects > OBJECT_COLORS.len() {
            return bad(format!(
                "need ≥ 2 scenes and 1..={} objects, got {} and {}",
                OBJECT_COLORS.len(),
                self.num_scenes,
                self.num_objects
            ));
        }
        let (h, w) = self.image_hw;
        let (g0, g1) = self.glyph_size;
        if g0 == 0 || g0 > g1 || g1 > h.min(w) {
            return bad(format!("glyph sizes {:?} do not fit {h}×{w} images", self.glyph_size));
        }
        if self.glyphs.0 == 0 || self.glyphs.0 > self.glyphs.1 {
            return bad(format!("glyph count range {:?} must be non-empty and start at ≥ 1", self.glyphs));
        }
        if self.textures.len() != self.num_scenes {
            return bad(format!("{} textures for {} scenes", self.textures.len(), self.num_scenes));
        }
        if self.cooccurrence.len() != self.num_objects
            || self.cooccurrence.iter().any(|r| r.len() != self.num_scenes)
        {
            return bad("co-occurrence must be num_objects × num_scenes".into());
        }
        for s in 0..self.num_scenes {
            let col: Vec<f64> = self.cooccurrence.iter().map(|r| r[s]).collect();
            if col.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (col.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("co-occurrence column {s} is not a probability vector"));
            }
            if !col.iter().any(|&p| p > 0.5) {
                return bad(format!("scene {s} has no object with probability above 0.5"));
            }
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// Column `s` of the co-occurrence matrix.
    pub fn object_distribution(&self, scene: usize) -> Vec<f64> {
        self.cooccurrence.iter().map(|r| r[scene]).collect()
    }
}

/// One generated image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H,W,3]` with values in `[0,1]`.
    pub image: Tensor,
    pub scene: Label,
    /// Multi-hot object presence.
    pub objects: Vec<f64>,
    /// Object identity of every glyph, in drawing order.
    pub glyphs: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.scene.class()).collect()
    }

    /// Sample indices grouped by scene class.
    pub fn by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.scene.class()].push(i);
        }
        out
    }

    /// The first `per_class` samples of every class, in original order.
    pub fn subset_per_class(&self, num_classes: usize, per_class: usize) -> Split {
        let keep: Vec<usize> = {
            let mut idx: Vec<usize> = self
                .by_class(num_classes)
                .into_iter()
                .flat_map(|v| v.into_iter().take(per_class))
                .collect();
            idx.sort_unstable();
            idx
        };
        Split { samples: keep.into_iter().map(|i| self.samples[i].clone()).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSceneSpec,
    pub train: Split,
    pub val: Split,
    pub stats: ChannelStats,
}

const TRAIN_STREAM: u64 = 1 << 32;
const VAL_STREAM: u64 = 2 << 32;

/// Generates the train and validation splits. Each sample draws from its own
/// random stream, so any sample can be regenerated from `(seed, split, index)`.
pub fn generate_dataset(spec: &SyntheticSceneSpec, seed: u64) -> Result<Dataset> {
    let spec = spec.resolved()?;
    let make = |per_scene: usize, stream: u64| -> Split {
        let samples = (0..spec.num_scenes * per_scene)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream + i as u64);
                generate_sample(&spec, i / per_scene, &mut rng)
            })
            .collect();
        Split { samples }
    };
    let train = make(spec.train_per_scene, TRAIN_STREAM);
    let val = make(spec.val_per_scene, VAL_STREAM);
    let stats = if train.is_empty() {
        ChannelStats::identity(3)
    } else {
        ChannelStats::compute(train.samples.iter().map(|s| &s.image))?
    };
    Ok(Dataset { spec, train, val, stats })
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Draws one image of `scene` from a resolved spec.
pub fn generate_sample<R: Rng + ?Sized>(spec: &SyntheticSceneSpec, scene: usize, rng: &mut R) -> Sample {
    let (h, w) = spec.image_hw;
    let tex = &spec.textures[scene];
    let jitter = Normal::new(0.0, spec.color_jitter.max(1e-300)).expect("finite jitter");
    let noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("finite noise");
    let shift: Vec<f64> = (0..3).map(|_| jitter.sample(rng)).collect();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (dx, dy) = (tex.orientation.cos(), tex.orientation.sin());
    let mut img = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let g = tex.amplitude * (2.0 * PI * (x as f64 * dx + y as f64 * dy) / tex.period + phase).sin();
            for c in 0..3 {
                img[(y * w + x) * 3 + c] = tex.base[c] + shift[c] + g + noise.sample(rng);
            }
        }
    }

    let dist = spec.object_distribution(scene);
    let count = rng.gen_range(spec.glyphs.0..=spec.glyphs.1);
    let mut objects = vec![0.0; spec.num_objects];
    let mut glyphs = Vec::with_capacity(count);
    for _ in 0..count {
        let o = sample_categorical(&dist, rng);
        let size = rng.gen_range(spec.glyph_size.0..=spec.glyph_size.1);
        let top = rng.gen_range(0..=h - size);
        let left = rng.gen_range(0..=w - size);
        draw_glyph(&mut img, w, o, top, left, size);
        objects[o] = 1.0;
        glyphs.push(o);
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Sample {
        image: Tensor::new([h, w, 3], img).expect("image buffer matches its shape"),
        scene: Label::new(scene, spec.num_scenes).expect("scene index in range"),
        objects,
        glyphs,
    }
}

fn draw_glyph(img: &mut [f64], width: usize, object: usize, top: usize, left: usize, size: usize) {
    let color = OBJECT_COLORS[object];
    let s = size as f64;
    for i in 0..size {
        for j in 0..size {
            let (u, v) = (i as f64 + 0.5, j as f64 + 0.5);
            let inside = match object % 3 {
                0 => true,
                1 => (u - s / 2.0).powi(2) + (v - s / 2.0).powi(2) <= (s / 2.0).powi(2),
                _ => (v - s / 2.0).abs() <= u / 2.0,
            };
            if inside {
                let p = ((top + i) * width + left + j) * 3;
                img[p..p + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentChoice {
    /// Side length after rescaling, before cropping.
    pub resized: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentChoice {
    /// No rescale, no flip: the whole image.
    pub fn identity(hw: (usize, usize)) -> Self {
        AugmentChoice { resized: hw, top: 0, left: 0, flip: false }
    }

    /// Rescale by a factor in `[1, max_scale]`, random crop back to `hw`, flip with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(hw: (usize, usize), max_scale: f64, rng: &mut R) -> Self {
        let s = rng.gen_range(1.0..=max_scale.max(1.0));
        let resized = (
            ((hw.0 as f64 * s).round() as usize).max(hw.0),
            ((hw.1 as f64 * s).round() as usize).max(hw.1),
        );
        AugmentChoice {
            resized,
            top: rng.gen_range(0..=resized.0 - hw.0),
            left: rng.gen_range(0..=resized.1 - hw.1),
            flip: rng.gen_bool(0.5),
        }
    }
}

pub const MAX_SCALE: f64 = 1.25;

/// Bilinear resampling of an `[H,W,C]` image with half-pixel centers.
pub fn resize_bilinear(img: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let [h, w, c] = <[usize; 3]>::try_from(img.shape())
        .map_err(|_| Error::shape("resize_bilinear", format!("expected [H,W,C], got {:?}", img.shape())))?;
    let (ho, wo) = out_hw;
    if (ho, wo) == (h, w) {
        return Ok(img.clone());
    }
    if ho == 0 || wo == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid("cannot resize to or from an empty image".into()));
    }
    let src = img.data();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..ho {
        let (y0, y1, fy) = coord(i, ho, h);
        for j in 0..wo {
            let (x0, x1, fx) = coord(j, wo, w);
            for k in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + k];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(i * wo + j) * c + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new([ho, wo, c], out)
}

/// `[H,W,C]` window starting at `(top, left)`.
pub fn crop(img: &Tensor, top: usize, left: usize, hw: (usize, usize)) -> Result<Tensor> {
    let [h, w, c] = <[usize; 3]>::try_from(img.shape())
        .map_err(|_| Error::shape("crop", format!("expected [H,W,C], got {:?}", img.shape())))?;
    if top + hw.0 > h || left + hw.1 > w {
        return Err(Error::shape("crop", format!("{hw:?} window at ({top},{left}) exceeds {h}×{w}")));
    }
    let mut out = Vec::with_capacity(hw.0 * hw.1 * c);
    for y in top..top + hw.0 {
        let row = (y * w + left) * c;
        out.extend_from_slice(&img.data()[row..row + hw.1 * c]);
    }
    Tensor::new([hw.0, hw.1, c], out)
}

/// Mirrors an `[H,W,C]` image left to right.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let [h, w, c] = <[usize; 3]>::try_from(img.shape()).expect("flip_horizontal needs [H,W,C]");
    let mut out = img.clone();
    let src = img.data();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (a, b) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            dst[a..a + c].copy_from_slice(&src[b..b + c]);
        }
    }
    out
}

/// Rescale, crop, optional flip, then per-channel normalization.
pub fn augment_with(img: &Tensor, choice: &AugmentChoice, stats: &ChannelStats) -> Result<Tensor> {
    let hw = (img.shape()[0], img.shape()[1]);
    let resized = resize_bilinear(img, choice.resized)?;
    let mut out = crop(&resized, choice.top, choice.left, hw)?;
    if choice.flip {
        out = flip_horizontal(&out);
    }
    stats.normalize(&out)
}

/// Randomly augments a training image.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, stats: &ChannelStats, rng: &mut R) -> Result<Tensor> {
    let hw = (img.shape()[0], img.shape()[1]);
    augment_with(img, &AugmentChoice::sample(hw, MAX_SCALE, rng), stats)
}

/// Per-epoch class-balanced batching.
///
/// Every epoch each class contributes the same number of samples, equal to
/// the size of the smallest class; samples are interleaved round-robin over
/// freshly shuffled class orders, so any window of the stream is as balanced
/// as its length allows.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > labels.len() {
            return Err(Error::Invalid(format!(
                "batch size {batch_size} must be in 1..={}",
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::Invalid(format!("label {l} out of range for {num_classes} classes")));
            }
            by_class[l].push(i);
        }
        if by_class.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("every class needs at least one sample".into()));
        }
        if batch_size < num_classes {
            log::warn!(
                "batch size {batch_size} is smaller than the {num_classes} classes; balance holds per epoch, not per batch"
            );
        }
        Ok(BalancedSampler { by_class, batch_size })
    }

    /// A batch cannot hold every class at once.
    pub fn flagged(&self) -> bool {
        self.batch_size < self.by_class.len()
    }

    /// Samples drawn from each class per epoch.
    pub fn per_class(&self) -> usize {
        self.by_class.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// One epoch of batches. A trailing batch of a single sample is merged
    /// into the previous batch so that batch statistics stay defined.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let n = self.per_class();
        let pools: Vec<Vec<usize>> = self
            .by_class
            .iter()
            .map(|idx| {
                let mut p = idx.clone();
                p.shuffle(rng);
                p.truncate(n);
                p
            })
            .collect();
        let mut order: Vec<usize> = (0..pools.len()).collect();
        let mut stream = Vec::with_capacity(n * pools.len());
        for round in 0..n {
            order.shuffle(rng);
            stream.extend(order.iter().map(|&c| pools[c][round]));
        }
        let mut batches: Vec<Vec<usize>> = stream.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("checked non-empty");
            batches.last_mut().expect("checked length").extend(last);
        }
        batches
    }
}

pub const INDEX_FILE: &str = "index.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    scene: usize,
    objects: Vec<f64>,
    glyphs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    version: u32,
    spec: SyntheticSceneSpec,
    stats: ChannelStats,
    train: Vec<IndexEntry>,
    val: Vec<IndexEntry>,
}

/// Writes `index.json` plus one FOST file per image under `train/` and `val/`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut index = DatasetIndex {
        version: DATASET_VERSION,
        spec: ds.spec.clone(),
        stats: ds.stats.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (name, split) in [("train", &ds.train), ("val", &ds.val)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let entries = if name == "train" { &mut index.train } else { &mut index.val };
        for (i, s) in split.samples.iter().enumerate() {
            let file = format!("{name}/{i:06}.fost");
            write_tensor(&dir.join(&file), &s.image, DType::F64)?;
            entries.push(IndexEntry {
                file,
                scene: s.scene.class(),
                objects: s.objects.clone(),
                glyphs: s.glyphs.clone(),
            });
        }
    }
    let path = dir.join(INDEX_FILE);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &index).map_err(|e| Error::json(&path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if index.version != DATASET_VERSION {
        return Err(Error::Format {
            path,
            msg: format!("unsupported dataset version {} (expected {DATASET_VERSION})", index.version),
        });
    }
    let spec = index.spec.resolved()?;
    let load = |entries: &[IndexEntry]| -> Result<Split> {
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let file = dir.join(&e.file);
            let image = read_tensor(&file)?;
            if image.shape() != [spec.image_hw.0, spec.image_hw.1, 3] {
                return Err(Error::Format { path: file, msg: format!("unexpected image shape {:?}", image.shape()) });
            }
            let scene = Label::new(e.scene, spec.num_scenes)
                .map_err(|err| Error::Format { path: file.clone(), msg: err.to_string() })?;
            samples.push(Sample { image, scene, objects: e.objects.clone(), glyphs: e.glyphs.clone() });
        }
        Ok(Split { samples })
    };
    let train = load(&index.train)?;
    let val = load(&index.val)?;
    Ok(Dataset { spec, train, val, stats: index.stats })
}

/// Accuracy of the Bayes classifier that sees only which objects are present.
///
/// The likelihood of a presence pattern is computed exactly from the
/// co-occurrence column and the uniform glyph-count distribution.
pub fn object_bayes_accuracy(spec: &SyntheticSceneSpec, split: &Split) -> Result<f64> {
    let spec = spec.resolved()?;
    let o = spec.num_objects;
    if o > 16 {
        return Err(Error::Invalid("presence likelihood enumeration supports at most 16 objects".into()));
    }
    let counts: Vec<usize> = (spec.glyphs.0..=spec.glyphs.1).collect();
    // likelihood[mask][scene]
    let mut like = vec![vec![0.0; spec.num_scenes]; 1 << o];
    for s in 0..spec.num_scenes {
        let p = spec.object_distribution(s);
        for &k in &counts {
            let mut seq = vec![0usize; k];
            loop {
                let prob: f64 = seq.iter().map(|&i| p[i]).product::<f64>() / counts.len() as f64;
                let mask = seq.iter().fold(0usize, |m, &i| m | (1 << i));
                like[mask][s] += prob;
                let mut pos = 0;
                while pos < k {
                    seq[pos] += 1;
                    if seq[pos] < o {
                        break;
                    }
                    seq[pos] = 0;
                    pos += 1;
                }
                if pos == k {
                    break;
                }
            }
        }
    }
    if split.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for sample in &split.samples {
        let mask = sample
            .objects
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .fold(0usize, |m, (i, _)| m | (1 << i));
        let row = &like[mask];
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        correct += usize::from(best == sample.scene.class());
    }
    Ok(correct as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(per_scene: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec { train_per_scene: per_scene, val_per_scene: per_scene / 2, ..Default::default() }
    }

    #[test]
    fn default_cooccurrence_is_valid() {
        let m = default_cooccurrence(6, 8);
        for s in 0..8 {
            let col: Vec<f64> = m.iter().map(|r| r[s]).collect();
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((col[s % 6] - 0.8 / 1.4).abs() < 1e-12);
            assert_eq!(col.iter().filter(|&&p| p > 0.0).count(), 3);
        }
        SyntheticSceneSpec::default().resolved().unwrap();
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSceneSpec::default().resolved().unwrap();
        s.cooccurrence[0][0] += 0.1;
        assert!(s.resolved().is_err());
        let mut s = SyntheticSceneSpec::default().resolved().unwrap();
        for row in s.cooccurrence.iter_mut() {
            row[3] = 1.0 / 6.0;
        }
        assert!(s.resolved().is_err(), "no dominant object");
        let s = SyntheticSceneSpec { glyph_size: (4, 40), ..Default::default() };
        assert!(s.resolved().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = tiny_spec(6);
        let a = generate_dataset(&spec, 5).unwrap();
        let b = generate_dataset(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 6).unwrap();
        assert_ne!(a.train.samples[0].image, c.train.samples[0].image);
        for split in [&a.train, &a.val] {
            let counts = split.by_class(8);
            assert!(counts.iter().all(|c| c.len() == split.len() / 8));
        }
        for s in &a.train.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((1..=3).contains(&s.glyphs.len()));
            for &g in &s.glyphs {
                assert_eq!(s.objects[g], 1.0);
            }
        }
    }

    #[test]
    fn glyph_frequencies_follow_cooccurrence() {
        let spec = SyntheticSceneSpec { train_per_scene: 500, val_per_scene: 0, ..Default::default() }
            .resolved()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for scene in 0..8 {
            let mut counts = [0usize; 6];
            let mut total = 0;
            for _ in 0..500 {
                for g in generate_sample(&spec, scene, &mut rng).glyphs {
                    counts[g] += 1;
                    total += 1;
                }
            }
            for (o, &c) in counts.iter().enumerate() {
                let p = spec.cooccurrence[o][scene];
                let freq = c as f64 / total as f64;
                assert!((freq - p).abs() < 0.05, "scene {scene} object {o}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::rand_uniform([6, 5, 3], 0.0, 1.0, &mut rng);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        let f = flip_horizontal(&img);
        assert_eq!(f.at(&[2, 0, 1]), img.at(&[2, 4, 1]));
    }

    #[test]
    fn identity_augment_only_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::rand_uniform([32, 32, 3], 0.0, 1.0, &mut rng);
        let stats = ChannelStats { mean: vec![0.5, 0.4, 0.3], std: vec![0.2, 0.25, 0.5] };
        let out = augment_with(&img, &AugmentChoice::identity((32, 32)), &stats).unwrap();
        assert_eq!(out, stats.normalize(&img).unwrap());
    }

    #[test]
    fn resize_preserves_constants_and_range() {
        let img = Tensor::full([8, 8, 3], 0.3);
        let r = resize_bilinear(&img, (10, 10)).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::rand_uniform([8, 8, 3], 0.0, 1.0, &mut rng);
        let r = resize_bilinear(&img, (10, 10)).unwrap();
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(resize_bilinear(&img, (8, 8)).unwrap(), img);
    }

    #[test]
    fn augment_choices_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut flips = 0;
        for _ in 0..400 {
            let c = AugmentChoice::sample((32, 32), MAX_SCALE, &mut rng);
            assert!((32..=40).contains(&c.resized.0) && c.resized.0 == c.resized.1);
            assert!(c.top + 32 <= c.resized.0 && c.left + 32 <= c.resized.1);
            flips += usize::from(c.flip);
        }
        assert!((150..250).contains(&flips));
    }

    #[test]
    fn augmented_pixels_keep_their_range_before_normalization() {
        let ds = generate_dataset(&tiny_spec(2), 3).unwrap();
        let id = ChannelStats::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in &ds.train.samples {
            let a = augment(&s.image, &id, &mut rng).unwrap();
            assert_eq!(a.shape(), [32, 32, 3]);
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn normalized_training_set_is_standardized() {
        let ds = generate_dataset(&tiny_spec(20), 6).unwrap();
        let normed: Vec<Tensor> = ds.train.samples.iter().map(|s| ds.stats.normalize(&s.image).unwrap()).collect();
        let stats = ChannelStats::compute(normed.iter()).unwrap();
        for k in 0..3 {
            assert!(stats.mean[k].abs() < 0.01);
            assert!((stats.std[k] - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn balanced_batches_have_equal_class_counts() {
        let labels: Vec<usize> = (0..8).flat_map(|c| std::iter::repeat(c).take(12 + c)).collect();
        let sampler = BalancedSampler::new(&labels, 8, 32).unwrap();
        assert!(!sampler.flagged());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let epoch = sampler.epoch(&mut rng);
        assert_eq!(epoch.iter().map(Vec::len).sum::<usize>(), 96);
        for batch in &epoch {
            let mut hist = [0usize; 8];
            batch.iter().for_each(|&i| hist[labels[i]] += 1);
            assert!(hist.iter().all(|&h| h == 4), "{hist:?}");
        }
        let mut seen: Vec<usize> = epoch.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 96);

        let other = sampler.epoch(&mut rng);
        assert_ne!(epoch, other);
    }

    #[test]
    fn epoch_histogram_is_flat_for_awkward_batch_sizes() {
        let labels: Vec<usize> = (0..500).map(|i| i % 7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for batch in [3, 10, 64] {
            let sampler = BalancedSampler::new(&labels, 7, batch).unwrap();
            assert_eq!(sampler.flagged(), batch < 7);
            let mut hist = [0usize; 7];
            for b in sampler.epoch(&mut rng) {
                assert!(b.len() >= 2);
                b.iter().for_each(|&i| hist[labels[i]] += 1);
            }
            let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(hi - lo <= 1, "{hist:?}");
        }
        assert!(BalancedSampler::new(&labels, 7, 501).is_err());
        assert!(BalancedSampler::new(&[0, 0, 1], 3, 2).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec { train_per_scene: 1, val_per_scene: 1, num_scenes: 5, ..Default::default() };
        let ds = generate_dataset(&spec, 10).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 10);
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let files = fs::read_dir(dir.path().join("train")).unwrap().count();
        assert_eq!(files, ds.train.len());

        let victim = dir.path().join("val/000003.fost");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[1] = b'!';
        fs::write(&victim, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000003.fost"), "{err}");
    }

    #[test]
    fn objects_alone_predict_scenes() {
        let spec = SyntheticSceneSpec { train_per_scene: 0, val_per_scene: 100, ..Default::default() };
        let ds = generate_dataset(&spec, 11).unwrap();
        let acc = object_bayes_accuracy(&ds.spec, &ds.val).unwrap();
        assert!(acc > 0.6, "{acc}");
    }
}
