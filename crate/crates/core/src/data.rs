//! Synthetic multi-class segmentation data: generation, on-disk layout,
//! labeled/unlabeled split and semi-supervised batch assembly.
//!
//! A dataset directory holds `meta.json` plus, per sample `i`,
//! `img_{i:05}.etns` (shape `(1,H,W)`) and `lab_{i:05}.etns` (shape `(H,W)`,
//! class indices stored as `f64`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EtcError, Result};
use crate::tensor::Tensor;

const MAX_PLACEMENT_TRIES: usize = 100;
/// Minimum free margin, in pixels, kept between two shapes.
const SHAPE_GAP: i64 = 2;
/// Half-width of the per-image random offset applied to each class level.
const LEVEL_JITTER: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 200,
            height: 64,
            width: 64,
            classes: 3,
            noise_sigma: 1.0,
            blur_radius: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.classes) {
            return Err(EtcError::Config(format!(
                "classes must be in [2,4], got {}",
                self.classes
            )));
        }
        if self.n == 0 {
            return Err(EtcError::Config("n must be positive".into()));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(4)
            || !self.width.is_multiple_of(4)
        {
            return Err(EtcError::Config(format!(
                "height/width must be positive multiples of 4, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(EtcError::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `(1,H,W)`, zero mean and unit variance.
    pub image: Tensor,
    /// Row-major class indices.
    pub label: Vec<usize>,
    pub is_labeled: bool,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Ring {
        cy: f64,
        cx: f64,
        outer: f64,
        inner: f64,
    },
    Rect {
        y0: i64,
        x0: i64,
        h: i64,
        w: i64,
    },
}

impl Shape {
    fn contains(&self, y: i64, x: i64) -> bool {
        let d2 = |cy: f64, cx: f64| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        match *self {
            Shape::Disk { cy, cx, r } => d2(cy, cx) <= r * r,
            Shape::Ring {
                cy,
                cx,
                outer,
                inner,
            } => {
                let d = d2(cy, cx);
                d <= outer * outer && d > inner * inner
            }
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
        }
    }

    /// Random shape of kind `kind` fully inside an `h x w` canvas.
    fn sample(kind: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Shape {
        let side = h.min(w) as f64;
        let centre = |rng: &mut ChaCha8Rng, r: f64| {
            let cy = rng.random_range(r..=(h as f64 - 1.0 - r).max(r));
            let cx = rng.random_range(r..=(w as f64 - 1.0 - r).max(r));
            (cy, cx)
        };
        match kind % 3 {
            0 => {
                let r = rng.random_range((side / 10.0).max(1.0)..=(side / 6.0).max(1.5));
                let (cy, cx) = centre(rng, r);
                Shape::Disk { cy, cx, r }
            }
            1 => {
                let outer = rng.random_range((side / 8.0).max(2.0)..=(side / 5.0).max(2.5));
                let inner = outer * rng.random_range(0.45..0.65);
                let (cy, cx) = centre(rng, outer);
                Shape::Ring {
                    cy,
                    cx,
                    outer,
                    inner,
                }
            }
            _ => {
                let lo = (side / 6.0).max(1.0) as i64;
                let hi = ((side / 3.0) as i64).max(lo);
                let rh = rng.random_range(lo..=hi).min(h as i64);
                let rw = rng.random_range(lo..=hi).min(w as i64);
                let y0 = rng.random_range(0..=h as i64 - rh);
                let x0 = rng.random_range(0..=w as i64 - rw);
                Shape::Rect {
                    y0,
                    x0,
                    h: rh,
                    w: rw,
                }
            }
        }
    }
}

/// Renders sample `index`; a pure function of `(cfg, index)`.
pub fn render_sample(cfg: &GeneratorConfig, index: usize) -> Result<SegSample> {
    cfg.validate()?;
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let mut label = vec![0usize; h * w];
    // pixels a new shape may not touch: existing shapes grown by SHAPE_GAP
    let mut reserved = vec![false; h * w];
    for class in 1..k {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let shape = Shape::sample(class - 1, h, w, &mut rng);
            let mut pixels = Vec::new();
            let mut clash = false;
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y as i64, x as i64) {
                        if reserved[y * w + x] {
                            clash = true;
                            break;
                        }
                        pixels.push(y * w + x);
                    }
                }
                if clash {
                    break;
                }
            }
            if !clash && !pixels.is_empty() {
                placed = Some(pixels);
                break;
            }
        }
        let pixels = placed.ok_or_else(|| {
            EtcError::Generation(format!(
                "sample {index}: no free placement for class {class} after {MAX_PLACEMENT_TRIES} tries"
            ))
        })?;
        for &p in &pixels {
            label[p] = class;
            let (py, px) = ((p / w) as i64, (p % w) as i64);
            for dy in -SHAPE_GAP..=SHAPE_GAP {
                for dx in -SHAPE_GAP..=SHAPE_GAP {
                    let (y, x) = (py + dy, px + dx);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        reserved[y as usize * w + x as usize] = true;
                    }
                }
            }
        }
    }

    let levels: Vec<f64> = (0..k)
        .map(|c| c as f64 + rng.random_range(-LEVEL_JITTER..LEVEL_JITTER))
        .collect();
    let mut img: Vec<f64> = label.iter().map(|&c| levels[c]).collect();
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| EtcError::Config(format!("noise_sigma: {e}")))?;
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if cfg.blur_radius > 0 {
        img = box_blur(&img, h, w, cfg.blur_radius);
    }
    normalize(&mut img);
    Ok(SegSample {
        image: Tensor::new(&[1, h, w], img)?,
        label,
        is_labeled: false,
    })
}

/// Mean over a `(2r+1)^2` window, clipped at the borders.
pub fn box_blur(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += img[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// Shifts and scales in place to zero mean and unit variance.
pub fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    for x in v.iter_mut() {
        *x = (*x - mean) / std;
    }
}

fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("img_{i:05}.etns"))
}

fn label_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("lab_{i:05}.etns"))
}

pub fn generate_dataset(dir: &Path, cfg: &GeneratorConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| EtcError::io(dir, e))?;
    for i in 0..cfg.n {
        let s = render_sample(cfg, i)?;
        s.image.save(&image_path(dir, i))?;
        let lab = Tensor::new(
            &[cfg.height, cfg.width],
            s.label.iter().map(|&c| c as f64).collect(),
        )?;
        lab.save(&label_path(dir, i))?;
    }
    let meta = serde_json::to_string_pretty(cfg).expect("config serializes");
    let path = dir.join("meta.json");
    fs::write(&path, meta).map_err(|e| EtcError::io(&path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: GeneratorConfig,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| EtcError::io(&path, e))?;
        let meta: GeneratorConfig = serde_json::from_str(&text)
            .map_err(|e| EtcError::Format(format!("{}: {e}", path.display())))?;
        meta.validate()?;
        let (h, w) = (meta.height, meta.width);
        let mut samples = Vec::with_capacity(meta.n);
        for i in 0..meta.n {
            let image = Tensor::load(&image_path(dir, i))?;
            if image.shape() != [1, h, w] {
                return Err(EtcError::Format(format!(
                    "image {i} has shape {:?}",
                    image.shape()
                )));
            }
            let lab = Tensor::load(&label_path(dir, i))?;
            if lab.shape() != [h, w] {
                return Err(EtcError::Format(format!(
                    "label {i} has shape {:?}",
                    lab.shape()
                )));
            }
            let label = lab
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < meta.classes {
                        Ok(v as usize)
                    } else {
                        Err(EtcError::Format(format!(
                            "label {i} holds invalid class {v}"
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(SegSample {
                image,
                label,
                is_labeled: false,
            });
        }
        Ok(Self { meta, samples })
    }

    /// Marks the given indices as labeled and every other sample unlabeled.
    pub fn mark_labeled(&mut self, labeled: &[usize]) {
        for s in self.samples.iter_mut() {
            s.is_labeled = false;
        }
        for &i in labeled {
            self.samples[i].is_labeled = true;
        }
    }
}

/// FNV-1a over the sorted file names and contents of a directory.
pub fn dataset_checksum(dir: &Path) -> Result<u64> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| EtcError::io(dir, e))?
        .map(|e| {
            e.map(|e| e.file_name())
                .map_err(|err| EtcError::io(dir, err))
        })
        .collect::<Result<_>>()?;
    names.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for name in names {
        let path = dir.join(&name);
        feed(name.to_string_lossy().as_bytes());
        feed(&fs::read(&path).map_err(|e| EtcError::io(&path, e))?);
    }
    Ok(h)
}

/// Deterministic shuffled split into `(labeled, unlabeled)` indices.
pub fn split(n: usize, labeled_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(EtcError::Config(format!(
            "labeled_fraction must be in (0,1), got {labeled_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = ((labeled_fraction * n as f64).round() as usize)
        .max(1)
        .min(n);
    let unlabeled = order.split_off(count);
    Ok((order, unlabeled))
}

/// Endless sampler over a pool that reshuffles at every epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicSampler {
    pool: Vec<usize>,
    seed: u64,
    lane: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl CyclicSampler {
    /// `lane` separates the shuffle streams of samplers sharing a seed.
    pub fn new(pool: Vec<usize>, seed: u64, lane: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(EtcError::Config("cannot sample from an empty pool".into()));
        }
        let mut s = Self {
            pool,
            seed,
            lane,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.epoch << 1) | (self.lane & 1));
        self.order = self.pool.clone();
        self.order.shuffle(&mut rng);
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    /// `(B,1,H,W)` with the labeled rows first.
    pub images: Tensor,
    /// `(B,K,H,W)`; rows of unlabeled samples are all zero.
    pub labels_onehot: Tensor,
    pub labeled_mask: Vec<bool>,
    pub indices: Vec<usize>,
}

impl SegBatch {
    pub fn n_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    /// One-hot labels of the labeled rows only, `(B_l,K,H,W)`.
    pub fn labeled_onehot(&self) -> Result<Tensor> {
        let rows: Vec<Tensor> = (0..self.n_labeled())
            .map(|i| self.labels_onehot.select_first(i))
            .collect::<Result<_>>()?;
        Tensor::concat_first(&rows.iter().collect::<Vec<_>>())
    }
}

/// `(K,H,W)` one-hot encoding of a label map.
pub fn one_hot(label: &[usize], classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut d = vec![0.0; classes * h * w];
    for (p, &c) in label.iter().enumerate() {
        if c >= classes {
            return Err(EtcError::Validation(format!(
                "class {c} out of range for K={classes}"
            )));
        }
        d[c * h * w + p] = 1.0;
    }
    Tensor::new(&[classes, h, w], d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    labeled: CyclicSampler,
    unlabeled: Option<CyclicSampler>,
    batch_labeled: usize,
    batch_unlabeled: usize,
}

impl BatchSampler {
    pub fn new(
        labeled: Vec<usize>,
        unlabeled: Vec<usize>,
        batch_labeled: usize,
        batch_unlabeled: usize,
        seed: u64,
    ) -> Result<Self> {
        if labeled.is_empty() || batch_labeled == 0 {
            return Err(EtcError::Config(
                "the labeled pool and batch must be nonempty".into(),
            ));
        }
        let unlabeled = if batch_unlabeled > 0 {
            Some(CyclicSampler::new(unlabeled, seed, 1)?)
        } else {
            None
        };
        Ok(Self {
            labeled: CyclicSampler::new(labeled, seed, 0)?,
            unlabeled,
            batch_labeled,
            batch_unlabeled,
        })
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Result<SegBatch> {
        let mut indices: Vec<usize> = (0..self.batch_labeled)
            .map(|_| self.labeled.next_index())
            .collect();
        if let Some(u) = self.unlabeled.as_mut() {
            indices.extend((0..self.batch_unlabeled).map(|_| u.next_index()));
        }
        let (k, h, w) = (data.meta.classes, data.meta.height, data.meta.width);
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut mask = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let s = data
                .samples
                .get(i)
                .ok_or_else(|| EtcError::Config(format!("sample index {i} out of range")))?;
            images.push(s.image.clone().reshape(&[1, 1, h, w])?);
            let is_lab = slot < self.batch_labeled;
            let oh = if is_lab {
                one_hot(&s.label, k, h, w)?
            } else {
                Tensor::zeros(&[k, h, w])
            };
            labels.push(oh.reshape(&[1, k, h, w])?);
            mask.push(is_lab);
        }
        Ok(SegBatch {
            images: Tensor::concat_first(&images.iter().collect::<Vec<_>>())?,
            labels_onehot: Tensor::concat_first(&labels.iter().collect::<Vec<_>>())?,
            labeled_mask: mask,
            indices,
        })
    }
}
