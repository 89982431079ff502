//! Dataset container I/O, synthetic generators and batch streams.
//!
//! Container layout (little-endian, no padding): magic `ZDX1`; u32
//! num_samples, channels, height, width, num_classes; then the pixel bytes
//! in sample-major row-major order; then one label byte per sample.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ZDX1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Raw u8 images with labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetContainer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// In-memory tag only; not part of the file format.
    pub split: Option<Split>,
}

impl DatasetContainer {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let c = Self {
            channels,
            height,
            width,
            num_classes,
            pixels,
            labels,
            split: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents must be positive, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must lie in [1, 256], got {}",
                self.num_classes
            )));
        }
        if self.pixels.len() != self.labels.len() * self.sample_len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixel bytes for {} samples of {} bytes",
                self.pixels.len(),
                self.labels.len(),
                self.sample_len()
            )));
        }
        if let Some((i, y)) = self.labels.iter().enumerate().find(|(_, y)| **y as usize >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} of sample {i} is not below num_classes {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + self.labels.len());
        out.extend_from_slice(&MAGIC);
        for v in [self.len(), self.channels, self.height, self.width, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(0, format!("file holds {} bytes, too short for the magic", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:02x?}, expected {:02x?} (\"ZDX1\")", &bytes[..4], MAGIC),
            ));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "header truncated"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (n, c, h, w, k) = (field(0), field(1), field(2), field(3), field(4));
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::format(8, format!("zero image extent {c}x{h}x{w}")));
        }
        if k == 0 || k > 256 {
            return Err(Error::format(20, format!("num_classes {k} outside [1, 256]")));
        }
        let pix = n
            .checked_mul(c * h * w)
            .ok_or_else(|| Error::format(4, "payload size overflows"))?;
        let need = HEADER_LEN + pix + n;
        if bytes.len() < need {
            return Err(Error::format(
                bytes.len() as u64,
                format!("payload truncated: {} bytes present, {need} expected", bytes.len()),
            ));
        }
        if bytes.len() > need {
            return Err(Error::format(need as u64, format!("{} trailing bytes", bytes.len() - need)));
        }
        let labels = bytes[HEADER_LEN + pix..].to_vec();
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, y)| **y as usize >= k) {
            return Err(Error::format(
                (HEADER_LEN + pix + i) as u64,
                format!("label {y} is not below num_classes {k}"),
            ));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            num_classes: k,
            pixels: bytes[HEADER_LEN..HEADER_LEN + pix].to_vec(),
            labels,
            split: None,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Samples `[start, end)` as a new container.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "range [{start}, {end}) outside {} samples",
                self.len()
            )));
        }
        let s = self.sample_len();
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            pixels: self.pixels[start * s..end * s].to_vec(),
            labels: self.labels[start..end].to_vec(),
            split: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    /// Splits off the first `round(fraction · len)` samples.
    pub fn split_at_fraction(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} outside [0, 1]")));
        }
        let cut = (fraction * self.len() as f64).round() as usize;
        Ok((self.slice(0, cut)?, self.slice(cut, self.len())?))
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            shape: [self.channels, self.height, self.width],
            num_classes: self.num_classes,
            images: self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            labels: self.labels.iter().map(|&y| y as usize).collect(),
        }
    }
}

/// Decoded samples ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(&self.images[i * s..(i + 1) * s]);
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Endless batch iterator over a dataset. Each pass visits a fresh
/// permutation derived from `(seed, pass)`, so the position alone is enough
/// to resume. A trailing partial batch is dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStream {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pass: u64,
    pub pos: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch stream needs samples and a positive batch size, got {len} and {batch_size}"
            )));
        }
        Ok(Self {
            len,
            batch_size: batch_size.min(len),
            seed,
            pass: 0,
            pos: 0,
        })
    }

    pub fn batches_per_pass(&self) -> usize {
        self.len / self.batch_size
    }

    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.pass);
        idx.shuffle(&mut rng);
        idx
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.len {
            self.pass += 1;
            self.pos = 0;
        }
        let out = self.order()[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Blobs,
    Stripes,
    XorTexture,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Stripes => "stripes",
            SyntheticKind::XorTexture => "xor-texture",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "stripes" => Ok(SyntheticKind::Stripes),
            "xor-texture" => Ok(SyntheticKind::XorTexture),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic kind {other:?} (blobs, stripes, xor-texture)"
            ))),
        }
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic synthetic images. Labels cycle through the classes and
/// are then shuffled, so counts differ by at most one. Pixel noise is an
/// additive normal draw with standard deviation `noise` before clipping.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetContainer> {
    if spec.classes < 2 || spec.classes > 256 {
        return Err(Error::InvalidArgument(format!("classes must lie in [2, 256], got {}", spec.classes)));
    }
    if spec.channels == 0 || spec.size == 0 {
        return Err(Error::InvalidArgument("channels and size must be positive".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be non-negative, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, s) = (spec.channels, spec.size);
    let mut labels: Vec<u8> = (0..spec.samples).map(|i| (i % spec.classes) as u8).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let protos = match spec.kind {
        SyntheticKind::Blobs => blob_prototypes(&mut rng, spec.classes, c, s),
        _ => Vec::new(),
    };
    let mut pixels = Vec::with_capacity(spec.samples * c * s * s);
    for &y in &labels {
        let y = y as usize;
        let clean: Vec<f64> = match spec.kind {
            SyntheticKind::Blobs => protos[y].clone(),
            SyntheticKind::Stripes => stripes(&mut rng, y, spec.classes, c, s),
            SyntheticKind::XorTexture => xor_texture(&mut rng, y, spec.classes, c, s),
        };
        for v in clean {
            let jitter = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push(quantize(v + jitter));
        }
    }
    DatasetContainer::new(c, s, s, spec.classes, pixels, labels)
}

/// One Gaussian bump per class at distinct grid positions, plus a per-class
/// channel tint.
fn blob_prototypes<R: Rng>(rng: &mut R, classes: usize, c: usize, s: usize) -> Vec<Vec<f64>> {
    let grid = (classes as f64).sqrt().ceil() as usize + 1;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);
    let sigma = s as f64 / (2.0 * grid as f64);
    (0..classes)
        .map(|k| {
            let (gy, gx) = (cells[k] / grid, cells[k] % grid);
            let cy = (gy as f64 + 0.5) * s as f64 / grid as f64;
            let cx = (gx as f64 + 0.5) * s as f64 / grid as f64;
            let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
            let mut img = Vec::with_capacity(c * s * s);
            for t in &tint {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        img.push(t * (-d2 / (2.0 * sigma * sigma)).exp());
                    }
                }
            }
            img
        })
        .collect()
}

/// Sinusoidal stripes whose orientation encodes the class; random phase.
fn stripes<R: Rng>(rng: &mut R, y: usize, classes: usize, c: usize, s: usize) -> Vec<f64> {
    let angle = std::f64::consts::PI * y as f64 / classes as f64;
    let (dy, dx) = angle.sin_cos();
    let freq = 2.0 * std::f64::consts::PI * 3.0 / s as f64;
    let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let mut img = Vec::with_capacity(c * s * s);
    for _ in 0..c {
        for r in 0..s {
            for q in 0..s {
                let t = (r as f64 * dy + q as f64 * dx) * freq + phase;
                img.push(0.5 + 0.5 * t.sin());
            }
        }
    }
    img
}

/// Left and right halves carry checkerboards of periods `a+1` and `b+1`
/// with `(a + b) mod classes` as the label.
fn xor_texture<R: Rng>(rng: &mut R, y: usize, classes: usize, c: usize, s: usize) -> Vec<f64> {
    let a = rng.random_range(0..classes);
    let b = (y + classes - a) % classes;
    let mut img = Vec::with_capacity(c * s * s);
    for _ in 0..c {
        for r in 0..s {
            for q in 0..s {
                let period = if q < s / 2 { a + 1 } else { b + 1 };
                let on = ((r / period) + (q / period)) % 2 == 0;
                img.push(if on { 1.0 } else { 0.0 });
            }
        }
    }
    img
}
