//! Labeled byte-image datasets: CIFAR-10 binary records, synthetic sets,
//! augmentation and seeded mini-batching.
//!
//! Images stay as raw `u8` RGB planes (`[3,H,W]`, channel-major) all the way
//! to the input stage, so lookup tables can index them directly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// A batch of byte images, `[N,3,H,W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBatch {
    pixels: Vec<u8>,
    n: usize,
    height: usize,
    width: usize,
}

impl ImageBatch {
    pub fn new(pixels: Vec<u8>, n: usize, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != n * 3 * height * width {
            return Err(Error::DataLength {
                shape: vec![n, 3, height, width],
                len: pixels.len(),
            });
        }
        Ok(Self {
            pixels,
            n,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = 3 * self.height * self.width;
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.n, 3, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64).collect(),
        )
        .expect("length checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageSet {
    name: String,
    classes: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(name: impl Into<String>, classes: usize, height: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            classes,
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, image: &[u8], label: usize) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::DataLength {
                shape: vec![3, self.height, self.width],
                len: image.len(),
            });
        }
        if label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Unaugmented batch of the given items.
    pub fn batch(&self, indices: &[usize]) -> (ImageBatch, Vec<usize>) {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            ImageBatch::new(pixels, indices.len(), self.height, self.width).expect("consistent"),
            labels,
        )
    }

    pub fn all(&self) -> (ImageBatch, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// First `per_class` items of every class, in file order.
    pub fn balanced_subset(&self, per_class: usize) -> Result<Self> {
        let mut out = Self::new(format!("{}[{per_class}/class]", self.name), self.classes, self.height, self.width);
        let mut taken = vec![0; self.classes];
        for i in 0..self.len() {
            let l = self.labels[i];
            if taken[l] < per_class {
                taken[l] += 1;
                out.push(self.image(i), l)?;
            }
        }
        if let Some(short) = taken.iter().position(|&t| t < per_class) {
            return Err(Error::InvalidConfig(format!(
                "{}: class {short} has only {} of {per_class} requested images",
                self.name, taken[short]
            )));
        }
        Ok(out)
    }

    /// Concatenates sets with identical geometry and class count.
    pub fn concat(name: impl Into<String>, parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("cannot concatenate zero sets".into()))?;
        let mut out = Self::new(name, first.classes, first.height, first.width);
        for p in parts {
            if (p.classes, p.height, p.width) != (out.classes, out.height, out.width) {
                return Err(Error::InvalidConfig(format!(
                    "cannot concatenate {} with {}",
                    p.name, out.name
                )));
            }
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn parse_records(
    path: &Path,
    bytes: &[u8],
    classes: usize,
    height: usize,
    width: usize,
) -> Result<LabeledImageSet> {
    let record = 1 + 3 * height * width;
    if !bytes.len().is_multiple_of(record) {
        return Err(format_err(
            path,
            (bytes.len() - bytes.len() % record) as u64,
            format!("truncated record (file length {} is not a multiple of {record})", bytes.len()),
        ));
    }
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut set = LabeledImageSet::new(name, classes, height, width);
    for (i, rec) in bytes.chunks(record).enumerate() {
        let label = rec[0] as usize;
        if label >= classes {
            return Err(format_err(
                path,
                (i * record) as u64,
                format!("label {label} >= {classes}"),
            ));
        }
        set.push(&rec[1..], label)?;
    }
    Ok(set)
}

/// Reads CIFAR-10 binary records: one label byte then 1024 R, 1024 G and
/// 1024 B bytes, row-major.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_records(path, &bytes, CIFAR_CLASSES, CIFAR_SIDE, CIFAR_SIDE)
}

/// Loads `data_batch_*.bin` (train) and `test_batch.bin` (test) from a
/// CIFAR-10 binary directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let dir = dir.as_ref();
    let mut parts = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            parts.push(load_cifar10_binary(&p)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no data_batch_*.bin in {}", dir.display()),
        )));
    }
    let train = LabeledImageSet::concat("cifar10-train", &parts)?;
    let test = load_cifar10_binary(dir.join("test_batch.bin"))?;
    Ok((train, test))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

/// Writes `set` in the record layout plus a `<path>.header` sidecar with
/// `classes`, `height`, `width` and `count`.
pub fn save_records(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path)?;
    for i in 0..set.len() {
        f.write_all(&[set.label(i) as u8])?;
        f.write_all(set.image(i))?;
    }
    fs::write(
        sidecar(path),
        format!(
            "classes={}\nheight={}\nwidth={}\ncount={}\n",
            set.classes,
            set.height,
            set.width,
            set.len()
        ),
    )?;
    Ok(())
}

/// Reads a record file. Without a sidecar header the CIFAR-10 geometry is
/// assumed.
pub fn load_records(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let header = sidecar(path);
    if !header.exists() {
        return load_cifar10_binary(path);
    }
    let text = fs::read_to_string(&header)?;
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(&header, 0, format!("malformed line `{line}`")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| format_err(&header, 0, format!("`{k}` is not an integer")))?;
        fields.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| format_err(&header, 0, format!("missing `{k}`")))
    };
    let set = parse_records(path, &fs::read(path)?, get("classes")?, get("height")?, get("width")?)?;
    let count = get("count")?;
    if set.len() != count {
        return Err(format_err(
            path,
            0,
            format!("header declares {count} records, file holds {}", set.len()),
        ));
    }
    Ok(set)
}

/// Train-time augmentation: zero-pad, random crop, random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
    pub enabled: bool,
}

impl AugmentSpec {
    /// The usual CIFAR recipe: pad 4, crop back to `side`, flip with p = 0.5.
    pub fn standard(side: usize) -> Self {
        Self {
            pad: 4,
            crop: side,
            hflip_prob: 0.5,
            enabled: true,
        }
    }

    pub fn identity(side: usize) -> Self {
        Self {
            pad: 0,
            crop: side,
            hflip_prob: 0.0,
            enabled: false,
        }
    }
}

/// Pads `image` (`[3,H,W]`) with zeros, crops `crop x crop` at a uniform
/// random origin and mirrors it with probability `hflip_prob`.
pub fn augment(image: &[u8], height: usize, width: usize, spec: &AugmentSpec, rng: &mut impl Rng) -> Vec<u8> {
    if !spec.enabled {
        return image.to_vec();
    }
    let (ph, pw) = (height + 2 * spec.pad, width + 2 * spec.pad);
    let crop = spec.crop.min(ph).min(pw);
    let top = rng.random_range(0..=ph - crop);
    let left = rng.random_range(0..=pw - crop);
    let flip = spec.hflip_prob > 0.0 && rng.random_bool(spec.hflip_prob.min(1.0));
    let mut out = vec![0u8; 3 * crop * crop];
    for c in 0..3 {
        for y in 0..crop {
            let sy = (top + y) as isize - spec.pad as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..crop {
                let cx = if flip { crop - 1 - x } else { x };
                let sx = (left + cx) as isize - spec.pad as isize;
                if sx >= 0 && sx < width as isize {
                    out[(c * crop + y) * crop + x] = image[(c * height + sy as usize) * width + sx as usize];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Every pixel of class `k` is drawn from a color band private to `k`.
    Separable,
    /// Class `k` is a stripe orientation drawn over a random base color.
    Striped,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Self::Separable),
            "striped" => Ok(Self::Striped),
            other => Err(Error::InvalidConfig(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// Class-balanced synthetic set, items ordered class by class.
pub fn make_synthetic(
    kind: SyntheticKind,
    per_class: usize,
    classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    if per_class == 0 || classes == 0 || height == 0 || width == 0 || classes > 256 {
        return Err(Error::InvalidConfig(
            "synthetic sets need positive sizes and at most 256 classes".into(),
        ));
    }
    let name = match kind {
        SyntheticKind::Separable => "synthetic:separable",
        SyntheticKind::Striped => "synthetic:striped",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledImageSet::new(name, classes, height, width);
    let mut img = vec![0u8; 3 * height * width];
    for k in 0..classes {
        for _ in 0..per_class {
            match kind {
                SyntheticKind::Separable => {
                    // band width 128/K keeps neighbouring bands apart
                    let band = (128 / classes).max(1);
                    let lo = if classes == 1 { 0 } else { k * (256 - band) / (classes - 1) };
                    for p in img.iter_mut() {
                        *p = (lo + rng.random_range(0..band)) as u8;
                    }
                }
                SyntheticKind::Striped => draw_striped(&mut img, k, height, width, &mut rng),
            }
            set.push(&img, k)?;
        }
    }
    Ok(set)
}

fn draw_striped(img: &mut [u8], class: usize, height: usize, width: usize, rng: &mut impl Rng) {
    let period = 4 + 2 * (class / 4);
    let phase = rng.random_range(0..period);
    for c in 0..3 {
        let amp: usize = rng.random_range(32..=64);
        let base = rng.random_range(0..=255 - amp);
        for y in 0..height {
            for x in 0..width {
                let t = match class % 4 {
                    0 => y,
                    1 => x,
                    2 => x + y,
                    _ => (x / 2 + y / 2) * (period / 2).max(1),
                };
                let on = (t + phase) % period < period / 2;
                img[(c * height + y) * width + x] = (base + if on { amp } else { 0 }) as u8;
            }
        }
    }
}

/// Seeded mini-batch stream over one epoch. The shuffle order depends on
/// `(seed, epoch)` only; the last batch may be short.
pub struct BatchIter<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<(AugmentSpec, ChaCha8Rng)>,
}

impl<'a> BatchIter<'a> {
    pub fn new(set: &'a LabeledImageSet, batch_size: usize, seed: u64, epoch: u64) -> Self {
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Self {
            set,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
            augment: None,
        }
    }

    /// Applies `spec` to every item with an RNG derived from `(seed, epoch)`.
    pub fn with_augment(mut self, spec: AugmentSpec, seed: u64, epoch: u64) -> Self {
        if spec.enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA076_1D64_78BD_642F);
            rng.set_stream(epoch);
            self.augment = Some((spec, rng));
        }
        self
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (ImageBatch, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let set = self.set;
        match &mut self.augment {
            None => Some(set.batch(idx)),
            Some((spec, rng)) => {
                let side = spec.crop.min(set.height + 2 * spec.pad).min(set.width + 2 * spec.pad);
                let mut pixels = Vec::with_capacity(idx.len() * 3 * side * side);
                for &i in idx {
                    pixels.extend(augment(set.image(i), set.height, set.width, spec, rng));
                }
                let labels = idx.iter().map(|&i| set.label(i)).collect();
                Some((ImageBatch::new(pixels, idx.len(), side, side).expect("consistent"), labels))
            }
        }
    }
}
