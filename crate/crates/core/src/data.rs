//! Image datasets: the CIFAR-10 binary format, a procedural generator, and
//! the augmentation applied to training batches.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by three 1024-byte colour planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-channel mean and (population) standard deviation of raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of `N×C×H×W` raw pixel data, accumulated in `f64`.
    pub fn of(raw: &[f32], channels: usize, plane: usize) -> Self {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for sample in raw.chunks_exact(channels * plane) {
            for (c, p) in sample.chunks_exact(plane).enumerate() {
                for &v in p {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (raw.len() / channels) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        ChannelStats { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    /// Normalisation applied to `images`, always taken from a training split.
    pub stats: ChannelStats,
}

impl Dataset {
    /// Standardises `raw` (`N×C×H×W`, values in `[0, 1]`) with `stats`.
    pub fn from_raw(
        shape: [usize; 4],
        mut raw: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        stats: ChannelStats,
    ) -> Result<Self> {
        if labels.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "dataset labels",
                lhs: vec![shape[0]],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(
                "data.classes",
                format!("label {l} outside 0..{classes}"),
            ));
        }
        let plane = shape[2] * shape[3];
        for sample in raw.chunks_exact_mut(shape[1] * plane) {
            for (c, p) in sample.chunks_exact_mut(plane).enumerate() {
                let (m, s) = (stats.mean[c], stats.std[c]);
                for v in p {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        Ok(Dataset {
            images: Tensor::new(&shape, raw)?,
            labels,
            classes,
            split,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[C, H, W]` of one image.
    pub fn geometry(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len: usize = self.geometry().iter().product();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let geo = self.geometry();
        let len: usize = geo.iter().product();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let batch = Tensor::new(&[indices.len(), geo[0], geo[1], geo[2]], data)?;
        Ok((batch, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
            stats: self.stats.clone(),
        })
    }
}

/// Parses CIFAR-10 binary records into raw `[0, 1]` pixels and labels.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: whole as u64,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut raw = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        raw.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((raw, labels))
}

fn read_records(paths: &[PathBuf]) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let (r, l) = parse_cifar10(&bytes, p)?;
        raw.extend(r);
        labels.extend(l);
    }
    if labels.is_empty() {
        let path = paths.first().cloned().unwrap_or_default();
        return Err(Error::TruncatedRecord { path, offset: 0 });
    }
    Ok((raw, labels))
}

fn cifar_shape(n: usize) -> [usize; 4] {
    [n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE]
}

/// Loads one or more CIFAR-10 binary files as a training split, normalised
/// with their own channel statistics.
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let (raw, labels) = read_records(paths)?;
    let stats = ChannelStats::of(&raw, CIFAR_CHANNELS, CIFAR_SIDE * CIFAR_SIDE);
    Dataset::from_raw(
        cifar_shape(labels.len()),
        raw,
        labels,
        CIFAR_CLASSES,
        Split::Train,
        stats,
    )
}

/// Loads an evaluation split normalised with training-split statistics.
pub fn load_cifar10_binary_with_stats(paths: &[PathBuf], stats: &ChannelStats) -> Result<Dataset> {
    let (raw, labels) = read_records(paths)?;
    Dataset::from_raw(
        cifar_shape(labels.len()),
        raw,
        labels,
        CIFAR_CLASSES,
        Split::Test,
        stats.clone(),
    )
}

/// Resolves a CIFAR-10 location. A directory yields its `data_batch_*.bin`
/// files for training and `test_batch.bin` (if present) for evaluation; a
/// file is used for training alone.
pub fn cifar10_files(path: &Path) -> Result<(Vec<PathBuf>, Option<PathBuf>)> {
    if path.is_file() {
        return Ok((vec![path.to_path_buf()], None));
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut train = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("data_batch_") && name.ends_with(".bin") {
            train.push(p);
        }
    }
    train.sort();
    if train.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no data_batch_*.bin files"),
        ));
    }
    let test = path.join("test_batch.bin");
    Ok((train, test.is_file().then_some(test)))
}

/// Raw `[0, 1]` pixels of a procedural image of class `label`.
///
/// Each class fixes an orientation, a stripe frequency and a colour tint;
/// every sample draws its own phase, contrast and pixel noise.
fn synth_image(label: usize, classes: usize, rng: &mut Rng, out: &mut [f32]) {
    let theta = PI * label as f64 / classes as f64;
    let freq = 1.0 + (label % 3) as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let phase = 2.0 * PI * rng.next_f64();
    let contrast = 0.7 + 0.6 * rng.next_f64();
    let side = CIFAR_SIDE as f64;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for c in 0..CIFAR_CHANNELS {
        let tint = 0.15 * (2.0 * PI * (label as f64 / classes as f64 + c as f64 / 3.0)).cos();
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let (u, v) = (x as f64 / side - 0.5, y as f64 / side - 0.5);
                let along = u * ct + v * st;
                let ramp = 0.3 * along;
                let stripes = 0.2 * (2.0 * PI * freq * along + phase).sin();
                let noise = 0.08 * rng.standard_normal();
                out[c * plane + y * CIFAR_SIDE + x] =
                    (0.5 + tint + contrast * (ramp + stripes) + noise) as f32;
            }
        }
    }
}

fn synth_raw(seed: u64, n: usize, classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    if classes == 0 || n < classes {
        return Err(Error::config(
            "data.synth_n",
            format!("need at least one sample per class ({n} samples, {classes} classes)"),
        ));
    }
    let mut rng = Rng::new(seed);
    let order = rng.permutation(n);
    let labels: Vec<usize> = order.iter().map(|&i| i % classes).collect();
    let len = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
    let mut raw = vec![0.0f32; n * len];
    for (img, &label) in raw.chunks_exact_mut(len).zip(&labels) {
        synth_image(label, classes, &mut rng, img);
    }
    Ok((raw, labels))
}

/// `n` label-balanced procedural `3×32×32` images over `classes` classes,
/// deterministic in `seed` and normalised with their own statistics.
pub fn synth_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    let (raw, labels) = synth_raw(seed, n, classes)?;
    let stats = ChannelStats::of(&raw, CIFAR_CHANNELS, CIFAR_SIDE * CIFAR_SIDE);
    Dataset::from_raw(cifar_shape(n), raw, labels, classes, Split::Train, stats)
}

/// A held-out split drawn from the same generator under a different seed,
/// normalised with `train`'s statistics.
pub fn synth_split(seed: u64, n: usize, train: &Dataset) -> Result<Dataset> {
    let (raw, labels) = synth_raw(seed, n, train.classes())?;
    Dataset::from_raw(
        cifar_shape(n),
        raw,
        labels,
        train.classes(),
        Split::Test,
        train.stats.clone(),
    )
}

/// Training-time augmentation. Evaluation never augments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub hflip: bool,
    /// Reflect-pad by 4 and crop back to the original size at a random offset.
    pub pad_crop: bool,
}

pub const CROP_PAD: usize = 4;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

impl Augment {
    pub fn is_identity(self) -> bool {
        !self.hflip && !self.pad_crop
    }

    /// Augments each sample of an `N×C×H×W` batch in place, drawing from `rng`
    /// in sample order.
    pub fn apply(self, batch: &mut Tensor<f32>, rng: &mut Rng) {
        if self.is_identity() {
            return;
        }
        let s = batch.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut scratch = vec![0.0f32; c * h * w];
        for img in batch.data_mut().chunks_exact_mut(c * h * w) {
            let (dy, dx) = if self.pad_crop {
                let span = 2 * CROP_PAD + 1;
                (
                    rng.below(span) as isize - CROP_PAD as isize,
                    rng.below(span) as isize - CROP_PAD as isize,
                )
            } else {
                (0, 0)
            };
            let flip = self.hflip && rng.below(2) == 1;
            scratch.copy_from_slice(img);
            for ch in 0..c {
                for y in 0..h {
                    let sy = reflect(y as isize + dy, h);
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = reflect(xx as isize + dx, w);
                        img[(ch * h + y) * w + x] = scratch[(ch * h + sy) * w + sx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, pixel: u8) -> Vec<u8> {
        let mut r = vec![pixel; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn parses_records_and_labels() {
        let mut bytes = Vec::new();
        for i in 0..5 {
            bytes.extend(record(i as u8, 10 * i as u8));
        }
        let (raw, labels) = parse_cifar10(&bytes, Path::new("x")).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(raw.len(), 5 * 3072);
        assert_eq!(raw[3072], 10.0 / 255.0);
    }

    #[test]
    fn truncated_and_bad_label_report_offsets() {
        let mut bytes = record(1, 0);
        bytes.extend(&record(2, 0)[..100]);
        match parse_cifar10(&bytes, Path::new("f")) {
            Err(Error::TruncatedRecord { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        let mut bytes = record(1, 0);
        bytes.extend(record(12, 0));
        match parse_cifar10(&bytes, Path::new("f")) {
            Err(Error::LabelOutOfRange { offset, label, .. }) => {
                assert_eq!((offset, label), (3073, 12))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_record_standardises_to_constant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut bytes = record(7, 0);
        bytes.extend(record(3, 255));
        std::fs::write(&path, bytes).unwrap();
        let ds = load_cifar10_binary(&[path]).unwrap();
        assert_eq!(ds.labels(), &[7, 3]);
        let img = ds.image(0);
        assert!(img.iter().all(|&v| v == img[0]));
        let expect = (0.0 - ds.stats.mean[0]) / ds.stats.std[0];
        assert!((img[0] as f64 - expect).abs() < 1e-6);
        assert!((ds.stats.mean[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(3, 100, 10).unwrap();
        let b = synth_dataset(3, 100, 10).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        let mut hist = [0; 10];
        for &l in a.labels() {
            hist[l] += 1;
        }
        assert_eq!(hist, [10; 10]);
        assert!(synth_dataset(0, 5, 10).is_err());
    }

    #[test]
    fn augmentation_is_a_permutation_of_pixels_without_padding_effects() {
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = rng.normal(&[2, 3, 8, 8], 0.0, 1.0);
        let mut y = x.clone();
        Augment {
            hflip: true,
            pad_crop: false,
        }
        .apply(&mut y, &mut rng);
        let mut a: Vec<f32> = x.data().to_vec();
        let mut b: Vec<f32> = y.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        let mut z = x.clone();
        Augment::default().apply(&mut z, &mut rng);
        assert_eq!(z.data(), x.data());
    }
}
