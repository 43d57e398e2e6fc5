//! Labelled image sets: CIFAR-10 binary batches, a synthetic generator and
//! bilinear resizing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Images of one size with integer labels in `[0, classes)`. Pixels are kept
/// in one contiguous `N, 3, H, W` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    hw: (usize, usize),
}

impl Dataset {
    pub const CHANNELS: usize = 3;

    /// `images` is `(N, 3, H, W)`; the label count must equal `N`.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.c() != Self::CHANNELS || s.n() != labels.len() {
            return Err(Error::Shape(format!(
                "images {s} with {} labels; expected 3 channels and one label per image",
                labels.len()
            )));
        }
        if let Some(index) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::Data {
                index,
                message: format!("label {} outside [0, {classes})", labels[index]),
            });
        }
        Ok(Dataset {
            pixels: images.into_vec(),
            labels,
            classes,
            hw: (s.h(), s.w()),
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

    /// `(1, 3, H, W)`.
    pub fn image_shape(&self) -> Shape {
        Shape::new(1, Self::CHANNELS, self.hw.0, self.hw.1)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let k = self.image_shape().numel();
        &self.pixels[i * k..(i + 1) * k]
    }

    /// Stacks the given samples into one `(len, 3, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let k = self.image_shape().numel();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::from_vec(self.image_shape().with_n(indices.len()), data)
            .expect("sized by indices");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            pixels: images.into_vec(),
            labels,
            classes: self.classes,
            hw: self.hw,
        }
    }

    /// Visiting order for `epoch`, a seeded permutation of `0..len`.
    pub fn order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
        idx
    }

    /// Seeded random split into `first` samples and the rest.
    pub fn split(&self, first: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if first > self.len() {
            return Err(Error::Config(format!(
                "cannot take {first} of {} samples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&idx[..first]), self.subset(&idx[first..])))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn resized(&self, h: usize, w: usize) -> Result<Dataset> {
        if (h, w) == self.hw {
            return Ok(self.clone());
        }
        let all = Tensor::from_vec(self.image_shape().with_n(self.len()), self.pixels.clone())?;
        Dataset::new(
            resize_bilinear(&all, h, w)?,
            self.labels.clone(),
            self.classes,
        )
    }
}

/// SplitMix64 finalizer over `seed` and a counter; decorrelates per-epoch
/// and per-batch seeds drawn from one user seed.
pub fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub mod cifar10 {
    use super::*;

    pub const CLASSES: usize = 10;
    pub const SIDE: usize = 32;
    /// One label byte, then 1024 red, 1024 green and 1024 blue bytes.
    pub const RECORD: usize = 1 + 3 * SIDE * SIDE;
    pub const TRAIN_FILES: [&str; 5] = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ];
    pub const TEST_FILE: &str = "test_batch.bin";

    /// Decodes whole records, numbering them from `first_index` in errors.
    pub fn parse_records(bytes: &[u8], first_index: usize) -> Result<(Vec<f32>, Vec<usize>)> {
        if !bytes.len().is_multiple_of(RECORD) {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of {RECORD}-byte records",
                bytes.len()
            )));
        }
        let n = bytes.len() / RECORD;
        let mut pixels = Vec::with_capacity(n * (RECORD - 1));
        let mut labels = Vec::with_capacity(n);
        for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::Data {
                    index: first_index + i,
                    message: format!("label byte {label} > 9"),
                });
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
        Ok((pixels, labels))
    }

    pub fn load_files(paths: &[PathBuf]) -> Result<Dataset> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for p in paths {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let (px, lb) = parse_records(&bytes, labels.len()).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })?;
            pixels.extend(px);
            labels.extend(lb);
        }
        let n = labels.len();
        Dataset::new(
            Tensor::from_vec(Shape::new(n, 3, SIDE, SIDE), pixels)?,
            labels,
            CLASSES,
        )
    }

    /// Accepts either the directory holding the `.bin` files or its parent
    /// containing the stock `cifar-10-batches-bin` folder.
    pub fn resolve_dir(dir: &Path) -> PathBuf {
        let nested = dir.join("cifar-10-batches-bin");
        if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
            nested
        } else {
            dir.to_path_buf()
        }
    }
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = cifar10::resolve_dir(dir.as_ref());
    let train: Vec<_> = cifar10::TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    Ok((
        cifar10::load_files(&train)?,
        cifar10::load_files(&[dir.join(cifar10::TEST_FILE)])?,
    ))
}

/// Class-conditional blob images. Each class owns a blob position and a
/// colour; samples jitter the blob and add pixel noise. Labels cycle
/// `i % classes`, so classes are balanced when `classes` divides `n`.
pub fn synth_dataset(n: usize, classes: usize, hw: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Config(format!(
            "need n >= classes >= 1, got n={n}, classes={classes}"
        )));
    }
    if hw == 0 || !hw.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "image side {hw} must be a positive multiple of 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = hw as f32;
    let protos: Vec<([f32; 2], [f32; 3])> = (0..classes)
        .map(|_| {
            let centre = [
                rng.random_range(0.2..0.8) * side,
                rng.random_range(0.2..0.8) * side,
            ];
            let colour = [
                rng.random::<f32>(),
                rng.random::<f32>(),
                rng.random::<f32>(),
            ];
            (centre, colour)
        })
        .collect();
    let sigma = side / 6.0;
    let jitter = Normal::new(0.0f32, side / 32.0).expect("positive std");
    let noise = Normal::new(0.0f32, 0.05).expect("positive std");
    let plane = hw * hw;
    let mut pixels = vec![0.0f32; n * 3 * plane];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &label) in labels.iter().enumerate() {
        let (centre, colour) = protos[label];
        let cy = centre[0] + jitter.sample(&mut rng);
        let cx = centre[1] + jitter.sample(&mut rng);
        let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..hw {
            for x in 0..hw {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                for (c, &col) in colour.iter().enumerate() {
                    let v = 0.25 * (1.0 - blob) + blob * col + noise.sample(&mut rng);
                    img[c * plane + y * hw + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(Shape::new(n, 3, hw, hw), pixels)?,
        labels,
        classes,
    )
}

/// Bilinear resize of every image in `x` with corners aligned: output pixel
/// `j` samples source position `j * (in - 1) / (out - 1)`.
pub fn resize_bilinear(x: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.h() == 0 || s.w() == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {s} to {out_h}x{out_w}"
        )));
    }
    if (s.h(), s.w()) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|j| {
                let pos = if out == 1 {
                    0.0
                } else {
                    j as f64 * (inp - 1) as f64 / (out - 1) as f64
                };
                let lo = (pos.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(s.h(), out_h), taps(s.w(), out_w));
    let mut out = Vec::with_capacity(s.n() * s.c() * out_h * out_w);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let p = x.plane(n, c);
            let at = |y: usize, x: usize| p[y * s.w() + x];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), out_h, out_w), out)
}
