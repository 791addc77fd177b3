//! Labeled image sets: IDX files and a seeded synthetic task.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: malformed IDX at byte {offset}: {detail}")]
    Parse {
        file: String,
        offset: usize,
        detail: String,
    },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images `(count, H, W, C)` with values in `[0, 1]` and one class id each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(DataError::Consistency(format!(
                "images must be (count, H, W, C), got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Consistency(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
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

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// `(H, W, C)` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image(&self, i: usize) -> Tensor {
        let shape = self.image_shape().to_vec();
        let n: usize = shape.iter().product();
        Tensor::new(shape, self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image slice")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let shape = self.image_shape().to_vec();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Dataset {
            images: Tensor::new(full, data).expect("subset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

const IDX_UBYTE: u8 = 0x08;

fn parse_idx(bytes: &[u8], file: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let fail = |offset: usize, detail: String| DataError::Parse {
        file: file.to_string(),
        offset,
        detail,
    };
    if bytes.len() < 4 {
        return Err(fail(0, "truncated magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(0, "magic number must start with two zero bytes".into()));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(fail(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fail(3, "rank must be positive".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fail(bytes.len(), format!("truncated header: {rank} dimensions need {header} bytes")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count {
        return Err(fail(
            header + body.len().min(count),
            format!("dimensions {dims:?} need {count} data bytes, found {}", body.len()),
        ));
    }
    Ok((dims, body.to_vec()))
}

/// Reads an IDX image file (`(count, rows, cols)` or `(count, rows, cols,
/// channels)` unsigned bytes) and an IDX label file. Pixels are scaled by
/// 1/255.
pub fn load_idx(images: &Path, labels: &Path, classes: usize, split: Split) -> Result<Dataset> {
    let iname = images.display().to_string();
    let lname = labels.display().to_string();
    let (idims, ibytes) = parse_idx(&fs::read(images)?, &iname)?;
    let (ldims, lbytes) = parse_idx(&fs::read(labels)?, &lname)?;
    let shape = match idims.as_slice() {
        [n, h, w] => vec![*n, *h, *w, 1],
        [n, h, w, c] => vec![*n, *h, *w, *c],
        other => {
            return Err(DataError::Parse {
                file: iname,
                offset: 3,
                detail: format!("images need 3 or 4 dimensions, got {}", other.len()),
            })
        }
    };
    if ldims.len() != 1 {
        return Err(DataError::Parse {
            file: lname,
            offset: 3,
            detail: format!("labels need 1 dimension, got {}", ldims.len()),
        });
    }
    let data = ibytes.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(shape, data).map_err(|e| DataError::Consistency(e.to_string()))?;
    Dataset::new(images, lbytes.iter().map(|&b| b as usize).collect(), classes, split)
}

fn idx_header(kind_rank: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, kind_rank];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes `dataset` as a pair of IDX files, quantizing pixels to bytes.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = dataset.images.shape();
    let dims: Vec<usize> = if shape[3] == 1 { shape[..3].to_vec() } else { shape.to_vec() };
    let mut img = idx_header(dims.len() as u8, &dims);
    img.extend(dataset.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(images, img)?;
    let mut lab = idx_header(1, &[dataset.len()]);
    for &l in &dataset.labels {
        let b = u8::try_from(l).map_err(|_| DataError::Consistency(format!("label {l} does not fit a byte")))?;
        lab.push(b);
    }
    fs::write(labels, lab)?;
    Ok(())
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    /// 0 gives noise-free class prototypes; larger values add translation
    /// jitter, pixel noise and contrast variation.
    pub difficulty: f64,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 1000,
            classes: 10,
            difficulty: 0.6,
            size: 12,
        }
    }
}

const BLOBS_PER_CLASS: usize = 3;
const BLOB_SIGMA: f64 = 1.1;

/// Class prototypes: each class is a sum of Gaussian blobs whose centres are
/// drawn from `(seed, stream 1)`, so train and test splits share them.
fn prototypes(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let s = cfg.size;
    (0..cfg.classes)
        .map(|_| {
            let centres: Vec<(f64, f64)> = (0..BLOBS_PER_CLASS)
                .map(|_| {
                    let lo = 1.5f64.min(s as f64 / 2.0);
                    let hi = (s as f64 - 2.5).max(lo);
                    (rng.uniform_range(lo, hi), rng.uniform_range(lo, hi))
                })
                .collect();
            let mut img = vec![0.0; s * s];
            for y in 0..s {
                for x in 0..s {
                    let v: f64 = centres
                        .iter()
                        .map(|&(cy, cx)| {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
                        })
                        .sum();
                    img[y * s + x] = v.min(1.0);
                }
            }
            img
        })
        .collect()
}

/// Deterministic synthetic task of `(size, size, 1)` images. Labels cycle
/// through the classes, so every class has `samples / classes` examples when
/// the division is exact.
pub fn synth_dataset(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(DataError::Invalid(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.size < 4 {
        return Err(DataError::Invalid(format!("image size {} is below 4", cfg.size)));
    }
    if !(cfg.difficulty >= 0.0 && cfg.difficulty.is_finite()) {
        return Err(DataError::Invalid(format!("difficulty {} must be >= 0", cfg.difficulty)));
    }
    let protos = prototypes(cfg);
    let stream = match split {
        Split::Train => 2,
        Split::Test => 3,
    };
    let mut rng = Rng::with_stream(cfg.seed, stream);
    let s = cfg.size as isize;
    let max_shift = (cfg.difficulty * 1.5).round() as isize;
    let noise = 0.3 * cfg.difficulty;
    let mut data = Vec::with_capacity(cfg.samples * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let label = i % cfg.classes;
        let proto = &protos[label];
        let (dy, dx) = if max_shift > 0 {
            let span = (2 * max_shift + 1) as usize;
            (rng.below(span) as isize - max_shift, rng.below(span) as isize - max_shift)
        } else {
            (0, 0)
        };
        let gain = 1.0 - 0.4 * cfg.difficulty.min(1.0) * rng.uniform();
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y - dy, x - dx);
                let base = if (0..s).contains(&sy) && (0..s).contains(&sx) {
                    proto[(sy * s + sx) as usize]
                } else {
                    0.0
                };
                let v = if noise > 0.0 { gain * base + noise * rng.normal() } else { base };
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![cfg.samples, cfg.size, cfg.size, 1], data).expect("synthetic shape");
    Dataset::new(images, labels, cfg.classes, split)
}

/// Zero-pads by `pad` pixels, takes a random crop of the original size and
/// mirrors it horizontally with probability 1/2 when `flip` is set.
pub fn augment(image: &Tensor, pad: usize, flip: bool, rng: &mut Rng) -> Tensor {
    let &[h, w, c] = image.shape() else {
        return image.clone();
    };
    let oy = rng.below(2 * pad + 1);
    let ox = rng.below(2 * pad + 1);
    let mirror = flip && rng.below(2) == 1;
    let src = image.data();
    Tensor::from_fn(&[h, w, c], |k| {
        let ch = k % c;
        let x = (k / c) % w;
        let y = k / (c * w);
        let x = if mirror { w - 1 - x } else { x };
        let (sy, sx) = ((y + oy) as isize - pad as isize, (x + ox) as isize - pad as isize);
        if sy < 0 || sx < 0 || sy as usize >= h || sx as usize >= w {
            0.0
        } else {
            src[(sy as usize * w + sx as usize) * c + ch]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = vec![0, 0, 8, 3];
        for d in [4u32, 28, 28] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend((0..4 * 28 * 28).map(|i| (i % 256) as u8));
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&4u32.to_be_bytes());
        lab.extend_from_slice(&[3, 1, 4, 1]);
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn parses_four_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let d = load_idx(&ip, &lp, 10, Split::Train).unwrap();
        assert_eq!(d.images().shape(), &[4, 28, 28, 1]);
        assert_eq!(d.labels(), &[3, 1, 4, 1]);
        assert_eq!(d.image(0).data()[255], 1.0);
        assert_eq!(d.image(0).data()[1], 1.0 / 255.0);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 10]).unwrap();
        match load_idx(&ip, &lp, 10, Split::Train) {
            Err(DataError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        fs::write(&ip, &bytes[..6]).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 10, Split::Train), Err(DataError::Parse { .. })));
    }

    #[test]
    fn bad_magic_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let mut bytes = fs::read(&ip).unwrap();
        bytes[2] = 0x0D;
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, 10, Split::Train),
            Err(DataError::Parse { offset: 2, .. })
        ));
    }

    #[test]
    fn out_of_range_label_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let mut lab = fs::read(&lp).unwrap();
        lab[8] = 255;
        fs::write(&lp, lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 10, Split::Train), Err(DataError::Consistency(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[1, 2, 3]);
        fs::write(&lp, lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp, 10, Split::Train), Err(DataError::Consistency(_))));
    }

    #[test]
    fn idx_round_trip_of_synthetic_set() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { samples: 20, classes: 4, ..Default::default() };
        let d = synth_dataset(&cfg, Split::Test).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, 4, Split::Test).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert!(back.images().max_abs_diff(d.images()).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let cfg = SynthConfig { samples: 60, classes: 6, ..Default::default() };
        let a = synth_dataset(&cfg, Split::Train).unwrap();
        let b = synth_dataset(&cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10; 6]);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let t = synth_dataset(&cfg, Split::Test).unwrap();
        assert_ne!(a.images(), t.images());
        let other = synth_dataset(&SynthConfig { seed: 1, ..cfg }, Split::Train).unwrap();
        assert_ne!(a.images(), other.images());
    }

    #[test]
    fn synthetic_rejects_single_class() {
        let cfg = SynthConfig { classes: 1, ..Default::default() };
        assert!(matches!(synth_dataset(&cfg, Split::Train), Err(DataError::Invalid(_))));
    }

    #[test]
    fn augment_without_pad_or_flip_is_identity() {
        let img = Tensor::from_fn(&[4, 5, 2], |i| i as f64);
        let mut rng = Rng::new(0);
        assert_eq!(augment(&img, 0, false, &mut rng), img);
        let mirrored = Tensor::from_fn(&[4, 5, 2], |k| {
            let (y, x, c) = (k / 10, (k / 2) % 5, k % 2);
            img.data()[(y * 5 + 4 - x) * 2 + c]
        });
        let mut seen_mirror = false;
        for seed in 0..8 {
            let out = augment(&img, 0, true, &mut Rng::new(seed));
            assert!(out == img || out == mirrored);
            seen_mirror |= out == mirrored;
        }
        assert!(seen_mirror);
    }
}
