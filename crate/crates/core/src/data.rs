//! Datasets: seeded synthetic generators, IDX image files, stratified splits.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset must hold at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        if !inputs.is_finite() {
            return Err(Error::Data("non-finite input value".into()));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Min-max rescales every input feature into `[0, 1]` (constant features
    /// map to 0), so inputs sit inside the unsigned activation grid.
    pub fn normalize_unit(&mut self) {
        let w = self.inputs.row_len();
        let n = self.len();
        let data = self.inputs.data_mut();
        for f in 0..w {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in 0..n {
                lo = lo.min(data[r * w + f]);
                hi = hi.max(data[r * w + f]);
            }
            let span = hi - lo;
            for r in 0..n {
                let v = &mut data[r * w + f];
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Gaussians,
    Moons,
    Spirals,
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(Self::Gaussians),
            "moons" => Ok(Self::Moons),
            "spirals" => Ok(Self::Spirals),
            other => Err(Error::Data(format!(
                "unknown synthetic dataset {other:?} (expected gaussians, moons, spirals)"
            ))),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two-dimensional classification data; class sizes differ by at most one.
/// `moons` always has two classes.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let classes = if kind == SyntheticKind::Moons { 2 } else { classes };
    if classes < 2 {
        return Err(Error::Data("at least two classes required".into()));
    }
    if n < classes {
        return Err(Error::Data(format!("n = {n} is smaller than the class count {classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Data(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for c in 0..classes {
        let count = n / classes + usize::from(c < n % classes);
        for i in 0..count {
            let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            let (x, y) = match kind {
                SyntheticKind::Gaussians => {
                    let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                    (2.0 * a.cos(), 2.0 * a.sin())
                }
                SyntheticKind::Moons => {
                    let a = std::f64::consts::PI * t;
                    if c == 0 {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    }
                }
                SyntheticKind::Spirals => {
                    let r = 0.2 + 0.8 * t;
                    let a = 3.0 * std::f64::consts::PI * t + 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                    (r * a.cos(), r * a.sin())
                }
            };
            let (dx, dy) = (gauss(&mut rng), gauss(&mut rng));
            points.push((x + noise * dx, y + noise * dy, c));
        }
    }
    points.shuffle(&mut rng);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (x, y, c) in points {
        data.push(x);
        data.push(y);
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, classes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Idx(format!(
                "{} file truncated: need {} bytes at offset {}, have {}",
                self.what,
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses IDX image and label byte buffers. Pixels are scaled to `[0, 1]`
/// and shaped `(n, 1, rows, cols)`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut ri = Reader { bytes: images, pos: 0, what: "image" };
    let magic = ri.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (ri.u32()? as usize, ri.u32()? as usize, ri.u32()? as usize);
    let pixels = ri.take(n * rows * cols)?;
    if ri.pos != images.len() {
        return Err(Error::Idx(format!("{} trailing bytes in image file", images.len() - ri.pos)));
    }
    let mut rl = Reader { bytes: labels, pos: 0, what: "label" };
    let magic = rl.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let nl = rl.u32()? as usize;
    if nl != n {
        return Err(Error::Idx(format!("{n} images but {nl} labels")));
    }
    let raw_labels = rl.take(nl)?;
    if rl.pos != labels.len() {
        return Err(Error::Idx(format!("{} trailing bytes in label file", labels.len() - rl.pos)));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Idx("empty IDX dataset".into()));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let labels = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
    parse_idx(&images, &labels)
}

/// Encodes raw `u8` images (`n * rows * cols`, row-major) and labels as IDX.
pub fn encode_idx(pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Stratified seeded split; each class contributes `round(fraction * count)`
/// samples to validation. Both parts keep the original sample order.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Data(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; dataset.len()];
    for c in 0..dataset.classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = (val_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..k] {
            is_val[i] = true;
        }
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !is_val[i]).collect();
    let val: Vec<usize> = (0..dataset.len()).filter(|&i| is_val[i]).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "split left an empty part ({} train, {} val)",
            train.len(),
            val.len()
        )));
    }
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        for kind in [SyntheticKind::Gaussians, SyntheticKind::Moons, SyntheticKind::Spirals] {
            let a = gen_synthetic(kind, 101, 3, 0.1, 4).unwrap();
            let b = gen_synthetic(kind, 101, 3, 0.1, 4).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn moons_are_balanced() {
        let d = gen_synthetic(SyntheticKind::Moons, 1000, 2, 0.1, 0).unwrap();
        assert_eq!(d.class_counts(), vec![500, 500]);
        let s = gen_synthetic(SyntheticKind::Spirals, 301, 3, 0.1, 0).unwrap();
        assert_eq!(s.class_counts(), vec![101, 100, 100]);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("circles".parse::<SyntheticKind>().is_err());
        assert_eq!("moons".parse::<SyntheticKind>().unwrap(), SyntheticKind::Moons);
    }

    #[test]
    fn normalize_maps_into_unit_box() {
        let mut d = gen_synthetic(SyntheticKind::Spirals, 200, 2, 0.2, 1).unwrap();
        d.normalize_unit();
        let v = d.inputs.data();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(v.iter().any(|&x| x == 0.0) && v.iter().any(|&x| x == 1.0));
    }

    #[test]
    fn hand_crafted_idx_fixture() {
        let mut pixels = vec![0u8; 32];
        pixels[0] = 255;
        pixels[31] = 51;
        let (img, lab) = encode_idx(&pixels, &[3, 7], 4, 4);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        assert_eq!(&lab[..8], &[0, 0, 8, 1, 0, 0, 0, 2]);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.inputs.shape(), &[2, 1, 4, 4]);
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.inputs.data()[0], 1.0);
        assert_eq!(d.inputs.data()[31], 0.2);
    }

    #[test]
    fn idx_errors_are_typed() {
        let (img, lab) = encode_idx(&[1, 2, 3, 4], &[0], 2, 2);
        let mut bad = img.clone();
        bad[3] = 0x04;
        assert!(matches!(parse_idx(&bad, &lab), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(Error::Idx(_))));
        let (_, lab2) = encode_idx(&[0; 8], &[0, 1], 2, 2);
        assert!(matches!(parse_idx(&img, &lab2), Err(Error::Idx(_))));
    }

    #[test]
    fn stratified_split_counts() {
        let d = gen_synthetic(SyntheticKind::Gaussians, 100, 2, 0.5, 2).unwrap();
        let (tr, va) = split(&d, 0.2, 9).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(va.class_counts(), vec![10, 10]);
        let (tr2, va2) = split(&d, 0.2, 9).unwrap();
        assert_eq!((tr, va), (tr2, va2));
    }

    #[test]
    fn split_fraction_range() {
        let d = gen_synthetic(SyntheticKind::Gaussians, 10, 2, 0.5, 2).unwrap();
        assert!(split(&d, 0.0, 0).is_err());
        assert!(split(&d, 1.0, 0).is_err());
    }
}
