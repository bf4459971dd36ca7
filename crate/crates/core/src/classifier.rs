//! Multi-class classification with a labeled MPS.
//!
//! Class probabilities are the squared outputs, normalized:
//! `p_c = v_c² / Σ_k v_k²`. Also reads IDX image files (MNIST), optionally
//! gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rayon::prelude::*;

use crate::dmrg::{self, LossKind, TrainingData, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::feature_map::{FeatureBatch, FeatureMap, FeaturizedSample};
use crate::mps::{LabelSite, Mps};

pub const MNIST_CLASSES: usize = 10;

/// Grayscale images in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    /// `count × height × width`, raster order.
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageDataset {
    pub fn new(
        pixels: Vec<f64>,
        height: usize,
        width: usize,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if labels.is_empty()
            || height == 0
            || width == 0
            || pixels.len() != labels.len() * height * width
        {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for {} images of {height}×{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} ≥ {classes} classes"
            )));
        }
        Ok(Self {
            pixels,
            height,
            width,
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

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `count` images (all of them if fewer).
    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            pixels: self.pixels[..count * self.pixels_per_image()].to_vec(),
            labels: self.labels[..count].to_vec(),
            ..*self
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(
            self.pixels.clone(),
            self.height,
            self.width,
            labels,
            self.classes,
        )
    }

    /// One site per pixel, raster order.
    pub fn featurize(&self, map: &FeatureMap) -> Result<FeatureBatch> {
        map.featurize_batch(&self.pixels, self.pixels_per_image())
    }

    pub fn training_data(&self, map: &FeatureMap) -> Result<TrainingData> {
        TrainingData::classification(self.featurize(map)?, self.labels.clone(), self.classes)
    }
}

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

/// File contents, transparently gunzipped when the gzip magic is present.
/// Offsets in later errors refer to the decompressed bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len() as u64, "truncated header"))
}

/// Reads an IDX image file and its IDX label file.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<ImageDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_maybe_gz(ip)?;
    let lab = read_maybe_gz(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != 0x0000_0803 {
        return Err(format_err(ip, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let need = 16 + count * rows * cols;
    if img.len() < need {
        return Err(format_err(
            ip,
            img.len() as u64,
            format!("truncated: expected {need} bytes"),
        ));
    }

    let magic = be_u32(&lab, 0, lp)?;
    if magic != 0x0000_0801 {
        return Err(format_err(lp, 0, format!("bad label magic {magic:#010x}")));
    }
    let label_count = be_u32(&lab, 4, lp)? as usize;
    if label_count != count {
        return Err(format_err(
            lp,
            4,
            format!("{label_count} labels for {count} images"),
        ));
    }
    if lab.len() < 8 + count {
        return Err(format_err(
            lp,
            lab.len() as u64,
            format!("truncated: expected {} bytes", 8 + count),
        ));
    }
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&y| y >= MNIST_CLASSES) {
        return Err(format_err(
            lp,
            (8 + pos) as u64,
            format!("label {} out of range", labels[pos]),
        ));
    }
    let pixels = img[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    ImageDataset::new(pixels, rows, cols, labels, MNIST_CLASSES)
}

/// Writes an IDX image/label pair; used for fixtures and subsets.
pub fn write_idx(
    d: &ImageDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + d.pixels.len());
    for v in [0x803u32, d.len() as u32, d.height as u32, d.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(d.pixels.iter().map(|p| (p * 255.0).round() as u8));
    fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + d.len());
    for v in [0x801u32, d.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(d.labels.iter().map(|&y| y as u8));
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Locates the standard MNIST file names (plain or `.gz`) in a directory.
pub fn mnist_paths(dir: impl AsRef<Path>, train: bool) -> Result<(PathBuf, PathBuf)> {
    let prefix = if train { "train" } else { "t10k" };
    let find = |stem: String| -> Result<PathBuf> {
        for name in [stem.clone(), format!("{stem}.gz")] {
            let p = dir.as_ref().join(&name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{stem}[.gz] not found in {}", dir.as_ref().display()),
        )))
    };
    Ok((
        find(format!("{prefix}-images-idx3-ubyte"))?,
        find(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Average-pools each image over `factor × factor` blocks.
pub fn preprocess(d: &ImageDataset, factor: usize) -> Result<ImageDataset> {
    if factor == 0 || !d.height.is_multiple_of(factor) || !d.width.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "pooling factor {factor} does not divide {}×{}",
            d.height, d.width
        )));
    }
    let (h, w) = (d.height / factor, d.width / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut pixels = vec![0.0; d.len() * h * w];
    pixels
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(i, out)| {
            let src = d.image(i);
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for dr in 0..factor {
                        let row = (r * factor + dr) * d.width + c * factor;
                        acc += src[row..row + factor].iter().sum::<f64>();
                    }
                    out[r * w + c] = (acc * norm).clamp(0.0, 1.0);
                }
            }
        });
    ImageDataset::new(pixels, h, w, d.labels.clone(), d.classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub p: Vec<f64>,
}

impl ClassProbabilities {
    pub fn from_outputs(v: &[f64]) -> Result<Self> {
        let s: f64 = v.iter().map(|x| x * x).sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::DegenerateOutput(format!(
                "output vector has squared norm {s}"
            )));
        }
        Ok(Self {
            p: v.iter().map(|x| x * x / s).collect(),
        })
    }

    /// Most probable class; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

pub fn predict_proba(w: &Mps, s: &FeaturizedSample) -> Result<ClassProbabilities> {
    ClassProbabilities::from_outputs(&w.evaluate_labeled(s)?)
}

/// Mean cross-entropy and the number of samples whose true-class probability
/// was raised to the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: usize,
}

pub fn cross_entropy(w: &Mps, d: &ImageDataset, map: &FeatureMap) -> Result<CrossEntropy> {
    let data = d.training_data(map)?;
    let outs = dmrg::model_outputs(w, &data.batch)?;
    let c = w.classes();
    let clamped = outs
        .chunks(c)
        .zip(&d.labels)
        .filter(|(v, &y)| {
            let s: f64 = v.iter().map(|x| x * x).sum();
            !(s > 0.0) || v[y] * v[y] / s < PROB_FLOOR
        })
        .count();
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities clamped to {PROB_FLOOR:e}");
    }
    Ok(CrossEntropy {
        value: dmrg::data_loss(w, &data, LossKind::CrossEntropy)?,
        clamped,
    })
}

/// Predicted class per image (argmax of the squared outputs).
pub fn predict(w: &Mps, batch: &FeatureBatch) -> Result<Vec<usize>> {
    let outs = dmrg::model_outputs(w, batch)?;
    Ok(outs
        .chunks(w.classes())
        .map(|v| argmax(&v.iter().map(|x| x * x).collect::<Vec<_>>()))
        .collect())
}

pub fn accuracy_on(w: &Mps, batch: &FeatureBatch, labels: &[usize]) -> Result<f64> {
    let pred = predict(w, batch)?;
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

pub fn accuracy(w: &Mps, d: &ImageDataset, map: &FeatureMap) -> Result<f64> {
    accuracy_on(w, &d.featurize(map)?, &d.labels)
}

/// CSV `index,true,predicted,p0..p{C−1}`.
pub fn write_predictions(
    w: &Mps,
    d: &ImageDataset,
    map: &FeatureMap,
    out: impl Write,
) -> Result<()> {
    let batch = d.featurize(map)?;
    let outs = dmrg::model_outputs(w, &batch)?;
    let c = w.classes();
    let mut wr = csv::Writer::from_writer(out);
    let mut header = vec!["index".to_string(), "true".into(), "predicted".into()];
    header.extend((0..c).map(|k| format!("p{k}")));
    wr.write_record(&header)?;
    for (i, v) in outs.chunks(c).enumerate() {
        let mut rec = vec![i.to_string(), d.labels[i].to_string()];
        match ClassProbabilities::from_outputs(v) {
            Ok(p) => {
                rec.push(p.argmax().to_string());
                rec.extend(p.p.iter().map(|x| format!("{x:.6e}")));
            }
            Err(_) => {
                rec.push(String::new());
                rec.extend((0..c).map(|_| String::new()));
            }
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Random labeled MPS for `sites` pixels with the label index at the
/// middle site.
pub fn init_classifier(sites: usize, classes: usize, chi: usize, seed: u64) -> Result<Mps> {
    let map = FeatureMap::trigonometric();
    Mps::random_init_labeled(
        sites,
        map.dim(),
        chi,
        dmrg::default_init_scale(map.dim(), chi),
        seed,
        Some(LabelSite {
            site: sites / 2,
            classes,
        }),
    )
}
