//! Datasets: a built-in synthetic task plus a CSV loader for external data.
//!
//! The synthetic task is designed so that *where* a pattern sits matters, not
//! just *which* patterns appear. Every class contains the same four 4x4
//! motifs; classes differ only in how the motifs are arranged over the four
//! quadrants of an 8x8 image. A classifier that pools patch content without
//! tracking position (or that drops patches) therefore loses accuracy, which
//! is exactly the regime where routing quality and buffer capacity matter.

use std::io::BufRead;
use std::path::Path;

use crate::numkit::{RngStream, Tensor};
use crate::{Error, Result};

/// A labelled image set; images are stored one flat row each.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    image_size: usize,
    channels: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        image_size: usize,
        channels: usize,
        num_classes: usize,
    ) -> Result<Dataset> {
        if images.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.cols() != image_size * image_size * channels {
            return Err(Error::Dataset(format!(
                "rows of {} pixels do not match a {image_size}x{image_size}x{channels} image",
                images.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { images, labels, image_size, channels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Images at `indices` stacked into a `[n, pixels]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.images.row(i).to_vec()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_rows(&rows), labels)
    }

    /// Splits off the first `n` examples (in stored order) as one dataset and
    /// the rest as another.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        assert!(n <= self.len(), "split point past end");
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// New dataset holding the given examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            image_size: self.image_size,
            channels: self.channels,
            num_classes: self.num_classes,
        }
    }
}

/// Parameters of the built-in synthetic task.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    /// Examples per class; total size is `8 * per_class`.
    pub per_class: usize,
    /// Standard deviation of the pixel noise added to every image.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { per_class: 64, noise_std: 0.25, seed: 0 }
    }
}

pub const SYNTHETIC_IMAGE_SIZE: usize = 8;
pub const SYNTHETIC_CLASSES: usize = 8;
const MOTIF: usize = 4;

/// Four 4x4 motifs with entries in {-1, +1}: horizontal stripes, vertical
/// stripes, checkerboard, and a diagonal band.
fn motif_pixel(motif: usize, r: usize, c: usize) -> f64 {
    let bit = match motif {
        0 => r % 2,
        1 => c % 2,
        2 => (r + c) % 2,
        3 => usize::from(r.abs_diff(c) <= 1),
        _ => unreachable!("only four motifs"),
    };
    if bit == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Quadrant arrangement per class. Rows are two Latin squares (cyclic shifts
/// up and down): every motif appears in every quadrant exactly twice across
/// the eight classes, so class identity lives in the arrangement alone — the
/// multiset of patch contents is identical for all classes.
const CLASS_PERMS: [[usize; 4]; 8] = [
    [0, 1, 2, 3],
    [1, 2, 3, 0],
    [2, 3, 0, 1],
    [3, 0, 1, 2],
    [0, 3, 2, 1],
    [1, 0, 3, 2],
    [2, 1, 0, 3],
    [3, 2, 1, 0],
];

/// Noise-free prototype image of one class, as a flat row.
fn class_prototype(class: usize) -> Vec<f64> {
    let size = SYNTHETIC_IMAGE_SIZE;
    let mut px = vec![0.0; size * size];
    let perm = CLASS_PERMS[class];
    for (quadrant, &motif) in perm.iter().enumerate() {
        let r0 = (quadrant / 2) * MOTIF;
        let c0 = (quadrant % 2) * MOTIF;
        for r in 0..MOTIF {
            for c in 0..MOTIF {
                px[(r0 + r) * size + (c0 + c)] = motif_pixel(motif, r, c);
            }
        }
    }
    px
}

/// Generates the synthetic dataset: `8 * per_class` images in interleaved
/// class order (0, 1, ..., 7, 0, 1, ...), each a class prototype plus i.i.d.
/// Gaussian pixel noise.
pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    assert!(spec.per_class > 0, "per_class must be positive");
    assert!(spec.noise_std >= 0.0, "noise_std must be non-negative");
    let mut rng = RngStream::new(spec.seed, crate::numkit::stream::DATA);
    let prototypes: Vec<Vec<f64>> = (0..SYNTHETIC_CLASSES).map(class_prototype).collect();
    let n = SYNTHETIC_CLASSES * spec.per_class;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTHETIC_CLASSES;
        let mut row = prototypes[class].clone();
        for v in row.iter_mut() {
            *v += spec.noise_std * rng.standard_normal();
        }
        rows.push(row);
        labels.push(class);
    }
    Dataset::new(
        Tensor::from_rows(&rows),
        labels,
        SYNTHETIC_IMAGE_SIZE,
        1,
        SYNTHETIC_CLASSES,
    )
    .expect("synthetic construction is well-formed")
}

/// Loads `label,p0,p1,...` CSV rows (no header) of square single-channel
/// images. Every row must have the same pixel count, which must be a perfect
/// square. Pixel values are used as-is.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',');
        let label_txt = fields.next().unwrap_or_default();
        let label: usize = label_txt.trim().parse().map_err(|_| {
            Error::Dataset(format!("line {}: bad label {label_txt:?}", lineno + 1))
        })?;
        let pixels: Vec<f64> = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Dataset(format!("line {}: bad pixel {f:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if pixels.is_empty() {
            return Err(Error::Dataset(format!("line {}: no pixels", lineno + 1)));
        }
        if let Some(first) = rows.first() {
            if pixels.len() != first.len() {
                return Err(Error::Dataset(format!(
                    "line {}: {} pixels, expected {}",
                    lineno + 1,
                    pixels.len(),
                    first.len()
                )));
            }
        }
        rows.push(pixels);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Dataset("empty dataset file".into()));
    }
    let px = rows[0].len();
    let size = (px as f64).sqrt().round() as usize;
    if size * size != px {
        return Err(Error::Dataset(format!("{px} pixels per row is not a square image")));
    }
    Dataset::new(Tensor::from_rows(&rows), labels, size, 1, num_classes)
}
