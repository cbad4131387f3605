//! Datasets: seeded Gaussian clusters and the IDX image/label format.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::IdxError;
use crate::numnet::Matrix;
use crate::{seed, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if inputs.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "dataset contains non-finite features".into(),
            ));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.inputs.cols()
    }

    /// Widen (never narrow) the class count, e.g. to match a network head.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// One row per sample, features then label.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.num_features()).map(|k| format!("x{k}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (s, y) in self.labels.iter().enumerate() {
            let mut record: Vec<String> = self.inputs.row(s).iter().map(f64::to_string).collect();
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    pub num_classes: usize,
    pub features: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
}

/// Gaussian blobs around seeded standard-normal class centers.
///
/// Samples are generated class-interleaved (sample `s` of class `k` has
/// global index `s * num_classes + k`) and every fifth sample goes to the
/// test split.
pub fn synth_clusters(p: &ClusterParams, seed: u64) -> Result<(Dataset, Dataset)> {
    if p.num_classes == 0 || p.features == 0 || p.samples_per_class == 0 {
        return Err(Error::InvalidConfig("cluster counts must be >= 1".into()));
    }
    if !(p.cluster_spread > 0.0 && p.cluster_spread.is_finite()) {
        return Err(Error::InvalidConfig("cluster_spread must be > 0".into()));
    }
    let mut center_rng = seed::rng(seed::derive_tag(seed, "centers"));
    let centers = Matrix::from_fn(p.num_classes, p.features, |_, _| {
        StandardNormal.sample(&mut center_rng)
    });

    let mut rng = seed::rng(seed::derive_tag(seed, "samples"));
    let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
    let (mut test_x, mut test_y) = (Vec::new(), Vec::new());
    for s in 0..p.samples_per_class {
        for k in 0..p.num_classes {
            let (xs, ys) = if (s * p.num_classes + k) % 5 == 4 {
                (&mut test_x, &mut test_y)
            } else {
                (&mut train_x, &mut train_y)
            };
            for &c in centers.row(k) {
                let z: f64 = StandardNormal.sample(&mut rng);
                xs.push(c + p.cluster_spread * z);
            }
            ys.push(k);
        }
    }
    let train = Dataset::new(
        Matrix::from_vec(train_y.len(), p.features, train_x)?,
        train_y,
        p.num_classes,
        Split::Train,
    )?;
    let test = Dataset::new(
        Matrix::from_vec(test_y.len(), p.features, test_x)?,
        test_y,
        p.num_classes,
        Split::Test,
    )?;
    Ok((train, test))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], IdxError> {
    let needed = offset.checked_add(len).ok_or(IdxError::Truncated {
        needed: usize::MAX,
        found: bytes.len(),
    })?;
    bytes.get(offset..needed).ok_or(IdxError::Truncated {
        needed,
        found: bytes.len(),
    })
}

/// Parse an IDX3 unsigned-byte image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(IdxError::Truncated {
            needed: usize::MAX,
            found: bytes.len(),
        })?;
    Ok((n, rows, cols, payload(bytes, 16, len)?))
}

/// Parse an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    payload(bytes, 8, n)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an IDX image/label pair. Images are flattened row-major; with
/// `normalize` each byte is divided by 255. The class count is
/// `max label + 1`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    normalize: bool,
    split: Split,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let features: Vec<f64> = pixels
        .iter()
        .map(|&b| {
            if normalize {
                f64::from(b) / 255.0
            } else {
                f64::from(b)
            }
        })
        .collect();
    let labels: Vec<usize> = labels.iter().map(|&y| usize::from(y)).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(
        Matrix::from_vec(n, rows * cols, features)?,
        labels,
        num_classes,
        split,
    )
}
