//! Datasets: IDX ingestion, synthetic generators and client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::model::InputShape;
use crate::rng::SplitMix64;

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    input: InputShape,
    labels: Vec<usize>,
    property: Option<Vec<bool>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        input: InputShape,
        labels: Vec<usize>,
        property: Option<Vec<bool>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || property.as_ref().is_some_and(|p| p.len() != n) {
            return Err(dim_err(
                "Dataset::new",
                format!("{n} feature rows, {} labels", labels.len()),
            ));
        }
        if features.cols() != input.dim() {
            return Err(dim_err(
                "Dataset::new",
                format!("{} features per row for input {input:?}", features.cols()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            input,
            labels,
            property,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn property(&self) -> Option<&[bool]> {
        self.property.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            input: self.input,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            property: self
                .property
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Features and labels of the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

fn idx_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "IDX file",
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| idx_err("truncated header"))
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(idx_err(format!("wrong magic {magic} for images")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let len = n * h * w;
    let payload = &bytes[16..];
    if payload.len() != len {
        return Err(idx_err(format!(
            "image payload has {} bytes, header implies {len}",
            payload.len()
        )));
    }
    Ok((n, h, w, payload.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(idx_err(format!("wrong magic {magic} for labels")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(idx_err(format!(
            "label payload has {} bytes, header implies {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair as a 10-class, single-channel dataset.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(idx_err(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(
        Matrix::new(n, h * w, pixels)?,
        InputShape::image(1, h, w),
        labels,
        None,
        classes,
    )
}

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Synth {
    /// Gaussian classes with unit per-coordinate variance. For two classes
    /// the means are `±mu·u` with `u = 1/√dim` in every coordinate, so the
    /// Bayes accuracy is `Φ(mu)`. With more classes each mean is `mu` times
    /// a random unit vector.
    Blobs { mu: f64, classes: usize },
    /// Binary labels carried by the first half of the coordinates (as in
    /// two-class blobs) and an independent fair-coin property that adds
    /// `delta` to every coordinate of the second half.
    Property { mu: f64, delta: f64 },
}

impl Synth {
    pub fn blobs() -> Self {
        Synth::Blobs {
            mu: 2.0,
            classes: 2,
        }
    }

    pub fn property() -> Self {
        Synth::Property {
            mu: 2.0,
            delta: 1.5,
        }
    }
}

pub fn synth(kind: Synth, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs n >= 2 and dim >= 2 (got n = {n}, dim = {dim})"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    match kind {
        Synth::Blobs { mu, classes } => {
            if classes < 2 {
                return Err(Error::Config("blobs need at least 2 classes".into()));
            }
            let means: Vec<Vec<f64>> = if classes == 2 {
                let u = mu / (dim as f64).sqrt();
                vec![vec![-u; dim], vec![u; dim]]
            } else {
                (0..classes)
                    .map(|_| {
                        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| mu * x / norm).collect()
                    })
                    .collect()
            };
            let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            labels.shuffle(&mut rng);
            let mut features = Matrix::zeros(n, dim);
            for (i, &y) in labels.iter().enumerate() {
                for (v, m) in features.row_mut(i).iter_mut().zip(&means[y]) {
                    *v = m + rng.sample::<f64, _>(StandardNormal);
                }
            }
            Dataset::new(features, InputShape::flat(dim), labels, None, classes)
        }
        Synth::Property { mu, delta } => {
            let half = dim / 2;
            let u = mu / (half as f64).sqrt();
            let mut labels = Vec::with_capacity(n);
            let mut property = Vec::with_capacity(n);
            let mut features = Matrix::zeros(n, dim);
            for i in 0..n {
                let y = rng.random_bool(0.5);
                let p = rng.random_bool(0.5);
                let row = features.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    let shift = if j < half {
                        if y {
                            u
                        } else {
                            -u
                        }
                    } else if p {
                        delta
                    } else {
                        0.0
                    };
                    *v = shift + rng.sample::<f64, _>(StandardNormal);
                }
                labels.push(usize::from(y));
                property.push(p);
            }
            Dataset::new(features, InputShape::flat(dim), labels, Some(property), 2)
        }
    }
}

/// Shuffles `0..n` and deals the indices round-robin into `m` shards whose
/// sizes differ by at most one.
pub fn partition_indices(n: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "cannot split {n} samples among {m} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SplitMix64::new(seed));
    let mut shards = vec![Vec::with_capacity(n / m + 1); m];
    for (i, v) in idx.into_iter().enumerate() {
        shards[i % m].push(v);
    }
    Ok(shards)
}

pub fn partition(ds: &Dataset, m: usize, seed: u64) -> Result<Vec<Dataset>> {
    Ok(partition_indices(ds.len(), m, seed)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, h, w] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_LABELS, labels.len() as u32] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        std::fs::write(&lab, idx_labels(&[7, 3])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_shape(), InputShape::image(1, 2, 2));
        assert_eq!(ds.features().row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.features().get(1, 3), 4.0 / 255.0);
        assert_eq!(ds.labels(), &[7, 3]);
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 4; // magic 2052
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { .. })));
        assert!(parse_idx_images(&idx_images(2, 2, 2, &[0; 7])).is_err());
        assert!(parse_idx_labels(&idx_images(1, 1, 1, &[0])).is_err());

        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(2, 1, 1, &[0, 0])).unwrap();
        std::fs::write(&lab, idx_labels(&[1, 2, 3])).unwrap();
        assert!(load_idx(&img, &lab).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth(Synth::blobs(), 101, 8, 5).unwrap();
        let b = synth(Synth::blobs(), 101, 8, 5).unwrap();
        assert_eq!(a, b);
        let ones = a.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 50);
        let p = synth(Synth::property(), 50, 8, 5).unwrap();
        assert_eq!(p.property().unwrap().len(), 50);
        assert!(synth(Synth::blobs(), 1, 8, 0).is_err());
    }

    #[test]
    fn blob_class_means() {
        let ds = synth(
            Synth::Blobs {
                mu: 2.0,
                classes: 2,
            },
            20_000,
            4,
            1,
        )
        .unwrap();
        let mut sum = [0.0; 2];
        let mut cnt = [0usize; 2];
        for (i, &y) in ds.labels().iter().enumerate() {
            sum[y] += ds.features().row(i).iter().sum::<f64>();
            cnt[y] += 1;
        }
        // each row sums to ±mu·√dim in expectation
        assert!((sum[1] / cnt[1] as f64 - 4.0).abs() < 0.1);
        assert!((sum[0] / cnt[0] as f64 + 4.0).abs() < 0.1);
    }

    #[test]
    fn partition_properties() {
        let shards = partition_indices(100, 10, 3).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(shards, partition_indices(100, 10, 3).unwrap());
        let uneven = partition_indices(23, 5, 0).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(partition_indices(3, 4, 0).is_err());
    }
}
