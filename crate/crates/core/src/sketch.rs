//! Random sketching matrices `S ∈ R^{d×s}`.
//!
//! A sketch is stored implicitly: CountSketch variants keep one
//! `(bucket, sign)` pair per input row, uniform sampling keeps one source
//! index per output column. Products with `S` and `Sᵀ` cost `O(n·d)`.
//!
//! RNG draw order in [`generate`] is fixed so that independent
//! implementations seeded identically produce identical sketches.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SketchKind {
    /// Independent per-row hashing into `s` buckets with a random sign.
    CountSketch,
    /// `s` columns drawn with replacement from `{√(d/s)·eᵢ}`.
    UniformSampling,
    /// Random permutation split into `s = ⌊d/q⌋` buckets of exactly `q`
    /// rows; the `d − s·q` leftover rows are dropped.
    PermutedCountSketch { q: usize },
}

impl SketchKind {
    pub fn name(&self) -> &'static str {
        match self {
            SketchKind::CountSketch => "countsketch",
            SketchKind::UniformSampling => "uniform_sampling",
            SketchKind::PermutedCountSketch { .. } => "permuted_countsketch",
        }
    }

    pub fn is_hashed(&self) -> bool {
        !matches!(self, SketchKind::UniformSampling)
    }
}

/// Everything needed to regenerate a sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SketchSpec {
    pub d: usize,
    pub s: usize,
    pub kind: SketchKind,
    pub seed: u64,
}

impl SketchSpec {
    pub fn countsketch(d: usize, s: usize, seed: u64) -> Self {
        Self {
            d,
            s,
            kind: SketchKind::CountSketch,
            seed,
        }
    }

    pub fn uniform(d: usize, s: usize, seed: u64) -> Self {
        Self {
            d,
            s,
            kind: SketchKind::UniformSampling,
            seed,
        }
    }

    pub fn permuted(d: usize, q: usize, seed: u64) -> Self {
        Self {
            d,
            s: d.checked_div(q).unwrap_or(0),
            kind: SketchKind::PermutedCountSketch { q },
            seed,
        }
    }

    /// Sketch size for compression factor `q` under `kind`.
    pub fn with_compression(d: usize, q: usize, kind: SketchKind, seed: u64) -> Self {
        match kind {
            SketchKind::PermutedCountSketch { .. } => Self::permuted(d, q, seed),
            _ => Self {
                d,
                s: d.checked_div(q).unwrap_or(0),
                kind,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    /// Per input row: bucket and sign. Dropped rows carry sign 0.
    Hashed { bucket: Vec<u32>, sign: Vec<f64> },
    /// Per output column: source row, common scale.
    Sampled { source: Vec<u32>, scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchMatrix {
    d: usize,
    s: usize,
    kind: SketchKind,
    repr: Repr,
    dropped: Vec<usize>,
}

impl SketchMatrix {
    /// Builds a CountSketch from explicit per-row buckets and ±1 signs.
    pub fn from_hashes(s: usize, bucket: Vec<usize>, sign: Vec<f64>) -> Result<Self> {
        if bucket.len() != sign.len() {
            return Err(Error::InvalidSpec(format!(
                "{} buckets but {} signs",
                bucket.len(),
                sign.len()
            )));
        }
        if let Some(b) = bucket.iter().find(|&&b| b >= s) {
            return Err(Error::InvalidSpec(format!("bucket {b} outside [0, {s})")));
        }
        if sign.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidSpec("signs must be ±1".into()));
        }
        Ok(Self {
            d: bucket.len(),
            s,
            kind: SketchKind::CountSketch,
            repr: Repr::Hashed {
                bucket: bucket.into_iter().map(|b| b as u32).collect(),
                sign,
            },
            dropped: Vec::new(),
        })
    }

    /// The `d × d` identity written as a CountSketch (one row per bucket,
    /// all signs +1). Only meaningful as a no-compression reference.
    pub fn identity(d: usize) -> Self {
        Self::from_hashes(d, (0..d).collect(), vec![1.0; d]).expect("valid identity sketch")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn kind(&self) -> SketchKind {
        self.kind
    }

    /// Rows mapped to no bucket (permuted variant only).
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// `(bucket, sign)` of row `i`; `None` for sampling sketches and dropped rows.
    pub fn hash(&self, i: usize) -> Option<(usize, f64)> {
        match &self.repr {
            Repr::Hashed { bucket, sign } if sign[i] != 0.0 => Some((bucket[i] as usize, sign[i])),
            _ => None,
        }
    }

    /// Source row of column `j` for sampling sketches.
    pub fn source(&self, j: usize) -> Option<usize> {
        match &self.repr {
            Repr::Sampled { source, .. } => Some(source[j] as usize),
            Repr::Hashed { .. } => None,
        }
    }

    /// Number of rows hashed into each bucket (`SᵀS = diag(sizes)`).
    pub fn bucket_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.s];
        if let Repr::Hashed { bucket, sign } = &self.repr {
            for (b, sg) in bucket.iter().zip(sign) {
                if *sg != 0.0 {
                    sizes[*b as usize] += 1;
                }
            }
        }
        sizes
    }

    /// `a · S`, an `n × s` matrix.
    pub fn apply(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.d {
            return Err(dim_err(
                "sketch apply",
                format!("input has {} columns, sketch expects {}", a.cols(), self.d),
            ));
        }
        let mut out = Matrix::zeros(a.rows(), self.s);
        for r in 0..a.rows() {
            let src = a.row(r);
            let dst = out.row_mut(r);
            match &self.repr {
                Repr::Hashed { bucket, sign } => {
                    for ((v, b), sg) in src.iter().zip(bucket).zip(sign) {
                        dst[*b as usize] += sg * v;
                    }
                }
                Repr::Sampled { source, scale } => {
                    for (o, &i) in dst.iter_mut().zip(source) {
                        *o = scale * src[i as usize];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `c · Sᵀ`, an `n × d` matrix.
    pub fn apply_transpose(&self, c: &Matrix) -> Result<Matrix> {
        self.back_project(c, "sketch apply_transpose", None)
    }

    /// `c · S†` where `S†` is the Moore–Penrose pseudo-inverse.
    ///
    /// CountSketch columns are mutually orthogonal, so `S† = diag(1/nⱼ)·Sᵀ`
    /// with `nⱼ` the bucket sizes; empty buckets contribute nothing.
    pub fn apply_pinv(&self, c: &Matrix) -> Result<Matrix> {
        if !self.kind.is_hashed() {
            return Err(Error::UnsupportedKind {
                op: "apply_pinv",
                kind: self.kind.name(),
            });
        }
        let inv: Vec<f64> = self
            .bucket_sizes()
            .into_iter()
            .map(|n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
            .collect();
        self.back_project(c, "sketch apply_pinv", Some(&inv))
    }

    fn back_project(
        &self,
        c: &Matrix,
        op: &'static str,
        bucket_scale: Option<&[f64]>,
    ) -> Result<Matrix> {
        if c.cols() != self.s {
            return Err(dim_err(
                op,
                format!("input has {} columns, sketch size is {}", c.cols(), self.s),
            ));
        }
        let mut out = Matrix::zeros(c.rows(), self.d);
        for r in 0..c.rows() {
            let src = c.row(r);
            let dst = out.row_mut(r);
            match &self.repr {
                Repr::Hashed { bucket, sign } => {
                    for ((o, b), sg) in dst.iter_mut().zip(bucket).zip(sign) {
                        let b = *b as usize;
                        let scale = bucket_scale.map_or(1.0, |w| w[b]);
                        *o = sg * scale * src[b];
                    }
                }
                Repr::Sampled { source, scale } => {
                    for (v, &i) in src.iter().zip(source) {
                        dst[i as usize] += scale * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense `d × s` form. Intended for tests and small diagnostics.
    pub fn materialize(&self) -> Matrix {
        let mut m = Matrix::zeros(self.d, self.s);
        match &self.repr {
            Repr::Hashed { bucket, sign } => {
                for (i, (b, sg)) in bucket.iter().zip(sign).enumerate() {
                    if *sg != 0.0 {
                        m.set(i, *b as usize, *sg);
                    }
                }
            }
            Repr::Sampled { source, scale } => {
                for (j, &i) in source.iter().enumerate() {
                    m.set(i as usize, j, *scale);
                }
            }
        }
        m
    }
}

/// Draws the sketch described by `spec`.
pub fn generate(spec: &SketchSpec) -> Result<SketchMatrix> {
    let SketchSpec { d, s, kind, seed } = *spec;
    let mut rng = SplitMix64::new(seed);
    match kind {
        SketchKind::CountSketch | SketchKind::UniformSampling => {
            if s == 0 || s >= d {
                return Err(Error::InvalidSpec(format!(
                    "sketch size {s} must satisfy 0 < s < d = {d}"
                )));
            }
        }
        SketchKind::PermutedCountSketch { q } => {
            if q < 2 || d < q {
                return Err(Error::InvalidSpec(format!(
                    "permuted sketch needs q >= 2 and d >= q (d = {d}, q = {q})"
                )));
            }
            if s != d / q {
                return Err(Error::InvalidSpec(format!(
                    "permuted sketch size {s} != floor({d} / {q})"
                )));
            }
        }
    }

    let (repr, dropped) = match kind {
        SketchKind::CountSketch => {
            let mut bucket = Vec::with_capacity(d);
            let mut sign = Vec::with_capacity(d);
            for _ in 0..d {
                bucket.push(rng.below(s) as u32);
                sign.push(if rng.next_word() & 1 == 1 { 1.0 } else { -1.0 });
            }
            (Repr::Hashed { bucket, sign }, Vec::new())
        }
        SketchKind::UniformSampling => {
            let source = (0..s).map(|_| rng.below(d) as u32).collect();
            let scale = (d as f64 / s as f64).sqrt();
            (Repr::Sampled { source, scale }, Vec::new())
        }
        SketchKind::PermutedCountSketch { q } => {
            let mut perm: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = rng.below(i + 1);
                perm.swap(i, j);
            }
            // perm[..s*q] read row-major as q×s: column h lists bucket h's rows.
            let mut bucket = vec![0u32; d];
            let mut assigned = vec![false; d];
            for (pos, &row) in perm[..s * q].iter().enumerate() {
                bucket[row] = (pos % s) as u32;
                assigned[row] = true;
            }
            let mut sign = Vec::with_capacity(d);
            for &a in &assigned {
                let draw = if rng.next_word() & 1 == 1 { 1.0 } else { -1.0 };
                sign.push(if a { draw } else { 0.0 });
            }
            let mut dropped: Vec<usize> = perm[s * q..].to_vec();
            dropped.sort_unstable();
            (Repr::Hashed { bucket, sign }, dropped)
        }
    };
    Ok(SketchMatrix {
        d,
        s,
        kind,
        repr,
        dropped,
    })
}

/// Exact `E‖A S Sᵀ Bᵀ − A Bᵀ‖²_F` over CountSketch randomness.
///
/// Per pair of rows `(a, b)` the expectation is
/// `(1/s)·(Σ_{k≠l} a_k² b_l² + Σ_{k≠l} a_k b_k a_l b_l)`, evaluated here as
/// `(1/s)·(‖a‖²‖b‖² + (a·b)² − 2 Σ_k a_k² b_k²)`.
pub fn product_error_expectation(a: &Matrix, b: &Matrix, s: usize) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(dim_err(
            "product_error_expectation",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if s == 0 {
        return Err(Error::InvalidSpec("sketch size must be positive".into()));
    }
    let a_sq: Vec<f64> = (0..a.rows())
        .map(|i| a.row(i).iter().map(|v| v * v).sum())
        .collect();
    let b_sq: Vec<f64> = (0..b.rows())
        .map(|j| b.row(j).iter().map(|v| v * v).sum())
        .collect();
    let mut total = 0.0;
    for (i, a_norm) in a_sq.iter().enumerate() {
        let ar = a.row(i);
        for (j, b_norm) in b_sq.iter().enumerate() {
            let br = b.row(j);
            let mut dot = 0.0;
            let mut diag = 0.0;
            for (x, y) in ar.iter().zip(br) {
                dot += x * y;
                diag += x * x * y * y;
            }
            total += a_norm * b_norm + dot * dot - 2.0 * diag;
        }
    }
    Ok(total / s as f64)
}

/// Every `d × s` CountSketch: all `sᵈ` bucket maps times all `2ᵈ` sign
/// patterns, each equally likely under independent hashing.
pub fn all_countsketches(d: usize, s: usize) -> impl Iterator<Item = SketchMatrix> {
    let buckets = (s as u64).pow(d as u32);
    let signs = 1u64 << d;
    (0..buckets).flat_map(move |bcode| {
        (0..signs).map(move |scode| {
            let mut code = bcode;
            let bucket: Vec<usize> = (0..d)
                .map(|_| {
                    let b = (code % s as u64) as usize;
                    code /= s as u64;
                    b
                })
                .collect();
            let sign: Vec<f64> = (0..d)
                .map(|i| if (scode >> i) & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            SketchMatrix::from_hashes(s, bucket, sign).expect("enumerated sketch is valid")
        })
    })
}
