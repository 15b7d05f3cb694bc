//! Labeled instance datasets: validation, hashing, CSV I/O, synthetic blobs
//! and the seeded train/test split.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LlpError, Result};

/// Instances with their (hidden, for LLP) class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(num_classes: usize, features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.is_empty() {
            return Err(LlpError::invalid(
                "dataset must contain at least one instance",
            ));
        }
        if features.len() != labels.len() {
            return Err(LlpError::DimensionMismatch {
                what: "labels",
                expected: features.len(),
                found: labels.len(),
            });
        }
        let dim = features[0].len();
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(LlpError::DimensionMismatch {
                what: "feature vector",
                expected: dim,
                found: f.len(),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(LlpError::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            num_classes,
            features,
            labels,
        })
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-class instance counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The instances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.num_classes, features, labels)
    }

    /// SHA-256 over class count, shape, feature bits and labels, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for f in &self.features {
            for x in f {
                h.update(x.to_le_bytes());
            }
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Writes `f0,...,f{d-1},label`. Floats use the shortest round-trip form.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..ds.dim())
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (f, y) in ds.features.iter().zip(&ds.labels) {
        for x in f {
            write!(w, "{x},")?;
        }
        writeln!(w, "{y}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a dataset CSV. `num_classes` overrides the inferred `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| LlpError::MissingColumn("label".into()))?;
    let mut feature_cols = Vec::new();
    for i in 0.. {
        let name = format!("f{i}");
        match headers.iter().position(|h| h.trim() == name) {
            Some(c) => feature_cols.push(c),
            None => break,
        }
    }
    if feature_cols.is_empty() {
        return Err(LlpError::MissingColumn("f0".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| LlpError::Parse {
            path: display.clone(),
            line,
            message,
        };
        if rec.len() != headers.len() {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let mut f = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let s = rec[c].trim();
            let x: f64 = s
                .parse()
                .map_err(|_| parse_err(format!("bad feature value `{s}`")))?;
            if !x.is_finite() {
                return Err(parse_err(format!("non-finite feature value `{s}`")));
            }
            f.push(x);
        }
        let s = rec[label_col].trim();
        let y: usize = s
            .parse()
            .map_err(|_| parse_err(format!("bad label `{s}`")))?;
        features.push(f);
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(LlpError::invalid(format!("{display}: no data rows")));
    }
    let inferred = labels.iter().max().unwrap() + 1;
    let k = num_classes.unwrap_or(inferred);
    let ds = LabeledDataset::new(k, features, labels)?;
    let missing: Vec<usize> = ds
        .class_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    if !missing.is_empty() {
        log::warn!("{display}: labels are not contiguous, classes {missing:?} never occur");
    }
    Ok(ds)
}

/// Gaussian blobs around uniformly drawn class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Half-width of the hypercube the centers are drawn from.
    pub center_scale: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            per_class: 250,
            dim: 10,
            spread: 1.0,
            center_scale: 2.0,
            seed: 0,
        }
    }
}

pub fn gen_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(LlpError::invalid(
            "blob spec needs at least one class, one point per class and one dimension",
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(LlpError::invalid("spread must be finite and nonnegative"));
    }
    if !(spec.center_scale >= 0.0 && spec.center_scale.is_finite()) {
        return Err(LlpError::invalid(
            "center_scale must be finite and nonnegative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    if spec.center_scale > 0.0 {
                        rng.random_range(-spec.center_scale..=spec.center_scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.spread).map_err(|e| LlpError::invalid(e.to_string()))?;
    let mut features = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut labels = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            features.push(center.iter().map(|&m| m + noise.sample(&mut rng)).collect());
            labels.push(c);
        }
    }
    LabeledDataset::new(spec.num_classes, features, labels)
}

/// Disjoint train/test index sets covering `0..len`; train gets `floor(4 len / 5)`.
pub fn split_indices(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = len * 4 / 5;
    let test = perm.split_off(n_train);
    (perm, test)
}

/// 80/20 train/test split, a pure function of the dataset and the seed.
pub fn train_test_split(
    ds: &LabeledDataset,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(ds.len(), seed);
    if train.is_empty() || test.is_empty() {
        return Err(LlpError::invalid("dataset too small for an 80/20 split"));
    }
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_exact_counts_and_are_deterministic() {
        let spec = BlobSpec {
            num_classes: 3,
            per_class: 100,
            dim: 4,
            spread: 0.5,
            center_scale: 2.0,
            seed: 7,
        };
        let a = gen_blobs(&spec).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.class_counts(), vec![100, 100, 100]);
        let b = gen_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = gen_blobs(&BlobSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn zero_spread_is_nearest_center_separable() {
        let spec = BlobSpec {
            num_classes: 4,
            per_class: 10,
            dim: 3,
            spread: 0.0,
            center_scale: 1.0,
            seed: 3,
        };
        let ds = gen_blobs(&spec).unwrap();
        let centers: Vec<&Vec<f64>> = (0..4).map(|c| &ds.features()[c * 10]).collect();
        for (f, &y) in ds.features().iter().zip(ds.labels()) {
            assert_eq!(f, centers[y]);
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = f.iter().zip(centers[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = f.iter().zip(centers[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, y);
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let (train, test) = split_indices(750, 11);
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 150);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..750).collect::<Vec<_>>());
        assert_eq!(split_indices(750, 11), (train, test));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_blobs(&BlobSpec {
            per_class: 5,
            dim: 3,
            ..BlobSpec::default()
        })
        .unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&ds, &p).unwrap();
        assert_eq!(load_csv(&p, None).unwrap(), ds);

        let p2 = dir.path().join("two.csv");
        std::fs::write(&p2, "f0,f1,label\n0.5,1.5,0\n-2,3e-3,1\n").unwrap();
        let two = load_csv(&p2, None).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two.num_classes(), 2);
        assert_eq!(load_csv(&p2, Some(5)).unwrap().num_classes(), 5);

        let p3 = dir.path().join("nolabel.csv");
        std::fs::write(&p3, "f0,f1\n0.5,1.5\n").unwrap();
        let err = load_csv(&p3, None).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");

        let p4 = dir.path().join("bad.csv");
        std::fs::write(&p4, "f0,label\n0.5,0\nabc,1\n").unwrap();
        let err = load_csv(&p4, None).unwrap_err();
        assert!(matches!(err, LlpError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(2, vec![], vec![]).is_err());
        assert!(LabeledDataset::new(2, vec![vec![0.0]], vec![2]).is_err());
        assert!(LabeledDataset::new(2, vec![vec![0.0], vec![0.0, 1.0]], vec![0, 1]).is_err());
        assert!(LabeledDataset::new(2, vec![vec![0.0]], vec![0, 1]).is_err());
    }
}
