//! Bags of instances labeled only by their class proportions.
//!
//! Bags are drawn once, without replacement, from a ChaCha8 permutation
//! seeded with a `u64`, and never resampled. Leftover instances that do not
//! fill a complete bag are dropped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{LlpError, Result};
use crate::numerics::SimplexVec;

/// Empirical class frequencies of `labels`.
pub fn compute_proportions(labels: &[usize], num_classes: usize) -> Result<SimplexVec> {
    if labels.is_empty() {
        return Err(LlpError::invalid(
            "cannot compute proportions of an empty bag",
        ));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(LlpError::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    SimplexVec::new(counts.into_iter().map(|c| c as f64 / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub instances: Vec<usize>,
    pub proportions: SimplexVec,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Header line of the bag JSON-lines format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagFileHeader {
    pub bag_size: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub dataset_hash: String,
}

/// Fixed bags over a source dataset. Source labels are kept for evaluation only.
#[derive(Debug, Clone)]
pub struct BagDataset {
    bags: Vec<Bag>,
    source: Arc<LabeledDataset>,
    bag_size: usize,
    seed: u64,
}

impl PartialEq for BagDataset {
    fn eq(&self, other: &Self) -> bool {
        self.bags == other.bags
            && self.bag_size == other.bag_size
            && self.seed == other.seed
            && (Arc::ptr_eq(&self.source, &other.source) || self.source == other.source)
    }
}

pub fn make_bags(ds: Arc<LabeledDataset>, bag_size: usize, seed: u64) -> Result<BagDataset> {
    if bag_size == 0 || bag_size > ds.len() {
        return Err(LlpError::invalid(format!(
            "bag size {bag_size} must be in [1, {}]",
            ds.len()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let num_bags = ds.len() / bag_size;
    let mut bags = Vec::with_capacity(num_bags);
    for chunk in perm.chunks_exact(bag_size) {
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels()[i]).collect();
        bags.push(Bag {
            instances: chunk.to_vec(),
            proportions: compute_proportions(&labels, ds.num_classes())?,
        });
    }
    debug_assert_eq!(bags.len(), num_bags);
    Ok(BagDataset {
        bags,
        source: ds,
        bag_size,
        seed,
    })
}

impl BagDataset {
    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn bag_size(&self) -> usize {
        self.bag_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }

    pub fn source(&self) -> &LabeledDataset {
        &self.source
    }

    pub fn source_arc(&self) -> &Arc<LabeledDataset> {
        &self.source
    }

    /// Feature vectors of the instances of bag `i`.
    pub fn bag_features(&self, i: usize) -> Vec<&[f64]> {
        self.bags[i]
            .instances
            .iter()
            .map(|&j| self.source.features()[j].as_slice())
            .collect()
    }

    pub fn header(&self) -> BagFileHeader {
        BagFileHeader {
            bag_size: self.bag_size,
            seed: self.seed,
            num_classes: self.num_classes(),
            dataset_hash: self.source.content_hash(),
        }
    }

    /// One header line, then one `{"instances", "proportions"}` line per bag.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header())?;
        writeln!(w)?;
        for bag in &self.bags {
            serde_json::to_writer(&mut w, bag)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a bag file written for `source`; the dataset hash must match.
    pub fn read_jsonl(path: impl AsRef<Path>, source: Arc<LabeledDataset>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut lines = BufReader::new(File::open(path)?).lines();
        let parse_err = |line: usize, message: String| LlpError::Parse {
            path: display.clone(),
            line,
            message,
        };
        let header_line = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))??;
        let header: BagFileHeader =
            serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
        if header.dataset_hash != source.content_hash() {
            return Err(LlpError::invalid(format!(
                "{display}: bags were built from a different dataset"
            )));
        }
        if header.num_classes != source.num_classes() {
            return Err(parse_err(
                1,
                "class count does not match the dataset".into(),
            ));
        }
        let mut bags = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bag: Bag =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            if bag.proportions.dim() != header.num_classes
                || bag.instances.iter().any(|&j| j >= source.len())
                || bag.is_empty()
            {
                return Err(parse_err(i + 2, "bag does not fit the dataset".into()));
            }
            bags.push(bag);
        }
        Ok(Self {
            bags,
            source,
            bag_size: header.bag_size,
            seed: header.seed,
        })
    }
}
