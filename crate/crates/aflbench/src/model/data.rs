//! Synthetic data generation, non-IID partitioning, and CSV round-trip.

use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Feature matrix (row-major) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidInput("feature_dim must be >= 1".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::InvalidInput(format!(
                "feature matrix has {} values, expected {} rows x {} dims",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        Ok(Self { features, labels, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (self.row(i), y))
    }

    /// New dataset holding the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.feature_dim)
    }

    /// Rows whose label is in `labels`.
    pub fn filter_labels(&self, labels: &[usize]) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    /// CSV export with header `f0,...,f{d-1},label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.feature_dim).map(|j| format!("f{j}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for (x, y) in self.iter() {
            let row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{y}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
        let mut lines = BufReader::new(input).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty CSV".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"label") || cols.len() < 2 {
            return Err(Error::InvalidInput("CSV header must be f0,..,f{d-1},label".into()));
        }
        let d = cols.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::InvalidInput(format!("CSV row has {} fields, expected {}", fields.len(), d + 1)));
            }
            for f in &fields[..d] {
                features.push(f.parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad feature: {e}")))?);
            }
            labels.push(
                fields[d]
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidInput(format!("bad label: {e}")))?,
            );
        }
        Dataset::new(features, labels, d)
    }
}

/// Gaussian blobs: one mean per class drawn uniformly on a sphere of
/// radius `class_separation`, unit covariance, `examples_per_class` rows
/// per class in class order.
pub fn generate_synthetic_classification(
    num_classes: usize,
    feature_dim: usize,
    examples_per_class: usize,
    class_separation: f64,
    rng_seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || feature_dim == 0 || examples_per_class == 0 {
        return Err(Error::InvalidInput("counts must be >= 1".into()));
    }
    if !(class_separation > 0.0) {
        return Err(Error::InvalidInput("class_separation must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut m: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for v in &mut m {
            *v *= class_separation / norm;
        }
        means.push(m);
    }
    let mut features = Vec::with_capacity(num_classes * examples_per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * examples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..examples_per_class {
            for &mu in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, feature_dim)
}

/// Fast/slow split description used by [`partition_noniid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub fast_count: usize,
    pub slow_count: usize,
    pub fast_labels: Vec<usize>,
    pub slow_labels: Vec<usize>,
    pub holdout_fraction: f64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must be in (0, 1)".into()));
        }
        if self.fast_labels.iter().any(|l| self.slow_labels.contains(l)) {
            return Err(Error::Config("fast and slow label sets must be disjoint".into()));
        }
        if self.fast_count == 0 && !self.fast_labels.is_empty() {
            return Err(Error::Config("fast group has zero agents but a nonempty label set".into()));
        }
        if self.slow_count == 0 && !self.slow_labels.is_empty() {
            return Err(Error::Config("slow group has zero agents but a nonempty label set".into()));
        }
        if self.fast_count + self.slow_count == 0 {
            return Err(Error::Config("at least one agent required".into()));
        }
        Ok(())
    }
}

/// Splits `data` into per-agent shards with disjoint label supports plus
/// a stratified holdout over all labels.
///
/// Shard order is fast agents first, then slow agents. Every example
/// lands in exactly one shard or the holdout.
pub fn partition_noniid(
    data: &Dataset,
    spec: &PartitionSpec,
    rng_seed: u64,
) -> Result<(Vec<Dataset>, Dataset)> {
    spec.validate()?;
    for &y in data.labels() {
        if !spec.fast_labels.contains(&y) && !spec.slow_labels.contains(&y) {
            return Err(Error::InvalidInput(format!("label {y} belongs to neither group")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut labels_sorted: Vec<usize> = data.labels().to_vec();
    labels_sorted.sort_unstable();
    labels_sorted.dedup();

    let mut holdout_idx = Vec::new();
    let mut fast_pool = Vec::new();
    let mut slow_pool = Vec::new();
    for &label in &labels_sorted {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == label).collect();
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64) * spec.holdout_fraction).round() as usize;
        holdout_idx.extend_from_slice(&idx[..take]);
        let rest = &idx[take..];
        if spec.fast_labels.contains(&label) {
            fast_pool.extend_from_slice(rest);
        } else {
            slow_pool.extend_from_slice(rest);
        }
    }

    let mut shards = Vec::with_capacity(spec.fast_count + spec.slow_count);
    for (pool, count) in [(&mut fast_pool, spec.fast_count), (&mut slow_pool, spec.slow_count)] {
        if count == 0 {
            continue;
        }
        pool.shuffle(&mut rng);
        // Deal round-robin so shard sizes differ by at most one.
        let mut per_agent: Vec<Vec<usize>> = vec![Vec::new(); count];
        for (k, &i) in pool.iter().enumerate() {
            per_agent[k % count].push(i);
        }
        for idx in per_agent {
            shards.push(data.subset(&idx)?);
        }
    }

    holdout_idx.sort_unstable();
    Ok((shards, data.subset(&holdout_idx)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn blobs() -> Dataset {
        generate_synthetic_classification(10, 5, 20, 4.0, 11).unwrap()
    }

    #[test]
    fn generation_counts_and_determinism() {
        let d = blobs();
        assert_eq!(d.len(), 200);
        for c in 0..10 {
            assert_eq!(d.labels().iter().filter(|&&y| y == c).count(), 20);
        }
        assert_eq!(d, blobs());
        assert_ne!(d, generate_synthetic_classification(10, 5, 20, 4.0, 12).unwrap());
        assert!(generate_synthetic_classification(0, 5, 20, 4.0, 1).is_err());
        assert!(generate_synthetic_classification(10, 5, 20, 0.0, 1).is_err());
    }

    fn spec62() -> PartitionSpec {
        PartitionSpec {
            fast_count: 10,
            slow_count: 5,
            fast_labels: (4..10).collect(),
            slow_labels: (0..4).collect(),
            holdout_fraction: 0.2,
        }
    }

    #[test]
    fn partition_label_supports_and_disjointness() {
        let data = blobs();
        let (shards, holdout) = partition_noniid(&data, &spec62(), 3).unwrap();
        assert_eq!(shards.len(), 15);
        for (i, shard) in shards.iter().enumerate() {
            let support: BTreeSet<usize> = shard.labels().iter().copied().collect();
            if i < 10 {
                assert!(support.iter().all(|&y| y >= 4), "fast shard {i} holds slow label");
            } else {
                assert!(support.iter().all(|&y| y < 4), "slow shard {i} holds fast label");
            }
        }
        // Holdout is stratified over all labels: 20% of each class.
        for c in 0..10 {
            assert_eq!(holdout.labels().iter().filter(|&&y| y == c).count(), 4);
        }
        let total: usize = shards.iter().map(|s| s.len()).sum::<usize>() + holdout.len();
        assert_eq!(total, data.len());
        // No row duplicated across shards and holdout: multiset of rows matches.
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for s in shards.iter().chain(std::iter::once(&holdout)) {
            for (x, _) in s.iter() {
                seen.push(x.iter().map(|v| v.to_bits()).collect());
            }
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), data.len());
    }

    #[test]
    fn degenerate_single_shard() {
        let data = blobs();
        let spec = PartitionSpec {
            fast_count: 1,
            slow_count: 0,
            fast_labels: (0..10).collect(),
            slow_labels: vec![],
            holdout_fraction: 0.2,
        };
        let (shards, holdout) = partition_noniid(&data, &spec, 3).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 160);
        assert_eq!(holdout.len(), 40);
    }

    #[test]
    fn partition_rejects_bad_specs() {
        let data = blobs();
        let mut bad = spec62();
        bad.slow_labels = vec![0, 1]; // labels 2,3 orphaned
        assert!(partition_noniid(&data, &bad, 0).is_err());
        let mut overlap = spec62();
        overlap.slow_labels.push(4);
        assert!(partition_noniid(&data, &overlap, 0).is_err());
        let mut empty_group = spec62();
        empty_group.slow_count = 0;
        assert!(partition_noniid(&data, &empty_group, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = blobs();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(d, back);
    }
}
