//! Slice index over a set of scans, scan-level splits and nested label
//! subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::volume::{extract_middle_slices, SliceFraction, SliceRecord, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate scan id {0}")]
    DuplicateScan(String),
    #[error("scan {0} appears in more than one split")]
    OverlappingSplits(String),
    #[error("split references unknown scan {0}")]
    UnknownScan(String),
    #[error("label fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("training split is empty")]
    EmptyTraining,
    #[error("split counts {requested:?} exceed the {available} available scans")]
    NotEnoughScans {
        requested: [usize; 3],
        available: usize,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("manifest i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Immutable, queryable collection of slices.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    records: Vec<SliceRecord>,
    splits: Vec<Option<Split>>,
    by_scan: BTreeMap<String, Vec<usize>>,
    by_organ: BTreeMap<bool, Vec<usize>>,
    unknown_organ: Vec<usize>,
}

impl DatasetIndex {
    /// Builds an index from already extracted slice records, grouped by scan
    /// in first-seen order. Scan ids must form contiguous runs.
    pub fn from_records(records: Vec<SliceRecord>) -> Result<Self> {
        let mut seen_scans: BTreeSet<String> = BTreeSet::new();
        let mut last: Option<&str> = None;
        for r in &records {
            if last != Some(r.scan_id.as_str()) {
                if !seen_scans.insert(r.scan_id.clone()) {
                    return Err(DatasetError::DuplicateScan(r.scan_id.clone()));
                }
                last = Some(r.scan_id.as_str());
            }
        }
        let splits = vec![None; records.len()];
        Ok(Self::assemble(records, splits))
    }

    fn assemble(records: Vec<SliceRecord>, splits: Vec<Option<Split>>) -> Self {
        let mut by_scan: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_organ: BTreeMap<bool, Vec<usize>> = BTreeMap::new();
        by_organ.insert(false, Vec::new());
        by_organ.insert(true, Vec::new());
        let mut unknown_organ = Vec::new();
        for (i, r) in records.iter().enumerate() {
            by_scan.entry(r.scan_id.clone()).or_default().push(i);
            match r.organ_present {
                Some(t) => by_organ.entry(t).or_default().push(i),
                None => unknown_organ.push(i),
            }
        }
        Self {
            records,
            splits,
            by_scan,
            by_organ,
            unknown_organ,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SliceRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &SliceRecord {
        &self.records[i]
    }

    pub fn split_of(&self, i: usize) -> Option<Split> {
        self.splits[i]
    }

    pub fn scan_ids(&self) -> impl Iterator<Item = &str> {
        self.by_scan.keys().map(String::as_str)
    }

    pub fn num_scans(&self) -> usize {
        self.by_scan.len()
    }

    /// Record indices of `scan_id`, in slice order.
    pub fn scan(&self, scan_id: &str) -> &[usize] {
        self.by_scan.get(scan_id).map_or(&[], Vec::as_slice)
    }

    pub fn with_organ(&self, present: bool) -> &[usize] {
        self.by_organ.get(&present).map_or(&[], Vec::as_slice)
    }

    pub fn unknown_organ(&self) -> &[usize] {
        &self.unknown_organ
    }

    /// Assigns every record the split of its scan. Scans not named by the
    /// split are dropped.
    pub fn with_split(&self, spec: &SplitSpec) -> Result<Self> {
        spec.validate()?;
        for id in spec.all_ids() {
            if !self.by_scan.contains_key(id) {
                return Err(DatasetError::UnknownScan(id.clone()));
            }
        }
        let (records, splits) = self
            .records
            .iter()
            .filter_map(|r| spec.split_of(&r.scan_id).map(|s| (r.clone(), Some(s))))
            .unzip();
        Ok(Self::assemble(records, splits))
    }

    /// Records belonging to `split`, as a fresh index.
    pub fn subset(&self, split: Split) -> Self {
        let (records, splits) = self
            .records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == Some(split))
            .map(|(r, s)| (r.clone(), *s))
            .unzip();
        Self::assemble(records, splits)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == Some(split)).collect()
    }
}

/// Windows, slices and indexes a set of volumes. Scan ids must be unique.
pub fn build_index(
    volumes: &[Volume],
    fraction: SliceFraction,
    resolution: usize,
) -> Result<DatasetIndex> {
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for v in volumes {
        if !seen.insert(v.scan_id.clone()) {
            return Err(DatasetError::DuplicateScan(v.scan_id.clone()));
        }
        records.extend(extract_middle_slices(v, fraction, resolution)?);
    }
    DatasetIndex::from_records(records)
}

/// Keeps `ceil(fraction * N_train)` training slices. The kept set is a
/// prefix of one seeded permutation, so for a fixed seed smaller fractions
/// give subsets of larger ones. Validation and test records are untouched.
pub fn subsample_labels(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let train = index.split_indices(Split::Train);
    if train.is_empty() {
        return Err(DatasetError::EmptyTraining);
    }
    let keep = label_prefix(&train, fraction, seed);
    let (records, splits) = (0..index.len())
        .filter(|i| index.splits[*i] != Some(Split::Train) || keep.contains(i))
        .map(|i| (index.records[i].clone(), index.splits[i]))
        .unzip();
    Ok(DatasetIndex::assemble(records, splits))
}

fn label_prefix(train: &[usize], fraction: f64, seed: u64) -> BTreeSet<usize> {
    let n = train.len();
    let count = (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n);
    let mut perm = train.to_vec();
    perm.shuffle(&mut rng::stream(seed, "label-subsample"));
    perm.into_iter().take(count).collect()
}

/// Scan-level split, serialized as the experiment's split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub label_fraction: f64,
}

impl SplitSpec {
    /// Shuffles `scan_ids` with `seed` and cuts it into the requested counts.
    pub fn random(
        scan_ids: &[String],
        counts: [usize; 3],
        seed: u64,
        label_fraction: f64,
    ) -> Result<Self> {
        if counts.iter().sum::<usize>() > scan_ids.len() {
            return Err(DatasetError::NotEnoughScans {
                requested: counts,
                available: scan_ids.len(),
            });
        }
        let mut ids = scan_ids.to_vec();
        ids.sort();
        ids.shuffle(&mut rng::stream(seed, "split"));
        let mut it = ids.into_iter();
        let mut take = |n: usize| {
            let mut v: Vec<String> = it.by_ref().take(n).collect();
            v.sort();
            v
        };
        let spec = Self {
            train: take(counts[0]),
            val: take(counts[1]),
            test: take(counts[2]),
            seed,
            label_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(DatasetError::InvalidFraction(self.label_fraction));
        }
        let mut seen = BTreeSet::new();
        for id in self.all_ids() {
            if !seen.insert(id) {
                return Err(DatasetError::OverlappingSplits(id.clone()));
            }
        }
        if self.train.is_empty() {
            return Err(DatasetError::EmptyTraining);
        }
        Ok(())
    }

    fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn split_of(&self, scan_id: &str) -> Option<Split> {
        let has = |v: &Vec<String>| v.iter().any(|s| s == scan_id);
        if has(&self.train) {
            Some(Split::Train)
        } else if has(&self.val) {
            Some(Split::Val)
        } else if has(&self.test) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::record;
    use super::*;

    fn two_scans() -> DatasetIndex {
        DatasetIndex::from_records(vec![
            record("a", 0, Some(false)),
            record("a", 1, Some(true)),
            record("a", 2, Some(false)),
            record("b", 0, Some(false)),
            record("b", 1, Some(false)),
            record("b", 2, Some(false)),
        ])
        .unwrap()
    }

    #[test]
    fn buckets_partition_records() {
        let idx = two_scans();
        assert_eq!(idx.len(), 6);
        assert_eq!(idx.num_scans(), 2);
        assert_eq!(idx.with_organ(true), &[1]);
        assert_eq!(idx.with_organ(false).len(), 5);
        let scan_total: usize = idx.scan_ids().map(|s| idx.scan(s).len()).sum();
        assert_eq!(scan_total, idx.len());
    }

    #[test]
    fn unlabeled_records_are_unknown() {
        let idx = DatasetIndex::from_records(vec![record("u", 0, None), record("u", 1, None)])
            .unwrap();
        assert_eq!(idx.unknown_organ(), &[0, 1]);
        assert!(idx.with_organ(true).is_empty());
    }

    #[test]
    fn duplicate_scans_rejected() {
        let err = DatasetIndex::from_records(vec![
            record("a", 0, None),
            record("b", 0, None),
            record("a", 1, None),
        ])
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateScan(_)));
    }

    fn hundred_train() -> DatasetIndex {
        let recs = (0..100).map(|k| record("t", k, Some(k % 2 == 0))).collect();
        let idx = DatasetIndex::from_records(recs).unwrap();
        let spec = SplitSpec {
            train: vec!["t".into()],
            val: vec![],
            test: vec![],
            seed: 0,
            label_fraction: 1.0,
        };
        idx.with_split(&spec).unwrap()
    }

    #[test]
    fn subsample_counts_and_identity() {
        let idx = hundred_train();
        assert_eq!(subsample_labels(&idx, 0.05, 1).unwrap().len(), 5);
        assert_eq!(subsample_labels(&idx, 1.0, 1).unwrap().len(), 100);
        let a = subsample_labels(&idx, 0.3, 9).unwrap();
        let b = subsample_labels(&idx, 0.3, 9).unwrap();
        assert_eq!(a.records(), b.records());
    }

    #[test]
    fn subsample_is_nested() {
        let idx = hundred_train();
        let keys = |f| -> BTreeSet<String> {
            subsample_labels(&idx, f, 4)
                .unwrap()
                .records()
                .iter()
                .map(SliceRecord::key)
                .collect()
        };
        let (small, big) = (keys(0.1), keys(0.5));
        assert!(small.is_subset(&big));
    }

    #[test]
    fn subsample_needs_training_data() {
        let idx = two_scans();
        assert!(matches!(
            subsample_labels(&idx, 0.5, 0),
            Err(DatasetError::EmptyTraining)
        ));
    }

    #[test]
    fn split_spec_disjoint_and_roundtrip() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let spec = SplitSpec::random(&ids, [6, 2, 2], 3, 0.1).unwrap();
        let all: BTreeSet<_> = spec.train.iter().chain(&spec.val).chain(&spec.test).collect();
        assert_eq!(all.len(), 10);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        spec.save(&p).unwrap();
        assert_eq!(SplitSpec::load(&p).unwrap(), spec);

        let bad = SplitSpec {
            train: vec!["a".into()],
            val: vec!["a".into()],
            test: vec![],
            seed: 0,
            label_fraction: 1.0,
        };
        assert!(matches!(bad.validate(), Err(DatasetError::OverlappingSplits(_))));
    }

    #[test]
    fn split_keeps_scans_whole() {
        let idx = two_scans();
        let spec = SplitSpec {
            train: vec!["a".into()],
            val: vec![],
            test: vec!["b".into()],
            seed: 0,
            label_fraction: 1.0,
        };
        let s = idx.with_split(&spec).unwrap();
        let train = s.subset(Split::Train);
        assert!(train.records().iter().all(|r| r.scan_id == "a"));
        assert_eq!(s.subset(Split::Test).len(), 3);
    }
}
