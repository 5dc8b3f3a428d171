//! Anchor / positive / negative selection for contrastive pre-training.
//!
//! * scan-based (`S`): positive from the anchor's scan, negative from any
//!   other scan. Organ flags are never read.
//! * organ-based (`O`): positive shares the anchor's organ flag, negative has
//!   the opposite flag; both drawn over every scan.
//! * mixed (`M`): positive and negative both come from the anchor's scan,
//!   split by organ flag. When the scan has no slice of the opposite class
//!   the negative falls back to an organ-based draw from other scans and the
//!   triplet is flagged.
//!
//! All draws are uniform over the candidate set, and the anchor is never its
//! own positive.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetIndex;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "S")]
    ScanBased,
    #[serde(rename = "O")]
    OrganBased,
    #[serde(rename = "M")]
    Mixed,
}

impl Strategy {
    pub fn code(self) -> &'static str {
        match self {
            Strategy::ScanBased => "S",
            Strategy::OrganBased => "O",
            Strategy::Mixed => "M",
        }
    }

    pub fn needs_organ_flags(self) -> bool {
        !matches!(self, Strategy::ScanBased)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Strategy {
    type Err = SamplerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S" | "s" => Ok(Strategy::ScanBased),
            "O" | "o" => Ok(Strategy::OrganBased),
            "M" | "m" => Ok(Strategy::Mixed),
            other => Err(SamplerError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("unknown strategy {0:?}, expected S, O or M")]
    UnknownStrategy(String),
    #[error("scan {0} has a single slice, no positive candidate")]
    SingleSliceScan(String),
    #[error("index holds a single scan, no negative candidate")]
    SingleScanDataset,
    #[error("organ flag of {0} is unknown")]
    UnknownOrgan(String),
    #[error("no slice with organ flag {0} to draw from")]
    EmptyClass(bool),
    #[error("scan of {0} has no other slice with the same organ flag")]
    NoSameScanPositive(String),
    #[error("anchor index {0} out of range")]
    AnchorOutOfRange(usize),
}

/// Record indices into the sampled [`DatasetIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub strategy: Strategy,
    pub fallback_used: bool,
}

fn pick(candidates: &[usize], rng: &mut Rng) -> Option<usize> {
    candidates.choose(rng).copied()
}

fn pick_excluding(candidates: &[usize], exclude: usize, rng: &mut Rng) -> Option<usize> {
    let pool: Vec<usize> = candidates.iter().copied().filter(|&c| c != exclude).collect();
    pick(&pool, rng)
}

fn check_anchor(index: &DatasetIndex, anchor: usize) -> Result<(), SamplerError> {
    if anchor >= index.len() {
        Err(SamplerError::AnchorOutOfRange(anchor))
    } else {
        Ok(())
    }
}

fn organ_flag(index: &DatasetIndex, i: usize) -> Result<bool, SamplerError> {
    index
        .record(i)
        .organ_present
        .ok_or_else(|| SamplerError::UnknownOrgan(index.record(i).key()))
}

pub fn sample_scan_based(
    index: &DatasetIndex,
    anchor: usize,
    rng: &mut Rng,
) -> Result<Triplet, SamplerError> {
    check_anchor(index, anchor)?;
    let scan_id = &index.record(anchor).scan_id;
    if index.num_scans() < 2 {
        return Err(SamplerError::SingleScanDataset);
    }
    let same = index.scan(scan_id);
    let positive = pick_excluding(same, anchor, rng)
        .ok_or_else(|| SamplerError::SingleSliceScan(scan_id.clone()))?;
    // Uniform over records of other scans: draw a rank among the
    // `len - |same|` outside records and map it past the scan's block.
    let outside = index.len() - same.len();
    let mut rank = rng.random_range(0..outside);
    let negative = (0..index.len())
        .filter(|i| &index.record(*i).scan_id != scan_id)
        .find(|_| {
            let hit = rank == 0;
            rank = rank.saturating_sub(1);
            hit
        })
        .expect("outside rank within bounds");
    Ok(Triplet {
        anchor,
        positive,
        negative,
        strategy: Strategy::ScanBased,
        fallback_used: false,
    })
}

pub fn sample_organ_based(
    index: &DatasetIndex,
    anchor: usize,
    rng: &mut Rng,
) -> Result<Triplet, SamplerError> {
    check_anchor(index, anchor)?;
    let t = organ_flag(index, anchor)?;
    let opposite = index.with_organ(!t);
    if opposite.is_empty() {
        return Err(SamplerError::EmptyClass(!t));
    }
    let positive =
        pick_excluding(index.with_organ(t), anchor, rng).ok_or(SamplerError::EmptyClass(t))?;
    let negative = pick(opposite, rng).expect("nonempty");
    Ok(Triplet {
        anchor,
        positive,
        negative,
        strategy: Strategy::OrganBased,
        fallback_used: false,
    })
}

pub fn sample_mixed(
    index: &DatasetIndex,
    anchor: usize,
    rng: &mut Rng,
) -> Result<Triplet, SamplerError> {
    check_anchor(index, anchor)?;
    let t = organ_flag(index, anchor)?;
    let scan_id = &index.record(anchor).scan_id;
    let same_scan = index.scan(scan_id);
    let with_flag = |flag: bool| -> Vec<usize> {
        same_scan
            .iter()
            .copied()
            .filter(|&i| index.record(i).organ_present == Some(flag))
            .collect()
    };
    let positive = pick_excluding(&with_flag(t), anchor, rng)
        .ok_or_else(|| SamplerError::NoSameScanPositive(index.record(anchor).key()))?;
    let in_scan_negatives = with_flag(!t);
    let (negative, fallback_used) = match pick(&in_scan_negatives, rng) {
        Some(n) => (n, false),
        None => {
            let pool: Vec<usize> = index
                .with_organ(!t)
                .iter()
                .copied()
                .filter(|&i| &index.record(i).scan_id != scan_id)
                .collect();
            (pick(&pool, rng).ok_or(SamplerError::EmptyClass(!t))?, true)
        }
    };
    Ok(Triplet {
        anchor,
        positive,
        negative,
        strategy: Strategy::Mixed,
        fallback_used,
    })
}

pub fn sample(
    strategy: Strategy,
    index: &DatasetIndex,
    anchor: usize,
    rng: &mut Rng,
) -> Result<Triplet, SamplerError> {
    match strategy {
        Strategy::ScanBased => sample_scan_based(index, anchor, rng),
        Strategy::OrganBased => sample_organ_based(index, anchor, rng),
        Strategy::Mixed => sample_mixed(index, anchor, rng),
    }
}

/// Checks that `index` can feed `strategy` at all. Per-anchor gaps (e.g. a
/// lone organ slice in its scan) are handled by skipping the anchor.
pub fn check_compatible(strategy: Strategy, index: &DatasetIndex) -> Result<(), SamplerError> {
    match strategy {
        Strategy::ScanBased => {
            if index.num_scans() < 2 {
                return Err(SamplerError::SingleScanDataset);
            }
        }
        Strategy::OrganBased | Strategy::Mixed => {
            if let Some(&i) = index.unknown_organ().first() {
                return Err(SamplerError::UnknownOrgan(index.record(i).key()));
            }
            for flag in [false, true] {
                if index.with_organ(flag).is_empty() {
                    return Err(SamplerError::EmptyClass(flag));
                }
            }
        }
    }
    Ok(())
}

/// One triplet per anchor per epoch, anchors visited in shuffled order.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    pub strategy: Strategy,
    pub fallbacks: usize,
    pub skipped: usize,
}

impl EpochSampler {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            fallbacks: 0,
            skipped: 0,
        }
    }

    pub fn epoch(&mut self, index: &DatasetIndex, rng: &mut Rng) -> Result<Vec<Triplet>, SamplerError> {
        check_compatible(self.strategy, index)?;
        let mut anchors: Vec<usize> = (0..index.len()).collect();
        anchors.shuffle(rng);
        let mut out = Vec::with_capacity(anchors.len());
        for a in anchors {
            match sample(self.strategy, index, a, rng) {
                Ok(t) => {
                    self.fallbacks += usize::from(t.fallback_used);
                    out.push(t);
                }
                Err(SamplerError::SingleSliceScan(_) | SamplerError::NoSameScanPositive(_)) => {
                    self.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Appends triplets to a CSV trace with columns
/// `epoch,anchor_id,pos_id,neg_id,strategy,fallback`.
pub fn write_trace<W: Write>(
    w: &mut W,
    epoch: usize,
    index: &DatasetIndex,
    triplets: &[Triplet],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(w, "epoch,anchor_id,pos_id,neg_id,strategy,fallback")?;
    }
    for t in triplets {
        writeln!(
            w,
            "{epoch},{},{},{},{},{}",
            index.record(t.anchor).key(),
            index.record(t.positive).key(),
            index.record(t.negative).key(),
            t.strategy,
            u8::from(t.fallback_used)
        )?;
    }
    Ok(())
}
