//! Overlap and distance metrics, the paired one-tailed t-test, and the
//! per-scan evaluation report.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("sample lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least two pairs are needed, got {0}")]
    TooFewPairs(usize),
    #[error("scan sets differ: {0}")]
    ScanSetMismatch(String),
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::ShapeMismatch(a.to_vec(), b.to_vec()));
    }
    Ok(())
}

/// Hard Dice `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice_score(a: ArrayView2<'_, u8>, b: ArrayView2<'_, u8>) -> Result<f64, MetricError> {
    same_shape(a.shape(), b.shape())?;
    Ok(dice_counts(a.iter().copied(), b.iter().copied()))
}

pub fn dice_score_3d(a: ArrayView3<'_, u8>, b: ArrayView3<'_, u8>) -> Result<f64, MetricError> {
    same_shape(a.shape(), b.shape())?;
    Ok(dice_counts(a.iter().copied(), b.iter().copied()))
}

fn dice_counts(a: impl Iterator<Item = u8>, b: impl Iterator<Item = u8>) -> f64 {
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (x, y) in a.zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += u64::from(x && y);
        na += u64::from(x);
        nb += u64::from(y);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Squared Euclidean distance of every voxel to the nearest nonzero voxel
/// of `mask`, with per-axis spacing. `None` when the mask is empty.
pub fn squared_distance_transform(mask: ArrayView3<'_, u8>, spacing: [f64; 3]) -> Option<Array3<f64>> {
    if !mask.iter().any(|&v| v != 0) {
        return None;
    }
    let mut d = mask.mapv(|v| if v != 0 { 0.0 } else { f64::INFINITY });
    let longest = *mask.shape().iter().max().unwrap_or(&0);
    let mut buf = Lower::with_capacity(longest);
    for (ax, &w) in spacing.iter().enumerate() {
        for mut lane in d.lanes_mut(Axis(ax)) {
            let f: Vec<f64> = lane.to_vec();
            buf.transform(&f, w * w, |q, v| lane[q] = v);
        }
    }
    Some(d)
}

/// Scratch space for the 1D lower-envelope transform.
struct Lower {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Lower {
    fn with_capacity(n: usize) -> Self {
        Self {
            v: Vec::with_capacity(n),
            z: Vec::with_capacity(n + 1),
        }
    }

    /// `out(q, min_p (w·(q-p)² + f[p]))` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], w: f64, mut out: impl FnMut(usize, f64)) {
        self.v.clear();
        self.z.clear();
        let sq = |q: usize| (q * q) as f64;
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                let Some(&p) = self.v.last() else {
                    self.v.push(q);
                    self.z.push(f64::NEG_INFINITY);
                    break;
                };
                let s = ((fq + w * sq(q)) - (f[p] + w * sq(p))) / (2.0 * w * (q - p) as f64);
                if s <= *self.z.last().expect("paired with v") {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(s);
                    break;
                }
            }
        }
        if self.v.is_empty() {
            (0..f.len()).for_each(|q| out(q, f64::INFINITY));
            return;
        }
        let mut k = 0;
        for q in 0..f.len() {
            while k + 1 < self.v.len() && self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as f64 - p as f64;
            out(q, w * dq * dq + f[p]);
        }
    }
}

fn directed_sq(from: ArrayView3<'_, u8>, dt_to: &Array3<f64>) -> f64 {
    let mut m: f64 = 0.0;
    Zip::from(&from).and(dt_to).for_each(|&a, &d| {
        if a != 0 && d > m {
            m = d;
        }
    });
    m
}

/// Symmetric Hausdorff distance between the foreground voxel sets, in
/// units of `spacing`. `None` if either mask is empty.
pub fn hausdorff_3d_spaced(
    a: ArrayView3<'_, u8>,
    b: ArrayView3<'_, u8>,
    spacing: [f64; 3],
) -> Result<Option<f64>, MetricError> {
    same_shape(a.shape(), b.shape())?;
    let (Some(da), Some(db)) = (
        squared_distance_transform(a, spacing),
        squared_distance_transform(b, spacing),
    ) else {
        return Ok(None);
    };
    Ok(Some(directed_sq(a, &db).max(directed_sq(b, &da)).sqrt()))
}

/// Voxel-unit Hausdorff distance over a slice stack.
pub fn hausdorff_3d(a: ArrayView3<'_, u8>, b: ArrayView3<'_, u8>) -> Result<Option<f64>, MetricError> {
    hausdorff_3d_spaced(a, b, [1.0; 3])
}

/// Pixel-unit Hausdorff distance between two 2D masks.
pub fn hausdorff(a: ArrayView2<'_, u8>, b: ArrayView2<'_, u8>) -> Result<Option<f64>, MetricError> {
    hausdorff_3d(a.insert_axis(Axis(0)), b.insert_axis(Axis(0)))
}

/// Directed distance `max_{a∈A} min_{b∈B} |a-b|`, pixel units.
pub fn directed_hausdorff(a: ArrayView2<'_, u8>, b: ArrayView2<'_, u8>) -> Result<Option<f64>, MetricError> {
    same_shape(a.shape(), b.shape())?;
    let a3 = a.insert_axis(Axis(0));
    if !a.iter().any(|&v| v != 0) {
        return Ok(None);
    }
    Ok(squared_distance_transform(b.insert_axis(Axis(0)), [1.0; 3]).map(|db| directed_sq(a3, &db).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Alternative hypothesis: mean(x - y) > 0.
    Greater,
    /// Alternative hypothesis: mean(x - y) < 0.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TTest {
    Computed { t: f64, df: f64, p_value: f64 },
    /// Every paired difference is identical, so the statistic is undefined.
    Degenerate { mean_diff: f64 },
}

impl TTest {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            TTest::Computed { p_value, .. } => Some(*p_value),
            TTest::Degenerate { .. } => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, TTest::Degenerate { .. })
    }
}

/// Student t-test on the paired differences `x - y` with `n - 1` degrees of
/// freedom, one-tailed in `direction`.
pub fn paired_ttest_one_tailed(x: &[f64], y: &[f64], direction: Direction) -> Result<TTest, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(MetricError::TooFewPairs(n));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if d.iter().all(|&v| v == d[0]) || se == 0.0 {
        return Ok(TTest::Degenerate { mean_diff: mean });
    }
    let t = mean / se;
    let df = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    // Upper tails are evaluated through the lower tail of -t to keep
    // precision for large |t|.
    let p_value = match direction {
        Direction::Greater => dist.cdf(-t),
        Direction::Less => dist.cdf(t),
    };
    Ok(TTest::Computed { t, df, p_value })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanScore {
    pub scan_id: String,
    /// Repeat this score came from, for multi-run reports.
    #[serde(default)]
    pub run: usize,
    pub dice: f64,
    /// `None` (JSON `null`) when either mask is empty.
    pub hausdorff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_hd: Option<f64>,
    pub std_hd: Option<f64>,
    pub hd_excluded: usize,
}

pub const HAUSDORFF_NOTE: &str =
    "hausdorff: symmetric maximum distance over foreground voxels of the slice stack, voxel units; empty masks excluded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub per_scan: Vec<ScanScore>,
    pub aggregate: Aggregate,
    pub runs: usize,
}

impl EvalReport {
    /// Aggregates are population mean ± std over all rows.
    pub fn new(per_scan: Vec<ScanScore>, runs: usize) -> Self {
        let aggregate = Self::aggregate_of(&per_scan);
        Self {
            note: HAUSDORFF_NOTE.to_string(),
            per_scan,
            aggregate,
            runs,
        }
    }

    pub fn aggregate_of(rows: &[ScanScore]) -> Aggregate {
        let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
        let hd: Vec<f64> = rows.iter().filter_map(|r| r.hausdorff).collect();
        let (mean_dice, std_dice) = mean_std(&dice);
        let (mean_hd, std_hd) = if hd.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&hd);
            (Some(m), Some(s))
        };
        Aggregate {
            mean_dice,
            std_dice,
            mean_hd,
            std_hd,
            hd_excluded: rows.len() - hd.len(),
        }
    }

    /// Mean score per scan id, averaging over runs.
    pub fn per_scan_means(&self) -> std::collections::BTreeMap<String, (f64, Option<f64>)> {
        let mut acc: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> = Default::default();
        for r in &self.per_scan {
            let e = acc.entry(r.scan_id.clone()).or_default();
            e.0.push(r.dice);
            e.1.extend(r.hausdorff);
        }
        acc.into_iter()
            .map(|(k, (d, h))| {
                let hd = (!h.is_empty()).then(|| mean_std(&h).0);
                (k, (mean_std(&d).0, hd))
            })
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(path: &Path) -> std::io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "run,scan_id,dice,hausdorff")?;
        for r in &self.per_scan {
            let hd = r.hausdorff.map(|h| h.to_string()).unwrap_or_else(|| "undefined".into());
            writeln!(w, "{},{},{},{}", r.run, r.scan_id, r.dice, hd)?;
        }
        Ok(())
    }
}

/// Scores one predicted slice stack against its ground truth.
pub fn score_scan(
    scan_id: &str,
    run: usize,
    pred: ArrayView3<'_, u8>,
    truth: ArrayView3<'_, u8>,
) -> Result<ScanScore, MetricError> {
    Ok(ScanScore {
        scan_id: scan_id.to_string(),
        run,
        dice: dice_score_3d(pred, truth)?,
        hausdorff: hausdorff_3d(pred, truth)?,
    })
}

/// Per-slice Dice and Hausdorff, for slice-level reporting.
pub fn score_slices(
    pred: ArrayView3<'_, u8>,
    truth: ArrayView3<'_, u8>,
) -> Result<Vec<(f64, Option<f64>)>, MetricError> {
    same_shape(pred.shape(), truth.shape())?;
    pred.outer_iter()
        .zip(truth.outer_iter())
        .map(|(p, t)| Ok((dice_score(p, t)?, hausdorff(p, t)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Array2<u8> {
        let mut m = Array2::zeros((h, w));
        for &(r, c) in on {
            m[[r, c]] = 1;
        }
        m
    }

    fn brute(a: &Array2<u8>, b: &Array2<u8>) -> Option<f64> {
        let pa: Vec<_> = a.indexed_iter().filter(|(_, v)| **v != 0).map(|(i, _)| i).collect();
        let pb: Vec<_> = b.indexed_iter().filter(|(_, v)| **v != 0).map(|(i, _)| i).collect();
        if pa.is_empty() || pb.is_empty() {
            return None;
        }
        let directed = |x: &[(usize, usize)], y: &[(usize, usize)]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| {
                            let dr = p.0 as f64 - q.0 as f64;
                            let dc = p.1 as f64 - q.1 as f64;
                            dr * dr + dc * dc
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        Some(directed(&pa, &pb).max(directed(&pb, &pa)).sqrt())
    }

    #[test]
    fn dice_examples() {
        let a = mask(2, 2, &[(0, 0), (0, 1)]);
        let b = mask(2, 2, &[(0, 1), (1, 1)]);
        assert_eq!(dice_score(a.view(), b.view()).unwrap(), 0.5);
        assert_eq!(dice_score(a.view(), a.view()).unwrap(), 1.0);
        let e = Array2::<u8>::zeros((3, 3));
        assert_eq!(dice_score(e.view(), e.view()).unwrap(), 1.0);
        assert!(dice_score(a.view(), e.view()).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(a.view(), b.view()).unwrap(), Some(5.0));
        assert_eq!(hausdorff(a.view(), a.view()).unwrap(), Some(0.0));
        let e = Array2::<u8>::zeros((8, 8));
        assert_eq!(hausdorff(a.view(), e.view()).unwrap(), None);
    }

    #[test]
    fn spacing_scales_distances() {
        let mut a = Array3::<u8>::zeros((3, 4, 4));
        let mut b = a.clone();
        a[[0, 0, 0]] = 1;
        b[[2, 0, 0]] = 1;
        let hd = hausdorff_3d_spaced(a.view(), b.view(), [2.5, 1.0, 1.0]).unwrap();
        assert_eq!(hd, Some(5.0));
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut r = crate::rng::seeded(5);
        for _ in 0..50 {
            let p = r.random_range(0.01..0.3);
            let a = Array2::from_shape_fn((17, 23), |_| u8::from(r.random_bool(p)));
            let b = Array2::from_shape_fn((17, 23), |_| u8::from(r.random_bool(p)));
            assert_eq!(hausdorff(a.view(), b.view()).unwrap(), brute(&a, &b));
        }
    }

    #[test]
    fn ttest_separation_and_degenerate() {
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let x: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 0.5 + 1e-3 * (i % 3) as f64).collect();
        let t = paired_ttest_one_tailed(&x, &y, Direction::Greater).unwrap();
        assert!(t.p_value().unwrap() < 0.01);
        let t = paired_ttest_one_tailed(&x, &y, Direction::Less).unwrap();
        assert!(t.p_value().unwrap() > 0.99);
        assert!(paired_ttest_one_tailed(&y, &y, Direction::Greater).unwrap().is_degenerate());
        assert!(paired_ttest_one_tailed(&[1.0], &[0.0], Direction::Greater).is_err());
        assert!(paired_ttest_one_tailed(&[1.0, 2.0], &[0.0], Direction::Greater).is_err());
    }

    #[test]
    fn report_aggregates_are_recomputable() {
        let rows = vec![
            ScanScore { scan_id: "a".into(), run: 0, dice: 0.5, hausdorff: Some(2.0) },
            ScanScore { scan_id: "b".into(), run: 0, dice: 1.0, hausdorff: None },
        ];
        let r = EvalReport::new(rows.clone(), 1);
        assert_eq!(r.aggregate.mean_dice, 0.75);
        assert_eq!(r.aggregate.std_dice, 0.25);
        assert_eq!(r.aggregate.mean_hd, Some(2.0));
        assert_eq!(r.aggregate.hd_excluded, 1);
        assert_eq!(EvalReport::aggregate_of(&r.per_scan), r.aggregate);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"hausdorff\":null"));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().contains("b,1,undefined"));
    }

    fn random_mask() -> impl Strategy<Value = Array2<u8>> {
        prop::collection::vec(prop::bool::weighted(0.15), 12 * 12)
            .prop_map(|v| Array2::from_shape_vec((12, 12), v.into_iter().map(u8::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(a in random_mask(), b in random_mask()) {
            let d = dice_score(a.view(), b.view()).unwrap();
            prop_assert_eq!(d, dice_score(b.view(), a.view()).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn hausdorff_symmetric_and_dominates_directed(a in random_mask(), b in random_mask()) {
            let h = hausdorff(a.view(), b.view()).unwrap();
            prop_assert_eq!(h, hausdorff(b.view(), a.view()).unwrap());
            if let Some(h) = h {
                let ab = directed_hausdorff(a.view(), b.view()).unwrap().unwrap();
                let ba = directed_hausdorff(b.view(), a.view()).unwrap().unwrap();
                prop_assert!(h >= ab && h >= ba);
                prop_assert_eq!(h == 0.0, a == b);
            }
        }
    }
}
