//! Pairwise significance tests between evaluation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::{paired_ttest_one_tailed, Direction, EvalReport, MetricError, TTest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    /// p < 0.01
    Strong,
    /// p < 0.05
    Weak,
    None,
    /// Zero variance in the differences; no p-value.
    Degenerate,
}

impl Significance {
    pub fn of(test: &TTest) -> Self {
        match test.p_value() {
            None => Self::Degenerate,
            Some(p) if p < 0.01 => Self::Strong,
            Some(p) if p < 0.05 => Self::Weak,
            Some(_) => Self::None,
        }
    }

    pub fn mark(self) -> &'static str {
        match self {
            Self::Strong => "**",
            Self::Weak => "*",
            Self::None => "",
            Self::Degenerate => "(degenerate)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTest {
    pub metric: String,
    pub direction: Direction,
    pub pairs: usize,
    /// Pairs dropped because either side was undefined.
    pub excluded: usize,
    pub test: Option<TTest>,
    pub significance: Option<Significance>,
}

/// Tests of model `a` against model `b`: Dice higher, Hausdorff lower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub dice: MetricTest,
    pub hausdorff: MetricTest,
}

type Key = (usize, String);

fn keyed(r: &EvalReport) -> BTreeMap<Key, (f64, Option<f64>)> {
    r.per_scan
        .iter()
        .map(|s| ((s.run, s.scan_id.clone()), (s.dice, s.hausdorff)))
        .collect()
}

fn metric_test(metric: &str, direction: Direction, pairs: Vec<(Option<f64>, Option<f64>)>) -> Result<MetricTest, MetricError> {
    let total = pairs.len();
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().filter_map(|(a, b)| Some((a?, b?))).unzip();
    let test = if x.len() >= 2 {
        Some(paired_ttest_one_tailed(&x, &y, direction)?)
    } else {
        None
    };
    Ok(MetricTest {
        metric: metric.to_string(),
        direction,
        pairs: x.len(),
        excluded: total - x.len(),
        significance: test.as_ref().map(Significance::of),
        test,
    })
}

/// Joins on `(run, scan_id)`, so row order is irrelevant. Both reports
/// must cover the same keys.
pub fn compare_pair(a_name: &str, a: &EvalReport, b_name: &str, b: &EvalReport) -> Result<Comparison, MetricError> {
    let (ka, kb) = (keyed(a), keyed(b));
    for (k, r, name) in [(&ka, a, a_name), (&kb, b, b_name)] {
        if k.len() != r.per_scan.len() {
            return Err(MetricError::ScanSetMismatch(format!("{name} has duplicate (run, scan) rows")));
        }
    }
    if let Some((run, id)) = ka.keys().find(|k| !kb.contains_key(*k)).or_else(|| kb.keys().find(|k| !ka.contains_key(*k))) {
        return Err(MetricError::ScanSetMismatch(format!("run {run} scan {id} is not in both {a_name} and {b_name}")));
    }
    let joined: Vec<_> = ka.values().zip(kb.values()).collect();
    Ok(Comparison {
        a: a_name.to_string(),
        b: b_name.to_string(),
        dice: metric_test(
            "dice",
            Direction::Greater,
            joined.iter().map(|(p, q)| (Some(p.0), Some(q.0))).collect(),
        )?,
        hausdorff: metric_test("hausdorff", Direction::Less, joined.iter().map(|(p, q)| (p.1, q.1)).collect())?,
    })
}

/// Every ordered pair of distinct reports.
pub fn compare_models(reports: &[(String, EvalReport)]) -> Result<Vec<Comparison>, MetricError> {
    let mut out = Vec::new();
    for (i, (na, a)) in reports.iter().enumerate() {
        for (j, (nb, b)) in reports.iter().enumerate() {
            if i != j {
                out.push(compare_pair(na, a, nb, b)?);
            }
        }
    }
    Ok(out)
}

fn cell(t: &MetricTest) -> String {
    match (&t.test, t.significance) {
        (Some(TTest::Computed { p_value, .. }), Some(s)) => format!("{p_value:.4}{}", s.mark()),
        (Some(TTest::Degenerate { .. }), _) => "degenerate".into(),
        _ => "n/a".into(),
    }
}

/// Markdown table with one row per ordered pair; `*` marks p < 0.05 and
/// `**` p < 0.01.
pub fn to_markdown(rows: &[Comparison]) -> String {
    let mut s = String::from("| a | b | Dice a > b (p) | Hausdorff a < b (p) |\n|---|---|---|---|\n");
    for c in rows {
        s += &format!("| {} | {} | {} | {} |\n", c.a, c.b, cell(&c.dice), cell(&c.hausdorff));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ScanScore;

    fn report(shift: f64, order_rev: bool) -> EvalReport {
        let mut rows = Vec::new();
        for run in 0..5 {
            for s in 0..4 {
                let base = 0.6 + 0.03 * s as f64 + 0.011 * ((run * 7 + s * 3) % 5) as f64;
                rows.push(ScanScore {
                    scan_id: format!("scan_{s}"),
                    run,
                    dice: base + shift,
                    hausdorff: Some(10.0 - 20.0 * (base + shift - 0.6) + 0.3 * ((run + s) % 3) as f64),
                });
            }
        }
        if order_rev {
            rows.reverse();
        }
        EvalReport::new(rows, 5)
    }

    #[test]
    fn self_comparison_is_degenerate() {
        let r = report(0.0, false);
        let c = compare_pair("a", &r, "a", &r).unwrap();
        assert_eq!(c.dice.significance, Some(Significance::Degenerate));
        assert_eq!(c.hausdorff.significance, Some(Significance::Degenerate));
    }

    #[test]
    fn shifted_dice_is_significant_in_shift_direction() {
        let base = report(0.0, false);
        let better = report(0.05, false);
        let mut noisy = better.clone();
        for (k, row) in noisy.per_scan.iter_mut().enumerate() {
            row.dice += 0.004 * ((k % 3) as f64 - 1.0);
        }
        let c = compare_pair("better", &noisy, "base", &base).unwrap();
        assert!(c.dice.test.as_ref().unwrap().p_value().unwrap() < 0.05);
        assert_eq!(c.dice.pairs, 20);
        let rev = compare_pair("base", &base, "better", &noisy).unwrap();
        assert!(rev.dice.test.as_ref().unwrap().p_value().unwrap() > 0.5);
    }

    #[test]
    fn join_ignores_row_order() {
        let a = report(0.0, false);
        let b = report(0.0, true);
        let c = compare_pair("a", &a, "b", &b).unwrap();
        assert_eq!(c.dice.significance, Some(Significance::Degenerate));
    }

    #[test]
    fn scan_set_mismatch() {
        let a = report(0.0, false);
        let mut b = report(0.0, false);
        b.per_scan[0].scan_id = "other".into();
        assert!(matches!(compare_pair("a", &a, "b", &b), Err(MetricError::ScanSetMismatch(_))));
        b.per_scan.pop();
        assert!(compare_pair("a", &a, "b", &b).is_err());
    }

    #[test]
    fn all_ordered_pairs_and_marks() {
        let rs = vec![("x".to_string(), report(0.0, false)), ("y".to_string(), report(0.02, true))];
        let rows = compare_models(&rs).unwrap();
        assert_eq!(rows.len(), 2);
        let md = to_markdown(&rows);
        assert_eq!(md.lines().count(), 4);
        assert_eq!(Significance::Strong.mark(), "**");
        assert_eq!(Significance::Weak.mark(), "*");
    }
}
