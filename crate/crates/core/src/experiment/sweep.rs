//! Sweep expansion into child configs.
//!
//! Axes form a cartesian grid. Pairing rows vary several keys jointly; a
//! key named by the rows is taken from the rows only, so an axis on that
//! key is replaced by them. Every row is crossed with the remaining axes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use super::config::{set_dotted, ExperimentConfig, SchemaErrors, SweepConfig};
use super::runner::{create_run_dir, run_in_dir, ExperimentSummary};
use super::{resolve_cached, ExperimentError};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepVariant {
    /// `key=value` pairs joined by commas.
    pub label: String,
    pub overrides: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(&key, inner, out),
            other => out.push((key, other.clone())),
        }
    }
}

#[derive(Deserialize)]
struct PairingFile {
    pairs: Vec<toml::Table>,
}

fn pairing_rows(sweep: &SweepConfig) -> Result<Vec<Vec<(String, Value)>>, SchemaErrors> {
    let mut tables = sweep.pairs.clone();
    if let Some(p) = &sweep.pairing_file {
        let path = resolve_cached(p);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| SchemaErrors(vec![format!("sweep.pairing_file: {}: {e}", path.display())]))?;
        let file: PairingFile =
            toml::from_str(&text).map_err(|e| SchemaErrors(vec![format!("sweep.pairing_file: {}", e.message().trim())]))?;
        tables.extend(file.pairs);
    }
    Ok(tables
        .iter()
        .map(|t| {
            let mut row = Vec::new();
            flatten("", t, &mut row);
            row
        })
        .collect())
}

/// Child configs of `base.sweep`, each validated; the `sweep` section is
/// removed from the children.
pub fn expand_sweep(base: &ExperimentConfig) -> Result<Vec<SweepVariant>, SchemaErrors> {
    let sweep = base
        .sweep
        .clone()
        .ok_or_else(|| SchemaErrors(vec!["sweep: section missing".into()]))?;
    let rows = pairing_rows(&sweep)?;
    let mut errors = Vec::new();
    let mut paired_keys: Vec<String> = rows.iter().flatten().map(|(k, _)| k.clone()).collect();
    paired_keys.sort();
    paired_keys.dedup();
    for row in &rows {
        for k in &paired_keys {
            if !row.iter().any(|(rk, _)| rk == k) {
                errors.push(format!("sweep.pairs: every row must set {k}"));
            }
        }
    }

    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    let mut flat = Vec::new();
    flatten("", &sweep.axes, &mut flat);
    for (k, v) in flat {
        match v {
            Value::Array(vals) if !vals.is_empty() => {
                if !paired_keys.contains(&k) {
                    axes.push((k, vals));
                }
            }
            _ => errors.push(format!("sweep.axes.{k}: must be a nonempty array")),
        }
    }
    errors.dedup();
    if !errors.is_empty() {
        return Err(SchemaErrors(errors));
    }

    let mut combos: Vec<Vec<(String, Value)>> = if rows.is_empty() { vec![Vec::new()] } else { rows };
    for (k, vals) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }

    let mut base_table = toml::Table::try_from(base).expect("config serializes");
    base_table.remove("sweep");
    let mut variants = Vec::new();
    for overrides in combos {
        let mut t = base_table.clone();
        for (k, v) in &overrides {
            set_dotted(&mut t, k, v.clone());
        }
        let label = overrides
            .iter()
            .map(|(k, v)| format!("{k}={}", render(v)))
            .collect::<Vec<_>>()
            .join(",");
        let text = toml::to_string(&t).expect("table serializes");
        let config = ExperimentConfig::from_toml_str(&text)
            .map_err(|e| SchemaErrors(e.0.into_iter().map(|m| format!("[{label}] {m}")).collect()))?;
        variants.push(SweepVariant { label, overrides, config });
    }
    Ok(variants)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub dir: String,
    pub summary: ExperimentSummary,
}

/// Runs every variant sequentially under one sweep directory and writes
/// `sweep.json` plus a markdown table of test Dice.
pub fn run_sweep(base: &ExperimentConfig, root: &Path) -> Result<(std::path::PathBuf, Vec<SweepRow>), ExperimentError> {
    let variants = expand_sweep(base)?;
    let dir = create_run_dir(root, &format!("{}-sweep", base.name))?;
    std::fs::write(dir.join("config.toml"), base.to_toml())?;
    let mut rows = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        log::info!("sweep variant {i}: {}", v.label);
        let child = dir.join(format!("variant-{i:03}"));
        let out = run_in_dir(&v.config, &child)?;
        rows.push(SweepRow {
            label: v.label.clone(),
            dir: child.file_name().expect("named").to_string_lossy().into_owned(),
            summary: out.summary,
        });
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    let mut md = String::from("| variant | test Dice |\n|---|---|\n");
    for r in &rows {
        let d = r
            .summary
            .test_dice
            .map(|m| format!("{:.4} ± {:.4}", m.mean, m.std))
            .unwrap_or_else(|| "n/a".into());
        md += &format!("| {} | {d} |\n", r.label);
    }
    std::fs::write(dir.join("sweep.md"), md)?;
    Ok((dir, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
[sweep.axes]
"pretrain.batch_size" = [10, 20, 30]
"pretrain.proj_dim" = [128, 256, 512]
"#;

    #[test]
    fn plain_grid_is_cartesian() {
        let cfg = ExperimentConfig::from_toml_str(GRID).unwrap();
        let v = expand_sweep(&cfg).unwrap();
        assert_eq!(v.len(), 9);
        assert!(v.iter().all(|x| x.config.sweep.is_none()));
        assert_eq!(v[4].config.pretrain.batch_size, 20);
        assert_eq!(v[4].config.pretrain.proj_dim, 256);
        assert_eq!(v[4].config.pretrain.temperature(), 1.0 / 20.0);
    }

    #[test]
    fn pairing_file_ties_batch_and_tau() {
        let dir = tempfile::tempdir().unwrap();
        let pairing = dir.path().join("pairs.toml");
        std::fs::write(
            &pairing,
            "[[pairs]]\npretrain = { batch_size = 10, tau = 0.1 }\n[[pairs]]\npretrain = { batch_size = 20, tau = 0.05 }\n[[pairs]]\npretrain = { batch_size = 30, tau = 0.0333 }\n",
        )
        .unwrap();
        let text = format!("[sweep]\npairing_file = {:?}\n{GRID}", pairing.to_str().unwrap());
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let v = expand_sweep(&cfg).unwrap();
        assert_eq!(v.len(), 9);
        for x in &v {
            let p = &x.config.pretrain;
            let expected = match p.batch_size {
                10 => 0.1,
                20 => 0.05,
                _ => 0.0333,
            };
            assert_eq!(p.tau, Some(expected));
        }
        let mut dims: Vec<usize> = v.iter().map(|x| x.config.pretrain.proj_dim).collect();
        dims.sort();
        dims.dedup();
        assert_eq!(dims, vec![128, 256, 512]);
    }

    #[test]
    fn invalid_variants_are_reported() {
        let cfg = ExperimentConfig::from_toml_str("[sweep.axes]\n\"pretrain.batch_size\" = [0]\n").unwrap();
        let err = expand_sweep(&cfg).unwrap_err();
        assert!(err.0[0].contains("pretrain.batch_size=0"), "{err}");
        let cfg = ExperimentConfig::from_toml_str("[sweep.axes]\n\"pretrain.batch_size\" = 3\n").unwrap();
        assert!(expand_sweep(&cfg).is_err());
    }

    #[test]
    fn rows_must_share_keys() {
        let cfg = ExperimentConfig::from_toml_str(
            "[[sweep.pairs]]\n\"pretrain.batch_size\" = 10\n[[sweep.pairs]]\n\"pretrain.tau\" = 0.1\n",
        )
        .unwrap();
        assert!(expand_sweep(&cfg).is_err());
    }
}
