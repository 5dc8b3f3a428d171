//! Sequential pipeline execution with repeats and artifact layout:
//!
//! ```text
//! <root>/<name>-<timestamp>/
//!   config.toml  provenance.json  split.json  summary.json  eval.json  eval.csv
//!   test_dice.{svg,png}  loss.{svg,png}
//!   run-000/ pretrain/ finetune/ eval.json refine.json ablation.{json,md} ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, DataSource, ExperimentConfig, StageName};
use super::plot::{self, Bar};
use super::{cache_root, resolve_cached, ExperimentError};
use crate::dataset::{build_index, DatasetIndex, Split, SplitSpec};
use crate::finetune::{evaluate, predict_scan, predict_volume, run_finetuning, scans_in};
use crate::metrics::{dice_score_3d, mean_std, score_scan, Aggregate, EvalReport, ScanScore};
use crate::nn::{Checkpoint, SegmentationModel};
use crate::phantom::make_phantom_with;
use crate::pretrain::{load_pretrained, run_pretraining, RunOutput};
use crate::propagate::{
    ablation_grid, informative_slices, informative_slices_of, propagate_volume, select_reference, AblationReport,
    PseudoVideo, SliceSource,
};
use crate::refine::{refine_volume, summarize, RefineSummary, SliceRefinement};
use crate::segmenter::Frame;
use crate::train::EpochRecord;
use crate::volume::{nifti_io, rescale_to_u8, to_mask_stack, window_level, SliceFraction, Volume};

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Windowed volumes, their slice index and the scan-level split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub volumes: Vec<Volume>,
    pub index: DatasetIndex,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn volumes_in(&self, split: Split) -> Vec<&Volume> {
        self.volumes
            .iter()
            .filter(|v| self.split.split_of(&v.scan_id) == Some(split))
            .collect()
    }
}

fn raw_volumes(cfg: &DataConfig) -> Result<Vec<Volume>> {
    match cfg.source {
        DataSource::Phantom => (0..cfg.phantoms as u64)
            .map(|i| Ok(make_phantom_with(&cfg.phantom, cfg.phantom_seed + i)?.volume))
            .collect(),
        DataSource::Nifti => {
            let root = resolve_cached(cfg.root.as_deref().ok_or(ExperimentError::MissingInput("data.root"))?);
            let mut paths: Vec<PathBuf> = fs::read_dir(root.join("images"))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let n = p.to_string_lossy();
                    n.ends_with(".nii") || n.ends_with(".nii.gz")
                })
                .collect();
            paths.sort();
            paths.iter().map(|p| Ok(nifti_io::load_volume(p)?)).collect()
        }
    }
}

/// Loads, windows, slices and splits the configured data.
pub fn load_dataset(cfg: &DataConfig, label_fraction: f64) -> Result<Dataset> {
    let volumes: Vec<Volume> = raw_volumes(cfg)?
        .iter()
        .map(|v| window_level(v, cfg.window_center, cfg.window_width))
        .collect::<Result<_, _>>()?;
    let index = build_index(&volumes, SliceFraction::new(cfg.slice_fraction)?, cfg.resolution)?;
    let ids: Vec<String> = volumes.iter().map(|v| v.scan_id.clone()).collect();
    let split = SplitSpec::random(&ids, cfg.split, cfg.split_seed, label_fraction)?;
    let index = index.with_split(&split)?;
    Ok(Dataset { volumes, index, split })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub git_commit: Option<String>,
    pub config_hash: String,
    pub created: String,
}

fn git_commit() -> Option<String> {
    let out = Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Fresh `<root>/<name>-<timestamp>` directory, suffixed when taken.
pub fn create_run_dir(root: &Path, name: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{name}-{stamp}");
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub run: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_fallbacks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagate: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationReport>,
}

/// Mean ± population std of a per-repeat statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        (!xs.is_empty()).then(|| {
            let (mean, std) = mean_std(xs);
            Self { mean, std, n: xs.len() }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub config_hash: String,
    pub repeats: Vec<RepeatSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dice: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_hausdorff: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_dice: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagated_dice: Option<MeanStd>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
    /// Test scores of every repeat, when an evaluate stage ran.
    pub report: Option<EvalReport>,
}

/// Runs the configured stages `repeat` times under a fresh timestamped
/// directory in `root` (default: `output`, else `$POLYCL_CACHE/runs`).
/// A failing stage aborts the run; artifacts written so far are kept and
/// the error is recorded in `error.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, root: Option<&Path>) -> Result<ExperimentOutcome> {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| cache_root().join("runs"));
    let dir = create_run_dir(&root, &cfg.name)?;
    match run_in_dir(cfg, &dir) {
        Ok(o) => Ok(o),
        Err(e) => {
            fs::write(dir.join("error.txt"), format!("{e}\n"))?;
            Err(e)
        }
    }
}

/// Like [`run_experiment`] but into an existing directory.
pub fn run_in_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    let hash = cfg.hash();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let provenance = Provenance {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        git_commit: git_commit(),
        config_hash: hash.clone(),
        created: chrono::Local::now().to_rfc3339(),
    };
    fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;

    let data = load_dataset(&cfg.data, cfg.finetune.label_fraction)?;
    data.split.save(&dir.join("split.json"))?;
    log::info!("{} records from {} scans", data.index.len(), data.volumes.len());

    let mut repeats = Vec::new();
    let mut rows = Vec::new();
    let mut refined = Vec::new();
    let mut propagated = Vec::new();
    let mut losses = Vec::new();
    for r in 0..cfg.repeat {
        let rc = cfg.for_repeat(r);
        let run_dir = dir.join(format!("run-{r:03}"));
        fs::create_dir_all(&run_dir)?;
        let out = run_one(&rc, &hash, &data, &run_dir, r)?;
        rows.extend(out.scores);
        refined.extend(out.refined_dice);
        propagated.extend(out.propagate.map(|a| a.mean_dice));
        if let Some(h) = out.loss_curve {
            losses.push((format!("run {r}"), h));
        }
        repeats.push(out.summary);
    }

    let report = (!rows.is_empty()).then(|| EvalReport::new(rows, cfg.repeat));
    if let Some(rep) = &report {
        rep.save_json(&dir.join("eval.json"))?;
        rep.write_csv(fs::File::create(dir.join("eval.csv"))?)?;
    }
    let per_run = |f: &dyn Fn(&Aggregate) -> Option<f64>| -> Vec<f64> {
        repeats.iter().filter_map(|s| s.test.as_ref().and_then(f)).collect()
    };
    let test_dice = per_run(&|a| Some(a.mean_dice));
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        config_hash: hash,
        test_dice: MeanStd::of(&test_dice),
        test_hausdorff: MeanStd::of(&per_run(&|a| a.mean_hd)),
        refined_dice: MeanStd::of(&refined),
        propagated_dice: MeanStd::of(&propagated),
        repeats,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    if !test_dice.is_empty() {
        let bars: Vec<Bar> = test_dice
            .iter()
            .enumerate()
            .map(|(r, &v)| Bar::new(format!("run {r}"), v, None))
            .chain(summary.test_dice.map(|m| Bar::new("mean", m.mean, Some(m.std))))
            .collect();
        plot::save_bar_chart(dir, "test_dice", "Test Dice per run", &bars)?;
    }
    if !losses.is_empty() {
        plot::save_line_chart(dir, "loss", "Training loss per epoch", &losses)?;
    }
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        summary,
        report,
    })
}

struct RepeatOutput {
    summary: RepeatSummary,
    scores: Vec<ScanScore>,
    refined_dice: Option<f64>,
    propagate: Option<Aggregate>,
    loss_curve: Option<Vec<f64>>,
}

fn curve(history: &[EpochRecord]) -> Vec<f64> {
    history.iter().map(|h| h.mean_loss).collect()
}

fn run_one(cfg: &ExperimentConfig, hash: &str, data: &Dataset, dir: &Path, run: usize) -> Result<RepeatOutput> {
    let has = |s| cfg.stages.contains(&s);
    let output = |name: &str| RunOutput {
        dir: Some(dir.join(name)),
        config_hash: hash.to_string(),
        write_trace: false,
    };
    let mut summary = RepeatSummary {
        run,
        seed: cfg.seed,
        pretrain_final_loss: None,
        triplet_fallbacks: None,
        best_val_dice: None,
        test: None,
        refine: None,
        propagate: None,
        ablation: None,
    };
    let mut loss_curve = None;

    let mut checkpoint: Option<Checkpoint> = None;
    if has(StageName::Pretrain) {
        log::info!("run {run}: pretrain");
        let res = run_pretraining(&cfg.pretrain, &cfg.model, &data.index, &output("pretrain"))?;
        summary.pretrain_final_loss = res.history.last().map(|h| h.mean_loss);
        summary.triplet_fallbacks = Some(res.fallbacks);
        loss_curve = Some(curve(&res.history));
        checkpoint = Some(res.final_checkpoint);
    } else if let Some(p) = &cfg.checkpoint {
        checkpoint = Some(load_pretrained(&resolve_cached(p), &cfg.model)?);
    }

    let mut model: Option<SegmentationModel> = None;
    if has(StageName::Finetune) {
        log::info!("run {run}: finetune");
        let res = run_finetuning(&cfg.finetune, &cfg.model, checkpoint.as_ref(), &data.index, &output("finetune"))?;
        summary.best_val_dice = res.best_val_dice;
        if loss_curve.is_none() {
            loss_curve = Some(curve(&res.history));
        }
        model = Some(res.best_model);
    }

    let mut scores = Vec::new();
    if has(StageName::Evaluate) {
        let m = model.as_mut().ok_or(ExperimentError::MissingInput("fine-tuned model"))?;
        scores = evaluate(m, &data.index, Split::Test, run)?;
        let rep = EvalReport::new(scores.clone(), 1);
        rep.save_json(&dir.join("eval.json"))?;
        rep.write_csv(fs::File::create(dir.join("eval.csv"))?)?;
        summary.test = Some(rep.aggregate);
    }

    let mut refined_dice = None;
    if has(StageName::Refine) {
        let m = model.as_mut().ok_or(ExperimentError::MissingInput("fine-tuned model"))?;
        let (summ, rows) = refine_test_scans(cfg, m, &data.index, run)?;
        let rep = EvalReport::new(rows, 1);
        rep.save_json(&dir.join("refine_eval.json"))?;
        refined_dice = Some(rep.aggregate.mean_dice);
        summary.refine = summ;
    }

    let mut propagate = None;
    if has(StageName::Propagate) {
        let vols = data.volumes_in(Split::Test);
        let spec = cfg.propagate.backend_spec();
        if cfg.propagate.write_frames {
            for v in &vols {
                if let Some(label) = &v.label {
                    let set = informative_slices(&to_mask_stack(label));
                    PseudoVideo::build(v, &set).write_png_frames(&dir.join("frames").join(&v.scan_id))?;
                }
            }
        }
        match cfg.propagate.source {
            SliceSource::GroundTruth => {
                let owned: Vec<Volume> = vols.into_iter().cloned().collect();
                let rep = ablation_grid(&owned, &cfg.propagate.counts, &cfg.propagate.positions, &spec)?;
                fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rep)?)?;
                fs::write(dir.join("ablation.md"), rep.to_markdown())?;
                summary.ablation = Some(rep);
            }
            SliceSource::Coarse => {
                let m = model.as_mut().ok_or(ExperimentError::MissingInput("fine-tuned model"))?;
                let mut rows = Vec::new();
                for v in vols {
                    let label = v
                        .label
                        .as_ref()
                        .ok_or_else(|| crate::propagate::PropagateError::NoMaskSource(v.scan_id.clone()))?;
                    let truth = to_mask_stack(label);
                    let coarse = predict_volume(m, v, cfg.data.resolution)?;
                    let set = informative_slices_of(v, SliceSource::Coarse, Some(&coarse))?;
                    let r = select_reference(&set)?;
                    let seed = coarse.index_axis(Axis(0), r).to_owned();
                    let mut b = spec.build(Some(&truth))?;
                    let pred = propagate_volume(v, &set, &[(r, seed)], b.as_mut())?;
                    rows.push(score_scan(&v.scan_id, run, pred.view(), truth.view())?);
                    log::info!("{}: propagated Dice {:.4}", v.scan_id, dice_score_3d(pred.view(), truth.view())?);
                }
                let rep = EvalReport::new(rows, 1);
                rep.save_json(&dir.join("propagate_eval.json"))?;
                summary.propagate = Some(rep.aggregate.clone());
                propagate = Some(rep.aggregate);
            }
        }
    }

    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(RepeatOutput {
        summary,
        scores,
        refined_dice,
        propagate,
        loss_curve,
    })
}

/// Refines the model's test predictions slice by slice with box prompts.
fn refine_test_scans(
    cfg: &ExperimentConfig,
    model: &mut SegmentationModel,
    index: &DatasetIndex,
    run: usize,
) -> Result<(Option<RefineSummary>, Vec<ScanScore>)> {
    let spec = cfg.refine.backend_spec();
    let rcfg = cfg.refine.refine_config();
    let mut all: Vec<SliceRefinement> = Vec::new();
    let mut rows = Vec::new();
    for (scan, ids) in scans_in(index, Split::Test) {
        let (coarse, truth) = predict_scan(model, index, &ids)?;
        // Frame indices are positions in the scan's record stack, which is
        // what the truth-backed backends index into.
        let frames: Vec<Frame> = ids
            .iter()
            .enumerate()
            .map(|(k, &i)| Frame {
                index: k,
                pixels: rescale_to_u8(index.record(i).pixels.view()),
            })
            .collect();
        let mut backend = spec.build(Some(&truth))?;
        let out = refine_volume(&frames, &coarse, backend.as_mut(), &rcfg, Some(&truth))?;
        rows.push(score_scan(&scan, run, out.refined.view(), truth.view())?);
        all.extend(out.slices);
    }
    Ok((summarize(&all), rows))
}
