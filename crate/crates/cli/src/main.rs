use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use polycl_core::dataset::Split;
use polycl_core::experiment::compare::{compare_models, to_markdown};
use polycl_core::experiment::runner::create_run_dir;
use polycl_core::experiment::{cache_root, load_dataset, run_experiment, run_sweep, ExperimentConfig};
use polycl_core::finetune::{evaluate, load_finetuned, run_finetuning, Init};
use polycl_core::metrics::{score_scan, EvalReport};
use polycl_core::nn::Checkpoint;
use polycl_core::phantom::{make_phantom_with, PhantomConfig};
use polycl_core::pretrain::{load_pretrained, run_pretraining, RunOutput};
use polycl_core::propagate::{informative_slices, propagate_volume, seed_positions, PseudoVideo, SeedPosition};
use polycl_core::refine::{refine_volume, summarize, RefineConfig};
use polycl_core::segmenter::{BackendKind, BackendSpec, Frame, NoiseModel};
use polycl_core::triplet::Strategy;
use polycl_core::volume::nifti_io::{load_mask, save_mask, save_volume};
use polycl_core::volume::{
    from_mask_stack, load_volume, rescale_to_u8, to_mask_stack, window_level, MaskStack, Volume, DEFAULT_WINDOW_CENTER,
    DEFAULT_WINDOW_WIDTH,
};

#[derive(Parser)]
#[command(name = "polycl", version, about = "Contrastive pre-training and segmentation experiments on CT slices")]
struct Cli {
    /// Log level filter, e.g. warn, info, debug.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage declared in an experiment config.
    Run(RunArgs),
    /// Contrastive pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning, then test-split evaluation.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint.
    Evaluate(EvaluateArgs),
    /// Refine a coarse mask with box prompts.
    Refine(RefineArgs),
    /// Propagate seed slice masks through a volume.
    Propagate(PropagateArgs),
    /// Expand and run the sweep section of a config.
    Sweep(SweepArgs),
    /// One-tailed paired t-tests between evaluation reports.
    Compare(CompareArgs),
    /// Write synthetic phantom volumes as NIfTI.
    PhantomGen(PhantomArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of the timestamped run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Experiment config supplying data and model sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// NIfTI dataset root with images/ and labels/; phantoms otherwise.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(root) = &self.data_root {
            cfg.data.source = polycl_core::experiment::config::DataSource::Nifti;
            cfg.data.root = Some(root.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Temperature; defaults to 1 / batch size.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the sampled triplets of every epoch.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Pre-trained checkpoint; random init when absent.
    #[arg(long)]
    from_checkpoint: Option<PathBuf>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// EvalReport JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, default_value = "oracle")]
    backend: BackendKind,
    /// Dilation radius of the noisy oracle.
    #[arg(long, default_value_t = NoiseModel::default().dilate_radius)]
    dilate_radius: usize,
    /// Extra error radius per propagation step of the noisy oracle.
    #[arg(long, default_value_t = NoiseModel::default().drift)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Model weights for external backends.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl BackendArgs {
    fn spec(&self) -> BackendSpec {
        BackendSpec {
            backend: self.backend,
            noise: NoiseModel {
                dilate_radius: self.dilate_radius,
                drift: self.drift,
                seed: self.noise_seed,
            },
            weights: self.weights.clone(),
        }
    }
}

#[derive(Args)]
struct VolumeArgs {
    /// CT image; a label under ../labels/ with the same name is used as
    /// ground truth when present.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW_CENTER)]
    window_center: f32,
    #[arg(long, default_value_t = DEFAULT_WINDOW_WIDTH)]
    window_width: f32,
}

impl VolumeArgs {
    fn load(&self) -> Result<Volume> {
        let raw = load_volume(&self.volume).with_context(|| format!("loading {}", self.volume.display()))?;
        Ok(window_level(&raw, self.window_center, self.window_width)?)
    }
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    volume: VolumeArgs,
    /// Coarse mask NIfTI with the volume's shape.
    #[arg(long)]
    coarse: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value_t = RefineConfig::default().min_area)]
    min_area: usize,
    #[arg(long, default_value_t = RefineConfig::default().margin)]
    margin: usize,
    /// Per-slice JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Refined mask NIfTI.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PropagateArgs {
    #[command(flatten)]
    volume: VolumeArgs,
    /// Coarse mask supplying the informative slices and seed masks;
    /// the volume's label is used otherwise.
    #[arg(long)]
    coarse: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Number of seed slices.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long, default_value = "middle")]
    position: SeedPosition,
    /// Directory for the pseudo-video PNG frames.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Reports as `name=path.json`, or a path named after its file.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<String>,
    /// JSON output of every comparison.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    /// H,W,D
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    #[arg(long)]
    output: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match cli.command {
        Command::Run(a) => run(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Refine(a) => refine(a),
        Command::Propagate(a) => propagate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::PhantomGen(a) => phantom_gen(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(r) = a.repeat {
        cfg.repeat = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = run_experiment(&cfg, a.output.as_deref())?;
    print_json(&out.summary)?;
    eprintln!("artifacts: {}", out.dir.display());
    Ok(())
}

fn output_dir(explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match explicit {
        Some(d) => {
            std::fs::create_dir_all(&d)?;
            Ok(d)
        }
        None => Ok(create_run_dir(&cache_root().join("runs"), name)?),
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.data.load()?;
    let p = &mut cfg.pretrain;
    p.strategy = a.strategy.unwrap_or(p.strategy);
    p.epochs = a.epochs.unwrap_or(p.epochs);
    p.batch_size = a.batch_size.unwrap_or(p.batch_size);
    p.lr = a.lr.unwrap_or(p.lr);
    p.tau = a.tau.or(p.tau);
    p.proj_dim = a.proj_dim.unwrap_or(p.proj_dim);
    p.seed = a.seed.unwrap_or(p.seed);
    p.validate()?;
    let dir = output_dir(a.output, "pretrain")?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let data = load_dataset(&cfg.data, cfg.finetune.label_fraction)?;
    let out = RunOutput {
        dir: Some(dir.clone()),
        config_hash: cfg.hash(),
        write_trace: a.trace,
    };
    let res = run_pretraining(&cfg.pretrain, &cfg.model, &data.index, &out)?;
    print_json(&serde_json::json!({
        "epochs": res.history.len(),
        "final_loss": res.history.last().map(|h| h.mean_loss),
        "fallbacks": res.fallbacks,
        "skipped": res.skipped,
        "checkpoint": dir.join("final.ckpt"),
    }))
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = a.data.load()?;
    let f = &mut cfg.finetune;
    f.label_fraction = a.label_fraction.unwrap_or(f.label_fraction);
    f.epochs = a.epochs.unwrap_or(f.epochs);
    f.batch_size = a.batch_size.unwrap_or(f.batch_size);
    f.lr = a.lr.unwrap_or(f.lr);
    f.seed = a.seed.unwrap_or(f.seed);
    f.init = if a.from_checkpoint.is_some() { Init::FromCheckpoint } else { Init::Random };
    f.validate()?;
    let ckpt = a
        .from_checkpoint
        .as_deref()
        .map(|p| load_pretrained(p, &cfg.model))
        .transpose()?;
    let dir = output_dir(a.output, "finetune")?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let data = load_dataset(&cfg.data, cfg.finetune.label_fraction)?;
    let out = RunOutput {
        dir: Some(dir.clone()),
        config_hash: cfg.hash(),
        write_trace: false,
    };
    let mut res = run_finetuning(&cfg.finetune, &cfg.model, ckpt.as_ref(), &data.index, &out)?;
    let report = EvalReport::new(evaluate(&mut res.best_model, &data.index, Split::Test, 0)?, 1);
    report.save_json(&dir.join("eval.json"))?;
    print_json(&serde_json::json!({
        "labeled_slices": res.labeled_slices,
        "best_val_dice": res.best_val_dice,
        "test": report.aggregate,
        "checkpoint": dir.join("best.ckpt"),
    }))
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}, expected train, val or test"),
    })
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let cfg = a.data.load()?;
    let split = parse_split(&a.split)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut model = load_finetuned(&ck)?;
    let data = load_dataset(&cfg.data, cfg.finetune.label_fraction)?;
    let report = EvalReport::new(evaluate(&mut model, &data.index, split, 0)?, 1);
    if let Some(p) = &a.report {
        report.save_json(p)?;
    }
    print_json(&report.aggregate)
}

fn truth_of(v: &Volume) -> Option<MaskStack> {
    v.label.as_ref().map(to_mask_stack)
}

fn load_stack(path: &Path, v: &Volume) -> Result<MaskStack> {
    let m = load_mask(path)?;
    let [h, w, d] = v.shape();
    if m.dim() != (h, w, d) {
        bail!("{}: mask shape {:?} differs from volume shape {:?}", path.display(), m.dim(), (h, w, d));
    }
    Ok(to_mask_stack(&m))
}

fn refine(a: RefineArgs) -> Result<()> {
    let v = a.volume.load()?;
    let coarse = load_stack(&a.coarse, &v)?;
    let truth = truth_of(&v);
    let frames: Vec<Frame> = (0..v.depth())
        .map(|k| Frame {
            index: k,
            pixels: rescale_to_u8(v.slice(k)),
        })
        .collect();
    let mut backend = a.backend.spec().build(truth.as_ref())?;
    let cfg = RefineConfig {
        min_area: a.min_area,
        margin: a.margin,
    };
    let out = refine_volume(&frames, &coarse, backend.as_mut(), &cfg, truth.as_ref())?;
    if let Some(p) = &a.output {
        save_mask(p, &from_mask_stack(&out.refined), v.spacing)?;
    }
    let summary = summarize(&out.slices);
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&serde_json::json!({"summary": summary, "slices": out.slices}))?)?;
    }
    print_json(&serde_json::json!({
        "slices_with_boxes": out.slices.iter().filter(|s| !s.boxes.is_empty()).count(),
        "summary": summary,
    }))
}

fn propagate(a: PropagateArgs) -> Result<()> {
    let v = a.volume.load()?;
    let truth = truth_of(&v);
    let source = match &a.coarse {
        Some(p) => load_stack(p, &v)?,
        None => truth.clone().context("no label next to the volume; pass --coarse")?,
    };
    let set = informative_slices(&source);
    let at = seed_positions(set.len(), a.seeds, a.position)?;
    let seeds: Vec<_> = at
        .iter()
        .map(|&p| (set[p], source.index_axis(Axis(0), set[p]).to_owned()))
        .collect();
    if let Some(dir) = &a.frames {
        PseudoVideo::build(&v, &set).write_png_frames(dir)?;
    }
    let mut backend = a.backend.spec().build(truth.as_ref())?;
    let pred = propagate_volume(&v, &set, &seeds, backend.as_mut())?;
    if let Some(p) = &a.output {
        save_mask(p, &from_mask_stack(&pred), v.spacing)?;
    }
    let score = truth
        .as_ref()
        .map(|t| score_scan(&v.scan_id, 0, pred.view(), t.view()))
        .transpose()?;
    let report = serde_json::json!({
        "scan_id": v.scan_id,
        "informative_slices": set,
        "seed_slices": seeds.iter().map(|s| s.0).collect::<Vec<_>>(),
        "score": score,
    });
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&report)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let root = a
        .output
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| cache_root().join("runs"));
    let (dir, rows) = run_sweep(&cfg, &root)?;
    for r in &rows {
        let d = r.summary.test_dice.map(|m| format!("{:.4} ± {:.4}", m.mean, m.std));
        println!("{}: {}", r.label, d.unwrap_or_else(|| "n/a".into()));
    }
    eprintln!("artifacts: {}", dir.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|arg| {
            let (name, path) = match arg.split_once('=') {
                Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                None => {
                    let p = PathBuf::from(arg);
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (stem, p)
                }
            };
            let r = EvalReport::load_json(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok((name, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_models(&reports)?;
    if let Some(p) = &a.output {
        std::fs::write(p, serde_json::to_string_pretty(&rows)?)?;
    }
    print!("{}", to_markdown(&rows));
    Ok(())
}

fn phantom_gen(a: PhantomArgs) -> Result<()> {
    let mut cfg = PhantomConfig::default();
    if let Some(s) = &a.shape {
        let [h, w, d] = s[..] else {
            bail!("--shape takes H,W,D");
        };
        cfg.shape = [h, w, d];
    }
    for i in 0..a.count as u64 {
        let p = make_phantom_with(&cfg, a.seed + i)?;
        let (img, _) = save_volume(&a.output, &p.volume)?;
        log::info!("wrote {}", img.display());
    }
    println!("{}", a.output.display());
    Ok(())
}
