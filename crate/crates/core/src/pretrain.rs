//! Contrastive pre-training of encoder + projection head on sampled
//! triplets.
//!
//! Per triplet the loss is `softplus((s⁻ - s⁺) / τ)` with `s` the cosine
//! similarity, which is the two-way softmax cross-entropy written without
//! explicit exponentials. The batch loss is the mean over triplets.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetIndex;
use crate::nn::optim::AdamConfig;
use crate::nn::{
    Adam, Checkpoint, CheckpointError, ContrastiveModel, CosineWarmRestarts, EncoderConfig,
    ModelError, Parameterized, Stage,
};
use crate::rng;
use crate::train::{image_batch, training_view, write_metrics, EpochRecord};
use crate::triplet::{check_compatible, write_trace, EpochSampler, SamplerError, Strategy, Triplet};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0} embedding has zero norm, cosine similarity undefined")]
    ZeroNorm(&'static str),
    #[error("temperature must be finite and positive, got {0}")]
    InvalidTemperature(f64),
    #[error("embedding lengths differ: {0}, {1}, {2}")]
    LengthMismatch(usize, usize, usize),
    #[error("non-finite loss (norms {norms:?}, tau {tau})")]
    NonFinite { norms: [f64; 3], tau: f64 },
}

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid pre-training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("epoch {epoch}: {source}")]
    Loss {
        epoch: usize,
        #[source]
        source: LossError,
    },
    #[error("no triplets could be sampled from the training slices")]
    NoTriplets,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Defaults to `1 / batch_size` when absent.
    pub tau: Option<f64>,
    pub restart_period: usize,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Mixed,
            epochs: 100,
            batch_size: 20,
            lr: 1e-4,
            tau: None,
            restart_period: 5,
            proj_dim: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn temperature(&self) -> f64 {
        self.tau.unwrap_or(1.0 / self.batch_size as f64)
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        let tau = self.temperature();
        if !(tau.is_finite() && tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.restart_period == 0 {
            return bad("restart_period must be >= 1");
        }
        if self.proj_dim == 0 {
            return bad("proj_dim must be >= 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineWarmRestarts {
        CosineWarmRestarts::new(self.lr, self.restart_period as f64)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn check_inputs(z: &[f64], zp: &[f64], zn: &[f64], tau: f64) -> Result<[f64; 3], LossError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    if z.len() != zp.len() || z.len() != zn.len() {
        return Err(LossError::LengthMismatch(z.len(), zp.len(), zn.len()));
    }
    let norms = [norm(z), norm(zp), norm(zn)];
    for (n, name) in norms.iter().zip(["anchor", "positive", "negative"]) {
        if *n == 0.0 {
            return Err(LossError::ZeroNorm(name));
        }
    }
    Ok(norms)
}

fn non_finite(norms: [f64; 3], tau: f64) -> LossError {
    log::error!("non-finite contrastive loss: |z|={} |z+|={} |z-|={} tau={tau}", norms[0], norms[1], norms[2]);
    LossError::NonFinite { norms, tau }
}

pub fn contrastive_loss(z: &[f64], zp: &[f64], zn: &[f64], tau: f64) -> Result<f64, LossError> {
    let norms = check_inputs(z, zp, zn, tau)?;
    let loss = softplus((cosine_similarity(z, zn) - cosine_similarity(z, zp)) / tau);
    if !loss.is_finite() {
        return Err(non_finite(norms, tau));
    }
    Ok(loss)
}

/// Loss together with its gradient with respect to each embedding.
pub fn contrastive_loss_grad(
    z: &[f64],
    zp: &[f64],
    zn: &[f64],
    tau: f64,
) -> Result<LossGrad, LossError> {
    let norms = check_inputs(z, zp, zn, tau)?;
    let [na, np, nn] = norms;
    let sp = cosine_similarity(z, zp);
    let sn = cosine_similarity(z, zn);
    let x = (sn - sp) / tau;
    let loss = softplus(x);
    let w = sigmoid(x) / tau;
    // d cos(a,b)/da = b/(|a||b|) - cos(a,b) a/|a|^2
    let anchor = (0..z.len())
        .map(|i| {
            let dp = zp[i] / (na * np) - sp * z[i] / (na * na);
            let dn = zn[i] / (na * nn) - sn * z[i] / (na * na);
            w * (dn - dp)
        })
        .collect::<Vec<_>>();
    let positive = (0..z.len())
        .map(|i| -w * (z[i] / (na * np) - sp * zp[i] / (np * np)))
        .collect::<Vec<_>>();
    let negative = (0..z.len())
        .map(|i| w * (z[i] / (na * nn) - sn * zn[i] / (nn * nn)))
        .collect::<Vec<_>>();
    let finite = loss.is_finite()
        && anchor.iter().chain(&positive).chain(&negative).all(|g| g.is_finite());
    if !finite {
        return Err(non_finite(norms, tau));
    }
    Ok(LossGrad {
        loss,
        anchor,
        positive,
        negative,
    })
}

/// Mean loss over a batch laid out as `[anchors; positives; negatives]`
/// (3B rows) and its gradient in the same layout.
pub fn batch_loss(embeddings: &Array2<f32>, tau: f64) -> Result<(f64, Array2<f32>), LossError> {
    let b = embeddings.nrows() / 3;
    assert_eq!(b * 3, embeddings.nrows(), "batch rows must be a multiple of 3");
    let row = |i: usize| -> Vec<f64> { embeddings.row(i).iter().map(|&v| v as f64).collect() };
    let mut grad = Array2::<f32>::zeros(embeddings.dim());
    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for t in 0..b {
        let g = contrastive_loss_grad(&row(t), &row(b + t), &row(2 * b + t), tau)?;
        total += g.loss;
        for (k, (ga, (gp, gn))) in g
            .anchor
            .iter()
            .zip(g.positive.iter().zip(&g.negative))
            .enumerate()
        {
            grad[[t, k]] = (ga * scale) as f32;
            grad[[b + t, k]] = (gp * scale) as f32;
            grad[[2 * b + t, k]] = (gn * scale) as f32;
        }
    }
    Ok((total * scale, grad))
}

/// Where and how a training run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
    pub write_trace: bool,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub(crate) fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

#[derive(Debug)]
pub struct PretrainResult {
    pub model: ContrastiveModel,
    pub history: Vec<EpochRecord>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub fallbacks: usize,
    pub skipped: usize,
}

pub fn optimizer_tag(cfg: &AdamConfig) -> String {
    format!("adam(beta1={}, beta2={}, eps={})", cfg.beta1, cfg.beta2, cfg.eps)
}

/// Trains encoder and head on triplets drawn from the training records of
/// `index`. Writes `metrics.jsonl`, `final.ckpt`, `best.ckpt` and, when
/// asked, `triplets.csv` under the output directory.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    encoder: &EncoderConfig,
    index: &DatasetIndex,
    out: &RunOutput,
) -> Result<PretrainResult, PretrainError> {
    cfg.validate()?;
    encoder.validate()?;
    let train = training_view(index);
    check_compatible(cfg.strategy, &train)?;

    let mut model = ContrastiveModel::new(
        encoder.clone(),
        cfg.proj_dim,
        &mut rng::stream(cfg.seed, "pretrain-init"),
    )?;
    let adam_cfg = AdamConfig::default();
    let mut opt = Adam::new(adam_cfg);
    let schedule = cfg.schedule();
    let tau = cfg.temperature();
    let mut sampler = EpochSampler::new(cfg.strategy);
    let mut sample_rng = rng::stream(cfg.seed, "pretrain-sampler");
    let tag = optimizer_tag(&adam_cfg);

    let mut trace = match (out.write_trace, out.path("triplets.csv")) {
        (true, Some(p)) => {
            std::fs::create_dir_all(p.parent().expect("joined path"))?;
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        _ => None,
    };

    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let triplets = sampler.epoch(&train, &mut sample_rng)?;
        if triplets.is_empty() {
            return Err(PretrainError::NoTriplets);
        }
        if let Some(w) = trace.as_mut() {
            write_trace(w, epoch, &train, &triplets, epoch == 0)?;
        }
        let batches: Vec<&[Triplet]> = triplets.chunks(cfg.batch_size).collect();
        let mut loss_sum = 0.0;
        for (it, batch) in batches.iter().enumerate() {
            let ids: Vec<usize> = batch
                .iter()
                .map(|t| t.anchor)
                .chain(batch.iter().map(|t| t.positive))
                .chain(batch.iter().map(|t| t.negative))
                .collect();
            let x = image_batch(&train, &ids);
            let z = model.embed(&x, true)?;
            let (loss, grad) =
                batch_loss(&z, tau).map_err(|source| PretrainError::Loss { epoch, source })?;
            model.zero_grad();
            model.backward(&grad);
            opt.step(model.params(), schedule.lr_at_iter(epoch, it, batches.len()));
            loss_sum += loss;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            lr: schedule.lr_at(epoch as f64),
            wall_time: start.elapsed().as_secs_f64(),
            val_dice: None,
        };
        log::info!("pretrain epoch {epoch}: loss {:.6}", record.mean_loss);
        if best.as_ref().is_none_or(|(l, _)| record.mean_loss < *l) {
            let ck = Checkpoint::capture(
                encoder.clone(),
                Stage::Pretrained,
                out.config_hash.clone(),
                tag.clone(),
                Some(cfg.proj_dim),
                epoch,
                model.params(),
            );
            best = Some((record.mean_loss, ck));
        }
        history.push(record);
    }

    let final_checkpoint = Checkpoint::capture(
        encoder.clone(),
        Stage::Pretrained,
        out.config_hash.clone(),
        tag,
        Some(cfg.proj_dim),
        cfg.epochs.saturating_sub(1),
        model.params(),
    );
    let best_checkpoint = best.map(|(_, c)| c).unwrap_or_else(|| final_checkpoint.clone());
    if let Some(dir) = &out.dir {
        write_metrics(&dir.join("metrics.jsonl"), &history)?;
        final_checkpoint.save(&dir.join("final.ckpt"))?;
        best_checkpoint.save(&dir.join("best.ckpt"))?;
    }
    Ok(PretrainResult {
        model,
        history,
        final_checkpoint,
        best_checkpoint,
        fallbacks: sampler.fallbacks,
        skipped: sampler.skipped,
    })
}

/// Embeds every record of `index`, `chunk` slices per forward pass.
pub fn embed_all(model: &mut ContrastiveModel, index: &DatasetIndex, chunk: usize) -> Result<Array2<f32>, ModelError> {
    let ids: Vec<usize> = (0..index.len()).collect();
    let mut out = Array2::zeros((index.len(), model.head.dim()));
    for (c, part) in ids.chunks(chunk.max(1)).enumerate() {
        let z = model.embed(&image_batch(index, part), false)?;
        let lo = c * chunk.max(1);
        out.slice_mut(s![lo..lo + part.len(), ..]).assign(&z);
    }
    Ok(out)
}

pub fn load_pretrained(path: &Path, encoder: &EncoderConfig) -> Result<Checkpoint, CheckpointError> {
    let ck = Checkpoint::load(path)?;
    ck.expect_stage(Stage::Pretrained)?;
    ck.expect_encoder(encoder)?;
    Ok(ck)
}
