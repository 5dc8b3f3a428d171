//! Supervised fine-tuning of encoder + decoder with a soft Dice loss, and
//! inference / evaluation on slice stacks.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array3, ArrayView2, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{subsample_labels, DatasetError, DatasetIndex, Split};
use crate::metrics::{score_scan, MetricError, ScanScore};
use crate::nn::optim::AdamConfig;
use crate::nn::{
    Adam, Checkpoint, CheckpointError, CosineWarmRestarts, EncoderConfig, ModelError,
    Parameterized, SegmentationModel, Stage, Tensor,
};
use crate::pretrain::{optimizer_tag, RunOutput};
use crate::rng;
use crate::train::{image_batch, write_metrics, EpochRecord};
use crate::volume::{resize_bilinear, resize_nearest, Mask, MaskStack, Volume};

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid fine-tuning config: {0}")]
    InvalidConfig(String),
    #[error("prediction and target shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("init = from_checkpoint but no checkpoint was given")]
    MissingCheckpoint,
    #[error("no labeled training slices after subsampling")]
    EmptyLabeledSubset,
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    FromCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_fraction: f64,
    pub init: Init,
    pub restart_period: usize,
    /// Seed of weight init and batch order.
    pub seed: u64,
    /// Seed of the label subsample, kept apart so that compared models see
    /// the same labeled slices.
    pub label_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            lr: 1e-3,
            label_fraction: 1.0,
            init: Init::Random,
            restart_period: 5,
            seed: 0,
            label_seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: &str| Err(FinetuneError::InvalidConfig(m.to_string()));
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label_fraction must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.restart_period == 0 {
            return bad("restart_period must be >= 1");
        }
        Ok(())
    }
}

/// Soft Dice loss `1 - (2Σpt + ε) / (Σp + Σt + ε)`.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64, FinetuneError> {
    Ok(dice_loss_grad(pred, target)?.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), FinetuneError> {
    if pred.len() != target.len() {
        return Err(FinetuneError::ShapeMismatch(vec![pred.len()], vec![target.len()]));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let denom = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let grad = target
        .iter()
        .map(|t| -(2.0 * t * denom - num) / (denom * denom))
        .collect();
    Ok((1.0 - num / denom, grad))
}

pub fn dice_loss_2d(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64, FinetuneError> {
    if pred.shape() != target.shape() {
        return Err(FinetuneError::ShapeMismatch(pred.shape().to_vec(), target.shape().to_vec()));
    }
    dice_loss(&pred.iter().copied().collect::<Vec<_>>(), &target.iter().copied().collect::<Vec<_>>())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean per-sample soft Dice on sigmoid(logits) and the gradient with
/// respect to the logits.
pub fn batch_dice_loss(logits: &Tensor, targets: &Tensor) -> (f64, Tensor) {
    let n = logits.dim().0;
    let mut grad = Tensor::zeros(logits.dim());
    let mut total = 0.0;
    for b in 0..n {
        let l = logits.slice(s![b, 0, .., ..]);
        let p: Vec<f64> = l.iter().map(|&v| sigmoid(v) as f64).collect();
        let t: Vec<f64> = targets.slice(s![b, 0, .., ..]).iter().map(|&v| v as f64).collect();
        let (loss, g) = dice_loss_grad(&p, &t).expect("same batch shape");
        total += loss;
        for ((dst, gp), pv) in grad.slice_mut(s![b, 0, .., ..]).iter_mut().zip(&g).zip(&p) {
            *dst = (gp * pv * (1.0 - pv) / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

fn mask_batch(index: &DatasetIndex, ids: &[usize]) -> Tensor {
    let (h, w) = index.record(ids[0]).pixels.dim();
    let mut out = Tensor::zeros((ids.len(), 1, h, w));
    for (b, &i) in ids.iter().enumerate() {
        let m = index.record(i).mask.as_ref().expect("labeled record");
        Zip::from(out.slice_mut(s![b, 0, .., ..]))
            .and(m)
            .for_each(|o, &v| *o = f32::from(v));
    }
    out
}

/// Thresholds logits at zero, i.e. sigmoid at 0.5.
pub fn logits_to_masks(logits: &Tensor) -> Vec<Mask> {
    logits
        .outer_iter()
        .map(|l| l.index_axis(ndarray::Axis(0), 0).mapv(|v| u8::from(v > 0.0)))
        .collect()
}

pub fn predict(model: &mut SegmentationModel, index: &DatasetIndex, ids: &[usize], chunk: usize) -> Result<Vec<Mask>, ModelError> {
    let mut out = Vec::with_capacity(ids.len());
    for part in ids.chunks(chunk.max(1)) {
        out.extend(logits_to_masks(&model.forward(&image_batch(index, part), false)?));
    }
    Ok(out)
}

/// Full-volume prediction: every slice is resized to the model's
/// `resolution`, segmented, and the mask resized back with nearest
/// neighbour. Returns a `[slice, row, col]` stack.
pub fn predict_volume(model: &mut SegmentationModel, volume: &Volume, resolution: usize) -> Result<MaskStack, ModelError> {
    let [h, w, d] = volume.shape();
    let mut out = MaskStack::zeros((d, h, w));
    for lo in (0..d).step_by(16) {
        let hi = (lo + 16).min(d);
        let mut x = Tensor::zeros((hi - lo, 1, resolution, resolution));
        for k in lo..hi {
            x.slice_mut(s![k - lo, 0, .., ..])
                .assign(&resize_bilinear(volume.slice(k), resolution, resolution));
        }
        for (j, m) in logits_to_masks(&model.forward(&x, false)?).iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), lo + j)
                .assign(&resize_nearest(m.view(), h, w));
        }
    }
    Ok(out)
}

/// Record ids of every scan in `split`, ordered by slice index.
pub fn scans_in(index: &DatasetIndex, split: Split) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in index.split_indices(split) {
        out.entry(index.record(i).scan_id.clone()).or_default().push(i);
    }
    for ids in out.values_mut() {
        ids.sort_by_key(|&i| index.record(i).slice_index);
    }
    out
}

fn stack(masks: &[Mask]) -> Array3<u8> {
    let (h, w) = masks.first().map(|m| m.dim()).unwrap_or((0, 0));
    let mut out = Array3::zeros((masks.len(), h, w));
    for (k, m) in masks.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k).assign(m);
    }
    out
}

/// Predicted and ground-truth stacks for one scan's records.
pub fn predict_scan(
    model: &mut SegmentationModel,
    index: &DatasetIndex,
    ids: &[usize],
) -> Result<(Array3<u8>, Array3<u8>), ModelError> {
    let pred = predict(model, index, ids, 16)?;
    let truth: Vec<Mask> = ids
        .iter()
        .map(|&i| {
            let r = index.record(i);
            r.mask.clone().unwrap_or_else(|| Mask::zeros(r.pixels.dim()))
        })
        .collect();
    Ok((stack(&pred), stack(&truth)))
}

/// Per-scan Dice / Hausdorff of `model` on every scan of `split`.
pub fn evaluate(
    model: &mut SegmentationModel,
    index: &DatasetIndex,
    split: Split,
    run: usize,
) -> Result<Vec<ScanScore>, FinetuneError> {
    let mut rows = Vec::new();
    for (scan, ids) in scans_in(index, split) {
        let (pred, truth) = predict_scan(model, index, &ids)?;
        rows.push(score_scan(&scan, run, pred.view(), truth.view())?);
    }
    Ok(rows)
}

fn mean_dice(rows: &[ScanScore]) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64)
}

#[derive(Debug)]
pub struct FinetuneResult {
    pub model: SegmentationModel,
    pub best_model: SegmentationModel,
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: Checkpoint,
    pub final_checkpoint: Checkpoint,
    pub best_val_dice: Option<f64>,
    pub labeled_slices: usize,
}

/// Builds the segmentation model, optionally transferring the encoder of
/// a pre-trained checkpoint. The projection head is not loaded.
pub fn build_model(
    cfg: &FinetuneConfig,
    encoder: &EncoderConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<SegmentationModel, FinetuneError> {
    let mut model = SegmentationModel::new(encoder.clone(), &mut rng::stream(cfg.seed, "finetune-init"))?;
    if cfg.init == Init::FromCheckpoint {
        let ck = checkpoint.ok_or(FinetuneError::MissingCheckpoint)?;
        ck.expect_stage(Stage::Pretrained)?;
        ck.expect_encoder(encoder)?;
        ck.load_into("encoder.", model.params())?;
    }
    Ok(model)
}

/// Fine-tunes on the label-subsampled training slices of `index`, logging
/// validation Dice per epoch and keeping the best-validation weights.
pub fn run_finetuning(
    cfg: &FinetuneConfig,
    encoder: &EncoderConfig,
    checkpoint: Option<&Checkpoint>,
    index: &DatasetIndex,
    out: &RunOutput,
) -> Result<FinetuneResult, FinetuneError> {
    cfg.validate()?;
    encoder.validate()?;
    let mut model = build_model(cfg, encoder, checkpoint)?;
    let labeled = subsample_labels(index, cfg.label_fraction, cfg.label_seed)?;
    let train: Vec<usize> = labeled
        .split_indices(Split::Train)
        .into_iter()
        .filter(|&i| labeled.record(i).mask.is_some())
        .collect();
    if train.is_empty() {
        return Err(FinetuneError::EmptyLabeledSubset);
    }

    let mut opt = Adam::new(AdamConfig::default());
    let tag = optimizer_tag(&opt.config);
    let schedule = CosineWarmRestarts::new(cfg.lr, cfg.restart_period as f64);
    let mut order_rng = rng::stream(cfg.seed, "finetune-order");
    let capture = |m: &mut SegmentationModel, epoch| {
        Checkpoint::capture(
            encoder.clone(),
            Stage::Finetuned,
            out.config_hash.clone(),
            tag.clone(),
            None,
            epoch,
            m.params(),
        )
    };

    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint, SegmentationModel)> = None;
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut loss_sum = 0.0;
        for (it, ids) in batches.iter().enumerate() {
            let x = image_batch(&labeled, ids);
            let y = mask_batch(&labeled, ids);
            let logits = model.forward(&x, true)?;
            let (loss, grad) = batch_dice_loss(&logits, &y);
            if !loss.is_finite() {
                return Err(FinetuneError::NonFinite(epoch));
            }
            model.zero_grad();
            model.backward(&grad);
            opt.step(model.params(), schedule.lr_at_iter(epoch, it, batches.len()));
            loss_sum += loss;
        }
        let mean_loss = loss_sum / batches.len() as f64;
        let val_dice = mean_dice(&evaluate(&mut model, &labeled, Split::Val, 0)?);
        let record = EpochRecord {
            epoch,
            mean_loss,
            lr: schedule.lr_at(epoch as f64),
            wall_time: start.elapsed().as_secs_f64(),
            val_dice,
        };
        log::info!("finetune epoch {epoch}: loss {mean_loss:.6} val dice {val_dice:?}");
        // Without a validation split, selection falls back to training loss.
        let score = val_dice.unwrap_or(-mean_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, capture(&mut model, epoch), model.clone()));
        }
        history.push(record);
    }

    let final_checkpoint = capture(&mut model, cfg.epochs.saturating_sub(1));
    let (best_score, best_checkpoint, best_model) = best.unwrap_or_else(|| {
        (f64::NAN, final_checkpoint.clone(), model.clone())
    });
    if let Some(dir) = &out.dir {
        write_metrics(&dir.join("metrics.jsonl"), &history)?;
        final_checkpoint.save(&dir.join("final.ckpt"))?;
        best_checkpoint.save(&dir.join("best.ckpt"))?;
    }
    let has_val = history.iter().any(|r| r.val_dice.is_some());
    Ok(FinetuneResult {
        model,
        best_model,
        history,
        best_checkpoint,
        final_checkpoint,
        best_val_dice: has_val.then_some(best_score),
        labeled_slices: train.len(),
    })
}

/// Rebuilds a fine-tuned model from its checkpoint.
pub fn load_finetuned(ck: &Checkpoint) -> Result<SegmentationModel, FinetuneError> {
    ck.expect_stage(Stage::Finetuned)?;
    let mut model = SegmentationModel::new(ck.header.encoder.clone(), &mut rng::seeded(0))?;
    ck.load_into("", model.params())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn identical_masks_give_near_zero_loss() {
        let t: Vec<f64> = (0..256 * 256).map(|i| f64::from(u8::from(i % 7 < 3))).collect();
        let l = dice_loss(&t, &t).unwrap();
        assert!((0.0..1e-3).contains(&l));
    }

    #[test]
    fn disjoint_masks_give_near_one() {
        let t: Vec<f64> = (0..64 * 64).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
        let p: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let l = dice_loss(&p, &t).unwrap();
        assert!(l > 0.999 && l < 1.0);
    }

    #[test]
    fn half_probability_on_four_by_four() {
        let p = vec![0.5; 16];
        let t: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 8))).collect();
        // ε-free soft Dice by hand: 2 * (0.5 * 8) / (8 + 8) = 0.5.
        let eps_free = 1.0 - 2.0 * (0.5 * 8.0) / (8.0 + 8.0);
        assert_eq!(eps_free, 0.5);
        let l = dice_loss(&p, &t).unwrap();
        assert!((l - (1.0 - 9.0 / 17.0)).abs() < 1e-12);
        assert!((l - eps_free).abs() < 0.03);
    }

    #[test]
    fn empty_masks_are_defined() {
        assert_eq!(dice_loss(&[0.0; 9], &[0.0; 9]).unwrap(), 0.0);
        assert!(dice_loss(&[0.0; 9], &[0.0; 8]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = rng::seeded(3);
        for _ in 0..100 {
            let p: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
            let t: Vec<f64> = (0..64).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect();
            let (_, g) = dice_loss_grad(&p, &t).unwrap();
            for k in 0..64 {
                let h = 1e-6;
                let mut up = p.clone();
                let mut dn = p.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (dice_loss(&up, &t).unwrap() - dice_loss(&dn, &t).unwrap()) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-12);
                assert!(rel < 1e-4, "fd {fd} analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn hard_dice_is_one_minus_loss_without_eps() {
        let t = [1.0, 1.0, 0.0, 0.0];
        let p = [1.0, 0.0, 1.0, 0.0];
        let hard = crate::metrics::dice_score(
            ndarray::arr2(&[[1u8, 0], [1, 0]]).view(),
            ndarray::arr2(&[[1u8, 1], [0, 0]]).view(),
        )
        .unwrap();
        let soft = dice_loss(&p, &t).unwrap();
        // With ε = 1 the two differ by at most ε / (|A|+|B|+ε).
        assert!(((1.0 - soft) - hard).abs() <= 1.0 / 5.0);
    }

    proptest! {
        #[test]
        fn loss_is_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..40), bits in prop::collection::vec(any::<bool>(), 40)) {
            let t: Vec<f64> = bits.iter().take(p.len()).map(|&b| f64::from(u8::from(b))).collect();
            let l = dice_loss(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
