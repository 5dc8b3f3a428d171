//! Box-prompt refinement of coarse masks: one tight box per connected
//! component of the coarse mask, one backend query per box, results OR-ed.

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{dice_score, hausdorff};
use crate::morphology::label_components;
use crate::segmenter::{BoxPrompt, Frame, PromptableSegmenter, SegmenterError};
use crate::volume::{Mask, MaskStack};

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("backend {0} cannot take box prompts")]
    NoBoxPrompts(String),
    #[error("coarse stack {coarse:?} does not match {frames} frames of {shape:?}")]
    Misaligned {
        coarse: (usize, usize, usize),
        frames: usize,
        shape: (usize, usize),
    },
    #[error("slice {slice}: {source}")]
    Backend {
        slice: usize,
        #[source]
        source: SegmenterError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Components smaller than this many pixels get no box.
    pub min_area: usize,
    /// Padding added to each tight box, in pixels.
    pub margin: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { min_area: 5, margin: 0 }
    }
}

/// Tight bounding box of every 8-connected component with at least
/// `min_area` pixels, in raster order of the components' first pixels.
pub fn mask_to_bboxes(mask: &Mask, min_area: usize) -> Vec<BoxPrompt> {
    let (labels, n) = label_components(mask);
    let mut acc: Vec<Option<(BoxPrompt, usize)>> = vec![None; n as usize];
    for ((y, x), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let slot = &mut acc[l as usize - 1];
        match slot {
            None => {
                *slot = Some((
                    BoxPrompt {
                        x_min: x,
                        y_min: y,
                        x_max: x,
                        y_max: y,
                    },
                    1,
                ))
            }
            Some((b, area)) => {
                b.x_min = b.x_min.min(x);
                b.y_min = b.y_min.min(y);
                b.x_max = b.x_max.max(x);
                b.y_max = b.y_max.max(y);
                *area += 1;
            }
        }
    }
    acc.into_iter()
        .flatten()
        .filter(|(_, area)| *area >= min_area)
        .map(|(b, _)| b)
        .collect()
}

/// Union of the backend's answers to every box of `coarse`.
pub fn refine_slice(
    frame: &Frame,
    coarse: &Mask,
    backend: &mut dyn PromptableSegmenter,
    cfg: &RefineConfig,
) -> Result<(Mask, Vec<BoxPrompt>), SegmenterError> {
    let (h, w) = coarse.dim();
    let boxes: Vec<BoxPrompt> = mask_to_bboxes(coarse, cfg.min_area)
        .into_iter()
        .map(|b| b.expand(cfg.margin, h, w))
        .collect();
    let mut out = Mask::zeros((h, w));
    for b in &boxes {
        let m = backend.segment_with_box(frame, b)?;
        out.zip_mut_with(&m, |o, &v| *o |= u8::from(v != 0));
    }
    Ok((out, boxes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRefinement {
    pub index: usize,
    pub boxes: Vec<BoxPrompt>,
    pub coarse_dice: Option<f64>,
    pub refined_dice: Option<f64>,
    pub coarse_hausdorff: Option<f64>,
    pub refined_hausdorff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub refined: MaskStack,
    pub slices: Vec<SliceRefinement>,
}

/// Refines every slice of `coarse` (aligned with `frames`). With `truth`,
/// per-slice Dice and Hausdorff before and after are recorded.
pub fn refine_volume(
    frames: &[Frame],
    coarse: &MaskStack,
    backend: &mut dyn PromptableSegmenter,
    cfg: &RefineConfig,
    truth: Option<&MaskStack>,
) -> Result<RefineOutput, RefineError> {
    if !backend.capabilities().box_prompt {
        return Err(RefineError::NoBoxPrompts(backend.name().to_string()));
    }
    let shape = frames.first().map(Frame::shape).unwrap_or((coarse.dim().1, coarse.dim().2));
    let (d, h, w) = coarse.dim();
    if d != frames.len() || (h, w) != shape || frames.iter().any(|f| f.shape() != shape) {
        return Err(RefineError::Misaligned {
            coarse: coarse.dim(),
            frames: frames.len(),
            shape,
        });
    }
    let mut refined = MaskStack::zeros(coarse.dim());
    let mut slices = Vec::with_capacity(d);
    for (k, frame) in frames.iter().enumerate() {
        let c = coarse.index_axis(Axis(0), k).to_owned();
        let (r, boxes) = refine_slice(frame, &c, backend, cfg)
            .map_err(|source| RefineError::Backend { slice: frame.index, source })?;
        let score = |m: &Mask| {
            truth.map(|t| {
                let t = t.index_axis(Axis(0), k);
                let d = dice_score(m.view(), t).expect("aligned");
                let hd = hausdorff(m.view(), t).expect("aligned");
                (d, hd)
            })
        };
        let before = score(&c);
        let after = score(&r);
        slices.push(SliceRefinement {
            index: frame.index,
            boxes,
            coarse_dice: before.map(|s| s.0),
            refined_dice: after.map(|s| s.0),
            coarse_hausdorff: before.and_then(|s| s.1),
            refined_hausdorff: after.and_then(|s| s.1),
        });
        refined.index_axis_mut(Axis(0), k).assign(&r);
    }
    Ok(RefineOutput { refined, slices })
}

/// Summary of a refinement run against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub slices: usize,
    pub mean_coarse_dice: f64,
    pub mean_refined_dice: f64,
    pub improved: usize,
    pub unchanged: usize,
    pub worsened: usize,
}

pub fn summarize(rows: &[SliceRefinement]) -> Option<RefineSummary> {
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.coarse_dice?, r.refined_dice?)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    Some(RefineSummary {
        slices: pairs.len(),
        mean_coarse_dice: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_refined_dice: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        improved: pairs.iter().filter(|p| p.1 > p.0).count(),
        unchanged: pairs.iter().filter(|p| p.1 == p.0).count(),
        worsened: pairs.iter().filter(|p| p.1 < p.0).count(),
    })
}
