//! Promptable segmentation backends.
//!
//! Real SAM / SAM2 models are external plugins; this crate ships the
//! interface, deterministic oracle backends that read ground truth, an
//! always-empty backend, and registry entries for the real models that
//! report themselves unavailable.

use std::fmt;
use std::path::PathBuf;

use ndarray::{s, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::{dilate, erode};
use crate::rng;
use crate::volume::{Mask, MaskStack};

#[derive(Debug, Error, PartialEq)]
pub enum SegmenterError {
    #[error("backend {backend} does not support {capability}")]
    Unsupported {
        backend: String,
        capability: &'static str,
    },
    #[error("box {prompt} lies outside a {height}x{width} image")]
    BoxOutOfBounds {
        prompt: BoxPrompt,
        height: usize,
        width: usize,
    },
    #[error("invalid box: min corner ({0}, {1}) exceeds max corner ({2}, {3})")]
    InvertedBox(usize, usize, usize, usize),
    #[error("seed mask is empty")]
    EmptySeed,
    #[error("frame shape {got:?} differs from the initial frame {expected:?}")]
    FrameShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("frame {0} is outside the oracle's ground truth")]
    UnknownFrame(usize),
    #[error("backend {name} is unavailable: {reason}")]
    Unavailable { name: String, reason: String },
    #[error("backend {0} needs ground truth to be constructed")]
    NeedsTruth(String),
    #[error("state was created by backend {0}")]
    ForeignState(String),
}

/// Inclusive pixel box; `x` is the column and `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl fmt::Display for BoxPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl BoxPrompt {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self, SegmenterError> {
        if x_min > x_max || y_min > y_max {
            return Err(SegmenterError::InvertedBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<(), SegmenterError> {
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(SegmenterError::InvertedBox(self.x_min, self.y_min, self.x_max, self.y_max));
        }
        if self.x_max >= width || self.y_max >= height {
            return Err(SegmenterError::BoxOutOfBounds {
                prompt: *self,
                height,
                width,
            });
        }
        Ok(())
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y_min..=self.y_max).contains(&row) && (self.x_min..=self.x_max).contains(&col)
    }

    /// Area of the box read as a continuous rectangle between corner
    /// coordinates. Zero for one-pixel-wide boxes.
    pub fn continuous_area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn is_degenerate(&self) -> bool {
        self.continuous_area() == 0
    }

    /// Grows the box by `margin` pixels per side, clipped to the image.
    pub fn expand(&self, margin: usize, height: usize, width: usize) -> Self {
        Self {
            x_min: self.x_min.saturating_sub(margin),
            y_min: self.y_min.saturating_sub(margin),
            x_max: (self.x_max + margin).min(width.saturating_sub(1)),
            y_max: (self.y_max + margin).min(height.saturating_sub(1)),
        }
    }

    pub fn clip(&self, mask: &Mask) -> Mask {
        let mut out = Mask::zeros(mask.dim());
        out.slice_mut(s![self.y_min..=self.y_max, self.x_min..=self.x_max])
            .assign(&mask.slice(s![self.y_min..=self.y_max, self.x_min..=self.x_max]));
        out
    }
}

/// An 8-bit frame and the volume slice it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub pixels: Array2<u8>,
}

impl Frame {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub box_prompt: bool,
    pub mask_prompt: bool,
    pub stateful_propagation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassDirection {
    Forward,
    Backward,
}

/// Backend memory between propagation steps. Oracle backends only track
/// bookkeeping; real backends keep their memory bank in `memory`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState {
    pub backend: String,
    pub reference: usize,
    pub direction: Option<PassDirection>,
    pub steps: usize,
    pub last_index: usize,
    pub shape: (usize, usize),
    pub memory: Vec<Mask>,
}

pub trait PromptableSegmenter: Send {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;

    fn segment_with_box(&mut self, _frame: &Frame, _prompt: &BoxPrompt) -> Result<Mask, SegmenterError> {
        Err(self.unsupported("box_prompt"))
    }

    fn init_propagation(&mut self, _frame: &Frame, _seed: &Mask) -> Result<PropagationState, SegmenterError> {
        Err(self.unsupported("stateful_propagation"))
    }

    fn propagate_step(&mut self, _state: &mut PropagationState, _next: &Frame) -> Result<Mask, SegmenterError> {
        Err(self.unsupported("stateful_propagation"))
    }

    fn unsupported(&self, capability: &'static str) -> SegmenterError {
        SegmenterError::Unsupported {
            backend: self.name().to_string(),
            capability,
        }
    }
}

/// Picks the highest-scoring candidate of a multi-mask prediction.
pub fn select_best_mask(candidates: Vec<(Mask, f32)>) -> Option<Mask> {
    candidates
        .into_iter()
        .fold(None::<(Mask, f32)>, |best, (m, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((m, s)),
        })
        .map(|(m, _)| m)
}

/// Turns real-model logits into a binary mask.
pub fn threshold_logits(logits: &Array2<f32>, threshold: f32) -> Mask {
    logits.mapv(|v| u8::from(v > threshold))
}

fn check_box(frame: &Frame, prompt: &BoxPrompt) -> Result<bool, SegmenterError> {
    let (h, w) = frame.shape();
    prompt.check_bounds(h, w)?;
    if prompt.is_degenerate() {
        log::warn!("degenerate box {prompt} on frame {}: returning an empty mask", frame.index);
        return Ok(false);
    }
    Ok(true)
}

fn init_state(name: &str, frame: &Frame, seed: &Mask) -> Result<PropagationState, SegmenterError> {
    if seed.dim() != frame.shape() {
        return Err(SegmenterError::FrameShape {
            expected: frame.shape(),
            got: seed.dim(),
        });
    }
    if !seed.iter().any(|&v| v != 0) {
        return Err(SegmenterError::EmptySeed);
    }
    Ok(PropagationState {
        backend: name.to_string(),
        reference: frame.index,
        direction: None,
        steps: 0,
        last_index: frame.index,
        shape: frame.shape(),
        memory: vec![seed.mapv(|v| u8::from(v != 0))],
    })
}

fn advance(name: &str, state: &mut PropagationState, next: &Frame) -> Result<(), SegmenterError> {
    if state.backend != name {
        return Err(SegmenterError::ForeignState(state.backend.clone()));
    }
    if next.shape() != state.shape {
        return Err(SegmenterError::FrameShape {
            expected: state.shape,
            got: next.shape(),
        });
    }
    if state.direction.is_none() && next.index != state.reference {
        state.direction = Some(if next.index > state.reference {
            PassDirection::Forward
        } else {
            PassDirection::Backward
        });
    }
    state.steps += 1;
    state.last_index = next.index;
    Ok(())
}

/// Reads ground truth: a box prompt yields the true mask inside the box,
/// a propagation step yields the true mask of the frame's slice.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    truth: MaskStack,
}

impl OracleSegmenter {
    pub fn new(truth: MaskStack) -> Self {
        Self { truth }
    }

    fn truth_of(&self, frame: &Frame) -> Result<Mask, SegmenterError> {
        if frame.index >= self.truth.dim().0 {
            return Err(SegmenterError::UnknownFrame(frame.index));
        }
        let m = self.truth.index_axis(ndarray::Axis(0), frame.index);
        if m.dim() != frame.shape() {
            return Err(SegmenterError::FrameShape {
                expected: m.dim(),
                got: frame.shape(),
            });
        }
        Ok(m.to_owned())
    }
}

const ORACLE_CAPS: Capabilities = Capabilities {
    box_prompt: true,
    mask_prompt: true,
    stateful_propagation: true,
};

impl PromptableSegmenter for OracleSegmenter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn capabilities(&self) -> Capabilities {
        ORACLE_CAPS
    }

    fn segment_with_box(&mut self, frame: &Frame, prompt: &BoxPrompt) -> Result<Mask, SegmenterError> {
        if !check_box(frame, prompt)? {
            return Ok(Mask::zeros(frame.shape()));
        }
        Ok(prompt.clip(&self.truth_of(frame)?))
    }

    fn init_propagation(&mut self, frame: &Frame, seed: &Mask) -> Result<PropagationState, SegmenterError> {
        init_state(self.name(), frame, seed)
    }

    fn propagate_step(&mut self, state: &mut PropagationState, next: &Frame) -> Result<Mask, SegmenterError> {
        advance(self.name(), state, next)?;
        self.truth_of(next)
    }
}

/// Degradation applied by [`NoisyOracleSegmenter`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Dilation applied to every returned mask.
    pub dilate_radius: usize,
    /// Extra error radius per propagation step since the last prompt; the
    /// extra radius is applied as a random erosion or dilation.
    pub drift: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            dilate_radius: 1,
            drift: 0.25,
            seed: 0,
        }
    }
}

/// Ground-truth oracle whose masks are dilated by a fixed radius and,
/// during propagation, drift further the more steps have passed since the
/// frame that was prompted.
#[derive(Debug, Clone)]
pub struct NoisyOracleSegmenter {
    inner: OracleSegmenter,
    pub noise: NoiseModel,
}

impl NoisyOracleSegmenter {
    pub fn new(truth: MaskStack, noise: NoiseModel) -> Self {
        Self {
            inner: OracleSegmenter::new(truth),
            noise,
        }
    }

    fn degrade(&self, mask: &Mask, frame: usize, steps: usize) -> Mask {
        let base = dilate(mask, self.noise.dilate_radius);
        let extra = (self.noise.drift * steps as f64).floor() as usize;
        if extra == 0 {
            return base;
        }
        let mut r = rng::stream(self.noise.seed, &format!("noisy-oracle/{frame}/{steps}"));
        if r.random_bool(0.5) {
            dilate(&base, extra)
        } else {
            erode(&base, extra)
        }
    }
}

impl PromptableSegmenter for NoisyOracleSegmenter {
    fn name(&self) -> &str {
        "oracle_noisy"
    }

    fn capabilities(&self) -> Capabilities {
        ORACLE_CAPS
    }

    fn segment_with_box(&mut self, frame: &Frame, prompt: &BoxPrompt) -> Result<Mask, SegmenterError> {
        if !check_box(frame, prompt)? {
            return Ok(Mask::zeros(frame.shape()));
        }
        let truth = prompt.clip(&self.inner.truth_of(frame)?);
        Ok(prompt.clip(&self.degrade(&truth, frame.index, 0)))
    }

    fn init_propagation(&mut self, frame: &Frame, seed: &Mask) -> Result<PropagationState, SegmenterError> {
        init_state(self.name(), frame, seed)
    }

    fn propagate_step(&mut self, state: &mut PropagationState, next: &Frame) -> Result<Mask, SegmenterError> {
        advance(self.name(), state, next)?;
        let truth = self.inner.truth_of(next)?;
        Ok(self.degrade(&truth, next.index, state.steps))
    }
}

/// Returns empty masks for every prompt.
#[derive(Debug, Clone, Default)]
pub struct NullSegmenter;

impl PromptableSegmenter for NullSegmenter {
    fn name(&self) -> &str {
        "null"
    }

    fn capabilities(&self) -> Capabilities {
        ORACLE_CAPS
    }

    fn segment_with_box(&mut self, frame: &Frame, prompt: &BoxPrompt) -> Result<Mask, SegmenterError> {
        check_box(frame, prompt)?;
        Ok(Mask::zeros(frame.shape()))
    }

    fn init_propagation(&mut self, frame: &Frame, seed: &Mask) -> Result<PropagationState, SegmenterError> {
        init_state(self.name(), frame, seed)
    }

    fn propagate_step(&mut self, state: &mut PropagationState, next: &Frame) -> Result<Mask, SegmenterError> {
        advance(self.name(), state, next)?;
        Ok(Mask::zeros(next.shape()))
    }
}

/// Registry entry for a model that needs external weights and a runtime
/// this build does not include.
#[derive(Debug, Clone)]
pub struct ExternalModel {
    name: String,
    caps: Capabilities,
    weights: Option<PathBuf>,
}

impl ExternalModel {
    fn unavailable(&self) -> SegmenterError {
        let reason = match &self.weights {
            None => "no weights path configured and no model runtime linked".to_string(),
            Some(p) => format!("weights {} given but no model runtime linked", p.display()),
        };
        SegmenterError::Unavailable {
            name: self.name.clone(),
            reason,
        }
    }
}

impl PromptableSegmenter for ExternalModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn segment_with_box(&mut self, _frame: &Frame, _prompt: &BoxPrompt) -> Result<Mask, SegmenterError> {
        if !self.caps.box_prompt {
            return Err(self.unsupported("box_prompt"));
        }
        Err(self.unavailable())
    }

    fn init_propagation(&mut self, _frame: &Frame, _seed: &Mask) -> Result<PropagationState, SegmenterError> {
        if !self.caps.stateful_propagation {
            return Err(self.unsupported("stateful_propagation"));
        }
        Err(self.unavailable())
    }

    fn propagate_step(&mut self, _state: &mut PropagationState, _next: &Frame) -> Result<Mask, SegmenterError> {
        if !self.caps.stateful_propagation {
            return Err(self.unsupported("stateful_propagation"));
        }
        Err(self.unavailable())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    OracleNoisy,
    Null,
    Sam,
    Sam2,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "oracle_noisy" | "oracle-noisy" => Ok(Self::OracleNoisy),
            "null" => Ok(Self::Null),
            "sam" => Ok(Self::Sam),
            "sam2" => Ok(Self::Sam2),
            other => Err(format!(
                "unknown backend {other:?}, expected oracle, oracle_noisy, null, sam or sam2"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub backend: BackendKind,
    pub noise: NoiseModel,
    pub weights: Option<PathBuf>,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            backend: BackendKind::Oracle,
            noise: NoiseModel::default(),
            weights: None,
        }
    }
}

impl BackendSpec {
    pub fn of(backend: BackendKind) -> Self {
        Self {
            backend,
            ..Self::default()
        }
    }

    /// Instantiates the backend for one volume. Oracle backends need that
    /// volume's ground-truth stack.
    pub fn build(&self, truth: Option<&MaskStack>) -> Result<Box<dyn PromptableSegmenter>, SegmenterError> {
        let need = |name: &str| truth.cloned().ok_or_else(|| SegmenterError::NeedsTruth(name.to_string()));
        Ok(match self.backend {
            BackendKind::Oracle => Box::new(OracleSegmenter::new(need("oracle")?)),
            BackendKind::OracleNoisy => Box::new(NoisyOracleSegmenter::new(need("oracle_noisy")?, self.noise)),
            BackendKind::Null => Box::new(NullSegmenter),
            BackendKind::Sam => Box::new(ExternalModel {
                name: "sam".into(),
                caps: Capabilities {
                    box_prompt: true,
                    mask_prompt: true,
                    stateful_propagation: false,
                },
                weights: self.weights.clone(),
            }),
            BackendKind::Sam2 => Box::new(ExternalModel {
                name: "sam2".into(),
                caps: ORACLE_CAPS,
                weights: self.weights.clone(),
            }),
        })
    }
}
