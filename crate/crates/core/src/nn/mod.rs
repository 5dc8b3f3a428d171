//! Minimal CPU network stack: layers, the U-Net encoder / decoder, the
//! projection head, Adam and checkpoints.

use thiserror::Error;

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod unet;

pub use checkpoint::{Checkpoint, CheckpointError, Stage};
pub use layers::Tensor;
pub use optim::{Adam, CosineWarmRestarts};
pub use unet::{
    Backbone, ContrastiveModel, Decoder, Encoder, EncoderConfig, EncoderOutput, Norm,
    ProjectionHead, SegmentationModel,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("input {height}x{width} is not divisible by 2^{downsamples}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        downsamples: usize,
    },
    #[error("expected {expected} input channel(s), got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("decoder expects {expected} skip tensors, got {got}")]
    SkipCountMismatch { expected: usize, got: usize },
    #[error("skip {stage} has shape {got:?}, expected {expected:?}")]
    SkipShapeMismatch {
        stage: usize,
        expected: (usize, usize, usize, usize),
        got: (usize, usize, usize, usize),
    },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

/// A trainable tensor stored flat with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape");
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named parameters collected depth-first, in a stable order.
pub type NamedParams<'a> = Vec<(String, &'a mut Param)>;

pub trait Parameterized {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>);

    fn params(&mut self) -> NamedParams<'_> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    fn num_params(&mut self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
