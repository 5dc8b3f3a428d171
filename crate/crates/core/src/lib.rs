//! Slice-level contrastive pre-training, fine-tuning, evaluation and
//! promptable-segmenter post-processing for volumetric CT segmentation.

pub mod dataset;
pub mod experiment;
pub mod finetune;
pub mod metrics;
pub mod morphology;
pub mod nn;
pub mod phantom;
pub mod pretrain;
pub mod propagate;
pub mod refine;
pub mod rng;
pub mod segmenter;
pub mod train;
pub mod triplet;
pub mod volume;

pub use dataset::{DatasetIndex, Split, SplitSpec};
pub use experiment::ExperimentConfig;
pub use metrics::{EvalReport, ScanScore, TTest};
pub use nn::{Checkpoint, EncoderConfig, SegmentationModel};
pub use segmenter::{BackendKind, BackendSpec, BoxPrompt, PromptableSegmenter};
pub use triplet::{Strategy, Triplet};
pub use volume::{Mask, MaskStack, SliceRecord, Volume};
