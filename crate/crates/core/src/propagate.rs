//! Volumetric segmentation from annotated slices by treating the informative
//! slices of a volume as video frames and propagating masks through them.

use std::fmt;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{dice_score_3d, mean_std};
use crate::segmenter::{BackendSpec, Frame, PromptableSegmenter, SegmenterError};
use crate::volume::{rescale_to_u8, to_mask_stack, Mask, MaskStack, Volume};

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error("volume {0} has neither a label nor a coarse mask")]
    NoMaskSource(String),
    #[error("no informative slices: every mask slice is empty")]
    EmptyInformativeSet,
    #[error("seed slice {0} is not an informative slice")]
    SeedOutsideSet(usize),
    #[error("seed mask for slice {0} is empty")]
    EmptySeed(usize),
    #[error("no seed slices given")]
    NoSeeds,
    #[error("backend {0} cannot propagate masks")]
    NoPropagation(String),
    #[error("cannot place {count} seeds among {available} informative slices")]
    TooManySeeds { count: usize, available: usize },
    #[error("coarse stack shape {got:?} does not match volume {expected:?}")]
    CoarseShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("frame {frame}: {source}")]
    Backend {
        frame: usize,
        #[source]
        source: SegmenterError,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Indices of slices with at least one foreground pixel, ascending.
pub fn informative_slices(stack: &MaskStack) -> Vec<usize> {
    stack
        .outer_iter()
        .enumerate()
        .filter(|(_, m)| m.iter().any(|&v| v != 0))
        .map(|(k, _)| k)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceSource {
    /// Informative slices from the volume's label.
    GroundTruth,
    /// Informative slices from a predicted mask stack.
    Coarse,
}

/// The informative set of `volume`, read from its label or from `coarse`.
pub fn informative_slices_of(
    volume: &Volume,
    source: SliceSource,
    coarse: Option<&MaskStack>,
) -> Result<Vec<usize>, PropagateError> {
    let stack = match (source, &volume.label, coarse) {
        (SliceSource::GroundTruth, Some(label), _) => to_mask_stack(label),
        (SliceSource::Coarse, _, Some(c)) => {
            let [h, w, d] = volume.shape();
            if c.dim() != (d, h, w) {
                return Err(PropagateError::CoarseShape {
                    expected: (d, h, w),
                    got: c.dim(),
                });
            }
            c.clone()
        }
        _ => return Err(PropagateError::NoMaskSource(volume.scan_id.clone())),
    };
    Ok(informative_slices(&stack))
}

/// Middle element `S[⌊|S|/2⌋]` of the informative set.
pub fn select_reference(set: &[usize]) -> Result<usize, PropagateError> {
    set.get(set.len() / 2).copied().ok_or(PropagateError::EmptyInformativeSet)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoVideo {
    pub frames: Vec<Frame>,
    pub source_indices: Vec<usize>,
}

impl PseudoVideo {
    /// Frames of the listed slices, each rescaled to 0..=255 on its own.
    pub fn build(volume: &Volume, indices: &[usize]) -> Self {
        let frames = indices
            .iter()
            .map(|&k| Frame {
                index: k,
                pixels: rescale_to_u8(volume.slice(k)),
            })
            .collect();
        Self {
            frames,
            source_indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn position_of(&self, slice: usize) -> Option<usize> {
        self.source_indices.binary_search(&slice).ok()
    }

    /// Writes `00000.png`, `00001.png`, ... as 8-bit grayscale.
    pub fn write_png_frames(&self, dir: &Path) -> Result<(), PropagateError> {
        std::fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            let (h, w) = f.shape();
            let img = image::GrayImage::from_raw(w as u32, h as u32, f.pixels.iter().copied().collect())
                .expect("buffer matches frame size");
            img.save(dir.join(format!("{i:05}.png")))?;
        }
        Ok(())
    }
}

fn backend_err(frame: usize) -> impl FnOnce(SegmenterError) -> PropagateError {
    move |source| PropagateError::Backend { frame, source }
}

/// Propagates `seeds` (slice index, mask) through the informative slices
/// `set`. Each seed starts one forward and one backward pass; a frame takes
/// its mask from the seed it is fewest steps away from (ties go to the
/// earlier seed). Slices outside `set` stay empty.
pub fn propagate_volume(
    volume: &Volume,
    set: &[usize],
    seeds: &[(usize, Mask)],
    backend: &mut dyn PromptableSegmenter,
) -> Result<MaskStack, PropagateError> {
    if !backend.capabilities().stateful_propagation {
        return Err(PropagateError::NoPropagation(backend.name().to_string()));
    }
    if set.is_empty() {
        return Err(PropagateError::EmptyInformativeSet);
    }
    if seeds.is_empty() {
        return Err(PropagateError::NoSeeds);
    }
    let video = PseudoVideo::build(volume, set);
    let mut placed: Vec<(usize, &Mask)> = Vec::with_capacity(seeds.len());
    for (slice, mask) in seeds {
        let p = video.position_of(*slice).ok_or(PropagateError::SeedOutsideSet(*slice))?;
        if !mask.iter().any(|&v| v != 0) {
            return Err(PropagateError::EmptySeed(*slice));
        }
        placed.push((p, mask));
    }
    placed.sort_by_key(|(p, _)| *p);
    placed.dedup_by_key(|(p, _)| *p);

    let [h, w, d] = volume.shape();
    let mut out = MaskStack::zeros((d, h, w));
    let n = video.len();
    for (i, &(p, seed)) in placed.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| placed[j].0);
        let next = placed.get(i + 1).map(|s| s.0);
        // Forward covers frames nearer to this seed than to the next one,
        // ties included; backward covers frames strictly nearer than to the
        // previous one.
        let fwd_end = next.map_or(n - 1, |q| p + (q - p) / 2);
        let bwd_end = prev.map_or(0, |q| q + (p - q) / 2 + 1);
        out.index_axis_mut(Axis(0), set[p])
            .assign(&seed.mapv(|v| u8::from(v != 0)));
        let seed_frame = &video.frames[p];
        if fwd_end > p {
            let mut st = backend.init_propagation(seed_frame, seed).map_err(backend_err(set[p]))?;
            for f in p + 1..=fwd_end {
                let m = backend.propagate_step(&mut st, &video.frames[f]).map_err(backend_err(set[f]))?;
                out.index_axis_mut(Axis(0), set[f]).assign(&m);
            }
        }
        if bwd_end < p {
            let mut st = backend.init_propagation(seed_frame, seed).map_err(backend_err(set[p]))?;
            for f in (bwd_end..p).rev() {
                let m = backend.propagate_step(&mut st, &video.frames[f]).map_err(backend_err(set[f]))?;
                out.index_axis_mut(Axis(0), set[f]).assign(&m);
            }
        }
    }
    Ok(out)
}

/// Single-seed pipeline: ground-truth informative set, seeded with the
/// label of the reference slice.
pub fn propagate_from_reference(
    volume: &Volume,
    backend: &mut dyn PromptableSegmenter,
) -> Result<MaskStack, PropagateError> {
    let label = volume
        .label
        .as_ref()
        .ok_or_else(|| PropagateError::NoMaskSource(volume.scan_id.clone()))?;
    let truth = to_mask_stack(label);
    let set = informative_slices(&truth);
    let r = select_reference(&set)?;
    let seed = truth.index_axis(Axis(0), r).to_owned();
    propagate_volume(volume, &set, &[(r, seed)], backend)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedPosition {
    Beginning,
    Middle,
    End,
}

impl fmt::Display for SeedPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedPosition::Beginning => "beginning",
            SeedPosition::Middle => "middle",
            SeedPosition::End => "end",
        })
    }
}

impl std::str::FromStr for SeedPosition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "beginning" | "begin" | "start" => Ok(Self::Beginning),
            "middle" | "mid" => Ok(Self::Middle),
            "end" => Ok(Self::End),
            other => Err(format!("unknown position {other:?}, expected beginning, middle or end")),
        }
    }
}

/// Positions (into an informative set of length `n`) of `count` seeds at
/// `position`. Seeds are spread evenly over a window of
/// `max(count, ⌈n/3⌉)` frames anchored at the start, centre or end of the
/// set; a single middle seed sits at `⌊n/2⌋`.
pub fn seed_positions(n: usize, count: usize, position: SeedPosition) -> Result<Vec<usize>, PropagateError> {
    if count == 0 || count > n {
        return Err(PropagateError::TooManySeeds { count, available: n });
    }
    if count == 1 {
        return Ok(vec![match position {
            SeedPosition::Beginning => 0,
            SeedPosition::Middle => n / 2,
            SeedPosition::End => n - 1,
        }]);
    }
    let len = count.max(n.div_ceil(3));
    let start = match position {
        SeedPosition::Beginning => 0,
        SeedPosition::Middle => (n / 2).saturating_sub(len / 2).min(n - len),
        SeedPosition::End => n - len,
    };
    let step = (len - 1) as f64 / (count - 1) as f64;
    Ok((0..count).map(|i| start + (i as f64 * step).round() as usize).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub count: usize,
    pub position: SeedPosition,
    pub mean_dice: Option<f64>,
    pub std_dice: Option<f64>,
    pub volumes: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub note: String,
    pub backend: String,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, count: usize, position: SeedPosition) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.count == count && c.position == position)
    }

    /// Rows of count, columns of position.
    pub fn to_markdown(&self) -> String {
        let mut positions: Vec<SeedPosition> = self.cells.iter().map(|c| c.position).collect();
        positions.sort();
        positions.dedup();
        let mut counts: Vec<usize> = self.cells.iter().map(|c| c.count).collect();
        counts.sort();
        counts.dedup();
        let mut s = String::from("| slices |");
        for p in &positions {
            s += &format!(" {p} |");
        }
        s += "\n|---|";
        s += &"---|".repeat(positions.len());
        s += "\n";
        for c in counts {
            s += &format!("| {c} |");
            for &p in &positions {
                let v = match self.cell(c, p) {
                    Some(AblationCell { mean_dice: Some(m), std_dice: Some(sd), .. }) => format!("{m:.4} ± {sd:.4}"),
                    _ => "n/a".into(),
                };
                s += &format!(" {v} |");
            }
            s += "\n";
        }
        s
    }
}

pub const ABLATION_NOTE: &str = "seeds for count > 1 are spread evenly over a window of max(count, ceil(|S|/3)) informative slices at the stated position; volume Dice over the full stack";

/// Runs every (count, position) combination on every labeled volume and
/// reports mean ± population std of volume Dice. Volumes with fewer
/// informative slices than `count` are skipped and counted.
pub fn ablation_grid(
    volumes: &[Volume],
    counts: &[usize],
    positions: &[SeedPosition],
    backend: &BackendSpec,
) -> Result<AblationReport, PropagateError> {
    let mut cells = Vec::new();
    for &count in counts {
        for &position in positions {
            let mut scores = Vec::new();
            let mut skipped = 0;
            for v in volumes {
                let label = v
                    .label
                    .as_ref()
                    .ok_or_else(|| PropagateError::NoMaskSource(v.scan_id.clone()))?;
                let truth = to_mask_stack(label);
                let set = informative_slices(&truth);
                let at = match seed_positions(set.len(), count, position) {
                    Ok(p) => p,
                    Err(PropagateError::TooManySeeds { .. }) => {
                        log::warn!("{}: {count} seeds do not fit {} informative slices, skipped", v.scan_id, set.len());
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let seeds: Vec<(usize, Mask)> = at
                    .iter()
                    .map(|&p| (set[p], truth.index_axis(Axis(0), set[p]).to_owned()))
                    .collect();
                let mut b = backend.build(Some(&truth)).map_err(backend_err(0))?;
                let pred = propagate_volume(v, &set, &seeds, b.as_mut())?;
                scores.push(dice_score_3d(pred.view(), truth.view()).expect("same shape"));
            }
            let (mean, std) = if scores.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&scores);
                (Some(m), Some(s))
            };
            cells.push(AblationCell {
                count,
                position,
                mean_dice: mean,
                std_dice: std,
                volumes: scores.len(),
                skipped,
            });
        }
    }
    Ok(AblationReport {
        note: ABLATION_NOTE.to_string(),
        backend: format!("{:?}", backend.backend),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{NullSegmenter, OracleSegmenter};
    use ndarray::{s, Array3};

    fn volume_with_organ(d: usize, lo: usize, hi: usize) -> Volume {
        let mut label = Array3::<u8>::zeros((12, 12, d));
        for k in lo..=hi {
            label.slice_mut(s![3..8, 4..9, k]).fill(1);
        }
        let voxels = Array3::from_shape_fn((12, 12, d), |(y, x, k)| (y + x + k) as f32);
        Volume::new("v", voxels, [1.0; 3], Some(label)).unwrap()
    }

    #[test]
    fn informative_set_and_reference() {
        let v = volume_with_organ(30, 10, 20);
        let set = informative_slices_of(&v, SliceSource::GroundTruth, None).unwrap();
        assert_eq!(set, (10..=20).collect::<Vec<_>>());
        assert_eq!(select_reference(&set).unwrap(), 15);
        assert_eq!(select_reference(&[4]).unwrap(), 4);
        assert_eq!(select_reference(&[2, 9]).unwrap(), 9);
        assert!(select_reference(&[]).is_err());
    }

    #[test]
    fn coarse_mode_sees_speckle() {
        let v = volume_with_organ(6, 1, 2);
        let mut coarse = MaskStack::zeros((6, 12, 12));
        coarse[[3, 0, 0]] = 1;
        assert_eq!(informative_slices_of(&v, SliceSource::Coarse, Some(&coarse)).unwrap(), vec![3]);
        let unlabeled = Volume::new("u", Array3::zeros((8, 8, 2)), [1.0; 3], None).unwrap();
        assert!(informative_slices_of(&unlabeled, SliceSource::GroundTruth, None).is_err());
    }

    #[test]
    fn oracle_propagation_reproduces_truth() {
        let v = volume_with_organ(30, 10, 20);
        let truth = to_mask_stack(v.label.as_ref().unwrap());
        let mut o = OracleSegmenter::new(truth.clone());
        assert_eq!(propagate_from_reference(&v, &mut o).unwrap(), truth);
        let set: Vec<usize> = (10..=20).collect();
        let seed = truth.index_axis(Axis(0), 10).to_owned();
        assert_eq!(propagate_volume(&v, &set, &[(10, seed)], &mut o).unwrap(), truth);
    }

    #[test]
    fn seed_validation() {
        let v = volume_with_organ(30, 10, 20);
        let set: Vec<usize> = (10..=20).collect();
        let truth = to_mask_stack(v.label.as_ref().unwrap());
        let mut o = OracleSegmenter::new(truth.clone());
        let seed = truth.index_axis(Axis(0), 12).to_owned();
        assert!(matches!(
            propagate_volume(&v, &set, &[(3, seed.clone())], &mut o),
            Err(PropagateError::SeedOutsideSet(3))
        ));
        assert!(matches!(
            propagate_volume(&v, &set, &[(12, Mask::zeros((12, 12)))], &mut o),
            Err(PropagateError::EmptySeed(12))
        ));
        let mut sam = BackendSpec::of(crate::segmenter::BackendKind::Sam).build(None).unwrap();
        assert!(matches!(
            propagate_volume(&v, &set, &[(12, seed)], sam.as_mut()),
            Err(PropagateError::NoPropagation(_))
        ));
    }

    /// Records which seed each frame was propagated from.
    struct Tagging {
        inner: NullSegmenter,
    }

    impl PromptableSegmenter for Tagging {
        fn name(&self) -> &str {
            "tagging"
        }
        fn capabilities(&self) -> crate::segmenter::Capabilities {
            self.inner.capabilities()
        }
        fn init_propagation(
            &mut self,
            frame: &Frame,
            seed: &Mask,
        ) -> Result<crate::segmenter::PropagationState, SegmenterError> {
            let mut st = self.inner.init_propagation(frame, seed)?;
            st.backend = "null".into();
            Ok(st)
        }
        fn propagate_step(
            &mut self,
            state: &mut crate::segmenter::PropagationState,
            next: &Frame,
        ) -> Result<Mask, SegmenterError> {
            self.inner.propagate_step(state, next)?;
            let mut m = Mask::zeros(next.shape());
            m[[0, state.reference]] = 1;
            m[[1, state.steps]] = 1;
            Ok(m)
        }
    }

    #[test]
    fn frames_follow_their_nearest_seed() {
        let v = volume_with_organ(12, 0, 11);
        let set: Vec<usize> = (0..12).collect();
        let mut seed = Mask::zeros((12, 12));
        seed[[5, 5]] = 1;
        let mut b = Tagging { inner: NullSegmenter };
        let out = propagate_volume(&v, &set, &[(2, seed.clone()), (7, seed)], &mut b).unwrap();
        let from = |k: usize| (0..12).find(|&c| out[[k, 0, c]] == 1);
        let steps = |k: usize| (0..12).find(|&c| out[[k, 1, c]] == 1);
        assert_eq!((from(0), steps(0)), (Some(2), Some(2)));
        assert_eq!((from(4), steps(4)), (Some(2), Some(2)));
        assert_eq!((from(5), steps(5)), (Some(7), Some(2)));
        assert_eq!((from(11), steps(11)), (Some(7), Some(4)));
        assert_eq!(out[[2, 5, 5]], 1);
    }

    #[test]
    fn single_seed_at_start_covers_everything_forward() {
        let v = volume_with_organ(30, 10, 20);
        let truth = to_mask_stack(v.label.as_ref().unwrap());
        let set = informative_slices(&truth);
        let at = seed_positions(set.len(), 1, SeedPosition::Beginning).unwrap();
        assert_eq!(at, vec![0]);
        let seeds = vec![(set[0], truth.index_axis(Axis(0), set[0]).to_owned())];
        let mut o = OracleSegmenter::new(truth.clone());
        assert_eq!(propagate_volume(&v, &set, &seeds, &mut o).unwrap(), truth);
    }

    #[test]
    fn seed_position_rules() {
        assert_eq!(seed_positions(11, 1, SeedPosition::Middle).unwrap(), vec![5]);
        assert_eq!(seed_positions(11, 1, SeedPosition::End).unwrap(), vec![10]);
        assert_eq!(seed_positions(12, 3, SeedPosition::Beginning).unwrap(), vec![0, 2, 3]);
        assert_eq!(seed_positions(12, 3, SeedPosition::End).unwrap(), vec![8, 10, 11]);
        assert_eq!(seed_positions(12, 2, SeedPosition::Middle).unwrap(), vec![4, 7]);
        assert_eq!(seed_positions(2, 2, SeedPosition::Middle).unwrap(), vec![0, 1]);
        assert!(matches!(
            seed_positions(2, 3, SeedPosition::Middle),
            Err(PropagateError::TooManySeeds { count: 3, available: 2 })
        ));
        for n in 1..40 {
            for c in 1..=n.min(3) {
                for p in [SeedPosition::Beginning, SeedPosition::Middle, SeedPosition::End] {
                    let at = seed_positions(n, c, p).unwrap();
                    assert_eq!(at.len(), c);
                    assert!(at.windows(2).all(|w| w[0] < w[1]));
                    assert!(*at.last().unwrap() < n);
                }
            }
        }
    }

    #[test]
    fn ablation_counts_skips() {
        let big = volume_with_organ(30, 10, 20);
        let small = volume_with_organ(30, 10, 11);
        let rep = ablation_grid(
            &[big, small],
            &[1, 3],
            &[SeedPosition::Middle],
            &BackendSpec::default(),
        )
        .unwrap();
        assert_eq!(rep.cells.len(), 2);
        let one = rep.cell(1, SeedPosition::Middle).unwrap();
        assert_eq!((one.volumes, one.skipped, one.mean_dice), (2, 0, Some(1.0)));
        let three = rep.cell(3, SeedPosition::Middle).unwrap();
        assert_eq!((three.volumes, three.skipped), (1, 1));
        assert!(rep.to_markdown().contains("| 3 |"));
    }

    #[test]
    fn frames_rescale_and_write() {
        let v = volume_with_organ(8, 2, 5);
        let pv = PseudoVideo::build(&v, &[2, 3, 4, 5]);
        for f in &pv.frames {
            assert_eq!(*f.pixels.iter().min().unwrap(), 0);
            assert_eq!(*f.pixels.iter().max().unwrap(), 255);
        }
        let dir = tempfile::tempdir().unwrap();
        pv.write_png_frames(dir.path()).unwrap();
        assert!(dir.path().join("00003.png").exists());
    }
}
