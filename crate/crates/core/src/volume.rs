//! CT volumes, Hounsfield windowing and slice extraction.
//!
//! A [`Volume`] holds raw intensities (Hounsfield units) until
//! [`window_level`] maps them into `[0, 1]`. Only normalized volumes can be
//! sliced with [`extract_middle_slices`].

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod nifti_io;

pub use nifti_io::{load_volume, save_volume};

/// Binary 2D mask; values are 0 or 1.
pub type Mask = Array2<u8>;
/// Slice-major mask stack, `[slice, row, col]`.
pub type MaskStack = Array3<u8>;

pub const DEFAULT_WINDOW_CENTER: f32 = 40.0;
pub const DEFAULT_WINDOW_WIDTH: f32 = 400.0;
pub const DEFAULT_RESOLUTION: usize = 256;
pub const MIN_IN_PLANE: usize = 8;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume file not found: {0}")]
    MissingFile(PathBuf),
    #[error("expected a 3D scalar image in {path}, found {ndim} dimension(s)")]
    NotThreeDimensional { path: PathBuf, ndim: usize },
    #[error("label shape {label:?} does not match image shape {image:?}")]
    LabelShapeMismatch {
        image: [usize; 3],
        label: [usize; 3],
    },
    #[error("label contains non-binary value {0}")]
    NonBinaryLabel(f32),
    #[error("invalid volume shape {0:?}: need H, W >= 8 and D >= 1")]
    InvalidShape([usize; 3]),
    #[error("spacing must be positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("window width must be positive, got {0}")]
    InvalidWindowWidth(f32),
    #[error("volume {0} is already window-leveled")]
    AlreadyNormalized(String),
    #[error("volume {0} must be window-leveled before slicing")]
    NotNormalized(String),
    #[error("slice fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("target resolution must be at least {MIN_IN_PLANE}, got {0}")]
    InvalidResolution(usize),
    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// A 3D scan laid out as `(H, W, D)`; the third axis indexes slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing: [f64; 3],
    pub label: Option<Array3<u8>>,
    pub scan_id: String,
    normalized: bool,
}

impl Volume {
    pub fn new(
        scan_id: impl Into<String>,
        voxels: Array3<f32>,
        spacing: [f64; 3],
        label: Option<Array3<u8>>,
    ) -> Result<Self> {
        let shape = dims(&voxels);
        if shape[0] < MIN_IN_PLANE || shape[1] < MIN_IN_PLANE || shape[2] == 0 {
            return Err(VolumeError::InvalidShape(shape));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        if let Some(label) = &label {
            let lshape = dims(label);
            if lshape != shape {
                return Err(VolumeError::LabelShapeMismatch {
                    image: shape,
                    label: lshape,
                });
            }
            if let Some(&bad) = label.iter().find(|&&v| v > 1) {
                return Err(VolumeError::NonBinaryLabel(bad as f32));
            }
        }
        Ok(Self {
            voxels,
            spacing,
            label,
            scan_id: scan_id.into(),
            normalized: false,
        })
    }

    /// Stacks equally sized slices along the third axis. The result is
    /// flagged as normalized when every pixel already lies in `[0, 1]`.
    pub fn from_slices(scan_id: impl Into<String>, slices: &[SliceRecord]) -> Result<Self> {
        let (h, w) = slices
            .first()
            .map(|s| s.pixels.dim())
            .ok_or(VolumeError::InvalidShape([0, 0, 0]))?;
        let d = slices.len();
        let mut voxels = Array3::<f32>::zeros((h, w, d));
        let with_label = slices.iter().all(|s| s.mask.is_some());
        let mut label = with_label.then(|| Array3::<u8>::zeros((h, w, d)));
        for (k, rec) in slices.iter().enumerate() {
            if rec.pixels.dim() != (h, w) {
                return Err(VolumeError::InvalidShape([rec.pixels.nrows(), rec.pixels.ncols(), d]));
            }
            voxels.index_axis_mut(Axis(2), k).assign(&rec.pixels);
            if let (Some(label), Some(mask)) = (label.as_mut(), rec.mask.as_ref()) {
                label.index_axis_mut(Axis(2), k).assign(mask);
            }
        }
        let mut vol = Volume::new(scan_id, voxels, [1.0, 1.0, 1.0], label.take())?;
        vol.normalized = vol.voxels.iter().all(|v| (0.0..=1.0).contains(v));
        Ok(vol)
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.voxels)
    }

    pub fn depth(&self) -> usize {
        self.voxels.len_of(Axis(2))
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn slice(&self, k: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(Axis(2), k)
    }

    pub fn label_slice(&self, k: usize) -> Option<ArrayView2<'_, u8>> {
        self.label.as_ref().map(|l| l.index_axis(Axis(2), k))
    }

    /// Fraction of label voxels that are foreground.
    pub fn foreground_fraction(&self) -> Option<f64> {
        self.label
            .as_ref()
            .map(|l| l.iter().filter(|&&v| v == 1).count() as f64 / l.len() as f64)
    }
}

fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let (h, w, d) = a.dim();
    [h, w, d]
}

/// One preprocessed slice with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub scan_id: String,
    pub slice_index: usize,
    pub pixels: Array2<f32>,
    /// `None` when the source volume carried no label.
    pub organ_present: Option<bool>,
    pub mask: Option<Mask>,
}

impl SliceRecord {
    pub fn key(&self) -> String {
        format!("{}:{}", self.scan_id, self.slice_index)
    }
}

/// Clips to `[center - width/2, center + width/2]` and maps that window
/// affinely onto `[0, 1]`. A volume may only be windowed once.
pub fn window_level(v: &Volume, center: f32, width: f32) -> Result<Volume> {
    if !(width.is_finite() && width > 0.0) {
        return Err(VolumeError::InvalidWindowWidth(width));
    }
    if v.normalized {
        return Err(VolumeError::AlreadyNormalized(v.scan_id.clone()));
    }
    let lo = center - width / 2.0;
    let hi = center + width / 2.0;
    let voxels = v.voxels.mapv(|x| window_value(x, lo, hi));
    Ok(Volume {
        voxels,
        spacing: v.spacing,
        label: v.label.clone(),
        scan_id: v.scan_id.clone(),
        normalized: true,
    })
}

#[inline]
fn window_value(x: f32, lo: f32, hi: f32) -> f32 {
    if x.is_nan() || x <= lo {
        0.0
    } else if x >= hi {
        1.0
    } else {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Fraction of a scan's slices kept around its center, validated to `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SliceFraction(f64);

impl SliceFraction {
    pub fn new(f: f64) -> Result<Self> {
        if f.is_finite() && f > 0.0 && f <= 1.0 {
            Ok(Self(f))
        } else {
            Err(VolumeError::InvalidFraction(f))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `ceil(fraction * n)` clamped to `n`, tolerant of float noise such as
    /// `0.3 * 10 = 3.0000000000000004`.
    pub fn count_of(self, n: usize) -> usize {
        let raw = self.0 * n as f64;
        let count = (raw - 1e-9).ceil().max(1.0) as usize;
        count.min(n)
    }
}

impl TryFrom<f64> for SliceFraction {
    type Error = VolumeError;
    fn try_from(f: f64) -> Result<Self> {
        Self::new(f)
    }
}

impl From<SliceFraction> for f64 {
    fn from(f: SliceFraction) -> f64 {
        f.0
    }
}

/// Contiguous slice range of `fraction.count_of(depth)` slices centered on
/// `depth / 2`; an even count puts the extra slice on the low-index side.
pub fn middle_slice_range(depth: usize, fraction: SliceFraction) -> std::ops::Range<usize> {
    if depth == 0 {
        return 0..0;
    }
    let count = fraction.count_of(depth);
    let start = depth / 2 - count / 2;
    start..start + count
}

/// Extracts the middle slices of a normalized volume, resized to
/// `resolution x resolution` (bilinear for pixels, nearest for masks).
pub fn extract_middle_slices(
    v: &Volume,
    fraction: SliceFraction,
    resolution: usize,
) -> Result<Vec<SliceRecord>> {
    if !v.normalized {
        return Err(VolumeError::NotNormalized(v.scan_id.clone()));
    }
    if resolution < MIN_IN_PLANE {
        return Err(VolumeError::InvalidResolution(resolution));
    }
    let records = middle_slice_range(v.depth(), fraction)
        .map(|k| {
            let pixels = resize_bilinear(v.slice(k), resolution, resolution);
            let mask = v
                .label_slice(k)
                .map(|m| resize_nearest(m, resolution, resolution));
            let organ_present = mask.as_ref().map(|m| m.iter().any(|&p| p == 1));
            SliceRecord {
                scan_id: v.scan_id.clone(),
                slice_index: k,
                pixels,
                organ_present,
                mask,
            }
        })
        .collect();
    Ok(records)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = axis(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize; output values are a subset of input values.
pub fn resize_nearest<T: Copy>(src: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let pick = |dst: usize, len: usize, out: usize| {
        (((dst as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| src[[pick(y, h, out_h), pick(x, w, out_w)]])
}

/// Per-frame rescale to the 8-bit range: min maps to 0, max to 255.
pub fn rescale_to_u8(frame: ArrayView2<'_, f32>) -> Array2<u8> {
    let (lo, hi) = frame
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    frame.mapv(|v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    })
}

/// Conventional dataset layout: `images/<id>.nii.gz` with optional
/// `labels/<id>.nii.gz`.
pub fn dataset_paths(root: &Path, scan_id: &str) -> (PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{scan_id}.nii.gz")),
        root.join("labels").join(format!("{scan_id}.nii.gz")),
    )
}

/// Copies slice `k` of a 3D array, used when building mask stacks.
pub fn label_stack_slice(label: &Array3<u8>, k: usize) -> Mask {
    label.slice(s![.., .., k]).to_owned()
}

/// Reorders an `[H, W, D]` label volume into a slice-major stack.
pub fn to_mask_stack(label: &Array3<u8>) -> MaskStack {
    label.view().permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
}

/// Inverse of [`to_mask_stack`].
pub fn from_mask_stack(stack: &MaskStack) -> Array3<u8> {
    stack.view().permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp_volume(values: &[f32]) -> Volume {
        let mut voxels = Array3::<f32>::zeros((8, 8, values.len()));
        for (k, &v) in values.iter().enumerate() {
            voxels.index_axis_mut(Axis(2), k).fill(v);
        }
        Volume::new("ramp", voxels, [1.0, 1.0, 1.0], None).unwrap()
    }

    #[test]
    fn window_boundaries() {
        let v = ramp_volume(&[-160.0, 40.0, 500.0, -1024.0, 240.0]);
        let w = window_level(&v, 40.0, 400.0).unwrap();
        let got: Vec<f32> = (0..5).map(|k| w.slice(k)[[0, 0]]).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 0.0, 1.0]);
        assert!(w.is_normalized());
    }

    #[test]
    fn window_rejects_bad_width_and_double_application() {
        let v = ramp_volume(&[0.0]);
        assert!(matches!(
            window_level(&v, 40.0, 0.0),
            Err(VolumeError::InvalidWindowWidth(_))
        ));
        let w = window_level(&v, 40.0, 400.0).unwrap();
        assert!(matches!(
            window_level(&w, 40.0, 400.0),
            Err(VolumeError::AlreadyNormalized(_))
        ));
    }

    #[test]
    fn middle_range_examples() {
        let f = SliceFraction::new(0.3).unwrap();
        assert_eq!(middle_slice_range(10, f), 4..7);
        assert_eq!(middle_slice_range(1, f), 0..1);
        assert_eq!(middle_slice_range(10, SliceFraction::new(1.0).unwrap()), 0..10);
        assert_eq!(middle_slice_range(4, SliceFraction::new(0.5).unwrap()), 1..3);
    }

    #[test]
    fn fraction_bounds() {
        assert!(SliceFraction::new(0.0).is_err());
        assert!(SliceFraction::new(1.2).is_err());
        assert!(SliceFraction::new(f64::NAN).is_err());
        assert!(SliceFraction::new(1.0).is_ok());
    }

    #[test]
    fn label_mismatch_is_named() {
        let img = Array3::<f32>::zeros((64, 64, 40));
        let lab = Array3::<u8>::zeros((64, 64, 39));
        let err = Volume::new("x", img, [1.0; 3], Some(lab)).unwrap_err();
        assert!(matches!(err, VolumeError::LabelShapeMismatch { .. }));
    }

    #[test]
    fn extract_requires_normalization() {
        let v = ramp_volume(&[0.0, 1.0, 2.0]);
        let f = SliceFraction::new(0.3).unwrap();
        assert!(matches!(
            extract_middle_slices(&v, f, 8),
            Err(VolumeError::NotNormalized(_))
        ));
    }

    #[test]
    fn extract_resizes_and_flags_organ() {
        let mut voxels = Array3::<f32>::zeros((16, 16, 3));
        let mut label = Array3::<u8>::zeros((16, 16, 3));
        label[[4, 4, 1]] = 1;
        voxels[[4, 4, 1]] = 200.0;
        let v = Volume::new("a", voxels, [1.0; 3], Some(label)).unwrap();
        let v = window_level(&v, 40.0, 400.0).unwrap();
        let recs = extract_middle_slices(&v, SliceFraction::new(1.0).unwrap(), 32).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].pixels.dim(), (32, 32));
        assert_eq!(
            recs.iter().map(|r| r.organ_present).collect::<Vec<_>>(),
            vec![Some(false), Some(true), Some(false)]
        );
        assert!(recs[1].mask.as_ref().unwrap().iter().all(|&m| m <= 1));
    }

    #[test]
    fn resize_identity_and_constant() {
        let a = Array2::from_shape_fn((9, 9), |(i, j)| (i * 9 + j) as f32);
        assert_eq!(resize_bilinear(a.view(), 9, 9), a);
        let c = Array2::from_elem((10, 12), 0.25f32);
        assert!(resize_bilinear(c.view(), 7, 31).iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn rescale_maps_extremes() {
        let a = Array2::from_shape_vec((1, 3), vec![0.2f32, 0.5, 0.8]).unwrap();
        let r = rescale_to_u8(a.view());
        assert_eq!(r.as_slice().unwrap(), &[0, 128, 255]);
        let flat = Array2::from_elem((2, 2), 0.3f32);
        assert!(rescale_to_u8(flat.view()).iter().all(|&v| v == 0));
    }
}
