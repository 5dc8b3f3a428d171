//! NIfTI reading and writing. Only voxel spacing is taken from the header;
//! the affine is ignored.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{Result, Volume, VolumeError};

/// Loads `path` as a raw-HU volume. A label is attached when a sibling file
/// exists under `../labels/` with the same file name. Nonzero label values
/// are treated as foreground.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let label_path = sibling_label_path(path).filter(|p| p.exists());
    load_volume_with_label(path, label_path.as_deref())
}

pub fn load_volume_with_label(path: &Path, label_path: Option<&Path>) -> Result<Volume> {
    let (voxels, spacing) = read_array(path)?;
    let label = label_path
        .map(|lp| read_array(lp).map(|(l, _)| l.mapv(|v| u8::from(v > 0.5))))
        .transpose()?;
    if let Some(label) = &label {
        if label.dim() != voxels.dim() {
            let (h, w, d) = voxels.dim();
            let (lh, lw, ld) = label.dim();
            return Err(VolumeError::LabelShapeMismatch {
                image: [h, w, d],
                label: [lh, lw, ld],
            });
        }
    }
    Volume::new(scan_id_of(path), voxels, spacing, label)
}

/// `.../images/<name>` maps to `.../labels/<name>`.
pub fn sibling_label_path(path: &Path) -> Option<PathBuf> {
    let parent = path.parent()?;
    if parent.file_name()? != "images" {
        return None;
    }
    Some(parent.parent()?.join("labels").join(path.file_name()?))
}

/// File name with `.nii` / `.nii.gz` stripped.
pub fn scan_id_of(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn read_array(path: &Path) -> Result<(Array3<f32>, [f64; 3])> {
    if !path.exists() {
        return Err(VolumeError::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header();
    let pixdim = header.pixdim;
    let mut data = obj.into_volume().into_ndarray::<f32>()?;
    // Trailing singleton axes (e.g. a 4D file with t = 1) are squeezed.
    while data.ndim() > 3 && data.shape().last() == Some(&1) {
        let last = ndarray::Axis(data.ndim() - 1);
        data = data.index_axis_move(last, 0);
    }
    let ndim = data.ndim();
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| VolumeError::NotThreeDimensional {
            path: path.to_path_buf(),
            ndim,
        })?;
    let spacing = [1, 2, 3].map(|i| {
        let s = pixdim[i].abs() as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    Ok((data, spacing))
}

/// Writes the image as float32 and, when present, the label as uint8 into
/// `<root>/images/<id>.nii.gz` and `<root>/labels/<id>.nii.gz`.
pub fn save_volume(root: &Path, v: &Volume) -> Result<(PathBuf, Option<PathBuf>)> {
    let (img_path, lab_path) = super::dataset_paths(root, &v.scan_id);
    std::fs::create_dir_all(img_path.parent().expect("images dir"))?;
    let header = header_with_spacing(v.spacing);
    WriterOptions::new(&img_path)
        .reference_header(&header)
        .write_nifti(&v.voxels)?;
    let lab = match &v.label {
        Some(label) => {
            std::fs::create_dir_all(lab_path.parent().expect("labels dir"))?;
            WriterOptions::new(&lab_path)
                .reference_header(&header)
                .write_nifti(label)?;
            Some(lab_path)
        }
        None => None,
    };
    Ok((img_path, lab))
}

/// Writes a single 3D mask array, e.g. a predicted mask stack.
pub fn save_mask(path: &Path, mask: &Array3<u8>, spacing: [f64; 3]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = header_with_spacing(spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(mask)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Array3<u8>> {
    let (a, _) = read_array(path)?;
    Ok(a.mapv(|v| u8::from(v > 0.5)))
}

fn header_with_spacing(spacing: [f64; 3]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim[0] = 1.0;
    for (i, s) in spacing.iter().enumerate() {
        header.pixdim[i + 1] = *s as f32;
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_is_named() {
        let err = load_volume(Path::new("/definitely/not/here.nii.gz")).unwrap_err();
        assert!(matches!(err, VolumeError::MissingFile(_)));
    }

    #[test]
    fn scan_ids_strip_extensions() {
        assert_eq!(scan_id_of(Path::new("a/images/liver_3.nii.gz")), "liver_3");
        assert_eq!(scan_id_of(Path::new("b.nii")), "b");
    }

    #[test]
    fn label_sibling_only_under_images() {
        assert_eq!(
            sibling_label_path(Path::new("/d/images/x.nii.gz")),
            Some(PathBuf::from("/d/labels/x.nii.gz"))
        );
        assert_eq!(sibling_label_path(Path::new("/d/other/x.nii.gz")), None);
    }
}
