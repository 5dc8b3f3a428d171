use ndarray::Array3;
use polycl_core::phantom::make_phantom;
use polycl_core::volume::nifti_io::{load_mask, save_mask};
use polycl_core::volume::{load_volume, save_volume, Volume, VolumeError};

#[test]
fn phantom_survives_write_and_read() {
    let dir = tempfile::tempdir().unwrap();
    let v = make_phantom(3, [24, 20, 10], (3.0, 5.0)).unwrap().volume;
    let (img, lab) = save_volume(dir.path(), &v).unwrap();
    assert!(lab.is_some());
    let back = load_volume(&img).unwrap();
    assert_eq!(back.scan_id, v.scan_id);
    assert_eq!(back.shape(), v.shape());
    assert_eq!(back.voxels, v.voxels);
    assert_eq!(back.label, v.label);
    for (a, b) in back.spacing.iter().zip(v.spacing) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn image_without_label_has_none() {
    let dir = tempfile::tempdir().unwrap();
    let voxels = Array3::from_shape_fn((8, 9, 3), |(y, x, k)| (y * 100 + x * 10 + k) as f32);
    let v = Volume::new("plain", voxels.clone(), [0.8, 0.8, 2.5], None).unwrap();
    let (img, lab) = save_volume(dir.path(), &v).unwrap();
    assert!(lab.is_none());
    let back = load_volume(&img).unwrap();
    assert_eq!(back.voxels, voxels);
    assert!(back.label.is_none());
}

#[test]
fn masks_are_binarized_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nii.gz");
    let mut m = Array3::<u8>::zeros((8, 8, 4));
    m[[1, 2, 3]] = 1;
    m[[4, 4, 0]] = 2;
    save_mask(&path, &m, [1.0; 3]).unwrap();
    let back = load_mask(&path).unwrap();
    assert_eq!(back[[1, 2, 3]], 1);
    assert_eq!(back[[4, 4, 0]], 1);
    assert_eq!(back.sum(), 2);
}

#[test]
fn garbage_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.nii");
    std::fs::write(&path, b"not a nifti file").unwrap();
    assert!(load_volume(&path).is_err());
    assert!(matches!(
        load_volume(&dir.path().join("missing.nii")),
        Err(VolumeError::MissingFile(_))
    ));
}
