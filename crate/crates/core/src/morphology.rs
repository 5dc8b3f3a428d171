//! Binary morphology on 2D masks: disk dilation / erosion and 8-connected
//! component labeling.

use ndarray::Array2;

use crate::volume::Mask;

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation by a Euclidean disk of `radius` pixels.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let offsets = disk(radius);
    let mut out = Mask::zeros((h, w));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                out[[yy as usize, xx as usize]] = 1;
            }
        }
    }
    out
}

/// Erosion by a Euclidean disk; pixels outside the image count as
/// background.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let offsets = disk(radius);
    Mask::from_shape_fn((h, w), |(y, x)| {
        if mask[[y, x]] == 0 {
            return 0;
        }
        let keep = offsets.iter().all(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[[yy as usize, xx as usize]] != 0
        });
        u8::from(keep)
    })
}

/// Component label per pixel (0 = background, 1.. = components in raster
/// order of their first pixel) and the component count.
pub fn label_components(mask: &Mask) -> (Array2<u32>, u32) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}
