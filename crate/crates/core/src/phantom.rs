//! Synthetic CT phantoms: a noisy elliptical body with a spine, a few
//! organ-like distractor blobs, and one target ellipsoid whose exact voxel
//! mask is the label.

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("organ radius {radius} does not fit a volume of shape {shape:?}")]
    RadiusTooLarge { radius: f64, shape: [usize; 3] },
    #[error("invalid organ radius range ({0}, {1})")]
    InvalidRadiusRange(f64, f64),
    #[error("no phantom with both organ and organ-free slices after {0} attempts")]
    Exhausted(u32),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    /// Semi-axis range of the target organ, in voxels.
    pub organ_radius_range: (f64, f64),
    /// Through-plane semi-axis as a multiple of the in-plane draw.
    pub z_scale: f64,
    pub spacing: [f64; 3],
    pub organ_hu: (f32, f32),
    pub body_hu: f32,
    pub noise_hu: f32,
    pub distractors: usize,
    pub distractor_hu: (f32, f32),
    pub spine: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64, 64, 40],
            organ_radius_range: (5.0, 10.0),
            z_scale: 0.5,
            spacing: [1.0, 1.0, 2.5],
            organ_hu: (100.0, 140.0),
            body_hu: 40.0,
            noise_hu: 12.0,
            distractors: 2,
            distractor_hu: (100.0, 140.0),
            spine: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub requested_seed: u64,
    /// Differs from `requested_seed` when a draw had to be regenerated.
    pub seed_used: u64,
}

const MAX_ATTEMPTS: u32 = 64;

/// Default-configured phantom of the given shape and organ radius range.
pub fn make_phantom(
    seed: u64,
    shape: [usize; 3],
    organ_radius_range: (f64, f64),
) -> Result<Phantom, PhantomError> {
    let cfg = PhantomConfig {
        shape,
        organ_radius_range,
        ..PhantomConfig::default()
    };
    make_phantom_with(&cfg, seed)
}

pub fn make_phantom_with(cfg: &PhantomConfig, seed: u64) -> Result<Phantom, PhantomError> {
    validate(cfg)?;
    for attempt in 0..MAX_ATTEMPTS {
        let seed_used = seed.wrapping_add(u64::from(attempt));
        let volume = generate(cfg, seed_used, format!("phantom_{seed:04}"))?;
        if has_both_slice_classes(&volume) {
            if attempt > 0 {
                log::debug!("phantom seed {seed} regenerated with seed {seed_used}");
            }
            return Ok(Phantom {
                volume,
                requested_seed: seed,
                seed_used,
            });
        }
    }
    Err(PhantomError::Exhausted(MAX_ATTEMPTS))
}

fn validate(cfg: &PhantomConfig) -> Result<(), PhantomError> {
    let (lo, hi) = cfg.organ_radius_range;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(PhantomError::InvalidRadiusRange(lo, hi));
    }
    let [h, w, d] = cfg.shape;
    let fits_plane = 2.0 * hi + 1.0 <= 0.8 * h.min(w) as f64;
    let fits_depth = 2.0 * hi * cfg.z_scale + 1.0 < d as f64;
    if !(fits_plane && fits_depth) {
        return Err(PhantomError::RadiusTooLarge {
            radius: hi,
            shape: cfg.shape,
        });
    }
    Ok(())
}

fn has_both_slice_classes(v: &Volume) -> bool {
    let Some(label) = &v.label else { return false };
    let d = v.depth();
    let present: Vec<bool> = (0..d)
        .map(|k| label.index_axis(ndarray::Axis(2), k).iter().any(|&x| x == 1))
        .collect();
    present.iter().any(|&p| p) && present.iter().any(|&p| !p)
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn overlaps(&self, other: &Ellipsoid) -> bool {
        let gap: f64 = (0..2)
            .map(|a| (self.center[a] - other.center[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let reach = |e: &Ellipsoid| e.radii[0].max(e.radii[1]);
        gap < reach(self) + reach(other) + 1.0
    }
}

fn generate(cfg: &PhantomConfig, seed: u64, scan_id: String) -> Result<Volume, PhantomError> {
    let [h, w, d] = cfg.shape;
    let mut rng = rng::seeded(seed);
    let (hf, wf, df) = (h as f64, w as f64, d as f64);

    let body_ry = hf * rng.random_range(0.40..0.46);
    let body_rx = wf * rng.random_range(0.40..0.46);
    let (body_cy, body_cx) = (hf / 2.0 - 0.5, wf / 2.0 - 0.5);
    let in_body = |y: f64, x: f64, shrink: f64| {
        ((y - body_cy) / (body_ry - shrink)).powi(2) + ((x - body_cx) / (body_rx - shrink)).powi(2)
            <= 1.0
    };

    let (rlo, rhi) = cfg.organ_radius_range;
    let draw_r = |rng: &mut rng::Rng| {
        if rhi > rlo {
            rng.random_range(rlo..=rhi)
        } else {
            rlo
        }
    };
    let spine = Ellipsoid {
        center: [body_cy + body_ry * 0.72, body_cx, df / 2.0],
        radii: [hf * 0.07, wf * 0.07, f64::INFINITY],
    };

    let mut organ = None;
    for _ in 0..256 {
        let ry = draw_r(&mut rng);
        let rx = draw_r(&mut rng);
        let rz = (draw_r(&mut rng) * cfg.z_scale).max(0.5);
        let cy = rng.random_range(body_cy - body_ry..body_cy + body_ry);
        let cx = rng.random_range(body_cx - body_rx..body_cx + body_rx);
        let cz = df / 2.0 + rng.random_range(-0.15..0.15) * df;
        let cand = Ellipsoid {
            center: [cy, cx, cz],
            radii: [ry, rx, rz],
        };
        let inside = in_body(cy, cx, ry.max(rx) + 1.0);
        if inside && !(cfg.spine && cand.overlaps(&spine)) {
            organ = Some(cand);
            break;
        }
    }
    let organ = organ.unwrap_or(Ellipsoid {
        center: [body_cy - body_ry / 3.0, body_cx, df / 2.0],
        radii: [rlo, rlo, (rlo * cfg.z_scale).max(0.5)],
    });

    let mut distractors = Vec::with_capacity(cfg.distractors);
    for _ in 0..cfg.distractors {
        for _ in 0..256 {
            let r = draw_r(&mut rng) * rng.random_range(0.5..0.9);
            let rz = df * rng.random_range(0.2..0.5);
            let cy = rng.random_range(body_cy - body_ry..body_cy + body_ry);
            let cx = rng.random_range(body_cx - body_rx..body_cx + body_rx);
            let cz = df * rng.random_range(0.3..0.7);
            let cand = Ellipsoid {
                center: [cy, cx, cz],
                radii: [r, r * rng.random_range(0.7..1.3), rz],
            };
            let clear = !cand.overlaps(&organ)
                && !(cfg.spine && cand.overlaps(&spine))
                && distractors.iter().all(|(e, _): &(Ellipsoid, f32)| !cand.overlaps(e));
            if in_body(cy, cx, r * 1.3 + 1.0) && clear {
                let hu = rng.random_range(cfg.distractor_hu.0..=cfg.distractor_hu.1);
                distractors.push((cand, hu));
                break;
            }
        }
    }

    let organ_hu = rng.random_range(cfg.organ_hu.0..=cfg.organ_hu.1);
    let spine_hu = rng.random_range(400.0f32..700.0);
    let noise = Normal::new(0.0f32, cfg.noise_hu.max(0.0)).expect("finite noise sigma");

    let mut voxels = Array3::<f32>::zeros((h, w, d));
    let mut label = Array3::<u8>::zeros((h, w, d));
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                let p = [i as f64, j as f64, k as f64];
                let mut hu = if in_body(p[0], p[1], 0.0) {
                    cfg.body_hu
                } else {
                    -1000.0
                };
                if cfg.spine && spine.contains([p[0], p[1], spine.center[2]]) {
                    hu = spine_hu;
                }
                for (e, dhu) in &distractors {
                    if e.contains(p) {
                        hu = *dhu;
                    }
                }
                if organ.contains(p) {
                    hu = organ_hu;
                    label[[i, j, k]] = 1;
                }
                voxels[[i, j, k]] = hu + noise.sample(&mut rng);
            }
        }
    }
    Ok(Volume::new(scan_id, voxels, cfg.spacing, Some(label))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = make_phantom(3, [32, 32, 20], (3.0, 6.0)).unwrap();
        let b = make_phantom(3, [32, 32, 20], (3.0, 6.0)).unwrap();
        assert_eq!(a.volume, b.volume);
        let c = make_phantom(4, [32, 32, 20], (3.0, 6.0)).unwrap();
        assert_ne!(a.volume.voxels, c.volume.voxels);
    }

    #[test]
    fn foreground_fraction_is_small_but_positive() {
        let p = make_phantom(1, [64, 64, 40], (5.0, 10.0)).unwrap();
        let f = p.volume.foreground_fraction().unwrap();
        assert!(f > 0.0 && f < 0.5, "{f}");
        assert_eq!(p.volume.shape(), [64, 64, 40]);
    }

    #[test]
    fn both_slice_classes_exist() {
        for seed in 0..10 {
            let p = make_phantom(seed, [64, 64, 40], (5.0, 10.0)).unwrap();
            assert!(has_both_slice_classes(&p.volume));
        }
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let err = make_phantom(1, [16, 16, 8], (5.0, 20.0)).unwrap_err();
        assert!(matches!(err, PhantomError::RadiusTooLarge { .. }));
    }
}
