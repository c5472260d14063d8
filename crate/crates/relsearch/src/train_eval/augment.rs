//! Stochastic augmentation pipeline over (x, y, z) volumes.
//!
//! A plan's five slots are applied in order; each fires independently
//! with probability 0.15.  The fire draw is taken for every slot before
//! any parameter draw, so a slot's rng footprint does not depend on
//! whether later slots fire.  Spatial transforms move image and label
//! identically (label resampled nearest-neighbor); intensity transforms
//! touch the image only.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::rng::randn;
use crate::search_space::AugmentationPlan;
use crate::tape::trilinear_resize_array;

/// Per-slot activation probability.
pub const FIRE_PROB: f64 = 0.15;
/// Zoom factor range.
pub const ZOOM_RANGE: (f64, f64) = (0.9, 1.1);
/// Additive Gaussian noise sigma.
pub const NOISE_SIGMA: f64 = 0.1;
/// Intensity shift range.
pub const SHIFT_RANGE: (f64, f64) = (-0.1, 0.1);
/// Intensity scale range (scale-shift candidate).
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

fn flip3<T: Clone>(a: &ArrayD<T>, axis: usize) -> ArrayD<T> {
    let mut v = a.clone();
    v.invert_axis(Axis(axis));
    v.as_standard_layout().to_owned()
}

/// Rotate 90 degrees in the XY plane: voxel (x, y, z) moves to
/// (y, X-1-x, z).  Identity when X != Y (the rotation would change the
/// shape).
fn rot90_xy<T: Clone>(a: &ArrayD<T>) -> ArrayD<T> {
    let s = a.shape();
    let (sx, sy) = (s[0], s[1]);
    if sx != sy {
        return a.clone();
    }
    ArrayD::from_shape_fn(IxDyn(s), |idx| a[[sx - 1 - idx[1], idx[0], idx[2]]].clone())
}

/// Nearest-neighbor resize with the same half-pixel-center source
/// coordinates as the trilinear kernel; per-axis taps round to the
/// closer voxel.
pub fn nearest_resize3<T: Clone>(a: &ArrayD<T>, out_dims: [usize; 3]) -> ArrayD<T> {
    let s = a.shape();
    let taps: Vec<Vec<usize>> = (0..3)
        .map(|axis| {
            let (in_len, out_len) = (s[axis], out_dims[axis]);
            let scale = in_len as f64 / out_len as f64;
            (0..out_len)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                    (src + 0.5).floor() as usize
                })
                .collect()
        })
        .collect();
    ArrayD::from_shape_fn(IxDyn(&out_dims), |idx| {
        a[[taps[0][idx[0]], taps[1][idx[1]], taps[2][idx[2]]]].clone()
    })
}

fn zoom_dims(s: &[usize], factor: f64) -> [usize; 3] {
    [0, 1, 2].map(|a| ((s[a] as f64 * factor).round() as usize).max(1))
}

/// Center crop or zero-pad a volume back to `target` (pad value 0).
fn center_fit_f64(a: &ArrayD<f64>, target: [usize; 3]) -> ArrayD<f64> {
    center_fit(a, target, 0.0)
}

fn center_fit<T: Clone>(a: &ArrayD<T>, target: [usize; 3], fill: T) -> ArrayD<T> {
    let s = a.shape();
    let mut out = ArrayD::from_elem(IxDyn(&target), fill);
    // Overlap window between source and target, both centered.
    let src_start = [0, 1, 2].map(|i| s[i].saturating_sub(target[i]) / 2);
    let dst_start = [0, 1, 2].map(|i| target[i].saturating_sub(s[i]) / 2);
    let span = [0, 1, 2].map(|i| s[i].min(target[i]));
    for x in 0..span[0] {
        for y in 0..span[1] {
            for z in 0..span[2] {
                out[[dst_start[0] + x, dst_start[1] + y, dst_start[2] + z]] = a
                    [[src_start[0] + x, src_start[1] + y, src_start[2] + z]]
                    .clone();
            }
        }
    }
    out
}

fn zoom_image(image: &ArrayD<f64>, factor: f64) -> ArrayD<f64> {
    let s = image.shape();
    let zd = zoom_dims(s, factor);
    let with_chan = image
        .clone()
        .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
        .unwrap();
    let zoomed = trilinear_resize_array(&with_chan, zd);
    let back = zoomed
        .into_shape_with_order(IxDyn(&zd))
        .unwrap();
    center_fit_f64(&back, [s[0], s[1], s[2]])
}

fn zoom_label(label: &ArrayD<u8>, factor: f64) -> ArrayD<u8> {
    let s = label.shape();
    let zd = zoom_dims(s, factor);
    let zoomed = nearest_resize3(label, zd);
    center_fit(&zoomed, [s[0], s[1], s[2]], 0u8)
}

/// Apply a plan's slots in order, returning the augmented pair.
pub fn apply_augmentations<R: Rng>(
    plan: &AugmentationPlan,
    image: ArrayD<f64>,
    label: ArrayD<u8>,
    rng: &mut R,
) -> (ArrayD<f64>, ArrayD<u8>) {
    let (mut image, mut label) = (image, label);
    for &slot in &plan.slots {
        let fires = rng.gen::<f64>() < FIRE_PROB;
        if !fires {
            continue;
        }
        match slot {
            0 | 1 | 2 => {
                let axis = slot as usize;
                image = flip3(&image, axis);
                label = flip3(&label, axis);
            }
            3 => {
                image = rot90_xy(&image);
                label = rot90_xy(&label);
            }
            4 => {
                let factor = rng.gen_range(ZOOM_RANGE.0..ZOOM_RANGE.1);
                image = zoom_image(&image, factor);
                label = zoom_label(&label, factor);
            }
            5 => {
                for v in image.iter_mut() {
                    *v += NOISE_SIGMA * randn(rng);
                }
            }
            6 => {
                let shift = rng.gen_range(SHIFT_RANGE.0..SHIFT_RANGE.1);
                image.mapv_inplace(|v| v + shift);
            }
            7 => {
                let scale = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
                let shift = rng.gen_range(SHIFT_RANGE.0..SHIFT_RANGE.1);
                image.mapv_inplace(|v| v * scale + shift);
            }
            _ => unreachable!("validated plans have slots in 0..8"),
        }
    }
    (image, label)
}
