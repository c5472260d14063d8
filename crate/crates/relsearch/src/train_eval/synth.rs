//! Synthetic segmentation volumes: an ellipsoidal organ with small
//! interior lesions, smoothed class intensities, and additive noise.
//!
//! Volumes are generated from independent per-volume rng streams so a
//! dataset is a pure function of (count, size, num_classes, seed).
//! Datasets serialize to a directory of raw little-endian f32 / u8
//! arrays plus a JSON manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{randn, stream_rng};

/// Mean intensity per class before smoothing and noise.
pub const CLASS_INTENSITY: [f64; 3] = [0.15, 0.55, 0.85];
/// Additive intensity noise sigma.
pub const INTENSITY_NOISE_SIGMA: f64 = 0.05;

/// One image/label pair; image is (1, x, y, z) in [0,1], label (x, y, z).
#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    pub image: ArrayD<f64>,
    pub label: ArrayD<u8>,
}

/// A generated dataset plus the knobs that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub volumes: Vec<SyntheticVolume>,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - self.center[a]) / self.semi[a];
            acc += d * d;
        }
        acc <= 1.0
    }
}

/// Separable 3-point smoothing ([0.25, 0.5, 0.25] per axis, replicated
/// edges).
fn smooth3(a: &ArrayD<f64>) -> ArrayD<f64> {
    let s: Vec<usize> = a.shape().to_vec();
    let mut cur = a.clone();
    for axis in 0..3 {
        let next = ArrayD::from_shape_fn(IxDyn(&s), |idx| {
            let i = idx[axis];
            let mut lo = idx.clone();
            let mut hi = idx.clone();
            lo[axis] = i.saturating_sub(1);
            hi[axis] = (i + 1).min(s[axis] - 1);
            0.25 * cur[&lo] + 0.5 * cur[&idx] + 0.25 * cur[&hi]
        });
        cur = next;
    }
    cur
}

fn generate_volume<R: Rng>(size: usize, num_classes: usize, rng: &mut R) -> SyntheticVolume {
    let fsize = size as f64;
    let half = fsize / 2.0;
    let jitter = fsize / 8.0;
    let organ = Ellipsoid {
        center: [0; 3].map(|_| half + rng.gen_range(-jitter..jitter)),
        semi: [0; 3].map(|_| rng.gen_range(0.22 * fsize..0.38 * fsize)),
    };

    let mut label = ArrayD::<u8>::zeros(IxDyn(&[size, size, size]));
    let mut organ_voxels = Vec::new();
    for x in 0..size {
        for y in 0..size {
            for z in 0..size {
                if organ.contains([x, y, z]) {
                    label[[x, y, z]] = 1;
                    organ_voxels.push([x, y, z]);
                }
            }
        }
    }

    if num_classes > 2 && !organ_voxels.is_empty() {
        let lesions = rng.gen_range(1..=3usize);
        for _ in 0..lesions {
            let center = organ_voxels[rng.gen_range(0..organ_voxels.len())];
            let lesion = Ellipsoid {
                center: center.map(|c| c as f64),
                semi: [0; 3].map(|_| rng.gen_range(0.06 * fsize..0.14 * fsize)),
            };
            // Lesion label only where the organ already is.
            for &[x, y, z] in &organ_voxels {
                if lesion.contains([x, y, z]) {
                    label[[x, y, z]] = 2;
                }
            }
        }
    }

    let base = ArrayD::from_shape_fn(IxDyn(&[size, size, size]), |idx| {
        CLASS_INTENSITY[label[&idx] as usize]
    });
    let mut image = smooth3(&base);
    for v in image.iter_mut() {
        *v = (*v + INTENSITY_NOISE_SIGMA * randn(rng)).clamp(0.0, 1.0);
    }
    let image = image
        .into_shape_with_order(IxDyn(&[1, size, size, size]))
        .unwrap();
    SyntheticVolume { image, label }
}

/// Generate `count` volumes of side `size` with `num_classes` in {2, 3}.
pub fn make_synthetic_dataset(
    count: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> SyntheticDataset {
    assert!(
        (2..=3).contains(&num_classes),
        "num_classes must be 2 or 3"
    );
    let volumes = (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            generate_volume(size, num_classes, &mut rng)
        })
        .collect();
    SyntheticDataset {
        volumes,
        size,
        num_classes,
        seed,
    }
}

#[derive(Serialize, Deserialize)]
struct VolumeEntry {
    image: String,
    label: String,
    image_shape: Vec<usize>,
    label_shape: Vec<usize>,
    class_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    count: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    volumes: Vec<VolumeEntry>,
}

fn class_counts(label: &ArrayD<u8>, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &c in label.iter() {
        counts[c as usize] += 1;
    }
    counts
}

/// Write a dataset as raw arrays plus `manifest.json` under `dir`.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, vol) in ds.volumes.iter().enumerate() {
        let image_name = format!("vol_{i:04}.image.raw");
        let label_name = format!("vol_{i:04}.label.raw");
        let mut buf = Vec::with_capacity(vol.image.len() * 4);
        for &v in vol.image.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::File::create(dir.join(&image_name))?.write_all(&buf)?;
        let lbuf: Vec<u8> = vol.label.iter().copied().collect();
        fs::File::create(dir.join(&label_name))?.write_all(&lbuf)?;
        entries.push(VolumeEntry {
            image: image_name,
            label: label_name,
            image_shape: vol.image.shape().to_vec(),
            label_shape: vol.label.shape().to_vec(),
            class_counts: class_counts(&vol.label, ds.num_classes),
        });
    }
    let manifest = DatasetManifest {
        schema_version: crate::SCHEMA_VERSION,
        count: ds.volumes.len(),
        size: ds.size,
        num_classes: ds.num_classes,
        seed: ds.seed,
        volumes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut volumes = Vec::with_capacity(manifest.count);
    for entry in &manifest.volumes {
        let mut buf = Vec::new();
        fs::File::open(dir.join(&entry.image))?.read_to_end(&mut buf)?;
        let expect: usize = entry.image_shape.iter().product();
        if buf.len() != expect * 4 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} f32 values", expect),
                actual: format!("{} bytes in {}", buf.len(), entry.image),
            });
        }
        let image_vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let image = ArrayD::from_shape_vec(IxDyn(&entry.image_shape), image_vals)
            .map_err(|e| Error::ShapeMismatch {
                expected: format!("{:?}", entry.image_shape),
                actual: e.to_string(),
            })?;

        let mut lbuf = Vec::new();
        fs::File::open(dir.join(&entry.label))?.read_to_end(&mut lbuf)?;
        let label = ArrayD::from_shape_vec(IxDyn(&entry.label_shape), lbuf).map_err(|e| {
            Error::ShapeMismatch {
                expected: format!("{:?}", entry.label_shape),
                actual: e.to_string(),
            }
        })?;
        volumes.push(SyntheticVolume { image, label });
    }
    Ok(SyntheticDataset {
        volumes,
        size: manifest.size,
        num_classes: manifest.num_classes,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lesions_stay_inside_the_organ() {
        // Binary mode consumes the same organ draws from the same
        // stream, so its class-1 set IS the organ mask; every 3-class
        // lesion voxel must fall inside it.
        let full = make_synthetic_dataset(6, 16, 3, 1);
        let organ_only = make_synthetic_dataset(6, 16, 2, 1);
        for (v3, v2) in full.volumes.iter().zip(&organ_only.volumes) {
            for (&c3, &c2) in v3.label.iter().zip(v2.label.iter()) {
                if c3 == 2 {
                    assert_eq!(c2, 1, "lesion voxel outside the organ");
                }
                // Organ membership itself is unchanged by lesion carving.
                assert_eq!(c3 > 0, c2 == 1);
            }
        }
    }

    #[test]
    fn background_is_the_majority_class() {
        let ds = make_synthetic_dataset(8, 16, 3, 2);
        for vol in &ds.volumes {
            let counts = class_counts(&vol.label, 3);
            assert!(counts[0] > counts[1] + counts[2], "{counts:?}");
        }
    }

    #[test]
    fn every_volume_has_organ_and_lesion() {
        let ds = make_synthetic_dataset(8, 16, 3, 3);
        for vol in &ds.volumes {
            let counts = class_counts(&vol.label, 3);
            assert!(counts[1] > 0);
            assert!(counts[2] > 0);
        }
    }

    #[test]
    fn binary_mode_has_no_lesion_class() {
        let ds = make_synthetic_dataset(4, 16, 2, 4);
        for vol in &ds.volumes {
            assert!(vol.label.iter().all(|&c| c < 2));
            assert!(vol.label.iter().any(|&c| c == 1));
        }
    }

    #[test]
    fn image_lies_in_unit_range_with_volume_shape() {
        let ds = make_synthetic_dataset(3, 16, 3, 5);
        for vol in &ds.volumes {
            assert_eq!(vol.image.shape(), &[1, 16, 16, 16]);
            assert_eq!(vol.label.shape(), &[16, 16, 16]);
            assert!(vol.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = make_synthetic_dataset(3, 16, 3, 6);
        let b = make_synthetic_dataset(3, 16, 3, 6);
        let c = make_synthetic_dataset(3, 16, 3, 7);
        for (va, vb) in a.volumes.iter().zip(&b.volumes) {
            assert_eq!(va.image, vb.image);
            assert_eq!(va.label, vb.label);
        }
        assert!(a
            .volumes
            .iter()
            .zip(&c.volumes)
            .any(|(x, y)| x.label != y.label));
    }

    #[test]
    fn save_load_round_trips() {
        let dir = std::env::temp_dir().join(format!("relsearch-synth-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let ds = make_synthetic_dataset(2, 16, 3, 8);
        save_dataset(&ds, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.volumes.len(), 2);
        assert_eq!(back.num_classes, 3);
        assert_eq!(back.seed, 8);
        for (orig, got) in ds.volumes.iter().zip(&back.volumes) {
            assert_eq!(orig.label, got.label);
            assert_eq!(orig.image.shape(), got.image.shape());
            // Images pass through f32 on disk.
            for (a, b) in orig.image.iter().zip(got.image.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn smoothing_preserves_a_constant_field() {
        let a = ArrayD::from_elem(IxDyn(&[5, 5, 5]), 0.3);
        let s = smooth3(&a);
        for v in s.iter() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }
}
