//! Synthetic oriented-grating classification data and its raw file format.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"VADS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub noise_std: f64,
    /// Grating cycles across the image.
    pub frequency: f64,
}

impl DatasetSpec {
    pub fn new(seed: u64, num_samples: usize, num_classes: usize, image_size: usize) -> Self {
        DatasetSpec {
            seed,
            num_samples,
            num_classes,
            image_size,
            noise_std: 0.05,
            frequency: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_samples < self.num_classes {
            return Err(Error::Config(format!(
                "need at least one sample per class (n = {}, C = {})",
                self.num_samples, self.num_classes
            )));
        }
        if self.image_size == 0 || self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config("image size must be positive and noise std nonnegative".into()));
        }
        Ok(())
    }
}

/// One `3×S×S` image in `[0, 1]` with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Noise-free grating intensity at column `x`, row `y`.
pub fn grating_value(x: usize, y: usize, theta: f64, frequency: f64, size: usize, phase: f64) -> f64 {
    let u = x as f64 * theta.cos() + y as f64 * theta.sin();
    0.5 + 0.4 * (2.0 * PI * frequency * u / size as f64 + phase).sin()
}

/// Orientation of class `label` out of `classes`.
pub fn class_orientation(label: usize, classes: usize) -> f64 {
    PI * label as f64 / classes as f64
}

fn render(spec: &DatasetSpec, index: usize) -> Sample {
    let s = spec.image_size;
    let label = index % spec.num_classes;
    let theta = class_orientation(label, spec.num_classes);
    let mut rng = Rng::substream(spec.seed, index as u64);
    let phase = 2.0 * PI * rng.uniform();
    let mut plane = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let noise = if spec.noise_std > 0.0 { spec.noise_std * rng.normal() } else { 0.0 };
            let v = (grating_value(x, y, theta, spec.frequency, s, phase) + noise).clamp(0.0, 1.0);
            plane.push(v as f32);
        }
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Sample {
        image: Tensor::new(&[3, s, s], data).expect("shape matches buffer"),
        label,
    }
}

/// Sample `i` has label `i mod C` and depends only on `(seed, i)`.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.num_samples).map(|i| render(spec, i)).collect())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Reflect-pad, random crop back to `S×S`, brightness jitter, clamp.
pub fn augment(img: &Tensor<f32>, rng: &mut Rng, crop_pad: usize, jitter: f64) -> Result<Tensor<f32>> {
    let (c, s) = match img.shape() {
        [c, h, w] if h == w => (*c, *h),
        other => return Err(Error::shape("augment", other, &[3, 0, 0])),
    };
    if crop_pad >= s {
        return Err(Error::Param(format!("crop padding {crop_pad} must be below image size {s}")));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::Param(format!("jitter {jitter} outside [0, 0.5)")));
    }
    let (ox, oy) = if crop_pad > 0 {
        let span = 2 * crop_pad + 1;
        (rng.below(span) as isize, rng.below(span) as isize)
    } else {
        (0, 0)
    };
    let factor = if jitter > 0.0 { 1.0 - jitter + 2.0 * jitter * rng.uniform() } else { 1.0 };
    let pad = crop_pad as isize;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..s {
            let sy = reflect(y as isize + oy - pad, s);
            for x in 0..s {
                let sx = reflect(x as isize + ox - pad, s);
                let v = src[ch * s * s + sy * s + sx] as f64 * factor;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(&[c, s, s], out)
}

/// Stack images into a `B×3×S×S` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

/// Serialize samples in the raw dataset format.
pub fn encode_raw(samples: &[Sample], num_classes: usize) -> Result<Vec<u8>> {
    let s = samples
        .first()
        .map(|x| x.image.shape()[1])
        .ok_or_else(|| Error::Param("cannot write an empty dataset".into()))?;
    let mut out = Vec::with_capacity(20 + samples.len() * (4 + 12 * s * s));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, samples.len() as u32, num_classes as u32, s as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in samples {
        if x.image.shape() != [3, s, s] {
            return Err(Error::shape("write_raw", x.image.shape(), &[3, s, s]));
        }
        if x.label >= num_classes {
            return Err(Error::Label {
                label: x.label,
                classes: num_classes,
            });
        }
        out.extend_from_slice(&(x.label as u32).to_le_bytes());
        for v in x.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse the raw dataset format, returning samples and the class count.
pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<(Vec<Sample>, usize)> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "VADS",
        });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: 20,
            found: bytes.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, n, classes, s) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != DATASET_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    if s == 0 || classes == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "zero image size or class count".into(),
        });
    }
    let record = 4 + 12 * s * s;
    let needed = 20 + n as u64 * record as u64;
    let found = bytes.len() as u64;
    if found < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found,
        });
    }
    if found > needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("header declares {n} records but {} extra bytes follow", found - needed),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for rec in bytes[20..].chunks_exact(record) {
        let label = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")) as usize;
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let data: Vec<f32> = rec[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "non-finite pixel".into(),
            });
        }
        samples.push(Sample {
            image: Tensor::new(&[3, s, s], data)?,
            label,
        });
    }
    Ok((samples, classes))
}

pub fn write_raw(path: &Path, samples: &[Sample], num_classes: usize) -> Result<()> {
    std::fs::write(path, encode_raw(samples, num_classes)?).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<(Vec<Sample>, usize)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_robin() {
        let d = gen_synthetic(&DatasetSpec::new(1, 4, 4, 8)).unwrap();
        assert_eq!(d.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_crossing_is_half() {
        // phase 0 at the origin puts (0,0) on a zero-crossing for every orientation
        for label in 0..4 {
            let v = grating_value(0, 0, class_orientation(label, 4), 4.0, 32, 0.0);
            assert!((v - 0.5).abs() < 1e-15);
        }
        // vertical stripes: column 4 of a 4-cycle, 32-pixel grating is half a period
        let v = grating_value(4, 17, 0.0, 4.0, 32, 0.0);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn noise_free_single_class_matches_formula() {
        let mut spec = DatasetSpec::new(3, 2, 1, 16);
        spec.noise_std = 0.0;
        let d = gen_synthetic(&spec).unwrap();
        let mut rng = Rng::substream(3, 1);
        let phase = 2.0 * PI * rng.uniform();
        let want = grating_value(5, 9, 0.0, 4.0, 16, phase) as f32;
        assert_eq!(d[1].image.data()[9 * 16 + 5], want);
    }

    #[test]
    fn deterministic_and_bounded() {
        let spec = DatasetSpec::new(42, 8, 4, 16);
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        assert!(a.iter().all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_eq!(encode_raw(&a, 4).unwrap(), encode_raw(&gen_synthetic(&spec).unwrap(), 4).unwrap());
    }

    #[test]
    fn rejects_fewer_samples_than_classes() {
        assert!(gen_synthetic(&DatasetSpec::new(0, 3, 4, 8)).is_err());
    }

    #[test]
    fn augment_identity_and_jitter() {
        let d = gen_synthetic(&DatasetSpec::new(5, 1, 1, 8)).unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(augment(&d[0].image, &mut rng, 0, 0.0).unwrap(), d[0].image);

        let flat = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        let out = augment(&flat, &mut Rng::new(9), 0, 0.2).unwrap();
        let f = out.data()[0] / 0.5;
        assert!((0.8..=1.2).contains(&f));
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }
}
