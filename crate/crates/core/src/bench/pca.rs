use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Rng, Tensor};

pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-7;
/// Components with eigenvalue below this fraction of the total variance
/// count as zero variance.
const ZERO_VARIANCE_REL: f64 = 1e-10;
const GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcaImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
    /// Channels that had no variance and were filled with gray.
    pub gray_channels: [bool; 3],
}

impl PcaImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Mean-centered rows as f64.
fn centered<E: Element>(features: &Tensor<E>) -> (Vec<f64>, usize, usize) {
    let (n, d) = (features.rows(), features.cols());
    let mut x = features.to_f64_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= mean;
        }
    }
    (x, n, d)
}

fn covariance(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for row in x.chunks_exact(d) {
        for a in 0..d {
            for b in a..d {
                c[a * d + b] += row[a] * row[b];
            }
        }
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = c[a * d + b] / denom;
            c[a * d + b] = v;
            c[b * d + a] = v;
        }
    }
    c
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Top `k` covariance eigenpairs `(λ, v)` by power iteration with deflation.
/// Zero-variance components come back with `λ = 0` and a zero vector.
pub fn top_components<E: Element>(features: &Tensor<E>, k: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if features.rank() != 2 || features.rows() == 0 || features.cols() == 0 {
        return Err(Error::shape("pca features", features.shape(), &[0, 0]));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite { op: "pca" });
    }
    let (x, n, d) = centered(features);
    let mut c = covariance(&x, n, d);
    let trace: f64 = (0..d).map(|i| c[i * d + i]).sum();
    let floor = ZERO_VARIANCE_REL * trace;
    let mut rng = Rng::new(0x5ca1e);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| c[a * d + b] * v[b]).sum()).collect();
            lambda = normalize(&mut w);
            if lambda == 0.0 {
                break;
            }
            canonical_sign(&mut w);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if delta < POWER_TOL {
                break;
            }
        }
        if trace <= 0.0 || lambda <= floor {
            out.push((0.0, vec![0.0; d]));
            continue;
        }
        canonical_sign(&mut v);
        let rayleigh: f64 = (0..d)
            .map(|a| v[a] * (0..d).map(|b| c[a * d + b] * v[b]).sum::<f64>())
            .sum();
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] -= rayleigh * v[a] * v[b];
            }
        }
        out.push((rayleigh, v));
    }
    Ok(out)
}

/// Project `N×D` patch features (CLS excluded) onto their top three
/// principal components and lay them out as a `grid_w × grid_h` RGB image.
pub fn pca_rgb<E: Element>(features: &Tensor<E>, grid_w: usize, grid_h: usize) -> Result<PcaImage> {
    if features.rank() != 2 || features.rows() != grid_w * grid_h {
        return Err(Error::shape("pca_rgb", features.shape(), &[grid_w * grid_h, 0]));
    }
    let comps = top_components(features, 3)?;
    let (x, n, d) = centered(features);
    let mut rgb = vec![GRAY; 3 * n];
    let mut gray_channels = [false; 3];
    for (ch, (lambda, v)) in comps.iter().enumerate() {
        let proj: Vec<f64> = x.chunks_exact(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if *lambda == 0.0 || hi - lo <= 0.0 {
            gray_channels[ch] = true;
            continue;
        }
        for (i, p) in proj.iter().enumerate() {
            rgb[3 * i + ch] = (255.0 * (p - lo) / (hi - lo)).round() as u8;
        }
    }
    if gray_channels.iter().any(|&g| g) {
        log::warn!("pca: zero-variance channels {gray_channels:?} rendered gray");
    }
    Ok(PcaImage {
        width: grid_w,
        height: grid_h,
        rgb,
        gray_channels,
    })
}
