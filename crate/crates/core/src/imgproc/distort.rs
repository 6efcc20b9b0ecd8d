use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::error::{contract_err, Error, Result};
use crate::tensor::kernels::bilinear_resize;

/// Standard JPEG luminance quantisation table, row-major.
pub const LUMINANCE_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Post-processing applied to an image before inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    /// Bilinear downscale by the factor, then back to the original size.
    Resize(f64),
    /// Gaussian blur with an odd kernel size.
    Blur(usize),
    /// Additive Gaussian noise with standard deviation `sigma / 255`.
    Noise(f64),
    /// JPEG-style DCT quantisation at the given quality.
    Jpeg(u8),
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::Resize(v) => write!(f, "resize:{v}"),
            Distortion::Blur(k) => write!(f, "blur:{k}"),
            Distortion::Noise(s) => write!(f, "noise:{s}"),
            Distortion::Jpeg(q) => write!(f, "jpeg:{q}"),
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid distortion `{s}`; expected resize:F, blur:K, noise:S or jpeg:Q"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let d = match kind {
            "resize" => Distortion::Resize(arg.parse().map_err(|_| bad())?),
            "blur" => Distortion::Blur(arg.parse().map_err(|_| bad())?),
            "noise" => Distortion::Noise(arg.parse().map_err(|_| bad())?),
            "jpeg" => Distortion::Jpeg(arg.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

impl Distortion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::Resize(f) if !(f > 0.0 && f <= 1.0) => Err(contract_err!("resize factor must be in (0, 1], got {f}")),
            Distortion::Blur(k) if k == 0 || k % 2 == 0 => Err(contract_err!("blur kernel must be odd, got {k}")),
            Distortion::Noise(s) if !(s >= 0.0 && s.is_finite()) => Err(contract_err!("noise sigma must be >= 0, got {s}")),
            Distortion::Jpeg(q) if !(1..=100).contains(&q) => Err(contract_err!("jpeg quality must be in 1..=100, got {q}")),
            _ => Ok(()),
        }
    }
}

/// Applies a distortion; the output is clamped to `[0, 1]`. `seed` only
/// matters for additive noise.
pub fn distort(img: &Image, d: Distortion, seed: u64) -> Result<Image> {
    d.validate()?;
    let (w, h) = (img.width(), img.height());
    let planes: Vec<Vec<f64>> = (0..img.channels()).map(|c| img.plane(c)).collect();
    let out: Vec<Vec<f64>> = match d {
        Distortion::Resize(f) => {
            let sw = ((w as f64 * f).round() as usize).max(1);
            let sh = ((h as f64 * f).round() as usize).max(1);
            planes
                .iter()
                .map(|p| bilinear_resize(&bilinear_resize(p, 1, h, w, sh, sw), 1, sh, sw, h, w))
                .collect()
        }
        Distortion::Blur(k) => {
            let kernel = gaussian_kernel(k);
            planes.iter().map(|p| separable_blur(p, w, h, &kernel)).collect()
        }
        Distortion::Noise(sigma) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::Contract(e.to_string()))?;
            let mut data = img.data().to_vec();
            data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            return Image::new(w, h, img.channels(), data);
        }
        Distortion::Jpeg(q) => {
            let table = jpeg_quant_table(q);
            planes.iter().map(|p| jpeg_plane(p, w, h, &table)).collect()
        }
    };
    Image::from_planes(w, h, &out)
}

/// Normalised 1-D Gaussian with `sigma = 0.3 ((k - 1) / 2 - 1) + 0.8`.
pub fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let half = (k / 2) as f64;
    let raw: Vec<f64> = (0..k).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn separable_blur(p: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * p[y * w + clamp(x as isize + i as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - half, h) * w + x])
                .sum();
        }
    }
    out
}

/// Luminance table scaled for `quality`, entries clamped to at least 1.
pub fn jpeg_quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(LUMINANCE_QUANT.iter()) {
        *o = ((t as u32 * scale + 50) / 100).max(1) as f64;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (0.125f64).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// Quantises one plane in 8x8 blocks. Partial blocks at the border are
/// padded by edge replication; the result is rounded to 8-bit levels.
fn jpeg_plane(p: &[f64], w: usize, h: usize, table: &[f64; 64]) -> Vec<f64> {
    let basis = dct_basis();
    let mut out = vec![0.0; w * h];
    let mut block = [0.0; 64];
    let mut coef = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = (p[sy * w + sx] * 255.0).round() - 128.0;
                }
            }
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += basis[u][y] * basis[v][x] * block[y * 8 + x];
                        }
                    }
                    let qv = table[u * 8 + v];
                    coef[u * 8 + v] = (s / qv).round() * qv;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += basis[u][y] * basis[v][x] * coef[u * 8 + v];
                        }
                    }
                    out[(by + y) * w + bx + x] = ((s + 128.0).round().clamp(0.0, 255.0)) / 255.0;
                }
            }
        }
    }
    out
}
