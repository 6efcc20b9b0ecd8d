use super::Image;
use crate::error::{contract_err, Result};

/// Sobel magnitudes are divided by this so a unit step maps into `[0, 1]`.
pub const SOBEL_NORM: f64 = 8.0 * std::f64::consts::SQRT_2;

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Running window sum along one axis with edge replication.
fn window_sums_1d(src: &[f64], stride: usize, n: usize, r: usize, out: &mut [f64]) {
    let r = r as isize;
    let at = |i: isize| src[clamp_index(i, n) * stride];
    let mut s: f64 = (-r..=r).map(at).sum();
    for i in 0..n as isize {
        out[i as usize * stride] = s;
        s += at(i + r + 1) - at(i - r);
    }
}

/// Mean over the `(2r+1)^2` window of one `h x w` plane, edge-replicated.
///
/// Sums run over values shifted by the plane's first sample so that a
/// constant plane yields exactly zero sums and the mean is exact.
fn box_plane(plane: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let offset = plane[0];
    let shifted: Vec<f64> = plane.iter().map(|v| v - offset).collect();
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        window_sums_1d(&shifted[y * w..], 1, w, r, &mut rows[y * w..]);
    }
    let mut both = vec![0.0; w * h];
    for x in 0..w {
        window_sums_1d(&rows[x..], w, h, r, &mut both[x..]);
    }
    let area = ((2 * r + 1) * (2 * r + 1)) as f64;
    both.iter().map(|s| offset + s / area).collect()
}

fn map_planes(img: &Image, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
    let planes: Vec<Vec<f64>> = (0..img.channels()).map(|c| f(&img.plane(c))).collect();
    Image::from_planes(img.width(), img.height(), &planes).expect("shape preserved")
}

/// Per-channel box mean of radius `r`, replicating border pixels.
pub fn box_filter(img: &Image, r: usize) -> Image {
    map_planes(img, |p| box_plane(p, img.width(), img.height(), r))
}

fn guided_plane(input: &[f64], guide: &[f64], w: usize, h: usize, r: usize, eps: f64) -> Vec<f64> {
    let (oi, og) = (input[0], guide[0]);
    let di: Vec<f64> = input.iter().map(|v| v - oi).collect();
    let dg: Vec<f64> = guide.iter().map(|v| v - og).collect();
    let mean_i = box_plane(&di, w, h, r);
    let mean_g = box_plane(&dg, w, h, r);
    let prod: Vec<f64> = di.iter().zip(&dg).map(|(a, b)| a * b).collect();
    let sq: Vec<f64> = dg.iter().map(|v| v * v).collect();
    let mean_ig = box_plane(&prod, w, h, r);
    let mean_gg = box_plane(&sq, w, h, r);
    let mut a = vec![0.0; w * h];
    let mut b = vec![0.0; w * h];
    for i in 0..w * h {
        let cov = mean_ig[i] - mean_i[i] * mean_g[i];
        let var = mean_gg[i] - mean_g[i] * mean_g[i];
        a[i] = cov / (var + eps);
        b[i] = (oi + mean_i[i]) - a[i] * (og + mean_g[i]);
    }
    let ma = box_plane(&a, w, h, r);
    let mb = box_plane(&b, w, h, r);
    (0..w * h).map(|i| ma[i] * guide[i] + mb[i]).collect()
}

/// Edge-preserving guided filter applied channel by channel.
///
/// A single-channel guide steers every channel of `input`; otherwise guide
/// channel `c` steers input channel `c`. Passing the input as its own guide
/// gives the self-guided smoother used by [`guided_noise`]. The output is not
/// clamped.
pub fn guided_filter(input: &Image, guide: &Image, r: usize, eps: f64) -> Result<Vec<Vec<f64>>> {
    if (input.width(), input.height()) != (guide.width(), guide.height()) {
        return Err(contract_err!("guide must match the input size"));
    }
    if guide.channels() != 1 && guide.channels() != input.channels() {
        return Err(contract_err!("guide has {} channels, input {}", guide.channels(), input.channels()));
    }
    if eps <= 0.0 {
        return Err(contract_err!("guided filter eps must be positive, got {eps}"));
    }
    let (w, h) = (input.width(), input.height());
    Ok((0..input.channels())
        .map(|c| {
            let g = guide.plane(if guide.channels() == 1 { 0 } else { c });
            guided_plane(&input.plane(c), &g, w, h, r, eps)
        })
        .collect())
}

/// ITU-R BT.601 luminance; a single-channel image is returned unchanged.
pub fn luminance(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    Image::from_fn(img.width(), img.height(), 1, |x, y, _| {
        0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2)
    })
}

/// Normalised Sobel gradient magnitude of the luminance, edge-replicated.
pub fn sobel(img: &Image) -> Image {
    let lum = luminance(img);
    let (w, h) = (img.width(), img.height());
    let at = |x: isize, y: isize| lum.get(clamp_index(x, w), clamp_index(y, h), 0);
    Image::from_fn(w, h, 1, |x, y, _| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        gx.hypot(gy) / SOBEL_NORM
    })
}

/// Intermediate maps of the guided-noise extractor.
#[derive(Clone, Debug)]
pub struct GuidedNoiseResult {
    /// Self-guided filter output, unclamped.
    pub content: Vec<Vec<f64>>,
    /// `|I - content|` per channel.
    pub residual: Image,
    /// Sobel magnitude, one channel.
    pub edges: Image,
    /// `clamp(residual + edges)` with edges replicated across channels.
    pub noise: Image,
}

/// Noise view of an image: the guided-filter residual plus Sobel edges.
pub fn guided_noise(img: &Image, r: usize, eps: f64) -> Result<GuidedNoiseResult> {
    let content = guided_filter(img, img, r, eps)?;
    let planes: Vec<Vec<f64>> = content
        .iter()
        .enumerate()
        .map(|(c, q)| img.plane(c).iter().zip(q).map(|(i, q)| (i - q).abs()).collect())
        .collect();
    let residual = Image::from_planes(img.width(), img.height(), &planes)?;
    let edges = sobel(img);
    let e = edges.plane(0);
    let noise_planes: Vec<Vec<f64>> = planes.iter().map(|p| p.iter().zip(&e).map(|(a, b)| a + b).collect()).collect();
    let noise = Image::from_planes(img.width(), img.height(), &noise_planes)?;
    Ok(GuidedNoiseResult { content, residual, edges, noise })
}
