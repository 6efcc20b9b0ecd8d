//! Images, binary PNM I/O, the guided-noise extractor and the post-processing
//! distortions used for robustness sweeps.

mod distort;
mod filters;

use std::fs;
use std::path::Path;

pub use distort::{distort, gaussian_kernel, jpeg_quant_table, Distortion, LUMINANCE_QUANT};
pub use filters::{box_filter, guided_filter, guided_noise, luminance, sobel, GuidedNoiseResult, SOBEL_NORM};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(contract_err!("images have 1 or 3 channels, got {channels}"));
        }
        if width * height * channels != data.len() {
            return Err(dim_err!("{width}x{height}x{channels} image needs {} values, got {}", width * height * channels, data.len()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid dimensions")
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data).expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// One channel as a contiguous `height x width` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; width * height * channels];
        for (c, p) in planes.iter().enumerate() {
            if p.len() != width * height {
                return Err(dim_err!("plane {c} has {} values, expected {}", p.len(), width * height));
            }
            for (i, v) in p.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize8(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0).collect();
        Self { data, ..*self }
    }

    /// `1 x C x H x W` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        let planes: Vec<f64> = (0..self.channels).flat_map(|c| self.plane(c)).collect();
        Tensor::new(&[1, self.channels, self.height, self.width], planes).expect("consistent shape")
    }

    /// Inverse of [`Image::to_tensor`]; accepts `1 x C x H x W` or `C x H x W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4();
        if n != 1 || t.rank() < 3 {
            return Err(dim_err!("expected a single image tensor, got {:?}", t.shape()));
        }
        let planes: Vec<Vec<f64>> = t.data().chunks(h * w).map(|p| p.to_vec()).collect();
        debug_assert_eq!(planes.len(), c);
        Self::from_planes(w, h, &planes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        decode_pnm(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode_pnm())?;
        Ok(())
    }

    /// Binary PGM (1 channel) or PPM (3 channels), maxval 255.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }
}

/// Parses binary P5/P6 with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let err = |offset: usize, msg: &str| Error::Parse { offset, msg: msg.to_string() };
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<(usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (at, magic) = token(&mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(err(at, "expected P5 or P6 magic")),
    };
    let number = |pos: &mut usize, what: &str| -> Result<(usize, usize)> {
        let (at, t) = token(pos)?;
        t.parse::<usize>().map(|v| (at, v)).map_err(|_| err(at, &format!("invalid {what} `{t}`")))
    };
    let (_, width) = number(&mut pos, "width")?;
    let (_, height) = number(&mut pos, "height")?;
    let (maxval_at, maxval) = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, &format!("only maxval 255 is supported, got {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() - pos < need {
        return Err(err(bytes.len(), &format!("truncated payload: need {need} bytes after offset {pos}")));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_bytes_map_to_unit_interval() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 128, 255, 64]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn rejects_sixteen_bit_maxval() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend([0u8; 6]);
        match decode_pnm(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_offset() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend([1u8; 5]);
        let e = decode_pnm(&bytes).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        assert!(e.to_string().contains("truncated"));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn write_read_within_half_step() {
        let img = Image::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 17 + c * 7) % 97) as f64 / 96.3);
        let back = decode_pnm(&img.encode_pnm()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = Image::new(1, 1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 1]);
        assert_eq!(t.data(), &[0.1, 0.2, 0.3]);
        let wide = Image::filled(5, 2, 3, 0.5);
        assert_eq!(wide.to_tensor().shape(), &[1, 3, 2, 5]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(6, 4, 3, |x, y, c| (x + 2 * y + 3 * c) as f64 / 30.0);
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn constructor_clamps() {
        let img = Image::new(2, 1, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }
}
