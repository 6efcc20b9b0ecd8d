//! Deterministic synthetic forgeries: splicing, copy-move and removal on
//! smooth procedural backgrounds, with exact binary masks (1 = forged).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{contract_err, Error, Result};
use crate::imgproc::Image;

/// Per-pixel noise of generated backgrounds, in 8-bit units.
pub const BACKGROUND_NOISE: f64 = 2.0;

/// Inpainting sweeps used to fill removed regions.
pub const INPAINT_ITERATIONS: usize = 50;

/// Default range of region fractions when no bucket cap is given.
pub const DEFAULT_FRACTION_RANGE: (f64, f64) = (0.01, 0.20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Forgery {
    Splice,
    CopyMove,
    Removal,
    Authentic,
}

impl Forgery {
    pub const ALL: [Forgery; 4] = [Self::Splice, Self::CopyMove, Self::Removal, Self::Authentic];
}

impl fmt::Display for Forgery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Splice => "splice",
            Self::CopyMove => "copy-move",
            Self::Removal => "removal",
            Self::Authentic => "authentic",
        })
    }
}

impl FromStr for Forgery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown forgery type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub seed: u64,
    pub size: usize,
    pub forgery: Forgery,
    /// Target fraction of forged pixels, in (0, 1).
    pub region_fraction: f64,
    pub shape: Shape,
    /// Exclusive upper bound on the forged fraction, if any.
    pub area_cap: Option<f64>,
}

impl SampleSpec {
    /// Shape and region fraction drawn from `seed`; with a cap the fraction is
    /// drawn from `[cap / 4, cap)`.
    pub fn random(seed: u64, size: usize, forgery: Forgery, cap: Option<f64>) -> Result<Self> {
        if let Some(c) = cap {
            check_cap(c, size)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5bec);
        let (lo, hi) = match cap {
            Some(c) => (c / 4.0, c),
            None => DEFAULT_FRACTION_RANGE,
        };
        let region_fraction = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
        let shape = if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        Ok(Self { seed, size, forgery, region_fraction, shape, area_cap: cap })
    }
}

fn check_cap(cap: f64, size: usize) -> Result<()> {
    if !(cap > 0.0 && cap <= 1.0) || cap * (size * size) as f64 <= 1.0 {
        return Err(contract_err!(
            "bucket cap {cap} admits no region of at least one pixel on a {size}x{size} image"
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Single channel, exactly 0 or 1.
    pub mask: Image,
    pub spec: SampleSpec,
    /// Copy-move translation: destination = source + offset.
    pub offset: Option<(isize, isize)>,
}

impl Sample {
    pub fn area_fraction(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.data().len() as f64
    }
}

fn background_with_noise(seed: u64, size: usize, sigma: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = Vec::with_capacity(3);
    let s = size as f64;
    for _ in 0..3 {
        let base: f64 = rng.gen_range(0.28..0.72);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.03..0.08), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let plane: Vec<f64> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                base + waves
                    .iter()
                    .map(|(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * x + fy * y) / s + ph).cos())
                    .sum::<f64>()
            })
            .collect();
        planes.push(plane);
    }
    let noise = Normal::new(0.0, sigma / 255.0).expect("non-negative sigma");
    for plane in &mut planes {
        for v in plane.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Image::from_planes(size, size, &planes).expect("sized").quantize8()
}

/// Smooth procedural RGB background with seeded per-pixel Gaussian noise of
/// standard deviation `2/255`, quantized to 8 bits.
pub fn gen_background(seed: u64, size: usize) -> Image {
    background_with_noise(seed, size, BACKGROUND_NOISE)
}

/// Pixel membership of a centred shape with half extents `(a, b)`.
fn rasterize(shape: Shape, size: usize, (cx, cy): (f64, f64), (a, b): (f64, f64)) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let dx = ((i % size) as f64 + 0.5 - cx) / a;
            let dy = ((i / size) as f64 + 0.5 - cy) / b;
            match shape {
                Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
            }
        })
        .collect()
}

/// Region whose pixel count is as close to the target as the rasterization
/// allows, strictly below `max_pixels`.
fn place_region(spec: &SampleSpec, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let size = spec.size;
    let total = (size * size) as f64;
    if !(spec.region_fraction > 0.0 && spec.region_fraction < 1.0) {
        return Err(contract_err!("region fraction must lie in (0, 1), got {}", spec.region_fraction));
    }
    let target = spec.region_fraction * total;
    let max_pixels = match spec.area_cap {
        Some(c) => {
            check_cap(c, size)?;
            (c * total).ceil() as usize - 1
        }
        None => usize::MAX,
    };
    let aspect: f64 = rng.gen_range(0.5f64..2.0).sqrt();
    let unit_area = match spec.shape {
        Shape::Rectangle => 4.0,
        Shape::Ellipse => std::f64::consts::PI,
    };
    let s0 = (target / unit_area).sqrt();
    let (ha, hb) = (1.1 * s0 * aspect + 1.0, 1.1 * s0 / aspect + 1.0);
    if 2.0 * ha > size as f64 || 2.0 * hb > size as f64 {
        return Err(contract_err!("region of {target:.1} pixels does not fit inside a {size}x{size} image"));
    }
    let cx = rng.gen_range(ha..=size as f64 - ha);
    let cy = rng.gen_range(hb..=size as f64 - hb);
    let count = |s: f64| rasterize(spec.shape, size, (cx, cy), (s * aspect, s / aspect)).iter().filter(|v| **v).count();
    // smallest scale reaching the target, then pick the closer neighbour
    let (mut lo, mut hi) = (0.0, 1.1 * s0 + 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if (count(mid) as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let candidates = [lo, hi];
    let best = candidates
        .iter()
        .copied()
        .filter(|&s| count(s) > 0 && count(s) <= max_pixels)
        .min_by(|&a, &b| (count(a) as f64 - target).abs().total_cmp(&(count(b) as f64 - target).abs()))
        .ok_or_else(|| contract_err!("no region satisfies the area cap"))?;
    Ok(rasterize(spec.shape, size, (cx, cy), (best * aspect, best / aspect)))
}

fn bounding_box(region: &[bool], size: usize) -> (usize, usize, usize, usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
    for (i, _) in region.iter().enumerate().filter(|(_, v)| **v) {
        let (x, y) = (i % size, i / size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x0, y0, x1, y1)
}

/// Applies the forgery described by `spec` to `background`.
pub fn forge(background: &Image, spec: &SampleSpec) -> Result<Sample> {
    let size = spec.size;
    if background.width() != size || background.height() != size || background.channels() != 3 {
        return Err(contract_err!("background must be {size}x{size} RGB"));
    }
    let mut image = background.clone();
    let empty = Image::filled(size, size, 1, 0.0);
    if spec.forgery == Forgery::Authentic {
        return Ok(Sample { image, mask: empty, spec: spec.clone(), offset: None });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xf0_46e7);
    let region = place_region(spec, &mut rng)?;
    let (x0, y0, x1, y1) = bounding_box(&region, size);
    let mut offset = None;
    match spec.forgery {
        Forgery::Splice => {
            let sigma = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.8) } else { rng.gen_range(4.0..7.0) };
            let donor = background_with_noise(rng.gen(), size, sigma);
            // take the donor patch from a random location of the donor image
            let sx = rng.gen_range(0..=size - 1 - (x1 - x0)) as isize - x0 as isize;
            let sy = rng.gen_range(0..=size - 1 - (y1 - y0)) as isize - y0 as isize;
            for (i, _) in region.iter().enumerate().filter(|(_, v)| **v) {
                let (x, y) = ((i % size) as isize, (i / size) as isize);
                for c in 0..3 {
                    let v = donor.get((x + sx) as usize, (y + sy) as usize, c);
                    image.set(x as usize, y as usize, c, v);
                }
            }
        }
        Forgery::CopyMove => {
            let (w, h) = ((x1 - x0) as isize, (y1 - y0) as isize);
            let max = size as isize - 1;
            let mut pick = || {
                let sx = rng.gen_range(0..=max - w);
                let sy = rng.gen_range(0..=max - h);
                (x0 as isize - sx, y0 as isize - sy)
            };
            let disjoint = |(dx, dy): (isize, isize)| dx.abs() > w || dy.abs() > h;
            let mut chosen = pick();
            for _ in 0..100 {
                if disjoint(chosen) {
                    break;
                }
                chosen = pick();
            }
            if chosen == (0, 0) {
                chosen = if x0 > 0 { (1, 0) } else { (-1, 0) };
            }
            let (dx, dy) = chosen;
            for (i, _) in region.iter().enumerate().filter(|(_, v)| **v) {
                let (x, y) = ((i % size) as isize, (i / size) as isize);
                for c in 0..3 {
                    let v = background.get((x - dx) as usize, (y - dy) as usize, c);
                    image.set(x as usize, y as usize, c, v);
                }
            }
            offset = Some(chosen);
        }
        Forgery::Removal => inpaint(&mut image, &region),
        Forgery::Authentic => unreachable!(),
    }
    let mask = Image::new(size, size, 1, region.iter().map(|&v| f64::from(u8::from(v))).collect())?;
    Ok(Sample { image: image.quantize8(), mask, spec: spec.clone(), offset })
}

/// Fills `region` from its surroundings: start from the mean of the pixels
/// bordering the region, then run 8-neighbour averaging sweeps.
fn inpaint(image: &mut Image, region: &[bool]) {
    let (w, h) = (image.width(), image.height());
    let neighbours = |i: usize| {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        (-1..=1isize)
            .flat_map(move |dy| (-1..=1isize).map(move |dx| (x + dx, y + dy)))
            .filter(move |&(nx, ny)| (nx, ny) != (x, y) && nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize)
            .map(move |(nx, ny)| ny as usize * w + nx as usize)
    };
    let inside: Vec<usize> = (0..w * h).filter(|&i| region[i]).collect();
    let border: Vec<usize> = (0..w * h).filter(|&i| !region[i] && neighbours(i).any(|j| region[j])).collect();
    for c in 0..image.channels() {
        let mut plane = image.plane(c);
        let fill = if border.is_empty() { 0.5 } else { border.iter().map(|&i| plane[i]).sum::<f64>() / border.len() as f64 };
        for &i in &inside {
            plane[i] = fill;
        }
        for _ in 0..INPAINT_ITERATIONS {
            let prev = plane.clone();
            for &i in &inside {
                let (sum, n) = neighbours(i).fold((0.0, 0usize), |(s, n), j| (s + prev[j], n + 1));
                plane[i] = sum / n as f64;
            }
        }
        for &i in &inside {
            image.set(i % w, i / w, c, plane[i]);
        }
    }
}

/// `gen_background` followed by `forge`.
pub fn generate(spec: &SampleSpec) -> Result<Sample> {
    forge(&gen_background(spec.seed, spec.size), spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    /// Fractions for splice, copy-move, removal, authentic.
    pub mix: [f64; 4],
    /// Exclusive cap on the forged-area fraction.
    pub bucket: Option<f64>,
}

impl DatasetSpec {
    pub fn new(n: usize, seed: u64, size: usize) -> Self {
        Self { n, seed, size, mix: [0.25; 4], bucket: None }
    }
}

/// Per-type counts by largest remainder; ties go to the earlier type.
pub fn partition(n: usize, mix: &[f64; 4]) -> Result<[usize; 4]> {
    if mix.iter().any(|f| !(*f >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract_err!("mix fractions must be non-negative and sum to 1, got {mix:?}"));
    }
    let exact: Vec<f64> = mix.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 4] = std::array::from_fn(|k| exact[k].floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for k in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// The sample specifications of a dataset, in index order.
pub fn dataset_specs(spec: &DatasetSpec) -> Result<Vec<SampleSpec>> {
    if let Some(c) = spec.bucket {
        check_cap(c, spec.size)?;
    }
    let counts = partition(spec.n, &spec.mix)?;
    let mut types: Vec<Forgery> = Forgery::ALL.iter().zip(counts).flat_map(|(f, c)| std::iter::repeat(*f).take(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    types.shuffle(&mut rng);
    types.into_iter().map(|f| SampleSpec::random(rng.gen(), spec.size, f, spec.bucket)).collect()
}

/// Generates every sample; generation runs in parallel, results keep index order.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    dataset_specs(spec)?.par_iter().map(generate).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub idx: usize,
    pub forgery: Forgery,
    pub seed: u64,
    pub area_fraction: f64,
}

pub const MANIFEST: &str = "manifest.tsv";

pub fn manifest_text(samples: &[Sample]) -> String {
    let mut out = String::from("idx\ttype\tseed\tarea_fraction\n");
    for (i, s) in samples.iter().enumerate() {
        out.push_str(&format!("{i}\t{}\t{}\t{}\n", s.spec.forgery, s.spec.seed, s.area_fraction()));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "idx\ttype\tseed\tarea_fraction" {
        return Err(Error::Config(format!("unexpected manifest header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let bad = || Error::Config(format!("manifest row {} is malformed: {line:?}", row + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                idx: f[0].parse().map_err(|_| bad())?,
                forgery: f[1].parse()?,
                seed: f[2].parse().map_err(|_| bad())?,
                area_fraction: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes `<root>/<split>/<idx>_img.ppm`, `<idx>_mask.pgm` and the manifest.
pub fn write_dataset(root: impl AsRef<Path>, split: &str, samples: &[Sample]) -> Result<PathBuf> {
    let dir = root.as_ref().join(split);
    fs::create_dir_all(&dir)?;
    for (i, s) in samples.iter().enumerate() {
        s.image.write(dir.join(format!("{i}_img.ppm")))?;
        s.mask.write(dir.join(format!("{i}_mask.pgm")))?;
    }
    fs::write(dir.join(MANIFEST), manifest_text(samples))?;
    Ok(dir)
}

/// A split directory on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
        Ok(Self { dir, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Image and mask of entry `i`.
    pub fn load(&self, i: usize) -> Result<(Image, Image)> {
        let idx = self.entries[i].idx;
        let image = Image::read(self.dir.join(format!("{idx}_img.ppm")))?;
        let mask = Image::read(self.dir.join(format!("{idx}_mask.pgm")))?;
        Ok((image, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_determinism() {
        assert_eq!(gen_background(3, 32), gen_background(3, 32));
        assert_ne!(gen_background(3, 32), gen_background(4, 32));
        let img = gen_background(5, 32);
        assert_eq!(img.quantize8(), img);
    }

    #[test]
    fn background_noise_level() {
        for seed in 0..4 {
            let noisy = gen_background(seed, 128);
            let clean = background_with_noise(seed, 128, 0.0);
            let d: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt() * 255.0;
            assert!((std - BACKGROUND_NOISE).abs() <= 0.2 * BACKGROUND_NOISE, "std {std}");
        }
    }

    fn spec(seed: u64, forgery: Forgery, fraction: f64, shape: Shape) -> SampleSpec {
        SampleSpec { seed, size: 64, forgery, region_fraction: fraction, shape, area_cap: None }
    }

    #[test]
    fn outside_mask_untouched_and_inside_changed() {
        for seed in 0..30 {
            for forgery in [Forgery::Splice, Forgery::CopyMove, Forgery::Removal] {
                let shape = if seed % 2 == 0 { Shape::Ellipse } else { Shape::Rectangle };
                let sp = spec(seed, forgery, 0.03 + 0.01 * (seed % 7) as f64, shape);
                let bg = gen_background(seed, 64);
                let s = forge(&bg, &sp).unwrap();
                let mut changed = false;
                for i in 0..64 * 64 {
                    let (x, y) = (i % 64, i / 64);
                    let m = s.mask.get(x, y, 0);
                    assert!(m == 0.0 || m == 1.0);
                    for c in 0..3 {
                        if m == 0.0 {
                            assert_eq!(s.image.get(x, y, c), bg.get(x, y, c));
                        } else if s.image.get(x, y, c) != bg.get(x, y, c) {
                            changed = true;
                        }
                    }
                }
                assert!(changed, "{forgery} seed {seed} left the region unchanged");
            }
        }
    }

    #[test]
    fn copy_move_destination_equals_translated_source() {
        for seed in 0..20 {
            let bg = gen_background(seed, 64);
            let s = forge(&bg, &spec(seed, Forgery::CopyMove, 0.05, Shape::Ellipse)).unwrap();
            let (dx, dy) = s.offset.unwrap();
            assert_ne!((dx, dy), (0, 0));
            for i in 0..64 * 64 {
                let (x, y) = (i % 64, i / 64);
                if s.mask.get(x, y, 0) == 1.0 {
                    let (sx, sy) = ((x as isize - dx) as usize, (y as isize - dy) as usize);
                    for c in 0..3 {
                        assert_eq!(s.image.get(x, y, c), bg.get(sx, sy, c));
                    }
                }
            }
        }
    }

    #[test]
    fn authentic_mask_is_empty() {
        let s = generate(&spec(1, Forgery::Authentic, 0.1, Shape::Rectangle)).unwrap();
        assert_eq!(s.mask.data().iter().sum::<f64>(), 0.0);
        assert_eq!(s.image, gen_background(1, 64));
    }

    #[test]
    fn five_percent_area_window() {
        for seed in 0..100 {
            let shape = if seed % 2 == 0 { Shape::Ellipse } else { Shape::Rectangle };
            let forgery = Forgery::ALL[(seed % 3) as usize];
            let s = generate(&spec(seed, forgery, 0.05, shape)).unwrap();
            let area = s.mask.data().iter().sum::<f64>();
            assert!((164.0..=245.0).contains(&area), "seed {seed}: {area}");
        }
    }

    #[test]
    fn achieved_fraction_within_twenty_percent() {
        for seed in 0..60 {
            let fraction = [0.005, 0.01, 0.02, 0.1, 0.2][(seed % 5) as usize];
            let shape = if seed % 2 == 0 { Shape::Ellipse } else { Shape::Rectangle };
            let s = generate(&spec(seed, Forgery::Removal, fraction, shape)).unwrap();
            let rel = (s.area_fraction() - fraction).abs() / fraction;
            assert!(rel <= 0.2, "seed {seed} fraction {fraction}: got {}", s.area_fraction());
        }
    }

    #[test]
    fn oversized_region_is_contract_error() {
        assert!(generate(&spec(1, Forgery::Splice, 0.95, Shape::Rectangle)).is_err());
        assert!(generate(&spec(1, Forgery::Splice, 0.0, Shape::Rectangle)).is_err());
    }

    #[test]
    fn dataset_regeneration_is_identical() {
        let ds = DatasetSpec::new(8, 7, 32);
        let (a, b) = (make_dataset(&ds).unwrap(), make_dataset(&ds).unwrap());
        assert_eq!(a, b);
        assert_eq!(manifest_text(&a), manifest_text(&b));
    }

    #[test]
    fn bucket_caps_area() {
        let ds = DatasetSpec { bucket: Some(0.01), ..DatasetSpec::new(40, 3, 128) };
        for s in make_dataset(&ds).unwrap() {
            assert!(s.mask.data().iter().sum::<f64>() < 164.0);
        }
        let impossible = DatasetSpec { bucket: Some(0.0002), ..DatasetSpec::new(4, 3, 64) };
        assert!(matches!(make_dataset(&impossible), Err(Error::Contract(_))));
    }

    #[test]
    fn partition_counts() {
        assert_eq!(partition(100, &[0.25; 4]).unwrap(), [25; 4]);
        assert_eq!(partition(10, &[0.25; 4]).unwrap(), [3, 3, 2, 2]);
        assert_eq!(partition(7, &[0.5, 0.5, 0.0, 0.0]).unwrap(), [4, 3, 0, 0]);
        assert!(partition(4, &[0.5, 0.6, 0.0, 0.0]).is_err());
        let specs = dataset_specs(&DatasetSpec::new(100, 1, 32)).unwrap();
        for f in Forgery::ALL {
            assert_eq!(specs.iter().filter(|s| s.forgery == f).count(), 25);
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_dataset(&DatasetSpec::new(6, 2, 32)).unwrap();
        let split = write_dataset(dir.path(), "train", &samples).unwrap();
        let ds = Dataset::open(&split).unwrap();
        assert_eq!(ds.len(), 6);
        for (i, s) in samples.iter().enumerate() {
            let (img, mask) = ds.load(i).unwrap();
            assert_eq!(img, s.image);
            assert_eq!(mask, s.mask);
            assert_eq!(ds.entries[i].forgery, s.spec.forgery);
            assert_eq!(ds.entries[i].area_fraction, s.area_fraction());
        }
    }
}
