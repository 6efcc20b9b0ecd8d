//! Pixel-level AUC, F1 and IoU, per-image reports, small-region buckets and
//! the distortion sweep.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::datagen::Dataset;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::imgproc::{distort, Distortion, Image};
use crate::network::{resize_mask, Model};
use crate::tensor::fnv1a;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Upper bounds of the small-region buckets, as area fractions.
pub const BUCKETS: [f64; 3] = [0.01, 0.05, 0.10];

/// Mann–Whitney AUC with midranks; `None` unless `gt` has both classes.
pub fn pixel_auc(pred: &[f64], gt: &[f64]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(dim_err!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
    }
    let positives = gt.iter().filter(|g| **g >= 0.5).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| gt[k] >= 0.5).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Binary confusion counts after thresholding `pred` at `threshold` (pred ≥ t is positive).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn count(pred: &[f64], gt: &[f64], threshold: f64) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(dim_err!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
        }
        let mut c = Self::default();
        for (p, g) in pred.iter().zip(gt) {
            match (*p >= threshold, *g >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    /// F1 as an exact fraction `(numerator, denominator)`.
    pub fn f1_ratio(&self) -> (u64, u64) {
        match 2 * self.tp + self.fp + self.fn_ {
            0 => (1, 1),
            den => (2 * self.tp, den),
        }
    }

    /// IoU as an exact fraction `(numerator, denominator)`.
    pub fn iou_ratio(&self) -> (u64, u64) {
        match self.tp + self.fp + self.fn_ {
            0 => (1, 1),
            den => (self.tp, den),
        }
    }

    /// `2TP / (2TP + FP + FN)`, 1 when there is nothing to find and nothing found.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

pub fn f1_score(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    Ok(Confusion::count(pred, gt, threshold)?.f1())
}

pub fn iou(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    Ok(Confusion::count(pred, gt, threshold)?.iou())
}

/// Anything that maps an image to a forgery probability mask. The mask may be
/// at a lower resolution; evaluation resizes it to the ground truth.
pub trait MaskPredictor: Sync {
    fn predict_mask(&self, image: &Image) -> Result<Image>;
}

impl MaskPredictor for Model {
    fn predict_mask(&self, image: &Image) -> Result<Image> {
        self.predict_native(image)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean of per-image scores.
    PerImage,
    /// Scores over the pixels of all images pooled together.
    Pooled,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" => Ok(Self::PerImage),
            "pooled" => Ok(Self::Pooled),
            _ => Err(Error::Config(format!("aggregation must be per-image|pooled, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerImage => "per-image",
            Self::Pooled => "pooled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, aggregation: Aggregation::PerImage, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub idx: usize,
    pub distortion: String,
    /// `None` for single-class ground truth.
    pub auc: Option<f64>,
    pub f1: f64,
    pub iou: f64,
    pub area_fraction: f64,
    pub confusion: Confusion,
}

/// Means over a set of images. `auc` is `None` when no image qualifies.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub images: usize,
    pub auc: Option<f64>,
    pub auc_excluded: usize,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub distortion: String,
    pub all: Aggregate,
    /// Images whose forged fraction is below each of [`BUCKETS`].
    pub buckets: [Option<Aggregate>; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<ImageRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Mean of per-image values.
pub fn aggregate_per_image(records: &[&ImageRecord]) -> Aggregate {
    let n = records.len();
    let aucs: Vec<f64> = records.iter().filter_map(|r| r.auc).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| if n == 0 { 0.0 } else { v.sum::<f64>() / n as f64 };
    Aggregate {
        images: n,
        auc: if aucs.is_empty() { None } else { Some(aucs.iter().sum::<f64>() / aucs.len() as f64) },
        auc_excluded: n - aucs.len(),
        f1: mean(&mut records.iter().map(|r| r.f1)),
        iou: mean(&mut records.iter().map(|r| r.iou)),
    }
}

struct Scored {
    record: ImageRecord,
    pred: Vec<f64>,
    gt: Vec<f64>,
}

fn aggregate_pooled(items: &[&Scored]) -> Result<Aggregate> {
    let pred: Vec<f64> = items.iter().flat_map(|s| s.pred.iter().copied()).collect();
    let gt: Vec<f64> = items.iter().flat_map(|s| s.gt.iter().copied()).collect();
    let c = items.iter().fold(Confusion::default(), |acc, s| acc.add(s.record.confusion));
    let auc = pixel_auc(&pred, &gt)?;
    Ok(Aggregate {
        images: items.len(),
        auc,
        auc_excluded: items.iter().filter(|s| s.record.auc.is_none()).count(),
        f1: c.f1(),
        iou: c.iou(),
    })
}

/// Per-image distortion seed derived from the manifest seed.
pub fn distortion_seed(manifest_seed: u64, d: &Distortion) -> u64 {
    manifest_seed ^ fnv1a(d.to_string().as_bytes())
}

fn score_one(
    predictor: &dyn MaskPredictor,
    ds: &Dataset,
    i: usize,
    distortion: Option<&Distortion>,
    threshold: f64,
) -> Result<Scored> {
    let entry = &ds.entries[i];
    let (image, mask) = ds.load(i)?;
    let image = match distortion {
        Some(d) => distort(&image, *d, distortion_seed(entry.seed, d))?,
        None => image,
    };
    let raw = predictor.predict_mask(&image)?;
    if raw.channels() != 1 {
        return Err(dim_err!("predicted mask must have one channel, got {}", raw.channels()));
    }
    let pred = resize_mask(&raw, mask.width(), mask.height());
    if pred.data().len() != mask.data().len() {
        return Err(contract_err!("internal: resized mask does not match the ground truth resolution"));
    }
    let gt = mask.data().to_vec();
    let confusion = Confusion::count(pred.data(), &gt, threshold)?;
    let record = ImageRecord {
        idx: entry.idx,
        distortion: distortion.map_or_else(|| "none".to_string(), |d| d.to_string()),
        auc: pixel_auc(pred.data(), &gt)?,
        f1: confusion.f1(),
        iou: confusion.iou(),
        area_fraction: gt.iter().sum::<f64>() / gt.len() as f64,
        confusion,
    };
    Ok(Scored { record, pred: pred.data().to_vec(), gt })
}

fn summarize(distortion: String, scored: &[Scored], aggregation: Aggregation) -> Result<SummaryRow> {
    let select = |cap: f64| scored.iter().filter(|s| cap.is_infinite() || s.record.area_fraction < cap).collect::<Vec<_>>();
    let agg = |items: Vec<&Scored>| -> Result<Option<Aggregate>> {
        if items.is_empty() {
            return Ok(None);
        }
        Ok(Some(match aggregation {
            Aggregation::PerImage => aggregate_per_image(&items.iter().map(|s| &s.record).collect::<Vec<_>>()),
            Aggregation::Pooled => aggregate_pooled(&items)?,
        }))
    };
    let all = agg(select(f64::INFINITY))?.ok_or_else(|| contract_err!("cannot evaluate an empty dataset"))?;
    // buckets only consider forged images
    let bucket = |cap: f64| agg(scored.iter().filter(|s| s.record.area_fraction > 0.0 && s.record.area_fraction < cap).collect());
    Ok(SummaryRow { distortion, all, buckets: [bucket(BUCKETS[0])?, bucket(BUCKETS[1])?, bucket(BUCKETS[2])?] })
}

/// Scores `predictor` on every image of `ds`, once undistorted when
/// `distortions` is empty and once per listed distortion otherwise.
pub fn evaluate(
    predictor: &dyn MaskPredictor,
    ds: &Dataset,
    distortions: &[Option<Distortion>],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(contract_err!("cannot evaluate an empty dataset"));
    }
    let sweep: Vec<Option<Distortion>> = if distortions.is_empty() { vec![None] } else { distortions.to_vec() };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| contract_err!("cannot build worker pool: {e}"))?;
    let mut report = MetricsReport::default();
    for d in &sweep {
        let scored: Vec<Scored> = pool.install(|| {
            (0..ds.len()).into_par_iter().map(|i| score_one(predictor, ds, i, d.as_ref(), opts.threshold)).collect::<Result<_>>()
        })?;
        let tag = d.as_ref().map_or_else(|| "none".to_string(), |d| d.to_string());
        report.summary.push(summarize(tag, &scored, opts.aggregation)?);
        report.records.extend(scored.into_iter().map(|s| s.record));
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl MetricsReport {
    pub fn report_tsv(&self) -> String {
        let mut out = String::from("idx\tdistortion\tauc\tf1\tiou\tarea_fraction\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", r.idx, r.distortion, opt(r.auc), r.f1, r.iou, r.area_fraction);
        }
        out
    }

    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("distortion\tsubset\timages\tauc\tauc_excluded\tf1\tiou\n");
        for row in &self.summary {
            let subsets = std::iter::once(("all".to_string(), Some(&row.all)))
                .chain(BUCKETS.iter().zip(&row.buckets).map(|(c, b)| (format!("area<{c}"), b.as_ref())));
            for (name, agg) in subsets {
                match agg {
                    Some(a) => {
                        let _ = writeln!(
                            out,
                            "{}\t{name}\t{}\t{}\t{}\t{}\t{}",
                            row.distortion,
                            a.images,
                            opt(a.auc),
                            a.auc_excluded,
                            a.f1,
                            a.iou
                        );
                    }
                    None => {
                        let _ = writeln!(out, "{}\t{name}\t0\tNA\t0\tNA\tNA", row.distortion);
                    }
                }
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.tsv"), self.report_tsv())?;
        std::fs::write(dir.join("summary.tsv"), self.summary_tsv())?;
        Ok(())
    }

    /// Summary row for a distortion tag (`"none"` for the clean pass).
    pub fn row(&self, distortion: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.distortion == distortion)
    }
}
