//! End-to-end model: preprocessing, the two backbones, per-scale FAM and
//! ARPM, the progressive localizer, and the training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arpm::ArpmScale;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::fam::{FamConfig, FamMode, FamScale};
use crate::imgproc::{guided_noise, Image};
use crate::localizer::{default_reshape_factor, ground_truth_pyramid, total_loss, Localizer, MaskSet};
use crate::nn::{apply_bn_updates, Ctx, Mode, BN_MOMENTUM};
use crate::tensor::{
    finite_diff_check, kernels, read_checkpoint, write_checkpoint, Adam, AdamConfig, GradCheckReport, Graph,
    ParamStore, Tensor, Var,
};

/// What the second backbone sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseBranch {
    /// Guided-filter residual plus Sobel edges.
    Guided,
    /// Guided-filter residual only.
    GfOnly,
    /// Sobel edges only, replicated across channels.
    SobelOnly,
    /// No noise backbone; FAM fuses the RGB features alone.
    Off,
}

impl fmt::Display for NoiseBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Guided => "guided",
            Self::GfOnly => "gf-only",
            Self::SobelOnly => "sobel-only",
            Self::Off => "off",
        })
    }
}

impl FromStr for NoiseBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(Self::Guided),
            "gf-only" => Ok(Self::GfOnly),
            "sobel-only" => Ok(Self::SobelOnly),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("noise_branch must be guided|gf-only|sobel-only|off, got {s:?}"))),
        }
    }
}

pub(crate) fn parse_on_off(key: &str, s: &str) -> Result<bool> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be on|off, got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gf_radius: usize,
    pub gf_eps: f64,
    pub noise_branch: NoiseBranch,
    pub fam: FamConfig,
    pub arpm: bool,
    /// ARPM branch width as a divisor of the scale width.
    pub arpm_divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            gf_radius: 2,
            gf_eps: 1e-4,
            noise_branch: NoiseBranch::Guided,
            fam: FamConfig::default(),
            arpm: true,
            arpm_divisor: 2,
        }
    }
}

impl ModelConfig {
    /// The end-to-end model used for gradient verification: 16x16 input,
    /// stage widths 4, 8, 12, 16.
    pub fn miniature() -> Self {
        Self {
            backbone: BackboneConfig { stem_channels: 4, stage_channels: [4, 8, 12, 16], blocks_per_stage: 1, input_size: 16 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.gf_eps > 0.0) {
            return Err(contract_err!("guided filter eps must be positive, got {}", self.gf_eps));
        }
        if self.arpm_divisor == 0 {
            return Err(contract_err!("arpm_divisor must be positive"));
        }
        Ok(())
    }

    /// Everything that determines parameter layout and preprocessing, as
    /// `key=value` lines.
    pub fn arch_string(&self) -> String {
        let b = &self.backbone;
        let stages: Vec<String> = b.stage_channels.iter().map(|c| c.to_string()).collect();
        let fam = match self.fam.mode {
            FamMode::On => "on",
            FamMode::ConcatOnly => "concat-only",
        };
        format!(
            "input_size={}\nstem_channels={}\nstage_channels={}\nblocks_per_stage={}\ngf_radius={}\ngf_eps={:?}\n\
             noise_branch={}\nfam={}\nfam_reduction={}\ndc_kernels={}\ndc_temperature={:?}\narpm={}\narpm_divisor={}\n",
            b.input_size,
            b.stem_channels,
            stages.join(","),
            b.blocks_per_stage,
            self.gf_radius,
            self.gf_eps,
            self.noise_branch,
            fam,
            self.fam.reduction,
            self.fam.dc_kernels,
            self.fam.dc_temperature,
            if self.arpm { "on" } else { "off" },
            self.arpm_divisor,
        )
    }

    /// Inverse of [`ModelConfig::arch_string`].
    pub fn from_arch_string(s: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("malformed arch line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one architecture key; `Ok(false)` if the key is not an
    /// architecture key.
    pub fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {value:?}"));
        let uint = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        match key {
            "input_size" => self.backbone.input_size = uint()?,
            "stem_channels" => self.backbone.stem_channels = uint()?,
            "stage_channels" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("four comma-separated integers"))?;
                self.backbone.stage_channels = v.try_into().map_err(|_| bad("four comma-separated integers"))?;
            }
            "blocks_per_stage" => self.backbone.blocks_per_stage = uint()?,
            "gf_radius" => self.gf_radius = uint()?,
            "gf_eps" => self.gf_eps = float()?,
            "noise_branch" => self.noise_branch = value.parse()?,
            "fam" => {
                self.fam.mode = match value {
                    "on" => FamMode::On,
                    "concat-only" => FamMode::ConcatOnly,
                    _ => return Err(bad("on|concat-only")),
                }
            }
            "fam_reduction" => self.fam.reduction = uint()?,
            "dc_kernels" => self.fam.dc_kernels = uint()?,
            "dc_temperature" => self.fam.dc_temperature = float()?,
            "arpm" => self.arpm = parse_on_off(key, value)?,
            "arpm_divisor" => self.arpm_divisor = uint()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.try_set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown architecture key {key:?}")))
        }
    }

    /// Mask sizes `(h, w)` in [`MaskSet`] order (coarsest first).
    pub fn mask_sizes(&self) -> [(usize, usize); 4] {
        std::array::from_fn(|k| {
            let s = self.backbone.scale_size(3 - k);
            (s, s)
        })
    }
}

/// One training or evaluation example converted to network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub rgb: Tensor,
    pub noise: Option<Tensor>,
    /// Ground truth per mask scale, coarsest first; absent for unlabeled input.
    pub gts: Option<[Tensor; 4]>,
}

/// Concatenates `1 x ...` tensors along the leading axis.
pub fn stack<'a>(parts: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let parts: Vec<&Tensor> = parts.into_iter().collect();
    let first = parts.first().ok_or_else(|| contract_err!("cannot stack zero tensors"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * parts.len());
    for p in &parts {
        if p.shape() != first.shape() {
            return Err(dim_err!("cannot stack {:?} with {:?}", p.shape(), first.shape()));
        }
        data.extend_from_slice(p.data());
    }
    shape[0] *= parts.len();
    Tensor::new(&shape, data)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    rgb: Backbone,
    noise: Option<Backbone>,
    fam: Vec<FamScale>,
    arpm: Option<Vec<ArpmScale>>,
    localizer: Localizer,
}

/// Checkpoint entry carrying the architecture text as byte values.
pub const ARCH_ENTRY: &str = "meta.arch";

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let rgb = Backbone::new(&mut store, "rgb", &config.backbone)?;
        let with_noise = config.noise_branch != NoiseBranch::Off;
        let noise = if with_noise { Some(Backbone::new(&mut store, "noise", &config.backbone)?) } else { None };
        let channels = config.backbone.stage_channels;
        let fam = (0..4)
            .map(|i| FamScale::new(&mut store, &format!("fam.scale{}", i + 1), channels[i], with_noise, &config.fam))
            .collect::<Result<Vec<_>>>()?;
        let arpm = if config.arpm {
            Some(
                (0..4)
                    .map(|i| {
                        let branch = (channels[i] / config.arpm_divisor).max(1);
                        ArpmScale::new(&mut store, &format!("arpm.scale{}", i + 1), channels[i], branch)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let localizer = Localizer::new(&mut store, channels, std::array::from_fn(default_reshape_factor))?;
        let arch = config.arch_string();
        store.declare_buffer(ARCH_ENTRY, Tensor::new(&[arch.len()], arch.bytes().map(f64::from).collect())?)?;
        Ok(Self { config, store, rgb, noise, fam, arpm, localizer })
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(&self.store, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Rebuilds the architecture recorded in the checkpoint and loads its values.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_checkpoint(std::fs::File::open(path)?)?;
        let arch = entries
            .iter()
            .find(|(n, _)| n == ARCH_ENTRY)
            .ok_or_else(|| contract_err!("checkpoint has no {ARCH_ENTRY} entry"))?;
        let text: String = arch.1.data().iter().map(|&b| b as u8 as char).collect();
        let config = ModelConfig::from_arch_string(&text)?;
        let mut model = Self::new(config, 0)?;
        model.store.load(entries)?;
        Ok(model)
    }

    /// Noise-branch input for an image, or `None` when the branch is off.
    pub fn noise_image(&self, img: &Image) -> Result<Option<Image>> {
        let (r, eps) = (self.config.gf_radius, self.config.gf_eps);
        Ok(match self.config.noise_branch {
            NoiseBranch::Off => None,
            NoiseBranch::Guided => Some(guided_noise(img, r, eps)?.noise),
            NoiseBranch::GfOnly => Some(guided_noise(img, r, eps)?.residual),
            NoiseBranch::SobelOnly => {
                let e = guided_noise(img, r, eps)?.edges.plane(0);
                Some(Image::from_planes(img.width(), img.height(), &vec![e; img.channels()])?)
            }
        })
    }

    pub fn prepare(&self, img: &Image, mask: Option<&Image>) -> Result<PreparedSample> {
        let s = self.config.backbone.input_size;
        if img.width() != s || img.height() != s || img.channels() != 3 {
            return Err(dim_err!(
                "model expects a {s}x{s} RGB image, got {}x{} with {} channel(s)",
                img.width(),
                img.height(),
                img.channels()
            ));
        }
        let noise = self.noise_image(img)?.map(|n| n.to_tensor());
        let gts = match mask {
            None => None,
            Some(m) => {
                if m.width() != s || m.height() != s || m.channels() != 1 {
                    return Err(dim_err!("mask must be {s}x{s} single-channel, got {}x{}", m.width(), m.height()));
                }
                Some(ground_truth_pyramid(m.data(), s, s, self.config.mask_sizes()))
            }
        };
        Ok(PreparedSample { rgb: img.to_tensor(), noise, gts })
    }

    /// Records the full forward pass and returns the four masks.
    pub fn forward(&self, ctx: &mut Ctx, rgb: Var, noise: Option<Var>) -> Result<MaskSet> {
        let rf = self.rgb.forward(ctx, rgb)?;
        let nf = match (&self.noise, noise) {
            (Some(bb), Some(n)) => Some(bb.forward(ctx, n)?),
            (None, None) => None,
            _ => return Err(contract_err!("noise input does not match noise_branch={}", self.config.noise_branch)),
        };
        let mut x = Vec::with_capacity(4);
        for i in 0..4 {
            let agg = self.fam[i].forward(ctx, rf[i], nf.map(|n| n[i]))?;
            x.push(match &self.arpm {
                Some(a) => a[i].forward(ctx, agg)?,
                None => agg,
            });
        }
        self.localizer.forward(ctx, &x)
    }

    fn record_batch(&self, ctx: &mut Ctx, batch: &[&PreparedSample]) -> Result<MaskSet> {
        let rgb = ctx.graph.constant(stack(batch.iter().map(|s| &s.rgb))?);
        let noise = match batch[0].noise {
            Some(_) => {
                let parts = batch
                    .iter()
                    .map(|s| s.noise.as_ref().ok_or_else(|| contract_err!("batch mixes samples with and without noise")))
                    .collect::<Result<Vec<_>>>()?;
                Some(ctx.graph.constant(stack(parts)?))
            }
            None => None,
        };
        self.forward(ctx, rgb, noise)
    }

    /// Records forward pass and total loss for a labeled batch.
    pub fn loss(&self, ctx: &mut Ctx, batch: &[&PreparedSample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(contract_err!("empty batch"));
        }
        let masks = self.record_batch(ctx, batch)?;
        let mut vars = [masks.masks[0]; 4];
        for k in 0..4 {
            let parts = batch
                .iter()
                .map(|s| s.gts.as_ref().map(|g| &g[k]).ok_or_else(|| contract_err!("training sample has no ground truth")))
                .collect::<Result<Vec<_>>>()?;
            vars[k] = ctx.graph.constant(stack(parts)?);
        }
        total_loss(&mut ctx.graph, &masks, &vars)
    }

    /// Final mask (eval mode) at its native resolution, `S/2 x S/2`.
    pub fn predict_native(&self, img: &Image) -> Result<Image> {
        let p = self.prepare(img, None)?;
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let masks = self.record_batch(&mut ctx, &[&p])?;
        Image::from_tensor(ctx.graph.value(masks.final_mask()))
    }

    /// Final mask bilinearly resized to the input resolution.
    pub fn predict(&self, img: &Image) -> Result<Image> {
        let m = self.predict_native(img)?;
        Ok(resize_mask(&m, img.width(), img.height()))
    }
}

/// Bilinear resize of a single-channel mask.
pub fn resize_mask(mask: &Image, width: usize, height: usize) -> Image {
    if mask.width() == width && mask.height() == height {
        return mask.clone();
    }
    let data = kernels::bilinear_resize(mask.data(), 1, mask.height(), mask.width(), height, width);
    Image::new(width, height, 1, data).expect("sized")
}

/// `lr0 * 0.5^floor(epoch / period)`; a zero period disables halving.
pub fn lr_for_epoch(lr0: f64, epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((epoch / period) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_halving_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, batch_size: 4, lr: 2e-4, epochs: 25, lr_halving_period: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step, starting at 1.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Adam on the total loss with the halving schedule. Single-threaded and
/// deterministic for a fixed seed.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(contract_err!("batch_size must be positive"));
        }
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, config, adam, rng })
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &[&PreparedSample]) -> Result<f64> {
        let mut ctx = Ctx::new(&self.model.store, Mode::Train);
        let loss = self.model.loss(&mut ctx, batch)?;
        let value = ctx.graph.value(loss).data()[0];
        if !value.is_finite() {
            return Err(non_finite(&ctx.graph, value));
        }
        let grads = ctx.graph.backward(loss)?.params();
        let updates = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
        }
        self.adam.step(&mut self.model.store, &grads)?;
        apply_bn_updates(&mut self.model.store, &updates, BN_MOMENTUM)?;
        if let Some(name) = self.model.store.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter {name} became non-finite")));
        }
        Ok(value)
    }

    /// One pass over `samples` in a seeded shuffled order; the last batch may
    /// be short.
    pub fn epoch(&mut self, samples: &[PreparedSample], epoch: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        let lr = lr_for_epoch(self.config.lr, epoch, self.config.lr_halving_period);
        self.adam.set_lr(lr);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = self.step(&batch)?;
            on_step(&StepRecord { epoch, step: self.adam.step_count(), lr, loss });
        }
        Ok(())
    }

    /// Runs `config.epochs` epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        samples: &[PreparedSample],
        mut on_step: impl FnMut(&StepRecord),
        mut on_epoch: impl FnMut(usize, &Model) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(contract_err!("no training samples"));
        }
        for epoch in 0..self.config.epochs {
            self.epoch(samples, epoch, &mut on_step)?;
            on_epoch(epoch, &self.model)?;
        }
        Ok(())
    }
}

fn non_finite(graph: &Graph, loss: f64) -> Error {
    match graph.first_non_finite() {
        Some((idx, op, shape)) => {
            Error::NonFinite(format!("loss is {loss}; first non-finite tensor is node {idx} ({op}, shape {shape:?})"))
        }
        None => Error::NonFinite(format!("loss is {loss}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub seed: u64,
    /// Parameter whose analytic gradient entry 0 is shifted by `corrupt_by`,
    /// as a negative control.
    pub corrupt: Option<String>,
    pub corrupt_by: f64,
    /// Restrict the check to parameters whose name starts with this prefix.
    pub only: Option<String>,
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::miniature(),
            seed: 0,
            corrupt: None,
            corrupt_by: 1e-2,
            only: None,
            h: 1e-5,
            tol: 1e-4,
            // gradients below ~1e-4 of the loss are dominated by round-off in
            // the central difference; they are compared in absolute terms
            floor: 1e-4,
        }
    }
}

/// Finite-difference verification of a whole model (by default the
/// miniature) on a two-image batch in training mode.
pub fn gradcheck_model(opts: &GradcheckOptions) -> Result<GradCheckReport> {
    let model = Model::new(opts.model.clone(), opts.seed)?;
    let s = model.config.backbone.input_size;
    let samples = (0..2)
        .map(|k| {
            let img = crate::datagen::gen_background(opts.seed.wrapping_add(k), s);
            let mask = Image::from_fn(s, s, 1, |x, y, _| f64::from(u8::from((x + 2 * k as usize) % 7 < 3 && y < s / 2)));
            model.prepare(&img, Some(&mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let loss_at = |store: &ParamStore| -> Result<(Graph, Var)> {
        let mut ctx = Ctx::new(store, Mode::Train);
        let l = model.loss(&mut ctx, &batch)?;
        Ok((ctx.graph, l))
    };
    let (g, l) = loss_at(&model.store)?;
    let mut analytic = g.backward(l)?.params();
    if let Some(name) = &opts.corrupt {
        let grad = analytic.get_mut(name).ok_or_else(|| Error::Config(format!("no trainable parameter named {name:?}")))?;
        grad.data_mut()[0] += opts.corrupt_by;
    }
    if let Some(prefix) = &opts.only {
        analytic.retain(|name, _| name.starts_with(prefix.as_str()));
        if analytic.is_empty() {
            return Err(Error::Config(format!("no trainable parameter starts with {prefix:?}")));
        }
    }
    let mut failure = None;
    let report = finite_diff_check(
        |s| match loss_at(s) {
            Ok((g, l)) => g.value(l).data()[0],
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &model.store,
        &analytic,
        opts.h,
        opts.tol,
        opts.floor,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::bce_loss;

    fn tiny_config() -> ModelConfig {
        ModelConfig::miniature()
    }

    fn sample(model: &Model, seed: u64) -> PreparedSample {
        let s = model.config.backbone.input_size;
        let img = crate::datagen::gen_background(seed, s);
        let mask = Image::from_fn(s, s, 1, |x, y, _| f64::from(u8::from(x < s / 2 && y >= s / 4)));
        model.prepare(&img, Some(&mask)).unwrap()
    }

    #[test]
    fn arch_string_round_trip() {
        let mut cfg = ModelConfig::default();
        cfg.noise_branch = NoiseBranch::SobelOnly;
        cfg.fam.mode = FamMode::ConcatOnly;
        cfg.arpm = false;
        cfg.gf_eps = 0.1 + 0.2;
        assert_eq!(ModelConfig::from_arch_string(&cfg.arch_string()).unwrap(), cfg);
        assert!(ModelConfig::from_arch_string("bogus=1").is_err());
        assert!("sideways".parse::<NoiseBranch>().is_err());
    }

    #[test]
    fn ablations_change_parameter_layout() {
        let full = Model::new(tiny_config(), 1).unwrap();
        let names = |m: &Model| m.store.trainable_names();
        let no_noise = Model::new(ModelConfig { noise_branch: NoiseBranch::Off, ..tiny_config() }, 1).unwrap();
        assert!(names(&full).iter().any(|n| n.starts_with("noise.")));
        assert!(!names(&no_noise).iter().any(|n| n.starts_with("noise.") || n.contains("noise_")));
        assert_eq!(no_noise.store.get("fam.scale1.fuse.weight").unwrap().shape(), &[4, 4, 1, 1]);
        let no_arpm = Model::new(ModelConfig { arpm: false, ..tiny_config() }, 1).unwrap();
        assert!(!names(&no_arpm).iter().any(|n| n.starts_with("arpm.")));
        let concat = Model::new(ModelConfig { fam: FamConfig { mode: FamMode::ConcatOnly, ..FamConfig::default() }, ..tiny_config() }, 1).unwrap();
        assert!(!names(&concat).iter().any(|n| n.contains("dynamic")));
    }

    #[test]
    fn mask_shapes_and_ranges() {
        let model = Model::new(ModelConfig::default(), 2).unwrap();
        let p = sample(&model, 3);
        let mut ctx = Ctx::new(&model.store, Mode::Eval);
        let masks = model.record_batch(&mut ctx, &[&p, &p]).unwrap();
        let shapes: Vec<Vec<usize>> = masks.masks.iter().map(|m| ctx.graph.shape(*m).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 1, 4, 4], vec![2, 1, 8, 8], vec![2, 1, 16, 16], vec![2, 1, 32, 32]]);
        for m in masks.masks {
            assert!(ctx.graph.value(m).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        let gts = p.gts.as_ref().unwrap();
        for (k, (h, w)) in model.config.mask_sizes().iter().enumerate() {
            assert_eq!(gts[k].shape(), &[1, 1, *h, *w]);
        }
    }

    #[test]
    fn predict_resizes_to_input() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let img = crate::datagen::gen_background(5, 16);
        let m = model.predict(&img).unwrap();
        assert_eq!((m.width(), m.height(), m.channels()), (16, 16, 1));
        assert_eq!(model.predict(&img).unwrap(), m);
        let wrong = crate::datagen::gen_background(5, 32);
        let err = model.predict(&wrong).unwrap_err().to_string();
        assert!(err.contains("16x16") && err.contains("32x32"), "{err}");
    }

    #[test]
    fn loss_is_sum_of_scale_losses() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let p = sample(&model, 7);
        let mut ctx = Ctx::new(&model.store, Mode::Eval);
        let l = model.loss(&mut ctx, &[&p]).unwrap();
        let masks = model.record_batch(&mut ctx, &[&p]).unwrap();
        let mut sum = 0.0;
        for k in 0..4 {
            let gt = ctx.graph.constant(p.gts.as_ref().unwrap()[k].clone());
            let lk = bce_loss(&mut ctx.graph, masks.masks[k], gt).unwrap();
            sum += ctx.graph.value(lk).data()[0];
        }
        assert_eq!(ctx.graph.value(l).data()[0], sum);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { arpm: false, noise_branch: NoiseBranch::GfOnly, ..tiny_config() };
        let model = Model::new(cfg.clone(), 8).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert!(back.store.iter().eq(model.store.iter()));
        let img = crate::datagen::gen_background(9, 16);
        assert_eq!(back.predict(&img).unwrap(), model.predict(&img).unwrap());
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(lr_for_epoch(2e-4, 4, 5), 2e-4);
        assert_eq!(lr_for_epoch(2e-4, 5, 5), 1e-4);
        assert_eq!(lr_for_epoch(2e-4, 12, 5), 5e-5);
        assert_eq!(lr_for_epoch(2e-4, 12, 0), 2e-4);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let run = || {
            let model = Model::new(tiny_config(), 10).unwrap();
            let samples: Vec<PreparedSample> = (0..3).map(|k| sample(&model, 20 + k)).collect();
            let cfg = TrainConfig { seed: 3, batch_size: 2, lr: 1e-2, epochs: 6, lr_halving_period: 5 };
            let mut t = Trainer::new(model, cfg).unwrap();
            let mut log = Vec::new();
            t.fit(&samples, |r| log.push(*r), |_, _| Ok(())).unwrap();
            (log, t.model.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.len(), 12);
        assert_eq!(a[9].lr, 1e-2);
        assert_eq!(a[10].lr, 1e-2 / 2.0);
        assert!(a.last().unwrap().loss < a[0].loss);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut model = Model::new(tiny_config(), 11).unwrap();
        let p = sample(&model, 12);
        model.store.get_mut("loc4.head2.bias").unwrap().data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        let err = t.step(&[&p]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("first non-finite tensor"), "{err}");
    }

    #[test]
    fn miniature_gradcheck_negative_control() {
        let opts = GradcheckOptions {
            seed: 1,
            corrupt: Some("loc4.head2.bias".into()),
            only: Some("loc4.head".into()),
            ..GradcheckOptions::default()
        };
        let report = gradcheck_model(&opts).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().name, "loc4.head2.bias");
        assert_eq!(report.params.iter().filter(|p| p.failures > 0).count(), 1);
        let bad = GradcheckOptions { corrupt: Some("nope".into()), ..opts.clone() };
        assert!(gradcheck_model(&bad).is_err());
        let none = GradcheckOptions { corrupt: None, only: Some("zzz".into()), ..opts };
        assert!(gradcheck_model(&none).is_err());
    }

    #[test]
    fn gradcheck_floor_still_sees_small_errors() {
        let clean = GradcheckOptions { only: Some("loc4.sccm.phi".into()), ..GradcheckOptions::default() };
        assert!(gradcheck_model(&clean).unwrap().passed());
        let nudged = GradcheckOptions { corrupt: Some("loc4.sccm.phi.weight".into()), corrupt_by: 1e-6, ..clean };
        let report = gradcheck_model(&nudged).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().worst_index, 0);
    }
}
