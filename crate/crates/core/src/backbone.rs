//! Four-stage convolutional feature extractor.
//!
//! The same architecture runs on the RGB image and on its guided-noise map,
//! under the disjoint name prefixes `rgb.` and `noise.`.

use crate::error::{contract_err, dim_err, Result};
use crate::nn::{ConvBnRelu, Ctx};
use crate::tensor::{ConvSpec, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stem_channels: 16, stage_channels: [16, 32, 64, 128], blocks_per_stage: 1, input_size: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.blocks_per_stage == 0 {
            return Err(contract_err!("stem_channels and blocks_per_stage must be positive"));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract_err!("stage_channels must be strictly increasing, got {:?}", self.stage_channels));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(contract_err!("input_size must be a positive multiple of 16, got {}", self.input_size));
        }
        Ok(())
    }

    /// Spatial extent of feature scale `i` (0-based): `input / 2^(i+1)`.
    pub fn scale_size(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub prefix: String,
    pub config: BackboneConfig,
    stem: ConvBnRelu,
    stages: Vec<Vec<ConvBnRelu>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let s2 = ConvSpec { stride: 2, padding: 1, dilation: 1 };
        let s1 = ConvSpec::same(3, 1);
        let stem = ConvBnRelu::new(store, &format!("{prefix}.stem"), 3, config.stem_channels, 3, s2)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.stem_channels;
        for (s, &cout) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let spec = if b == 0 && s > 0 { s2 } else { s1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                blocks.push(ConvBnRelu::new(store, &name, cin, cout, 3, spec)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self { prefix: prefix.to_string(), config: config.clone(), stem, stages })
    }

    /// Features at strides 2, 4, 8 and 16 for an `N x 3 x S x S` input.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<[Var; 4]> {
        let shape = ctx.graph.shape(x).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(dim_err!("{} backbone expects N x 3 x {s} x {s}, got {shape:?}", self.prefix));
        }
        let mut h = self.stem.forward(ctx, x)?;
        let mut out = [h; 4];
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(ctx, h)?;
            }
            out[i] = h;
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params() + self.stages.iter().flatten().map(ConvBnRelu::num_params).sum::<usize>()
    }
}
