//! Atrous residual pyramid: six parallel views of a feature map (identity,
//! pooled context, 1x1, and three dilated 3x3 convolutions) fused by a 1x1.

use crate::error::{dim_err, Result};
use crate::nn::{Conv, Ctx};
use crate::tensor::{ConvSpec, ParamStore, PoolMode, UpsampleMode, Var};

pub const DILATIONS: [usize; 3] = [6, 12, 18];

/// Dilation actually used on an `h x w` map: rates that reach past the map
/// are reduced to `max(h, w) - 1`, never below 1.
pub fn effective_dilation(d: usize, h: usize, w: usize) -> usize {
    let extent = h.max(w);
    if extent <= d {
        (extent.saturating_sub(1)).max(1)
    } else {
        d
    }
}

#[derive(Clone, Debug)]
pub struct ArpmScale {
    pub channels: usize,
    pub branch: usize,
    gap: Conv,
    local: Conv,
    atrous: Vec<(usize, Conv)>,
    fuse: Conv,
}

impl ArpmScale {
    /// `branch` is the width of each of the five convolutional branches.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, branch: usize) -> Result<Self> {
        let gap = Conv::same(store, &format!("{prefix}.gap"), channels, branch, 1)?;
        let local = Conv::same(store, &format!("{prefix}.local"), channels, branch, 1)?;
        let atrous = DILATIONS
            .iter()
            .map(|&d| Ok((d, Conv::same(store, &format!("{prefix}.atrous{d}"), channels, branch, 3)?)))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::same(store, &format!("{prefix}.fuse"), channels + 5 * branch, channels, 1)?;
        Ok(Self { channels, branch, gap, local, atrous, fuse })
    }

    /// The six branch outputs in concatenation order.
    pub fn branches(&self, ctx: &mut Ctx, x: Var) -> Result<Vec<Var>> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(dim_err!("ARPM expects N x {} x H x W, got {shape:?}", self.channels));
        }
        let (h, w) = (shape[2], shape[3]);
        let pooled = ctx.graph.pool2d(x, PoolMode::GlobalAvg, 0, 0, 0)?;
        let pooled = self.gap.forward(ctx, pooled)?;
        let avg = ctx.graph.upsample(pooled, h, w, UpsampleMode::Nearest)?;
        let local = self.local.forward(ctx, x)?;
        let mut out = vec![x, avg, local];
        for (d, conv) in &self.atrous {
            let d = effective_dilation(*d, h, w);
            out.push(conv.forward_with(ctx, x, ConvSpec::same(3, d))?);
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let parts = self.branches(ctx, x)?;
        let cat = ctx.graph.concat_channels(&parts)?;
        self.fuse.forward(ctx, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{finite_diff_check, Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dilation_clamp() {
        assert_eq!(effective_dilation(6, 32, 32), 6);
        assert_eq!(effective_dilation(18, 16, 16), 15);
        assert_eq!(effective_dilation(6, 4, 4), 3);
        assert_eq!(effective_dilation(12, 1, 1), 1);
        assert_eq!(effective_dilation(6, 2, 9), 6);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut store = ParamStore::new(1);
        let a = ArpmScale::new(&mut store, "arpm.scale1", 8, 4).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.graph.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let y = a.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.graph.value(y).max_abs(), 0.0);
    }

    #[test]
    fn channel_arithmetic() {
        let mut store = ParamStore::new(2);
        let a = ArpmScale::new(&mut store, "arpm.scale2", 32, 16).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.graph.constant(Tensor::full(&[1, 32, 16, 16], 0.2));
        let parts = a.branches(&mut ctx, x).unwrap();
        let cat = ctx.graph.concat_channels(&parts).unwrap();
        assert_eq!(ctx.graph.shape(cat), &[1, 112, 16, 16]);
        let y = a.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.graph.shape(y), &[1, 32, 16, 16]);
    }

    #[test]
    fn spatial_size_preserved_for_small_maps() {
        let mut store = ParamStore::new(3);
        let a = ArpmScale::new(&mut store, "arpm.scale4", 4, 2).unwrap();
        for (h, w) in [(1, 1), (1, 3), (2, 2), (4, 4), (7, 5), (20, 20)] {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let x = ctx.graph.constant(Tensor::full(&[2, 4, h, w], 0.5));
            let y = a.forward(&mut ctx, x).unwrap();
            assert_eq!(ctx.graph.shape(y), &[2, 4, h, w]);
        }
    }

    #[test]
    fn clamped_branch_with_unit_dilation_is_plain_conv() {
        let mut store = ParamStore::new(4);
        let a = ArpmScale::new(&mut store, "arpm.scale4", 3, 2).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[1, 3, 2, 2]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.graph.constant(x);
        let parts = a.branches(&mut ctx, xv).unwrap();
        let w = ctx.param("arpm.scale4.atrous6.weight").unwrap();
        let b = ctx.param("arpm.scale4.atrous6.bias").unwrap();
        let plain = ctx.graph.conv2d(xv, w, Some(b), ConvSpec { stride: 1, padding: 1, dilation: 1 }).unwrap();
        assert_eq!(ctx.graph.value(parts[3]), ctx.graph.value(plain));
    }

    #[test]
    fn pooled_branch_is_spatially_constant() {
        let mut store = ParamStore::new(6);
        let a = ArpmScale::new(&mut store, "arpm.scale1", 4, 2).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.graph.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[2, 4, 5, 6]));
        let parts = a.branches(&mut ctx, x).unwrap();
        let avg = ctx.graph.value(parts[1]);
        for plane in avg.data().chunks(30) {
            assert!(plane.iter().all(|v| *v == plane[0]));
        }
    }

    #[test]
    fn zeroed_atrous_weights_leave_three_branch_function() {
        let mut store = ParamStore::new(8);
        let a = ArpmScale::new(&mut store, "arpm.scale1", 4, 2).unwrap();
        for d in DILATIONS {
            store.set(&format!("arpm.scale1.atrous{d}.weight"), Tensor::zeros(&[2, 4, 3, 3])).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 4, 6, 6]);
        let run = |t: &Tensor| {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let v = ctx.graph.constant(t.clone());
            let y = a.forward(&mut ctx, v).unwrap();
            ctx.graph.value(y).clone()
        };
        // Explicit formula using only identity, pooled and 1x1 branches.
        let fw = store.get("arpm.scale1.fuse.weight").unwrap();
        let fb = store.get("arpm.scale1.fuse.bias").unwrap();
        let (gw, lw) = (store.get("arpm.scale1.gap.weight").unwrap(), store.get("arpm.scale1.local.weight").unwrap());
        let mean: Vec<f64> = (0..4).map(|c| x.data()[c * 36..(c + 1) * 36].iter().sum::<f64>() / 36.0).collect();
        let y = run(&x);
        for co in 0..4 {
            for p in 0..36 {
                let mut acc = fb.data()[co];
                for ci in 0..4 {
                    acc += fw.get(&[co, ci, 0, 0]) * x.data()[ci * 36 + p];
                }
                for b in 0..2 {
                    let avg: f64 = (0..4).map(|ci| gw.get(&[b, ci, 0, 0]) * mean[ci]).sum();
                    let loc: f64 = (0..4).map(|ci| lw.get(&[b, ci, 0, 0]) * x.data()[ci * 36 + p]).sum();
                    acc += fw.get(&[co, 4 + b, 0, 0]) * avg + fw.get(&[co, 6 + b, 0, 0]) * loc;
                }
                assert!((y.data()[co * 36 + p] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_check() {
        let mut store = ParamStore::new(10);
        let a = ArpmScale::new(&mut store, "arpm.scale3", 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let build = |s: &ParamStore| -> (Graph, Var) {
            let mut ctx = Ctx::new(s, Mode::Train);
            let v = ctx.graph.constant(x.clone());
            let y = a.forward(&mut ctx, v).unwrap();
            let sq = ctx.graph.mul(y, y).unwrap();
            let l = ctx.graph.sum(sq);
            (ctx.graph, l)
        };
        let (g, l) = build(&store);
        let analytic = g.backward(l).unwrap().params();
        let report = finite_diff_check(|s| { let (g, l) = build(s); g.value(l).data()[0] }, &store, &analytic, 1e-5, 1e-4, 1e-6);
        assert!(report.passed(), "{:?}", report.worst());
    }
}
