//! Feature aggregation: per-scale enhancement of RGB and noise features and
//! their fusion, plus the dynamic convolution used on the RGB path.

use crate::error::{contract_err, dim_err, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Linear};
use crate::tensor::{ConvSpec, ParamInit, ParamStore, PoolMode, Var};

/// 3x3 convolution whose kernel is a per-sample convex combination of `K`
/// learned kernels, weighted by an attention over the pooled input.
#[derive(Clone, Debug)]
pub struct DynamicConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernels: usize,
    pub temperature: f64,
    fc1: Linear,
    fc2: Linear,
}

impl DynamicConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernels: usize,
        temperature: f64,
    ) -> Result<Self> {
        if kernels < 1 {
            return Err(contract_err!("dynamic conv needs at least one kernel"));
        }
        if !(temperature > 0.0) {
            return Err(contract_err!("dynamic conv temperature must be positive, got {temperature}"));
        }
        for k in 0..kernels {
            store.declare(&format!("{name}.kernel{k}.weight"), &[cout, cin, 3, 3], ParamInit::FanIn(cin * 9))?;
            store.declare(&format!("{name}.kernel{k}.bias"), &[cout], ParamInit::Constant(0.0))?;
        }
        let hidden = (cin / 4).max(4);
        let fc1 = Linear::new(store, &format!("{name}.attn1"), cin, hidden)?;
        let fc2 = Linear::new(store, &format!("{name}.attn2"), hidden, kernels)?;
        Ok(Self { name: name.to_string(), cin, cout, kernels, temperature, fc1, fc2 })
    }

    /// Attention weights `N x K`, each row on the probability simplex.
    pub fn attention(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.graph.shape(x)[0];
        let pooled = ctx.graph.pool2d(x, PoolMode::GlobalAvg, 0, 0, 0)?;
        let pooled = ctx.graph.reshape(pooled, &[n, self.cin])?;
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.graph.relu(h);
        let logits = self.fc2.forward(ctx, h)?;
        let logits = ctx.graph.scale(logits, 1.0 / self.temperature);
        ctx.graph.softmax(logits, 1)
    }

    /// Convolution with kernels aggregated by the given attention `N x K`.
    pub fn apply(&self, ctx: &mut Ctx, x: Var, pi: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cin {
            return Err(dim_err!("{} expects N x {} x H x W, got {shape:?}", self.name, self.cin));
        }
        let n = shape[0];
        if ctx.graph.shape(pi) != [n, self.kernels] {
            return Err(dim_err!("{} attention must be {n} x {}, got {:?}", self.name, self.kernels, ctx.graph.shape(pi)));
        }
        let mut weights = Vec::with_capacity(self.kernels);
        for k in 0..self.kernels {
            let w = ctx.param(&format!("{}.kernel{k}.weight", self.name))?;
            let b = ctx.param(&format!("{}.kernel{k}.bias", self.name))?;
            weights.push((w, b));
        }
        let mut outs = Vec::with_capacity(n);
        for s in 0..n {
            let xs = ctx.graph.narrow(x, 0, s, 1)?;
            let (mut w_sum, mut b_sum) = (None, None);
            for (k, &(w, b)) in weights.iter().enumerate() {
                let p = ctx.graph.gather(pi, vec![s * self.kernels + k], &[1])?;
                let wk = ctx.graph.scale_by(w, p)?;
                let bk = ctx.graph.scale_by(b, p)?;
                w_sum = Some(match w_sum {
                    None => wk,
                    Some(acc) => ctx.graph.add(acc, wk)?,
                });
                b_sum = Some(match b_sum {
                    None => bk,
                    Some(acc) => ctx.graph.add(acc, bk)?,
                });
            }
            let y = ctx.graph.conv2d(xs, w_sum.unwrap(), b_sum, ConvSpec::same(3, 1))?;
            outs.push(y);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        ctx.graph.concat(&outs, 0)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let pi = self.attention(ctx, x)?;
        self.apply(ctx, x, pi)
    }
}

/// Which parts of the aggregation module are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamMode {
    /// Both enhancement paths followed by fusion.
    On,
    /// Fusion of the raw backbone features only.
    ConcatOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamConfig {
    pub mode: FamMode,
    /// Channel reduction of the 1x1 convolutions on both paths.
    pub reduction: usize,
    pub dc_kernels: usize,
    pub dc_temperature: f64,
}

impl Default for FamConfig {
    fn default() -> Self {
        Self { mode: FamMode::On, reduction: 2, dc_kernels: 4, dc_temperature: 4.0 }
    }
}

#[derive(Clone, Debug)]
struct RgbPath {
    reduce: Conv,
    dynamic: DynamicConv,
    expand: Conv,
}

#[derive(Clone, Debug)]
struct NoisePath {
    reduce: Conv,
    expand: Conv,
}

/// Aggregation module for one scale.
#[derive(Clone, Debug)]
pub struct FamScale {
    pub channels: usize,
    rgb: Option<RgbPath>,
    noise: Option<NoisePath>,
    has_noise_input: bool,
    fuse: Conv,
    bn: BatchNorm,
}

impl FamScale {
    /// `with_noise = false` builds the RGB-only variant: the fusion sees only
    /// the (enhanced) RGB features.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, with_noise: bool, cfg: &FamConfig) -> Result<Self> {
        if cfg.reduction == 0 {
            return Err(contract_err!("FAM reduction must be positive"));
        }
        let reduced = (channels / cfg.reduction).max(1);
        let enhance = cfg.mode == FamMode::On;
        let rgb = if enhance {
            Some(RgbPath {
                reduce: Conv::same(store, &format!("{prefix}.rgb_reduce"), channels, reduced, 1)?,
                dynamic: DynamicConv::new(
                    store,
                    &format!("{prefix}.rgb_dynamic"),
                    reduced,
                    reduced,
                    cfg.dc_kernels,
                    cfg.dc_temperature,
                )?,
                expand: Conv::same(store, &format!("{prefix}.rgb_expand"), reduced, channels, 5)?,
            })
        } else {
            None
        };
        let noise = if enhance && with_noise {
            Some(NoisePath {
                reduce: Conv::same(store, &format!("{prefix}.noise_reduce"), channels, reduced, 1)?,
                expand: Conv::same(store, &format!("{prefix}.noise_expand"), reduced, channels, 7)?,
            })
        } else {
            None
        };
        let fuse_in = if with_noise { 2 * channels } else { channels };
        let fuse = Conv::same(store, &format!("{prefix}.fuse"), fuse_in, channels, 1)?;
        let bn = BatchNorm::new(store, &format!("{prefix}.fuse_bn"), channels)?;
        Ok(Self { channels, rgb, noise, has_noise_input: with_noise, fuse, bn })
    }

    /// `Sobel -> 1x1 -> dynamic 3x3 -> 5x5`, plus the input.
    pub fn enhance_rgb(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let Some(p) = &self.rgb else { return Ok(f) };
        let e = ctx.graph.sobel_magnitude(f)?;
        let e = p.reduce.forward(ctx, e)?;
        let e = p.dynamic.forward(ctx, e)?;
        let e = p.expand.forward(ctx, e)?;
        ctx.graph.add(e, f)
    }

    /// `1x1 -> 3x3 max-pool (stride 1) -> 7x7`, plus the input.
    pub fn enhance_noise(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let Some(p) = &self.noise else { return Ok(f) };
        let e = p.reduce.forward(ctx, f)?;
        let e = ctx.graph.pool2d(e, PoolMode::Max, 3, 1, 1)?;
        let e = p.expand.forward(ctx, e)?;
        ctx.graph.add(e, f)
    }

    /// `ReLU(BN(1x1(concat)))`.
    pub fn aggregate(&self, ctx: &mut Ctx, rgb: Var, noise: Option<Var>) -> Result<Var> {
        let x = match (noise, self.has_noise_input) {
            (Some(n), true) => {
                if ctx.graph.shape(rgb) != ctx.graph.shape(n) {
                    return Err(dim_err!(
                        "aggregate inputs differ: {:?} vs {:?}",
                        ctx.graph.shape(rgb),
                        ctx.graph.shape(n)
                    ));
                }
                ctx.graph.concat_channels(&[rgb, n])?
            }
            (None, false) => rgb,
            _ => return Err(contract_err!("noise features supplied inconsistently with the module layout")),
        };
        let y = self.fuse.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.relu(y))
    }

    pub fn forward(&self, ctx: &mut Ctx, rgb: Var, noise: Option<Var>) -> Result<Var> {
        let r = self.enhance_rgb(ctx, rgb)?;
        let n = match noise {
            Some(n) => Some(self.enhance_noise(ctx, n)?),
            None => None,
        };
        self.aggregate(ctx, r, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{finite_diff_check, Graph, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn plain_conv(store: &ParamStore, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let (xv, wv, bv) = (ctx.graph.constant(x.clone()), ctx.graph.constant(w.clone()), ctx.graph.constant(b.clone()));
        let y = ctx.graph.conv2d(xv, wv, Some(bv), ConvSpec::same(3, 1)).unwrap();
        ctx.graph.value(y).clone()
    }

    fn dyn_out(store: &ParamStore, dc: &DynamicConv, x: &Tensor) -> (Tensor, Tensor) {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let xv = ctx.graph.constant(x.clone());
        let pi = dc.attention(&mut ctx, xv).unwrap();
        let y = dc.apply(&mut ctx, xv, pi).unwrap();
        (ctx.graph.value(y).clone(), ctx.graph.value(pi).clone())
    }

    #[test]
    fn single_kernel_equals_plain_conv_bitwise() {
        let mut store = ParamStore::new(1);
        let dc = DynamicConv::new(&mut store, "dc", 3, 2, 1, 4.0).unwrap();
        store.set("dc.kernel0.bias", Tensor::new(&[2], vec![0.3, -0.1]).unwrap()).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[2, 3, 5, 5]);
        let (y, _) = dyn_out(&store, &dc, &x);
        let expect = plain_conv(&store, &x, store.get("dc.kernel0.weight").unwrap(), store.get("dc.kernel0.bias").unwrap());
        assert_eq!(y, expect);
    }

    #[test]
    fn saturated_attention_selects_first_kernel() {
        let mut store = ParamStore::new(3);
        let dc = DynamicConv::new(&mut store, "dc", 4, 3, 4, 1.0).unwrap();
        store.set("dc.attn2.weight", Tensor::zeros(&[4, 4])).unwrap();
        store.set("dc.attn2.bias", Tensor::new(&[4], vec![40.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[1, 4, 6, 6]);
        let (y, _) = dyn_out(&store, &dc, &x);
        let expect = plain_conv(&store, &x, store.get("dc.kernel0.weight").unwrap(), store.get("dc.kernel0.bias").unwrap());
        assert!(y.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn matches_weighted_sum_oracle() {
        for seed in 0..10 {
            let mut store = ParamStore::new(seed);
            let dc = DynamicConv::new(&mut store, "dc", 3, 2, 4, 4.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for k in 0..4 {
                store.set(&format!("dc.kernel{k}.bias"), rand_tensor(&mut rng, &[2])).unwrap();
            }
            let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
            let (y, pi) = dyn_out(&store, &dc, &x);
            for s in 0..2 {
                let mut w = vec![0.0; 2 * 3 * 9];
                let mut b = vec![0.0; 2];
                for k in 0..4 {
                    let p = pi.get(&[s, k]);
                    for (acc, v) in w.iter_mut().zip(store.get(&format!("dc.kernel{k}.weight")).unwrap().data()) {
                        *acc += p * v;
                    }
                    for (acc, v) in b.iter_mut().zip(store.get(&format!("dc.kernel{k}.bias")).unwrap().data()) {
                        *acc += p * v;
                    }
                }
                let xs = Tensor::new(&[1, 3, 4, 5], x.data()[s * 60..(s + 1) * 60].to_vec()).unwrap();
                let expect = plain_conv(&store, &xs, &Tensor::new(&[2, 3, 3, 3], w).unwrap(), &Tensor::new(&[2], b).unwrap());
                let got = Tensor::new(&[1, 2, 4, 5], y.data()[s * 40..(s + 1) * 40].to_vec()).unwrap();
                assert!(got.max_abs_diff(&expect) < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_zero_kernels() {
        assert!(DynamicConv::new(&mut ParamStore::new(0), "dc", 3, 3, 0, 4.0).is_err());
    }

    #[test]
    fn linear_in_x_with_frozen_attention() {
        let mut store = ParamStore::new(5);
        let dc = DynamicConv::new(&mut store, "dc", 2, 2, 3, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y) = (rand_tensor(&mut rng, &[2, 2, 4, 4]), rand_tensor(&mut rng, &[2, 2, 4, 4]));
        let pi = Tensor::new(&[2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
        let (a, b) = (0.7, -1.3);
        let run = |t: &Tensor| {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let (tv, pv) = (ctx.graph.constant(t.clone()), ctx.graph.constant(pi.clone()));
            let out = dc.apply(&mut ctx, tv, pv).unwrap();
            ctx.graph.value(out).clone()
        };
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (ox, oy, om) = (run(&x), run(&y), run(&mix));
        // biases start at zero, so the map is linear rather than affine
        for i in 0..om.len() {
            assert!((om.data()[i] - (a * ox.data()[i] + b * oy.data()[i])).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn attention_is_a_simplex(seed in any::<u64>(), k in 1usize..6) {
            let mut store = ParamStore::new(seed);
            let dc = DynamicConv::new(&mut store, "dc", 5, 5, k, 4.0).unwrap();
            let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), &[3, 5, 3, 3]).map(|v| v * 10.0);
            let (_, pi) = dyn_out(&store, &dc, &x);
            for s in 0..3 {
                let row: Vec<f64> = (0..k).map(|j| pi.get(&[s, j])).collect();
                prop_assert!(row.iter().all(|p| *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    fn fam(channels: usize, seed: u64) -> (ParamStore, FamScale) {
        let mut store = ParamStore::new(seed);
        let f = FamScale::new(&mut store, "fam.scale1", channels, true, &FamConfig::default()).unwrap();
        (store, f)
    }

    #[test]
    fn zero_features_stay_zero() {
        let (store, f) = fam(8, 7);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let z = ctx.graph.constant(Tensor::zeros(&[1, 8, 6, 6]));
        let r = f.enhance_rgb(&mut ctx, z).unwrap();
        let n = f.enhance_noise(&mut ctx, z).unwrap();
        let a = f.aggregate(&mut ctx, z, Some(z)).unwrap();
        for v in [r, n, a] {
            assert_eq!(ctx.graph.value(v).max_abs(), 0.0);
        }
    }

    #[test]
    fn shapes_preserved_at_all_scales() {
        for (c, hw) in [(16, 32), (32, 16), (64, 8), (128, 4)] {
            let (store, f) = fam(c, 8);
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let x = ctx.graph.constant(Tensor::full(&[1, c, hw, hw], 0.1));
            let r = f.enhance_rgb(&mut ctx, x).unwrap();
            let n = f.enhance_noise(&mut ctx, x).unwrap();
            let a = f.aggregate(&mut ctx, r, Some(n)).unwrap();
            for v in [r, n, a] {
                assert_eq!(ctx.graph.shape(v), &[1, c, hw, hw]);
            }
        }
    }

    #[test]
    fn aggregate_is_nonnegative_and_checks_shapes() {
        let (store, f) = fam(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let a = ctx.graph.constant(rand_tensor(&mut rng, &[2, 4, 5, 5]));
        let b = ctx.graph.constant(rand_tensor(&mut rng, &[2, 4, 5, 5]));
        let y = f.aggregate(&mut ctx, a, Some(b)).unwrap();
        assert!(ctx.graph.value(y).data().iter().all(|v| *v >= 0.0));
        let odd = ctx.graph.constant(Tensor::zeros(&[2, 4, 4, 5]));
        assert!(matches!(f.aggregate(&mut ctx, a, Some(odd)), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn aggregate_swap_with_permuted_fuse_weights() {
        let (mut store, f) = fam(3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (a, b) = (rand_tensor(&mut rng, &[1, 3, 4, 4]), rand_tensor(&mut rng, &[1, 3, 4, 4]));
        let run = |store: &ParamStore, first: &Tensor, second: &Tensor| {
            let mut ctx = Ctx::new(store, Mode::Eval);
            let (x, y) = (ctx.graph.constant(first.clone()), ctx.graph.constant(second.clone()));
            let out = f.aggregate(&mut ctx, x, Some(y)).unwrap();
            ctx.graph.value(out).clone()
        };
        let before = run(&store, &a, &b);
        let w = store.get("fam.scale1.fuse.weight").unwrap().clone();
        let mut swapped = w.clone();
        for co in 0..3 {
            for ci in 0..3 {
                swapped.set(&[co, ci, 0, 0], w.get(&[co, ci + 3, 0, 0]));
                swapped.set(&[co, ci + 3, 0, 0], w.get(&[co, ci, 0, 0]));
            }
        }
        store.set("fam.scale1.fuse.weight", swapped).unwrap();
        assert!(run(&store, &b, &a).max_abs_diff(&before) < 1e-15);
    }

    fn grad_check(store: &ParamStore, build: impl Fn(&mut Ctx) -> Var) {
        let run = |s: &ParamStore| -> (Graph, Var) {
            let mut ctx = Ctx::new(s, Mode::Train);
            let out = build(&mut ctx);
            let sq = ctx.graph.mul(out, out).unwrap();
            let l = ctx.graph.sum(sq);
            (ctx.graph, l)
        };
        let (g, l) = run(store);
        let analytic = g.backward(l).unwrap().params();
        assert!(!analytic.is_empty());
        let report = finite_diff_check(|s| { let (g, l) = run(s); g.value(l).data()[0] }, store, &analytic, 1e-5, 1e-4, 1e-6);
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn gradients_of_each_path() {
        let (mut store, f) = fam(4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for (name, t) in store.clone().trainable() {
            if name.ends_with("bias") {
                store.set(name, rand_tensor(&mut rng, t.shape()).map(|v| v * 0.1)).unwrap();
            }
        }
        let (x, y) = (rand_tensor(&mut rng, &[2, 4, 5, 5]), rand_tensor(&mut rng, &[2, 4, 5, 5]));
        grad_check(&store, |ctx| {
            let v = ctx.graph.constant(x.clone());
            f.enhance_rgb(ctx, v).unwrap()
        });
        grad_check(&store, |ctx| {
            let v = ctx.graph.constant(y.clone());
            f.enhance_noise(ctx, v).unwrap()
        });
        grad_check(&store, |ctx| {
            let (a, b) = (ctx.graph.constant(x.clone()), ctx.graph.constant(y.clone()));
            f.forward(ctx, a, Some(b)).unwrap()
        });
    }
}
