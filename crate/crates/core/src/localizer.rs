//! Spatial/channel correlation attention, mask heads, the coarse-to-fine
//! localization chain and the training objective.
//!
//! Module `loc1` runs on the coarsest scale and `loc4` on the finest; mask
//! `M4` from `loc4` is the final prediction.

use crate::error::{contract_err, dim_err, Result};
use crate::nn::{Conv, Ctx};
use crate::tensor::{Graph, ParamInit, ParamStore, Tensor, UpsampleMode, Var};

/// Gather indices for space-to-depth: `N x C x H x W -> N x (HW/r^2) x (C r^2)`.
///
/// Token `t = bi * (W/r) + bj` holds feature `c r^2 + di r + dj` taken from
/// pixel `(bi r + di, bj r + dj)` of channel `c`.
pub fn space_to_depth_indices(n: usize, c: usize, h: usize, w: usize, r: usize) -> Result<Vec<usize>> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(contract_err!("reshape factor {r} must divide {h}x{w}"));
    }
    let (bh, bw) = (h / r, w / r);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for bi in 0..bh {
            for bj in 0..bw {
                for ch in 0..c {
                    for di in 0..r {
                        for dj in 0..r {
                            idx.push(((s * c + ch) * h + bi * r + di) * w + bj * r + dj);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`space_to_depth_indices`].
pub fn depth_to_space_indices(n: usize, c: usize, h: usize, w: usize, r: usize) -> Result<Vec<usize>> {
    let fwd = space_to_depth_indices(n, c, h, w, r)?;
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    Ok(inv)
}

pub fn sccm_reshape(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let [n, c, h, w] = dims(g, x)?;
    let idx = space_to_depth_indices(n, c, h, w, r)?;
    g.gather(x, idx, &[n, h * w / (r * r), c * r * r])
}

pub fn sccm_unreshape(g: &mut Graph, t: Var, [n, c, h, w]: [usize; 4], r: usize) -> Result<Var> {
    let idx = depth_to_space_indices(n, c, h, w, r)?;
    g.gather(t, idx, &[n, c, h, w])
}

fn dims(g: &Graph, x: Var) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(dim_err!("expected N x C x H x W, got {s:?}"));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Intermediate products of one correlation-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct SccmVars {
    pub m_s: Var,
    pub m_c: Var,
    pub a_s: Var,
    pub a_c: Var,
    pub s: Var,
    pub c: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Sccm {
    pub name: String,
    pub channels: usize,
    pub r: usize,
    g: crate::nn::Linear,
    theta: crate::nn::Linear,
    phi: crate::nn::Linear,
    k_s: Conv,
    k_c: Conv,
}

impl Sccm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, r: usize) -> Result<Self> {
        let d = channels * r * r;
        let g = crate::nn::Linear::new(store, &format!("{name}.g"), d, d)?;
        let theta = crate::nn::Linear::new(store, &format!("{name}.theta"), d, d)?;
        let phi = crate::nn::Linear::new(store, &format!("{name}.phi"), d, d)?;
        let k_s = Conv::same(store, &format!("{name}.k_s"), channels, channels, 1)?;
        let k_c = Conv::same(store, &format!("{name}.k_c"), channels, channels, 1)?;
        store.declare(&format!("{name}.alpha"), &[1], ParamInit::Constant(0.0))?;
        Ok(Self { name: name.to_string(), channels, r, g, theta, phi, k_s, k_c })
    }

    pub fn forward_detailed(&self, ctx: &mut Ctx, x: Var) -> Result<SccmVars> {
        let shape = dims(&ctx.graph, x)?;
        if shape[1] != self.channels {
            return Err(dim_err!("{} expects {} channels, got {:?}", self.name, self.channels, shape));
        }
        let xr = sccm_reshape(&mut ctx.graph, x, self.r)?;
        let xg = self.g.forward(ctx, xr)?;
        let xt = self.theta.forward(ctx, xr)?;
        let xp = self.phi.forward(ctx, xr)?;
        // spatial: softmax(X_theta X_phi^T) X_g
        let xp_t = ctx.graph.transpose(xp)?;
        let logits_s = ctx.graph.matmul(xt, xp_t)?;
        let m_s = ctx.graph.softmax(logits_s, 2)?;
        let a_s = ctx.graph.matmul(m_s, xg)?;
        // channel: X_g softmax(X_theta^T X_theta)
        let xt_t = ctx.graph.transpose(xt)?;
        let logits_c = ctx.graph.matmul(xt_t, xt)?;
        let m_c = ctx.graph.softmax(logits_c, 2)?;
        let a_c = ctx.graph.matmul(xg, m_c)?;
        let a_s = sccm_unreshape(&mut ctx.graph, a_s, shape, self.r)?;
        let a_c = sccm_unreshape(&mut ctx.graph, a_c, shape, self.r)?;
        let ks = self.k_s.forward(ctx, a_s)?;
        let kc = self.k_c.forward(ctx, a_c)?;
        let alpha = ctx.param(&format!("{}.alpha", self.name))?;
        let s = ctx.graph.sigmoid(alpha);
        let neg = ctx.graph.scale(s, -1.0);
        let c = ctx.graph.add_scalar(neg, 1.0);
        let ks = ctx.graph.scale_by(ks, s)?;
        let kc = ctx.graph.scale_by(kc, c)?;
        let sum = ctx.graph.add(x, ks)?;
        let out = ctx.graph.add(sum, kc)?;
        Ok(SccmVars { m_s, m_c, a_s, a_c, s, c, out })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(ctx, x)?.out)
    }
}

/// `sigmoid(conv3x3(relu(conv3x3(F))))`, `C -> C/2 -> 1`.
#[derive(Clone, Debug)]
pub struct MaskHead {
    first: Conv,
    second: Conv,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let mid = (channels / 2).max(1);
        Ok(Self {
            first: Conv::same(store, &format!("{prefix}.head1"), channels, mid, 3)?,
            second: Conv::same(store, &format!("{prefix}.head2"), mid, 1, 3)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let h = self.first.forward(ctx, f)?;
        let h = ctx.graph.relu(h);
        let m = self.second.forward(ctx, h)?;
        Ok(ctx.graph.sigmoid(m))
    }
}

/// One localization module: optional prior injection, SCCM, mask head.
#[derive(Clone, Debug)]
pub struct LocModule {
    pub prior: Option<Conv>,
    pub sccm: Sccm,
    pub head: MaskHead,
}

impl LocModule {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, r: usize, with_prior: bool) -> Result<Self> {
        let prior = if with_prior { Some(Conv::same(store, &format!("{prefix}.prior"), 1, channels, 1)?) } else { None };
        let sccm = Sccm::new(store, &format!("{prefix}.sccm"), channels, r)?;
        let head = MaskHead::new(store, prefix, channels)?;
        Ok(Self { prior, sccm, head })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, previous: Option<Var>) -> Result<Var> {
        let x = match (&self.prior, previous) {
            (Some(conv), Some(mask)) => {
                let [_, _, h, w] = dims(&ctx.graph, x)?;
                let up = ctx.graph.upsample(mask, h, w, UpsampleMode::Bilinear)?;
                let p = conv.forward(ctx, up)?;
                ctx.graph.add(x, p)?
            }
            (None, None) => x,
            _ => return Err(contract_err!("prior mask supplied inconsistently with the module layout")),
        };
        let f = self.sccm.forward(ctx, x)?;
        self.head.forward(ctx, f)
    }
}

/// Masks `M1..M4`, coarsest first; `masks[3]` is the final prediction.
#[derive(Clone, Copy, Debug)]
pub struct MaskSet {
    pub masks: [Var; 4],
}

impl MaskSet {
    pub fn final_mask(&self) -> Var {
        self.masks[3]
    }
}

/// Reshape factor used at backbone scale `i` (0-based, finest first).
pub fn default_reshape_factor(scale: usize) -> usize {
    if scale < 3 {
        2
    } else {
        1
    }
}

/// The four chained modules. `modules[k]` is `loc{k+1}` and consumes backbone
/// scale `3 - k`.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub modules: Vec<LocModule>,
}

impl Localizer {
    /// `channels[i]` is the width of backbone scale `i` (finest first).
    pub fn new(store: &mut ParamStore, channels: [usize; 4], factors: [usize; 4]) -> Result<Self> {
        let modules = (0..4)
            .map(|k| {
                let scale = 3 - k;
                LocModule::new(store, &format!("loc{}", k + 1), channels[scale], factors[scale], k > 0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modules })
    }

    /// `features[i]` is scale `i`, finest first.
    pub fn forward(&self, ctx: &mut Ctx, features: &[Var]) -> Result<MaskSet> {
        if features.len() != 4 {
            return Err(contract_err!("localizer needs four feature scales, got {}", features.len()));
        }
        let mut masks = Vec::with_capacity(4);
        let mut previous = None;
        for (k, module) in self.modules.iter().enumerate() {
            let m = module.forward(ctx, features[3 - k], previous)?;
            masks.push(m);
            previous = Some(m);
        }
        Ok(MaskSet { masks: [masks[0], masks[1], masks[2], masks[3]] })
    }
}

/// Nearest-neighbour resampling of a binary mask `h x w` to `oh x ow`,
/// sampling source pixel `floor((o + 0.5) * in / out)`.
pub fn downsample_nearest(mask: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, out: usize, inp: usize| (((2 * o + 1) * inp) / (2 * out)).min(inp - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = src(oy, oh, h);
        for ox in 0..ow {
            out.push(mask[sy * w + src(ox, ow, w)]);
        }
    }
    out
}

/// Ground truth at each mask resolution, matching `MaskSet` order.
pub fn ground_truth_pyramid(mask: &[f64], h: usize, w: usize, sizes: [(usize, usize); 4]) -> [Tensor; 4] {
    sizes.map(|(oh, ow)| Tensor::new(&[1, 1, oh, ow], downsample_nearest(mask, h, w, oh, ow)).expect("sized"))
}

/// Pixel-mean binary cross-entropy.
pub fn bce_loss(g: &mut Graph, m: Var, gt: Var) -> Result<Var> {
    g.bce(m, gt)
}

/// Unweighted sum of the four per-scale losses, accumulated in mask order.
pub fn total_loss(g: &mut Graph, masks: &MaskSet, gts: &[Var; 4]) -> Result<Var> {
    let mut total = bce_loss(g, masks.masks[0], gts[0])?;
    for i in 1..4 {
        let l = bce_loss(g, masks.masks[i], gts[i])?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn reshape_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = sccm_reshape(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(t), &[1, 1, 4]);
        assert_eq!(g.value(t).data(), &[1.0, 2.0, 3.0, 4.0]);

        let y = g.constant(Tensor::new(&[1, 2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let flat = sccm_reshape(&mut g, y, 1).unwrap();
        assert_eq!(g.value(flat).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(sccm_reshape(&mut g, y, 2).is_err());
    }

    proptest! {
        #[test]
        fn reshape_round_trip(seed in any::<u64>(), r in 1usize..4, bh in 1usize..4, bw in 1usize..4, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [2, c, bh * r, bw * r];
            let t = rand_tensor(&mut rng, &shape);
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = sccm_reshape(&mut g, x, r).unwrap();
            let z = sccm_unreshape(&mut g, y, shape, r).unwrap();
            prop_assert_eq!(g.value(z), &t);
        }
    }

    fn sccm_out(store: &ParamStore, sc: &Sccm, x: &Tensor) -> (Graph, SccmVars) {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let v = ctx.graph.constant(x.clone());
        let out = sc.forward_detailed(&mut ctx, v).unwrap();
        (ctx.graph, out)
    }

    #[test]
    fn single_token_spatial_attention_is_identity_on_g() {
        let mut store = ParamStore::new(1);
        let sc = Sccm::new(&mut store, "loc1.sccm", 3, 1).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[1, 3, 1, 1]);
        let (g, v) = sccm_out(&store, &sc, &x);
        assert_eq!(g.value(v.m_s).data(), &[1.0]);
        // A_s equals X_g = X' W_g + b_g
        let w = store.get("loc1.sccm.g.weight").unwrap();
        let b = store.get("loc1.sccm.g.bias").unwrap();
        for j in 0..3 {
            let xg: f64 = (0..3).map(|i| x.data()[i] * w.get(&[i, j])).sum::<f64>() + b.data()[j];
            assert!((g.value(v.a_s).data()[j] - xg).abs() < 1e-14);
        }
    }

    #[test]
    fn mixing_weights_sum_to_one() {
        for alpha in [-40.0, -3.0, 0.0, 0.7, 12.0, 40.0] {
            let mut store = ParamStore::new(3);
            let sc = Sccm::new(&mut store, "s", 2, 1).unwrap();
            store.set("s.alpha", Tensor::new(&[1], vec![alpha]).unwrap()).unwrap();
            let (g, v) = sccm_out(&store, &sc, &Tensor::full(&[1, 2, 2, 2], 0.3));
            let (s, c) = (g.value(v.s).data()[0], g.value(v.c).data()[0]);
            assert_eq!(s + c, 1.0, "alpha {alpha}");
            assert!(s > 0.0 && s <= 1.0);
        }
    }

    #[test]
    fn saturated_alpha_keeps_spatial_path_only() {
        let mut store = ParamStore::new(4);
        let sc = Sccm::new(&mut store, "s", 4, 2).unwrap();
        store.set("s.alpha", Tensor::new(&[1], vec![40.0]).unwrap()).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[1, 4, 4, 4]);
        let (mut g, v) = sccm_out(&store, &sc, &x);
        let w = g.constant(store.get("s.k_s.weight").unwrap().clone());
        let b = g.constant(store.get("s.k_s.bias").unwrap().clone());
        let ks = g.conv2d(v.a_s, w, Some(b), crate::tensor::ConvSpec::default()).unwrap();
        let xv = g.constant(x);
        let expect = g.add(xv, ks).unwrap();
        assert!(g.value(v.out).max_abs_diff(g.value(expect)) < 1e-9);
    }

    /// Dense matrix algebra straight from the definition.
    fn sccm_oracle(store: &ParamStore, x: &Tensor, r: usize) -> Tensor {
        let [_, c, h, w] = x.dims4();
        let (bh, bw, d) = (h / r, w / r, c * r * r);
        let t = bh * bw;
        let mut xr = vec![vec![0.0; d]; t];
        for bi in 0..bh {
            for bj in 0..bw {
                for ch in 0..c {
                    for di in 0..r {
                        for dj in 0..r {
                            xr[bi * bw + bj][ch * r * r + di * r + dj] = x.get(&[0, ch, bi * r + di, bj * r + dj]);
                        }
                    }
                }
            }
        }
        let lin = |name: &str| -> Vec<Vec<f64>> {
            let wt = store.get(&format!("s.{name}.weight")).unwrap();
            let b = store.get(&format!("s.{name}.bias")).unwrap();
            (0..t).map(|i| (0..d).map(|j| b.data()[j] + (0..d).map(|k| xr[i][k] * wt.get(&[k, j])).sum::<f64>()).collect()).collect()
        };
        let (xg, xt, xp) = (lin("g"), lin("theta"), lin("phi"));
        let softmax_rows = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.into_iter()
                .map(|row| {
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    row.iter().map(|v| v.exp() / z).collect()
                })
                .collect()
        };
        let ms = softmax_rows((0..t).map(|i| (0..t).map(|j| (0..d).map(|k| xt[i][k] * xp[j][k]).sum()).collect()).collect());
        let mc = softmax_rows((0..d).map(|i| (0..d).map(|j| (0..t).map(|k| xt[k][i] * xt[k][j]).sum()).collect()).collect());
        let a_s: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|j| (0..t).map(|k| ms[i][k] * xg[k][j]).sum()).collect()).collect();
        let a_c: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|j| (0..d).map(|k| xg[i][k] * mc[k][j]).sum()).collect()).collect();
        let back = |a: &Vec<Vec<f64>>, ch: usize, y: usize, xx: usize| a[(y / r) * bw + xx / r][ch * r * r + (y % r) * r + xx % r];
        let s = 1.0 / (1.0 + (-store.get("s.alpha").unwrap().data()[0]).exp());
        let conv1 = |name: &str, a: &Vec<Vec<f64>>, co: usize, y: usize, xx: usize| {
            let wt = store.get(&format!("s.{name}.weight")).unwrap();
            store.get(&format!("s.{name}.bias")).unwrap().data()[co]
                + (0..c).map(|ci| wt.get(&[co, ci, 0, 0]) * back(a, ci, y, xx)).sum::<f64>()
        };
        let mut out = Tensor::zeros(&[1, c, h, w]);
        for co in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.get(&[0, co, y, xx]) + s * conv1("k_s", &a_s, co, y, xx) + (1.0 - s) * conv1("k_c", &a_c, co, y, xx);
                    out.set(&[0, co, y, xx], v);
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_oracle() {
        for seed in 0..8 {
            let mut store = ParamStore::new(seed);
            let sc = Sccm::new(&mut store, "s", 4, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            store.set("s.alpha", Tensor::new(&[1], vec![rng.gen_range(-2.0..2.0)]).unwrap()).unwrap();
            for name in ["g", "theta", "phi"] {
                store.set(&format!("s.{name}.bias"), rand_tensor(&mut rng, &[16]).map(|v| v * 0.1)).unwrap();
            }
            let x = rand_tensor(&mut rng, &[1, 4, 4, 4]).map(|v| v * 0.5);
            let (g, v) = sccm_out(&store, &sc, &x);
            assert!(g.value(v.out).max_abs_diff(&sccm_oracle(&store, &x, 2)) < 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new(6);
        let sc = Sccm::new(&mut store, "s", 3, 2).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[2, 3, 4, 6]);
        let (g, v) = sccm_out(&store, &sc, &x);
        for m in [v.m_s, v.m_c] {
            let last = *g.shape(m).last().unwrap();
            for row in g.value(m).data().chunks(last) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_output_convs_make_identity() {
        let mut store = ParamStore::new(8);
        let sc = Sccm::new(&mut store, "s", 3, 1).unwrap();
        store.set("s.k_s.weight", Tensor::zeros(&[3, 3, 1, 1])).unwrap();
        store.set("s.k_c.weight", Tensor::zeros(&[3, 3, 1, 1])).unwrap();
        let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[1, 3, 3, 3]);
        let (g, v) = sccm_out(&store, &sc, &x);
        assert_eq!(g.value(v.out), &x);
    }

    #[test]
    fn head_examples() {
        let mut store = ParamStore::new(10);
        let head = MaskHead::new(&mut store, "loc1", 4).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let z = ctx.graph.constant(Tensor::zeros(&[1, 4, 3, 3]));
        let m = head.forward(&mut ctx, z).unwrap();
        assert!(ctx.graph.value(m).data().iter().all(|v| *v == 0.5));
        let r = ctx.graph.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(11), &[2, 4, 5, 5]));
        let m = head.forward(&mut ctx, r).unwrap();
        assert_eq!(ctx.graph.shape(m), &[2, 1, 5, 5]);
        assert!(ctx.graph.value(m).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    fn pyramid(rng: &mut ChaCha8Rng, channels: [usize; 4], size: usize, n: usize) -> Vec<Tensor> {
        (0..4).map(|i| rand_tensor(rng, &[n, channels[i], size >> (i + 1), size >> (i + 1)])).collect()
    }

    #[test]
    fn zero_prior_weights_decouple_scales() {
        let channels = [4, 6, 8, 10];
        let mut store = ParamStore::new(12);
        let loc = Localizer::new(&mut store, channels, [2, 2, 2, 1]).unwrap();
        for k in 2..=4 {
            store.set(&format!("loc{k}.prior.weight"), Tensor::zeros(&[channels[4 - k], 1, 1, 1])).unwrap();
        }
        let feats = pyramid(&mut ChaCha8Rng::seed_from_u64(13), channels, 32, 1);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let vars: Vec<Var> = feats.iter().map(|t| ctx.graph.constant(t.clone())).collect();
        let set = loc.forward(&mut ctx, &vars).unwrap();
        for (k, module) in loc.modules.iter().enumerate() {
            let f = module.sccm.forward(&mut ctx, vars[3 - k]).unwrap();
            let alone = module.head.forward(&mut ctx, f).unwrap();
            assert_eq!(ctx.graph.value(alone), ctx.graph.value(set.masks[k]));
        }
    }

    #[test]
    fn mask_shapes_follow_scales() {
        let channels = [16, 32, 64, 128];
        let mut store = ParamStore::new(14);
        let loc = Localizer::new(&mut store, channels, [2, 2, 2, 1]).unwrap();
        let feats = pyramid(&mut ChaCha8Rng::seed_from_u64(15), channels, 64, 1);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let vars: Vec<Var> = feats.iter().map(|t| ctx.graph.constant(t.clone())).collect();
        let set = loc.forward(&mut ctx, &vars).unwrap();
        let shapes: Vec<&[usize]> = set.masks.iter().map(|m| ctx.graph.shape(*m)).collect();
        assert_eq!(shapes, vec![&[1, 1, 4, 4][..], &[1, 1, 8, 8], &[1, 1, 16, 16], &[1, 1, 32, 32]]);
        assert!(loc.forward(&mut ctx, &vars[..3]).is_err());
    }

    #[test]
    fn every_module_receives_gradient() {
        let channels = [2, 3, 4, 5];
        let mut store = ParamStore::new(16);
        let loc = Localizer::new(&mut store, channels, [2, 2, 2, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let feats = pyramid(&mut rng, channels, 32, 2);
        let gts: Vec<Tensor> = (0..4)
            .map(|k| {
                let s = 32 >> (4 - k);
                Tensor::new(&[2, 1, s, s], (0..2 * s * s).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap()
            })
            .collect();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let vars: Vec<Var> = feats.iter().map(|t| ctx.graph.constant(t.clone())).collect();
        let set = loc.forward(&mut ctx, &vars).unwrap();
        let gv: Vec<Var> = gts.iter().map(|t| ctx.graph.constant(t.clone())).collect();
        let l = total_loss(&mut ctx.graph, &set, &[gv[0], gv[1], gv[2], gv[3]]).unwrap();
        let grads = ctx.graph.backward(l).unwrap().params();
        assert_eq!(grads.len(), store.trainable_names().len());
        for k in 1..=4 {
            let total: f64 = grads.iter().filter(|(n, _)| n.starts_with(&format!("loc{k}."))).map(|(_, g)| g.max_abs()).sum();
            assert!(total > 0.0, "loc{k} has no gradient");
        }

        let build = |s: &ParamStore| -> (Graph, Var) {
            let mut ctx = Ctx::new(s, Mode::Train);
            let vars: Vec<Var> = feats.iter().map(|t| ctx.graph.constant(t.clone())).collect();
            let set = loc.forward(&mut ctx, &vars).unwrap();
            let gv: Vec<Var> = gts.iter().map(|t| ctx.graph.constant(t.clone())).collect();
            let l = total_loss(&mut ctx.graph, &set, &[gv[0], gv[1], gv[2], gv[3]]).unwrap();
            (ctx.graph, l)
        };
        let report = finite_diff_check(|s| { let (g, l) = build(s); g.value(l).data()[0] }, &store, &grads, 1e-5, 1e-4, 1e-6);
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn bce_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let gt = Tensor::new(&[1, 1, 3, 3], (0..9).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
        let mut g = Graph::new();
        let half = g.constant(Tensor::full(&[1, 1, 3, 3], 0.5));
        let gv = g.constant(gt.clone());
        let l = bce_loss(&mut g, half, gv).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let exact = g.constant(gt.clone());
        let l = bce_loss(&mut g, exact, gv).unwrap();
        assert!(g.value(l).data()[0] <= -(1.0f64 - 1e-7).ln() + 1e-18);

        let p = Tensor::new(&[1, 1, 3, 3], (0..9).map(|_| rng.gen_range(0.001..0.999)).collect()).unwrap();
        let pv = g.constant(p.clone());
        let l = bce_loss(&mut g, pv, gv).unwrap();
        let oracle: f64 = p.data().iter().zip(gt.data()).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 9.0;
        assert!((g.value(l).data()[0] - oracle).abs() < 1e-12);

        let wrong = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(bce_loss(&mut g, wrong, gv), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let sizes = [4, 8, 16, 32];
        let masks: Vec<Var> = sizes.iter().map(|&s| g.constant(Tensor::full(&[1, 1, s, s], 0.5))).collect();
        let gts: Vec<Var> = sizes.iter().map(|&s| g.constant(Tensor::zeros(&[1, 1, s, s]))).collect();
        let set = MaskSet { masks: [masks[0], masks[1], masks[2], masks[3]] };
        let gts = [gts[0], gts[1], gts[2], gts[3]];
        let l = total_loss(&mut g, &set, &gts).unwrap();
        assert!((g.value(l).data()[0] - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut g = Graph::new();
        let masks: Vec<Var> = sizes.iter().map(|&s| {
            let t = Tensor::new(&[1, 1, s, s], (0..s * s).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap();
            g.constant(t)
        }).collect();
        let gts: Vec<Var> = sizes.iter().map(|&s| {
            let t = Tensor::new(&[1, 1, s, s], (0..s * s).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
            g.constant(t)
        }).collect();
        let set = MaskSet { masks: [masks[0], masks[1], masks[2], masks[3]] };
        let l = total_loss(&mut g, &set, &[gts[0], gts[1], gts[2], gts[3]]).unwrap();
        let parts: Vec<f64> = (0..4).map(|i| {
            let v = bce_loss(&mut g, masks[i], gts[i]).unwrap();
            g.value(v).data()[0]
        }).collect();
        assert_eq!(g.value(l).data()[0], ((parts[0] + parts[1]) + parts[2]) + parts[3]);
    }

    #[test]
    fn nearest_downsample_keeps_binary_labels() {
        let mask: Vec<f64> = (0..64).map(|i| if (i % 8) >= 4 && i / 8 < 2 { 1.0 } else { 0.0 }).collect();
        let d = downsample_nearest(&mask, 8, 8, 4, 4);
        // samples rows/cols 1, 3, 5, 7
        let mut expect = vec![0.0; 16];
        expect[2] = 1.0;
        expect[3] = 1.0;
        assert_eq!(d, expect);
        assert!(d.iter().all(|v| *v == 0.0 || *v == 1.0));
        let pyr = ground_truth_pyramid(&mask, 8, 8, [(1, 1), (2, 2), (4, 4), (8, 8)]);
        assert_eq!(pyr[3].data(), &mask[..]);
    }
}
