//! Small layer vocabulary shared by the network modules.

use crate::error::Result;
use crate::tensor::{BatchStats, ConvSpec, Graph, ParamInit, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the graph being recorded, read-only parameters, and the
/// batch-norm statistics observed in training mode.
pub struct Ctx<'s> {
    pub graph: Graph,
    pub store: &'s ParamStore,
    pub mode: Mode,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self { graph: Graph::new(), store, mode, bn_updates: Vec::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.graph.param(self.store, name)
    }
}

/// Folds observed batch statistics into the running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (prefix, stats) in updates {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let t = store.get_mut(&name).ok_or_else(|| crate::Error::Contract(format!("missing buffer {name}")))?;
            for (r, f) in t.data_mut().iter_mut().zip(fresh.iter()) {
                *r = (1.0 - momentum) * *r + momentum * f;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        store.declare(&format!("{name}.weight"), &[cout, cin, k, k], ParamInit::FanIn(cin * k * k))?;
        store.declare(&format!("{name}.bias"), &[cout], ParamInit::Constant(0.0))?;
        Ok(Self { name: name.to_string(), cin, cout, k, spec })
    }

    /// Stride-1 convolution that preserves spatial size.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::new(store, name, cin, cout, k, ConvSpec::same(k, 1))
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward_with(ctx, x, self.spec)
    }

    pub fn forward_with(&self, ctx: &mut Ctx, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&self.bias_name())?;
        ctx.graph.conv2d(x, w, Some(b), spec)
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        store.declare(&format!("{name}.gamma"), &[channels], ParamInit::Constant(1.0))?;
        store.declare(&format!("{name}.beta"), &[channels], ParamInit::Constant(0.0))?;
        store.declare_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        store.declare_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        Ok(Self { name: name.to_string(), channels })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm(x, gamma, beta, None, BN_EPS)?;
                ctx.bn_updates.push((self.name.clone(), stats.expect("training mode yields stats")));
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let rm = store.get(&format!("{}.running_mean", self.name)).expect("declared");
                let rv = store.get(&format!("{}.running_var", self.name)).expect("declared");
                let (y, _) = ctx.graph.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())), BN_EPS)?;
                Ok(y)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Affine map over the last extent: `x (.. x in) -> (.. x out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        store.declare(&format!("{name}.weight"), &[inp, out], ParamInit::FanIn(inp))?;
        store.declare(&format!("{name}.bias"), &[out], ParamInit::Constant(0.0))?;
        Ok(Self { name: name.to_string(), inp, out })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = ctx.graph.reshape(x, &[rows, self.inp])?;
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let y = ctx.graph.matmul(flat, w)?;
        // bias broadcast over rows via a gather of the bias vector
        let b = ctx.param(&format!("{}.bias", self.name))?;
        let idx = (0..rows).flat_map(|_| 0..self.out).collect();
        let bias = ctx.graph.gather(b, idx, &[rows, self.out])?;
        let y = ctx.graph.add(y, bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out;
        ctx.graph.reshape(y, &out_shape)
    }

    pub fn num_params(&self) -> usize {
        self.inp * self.out + self.out
    }
}

/// conv -> BN -> ReLU
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Result<Self> {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, k, spec)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.relu(y))
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}
