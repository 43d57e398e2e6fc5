//! Composite blocks of the network.
//!
//! Each block owns [`ParamId`]s into a shared [`ParamStore`] and runs its
//! forward pass against any [`Graph`]. Convolutions inside blocks carry no
//! bias and are followed by batch norm.
//!
//! | block   | computation                                                        |
//! |---------|--------------------------------------------------------------------|
//! | SE      | `x * sigmoid(fc2(relu(fc1(gap(x)))))`, hidden width `ceil(C/3)`     |
//! | SE-LN   | `x * sigmoid(layer_norm(gap(x)))`                                  |
//! | ME      | `bn(pw(maxpool(x)))`, `C -> 2C`, halves H and W                    |
//! | EVE     | `bn(pw(concat(maxpool(x), minpool(x))))`, halves H and W           |
//! | FCT     | `bn(pw(concat(dw4x4s2(x), maxpool(x), minpool(x))))`, 3-channel in |
//! | DFSEBV2 | `x + sep(gate(hswish(sep(x))))`, `sep = bn(pw(bn(dw3x3(.))))`      |

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{BnBuffers, Eager, Graph};
use crate::error::{Error, Result};
use crate::ops::norm::{BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::ops::{ConvGeom, PoolCfg, PoolMode};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Reduction ratio of the fully-connected SE gate.
pub const SE_RATIO: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Se,
    SeLn,
    Me,
    Eve,
    Fct,
    Dfsebv2,
}

/// Which channel gate a DFSEBV2 block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    Se,
    Ln,
}

impl GateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::Se => "se",
            GateKind::Ln => "ln",
        }
    }
}

impl std::str::FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(GateKind::Se),
            "ln" => Ok(GateKind::Ln),
            other => Err(Error::Config(format!(
                "unknown gate `{other}` (expected se or ln)"
            ))),
        }
    }
}

/// Registers parameters with default initialization: weights uniform on
/// `±1/sqrt(fan_in)`, norm scales one, shifts zero, running variance one.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        self.store
    }

    fn uniform(&mut self, shape: Shape, fan_in: usize) -> Tensor<f32> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..shape.numel()).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_vec(shape, data).expect("sized by shape")
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
    ) -> Result<ConvUnit> {
        if geom.groups == 0
            || !c_in.is_multiple_of(geom.groups)
            || !c_out.is_multiple_of(geom.groups)
        {
            return Err(Error::Config(format!(
                "{name}: channels {c_in}->{c_out} not divisible by groups {}",
                geom.groups
            )));
        }
        let shape = Shape::new(c_out, c_in / geom.groups, k, k);
        let w = self.uniform(shape, c_in / geom.groups * k * k);
        let weight = self.store.add_trainable(format!("{name}.weight"), w);
        Ok(ConvUnit { weight, geom })
    }

    pub fn pointwise(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<ConvUnit> {
        self.conv(name, c_in, c_out, 1, ConvGeom::pointwise())
    }

    pub fn depthwise(
        &mut self,
        name: &str,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvUnit> {
        self.conv(name, c, c, k, ConvGeom::new(stride, pad, c))
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BnUnit {
        let s = Shape::vector(c);
        BnUnit {
            gamma: self
                .store
                .add_trainable(format!("{name}.gamma"), Tensor::full(s, 1.0)),
            beta: self
                .store
                .add_trainable(format!("{name}.beta"), Tensor::zeros(s)),
            buffers: BnBuffers {
                mean: self
                    .store
                    .add_buffer(format!("{name}.running_mean"), Tensor::zeros(s)),
                var: self
                    .store
                    .add_buffer(format!("{name}.running_var"), Tensor::full(s, 1.0)),
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> LnUnit {
        let s = Shape::vector(c);
        LnUnit {
            gamma: self
                .store
                .add_trainable(format!("{name}.gamma"), Tensor::full(s, 1.0)),
            beta: self
                .store
                .add_trainable(format!("{name}.beta"), Tensor::zeros(s)),
            eps: LN_EPS,
        }
    }

    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize, bias: bool) -> LinearUnit {
        let w = self.uniform(Shape::new(c_out, c_in, 1, 1), c_in);
        let weight = self.store.add_trainable(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = self.uniform(Shape::vector(c_out), c_in);
            self.store.add_trainable(format!("{name}.bias"), b)
        });
        LinearUnit { weight, bias }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub geom: ConvGeom,
}

impl ConvUnit {
    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = g.param(self.weight);
        g.conv2d(x, &w, self.geom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffers: BnBuffers,
}

impl BnUnit {
    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(x, &gamma, &beta, self.buffers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearUnit {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearUnit {
    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, &w, b.as_ref())
    }
}

/// Conv followed by batch norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBn {
    pub conv: ConvUnit,
    pub bn: BnUnit,
}

impl ConvBn {
    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let y = self.conv.forward(g, x)?;
        self.bn.forward(g, &y)
    }
}

fn check_channels<T: Scalar, G: Graph<T>>(
    g: &G,
    x: &G::Var,
    c: usize,
    block: &str,
) -> Result<Shape> {
    let s = g.value(x).shape();
    if s.c() != c {
        return Err(Error::Config(format!(
            "{block} expects {c} channels, input is {s}"
        )));
    }
    Ok(s)
}

fn check_even<T: Scalar, G: Graph<T>>(g: &G, x: &G::Var, block: &str) -> Result<()> {
    let s = g.value(x).shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::Shape(format!(
            "{block} needs even, non-zero H and W, input is {s}"
        )));
    }
    Ok(())
}

/// Classic squeeze-and-excitation gate with bias-free fully-connected layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: LinearUnit,
    pub fc2: LinearUnit,
}

impl SeBlock {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, channels: usize) -> Self {
        let hidden = channels.div_ceil(SE_RATIO);
        let block = SeBlock {
            channels,
            hidden,
            fc1: b.linear(&format!("{name}.fc1"), channels, hidden, false),
            fc2: b.linear(&format!("{name}.fc2"), hidden, channels, false),
        };
        assert_eq!(block.param_count(b.store()), Self::expected_count(channels));
        block
    }

    /// `2 * C * ceil(C / 3)`.
    pub fn expected_count(c: usize) -> usize {
        2 * c * c.div_ceil(SE_RATIO)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.fc1.weight, self.fc2.weight]
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        count(store, &self.param_ids())
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g, x, self.channels, "SE block")?;
        let s = g.global_avg_pool(x)?;
        let h = self.fc1.forward(g, &s)?;
        let h = g.relu(&h);
        let e = self.fc2.forward(g, &h)?;
        let gate = g.sigmoid(&e);
        g.scale_channels(x, &gate)
    }
}

/// Squeeze-and-excitation with the two fully-connected layers replaced by a
/// layer norm over the squeezed channel vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeLnBlock {
    pub channels: usize,
    pub norm: LnUnit,
}

impl SeLnBlock {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, channels: usize) -> Self {
        let block = SeLnBlock {
            channels,
            norm: b.layer_norm(&format!("{name}.ln"), channels),
        };
        assert_eq!(block.param_count(b.store()), Self::expected_count(channels));
        block
    }

    pub fn expected_count(c: usize) -> usize {
        2 * c
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.norm.gamma, self.norm.beta]
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        count(store, &self.param_ids())
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g, x, self.channels, "SE-LN block")?;
        let s = g.global_avg_pool(x)?;
        let (gamma, beta) = (g.param(self.norm.gamma), g.param(self.norm.beta));
        let n = g.layer_norm(&s, &gamma, &beta, self.norm.eps)?;
        let gate = g.sigmoid(&n);
        g.scale_channels(x, &gate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Se(SeBlock),
    Ln(SeLnBlock),
}

impl Gate {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        channels: usize,
        kind: GateKind,
    ) -> Self {
        match kind {
            GateKind::Se => Gate::Se(SeBlock::new(b, name, channels)),
            GateKind::Ln => Gate::Ln(SeLnBlock::new(b, name, channels)),
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            Gate::Se(_) => GateKind::Se,
            Gate::Ln(_) => GateKind::Ln,
        }
    }

    pub fn expected_count(c: usize, kind: GateKind) -> usize {
        match kind {
            GateKind::Se => SeBlock::expected_count(c),
            GateKind::Ln => SeLnBlock::expected_count(c),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Gate::Se(s) => s.param_ids(),
            Gate::Ln(l) => l.param_ids(),
        }
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match self {
            Gate::Se(s) => s.forward(g, x),
            Gate::Ln(l) => l.forward(g, x),
        }
    }
}

/// Max-pool downsampler followed by a channel-widening projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub proj: ConvBn,
}

impl MeBlock {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        if c_out != 2 * c_in {
            return Err(Error::Config(format!(
                "ME block doubles channels: {c_in} -> {c_out}"
            )));
        }
        let block = MeBlock {
            c_in,
            c_out,
            proj: ConvBn {
                conv: b.pointwise(&format!("{name}.pw"), c_in, c_out)?,
                bn: b.batch_norm(&format!("{name}.bn"), c_out),
            },
        };
        assert_eq!(
            block.param_count(b.store()),
            Self::expected_count(c_in, c_out)
        );
        Ok(block)
    }

    pub fn expected_count(c_in: usize, c_out: usize) -> usize {
        c_in * c_out + 2 * c_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        conv_bn_ids(&self.proj)
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        count(store, &self.param_ids())
    }

    pub fn output_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n(), self.c_out, x.h() / 2, x.w() / 2)
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g, x, self.c_in, "ME block")?;
        check_even(g, x, "ME block")?;
        let p = g.pool2d(x, PoolCfg::halving(PoolMode::Max))?;
        self.proj.forward(g, &p)
    }
}

/// Downsampler keeping both the max and the min of every 2x2 window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EveBlock {
    pub c_in: usize,
    pub c_out: usize,
    pub proj: ConvBn,
}

impl EveBlock {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let block = EveBlock {
            c_in,
            c_out,
            proj: ConvBn {
                conv: b.pointwise(&format!("{name}.pw"), 2 * c_in, c_out)?,
                bn: b.batch_norm(&format!("{name}.bn"), c_out),
            },
        };
        assert_eq!(
            block.param_count(b.store()),
            Self::expected_count(c_in, c_out)
        );
        Ok(block)
    }

    pub fn expected_count(c_in: usize, c_out: usize) -> usize {
        2 * c_in * c_out + 2 * c_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        conv_bn_ids(&self.proj)
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        count(store, &self.param_ids())
    }

    pub fn output_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n(), self.c_out, x.h() / 2, x.w() / 2)
    }

    /// The `2 * C_in`-channel tensor fed to the projection: window maxima in
    /// the first half of the channels, window minima in the second.
    pub fn extremes<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g, x, self.c_in, "EVE block")?;
        check_even(g, x, "EVE block")?;
        let hi = g.pool2d(x, PoolCfg::halving(PoolMode::Max))?;
        let lo = g.pool2d(x, PoolCfg::halving(PoolMode::Min))?;
        g.concat_channels(&hi, &lo)
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let e = self.extremes(g, x)?;
        self.proj.forward(g, &e)
    }
}

/// Input block: a stride-2 4x4 depthwise conv of the image alongside its
/// max- and min-pooled copies, projected to `c_out` channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FctBlock {
    pub c_out: usize,
    pub dw: ConvUnit,
    pub proj: ConvBn,
}

impl FctBlock {
    pub const C_IN: usize = 3;
    /// Depthwise (3) + max (3) + min (3).
    pub const CONCAT_WIDTH: usize = 9;

    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, c_out: usize) -> Result<Self> {
        let block = FctBlock {
            c_out,
            dw: b.depthwise(&format!("{name}.dw"), Self::C_IN, 4, 2, 1)?,
            proj: ConvBn {
                conv: b.pointwise(&format!("{name}.pw"), Self::CONCAT_WIDTH, c_out)?,
                bn: b.batch_norm(&format!("{name}.bn"), c_out),
            },
        };
        assert_eq!(block.param_count(b.store()), Self::expected_count(c_out));
        Ok(block)
    }

    pub fn expected_count(c_out: usize) -> usize {
        16 * Self::C_IN + Self::CONCAT_WIDTH * c_out + 2 * c_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.dw.weight];
        v.extend(conv_bn_ids(&self.proj));
        v
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        count(store, &self.param_ids())
    }

    pub fn output_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n(), self.c_out, x.h() / 2, x.w() / 2)
    }

    /// The three branches before concatenation: depthwise, max, min.
    pub fn branches<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<[G::Var; 3]> {
        check_channels(g, x, Self::C_IN, "FCT block (input only)")?;
        check_even(g, x, "FCT block")?;
        let d = self.dw.forward(g, x)?;
        let hi = g.pool2d(x, PoolCfg::halving(PoolMode::Max))?;
        let lo = g.pool2d(x, PoolCfg::halving(PoolMode::Min))?;
        Ok([d, hi, lo])
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let [d, hi, lo] = self.branches(g, x)?;
        let e = g.concat_channels(&hi, &lo)?;
        let cat = g.concat_channels(&d, &e)?;
        self.proj.forward(g, &cat)
    }
}

/// Depthwise 3x3 + BN, then pointwise + BN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparableUnit {
    pub dw: ConvBn,
    pub pw: ConvBn,
}

impl SeparableUnit {
    fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, c: usize) -> Result<Self> {
        Ok(SeparableUnit {
            dw: ConvBn {
                conv: b.depthwise(&format!("{name}.dw"), c, 3, 1, 1)?,
                bn: b.batch_norm(&format!("{name}.dw_bn"), c),
            },
            pw: ConvBn {
                conv: b.pointwise(&format!("{name}.pw"), c, c)?,
                bn: b.batch_norm(&format!("{name}.pw_bn"), c),
            },
        })
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = conv_bn_ids(&self.dw);
        v.extend(conv_bn_ids(&self.pw));
        v
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let y = self.dw.forward(g, x)?;
        self.pw.forward(g, &y)
    }
}

/// Channel- and resolution-preserving residual unit with one channel gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dfsebv2Block {
    pub channels: usize,
    pub first: SeparableUnit,
    pub gate: Gate,
    pub second: SeparableUnit,
}

impl Dfsebv2Block {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        channels: usize,
        gate: GateKind,
    ) -> Result<Self> {
        let first = SeparableUnit::new(b, &format!("{name}.sep1"), channels)?;
        let gate = Gate::new(b, &format!("{name}.gate"), channels, gate);
        let second = SeparableUnit::new(b, &format!("{name}.sep2"), channels)?;
        let block = Dfsebv2Block {
            channels,
            first,
            gate,
            second,
        };
        assert_eq!(
            block.param_count(b.store()),
            Self::expected_count(channels, gate.kind())
        );
        Ok(block)
    }

    /// `2C^2 + 2*9C + 4*2C` plus the gate.
    pub fn expected_count(c: usize, gate: GateKind) -> usize {
        2 * c * c + 2 * 9 * c + 4 * 2 * c + Gate::expected_count(c, gate)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.first.param_ids();
        v.extend(self.gate.param_ids());
        v.extend(self.second.param_ids());
        v
    }

    pub fn param_count(&self, store: &ParamStore<f32>) -> usize {
        count(store, &self.param_ids())
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        check_channels(g, x, self.channels, "DFSEBV2 block")?;
        let u = self.first.forward(g, x)?;
        let u = g.hard_swish(&u);
        let u = self.gate.forward(g, &u)?;
        let v = self.second.forward(g, &u)?;
        g.add(x, &v)
    }
}

/// Any block, for callers that want to treat them uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block {
    Se(SeBlock),
    SeLn(SeLnBlock),
    Me(MeBlock),
    Eve(EveBlock),
    Fct(FctBlock),
    Dfsebv2(Dfsebv2Block),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Se(_) => BlockKind::Se,
            Block::SeLn(_) => BlockKind::SeLn,
            Block::Me(_) => BlockKind::Me,
            Block::Eve(_) => BlockKind::Eve,
            Block::Fct(_) => BlockKind::Fct,
            Block::Dfsebv2(_) => BlockKind::Dfsebv2,
        }
    }

    pub fn c_in(&self) -> usize {
        match self {
            Block::Se(b) => b.channels,
            Block::SeLn(b) => b.channels,
            Block::Me(b) => b.c_in,
            Block::Eve(b) => b.c_in,
            Block::Fct(_) => FctBlock::C_IN,
            Block::Dfsebv2(b) => b.channels,
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            Block::Se(b) => b.channels,
            Block::SeLn(b) => b.channels,
            Block::Me(b) => b.c_out,
            Block::Eve(b) => b.c_out,
            Block::Fct(b) => b.c_out,
            Block::Dfsebv2(b) => b.channels,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Block::Se(b) => b.param_ids(),
            Block::SeLn(b) => b.param_ids(),
            Block::Me(b) => b.param_ids(),
            Block::Eve(b) => b.param_ids(),
            Block::Fct(b) => b.param_ids(),
            Block::Dfsebv2(b) => b.param_ids(),
        }
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match self {
            Block::Se(b) => b.forward(g, x),
            Block::SeLn(b) => b.forward(g, x),
            Block::Me(b) => b.forward(g, x),
            Block::Eve(b) => b.forward(g, x),
            Block::Fct(b) => b.forward(g, x),
            Block::Dfsebv2(b) => b.forward(g, x),
        }
    }

    /// Inference-mode forward of a single tensor.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager::infer(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, &xv)?;
        Ok(g.value(&y).clone())
    }
}

fn conv_bn_ids(u: &ConvBn) -> Vec<ParamId> {
    vec![u.conv.weight, u.bn.gamma, u.bn.beta]
}

/// Trainable elements behind `ids`; buffers never appear in these lists.
fn count(store: &ParamStore<f32>, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.get(id).len()).sum()
}
