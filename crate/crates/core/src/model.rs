//! The assembled network: layer specs, construction, parameter accounting,
//! shape tracing, forward passes and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, Graph};
use crate::blocks::{
    ConvBn, Dfsebv2Block, EveBlock, FctBlock, GateKind, LinearUnit, MeBlock, ParamBuilder,
};
use crate::error::{Error, Result};
use crate::ops::{ConvGeom, Mode};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_DROPOUT: f64 = 0.2;

/// One row of the layer table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Fct {
        out: usize,
    },
    Dfsebv2 {
        c: usize,
        gate: GateKind,
    },
    Eve {
        out: usize,
    },
    Me {
        out: usize,
    },
    /// Depthwise `k x k`, stride 1, same padding, followed by batch norm.
    DwConv {
        c: usize,
        k: usize,
    },
    HardSwish,
    AvgPool,
    Dropout {
        p: f64,
    },
    Fc {
        out: usize,
    },
}

impl LayerSpec {
    /// Operator name as printed in shape traces.
    pub fn operator(&self) -> &'static str {
        match self {
            LayerSpec::Fct { .. } => "FCT",
            LayerSpec::Dfsebv2 { .. } => "DFSEBV2",
            LayerSpec::Eve { .. } => "EVE",
            LayerSpec::Me { .. } => "ME",
            LayerSpec::DwConv { .. } => "Depthwise Conv",
            LayerSpec::HardSwish => "Hard Swish",
            LayerSpec::AvgPool => "Average pooling",
            LayerSpec::Dropout { .. } => "Dropout",
            LayerSpec::Fc { .. } => "FC",
        }
    }

    fn halves(&self) -> bool {
        matches!(
            self,
            LayerSpec::Fct { .. } | LayerSpec::Eve { .. } | LayerSpec::Me { .. }
        )
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Fct { out } => write!(f, "fct out={out}"),
            LayerSpec::Dfsebv2 { c, gate } => write!(f, "dfsebv2 c={c} gate={}", gate.as_str()),
            LayerSpec::Eve { out } => write!(f, "eve out={out}"),
            LayerSpec::Me { out } => write!(f, "me out={out}"),
            LayerSpec::DwConv { c, k } => write!(f, "dwconv c={c} k={k}"),
            LayerSpec::HardSwish => write!(f, "hswish"),
            LayerSpec::AvgPool => write!(f, "avgpool"),
            LayerSpec::Dropout { p } => write!(f, "dropout p={p}"),
            LayerSpec::Fc { out } => write!(f, "fc out={out}"),
        }
    }
}

/// An ordered layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// The 15-row reference network.
    pub fn exquisitenet_v2(gate: GateKind, num_classes: usize) -> Self {
        use LayerSpec::*;
        ModelSpec {
            layers: vec![
                Fct { out: 12 },
                Dfsebv2 { c: 12, gate },
                Eve { out: 48 },
                Dfsebv2 { c: 48, gate },
                Me { out: 96 },
                Dfsebv2 { c: 96, gate },
                Me { out: 192 },
                Dfsebv2 { c: 192, gate },
                Me { out: 384 },
                Dfsebv2 { c: 384, gate },
                DwConv { c: 384, k: 3 },
                HardSwish,
                AvgPool,
                Dropout { p: DEFAULT_DROPOUT },
                Fc { out: num_classes },
            ],
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Dropout { p: q } = l {
                *q = p;
            }
        }
        self
    }

    /// The gate shared by every DFSEBV2 row, or `None` when rows disagree
    /// or there are none.
    pub fn variant(&self) -> Option<GateKind> {
        let mut gates = self.layers.iter().filter_map(|l| match l {
            LayerSpec::Dfsebv2 { gate, .. } => Some(*gate),
            _ => None,
        });
        let first = gates.next()?;
        gates.all(|g| g == first).then_some(first)
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Fc { out } => Some(*out),
            _ => None,
        })
    }

    pub fn dropout_rate(&self) -> f64 {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Dropout { p } => Some(*p),
                _ => None,
            })
            .unwrap_or(0.0)
    }

    /// Number of resolution-halving rows; inputs must be divisible by
    /// `2^downsamplings`.
    pub fn downsamplings(&self) -> u32 {
        self.layers.iter().filter(|l| l.halves()).count() as u32
    }

    /// Checks the channel chain and layer ordering. Rows are numbered from 1.
    pub fn validate(&self) -> Result<()> {
        let err = |row: usize, message: String| Error::Spec {
            row: row + 1,
            message,
        };
        if self.layers.is_empty() {
            return Err(Error::Spec {
                row: 0,
                message: "empty layer list".into(),
            });
        }
        let mut c = FctBlock::C_IN;
        let mut pooled = false;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let zero = |n: usize, what: &str| {
                if n == 0 {
                    Err(err(i, format!("{what} must be positive")))
                } else {
                    Ok(())
                }
            };
            if pooled
                && !matches!(
                    layer,
                    LayerSpec::Dropout { .. } | LayerSpec::Fc { .. } | LayerSpec::HardSwish
                )
            {
                return Err(err(i, format!("{} after global pooling", layer.operator())));
            }
            match *layer {
                LayerSpec::Fct { out } => {
                    zero(out, "out")?;
                    if c != FctBlock::C_IN {
                        return Err(err(i, format!("FCT needs 3 input channels, gets {c}")));
                    }
                    c = out;
                }
                LayerSpec::Dfsebv2 { c: bc, .. } | LayerSpec::DwConv { c: bc, .. } => {
                    zero(bc, "c")?;
                    if bc != c {
                        return Err(err(
                            i,
                            format!("{} declares {bc} channels, input has {c}", layer.operator()),
                        ));
                    }
                    if let LayerSpec::DwConv { k, .. } = *layer {
                        if k == 0 || k % 2 == 0 {
                            return Err(err(i, format!("depthwise kernel {k} must be odd")));
                        }
                    }
                }
                LayerSpec::Eve { out } => {
                    zero(out, "out")?;
                    c = out;
                }
                LayerSpec::Me { out } => {
                    if out != 2 * c {
                        return Err(err(
                            i,
                            format!("ME doubles channels, {c} -> {out} requested"),
                        ));
                    }
                    c = out;
                }
                LayerSpec::HardSwish => {}
                LayerSpec::AvgPool => pooled = true,
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(err(i, format!("dropout rate {p} outside [0, 1)")));
                    }
                }
                LayerSpec::Fc { out } => {
                    zero(out, "out")?;
                    if i != last {
                        return Err(err(i, "FC must be the last row".into()));
                    }
                    if !pooled {
                        return Err(err(i, "FC needs a preceding average pooling row".into()));
                    }
                }
            }
        }
        if !matches!(self.layers[last], LayerSpec::Fc { .. }) {
            return Err(err(last, "last row must be FC".into()));
        }
        Ok(())
    }

    /// Parses the line format, one layer per line:
    /// `fct out=12`, `dfsebv2 c=48 gate=ln`, `eve out=48`, `me out=96`,
    /// `dwconv c=384 k=3`, `hswish`, `avgpool`, `dropout p=0.2`,
    /// `fc out=1000`. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            layers.push(parse_line(line).map_err(|message| Error::SpecParse {
                line: i + 1,
                message,
            })?);
        }
        Ok(ModelSpec { layers })
    }

    pub fn to_text(&self) -> String {
        self.layers.iter().map(|l| format!("{l}\n")).collect()
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn parse_line(line: &str) -> std::result::Result<LayerSpec, String> {
    let mut words = line.split_whitespace();
    let kind = words.next().unwrap_or_default().to_ascii_lowercase();
    let mut kv = Vec::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{w}`"))?;
        if kv.iter().any(|(seen, _)| *seen == k) {
            return Err(format!("duplicate key `{k}`"));
        }
        kv.push((k, v));
    }
    let allowed: &[&str] = match kind.as_str() {
        "fct" | "eve" | "me" | "fc" => &["out"],
        "dfsebv2" => &["c", "gate"],
        "dwconv" => &["c", "k"],
        "dropout" => &["p"],
        "hswish" | "avgpool" => &[],
        other => return Err(format!("unknown layer `{other}`")),
    };
    if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(format!("unknown key `{k}` for `{kind}`"));
    }
    let get = |key: &str| kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let uint = |key: &str| -> std::result::Result<usize, String> {
        let v = get(key).ok_or_else(|| format!("`{kind}` needs `{key}=`"))?;
        v.parse()
            .map_err(|_| format!("`{key}={v}` is not a non-negative integer"))
    };
    Ok(match kind.as_str() {
        "fct" => LayerSpec::Fct { out: uint("out")? },
        "eve" => LayerSpec::Eve { out: uint("out")? },
        "me" => LayerSpec::Me { out: uint("out")? },
        "fc" => LayerSpec::Fc { out: uint("out")? },
        "dfsebv2" => LayerSpec::Dfsebv2 {
            c: uint("c")?,
            gate: get("gate")
                .ok_or("`dfsebv2` needs `gate=`")?
                .parse()
                .map_err(|e: Error| e.to_string())?,
        },
        "dwconv" => LayerSpec::DwConv {
            c: uint("c")?,
            k: get("k").map_or(Ok(3), |_| uint("k"))?,
        },
        "dropout" => LayerSpec::Dropout {
            p: get("p").map_or(Ok(DEFAULT_DROPOUT), |v| {
                v.parse().map_err(|_| format!("`p={v}` is not a number"))
            })?,
        },
        "hswish" => LayerSpec::HardSwish,
        _ => LayerSpec::AvgPool,
    })
}

/// A built layer; parameters live in the owning [`Model`]'s store.
#[derive(Debug, Clone, Copy, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Fct(FctBlock),
    Dfsebv2(Dfsebv2Block),
    Eve(EveBlock),
    Me(MeBlock),
    DwConv(ConvBn),
    HardSwish,
    AvgPool,
    Dropout(f64),
    Fc(LinearUnit),
}

impl Layer {
    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match self {
            Layer::Fct(b) => b.forward(g, x),
            Layer::Dfsebv2(b) => b.forward(g, x),
            Layer::Eve(b) => b.forward(g, x),
            Layer::Me(b) => b.forward(g, x),
            Layer::DwConv(u) => u.forward(g, x),
            Layer::HardSwish => Ok(g.hard_swish(x)),
            Layer::AvgPool => g.global_avg_pool(x),
            Layer::Dropout(p) => g.dropout(x, *p),
            Layer::Fc(u) => u.forward(g, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    /// 1-based row number.
    pub row: usize,
    pub operator: &'static str,
    pub trainable: usize,
    /// Batch-norm running statistics, reported apart from the total.
    pub buffers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
    pub trainable: usize,
    pub buffers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeTraceRow {
    pub input: Shape,
    pub operator: &'static str,
    /// `None` for the classifier row, which the layer table prints as `-`.
    pub out_channels: Option<usize>,
    pub output: Shape,
}

/// `224^2 x 3` style rendering of an `(N, C, H, W)` shape.
pub fn format_extent(s: Shape) -> String {
    if s.h() == s.w() {
        format!("{}^2 x {}", s.h(), s.c())
    } else {
        format!("{}x{} x {}", s.h(), s.w(), s.c())
    }
}

impl fmt::Display for ShapeTraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let out = self.out_channels.map_or("-".to_string(), |c| c.to_string());
        write!(
            f,
            "{}\t{}\t{}",
            format_extent(self.input),
            self.operator,
            out
        )
    }
}

/// Computes every row's input and output shape without running anything.
pub fn shape_trace(spec: &ModelSpec, input: Shape) -> Result<Vec<ShapeTraceRow>> {
    spec.validate()?;
    check_input_shape(spec, input)?;
    let mut rows = Vec::with_capacity(spec.layers.len());
    let mut cur = input;
    for layer in &spec.layers {
        let (out, channels) = match *layer {
            LayerSpec::Fct { out } | LayerSpec::Eve { out } | LayerSpec::Me { out } => (
                Shape::new(cur.n(), out, cur.h() / 2, cur.w() / 2),
                Some(out),
            ),
            LayerSpec::AvgPool => (Shape::new(cur.n(), cur.c(), 1, 1), Some(cur.c())),
            LayerSpec::Fc { out } => (Shape::new(cur.n(), out, 1, 1), None),
            _ => (cur, Some(cur.c())),
        };
        rows.push(ShapeTraceRow {
            input: cur,
            operator: layer.operator(),
            out_channels: channels,
            output: out,
        });
        cur = out;
    }
    Ok(rows)
}

fn check_input_shape(spec: &ModelSpec, s: Shape) -> Result<()> {
    let m = 1usize << spec.downsamplings();
    if s.c() != FctBlock::C_IN
        || s.n() == 0
        || s.h() == 0
        || s.w() == 0
        || !s.h().is_multiple_of(m)
        || !s.w().is_multiple_of(m)
    {
        return Err(Error::Shape(format!(
            "input {s} must have 3 channels, N >= 1 and H, W positive multiples of {m}"
        )));
    }
    Ok(())
}

/// A built network: layers plus the store holding their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    /// Parameter ids of each layer, trainable and buffers, in store order.
    owned: Vec<Vec<ParamId>>,
    store: ParamStore<f32>,
    seed: u64,
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut owned = Vec::with_capacity(spec.layers.len());
        let mut c = FctBlock::C_IN;
        for (i, ls) in spec.layers.iter().enumerate() {
            let name = format!("l{:02}", i + 1);
            let before = store.len();
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let layer = match *ls {
                LayerSpec::Fct { out } => {
                    Layer::Fct(FctBlock::new(&mut b, &format!("{name}.fct"), out)?)
                }
                LayerSpec::Dfsebv2 { c: ch, gate } => Layer::Dfsebv2(Dfsebv2Block::new(
                    &mut b,
                    &format!("{name}.dfsebv2"),
                    ch,
                    gate,
                )?),
                LayerSpec::Eve { out } => {
                    Layer::Eve(EveBlock::new(&mut b, &format!("{name}.eve"), c, out)?)
                }
                LayerSpec::Me { out } => {
                    Layer::Me(MeBlock::new(&mut b, &format!("{name}.me"), c, out)?)
                }
                LayerSpec::DwConv { c: ch, k } => Layer::DwConv(ConvBn {
                    conv: b.conv(
                        &format!("{name}.dw"),
                        ch,
                        ch,
                        k,
                        ConvGeom::new(1, k / 2, ch),
                    )?,
                    bn: b.batch_norm(&format!("{name}.bn"), ch),
                }),
                LayerSpec::HardSwish => Layer::HardSwish,
                LayerSpec::AvgPool => Layer::AvgPool,
                LayerSpec::Dropout { p } => Layer::Dropout(p),
                LayerSpec::Fc { out } => Layer::Fc(b.linear(&format!("{name}.fc"), c, out, true)),
            };
            match *ls {
                LayerSpec::Fct { out } | LayerSpec::Eve { out } | LayerSpec::Me { out } => c = out,
                _ => {}
            }
            layers.push(layer);
            owned.push(store.ids().skip(before).collect());
        }
        Ok(Model {
            spec,
            layers,
            owned,
            store,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes().expect("validated spec ends in FC")
    }

    /// Parameter ids owned by row `i` (0-based), buffers included.
    pub fn layer_params(&self, i: usize) -> &[ParamId] {
        &self.owned[i]
    }

    pub fn param_count(&self) -> ParamCount {
        let layers: Vec<LayerCount> = self
            .owned
            .iter()
            .zip(&self.spec.layers)
            .enumerate()
            .map(|(i, (ids, ls))| {
                let (mut trainable, mut buffers) = (0, 0);
                for &id in ids {
                    let e = self.store.entry(id);
                    if e.trainable {
                        trainable += e.value.len();
                    } else {
                        buffers += e.value.len();
                    }
                }
                LayerCount {
                    row: i + 1,
                    operator: ls.operator(),
                    trainable,
                    buffers,
                }
            })
            .collect();
        ParamCount {
            trainable: layers.iter().map(|l| l.trainable).sum(),
            buffers: layers.iter().map(|l| l.buffers).sum(),
            layers,
        }
    }

    pub fn shape_trace(&self, input: Shape) -> Result<Vec<ShapeTraceRow>> {
        shape_trace(&self.spec, input)
    }

    pub fn check_input(&self, batch: Shape) -> Result<()> {
        check_input_shape(&self.spec, batch)
    }

    /// Runs every layer on `x` through `g`. Works at any precision as long
    /// as `g` reads a store laid out like this model's.
    pub fn forward_graph<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        self.check_input(g.value(x).shape())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(g, &h)?;
        }
        Ok(h)
    }

    /// Inference-mode logits `(N, classes, 1, 1)`.
    pub fn infer(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Eager::new(&self.store, Mode::Infer, self.seed);
        let x = g.input(batch.clone());
        let y = self.forward_graph(&mut g, &x)?;
        Ok(g.value(&y).clone())
    }

    /// [`Model::infer`] with the batch split into `shards` contiguous parts
    /// evaluated concurrently. Results equal the unsharded call bitwise,
    /// since inference treats samples independently.
    pub fn infer_sharded(&self, batch: &Tensor<f32>, shards: usize) -> Result<Tensor<f32>> {
        let n = batch.shape().n();
        let shards = shards.clamp(1, n.max(1));
        if shards == 1 {
            return self.infer(batch);
        }
        let bounds: Vec<_> = (0..=shards).map(|i| i * n / shards).collect();
        let parts = par::map_range(shards, |i| {
            batch
                .slice_batch(bounds[i]..bounds[i + 1])
                .and_then(|b| self.infer(&b))
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&parts)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = checkpoint::encode(&self.spec, &self.store);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Replaces this model's parameters with a checkpoint's. Nothing is
    /// changed unless every tensor matches by name and shape.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let ck = load_weights(path)?;
        if ck.num_classes as usize != self.num_classes() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} classes, model {}",
                ck.num_classes,
                self.num_classes()
            )));
        }
        let mut incoming = self.store.clone();
        let mismatch = |index: usize, found: String| {
            let e = self.store.entries().get(index);
            Error::TensorMismatch {
                index,
                expected: e.map_or("<missing>".into(), |e| {
                    format!("{} {}", e.name, e.value.shape())
                }),
                found,
            }
        };
        if ck.tensors.len() != self.store.len() {
            let i = ck.tensors.len().min(self.store.len());
            let found = ck
                .tensors
                .get(i)
                .map_or("<missing>".into(), |(n, t)| format!("{n} {}", t.shape()));
            return Err(mismatch(i, found));
        }
        for (i, (id, (name, t))) in self.store.ids().zip(ck.tensors).enumerate() {
            let e = self.store.entry(id);
            if e.name != name || e.value.shape() != t.shape() {
                return Err(mismatch(i, format!("{name} {}", t.shape())));
            }
            *incoming.get_mut(id) = t;
        }
        self.store = incoming;
        Ok(())
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: u32,
    pub num_classes: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint::decode(&bytes)
}

/// Binary checkpoint layout, all integers `u32` little-endian:
/// magic `XQN2`, version, variant tag, class count, tensor count, then per
/// tensor its name length, UTF-8 name, four dims and `f32` LE data.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: [u8; 4] = *b"XQN2";
    pub const VERSION: u32 = 1;

    /// 1 = SE gates, 2 = SE-LN gates, 0 = mixed or none.
    pub fn variant_tag(spec: &ModelSpec) -> u32 {
        match spec.variant() {
            Some(GateKind::Se) => 1,
            Some(GateKind::Ln) => 2,
            None => 0,
        }
    }

    pub fn encode(spec: &ModelSpec, store: &ParamStore<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(&MAGIC);
        put(&mut out, VERSION);
        put(&mut out, variant_tag(spec));
        put(&mut out, spec.num_classes().unwrap_or(0) as u32);
        put(&mut out, store.len() as u32);
        for e in store.entries() {
            put(&mut out, e.name.len() as u32);
            out.extend_from_slice(e.name.as_bytes());
            for d in e.value.shape().dims() {
                put(&mut out, d as u32);
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let rest = self.buf.len() - self.pos;
            if rest < n {
                return Err(Error::Truncated {
                    offset: self.pos,
                    needed: n - rest,
                });
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(
                self.take(4)?.try_into().expect("4 bytes"),
            ))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let variant = r.u32()?;
        let num_classes = r.u32()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("tensor #{i} name is not UTF-8")))?
                .to_string();
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor #{i} `{name}` is implausibly large"))
                })?;
            let data = r
                .take(numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after {count} tensors",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            variant,
            num_classes,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_has_fifteen_rows_and_validates() {
        let s = ModelSpec::exquisitenet_v2(GateKind::Ln, 1000);
        assert_eq!(s.layers.len(), 15);
        s.validate().unwrap();
        assert_eq!(s.variant(), Some(GateKind::Ln));
        assert_eq!(s.num_classes(), Some(1000));
        assert_eq!(s.dropout_rate(), DEFAULT_DROPOUT);
        assert_eq!(s.downsamplings(), 5);
    }

    #[test]
    fn text_round_trip() {
        let s = ModelSpec::exquisitenet_v2(GateKind::Se, 10).with_dropout(0.3);
        assert_eq!(ModelSpec::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn parser_reports_line_numbers() {
        let text = "fct out=12\n\n# comment\ndfsebv2 c=12 gate=ln colour=red\n";
        match ModelSpec::parse(text) {
            Err(Error::SpecParse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ModelSpec::parse("conv out=3"),
            Err(Error::SpecParse { line: 1, .. })
        ));
        assert!(matches!(
            ModelSpec::parse("fc out=ten"),
            Err(Error::SpecParse { line: 1, .. })
        ));
        assert!(matches!(
            ModelSpec::parse("dfsebv2 c=4 gate=xx"),
            Err(Error::SpecParse { .. })
        ));
    }

    #[test]
    fn invalid_chains_name_the_row() {
        let mut s = ModelSpec::exquisitenet_v2(GateKind::Ln, 10);
        s.layers.insert(0, LayerSpec::Eve { out: 48 });
        match Model::build(s, 0) {
            Err(Error::Spec { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("FCT"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut s = ModelSpec::exquisitenet_v2(GateKind::Ln, 10);
        s.layers[3] = LayerSpec::Dfsebv2 {
            c: 47,
            gate: GateKind::Ln,
        };
        assert!(matches!(s.validate(), Err(Error::Spec { row: 4, .. })));
        let mut s = ModelSpec::exquisitenet_v2(GateKind::Ln, 10);
        s.layers.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_headers() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Fct { out: 2 },
                LayerSpec::AvgPool,
                LayerSpec::Fc { out: 2 },
            ],
        };
        let m = Model::build(spec, 1).unwrap();
        let bytes = checkpoint::encode(m.spec(), m.store());
        let decoded = checkpoint::decode(&bytes).unwrap();
        assert_eq!(decoded.tensors.len(), m.store().len());

        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(
            checkpoint::decode(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            checkpoint::decode(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(
                matches!(
                    checkpoint::decode(&bytes[..cut]),
                    Err(Error::Truncated { .. })
                ),
                "{cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            checkpoint::decode(&long),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn format_extent_matches_table_notation() {
        assert_eq!(format_extent(Shape::new(1, 3, 224, 224)), "224^2 x 3");
        assert_eq!(format_extent(Shape::new(1, 3, 64, 32)), "64x32 x 3");
    }
}
