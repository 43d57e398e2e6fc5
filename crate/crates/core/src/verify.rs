//! Gradient verification of every operator and of a full DFSEBV2 block,
//! the extreme-value retention check of the EVE downsampler, and direct-loop
//! references for the convolution and pooling kernels.
//!
//! Each probe stores its inputs as trainable entries so the checker perturbs
//! them along with any weights, and reduces the operator output to a scalar
//! with fixed, non-uniform weights. Inputs keep clear of non-differentiable
//! points: hard-swish and ReLU inputs stay away from their kinks, pooling
//! windows hold values at least 0.05 apart.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{
    check_probe, GradCheckCfg, GradCheckReport, Precision, Probe, F32_FLOOR,
};
use crate::autodiff::{BnBuffers, Eager, Graph};
use crate::blocks::{Dfsebv2Block, EveBlock, GateKind, ParamBuilder};
use crate::error::Result;
use crate::ops::norm::{BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::ops::{conv2d, pool2d, ConvGeom, Mode, PoolCfg, PoolMode};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Tolerance for single operators checked against an `f64` tape.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance for the composite block checked against an `f32` tape.
pub const BLOCK_TOLERANCE: f64 = 1e-2;
/// Tolerance of the optimized kernels against the direct loops.
pub const KERNEL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum ProbeOp {
    Conv(ConvGeom),
    Pool(PoolCfg),
    GlobalAvgPool,
    BatchNorm(BnBuffers),
    LayerNorm,
    HardSwish,
    Sigmoid,
    Relu,
    Linear,
    Dropout(f64),
    ScaleChannels,
    Add,
    Concat,
    CrossEntropy(Vec<usize>),
    Dfsebv2(Dfsebv2Block),
}

/// One operator applied to stored inputs, reduced to a scalar.
#[derive(Debug, Clone)]
pub struct OpProbe {
    pub name: String,
    store: ParamStore<f32>,
    ids: Vec<ParamId>,
    op: ProbeOp,
    mode: Mode,
}

/// Fixed reduction weights in `[-1, 1]`, distinct across neighbouring
/// elements so no symmetry hides a wrong gradient.
fn reduction_weights<T: Scalar>(shape: Shape) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|i| T::from_f64_lossy(((i * 7919 + 3) % 23) as f64 / 11.0 - 1.0))
        .collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

impl Probe for OpProbe {
    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn loss<T: Scalar, G: Graph<T>>(&self, g: &mut G) -> Result<G::Var> {
        let v: Vec<G::Var> = self.ids.iter().map(|&id| g.param(id)).collect();
        let out = match &self.op {
            ProbeOp::Conv(geom) => g.conv2d(&v[0], &v[1], *geom)?,
            ProbeOp::Pool(cfg) => g.pool2d(&v[0], *cfg)?,
            ProbeOp::GlobalAvgPool => g.global_avg_pool(&v[0])?,
            ProbeOp::BatchNorm(b) => g.batch_norm(&v[0], &v[1], &v[2], *b)?,
            ProbeOp::LayerNorm => g.layer_norm(&v[0], &v[1], &v[2], LN_EPS)?,
            ProbeOp::HardSwish => g.hard_swish(&v[0]),
            ProbeOp::Sigmoid => g.sigmoid(&v[0]),
            ProbeOp::Relu => g.relu(&v[0]),
            ProbeOp::Linear => g.linear(&v[0], &v[1], Some(&v[2]))?,
            ProbeOp::Dropout(p) => g.dropout(&v[0], *p)?,
            ProbeOp::ScaleChannels => g.scale_channels(&v[0], &v[1])?,
            ProbeOp::Add => g.add(&v[0], &v[1])?,
            ProbeOp::Concat => g.concat_channels(&v[0], &v[1])?,
            ProbeOp::CrossEntropy(labels) => return g.softmax_cross_entropy(&v[0], labels),
            ProbeOp::Dfsebv2(block) => block.forward(g, &v[0])?,
        };
        let w = reduction_weights::<T>(g.value(&out).shape());
        g.weighted_sum(&out, &w)
    }
}

struct Inputs {
    rng: ChaCha8Rng,
    store: ParamStore<f32>,
    ids: Vec<ParamId>,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Inputs {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
            ids: Vec::new(),
        }
    }

    fn add(&mut self, t: Tensor<f32>) -> &mut Self {
        let name = format!("in{}", self.ids.len());
        self.ids.push(self.store.add_trainable(name, t));
        self
    }

    fn uniform(&mut self, shape: Shape, lo: f32, hi: f32) -> &mut Self {
        let data = (0..shape.numel())
            .map(|_| self.rng.random_range(lo..hi))
            .collect();
        self.add(Tensor::from_vec(shape, data).expect("sized by shape"))
    }

    /// Uniform on `[-range, range]` minus `gap`-wide bands around `kinks`.
    fn avoiding(&mut self, shape: Shape, range: f32, kinks: &[f32], gap: f32) -> &mut Self {
        let data = (0..shape.numel())
            .map(|_| loop {
                let v = self.rng.random_range(-range..range);
                if kinks.iter().all(|k| (v - k).abs() > gap) {
                    break v;
                }
            })
            .collect();
        self.add(Tensor::from_vec(shape, data).expect("sized by shape"))
    }

    /// Distinct values on a 0.05 grid in random order: no two elements of
    /// any window tie, even after a finite-difference nudge.
    fn tie_free(&mut self, shape: Shape) -> &mut Self {
        let n = shape.numel();
        let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
        data.shuffle(&mut self.rng);
        self.add(Tensor::from_vec(shape, data).expect("sized by shape"))
    }

    fn finish(self, name: &str, op: ProbeOp, mode: Mode) -> OpProbe {
        OpProbe {
            name: name.into(),
            store: self.store,
            ids: self.ids,
            op,
            mode,
        }
    }
}

fn bn_probe(name: &str, mode: Mode, seed: u64) -> OpProbe {
    let s = Shape::new(4, 3, 3, 3);
    let mut inp = Inputs::new(seed);
    inp.uniform(s, -2.0, 2.0)
        .uniform(Shape::vector(3), 0.5, 1.5)
        .uniform(Shape::vector(3), -0.5, 0.5);
    let mean = inp
        .store
        .add_buffer("running_mean", Tensor::full(Shape::vector(3), 0.1));
    let var = inp
        .store
        .add_buffer("running_var", Tensor::full(Shape::vector(3), 1.5));
    let b = BnBuffers {
        mean,
        var,
        eps: BN_EPS,
        momentum: BN_MOMENTUM,
    };
    inp.finish(name, ProbeOp::BatchNorm(b), mode)
}

fn dfsebv2_probe(gate: GateKind, seed: u64) -> Result<OpProbe> {
    let mut inp = Inputs::new(seed);
    inp.uniform(Shape::new(2, 6, 4, 4), -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let block = Dfsebv2Block::new(
        &mut ParamBuilder::new(&mut inp.store, &mut rng),
        "blk",
        6,
        gate,
    )?;
    Ok(inp.finish(
        &format!("dfsebv2_{}", gate.as_str()),
        ProbeOp::Dfsebv2(block),
        Mode::Train,
    ))
}

/// Every single-operator probe.
pub fn op_probes(seed: u64) -> Vec<OpProbe> {
    let mut probes = Vec::new();
    let mut next = 0u64;
    let mut inputs = || {
        next += 1;
        Inputs::new(seed.wrapping_add(next))
    };

    let conv = |inp: &mut Inputs, c_in: usize, c_out: usize, k: usize, groups: usize| {
        inp.uniform(Shape::new(2, c_in, 5, 5), -1.0, 1.0).uniform(
            Shape::new(c_out, c_in / groups, k, k),
            -1.0,
            1.0,
        );
    };
    let mut i = inputs();
    conv(&mut i, 4, 6, 3, 1);
    probes.push(i.finish(
        "conv3x3_s2",
        ProbeOp::Conv(ConvGeom::new(2, 1, 1)),
        Mode::Train,
    ));
    let mut i = inputs();
    conv(&mut i, 4, 4, 3, 4);
    probes.push(i.finish(
        "conv_depthwise",
        ProbeOp::Conv(ConvGeom::new(1, 1, 4)),
        Mode::Train,
    ));
    let mut i = inputs();
    conv(&mut i, 3, 3, 4, 3);
    probes.push(i.finish(
        "conv_depthwise4x4_s2",
        ProbeOp::Conv(ConvGeom::new(2, 1, 3)),
        Mode::Train,
    ));
    let mut i = inputs();
    conv(&mut i, 4, 5, 1, 1);
    probes.push(i.finish(
        "conv_pointwise",
        ProbeOp::Conv(ConvGeom::pointwise()),
        Mode::Train,
    ));

    for (name, mode) in [
        ("maxpool", PoolMode::Max),
        ("minpool", PoolMode::Min),
        ("avgpool", PoolMode::Avg),
    ] {
        let mut i = inputs();
        i.tie_free(Shape::new(2, 3, 4, 6));
        probes.push(i.finish(name, ProbeOp::Pool(PoolCfg::halving(mode)), Mode::Train));
    }
    let mut i = inputs();
    i.uniform(Shape::new(2, 3, 3, 4), -1.0, 1.0);
    probes.push(i.finish("global_avg_pool", ProbeOp::GlobalAvgPool, Mode::Train));

    probes.push(bn_probe(
        "batch_norm_train",
        Mode::Train,
        seed.wrapping_add(100),
    ));
    probes.push(bn_probe(
        "batch_norm_infer",
        Mode::Infer,
        seed.wrapping_add(101),
    ));

    let mut i = inputs();
    i.uniform(Shape::new(3, 5, 1, 1), -2.0, 2.0)
        .uniform(Shape::vector(5), 0.5, 1.5)
        .uniform(Shape::vector(5), -0.5, 0.5);
    probes.push(i.finish("layer_norm", ProbeOp::LayerNorm, Mode::Train));

    let mut i = inputs();
    i.avoiding(Shape::new(2, 3, 4, 4), 5.0, &[-3.0, 3.0], 0.1);
    probes.push(i.finish("hard_swish", ProbeOp::HardSwish, Mode::Train));
    let mut i = inputs();
    i.uniform(Shape::new(2, 3, 4, 4), -6.0, 6.0);
    probes.push(i.finish("sigmoid", ProbeOp::Sigmoid, Mode::Train));
    let mut i = inputs();
    i.avoiding(Shape::new(2, 3, 4, 4), 2.0, &[0.0], 0.05);
    probes.push(i.finish("relu", ProbeOp::Relu, Mode::Train));

    let mut i = inputs();
    i.uniform(Shape::new(3, 6, 1, 1), -1.0, 1.0)
        .uniform(Shape::new(4, 6, 1, 1), -1.0, 1.0)
        .uniform(Shape::vector(4), -1.0, 1.0);
    probes.push(i.finish("linear", ProbeOp::Linear, Mode::Train));

    let mut i = inputs();
    i.uniform(Shape::new(2, 4, 3, 3), -1.0, 1.0);
    probes.push(i.finish("dropout", ProbeOp::Dropout(0.3), Mode::Train));

    let mut i = inputs();
    i.uniform(Shape::new(2, 4, 3, 3), -1.0, 1.0)
        .uniform(Shape::new(2, 4, 1, 1), 0.1, 0.9);
    probes.push(i.finish("scale_channels", ProbeOp::ScaleChannels, Mode::Train));

    let mut i = inputs();
    i.uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0)
        .uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0);
    probes.push(i.finish("add", ProbeOp::Add, Mode::Train));

    let mut i = inputs();
    i.uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0)
        .uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0);
    probes.push(i.finish("concat_channels", ProbeOp::Concat, Mode::Train));

    let mut i = inputs();
    i.uniform(Shape::new(4, 5, 1, 1), -3.0, 3.0);
    probes.push(i.finish(
        "softmax_cross_entropy",
        ProbeOp::CrossEntropy(vec![0, 4, 2, 2]),
        Mode::Train,
    ));

    probes
}

/// The composite block in both gate variants.
pub fn block_probes(seed: u64) -> Result<Vec<OpProbe>> {
    Ok(vec![
        dfsebv2_probe(GateKind::Se, seed)?,
        dfsebv2_probe(GateKind::Ln, seed.wrapping_add(1))?,
    ])
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.tolerance
    }
}

/// Checker settings for a tape at `precision`: the `f32` floor replaces
/// the configured one when it is smaller.
pub fn cfg_for(cfg: &GradCheckCfg, precision: Precision) -> GradCheckCfg {
    match precision {
        Precision::F64 => *cfg,
        Precision::F32 => GradCheckCfg {
            floor: cfg.floor.max(F32_FLOOR),
            ..*cfg
        },
    }
}

/// Runs every probe: operators with an `f64` tape at [`OP_TOLERANCE`], the
/// composite block with an `f32` tape at [`BLOCK_TOLERANCE`].
pub fn run_suite(cfg: &GradCheckCfg) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut run = |p: &OpProbe, precision: Precision, tolerance: f64| -> Result<()> {
        out.push(CheckResult {
            name: p.name.clone(),
            precision,
            tolerance,
            report: check_probe(p, precision, &cfg_for(cfg, precision))?,
        });
        Ok(())
    };
    for p in op_probes(cfg.seed) {
        run(&p, Precision::F64, OP_TOLERANCE)?;
    }
    for p in block_probes(cfg.seed)? {
        run(&p, Precision::F32, BLOCK_TOLERANCE)?;
    }
    Ok(out)
}

/// Outcome of [`eve_retention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RetentionReport {
    pub inputs: usize,
    pub windows: usize,
    /// Pre-projection values not found in their source window.
    pub non_members: usize,
    /// Windows whose retained pair is not exactly `{max, min}`.
    pub wrong_pairs: usize,
}

/// Feeds `trials` random inputs through an EVE block and checks every
/// pre-projection value against its 2x2 source window.
pub fn eve_retention(trials: usize, seed: u64) -> Result<RetentionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = RetentionReport::default();
    for t in 0..trials {
        let c = rng.random_range(1..=6);
        let h = 2 * rng.random_range(1..=6);
        let w = 2 * rng.random_range(1..=6);
        let n = rng.random_range(1..=3);
        let shape = Shape::new(n, c, h, w);
        let data: Vec<f32> = (0..shape.numel())
            .map(|_| {
                // Occasional small-integer values force ties.
                if rng.random_bool(0.2) {
                    rng.random_range(-2..=2) as f32
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let x = Tensor::from_vec(shape, data)?;

        let mut store = ParamStore::new();
        let mut brng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let eve = EveBlock::new(
            &mut ParamBuilder::new(&mut store, &mut brng),
            "eve",
            c,
            2 * c,
        )?;
        let mut g = Eager::infer(&store);
        let xv = g.input(x.clone());
        let ev = eve.extremes(&mut g, &xv)?;
        let e = g.value(&ev);

        report.inputs += 1;
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let window = [
                            x.at(b, ch, 2 * oy, 2 * ox),
                            x.at(b, ch, 2 * oy, 2 * ox + 1),
                            x.at(b, ch, 2 * oy + 1, 2 * ox),
                            x.at(b, ch, 2 * oy + 1, 2 * ox + 1),
                        ];
                        let hi = e.at(b, ch, oy, ox);
                        let lo = e.at(b, c + ch, oy, ox);
                        report.windows += 1;
                        report.non_members +=
                            [hi, lo].iter().filter(|v| !window.contains(v)).count();
                        let max = window.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let min = window.iter().copied().fold(f32::INFINITY, f32::min);
                        if hi != max || lo != min {
                            report.wrong_pairs += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Worst disagreement between an optimized kernel and its direct loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub configs: usize,
    pub max_rel_error: f64,
    /// Description of the configuration with the largest error.
    pub worst: String,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= KERNEL_TOLERANCE
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = describe();
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Result<Tensor<f32>> {
    let data = (0..shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Grouped cross-correlation by direct summation in `f64`. Besides the
/// output, returns each element's sum of absolute products, the natural
/// scale for judging rounding error.
pub fn naive_conv2d(x: &Tensor<f32>, w: &Tensor<f32>, g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let [n, c_in, h, wd] = x.shape().dims();
    let [c_out, cg, kh, kw] = w.shape().dims();
    let oh = (h + 2 * g.pad - kh) / g.stride + 1;
    let ow = (wd + 2 * g.pad - kw) / g.stride + 1;
    let per_group = c_out / g.groups;
    debug_assert_eq!(cg * g.groups, c_in);
    let (mut out, mut mag) = (Vec::new(), Vec::new());
    for b in 0..n {
        for co in 0..c_out {
            let first = (co / per_group) * cg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut acc, mut abs) = (0.0f64, 0.0f64);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let p = f64::from(x.at(b, first + ci, iy as usize, ix as usize))
                                    * f64::from(w.at(co, ci, ky, kx));
                                acc += p;
                                abs += p.abs();
                            }
                        }
                    }
                    out.push(acc);
                    mag.push(abs);
                }
            }
        }
    }
    (out, mag)
}

/// Window max, min or mean by direct iteration.
pub fn naive_pool2d(x: &Tensor<f32>, cfg: PoolCfg) -> Vec<f64> {
    let [n, c, h, w] = x.shape().dims();
    let oh = (h - cfg.k) / cfg.stride + 1;
    let ow = (w - cfg.k) / cfg.stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let window = (0..cfg.k * cfg.k).map(|i| {
                        f64::from(x.at(
                            b,
                            ch,
                            oy * cfg.stride + i / cfg.k,
                            ox * cfg.stride + i % cfg.k,
                        ))
                    });
                    out.push(match cfg.mode {
                        PoolMode::Max => window.fold(f64::NEG_INFINITY, f64::max),
                        PoolMode::Min => window.fold(f64::INFINITY, f64::min),
                        PoolMode::Avg => window.sum::<f64>() / (cfg.k * cfg.k) as f64,
                    });
                }
            }
        }
    }
    out
}

/// Compares [`conv2d`] with [`naive_conv2d`] on `configs` random geometries
/// (dense, grouped and depthwise; kernels 1 to 4, strides 1 to 3, padding
/// up to 2). Errors are relative to the element's absolute-product sum.
pub fn conv_oracle(configs: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        configs,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for _ in 0..configs {
        let groups = [1, 1, 2, 3, 4][rng.random_range(0..5)];
        let cg = rng.random_range(1..=3);
        let c_out = groups * rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let geom = ConvGeom::new(
            rng.random_range(1..=3),
            rng.random_range(0..=k.min(2)),
            groups,
        );
        let xs = Shape::new(
            rng.random_range(1..=2),
            groups * cg,
            rng.random_range(k..=9),
            rng.random_range(k..=9),
        );
        let x = uniform_tensor(&mut rng, xs)?;
        let w = uniform_tensor(&mut rng, Shape::new(c_out, cg, k, k))?;
        let y = conv2d(&x, &w, None, geom)?;
        let (want, mag) = naive_conv2d(&x, &w, geom);
        for ((&a, &b), &m) in y.data().iter().zip(&want).zip(&mag) {
            let err = (f64::from(a) - b).abs() / b.abs().max(m).max(1e-3);
            report.record(err, || format!("x {xs}, w {}, {geom:?}", w.shape()));
        }
    }
    Ok(report)
}

/// Compares [`pool2d`] with [`naive_pool2d`] on `configs` random windows,
/// cycling through max, min and average.
pub fn pool_oracle(configs: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        configs,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for i in 0..configs {
        let mode = [PoolMode::Max, PoolMode::Min, PoolMode::Avg][i % 3];
        let k = rng.random_range(1..=3);
        let cfg = PoolCfg::new(k, rng.random_range(1..=3), mode);
        let xs = Shape::new(
            rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(k..=9),
            rng.random_range(k..=9),
        );
        let x = uniform_tensor(&mut rng, xs)?;
        let y = pool2d(&x, cfg)?.output;
        for (&a, &b) in y.data().iter().zip(&naive_pool2d(&x, cfg)) {
            let err = (f64::from(a) - b).abs() / b.abs().max(1.0);
            report.record(err, || format!("x {xs}, {cfg:?}"));
        }
    }
    Ok(report)
}
