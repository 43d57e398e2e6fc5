use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BnBuffers, Graph};
use crate::error::{Error, Result};
use crate::ops::{
    self, activation, conv, dropout, linear, loss, norm, pool, ConvGeom, Mode, PoolCfg,
};
use crate::params::{GradStore, ParamId, ParamStore, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a node computed, plus whatever its backward pass needs beyond the
/// input values.
#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv(ConvGeom),
    Pool {
        cfg: PoolCfg,
        source: Option<Vec<u32>>,
    },
    GlobalAvgPool,
    BatchNorm {
        buffers: BnBuffers,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        eps: f64,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    HardSwish,
    Sigmoid,
    Relu,
    Linear,
    Dropout {
        mask: Option<Tensor<T>>,
    },
    ScaleChannels,
    Add,
    Concat,
    Sum,
    WeightedSum(Tensor<T>),
    SoftmaxCe {
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
}

/// A recorded forward computation. Nodes are appended in evaluation order,
/// so index order is a topological order.
pub struct Tape<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    nodes: Vec<Node<T>>,
    updates: Vec<StatUpdate<T>>,
}

/// Result of [`Tape::backward`] beyond the parameter gradients: gradients
/// of input leaves and the order nodes were visited in.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    inputs: BTreeMap<NodeId, Tensor<T>>,
    visited: Vec<NodeId>,
}

impl<T> Gradients<T> {
    pub fn wrt(&self, input: NodeId) -> Option<&Tensor<T>> {
        self.inputs.get(&input)
    }

    pub fn visit_order(&self) -> &[NodeId] {
        &self.visited
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Tape {
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        node_value(&self.nodes, self.store, id)
    }

    /// Re-evaluates every node against `store` (which may hold perturbed
    /// parameters) and returns all node values. Train-mode batch norm uses
    /// fresh batch statistics without touching running buffers; dropout
    /// reuses the recorded masks.
    pub fn replay(&self, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inp = |k: usize| -> &Tensor<T> { &vals[node.inputs[k].0] };
            let v = match &node.op {
                Op::Input => node.value.clone().expect("input leaf value"),
                Op::Param(id) => store.get(*id).clone(),
                Op::Conv(g) => ops::conv2d(inp(0), inp(1), None, *g)?,
                Op::Pool { cfg, .. } => pool::pool2d(inp(0), *cfg)?.output,
                Op::GlobalAvgPool => pool::global_avg_pool(inp(0))?,
                Op::BatchNorm { buffers, .. } => {
                    norm::batch_norm(
                        inp(0),
                        inp(1),
                        inp(2),
                        store.get(buffers.mean),
                        store.get(buffers.var),
                        T::from_f64_lossy(buffers.eps),
                        self.mode,
                    )?
                    .output
                }
                Op::LayerNorm { eps, .. } => {
                    norm::layer_norm_channels(inp(0), inp(1), inp(2), T::from_f64_lossy(*eps))?
                        .output
                }
                Op::HardSwish => activation::hard_swish(inp(0)),
                Op::Sigmoid => activation::sigmoid(inp(0)),
                Op::Relu => activation::relu(inp(0)),
                Op::Linear => ops::linear(inp(0), inp(1), node.inputs.get(2).map(|b| &vals[b.0]))?,
                Op::Dropout { mask } => match mask {
                    Some(m) => activation::mul(inp(0), m)?,
                    None => inp(0).clone(),
                },
                Op::ScaleChannels => ops::scale_channels(inp(0), inp(1))?,
                Op::Add => Tensor::add(inp(0), inp(1))?,
                Op::Concat => Tensor::concat_channels(inp(0), inp(1))?,
                Op::Sum => Tensor::scalar(inp(0).sum()),
                Op::WeightedSum(w) => Tensor::scalar(weighted(inp(0), w)),
                Op::SoftmaxCe { labels, .. } => {
                    Tensor::scalar(loss::softmax_cross_entropy(inp(0), labels)?.loss)
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Values as recorded, for comparison with [`Tape::replay`].
    pub fn recorded_values(&self) -> Vec<Tensor<T>> {
        (0..self.nodes.len())
            .map(|i| self.val(NodeId(i)).clone())
            .collect()
    }

    /// Propagates `d loss / d node` from the scalar `loss` back through the
    /// tape, adding parameter gradients into `grads`. Nodes are visited in
    /// strictly decreasing index order, each at most once.
    pub fn backward(&self, loss: NodeId, grads: &mut GradStore<T>) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {}",
                loss.0,
                lv.shape()
            )));
        }
        if grads.len() != self.store.len() {
            return Err(Error::Contract(format!(
                "gradient store has {} entries, parameter store {}",
                grads.len(),
                self.store.len()
            )));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = Gradients {
            inputs: BTreeMap::new(),
            visited: Vec::new(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            out.visited.push(NodeId(idx));
            let node = &self.nodes[idx];
            let x = |k: usize| self.val(node.inputs[k]);
            let mut send = |k: usize, d: Tensor<T>| -> Result<()> {
                let slot = &mut pending[node.inputs[k].0];
                match slot {
                    Some(acc) => acc.add_assign(&d),
                    None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(NodeId(idx), g);
                }
                Op::Param(id) => grads.accumulate(*id, &g)?,
                Op::Conv(geom) => {
                    let (dx, dw, _) = conv::conv2d_backward(x(0), x(1), &g, *geom, false)?;
                    send(0, dx)?;
                    send(1, dw)?;
                }
                Op::Pool { cfg, source } => {
                    send(
                        0,
                        pool::pool2d_backward(x(0).shape(), &g, *cfg, source.as_deref())?,
                    )?;
                }
                Op::GlobalAvgPool => send(0, pool::global_avg_pool_backward(x(0).shape(), &g)?)?,
                Op::BatchNorm { xhat, inv_std, .. } => {
                    let (dx, dgamma, dbeta) =
                        norm::batch_norm_backward(&g, xhat, inv_std, x(1), self.mode)?;
                    send(0, dx)?;
                    send(1, dgamma)?;
                    send(2, dbeta)?;
                }
                Op::LayerNorm { xhat, inv_std, .. } => {
                    let (dx, dgamma, dbeta) = norm::layer_norm_backward(&g, xhat, inv_std, x(1))?;
                    send(0, dx)?;
                    send(1, dgamma)?;
                    send(2, dbeta)?;
                }
                Op::HardSwish => send(0, activation::hard_swish_backward(x(0), &g)?)?,
                Op::Sigmoid => {
                    let y = node.value.as_ref().expect("sigmoid output");
                    send(0, activation::sigmoid_backward(y, &g)?)?;
                }
                Op::Relu => send(0, activation::relu_backward(x(0), &g)?)?,
                Op::Linear => {
                    let with_bias = node.inputs.len() == 3;
                    let (dx, dw, db) = linear::linear_backward(x(0), x(1), &g, with_bias)?;
                    send(0, dx)?;
                    send(1, dw)?;
                    if let Some(db) = db {
                        send(2, db)?;
                    }
                }
                Op::Dropout { mask } => match mask {
                    Some(m) => send(0, activation::mul(&g, m)?)?,
                    None => send(0, g)?,
                },
                Op::ScaleChannels => {
                    let (dx, dgate) = ops::scale_channels_backward(x(0), x(1), &g)?;
                    send(0, dx)?;
                    send(1, dgate)?;
                }
                Op::Add => {
                    send(0, g.clone())?;
                    send(1, g)?;
                }
                Op::Concat => {
                    let ca = x(0).shape().c();
                    let cb = x(1).shape().c();
                    send(0, g.slice_channels(0..ca)?)?;
                    send(1, g.slice_channels(ca..ca + cb)?)?;
                }
                Op::Sum => send(0, Tensor::full(x(0).shape(), g.data()[0]))?,
                Op::WeightedSum(w) => {
                    let s = g.data()[0];
                    send(0, w.map(|v| v * s))?;
                }
                Op::SoftmaxCe { labels, probs } => {
                    send(
                        0,
                        loss::softmax_cross_entropy_backward(probs, labels, g.data()[0]),
                    )?;
                }
            }
        }
        Ok(out)
    }
}

fn node_value<'s, T: Scalar>(
    nodes: &'s [Node<T>],
    store: &'s ParamStore<T>,
    id: NodeId,
) -> &'s Tensor<T> {
    let node = &nodes[id.0];
    match (&node.value, &node.op) {
        (Some(v), _) => v,
        (None, Op::Param(p)) => store.get(*p),
        (None, _) => unreachable!("only parameter leaves omit their value"),
    }
}

fn weighted<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> T {
    x.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum()
}

impl<'a, T: Scalar> Graph<T> for Tape<'a, T> {
    type Var = NodeId;

    fn mode(&self) -> Mode {
        self.mode
    }

    fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, Vec::new(), t)
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: Vec::new(),
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn value<'v>(&'v self, v: &'v NodeId) -> &'v Tensor<T> {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, geom: ConvGeom) -> Result<NodeId> {
        let y = ops::conv2d(self.val(*x), self.val(*w), None, geom)?;
        Ok(self.push(Op::Conv(geom), vec![*x, *w], y))
    }

    fn pool2d(&mut self, x: &NodeId, cfg: PoolCfg) -> Result<NodeId> {
        let p = pool::pool2d(self.val(*x), cfg)?;
        Ok(self.push(
            Op::Pool {
                cfg,
                source: p.source,
            },
            vec![*x],
            p.output,
        ))
    }

    fn global_avg_pool(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = pool::global_avg_pool(self.val(*x))?;
        Ok(self.push(Op::GlobalAvgPool, vec![*x], y))
    }

    fn batch_norm(
        &mut self,
        x: &NodeId,
        gamma: &NodeId,
        beta: &NodeId,
        buffers: BnBuffers,
    ) -> Result<NodeId> {
        let out = norm::batch_norm(
            self.val(*x),
            self.val(*gamma),
            self.val(*beta),
            self.store.get(buffers.mean),
            self.store.get(buffers.var),
            T::from_f64_lossy(buffers.eps),
            self.mode,
        )?;
        if let Some(stats) = out.batch_stats {
            self.updates.push(StatUpdate {
                mean: buffers.mean,
                var: buffers.var,
                stats,
                momentum: T::from_f64_lossy(buffers.momentum),
            });
        }
        let op = Op::BatchNorm {
            buffers,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        Ok(self.push(op, vec![*x, *gamma, *beta], out.output))
    }

    fn layer_norm(
        &mut self,
        x: &NodeId,
        gamma: &NodeId,
        beta: &NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let out = norm::layer_norm_channels(
            self.val(*x),
            self.val(*gamma),
            self.val(*beta),
            T::from_f64_lossy(eps),
        )?;
        let op = Op::LayerNorm {
            eps,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        Ok(self.push(op, vec![*x, *gamma, *beta], out.output))
    }

    fn hard_swish(&mut self, x: &NodeId) -> NodeId {
        let y = activation::hard_swish(self.val(*x));
        self.push(Op::HardSwish, vec![*x], y)
    }

    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        let y = activation::sigmoid(self.val(*x));
        self.push(Op::Sigmoid, vec![*x], y)
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = activation::relu(self.val(*x));
        self.push(Op::Relu, vec![*x], y)
    }

    fn linear(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>) -> Result<NodeId> {
        let y = ops::linear(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.push(Op::Linear, inputs, y))
    }

    fn dropout(&mut self, x: &NodeId, p: f64) -> Result<NodeId> {
        dropout::check_rate(p)?;
        let (mask, y) = if self.mode == Mode::Infer || p == 0.0 {
            (None, self.val(*x).clone())
        } else {
            let m = dropout::dropout_mask(self.val(*x).shape(), p, &mut self.rng)?;
            let y = activation::mul(self.val(*x), &m)?;
            (Some(m), y)
        };
        Ok(self.push(Op::Dropout { mask }, vec![*x], y))
    }

    fn scale_channels(&mut self, x: &NodeId, gate: &NodeId) -> Result<NodeId> {
        let y = ops::scale_channels(self.val(*x), self.val(*gate))?;
        Ok(self.push(Op::ScaleChannels, vec![*x, *gate], y))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = Tensor::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Add, vec![*a, *b], y))
    }

    fn concat_channels(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = Tensor::concat_channels(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Concat, vec![*a, *b], y))
    }

    fn sum(&mut self, x: &NodeId) -> NodeId {
        let y = Tensor::scalar(self.val(*x).sum());
        self.push(Op::Sum, vec![*x], y)
    }

    fn weighted_sum(&mut self, x: &NodeId, weights: &Tensor<T>) -> Result<NodeId> {
        let xs = self.val(*x).shape();
        if weights.shape() != xs {
            return Err(Error::Shape(format!(
                "weights {} for value {xs}",
                weights.shape()
            )));
        }
        let y = Tensor::scalar(weighted(self.val(*x), weights));
        Ok(self.push(Op::WeightedSum(weights.clone()), vec![*x], y))
    }

    fn softmax_cross_entropy(&mut self, logits: &NodeId, labels: &[usize]) -> Result<NodeId> {
        let ce = loss::softmax_cross_entropy(self.val(*logits), labels)?;
        let op = Op::SoftmaxCe {
            labels: labels.to_vec(),
            probs: ce.probs,
        };
        Ok(self.push(op, vec![*logits], Tensor::full(Shape::scalar(), ce.loss)))
    }

    fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates)
    }
}
