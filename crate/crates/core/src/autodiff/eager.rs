use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BnBuffers, Graph};
use crate::error::{Error, Result};
use crate::ops::{self, activation, dropout, loss, norm, pool, ConvGeom, Mode, PoolCfg};
use crate::params::{ParamId, ParamStore, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Value handle of the [`Eager`] executor: parameters are borrowed from the
/// store, intermediates are reference-counted and dropped once unused.
#[derive(Debug, Clone)]
pub enum EVar<'a, T> {
    Param(&'a Tensor<T>),
    Owned(Arc<Tensor<T>>),
}

impl<T> EVar<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            EVar::Param(t) => t,
            EVar::Owned(t) => t,
        }
    }
}

/// Evaluates a graph without recording it.
pub struct Eager<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Eager<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Eager {
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }

    pub fn infer(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Infer, 0)
    }

    fn own(t: Tensor<T>) -> EVar<'a, T> {
        EVar::Owned(Arc::new(t))
    }
}

impl<'a, T: Scalar> Graph<T> for Eager<'a, T> {
    type Var = EVar<'a, T>;

    fn mode(&self) -> Mode {
        self.mode
    }

    fn input(&mut self, t: Tensor<T>) -> Self::Var {
        Self::own(t)
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        EVar::Param(self.store.get(id))
    }

    fn value<'v>(&'v self, v: &'v Self::Var) -> &'v Tensor<T> {
        v.get()
    }

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, geom: ConvGeom) -> Result<Self::Var> {
        Ok(Self::own(ops::conv2d(x.get(), w.get(), None, geom)?))
    }

    fn pool2d(&mut self, x: &Self::Var, cfg: PoolCfg) -> Result<Self::Var> {
        Ok(Self::own(pool::pool2d(x.get(), cfg)?.output))
    }

    fn global_avg_pool(&mut self, x: &Self::Var) -> Result<Self::Var> {
        Ok(Self::own(pool::global_avg_pool(x.get())?))
    }

    fn batch_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        buffers: BnBuffers,
    ) -> Result<Self::Var> {
        let out = norm::batch_norm(
            x.get(),
            gamma.get(),
            beta.get(),
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
        Ok(Self::own(out.output))
    }

    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        eps: f64,
    ) -> Result<Self::Var> {
        let out =
            norm::layer_norm_channels(x.get(), gamma.get(), beta.get(), T::from_f64_lossy(eps))?;
        Ok(Self::own(out.output))
    }

    fn hard_swish(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(activation::hard_swish(x.get()))
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(activation::sigmoid(x.get()))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(activation::relu(x.get()))
    }

    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var> {
        Ok(Self::own(ops::linear(x.get(), w.get(), b.map(EVar::get))?))
    }

    fn dropout(&mut self, x: &Self::Var, p: f64) -> Result<Self::Var> {
        dropout::check_rate(p)?;
        if self.mode == Mode::Infer || p == 0.0 {
            return Ok(x.clone());
        }
        Ok(Self::own(dropout::dropout(
            x.get(),
            p,
            &mut self.rng,
            self.mode,
        )?))
    }

    fn scale_channels(&mut self, x: &Self::Var, gate: &Self::Var) -> Result<Self::Var> {
        Ok(Self::own(ops::scale_channels(x.get(), gate.get())?))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Self::own(Tensor::add(a.get(), b.get())?))
    }

    fn concat_channels(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Self::own(Tensor::concat_channels(a.get(), b.get())?))
    }

    fn sum(&mut self, x: &Self::Var) -> Self::Var {
        Self::own(Tensor::scalar(x.get().sum()))
    }

    fn weighted_sum(&mut self, x: &Self::Var, weights: &Tensor<T>) -> Result<Self::Var> {
        if weights.shape() != x.get().shape() {
            return Err(Error::Shape(format!(
                "weights {} for value {}",
                weights.shape(),
                x.get().shape()
            )));
        }
        let s = x
            .get()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(Self::own(Tensor::scalar(s)))
    }

    fn softmax_cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var> {
        let ce = loss::softmax_cross_entropy(logits.get(), labels)?;
        Ok(Self::own(Tensor::scalar(ce.loss)))
    }

    fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.updates)
    }
}
