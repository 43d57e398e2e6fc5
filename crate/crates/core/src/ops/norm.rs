//! Batch normalization and channel-wise layer normalization.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// Affine normalization parameters. Running statistics are present for
/// batch norm only.
#[derive(Debug, Clone)]
pub struct NormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> NormParams<T> {
    pub fn batch_norm(c: usize) -> Self {
        NormParams {
            gamma: Tensor::full(Shape::vector(c), T::one()),
            beta: Tensor::zeros(Shape::vector(c)),
            running_mean: Some(Tensor::zeros(Shape::vector(c))),
            running_var: Some(Tensor::full(Shape::vector(c), T::one())),
            eps: T::from_f64_lossy(BN_EPS),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        }
    }

    pub fn layer_norm(c: usize) -> Self {
        NormParams {
            gamma: Tensor::full(Shape::vector(c), T::one()),
            beta: Tensor::zeros(Shape::vector(c)),
            running_mean: None,
            running_var: None,
            eps: T::from_f64_lossy(LN_EPS),
            momentum: T::zero(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Always `2C`: gamma and beta.
    pub fn trainable_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn buffer_count(&self) -> usize {
        self.running_mean.as_ref().map_or(0, Tensor::len)
            + self.running_var.as_ref().map_or(0, Tensor::len)
    }

    /// Batch norm in either mode. Train mode folds the batch statistics into
    /// the running buffers.
    pub fn batch_norm_apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (mean, var) = match (&self.running_mean, &self.running_var) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::Config("batch norm needs running statistics".into())),
        };
        let out = batch_norm(x, &self.gamma, &self.beta, mean, var, self.eps, mode)?;
        if let Some(stats) = &out.batch_stats {
            let (m, v) = (
                self.running_mean.as_mut().unwrap(),
                self.running_var.as_mut().unwrap(),
            );
            update_running(m, v, stats, self.momentum);
        }
        Ok(out.output)
    }

    pub fn layer_norm_apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(layer_norm_channels(x, &self.gamma, &self.beta, self.eps)?.output)
    }
}

/// Per-channel batch statistics: mean, biased variance, and element count.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Forward result of a normalization; `xhat` and `inv_std` are what the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct Normalized<T> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: Option<BatchStats<T>>,
}

fn check_vector<T: Scalar>(name: &str, v: &Tensor<T>, c: usize) -> Result<()> {
    if v.len() != c {
        return Err(Error::Config(format!(
            "{name} has {} entries, input has {c} channels",
            v.len()
        )));
    }
    Ok(())
}

/// Two-pass per-channel mean and biased variance over `N, H, W`.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let s = x.shape();
    let count = s.n() * s.plane();
    let inv = T::one() / T::from_count(count.max(1));
    let pairs = par::map_range(s.c(), |c| {
        let mean = (0..s.n())
            .map(|n| x.plane(n, c).iter().copied().sum::<T>())
            .sum::<T>()
            * inv;
        let var = (0..s.n())
            .map(|n| {
                x.plane(n, c)
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
            })
            .sum::<T>()
            * inv;
        (mean, var)
    });
    let (mean, var) = pairs.into_iter().unzip();
    BatchStats { mean, var, count }
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    mode: Mode,
) -> Result<Normalized<T>> {
    let s = x.shape();
    let c = s.c();
    for (name, v) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        check_vector(name, v, c)?;
    }
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let st = channel_stats(x);
            (st.mean.clone(), st.var.clone(), Some(st))
        }
        Mode::Infer => (
            running_mean.data().to_vec(),
            running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(s);
    par::for_each_chunk(xhat.data_mut(), s.plane(), |p, out| {
        let ch = p % c;
        for (o, &v) in out.iter_mut().zip(x.plane(p / c, ch)) {
            *o = (v - mean[ch]) * inv_std[ch];
        }
    });
    let mut output = Tensor::zeros(s);
    par::for_each_chunk(output.data_mut(), s.plane(), |p, out| {
        let ch = p % c;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for (o, &v) in out.iter_mut().zip(xhat.plane(p / c, ch)) {
            *o = g * v + b;
        }
    });
    Ok(Normalized {
        output,
        xhat,
        inv_std,
        batch_stats: stats,
    })
}

/// Exponential moving average of the running statistics. The variance
/// folded in is the unbiased batch estimate when more than one element
/// contributed.
pub fn update_running<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: T,
) {
    let keep = T::one() - momentum;
    let correction = if stats.count > 1 {
        T::from_count(stats.count) / T::from_count(stats.count - 1)
    } else {
        T::one()
    };
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + momentum * v * correction;
    }
}

/// Gradients of batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = xhat.shape();
    if dy.shape() != s {
        return Err(Error::Shape(format!(
            "batch norm gradient {} does not match {s}",
            dy.shape()
        )));
    }
    let c = s.c();
    let m = T::from_count(s.n() * s.plane());
    let sums = par::map_range(c, |ch| {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n() {
            for (&g, &xh) in dy.plane(n, ch).iter().zip(xhat.plane(n, ch)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        (sum_dy, sum_dy_xhat)
    });
    let dbeta: Vec<T> = sums.iter().map(|p| p.0).collect();
    let dgamma: Vec<T> = sums.iter().map(|p| p.1).collect();

    let mut dx = Tensor::zeros(s);
    par::for_each_chunk(dx.data_mut(), s.plane(), |p, out| {
        let (n, ch) = (p / c, p % c);
        let scale = gamma.data()[ch] * inv_std[ch];
        let gp = dy.plane(n, ch);
        match mode {
            Mode::Infer => {
                for (o, &g) in out.iter_mut().zip(gp) {
                    *o = scale * g;
                }
            }
            Mode::Train => {
                let (sdy, sdx) = (sums[ch].0 / m, sums[ch].1 / m);
                for ((o, &g), &xh) in out.iter_mut().zip(gp).zip(xhat.plane(n, ch)) {
                    *o = scale * (g - sdy - xh * sdx);
                }
            }
        }
    });
    Ok((
        dx,
        Tensor::from_vec(Shape::vector(c), dgamma)?,
        Tensor::from_vec(Shape::vector(c), dbeta)?,
    ))
}

/// Normalizes each sample's channel vector of an `(N, C, 1, 1)` tensor
/// (biased variance, `eps` inside the root), then applies gamma/beta.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Normalized<T>> {
    let s = x.shape();
    if s.plane() != 1 {
        return Err(Error::Shape(format!(
            "channel layer norm expects (N,C,1,1), got {s}"
        )));
    }
    let c = s.c();
    check_vector("gamma", gamma, c)?;
    check_vector("beta", beta, c)?;
    let inv_c = T::one() / T::from_count(c);
    let mut inv_std = Vec::with_capacity(s.n());
    let mut xhat = Vec::with_capacity(s.numel());
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|&v| (v - mean) * is));
    }
    let output = xhat
        .chunks(c)
        .flat_map(|row| {
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(&v, (&g, &b))| g * v + b)
        })
        .collect();
    Ok(Normalized {
        output: Tensor::from_vec(s, output)?,
        xhat: Tensor::from_vec(s, xhat)?,
        inv_std,
        batch_stats: None,
    })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = xhat.shape();
    if dy.shape() != s {
        return Err(Error::Shape(format!(
            "layer norm gradient {} does not match {s}",
            dy.shape()
        )));
    }
    let c = s.c();
    let inv_c = T::one() / T::from_count(c);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Vec::with_capacity(s.numel());
    for ((g_row, xh_row), &is) in dy.data().chunks(c).zip(xhat.data().chunks(c)).zip(inv_std) {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..c {
            dgamma[i] += g_row[i] * xh_row[i];
            dbeta[i] += g_row[i];
            let d = g_row[i] * gamma.data()[i];
            mean_d += d;
            mean_dx += d * xh_row[i];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        for i in 0..c {
            let d = g_row[i] * gamma.data()[i];
            dx.push(is * (d - mean_d - xh_row[i] * mean_dx));
        }
    }
    Ok((
        Tensor::from_vec(s, dx)?,
        Tensor::from_vec(Shape::vector(c), dgamma)?,
        Tensor::from_vec(Shape::vector(c), dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infer_identity_configuration() {
        let x = Tensor::from_vec(
            Shape::new(2, 3, 2, 2),
            (0..24).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut p = NormParams::<f32>::batch_norm(3);
        p.eps = 0.0;
        let y = p.batch_norm_apply(&x, Mode::Infer).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn train_mode_standardizes_and_moves_running_stats() {
        let x = Tensor::from_vec(
            Shape::new(4, 2, 3, 3),
            (0..72)
                .map(|i| (i as f32 * 1.3).cos() * 3.0 + 2.0)
                .collect(),
        )
        .unwrap();
        let mut p = NormParams::<f32>::batch_norm(2);
        let y = p.batch_norm_apply(&x, Mode::Train).unwrap();
        let st = channel_stats(&y);
        for c in 0..2 {
            assert!(st.mean[c].abs() <= 1e-5, "mean {}", st.mean[c]);
            assert!((st.var[c] - 1.0).abs() <= 1e-3, "var {}", st.var[c]);
        }
        let rm = p.running_mean.as_ref().unwrap().data();
        assert!(rm.iter().all(|&m| m != 0.0));
        assert!(p
            .running_var
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v >= 0.0));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        let mut p = NormParams::<f32>::batch_norm(4);
        assert!(matches!(
            p.batch_norm_apply(&x, Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer_norm_hand_values() {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.0f32, 2.0, 3.0]).unwrap();
        let p = NormParams::<f32>::layer_norm(3);
        let y = p.layer_norm_apply(&x).unwrap();
        let expect = [-1.2247f32, 0.0, 1.2247];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_constant_vector_gives_beta() {
        let x = Tensor::full(Shape::new(2, 4, 1, 1), 3.25f32);
        let mut p = NormParams::<f32>::layer_norm(4);
        let pre = p.layer_norm_apply(&x).unwrap();
        assert!(pre.data().iter().all(|&v| v == 0.0));
        p.beta = Tensor::from_vec(Shape::vector(4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = p.layer_norm_apply(&x).unwrap();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn layer_norm_rejects_spatial_input() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 1));
        let p = NormParams::<f32>::layer_norm(3);
        assert!(matches!(p.layer_norm_apply(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(NormParams::<f32>::layer_norm(384).trainable_count(), 768);
        let bn = NormParams::<f32>::batch_norm(48);
        assert_eq!((bn.trainable_count(), bn.buffer_count()), (96, 96));
    }
}
