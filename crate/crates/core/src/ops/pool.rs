//! Window pooling (max, min, average) and global average pooling.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Min,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCfg {
    pub k: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

impl PoolCfg {
    pub const fn new(k: usize, stride: usize, mode: PoolMode) -> Self {
        PoolCfg { k, stride, mode }
    }

    /// The 2x2 stride-2 window used by every downsampler in the network.
    pub const fn halving(mode: PoolMode) -> Self {
        PoolCfg::new(2, 2, mode)
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        if self.k == 0 || self.stride == 0 || x.h() < self.k || x.w() < self.k {
            return Err(Error::Shape(format!(
                "pool {}x{} stride {} on {x} leaves no output",
                self.k, self.k, self.stride
            )));
        }
        Ok(Shape::new(
            x.n(),
            x.c(),
            (x.h() - self.k) / self.stride + 1,
            (x.w() - self.k) / self.stride + 1,
        ))
    }
}

/// Result of a pooling pass. For max/min, `source[i]` is the in-plane index
/// of the input element selected for output `i`.
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub source: Option<Vec<u32>>,
}

/// Ties resolve to the first element in row-major window order, which is
/// also the lowest linear index.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, cfg: PoolCfg) -> Result<Pooled<T>> {
    let out_shape = cfg.output_shape(x.shape())?;
    let [n, c, ho, wo] = out_shape.dims();
    let w = x.shape().w();
    let (k, s) = (cfg.k, cfg.stride);
    let inv_area = T::one() / T::from_count(k * k);

    let planes = par::map_range(n * c, |plane| {
        let xp = x.plane(plane / c, plane % c);
        let mut vals = Vec::with_capacity(ho * wo);
        let mut src = Vec::with_capacity(if cfg.mode == PoolMode::Avg {
            0
        } else {
            ho * wo
        });
        for oh in 0..ho {
            for ow in 0..wo {
                let base = oh * s * w + ow * s;
                match cfg.mode {
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for i in 0..k {
                            for j in 0..k {
                                acc += xp[base + i * w + j];
                            }
                        }
                        vals.push(acc * inv_area);
                    }
                    PoolMode::Max | PoolMode::Min => {
                        let mut best = base;
                        for i in 0..k {
                            for j in 0..k {
                                let idx = base + i * w + j;
                                let better = match cfg.mode {
                                    PoolMode::Max => xp[idx] > xp[best],
                                    _ => xp[idx] < xp[best],
                                };
                                if better {
                                    best = idx;
                                }
                            }
                        }
                        vals.push(xp[best]);
                        src.push(best as u32);
                    }
                }
            }
        }
        (vals, src)
    });

    let mut data = Vec::with_capacity(out_shape.numel());
    let mut source = (cfg.mode != PoolMode::Avg).then(|| Vec::with_capacity(out_shape.numel()));
    for (vals, src) in planes {
        data.extend(vals);
        if let Some(s) = source.as_mut() {
            s.extend(src);
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(out_shape, data)?,
        source,
    })
}

/// Routes `dy` back through a pooling pass. Max/min send each output
/// gradient to its selected element; average spreads it as `g / k^2`.
pub fn pool2d_backward<T: Scalar>(
    input_shape: Shape,
    dy: &Tensor<T>,
    cfg: PoolCfg,
    source: Option<&[u32]>,
) -> Result<Tensor<T>> {
    let out_shape = cfg.output_shape(input_shape)?;
    if dy.shape() != out_shape {
        return Err(Error::Shape(format!(
            "pool upstream gradient {} does not match output {out_shape}",
            dy.shape()
        )));
    }
    let [_, c, ho, wo] = out_shape.dims();
    let w = input_shape.w();
    let (k, s) = (cfg.k, cfg.stride);
    let inv_area = T::one() / T::from_count(k * k);
    let source = match (cfg.mode, source) {
        (PoolMode::Avg, _) => None,
        (_, Some(src)) if src.len() == out_shape.numel() => Some(src),
        _ => {
            return Err(Error::Contract(
                "max/min pool backward needs the forward selection indices".into(),
            ))
        }
    };
    let mut dx = Tensor::zeros(input_shape);
    par::for_each_chunk(dx.data_mut(), input_shape.plane(), |plane, dxp| {
        let gp = dy.plane(plane / c, plane % c);
        match source {
            Some(src) => {
                let sp = &src[plane * ho * wo..(plane + 1) * ho * wo];
                for (&g, &i) in gp.iter().zip(sp) {
                    dxp[i as usize] += g;
                }
            }
            None => {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gp[oh * wo + ow] * inv_area;
                        let base = oh * s * w + ow * s;
                        for i in 0..k {
                            for j in 0..k {
                                dxp[base + i * w + j] += g;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(dx)
}

/// Mean over each `H x W` plane: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::Shape(format!("global pool over empty plane {s}")));
    }
    let inv = T::one() / T::from_count(s.plane());
    let means = par::map_range(s.n() * s.c(), |p| {
        x.plane(p / s.c(), p % s.c()).iter().copied().sum::<T>() * inv
    });
    Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), means)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: Shape,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let expect = Shape::new(input_shape.n(), input_shape.c(), 1, 1);
    if dy.shape() != expect {
        return Err(Error::Shape(format!(
            "global pool gradient {} does not match {expect}",
            dy.shape()
        )));
    }
    let inv = T::one() / T::from_count(input_shape.plane());
    let mut dx = Tensor::zeros(input_shape);
    par::for_each_chunk(dx.data_mut(), input_shape.plane(), |p, dxp| {
        dxp.fill(dy.data()[p] * inv);
    });
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn single_window_extremes_and_mean() {
        let x = window();
        let run = |m| pool2d(&x, PoolCfg::halving(m)).unwrap().output.data()[0];
        assert_eq!(run(PoolMode::Max), 4.0);
        assert_eq!(run(PoolMode::Min), 1.0);
        assert_eq!(run(PoolMode::Avg), 2.5);
    }

    #[test]
    fn constant_input_is_fixed_point() {
        let x = Tensor::full(Shape::new(2, 3, 4, 4), 0.75f32);
        for m in [PoolMode::Max, PoolMode::Min, PoolMode::Avg] {
            let y = pool2d(&x, PoolCfg::halving(m)).unwrap().output;
            assert_eq!(y.shape(), Shape::new(2, 3, 2, 2));
            assert!(y.data().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![5.0f32, 5.0, 5.0, 5.0]).unwrap();
        for m in [PoolMode::Max, PoolMode::Min] {
            assert_eq!(
                pool2d(&x, PoolCfg::halving(m)).unwrap().source.unwrap(),
                vec![0]
            );
        }
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 7.0, 0.0, 7.0]).unwrap();
        assert_eq!(
            pool2d(&x, PoolCfg::halving(PoolMode::Max))
                .unwrap()
                .source
                .unwrap(),
            vec![1]
        );
    }

    #[test]
    fn too_small_input_is_shape_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 4));
        assert!(matches!(
            pool2d(&x, PoolCfg::halving(PoolMode::Max)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn avg_backward_spreads_quarter() {
        let dy = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0f32]).unwrap();
        let dx = pool2d_backward(
            Shape::new(1, 1, 2, 2),
            &dy,
            PoolCfg::halving(PoolMode::Avg),
            None,
        )
        .unwrap();
        assert_eq!(dx.data(), &[0.25; 4]);
    }

    #[test]
    fn global_pool_means() {
        let y = global_avg_pool(&window()).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let x = Tensor::full(Shape::new(1, 384, 7, 7), 1.5f32);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 384, 1, 1));
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
    }
}
