//! Grouped 2-D cross-correlation (no kernel flip) with symmetric zero padding.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::WeightGrads;

/// Stride, padding and grouping of a convolution. Kernel extents come from
/// the weight tensor `(C_out, C_in / groups, kH, kW)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            groups,
        }
    }

    pub const fn pointwise() -> Self {
        ConvGeom::new(1, 0, 1)
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Validates `x` against `weight` and returns the output shape.
    pub fn output_shape(&self, x: Shape, weight: Shape) -> Result<Shape> {
        let [c_out, c_in_g, kh, kw] = weight.dims();
        if self.groups == 0 || self.stride == 0 {
            return Err(Error::Config(format!("invalid conv geometry {self:?}")));
        }
        if !x.c().is_multiple_of(self.groups) || c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels in={} out={c_out} not divisible by groups={}",
                x.c(),
                self.groups
            )));
        }
        if x.c() / self.groups != c_in_g {
            return Err(Error::Config(format!(
                "input {x} has {} channels per group, weight {weight} expects {c_in_g}",
                x.c() / self.groups
            )));
        }
        match (self.output_extent(x.h(), kh), self.output_extent(x.w(), kw)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Shape::new(x.n(), c_out, ho, wo)),
            _ => Err(Error::Shape(format!(
                "conv {kh}x{kw} stride {} pad {} on {x} leaves no output",
                self.stride, self.pad
            ))),
        }
    }
}

/// A standalone convolution layer: weights plus geometry.
#[derive(Debug, Clone)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, geom: ConvGeom) -> Result<Self> {
        let [c_out, _, _, _] = weight.shape().dims();
        if geom.groups == 0 || c_out % geom.groups != 0 {
            return Err(Error::Config(format!(
                "C_out={c_out} not divisible by groups={}",
                geom.groups
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != Shape::vector(c_out) {
                return Err(Error::Config(format!(
                    "bias {} does not match C_out={c_out}",
                    b.shape()
                )));
            }
        }
        Ok(ConvParams { weight, bias, geom })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c() * self.geom.groups
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn is_depthwise(&self) -> bool {
        self.geom.groups == self.c_in() && self.geom.groups == self.c_out()
    }

    pub fn is_pointwise(&self) -> bool {
        let s = self.weight.shape();
        s.h() == 1 && s.w() == 1 && self.geom.groups == 1
    }

    /// `C_out * (C_in / groups) * kH * kW`, plus `C_out` with a bias.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.geom)
    }
}

/// Output columns `ow` whose tap `ow * stride + kw - pad` lands inside `0..w`.
#[inline]
fn valid_cols(w: usize, wo: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kw >= pad {
        0
    } else {
        (pad - kw).div_ceil(stride)
    };
    let hi = if w + pad <= kw {
        0
    } else {
        ((w - 1 + pad - kw) / stride + 1).min(wo)
    };
    (lo, hi.max(lo))
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let out_shape = geom.output_shape(x.shape(), weight.shape())?;
    let [_, c_out, ho, wo] = out_shape.dims();
    let [_, c_in, h, w] = x.shape().dims();
    let [_, cin_g, kh, kw] = weight.shape().dims();
    let cout_g = c_out / geom.groups;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Config(format!(
                "bias {} does not match C_out={c_out}",
                b.shape()
            )));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let (s, pad) = (geom.stride, geom.pad);
    let pointwise = kh == 1 && kw == 1 && s == 1 && pad == 0;

    let mut out = Tensor::zeros(out_shape);
    par::for_each_chunk(out.data_mut(), ho * wo, |plane, o| {
        let (n, co) = (plane / c_out, plane % c_out);
        let ci0 = (co / cout_g) * cin_g;
        if let Some(b) = bias {
            o.fill(b.data()[co]);
        }
        for cil in 0..cin_g {
            let xp = &xd[(n * c_in + ci0 + cil) * h * w..][..h * w];
            let wk = &wd[(co * cin_g + cil) * kh * kw..][..kh * kw];
            if pointwise {
                let wv = wk[0];
                for (ov, &xv) in o.iter_mut().zip(xp) {
                    *ov += wv * xv;
                }
                continue;
            }
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wk[ki * kw + kj];
                    let (lo, hi) = valid_cols(w, wo, kj, s, pad);
                    for oh in 0..ho {
                        let Some(ih) = tap(oh, ki, s, pad, h) else {
                            continue;
                        };
                        let xrow = &xp[ih * w..(ih + 1) * w];
                        let orow = &mut o[oh * wo..(oh + 1) * wo];
                        for ow in lo..hi {
                            orow[ow] += wv * xrow[ow * s + kj - pad];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of a convolution: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeom,
    with_bias: bool,
) -> Result<WeightGrads<T>> {
    let out_shape = geom.output_shape(x.shape(), weight.shape())?;
    if dy.shape() != out_shape {
        return Err(Error::Shape(format!(
            "conv upstream gradient {} does not match output {out_shape}",
            dy.shape()
        )));
    }
    let [n_batch, c_out, ho, wo] = out_shape.dims();
    let [_, c_in, h, w] = x.shape().dims();
    let [_, cin_g, kh, kw] = weight.shape().dims();
    let cout_g = c_out / geom.groups;
    let (xd, wd, gd) = (x.data(), weight.data(), dy.data());
    let (s, pad) = (geom.stride, geom.pad);

    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk(dx.data_mut(), h * w, |plane, dxp| {
        let (n, ci) = (plane / c_in, plane % c_in);
        let g = ci / cin_g;
        let cil = ci - g * cin_g;
        for co in g * cout_g..(g + 1) * cout_g {
            let gp = &gd[(n * c_out + co) * ho * wo..][..ho * wo];
            let wk = &wd[(co * cin_g + cil) * kh * kw..][..kh * kw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wk[ki * kw + kj];
                    let (lo, hi) = valid_cols(w, wo, kj, s, pad);
                    for oh in 0..ho {
                        let Some(ih) = tap(oh, ki, s, pad, h) else {
                            continue;
                        };
                        let grow = &gp[oh * wo..(oh + 1) * wo];
                        let xrow = &mut dxp[ih * w..(ih + 1) * w];
                        for ow in lo..hi {
                            xrow[ow * s + kj - pad] += wv * grow[ow];
                        }
                    }
                }
            }
        }
    });

    let mut dw = Tensor::zeros(weight.shape());
    par::for_each_chunk(dw.data_mut(), cin_g * kh * kw, |co, dwc| {
        let ci0 = (co / cout_g) * cin_g;
        for n in 0..n_batch {
            let gp = &gd[(n * c_out + co) * ho * wo..][..ho * wo];
            for cil in 0..cin_g {
                let xp = &xd[(n * c_in + ci0 + cil) * h * w..][..h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let (lo, hi) = valid_cols(w, wo, kj, s, pad);
                        let mut acc = T::zero();
                        for oh in 0..ho {
                            let Some(ih) = tap(oh, ki, s, pad, h) else {
                                continue;
                            };
                            let grow = &gp[oh * wo..(oh + 1) * wo];
                            let xrow = &xp[ih * w..(ih + 1) * w];
                            for ow in lo..hi {
                                acc += grow[ow] * xrow[ow * s + kj - pad];
                            }
                        }
                        dwc[(cil * kh + ki) * kw + kj] += acc;
                    }
                }
            }
        }
    });

    let db = with_bias.then(|| {
        let sums = par::map_range(c_out, |co| {
            (0..n_batch)
                .map(|n| {
                    gd[(n * c_out + co) * ho * wo..][..ho * wo]
                        .iter()
                        .copied()
                        .sum::<T>()
                })
                .sum::<T>()
        });
        Tensor::from_vec(Shape::vector(c_out), sums).expect("bias gradient length")
    });
    Ok((dx, dw, db))
}
