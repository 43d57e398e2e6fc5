//! Fully-connected layer on `(N, C, 1, 1)` tensors.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::WeightGrads;

/// `weight` is `(C_out, C_in, 1, 1)`; `bias`, when present, `(1, C_out, 1, 1)`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let [c_out, c_in, kh, kw] = weight.shape().dims();
    if xs.plane() != 1 || kh != 1 || kw != 1 {
        return Err(Error::Shape(format!(
            "linear expects (N,C,1,1) input and (Co,Ci,1,1) weight, got {xs} and {}",
            weight.shape()
        )));
    }
    if xs.c() != c_in {
        return Err(Error::Config(format!(
            "linear input has {} features, weight expects {c_in}",
            xs.c()
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Config(format!(
                "linear bias has {} entries, expected {c_out}",
                b.len()
            )));
        }
    }
    let mut out = Tensor::zeros(Shape::new(xs.n(), c_out, 1, 1));
    par::for_each_chunk(out.data_mut(), c_out, |n, row| {
        let xr = &x.data()[n * c_in..(n + 1) * c_in];
        for (o, y) in row.iter_mut().enumerate() {
            let wr = &weight.data()[o * c_in..(o + 1) * c_in];
            let dot: T = wr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
            *y = dot + bias.map_or(T::zero(), |b| b.data()[o]);
        }
    });
    Ok(out)
}

/// `(dx, dweight, dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    with_bias: bool,
) -> Result<WeightGrads<T>> {
    let n = x.shape().n();
    let [c_out, c_in, _, _] = weight.shape().dims();
    if dy.shape() != Shape::new(n, c_out, 1, 1) {
        return Err(Error::Shape(format!(
            "linear gradient {} does not match ({n},{c_out},1,1)",
            dy.shape()
        )));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), dy.data());
    let mut dx = Tensor::zeros(x.shape());
    par::for_each_chunk(dx.data_mut(), c_in, |s, row| {
        for o in 0..c_out {
            let g = gd[s * c_out + o];
            for (d, &w) in row.iter_mut().zip(&wd[o * c_in..(o + 1) * c_in]) {
                *d += g * w;
            }
        }
    });
    let mut dw = Tensor::zeros(weight.shape());
    par::for_each_chunk(dw.data_mut(), c_in, |o, row| {
        for s in 0..n {
            let g = gd[s * c_out + o];
            for (d, &v) in row.iter_mut().zip(&xd[s * c_in..(s + 1) * c_in]) {
                *d += g * v;
            }
        }
    });
    let db = with_bias.then(|| {
        let sums = (0..c_out)
            .map(|o| (0..n).map(|s| gd[s * c_out + o]).sum())
            .collect();
        Tensor::from_vec(Shape::vector(c_out), sums).expect("bias gradient length")
    });
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_through() {
        let x = Tensor::from_vec(
            Shape::new(2, 3, 1, 1),
            vec![1.0f32, -2.0, 0.5, 4.0, 0.0, -1.0],
        )
        .unwrap();
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for i in 0..3 {
            w.data_mut()[i * 4] = 1.0;
        }
        let b = Tensor::zeros(Shape::vector(3));
        assert_eq!(linear(&x, &w, Some(&b)).unwrap(), x);
    }

    #[test]
    fn hand_matvec() {
        // W = [[1,2],[3,4],[5,6]], x = [1,-1], b = [0.5, 0, -0.5]
        let w = Tensor::from_vec(
            Shape::new(3, 2, 1, 1),
            vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0f32, -1.0]).unwrap();
        let b = Tensor::from_vec(Shape::vector(3), vec![0.5f32, 0.0, -0.5]).unwrap();
        assert_eq!(
            linear(&x, &w, Some(&b)).unwrap().data(),
            &[-0.5, -1.0, -1.5]
        );
    }

    #[test]
    fn dimension_mismatch() {
        let w = Tensor::<f32>::zeros(Shape::new(3, 2, 1, 1));
        let x = Tensor::zeros(Shape::new(1, 4, 1, 1));
        assert!(matches!(linear(&x, &w, None), Err(Error::Config(_))));
    }
}
