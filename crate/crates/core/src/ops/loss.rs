//! Softmax cross-entropy over `(N, K, 1, 1)` logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// Mean over the batch of `-ln p[label]`.
    pub loss: T,
    pub probs: Tensor<T>,
}

pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<CrossEntropy<T>> {
    let s = logits.shape();
    if s.plane() != 1 {
        return Err(Error::Shape(format!("logits must be (N,K,1,1), got {s}")));
    }
    if labels.len() != s.n() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n()
        )));
    }
    let k = s.c();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Data {
            index: i,
            message: format!("label {l} outside [0, {k})"),
        });
    }
    let mut probs = Vec::with_capacity(s.numel());
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total += z.ln() - (row[label] - max);
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    Ok(CrossEntropy {
        loss: total / T::from_count(s.n()),
        probs: Tensor::from_vec(s, probs)?,
    })
}

/// `d loss / d logits = (probs - onehot) / N`, scaled by the upstream `g`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    g: T,
) -> Tensor<T> {
    let s = probs.shape();
    let k = s.c();
    let scale = g / T::from_count(s.n());
    let mut d = probs.clone();
    for (row, &label) in d.data_mut().chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    d
}

/// Index of the largest logit per sample; ties go to the lowest class.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().c() * logits.shape().plane();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn logits_shape(n: usize, classes: usize) -> Shape {
    Shape::new(n, classes, 1, 1)
}
