use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = f32> {
    /// `classes × features`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match weights.shape() {
            [c, _] if bias.shape() == [*c] => Ok(LinearParams { weights, bias }),
            s => Err(Error::shape("classes x features weights with matching bias", shape_str(s))),
        }
    }

    pub fn zeros(classes: usize, features: usize) -> Self {
        LinearParams {
            weights: Tensor::zeros(&[classes, features]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn he_uniform<R: Rng>(classes: usize, features: usize, rng: &mut R) -> Self {
        let bound = (6.0 / features as f32).sqrt();
        LinearParams {
            weights: Tensor::from_fn(&[classes, features], |_| T::from_f64(rng.gen_range(-bound..bound) as f64)),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Weight row of one class.
    pub fn row(&self, class: usize) -> &[T] {
        let f = self.features();
        &self.weights.data()[class * f..(class + 1) * f]
    }
}

pub fn linear<T: Scalar>(input: &[T], params: &LinearParams<T>) -> Result<Tensor<T>> {
    Ok(Tensor::vector(
        linear_accumulate(input, params)?.into_iter().map(T::from_f64).collect(),
    ))
}

/// `weights·input + bias` before rounding to the storage type.
pub fn linear_accumulate<T: Scalar>(input: &[T], params: &LinearParams<T>) -> Result<Vec<f64>> {
    if input.len() != params.features() {
        return Err(Error::shape(
            format!("{} features", params.features()),
            format!("{} features", input.len()),
        ));
    }
    Ok((0..params.classes())
        .map(|c| {
            let s: f64 = params.row(c).iter().zip(input).map(|(w, x)| w.to_f64() * x.to_f64()).sum();
            s + params.bias.data()[c].to_f64()
        })
        .collect())
}

/// Adds the parameter cotangents into `grads` and returns the input cotangent.
pub fn linear_backward<T: Scalar>(
    input: &[T],
    params: &LinearParams<T>,
    grad_out: &[T],
    grads: &mut LinearParams<T>,
) -> Vec<T> {
    let f = params.features();
    for (c, &g) in grad_out.iter().enumerate() {
        let row = &mut grads.weights.data_mut()[c * f..(c + 1) * f];
        for (r, &x) in row.iter_mut().zip(input) {
            *r += T::from_f64(g.to_f64() * x.to_f64());
        }
        grads.bias.data_mut()[c] += g;
    }
    (0..f)
        .map(|j| {
            let s = grad_out
                .iter()
                .enumerate()
                .map(|(c, g)| g.to_f64() * params.weights.data()[c * f + j].to_f64())
                .sum::<f64>();
            T::from_f64(s)
        })
        .collect()
}
