use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

/// Per-element multiplier applied in the forward pass: `0` for dropped
/// elements, `1/(1−rate)` for survivors. `None` means identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T = f32>(Option<Vec<T>>);

impl<T: Scalar> DropoutMask<T> {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }

    pub fn factors(&self) -> Option<&[T]> {
        self.0.as_deref()
    }

    pub fn apply(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut out = t.clone();
        if let Some(m) = &self.0 {
            for (v, &f) in out.data_mut().iter_mut().zip(m) {
                *v *= f;
            }
        }
        out
    }
}

pub fn check_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0,1), got {rate}")));
    }
    Ok(())
}

/// Inverted dropout. Eval mode and `rate == 0` are the identity and draw
/// nothing from `rng`. The draws do not depend on the storage type.
pub fn dropout<T: Scalar, R: Rng>(
    input: &Tensor<T>,
    rate: f32,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::identity()));
    }
    let keep = T::from_f64((1.0 / (1.0 - rate)) as f64);
    let factors: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f32>() < rate { T::ZERO } else { keep })
        .collect();
    let mask = DropoutMask(Some(factors));
    Ok((mask.apply(input), mask))
}

/// The backward pass multiplies by the same factors.
pub fn dropout_backward<T: Scalar>(mask: &DropoutMask<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    mask.apply(grad_out)
}
