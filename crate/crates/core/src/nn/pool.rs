use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Per-channel spatial mean: `C×H×W → C`.
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let n = (h * w) as f64;
    Ok(Tensor::vector(
        (0..c)
            .map(|k| T::from_f64(input.channel(k).iter().map(|v| v.to_f64()).sum::<f64>() / n))
            .collect(),
    ))
}

/// Spreads each channel's cotangent uniformly as `g / (H·W)`.
pub fn global_average_pool_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let c = grad_out.len();
    let n = (h * w) as f64;
    let mut g = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let v = T::from_f64(grad_out.data()[k].to_f64() / n);
        g.channel_mut(k).iter_mut().for_each(|x| *x = v);
    }
    g
}
