//! Valid 3×3 cross-correlation, stride 1, no padding.
//!
//! The kernels run on a "wide" grid: output row `oy` is laid out with the
//! input row stride `W`, so every kernel tap `(ky, kx)` becomes one
//! contiguous multiply-add over `(OH-1)·W + OW` elements. The two columns per
//! row past `OW` are scratch and never read back. Per output element the
//! summation order is `ci, ky, kx` ascending with the bias added last, which
//! is the order of the naive sliding-window loop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `out × in × 3 × 3`
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernels: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match kernels.shape() {
            [o, _, KERNEL, KERNEL] if bias.shape() == [*o] => Ok(ConvParams { kernels, bias }),
            [o, _, KERNEL, KERNEL] => Err(Error::shape(format!("bias of length {o}"), shape_str(bias.shape()))),
            s => Err(Error::shape("out x in x 3 x 3 kernels", shape_str(s))),
        }
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        ConvParams {
            kernels: Tensor::zeros(&[out_channels, in_channels, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    /// He-uniform kernels (bound `sqrt(6 / fan_in)`), zero bias. Values are
    /// drawn as `f32` whatever the storage type.
    pub fn he_uniform<R: Rng>(out_channels: usize, in_channels: usize, rng: &mut R) -> Self {
        let fan_in = (in_channels * KERNEL * KERNEL) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let kernels = Tensor::from_fn(&[out_channels, in_channels, KERNEL, KERNEL], |_| {
            T::from_f64(rng.gen_range(-bound..bound) as f64)
        });
        ConvParams {
            kernels,
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_channels() || h < KERNEL || w < KERNEL {
            return Err(Error::shape(
                format!("{}xHxW input with H,W >= 3 for kernels {}", self.in_channels(), shape_str(self.kernels.shape())),
                shape_str(input.shape()),
            ));
        }
        Ok((c, h, w))
    }
}

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.to_f64()).collect()
}

/// `acc[p] += w * x[p]` over equal-length slices.
#[inline(always)]
fn axpy(acc: &mut [f64], w: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    wide: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Dot product with eight independent lanes so the loop vectorizes.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().sum::<f64>() + tail
}

/// `acc` is `cout × wide`, zeroed on entry.
#[inline(always)]
fn forward_body(g: Geometry, x: &[f64], k: &[f64], acc: &mut [f64]) {
    let plane = g.plane();
    for (co, a) in acc.chunks_exact_mut(g.wide).enumerate() {
        for ci in 0..g.cin {
            let kk = &k[(co * g.cin + ci) * 9..][..9];
            let xc = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let off = ky * g.w + kx;
                    axpy(a, kk[ky * KERNEL + kx], &xc[off..off + g.wide]);
                }
            }
        }
    }
}

/// `out[co, ci, ky, kx] = <gout[co], x[ci] shifted>`.
#[inline(always)]
fn kernel_grad_body(g: Geometry, x: &[f64], gout: &[f64], out: &mut [f64]) {
    let plane = g.plane();
    for co in 0..g.cout {
        let gc = &gout[co * g.wide..(co + 1) * g.wide];
        for ci in 0..g.cin {
            let xc = &x[ci * plane..(ci + 1) * plane];
            let base = (co * g.cin + ci) * 9;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let off = ky * g.w + kx;
                    out[base + ky * KERNEL + kx] = dot(gc, &xc[off..off + g.wide]);
                }
            }
        }
    }
}

/// `dx` is `cin × plane`, zeroed on entry.
#[inline(always)]
fn input_grad_body(g: Geometry, k: &[f64], gout: &[f64], dx: &mut [f64]) {
    let plane = g.plane();
    for (ci, acc) in dx.chunks_exact_mut(plane).enumerate() {
        for co in 0..g.cout {
            let kk = &k[(co * g.cin + ci) * 9..][..9];
            let gc = &gout[co * g.wide..(co + 1) * g.wide];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let off = ky * g.w + kx;
                    axpy(&mut acc[off..off + g.wide], kk[ky * KERNEL + kx], gc);
                }
            }
        }
    }
}

// AVX2 builds of the same loops. FMA stays disabled so every product is
// rounded before the add, exactly as in the portable build.
macro_rules! dispatch {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*)) => {
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch!(forward_kernel, forward_body, (g: Geometry, x: &[f64], k: &[f64], acc: &mut [f64]));
dispatch!(kernel_grad, kernel_grad_body, (g: Geometry, x: &[f64], gout: &[f64], out: &mut [f64]));
dispatch!(input_grad, input_grad_body, (g: Geometry, k: &[f64], gout: &[f64], dx: &mut [f64]));

/// Forward pass: `C_in×H×W → C_out×(H−2)×(W−2)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (cin, h, w) = params.check_input(input)?;
    let (oh, ow) = (h - 2, w - 2);
    let cout = params.out_channels();
    let g = Geometry {
        cin,
        cout,
        h,
        w,
        wide: (oh - 1) * w + ow,
    };
    let x = to_f64(input.data());
    let k = to_f64(params.kernels.data());
    let mut acc = vec![0.0f64; cout * g.wide];
    forward_kernel(g, &x, &k, &mut acc);

    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let b = params.bias.data()[co].to_f64();
        let a = &acc[co * g.wide..];
        let dst = out.channel_mut(co);
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = T::from_f64(a[oy * w + ox] + b);
            }
        }
    }
    Ok(out)
}

/// Backward pass for one application of `params` to `input`.
///
/// Parameter cotangents are *added* into `grads`, so calling this once per
/// application site of a shared layer leaves the summed cotangent there.
/// Returns the input cotangent when `want_input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    grads: &mut ConvParams<T>,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (cin, h, w) = params.check_input(input)?;
    let (oh, ow) = (h - 2, w - 2);
    let cout = params.out_channels();
    grad_out.ensure_shape(&[cout, oh, ow])?;
    grads.kernels.ensure_shape(params.kernels.shape())?;
    let g = Geometry {
        cin,
        cout,
        h,
        w,
        wide: (oh - 1) * w + ow,
    };
    let x = to_f64(input.data());

    // Output cotangent on the wide grid; scratch columns stay zero.
    let mut gw = vec![0.0f64; cout * g.wide];
    for co in 0..cout {
        let src = grad_out.channel(co);
        let dst = &mut gw[co * g.wide..(co + 1) * g.wide];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * w + ox] = src[oy * ow + ox].to_f64();
            }
        }
    }

    let mut dk = vec![0.0f64; params.kernels.len()];
    kernel_grad(g, &x, &gw, &mut dk);
    for (acc, d) in grads.kernels.data_mut().iter_mut().zip(&dk) {
        *acc += T::from_f64(*d);
    }
    let gb = grads.bias.data_mut();
    for co in 0..cout {
        gb[co] += T::from_f64(grad_out.channel(co).iter().map(|v| v.to_f64()).sum::<f64>());
    }

    if !want_input_grad {
        return Ok(None);
    }
    let k = to_f64(params.kernels.data());
    let mut dx = vec![0.0f64; cin * g.plane()];
    input_grad(g, &k, &gw, &mut dx);
    let mut out = Tensor::zeros(&[cin, h, w]);
    for (d, a) in out.data_mut().iter_mut().zip(&dx) {
        *d = T::from_f64(*a);
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive sliding-window loop, same accumulation order as `conv2d`.
    fn oracle(input: &Tensor, p: &ConvParams) -> Tensor {
        let (cin, h, w) = input.dims3().unwrap();
        let cout = p.out_channels();
        let (oh, ow) = (h - 2, w - 2);
        let k = p.kernels.data();
        let x = input.data();
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let kv = k[((co * cin + ci) * 3 + ky) * 3 + kx] as f64;
                                let xv = x[(ci * h + oy + ky) * w + ox + kx] as f64;
                                acc += kv * xv;
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = (acc + p.bias.data()[co] as f64) as f32;
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_for_patch_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: ConvParams = ConvParams::he_uniform(32, 7, &mut rng);
        let out = conv2d(&Tensor::zeros(&[7, 16, 16]), &p).unwrap();
        assert_eq!(out.shape(), &[32, 14, 14]);
    }

    #[test]
    fn zero_kernel_returns_bias() {
        let mut p = ConvParams::zeros(1, 1);
        p.bias.data_mut()[0] = 0.75;
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let out = conv2d(&x, &p).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[0.75]);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 5, 5], &mut rng);
        let mut p = ConvParams::he_uniform(3, 2, &mut rng);
        p.bias = random(&[3], &mut rng);
        let got = conv2d(&x, &p).unwrap();
        assert!(got.bit_eq(&oracle(&x, &p)));
    }

    #[test]
    fn rejects_channel_mismatch_naming_shapes() {
        let p: ConvParams = ConvParams::zeros(4, 3);
        let err = conv2d(&Tensor::zeros(&[2, 5, 5]), &p).unwrap_err().to_string();
        assert!(err.contains("2x5x5") && err.contains("4x3x3x3"), "{err}");
        assert!(conv2d(&Tensor::zeros(&[3, 2, 5]), &p).is_err());
    }

    #[test]
    fn parameter_cotangents_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvParams::he_uniform(2, 2, &mut rng);
        let x1 = random(&[2, 6, 6], &mut rng);
        let x2 = random(&[2, 6, 6], &mut rng);
        let g1 = random(&[2, 4, 4], &mut rng);
        let g2 = random(&[2, 4, 4], &mut rng);

        let mut shared = ConvParams::zeros(2, 2);
        conv2d_backward(&x1, &p, &g1, &mut shared, false).unwrap();
        conv2d_backward(&x2, &p, &g2, &mut shared, false).unwrap();

        let mut a = ConvParams::zeros(2, 2);
        let mut b = ConvParams::zeros(2, 2);
        conv2d_backward(&x1, &p, &g1, &mut a, false).unwrap();
        conv2d_backward(&x2, &p, &g2, &mut b, false).unwrap();
        a.kernels.add_assign(&b.kernels).unwrap();
        a.bias.add_assign(&b.bias).unwrap();
        assert!(shared.kernels.bit_eq(&a.kernels));
        assert!(shared.bias.bit_eq(&a.bias));
    }
}
