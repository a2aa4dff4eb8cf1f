#![allow(dead_code)]

use fbnet::models::{ForwardOptions, ForwardPass, ModelParams, ModelVariant};
use fbnet::nn::batchnorm::BnOutput;
use fbnet::nn::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, global_average_pool,
    global_average_pool_backward, linear_backward, relu, relu_backward, softmax_cross_entropy, BatchNormParams,
    ConvParams, LinearParams, Mode,
};
use fbnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type T64 = Tensor<f64>;

struct Site {
    conv: ConvParams<f64>,
    bn: BatchNormParams<f64>,
    input: Vec<T64>,
    pre: Vec<T64>,
    out: Option<BnOutput<f64>>,
    gconv: ConvParams<f64>,
    gbn: BatchNormParams<f64>,
}

impl Site {
    fn new(conv: &ConvParams<f64>, bn: &BatchNormParams<f64>) -> Self {
        Site {
            conv: conv.clone(),
            bn: bn.clone(),
            input: Vec::new(),
            pre: Vec::new(),
            out: None,
            gconv: ConvParams::zeros(conv.out_channels(), conv.in_channels()),
            gbn: BatchNormParams::zeroed(bn.channels()),
        }
    }

    fn forward(&mut self, input: &[T64]) -> Vec<T64> {
        self.input = input.to_vec();
        self.pre = input.iter().map(|x| conv2d(x, &self.conv).unwrap()).collect();
        let act: Vec<T64> = self.pre.iter().map(relu).collect();
        let out = batchnorm_forward(&act, &self.bn, Mode::Train).unwrap();
        let y = out.output.clone();
        self.out = Some(out);
        y
    }

    fn backward(&mut self, dout: &[T64]) -> Vec<T64> {
        let cache = &self.out.as_ref().unwrap().cache;
        let dact = batchnorm_backward(cache, &self.bn, dout, Some(&mut self.gbn)).unwrap();
        self.input
            .iter()
            .zip(&self.pre)
            .zip(&dact)
            .map(|((x, p), d)| {
                let dpre = relu_backward(p, d);
                conv2d_backward(x, &self.conv, &dpre, &mut self.gconv, true).unwrap().unwrap()
            })
            .collect()
    }
}

fn add_all(acc: &mut [T64], other: &[T64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.add_assign(b).unwrap();
    }
}



/// Largest scaled difference between two tensors.
fn rel_error(a: &T64, b: &T64, what: &'static str) -> (&'static str, f64) {
    assert_eq!(a.shape(), b.shape(), "{what}");
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    (what, worst / scale)
}

pub struct SharedCheck {
    /// Shared cotangent vs the sum over per-site copies, per tensor.
    pub errors: Vec<(&'static str, f64)>,
    /// |shared - first site alone| at one conv2 coordinate.
    pub single_site_gap: f64,
}

/// Compares `ForwardPass::backward` on FB-Net against an unrolled network in
/// which every application of conv2/bn2 and conv3/bn3 has its own copy.
pub fn shared_weight_check(seed: u64) -> SharedCheck {
    let mut errors = Vec::new();
    let params = ModelParams::init(ModelVariant::Fbnet, seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let batch: Vec<T64> = (0..3).map(|_| Tensor::from_fn(&[7, 16, 16], |_| rng.gen_range(0.0..1.0))).collect();
    let labels = [1usize, 0, 1];

    let mut a = Site::new(&params.conv1, &params.bn1);
    let mut b = Site::new(&params.conv2, &params.bn2);
    let mut c = Site::new(&params.conv3, &params.bn3);
    let mut d = Site::new(&params.conv2, &params.bn2);
    let mut e = Site::new(&params.conv3, &params.bn3);
    let mut f = Site::new(&params.conv2, &params.bn2);
    let mut g = Site::new(&params.conv3, &params.bn3);
    let f1 = a.forward(&batch);
    let f2 = b.forward(&f1);
    let f3 = c.forward(&f2);
    let f22 = d.forward(&f2);
    let f23 = e.forward(&f22);
    let f32_ = f.forward(&f3);
    let f33 = g.forward(&f32_);

    let mut gfc = LinearParams::<f64>::zeros(2, 96);
    let n = batch.len() as f64;
    let mut d3 = Vec::new();
    let mut d23 = Vec::new();
    let mut d33 = Vec::new();
    for s in 0..batch.len() {
        let mut v = Vec::new();
        for t in [&f3[s], &f23[s], &f33[s]] {
            v.extend_from_slice(global_average_pool(t).unwrap().data());
        }
        let logits: Vec<f64> = (0..2)
            .map(|k| {
                params.fc.row(k).iter().zip(&v).map(|(w, x)| w * x).sum::<f64>() + params.fc.bias.data()[k]
            })
            .collect();
        let (_, dl) = softmax_cross_entropy(&logits, labels[s]);
        let dl: Vec<f64> = dl.iter().map(|x| x / n).collect();
        let dv = linear_backward(&v, &params.fc, &dl, &mut gfc);
        let split = |k: usize, side: usize| {
            global_average_pool_backward(&Tensor::vector(dv[k * 32..(k + 1) * 32].to_vec()), side, side)
        };
        d3.push(split(0, 10));
        d23.push(split(1, 8));
        d33.push(split(2, 6));
    }

    let d32 = g.backward(&d33);
    add_all(&mut d3, &f.backward(&d32));
    let d22 = e.backward(&d23);
    let mut d2 = d.backward(&d22);
    add_all(&mut d2, &c.backward(&d3));
    let d1 = b.backward(&d2);
    a.backward(&d1);

    let pass = ForwardPass::run(&params, &batch, ForwardOptions::train(0.0, 0)).unwrap();
    let dlogits: Vec<Vec<f64>> = pass
        .logits_wide
        .iter()
        .zip(labels)
        .map(|(l, y)| softmax_cross_entropy(l, y).1.iter().map(|x| x / n).collect())
        .collect();
    let mut shared = ModelParams::<f64>::zeroed(ModelVariant::Fbnet);
    pass.backward(&params, &dlogits, &mut shared, false).unwrap();

    let sum3 = |x: &T64, y: &T64, z: &T64| {
        let mut t = x.clone();
        t.add_assign(y).unwrap();
        t.add_assign(z).unwrap();
        t
    };
    errors.push(rel_error(&shared.conv2.kernels, &sum3(&b.gconv.kernels, &d.gconv.kernels, &f.gconv.kernels), "conv2.weight"));
    errors.push(rel_error(&shared.conv2.bias, &sum3(&b.gconv.bias, &d.gconv.bias, &f.gconv.bias), "conv2.bias"));
    errors.push(rel_error(&shared.conv3.kernels, &sum3(&c.gconv.kernels, &e.gconv.kernels, &g.gconv.kernels), "conv3.weight"));
    errors.push(rel_error(&shared.conv3.bias, &sum3(&c.gconv.bias, &e.gconv.bias, &g.gconv.bias), "conv3.bias"));
    errors.push(rel_error(&shared.bn2.gamma, &sum3(&b.gbn.gamma, &d.gbn.gamma, &f.gbn.gamma), "bn2.gamma"));
    errors.push(rel_error(&shared.bn2.beta, &sum3(&b.gbn.beta, &d.gbn.beta, &f.gbn.beta), "bn2.beta"));
    errors.push(rel_error(&shared.bn3.gamma, &sum3(&c.gbn.gamma, &e.gbn.gamma, &g.gbn.gamma), "bn3.gamma"));
    errors.push(rel_error(&shared.bn3.beta, &sum3(&c.gbn.beta, &e.gbn.beta, &g.gbn.beta), "bn3.beta"));
    errors.push(rel_error(&shared.conv1.kernels, &a.gconv.kernels, "conv1.weight"));
    errors.push(rel_error(&shared.fc.weights, &gfc.weights, "fc.weight"));

    SharedCheck {
        errors,
        single_site_gap: (shared.conv2.kernels.data()[0] - b.gconv.kernels.data()[0]).abs(),
    }
}

/// Sliding-window loop: for every output element, `ci, ky, kx` ascending in
/// f64, bias last, rounded once.
pub fn naive_conv(x: &Tensor, k: &Tensor, bias: &Tensor) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = k.shape()[0];
    let (oh, ow) = (h - 2, w - 2);
    let mut out = vec![0.0f32; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += k.data()[((co * cin + ci) * 3 + ky) * 3 + kx] as f64
                                * x.data()[(ci * h + oy + ky) * w + ox + kx] as f64;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = (acc + bias.data()[co] as f64) as f32;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

