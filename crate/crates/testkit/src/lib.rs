//! Reference implementations written as plain nested loops, independent of the
//! kernels in `bnlrp`, plus seeded generators for random layers and networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bnlrp::model::{Conv2d, Dense, Layer, Network};
use bnlrp::tensor::{BnParams, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(rng, n, lo, hi)).unwrap()
}

/// BN parameters over the stress ranges: sigma in [0.1, 10], gamma in [-5, 5].
pub fn random_bn(rng: &mut impl Rng, n: usize) -> BnParams {
    let gamma = uniform_vec(rng, n, -5.0, 5.0);
    let beta = uniform_vec(rng, n, -1.0, 1.0);
    let mu = uniform_vec(rng, n, -1.0, 1.0);
    let sigma = uniform_vec(rng, n, 0.1, 10.0);
    BnParams::new(gamma, beta, mu, sigma).unwrap()
}

pub fn random_dense(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Dense {
    Dense::new(
        uniform(rng, &[outputs, inputs], -1.0, 1.0),
        uniform(rng, &[outputs], -1.0, 1.0),
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn output_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [
            self.out_channels,
            self.output_extent(self.height),
            self.output_extent(self.width),
        ]
    }
}

/// Extents up to 8, up to 3 channels, padding 0 or 1, stride 1 or 2, with the
/// stride dividing the swept extent exactly.
pub fn random_geometry(rng: &mut impl Rng, padding: Option<usize>) -> ConvGeometry {
    loop {
        let g = ConvGeometry {
            in_channels: rng.gen_range(1..=3),
            out_channels: rng.gen_range(1..=3),
            height: rng.gen_range(1..=8),
            width: rng.gen_range(1..=8),
            kernel: rng.gen_range(1..=3),
            stride: rng.gen_range(1..=2),
            padding: padding.unwrap_or_else(|| rng.gen_range(0..=1)),
        };
        let fits = |e: usize| {
            let span = e + 2 * g.padding;
            span >= g.kernel && (span - g.kernel).is_multiple_of(g.stride)
        };
        if fits(g.height) && fits(g.width) {
            return g;
        }
    }
}

pub fn random_conv(rng: &mut impl Rng, g: &ConvGeometry) -> Conv2d {
    let kernel = uniform(
        rng,
        &[g.out_channels, g.in_channels, g.kernel, g.kernel],
        -1.0,
        1.0,
    );
    let bias = uniform(rng, &[g.out_channels], -1.0, 1.0);
    Conv2d::new(kernel, bias, g.stride, g.padding).unwrap()
}

// ---- forward oracles ----

pub fn dense_ref(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len())
        .map(|j| {
            let mut acc = b[j];
            for i in 0..n_in {
                acc += w[j * n_in + i] * x[i];
            }
            acc
        })
        .collect()
}

/// Explicitly zero-padded correlation, `x` in `[c, h, w]` order.
pub fn conv_ref(
    kernel: &[f64],
    kshape: [usize; 4],
    bias: &[f64],
    x: &[f64],
    xshape: [usize; 3],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [oc, ic, kh, kw] = kshape;
    let [_, h, w] = xshape;
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut padded = vec![0.0; ic * ph * pw];
    for c in 0..ic {
        for y in 0..h {
            for xx in 0..w {
                padded[(c * ph + y + padding) * pw + xx + padding] = x[(c * h + y) * w + xx];
            }
        }
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for c in 0..ic {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += kernel[((o * ic + c) * kh + ky) * kw + kx]
                                * padded[(c * ph + oy * stride + ky) * pw + ox * stride + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// `gamma (x - mu) / sigma + beta`, parameters indexed by `i / plane`.
pub fn bn_ref(p: &BnParams, x: &[f64], plane: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            p.gamma()[c] * (v - p.mu_run()[c]) / p.sigma_run()[c] + p.beta()[c]
        })
        .collect()
}

pub fn conv_ref_layer(conv: &Conv2d, x: &Tensor) -> Vec<f64> {
    let ks = conv.kernel().shape();
    let xs = x.shape();
    conv_ref(
        conv.kernel().data(),
        [ks[0], ks[1], ks[2], ks[3]],
        conv.bias().data(),
        x.data(),
        [xs[0], xs[1], xs[2]],
        conv.stride(),
        conv.padding(),
    )
}

/// Dense matrix of a conv obtained by pushing unit vectors through [`conv_ref`].
pub fn conv_matrix_by_probing(conv: &Conv2d, input_shape: [usize; 3]) -> (Vec<f64>, usize, usize) {
    let ks = conv.kernel().shape();
    let kshape = [ks[0], ks[1], ks[2], ks[3]];
    let zero_bias = vec![0.0; ks[0]];
    let cols: usize = input_shape.iter().product();
    let mut columns = Vec::with_capacity(cols);
    for i in 0..cols {
        let mut e = vec![0.0; cols];
        e[i] = 1.0;
        columns.push(conv_ref(
            conv.kernel().data(),
            kshape,
            &zero_bias,
            &e,
            input_shape,
            conv.stride(),
            conv.padding(),
        ));
    }
    let rows = columns[0].len();
    let mut m = vec![0.0; rows * cols];
    for (i, col) in columns.iter().enumerate() {
        for (j, &v) in col.iter().enumerate() {
            m[j * cols + i] = v;
        }
    }
    (m, rows, cols)
}

// ---- relevance oracles ----

/// Message table `m[i][j]` of the z+ rule and the resulting input relevance.
/// `bias_term[j]` is the extra denominator term (positive bias part or zero).
pub fn zplus_messages(
    w: &[f64],
    bias_term: &[f64],
    x: &[f64],
    r_out: &[f64],
    eps: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n_out, n_in) = (r_out.len(), x.len());
    let mut msg = vec![vec![0.0; n_out]; n_in];
    for j in 0..n_out {
        let mut den = bias_term[j] + eps;
        for k in 0..n_in {
            den += x[k] * w[j * n_in + k].max(0.0);
        }
        if den == 0.0 {
            continue;
        }
        for i in 0..n_in {
            msg[i][j] = x[i] * w[j * n_in + i].max(0.0) / den * r_out[j];
        }
    }
    let r_in = msg.iter().map(|row| row.iter().sum()).collect();
    (msg, r_in)
}

/// zB rule with messages `(x_i w_ji - l w+_ji - h w-_ji) / den_j * R_j`.
pub fn zb_relevance(
    w: &[f64],
    bias_term: &[f64],
    x: &[f64],
    low: f64,
    high: f64,
    r_out: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n_out, n_in) = (r_out.len(), x.len());
    let z = |j: usize, i: usize| {
        let wji = w[j * n_in + i];
        x[i] * wji - low * wji.max(0.0) - high * wji.min(0.0)
    };
    let mut r_in = vec![0.0; n_in];
    for j in 0..n_out {
        let mut den = bias_term[j] + eps;
        for k in 0..n_in {
            den += z(j, k);
        }
        if den == 0.0 {
            continue;
        }
        for (i, r) in r_in.iter_mut().enumerate() {
            *r += z(j, i) / den * r_out[j];
        }
    }
    r_in
}

// ---- random networks ----

/// Random network over a small image: 1-4 hidden blocks of conv (any padding
/// or stride that fits), dense, pooling and ReLU, ending in a dense layer.
/// Biases are zero when `bias` is `None`, otherwise uniform in the range.
pub fn random_network(rng: &mut impl Rng, bias: Option<(f64, f64)>) -> Network {
    let c = rng.gen_range(1..=2);
    let side = [4, 6, 8][rng.gen_range(0..3)];
    let input_shape = vec![c, side, side];
    let mut shape = input_shape.clone();
    let mut layers = Vec::new();
    let blocks = rng.gen_range(1..=4);
    let bias_vec = |rng: &mut dyn rand::RngCore, n: usize| -> Tensor {
        let data = match bias {
            None => vec![0.0; n],
            Some((lo, hi)) => (0..n).map(|_| rng.gen_range(lo..=hi)).collect(),
        };
        Tensor::new(vec![n], data).unwrap()
    };
    for _ in 0..blocks {
        let choice = if shape.len() == 3 {
            rng.gen_range(0..4)
        } else {
            3
        };
        match choice {
            0 | 1 => {
                let oc = rng.gen_range(1..=3);
                let (k, padding) = if shape[1] >= 3 && rng.gen_bool(0.5) {
                    (3, rng.gen_range(0..=1))
                } else {
                    (1, 0)
                };
                let span = shape[1] + 2 * padding - k;
                let stride = if span % 2 == 0 && span > 0 && rng.gen_bool(0.3) {
                    2
                } else {
                    1
                };
                let kernel = uniform(rng, &[oc, shape[0], k, k], -1.0, 1.0);
                let conv = Conv2d::new(kernel, bias_vec(rng, oc), stride, padding).unwrap();
                let extent = span / stride + 1;
                shape = vec![oc, extent, extent];
                layers.push(Layer::Conv2d(conv));
                layers.push(Layer::Relu);
                if choice == 1 && shape[1] % 2 == 0 && shape[1] >= 2 {
                    let window = [2, 2];
                    layers.push(if rng.gen_bool(0.5) {
                        Layer::MaxPool { window, stride: 2 }
                    } else {
                        Layer::AvgPool { window, stride: 2 }
                    });
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
            }
            2 => {
                layers.push(Layer::Flatten);
                shape = vec![shape.iter().product()];
            }
            _ => {
                let n_in: usize = shape.iter().product();
                let n_out = rng.gen_range(2..=8);
                let w = uniform(rng, &[n_out, n_in], -1.0, 1.0);
                layers.push(Layer::Dense(Dense::new(w, bias_vec(rng, n_out)).unwrap()));
                layers.push(Layer::Relu);
                shape = vec![n_out];
            }
        }
    }
    if shape.len() == 3 {
        layers.push(Layer::Flatten);
        shape = vec![shape.iter().product()];
    }
    let classes = rng.gen_range(2..=5);
    let w = uniform(rng, &[classes, shape[0]], -1.0, 1.0);
    layers.push(Layer::Dense(Dense::new(w, bias_vec(rng, classes)).unwrap()));
    Network::new(layers, input_shape, -1.0, 1.0, classes).unwrap()
}

/// Random input in the network's box whose top logit is positive, if one is
/// found within `tries` draws.
pub fn input_with_positive_logit(
    rng: &mut impl Rng,
    net: &Network,
    tries: usize,
) -> Option<Tensor> {
    for _ in 0..tries {
        let x = uniform(rng, net.input_shape(), net.input_low(), net.input_high());
        let logits = net.logits(&x).unwrap();
        if logits.data()[logits.argmax()] > 0.0 {
            return Some(x);
        }
    }
    None
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
