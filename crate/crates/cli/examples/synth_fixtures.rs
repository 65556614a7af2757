//! Regenerates the committed fixtures under `fixtures/`.
//!
//! The networks are untrained: weights come from a seeded ChaCha stream, so the
//! output is byte-identical on every run. Usage:
//!
//! ```text
//! cargo run -p bnlrp-cli --example synth_fixtures -- [fixtures-dir]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use bnlrp::fusion::{fuse_network, FusionPolicy};
use bnlrp::heatmap::{channel_sum, render_heatmap, Normalization};
use bnlrp::lrp::{explain, LrpConfig};
use bnlrp::model::{normalize_pixels, save_model, Conv2d, Dense, Layer, Network, Placement};
use bnlrp::netpbm::{encode_pgm, encode_ppm, Image};
use bnlrp::tensor::{BnParams, Tensor};

const SAMPLES: usize = 3;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..=scale)).collect(),
    )
    .unwrap()
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, bias: f64) -> Layer {
    let s = (6.0 / inputs as f64).sqrt();
    let b = Tensor::new(
        vec![outputs],
        (0..outputs).map(|_| rng.gen_range(-bias..=bias)).collect(),
    )
    .unwrap();
    Layer::Dense(Dense::new(uniform(rng, vec![outputs, inputs], s), b).unwrap())
}

fn conv(rng: &mut ChaCha8Rng, ic: usize, oc: usize, k: usize, padding: usize) -> Layer {
    let s = (6.0 / (ic * k * k) as f64).sqrt();
    let b = uniform(rng, vec![oc], 0.05);
    Layer::Conv2d(Conv2d::new(uniform(rng, vec![oc, ic, k, k], s), b, 1, padding).unwrap())
}

fn bn_params(rng: &mut ChaCha8Rng, n: usize) -> BnParams {
    let mut v = |lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..=hi)).collect::<Vec<_>>();
    let gamma = v(0.5, 1.5);
    let beta = v(-0.1, 0.2);
    let mu = v(-0.1, 0.3);
    let sigma = v(0.5, 2.0);
    BnParams::new(gamma, beta, mu, sigma).unwrap()
}

fn bn(rng: &mut ChaCha8Rng, n: usize, placement: Option<Placement>) -> Layer {
    Layer::BatchNorm {
        params: bn_params(rng, n),
        placement,
        bypass: false,
    }
}

const AFTER: Option<Placement> = Some(Placement::AfterActivation);
const BEFORE: Option<Placement> = Some(Placement::BeforeActivation);

fn fc(rng: &mut ChaCha8Rng, with_bn: Option<Placement>) -> Vec<Layer> {
    let widths = [784, 64, 32, 10];
    let mut layers = Vec::new();
    for (k, w) in widths.windows(2).enumerate() {
        let last = k == widths.len() - 2;
        if with_bn == AFTER && k > 0 {
            layers.push(bn(rng, w[0], AFTER));
        }
        layers.push(dense(rng, w[0], w[1], 0.05));
        if !last {
            if with_bn == BEFORE {
                layers.push(bn(rng, w[1], BEFORE));
            }
            layers.push(Layer::Relu);
        }
    }
    layers
}

fn conv_mnist(rng: &mut ChaCha8Rng, with_bn: bool) -> Vec<Layer> {
    let mut layers = Vec::new();
    let channels = [(1, 4), (4, 8), (8, 8), (8, 8)];
    for (k, &(ic, oc)) in channels.iter().enumerate() {
        if with_bn {
            layers.push(bn(rng, ic, AFTER));
        }
        layers.push(conv(rng, ic, oc, 3, 0));
        layers.push(Layer::Relu);
        if k % 2 == 1 {
            layers.push(Layer::MaxPool {
                window: [2, 2],
                stride: 2,
            });
        }
    }
    layers.push(Layer::Flatten);
    layers.push(dense(rng, 128, 10, 0.05));
    layers
}

fn cifar(rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    // (in, out, pool afterwards)
    let plan = [
        (3, 8, false),
        (8, 8, true),
        (8, 16, false),
        (16, 16, true),
        (16, 16, true),
        (16, 16, false),
        (16, 16, true),
    ];
    for &(ic, oc, pool) in &plan {
        layers.push(conv(rng, ic, oc, 3, 1));
        layers.push(bn(rng, oc, BEFORE));
        layers.push(Layer::Relu);
        if pool {
            layers.push(Layer::MaxPool {
                window: [2, 2],
                stride: 2,
            });
        }
    }
    layers.push(Layer::Flatten);
    layers.push(dense(rng, 64, 10, 0.05));
    layers
}

/// BN in front of a padded conv: only `lower_then_fuse` can fold it.
fn conv_pre_padded(rng: &mut ChaCha8Rng) -> Vec<Layer> {
    vec![
        bn(rng, 1, AFTER),
        conv(rng, 1, 3, 3, 1),
        Layer::Relu,
        Layer::Flatten,
        dense(rng, 192, 4, 0.0),
    ]
}

/// Dense layers with strictly positive biases and an untagged BN.
fn dense_positive_bias(rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut first = dense(rng, 36, 8, 0.0);
    let mut last = dense(rng, 8, 3, 0.0);
    for layer in [&mut first, &mut last] {
        let Layer::Dense(d) = layer else {
            unreachable!()
        };
        let b = Tensor::new(
            vec![d.out_features()],
            (0..d.out_features())
                .map(|_| rng.gen_range(0.05..0.5))
                .collect(),
        )
        .unwrap();
        *d = Dense::new(d.weights().clone(), b).unwrap();
    }
    vec![first, Layer::Relu, bn(rng, 8, None), last]
}

/// Per-element BN between convs, plus average pooling.
fn mixed(rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let shape = [3, 6, 6];
    let n: usize = shape.iter().product();
    vec![
        conv(rng, 3, 3, 3, 1),
        Layer::Relu,
        Layer::BatchNorm {
            params: bn_params(rng, n),
            placement: AFTER,
            bypass: false,
        },
        conv(rng, 3, 2, 3, 0),
        Layer::Relu,
        Layer::AvgPool {
            window: [2, 2],
            stride: 2,
        },
        Layer::Flatten,
        dense(rng, 8, 3, 0.05),
    ]
}

/// Grayscale strokes on black, roughly digit-like.
fn strokes(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let mut img = vec![0u8; size * size];
    for _ in 0..3 {
        let m = (size / 6) as f64;
        let (mut x, mut y) = (
            rng.gen_range(m..size as f64 - m - 1.0),
            rng.gen_range(m..size as f64 - m - 1.0),
        );
        let (dx, dy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for _ in 0..size / 2 {
            for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (px, py) = (x as usize + ox, y as usize + oy);
                if px < size && py < size {
                    img[py * size + px] = 255;
                }
            }
            x = (x + dx).clamp(0.0, size as f64 - 2.0);
            y = (y + dy).clamp(0.0, size as f64 - 2.0);
        }
    }
    img
}

fn color_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let base: [f64; 3] = [
        rng.gen_range(0.0..255.0),
        rng.gen_range(0.0..255.0),
        rng.gen_range(0.0..255.0),
    ];
    (0..size * size * 3)
        .map(|i| (base[i % 3] * 0.5 + rng.gen_range(0.0..127.0)) as u8)
        .collect()
}

struct FixtureDef {
    name: &'static str,
    description: &'static str,
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    classes: usize,
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize]) -> Image {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let pixels = match c {
        1 => strokes(rng, h),
        _ => color_noise(rng, h),
    };
    Image {
        channels: c,
        width: w,
        height: h,
        pixels,
    }
}

fn encode(img: &Image) -> Vec<u8> {
    match img.channels {
        1 => encode_pgm(img.width, img.height, &img.pixels),
        _ => encode_ppm(img.width, img.height, &img.rgb()),
    }
}

fn logits_positive(net: &Network, img: &Image) -> bool {
    let x = normalize_pixels(&img.to_tensor().unwrap())
        .unwrap()
        .reshape(net.input_shape().to_vec())
        .unwrap();
    let logits = net.logits(&x).unwrap();
    logits.data()[logits.argmax()] > 0.0
}

fn heat_bytes(net: &Network, img: &Image) -> Vec<u8> {
    let raw = img.to_tensor().unwrap();
    let x = normalize_pixels(&raw)
        .unwrap()
        .reshape(net.input_shape().to_vec())
        .unwrap();
    let (fused, _) = fuse_network(net, FusionPolicy::Fuse).unwrap();
    let trace = explain(&fused, &x, &LrpConfig::default()).unwrap();
    let r = channel_sum(
        &trace
            .input_relevance()
            .reshape(raw.shape().to_vec())
            .unwrap(),
    )
    .unwrap();
    render_heatmap(&r, Normalization::Max).unwrap().to_ppm()
}

fn write(path: &Path, bytes: &[u8]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, bytes).unwrap();
    println!("wrote {}", path.display());
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mnist = vec![1, 28, 28];
    let defs = vec![
        FixtureDef {
            name: "fc1",
            description: "fully connected, no BN",
            layers: fc(&mut rng, None),
            input_shape: mnist.clone(),
            classes: 10,
        },
        FixtureDef {
            name: "fc2",
            description: "fully connected, BN after each activation",
            layers: fc(&mut rng, AFTER),
            input_shape: mnist.clone(),
            classes: 10,
        },
        FixtureDef {
            name: "fc3",
            description: "fully connected, BN before each activation",
            layers: fc(&mut rng, BEFORE),
            input_shape: mnist.clone(),
            classes: 10,
        },
        FixtureDef {
            name: "conv1",
            description: "four 3x3 convs with max pooling, no BN",
            layers: conv_mnist(&mut rng, false),
            input_shape: mnist.clone(),
            classes: 10,
        },
        FixtureDef {
            name: "conv2",
            description: "four 3x3 convs with max pooling, BN in front of every conv",
            layers: conv_mnist(&mut rng, true),
            input_shape: mnist.clone(),
            classes: 10,
        },
        FixtureDef {
            name: "cifar",
            description: "seven padded 3x3 convs, each followed by BN then ReLU",
            layers: cifar(&mut rng),
            input_shape: vec![3, 32, 32],
            classes: 10,
        },
        FixtureDef {
            name: "synthetic_conv_pre_padded",
            description: "BN in front of a padded conv",
            layers: conv_pre_padded(&mut rng),
            input_shape: vec![1, 8, 8],
            classes: 4,
        },
        FixtureDef {
            name: "synthetic_dense_bias",
            description: "dense layers with positive biases and an untagged BN",
            layers: dense_positive_bias(&mut rng),
            input_shape: vec![1, 6, 6],
            classes: 3,
        },
        FixtureDef {
            name: "synthetic_mixed",
            description: "per-element BN between convs, average pooling",
            layers: mixed(&mut rng),
            input_shape: vec![3, 6, 6],
            classes: 3,
        },
    ];

    for def in defs {
        let mut meta = Map::new();
        meta.insert("name".into(), json!(def.name));
        meta.insert("description".into(), json!(def.description));
        meta.insert("trained".into(), Value::Bool(false));
        meta.insert("generator".into(), json!("synth_fixtures"));
        let net = Network::with_metadata(
            def.layers,
            def.input_shape.clone(),
            -1.0,
            1.0,
            def.classes,
            meta,
        )
        .unwrap();
        let dir = root.join(def.name);
        fs::create_dir_all(&dir).unwrap();
        save_model(&net, dir.join("model.lrp.json")).unwrap();
        println!("wrote {}", dir.join("model.lrp.json").display());

        let ext = if def.input_shape[0] == 1 {
            "pgm"
        } else {
            "ppm"
        };
        let mut kept = 0;
        while kept < SAMPLES {
            let img = sample(&mut rng, &def.input_shape);
            if !logits_positive(&net, &img) {
                continue;
            }
            write(&dir.join(format!("sample_{kept}.{ext}")), &encode(&img));
            if kept == 0 {
                write(
                    &dir.join("golden/sample_0.heat.ppm"),
                    &heat_bytes(&net, &img),
                );
            }
            kept += 1;
        }
    }
}
