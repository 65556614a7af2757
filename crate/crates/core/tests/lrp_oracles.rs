use bnlrp::fusion::lower_conv_to_dense;
use bnlrp::lrp::{
    explain, lrp_conv_zb, lrp_conv_zplus, lrp_dense_zb, lrp_dense_zplus, propagate, BiasPolicy,
    LrpConfig, PoolRule, SeedClass,
};
use bnlrp::model::{Dense, Layer, Network};
use bnlrp::tensor::Tensor;
use bnlrp_testkit as tk;
use rand::Rng;

fn exact() -> LrpConfig {
    LrpConfig {
        stabilizer_epsilon: 0.0,
        ..LrpConfig::default()
    }
}

fn positive_part(b: &[f64]) -> Vec<f64> {
    b.iter().map(|v| v.max(0.0)).collect()
}

#[test]
fn dense_zplus_matches_message_oracle() {
    let mut rng = tk::rng(11);
    for _ in 0..200 {
        let (n_in, n_out) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let d = tk::random_dense(&mut rng, n_in, n_out);
        let x = tk::uniform(&mut rng, &[n_in], 0.0, 2.0);
        let r = tk::uniform(&mut rng, &[n_out], 0.0, 1.0);
        let eps = if rng.gen_bool(0.5) { 0.0 } else { 1e-9 };
        let cfg = LrpConfig {
            stabilizer_epsilon: eps,
            ..LrpConfig::default()
        };
        let got = lrp_dense_zplus(&x, &d, &r, &cfg).unwrap();
        let (msg, want) = tk::zplus_messages(
            d.weights().data(),
            &positive_part(d.bias().data()),
            x.data(),
            r.data(),
            eps,
        );
        assert!(tk::max_abs_diff(got.relevance.data(), &want) <= 1e-12);
        // every message is non-negative and each column's messages add up to
        // what that column passes down
        assert!(msg.iter().flatten().all(|&m| m >= 0.0));
    }
}

#[test]
fn dense_zplus_conserves_without_bias() {
    let mut rng = tk::rng(12);
    for _ in 0..100 {
        let w = tk::uniform(&mut rng, &[4, 6], -1.0, 1.0);
        let d = Dense::new(w, Tensor::zeros(vec![4]).unwrap()).unwrap();
        let x = tk::uniform(&mut rng, &[6], 0.01, 1.0);
        // keep only columns with some positive weight so none is degenerate
        let mut r = tk::uniform(&mut rng, &[4], 0.0, 1.0).into_data();
        for (j, rj) in r.iter_mut().enumerate() {
            if d.weights().data()[j * 6..(j + 1) * 6]
                .iter()
                .all(|&v| v <= 0.0)
            {
                *rj = 0.0;
            }
        }
        let r = Tensor::new(vec![4], r).unwrap();
        let p = lrp_dense_zplus(&x, &d, &r, &exact()).unwrap();
        assert!((p.relevance.sum() - r.sum()).abs() <= 1e-12 * r.sum().max(1.0));
        assert_eq!(p.absorbed, 0.0);
    }
}

#[test]
fn dense_zb_matches_oracle() {
    let mut rng = tk::rng(13);
    for _ in 0..200 {
        let (n_in, n_out) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let d = tk::random_dense(&mut rng, n_in, n_out);
        let (low, high) = (-1.0, 1.0);
        let x = tk::uniform(&mut rng, &[n_in], low, high);
        let r = tk::uniform(&mut rng, &[n_out], 0.0, 1.0);
        let cfg = LrpConfig::default();
        let got = lrp_dense_zb(&x, &d, low, high, &r, &cfg).unwrap();
        let want = tk::zb_relevance(
            d.weights().data(),
            &positive_part(d.bias().data()),
            x.data(),
            low,
            high,
            r.data(),
            cfg.stabilizer_epsilon,
        );
        assert!(tk::max_abs_diff(got.relevance.data(), &want) <= 1e-12);
        assert!(got.relevance.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn zb_single_output_conserves() {
    let mut rng = tk::rng(14);
    for _ in 0..100 {
        let n = rng.gen_range(1..=10);
        let w = tk::uniform(&mut rng, &[1, n], -1.0, 1.0);
        let d = Dense::new(w, Tensor::zeros(vec![1]).unwrap()).unwrap();
        let x = tk::uniform(&mut rng, &[n], -1.0, 1.0);
        let r = Tensor::new(vec![1], vec![rng.gen_range(0.1..2.0)]).unwrap();
        let p = lrp_dense_zb(&x, &d, -1.0, 1.0, &r, &exact()).unwrap();
        assert!((p.relevance.sum() - r.sum()).abs() <= 1e-14 * r.sum());
    }
}

#[test]
fn conv_rules_match_lowered_dense() {
    let mut rng = tk::rng(15);
    for _ in 0..60 {
        let g = tk::random_geometry(&mut rng, None);
        let conv = tk::random_conv(&mut rng, &g);
        let dense = lower_conv_to_dense(&conv, &g.input_shape()).unwrap();
        let r = tk::uniform(&mut rng, &g.output_shape(), 0.0, 1.0);
        let cfg = LrpConfig::default();

        let x = tk::uniform(&mut rng, &g.input_shape(), 0.0, 1.0);
        let a = lrp_conv_zplus(&x, &conv, &r, &cfg).unwrap();
        let b = lrp_dense_zplus(&x, &dense, &r, &cfg).unwrap();
        assert!(
            a.relevance.max_abs_diff(&b.relevance).unwrap() <= 1e-9,
            "{g:?}"
        );
        assert!((a.absorbed - b.absorbed).abs() <= 1e-9);

        let x = tk::uniform(&mut rng, &g.input_shape(), -1.0, 1.0);
        let a = lrp_conv_zb(&x, &conv, -1.0, 1.0, &r, &cfg).unwrap();
        let b = lrp_dense_zb(&x, &dense, -1.0, 1.0, &r, &cfg).unwrap();
        assert!(
            a.relevance.max_abs_diff(&b.relevance).unwrap() <= 1e-9,
            "{g:?}"
        );
    }
}

#[test]
fn random_zero_bias_networks_conserve() {
    let mut rng = tk::rng(16);
    let mut checked = 0;
    while checked < 100 {
        let net = tk::random_network(&mut rng, None);
        let Some(x) = tk::input_with_positive_logit(&mut rng, &net, 20) else {
            continue;
        };
        for pool_rule in [PoolRule::WinnerTakeAll, PoolRule::Proportional] {
            let cfg = LrpConfig {
                pool_rule,
                ..exact()
            };
            let trace = explain(&net, &x, &cfg).unwrap();
            let seed = trace.seed_logit;
            for s in &trace.sums {
                assert!((s - seed).abs() <= 1e-10 * seed, "sums {:?}", trace.sums);
            }
            for r in &trace.relevances {
                assert!(r.data().iter().all(|&v| v >= 0.0));
            }
        }
        checked += 1;
    }
}

#[test]
fn positive_biases_only_dissipate() {
    let mut rng = tk::rng(17);
    let mut checked = 0;
    while checked < 100 {
        let net = tk::random_network(&mut rng, Some((0.0, 0.5)));
        let Some(x) = tk::input_with_positive_logit(&mut rng, &net, 20) else {
            continue;
        };
        let trace = explain(&net, &x, &LrpConfig::default()).unwrap();
        for i in 0..trace.absorbed.len() {
            assert!(trace.sums[i] <= trace.sums[i + 1] * (1.0 + 1e-12) + 1e-300);
            assert!(trace.absorbed[i] >= 0.0);
        }
        trace.check_conservation(1e-10).unwrap();
        checked += 1;
    }
}

#[test]
fn require_nonpositive_rejects_positive_bias_with_layer_index() {
    let mut rng = tk::rng(18);
    let net = tk::random_network(&mut rng, Some((0.1, 0.5)));
    let x = tk::uniform(&mut rng, net.input_shape(), -1.0, 1.0);
    let cfg = LrpConfig {
        bias_policy: BiasPolicy::RequireNonpositive,
        ..LrpConfig::default()
    };
    let err = explain(&net, &x, &cfg).unwrap_err();
    assert_eq!(err.category(), "policy");
    assert!(err.to_string().starts_with("layer "), "{err}");
}

#[test]
fn seed_scaling_scales_every_relevance() {
    let mut rng = tk::rng(19);
    let mut checked = 0;
    while checked < 30 {
        let net = tk::random_network(&mut rng, Some((0.0, 0.3)));
        let Some(x) = tk::input_with_positive_logit(&mut rng, &net, 20) else {
            continue;
        };
        let fp = net.forward(&x).unwrap();
        let seed = tk::uniform(&mut rng, fp.logits().shape(), 0.0, 1.0);
        let cfg = LrpConfig::default();
        let base = propagate(&net, &fp, &seed, &cfg).unwrap();
        // powers of two scale without rounding
        let scaled = propagate(&net, &fp, &seed.map(|v| v * 8.0).unwrap(), &cfg).unwrap();
        for (a, b) in base.relevances.iter().zip(&scaled.relevances) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert_eq!(u * 8.0, *v);
            }
        }
        let c = rng.gen_range(0.01..100.0);
        let scaled = propagate(&net, &fp, &seed.map(|v| v * c).unwrap(), &cfg).unwrap();
        for (a, b) in base.relevances.iter().zip(&scaled.relevances) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u * c - v).abs() <= 1e-12 * (u * c).abs().max(1e-300));
            }
        }
        checked += 1;
    }
}

#[test]
fn two_layer_positive_network_conserves_seed() {
    let mut rng = tk::rng(20);
    let w1 = tk::uniform(&mut rng, &[5, 4], 0.0, 1.0);
    let w2 = tk::uniform(&mut rng, &[3, 5], 0.0, 1.0);
    let layers = vec![
        Layer::Dense(Dense::new(w1, Tensor::zeros(vec![5]).unwrap()).unwrap()),
        Layer::Relu,
        Layer::Dense(Dense::new(w2, Tensor::zeros(vec![3]).unwrap()).unwrap()),
    ];
    let net = Network::new(layers, vec![4], -1.0, 1.0, 3).unwrap();
    let x = Tensor::new(vec![4], vec![0.5, 0.25, 0.75, 1.0]).unwrap();
    for k in 0..3 {
        let cfg = LrpConfig {
            seed_class: SeedClass::Index(k),
            ..exact()
        };
        let trace = explain(&net, &x, &cfg).unwrap();
        for s in &trace.sums {
            assert!((s - trace.seed_logit).abs() <= 1e-10 * trace.seed_logit);
        }
    }
}

#[test]
fn bypassed_batchnorm_is_transparent() {
    use bnlrp::fusion::{fuse_network, FusionPolicy};
    use bnlrp::model::Placement;
    let mut rng = tk::rng(21);
    let d1 = tk::random_dense(&mut rng, 6, 5);
    let d2 = tk::random_dense(&mut rng, 5, 3);
    let layers = vec![
        Layer::Dense(d1),
        Layer::Relu,
        Layer::BatchNorm {
            params: tk::random_bn(&mut rng, 5),
            placement: Some(Placement::AfterActivation),
            bypass: false,
        },
        Layer::Dense(d2),
    ];
    let net = Network::new(layers, vec![6], -1.0, 1.0, 3).unwrap();
    let (bypass, report) = fuse_network(&net, FusionPolicy::Bypass).unwrap();
    assert_eq!(report.unfused.len(), 1);
    let x = tk::uniform(&mut rng, &[6], -1.0, 1.0);
    let cfg = LrpConfig {
        seed_class: SeedClass::Index(0),
        ..LrpConfig::default()
    };
    let trace = explain(&bypass, &x, &cfg).unwrap();
    assert_eq!(trace.relevances[2], trace.relevances[3]);
    trace.check_conservation(1e-10).unwrap();
    // forward pass still applies the normalization
    assert_eq!(bypass.logits(&x).unwrap(), net.logits(&x).unwrap());
}
