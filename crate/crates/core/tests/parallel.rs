#![cfg(feature = "parallel")]

use std::path::PathBuf;

use bnlrp::fusion::{fuse_network, FusionPolicy};
use bnlrp::lrp::{explain, LrpConfig};
use bnlrp::model::load_model;
use bnlrp::verify::probe_inputs;

fn run_on(threads: usize, f: impl FnOnce() -> Vec<Vec<f64>> + Send) -> Vec<Vec<f64>> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/cifar/model.lrp.json");
    let net = load_model(path).unwrap();
    let (fused, _) = fuse_network(&net, FusionPolicy::Fuse).unwrap();
    let x = probe_inputs(&net, 1, 3).remove(0);
    let work = || {
        let fp = fused.forward(&x).unwrap();
        let trace = explain(&fused, &x, &LrpConfig::default()).unwrap();
        fp.activations
            .iter()
            .chain(&trace.relevances)
            .map(|t| t.data().to_vec())
            .collect()
    };
    let one = run_on(1, work);
    let many = run_on(4, work);
    // bitwise comparison, NaN-free by construction
    for (a, b) in one.iter().zip(&many) {
        assert!(a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
