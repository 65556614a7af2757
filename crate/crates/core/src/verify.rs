//! Invariant checks on a model: fusion and lowering equivalence, relevance
//! conservation, and non-negativity, evaluated on random probe inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::{fuse_network, lower_conv_sparse, FusionPolicy};
use crate::lrp::{explain, LrpConfig};
use crate::model::{Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

pub const FUSION_REL_TOL: f64 = 1e-6;
pub const LOWERING_TOL: f64 = 1e-9;
pub const CONSERVATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub probes: usize,
    pub seed: u64,
    pub lrp: LrpConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            probes: 10,
            seed: 0,
            lrp: LrpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest observed deviation, in the check's own units.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub probes: usize,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Uniform random inputs in the network's box.
pub fn probe_inputs(network: &Network, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (network.input_low(), network.input_high());
    let n: usize = network.input_shape().iter().product();
    (0..count)
        .map(|_| {
            let data = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
            Tensor::new(network.input_shape().to_vec(), data)
                .expect("probe shape is the input shape")
        })
        .collect()
}

/// Copy of `network` with every dense and conv bias set to zero.
pub fn zero_biases(network: &Network) -> Result<Network> {
    let layers = network
        .layers()
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Dense(d) => {
                    let zero = Tensor::zeros(d.bias().shape().to_vec())?;
                    let mut z = Dense::new(d.weights().clone(), zero)?;
                    if let Some(s) = d.output_shape() {
                        z = z.with_output_shape(s.to_vec())?;
                    }
                    Layer::Dense(z)
                }
                Layer::Conv2d(c) => {
                    let zero = Tensor::zeros(c.bias().shape().to_vec())?;
                    Layer::Conv2d(Conv2d::new(
                        c.kernel().clone(),
                        zero,
                        c.stride(),
                        c.padding(),
                    )?)
                }
                other => other.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    network.with_layers(layers)
}

fn check(name: &str, worst: f64, tolerance: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: worst <= tolerance,
        // normalizes -0.0 from max() over negated values
        worst: worst + 0.0,
        tolerance,
        detail,
    }
}

fn fusion_check(network: &Network, policy: FusionPolicy, probes: &[Tensor]) -> Result<Check> {
    let (fused, report) = fuse_network(network, policy)?;
    let mut worst = 0.0f64;
    for x in probes {
        let a = fused.logits(x)?;
        let b = network.logits(x)?;
        for (a, b) in a.data().iter().zip(b.data()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Ok(check(
        &format!("fusion equivalence ({policy})"),
        worst,
        FUSION_REL_TOL,
        format!(
            "{} fusion(s), {} unfused BN(s); max |fused - original| / max(1, |original|)",
            report.records.len(),
            report.unfused.len()
        ),
    ))
}

fn lowering_check(network: &Network, probes: &[Tensor]) -> Result<Check> {
    let mut lowered = Vec::new();
    for (i, layer) in network.layers().iter().enumerate() {
        if let Layer::Conv2d(conv) = layer {
            lowered.push((i, lower_conv_sparse(conv, &network.shapes()[i])?));
        }
    }
    let mut worst = 0.0f64;
    for x in probes {
        let fp = network.forward(x)?;
        for (i, matrix) in &lowered {
            let via_matrix = matrix.apply(fp.activations[*i].data());
            for (a, b) in fp.activations[i + 1].data().iter().zip(&via_matrix) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(check(
        "lowering equivalence",
        worst,
        LOWERING_TOL,
        format!(
            "{} conv layer(s); max |conv - lowered matrix|",
            lowered.len()
        ),
    ))
}

/// Relevance balance on the zero-bias copy with no stabilizer: every layer's
/// sum must equal the seed.
fn exact_conservation_check(fused: &Network, probes: &[Tensor], cfg: &LrpConfig) -> Result<Check> {
    let net = zero_biases(fused)?;
    let cfg = LrpConfig {
        stabilizer_epsilon: 0.0,
        ..*cfg
    };
    let mut worst = 0.0f64;
    for x in probes {
        let trace = explain(&net, x, &cfg)?;
        let seed = trace.seed_logit;
        let scale = seed.abs().max(f64::MIN_POSITIVE);
        for s in &trace.sums {
            worst = worst.max((s - seed).abs() / scale);
        }
    }
    Ok(check(
        "conservation (zero bias, eps = 0)",
        worst,
        CONSERVATION_TOL,
        "max |layer sum - seed| / |seed|".into(),
    ))
}

/// Per-layer balance `sum(R_in) + absorbed == sum(R_out)`, no layer creating
/// relevance, and non-negative maps for non-negative seeds.
fn trace_checks(
    label: &str,
    net: &Network,
    probes: &[Tensor],
    cfg: &LrpConfig,
) -> Result<Vec<Check>> {
    let mut balance = 0.0f64;
    let mut growth = 0.0f64;
    let mut negative = 0.0f64;
    let mut skipped = 0;
    for x in probes {
        let trace = explain(net, x, cfg)?;
        balance = balance.max(trace.max_conservation_error());
        let seed = trace.seed_logit;
        let scale = seed.abs().max(f64::MIN_POSITIVE);
        for a in &trace.absorbed {
            growth = growth.max(-(a * seed.signum()) / scale);
        }
        if seed >= 0.0 {
            for r in &trace.relevances {
                negative = negative.max(r.data().iter().fold(0.0f64, |m, &v| m.max(-v)));
            }
        } else {
            skipped += 1;
        }
    }
    Ok(vec![
        check(
            &format!("relevance balance ({label})"),
            balance,
            CONSERVATION_TOL,
            "max |sum(R_in) + absorbed - sum(R_out)| / |seed|".into(),
        ),
        check(
            &format!("dissipation ({label})"),
            growth,
            CONSERVATION_TOL,
            "max relevance created by a layer / |seed|".into(),
        ),
        check(
            &format!("non-negativity ({label})"),
            negative,
            0.0,
            format!(
                "most negative relevance value; {skipped} probe(s) with a negative seed skipped"
            ),
        ),
    ])
}

pub fn verify_network(network: &Network, cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.lrp.validate()?;
    let probes = probe_inputs(network, cfg.probes, cfg.seed);
    let mut checks = vec![
        fusion_check(network, FusionPolicy::Fuse, &probes)?,
        fusion_check(network, FusionPolicy::LowerThenFuse, &probes)?,
        lowering_check(network, &probes)?,
    ];
    let (fused, _) = fuse_network(network, FusionPolicy::Fuse)?;
    let (bypass, _) = fuse_network(network, FusionPolicy::Bypass)?;
    checks.push(exact_conservation_check(&fused, &probes, &cfg.lrp)?);
    checks.extend(trace_checks("fused", &fused, &probes, &cfg.lrp)?);
    if network.has_batchnorm() {
        checks.extend(trace_checks("bypass", &bypass, &probes, &cfg.lrp)?);
    }
    Ok(VerifyReport {
        probes: probes.len(),
        checks,
    })
}

/// Random layer parameters in `[-1, 1]`, shared by tests and fixtures.
pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::new(shape, data).expect("random tensor shape is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Placement;
    use crate::tensor::BnParams;

    fn small_net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::new(
            random_tensor(&mut rng, vec![2, 1, 3, 3]),
            random_tensor(&mut rng, vec![2]),
            1,
            1,
        )
        .unwrap();
        let bn = BnParams::new(
            vec![1.5, 0.5],
            vec![0.1, -0.2],
            vec![0.3, 0.0],
            vec![2.0, 0.5],
        )
        .unwrap();
        let dense = Dense::new(
            random_tensor(&mut rng, vec![3, 32]),
            random_tensor(&mut rng, vec![3]),
        )
        .unwrap();
        let layers = vec![
            Layer::Conv2d(conv),
            Layer::BatchNorm {
                params: bn,
                placement: Some(Placement::BeforeActivation),
                bypass: false,
            },
            Layer::Relu,
            Layer::MaxPool {
                window: [2, 2],
                stride: 2,
            },
            Layer::Flatten,
            Layer::Dense(dense),
        ];
        Network::new(layers, vec![1, 4, 16], -1.0, 1.0, 3).unwrap()
    }

    #[test]
    fn small_network_passes() {
        let report = verify_network(
            &small_net(),
            &VerifyConfig {
                probes: 5,
                ..Default::default()
            },
        )
        .unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(report.checks.iter().any(|c| c.name.contains("bypass")));
    }

    #[test]
    fn probes_are_deterministic_and_in_box() {
        let net = small_net();
        let a = probe_inputs(&net, 3, 1);
        assert_eq!(a, probe_inputs(&net, 3, 1));
        assert!(a
            .iter()
            .flat_map(|t| t.data())
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_biases_keeps_weights() {
        let net = small_net();
        let z = zero_biases(&net).unwrap();
        let Layer::Dense(d) = &z.layers()[5] else {
            panic!()
        };
        assert!(d.bias().data().iter().all(|&b| b == 0.0));
        let Layer::Dense(orig) = &net.layers()[5] else {
            panic!()
        };
        assert_eq!(d.weights(), orig.weights());
    }
}
